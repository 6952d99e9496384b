//! Generative models that turn prior draws θ into prior predictive target
//! quantities. All simulators work on `[B, S, K]` prior draws and return
//! `[B, S]` samples per target.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Gumbel, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Continuous predictor `x = (1..=n) / sd(1..=n)` summarized by the two
/// evaluation points at its 25% and 75% quantiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinomialDesign {
    pub x0: f64,
    pub x1: f64,
}

impl BinomialDesign {
    /// Standard deviation uses the population convention.
    pub fn scaled_range(n: usize) -> Self {
        let raw: Vec<f64> = (1..=n).map(|i| i as f64).collect();
        let mean = raw.iter().sum::<f64>() / n as f64;
        let sd = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let x: Vec<f64> = raw.iter().map(|v| v / sd).collect();
        BinomialDesign {
            x0: quantile_type7(&x, 0.25),
            x1: quantile_type7(&x, 0.75),
        }
    }

    pub fn points(&self) -> [(String, f64); 2] {
        [("y|x0".into(), self.x0), ("y|x1".into(), self.x1)]
    }
}

fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Dummy-coded factor; one row `(x1, x2)` per group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupDesign {
    pub groups: Vec<[f64; 2]>,
}

impl Default for GroupDesign {
    fn default() -> Self {
        GroupDesign {
            groups: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BinomialSampling {
    /// Gumbel-softmax over outcomes with expected-value readout.
    Relaxed { temperature: f64 },
    /// Hard draws; no gradient.
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GenerativeModel {
    /// y ~ Binomial(total_count, sigmoid(β0 + β1 x)).
    BinomialRegression { total_count: u32, design: BinomialDesign },
    /// y ~ Normal(β0 + β1 x1 + β2 x2, σ) with dummy-coded groups.
    NormalRegression { design: GroupDesign },
}

impl GenerativeModel {
    pub fn binomial() -> Self {
        GenerativeModel::BinomialRegression {
            total_count: 30,
            design: BinomialDesign::scaled_range(50),
        }
    }

    pub fn normal() -> Self {
        GenerativeModel::NormalRegression {
            design: GroupDesign::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.param_names().len()
    }

    pub fn param_names(&self) -> Vec<String> {
        let names: &[&str] = match self {
            GenerativeModel::BinomialRegression { .. } => &["beta0", "beta1"],
            GenerativeModel::NormalRegression { .. } => &["beta0", "beta1", "beta2", "sigma"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    pub fn positivity_dims(&self) -> Vec<usize> {
        match self {
            GenerativeModel::BinomialRegression { .. } => vec![],
            GenerativeModel::NormalRegression { .. } => vec![3],
        }
    }

    pub fn target_names(&self) -> Vec<String> {
        match self {
            GenerativeModel::BinomialRegression { design, .. } => {
                design.points().into_iter().map(|(n, _)| n).collect()
            }
            GenerativeModel::NormalRegression { design } => (1..=design.groups.len())
                .map(|i| format!("y|gr{i}"))
                .chain(std::iter::once("R2".to_string()))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            GenerativeModel::BinomialRegression { total_count, design } => {
                if *total_count == 0 {
                    return Err(Error::config("binomial total_count must be >= 1"));
                }
                if !(design.x0 < design.x1) {
                    return Err(Error::config("design needs x0 < x1"));
                }
            }
            GenerativeModel::NormalRegression { design } => {
                if design.groups.len() < 2 {
                    return Err(Error::config("normal design needs at least two groups"));
                }
            }
        }
        Ok(())
    }

    /// All target quantities as `[B, S]` samples, in [`Self::target_names`] order.
    pub fn simulate(
        &self,
        g: &mut Graph,
        theta: Var,
        sampling: BinomialSampling,
        rng: &mut impl Rng,
    ) -> Result<Vec<(String, Var)>> {
        check_theta(g, theta, self.dim())?;
        match self {
            GenerativeModel::BinomialRegression { total_count, design } => {
                simulate_binomial(g, theta, design, *total_count, sampling, rng)
            }
            GenerativeModel::NormalRegression { design } => {
                let mut out = simulate_normal(g, theta, design, rng)?;
                out.push(("R2".into(), compute_r2(g, theta, design)?));
                Ok(out)
            }
        }
    }
}

fn check_theta(g: &Graph, theta: Var, k: usize) -> Result<()> {
    let shape = g.shape(theta);
    if shape.len() != 3 || shape[2] != k {
        return Err(Error::shape(format!("expected θ of shape [B, S, {k}], got {shape:?}")));
    }
    Ok(())
}

/// Coordinate `k` of `[B, S, K]` draws as `[B, S]`.
pub fn param_column(g: &mut Graph, theta: Var, k: usize) -> Result<Var> {
    let shape = g.shape(theta).to_vec();
    let col = g.gather_last(theta, &[k])?;
    g.reshape(col, &shape[..2])
}

fn noise<R: Rng>(shape: &[usize], rng: &mut R, mut draw: impl FnMut(&mut R) -> f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| draw(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

fn ln_choose(n: u32) -> Vec<f64> {
    let mut out = Vec::with_capacity(n as usize + 1);
    let mut acc = 0.0;
    out.push(acc);
    for k in 1..=n {
        acc += ((n - k + 1) as f64).ln() - (k as f64).ln();
        out.push(acc);
    }
    out
}

/// Binomial predictive draws at the two design points.
pub fn simulate_binomial(
    g: &mut Graph,
    theta: Var,
    design: &BinomialDesign,
    total_count: u32,
    sampling: BinomialSampling,
    rng: &mut impl Rng,
) -> Result<Vec<(String, Var)>> {
    check_theta(g, theta, 2)?;
    if let BinomialSampling::Relaxed { temperature } = sampling {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::config(format!("temperature must be > 0, got {temperature}")));
        }
    }
    let bs = g.shape(theta)[..2].to_vec();
    let b0 = param_column(g, theta, 0)?;
    let b1 = param_column(g, theta, 1)?;
    let n = total_count;
    let outcomes = Tensor::from_vec((0..=n).map(f64::from).collect());
    let mut out = Vec::new();
    for (name, x) in design.points() {
        let slope = g.affine(b1, x, 0.0);
        let eta = g.add(b0, slope)?;
        let y = match sampling {
            BinomialSampling::Exact => {
                let probs = g.value(eta).map(|e| 1.0 / (1.0 + (-e).exp()));
                let mut it = probs.data().iter();
                let draws = noise(&bs, rng, |r| {
                    let p = *it.next().expect("one probability per draw");
                    Binomial::new(u64::from(n), p).expect("p in [0,1]").sample(r) as f64
                });
                g.constant(draws)
            }
            BinomialSampling::Relaxed { temperature } => {
                let mut cube = bs.clone();
                cube.push(n as usize + 1);
                // log pmf_k = ln C(n,k) + k ln p + (n-k) ln(1-p)
                let neg_eta = g.neg(eta);
                let sp_neg = g.softplus(neg_eta);
                let log_p = g.neg(sp_neg);
                let sp = g.softplus(eta);
                let log_q = g.neg(sp);
                let mut col = bs.clone();
                col.push(1);
                let log_p = g.reshape(log_p, &col)?;
                let log_q = g.reshape(log_q, &col)?;
                let k = g.constant(outcomes.clone());
                let rest = g.constant(outcomes.map(|v| f64::from(n) - v));
                let lnc = g.constant(Tensor::from_vec(ln_choose(n)));
                let a = g.mul(log_p, k)?;
                let b = g.mul(log_q, rest)?;
                let ab = g.add(a, b)?;
                let log_pmf = g.add(ab, lnc)?;
                let gumbel = Gumbel::new(0.0, 1.0).expect("unit gumbel");
                let gn = g.constant(noise(&cube, rng, |r| gumbel.sample(r)));
                let perturbed = g.add(log_pmf, gn)?;
                let logits = g.affine(perturbed, 1.0 / temperature, 0.0);
                let w = g.softmax_last(logits)?;
                let weighted = g.mul(w, k)?;
                g.sum(weighted, 2)?
            }
        };
        out.push((name, y));
    }
    Ok(out)
}

fn group_means(g: &mut Graph, theta: Var, design: &GroupDesign) -> Result<Vec<Var>> {
    let b0 = param_column(g, theta, 0)?;
    let b1 = param_column(g, theta, 1)?;
    let b2 = param_column(g, theta, 2)?;
    design
        .groups
        .iter()
        .map(|&[x1, x2]| {
            let t1 = g.affine(b1, x1, 0.0);
            let t2 = g.affine(b2, x2, 0.0);
            let s = g.add(b0, t1)?;
            g.add(s, t2)
        })
        .collect()
}

fn sigma_column(g: &mut Graph, theta: Var) -> Result<Var> {
    let sigma = param_column(g, theta, 3)?;
    if let Some(bad) = g.value(sigma).data().iter().find(|v| !(**v > 0.0)) {
        return Err(Error::domain("simulate_normal", 0, format!("non-positive σ = {bad}")));
    }
    Ok(sigma)
}

/// One predictive draw per prior sample and group.
pub fn simulate_normal(
    g: &mut Graph,
    theta: Var,
    design: &GroupDesign,
    rng: &mut impl Rng,
) -> Result<Vec<(String, Var)>> {
    check_theta(g, theta, 4)?;
    let bs = g.shape(theta)[..2].to_vec();
    let sigma = sigma_column(g, theta)?;
    let means = group_means(g, theta, design)?;
    let mut out = Vec::with_capacity(means.len());
    for (i, mu) in means.into_iter().enumerate() {
        let eps = g.constant(noise(&bs, rng, |r| r.sample(StandardNormal)));
        let scaled = g.mul(sigma, eps)?;
        out.push((format!("y|gr{}", i + 1), g.add(mu, scaled)?));
    }
    Ok(out)
}

/// Var_groups(μ) / (Var_groups(μ) + σ²), population variance over groups.
pub fn compute_r2(g: &mut Graph, theta: Var, design: &GroupDesign) -> Result<Var> {
    check_theta(g, theta, 4)?;
    let mut col = g.shape(theta)[..2].to_vec();
    col.push(1);
    let sigma = sigma_column(g, theta)?;
    let means = group_means(g, theta, design)?;
    let cols = means
        .into_iter()
        .map(|m| g.reshape(m, &col))
        .collect::<Result<Vec<_>>>()?;
    let stacked = g.concat_last(&cols)?;
    let between = g.variance(stacked, 2)?;
    let noise = g.square(sigma);
    let total = g.add(between, noise)?;
    g.div(between, total)
}

/// All unordered coordinate pairs `(a, b)` with `a < b`.
pub fn param_pairs(k: usize) -> Vec<(usize, usize)> {
    (0..k).flat_map(|a| (a + 1..k).map(move |b| (a, b))).collect()
}

/// Pearson correlations over the S draws for every pair, `[B, P]`, in
/// [`param_pairs`] order. A coordinate with zero variance yields 0.
pub fn compute_param_correlations(g: &mut Graph, theta: Var) -> Result<Var> {
    let shape = g.shape(theta).to_vec();
    if shape.len() != 3 || shape[2] < 2 {
        return Err(Error::shape(format!("expected [B, S, K>=2] draws, got {shape:?}")));
    }
    if shape[1] < 2 {
        return Err(Error::config("correlations need at least 2 samples"));
    }
    let (b, k) = (shape[0], shape[2]);
    let pairs = param_pairs(k);
    let ia: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let ib: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let mean = g.mean(theta, 1)?;
    let mean = g.reshape(mean, &[b, 1, k])?;
    let c = g.sub(theta, mean)?;
    let ca = g.gather_last(c, &ia)?;
    let cb = g.gather_last(c, &ib)?;
    let prod = g.mul(ca, cb)?;
    let cov = g.mean(prod, 1)?;
    let sq = g.square(c);
    let var = g.mean(sq, 1)?;
    let va = g.gather_last(var, &ia)?;
    let vb = g.gather_last(var, &ib)?;
    let vv = g.mul(va, vb)?;
    let degenerate = g.value(vv).map(|v| if v > 0.0 { 0.0 } else { 1.0 });
    if degenerate.data().iter().any(|&m| m > 0.0) {
        log::warn!("zero-variance coordinate in prior draws; correlation set to 0");
    }
    let keep = g.constant(degenerate.map(|m| 1.0 - m));
    let mask = g.constant(degenerate);
    let denom = g.sqrt(vv)?;
    let denom = g.add(denom, mask)?;
    let num = g.mul(cov, keep)?;
    g.div(num, denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn theta(g: &mut Graph, rows: &[Vec<f64>]) -> Var {
        let k = rows[0].len();
        let t = Tensor::from_rows(rows).unwrap().reshape(&[1, rows.len(), k]).unwrap();
        g.constant(t)
    }

    fn repeat(row: &[f64], s: usize) -> Vec<Vec<f64>> {
        vec![row.to_vec(); s]
    }

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn design_points() {
        let d = BinomialDesign::scaled_range(50);
        assert!((d.x0 - 0.9182).abs() < 1e-4, "{}", d.x0);
        assert!((d.x1 - 2.6159).abs() < 1e-4, "{}", d.x1);
    }

    #[test]
    fn ln_choose_matches_direct() {
        let l = ln_choose(30);
        assert!((l[15] - 155_117_520f64.ln()).abs() < 1e-9);
        assert_eq!(l[0], 0.0);
        assert!(l[30].abs() < 1e-9);
    }

    #[test]
    fn relaxed_binomial_fair_coin_mean() {
        let mut g = Graph::new();
        let t = theta(&mut g, &repeat(&[0.0, 0.0], 10_000));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = simulate_binomial(
            &mut g,
            t,
            &BinomialDesign::scaled_range(50),
            30,
            BinomialSampling::Relaxed { temperature: 1.0 },
            &mut rng,
        )
        .unwrap();
        let m = mean(g.value(out[0].1).data());
        assert!((14.5..=15.5).contains(&m), "{m}");
    }

    #[test]
    fn relaxed_binomial_saturates() {
        let mut g = Graph::new();
        let t = theta(&mut g, &repeat(&[20.0, 0.0], 500));
        let out = simulate_binomial(
            &mut g,
            t,
            &BinomialDesign::scaled_range(50),
            30,
            BinomialSampling::Relaxed { temperature: 1.0 },
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        assert!(g.value(out[1].1).data().iter().all(|&y| y > 29.5));
    }

    #[test]
    fn relaxed_binomial_rejects_bad_temperature() {
        let mut g = Graph::new();
        let t = theta(&mut g, &repeat(&[0.0, 0.0], 3));
        let r = simulate_binomial(
            &mut g,
            t,
            &BinomialDesign::scaled_range(50),
            30,
            BinomialSampling::Relaxed { temperature: 0.0 },
            &mut ChaCha8Rng::seed_from_u64(2),
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn relaxed_converges_to_exact_at_low_temperature() {
        let run = |sampling| {
            let mut g = Graph::new();
            let t = theta(&mut g, &repeat(&[0.0, 0.0], 10_000));
            let out = simulate_binomial(
                &mut g,
                t,
                &BinomialDesign::scaled_range(50),
                30,
                sampling,
                &mut ChaCha8Rng::seed_from_u64(3),
            )
            .unwrap();
            mean(g.value(out[0].1).data())
        };
        let relaxed = run(BinomialSampling::Relaxed { temperature: 0.05 });
        let exact = run(BinomialSampling::Exact);
        assert!((relaxed - exact).abs() < 0.5, "{relaxed} vs {exact}");
    }

    #[test]
    fn relaxed_gradient_wrt_intercept() {
        // common random numbers: same seed for every evaluation
        let design = BinomialDesign::scaled_range(50);
        let eval = |b0: f64| -> (f64, f64) {
            let mut g = Graph::new();
            let rows = repeat(&[b0, 0.2], 2000);
            let t = Tensor::from_rows(&rows).unwrap().reshape(&[1, 2000, 2]).unwrap();
            let t = g.param(t);
            let out = simulate_binomial(
                &mut g,
                t,
                &design,
                30,
                BinomialSampling::Relaxed { temperature: 1.0 },
                &mut ChaCha8Rng::seed_from_u64(4),
            )
            .unwrap();
            let m = g.mean_all(out[0].1).unwrap();
            g.backward(m).unwrap();
            let grad: f64 = g.grad(t).unwrap().data().iter().step_by(2).sum();
            (g.value(m).item().unwrap(), grad)
        };
        let h = 1e-4;
        let (_, analytic) = eval(0.3);
        let numeric = (eval(0.3 + h).0 - eval(0.3 - h).0) / (2.0 * h);
        assert!(analytic > 0.0);
        assert!((analytic - numeric).abs() / numeric.abs() < 1e-2, "{analytic} vs {numeric}");
    }

    #[test]
    fn normal_noise_free_limit() {
        let mut g = Graph::new();
        let t = theta(&mut g, &[vec![10.0, 7.0, 2.5, 1e-12], vec![1.0, -2.0, 3.0, 1e-12]]);
        let out = simulate_normal(&mut g, t, &GroupDesign::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let gr2 = g.value(out[1].1).data();
        assert!((gr2[0] - 17.0).abs() < 1e-9 && (gr2[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn normal_group_three_mean() {
        let mut g = Graph::new();
        let t = theta(&mut g, &repeat(&[10.0, 7.0, 2.5, 2.5], 10_000));
        let out = simulate_normal(&mut g, t, &GroupDesign::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let m = mean(g.value(out[2].1).data());
        assert!((12.3..=12.7).contains(&m), "{m}");
    }

    #[test]
    fn normal_is_reproducible_and_rejects_bad_sigma() {
        let run = || {
            let mut g = Graph::new();
            let t = theta(&mut g, &repeat(&[0.0, 1.0, 2.0, 1.0], 50));
            let out = simulate_normal(&mut g, t, &GroupDesign::default(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
            g.value(out[0].1).clone()
        };
        assert_eq!(run(), run());
        let mut g = Graph::new();
        let t = theta(&mut g, &[vec![0.0, 1.0, 2.0, 0.0]]);
        let r = simulate_normal(&mut g, t, &GroupDesign::default(), &mut ChaCha8Rng::seed_from_u64(6));
        assert!(matches!(r, Err(Error::Domain { .. })));
    }

    #[test]
    fn r2_examples() {
        let mut g = Graph::new();
        let t = theta(
            &mut g,
            &[
                vec![5.0, 0.0, 0.0, 1.0],
                vec![5.0, 3.0, 0.0, 1e-12],
                vec![10.0, 7.0, 2.5, 2.5],
            ],
        );
        let r2 = compute_r2(&mut g, t, &GroupDesign::default()).unwrap();
        let v = g.value(r2).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 1.0).abs() < 1e-12);
        // group means {10, 17, 12.5}: population variance 151/18
        let between = 151.0 / 18.0;
        assert!((v[2] - between / (between + 6.25)).abs() < 1e-12);
        assert!((v[2] - 0.5731).abs() < 1e-4);
    }

    #[test]
    fn correlation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..200).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f64> = (0..200).map(|_| rng.sample(StandardNormal)).collect();
        let rows: Vec<Vec<f64>> = (0..200).map(|i| vec![a[i], a[i], -a[i], b[i]]).collect();
        let mut g = Graph::new();
        let t = theta(&mut g, &rows);
        let c = compute_param_correlations(&mut g, t).unwrap();
        let v = g.value(c).data();
        assert_eq!(param_pairs(4)[0], (0, 1));
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!((v[1] + 1.0).abs() < 1e-12);
        assert!(v[2].abs() < 0.2);
    }

    #[test]
    fn correlation_of_constant_is_zero() {
        let mut g = Graph::new();
        let t = theta(&mut g, &[vec![1.0, 0.0], vec![1.0, 2.0], vec![1.0, 5.0]]);
        let c = compute_param_correlations(&mut g, t).unwrap();
        assert_eq!(g.value(c).data(), &[0.0]);
    }
}
