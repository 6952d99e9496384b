//! Ground-truth priors and the simulated expert built on them.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::elicitation::{build_statistics, ElicitationPlan, ElicitedStatisticSet, Side};
use crate::error::{Error, Result};
use crate::models::{BinomialSampling, GenerativeModel};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum Marginal {
    Normal { loc: f64, scale: f64 },
    /// Two-piece skew normal; `shape > 1` skews to the right.
    SkewNormal { loc: f64, scale: f64, shape: f64 },
    /// Shape-rate parameterization, mean = concentration / rate.
    Gamma { concentration: f64, rate: f64 },
}

impl Marginal {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Marginal::Normal { loc, scale } => loc.is_finite() && scale > 0.0,
            Marginal::SkewNormal { loc, scale, shape } => loc.is_finite() && scale > 0.0 && shape > 0.0,
            Marginal::Gamma { concentration, rate } => concentration > 0.0 && rate > 0.0,
        };
        if ok && self.params().iter().all(|(_, v)| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::config(format!("invalid marginal {self:?}")))
        }
    }

    fn params(&self) -> Vec<(&'static str, f64)> {
        match *self {
            Marginal::Normal { loc, scale } => vec![("loc", loc), ("scale", scale)],
            Marginal::SkewNormal { loc, scale, shape } => {
                vec![("loc", loc), ("scale", scale), ("shape", shape)]
            }
            Marginal::Gamma { concentration, rate } => {
                vec![("concentration", concentration), ("rate", rate)]
            }
        }
    }

    fn set(&mut self, key: &str, value: f64) -> Result<()> {
        let slot = match (self, key) {
            (Marginal::Normal { loc, .. } | Marginal::SkewNormal { loc, .. }, "loc") => loc,
            (Marginal::Normal { scale, .. } | Marginal::SkewNormal { scale, .. }, "scale") => scale,
            (Marginal::SkewNormal { shape, .. }, "shape") => shape,
            (Marginal::Gamma { concentration, .. }, "concentration") => concentration,
            (Marginal::Gamma { rate, .. }, "rate") => rate,
            (m, k) => return Err(Error::config(format!("{m:?} has no hyperparameter '{k}'"))),
        };
        *slot = value;
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            Marginal::Normal { loc, scale } => loc + scale * rng.sample::<f64, _>(StandardNormal),
            Marginal::SkewNormal { loc, scale, shape } => {
                let z: f64 = rng.sample::<f64, _>(StandardNormal).abs();
                let upper = shape * shape / (1.0 + shape * shape);
                if rng.random::<f64>() < upper {
                    loc + scale * shape * z
                } else {
                    loc - scale * z / shape
                }
            }
            Marginal::Gamma { concentration, rate } => Gamma::new(concentration, 1.0 / rate)
                .expect("validated gamma parameters")
                .sample(rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "block", rename_all = "snake_case")]
pub enum PriorBlock {
    Independent {
        name: String,
        #[serde(flatten)]
        marginal: Marginal,
    },
    /// Coefficient block with covariance D(s)·R·D(s).
    MvNormal {
        names: Vec<String>,
        mean: Vec<f64>,
        scales: Vec<f64>,
        correlation: Vec<Vec<f64>>,
    },
}

impl PriorBlock {
    pub fn normal(name: &str, loc: f64, scale: f64) -> Self {
        PriorBlock::Independent {
            name: name.into(),
            marginal: Marginal::Normal { loc, scale },
        }
    }

    pub fn skew_normal(name: &str, loc: f64, scale: f64, shape: f64) -> Self {
        PriorBlock::Independent {
            name: name.into(),
            marginal: Marginal::SkewNormal { loc, scale, shape },
        }
    }

    pub fn gamma(name: &str, concentration: f64, rate: f64) -> Self {
        PriorBlock::Independent {
            name: name.into(),
            marginal: Marginal::Gamma { concentration, rate },
        }
    }

    fn dim(&self) -> usize {
        match self {
            PriorBlock::Independent { .. } => 1,
            PriorBlock::MvNormal { names, .. } => names.len(),
        }
    }
}

/// One tunable hyperparameter of a [`TruePrior`], e.g. `beta0.loc`.
#[derive(Clone, Debug, PartialEq)]
pub struct Hyperparameter {
    pub name: String,
    pub value: f64,
    pub kind: HyperKind,
    /// Typical spread used to size sweeps around `value`.
    pub scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HyperKind {
    Location,
    Positive,
    Correlation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruePrior {
    pub blocks: Vec<PriorBlock>,
}

/// Lower-triangular Cholesky factor of a symmetric matrix.
pub fn cholesky(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if !(d > 0.0) {
                    return Err(Error::NotPositiveDefinite(i));
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Ok(l)
}

impl TruePrior {
    pub fn new(blocks: Vec<PriorBlock>) -> Result<Self> {
        let p = TruePrior { blocks };
        p.validate()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(PriorBlock::dim).sum()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.blocks
            .iter()
            .flat_map(|b| match b {
                PriorBlock::Independent { name, .. } => vec![name.clone()],
                PriorBlock::MvNormal { names, .. } => names.clone(),
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::config("prior has no blocks"));
        }
        for b in &self.blocks {
            match b {
                PriorBlock::Independent { marginal, .. } => marginal.validate()?,
                PriorBlock::MvNormal {
                    names,
                    mean,
                    scales,
                    correlation,
                } => {
                    let k = names.len();
                    if k == 0
                        || mean.len() != k
                        || scales.len() != k
                        || correlation.len() != k
                        || correlation.iter().any(|r| r.len() != k)
                    {
                        return Err(Error::config("inconsistent MvNormal block dimensions"));
                    }
                    if scales.iter().any(|s| !(*s > 0.0)) {
                        return Err(Error::config("MvNormal scales must be positive"));
                    }
                    for i in 0..k {
                        if correlation[i][i] != 1.0 {
                            return Err(Error::config("correlation diagonal must be 1"));
                        }
                        for j in 0..i {
                            if correlation[i][j] != correlation[j][i] {
                                return Err(Error::config("correlation matrix must be symmetric"));
                            }
                        }
                    }
                    cholesky(correlation)?;
                }
            }
        }
        Ok(())
    }

    /// `count` independent draws, `[count, K]`.
    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> Result<Tensor> {
        self.validate()?;
        let k = self.dim();
        // factor each MvNormal block once
        let factors: Vec<Option<Vec<Vec<f64>>>> = self
            .blocks
            .iter()
            .map(|b| match b {
                PriorBlock::MvNormal {
                    scales, correlation, ..
                } => {
                    let cov: Vec<Vec<f64>> = (0..scales.len())
                        .map(|i| {
                            (0..scales.len())
                                .map(|j| scales[i] * correlation[i][j] * scales[j])
                                .collect()
                        })
                        .collect();
                    cholesky(&cov).map(Some)
                }
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;
        let mut data = Vec::with_capacity(count * k);
        for _ in 0..count {
            for (b, factor) in self.blocks.iter().zip(&factors) {
                match (b, factor) {
                    (PriorBlock::Independent { marginal, .. }, _) => data.push(marginal.sample(rng)),
                    (PriorBlock::MvNormal { mean, .. }, Some(l)) => {
                        let z: Vec<f64> = (0..mean.len()).map(|_| rng.sample(StandardNormal)).collect();
                        for i in 0..mean.len() {
                            data.push(mean[i] + (0..=i).map(|j| l[i][j] * z[j]).sum::<f64>());
                        }
                    }
                    _ => unreachable!("factor computed for every MvNormal block"),
                }
            }
        }
        Tensor::new(vec![count, k], data)
    }

    pub fn hyperparameters(&self) -> Vec<Hyperparameter> {
        let mut out = Vec::new();
        for b in &self.blocks {
            match b {
                PriorBlock::Independent { name, marginal } => {
                    let spread = match *marginal {
                        Marginal::Normal { scale, .. } | Marginal::SkewNormal { scale, .. } => scale,
                        Marginal::Gamma { .. } => 0.0,
                    };
                    for (key, value) in marginal.params() {
                        let kind = if key == "loc" {
                            HyperKind::Location
                        } else {
                            HyperKind::Positive
                        };
                        out.push(Hyperparameter {
                            name: format!("{name}.{key}"),
                            value,
                            kind,
                            scale: if kind == HyperKind::Location { spread } else { value },
                        });
                    }
                }
                PriorBlock::MvNormal {
                    names,
                    mean,
                    scales,
                    correlation,
                } => {
                    for i in 0..names.len() {
                        out.push(Hyperparameter {
                            name: format!("{}.loc", names[i]),
                            value: mean[i],
                            kind: HyperKind::Location,
                            scale: scales[i],
                        });
                        out.push(Hyperparameter {
                            name: format!("{}.scale", names[i]),
                            value: scales[i],
                            kind: HyperKind::Positive,
                            scale: scales[i],
                        });
                    }
                    for i in 0..names.len() {
                        for j in i + 1..names.len() {
                            out.push(Hyperparameter {
                                name: format!("corr({},{})", names[i], names[j]),
                                value: correlation[i][j],
                                kind: HyperKind::Correlation,
                                scale: 0.1,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    /// Copy with one hyperparameter replaced; fails if the result is invalid.
    pub fn with_hyperparameter(&self, name: &str, value: f64) -> Result<TruePrior> {
        let mut out = self.clone();
        let mut found = false;
        for b in &mut out.blocks {
            match b {
                PriorBlock::Independent { name: n, marginal } => {
                    if let Some(key) = name.strip_prefix(n.as_str()).and_then(|r| r.strip_prefix('.')) {
                        marginal.set(key, value)?;
                        found = true;
                    }
                }
                PriorBlock::MvNormal {
                    names,
                    mean,
                    scales,
                    correlation,
                } => {
                    for i in 0..names.len() {
                        if name == format!("{}.loc", names[i]) {
                            mean[i] = value;
                            found = true;
                        } else if name == format!("{}.scale", names[i]) {
                            scales[i] = value;
                            found = true;
                        }
                        for j in i + 1..names.len() {
                            if name == format!("corr({},{})", names[i], names[j]) {
                                correlation[i][j] = value;
                                correlation[j][i] = value;
                                found = true;
                            }
                        }
                    }
                }
            }
        }
        if !found {
            return Err(Error::config(format!("unknown hyperparameter '{name}'")));
        }
        out.validate()?;
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub prior: TruePrior,
    pub samples: usize,
    pub seed: Option<u64>,
    /// How expert correlations were obtained.
    pub correlation_source: String,
}

/// Expert-side statistics plus where they came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertData {
    pub statistics: IndexMap<String, crate::elicitation::StatisticValues>,
    pub provenance: Provenance,
}

impl ExpertData {
    pub fn as_set(&self) -> ElicitedStatisticSet {
        ElicitedStatisticSet {
            side: Side::Expert,
            rows: 1,
            statistics: self.statistics.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in &self.statistics {
            if s.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("non-finite expert value in '{name}'")));
            }
            if s.values.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::config(format!("expert quantiles of '{name}' decrease")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let e: ExpertData = serde_json::from_str(s)?;
        e.validate()?;
        Ok(e)
    }
}

pub fn sample_true_prior(spec: &TruePrior, count: usize, rng: &mut impl Rng) -> Result<Tensor> {
    spec.sample(count, rng)
}

/// Forward-simulate the oracle prior through the model (exact sampling) and
/// summarize with the plan's techniques.
pub fn simulate_expert(
    spec: &TruePrior,
    model: &GenerativeModel,
    plan: &ElicitationPlan,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<ExpertData> {
    if samples < 1000 {
        return Err(Error::config("expert simulation needs at least 1000 samples"));
    }
    if spec.dim() != model.dim() {
        return Err(Error::config(format!(
            "prior has {} parameters, model expects {}",
            spec.dim(),
            model.dim()
        )));
    }
    let theta = spec.sample(samples, rng)?.reshape(&[1, samples, spec.dim()])?;
    let mut g = Graph::new();
    let theta = g.constant(theta);
    let targets = model.simulate(&mut g, theta, BinomialSampling::Exact, rng)?;
    let blocks = build_statistics(&mut g, &targets, theta, &model.param_names(), plan)?;
    let set = ElicitedStatisticSet::from_blocks(&g, &blocks, Side::Expert)?;
    let data = ExpertData {
        statistics: set.statistics,
        provenance: Provenance {
            prior: spec.clone(),
            samples,
            seed: None,
            correlation_source: "empirical".into(),
        },
    };
    data.validate()?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn moments(v: &[f64]) -> (f64, f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        let skew = v.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n / var.powf(1.5);
        (m, var.sqrt(), skew)
    }

    #[test]
    fn gamma_mean() {
        let p = TruePrior::new(vec![PriorBlock::gamma("sigma", 5.0, 2.0)]).unwrap();
        let s = p.sample(10_000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (m, _, _) = moments(s.data());
        assert!((2.4..=2.6).contains(&m), "{m}");
    }

    #[test]
    fn skew_normal_shape_one_is_symmetric() {
        let p = TruePrior::new(vec![PriorBlock::skew_normal("b", 7.0, 1.3, 1.0)]).unwrap();
        let s = p.sample(10_000, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (m, sd, skew) = moments(s.data());
        assert!((-0.1..=0.1).contains(&skew), "{skew}");
        assert!((m - 7.0).abs() < 0.05 && (sd - 1.3).abs() < 0.05);
    }

    #[test]
    fn skew_normal_shape_above_one_skews_right() {
        let p = TruePrior::new(vec![PriorBlock::skew_normal("b", 7.0, 1.3, 4.0)]).unwrap();
        let s = p.sample(10_000, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let (m, _, skew) = moments(s.data());
        assert!(skew > 0.5 && m > 7.0);
    }

    #[test]
    fn non_pd_correlation_rejected() {
        let block = PriorBlock::MvNormal {
            names: vec!["a".into(), "b".into()],
            mean: vec![0.0, 0.0],
            scales: vec![1.0, 1.0],
            correlation: vec![vec![1.0, 1.5], vec![1.5, 1.0]],
        };
        assert!(matches!(TruePrior::new(vec![block]), Err(Error::NotPositiveDefinite(1))));
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = vec![vec![4.0, 2.0, 0.4], vec![2.0, 5.0, 1.0], vec![0.4, 1.0, 3.0]];
        let l = cholesky(&a).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| l[i][k] * l[j][k]).sum();
                assert!((v - a[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hyperparameter_replacement() {
        let p = TruePrior::new(vec![
            PriorBlock::normal("beta0", 0.1, 0.1),
            PriorBlock::gamma("sigma", 5.0, 2.0),
        ])
        .unwrap();
        let names: Vec<_> = p.hyperparameters().into_iter().map(|h| h.name).collect();
        assert_eq!(names, ["beta0.loc", "beta0.scale", "sigma.concentration", "sigma.rate"]);
        let q = p.with_hyperparameter("sigma.rate", 3.0).unwrap();
        assert_eq!(q.hyperparameters()[3].value, 3.0);
        assert!(p.with_hyperparameter("beta0.scale", -1.0).is_err());
        assert!(p.with_hyperparameter("nope.loc", 1.0).is_err());
    }
}
