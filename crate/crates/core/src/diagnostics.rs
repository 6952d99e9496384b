//! Post-training tooling: convergence slopes, loss-based model averaging,
//! one-at-a-time sensitivity sweeps and learned-vs-true comparison tables.

use std::io::Write;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::elicitation::{ElicitationPlan, ElicitedStatisticSet};
use crate::error::{Error, Result};
use crate::flow::JointPriorFlow;
use crate::models::GenerativeModel;
use crate::oracle::{simulate_expert, ExpertData, HyperKind, TruePrior};
use crate::tensor::Tensor;

/// Default regression window for [`loss_slope`].
pub const SLOPE_WINDOW: usize = 100;
/// Number of seeds flagged for visual inspection.
pub const WORST_FLAGGED: usize = 5;
/// Points per default sensitivity grid.
pub const GRID_POINTS: usize = 9;

/// OLS slope of the last `window` losses against the epoch index.
pub fn loss_slope(losses: &[f64], window: usize) -> Result<f64> {
    if window < 2 {
        return Err(Error::config("slope window must be at least 2"));
    }
    if window > losses.len() {
        return Err(Error::config(format!(
            "slope window {window} exceeds trajectory length {}",
            losses.len()
        )));
    }
    let tail = &losses[losses.len() - window..];
    let n = window as f64;
    let xm = (n - 1.0) / 2.0;
    let ym = tail.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in tail.iter().enumerate() {
        let dx = i as f64 - xm;
        sxy += dx * (y - ym);
        sxx += dx * dx;
    }
    let slope = sxy / sxx;
    if !slope.is_finite() {
        return Err(Error::domain("loss_slope", 0, "non-finite loss in window"));
    }
    Ok(slope)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeEntry {
    pub seed: u64,
    pub slope: f64,
    pub abs_slope_x100: f64,
    /// 0 = flattest.
    pub rank: usize,
    pub worst: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlopeReport {
    pub window: usize,
    pub entries: Vec<SlopeEntry>,
}

impl SlopeReport {
    /// Seeds ordered by ascending |slope|.
    pub fn ranking(&self) -> Vec<u64> {
        let mut e: Vec<&SlopeEntry> = self.entries.iter().collect();
        e.sort_by_key(|e| e.rank);
        e.iter().map(|e| e.seed).collect()
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        write_rows(w, &self.entries)
    }
}

pub fn slope_report(runs: &[(u64, Vec<f64>)], window: usize) -> Result<SlopeReport> {
    let mut entries = runs
        .iter()
        .map(|(seed, losses)| {
            let slope = loss_slope(losses, window)?;
            Ok(SlopeEntry {
                seed: *seed,
                slope,
                abs_slope_x100: slope.abs() * 100.0,
                rank: 0,
                worst: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| entries[a].abs_slope_x100.total_cmp(&entries[b].abs_slope_x100));
    let n = order.len();
    for (rank, &i) in order.iter().enumerate() {
        entries[i].rank = rank;
        entries[i].worst = rank + WORST_FLAGGED >= n;
    }
    Ok(SlopeReport { window, entries })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub seed: u64,
    pub final_loss: f64,
    pub delta: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AveragingWeights {
    pub gamma: f64,
    pub deltas: Vec<f64>,
    pub weights: Vec<f64>,
}

impl AveragingWeights {
    pub fn rows(&self, seeds: &[u64], losses: &[f64]) -> Vec<WeightRow> {
        seeds
            .iter()
            .zip(losses)
            .zip(self.deltas.iter().zip(&self.weights))
            .map(|((&seed, &final_loss), (&delta, &weight))| WeightRow {
                seed,
                final_loss,
                delta,
                weight,
            })
            .collect()
    }
}

/// `w_r ∝ exp(-γ (L_r - min L))`.
pub fn averaging_weights(losses: &[f64], gamma: f64) -> Result<AveragingWeights> {
    if losses.is_empty() {
        return Err(Error::config("no losses to average"));
    }
    if losses.iter().any(|l| !l.is_finite()) || !gamma.is_finite() || gamma < 0.0 {
        return Err(Error::config("averaging needs finite losses and gamma >= 0"));
    }
    let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let deltas: Vec<f64> = losses.iter().map(|l| l - min).collect();
    let raw: Vec<f64> = deltas.iter().map(|d| (-gamma * d).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(AveragingWeights {
        gamma,
        deltas,
        weights: raw.iter().map(|w| w / total).collect(),
    })
}

/// Weighted mixture of learned flows.
#[derive(Clone, Debug)]
pub struct MixturePrior {
    pub flows: Vec<JointPriorFlow>,
    pub weights: Vec<f64>,
}

impl MixturePrior {
    pub fn new(flows: Vec<JointPriorFlow>, weights: Vec<f64>) -> Result<Self> {
        if flows.is_empty() || flows.len() != weights.len() {
            return Err(Error::config(format!(
                "mixture needs one weight per flow ({} flows, {} weights)",
                flows.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("mixture weights must be nonnegative and sum to 1"));
        }
        let k = flows[0].dim();
        if flows.iter().any(|f| f.dim() != k) {
            return Err(Error::config("mixture flows differ in dimension"));
        }
        Ok(MixturePrior { flows, weights })
    }

    pub fn dim(&self) -> usize {
        self.flows[0].dim()
    }

    /// Component counts are drawn first, then each flow samples its share;
    /// rows come out grouped by component.
    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> Result<Tensor> {
        let mut counts = vec![0usize; self.flows.len()];
        for _ in 0..count {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = self.flows.len() - 1;
            for (r, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = r;
                    break;
                }
            }
            counts[pick] += 1;
        }
        let mut data = Vec::with_capacity(count * self.dim());
        for (flow, &n) in self.flows.iter().zip(&counts) {
            if n > 0 {
                data.extend_from_slice(flow.sample(n, rng)?.data());
            }
        }
        Tensor::new(vec![count, self.dim()], data)
    }

    /// `log Σ_r w_r p_r(θ)` per row.
    pub fn log_prob(&self, theta: &Tensor) -> Result<Vec<f64>> {
        let parts = self
            .flows
            .iter()
            .map(|f| f.log_prob(theta))
            .collect::<Result<Vec<_>>>()?;
        let rows = theta.shape()[0];
        Ok((0..rows)
            .map(|i| {
                let terms: Vec<f64> = parts
                    .iter()
                    .zip(&self.weights)
                    .filter(|(_, w)| **w > 0.0)
                    .map(|(lp, w)| lp[i] + w.ln())
                    .collect();
                let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if m == f64::NEG_INFINITY {
                    return m;
                }
                m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
            })
            .collect())
    }
}

pub fn average_prior_sample(
    flows: Vec<JointPriorFlow>,
    weights: &AveragingWeights,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    MixturePrior::new(flows, weights.weights.clone())?.sample(count, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub hyperparameter: String,
    pub value: f64,
    pub statistic: String,
    pub level: Option<f64>,
    pub result: f64,
}

/// 9 points: location ±3 scales, positive values 0.25x to 1.75x,
/// correlations ±0.3 clipped to (-0.95, 0.95).
pub fn default_grids(spec: &TruePrior) -> IndexMap<String, Vec<f64>> {
    let half = (GRID_POINTS / 2) as f64;
    spec.hyperparameters()
        .into_iter()
        .map(|h| {
            let grid = (0..GRID_POINTS)
                .map(|i| {
                    let t = (i as f64 - half) / half;
                    match h.kind {
                        HyperKind::Location => h.value + 3.0 * h.scale * t,
                        HyperKind::Positive => h.value * (1.0 + 0.75 * t),
                        HyperKind::Correlation => (h.value + 3.0 * h.scale * t).clamp(-0.95, 0.95),
                    }
                })
                .collect();
            (h.name, grid)
        })
        .collect()
}

/// One-at-a-time sweep. Invalid prior values are skipped and reported in the
/// returned warnings.
pub fn sensitivity_analysis(
    spec: &TruePrior,
    model: &GenerativeModel,
    plan: &ElicitationPlan,
    grids: &IndexMap<String, Vec<f64>>,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<SensitivityRow>, Vec<String>)> {
    let truth: IndexMap<String, f64> = spec
        .hyperparameters()
        .into_iter()
        .map(|h| (h.name, h.value))
        .collect();
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for (name, grid) in grids {
        let Some(&true_value) = truth.get(name) else {
            return Err(Error::config(format!("unknown hyperparameter '{name}'")));
        };
        if !grid.iter().any(|v| (v - true_value).abs() <= 1e-12 * true_value.abs().max(1.0)) {
            return Err(Error::config(format!("grid for '{name}' omits the true value {true_value}")));
        }
        for &value in grid {
            let varied = match spec.with_hyperparameter(name, value) {
                Ok(p) => p,
                Err(e) => {
                    let msg = format!("skipped {name}={value}: {e}");
                    log::warn!("{msg}");
                    warnings.push(msg);
                    continue;
                }
            };
            let stats = simulate_expert(&varied, model, plan, samples, rng)?;
            for (statistic, s) in &stats.statistics {
                if s.levels.is_empty() {
                    rows.extend(s.values.iter().map(|&result| SensitivityRow {
                        hyperparameter: name.clone(),
                        value,
                        statistic: statistic.clone(),
                        level: None,
                        result,
                    }));
                } else {
                    rows.extend(s.levels.iter().zip(&s.values).map(|(&level, &result)| SensitivityRow {
                        hyperparameter: name.clone(),
                        value,
                        statistic: statistic.clone(),
                        level: Some(level),
                        result,
                    }));
                }
            }
        }
    }
    Ok((rows, warnings))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub seed: u64,
    pub statistic: String,
    pub level: Option<f64>,
    pub learned: f64,
    #[serde(rename = "true")]
    pub truth: f64,
}

/// Learned (first row of each run's statistics) against expert values.
pub fn comparison_table(
    runs: &[(u64, &ElicitedStatisticSet)],
    expert: &ExpertData,
) -> Result<Vec<ComparisonRow>> {
    if expert.statistics.is_empty() {
        return Err(Error::config("expert statistic set is empty"));
    }
    let mut rows = Vec::new();
    for (seed, set) in runs {
        for (name, e) in &expert.statistics {
            let learned = set
                .row(name, 0)
                .ok_or_else(|| Error::config(format!("seed {seed} lacks statistic '{name}'")))?;
            if learned.len() != e.values.len() {
                return Err(Error::config(format!("width mismatch for '{name}' in seed {seed}")));
            }
            for (i, (&l, &t)) in learned.iter().zip(&e.values).enumerate() {
                rows.push(ComparisonRow {
                    seed: *seed,
                    statistic: name.clone(),
                    level: e.levels.get(i).copied(),
                    learned: l,
                    truth: t,
                });
            }
        }
    }
    Ok(rows)
}

/// Largest `|learned - true| / |true|` over quantile rows, per seed.
pub fn max_relative_quantile_error(rows: &[ComparisonRow]) -> IndexMap<u64, f64> {
    let mut out: IndexMap<u64, f64> = IndexMap::new();
    for r in rows.iter().filter(|r| r.level.is_some()) {
        let rel = (r.learned - r.truth).abs() / r.truth.abs().max(1e-12);
        let e = out.entry(r.seed).or_insert(0.0);
        *e = e.max(rel);
    }
    out
}

/// Header row plus one record per item.
pub fn write_rows<T: Serialize>(w: impl Write, rows: &[T]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elicitation::{Side, StatisticValues};
    use crate::flow::FlowConfig;
    use crate::oracle::{PriorBlock, Provenance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn slope_of_constant_and_line() {
        assert_eq!(loss_slope(&[3.0; 150], 100).unwrap(), 0.0);
        let line: Vec<f64> = (0..300).map(|e| 5.0 - 0.01 * e as f64).collect();
        assert!((loss_slope(&line, 100).unwrap() + 0.01).abs() < 1e-12);
        assert!(loss_slope(&line, 301).is_err());
        assert!(loss_slope(&line, 1).is_err());
    }

    #[test]
    fn flat_noisy_series_has_small_slope() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let series: Vec<f64> = (0..400).map(|_| 1.0 + noise.sample(&mut rng)).collect();
        assert!(loss_slope(&series, 100).unwrap().abs() * 100.0 < 0.5);
    }

    #[test]
    fn slope_ranking_flags_steepest() {
        let runs: Vec<(u64, Vec<f64>)> = (0..7)
            .map(|s| (s, (0..100).map(|e| -(s as f64) * 0.001 * e as f64).collect()))
            .collect();
        let rep = slope_report(&runs, 100).unwrap();
        assert_eq!(rep.ranking(), vec![0, 1, 2, 3, 4, 5, 6]);
        let flagged: Vec<u64> = rep.entries.iter().filter(|e| e.worst).map(|e| e.seed).collect();
        assert_eq!(flagged, vec![2, 3, 4, 5, 6]);
    }

    #[test]
    fn weight_examples() {
        let w = averaging_weights(&[1.3; 4], 1.0).unwrap();
        assert!(w.weights.iter().all(|x| (x - 0.25).abs() < 1e-12));
        let w = averaging_weights(&[0.0, 2f64.ln()], 1.0).unwrap();
        assert!((w.weights[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w.weights[1] - 1.0 / 3.0).abs() < 1e-12);
        let w = averaging_weights(&[0.5, 0.52, 0.7], 1000.0).unwrap();
        assert!(w.weights[0] > 0.999);
        assert!(averaging_weights(&[], 1.0).is_err());
        assert!(averaging_weights(&[f64::NAN], 1.0).is_err());
    }

    #[test]
    fn single_component_mixture_matches_flow() {
        let mut flow = JointPriorFlow::new(FlowConfig::new(2), 1).unwrap();
        flow.perturb(&mut ChaCha8Rng::seed_from_u64(2), 0.05);
        let mix = MixturePrior::new(vec![flow.clone(), flow.clone()], vec![0.5, 0.5]).unwrap();
        let theta = flow.sample(20, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let a = flow.log_prob(&theta).unwrap();
        let b = mix.log_prob(&theta).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
        assert!(MixturePrior::new(vec![flow.clone()], vec![0.7]).is_err());
        let s = mix.sample(50, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(s.shape(), &[50, 2]);
    }

    #[test]
    fn default_grids_contain_truth() {
        let spec = TruePrior::new(vec![
            PriorBlock::normal("beta0", 0.1, 0.1),
            PriorBlock::gamma("sigma", 5.0, 2.0),
        ])
        .unwrap();
        let grids = default_grids(&spec);
        assert_eq!(grids.len(), 4);
        let loc = &grids["beta0.loc"];
        assert_eq!(loc.len(), GRID_POINTS);
        assert!((loc[0] + 0.2).abs() < 1e-12 && (loc[8] - 0.4).abs() < 1e-12);
        assert!((loc[4] - 0.1).abs() < 1e-15);
        assert!(grids["sigma.rate"].iter().all(|v| *v > 0.0));
    }

    #[test]
    fn sensitivity_skips_invalid_values() {
        let spec = TruePrior::new(vec![
            PriorBlock::normal("beta0", 0.1, 0.1),
            PriorBlock::normal("beta1", -0.1, 0.3),
        ])
        .unwrap();
        let model = GenerativeModel::binomial();
        let plan = ElicitationPlan::quantiles_and_correlation(&model.target_names());
        let mut grids = IndexMap::new();
        grids.insert("beta0.scale".to_string(), vec![-0.1, 0.1]);
        let (rows, warnings) =
            sensitivity_analysis(&spec, &model, &plan, &grids, 1000, &mut ChaCha8Rng::seed_from_u64(1))
                .unwrap();
        assert_eq!(warnings.len(), 1);
        // 2 targets x 5 quantiles + 1 correlation, one surviving grid value
        assert_eq!(rows.len(), 11);
        grids.insert("beta0.scale".to_string(), vec![0.2]);
        assert!(sensitivity_analysis(&spec, &model, &plan, &grids, 1000, &mut ChaCha8Rng::seed_from_u64(1))
            .is_err());
    }

    fn expert(stats: &[(&str, Vec<f64>, Vec<f64>)]) -> ExpertData {
        ExpertData {
            statistics: stats
                .iter()
                .map(|(n, l, v)| {
                    (
                        n.to_string(),
                        StatisticValues {
                            levels: l.clone(),
                            values: v.clone(),
                        },
                    )
                })
                .collect(),
            provenance: Provenance {
                prior: TruePrior { blocks: vec![] },
                samples: 1000,
                seed: None,
                correlation_source: "empirical".into(),
            },
        }
    }

    #[test]
    fn perfect_match_comparison() {
        let e = expert(&[
            ("y:quantiles", vec![0.25, 0.75], vec![1.0, 3.0]),
            ("corr(a,b):correlation", vec![], vec![0.2]),
        ]);
        let mut set = e.as_set();
        set.side = Side::Model;
        let rows = comparison_table(&[(1, &set), (2, &set)], &e).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.learned == r.truth));
        assert_eq!(rows[2].level, None);
        assert_eq!(max_relative_quantile_error(&rows)[&1], 0.0);
        assert!(comparison_table(&[(1, &set)], &expert(&[])).is_err());
    }

    #[test]
    fn csv_headers() {
        let mut buf = Vec::new();
        write_rows(
            &mut buf,
            &[ComparisonRow {
                seed: 1,
                statistic: "s".into(),
                level: None,
                learned: 1.0,
                truth: 2.0,
            }],
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "seed,statistic,level,learned,true\n1,s,,1.0,2.0\n");
    }
}
