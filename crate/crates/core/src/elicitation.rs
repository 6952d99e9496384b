//! Elicitation techniques: quantiles of target quantities and pairwise
//! parameter correlations. The same code path serves the model side
//! (`B` rows) and the expert side (one row).
//!
//! Statistic names follow `<target>:<technique>`, e.g. `y|x0:quantiles` or
//! `corr(beta0,beta1):correlation`; quantile levels are carried alongside.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossComponentSpec;
use crate::models::{compute_param_correlations, param_pairs};
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_LEVELS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];
/// Target name of the correlation technique (it acts on θ itself).
pub const CORRELATION_TARGET: &str = "theta";
/// Loss component that groups every pairwise correlation.
pub const CORRELATION_COMPONENT: &str = "correlation";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "technique", rename_all = "snake_case")]
pub enum Technique {
    Quantiles { levels: Vec<f64> },
    Correlation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub target: String,
    #[serde(flatten)]
    pub technique: Technique,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElicitationPlan {
    pub entries: Vec<PlanEntry>,
}

impl ElicitationPlan {
    /// Default quantiles for each target, plus the grouped correlations.
    pub fn quantiles_and_correlation(targets: &[String]) -> Self {
        let mut entries: Vec<PlanEntry> = targets
            .iter()
            .map(|t| PlanEntry {
                target: t.clone(),
                technique: Technique::Quantiles {
                    levels: DEFAULT_LEVELS.to_vec(),
                },
            })
            .collect();
        entries.push(PlanEntry {
            target: CORRELATION_TARGET.into(),
            technique: Technique::Correlation,
        });
        ElicitationPlan { entries }
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::config("elicitation plan is empty"));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if self.entries[..i].iter().any(|o| o == e) {
                return Err(Error::config(format!("duplicate plan entry for '{}'", e.target)));
            }
            if let Technique::Quantiles { levels } = &e.technique {
                if levels.is_empty() {
                    return Err(Error::config(format!("no quantile levels for '{}'", e.target)));
                }
                check_levels(levels)?;
            }
        }
        Ok(())
    }

    /// One MMD component per quantile entry, one grouped squared-error
    /// component for all correlations.
    pub fn loss_components(&self) -> Vec<LossComponentSpec> {
        let mut out: Vec<LossComponentSpec> = Vec::new();
        for e in &self.entries {
            match e.technique {
                Technique::Quantiles { .. } => {
                    out.push(LossComponentSpec::mmd(quantile_name(&e.target)))
                }
                Technique::Correlation => {
                    if !out.iter().any(|c| c.name == CORRELATION_COMPONENT) {
                        out.push(LossComponentSpec::squared_error(CORRELATION_COMPONENT));
                    }
                }
            }
        }
        out
    }
}

fn check_levels(levels: &[f64]) -> Result<()> {
    if let Some(p) = levels.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::config(format!("quantile level {p} outside (0, 1)")));
    }
    if levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("quantile levels must be strictly increasing"));
    }
    Ok(())
}

pub fn quantile_name(target: &str) -> String {
    format!("{target}:quantiles")
}

pub fn correlation_name(a: &str, b: &str) -> String {
    format!("corr({a},{b}):correlation")
}

/// Type-7 quantiles along the last axis: sort, then interpolate linearly at
/// position `p·(S-1)`. `values` is `[.., S]`, the result `[.., L]`.
pub fn empirical_quantiles(g: &mut Graph, values: Var, levels: &[f64]) -> Result<Var> {
    check_levels(levels)?;
    let s = *g.shape(values).last().unwrap_or(&0);
    if s < 2 {
        return Err(Error::config("quantiles need at least 2 samples"));
    }
    let (sorted, _) = g.sort_last(values)?;
    let mut lo = Vec::with_capacity(levels.len());
    let mut hi = Vec::with_capacity(levels.len());
    let mut frac = Vec::with_capacity(levels.len());
    for &p in levels {
        let pos = p * (s - 1) as f64;
        let l = (pos.floor() as usize).min(s - 1);
        lo.push(l);
        hi.push((l + 1).min(s - 1));
        frac.push(pos - l as f64);
    }
    let below = g.gather_last(sorted, &lo)?;
    let above = g.gather_last(sorted, &hi)?;
    let gap = g.sub(above, below)?;
    let w = g.constant(Tensor::from_vec(frac));
    let step = g.mul(gap, w)?;
    g.add(below, step)
}

/// Model- or expert-side statistic with its graph value `[B, L]`.
#[derive(Clone, Debug)]
pub struct StatisticBlock {
    pub name: String,
    /// Loss component this statistic feeds.
    pub component: String,
    pub levels: Vec<f64>,
    pub value: Var,
}

/// Apply the plan to simulated targets (`[B, S]` each) and prior draws
/// (`[B, S, K]`). Output order follows the plan.
pub fn build_statistics(
    g: &mut Graph,
    targets: &[(String, Var)],
    theta: Var,
    param_names: &[String],
    plan: &ElicitationPlan,
) -> Result<Vec<StatisticBlock>> {
    plan.validate()?;
    let mut out = Vec::new();
    for e in &plan.entries {
        match &e.technique {
            Technique::Quantiles { levels } => {
                let (_, var) = targets
                    .iter()
                    .find(|(n, _)| n == &e.target)
                    .ok_or_else(|| Error::config(format!("plan target '{}' was not simulated", e.target)))?;
                let name = quantile_name(&e.target);
                out.push(StatisticBlock {
                    component: name.clone(),
                    name,
                    levels: levels.clone(),
                    value: empirical_quantiles(g, *var, levels)?,
                });
            }
            Technique::Correlation => {
                if e.target != CORRELATION_TARGET {
                    return Err(Error::config(format!(
                        "correlation technique applies to '{CORRELATION_TARGET}', not '{}'",
                        e.target
                    )));
                }
                let k = param_names.len();
                let corr = compute_param_correlations(g, theta)?;
                for (i, (a, b)) in param_pairs(k).into_iter().enumerate() {
                    out.push(StatisticBlock {
                        name: correlation_name(&param_names[a], &param_names[b]),
                        component: CORRELATION_COMPONENT.into(),
                        levels: Vec::new(),
                        value: g.gather_last(corr, &[i])?,
                    });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Model,
    Expert,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatisticValues {
    pub levels: Vec<f64>,
    /// Row-major `[rows, width]`; width is `max(1, levels.len())`.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElicitedStatisticSet {
    pub side: Side,
    pub rows: usize,
    pub statistics: IndexMap<String, StatisticValues>,
}

impl ElicitedStatisticSet {
    pub fn from_blocks(g: &Graph, blocks: &[StatisticBlock], side: Side) -> Result<Self> {
        let rows = blocks.first().map_or(0, |b| g.shape(b.value)[0]);
        let mut statistics = IndexMap::new();
        for b in blocks {
            statistics.insert(
                b.name.clone(),
                StatisticValues {
                    levels: b.levels.clone(),
                    values: g.value(b.value).data().to_vec(),
                },
            );
        }
        let set = ElicitedStatisticSet { side, rows, statistics };
        if side == Side::Expert && rows != 1 {
            return Err(Error::shape("expert statistics must have exactly one row"));
        }
        Ok(set)
    }

    pub fn get(&self, name: &str) -> Option<&StatisticValues> {
        self.statistics.get(name)
    }

    /// Row `r` of statistic `name`.
    pub fn row(&self, name: &str, r: usize) -> Option<&[f64]> {
        let s = self.statistics.get(name)?;
        let w = s.levels.len().max(1);
        s.values.get(r * w..(r + 1) * w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::GenerativeModel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn quantiles(values: Vec<f64>, levels: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let v = g.constant(Tensor::from_vec(values));
        let q = empirical_quantiles(&mut g, v, levels)?;
        Ok(g.value(q).data().to_vec())
    }

    #[test]
    fn quantile_examples() {
        let v: Vec<f64> = (0..=100).rev().map(f64::from).collect();
        assert_eq!(quantiles(v, &[0.5]).unwrap(), vec![50.0]);
        assert_eq!(quantiles(vec![3.5; 7], &DEFAULT_LEVELS).unwrap(), vec![3.5; 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
        let q = quantiles(z, &[0.95]).unwrap()[0];
        assert!((1.58..=1.71).contains(&q), "{q}");
        assert!(quantiles(vec![1.0, 2.0], &[1.0]).is_err());
        assert!(quantiles(vec![1.0, 2.0], &[0.0]).is_err());
    }

    #[test]
    fn quantile_interpolates_between_ranks() {
        // pos = 0.25 * 3 = 0.75 → 1 + 0.75 * (2 - 1)
        assert_eq!(quantiles(vec![4.0, 1.0, 2.0, 3.0], &[0.25]).unwrap(), vec![1.75]);
    }

    #[test]
    fn plan_component_counts() {
        let m1 = GenerativeModel::binomial();
        let plan = ElicitationPlan::quantiles_and_correlation(&m1.target_names());
        assert_eq!(plan.loss_components().len(), 3);
        let m2 = GenerativeModel::normal();
        let plan = ElicitationPlan::quantiles_and_correlation(&m2.target_names());
        let comps = plan.loss_components();
        assert_eq!(comps.len(), 5);
        assert_eq!(comps[4].weight, 0.1);
        assert!(comps[..4].iter().all(|c| c.weight == 1.0));
    }

    #[test]
    fn empty_plan_and_missing_target() {
        let mut g = Graph::new();
        let theta = g.constant(Tensor::zeros(&[1, 3, 2]));
        let empty = ElicitationPlan { entries: vec![] };
        assert!(build_statistics(&mut g, &[], theta, &[], &empty).is_err());
        let plan = ElicitationPlan::quantiles_and_correlation(&["y|x0".to_string()]);
        match build_statistics(&mut g, &[], theta, &["a".into(), "b".into()], &plan) {
            Err(Error::Config(msg)) => assert!(msg.contains("y|x0")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn statistic_names_and_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..2 * 50 * 2).map(|_| rng.sample(StandardNormal)).collect();
        let mut g = Graph::new();
        let theta = g.constant(Tensor::new(vec![2, 50, 2], data).unwrap());
        let y = crate::models::param_column(&mut g, theta, 0).unwrap();
        let plan = ElicitationPlan::quantiles_and_correlation(&["y".to_string()]);
        let names = ["beta0".to_string(), "beta1".to_string()];
        let blocks = build_statistics(&mut g, &[("y".into(), y)], theta, &names, &plan).unwrap();
        let set = ElicitedStatisticSet::from_blocks(&g, &blocks, Side::Model).unwrap();
        let keys: Vec<_> = set.statistics.keys().cloned().collect();
        assert_eq!(keys, ["y:quantiles", "corr(beta0,beta1):correlation"]);
        assert_eq!(set.rows, 2);
        assert_eq!(set.row("y:quantiles", 1).unwrap().len(), 5);
        assert_eq!(set.row("corr(beta0,beta1):correlation", 1).unwrap().len(), 1);
        assert!(ElicitedStatisticSet::from_blocks(&g, &blocks, Side::Expert).is_err());
    }
}
