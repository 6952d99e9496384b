//! Discrepancies between model-side and expert-side statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    MmdEnergy,
    SquaredError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossComponentSpec {
    pub name: String,
    pub kind: LossKind,
    pub weight: f64,
}

impl LossComponentSpec {
    pub fn mmd(name: impl Into<String>) -> Self {
        LossComponentSpec {
            name: name.into(),
            kind: LossKind::MmdEnergy,
            weight: 1.0,
        }
    }

    pub fn squared_error(name: impl Into<String>) -> Self {
        LossComponentSpec {
            name: name.into(),
            kind: LossKind::SquaredError,
            weight: 0.1,
        }
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentValue {
    pub name: String,
    pub weight: f64,
    pub value: f64,
}

/// Per-component losses and their weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub components: Vec<ComponentValue>,
    pub total: f64,
}

impl LossReport {
    pub fn component(&self, name: &str) -> Option<f64> {
        self.components
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.value)
    }
}

/// Biased MMD² with the energy kernel k(a, b) = -‖a - b‖, clamped at zero.
///
/// `x` is `[n, d]`, `y` is `[m, d]`.
pub fn mmd_energy_biased(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    let (xs, ys) = (g.shape(x).to_vec(), g.shape(y).to_vec());
    if xs.len() != 2 || ys.len() != 2 || xs[1] != ys[1] {
        return Err(Error::shape(format!(
            "mmd needs [n,d] and [m,d] inputs, got {xs:?} and {ys:?}"
        )));
    }
    if xs[0] == 0 || ys[0] == 0 {
        return Err(Error::shape("mmd needs at least one point per set"));
    }
    let dxx = g.pairwise_distance(x, x)?;
    let dyy = g.pairwise_distance(y, y)?;
    let dxy = g.pairwise_distance(x, y)?;
    let mxx = g.mean_all(dxx)?;
    let myy = g.mean_all(dyy)?;
    let mxy = g.mean_all(dxy)?;
    let within = g.add(mxx, myy)?;
    let cross = g.affine(mxy, 2.0, 0.0);
    let raw = g.sub(cross, within)?;
    Ok(g.relu(raw))
}

/// Plain-value helper around [`mmd_energy_biased`].
pub fn mmd_energy_value(x: &Tensor, y: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
    let out = mmd_energy_biased(&mut g, xv, yv)?;
    g.value(out).item()
}

/// Mean over batch and entries of (t - t̂)²; `t` is `[B, p]`, `target` `[p]`.
pub fn squared_error(g: &mut Graph, t: Var, target: Var) -> Result<Var> {
    let (ts, hs) = (g.shape(t).to_vec(), g.shape(target).to_vec());
    if ts.len() != 2 || hs.len() != 1 || ts[1] != hs[0] {
        return Err(Error::shape(format!(
            "squared error needs [B,p] and [p], got {ts:?} and {hs:?}"
        )));
    }
    let diff = g.sub(t, target)?;
    let sq = g.square(diff);
    g.mean_all(sq)
}

/// Weighted sum of named components. Every component must have a spec.
pub fn total_loss(
    g: &mut Graph,
    components: &[(String, Var)],
    specs: &[LossComponentSpec],
) -> Result<(Var, LossReport)> {
    let mut report = LossReport::default();
    let mut total: Option<Var> = None;
    for (name, var) in components {
        let spec = specs
            .iter()
            .find(|s| &s.name == name)
            .ok_or_else(|| Error::config(format!("no loss weight for component '{name}'")))?;
        if !(spec.weight >= 0.0) {
            return Err(Error::config(format!("negative weight for '{name}'")));
        }
        let value = g.value(*var).item()?;
        report.components.push(ComponentValue {
            name: name.clone(),
            weight: spec.weight,
            value,
        });
        let term = g.affine(*var, spec.weight, 0.0);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.scalar(0.0),
    };
    report.total = g.value(total).item()?;
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn col(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn mmd_hand_case() {
        assert_eq!(mmd_energy_value(&col(&[0.0]), &col(&[2.0])).unwrap(), 4.0);
    }

    #[test]
    fn mmd_identical_sets_is_zero() {
        let x = crate::flow::standard_normal(30, 3, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(mmd_energy_value(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn mmd_dimension_mismatch() {
        let x = Tensor::zeros(&[3, 2]);
        let y = Tensor::zeros(&[3, 3]);
        assert!(matches!(mmd_energy_value(&x, &y), Err(Error::Shape(_))));
    }

    #[test]
    fn squared_error_examples() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::full(&[4, 3], 0.3));
        let h = g.constant(Tensor::zeros(&[3]));
        let l = squared_error(&mut g, t, h).unwrap();
        assert!((g.value(l).item().unwrap() - 0.09).abs() < 1e-15);
        let h2 = g.constant(Tensor::full(&[3], 0.3));
        let l2 = squared_error(&mut g, t, h2).unwrap();
        assert_eq!(g.value(l2).item().unwrap(), 0.0);
    }

    #[test]
    fn squared_error_gradient() {
        let mut g = Graph::new();
        let vals = vec![0.5, -1.0, 2.0, 0.1, 0.0, 3.0];
        let t = g.param(Tensor::new(vec![2, 3], vals.clone()).unwrap());
        let target = [1.0, 0.5, -0.5];
        let h = g.constant(Tensor::from_vec(target.to_vec()));
        let l = squared_error(&mut g, t, h).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(t).unwrap().data().to_vec();
        for (i, gi) in grad.iter().enumerate() {
            let expect = 2.0 * (vals[i] - target[i % 3]) / 6.0;
            assert!((gi - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn total_loss_weighting() {
        let mut g = Graph::new();
        let a = g.scalar(2.0);
        let b = g.scalar(4.0);
        let specs = [LossComponentSpec::mmd("a"), LossComponentSpec::squared_error("b")];
        let comps = vec![("a".to_string(), a), ("b".to_string(), b)];
        let (t, rep) = total_loss(&mut g, &comps, &specs).unwrap();
        assert!((g.value(t).item().unwrap() - 2.4).abs() < 1e-12);
        assert!((rep.total - 2.4).abs() < 1e-12);
        assert_eq!(rep.component("b"), Some(4.0));

        let (single, _) = total_loss(&mut g, &comps[..1], &specs).unwrap();
        assert_eq!(g.value(single).item().unwrap(), 2.0);

        let z = g.scalar(0.0);
        let (zero, _) = total_loss(&mut g, &[("a".into(), z), ("b".into(), z)], &specs).unwrap();
        assert_eq!(g.value(zero).item().unwrap(), 0.0);

        let c = g.scalar(1.0);
        assert!(matches!(
            total_loss(&mut g, &[("c".into(), c)], &specs),
            Err(Error::Config(_))
        ));
    }
}
