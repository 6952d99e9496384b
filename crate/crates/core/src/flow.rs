//! Normalizing-flow joint prior built from affine coupling blocks over a
//! standard multivariate normal base.
//!
//! Each block applies, in the normalizing direction (θ → u):
//!
//! 1. an activation normalization `x ⊙ exp(a) + b` with learnable `a`, `b`;
//! 2. an affine coupling of the first half conditioned on the second;
//! 3. an affine coupling of the second half conditioned on the (updated) first;
//! 4. a fixed coordinate permutation.
//!
//! Coupling scales pass through the soft clamp `(2c/π)·atan(s/c)`, and the
//! last dense layer of every subnet starts at zero, so a fresh flow is the
//! identity map. Sampling runs the blocks in reverse and finishes with a
//! softplus on the declared positivity coordinates.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softplus, Graph, Tensor, Var};

const CHECKPOINT_MAGIC: &[u8; 8] = b"EFLOWCK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub dim_theta: usize,
    pub num_blocks: usize,
    pub hidden_units: usize,
    pub hidden_layers: usize,
    pub scale_clamp: f64,
    pub positivity_dims: Vec<usize>,
    pub act_norm: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            dim_theta: 2,
            num_blocks: 3,
            hidden_units: 128,
            hidden_layers: 2,
            scale_clamp: 1.9,
            positivity_dims: Vec::new(),
            act_norm: true,
        }
    }
}

impl FlowConfig {
    pub fn new(dim_theta: usize) -> Self {
        FlowConfig {
            dim_theta,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim_theta < 2 {
            return Err(Error::config("flow needs dim_theta >= 2 to split coordinates"));
        }
        if self.num_blocks == 0 || self.hidden_units == 0 || self.hidden_layers == 0 {
            return Err(Error::config(
                "num_blocks, hidden_units and hidden_layers must be >= 1",
            ));
        }
        if !(self.scale_clamp > 0.0 && self.scale_clamp.is_finite()) {
            return Err(Error::config("scale_clamp must be positive"));
        }
        if let Some(d) = self.positivity_dims.iter().find(|&&d| d >= self.dim_theta) {
            return Err(Error::config(format!("positivity dim {d} out of range")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Dense {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct Mlp {
    layers: Vec<Dense>,
}

#[derive(Clone, Debug)]
struct AffineCoupling {
    target: Vec<usize>,
    condition: Vec<usize>,
    /// `merge[j]` is the position of coordinate `j` in `target ++ condition`.
    merge: Vec<usize>,
    scale_net: Mlp,
    shift_net: Mlp,
}

#[derive(Clone, Debug)]
struct ActNorm {
    log_scale: usize,
    bias: usize,
}

/// One block of the flow: optional activation normalization, two affine
/// couplings (one per half) and a fixed permutation.
#[derive(Clone, Debug)]
pub struct CouplingBlock {
    act_norm: Option<ActNorm>,
    couplings: [AffineCoupling; 2],
    permutation: Vec<usize>,
    inverse_permutation: Vec<usize>,
}

impl CouplingBlock {
    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    /// (active, passive) coordinate split of the first coupling.
    pub fn split(&self) -> (&[usize], &[usize]) {
        (&self.couplings[0].target, &self.couplings[0].condition)
    }
}

/// Serialized header of a checkpoint file.
#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: FlowConfig,
    init_seed: u64,
    permutations: Vec<Vec<usize>>,
    param_shapes: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct JointPriorFlow {
    config: FlowConfig,
    init_seed: u64,
    blocks: Vec<CouplingBlock>,
    params: Vec<Tensor>,
}

/// Builds parameter tensors in declaration order while the block layout is
/// being assembled.
struct ParamBuilder<'a> {
    params: Vec<Tensor>,
    rng: &'a mut ChaCha8Rng,
}

impl ParamBuilder<'_> {
    fn push(&mut self, t: Tensor) -> usize {
        self.params.push(t);
        self.params.len() - 1
    }

    fn mlp(&mut self, inputs: usize, outputs: usize, cfg: &FlowConfig) -> Mlp {
        let mut layers = Vec::with_capacity(cfg.hidden_layers + 1);
        let mut fan_in = inputs;
        for _ in 0..cfg.hidden_layers {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let w: Vec<f64> = (0..fan_in * cfg.hidden_units)
                .map(|_| self.rng.sample(dist))
                .collect();
            let weight = self.push(Tensor::new(vec![fan_in, cfg.hidden_units], w).unwrap());
            let bias = self.push(Tensor::zeros(&[cfg.hidden_units]));
            layers.push(Dense { weight, bias });
            fan_in = cfg.hidden_units;
        }
        let weight = self.push(Tensor::zeros(&[fan_in, outputs]));
        let bias = self.push(Tensor::zeros(&[outputs]));
        layers.push(Dense { weight, bias });
        Mlp { layers }
    }

    fn coupling(&mut self, target: Vec<usize>, condition: Vec<usize>, cfg: &FlowConfig) -> AffineCoupling {
        let scale_net = self.mlp(condition.len(), target.len(), cfg);
        let shift_net = self.mlp(condition.len(), target.len(), cfg);
        let mut merge = vec![0; cfg.dim_theta];
        for (pos, &coord) in target.iter().chain(&condition).enumerate() {
            merge[coord] = pos;
        }
        AffineCoupling {
            target,
            condition,
            merge,
            scale_net,
            shift_net,
        }
    }
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn is_permutation(perm: &[usize], n: usize) -> bool {
    let mut seen = vec![false; n];
    perm.len() == n
        && perm
            .iter()
            .all(|&p| p < n && !std::mem::replace(&mut seen[p], true))
}

/// Numerically stable inverse of softplus for `y > 0`.
fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl JointPriorFlow {
    /// Fresh flow whose weights and permutations are drawn from `seed`.
    pub fn new(config: FlowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let k = config.dim_theta;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let permutations: Vec<Vec<usize>> = (0..config.num_blocks)
            .map(|_| {
                if k == 2 {
                    vec![1, 0]
                } else {
                    let mut p: Vec<usize> = (0..k).collect();
                    p.shuffle(&mut rng);
                    p
                }
            })
            .collect();
        Self::build(config, seed, permutations, &mut rng)
    }

    fn build(
        config: FlowConfig,
        init_seed: u64,
        permutations: Vec<Vec<usize>>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let k = config.dim_theta;
        let half = k / 2;
        let first: Vec<usize> = (0..half).collect();
        let second: Vec<usize> = (half..k).collect();
        let mut builder = ParamBuilder {
            params: Vec::new(),
            rng,
        };
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for permutation in permutations {
            if !is_permutation(&permutation, k) {
                return Err(Error::config(format!("invalid permutation {permutation:?}")));
            }
            let act_norm = config.act_norm.then(|| ActNorm {
                log_scale: builder.push(Tensor::zeros(&[k])),
                bias: builder.push(Tensor::zeros(&[k])),
            });
            let c0 = builder.coupling(first.clone(), second.clone(), &config);
            let c1 = builder.coupling(second.clone(), first.clone(), &config);
            blocks.push(CouplingBlock {
                act_norm,
                couplings: [c0, c1],
                inverse_permutation: invert(&permutation),
                permutation,
            });
        }
        Ok(JointPriorFlow {
            config,
            init_seed,
            blocks,
            params: builder.params,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim_theta
    }

    pub fn blocks(&self) -> &[CouplingBlock] {
        &self.blocks
    }

    /// Trainable tensors in declaration order.
    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Add N(0, std²) noise to every parameter. Moves the flow away from the
    /// identity, e.g. to exercise the transforms in checks.
    pub fn perturb(&mut self, rng: &mut impl Rng, std: f64) {
        for p in &mut self.params {
            for v in p.data_mut() {
                *v += std * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }

    /// Register the parameters as graph leaves.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.leaf(p.clone(), trainable))
            .collect()
    }

    fn mlp(&self, g: &mut Graph, p: &[Var], net: &Mlp, x: Var) -> Result<Var> {
        let mut h = x;
        let last = net.layers.len() - 1;
        for (i, layer) in net.layers.iter().enumerate() {
            let z = g.linear(h, p[layer.weight], p[layer.bias])?;
            h = if i < last { g.relu(z) } else { z };
        }
        Ok(h)
    }

    fn clamped_scale(&self, g: &mut Graph, raw: Var) -> Var {
        let c = self.config.scale_clamp;
        let a = g.affine(raw, 1.0 / c, 0.0);
        let a = g.atan(a);
        g.affine(a, 2.0 * c / PI, 0.0)
    }

    /// Normalizing direction of one coupling; adds the log-det to `log_det`.
    fn coupling_forward(
        &self,
        g: &mut Graph,
        p: &[Var],
        c: &AffineCoupling,
        x: Var,
        log_det: &mut Option<Var>,
    ) -> Result<Var> {
        let cond = g.gather_last(x, &c.condition)?;
        let target = g.gather_last(x, &c.target)?;
        let raw = self.mlp(g, p, &c.scale_net, cond)?;
        let s = self.clamped_scale(g, raw);
        let t = self.mlp(g, p, &c.shift_net, cond)?;
        let es = g.exp(s);
        let scaled = g.mul(target, es)?;
        let moved = g.add(scaled, t)?;
        let last = g.shape(s).len() - 1;
        let ld = g.sum(s, last)?;
        accumulate(g, log_det, ld)?;
        let joined = g.concat_last(&[moved, cond])?;
        g.gather_last(joined, &c.merge)
    }

    fn coupling_inverse(&self, g: &mut Graph, p: &[Var], c: &AffineCoupling, y: Var) -> Result<Var> {
        let cond = g.gather_last(y, &c.condition)?;
        let target = g.gather_last(y, &c.target)?;
        let raw = self.mlp(g, p, &c.scale_net, cond)?;
        let s = self.clamped_scale(g, raw);
        let t = self.mlp(g, p, &c.shift_net, cond)?;
        let centered = g.sub(target, t)?;
        let neg = g.neg(s);
        let es = g.exp(neg);
        let restored = g.mul(centered, es)?;
        let joined = g.concat_last(&[restored, cond])?;
        g.gather_last(joined, &c.merge)
    }

    /// u = g_λ(z) on the unconstrained space, accumulating the log-det.
    fn normalize_on_graph(&self, g: &mut Graph, p: &[Var], z: Var) -> Result<(Var, Option<Var>)> {
        let mut x = z;
        let mut log_det = None;
        let rows = g.shape(z)[0];
        for block in &self.blocks {
            if let Some(an) = &block.act_norm {
                let es = g.exp(p[an.log_scale]);
                let scaled = g.mul(x, es)?;
                x = g.add(scaled, p[an.bias])?;
                let total = g.sum(p[an.log_scale], 0)?;
                let ones = g.constant(Tensor::full(&[rows], 1.0));
                let ld = g.mul(ones, total)?;
                accumulate(g, &mut log_det, ld)?;
            }
            for c in &block.couplings {
                x = self.coupling_forward(g, p, c, x, &mut log_det)?;
            }
            x = g.gather_last(x, &block.permutation)?;
        }
        Ok((x, log_det))
    }

    /// θ = g_λ⁻¹(u) including the positivity map; differentiable w.r.t. the
    /// bound parameters `p`.
    pub fn sample_on_graph(&self, g: &mut Graph, p: &[Var], u: Var) -> Result<Var> {
        let shape = g.shape(u).to_vec();
        if shape.len() != 2 || shape[1] != self.dim() {
            return Err(Error::shape(format!(
                "flow expects [S, {}] base draws, got {shape:?}",
                self.dim()
            )));
        }
        let mut x = u;
        for block in self.blocks.iter().rev() {
            x = g.gather_last(x, &block.inverse_permutation)?;
            for c in block.couplings.iter().rev() {
                x = self.coupling_inverse(g, p, c, x)?;
            }
            if let Some(an) = &block.act_norm {
                let centered = g.sub(x, p[an.bias])?;
                let neg = g.neg(p[an.log_scale]);
                let es = g.exp(neg);
                x = g.mul(centered, es)?;
            }
        }
        self.positivity_on_graph(g, x)
    }

    fn positivity_on_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if self.config.positivity_dims.is_empty() {
            return Ok(x);
        }
        let mut mask = vec![0.0; self.dim()];
        for &d in &self.config.positivity_dims {
            mask[d] = 1.0;
        }
        let mask = g.constant(Tensor::from_vec(mask));
        let sp = g.softplus(x);
        let diff = g.sub(sp, x)?;
        let delta = g.mul(diff, mask)?;
        g.add(x, delta)
    }

    /// Generative map applied to given base points.
    pub fn inverse(&self, u: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let uv = g.constant(u.clone());
        let theta = self.sample_on_graph(&mut g, &p, uv)?;
        Ok(g.value(theta).clone())
    }

    /// Draw `count` samples: u ~ N(0, I), θ = g_λ⁻¹(u).
    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> Result<Tensor> {
        if count == 0 {
            return Err(Error::config("sample count must be >= 1"));
        }
        self.inverse(&standard_normal(count, self.dim(), rng))
    }

    /// u = g_λ(θ) and log|det ∂u/∂θ| per row, including the positivity map.
    pub fn forward_normalizing(&self, theta: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let shape = theta.shape();
        if shape.len() != 2 || shape[1] != self.dim() {
            return Err(Error::shape(format!(
                "flow expects [S, {}] parameters, got {shape:?}",
                self.dim()
            )));
        }
        let rows = shape[0];
        let k = self.dim();
        let mut z = theta.clone();
        let mut pos_log_det = vec![0.0; rows];
        for &d in &self.config.positivity_dims {
            for r in 0..rows {
                let v = z.data()[r * k + d];
                if !(v > 0.0) {
                    return Err(Error::domain(
                        "forward_normalizing",
                        0,
                        format!("non-positive value {v} on positivity dim {d} (row {r})"),
                    ));
                }
                let inv = inverse_softplus(v);
                z.data_mut()[r * k + d] = inv;
                pos_log_det[r] += softplus(-inv);
            }
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let zv = g.constant(z);
        let (u, ld) = self.normalize_on_graph(&mut g, &p, zv)?;
        let mut log_det = pos_log_det;
        if let Some(ld) = ld {
            for (acc, v) in log_det.iter_mut().zip(g.value(ld).data()) {
                *acc += v;
            }
        }
        Ok((g.value(u).clone(), log_det))
    }

    /// log p_λ(θ) = log N(g_λ(θ); 0, I) + log|det g_λ'(θ)|.
    pub fn log_prob(&self, theta: &Tensor) -> Result<Vec<f64>> {
        let (u, log_det) = self.forward_normalizing(theta)?;
        let k = self.dim();
        let norm = -0.5 * k as f64 * (2.0 * PI).ln();
        Ok(log_det
            .iter()
            .enumerate()
            .map(|(r, ld)| norm - 0.5 * u.row(r).iter().map(|v| v * v).sum::<f64>() + ld)
            .collect())
    }

    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            init_seed: self.init_seed,
            permutations: self.blocks.iter().map(|b| b.permutation.clone()).collect(),
            param_shapes: self.params.iter().map(|p| p.shape().to_vec()).collect(),
        };
        let header = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for p in &self.params {
            for v in p.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = usize::try_from(u64::from_le_bytes(len))
            .map_err(|_| Error::Checkpoint("header too large".into()))?;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        header.config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(header.init_seed);
        let mut flow = Self::build(header.config, header.init_seed, header.permutations, &mut rng)?;
        let expected: Vec<Vec<usize>> = flow.params.iter().map(|p| p.shape().to_vec()).collect();
        if expected != header.param_shapes {
            return Err(Error::Checkpoint(
                "parameter layout does not match the configuration".into(),
            ));
        }
        let mut buf = [0u8; 8];
        for p in &mut flow.params {
            for v in p.data_mut() {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
        }
        Ok(flow)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_checkpoint(file)
    }
}

fn accumulate(g: &mut Graph, acc: &mut Option<Var>, term: Var) -> Result<()> {
    *acc = Some(match *acc {
        Some(a) => g.add(a, term)?,
        None => term,
    });
    Ok(())
}

/// `[rows, cols]` matrix of independent standard-normal draws.
pub fn standard_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![rows, cols], data).expect("consistent shape")
}
