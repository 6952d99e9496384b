//! Stochastic-gradient training of the flow against expert statistics.
//!
//! One epoch is one Adam step on a freshly simulated batch. Random streams
//! are split from the run seed with ChaCha stream ids: 0 initializes the
//! flow, 1 drives training, 2 drives post-training evaluation.

use std::io::{Read, Write};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::elicitation::{
    build_statistics, ElicitationPlan, ElicitedStatisticSet, Side, StatisticBlock, Technique,
    CORRELATION_COMPONENT,
};
use crate::error::{Error, Result};
use crate::flow::{standard_normal, FlowConfig, JointPriorFlow};
use crate::loss::{mmd_energy_biased, squared_error, total_loss, LossReport};
use crate::models::{BinomialSampling, GenerativeModel};
use crate::oracle::ExpertData;
use crate::tensor::{Graph, Tensor, Var};

pub const STREAM_INIT: u64 = 0;
pub const STREAM_TRAIN: u64 = 1;
pub const STREAM_EVAL: u64 = 2;

/// Gradient-norm bound used when `clip_gradients` is on.
pub const CLIP_NORM: f64 = 100.0;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub samples_per_prior: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub gumbel_temperature: f64,
    pub clip_gradients: bool,
    /// Prior draws used for the post-training statistics.
    pub final_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            samples_per_prior: 200,
            epochs: 600,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-7,
            seed: 0,
            gumbel_temperature: 1.0,
            clip_gradients: false,
            final_samples: 10_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("gumbel_temperature", self.gumbel_temperature),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("adam betas must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.samples_per_prior < 2 || self.final_samples < 2 {
            return Err(Error::config(
                "batch_size must be >= 1 and sample counts >= 2",
            ));
        }
        Ok(())
    }

    pub fn sampling(&self) -> BinomialSampling {
        BinomialSampling::Relaxed {
            temperature: self.gumbel_temperature,
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn from_config(params: &[Tensor], cfg: &TrainConfig) -> Self {
        Self::new(params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, (p, gr)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(gr.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *w -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Per-epoch record.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub epoch: usize,
    pub loss_total: f64,
    pub components: Vec<f64>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainingTrajectory {
    pub component_names: Vec<String>,
    pub param_names: Vec<String>,
    pub rows: Vec<TrajectoryRow>,
}

impl TrainingTrajectory {
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss_total).collect()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["epoch".to_string(), "loss_total".to_string()];
        h.extend(self.component_names.iter().map(|c| format!("loss_{c}")));
        h.extend(self.param_names.iter().map(|p| format!("mean_{p}")));
        h.extend(self.param_names.iter().map(|p| format!("sd_{p}")));
        h
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(self.header())?;
        for r in &self.rows {
            let mut rec = vec![r.epoch.to_string(), r.loss_total.to_string()];
            rec.extend(
                r.components
                    .iter()
                    .chain(&r.means)
                    .chain(&r.sds)
                    .map(f64::to_string),
            );
            out.write_record(rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl Read) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        let component_names: Vec<String> = header
            .iter()
            .filter_map(|h| h.strip_prefix("loss_").filter(|c| *c != "total"))
            .map(str::to_string)
            .collect();
        let param_names: Vec<String> = header
            .iter()
            .filter_map(|h| h.strip_prefix("mean_"))
            .map(str::to_string)
            .collect();
        let mut traj = TrainingTrajectory {
            component_names,
            param_names,
            rows: Vec::new(),
        };
        if traj.header() != header {
            return Err(Error::config("unexpected trajectory.csv header layout"));
        }
        let (nc, np) = (traj.component_names.len(), traj.param_names.len());
        for rec in rd.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec[i]
                    .parse::<f64>()
                    .map_err(|e| Error::config(format!("bad number '{}': {e}", &rec[i])))
            };
            let nums = (1..rec.len()).map(parse).collect::<Result<Vec<f64>>>()?;
            traj.rows.push(TrajectoryRow {
                epoch: rec[0]
                    .parse()
                    .map_err(|e| Error::config(format!("bad epoch '{}': {e}", &rec[0])))?,
                loss_total: nums[0],
                components: nums[1..1 + nc].to_vec(),
                means: nums[1 + nc..1 + nc + np].to_vec(),
                sds: nums[1 + nc + np..].to_vec(),
            });
        }
        Ok(traj)
    }
}

/// Marginal means (pooled) and SDs (per batch element, averaged) of
/// `[B, S, K]` draws.
pub fn marginal_moments(theta: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (b, s, k) = (theta.shape()[0], theta.shape()[1], theta.shape()[2]);
    let d = theta.data();
    let mut means = vec![0.0; k];
    let mut sds = vec![0.0; k];
    for bi in 0..b {
        for j in 0..k {
            let col = (0..s).map(|si| d[(bi * s + si) * k + j]);
            let m = col.clone().sum::<f64>() / s as f64;
            let var = col.map(|v| (v - m) * (v - m)).sum::<f64>() / s as f64;
            means[j] += m / b as f64;
            sds[j] += var.sqrt() / b as f64;
        }
    }
    (means, sds)
}

/// Model-side statistics for `batch` prior realizations of `samples` draws.
pub struct Simulated {
    pub theta: Var,
    pub blocks: Vec<StatisticBlock>,
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_model_statistics(
    g: &mut Graph,
    flow: &JointPriorFlow,
    params: &[Var],
    model: &GenerativeModel,
    plan: &ElicitationPlan,
    batch: usize,
    samples: usize,
    sampling: BinomialSampling,
    rng: &mut impl Rng,
) -> Result<Simulated> {
    let k = flow.dim();
    let u = g.constant(standard_normal(batch * samples, k, rng));
    let flat = flow.sample_on_graph(g, params, u)?;
    let theta = g.reshape(flat, &[batch, samples, k])?;
    let targets = model.simulate(g, theta, sampling, rng)?;
    let blocks = build_statistics(g, &targets, theta, &model.param_names(), plan)?;
    Ok(Simulated { theta, blocks })
}

/// Check that the expert file carries exactly the statistics the plan
/// produces, in any order.
pub fn check_expert_matches(expert: &ExpertData, plan: &ElicitationPlan, model: &GenerativeModel) -> Result<()> {
    let names = model.param_names();
    let mut expected = Vec::new();
    for e in &plan.entries {
        match &e.technique {
            Technique::Quantiles { levels } => {
                let name = crate::elicitation::quantile_name(&e.target);
                match expert.statistics.get(&name) {
                    Some(s) if s.levels == *levels && s.values.len() == levels.len() => {}
                    Some(_) => {
                        return Err(Error::config(format!(
                            "expert statistic '{name}' has different levels than the plan"
                        )))
                    }
                    None => {
                        return Err(Error::config(format!("expert data lacks statistic '{name}'")))
                    }
                }
                expected.push(name);
            }
            Technique::Correlation => {
                for (a, b) in crate::models::param_pairs(names.len()) {
                    let name = crate::elicitation::correlation_name(&names[a], &names[b]);
                    if expert.statistics.get(&name).is_none_or(|s| s.values.len() != 1) {
                        return Err(Error::config(format!("expert data lacks statistic '{name}'")));
                    }
                    expected.push(name);
                }
            }
        }
    }
    if let Some(extra) = expert.statistics.keys().find(|k| !expected.contains(k)) {
        return Err(Error::config(format!("expert statistic '{extra}' is not in the plan")));
    }
    Ok(())
}

/// Weighted loss between model-side blocks and the expert values.
pub fn elicitation_loss(
    g: &mut Graph,
    blocks: &[StatisticBlock],
    expert: &ExpertData,
    plan: &ElicitationPlan,
) -> Result<(Var, LossReport)> {
    let mut components: Vec<(String, Var)> = Vec::new();
    let mut corr_model = Vec::new();
    let mut corr_expert = Vec::new();
    for b in blocks {
        let target = expert
            .statistics
            .get(&b.name)
            .ok_or_else(|| Error::config(format!("expert data lacks statistic '{}'", b.name)))?;
        if b.component == CORRELATION_COMPONENT {
            corr_model.push(b.value);
            corr_expert.extend_from_slice(&target.values);
        } else {
            let width = target.values.len();
            let y = g.constant(Tensor::new(vec![1, width], target.values.clone())?);
            components.push((b.component.clone(), mmd_energy_biased(g, b.value, y)?));
        }
    }
    if !corr_model.is_empty() {
        let t = g.concat_last(&corr_model)?;
        let h = g.constant(Tensor::from_vec(corr_expert));
        components.push((CORRELATION_COMPONENT.into(), squared_error(g, t, h)?));
    }
    total_loss(g, &components, &plan.loss_components())
}

/// Loss (and optionally the gradient for every flow parameter) for one
/// simulated batch.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_loss(
    flow: &JointPriorFlow,
    model: &GenerativeModel,
    plan: &ElicitationPlan,
    expert: &ExpertData,
    batch: usize,
    samples: usize,
    sampling: BinomialSampling,
    rng: &mut impl Rng,
    with_grad: bool,
) -> Result<(LossReport, Option<Vec<Tensor>>, Tensor)> {
    let mut g = Graph::new();
    let params = flow.bind(&mut g, with_grad);
    let sim = simulate_model_statistics(&mut g, flow, &params, model, plan, batch, samples, sampling, rng)?;
    let (loss, report) = elicitation_loss(&mut g, &sim.blocks, expert, plan)?;
    let theta = g.value(sim.theta).clone();
    if !with_grad || !report.total.is_finite() {
        return Ok((report, None, theta));
    }
    g.backward(loss)?;
    let grads = params
        .iter()
        .map(|p| g.grad(*p).expect("trainable leaf").clone())
        .collect();
    Ok((report, Some(grads), theta))
}

/// Model-side statistics of a trained flow from one large prior sample.
pub fn final_statistics(
    flow: &JointPriorFlow,
    model: &GenerativeModel,
    plan: &ElicitationPlan,
    samples: usize,
    sampling: BinomialSampling,
    rng: &mut impl Rng,
) -> Result<ElicitedStatisticSet> {
    let mut g = Graph::new();
    let params = flow.bind(&mut g, false);
    let sim = simulate_model_statistics(&mut g, flow, &params, model, plan, 1, samples, sampling, rng)?;
    ElicitedStatisticSet::from_blocks(&g, &sim.blocks, Side::Model)
}

/// Everything one seed produces.
#[derive(Clone, Debug)]
pub struct ReplicationResult {
    pub seed: u64,
    pub flow: JointPriorFlow,
    pub statistics: ElicitedStatisticSet,
    pub trajectory: TrainingTrajectory,
    pub final_loss: f64,
    pub final_report: LossReport,
}

/// The `result.json` view of a [`ReplicationResult`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultSummary {
    pub seed: u64,
    pub final_loss: f64,
    pub final_report: LossReport,
    pub param_names: Vec<String>,
    pub marginal_means: Vec<f64>,
    pub marginal_sds: Vec<f64>,
    pub statistics: ElicitedStatisticSet,
    pub checkpoint: PathBuf,
}

impl ReplicationResult {
    pub fn summary(&self, checkpoint: PathBuf) -> ResultSummary {
        let last = self.trajectory.rows.last();
        ResultSummary {
            seed: self.seed,
            final_loss: self.final_loss,
            final_report: self.final_report.clone(),
            param_names: self.trajectory.param_names.clone(),
            marginal_means: last.map(|r| r.means.clone()).unwrap_or_default(),
            marginal_sds: last.map(|r| r.sds.clone()).unwrap_or_default(),
            statistics: self.statistics.clone(),
            checkpoint,
        }
    }
}

/// Train `flow` against `expert`. With `epochs = 0` the initial state is
/// evaluated and logged once without any update.
pub fn train(
    mut flow: JointPriorFlow,
    model: &GenerativeModel,
    plan: &ElicitationPlan,
    expert: &ExpertData,
    cfg: &TrainConfig,
) -> Result<ReplicationResult> {
    cfg.validate()?;
    model.validate()?;
    plan.validate()?;
    check_expert_matches(expert, plan, model)?;
    if flow.dim() != model.dim() {
        return Err(Error::config(format!(
            "flow has {} dimensions, model needs {}",
            flow.dim(),
            model.dim()
        )));
    }
    let mut rng = stream_rng(cfg.seed, STREAM_TRAIN);
    let mut adam = Adam::from_config(flow.params(), cfg);
    let mut trajectory = TrainingTrajectory {
        component_names: plan.loss_components().into_iter().map(|c| c.name).collect(),
        param_names: model.param_names(),
        rows: Vec::with_capacity(cfg.epochs.max(1)),
    };
    let mut last_report: Option<LossReport> = None;
    for epoch in 0..cfg.epochs.max(1) {
        let update = epoch < cfg.epochs;
        let diverged = |last: Option<LossReport>| Error::Divergence {
            epoch,
            last_finite: last.map(Box::new),
        };
        let evaluated = evaluate_loss(
            &flow,
            model,
            plan,
            expert,
            cfg.batch_size,
            cfg.samples_per_prior,
            cfg.sampling(),
            &mut rng,
            update,
        );
        let (report, grads, theta) = match evaluated {
            Ok(v) => v,
            // non-finite or degenerate draws from the flow
            Err(e @ Error::Domain { .. }) => {
                log::warn!("seed {} epoch {epoch}: {e}", cfg.seed);
                return Err(diverged(last_report));
            }
            Err(e) => return Err(e),
        };
        if !report.total.is_finite() {
            return Err(diverged(last_report));
        }
        let (means, sds) = marginal_moments(&theta);
        trajectory.rows.push(TrajectoryRow {
            epoch,
            loss_total: report.total,
            components: report.components.iter().map(|c| c.value).collect(),
            means,
            sds,
        });
        if let Some(mut grads) = grads {
            let norm = grads
                .iter()
                .flat_map(|t| t.data())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() {
                return Err(diverged(Some(report)));
            }
            if cfg.clip_gradients && norm > CLIP_NORM {
                let s = CLIP_NORM / norm;
                for t in &mut grads {
                    t.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
            adam.step(flow.params_mut(), &grads);
        }
        if epoch % 50 == 0 {
            log::debug!("seed {} epoch {epoch}: loss {:.6}", cfg.seed, report.total);
        }
        last_report = Some(report);
    }
    let final_report = last_report.expect("at least one epoch is evaluated");
    let mut eval_rng = stream_rng(cfg.seed, STREAM_EVAL);
    let statistics = final_statistics(&flow, model, plan, cfg.final_samples, cfg.sampling(), &mut eval_rng)?;
    Ok(ReplicationResult {
        seed: cfg.seed,
        flow,
        statistics,
        trajectory,
        final_loss: final_report.total,
        final_report,
    })
}

/// Successful runs in seed order plus a record of what went wrong.
#[derive(Debug, Default)]
pub struct ReplicationBatch {
    pub results: Vec<ReplicationResult>,
    pub failures: Vec<(u64, Error)>,
    pub warnings: Vec<String>,
}

/// Independent runs, one per seed, in parallel. The flow for seed `s` is
/// initialized from stream 0 of `s`.
pub fn run_replications(
    flow_config: &FlowConfig,
    model: &GenerativeModel,
    plan: &ElicitationPlan,
    expert: &ExpertData,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> ReplicationBatch {
    let mut batch = ReplicationBatch::default();
    for (i, s) in seeds.iter().enumerate() {
        if seeds[..i].contains(s) {
            batch.warnings.push(format!("seed {s} listed more than once"));
        }
    }
    let outcomes: Vec<(u64, Result<ReplicationResult>)> = seeds
        .par_iter()
        .map(|&seed| {
            let run = || {
                let flow = JointPriorFlow::new(flow_config.clone(), flow_seed(seed))?;
                train(flow, model, plan, expert, &TrainConfig { seed, ..cfg.clone() })
            };
            (seed, run())
        })
        .collect();
    for (seed, outcome) in outcomes {
        match outcome {
            Ok(r) => batch.results.push(r),
            Err(e) => {
                log::warn!("seed {seed} failed: {e}");
                batch.failures.push((seed, e));
            }
        }
    }
    if !batch.failures.is_empty() {
        batch
            .warnings
            .push(format!("{} of {} runs failed", batch.failures.len(), seeds.len()));
    }
    batch
}

/// Seed handed to [`JointPriorFlow::new`] for run seed `seed`.
pub fn flow_seed(seed: u64) -> u64 {
    // stream 0 of the run seed
    stream_rng(seed, STREAM_INIT).random()
}
