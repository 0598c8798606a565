//! Training loops for every model variant, the optimizer, gradient
//! verification, and checkpointing.
//!
//! One training step is a pure function of (parameters, batch, seed, step):
//! all randomness is drawn from purpose-keyed substreams of the master seed,
//! so resuming from a checkpoint replays the exact remaining trajectory, and
//! objectives that skip a draw (for example no input augmentation) leave the
//! other streams untouched. Batches may be produced ahead of the consumer as
//! long as batch k is the one derived from step k.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CamError, Result};
use crate::fileio::{check_container, seal_container, ByteReader};
use crate::graph::Graph;
use crate::math::{
    sample_error_level, sample_sigma_from, DdpmSchedule, SigmaDistribution, DDPM_TRAIN_STEPS,
};
use crate::model::backbone::backbone_graph;
use crate::model::config::{sigma_embed_dim, Head, ModelConfig};
use crate::model::gmm::gmm_nll_op;
use crate::model::params::{BoundParams, GradMap, ParamStore};
use crate::model::sampler::{sampler_graph, sigma_feature_rows};
use crate::rng::{lane, normal, stream};
use crate::tensor::{Scalar, Tensor};

/// Which loss a model is trained with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Objective {
    /// Flow matching with noise-augmented backbone inputs.
    Cam,
    /// Noise prediction on a DDPM linear schedule, clean backbone inputs.
    MarLinear,
    /// Flow matching with clean backbone inputs.
    MarRf,
    /// Gaussian-mixture likelihood, clean backbone inputs.
    Givt,
    /// Gaussian-mixture likelihood with noise-augmented backbone inputs.
    GivtNoise,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::Cam,
        Objective::MarLinear,
        Objective::MarRf,
        Objective::Givt,
        Objective::GivtNoise,
    ];

    /// GMM-head variants; the rest use the flow sampler head.
    pub fn uses_gmm_head(self) -> bool {
        matches!(self, Objective::Givt | Objective::GivtNoise)
    }

    /// Whether backbone inputs are noise-augmented during training.
    pub fn uses_augmentation(self) -> bool {
        matches!(self, Objective::Cam | Objective::GivtNoise)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Cam => "cam",
            Objective::MarLinear => "mar_linear",
            Objective::MarRf => "mar_rf",
            Objective::Givt => "givt",
            Objective::GivtNoise => "givt_noise",
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_sigma_distribution() -> SigmaDistribution {
    SigmaDistribution::LogitNormal
}

/// Hyperparameters of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub noise_augmentation: bool,
    pub z_dropout_prob: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weight_decay: f64,
    pub context_length: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Distribution of the flow corruption time sigma.
    #[serde(default = "default_sigma_distribution")]
    pub sigma_distribution: SigmaDistribution,
    /// When set, the head's corruption target is built from the augmented
    /// inputs instead of the clean embeddings. Off by default: the sampler
    /// learns to produce clean embeddings.
    #[serde(default)]
    pub augment_target: bool,
}

impl TrainConfig {
    /// Desk-scale defaults: 20k steps, batch 64, context 64, AdamW at 1e-4.
    pub fn desk(objective: Objective, seed: u64) -> Self {
        TrainConfig {
            objective,
            noise_augmentation: objective.uses_augmentation(),
            z_dropout_prob: 0.2,
            batch_size: 64,
            total_steps: 20_000,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            weight_decay: 0.01,
            context_length: 64,
            seed,
            checkpoint_every: 5_000,
            sigma_distribution: SigmaDistribution::LogitNormal,
            augment_target: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.z_dropout_prob) {
            return Err(CamError::InvalidConfig(format!(
                "z_dropout_prob {} outside [0,1]",
                self.z_dropout_prob
            )));
        }
        if self.noise_augmentation != self.objective.uses_augmentation() {
            return Err(CamError::InvalidConfig(format!(
                "objective {} requires noise_augmentation={}",
                self.objective,
                self.objective.uses_augmentation()
            )));
        }
        if self.batch_size == 0 || self.context_length == 0 || self.total_steps == 0 {
            return Err(CamError::InvalidConfig(
                "batch_size, context_length, and total_steps must be positive".into(),
            ));
        }
        let lr_ok = self.learning_rate > 0.0 && self.learning_rate.is_finite();
        if !lr_ok
            || !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || self.weight_decay < 0.0
        {
            return Err(CamError::InvalidConfig(
                "optimizer hyperparameters out of range".into(),
            ));
        }
        Ok(())
    }
}

/// A batch of equal-length sequences, row-major as (batch*time, dim) with
/// the batch index outermost.
#[derive(Clone, Debug)]
pub struct Batch {
    pub data: Vec<f32>,
    pub batch: usize,
    pub time: usize,
    pub dim: usize,
}

impl Batch {
    pub fn new(data: Vec<f32>, batch: usize, time: usize, dim: usize) -> Self {
        assert_eq!(data.len(), batch * time * dim, "batch data length");
        Batch {
            data,
            batch,
            time,
            dim,
        }
    }

    pub fn row(&self, b: usize, t: usize) -> &[f32] {
        let i = (b * self.time + t) * self.dim;
        &self.data[i..i + self.dim]
    }
}

/// All random draws consumed by one training step, precomputed in f64 so the
/// 32-bit and 64-bit loss paths see identical randomness.
#[derive(Clone, Debug)]
pub struct StepNoise {
    /// Per-position feedback error level k; all zero when augmentation is off.
    pub ks: Vec<f64>,
    /// Augmentation noise, (batch*time*dim); zeros when augmentation is off.
    pub eps_aug: Vec<f64>,
    /// Per-position corruption time in [0,1]. For the DDPM objective this is
    /// the normalized timestep t/(T-1) fed to the sigma embedding.
    pub sigmas: Vec<f64>,
    /// Integer DDPM timesteps; empty for flow objectives.
    pub timesteps: Vec<usize>,
    /// Head corruption noise, (batch*time*dim); empty for GMM objectives.
    pub eps_prime: Vec<f64>,
    /// Positions whose conditioning vector is replaced by z_SOS.
    pub drop_mask: Vec<bool>,
}

/// Draw one step's noise from the per-purpose substreams. Streams are keyed
/// by (lane, step), so an objective that skips a lane does not shift any
/// other lane's draws.
pub fn sample_step_noise(
    cfg: &TrainConfig,
    batch: usize,
    time: usize,
    dim: usize,
    step: u64,
) -> StepNoise {
    let n = batch * time;
    let (mut ks, mut eps_aug) = (vec![0.0; n], vec![0.0; n * dim]);
    if cfg.noise_augmentation {
        let mut rng = stream(cfg.seed, &[lane::AUGMENT, step]);
        for i in 0..n {
            ks[i] = sample_error_level(&mut rng).value();
            for j in 0..dim {
                eps_aug[i * dim + j] = normal(&mut rng);
            }
        }
    }

    let gmm = cfg.objective.uses_gmm_head();
    let mut sigmas = vec![0.0; if gmm { 0 } else { n }];
    let mut timesteps = Vec::new();
    let mut eps_prime = vec![0.0; if gmm { 0 } else { n * dim }];
    if !gmm {
        let mut sig_rng = stream(cfg.seed, &[lane::SIGMA, step]);
        if cfg.objective == Objective::MarLinear {
            timesteps.reserve(n);
            for sigma in sigmas.iter_mut() {
                let u: f64 = rand::Rng::gen(&mut sig_rng);
                let t = ((u * DDPM_TRAIN_STEPS as f64) as usize).min(DDPM_TRAIN_STEPS - 1);
                timesteps.push(t);
                *sigma = t as f64 / (DDPM_TRAIN_STEPS - 1) as f64;
            }
        } else {
            for s in sigmas.iter_mut() {
                *s = sample_sigma_from(cfg.sigma_distribution, &mut sig_rng).value();
            }
        }
        let mut eps_rng = stream(cfg.seed, &[lane::HEAD_NOISE, step]);
        for e in eps_prime.iter_mut() {
            *e = normal(&mut eps_rng);
        }
    }

    let mut drop_rng = stream(cfg.seed, &[lane::Z_DROPOUT, step]);
    let drop_mask = (0..n)
        .map(|_| rand::Rng::gen::<f64>(&mut drop_rng) < cfg.z_dropout_prob)
        .collect();

    StepNoise {
        ks,
        eps_aug,
        sigmas,
        timesteps,
        eps_prime,
        drop_mask,
    }
}

/// Backbone inputs for one step: the noise-augmented embeddings
/// `k*eps + (1-k)*x` in f64. The error levels enter the model only through
/// this mix; nothing else in the step reads them.
pub fn build_backbone_inputs(batch: &Batch, noise: &StepNoise) -> Vec<f64> {
    let d = batch.dim;
    let mut out = Vec::with_capacity(batch.data.len());
    for i in 0..batch.batch * batch.time {
        let k = noise.ks[i];
        for j in 0..d {
            let x = batch.data[i * d + j] as f64;
            out.push(k * noise.eps_aug[i * d + j] + (1.0 - k) * x);
        }
    }
    out
}

/// Build the training loss on a fresh tape and optionally backpropagate.
/// Generic over the scalar so the same code runs in 32-bit (training) and
/// 64-bit (gradient verification) modes.
pub fn loss_and_grads<T: Scalar>(
    params: &ParamStore<T>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    batch: &Batch,
    noise: &StepNoise,
    want_grads: bool,
) -> Result<(f64, Option<GradMap<T>>)> {
    let (b, t, d) = (batch.batch, batch.time, batch.dim);
    if d != model_cfg.backbone.input_dim {
        return Err(CamError::DimensionMismatch {
            context: "loss_and_grads batch dim",
            expected: model_cfg.backbone.input_dim,
            got: d,
        });
    }
    if t > model_cfg.backbone.max_context {
        return Err(CamError::ContextOverflow {
            len: t,
            max: model_cfg.backbone.max_context,
        });
    }

    let mut g = Graph::<T>::new(want_grads);
    let bound = BoundParams::bind(&mut g, params);

    let inputs = build_backbone_inputs(batch, noise);
    let x_in = g.leaf(Tensor::from_vec(
        &[b * t, d],
        inputs.iter().map(|&v| T::from_f64(v)).collect(),
    ));
    let zs = backbone_graph(&mut g, &bound, &model_cfg.backbone, x_in, b, t);
    let z_sos = bound.var("z_sos");
    let shifted = g.shift_rows_prepend(zs, z_sos, b, t);
    let z = g.select_rows(shifted, z_sos, Arc::new(noise.drop_mask.clone()));

    // Head targets are built from the clean embeddings unless the
    // augment_target switch routes the augmented ones through instead.
    let head_x = |i: usize, j: usize| -> f64 {
        if cfg.augment_target {
            inputs[i * d + j]
        } else {
            batch.data[i * d + j] as f64
        }
    };

    let loss = match &model_cfg.head {
        Head::Sampler(scfg) => {
            let n = b * t;
            let mut y = Vec::with_capacity(n * d);
            let mut target = Vec::with_capacity(n * d);
            match cfg.objective {
                Objective::MarLinear => {
                    let sched = DdpmSchedule::linear(DDPM_TRAIN_STEPS);
                    for i in 0..n {
                        let ab = sched.alpha_bar(noise.timesteps[i]);
                        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
                        for j in 0..d {
                            let e = noise.eps_prime[i * d + j];
                            y.push(T::from_f64(sa * head_x(i, j) + sb * e));
                            target.push(T::from_f64(e));
                        }
                    }
                }
                _ => {
                    for i in 0..n {
                        let s = noise.sigmas[i];
                        for j in 0..d {
                            let x = head_x(i, j);
                            let e = noise.eps_prime[i * d + j];
                            y.push(T::from_f64(s * e + (1.0 - s) * x));
                            target.push(T::from_f64(x - e));
                        }
                    }
                }
            }
            let yv = g.leaf(Tensor::from_vec(&[n, d], y));
            let feats = g.leaf(sigma_feature_rows::<T>(
                &noise.sigmas,
                sigma_embed_dim(scfg.model_dim),
            ));
            let drift = sampler_graph(&mut g, &bound, scfg, z, yv, feats);
            let tv = g.leaf(Tensor::from_vec(&[n, d], target));
            let diff = g.sub(drift, tv);
            let sq = g.mul(diff, diff);
            // Per-token squared L2, averaged over batch and time.
            let m = g.mean_all(sq);
            g.scale(m, T::from_f64(d as f64))
        }
        Head::Gmm(hcfg) => {
            let raw = g.linear(z, bound.var("gmm.head.w"), bound.var("gmm.head.b"));
            let targets = Tensor::from_vec(
                &[b * t, d],
                batch.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
            );
            let nll = gmm_nll_op(&mut g, raw, &targets, hcfg.num_modes, d);
            g.mean_all(nll)
        }
    };

    let loss_value = g.value(loss).data()[0].to_f64();
    if !want_grads {
        return Ok((loss_value, None));
    }
    let mut grads = g.backward(loss);
    Ok((loss_value, Some(bound.collect_grads(&mut grads))))
}

/// AdamW first/second moments plus the shared update counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = |p: &ParamStore<f32>| -> BTreeMap<String, Tensor<f32>> {
            p.iter()
                .map(|(name, t)| (name.clone(), Tensor::zeros(t.shape())))
                .collect()
        };
        AdamState {
            m: zeros(params),
            v: zeros(params),
            t: 0,
        }
    }
}

const ADAM_EPS: f64 = 1e-8;

/// One decoupled-weight-decay Adam update. Returns the global gradient norm.
/// Parameters missing from `grads` see a zero gradient (moments decay,
/// weight decay still applies), keeping the update deterministic.
pub fn adamw_update(
    params: &mut ParamStore<f32>,
    grads: &GradMap<f32>,
    opt: &mut AdamState,
    cfg: &TrainConfig,
) -> f64 {
    opt.t += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bc1 = 1.0 - b1.powi(opt.t as i32);
    let bc2 = 1.0 - b2.powi(opt.t as i32);
    let lr = cfg.learning_rate;
    let wd = cfg.weight_decay;

    let mut norm_sq = 0.0f64;
    for g in grads.values() {
        for &v in g.data() {
            norm_sq += (v as f64) * (v as f64);
        }
    }

    let zero = Tensor::zeros(&[1]);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).unwrap_or(&zero);
        let g_data: &[f32] = if g.len() == p.len() { g.data() } else { &[] };
        let m = opt.m.get_mut(name).expect("moment for param");
        let v = opt.v.get_mut(name).expect("moment for param");
        let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.data_mut());
        for i in 0..pd.len() {
            let gi = g_data.get(i).copied().unwrap_or(0.0) as f64;
            let mi = b1 * md[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * vd[i] as f64 + (1.0 - b2) * gi * gi;
            md[i] = mi as f32;
            vd[i] = vi as f32;
            let update = (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
            pd[i] = (pd[i] as f64 - lr * update - lr * wd * pd[i] as f64) as f32;
        }
    }
    norm_sq.sqrt()
}

/// Everything needed to continue training or generate: parameters, optimizer
/// moments, step counter, and the configs that produced them. The RNG state
/// is implicit: every draw is keyed by (seed, lane, step).
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub params: ParamStore<f32>,
    pub opt: AdamState,
    pub step: u64,
    pub loss_sum: f64,
    pub loss_count: u64,
}

impl TrainState {
    pub fn new(model_cfg: ModelConfig, train_cfg: TrainConfig) -> Result<Self> {
        model_cfg.validate()?;
        train_cfg.validate()?;
        let params = ParamStore::init(&model_cfg, train_cfg.seed);
        let opt = AdamState::new(&params);
        Ok(TrainState {
            model_cfg,
            train_cfg,
            params,
            opt,
            step: 0,
            loss_sum: 0.0,
            loss_count: 0,
        })
    }

    pub fn mean_loss(&self) -> f64 {
        if self.loss_count == 0 {
            0.0
        } else {
            self.loss_sum / self.loss_count as f64
        }
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

fn norm_report(batch: &Batch, params: &ParamStore<f32>) -> String {
    let batch_max = batch.data.iter().fold(0.0f32, |a, &v| a.max(v.abs()));
    let mut param_max = 0.0f32;
    let mut worst = "";
    for (name, t) in params.iter() {
        let m = t.data().iter().fold(0.0f32, |a, &v| a.max(v.abs()));
        if m > param_max {
            param_max = m;
            worst = name;
        }
    }
    format!("batch max |x| = {batch_max:.3e}, param max |w| = {param_max:.3e} ({worst})")
}

/// One training step for whichever objective the state was built with.
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<StepStats> {
    let start = Instant::now();
    let step = state.step;
    let noise = sample_step_noise(
        &state.train_cfg,
        batch.batch,
        batch.time,
        batch.dim,
        step,
    );
    let (loss, grads) = loss_and_grads(
        &state.params,
        &state.model_cfg,
        &state.train_cfg,
        batch,
        &noise,
        true,
    )?;
    if !loss.is_finite() {
        return Err(CamError::NonFinite {
            what: "loss",
            step,
            detail: norm_report(batch, &state.params),
        });
    }
    let grads = grads.expect("grads requested");
    let grad_norm = adamw_update(&mut state.params, &grads, &mut state.opt, &state.train_cfg);
    if !grad_norm.is_finite() || !state.params.all_finite() {
        return Err(CamError::NonFinite {
            what: "parameters",
            step,
            detail: norm_report(batch, &state.params),
        });
    }
    state.step += 1;
    state.loss_sum += loss;
    state.loss_count += 1;
    Ok(StepStats {
        step,
        loss,
        grad_norm,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

fn expect_objective(state: &TrainState, allowed: &[Objective], op: &'static str) -> Result<()> {
    if allowed.contains(&state.train_cfg.objective) {
        Ok(())
    } else {
        Err(CamError::InvalidConfig(format!(
            "{op} called with objective {}",
            state.train_cfg.objective
        )))
    }
}

/// Flow-matching step with noise-augmented inputs.
pub fn cam_train_step(state: &mut TrainState, batch: &Batch) -> Result<StepStats> {
    expect_objective(state, &[Objective::Cam, Objective::MarRf], "cam_train_step")?;
    train_step(state, batch)
}

/// Noise-prediction step on the DDPM linear schedule.
pub fn mar_linear_train_step(state: &mut TrainState, batch: &Batch) -> Result<StepStats> {
    expect_objective(state, &[Objective::MarLinear], "mar_linear_train_step")?;
    train_step(state, batch)
}

/// Mixture-likelihood step, with or without input augmentation.
pub fn givt_train_step(state: &mut TrainState, batch: &Batch) -> Result<StepStats> {
    expect_objective(
        state,
        &[Objective::Givt, Objective::GivtNoise],
        "givt_train_step",
    )?;
    train_step(state, batch)
}

/// Training metrics CSV with a versioned header.
pub struct MetricsCsv {
    file: std::io::BufWriter<std::fs::File>,
    path: PathBuf,
}

impl MetricsCsv {
    pub fn create(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let file = std::fs::File::create(&path).map_err(|e| CamError::io(&path, e))?;
        let mut w = MetricsCsv {
            file: std::io::BufWriter::new(file),
            path,
        };
        w.line("# train-metrics v1")?;
        w.line("step,wall_ms,loss,grad_norm")?;
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.file, "{s}").map_err(|e| CamError::io(&self.path, e))
    }

    pub fn append(&mut self, stats: &StepStats) -> Result<()> {
        let s = format!(
            "{},{:.3},{},{}",
            stats.step, stats.wall_ms, stats.loss, stats.grad_norm
        );
        self.line(&s)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush().map_err(|e| CamError::io(&self.path, e))
    }
}

/// Central-difference check of analytic gradients at randomly probed scalar
/// parameters. `loss_fn(params, true)` must return the analytic gradients;
/// `loss_fn(params, false)` only the loss. Returns the max relative error
/// over the probes (0 for an empty probe set).
pub fn finite_difference_gradcheck<F>(
    params: &ParamStore<f64>,
    mut loss_fn: F,
    num_probes: usize,
    seed: u64,
) -> f64
where
    F: FnMut(&ParamStore<f64>, bool) -> (f64, Option<GradMap<f64>>),
{
    if num_probes == 0 || params.is_empty() {
        return 0.0;
    }
    let (_, grads) = loss_fn(params, true);
    let grads = grads.expect("gradcheck loss_fn must return gradients");

    let names: Vec<(String, usize)> = params
        .iter()
        .map(|(n, t)| (n.clone(), t.len()))
        .collect();
    let total: usize = names.iter().map(|(_, l)| l).sum();
    if total == 0 {
        return 0.0;
    }
    let mut rng = stream(seed, &[lane::EVAL]);
    let mut max_rel = 0.0f64;
    for _ in 0..num_probes {
        let mut flat = (rand::Rng::gen::<f64>(&mut rng) * total as f64) as usize;
        flat = flat.min(total - 1);
        let (name, idx) = {
            let mut acc = 0;
            let mut found = (&names[0].0, 0usize);
            for (n, l) in &names {
                if flat < acc + l {
                    found = (n, flat - acc);
                    break;
                }
                acc += l;
            }
            found
        };
        let base = params.get(name).data()[idx];
        let h = 1e-5 * base.abs().max(1.0);
        let eval = |value: f64, loss_fn: &mut F| -> f64 {
            let mut p = params.clone();
            p.get_mut(name).data_mut()[idx] = value;
            loss_fn(&p, false).0
        };
        let fd = (eval(base + h, &mut loss_fn) - eval(base - h, &mut loss_fn)) / (2.0 * h);
        let analytic = grads
            .get(name)
            .map(|t| t.data()[idx])
            .unwrap_or(0.0);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
    }
    max_rel
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"CAMC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    train: TrainConfig,
}

/// Hex SHA-256 of the canonical JSON encoding of the two configs. This is
/// the identity a checkpoint is checked against on load.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let json = serde_json::to_vec(&CheckpointMeta {
        model: model.clone(),
        train: train.clone(),
    })
    .expect("config serializes");
    let digest = Sha256::digest(&json);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(t.shape().len() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize the full training state. Byte-deterministic: saving, loading,
/// and saving again produces the identical file.
pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_vec(&CheckpointMeta {
        model: state.model_cfg.clone(),
        train: state.train_cfg.clone(),
    })
    .expect("config serializes");

    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&Sha256::digest(&json));
    buf.extend_from_slice(&state.step.to_le_bytes());
    buf.extend_from_slice(&state.opt.t.to_le_bytes());
    buf.extend_from_slice(&state.loss_sum.to_le_bytes());
    buf.extend_from_slice(&state.loss_count.to_le_bytes());

    let count = state.params.len() + state.opt.m.len() + state.opt.v.len();
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    for (name, t) in state.params.iter() {
        put_tensor(&mut buf, name, t);
    }
    for (name, t) in &state.opt.m {
        put_tensor(&mut buf, &format!("opt.m.{name}"), t);
    }
    for (name, t) in &state.opt.v {
        put_tensor(&mut buf, &format!("opt.v.{name}"), t);
    }

    seal_container(&mut buf);
    std::fs::write(path, &buf).map_err(|e| CamError::io(path, e))
}

/// Load a checkpoint saved by [`save_checkpoint`]. The trailing CRC and the
/// embedded config hash are both verified before anything is interpreted.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| CamError::io(path, e))?;
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CamError::BadMagic {
            path: path.to_path_buf(),
            expected: "CAMC",
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CamError::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let body = check_container(&bytes, path, CHECKPOINT_MAGIC, "CAMC")?;

    let mut r = ByteReader::new(body, 8, path);
    let json_len = r.u32()? as usize;
    let json = r.take(json_len)?;
    let stored_hash = r.take(32)?;
    if Sha256::digest(json).as_slice() != stored_hash {
        return Err(r.corrupt("config hash does not match config block"));
    }
    let meta: CheckpointMeta =
        serde_json::from_slice(json).map_err(|e| r.corrupt(format!("config block: {e}")))?;
    let step = r.u64()?;
    let opt_t = r.u64()?;
    let loss_sum = r.f64()?;
    let loss_count = r.u64()?;
    let count = r.u32()? as usize;

    let mut params = BTreeMap::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| r.corrupt("tensor name is not utf-8"))?
            .to_string();
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let t = Tensor::from_vec(&shape, r.f32_slice(len)?);
        if let Some(rest) = name.strip_prefix("opt.m.") {
            m.insert(rest.to_string(), t);
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            v.insert(rest.to_string(), t);
        } else {
            params.insert(name, t);
        }
    }
    if r.remaining() != 0 {
        return Err(r.corrupt("trailing bytes after last tensor"));
    }

    let params = ParamStore::from_tensors(params);
    params.matches_config(&meta.model)?;
    Ok(TrainState {
        model_cfg: meta.model,
        train_cfg: meta.train,
        params,
        opt: AdamState { m, v, t: opt_t },
        step,
        loss_sum,
        loss_count,
    })
}

/// Load a checkpoint and require it to have been produced by exactly these
/// configs.
pub fn load_checkpoint_expecting(
    path: impl AsRef<Path>,
    model: &ModelConfig,
    train: &TrainConfig,
) -> Result<TrainState> {
    let state = load_checkpoint(path)?;
    let expected = config_hash(model, train);
    let found = config_hash(&state.model_cfg, &state.train_cfg);
    if expected != found {
        return Err(CamError::ConfigHashMismatch { expected, found });
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Preset;
    use crate::rng::normal_vec_f32;

    fn tiny_cfg(objective: Objective, seed: u64) -> (ModelConfig, TrainConfig) {
        let model = Preset::Tiny.model_config(objective, 4);
        let mut train = TrainConfig::desk(objective, seed);
        train.batch_size = 4;
        train.context_length = 8;
        (model, train)
    }

    fn random_batch(b: usize, t: usize, d: usize, seed: u64) -> Batch {
        let mut rng = stream(seed, &[lane::DATA]);
        Batch::new(normal_vec_f32(&mut rng, b * t * d), b, t, d)
    }

    fn fresh_state(objective: Objective, seed: u64) -> TrainState {
        let (model, train) = tiny_cfg(objective, seed);
        TrainState::new(model, train).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::desk(Objective::Cam, 1);
        cfg.validate().unwrap();
        cfg.noise_augmentation = false;
        assert!(cfg.validate().is_err(), "cam requires augmentation");
        let mut cfg = TrainConfig::desk(Objective::MarRf, 1);
        cfg.validate().unwrap();
        cfg.noise_augmentation = true;
        assert!(cfg.validate().is_err(), "mar_rf must not augment");
        let mut cfg = TrainConfig::desk(Objective::Givt, 1);
        cfg.z_dropout_prob = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn first_step_loss_is_finite_and_positive() {
        for objective in Objective::ALL {
            let mut state = fresh_state(objective, 3);
            let batch = random_batch(4, 8, 8, 7);
            let stats = train_step(&mut state, &batch).unwrap();
            assert!(stats.loss.is_finite() && stats.loss > 0.0, "{objective}");
            assert!(stats.grad_norm > 0.0, "{objective}");
            assert!(state.params.all_finite(), "{objective}");
        }
    }

    #[test]
    fn training_is_bit_deterministic() {
        for objective in [Objective::Cam, Objective::MarLinear] {
            let batch = random_batch(4, 8, 8, 7);
            let mut a = fresh_state(objective, 5);
            let mut b = fresh_state(objective, 5);
            for _ in 0..2 {
                let sa = train_step(&mut a, &batch).unwrap();
                let sb = train_step(&mut b, &batch).unwrap();
                assert_eq!(sa.loss.to_bits(), sb.loss.to_bits(), "{objective}");
            }
            for (name, t) in a.params.iter() {
                assert_eq!(t.data(), b.params.get(name).data(), "{objective} {name}");
            }
        }
    }

    #[test]
    fn cam_with_zero_k_equals_mar_rf_exactly() {
        let (model, cam_cfg) = tiny_cfg(Objective::Cam, 11);
        let (_, rf_cfg) = tiny_cfg(Objective::MarRf, 11);
        let params = ParamStore::init(&model, 11);
        let batch = random_batch(4, 8, 8, 13);

        let mut cam_noise = sample_step_noise(&cam_cfg, 4, 8, 8, 0);
        cam_noise.ks.iter_mut().for_each(|k| *k = 0.0);
        let rf_noise = sample_step_noise(&rf_cfg, 4, 8, 8, 0);
        // Shared lanes are keyed identically, so the rf draws must agree.
        assert_eq!(cam_noise.sigmas, rf_noise.sigmas);
        assert_eq!(cam_noise.eps_prime, rf_noise.eps_prime);
        assert_eq!(cam_noise.drop_mask, rf_noise.drop_mask);

        let (cam_loss, _) =
            loss_and_grads(&params, &model, &cam_cfg, &batch, &cam_noise, false).unwrap();
        let (rf_loss, _) =
            loss_and_grads(&params, &model, &rf_cfg, &batch, &rf_noise, false).unwrap();
        assert_eq!(cam_loss.to_bits(), rf_loss.to_bits());
    }

    #[test]
    fn backbone_sees_k_only_through_the_mixed_input() {
        // Two different (k, eps) pairs that produce the same mixed input
        // must give identical losses: k=0 with arbitrary eps, and k=0.5
        // with eps equal to the clean data.
        let (model, cfg) = tiny_cfg(Objective::Cam, 17);
        let params = ParamStore::init(&model, 17);
        let batch = random_batch(2, 8, 8, 19);

        let mut a = sample_step_noise(&cfg, 2, 8, 8, 0);
        a.ks.iter_mut().for_each(|k| *k = 0.0);
        let mut b = a.clone();
        b.ks.iter_mut().for_each(|k| *k = 0.5);
        b.eps_aug = batch.data.iter().map(|&v| v as f64).collect();

        assert_eq!(build_backbone_inputs(&batch, &a), build_backbone_inputs(&batch, &b));
        let (la, _) = loss_and_grads(&params, &model, &cfg, &batch, &a, false).unwrap();
        let (lb, _) = loss_and_grads(&params, &model, &cfg, &batch, &b, false).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
    }

    #[test]
    fn givt_noise_differs_from_givt_only_in_inputs() {
        let (_, noise_cfg) = tiny_cfg(Objective::GivtNoise, 23);
        let (_, plain_cfg) = tiny_cfg(Objective::Givt, 23);
        let batch = random_batch(4, 8, 8, 29);
        let n_aug = sample_step_noise(&noise_cfg, 4, 8, 8, 0);
        let n_plain = sample_step_noise(&plain_cfg, 4, 8, 8, 0);

        let clean: Vec<f64> = batch.data.iter().map(|&v| v as f64).collect();
        assert_eq!(build_backbone_inputs(&batch, &n_plain), clean);
        assert_ne!(build_backbone_inputs(&batch, &n_aug), clean);
        // Everything downstream of the input draws matches.
        assert_eq!(n_aug.drop_mask, n_plain.drop_mask);
        assert!(n_aug.sigmas.is_empty() && n_plain.sigmas.is_empty());
    }

    #[test]
    fn mar_linear_zero_predictor_loss_is_dim() {
        // With the sampler output forced to zero, the noise-prediction loss
        // is E||eps||^2 = d per token.
        let (model, cfg) = tiny_cfg(Objective::MarLinear, 31);
        let mut params = ParamStore::init(&model, 31);
        for name in ["sampler.out.w", "sampler.out.b"] {
            let t = params.get_mut(name);
            let shape = t.shape().to_vec();
            *t = Tensor::zeros(&shape);
        }
        let (b, t, d) = (157, 64, 8);
        let batch = random_batch(b, t, d, 37);
        let noise = sample_step_noise(&cfg, b, t, d, 0);
        let (loss, _) = loss_and_grads(&params, &model, &cfg, &batch, &noise, false).unwrap();
        let rel = (loss - d as f64).abs() / d as f64;
        assert!(rel <= 0.02, "zero-predictor loss {loss}, rel dev {rel}");
    }

    #[test]
    fn z_dropout_fraction_matches_probability() {
        let cfg = TrainConfig::desk(Objective::Cam, 41);
        let noise = sample_step_noise(&cfg, 256, 64, 8, 0);
        let n = noise.drop_mask.len();
        assert_eq!(n, 256 * 64);
        let frac = noise.drop_mask.iter().filter(|&&b| b).count() as f64 / n as f64;
        assert!((frac - 0.2).abs() <= 0.01, "dropout fraction {frac}");
    }

    #[test]
    fn gradcheck_isolated_linear_layer() {
        // A one-linear-layer model: loss = mean((x W^T + b)^2).
        let mut tensors = BTreeMap::new();
        let mut rng = stream(43, &[lane::INIT]);
        tensors.insert(
            "w".to_string(),
            Tensor::from_vec(&[3, 4], normal_vec_f32(&mut rng, 12).iter().map(|&v| v as f64).collect()),
        );
        tensors.insert(
            "b".to_string(),
            Tensor::from_vec(&[3], normal_vec_f32(&mut rng, 3).iter().map(|&v| v as f64).collect()),
        );
        let params = ParamStore::<f64>::from_tensors(tensors);
        let x = Tensor::from_vec(
            &[5, 4],
            normal_vec_f32(&mut rng, 20).iter().map(|&v| v as f64).collect(),
        );
        let loss_fn = |p: &ParamStore<f64>, want: bool| {
            let mut g = Graph::<f64>::new(want);
            let bound = BoundParams::bind(&mut g, p);
            let xv = g.leaf(x.clone());
            let y = g.linear(xv, bound.var("w"), bound.var("b"));
            let sq = g.mul(y, y);
            let loss = g.mean_all(sq);
            let value = g.value(loss).data()[0];
            if want {
                let mut grads = g.backward(loss);
                (value, Some(bound.collect_grads(&mut grads)))
            } else {
                (value, None)
            }
        };
        let err = finite_difference_gradcheck(&params, loss_fn, 15, 47);
        assert!(err <= 1e-4, "linear-layer gradcheck error {err}");
    }

    #[test]
    fn gradcheck_full_cam_loss() {
        let (model, cfg) = tiny_cfg(Objective::Cam, 53);
        let params = ParamStore::init(&model, 53).cast::<f64>();
        let batch = random_batch(2, 4, 8, 59);
        let noise = sample_step_noise(&cfg, 2, 4, 8, 0);
        let loss_fn = |p: &ParamStore<f64>, want: bool| {
            let (l, g) = loss_and_grads(p, &model, &cfg, &batch, &noise, want).unwrap();
            (l, g)
        };
        let err = finite_difference_gradcheck(&params, loss_fn, 24, 61);
        assert!(err <= 1e-2, "full cam gradcheck error {err}");
    }

    #[test]
    fn gradcheck_zero_probes_is_vacuous() {
        let params = ParamStore::<f64>::from_tensors(BTreeMap::new());
        let err = finite_difference_gradcheck(&params, |_, _| (0.0, Some(BTreeMap::new())), 0, 1);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn adamw_weight_decay_is_decoupled() {
        let (model, mut cfg) = tiny_cfg(Objective::Cam, 67);
        cfg.learning_rate = 0.1;
        cfg.weight_decay = 0.5;
        let mut params = ParamStore::init(&model, 67);
        let before = params.get("backbone.input_proj.w").data().to_vec();
        let mut opt = AdamState::new(&params);
        adamw_update(&mut params, &BTreeMap::new(), &mut opt, &cfg);
        let after = params.get("backbone.input_proj.w").data();
        for (a, b) in after.iter().zip(before.iter()) {
            let expect = b - 0.1 * 0.5 * b;
            assert!((a - expect).abs() <= 1e-7, "decay-only update {a} vs {expect}");
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut state = fresh_state(Objective::Cam, 71);
        let batch = random_batch(4, 8, 8, 73);
        train_step(&mut state, &batch).unwrap();

        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&state, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn resume_reproduces_uninterrupted_training() {
        let dir = tempfile::tempdir().unwrap();
        let batches: Vec<Batch> = (0..6).map(|i| random_batch(4, 8, 8, 100 + i)).collect();

        let mut full = fresh_state(Objective::Cam, 79);
        let mut full_losses = Vec::new();
        for b in &batches {
            full_losses.push(train_step(&mut full, b).unwrap().loss);
        }

        let mut head = fresh_state(Objective::Cam, 79);
        for b in &batches[..3] {
            train_step(&mut head, b).unwrap();
        }
        let path = dir.path().join("mid.ckpt");
        save_checkpoint(&head, &path).unwrap();
        let mut resumed = load_checkpoint(&path).unwrap();
        for (i, b) in batches[3..].iter().enumerate() {
            let loss = train_step(&mut resumed, b).unwrap().loss;
            assert_eq!(
                loss.to_bits(),
                full_losses[3 + i].to_bits(),
                "resumed step {}",
                3 + i
            );
        }
        for (name, t) in full.params.iter() {
            assert_eq!(t.data(), resumed.params.get(name).data(), "{name}");
        }
    }

    #[test]
    fn checkpoint_rejects_tampering_and_wrong_config() {
        let dir = tempfile::tempdir().unwrap();
        let state = fresh_state(Objective::Cam, 83);
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&state, &path).unwrap();

        // Bit flip in the middle -> checksum failure.
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&bad),
            Err(CamError::Corrupt { .. })
        ));

        // Wrong magic.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&bad),
            Err(CamError::BadMagic { .. })
        ));

        // Unsupported version.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&bad),
            Err(CamError::VersionMismatch { found: 9, .. })
        ));

        // Mismatched expected config.
        let (other_model, other_train) = tiny_cfg(Objective::Givt, 83);
        assert!(matches!(
            load_checkpoint_expecting(&path, &other_model, &other_train),
            Err(CamError::ConfigHashMismatch { .. })
        ));
        load_checkpoint_expecting(&path, &state.model_cfg, &state.train_cfg).unwrap();
    }

    #[test]
    fn constant_dataset_converges() {
        // Degenerate conditional: every embedding is the same constant, so
        // the drift target given (y, sigma) is exactly (c - y)/sigma-shaped
        // and the loss can approach zero.
        let (model, mut cfg) = tiny_cfg(Objective::Cam, 89);
        cfg.learning_rate = 1e-3;
        let mut state = TrainState::new(model, cfg).unwrap();
        let (b, t, d) = (16, 8, 8);
        let c: Vec<f32> = (0..d).map(|j| 0.3 * (j as f32 + 1.0)).collect();
        let mut data = Vec::with_capacity(b * t * d);
        for _ in 0..b * t {
            data.extend_from_slice(&c);
        }
        let batch = Batch::new(data, b, t, d);
        let mut last = f64::INFINITY;
        for _ in 0..1500 {
            last = train_step(&mut state, &batch).unwrap().loss;
        }
        assert!(
            last < 0.05 * d as f64,
            "constant-data loss {last} after 1500 steps"
        );
    }

    #[test]
    fn givt_reaches_gaussian_entropy_on_iid_data() {
        // K=1 mixture on iid standard-normal data: the optimal NLL is the
        // differential entropy d/2 * ln(2*pi*e).
        let model = Preset::Tiny.model_config(Objective::Givt, 1);
        let mut cfg = TrainConfig::desk(Objective::Givt, 97);
        cfg.batch_size = 32;
        cfg.context_length = 8;
        cfg.learning_rate = 3e-3;
        let mut state = TrainState::new(model, cfg).unwrap();
        let (b, t, d) = (32, 8, 8);
        let mut last = f64::INFINITY;
        for step in 0..1500 {
            let batch = random_batch(b, t, d, 1000 + step);
            last = train_step(&mut state, &batch).unwrap().loss;
        }
        let entropy = d as f64 / 2.0 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        let rel = (last - entropy).abs() / entropy;
        assert!(rel <= 0.05, "NLL {last} vs entropy {entropy}, rel {rel}");
    }

    #[test]
    fn metrics_csv_has_versioned_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut csv = MetricsCsv::create(&path).unwrap();
        csv.append(&StepStats {
            step: 0,
            loss: 1.5,
            grad_norm: 0.3,
            wall_ms: 12.0,
        })
        .unwrap();
        csv.flush().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# train-metrics v1"));
        assert_eq!(lines.next(), Some("step,wall_ms,loss,grad_norm"));
        assert!(lines.next().unwrap().starts_with("0,12.000,1.5,"));
    }
}
