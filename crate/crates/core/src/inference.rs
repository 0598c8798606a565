//! Autoregressive generation for every model variant: SOS prompting,
//! per-position denoising or mixture sampling, inference-noise injection,
//! and KV-cache management with a sliding context window.
//!
//! A generation session owns its caches and RNG substreams exclusively.
//! Every random draw is keyed by (seed, lane, trace index, position), so a
//! batch of traces generated in lockstep is elementwise identical to the
//! traces generated one at a time, and a continuation from a clean prefix
//! reproduces the suffix of the run it was cut from.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CamError, Result};
use crate::math::{ddim_timesteps, DdpmSchedule, ErrorLevel, DDPM_TRAIN_STEPS};
use crate::model::backbone::{forward_batch, forward_step_cached, KVCache};
use crate::model::config::{Head, ModelConfig};
use crate::model::gmm::{decode_raw, gmm_head_rows, gmm_sample};
use crate::model::params::ParamStore;
use crate::model::sampler::sampler_forward_rows;
use crate::rng::{lane, normal, stream};
use crate::training::Objective;

/// How k_inf noise is mixed into a generated embedding before feedback.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    /// x_fed = k*eps + (1-k)*x, the same map noise-augmented training uses.
    #[default]
    Convex,
    /// x_fed = x + k*eps; kept for the injection-mode comparison experiment.
    Additive,
}

/// Everything a generation run needs besides the model itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub num_steps_denoise: usize,
    pub k_inf: ErrorLevel,
    /// GMM sampling temperature; ignored by diffusion/flow heads.
    pub temperature: f64,
    pub target_length: usize,
    /// Sliding context window; at most the backbone's position table size.
    pub context_window: usize,
    pub seed: u64,
    #[serde(default)]
    pub injection: InjectionMode,
}

impl GenerationConfig {
    /// Reasonable defaults for a model with the given context capacity.
    pub fn defaults(context_window: usize, seed: u64) -> Self {
        GenerationConfig {
            num_steps_denoise: 20,
            k_inf: ErrorLevel::ZERO,
            temperature: 0.9,
            target_length: context_window,
            context_window,
            seed,
            injection: InjectionMode::Convex,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.target_length < 1 {
            return Err(CamError::InvalidConfig("target_length must be >= 1".into()));
        }
        if self.num_steps_denoise < 1 {
            return Err(CamError::InvalidConfig(
                "num_steps_denoise must be >= 1".into(),
            ));
        }
        if self.context_window < 1 || self.context_window > model.backbone.max_context {
            return Err(CamError::InvalidConfig(format!(
                "context_window {} outside 1..={}",
                self.context_window, model.backbone.max_context
            )));
        }
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(CamError::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// One generated sequence: the clean model outputs, the noise-injected
/// stream the backbone actually consumed, and per-position wall time.
#[derive(Clone, Debug)]
pub struct GenerationTrace {
    /// Generated embeddings x_hat, flat `target_length * dim`.
    pub clean: Vec<f32>,
    /// Feedback stream: `noise_augment(clean, eps, k_inf)` per position.
    pub fed_back: Vec<f32>,
    pub dim: usize,
    /// Wall time per position in microseconds. In a lockstep batch every
    /// trace records the shared batch-step time.
    pub step_micros: Vec<u64>,
    pub seed: u64,
    pub trace_index: u64,
}

impl GenerationTrace {
    pub fn len(&self) -> usize {
        self.clean.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    pub fn clean_frame(&self, t: usize) -> &[f32] {
        &self.clean[t * self.dim..(t + 1) * self.dim]
    }

    pub fn fed_frame(&self, t: usize) -> &[f32] {
        &self.fed_back[t * self.dim..(t + 1) * self.dim]
    }
}

/// Generate a single trace (trace index 0) with KV-cached context.
pub fn generate(
    params: &ParamStore<f32>,
    model: &ModelConfig,
    objective: Objective,
    gen: &GenerationConfig,
) -> Result<GenerationTrace> {
    Ok(run_session(params, model, objective, gen, &[], 1, true)?
        .pop()
        .expect("one trace requested"))
}

/// Generate `num_traces` traces in lockstep. Elementwise identical to
/// unbatched generation because every kernel is row-independent and every
/// random draw is keyed by trace index.
pub fn generate_batch(
    params: &ParamStore<f32>,
    model: &ModelConfig,
    objective: Objective,
    gen: &GenerationConfig,
    num_traces: usize,
) -> Result<Vec<GenerationTrace>> {
    run_session(params, model, objective, gen, &[], num_traces, true)
}

/// Reference path: full context recompute at every position, no KV cache.
/// Exists to pin the cache implementation down by equivalence.
pub fn generate_naive(
    params: &ParamStore<f32>,
    model: &ModelConfig,
    objective: Objective,
    gen: &GenerationConfig,
) -> Result<GenerationTrace> {
    Ok(run_session(params, model, objective, gen, &[], 1, false)?
        .pop()
        .expect("one trace requested"))
}

/// Continue from a clean prompt: the prompt is noise-injected exactly as
/// generated frames are (same position-keyed draws), so continuing from a
/// prefix of an earlier run reproduces that run's remaining positions.
pub fn continue_sequence(
    params: &ParamStore<f32>,
    model: &ModelConfig,
    objective: Objective,
    prompt: &[f32],
    gen: &GenerationConfig,
) -> Result<GenerationTrace> {
    Ok(run_session(params, model, objective, gen, prompt, 1, true)?
        .pop()
        .expect("one trace requested"))
}

/// Mix position-keyed Gaussian noise into one frame.
fn inject(clean: &[f32], gen: &GenerationConfig, trace: u64, pos: u64) -> Vec<f32> {
    let mut rng = stream(gen.seed, &[lane::GEN_INJECT, trace, pos]);
    let k = gen.k_inf.value() as f32;
    clean
        .iter()
        .map(|&x| {
            let eps = normal(&mut rng) as f32;
            match gen.injection {
                InjectionMode::Convex => k * eps + (1.0 - k) * x,
                InjectionMode::Additive => x + k * eps,
            }
        })
        .collect()
}

/// Conditioning rows for the next position given `len` fed-back frames per
/// trace. While the context still fits the window the caches advance
/// incrementally by `newest`; beyond it the last `window` frames are
/// recomputed from scratch with positions reindexed from zero.
#[allow(clippy::too_many_arguments)]
fn next_z(
    params: &ParamStore<f32>,
    model: &ModelConfig,
    caches: &mut [KVCache],
    fed: &[Vec<f32>],
    len: usize,
    window: usize,
    use_cache: bool,
    newest: &[f32],
) -> Result<Vec<f32>> {
    let bcfg = &model.backbone;
    let d = bcfg.input_dim;
    let zdim = bcfg.model_dim;
    let n = fed.len();
    if use_cache && len <= window {
        return forward_step_cached(params, bcfg, newest, caches);
    }
    let ctx = len.min(window);
    let mut flat = Vec::with_capacity(n * ctx * d);
    for trace in fed {
        flat.extend_from_slice(&trace[(len - ctx) * d..len * d]);
    }
    let out = forward_batch(params, bcfg, &flat, n, ctx)?;
    let mut zs = Vec::with_capacity(n * zdim);
    for b in 0..n {
        let row = b * ctx + ctx - 1;
        zs.extend_from_slice(&out[row * zdim..(row + 1) * zdim]);
    }
    Ok(zs)
}

/// Sample one new frame per trace from the head, conditioned on `zs`.
fn sample_positions(
    params: &ParamStore<f32>,
    model: &ModelConfig,
    objective: Objective,
    gen: &GenerationConfig,
    zs: &[f32],
    n: usize,
    pos: u64,
) -> Result<Vec<f32>> {
    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|i| stream(gen.seed, &[lane::GEN_SAMPLE, i as u64, pos]))
        .collect();
    head_sample_rows(
        params,
        model,
        objective,
        gen.num_steps_denoise,
        gen.temperature,
        zs,
        &mut rngs,
        pos,
    )
}

/// Draw one embedding per conditioning row, one RNG per row. This is the
/// head-sampling core shared by generation and the evaluation probes;
/// `pos` only labels errors.
#[allow(clippy::too_many_arguments)]
pub fn head_sample_rows(
    params: &ParamStore<f32>,
    model: &ModelConfig,
    objective: Objective,
    num_steps_denoise: usize,
    temperature: f64,
    zs: &[f32],
    rngs: &mut [ChaCha8Rng],
    pos: u64,
) -> Result<Vec<f32>> {
    let d = model.backbone.input_dim;
    let zdim = model.backbone.model_dim;
    let n = rngs.len();

    let check = |v: &[f32], what: &'static str, detail: String| -> Result<()> {
        if v.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(CamError::NonFinite {
                what,
                step: pos,
                detail,
            })
        }
    };

    match (&model.head, objective) {
        (Head::Gmm(gcfg), Objective::Givt | Objective::GivtNoise) => {
            let out_dim = gcfg.num_modes * (1 + 2 * gcfg.output_dim);
            let raw = gmm_head_rows(params, gcfg, zs, n);
            let mut xs = Vec::with_capacity(n * d);
            for (i, rng) in rngs.iter_mut().enumerate() {
                let gmm = decode_raw(
                    &raw[i * out_dim..(i + 1) * out_dim],
                    gcfg.num_modes,
                    gcfg.output_dim,
                );
                xs.extend(gmm_sample(&gmm, temperature, rng));
            }
            check(&xs, "generated embedding", "gmm sample".into())?;
            Ok(xs)
        }
        (Head::Sampler(scfg), Objective::Cam | Objective::MarRf) => {
            // Euler flow integration, batched over traces; identical ops to
            // integrate_rf_ode applied per row.
            let steps = num_steps_denoise;
            let dt = 1.0f32 / steps as f32;
            let mut y: Vec<f32> = rngs
                .iter_mut()
                .flat_map(|rng| (0..d).map(|_| normal(rng) as f32).collect::<Vec<f32>>())
                .collect();
            for i in 0..steps {
                let sigma = 1.0 - i as f64 / steps as f64;
                let v = sampler_forward_rows(params, scfg, zs, zdim, &y, &vec![sigma; n]);
                check(&v, "drift", format!("sigma={sigma}"))?;
                for (yj, vj) in y.iter_mut().zip(v.iter()) {
                    *yj += *vj * dt;
                }
            }
            Ok(y)
        }
        (Head::Sampler(scfg), Objective::MarLinear) => {
            // DDIM reverse pass, batched over traces; identical ops to
            // ddpm_sample applied per row. The sampler reads the training
            // timestep through its normalized sigma embedding.
            let schedule = DdpmSchedule::linear(DDPM_TRAIN_STEPS);
            let ts = ddim_timesteps(num_steps_denoise, DDPM_TRAIN_STEPS);
            let mut y: Vec<f32> = rngs
                .iter_mut()
                .flat_map(|rng| (0..d).map(|_| normal(rng) as f32).collect::<Vec<f32>>())
                .collect();
            for (i, &t) in ts.iter().enumerate() {
                let sigma = t as f64 / (DDPM_TRAIN_STEPS - 1) as f64;
                let eps = sampler_forward_rows(params, scfg, zs, zdim, &y, &vec![sigma; n]);
                check(&eps, "epsilon prediction", format!("timestep {t}"))?;
                let ab = schedule.alpha_bar(t);
                let ab_prev = if i + 1 < ts.len() {
                    schedule.alpha_bar(ts[i + 1])
                } else {
                    1.0
                };
                let inv_sx = (1.0 / ab.sqrt()) as f32;
                let se = (1.0 - ab).sqrt() as f32;
                let sx_prev = ab_prev.sqrt() as f32;
                let se_prev = (1.0 - ab_prev).sqrt() as f32;
                for (yj, ej) in y.iter_mut().zip(eps.iter()) {
                    let x0 = (*yj - se * *ej) * inv_sx;
                    *yj = sx_prev * x0 + se_prev * *ej;
                }
            }
            Ok(y)
        }
        (head, objective) => Err(CamError::InvalidConfig(format!(
            "objective {objective} does not match model head {head:?}"
        ))),
    }
}

fn run_session(
    params: &ParamStore<f32>,
    model: &ModelConfig,
    objective: Objective,
    gen: &GenerationConfig,
    prompt: &[f32],
    num_traces: usize,
    use_cache: bool,
) -> Result<Vec<GenerationTrace>> {
    model.validate()?;
    gen.validate(model)?;
    params.matches_config(model)?;
    let d = model.backbone.input_dim;
    let zdim = model.backbone.model_dim;
    let w = gen.context_window;
    if !prompt.len().is_multiple_of(d) {
        return Err(CamError::DimensionMismatch {
            context: "generation prompt",
            expected: d,
            got: prompt.len() % d,
        });
    }
    let prompt_len = prompt.len() / d;
    if prompt_len > w {
        return Err(CamError::PromptOverflow {
            len: prompt_len,
            max: w,
        });
    }
    let n = num_traces;
    if n == 0 {
        return Ok(Vec::new());
    }
    let total = prompt_len + gen.target_length;

    let mut caches: Vec<KVCache> = (0..n).map(|_| KVCache::new(&model.backbone)).collect();
    let mut fed: Vec<Vec<f32>> = vec![Vec::with_capacity(total * d); n];
    let mut clean: Vec<Vec<f32>> = vec![Vec::with_capacity(gen.target_length * d); n];
    let mut micros: Vec<u64> = Vec::with_capacity(gen.target_length);

    let mut zs: Vec<f32> = params
        .get("z_sos")
        .data()
        .iter()
        .cycle()
        .take(n * zdim)
        .copied()
        .collect();

    for p in 0..prompt_len {
        let frame = &prompt[p * d..(p + 1) * d];
        let mut newest = Vec::with_capacity(n * d);
        for (i, hist) in fed.iter_mut().enumerate() {
            let f = inject(frame, gen, i as u64, p as u64);
            hist.extend_from_slice(&f);
            newest.extend_from_slice(&f);
        }
        zs = next_z(params, model, &mut caches, &fed, p + 1, w, use_cache, &newest)?;
    }

    for t in prompt_len..total {
        let start = Instant::now();
        let xs = sample_positions(params, model, objective, gen, &zs, n, t as u64)?;
        let mut newest = Vec::with_capacity(n * d);
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            clean[i].extend_from_slice(row);
            let f = inject(row, gen, i as u64, t as u64);
            fed[i].extend_from_slice(&f);
            newest.extend_from_slice(&f);
        }
        if t + 1 < total {
            zs = next_z(params, model, &mut caches, &fed, t + 1, w, use_cache, &newest)?;
        }
        micros.push(start.elapsed().as_micros() as u64);
    }

    Ok((0..n)
        .map(|i| GenerationTrace {
            clean: std::mem::take(&mut clean[i]),
            fed_back: fed[i][prompt_len * d..].to_vec(),
            dim: d,
            step_micros: micros.clone(),
            seed: gen.seed,
            trace_index: i as u64,
        })
        .collect())
}
