//! Run configuration and the command implementations behind the `cam`
//! binary: data generation, training, trace generation, evaluation, k_inf
//! sweeps, and baseline comparison.
//!
//! A [`RunConfig`] is a single TOML document carrying one global seed that
//! is stamped into every component, so a command plus its resolved config
//! reproduces its outputs byte-for-byte (wall-clock fields aside). Every
//! command writes `resolved-config.toml` next to its outputs. CSV files
//! carry a versioned `# cam-*-csv v1` header line; charts are rendered from
//! the same rows the CSVs hold.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    read_embeddings, sample_batch, sample_process, write_embeddings, Dataset,
    SyntheticProcessSpec,
};
use crate::error::{CamError, Result};
use crate::inference::{generate_batch, GenerationConfig, GenerationTrace, InjectionMode};
use crate::math::{ErrorLevel, SigmaDistribution};
use crate::metrics::{
    accumulation_curve, conditional_accuracy, fed_protocol, mmd_rbf, oracle_replay_floor,
    sample_window_features, write_bar_chart, write_line_chart, Bandwidth, ChartSeries,
    FeatureMap, FedConfig, FedReport,
};
use crate::model::config::{Head, ModelConfig, Preset};
use crate::training::{
    config_hash, load_checkpoint, load_checkpoint_expecting, save_checkpoint, train_step,
    MetricsCsv, Objective, TrainConfig, TrainState,
};

/// Default k_inf sweep grid.
pub const DEFAULT_K_GRID: [f64; 6] = [0.0, 0.005, 0.01, 0.02, 0.03, 0.05];

/// Overrides from command-line flags; a set field beats the config file.
#[derive(Clone, Debug, Default)]
pub struct Flags {
    pub seed: Option<u64>,
    pub objective: Option<Objective>,
    pub modes: Option<usize>,
    pub k_inf: Option<f64>,
    pub num_steps: Option<usize>,
    pub temperature: Option<f64>,
    pub steps: Option<u64>,
    pub preset: Option<Preset>,
    pub out: Option<PathBuf>,
}

/// Which synthetic process (if any) backs a run. `None` disables every
/// oracle-dependent feature instead of silently substituting a default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessChoice {
    LinearGaussianAr1,
    RegimeSwitching,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProcessSection {
    pub kind: ProcessChoice,
    pub dim: usize,
}

impl Default for ProcessSection {
    fn default() -> Self {
        ProcessSection {
            kind: ProcessChoice::LinearGaussianAr1,
            dim: 8,
        }
    }
}

/// Dataset sizing for `gen-data` and for the implicit datasets of `train`,
/// `eval`, and `compare` when no embedding file is supplied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub num_sequences: usize,
    pub length: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            num_sequences: 1024,
            length: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub objective: Objective,
    pub total_steps: u64,
    pub batch_size: usize,
    pub context_length: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weight_decay: f64,
    pub z_dropout_prob: f64,
    pub checkpoint_every: u64,
    /// Mixture components for GMM-head objectives; ignored otherwise.
    pub num_modes: usize,
    pub sigma_distribution: SigmaDistribution,
    pub augment_target: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::desk(Objective::Cam, 0);
        TrainSection {
            objective: d.objective,
            total_steps: d.total_steps,
            batch_size: d.batch_size,
            context_length: d.context_length,
            learning_rate: d.learning_rate,
            adam_beta1: d.adam_beta1,
            adam_beta2: d.adam_beta2,
            weight_decay: d.weight_decay,
            z_dropout_prob: d.z_dropout_prob,
            checkpoint_every: d.checkpoint_every,
            num_modes: 8,
            sigma_distribution: d.sigma_distribution,
            augment_target: d.augment_target,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationSection {
    pub num_traces: usize,
    pub target_length: usize,
    pub num_steps_denoise: usize,
    pub k_inf: f64,
    pub temperature: f64,
    pub context_window: usize,
    pub injection: InjectionMode,
}

impl Default for GenerationSection {
    fn default() -> Self {
        GenerationSection {
            num_traces: 64,
            target_length: 128,
            num_steps_denoise: 20,
            k_inf: 0.0,
            temperature: 0.9,
            context_window: 64,
            injection: InjectionMode::Convex,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// FED window length; FED_acc scores the trace's second window.
    pub window: usize,
    pub reference_windows: usize,
    pub background_windows: usize,
    pub draws: usize,
    pub accumulation_stride: usize,
    pub conditional_probes: usize,
    pub conditional_draws: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            window: 64,
            reference_windows: 4096,
            background_windows: 512,
            draws: 5,
            accumulation_stride: 8,
            conditional_probes: 16,
            conditional_draws: 4096,
        }
    }
}

/// The full run configuration: one global seed, one architecture preset,
/// one output directory, and per-concern sections. Unknown keys anywhere in
/// the document are rejected; missing keys take the defaults shown by a
/// dumped `resolved-config.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: Preset,
    pub out_dir: PathBuf,
    pub process: ProcessSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub generation: GenerationSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            preset: Preset::Desk,
            out_dir: PathBuf::from("runs"),
            process: ProcessSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            generation: GenerationSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    /// Load from TOML, or built-in defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CamError::io(p, e))?;
                toml::from_str(&text)
                    .map_err(|e| CamError::InvalidConfig(format!("{}: {e}", p.display())))
            }
        }
    }

    /// Apply flag overrides; flags win over the config file.
    pub fn apply_flags(&mut self, f: &Flags) {
        if let Some(v) = f.seed {
            self.seed = v;
        }
        if let Some(v) = f.preset {
            self.preset = v;
        }
        if let Some(v) = &f.out {
            self.out_dir = v.clone();
        }
        if let Some(v) = f.objective {
            self.train.objective = v;
        }
        if let Some(v) = f.modes {
            self.train.num_modes = v;
        }
        if let Some(v) = f.steps {
            self.train.total_steps = v;
        }
        if let Some(v) = f.k_inf {
            self.generation.k_inf = v;
        }
        if let Some(v) = f.num_steps {
            self.generation.num_steps_denoise = v;
        }
        if let Some(v) = f.temperature {
            self.generation.temperature = v;
        }
    }

    /// Write the fully resolved config next to the run's outputs.
    pub fn dump(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.out_dir).map_err(|e| CamError::io(&self.out_dir, e))?;
        let path = self.out_dir.join("resolved-config.toml");
        let text = toml::to_string_pretty(self)
            .map_err(|e| CamError::InvalidConfig(format!("config serialization: {e}")))?;
        fs::write(&path, text).map_err(|e| CamError::io(&path, e))?;
        Ok(path)
    }

    /// The synthetic process spec, or `None` when the config opts out.
    pub fn process_spec(&self) -> Result<Option<SyntheticProcessSpec>> {
        let p = &self.process;
        match p.kind {
            ProcessChoice::None => Ok(None),
            _ if p.dim == 0 => Err(CamError::InvalidConfig(
                "process dim must be positive".into(),
            )),
            ProcessChoice::LinearGaussianAr1 => {
                Ok(Some(SyntheticProcessSpec::random_ar1(p.dim, self.seed)))
            }
            ProcessChoice::RegimeSwitching => Ok(Some(
                SyntheticProcessSpec::random_regime_switching(p.dim, self.seed),
            )),
        }
    }

    fn required_process_spec(&self) -> Result<SyntheticProcessSpec> {
        self.process_spec()?.ok_or_else(|| {
            CamError::InvalidConfig(
                "this command needs a synthetic process spec, but process.kind is \"none\""
                    .into(),
            )
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train_config_for(self.train.objective, self.seed)
    }

    /// Train config for one comparison cell: objective and seed vary, the
    /// rest comes from the `[train]` section.
    pub fn train_config_for(&self, objective: Objective, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            objective,
            noise_augmentation: objective.uses_augmentation(),
            z_dropout_prob: t.z_dropout_prob,
            batch_size: t.batch_size,
            total_steps: t.total_steps,
            learning_rate: t.learning_rate,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            weight_decay: t.weight_decay,
            context_length: t.context_length,
            seed,
            checkpoint_every: t.checkpoint_every,
            sigma_distribution: t.sigma_distribution,
            augment_target: t.augment_target,
        }
    }

    pub fn generation_config(&self) -> Result<GenerationConfig> {
        let g = &self.generation;
        Ok(GenerationConfig {
            num_steps_denoise: g.num_steps_denoise,
            k_inf: ErrorLevel::new(g.k_inf)?,
            temperature: g.temperature,
            target_length: g.target_length,
            context_window: g.context_window,
            seed: self.seed,
            injection: g.injection,
        })
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        self.model_config_for(self.train.objective, input_dim)
    }

    /// Preset architecture adapted to the data's embedding dimension.
    pub fn model_config_for(&self, objective: Objective, input_dim: usize) -> ModelConfig {
        let mut mc = self.preset.model_config(objective, self.train.num_modes);
        mc.backbone.input_dim = input_dim;
        match &mut mc.head {
            Head::Sampler(s) => s.input_dim = input_dim,
            Head::Gmm(g) => g.output_dim = input_dim,
        }
        mc
    }

    pub fn fed_config(&self) -> FedConfig {
        FedConfig {
            window: self.eval.window,
            reference_windows: self.eval.reference_windows,
            background_windows: self.eval.background_windows,
            draws: self.eval.draws,
            feature_seed: self.seed,
        }
    }
}

/// Sidecar metadata written next to a trace file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceMeta {
    pub version: u32,
    /// Training objective of the generating model.
    pub model: String,
    pub seed: u64,
    pub num_traces: usize,
    pub dim: usize,
    pub target_length: usize,
    pub config_hash: String,
    /// Per-position wall time; one array, shared by the lockstep batch.
    pub step_micros: Vec<u64>,
}

fn sidecar_path(trace_path: &Path) -> PathBuf {
    trace_path.with_extension("meta.toml")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CamError::io(path, e))
}

/// Sample the synthetic process and write it as an embedding file,
/// printing summary statistics.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    let spec = cfg.required_process_spec()?;
    cfg.dump()?;
    let ds = sample_process(&spec, cfg.data.num_sequences, cfg.data.length, cfg.seed)?;
    let path = cfg.out_dir.join("dataset.came");
    write_embeddings(&ds, &path)?;

    let values: usize = ds.sequences.iter().map(Vec::len).sum();
    let mean = ds.sequences.iter().flatten().map(|&v| v as f64).sum::<f64>() / values as f64;
    let var = ds
        .sequences
        .iter()
        .flatten()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / values as f64;
    println!(
        "wrote {} sequences x {} frames (dim {}) to {}",
        ds.num_sequences(),
        cfg.data.length,
        ds.dim,
        path.display()
    );
    println!(
        "value mean {mean:.4}, std {:.4} over {} frames",
        var.sqrt(),
        values / ds.dim
    );
    Ok(path)
}

/// Train the configured objective: metrics CSV per step, periodic
/// checkpoints, and a final checkpoint whose path is returned.
pub fn cmd_train(cfg: &RunConfig, data: Option<&Path>, resume: Option<&Path>) -> Result<PathBuf> {
    let dataset = match data {
        Some(p) => read_embeddings(p)?,
        None => {
            let spec = cfg.required_process_spec()?;
            sample_process(&spec, cfg.data.num_sequences, cfg.data.length, cfg.seed)?
        }
    };
    let model = cfg.model_config(dataset.dim);
    let tc = cfg.train_config();
    cfg.dump()?;

    let mut state = match resume {
        Some(p) => {
            let s = load_checkpoint_expecting(p, &model, &tc)?;
            println!("resumed {} at step {}", p.display(), s.step);
            s
        }
        None => TrainState::new(model, tc.clone())?,
    };
    let mut csv = MetricsCsv::create(cfg.out_dir.join("metrics.csv"))?;
    let progress_every = (tc.total_steps / 10).max(1);
    while state.step < tc.total_steps {
        let batch = sample_batch(
            &dataset,
            tc.batch_size,
            tc.context_length,
            tc.seed,
            state.step,
        )?;
        let stats = train_step(&mut state, &batch)?;
        csv.append(&stats)?;
        if state.step % progress_every == 0 || state.step == tc.total_steps {
            println!(
                "step {}/{} loss {:.5} ({:.1} ms/step)",
                state.step, tc.total_steps, stats.loss, stats.wall_ms
            );
        }
        if state.step % tc.checkpoint_every == 0 && state.step < tc.total_steps {
            save_checkpoint(
                &state,
                cfg.out_dir.join(format!("checkpoint-{:07}.ckpt", state.step)),
            )?;
        }
    }
    csv.flush()?;
    let final_path = cfg.out_dir.join("checkpoint-final.ckpt");
    save_checkpoint(&state, &final_path)?;
    println!(
        "final checkpoint: {} (mean loss {:.5})",
        final_path.display(),
        state.mean_loss()
    );
    Ok(final_path)
}

/// Generate traces from a checkpoint: clean streams as an embedding file
/// plus a TOML sidecar with config hash, seed, and per-step timings.
pub fn cmd_generate(cfg: &RunConfig, checkpoint: &Path) -> Result<PathBuf> {
    let state = load_checkpoint(checkpoint)?;
    let gen = cfg.generation_config()?;
    cfg.dump()?;
    let n = cfg.generation.num_traces;
    let traces = generate_batch(
        &state.params,
        &state.model_cfg,
        state.train_cfg.objective,
        &gen,
        n,
    )?;
    let dim = state.model_cfg.backbone.input_dim;
    let ds = Dataset {
        sequences: traces.iter().map(|t| t.clean.clone()).collect(),
        dim,
        norm: None,
        provenance: format!("generated:{}", state.train_cfg.objective),
    };
    let path = cfg.out_dir.join("traces.came");
    write_embeddings(&ds, &path)?;

    let step_micros = traces.first().map(|t| t.step_micros.clone()).unwrap_or_default();
    let mean_us =
        step_micros.iter().sum::<u64>() as f64 / step_micros.len().max(1) as f64;
    let meta = TraceMeta {
        version: 1,
        model: state.train_cfg.objective.to_string(),
        seed: cfg.seed,
        num_traces: n,
        dim,
        target_length: gen.target_length,
        config_hash: config_hash(&state.model_cfg, &state.train_cfg),
        step_micros,
    };
    let meta_text = toml::to_string_pretty(&meta)
        .map_err(|e| CamError::InvalidConfig(format!("sidecar serialization: {e}")))?;
    write_text(&sidecar_path(&path), &meta_text)?;
    println!(
        "wrote {n} traces x {} frames to {} ({mean_us:.0} us/step)",
        gen.target_length,
        path.display()
    );
    Ok(path)
}

/// One row of the evaluation CSV.
#[derive(Clone, Debug)]
pub struct EvalRow {
    pub model: String,
    pub seed: u64,
    pub fed: f64,
    pub fed_acc: f64,
    pub mmd: f64,
    pub tau: f64,
}

fn eval_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("# cam-eval-csv v1\nmodel,seed,FED,FED_acc,MMD,tau\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.model, r.seed, r.fed, r.fed_acc, r.mmd, r.tau
        ));
    }
    s
}

fn traces_from_dataset(ds: &Dataset, seed: u64) -> Vec<GenerationTrace> {
    ds.sequences
        .iter()
        .enumerate()
        .map(|(i, s)| GenerationTrace {
            clean: s.clone(),
            fed_back: s.clone(),
            dim: ds.dim,
            step_micros: vec![0; s.len() / ds.dim],
            seed,
            trace_index: i as u64,
        })
        .collect()
}

/// Reference distribution: an explicit embedding file, or the same dataset
/// `gen-data` would produce from the process spec.
fn load_reference(cfg: &RunConfig, reference: Option<&Path>) -> Result<Dataset> {
    match reference {
        Some(p) => read_embeddings(p),
        None => {
            let spec = cfg.required_process_spec()?;
            sample_process(&spec, cfg.data.num_sequences, cfg.data.length, cfg.seed)
        }
    }
}

/// Evaluate a trace file against a reference distribution: FED, FED_acc,
/// MMD, accumulation curve with Kendall tau, and (when both an oracle
/// process spec and a checkpoint are available) conditional accuracy.
pub fn cmd_eval(
    cfg: &RunConfig,
    traces_path: &Path,
    reference: Option<&Path>,
    checkpoint: Option<&Path>,
) -> Result<EvalRow> {
    let traces_ds = read_embeddings(traces_path)?;
    let meta_path = sidecar_path(traces_path);
    let (model_name, trace_seed) = match fs::read_to_string(&meta_path) {
        Ok(text) => {
            let meta: TraceMeta = toml::from_str(&text)
                .map_err(|e| CamError::InvalidConfig(format!("{}: {e}", meta_path.display())))?;
            (meta.model, meta.seed)
        }
        Err(_) => {
            eprintln!(
                "warning: no sidecar at {}; reporting model \"unknown\"",
                meta_path.display()
            );
            ("unknown".to_string(), cfg.seed)
        }
    };
    let reference_ds = load_reference(cfg, reference)?;
    cfg.dump()?;
    let traces = traces_from_dataset(&traces_ds, trace_seed);
    let fed_cfg = cfg.fed_config();
    let report = fed_protocol(&traces, &reference_ds, &fed_cfg)?;

    let fm = FeatureMap::new(traces_ds.dim, fed_cfg.window, cfg.seed);
    let gen_feats: Vec<f64> = traces
        .iter()
        .flat_map(|t| fm.features(&t.clean[..fed_cfg.window * t.dim]))
        .collect();
    let ref_feats: Vec<f64> = sample_window_features(
        &reference_ds,
        fed_cfg.window,
        cfg.eval.background_windows,
        cfg.seed,
    )?
    .into_iter()
    .flatten()
    .collect();
    let mmd = mmd_rbf(
        &gen_feats,
        &ref_feats,
        fm.feature_dim(),
        Bandwidth::MedianHeuristic,
    );

    let curve = accumulation_curve(&traces, &reference_ds, cfg.eval.accumulation_stride)?;
    write_line_chart(
        cfg.out_dir.join("accumulation.svg"),
        "Marginal drift over position",
        "position",
        "Frechet distance",
        &[ChartSeries {
            label: model_name.clone(),
            points: curve.points.iter().map(|&(p, v)| (p as f64, v)).collect(),
        }],
    )?;
    write_bar_chart(
        cfg.out_dir.join("fed.svg"),
        "FED / FED_acc",
        std::slice::from_ref(&model_name),
        &[
            ("FED".to_string(), vec![report.fed]),
            ("FED_acc".to_string(), vec![report.fed_acc]),
        ],
    )?;

    match (cfg.process_spec()?, checkpoint) {
        (Some(spec), Some(ckpt)) => {
            let state = load_checkpoint(ckpt)?;
            let acc = conditional_accuracy(
                &state.params,
                &state.model_cfg,
                state.train_cfg.objective,
                &spec,
                cfg.eval.conditional_probes,
                cfg.eval.conditional_draws,
                cfg.generation.num_steps_denoise,
                cfg.seed,
            )?;
            let floor = oracle_replay_floor(
                &spec,
                cfg.eval.conditional_probes,
                cfg.eval.conditional_draws,
                state.model_cfg.backbone.max_context,
                cfg.seed,
            )?;
            let csv = format!(
                "# cam-conditional-csv v1\nmodel,seed,mean_err,cov_err,floor_mean_err,floor_cov_err\n{},{},{:.6},{:.6},{:.6},{:.6}\n",
                model_name, trace_seed, acc.mean_err, acc.cov_err, floor.mean_err, floor.cov_err
            );
            write_text(&cfg.out_dir.join("conditional.csv"), &csv)?;
            println!(
                "conditional accuracy: mean {:.4}, cov {:.4} (oracle replay floor {:.4}/{:.4})",
                acc.mean_err, acc.cov_err, floor.mean_err, floor.cov_err
            );
        }
        _ => println!(
            "conditional metrics omitted: needs a synthetic process spec and --checkpoint"
        ),
    }

    let row = EvalRow {
        model: model_name,
        seed: trace_seed,
        fed: report.fed,
        fed_acc: report.fed_acc,
        mmd,
        tau: curve.tau,
    };
    write_text(&cfg.out_dir.join("eval.csv"), &eval_csv(std::slice::from_ref(&row)))?;
    println!(
        "{}: FED {:.6}, FED_acc {:.6}, MMD {:.6}, tau {:.3}",
        row.model, row.fed, row.fed_acc, row.mmd, row.tau
    );
    Ok(row)
}

/// Evaluate FED/FED_acc for each k_inf on the grid and report the argmin
/// of FED_acc.
pub fn cmd_sweep_kinf(
    cfg: &RunConfig,
    checkpoint: &Path,
    reference: Option<&Path>,
    grid: &[f64],
) -> Result<Vec<(f64, FedReport)>> {
    if grid.is_empty() {
        return Err(CamError::InvalidConfig("empty k_inf grid".into()));
    }
    let state = load_checkpoint(checkpoint)?;
    let reference_ds = load_reference(cfg, reference)?;
    cfg.dump()?;
    let fed_cfg = cfg.fed_config();

    let mut rows = Vec::with_capacity(grid.len());
    for &k in grid {
        let mut gen = cfg.generation_config()?;
        gen.k_inf = ErrorLevel::new(k)?;
        let traces = generate_batch(
            &state.params,
            &state.model_cfg,
            state.train_cfg.objective,
            &gen,
            cfg.generation.num_traces,
        )?;
        let report = fed_protocol(&traces, &reference_ds, &fed_cfg)?;
        println!("k_inf {k}: FED {:.6}, FED_acc {:.6}", report.fed, report.fed_acc);
        rows.push((k, report));
    }

    let mut csv = String::from("# cam-sweep-csv v1\nk_inf,FED,FED_acc\n");
    for (k, r) in &rows {
        csv.push_str(&format!("{k},{:.6},{:.6}\n", r.fed, r.fed_acc));
    }
    write_text(&cfg.out_dir.join("sweep.csv"), &csv)?;
    write_line_chart(
        cfg.out_dir.join("sweep.svg"),
        "FED across k_inf",
        "k_inf",
        "distance",
        &[
            ChartSeries {
                label: "FED".into(),
                points: rows.iter().map(|&(k, r)| (k, r.fed)).collect(),
            },
            ChartSeries {
                label: "FED_acc".into(),
                points: rows.iter().map(|&(k, r)| (k, r.fed_acc)).collect(),
            },
        ],
    )?;
    let best = rows
        .iter()
        .min_by(|a, b| a.1.fed_acc.partial_cmp(&b.1.fed_acc).expect("finite"))
        .expect("non-empty grid");
    println!(
        "argmin FED_acc at k_inf = {} (FED_acc {:.6})",
        best.0, best.1.fed_acc
    );
    Ok(rows)
}

/// Outcome of one (model, seed) comparison cell; failures carry the error
/// text so the table can show gaps without aborting the sweep.
#[derive(Clone, Debug)]
pub struct CompareCell {
    pub model: Objective,
    pub seed: u64,
    pub outcome: std::result::Result<FedReport, String>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn compare_cell(
    cfg: &RunConfig,
    dataset: &Dataset,
    objective: Objective,
    cell_seed: u64,
    cache_dir: &Path,
    fed_cfg: &FedConfig,
) -> Result<FedReport> {
    let model = cfg.model_config_for(objective, dataset.dim);
    let tc = cfg.train_config_for(objective, cell_seed);
    let ckpt = cache_dir.join(format!("{}.ckpt", config_hash(&model, &tc)));
    let state = if ckpt.exists() {
        println!("{objective} seed {cell_seed}: cached {}", ckpt.display());
        load_checkpoint_expecting(&ckpt, &model, &tc)?
    } else {
        println!("{objective} seed {cell_seed}: training {} steps", tc.total_steps);
        let mut st = TrainState::new(model, tc.clone())?;
        while st.step < tc.total_steps {
            let batch = sample_batch(
                dataset,
                tc.batch_size,
                tc.context_length,
                tc.seed,
                st.step,
            )?;
            train_step(&mut st, &batch)?;
        }
        save_checkpoint(&st, &ckpt)?;
        st
    };
    let mut gen = cfg.generation_config()?;
    gen.seed = cell_seed;
    let traces = generate_batch(
        &state.params,
        &state.model_cfg,
        state.train_cfg.objective,
        &gen,
        cfg.generation.num_traces,
    )?;
    fed_protocol(&traces, dataset, fed_cfg)
}

/// Train every requested baseline across seeds and tabulate FED/FED_acc
/// (mean and std per model). Trained checkpoints are cached by config hash
/// under `CAM_CACHE_DIR` (default `<out_dir>/cache`); per-cell failures
/// leave gaps instead of aborting.
pub fn cmd_compare(
    cfg: &RunConfig,
    models: &[Objective],
    num_seeds: u64,
) -> Result<Vec<CompareCell>> {
    if models.is_empty() || num_seeds == 0 {
        return Err(CamError::InvalidConfig(
            "compare needs at least one model and one seed".into(),
        ));
    }
    let spec = cfg.required_process_spec()?;
    cfg.dump()?;
    let dataset = sample_process(&spec, cfg.data.num_sequences, cfg.data.length, cfg.seed)?;
    let cache_dir = std::env::var_os("CAM_CACHE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.out_dir.join("cache"));
    fs::create_dir_all(&cache_dir).map_err(|e| CamError::io(&cache_dir, e))?;
    let fed_cfg = cfg.fed_config();

    let mut cells = Vec::new();
    for &objective in models {
        for s in 0..num_seeds {
            let cell_seed = cfg.seed.wrapping_add(s);
            let outcome =
                compare_cell(cfg, &dataset, objective, cell_seed, &cache_dir, &fed_cfg);
            if let Err(e) = &outcome {
                eprintln!("cell {objective} seed {cell_seed} failed: {e}");
            }
            cells.push(CompareCell {
                model: objective,
                seed: cell_seed,
                outcome: outcome.map_err(|e| e.to_string()),
            });
        }
    }

    let mut csv = String::from("# cam-compare-csv v1\nmodel,seed,FED,FED_acc\n");
    for c in &cells {
        match &c.outcome {
            Ok(r) => csv.push_str(&format!(
                "{},{},{:.6},{:.6}\n",
                c.model, c.seed, r.fed, r.fed_acc
            )),
            Err(_) => csv.push_str(&format!("{},{},,\n", c.model, c.seed)),
        }
    }
    write_text(&cfg.out_dir.join("compare.csv"), &csv)?;

    println!("\n{:<12} {:>20} {:>20}", "model", "FED", "FED_acc");
    let mut bar_fed = Vec::new();
    let mut bar_acc = Vec::new();
    for &objective in models {
        let oks: Vec<&FedReport> = cells
            .iter()
            .filter(|c| c.model == objective)
            .filter_map(|c| c.outcome.as_ref().ok())
            .collect();
        if oks.is_empty() {
            println!("{objective:<12} {:>20} {:>20}", "-", "-");
            bar_fed.push(f64::NAN);
            bar_acc.push(f64::NAN);
            continue;
        }
        let (fm, fs_) = mean_std(&oks.iter().map(|r| r.fed).collect::<Vec<f64>>());
        let (am, as_) = mean_std(&oks.iter().map(|r| r.fed_acc).collect::<Vec<f64>>());
        println!(
            "{objective:<12} {:>20} {:>20}",
            format!("{fm:.4} ± {fs_:.4}"),
            format!("{am:.4} ± {as_:.4}")
        );
        bar_fed.push(fm);
        bar_acc.push(am);
    }
    write_bar_chart(
        cfg.out_dir.join("compare.svg"),
        "FED / FED_acc by model",
        &models.iter().map(|m| m.to_string()).collect::<Vec<String>>(),
        &[("FED".to_string(), bar_fed), ("FED_acc".to_string(), bar_acc)],
    )?;
    Ok(cells)
}
