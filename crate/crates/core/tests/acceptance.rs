//! Acceptance suite: ten numbered criteria, one test per criterion.
//!
//! Criteria 1-3 and 8-10 are exact property checks; 4-7 train models and
//! assert statistical tolerances (4) or cross-model directional claims
//! (5-7). Criteria 5-7 share one trained fixture: five objectives times
//! three seeds at a matched step budget, built once on first use.
//!
//! Each test prints a `criterion NN:` line with the measured quantities
//! next to their bounds. Stated runtime budgets refer to desktop-class
//! hardware; wall time is reported alongside the numbers rather than
//! asserted, since the statistical outcome is the acceptance signal and
//! wall clock depends on the host.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use cam_core::data::{
    read_embeddings, sample_batch, sample_process, write_embeddings, Dataset,
    SyntheticProcessSpec,
};
use cam_core::graph::Graph;
use cam_core::inference::{
    generate, generate_batch, generate_naive, GenerationConfig, GenerationTrace,
};
use cam_core::math::{
    ddpm_linear_corrupt, ddpm_sample, integrate_rf_ode, mse_loss, noise_augment, rf_corrupt,
    rf_target_drift, sample_error_level, sample_sigma, sigma_from_unit_normal, DdpmSchedule,
    ErrorLevel, NoiseLevel,
};
use cam_core::metrics::{
    conditional_accuracy, fed_protocol, frechet_distance, mmd_rbf, oracle_replay_floor,
    Bandwidth, FedConfig, GaussianStats,
};
use cam_core::model::config::{
    BackboneConfig, GmmHeadConfig, Head, ModelConfig, Preset, SamplerConfig,
};
use cam_core::model::params::{BoundParams, ParamStore};
use cam_core::rng::{lane, normal_vec_f32, stream};
use cam_core::tensor::Tensor;
use cam_core::training::{
    finite_difference_gradcheck, load_checkpoint, loss_and_grads, sample_step_noise,
    save_checkpoint, train_step, Batch, Objective, TrainConfig, TrainState,
};

// ---------------------------------------------------------------------------
// Tunable scales for the trained criteria.

/// Seeds for the three-seed directional criteria (5-7).
const SUITE_SEEDS: [u64; 3] = [201, 202, 203];
/// Matched training budget for every suite cell.
const SUITE_STEPS: u64 = 2_500;
const SUITE_BATCH: usize = 32;
/// Inference-noise grid for criterion 6.
const KINF_GRID: [f64; 6] = [0.0, 0.005, 0.01, 0.02, 0.03, 0.05];

/// Criterion 4: training scale pinned by the criterion itself.
const ORACLE_SEED: u64 = 100;
const ORACLE_STEPS: u64 = 20_000;
const ORACLE_BATCH: usize = 64;
const ORACLE_CONTEXT: usize = 64;
const ORACLE_DATASET_SEQS: usize = 4_096;
const ORACLE_LR: f64 = 1e-4;
const ORACLE_PROBES: usize = 16;
const ORACLE_DRAWS: usize = 8_192;

/// Architecture for the trained suite cells (criteria 5-7): a deliberately
/// small causal stack so fifteen cells stay tractable on one CPU core.
fn suite_model(objective: Objective) -> ModelConfig {
    let backbone = BackboneConfig {
        num_layers: 1,
        model_dim: 32,
        mlp_mult: 2,
        num_heads: 4,
        max_context: 64,
        input_dim: 8,
    };
    let head = if objective.uses_gmm_head() {
        Head::Gmm(GmmHeadConfig { num_modes: 8, input_dim: 32, output_dim: 8 })
    } else {
        Head::Sampler(SamplerConfig { num_layers: 2, model_dim: 24, mlp_mult: 2, input_dim: 8 })
    };
    ModelConfig { backbone, head }
}

/// Architecture for the criterion-4 oracle check.
fn oracle_model() -> ModelConfig {
    Preset::Tiny.model_config(Objective::Cam, 0)
}

// ---------------------------------------------------------------------------
// Helpers.

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

fn k(v: f64) -> ErrorLevel {
    ErrorLevel::new(v).unwrap()
}

fn s(v: f64) -> NoiseLevel {
    NoiseLevel::new(v).unwrap()
}

/// Train one model for `steps` on `dataset`, deterministic in `seed`.
fn train_model(
    model: ModelConfig,
    objective: Objective,
    seed: u64,
    steps: u64,
    batch_size: usize,
    lr: f64,
    dataset: &Dataset,
) -> TrainState {
    let mut tc = TrainConfig::desk(objective, seed);
    tc.total_steps = steps;
    tc.batch_size = batch_size;
    tc.context_length = 64;
    tc.learning_rate = lr;
    let mut state = TrainState::new(model, tc.clone()).unwrap();
    let t0 = Instant::now();
    while state.step < tc.total_steps {
        let batch =
            sample_batch(dataset, tc.batch_size, tc.context_length, tc.seed, state.step).unwrap();
        train_step(&mut state, &batch).unwrap();
        if state.step % 2_500 == 0 {
            eprintln!(
                "  {objective} seed {seed}: step {}/{} loss {:.4} ({:.0}s)",
                state.step,
                tc.total_steps,
                state.mean_loss(),
                t0.elapsed().as_secs_f64()
            );
        }
    }
    state
}

fn suite_traces(state: &TrainState, objective: Objective, k_inf: f64, seed: u64) -> Vec<GenerationTrace> {
    let gen = GenerationConfig {
        target_length: 128,
        k_inf: k(k_inf),
        ..GenerationConfig::defaults(64, seed)
    };
    generate_batch(&state.params, &state.model_cfg, objective, &gen, 64).unwrap()
}

// ---------------------------------------------------------------------------
// Shared fixture for criteria 5-7.

struct Cell {
    seed: u64,
    objective: Objective,
    fed: f64,
    fed_acc: f64,
}

struct Suite {
    cells: Vec<Cell>,
    /// Per seed: (k_inf, FED_acc) over `KINF_GRID`, from the CAM cell's model.
    sweeps: BTreeMap<u64, Vec<(f64, f64)>>,
    build_secs: f64,
}

impl Suite {
    fn cell(&self, seed: u64, objective: Objective) -> &Cell {
        self.cells
            .iter()
            .find(|c| c.seed == seed && c.objective == objective)
            .expect("cell exists")
    }

    fn gaps(&self, objective: Objective) -> Vec<f64> {
        SUITE_SEEDS
            .iter()
            .map(|&seed| {
                let c = self.cell(seed, objective);
                c.fed_acc - c.fed
            })
            .collect()
    }
}

fn suite() -> &'static Suite {
    static SUITE: OnceLock<Suite> = OnceLock::new();
    SUITE.get_or_init(build_suite)
}

fn build_suite() -> Suite {
    let t0 = Instant::now();
    let mut cells = Vec::new();
    let mut sweeps = BTreeMap::new();
    for &seed in &SUITE_SEEDS {
        let spec = SyntheticProcessSpec::default_ar1(seed);
        let reference = sample_process(&spec, 512, 128, seed).unwrap();
        let fed_cfg = FedConfig {
            window: 64,
            reference_windows: 1024,
            background_windows: 256,
            draws: 4,
            feature_seed: seed,
        };
        for objective in Objective::ALL {
            let state = train_model(
                suite_model(objective),
                objective,
                seed,
                SUITE_STEPS,
                SUITE_BATCH,
                1e-4,
                &reference,
            );
            let report =
                fed_protocol(&suite_traces(&state, objective, 0.0, seed), &reference, &fed_cfg)
                    .unwrap();
            eprintln!(
                "  suite {objective} seed {seed}: FED {:.4} FED_acc {:.4} ({:.0}s)",
                report.fed,
                report.fed_acc,
                t0.elapsed().as_secs_f64()
            );
            if objective == Objective::Cam {
                let grid = KINF_GRID
                    .iter()
                    .map(|&kv| {
                        let acc = if kv == 0.0 {
                            report.fed_acc
                        } else {
                            fed_protocol(
                                &suite_traces(&state, objective, kv, seed),
                                &reference,
                                &fed_cfg,
                            )
                            .unwrap()
                            .fed_acc
                        };
                        (kv, acc)
                    })
                    .collect();
                sweeps.insert(seed, grid);
            }
            cells.push(Cell { seed, objective, fed: report.fed, fed_acc: report.fed_acc });
        }
    }
    Suite { cells, sweeps, build_secs: t0.elapsed().as_secs_f64() }
}

// ---------------------------------------------------------------------------
// 1. Math-core identity suite.

#[test]
fn criterion_01_math_identities() {
    let t0 = Instant::now();

    // Affine corruption maps: exact on representable inputs.
    assert_eq!(noise_augment(&[2.0f64, 0.0], &[0.0, 2.0], k(0.5)).unwrap(), vec![1.0, 1.0]);
    let x = [0.7f64, -1.3, 2.4];
    let e = [0.2f64, 1.9, -0.5];
    assert_eq!(noise_augment(&x, &e, k(0.0)).unwrap(), x.to_vec());
    assert_eq!(noise_augment(&x, &e, k(1.0)).unwrap(), e.to_vec());
    assert_eq!(rf_corrupt(&[1.0f64, 1.0], &[-1.0, 3.0], s(0.0)).unwrap(), vec![1.0, 1.0]);
    assert_eq!(rf_corrupt(&[1.0f64, 1.0], &[-1.0, 3.0], s(1.0)).unwrap(), vec![-1.0, 3.0]);
    assert_eq!(rf_corrupt(&[4.0f64, 0.0], &[0.0, 4.0], s(0.25)).unwrap(), vec![3.0, 1.0]);

    // Drift target and the mean-square convention.
    assert_eq!(rf_target_drift(&[1.0f64, 2.0], &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    assert_eq!(rf_target_drift(&[3.0f64, 0.0], &[1.0, 1.0]).unwrap(), vec![2.0, -1.0]);
    assert_eq!(
        rf_target_drift(&[0.0f64; 3], &[0.4, -0.9, 2.0]).unwrap(),
        vec![-0.4, 0.9, -2.0]
    );
    assert_eq!(mse_loss(&x, &x).unwrap(), 0.0);
    assert_eq!(mse_loss(&[1.0f64, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
    assert_eq!(mse_loss(&[3.0f64], &[1.0]).unwrap(), 4.0);

    // Level draws: sigmoid midpoint, open/closed ranges.
    assert_eq!(sigma_from_unit_normal(0.0).value(), 0.5);
    let mut rng = stream(3, &[lane::EVAL, 0]);
    for _ in 0..2_000 {
        let sv = sample_sigma(&mut rng).value();
        assert!(sv > 0.0 && sv < 1.0, "sigma {sv} outside (0,1)");
        let kv = sample_error_level(&mut rng).value();
        assert!((0.0..=1.0).contains(&kv), "error level {kv} outside [0,1]");
    }

    // Straight-line ODE exactness.
    let y0 = [0.3f64, -0.2];
    let c = [1.5f64, -2.5];
    for steps in [1usize, 2, 7, 64] {
        let out = integrate_rf_ode(|_, _| c.to_vec(), &y0, steps).unwrap();
        for j in 0..2 {
            assert!((out[j] - (y0[j] + c[j])).abs() < 1e-12, "constant drift, steps={steps}");
        }
    }
    let x_true = [1.25f64, -0.75, 0.5];
    let y_init = [0.1f64, 0.2, -0.3];
    let frozen = rf_target_drift(&x_true, &y_init).unwrap();
    let one = integrate_rf_ode(|_, _| frozen.clone(), &y_init, 1).unwrap();
    for j in 0..3 {
        assert!((one[j] - x_true[j]).abs() < 1e-12, "straight-line single step");
    }

    // DDPM corruption endpoints.
    let sched = DdpmSchedule::linear(1000);
    let mut rng = stream(4, &[lane::EVAL, 1]);
    let xr: Vec<f64> = normal_vec_f32(&mut rng, 6).iter().map(|&v| v as f64).collect();
    let er: Vec<f64> = normal_vec_f32(&mut rng, 6).iter().map(|&v| v as f64).collect();
    let near_clean = sched.corrupt(&xr, &er, 0).unwrap();
    for j in 0..6 {
        assert!((near_clean[j] - xr[j]).abs() < 0.05, "step 0 stays near the data");
    }
    let zeros = [0.0f64; 6];
    let t_mid = 500;
    let noise_only = ddpm_linear_corrupt(&zeros, &er, t_mid, 1000).unwrap();
    let se = (1.0 - sched.alpha_bar(t_mid)).sqrt();
    for j in 0..6 {
        assert!((noise_only[j] - se * er[j]).abs() < 1e-12, "zero data leaves scaled noise");
    }

    // DDIM inversion with the true noise as the prediction.
    let last = sched.total_steps() - 1;
    let y = sched.corrupt(&xr, &er, last).unwrap();
    let mut worst = 0.0f64;
    for steps in [4usize, 16, 50] {
        let rec = ddpm_sample(|_, _| er.clone(), &y, steps, &sched).unwrap();
        for j in 0..6 {
            let rel = (rec[j] - xr[j]).abs() / xr[j].abs().max(1e-9);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4, "ddim inversion rel err {worst}");
    // Single step is the direct clean estimate.
    let one_step = ddpm_sample(|_, _| er.clone(), &y, 1, &sched).unwrap();
    let ab = sched.alpha_bar(last);
    for j in 0..6 {
        let x0 = (y[j] - (1.0 - ab).sqrt() * er[j]) / ab.sqrt();
        assert!((one_step[j] - x0).abs() < 1e-12, "single-step estimate at {j}");
    }

    println!(
        "criterion 01: affine/ODE/DDIM identities hold, DDIM inversion max rel {:.2e} (<=1e-4) [{:.2}s]",
        worst,
        t0.elapsed().as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// 2. KV-cache equivalence.

#[test]
fn criterion_02_cache_equivalence() {
    let t0 = Instant::now();
    let mut worst = 0.0f32;
    for objective in [Objective::Cam, Objective::Givt, Objective::GivtNoise] {
        let modes = if objective.uses_gmm_head() { 8 } else { 0 };
        let model = Preset::Tiny.model_config(objective, modes);
        for seed in [31u64, 32, 33] {
            let params = ParamStore::init(&model, seed);
            let gen = GenerationConfig {
                num_steps_denoise: 8,
                k_inf: k(0.01),
                target_length: 128,
                ..GenerationConfig::defaults(64, seed)
            };
            let fast = generate(&params, &model, objective, &gen).unwrap();
            let slow = generate_naive(&params, &model, objective, &gen).unwrap();
            let d = max_abs_diff(&fast.clean, &slow.clean)
                .max(max_abs_diff(&fast.fed_back, &slow.fed_back));
            worst = worst.max(d);
            assert!(
                d <= 1e-4,
                "cache deviation {d} for {objective} seed {seed} over 128 positions"
            );
        }
    }
    println!(
        "criterion 02: cached vs naive generation max |diff| {worst:.2e} (<=1e-4), 128 positions, 3 seeds, 3 heads [{:.1}s]",
        t0.elapsed().as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// 3. Gradient verification.

#[test]
fn criterion_03_gradient_verification() {
    let t0 = Instant::now();

    // Isolated linear layer: loss = mean((x W^T + b)^2).
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
    let linear_err = finite_difference_gradcheck(&params, loss_fn, 15, 47);
    assert!(linear_err <= 1e-4, "linear-layer gradcheck error {linear_err}");

    // Full objective on the tiny model, all parameters eligible, f64.
    let model = Preset::Tiny.model_config(Objective::Cam, 4);
    let mut cfg = TrainConfig::desk(Objective::Cam, 53);
    cfg.batch_size = 4;
    cfg.context_length = 8;
    let params = ParamStore::init(&model, 53).cast::<f64>();
    let mut rng = stream(59, &[lane::DATA]);
    let batch = Batch::new(normal_vec_f32(&mut rng, 2 * 4 * 8), 2, 4, 8);
    let noise = sample_step_noise(&cfg, 2, 4, 8, 0);
    let loss_fn = |p: &ParamStore<f64>, want: bool| {
        loss_and_grads(p, &model, &cfg, &batch, &noise, want).unwrap()
    };
    let full_err = finite_difference_gradcheck(&params, loss_fn, 24, 61);
    assert!(full_err <= 1e-2, "full-loss gradcheck error {full_err}");

    println!(
        "criterion 03: gradcheck max rel err {linear_err:.2e} (<=1e-4 linear), {full_err:.2e} (<=1e-2 full loss, f64) [{:.1}s]",
        t0.elapsed().as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// 4. Oracle conditional accuracy after a full training run.

#[test]
fn criterion_04_oracle_conditional_accuracy() {
    let t0 = Instant::now();
    let spec = SyntheticProcessSpec::default_ar1(ORACLE_SEED);

    // The Monte-Carlo floor of the estimator itself must leave headroom.
    let floor = oracle_replay_floor(&spec, ORACLE_PROBES, ORACLE_DRAWS, ORACLE_CONTEXT, ORACLE_SEED)
        .unwrap();
    assert!(
        floor.mean_err <= 0.03 && floor.cov_err <= 0.03,
        "replay floor mean {:.4} cov {:.4} exceeds 3%",
        floor.mean_err,
        floor.cov_err
    );

    let dataset = sample_process(&spec, ORACLE_DATASET_SEQS, 128, ORACLE_SEED).unwrap();
    let state = train_model(
        oracle_model(),
        Objective::Cam,
        ORACLE_SEED,
        ORACLE_STEPS,
        ORACLE_BATCH,
        ORACLE_LR,
        &dataset,
    );
    let acc = conditional_accuracy(
        &state.params,
        &state.model_cfg,
        Objective::Cam,
        &spec,
        ORACLE_PROBES,
        ORACLE_DRAWS,
        20,
        ORACLE_SEED,
    )
    .unwrap();
    println!(
        "criterion 04: conditional mean rel err {:.4} (<=0.10), cov rel err {:.4} (<=0.25), floor {:.4}/{:.4} (<=0.03) [{:.0}s]",
        acc.mean_err,
        acc.cov_err,
        floor.mean_err,
        floor.cov_err,
        t0.elapsed().as_secs_f64()
    );
    assert!(acc.mean_err <= 0.10, "conditional mean rel err {:.4} > 10%", acc.mean_err);
    assert!(acc.cov_err <= 0.25, "conditional cov rel err {:.4} > 25%", acc.cov_err);
}

// ---------------------------------------------------------------------------
// 5. Error-accumulation direction across objectives.

#[test]
fn criterion_05_error_accumulation_direction() {
    let sc = suite();
    let mut cam_gaps = sc.gaps(Objective::Cam);
    let mut rf_gaps = sc.gaps(Objective::MarRf);
    let cam_med = median(&mut cam_gaps);
    let rf_med = median(&mut rf_gaps);
    let rf_positive = rf_gaps.iter().filter(|&&g| g > 0.0).count();
    let noise_better = SUITE_SEEDS
        .iter()
        .filter(|&&seed| {
            sc.cell(seed, Objective::GivtNoise).fed < sc.cell(seed, Objective::Givt).fed
        })
        .count();

    println!(
        "criterion 05: median gap cam {cam_med:+.4} <= mar_rf {rf_med:+.4}; mar_rf positive in {rf_positive}/3 (>=2); \
         givt_noise better FED in {noise_better}/3 (>=2) [fixture {:.0}s]",
        sc.build_secs
    );
    assert!(cam_med <= rf_med, "median degradation: cam {cam_med:+.4} vs mar_rf {rf_med:+.4}");
    assert!(rf_positive >= 2, "mar_rf degradation positive in only {rf_positive}/3 seeds");
    assert!(noise_better >= 2, "givt_noise beats givt FED in only {noise_better}/3 seeds");
}

// ---------------------------------------------------------------------------
// 6. Inference-noise sweep shape.

#[test]
fn criterion_06_inference_noise_sweep() {
    let sc = suite();
    let mut argmin_positive = 0;
    let mut detail = String::new();
    for &seed in &SUITE_SEEDS {
        let grid = &sc.sweeps[&seed];
        let (best_k, best) = grid
            .iter()
            .copied()
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        if best_k > 0.0 {
            argmin_positive += 1;
        }
        detail.push_str(&format!(" seed {seed}: argmin k={best_k} (FED_acc {best:.4});"));
    }
    println!("criterion 06: argmin FED_acc at k_inf > 0 in {argmin_positive}/3 seeds (>=2);{detail}");
    assert!(argmin_positive >= 2, "argmin positive in only {argmin_positive}/3 seeds");
}

// ---------------------------------------------------------------------------
// 7. Flow head vs linear-schedule head at matched budgets.

#[test]
fn criterion_07_flow_vs_linear_head() {
    let sc = suite();
    let rf_better = SUITE_SEEDS
        .iter()
        .filter(|&&seed| {
            sc.cell(seed, Objective::MarRf).fed <= sc.cell(seed, Objective::MarLinear).fed
        })
        .count();
    let detail: Vec<String> = SUITE_SEEDS
        .iter()
        .map(|&seed| {
            format!(
                "seed {seed}: rf {:.4} vs linear {:.4}",
                sc.cell(seed, Objective::MarRf).fed,
                sc.cell(seed, Objective::MarLinear).fed
            )
        })
        .collect();
    println!(
        "criterion 07: mar_rf FED <= mar_linear FED in {rf_better}/3 seeds (>=2); {}",
        detail.join("; ")
    );
    assert!(rf_better >= 2, "mar_rf no better than mar_linear in {}/3 seeds", 3 - rf_better);
}

// ---------------------------------------------------------------------------
// 8. Full-scale preset parameter count.

#[test]
fn criterion_08_paper_scale_param_count() {
    let target = 150_000_000f64;
    let flow = Preset::Paper150m.model_config(Objective::Cam, 0).param_count() as f64;
    let gmm = Preset::Paper150m.model_config(Objective::Givt, 32).param_count() as f64;
    let rel = (flow - target).abs() / target;
    println!(
        "criterion 08: paper-150m params {:.1}M, rel dev {:.3} (<=0.10); mixture-head variant {:.1}M",
        flow / 1e6,
        rel,
        gmm / 1e6
    );
    assert!(rel <= 0.10, "paper-150m param count {flow} deviates {rel:.3} from 150M");
}

// ---------------------------------------------------------------------------
// 9. Metric closed forms and the MMD null.

#[test]
fn criterion_09_metric_closed_forms() {
    let t0 = Instant::now();

    let eye = |d: usize| {
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            m[i * d + i] = 1.0;
        }
        m
    };

    // Identical stats.
    let a = GaussianStats { mean: vec![0.4, -1.1, 2.0], cov: eye(3), count: 1000 };
    let d0 = frechet_distance(&a, &a).unwrap();
    assert!(d0.abs() <= 1e-8, "identical stats give {d0}");

    // Equal unit covariances: squared mean shift.
    let b = GaussianStats { mean: vec![1.4, -0.1, 0.0], cov: eye(3), count: 1000 };
    let shift: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let d1 = frechet_distance(&a, &b).unwrap();
    assert!((d1 - shift).abs() <= 1e-8, "mean-shift case {d1} vs {shift}");

    // Scalar covariance contraction: (2-1)^2 = 1.
    let c4 = GaussianStats { mean: vec![0.0], cov: vec![4.0], count: 1000 };
    let c1 = GaussianStats { mean: vec![0.0], cov: vec![1.0], count: 1000 };
    let d2 = frechet_distance(&c4, &c1).unwrap();
    assert!((d2 - 1.0).abs() <= 1e-8, "scalar case {d2} vs 1");

    // MMD null: two independent samples of one distribution.
    let dim = 8;
    let n = 2000;
    let mut rng = stream(9, &[lane::EVAL, 2]);
    let xs: Vec<f64> = normal_vec_f32(&mut rng, n * dim).iter().map(|&v| v as f64).collect();
    let ys: Vec<f64> = normal_vec_f32(&mut rng, n * dim).iter().map(|&v| v as f64).collect();
    let mmd = mmd_rbf(&xs, &ys, dim, Bandwidth::MedianHeuristic);
    assert!(mmd.abs() <= 0.01, "null MMD^2 {mmd}");

    println!(
        "criterion 09: closed forms within 1e-8 ({d0:.1e}, {:.1e}, {:.1e}); null MMD^2 {mmd:.2e} (<=0.01, n={n}) [{:.1}s]",
        (d1 - shift).abs(),
        (d2 - 1.0).abs(),
        t0.elapsed().as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// 10. Determinism and persistence.

#[test]
fn criterion_10_determinism_persistence() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();

    // (a) Resume reproduces the uninterrupted run bit for bit.
    let spec = SyntheticProcessSpec::default_ar1(5);
    let data = sample_process(&spec, 32, 64, 5).unwrap();
    let model = Preset::Tiny.model_config(Objective::Cam, 0);
    let mut tc = TrainConfig::desk(Objective::Cam, 5);
    tc.total_steps = 24;
    tc.batch_size = 4;
    tc.context_length = 16;

    let run = |state: &mut TrainState, upto: u64| -> Vec<u64> {
        let mut bits = Vec::new();
        while state.step < upto {
            let batch = sample_batch(&data, 4, 16, 5, state.step).unwrap();
            bits.push(train_step(state, &batch).unwrap().loss.to_bits());
        }
        bits
    };

    let mut straight = TrainState::new(model.clone(), tc.clone()).unwrap();
    let straight_bits = run(&mut straight, 24);

    let mut first = TrainState::new(model.clone(), tc.clone()).unwrap();
    run(&mut first, 12);
    let mid = dir.path().join("mid.ckpt");
    save_checkpoint(&first, &mid).unwrap();
    let mut resumed = load_checkpoint(&mid).unwrap();
    let resumed_bits = run(&mut resumed, 24);
    assert_eq!(
        &straight_bits[12..],
        &resumed_bits[..],
        "resumed losses diverge from the uninterrupted run"
    );
    let fa = dir.path().join("final-straight.ckpt");
    let fb = dir.path().join("final-resumed.ckpt");
    save_checkpoint(&straight, &fa).unwrap();
    save_checkpoint(&resumed, &fb).unwrap();
    assert_eq!(fs::read(&fa).unwrap(), fs::read(&fb).unwrap(), "final checkpoints differ");

    // (b) Embedding file round trip.
    let path = dir.path().join("roundtrip.came");
    write_embeddings(&data, &path).unwrap();
    let back = read_embeddings(&path).unwrap();
    assert_eq!(back.dim, data.dim);
    assert_eq!(back.sequences.len(), data.sequences.len());
    for (i, (a, b)) in data.sequences.iter().zip(&back.sequences).enumerate() {
        let same = a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same && a.len() == b.len(), "sequence {i} not bit-identical");
    }
    let path2 = dir.path().join("roundtrip2.came");
    write_embeddings(&back, &path2).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap(), "rewrite not byte-identical");

    // (c) Same-seed CLI runs produce byte-identical artifacts.
    let out_a = dir.path().join("cli-a");
    let out_b = dir.path().join("cli-b");
    let cfg_path = dir.path().join("config.toml");
    fs::write(
        &cfg_path,
        format!(
            "seed = 12\npreset = \"tiny\"\nout_dir = \"{}\"\n\n\
             [data]\nnum_sequences = 48\nlength = 48\n\n\
             [train]\ntotal_steps = 8\nbatch_size = 4\ncontext_length = 16\ncheckpoint_every = 100\n\n\
             [generation]\nnum_traces = 8\ntarget_length = 24\nnum_steps_denoise = 4\ncontext_window = 16\n",
            out_a.display()
        ),
    )
    .unwrap();
    let cam_bin = env!("CARGO_BIN_EXE_cam");
    let run_cli = |out: &Path| {
        let ckpt = format!("{}/checkpoint-final.ckpt", out.display());
        let subs: Vec<Vec<&str>> = vec![
            vec!["gen-data"],
            vec!["train"],
            vec!["generate", "--checkpoint", ckpt.as_str()],
        ];
        for sub in subs {
            let mut cmd = Command::new(cam_bin);
            cmd.arg(sub[0])
                .arg("--config")
                .arg(&cfg_path)
                .args(&sub[1..])
                .args(["--out", out.to_str().unwrap()])
                .env_remove("CAM_CACHE_DIR");
            let st = cmd.output().expect("spawn cam");
            assert!(
                st.status.success(),
                "cam {sub:?} failed: {}",
                String::from_utf8_lossy(&st.stderr)
            );
        }
    };
    run_cli(&out_a);
    run_cli(&out_b);
    for artifact in ["dataset.came", "checkpoint-final.ckpt", "traces.came"] {
        assert_eq!(
            fs::read(out_a.join(artifact)).unwrap(),
            fs::read(out_b.join(artifact)).unwrap(),
            "{artifact} differs between same-seed runs"
        );
    }

    println!(
        "criterion 10: resume bit-exact (12 of 24 steps), round trip bit-exact, CLI artifacts byte-identical [{:.1}s]",
        t0.elapsed().as_secs_f64()
    );
}
