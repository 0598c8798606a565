//! Distribution-distance metrics and the evaluation protocols built on
//! them: Fréchet distance over window features (FED / FED_acc), an RBF-MMD
//! cross-check, oracle-based conditional accuracy, error-accumulation
//! curves, and the SVG charts the CLI emits.
//!
//! All computations are pure and deterministic: every random choice is
//! keyed off an explicit feature/eval seed, and floating-point reductions
//! use a fixed pairwise-summation order so results never depend on how the
//! work is scheduled.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::data::{oracle_conditional, sample_process, Dataset, SyntheticProcessSpec};
use crate::error::{CamError, Result};
use crate::inference::{head_sample_rows, GenerationTrace};
use crate::model::backbone::backbone_forward;
use crate::model::config::ModelConfig;
use crate::model::params::ParamStore;
use crate::rng::{lane, normal, stream};
use crate::training::Objective;

/// Sum `f(0) + ... + f(n-1)` by recursive halving: a fixed, associative
/// reduction order that is independent of evaluation scheduling.
fn pairwise_sum(n: usize, f: &mut impl FnMut(usize) -> f64) -> f64 {
    fn go(lo: usize, hi: usize, f: &mut impl FnMut(usize) -> f64) -> f64 {
        if hi - lo <= 8 {
            let mut acc = 0.0;
            for i in lo..hi {
                acc += f(i);
            }
            return acc;
        }
        let mid = lo + (hi - lo) / 2;
        go(lo, mid, f) + go(mid, hi, f)
    }
    if n == 0 {
        0.0
    } else {
        go(0, n, f)
    }
}

/// Mean and covariance of a feature sample, the sufficient statistics the
/// Fréchet distance consumes. Covariance is sample (n-1) normalized,
/// row-major, exactly symmetric by construction.
#[derive(Clone, Debug)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Fit from feature rows. Needs strictly more rows than feature
    /// dimensions for a full-rank sample covariance.
    pub fn fit(features: &[Vec<f64>]) -> Result<GaussianStats> {
        let n = features.len();
        let f = features.first().map_or(0, |r| r.len());
        if n <= f || f == 0 {
            return Err(CamError::InsufficientSamples {
                count: n,
                feature_dim: f,
            });
        }
        assert!(
            features.iter().all(|r| r.len() == f),
            "ragged feature rows"
        );
        let mean: Vec<f64> = (0..f)
            .map(|j| pairwise_sum(n, &mut |i| features[i][j]) / n as f64)
            .collect();
        let mut cov = vec![0.0; f * f];
        for j in 0..f {
            for k in j..f {
                let c = pairwise_sum(n, &mut |i| {
                    (features[i][j] - mean[j]) * (features[i][k] - mean[k])
                }) / (n - 1) as f64;
                cov[j * f + k] = c;
                cov[k * f + j] = c;
            }
        }
        Ok(GaussianStats { mean, cov, count: n })
    }
}

/// Symmetric PSD square root via eigendecomposition; negative eigenvalues
/// are numerical noise and clamp to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let sqrt_vals = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&v| v.max(0.0).sqrt()),
    );
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Fréchet distance between two Gaussians:
/// `||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.
///
/// A 1e-6 ridge is added only when a covariance is numerically singular,
/// so the well-conditioned closed forms are reproduced to 1e-8.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(CamError::DimensionMismatch {
            context: "frechet_distance",
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let f = a.dim();
    let stabilize = |stats: &GaussianStats| -> DMatrix<f64> {
        let m = DMatrix::from_row_slice(f, f, &stats.cov);
        let sym = (&m + m.transpose()) * 0.5;
        if min_eigenvalue(&sym) < 1e-10 {
            sym + DMatrix::identity(f, f) * 1e-6
        } else {
            sym
        }
    };
    let sa = stabilize(a);
    let sb = stabilize(b);
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(b.mean.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();

    let root_a = psd_sqrt(&sa);
    let prod = &root_a * &sb * &root_a;
    let sym_prod = (&prod + prod.transpose()) * 0.5;
    let tr_sqrt: f64 = sym_prod
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|&v| v.max(0.0).sqrt())
        .sum();

    let fd = (mean_term + sa.trace() + sb.trace() - 2.0 * tr_sqrt).max(0.0);
    if !fd.is_finite() {
        return Err(CamError::NonFinite {
            what: "frechet distance",
            step: 0,
            detail: format!("mean term {mean_term}, trace sqrt {tr_sqrt}"),
        });
    }
    Ok(fd)
}

/// Deterministic feature map for fixed-length windows: per-dim mean, per-dim
/// std, per-dim lag-1 autocorrelation, and a seeded 2d-dimensional random
/// projection of the flattened window. Feature dimension is 5d.
pub struct FeatureMap {
    dim: usize,
    window: usize,
    /// (2d, window*dim) row-major projection, entries N(0, 1/(window*dim)).
    proj: Vec<f64>,
}

impl FeatureMap {
    pub fn new(dim: usize, window: usize, feature_seed: u64) -> Self {
        assert!(dim > 0 && window > 0);
        let rows = 2 * dim;
        let cols = window * dim;
        let mut rng = stream(feature_seed, &[lane::FEATURE]);
        let scale = 1.0 / (cols as f64).sqrt();
        let proj = (0..rows * cols).map(|_| normal(&mut rng) * scale).collect();
        FeatureMap { dim, window, proj }
    }

    pub fn feature_dim(&self) -> usize {
        5 * self.dim
    }

    pub fn features(&self, window: &[f32]) -> Vec<f64> {
        let (d, t) = (self.dim, self.window);
        assert_eq!(window.len(), t * d, "window length mismatch");
        let mut out = Vec::with_capacity(5 * d);
        let col = |j: usize, i: usize| window[i * d + j] as f64;

        let means: Vec<f64> =
            (0..d).map(|j| pairwise_sum(t, &mut |i| col(j, i)) / t as f64).collect();
        out.extend_from_slice(&means);
        let vars: Vec<f64> = (0..d)
            .map(|j| pairwise_sum(t, &mut |i| (col(j, i) - means[j]).powi(2)) / t as f64)
            .collect();
        out.extend(vars.iter().map(|v| v.sqrt()));
        for j in 0..d {
            let denom = vars[j] * t as f64;
            let ac = if t < 2 || denom <= 0.0 {
                0.0
            } else {
                pairwise_sum(t - 1, &mut |i| {
                    (col(j, i + 1) - means[j]) * (col(j, i) - means[j])
                }) / denom
            };
            out.push(ac);
        }
        let cols = t * d;
        for r in 0..2 * d {
            let row = &self.proj[r * cols..(r + 1) * cols];
            out.push(pairwise_sum(cols, &mut |k| row[k] * window[k] as f64));
        }
        out
    }
}

/// Sizing of the FED evaluation protocol.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FedConfig {
    /// Window length in positions; FED scores [0, window), FED_acc scores
    /// [window, 2*window) of each trace.
    pub window: usize,
    pub reference_windows: usize,
    pub background_windows: usize,
    /// Background redraws averaged over.
    pub draws: usize,
    pub feature_seed: u64,
}

impl FedConfig {
    pub fn desk(window: usize, feature_seed: u64) -> Self {
        FedConfig {
            window,
            reference_windows: 4096,
            background_windows: 512,
            draws: 5,
            feature_seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedReport {
    pub fed: f64,
    pub fed_acc: f64,
}

fn uniform_index(rng: &mut ChaCha8Rng, n: usize) -> usize {
    ((rng.gen::<f64>() * n as f64) as usize).min(n - 1)
}

/// Features of `count` windows drawn uniformly (sequence, then offset) from
/// a reference dataset; the deterministic reference side of the FED
/// protocol and of MMD cross-checks.
pub fn sample_window_features(
    reference: &Dataset,
    window: usize,
    count: usize,
    feature_seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let d = reference.dim;
    for i in 0..reference.num_sequences() {
        let len = reference.seq_len(i);
        if len < window {
            return Err(CamError::SequenceTooShort {
                index: i,
                len,
                crop: window,
            });
        }
    }
    let fm = FeatureMap::new(d, window, feature_seed);
    let mut rng = stream(feature_seed, &[lane::EVAL, 0]);
    let mut feats = Vec::with_capacity(count);
    for _ in 0..count {
        let i = uniform_index(&mut rng, reference.num_sequences());
        let span = reference.seq_len(i) - window + 1;
        let start = uniform_index(&mut rng, span);
        feats.push(fm.features(&reference.sequences[i][start * d..(start + window) * d]));
    }
    Ok(feats)
}

/// FED / FED_acc: Fréchet distance between the reference window-feature
/// distribution and the features of each trace's first and second window.
/// Backgrounds are redrawn `draws` times (with replacement, paired across
/// the two windows) and the distances averaged.
pub fn fed_protocol(
    traces: &[GenerationTrace],
    reference: &Dataset,
    cfg: &FedConfig,
) -> Result<FedReport> {
    let w = cfg.window;
    let d = reference.dim;
    if w == 0 || cfg.draws == 0 {
        return Err(CamError::InvalidConfig(
            "fed protocol needs window >= 1 and draws >= 1".into(),
        ));
    }
    if traces.is_empty() {
        return Err(CamError::InsufficientSamples {
            count: 0,
            feature_dim: 5 * d,
        });
    }
    for t in traces {
        if t.dim != d {
            return Err(CamError::DimensionMismatch {
                context: "fed_protocol trace dim",
                expected: d,
                got: t.dim,
            });
        }
        if t.len() < 2 * w {
            return Err(CamError::InvalidConfig(format!(
                "trace length {} shorter than two windows of {w}",
                t.len()
            )));
        }
    }
    let ref_feats =
        sample_window_features(reference, w, cfg.reference_windows, cfg.feature_seed)?;
    let ref_stats = GaussianStats::fit(&ref_feats)?;
    let fm = FeatureMap::new(d, w, cfg.feature_seed);

    let first: Vec<Vec<f64>> = traces.iter().map(|t| fm.features(&t.clean[..w * d])).collect();
    let second: Vec<Vec<f64>> = traces
        .iter()
        .map(|t| fm.features(&t.clean[w * d..2 * w * d]))
        .collect();

    let mut fed = 0.0;
    let mut fed_acc = 0.0;
    for draw in 0..cfg.draws {
        let mut rng = stream(cfg.feature_seed, &[lane::EVAL, 1 + draw as u64]);
        let picks: Vec<usize> = (0..cfg.background_windows)
            .map(|_| uniform_index(&mut rng, traces.len()))
            .collect();
        let bg_first: Vec<Vec<f64>> = picks.iter().map(|&i| first[i].clone()).collect();
        let bg_second: Vec<Vec<f64>> = picks.iter().map(|&i| second[i].clone()).collect();
        fed += frechet_distance(&GaussianStats::fit(&bg_first)?, &ref_stats)?;
        fed_acc += frechet_distance(&GaussianStats::fit(&bg_second)?, &ref_stats)?;
    }
    Ok(FedReport {
        fed: fed / cfg.draws as f64,
        fed_acc: fed_acc / cfg.draws as f64,
    })
}

/// RBF kernel bandwidth selection for [`mmd_rbf`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// k(x,y) = exp(-||x-y||^2 / h) with this h.
    Fixed(f64),
    /// h = median pairwise squared distance over the pooled samples.
    MedianHeuristic,
}

/// Unbiased MMD^2 estimator with an RBF kernel over flat `dim`-dimensional
/// rows. Can be slightly negative on matched distributions by construction.
pub fn mmd_rbf(a: &[f64], b: &[f64], dim: usize, bandwidth: Bandwidth) -> f64 {
    assert!(dim > 0 && a.len().is_multiple_of(dim) && b.len().is_multiple_of(dim));
    let m = a.len() / dim;
    let n = b.len() / dim;
    assert!(m >= 2 && n >= 2, "unbiased mmd needs at least two samples each");
    let sq = |x: &[f64], y: &[f64]| -> f64 {
        x.iter().zip(y.iter()).map(|(p, q)| (p - q) * (p - q)).sum()
    };
    fn row(s: &[f64], dim: usize, i: usize) -> &[f64] {
        &s[i * dim..(i + 1) * dim]
    }

    let h = match bandwidth {
        Bandwidth::Fixed(h) => h,
        Bandwidth::MedianHeuristic => {
            let total = m + n;
            let pooled = |i: usize| -> &[f64] {
                if i < m {
                    row(a, dim, i)
                } else {
                    row(b, dim, i - m)
                }
            };
            let mut dists = Vec::with_capacity(total * (total - 1) / 2);
            for i in 0..total {
                for j in (i + 1)..total {
                    dists.push(sq(pooled(i), pooled(j)));
                }
            }
            dists.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let med = dists[dists.len() / 2];
            if med > 0.0 {
                med
            } else {
                1.0
            }
        }
    };
    let k = |x: &[f64], y: &[f64]| (-sq(x, y) / h).exp();

    let kaa = pairwise_sum(m, &mut |i| {
        pairwise_sum(m, &mut |j| if i == j { 0.0 } else { k(row(a, dim, i), row(a, dim, j)) })
    }) / (m * (m - 1)) as f64;
    let kbb = pairwise_sum(n, &mut |i| {
        pairwise_sum(n, &mut |j| if i == j { 0.0 } else { k(row(b, dim, i), row(b, dim, j)) })
    }) / (n * (n - 1)) as f64;
    let kab = pairwise_sum(m, &mut |i| pairwise_sum(n, &mut |j| k(row(a, dim, i), row(b, dim, j))))
        / (m * n) as f64;
    kaa + kbb - 2.0 * kab
}

/// Aggregate relative errors of a model's one-step conditional against the
/// process oracle: `sqrt(sum ||err||^2 / sum ||truth||^2)` over probes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalAccuracy {
    pub mean_err: f64,
    pub cov_err: f64,
}

struct MomentAccumulator {
    mean_num: f64,
    mean_den: f64,
    cov_num: f64,
    cov_den: f64,
}

impl MomentAccumulator {
    fn new() -> Self {
        MomentAccumulator {
            mean_num: 0.0,
            mean_den: 0.0,
            cov_num: 0.0,
            cov_den: 0.0,
        }
    }

    /// Empirical moments of `draws` rows against the oracle (mean, cov).
    fn add(&mut self, rows: &[f32], d: usize, mean: &[f64], cov: &[f64]) {
        let n = rows.len() / d;
        let mut emp_mean = vec![0.0f64; d];
        for r in rows.chunks_exact(d) {
            for (j, &v) in r.iter().enumerate() {
                emp_mean[j] += v as f64;
            }
        }
        for v in emp_mean.iter_mut() {
            *v /= n as f64;
        }
        let mut emp_cov = vec![0.0f64; d * d];
        for r in rows.chunks_exact(d) {
            for j in 0..d {
                let cj = r[j] as f64 - emp_mean[j];
                for k in 0..d {
                    emp_cov[j * d + k] += cj * (r[k] as f64 - emp_mean[k]);
                }
            }
        }
        for v in emp_cov.iter_mut() {
            *v /= n as f64;
        }
        for j in 0..d {
            self.mean_num += (emp_mean[j] - mean[j]).powi(2);
            self.mean_den += mean[j].powi(2);
        }
        for i in 0..d * d {
            self.cov_num += (emp_cov[i] - cov[i]).powi(2);
            self.cov_den += cov[i].powi(2);
        }
    }

    fn finish(self) -> ConditionalAccuracy {
        ConditionalAccuracy {
            mean_err: (self.mean_num / self.mean_den).sqrt(),
            cov_err: (self.cov_num / self.cov_den).sqrt(),
        }
    }
}

/// One probe: a clean prefix plus its oracle conditional mean and covariance.
type Probe = (Vec<f32>, Vec<f64>, Vec<f64>);

/// Probe prefixes for conditional-accuracy runs: `num_probes` process
/// prefixes of `prefix_len` frames plus their oracle conditionals.
fn conditional_probes(
    spec: &SyntheticProcessSpec,
    num_probes: usize,
    prefix_len: usize,
    seed: u64,
) -> Result<Vec<Probe>> {
    let prefixes = sample_process(spec, num_probes, prefix_len, seed)?;
    (0..num_probes)
        .map(|p| {
            let prefix = prefixes.sequences[p].clone();
            let (mean, cov) = oracle_conditional(spec, &prefix)?;
            Ok((prefix, mean, cov))
        })
        .collect()
}

/// Compare a trained model's one-step conditionals against the process
/// oracle. Each probe feeds a clean prefix to the backbone and draws
/// `draws_per_probe` head samples from the resulting conditioning vector.
#[allow(clippy::too_many_arguments)]
pub fn conditional_accuracy(
    params: &ParamStore<f32>,
    model: &ModelConfig,
    objective: Objective,
    spec: &SyntheticProcessSpec,
    num_probes: usize,
    draws_per_probe: usize,
    num_steps_denoise: usize,
    seed: u64,
) -> Result<ConditionalAccuracy> {
    let d = model.backbone.input_dim;
    if spec.dim != d {
        return Err(CamError::DimensionMismatch {
            context: "conditional_accuracy process dim",
            expected: d,
            got: spec.dim,
        });
    }
    let prefix_len = model.backbone.max_context;
    let zdim = model.backbone.model_dim;
    let mut acc = MomentAccumulator::new();
    for (p, (prefix, mean, cov)) in conditional_probes(spec, num_probes, prefix_len, seed)?
        .into_iter()
        .enumerate()
    {
        let frames: Vec<Vec<f32>> = prefix.chunks_exact(d).map(|c| c.to_vec()).collect();
        let outs = backbone_forward(params, &model.backbone, &frames, None)?;
        let z = outs.last().expect("non-empty prefix").clone();
        let zs: Vec<f32> = z
            .iter()
            .cycle()
            .take(draws_per_probe * zdim)
            .copied()
            .collect();
        let mut rngs: Vec<ChaCha8Rng> = (0..draws_per_probe)
            .map(|k| stream(seed, &[lane::EVAL, p as u64, k as u64]))
            .collect();
        let rows = head_sample_rows(
            params,
            model,
            objective,
            num_steps_denoise,
            1.0,
            &zs,
            &mut rngs,
            p as u64,
        )?;
        acc.add(&rows, d, &mean, &cov);
    }
    Ok(acc.finish())
}

/// Monte-Carlo noise floor of [`conditional_accuracy`]: replay the oracle
/// itself as the "model" by drawing from the exact conditional, with the
/// same probe count and estimator. Trained-model tolerances only mean
/// something above this floor.
pub fn oracle_replay_floor(
    spec: &SyntheticProcessSpec,
    num_probes: usize,
    draws_per_probe: usize,
    prefix_len: usize,
    seed: u64,
) -> Result<ConditionalAccuracy> {
    let d = spec.dim;
    let mut acc = MomentAccumulator::new();
    for (p, (_prefix, mean, cov)) in conditional_probes(spec, num_probes, prefix_len, seed)?
        .into_iter()
        .enumerate()
    {
        let cmat = DMatrix::from_row_slice(d, d, &cov);
        let chol = cmat
            .cholesky()
            .ok_or_else(|| CamError::InvalidConfig("oracle covariance not PD".into()))?
            .l();
        let mut rows = Vec::with_capacity(draws_per_probe * d);
        for k in 0..draws_per_probe {
            let mut rng = stream(seed, &[lane::EVAL, p as u64, k as u64]);
            let w = DVector::from_fn(d, |_, _| normal(&mut rng));
            let x = DVector::from_column_slice(&mean) + &chol * w;
            rows.extend(x.iter().map(|&v| v as f32));
        }
        acc.add(&rows, d, &mean, &cov);
    }
    Ok(acc.finish())
}

/// Per-position-bucket Fréchet distance of single-frame marginals against
/// the reference marginal, with a Kendall-tau trend statistic.
#[derive(Clone, Debug)]
pub struct AccumulationCurve {
    /// (bucket start position, distance), buckets with too few frames
    /// skipped.
    pub points: Vec<(usize, f64)>,
    /// Kendall tau of distance against position: +1 monotone degradation,
    /// 0 no trend.
    pub tau: f64,
}

/// Kendall tau-a of a series against its index order.
pub fn kendall_tau(series: &[f64]) -> f64 {
    let m = series.len();
    if m < 2 {
        return 0.0;
    }
    let mut s = 0i64;
    for i in 0..m {
        for j in (i + 1)..m {
            let d = series[j] - series[i];
            if d > 0.0 {
                s += 1;
            } else if d < 0.0 {
                s -= 1;
            }
        }
    }
    s as f64 / (m * (m - 1) / 2) as f64
}

/// Error-accumulation curve: how far generated frame marginals drift from
/// the reference marginal as position grows. Frames themselves are the
/// features here; windows would smear the positional signal.
pub fn accumulation_curve(
    traces: &[GenerationTrace],
    reference: &Dataset,
    stride: usize,
) -> Result<AccumulationCurve> {
    if traces.is_empty() || stride == 0 {
        return Err(CamError::InvalidConfig(
            "accumulation curve needs traces and stride >= 1".into(),
        ));
    }
    let d = reference.dim;
    let ref_frames: Vec<Vec<f64>> = (0..reference.num_sequences())
        .flat_map(|i| {
            reference.sequences[i]
                .chunks_exact(d)
                .map(|c| c.iter().map(|&v| v as f64).collect::<Vec<f64>>())
                .collect::<Vec<_>>()
        })
        .collect();
    let ref_stats = GaussianStats::fit(&ref_frames)?;

    let max_len = traces.iter().map(|t| t.len()).max().unwrap();
    let mut points = Vec::new();
    let mut bucket = 0;
    while bucket * stride < max_len {
        let lo = bucket * stride;
        let hi = ((bucket + 1) * stride).min(max_len);
        let frames: Vec<Vec<f64>> = traces
            .iter()
            .flat_map(|t| {
                (lo..hi.min(t.len())).map(|pos| {
                    t.clean_frame(pos).iter().map(|&v| v as f64).collect::<Vec<f64>>()
                })
            })
            .collect();
        match GaussianStats::fit(&frames) {
            Ok(stats) => points.push((lo, frechet_distance(&stats, &ref_stats)?)),
            Err(CamError::InsufficientSamples { count, .. }) => {
                eprintln!(
                    "warning: skipping accumulation bucket at position {lo} ({count} frames)"
                );
            }
            Err(e) => return Err(e),
        }
        bucket += 1;
    }
    let tau = kendall_tau(&points.iter().map(|&(_, v)| v).collect::<Vec<f64>>());
    Ok(AccumulationCurve { points, tau })
}

/// One named series of a line chart.
#[derive(Clone, Debug)]
pub struct ChartSeries {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const CHART_COLORS: [&str; 6] = [
    "#1f6feb", "#d1242f", "#1a7f37", "#9a6700", "#8250df", "#bf3989",
];

fn svg_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn finite_bounds(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        None
    } else if lo == hi {
        Some((lo - 0.5, hi + 0.5))
    } else {
        Some((lo, hi))
    }
}

/// Render a multi-series line chart as a standalone SVG file.
pub fn write_line_chart(
    path: impl AsRef<Path>,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[ChartSeries],
) -> Result<()> {
    let path = path.as_ref();
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(CamError::InvalidConfig("line chart with no points".into()));
    }
    let (x_lo, x_hi) = finite_bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)))
        .ok_or_else(|| CamError::InvalidConfig("line chart with no finite points".into()))?;
    let (y_lo, y_hi) = finite_bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)))
        .ok_or_else(|| CamError::InvalidConfig("line chart with no finite points".into()))?;

    let (width, height) = (800.0, 500.0);
    let (ml, mr, mt, mb) = (70.0, 140.0, 50.0, 60.0);
    let px = |x: f64| ml + (x - x_lo) / (x_hi - x_lo) * (width - ml - mr);
    let py = |y: f64| height - mb - (y - y_lo) / (y_hi - y_lo) * (height - mt - mb);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {width} {height}\" \
         font-family=\"sans-serif\" font-size=\"13\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"28\" text-anchor=\"middle\" font-size=\"17\">{}</text>\n",
        width / 2.0,
        svg_escape(title)
    ));
    // Axes, ticks, grid.
    for i in 0..=4 {
        let fx = x_lo + (x_hi - x_lo) * i as f64 / 4.0;
        let fy = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        svg.push_str(&format!(
            "<line x1=\"{0:.1}\" y1=\"{1:.1}\" x2=\"{0:.1}\" y2=\"{2:.1}\" stroke=\"#ddd\"/>\n",
            px(fx),
            py(y_lo),
            py(y_hi)
        ));
        svg.push_str(&format!(
            "<line x1=\"{1:.1}\" y1=\"{0:.1}\" x2=\"{2:.1}\" y2=\"{0:.1}\" stroke=\"#ddd\"/>\n",
            py(fy),
            px(x_lo),
            px(x_hi)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.4}</text>\n",
            px(fx),
            height - mb + 20.0,
            fx
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{:.4}</text>\n",
            ml - 8.0,
            py(fy) + 4.0,
            fy
        ));
    }
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n",
        height - mb,
        width - mr
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        height - mb
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        (ml + width - mr) / 2.0,
        height - 15.0,
        svg_escape(x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {0})\">{1}</text>\n",
        (mt + height - mb) / 2.0,
        svg_escape(y_label)
    ));

    for (si, s) in series.iter().enumerate() {
        let color = CHART_COLORS[si % CHART_COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|p| format!("{:.1},{:.1}", px(p.0), py(p.1)))
            .collect();
        if pts.is_empty() {
            continue;
        }
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            pts.join(" ")
        ));
        let ly = mt + 20.0 * si as f64;
        svg.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{ly:.1}\" x2=\"{1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            width - mr + 10.0,
            width - mr + 34.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\">{}</text>\n",
            width - mr + 40.0,
            ly + 4.0,
            svg_escape(&s.label)
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| CamError::io(path, e))
}

/// Render grouped vertical bars (one group per category, one bar per
/// series) as a standalone SVG file.
pub fn write_bar_chart(
    path: impl AsRef<Path>,
    title: &str,
    categories: &[String],
    series: &[(String, Vec<f64>)],
) -> Result<()> {
    let path = path.as_ref();
    if categories.is_empty() || series.is_empty() {
        return Err(CamError::InvalidConfig("bar chart with no data".into()));
    }
    for (label, vals) in series {
        if vals.len() != categories.len() {
            return Err(CamError::InvalidConfig(format!(
                "bar series {label} has {} values for {} categories",
                vals.len(),
                categories.len()
            )));
        }
    }
    let (_, y_hi) = finite_bounds(series.iter().flat_map(|s| s.1.iter().copied()))
        .ok_or_else(|| CamError::InvalidConfig("bar chart with no finite values".into()))?;
    let y_hi = y_hi.max(1e-12);

    let (width, height) = (800.0, 500.0);
    let (ml, mr, mt, mb) = (70.0, 140.0, 50.0, 70.0);
    let plot_w = width - ml - mr;
    let plot_h = height - mt - mb;
    let group_w = plot_w / categories.len() as f64;
    let bar_w = group_w * 0.8 / series.len() as f64;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {width} {height}\" \
         font-family=\"sans-serif\" font-size=\"13\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"28\" text-anchor=\"middle\" font-size=\"17\">{}</text>\n",
        width / 2.0,
        svg_escape(title)
    ));
    for i in 0..=4 {
        let v = y_hi * i as f64 / 4.0;
        let y = height - mb - v / y_hi * plot_h;
        svg.push_str(&format!(
            "<line x1=\"{ml}\" y1=\"{y:.1}\" x2=\"{}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n",
            width - mr
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{:.4}</text>\n",
            ml - 8.0,
            y + 4.0,
            v
        ));
    }
    for (ci, cat) in categories.iter().enumerate() {
        let gx = ml + group_w * ci as f64;
        for (si, (_, vals)) in series.iter().enumerate() {
            let v = vals[ci];
            if !v.is_finite() {
                continue;
            }
            let h = (v.max(0.0) / y_hi * plot_h).min(plot_h);
            let x = gx + group_w * 0.1 + bar_w * si as f64;
            let y = height - mb - h;
            svg.push_str(&format!(
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"{}\"/>\n",
                bar_w * 0.9,
                CHART_COLORS[si % CHART_COLORS.len()]
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            gx + group_w / 2.0,
            height - mb + 20.0,
            svg_escape(cat)
        ));
    }
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n",
        height - mb,
        width - mr
    ));
    for (si, (label, _)) in series.iter().enumerate() {
        let ly = mt + 20.0 * si as f64;
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{:.1}\" width=\"14\" height=\"14\" fill=\"{}\"/>\n",
            width - mr + 10.0,
            ly - 10.0,
            CHART_COLORS[si % CHART_COLORS.len()]
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\">{}</text>\n",
            width - mr + 30.0,
            ly + 2.0,
            svg_escape(label)
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| CamError::io(path, e))
}
