//! Synthetic sequence processes with exactly known conditionals, plus the
//! embedding file format, cropping, batching, and normalization.
//!
//! The linear-Gaussian processes here stand in for a real embedding corpus:
//! their conditional mean and covariance are available in closed form, which
//! is what the evaluation suite scores trained models against. Datasets are
//! immutable after construction; every sequence is simulated from its own
//! RNG substream, so generation is deterministic regardless of how the work
//! is ordered.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{CamError, Result};
use crate::fileio::{check_container, seal_container, ByteReader};
use crate::rng::{lane, normal, stream};
use crate::training::Batch;

/// Family of a synthetic process.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessKind {
    LinearGaussianAr1,
    RegimeSwitching,
}

/// One linear-Gaussian regime: `x_t = A x_{t-1} + b + L w_t`.
/// Matrices are row-major `dim * dim`, `l` lower-triangular.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub l: Vec<f64>,
}

/// Full description of a synthetic process. `regimes` holds exactly one
/// entry for [`ProcessKind::LinearGaussianAr1`]; two or more for
/// [`ProcessKind::RegimeSwitching`], with per-step switch probability
/// `switch_prob` (a switch moves to a uniformly chosen other regime).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProcessSpec {
    pub kind: ProcessKind,
    pub dim: usize,
    pub regimes: Vec<Regime>,
    pub switch_prob: f64,
    pub seed: u64,
}

/// Flatten to row-major (nalgebra stores column-major).
fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Spectral radius via complex eigenvalues.
fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

/// Solve the discrete Lyapunov equation `S = A S A^T + Q` by vectorizing:
/// `(I - A (x) A) vec(S) = vec(Q)`.
pub fn lyapunov_covariance(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    let rho = spectral_radius(a);
    if rho >= 1.0 {
        return Err(CamError::UnstableProcess { rho });
    }
    let kron = a.kronecker(a);
    let sys = DMatrix::identity(d * d, d * d) - kron;
    let rhs = DVector::from_column_slice(q.as_slice());
    let sol = sys
        .lu()
        .solve(&rhs)
        .ok_or(CamError::UnstableProcess { rho })?;
    let s = DMatrix::from_column_slice(d, d, sol.as_slice());
    // Symmetrize away solver round-off.
    Ok((&s + s.transpose()) * 0.5)
}

/// Precomputed per-regime quantities used by simulation and the oracle.
struct RegimeDyn {
    a: DMatrix<f64>,
    b: DVector<f64>,
    l: DMatrix<f64>,
    q: DMatrix<f64>,
    q_inv: DMatrix<f64>,
    q_logdet: f64,
    /// Stationary moments of this regime run in isolation.
    mu: DVector<f64>,
    sigma_chol: DMatrix<f64>,
    sigma_inv: DMatrix<f64>,
    sigma_logdet: f64,
}

const LN_2PI: f64 = 1.837877066409345483560659472811;

fn log_gaussian(x: &DVector<f64>, mean: &DVector<f64>, inv: &DMatrix<f64>, logdet: f64) -> f64 {
    let diff = x - mean;
    let maha = (inv * &diff).dot(&diff);
    -0.5 * (x.len() as f64 * LN_2PI + logdet + maha)
}

impl SyntheticProcessSpec {
    pub fn validate(&self) -> Result<()> {
        let expected = match self.kind {
            ProcessKind::LinearGaussianAr1 => self.regimes.len() == 1,
            ProcessKind::RegimeSwitching => self.regimes.len() >= 2,
        };
        if !expected {
            return Err(CamError::InvalidConfig(format!(
                "{:?} with {} regimes",
                self.kind,
                self.regimes.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.switch_prob) {
            return Err(CamError::InvalidConfig(format!(
                "switch_prob {} outside [0,1]",
                self.switch_prob
            )));
        }
        let d = self.dim;
        for r in &self.regimes {
            if r.a.len() != d * d || r.b.len() != d || r.l.len() != d * d {
                return Err(CamError::InvalidConfig(
                    "regime matrix sizes do not match dim".into(),
                ));
            }
        }
        // Stability and noise positive-definiteness checked by dynamics().
        self.dynamics().map(|_| ())
    }

    fn dynamics(&self) -> Result<Vec<RegimeDyn>> {
        let d = self.dim;
        self.regimes
            .iter()
            .map(|r| {
                let a = DMatrix::from_row_slice(d, d, &r.a);
                let b = DVector::from_column_slice(&r.b);
                let l = DMatrix::from_row_slice(d, d, &r.l);
                let q = &l * l.transpose();
                let q_chol = q.clone().cholesky().ok_or_else(|| {
                    CamError::InvalidConfig("noise covariance L L^T is not positive definite".into())
                })?;
                let q_logdet = 2.0 * q_chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                let q_inv = q_chol.inverse();

                let sigma = lyapunov_covariance(&a, &q)?;
                let sigma_chol_full = sigma.clone().cholesky().ok_or_else(|| {
                    CamError::InvalidConfig("stationary covariance is not positive definite".into())
                })?;
                let sigma_logdet = 2.0
                    * sigma_chol_full
                        .l()
                        .diagonal()
                        .iter()
                        .map(|v| v.ln())
                        .sum::<f64>();
                let sigma_inv = sigma_chol_full.inverse();
                // mu = (I - A)^{-1} b.
                let mu = (DMatrix::identity(d, d) - &a)
                    .lu()
                    .solve(&b)
                    .ok_or_else(|| {
                        CamError::InvalidConfig("I - A is singular; process has no mean".into())
                    })?;
                Ok(RegimeDyn {
                    a,
                    b,
                    l,
                    q,
                    q_inv,
                    q_logdet,
                    mu,
                    sigma_chol: sigma_chol_full.l(),
                    sigma_inv,
                    sigma_logdet,
                })
            })
            .collect()
    }

    /// Single-regime AR(1) spec.
    pub fn ar1(dim: usize, a: Vec<f64>, b: Vec<f64>, l: Vec<f64>, seed: u64) -> Self {
        SyntheticProcessSpec {
            kind: ProcessKind::LinearGaussianAr1,
            dim,
            regimes: vec![Regime { a, b, l }],
            switch_prob: 0.0,
            seed,
        }
    }

    /// Default oracle process: dim 8, `A = 0.8 * (random orthogonal)`,
    /// `b = 0`, noise shaped by a random SPD factor and scaled so the
    /// stationary per-dim variance averages exactly 1.
    pub fn default_ar1(seed: u64) -> Self {
        Self::random_ar1(8, seed)
    }

    /// [`Self::default_ar1`] at an arbitrary dimension.
    pub fn random_ar1(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "process dimension must be positive");
        let mut rng = stream(seed, &[lane::SPEC, 0]);
        let (a, l) = random_regime(dim, 0.8, &mut rng);
        SyntheticProcessSpec::ar1(dim, a, l.1, l.0, seed)
    }

    /// Two-regime switching process (p = 0.05) whose regimes differ in
    /// rotation and mean, giving a multimodal one-step conditional.
    pub fn default_regime_switching(seed: u64) -> Self {
        Self::random_regime_switching(8, seed)
    }

    /// [`Self::default_regime_switching`] at an arbitrary dimension.
    pub fn random_regime_switching(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "process dimension must be positive");
        let mut rng = stream(seed, &[lane::SPEC, 1]);
        let (a0, (l0, _)) = random_regime(dim, 0.8, &mut rng);
        let (a1, (l1, _)) = random_regime(dim, 0.85, &mut rng);
        let b0: Vec<f64> = (0..dim).map(|_| 0.15 * normal(&mut rng)).collect();
        let b1: Vec<f64> = b0.iter().map(|v| -v).collect();
        SyntheticProcessSpec {
            kind: ProcessKind::RegimeSwitching,
            dim,
            regimes: vec![
                Regime { a: a0, b: b0, l: l0 },
                Regime { a: a1, b: b1, l: l1 },
            ],
            switch_prob: 0.05,
            seed,
        }
    }
}

/// Draw `A = contraction * Q_orth` and a noise Cholesky factor scaled so the
/// stationary per-dim variance averages 1. Returns (a, (l, zero_b)).
fn random_regime(
    dim: usize,
    contraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, (Vec<f64>, Vec<f64>)) {
    let g = DMatrix::from_fn(dim, dim, |_, _| normal(rng));
    let q_orth = g.qr().q();
    let a = q_orth * contraction;

    let g2 = DMatrix::from_fn(dim, dim, |_, _| normal(rng));
    let spd = (&g2 * g2.transpose()) / dim as f64 + DMatrix::identity(dim, dim) * 0.1;
    let l0 = spd.cholesky().expect("SPD by construction").l();
    let q0 = &l0 * l0.transpose();
    let sigma0 = lyapunov_covariance(&a, &q0).expect("contraction < 1");
    let scale = (dim as f64 / sigma0.trace()).sqrt();
    let l = l0 * scale;

    (row_major(&a), (row_major(&l), vec![0.0; dim]))
}

/// Per-dimension affine normalization, recorded so it can be undone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// An immutable corpus of sequences. Each sequence is a flat
/// `frames * dim` f32 buffer, frame-major.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub sequences: Vec<Vec<f32>>,
    pub dim: usize,
    /// Normalization that has been applied to the stored values, if any.
    pub norm: Option<NormStats>,
    pub provenance: String,
}

impl Dataset {
    pub fn num_sequences(&self) -> usize {
        self.sequences.len()
    }

    pub fn seq_len(&self, i: usize) -> usize {
        self.sequences[i].len() / self.dim
    }

    pub fn frame(&self, i: usize, t: usize) -> &[f32] {
        &self.sequences[i][t * self.dim..(t + 1) * self.dim]
    }

    /// Per-dimension mean and standard deviation over every frame.
    pub fn normalization_stats(&self) -> NormStats {
        let d = self.dim;
        let mut mean = vec![0.0f64; d];
        let mut count = 0u64;
        for s in &self.sequences {
            for f in s.chunks_exact(d) {
                for (j, &v) in f.iter().enumerate() {
                    mean[j] += v as f64;
                }
                count += 1;
            }
        }
        for m in mean.iter_mut() {
            *m /= count.max(1) as f64;
        }
        let mut var = vec![0.0f64; d];
        for s in &self.sequences {
            for f in s.chunks_exact(d) {
                for (j, &v) in f.iter().enumerate() {
                    let c = v as f64 - mean[j];
                    var[j] += c * c;
                }
            }
        }
        let std = var
            .iter()
            .map(|v| (v / count.max(1) as f64).sqrt().max(1e-12))
            .collect();
        NormStats { mean, std }
    }

    /// Standardize every dimension to mean 0, std 1 over the corpus and
    /// record the stats used.
    pub fn normalize(&self) -> Dataset {
        let stats = self.normalization_stats();
        let d = self.dim;
        let sequences = self
            .sequences
            .iter()
            .map(|s| {
                s.iter()
                    .enumerate()
                    .map(|(i, &v)| ((v as f64 - stats.mean[i % d]) / stats.std[i % d]) as f32)
                    .collect()
            })
            .collect();
        Dataset {
            sequences,
            dim: d,
            norm: Some(stats),
            provenance: self.provenance.clone(),
        }
    }

    /// Undo [`Dataset::normalize`] on one frame.
    pub fn denormalize_frame(frame: &[f32], stats: &NormStats) -> Vec<f32> {
        frame
            .iter()
            .enumerate()
            .map(|(j, &v)| (v as f64 * stats.std[j] + stats.mean[j]) as f32)
            .collect()
    }
}

/// Simulate `num_sequences` sequences of `length` frames. Sequence `i` draws
/// from the substream `(seed, DATA, i)`, so the dataset is identical no
/// matter how simulation is scheduled.
pub fn sample_process(
    spec: &SyntheticProcessSpec,
    num_sequences: usize,
    length: usize,
    seed: u64,
) -> Result<Dataset> {
    spec.validate()?;
    let dyns = spec.dynamics()?;
    let d = spec.dim;
    let nregimes = dyns.len();

    let mut sequences = Vec::with_capacity(num_sequences);
    for i in 0..num_sequences {
        let mut rng = stream(seed, &[lane::DATA, i as u64]);
        let mut seq = Vec::with_capacity(length * d);

        let mut regime = if nregimes > 1 {
            ((rng.gen::<f64>() * nregimes as f64) as usize).min(nregimes - 1)
        } else {
            0
        };
        // x_0 from the start regime's stationary distribution.
        let w = DVector::from_fn(d, |_, _| normal(&mut rng));
        let mut x = &dyns[regime].mu + &dyns[regime].sigma_chol * w;
        seq.extend(x.iter().map(|&v| v as f32));

        for _ in 1..length {
            if nregimes > 1 && rng.gen::<f64>() < spec.switch_prob {
                // Move to a uniformly chosen other regime.
                let pick = ((rng.gen::<f64>() * (nregimes - 1) as f64) as usize)
                    .min(nregimes - 2);
                regime = if pick >= regime { pick + 1 } else { pick };
            }
            let dy = &dyns[regime];
            let w = DVector::from_fn(d, |_, _| normal(&mut rng));
            x = &dy.a * &x + &dy.b + &dy.l * w;
            seq.extend(x.iter().map(|&v| v as f32));
        }
        sequences.push(seq);
    }
    Ok(Dataset {
        sequences,
        dim: d,
        norm: None,
        provenance: format!("process:{:?}", spec.kind),
    })
}

/// Exact conditional moments of the next frame given a prefix.
///
/// For the AR(1) process this is `(A x_last + b, L L^T)`. For the switching
/// process the regime is forward-filtered over the prefix and the returned
/// moments are those of the resulting mixture over next-step regimes.
/// Covariance is returned row-major `dim * dim`.
pub fn oracle_conditional(
    spec: &SyntheticProcessSpec,
    prefix: &[f32],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = spec.dim;
    if prefix.is_empty() || !prefix.len().is_multiple_of(d) {
        return Err(CamError::InvalidConfig(format!(
            "oracle needs a non-empty prefix of whole {d}-dim frames, got {} values",
            prefix.len()
        )));
    }
    let dyns = spec.dynamics()?;
    let frames = prefix.len() / d;
    let frame =
        |t: usize| DVector::from_fn(d, |j, _| prefix[t * d + j] as f64);
    let x_last = frame(frames - 1);

    let beta = match spec.kind {
        ProcessKind::LinearGaussianAr1 => vec![1.0],
        ProcessKind::RegimeSwitching => {
            let r = dyns.len();
            let p = spec.switch_prob;
            let trans = |from: usize, to: usize| -> f64 {
                if from == to {
                    1.0 - p
                } else {
                    p / (r - 1) as f64
                }
            };
            // Forward filter in log space, renormalized each step.
            let x0 = frame(0);
            let mut log_alpha: Vec<f64> = dyns
                .iter()
                .map(|dy| {
                    -(r as f64).ln() + log_gaussian(&x0, &dy.mu, &dy.sigma_inv, dy.sigma_logdet)
                })
                .collect();
            for t in 1..frames {
                let xt = frame(t);
                let prev = frame(t - 1);
                let mut next = vec![0.0; r];
                for (to, dy) in dyns.iter().enumerate() {
                    let mean = &dy.a * &prev + &dy.b;
                    let like = log_gaussian(&xt, &mean, &dy.q_inv, dy.q_logdet);
                    let terms: Vec<f64> = (0..r)
                        .map(|from| log_alpha[from] + trans(from, to).ln())
                        .collect();
                    next[to] = like + log_sum_exp(&terms);
                }
                let z = log_sum_exp(&next);
                for v in next.iter_mut() {
                    *v -= z;
                }
                log_alpha = next;
            }
            let alpha: Vec<f64> = log_alpha.iter().map(|v| v.exp()).collect();
            // Distribution over the regime generating the NEXT frame.
            (0..r)
                .map(|to| (0..r).map(|from| alpha[from] * trans(from, to)).sum())
                .collect()
        }
    };

    // Mixture moments over next-step regimes.
    let mut mean = DVector::zeros(d);
    let means: Vec<DVector<f64>> = dyns.iter().map(|dy| &dy.a * &x_last + &dy.b).collect();
    for (w, m) in beta.iter().zip(means.iter()) {
        mean += m * *w;
    }
    let mut cov = DMatrix::zeros(d, d);
    for ((w, m), dy) in beta.iter().zip(means.iter()).zip(dyns.iter()) {
        let dm = m - &mean;
        cov += (&dy.q + dm.clone() * dm.transpose()) * *w;
    }

    Ok((mean.iter().cloned().collect(), row_major(&cov)))
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Crop every sequence to `length` frames at an independent uniform offset.
pub fn crop_random(dataset: &Dataset, length: usize, seed: u64) -> Result<Dataset> {
    let d = dataset.dim;
    let mut sequences = Vec::with_capacity(dataset.num_sequences());
    for i in 0..dataset.num_sequences() {
        let len = dataset.seq_len(i);
        if len < length {
            return Err(CamError::SequenceTooShort {
                index: i,
                len,
                crop: length,
            });
        }
        let mut rng = stream(seed, &[lane::CROP, i as u64]);
        let span = len - length + 1;
        let start = ((rng.gen::<f64>() * span as f64) as usize).min(span - 1);
        sequences.push(dataset.sequences[i][start * d..(start + length) * d].to_vec());
    }
    Ok(Dataset {
        sequences,
        dim: d,
        norm: dataset.norm.clone(),
        provenance: dataset.provenance.clone(),
    })
}

/// Assemble training batch number `step`: `batch_size` context windows at
/// uniform sequence indices and offsets.
pub fn sample_batch(
    dataset: &Dataset,
    batch_size: usize,
    context: usize,
    seed: u64,
    step: u64,
) -> Result<Batch> {
    let d = dataset.dim;
    let n = dataset.num_sequences();
    if n == 0 {
        return Err(CamError::InvalidConfig("empty dataset".into()));
    }
    let mut rng = stream(seed, &[lane::BATCH, step]);
    let mut data = Vec::with_capacity(batch_size * context * d);
    for _ in 0..batch_size {
        let i = ((rng.gen::<f64>() * n as f64) as usize).min(n - 1);
        let len = dataset.seq_len(i);
        if len < context {
            return Err(CamError::SequenceTooShort {
                index: i,
                len,
                crop: context,
            });
        }
        let span = len - context + 1;
        let start = ((rng.gen::<f64>() * span as f64) as usize).min(span - 1);
        data.extend_from_slice(&dataset.sequences[i][start * d..(start + context) * d]);
    }
    Ok(Batch::new(data, batch_size, context, d))
}

const EMBED_MAGIC: &[u8; 4] = b"CAME";
const EMBED_VERSION: u32 = 1;

/// Write a dataset in the embedding container format: magic "CAME",
/// version, dim, sequence count, then each sequence as a frame count plus
/// f32 little-endian data; trailing CRC32.
pub fn write_embeddings(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    assert!(dataset.dim > 0, "dataset dimension must be positive");
    let mut buf = Vec::new();
    buf.extend_from_slice(EMBED_MAGIC);
    buf.extend_from_slice(&EMBED_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dataset.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(dataset.num_sequences() as u32).to_le_bytes());
    for i in 0..dataset.num_sequences() {
        buf.extend_from_slice(&(dataset.seq_len(i) as u32).to_le_bytes());
        for &v in &dataset.sequences[i] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    seal_container(&mut buf);
    std::fs::write(path, &buf).map_err(|e| CamError::io(path, e))
}

/// Read a dataset written by [`write_embeddings`]. Round-trips bit-exactly.
pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| CamError::io(path, e))?;
    if bytes.len() < 8 || &bytes[..4] != EMBED_MAGIC {
        return Err(CamError::BadMagic {
            path: path.to_path_buf(),
            expected: "CAME",
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != EMBED_VERSION {
        return Err(CamError::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            supported: EMBED_VERSION,
        });
    }
    let body = check_container(&bytes, path, EMBED_MAGIC, "CAME")?;
    let mut r = ByteReader::new(body, 8, path);
    let dim = r.u32()? as usize;
    if dim == 0 {
        return Err(r.corrupt("dimension 0"));
    }
    let count = r.u32()? as usize;
    let mut sequences = Vec::with_capacity(count);
    for _ in 0..count {
        let frames = r.u32()? as usize;
        sequences.push(r.f32_slice(frames * dim)?);
    }
    if r.remaining() != 0 {
        return Err(r.corrupt("trailing bytes after last sequence"));
    }
    Ok(Dataset {
        sequences,
        dim,
        norm: None,
        provenance: path.display().to_string(),
    })
}
