//! Gaussian mixture head: per-position distribution over the next embedding.
//!
//! A single linear layer maps the backbone output to mode logits, means, and
//! raw standard deviations (diagonal covariance). Logits pass through a
//! softmax; raw deviations through softplus plus a small floor, which keeps
//! the likelihood bounded and gradients finite.

use crate::error::{CamError, Result};
use crate::graph::{BackwardFn, Graph, Var};
use crate::model::config::GmmHeadConfig;
use crate::model::linear_slices;
use crate::model::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use rand_chacha::ChaCha8Rng;

/// Floor added to every standard deviation after softplus.
pub const STD_FLOOR: f64 = 1e-4;

const LN_2PI: f64 = 1.837877066409345483560659472811;

/// One position's mixture: `weights` sum to one, `means`/`stds` are stored
/// mode-major with `num_modes * dim` entries each.
#[derive(Clone, Debug)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    pub means: Vec<f32>,
    pub stds: Vec<f32>,
    pub dim: usize,
}

impl GmmParams {
    pub fn num_modes(&self) -> usize {
        self.weights.len()
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable log-sum-exp over a non-empty slice.
fn lse(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Decode one raw head row `[logits | means | raw stds]` into mixture
/// parameters.
pub fn decode_raw(raw: &[f32], num_modes: usize, dim: usize) -> GmmParams {
    assert_eq!(raw.len(), num_modes * (1 + 2 * dim));
    let logits: Vec<f64> = raw[..num_modes].iter().map(|&v| v as f64).collect();
    let z = lse(&logits);
    let weights: Vec<f64> = logits.iter().map(|l| (l - z).exp()).collect();
    let means = raw[num_modes..num_modes + num_modes * dim].to_vec();
    let stds = raw[num_modes + num_modes * dim..]
        .iter()
        .map(|&v| (softplus(v as f64) + STD_FLOOR) as f32)
        .collect();
    GmmParams {
        weights,
        means,
        stds,
        dim,
    }
}

/// Raw head outputs for a batch of backbone rows: (n, K + 2·K·d).
pub fn gmm_head_rows(
    params: &ParamStore<f32>,
    cfg: &GmmHeadConfig,
    z: &[f32],
    n: usize,
) -> Vec<f32> {
    let out_dim = cfg.num_modes * (1 + 2 * cfg.output_dim);
    let mut out = vec![0.0f32; n * out_dim];
    linear_slices(
        z,
        n,
        params.get("gmm.head.w").data(),
        out_dim,
        cfg.input_dim,
        Some(params.get("gmm.head.b").data()),
        &mut out,
    );
    out
}

/// Mixture parameters for a single backbone output.
pub fn gmm_head_forward(
    params: &ParamStore<f32>,
    cfg: &GmmHeadConfig,
    z: &[f32],
) -> Result<GmmParams> {
    if z.len() != cfg.input_dim {
        return Err(CamError::DimensionMismatch {
            context: "gmm_head_forward z",
            expected: cfg.input_dim,
            got: z.len(),
        });
    }
    let raw = gmm_head_rows(params, cfg, z, 1);
    Ok(decode_raw(&raw, cfg.num_modes, cfg.output_dim))
}

/// Log-density of `x` under the mixture, computed in f64 with log-sum-exp.
pub fn gmm_log_prob(gmm: &GmmParams, x: &[f32]) -> f64 {
    assert_eq!(x.len(), gmm.dim);
    let d = gmm.dim;
    let terms: Vec<f64> = (0..gmm.num_modes())
        .map(|k| {
            let mut lp = gmm.weights[k].max(f64::MIN_POSITIVE).ln() - 0.5 * d as f64 * LN_2PI;
            for (j, &xj) in x.iter().enumerate() {
                let s = gmm.stds[k * d + j] as f64;
                let r = (xj as f64 - gmm.means[k * d + j] as f64) / s;
                lp -= 0.5 * r * r + s.ln();
            }
            lp
        })
        .collect();
    lse(&terms)
}

/// Draw one embedding: pick a mode by weight, then sample each coordinate
/// from a normal with the mode's mean and `temperature`-scaled deviation.
pub fn gmm_sample(gmm: &GmmParams, temperature: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    use rand::Rng;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut mode = gmm.num_modes() - 1;
    for (k, w) in gmm.weights.iter().enumerate() {
        acc += w;
        if u < acc {
            mode = k;
            break;
        }
    }
    let d = gmm.dim;
    (0..d)
        .map(|j| {
            let n = crate::rng::normal(rng);
            let s = gmm.stds[mode * d + j] as f64 * temperature;
            (gmm.means[mode * d + j] as f64 + s * n) as f32
        })
        .collect()
}

/// Tape op: per-row negative log-likelihood of `targets` under the mixtures
/// decoded from `raw` (n, K + 2·K·d). Returns an (n, 1) column.
///
/// Gradients flow to `raw` only; the targets are constants. Backward uses
/// the responsibility-weighted closed form.
pub fn gmm_nll_op<T: Scalar>(
    g: &mut Graph<T>,
    raw: Var,
    targets: &Tensor<T>,
    num_modes: usize,
    dim: usize,
) -> Var {
    let rawv = g.value(raw).clone();
    let n = rawv.rows();
    let width = num_modes * (1 + 2 * dim);
    assert_eq!(rawv.cols(), width, "gmm raw width");
    assert_eq!(targets.rows(), n, "gmm target rows");
    assert_eq!(targets.cols(), dim, "gmm target dim");

    // Forward in f64: per row, t_k = log softmax(logits)_k + log N_k(x).
    let mut nll = Vec::with_capacity(n);
    let mut row_terms: Vec<Vec<f64>> = Vec::with_capacity(n);
    for r in 0..n {
        let row = &rawv.data()[r * width..(r + 1) * width];
        let x = &targets.data()[r * dim..(r + 1) * dim];
        let logits: Vec<f64> = row[..num_modes].iter().map(|&v| v.to_f64()).collect();
        let zl = lse(&logits);
        let terms: Vec<f64> = (0..num_modes)
            .map(|k| {
                let mut t = logits[k] - zl - 0.5 * dim as f64 * LN_2PI;
                for j in 0..dim {
                    let mu = row[num_modes + k * dim + j].to_f64();
                    let s = softplus(row[num_modes + num_modes * dim + k * dim + j].to_f64())
                        + STD_FLOOR;
                    let rr = (x[j].to_f64() - mu) / s;
                    t -= 0.5 * rr * rr + s.ln();
                }
                t
            })
            .collect();
        nll.push(T::from_f64(-lse(&terms)));
        row_terms.push(terms);
    }
    let value = Tensor::from_vec(&[n, 1], nll);

    let targets_c = targets.clone();
    let backward: BackwardFn<T> = Box::new(move |up: &Tensor<T>| {
        let mut grad = vec![T::zero(); n * width];
        for r in 0..n {
            let go = up.data()[r].to_f64();
            let row = &rawv.data()[r * width..(r + 1) * width];
            let x = &targets_c.data()[r * dim..(r + 1) * dim];
            let terms = &row_terms[r];
            let zt = lse(terms);
            // Responsibilities and mixture weights.
            let resp: Vec<f64> = terms.iter().map(|t| (t - zt).exp()).collect();
            let logits: Vec<f64> = row[..num_modes].iter().map(|&v| v.to_f64()).collect();
            let zl = lse(&logits);
            let out = &mut grad[r * width..(r + 1) * width];
            for k in 0..num_modes {
                let w = (logits[k] - zl).exp();
                // d NLL / d logit_k = w_k - resp_k.
                out[k] = T::from_f64(go * (w - resp[k]));
                for j in 0..dim {
                    let a = row[num_modes + num_modes * dim + k * dim + j].to_f64();
                    let s = softplus(a) + STD_FLOOR;
                    let mu = row[num_modes + k * dim + j].to_f64();
                    let diff = x[j].to_f64() - mu;
                    // d NLL / d mu = -resp * diff / s^2.
                    out[num_modes + k * dim + j] = T::from_f64(go * (-resp[k] * diff / (s * s)));
                    // d NLL / d s = -resp * (diff^2/s^3 - 1/s); chain softplus.
                    let ds = -resp[k] * (diff * diff / (s * s * s) - 1.0 / s);
                    let sig = 1.0 / (1.0 + (-a).exp());
                    out[num_modes + num_modes * dim + k * dim + j] = T::from_f64(go * ds * sig);
                }
            }
        }
        vec![Some(Tensor::from_vec(&[n, width], grad))]
    });
    g.custom(value, &[raw], Some(backward))
}
