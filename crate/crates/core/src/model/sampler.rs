//! Flow sampler head: an MLP that maps (z, corrupted y, sigma) to a drift.
//!
//! Conditioning follows the adaptive-norm diffusion convention: sigma is
//! embedded sinusoidally, passed through a two-layer MLP, and projected per
//! block into (scale, shift, gate) applied around a non-affine layer norm.
//! The modulation projections start at zero, so at initialization every
//! block is the identity.

use crate::error::{CamError, Result};
use crate::graph::{Graph, Var};
use crate::math::NoiseLevel;
use crate::model::config::{sigma_embed_dim, SamplerConfig};
use crate::model::linear_slices;
use crate::model::params::{BoundParams, ParamStore};
use crate::tensor::{layer_norm_rows, silu, Scalar, Tensor};

const LN_EPS: f64 = 1e-6;

/// Scale applied to sigma before the sinusoidal embedding, spreading the
/// unit interval across the frequency bands.
const SIGMA_TIME_SCALE: f64 = 1000.0;

/// Sinusoidal features of a corruption time: `dim/2` sine and `dim/2`
/// cosine channels at geometrically spaced frequencies.
pub fn sigma_features<T: Scalar>(sigma: f64, dim: usize) -> Vec<T> {
    assert!(dim >= 2 && dim.is_multiple_of(2), "sigma embedding dim must be even");
    let half = dim / 2;
    let t = sigma * SIGMA_TIME_SCALE;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10_000.0f64).ln() * i as f64 / half as f64).exp();
        out.push(T::from_f64((t * freq).sin()));
    }
    for i in 0..half {
        let freq = (-(10_000.0f64).ln() * i as f64 / half as f64).exp();
        out.push(T::from_f64((t * freq).cos()));
    }
    out
}

/// Batched feature rows for per-row sigmas.
pub fn sigma_feature_rows<T: Scalar>(sigmas: &[f64], dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(sigmas.len() * dim);
    for &s in sigmas {
        data.extend(sigma_features::<T>(s, dim));
    }
    Tensor::from_vec(&[sigmas.len(), dim], data)
}

/// Tape forward: `z` (n, backbone dim), `y` (n, d), `sig_feats` (n, E)
/// from [`sigma_feature_rows`]. Returns drift predictions (n, d).
pub fn sampler_graph<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &SamplerConfig,
    z: Var,
    y: Var,
    sig_feats: Var,
) -> Var {
    let e = g.linear(sig_feats, p.var("sampler.sigma_mlp.fc1.w"), p.var("sampler.sigma_mlp.fc1.b"));
    let e = g.silu(e);
    let e = g.linear(e, p.var("sampler.sigma_mlp.fc2.w"), p.var("sampler.sigma_mlp.fc2.b"));

    let zy = g.concat_cols(z, y);
    let mut h = g.linear(zy, p.var("sampler.input_proj.w"), p.var("sampler.input_proj.b"));
    let sd = cfg.model_dim;
    for i in 0..cfg.num_layers {
        let l = format!("sampler.block{i:02}");
        let m3 = g.linear(e, p.var(&format!("{l}.mod.w")), p.var(&format!("{l}.mod.b")));
        let scale = g.slice_cols(m3, 0, sd);
        let shift = g.slice_cols(m3, sd, 2 * sd);
        let gate = g.slice_cols(m3, 2 * sd, 3 * sd);
        let u = g.layer_norm(h, LN_EPS);
        let sc1 = g.add_scalar(scale, T::one());
        let u = g.mul(u, sc1);
        let u = g.add(u, shift);
        let m = g.linear(u, p.var(&format!("{l}.mlp.fc1.w")), p.var(&format!("{l}.mlp.fc1.b")));
        let m = g.silu(m);
        let m = g.linear(m, p.var(&format!("{l}.mlp.fc2.w")), p.var(&format!("{l}.mlp.fc2.b")));
        let gm = g.mul(gate, m);
        h = g.add(h, gm);
    }
    let fm = g.linear(e, p.var("sampler.final_mod.w"), p.var("sampler.final_mod.b"));
    let fscale = g.slice_cols(fm, 0, sd);
    let fshift = g.slice_cols(fm, sd, 2 * sd);
    let u = g.layer_norm(h, LN_EPS);
    let fs1 = g.add_scalar(fscale, T::one());
    let u = g.mul(u, fs1);
    let u = g.add(u, fshift);
    g.linear(u, p.var("sampler.out.w"), p.var("sampler.out.b"))
}

/// Plain batched forward on raw rows; mirrors [`sampler_graph`] kernel for
/// kernel. `z` (n, zdim), `y` (n, d), one sigma per row.
pub fn sampler_forward_rows(
    params: &ParamStore<f32>,
    cfg: &SamplerConfig,
    z: &[f32],
    zdim: usize,
    y: &[f32],
    sigmas: &[f64],
) -> Vec<f32> {
    let n = sigmas.len();
    let d = cfg.input_dim;
    let sd = cfg.model_dim;
    let e_dim = sigma_embed_dim(sd);
    assert_eq!(z.len(), n * zdim);
    assert_eq!(y.len(), n * d);

    let feats = sigma_feature_rows::<f32>(sigmas, e_dim);
    let mut e1 = vec![0.0f32; n * e_dim];
    linear_slices(
        feats.data(),
        n,
        params.get("sampler.sigma_mlp.fc1.w").data(),
        e_dim,
        e_dim,
        Some(params.get("sampler.sigma_mlp.fc1.b").data()),
        &mut e1,
    );
    for v in &mut e1 {
        *v = silu(*v);
    }
    let mut e = vec![0.0f32; n * e_dim];
    linear_slices(
        &e1,
        n,
        params.get("sampler.sigma_mlp.fc2.w").data(),
        e_dim,
        e_dim,
        Some(params.get("sampler.sigma_mlp.fc2.b").data()),
        &mut e,
    );

    let mut zy = vec![0.0f32; n * (zdim + d)];
    for r in 0..n {
        zy[r * (zdim + d)..r * (zdim + d) + zdim].copy_from_slice(&z[r * zdim..(r + 1) * zdim]);
        zy[r * (zdim + d) + zdim..(r + 1) * (zdim + d)].copy_from_slice(&y[r * d..(r + 1) * d]);
    }
    let mut h = vec![0.0f32; n * sd];
    linear_slices(
        &zy,
        n,
        params.get("sampler.input_proj.w").data(),
        sd,
        zdim + d,
        Some(params.get("sampler.input_proj.b").data()),
        &mut h,
    );

    let mut u = vec![0.0f32; n * sd];
    let mut m3 = vec![0.0f32; n * 3 * sd];
    for i in 0..cfg.num_layers {
        let l = format!("sampler.block{i:02}");
        linear_slices(
            &e,
            n,
            params.get(&format!("{l}.mod.w")).data(),
            3 * sd,
            e_dim,
            Some(params.get(&format!("{l}.mod.b")).data()),
            &mut m3,
        );
        layer_norm_rows(&h, n, sd, None, None, LN_EPS as f32, &mut u, None);
        for r in 0..n {
            for j in 0..sd {
                let scale = m3[r * 3 * sd + j];
                let shift = m3[r * 3 * sd + sd + j];
                u[r * sd + j] = u[r * sd + j] * (1.0 + scale) + shift;
            }
        }
        let mut m1 = vec![0.0f32; n * cfg.mlp_mult * sd];
        linear_slices(
            &u,
            n,
            params.get(&format!("{l}.mlp.fc1.w")).data(),
            cfg.mlp_mult * sd,
            sd,
            Some(params.get(&format!("{l}.mlp.fc1.b")).data()),
            &mut m1,
        );
        for v in &mut m1 {
            *v = silu(*v);
        }
        let mut m2 = vec![0.0f32; n * sd];
        linear_slices(
            &m1,
            n,
            params.get(&format!("{l}.mlp.fc2.w")).data(),
            sd,
            cfg.mlp_mult * sd,
            Some(params.get(&format!("{l}.mlp.fc2.b")).data()),
            &mut m2,
        );
        for r in 0..n {
            for j in 0..sd {
                let gate = m3[r * 3 * sd + 2 * sd + j];
                h[r * sd + j] += gate * m2[r * sd + j];
            }
        }
    }
    let mut fm = vec![0.0f32; n * 2 * sd];
    linear_slices(
        &e,
        n,
        params.get("sampler.final_mod.w").data(),
        2 * sd,
        e_dim,
        Some(params.get("sampler.final_mod.b").data()),
        &mut fm,
    );
    layer_norm_rows(&h, n, sd, None, None, LN_EPS as f32, &mut u, None);
    for r in 0..n {
        for j in 0..sd {
            u[r * sd + j] = u[r * sd + j] * (1.0 + fm[r * 2 * sd + j]) + fm[r * 2 * sd + sd + j];
        }
    }
    let mut out = vec![0.0f32; n * d];
    linear_slices(
        &u,
        n,
        params.get("sampler.out.w").data(),
        d,
        sd,
        Some(params.get("sampler.out.b").data()),
        &mut out,
    );
    out
}

/// Single-input drift prediction.
pub fn sampler_forward(
    params: &ParamStore<f32>,
    cfg: &SamplerConfig,
    y: &[f32],
    sigma: NoiseLevel,
    z: &[f32],
) -> Result<Vec<f32>> {
    if y.len() != cfg.input_dim {
        return Err(CamError::DimensionMismatch {
            context: "sampler_forward y",
            expected: cfg.input_dim,
            got: y.len(),
        });
    }
    Ok(sampler_forward_rows(
        params,
        cfg,
        z,
        z.len(),
        y,
        &[sigma.value()],
    ))
}
