//! Pre-LN causal transformer backbone with learned absolute positions.
//!
//! Shift-by-one convention: the output at input position t is the
//! conditioning vector for predicting position t+1; the conditioning vector
//! for position 0 is the learned `z_sos` parameter, which never passes
//! through the transformer. The empty prefix therefore yields `[z_sos]`.

use crate::error::{CamError, Result};
use crate::graph::{Graph, Var};
use crate::model::config::BackboneConfig;
use crate::model::linear_slices;
use crate::model::params::{BoundParams, ParamStore};
use crate::tensor::{layer_norm_rows, silu, softmax_prefix, Scalar, Tensor};

const LN_EPS: f64 = 1e-6;

/// Multi-head causal attention on packed per-sequence buffers.
///
/// `q` is (n_new, dim) for the suffix being processed, `k`/`v` are
/// (len, dim) for the whole prefix including the suffix, and query row i
/// attends to keys `0..=past+i` where `past = len - n_new`. `save_probs`,
/// when given, receives the softmax matrix per head, (heads, n_new, len).
#[allow(clippy::too_many_arguments)]
fn attn_heads<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    n_new: usize,
    len: usize,
    dim: usize,
    heads: usize,
    out: &mut [T],
    mut save_probs: Option<&mut [T]>,
) {
    let past = len - n_new;
    let hd = dim / heads;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut scores = vec![T::zero(); n_new * len];
    for h in 0..heads {
        let off = h * hd;
        // scores = Q_h K_h^T / sqrt(hd): strided views into the packed
        // buffers, no copies.
        T::gemm(
            n_new,
            hd,
            len,
            scale,
            &q[off..],
            dim as isize,
            1,
            &k[off..],
            1,
            dim as isize,
            T::zero(),
            &mut scores,
            len as isize,
            1,
        );
        for i in 0..n_new {
            softmax_prefix(&mut scores[i * len..(i + 1) * len], past + i + 1);
        }
        if let Some(buf) = save_probs.as_mut() {
            buf[h * n_new * len..(h + 1) * n_new * len].copy_from_slice(&scores);
        }
        T::gemm(
            n_new,
            len,
            hd,
            T::one(),
            &scores,
            len as isize,
            1,
            &v[off..],
            dim as isize,
            1,
            T::zero(),
            &mut out[off..],
            dim as isize,
            1,
        );
    }
}

/// Split a (rows, 3*dim) qkv buffer into packed (rows, dim) q, k, v.
fn split_qkv<T: Scalar>(qkv: &[T], rows: usize, dim: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut q = vec![T::zero(); rows * dim];
    let mut k = vec![T::zero(); rows * dim];
    let mut v = vec![T::zero(); rows * dim];
    for r in 0..rows {
        let src = &qkv[r * 3 * dim..(r + 1) * 3 * dim];
        q[r * dim..(r + 1) * dim].copy_from_slice(&src[..dim]);
        k[r * dim..(r + 1) * dim].copy_from_slice(&src[dim..2 * dim]);
        v[r * dim..(r + 1) * dim].copy_from_slice(&src[2 * dim..]);
    }
    (q, k, v)
}

/// Batched causal self-attention as a tape op: `qkv` is (batch*time, 3*dim),
/// sequences are independent, output is (batch*time, dim).
pub fn causal_attention_op<T: Scalar>(
    g: &mut Graph<T>,
    qkv: Var,
    batch: usize,
    time: usize,
    heads: usize,
) -> Var {
    let qkv_t = g.value(qkv).clone();
    let dim3 = qkv_t.cols();
    assert_eq!(dim3 % 3, 0);
    let dim = dim3 / 3;
    assert_eq!(qkv_t.rows(), batch * time);
    let hd = dim / heads;

    let mut out = vec![T::zero(); batch * time * dim];
    let mut probs = vec![T::zero(); batch * heads * time * time];
    for b in 0..batch {
        let rows = &qkv_t.data()[b * time * 3 * dim..(b + 1) * time * 3 * dim];
        let (q, k, v) = split_qkv(rows, time, dim);
        attn_heads(
            &q,
            &k,
            &v,
            time,
            time,
            dim,
            heads,
            &mut out[b * time * dim..(b + 1) * time * dim],
            Some(&mut probs[b * heads * time * time..(b + 1) * heads * time * time]),
        );
    }
    let probs = std::sync::Arc::new(probs);
    let out = Tensor::from_vec(&[batch * time, dim], out);

    g.custom(
        out,
        &[qkv],
        Some(Box::new(move |grad| {
            let scale = T::from_f64(1.0 / (hd as f64).sqrt());
            let mut dqkv = vec![T::zero(); batch * time * 3 * dim];
            let mut dscores = vec![T::zero(); time * time];
            let mut dp = vec![T::zero(); time * time];
            for b in 0..batch {
                let rows = &qkv_t.data()[b * time * 3 * dim..(b + 1) * time * 3 * dim];
                let (q, k, v) = split_qkv(rows, time, dim);
                let gout = &grad.data()[b * time * dim..(b + 1) * time * dim];
                for h in 0..heads {
                    let off = h * hd;
                    let p = &probs[(b * heads + h) * time * time..(b * heads + h + 1) * time * time];
                    // dV_h = P^T g_h
                    T::gemm(
                        time, time, hd, T::one(),
                        p, 1, time as isize,
                        &gout[off..], dim as isize, 1,
                        T::zero(),
                        &mut dqkv[b * time * 3 * dim + 2 * dim + off..], 3 * dim as isize, 1,
                    );
                    // dP = g_h V_h^T
                    T::gemm(
                        time, hd, time, T::one(),
                        &gout[off..], dim as isize, 1,
                        &v[off..], 1, dim as isize,
                        T::zero(), &mut dp, time as isize, 1,
                    );
                    // Softmax backward per row; masked entries have p = 0.
                    for i in 0..time {
                        let prow = &p[i * time..(i + 1) * time];
                        let dprow = &dp[i * time..(i + 1) * time];
                        let mut dot = T::zero();
                        for j in 0..time {
                            dot = dot + prow[j] * dprow[j];
                        }
                        for j in 0..time {
                            dscores[i * time + j] = prow[j] * (dprow[j] - dot);
                        }
                    }
                    // dQ_h = dS K_h * scale ; dK_h = dS^T Q_h * scale
                    T::gemm(
                        time, time, hd, scale,
                        &dscores, time as isize, 1,
                        &k[off..], dim as isize, 1,
                        T::zero(),
                        &mut dqkv[b * time * 3 * dim + off..], 3 * dim as isize, 1,
                    );
                    T::gemm(
                        time, time, hd, scale,
                        &dscores, 1, time as isize,
                        &q[off..], dim as isize, 1,
                        T::zero(),
                        &mut dqkv[b * time * 3 * dim + dim + off..], 3 * dim as isize, 1,
                    );
                }
            }
            vec![Some(Tensor::from_vec(&[batch * time, 3 * dim], dqkv))]
        })),
    )
}

/// Tape forward over a batch of equal-length sequences. `x` is
/// (batch*time, input_dim); returns raw transformer outputs
/// (batch*time, model_dim), before any shift.
pub fn backbone_graph<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &BackboneConfig,
    x: Var,
    batch: usize,
    time: usize,
) -> Var {
    assert!(time <= cfg.max_context, "sequence exceeds max context");
    let w_in = p.var("backbone.input_proj.w");
    let b_in = p.var("backbone.input_proj.b");
    let mut h = g.linear(x, w_in, b_in);
    let pos_all = p.var("backbone.pos_emb");
    let pos = if time == cfg.max_context {
        pos_all
    } else {
        g.slice_rows(pos_all, 0, time)
    };
    h = g.add_tiled(h, pos, batch);
    for i in 0..cfg.num_layers {
        let l = format!("backbone.layer{i:02}");
        let u = g.layer_norm_affine(h, p.var(&format!("{l}.ln1.g")), p.var(&format!("{l}.ln1.b")), LN_EPS);
        let qkv = g.linear(u, p.var(&format!("{l}.attn.qkv.w")), p.var(&format!("{l}.attn.qkv.b")));
        let a = causal_attention_op(g, qkv, batch, time, cfg.num_heads);
        let a = g.linear(a, p.var(&format!("{l}.attn.out.w")), p.var(&format!("{l}.attn.out.b")));
        h = g.add(h, a);
        let u2 = g.layer_norm_affine(h, p.var(&format!("{l}.ln2.g")), p.var(&format!("{l}.ln2.b")), LN_EPS);
        let m = g.linear(u2, p.var(&format!("{l}.mlp.fc1.w")), p.var(&format!("{l}.mlp.fc1.b")));
        let m = g.silu(m);
        let m = g.linear(m, p.var(&format!("{l}.mlp.fc2.w")), p.var(&format!("{l}.mlp.fc2.b")));
        h = g.add(h, m);
    }
    g.layer_norm_affine(
        h,
        p.var("backbone.final_ln.g"),
        p.var("backbone.final_ln.b"),
        LN_EPS,
    )
}

/// Per-layer cached keys/values for incremental decoding. Single-owner; one
/// generation session per cache.
#[derive(Clone, Debug)]
pub struct KVCache {
    num_layers: usize,
    model_dim: usize,
    max_context: usize,
    /// Packed (len, model_dim) per layer, keys then values.
    k: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    len: usize,
}

impl KVCache {
    pub fn new(cfg: &BackboneConfig) -> Self {
        KVCache {
            num_layers: cfg.num_layers,
            model_dim: cfg.model_dim,
            max_context: cfg.max_context,
            k: vec![Vec::new(); cfg.num_layers],
            v: vec![Vec::new(); cfg.num_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn clear(&mut self) {
        for k in &mut self.k {
            k.clear();
        }
        for v in &mut self.v {
            v.clear();
        }
        self.len = 0;
    }

    fn check(&self, cfg: &BackboneConfig) -> Result<()> {
        if self.num_layers != cfg.num_layers
            || self.model_dim != cfg.model_dim
            || self.max_context != cfg.max_context
        {
            return Err(CamError::CacheMismatch(format!(
                "cache built for {} layers / dim {} / context {}, model has {} / {} / {}",
                self.num_layers,
                self.model_dim,
                self.max_context,
                cfg.num_layers,
                cfg.model_dim,
                cfg.max_context
            )));
        }
        Ok(())
    }
}

/// Plain forward over whole sequences, no cache: `inputs` is
/// (batch*time, input_dim) row-major, output (batch*time, model_dim).
/// This is the reference path the cached one is tested against.
pub fn forward_batch<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &BackboneConfig,
    inputs: &[T],
    batch: usize,
    time: usize,
) -> Result<Vec<T>> {
    if time > cfg.max_context {
        return Err(CamError::ContextOverflow {
            len: time,
            max: cfg.max_context,
        });
    }
    let dim = cfg.model_dim;
    let rows = batch * time;
    assert_eq!(inputs.len(), rows * cfg.input_dim);

    let mut h = vec![T::zero(); rows * dim];
    linear_slices(
        inputs,
        rows,
        params.get("backbone.input_proj.w").data(),
        dim,
        cfg.input_dim,
        Some(params.get("backbone.input_proj.b").data()),
        &mut h,
    );
    let pos = params.get("backbone.pos_emb");
    for b in 0..batch {
        for t in 0..time {
            let o = (b * time + t) * dim;
            for j in 0..dim {
                h[o + j] = h[o + j] + pos.data()[t * dim + j];
            }
        }
    }

    let mut u = vec![T::zero(); rows * dim];
    let mut qkv = vec![T::zero(); rows * 3 * dim];
    let mut attn = vec![T::zero(); rows * dim];
    let mut proj = vec![T::zero(); rows * dim];
    for i in 0..cfg.num_layers {
        let l = format!("backbone.layer{i:02}");
        layer_norm_rows(
            &h,
            rows,
            dim,
            Some(params.get(&format!("{l}.ln1.g")).data()),
            Some(params.get(&format!("{l}.ln1.b")).data()),
            T::from_f64(LN_EPS),
            &mut u,
            None,
        );
        linear_slices(
            &u,
            rows,
            params.get(&format!("{l}.attn.qkv.w")).data(),
            3 * dim,
            dim,
            Some(params.get(&format!("{l}.attn.qkv.b")).data()),
            &mut qkv,
        );
        for b in 0..batch {
            let (q, k, v) = split_qkv(&qkv[b * time * 3 * dim..(b + 1) * time * 3 * dim], time, dim);
            attn_heads(
                &q,
                &k,
                &v,
                time,
                time,
                dim,
                cfg.num_heads,
                &mut attn[b * time * dim..(b + 1) * time * dim],
                None,
            );
        }
        linear_slices(
            &attn,
            rows,
            params.get(&format!("{l}.attn.out.w")).data(),
            dim,
            dim,
            Some(params.get(&format!("{l}.attn.out.b")).data()),
            &mut proj,
        );
        for (hv, pv) in h.iter_mut().zip(proj.iter()) {
            *hv = *hv + *pv;
        }
        layer_norm_rows(
            &h,
            rows,
            dim,
            Some(params.get(&format!("{l}.ln2.g")).data()),
            Some(params.get(&format!("{l}.ln2.b")).data()),
            T::from_f64(LN_EPS),
            &mut u,
            None,
        );
        let mut m1 = vec![T::zero(); rows * cfg.mlp_mult * dim];
        linear_slices(
            &u,
            rows,
            params.get(&format!("{l}.mlp.fc1.w")).data(),
            cfg.mlp_mult * dim,
            dim,
            Some(params.get(&format!("{l}.mlp.fc1.b")).data()),
            &mut m1,
        );
        for v in &mut m1 {
            *v = silu(*v);
        }
        linear_slices(
            &m1,
            rows,
            params.get(&format!("{l}.mlp.fc2.w")).data(),
            dim,
            cfg.mlp_mult * dim,
            Some(params.get(&format!("{l}.mlp.fc2.b")).data()),
            &mut proj,
        );
        for (hv, pv) in h.iter_mut().zip(proj.iter()) {
            *hv = *hv + *pv;
        }
    }
    let mut out = vec![T::zero(); rows * dim];
    layer_norm_rows(
        &h,
        rows,
        dim,
        Some(params.get("backbone.final_ln.g").data()),
        Some(params.get("backbone.final_ln.b").data()),
        T::from_f64(LN_EPS),
        &mut out,
        None,
    );
    Ok(out)
}

/// Incremental forward: one new token per cache, all caches at the same
/// position (lockstep batch). Appends to the caches and returns the
/// (num_traces, model_dim) outputs for the new tokens.
pub fn forward_step_cached(
    params: &ParamStore<f32>,
    cfg: &BackboneConfig,
    tokens: &[f32],
    caches: &mut [KVCache],
) -> Result<Vec<f32>> {
    let n = caches.len();
    assert_eq!(tokens.len(), n * cfg.input_dim);
    let dim = cfg.model_dim;
    let past = caches[0].len;
    for c in caches.iter() {
        c.check(cfg)?;
        if c.len != past {
            return Err(CamError::CacheMismatch(
                "lockstep caches have unequal lengths".into(),
            ));
        }
    }
    if past + 1 > cfg.max_context {
        return Err(CamError::ContextOverflow {
            len: past + 1,
            max: cfg.max_context,
        });
    }

    let mut h = vec![0.0f32; n * dim];
    linear_slices(
        tokens,
        n,
        params.get("backbone.input_proj.w").data(),
        dim,
        cfg.input_dim,
        Some(params.get("backbone.input_proj.b").data()),
        &mut h,
    );
    let pos = params.get("backbone.pos_emb");
    for r in 0..n {
        for j in 0..dim {
            h[r * dim + j] += pos.data()[past * dim + j];
        }
    }

    let mut u = vec![0.0f32; n * dim];
    let mut qkv = vec![0.0f32; n * 3 * dim];
    let mut attn = vec![0.0f32; n * dim];
    let mut proj = vec![0.0f32; n * dim];
    for i in 0..cfg.num_layers {
        let l = format!("backbone.layer{i:02}");
        layer_norm_rows(
            &h,
            n,
            dim,
            Some(params.get(&format!("{l}.ln1.g")).data()),
            Some(params.get(&format!("{l}.ln1.b")).data()),
            LN_EPS as f32,
            &mut u,
            None,
        );
        linear_slices(
            &u,
            n,
            params.get(&format!("{l}.attn.qkv.w")).data(),
            3 * dim,
            dim,
            Some(params.get(&format!("{l}.attn.qkv.b")).data()),
            &mut qkv,
        );
        for (r, cache) in caches.iter_mut().enumerate() {
            let row = &qkv[r * 3 * dim..(r + 1) * 3 * dim];
            cache.k[i].extend_from_slice(&row[dim..2 * dim]);
            cache.v[i].extend_from_slice(&row[2 * dim..]);
            attn_heads(
                &row[..dim],
                &cache.k[i],
                &cache.v[i],
                1,
                past + 1,
                dim,
                cfg.num_heads,
                &mut attn[r * dim..(r + 1) * dim],
                None,
            );
        }
        linear_slices(
            &attn,
            n,
            params.get(&format!("{l}.attn.out.w")).data(),
            dim,
            dim,
            Some(params.get(&format!("{l}.attn.out.b")).data()),
            &mut proj,
        );
        for (hv, pv) in h.iter_mut().zip(proj.iter()) {
            *hv += *pv;
        }
        layer_norm_rows(
            &h,
            n,
            dim,
            Some(params.get(&format!("{l}.ln2.g")).data()),
            Some(params.get(&format!("{l}.ln2.b")).data()),
            LN_EPS as f32,
            &mut u,
            None,
        );
        let mut m1 = vec![0.0f32; n * cfg.mlp_mult * dim];
        linear_slices(
            &u,
            n,
            params.get(&format!("{l}.mlp.fc1.w")).data(),
            cfg.mlp_mult * dim,
            dim,
            Some(params.get(&format!("{l}.mlp.fc1.b")).data()),
            &mut m1,
        );
        for v in &mut m1 {
            *v = silu(*v);
        }
        linear_slices(
            &m1,
            n,
            params.get(&format!("{l}.mlp.fc2.w")).data(),
            dim,
            cfg.mlp_mult * dim,
            Some(params.get(&format!("{l}.mlp.fc2.b")).data()),
            &mut proj,
        );
        for (hv, pv) in h.iter_mut().zip(proj.iter()) {
            *hv += *pv;
        }
    }
    for cache in caches.iter_mut() {
        cache.len += 1;
    }
    let mut out = vec![0.0f32; n * dim];
    layer_norm_rows(
        &h,
        n,
        dim,
        Some(params.get("backbone.final_ln.g").data()),
        Some(params.get("backbone.final_ln.b").data()),
        LN_EPS as f32,
        &mut out,
        None,
    );
    Ok(out)
}

/// Sequence-of-embeddings convenience wrapper: returns one output per input
/// token (each conditions the following position), or `[z_sos]` for an
/// empty fresh prefix. With a cache, `inputs` are only the new suffix.
pub fn backbone_forward(
    params: &ParamStore<f32>,
    cfg: &BackboneConfig,
    inputs: &[Vec<f32>],
    cache: Option<&mut KVCache>,
) -> Result<Vec<Vec<f32>>> {
    for (i, frame) in inputs.iter().enumerate() {
        if frame.len() != cfg.input_dim {
            return Err(CamError::DimensionMismatch {
                context: "backbone_forward input",
                expected: cfg.input_dim,
                got: inputs[i].len(),
            });
        }
    }
    let dim = cfg.model_dim;
    match cache {
        None => {
            if inputs.is_empty() {
                return Ok(vec![params.get("z_sos").data().to_vec()]);
            }
            let flat: Vec<f32> = inputs.iter().flatten().copied().collect();
            let out = forward_batch(params, cfg, &flat, 1, inputs.len())?;
            Ok(out.chunks(dim).map(|c| c.to_vec()).collect())
        }
        Some(cache) => {
            cache.check(cfg)?;
            if inputs.is_empty() {
                if cache.is_empty() {
                    return Ok(vec![params.get("z_sos").data().to_vec()]);
                }
                return Ok(Vec::new());
            }
            let mut outs = Vec::with_capacity(inputs.len());
            let caches = std::slice::from_mut(cache);
            for frame in inputs {
                let out = forward_step_cached(params, cfg, frame, caches)?;
                outs.push(out);
            }
            Ok(outs)
        }
    }
}
