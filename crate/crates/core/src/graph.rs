//! Reverse-mode autodiff on a flat tape.
//!
//! Ops append nodes to a [`Graph`]; each node stores its value and a closure
//! that maps the incoming gradient to per-parent gradients. Creation order is
//! a topological order, so [`Graph::backward`] is a single reverse sweep with
//! accumulation. The tape is rebuilt every step: with a few hundred nodes per
//! training step the bookkeeping cost is irrelevant next to the matmuls.
//!
//! Model-specific fused ops (causal attention, mixture NLL) live next to the
//! models and enter the tape through [`Graph::custom`].

use crate::tensor::{layer_norm_rows, matmul, matmul_into, sigmoid, silu, Scalar, Tensor};

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Scalar> Graph<T> {
    /// `recording = false` skips building backward closures; forward values
    /// are identical either way.
    pub fn new(recording: bool) -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            recording,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Vec::new(), None)
    }

    /// Append a node with an externally built backward closure.
    pub fn custom(
        &mut self,
        value: Tensor<T>,
        parents: &[Var],
        backward: Option<BackwardFn<T>>,
    ) -> Var {
        self.push(value, parents.to_vec(), backward)
    }

    fn push(&mut self, value: Tensor<T>, parents: Vec<Var>, backward: Option<BackwardFn<T>>) -> Var {
        let backward = if self.recording { backward } else { None };
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g| vec![Some(g.clone()), Some(g.clone())])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g| {
                vec![Some(g.clone()), Some(g.map(|x| -x))]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let value = av.zip_map(&bv, |x, y| x * y);
        self.push(
            value,
            vec![a, b],
            Some(Box::new(move |g| {
                vec![
                    Some(g.zip_map(&bv, |gi, bi| gi * bi)),
                    Some(g.zip_map(&av, |gi, ai| gi * ai)),
                ]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g| vec![Some(g.map(|x| x * c))])),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, vec![a], Some(Box::new(|g| vec![Some(g.clone())])))
    }

    /// `x W^T + b` with `x: (n, k)`, `w: (m, k)`, `b: (m)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let bv = self.value(b).clone();
        let (n, m) = (xv.rows(), wv.rows());
        assert_eq!(xv.cols(), wv.cols(), "linear: input/weight dim mismatch");
        assert_eq!(bv.len(), m, "linear: bias dim mismatch");
        let mut y = Tensor::zeros(&[n, m]);
        matmul_into(&xv, false, &wv, true, T::zero(), y.data_mut());
        {
            let yd = y.data_mut();
            for i in 0..n {
                for (j, &bj) in bv.data().iter().enumerate() {
                    yd[i * m + j] = yd[i * m + j] + bj;
                }
            }
        }
        self.push(
            y,
            vec![x, w, b],
            Some(Box::new(move |g| {
                let dx = matmul(g, false, &wv, false);
                let dw = matmul(g, true, &xv, false);
                let mut db = vec![T::zero(); m];
                for i in 0..g.rows() {
                    for (j, dbj) in db.iter_mut().enumerate() {
                        *dbj = *dbj + g.data()[i * m + j];
                    }
                }
                vec![Some(dx), Some(dw), Some(Tensor::from_vec(&[m], db))]
            })),
        )
    }

    /// `x W^T` without bias.
    pub fn linear_nobias(&mut self, x: Var, w: Var) -> Var {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        assert_eq!(xv.cols(), wv.cols(), "linear: input/weight dim mismatch");
        let y = matmul(&xv, false, &wv, true);
        self.push(
            y,
            vec![x, w],
            Some(Box::new(move |g| {
                vec![
                    Some(matmul(g, false, &wv, false)),
                    Some(matmul(g, true, &xv, false)),
                ]
            })),
        )
    }

    /// Row-wise layer norm without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x).clone();
        let (n, d) = (xv.rows(), xv.cols());
        let mut out = vec![T::zero(); n * d];
        let mut xhat = vec![T::zero(); n * d];
        let mut inv_std = vec![T::zero(); n];
        layer_norm_rows(
            xv.data(),
            n,
            d,
            None,
            None,
            T::from_f64(eps),
            &mut out,
            Some((&mut xhat, &mut inv_std)),
        );
        let xhat = Tensor::from_vec(&[n, d], xhat);
        let inv_std = Tensor::from_vec(&[n], inv_std);
        self.push(
            Tensor::from_vec(&[n, d], out),
            vec![x],
            Some(Box::new(move |g| {
                vec![Some(layer_norm_backward(g, &xhat, &inv_std))]
            })),
        )
    }

    /// Row-wise layer norm with learned gain and bias.
    pub fn layer_norm_affine(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x).clone();
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        let (n, d) = (xv.rows(), xv.cols());
        assert_eq!(gv.len(), d);
        assert_eq!(bv.len(), d);
        let mut out = vec![T::zero(); n * d];
        let mut xhat = vec![T::zero(); n * d];
        let mut inv_std = vec![T::zero(); n];
        layer_norm_rows(
            xv.data(),
            n,
            d,
            Some(gv.data()),
            Some(bv.data()),
            T::from_f64(eps),
            &mut out,
            Some((&mut xhat, &mut inv_std)),
        );
        let xhat = Tensor::from_vec(&[n, d], xhat);
        let inv_std = Tensor::from_vec(&[n], inv_std);
        self.push(
            Tensor::from_vec(&[n, d], out),
            vec![x, gamma, beta],
            Some(Box::new(move |g| {
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut gx = vec![T::zero(); n * d];
                for i in 0..n {
                    for j in 0..d {
                        let gij = g.data()[i * d + j];
                        dgamma[j] = dgamma[j] + gij * xhat.data()[i * d + j];
                        dbeta[j] = dbeta[j] + gij;
                        gx[i * d + j] = gij * gv.data()[j];
                    }
                }
                let gx = Tensor::from_vec(&[n, d], gx);
                vec![
                    Some(layer_norm_backward(&gx, &xhat, &inv_std)),
                    Some(Tensor::from_vec(&[d], dgamma)),
                    Some(Tensor::from_vec(&[d], dbeta)),
                ]
            })),
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x).clone();
        let value = xv.map(silu);
        self.push(
            value,
            vec![x],
            Some(Box::new(move |g| {
                vec![Some(g.zip_map(&xv, |gi, xi| {
                    let s = sigmoid(xi);
                    gi * s * (T::one() + xi * (T::one() - s))
                }))]
            })),
        )
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let (n, da, db) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(bv.rows(), n, "concat_cols row mismatch");
        let mut out = vec![T::zero(); n * (da + db)];
        for i in 0..n {
            out[i * (da + db)..i * (da + db) + da].copy_from_slice(av.row(i));
            out[i * (da + db) + da..(i + 1) * (da + db)].copy_from_slice(bv.row(i));
        }
        self.push(
            Tensor::from_vec(&[n, da + db], out),
            vec![a, b],
            Some(Box::new(move |g| {
                let mut ga = vec![T::zero(); n * da];
                let mut gb = vec![T::zero(); n * db];
                for i in 0..n {
                    ga[i * da..(i + 1) * da].copy_from_slice(&g.row(i)[..da]);
                    gb[i * db..(i + 1) * db].copy_from_slice(&g.row(i)[da..]);
                }
                vec![
                    Some(Tensor::from_vec(&[n, da], ga)),
                    Some(Tensor::from_vec(&[n, db], gb)),
                ]
            })),
        )
    }

    /// Columns `[from, to)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Var {
        let xv = self.value(x).clone();
        let (n, d) = (xv.rows(), xv.cols());
        assert!(from < to && to <= d, "slice_cols bounds");
        let w = to - from;
        let mut out = vec![T::zero(); n * w];
        for i in 0..n {
            out[i * w..(i + 1) * w].copy_from_slice(&xv.row(i)[from..to]);
        }
        self.push(
            Tensor::from_vec(&[n, w], out),
            vec![x],
            Some(Box::new(move |g| {
                let mut gx = vec![T::zero(); n * d];
                for i in 0..n {
                    gx[i * d + from..i * d + to].copy_from_slice(g.row(i));
                }
                vec![Some(Tensor::from_vec(&[n, d], gx))]
            })),
        )
    }

    /// Rows `[from, to)` of a matrix.
    pub fn slice_rows(&mut self, x: Var, from: usize, to: usize) -> Var {
        let xv = self.value(x).clone();
        let (n, d) = (xv.rows(), xv.cols());
        assert!(from < to && to <= n, "slice_rows bounds");
        let out = xv.data()[from * d..to * d].to_vec();
        self.push(
            Tensor::from_vec(&[to - from, d], out),
            vec![x],
            Some(Box::new(move |g| {
                let mut gx = vec![T::zero(); n * d];
                gx[from * d..to * d].copy_from_slice(g.data());
                vec![Some(Tensor::from_vec(&[n, d], gx))]
            })),
        )
    }

    /// Replace masked rows of `x` with the single row `row`. Used for
    /// conditioning dropout; the mask itself is data, not a variable.
    pub fn select_rows(&mut self, x: Var, row: Var, mask: std::sync::Arc<Vec<bool>>) -> Var {
        let xv = self.value(x).clone();
        let rv = self.value(row).clone();
        let (n, d) = (xv.rows(), xv.cols());
        assert_eq!(rv.len(), d, "select_rows row dim mismatch");
        assert_eq!(mask.len(), n, "select_rows mask length mismatch");
        let mut out = xv.data().to_vec();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                out[i * d..(i + 1) * d].copy_from_slice(rv.data());
            }
        }
        let mask_b = mask.clone();
        self.push(
            Tensor::from_vec(&[n, d], out),
            vec![x, row],
            Some(Box::new(move |g| {
                let mut gx = g.data().to_vec();
                let mut gr = vec![T::zero(); d];
                for (i, &m) in mask_b.iter().enumerate() {
                    if m {
                        for j in 0..d {
                            gr[j] = gr[j] + gx[i * d + j];
                            gx[i * d + j] = T::zero();
                        }
                    }
                }
                vec![
                    Some(Tensor::from_vec(&[n, d], gx)),
                    Some(Tensor::from_vec(&[d], gr)),
                ]
            })),
        )
    }

    /// Shift each length-`time` block of rows right by one, dropping the last
    /// row and prepending `first`. Maps backbone outputs `o_0..o_{T-1}` to
    /// conditioning vectors `[first, o_0, .., o_{T-2}]` per batch element.
    pub fn shift_rows_prepend(&mut self, x: Var, first: Var, batch: usize, time: usize) -> Var {
        let xv = self.value(x).clone();
        let fv = self.value(first).clone();
        let d = xv.cols();
        assert_eq!(xv.rows(), batch * time, "shift_rows_prepend row mismatch");
        assert_eq!(fv.len(), d, "shift_rows_prepend first dim mismatch");
        let mut out = vec![T::zero(); batch * time * d];
        for b in 0..batch {
            out[b * time * d..b * time * d + d].copy_from_slice(fv.data());
            for t in 1..time {
                let src = (b * time + t - 1) * d;
                let dst = (b * time + t) * d;
                out[dst..dst + d].copy_from_slice(&xv.data()[src..src + d]);
            }
        }
        self.push(
            Tensor::from_vec(&[batch * time, d], out),
            vec![x, first],
            Some(Box::new(move |g| {
                let mut gx = vec![T::zero(); batch * time * d];
                let mut gf = vec![T::zero(); d];
                for b in 0..batch {
                    for (j, gfj) in gf.iter_mut().enumerate() {
                        *gfj = *gfj + g.data()[b * time * d + j];
                    }
                    for t in 1..time {
                        let dst = (b * time + t) * d;
                        let src = (b * time + t - 1) * d;
                        for j in 0..d {
                            gx[src + j] = gx[src + j] + g.data()[dst + j];
                        }
                    }
                }
                vec![
                    Some(Tensor::from_vec(&[batch * time, d], gx)),
                    Some(Tensor::from_vec(&[d], gf)),
                ]
            })),
        )
    }

    /// `x[b*time + t] + table[t]`: broadcast a `(time, d)` table over the
    /// batch. Used for positional embeddings.
    pub fn add_tiled(&mut self, x: Var, table: Var, batch: usize) -> Var {
        let xv = self.value(x).clone();
        let tv = self.value(table).clone();
        let (time, d) = (tv.rows(), tv.cols());
        assert_eq!(xv.rows(), batch * time, "add_tiled row mismatch");
        assert_eq!(xv.cols(), d, "add_tiled col mismatch");
        let mut out = xv.data().to_vec();
        for b in 0..batch {
            for t in 0..time {
                let o = (b * time + t) * d;
                for j in 0..d {
                    out[o + j] = out[o + j] + tv.data()[t * d + j];
                }
            }
        }
        self.push(
            Tensor::from_vec(&[batch * time, d], out),
            vec![x, table],
            Some(Box::new(move |g| {
                let mut gt = vec![T::zero(); time * d];
                for b in 0..batch {
                    for t in 0..time {
                        let o = (b * time + t) * d;
                        for j in 0..d {
                            gt[t * d + j] = gt[t * d + j] + g.data()[o + j];
                        }
                    }
                }
                vec![Some(g.clone()), Some(Tensor::from_vec(&[time, d], gt))]
            })),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let xv = self.value(x).clone();
        let mut s = T::zero();
        for &v in xv.data() {
            s = s + v;
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::scalar(s),
            vec![x],
            Some(Box::new(move |g| {
                vec![Some(Tensor::full(&shape, g.data()[0]))]
            })),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, T::from_f64(1.0 / n as f64))
    }

    /// Reverse sweep from a scalar loss. Returns one gradient slot per node;
    /// leaves keep theirs so optimizers can read them.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        assert!(self.recording, "backward on a non-recording graph");
        let mut slots: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Tensor::scalar(T::one()));
        for id in (0..self.nodes.len()).rev() {
            if slots[id].is_none() {
                continue;
            }
            let node = &self.nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let g = slots[id].as_ref().unwrap();
            let parent_grads = backward(g);
            assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, grad) in node.parents.iter().zip(parent_grads) {
                let Some(grad) = grad else { continue };
                match &mut slots[parent.0] {
                    Some(acc) => acc.add_assign_scaled(&grad, T::one()),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Gradients { slots }
    }
}

fn layer_norm_backward<T: Scalar>(g: &Tensor<T>, xhat: &Tensor<T>, inv_std: &Tensor<T>) -> Tensor<T> {
    let (n, d) = (xhat.rows(), xhat.cols());
    let inv_d = T::from_f64(1.0 / d as f64);
    let mut dx = vec![T::zero(); n * d];
    for i in 0..n {
        let grow = g.row(i);
        let xrow = xhat.row(i);
        let mut g_mean = T::zero();
        let mut gx_mean = T::zero();
        for j in 0..d {
            g_mean = g_mean + grow[j];
            gx_mean = gx_mean + grow[j] * xrow[j];
        }
        g_mean = g_mean * inv_d;
        gx_mean = gx_mean * inv_d;
        let s = inv_std.data()[i];
        for j in 0..d {
            dx[i * d + j] = s * (grow[j] - g_mean - xrow[j] * gx_mean);
        }
    }
    Tensor::from_vec(&[n, d], dx)
}

pub struct Gradients<T: Scalar> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.slots[v.0].take()
    }
}
