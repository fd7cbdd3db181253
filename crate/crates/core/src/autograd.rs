//! A small tape-based reverse-mode automatic differentiation engine.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op stores its output
//! value plus a closure mapping the output gradient to input gradients. The
//! closures are hand-derived; every op is covered by a central finite-difference
//! check in the tests below.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor, Trans};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of a scalar with respect to the leaves of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input that is not a stored parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node,
    /// so parameters shared by several sub-networks accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    fn push(&mut self, value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            backward: requires_grad.then_some(backward),
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.value(loss).numel(),
            1,
            "backward() needs a scalar loss"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let parent_grads = back(&g, &inputs, &node.value, &needs);
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    if !self.nodes[p.0].requires_grad {
                        continue;
                    }
                    match &mut grads[p.0] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        Gradients { grads }
    }

    /// Gradients for every parameter touched by this graph.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .map(|(&id, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    // ----- linear algebra -----

    /// `x[..., K] @ w[K, N] -> [..., N]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 2, "matmul weight must be 2-D");
        let k = *xs.last().expect("matmul input rank");
        assert_eq!(k, ws[0], "matmul inner dims {xs:?} x {ws:?}");
        let n = ws[1];
        let m = self.value(x).rows();
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut out = Tensor::zeros(&out_shape);
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(x).data(),
            Trans::No,
            self.value(w).data(),
            Trans::No,
            0.0,
            out.data_mut(),
        );
        self.push(
            out,
            vec![x, w],
            Box::new(move |g, inp, _, needs| {
                let dx = needs[0].then(|| {
                    let mut dx = Tensor::zeros(inp[0].shape());
                    gemm(m, n, k, 1.0, g.data(), Trans::No, inp[1].data(), Trans::Yes, 0.0, dx.data_mut());
                    dx
                });
                let dw = needs[1].then(|| {
                    let mut dw = Tensor::zeros(inp[1].shape());
                    gemm(k, m, n, 1.0, inp[0].data(), Trans::Yes, g.data(), Trans::No, 0.0, dw.data_mut());
                    dw
                });
                vec![dx, dw]
            }),
        )
    }

    /// `a[M, K] @ b[N, K]^T -> [M, N]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = dims2(self.value(a));
        let (n, k2) = dims2(self.value(b));
        assert_eq!(k, k2, "matmul_bt inner dims");
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, 1.0, self.value(a).data(), Trans::No, self.value(b).data(), Trans::Yes, 0.0, out.data_mut());
        self.push(
            out,
            vec![a, b],
            Box::new(move |g, inp, _, needs| {
                let da = needs[0].then(|| {
                    let mut da = Tensor::zeros(&[m, k]);
                    gemm(m, n, k, 1.0, g.data(), Trans::No, inp[1].data(), Trans::No, 0.0, da.data_mut());
                    da
                });
                let db = needs[1].then(|| {
                    let mut db = Tensor::zeros(&[n, k]);
                    gemm(n, m, k, 1.0, g.data(), Trans::Yes, inp[0].data(), Trans::No, 0.0, db.data_mut());
                    db
                });
                vec![da, db]
            }),
        )
    }

    /// Row-wise dot product of two `[M, D]` matrices, giving `[M, 1]`.
    pub fn rowwise_dot(&mut self, a: Var, b: Var) -> Var {
        let (m, d) = dims2(self.value(a));
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data = (0..m)
            .map(|i| (0..d).map(|j| av[i * d + j] * bv[i * d + j]).sum())
            .collect();
        self.push(
            Tensor::from_vec(&[m, 1], data),
            vec![a, b],
            Box::new(move |g, inp, _, needs| {
                let scale_rows = |src: &Tensor| {
                    let mut out = src.clone();
                    for i in 0..m {
                        for v in &mut out.data_mut()[i * d..(i + 1) * d] {
                            *v *= g.data()[i];
                        }
                    }
                    out
                };
                vec![
                    needs[0].then(|| scale_rows(inp[1])),
                    needs[1].then(|| scale_rows(inp[0])),
                ]
            }),
        )
    }

    // ----- elementwise -----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(
            out,
            vec![a, b],
            Box::new(|g, _, _, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]),
        )
    }

    /// Sum of any number of same-shaped nodes.
    pub fn add_many(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let mut out = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            out.add_assign(self.value(x));
        }
        let n = xs.len();
        self.push(
            out,
            xs.to_vec(),
            Box::new(move |g, _, _, needs| (0..n).map(|i| needs[i].then(|| g.clone())).collect()),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(
            out,
            vec![a, b],
            Box::new(|g, inp, _, needs| {
                vec![
                    needs[0].then(|| g.zip_map(inp[1], |gv, y| gv * y)),
                    needs[1].then(|| g.zip_map(inp[0], |gv, x| gv * x)),
                ]
            }),
        )
    }

    /// Multiply by a fixed tensor (dropout masks, loss weights).
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Var {
        let out = self.value(x).zip_map(&c, |a, b| a * b);
        self.push(
            out,
            vec![x],
            Box::new(move |g, _, _, _| vec![Some(g.zip_map(&c, |gv, cv| gv * cv))]),
        )
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, vec![x], Box::new(move |g, _, _, _| vec![Some(g.map(|v| v * s))]))
    }

    /// `sum_i c_i * x_i` over same-shaped nodes.
    pub fn linear_combination(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let mut out = Tensor::zeros(self.value(terms[0].0).shape());
        for &(x, c) in terms {
            let xv = self.value(x);
            for (o, v) in out.data_mut().iter_mut().zip(xv.data()) {
                *o += c * v;
            }
        }
        let coeffs: Vec<f64> = terms.iter().map(|t| t.1).collect();
        self.push(
            out,
            terms.iter().map(|t| t.0).collect(),
            Box::new(move |g, _, _, needs| {
                coeffs
                    .iter()
                    .zip(needs)
                    .map(|(&c, &need)| need.then(|| g.map(|v| v * c)))
                    .collect()
            }),
        )
    }

    /// Adds `b[N]` to every row of `x[..., N]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let n = self.value(x).last_dim();
        assert_eq!(self.value(b).numel(), n, "bias length");
        let mut out = self.value(x).clone();
        let bv = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(&bv) {
                *o += bb;
            }
        }
        self.push(
            out,
            vec![x, b],
            Box::new(move |g, inp, _, needs| {
                let db = needs[1].then(|| {
                    let mut db = Tensor::zeros(inp[1].shape());
                    for row in g.data().chunks(n) {
                        for (d, gv) in db.data_mut().iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    db
                });
                vec![needs[0].then(|| g.clone()), db]
            }),
        )
    }

    fn unary(&mut self, x: Var, f: fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var {
        let out = self.value(x).map(f);
        self.push(
            out,
            vec![x],
            Box::new(move |g, inp, out, _| {
                let mut dx = Tensor::zeros(g.shape());
                for (((d, gv), xv), yv) in dx.data_mut().iter_mut().zip(g.data()).zip(inp[0].data()).zip(out.data()) {
                    *d = gv * df(*xv, *yv);
                }
                vec![Some(dx)]
            }),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, |x, _| sigmoid(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, gelu_grad)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let orig = self.value(x).shape().to_vec();
        let out = self.value(x).clone().reshaped(shape);
        self.push(
            out,
            vec![x],
            Box::new(move |g, _, _, _| vec![Some(g.clone().reshaped(&orig))]),
        )
    }

    /// Concatenate along the last dimension.
    pub fn concat_last(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let rows = self.value(xs[0]).rows();
        let widths: Vec<usize> = xs.iter().map(|&x| self.value(x).last_dim()).collect();
        for &x in xs {
            assert_eq!(self.value(x).rows(), rows, "concat_last row mismatch");
        }
        let total: usize = widths.iter().sum();
        let mut shape = self.value(xs[0]).shape().to_vec();
        *shape.last_mut().unwrap() = total;
        let mut out = Tensor::zeros(&shape);
        {
            let od = out.data_mut();
            let mut off = 0;
            for (&x, &w) in xs.iter().zip(&widths) {
                let xv = self.nodes[x.0].value.data();
                for r in 0..rows {
                    od[r * total + off..r * total + off + w].copy_from_slice(&xv[r * w..(r + 1) * w]);
                }
                off += w;
            }
        }
        self.push(
            out,
            xs.to_vec(),
            Box::new(move |g, inp, _, needs| {
                let mut off = 0;
                let mut res = Vec::with_capacity(widths.len());
                for (i, &w) in widths.iter().enumerate() {
                    if needs[i] {
                        let mut d = Tensor::zeros(inp[i].shape());
                        for r in 0..rows {
                            d.data_mut()[r * w..(r + 1) * w]
                                .copy_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        res.push(Some(d));
                    } else {
                        res.push(None);
                    }
                    off += w;
                }
                res
            }),
        )
    }

    // ----- reductions -----

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let out = Tensor::scalar(self.value(x).sum() / n as f64);
        self.push(
            out,
            vec![x],
            Box::new(move |g, inp, _, _| vec![Some(Tensor::full(inp[0].shape(), g.item() / n as f64))]),
        )
    }

    /// Mean over valid positions of `x[B, L, D]`; rows with no valid
    /// position pool to zero.
    pub fn masked_mean_pool(&mut self, x: Var, mask: &[bool]) -> Var {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 3, "masked_mean_pool expects [B, L, D]");
        let (b, l, d) = (s[0], s[1], s[2]);
        assert_eq!(mask.len(), b * l);
        let counts: Vec<f64> = (0..b)
            .map(|i| mask[i * l..(i + 1) * l].iter().filter(|&&m| m).count() as f64)
            .collect();
        let mask = mask.to_vec();
        let xv = self.value(x).data();
        let mut out = Tensor::zeros(&[b, d]);
        for i in 0..b {
            if counts[i] == 0.0 {
                continue;
            }
            let o = &mut out.data_mut()[i * d..(i + 1) * d];
            for t in 0..l {
                if mask[i * l + t] {
                    for (ov, xv) in o.iter_mut().zip(&xv[(i * l + t) * d..(i * l + t + 1) * d]) {
                        *ov += xv;
                    }
                }
            }
            for ov in o.iter_mut() {
                *ov /= counts[i];
            }
        }
        self.push(
            out,
            vec![x],
            Box::new(move |g, _, _, _| {
                let mut dx = Tensor::zeros(&[b, l, d]);
                for i in 0..b {
                    if counts[i] == 0.0 {
                        continue;
                    }
                    for t in 0..l {
                        if mask[i * l + t] {
                            for j in 0..d {
                                dx.data_mut()[(i * l + t) * d + j] = g.data()[i * d + j] / counts[i];
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    // ----- normalisation -----

    /// Layer normalisation over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let d = self.value(x).last_dim();
        let rows = self.value(x).rows();
        assert_eq!(self.value(gamma).numel(), d);
        assert_eq!(self.value(beta).numel(), d);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = Tensor::zeros(self.value(x).shape());
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out.data_mut()[r * d + j] = h * gv[j] + bv[j];
            }
        }
        self.push(
            out,
            vec![x, gamma, beta],
            Box::new(move |g, inp, _, needs| {
                let gd = g.data();
                let gamma = inp[1].data();
                let mut dx = Tensor::zeros(inp[0].shape());
                let mut dgamma = Tensor::zeros(inp[1].shape());
                let mut dbeta = Tensor::zeros(inp[2].shape());
                for r in 0..rows {
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        let dy = gd[r * d + j];
                        let h = xhat[r * d + j];
                        dgamma.data_mut()[j] += dy * h;
                        dbeta.data_mut()[j] += dy;
                        let dxh = dy * gamma[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * h;
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for j in 0..d {
                        let dxh = gd[r * d + j] * gamma[j];
                        dx.data_mut()[r * d + j] =
                            rstd[r] * (dxh - mean_dxh - xhat[r * d + j] * mean_dxh_xh);
                    }
                }
                vec![needs[0].then_some(dx), needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
            }),
        )
    }

    /// Divide each row of `[M, D]` by its Euclidean norm (floored at 1e-12).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (m, d) = dims2(self.value(x));
        let xv = self.value(x).data();
        let norms: Vec<f64> = (0..m)
            .map(|i| xv[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12))
            .collect();
        let mut out = self.value(x).clone();
        for i in 0..m {
            for v in &mut out.data_mut()[i * d..(i + 1) * d] {
                *v /= norms[i];
            }
        }
        self.push(
            out,
            vec![x],
            Box::new(move |g, _, y, _| {
                let mut dx = Tensor::zeros(&[m, d]);
                for i in 0..m {
                    let yr = &y.data()[i * d..(i + 1) * d];
                    let gr = &g.data()[i * d..(i + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx.data_mut()[i * d + j] = (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Softmax over consecutive groups of `group` entries along the last dim.
    pub fn softmax_groups(&mut self, x: Var, group: usize) -> Var {
        assert!(group > 0 && self.value(x).last_dim().is_multiple_of(group));
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(group) {
            softmax_in_place(chunk);
        }
        self.push(
            out,
            vec![x],
            Box::new(move |g, _, y, _| {
                let mut dx = Tensor::zeros(g.shape());
                for ((dc, gc), yc) in dx
                    .data_mut()
                    .chunks_mut(group)
                    .zip(g.data().chunks(group))
                    .zip(y.data().chunks(group))
                {
                    let dot: f64 = gc.iter().zip(yc).map(|(a, b)| a * b).sum();
                    for j in 0..group {
                        dc[j] = yc[j] * (gc[j] - dot);
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    // ----- lookups -----

    /// Gather rows of `table[V, D]`; output shape is `lead ++ [D]`. The
    /// `padding_idx` row never receives gradient.
    pub fn embedding(&mut self, table: Var, indices: &[usize], lead: &[usize], padding_idx: Option<usize>) -> Var {
        let (v, d) = dims2(self.value(table));
        assert_eq!(lead.iter().product::<usize>(), indices.len());
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            assert!(i < v, "embedding index {i} out of range for {v} rows");
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let indices = indices.to_vec();
        self.push(
            Tensor::from_vec(&shape, data),
            vec![table],
            Box::new(move |g, _, _, _| {
                let mut dt = Tensor::zeros(&[v, d]);
                for (n, &i) in indices.iter().enumerate() {
                    if Some(i) == padding_idx {
                        continue;
                    }
                    let src = &g.data()[n * d..(n + 1) * d];
                    for (t, s) in dt.data_mut()[i * d..(i + 1) * d].iter_mut().zip(src) {
                        *t += s;
                    }
                }
                vec![Some(dt)]
            }),
        )
    }

    // ----- sequence mixing -----

    /// Multi-head scaled dot-product attention with a linear distance
    /// penalty. For query `t` and key `s` the pre-softmax score is
    /// `q_t . k_s / sqrt(dh) - decay[h] * |t - s|`. With `causal` only keys
    /// `s <= t` participate; keys with `valid[b, s] == false` never do. A
    /// query with no admissible key outputs zeros.
    ///
    /// `q`, `k`, `v`: `[B, L, H * dh]`; `decay`: `[H]`; `valid`: `B * L`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, decay: Var, valid: &[bool], heads: usize, causal: bool) -> Var {
        let s = self.value(q).shape().to_vec();
        assert_eq!(s.len(), 3, "attention expects [B, L, H*dh]");
        assert_eq!(self.value(k).shape(), &s[..]);
        assert_eq!(self.value(v).shape(), &s[..]);
        assert_eq!(self.value(decay).numel(), heads);
        let (b, l, width) = (s[0], s[1], s[2]);
        assert_eq!(width % heads, 0);
        assert_eq!(valid.len(), b * l);
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let dv = self.value(decay).data();
        let mut probs = vec![0.0; b * heads * l * l];
        let mut out = Tensor::zeros(&s);
        let mut scores = vec![0.0; l];
        for bi in 0..b {
            for h in 0..heads {
                for t in 0..l {
                    let qoff = (bi * l + t) * width + h * dh;
                    let qrow = &qv[qoff..qoff + dh];
                    let smax = if causal { t + 1 } else { l };
                    let mut best = f64::NEG_INFINITY;
                    for sidx in 0..smax {
                        if !valid[bi * l + sidx] {
                            scores[sidx] = f64::NEG_INFINITY;
                            continue;
                        }
                        let koff = (bi * l + sidx) * width + h * dh;
                        let dot: f64 = qrow.iter().zip(&kv[koff..koff + dh]).map(|(a, c)| a * c).sum();
                        let dist = t.abs_diff(sidx) as f64;
                        let sc = dot * scale - dv[h] * dist;
                        scores[sidx] = sc;
                        best = best.max(sc);
                    }
                    if best == f64::NEG_INFINITY {
                        continue;
                    }
                    let prow = &mut probs[((bi * heads + h) * l + t) * l..((bi * heads + h) * l + t + 1) * l];
                    let mut z = 0.0;
                    for sidx in 0..smax {
                        if scores[sidx] > f64::NEG_INFINITY {
                            let e = (scores[sidx] - best).exp();
                            prow[sidx] = e;
                            z += e;
                        }
                    }
                    let orow_off = (bi * l + t) * width + h * dh;
                    for sidx in 0..smax {
                        if prow[sidx] == 0.0 {
                            continue;
                        }
                        prow[sidx] /= z;
                        let p = prow[sidx];
                        let voff = (bi * l + sidx) * width + h * dh;
                        for j in 0..dh {
                            out.data_mut()[orow_off + j] += p * vv[voff + j];
                        }
                    }
                }
            }
        }
        self.push(
            out,
            vec![q, k, v, decay],
            Box::new(move |g, inp, _, needs| {
                let (qv, kv, vv) = (inp[0].data(), inp[1].data(), inp[2].data());
                let gd = g.data();
                let mut dq = Tensor::zeros(&[b, l, width]);
                let mut dk = Tensor::zeros(&[b, l, width]);
                let mut dvv = Tensor::zeros(&[b, l, width]);
                let mut ddecay = Tensor::zeros(&[heads]);
                let mut dp = vec![0.0; l];
                for bi in 0..b {
                    for h in 0..heads {
                        for t in 0..l {
                            let prow = &probs[((bi * heads + h) * l + t) * l..((bi * heads + h) * l + t + 1) * l];
                            let smax = if causal { t + 1 } else { l };
                            let goff = (bi * l + t) * width + h * dh;
                            let grow = &gd[goff..goff + dh];
                            let mut dot_pdp = 0.0;
                            for sidx in 0..smax {
                                if prow[sidx] == 0.0 {
                                    dp[sidx] = 0.0;
                                    continue;
                                }
                                let voff = (bi * l + sidx) * width + h * dh;
                                let mut acc = 0.0;
                                for j in 0..dh {
                                    acc += grow[j] * vv[voff + j];
                                    dvv.data_mut()[voff + j] += prow[sidx] * grow[j];
                                }
                                dp[sidx] = acc;
                                dot_pdp += prow[sidx] * acc;
                            }
                            for sidx in 0..smax {
                                let p = prow[sidx];
                                if p == 0.0 {
                                    continue;
                                }
                                let ds = p * (dp[sidx] - dot_pdp);
                                ddecay.data_mut()[h] -= ds * t.abs_diff(sidx) as f64;
                                let koff = (bi * l + sidx) * width + h * dh;
                                for j in 0..dh {
                                    dq.data_mut()[goff + j] += ds * scale * kv[koff + j];
                                    dk.data_mut()[koff + j] += ds * scale * qv[goff + j];
                                }
                            }
                        }
                    }
                }
                vec![
                    needs[0].then_some(dq),
                    needs[1].then_some(dk),
                    needs[2].then_some(dvv),
                    needs[3].then_some(ddecay),
                ]
            }),
        )
    }

    /// Causal depthwise convolution: `y[b,t,c] = sum_j w[j,c] * x[b,t-j,c]`
    /// for `0 <= j < K`, treating `x` before the sequence start as zero.
    /// `x`: `[B, L, C]`, `w`: `[K, C]`.
    pub fn causal_depthwise_conv(&mut self, x: Var, w: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 3);
        let (b, l, c) = (s[0], s[1], s[2]);
        let (kk, c2) = dims2(self.value(w));
        assert_eq!(c, c2);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = Tensor::zeros(&s);
        for bi in 0..b {
            for t in 0..l {
                let o = (bi * l + t) * c;
                for j in 0..kk.min(t + 1) {
                    let xi = (bi * l + t - j) * c;
                    for ch in 0..c {
                        out.data_mut()[o + ch] += wv[j * c + ch] * xv[xi + ch];
                    }
                }
            }
        }
        self.push(
            out,
            vec![x, w],
            Box::new(move |g, inp, _, needs| {
                let (xv, wv, gd) = (inp[0].data(), inp[1].data(), g.data());
                let mut dx = Tensor::zeros(&[b, l, c]);
                let mut dw = Tensor::zeros(&[kk, c]);
                for bi in 0..b {
                    for t in 0..l {
                        let o = (bi * l + t) * c;
                        for j in 0..kk.min(t + 1) {
                            let xi = (bi * l + t - j) * c;
                            for ch in 0..c {
                                dx.data_mut()[xi + ch] += wv[j * c + ch] * gd[o + ch];
                                dw.data_mut()[j * c + ch] += xv[xi + ch] * gd[o + ch];
                            }
                        }
                    }
                }
                vec![needs[0].then_some(dx), needs[1].then_some(dw)]
            }),
        )
    }

    /// Apply per-position, per-head causal kernels:
    /// `y[b,t,c] = sum_j kernel[b,t,h(c),j] * v[b,t-j,c]` where `h(c)` is the
    /// head owning channel `c`. `v`: `[B, L, C]`, `kernel`: `[B, L, H*K]`.
    pub fn dynamic_causal_conv(&mut self, v: Var, kernel: Var, heads: usize, ksize: usize) -> Var {
        let s = self.value(v).shape().to_vec();
        assert_eq!(s.len(), 3);
        let (b, l, c) = (s[0], s[1], s[2]);
        assert_eq!(c % heads, 0);
        assert_eq!(self.value(kernel).shape(), &[b, l, heads * ksize]);
        let per_head = c / heads;
        let vv = self.value(v).data();
        let kv = self.value(kernel).data();
        let mut out = Tensor::zeros(&s);
        for bi in 0..b {
            for t in 0..l {
                let o = (bi * l + t) * c;
                let ko = (bi * l + t) * heads * ksize;
                for j in 0..ksize.min(t + 1) {
                    let vi = (bi * l + t - j) * c;
                    for ch in 0..c {
                        let h = ch / per_head;
                        out.data_mut()[o + ch] += kv[ko + h * ksize + j] * vv[vi + ch];
                    }
                }
            }
        }
        self.push(
            out,
            vec![v, kernel],
            Box::new(move |g, inp, _, needs| {
                let (vv, kv, gd) = (inp[0].data(), inp[1].data(), g.data());
                let mut dv = Tensor::zeros(&[b, l, c]);
                let mut dk = Tensor::zeros(&[b, l, heads * ksize]);
                for bi in 0..b {
                    for t in 0..l {
                        let o = (bi * l + t) * c;
                        let ko = (bi * l + t) * heads * ksize;
                        for j in 0..ksize.min(t + 1) {
                            let vi = (bi * l + t - j) * c;
                            for ch in 0..c {
                                let h = ch / per_head;
                                let kidx = ko + h * ksize + j;
                                dv.data_mut()[vi + ch] += kv[kidx] * gd[o + ch];
                                dk.data_mut()[kidx] += vv[vi + ch] * gd[o + ch];
                            }
                        }
                    }
                }
                vec![needs[0].then_some(dv), needs[1].then_some(dk)]
            }),
        )
    }

    // ----- losses -----

    /// Per-row softmax cross entropy of `logits[M, N]` against class
    /// `targets[i]`; returns `[M]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (m, n) = dims2(self.value(logits));
        assert_eq!(targets.len(), m);
        let lv = self.value(logits).data();
        let mut soft = lv.to_vec();
        let mut out = Tensor::zeros(&[m]);
        for i in 0..m {
            assert!(targets[i] < n);
            let row = &lv[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            out.data_mut()[i] = lse - row[targets[i]];
            softmax_in_place(&mut soft[i * n..(i + 1) * n]);
        }
        let targets = targets.to_vec();
        self.push(
            out,
            vec![logits],
            Box::new(move |g, _, _, _| {
                let mut d = Tensor::from_vec(&[m, n], soft.clone());
                for i in 0..m {
                    d.data_mut()[i * n + targets[i]] -= 1.0;
                    for v in &mut d.data_mut()[i * n..(i + 1) * n] {
                        *v *= g.data()[i];
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// Masked mean binary cross entropy on probabilities clamped to
    /// `[eps, 1 - eps]`. An all-zero mask gives zero loss.
    pub fn bce(&mut self, probs: Var, targets: &Tensor, mask: &Tensor, eps: f64) -> Var {
        let pv = self.value(probs);
        assert_eq!(pv.shape(), targets.shape());
        assert_eq!(pv.shape(), mask.shape());
        let count: f64 = mask.sum();
        let mut total = 0.0;
        for ((&p, &r), &m) in pv.data().iter().zip(targets.data()).zip(mask.data()) {
            if m == 0.0 {
                continue;
            }
            let pc = p.clamp(eps, 1.0 - eps);
            total += -m * (r * pc.ln() + (1.0 - r) * (1.0 - pc).ln());
        }
        let loss = if count > 0.0 { total / count } else { 0.0 };
        let targets = targets.clone();
        let mask = mask.clone();
        self.push(
            Tensor::scalar(loss),
            vec![probs],
            Box::new(move |g, inp, _, _| {
                let mut d = Tensor::zeros(inp[0].shape());
                if count > 0.0 {
                    let scale = g.item() / count;
                    for (((dv, &p), &r), &m) in d
                        .data_mut()
                        .iter_mut()
                        .zip(inp[0].data())
                        .zip(targets.data())
                        .zip(mask.data())
                    {
                        if m == 0.0 || p < eps || p > 1.0 - eps {
                            continue;
                        }
                        *dv = scale * m * (-r / p + (1.0 - r) / (1.0 - p));
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// Mean squared error against a fixed target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.numel(), target.numel());
        let n = pv.numel() as f64;
        let loss = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let target = target.data().to_vec();
        self.push(
            Tensor::scalar(loss),
            vec![pred],
            Box::new(move |g, inp, _, _| {
                let s = 2.0 * g.item() / n;
                let mut d = Tensor::zeros(inp[0].shape());
                for ((dv, p), t) in d.data_mut().iter_mut().zip(inp[0].data()).zip(&target) {
                    *dv = s * (p - t);
                }
                vec![Some(d)]
            }),
        )
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 2, "expected a 2-D tensor, got {s:?}");
    (s[0], s[1])
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64, _y: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in xs.iter_mut() {
        *v = (*v - mx).exp();
        z += *v;
    }
    for v in xs.iter_mut() {
        *v /= z;
    }
}
