//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! Every op evaluates eagerly, records its parents and a backward closure,
//! and returns a [`Var`] handle. [`Tape::backward`] walks the nodes in
//! reverse creation order, which is a valid topological order.

use std::rc::Rc;

use super::loss::{bce_with_logits, cross_entropy, softmax_row};
use super::{KernelError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Ctx<'a> {
    grad: &'a Tensor,
    out: &'a Tensor,
    inputs: Vec<&'a Tensor>,
}

type Backward = Box<dyn Fn(&Ctx<'_>) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<Backward>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Accumulated gradients, one optional slot per tape node.
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.slots.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.slots.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, backward: Option<Backward>) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    fn op(&mut self, value: Tensor, parents: &[Var], backward: Backward) -> Var {
        self.push(value, parents.iter().map(|p| p.0).collect(), Some(backward))
    }

    /// Back-propagates from a scalar node (seeded with 1).
    pub fn backward(&self, root: Var) -> Gradients {
        let mut slots: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = &node.backward else { continue };
            let Some(grad) = slots[idx].take() else { continue };
            let ctx = Ctx {
                grad: &grad,
                out: &node.value,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
            };
            let parent_grads = backward(&ctx);
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                match &mut slots[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            slots[idx] = Some(grad);
        }
        Gradients { slots }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.op(
            out,
            &[a, b],
            Box::new(|c| vec![c.grad.matmul_t(c.inputs[1]), c.inputs[0].t_matmul(c.grad)]),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.op(out, &[a, b], Box::new(|c| vec![c.grad.clone(), c.grad.clone()]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.op(out, &[a, b], Box::new(|c| vec![c.grad.clone(), c.grad.map(|g| -g)]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.op(
            out,
            &[a, b],
            Box::new(|c| {
                vec![
                    c.grad.zip_map(c.inputs[1], |g, y| g * y),
                    c.grad.zip_map(c.inputs[0], |g, x| g * x),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.op(out, &[a], Box::new(move |c| vec![c.grad.map(|g| g * s)]))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x / (1.0 + (-x).exp()));
        self.op(
            out,
            &[a],
            Box::new(|c| {
                vec![c.grad.zip_map(c.inputs[0], |g, x| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    g * (s + x * s * (1.0 - s))
                })]
            }),
        )
    }

    /// Row-wise RMS normalization with a learned gain of length `cols`.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Var {
        const EPS: f64 = 1e-6;
        let xv = self.value(x);
        let gv = self.value(gain);
        let (n, d) = (xv.rows(), xv.cols());
        let mut out = Tensor::zeros(&[n, d]);
        for i in 0..n {
            let row = xv.row(i);
            let r = (row.iter().map(|v| v * v).sum::<f64>() / d as f64 + EPS).sqrt();
            for (o, (&v, &g)) in out.row_mut(i).iter_mut().zip(row.iter().zip(gv.data())) {
                *o = v / r * g;
            }
        }
        self.op(
            out,
            &[x, gain],
            Box::new(|c| {
                let (xv, gv, gout) = (c.inputs[0], c.inputs[1], c.grad);
                let (n, d) = (xv.rows(), xv.cols());
                let mut dx = Tensor::zeros(&[n, d]);
                let mut dg = Tensor::zeros(gv.shape());
                for i in 0..n {
                    let row = xv.row(i);
                    let r = (row.iter().map(|v| v * v).sum::<f64>() / d as f64 + EPS).sqrt();
                    let go = gout.row(i);
                    let mut dot = 0.0;
                    for j in 0..d {
                        let xhat = row[j] / r;
                        dg.data_mut()[j] += go[j] * xhat;
                        dot += go[j] * gv.data()[j] * xhat;
                    }
                    let mean = dot / d as f64;
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = (go[j] * gv.data()[j] - row[j] / r * mean) / r;
                    }
                }
                vec![dx, dg]
            }),
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(av.shape());
        for i in 0..av.rows() {
            out.row_mut(i).copy_from_slice(&softmax_row(av.row(i)));
        }
        self.op(
            out,
            &[a],
            Box::new(|c| {
                let mut dx = Tensor::zeros(c.out.shape());
                for i in 0..c.out.rows() {
                    let (y, g) = (c.out.row(i), c.grad.row(i));
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for (o, (&yv, &gv)) in dx.row_mut(i).iter_mut().zip(y.iter().zip(g)) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![dx]
            }),
        )
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let out = self.value(a).select_rows(&idx);
        self.op(
            out,
            &[a],
            Box::new(move |c| {
                let mut da = Tensor::zeros(c.inputs[0].shape());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &g) in da.row_mut(i).iter_mut().zip(c.grad.row(r)) {
                        *o += g;
                    }
                }
                vec![da]
            }),
        )
    }

    /// Scatter-adds the rows of `a` into an `n × cols` zero tensor at `idx`.
    pub fn scatter_rows(&mut self, a: Var, idx: Vec<usize>, n: usize) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(&[n, av.cols()]);
        for (r, &i) in idx.iter().enumerate() {
            for (o, &v) in out.row_mut(i).iter_mut().zip(av.row(r)) {
                *o += v;
            }
        }
        self.op(out, &[a], Box::new(move |c| vec![c.grad.select_rows(&idx)]))
    }

    /// Picks individual entries `(row, col)` into an `m × 1` column.
    pub fn gather_entries(&mut self, a: Var, pos: Vec<(usize, usize)>) -> Var {
        let av = self.value(a);
        let out = Tensor::matrix(pos.len(), 1, pos.iter().map(|&(r, c)| av.get(r, c)).collect());
        self.op(
            out,
            &[a],
            Box::new(move |c| {
                let mut da = Tensor::zeros(c.inputs[0].shape());
                for (k, &(r, col)) in pos.iter().enumerate() {
                    let cur = da.get(r, col);
                    da.set(r, col, cur + c.grad.data()[k]);
                }
                vec![da]
            }),
        )
    }

    /// Scales row `i` of `a` (`m × c`) by `w[i]` (`m × 1`).
    pub fn mul_col(&mut self, a: Var, w: Var) -> Var {
        let (av, wv) = (self.value(a), self.value(w));
        let mut out = av.clone();
        for i in 0..av.rows() {
            let s = wv.data()[i];
            out.row_mut(i).iter_mut().for_each(|x| *x *= s);
        }
        self.op(
            out,
            &[a, w],
            Box::new(|c| {
                let (av, wv, g) = (c.inputs[0], c.inputs[1], c.grad);
                let mut da = g.clone();
                let mut dw = Tensor::zeros(wv.shape());
                for i in 0..av.rows() {
                    let s = wv.data()[i];
                    da.row_mut(i).iter_mut().for_each(|x| *x *= s);
                    dw.data_mut()[i] = g.row(i).iter().zip(av.row(i)).map(|(a, b)| a * b).sum();
                }
                vec![da, dw]
            }),
        )
    }

    pub fn select_cols(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let out = self.value(a).select_cols(&idx);
        self.op(
            out,
            &[a],
            Box::new(move |c| {
                let mut da = Tensor::zeros(c.inputs[0].shape());
                for r in 0..c.grad.rows() {
                    for (k, &j) in idx.iter().enumerate() {
                        let cur = da.get(r, j);
                        da.set(r, j, cur + c.grad.get(r, k));
                    }
                }
                vec![da]
            }),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            sizes.push(v.rows());
            data.extend_from_slice(v.data());
        }
        let rows = sizes.iter().sum();
        self.op(
            Tensor::matrix(rows, cols, data),
            parts,
            Box::new(move |c| {
                let mut start = 0;
                sizes
                    .iter()
                    .map(|&s| {
                        let idx: Vec<usize> = (start..start + s).collect();
                        start += s;
                        c.grad.select_rows(&idx)
                    })
                    .collect()
            }),
        )
    }

    /// Column mean: `n × c` to `1 × c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.rows();
        let mut out = vec![0.0; av.cols()];
        for i in 0..n {
            for (o, &v) in out.iter_mut().zip(av.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let cols = out.len();
        self.op(
            Tensor::matrix(1, cols, out),
            &[a],
            Box::new(move |c| {
                let mut da = Tensor::zeros(c.inputs[0].shape());
                for i in 0..n {
                    for (o, &g) in da.row_mut(i).iter_mut().zip(c.grad.data()) {
                        *o = g / n as f64;
                    }
                }
                vec![da]
            }),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.op(
            out,
            &[a],
            Box::new(|c| vec![Tensor::full(c.inputs[0].shape(), c.grad.item())]),
        )
    }

    /// `Σ aᵢ·wᵢ` with constant weights of the same shape.
    pub fn weighted_sum(&mut self, a: Var, w: Tensor) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().zip(w.data()).map(|(x, y)| x * y).sum());
        self.op(out, &[a], Box::new(move |c| vec![w.map(|x| x * c.grad.item())]))
    }

    /// Multi-head masked attention. `q`, `k`, `v` are `n × (heads·dh)`;
    /// `rows[i]` lists the keys visible to query `i` (non-empty).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, rows: Rc<Vec<Vec<usize>>>, heads: usize, scale: f64) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, width) = (qv.rows(), qv.cols());
        let dh = width / heads;
        let mut out = Tensor::zeros(&[n, width]);
        // probs[h][i] aligned with rows[i]
        let mut probs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let mut ph = Vec::with_capacity(n);
            for (i, keys) in rows.iter().enumerate() {
                let qi = &qv.row(i)[cols.clone()];
                let logits: Vec<f64> = keys
                    .iter()
                    .map(|&j| qi.iter().zip(&kv.row(j)[cols.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                let p = softmax_row(&logits);
                let oi = &mut out.row_mut(i)[cols.clone()];
                for (&pj, &j) in p.iter().zip(keys.iter()) {
                    for (o, &x) in oi.iter_mut().zip(&vv.row(j)[cols.clone()]) {
                        *o += pj * x;
                    }
                }
                ph.push(p);
            }
            probs.push(ph);
        }
        self.op(
            out,
            &[q, k, v],
            Box::new(move |c| {
                let (qv, kv, vv, g) = (c.inputs[0], c.inputs[1], c.inputs[2], c.grad);
                let mut dq = Tensor::zeros(qv.shape());
                let mut dk = Tensor::zeros(kv.shape());
                let mut dv = Tensor::zeros(vv.shape());
                for (h, ph) in probs.iter().enumerate() {
                    let cols = h * dh..(h + 1) * dh;
                    for (i, keys) in rows.iter().enumerate() {
                        let gi = &g.row(i)[cols.clone()];
                        let p = &ph[i];
                        let dp: Vec<f64> = keys
                            .iter()
                            .map(|&j| gi.iter().zip(&vv.row(j)[cols.clone()]).map(|(a, b)| a * b).sum())
                            .collect();
                        let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                        for ((&pj, &dpj), &j) in p.iter().zip(&dp).zip(keys.iter()) {
                            for (o, &x) in dv.row_mut(j)[cols.clone()].iter_mut().zip(gi) {
                                *o += pj * x;
                            }
                            let ds = pj * (dpj - dot) * scale;
                            for (o, &x) in dq.row_mut(i)[cols.clone()].iter_mut().zip(&kv.row(j)[cols.clone()]) {
                                *o += ds * x;
                            }
                            for (o, &x) in dk.row_mut(j)[cols.clone()].iter_mut().zip(&qv.row(i)[cols.clone()]) {
                                *o += ds * x;
                            }
                        }
                    }
                }
                vec![dq, dk, dv]
            }),
        )
    }

    /// Applies per-row pairwise rotations to every head of `x`
    /// (`n × heads·dh`). `angles[i][p]` rotates the pair `(2p, 2p+1)` of
    /// each head in row `i`.
    pub fn rotate_pairs(&mut self, x: Var, angles: Rc<Vec<Vec<f64>>>, heads: usize) -> Var {
        let out = rotate_rows(self.value(x), &angles, heads, 1.0);
        self.op(
            out,
            &[x],
            Box::new(move |c| vec![rotate_rows(c.grad, &angles, heads, -1.0)]),
        )
    }

    /// Per-row softmax restricted to the selected columns; output is
    /// `n × k` with `selection[i]` giving the `k` columns of row `i`.
    pub fn select_softmax(&mut self, logits: Var, selection: Vec<Vec<usize>>) -> Var {
        let lv = self.value(logits);
        let k = selection.first().map_or(0, Vec::len);
        let mut out = Tensor::zeros(&[lv.rows(), k]);
        for (i, sel) in selection.iter().enumerate() {
            let picked: Vec<f64> = sel.iter().map(|&j| lv.get(i, j)).collect();
            out.row_mut(i).copy_from_slice(&softmax_row(&picked));
        }
        self.op(
            out,
            &[logits],
            Box::new(move |c| {
                let mut dl = Tensor::zeros(c.inputs[0].shape());
                for (i, sel) in selection.iter().enumerate() {
                    let (w, g) = (c.out.row(i), c.grad.row(i));
                    let dot: f64 = w.iter().zip(g).map(|(a, b)| a * b).sum();
                    for (s, &j) in sel.iter().enumerate() {
                        let cur = dl.get(i, j);
                        dl.set(i, j, cur + w[s] * (g[s] - dot));
                    }
                }
                vec![dl]
            }),
        )
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var, KernelError> {
        let (loss, grad) = cross_entropy(self.value(logits), targets, weights)?;
        Ok(self.op(
            Tensor::scalar(loss),
            &[logits],
            Box::new(move |c| vec![grad.map(|g| g * c.grad.item())]),
        ))
    }

    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor, weights: &[f64]) -> Result<Var, KernelError> {
        let (loss, grad) = bce_with_logits(self.value(logits), targets, weights)?;
        Ok(self.op(
            Tensor::scalar(loss),
            &[logits],
            Box::new(move |c| vec![grad.map(|g| g * c.grad.item())]),
        ))
    }
}

fn rotate_rows(x: &Tensor, angles: &[Vec<f64>], heads: usize, sign: f64) -> Tensor {
    let (n, width) = (x.rows(), x.cols());
    let dh = width / heads;
    let mut out = x.clone();
    for i in 0..n {
        let row = out.row_mut(i);
        for h in 0..heads {
            let head = &mut row[h * dh..(h + 1) * dh];
            for (p, &theta) in angles[i].iter().enumerate() {
                let (s, c) = (sign * theta).sin_cos();
                let (a, b) = (head[2 * p], head[2 * p + 1]);
                head[2 * p] = a * c - b * s;
                head[2 * p + 1] = a * s + b * c;
            }
        }
    }
    out
}
