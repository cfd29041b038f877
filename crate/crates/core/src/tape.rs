//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] with seed gradients on any set of nodes accumulates
//! gradients for all parameters that were read through [`Graph::param`].
//! Besides the usual dense-layer primitives the tape has fused operations for
//! the detector: deformable temporal sampling, coordinate updates, sampling
//! locations derived from segments and sinusoidal segment embeddings.

use std::sync::Arc;

use crate::coord::{segment_update, CoordExpression};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Level layout of a multi-level value matrix used by deformable sampling.
///
/// Columns of the location and weight matrices are ordered
/// `(head, level, point)` with the point index varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformLayout {
    pub heads: usize,
    pub points: usize,
    /// `(first row, number of rows)` of each level inside the value matrix.
    pub levels: Vec<(usize, usize)>,
}

impl DeformLayout {
    pub fn samples_per_head(&self) -> usize {
        self.levels.len() * self.points
    }

    pub fn columns(&self) -> usize {
        self.heads * self.samples_per_head()
    }

    #[inline]
    pub fn column(&self, head: usize, level: usize, point: usize) -> usize {
        (head * self.levels.len() + level) * self.points + point
    }
}

enum Op<T> {
    Constant,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SoftmaxGroups {
        x: Var,
        group: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Im2Col {
        x: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Deform {
        value: Var,
        loc: Var,
        weight: Var,
        layout: Arc<DeformLayout>,
    },
    SegmentUpdate {
        prev: Var,
        off: Var,
        expr: CoordExpression,
        duration: T,
    },
    SampleLocations {
        seg: Var,
        off: Var,
        layout: Arc<DeformLayout>,
        per_second: Vec<T>,
    },
    SegmentEmbed {
        seg: Var,
        tau: T,
        freqs: Vec<T>,
        width_gain: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients keyed by parameter, aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T> {
    pub grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn new(len: usize) -> Self {
        Self {
            grads: (0..len).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.index()].as_ref()
    }

    pub fn accumulate(&mut self, other: &ParamGrads<T>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn global_norm(&self) -> T {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.sq_norm())
            .sum::<T>()
            .sqrt()
    }
}

/// One recorded forward pass.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
}

fn grad_slot<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    v: Var,
    rows: usize,
    cols: usize,
) -> &mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, &[])
    }

    /// Reads a parameter; repeated reads share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id), &[]);
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// `x * w + b` with `x: n x k`, `w: k x m`, `b: 1 x m`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, k) = self.value(x).shape();
        let (wk, m) = self.value(w).shape();
        assert_eq!(k, wk, "linear: input width {k} vs weight rows {wk}");
        let mut out = Tensor::zeros(n, m);
        T::gemm(
            n,
            k,
            m,
            T::one(),
            &self.value(x).data,
            false,
            &self.value(w).data,
            false,
            T::zero(),
            &mut out.data,
        );
        if let Some(b) = b {
            let bias = &self.value(b).data;
            assert_eq!(bias.len(), m);
            for r in 0..n {
                for (o, bv) in out.row_mut(r).iter_mut().zip(bias) {
                    *o += *bv;
                }
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(out, Op::Linear { x, w, b }, &inputs)
    }

    /// `a * b` or `a * b^T`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (n, k) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        let (bk, m) = if trans_b { (bc, br) } else { (br, bc) };
        assert_eq!(k, bk, "matmul: inner dimensions {k} vs {bk}");
        let mut out = Tensor::zeros(n, m);
        T::gemm(
            n,
            k,
            m,
            T::one(),
            &self.value(a).data,
            false,
            &self.value(b).data,
            trans_b,
            T::zero(),
            &mut out.data,
        );
        self.push(out, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add: shape mismatch");
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 x m` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let mut out = self.value(x).clone();
        let r = &self.value(row).data;
        assert_eq!(r.len(), out.cols);
        for i in 0..out.rows {
            for (o, v) in out.row_mut(i).iter_mut().zip(r) {
                *o += *v;
            }
        }
        self.push(out, Op::AddRow { x, row }, &[x, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "mul: shape mismatch");
        for (o, v) in out.data.iter_mut().zip(&self.value(b).data) {
            *o *= *v;
        }
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    /// Row-wise layer normalization with affine parameters (`1 x cols` each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps = T::lit(1e-6);
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut out = Tensor::zeros(n, d);
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let dn = T::from_usize(d).unwrap();
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out.data[r * d + c] = h * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Softmax over consecutive blocks of `group` columns in every row.
    pub fn softmax_groups(&mut self, x: Var, group: usize) -> Var {
        let mut out = self.value(x).clone();
        assert!(
            group > 0 && out.cols % group == 0,
            "softmax group must divide columns"
        );
        for chunk in out.data.chunks_mut(group) {
            let max = chunk.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in chunk.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in chunk.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::SoftmaxGroups { x, group }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols);
        let mut out = Tensor::zeros(xv.rows, len);
        for r in 0..xv.rows {
            out.row_mut(r)
                .copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows, rows, "concat_cols: row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols, cols, "concat_rows: column mismatch");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        self.push(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(idx.len(), xv.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xv.row(i));
        }
        self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &idx)
    }

    /// Unfolds temporal windows: output row `i` holds input rows
    /// `i*stride - pad .. i*stride - pad + kernel` side by side (zeros outside).
    pub fn im2col(
        &mut self,
        x: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
        out_rows: usize,
    ) -> Var {
        let xv = self.value(x);
        let d = xv.cols;
        let mut out = Tensor::zeros(out_rows, kernel * d);
        for i in 0..out_rows {
            for j in 0..kernel {
                let src = (i * stride + j) as isize - pad as isize;
                if src >= 0 && (src as usize) < xv.rows {
                    out.row_mut(i)[j * d..(j + 1) * d].copy_from_slice(xv.row(src as usize));
                }
            }
        }
        self.push(
            out,
            Op::Im2Col {
                x,
                kernel,
                stride,
                pad,
            },
            &[x],
        )
    }

    /// Multi-level deformable sampling with linear interpolation.
    ///
    /// `value` is `rows x dim` with heads splitting `dim` evenly; `loc` and
    /// `weight` are `queries x layout.columns()` fractional indices (per-level
    /// index space) and mixing weights. Locations are clamped to each level.
    pub fn deform_sample(
        &mut self,
        value: Var,
        loc: Var,
        weight: Var,
        layout: Arc<DeformLayout>,
    ) -> Var {
        let vv = self.value(value);
        let lv = self.value(loc);
        let wv = self.value(weight);
        let dim = vv.cols;
        let heads = layout.heads;
        assert_eq!(dim % heads, 0, "value width must split across heads");
        assert_eq!(lv.cols, layout.columns());
        assert_eq!(wv.shape(), lv.shape());
        let dh = dim / heads;
        let nq = lv.rows;
        let mut out = Tensor::zeros(nq, dim);
        for q in 0..nq {
            let lrow = lv.row(q);
            let wrow = wv.row(q);
            for h in 0..heads {
                let acc = &mut out.data[q * dim + h * dh..q * dim + (h + 1) * dh];
                for (l, &(start, len)) in layout.levels.iter().enumerate() {
                    for p in 0..layout.points {
                        let col = layout.column(h, l, p);
                        let (i0, i1, f, _) = interp(lrow[col], len);
                        let a = wrow[col];
                        let w0 = a * (T::one() - f);
                        let w1 = a * f;
                        let r0 = &vv.data
                            [(start + i0) * dim + h * dh..(start + i0) * dim + (h + 1) * dh];
                        let r1 = &vv.data
                            [(start + i1) * dim + h * dh..(start + i1) * dim + (h + 1) * dh];
                        for k in 0..dh {
                            acc[k] += w0 * r0[k] + w1 * r1[k];
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Op::Deform {
                value,
                loc,
                weight,
                layout,
            },
            &[value, loc, weight],
        )
    }

    /// Applies a per-row segment update: `prev` and the result are `n x 2`
    /// `(center, half-width)` in seconds, `off` is `n x 2` offsets.
    pub fn segment_update(
        &mut self,
        prev: Var,
        off: Var,
        expr: CoordExpression,
        duration: T,
    ) -> Var {
        let pv = self.value(prev);
        let ov = self.value(off);
        assert_eq!(pv.cols, 2);
        assert_eq!(ov.shape(), pv.shape());
        let mut out = Tensor::zeros(pv.rows, 2);
        for r in 0..pv.rows {
            let u = segment_update(
                expr,
                pv.get(r, 0),
                pv.get(r, 1),
                ov.get(r, 0),
                ov.get(r, 1),
                duration,
            );
            out.data[2 * r] = u.center;
            out.data[2 * r + 1] = u.width;
        }
        self.push(
            out,
            Op::SegmentUpdate {
                prev,
                off,
                expr,
                duration,
            },
            &[prev, off],
        )
    }

    /// Sampling indices inside segments: for column `(h, l, p)` the time
    /// `center + off * half_width` is converted to level `l` index space via
    /// `time * per_second[l] - 0.5`.
    pub fn sample_locations(
        &mut self,
        seg: Var,
        off: Var,
        layout: Arc<DeformLayout>,
        per_second: Vec<T>,
    ) -> Var {
        let sv = self.value(seg);
        let ov = self.value(off);
        assert_eq!(ov.cols, layout.columns());
        assert_eq!(per_second.len(), layout.levels.len());
        let half = T::lit(0.5);
        let mut out = Tensor::zeros(ov.rows, ov.cols);
        for r in 0..ov.rows {
            let (c, w) = (sv.get(r, 0), sv.get(r, 1));
            for h in 0..layout.heads {
                for (l, k) in per_second.iter().enumerate() {
                    for p in 0..layout.points {
                        let col = layout.column(h, l, p);
                        out.data[r * ov.cols + col] = (c + ov.get(r, col) * w) * *k - half;
                    }
                }
            }
        }
        self.push(
            out,
            Op::SampleLocations {
                seg,
                off,
                layout,
                per_second,
            },
            &[seg, off],
        )
    }

    /// Sinusoidal embedding of `n x 2` segments: the first half of the output
    /// encodes `center / tau`, the second half `width_gain * ln(half_width / tau)`.
    pub fn segment_embed(&mut self, seg: Var, tau: T, dims: usize) -> Var {
        assert!(
            dims % 4 == 0,
            "segment embedding width must be a multiple of 4"
        );
        let nf = dims / 4;
        let freqs: Vec<T> = (0..nf)
            .map(|i| T::lit(1.0 / 10000f64.powf(2.0 * i as f64 / (dims / 2) as f64)))
            .collect();
        let width_gain = T::lit(8.0);
        let sv = self.value(seg);
        let mut out = Tensor::zeros(sv.rows, dims);
        for r in 0..sv.rows {
            let u = sv.get(r, 0) / tau;
            let v = width_gain * (sv.get(r, 1) / tau).ln();
            let row = out.row_mut(r);
            for (i, f) in freqs.iter().enumerate() {
                row[2 * i] = (u * *f).sin();
                row[2 * i + 1] = (u * *f).cos();
                row[2 * nf + 2 * i] = (v * *f).sin();
                row[2 * nf + 2 * i + 1] = (v * *f).cos();
            }
        }
        self.push(
            out,
            Op::SegmentEmbed {
                seg,
                tau,
                freqs,
                width_gain,
            },
            &[seg],
        )
    }

    /// Back-propagates the given seed gradients and returns parameter gradients.
    pub fn backward(&self, seeds: Vec<(Var, Tensor<T>)>) -> ParamGrads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(
                g.shape(),
                self.value(v).shape(),
                "seed gradient shape mismatch"
            );
            match grads[v.0].as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => grads[v.0] = Some(g),
            }
        }
        let mut out = ParamGrads::new(self.params.len());
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, g, &mut grads, &mut out);
        }
        out
    }

    fn backward_node(
        &self,
        i: usize,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        out: &mut ParamGrads<T>,
    ) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => match out.grads[id.index()].as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => out.grads[id.index()] = Some(g),
            },
            Op::Linear { x, w, b } => {
                let (n, k) = self.value(*x).shape();
                let m = g.cols;
                if self.needs(*x) {
                    let dx = grad_slot(grads, *x, n, k);
                    T::gemm(
                        n,
                        m,
                        k,
                        T::one(),
                        &g.data,
                        false,
                        &self.value(*w).data,
                        true,
                        T::one(),
                        &mut dx.data,
                    );
                }
                if self.needs(*w) {
                    let dw = grad_slot(grads, *w, k, m);
                    T::gemm(
                        k,
                        n,
                        m,
                        T::one(),
                        &self.value(*x).data,
                        true,
                        &g.data,
                        false,
                        T::one(),
                        &mut dw.data,
                    );
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let db = grad_slot(grads, *b, 1, m);
                        for r in 0..n {
                            for (d, v) in db.data.iter_mut().zip(g.row(r)) {
                                *d += *v;
                            }
                        }
                    }
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (n, k) = self.value(*a).shape();
                let (br, bc) = self.value(*b).shape();
                let m = g.cols;
                if self.needs(*a) {
                    let da = grad_slot(grads, *a, n, k);
                    // y = a b   => da = g b^T ; y = a b^T => da = g b
                    T::gemm(
                        n,
                        m,
                        k,
                        T::one(),
                        &g.data,
                        false,
                        &self.value(*b).data,
                        !*trans_b,
                        T::one(),
                        &mut da.data,
                    );
                }
                if self.needs(*b) {
                    let db = grad_slot(grads, *b, br, bc);
                    if *trans_b {
                        // db = g^T a  (m x k)
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g.data,
                            true,
                            &self.value(*a).data,
                            false,
                            T::one(),
                            &mut db.data,
                        );
                    } else {
                        // db = a^T g  (k x m)
                        T::gemm(
                            k,
                            n,
                            m,
                            T::one(),
                            &self.value(*a).data,
                            true,
                            &g.data,
                            false,
                            T::one(),
                            &mut db.data,
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        grad_slot(grads, *v, g.rows, g.cols).add_assign(&g);
                    }
                }
            }
            Op::AddRow { x, row } => {
                if self.needs(*row) {
                    let dr = grad_slot(grads, *row, 1, g.cols);
                    for r in 0..g.rows {
                        for (d, v) in dr.data.iter_mut().zip(g.row(r)) {
                            *d += *v;
                        }
                    }
                }
                if self.needs(*x) {
                    grad_slot(grads, *x, g.rows, g.cols).add_assign(&g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let da = grad_slot(grads, *a, g.rows, g.cols);
                    for ((d, gv), o) in da.data.iter_mut().zip(&g.data).zip(&bv.data) {
                        *d += *gv * *o;
                    }
                }
                if self.needs(*b) {
                    let db = grad_slot(grads, *b, g.rows, g.cols);
                    for ((d, gv), o) in db.data.iter_mut().zip(&g.data).zip(&av.data) {
                        *d += *gv * *o;
                    }
                }
            }
            Op::Scale(x, s) => {
                let dx = grad_slot(grads, *x, g.rows, g.cols);
                for (d, gv) in dx.data.iter_mut().zip(&g.data) {
                    *d += *gv * *s;
                }
            }
            Op::Relu(x) => {
                let dx = grad_slot(grads, *x, g.rows, g.cols);
                for ((d, gv), y) in dx.data.iter_mut().zip(&g.data).zip(&node.value.data) {
                    if *y > T::zero() {
                        *d += *gv;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, d) = g.shape();
                let gm = &self.value(*gamma).data;
                if self.needs(*gamma) {
                    let dg = grad_slot(grads, *gamma, 1, d);
                    for r in 0..n {
                        for c in 0..d {
                            dg.data[c] += g.data[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if self.needs(*beta) {
                    let db = grad_slot(grads, *beta, 1, d);
                    for r in 0..n {
                        for c in 0..d {
                            db.data[c] += g.data[r * d + c];
                        }
                    }
                }
                if self.needs(*x) {
                    let dn = T::from_usize(d).unwrap();
                    let dx = grad_slot(grads, *x, n, d);
                    for r in 0..n {
                        let mut sum_dy = T::zero();
                        let mut sum_dy_xhat = T::zero();
                        for c in 0..d {
                            let dy = g.data[r * d + c] * gm[c];
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat[r * d + c];
                        }
                        for c in 0..d {
                            let dy = g.data[r * d + c] * gm[c];
                            dx.data[r * d + c] +=
                                rstd[r] * (dy - sum_dy / dn - xhat[r * d + c] * sum_dy_xhat / dn);
                        }
                    }
                }
            }
            Op::SoftmaxGroups { x, group } => {
                let dx = grad_slot(grads, *x, g.rows, g.cols);
                for ((dchunk, gchunk), ychunk) in dx
                    .data
                    .chunks_mut(*group)
                    .zip(g.data.chunks(*group))
                    .zip(node.value.data.chunks(*group))
                {
                    let dot: T = gchunk.iter().zip(ychunk).map(|(a, b)| *a * *b).sum();
                    for ((d, gv), y) in dchunk.iter_mut().zip(gchunk).zip(ychunk) {
                        *d += *y * (*gv - dot);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (n, c) = self.value(*x).shape();
                let dx = grad_slot(grads, *x, n, c);
                for r in 0..n {
                    for (d, gv) in dx.row_mut(r)[*start..*start + g.cols]
                        .iter_mut()
                        .zip(g.row(r))
                    {
                        *d += *gv;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (n, c) = self.value(*p).shape();
                    if self.needs(*p) {
                        let dp = grad_slot(grads, *p, n, c);
                        for r in 0..n {
                            for (d, gv) in dp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + c]) {
                                *d += *gv;
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let (n, c) = self.value(*p).shape();
                    if self.needs(*p) {
                        let dp = grad_slot(grads, *p, n, c);
                        for (d, gv) in dp.data.iter_mut().zip(&g.data[off * c..(off + n) * c]) {
                            *d += *gv;
                        }
                    }
                    off += n;
                }
            }
            Op::GatherRows { x, idx } => {
                let (n, c) = self.value(*x).shape();
                let dx = grad_slot(grads, *x, n, c);
                for (r, &src) in idx.iter().enumerate() {
                    for (d, gv) in dx.row_mut(src).iter_mut().zip(g.row(r)) {
                        *d += *gv;
                    }
                }
            }
            Op::Im2Col {
                x,
                kernel,
                stride,
                pad,
            } => {
                let (n, d) = self.value(*x).shape();
                let dx = grad_slot(grads, *x, n, d);
                for r in 0..g.rows {
                    for j in 0..*kernel {
                        let src = (r * stride + j) as isize - *pad as isize;
                        if src >= 0 && (src as usize) < n {
                            for (dv, gv) in dx
                                .row_mut(src as usize)
                                .iter_mut()
                                .zip(&g.row(r)[j * d..(j + 1) * d])
                            {
                                *dv += *gv;
                            }
                        }
                    }
                }
            }
            Op::Deform {
                value,
                loc,
                weight,
                layout,
            } => {
                self.backward_deform(&g, *value, *loc, *weight, layout, grads);
            }
            Op::SegmentUpdate {
                prev,
                off,
                expr,
                duration,
            } => {
                let pv = self.value(*prev);
                let ov = self.value(*off);
                let n = pv.rows;
                let mut dprev = Tensor::zeros(n, 2);
                let mut doff = Tensor::zeros(n, 2);
                for r in 0..n {
                    let u = segment_update(
                        *expr,
                        pv.get(r, 0),
                        pv.get(r, 1),
                        ov.get(r, 0),
                        ov.get(r, 1),
                        *duration,
                    );
                    let (gc, gw) = (g.get(r, 0), g.get(r, 1));
                    dprev.data[2 * r] = gc * u.dc_dpc;
                    dprev.data[2 * r + 1] = gc * u.dc_dpw + gw * u.dw_dpw;
                    doff.data[2 * r] = gc * u.dc_doc;
                    doff.data[2 * r + 1] = gw * u.dw_dow;
                }
                if self.needs(*prev) {
                    grad_slot(grads, *prev, n, 2).add_assign(&dprev);
                }
                if self.needs(*off) {
                    grad_slot(grads, *off, n, 2).add_assign(&doff);
                }
            }
            Op::SampleLocations {
                seg,
                off,
                layout,
                per_second,
            } => {
                let sv = self.value(*seg);
                let ov = self.value(*off);
                let n = ov.rows;
                let cols = ov.cols;
                let mut dseg = Tensor::zeros(n, 2);
                let mut doff = Tensor::zeros(n, cols);
                for r in 0..n {
                    let w = sv.get(r, 1);
                    for h in 0..layout.heads {
                        for (l, k) in per_second.iter().enumerate() {
                            for p in 0..layout.points {
                                let col = layout.column(h, l, p);
                                let gv = g.data[r * cols + col] * *k;
                                dseg.data[2 * r] += gv;
                                dseg.data[2 * r + 1] += gv * ov.get(r, col);
                                doff.data[r * cols + col] = gv * w;
                            }
                        }
                    }
                }
                if self.needs(*seg) {
                    grad_slot(grads, *seg, n, 2).add_assign(&dseg);
                }
                if self.needs(*off) {
                    grad_slot(grads, *off, n, cols).add_assign(&doff);
                }
            }
            Op::SegmentEmbed {
                seg,
                tau,
                freqs,
                width_gain,
            } => {
                let sv = self.value(*seg);
                let n = sv.rows;
                let nf = freqs.len();
                let ds = grad_slot(grads, *seg, n, 2);
                for r in 0..n {
                    let y = node.value.row(r);
                    let gr = g.row(r);
                    let mut du = T::zero();
                    let mut dv = T::zero();
                    for (i, f) in freqs.iter().enumerate() {
                        // d sin(zf)/dz = f cos(zf), d cos(zf)/dz = -f sin(zf)
                        du += *f * (gr[2 * i] * y[2 * i + 1] - gr[2 * i + 1] * y[2 * i]);
                        dv += *f
                            * (gr[2 * nf + 2 * i] * y[2 * nf + 2 * i + 1]
                                - gr[2 * nf + 2 * i + 1] * y[2 * nf + 2 * i]);
                    }
                    ds.data[2 * r] += du / *tau;
                    ds.data[2 * r + 1] += dv * *width_gain / sv.get(r, 1);
                }
            }
        }
    }

    fn backward_deform(
        &self,
        g: &Tensor<T>,
        value: Var,
        loc: Var,
        weight: Var,
        layout: &DeformLayout,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let vv = self.value(value);
        let lv = self.value(loc);
        let wv = self.value(weight);
        let dim = vv.cols;
        let dh = dim / layout.heads;
        let nq = lv.rows;
        let cols = lv.cols;
        let need_v = self.needs(value);
        let mut dvalue = if need_v {
            Some(Tensor::zeros(vv.rows, dim))
        } else {
            None
        };
        let mut dloc = Tensor::zeros(nq, cols);
        let mut dweight = Tensor::zeros(nq, cols);
        for q in 0..nq {
            let lrow = lv.row(q);
            let wrow = wv.row(q);
            for h in 0..layout.heads {
                let gq = &g.data[q * dim + h * dh..q * dim + (h + 1) * dh];
                for (l, &(start, len)) in layout.levels.iter().enumerate() {
                    for p in 0..layout.points {
                        let col = layout.column(h, l, p);
                        let (i0, i1, f, inside) = interp(lrow[col], len);
                        let a = wrow[col];
                        let o0 = (start + i0) * dim + h * dh;
                        let o1 = (start + i1) * dim + h * dh;
                        let r0 = &vv.data[o0..o0 + dh];
                        let r1 = &vv.data[o1..o1 + dh];
                        let mut dot_sample = T::zero();
                        let mut dot_slope = T::zero();
                        for k in 0..dh {
                            dot_sample += gq[k] * ((T::one() - f) * r0[k] + f * r1[k]);
                            dot_slope += gq[k] * (r1[k] - r0[k]);
                        }
                        dweight.data[q * cols + col] = dot_sample;
                        if inside {
                            dloc.data[q * cols + col] = a * dot_slope;
                        }
                        if let Some(dv) = dvalue.as_mut() {
                            let w0 = a * (T::one() - f);
                            let w1 = a * f;
                            for k in 0..dh {
                                dv.data[o0 + k] += w0 * gq[k];
                                dv.data[o1 + k] += w1 * gq[k];
                            }
                        }
                    }
                }
            }
        }
        if let Some(dv) = dvalue {
            grad_slot(grads, value, vv.rows, dim).add_assign(&dv);
        }
        if self.needs(loc) {
            grad_slot(grads, loc, nq, cols).add_assign(&dloc);
        }
        if self.needs(weight) {
            grad_slot(grads, weight, nq, cols).add_assign(&dweight);
        }
    }
}

/// Interpolation stencil for a fractional index over `len` rows:
/// `(lower row, upper row, fraction, unclamped)`.
#[inline]
fn interp<T: Scalar>(x: T, len: usize) -> (usize, usize, T, bool) {
    let max = T::from_usize(len - 1).unwrap();
    if len == 1 || !x.is_finite() {
        return (0, 0, T::zero(), false);
    }
    let inside = x >= T::zero() && x <= max;
    let xc = x.max(T::zero()).min(max);
    let fl = xc.floor();
    let i0 = fl.to_usize().unwrap_or(0).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, xc - fl, inside)
}

/// Linear interpolation of one row of `features` (`rows x dim`) at a fractional index,
/// clamped to the valid range.
pub fn interpolate_row<T: Scalar>(features: &Tensor<T>, location: T) -> Vec<T> {
    let (i0, i1, f, _) = interp(location, features.rows);
    features
        .row(i0)
        .iter()
        .zip(features.row(i1))
        .map(|(a, b)| *a * (T::one() - f) + *b * f)
        .collect()
}
