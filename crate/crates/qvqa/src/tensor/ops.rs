//! Forward op constructors and their reverse-mode rules.

use super::{accumulate, shape_err, Ix, Op, Tape, Tensor, LN_EPS, MASK_NEG, NORM_EPS, S};
use crate::error::{Error, Result};

// ── raw matmul kernels ───────────────────────────────────────────────

/// out[m,n] += a[m,k] · b[k,n]
pub(crate) fn mm_nn(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ
pub(crate) fn mm_nt(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            orow[j] += acc;
        }
    }
}

/// out[m,n] += a[k,m]ᵀ · b[k,n]
pub(crate) fn mm_tn(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn gelu_fwd(x: S) -> S {
    let c = (2.0 / std::f64::consts::PI).sqrt() as S;
    let u = c * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_bwd(x: S) -> S {
    let c = (2.0 / std::f64::consts::PI).sqrt() as S;
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_row(row: &mut [S]) {
    let m = row.iter().cloned().fold(S::NEG_INFINITY, S::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn lse(xs: &[S]) -> S {
    let m = xs.iter().cloned().fold(S::NEG_INFINITY, S::max);
    m + xs.iter().map(|&v| (v - m).exp()).sum::<S>().ln()
}

impl Tape {
    fn same_shape(&self, op: &str, a: Ix, b: Ix) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            Err(shape_err(op, self.value(a).shape(), self.value(b).shape()))
        } else {
            Ok(())
        }
    }

    /// `a[m,k] · b[k,n]`; a rank-1 left operand is treated as one row and
    /// yields a rank-1 result.
    pub fn matmul(&mut self, a: Ix, b: Ix) -> Result<Ix> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 || tb.rank() != 2 {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        mm_nn(ta.data(), tb.data(), m, k, n, &mut out);
        let shape = if ta.rank() == 1 { vec![n] } else { vec![m, n] };
        Ok(self.push(Tensor { shape, data: out }, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: Ix) -> Result<Ix> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(shape_err("transpose", t.shape(), &[]));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        Ok(self.push(Tensor { shape: vec![c, r], data: out }, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Ix, b: Ix) -> Result<Ix> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Ix, b: Ix) -> Result<Ix> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Ix, b: Ix) -> Result<Ix> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Ix, c: S) -> Ix {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * c).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, Op::Scale(a, c))
    }

    pub fn mul_scalar_node(&mut self, x: Ix, s: Ix) -> Result<Ix> {
        if self.value(s).numel() != 1 {
            return Err(shape_err("mul_scalar_node", self.value(x).shape(), self.value(s).shape()));
        }
        let sv = self.value(s).item();
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * sv).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::MulScalarNode { x, s }))
    }

    pub fn div_scalar_node(&mut self, x: Ix, s: Ix) -> Result<Ix> {
        if self.value(s).numel() != 1 {
            return Err(shape_err("div_scalar_node", self.value(x).shape(), self.value(s).shape()));
        }
        let sv = self.value(s).item();
        let t = self.value(x);
        let data = t.data().iter().map(|v| v / sv).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::DivScalarNode { x, s }))
    }

    /// `mat + row` with `row` added to every row of `mat`. The one
    /// deliberate broadcast in the catalog (bias terms).
    pub fn add_row(&mut self, mat: Ix, row: Ix) -> Result<Ix> {
        let (tm, tr) = (self.value(mat), self.value(row));
        if tr.rank() != 1 || tr.numel() != tm.cols() {
            return Err(shape_err("add_row", tm.shape(), tr.shape()));
        }
        let c = tm.cols();
        let mut data = tm.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += tr.data()[i % c];
        }
        let shape = tm.shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::AddRow { mat, row }))
    }

    /// Column-wise mean of a matrix: `[r,c] -> [c]`.
    pub fn mean_axis0(&mut self, a: Ix) -> Result<Ix> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(shape_err("mean_axis0", t.shape(), &[]));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += t.data()[i * c + j];
            }
        }
        out.iter_mut().for_each(|v| *v /= r as S);
        Ok(self.push(Tensor { shape: vec![c], data: out }, Op::MeanAxis0(a)))
    }

    pub fn mean_all(&mut self, a: Ix) -> Ix {
        let t = self.value(a);
        let m = t.data().iter().sum::<S>() / t.numel() as S;
        self.push(Tensor::scalar(m), Op::MeanAll(a))
    }

    pub fn concat_rows(&mut self, parts: &[Ix]) -> Result<Ix> {
        assert!(!parts.is_empty());
        let c = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(shape_err("concat_rows", self.value(parts[0]).shape(), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        Ok(self.push(Tensor { shape: vec![rows, c], data }, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Ix]) -> Result<Ix> {
        assert!(!parts.is_empty());
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != r {
                return Err(shape_err("concat_cols", self.value(parts[0]).shape(), self.value(p).shape()));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            for i in 0..r {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&t.data()[i * w..(i + 1) * w]);
            }
            off += w;
        }
        Ok(self.push(Tensor { shape: vec![r, total], data }, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Ix, start: usize, end: usize) -> Result<Ix> {
        let t = self.value(x);
        if t.rank() != 2 || start >= end || end > t.rows() {
            return Err(Error::Shape(format!(
                "slice_rows [{start},{end}) out of range for shape {:?}",
                t.shape()
            )));
        }
        let c = t.cols();
        let data = t.data()[start * c..end * c].to_vec();
        Ok(self.push(
            Tensor { shape: vec![end - start, c], data },
            Op::SliceRows { x, start, end },
        ))
    }

    /// One row of a matrix, as a vector.
    pub fn row(&mut self, x: Ix, i: usize) -> Result<Ix> {
        let r = self.slice_rows(x, i, i + 1)?;
        let c = self.value(r).cols();
        self.nodes[r].value.shape = vec![c];
        Ok(r)
    }

    pub fn slice_cols(&mut self, x: Ix, start: usize, end: usize) -> Result<Ix> {
        let t = self.value(x);
        if t.rank() != 2 || start >= end || end > t.cols() {
            return Err(Error::Shape(format!(
                "slice_cols [{start},{end}) out of range for shape {:?}",
                t.shape()
            )));
        }
        let (r, c) = (t.rows(), t.cols());
        let w = end - start;
        let mut data = vec![0.0; r * w];
        for i in 0..r {
            data[i * w..(i + 1) * w].copy_from_slice(&t.data()[i * c + start..i * c + end]);
        }
        Ok(self.push(Tensor { shape: vec![r, w], data }, Op::SliceCols { x, start, end }))
    }

    /// Row-stabilized softmax over the last axis (rank-1 input is one row).
    pub fn softmax_rows(&mut self, x: Ix) -> Ix {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut data = t.data().to_vec();
        for i in 0..r {
            softmax_row(&mut data[i * c..(i + 1) * c]);
        }
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, Op::SoftmaxRows(x))
    }

    pub fn log(&mut self, x: Ix) -> Ix {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.ln()).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, Op::Log(x))
    }

    pub fn exp(&mut self, x: Ix) -> Ix {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.exp()).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, Op::Exp(x))
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Ix, gain: Ix, bias: Ix) -> Result<Ix> {
        let t = self.value(x);
        let c = t.cols();
        if self.value(gain).shape() != [c] || self.value(bias).shape() != [c] {
            return Err(shape_err("layer_norm", t.shape(), self.value(gain).shape()));
        }
        let r = t.rows();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            let mu = row.iter().sum::<S>() / c as S;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<S>() / c as S;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..c {
                let xhat = (row[j] - mu) * inv;
                data[i * c + j] = xhat * self.value(gain).data()[j] + self.value(bias).data()[j];
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::LayerNorm { x, gain, bias }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Ix) -> Ix {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| gelu_fwd(v)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, Op::Gelu(x))
    }

    /// Gather rows of `table` by token id.
    pub fn embedding(&mut self, table: Ix, ids: &[usize]) -> Result<Ix> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(shape_err("embedding", t.shape(), &[ids.len()]));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Vocab(format!("token id {bad} out of range (vocab {v})")));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            Tensor { shape: vec![ids.len(), d], data },
            Op::Embedding { table, ids: ids.to_vec() },
        ))
    }

    /// Additive attention mask: `MASK_NEG` added where `allowed` is false.
    /// `allowed` is row-major over the score matrix.
    pub fn add_mask(&mut self, x: Ix, allowed: &[bool]) -> Result<Ix> {
        let t = self.value(x);
        if allowed.len() != t.numel() {
            return Err(Error::Shape(format!(
                "mask of {} entries applied to shape {:?}",
                allowed.len(),
                t.shape()
            )));
        }
        let data = t
            .data()
            .iter()
            .zip(allowed)
            .map(|(&v, &ok)| if ok { v } else { v + MASK_NEG })
            .collect();
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::AddMask { x }))
    }

    /// Cosine similarity of two equal-size tensors viewed as flat vectors,
    /// with a 1e-8 guard added to each norm.
    pub fn cosine_sim(&mut self, a: Ix, b: Ix) -> Result<Ix> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return Err(shape_err("cosine_sim", ta.shape(), tb.shape()));
        }
        let dot: S = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let na = ta.data().iter().map(|v| v * v).sum::<S>().sqrt();
        let nb = tb.data().iter().map(|v| v * v).sum::<S>().sqrt();
        let s = dot / ((na + NORM_EPS) * (nb + NORM_EPS));
        Ok(self.push(Tensor::scalar(s), Op::CosineSim(a, b)))
    }

    /// Mean over unmasked positions of `-log softmax(logits)[target]`,
    /// stabilized with log-sum-exp. Rejects an all-masked selection.
    pub fn cross_entropy(&mut self, logits: Ix, targets: &[usize], mask: &[bool]) -> Result<Ix> {
        let t = self.value(logits);
        let (r, v) = (t.rows(), t.cols());
        if targets.len() != r || mask.len() != r {
            return Err(Error::Shape(format!(
                "cross_entropy: {} logit rows vs {} targets / {} mask entries",
                r,
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::Vocab(format!("target id {bad} out of range (vocab {v})")));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Invalid("cross_entropy: all positions masked".into()));
        }
        let mut total = 0.0;
        for i in 0..r {
            if mask[i] {
                let row = &t.data()[i * v..(i + 1) * v];
                total += lse(row) - row[targets[i]];
            }
        }
        Ok(self.push(
            Tensor::scalar(total / count as S),
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec() },
        ))
    }

    pub fn stack_scalars(&mut self, parts: &[Ix]) -> Result<Ix> {
        assert!(!parts.is_empty());
        let mut data = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.numel() != 1 {
                return Err(shape_err("stack_scalars", &[1], t.shape()));
            }
            data.push(t.item());
        }
        Ok(self.push(Tensor::vector(data), Op::StackScalars(parts.to_vec())))
    }

    /// Max of a vector; ties route the gradient to the first maximum.
    pub fn reduce_max(&mut self, x: Ix) -> Ix {
        let t = self.value(x);
        let m = t.data().iter().cloned().fold(S::NEG_INFINITY, S::max);
        self.push(Tensor::scalar(m), Op::ReduceMax(x))
    }

    /// Stabilized log-sum-exp of a vector.
    pub fn log_sum_exp(&mut self, x: Ix) -> Ix {
        let t = self.value(x);
        let v = lse(t.data());
        self.push(Tensor::scalar(v), Op::LogSumExp(x))
    }

    /// Elementwise clamp; gradient is zero where the bound is active.
    pub fn clamp(&mut self, x: Ix, lo: S, hi: S) -> Ix {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, Op::Clamp { x, lo, hi })
    }

    // ── reverse-mode dispatch ────────────────────────────────────────

    pub(crate) fn vjp(&self, ix: Ix, grads: &mut Vec<Option<Tensor>>) {
        let g = grads[ix].clone().expect("vjp on node without gradient");
        let node = &self.nodes[ix];
        match &node.op {
            Op::Const | Op::Param(_) => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                accumulate(&mut grads[*a], ta.shape(), |da| {
                    mm_nt(g.data(), tb.data(), m, n, k, da);
                });
                accumulate(&mut grads[*b], tb.shape(), |db| {
                    mm_tn(ta.data(), g.data(), k, m, n, db);
                });
            }
            Op::Transpose(a) => {
                let ta = self.value(*a);
                let (r, c) = (ta.shape()[0], ta.shape()[1]);
                accumulate(&mut grads[*a], ta.shape(), |da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g.data()[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for &p in [a, b] {
                    accumulate(&mut grads[p], g.shape(), |dp| {
                        for (d, s) in dp.iter_mut().zip(g.data()) {
                            *d += *s;
                        }
                    });
                }
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[*a], g.shape(), |da| {
                    for (d, s) in da.iter_mut().zip(g.data()) {
                        *d += *s;
                    }
                });
                accumulate(&mut grads[*b], g.shape(), |db| {
                    for (d, s) in db.iter_mut().zip(g.data()) {
                        *d -= *s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).clone(), self.value(*b).clone());
                accumulate(&mut grads[*a], ta.shape(), |da| {
                    for ((d, s), v) in da.iter_mut().zip(g.data()).zip(tb.data()) {
                        *d += *s * *v;
                    }
                });
                accumulate(&mut grads[*b], tb.shape(), |db| {
                    for ((d, s), v) in db.iter_mut().zip(g.data()).zip(ta.data()) {
                        *d += *s * *v;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(&mut grads[*a], g.shape(), |da| {
                    for (d, s) in da.iter_mut().zip(g.data()) {
                        *d += *s * c;
                    }
                });
            }
            Op::MulScalarNode { x, s } => {
                let sv = self.value(*s).item();
                let tx = self.value(*x).clone();
                accumulate(&mut grads[*x], tx.shape(), |dx| {
                    for (d, gv) in dx.iter_mut().zip(g.data()) {
                        *d += *gv * sv;
                    }
                });
                let ds: S = g.data().iter().zip(tx.data()).map(|(gv, xv)| gv * xv).sum();
                accumulate(&mut grads[*s], &[1], |d| d[0] += ds);
            }
            Op::DivScalarNode { x, s } => {
                let sv = self.value(*s).item();
                let tx = self.value(*x).clone();
                accumulate(&mut grads[*x], tx.shape(), |dx| {
                    for (d, gv) in dx.iter_mut().zip(g.data()) {
                        *d += *gv / sv;
                    }
                });
                let ds: S =
                    -g.data().iter().zip(tx.data()).map(|(gv, xv)| gv * xv).sum::<S>() / (sv * sv);
                accumulate(&mut grads[*s], &[1], |d| d[0] += ds);
            }
            Op::AddRow { mat, row } => {
                let c = self.value(*row).numel();
                accumulate(&mut grads[*mat], self.value(*mat).shape(), |dm| {
                    for (d, s) in dm.iter_mut().zip(g.data()) {
                        *d += *s;
                    }
                });
                accumulate(&mut grads[*row], &[c], |dr| {
                    for (i, s) in g.data().iter().enumerate() {
                        dr[i % c] += *s;
                    }
                });
            }
            Op::MeanAxis0(a) => {
                let ta = self.value(*a);
                let (r, c) = (ta.shape()[0], ta.shape()[1]);
                accumulate(&mut grads[*a], ta.shape(), |da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g.data()[j] / r as S;
                        }
                    }
                });
            }
            Op::MeanAll(a) => {
                let ta = self.value(*a);
                let n = ta.numel() as S;
                let gv = g.item();
                accumulate(&mut grads[*a], ta.shape(), |da| {
                    for d in da.iter_mut() {
                        *d += gv / n;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let n = tp.numel();
                    accumulate(&mut grads[p], tp.shape(), |dp| {
                        for (d, s) in dp.iter_mut().zip(&g.data()[off..off + n]) {
                            *d += *s;
                        }
                    });
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let r = self.value(parts[0]).rows();
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let w = tp.cols();
                    accumulate(&mut grads[p], tp.shape(), |dp| {
                        for i in 0..r {
                            for j in 0..w {
                                dp[i * w + j] += g.data()[i * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::SliceRows { x, start, end } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let (start, end) = (*start, *end);
                accumulate(&mut grads[*x], tx.shape(), |dx| {
                    for (d, s) in dx[start * c..end * c].iter_mut().zip(g.data()) {
                        *d += *s;
                    }
                });
            }
            Op::SliceCols { x, start, end } => {
                let tx = self.value(*x);
                let (r, c) = (tx.rows(), tx.cols());
                let w = end - start;
                let start = *start;
                accumulate(&mut grads[*x], tx.shape(), |dx| {
                    for i in 0..r {
                        for j in 0..w {
                            dx[i * c + start + j] += g.data()[i * w + j];
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let (r, c) = (y.rows(), y.cols());
                accumulate(&mut grads[*x], y.shape(), |dx| {
                    for i in 0..r {
                        let yr = &y.data()[i * c..(i + 1) * c];
                        let gr = &g.data()[i * c..(i + 1) * c];
                        let dot: S = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Log(x) => {
                let tx = self.value(*x).clone();
                accumulate(&mut grads[*x], tx.shape(), |dx| {
                    for ((d, s), v) in dx.iter_mut().zip(g.data()).zip(tx.data()) {
                        *d += *s / *v;
                    }
                });
            }
            Op::Exp(x) => {
                let y = node.value.clone();
                accumulate(&mut grads[*x], y.shape(), |dx| {
                    for ((d, s), v) in dx.iter_mut().zip(g.data()).zip(y.data()) {
                        *d += *s * *v;
                    }
                });
            }
            Op::LayerNorm { x, gain, bias } => {
                let tx = self.value(*x).clone();
                let tg = self.value(*gain).clone();
                let (r, c) = (tx.rows(), tx.cols());
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                accumulate(&mut grads[*x], tx.shape(), |dx| {
                    for i in 0..r {
                        let row = &tx.data()[i * c..(i + 1) * c];
                        let gr = &g.data()[i * c..(i + 1) * c];
                        let mu = row.iter().sum::<S>() / c as S;
                        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<S>() / c as S;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let xhat: Vec<S> = row.iter().map(|v| (v - mu) * inv).collect();
                        let dxhat: Vec<S> =
                            gr.iter().zip(tg.data()).map(|(gv, gg)| gv * gg).collect();
                        let m1 = dxhat.iter().sum::<S>() / c as S;
                        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<S>() / c as S;
                        for j in 0..c {
                            dx[i * c + j] += inv * (dxhat[j] - m1 - xhat[j] * m2);
                            dgain[j] += gr[j] * xhat[j];
                            dbias[j] += gr[j];
                        }
                    }
                });
                accumulate(&mut grads[*gain], &[c], |d| {
                    for (a, b) in d.iter_mut().zip(&dgain) {
                        *a += *b;
                    }
                });
                accumulate(&mut grads[*bias], &[c], |d| {
                    for (a, b) in d.iter_mut().zip(&dbias) {
                        *a += *b;
                    }
                });
            }
            Op::Gelu(x) => {
                let tx = self.value(*x).clone();
                accumulate(&mut grads[*x], tx.shape(), |dx| {
                    for ((d, s), &v) in dx.iter_mut().zip(g.data()).zip(tx.data()) {
                        *d += *s * gelu_bwd(v);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let d = tt.shape()[1];
                accumulate(&mut grads[*table], tt.shape(), |dt| {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g.data()[i * d + j];
                        }
                    }
                });
            }
            Op::AddMask { x } => {
                accumulate(&mut grads[*x], g.shape(), |dx| {
                    for (d, s) in dx.iter_mut().zip(g.data()) {
                        *d += *s;
                    }
                });
            }
            Op::CosineSim(a, b) => {
                let gv = g.item();
                let (ta, tb) = (self.value(*a).clone(), self.value(*b).clone());
                let dot: S = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
                let na = ta.data().iter().map(|v| v * v).sum::<S>().sqrt();
                let nb = tb.data().iter().map(|v| v * v).sum::<S>().sqrt();
                let (nae, nbe) = (na + NORM_EPS, nb + NORM_EPS);
                let denom = nae * nbe;
                accumulate(&mut grads[*a], ta.shape(), |da| {
                    for i in 0..da.len() {
                        let mut d = tb.data()[i] / denom;
                        if na > 1e-30 {
                            d -= dot * ta.data()[i] / (na * nae * denom);
                        }
                        da[i] += gv * d;
                    }
                });
                accumulate(&mut grads[*b], tb.shape(), |db| {
                    for i in 0..db.len() {
                        let mut d = ta.data()[i] / denom;
                        if nb > 1e-30 {
                            d -= dot * tb.data()[i] / (nb * nbe * denom);
                        }
                        db[i] += gv * d;
                    }
                });
            }
            Op::CrossEntropy { logits, targets, mask } => {
                let gv = g.item();
                let t = self.value(*logits).clone();
                let (r, v) = (t.rows(), t.cols());
                let count = mask.iter().filter(|&&m| m).count() as S;
                accumulate(&mut grads[*logits], t.shape(), |dl| {
                    for i in 0..r {
                        if !mask[i] {
                            continue;
                        }
                        let mut p = t.data()[i * v..(i + 1) * v].to_vec();
                        softmax_row(&mut p);
                        for j in 0..v {
                            let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                            dl[i * v + j] += gv * (p[j] - onehot) / count;
                        }
                    }
                });
            }
            Op::StackScalars(parts) => {
                for (k, &p) in parts.iter().enumerate() {
                    let s = g.data()[k];
                    accumulate(&mut grads[p], &[1], |d| d[0] += s);
                }
            }
            Op::ReduceMax(x) => {
                let tx = self.value(*x).clone();
                let gv = g.item();
                let arg = tx
                    .data()
                    .iter()
                    .enumerate()
                    .fold((0usize, S::NEG_INFINITY), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0;
                accumulate(&mut grads[*x], tx.shape(), |dx| dx[arg] += gv);
            }
            Op::LogSumExp(x) => {
                let tx = self.value(*x).clone();
                let gv = g.item();
                let mut p = tx.data().to_vec();
                softmax_row(&mut p);
                accumulate(&mut grads[*x], tx.shape(), |dx| {
                    for (d, w) in dx.iter_mut().zip(&p) {
                        *d += gv * *w;
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let tx = self.value(*x).clone();
                let (lo, hi) = (*lo, *hi);
                accumulate(&mut grads[*x], tx.shape(), |dx| {
                    for ((d, s), &v) in dx.iter_mut().zip(g.data()).zip(tx.data()) {
                        if v > lo && v < hi {
                            *d += *s;
                        }
                    }
                });
            }
        }
    }
}
