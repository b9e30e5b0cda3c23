//! Tape of tensor operations with reverse-mode differentiation.

use super::{gemm, NeuralError, Result, Tensor};

/// Named parameter tensors. Ids are insertion indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Zero tensors with the shape of every parameter.
    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.values.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Relu(Var),
    Sum(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, tq: usize, tk: usize, heads: usize, probs: Vec<f64> },
    PrependRow { x: Var, row: Var, seq: usize },
    AddTiled { x: Var, tile: Var },
    SelectRows { x: Var, stride: usize, offset: usize },
    Reshape(Var),
    PadCols(Var),
    LogSoftmax(Var),
    Pick { x: Var, idx: Vec<usize> },
    PpoClip { logp: Var, actions: Vec<usize>, coef: Vec<f64> },
    Mse { pred: Var, target: Vec<f64> },
    Entropy(Var),
    Lincomb(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

/// Records operations as they are evaluated.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(NeuralError::Shape(msg))
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: usize) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    /// Attention probabilities recorded by an attention node, laid out as
    /// `[batch][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).shape();
        let (k2, n) = self.value(b).shape();
        if k != k2 {
            return shape_err(format!("matmul {m}x{k} by {k2}x{n}"));
        }
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, 1.0, self.value(a).data(), false, self.value(b).data(), false, 0.0, out.data_mut());
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x + bias` with a `1 x n` bias broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).shape();
        if self.value(bias).shape() != (1, cols) {
            return shape_err(format!("bias {:?} for {rows}x{cols}", self.value(bias).shape()));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..rows {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!("add {:?} and {:?}", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::row_vector(vec![s]), Op::Sum(x))
    }

    /// Row-wise layer normalisation with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.value(x).shape();
        if self.value(gamma).shape() != (1, cols) || self.value(beta).shape() != (1, cols) {
            return shape_err(format!("layer norm affine parameters for width {cols}"));
        }
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = Tensor::zeros(rows, cols);
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            let o = out.row_mut(r);
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                o[c] = g[c] * h + bt[c];
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Multi-head scaled dot-product attention over groups of `tq` query rows
    /// and `tk` key/value rows. Inputs are already projected; head `h` owns
    /// columns `h*dh..(h+1)*dh`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, tq: usize, tk: usize, heads: usize) -> Result<Var> {
        let (qr, d) = self.value(q).shape();
        let (kr, kd) = self.value(k).shape();
        if self.value(v).shape() != (kr, kd) || kd != d {
            return shape_err("attention key/value widths differ".into());
        }
        if heads == 0 || d % heads != 0 || tq == 0 || tk == 0 || qr % tq != 0 || kr % tk != 0 || qr / tq != kr / tk {
            return shape_err(format!("attention q {qr}x{d}, k {kr}x{kd}, tq {tq}, tk {tk}, heads {heads}"));
        }
        let batch = qr / tq;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; batch * heads * tq * tk];
        let mut out = Tensor::zeros(qr, d);
        let mut scores = vec![0.0; tk];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..tq {
                    let qrow = &qv[(b * tq + i) * d + col..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let krow = &kv[(b * tk + j) * d + col..][..dh];
                        *s = qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>() * scale;
                        max = max.max(*s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let p = &mut probs[((b * heads + h) * tq + i) * tk..][..tk];
                    for (pj, s) in p.iter_mut().zip(&scores) {
                        *pj = s / z;
                    }
                    let orow = &mut out.data_mut()[(b * tq + i) * d + col..][..dh];
                    for (j, pj) in p.iter().enumerate() {
                        let vrow = &vv[(b * tk + j) * d + col..][..dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        Ok(self.push(out, Op::Attention { q, k, v, tq, tk, heads, probs }))
    }

    /// Inserts `row` before every group of `seq` rows of `x`.
    pub fn prepend_row(&mut self, x: Var, row: Var, seq: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).shape();
        if self.value(row).shape() != (1, cols) || seq == 0 || rows % seq != 0 {
            return shape_err(format!("prepend {:?} to {rows}x{cols} in groups of {seq}", self.value(row).shape()));
        }
        let batch = rows / seq;
        let mut out = Tensor::zeros(batch * (seq + 1), cols);
        for b in 0..batch {
            out.row_mut(b * (seq + 1)).copy_from_slice(self.value(row).data());
            for t in 0..seq {
                let src = self.value(x).row(b * seq + t).to_vec();
                out.row_mut(b * (seq + 1) + 1 + t).copy_from_slice(&src);
            }
        }
        Ok(self.push(out, Op::PrependRow { x, row, seq }))
    }

    /// Adds a `T x D` tile to every group of `T` rows of `x`.
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).shape();
        let (t, tc) = self.value(tile).shape();
        if tc != cols || t == 0 || rows % t != 0 {
            return shape_err(format!("tile {t}x{tc} over {rows}x{cols}"));
        }
        let mut out = self.value(x).clone();
        let tile_data = self.value(tile).data().to_vec();
        for chunk in out.data_mut().chunks_mut(t * cols) {
            for (o, p) in chunk.iter_mut().zip(&tile_data) {
                *o += p;
            }
        }
        Ok(self.push(out, Op::AddTiled { x, tile }))
    }

    /// Rows `offset, offset + stride, offset + 2*stride, ...`.
    pub fn select_rows(&mut self, x: Var, stride: usize, offset: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).shape();
        if stride == 0 || offset >= stride || rows % stride != 0 {
            return shape_err(format!("select every {stride} rows from {rows}"));
        }
        let n = rows / stride;
        let mut out = Tensor::zeros(n, cols);
        for b in 0..n {
            let src = self.value(x).row(b * stride + offset).to_vec();
            out.row_mut(b).copy_from_slice(&src);
        }
        Ok(self.push(out, Op::SelectRows { x, stride, offset }))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(x).clone().reshaped(rows, cols)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Zero-pads columns on the right up to `cols`.
    pub fn pad_cols(&mut self, x: Var, cols: usize) -> Result<Var> {
        let (rows, c) = self.value(x).shape();
        if cols < c {
            return shape_err(format!("pad {c} columns to {cols}"));
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            out.row_mut(r)[..c].copy_from_slice(self.value(x).row(r));
        }
        Ok(self.push(out, Op::PadCols(x)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(out, Op::LogSoftmax(x))
    }

    /// Column `idx[r]` of every row, as an `n x 1` tensor.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(x).shape();
        if idx.len() != rows || idx.iter().any(|&i| i >= cols) {
            return shape_err(format!("pick {} indices from {rows}x{cols}", idx.len()));
        }
        let vals = idx.iter().enumerate().map(|(r, &c)| self.value(x).get(r, c)).collect();
        let out = Tensor::from_vec(rows, 1, vals)?;
        Ok(self.push(out, Op::Pick { x, idx: idx.to_vec() }))
    }

    /// Mean clipped surrogate `min(rho A, clip(rho, 1-eps, 1+eps) A)` where
    /// `rho = exp(logp[r, a_r] - old_logp[r])`.
    pub fn ppo_clip(&mut self, logp: Var, actions: &[usize], old_logp: &[f64], adv: &[f64], eps: f64) -> Result<Var> {
        let (rows, cols) = self.value(logp).shape();
        if actions.len() != rows || old_logp.len() != rows || adv.len() != rows || rows == 0 {
            return shape_err(format!("ppo batch of {rows} with {} actions", actions.len()));
        }
        if actions.iter().any(|&a| a >= cols) {
            return shape_err("action index out of range".into());
        }
        let mut total = 0.0;
        let mut coef = vec![0.0; rows];
        for r in 0..rows {
            let rho = (self.value(logp).get(r, actions[r]) - old_logp[r]).exp();
            let unclipped = rho * adv[r];
            let clipped = rho.clamp(1.0 - eps, 1.0 + eps) * adv[r];
            if unclipped <= clipped {
                total += unclipped;
                // d(rho A)/d logp = rho A
                coef[r] = unclipped / rows as f64;
            } else {
                total += clipped;
            }
        }
        let out = Tensor::row_vector(vec![total / rows as f64]);
        Ok(self.push(out, Op::PpoClip { logp, actions: actions.to_vec(), coef }))
    }

    /// Mean squared error of an `n x 1` prediction against `target`.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() || target.is_empty() {
            return shape_err(format!("mse of {} predictions against {} targets", p.len(), target.len()));
        }
        let n = target.len() as f64;
        let s = p.data().iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        Ok(self.push(Tensor::row_vector(vec![s]), Op::Mse { pred, target: target.to_vec() }))
    }

    /// Mean entropy of the row distributions given their log-probabilities.
    pub fn entropy(&mut self, logp: Var) -> Var {
        let t = self.value(logp);
        let n = t.rows().max(1) as f64;
        let h = -t.data().iter().map(|l| l.exp() * l).sum::<f64>() / n;
        self.push(Tensor::row_vector(vec![h]), Op::Entropy(logp))
    }

    /// `sum_i c_i x_i` over tensors of one shape.
    pub fn lincomb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return shape_err("empty linear combination".into());
        };
        let shape = self.value(first).shape();
        let mut out = Tensor::zeros(shape.0, shape.1);
        for &(v, c) in terms {
            if self.value(v).shape() != shape {
                return shape_err("linear combination of mixed shapes".into());
            }
            for (o, x) in out.data_mut().iter_mut().zip(self.value(v).data()) {
                *o += c * x;
            }
        }
        Ok(self.push(out, Op::Lincomb(terms.to_vec())))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(NeuralError::NoForward);
        }
        if self.value(loss).len() != 1 {
            return shape_err(format!("backward from a {:?} tensor", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    /// Adds parameter gradients into `out`, indexed by parameter id.
    pub fn accumulate_param_grads(&self, grads: &Grads, out: &mut [Tensor]) {
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                out[*id].add_assign(g);
            }
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).shape();
                let n = self.value(*b).cols();
                let mut da = Tensor::zeros(m, k);
                gemm(m, n, k, 1.0, g.data(), false, self.value(*b).data(), true, 0.0, da.data_mut());
                let mut db = Tensor::zeros(k, n);
                gemm(k, m, n, 1.0, self.value(*a).data(), true, g.data(), false, 0.0, db.data_mut());
                acc(*a, da);
                acc(*b, db);
            }
            Op::AddBias(x, bias) => {
                let mut db = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (d, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                acc(*x, g.clone());
                acc(*bias, db);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Relu(x) => {
                let mut d = g.clone();
                for (dv, xv) in d.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if *xv <= 0.0 {
                        *dv = 0.0;
                    }
                }
                acc(*x, d);
            }
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                acc(*x, Tensor::full(r, c, g.scalar()));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (rows, cols) = g.shape();
                let gam = self.value(*gamma).data();
                let mut dx = Tensor::zeros(rows, cols);
                let mut dg = Tensor::zeros(1, cols);
                let mut db = Tensor::zeros(1, cols);
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let gr = g.row(r);
                    let xh = &xhat[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        dxhat[c] = gr[c] * gam[c];
                        dg.data_mut()[c] += gr[c] * xh[c];
                        db.data_mut()[c] += gr[c];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                    let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    let o = dx.row_mut(r);
                    for c in 0..cols {
                        o[c] = rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                    }
                }
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::Attention { q, k, v, tq, tk, heads, probs } => {
                let (tq, tk, heads) = (*tq, *tk, *heads);
                let (qr, d) = self.value(*q).shape();
                let kr = self.value(*k).rows();
                let batch = qr / tq;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = Tensor::zeros(qr, d);
                let mut dk = Tensor::zeros(kr, d);
                let mut dv = Tensor::zeros(kr, d);
                let mut dp = vec![0.0; tk];
                for b in 0..batch {
                    for h in 0..heads {
                        let col = h * dh;
                        for i in 0..tq {
                            let p = &probs[((b * heads + h) * tq + i) * tk..][..tk];
                            let go = &g.data()[(b * tq + i) * d + col..][..dh];
                            for j in 0..tk {
                                let vrow = &vv[(b * tk + j) * d + col..][..dh];
                                dp[j] = go.iter().zip(vrow).map(|(x, y)| x * y).sum();
                                let dvrow = &mut dv.data_mut()[(b * tk + j) * d + col..][..dh];
                                for (o, x) in dvrow.iter_mut().zip(go) {
                                    *o += p[j] * x;
                                }
                            }
                            let inner: f64 = dp.iter().zip(p).map(|(a, b)| a * b).sum();
                            let qrow = &qv[(b * tq + i) * d + col..][..dh];
                            for j in 0..tk {
                                let ds = p[j] * (dp[j] - inner) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let krow = &kv[(b * tk + j) * d + col..][..dh];
                                let dqrow = &mut dq.data_mut()[(b * tq + i) * d + col..][..dh];
                                for (o, x) in dqrow.iter_mut().zip(krow) {
                                    *o += ds * x;
                                }
                                let dkrow = &mut dk.data_mut()[(b * tk + j) * d + col..][..dh];
                                for (o, x) in dkrow.iter_mut().zip(qrow) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::PrependRow { x, row, seq } => {
                let cols = g.cols();
                let batch = g.rows() / (seq + 1);
                let mut dx = Tensor::zeros(batch * seq, cols);
                let mut dr = Tensor::zeros(1, cols);
                for b in 0..batch {
                    for (o, v) in dr.data_mut().iter_mut().zip(g.row(b * (seq + 1))) {
                        *o += v;
                    }
                    for t in 0..*seq {
                        dx.row_mut(b * seq + t).copy_from_slice(g.row(b * (seq + 1) + 1 + t));
                    }
                }
                acc(*x, dx);
                acc(*row, dr);
            }
            Op::AddTiled { x, tile } => {
                let (t, cols) = self.value(*tile).shape();
                let mut dt = Tensor::zeros(t, cols);
                for chunk in g.data().chunks(t * cols) {
                    for (o, v) in dt.data_mut().iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                acc(*x, g.clone());
                acc(*tile, dt);
            }
            Op::SelectRows { x, stride, offset } => {
                let (rows, cols) = self.value(*x).shape();
                let mut dx = Tensor::zeros(rows, cols);
                for b in 0..g.rows() {
                    dx.row_mut(b * stride + offset).copy_from_slice(g.row(b));
                }
                acc(*x, dx);
            }
            Op::Reshape(x) => {
                let (r, c) = self.value(*x).shape();
                acc(*x, g.clone().reshaped(r, c).expect("same length"));
            }
            Op::PadCols(x) => {
                let (rows, cols) = self.value(*x).shape();
                let mut dx = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    dx.row_mut(r).copy_from_slice(&g.row(r)[..cols]);
                }
                acc(*x, dx);
            }
            Op::LogSoftmax(x) => {
                let out = &node.value;
                let mut dx = g.clone();
                for r in 0..dx.rows() {
                    let s: f64 = g.row(r).iter().sum();
                    for (o, l) in dx.row_mut(r).iter_mut().zip(out.row(r)) {
                        *o -= l.exp() * s;
                    }
                }
                acc(*x, dx);
            }
            Op::Pick { x, idx } => {
                let (rows, cols) = self.value(*x).shape();
                let mut dx = Tensor::zeros(rows, cols);
                for (r, &c) in idx.iter().enumerate() {
                    dx.data_mut()[r * cols + c] = g.data()[r];
                }
                acc(*x, dx);
            }
            Op::PpoClip { logp, actions, coef } => {
                let (rows, cols) = self.value(*logp).shape();
                let mut dx = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    dx.data_mut()[r * cols + actions[r]] = coef[r] * g.scalar();
                }
                acc(*logp, dx);
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let n = target.len() as f64;
                let mut dx = Tensor::zeros(p.rows(), p.cols());
                for ((o, a), b) in dx.data_mut().iter_mut().zip(p.data()).zip(target) {
                    *o = 2.0 * (a - b) / n * g.scalar();
                }
                acc(*pred, dx);
            }
            Op::Entropy(logp) => {
                // Log-probabilities are treated as free inputs here; the
                // log-softmax node upstream handles the row coupling.
                let t = self.value(*logp);
                let n = t.rows().max(1) as f64;
                let mut dx = Tensor::zeros(t.rows(), t.cols());
                for r in 0..t.rows() {
                    for (o, l) in dx.row_mut(r).iter_mut().zip(t.row(r)) {
                        *o = -(l.exp() * (l + 1.0)) / n * g.scalar();
                    }
                }
                acc(*logp, dx);
            }
            Op::Lincomb(terms) => {
                for &(v, c) in terms {
                    let mut d = g.clone();
                    d.data_mut().iter_mut().for_each(|x| *x *= c);
                    acc(v, d);
                }
            }
        }
    }
}
