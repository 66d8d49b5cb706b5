use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use rand::Rng;

use super::{ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// A contiguous run of rows belonging to one sequence in a stacked batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(offset: usize, len: usize) -> Self {
        Self { offset, len }
    }

    /// Lays out segments back to back for the given lengths.
    pub fn stack(lens: impl IntoIterator<Item = usize>) -> Vec<Segment> {
        let mut offset = 0;
        lens.into_iter()
            .map(|len| {
                let s = Segment { offset, len };
                offset += len;
                s
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub query: Segment,
    pub key: Segment,
}

/// Which query rows attend to which key rows, plus head count and masking.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub segments: Vec<AttnSegment>,
    pub heads: usize,
    pub causal: bool,
}

impl AttnLayout {
    pub fn self_attention(segs: &[Segment], heads: usize, causal: bool) -> Self {
        Self {
            segments: segs.iter().map(|&s| AttnSegment { query: s, key: s }).collect(),
            heads,
            causal,
        }
    }

    pub fn cross_attention(queries: &[Segment], keys: &[Segment], heads: usize) -> Self {
        Self {
            segments: queries
                .iter()
                .zip(keys)
                .map(|(&query, &key)| AttnSegment { query, key })
                .collect(),
            heads,
            causal: false,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gather { table: Var, ids: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, layout: Rc<AttnLayout>, probs: Vec<f64> },
    ConvWindows { x: Var, input: Vec<Segment>, output: Vec<Segment> },
    MeanPool { x: Var, segs: Vec<Segment> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, smoothing: f64, probs: Vec<f64>, count: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by parameter. Parameters that did not reach the loss are absent
/// and read back as zeros.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradMap {
    grads: BTreeMap<ParamId, Tensor>,
}

impl GradMap {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    /// Dense gradient for `id`, zero-filled when the parameter was unreachable.
    pub fn dense(&self, id: ParamId, store: &ParamStore) -> Tensor {
        self.grads
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|t| t.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.grads.values_mut() {
            for g in t.data_mut() {
                *g *= factor;
            }
        }
    }
}

/// Append-only tape. Nodes are stored in creation order, which is a topological
/// order, so backward is a single reverse sweep.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    param_of: HashMap<usize, ParamId>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(TensorError::Shape(msg))
}

/// C (m×n) (+)= op(A) (m×k) · op(B) (k×n), row-major storage.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // op(A) is m×k; stored either as m×k or as k×m.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: slice lengths match the m/k/n extents and strides above.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), param_of: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::Numeric("non-finite value produced".into()));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    /// Loads a trainable parameter. Repeated loads of the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: store.get(id).clone(), op: Op::Leaf, requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        self.param_of.insert(v.0, id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if k != k2 {
            return shape_err(format!("matmul {:?} x {:?}", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(format!("add {:?} + {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    /// `a[m×n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let n = ta.cols();
        if tb.numel() != n {
            return shape_err(format!("add_row {:?} + {:?}", ta.shape(), tb.shape()));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(bias);
        self.push(t, Op::AddRow(a, bias), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(format!("mul {:?} * {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * factor).collect())?;
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x.max(0.0)).collect())?;
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Inverted dropout with a Bernoulli keep-mask drawn from `rng`.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - p;
        let shape = self.value(a).shape().to_vec();
        let numel = self.value(a).numel();
        let mask: Vec<f64> =
            (0..numel).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let m = self.constant(Tensor::new(shape, mask)?)?;
        self.mul(a, m)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::SoftmaxRows(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.cols();
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return shape_err(format!("layer_norm over {n} features with mismatched affine params"));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(t, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg)
    }

    /// Row lookup `table[ids]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = (tt.rows(), tt.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return shape_err(format!("gather index {i} out of {v} rows"));
            }
            out.extend_from_slice(tt.row(i));
        }
        let t = Tensor::matrix(ids.len(), d, out)?;
        let rg = self.rg(table);
        self.push(t, Op::Gather { table, ids: ids.to_vec() }, rg)
    }

    /// Multi-head scaled dot-product attention over stacked sequences. `q` holds the
    /// query rows of every segment, `k`/`v` the key rows; heads split the columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Rc<AttnLayout>) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if tk.cols() != d || tv.cols() != d || tk.rows() != tv.rows() {
            return shape_err(format!(
                "attention q {:?} k {:?} v {:?}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            ));
        }
        let h = layout.heads;
        if h == 0 || d % h != 0 {
            return shape_err(format!("{d} features not divisible into {h} heads"));
        }
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; tq.rows() * d];
        let total: usize = layout.segments.iter().map(|s| s.query.len * s.key.len).sum::<usize>() * h;
        let mut probs = Vec::with_capacity(total);
        for seg in &layout.segments {
            let (qs, ks) = (seg.query, seg.key);
            if qs.offset + qs.len > tq.rows() || ks.offset + ks.len > tk.rows() {
                return shape_err("attention segment out of range".into());
            }
            if ks.len == 0 && qs.len > 0 {
                return shape_err("attention over an empty key segment".into());
            }
            for head in 0..h {
                let c0 = head * dh;
                for i in 0..qs.len {
                    let qrow = &tq.row(qs.offset + i)[c0..c0 + dh];
                    let visible = if layout.causal { (i + 1).min(ks.len) } else { ks.len };
                    let start = probs.len();
                    for j in 0..ks.len {
                        if j < visible {
                            let krow = &tk.row(ks.offset + j)[c0..c0 + dh];
                            probs.push(dot(qrow, krow) * scale);
                        } else {
                            probs.push(f64::NEG_INFINITY);
                        }
                    }
                    let p = &mut probs[start..];
                    softmax_in_place(p);
                    let orow = &mut out[(qs.offset + i) * d + c0..(qs.offset + i) * d + c0 + dh];
                    for (j, &pj) in p.iter().enumerate().take(visible) {
                        let vrow = &tv.row(ks.offset + j)[c0..c0 + dh];
                        for (o, vv) in orow.iter_mut().zip(vrow) {
                            *o += pj * vv;
                        }
                    }
                }
            }
        }
        let t = Tensor::matrix(tq.rows(), d, out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(t, Op::Attention { q, k, v, layout, probs }, rg)
    }

    /// im2col for a 1-D convolution with kernel 3, stride 2, padding 1 applied to each
    /// segment independently. Output rows are `[x[2t-1] | x[2t] | x[2t+1]]`, so the
    /// convolution itself is a following matmul. Returns the output segments.
    pub fn conv_windows(&mut self, x: Var, segs: &[Segment]) -> Result<(Var, Vec<Segment>)> {
        let tx = self.value(x);
        let c = tx.cols();
        let out_segs = Segment::stack(segs.iter().map(|s| s.len.div_ceil(2)));
        let rows: usize = out_segs.iter().map(|s| s.len).sum();
        let mut out = vec![0.0; rows * 3 * c];
        for (s, o) in segs.iter().zip(&out_segs) {
            if s.len == 0 {
                return shape_err("convolution over an empty sequence".into());
            }
            for t in 0..o.len {
                let dst = (o.offset + t) * 3 * c;
                for kk in 0..3 {
                    let src = 2 * t + kk;
                    if src >= 1 && src - 1 < s.len {
                        let r = s.offset + src - 1;
                        out[dst + kk * c..dst + (kk + 1) * c].copy_from_slice(tx.row(r));
                    }
                }
            }
        }
        let t = Tensor::matrix(rows, 3 * c, out)?;
        let rg = self.rg(x);
        let v = self.push(t, Op::ConvWindows { x, input: segs.to_vec(), output: out_segs.clone() }, rg)?;
        Ok((v, out_segs))
    }

    /// Mean over the rows of each segment: `[N×d] -> [B×d]`.
    pub fn mean_pool(&mut self, x: Var, segs: &[Segment]) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        let mut out = vec![0.0; segs.len() * d];
        for (b, s) in segs.iter().enumerate() {
            if s.len == 0 {
                return shape_err("mean over an empty segment".into());
            }
            for r in s.offset..s.offset + s.len {
                for (o, v) in out[b * d..(b + 1) * d].iter_mut().zip(tx.row(r)) {
                    *o += v;
                }
            }
            for o in &mut out[b * d..(b + 1) * d] {
                *o /= s.len as f64;
            }
        }
        let t = Tensor::matrix(segs.len(), d, out)?;
        let rg = self.rg(x);
        self.push(t, Op::MeanPool { x, segs: segs.to_vec() }, rg)
    }

    /// Mean label-smoothed cross entropy over rows whose target is `Some`.
    ///
    /// Per row: `(1-eps)·(-log p_t) + eps·mean_{c≠t}(-log p_c)`. Zero when no row counts.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], smoothing: f64) -> Result<Var> {
        let tl = self.value(logits);
        let (n, v) = (tl.rows(), tl.cols());
        if v < 2 {
            return shape_err(format!("cross entropy needs at least 2 classes, got {v}"));
        }
        if targets.len() != n {
            return shape_err(format!("{} targets for {n} rows", targets.len()));
        }
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= v {
                return shape_err(format!("target {t} out of {v} classes"));
            }
            let row = tl.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            let p = &mut probs[r * v..(r + 1) * v];
            let mut others = 0.0;
            for c in 0..v {
                let logp = row[c] - lse;
                p[c] = logp.exp();
                if c != t {
                    others -= logp;
                }
            }
            let nll = lse - row[t];
            total += (1.0 - smoothing) * nll + smoothing * others / (v - 1) as f64;
            count += 1;
        }
        let value = if count > 0 { total / count as f64 } else { 0.0 };
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(value),
            Op::CrossEntropy { logits, targets: targets.to_vec(), smoothing, probs, count },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<GradMap> {
        if !self.value(loss).is_scalar() {
            return shape_err(format!("backward from non-scalar of shape {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = GradMap::default();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    if let Some(&pid) = self.param_of.get(&idx) {
                        out.grads.insert(pid, Tensor::new(node.value.shape().to_vec(), g)?);
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    if self.rg(*a) {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, &g, false, tb.data(), true, &mut da, 0.0);
                        accumulate(&mut grads[a.0], da);
                    }
                    if self.rg(*b) {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, ta.data(), true, &g, false, &mut db, 0.0);
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::AddRow(a, b) => {
                    if self.rg(*b) {
                        let n = self.value(*b).numel();
                        let mut db = vec![0.0; n];
                        for row in g.chunks(n) {
                            for (d, x) in db.iter_mut().zip(row) {
                                *d += x;
                            }
                        }
                        accumulate(&mut grads[b.0], db);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], g.iter().zip(tb.data()).map(|(x, y)| x * y).collect());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], g.iter().zip(ta.data()).map(|(x, y)| x * y).collect());
                    }
                }
                Op::Scale(a, f) => {
                    accumulate(&mut grads[a.0], g.iter().map(|x| x * f).collect());
                }
                Op::Relu(a) => {
                    let ta = self.value(*a);
                    let d = g.iter().zip(ta.data()).map(|(x, &v)| if v > 0.0 { *x } else { 0.0 }).collect();
                    accumulate(&mut grads[a.0], d);
                }
                Op::Sum(a) => {
                    accumulate(&mut grads[a.0], vec![g[0]; self.value(*a).numel()]);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let n = y.cols();
                    let mut d = vec![0.0; y.numel()];
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * n..(r + 1) * n];
                        let dotp = dot(yr, gr);
                        for c in 0..n {
                            d[r * n + c] = yr[c] * (gr[c] - dotp);
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let n = self.value(*x).cols();
                    let gam = self.value(*gamma).data();
                    if self.rg(*gamma) {
                        let mut dg = vec![0.0; n];
                        for (r, row) in g.chunks(n).enumerate() {
                            for c in 0..n {
                                dg[c] += row[c] * xhat[r * n + c];
                            }
                        }
                        accumulate(&mut grads[gamma.0], dg);
                    }
                    if self.rg(*beta) {
                        let mut db = vec![0.0; n];
                        for row in g.chunks(n) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads[beta.0], db);
                    }
                    if self.rg(*x) {
                        let mut dx = vec![0.0; g.len()];
                        for (r, row) in g.chunks(n).enumerate() {
                            let h = &xhat[r * n..(r + 1) * n];
                            let dh: Vec<f64> = row.iter().zip(gam).map(|(a, b)| a * b).collect();
                            let mean_dh = dh.iter().sum::<f64>() / n as f64;
                            let mean_dh_h = dot(&dh, h) / n as f64;
                            for c in 0..n {
                                dx[r * n + c] = inv_std[r] * (dh[c] - mean_dh - h[c] * mean_dh_h);
                            }
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Gather { table, ids } => {
                    let tt = self.value(*table);
                    let d = tt.cols();
                    let mut dt = vec![0.0; tt.numel()];
                    for (r, &i) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[i * d + c] += g[r * d + c];
                        }
                    }
                    accumulate(&mut grads[table.0], dt);
                }
                Op::Attention { q, k, v, layout, probs } => {
                    let (dq, dk, dv) = self.attention_backward(*q, *k, *v, layout, probs, &g);
                    if self.rg(*q) {
                        accumulate(&mut grads[q.0], dq);
                    }
                    if self.rg(*k) {
                        accumulate(&mut grads[k.0], dk);
                    }
                    if self.rg(*v) {
                        accumulate(&mut grads[v.0], dv);
                    }
                }
                Op::ConvWindows { x, input, output } => {
                    let tx = self.value(*x);
                    let c = tx.cols();
                    let mut dx = vec![0.0; tx.numel()];
                    for (s, o) in input.iter().zip(output) {
                        for t in 0..o.len {
                            let src_row = (o.offset + t) * 3 * c;
                            for kk in 0..3 {
                                let src = 2 * t + kk;
                                if src >= 1 && src - 1 < s.len {
                                    let r = s.offset + src - 1;
                                    for j in 0..c {
                                        dx[r * c + j] += g[src_row + kk * c + j];
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::MeanPool { x, segs } => {
                    let tx = self.value(*x);
                    let d = tx.cols();
                    let mut dx = vec![0.0; tx.numel()];
                    for (b, s) in segs.iter().enumerate() {
                        let inv = 1.0 / s.len as f64;
                        for r in s.offset..s.offset + s.len {
                            for c in 0..d {
                                dx[r * d + c] += g[b * d + c] * inv;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::CrossEntropy { logits, targets, smoothing, probs, count } => {
                    let v = self.value(*logits).cols();
                    let mut dl = vec![0.0; probs.len()];
                    if *count > 0 {
                        let scale = g[0] / *count as f64;
                        let off = smoothing / (v - 1) as f64;
                        for (r, t) in targets.iter().enumerate() {
                            let Some(t) = *t else { continue };
                            for c in 0..v {
                                let w = if c == t { 1.0 - smoothing } else { off };
                                dl[r * v + c] = scale * (probs[r * v + c] - w);
                            }
                        }
                    }
                    accumulate(&mut grads[logits.0], dl);
                }
            }
        }
        Ok(out)
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttnLayout,
        probs: &[f64],
        g: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let h = layout.heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; tq.numel()];
        let mut dk = vec![0.0; tk.numel()];
        let mut dv = vec![0.0; tv.numel()];
        let mut cursor = 0;
        let mut dp = Vec::new();
        for seg in &layout.segments {
            let (qs, ks) = (seg.query, seg.key);
            for head in 0..h {
                let c0 = head * dh;
                for i in 0..qs.len {
                    let p = &probs[cursor..cursor + ks.len];
                    cursor += ks.len;
                    let qi = qs.offset + i;
                    let go = &g[qi * d + c0..qi * d + c0 + dh];
                    dp.clear();
                    for j in 0..ks.len {
                        let kj = ks.offset + j;
                        if p[j] == 0.0 {
                            dp.push(0.0);
                            continue;
                        }
                        let vrow = &tv.row(kj)[c0..c0 + dh];
                        dp.push(dot(go, vrow));
                        for (dvv, x) in dv[kj * d + c0..kj * d + c0 + dh].iter_mut().zip(go) {
                            *dvv += p[j] * x;
                        }
                    }
                    let s = dot(p, &dp);
                    let qrow = &tq.row(qi)[c0..c0 + dh];
                    for j in 0..ks.len {
                        let ds = p[j] * (dp[j] - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = ks.offset + j;
                        let krow = &tk.row(kj)[c0..c0 + dh];
                        for (dqq, kv) in dq[qi * d + c0..qi * d + c0 + dh].iter_mut().zip(krow) {
                            *dqq += ds * kv;
                        }
                        for (dkk, qv) in dk[kj * d + c0..kj * d + c0 + dh].iter_mut().zip(qrow) {
                            *dkk += ds * qv;
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add(name, t);
        (s, id)
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let (s, id) = store_with("p", Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 4.0, 0.0, 1.5]).unwrap());
        let mut g = Graph::new();
        let p = g.param(&s, id);
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(id).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn grad_of_half_square_is_identity() {
        let vals = vec![0.3, -1.0, 2.0, 4.0];
        let (s, id) = store_with("p", Tensor::matrix(2, 2, vals.clone()).unwrap());
        let mut g = Graph::new();
        let p = g.param(&s, id);
        let sq = g.mul(p, p).unwrap();
        let sum = g.sum(sq).unwrap();
        let loss = g.scale(sum, 0.5).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(id).unwrap().data(), &vals[..]);
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = s.add("b", Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap());
        let mut g = Graph::new();
        let pa = g.param(&s, a);
        let _pb = g.param(&s, b);
        let loss = g.sum(pa).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(b).is_none());
        assert_eq!(grads.dense(b, &s).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let (s, id) = store_with("p", Tensor::zeros(&[2, 2]));
        let mut g = Graph::new();
        let p = g.param(&s, id);
        assert!(matches!(g.backward(p), Err(TensorError::Shape(_))));
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn cross_entropy_closed_forms() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::matrix(1, 5, vec![0.0; 5]).unwrap()).unwrap();
        let ce = g.cross_entropy(l, &[Some(2)], 0.0).unwrap();
        assert!((g.value(ce).item() - 5f64.ln()).abs() < 1e-12);

        let l = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap()).unwrap();
        let ce = g.cross_entropy(l, &[Some(0)], 0.1).unwrap();
        assert!((g.value(ce).item() - 2f64.ln()).abs() < 1e-12);
        assert!((g.value(ce).item() - 0.6931).abs() < 1e-4);

        let l = g.constant(Tensor::matrix(1, 3, vec![200.0, 0.0, 0.0]).unwrap()).unwrap();
        let ce = g.cross_entropy(l, &[Some(0)], 0.0).unwrap();
        assert!(g.value(ce).item() < 1e-12);

        let l = g.constant(Tensor::matrix(1, 1, vec![0.0]).unwrap()).unwrap();
        assert!(matches!(g.cross_entropy(l, &[Some(0)], 0.0), Err(TensorError::Shape(_))));
    }

    #[test]
    fn cross_entropy_ignores_rows() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::matrix(2, 2, vec![0.0, 0.0, 5.0, -5.0]).unwrap()).unwrap();
        let ce = g.cross_entropy(l, &[Some(1), None], 0.0).unwrap();
        assert!((g.value(ce).item() - 2f64.ln()).abs() < 1e-12);
        let ce = g.cross_entropy(l, &[None, None], 0.0).unwrap();
        assert_eq!(g.value(ce).item(), 0.0);
    }

    #[test]
    fn conv_windows_output_lengths() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[17, 2])).unwrap();
        let (_, segs) = g.conv_windows(x, &Segment::stack([8, 9])).unwrap();
        assert_eq!(segs.iter().map(|s| s.len).collect::<Vec<_>>(), vec![4, 5]);
    }

    #[test]
    fn causal_attention_first_row_sees_only_itself() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let v = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let layout = Rc::new(AttnLayout::self_attention(&Segment::stack([2]), 1, true));
        let o = g.attention(q, q, v, layout).unwrap();
        assert_eq!(g.value(o).row(0), &[1.0, 2.0]);
    }
}
