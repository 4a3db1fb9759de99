//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Leaves are either constants (never differentiated) or variables. Nodes
//! that do not depend on any variable are skipped during the backward pass,
//! so frozen parameters entered as constants receive no gradient at all.

use ndarray::{concatenate, s, Array2, Axis};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// a + b where b is a single row broadcast over a's rows.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// a / s for a 1×1 variable s.
    DivScalar(Var, Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Mat,
    },
    BceWithLogits {
        logits: Var,
        labels: Vec<f64>,
    },
}

struct Node {
    value: Mat,
    op: Op,
    tracked: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Numerically stable in-place softmax of each row.
pub fn softmax_rows_in_place(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = if *v == f64::NEG_INFINITY {
                0.0
            } else {
                (*v - max).exp()
            };
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
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

    fn push(&mut self, value: Mat, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn any_tracked(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.tracked(*v))
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn variable(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let t = self.any_tracked(&[a, b]);
        self.push(value, Op::MatMul(a, b), t)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let t = self.any_tracked(&[a, b]);
        self.push(value, Op::MatMulT(a, b), t)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let t = self.tracked(a);
        self.push(value, Op::Transpose(a), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let t = self.any_tracked(&[a, b]);
        self.push(value, Op::Add(a, b), t)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1×n row");
        let value = self.value(a) + self.value(row);
        let t = self.any_tracked(&[a, row]);
        self.push(value, Op::AddRow(a, row), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let t = self.any_tracked(&[a, b]);
        self.push(value, Op::Mul(a, b), t)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let t = self.tracked(a);
        self.push(value, Op::Scale(a, c), t)
    }

    pub fn div_scalar(&mut self, a: Var, s: Var) -> Var {
        let d = self.scalar(s);
        let value = self.value(a) / d;
        let t = self.any_tracked(&[a, s]);
        self.push(value, Op::DivScalar(a, s), t)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let t = self.tracked(a);
        self.push(value, Op::Gelu(a), t)
    }

    /// Row-wise softmax. Entries equal to `-inf` receive probability zero.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        softmax_rows_in_place(&mut value);
        let t = self.tracked(a);
        self.push(value, Op::Softmax(a), t)
    }

    /// Sets entries above the diagonal to `-inf` (causal attention scores).
    pub fn causal_mask(&mut self, a: Var) -> Var {
        // Masked entries carry no gradient; the softmax backward zeroes them.
        let mut value = self.value(a).clone();
        for ((i, j), v) in value.indexed_iter_mut() {
            if j > i {
                *v = f64::NEG_INFINITY;
            }
        }
        let t = self.tracked(a);
        // Identity for unmasked entries, so reuse Scale(1.0) for the backward rule.
        self.push(value, Op::Scale(a, 1.0), t)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let t = self.any_tracked(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            t,
        )
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let mut norms = Vec::with_capacity(value.nrows());
        for mut row in value.rows_mut() {
            let n = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        let t = self.tracked(x);
        self.push(value, Op::L2Normalize { x, norms }, t)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let t = self.any_tracked(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), t)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let t = self.any_tracked(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), t)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        let t = self.tracked(a);
        self.push(value, Op::SliceRows(a, start), t)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let t = self.tracked(a);
        self.push(value, Op::SliceCols(a, start), t)
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let value = self.value(table).select(Axis(0), idx);
        let t = self.tracked(table);
        self.push(value, Op::Gather(table, idx.to_vec()), t)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean_rows of empty matrix")
            .insert_axis(Axis(0));
        let t = self.tracked(a);
        self.push(value, Op::MeanRows(a), t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let t = self.tracked(a);
        self.push(value, Op::Sum(a), t)
    }

    /// Weighted mean cross-entropy of each logits row against its target.
    /// Rows with zero weight do not contribute; the mean divides by the sum
    /// of weights, which must be positive.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        assert_eq!(lv.nrows(), weights.len());
        let denom: f64 = weights.iter().sum();
        assert!(denom > 0.0, "cross_entropy needs positive total weight");
        let mut probs = lv.clone();
        softmax_rows_in_place(&mut probs);
        let mut loss = 0.0;
        for (i, row) in lv.rows().into_iter().enumerate() {
            if weights[i] == 0.0 {
                continue;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += weights[i] * (lse - row[targets[i]]);
        }
        let value = Array2::from_elem((1, 1), loss / denom);
        let t = self.tracked(logits);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            t,
        )
    }

    /// Mean binary cross-entropy with logits over every entry of `logits`
    /// (row-major order matching `labels`).
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), labels.len());
        let n = labels.len() as f64;
        let loss: f64 = lv
            .iter()
            .zip(labels)
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum::<f64>()
            / n;
        let value = Array2::from_elem((1, 1), loss);
        let t = self.tracked(logits);
        self.push(
            value,
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            t,
        )
    }

    /// Back-propagates from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.tracked(loss) {
            return Grads { grads };
        }
        grads[loss.0] = Some(Array2::ones(self.value(loss).raw_dim()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, d: Mat| {
            if !self.tracked(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            }
        };
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.tracked(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.tracked(*a) {
                    acc(*a, g.dot(self.value(*b)));
                }
                if self.tracked(*b) {
                    acc(*b, g.t().dot(self.value(*a)));
                }
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    acc(*a, g * self.value(*b));
                }
                if self.tracked(*b) {
                    acc(*b, g * self.value(*a));
                }
            }
            Op::Scale(a, c) => {
                let mut d = g * *c;
                // causal_mask reuses Scale(1.0); masked entries must stay zero.
                d.zip_mut_with(&node.value, |dv, &v| {
                    if v == f64::NEG_INFINITY {
                        *dv = 0.0;
                    }
                });
                acc(*a, d);
            }
            Op::DivScalar(a, s) => {
                let sv = self.scalar(*s);
                if self.tracked(*a) {
                    acc(*a, g / sv);
                }
                if self.tracked(*s) {
                    let ds = -(g * self.value(*a)).sum() / (sv * sv);
                    acc(*s, Array2::from_elem((1, 1), ds));
                }
            }
            Op::Gelu(a) => {
                let mut d = self.value(*a).mapv(gelu_grad);
                d *= g;
                acc(*a, d);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = g.clone();
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot = drow.dot(&yrow);
                    drow.zip_mut_with(&yrow, |dv, &yv| *dv = yv * (*dv - dot));
                }
                acc(*a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.tracked(*gamma) {
                    acc(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.tracked(*beta) {
                    acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.tracked(*x) {
                    let gh = g * self.value(*gamma);
                    let n = gh.ncols() as f64;
                    let mut d = gh.clone();
                    for (i, mut drow) in d.rows_mut().into_iter().enumerate() {
                        let xr = xhat.row(i);
                        let mean_g = drow.sum() / n;
                        let mean_gx = drow.dot(&xr) / n;
                        let is = inv_std[i];
                        drow.zip_mut_with(&xr, |dv, &xh| {
                            *dv = is * (*dv - mean_g - xh * mean_gx);
                        });
                    }
                    acc(*x, d);
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let mut d = g.clone();
                for (i, mut drow) in d.rows_mut().into_iter().enumerate() {
                    let yr = y.row(i);
                    let dot = drow.dot(&yr);
                    let n = norms[i];
                    drow.zip_mut_with(&yr, |dv, &yv| *dv = (*dv - yv * dot) / n);
                }
                acc(*x, d);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let r = self.value(*p).nrows();
                    if self.tracked(*p) {
                        acc(*p, g.slice(s![start..start + r, ..]).to_owned());
                    }
                    start += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let c = self.value(*p).ncols();
                    if self.tracked(*p) {
                        acc(*p, g.slice(s![.., start..start + c]).to_owned());
                    }
                    start += c;
                }
            }
            Op::SliceRows(a, start) => {
                let mut d = Array2::zeros(self.value(*a).raw_dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                acc(*a, d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(self.value(*a).raw_dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(*a, d);
            }
            Op::Gather(table, idx) => {
                let mut d = Array2::zeros(self.value(*table).raw_dim());
                for (r, &i) in idx.iter().enumerate() {
                    let mut row = d.row_mut(i);
                    row += &g.row(r);
                }
                acc(*table, d);
            }
            Op::MeanRows(a) => {
                let n = self.value(*a).nrows();
                let row = g / n as f64;
                let d = Array2::from_shape_fn(self.value(*a).raw_dim(), |(_, j)| row[[0, j]]);
                acc(*a, d);
            }
            Op::Sum(a) => {
                let d = Array2::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                acc(*a, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let denom: f64 = weights.iter().sum();
                let scale = g[[0, 0]] / denom;
                let mut d = probs.clone();
                for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                    let w = weights[i] * scale;
                    if w == 0.0 {
                        row.fill(0.0);
                        continue;
                    }
                    row[targets[i]] -= 1.0;
                    row.mapv_inplace(|v| v * w);
                }
                acc(*logits, d);
            }
            Op::BceWithLogits { logits, labels } => {
                let n = labels.len() as f64;
                let scale = g[[0, 0]] / n;
                let lv = self.value(*logits);
                let mut d = lv.clone();
                for (dv, (&z, &y)) in d.iter_mut().zip(lv.iter().zip(labels)) {
                    *dv = (sigmoid(z) - y) * scale;
                }
                acc(*logits, d);
            }
        }
    }
}
