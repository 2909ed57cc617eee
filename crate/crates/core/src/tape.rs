//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation eagerly: values are computed when an
//! op is pushed, and [`Tape::backward`] walks the record in reverse to
//! accumulate gradients. Scalars are `1 x 1` matrices. Everything is double
//! precision so that finite-difference checks are meaningful.

use ndarray::{s, Array2, Axis, Zip};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward rule for a single-input op whose forward was computed outside
/// the tape (Sinkhorn transport, histogram divergences).
pub trait CustomBackward: Send + Sync {
    fn backward(&self, input: &Array2<f64>, grad_out: &Array2<f64>) -> Array2<f64>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Relu(Var),
    Silu(Var),
    LayerNorm(Var, f64),
    SoftmaxRows(Var),
    RowNormalize(Var, f64),
    Slice {
        x: Var,
        rows: (usize, usize),
        cols: (usize, usize),
    },
    VConcat(Vec<Var>),
    HConcat(Vec<Var>),
    PairwiseProduct(Var, Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Bce {
        p: Var,
        target: Array2<f64>,
        clamp: f64,
    },
    Custom(Var, Box<dyn CustomBackward>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape if `v` did not influence the root.
    pub fn take_or_zeros(&mut self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Array2::zeros(shape))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.leaf(Array2::zeros((rows, cols)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    /// Elementwise product of equally shaped matrices.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddConst(a))
    }

    /// `x + row` with `row` (1 x c) broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let v = self.value(x) + self.value(row);
        self.push(v, Op::AddRow(x, row))
    }

    /// `x * row` elementwise with `row` (1 x c) broadcast over rows.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let v = self.value(x) * self.value(row);
        self.push(v, Op::MulRow(x, row))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    /// Per-row standardization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let c = row.len() as f64;
            let mean = row.sum() / c;
            let var = row.mapv(|v| (v - mean) * (v - mean)).sum() / c;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
        }
        self.push(out, Op::LayerNorm(a, eps))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let z = row.sum();
            row.mapv_inplace(|v| v / z);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Scales every row to unit L2 norm; `eps` is added under the square root.
    pub fn row_normalize(&mut self, a: Var, eps: f64) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let n = (row.dot(&row) + eps).sqrt();
            row.mapv_inplace(|v| v / n);
        }
        self.push(out, Op::RowNormalize(a, eps))
    }

    pub fn slice(&mut self, x: Var, rows: (usize, usize), cols: (usize, usize)) -> Var {
        let v = self
            .value(x)
            .slice(s![rows.0..rows.1, cols.0..cols.1])
            .to_owned();
        self.push(v, Op::Slice { x, rows, cols })
    }

    pub fn rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let c = self.shape(x).1;
        self.slice(x, (start, end), (0, c))
    }

    pub fn cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let r = self.shape(x).0;
        self.slice(x, (0, r), (start, end))
    }

    pub fn vconcat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("vconcat: column counts differ");
        self.push(v, Op::VConcat(parts.to_vec()))
    }

    pub fn hconcat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("hconcat: row counts differ");
        self.push(v, Op::HConcat(parts.to_vec()))
    }

    /// For `a` (m x d) and `b` (n x d), row `i * n + j` of the result is `a_i ⊙ b_j`.
    pub fn pairwise_product(&mut self, a: Var, b: Var) -> Var {
        let (m, d) = self.shape(a);
        let n = self.shape(b).0;
        let mut out = Array2::zeros((m * n, d));
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..m {
                let ai = av.row(i);
                for j in 0..n {
                    Zip::from(out.row_mut(i * n + j))
                        .and(&ai)
                        .and(&bv.row(j))
                        .for_each(|o, &x, &y| *o = x * y);
                }
            }
        }
        self.push(out, Op::PairwiseProduct(a, b))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let v = self
            .value(x)
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((rows, cols))
            .expect("reshape: element count differs");
        self.push(v, Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let v = Array2::from_elem((1, 1), self.value(x).sum() / n);
        self.push(v, Op::Mean(x))
    }

    /// Mean binary cross-entropy with probabilities clamped to `[clamp, 1 - clamp]`.
    pub fn bce(&mut self, p: Var, target: Array2<f64>, clamp: f64) -> Var {
        let pv = self.value(p);
        let n = pv.len().max(1) as f64;
        let mut total = 0.0;
        Zip::from(pv).and(&target).for_each(|&p, &y| {
            let q = p.clamp(clamp, 1.0 - clamp);
            total -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
        });
        let v = Array2::from_elem((1, 1), total / n);
        self.push(v, Op::Bce { p, target, clamp })
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(&mut self, input: Var, value: Array2<f64>, rule: Box<dyn CustomBackward>) -> Var {
        self.push(value, Op::Custom(input, rule))
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array2::ones(self.nodes[root.0].value.dim()));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * self.value(*b));
                    acc(&mut grads, *b, &g * self.value(*a));
                }
                Op::Scale(a, k) => acc(&mut grads, *a, &g * *k),
                Op::AddConst(a) => acc(&mut grads, *a, g.clone()),
                Op::AddRow(x, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *x, g.clone());
                    acc(&mut grads, *row, gr);
                }
                Op::MulRow(x, row) => {
                    let gx = &g * self.value(*row);
                    let gr = (&g * self.value(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *row, gr);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Sigmoid(a) => {
                    let gx = &g * &node.value.mapv(|y| y * (1.0 - y));
                    acc(&mut grads, *a, gx);
                }
                Op::Relu(a) => {
                    let gx = Zip::from(&g).and(self.value(*a)).map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                    acc(&mut grads, *a, gx);
                }
                Op::Silu(a) => {
                    let gx = Zip::from(&g).and(self.value(*a)).map_collect(|&g, &x| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    });
                    acc(&mut grads, *a, gx);
                }
                Op::LayerNorm(a, eps) => {
                    let x = self.value(*a);
                    let mut gx = Array2::zeros(x.dim());
                    for ((xr, gr), (mut out, yr)) in x
                        .rows()
                        .into_iter()
                        .zip(g.rows())
                        .zip(gx.rows_mut().into_iter().zip(node.value.rows()))
                    {
                        let c = xr.len() as f64;
                        let mean = xr.sum() / c;
                        let var = xr.mapv(|v| (v - mean) * (v - mean)).sum() / c;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mg = gr.sum() / c;
                        let mgy = gr.dot(&yr) / c;
                        Zip::from(&mut out)
                            .and(&gr)
                            .and(&yr)
                            .for_each(|o, &gi, &yi| *o = inv * (gi - mg - yi * mgy));
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut gx = &g * y;
                    for (mut row, yr) in gx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        Zip::from(&mut row).and(&yr).for_each(|o, &yi| *o -= yi * dot);
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::RowNormalize(a, eps) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut gx = Array2::zeros(x.dim());
                    for ((xr, yr), (gr, mut out)) in x
                        .rows()
                        .into_iter()
                        .zip(y.rows())
                        .zip(g.rows().into_iter().zip(gx.rows_mut()))
                    {
                        let n = (xr.dot(&xr) + eps).sqrt();
                        let gy = gr.dot(&yr);
                        Zip::from(&mut out)
                            .and(&gr)
                            .and(&yr)
                            .for_each(|o, &gi, &yi| *o = (gi - yi * gy) / n);
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::Slice { x, rows, cols } => {
                    let mut gx = Array2::zeros(self.shape(*x));
                    gx.slice_mut(s![rows.0..rows.1, cols.0..cols.1]).assign(&g);
                    acc(&mut grads, *x, gx);
                }
                Op::VConcat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let r = self.shape(*p).0;
                        acc(&mut grads, *p, g.slice(s![start..start + r, ..]).to_owned());
                        start += r;
                    }
                }
                Op::HConcat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let c = self.shape(*p).1;
                        acc(&mut grads, *p, g.slice(s![.., start..start + c]).to_owned());
                        start += c;
                    }
                }
                Op::PairwiseProduct(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, _) = av.dim();
                    let n = bv.nrows();
                    let mut ga = Array2::zeros(av.dim());
                    let mut gb = Array2::zeros(bv.dim());
                    for i in 0..m {
                        for j in 0..n {
                            let gr = g.row(i * n + j);
                            Zip::from(ga.row_mut(i))
                                .and(&gr)
                                .and(&bv.row(j))
                                .for_each(|o, &gi, &y| *o += gi * y);
                            Zip::from(gb.row_mut(j))
                                .and(&gr)
                                .and(&av.row(i))
                                .for_each(|o, &gi, &x| *o += gi * x);
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Reshape(x) => {
                    let gx = g
                        .as_standard_layout()
                        .to_owned()
                        .into_shape_with_order(self.shape(*x))
                        .expect("reshape backward");
                    acc(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let gx = Array2::from_elem(self.shape(*x), g[[0, 0]]);
                    acc(&mut grads, *x, gx);
                }
                Op::Mean(x) => {
                    let shape = self.shape(*x);
                    let n = (shape.0 * shape.1).max(1) as f64;
                    acc(&mut grads, *x, Array2::from_elem(shape, g[[0, 0]] / n));
                }
                Op::Bce { p, target, clamp } => {
                    let pv = self.value(*p);
                    let n = pv.len().max(1) as f64;
                    let scale = g[[0, 0]] / n;
                    let gp = Zip::from(pv).and(target).map_collect(|&p, &y| {
                        if p <= *clamp || p >= 1.0 - *clamp {
                            0.0
                        } else {
                            -scale * (y / p - (1.0 - y) / (1.0 - p))
                        }
                    });
                    acc(&mut grads, *p, gp);
                }
                Op::Custom(x, rule) => {
                    let gx = rule.backward(self.value(*x), &g);
                    acc(&mut grads, *x, gx);
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}
