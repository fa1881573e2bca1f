//! Minimal reverse-mode autodiff over 2-D `f64` arrays.
//!
//! Parameters live outside the tape and are referenced by index, so building
//! a graph never copies weights.

use ndarray::{s, Array2, Axis, Zip};

pub type Var = usize;

const LN_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Const,
    Param(usize),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    Add(Var, Var),
    /// `a + 1ᵀ·row`, with `row` of shape 1×n.
    AddRow(Var, Var),
    Scale(Var, f64),
    /// Elementwise product with a constant (dropout masks).
    Mask(Var, Array2<f64>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Tanh(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    /// `-Σ t·log softmax(z)` for a 1×n logits row; output 1×1.
    SoftCrossEntropy(Var, Array2<f64>),
}

struct Node {
    op: Op,
    value: Option<Array2<f64>>,
}

pub struct Tape<'p> {
    params: &'p [Array2<f64>],
    nodes: Vec<Node>,
}

/// Gradients of one backward pass: per node and per parameter. Entries that
/// the root does not depend on are `None`.
pub struct Gradients {
    pub nodes: Vec<Option<Array2<f64>>>,
    pub params: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn node(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes[v].as_ref()
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Array2<f64>]) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(512),
        }
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        self.nodes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        let node = &self.nodes[v];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => &self.params[*id],
            (_, Some(value)) => value,
            _ => unreachable!("non-parameter node without value"),
        }
    }

    /// Mutable access to a computed value, used for perturbation hooks.
    /// Downstream nodes must not exist yet.
    pub fn value_mut(&mut self, v: Var) -> &mut Array2<f64> {
        assert_eq!(
            v + 1,
            self.nodes.len(),
            "only the newest node may be edited"
        );
        self.nodes[v]
            .value
            .as_mut()
            .expect("parameters are read-only")
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Const, value)
    }

    pub fn param(&mut self, id: usize) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        self.nodes.len() - 1
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(Op::MatMulNT(a, b), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(Op::AddRow(a, row), v)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(Op::Scale(a, k), v)
    }

    pub fn mask(&mut self, a: Var, m: Array2<f64>) -> Var {
        let v = self.value(a) * &m;
        self.push(Op::Mask(a, m), v)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(Op::Softmax(a), v)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let out = &(&xhat * self.value(gamma)) + self.value(beta);
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            out,
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(Op::Gelu(a), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(Op::SliceCols(a, start, end), v)
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(Op::ConcatCols(parts), v)
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let v = self.value(a).select(Axis(0), &rows);
        self.push(Op::GatherRows(a, rows), v)
    }

    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Array2<f64>) -> Var {
        let z = self.value(logits);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        let loss: f64 = Zip::from(z)
            .and(&targets)
            .fold(0.0, |acc, &zi, &ti| acc - ti * (zi - log_sum));
        self.push(
            Op::SoftCrossEntropy(logits, targets),
            Array2::from_elem((1, 1), loss),
        )
    }

    /// Backpropagates `seed` (same shape as `root`) through the tape.
    pub fn backward(&self, root: Var, seed: Array2<f64>) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; root + 1];
        let mut pgrads: Vec<Option<Array2<f64>>> = vec![None; self.params.len()];
        grads[root] = Some(seed);
        for v in (0..=root).rev() {
            let Some(g) = grads[v].take() else { continue };
            match &self.nodes[v].op {
                Op::Const => {}
                Op::Param(id) => accumulate(&mut pgrads[*id], g.clone()),
                Op::MatMul(a, b) => {
                    accumulate(&mut grads[*a], g.dot(&self.value(*b).t()));
                    accumulate(&mut grads[*b], self.value(*a).t().dot(&g));
                }
                Op::MatMulNT(a, b) => {
                    accumulate(&mut grads[*a], g.dot(self.value(*b)));
                    accumulate(&mut grads[*b], g.t().dot(self.value(*a)));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], g.clone());
                    accumulate(&mut grads[*b], g.clone());
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads[*row], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads[*a], g.clone());
                }
                Op::Scale(a, k) => accumulate(&mut grads[*a], &g * *k),
                Op::Mask(a, m) => accumulate(&mut grads[*a], &g * m),
                Op::Softmax(a) => {
                    let y = self.value(v);
                    let mut dx = &g * y;
                    for (mut row, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        Zip::from(&mut row)
                            .and(&yrow)
                            .for_each(|d, &yi| *d -= yi * dot);
                    }
                    accumulate(&mut grads[*a], dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let n = xhat.ncols() as f64;
                    accumulate(&mut grads[*beta], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(
                        &mut grads[*gamma],
                        (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    let dxhat = &g * self.value(*gamma);
                    let mut dx = Array2::zeros(dxhat.raw_dim());
                    for (r, mut out) in dx.rows_mut().into_iter().enumerate() {
                        let d = dxhat.row(r);
                        let h = xhat.row(r);
                        let sum_d = d.sum();
                        let sum_dh = d.dot(&h);
                        let is = inv_std[r];
                        Zip::from(&mut out)
                            .and(&d)
                            .and(&h)
                            .for_each(|o, &di, &hi| *o = is / n * (n * di - sum_d - hi * sum_dh));
                    }
                    accumulate(&mut grads[*x], dx);
                }
                Op::Gelu(a) => {
                    let mut dx = self.value(*a).mapv(gelu_grad);
                    dx *= &g;
                    accumulate(&mut grads[*a], dx);
                }
                Op::Tanh(a) => {
                    let mut dx = self.value(v).mapv(|y| 1.0 - y * y);
                    dx *= &g;
                    accumulate(&mut grads[*a], dx);
                }
                Op::SliceCols(a, start, end) => {
                    let mut dx = Array2::zeros(self.value(*a).raw_dim());
                    dx.slice_mut(s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads[*a], dx);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        accumulate(&mut grads[p], g.slice(s![.., col..col + w]).to_owned());
                        col += w;
                    }
                }
                Op::GatherRows(a, rows) => {
                    let mut dx = Array2::zeros(self.value(*a).raw_dim());
                    for (r, &src) in rows.iter().enumerate() {
                        let mut dst = dx.row_mut(src);
                        dst += &g.row(r);
                    }
                    accumulate(&mut grads[*a], dx);
                }
                Op::SoftCrossEntropy(logits, targets) => {
                    let p = softmax_rows(self.value(*logits));
                    let total = targets.sum();
                    let dz = (&p * total - targets) * g[[0, 0]];
                    accumulate(&mut grads[*logits], dz);
                }
            }
            grads[v] = Some(g);
        }
        Gradients {
            nodes: grads,
            params: pgrads,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference check of d(sum(w ⊙ f(x)))/dx for one op.
    fn check_unary(build: impl Fn(&mut Tape, Var) -> Var, x: Array2<f64>) {
        let weights = |shape: (usize, usize)| {
            Array2::from_shape_fn(shape, |(i, j)| {
                0.3 + 0.7 * ((i * 7 + j * 3) % 5) as f64 / 5.0
            })
        };
        let eval = |x: &Array2<f64>| {
            let params = [x.clone()];
            let mut t = Tape::new(&params);
            let p = t.param(0);
            let out = build(&mut t, p);
            let w = weights(t.value(out).dim());
            (t.value(out) * &w).sum()
        };
        let params = [x.clone()];
        let mut t = Tape::new(&params);
        let p = t.param(0);
        let out = build(&mut t, p);
        let w = weights(t.value(out).dim());
        let grads = t.backward(out, w);
        let analytic = grads.params[0].clone().unwrap();
        let eps = 1e-6;
        for idx in ndarray::indices(x.dim()) {
            let mut plus = x.clone();
            plus[idx] += eps;
            let mut minus = x.clone();
            minus[idx] -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic[idx];
            assert!(
                (fd - a).abs() <= 1e-6 * (1.0 + fd.abs()),
                "fd {fd} vs analytic {a} at {idx:?}"
            );
        }
    }

    fn x() -> Array2<f64> {
        array![[0.3, -1.2, 0.8], [1.5, 0.1, -0.4]]
    }

    #[test]
    fn softmax_gradient() {
        check_unary(|t, p| t.softmax(p), x());
    }

    #[test]
    fn layer_norm_gradient() {
        let gamma = array![[1.2, 0.7, -0.5]];
        let beta = array![[0.1, 0.0, 0.3]];
        check_unary(
            move |t, p| {
                let g = t.constant(gamma.clone());
                let b = t.constant(beta.clone());
                t.layer_norm(p, g, b)
            },
            x(),
        );
    }

    #[test]
    fn elementwise_gradients() {
        check_unary(|t, p| t.gelu(p), x());
        check_unary(|t, p| t.tanh(p), x());
        check_unary(|t, p| t.scale(p, -2.5), x());
    }

    #[test]
    fn matmul_gradients() {
        let b = array![[0.5, -1.0], [2.0, 0.3], [-0.7, 1.1]];
        check_unary(
            move |t, p| {
                let c = t.constant(b.clone());
                t.matmul(p, c)
            },
            x(),
        );
        check_unary(|t, p| t.matmul_nt(p, p), x());
    }

    #[test]
    fn structural_gradients() {
        check_unary(
            |t, p| {
                let a = t.slice_cols(p, 0, 1);
                let b = t.slice_cols(p, 1, 3);
                let c = t.concat_cols(vec![b, a]);
                let r = t.gather_rows(p, vec![1, 1, 0]);
                let row = t.gather_rows(p, vec![0]);
                let c2 = t.add_row(c, row);
                let rr = t.slice_cols(r, 0, 3);
                let rr = t.gather_rows(rr, vec![0, 2]);
                t.add(c2, rr)
            },
            x(),
        );
    }

    #[test]
    fn cross_entropy_gradient() {
        let targets = array![[0.25, 0.0, 0.75]];
        check_unary(
            move |t, p| {
                let row = t.gather_rows(p, vec![1]);
                t.soft_cross_entropy(row, targets.clone())
            },
            x(),
        );
    }

    #[test]
    fn unreached_nodes_have_no_gradient() {
        let params = [x()];
        let mut t = Tape::new(&params);
        let p = t.param(0);
        let dead = t.tanh(p);
        let live = t.scale(p, 2.0);
        let g = t.backward(live, Array2::ones((2, 3)));
        assert!(g.node(dead).is_none());
        assert_eq!(
            g.params[0].as_ref().unwrap(),
            &Array2::from_elem((2, 3), 2.0)
        );
    }
}
