//! Minimal reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Tape`] records a computation as a flat list of nodes; [`Tape::backward`]
//! walks it in reverse accumulating adjoints. Operations are coarse (whole
//! matrices) so the node count stays small even for full transformer passes.

use ndarray::{Array2, Axis};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;
const LN_EPS: f64 = 1e-8;

enum Op {
    Leaf,
    Add(Var, Var),
    /// Broadcast-add a 1 x n row vector to every row.
    AddRow(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    Mul(Var, Var),
    MatMul(Var, Var),
    /// a . b^T
    MatMulNT(Var, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
    },
    Gelu(Var),
    ConcatRows(Var, Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    /// Summed token-level cross entropy of row-wise logits against targets.
    CrossEntropySum {
        logits: Var,
        targets: Vec<usize>,
    },
    SumAll(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[row.0].value;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn add_const(&mut self, a: Var, c: &Array2<f64>) -> Var {
        let v = &self.nodes[a.0].value + c;
        self.push(v, Op::AddConst(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(&self.nodes[a.0].value);
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(&self.nodes[a.0].value);
        self.push(v, Op::LogSoftmaxRows(a))
    }

    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let n = xv.ncols() as f64;
        let mut out = xv.clone();
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
        }
        let out = &out * &self.nodes[gain.0].value + &self.nodes[bias.0].value;
        self.push(out, Op::LayerNormRows { x, gain, bias })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| {
            let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
            0.5 * x * (1.0 + t)
        });
        self.push(v, Op::Gelu(a))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut v = Array2::zeros((av.nrows() + bv.nrows(), av.ncols()));
        v.slice_mut(ndarray::s![..av.nrows(), ..]).assign(av);
        v.slice_mut(ndarray::s![av.nrows().., ..]).assign(bv);
        self.push(v, Op::ConcatRows(a, b))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.nodes[x.0]
            .value
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        self.push(v, Op::SliceRows { x, start })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.nodes[x.0]
            .value
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(v, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.ncols()).sum();
        let rows = self.nodes[parts[0].0].value.nrows();
        let mut v = Array2::zeros((rows, total));
        let mut at = 0;
        for p in &parts {
            let pv = &self.nodes[p.0].value;
            v.slice_mut(ndarray::s![.., at..at + pv.ncols()]).assign(pv);
            at += pv.ncols();
        }
        self.push(v, Op::ConcatCols(parts))
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = &self.nodes[table.0].value;
        let mut v = Array2::zeros((idx.len(), t.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).assign(&t.row(i));
        }
        self.push(
            v,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lsm = log_softmax_rows(&self.nodes[logits.0].value);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            loss -= lsm[[r, t]];
        }
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a))
    }

    /// Runs the reverse pass from a scalar root. Returns one adjoint per node
    /// (same shape as the node's value); untouched nodes get zeros on demand.
    pub fn backward(&self, root: Var) -> Vec<Array2<f64>> {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones(self.nodes[root.0].value.dim()));

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.unwrap_or_else(|| Array2::zeros(self.nodes[i].value.dim())))
            .collect()
    }

    pub fn grad_of(&self, grads: &[Array2<f64>], v: Var) -> Array2<f64> {
        grads[v.0].clone()
    }

    fn bump(grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn accumulate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::bump(grads, *a, g.clone());
                Self::bump(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                Self::bump(grads, *a, g.clone());
                let rg = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                Self::bump(grads, *row, rg);
            }
            Op::AddConst(a) => Self::bump(grads, *a, g.clone()),
            Op::Scale(a, s) => Self::bump(grads, *a, g.mapv(|x| x * s)),
            Op::Mul(a, b) => {
                Self::bump(grads, *a, g * &self.nodes[b.0].value);
                Self::bump(grads, *b, g * &self.nodes[a.0].value);
            }
            Op::MatMul(a, b) => {
                Self::bump(grads, *a, g.dot(&self.nodes[b.0].value.t()));
                Self::bump(grads, *b, self.nodes[a.0].value.t().dot(g));
            }
            Op::MatMulNT(a, b) => {
                Self::bump(grads, *a, g.dot(&self.nodes[b.0].value));
                Self::bump(grads, *b, g.t().dot(&self.nodes[a.0].value));
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut dx = g * y;
                for (mut row, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = row.sum();
                    for (d, yv) in row.iter_mut().zip(yrow.iter()) {
                        *d -= dot * yv;
                    }
                }
                Self::bump(grads, *a, dx);
            }
            Op::LogSoftmaxRows(a) => {
                let p = softmax_rows(&self.nodes[a.0].value);
                let mut dx = g.clone();
                for (mut row, prow) in dx.rows_mut().into_iter().zip(p.rows()) {
                    let rowsum: f64 = row.sum();
                    for (d, pv) in row.iter_mut().zip(prow.iter()) {
                        *d -= rowsum * pv;
                    }
                }
                Self::bump(grads, *a, dx);
            }
            Op::LayerNormRows { x, gain, bias } => {
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gain.0].value;
                let n = xv.ncols() as f64;
                let mut dx = Array2::zeros(xv.dim());
                let mut dgain = Array2::<f64>::zeros(gv.dim());
                let mut dbias = Array2::<f64>::zeros(gv.dim());
                for r in 0..xv.nrows() {
                    let row = xv.row(r);
                    let mean = row.sum() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dy: Vec<f64> = g
                        .row(r)
                        .iter()
                        .zip(gv.row(0).iter())
                        .map(|(gy, gn)| gy * gn)
                        .collect();
                    let mean_dy = dy.iter().sum::<f64>() / n;
                    let mean_dy_xhat =
                        dy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                    for c in 0..xv.ncols() {
                        dx[[r, c]] = inv * (dy[c] - mean_dy - xhat[c] * mean_dy_xhat);
                        dgain[[0, c]] += g[[r, c]] * xhat[c];
                        dbias[[0, c]] += g[[r, c]];
                    }
                }
                Self::bump(grads, *x, dx);
                Self::bump(grads, *gain, dgain);
                Self::bump(grads, *bias, dbias);
            }
            Op::Gelu(a) => {
                let dx = self.nodes[a.0].value.mapv(|x| {
                    let inner = GELU_C * (x + GELU_A * x * x * x);
                    let t = inner.tanh();
                    0.5 * (1.0 + t)
                        + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
                });
                Self::bump(grads, *a, g * &dx);
            }
            Op::ConcatRows(a, b) => {
                let ar = self.nodes[a.0].value.nrows();
                Self::bump(grads, *a, g.slice(ndarray::s![..ar, ..]).to_owned());
                Self::bump(grads, *b, g.slice(ndarray::s![ar.., ..]).to_owned());
            }
            Op::SliceRows { x, start } => {
                let mut dx = Array2::zeros(self.nodes[x.0].value.dim());
                dx.slice_mut(ndarray::s![*start..*start + g.nrows(), ..])
                    .assign(g);
                Self::bump(grads, *x, dx);
            }
            Op::SliceCols { x, start } => {
                let mut dx = Array2::zeros(self.nodes[x.0].value.dim());
                dx.slice_mut(ndarray::s![.., *start..*start + g.ncols()])
                    .assign(g);
                Self::bump(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.ncols();
                    Self::bump(grads, *p, g.slice(ndarray::s![.., at..at + w]).to_owned());
                    at += w;
                }
            }
            Op::GatherRows { table, idx } => {
                let mut dt = Array2::zeros(self.nodes[table.0].value.dim());
                for (r, &src) in idx.iter().enumerate() {
                    let mut drow = dt.row_mut(src);
                    drow += &g.row(r);
                }
                Self::bump(grads, *table, dt);
            }
            Op::CrossEntropySum { logits, targets } => {
                let scale = g[[0, 0]];
                let mut dl = softmax_rows(&self.nodes[logits.0].value);
                for (r, &t) in targets.iter().enumerate() {
                    dl[[r, t]] -= 1.0;
                }
                Self::bump(grads, *logits, dl.mapv(|x| x * scale));
            }
            Op::SumAll(a) => {
                let scale = g[[0, 0]];
                Self::bump(
                    grads,
                    *a,
                    Array2::from_elem(self.nodes[a.0].value.dim(), scale),
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| {
            // Box-Muller keeps us off rand_distr for a test helper.
            let u1: f64 = rng.gen_range(1e-10..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
    }

    /// Central finite differences of a scalar-valued tape build against the
    /// analytic gradient for one leaf.
    fn check_grad<F>(build: F, inputs: Vec<Array2<f64>>, wrt: usize, tol: f64)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let h = 1e-5;
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let root = build(&mut tape, &vars);
        assert_eq!(tape.value(root).dim(), (1, 1));
        let grads = tape.backward(root);
        let analytic = tape.grad_of(&grads, vars[wrt]);

        for r in 0..inputs[wrt].nrows() {
            for c in 0..inputs[wrt].ncols() {
                let eval = |delta: f64| {
                    let mut shifted = inputs.clone();
                    shifted[wrt][[r, c]] += delta;
                    let mut t = Tape::new();
                    let vs: Vec<Var> = shifted.iter().map(|x| t.leaf(x.clone())).collect();
                    let rt = build(&mut t, &vs);
                    t.scalar(rt)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic[[r, c]];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(
                    rel <= tol,
                    "grad mismatch at ({r},{c}): analytic {a} vs fd {fd} (rel {rel})"
                );
            }
        }
    }

    #[test]
    fn grad_matmul_softmax_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, 3, 4);
        let b = randn(&mut rng, 4, 5);
        check_grad(
            |t, v| {
                let m = t.matmul(v[0], v[1]);
                t.cross_entropy_sum(m, &[1, 0, 4])
            },
            vec![a, b],
            0,
            1e-4,
        );
    }

    #[test]
    fn grad_softmax_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn(&mut rng, 2, 6);
        let w = randn(&mut rng, 2, 6);
        check_grad(
            |t, v| {
                let s = t.softmax_rows(v[0]);
                let m = t.mul(s, v[1]);
                t.sum_all(m)
            },
            vec![a, w],
            0,
            1e-4,
        );
    }

    #[test]
    fn grad_log_softmax_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn(&mut rng, 2, 5);
        let w = randn(&mut rng, 2, 5);
        check_grad(
            |t, v| {
                let s = t.log_softmax_rows(v[0]);
                let m = t.mul(s, v[1]);
                t.sum_all(m)
            },
            vec![a, w],
            0,
            1e-4,
        );
    }

    #[test]
    fn grad_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&mut rng, 3, 8);
        let gain = randn(&mut rng, 1, 8);
        let bias = randn(&mut rng, 1, 8);
        let w = randn(&mut rng, 3, 8);
        for wrt in 0..3 {
            check_grad(
                |t, v| {
                    let y = t.layer_norm_rows(v[0], v[1], v[2]);
                    let m = t.mul(y, v[3]);
                    t.sum_all(m)
                },
                vec![x.clone(), gain.clone(), bias.clone(), w.clone()],
                wrt,
                1e-4,
            );
        }
    }

    #[test]
    fn grad_gelu() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, 3, 4);
        let w = randn(&mut rng, 3, 4);
        check_grad(
            |t, v| {
                let y = t.gelu(v[0]);
                let m = t.mul(y, v[1]);
                t.sum_all(m)
            },
            vec![x, w],
            0,
            1e-4,
        );
    }

    #[test]
    fn grad_attention_block() {
        // q.k^T scaled, masked, softmaxed, applied to v: the attention core.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = randn(&mut rng, 4, 3);
        let k = randn(&mut rng, 4, 3);
        let v = randn(&mut rng, 4, 3);
        let w = randn(&mut rng, 4, 3);
        let mask = Array2::from_shape_fn((4, 4), |(i, j)| if j > i { -1e30 } else { 0.0 });
        for wrt in 0..3 {
            let mask = mask.clone();
            check_grad(
                move |t, vars| {
                    let s = t.matmul_nt(vars[0], vars[1]);
                    let s = t.scale(s, 1.0 / 3f64.sqrt());
                    let s = t.add_const(s, &mask);
                    let p = t.softmax_rows(s);
                    let ctx = t.matmul(p, vars[2]);
                    let m = t.mul(ctx, vars[3]);
                    t.sum_all(m)
                },
                vec![q.clone(), k.clone(), v.clone(), w.clone()],
                wrt,
                1e-4,
            );
        }
    }

    #[test]
    fn grad_gather_concat_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let table = randn(&mut rng, 5, 3);
        let extra = randn(&mut rng, 2, 3);
        let w = randn(&mut rng, 3, 3);
        for wrt in 0..2 {
            check_grad(
                |t, v| {
                    let g = t.gather_rows(v[0], &[4, 0, 0, 2]);
                    let cat = t.concat_rows(g, v[1]);
                    let sl = t.slice_rows(cat, 1, 3);
                    let m = t.mul(sl, v[2]);
                    t.sum_all(m)
                },
                vec![table.clone(), extra.clone(), w.clone()],
                wrt,
                1e-4,
            );
        }
    }

    #[test]
    fn grad_cols_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, 3, 6);
        let w = randn(&mut rng, 3, 6);
        check_grad(
            |t, v| {
                let a = t.slice_cols(v[0], 0, 3);
                let b = t.slice_cols(v[0], 3, 3);
                let cat = t.concat_cols(vec![b, a]);
                let m = t.mul(cat, v[1]);
                t.sum_all(m)
            },
            vec![x, w],
            0,
            1e-4,
        );
    }

    #[test]
    fn linear_loss_has_unit_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array2::from_elem((3, 4), 0.37));
        let s = tape.sum_all(x);
        let grads = tape.backward(s);
        assert_eq!(tape.grad_of(&grads, x), Array2::<f64>::ones((3, 4)));
    }
}
