//! Reverse-mode automatic differentiation over an explicit, single-owner tape.
//!
//! Every operation appends a node whose parents were recorded earlier, so the
//! node list is already in topological order and `backward` is one reverse sweep.

use std::rc::Rc;

use crate::error::{Result, TanoError};
use crate::tensor::{self, ConvGeometry, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Class targets for [`Tape::cross_entropy`].
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Classes(&'a [usize]),
    /// One row per example; rows are one-hot or any distribution.
    Distribution(&'a Tensor),
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that only evaluates; no backward closures are stored.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = self.recording;
        self.nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shared(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a custom operation. `backward` maps the output gradient to one
    /// gradient buffer per parent, in order.
    pub fn push_op<F>(&mut self, value: Tensor, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&[f64]) -> Vec<Vec<f64>> + 'static,
    {
        let requires_grad = self.recording && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(TanoError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        if !self.recording {
            return Err(TanoError::Contract("backward on a no-grad tape".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            for (&p, pg) in node.parents.iter().zip(backward(&g)) {
                if !self.nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(pg),
                }
            }
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                let g = g.filter(|_| node.backward.is_none() && node.requires_grad)?;
                Tensor::new(node.value.shape(), g).ok()
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn check_same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TanoError::dim(format!(
                "{op}: shapes {sa:?} and {sb:?} differ"
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let out: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape(), out)?;
        Ok(self.push_op(out, &[a, b], |g| vec![g.to_vec(), g.to_vec()]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "sub")?;
        let (x, y) = (self.value(a), self.value(b));
        let out: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Tensor::new(x.shape(), out)?;
        Ok(self.push_op(out, &[a, b], |g| {
            vec![g.to_vec(), g.iter().map(|v| -v).collect()]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "mul")?;
        let (x, y) = (self.shared(a), self.shared(b));
        let out: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape(), out)?;
        Ok(self.push_op(out, &[a, b], move |g| {
            vec![
                g.iter().zip(y.data()).map(|(g, q)| g * q).collect(),
                g.iter().zip(x.data()).map(|(g, p)| g * p).collect(),
            ]
        }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push_op(out, &[a], move |g| {
            vec![g.iter().map(|v| v * factor).collect()]
        })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.len();
        let out = Tensor::scalar(x.data().iter().sum());
        self.push_op(out, &[a], move |g| vec![vec![g[0]; n]])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push_op(out, &[a], |g| vec![g.to_vec()]))
    }

    /// Collapses all but the leading axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape();
        let lead = *shape
            .first()
            .ok_or_else(|| TanoError::dim("flatten of scalar"))?;
        let rest = shape[1..].iter().product();
        self.reshape(a, &[lead, rest])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.shared(a), self.shared(b));
        let (m, k) = x.dims2()?;
        let (k2, n) = y.dims2()?;
        if k != k2 {
            return Err(TanoError::dim(format!(
                "matmul inner dimensions differ: {:?} × {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        tensor::gemm_acc(m, k, n, x.data(), y.data(), &mut out);
        let out = Tensor::new([m, n], out)?;
        Ok(self.push_op(out, &[a, b], move |g| {
            let mut ga = vec![0.0; m * k];
            tensor::gemm(m, n, k, g, false, y.data(), true, &mut ga);
            let mut gb = vec![0.0; k * n];
            tensor::gemm(k, m, n, x.data(), true, g, false, &mut gb);
            vec![ga, gb]
        }))
    }

    /// `a[M×N] + bias[N]` broadcast over rows.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if self.value(bias).len() != n {
            return Err(TanoError::dim(format!(
                "bias of length {} for matrix with {n} columns",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(a).clone();
        out.data_mut()
            .chunks_mut(n)
            .for_each(|row| row.iter_mut().zip(&b).for_each(|(v, b)| *v += b));
        Ok(self.push_op(out, &[a, bias], move |g| {
            let mut gb = vec![0.0; n];
            g.chunks(n)
                .for_each(|row| gb.iter_mut().zip(row).for_each(|(s, v)| *s += v));
            debug_assert_eq!(g.len(), m * n);
            vec![g.to_vec(), gb]
        }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.shared(a);
        let out = x.map(|v| v.max(0.0));
        self.push_op(out, &[a], move |g| {
            vec![g
                .iter()
                .zip(x.data())
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect()]
        })
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (x, k) = (self.shared(input), self.shared(kernel));
        let geo = ConvGeometry::new(x.shape(), k.shape(), stride, padding)?;
        let (out, col) = geo.forward(x.data(), k.data());
        let out = Tensor::new(geo.output_shape(), out)?;
        Ok(self.push_op(out, &[input, kernel], move |g| {
            let (gx, gk) = geo.backward(g, &col, k.data());
            vec![gx, gk]
        }))
    }

    pub fn max_pool2(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        x.dims4()?;
        let n_in = x.len();
        let (shape, out, arg) = tensor::max_pool2_forward(x.data(), x.shape());
        let out = Tensor::new(shape, out)?;
        Ok(self.push_op(out, &[a], move |g| {
            let mut gx = vec![0.0; n_in];
            for (&src, gv) in arg.iter().zip(g) {
                gx[src] += gv;
            }
            vec![gx]
        }))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let y = Rc::new(tensor::softmax_along(x.data(), &shape, axis, false)?);
        let out = Tensor::new(shape.clone(), y.to_vec())?;
        Ok(self.push_op(out, &[a], move |g| {
            let (outer, len, inner) = tensor::axis_split(&shape, axis).expect("validated");
            let mut gx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..len {
                        gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![gx]
        }))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let ls = tensor::softmax_along(x.data(), &shape, axis, true)?;
        let p: Vec<f64> = ls.iter().map(|v| v.exp()).collect();
        let out = Tensor::new(shape.clone(), ls)?;
        Ok(self.push_op(out, &[a], move |g| {
            let (outer, len, inner) = tensor::axis_split(&shape, axis).expect("validated");
            let mut gx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let gs: f64 = (0..len).map(|j| g[at(j)]).sum();
                    for j in 0..len {
                        gx[at(j)] = g[at(j)] - p[at(j)] * gs;
                    }
                }
            }
            vec![gx]
        }))
    }

    /// Mean over the batch of `-Σ target · log softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, target: Target<'_>) -> Result<Var> {
        let (b, c) = self.value(logits).dims2()?;
        if c < 2 {
            return Err(TanoError::invalid(format!(
                "cross-entropy needs >= 2 classes, got {c}"
            )));
        }
        let dist = match target {
            Target::Classes(idx) => {
                if idx.len() != b {
                    return Err(TanoError::dim(format!(
                        "{} targets for batch of {b}",
                        idx.len()
                    )));
                }
                let mut t = vec![0.0; b * c];
                for (row, &k) in idx.iter().enumerate() {
                    if k >= c {
                        return Err(TanoError::invalid(format!(
                            "class index {k} out of range for {c} classes"
                        )));
                    }
                    t[row * c + k] = 1.0;
                }
                t
            }
            Target::Distribution(t) => {
                if t.shape() != [b, c] {
                    return Err(TanoError::dim(format!(
                        "target shape {:?} vs logits [{b}, {c}]",
                        t.shape()
                    )));
                }
                t.data().to_vec()
            }
        };
        let ls = tensor::softmax_along(self.value(logits).data(), &[b, c], 1, true)?;
        let loss = -ls.iter().zip(&dist).map(|(l, t)| l * t).sum::<f64>() / b as f64;
        Ok(self.push_op(Tensor::scalar(loss), &[logits], move |g| {
            let scale = g[0] / b as f64;
            let mut gx = vec![0.0; b * c];
            for r in 0..b {
                let row_t = &dist[r * c..(r + 1) * c];
                let mass: f64 = row_t.iter().sum();
                for j in 0..c {
                    gx[r * c + j] = scale * (ls[r * c + j].exp() * mass - row_t[j]);
                }
            }
            vec![gx]
        }))
    }

    /// Rows `[start, end)` of a tensor of any rank.
    pub fn rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let total = x.len();
        let out = x.slice_rows(start, end)?;
        let stride = total / x.shape()[0].max(1);
        Ok(self.push_op(out, &[a], move |g| {
            let mut gx = vec![0.0; total];
            gx[start * stride..end * stride].copy_from_slice(g);
            vec![gx]
        }))
    }

    /// Column means of an `M×N` matrix as a `1×N` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if m == 0 {
            return Err(TanoError::invalid("mean over zero rows"));
        }
        let mut out = vec![0.0; n];
        for row in self.value(a).data().chunks(n) {
            out.iter_mut()
                .zip(row)
                .for_each(|(s, v)| *s += v / m as f64);
        }
        let out = Tensor::new([1, n], out)?;
        Ok(self.push_op(out, &[a], move |g| {
            vec![(0..m * n).map(|i| g[i % n] / m as f64).collect()]
        }))
    }

    /// `out[b][c] = -‖q_b − p_c‖²` for queries `B×d` and prototypes `C×d`.
    pub fn neg_sq_dist(&mut self, queries: Var, protos: Var) -> Result<Var> {
        let (q, p) = (self.shared(queries), self.shared(protos));
        let (b, d) = q.dims2()?;
        let (c, d2) = p.dims2()?;
        if d != d2 {
            return Err(TanoError::dim(format!(
                "embedding dims differ: queries {:?}, prototypes {:?}",
                q.shape(),
                p.shape()
            )));
        }
        let mut out = vec![0.0; b * c];
        for i in 0..b {
            for j in 0..c {
                out[i * c + j] = -q
                    .row(i)
                    .iter()
                    .zip(p.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>();
            }
        }
        let out = Tensor::new([b, c], out)?;
        Ok(self.push_op(out, &[queries, protos], move |g| {
            let mut gq = vec![0.0; b * d];
            let mut gp = vec![0.0; c * d];
            for i in 0..b {
                for j in 0..c {
                    let w = g[i * c + j];
                    if w == 0.0 {
                        continue;
                    }
                    for t in 0..d {
                        let diff = q.data()[i * d + t] - p.data()[j * d + t];
                        gq[i * d + t] -= 2.0 * w * diff;
                        gp[j * d + t] += 2.0 * w * diff;
                    }
                }
            }
            vec![gq, gp]
        }))
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `like`'s shape when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// (parameter index, element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` receives a fresh tape and one leaf per entry of `params` and must return
/// a scalar. The relative error of an element is
/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(TanoError::invalid(
            "finite-difference step must be positive",
        ));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |values: &[Tensor], which: (usize, usize)| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = values.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item()?;
        if !v.is_finite() {
            return Err(TanoError::Numeric(format!(
                "non-finite function value {v} perturbing parameter {} element {}",
                which.0, which.1
            )));
        }
        Ok(v)
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[pi], param);
        for ei in 0..param.len() {
            let orig = param.data()[ei];
            work[pi].data_mut()[ei] = orig + h;
            let plus = eval(&work, (pi, ei))?;
            work[pi].data_mut()[ei] = orig - h;
            let minus = eval(&work, (pi, ei))?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[ei];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            if rel > report.max_rel_error || !rel.is_finite() {
                report = GradCheck {
                    max_rel_error: rel,
                    worst: (pi, ei),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn scalar_grad(x: f64, f: impl Fn(&mut Tape, Var) -> Var) -> f64 {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::scalar(x));
        let y = f(&mut tape, v);
        let grads = tape.backward(y).unwrap();
        grads.get(v).unwrap().data()[0]
    }

    #[test]
    fn linear_and_square_derivatives() {
        assert_eq!(scalar_grad(2.0, |t, x| t.scale(x, 3.0)), 3.0);
        assert_eq!(scalar_grad(5.0, |t, x| t.mul(x, x).unwrap()), 10.0);
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        assert_eq!(scalar_grad(1.5, |t, x| t.add(x, x).unwrap()), 2.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::zeros([2]));
        assert!(matches!(tape.backward(v), Err(TanoError::Contract(_))));
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::no_grad();
        let id = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.constant(t(&[2, 2], &[3., -1., 7., 2.5]));
        let p = tape.matmul(id, m).unwrap();
        assert_eq!(tape.value(p), tape.value(m));
        let a = tape.constant(t(&[1, 2], &[1., 2.]));
        let b = tape.constant(t(&[2, 1], &[3., 4.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
        let bad = tape.matmul(a, a).unwrap_err().to_string();
        assert!(bad.contains("[1, 2]"), "{bad}");
    }

    #[test]
    fn matmul_gradient_is_ones_times_b_transposed() {
        let a = t(&[2, 3], &[0.1, -0.4, 0.3, 1.2, 0.0, -0.7]);
        let b = t(&[3, 2], &[0.5, -1.0, 2.0, 0.25, -0.3, 0.8]);
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let p = tape.matmul(va, vb).unwrap();
        let s = tape.sum(p);
        let grads = tape.backward(s).unwrap();
        let ga = grads.get(va).unwrap();
        for i in 0..2 {
            for k in 0..3 {
                let expected: f64 = b.row(k).iter().sum();
                assert!((ga.data()[i * 3 + k] - expected).abs() < 1e-14);
            }
        }
        let check = finite_diff_check(
            |tape, v| {
                let p = tape.matmul(v[0], v[1])?;
                Ok(tape.sum(p))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-8, "{check:?}");
    }

    #[test]
    fn conv_examples() {
        let mut tape = Tape::no_grad();
        let x = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let k = tape.constant(Tensor::ones([1, 1, 2, 2]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[4.0; 4]);

        let data: Vec<f64> = (0..2 * 3 * 5 * 4).map(|i| (i as f64 * 0.7).sin()).collect();
        let x = tape.constant(t(&[2, 3, 5, 4], &data));
        let mut delta = vec![0.0; 3 * 3 * 3 * 3];
        for c in 0..3 {
            delta[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        let k = tape.constant(t(&[3, 3, 3, 3], &delta));
        let y = tape.conv2d(x, k, 1, 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let big = tape.constant(Tensor::ones([1, 1, 5, 5]));
        assert!(matches!(
            tape.conv2d(x, big, 1, 0),
            Err(TanoError::Dimension(_))
        ));
    }

    #[test]
    fn conv_stride_shape() {
        let mut tape = Tape::no_grad();
        let x = tape.constant(Tensor::ones([1, 2, 7, 7]));
        let k = tape.constant(Tensor::ones([4, 2, 3, 3]));
        let y = tape.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 4, 4, 4]);
    }

    #[test]
    fn relu_and_softmax_examples() {
        let mut tape = Tape::no_grad();
        let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let z = tape.constant(Tensor::zeros([1, 4]));
        let s = tape.softmax(z, 1).unwrap();
        assert_eq!(tape.value(s).data(), &[0.25; 4]);

        let l = tape.constant(t(&[2], &[2f64.ln(), 1f64.ln()]));
        let s = tape.softmax(l, 0).unwrap();
        let got = tape.value(s).data();
        assert!((got[0] - 2.0 / 3.0).abs() < 1e-15 && (got[1] - 1.0 / 3.0).abs() < 1e-15);

        let empty = tape.constant(Tensor::zeros([2, 0]));
        assert!(tape.softmax(empty, 1).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::no_grad();
        let u = tape.constant(Tensor::zeros([3, 7]));
        let l = tape.cross_entropy(u, Target::Classes(&[0, 3, 6])).unwrap();
        assert!((tape.value(l).data()[0] - 7f64.ln()).abs() < 1e-14);

        let sharp = tape.constant(t(&[1, 2], &[10.0, -10.0]));
        let l = tape.cross_entropy(sharp, Target::Classes(&[0])).unwrap();
        let expected = (1.0 + (-20f64).exp()).ln();
        assert!((tape.value(l).data()[0] - expected).abs() < 1e-20);
        assert!((expected - 2.061e-9).abs() < 1e-12);

        assert!(matches!(
            tape.cross_entropy(sharp, Target::Classes(&[2])),
            Err(TanoError::Validation(_))
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = t(&[2, 3], &[0.3, -1.2, 0.8, 2.0, 0.1, -0.5]);
        let mut tape = Tape::new();
        let v = tape.leaf(logits.clone());
        let l = tape.cross_entropy(v, Target::Classes(&[2, 0])).unwrap();
        let g = tape.backward(l).unwrap();
        let sm = tensor::softmax_along(logits.data(), &[2, 3], 1, false).unwrap();
        let onehot = [0., 0., 1., 1., 0., 0.];
        for i in 0..6 {
            let expected = (sm[i] - onehot[i]) / 2.0;
            assert!((g.get(v).unwrap().data()[i] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn finite_diff_on_linear_and_quadratic() {
        let p = t(&[4], &[0.5, -1.5, 2.0, 0.1]);
        let lin = finite_diff_check(
            |tape, v| {
                let s = tape.scale(v[0], 3.0);
                Ok(tape.sum(s))
            },
            std::slice::from_ref(&p),
            1e-5,
        )
        .unwrap();
        assert!(lin.max_rel_error < 1e-9, "{lin:?}");
        let sq = finite_diff_check(
            |tape, v| {
                let s = tape.mul(v[0], v[0])?;
                Ok(tape.sum(s))
            },
            &[p],
            1e-5,
        )
        .unwrap();
        assert!(sq.max_rel_error < 1e-8, "{sq:?}");
    }

    #[test]
    fn finite_diff_reports_non_finite_parameter() {
        let p = t(&[2], &[1.0, 1e-6]);
        let err = finite_diff_check(
            |tape, v| {
                let x = tape.value(v[0]).clone();
                let out = Tensor::scalar(x.data().iter().map(|v| v.ln()).sum());
                Ok(tape.push_op(out, &[v[0]], move |g| {
                    vec![x.data().iter().map(|v| g[0] / v).collect()]
                }))
            },
            &[p],
            1e-5,
        )
        .unwrap_err();
        assert!(err.to_string().contains("parameter 0 element 1"), "{err}");
    }
}
