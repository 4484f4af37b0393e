//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records primitive operations in execution order; every node
//! keeps its forward value, which the adjoints reuse. [`backward`] walks the
//! tape in reverse from a scalar node and accumulates gradients.
//!
//! Matrices are `[rows, cols]` (channels × frames), convolution kernels
//! `[out, in, taps]`, biases `[out]`, scalars `[]`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward needs a scalar loss node, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, AutodiffError> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![values.len()],
            });
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            values: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize), AutodiffError> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(AutodiffError::InvalidArgument {
                op,
                reason: format!("expected a matrix, got shape {:?}", self.shape),
            }),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        dilation: usize,
    },
    Pointwise {
        x: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Add(Var, Var),
    Relu(Var),
    SoftmaxColumns(Var),
    Sigmoid(Var),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Scale(Var, f64),
    Sum(Var),
    /// Scalar whose gradient with respect to `x` was computed outside the
    /// tape.
    External {
        x: Var,
        grad: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Sign of every ReLU input on the tape; two points with equal patterns
    /// lie on the same smooth piece of the recorded function.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(&self.nodes[x.0].value.values),
                _ => None,
            })
            .flat_map(|v| v.iter().map(|&z| z > 0.0))
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    /// Dilated 1-D convolution with zero "same" padding: `x` is `[in, T]`,
    /// `kernel` is `[out, in, K]` with odd `K`, output `[out, T]`.
    pub fn conv1d_dilated(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        dilation: usize,
    ) -> Result<Var, AutodiffError> {
        const OP: &str = "conv1d_dilated";
        if dilation == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: OP,
                reason: "dilation must be >= 1".into(),
            });
        }
        let xt = self.value(x);
        let (cin, t_len) = xt.dims2(OP)?;
        let kt = self.value(kernel);
        let [cout, kin, taps] = kt.shape[..] else {
            return Err(AutodiffError::InvalidArgument {
                op: OP,
                reason: format!("kernel must be [out, in, taps], got {:?}", kt.shape),
            });
        };
        if kin != cin {
            return Err(AutodiffError::ShapeMismatch {
                op: OP,
                lhs: xt.shape.clone(),
                rhs: kt.shape.clone(),
            });
        }
        if taps % 2 == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: OP,
                reason: format!("kernel width {taps} must be odd"),
            });
        }
        check_bias(self, bias, cout, OP)?;
        let mut out = vec![0.0; cout * t_len];
        if let Some(b) = bias {
            fill_bias(&mut out, &self.value(b).values, t_len);
        }
        let xv = &xt.values;
        let kv = &kt.values;
        for o in 0..cout {
            let y = &mut out[o * t_len..(o + 1) * t_len];
            for i in 0..cin {
                let xr = &xv[i * t_len..(i + 1) * t_len];
                for k in 0..taps {
                    let w = kv[(o * cin + i) * taps + k];
                    let off = tap_offset(k, taps, dilation);
                    if let Some((lo, hi)) = valid_range(off, t_len) {
                        axpy(w, &xr[shift(lo, off)..shift(hi, off)], &mut y[lo..hi]);
                    }
                }
            }
        }
        let value = Tensor {
            shape: vec![cout, t_len],
            values: out,
        };
        Ok(self.push(
            Op::Conv1d {
                x,
                kernel,
                bias,
                dilation,
            },
            value,
        ))
    }

    /// `weight · x + bias` per frame: `x` is `[in, T]`, `weight` `[out, in]`.
    pub fn pointwise_conv(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
    ) -> Result<Var, AutodiffError> {
        const OP: &str = "pointwise_conv";
        let (cin, t_len) = self.value(x).dims2(OP)?;
        let (cout, win) = self.value(weight).dims2(OP)?;
        if win != cin {
            return Err(AutodiffError::ShapeMismatch {
                op: OP,
                lhs: self.value(x).shape.clone(),
                rhs: self.value(weight).shape.clone(),
            });
        }
        check_bias(self, bias, cout, OP)?;
        let mut out = vec![0.0; cout * t_len];
        if let Some(b) = bias {
            fill_bias(&mut out, &self.value(b).values, t_len);
        }
        let xv = &self.value(x).values;
        let wv = &self.value(weight).values;
        for o in 0..cout {
            let y = &mut out[o * t_len..(o + 1) * t_len];
            for i in 0..cin {
                axpy(wv[o * cin + i], &xv[i * t_len..(i + 1) * t_len], y);
            }
        }
        let value = Tensor {
            shape: vec![cout, t_len],
            values: out,
        };
        Ok(self.push(Op::Pointwise { x, weight, bias }, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(AutodiffError::ShapeMismatch {
                op: "add",
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let values = av
            .values
            .iter()
            .zip(&bv.values)
            .map(|(x, y)| x + y)
            .collect();
        let shape = av.shape.clone();
        Ok(self.push(Op::Add(a, b), Tensor { shape, values }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let values = t
            .values
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let shape = t.shape.clone();
        self.push(Op::Relu(x), Tensor { shape, values })
    }

    /// Softmax down each column of a `[rows, cols]` matrix.
    pub fn softmax_columns(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        let (rows, cols) = t.dims2("softmax_columns")?;
        let mut out = vec![0.0; rows * cols];
        for c in 0..cols {
            let max = (0..rows)
                .map(|r| t.values[r * cols + c])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for r in 0..rows {
                let e = (t.values[r * cols + c] - max).exp();
                out[r * cols + c] = e;
                z += e;
            }
            for r in 0..rows {
                out[r * cols + c] /= z;
            }
        }
        let shape = t.shape.clone();
        Ok(self.push(Op::SoftmaxColumns(x), Tensor { shape, values: out }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let values = t
            .values
            .iter()
            .map(|&v| crate::sequence::sigmoid(v))
            .collect();
        let shape = t.shape.clone();
        self.push(Op::Sigmoid(x), Tensor { shape, values })
    }

    /// Selects rows of a matrix, in the given order.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        let (nrows, cols) = t.dims2("gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= nrows) {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_rows",
                reason: format!("row {bad} out of range for {nrows} rows"),
            });
        }
        let mut values = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            values.extend_from_slice(&t.values[r * cols..(r + 1) * cols]);
        }
        Ok(self.push(
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            Tensor {
                shape: vec![rows.len(), cols],
                values,
            },
        ))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let t = self.value(x);
        let values = t.values.iter().map(|v| v * k).collect();
        let shape = t.shape.clone();
        self.push(Op::Scale(x, k), Tensor { shape, values })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).values.iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// Records a scalar `value` computed outside the tape from `x`, together
    /// with its gradient with respect to `x`.
    pub fn external_loss(
        &mut self,
        x: Var,
        value: f64,
        grad: Vec<f64>,
    ) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        if grad.len() != t.values.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "external_loss",
                lhs: t.shape.clone(),
                rhs: vec![grad.len()],
            });
        }
        Ok(self.push(Op::External { x, grad }, Tensor::scalar(value)))
    }
}

fn check_bias(
    tape: &Tape,
    bias: Option<Var>,
    cout: usize,
    op: &'static str,
) -> Result<(), AutodiffError> {
    if let Some(b) = bias {
        let shape = &tape.value(b).shape;
        if shape[..] != [cout] {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: vec![cout],
                rhs: shape.clone(),
            });
        }
    }
    Ok(())
}

fn fill_bias(out: &mut [f64], bias: &[f64], t_len: usize) {
    for (row, &b) in out.chunks_exact_mut(t_len).zip(bias) {
        row.fill(b);
    }
}

/// Input offset of tap `k` relative to the output frame.
#[inline]
fn tap_offset(k: usize, taps: usize, dilation: usize) -> isize {
    (k as isize - (taps / 2) as isize) * dilation as isize
}

/// Output frames `t` for which `t + off` is inside `[0, t_len)`.
#[inline]
fn valid_range(off: isize, t_len: usize) -> Option<(usize, usize)> {
    let lo = (-off).max(0) as usize;
    let hi = (t_len as isize - off).min(t_len as isize);
    (hi > lo as isize).then_some((lo, hi as usize))
}

#[inline]
fn shift(t: usize, off: isize) -> usize {
    (t as isize + off) as usize
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Per-node gradients after a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v`; zeros when unreachable.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.shapes[v.0].iter().product()])
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

/// Reverse pass from the scalar node `loss`.
pub fn backward(tape: &Tape, loss: Var) -> Result<Gradients, AutodiffError> {
    let lv = tape.value(loss);
    if lv.values.len() != 1 || !lv.shape.is_empty() {
        return Err(AutodiffError::NotScalarLoss(lv.shape.clone()));
    }
    let n = tape.nodes.len();
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
    grads[loss.0] = Some(vec![1.0]);
    for idx in (0..=loss.0).rev() {
        let Some(g) = grads[idx].take() else { continue };
        let node = &tape.nodes[idx];
        let len_of = |v: Var| tape.nodes[v.0].value.values.len();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    axpy(1.0, &g, accumulate(&mut grads[v.0], len_of(v)));
                }
            }
            Op::Relu(x) => {
                let dst = accumulate(&mut grads[x.0], len_of(*x));
                for ((d, gi), y) in dst.iter_mut().zip(&g).zip(&node.value.values) {
                    if *y > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let dst = accumulate(&mut grads[x.0], len_of(*x));
                for ((d, gi), y) in dst.iter_mut().zip(&g).zip(&node.value.values) {
                    *d += gi * y * (1.0 - y);
                }
            }
            Op::SoftmaxColumns(x) => {
                let [rows, cols] = node.value.shape[..] else {
                    unreachable!()
                };
                let y = &node.value.values;
                let dst = accumulate(&mut grads[x.0], len_of(*x));
                for c in 0..cols {
                    let inner: f64 = (0..rows).map(|r| g[r * cols + c] * y[r * cols + c]).sum();
                    for r in 0..rows {
                        dst[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - inner);
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let cols = node.value.shape[1];
                let dst = accumulate(&mut grads[x.0], len_of(*x));
                for (j, &r) in rows.iter().enumerate() {
                    axpy(
                        1.0,
                        &g[j * cols..(j + 1) * cols],
                        &mut dst[r * cols..(r + 1) * cols],
                    );
                }
            }
            Op::Scale(x, k) => axpy(*k, &g, accumulate(&mut grads[x.0], len_of(*x))),
            Op::Sum(x) => {
                let dst = accumulate(&mut grads[x.0], len_of(*x));
                dst.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::External { x, grad } => axpy(g[0], grad, accumulate(&mut grads[x.0], len_of(*x))),
            Op::Pointwise { x, weight, bias } => {
                let (cout, t_len) = (node.value.shape[0], node.value.shape[1]);
                let xv = &tape.nodes[x.0].value.values;
                let wv = &tape.nodes[weight.0].value.values;
                let cin = xv.len() / t_len;
                if let Some(b) = bias {
                    let db = accumulate(&mut grads[b.0], cout);
                    for o in 0..cout {
                        db[o] += g[o * t_len..(o + 1) * t_len].iter().sum::<f64>();
                    }
                }
                {
                    let dw = accumulate(&mut grads[weight.0], cout * cin);
                    for o in 0..cout {
                        let go = &g[o * t_len..(o + 1) * t_len];
                        for i in 0..cin {
                            dw[o * cin + i] += dot(go, &xv[i * t_len..(i + 1) * t_len]);
                        }
                    }
                }
                let dx = accumulate(&mut grads[x.0], cin * t_len);
                for o in 0..cout {
                    let go = &g[o * t_len..(o + 1) * t_len];
                    for i in 0..cin {
                        axpy(wv[o * cin + i], go, &mut dx[i * t_len..(i + 1) * t_len]);
                    }
                }
            }
            Op::Conv1d {
                x,
                kernel,
                bias,
                dilation,
            } => {
                let (cout, t_len) = (node.value.shape[0], node.value.shape[1]);
                let kshape = &tape.nodes[kernel.0].value.shape;
                let (cin, taps) = (kshape[1], kshape[2]);
                let xv = &tape.nodes[x.0].value.values;
                let kv = &tape.nodes[kernel.0].value.values;
                if let Some(b) = bias {
                    let db = accumulate(&mut grads[b.0], cout);
                    for o in 0..cout {
                        db[o] += g[o * t_len..(o + 1) * t_len].iter().sum::<f64>();
                    }
                }
                {
                    let dk = accumulate(&mut grads[kernel.0], kv.len());
                    for o in 0..cout {
                        let go = &g[o * t_len..(o + 1) * t_len];
                        for i in 0..cin {
                            let xr = &xv[i * t_len..(i + 1) * t_len];
                            for k in 0..taps {
                                let off = tap_offset(k, taps, *dilation);
                                if let Some((lo, hi)) = valid_range(off, t_len) {
                                    dk[(o * cin + i) * taps + k] +=
                                        dot(&go[lo..hi], &xr[shift(lo, off)..shift(hi, off)]);
                                }
                            }
                        }
                    }
                }
                let dx = accumulate(&mut grads[x.0], cin * t_len);
                for o in 0..cout {
                    let go = &g[o * t_len..(o + 1) * t_len];
                    for i in 0..cin {
                        let dxr = &mut dx[i * t_len..(i + 1) * t_len];
                        for k in 0..taps {
                            let off = tap_offset(k, taps, *dilation);
                            if let Some((lo, hi)) = valid_range(off, t_len) {
                                axpy(
                                    kv[(o * cin + i) * taps + k],
                                    &go[lo..hi],
                                    &mut dxr[shift(lo, off)..shift(hi, off)],
                                );
                            }
                        }
                    }
                }
            }
        }
        grads[idx] = Some(g);
    }
    let shapes = tape.nodes.iter().map(|n| n.value.shape.clone()).collect();
    Ok(Gradients { grads, shapes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::GradCheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_tensor(&mut rng, vec![3, 11]);
        for dilation in [1, 2, 4, 16] {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let mut k = vec![0.0; 3 * 3 * 3];
            for c in 0..3 {
                k[(c * 3 + c) * 3 + 1] = 1.0;
            }
            let kv = tape.leaf(Tensor::new(vec![3, 3, 3], k).unwrap());
            let y = tape.conv1d_dilated(xv, kv, None, dilation).unwrap();
            assert_eq!(tape.value(y), &x);
        }
    }

    #[test]
    fn conv_preserves_length_for_all_dilations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t_len in [1, 2, 5, 40] {
            for dilation in [1, 3, 8, 64] {
                let mut tape = Tape::new();
                let x = tape.leaf(rand_tensor(&mut rng, vec![2, t_len]));
                let k = tape.leaf(rand_tensor(&mut rng, vec![4, 2, 3]));
                let y = tape.conv1d_dilated(x, k, None, dilation).unwrap();
                assert_eq!(tape.value(y).shape(), &[4, t_len]);
            }
        }
    }

    #[test]
    fn relu_and_softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).values(), &[0.0, 0.0, 2.0]);
        let z = tape.leaf(Tensor::zeros(vec![4, 2]));
        let s = tape.softmax_columns(z).unwrap();
        assert!(tape.value(s).values().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn sum_and_relu_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3, 1], vec![1.0, -2.0, 3.0]).unwrap());
        let s = tape.sum(x);
        assert_eq!(backward(&tape, s).unwrap().wrt(x), vec![1.0; 3]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let r = tape.relu(x);
        let s = tape.sum(r);
        assert_eq!(backward(&tape, s).unwrap().wrt(x), vec![0.0, 1.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let unused = tape.leaf(Tensor::zeros(vec![3]));
        let s = tape.sum(x);
        let g = backward(&tape, s).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused), vec![0.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2]));
        assert_eq!(
            backward(&tape, x).unwrap_err(),
            AutodiffError::NotScalarLoss(vec![2, 2])
        );
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 5]));
        let k = tape.leaf(Tensor::zeros(vec![3, 4, 3]));
        assert!(matches!(
            tape.conv1d_dilated(x, k, None, 1),
            Err(AutodiffError::ShapeMismatch { .. })
        ));
        let w = tape.leaf(Tensor::zeros(vec![3, 3]));
        assert!(matches!(
            tape.pointwise_conv(x, w, None),
            Err(AutodiffError::ShapeMismatch { .. })
        ));
        let y = tape.leaf(Tensor::zeros(vec![5, 2]));
        assert!(matches!(
            tape.add(x, y),
            Err(AutodiffError::ShapeMismatch { .. })
        ));
        let even = tape.leaf(Tensor::zeros(vec![3, 2, 2]));
        assert!(tape.conv1d_dilated(x, even, None, 1).is_err());
    }

    /// Builds `Σ w ⊙ op(inputs)` with fixed random `w` and checks every
    /// input's gradient against central differences.
    fn check_op<F>(shapes: &[Vec<usize>], seed: u64, build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| rand_tensor(&mut rng, s.clone()))
            .collect();
        let eval =
            |inputs: &[Tensor], weights: Option<&[f64]>| -> (f64, Tape, Vec<Var>, Var, Vec<f64>) {
                let mut tape = Tape::new();
                let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
                let out = build(&mut tape, &vars);
                let n = tape.value(out).values().len();
                let w: Vec<f64> = match weights {
                    Some(w) => w.to_vec(),
                    None => {
                        let mut r = ChaCha8Rng::seed_from_u64(seed + 1000);
                        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
                    }
                };
                let value: f64 = tape
                    .value(out)
                    .values()
                    .iter()
                    .zip(&w)
                    .map(|(a, b)| a * b)
                    .sum();
                let loss = tape.external_loss(out, value, w.clone()).unwrap();
                (value, tape, vars, loss, w)
            };
        let (_, tape, vars, loss, w) = eval(&inputs, None);
        let grads = backward(&tape, loss).unwrap();
        for (j, v) in vars.iter().enumerate() {
            let analytic = grads.wrt(*v);
            let check = GradCheck {
                h: 1e-5,
                tolerance: 1e-5,
                coordinates: 500,
                seed,
            };
            check
                .check(inputs[j].values(), &analytic, |x| {
                    let mut perturbed = inputs.clone();
                    perturbed[j] = Tensor::new(inputs[j].shape().to_vec(), x.to_vec()).unwrap();
                    eval(&perturbed, Some(&w)).0
                })
                .unwrap_or_else(|e| panic!("input {j}: {e}"));
        }
    }

    #[test]
    fn conv1d_adjoint() {
        for (seed, dilation) in [(1, 1), (2, 2), (3, 4), (4, 16)] {
            check_op(&[vec![3, 13], vec![4, 3, 3], vec![4]], seed, |t, v| {
                t.conv1d_dilated(v[0], v[1], Some(v[2]), dilation).unwrap()
            });
        }
        check_op(&[vec![2, 9], vec![2, 2, 5]], 5, |t, v| {
            t.conv1d_dilated(v[0], v[1], None, 2).unwrap()
        });
    }

    #[test]
    fn pointwise_adjoint() {
        check_op(&[vec![3, 10], vec![5, 3], vec![5]], 6, |t, v| {
            t.pointwise_conv(v[0], v[1], Some(v[2])).unwrap()
        });
    }

    #[test]
    fn elementwise_adjoints() {
        check_op(&[vec![4, 6], vec![4, 6]], 7, |t, v| {
            t.add(v[0], v[1]).unwrap()
        });
        check_op(&[vec![4, 6]], 8, |t, v| t.relu(v[0]));
        check_op(&[vec![4, 6]], 9, |t, v| t.sigmoid(v[0]));
        check_op(&[vec![4, 6]], 10, |t, v| t.scale(v[0], -2.5));
        check_op(&[vec![4, 6]], 11, |t, v| t.sum(v[0]));
    }

    #[test]
    fn column_adjoints() {
        check_op(&[vec![5, 7]], 12, |t, v| t.softmax_columns(v[0]).unwrap());
        check_op(&[vec![5, 7]], 13, |t, v| {
            t.gather_rows(v[0], &[4, 0, 2]).unwrap()
        });
    }

    #[test]
    fn backward_is_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut tape = Tape::new();
            let x = tape.leaf(rand_tensor(&mut rng, vec![3, 20]));
            let k = tape.leaf(rand_tensor(&mut rng, vec![3, 3, 3]));
            let h = tape.conv1d_dilated(x, k, None, 2).unwrap();
            let r = tape.relu(h);
            let s = tape.softmax_columns(r).unwrap();
            let loss = tape.sum(s);
            let g = backward(&tape, loss).unwrap();
            (g.wrt(x), g.wrt(k))
        };
        let (a, b) = (build(), build());
        assert_eq!(
            a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(a.1, b.1);
    }
}
