//! Reverse-mode autodiff over a linear tape of recorded operations.

use super::conv::{conv2d_backward, conv2d_forward, deconv2d_backward, deconv2d_forward};
use super::{check_same_shape, relu_backward, relu_forward, ParamSet, Result, Scalar, Tensor4, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Leaf,
    Param(usize),
    Conv {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Deconv {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Add(Var, Var),
    Sum(Var),
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor4<T>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so that [`Tape::backward`] can replay it.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor4<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that never receives a gradient (inputs, targets).
    pub fn constant(&mut self, t: Tensor4<T>) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A free variable whose gradient is returned by [`Tape::backward`].
    pub fn leaf(&mut self, t: Tensor4<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Reads a named parameter; its gradient is accumulated into the set.
    pub fn param(&mut self, params: &ParamSet<T>, name: &str) -> Result<Var> {
        let idx = params
            .index_of(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        Ok(self.push(params.entry(idx).weights.clone(), Op::Param(idx), true))
    }

    fn bias_slice(&self, bias: Option<Var>) -> Option<&[T]> {
        bias.map(|b| self.nodes[b.0].value.data())
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = conv2d_forward(
            self.value(input),
            self.value(kernel),
            self.bias_slice(bias),
            stride,
            pad,
        )?;
        let needs = self.needs(input) || self.needs(kernel) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            out,
            Op::Conv {
                input,
                kernel,
                bias,
                stride,
                pad,
            },
            needs,
        ))
    }

    pub fn deconv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = deconv2d_forward(
            self.value(input),
            self.value(kernel),
            self.bias_slice(bias),
            stride,
            pad,
        )?;
        let needs = self.needs(input) || self.needs(kernel) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            out,
            Op::Deconv {
                input,
                kernel,
                bias,
                stride,
                pad,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = relu_forward(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same_shape("add", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor4::from_raw(va.shape(), data);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor4::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(out, Op::Sum(x), needs)
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let l = super::mse_loss(self.value(pred), self.value(target))?;
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(Tensor4::scalar(l), Op::Mse(pred, target), needs))
    }

    /// Drops every recorded node.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Back-propagates from a scalar `loss`.
    ///
    /// Parameter gradients are accumulated into `params`; gradients of
    /// [`Tape::leaf`] variables are returned as `(var, grad)` pairs. The tape
    /// is cleared afterwards whether or not the pass succeeds.
    pub fn backward(&mut self, loss: Var, params: &mut ParamSet<T>) -> Result<Vec<(Var, Tensor4<T>)>> {
        let res = self.backward_inner(loss, params);
        self.nodes.clear();
        res
    }

    fn backward_inner(&mut self, loss: Var, params: &mut ParamSet<T>) -> Result<Vec<(Var, Tensor4<T>)>> {
        if self.nodes.is_empty() {
            return Err(TensorError::State("backward called before any forward pass".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::State(format!("unknown loss node {}", loss.0)));
        }
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(TensorError::State(format!(
                "loss must be scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.value.all_finite() {
            return Err(TensorError::State("loss is not finite".into()));
        }

        let mut grads: Vec<Option<Tensor4<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor4::scalar(T::one()));
        let mut leaves = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            match self.nodes[i].op.clone() {
                Op::Constant => {}
                Op::Leaf => leaves.push((Var(i), g)),
                Op::Param(idx) => {
                    let entry = params.entry_mut(idx);
                    if entry.grad.shape() != g.shape() {
                        return Err(TensorError::Dimension {
                            op: "backward(param)",
                            left: entry.grad.shape(),
                            right: g.shape(),
                        });
                    }
                    for (a, &b) in entry.grad.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                Op::Conv {
                    input,
                    kernel,
                    bias,
                    stride,
                    pad,
                } => {
                    let cg = conv2d_backward(
                        self.value(input),
                        self.value(kernel),
                        &g,
                        stride,
                        pad,
                        self.needs(input),
                    )?;
                    self.route_conv(&mut grads, input, kernel, bias, cg);
                }
                Op::Deconv {
                    input,
                    kernel,
                    bias,
                    stride,
                    pad,
                } => {
                    let cg = deconv2d_backward(
                        self.value(input),
                        self.value(kernel),
                        &g,
                        stride,
                        pad,
                        self.needs(input),
                    )?;
                    self.route_conv(&mut grads, input, kernel, bias, cg);
                }
                Op::Relu(x) => {
                    // output > 0 exactly where input > 0
                    let gx = relu_backward(&self.nodes[i].value, &g)?;
                    accumulate(&mut grads, x, gx);
                }
                Op::Add(a, b) => {
                    if self.needs(b) {
                        accumulate(&mut grads, b, g.clone());
                    }
                    accumulate(&mut grads, a, g);
                }
                Op::Sum(x) => {
                    let s = g.data()[0];
                    accumulate(&mut grads, x, Tensor4::filled(self.value(x).shape(), s));
                }
                Op::Mse(p, t) => {
                    let (vp, vt) = (self.value(p), self.value(t));
                    let scale = g.data()[0] * T::from_f64_lossy(2.0) / T::from_usize(vp.len()).unwrap();
                    let diff: Vec<T> = vp
                        .data()
                        .iter()
                        .zip(vt.data())
                        .map(|(&a, &b)| (a - b) * scale)
                        .collect();
                    if self.needs(t) {
                        let neg = diff.iter().map(|&d| -d).collect();
                        accumulate(&mut grads, t, Tensor4::from_raw(vt.shape(), neg));
                    }
                    accumulate(&mut grads, p, Tensor4::from_raw(vp.shape(), diff));
                }
            }
        }
        leaves.reverse();
        Ok(leaves)
    }

    fn route_conv(
        &self,
        grads: &mut [Option<Tensor4<T>>],
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        cg: super::ConvGrads<T>,
    ) {
        if self.needs(input) {
            accumulate(grads, input, cg.input);
        }
        if self.needs(kernel) {
            accumulate(grads, kernel, cg.kernel);
        }
        if let Some(b) = bias.filter(|&b| self.needs(b)) {
            let shape = self.value(b).shape();
            accumulate(grads, b, Tensor4::from_raw(shape, cg.bias));
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor4<T>>], v: Var, g: Tensor4<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
