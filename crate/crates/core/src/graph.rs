//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and whatever the
//! backward rule needs. Nodes are only ever appended, so the tape is in
//! topological order by construction and the backward pass is a single
//! reverse sweep.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::ops::conv::{self, Conv2dSpec};
use crate::ops::norm::{self, BnSaved, BnState, Mode};
use crate::ops::{activation, linalg, loss, resize, shape};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved<T>,
    },
    Sigmoid(Var),
    Relu(Var),
    Resize(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Add(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Sum(Var),
    /// Scalar function of `x` whose gradient was computed in the forward pass.
    ScalarLoss(Var, Tensor<T>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of one backward pass with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when the value does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Which side of zero every ReLU input lies on, in tape order. Two
    /// evaluations with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.value(x).data().iter().map(|&v| v > T::zero())),
                _ => None,
            })
            .flatten()
            .collect()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A constant or an input whose gradient is wanted.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node
    /// so the parameter receives one accumulated gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = linalg::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let out = conv::conv2d(self.value(x), self.value(w), bias.map(|b| self.value(b)), &spec)?;
        Ok(self.push(out, Op::Conv2d { x, w, bias, spec }))
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState<T>,
        mode: Mode,
    ) -> Result<Var> {
        let (out, saved) = norm::batch_norm(self.value(x), self.value(gamma), self.value(beta), state, mode)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            },
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = activation::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = activation::relu(self.value(x));
        self.push(out, Op::Relu(x))
    }

    /// Bilinear resize to an arbitrary spatial size.
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = resize::resize_bilinear(self.value(x), out_h, out_w)?;
        Ok(self.push(out, Op::Resize(x)))
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = resize::upsample(self.value(x), factor)?;
        Ok(self.push(out, Op::Resize(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = shape::permute(self.value(x), perm)?;
        Ok(self.push(out, Op::Permute(x, perm.to_vec())))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = shape::concat(&values, axis)?;
        Ok(self.push(out, Op::Concat(xs.to_vec(), axis)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= bv;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `scale·x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Var {
        self.affine(x, scale, T::zero())
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    /// Records a scalar function of `x` given its value and gradient.
    pub fn scalar_loss(&mut self, x: Var, value: T, grad: Tensor<T>) -> Result<Var> {
        if grad.shape() != self.shape(x) {
            return Err(Error::shape("scalar loss gradient", self.shape(x), grad.shape()));
        }
        Ok(self.push(Tensor::scalar(value), Op::ScalarLoss(x, grad)))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[LabelMap]) -> Result<Var> {
        let (value, grad) = loss::softmax_cross_entropy(self.value(logits), labels)?;
        self.scalar_loss(logits, value, grad)
    }

    /// Propagates d`loss` back through the tape, adds the result into the
    /// gradients of every parameter reached and returns all node gradients.
    ///
    /// Parameter gradients accumulate: two calls without zeroing in between
    /// double them.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut acc = |v: Var, d: Tensor<T>| -> Result<()> {
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&d),
                    slot @ None => {
                        *slot = Some(d);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => store.get_mut(*id).grad.add_assign(&g)?,
                Op::MatMul(a, b) => {
                    let (da, db) = linalg::matmul_backward(self.value(*a), self.value(*b), &g)?;
                    acc(*a, da)?;
                    acc(*b, db)?;
                }
                Op::Conv2d { x, w, bias, spec } => {
                    let gr = conv::conv2d_backward(self.value(*x), self.value(*w), &g, spec)?;
                    acc(*x, gr.input)?;
                    acc(*w, gr.weight)?;
                    if let Some(b) = bias {
                        acc(*b, gr.bias)?;
                    }
                }
                Op::BatchNorm { x, gamma, beta, saved } => {
                    let (dx, dg, db) = norm::batch_norm_backward(self.value(*gamma), saved, &g)?;
                    acc(*x, dx)?;
                    acc(*gamma, dg)?;
                    acc(*beta, db)?;
                }
                Op::Sigmoid(x) => acc(*x, activation::sigmoid_backward(&node.value, &g))?,
                Op::Relu(x) => acc(*x, activation::relu_backward(self.value(*x), &g))?,
                Op::Resize(x) => acc(*x, resize::resize_bilinear_backward(self.shape(*x), &g)?)?,
                Op::Reshape(x) => acc(*x, g.clone().reshape(self.shape(*x))?)?,
                Op::Permute(x, perm) => {
                    acc(*x, shape::permute(&g, &shape::inverse_permutation(perm))?)?
                }
                Op::Concat(xs, axis) => {
                    let sizes: Vec<usize> = xs.iter().map(|&v| self.shape(v)[*axis]).collect();
                    for (v, part) in xs.iter().zip(shape::split(&g, *axis, &sizes)?) {
                        acc(*v, part)?;
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone())?;
                    acc(*b, g.clone())?;
                }
                Op::Mul(a, b) => {
                    let mut da = g.clone();
                    for (d, &bv) in da.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *d *= bv;
                    }
                    let mut db = g.clone();
                    for (d, &av) in db.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *d *= av;
                    }
                    acc(*a, da)?;
                    acc(*b, db)?;
                }
                Op::Affine(x, scale) => acc(*x, g.map(|v| v * *scale))?,
                Op::Sum(x) => acc(*x, Tensor::full(self.shape(*x), g.data()[0]))?,
                Op::ScalarLoss(x, local) => {
                    let s = g.data()[0];
                    acc(*x, local.map(|v| v * s))?;
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}
