//! Reverse-mode differentiation over a per-sample tape.
//!
//! Every forward pass records its nodes into a [`Graph`]; [`Graph::backward`]
//! walks the tape in reverse and returns gradients for every node that
//! depends on a differentiable leaf. Constants (inputs, detached maps, frozen
//! weights) never receive gradients, which is how phase isolation is
//! enforced.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeom};
use crate::scalar::Real;
use crate::tensor::{Shape, Tensor};
use crate::tiling::PixelRect;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which parameter set a weight belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Owner {
    Global,
    Local,
    Aggregation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub owner: Owner,
    pub index: usize,
}

enum Op<T> {
    Leaf,
    Param(ParamKey),
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom },
    Relu(Var),
    Add(Var, Var),
    Concat(Var, Var),
    Resize(Var),
    Crop(Var, PixelRect),
    /// Scalar with precomputed partial derivatives towards each input.
    Scalar(Vec<(Var, Tensor<T>)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
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

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn take_value(self, v: Var) -> Tensor<T> {
        let mut nodes = self.nodes;
        core::mem::replace(&mut nodes[v.0].value, Tensor::zeros(Shape::new(0, 0, 0)))
    }

    /// A constant: never differentiated.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable free variable (used by gradient checks).
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A weight; differentiable only when `trainable`.
    pub fn param(&mut self, t: &Tensor<T>, key: ParamKey, trainable: bool) -> Var {
        if trainable {
            self.push(t.clone(), Op::Param(key), true)
        } else {
            self.push(t.clone(), Op::Leaf, false)
        }
    }

    /// A constant copy of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), self.value(b), geom)?;
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        Ok(self.push(y, Op::Conv { x, w, b, geom }, tracked))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        let tracked = self.tracked(x);
        self.push(y, Op::Relu(x), tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(alloc::format!(
                "add of {} and {}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(y, Op::Add(a, b), tracked))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).concat_channels(self.value(b))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(y, Op::Concat(a, b), tracked))
    }

    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        if self.shape(x).h == h && self.shape(x).w == w {
            return Ok(x);
        }
        let y = ops::resize_bilinear(self.value(x), h, w)?;
        let tracked = self.tracked(x);
        Ok(self.push(y, Op::Resize(x), tracked))
    }

    pub fn crop(&mut self, x: Var, rect: PixelRect) -> Result<Var> {
        let s = self.shape(x);
        if rect.top == 0 && rect.left == 0 && rect.height == s.h && rect.width == s.w {
            return Ok(x);
        }
        let y = self.value(x).crop(rect)?;
        let tracked = self.tracked(x);
        Ok(self.push(y, Op::Crop(x, rect), tracked))
    }

    /// Records a scalar computed outside the graph together with its partial
    /// derivatives towards `inputs`.
    pub fn scalar(&mut self, value: T, partials: Vec<(Var, Tensor<T>)>) -> Var {
        let tracked = partials.iter().any(|(v, _)| self.tracked(*v));
        self.push(Tensor::scalar(value), Op::Scalar(partials), tracked)
    }

    /// `Σ weight_i · term_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let value = terms.iter().map(|&(v, w)| self.value(v).item() * w).sum();
        let partials = terms
            .iter()
            .map(|&(v, w)| (v, Tensor::scalar(w)))
            .collect();
        self.scalar(value, partials)
    }

    /// Gradients of the scalar `root` towards every tracked node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.tracked(root) {
            grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let g = match &node.op {
                Op::Leaf | Op::Param(_) => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            match &node.op {
                Op::Leaf | Op::Param(_) => unreachable!(),
                Op::Conv { x, w, b, geom } => {
                    let need_dx = self.tracked(*x);
                    let cg = ops::conv2d_backward(self.value(*x), self.value(*w), &g, *geom, need_dx);
                    if let Some(dx) = cg.dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.tracked(*w) {
                        accumulate(&mut grads, *w, cg.dw);
                    }
                    if self.tracked(*b) {
                        let db = Tensor::from_vec(self.shape(*b), cg.db.into_vec())
                            .expect("bias gradient has bias length");
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Relu(x) => {
                    let dx = ops::relu_backward(&node.value, &g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    if self.tracked(*a) && self.tracked(*b) {
                        accumulate(&mut grads, *a, g.clone());
                        accumulate(&mut grads, *b, g);
                    } else if self.tracked(*a) {
                        accumulate(&mut grads, *a, g);
                    } else {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Concat(a, b) => {
                    let sa = self.shape(*a);
                    let split = sa.len();
                    let data = g.into_vec();
                    if self.tracked(*a) {
                        let ga = Tensor::from_vec(sa, data[..split].to_vec()).expect("split shape");
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.tracked(*b) {
                        let gb = Tensor::from_vec(self.shape(*b), data[split..].to_vec())
                            .expect("split shape");
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Resize(x) => {
                    let s = self.shape(*x);
                    accumulate(&mut grads, *x, ops::resize_bilinear_backward(&g, s.h, s.w));
                }
                Op::Crop(x, rect) => {
                    let mut dx = Tensor::zeros(self.shape(*x));
                    dx.paste_add(&g, *rect).expect("crop rect was validated in forward");
                    accumulate(&mut grads, *x, dx);
                }
                Op::Scalar(partials) => {
                    let up = g.item();
                    for (v, p) in partials {
                        if self.tracked(*v) {
                            let mut d = p.clone();
                            d.scale(up);
                            accumulate(&mut grads, *v, d);
                        }
                    }
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(k) => Some((k, Var(i))),
                _ => None,
            })
            .collect();
        Gradients { grads, params }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamKey, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient towards a leaf; `None` when the leaf does not influence the
    /// root or is not differentiable.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Every parameter node with its gradient (zero when unreached).
    pub fn params(&self) -> impl Iterator<Item = (ParamKey, Option<&Tensor<T>>)> + '_ {
        self.params.iter().map(|&(k, v)| (k, self.grads[v.0].as_ref()))
    }
}

/// Per-owner gradient buffers shaped like the corresponding parameter sets.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> GradSet<T> {
    pub fn zeros_like(params: &[Tensor<T>]) -> Self {
        GradSet {
            tensors: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn add(&mut self, other: &GradSet<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            t.scale(s);
        }
    }

    pub fn norm(&self) -> T {
        self.tensors.iter().map(|t| t.sum_sq()).sum::<T>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|v| *v == T::zero()))
    }
}
