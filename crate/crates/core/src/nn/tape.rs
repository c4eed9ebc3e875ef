//! Reverse-mode automatic differentiation over `f64` arrays.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Each recorded
//! node keeps its value and, when any input requires a gradient, a closure
//! that maps the output gradient onto the inputs. [`Tape::backward`] replays
//! the closures in reverse creation order.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use ndarray::{ArrayD, Axis, IxDyn, Slice};

use crate::error::{Error, Result};

pub type Array = ArrayD<f64>;

type BackwardFn = Box<dyn Fn(&Array, &mut GradSink<'_>)>;

struct Node {
    value: Arc<Array>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    no_grad: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradient accumulator handed to backward closures.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Array>],
    requires: &'a [bool],
}

impl GradSink<'_> {
    pub fn wants(&self, id: usize) -> bool {
        self.requires[id]
    }

    pub fn add(&mut self, id: usize, g: Array) {
        if !self.requires[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g.as_standard_layout().into_owned()),
        }
    }

    /// Like [`GradSink::add`] but only builds the gradient when it is needed.
    pub fn add_with(&mut self, id: usize, f: impl FnOnce() -> Array) {
        if self.requires[id] {
            self.add(id, f());
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Array> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape when it was not reached.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Array {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array::zeros(IxDyn(&v.shape())))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that never records backward closures (inference).
    pub fn inference() -> Self {
        let t = Self::default();
        t.no_grad.set(true);
        t
    }

    pub fn grad_enabled(&self) -> bool {
        !self.no_grad.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, value: Arc<Array>, requires_grad: bool, backward: Option<BackwardFn>) -> Var<'_> {
        let value = if value.is_standard_layout() {
            value
        } else {
            Arc::new(value.as_standard_layout().into_owned())
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            backward,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf whose gradient is tracked.
    pub fn leaf(&self, value: Array) -> Var<'_> {
        self.leaf_shared(Arc::new(value))
    }

    pub fn leaf_shared(&self, value: Arc<Array>) -> Var<'_> {
        let rg = self.grad_enabled();
        self.push_node(value, rg, None)
    }

    pub fn constant(&self, value: Array) -> Var<'_> {
        self.push_node(Arc::new(value), false, None)
    }

    pub fn constant_shared(&self, value: Arc<Array>) -> Var<'_> {
        self.push_node(value, false, None)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Array::from_elem(IxDyn(&[]), v))
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records an operation. `backward` receives the output gradient.
    pub(crate) fn op<'t>(
        &'t self,
        value: Array,
        parents: &[Var<'t>],
        backward: impl Fn(&Array, &mut GradSink<'_>) + 'static,
    ) -> Var<'t> {
        let rg = self.grad_enabled() && parents.iter().any(|p| self.requires(p.id));
        let bw: Option<BackwardFn> = if rg { Some(Box::new(backward)) } else { None };
        self.push_node(Arc::new(value), rg, bw)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let requires: Vec<bool> = nodes.iter().map(|n| n.requires_grad).collect();
        let mut grads: Vec<Option<Array>> = vec![None; nodes.len()];
        if !requires[loss.id] {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Array::ones(root.value.raw_dim()));
        for id in (0..=loss.id).rev() {
            let Some(bw) = &nodes[id].backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            {
                let mut sink = GradSink {
                    grads: &mut grads,
                    requires: &requires,
                };
                bw(&g, &mut sink);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn same_shape(a: &Var<'_>, b: &Var<'_>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Array> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    /// Scalar value (first element).
    pub fn item(&self) -> f64 {
        *self.value().iter().next().expect("non-empty value")
    }

    /// Stop-gradient: same value, no gradient flows back through it.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant_shared(self.value())
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        same_shape(self, &other, "add")?;
        let v = &*self.value() + &*other.value();
        let (a, b) = (self.id, other.id);
        Ok(self.tape.op(v, &[*self, other], move |g, s| {
            s.add_with(a, || g.clone());
            s.add_with(b, || g.clone());
        }))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        same_shape(self, &other, "sub")?;
        let v = &*self.value() - &*other.value();
        let (a, b) = (self.id, other.id);
        Ok(self.tape.op(v, &[*self, other], move |g, s| {
            s.add_with(a, || g.clone());
            s.add_with(b, || -g);
        }))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        same_shape(self, &other, "mul")?;
        let (x, y) = (self.value(), other.value());
        let v = &*x * &*y;
        let (a, b) = (self.id, other.id);
        Ok(self.tape.op(v, &[*self, other], move |g, s| {
            s.add_with(a, || g * &*y);
            s.add_with(b, || g * &*x);
        }))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.value().mapv(|x| x * c);
        let a = self.id;
        self.tape.op(v, &[*self], move |g, s| s.add_with(a, || g * c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let v = self.value().mapv(|x| x + c);
        let a = self.id;
        self.tape.op(v, &[*self], move |g, s| s.add_with(a, || g.clone()))
    }

    /// Multiplies by a scalar (0-d or single-element) variable.
    pub fn mul_scalar_var(&self, c: Var<'t>) -> Result<Var<'t>> {
        if c.value().len() != 1 {
            return Err(Error::shape("mul_scalar_var needs a scalar".to_string()));
        }
        let (x, cv) = (self.value(), c.item());
        let v = x.mapv(|e| e * cv);
        let (a, b) = (self.id, c.id);
        let cshape = c.shape();
        Ok(self.tape.op(v, &[*self, c], move |g, s| {
            s.add_with(a, || g * cv);
            s.add_with(b, || {
                let d: f64 = (g * &*x).sum();
                Array::from_elem(IxDyn(&cshape), d)
            });
        }))
    }

    pub fn square(&self) -> Var<'t> {
        let x = self.value();
        let v = x.mapv(|e| e * e);
        let a = self.id;
        self.tape.op(v, &[*self], move |g, s| {
            s.add_with(a, || g * &x.mapv(|e| 2.0 * e))
        })
    }

    /// Elementwise |x|; subgradient 0 at 0.
    pub fn abs(&self) -> Var<'t> {
        let x = self.value();
        let v = x.mapv(f64::abs);
        let a = self.id;
        self.tape.op(v, &[*self], move |g, s| {
            s.add_with(a, || {
                let mut d = g.clone();
                d.zip_mut_with(&x, |d, &e| *d *= if e > 0.0 { 1.0 } else if e < 0.0 { -1.0 } else { 0.0 });
                d
            })
        })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let y = Arc::new(self.value().mapv(sigmoid));
        let a = self.id;
        let yc = y.clone();
        self.tape.op((*y).clone(), &[*self], move |g, s| {
            s.add_with(a, || {
                let mut d = g.clone();
                d.zip_mut_with(&yc, |d, &y| *d *= y * (1.0 - y));
                d
            })
        })
    }

    pub fn gelu(&self) -> Var<'t> {
        let x = self.value();
        let v = x.mapv(gelu);
        let a = self.id;
        self.tape.op(v, &[*self], move |g, s| {
            s.add_with(a, || {
                let mut d = g.clone();
                d.zip_mut_with(&x, |d, &e| *d *= gelu_grad(e));
                d
            })
        })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        let x = self.value();
        let v = x.mapv(|e| if e >= 0.0 { e } else { slope * e });
        let a = self.id;
        self.tape.op(v, &[*self], move |g, s| {
            s.add_with(a, || {
                let mut d = g.clone();
                d.zip_mut_with(&x, |d, &e| {
                    if e < 0.0 {
                        *d *= slope
                    }
                });
                d
            })
        })
    }

    pub fn sum(&self) -> Var<'t> {
        let shape = self.shape();
        let v = Array::from_elem(IxDyn(&[]), self.value().sum());
        let a = self.id;
        self.tape.op(v, &[*self], move |g, s| {
            let gv = g.iter().next().copied().unwrap_or(0.0);
            s.add_with(a, || Array::from_elem(IxDyn(&shape), gv))
        })
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Adds `bias` (shape `[n]`) along the last axis.
    pub fn add_bias(&self, bias: Var<'t>) -> Result<Var<'t>> {
        let shape = self.shape();
        let n = *shape.last().ok_or_else(|| Error::shape("add_bias on a scalar"))?;
        if bias.shape() != [n] {
            return Err(Error::shape(format!(
                "add_bias: bias {:?} vs last dim {n}",
                bias.shape()
            )));
        }
        let b = bias.value();
        let mut v = (*self.value()).clone();
        for mut row in v.rows_mut() {
            row += &b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        }
        let (a, bi) = (self.id, bias.id);
        Ok(self.tape.op(v, &[*self, bias], move |g, s| {
            s.add_with(a, || g.clone());
            s.add_with(bi, || {
                let g2 = g.view().into_shape_with_order((g.len() / n, n)).unwrap();
                g2.sum_axis(Axis(0)).into_dyn()
            });
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let old = x.shape().to_vec();
        let v = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .map_err(|e| Error::shape(format!("reshape {old:?} -> {shape:?}: {e}")))?;
        let a = self.id;
        Ok(self.tape.op(v, &[*self], move |g, s| {
            s.add_with(a, || {
                g.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&old))
                    .unwrap()
            })
        }))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if axes.len() != x.ndim() {
            return Err(Error::shape(format!(
                "permute {axes:?} on rank {}",
                x.ndim()
            )));
        }
        let v = x
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inv = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inv[ax] = i;
        }
        let a = self.id;
        Ok(self.tape.op(v, &[*self], move |g, s| {
            s.add_with(a, || {
                g.view()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .into_owned()
            })
        }))
    }

    /// `[start, end)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.ndim() || start > end || end > x.shape()[axis] {
            return Err(Error::shape(format!(
                "slice {start}..{end} on axis {axis} of {:?}",
                x.shape()
            )));
        }
        let v = x
            .slice_axis(Axis(axis), Slice::from(start..end))
            .as_standard_layout()
            .into_owned();
        let shape = x.shape().to_vec();
        let a = self.id;
        Ok(self.tape.op(v, &[*self], move |g, s| {
            s.add_with(a, || {
                let mut d = Array::zeros(IxDyn(&shape));
                d.slice_axis_mut(Axis(axis), Slice::from(start..end)).assign(g);
                d
            })
        }))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let values: Vec<Arc<Array>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views)
            .map_err(|e| Error::shape(format!("concat: {e}")))?;
        let spans: Vec<(usize, usize, usize)> = {
            let mut off = 0;
            parts
                .iter()
                .zip(&values)
                .map(|(p, val)| {
                    let n = val.shape()[axis];
                    off += n;
                    (p.id, off - n, off)
                })
                .collect()
        };
        Ok(first.tape.op(v, parts, move |g, s| {
            for &(id, a, b) in &spans {
                s.add_with(id, || {
                    g.slice_axis(Axis(axis), Slice::from(a..b))
                        .as_standard_layout()
                        .into_owned()
                });
            }
        }))
    }

    pub fn stack(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::shape("stack of nothing"))?;
        let values: Vec<Arc<Array>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let v = ndarray::stack(Axis(axis), &views).map_err(|e| Error::shape(format!("stack: {e}")))?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.op(v, parts, move |g, s| {
            for (i, &id) in ids.iter().enumerate() {
                s.add_with(id, || g.index_axis(Axis(axis), i).as_standard_layout().into_owned());
            }
        }))
    }

    /// Sum of several same-shape variables.
    pub fn sum_all(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let mut it = parts.iter();
        let mut acc = *it.next().ok_or_else(|| Error::shape("sum of nothing"))?;
        for p in it {
            acc = acc.add(*p)?;
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn sum_of_squares_gradient_is_2x() {
        let tape = Tape::new();
        let x = tape.leaf(array![1.0, -2.0, 3.5].into_dyn());
        let loss = x.square().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &array![2.0, -4.0, 7.0].into_dyn());
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let tape = Tape::new();
        let x = tape.leaf(array![1.0, 2.0].into_dyn());
        let loss = x.detach().square().sum();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get_or_zeros(x), array![0.0, 0.0].into_dyn());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(array![1.0, 2.0].into_dyn());
        assert!(tape.backward(x.square()).is_err());
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        let tape = Tape::new();
        let x = tape.leaf(array![3.0].into_dyn());
        let y = x.mul(x).unwrap().add(x).unwrap().sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap()[[0]], 7.0);
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let tape = Tape::inference();
        let x = tape.leaf(array![1.0].into_dyn());
        let y = x.square().sum();
        assert!(!y.requires_grad());
        assert!(tape.backward(y).unwrap().get(x).is_none());
    }
}
