//! Reverse-mode differentiation over an append-only operation record.
//!
//! A [`Graph`] owns every intermediate value. Nodes only reference earlier
//! nodes, so the record is acyclic by construction and the backward sweep is
//! a single reverse pass over the node list.

use crate::error::{Error, Result};
use crate::tensor::{self, check_same_shape, nearest_index, sigmoid, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
}

/// BCE inputs are clamped into `[BCE_EPS, 1 - BCE_EPS]` before the log.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Elementwise(ElementwiseKind, Var, Var),
    Affine { x: Var, mul: f64 },
    Sigmoid(Var),
    Tanh(Var),
    Linear { x: Var, w: Var, b: Var },
    Concat(Var, Var),
    Resize(Var),
    AvgPool2(Var),
    Softmax(Var),
    WeightedSum { weights: Var, items: Vec<Var> },
    Sum(Var),
    Mean(Var),
    SquaredError { x: Var, target: Tensor },
    Bce { pred: Var, target: Tensor },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Trainable leaf.
    pub fn parameter(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let scalar_b = bv.is_scalar() && !av.is_scalar();
        if !scalar_b {
            check_same_shape(av, bv)?;
        }
        let f = match kind {
            ElementwiseKind::Add => |x: f64, y: f64| x + y,
            ElementwiseKind::Sub => |x: f64, y: f64| x - y,
            ElementwiseKind::Mul => |x: f64, y: f64| x * y,
        };
        let data = if scalar_b {
            let s = bv.item();
            av.data().iter().map(|&x| f(x, s)).collect()
        } else {
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        };
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Elementwise(kind, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Mul, a, b)
    }

    /// `mul * x + add` with constant coefficients.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let out = self.value(x).map(|v| mul * v + add);
        self.push(out, Op::Affine { x, mul }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = tensor::linear_map(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Concat(a, b), &[a, b]))
    }

    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (_, xh, xw) = self.value(x).chw()?;
        if (xh, xw) == (h, w) {
            return Ok(x);
        }
        let out = tensor::resize_nearest(self.value(x), h, w)?;
        Ok(self.push(out, Op::Resize(x), &[x]))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let out = tensor::avg_pool2(self.value(x))?;
        Ok(self.push(out, Op::AvgPool2(x), &[x]))
    }

    pub fn softmax(&mut self, v: Var) -> Result<Var> {
        let s = tensor::softmax(self.value(v).data())?;
        Ok(self.push(Tensor::vector(s), Op::Softmax(v), &[v]))
    }

    /// `Σ_i weights[i] · items[i]` over same-shaped items.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Result<Var> {
        let wv = self.value(weights).data().to_vec();
        if wv.len() != items.len() || items.is_empty() {
            return Err(Error::config(format!(
                "{} weights for {} items",
                wv.len(),
                items.len()
            )));
        }
        let first = self.value(items[0]);
        let mut out = Tensor::zeros(first.shape());
        for (&w, &item) in wv.iter().zip(items) {
            let t = self.value(item);
            check_same_shape(&out, t)?;
            for (o, x) in out.data_mut().iter_mut().zip(t.data()) {
                *o += w * x;
            }
        }
        let mut parents = items.to_vec();
        parents.push(weights);
        Ok(self.push(
            out,
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
            &parents,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean squared error against a constant target.
    pub fn squared_error(&mut self, x: Var, target: Tensor) -> Result<Var> {
        let xv = self.value(x);
        check_same_shape(xv, &target)?;
        let s: f64 = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let out = Tensor::scalar(s / xv.len() as f64);
        Ok(self.push(out, Op::SquaredError { x, target }, &[x]))
    }

    /// Mean binary cross-entropy of probabilities against a constant target.
    pub fn bce(&mut self, pred: Var, target: Tensor) -> Result<Var> {
        let pv = self.value(pred);
        check_same_shape(pv, &target)?;
        let s: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| bce_term(p, t))
            .sum();
        let out = Tensor::scalar(s / pv.len() as f64);
        Ok(self.push(out, Op::Bce { pred, target }, &[pred]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let send = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Elementwise(kind, a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let scalar_b = bv.is_scalar() && !av.is_scalar();
                let (ga, gb): (Tensor, Tensor) = match kind {
                    ElementwiseKind::Add => (g.clone(), g.clone()),
                    ElementwiseKind::Sub => (g.clone(), g.map(|x| -x)),
                    ElementwiseKind::Mul => {
                        let ga = if scalar_b {
                            let s = bv.item();
                            g.map(|x| x * s)
                        } else {
                            zip_map(g, bv, |x, y| x * y)
                        };
                        (ga, zip_map(g, av, |x, y| x * y))
                    }
                };
                if wants(*b) {
                    let gb = if scalar_b {
                        Tensor::scalar(gb.sum())
                    } else {
                        gb
                    };
                    send(*b, gb, grads);
                }
                send(*a, ga, grads);
            }
            Op::Affine { x, mul } => {
                let m = *mul;
                send(*x, g.map(|v| v * m), grads);
            }
            Op::Sigmoid(x) => {
                let gx = zip_map(g, &node.value, |gv, s| gv * s * (1.0 - s));
                send(*x, gx, grads);
            }
            Op::Tanh(x) => {
                let gx = zip_map(g, &node.value, |gv, t| gv * (1.0 - t * t));
                send(*x, gx, grads);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (c_in, h, wd) = xv.chw().expect("linear input is C×H×W");
                let c_out = wv.shape()[0];
                let p = h * wd;
                let gd = g.data();
                if wants(*x) {
                    let mut gx = vec![0.0; c_in * p];
                    for o in 0..c_out {
                        let grow = &gd[o * p..(o + 1) * p];
                        for i in 0..c_in {
                            let wv = wv.data()[o * c_in + i];
                            if wv == 0.0 {
                                continue;
                            }
                            for (dst, &gv) in gx[i * p..(i + 1) * p].iter_mut().zip(grow) {
                                *dst += wv * gv;
                            }
                        }
                    }
                    send(*x, Tensor::new(xv.shape().to_vec(), gx).unwrap(), grads);
                }
                if wants(*w) {
                    let mut gw = vec![0.0; c_out * c_in];
                    for o in 0..c_out {
                        let grow = &gd[o * p..(o + 1) * p];
                        for i in 0..c_in {
                            let xrow = &xv.data()[i * p..(i + 1) * p];
                            gw[o * c_in + i] = grow.iter().zip(xrow).map(|(a, b)| a * b).sum();
                        }
                    }
                    send(*w, Tensor::new(vec![c_out, c_in], gw).unwrap(), grads);
                }
                if wants(*b) {
                    let gb = (0..c_out).map(|o| gd[o * p..(o + 1) * p].iter().sum()).collect();
                    send(*b, Tensor::vector(gb), grads);
                }
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).len();
                let gd = g.data();
                if wants(*a) {
                    let t = Tensor::new(self.shape(*a).to_vec(), gd[..na].to_vec()).unwrap();
                    send(*a, t, grads);
                }
                if wants(*b) {
                    let t = Tensor::new(self.shape(*b).to_vec(), gd[na..].to_vec()).unwrap();
                    send(*b, t, grads);
                }
            }
            Op::Resize(x) => {
                let (c, h, w) = self.value(*x).chw().unwrap();
                let (_, oh, ow) = g.chw().unwrap();
                let mut gx = vec![0.0; c * h * w];
                let gd = g.data();
                for ch in 0..c {
                    for oy in 0..oh {
                        let sy = nearest_index(oy, h, oh);
                        for ox in 0..ow {
                            let sx = nearest_index(ox, w, ow);
                            gx[ch * h * w + sy * w + sx] += gd[ch * oh * ow + oy * ow + ox];
                        }
                    }
                }
                send(*x, Tensor::new(vec![c, h, w], gx).unwrap(), grads);
            }
            Op::AvgPool2(x) => {
                let (c, h, w) = self.value(*x).chw().unwrap();
                let (_, oh, ow) = g.chw().unwrap();
                let mut gx = vec![0.0; c * h * w];
                let gd = g.data();
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let v = 0.25 * gd[ch * oh * ow + oy * ow + ox];
                            let base = ch * h * w + 2 * oy * w + 2 * ox;
                            gx[base] += v;
                            gx[base + 1] += v;
                            gx[base + w] += v;
                            gx[base + w + 1] += v;
                        }
                    }
                }
                send(*x, Tensor::new(vec![c, h, w], gx).unwrap(), grads);
            }
            Op::Softmax(v) => {
                let s = node.value.data();
                let dot: f64 = s.iter().zip(g.data()).map(|(a, b)| a * b).sum();
                let gv = s
                    .iter()
                    .zip(g.data())
                    .map(|(&si, &gi)| si * (gi - dot))
                    .collect();
                send(*v, Tensor::vector(gv), grads);
            }
            Op::WeightedSum { weights, items } => {
                let wv = self.value(*weights).data();
                if wants(*weights) {
                    let gw = items
                        .iter()
                        .map(|&it| {
                            self.value(it)
                                .data()
                                .iter()
                                .zip(g.data())
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect();
                    send(*weights, Tensor::vector(gw), grads);
                }
                for (&w, &it) in wv.iter().zip(items) {
                    if wants(it) {
                        send(it, g.map(|v| v * w), grads);
                    }
                }
            }
            Op::Sum(x) => {
                let gv = g.item();
                send(*x, Tensor::full(self.shape(*x), gv), grads);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                let gv = g.item() / n;
                send(*x, Tensor::full(self.shape(*x), gv), grads);
            }
            Op::SquaredError { x, target } => {
                let xv = self.value(*x);
                let k = 2.0 * g.item() / xv.len() as f64;
                send(*x, zip_map(xv, target, |a, b| k * (a - b)), grads);
            }
            Op::Bce { pred, target } => {
                let pv = self.value(*pred);
                let k = g.item() / pv.len() as f64;
                let gp = zip_map(pv, target, |p, t| k * bce_grad(p, t));
                send(*pred, gp, grads);
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

pub(crate) fn bce_term(p: f64, t: f64) -> f64 {
    let q = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
}

fn bce_grad(p: f64, t: f64) -> f64 {
    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
        return 0.0;
    }
    -t / p + (1.0 - t) / (1.0 - p)
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when `v` is not on a path to the loss.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(&g, x).data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn disconnected_parameter_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::vector(vec![1.0, 2.0]));
        let y = g.parameter(Tensor::vector(vec![3.0, 4.0]));
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(y).is_none());
        assert_eq!(grads.wrt(&g, y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);
        let z = g.constant(Tensor::zeros(&[2]));
        let id = g.add(a, z).unwrap();
        assert_eq!(g.value(id), g.value(a));
        let one = g.constant(Tensor::ones(&[2]));
        let id = g.mul(a, one).unwrap();
        assert_eq!(g.value(id), g.value(a));
        let c = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = g.add(a, c).unwrap_err();
        assert_eq!(
            err,
            Error::Shape {
                left: vec![2],
                right: vec![3]
            }
        );
    }

    #[test]
    fn scalar_broadcast_gradient() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = g.parameter(Tensor::scalar(2.0));
        let y = g.mul(x, s).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(&g, s).data(), &[6.0]);
        assert_eq!(grads.wrt(&g, x).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn bce_is_finite_at_saturation() {
        let mut g = Graph::new();
        let p = g.parameter(Tensor::vector(vec![0.0, 1.0]));
        let loss = g.bce(p, Tensor::vector(vec![1.0, 0.0])).unwrap();
        assert!(g.value(loss).item().is_finite());
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(&g, p).is_finite());
    }
}
