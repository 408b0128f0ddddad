//! Parameter storage and a fixed-op forward tape with reverse-mode backward.
//!
//! The tape covers exactly the layer set the detection network needs (conv,
//! pool, upsample, relu, add, scaled add, concat, channel broadcast); it is
//! not a general autodiff system. Forward evaluation is eager; `backward`
//! replays the recorded nodes in reverse and accumulates parameter gradients
//! into the store in a fixed order, so results are bit-identical run to run.

use crate::error::{Error, Result};
use crate::ops;
use crate::ops::ConvMeta;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Registers a conv weight/bias parameter pair under `name` (as `{name}.w` /
/// `{name}.b`) and returns their ids. Network builders take this as a
/// callback so initialization policy stays in one place.
pub type InitFn = dyn FnMut(&mut ParamStore, &str, ConvMeta) -> (ParamId, ParamId);

#[derive(Debug)]
struct NamedParam {
    name: String,
    tensor: Tensor,
}

/// Owns every learnable tensor in creation order. Names are unique and are
/// the keys of the persistence format.
#[derive(Debug, Default)]
pub struct ParamStore {
    params: Vec<NamedParam>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.by_name(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.params.push(NamedParam { name, tensor });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + use<> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p.name.as_str(), &p.tensor))
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.data.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            let len = p.tensor.data.len();
            match p.tensor.grad.as_mut() {
                Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
                None => p.tensor.grad = Some(vec![0.0; len]),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

#[derive(Debug)]
enum OpKind {
    Input,
    Conv {
        meta: ConvMeta,
        w: ParamId,
        b: ParamId,
        x: ValueId,
    },
    MaxPool {
        x: ValueId,
        argmax: Vec<usize>,
    },
    Upsample {
        x: ValueId,
    },
    Relu {
        x: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    ScaleAdd {
        a: ValueId,
        b: ValueId,
        alpha: ParamId,
    },
    Concat {
        xs: Vec<ValueId>,
    },
    Broadcast {
        x: ValueId,
    },
}

#[derive(Debug)]
struct Node {
    op: OpKind,
    out: Tensor,
}

/// One forward pass worth of computation. Rebuilt every iteration; the
/// parameter store outlives it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].out
    }

    pub fn shape(&self, id: ValueId) -> Shape {
        self.nodes[id.0].out.shape
    }

    fn push(&mut self, op: OpKind, out: Tensor) -> ValueId {
        self.nodes.push(Node { op, out });
        ValueId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> ValueId {
        self.push(OpKind::Input, t)
    }

    /// Re-enters a computed value as a fresh input: the forward value is
    /// identical, but backward treats it as a constant. Used where a
    /// prediction feeds a later stage as data rather than as a signal to
    /// differentiate through.
    pub fn detach(&mut self, x: ValueId) -> ValueId {
        let t = self.value(x).clone();
        self.push(OpKind::Input, t)
    }

    pub fn conv(
        &mut self,
        ps: &ParamStore,
        meta: ConvMeta,
        w: ParamId,
        b: ParamId,
        x: ValueId,
    ) -> Result<ValueId> {
        let out = ops::conv2d_raw(&meta, self.value(x), &ps.get(w).data, &ps.get(b).data)?;
        Ok(self.push(OpKind::Conv { meta, w, b, x }, out))
    }

    pub fn maxpool(&mut self, x: ValueId) -> ValueId {
        let (out, argmax) = ops::maxpool2_with_argmax(self.value(x));
        self.push(OpKind::MaxPool { x, argmax }, out)
    }

    pub fn upsample(&mut self, x: ValueId, out_h: usize, out_w: usize) -> Result<ValueId> {
        let out = ops::bilinear_upsample(self.value(x), out_h, out_w)?;
        Ok(self.push(OpKind::Upsample { x }, out))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let out = ops::relu(self.value(x));
        self.push(OpKind::Relu { x }, out)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(OpKind::Add { a, b }, out))
    }

    /// a + alpha * b with a learnable scalar alpha (stored as a 1x1x1x1
    /// parameter).
    pub fn scale_add(
        &mut self,
        ps: &ParamStore,
        a: ValueId,
        b: ValueId,
        alpha: ParamId,
    ) -> Result<ValueId> {
        let av = ps.get(alpha);
        if av.shape != Shape::new(1, 1, 1, 1) {
            return Err(Error::Shape(format!(
                "scale_add alpha must be a scalar parameter, got {}",
                av.shape
            )));
        }
        let out = ops::scale_add(self.value(a), self.value(b), av.data[0])?;
        Ok(self.push(OpKind::ScaleAdd { a, b, alpha }, out))
    }

    pub fn concat(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        let tensors: Vec<&Tensor> = xs.iter().map(|&id| self.value(id)).collect();
        let out = ops::concat_channels(&tensors)?;
        Ok(self.push(OpKind::Concat { xs: xs.to_vec() }, out))
    }

    pub fn broadcast(&mut self, x: ValueId, channels: usize) -> Result<ValueId> {
        let out = ops::broadcast_channels(self.value(x), channels)?;
        Ok(self.push(OpKind::Broadcast { x }, out))
    }

    /// Distance from the recorded program to its nearest non-differentiable
    /// point: the smallest |v| over relu inputs and the smallest top-2 gap
    /// over max-pool windows. Gradient checks reject draws where this is
    /// within perturbation range.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                OpKind::Relu { x } => {
                    for &v in &self.value(*x).data {
                        margin = margin.min(v.abs());
                    }
                }
                OpKind::MaxPool { x, .. } => {
                    margin = margin.min(ops::maxpool2_top2_gap(self.value(*x)));
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse pass from the given seed gradients. Parameter gradients are
    /// accumulated (not overwritten) into the store, so callers zero them
    /// first via `ParamStore::zero_grads`.
    pub fn backward(&self, ps: &mut ParamStore, seeds: &[(ValueId, Vec<f64>)]) -> Result<()> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for (id, seed) in seeds {
            let want = self.nodes[id.0].out.data.len();
            if seed.len() != want {
                return Err(Error::Shape(format!(
                    "seed gradient length {} does not match value length {want}",
                    seed.len()
                )));
            }
            accumulate(&mut grads[id.0], seed, want);
        }

        for i in (0..self.nodes.len()).rev() {
            let Some(gy_data) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let gy = Tensor::from_vec(node.out.shape, gy_data);
            match &node.op {
                OpKind::Input => {}
                OpKind::Conv { meta, w, b, x } => {
                    let xin = &self.nodes[x.0].out;
                    let (gx, gw, gb) =
                        ops::conv2d_backward_raw(meta, xin, &ps.get(*w).data, &gy)?;
                    accumulate(&mut grads[x.0], &gx.data, gx.data.len());
                    add_into(ps.get_mut(*w).grad_mut(), &gw);
                    add_into(ps.get_mut(*b).grad_mut(), &gb);
                }
                OpKind::MaxPool { x, argmax } => {
                    let in_shape = self.nodes[x.0].out.shape;
                    let gx = ops::maxpool2_backward(in_shape, argmax, &gy);
                    accumulate(&mut grads[x.0], &gx.data, gx.data.len());
                }
                OpKind::Upsample { x } => {
                    let in_shape = self.nodes[x.0].out.shape;
                    let gx = ops::bilinear_upsample_backward(in_shape, &gy);
                    accumulate(&mut grads[x.0], &gx.data, gx.data.len());
                }
                OpKind::Relu { x } => {
                    let gx = ops::relu_backward(&self.nodes[x.0].out, &gy);
                    accumulate(&mut grads[x.0], &gx.data, gx.data.len());
                }
                OpKind::Add { a, b } => {
                    accumulate(&mut grads[a.0], &gy.data, gy.data.len());
                    accumulate(&mut grads[b.0], &gy.data, gy.data.len());
                }
                OpKind::ScaleAdd { a, b, alpha } => {
                    let alpha_v = ps.get(*alpha).data[0];
                    accumulate(&mut grads[a.0], &gy.data, gy.data.len());
                    let bv = &self.nodes[b.0].out;
                    let galpha: f64 = gy.data.iter().zip(&bv.data).map(|(g, v)| g * v).sum();
                    let gb: Vec<f64> = gy.data.iter().map(|g| alpha_v * g).collect();
                    accumulate(&mut grads[b.0], &gb, gb.len());
                    ps.get_mut(*alpha).grad_mut()[0] += galpha;
                }
                OpKind::Concat { xs } => {
                    let shapes: Vec<Shape> = xs.iter().map(|&x| self.nodes[x.0].out.shape).collect();
                    let parts = ops::concat_channels_backward(&shapes, &gy);
                    for (x, part) in xs.iter().zip(parts) {
                        accumulate(&mut grads[x.0], &part.data, part.data.len());
                    }
                }
                OpKind::Broadcast { x } => {
                    let gx = ops::broadcast_channels_backward(&gy);
                    accumulate(&mut grads[x.0], &gx.data, gx.data.len());
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, src: &[f64], len: usize) {
    match slot {
        Some(dst) => add_into(dst, src),
        None => {
            let mut dst = vec![0.0; len];
            add_into(&mut dst, src);
            *slot = Some(dst);
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn param_names_round_trip() {
        let mut ps = ParamStore::new();
        let a = ps.add("block1.conv1.w", Tensor::scalar(1.0));
        let b = ps.add("block1.conv1.b", Tensor::scalar(0.0));
        assert_eq!(ps.by_name("block1.conv1.w"), Some(a));
        assert_eq!(ps.by_name("block1.conv1.b"), Some(b));
        assert_eq!(ps.name(a), "block1.conv1.w");
        assert!(ps.by_name("missing").is_none());
    }

    #[test]
    fn backward_accumulates_through_shared_value() {
        // y = x + x doubles the gradient flowing into x's producer.
        let mut ps = ParamStore::new();
        let meta = ConvMeta::new(1, 1, 1);
        let w = ps.add("w", Tensor::scalar(3.0));
        let b = ps.add("b", Tensor::scalar(0.0));
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]));
        let c = tape.conv(&ps, meta, w, b, x).unwrap();
        let y = tape.add(c, c).unwrap();
        ps.zero_grads();
        tape.backward(&mut ps, &[(y, vec![1.0, 1.0])]).unwrap();
        // d/dw sum(2*(w*x + b)) = 2*(1+2) = 6; d/db = 2 positions * 2 = 4
        assert_eq!(ps.get(w).grad.as_ref().unwrap()[0], 6.0);
        assert_eq!(ps.get(b).grad.as_ref().unwrap()[0], 4.0);
    }

    #[test]
    fn detach_copies_the_value_and_stops_backward() {
        let mut ps = ParamStore::new();
        let meta = ConvMeta::new(1, 1, 1);
        let w1 = ps.add("w1", Tensor::scalar(2.0));
        let b1 = ps.add("b1", Tensor::scalar(0.0));
        let w2 = ps.add("w2", Tensor::scalar(3.0));
        let b2 = ps.add("b2", Tensor::scalar(0.0));
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]));
        let c1 = tape.conv(&ps, meta, w1, b1, x).unwrap();
        let d = tape.detach(c1);
        assert_eq!(tape.value(d).data, tape.value(c1).data);
        let y = tape.conv(&ps, meta, w2, b2, d).unwrap();
        ps.zero_grads();
        tape.backward(&mut ps, &[(y, vec![1.0, 1.0])]).unwrap();
        // The consumer trains normally; the producer behind the detach sees
        // nothing.
        assert_eq!(ps.get(w2).grad.as_ref().unwrap()[0], 2.0 + 4.0);
        assert_eq!(ps.get(w1).grad.as_ref().unwrap()[0], 0.0);
        assert_eq!(ps.get(b1).grad.as_ref().unwrap()[0], 0.0);
    }

    #[test]
    fn scale_add_alpha_gradient_is_inner_product() {
        let mut ps = ParamStore::new();
        let alpha = ps.add("alpha", Tensor::scalar(0.5));
        let mut tape = Tape::new();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let a = tape.input(random_tensor(Shape::new(1, 2, 2, 2), &mut r));
        let bt = random_tensor(Shape::new(1, 2, 2, 2), &mut r);
        let b = tape.input(bt.clone());
        let y = tape.scale_add(&ps, a, b, alpha).unwrap();
        let seed: Vec<f64> = (0..8).map(|i| (i + 1) as f64).collect();
        ps.zero_grads();
        tape.backward(&mut ps, &[(y, seed.clone())]).unwrap();
        let want: f64 = seed.iter().zip(&bt.data).map(|(g, v)| g * v).sum();
        let got = ps.get(alpha).grad.as_ref().unwrap()[0];
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn multiple_seeds_sum_their_contributions() {
        let mut ps = ParamStore::new();
        let w = ps.add("w", Tensor::scalar(1.0));
        let b = ps.add("b", Tensor::scalar(0.0));
        let meta = ConvMeta::new(1, 1, 1);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![5.0]));
        let c1 = tape.conv(&ps, meta, w, b, x).unwrap();
        let c2 = tape.relu(c1);
        ps.zero_grads();
        tape.backward(&mut ps, &[(c1, vec![1.0]), (c2, vec![2.0])]).unwrap();
        // dL/dw = 1*x + 2*x (relu passes since 5 > 0)
        assert_eq!(ps.get(w).grad.as_ref().unwrap()[0], 15.0);
    }

    #[test]
    fn seed_length_mismatch_rejected() {
        let mut ps = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        assert!(tape.backward(&mut ps, &[(x, vec![1.0])]).is_err());
    }
}
