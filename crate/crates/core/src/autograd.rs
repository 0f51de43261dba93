//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward operation appends a node holding its output value and
//! whatever it needs for the backward pass. [`Tape::backward`] walks the
//! nodes once in exact reverse order. Gradients of leaves persist on the
//! tape and accumulate across repeated `backward` calls until
//! [`Tape::zero_grad`].

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::conv::{self, ConvAlgo, ConvGeom, ConvInput, Kernel, PaddingMode};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Float, Shape, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    /// `(N, 1, H, W)` map applied to every channel.
    Spatial,
    /// `(N, C, 1, 1)` vector applied to every pixel.
    Channel,
    Same,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        inputs: Vec<usize>,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    Relu(usize),
    Sigmoid(usize),
    Concat(Vec<usize>),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize, Broadcast),
    SpatialGap(usize),
    ChannelMean(usize),
    ChannelMax { input: usize, argmax: Vec<u32> },
    Laplacian(usize),
    ReflectPad(usize),
    Crop(usize),
    Square(usize),
    SumPerItem(usize),
    Mean(usize),
    Sqrt(usize),
    AddScalar(usize),
    Scale(usize, T),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, usize>,
    conv_algo: ConvAlgo,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            params: HashMap::new(),
            conv_algo: ConvAlgo::default(),
        }
    }

    pub fn with_conv_algo(mut self, algo: ConvAlgo) -> Self {
        self.conv_algo = algo;
        self
    }

    pub fn conv_algo(&self) -> ConvAlgo {
        self.conv_algo
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        debug_assert!(value.grad().is_none());
        self.nodes.push(Node { value, op });
        self.leaf_grads.push(None);
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Detached);
        }
        Ok(v.index)
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].value.requires_grad()
    }

    /// Derived value: requires grad iff any input does.
    fn derived(&mut self, shape: Shape, data: Vec<T>, inputs: &[usize], op: Op<T>) -> Var {
        let rg = inputs.iter().any(|&i| self.needs(i));
        let t = Tensor::from_vec(shape, data)
            .expect("op produced data of the declared shape")
            .with_requires_grad(rg);
        self.push(t, op)
    }

    /// Records a leaf. Its `requires_grad` flag decides whether it receives
    /// a gradient; any stored gradient is dropped.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let mut t = tensor;
        t.zero_grad();
        self.push(t, Op::Leaf)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn variable(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// The leaf for parameter `id`, recorded on first use.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&i) = self.params.get(&id) {
            return Var { tape: self.id, index: i };
        }
        let v = self.leaf(store.get(id).clone());
        self.params.insert(id, v.index);
        v
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(self.val(self.idx(v)?))
    }

    pub fn shape(&self, v: Var) -> Result<Shape> {
        Ok(self.value(v)?.shape())
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Result<Option<&[T]>> {
        let i = self.idx(v)?;
        Ok(self.leaf_grads[i].as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Gradients of every parameter bound with [`Tape::param`].
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, Option<&[T]>)> {
        self.params
            .iter()
            .map(|(&id, &i)| (id, self.leaf_grads[i].as_deref()))
    }

    /// Adds this tape's parameter gradients into `store`. Parameters the
    /// loss does not depend on receive an explicit zero gradient.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (id, g) in self.param_grads() {
            let t = store.get_mut(id);
            match g {
                Some(g) => t.accumulate_grad(g)?,
                None => {
                    let zeros = vec![T::zero(); t.shape().numel()];
                    t.accumulate_grad(&zeros)?
                }
            }
        }
        Ok(())
    }

    // ---------------------------------------------------------------------
    // Convolutions

    fn conv_params(&self, weight: usize, bias: Option<usize>, in_ch: usize) -> Result<(Shape, usize)> {
        let ws = self.val(weight).shape();
        if ws.c != in_ch {
            return Err(Error::shape(format!(
                "input has {in_ch} channels but kernel {ws} expects {}",
                ws.c
            )));
        }
        if let Some(b) = bias {
            let bs = self.val(b).shape();
            if bs.numel() != ws.n {
                return Err(Error::shape(format!("bias {bs} does not match kernel {ws}")));
            }
        }
        Ok((ws, ws.n))
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        self.conv2d_cat(&[x], weight, bias, geom)
    }

    /// `conv2d(concat_channels(xs), ..)` without materializing the concatenation.
    pub fn conv2d_cat(&mut self, xs: &[Var], weight: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        geom.validate()?;
        let inputs = xs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let first = *inputs.first().ok_or_else(|| Error::shape("conv2d with no inputs"))?;
        let s0 = self.val(first).shape();
        let mut in_ch = 0;
        for &i in &inputs {
            let s = self.val(i).shape();
            if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                return Err(Error::shape(format!("conv2d inputs {s} and {s0} disagree on N/H/W")));
            }
            in_ch += s.c;
        }
        let w = self.idx(weight)?;
        let b = bias.map(|b| self.idx(b)).transpose()?;
        let (ws, out_ch) = self.conv_params(w, b, in_ch)?;
        if (ws.h, ws.w) != geom.kernel {
            return Err(Error::shape(format!("kernel {ws} disagrees with geometry {:?}", geom.kernel)));
        }
        let (oh, ow) = geom.output_size(s0.h, s0.w).ok_or_else(|| {
            Error::shape(format!(
                "conv2d output would be empty: input {s0}, extent {:?}, padding {:?}",
                geom.extent(),
                geom.padding
            ))
        })?;
        let data = {
            let input = ConvInput {
                parts: inputs.iter().map(|&i| (self.val(i).data(), self.val(i).shape().c)).collect(),
                n: s0.n,
                h: s0.h,
                w: s0.w,
            };
            let k = Kernel {
                weight: self.val(w).data(),
                out_ch,
                in_ch,
            };
            let bias = b.map(|b| self.val(b).data());
            conv::conv2d_forward(self.conv_algo, &input, k, bias, &geom, (oh, ow))
        };
        let mut deps = inputs.clone();
        deps.push(w);
        deps.extend(b);
        Ok(self.derived(
            Shape::new(s0.n, out_ch, oh, ow),
            data,
            &deps,
            Op::Conv2d {
                inputs,
                weight: w,
                bias: b,
                geom,
            },
        ))
    }

    pub fn conv_transpose2d(&mut self, x: Var, weight: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        geom.validate()?;
        if geom.padding_mode != PaddingMode::Zero {
            return Err(Error::Config("transposed convolution supports zero padding only".into()));
        }
        let xi = self.idx(x)?;
        let xs = self.val(xi).shape();
        let w = self.idx(weight)?;
        let b = bias.map(|b| self.idx(b)).transpose()?;
        let (ws, out_ch) = self.conv_params(w, b, xs.c)?;
        if (ws.h, ws.w) != geom.kernel {
            return Err(Error::shape(format!("kernel {ws} disagrees with geometry {:?}", geom.kernel)));
        }
        let (oh, ow) = geom
            .transposed_output_size(xs.h, xs.w)
            .ok_or_else(|| Error::shape(format!("conv_transpose2d output would be empty for input {xs}")))?;
        let data = {
            let input = ConvInput::single(self.val(xi).data(), xs.n, xs.c, xs.h, xs.w);
            let k = Kernel {
                weight: self.val(w).data(),
                out_ch,
                in_ch: xs.c,
            };
            let bias = b.map(|b| self.val(b).data());
            conv::conv_transpose2d_forward(self.conv_algo, &input, k, bias, &geom, (oh, ow))
        };
        let mut deps = vec![xi, w];
        deps.extend(b);
        Ok(self.derived(
            Shape::new(xs.n, out_ch, oh, ow),
            data,
            &deps,
            Op::ConvTranspose2d {
                input: xi,
                weight: w,
                bias: b,
                geom,
            },
        ))
    }

    // ---------------------------------------------------------------------
    // Elementwise

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: impl FnOnce(usize) -> Op<T>) -> Result<Var> {
        let i = self.idx(x)?;
        let v = self.val(i);
        let data = v.data().iter().map(|&a| f(a)).collect();
        Ok(self.derived(v.shape(), data, &[i], op(i)))
    }

    /// Smallest distance of any recorded ReLU input from zero, or of any
    /// channel-max winner from its runner-up. Finite differences are only
    /// meaningful when a perturbation stays below this margin.
    pub fn kink_margin(&self) -> Option<T> {
        let mut margin: Option<T> = None;
        let mut take = |v: T| margin = Some(margin.map_or(v, |m| if v < m { v } else { m }));
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => self.nodes[*x].value.data().iter().for_each(|&v| take(v.abs())),
                Op::ChannelMax { input, .. } => {
                    let t = &self.nodes[*input].value;
                    let s = t.shape();
                    if s.c < 2 {
                        continue;
                    }
                    for n in 0..s.n {
                        for p in 0..s.plane() {
                            let mut best = T::neg_infinity();
                            let mut second = T::neg_infinity();
                            for c in 0..s.c {
                                let v = t.data()[(n * s.c + c) * s.plane() + p];
                                if v > best {
                                    second = best;
                                    best = v;
                                } else if v > second {
                                    second = v;
                                }
                            }
                            take(best - second);
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(
            x,
            |v| {
                // Evaluate on the side that cannot overflow, then keep the
                // result off the rounded endpoints 0 and 1.
                let s = if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                };
                let below_one = T::one() - T::epsilon() / T::from_f64(2.0);
                s.max(T::min_positive_value()).min(below_one)
            },
            Op::Sigmoid,
        )
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * v, Op::Square)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.sqrt(), Op::Sqrt)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, |v| v + c, Op::AddScalar)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, |v| v * c, |i| Op::Scale(i, c))
    }

    fn same_shape(&self, a: usize, b: usize, what: &str) -> Result<Shape> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa != sb {
            return Err(Error::shape(format!("{what} of {sa} and {sb}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let s = self.same_shape(ia, ib, "add")?;
        let data = self.val(ia).data().iter().zip(self.val(ib).data()).map(|(&x, &y)| x + y).collect();
        Ok(self.derived(s, data, &[ia, ib], Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let s = self.same_shape(ia, ib, "sub")?;
        let data = self.val(ia).data().iter().zip(self.val(ib).data()).map(|(&x, &y)| x - y).collect();
        Ok(self.derived(s, data, &[ia, ib], Op::Sub(ia, ib)))
    }

    /// `x ⊗ a` where `a` is `(N,1,H,W)`, `(N,C,1,1)` or the shape of `x`.
    pub fn mul_broadcast(&mut self, x: Var, a: Var) -> Result<Var> {
        let (ix, ia) = (self.idx(x)?, self.idx(a)?);
        let (sx, sa) = (self.val(ix).shape(), self.val(ia).shape());
        let kind = if sa == sx {
            Broadcast::Same
        } else if sa == Shape::new(sx.n, 1, sx.h, sx.w) {
            Broadcast::Spatial
        } else if sa == Shape::new(sx.n, sx.c, 1, 1) {
            Broadcast::Channel
        } else {
            return Err(Error::shape(format!("cannot broadcast {sa} against {sx}")));
        };
        let xd = self.val(ix).data();
        let ad = self.val(ia).data();
        let plane = sx.plane();
        let data = xd
            .iter()
            .enumerate()
            .map(|(i, &v)| v * ad[broadcast_index(kind, sx, plane, i)])
            .collect();
        Ok(self.derived(sx, data, &[ix, ia], Op::Mul(ix, ia, kind)))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let inputs = xs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let first = *inputs.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let s0 = self.val(first).shape();
        let mut c = 0;
        for &i in &inputs {
            let s = self.val(i).shape();
            if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                return Err(Error::shape(format!("concat of {s} with {s0}")));
            }
            c += s.c;
        }
        let out = Shape::new(s0.n, c, s0.h, s0.w);
        let mut data = Vec::with_capacity(out.numel());
        for n in 0..s0.n {
            for &i in &inputs {
                let v = self.val(i);
                let len = v.shape().item();
                data.extend_from_slice(&v.data()[n * len..(n + 1) * len]);
            }
        }
        Ok(self.derived(out, data, &inputs.clone(), Op::Concat(inputs)))
    }

    // ---------------------------------------------------------------------
    // Reductions

    pub fn spatial_gap(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let s = self.val(i).shape();
        let inv = T::one() / T::from_f64(s.plane() as f64);
        let data = self
            .val(i)
            .data()
            .chunks_exact(s.plane())
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(self.derived(Shape::new(s.n, s.c, 1, 1), data, &[i], Op::SpatialGap(i)))
    }

    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let s = self.val(i).shape();
        let inv = T::one() / T::from_f64(s.c as f64);
        let d = self.val(i).data();
        let plane = s.plane();
        let mut data = vec![T::zero(); s.n * plane];
        for n in 0..s.n {
            let out = &mut data[n * plane..(n + 1) * plane];
            for c in 0..s.c {
                let src = &d[(n * s.c + c) * plane..(n * s.c + c + 1) * plane];
                add_into(out, src);
            }
            out.iter_mut().for_each(|v| *v = *v * inv);
        }
        Ok(self.derived(Shape::new(s.n, 1, s.h, s.w), data, &[i], Op::ChannelMean(i)))
    }

    /// Per-pixel maximum over channels; ties resolve to the lowest channel.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let s = self.val(i).shape();
        if s.c == 0 {
            return Err(Error::shape("channel_max of zero channels"));
        }
        let d = self.val(i).data();
        let plane = s.plane();
        let mut data = Vec::with_capacity(s.n * plane);
        let mut argmax = Vec::with_capacity(s.n * plane);
        for n in 0..s.n {
            for p in 0..plane {
                let mut best = d[n * s.c * plane + p];
                let mut arg = 0u32;
                for c in 1..s.c {
                    let v = d[(n * s.c + c) * plane + p];
                    if v > best {
                        best = v;
                        arg = c as u32;
                    }
                }
                data.push(best);
                argmax.push(arg);
            }
        }
        Ok(self.derived(Shape::new(s.n, 1, s.h, s.w), data, &[i], Op::ChannelMax { input: i, argmax }))
    }

    /// Sum of each batch item, `(N,1,1,1)`.
    pub fn sum_per_item(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let s = self.val(i).shape();
        let data = self
            .val(i)
            .data()
            .chunks_exact(s.item().max(1))
            .map(|c| c.iter().copied().sum())
            .collect();
        Ok(self.derived(Shape::new(s.n, 1, 1, 1), data, &[i], Op::SumPerItem(i)))
    }

    /// Mean of all elements, `(1,1,1,1)`.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let v = self.val(i);
        let n = v.shape().numel();
        if n == 0 {
            return Err(Error::shape("mean of empty tensor"));
        }
        let m = v.data().iter().copied().sum::<T>() / T::from_f64(n as f64);
        Ok(self.derived(Shape::SCALAR, vec![m], &[i], Op::Mean(i)))
    }

    // ---------------------------------------------------------------------
    // Spatial

    /// Per-channel 4-neighbour Laplacian with reflect padding.
    pub fn laplacian(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let s = self.val(i).shape();
        let d = self.val(i).data();
        let mut data = vec![T::zero(); s.numel()];
        let four = T::from_f64(4.0);
        for (src, dst) in d.chunks_exact(s.plane()).zip(data.chunks_exact_mut(s.plane())) {
            for y in 0..s.h {
                for x in 0..s.w {
                    let [up, down, left, right] = laplacian_taps(y, x, s.h, s.w);
                    dst[y * s.w + x] = src[up] + src[down] + src[left] + src[right] - four * src[y * s.w + x];
                }
            }
        }
        Ok(self.derived(s, data, &[i], Op::Laplacian(i)))
    }

    /// Reflect-pads the bottom and right edges up to `(h, w)`.
    pub fn reflect_pad(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let i = self.idx(x)?;
        let s = self.val(i).shape();
        if h < s.h || w < s.w {
            return Err(Error::shape(format!("cannot reflect-pad {s} to {h}x{w}")));
        }
        let out = Shape::new(s.n, s.c, h, w);
        let d = self.val(i).data();
        let mut data = Vec::with_capacity(out.numel());
        for p in d.chunks_exact(s.plane()) {
            for y in 0..h {
                let sy = conv::reflect_index(y as isize, s.h);
                for x in 0..w {
                    data.push(p[sy * s.w + conv::reflect_index(x as isize, s.w)]);
                }
            }
        }
        Ok(self.derived(out, data, &[i], Op::ReflectPad(i)))
    }

    /// Keeps the top-left `(h, w)` window.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let i = self.idx(x)?;
        let s = self.val(i).shape();
        if h > s.h || w > s.w || h == 0 || w == 0 {
            return Err(Error::shape(format!("cannot crop {s} to {h}x{w}")));
        }
        let out = Shape::new(s.n, s.c, h, w);
        let d = self.val(i).data();
        let mut data = Vec::with_capacity(out.numel());
        for p in d.chunks_exact(s.plane()) {
            for y in 0..h {
                data.extend_from_slice(&p[y * s.w..y * s.w + w]);
            }
        }
        Ok(self.derived(out, data, &[i], Op::Crop(i)))
    }

    // ---------------------------------------------------------------------
    // Backward

    /// Back-propagates from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.idx(loss)?;
        let ls = self.val(root).shape();
        if ls != Shape::SCALAR {
            return Err(Error::NonScalarLoss(ls.to_string()));
        }
        if !self.needs(root) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root + 1];
        grads[root] = Some(vec![T::one()]);
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.needs(i) {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => add_into(acc, &g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (target, contrib) in self.node_backward(i, &g) {
                match &mut grads[target] {
                    Some(acc) => add_into(acc, &contrib),
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for each input requiring grad.
    fn node_backward(&self, i: usize, g: &[T]) -> Vec<(usize, Vec<T>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                inputs,
                weight,
                bias,
                geom,
            } => {
                let s0 = self.val(inputs[0]).shape();
                let input = ConvInput {
                    parts: inputs.iter().map(|&j| (self.val(j).data(), self.val(j).shape().c)).collect(),
                    n: s0.n,
                    h: s0.h,
                    w: s0.w,
                };
                let ws = self.val(*weight).shape();
                let k = Kernel {
                    weight: self.val(*weight).data(),
                    out_ch: ws.n,
                    in_ch: ws.c,
                };
                let need_x = inputs.iter().any(|&j| self.needs(j));
                let need_b = bias.is_some_and(|b| self.needs(b));
                let grads = conv::conv2d_backward(
                    self.conv_algo,
                    &input,
                    k,
                    geom,
                    (out.shape().h, out.shape().w),
                    g,
                    (need_x, self.needs(*weight), need_b),
                );
                if let Some(dx) = grads.input {
                    for (&j, d) in inputs.iter().zip(dx) {
                        if self.needs(j) {
                            res.push((j, d));
                        }
                    }
                }
                if let Some(dw) = grads.weight {
                    res.push((*weight, dw));
                }
                if let (Some(b), Some(db)) = (bias, grads.bias) {
                    res.push((*b, db));
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let s = self.val(*input).shape();
                let x = ConvInput::single(self.val(*input).data(), s.n, s.c, s.h, s.w);
                let ws = self.val(*weight).shape();
                let k = Kernel {
                    weight: self.val(*weight).data(),
                    out_ch: ws.n,
                    in_ch: ws.c,
                };
                let need_b = bias.is_some_and(|b| self.needs(b));
                let grads = conv::conv_transpose2d_backward(
                    self.conv_algo,
                    &x,
                    k,
                    geom,
                    (out.shape().h, out.shape().w),
                    g,
                    (self.needs(*input), self.needs(*weight), need_b),
                );
                if let Some(mut dx) = grads.input {
                    res.push((*input, dx.remove(0)));
                }
                if let Some(dw) = grads.weight {
                    res.push((*weight, dw));
                }
                if let (Some(b), Some(db)) = (bias, grads.bias) {
                    res.push((*b, db));
                }
            }
            Op::Relu(x) => {
                let d = out
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| if y > T::zero() { gv } else { T::zero() })
                    .collect();
                res.push((*x, d));
            }
            Op::Sigmoid(x) => {
                let d = out.data().iter().zip(g).map(|(&y, &gv)| gv * y * (T::one() - y)).collect();
                res.push((*x, d));
            }
            Op::Square(x) => {
                let two = T::from_f64(2.0);
                let d = self.val(*x).data().iter().zip(g).map(|(&v, &gv)| two * v * gv).collect();
                res.push((*x, d));
            }
            Op::Sqrt(x) => {
                let half = T::from_f64(0.5);
                let d = out.data().iter().zip(g).map(|(&y, &gv)| gv * half / y).collect();
                res.push((*x, d));
            }
            Op::AddScalar(x) => res.push((*x, g.to_vec())),
            Op::Scale(x, c) => res.push((*x, g.iter().map(|&v| v * *c).collect())),
            Op::Add(a, b) => {
                if self.needs(*a) {
                    res.push((*a, g.to_vec()));
                }
                if self.needs(*b) {
                    res.push((*b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    res.push((*a, g.to_vec()));
                }
                if self.needs(*b) {
                    res.push((*b, g.iter().map(|&v| -v).collect()));
                }
            }
            Op::Mul(x, a, kind) => {
                let s = out.shape();
                let plane = s.plane();
                let (xd, ad) = (self.val(*x).data(), self.val(*a).data());
                if self.needs(*x) {
                    let d = g
                        .iter()
                        .enumerate()
                        .map(|(k, &gv)| gv * ad[broadcast_index(*kind, s, plane, k)])
                        .collect();
                    res.push((*x, d));
                }
                if self.needs(*a) {
                    let mut d = vec![T::zero(); ad.len()];
                    for (k, (&gv, &xv)) in g.iter().zip(xd).enumerate() {
                        let j = broadcast_index(*kind, s, plane, k);
                        d[j] = d[j] + gv * xv;
                    }
                    res.push((*a, d));
                }
            }
            Op::Concat(inputs) => {
                let s = out.shape();
                let mut offset = 0;
                for &j in inputs {
                    let len = self.val(j).shape().item();
                    if self.needs(j) {
                        let mut d = Vec::with_capacity(len * s.n);
                        for n in 0..s.n {
                            let start = n * s.item() + offset;
                            d.extend_from_slice(&g[start..start + len]);
                        }
                        res.push((j, d));
                    }
                    offset += len;
                }
            }
            Op::SpatialGap(x) => {
                let s = self.val(*x).shape();
                let inv = T::one() / T::from_f64(s.plane() as f64);
                let d = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv * inv, s.plane()))
                    .collect();
                res.push((*x, d));
            }
            Op::ChannelMean(x) => {
                let s = self.val(*x).shape();
                let inv = T::one() / T::from_f64(s.c as f64);
                let plane = s.plane();
                let mut d = Vec::with_capacity(s.numel());
                for n in 0..s.n {
                    for _ in 0..s.c {
                        d.extend(g[n * plane..(n + 1) * plane].iter().map(|&v| v * inv));
                    }
                }
                res.push((*x, d));
            }
            Op::ChannelMax { input, argmax } => {
                let s = self.val(*input).shape();
                let plane = s.plane();
                let mut d = vec![T::zero(); s.numel()];
                for (k, (&gv, &c)) in g.iter().zip(argmax).enumerate() {
                    let (n, p) = (k / plane, k % plane);
                    d[(n * s.c + c as usize) * plane + p] = gv;
                }
                res.push((*input, d));
            }
            Op::Laplacian(x) => {
                let s = out.shape();
                let four = T::from_f64(4.0);
                let mut d = vec![T::zero(); s.numel()];
                for (gp, dp) in g.chunks_exact(s.plane()).zip(d.chunks_exact_mut(s.plane())) {
                    for y in 0..s.h {
                        for xx in 0..s.w {
                            let gv = gp[y * s.w + xx];
                            for t in laplacian_taps(y, xx, s.h, s.w) {
                                dp[t] = dp[t] + gv;
                            }
                            let c = y * s.w + xx;
                            dp[c] = dp[c] - four * gv;
                        }
                    }
                }
                res.push((*x, d));
            }
            Op::ReflectPad(x) => {
                let s = self.val(*x).shape();
                let so = out.shape();
                let mut d = vec![T::zero(); s.numel()];
                for (gp, dp) in g.chunks_exact(so.plane()).zip(d.chunks_exact_mut(s.plane())) {
                    for y in 0..so.h {
                        let sy = conv::reflect_index(y as isize, s.h);
                        for xx in 0..so.w {
                            let t = sy * s.w + conv::reflect_index(xx as isize, s.w);
                            dp[t] = dp[t] + gp[y * so.w + xx];
                        }
                    }
                }
                res.push((*x, d));
            }
            Op::Crop(x) => {
                let s = self.val(*x).shape();
                let so = out.shape();
                let mut d = vec![T::zero(); s.numel()];
                for (gp, dp) in g.chunks_exact(so.plane()).zip(d.chunks_exact_mut(s.plane())) {
                    for y in 0..so.h {
                        dp[y * s.w..y * s.w + so.w].copy_from_slice(&gp[y * so.w..(y + 1) * so.w]);
                    }
                }
                res.push((*x, d));
            }
            Op::SumPerItem(x) => {
                let len = self.val(*x).shape().item();
                let d = g.iter().flat_map(|&gv| std::iter::repeat_n(gv, len)).collect();
                res.push((*x, d));
            }
            Op::Mean(x) => {
                let n = self.val(*x).shape().numel();
                let v = g[0] / T::from_f64(n as f64);
                res.push((*x, vec![v; n]));
            }
        }
        res
    }
}

#[inline]
fn broadcast_index(kind: Broadcast, s: Shape, plane: usize, k: usize) -> usize {
    match kind {
        Broadcast::Same => k,
        Broadcast::Spatial => (k / s.item()) * plane + k % plane,
        Broadcast::Channel => k / plane,
    }
}

#[inline]
fn laplacian_taps(y: usize, x: usize, h: usize, w: usize) -> [usize; 4] {
    let r = |v: usize, d: isize, n: usize| conv::reflect_index(v as isize + d, n);
    [
        r(y, -1, h) * w + x,
        r(y, 1, h) * w + x,
        y * w + r(x, -1, w),
        y * w + r(x, 1, w),
    ]
}
