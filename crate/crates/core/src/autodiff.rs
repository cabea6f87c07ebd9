//! Reverse-mode differentiation over an explicitly recorded op list.
//!
//! A [`Graph`] owns every intermediate value. Each op appends a node holding
//! its output and a backward closure mapping `(inputs, output, upstream)` to
//! input gradients. [`Graph::backward`] walks the list in reverse.

use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::ssm::{self, Discretization, SsmParams};
use crate::tensor::ops;
use crate::tensor::NdArray;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&[&NdArray], &NdArray, &NdArray) -> Vec<NdArray>>;

struct Node {
    value: NdArray,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<NdArray>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&NdArray> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every parameter bound into the graph that received one.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &NdArray)> {
        self.params.iter().filter_map(|&(node, id)| self.grads[node].as_ref().map(|g| (id, g)))
    }

    /// Add parameter gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in self.params() {
            store.accumulate_grad(id, g);
        }
    }
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

    pub fn value(&self, v: Var) -> &NdArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push_leaf(&mut self, value: NdArray, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { value, inputs: Vec::new(), backward: None, requires_grad, param });
        Var(self.nodes.len() - 1)
    }

    /// A value that gradients do not flow into.
    pub fn constant(&mut self, value: NdArray) -> Var {
        self.push_leaf(value, false, None)
    }

    /// A leaf whose gradient is tracked (used for inputs under test).
    pub fn input(&mut self, value: NdArray) -> Var {
        self.push_leaf(value, true, None)
    }

    /// Bind a stored parameter as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push_leaf(store.value(id).clone(), true, Some(id))
    }

    fn push_op(
        &mut self,
        op: &'static str,
        inputs: &[Var],
        value: NdArray,
        backward: BackwardFn,
    ) -> Result<Var> {
        value.ensure_finite(op)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: Some(backward),
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse pass from a scalar output, seeded with gradient 1.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return dim_err(format!("backward needs a scalar output, got {:?}", out.shape()));
        }
        self.backward_with(output, NdArray::full(out.shape(), 1.0))
    }

    /// Reverse pass seeded with an explicit upstream gradient.
    pub fn backward_with(&self, output: Var, seed: NdArray) -> Result<Gradients> {
        seed.expect_shape(self.nodes[output.0].value.shape())?;
        let mut grads: Vec<Option<NdArray>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(backward) = &node.backward else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let inputs: Vec<&NdArray> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let input_grads = backward(&inputs, &node.value, &g);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&i, gi) in node.inputs.iter().zip(input_grads) {
                if !self.nodes[i].requires_grad {
                    continue;
                }
                match &mut grads[i] {
                    Some(acc) => acc.add_assign(&gi),
                    slot => *slot = Some(gi),
                }
            }
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(output.0 + 1)
            .filter_map(|(i, n)| n.param.map(|p| (i, p)))
            .collect();
        Ok(Gradients { grads, params })
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push_op("add", &[a, b], v, Box::new(|_, _, g| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push_op("sub", &[a, b], v, Box::new(|_, _, g| vec![g.clone(), g.scale(-1.0)]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push_op(
            "mul",
            &[a, b],
            v,
            Box::new(|inp, _, g| {
                vec![
                    g.zip_map(inp[1], |g, y| g * y).unwrap(),
                    g.zip_map(inp[0], |g, x| g * x).unwrap(),
                ]
            }),
        )
    }

    /// `scale·x + offset`.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Result<Var> {
        let v = self.value(x).map(|v| scale * v + offset);
        self.push_op("affine", &[x], v, Box::new(move |_, _, g| vec![g.scale(scale)]))
    }

    /// Multiply `x` by `w` where `w` has the same rank and each extent is
    /// either equal to `x`'s or 1.
    pub fn mul_broadcast(&mut self, x: Var, w: Var) -> Result<Var> {
        let map = Arc::new(broadcast_map(self.shape(x), self.shape(w))?);
        let (xv, wv) = (self.value(x), self.value(w));
        let data = xv.data().iter().zip(map.iter()).map(|(a, &j)| a * wv.data()[j]).collect();
        let v = NdArray::new(xv.shape(), data)?;
        self.push_op(
            "mul_broadcast",
            &[x, w],
            v,
            Box::new(move |inp, _, g| {
                let (xv, wv) = (inp[0], inp[1]);
                let mut gx = NdArray::zeros(xv.shape());
                let mut gw = NdArray::zeros(wv.shape());
                for (i, (&gi, &j)) in g.data().iter().zip(map.iter()).enumerate() {
                    gx.data_mut()[i] = gi * wv.data()[j];
                    gw.data_mut()[j] += gi * xv.data()[i];
                }
                vec![gx, gw]
            }),
        )
    }

    /// `w ⊙ a + (1 − w) ⊙ b` with `w` broadcast as in [`Graph::mul_broadcast`].
    /// The result is clamped to `[min(a, b), max(a, b)]` so rounding never
    /// leaves the hull of the two operands.
    pub fn convex_combine(&mut self, a: Var, b: Var, w: Var) -> Result<Var> {
        self.value(a).expect_shape(self.shape(b))?;
        let map = Arc::new(broadcast_map(self.shape(a), self.shape(w))?);
        let (av, bv, wv) = (self.value(a), self.value(b), self.value(w));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .zip(map.iter())
            .map(|((&x, &y), &j)| {
                let t = wv.data()[j];
                (t * x + (1.0 - t) * y).clamp(x.min(y), x.max(y))
            })
            .collect();
        let v = NdArray::new(av.shape(), data)?;
        self.push_op(
            "convex_combine",
            &[a, b, w],
            v,
            Box::new(move |inp, _, g| {
                let (av, bv, wv) = (inp[0], inp[1], inp[2]);
                let mut ga = NdArray::zeros(av.shape());
                let mut gb = NdArray::zeros(bv.shape());
                let mut gw = NdArray::zeros(wv.shape());
                for (i, (&gi, &j)) in g.data().iter().zip(map.iter()).enumerate() {
                    let t = wv.data()[j];
                    ga.data_mut()[i] = gi * t;
                    gb.data_mut()[i] = gi * (1.0 - t);
                    gw.data_mut()[j] += gi * (av.data()[i] - bv.data()[i]);
                }
                vec![ga, gb, gw]
            }),
        )
    }

    /// Multiply `x` by the single entry `w[index]` of a parameter vector.
    pub fn scale_by_entry(&mut self, x: Var, w: Var, index: usize) -> Result<Var> {
        if index >= self.value(w).len() {
            return dim_err(format!("entry {index} out of range for {:?}", self.shape(w)));
        }
        let s = self.value(w).data()[index];
        let v = self.value(x).scale(s);
        self.push_op(
            "scale_by_entry",
            &[x, w],
            v,
            Box::new(move |inp, _, g| {
                let s = inp[1].data()[index];
                let mut gw = NdArray::zeros(inp[1].shape());
                gw.data_mut()[index] = g.data().iter().zip(inp[0].data()).map(|(a, b)| a * b).sum();
                vec![g.scale(s), gw]
            }),
        )
    }

    /// Add a constant array tiled over `x` (its length must divide `x`'s).
    pub fn add_tiled_const(&mut self, x: Var, c: Arc<NdArray>) -> Result<Var> {
        let xv = self.value(x);
        if c.is_empty() || !xv.len().is_multiple_of(c.len()) {
            return dim_err(format!("cannot tile {:?} over {:?}", c.shape(), xv.shape()));
        }
        let cl = c.len();
        let data = xv.data().iter().enumerate().map(|(i, v)| v + c.data()[i % cl]).collect();
        let v = NdArray::new(xv.shape(), data)?;
        self.push_op("add_tiled_const", &[x], v, Box::new(|_, _, g| vec![g.clone()]))
    }

    fn unary(
        &mut self,
        op: &'static str,
        x: Var,
        f: fn(f64) -> f64,
        df: fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let v = self.value(x).map(f);
        self.push_op(
            op,
            &[x],
            v,
            Box::new(move |inp, out, g| {
                let data = g
                    .data()
                    .iter()
                    .zip(inp[0].data())
                    .zip(out.data())
                    .map(|((g, &x), &y)| g * df(x, y))
                    .collect();
                vec![NdArray::new(g.shape(), data).unwrap()]
            }),
        )
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary("silu", x, ops::silu_scalar, |x, _| ops::silu_grad_scalar(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, ops::sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, ops::softplus_scalar, |x, _| ops::sigmoid_scalar(x))
    }

    // ---- convolutions and normalization ----

    pub fn pointwise_conv(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let v = ops::pointwise_conv(self.value(x), self.value(kernel), bias.map(|b| self.value(b)))?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        self.push_op(
            "pointwise_conv",
            &inputs,
            v,
            Box::new(move |inp, _, g| {
                let (gx, gk, gb) = ops::pointwise_conv_backward(inp[0], inp[1], g);
                if has_bias {
                    vec![gx, gk, gb]
                } else {
                    vec![gx, gk]
                }
            }),
        )
    }

    pub fn dilated_conv3x3(&mut self, x: Var, kernel: Var, dilation: usize) -> Result<Var> {
        let v = ops::dilated_conv3x3(self.value(x), self.value(kernel), dilation)?;
        self.push_op(
            "dilated_conv3x3",
            &[x, kernel],
            v,
            Box::new(move |inp, _, g| {
                let (gx, gk) = ops::dilated_conv3x3_backward(inp[0], inp[1], dilation, g);
                vec![gx, gk]
            }),
        )
    }

    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        scale: Var,
        shift: Var,
        eps: f64,
    ) -> Result<Var> {
        let (v, cache) =
            ops::group_norm(self.value(x), groups, self.value(scale), self.value(shift), eps)?;
        self.push_op(
            "group_norm",
            &[x, scale, shift],
            v,
            Box::new(move |inp, _, g| {
                let (gx, gs, gb) = ops::group_norm_backward(&cache, groups, inp[1], g);
                vec![gx, gs, gb]
            }),
        )
    }

    // ---- pooling and resampling ----

    pub fn avg_pool2x2(&mut self, x: Var) -> Result<Var> {
        let v = ops::avg_pool2x2(self.value(x))?;
        self.push_op(
            "avg_pool2x2",
            &[x],
            v,
            Box::new(|inp, _, g| vec![ops::avg_pool2x2_backward(inp[0].shape(), g)]),
        )
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = ops::global_avg_pool(self.value(x))?;
        self.push_op(
            "global_avg_pool",
            &[x],
            v,
            Box::new(|inp, _, g| {
                let shape = inp[0].shape();
                let hw = shape[1] * shape[2];
                let gx = NdArray::from_fn(shape, |i| g.data()[i / hw] / hw as f64);
                vec![gx]
            }),
        )
    }

    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (v, arg) = ops::global_max_pool(self.value(x))?;
        self.push_op("global_max_pool", &[x], v, Box::new(move |inp, _, g| {
            vec![scatter(inp[0].shape(), &arg, g)]
        }))
    }

    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let v = ops::channel_mean(self.value(x))?;
        self.push_op(
            "channel_mean",
            &[x],
            v,
            Box::new(|inp, _, g| {
                let shape = inp[0].shape();
                let (c, hw) = (shape[0], shape[1] * shape[2]);
                vec![NdArray::from_fn(shape, |i| g.data()[i % hw] / c as f64)]
            }),
        )
    }

    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (v, arg) = ops::channel_max(self.value(x))?;
        self.push_op("channel_max", &[x], v, Box::new(move |inp, _, g| {
            vec![scatter(inp[0].shape(), &arg, g)]
        }))
    }

    /// `out[i] = x[index[i]]`, zero at [`ops::GATHER_ZERO`]. Covers every
    /// pure layout change: transposes, patch tiling, padding, cropping and
    /// nearest-neighbour upsampling.
    pub fn gather(&mut self, x: Var, out_shape: &[usize], index: Arc<Vec<u32>>) -> Result<Var> {
        let src_len = self.value(x).len();
        if index.iter().any(|&i| i != ops::GATHER_ZERO && i as usize >= src_len) {
            return dim_err(format!("gather index out of range for {:?}", self.shape(x)));
        }
        let v = ops::gather(self.value(x), out_shape, &index)?;
        self.push_op(
            "gather",
            &[x],
            v,
            Box::new(move |inp, _, g| vec![ops::gather_backward(inp[0].shape(), &index, g)]),
        )
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || factor == 0 {
            return Err(Error::Parameter(format!(
                "upsample_nearest needs a [C,H,W] input and factor ≥ 1, got {shape:?} ×{factor}"
            )));
        }
        let idx = ops::upsample_index(shape[0], shape[1], shape[2], factor, out_h, out_w);
        self.gather(x, &[shape[0], out_h, out_w], Arc::new(idx))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat of nothing");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return dim_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut extents = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let same = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return dim_err(format!("concat: {s:?} incompatible with {base:?} on axis {axis}"));
            }
            extents.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &e) in parts.iter().zip(&extents) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let v = NdArray::new(&shape, data)?;
        self.push_op(
            "concat",
            parts,
            v,
            Box::new(move |inp, _, g| {
                let mut outs: Vec<Vec<f64>> =
                    extents.iter().map(|&e| Vec::with_capacity(outer * e * inner)).collect();
                let gd = g.data();
                let mut off = 0;
                for _ in 0..outer {
                    for (k, &e) in extents.iter().enumerate() {
                        outs[k].extend_from_slice(&gd[off..off + e * inner]);
                        off += e * inner;
                    }
                }
                outs.into_iter()
                    .zip(inp)
                    .map(|(d, x)| NdArray::new(x.shape(), d).unwrap())
                    .collect()
            }),
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return dim_err(format!("narrow {start}..{} on axis {axis} of {shape:?}", start + len));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ext = shape[axis];
        let mut idx = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for a in start..start + len {
                let base = (o * ext + a) * inner;
                idx.extend((base..base + inner).map(|i| i as u32));
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(x, &out_shape, Arc::new(idx))
    }

    // ---- sequence model ----

    /// Batched selective scan `x: [B, L, D]` with parameters bound as graph
    /// nodes in [`SsmParams`] field order.
    pub fn selective_scan(
        &mut self,
        x: Var,
        params: [Var; 6],
        mode: Discretization,
    ) -> Result<Var> {
        let arrays = params.map(|p| self.value(p).clone());
        let p = SsmParams::from_arrays(arrays)?;
        let (y, cache) = ssm::selective_scan_forward(&p, self.value(x), mode)?;
        let mut inputs = vec![x];
        inputs.extend(params);
        self.push_op(
            "selective_scan",
            &inputs,
            y,
            Box::new(move |inp, _, g| {
                let grads = ssm::selective_scan_backward(&p, inp[0], &cache, g, mode);
                let mut out = vec![grads.x];
                out.extend(grads.params);
                out
            }),
        )
    }

    // ---- reductions and losses ----

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = NdArray::scalar(self.value(x).sum());
        self.push_op(
            "sum",
            &[x],
            v,
            Box::new(|inp, _, g| vec![NdArray::full(inp[0].shape(), g.item())]),
        )
    }

    /// `Σ x ⊙ w` for a fixed weight array of the same shape.
    pub fn weighted_sum(&mut self, x: Var, w: Arc<NdArray>) -> Result<Var> {
        self.value(x).expect_shape(w.shape())?;
        let s = self.value(x).data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        self.push_op(
            "weighted_sum",
            &[x],
            NdArray::scalar(s),
            Box::new(move |_, _, g| vec![w.scale(g.item())]),
        )
    }

    /// Mean cross-entropy over `(pixel, class)` targets of `logits: [K,H,W]`.
    /// Classes are zero-based here.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: Arc<Vec<(usize, usize)>>) -> Result<Var> {
        let lv = self.value(logits);
        lv.expect_rank(3, "masked_cross_entropy logits")?;
        if targets.is_empty() {
            return Err(Error::Runtime("cross-entropy over an empty mask".into()));
        }
        let k = lv.dim(0);
        let hw = lv.dim(1) * lv.dim(2);
        if let Some(&(p, c)) = targets.iter().find(|&&(p, c)| p >= hw || c >= k) {
            return dim_err(format!("target (pixel {p}, class {c}) outside logits {:?}", lv.shape()));
        }
        let mut row = vec![0.0; k];
        let mut lsm = vec![0.0; k];
        let mut total = 0.0;
        for &(p, c) in targets.iter() {
            for (j, r) in row.iter_mut().enumerate() {
                *r = lv.data()[j * hw + p];
            }
            ops::log_softmax_row(&row, &mut lsm);
            total -= lsm[c];
        }
        let n = targets.len() as f64;
        self.push_op(
            "masked_cross_entropy",
            &[logits],
            NdArray::scalar(total / n),
            Box::new(move |inp, _, g| {
                let lv = inp[0];
                let mut gl = NdArray::zeros(lv.shape());
                let mut row = vec![0.0; k];
                let mut lsm = vec![0.0; k];
                let scale = g.item() / n;
                for &(p, c) in targets.iter() {
                    for (j, r) in row.iter_mut().enumerate() {
                        *r = lv.data()[j * hw + p];
                    }
                    ops::log_softmax_row(&row, &mut lsm);
                    for j in 0..k {
                        let onehot = if j == c { 1.0 } else { 0.0 };
                        gl.data_mut()[j * hw + p] += scale * (lsm[j].exp() - onehot);
                    }
                }
                vec![gl]
            }),
        )
    }
}

fn scatter(shape: &[usize], positions: &[usize], g: &NdArray) -> NdArray {
    let mut gx = NdArray::zeros(shape);
    for (&p, &gv) in positions.iter().zip(g.data()) {
        gx.data_mut()[p] += gv;
    }
    gx
}

/// For each element of an array of shape `out`, the flat index of the
/// element of a broadcast operand of shape `w` it pairs with.
pub fn broadcast_map(out: &[usize], w: &[usize]) -> Result<Vec<usize>> {
    if out.len() != w.len() || out.iter().zip(w).any(|(&o, &e)| e != o && e != 1) {
        return dim_err(format!("cannot broadcast {w:?} to {out:?}"));
    }
    let n: usize = out.iter().product();
    let mut strides = vec![0usize; w.len()];
    let mut acc = 1;
    for i in (0..w.len()).rev() {
        strides[i] = if w[i] == 1 { 0 } else { acc };
        acc *= w[i];
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok(map)
}
