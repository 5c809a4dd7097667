use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels::{self as k, EwKind};
use super::{Element, ParamId, ParamStore, Shape, Tensor};
use crate::error::TensorError;
use crate::shift::{self, ShiftSpec};

type Result<T> = std::result::Result<T, TensorError>;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// A value flowing through a forward pass, optionally linked to a tape node.
#[derive(Debug, Clone)]
pub struct Var<F: Element> {
    value: Arc<Tensor<F>>,
    node: Option<(u64, usize)>,
}

impl<F: Element> Var<F> {
    /// A value that is never differentiated.
    pub fn constant(t: Tensor<F>) -> Self {
        Self {
            value: Arc::new(t),
            node: None,
        }
    }

    pub fn value(&self) -> &Tensor<F> {
        &self.value
    }

    pub fn shared(&self) -> Arc<Tensor<F>> {
        self.value.clone()
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn detach(&self) -> Self {
        Self {
            value: self.value.clone(),
            node: None,
        }
    }

    pub fn into_tensor(self) -> Tensor<F> {
        Arc::try_unwrap(self.value).unwrap_or_else(|a| (*a).clone())
    }
}

/// Multiply counts observed while executing ops.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpStats {
    /// Weight multiplies of convolutions (1×1 and depthwise), biases excluded.
    pub conv_macs: u64,
    /// Elementwise and broadcast multiplies; informational only.
    pub elementwise_muls: u64,
}

#[derive(Debug, Clone)]
enum OpKind {
    Leaf,
    Conv1x1 { groups: usize },
    DwConv3x3,
    Down(usize),
    Up(usize),
    SpaceToChannel(usize),
    ChannelToSpace(usize),
    Gelu,
    Softplus,
    Tanh,
    Relu,
    Ln,
    PosPow(f64),
    Ew(EwKind),
    AddScalar,
    MulScalar(f64),
    ChannelMul,
    ChannelAdd,
    Concat(Vec<usize>),
    Slice { start: usize, total: usize },
    SumAll,
    MeanSpatial,
    Shift(Vec<(isize, isize)>),
    Shuffle(Vec<usize>),
    GaussianInterval(f64),
    LogisticInterval(f64),
    SepFilter(Vec<f64>),
    Crop,
}

struct Node<F: Element> {
    kind: OpKind,
    inputs: Vec<Var<F>>,
    out: Option<Arc<Tensor<F>>>,
    param: Option<ParamId>,
}

struct Inner<F: Element> {
    nodes: Vec<Node<F>>,
    consumed: bool,
    stats: OpStats,
}

/// Records primitive applications for one forward pass.
///
/// A recording tape keeps every op whose inputs reach a tracked leaf; a
/// no-grad tape records nothing, so intermediate values are freed as soon as
/// they go out of scope.
pub struct Tape<F: Element> {
    id: u64,
    recording: bool,
    inner: RefCell<Inner<F>>,
}

/// Gradients of one backward pass, keyed by leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients<F: Element> {
    tape: u64,
    leaves: HashMap<usize, Tensor<F>>,
    /// Summed over every leaf bound to the same parameter.
    params: HashMap<ParamId, Tensor<F>>,
}

impl<F: Element> Gradients<F> {
    /// Gradient with respect to a leaf created on the same tape.
    pub fn wrt(&self, v: &Var<F>) -> Option<&Tensor<F>> {
        match v.node {
            Some((t, n)) if t == self.tape => self.leaves.get(&n),
            _ => None,
        }
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params.get(&id)
    }

    /// Adds every parameter gradient into the store's `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<F>) -> Result<()> {
        for (&id, g) in &self.params {
            store.get_mut(id).grad.add_assign(g)?;
        }
        Ok(())
    }
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    pub fn no_grad() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(recording: bool) -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            recording,
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                consumed: false,
                stats: OpStats::default(),
            }),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn stats(&self) -> OpStats {
        self.inner.borrow().stats
    }

    pub fn reset_stats(&self) {
        self.inner.borrow_mut().stats = OpStats::default();
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Arc<Tensor<F>>, param: Option<ParamId>) -> Var<F> {
        if !self.recording {
            return Var { value, node: None };
        }
        let mut inner = self.inner.borrow_mut();
        let n = inner.nodes.len();
        inner.nodes.push(Node {
            kind: OpKind::Leaf,
            inputs: Vec::new(),
            out: None,
            param,
        });
        Var {
            value,
            node: Some((self.id, n)),
        }
    }

    /// Differentiable input not tied to a parameter.
    pub fn leaf(&self, t: Tensor<F>) -> Var<F> {
        self.push_leaf(Arc::new(t), None)
    }

    pub fn param(&self, store: &ParamStore<F>, id: ParamId) -> Var<F> {
        self.push_leaf(store.value(id).clone(), Some(id))
    }

    fn record(&self, kind: OpKind, inputs: Vec<Var<F>>, out: Tensor<F>, op: &'static str, keep_out: bool) -> Result<Var<F>> {
        k::check_finite(op, &out)?;
        let out = Arc::new(out);
        let tracked = inputs
            .iter()
            .any(|v| matches!(v.node, Some((t, _)) if t == self.id));
        if !self.recording || !tracked {
            return Ok(Var {
                value: out,
                node: None,
            });
        }
        let inputs = inputs
            .into_iter()
            .map(|v| match v.node {
                Some((t, _)) if t != self.id => v.detach(),
                _ => v,
            })
            .collect();
        let mut inner = self.inner.borrow_mut();
        let n = inner.nodes.len();
        inner.nodes.push(Node {
            kind,
            inputs,
            out: keep_out.then(|| out.clone()),
            param: None,
        });
        Ok(Var {
            value: out,
            node: Some((self.id, n)),
        })
    }

    fn count(&self, macs: u64, ew: u64) {
        let mut inner = self.inner.borrow_mut();
        inner.stats.conv_macs += macs;
        inner.stats.elementwise_muls += ew;
    }

    // --- convolutions -----------------------------------------------------

    pub fn conv1x1(&self, x: &Var<F>, w: &Var<F>, b: Option<&Var<F>>, groups: usize) -> Result<Var<F>> {
        let out = k::conv1x1(x.value(), w.value(), b.map(|b| b.value()), groups)?;
        let [bn, cin, h, wd] = x.shape();
        let cout = w.shape()[0];
        self.count((bn * h * wd * cout * (cin / groups)) as u64, 0);
        let mut inputs = vec![x.clone(), w.clone()];
        inputs.extend(b.cloned());
        self.record(OpKind::Conv1x1 { groups }, inputs, out, "conv1x1", false)
    }

    pub fn dwconv3x3(&self, x: &Var<F>, w: &Var<F>, b: Option<&Var<F>>) -> Result<Var<F>> {
        let out = k::depthwise_conv3x3(x.value(), w.value(), b.map(|b| b.value()))?;
        self.count(9 * x.value().numel() as u64, 0);
        let mut inputs = vec![x.clone(), w.clone()];
        inputs.extend(b.cloned());
        self.record(OpKind::DwConv3x3, inputs, out, "depthwise_conv3x3", false)
    }

    // --- resampling and rearrangement --------------------------------------

    pub fn downsample(&self, x: &Var<F>, factor: usize) -> Result<Var<F>> {
        let out = k::downsample(x.value(), factor)?;
        self.record(OpKind::Down(factor), vec![x.clone()], out, "resample_down", false)
    }

    pub fn upsample(&self, x: &Var<F>, factor: usize) -> Result<Var<F>> {
        if factor == 0 {
            return Err(TensorError::divisibility("resample_up", "factor must be positive"));
        }
        let out = k::upsample(x.value(), factor);
        self.record(OpKind::Up(factor), vec![x.clone()], out, "resample_up", false)
    }

    pub fn space_to_channel(&self, x: &Var<F>, r: usize) -> Result<Var<F>> {
        let out = k::space_to_channel(x.value(), r)?;
        self.record(OpKind::SpaceToChannel(r), vec![x.clone()], out, "space_to_channel", false)
    }

    pub fn channel_to_space(&self, x: &Var<F>, r: usize) -> Result<Var<F>> {
        let out = k::channel_to_space(x.value(), r)?;
        self.record(OpKind::ChannelToSpace(r), vec![x.clone()], out, "channel_to_space", false)
    }

    // --- pointwise ---------------------------------------------------------

    pub fn gelu(&self, x: &Var<F>) -> Result<Var<F>> {
        self.record(OpKind::Gelu, vec![x.clone()], k::gelu(x.value()), "gelu", false)
    }

    pub fn softplus(&self, x: &Var<F>) -> Result<Var<F>> {
        self.record(OpKind::Softplus, vec![x.clone()], k::softplus(x.value()), "softplus", false)
    }

    pub fn tanh(&self, x: &Var<F>) -> Result<Var<F>> {
        self.record(OpKind::Tanh, vec![x.clone()], x.value().map(|v| v.tanh()), "tanh", true)
    }

    pub fn relu(&self, x: &Var<F>) -> Result<Var<F>> {
        let out = x.value().map(|v| v.max(F::zero()));
        self.record(OpKind::Relu, vec![x.clone()], out, "relu", false)
    }

    pub fn ln(&self, x: &Var<F>) -> Result<Var<F>> {
        self.record(OpKind::Ln, vec![x.clone()], x.value().map(|v| v.ln()), "ln", false)
    }

    /// `max(x, 0)^p`.
    pub fn pos_pow(&self, x: &Var<F>, p: f64) -> Result<Var<F>> {
        let out = k::pos_pow(x.value(), p);
        self.record(OpKind::PosPow(p), vec![x.clone()], out, "pos_pow", false)
    }

    fn ew(&self, a: &Var<F>, b: &Var<F>, kind: EwKind, op: &'static str) -> Result<Var<F>> {
        let out = k::ew(a.value(), b.value(), kind)?;
        if matches!(kind, EwKind::Mul | EwKind::Div) {
            self.count(0, out.numel() as u64);
        }
        self.record(OpKind::Ew(kind), vec![a.clone(), b.clone()], out, op, false)
    }

    pub fn add(&self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        self.ew(a, b, EwKind::Add, "add")
    }

    pub fn sub(&self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        self.ew(a, b, EwKind::Sub, "sub")
    }

    pub fn mul(&self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        self.ew(a, b, EwKind::Mul, "mul")
    }

    pub fn div(&self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        self.ew(a, b, EwKind::Div, "div")
    }

    pub fn square(&self, a: &Var<F>) -> Result<Var<F>> {
        self.mul(a, a)
    }

    pub fn add_scalar(&self, x: &Var<F>, c: f64) -> Result<Var<F>> {
        let c = F::c(c);
        self.record(OpKind::AddScalar, vec![x.clone()], x.value().map(|v| v + c), "add_scalar", false)
    }

    pub fn mul_scalar(&self, x: &Var<F>, c: f64) -> Result<Var<F>> {
        let cf = F::c(c);
        self.record(OpKind::MulScalar(c), vec![x.clone()], x.value().map(|v| v * cf), "mul_scalar", false)
    }

    /// `x[n,c,i,j] · v[c]` for `v` of shape `[1,C,1,1]`.
    pub fn channel_mul(&self, x: &Var<F>, v: &Var<F>) -> Result<Var<F>> {
        let out = k::channel_broadcast(x.value(), v.value(), true)?;
        self.count(0, out.numel() as u64);
        self.record(OpKind::ChannelMul, vec![x.clone(), v.clone()], out, "channel_mul", false)
    }

    pub fn channel_add(&self, x: &Var<F>, v: &Var<F>) -> Result<Var<F>> {
        let out = k::channel_broadcast(x.value(), v.value(), false)?;
        self.record(OpKind::ChannelAdd, vec![x.clone(), v.clone()], out, "channel_add", false)
    }

    // --- channel structure -------------------------------------------------

    pub fn concat(&self, parts: &[&Var<F>]) -> Result<Var<F>> {
        let values: Vec<&Tensor<F>> = parts.iter().map(|p| p.value()).collect();
        let out = k::channel_concat(&values)?;
        let widths = parts.iter().map(|p| p.shape()[1]).collect();
        let inputs = parts.iter().map(|&p| p.clone()).collect();
        self.record(OpKind::Concat(widths), inputs, out, "channel_concat", false)
    }

    pub fn slice(&self, x: &Var<F>, start: usize, len: usize) -> Result<Var<F>> {
        let out = k::channel_slice(x.value(), start, len)?;
        let total = x.shape()[1];
        self.record(OpKind::Slice { start, total }, vec![x.clone()], out, "channel_slice", false)
    }

    /// Splits channels into `n` equal groups.
    pub fn split(&self, x: &Var<F>, n: usize) -> Result<Vec<Var<F>>> {
        let c = x.shape()[1];
        if n == 0 || !c.is_multiple_of(n) {
            return Err(TensorError::divisibility(
                "channel_split",
                format!("{c} channels into {n} groups"),
            ));
        }
        (0..n).map(|g| self.slice(x, g * c / n, c / n)).collect()
    }

    pub fn spatial_shift(&self, x: &Var<F>, spec: &ShiftSpec) -> Result<Var<F>> {
        let offsets = spec.scaled_offsets();
        let out = shift::shift_by_offsets(x.value(), &offsets)?;
        self.record(OpKind::Shift(offsets), vec![x.clone()], out, "spatial_shift", false)
    }

    pub fn channel_shuffle(&self, x: &Var<F>, groups: usize) -> Result<Var<F>> {
        let perm = shift::shuffle_permutation(x.shape()[1], groups)?;
        let out = shift::permute_channels(x.value(), &perm);
        self.record(OpKind::Shuffle(perm), vec![x.clone()], out, "channel_shuffle", false)
    }

    // --- reductions --------------------------------------------------------

    pub fn sum_all(&self, x: &Var<F>) -> Result<Var<F>> {
        let out = Tensor::scalar(x.value().sum());
        self.record(OpKind::SumAll, vec![x.clone()], out, "sum_all", false)
    }

    pub fn mean_all(&self, x: &Var<F>) -> Result<Var<F>> {
        let s = self.sum_all(x)?;
        self.mul_scalar(&s, 1.0 / x.value().numel() as f64)
    }

    pub fn mean_spatial(&self, x: &Var<F>) -> Result<Var<F>> {
        let out = k::mean_spatial(x.value());
        self.record(OpKind::MeanSpatial, vec![x.clone()], out, "mean_spatial", false)
    }

    // --- likelihoods -------------------------------------------------------

    /// Gaussian mass of `[y − ½, y + ½]`, floored.
    pub fn gaussian_interval(&self, y: &Var<F>, mu: &Var<F>, sigma: &Var<F>, floor: f64) -> Result<Var<F>> {
        let out = k::gaussian_interval(y.value(), mu.value(), sigma.value(), floor)?;
        self.record(
            OpKind::GaussianInterval(floor),
            vec![y.clone(), mu.clone(), sigma.clone()],
            out,
            "gaussian_interval",
            false,
        )
    }

    /// `sigmoid(upper) − sigmoid(lower)`, floored.
    pub fn logistic_interval(&self, lower: &Var<F>, upper: &Var<F>, floor: f64) -> Result<Var<F>> {
        let out = k::logistic_interval(lower.value(), upper.value(), floor)?;
        self.record(
            OpKind::LogisticInterval(floor),
            vec![lower.clone(), upper.clone()],
            out,
            "logistic_interval",
            false,
        )
    }

    // --- image-quality helpers ----------------------------------------------

    pub fn sep_filter_valid(&self, x: &Var<F>, taps: &[f64]) -> Result<Var<F>> {
        let out = k::sep_filter_valid(x.value(), taps)?;
        self.record(OpKind::SepFilter(taps.to_vec()), vec![x.clone()], out, "sep_filter_valid", false)
    }

    pub fn crop(&self, x: &Var<F>, h: usize, w: usize) -> Result<Var<F>> {
        let out = k::crop(x.value(), h, w)?;
        self.record(OpKind::Crop, vec![x.clone()], out, "crop", false)
    }

    // --- backward ------------------------------------------------------------

    /// Reverse pass from a scalar loss. The tape is consumed.
    pub fn backward(&self, loss: &Var<F>) -> Result<Gradients<F>> {
        if loss.shape() != [1, 1, 1, 1] {
            return Err(TensorError::NotScalar(loss.shape()));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(TensorError::Consumed);
        }
        let root = match loss.node {
            Some((t, n)) if t == self.id => n,
            _ => return Err(TensorError::NotRecorded),
        };
        inner.consumed = true;
        let mut nodes = std::mem::take(&mut inner.nodes);
        drop(inner);

        let mut grads: Vec<Option<Tensor<F>>> = vec![None; nodes.len()];
        grads[root] = Some(Tensor::scalar(F::one()));
        let mut out = Gradients {
            tape: self.id,
            leaves: HashMap::new(),
            params: HashMap::new(),
        };
        for n in (0..=root).rev() {
            let node = std::mem::replace(
                &mut nodes[n],
                Node {
                    kind: OpKind::Leaf,
                    inputs: Vec::new(),
                    out: None,
                    param: None,
                },
            );
            let Some(dy) = grads[n].take() else { continue };
            if let OpKind::Leaf = node.kind {
                if let Some(p) = node.param {
                    match out.params.get_mut(&p) {
                        Some(g) => g.add_assign(&dy)?,
                        None => {
                            out.params.insert(p, dy.clone());
                        }
                    }
                }
                out.leaves.insert(n, dy);
                continue;
            }
            let dxs = input_grads(&node, &dy);
            for (input, dx) in node.inputs.iter().zip(dxs) {
                let (Some((_, i)), Some(dx)) = (input.node, dx) else { continue };
                match &mut grads[i] {
                    Some(g) => g.add_assign(&dx)?,
                    slot => *slot = Some(dx),
                }
            }
        }
        Ok(out)
    }
}

fn neg<F: Element>(t: &Tensor<F>) -> Tensor<F> {
    t.map(|v| -v)
}

fn input_grads<F: Element>(node: &Node<F>, dy: &Tensor<F>) -> Vec<Option<Tensor<F>>> {
    let x = |i: usize| node.inputs[i].value();
    let need = |i: usize| node.inputs[i].node.is_some();
    match &node.kind {
        OpKind::Leaf => Vec::new(),
        OpKind::Conv1x1 { groups } => {
            let (dx, dw, db) = k::conv1x1_backward(x(0), x(1), *groups, dy, need(0));
            vec![dx, Some(dw), Some(db)]
        }
        OpKind::DwConv3x3 => {
            let (dx, dw, db) = k::depthwise_conv3x3_backward(x(0), x(1), dy, need(0));
            vec![dx, Some(dw), Some(db)]
        }
        OpKind::Down(f) => vec![Some(k::downsample_backward(dy, *f))],
        OpKind::Up(f) => vec![Some(k::upsample_backward(dy, *f))],
        OpKind::SpaceToChannel(r) => vec![k::channel_to_space(dy, *r).ok()],
        OpKind::ChannelToSpace(r) => vec![k::space_to_channel(dy, *r).ok()],
        OpKind::Gelu => vec![Some(k::gelu_backward(x(0), dy))],
        OpKind::Softplus => vec![Some(k::softplus_backward(x(0), dy))],
        OpKind::Tanh => vec![node.out.as_ref().map(|y| k::tanh_backward(y, dy))],
        OpKind::Relu => vec![Some(k::relu_backward(x(0), dy))],
        OpKind::Ln => vec![Some(k::zip_map(x(0), dy, |v, g| g / v))],
        OpKind::PosPow(p) => vec![Some(k::pos_pow_backward(x(0), *p, dy))],
        OpKind::Ew(kind) => match kind {
            EwKind::Add => vec![Some(dy.clone()), Some(dy.clone())],
            EwKind::Sub => vec![Some(dy.clone()), Some(neg(dy))],
            EwKind::Mul => vec![
                need(0).then(|| k::zip_map(dy, x(1), |g, b| g * b)),
                need(1).then(|| k::zip_map(dy, x(0), |g, a| g * a)),
            ],
            EwKind::Div => {
                let da = k::zip_map(dy, x(1), |g, b| g / b);
                let db = need(1).then(|| {
                    let t = k::zip_map(&da, x(0), |q, a| q * a);
                    k::zip_map(&t, x(1), |q, b| -q / b)
                });
                vec![Some(da), db]
            }
        },
        OpKind::AddScalar => vec![Some(dy.clone())],
        OpKind::MulScalar(c) => {
            let c = F::c(*c);
            vec![Some(dy.map(|g| g * c))]
        }
        OpKind::ChannelMul => vec![
            need(0).then(|| k::channel_broadcast(dy, x(1), true).expect("shapes recorded")),
            need(1).then(|| k::channel_reduce(dy, Some(x(0)))),
        ],
        OpKind::ChannelAdd => vec![Some(dy.clone()), need(1).then(|| k::channel_reduce(dy, None))],
        OpKind::Concat(widths) => {
            let mut start = 0;
            widths
                .iter()
                .enumerate()
                .map(|(i, &w)| {
                    let s = start;
                    start += w;
                    need(i).then(|| k::channel_slice(dy, s, w).expect("shapes recorded"))
                })
                .collect()
        }
        OpKind::Slice { start, total } => {
            let [bn, _, h, w] = dy.shape();
            let mut dx = Tensor::zeros([bn, *total, h, w]);
            k::channel_slice_accumulate(&mut dx, dy, *start);
            vec![Some(dx)]
        }
        OpKind::SumAll => vec![Some(Tensor::full(x(0).shape(), dy.data()[0]))],
        OpKind::MeanSpatial => vec![Some(k::mean_spatial_backward(x(0).shape(), dy))],
        OpKind::Shift(offsets) => {
            let inv: Vec<_> = offsets.iter().map(|&(a, b)| (-a, -b)).collect();
            vec![shift::shift_by_offsets(dy, &inv).ok()]
        }
        OpKind::Shuffle(perm) => vec![Some(shift::unpermute_channels(dy, perm))],
        OpKind::GaussianInterval(floor) => {
            let (gy, gm, gs) = k::gaussian_interval_backward(x(0), x(1), x(2), *floor, dy);
            vec![Some(gy), Some(gm), Some(gs)]
        }
        OpKind::LogisticInterval(floor) => {
            let (gl, gu) = k::logistic_interval_backward(x(0), x(1), *floor, dy);
            vec![Some(gl), Some(gu)]
        }
        OpKind::SepFilter(taps) => vec![Some(k::sep_filter_valid_backward(x(0).shape(), taps, dy))],
        OpKind::Crop => vec![Some(k::crop_backward(x(0).shape(), dy))],
    }
}
