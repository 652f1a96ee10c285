//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A `Graph` owns an arena of tensor values. Each primitive appends its
//! output to the arena and, when the graph is recording, an `Op` describing
//! how it was produced. `grad` replays the records backwards, accumulating
//! vector-Jacobian products into the marked leaves. Inference passes use
//! `Graph::eval()`, which executes the same primitives without recording.

use crate::error::{Error, Result};
use crate::tensor::{self, fmt_shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Matmul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Reshape { x: NodeId },
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize },
    BroadcastLast { x: NodeId, n: usize },
    SumAxis { x: NodeId, axis: usize },
    MeanAxis { x: NodeId, axis: usize },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    Exp { x: NodeId },
    Ln { x: NodeId },
    Sqrt { x: NodeId },
    Pow { x: NodeId, p: f64 },
    Abs { x: NodeId },
    Scale { x: NodeId, c: f64 },
    Silu { x: NodeId },
    GeluTanh { x: NodeId },
    SoftmaxLast { x: NodeId },
    LayerNormLast { x: NodeId },
    CosineSimLast { a: NodeId, b: NodeId },
}

struct Record {
    out: NodeId,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    vals: Vec<Tensor>,
    leaf: Vec<bool>,
    records: Vec<Record>,
    recording: bool,
    /// Cosine-similarity slots zeroed by the norm floor during this graph's
    /// lifetime; surfaced by the objectives layer as a warning counter.
    pub degenerate_cosine_slots: usize,
}

/// Gradients keyed by leaf node. Leaves that do not influence the loss map
/// to exact zeros.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    /// A recording graph, ready for `grad`.
    pub fn new() -> Graph {
        Graph {
            recording: true,
            ..Default::default()
        }
    }

    /// Inference mode: primitives execute but nothing is recorded, so
    /// `grad` is unavailable and outputs are plain constants.
    pub fn eval() -> Graph {
        Graph {
            recording: false,
            ..Default::default()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    fn push(&mut self, t: Tensor, is_leaf: bool) -> NodeId {
        let id = NodeId(self.vals.len());
        self.vals.push(t);
        self.leaf.push(is_leaf);
        id
    }

    fn push_op(&mut self, t: Tensor, op: Op) -> NodeId {
        let out = self.push(t, false);
        if self.recording {
            self.records.push(Record { out, op });
        }
        out
    }

    pub fn input(&mut self, t: Tensor) -> Result<NodeId> {
        if !t.is_finite() {
            return Err(Error::NonFinite("graph input".into()));
        }
        Ok(self.push(t, false))
    }

    /// Register a trainable parameter.
    pub fn leaf(&mut self, t: Tensor) -> Result<NodeId> {
        if !t.is_finite() {
            return Err(Error::NonFinite("graph leaf".into()));
        }
        Ok(self.push(t, true))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.vals[id.0]
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.vals[id.0].item()
    }

    // ── primitives ──────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = tensor::add(&self.vals[a.0], &self.vals[b.0])?;
        Ok(self.push_op(t, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = tensor::sub(&self.vals[a.0], &self.vals[b.0])?;
        Ok(self.push_op(t, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = tensor::mul(&self.vals[a.0], &self.vals[b.0])?;
        Ok(self.push_op(t, Op::Mul { a, b }))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = tensor::div(&self.vals[a.0], &self.vals[b.0])?;
        Ok(self.push_op(t, Op::Div { a, b }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = tensor::matmul(&self.vals[a.0], &self.vals[b.0])?;
        Ok(self.push_op(t, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let t = tensor::transpose(&self.vals[x.0])?;
        Ok(self.push_op(t, Op::Transpose { x }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = tensor::reshape(&self.vals[x.0], shape)?;
        Ok(self.push_op(t, Op::Reshape { x }))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| &self.vals[p.0]).collect();
        let t = tensor::concat(&refs, axis)?;
        Ok(self.push_op(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let t = tensor::slice(&self.vals[x.0], axis, start, len)?;
        Ok(self.push_op(t, Op::Slice { x, axis, start }))
    }

    pub fn broadcast_last(&mut self, x: NodeId, n: usize) -> Result<NodeId> {
        let t = tensor::broadcast_last(&self.vals[x.0], n)?;
        Ok(self.push_op(t, Op::BroadcastLast { x, n }))
    }

    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let t = tensor::sum_axis(&self.vals[x.0], axis)?;
        Ok(self.push_op(t, Op::SumAxis { x, axis }))
    }

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let t = tensor::mean_axis(&self.vals[x.0], axis)?;
        Ok(self.push_op(t, Op::MeanAxis { x, axis }))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let t = tensor::sum_all(&self.vals[x.0]);
        self.push_op(t, Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let t = tensor::mean_all(&self.vals[x.0]);
        self.push_op(t, Op::MeanAll { x })
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let t = tensor::exp(&self.vals[x.0]);
        self.push_op(t, Op::Exp { x })
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        let t = tensor::ln(&self.vals[x.0])?;
        Ok(self.push_op(t, Op::Ln { x }))
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        let t = tensor::sqrt(&self.vals[x.0])?;
        Ok(self.push_op(t, Op::Sqrt { x }))
    }

    pub fn powf(&mut self, x: NodeId, p: f64) -> Result<NodeId> {
        let t = tensor::powf(&self.vals[x.0], p)?;
        Ok(self.push_op(t, Op::Pow { x, p }))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let t = tensor::abs(&self.vals[x.0]);
        self.push_op(t, Op::Abs { x })
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let t = tensor::scale(&self.vals[x.0], c);
        self.push_op(t, Op::Scale { x, c })
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let t = tensor::silu(&self.vals[x.0]);
        self.push_op(t, Op::Silu { x })
    }

    pub fn gelu_tanh(&mut self, x: NodeId) -> NodeId {
        let t = tensor::gelu_tanh(&self.vals[x.0]);
        self.push_op(t, Op::GeluTanh { x })
    }

    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let t = tensor::softmax_last(&self.vals[x.0]);
        self.push_op(t, Op::SoftmaxLast { x })
    }

    pub fn layernorm_last(&mut self, x: NodeId) -> NodeId {
        let t = tensor::layernorm_last(&self.vals[x.0]);
        self.push_op(t, Op::LayerNormLast { x })
    }

    pub fn cosine_sim_last(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (t, degenerate) = tensor::cosine_sim_last(&self.vals[a.0], &self.vals[b.0])?;
        self.degenerate_cosine_slots += degenerate;
        Ok(self.push_op(t, Op::CosineSimLast { a, b }))
    }

    // ── backward ────────────────────────────────────────────────────

    /// d(loss)/d(param) for each listed leaf. The loss must be a scalar
    /// produced by this graph while recording; every param must be a leaf.
    pub fn grad(&self, loss: NodeId, params: &[NodeId]) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::InvalidArg(
                "grad on a non-recording graph".into(),
            ));
        }
        if self.vals[loss.0].numel() != 1 {
            return Err(Error::InvalidArg(format!(
                "loss must be scalar, got shape {}",
                fmt_shape(self.vals[loss.0].shape())
            )));
        }
        for p in params {
            if !self.leaf.get(p.0).copied().unwrap_or(false) {
                return Err(Error::InvalidArg(format!(
                    "node {} is not a registered leaf",
                    p.0
                )));
            }
        }

        let mut adj: Vec<Option<Tensor>> = vec![None; self.vals.len()];
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for rec in self.records.iter().rev() {
            let g = match adj[rec.out.0].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_op(&rec.op, rec.out, &g, &mut adj)?;
            // keep the loss's own adjoint visible if it is also an output
            if rec.out == loss {
                adj[loss.0] = Some(g);
            }
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.vals.len()];
        for p in params {
            let g = match adj[p.0].take() {
                Some(g) => g,
                None => Tensor::zeros(self.vals[p.0].shape()),
            };
            grads[p.0] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
        match &mut adj[id.0] {
            Some(existing) => {
                debug_assert_eq!(existing.shape(), g.shape());
                for (e, &gv) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += gv;
                }
            }
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn backprop_op(
        &self,
        op: &Op,
        out: NodeId,
        g: &Tensor,
        adj: &mut [Option<Tensor>],
    ) -> Result<()> {
        let val = |id: NodeId| &self.vals[id.0];
        match *op {
            Op::Add { a, b } => {
                self.accum(adj, a, tensor::unbroadcast(g, val(a).shape()))?;
                self.accum(adj, b, tensor::unbroadcast(g, val(b).shape()))?;
            }
            Op::Sub { a, b } => {
                self.accum(adj, a, tensor::unbroadcast(g, val(a).shape()))?;
                self.accum(
                    adj,
                    b,
                    tensor::scale(&tensor::unbroadcast(g, val(b).shape()), -1.0),
                )?;
            }
            Op::Mul { a, b } => {
                let ga = tensor::unbroadcast(&tensor::mul(g, val(b))?, val(a).shape());
                let gb = tensor::unbroadcast(&tensor::mul(g, val(a))?, val(b).shape());
                self.accum(adj, a, ga)?;
                self.accum(adj, b, gb)?;
            }
            Op::Div { a, b } => {
                let ga_full = tensor::div(g, val(b))?;
                self.accum(adj, a, tensor::unbroadcast(&ga_full, val(a).shape()))?;
                let gb_full = tensor::mul(&tensor::div(val(out), val(b))?, g)?;
                self.accum(
                    adj,
                    b,
                    tensor::scale(&tensor::unbroadcast(&gb_full, val(b).shape()), -1.0),
                )?;
            }
            Op::Matmul { a, b } => {
                // dA = g @ Bᵀ; dB = Aᵀ @ g, summed over the batch when B is shared.
                let bt = tensor::transpose(val(b))?;
                let ga = tensor::matmul(g, &bt)?;
                self.accum(adj, a, ga)?;
                let at = tensor::transpose(val(a))?;
                let gb_full = tensor::matmul(&at, g)?;
                let gb = if val(b).rank() == 2 && val(a).rank() > 2 {
                    let k = val(b).shape()[0];
                    let n = val(b).shape()[1];
                    let batched = tensor::reshape(&gb_full, vec![gb_full.numel() / (k * n), k, n])?;
                    tensor::sum_axis(&batched, 0)?
                } else {
                    gb_full
                };
                self.accum(adj, b, gb)?;
            }
            Op::Transpose { x } => {
                self.accum(adj, x, tensor::transpose(g)?)?;
            }
            Op::Reshape { x } => {
                self.accum(adj, x, tensor::reshape(g, val(x).shape().to_vec())?)?;
            }
            Op::Concat { ref parts, axis } => {
                let mut start = 0;
                for p in parts {
                    let len = val(*p).shape()[axis];
                    self.accum(adj, *p, tensor::slice(g, axis, start, len)?)?;
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let orig = val(x).shape()[axis];
                self.accum(adj, x, tensor::slice_scatter(g, axis, start, orig)?)?;
            }
            Op::BroadcastLast { x, n: _ } => {
                let last = g.rank() - 1;
                self.accum(adj, x, tensor::sum_axis(g, last)?)?;
            }
            Op::SumAxis { x, axis } => {
                let extent = val(x).shape()[axis];
                self.accum(adj, x, tensor::expand_axis(g, axis, extent)?)?;
            }
            Op::MeanAxis { x, axis } => {
                let extent = val(x).shape()[axis];
                let gx = tensor::scale(&tensor::expand_axis(g, axis, extent)?, 1.0 / extent as f64);
                self.accum(adj, x, gx)?;
            }
            Op::SumAll { x } => {
                self.accum(adj, x, Tensor::full(val(x).shape(), g.item()))?;
            }
            Op::MeanAll { x } => {
                let c = g.item() / val(x).numel() as f64;
                self.accum(adj, x, Tensor::full(val(x).shape(), c))?;
            }
            Op::Exp { x } => {
                self.accum(adj, x, tensor::mul(g, val(out))?)?;
            }
            Op::Ln { x } => {
                self.accum(adj, x, tensor::div(g, val(x))?)?;
            }
            Op::Sqrt { x } => {
                let gx = tensor::div(&tensor::scale(g, 0.5), val(out))?;
                self.accum(adj, x, gx)?;
            }
            Op::Pow { x, p } => {
                let dx = val(x).map(|v| p * v.powf(p - 1.0));
                self.accum(adj, x, tensor::mul(g, &dx)?)?;
            }
            Op::Abs { x } => {
                let s = val(x).map(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.accum(adj, x, tensor::mul(g, &s)?)?;
            }
            Op::Scale { x, c } => {
                self.accum(adj, x, tensor::scale(g, c))?;
            }
            Op::Silu { x } => {
                let d = val(x).map(|v| {
                    let s = 1.0 / (1.0 + (-v).exp());
                    s * (1.0 + v * (1.0 - s))
                });
                self.accum(adj, x, tensor::mul(g, &d)?)?;
            }
            Op::GeluTanh { x } => {
                const C: f64 = 0.797_884_560_802_865_4;
                const A: f64 = 0.044_715;
                let d = val(x).map(|v| {
                    let u = C * (v + A * v * v * v);
                    let th = tensor::fast_tanh(u);
                    let sech2 = 1.0 - th * th;
                    0.5 * (1.0 + th) + 0.5 * v * sech2 * C * (1.0 + 3.0 * A * v * v)
                });
                self.accum(adj, x, tensor::mul(g, &d)?)?;
            }
            Op::SoftmaxLast { x } => {
                // dX = y ⊙ (g − Σ_last(g ⊙ y))
                let y = val(out);
                let gy = tensor::mul(g, y)?;
                let last = y.rank().saturating_sub(1);
                let s = tensor::sum_axis(&gy, last)?;
                let s_exp = tensor::expand_axis(&s, last, y.shape()[last])?;
                let gx = tensor::mul(y, &tensor::sub(g, &s_exp)?)?;
                self.accum(adj, x, gx)?;
            }
            Op::LayerNormLast { x } => {
                // x̂ = (x−μ)/s with s = sqrt(var+eps):
                // dX = (g − mean(g) − x̂·mean(g⊙x̂)) / s
                let xv = val(x);
                let n = xv.last_dim();
                let xh = val(out);
                let mut gx = vec![0.0; xv.numel()];
                for r in 0..xv.numel() / n {
                    let xs = &xv.data()[r * n..(r + 1) * n];
                    let hs = &xh.data()[r * n..(r + 1) * n];
                    let gs = &g.data()[r * n..(r + 1) * n];
                    let mean = xs.iter().sum::<f64>() / n as f64;
                    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + tensor::LAYERNORM_EPS).sqrt();
                    let g_mean = gs.iter().sum::<f64>() / n as f64;
                    let gh_mean = gs.iter().zip(hs).map(|(&a, &b)| a * b).sum::<f64>() / n as f64;
                    for i in 0..n {
                        gx[r * n + i] = (gs[i] - g_mean - hs[i] * gh_mean) * inv;
                    }
                }
                self.accum(adj, x, Tensor::new(xv.shape().to_vec(), gx)?)?;
            }
            Op::CosineSimLast { a, b } => {
                // dcos/da = b/(‖a‖‖b‖) − cos·a/‖a‖², symmetric in b.
                let av = val(a);
                let bv = val(b);
                let cv = val(out);
                let n = av.last_dim();
                let mut ga = vec![0.0; av.numel()];
                let mut gb = vec![0.0; bv.numel()];
                for r in 0..av.numel() / n {
                    let xs = &av.data()[r * n..(r + 1) * n];
                    let ys = &bv.data()[r * n..(r + 1) * n];
                    let na = xs.iter().map(|&v| v * v).sum::<f64>().sqrt();
                    let nb = ys.iter().map(|&v| v * v).sum::<f64>().sqrt();
                    if na < tensor::COSINE_NORM_FLOOR || nb < tensor::COSINE_NORM_FLOOR {
                        continue; // guarded slot: zero output, zero gradient
                    }
                    let c = cv.data()[r];
                    let gr = g.data()[r];
                    for i in 0..n {
                        ga[r * n + i] = gr * (ys[i] / (na * nb) - c * xs[i] / (na * na));
                        gb[r * n + i] = gr * (xs[i] / (na * nb) - c * ys[i] / (nb * nb));
                    }
                }
                self.accum(adj, a, Tensor::new(av.shape().to_vec(), ga)?)?;
                self.accum(adj, b, Tensor::new(bv.shape().to_vec(), gb)?)?;
            }
        }
        Ok(())
    }

    /// Re-execute every record from the stored operand values and compare
    /// outputs bit for bit. The tape is the forward pass.
    pub fn replay_check(&self) -> Result<bool> {
        for rec in &self.records {
            let v = |id: NodeId| &self.vals[id.0];
            let recomputed = match rec.op {
                Op::Add { a, b } => tensor::add(v(a), v(b))?,
                Op::Sub { a, b } => tensor::sub(v(a), v(b))?,
                Op::Mul { a, b } => tensor::mul(v(a), v(b))?,
                Op::Div { a, b } => tensor::div(v(a), v(b))?,
                Op::Matmul { a, b } => tensor::matmul(v(a), v(b))?,
                Op::Transpose { x } => tensor::transpose(v(x))?,
                Op::Reshape { x: _ } => self.vals[rec.out.0].clone(),
                Op::Concat { ref parts, axis } => {
                    let refs: Vec<&Tensor> = parts.iter().map(|p| v(*p)).collect();
                    tensor::concat(&refs, axis)?
                }
                Op::Slice { x, axis, start } => {
                    let len = self.vals[rec.out.0].shape()[axis];
                    tensor::slice(v(x), axis, start, len)?
                }
                Op::BroadcastLast { x, n } => tensor::broadcast_last(v(x), n)?,
                Op::SumAxis { x, axis } => tensor::sum_axis(v(x), axis)?,
                Op::MeanAxis { x, axis } => tensor::mean_axis(v(x), axis)?,
                Op::SumAll { x } => tensor::sum_all(v(x)),
                Op::MeanAll { x } => tensor::mean_all(v(x)),
                Op::Exp { x } => tensor::exp(v(x)),
                Op::Ln { x } => tensor::ln(v(x))?,
                Op::Sqrt { x } => tensor::sqrt(v(x))?,
                Op::Pow { x, p } => tensor::powf(v(x), p)?,
                Op::Abs { x } => tensor::abs(v(x)),
                Op::Scale { x, c } => tensor::scale(v(x), c),
                Op::Silu { x } => tensor::silu(v(x)),
                Op::GeluTanh { x } => tensor::gelu_tanh(v(x)),
                Op::SoftmaxLast { x } => tensor::softmax_last(v(x)),
                Op::LayerNormLast { x } => tensor::layernorm_last(v(x)),
                Op::CosineSimLast { a, b } => tensor::cosine_sim_last(v(a), v(b))?.0,
            };
            if recomputed.data() != self.vals[rec.out.0].data() {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

const FD_FLOOR: f64 = 1e-12;

/// Max relative error between analytic gradients and central finite
/// differences of `loss_fn` over every coordinate of every param.
///
/// `loss_fn` must be deterministic (checked with two base evaluations) and
/// build a scalar loss from the leaves it is handed.
pub fn finite_diff_check<F>(loss_fn: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let coords: Vec<Vec<usize>> = params.iter().map(|p| (0..p.numel()).collect()).collect();
    finite_diff_check_coords(loss_fn, params, eps, &coords)
}

/// As `finite_diff_check`, but only over the listed coordinates per param.
/// Used where a full sweep is too expensive; the analytic gradient is still
/// computed for every coordinate.
pub fn finite_diff_check_coords<F>(
    loss_fn: F,
    params: &[Tensor],
    eps: f64,
    coords: &[Vec<usize>],
) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArg("finite-difference eps must be > 0".into()));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::eval();
        let ids: Vec<NodeId> = ps
            .iter()
            .map(|p| g.leaf(p.clone()))
            .collect::<Result<_>>()?;
        let loss = loss_fn(&mut g, &ids)?;
        Ok(g.scalar_value(loss))
    };

    let base1 = eval(params)?;
    let base2 = eval(params)?;
    if base1.to_bits() != base2.to_bits() {
        return Err(Error::Numerical(
            "loss_fn is not deterministic: two evaluations differ".into(),
        ));
    }

    let mut g = Graph::new();
    let ids: Vec<NodeId> = params
        .iter()
        .map(|p| g.leaf(p.clone()))
        .collect::<Result<_>>()?;
    let loss = loss_fn(&mut g, &ids)?;
    let grads = g.grad(loss, &ids)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, param_coords) in coords.iter().enumerate() {
        for &ci in param_coords {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[ci] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            let fd = (up - down) / (2.0 * eps);
            let analytic = grads.get(ids[pi]).expect("param gradient").data()[ci];
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(FD_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Philox;

    fn randn(rng: &mut Philox, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn square_gradient() {
        // loss = x*x at x=3 → grad 6
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        let loss = g.sum_all(y);
        let grads = g.grad(loss, &[x]).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn self_cosine_gradient_is_zero() {
        let mut g = Graph::new();
        let u = g
            .leaf(Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap())
            .unwrap();
        let c = g.cosine_sim_last(u, u).unwrap();
        assert!((g.value(c).item() - 1.0).abs() < 1e-15);
        let loss = g.sum_all(c);
        let grads = g.grad(loss, &[u]).unwrap();
        for &v in grads.get(u).unwrap().data() {
            assert!(v.abs() < 1e-15, "{v}");
        }
    }

    #[test]
    fn disconnected_leaf_gets_exact_zeros() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0)).unwrap();
        let unused = g.leaf(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()).unwrap();
        let y = g.mul(x, x).unwrap();
        let loss = g.sum_all(y);
        let grads = g.grad(loss, &[x, unused]).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let y = g.mul(x, x).unwrap();
        assert!(g.grad(y, &[x]).is_err());
    }

    #[test]
    fn non_leaf_param_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        let loss = g.sum_all(y);
        assert!(g.grad(loss, &[y]).is_err());
    }

    #[test]
    fn least_squares_matches_finite_differences() {
        // loss = mean((A·x − b)²) with random A (4×3), x, b
        let mut rng = Philox::seed(11);
        let a = randn(&mut rng, &[4, 3]);
        let x0 = randn(&mut rng, &[3, 1]);
        let b = randn(&mut rng, &[4, 1]);
        let err = finite_diff_check(
            |g, ids| {
                let a_in = g.input(a.clone())?;
                let b_in = g.input(b.clone())?;
                let ax = g.matmul(a_in, ids[0])?;
                let r = g.sub(ax, b_in)?;
                let r2 = g.mul(r, r)?;
                Ok(g.mean_all(r2))
            },
            &[x0],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn sum_exp_closed_form() {
        let x = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let err = finite_diff_check(
            |g, ids| {
                let e = g.exp(ids[0]);
                Ok(g.sum_all(e))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = finite_diff_check(
            |g, _ids| g.input(Tensor::scalar(5.0)),
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_is_linear_in_the_loss() {
        let mut rng = Philox::seed(3);
        let x = randn(&mut rng, &[5]);
        let w = randn(&mut rng, &[5]);
        let (a, b) = (2.5, -0.75);

        let run = |ca: f64, cb: f64| -> Vec<f64> {
            let mut g = Graph::new();
            let xi = g.leaf(x.clone()).unwrap();
            let wi = g.input(w.clone()).unwrap();
            // L1 = sum(x ⊙ w), L2 = sum(x²)
            let xw = g.mul(xi, wi).unwrap();
            let l1 = g.sum_all(xw);
            let x2 = g.mul(xi, xi).unwrap();
            let l2 = g.sum_all(x2);
            let s1 = g.scale(l1, ca);
            let s2 = g.scale(l2, cb);
            let loss = g.add(s1, s2).unwrap();
            let grads = g.grad(loss, &[xi]).unwrap();
            grads.get(xi).unwrap().data().to_vec()
        };

        let ga = run(1.0, 0.0);
        let gb = run(0.0, 1.0);
        let gab = run(a, b);
        for i in 0..5 {
            assert!((gab[i] - (a * ga[i] + b * gb[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn replay_reproduces_forward() {
        let mut rng = Philox::seed(5);
        let x = randn(&mut rng, &[4, 4]);
        let w = randn(&mut rng, &[4, 4]);
        let mut g = Graph::new();
        let xi = g.leaf(x).unwrap();
        let wi = g.leaf(w).unwrap();
        let y = g.matmul(xi, wi).unwrap();
        let s = g.softmax_last(y);
        let n = g.layernorm_last(s);
        let _ = g.mean_all(n);
        assert!(g.replay_check().unwrap());
    }

    #[test]
    fn eval_mode_records_nothing_and_rejects_grad() {
        let mut g = Graph::eval();
        let x = g.leaf(Tensor::scalar(2.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.num_records(), 0);
        let loss = g.sum_all(y);
        assert!(g.grad(loss, &[x]).is_err());
    }

    #[test]
    fn nondeterministic_loss_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0u32);
        let x = Tensor::scalar(1.0);
        let r = finite_diff_check(
            |g, _ids| {
                calls.set(calls.get() + 1);
                g.input(Tensor::scalar(calls.get() as f64))
            },
            &[x],
            1e-5,
        );
        assert!(r.is_err());
    }

    /// Finite-difference sweep over every primitive with a registered
    /// adjoint: 100 random trials each, error < 1e-5.
    #[test]
    fn every_primitive_passes_finite_differences() {
        let trials = 100;
        let mut rng = Philox::seed(2024);
        let mut failures: Vec<(String, f64)> = Vec::new();

        for trial in 0..trials {
            let seed_off = trial as u64;
            let mut r = rng.split();
            let _ = seed_off;

            // strictly positive input, bounded away from 0, for ln/sqrt/div/pow
            let pos = |rng: &mut Philox, shape: &[usize]| {
                let n: usize = shape.iter().product();
                Tensor::new(
                    shape.to_vec(),
                    (0..n).map(|_| rng.uniform_in(0.4, 2.2)).collect(),
                )
                .unwrap()
            };
            // values bounded away from 0 for abs
            let nonzero = |rng: &mut Philox, shape: &[usize]| {
                let n: usize = shape.iter().product();
                Tensor::new(
                    shape.to_vec(),
                    (0..n)
                        .map(|_| {
                            let v = rng.uniform_in(0.1, 1.5);
                            if rng.uniform() < 0.5 {
                                -v
                            } else {
                                v
                            }
                        })
                        .collect(),
                )
                .unwrap()
            };

            type Case = (
                &'static str,
                Vec<Tensor>,
                Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>,
            );
            let cases: Vec<Case> = vec![
                ("add", vec![randn(&mut r, &[2, 3]), randn(&mut r, &[3])], {
                    Box::new(|g, ids| {
                        let y = g.add(ids[0], ids[1])?;
                        let y2 = g.mul(y, y)?;
                        Ok(g.mean_all(y2))
                    })
                }),
                ("subtract", vec![randn(&mut r, &[2, 3]), randn(&mut r, &[2, 3])], {
                    Box::new(|g, ids| {
                        let y = g.sub(ids[0], ids[1])?;
                        let y2 = g.mul(y, y)?;
                        Ok(g.mean_all(y2))
                    })
                }),
                ("multiply", vec![randn(&mut r, &[2, 3]), randn(&mut r, &[2, 3])], {
                    Box::new(|g, ids| {
                        let y = g.mul(ids[0], ids[1])?;
                        Ok(g.sum_all(y))
                    })
                }),
                ("divide", vec![randn(&mut r, &[2, 3]), pos(&mut r, &[2, 3])], {
                    Box::new(|g, ids| {
                        let y = g.div(ids[0], ids[1])?;
                        Ok(g.mean_all(y))
                    })
                }),
                ("matmul", vec![randn(&mut r, &[2, 3, 4]), randn(&mut r, &[4, 2])], {
                    Box::new(|g, ids| {
                        let y = g.matmul(ids[0], ids[1])?;
                        let y2 = g.mul(y, y)?;
                        Ok(g.mean_all(y2))
                    })
                }),
                ("transpose", vec![randn(&mut r, &[3, 4])], {
                    Box::new(|g, ids| {
                        let y = g.transpose(ids[0])?;
                        let y2 = g.mul(y, y)?;
                        Ok(g.sum_all(y2))
                    })
                }),
                ("reshape", vec![randn(&mut r, &[2, 6])], {
                    Box::new(|g, ids| {
                        let y = g.reshape(ids[0], vec![3, 4])?;
                        let s = g.softmax_last(y);
                        let s2 = g.mul(s, s)?;
                        Ok(g.sum_all(s2))
                    })
                }),
                ("concat", vec![randn(&mut r, &[2, 2]), randn(&mut r, &[2, 3])], {
                    Box::new(|g, ids| {
                        let y = g.concat(&[ids[0], ids[1]], 1)?;
                        let sm = g.softmax_last(y);
                        let y2 = g.mul(sm, sm)?;
                        Ok(g.sum_all(y2))
                    })
                }),
                ("slice", vec![randn(&mut r, &[3, 5])], {
                    Box::new(|g, ids| {
                        let y = g.slice(ids[0], 1, 1, 3)?;
                        let y2 = g.mul(y, y)?;
                        Ok(g.sum_all(y2))
                    })
                }),
                ("broadcast", vec![randn(&mut r, &[2, 3])], {
                    Box::new(|g, ids| {
                        let y = g.broadcast_last(ids[0], 4)?;
                        let e = g.exp(y);
                        Ok(g.mean_all(e))
                    })
                }),
                ("sum_axis", vec![randn(&mut r, &[2, 3, 2])], {
                    Box::new(|g, ids| {
                        let y = g.sum_axis(ids[0], 1)?;
                        let y2 = g.mul(y, y)?;
                        Ok(g.sum_all(y2))
                    })
                }),
                ("mean_axis", vec![randn(&mut r, &[2, 4])], {
                    Box::new(|g, ids| {
                        let y = g.mean_axis(ids[0], 0)?;
                        let y2 = g.mul(y, y)?;
                        Ok(g.sum_all(y2))
                    })
                }),
                ("exp", vec![randn(&mut r, &[2, 3])], {
                    Box::new(|g, ids| {
                        let y = g.exp(ids[0]);
                        Ok(g.mean_all(y))
                    })
                }),
                ("ln", vec![pos(&mut r, &[2, 3])], {
                    Box::new(|g, ids| {
                        let y = g.ln(ids[0])?;
                        Ok(g.sum_all(y))
                    })
                }),
                ("sqrt", vec![pos(&mut r, &[2, 3])], {
                    Box::new(|g, ids| {
                        let y = g.sqrt(ids[0])?;
                        Ok(g.sum_all(y))
                    })
                }),
                ("power", vec![pos(&mut r, &[2, 3])], {
                    Box::new(|g, ids| {
                        let y = g.powf(ids[0], 1.7)?;
                        Ok(g.sum_all(y))
                    })
                }),
                ("abs", vec![nonzero(&mut r, &[2, 3])], {
                    Box::new(|g, ids| {
                        let y = g.abs(ids[0]);
                        Ok(g.sum_all(y))
                    })
                }),
                ("softmax", vec![randn(&mut r, &[2, 5])], {
                    Box::new(|g, ids| {
                        let y = g.softmax_last(ids[0]);
                        let y2 = g.mul(y, y)?;
                        Ok(g.sum_all(y2))
                    })
                }),
                ("silu", vec![randn(&mut r, &[2, 3])], {
                    Box::new(|g, ids| {
                        let y = g.silu(ids[0]);
                        Ok(g.sum_all(y))
                    })
                }),
                ("gelu", vec![randn(&mut r, &[2, 3])], {
                    Box::new(|g, ids| {
                        let y = g.gelu_tanh(ids[0]);
                        Ok(g.sum_all(y))
                    })
                }),
                ("layernorm", vec![randn(&mut r, &[2, 6])], {
                    Box::new(|g, ids| {
                        let y = g.layernorm_last(ids[0]);
                        let y2 = g.mul(y, y)?;
                        let w = g.input(Tensor::new(
                            vec![6],
                            vec![0.3, -0.2, 0.9, 1.1, -0.5, 0.4],
                        )?)?;
                        let yw = g.mul(y2, w)?;
                        Ok(g.mean_all(yw))
                    })
                }),
                ("cosine_sim", vec![randn(&mut r, &[3, 4]), randn(&mut r, &[3, 4])], {
                    Box::new(|g, ids| {
                        let y = g.cosine_sim_last(ids[0], ids[1])?;
                        Ok(g.mean_all(y))
                    })
                }),
            ];

            for (name, params, f) in cases {
                let err = finite_diff_check(f.as_ref(), &params, 1e-5).unwrap();
                if err >= 1e-5 {
                    failures.push((format!("{name} (trial {trial})"), err));
                }
            }
        }
        assert!(failures.is_empty(), "finite-difference failures: {failures:?}");
    }
}
