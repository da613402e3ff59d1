//! Mean-aggregation convolution, top-k gated pooling, mean/max readout and
//! the conv-pool-readout stack that composes them into a graph classifier.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::serialize::{read_parameters, write_parameters};
use crate::engine::{
    central_difference, glorot_init, max_relative_error, Parameter, Tape, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::graph::{GraphBatch, NodeFeatures, SparseGraph};
use crate::scalar::Scalar;

/// Lower bound on `‖p‖` in the score normalization.
pub const NORM_FLOOR: f64 = 1e-12;

/// Where each block's summary is read: before or after its pooling step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ReadoutPosition {
    PrePool,
    #[default]
    PostPool,
}

impl ReadoutPosition {
    pub fn as_str(self) -> &'static str {
        match self {
            ReadoutPosition::PrePool => "pre_pool",
            ReadoutPosition::PostPool => "post_pool",
        }
    }
}

impl std::str::FromStr for ReadoutPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre_pool" | "pre-pool" => Ok(Self::PrePool),
            "post_pool" | "post-pool" => Ok(Self::PostPool),
            other => Err(Error::Invalid(format!(
                "readout position must be pre_pool or post_pool, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for ReadoutPosition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Number of nodes that survive pooling `n` nodes at `ratio`: `⌈ratio·n⌉`.
///
/// The product is taken with a `1e-9` slack so that e.g. `0.7 · 10` yields 7
/// rather than 8 from floating-point round-up.
pub fn pooled_size(n: usize, ratio: f64) -> usize {
    if n == 0 {
        return 0;
    }
    let k = (ratio * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1, n)
}

/// Indices of the `k` largest scores, ties to the lower index, returned in
/// ascending index order.
pub fn select_top_k<T: Scalar>(scores: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps lower indices first among equal scores
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Gap between the lowest kept and the highest dropped score, infinite when
/// nothing is dropped.
fn selection_gap<T: Scalar>(scores: &[T], k: usize) -> T {
    if k >= scores.len() {
        return T::infinity();
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    sorted[k - 1] - sorted[k]
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpConvLayer<T> {
    pub theta: Parameter<T>,
    pub theta_skip: Parameter<T>,
}

impl<T: Scalar> MpConvLayer<T> {
    pub fn new(theta: Tensor<T>, theta_skip: Tensor<T>) -> Result<Self> {
        if theta.shape() != theta_skip.shape() {
            return Err(Error::shape(
                "MpConvLayer::new",
                format!(
                    "theta {:?} vs theta_skip {:?}",
                    theta.shape(),
                    theta_skip.shape()
                ),
            ));
        }
        Ok(Self {
            theta: Parameter::new("theta", theta),
            theta_skip: Parameter::new("theta_skip", theta_skip),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.theta.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.theta.shape()[1]
    }
}

/// `relu(D̂⁻¹ÂXΘ + XΘ')` recorded on `tape`.
fn record_mpconv<T: Scalar>(
    tape: &mut Tape<T>,
    graph: &Arc<SparseGraph>,
    x: Var,
    theta: Var,
    theta_skip: Var,
) -> Result<Var> {
    let agg = tape.spmm_mean(graph, x)?;
    let mixed = tape.matmul(agg, theta)?;
    let skip = tape.matmul(x, theta_skip)?;
    let pre = tape.add(mixed, skip)?;
    Ok(tape.relu(pre))
}

pub fn mpconv_forward<T: Scalar>(
    graph: &SparseGraph,
    x: &NodeFeatures<T>,
    layer: &MpConvLayer<T>,
) -> Result<NodeFeatures<T>> {
    if x.cols() != layer.input_dim() {
        return Err(Error::shape(
            "mpconv_forward",
            format!(
                "{} feature columns, layer expects {}",
                x.cols(),
                layer.input_dim()
            ),
        ));
    }
    let mut tape = Tape::new();
    let g = Arc::new(graph.clone());
    let xv = tape.constant(x.clone());
    let t = tape.constant(layer.theta.value.clone());
    let ts = tape.constant(layer.theta_skip.value.clone());
    let out = record_mpconv(&mut tape, &g, xv, t, ts)?;
    Ok(tape.value(out).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopKPoolLayer<T> {
    /// Projection vector, `F' x 1`.
    pub p: Parameter<T>,
    pub ratio: f64,
}

impl<T: Scalar> TopKPoolLayer<T> {
    pub fn new(p: Vec<T>, ratio: f64) -> Result<Self> {
        check_ratio(ratio)?;
        Ok(Self {
            p: Parameter::new("p", Tensor::column(p)),
            ratio,
        })
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Invalid(format!(
            "pool ratio must be in (0, 1], got {ratio}"
        )));
    }
    Ok(())
}

/// Output of one pooling step on a (possibly batched) graph.
struct PoolStep {
    graph: Arc<SparseGraph>,
    features: Var,
    /// Kept rows of the input, ascending.
    kept: Vec<usize>,
    counts: Vec<usize>,
    gap: f64,
}

/// Scores `y = Xp/‖p‖`, per-segment top-k, then `(X ⊙ tanh y)[kept]` and
/// `A[kept, kept]`.
fn record_topk<T: Scalar>(
    tape: &mut Tape<T>,
    graph: &Arc<SparseGraph>,
    x: Var,
    p: Var,
    ratio: f64,
    counts: &[usize],
) -> Result<PoolStep> {
    let unit = tape.normalize(p, T::of(NORM_FLOOR));
    let scores = tape.vecdot(x, unit)?;
    let gate = tape.tanh(scores);
    let gated = tape.scale_rows(x, gate)?;

    let y = tape.value(scores).values().to_vec();
    let mut kept = Vec::new();
    let mut new_counts = Vec::with_capacity(counts.len());
    let mut gap = f64::INFINITY;
    let mut start = 0;
    for &n in counts {
        if n == 0 {
            return Err(Error::Invalid("topk_pool: empty graph".into()));
        }
        let k = pooled_size(n, ratio);
        let seg = &y[start..start + n];
        kept.extend(select_top_k(seg, k).into_iter().map(|i| i + start));
        gap = gap.min(selection_gap(seg, k).as_f64());
        new_counts.push(k);
        start += n;
    }
    // Keeping every node selects the identity: no copy, same graph.
    let (features, pooled) = if kept.len() == y.len() {
        (gated, Arc::clone(graph))
    } else {
        let pooled = Arc::new(graph.induced_subgraph(&kept)?);
        tape.record_graph(&pooled);
        (tape.gather_rows(gated, &kept)?, pooled)
    };
    Ok(PoolStep {
        graph: pooled,
        features,
        kept,
        counts: new_counts,
        gap,
    })
}

/// Pools one graph: returns `(A', X', kept indices)`.
pub fn topk_pool<T: Scalar>(
    graph: &SparseGraph,
    x: &NodeFeatures<T>,
    layer: &TopKPoolLayer<T>,
) -> Result<(SparseGraph, NodeFeatures<T>, Vec<usize>)> {
    if graph.num_nodes() == 0 {
        return Err(Error::Invalid("topk_pool: empty graph".into()));
    }
    if x.rows() != graph.num_nodes() || x.cols() != layer.p.value.len() {
        return Err(Error::shape(
            "topk_pool",
            format!(
                "features {:?} for {} nodes with projection length {}",
                x.shape(),
                graph.num_nodes(),
                layer.p.value.len()
            ),
        ));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = tape.constant(layer.p.value.clone());
    let shared = Arc::new(graph.clone());
    let step = record_topk(
        &mut tape,
        &shared,
        xv,
        pv,
        layer.ratio,
        &[graph.num_nodes()],
    )?;
    drop(shared);
    let pooled = Arc::try_unwrap(step.graph).unwrap_or_else(|g| (*g).clone());
    Ok((pooled, tape.value(step.features).clone(), step.kept))
}

/// `[column mean ‖ column max]` over the rows of `x`.
pub fn readout<T: Scalar>(x: &NodeFeatures<T>) -> Result<Vec<T>> {
    if x.rows() == 0 {
        return Err(Error::Invalid("readout: empty feature matrix".into()));
    }
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let s = record_readout(&mut tape, v, &[0, x.rows()])?;
    Ok(tape.value(s).values().to_vec())
}

fn record_readout<T: Scalar>(tape: &mut Tape<T>, x: Var, offsets: &[usize]) -> Result<Var> {
    let mean = tape.segment_mean(x, offsets)?;
    let max = tape.segment_max(x, offsets)?;
    tape.concat_cols(mean, max)
}

/// Elementwise sum of per-block summaries.
pub fn aggregate_summaries<T: Scalar>(summaries: &[Vec<T>]) -> Result<Vec<T>> {
    let first = summaries
        .first()
        .ok_or_else(|| Error::Invalid("aggregate_summaries: no summaries".into()))?;
    let mut out = first.clone();
    for s in &summaries[1..] {
        if s.len() != out.len() {
            return Err(Error::shape(
                "aggregate_summaries",
                format!("length {} vs {}", s.len(), out.len()),
            ));
        }
        for (o, &v) in out.iter_mut().zip(s) {
            *o = *o + v;
        }
    }
    Ok(out)
}

/// Two-layer classifier head: `2F' -> F'` (ReLU) `-> C`, with biases.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpHead<T> {
    pub w1: Parameter<T>,
    pub b1: Parameter<T>,
    pub w2: Parameter<T>,
    pub b2: Parameter<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub blocks: usize,
    pub pool_ratio: f64,
    pub readout_position: ReadoutPosition,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            num_classes,
            blocks: 3,
            pool_ratio: 0.8,
            readout_position: ReadoutPosition::PostPool,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        check_ratio(self.pool_ratio)?;
        if self.input_dim == 0 || self.hidden_dim == 0 || self.blocks == 0 {
            return Err(Error::Invalid(
                "input_dim, hidden_dim and blocks must be positive".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::Invalid("need at least two classes".into()));
        }
        Ok(())
    }
}

/// Everything a forward pass recorded on the tape.
#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Var,
    /// Summed summaries, `graphs x 2F'`, before the head.
    pub summary: Var,
    /// One var per parameter, in [`HierarchicalModel::parameters`] order.
    pub params: Vec<Var>,
    /// Per block, node count of every graph after pooling.
    pub pooled_counts: Vec<Vec<usize>>,
    /// Per block, the kept rows of that block's (batched) input.
    pub kept: Vec<Vec<usize>>,
    /// Smallest gap between a kept and a dropped score over all blocks.
    pub selection_gap: f64,
}

/// Distances from the non-smooth points of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Margins {
    /// Smallest `|x|` over ReLU inputs.
    pub relu: f64,
    /// Smallest gap under a column max.
    pub max: f64,
    /// Smallest gap between a kept and a dropped top-k score.
    pub selection: f64,
}

impl Margins {
    pub fn at_least(&self, kink: f64, selection: f64) -> bool {
        self.relu >= kink && self.max >= kink && self.selection >= selection
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalModel<T> {
    pub config: ModelConfig,
    pub blocks: Vec<(MpConvLayer<T>, TopKPoolLayer<T>)>,
    pub head: MlpHead<T>,
}

impl<T: Scalar> HierarchicalModel<T> {
    /// Glorot-initialized model; head biases start at zero.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut seeds = ChaCha8Rng::seed_from_u64(config.seed);
        let mut next = || seeds.next_u64();
        let h = config.hidden_dim;
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let fin = if b == 0 { config.input_dim } else { h };
            let mut conv =
                MpConvLayer::new(glorot_init(fin, h, next()), glorot_init(fin, h, next()))?;
            conv.theta.name = format!("block{b}.theta");
            conv.theta_skip.name = format!("block{b}.theta_skip");
            let pool = TopKPoolLayer {
                p: Parameter::new(format!("block{b}.p"), glorot_init(h, 1, next())),
                ratio: config.pool_ratio,
            };
            blocks.push((conv, pool));
        }
        let head = MlpHead {
            w1: Parameter::new("head.w1", glorot_init(2 * h, h, next())),
            b1: Parameter::new("head.b1", Tensor::zeros(1, h)),
            w2: Parameter::new("head.w2", glorot_init(h, config.num_classes, next())),
            b2: Parameter::new("head.b2", Tensor::zeros(1, config.num_classes)),
        };
        Ok(Self {
            config,
            blocks,
            head,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Summary width `2F'`.
    pub fn summary_dim(&self) -> usize {
        2 * self.config.hidden_dim
    }

    pub fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut out = Vec::with_capacity(3 * self.blocks.len() + 4);
        for (conv, pool) in &self.blocks {
            out.extend([&conv.theta, &conv.theta_skip, &pool.p]);
        }
        out.extend([&self.head.w1, &self.head.b1, &self.head.w2, &self.head.b2]);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = Vec::with_capacity(3 * self.blocks.len() + 4);
        for (conv, pool) in &mut self.blocks {
            out.push(&mut conv.theta);
            out.push(&mut conv.theta_skip);
            out.push(&mut pool.p);
        }
        let MlpHead { w1, b1, w2, b2 } = &mut self.head;
        out.extend([w1, b1, w2, b2]);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.parameters().iter().map(|p| p.value.len()).sum()
    }

    /// Records the full pipeline for `batch`. Parameters become leaves when
    /// `track_grads` is set, constants otherwise.
    pub fn record_forward(
        &self,
        tape: &mut Tape<T>,
        batch: &GraphBatch<T>,
        track_grads: bool,
    ) -> Result<ForwardPass> {
        if batch.merged_features.cols() != self.input_dim() {
            return Err(Error::shape(
                "model_forward",
                format!(
                    "batch has {} feature columns, model expects {}",
                    batch.merged_features.cols(),
                    self.input_dim()
                ),
            ));
        }
        tape.set_scope("params");
        let params: Vec<Var> = self
            .parameters()
            .into_iter()
            .map(|p| {
                if track_grads {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();

        tape.set_scope("input");
        let mut graph = Arc::new(batch.merged_graph.clone());
        let mut x = tape.constant(batch.merged_features.clone());
        let mut counts = batch.node_counts.clone();
        let mut summaries = Vec::with_capacity(self.blocks.len());
        let mut pooled_counts = Vec::with_capacity(self.blocks.len());
        let mut kept_all = Vec::with_capacity(self.blocks.len());
        let mut gap = f64::INFINITY;

        for (b, (_, pool)) in self.blocks.iter().enumerate() {
            tape.set_scope(format!("block{b}"));
            let (theta, theta_skip, p) = (params[3 * b], params[3 * b + 1], params[3 * b + 2]);
            let h = record_mpconv(tape, &graph, x, theta, theta_skip)?;
            if self.config.readout_position == ReadoutPosition::PrePool {
                let offs = crate::graph::offsets_from_counts(&counts);
                summaries.push(record_readout(tape, h, &offs)?);
            }
            let step = record_topk(tape, &graph, h, p, pool.ratio, &counts)?;
            if self.config.readout_position == ReadoutPosition::PostPool {
                let offs = crate::graph::offsets_from_counts(&step.counts);
                summaries.push(record_readout(tape, step.features, &offs)?);
            }
            gap = gap.min(step.gap);
            graph = step.graph;
            x = step.features;
            counts = step.counts;
            pooled_counts.push(counts.clone());
            kept_all.push(step.kept);
        }

        tape.set_scope("head");
        let summary = tape.sum_tensors(&summaries)?;
        let nb = 3 * self.blocks.len();
        let (w1, b1, w2, b2) = (params[nb], params[nb + 1], params[nb + 2], params[nb + 3]);
        let hidden = tape.matmul(summary, w1)?;
        let hidden = tape.add_row(hidden, b1)?;
        let hidden = tape.relu(hidden);
        let logits = tape.matmul(hidden, w2)?;
        let logits = tape.add_row(logits, b2)?;
        tape.set_scope("");
        Ok(ForwardPass {
            logits,
            summary,
            params,
            pooled_counts,
            kept: kept_all,
            selection_gap: gap,
        })
    }

    /// Logits, `graphs x C`.
    pub fn forward(&self, batch: &GraphBatch<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let pass = self.record_forward(&mut tape, batch, false)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Summed block summaries before the head, `graphs x 2F'`.
    pub fn summaries(&self, batch: &GraphBatch<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let pass = self.record_forward(&mut tape, batch, false)?;
        Ok(tape.value(pass.summary).clone())
    }

    /// Mean cross-entropy on `batch`; adds its gradient into every
    /// parameter's `grad`.
    pub fn loss_and_backward(&mut self, batch: &GraphBatch<T>) -> Result<T> {
        let mut tape = Tape::new();
        let pass = self.record_forward(&mut tape, batch, true)?;
        let loss = tape.softmax_xent(pass.logits, &batch.labels)?;
        let value = tape.value(loss).values()[0];
        let mut grads = tape.backward(loss)?;
        for (p, v) in self.parameters_mut().into_iter().zip(&pass.params) {
            if let Some(g) = grads.take(*v) {
                p.accumulate_grad(&g)?;
            }
        }
        Ok(value)
    }

    /// Mean cross-entropy without touching gradients.
    pub fn loss(&self, batch: &GraphBatch<T>) -> Result<T> {
        let mut tape = Tape::new();
        let pass = self.record_forward(&mut tape, batch, false)?;
        let loss = tape.softmax_xent(pass.logits, &batch.labels)?;
        Ok(tape.value(loss).values()[0])
    }

    /// How far `batch` sits from the points where the loss is not smooth.
    pub fn margins(&self, batch: &GraphBatch<T>) -> Result<Margins> {
        let mut tape = Tape::new();
        let pass = self.record_forward(&mut tape, batch, false)?;
        let kinks = tape.kink_margin();
        Ok(Margins {
            relu: kinks.relu.as_f64(),
            max: kinks.max.as_f64(),
            selection: pass.selection_gap,
        })
    }

    /// Per parameter, the largest relative error between the backward-pass
    /// gradient of the mean loss on `batch` and its central difference.
    pub fn gradient_check(&self, batch: &GraphBatch<T>, h: T) -> Result<Vec<(String, T)>> {
        let mut model = self.clone();
        for p in model.parameters_mut() {
            p.zero_grad();
        }
        model.loss_and_backward(batch)?;
        let analytic: Vec<(String, Tensor<T>, Tensor<T>)> = model
            .parameters()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone(), p.grad.clone()))
            .collect();
        let mut out = Vec::with_capacity(analytic.len());
        for (i, (name, value, grad)) in analytic.into_iter().enumerate() {
            let mut probe_model = self.clone();
            let numeric = central_difference(
                |probe| {
                    probe_model.parameters_mut()[i].value = probe.clone();
                    probe_model.loss(batch)
                },
                &value,
                h,
            )?;
            out.push((name, max_relative_error(&grad, &numeric)));
        }
        Ok(out)
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let params = self.parameters();
        let named: Vec<(&str, &Tensor<T>)> =
            params.iter().map(|p| (p.name.as_str(), &p.value)).collect();
        write_parameters(w, &named)
    }

    /// Rebuilds a model from a parameter file. Dimensions come from the
    /// stored shapes; `pool_ratio` and `readout_position` are not stored.
    pub fn load<R: Read>(r: R, pool_ratio: f64, readout_position: ReadoutPosition) -> Result<Self> {
        let stored = read_parameters::<T, _>(r)?;
        let find = |name: &str| -> Result<Tensor<T>> {
            stored
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
        };
        let blocks = stored
            .iter()
            .filter(|(n, _)| n.ends_with(".theta") && n.starts_with("block"))
            .count();
        let theta0 = find("block0.theta")?;
        let w2 = find("head.w2")?;
        let config = ModelConfig {
            input_dim: theta0.rows(),
            hidden_dim: theta0.cols(),
            num_classes: w2.cols(),
            blocks,
            pool_ratio,
            readout_position,
            seed: 0,
        };
        let mut model = Self::new(config)?;
        for p in model.parameters_mut() {
            let t = find(&p.name)?;
            if t.shape() != p.shape() {
                return Err(Error::Format(format!(
                    "{}: stored shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.shape()
                )));
            }
            *p = Parameter::new(p.name.clone(), t);
        }
        Ok(model)
    }
}
