//! Peak training-memory accounting for the sparse model and a dense
//! soft-assignment baseline.

use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{BufferId, MemoryLedger, Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::{batch_graphs, erdos_renyi, LabeledGraph};
use crate::layers::{HierarchicalModel, ModelConfig, ReadoutPosition};
use crate::scalar::Scalar;

/// What the dense baseline counts; printed above sweep output.
pub const DENSE_MODEL_NOTE: &str = "dense baseline per level: one embedding and one \
assignment convolution (each matmul, aggregate, skip matmul, add, activation), \
pooled features S^T Z, A S and coarsened adjacency S^T A S; gradients follow \
the same lifetimes as the sparse model's tape; level-1 adjacency kept as CSR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    SparseTopK,
    DenseAssignment,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SparseTopK => "sparse_topk",
            Self::DenseAssignment => "dense_assignment",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub features: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub classes: usize,
    /// Edges per node of the random input graph.
    pub edge_factor: usize,
    /// Pooling ratio of the dense baseline.
    pub dense_ratio: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            features: 128,
            hidden: 128,
            blocks: 3,
            classes: 2,
            edge_factor: 2,
            dense_ratio: 0.25,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryReport {
    pub n: usize,
    pub edges: usize,
    pub method: Method,
    pub peak_bytes: usize,
    /// Peak with every element counted at 4 bytes.
    pub peak_bytes_compact: usize,
    pub peak_phase: String,
    /// Buffers live at the peak.
    pub breakdown: Vec<(String, usize)>,
    pub feasible: bool,
    /// First buffer whose allocation crossed the budget.
    pub overflowed_at: Option<String>,
}

impl MemoryReport {
    fn from_ledger(
        n: usize,
        edges: usize,
        method: Method,
        ledger: &MemoryLedger,
        overflowed_at: Option<String>,
    ) -> Self {
        Self {
            n,
            edges,
            method,
            peak_bytes: ledger.peak_bytes(),
            peak_bytes_compact: ledger.peak_bytes_compact(),
            peak_phase: ledger.peak_phase().to_string(),
            breakdown: ledger.peak_breakdown().to_vec(),
            feasible: !ledger.exceeded_budget(),
            overflowed_at,
        }
    }

    pub fn largest_buffer(&self) -> Option<&(String, usize)> {
        self.breakdown.iter().max_by_key(|(_, b)| *b)
    }
}

fn random_features<T: Scalar>(n: usize, f: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..n * f)
        .map(|_| T::of(rng.gen_range(-1.0..1.0)))
        .collect();
    Tensor::from_vec(n, f, values).expect("length matches")
}

fn input_edges(n: usize, factor: usize) -> usize {
    (factor * n).min(n * n.saturating_sub(1) / 2)
}

/// Peak bytes of one forward and backward pass of the sparse model with no
/// pooling (`k = 1`) on an Erdős–Rényi graph with `edge_factor * n` edges.
pub fn measure_sparse<T: Scalar>(
    n: usize,
    config: &BenchConfig,
    budget: Option<usize>,
) -> Result<MemoryReport> {
    if n == 0 {
        return Err(Error::Invalid("graph size must be at least 1".into()));
    }
    let m = input_edges(n, config.edge_factor);
    let graph = erdos_renyi(n, m, config.seed)?;
    let features = random_features::<T>(n, config.features, config.seed.wrapping_add(1));
    let lg = LabeledGraph::new(graph, features, 0)?;
    let batch = batch_graphs(&[&lg])?;
    let model = HierarchicalModel::<T>::new(ModelConfig {
        input_dim: config.features,
        hidden_dim: config.hidden,
        num_classes: config.classes,
        blocks: config.blocks,
        pool_ratio: 1.0,
        readout_position: ReadoutPosition::PostPool,
        seed: config.seed,
    })?;
    let mut ledger = MemoryLedger::for_scalar::<T>();
    if let Some(b) = budget {
        ledger = ledger.with_budget(b);
    }
    let mut tape = Tape::with_ledger(ledger);
    tape.ledger_mut()
        .expect("ledger attached")
        .set_phase("forward");
    let pass = model.record_forward(&mut tape, &batch, true)?;
    tape.set_scope("loss");
    let loss = tape.softmax_xent(pass.logits, &batch.labels)?;
    tape.backward(loss)?;
    let ledger = tape.take_ledger().expect("ledger attached");
    let overflowed_at = ledger
        .exceeded_budget()
        .then(|| ledger.peak_phase().to_string());
    Ok(MemoryReport::from_ledger(
        n,
        m,
        Method::SparseTopK,
        &ledger,
        overflowed_at,
    ))
}

/// Replays a training pass as a list of buffers, with the same lifetime
/// rules as [`Tape`]: forward values stay live, a gradient buffer appears at
/// the first contribution to it and is released once its node has been
/// processed, parameter gradients are kept. Buffers are zero-filled and
/// only materialized while the live total fits the budget.
struct Footprint<T> {
    ledger: MemoryLedger,
    held: Vec<(BufferId, Option<Vec<T>>)>,
    overflowed_at: Option<String>,
    nodes: Vec<SimNode>,
}

struct SimNode {
    name: String,
    floats: usize,
    inputs: Vec<usize>,
    grad: bool,
    param: bool,
}

impl<T: Scalar> Footprint<T> {
    fn new(ledger: MemoryLedger) -> Self {
        Self {
            ledger,
            held: Vec::new(),
            overflowed_at: None,
            nodes: Vec::new(),
        }
    }

    fn alloc(&mut self, name: &str, floats: usize, indices: usize) -> usize {
        let fits = !self.ledger.would_exceed(floats, indices);
        if !fits && self.overflowed_at.is_none() {
            self.overflowed_at = Some(name.to_string());
        }
        let id = self.ledger.alloc(name, floats, indices);
        self.held.push((id, fits.then(|| vec![T::zero(); floats])));
        self.held.len() - 1
    }

    fn free(&mut self, slot: usize) {
        let (id, data) = &mut self.held[slot];
        *data = None;
        self.ledger.free(*id);
    }

    fn push(
        &mut self,
        name: String,
        floats: usize,
        indices: usize,
        inputs: &[usize],
        param: bool,
    ) -> usize {
        self.alloc(&name, floats, indices);
        let grad = param || inputs.iter().any(|&i| self.nodes[i].grad);
        self.nodes.push(SimNode {
            name,
            floats,
            inputs: inputs.to_vec(),
            grad,
            param,
        });
        self.nodes.len() - 1
    }

    fn param(&mut self, name: String, floats: usize) -> usize {
        self.push(name, floats, 0, &[], true)
    }

    fn constant(&mut self, name: &str, floats: usize, indices: usize) -> usize {
        self.push(name.to_string(), floats, indices, &[], false)
    }

    fn op(&mut self, name: String, floats: usize, inputs: &[usize]) -> usize {
        self.push(name, floats, 0, inputs, false)
    }

    fn backward(&mut self, loss: usize) {
        self.ledger.set_phase("backward");
        let mut has = vec![false; self.nodes.len()];
        let mut slot: Vec<Option<usize>> = vec![None; self.nodes.len()];
        has[loss] = true;
        for i in (0..=loss).rev() {
            if !has[i] || self.nodes[i].param {
                continue;
            }
            for j in self.nodes[i].inputs.clone() {
                if self.nodes[j].grad && !has[j] {
                    has[j] = true;
                    let name = format!("grad/{}", self.nodes[j].name);
                    slot[j] = Some(self.alloc(&name, self.nodes[j].floats, 0));
                }
            }
            if let Some(s) = slot[i] {
                self.free(s);
            }
        }
    }

    /// Mean-aggregation convolution with a skip term, as in the sparse model.
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        prefix: &str,
        out_name: &str,
        x: usize,
        adj: usize,
        rows: usize,
        width: usize,
        weights: (usize, usize),
    ) -> usize {
        let xw = self.op(format!("{prefix}/matmul"), rows * width, &[x, weights.0]);
        let agg = self.op(format!("{prefix}/aggregate"), rows * width, &[adj, xw]);
        let xs = self.op(
            format!("{prefix}/matmul_skip"),
            rows * width,
            &[x, weights.1],
        );
        let sum = self.op(format!("{prefix}/add"), rows * width, &[agg, xs]);
        self.op(out_name.to_string(), rows * width, &[sum])
    }
}

/// Peak bytes of a dense soft-assignment pooling network during one
/// training step. Each level runs an embedding and an assignment
/// convolution, then coarsens features and adjacency with the assignment.
pub fn measure_dense_assignment<T: Scalar>(
    n: usize,
    config: &BenchConfig,
    budget: Option<usize>,
) -> Result<MemoryReport> {
    if n == 0 {
        return Err(Error::Invalid("graph size must be at least 1".into()));
    }
    let k = config.dense_ratio;
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::Invalid(format!(
            "assignment ratio {k} not in (0, 1]"
        )));
    }
    let m = input_edges(n, config.edge_factor);
    let (h, c) = (config.hidden, config.classes);
    let mut sizes = vec![n];
    for _ in 0..config.blocks {
        let prev = *sizes.last().expect("nonempty");
        sizes.push(((k * prev as f64).ceil() as usize).max(1));
    }
    let mut ledger = MemoryLedger::for_scalar::<T>();
    if let Some(b) = budget {
        ledger = ledger.with_budget(b);
    }
    let mut fp = Footprint::<T>::new(ledger);

    let mut weights = Vec::new();
    for l in 0..config.blocks {
        let fin = if l == 0 { config.features } else { h };
        let next = sizes[l + 1];
        weights.push([
            fp.param(format!("params/level{l}/embed_theta"), fin * h),
            fp.param(format!("params/level{l}/embed_skip"), fin * h),
            fp.param(format!("params/level{l}/pool_theta"), fin * next),
            fp.param(format!("params/level{l}/pool_skip"), fin * next),
        ]);
    }
    let head = [
        fp.param("params/head/w1".into(), h * h),
        fp.param("params/head/b1".into(), h),
        fp.param("params/head/w2".into(), h * c),
        fp.param("params/head/b2".into(), c),
    ];
    let mut x = fp.constant("input/features", n * config.features, 0);
    let mut adj = fp.constant("input/csr", 0, n + 1 + 2 * m);

    fp.ledger.set_phase("forward");
    for l in 0..config.blocks {
        let (cur, next) = (sizes[l], sizes[l + 1]);
        let [et, es, pt, ps] = weights[l];
        let z = fp.conv(
            &format!("level{l}/embed"),
            &format!("level{l}/embeddings"),
            x,
            adj,
            cur,
            h,
            (et, es),
        );
        let s = fp.conv(
            &format!("level{l}/pool"),
            &format!("level{l}/assignment"),
            x,
            adj,
            cur,
            next,
            (pt, ps),
        );
        let pooled = fp.op(format!("level{l}/pooled_features"), next * h, &[s, z]);
        let a_s = fp.op(
            format!("level{l}/adj_times_assignment"),
            cur * next,
            &[adj, s],
        );
        adj = fp.op(format!("level{l}/coarse_adjacency"), next * next, &[s, a_s]);
        x = pooled;
    }
    let summary = fp.op("readout/mean".into(), h, &[x]);
    let hidden = fp.op("head/matmul".into(), h, &[summary, head[0]]);
    let hidden = fp.op("head/add_row".into(), h, &[hidden, head[1]]);
    let hidden = fp.op("head/relu".into(), h, &[hidden]);
    let logits = fp.op("head/logits".into(), c, &[hidden, head[2]]);
    let logits = fp.op("head/add_row_out".into(), c, &[logits, head[3]]);
    let loss = fp.op("loss/softmax_xent".into(), 1, &[logits]);
    fp.backward(loss);
    Ok(MemoryReport::from_ledger(
        n,
        m,
        Method::DenseAssignment,
        &fp.ledger,
        fp.overflowed_at,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub n: usize,
    pub sparse: MemoryReport,
    pub dense: MemoryReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub budget: Option<usize>,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let len = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / len;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / len;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

impl SweepResult {
    fn reports(&self, method: Method) -> impl Iterator<Item = &MemoryReport> {
        self.rows.iter().map(move |r| match method {
            Method::SparseTopK => &r.sparse,
            Method::DenseAssignment => &r.dense,
        })
    }

    pub fn slope(&self, method: Method) -> f64 {
        let pts: Vec<(f64, f64)> = self
            .reports(method)
            .map(|r| (r.n as f64, r.peak_bytes as f64))
            .collect();
        loglog_slope(&pts)
    }

    /// Smallest swept size that did not fit the budget.
    pub fn first_infeasible(&self, method: Method) -> Option<usize> {
        self.reports(method).find(|r| !r.feasible).map(|r| r.n)
    }

    /// Size at which the power law fitted through the sweep reaches the
    /// budget.
    pub fn projected_budget_size(&self, method: Method) -> Option<f64> {
        let budget = self.budget? as f64;
        let pts: Vec<(f64, f64)> = self
            .reports(method)
            .map(|r| (r.n as f64, r.peak_bytes as f64))
            .collect();
        let b = loglog_slope(&pts);
        let (x, y) = *pts.last()?;
        Some(x * (budget / y).powf(1.0 / b))
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("n,sparse_bytes,dense_bytes,dense_feasible\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.n, r.sparse.peak_bytes, r.dense.peak_bytes, r.dense.feasible
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{DENSE_MODEL_NOTE}");
        let _ = writeln!(
            s,
            "budget: {}",
            self.budget.map_or("none".to_string(), format_bytes)
        );
        for m in [Method::SparseTopK, Method::DenseAssignment] {
            let _ = write!(s, "{m}: log-log slope {:.3}", self.slope(m));
            if self.budget.is_some() {
                match self.first_infeasible(m) {
                    Some(n) => {
                        let _ = write!(s, ", first over budget at n={n}");
                    }
                    None => {
                        let _ = write!(s, ", fits budget at every size");
                    }
                }
                if let Some(x) = self.projected_budget_size(m) {
                    let _ = write!(s, ", projected budget crossing n~{x:.0}");
                }
            }
            let _ = writeln!(s);
        }
        s
    }
}

/// Measures both methods at every size, in order.
pub fn scaling_sweep<T: Scalar>(
    sizes: &[usize],
    budget: Option<usize>,
    config: &BenchConfig,
) -> Result<SweepResult> {
    if sizes.is_empty() {
        return Err(Error::Invalid("no sizes given".into()));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid("sizes must be strictly ascending".into()));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        rows.push(SweepRow {
            n,
            sparse: measure_sparse::<T>(n, config, budget)?,
            dense: measure_dense_assignment::<T>(n, config, budget)?,
        });
    }
    Ok(SweepResult { rows, budget })
}

/// Parses sizes such as `1073741824`, `1GiB`, `512MiB`, `2GB` or `64k`.
pub fn parse_bytes(text: &str) -> Result<usize> {
    let t = text.trim();
    let split = t
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let value: f64 = num
        .parse()
        .map_err(|_| Error::Invalid(format!("bad byte size {text:?}")))?;
    let scale: f64 = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 1.0,
        "k" | "kb" => 1e3,
        "m" | "mb" => 1e6,
        "g" | "gb" => 1e9,
        "kib" => 1024.0,
        "mib" => 1024f64.powi(2),
        "gib" => 1024f64.powi(3),
        "tib" => 1024f64.powi(4),
        other => return Err(Error::Invalid(format!("unknown byte unit {other:?}"))),
    };
    Ok((value * scale).round() as usize)
}

pub fn format_bytes(bytes: usize) -> String {
    const UNITS: [&str; 4] = ["B", "KiB", "MiB", "GiB"];
    let mut v = bytes as f64;
    let mut u = 0;
    while v >= 1024.0 && u + 1 < UNITS.len() {
        v /= 1024.0;
        u += 1;
    }
    if u == 0 {
        format!("{bytes} B")
    } else {
        format!("{v:.2} {}", UNITS[u])
    }
}
