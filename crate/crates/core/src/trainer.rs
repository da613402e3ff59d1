//! Training loop, evaluation and k-fold cross-validation.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{kfold, stratified_kfold, Dataset, FeatureKind, FoldSplit};
use crate::engine::Adam;
use crate::error::{Error, Result};
use crate::graph::{batch_graphs, LabeledGraph};
use crate::layers::{HierarchicalModel, ModelConfig, ReadoutPosition};
use crate::scalar::Scalar;

/// Graphs per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaxDegreePolicy {
    /// Percentile bound over the training portion of each fold.
    TrainPercentile,
    Fixed(usize),
}

impl MaxDegreePolicy {
    pub fn describe(&self) -> String {
        match self {
            Self::TrainPercentile => "train_p95".into(),
            Self::Fixed(d) => format!("fixed:{d}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub hidden_dim: usize,
    pub pool_ratio: f64,
    pub blocks: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub readout_position: ReadoutPosition,
    pub max_degree: MaxDegreePolicy,
    pub folds: usize,
    pub stratified: bool,
}

impl TrainConfig {
    pub fn new(hidden_dim: usize, lr: f64, epochs: usize) -> Self {
        Self {
            hidden_dim,
            pool_ratio: 0.8,
            blocks: 3,
            lr,
            epochs,
            batch_size: 64,
            seed: 0,
            readout_position: ReadoutPosition::PostPool,
            max_degree: MaxDegreePolicy::TrainPercentile,
            folds: 10,
            stratified: true,
        }
    }

    /// `lr = 0` is accepted: it freezes the model, which is how the
    /// constant-prediction baseline is run.
    pub fn validate(&self) -> Result<()> {
        if !(self.pool_ratio > 0.0 && self.pool_ratio <= 1.0) {
            return Err(Error::Invalid(format!(
                "pool ratio {} not in (0, 1]",
                self.pool_ratio
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Invalid("epochs must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!(
                "learning rate {} must be finite and >= 0",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.hidden_dim == 0 || self.blocks == 0 {
            return Err(Error::Invalid(
                "batch size, hidden size and blocks must be positive".into(),
            ));
        }
        if let MaxDegreePolicy::Fixed(0) = self.max_degree {
            return Err(Error::Invalid("max degree must be at least 1".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, input_dim: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden_dim: self.hidden_dim,
            num_classes,
            blocks: self.blocks,
            pool_ratio: self.pool_ratio,
            readout_position: self.readout_position,
            seed: self.seed,
        }
    }

    /// Every resolved setting as ordered key/value pairs.
    pub fn entries(&self) -> Vec<(String, String)> {
        [
            ("hidden", self.hidden_dim.to_string()),
            ("ratio", self.pool_ratio.to_string()),
            ("blocks", self.blocks.to_string()),
            ("lr", self.lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("readout_position", self.readout_position.to_string()),
            ("max_degree", self.max_degree.describe()),
            ("folds", self.folds.to_string()),
            ("stratified", self.stratified.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Per-dataset configuration used in the published experiments.
pub fn dataset_defaults(name: &str) -> Option<TrainConfig> {
    let (hidden, lr, epochs) = match name.to_ascii_uppercase().as_str() {
        "ENZYMES" => (128, 0.0005, 100),
        "PROTEINS" => (64, 0.005, 40),
        "DD" | "D&D" => (64, 0.0005, 20),
        "COLLAB" => (128, 0.0005, 30),
        _ => return None,
    };
    Some(TrainConfig::new(hidden, lr, epochs))
}

pub const DEFAULT_DATASETS: [&str; 4] = ["ENZYMES", "PROTEINS", "DD", "COLLAB"];

/// Published accuracies (percent) for Enzymes, D&D, Collab, Proteins.
pub const REFERENCE_ACCURACY: &[(&str, [Option<f64>; 4])] = &[
    (
        "Graphlet",
        [Some(41.03), Some(74.85), Some(64.66), Some(72.91)],
    ),
    (
        "Shortest-path",
        [Some(42.32), Some(78.86), Some(59.10), Some(76.43)],
    ),
    ("1-WL", [Some(53.43), Some(74.02), Some(78.61), Some(73.76)]),
    (
        "WL-QA",
        [Some(60.13), Some(79.04), Some(80.74), Some(75.26)],
    ),
    ("PatchySAN", [None, Some(76.27), Some(72.60), Some(75.00)]),
    (
        "GraphSAGE",
        [Some(54.25), Some(75.42), Some(68.25), Some(70.48)],
    ),
    ("ECC", [Some(53.50), Some(74.10), Some(67.79), Some(72.65)]),
    (
        "Set2Set",
        [Some(60.15), Some(78.12), Some(71.75), Some(74.29)],
    ),
    (
        "SortPool",
        [Some(57.12), Some(79.37), Some(73.76), Some(75.54)],
    ),
    (
        "DiffPool-Det",
        [Some(58.33), Some(75.47), Some(82.13), Some(75.62)],
    ),
    (
        "DiffPool-NoLP",
        [Some(62.67), Some(79.98), Some(75.63), Some(77.42)],
    ),
    (
        "DiffPool",
        [Some(64.23), Some(81.15), Some(75.50), Some(78.10)],
    ),
    (
        "Sparse top-k (reference)",
        [Some(64.17), Some(78.59), Some(74.54), Some(75.46)],
    ),
];

fn reference_column(name: &str) -> Option<usize> {
    match name.to_ascii_uppercase().as_str() {
        "ENZYMES" => Some(0),
        "DD" | "D&D" => Some(1),
        "COLLAB" => Some(2),
        "PROTEINS" => Some(3),
        _ => None,
    }
}

/// Accuracy (percent) the sparse model reached on `name` in the published
/// table, if listed.
pub fn reference_accuracy(name: &str) -> Option<f64> {
    let col = reference_column(name)?;
    REFERENCE_ACCURACY.last().and_then(|(_, row)| row[col])
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: HierarchicalModel<T>,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

fn param_norms<T: Scalar>(model: &HierarchicalModel<T>) -> String {
    model
        .parameters()
        .iter()
        .map(|p| format!("{}={:.4e}", p.name, p.value.l2_norm().as_f64()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Trains a fresh model on `graphs` and returns the final-epoch model.
///
/// Initialization uses `config.seed`; the per-epoch shuffle draws from a
/// separate stream of the same seed.
pub fn train_one<T: Scalar>(
    graphs: &[&LabeledGraph<T>],
    num_classes: usize,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let first = graphs
        .first()
        .ok_or_else(|| Error::Invalid("empty training set".into()))?;
    let mut model =
        HierarchicalModel::new(config.model_config(first.features.cols(), num_classes))?;
    let adam = Adam::new(config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut steps = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let members: Vec<&LabeledGraph<T>> = chunk.iter().map(|&i| graphs[i]).collect();
            let batch = batch_graphs(&members)?;
            let loss = model.loss_and_backward(&batch)?.as_f64();
            let diagnose = |what: &str, model: &HierarchicalModel<T>| {
                Error::NonFinite(format!(
                    "{what} at epoch {epoch}, batch {b}; parameter norms: {}",
                    param_norms(model)
                ))
            };
            if !loss.is_finite() {
                return Err(diagnose(&format!("loss {loss}"), &model));
            }
            if let Err(Error::NonFinite(what)) = adam.step(&mut model.parameters_mut()) {
                return Err(diagnose(&what, &model));
            }
            steps += 1;
            total += loss * chunk.len() as f64;
        }
        epoch_losses.push(total / graphs.len() as f64);
    }
    Ok(TrainOutcome {
        model,
        epoch_losses,
        steps,
    })
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict<T: Scalar>(
    model: &HierarchicalModel<T>,
    graphs: &[&LabeledGraph<T>],
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(graphs.len());
    for chunk in graphs.chunks(EVAL_CHUNK) {
        if let Some(g) = chunk
            .iter()
            .find(|g| g.features.cols() != model.input_dim())
        {
            return Err(Error::shape(
                "evaluate",
                format!(
                    "graph has {} features, model expects {}",
                    g.features.cols(),
                    model.input_dim()
                ),
            ));
        }
        let logits = model.forward(&batch_graphs(chunk)?)?;
        out.extend((0..logits.rows()).map(|r| argmax(logits.row(r))));
    }
    Ok(out)
}

/// Fraction of graphs whose arg-max logit matches the label.
pub fn evaluate<T: Scalar>(
    model: &HierarchicalModel<T>,
    graphs: &[&LabeledGraph<T>],
) -> Result<f64> {
    if graphs.is_empty() {
        return Err(Error::Invalid("cannot evaluate on zero graphs".into()));
    }
    let hits = predict(model, graphs)?
        .iter()
        .zip(graphs)
        .filter(|(p, g)| **p == g.label)
        .count();
    Ok(hits as f64 / graphs.len() as f64)
}

pub fn make_folds(labels: &[usize], config: &TrainConfig) -> Result<Vec<FoldSplit>> {
    if config.stratified {
        stratified_kfold(labels, config.folds, config.seed)
    } else {
        kfold(labels.len(), config.folds, config.seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub seconds: f64,
    pub max_degree: Option<usize>,
    pub test_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub dataset: String,
    pub folds: Vec<FoldResult>,
    pub seconds: f64,
    pub config: Vec<(String, String)>,
}

impl RunResult {
    pub fn accuracies(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.accuracy).collect()
    }

    pub fn mean(&self) -> f64 {
        self.folds.iter().map(|f| f.accuracy).sum::<f64>() / self.folds.len() as f64
    }

    /// Population standard deviation of fold accuracies.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        let var = self
            .folds
            .iter()
            .map(|f| (f.accuracy - m).powi(2))
            .sum::<f64>()
            / self.folds.len() as f64;
        var.sqrt()
    }

    /// One line per fold; contains nothing that varies between identical runs.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("fold,accuracy,epochs,steps,final_loss\n");
        for f in &self.folds {
            let _ = writeln!(
                s,
                "{},{:.6},{},{},{:.9}",
                f.fold,
                f.accuracy,
                f.epoch_losses.len(),
                f.steps,
                f.epoch_losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        s
    }

    /// Wall-clock seconds per fold.
    pub fn timings_csv(&self) -> String {
        let mut s = String::from("fold,seconds\n");
        for f in &self.folds {
            let _ = writeln!(s, "{},{:.3}", f.fold, f.seconds);
        }
        s
    }

    /// Per-epoch mean training loss, one row per (fold, epoch).
    pub fn losses_csv(&self) -> String {
        let mut s = String::from("fold,epoch,loss\n");
        for f in &self.folds {
            for (e, l) in f.epoch_losses.iter().enumerate() {
                let _ = writeln!(s, "{},{},{:.9}", f.fold, e + 1, l);
            }
        }
        s
    }

    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset: {}", self.dataset);
        for (k, v) in &self.config {
            let _ = writeln!(s, "{k}: {v}");
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "fold  test_acc  train_acc  test_size  final_loss  seconds"
        );
        for f in &self.folds {
            let _ = writeln!(
                s,
                "{:>4}  {:>8.2}  {:>9.2}  {:>9}  {:>10.4}  {:>7.1}",
                f.fold,
                100.0 * f.accuracy,
                100.0 * f.train_accuracy,
                f.test_size,
                f.epoch_losses.last().copied().unwrap_or(f64::NAN),
                f.seconds
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "mean accuracy: {:.2} +/- {:.2} (percent, population std over {} folds)",
            100.0 * self.mean(),
            100.0 * self.std(),
            self.folds.len()
        );
        let _ = writeln!(s, "wall clock: {:.1} s", self.seconds);
        if let Some(col) = reference_column(&self.dataset) {
            let _ = writeln!(s);
            let _ = writeln!(s, "published accuracies on {}:", self.dataset);
            for (model, row) in REFERENCE_ACCURACY {
                let v = row[col].map_or("-".to_string(), |v| format!("{v:.2}"));
                let _ = writeln!(s, "  {model:<26} {v:>6}");
            }
        }
        s
    }
}

/// Features for one fold: degree features are rebuilt with a bound taken
/// from the training graphs only.
fn fold_dataset<T: Scalar>(
    dataset: &Dataset<T>,
    split: &FoldSplit,
    policy: MaxDegreePolicy,
) -> Result<Option<(Dataset<T>, usize)>> {
    let Some(bound) = fold_degree_bound(dataset, split, policy) else {
        return Ok(None);
    };
    let mut ds = dataset.clone();
    ds.set_degree_features(bound)?;
    Ok(Some((ds, bound)))
}

fn check_disjoint(split: &FoldSplit, n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in split.train_indices.iter().chain(&split.test_indices) {
        if i >= n || seen[i] {
            return Err(Error::Invalid(format!(
                "fold {}: graph {i} is out of range or appears twice",
                split.fold_index
            )));
        }
        seen[i] = true;
    }
    Ok(())
}

pub fn run_fold<T: Scalar>(
    dataset: &Dataset<T>,
    split: &FoldSplit,
    config: &TrainConfig,
) -> Result<FoldResult> {
    run_fold_with_model(dataset, split, config).map(|(r, _)| r)
}

/// Trains on the split's training graphs with seed `config.seed + fold`
/// and evaluates on its test graphs.
pub fn run_fold_with_model<T: Scalar>(
    dataset: &Dataset<T>,
    split: &FoldSplit,
    config: &TrainConfig,
) -> Result<(FoldResult, HierarchicalModel<T>)> {
    check_disjoint(split, dataset.len())?;
    let start = Instant::now();
    let rebuilt = fold_dataset(dataset, split, config.max_degree)?;
    let (ds, max_degree) = match &rebuilt {
        Some((ds, bound)) => (ds, Some(*bound)),
        None => (dataset, None),
    };
    let mut cfg = config.clone();
    cfg.seed = config.seed.wrapping_add(split.fold_index as u64);
    let train = ds.subset(&split.train_indices);
    let test = ds.subset(&split.test_indices);
    let outcome = train_one(&train, ds.num_classes, &cfg)?;
    let result = FoldResult {
        fold: split.fold_index,
        accuracy: if test.is_empty() {
            0.0
        } else {
            evaluate(&outcome.model, &test)?
        },
        train_accuracy: evaluate(&outcome.model, &train)?,
        epoch_losses: outcome.epoch_losses,
        steps: outcome.steps,
        seconds: start.elapsed().as_secs_f64(),
        max_degree,
        test_size: test.len(),
    };
    Ok((result, outcome.model))
}

/// Degree bound a fold trains with, if the dataset uses degree features.
pub fn fold_degree_bound<T: Scalar>(
    dataset: &Dataset<T>,
    split: &FoldSplit,
    policy: MaxDegreePolicy,
) -> Option<usize> {
    if dataset.feature_kind != FeatureKind::DegreeOnehot {
        return None;
    }
    Some(match policy {
        MaxDegreePolicy::TrainPercentile => dataset.degree_bound(&split.train_indices),
        MaxDegreePolicy::Fixed(d) => d,
    })
}

/// k-fold cross-validation with a fresh model per fold (seed = base seed +
/// fold index). Folds run on up to `jobs` threads; results do not depend on
/// `jobs`.
pub fn cross_validate<T: Scalar>(
    dataset: &Dataset<T>,
    config: &TrainConfig,
    jobs: usize,
) -> Result<RunResult> {
    config.validate()?;
    let start = Instant::now();
    let splits = make_folds(&dataset.labels(), config)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    let folds = pool.install(|| {
        splits
            .par_iter()
            .map(|s| run_fold(dataset, s, config))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut entries = config.entries();
    entries.push(("feature_kind".into(), dataset.feature_kind.to_string()));
    entries.push(("feature_dim".into(), dataset.feature_dim().to_string()));
    let bounds: Vec<String> = folds
        .iter()
        .filter_map(|f| f.max_degree.map(|d| d.to_string()))
        .collect();
    if !bounds.is_empty() {
        entries.push(("fold_max_degrees".into(), bounds.join(",")));
    }
    Ok(RunResult {
        dataset: dataset.name.clone(),
        folds,
        seconds: start.elapsed().as_secs_f64(),
        config: entries,
    })
}
