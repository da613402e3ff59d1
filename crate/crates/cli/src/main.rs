mod manifest;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use graphpool::data::{parse_tu_dataset, FeatureKind};
use graphpool::graph::batch_graphs;
use graphpool::membench::{parse_bytes, scaling_sweep, BenchConfig};
use graphpool::trainer::{
    cross_validate, dataset_defaults, fold_degree_bound, make_folds, run_fold_with_model,
    MaxDegreePolicy, RunResult, TrainConfig, DEFAULT_DATASETS,
};
use graphpool::{Dataset64, Model64, ReadoutPosition};

use manifest::{RunManifest, MANIFEST_FILE};

const MODEL_FILE: &str = "model.params";

#[derive(Parser)]
#[command(
    name = "graphpool",
    version,
    about = "Sparse hierarchical graph classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on one fold's training split and evaluate on its test split.
    Train(TrainArgs),
    /// k-fold cross-validation.
    Cv(CvArgs),
    /// Peak memory of the sparse model and the dense assignment baseline.
    BenchMem(BenchArgs),
    /// Write per-graph summary vectors (or logits) of a trained model.
    ExportSummaries(ExportArgs),
}

#[derive(Args, Clone, Default)]
struct DataArgs {
    /// Dataset name; files are read as <NAME>_A.txt etc.
    #[arg(long)]
    dataset: Option<String>,
    /// Directory holding the dataset files, or a parent with a <NAME>/
    /// subdirectory [default: data]
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Hidden features per block [default: dataset bundle]
    #[arg(long)]
    hidden: Option<usize>,
    /// Fraction of nodes kept by each pooling step [default: 0.8]
    #[arg(long)]
    ratio: Option<f64>,
    /// Adam learning rate [default: dataset bundle]
    #[arg(long)]
    lr: Option<f64>,
    /// Training epochs [default: dataset bundle]
    #[arg(long)]
    epochs: Option<usize>,
    /// Graphs per mini-batch [default: 64]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Base seed; fold f trains with seed + f [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Where block summaries are read: post_pool or pre_pool [default: post_pool]
    #[arg(long)]
    readout_position: Option<ReadoutPosition>,
    /// Fixed degree one-hot bound [default: 95th percentile of training degrees, in 1..=400]
    #[arg(long)]
    max_degree: Option<usize>,
    /// Number of folds [default: 10]
    #[arg(long)]
    folds: Option<usize>,
    /// Split folds without class stratification [default: stratified]
    #[arg(long)]
    no_stratify: bool,
    /// Fill unset options from a previous run's manifest
    #[arg(long)]
    from_manifest: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Fold used as the test split [default: 0]
    #[arg(long)]
    fold: Option<usize>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Folds trained concurrently (results do not depend on it)
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Print the per-dataset default configurations and exit
    #[arg(long)]
    show_defaults: bool,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated node counts, ascending
    #[arg(long, default_value = "2000,4000,8000,16000")]
    sizes: String,
    /// Memory budget such as 1GiB or 512MiB [default: none]
    #[arg(long)]
    budget: Option<String>,
    /// Random graph and feature seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    /// Parameter file written by `train`
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Graphs to export: test, train, all, or ids:<i,j,...> (0-based)
    #[arg(long, default_value = "test")]
    split: String,
    /// Fold defining the test/train split [default: the model's fold]
    #[arg(long)]
    fold: Option<usize>,
    /// Export logits instead of the pre-head summaries
    #[arg(long)]
    post_head: bool,
    /// Output file
    #[arg(long, default_value = "summaries.csv")]
    out: PathBuf,
}

/// 3 for numeric failures, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().any(|c| {
        matches!(
            c.downcast_ref::<graphpool::Error>(),
            Some(graphpool::Error::NonFinite(_))
        )
    });
    if numeric {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Cv(a) => cmd_cv(a),
        Command::BenchMem(a) => cmd_bench_mem(a),
        Command::ExportSummaries(a) => cmd_export_summaries(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

struct Resolved {
    name: String,
    dir: PathBuf,
    config: TrainConfig,
    manifest: Option<RunManifest>,
}

fn parse_entry<T: std::str::FromStr>(m: Option<&RunManifest>, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match m.and_then(|m| m.get(key)) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|e| anyhow!("manifest entry {key} = {v}: {e}")),
    }
}

fn dataset_dir(base: &Path, name: &str) -> PathBuf {
    let nested = base.join(name);
    if !base.join(format!("{name}_A.txt")).exists() && nested.join(format!("{name}_A.txt")).exists()
    {
        nested
    } else {
        base.to_path_buf()
    }
}

fn resolve(data: &DataArgs, args: &ConfigArgs, fallback: Option<RunManifest>) -> Result<Resolved> {
    let manifest = match &args.from_manifest {
        Some(p) => Some(RunManifest::read(p)?),
        None => fallback,
    };
    let m = manifest.as_ref();
    let name = data
        .dataset
        .clone()
        .or_else(|| m.and_then(|m| m.get("dataset")).map(String::from))
        .ok_or_else(|| anyhow!("--dataset is required"))?;
    let base = data
        .data_dir
        .clone()
        .or_else(|| m.and_then(|m| m.get("data_dir")).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"));
    let dir = dataset_dir(&base, &name);

    let bundle = dataset_defaults(&name);
    let need = |flag: &str| {
        anyhow!(
            "no default configuration for dataset {name}; pass {flag} (known: {})",
            DEFAULT_DATASETS.join(", ")
        )
    };
    let hidden = match args.hidden.or(parse_entry(m, "hidden")?) {
        Some(h) => h,
        None => bundle
            .as_ref()
            .map(|b| b.hidden_dim)
            .ok_or_else(|| need("--hidden"))?,
    };
    let lr = match args.lr.or(parse_entry(m, "lr")?) {
        Some(v) => v,
        None => bundle.as_ref().map(|b| b.lr).ok_or_else(|| need("--lr"))?,
    };
    let epochs = match args.epochs.or(parse_entry(m, "epochs")?) {
        Some(v) => v,
        None => bundle
            .as_ref()
            .map(|b| b.epochs)
            .ok_or_else(|| need("--epochs"))?,
    };
    let mut config = bundle.unwrap_or_else(|| TrainConfig::new(hidden, lr, epochs));
    config.hidden_dim = hidden;
    config.lr = lr;
    config.epochs = epochs;
    if let Some(v) = args.ratio.or(parse_entry(m, "ratio")?) {
        config.pool_ratio = v;
    }
    if let Some(v) = args.batch_size.or(parse_entry(m, "batch_size")?) {
        config.batch_size = v;
    }
    if let Some(v) = args.seed.or(parse_entry(m, "seed")?) {
        config.seed = v;
    }
    if let Some(v) = args
        .readout_position
        .or(parse_entry(m, "readout_position")?)
    {
        config.readout_position = v;
    }
    if let Some(v) = args.folds.or(parse_entry(m, "folds")?) {
        config.folds = v;
    }
    config.max_degree = match args.max_degree {
        Some(d) => MaxDegreePolicy::Fixed(d),
        None => match m.and_then(|m| m.get("max_degree")) {
            Some(s) => parse_degree_policy(s)?,
            None => MaxDegreePolicy::TrainPercentile,
        },
    };
    config.stratified = if args.no_stratify {
        false
    } else {
        parse_entry(m, "stratified")?.unwrap_or(true)
    };
    config.validate()?;
    Ok(Resolved {
        name,
        dir,
        config,
        manifest,
    })
}

fn parse_degree_policy(s: &str) -> Result<MaxDegreePolicy> {
    if s == MaxDegreePolicy::TrainPercentile.describe() {
        return Ok(MaxDegreePolicy::TrainPercentile);
    }
    let d = s
        .strip_prefix("fixed:")
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| anyhow!("bad max_degree entry {s:?}"))?;
    Ok(MaxDegreePolicy::Fixed(d))
}

fn load_dataset(r: &Resolved) -> Result<Dataset64> {
    Ok(parse_tu_dataset(&r.dir, &r.name)?)
}

fn base_manifest(command: &str, r: &Resolved) -> Result<RunManifest> {
    let mut m = RunManifest::new(command);
    m.set("dataset", &r.name);
    m.set("data_dir", r.dir.display());
    for (k, v) in r.config.entries() {
        m.set(&k, v);
    }
    m.add_checksums(&r.dir, &r.name)?;
    Ok(m)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let r = resolve(&args.data, &args.config, None)?;
    let ds = load_dataset(&r)?;
    let fold = args.fold.unwrap_or(0);
    let splits = make_folds(&ds.labels(), &r.config)?;
    let split = splits
        .get(fold)
        .ok_or_else(|| anyhow!("fold {fold} out of range for {} folds", splits.len()))?;
    let (result, model) = run_fold_with_model(&ds, split, &r.config)?;
    create_dir(&args.out)?;
    let model_path = args.out.join(MODEL_FILE);
    let file = fs::File::create(&model_path)
        .with_context(|| format!("creating {}", model_path.display()))?;
    model.save(std::io::BufWriter::new(file))?;

    let run = RunResult {
        dataset: r.name.clone(),
        folds: vec![result],
        seconds: 0.0,
        config: r.config.entries(),
    };
    write_file(&args.out.join("metrics.csv"), &run.metrics_csv())?;
    write_file(&args.out.join("losses.csv"), &run.losses_csv())?;
    write_file(&args.out.join("report.txt"), &run.report())?;

    let mut m = base_manifest("train", &r)?;
    m.set("fold", fold);
    m.set("fold_seed", r.config.seed.wrapping_add(fold as u64));
    if let Some(d) = run.folds[0].max_degree {
        m.set("fold_max_degree", d);
    }
    m.set("feature_kind", ds.feature_kind);
    m.set("model_file", MODEL_FILE);
    m.write(&args.out.join(MANIFEST_FILE))?;

    let f = &run.folds[0];
    println!(
        "{} fold {fold}: test accuracy {:.2}%, train accuracy {:.2}%, {} steps; wrote {}",
        r.name,
        100.0 * f.accuracy,
        100.0 * f.train_accuracy,
        f.steps,
        model_path.display()
    );
    Ok(())
}

fn defaults_table() -> String {
    let mut s = String::from("dataset   hidden  lr      epochs  ratio  blocks  batch_size\n");
    for name in DEFAULT_DATASETS {
        let c = dataset_defaults(name).expect("bundle exists");
        let _ = writeln!(
            s,
            "{:<9} {:<7} {:<7} {:<7} {:<6} {:<7} {}",
            name, c.hidden_dim, c.lr, c.epochs, c.pool_ratio, c.blocks, c.batch_size
        );
    }
    s
}

fn cmd_cv(args: CvArgs) -> Result<()> {
    if args.show_defaults {
        print!("{}", defaults_table());
        return Ok(());
    }
    let r = resolve(&args.data, &args.config, None)?;
    let ds = load_dataset(&r)?;
    let run = cross_validate(&ds, &r.config, args.jobs)?;
    create_dir(&args.out)?;
    write_file(&args.out.join("metrics.csv"), &run.metrics_csv())?;
    write_file(&args.out.join("timings.csv"), &run.timings_csv())?;
    write_file(&args.out.join("losses.csv"), &run.losses_csv())?;
    let report = run.report();
    write_file(&args.out.join("report.txt"), &report)?;

    let mut m = base_manifest("cv", &r)?;
    let seeds: Vec<String> = (0..r.config.folds)
        .map(|f| r.config.seed.wrapping_add(f as u64).to_string())
        .collect();
    m.set("fold_seeds", seeds.join(","));
    m.set("feature_kind", ds.feature_kind);
    for (k, v) in run.config.iter().skip(r.config.entries().len()) {
        m.set(k, v);
    }
    m.set("jobs", args.jobs);
    m.write(&args.out.join(MANIFEST_FILE))?;
    print!("{report}");
    Ok(())
}

fn parse_sizes(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| anyhow!("bad size {s:?} in --sizes"))
        })
        .collect()
}

fn cmd_bench_mem(args: BenchArgs) -> Result<()> {
    let sizes = parse_sizes(&args.sizes)?;
    let budget = args.budget.as_deref().map(parse_bytes).transpose()?;
    let config = BenchConfig {
        seed: args.seed,
        ..BenchConfig::default()
    };
    let sweep = scaling_sweep::<f64>(&sizes, budget, &config)?;
    create_dir(&args.out)?;
    let csv = sweep.csv();
    let summary = sweep.summary();
    write_file(&args.out.join("memory.csv"), &csv)?;
    write_file(&args.out.join("memory_summary.txt"), &summary)?;

    let mut m = RunManifest::new("bench-mem");
    m.set("sizes", &args.sizes);
    m.set(
        "budget_bytes",
        budget.map_or("none".to_string(), |b| b.to_string()),
    );
    m.set("seed", args.seed);
    m.set("features", config.features);
    m.set("hidden", config.hidden);
    m.set("blocks", config.blocks);
    m.set("edge_factor", config.edge_factor);
    m.set("dense_ratio", config.dense_ratio);
    m.set("scalar", "f64");
    m.write(&args.out.join(MANIFEST_FILE))?;
    print!("{csv}\n{summary}");
    Ok(())
}

fn export_indices(split: &str, ds: &Dataset64, r: &Resolved, fold: usize) -> Result<Vec<usize>> {
    if let Some(list) = split.strip_prefix("ids:") {
        let ids: Vec<usize> = list
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse().map_err(|_| anyhow!("bad graph id {s:?}")))
            .collect::<Result<_>>()?;
        if let Some(bad) = ids.iter().find(|&&i| i >= ds.len()) {
            bail!("graph id {bad} out of range for {} graphs", ds.len());
        }
        return Ok(ids);
    }
    match split {
        "all" => Ok((0..ds.len()).collect()),
        "test" | "train" => {
            let splits = make_folds(&ds.labels(), &r.config)?;
            let s = splits
                .get(fold)
                .ok_or_else(|| anyhow!("fold {fold} out of range for {} folds", splits.len()))?;
            Ok(if split == "test" {
                s.test_indices.clone()
            } else {
                s.train_indices.clone()
            })
        }
        other => bail!("unknown split {other:?}; use test, train, all or ids:<list>"),
    }
}

fn cmd_export_summaries(args: ExportArgs) -> Result<()> {
    let adjacent = args
        .model
        .parent()
        .map(|d| d.join(MANIFEST_FILE))
        .filter(|p| p.is_file())
        .map(|p| RunManifest::read(&p))
        .transpose()?;
    let r = resolve(&args.data, &args.config, adjacent)?;
    let m = r.manifest.as_ref();
    let fold = match args.fold {
        Some(f) => f,
        None => parse_entry(m, "fold")?.unwrap_or(0),
    };
    let mut ds = load_dataset(&r)?;
    if ds.feature_kind == FeatureKind::DegreeOnehot {
        let bound = match r.config.max_degree {
            MaxDegreePolicy::Fixed(d) => d,
            MaxDegreePolicy::TrainPercentile => match parse_entry(m, "fold_max_degree")? {
                Some(d) => d,
                None => {
                    let splits = make_folds(&ds.labels(), &r.config)?;
                    let s = splits
                        .get(fold)
                        .ok_or_else(|| anyhow!("fold {fold} out of range"))?;
                    fold_degree_bound(&ds, s, r.config.max_degree).expect("degree features")
                }
            },
        };
        ds.set_degree_features(bound)?;
    }
    let file =
        fs::File::open(&args.model).with_context(|| format!("opening {}", args.model.display()))?;
    let model = Model64::load(
        std::io::BufReader::new(file),
        r.config.pool_ratio,
        r.config.readout_position,
    )?;
    if model.input_dim() != ds.feature_dim() {
        bail!(
            "model expects {} input features, dataset {} has {}",
            model.input_dim(),
            r.name,
            ds.feature_dim()
        );
    }
    let indices = export_indices(&args.split, &ds, &r, fold)?;

    let mut out = String::new();
    for chunk in indices.chunks(256) {
        let graphs = ds.subset(chunk);
        let batch = batch_graphs(&graphs)?;
        let rows = if args.post_head {
            model.forward(&batch)?
        } else {
            model.summaries(&batch)?
        };
        for (i, &g) in chunk.iter().enumerate() {
            let _ = write!(out, "{},{}", g, ds.label_values[ds.graphs[g].label]);
            for v in rows.row(i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_file(&args.out, &out)?;

    let mut manifest = base_manifest("export-summaries", &r)?;
    manifest.set("model", args.model.display());
    manifest.set("split", &args.split);
    manifest.set("fold", fold);
    manifest.set("post_head", args.post_head);
    manifest.set("rows", indices.len());
    if let Some(d) = ds.max_degree {
        manifest.set("fold_max_degree", d);
    }
    let mut mpath = args.out.clone().into_os_string();
    mpath.push(".manifest.txt");
    manifest.write(Path::new(&mpath))?;
    println!(
        "wrote {} rows of {} values to {}",
        indices.len(),
        if args.post_head {
            model.num_classes()
        } else {
            model.summary_dim()
        },
        args.out.display()
    );
    Ok(())
}
