//! The six subcommands: dataset generation, training, evaluation,
//! prediction, the four-variant ablation grid, and taxonomy inspection.
//!
//! Commands are pure functions of their input files and resolved
//! configuration: identical inputs produce byte-identical artifacts.
//! `ablation` literally composes the training and evaluation pipelines per
//! variant, so its per-variant outputs match standalone `train` + `eval`
//! runs with the same settings.

use std::path::{Path, PathBuf};

use dttc_core::data::{generate_synthetic, read_features_any, split, Dataset, SyntheticSpec};
use dttc_core::fairness::{FairnessConfig, GroupVocab};
use dttc_core::metrics::{self, fmt_f64, MetricsReport, ReportOptions};
use dttc_core::taxonomy::{Taxonomy, TaxonomyOptions};
use dttc_core::trainer::{fit, TrainConfig};
use dttc_core::ttc::{argmax, forward_with, predict_paths, ModelParams, Variant};
use dttc_core::{Error, Result};
use ndarray::Array1;

use crate::config::Resolver;

// ---------------------------------------------------------------------------
// Flag groups shared between subcommands
// ---------------------------------------------------------------------------

#[derive(clap::Args, Debug)]
pub struct TaxonomyFlags {
    /// Taxonomy file: `child<TAB>parent` lines (`-` marks roots) or JSON.
    #[arg(long, value_name = "PATH")]
    pub taxonomy: Option<String>,
    /// Pad childless internal classes with a `<name>:other` child instead
    /// of rejecting the taxonomy (true/false).
    #[arg(long, value_name = "BOOL")]
    pub allow_childless: Option<String>,
}

#[derive(clap::Args, Debug)]
pub struct DataFlags {
    /// Feature matrix: binary container, or CSV if the path ends in `.csv`.
    #[arg(long, value_name = "PATH")]
    pub features: Option<String>,
    /// Label paths CSV: `id,l1,...,ln` with class names.
    #[arg(long, value_name = "PATH")]
    pub labels: Option<String>,
    /// Group tags CSV: `id,group`.
    #[arg(long, value_name = "PATH")]
    pub groups: Option<String>,
}

#[derive(clap::Args, Debug)]
pub struct SgdFlags {
    /// Softmax temperature.
    #[arg(long, value_name = "FLOAT")]
    pub tau: Option<String>,
    /// Learning rate.
    #[arg(long, value_name = "FLOAT")]
    pub lr: Option<String>,
    /// Momentum coefficient in [0, 1).
    #[arg(long, value_name = "FLOAT")]
    pub momentum: Option<String>,
    #[arg(long, value_name = "N")]
    pub epochs: Option<String>,
    #[arg(long, value_name = "N")]
    pub batch_size: Option<String>,
    /// Seeds initialization and epoch shuffles.
    #[arg(long, value_name = "N")]
    pub seed: Option<String>,
    /// Per-level loss priorities, e.g. `1,1,0.5` (default: all ones).
    #[arg(long, value_name = "LIST")]
    pub pi: Option<String>,
    /// Mask treatment in gradients: `detached` or `full`.
    #[arg(long, value_name = "MODE")]
    pub mask_gradient: Option<String>,
    /// Dynamic-weight refresh: `batch` or `epoch`.
    #[arg(long, value_name = "MODE")]
    pub weight_cadence: Option<String>,
}

#[derive(clap::Args, Debug)]
pub struct FairFlags {
    /// Stabilizer in the weight denominator `1 / (count + epsilon)`.
    #[arg(long, value_name = "FLOAT")]
    pub epsilon: Option<String>,
    /// Rescale each level's weights to batch mean 1 (true/false).
    #[arg(long, value_name = "BOOL")]
    pub normalize_weights: Option<String>,
    /// Sensitive group tags, comma-separated.
    #[arg(long, value_name = "LIST")]
    pub sensitive: Option<String>,
    /// The neutral group tag.
    #[arg(long, value_name = "TAG")]
    pub neutral: Option<String>,
}

// ---------------------------------------------------------------------------
// Per-command argument sets
// ---------------------------------------------------------------------------

#[derive(clap::Args, Debug)]
pub struct GenerateArgs {
    /// Flat `key = value` config file; flags override its entries.
    #[arg(long, value_name = "PATH")]
    pub config: Option<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<String>,
    #[command(flatten)]
    pub tax: TaxonomyFlags,
    /// Build the taxonomy instead of loading one: children per parent at
    /// each level, starting with the number of roots, e.g. `2,2,2`.
    #[arg(long, value_name = "LIST")]
    pub branching: Option<String>,
    #[arg(long, value_name = "N")]
    pub samples_per_leaf: Option<String>,
    /// Feature dimension.
    #[arg(long, value_name = "N")]
    pub dim: Option<String>,
    /// Scale of the level-1 cluster offsets.
    #[arg(long, value_name = "FLOAT")]
    pub separation: Option<String>,
    /// Probability of corrupting a biased-group sample toward a sibling
    /// cluster.
    #[arg(long, value_name = "FLOAT")]
    pub bias_strength: Option<String>,
    /// Group whose samples the corruption applies to.
    #[arg(long, value_name = "TAG")]
    pub biased_group: Option<String>,
    /// `Tag:weight` pairs summing to 1, e.g.
    /// `Male:0.35,Female:0.15,Background:0.5`.
    #[arg(long, value_name = "LIST")]
    pub proportions: Option<String>,
    #[arg(long, value_name = "N")]
    pub seed: Option<String>,
    /// When set, split and write `train_*` / `test_*` file pairs instead of
    /// a single set.
    #[arg(long, value_name = "FLOAT")]
    pub train_fraction: Option<String>,
    /// Stratify the split by (leaf, group) (true/false).
    #[arg(long, value_name = "BOOL")]
    pub stratify: Option<String>,
    /// Sensitive group tags, comma-separated.
    #[arg(long, value_name = "LIST")]
    pub sensitive: Option<String>,
    /// The neutral group tag.
    #[arg(long, value_name = "TAG")]
    pub neutral: Option<String>,
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    /// Flat `key = value` config file; flags override its entries.
    #[arg(long, value_name = "PATH")]
    pub config: Option<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<String>,
    #[command(flatten)]
    pub tax: TaxonomyFlags,
    #[command(flatten)]
    pub data: DataFlags,
    /// Model variant: `base`, `d`, `h`, or `hd`.
    #[arg(long, value_name = "CODE")]
    pub variant: Option<String>,
    #[command(flatten)]
    pub sgd: SgdFlags,
    #[command(flatten)]
    pub fair: FairFlags,
}

#[derive(clap::Args, Debug)]
pub struct EvalArgs {
    /// Flat `key = value` config file; flags override its entries.
    #[arg(long, value_name = "PATH")]
    pub config: Option<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<String>,
    /// Trained model checkpoint.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<String>,
    #[command(flatten)]
    pub tax: TaxonomyFlags,
    #[command(flatten)]
    pub data: DataFlags,
    /// Sensitive group tags, comma-separated.
    #[arg(long, value_name = "LIST")]
    pub sensitive: Option<String>,
    /// The neutral group tag.
    #[arg(long, value_name = "TAG")]
    pub neutral: Option<String>,
    /// Combine per-level equalized-odds values by `mean` or `max`.
    #[arg(long, value_name = "MODE")]
    pub eo_aggregate: Option<String>,
}

#[derive(clap::Args, Debug)]
pub struct PredictArgs {
    /// Flat `key = value` config file; flags override its entries.
    #[arg(long, value_name = "PATH")]
    pub config: Option<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<String>,
    /// Trained model checkpoint.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<String>,
    #[command(flatten)]
    pub tax: TaxonomyFlags,
    /// Feature matrix to predict for.
    #[arg(long, value_name = "PATH")]
    pub features: Option<String>,
}

#[derive(clap::Args, Debug)]
pub struct AblationArgs {
    /// Flat `key = value` config file; flags override its entries.
    #[arg(long, value_name = "PATH")]
    pub config: Option<String>,
    /// Output directory; each variant gets a subdirectory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<String>,
    #[command(flatten)]
    pub tax: TaxonomyFlags,
    #[command(flatten)]
    pub data: DataFlags,
    /// Held-out feature matrix for evaluation.
    #[arg(long, value_name = "PATH")]
    pub test_features: Option<String>,
    /// Held-out label paths for evaluation.
    #[arg(long, value_name = "PATH")]
    pub test_labels: Option<String>,
    /// Held-out group tags for evaluation.
    #[arg(long, value_name = "PATH")]
    pub test_groups: Option<String>,
    #[command(flatten)]
    pub sgd: SgdFlags,
    #[command(flatten)]
    pub fair: FairFlags,
    /// Combine per-level equalized-odds values by `mean` or `max`.
    #[arg(long, value_name = "MODE")]
    pub eo_aggregate: Option<String>,
}

#[derive(clap::Args, Debug)]
pub struct InspectArgs {
    /// Flat `key = value` config file; flags override its entries.
    #[arg(long, value_name = "PATH")]
    pub config: Option<String>,
    #[command(flatten)]
    pub tax: TaxonomyFlags,
}

// ---------------------------------------------------------------------------
// Allowed config-file keys per command
// ---------------------------------------------------------------------------

const GENERATE_KEYS: &[&str] = &[
    "allow-childless",
    "bias-strength",
    "biased-group",
    "branching",
    "dim",
    "neutral",
    "out",
    "proportions",
    "samples-per-leaf",
    "seed",
    "sensitive",
    "separation",
    "stratify",
    "taxonomy",
    "train-fraction",
];

const TRAIN_KEYS: &[&str] = &[
    "allow-childless",
    "batch-size",
    "epochs",
    "epsilon",
    "features",
    "groups",
    "labels",
    "lr",
    "mask-gradient",
    "momentum",
    "neutral",
    "normalize-weights",
    "out",
    "pi",
    "seed",
    "sensitive",
    "tau",
    "taxonomy",
    "variant",
    "weight-cadence",
];

const EVAL_KEYS: &[&str] = &[
    "allow-childless",
    "checkpoint",
    "eo-aggregate",
    "features",
    "groups",
    "labels",
    "neutral",
    "out",
    "sensitive",
    "taxonomy",
];

const PREDICT_KEYS: &[&str] = &[
    "allow-childless",
    "checkpoint",
    "features",
    "out",
    "taxonomy",
];

const ABLATION_KEYS: &[&str] = &[
    "allow-childless",
    "batch-size",
    "eo-aggregate",
    "epochs",
    "epsilon",
    "features",
    "groups",
    "labels",
    "lr",
    "mask-gradient",
    "momentum",
    "neutral",
    "normalize-weights",
    "out",
    "pi",
    "seed",
    "sensitive",
    "tau",
    "taxonomy",
    "test-features",
    "test-groups",
    "test-labels",
    "weight-cadence",
];

const INSPECT_KEYS: &[&str] = &["allow-childless", "taxonomy"];

// ---------------------------------------------------------------------------
// Shared resolution and pipeline pieces
// ---------------------------------------------------------------------------

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn load_taxonomy(r: &mut Resolver, flags: &TaxonomyFlags) -> Result<Taxonomy> {
    let allow_childless = r.bool("allow-childless", flags.allow_childless.as_ref(), false)?;
    let path = r.required_path("taxonomy", flags.taxonomy.as_ref())?;
    Taxonomy::load(&path, TaxonomyOptions { allow_childless })
}

fn resolve_fairness(r: &mut Resolver, flags: &FairFlags) -> Result<FairnessConfig> {
    let d = FairnessConfig::default();
    Ok(FairnessConfig {
        sensitive: r.list("sensitive", flags.sensitive.as_ref(), &["Male", "Female"])?,
        neutral: r.string("neutral", flags.neutral.as_ref(), &d.neutral),
        epsilon: r.f64("epsilon", flags.epsilon.as_ref(), d.epsilon)?,
        normalize: r.bool(
            "normalize-weights",
            flags.normalize_weights.as_ref(),
            d.normalize,
        )?,
    })
}

fn resolve_vocab(
    r: &mut Resolver,
    sensitive: Option<&String>,
    neutral: Option<&String>,
) -> Result<GroupVocab> {
    let sensitive = r.list("sensitive", sensitive, &["Male", "Female"])?;
    let neutral = r.string("neutral", neutral, "Background");
    GroupVocab::new(&sensitive, &neutral)
}

/// Resolve the optimizer settings (everything in [`TrainConfig`] except the
/// variant, which `train` resolves itself and `ablation` sweeps).
fn resolve_sgd(
    r: &mut Resolver,
    flags: &SgdFlags,
    fairness: FairnessConfig,
) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let pi = match r.opt_list("pi", flags.pi.as_ref())? {
        None => None,
        Some(items) => {
            let values = parse_f64_list("pi", &items)?;
            let canonical: Vec<String> = values.iter().map(|v| fmt_f64(*v)).collect();
            r.record_override("pi", canonical.join(","));
            Some(values)
        }
    };
    Ok(TrainConfig {
        variant: d.variant,
        tau: r.f64("tau", flags.tau.as_ref(), d.tau)?,
        lr: r.f64("lr", flags.lr.as_ref(), d.lr)?,
        momentum: r.f64("momentum", flags.momentum.as_ref(), d.momentum)?,
        epochs: r.usize("epochs", flags.epochs.as_ref(), d.epochs)?,
        batch_size: r.usize("batch-size", flags.batch_size.as_ref(), d.batch_size)?,
        seed: r.u64("seed", flags.seed.as_ref(), d.seed)?,
        pi,
        mask_gradient: r.parse_as(
            "mask-gradient",
            flags.mask_gradient.as_ref(),
            "detached",
            |s| s.parse(),
        )?,
        weight_cadence: r.parse_as(
            "weight-cadence",
            flags.weight_cadence.as_ref(),
            "batch",
            |s| s.parse(),
        )?,
        fairness,
    })
}

fn resolve_report_options(r: &mut Resolver, flag: Option<&String>) -> Result<ReportOptions> {
    Ok(ReportOptions {
        eo_aggregate: r.parse_as("eo-aggregate", flag, "mean", |s| s.parse())?,
    })
}

fn load_dataset(
    r: &mut Resolver,
    keys: [&'static str; 3],
    paths: [Option<&String>; 3],
    tax: &Taxonomy,
    vocab: &GroupVocab,
) -> Result<Dataset> {
    let features = r.required_path(keys[0], paths[0])?;
    let labels = r.required_path(keys[1], paths[1])?;
    let groups = r.required_path(keys[2], paths[2])?;
    Dataset::load(&features, &labels, &groups, tax, vocab)
}

/// Fit one variant and write `checkpoint` + `report.jsonl` into `dir`.
fn train_into(ds: &Dataset, tax: &Taxonomy, cfg: &TrainConfig, dir: &Path) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let (params, report) = fit(ds, tax, cfg)?;
    let checkpoint = dir.join("checkpoint");
    params.save(&checkpoint)?;
    report.write(&dir.join("report.jsonl"))?;
    Ok(checkpoint)
}

/// Evaluate a saved checkpoint and write `metrics.json` + `metrics.csv`
/// into `dir`.
fn eval_into(
    checkpoint: &Path,
    tax: &Taxonomy,
    ds: &Dataset,
    vocab: &GroupVocab,
    opts: ReportOptions,
    dir: &Path,
) -> Result<MetricsReport> {
    ensure_dir(dir)?;
    let params = ModelParams::load(checkpoint)?;
    params.validate_against(tax, ds.dim())?;
    let pred = predict_paths(&params, tax, ds.features_f64().view())?;
    let report = metrics::report(&pred, &ds.labels, &ds.groups, vocab, tax, opts)?;
    write_text(&dir.join("metrics.json"), &report.to_json())?;
    write_text(&dir.join("metrics.csv"), &report.to_csv())?;
    Ok(report)
}

fn parse_f64_list(key: &str, items: &[String]) -> Result<Vec<f64>> {
    items
        .iter()
        .map(|item| {
            item.parse::<f64>()
                .map_err(|_| Error::Config(format!("'{key}': '{item}' is not a number")))
        })
        .collect()
}

fn parse_usize_list(key: &str, items: &[String]) -> Result<Vec<usize>> {
    items
        .iter()
        .map(|item| {
            item.parse::<usize>()
                .map_err(|_| Error::Config(format!("'{key}': '{item}' is not a positive integer")))
        })
        .collect()
}

fn parse_proportions(items: &[String]) -> Result<Vec<(String, f64)>> {
    items
        .iter()
        .map(|item| {
            let (tag, weight) = item.split_once(':').ok_or_else(|| {
                Error::Config(format!("proportions entry '{item}' must be 'Tag:weight'"))
            })?;
            let weight = weight.trim().parse::<f64>().map_err(|_| {
                Error::Config(format!(
                    "proportions entry '{item}': '{}' is not a number",
                    weight.trim()
                ))
            })?;
            Ok((tag.trim().to_string(), weight))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

pub fn generate(args: &GenerateArgs) -> Result<()> {
    let mut r = Resolver::new(args.config.as_ref(), GENERATE_KEYS)?;
    let out = r.required_path("out", args.out.as_ref())?;
    let allow_childless = r.bool("allow-childless", args.tax.allow_childless.as_ref(), false)?;

    let tax_path = r.path("taxonomy", args.tax.taxonomy.as_ref());
    let branching = r.opt_list("branching", args.branching.as_ref())?;
    let tax = match (&tax_path, &branching) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "give either 'taxonomy' or 'branching', not both".into(),
            ))
        }
        (Some(path), None) => Taxonomy::load(path, TaxonomyOptions { allow_childless })?,
        (None, Some(items)) => {
            let counts = parse_usize_list("branching", items)?;
            let canonical: Vec<String> = counts.iter().map(|c| c.to_string()).collect();
            r.record_override("branching", canonical.join(","));
            Taxonomy::from_branching(&counts)?
        }
        (None, None) => {
            return Err(Error::Config(
                "a taxonomy is required: pass --taxonomy FILE or --branching LIST".into(),
            ))
        }
    };

    let sensitive = r.list("sensitive", args.sensitive.as_ref(), &["Male", "Female"])?;
    let neutral = r.string("neutral", args.neutral.as_ref(), "Background");
    let vocab = GroupVocab::new(&sensitive, &neutral)?;

    let d = SyntheticSpec::default();
    let prop_items = r.list(
        "proportions",
        args.proportions.as_ref(),
        &["Male:0.35", "Female:0.15", "Background:0.5"],
    )?;
    let proportions = parse_proportions(&prop_items)?;
    let canonical: Vec<String> = proportions
        .iter()
        .map(|(tag, w)| format!("{tag}:{}", fmt_f64(*w)))
        .collect();
    r.record_override("proportions", canonical.join(","));

    let spec = SyntheticSpec {
        samples_per_leaf: r.usize(
            "samples-per-leaf",
            args.samples_per_leaf.as_ref(),
            d.samples_per_leaf,
        )?,
        dim: r.usize("dim", args.dim.as_ref(), d.dim)?,
        separation: r.f64("separation", args.separation.as_ref(), d.separation)?,
        bias_strength: r.f64(
            "bias-strength",
            args.bias_strength.as_ref(),
            d.bias_strength,
        )?,
        biased_group: r.string("biased-group", args.biased_group.as_ref(), &d.biased_group),
        proportions,
        seed: r.u64("seed", args.seed.as_ref(), d.seed)?,
    };
    let fraction = r.opt_f64("train-fraction", args.train_fraction.as_ref())?;
    let stratify = if fraction.is_some() {
        r.bool("stratify", args.stratify.as_ref(), true)?
    } else {
        true
    };

    ensure_dir(&out)?;
    r.write_resolved(&out)?;
    let ds = generate_synthetic(&spec, &tax, &vocab)?;
    if branching.is_some() {
        write_text(&out.join("taxonomy.txt"), &tax.to_text())?;
    }
    match fraction {
        None => {
            ds.write(
                &out.join("features.bin"),
                &out.join("labels.csv"),
                &out.join("groups.csv"),
                &tax,
                &vocab,
            )?;
            log::info!("generated {} instances", ds.len());
        }
        Some(f) => {
            let (train, test) = split(&ds, f, spec.seed, stratify)?;
            train.write(
                &out.join("train_features.bin"),
                &out.join("train_labels.csv"),
                &out.join("train_groups.csv"),
                &tax,
                &vocab,
            )?;
            test.write(
                &out.join("test_features.bin"),
                &out.join("test_labels.csv"),
                &out.join("test_groups.csv"),
                &tax,
                &vocab,
            )?;
            log::info!(
                "generated {} instances, split {}/{}",
                ds.len(),
                train.len(),
                test.len()
            );
        }
    }
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut r = Resolver::new(args.config.as_ref(), TRAIN_KEYS)?;
    let out = r.required_path("out", args.out.as_ref())?;
    let tax = load_taxonomy(&mut r, &args.tax)?;
    let fairness = resolve_fairness(&mut r, &args.fair)?;
    let vocab = fairness.vocab()?;
    let ds = load_dataset(
        &mut r,
        ["features", "labels", "groups"],
        [
            args.data.features.as_ref(),
            args.data.labels.as_ref(),
            args.data.groups.as_ref(),
        ],
        &tax,
        &vocab,
    )?;
    let mut cfg = resolve_sgd(&mut r, &args.sgd, fairness)?;
    cfg.variant = r.parse_as("variant", args.variant.as_ref(), "base", Variant::from_code)?;

    ensure_dir(&out)?;
    r.write_resolved(&out)?;
    train_into(&ds, &tax, &cfg, &out)?;
    log::info!(
        "trained variant {} on {} instances for {} epochs",
        cfg.variant.code(),
        ds.len(),
        cfg.epochs
    );
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let mut r = Resolver::new(args.config.as_ref(), EVAL_KEYS)?;
    let out = r.required_path("out", args.out.as_ref())?;
    let checkpoint = r.required_path("checkpoint", args.checkpoint.as_ref())?;
    let tax = load_taxonomy(&mut r, &args.tax)?;
    let vocab = resolve_vocab(&mut r, args.sensitive.as_ref(), args.neutral.as_ref())?;
    let ds = load_dataset(
        &mut r,
        ["features", "labels", "groups"],
        [
            args.data.features.as_ref(),
            args.data.labels.as_ref(),
            args.data.groups.as_ref(),
        ],
        &tax,
        &vocab,
    )?;
    let opts = resolve_report_options(&mut r, args.eo_aggregate.as_ref())?;

    ensure_dir(&out)?;
    r.write_resolved(&out)?;
    let report = eval_into(&checkpoint, &tax, &ds, &vocab, opts, &out)?;
    log::info!(
        "hf1 {} consistency {} exact {}",
        fmt_f64(report.hf1),
        fmt_f64(report.consistency),
        fmt_f64(report.exact_match)
    );
    Ok(())
}

pub fn predict(args: &PredictArgs) -> Result<()> {
    let mut r = Resolver::new(args.config.as_ref(), PREDICT_KEYS)?;
    let out = r.required_path("out", args.out.as_ref())?;
    let checkpoint = r.required_path("checkpoint", args.checkpoint.as_ref())?;
    let tax = load_taxonomy(&mut r, &args.tax)?;
    let features_path = r.required_path("features", args.features.as_ref())?;

    let params = ModelParams::load(&checkpoint)?;
    let features = read_features_any(&features_path)?;
    params.validate_against(&tax, features.ncols())?;
    let transitions = tax.transition_matrices()?;
    let n = tax.n_levels();

    let mut csv = String::from("id");
    for level in 1..=n {
        csv.push_str(&format!(",l{level}"));
    }
    for level in 1..=n {
        csv.push_str(&format!(",p{level}"));
    }
    csv.push('\n');
    for (j, row) in features.outer_iter().enumerate() {
        let row64: Array1<f64> = row.iter().map(|&v| v as f64).collect();
        let trace = forward_with(&params, &transitions, row64.view())?;
        let mut names = Vec::with_capacity(n);
        let mut probs = Vec::with_capacity(n);
        for level in 0..n {
            let local = argmax(trace.probs[level].view());
            names.push(tax.name(tax.class_id(level, local)).to_string());
            probs.push(fmt_f64(trace.probs[level][local]));
        }
        csv.push_str(&format!("r{j},{},{}\n", names.join(","), probs.join(",")));
    }

    ensure_dir(&out)?;
    r.write_resolved(&out)?;
    write_text(&out.join("predictions.csv"), &csv)?;
    log::info!("predicted {} instances", features.nrows());
    Ok(())
}

pub fn ablation(args: &AblationArgs) -> Result<()> {
    let mut r = Resolver::new(args.config.as_ref(), ABLATION_KEYS)?;
    let out = r.required_path("out", args.out.as_ref())?;
    let tax = load_taxonomy(&mut r, &args.tax)?;
    let fairness = resolve_fairness(&mut r, &args.fair)?;
    let vocab = fairness.vocab()?;
    let train_ds = load_dataset(
        &mut r,
        ["features", "labels", "groups"],
        [
            args.data.features.as_ref(),
            args.data.labels.as_ref(),
            args.data.groups.as_ref(),
        ],
        &tax,
        &vocab,
    )?;
    let test_ds = load_dataset(
        &mut r,
        ["test-features", "test-labels", "test-groups"],
        [
            args.test_features.as_ref(),
            args.test_labels.as_ref(),
            args.test_groups.as_ref(),
        ],
        &tax,
        &vocab,
    )?;
    let base_cfg = resolve_sgd(&mut r, &args.sgd, fairness)?;
    let opts = resolve_report_options(&mut r, args.eo_aggregate.as_ref())?;

    ensure_dir(&out)?;
    r.write_resolved(&out)?;
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let cfg = TrainConfig {
            variant,
            ..base_cfg.clone()
        };
        let dir = out.join(variant.code());
        let checkpoint = train_into(&train_ds, &tax, &cfg, &dir)?;
        let report = eval_into(&checkpoint, &tax, &test_ds, &vocab, opts, &dir)?;
        log::info!(
            "{}: hf1 {} consistency {} exact {}",
            variant.code(),
            fmt_f64(report.hf1),
            fmt_f64(report.consistency),
            fmt_f64(report.exact_match)
        );
        rows.push((variant, report));
    }
    write_text(&out.join("ablation.csv"), &ablation_csv(&rows))?;
    Ok(())
}

pub fn inspect(args: &InspectArgs) -> Result<()> {
    let mut r = Resolver::new(args.config.as_ref(), INSPECT_KEYS)?;
    let tax = load_taxonomy(&mut r, &args.tax)?;
    let sizes: Vec<String> = (0..tax.n_levels())
        .map(|level| tax.level_size(level).to_string())
        .collect();
    println!("levels: {}", sizes.join("/"));
    println!("classes: {}", tax.total_classes());
    for level in 0..tax.n_levels() - 1 {
        let t = tax.transition_matrix(level)?;
        println!(
            "transition {}->{}: {}x{}",
            level + 1,
            level + 2,
            t.rows(),
            t.cols()
        );
    }
    println!("ok");
    Ok(())
}

/// The comparison table: one row per variant with the headline metrics,
/// per-level accuracy, and deltas against the Base row.
fn ablation_csv(rows: &[(Variant, MetricsReport)]) -> String {
    let n = rows[0].1.eo_per_level.len();
    let mut out = String::from("variant,hf1,consistency,exact_match");
    for level in 1..=n {
        out.push_str(&format!(",eo_l{level}"));
    }
    out.push_str(",eo_avg");
    for level in 1..=n {
        out.push_str(&format!(",acc_l{level}"));
    }
    out.push_str(",delta_hf1,delta_consistency,delta_exact_match,delta_eo_avg\n");

    let base = rows[0].1.clone();
    for (variant, report) in rows {
        out.push_str(variant.code());
        for value in [report.hf1, report.consistency, report.exact_match] {
            out.push(',');
            out.push_str(&fmt_f64(value));
        }
        for eo in &report.eo_per_level {
            out.push(',');
            if let Some(v) = eo {
                out.push_str(&fmt_f64(*v));
            }
        }
        out.push(',');
        if let Some(v) = report.eo_avg {
            out.push_str(&fmt_f64(v));
        }
        for acc in &report.per_level_accuracy {
            out.push(',');
            out.push_str(&fmt_f64(*acc));
        }
        for (value, reference) in [
            (report.hf1, base.hf1),
            (report.consistency, base.consistency),
            (report.exact_match, base.exact_match),
        ] {
            out.push(',');
            out.push_str(&fmt_f64(value - reference));
        }
        out.push(',');
        if let (Some(v), Some(b)) = (report.eo_avg, base.eo_avg) {
            out.push_str(&fmt_f64(v - b));
        }
        out.push('\n');
    }
    out
}
