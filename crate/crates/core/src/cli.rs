//! Command-line interface: `generate`, `train`, `report` and `compare`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::data::{self, DataMatrix, LikelihoodHint, Truth};
use crate::diffcore::{softplus, NdArray};
use crate::elbo::{PriorConfig, Scheme};
use crate::error::{Error, Result};
use crate::metrics::{self, ClusterAssignment};
use crate::model::{Likelihood, ModelConfig};
use crate::trainer::{self, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "basiscluster", version, about = "Feature clustering with basis-function VAEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic data set and its ground-truth sidecar.
    Generate(GenerateArgs),
    /// Train a model and write checkpoint, ELBO trace and manifest.
    Train(TrainArgs),
    /// Export clusters, parameters and fitted curves from a checkpoint.
    Report(ReportArgs),
    /// Compare inference schemes (and k-means) against ground truth.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Kind {
    #[value(name = "five_cluster")]
    FiveCluster,
    Shifted,
    Zinb,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    /// Number of observations.
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// Features per group (five_cluster).
    #[arg(long, default_value_t = 10)]
    per_group: usize,
    /// Number of features (shifted, zinb).
    #[arg(long, default_value_t = 30)]
    p: usize,
    #[arg(long, default_value_t = -2.0, allow_hyphen_values = true)]
    shift_min: f64,
    #[arg(long, default_value_t = 2.0, allow_hyphen_values = true)]
    shift_max: f64,
    #[arg(long, default_value_t = 0.05)]
    noise_sd: f64,
    #[arg(long, default_value_t = 5.0)]
    inv_dispersion: f64,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV; the truth sidecar goes next to it as `<stem>.truth.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args)]
struct DataArgs {
    /// Input CSV (rows are observations).
    #[arg(long)]
    data: PathBuf,
    /// The CSV has no header row.
    #[arg(long)]
    no_header: bool,
    /// Zero-based index of a row-identifier column to skip.
    #[arg(long)]
    label_column: Option<usize>,
}

#[derive(Debug, Clone, Args)]
struct ModelArgs {
    #[arg(long, default_value = "collapsed")]
    scheme: Scheme,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 1)]
    latent_dim: usize,
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true", action = ArgAction::Set)]
    translation_invariant: bool,
    #[arg(long, num_args = 0..=1, default_value_t = true, default_missing_value = "true", action = ArgAction::Set)]
    scale_invariant: bool,
    #[arg(long, default_value = "gaussian")]
    likelihood: Likelihood,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    /// Encoder hidden widths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "64")]
    encoder_hidden: Vec<usize>,
    /// Basis-network hidden widths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "32")]
    decoder_hidden: Vec<usize>,
    /// Skip components with responsibility below this value.
    #[arg(long)]
    responsibility_threshold: Option<f64>,
    /// Log every this many optimiser steps.
    #[arg(long, default_value_t = 0)]
    log_every: usize,
}

impl ModelArgs {
    fn train_config(&self, p: usize) -> TrainConfig {
        let mut m = ModelConfig::new(p, self.latent_dim, self.k);
        m.likelihood = self.likelihood;
        m.translation_invariant = self.translation_invariant;
        m.scale_invariant = self.scale_invariant || self.translation_invariant;
        m.encoder_hidden = self.encoder_hidden.clone();
        m.decoder_hidden = self.decoder_hidden.clone();
        m.responsibility_threshold = self.responsibility_threshold;
        m.init_noise = match self.likelihood {
            Likelihood::Gaussian => crate::model::DEFAULT_INIT_NOISE,
            Likelihood::Zinb => 0.0,
        };
        TrainConfig {
            scheme: self.scheme,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            seed: self.seed,
            restarts: self.restarts,
            model: m,
            prior: PriorConfig::symmetric(self.alpha, self.beta),
            log_every: self.log_every,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    input: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    input: DataArgs,
    /// Ground-truth sidecar written by `generate`.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Number of latent grid points for fitted curves.
    #[arg(long, default_value_t = 100)]
    grid: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    input: DataArgs,
    #[arg(long)]
    truth: PathBuf,
    /// Schemes to compare, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "collapsed,noncollapsed,fixed_pi")]
    schemes: Vec<Scheme>,
    /// Add a k-means row set using the true number of clusters.
    #[arg(long)]
    kmeans: bool,
    #[command(flatten)]
    model: ModelArgs,
    /// Output CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Provenance record written next to training outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

impl RunManifest {
    fn new(command: &str, seed: u64, config: serde_json::Value, inputs: &[&Path], outputs: &[&str]) -> Result<Self> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config,
            inputs: inputs
                .iter()
                .map(|p| {
                    Ok(FileHash {
                        path: p.display().to_string(),
                        sha256: sha256_file(p)?,
                    })
                })
                .collect::<Result<_>>()?,
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        })
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_text(path, &text)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        Error::NonFinite(_) | Error::Domain { .. } | Error::MissingForward(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Report(a) => cmd_report(&a),
        Command::Compare(a) => cmd_compare(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn main() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    run(std::env::args_os())
}

fn truth_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or("data".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.truth.csv"))
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let (data, labels_ti) = match a.kind {
        Kind::FiveCluster => {
            let d = data::generate_five_cluster_toy(a.n, a.per_group, a.noise_sd, a.seed)?;
            let merged = d.true_labels.as_deref().map(data::merged_toy_labels);
            (d, merged)
        }
        Kind::Shifted => {
            let d = data::generate_shifted_basis_toy(a.n, a.p, (a.shift_min, a.shift_max), a.noise_sd, a.seed)?;
            let same = d.true_labels.clone();
            (d, same)
        }
        Kind::Zinb => (
            data::generate_two_basis_counts(a.n, a.p, a.inv_dispersion, a.dropout, a.seed)?,
            None,
        ),
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    data::write_csv(&a.out, &data)?;
    let truth = Truth {
        labels: data.true_labels.clone(),
        labels_ti,
        z: data.true_z.clone(),
        delta: data.true_delta.clone(),
    };
    truth.write(&truth_path(&a.out))
}

fn load_data(a: &DataArgs) -> Result<DataMatrix> {
    data::load_csv(&a.data, !a.no_header, a.label_column)
}

fn check_likelihood(data: &DataMatrix, likelihood: Likelihood) -> Result<()> {
    if likelihood == Likelihood::Zinb && data.likelihood_hint != LikelihoodHint::Counts {
        return Err(Error::Parse {
            path: PathBuf::new(),
            line: 0,
            column: 0,
            detail: "the zinb likelihood needs a matrix of nonnegative integer counts".into(),
        });
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let data = load_data(&a.input)?;
    check_likelihood(&data, a.model.likelihood)?;
    let config = a.model.train_config(data.p());
    config.validate()?;
    let report = trainer::train(&data, &config)?;
    create_dir(&a.out)?;
    report.checkpoint(&config).save(&a.out.join("model.ckpt"))?;
    report.write_trace(&a.out.join("trace.csv"))?;
    log::info!(
        "restart {} selected, smoothed ELBO {:.4}, {:.1}s",
        report.restart,
        report.smoothed_final(),
        report.wall_time
    );
    RunManifest::new(
        "train",
        config.seed,
        serde_json::to_value(&config)?,
        &[&a.input.data],
        &["model.ckpt", "trace.csv", "manifest.json"],
    )?
    .write(&a.out.join("manifest.json"))
}

fn matrix_csv(header: &[String], rows: impl Iterator<Item = (String, Vec<f64>)>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for (name, vals) in rows {
        out.push_str(&name);
        for v in vals {
            out.push(',');
            out.push_str(&data::format_value(v));
        }
        out.push('\n');
    }
    out
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = &ck.model;
    let data = load_data(&a.input)?;
    let (p, k, q) = (model.config.p, model.config.k, model.config.q);
    if data.p() != p {
        return Err(Error::shape("report data vs checkpoint", &[data.n(), p], data.values.shape()));
    }
    if a.grid < 2 {
        return Err(Error::Config("--grid must be at least 2".into()));
    }
    create_dir(&a.out)?;
    let names = &data.feature_names;
    let comp_header = |first: &str| {
        std::iter::once(first.to_string())
            .chain((0..k).map(|c| format!("k{c}")))
            .collect::<Vec<_>>()
    };

    let phi = model.phi();
    write_text(
        &a.out.join("phi.csv"),
        &matrix_csv(&comp_header("feature"), names.iter().enumerate().map(|(j, n)| (n.clone(), phi.row(j).to_vec()))),
    )?;
    let lambda = model.lambda();
    write_text(
        &a.out.join("lambda.csv"),
        &matrix_csv(
            &comp_header("feature"),
            names.iter().enumerate().map(|(j, n)| (n.clone(), lambda.row(j).to_vec())),
        ),
    )?;
    let delta = model.delta();
    let mut text = String::from("feature,component,dim,delta\n");
    for (j, n) in names.iter().enumerate() {
        for c in 0..k {
            for d in 0..q {
                let _ = writeln!(text, "{n},{c},{d},{}", data::format_value(delta.get3(j, c, d)));
            }
        }
    }
    write_text(&a.out.join("delta.csv"), &text)?;

    let clusters = metrics::extract_clusters(&phi);
    let mut text = String::from("feature,cluster,responsibility\n");
    for (j, n) in names.iter().enumerate() {
        let c = clusters.labels[j];
        let _ = writeln!(text, "{n},{c},{}", data::format_value(phi.get2(j, c)));
    }
    write_text(&a.out.join("clusters.csv"), &text)?;

    let co = metrics::cooccurrence_matrix(&phi);
    let header: Vec<String> = std::iter::once("feature".to_string()).chain(names.iter().cloned()).collect();
    write_text(
        &a.out.join("cooccurrence.csv"),
        &matrix_csv(&header, names.iter().enumerate().map(|(j, n)| (n.clone(), co.row(j).to_vec()))),
    )?;

    // latent means and fitted curves along the first latent coordinate
    let latent = model.latent_means(&data.values)?;
    let mut text = (0..q).map(|d| format!("z{d}")).collect::<Vec<_>>().join(",");
    text.push('\n');
    for i in 0..latent.rows() {
        let row: Vec<String> = latent.row(i).iter().map(|v| data::format_value(*v)).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    write_text(&a.out.join("latent.csv"), &text)?;
    let mut cols: Vec<Vec<f64>> = (0..q).map(|d| (0..latent.rows()).map(|i| latent.get2(i, d)).collect()).collect();
    cols.iter_mut().for_each(|c| c.sort_by(f64::total_cmp));
    let (lo, hi) = (percentile(&cols[0], 0.01), percentile(&cols[0], 0.99));
    let medians: Vec<f64> = cols.iter().map(|c| percentile(c, 0.5)).collect();
    let mut grid = NdArray::zeros(&[a.grid, q]);
    for g in 0..a.grid {
        let row = grid.row_mut(g);
        row.copy_from_slice(&medians);
        row[0] = lo + (hi - lo) * g as f64 / (a.grid - 1) as f64;
    }
    let mut fitted = model.reconstruct(&grid)?;
    if model.config.likelihood == Likelihood::Zinb {
        fitted = fitted.map(softplus);
    }
    let header: Vec<String> = std::iter::once("z0".to_string()).chain(names.iter().cloned()).collect();
    write_text(
        &a.out.join("curves.csv"),
        &matrix_csv(
            &header,
            (0..a.grid).map(|g| (data::format_value(grid.get2(g, 0)), fitted.row(g).to_vec())),
        ),
    )?;

    let mut summary = String::from("key,value\n");
    let _ = writeln!(summary, "features,{p}");
    let _ = writeln!(summary, "components,{k}");
    let _ = writeln!(summary, "nonempty_clusters,{}", metrics::count_nonempty(&phi, 0.5));
    if let Some(train) = ck.meta.get("train") {
        let config: TrainConfig = serde_json::from_value(train.clone())?;
        let b = trainer::evaluate(&data, model, &config.prior, config.scheme)?;
        let _ = writeln!(summary, "elbo_total,{}", data::format_value(b.total));
    }
    if let Some(path) = &a.truth {
        let truth = Truth::read(path)?;
        let labels = truth
            .labels_for(model.config.translation_invariant)
            .ok_or_else(|| Error::Empty(format!("{} holds no labels", path.display())))?;
        let v = metrics::v_measure(&clusters, &ClusterAssignment::ground_truth(labels.to_vec()))?;
        let _ = writeln!(summary, "v_measure,{}", data::format_value(v));
    }
    write_text(&a.out.join("summary.csv"), &summary)
}

fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let data = load_data(&a.input)?;
    check_likelihood(&data, a.model.likelihood)?;
    let truth = Truth::read(&a.truth)?;
    let labels = truth
        .labels_for(a.model.translation_invariant)
        .ok_or_else(|| Error::Empty(format!("{} holds no labels", a.truth.display())))?
        .to_vec();
    if labels.len() != data.p() {
        return Err(Error::shape("truth labels", &[data.p()], &[labels.len()]));
    }
    let truth_assign = ClusterAssignment::ground_truth(labels.clone());
    let mut out = String::from("scheme,restart,status,v_measure,nonempty_clusters,final_elbo\n");
    for &scheme in &a.schemes {
        let mut config = a.model.train_config(data.p());
        config.scheme = scheme;
        config.validate()?;
        for (r, res) in trainer::train_all(&data, &config)?.into_iter().enumerate() {
            match res {
                Ok(rep) => {
                    let phi = rep.model.phi();
                    let v = metrics::v_measure(&metrics::extract_clusters(&phi), &truth_assign)?;
                    let _ = writeln!(
                        out,
                        "{scheme},{r},ok,{},{},{}",
                        data::format_value(v),
                        metrics::count_nonempty(&phi, 0.5),
                        data::format_value(rep.smoothed_final())
                    );
                }
                Err(e) => {
                    log::warn!("{scheme} restart {r}: {e}");
                    let _ = writeln!(out, "{scheme},{r},aborted,,,");
                }
            }
        }
    }
    if a.kmeans {
        let mut classes = labels.clone();
        classes.sort_unstable();
        classes.dedup();
        let points = data.values.transpose2();
        for r in 0..a.model.restarts {
            let fit = metrics::kmeans(&points, classes.len(), 10, a.model.seed.wrapping_add(r as u64))?;
            let v = metrics::v_measure(&fit.assignment, &truth_assign)?;
            let _ = writeln!(out, "kmeans,{r},ok,{},{},", data::format_value(v), classes.len());
        }
    }
    match &a.out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            write_text(path, &out)
        }
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::NonFinite("x".into())), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::Empty("x".into())), EXIT_DATA);
        assert_eq!(run(["basiscluster", "generate", "--kind", "bogus", "--out", "x.csv"]), EXIT_USAGE);
        assert_eq!(run(["basiscluster", "--help"]), EXIT_OK);
    }

    #[test]
    fn flag_parsing() {
        let cli = Cli::try_parse_from([
            "basiscluster",
            "train",
            "--data",
            "d.csv",
            "--out",
            "o",
            "--translation-invariant",
            "--scheme",
            "fixed_pi",
            "--likelihood",
            "zinb",
            "--scale-invariant",
            "false",
        ])
        .unwrap();
        let Command::Train(t) = cli.command else { panic!() };
        assert!(t.model.translation_invariant);
        assert!(!t.model.scale_invariant);
        assert_eq!(t.model.scheme, Scheme::FixedPi);
        let cfg = t.model.train_config(7);
        assert!(cfg.model.uses_scale());
        assert_eq!(cfg.model.likelihood, Likelihood::Zinb);
        assert_eq!(cfg.prior, PriorConfig::symmetric(0.1, 1.0));
    }

    #[test]
    fn sidecar_path() {
        assert_eq!(truth_path(Path::new("out/toy.csv")), PathBuf::from("out/toy.truth.csv"));
    }

    #[test]
    fn hashes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        std::fs::write(&path, b"abc").unwrap();
        assert_eq!(
            sha256_file(&path).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
