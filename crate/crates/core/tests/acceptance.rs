//! Acceptance suite. Prints one PASS/FAIL line per criterion; pass criterion
//! numbers as arguments to run a subset.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use basiscluster::data::{self, DataMatrix};
use basiscluster::diffcore::{grad_check, GradCheckConfig, NdArray, SeededRng};
use basiscluster::elbo::{self, collapsed_dirichlet_term, Batch, PriorConfig, Scheme};
use basiscluster::metrics::{self, extract_clusters, ClusterAssignment};
use basiscluster::model::{BasisVae, Likelihood, ModelConfig};
use basiscluster::trainer::{self, best_of_restarts, TrainConfig, TrainReport};

use common::*;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn toy() -> DataMatrix {
    data::generate_five_cluster_toy(500, 10, 0.05, 0).expect("toy data")
}

fn toy_config(p: usize, scheme: Scheme) -> TrainConfig {
    let mut cfg = TrainConfig::new(ModelConfig::new(p, 1, 20));
    cfg.scheme = scheme;
    cfg.epochs = 1000;
    cfg.batch_size = 128;
    cfg.learning_rate = 1e-2;
    cfg.restarts = 10;
    cfg.prior = PriorConfig::symmetric(0.1, 1.0);
    cfg
}

fn ti_config(p: usize) -> TrainConfig {
    let mut cfg = toy_config(p, Scheme::Collapsed);
    cfg.model.translation_invariant = true;
    cfg.model.responsibility_threshold = Some(1e-4);
    cfg.epochs = 400;
    cfg.restarts = 4;
    cfg
}

fn successful(results: Vec<basiscluster::Result<TrainReport>>) -> Vec<TrainReport> {
    results.into_iter().filter_map(|r| r.map_err(|e| eprintln!("  restart failed: {e}")).ok()).collect()
}

fn v_against(report: &TrainReport, labels: &[usize]) -> f64 {
    let pred = extract_clusters(&report.model.phi());
    metrics::v_measure(&pred, &ClusterAssignment::ground_truth(labels.to_vec())).expect("v-measure")
}

fn nonempty(report: &TrainReport) -> usize {
    metrics::count_nonempty(&report.model.phi(), 0.5)
}

fn gradient_suite() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for likelihood in [Likelihood::Gaussian, Likelihood::Zinb] {
        for ti in [false, true] {
            for seed in 0..2u64 {
                let mut cfg = ModelConfig::new(5, 1, 3);
                cfg.likelihood = likelihood;
                cfg.translation_invariant = ti;
                cfg.encoder_hidden = vec![4];
                cfg.decoder_hidden = vec![4];
                cfg.dropout_hidden = vec![3];
                let mut model = BasisVae::new(cfg, &mut SeededRng::new(seed)).expect("model");
                let mut rng = SeededRng::new(seed + 50);
                for id in [model.delta_id(), model.lambda_raw_id(), model.assign_logits_id(), model.noise_id()] {
                    let shape = model.store.value(id).shape().to_vec();
                    model.store.set_value(id, rng.standard_normal(&shape).map(|v| 0.5 * v)).expect("set");
                }
                let y = match likelihood {
                    Likelihood::Gaussian => rng.standard_normal(&[6, 5]),
                    Likelihood::Zinb => NdArray::from_vec(
                        &[6, 5],
                        (0..30).map(|_| if rng.uniform() < 0.3 { 0.0 } else { rng.below(8) as f64 }).collect(),
                    )
                    .expect("counts"),
                };
                let eps = rng.standard_normal(&[6, 1]);
                let prior = PriorConfig::symmetric(0.3, 1.0);
                let mut scratch = model.clone();
                let report = grad_check(
                    &mut model.store,
                    |store, want| {
                        std::mem::swap(&mut scratch.store, store);
                        let batch = Batch { y: &y, eps: &eps, n_total: 6 };
                        let out = if want {
                            elbo::objective_and_grad(&mut scratch, Scheme::Collapsed, &prior, batch)
                        } else {
                            elbo::objective(&scratch, Scheme::Collapsed, &prior, batch)
                        };
                        std::mem::swap(&mut scratch.store, store);
                        out.map(|b| -b.total)
                    },
                    &GradCheckConfig::default(),
                )
                .expect("grad check");
                worst = worst.max(report.max_rel_error);
                if !report.passed {
                    failures.push(format!("{likelihood:?} ti={ti} seed={seed} worst {}", report.worst_param));
                }
            }
        }
    }
    Outcome::new(failures.is_empty(), format!("max relative error {worst:.2e} {failures:?}"))
}

fn collapsed_oracle() -> Outcome {
    let mut rng = SeededRng::new(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let p = 1 + rng.below(8);
        let phi = random_phi(&mut rng, p, 2, 1.5);
        let alpha = [rng.uniform_range(0.05, 3.0), rng.uniform_range(0.05, 3.0)];
        let n: Vec<f64> = (0..2).map(|k| (0..p).map(|j| phi.get2(j, k)).sum()).collect();
        let oracle = log_beta_adaptive(n[0] + alpha[0], n[1] + alpha[1]) - log_beta_adaptive(alpha[0], alpha[1]);
        let got = collapsed_dirichlet_term(&phi, &alpha).expect("collapsed term");
        worst = worst.max((got - oracle).abs());
    }
    Outcome::new(worst < 1e-6, format!("max abs error {worst:.2e} over 50 draws"))
}

fn five_cluster_recovery(collapsed: &[TrainReport], truth: &[usize]) -> Outcome {
    let best = best_of_restarts(collapsed.to_vec()).expect("restarts");
    let (k, v) = (nonempty(&best), v_against(&best, truth));
    Outcome::new(k == 5 && v >= 0.95, format!("best restart {}: {k} clusters, V={v:.4}", best.restart))
}

fn translation_invariant_recovery(data: &DataMatrix) -> Outcome {
    let merged = data::merged_toy_labels(data.true_labels.as_deref().expect("labels"));
    let reports = successful(trainer::train_all(data, &ti_config(data.p())).expect("train"));
    let best = best_of_restarts(reports).expect("restarts");
    let (k, v) = (nonempty(&best), v_against(&best, &merged));
    Outcome::new(k == 3 && v >= 0.95, format!("best restart {}: {k} clusters, V={v:.4}", best.restart))
}

fn scheme_ordering(data: &DataMatrix, collapsed: &[TrainReport], truth: &[usize]) -> Outcome {
    let med = |reports: &[TrainReport]| median(&reports.iter().map(|r| v_against(r, truth)).collect::<Vec<_>>());
    let c = med(collapsed);
    let mut others = Vec::new();
    for scheme in [Scheme::NonCollapsed, Scheme::FixedPi] {
        let reports = successful(trainer::train_all(data, &toy_config(data.p(), scheme)).expect("train"));
        others.push((scheme, med(&reports), reports.len()));
    }
    let pass = others.iter().all(|&(_, m, _)| c >= m);
    Outcome::new(
        pass,
        format!(
            "median V collapsed={c:.4} {}",
            others.iter().map(|(s, m, n)| format!("{s}={m:.4} ({n} runs)")).collect::<Vec<_>>().join(" ")
        ),
    )
}

fn shifted_basis() -> Outcome {
    let data = data::generate_shifted_basis_toy(500, 30, (-2.0, 2.0), 0.05, 0).expect("shifted toy");
    let reports = successful(trainer::train_all(&data, &ti_config(data.p())).expect("train"));
    let best = best_of_restarts(reports).expect("restarts");
    let phi = best.model.phi();
    let labels = extract_clusters(&phi).labels;
    let delta = best.model.delta();
    let est: Vec<f64> = labels.iter().enumerate().map(|(j, &c)| delta.get3(j, c, 0)).collect();
    let r = pearson(&est, data.true_delta.as_deref().expect("true shifts")).abs();
    let k = metrics::count_nonempty(&phi, 0.5);
    Outcome::new(k == 1 && r >= 0.95, format!("best restart {}: {k} clusters, |r|={r:.4}", best.restart))
}

fn zinb_pipeline() -> Outcome {
    let data = data::generate_two_basis_counts(500, 40, 5.0, 0.1, 0).expect("counts");
    let truth = data.true_labels.clone().expect("labels");
    let mut cfg = toy_config(data.p(), Scheme::Collapsed);
    cfg.model.k = 10;
    cfg.model.likelihood = Likelihood::Zinb;
    cfg.model.init_noise = 0.0;
    cfg.epochs = 500;
    cfg.restarts = 3;
    let best = trainer::train(&data, &cfg).expect("train");
    let (k, v) = (nonempty(&best), v_against(&best, &truth));
    Outcome::new(k == 2 && v >= 0.9, format!("best restart {}: {k} clusters, V={v:.4}", best.restart))
}

fn v_measure_suite() -> Outcome {
    let assign = |l: &[usize]| ClusterAssignment::ground_truth(l.to_vec());
    let v = |a: &[usize], b: &[usize]| metrics::v_measure(&assign(a), &assign(b)).expect("v-measure");
    let mut errors = Vec::new();
    if (v(&[2, 2, 0, 0, 1], &[0, 0, 1, 1, 2]) - 1.0).abs() > 1e-12 {
        errors.push("relabeled identity".to_string());
    }
    if v(&[0, 0, 0, 0], &[0, 0, 1, 1]).abs() > 1e-12 {
        errors.push("single cluster".to_string());
    }
    let got = v(&[0, 1, 1, 1], &[0, 0, 1, 1]);
    // h = 1 - (3/4) H(1/3, 2/3) / ln 2, c = 1 - (1/2) ln 2 / H(1/4, 3/4)
    let h_third = -(1.0 / 3.0f64) * (1.0 / 3.0f64).ln() - (2.0 / 3.0f64) * (2.0 / 3.0f64).ln();
    let h_quarter = -0.25 * 0.25f64.ln() - 0.75 * 0.75f64.ln();
    let h = 1.0 - 0.75 * h_third / 2f64.ln();
    let c = 1.0 - 0.5 * 2f64.ln() / h_quarter;
    if (got - 2.0 * h * c / (h + c)).abs() > 1e-12 {
        errors.push(format!("contingency example {got}"));
    }
    let mut rng = SeededRng::new(88);
    for case in 0..200 {
        let n = 2 + rng.below(40);
        let (ka, kb) = (1 + rng.below(6), 1 + rng.below(6));
        let a = random_labels(&mut rng, n, ka);
        let b = random_labels(&mut rng, n, kb);
        let mut perm: Vec<usize> = (0..8).collect();
        rng.shuffle(&mut perm);
        let a_perm: Vec<usize> = a.iter().map(|&l| perm[l]).collect();
        let base = v(&a, &b);
        let checks = [
            (v(&b, &a), "symmetry"),
            (v(&a_perm, &b), "permutation of pred"),
            (v(&b, &a_perm), "permutation of truth"),
            (v_measure_oracle(&a, &b), "contingency oracle"),
        ];
        for (other, what) in checks {
            if (base - other).abs() > 1e-12 {
                errors.push(format!("case {case}: {what} {base} vs {other}"));
            }
        }
    }
    Outcome::new(errors.is_empty(), format!("3 examples + 200 random labelings, {} mismatches {errors:?}", errors.len()))
}

fn run_cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_basiscluster"))
        .args(args)
        .env("BASISCLUSTER_THREADS", "2")
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path();
    let csv = root.join("toy.csv");
    let csv_s = csv.to_str().expect("utf-8 path");
    if !run_cli(&["generate", "--kind", "five_cluster", "--n", "120", "--seed", "3", "--out", csv_s]) {
        return Outcome::new(false, "generate failed");
    }
    let mut mismatched = Vec::new();
    let mut runs = Vec::new();
    for run in ["a", "b"] {
        let out = root.join(run);
        let out_s = out.to_str().expect("utf-8 path");
        let ck = out.join("model.ckpt");
        let report = out.join("report");
        let ok = run_cli(&[
            "train", "--data", csv_s, "--epochs", "15", "--batch-size", "32", "--restarts", "3", "--seed", "11", "--out",
            out_s,
        ]) && run_cli(&[
            "report",
            "--checkpoint",
            ck.to_str().expect("utf-8 path"),
            "--data",
            csv_s,
            "--out",
            report.to_str().expect("utf-8 path"),
        ]);
        if !ok {
            return Outcome::new(false, format!("run {run} failed"));
        }
        runs.push(out);
    }
    let files = [
        "model.ckpt",
        "trace.csv",
        "manifest.json",
        "report/phi.csv",
        "report/lambda.csv",
        "report/delta.csv",
        "report/clusters.csv",
        "report/curves.csv",
        "report/summary.csv",
    ];
    let read = |base: &Path, f: &str| std::fs::read(base.join(f)).unwrap_or_default();
    for f in files {
        let (a, b) = (read(&runs[0], f), read(&runs[1], f));
        if a.is_empty() || a != b {
            mismatched.push(f);
        }
    }
    // library path, model parameters bit for bit
    let data = data::generate_five_cluster_toy(80, 4, 0.05, 5).expect("toy");
    let mut cfg = TrainConfig::new(ModelConfig::new(data.p(), 1, 6));
    cfg.epochs = 10;
    cfg.batch_size = 16;
    let a = trainer::train(&data, &cfg).expect("train").checkpoint(&cfg).to_bytes().expect("bytes");
    let b = trainer::train(&data, &cfg).expect("train").checkpoint(&cfg).to_bytes().expect("bytes");
    if a != b {
        mismatched.push("library checkpoint");
    }
    Outcome::new(mismatched.is_empty(), format!("{} artifacts compared, mismatched {mismatched:?}", files.len() + 1))
}

fn beta_weighting(data: &DataMatrix) -> Outcome {
    let wide = data.duplicate_features(20).expect("duplicate");
    let count = |beta: f64| {
        let mut cfg = toy_config(wide.p(), Scheme::Collapsed);
        cfg.prior.beta = beta;
        cfg.epochs = 300;
        cfg.restarts = 2;
        cfg.seed = 0;
        nonempty(&trainer::train(&wide, &cfg).expect("train"))
    };
    let (k1, k20) = (count(1.0), count(20.0));
    Outcome::new(k1 > k20, format!("P={}: beta=1 -> {k1} clusters, beta=20 -> {k20}", wide.p()))
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |c: usize| selected.is_empty() || selected.contains(&c);
    let toy = toy();
    let truth = toy.true_labels.clone().expect("toy labels");
    let mut collapsed: Option<Vec<TrainReport>> = None;
    let mut collapsed_runs = |toy: &DataMatrix| {
        collapsed
            .get_or_insert_with(|| {
                successful(trainer::train_all(toy, &toy_config(toy.p(), Scheme::Collapsed)).expect("train"))
            })
            .clone()
    };
    let mut failed = 0;
    for c in 1..=10 {
        if !wanted(c) {
            continue;
        }
        let start = Instant::now();
        let outcome = match c {
            1 => gradient_suite(),
            2 => collapsed_oracle(),
            3 => five_cluster_recovery(&collapsed_runs(&toy), &truth),
            4 => translation_invariant_recovery(&toy),
            5 => scheme_ordering(&toy, &collapsed_runs(&toy), &truth),
            6 => shifted_basis(),
            7 => zinb_pipeline(),
            8 => v_measure_suite(),
            9 => determinism(),
            _ => beta_weighting(&toy),
        };
        let status = if outcome.pass { "PASS" } else { "FAIL" };
        println!("criterion {c:2}: {status} ({}; {:.1}s)", outcome.detail, start.elapsed().as_secs_f64());
        failed += usize::from(!outcome.pass);
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
