//! Data matrices: synthetic generators, ZINB count simulation, CSV I/O and
//! standardisation.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::diffcore::{sigmoid, NdArray, SeededRng};
use crate::error::{Error, Result};

/// Width of the bumps in the five-cluster toy.
pub const TOY_BUMP_WIDTH: f64 = 0.35;
/// Bump centres of the three transient groups.
pub const TOY_BUMP_CENTRES: [f64; 3] = [-1.0, 0.0, 1.0];
/// Steepness of the two monotone groups.
pub const TOY_SIGMOID_SLOPE: f64 = 3.0;
/// Width of the base bump in the shifted-basis toy.
pub const SHIFTED_BUMP_WIDTH: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LikelihoodHint {
    #[default]
    Continuous,
    Counts,
}

/// Observations `[N, P]` with optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    pub values: NdArray,
    pub feature_names: Vec<String>,
    /// Per-feature cluster labels.
    pub true_labels: Option<Vec<usize>>,
    /// Per-observation latent positions.
    pub true_z: Option<Vec<f64>>,
    /// Per-feature latent shifts.
    pub true_delta: Option<Vec<f64>>,
    pub likelihood_hint: LikelihoodHint,
}

impl DataMatrix {
    pub fn new(values: NdArray, likelihood_hint: LikelihoodHint) -> Result<Self> {
        let p = values.cols();
        let data = Self {
            values,
            feature_names: default_names(p),
            true_labels: None,
            true_z: None,
            true_delta: None,
            likelihood_hint,
        };
        data.validate()?;
        Ok(data)
    }

    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn p(&self) -> usize {
        self.values.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.ndim() != 2 {
            return Err(Error::shape("data matrix", &[self.n(), self.p()], self.values.shape()));
        }
        let (n, p) = (self.n(), self.p());
        if self.feature_names.len() != p {
            return Err(Error::shape("feature names", &[p], &[self.feature_names.len()]));
        }
        if let Some(l) = &self.true_labels {
            if l.len() != p {
                return Err(Error::shape("true labels", &[p], &[l.len()]));
            }
        }
        if let Some(z) = &self.true_z {
            if z.len() != n {
                return Err(Error::shape("true z", &[n], &[z.len()]));
            }
        }
        if let Some(d) = &self.true_delta {
            if d.len() != p {
                return Err(Error::shape("true delta", &[p], &[d.len()]));
            }
        }
        if self.likelihood_hint == LikelihoodHint::Counts && !is_count_matrix(&self.values) {
            return Err(Error::domain("data matrix", "counts hint requires nonnegative integers"));
        }
        Ok(())
    }

    /// Copy with every feature repeated `times` times (labels and shifts
    /// follow their feature).
    pub fn duplicate_features(&self, times: usize) -> Result<Self> {
        let (n, p) = (self.n(), self.p());
        let pp = p * times;
        let mut values = Vec::with_capacity(n * pp);
        for i in 0..n {
            for _ in 0..times {
                values.extend_from_slice(self.values.row(i));
            }
        }
        let rep = |v: &Vec<usize>| (0..times).flat_map(|_| v.iter().copied()).collect();
        let rep_f = |v: &Vec<f64>| (0..times).flat_map(|_| v.iter().copied()).collect();
        let out = Self {
            values: NdArray::from_vec(&[n, pp], values)?,
            feature_names: (0..times)
                .flat_map(|t| self.feature_names.iter().map(move |s| format!("{s}_{t}")))
                .collect(),
            true_labels: self.true_labels.as_ref().map(rep),
            true_z: self.true_z.clone(),
            true_delta: self.true_delta.as_ref().map(rep_f),
            likelihood_hint: self.likelihood_hint,
        };
        out.validate()?;
        Ok(out)
    }
}

fn default_names(p: usize) -> Vec<String> {
    (0..p).map(|j| format!("f{j}")).collect()
}

fn is_count_matrix(values: &NdArray) -> bool {
    values
        .data()
        .iter()
        .all(|&v| v >= 0.0 && v.fract() == 0.0 && v.is_finite())
}

fn bump(u: f64, width: f64) -> f64 {
    (-u * u / (2.0 * width * width)).exp()
}

/// Noise-free curve of toy group `g` (0..5) at latent `z`.
pub fn toy_curve(group: usize, z: f64) -> f64 {
    match group {
        0..=2 => bump(z - TOY_BUMP_CENTRES[group], TOY_BUMP_WIDTH),
        3 => sigmoid(TOY_SIGMOID_SLOPE * z),
        _ => sigmoid(-TOY_SIGMOID_SLOPE * z),
    }
}

/// Five groups of `per_group` features: three transient bumps at shifted
/// positions, one increasing and one decreasing sigmoid. Each feature is its
/// group curve times a scale drawn from `U(0.5, 2)` plus Gaussian noise.
pub fn generate_five_cluster_toy(n: usize, per_group: usize, noise_sd: f64, seed: u64) -> Result<DataMatrix> {
    if n == 0 || per_group == 0 {
        return Err(Error::Config("n and per_group must be at least 1".into()));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::Config(format!("noise_sd must be nonnegative, got {noise_sd}")));
    }
    let p = 5 * per_group;
    let mut rng = SeededRng::new(seed);
    let z: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let labels: Vec<usize> = (0..p).map(|j| j / per_group).collect();
    let scales: Vec<f64> = (0..p).map(|_| rng.uniform_range(0.5, 2.0)).collect();
    let mut values = Vec::with_capacity(n * p);
    for &zi in &z {
        for j in 0..p {
            values.push(scales[j] * toy_curve(labels[j], zi) + noise_sd * rng.normal());
        }
    }
    Ok(DataMatrix {
        values: NdArray::from_vec(&[n, p], values)?,
        feature_names: (0..p).map(|j| format!("g{}_{}", labels[j], j % per_group)).collect(),
        true_labels: Some(labels),
        true_z: Some(z),
        true_delta: None,
        likelihood_hint: LikelihoodHint::Continuous,
    })
}

/// Ground truth of the five-cluster toy once translations are allowed:
/// the three transient groups become one cluster.
pub fn merged_toy_labels(labels: &[usize]) -> Vec<usize> {
    labels.iter().map(|&l| l.saturating_sub(2)).collect()
}

/// `p` copies of one bump-shaped curve, feature `j` evaluated at `z + delta_j`
/// with `delta` equally spaced over `shift_range`.
pub fn generate_shifted_basis_toy(
    n: usize,
    p: usize,
    shift_range: (f64, f64),
    noise_sd: f64,
    seed: u64,
) -> Result<DataMatrix> {
    if p < 2 || n == 0 {
        return Err(Error::Config(format!("shifted toy needs n >= 1 and p >= 2 (got n = {n}, p = {p})")));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::Config(format!("noise_sd must be nonnegative, got {noise_sd}")));
    }
    let (lo, hi) = shift_range;
    let delta: Vec<f64> = (0..p).map(|j| lo + (hi - lo) * j as f64 / (p - 1) as f64).collect();
    let mut rng = SeededRng::new(seed);
    let z: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let mut values = Vec::with_capacity(n * p);
    for &zi in &z {
        for &d in &delta {
            values.push(bump(zi + d, SHIFTED_BUMP_WIDTH) + noise_sd * rng.normal());
        }
    }
    Ok(DataMatrix {
        values: NdArray::from_vec(&[n, p], values)?,
        feature_names: default_names(p),
        true_labels: Some(vec![0; p]),
        true_z: Some(z),
        true_delta: Some(delta),
        likelihood_hint: LikelihoodHint::Continuous,
    })
}

/// Draws ZINB counts with per-entry means: Gamma-Poisson for the NB part,
/// then an independent dropout to zero with probability `dropout`.
pub fn simulate_zinb_counts(mean_matrix: &NdArray, inv_dispersion: f64, dropout: f64, seed: u64) -> Result<DataMatrix> {
    if mean_matrix.ndim() != 2 {
        return Err(Error::shape("zinb mean matrix", &[0, 0], mean_matrix.shape()));
    }
    if let Some(m) = mean_matrix.data().iter().find(|&&m| !(m > 0.0 && m.is_finite())) {
        return Err(Error::domain("simulate_zinb_counts", format!("mean {m} must be positive")));
    }
    if !(inv_dispersion > 0.0 && inv_dispersion.is_finite()) {
        return Err(Error::domain("simulate_zinb_counts", format!("inv_dispersion = {inv_dispersion}")));
    }
    if !(0.0..=1.0).contains(&dropout) {
        return Err(Error::domain("simulate_zinb_counts", format!("dropout = {dropout}")));
    }
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::with_capacity(mean_matrix.len());
    for &mu in mean_matrix.data() {
        let rate = Gamma::new(inv_dispersion, mu / inv_dispersion)
            .map_err(|e| Error::domain("simulate_zinb_counts", e.to_string()))?
            .sample(rng.inner_mut());
        let count = if rate > 0.0 {
            Poisson::new(rate)
                .map_err(|e| Error::domain("simulate_zinb_counts", e.to_string()))?
                .sample(rng.inner_mut())
        } else {
            0.0
        };
        out.push(if rng.uniform() < dropout { 0.0 } else { count });
    }
    DataMatrix::new(NdArray::from_vec(mean_matrix.shape(), out)?, LikelihoodHint::Counts)
}

/// Two groups of count features: means `s_j * (1 + 9 * sigmoid(±3z))`,
/// scales from `U(0.5, 2)`, ZINB noise with the given dispersion/dropout.
pub fn generate_two_basis_counts(
    n: usize,
    p: usize,
    inv_dispersion: f64,
    dropout: f64,
    seed: u64,
) -> Result<DataMatrix> {
    if n == 0 || p < 2 {
        return Err(Error::Config(format!("count toy needs n >= 1 and p >= 2 (got n = {n}, p = {p})")));
    }
    let mut rng = SeededRng::new(seed);
    let z: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let labels: Vec<usize> = (0..p).map(|j| usize::from(j >= p / 2)).collect();
    let scales: Vec<f64> = (0..p).map(|_| rng.uniform_range(0.5, 2.0)).collect();
    let mut means = Vec::with_capacity(n * p);
    for &zi in &z {
        for j in 0..p {
            let sign = if labels[j] == 0 { 1.0 } else { -1.0 };
            means.push(scales[j] * (1.0 + 9.0 * sigmoid(sign * TOY_SIGMOID_SLOPE * zi)));
        }
    }
    let mut data = simulate_zinb_counts(
        &NdArray::from_vec(&[n, p], means)?,
        inv_dispersion,
        dropout,
        seed.wrapping_add(1),
    )?;
    data.true_labels = Some(labels);
    data.true_z = Some(z);
    Ok(data)
}

/// Reads a comma-separated matrix (rows are observations). `label_column`
/// names a column index holding row identifiers; it is skipped.
pub fn load_csv(path: &Path, has_header: bool, label_column: Option<usize>) -> Result<DataMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let parse_err = |line: u64, column: usize, detail: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        column,
        detail,
    };
    let keep = |c: usize| Some(c) != label_column;
    let mut names = None;
    if has_header {
        let header = reader
            .headers()
            .map_err(|e| parse_err(1, 0, e.to_string()))?
            .clone();
        names = Some(
            header
                .iter()
                .enumerate()
                .filter(|&(c, _)| keep(c))
                .map(|(_, s)| s.to_string())
                .collect::<Vec<_>>(),
        );
    }
    let mut width = None;
    let mut rows = 0;
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, 0, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        let expected = *width.get_or_insert(names.as_ref().map_or(record.len(), |n| {
            n.len() + usize::from(label_column.is_some_and(|c| c < record.len()))
        }));
        if record.len() != expected {
            return Err(parse_err(
                line,
                record.len().min(expected) + 1,
                format!("expected {expected} fields, found {}", record.len()),
            ));
        }
        for (c, cell) in record.iter().enumerate().filter(|&(c, _)| keep(c)) {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(line, c + 1, format!("non-numeric cell {cell:?}")))?;
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Empty(format!("{} contains no data rows", path.display())));
    }
    let p = values.len() / rows;
    let values = NdArray::from_vec(&[rows, p], values)?;
    let hint = if is_count_matrix(&values) {
        LikelihoodHint::Counts
    } else {
        LikelihoodHint::Continuous
    };
    let mut data = DataMatrix::new(values, hint)?;
    if let Some(names) = names {
        if names.len() != p {
            return Err(parse_err(1, 0, format!("header has {} names for {p} columns", names.len())));
        }
        data.feature_names = names;
    }
    Ok(data)
}

/// Writes the matrix with a header row of feature names.
pub fn write_csv(path: &Path, data: &DataMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(&data.feature_names).map_err(|e| csv_io(path, e))?;
    for i in 0..data.n() {
        w.write_record(data.values.row(i).iter().map(|v| format_value(*v)))
            .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Shortest representation that parses back to the same value.
pub fn format_value(v: f64) -> String {
    format!("{v:?}")
}

/// Per-feature `(mean, sd)` from [`standardize`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: f64,
    pub sd: f64,
}

/// Centres and scales each feature to unit (population) standard deviation.
/// Constant features are only centred and report `sd = 0`.
pub fn standardize(data: &DataMatrix) -> Result<(DataMatrix, Vec<FeatureStats>)> {
    if data.likelihood_hint == LikelihoodHint::Counts {
        log::warn!("standardizing a count matrix; the result is treated as continuous");
    }
    let (n, p) = (data.n(), data.p());
    if n == 0 {
        return Err(Error::Empty("cannot standardize an empty matrix".into()));
    }
    let mut stats = Vec::with_capacity(p);
    for j in 0..p {
        let mean = (0..n).map(|i| data.values.get2(i, j)).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (data.values.get2(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
        stats.push(FeatureStats { mean, sd: var.sqrt() });
    }
    let mut out = data.clone();
    out.likelihood_hint = LikelihoodHint::Continuous;
    for i in 0..n {
        for (v, s) in out.values.row_mut(i).iter_mut().zip(&stats) {
            *v -= s.mean;
            if s.sd > 0.0 {
                *v /= s.sd;
            }
        }
    }
    Ok((out, stats))
}

/// Inverse of [`standardize`].
pub fn unstandardize(values: &NdArray, stats: &[FeatureStats]) -> Result<NdArray> {
    values.ensure_shape("unstandardize", &[values.rows(), stats.len()])?;
    let mut out = values.clone();
    for i in 0..out.rows() {
        for (v, s) in out.row_mut(i).iter_mut().zip(stats) {
            if s.sd > 0.0 {
                *v *= s.sd;
            }
            *v += s.mean;
        }
    }
    Ok(out)
}

/// Ground truth stored next to generated data.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Truth {
    /// Per-feature labels for the scale-invariant clustering.
    pub labels: Option<Vec<usize>>,
    /// Per-feature labels once translations are allowed.
    pub labels_ti: Option<Vec<usize>>,
    pub z: Option<Vec<f64>>,
    pub delta: Option<Vec<f64>>,
}

impl Truth {
    /// Labels appropriate for a model with or without translation invariance.
    pub fn labels_for(&self, translation_invariant: bool) -> Option<&[usize]> {
        if translation_invariant {
            self.labels_ti.as_deref().or(self.labels.as_deref())
        } else {
            self.labels.as_deref()
        }
    }

    /// Writes `field,index,value` rows.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::from("field,index,value\n");
        let mut push = |field: &str, vals: Vec<String>| {
            for (i, v) in vals.into_iter().enumerate() {
                out.push_str(&format!("{field},{i},{v}\n"));
            }
        };
        let ints = |v: &Vec<usize>| v.iter().map(|x| x.to_string()).collect();
        let floats = |v: &Vec<f64>| v.iter().map(|x| format_value(*x)).collect();
        if let Some(v) = &self.labels {
            push("label", ints(v));
        }
        if let Some(v) = &self.labels_ti {
            push("label_ti", ints(v));
        }
        if let Some(v) = &self.z {
            push("z", floats(v));
        }
        if let Some(v) = &self.delta {
            push("delta", floats(v));
        }
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
        let mut truth = Truth::default();
        for record in reader.records() {
            let record = record.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: e.position().map_or(0, |p| p.line()),
                column: 0,
                detail: e.to_string(),
            })?;
            let line = record.position().map_or(0, |p| p.line());
            let err = |column: usize, detail: String| Error::Parse {
                path: path.to_path_buf(),
                line,
                column,
                detail,
            };
            if record.len() != 3 {
                return Err(err(0, format!("expected 3 fields, found {}", record.len())));
            }
            let index: usize = record[1].parse().map_err(|_| err(2, format!("bad index {:?}", &record[1])))?;
            let value = &record[2];
            let int = || value.parse::<usize>().map_err(|_| err(3, format!("bad label {value:?}")));
            let float = || value.parse::<f64>().map_err(|_| err(3, format!("bad value {value:?}")));
            match &record[0] {
                "label" => push_at(&mut truth.labels, index, int()?).map_err(|d| err(2, d))?,
                "label_ti" => push_at(&mut truth.labels_ti, index, int()?).map_err(|d| err(2, d))?,
                "z" => push_at(&mut truth.z, index, float()?).map_err(|d| err(2, d))?,
                "delta" => push_at(&mut truth.delta, index, float()?).map_err(|d| err(2, d))?,
                other => return Err(err(1, format!("unknown field {other:?}"))),
            }
        }
        Ok(truth)
    }
}

fn push_at<T>(slot: &mut Option<Vec<T>>, index: usize, value: T) -> std::result::Result<(), String> {
    let v = slot.get_or_insert_with(Vec::new);
    if index != v.len() {
        return Err(format!("index {index} out of order (expected {})", v.len()));
    }
    v.push(value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    fn column(d: &DataMatrix, j: usize) -> Vec<f64> {
        (0..d.n()).map(|i| d.values.get2(i, j)).collect()
    }

    #[test]
    fn five_cluster_noise_free_structure() {
        let d = generate_five_cluster_toy(200, 10, 0.0, 1).unwrap();
        assert_eq!(d.p(), 50);
        let labels = d.true_labels.as_ref().unwrap();
        for g in 0..5 {
            assert_eq!(labels.iter().filter(|&&l| l == g).count(), 10);
        }
        let z = d.true_z.as_ref().unwrap();
        for j in 0..50 {
            let g = labels[j];
            let scale = d.values.get2(0, j) / toy_curve(g, z[0]);
            assert!((0.5..2.0).contains(&scale));
            for i in 0..200 {
                assert!((d.values.get2(i, j) - scale * toy_curve(g, z[i])).abs() < 1e-12);
            }
        }
        for g in 0..5 {
            let r = pearson(&column(&d, 10 * g), &column(&d, 10 * g + 7));
            assert!((r.abs() - 1.0).abs() < 1e-12);
        }
        // transient groups are exact shifts of each other
        for &zi in z {
            assert!((toy_curve(0, zi) - toy_curve(1, zi + 1.0)).abs() < 1e-15);
            assert!((toy_curve(1, zi) - toy_curve(2, zi + 1.0)).abs() < 1e-15);
        }
        assert_eq!(merged_toy_labels(labels)[..], [vec![0; 30], vec![1; 10], vec![2; 10]].concat()[..]);
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(
            generate_five_cluster_toy(30, 3, 0.1, 9).unwrap(),
            generate_five_cluster_toy(30, 3, 0.1, 9).unwrap()
        );
        assert_ne!(
            generate_five_cluster_toy(30, 3, 0.1, 9).unwrap().values,
            generate_five_cluster_toy(30, 3, 0.1, 10).unwrap().values
        );
        assert_eq!(
            generate_shifted_basis_toy(20, 5, (-1.0, 1.0), 0.1, 2).unwrap(),
            generate_shifted_basis_toy(20, 5, (-1.0, 1.0), 0.1, 2).unwrap()
        );
        assert_eq!(
            generate_two_basis_counts(20, 6, 2.0, 0.1, 3).unwrap(),
            generate_two_basis_counts(20, 6, 2.0, 0.1, 3).unwrap()
        );
    }

    #[test]
    fn shifted_toy_examples() {
        let d = generate_shifted_basis_toy(50, 5, (0.0, 2.0), 0.0, 3).unwrap();
        let z = d.true_z.as_ref().unwrap();
        for i in 0..50 {
            assert_eq!(d.values.get2(i, 0), bump(z[i], SHIFTED_BUMP_WIDTH));
        }
        assert_eq!(d.true_delta.as_ref().unwrap(), &vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        let d = generate_shifted_basis_toy(50, 3, (1.0, 1.0), 0.0, 3).unwrap();
        assert_eq!(column(&d, 0), column(&d, 2));
        assert!(generate_shifted_basis_toy(50, 1, (0.0, 1.0), 0.0, 3).is_err());
    }

    #[test]
    fn zinb_simulation() {
        let means = NdArray::filled(&[100, 3], 4.0);
        let all_zero = simulate_zinb_counts(&means, 2.0, 1.0, 1).unwrap();
        assert!(all_zero.values.data().iter().all(|&v| v == 0.0));
        let big = NdArray::filled(&[100_000, 1], 7.5);
        let d = simulate_zinb_counts(&big, 1e6, 0.0, 2).unwrap();
        let mean = d.values.sum() / 1e5;
        assert!((mean - 7.5).abs() / 7.5 < 0.05, "{mean}");
        assert_eq!(d, simulate_zinb_counts(&big, 1e6, 0.0, 2).unwrap());
        let zeros = |p: f64| {
            let d = simulate_zinb_counts(&NdArray::filled(&[5000, 1], 5.0), 3.0, p, 4).unwrap();
            d.values.data().iter().filter(|&&v| v == 0.0).count()
        };
        assert!(zeros(0.0) < zeros(0.3) && zeros(0.3) < zeros(0.7));
        assert!(simulate_zinb_counts(&NdArray::filled(&[2, 2], 0.0), 1.0, 0.1, 1).is_err());
        assert!(simulate_zinb_counts(&means, -1.0, 0.1, 1).is_err());
        assert!(simulate_zinb_counts(&means, 1.0, 1.5, 1).is_err());
    }

    fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn csv_loading() {
        let dir = tempfile::tempdir().unwrap();
        let d = load_csv(&write(&dir, "a.csv", "1.5,2\n-3,4e-1\n"), false, None).unwrap();
        assert_eq!(d.values.data(), &[1.5, 2.0, -3.0, 0.4]);
        assert_eq!(d.feature_names, vec!["f0", "f1"]);
        assert_eq!(d.likelihood_hint, LikelihoodHint::Continuous);
        let d = load_csv(&write(&dir, "b.csv", "id,x,y\nc1,1,2\nc2,3,4\n"), true, Some(0)).unwrap();
        assert_eq!(d.feature_names, vec!["x", "y"]);
        assert_eq!(d.values.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(d.likelihood_hint, LikelihoodHint::Counts);
        let err = load_csv(&write(&dir, "c.csv", "1,2\n3,4\n5\n"), false, None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = load_csv(&write(&dir, "d.csv", "a,b\n1,2\n3,x\n"), true, None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, column: 2, .. }), "{err}");
        assert!(matches!(load_csv(&dir.path().join("missing.csv"), false, None), Err(Error::Io { .. })));
        assert!(load_csv(&write(&dir, "e.csv", "a,b\n"), true, None).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_five_cluster_toy(7, 2, 0.05, 5).unwrap();
        let path = dir.path().join("toy.csv");
        write_csv(&path, &d).unwrap();
        let back = load_csv(&path, true, None).unwrap();
        assert_eq!(back.values, d.values);
        assert_eq!(back.feature_names, d.feature_names);
    }

    #[test]
    fn truth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = Truth {
            labels: Some(vec![0, 1, 1]),
            labels_ti: Some(vec![0, 0, 1]),
            z: Some(vec![0.1, -2.5]),
            delta: None,
        };
        let path = dir.path().join("truth.csv");
        t.write(&path).unwrap();
        assert_eq!(Truth::read(&path).unwrap(), t);
        assert_eq!(t.labels_for(true), Some(&[0, 0, 1][..]));
        let bad = write(&dir, "bad.csv", "field,index,value\nlabel,1,0\n");
        assert!(matches!(Truth::read(&bad), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn standardize_examples() {
        let d = generate_five_cluster_toy(40, 2, 0.1, 6).unwrap();
        let (s, stats) = standardize(&d).unwrap();
        for j in 0..d.p() {
            let c = column(&s, j);
            let mean = c.iter().sum::<f64>() / 40.0;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 40.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
        let (again, _) = standardize(&s).unwrap();
        for (a, b) in again.values.data().iter().zip(s.values.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let back = unstandardize(&s.values, &stats).unwrap();
        for (a, b) in back.data().iter().zip(d.values.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let constant = DataMatrix::new(NdArray::filled(&[4, 1], 3.0), LikelihoodHint::Continuous).unwrap();
        let (s, stats) = standardize(&constant).unwrap();
        assert!(s.values.data().iter().all(|&v| v == 0.0));
        assert_eq!(stats[0], FeatureStats { mean: 3.0, sd: 0.0 });
    }

    #[test]
    fn duplication_repeats_features() {
        let d = generate_five_cluster_toy(5, 1, 0.0, 7).unwrap();
        let dd = d.duplicate_features(3).unwrap();
        assert_eq!(dd.p(), 15);
        assert_eq!(dd.true_labels.as_ref().unwrap()[..5], dd.true_labels.as_ref().unwrap()[10..]);
        assert_eq!(column(&dd, 2), column(&dd, 12));
    }

    #[test]
    fn count_hint_is_validated() {
        let bad = DataMatrix::new(NdArray::filled(&[2, 2], 0.5), LikelihoodHint::Counts);
        assert!(bad.is_err());
    }

    proptest! {
        #[test]
        fn zinb_counts_are_counts(seed in 0u64..500, dropout in 0.0f64..1.0) {
            let d = simulate_zinb_counts(&NdArray::filled(&[10, 2], 3.0), 1.5, dropout, seed).unwrap();
            prop_assert!(is_count_matrix(&d.values));
        }
    }
}
