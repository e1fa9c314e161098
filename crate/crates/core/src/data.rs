//! Paired two-modality datasets: synthetic generation, manifest loading,
//! stratified splits and feature scaling.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::classical::pca_fit;
use crate::error::{arg, QcmmError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x_h: Vec<f64>,
    pub x_l: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub d_h: usize,
    pub d_l: usize,
    pub n_classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub samples: Vec<Sample>,
    pub split: Split,
    pub spec: DatasetSpec,
    pub class_names: Vec<String>,
}

impl DatasetBundle {
    pub fn new(samples: Vec<Sample>, split: Split, n_classes: usize) -> Result<Self> {
        let spec = DatasetSpec {
            d_h: samples.first().map_or(0, |s| s.x_h.len()),
            d_l: samples.first().map_or(0, |s| s.x_l.len()),
            n_classes,
        };
        let bundle = Self {
            samples,
            split,
            spec,
            class_names: (0..n_classes).map(|c| format!("class{c}")).collect(),
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.x_h.len() != self.spec.d_h || s.x_l.len() != self.spec.d_l {
                return Err(QcmmError::Data(format!("sample {i} has inconsistent widths")));
            }
            if s.label >= self.spec.n_classes {
                return Err(QcmmError::Data(format!(
                    "sample {i} label {} outside 0..{}",
                    s.label, self.spec.n_classes
                )));
            }
            if s.x_h.iter().chain(&s.x_l).any(|v| !v.is_finite()) {
                return Err(QcmmError::Data(format!("sample {i} has a non-finite feature")));
            }
        }
        let n = self.samples.len();
        let mut seen = vec![false; n];
        for &i in self.split.train.iter().chain(&self.split.test) {
            if i >= n || seen[i] {
                return Err(QcmmError::Split(format!("index {i} out of range or repeated")));
            }
            seen[i] = true;
        }
        if !(self.split.train.is_empty() && self.split.test.is_empty()) && seen.iter().any(|s| !s) {
            return Err(QcmmError::Split("split does not cover every sample".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<&Sample> {
        indices.iter().map(|&i| &self.samples[i]).collect()
    }

    pub fn class_counts(&self, indices: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.spec.n_classes];
        for &i in indices {
            counts[self.samples[i].label] += 1;
        }
        counts
    }

    fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.spec.n_classes];
        for (i, s) in self.samples.iter().enumerate() {
            out[s.label].push(i);
        }
        out
    }
}

fn stratified(bundle: &DatasetBundle, seed: u64, n_train: impl Fn(usize, usize) -> Result<usize>) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split::default();
    for (c, mut idx) in bundle.by_class().into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(QcmmError::Split(format!("class {c} has fewer than 2 samples")));
        }
        idx.shuffle(&mut rng);
        let k = n_train(c, idx.len())?;
        split.train.extend_from_slice(&idx[..k]);
        split.test.extend_from_slice(&idx[k..]);
    }
    split.train.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Stratified split keeping at least one train and one test sample per class.
pub fn split_dataset(bundle: &DatasetBundle, train_fraction: f64, seed: u64) -> Result<DatasetBundle> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return arg(format!("train fraction must lie in (0, 1), got {train_fraction}"));
    }
    let split = stratified(bundle, seed, |_, n| {
        Ok(((n as f64 * train_fraction).round() as usize).clamp(1, n - 1))
    })?;
    Ok(DatasetBundle {
        split,
        ..bundle.clone()
    })
}

/// Stratified split with an explicit train count per class.
pub fn split_per_class(bundle: &DatasetBundle, train_counts: &[usize], seed: u64) -> Result<DatasetBundle> {
    if train_counts.len() != bundle.spec.n_classes {
        return Err(QcmmError::Split(format!(
            "{} per-class counts for {} classes",
            train_counts.len(),
            bundle.spec.n_classes
        )));
    }
    let split = stratified(bundle, seed, |c, n| {
        let k = train_counts[c];
        if k == 0 || k >= n {
            return Err(QcmmError::Split(format!(
                "class {c}: {k} training samples requested out of {n}"
            )));
        }
        Ok(k)
    })?;
    Ok(DatasetBundle {
        split,
        ..bundle.clone()
    })
}

/// Gaussian-blob generator. With `complementarity`, modality `h` carries
/// only the high class bit and `l` only the low bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_per_class: usize,
    pub d: usize,
    pub separation: f64,
    pub complementarity: bool,
    pub train_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_per_class: 200,
            d: 8,
            separation: 5.0,
            complementarity: true,
            train_fraction: 0.8,
        }
    }
}

pub const SYNTH_CLASSES: usize = 4;

fn unit_direction(d: usize, phase: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d)
        .map(|j| if (j + phase).is_multiple_of(2) { 1.0 } else { -1.0 } * (1.0 + (j % 3) as f64 * 0.25))
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn check_synth(spec: &SynthSpec) -> Result<()> {
    if spec.n_per_class < 4 || spec.d < 2 {
        return arg(format!(
            "synthetic spec needs n_per_class >= 4 and d >= 2, got {} and {}",
            spec.n_per_class, spec.d
        ));
    }
    if !(spec.separation.is_finite() && spec.separation >= 0.0) {
        return arg("separation must be finite and non-negative");
    }
    Ok(())
}

fn draw_samples(spec: &SynthSpec, n_per_class: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (u_a, u_b) = (unit_direction(spec.d, 0), unit_direction(spec.d, 1));
    let half = spec.separation / 2.0;
    let sign = |bit: usize| if bit == 1 { half } else { -half };
    let mean = |primary: usize, secondary: usize| -> Vec<f64> {
        if spec.complementarity {
            u_a.iter().map(|a| a * sign(primary)).collect()
        } else {
            u_a.iter().zip(&u_b).map(|(a, b)| a * sign(primary) + b * sign(secondary)).collect()
        }
    };
    let mut samples = Vec::with_capacity(SYNTH_CLASSES * n_per_class);
    for label in 0..SYNTH_CLASSES {
        let (hi, lo) = (label >> 1, label & 1);
        let (m_h, m_l) = (mean(hi, lo), mean(lo, hi));
        for _ in 0..n_per_class {
            let mut draw = |m: &[f64]| -> Vec<f64> {
                m.iter()
                    .map(|mu| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        mu + z
                    })
                    .collect()
            };
            let x_h = draw(&m_h);
            let x_l = draw(&m_l);
            samples.push(Sample { x_h, x_l, label });
        }
    }
    samples
}

pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<DatasetBundle> {
    check_synth(spec)?;
    let unsplit = DatasetBundle::new(draw_samples(spec, spec.n_per_class, seed), Split::default(), SYNTH_CLASSES)?;
    split_dataset(&unsplit, spec.train_fraction, seed ^ 0x9e37_79b9_7f4a_7c15)
}

/// Least-squares one-vs-rest linear classifier with bias.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    weights: DMatrix<f64>,
}

impl LinearProbe {
    pub fn fit(xs: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<Self> {
        let n = xs.len();
        let d = xs.first().map_or(0, Vec::len) + 1;
        if n < d {
            return Err(QcmmError::Fit("too few samples for a linear probe".into()));
        }
        let x = DMatrix::from_fn(n, d, |i, j| if j + 1 == d { 1.0 } else { xs[i][j] });
        let y = DMatrix::from_fn(n, n_classes, |i, c| if labels[i] == c { 1.0 } else { 0.0 });
        let xtx = x.transpose() * &x + DMatrix::identity(d, d) * 1e-9;
        let xty = x.transpose() * y;
        let weights = xtx
            .cholesky()
            .ok_or_else(|| QcmmError::Fit("singular probe system".into()))?
            .solve(&xty);
        Ok(Self { weights })
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut v: Vec<f64> = x.to_vec();
        v.push(1.0);
        let scores = self.weights.transpose() * DVector::from_vec(v);
        scores.argmax().0
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], labels: &[usize]) -> f64 {
        let hits = xs.iter().zip(labels).filter(|(x, &y)| self.predict(x) == y).count();
        hits as f64 / xs.len().max(1) as f64
    }
}

/// Linear-probe accuracies separating what each modality can see.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    /// Modality `h` alone on classes `{0, 1}`, which differ only in `l`.
    pub h_on_confounded_pair: f64,
    /// Modality `l` alone on classes `{0, 2}`, which differ only in `h`.
    pub l_on_confounded_pair: f64,
    pub h_only: f64,
    pub l_only: f64,
    pub concatenated: f64,
}

fn probe_on(train: &[&Sample], test: &[&Sample], n_classes: usize) -> Result<ProbeReport> {
    let run = |classes: &[usize], view: &dyn Fn(&Sample) -> Vec<f64>| -> Result<f64> {
        let pick = |set: &[&Sample]| -> (Vec<Vec<f64>>, Vec<usize>) {
            set.iter()
                .filter(|s| classes.contains(&s.label))
                .map(|s| (view(s), s.label))
                .unzip()
        };
        let (xtr, ytr) = pick(train);
        let (xte, yte) = pick(test);
        Ok(LinearProbe::fit(&xtr, &ytr, n_classes)?.accuracy(&xte, &yte))
    };
    let h = |s: &Sample| s.x_h.clone();
    let l = |s: &Sample| s.x_l.clone();
    let both = |s: &Sample| [s.x_h.as_slice(), s.x_l.as_slice()].concat();
    let all: Vec<usize> = (0..n_classes).collect();
    Ok(ProbeReport {
        h_on_confounded_pair: run(&[0, 1], &h)?,
        l_on_confounded_pair: run(&[0, 2], &l)?,
        h_only: run(&all, &h)?,
        l_only: run(&all, &l)?,
        concatenated: run(&all, &both)?,
    })
}

/// Probes fitted on the train split and scored on the test split.
pub fn probe_report(bundle: &DatasetBundle) -> Result<ProbeReport> {
    probe_on(
        &bundle.subset(&bundle.split.train),
        &bundle.subset(&bundle.split.test),
        bundle.spec.n_classes,
    )
}

/// Held-out draw size per class for [`synth_probe_oracle`].
pub const ORACLE_DRAW: usize = 5000;

/// Probes fitted on the generated train split and scored on a large fresh
/// draw from the same distribution, so the report reflects what each view
/// can separate rather than test-split sampling noise.
pub fn synth_probe_oracle(spec: &SynthSpec, seed: u64) -> Result<ProbeReport> {
    let bundle = synth_generate(spec, seed)?;
    let fresh = draw_samples(spec, ORACLE_DRAW, seed.wrapping_add(0x0bad_5eed));
    let fresh: Vec<&Sample> = fresh.iter().collect();
    probe_on(&bundle.subset(&bundle.split.train), &fresh, SYNTH_CLASSES)
}

/// Per-feature affine map of the training range onto `[0, π]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut it = rows.into_iter();
        let first = it.next().ok_or_else(|| QcmmError::Fit("no rows to scale".into()))?;
        let (mut min, mut max) = (first.to_vec(), first.to_vec());
        for row in it {
            for ((lo, hi), &v) in min.iter_mut().zip(max.iter_mut()).zip(row) {
                *lo = lo.min(v);
                *hi = hi.max(v);
            }
        }
        Ok(Self { min, max })
    }

    /// Constant features map to 0.
    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(&v, (&lo, &hi))| {
                if hi > lo {
                    (v - lo) / (hi - lo) * std::f64::consts::PI
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// One modality in a manifest: a little-endian `f32` blob, row-major and
/// sample-major, with the sample count leading `shape`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobRef {
    pub path: PathBuf,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SplitSpec {
    Explicit { train_indices: Vec<usize>, test_indices: Vec<usize> },
    PerClass { per_class_train: Vec<usize>, seed: u64 },
    Fraction { train_fraction: f64, seed: u64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduce {
    #[default]
    Pca,
    None,
}

fn default_components() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub modality_h: BlobRef,
    pub modality_l: BlobRef,
    /// Little-endian `i32` labels, one per sample.
    pub labels: PathBuf,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_names: Vec<String>,
    /// Original labels to keep, remapped to `0..C` in ascending order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub select_classes: Option<Vec<i64>>,
    pub split: SplitSpec,
    #[serde(default)]
    pub reduce: Reduce,
    #[serde(default = "default_components")]
    pub components: usize,
}

fn manifest_err(path: &Path, reason: impl Into<String>) -> QcmmError {
    QcmmError::Manifest {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_blob(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| manifest_err(path, e.to_string()))?;
    if bytes.len() != expected {
        return Err(manifest_err(
            path,
            format!("expected {expected} bytes from the declared shape, found {}", bytes.len()),
        ));
    }
    Ok(bytes)
}

fn read_f32_rows(base: &Path, blob: &BlobRef) -> Result<Vec<Vec<f64>>> {
    let path = base.join(&blob.path);
    let (&n, rest) = blob
        .shape
        .split_first()
        .ok_or_else(|| manifest_err(&path, "empty shape"))?;
    let width: usize = rest.iter().product();
    if width == 0 {
        return Err(manifest_err(&path, "zero-width sample shape"));
    }
    let bytes = read_blob(&path, n * width * 4)?;
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(values.chunks_exact(width).map(<[f64]>::to_vec).collect())
}

fn read_labels(path: &Path, n: usize) -> Result<Vec<i64>> {
    let bytes = read_blob(path, n * 4)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as i64)
        .collect())
}

fn apply_pca(bundle: &mut DatasetBundle, d: usize) -> Result<()> {
    let train: Vec<&Sample> = bundle.subset(&bundle.split.train);
    let h = pca_fit(&train.iter().map(|s| s.x_h.clone()).collect::<Vec<_>>(), d)?;
    let l = pca_fit(&train.iter().map(|s| s.x_l.clone()).collect::<Vec<_>>(), d)?;
    for s in &mut bundle.samples {
        s.x_h = h.transform(&s.x_h)?;
        s.x_l = l.transform(&s.x_l)?;
    }
    bundle.spec.d_h = d;
    bundle.spec.d_l = d;
    Ok(())
}

pub fn load_dataset(manifest_path: &Path) -> Result<DatasetBundle> {
    let text = fs::read_to_string(manifest_path).map_err(|e| manifest_err(manifest_path, e.to_string()))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| manifest_err(manifest_path, e.to_string()))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let xh = read_f32_rows(base, &manifest.modality_h)?;
    let xl = read_f32_rows(base, &manifest.modality_l)?;
    if xh.len() != xl.len() {
        return Err(manifest_err(manifest_path, "modalities disagree on the sample count"));
    }
    let raw_labels = read_labels(&base.join(&manifest.labels), xh.len())?;

    let remap: BTreeMap<i64, usize> = match &manifest.select_classes {
        Some(sel) => {
            let mut sorted = sel.clone();
            sorted.sort_unstable();
            sorted.dedup();
            sorted.into_iter().enumerate().map(|(i, c)| (c, i)).collect()
        }
        None => {
            let mut present: Vec<i64> = raw_labels.clone();
            present.sort_unstable();
            present.dedup();
            present.into_iter().map(|c| (c, c.max(0) as usize)).collect()
        }
    };
    let n_classes = match &manifest.select_classes {
        Some(_) => remap.len(),
        None => remap.keys().last().map_or(0, |&c| c as usize + 1),
    };
    if !manifest.class_names.is_empty() && manifest.select_classes.is_none() && manifest.class_names.len() < n_classes {
        return Err(QcmmError::Data(format!(
            "label {} has no class name",
            n_classes - 1
        )));
    }

    let mut kept_original = Vec::new();
    let mut samples = Vec::new();
    for (i, ((h, l), &y)) in xh.into_iter().zip(xl).zip(&raw_labels).enumerate() {
        if y < 0 {
            return Err(QcmmError::Data(format!("sample {i} has negative label {y}")));
        }
        if let Some(&label) = remap.get(&y) {
            kept_original.push(i);
            samples.push(Sample { x_h: h, x_l: l, label });
        } else if manifest.select_classes.is_none() {
            return Err(QcmmError::Data(format!("sample {i} has unknown label {y}")));
        }
    }

    let unsplit = DatasetBundle::new(samples, Split::default(), n_classes)?;
    let mut bundle = match &manifest.split {
        SplitSpec::Explicit { train_indices, test_indices } => {
            // explicit indices refer to the original (unfiltered) sample order
            let position: BTreeMap<usize, usize> =
                kept_original.iter().enumerate().map(|(new, &old)| (old, new)).collect();
            let map = |idx: &[usize]| idx.iter().filter_map(|i| position.get(i).copied()).collect();
            let split = Split {
                train: map(train_indices),
                test: map(test_indices),
            };
            let b = DatasetBundle { split, ..unsplit };
            b.validate()?;
            b
        }
        SplitSpec::PerClass { per_class_train, seed } => split_per_class(&unsplit, per_class_train, *seed)?,
        SplitSpec::Fraction { train_fraction, seed } => split_dataset(&unsplit, *train_fraction, *seed)?,
    };
    bundle.class_names = if manifest.class_names.is_empty() {
        (0..n_classes).map(|c| format!("class{c}")).collect()
    } else {
        remap
            .iter()
            .map(|(&orig, _)| {
                let i = orig as usize;
                manifest.class_names.get(i).cloned().unwrap_or_else(|| format!("class{orig}"))
            })
            .collect()
    };
    if manifest.reduce == Reduce::Pca {
        apply_pca(&mut bundle, manifest.components)?;
    }
    Ok(bundle)
}

/// Write `bundle` as `h.f32`, `l.f32`, `labels.i32` and `manifest.json`
/// under `dir`, with an explicit split and no reduction.
pub fn save_manifest(bundle: &DatasetBundle, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let write_f32 = |name: &str, rows: Vec<&[f64]>| -> Result<()> {
        let bytes: Vec<u8> = rows
            .into_iter()
            .flat_map(|r| r.iter().flat_map(|&v| (v as f32).to_le_bytes()))
            .collect();
        fs::write(dir.join(name), bytes)?;
        Ok(())
    };
    write_f32("h.f32", bundle.samples.iter().map(|s| s.x_h.as_slice()).collect())?;
    write_f32("l.f32", bundle.samples.iter().map(|s| s.x_l.as_slice()).collect())?;
    let labels: Vec<u8> = bundle
        .samples
        .iter()
        .flat_map(|s| (s.label as i32).to_le_bytes())
        .collect();
    fs::write(dir.join("labels.i32"), labels)?;
    let n = bundle.len();
    let manifest = DatasetManifest {
        modality_h: BlobRef {
            path: "h.f32".into(),
            shape: vec![n, bundle.spec.d_h],
        },
        modality_l: BlobRef {
            path: "l.f32".into(),
            shape: vec![n, bundle.spec.d_l],
        },
        labels: "labels.i32".into(),
        class_names: bundle.class_names.clone(),
        select_classes: None,
        split: SplitSpec::Explicit {
            train_indices: bundle.split.train.clone(),
            test_indices: bundle.split.test.clone(),
        },
        reduce: Reduce::None,
        components: default_components(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}
