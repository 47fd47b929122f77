//! Synthetic task generation, distribution shift, splits and CSV ingestion.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, NptlError, Result};
use crate::matrix::Matrix;
use crate::models::Target;
use crate::rng::{rng_from_seed, stream, stream_seed};

/// Features with one target per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub features: Matrix,
    pub targets: Vec<Target>,
    /// Generator description or source path.
    pub provenance: String,
}

impl LabeledDataset {
    pub fn new(features: Matrix, targets: Vec<Target>, provenance: impl Into<String>) -> Result<Self> {
        if features.rows() != targets.len() {
            return invalid!("{} feature rows but {} targets", features.rows(), targets.len());
        }
        if !features.is_finite() {
            return invalid!("features contain non-finite entries");
        }
        Ok(LabeledDataset { features, targets, provenance: provenance.into() })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Hard class labels; fails if any target is not a class index.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.targets
            .iter()
            .enumerate()
            .map(|(i, t)| t.class().ok_or_else(|| NptlError::InvalidArgument(format!("row {i} has no class label"))))
            .collect()
    }

    /// One more than the largest class label.
    pub fn num_classes(&self) -> usize {
        self.targets.iter().filter_map(Target::class).max().map_or(0, |c| c + 1)
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select_rows(idx),
            targets: idx.iter().map(|&i| self.targets[i].clone()).collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for c in self.targets.iter().filter_map(Target::class) {
            counts[c] += 1;
        }
        counts
    }

    /// Fraction of rows in the most common class.
    pub fn majority_rate(&self) -> f64 {
        let counts = self.class_counts();
        counts.iter().copied().max().unwrap_or(0) as f64 / self.len().max(1) as f64
    }
}

/// Balanced `k`-class Gaussian mixture with unit isotropic noise.
///
/// Class means are `separation` apart: on scaled basis vectors when `k <= d`,
/// otherwise evenly spaced on a circle in the first two coordinates (on a line
/// when `d == 1`). Rows are shuffled.
pub fn gen_gaussian_mixture(k: usize, d: usize, n: usize, separation: f64, seed: u64) -> Result<LabeledDataset> {
    if k < 2 || d == 0 || n < k {
        return invalid!("gaussian mixture needs k >= 2, d >= 1 and n >= k (got k={k}, d={d}, n={n})");
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return invalid!("separation must be finite and non-negative, got {separation}");
    }
    let means = mixture_means(k, d, separation);
    let mut rng = rng_from_seed(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n * d);
    for &c in &labels {
        for &m in &means[c][..d] {
            let z: f64 = rng.sample(StandardNormal);
            data.push(m + z);
        }
    }
    LabeledDataset::new(
        Matrix::from_vec(n, d, data)?,
        labels.into_iter().map(Target::Class).collect(),
        format!("gaussian-mixture(k={k},d={d},n={n},separation={separation},seed={seed})"),
    )
}

fn mixture_means(k: usize, d: usize, separation: f64) -> Vec<Vec<f64>> {
    let mut means = vec![vec![0.0; d]; k];
    if k <= d {
        let scale = separation / 2f64.sqrt();
        for (c, m) in means.iter_mut().enumerate() {
            m[c] = scale;
        }
    } else if d >= 2 {
        let radius = separation / (2.0 * (PI / k as f64).sin());
        for (c, m) in means.iter_mut().enumerate() {
            let angle = 2.0 * PI * c as f64 / k as f64;
            m[0] = radius * angle.cos();
            m[1] = radius * angle.sin();
        }
    } else {
        let offset = separation * (k as f64 - 1.0) / 2.0;
        for (c, m) in means.iter_mut().enumerate() {
            m[0] = separation * c as f64 - offset;
        }
    }
    means
}

/// Upstream/downstream shift: rotation in the plane of the first two
/// features, then translation, then class subsetting and relabeling.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    #[serde(default)]
    pub rotation_angle: f64,
    #[serde(default)]
    pub mean_shift: Vec<f64>,
    /// `label_permutation[c]` is the new label of class `c` (after subsetting).
    #[serde(default)]
    pub label_permutation: Option<Vec<usize>>,
    /// Original classes to keep; kept class `class_subset[j]` becomes label `j`.
    #[serde(default)]
    pub class_subset: Option<Vec<usize>>,
}

impl ShiftSpec {
    pub fn is_identity(&self) -> bool {
        self.rotation_angle == 0.0
            && self.mean_shift.iter().all(|&m| m == 0.0)
            && self.class_subset.is_none()
            && self.label_permutation.as_ref().is_none_or(|p| p.iter().enumerate().all(|(i, &c)| i == c))
    }
}

fn check_permutation(perm: &[usize], classes: usize) -> Result<()> {
    let mut seen = vec![false; perm.len()];
    for &c in perm {
        if c >= perm.len() || std::mem::replace(&mut seen[c], true) {
            return invalid!("label permutation {perm:?} is not a permutation");
        }
    }
    if perm.len() < classes {
        return invalid!("label permutation covers {} classes, data has {classes}", perm.len());
    }
    Ok(())
}

pub fn apply_shift(data: &LabeledDataset, shift: &ShiftSpec) -> Result<LabeledDataset> {
    let d = data.dim();
    if shift.rotation_angle != 0.0 && d < 2 {
        return invalid!("rotation needs at least two feature dimensions, data has {d}");
    }
    if !shift.mean_shift.is_empty() && shift.mean_shift.len() != d {
        return invalid!("mean shift has {} entries, data has {d} features", shift.mean_shift.len());
    }
    if shift.is_identity() {
        return Ok(data.clone());
    }

    let mut features = data.features.clone();
    if shift.rotation_angle != 0.0 {
        let (s, c) = shift.rotation_angle.sin_cos();
        for i in 0..features.rows() {
            let row = features.row_mut(i);
            let (x, y) = (row[0], row[1]);
            row[0] = c * x - s * y;
            row[1] = s * x + c * y;
        }
    }
    if !shift.mean_shift.is_empty() {
        for i in 0..features.rows() {
            for (v, m) in features.row_mut(i).iter_mut().zip(&shift.mean_shift) {
                *v += m;
            }
        }
    }

    let mut keep: Vec<usize> = (0..data.len()).collect();
    let mut targets = data.targets.clone();
    if let Some(subset) = &shift.class_subset {
        let mut relabel = std::collections::HashMap::new();
        for (j, &c) in subset.iter().enumerate() {
            if relabel.insert(c, j).is_some() {
                return invalid!("class subset {subset:?} repeats class {c}");
            }
        }
        keep.retain(|&i| data.targets[i].class().is_some_and(|c| relabel.contains_key(&c)));
        for t in &mut targets {
            if let Some(c) = t.class() {
                if let Some(&j) = relabel.get(&c) {
                    *t = Target::Class(j);
                }
            }
        }
    }
    if let Some(perm) = &shift.label_permutation {
        let classes = match &shift.class_subset {
            Some(s) => s.len(),
            None => data.num_classes(),
        };
        check_permutation(perm, classes)?;
        for &i in &keep {
            if let Target::Class(c) = targets[i] {
                targets[i] = Target::Class(perm[c]);
            }
        }
    }
    let features = features.select_rows(&keep);
    let targets = keep.iter().map(|&i| targets[i].clone()).collect();
    LabeledDataset::new(features, targets, format!("{} | shift{:?}", data.provenance, shift))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    /// Holds out `test_fraction`, then 10% of the remainder for validation.
    pub fn with_default_val(test_fraction: f64, seed: u64) -> Self {
        let val = 0.1 * (1.0 - test_fraction);
        SplitSpec { train_fraction: 1.0 - test_fraction - val, val_fraction: val, test_fraction, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_fraction, self.val_fraction, self.test_fraction];
        if fr.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return invalid!("split fractions must lie in (0, 1), got {fr:?}");
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return invalid!("split fractions must sum to 1, got {fr:?}");
        }
        Ok(())
    }
}

/// Seeded shuffle into disjoint train/val/test parts covering every row.
pub fn split(data: &LabeledDataset, spec: &SplitSpec) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    let n = data.len();
    let n_test = (n as f64 * spec.test_fraction).round() as usize;
    let n_val = (n as f64 * spec.val_fraction).round() as usize;
    if n_test == 0 || n_val == 0 || n_test + n_val >= n {
        return invalid!("split of {n} rows leaves an empty part (val {n_val}, test {n_test})");
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(stream_seed(spec.seed, stream::SPLIT, 0)));
    let n_train = n - n_val - n_test;
    let (train, rest) = order.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    Ok((data.subset(train), data.subset(val), data.subset(test)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    Class,
    Value,
}

/// Header row `x0,..,x{d-1},target`; features first, target last.
pub fn write_csv(path: impl AsRef<Path>, data: &LabeledDataset) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..data.dim()).map(|j| format!("x{j}")).collect();
    header.push("target".into());
    w.write_record(&header)?;
    for (row, t) in data.features.iter_rows().zip(&data.targets) {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        rec.push(match t {
            Target::Class(c) => c.to_string(),
            Target::Value(v) => format!("{v:?}"),
            Target::Soft(_) => return invalid!("soft targets have no csv representation"),
        });
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| NptlError::io(path, e))
}

pub fn read_csv(path: impl AsRef<Path>, kind: TargetKind) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let width = r.headers()?.len();
    if width < 2 {
        return Err(NptlError::Format { path: path.into(), reason: "need at least one feature and a target column".into() });
    }
    let mut data = Vec::new();
    let mut targets = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |field: &str| NptlError::Format {
            path: path.into(),
            reason: format!("row {}: cannot parse `{field}`", line + 2),
        };
        for field in rec.iter().take(width - 1) {
            data.push(field.trim().parse::<f64>().map_err(|_| bad(field))?);
        }
        let last = rec.get(width - 1).ok_or_else(|| bad(""))?.trim();
        targets.push(match kind {
            TargetKind::Class => Target::Class(last.parse().map_err(|_| bad(last))?),
            TargetKind::Value => Target::Value(last.parse().map_err(|_| bad(last))?),
        });
    }
    let features = Matrix::from_vec(targets.len(), width - 1, data)?;
    LabeledDataset::new(features, targets, path.display().to_string())
}

/// JSON sidecar describing a generated or loaded dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: u32,
    pub rows: usize,
    pub dim: usize,
    pub class_counts: Vec<usize>,
    pub provenance: String,
    pub seed: Option<u64>,
    pub shift: Option<ShiftSpec>,
}

impl DatasetManifest {
    pub fn describe(data: &LabeledDataset, seed: Option<u64>, shift: Option<ShiftSpec>) -> Self {
        DatasetManifest {
            format: 1,
            rows: data.len(),
            dim: data.dim(),
            class_counts: data.class_counts(),
            provenance: data.provenance.clone(),
            seed,
            shift,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn balanced_classes() {
        let d = gen_gaussian_mixture(2, 3, 1000, 4.0, 1).unwrap();
        assert_eq!(d.class_counts(), vec![500, 500]);
        let d = gen_gaussian_mixture(3, 2, 10, 4.0, 1).unwrap();
        let counts = d.class_counts();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn generator_is_deterministic() {
        let a = gen_gaussian_mixture(4, 3, 200, 2.0, 9).unwrap();
        let b = gen_gaussian_mixture(4, 3, 200, 2.0, 9).unwrap();
        assert_eq!(a.features.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.features.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.targets, b.targets);
        let c = gen_gaussian_mixture(4, 3, 200, 2.0, 10).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn generator_rejects_bad_dims() {
        assert!(gen_gaussian_mixture(1, 2, 10, 1.0, 0).is_err());
        assert!(gen_gaussian_mixture(2, 0, 10, 1.0, 0).is_err());
        assert!(gen_gaussian_mixture(5, 2, 4, 1.0, 0).is_err());
    }

    #[test]
    fn mean_spacing() {
        for (k, d) in [(2, 2), (8, 2), (3, 1), (4, 6)] {
            let means = mixture_means(k, d, 3.0);
            let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let min = (0..k)
                .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
                .map(|(i, j)| dist(&means[i], &means[j]))
                .fold(f64::INFINITY, f64::min);
            assert!((min - 3.0).abs() < 1e-9, "k={k} d={d}: {min}");
        }
    }

    #[test]
    fn identity_shift_is_bit_exact() {
        let d = gen_gaussian_mixture(3, 2, 60, 2.0, 1).unwrap();
        assert_eq!(apply_shift(&d, &ShiftSpec::default()).unwrap(), d);
    }

    #[test]
    fn full_turn_and_translation() {
        let d = gen_gaussian_mixture(3, 2, 60, 2.0, 1).unwrap();
        let turned = apply_shift(&d, &ShiftSpec { rotation_angle: 2.0 * PI, ..Default::default() }).unwrap();
        for (a, b) in turned.features.as_slice().iter().zip(d.features.as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
        let moved = apply_shift(&d, &ShiftSpec { mean_shift: vec![5.0, 0.0], ..Default::default() }).unwrap();
        assert!((moved.features.column_mean(0) - d.features.column_mean(0) - 5.0).abs() < 1e-9);
        assert!(apply_shift(&d, &ShiftSpec { mean_shift: vec![1.0], ..Default::default() }).is_err());
    }

    #[test]
    fn rotation_needs_two_dims() {
        let d = gen_gaussian_mixture(2, 1, 10, 2.0, 1).unwrap();
        assert!(apply_shift(&d, &ShiftSpec { rotation_angle: 1.0, ..Default::default() }).is_err());
    }

    #[test]
    fn subset_and_permutation() {
        let d = gen_gaussian_mixture(4, 2, 80, 2.0, 3).unwrap();
        let shift = ShiftSpec {
            class_subset: Some(vec![3, 1]),
            label_permutation: Some(vec![1, 0]),
            ..Default::default()
        };
        let s = apply_shift(&d, &shift).unwrap();
        assert_eq!(s.len(), 40);
        let kept: Vec<usize> = (0..d.len()).filter(|&i| matches!(d.targets[i], Target::Class(1 | 3))).collect();
        for (j, &i) in kept.iter().enumerate() {
            assert_eq!(s.features.row(j), d.features.row(i));
            let expected = if d.targets[i] == Target::Class(3) { 1 } else { 0 };
            assert_eq!(s.targets[j], Target::Class(expected));
        }
        let bad = ShiftSpec { label_permutation: Some(vec![0, 0, 1, 2]), ..Default::default() };
        assert!(apply_shift(&d, &bad).is_err());
    }

    #[test]
    fn split_sizes_and_partition() {
        let d = gen_gaussian_mixture(2, 2, 100, 2.0, 4).unwrap();
        let spec = SplitSpec { train_fraction: 0.8, val_fraction: 0.1, test_fraction: 0.1, seed: 1 };
        let (tr, va, te) = split(&d, &spec).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (80, 10, 10));
        let mut rows: Vec<Vec<u64>> = [&tr, &va, &te]
            .iter()
            .flat_map(|p| p.features.iter_rows().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect::<Vec<_>>())
            .collect();
        let mut orig: Vec<Vec<u64>> = d.features.iter_rows().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        rows.sort();
        orig.sort();
        assert_eq!(rows, orig);

        let (tr2, _, _) = split(&d, &spec).unwrap();
        assert_eq!(tr, tr2);
        let (tr3, _, _) = split(&d, &SplitSpec { seed: 2, ..spec }).unwrap();
        assert_ne!(tr, tr3);
    }

    #[test]
    fn split_validation() {
        let d = gen_gaussian_mixture(2, 2, 4, 2.0, 4).unwrap();
        let spec = SplitSpec { train_fraction: 0.8, val_fraction: 0.1, test_fraction: 0.1, seed: 1 };
        assert!(split(&d, &spec).is_err());
        let bad = SplitSpec { train_fraction: 0.5, val_fraction: 0.1, test_fraction: 0.1, seed: 1 };
        assert!(bad.validate().is_err());
        let default = SplitSpec::with_default_val(0.2, 0);
        assert!((default.val_fraction - 0.08).abs() < 1e-12);
        default.validate().unwrap();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn csv_round_trip(seed in 0u64..1000, n in 4usize..40, d in 1usize..4) {
            let data = gen_gaussian_mixture(2, d, n, 1.5, seed).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("d.csv");
            write_csv(&path, &data).unwrap();
            let back = read_csv(&path, TargetKind::Class).unwrap();
            prop_assert_eq!(&back.targets, &data.targets);
            for (a, b) in back.features.as_slice().iter().zip(data.features.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn csv_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "x0,target\n1.0,abc\n").unwrap();
        assert!(read_csv(&path, TargetKind::Class).is_err());
    }
}
