//! Datasets and their on-disk formats, train/test splitting, and a seeded
//! synthetic generator for end-to-end experiments.
//!
//! A dataset is a table of instances: a string id, a precomputed feature
//! vector (`f32` on disk, widened to `f64` for arithmetic), a full
//! root-to-leaf label path, and a demographic group tag. Features travel in
//! a small binary container (or CSV as a fallback); labels and groups are
//! headerless CSV keyed by instance id.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::fairness::{GroupId, GroupVocab};
use crate::taxonomy::{ClassId, Taxonomy};

const FEATURES_MAGIC: &[u8; 4] = b"DTTC";
const FEATURES_VERSION: u32 = 1;

/// In-memory dataset; rows of all four columns are aligned by index.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub features: Array2<f32>,
    /// Full label path per instance, root level first.
    pub labels: Vec<Vec<ClassId>>,
    pub groups: Vec<GroupId>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Feature dimension.
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Features widened to `f64` for model arithmetic.
    pub fn features_f64(&self) -> Array2<f64> {
        self.features.mapv(|x| x as f64)
    }

    /// Check internal alignment and consistency against a taxonomy and
    /// group vocabulary.
    pub fn validate(&self, tax: &Taxonomy, vocab: &GroupVocab) -> Result<()> {
        let m = self.ids.len();
        if self.features.nrows() != m || self.labels.len() != m || self.groups.len() != m {
            return Err(Error::Data(format!(
                "misaligned dataset: {m} ids, {} feature rows, {} label paths, {} group tags",
                self.features.nrows(),
                self.labels.len(),
                self.groups.len()
            )));
        }
        let mut seen = HashSet::new();
        for id in &self.ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Data(format!("duplicate instance id '{id}'")));
            }
        }
        if let Some(bad) = self.features.iter().position(|x| !x.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite feature value at flat index {bad}"
            )));
        }
        for (row, path) in self.labels.iter().enumerate() {
            validate_path(tax, path).map_err(|e| {
                Error::Data(format!("instance '{}' (row {row}): {e}", self.ids[row]))
            })?;
        }
        if let Some(g) = self.groups.iter().find(|g| g.index() >= vocab.len()) {
            return Err(Error::Data(format!(
                "group id {} outside the vocabulary of {} tags",
                g.index(),
                vocab.len()
            )));
        }
        Ok(())
    }

    /// New dataset holding the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut features = Array2::zeros((indices.len(), self.dim()));
        for (row, &j) in indices.iter().enumerate() {
            features.row_mut(row).assign(&self.features.row(j));
        }
        Dataset {
            ids: indices.iter().map(|&j| self.ids[j].clone()).collect(),
            features,
            labels: indices.iter().map(|&j| self.labels[j].clone()).collect(),
            groups: indices.iter().map(|&j| self.groups[j]).collect(),
        }
    }

    /// Load a dataset from its three files, validating alignment.
    /// A `.csv` feature path selects the CSV fallback format.
    pub fn load(
        features_path: &Path,
        labels_path: &Path,
        groups_path: &Path,
        tax: &Taxonomy,
        vocab: &GroupVocab,
    ) -> Result<Dataset> {
        let features = read_features_any(features_path)?;
        let (ids, labels) = read_labels_file(labels_path, tax)?;
        if features.nrows() != ids.len() {
            return Err(Error::Data(format!(
                "{} feature rows but {} label rows",
                features.nrows(),
                ids.len()
            )));
        }
        let groups = read_groups_file(groups_path, vocab, &ids)?;
        let ds = Dataset {
            ids,
            features,
            labels,
            groups,
        };
        ds.validate(tax, vocab)?;
        Ok(ds)
    }

    /// Write the three dataset files (binary features, label CSV, group CSV).
    pub fn write(
        &self,
        features_path: &Path,
        labels_path: &Path,
        groups_path: &Path,
        tax: &Taxonomy,
        vocab: &GroupVocab,
    ) -> Result<()> {
        write_features(features_path, &self.features)?;
        write_text(labels_path, &labels_to_csv(&self.ids, &self.labels, tax))?;
        write_text(groups_path, &groups_to_csv(&self.ids, &self.groups, vocab))
    }
}

/// A label path must visit each level in order and respect parenthood.
fn validate_path(tax: &Taxonomy, path: &[ClassId]) -> Result<()> {
    if path.len() != tax.n_levels() {
        return Err(Error::Data(format!(
            "label path has {} levels, taxonomy has {}",
            path.len(),
            tax.n_levels()
        )));
    }
    for (level, &id) in path.iter().enumerate() {
        if id.index() >= tax.total_classes() || tax.level_of(id) != level {
            return Err(Error::Data(format!(
                "label path entry {} is not a level-{} class",
                id.0,
                level + 1
            )));
        }
        if level > 0 && tax.parent(id) != Some(path[level - 1]) {
            return Err(Error::Data(format!(
                "inconsistent label path: '{}' is not a child of '{}'",
                tax.name(id),
                tax.name(path[level - 1])
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Feature matrix container
// ---------------------------------------------------------------------------

/// Serialize a feature matrix: magic `DTTC`, `u32` version, `u64` rows,
/// `u64` columns, then row-major `f32` values, all little-endian.
pub fn features_to_bytes(features: &Array2<f32>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(24 + features.len() * 4);
    buf.extend_from_slice(FEATURES_MAGIC);
    buf.extend_from_slice(&FEATURES_VERSION.to_le_bytes());
    buf.extend_from_slice(&(features.nrows() as u64).to_le_bytes());
    buf.extend_from_slice(&(features.ncols() as u64).to_le_bytes());
    for &v in features.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Parse the binary feature container; `origin` labels error messages.
pub fn features_from_bytes(bytes: &[u8], origin: &str) -> Result<Array2<f32>> {
    let header = 4 + 4 + 8 + 8;
    if bytes.len() < header {
        return Err(Error::format(origin, "truncated header"));
    }
    if &bytes[..4] != FEATURES_MAGIC {
        return Err(Error::format(origin, "bad magic: not a feature file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FEATURES_VERSION {
        return Err(Error::format(
            origin,
            format!("unsupported feature file version {version}"),
        ));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    if cols == 0 {
        return Err(Error::format(origin, "zero feature dimension"));
    }
    let count = rows
        .checked_mul(cols)
        .and_then(|c| usize::try_from(c).ok())
        .ok_or_else(|| Error::format(origin, "row/column counts overflow"))?;
    let expected = header + count * 4;
    if bytes.len() < expected {
        return Err(Error::format(
            origin,
            format!(
                "truncated payload: expected {count} values, found {}",
                (bytes.len() - header) / 4
            ),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format(
            origin,
            format!("{} trailing bytes after payload", bytes.len() - expected),
        ));
    }
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        let at = header + i * 4;
        let v = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(
                origin,
                format!("non-finite feature value at flat index {i}"),
            ));
        }
        values.push(v);
    }
    Ok(
        Array2::from_shape_vec((rows as usize, cols as usize), values)
            .expect("shape matches element count"),
    )
}

/// Write the binary feature container to a file.
pub fn write_features(path: &Path, features: &Array2<f32>) -> Result<()> {
    let bytes = features_to_bytes(features);
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read the binary feature container from a file.
pub fn read_features(path: &Path) -> Result<Array2<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    features_from_bytes(&bytes, &path.display().to_string())
}

/// Parse the CSV fallback: headerless rows of decimal values.
pub fn features_from_csv(src: &str, origin: &str) -> Result<Array2<f32>> {
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (idx, raw) in src.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match cols {
            None => cols = Some(fields.len()),
            Some(c) if c != fields.len() => {
                return Err(Error::format(
                    origin,
                    format!(
                        "row {} has {} values, previous rows have {c}",
                        idx + 1,
                        fields.len()
                    ),
                ));
            }
            _ => {}
        }
        for (col, field) in fields.iter().enumerate() {
            let v: f32 = field.trim().parse().map_err(|_| {
                Error::format(
                    origin,
                    format!(
                        "row {} column {}: '{}' is not a number",
                        idx + 1,
                        col + 1,
                        field
                    ),
                )
            })?;
            if !v.is_finite() {
                return Err(Error::format(
                    origin,
                    format!("row {} column {}: non-finite value", idx + 1, col + 1),
                ));
            }
            values.push(v);
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::format(origin, "no feature rows"))?;
    Ok(Array2::from_shape_vec((rows, cols), values).expect("shape matches element count"))
}

/// Read features from either container, selected by file extension.
pub fn read_features_any(path: &Path) -> Result<Array2<f32>> {
    if path.extension().is_some_and(|e| e == "csv") {
        let src =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        features_from_csv(&src, &path.display().to_string())
    } else {
        read_features(path)
    }
}

// ---------------------------------------------------------------------------
// Label and group CSV
// ---------------------------------------------------------------------------

fn split_csv_row(line: &str) -> Vec<&str> {
    line.split(',').map(str::trim).collect()
}

/// Parse headerless label rows `id,<level-1 class>,...,<leaf class>`,
/// resolving names per level and checking path consistency.
pub fn labels_from_csv(
    src: &str,
    tax: &Taxonomy,
    origin: &str,
) -> Result<(Vec<String>, Vec<Vec<ClassId>>)> {
    let n = tax.n_levels();
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in src.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields = split_csv_row(line);
        if fields.len() != n + 1 {
            return Err(Error::format(
                origin,
                format!(
                    "row {}: expected id plus {n} class names, found {} fields",
                    idx + 1,
                    fields.len()
                ),
            ));
        }
        let id = fields[0];
        if id.is_empty() {
            return Err(Error::format(origin, format!("row {}: empty id", idx + 1)));
        }
        if !seen.insert(id.to_string()) {
            return Err(Error::format(
                origin,
                format!("row {}: duplicate id '{id}'", idx + 1),
            ));
        }
        let mut path = Vec::with_capacity(n);
        for (level, name) in fields[1..].iter().enumerate() {
            let class = tax.find(level, name).ok_or_else(|| {
                Error::format(
                    origin,
                    format!(
                        "row {}: '{name}' is not a level-{} class",
                        idx + 1,
                        level + 1
                    ),
                )
            })?;
            if level > 0 && tax.parent(class) != Some(path[level - 1]) {
                return Err(Error::format(
                    origin,
                    format!(
                        "row {}: '{}' is not a child of '{}'",
                        idx + 1,
                        name,
                        tax.name(path[level - 1])
                    ),
                ));
            }
            path.push(class);
        }
        ids.push(id.to_string());
        labels.push(path);
    }
    Ok((ids, labels))
}

/// Render label rows in the same headerless CSV form.
pub fn labels_to_csv(ids: &[String], labels: &[Vec<ClassId>], tax: &Taxonomy) -> String {
    let mut out = String::new();
    for (id, path) in ids.iter().zip(labels) {
        let _ = write!(out, "{id}");
        for &class in path {
            let _ = write!(out, ",{}", tax.name(class));
        }
        out.push('\n');
    }
    out
}

fn read_labels_file(path: &Path, tax: &Taxonomy) -> Result<(Vec<String>, Vec<Vec<ClassId>>)> {
    let src =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    labels_from_csv(&src, tax, &path.display().to_string())
}

/// Parse headerless group rows `id,<group tag>` and align them to the
/// dataset's id order. Every dataset id must appear exactly once and no
/// foreign ids are allowed.
pub fn groups_from_csv(
    src: &str,
    vocab: &GroupVocab,
    ids: &[String],
    origin: &str,
) -> Result<Vec<GroupId>> {
    let mut by_id: HashMap<&str, GroupId> = HashMap::new();
    for (idx, raw) in src.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields = split_csv_row(line);
        if fields.len() != 2 {
            return Err(Error::format(
                origin,
                format!(
                    "row {}: expected 'id,group', found {} fields",
                    idx + 1,
                    fields.len()
                ),
            ));
        }
        let group = vocab.find(fields[1]).ok_or_else(|| {
            Error::format(
                origin,
                format!("row {}: unknown group tag '{}'", idx + 1, fields[1]),
            )
        })?;
        if by_id.insert(fields[0], group).is_some() {
            return Err(Error::format(
                origin,
                format!("row {}: duplicate id '{}'", idx + 1, fields[0]),
            ));
        }
    }
    if by_id.len() != ids.len() {
        let extra = by_id
            .keys()
            .find(|k| !ids.iter().any(|id| id.as_str() == **k))
            .map(|k| format!("; '{k}' has no features"))
            .unwrap_or_default();
        return Err(Error::format(
            origin,
            format!(
                "{} group rows for {} instances{extra}",
                by_id.len(),
                ids.len()
            ),
        ));
    }
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::format(origin, format!("no group tag for instance '{id}'")))
        })
        .collect()
}

/// Render group rows in the same headerless CSV form.
pub fn groups_to_csv(ids: &[String], groups: &[GroupId], vocab: &GroupVocab) -> String {
    let mut out = String::new();
    for (id, group) in ids.iter().zip(groups) {
        let _ = writeln!(out, "{id},{}", vocab.tag(*group));
    }
    out
}

fn read_groups_file(path: &Path, vocab: &GroupVocab, ids: &[String]) -> Result<Vec<GroupId>> {
    let src =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    groups_from_csv(&src, vocab, ids, &path.display().to_string())
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// Train/test split
// ---------------------------------------------------------------------------

/// Split into train and test partitions with a seeded shuffle.
///
/// When `stratified` is set, instances are bucketed by (leaf class, group)
/// and each bucket contributes its proportional share (largest-remainder
/// rounding, so every bucket is within one instance of `fraction * size`).
/// Buckets with fewer than two instances cannot be stratified and fall back
/// to pooled random assignment, with a warning. The train side always holds
/// exactly `round(fraction * len)` instances; both partitions preserve the
/// original row order.
pub fn split(
    ds: &Dataset,
    fraction: f64,
    seed: u64,
    stratified: bool,
) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie strictly between 0 and 1, got {fraction}"
        )));
    }
    let m = ds.len();
    if m < 2 {
        return Err(Error::Data(format!(
            "cannot split {m} instances into two non-empty partitions"
        )));
    }
    let target = (fraction * m as f64).round() as usize;
    let target = target.clamp(1, m - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Buckets in deterministic key order; the pooled fallback bucket (and
    // the whole dataset in non-stratified mode) sorts last.
    let mut buckets: Vec<Vec<usize>> = Vec::new();
    let mut pooled: Vec<usize> = Vec::new();
    if stratified {
        let mut by_key: BTreeMap<(ClassId, GroupId), Vec<usize>> = BTreeMap::new();
        for j in 0..m {
            let leaf = *ds.labels[j].last().expect("non-empty label path");
            by_key.entry((leaf, ds.groups[j])).or_default().push(j);
        }
        for (_, members) in by_key {
            if members.len() >= 2 {
                buckets.push(members);
            } else {
                pooled.extend(members);
            }
        }
        if !pooled.is_empty() {
            log::warn!(
                "{} instance(s) in single-member (leaf class, group) buckets; assigning them without stratification",
                pooled.len()
            );
        }
    } else {
        pooled = (0..m).collect();
    }
    if !pooled.is_empty() {
        buckets.push(pooled);
    }

    // Proportional allocation: floor every bucket's share, then hand out the
    // remaining train slots by largest fractional remainder.
    let mut alloc: Vec<usize> = buckets
        .iter()
        .map(|b| (fraction * b.len() as f64).floor() as usize)
        .collect();
    let mut remaining = target - alloc.iter().sum::<usize>().min(target);
    let mut order: Vec<usize> = (0..buckets.len()).collect();
    order.sort_by(|&a, &b| {
        let frac = |i: usize| fraction * buckets[i].len() as f64 - alloc[i] as f64;
        frac(b).partial_cmp(&frac(a)).unwrap().then(a.cmp(&b))
    });
    while remaining > 0 {
        let mut progressed = false;
        for &i in &order {
            if remaining == 0 {
                break;
            }
            if alloc[i] < buckets[i].len() {
                alloc[i] += 1;
                remaining -= 1;
                progressed = true;
            }
        }
        assert!(progressed, "allocation target exceeds dataset size");
    }

    let mut train_idx = Vec::with_capacity(target);
    let mut test_idx = Vec::with_capacity(m - target);
    for (bucket, take) in buckets.iter_mut().zip(&alloc) {
        bucket.shuffle(&mut rng);
        train_idx.extend_from_slice(&bucket[..*take]);
        test_idx.extend_from_slice(&bucket[*take..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((ds.select(&train_idx), ds.select(&test_idx)))
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// How far a corrupted sample moves from its own leaf cluster mean towards
/// the sibling's: past the midpoint, so corrupted samples look more like the
/// sibling than like their labeled class. Recovering them requires a
/// deliberate, costly boundary shift — the kind of shift that only happens
/// when training weights the afflicted group up.
const SIBLING_BLEND: f64 = 0.6;
/// Per-level decay of cluster offset scale: upper levels separate more
/// strongly than leaf levels.
const LEVEL_DECAY: f64 = 0.5;

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    /// Instances generated per leaf class.
    pub samples_per_leaf: usize,
    /// Feature dimension; must be at least the number of taxonomy levels.
    pub dim: usize,
    /// Scale of the level-1 cluster offsets; level `i` uses
    /// `separation * LEVEL_DECAY^(i-1)`. Unit-variance noise is added on top.
    pub separation: f64,
    /// Probability that a sample of the biased group is corrupted towards a
    /// sibling leaf cluster (labels keep the true path).
    pub bias_strength: f64,
    /// The group whose samples the corruption applies to.
    pub biased_group: String,
    /// Group tags with sampling probabilities; must sum to 1.
    pub proportions: Vec<(String, f64)>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            samples_per_leaf: 100,
            dim: 16,
            separation: 4.0,
            bias_strength: 0.0,
            biased_group: "Female".to_string(),
            proportions: vec![
                ("Male".to_string(), 0.35),
                ("Female".to_string(), 0.15),
                ("Background".to_string(), 0.5),
            ],
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_leaf == 0 {
            return Err(Error::Config("samples_per_leaf must be positive".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        if !self.separation.is_finite() || self.separation < 0.0 {
            return Err(Error::Config(format!(
                "separation must be a non-negative finite number, got {}",
                self.separation
            )));
        }
        if !(0.0..=1.0).contains(&self.bias_strength) {
            return Err(Error::Config(format!(
                "bias strength must lie in [0, 1], got {}",
                self.bias_strength
            )));
        }
        if self.proportions.is_empty() {
            return Err(Error::Config("no group proportions given".into()));
        }
        let mut seen = HashSet::new();
        let mut sum = 0.0;
        for (name, p) in &self.proportions {
            if !seen.insert(name.as_str()) {
                return Err(Error::Config(format!("group '{name}' listed twice")));
            }
            if !p.is_finite() || *p <= 0.0 {
                return Err(Error::Config(format!(
                    "group '{name}' has non-positive proportion {p}"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "group proportions sum to {sum}, expected 1"
            )));
        }
        if !seen.contains(self.biased_group.as_str()) {
            return Err(Error::Config(format!(
                "biased group '{}' is not among the group proportions",
                self.biased_group
            )));
        }
        Ok(())
    }
}

/// Generate a seed-deterministic clustered dataset over `tax`.
///
/// Every class on every level gets a Gaussian offset vector (scale decaying
/// with depth); a leaf cluster's mean is the sum of the offsets along its
/// path, and samples add unit-variance noise. Group tags are drawn from the
/// configured proportions. With probability `bias_strength`, a sample of the
/// biased group keeps its true label but has its features drawn around a
/// point blended towards a uniformly chosen sibling leaf's mean, emulating a
/// group whose representation systematically misleads the classifier.
///
/// Draw order (fixed for reproducibility): all class offsets level by level
/// in id order, then per instance (leaf-major) the group, the corruption
/// coin (biased-group instances only), the sibling choice (corrupted
/// instances only) and the noise vector.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    tax: &Taxonomy,
    vocab: &GroupVocab,
) -> Result<Dataset> {
    spec.validate()?;
    let n = tax.n_levels();
    if spec.dim < n {
        return Err(Error::Config(format!(
            "feature dimension {} is too small for {n} levels",
            spec.dim
        )));
    }
    let groups_by_name: Vec<(GroupId, f64)> = spec
        .proportions
        .iter()
        .map(|(name, p)| {
            vocab.find(name).map(|g| (g, *p)).ok_or_else(|| {
                Error::Config(format!("group '{name}' is not in the group vocabulary"))
            })
        })
        .collect::<Result<_>>()?;
    let biased = vocab.find(&spec.biased_group).ok_or_else(|| {
        Error::Config(format!(
            "biased group '{}' is not in the group vocabulary",
            spec.biased_group
        ))
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal is valid");

    // Per-class offsets, drawn in id order.
    let mut offsets: Vec<Array1<f64>> = Vec::with_capacity(tax.total_classes());
    for level in 0..n {
        let scale = spec.separation * LEVEL_DECAY.powi(level as i32);
        for _ in tax.level_class_ids(level) {
            offsets.push(Array1::from_shape_fn(spec.dim, |_| {
                scale * unit.sample(&mut rng)
            }));
        }
    }

    let leaf_ids: Vec<ClassId> = tax.level_class_ids(n - 1).collect();
    let mut leaf_means: Vec<Array1<f64>> = Vec::with_capacity(leaf_ids.len());
    let mut leaf_paths: Vec<Vec<ClassId>> = Vec::with_capacity(leaf_ids.len());
    for &leaf in &leaf_ids {
        let path = tax.path_of(leaf)?;
        let mut mean = Array1::zeros(spec.dim);
        for &class in &path {
            mean += &offsets[class.index()];
        }
        leaf_means.push(mean);
        leaf_paths.push(path);
    }

    let m = leaf_ids.len() * spec.samples_per_leaf;
    let mut ids = Vec::with_capacity(m);
    let mut features = Array2::zeros((m, spec.dim));
    let mut labels = Vec::with_capacity(m);
    let mut groups = Vec::with_capacity(m);

    let mut row = 0;
    for (li, &leaf) in leaf_ids.iter().enumerate() {
        // Corruption targets: other leaves under the same parent, or any
        // other leaf if the class is an only child.
        let siblings: Vec<usize> = match tax.parent(leaf) {
            Some(p) => tax
                .children(p)
                .iter()
                .filter(|&&c| c != leaf)
                .map(|&c| {
                    leaf_ids
                        .iter()
                        .position(|&l| l == c)
                        .expect("sibling is a leaf")
                })
                .collect(),
            None => Vec::new(),
        };
        let fallback: Vec<usize> = (0..leaf_ids.len()).filter(|&i| i != li).collect();
        let targets = if siblings.is_empty() {
            &fallback
        } else {
            &siblings
        };

        for _ in 0..spec.samples_per_leaf {
            let group = {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = groups_by_name.last().expect("proportions non-empty").0;
                for &(g, p) in &groups_by_name {
                    acc += p;
                    if u < acc {
                        chosen = g;
                        break;
                    }
                }
                chosen
            };
            let corrupted = group == biased
                && spec.bias_strength > 0.0
                && !targets.is_empty()
                && rng.random::<f64>() < spec.bias_strength;
            let mean = if corrupted {
                let sib = targets[rng.random_range(0..targets.len())];
                &leaf_means[li] + &((&leaf_means[sib] - &leaf_means[li]) * SIBLING_BLEND)
            } else {
                leaf_means[li].clone()
            };
            for (col, &mu) in mean.iter().enumerate() {
                features[[row, col]] = (mu + unit.sample(&mut rng)) as f32;
            }
            ids.push(format!("r{row}"));
            labels.push(leaf_paths[li].clone());
            groups.push(group);
            row += 1;
        }
    }

    let ds = Dataset {
        ids,
        features,
        labels,
        groups,
    };
    ds.validate(tax, vocab)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fairness::FairnessConfig;
    use ndarray::arr2;

    fn vocab() -> GroupVocab {
        FairnessConfig::default().vocab().unwrap()
    }

    fn tiny_tax() -> Taxonomy {
        Taxonomy::from_branching(&[2, 2]).unwrap()
    }

    /// Small aligned dataset over the [2, 2] taxonomy.
    fn tiny_dataset(m: usize, seed: u64) -> Dataset {
        let tax = tiny_tax();
        let spec = SyntheticSpec {
            samples_per_leaf: m.div_ceil(4),
            dim: 3,
            separation: 2.0,
            seed,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec, &tax, &vocab()).unwrap();
        ds.select(&(0..m.min(ds.len())).collect::<Vec<_>>())
    }

    #[test]
    fn feature_bytes_round_trip_exactly() {
        let f = arr2(&[[1.5f32, -2.25, 3.125], [0.0, f32::MIN_POSITIVE, 1e30]]);
        let bytes = features_to_bytes(&f);
        let back = features_from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back, f);

        // Empty row count is legal (a feature file may be empty).
        let empty = Array2::<f32>::zeros((0, 4));
        let back = features_from_bytes(&features_to_bytes(&empty), "mem").unwrap();
        assert_eq!(back.dim(), (0, 4));
    }

    #[test]
    fn feature_bytes_reject_corruption() {
        let f = arr2(&[[1.0f32, 2.0]]);
        let good = features_to_bytes(&f);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let err = features_from_bytes(&bad_magic, "mem")
            .unwrap_err()
            .to_string();
        assert!(err.contains("bad magic"), "got {err:?}");

        let mut bad_version = good.clone();
        bad_version[4] = 7;
        assert!(features_from_bytes(&bad_version, "mem").is_err());

        let err = features_from_bytes(&good[..good.len() - 2], "mem")
            .unwrap_err()
            .to_string();
        assert!(err.contains("truncated"), "got {err:?}");

        let mut trailing = good.clone();
        trailing.extend_from_slice(&[0, 0]);
        let err = features_from_bytes(&trailing, "mem")
            .unwrap_err()
            .to_string();
        assert!(err.contains("trailing"), "got {err:?}");

        let nan = arr2(&[[f32::NAN]]);
        let err = features_from_bytes(&features_to_bytes(&nan), "mem")
            .unwrap_err()
            .to_string();
        assert!(err.contains("non-finite"), "got {err:?}");
    }

    #[test]
    fn feature_csv_parses_and_rejects() {
        let f = features_from_csv("1.5, 2.0\n-3.25,0.5\n", "mem").unwrap();
        assert_eq!(f, arr2(&[[1.5f32, 2.0], [-3.25, 0.5]]));

        assert!(features_from_csv("1.0,2.0\n3.0\n", "mem").is_err());
        assert!(features_from_csv("1.0,abc\n", "mem").is_err());
        assert!(features_from_csv("inf,1.0\n", "mem").is_err());
        assert!(features_from_csv("", "mem").is_err());
    }

    #[test]
    fn label_csv_round_trip_and_errors() {
        let tax = crate::taxonomy::tests::beauty();
        let csv = "a,Beauty,Hair Care,Shampoo\nb,Beauty,Cosmetics,Skin Care\n";
        let (ids, labels) = labels_from_csv(csv, &tax, "mem").unwrap();
        assert_eq!(ids, ["a", "b"]);
        assert_eq!(labels[0][2], tax.find(2, "Shampoo").unwrap());
        assert_eq!(labels_to_csv(&ids, &labels, &tax), csv);

        for (bad, needle) in [
            ("a,Beauty,Hair Care\n", "fields"),
            ("a,Beauty,Hair Care,Nonsense\n", "not a level-3 class"),
            ("a,Beauty,Cosmetics,Shampoo\n", "not a child"),
            (
                "a,Beauty,Hair Care,Shampoo\na,Beauty,Hair Care,Shampoo\n",
                "duplicate id",
            ),
            (",Beauty,Hair Care,Shampoo\n", "empty id"),
        ] {
            let err = labels_from_csv(bad, &tax, "mem").unwrap_err().to_string();
            assert!(err.contains(needle), "{bad:?} gave {err:?}");
        }
    }

    #[test]
    fn group_csv_aligns_to_dataset_order() {
        let v = vocab();
        let ids = vec!["x".to_string(), "y".to_string()];
        // File order differs from dataset order; alignment follows ids.
        let groups = groups_from_csv("y,Female\nx,Background\n", &v, &ids, "mem").unwrap();
        assert_eq!(v.tag(groups[0]), "Background");
        assert_eq!(v.tag(groups[1]), "Female");
        assert_eq!(groups_to_csv(&ids, &groups, &v), "x,Background\ny,Female\n");

        for (bad, needle) in [
            ("x,Martian\ny,Male\n", "unknown group tag"),
            ("x,Male\n", "group rows for"),
            ("x,Male\ny,Male\nz,Male\n", "no features"),
            ("x,Male\nx,Male\ny,Male\n", "duplicate id"),
            ("x\ny,Male\n", "fields"),
        ] {
            let err = groups_from_csv(bad, &v, &ids, "mem")
                .unwrap_err()
                .to_string();
            assert!(err.contains(needle), "{bad:?} gave {err:?}");
        }
    }

    #[test]
    fn dataset_files_round_trip() {
        let tax = tiny_tax();
        let v = vocab();
        let ds = tiny_dataset(10, 4);
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("features.bin");
        let l = dir.path().join("labels.csv");
        let g = dir.path().join("groups.csv");
        ds.write(&f, &l, &g, &tax, &v).unwrap();
        let back = Dataset::load(&f, &l, &g, &tax, &v).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn validation_catches_misalignment_and_bad_paths() {
        let tax = tiny_tax();
        let v = vocab();
        let mut ds = tiny_dataset(6, 1);
        ds.validate(&tax, &v).unwrap();

        let mut broken = ds.clone();
        broken.ids[1] = broken.ids[0].clone();
        assert!(broken.validate(&tax, &v).is_err());

        let mut broken = ds.clone();
        broken.labels[2] = vec![tax.class_id(0, 0), tax.class_id(1, 3)];
        let err = broken.validate(&tax, &v).unwrap_err().to_string();
        assert!(err.contains("not a child"), "got {err:?}");

        ds.labels[0] = vec![tax.class_id(0, 0)];
        assert!(ds.validate(&tax, &v).is_err());
    }

    #[test]
    fn split_counts_follow_largest_remainder() {
        let ds = tiny_dataset(40, 9);
        let (train, test) = split(&ds, 0.8, 11, true).unwrap();
        assert_eq!(train.len(), 32);
        assert_eq!(test.len(), 8);

        // Per-bucket proportionality: every (leaf, group) bucket lands
        // within one instance of its exact share.
        let key = |d: &Dataset, j: usize| (*d.labels[j].last().unwrap(), d.groups[j]);
        let mut totals: BTreeMap<(ClassId, GroupId), (usize, usize)> = BTreeMap::new();
        for j in 0..ds.len() {
            totals.entry(key(&ds, j)).or_default().0 += 1;
        }
        for j in 0..train.len() {
            totals.entry(key(&train, j)).or_default().1 += 1;
        }
        for ((leaf, group), (n, k)) in totals {
            if n >= 2 {
                let exact = 0.8 * n as f64;
                assert!(
                    (k as f64 - exact).abs() < 1.0,
                    "bucket ({leaf:?}, {group:?}): {k} of {n} in train, want ~{exact}"
                );
            }
        }

        // Partitions are disjoint and exhaustive.
        let mut all: Vec<&String> = train.ids.iter().chain(test.ids.iter()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), ds.len());
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let ds = tiny_dataset(30, 2);
        let a = split(&ds, 0.5, 7, true).unwrap();
        let b = split(&ds, 0.5, 7, true).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let c = split(&ds, 0.5, 8, true).unwrap();
        assert_ne!(a.0, c.0, "different seeds should move instances");

        let (rand_train, _) = split(&ds, 0.5, 7, false).unwrap();
        assert_eq!(rand_train.len(), 15);

        assert!(split(&ds, 0.0, 1, true).is_err());
        assert!(split(&ds, 1.0, 1, true).is_err());
    }

    #[test]
    fn generator_is_deterministic_and_respects_proportions() {
        let tax = Taxonomy::from_branching(&[2, 2, 2]).unwrap();
        let v = vocab();
        let spec = SyntheticSpec {
            samples_per_leaf: 400,
            dim: 8,
            ..SyntheticSpec::default()
        };
        let a = generate_synthetic(&spec, &tax, &v).unwrap();
        let b = generate_synthetic(&spec, &tax, &v).unwrap();
        assert_eq!(a, b, "same seed, same dataset");
        assert_eq!(a.len(), 8 * 400);

        let c = generate_synthetic(
            &SyntheticSpec {
                seed: 1,
                ..spec.clone()
            },
            &tax,
            &v,
        )
        .unwrap();
        assert_ne!(a, c);

        for (name, p) in &spec.proportions {
            let g = v.find(name).unwrap();
            let freq = a.groups.iter().filter(|&&x| x == g).count() as f64 / a.len() as f64;
            assert!(
                (freq - p).abs() < 0.04,
                "group {name}: frequency {freq} vs proportion {p}"
            );
        }
    }

    /// Classify by the nearest leaf centroid, estimating centroids from the
    /// given reference groups only (so corrupted groups cannot blur them),
    /// and return per-group leaf accuracy.
    fn nearest_centroid_accuracy(
        ds: &Dataset,
        tax: &Taxonomy,
        v: &GroupVocab,
        reference: &[&str],
    ) -> BTreeMap<String, f64> {
        let n = tax.n_levels();
        let leaves: Vec<ClassId> = tax.level_class_ids(n - 1).collect();
        let feats = ds.features_f64();
        let mut sums: BTreeMap<ClassId, (Array1<f64>, f64)> = BTreeMap::new();
        for j in 0..ds.len() {
            if !reference.contains(&v.tag(ds.groups[j])) {
                continue;
            }
            let leaf = *ds.labels[j].last().unwrap();
            let entry = sums
                .entry(leaf)
                .or_insert_with(|| (Array1::zeros(ds.dim()), 0.0));
            entry.0 += &feats.row(j);
            entry.1 += 1.0;
        }
        let centroids: Vec<Array1<f64>> = leaves
            .iter()
            .map(|l| {
                let (sum, count) = &sums[l];
                sum / *count
            })
            .collect();

        let mut hit: BTreeMap<String, (f64, f64)> = BTreeMap::new();
        for j in 0..ds.len() {
            let row = feats.row(j);
            let nearest = (0..leaves.len())
                .min_by(|&a, &b| {
                    let da = (&row - &centroids[a]).mapv(|x| x * x).sum();
                    let db = (&row - &centroids[b]).mapv(|x| x * x).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            let entry = hit.entry(v.tag(ds.groups[j]).to_string()).or_default();
            entry.1 += 1.0;
            if leaves[nearest] == *ds.labels[j].last().unwrap() {
                entry.0 += 1.0;
            }
        }
        hit.into_iter().map(|(g, (h, t))| (g, h / t)).collect()
    }

    #[test]
    fn bias_hurts_only_the_biased_group() {
        let tax = Taxonomy::from_branching(&[2, 2, 2]).unwrap();
        let v = vocab();
        let spec = SyntheticSpec {
            samples_per_leaf: 300,
            dim: 12,
            separation: 6.0,
            bias_strength: 0.5,
            proportions: vec![
                ("Male".to_string(), 0.3),
                ("Female".to_string(), 0.3),
                ("Background".to_string(), 0.4),
            ],
            seed: 5,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec, &tax, &v).unwrap();
        let acc = nearest_centroid_accuracy(&ds, &tax, &v, &["Male", "Background"]);
        assert!(
            acc["Female"] < acc["Background"] - 0.05,
            "biased group should score below neutral: {acc:?}"
        );
        assert!(
            (acc["Male"] - acc["Background"]).abs() < 0.05,
            "unbiased groups should score alike: {acc:?}"
        );

        // Without bias all groups score alike.
        let clean = generate_synthetic(
            &SyntheticSpec {
                bias_strength: 0.0,
                ..spec
            },
            &tax,
            &v,
        )
        .unwrap();
        let acc = nearest_centroid_accuracy(&clean, &tax, &v, &["Male", "Background"]);
        assert!(
            (acc["Female"] - acc["Background"]).abs() < 0.02,
            "no bias, no gap: {acc:?}"
        );
    }

    #[test]
    fn generator_rejects_bad_specs() {
        let tax = Taxonomy::from_branching(&[2, 2]).unwrap();
        let v = vocab();
        let base = SyntheticSpec::default();

        let narrow = SyntheticSpec {
            dim: 1,
            ..base.clone()
        };
        let err = generate_synthetic(&narrow, &tax, &v)
            .unwrap_err()
            .to_string();
        assert!(err.contains("too small"), "got {err:?}");

        for spec in [
            SyntheticSpec {
                samples_per_leaf: 0,
                ..base.clone()
            },
            SyntheticSpec {
                bias_strength: 1.5,
                ..base.clone()
            },
            SyntheticSpec {
                separation: -1.0,
                ..base.clone()
            },
            SyntheticSpec {
                biased_group: "Nobody".to_string(),
                ..base.clone()
            },
            SyntheticSpec {
                proportions: vec![("Male".to_string(), 0.5), ("Female".to_string(), 0.6)],
                ..base.clone()
            },
            SyntheticSpec {
                proportions: vec![],
                ..base.clone()
            },
        ] {
            assert!(
                spec.validate().is_err(),
                "spec should be rejected: {spec:?}"
            );
        }
    }
}
