//! Group-aware dynamic loss weighting.
//!
//! Each instance carries a demographic group tag. Tags split into a set of
//! sensitive groups and exactly one neutral tag. During training, an
//! instance from a sensitive group has its per-level loss scaled by the
//! inverse of how many same-group instances the model currently assigns to
//! the same class on that level — rare (group, predicted class) cells pull
//! with full strength while crowded cells share theirs, which keeps any one
//! cell from dominating the gradient. Neutral instances always weigh 1.
//!
//! Counts use the model's *predicted* classes, not the gold labels, so the
//! weights track what the model is doing right now and shift as its
//! predictions move between epochs (or between batches, depending on the
//! cadence chosen by the trainer).

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::taxonomy::ClassId;

/// Index into a [`GroupVocab`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupId(pub u16);

impl GroupId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// The run's group tags: the sensitive groups in declaration order followed
/// by the single neutral tag.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupVocab {
    tags: Vec<String>,
    neutral: usize,
}

impl GroupVocab {
    /// Build a vocabulary from sensitive tags plus one distinct neutral tag.
    pub fn new(sensitive: &[String], neutral: &str) -> Result<GroupVocab> {
        let mut tags: Vec<String> = sensitive.to_vec();
        tags.push(neutral.to_string());
        for (i, tag) in tags.iter().enumerate() {
            validate_tag(tag)?;
            if tags[..i].contains(tag) {
                return Err(Error::Config(format!(
                    "group tag '{tag}' appears more than once (sensitive tags and the neutral tag must all be distinct)"
                )));
            }
        }
        Ok(GroupVocab {
            neutral: tags.len() - 1,
            tags,
        })
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        false // always holds the neutral tag
    }

    pub fn tag(&self, id: GroupId) -> &str {
        &self.tags[id.index()]
    }

    pub fn find(&self, tag: &str) -> Option<GroupId> {
        self.tags
            .iter()
            .position(|t| t == tag)
            .map(|i| GroupId(i as u16))
    }

    pub fn neutral(&self) -> GroupId {
        GroupId(self.neutral as u16)
    }

    pub fn is_sensitive(&self, id: GroupId) -> bool {
        id.index() != self.neutral
    }

    /// All group ids, sensitive first, neutral last.
    pub fn ids(&self) -> impl Iterator<Item = GroupId> {
        (0..self.tags.len() as u16).map(GroupId)
    }

    /// Ids of the sensitive groups, in declaration order.
    pub fn sensitive_ids(&self) -> impl Iterator<Item = GroupId> {
        (0..self.neutral as u16).map(GroupId)
    }
}

fn validate_tag(tag: &str) -> Result<()> {
    if tag.is_empty() {
        return Err(Error::Config("empty group tag".into()));
    }
    if let Some(bad) = tag.chars().find(|c| matches!(c, '\t' | '\n' | '\r' | ',')) {
        return Err(Error::Config(format!(
            "group tag '{tag}' contains forbidden character {bad:?}"
        )));
    }
    Ok(())
}

/// Configuration of the reweighting scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct FairnessConfig {
    /// Sensitive group tags, in declaration order.
    pub sensitive: Vec<String>,
    /// The single neutral tag; its instances always weigh 1.
    pub neutral: String,
    /// Additive stabilizer in the denominator of `1 / (count + epsilon)`.
    pub epsilon: f64,
    /// Rescale each level's weights so their batch mean is exactly 1,
    /// decoupling the effective learning rate from group frequencies.
    pub normalize: bool,
}

impl Default for FairnessConfig {
    fn default() -> Self {
        FairnessConfig {
            sensitive: vec!["Male".to_string(), "Female".to_string()],
            neutral: "Background".to_string(),
            epsilon: 1e-8,
            normalize: false,
        }
    }
}

impl FairnessConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "epsilon must be a positive finite number, got {}",
                self.epsilon
            )));
        }
        self.vocab().map(|_| ())
    }

    /// The group vocabulary this configuration induces.
    pub fn vocab(&self) -> Result<GroupVocab> {
        GroupVocab::new(&self.sensitive, &self.neutral)
    }
}

/// Count batch instances per (group, predicted class on `level`) cell.
pub fn group_class_counts(
    groups: &[GroupId],
    predicted: &[Vec<ClassId>],
    level: usize,
) -> HashMap<(GroupId, ClassId), usize> {
    assert_eq!(
        groups.len(),
        predicted.len(),
        "one group tag per predicted path"
    );
    let mut counts = HashMap::new();
    for (g, path) in groups.iter().zip(predicted) {
        *counts.entry((*g, path[level])).or_insert(0) += 1;
    }
    counts
}

/// Per-instance loss weights for one level: `1 / (count + epsilon)` for
/// sensitive instances, where `count` is the size of the instance's
/// (group, predicted class) cell within this batch, and exactly `1.0` for
/// neutral instances.
pub fn dynamic_weights(
    cfg: &FairnessConfig,
    vocab: &GroupVocab,
    groups: &[GroupId],
    predicted: &[Vec<ClassId>],
    level: usize,
) -> Result<Vec<f64>> {
    if groups.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "{} group tags for {} predicted paths",
            groups.len(),
            predicted.len()
        )));
    }
    let counts = group_class_counts(groups, predicted, level);
    let mut weights = Vec::with_capacity(groups.len());
    for (g, path) in groups.iter().zip(predicted) {
        if vocab.is_sensitive(*g) {
            let n = counts[&(*g, path[level])] as f64;
            weights.push(1.0 / (n + cfg.epsilon));
        } else {
            weights.push(1.0);
        }
    }
    if cfg.normalize && !weights.is_empty() {
        let sum: f64 = weights.iter().sum();
        let scale = weights.len() as f64 / sum;
        for w in &mut weights {
            *w *= scale;
        }
    }
    Ok(weights)
}

/// Per-(instance, level) loss weights for a whole batch.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightTable {
    table: Array2<f64>,
}

impl WeightTable {
    /// All-ones table, used by variants that do not reweight.
    pub fn ones(instances: usize, levels: usize) -> WeightTable {
        WeightTable {
            table: Array2::ones((instances, levels)),
        }
    }

    /// Dynamic weights for every level, from the batch's predicted paths.
    pub fn compute(
        cfg: &FairnessConfig,
        vocab: &GroupVocab,
        groups: &[GroupId],
        predicted: &[Vec<ClassId>],
    ) -> Result<WeightTable> {
        let levels = predicted.first().map_or(0, Vec::len);
        let mut table = Array2::ones((groups.len(), levels));
        for level in 0..levels {
            let w = dynamic_weights(cfg, vocab, groups, predicted, level)?;
            for (j, wj) in w.into_iter().enumerate() {
                table[[j, level]] = wj;
            }
        }
        Ok(WeightTable { table })
    }

    pub fn instances(&self) -> usize {
        self.table.nrows()
    }

    pub fn levels(&self) -> usize {
        self.table.ncols()
    }

    pub fn get(&self, instance: usize, level: usize) -> f64 {
        self.table[[instance, level]]
    }

    /// Rows for a subset of instances, preserving order.
    pub fn gather(&self, indices: &[usize]) -> WeightTable {
        let mut table = Array2::ones((indices.len(), self.levels()));
        for (row, &j) in indices.iter().enumerate() {
            table.row_mut(row).assign(&self.table.row(j));
        }
        WeightTable { table }
    }
}

/// Reduce a batch's per-(instance, level) cross-entropy losses to the
/// scalar training loss: mean over instances of the level-priority- and
/// weight-scaled sum `sum_i pi[i] * w[j][i] * ce[j][i]`.
pub fn apply_weights(losses: ArrayView2<f64>, weights: &WeightTable, pi: &[f64]) -> Result<f64> {
    let (m, n) = losses.dim();
    if m == 0 {
        return Err(Error::Shape("loss reduction over an empty batch".into()));
    }
    if weights.instances() != m || weights.levels() != n {
        return Err(Error::Shape(format!(
            "weight table is {}x{}, losses are {m}x{n}",
            weights.instances(),
            weights.levels()
        )));
    }
    if pi.len() != n {
        return Err(Error::Shape(format!(
            "{} level priorities for {n} levels",
            pi.len()
        )));
    }
    let mut total = 0.0;
    for j in 0..m {
        for i in 0..n {
            total += pi[i] * weights.get(j, i) * losses[[j, i]];
        }
    }
    Ok(total / m as f64)
}
