//! Class taxonomies: a fixed number of levels, each holding named classes,
//! with every class below the root level attached to exactly one parent on
//! the level directly above.
//!
//! Class identifiers are dense and level-major: level 1 classes come first
//! (in declaration order), then level 2, and so on. The order in which
//! classes appear in the source file is preserved, because logit vectors,
//! masks and transition matrices are all indexed by it.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Dense global class identifier, level-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassId(pub u32);

impl ClassId {
    /// The identifier as a usize index into id-indexed tables.
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Parsing and validation options.
#[derive(Clone, Copy, Debug, Default)]
pub struct TaxonomyOptions {
    /// Pad internal classes that have no children with a synthetic
    /// `<name>:other` child instead of rejecting the taxonomy.
    pub allow_childless: bool,
}

/// Binary parent/child incidence between two adjacent levels.
///
/// Row `k` corresponds to the `k`-th class of the parent level, column `j`
/// to the `j`-th class of the child level; the entry is `1.0` exactly when
/// the parent relation holds. Every column sums to exactly `1.0` because
/// every child has exactly one parent.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    parent_level: usize,
    m: Array2<f64>,
}

impl TransitionMatrix {
    /// Level index (0-based) of the parent side.
    pub fn parent_level(&self) -> usize {
        self.parent_level
    }

    /// Number of parent-level classes.
    pub fn rows(&self) -> usize {
        self.m.nrows()
    }

    /// Number of child-level classes.
    pub fn cols(&self) -> usize {
        self.m.ncols()
    }

    /// Entry for parent-local index `k` and child-local index `j`.
    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.m[[k, j]]
    }

    /// The full matrix, for vector-matrix products.
    pub fn array(&self) -> &Array2<f64> {
        &self.m
    }
}

/// A validated multi-level class hierarchy.
#[derive(Clone, Debug)]
pub struct Taxonomy {
    /// Class names in id order (level-major).
    names: Vec<String>,
    /// Start offset of each level in id space; has `n_levels() + 1` entries.
    level_offsets: Vec<usize>,
    /// Parent of each class; `None` exactly for root-level classes.
    parents: Vec<Option<ClassId>>,
    /// Children of each class, in id order.
    children: Vec<Vec<ClassId>>,
    /// Level (0-based) of each class.
    levels_of: Vec<usize>,
    /// Name -> candidate ids (a name may repeat on different levels).
    index: HashMap<String, Vec<ClassId>>,
}

impl PartialEq for Taxonomy {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self.level_offsets == other.level_offsets
            && self.parents == other.parents
    }
}

impl Taxonomy {
    /// Number of levels.
    pub fn n_levels(&self) -> usize {
        self.level_offsets.len() - 1
    }

    /// Total number of classes across all levels.
    pub fn total_classes(&self) -> usize {
        self.names.len()
    }

    /// Number of classes on `level` (0-based).
    pub fn level_size(&self, level: usize) -> usize {
        assert!(level < self.n_levels(), "level {level} out of range");
        self.level_offsets[level + 1] - self.level_offsets[level]
    }

    /// Global id of the `local`-th class on `level`.
    pub fn class_id(&self, level: usize, local: usize) -> ClassId {
        assert!(
            local < self.level_size(level),
            "local index {local} out of range on level {level}"
        );
        ClassId((self.level_offsets[level] + local) as u32)
    }

    /// Level (0-based) the class lives on.
    pub fn level_of(&self, id: ClassId) -> usize {
        self.levels_of[id.index()]
    }

    /// Position of the class within its level.
    pub fn local_index(&self, id: ClassId) -> usize {
        id.index() - self.level_offsets[self.level_of(id)]
    }

    /// Name of the class.
    pub fn name(&self, id: ClassId) -> &str {
        &self.names[id.index()]
    }

    /// Look up a class by level and name.
    pub fn find(&self, level: usize, name: &str) -> Option<ClassId> {
        self.index
            .get(name)?
            .iter()
            .copied()
            .find(|&id| self.level_of(id) == level)
    }

    /// Parent class, or `None` for root-level classes.
    pub fn parent(&self, id: ClassId) -> Option<ClassId> {
        self.parents[id.index()]
    }

    /// Children of the class, in id order.
    pub fn children(&self, id: ClassId) -> &[ClassId] {
        &self.children[id.index()]
    }

    /// Ids of all classes on `level`, in order.
    pub fn level_class_ids(&self, level: usize) -> impl Iterator<Item = ClassId> + '_ {
        (self.level_offsets[level]..self.level_offsets[level + 1]).map(|i| ClassId(i as u32))
    }

    /// Whether `a` lies strictly below `b` (via the parent chain).
    pub fn is_descendant(&self, a: ClassId, b: ClassId) -> bool {
        let mut cursor = self.parent(a);
        while let Some(p) = cursor {
            if p == b {
                return true;
            }
            cursor = self.parent(p);
        }
        false
    }

    /// Root-to-leaf path of a leaf-level class, one id per level.
    pub fn path_of(&self, leaf: ClassId) -> Result<Vec<ClassId>> {
        let last = self.n_levels() - 1;
        if self.level_of(leaf) != last {
            return Err(Error::Taxonomy(format!(
                "path_of expects a class on the leaf level {}, but '{}' is on level {}",
                last + 1,
                self.name(leaf),
                self.level_of(leaf) + 1
            )));
        }
        let mut path = Vec::with_capacity(self.n_levels());
        let mut cursor = Some(leaf);
        while let Some(id) = cursor {
            path.push(id);
            cursor = self.parent(id);
        }
        path.reverse();
        debug_assert_eq!(path.len(), self.n_levels());
        Ok(path)
    }

    /// Transition matrix between `parent_level` and `parent_level + 1`.
    pub fn transition_matrix(&self, parent_level: usize) -> Result<TransitionMatrix> {
        if parent_level + 1 >= self.n_levels() {
            return Err(Error::Taxonomy(format!(
                "no transition below level {}: taxonomy has {} levels",
                parent_level + 1,
                self.n_levels()
            )));
        }
        let rows = self.level_size(parent_level);
        let cols = self.level_size(parent_level + 1);
        let mut m = Array2::zeros((rows, cols));
        for (j, child) in self.level_class_ids(parent_level + 1).enumerate() {
            let parent = self.parents[child.index()].expect("non-root class must have a parent");
            m[[self.local_index(parent), j]] = 1.0;
        }
        Ok(TransitionMatrix { parent_level, m })
    }

    /// All `n_levels() - 1` transition matrices, top to bottom.
    pub fn transition_matrices(&self) -> Result<Vec<TransitionMatrix>> {
        (0..self.n_levels().saturating_sub(1))
            .map(|i| self.transition_matrix(i))
            .collect()
    }

    /// Parse the tab-separated edge-list format with default options.
    pub fn parse(src: &str) -> Result<Taxonomy> {
        Self::parse_with(src, TaxonomyOptions::default())
    }

    /// Parse the tab-separated edge-list format.
    ///
    /// One edge per line, `child<TAB>parent`; root-level classes use `-` as
    /// the parent. Classes are created at first mention as a child, and a
    /// parent must be declared on an earlier line. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse_with(src: &str, opts: TaxonomyOptions) -> Result<Taxonomy> {
        let mut levels: Vec<Vec<String>> = Vec::new();
        let mut parents_local: Vec<Vec<usize>> = Vec::new();
        // name -> (level, local) for every declaration so far
        let mut declared: HashMap<String, Vec<(usize, usize)>> = HashMap::new();

        for (idx, raw) in src.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 2 {
                return Err(Error::Taxonomy(format!(
                    "line {lineno}: expected 'child<TAB>parent', found {} tab-separated fields",
                    fields.len()
                )));
            }
            let child = fields[0].trim();
            let parent = fields[1].trim();
            if child.is_empty() || parent.is_empty() {
                return Err(Error::Taxonomy(format!("line {lineno}: empty class name")));
            }

            let child_level = if parent == "-" {
                0
            } else {
                let candidates = declared.get(parent).map(Vec::as_slice).unwrap_or(&[]);
                match candidates {
                    [] => {
                        return Err(Error::Taxonomy(format!(
                            "line {lineno}: parent '{parent}' is not declared on any earlier line"
                        )))
                    }
                    [(plevel, _)] => plevel + 1,
                    _ => {
                        return Err(Error::Taxonomy(format!(
                        "line {lineno}: parent '{parent}' is ambiguous: declared on several levels"
                    )))
                    }
                }
            };

            if declared
                .get(child)
                .is_some_and(|ds| ds.iter().any(|&(l, _)| l == child_level))
            {
                return Err(Error::Taxonomy(format!(
                    "line {lineno}: class '{child}' already declared on level {}: \
                     a class has exactly one parent",
                    child_level + 1
                )));
            }

            if levels.len() == child_level {
                levels.push(Vec::new());
                parents_local.push(Vec::new());
            }
            let local = levels[child_level].len();
            levels[child_level].push(child.to_string());
            if parent != "-" {
                let (_, plocal) = declared[parent][0];
                parents_local[child_level].push(plocal);
            }
            declared
                .entry(child.to_string())
                .or_default()
                .push((child_level, local));
        }

        Self::from_parts(levels, parents_local, opts)
    }

    /// Parse the JSON form: `{"levels": [[names], ...], "edges": [[child, parent], ...]}`.
    ///
    /// Levels are explicit, so class names may repeat across levels; an edge
    /// is resolved by finding the unique adjacent level pair on which both
    /// endpoints exist.
    pub fn parse_json_with(src: &str, opts: TaxonomyOptions) -> Result<Taxonomy> {
        #[derive(serde::Deserialize)]
        struct TaxonomyJson {
            levels: Vec<Vec<String>>,
            edges: Vec<(String, String)>,
        }

        let parsed: TaxonomyJson = serde_json::from_str(src)
            .map_err(|e| Error::Taxonomy(format!("invalid taxonomy JSON: {e}")))?;
        let levels = parsed.levels;
        if levels.is_empty() {
            return Err(Error::Taxonomy("taxonomy has no levels".into()));
        }
        for (i, level) in levels.iter().enumerate() {
            let mut seen = HashMap::new();
            for name in level {
                if seen.insert(name.as_str(), ()).is_some() {
                    return Err(Error::Taxonomy(format!(
                        "duplicate class '{name}' on level {}",
                        i + 1
                    )));
                }
            }
        }

        // (level, name) -> local index
        let mut position: HashMap<(usize, &str), usize> = HashMap::new();
        for (l, level) in levels.iter().enumerate() {
            for (i, name) in level.iter().enumerate() {
                position.insert((l, name.as_str()), i);
            }
        }

        let mut parents_local: Vec<Vec<Option<usize>>> =
            levels.iter().map(|level| vec![None; level.len()]).collect();
        for (child, parent) in &parsed.edges {
            let mut matches = Vec::new();
            for child_level in 1..levels.len() {
                if let (Some(&ci), Some(&pi)) = (
                    position.get(&(child_level, child.as_str())),
                    position.get(&(child_level - 1, parent.as_str())),
                ) {
                    matches.push((child_level, ci, pi));
                }
            }
            match matches.as_slice() {
                [] => {
                    return Err(Error::Taxonomy(format!(
                        "edge ['{child}', '{parent}'] does not connect adjacent levels"
                    )))
                }
                [(l, ci, pi)] => {
                    if parents_local[*l][*ci].is_some() {
                        return Err(Error::Taxonomy(format!(
                            "class '{child}' on level {} has multiple parents",
                            l + 1
                        )));
                    }
                    parents_local[*l][*ci] = Some(*pi);
                }
                _ => {
                    return Err(Error::Taxonomy(format!(
                        "edge ['{child}', '{parent}'] is ambiguous: matches several level pairs"
                    )))
                }
            }
        }

        let mut resolved: Vec<Vec<usize>> = Vec::with_capacity(levels.len());
        for (l, level_parents) in parents_local.iter().enumerate() {
            if l == 0 {
                resolved.push(Vec::new());
                continue;
            }
            let mut row = Vec::with_capacity(level_parents.len());
            for (i, p) in level_parents.iter().enumerate() {
                match p {
                    Some(pi) => row.push(*pi),
                    None => {
                        return Err(Error::Taxonomy(format!(
                            "class '{}' on level {} has no parent edge",
                            levels[l][i],
                            l + 1
                        )))
                    }
                }
            }
            resolved.push(row);
        }

        Self::from_parts(levels, resolved, opts)
    }

    /// Load a taxonomy from a file; `.json` selects the JSON form, anything
    /// else the tab-separated edge list.
    pub fn load(path: &Path, opts: TaxonomyOptions) -> Result<Taxonomy> {
        let src =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::parse_json_with(&src, opts)
        } else {
            Self::parse_with(&src, opts)
        }
    }

    /// Serialize to the tab-separated edge-list format.
    ///
    /// Classes are emitted level by level in id order, so parsing the output
    /// reproduces the taxonomy exactly (provided no name repeats across
    /// levels, which would make parent references ambiguous to the parser).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for id in self.level_class_ids(0) {
            let _ = writeln!(out, "{}\t-", self.name(id));
        }
        for level in 1..self.n_levels() {
            for id in self.level_class_ids(level) {
                let parent = self.parent(id).expect("non-root class must have a parent");
                let _ = writeln!(out, "{}\t{}", self.name(id), self.name(parent));
            }
        }
        out
    }

    /// Build a complete taxonomy from a branching profile: `branching[0]`
    /// root classes, each with `branching[1]` children, and so on. Names are
    /// synthesized as `L<level>_<local>`.
    pub fn from_branching(branching: &[usize]) -> Result<Taxonomy> {
        if branching.is_empty() {
            return Err(Error::Taxonomy("branching profile is empty".into()));
        }
        if branching.contains(&0) {
            return Err(Error::Taxonomy("branching factors must be positive".into()));
        }
        let mut levels: Vec<Vec<String>> = Vec::with_capacity(branching.len());
        let mut parents_local: Vec<Vec<usize>> = Vec::with_capacity(branching.len());
        let mut prev = 0usize;
        for (l, &b) in branching.iter().enumerate() {
            let size = if l == 0 { b } else { prev * b };
            let names = (0..size).map(|i| format!("L{}_{}", l + 1, i)).collect();
            let parents = if l == 0 {
                Vec::new()
            } else {
                (0..size).map(|i| i / b).collect()
            };
            levels.push(names);
            parents_local.push(parents);
            prev = size;
        }
        Self::from_parts(levels, parents_local, TaxonomyOptions::default())
    }

    /// Validate level/parent structure and assemble the indexed form.
    ///
    /// `parents_local[l][i]` is the local index (on level `l - 1`) of the
    /// parent of class `i` on level `l`; `parents_local[0]` must be empty.
    fn from_parts(
        mut levels: Vec<Vec<String>>,
        mut parents_local: Vec<Vec<usize>>,
        opts: TaxonomyOptions,
    ) -> Result<Taxonomy> {
        if levels.is_empty() {
            return Err(Error::Taxonomy("taxonomy has no levels".into()));
        }
        for (l, level) in levels.iter().enumerate() {
            if level.is_empty() {
                return Err(Error::Taxonomy(format!("level {} has no classes", l + 1)));
            }
            let mut seen = HashMap::new();
            for name in level {
                validate_class_name(name)?;
                if seen.insert(name.as_str(), ()).is_some() {
                    return Err(Error::Taxonomy(format!(
                        "duplicate class '{name}' on level {}",
                        l + 1
                    )));
                }
            }
        }
        for l in 1..levels.len() {
            if parents_local[l].len() != levels[l].len() {
                return Err(Error::Taxonomy(format!(
                    "level {} has {} classes but {} parent entries",
                    l + 1,
                    levels[l].len(),
                    parents_local[l].len()
                )));
            }
            if let Some(&bad) = parents_local[l].iter().find(|&&p| p >= levels[l - 1].len()) {
                return Err(Error::Taxonomy(format!(
                    "level {} references parent index {bad} beyond level {}",
                    l + 1,
                    l
                )));
            }
        }

        // Every class above the leaf level must have at least one child;
        // either reject or pad with a synthetic `<name>:other` child. Padding
        // runs top-down so a padded class that is still internal is padded
        // again on the next iteration.
        for l in 0..levels.len() - 1 {
            let mut has_child = vec![false; levels[l].len()];
            for &p in &parents_local[l + 1] {
                has_child[p] = true;
            }
            for (i, seen) in has_child.iter().enumerate() {
                if *seen {
                    continue;
                }
                let name = levels[l][i].clone();
                if !opts.allow_childless {
                    return Err(Error::Taxonomy(format!(
                        "class '{name}' on level {} has no children; \
                         every class above the leaf level needs at least one",
                        l + 1
                    )));
                }
                let synthetic = format!("{name}:other");
                if levels[l + 1].contains(&synthetic) {
                    return Err(Error::Taxonomy(format!(
                        "cannot pad childless class '{name}': '{synthetic}' already exists on level {}",
                        l + 2
                    )));
                }
                levels[l + 1].push(synthetic);
                parents_local[l + 1].push(i);
            }
        }

        let mut level_offsets = Vec::with_capacity(levels.len() + 1);
        level_offsets.push(0usize);
        for level in &levels {
            level_offsets.push(level_offsets.last().unwrap() + level.len());
        }
        let total = *level_offsets.last().unwrap();

        let mut names = Vec::with_capacity(total);
        let mut parents = Vec::with_capacity(total);
        let mut levels_of = Vec::with_capacity(total);
        for (l, level) in levels.iter().enumerate() {
            for (i, name) in level.iter().enumerate() {
                names.push(name.clone());
                levels_of.push(l);
                parents.push(if l == 0 {
                    None
                } else {
                    Some(ClassId((level_offsets[l - 1] + parents_local[l][i]) as u32))
                });
            }
        }

        let mut children: Vec<Vec<ClassId>> = vec![Vec::new(); total];
        for (i, parent) in parents.iter().enumerate() {
            if let Some(p) = parent {
                children[p.index()].push(ClassId(i as u32));
            }
        }

        let mut index: HashMap<String, Vec<ClassId>> = HashMap::new();
        for (i, name) in names.iter().enumerate() {
            index
                .entry(name.clone())
                .or_default()
                .push(ClassId(i as u32));
        }

        Ok(Taxonomy {
            names,
            level_offsets,
            parents,
            children,
            levels_of,
            index,
        })
    }
}

/// Class names travel through the tab-separated taxonomy format and through
/// CSV label files, so separators and line breaks inside them are rejected
/// up front; `-` is reserved as the root marker.
fn validate_class_name(name: &str) -> Result<()> {
    if name.is_empty() {
        return Err(Error::Taxonomy("empty class name".into()));
    }
    if name == "-" {
        return Err(Error::Taxonomy(
            "'-' is reserved for the root marker".into(),
        ));
    }
    if let Some(bad) = name.chars().find(|c| matches!(c, '\t' | '\n' | '\r' | ',')) {
        return Err(Error::Taxonomy(format!(
            "class name '{name}' contains forbidden character {bad:?}"
        )));
    }
    Ok(())
}
