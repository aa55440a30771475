//! Per-level linear heads over a shared feature vector, coupled by a
//! transitional masking layer.
//!
//! Every level `i` owns a weight matrix and bias producing logits
//! `z_i = W_i a + b_i`. The first level applies a temperature softmax
//! directly. For masked variants, each later level first multiplies its
//! logits elementwise by an attention mask pushed down from the level above:
//! the parent level's probability vector times the binary transition matrix,
//! so each child's logit is scaled by the probability mass its parent
//! received. Masks are deliberately not renormalized, and a zero mask entry
//! zeroes the child's logit rather than excluding the class: the child then
//! competes with weight `exp(0)` in the softmax.
//!
//! Flat variants skip the multiplication but still record the masks, which
//! keeps traces comparable across variants.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::taxonomy::{ClassId, Taxonomy, TransitionMatrix};

/// Model flavor: whether the transitional mask multiplies the logits, and
/// whether training reweights per-instance losses by inverse
/// (group, predicted class) frequency.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Independent softmax per level; no mask, no reweighting.
    Base,
    /// Flat heads with dynamically reweighted training loss.
    Reweighted,
    /// Transitional masking between adjacent levels.
    Masked,
    /// Masking plus dynamically reweighted training loss.
    MaskedReweighted,
}

impl Variant {
    /// All variants in canonical (ablation) order.
    pub const ALL: [Variant; 4] = [
        Variant::Base,
        Variant::Reweighted,
        Variant::Masked,
        Variant::MaskedReweighted,
    ];

    /// Whether the forward pass multiplies logits by the transition mask.
    pub fn uses_mask(self) -> bool {
        matches!(self, Variant::Masked | Variant::MaskedReweighted)
    }

    /// Whether training applies dynamic loss reweighting.
    pub fn uses_reweighting(self) -> bool {
        matches!(self, Variant::Reweighted | Variant::MaskedReweighted)
    }

    /// Short code used on the command line and in reports:
    /// `base`, `d` (dynamic reweighting), `h` (hierarchical masking), `hd` (both).
    pub fn code(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Reweighted => "d",
            Variant::Masked => "h",
            Variant::MaskedReweighted => "hd",
        }
    }

    /// Inverse of [`Variant::code`], case-insensitive.
    pub fn from_code(code: &str) -> Result<Variant> {
        match code.to_ascii_lowercase().as_str() {
            "base" => Ok(Variant::Base),
            "d" => Ok(Variant::Reweighted),
            "h" => Ok(Variant::Masked),
            "hd" => Ok(Variant::MaskedReweighted),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected base, d, h or hd)"
            ))),
        }
    }

    /// Stable byte tag used in checkpoints.
    fn tag(self) -> u8 {
        match self {
            Variant::Base => 0,
            Variant::Reweighted => 1,
            Variant::Masked => 2,
            Variant::MaskedReweighted => 3,
        }
    }

    fn from_tag(tag: u8) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.tag() == tag)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.code())
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"DTTM";
const CHECKPOINT_VERSION: u32 = 1;

/// Trained (or freshly initialized) parameters of all level heads.
///
/// Weights are kept in `f64`; the checkpoint format stores `f32`, so a
/// save/load round trip quantizes parameters to `f32` precision.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub variant: Variant,
    /// Softmax temperature, strictly positive.
    pub tau: f64,
    /// One `(level_size, feature_dim)` matrix per level.
    pub weights: Vec<Array2<f64>>,
    /// One bias vector per level.
    pub biases: Vec<Array1<f64>>,
}

impl ModelParams {
    /// Initialize heads for `tax` over `dim`-dimensional features: weights
    /// uniform in `[-1/sqrt(dim), 1/sqrt(dim))`, biases zero.
    pub fn init(tax: &Taxonomy, dim: usize, variant: Variant, tau: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(tax, dim, variant, tau, &mut rng)
    }

    /// As [`ModelParams::init`], drawing from a caller-owned generator.
    /// Weights are drawn level by level, row-major, which pins the layout of
    /// the random stream for reproducibility.
    pub fn init_with_rng(
        tax: &Taxonomy,
        dim: usize,
        variant: Variant,
        tau: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        check_tau(tau)?;
        let bound = 1.0 / (dim as f64).sqrt();
        let mut weights = Vec::with_capacity(tax.n_levels());
        let mut biases = Vec::with_capacity(tax.n_levels());
        for level in 0..tax.n_levels() {
            let k = tax.level_size(level);
            let w = Array2::from_shape_fn((k, dim), |_| rng.random_range(-bound..bound));
            weights.push(w);
            biases.push(Array1::zeros(k));
        }
        Ok(ModelParams {
            variant,
            tau,
            weights,
            biases,
        })
    }

    /// Number of levels the parameters cover.
    pub fn n_levels(&self) -> usize {
        self.weights.len()
    }

    /// Feature dimension the heads expect.
    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, |w| w.ncols())
    }

    /// Check that shapes line up with a taxonomy and feature dimension.
    pub fn validate_against(&self, tax: &Taxonomy, dim: usize) -> Result<()> {
        if self.n_levels() != tax.n_levels() {
            return Err(Error::Shape(format!(
                "checkpoint has {} levels, taxonomy has {}",
                self.n_levels(),
                tax.n_levels()
            )));
        }
        for level in 0..tax.n_levels() {
            let k = tax.level_size(level);
            let w = &self.weights[level];
            if w.nrows() != k || w.ncols() != dim {
                return Err(Error::Shape(format!(
                    "level {} weights are {}x{}, expected {}x{}",
                    level + 1,
                    w.nrows(),
                    w.ncols(),
                    k,
                    dim
                )));
            }
            if self.biases[level].len() != k {
                return Err(Error::Shape(format!(
                    "level {} bias has {} entries, expected {}",
                    level + 1,
                    self.biases[level].len(),
                    k
                )));
            }
        }
        Ok(())
    }

    /// Serialize to the binary checkpoint encoding.
    ///
    /// Layout (all little-endian): magic `DTTM`, `u32` version, `u8` variant
    /// tag, `f64` temperature, `u32` level count, then per level `u32` rows,
    /// `u32` cols, `rows*cols` `f32` weights row-major, `rows` `f32` biases.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.push(self.variant.tag());
        buf.extend_from_slice(&self.tau.to_le_bytes());
        buf.extend_from_slice(&(self.weights.len() as u32).to_le_bytes());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            buf.extend_from_slice(&(w.nrows() as u32).to_le_bytes());
            buf.extend_from_slice(&(w.ncols() as u32).to_le_bytes());
            for &v in w.iter() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            for &v in b.iter() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        buf
    }

    /// Parse the binary checkpoint encoding; `origin` labels error messages.
    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut cur = Cursor {
            bytes,
            pos: 0,
            origin,
        };
        let magic = cur.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(origin, "bad magic: not a checkpoint file"));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let tag = cur.u8()?;
        let variant = Variant::from_tag(tag)
            .ok_or_else(|| Error::format(origin, format!("unknown variant tag {tag}")))?;
        let tau = cur.f64()?;
        check_tau(tau).map_err(|_| Error::format(origin, format!("invalid temperature {tau}")))?;
        let n_levels = cur.u32()? as usize;
        if n_levels == 0 {
            return Err(Error::format(origin, "checkpoint has zero levels"));
        }
        let mut weights = Vec::with_capacity(n_levels);
        let mut biases = Vec::with_capacity(n_levels);
        let mut dim = None;
        for level in 0..n_levels {
            let rows = cur.u32()? as usize;
            let cols = cur.u32()? as usize;
            if rows == 0 || cols == 0 {
                return Err(Error::format(
                    origin,
                    format!("level {} has empty weight shape {rows}x{cols}", level + 1),
                ));
            }
            match dim {
                None => dim = Some(cols),
                Some(d) if d != cols => {
                    return Err(Error::format(
                        origin,
                        format!(
                            "level {} feature dimension {cols} differs from {d}",
                            level + 1
                        ),
                    ))
                }
                _ => {}
            }
            let mut w = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                w.push(cur.f32()? as f64);
            }
            let mut b = Vec::with_capacity(rows);
            for _ in 0..rows {
                b.push(cur.f32()? as f64);
            }
            weights.push(
                Array2::from_shape_vec((rows, cols), w).expect("shape matches element count"),
            );
            biases.push(Array1::from_vec(b));
        }
        if cur.pos != bytes.len() {
            return Err(Error::format(
                origin,
                format!(
                    "{} trailing bytes after checkpoint payload",
                    bytes.len() - cur.pos
                ),
            ));
        }
        Ok(ModelParams {
            variant,
            tau,
            weights,
            biases,
        })
    }

    /// Write the checkpoint encoding to a file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut file =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        file.write_all(&bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Read a checkpoint file.
    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

/// Byte cursor with position-annotated truncation errors.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.origin,
                format!("truncated: needed {n} bytes at offset {}", self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::Config(format!(
            "temperature must be a positive finite number, got {tau}"
        )));
    }
    Ok(())
}

/// Everything the forward pass produces for one instance, level by level:
/// raw logits, attention masks (all-ones on the first level; recorded even
/// for flat variants) and post-softmax probabilities.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: Vec<Array1<f64>>,
    pub masks: Vec<Array1<f64>>,
    pub probs: Vec<Array1<f64>>,
}

/// Temperature softmax: `softmax(v / tau)`, computed with the usual
/// max-subtraction so large logits cannot overflow.
pub fn softmax_t(v: ArrayView1<f64>, tau: f64) -> Result<Array1<f64>> {
    check_tau(tau)?;
    if v.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(
            "softmax input contains NaN or infinity".into(),
        ));
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = v.mapv(|x| ((x - max) / tau).exp());
    let sum: f64 = out.sum();
    out.mapv_inplace(|x| x / sum);
    Ok(out)
}

/// Logits of one level for one instance: `W_level a + b_level`.
pub fn level_logits(
    params: &ModelParams,
    level: usize,
    features: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    assert!(level < params.n_levels(), "level {level} out of range");
    if features.len() != params.dim() {
        return Err(Error::Shape(format!(
            "feature vector has {} entries, heads expect {}",
            features.len(),
            params.dim()
        )));
    }
    let z = params.weights[level].dot(&features) + &params.biases[level];
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!(
            "non-finite logits on level {}",
            level + 1
        )));
    }
    Ok(z)
}

/// Attention mask for the child level: the parent level's probability vector
/// times the binary transition matrix. Each child inherits exactly its
/// parent's probability, so entries lie in `[0, 1]` but the vector does not
/// generally sum to one; it is used as-is, without renormalization.
pub fn attention_mask(
    parent_probs: ArrayView1<f64>,
    transition: &TransitionMatrix,
) -> Result<Array1<f64>> {
    if parent_probs.len() != transition.rows() {
        return Err(Error::Shape(format!(
            "parent distribution has {} entries, transition expects {}",
            parent_probs.len(),
            transition.rows()
        )));
    }
    Ok(parent_probs.dot(transition.array()))
}

/// Forward pass for one instance, building transition matrices on the fly.
/// Prefer [`forward_with`] when evaluating many instances.
pub fn forward(
    params: &ModelParams,
    tax: &Taxonomy,
    features: ArrayView1<f64>,
) -> Result<ForwardTrace> {
    let transitions = tax.transition_matrices()?;
    params.validate_against(tax, features.len())?;
    forward_with(params, &transitions, features)
}

/// Forward pass for one instance with precomputed transition matrices
/// (`transitions[i]` couples level `i` to level `i + 1`).
pub fn forward_with(
    params: &ModelParams,
    transitions: &[TransitionMatrix],
    features: ArrayView1<f64>,
) -> Result<ForwardTrace> {
    let n = params.n_levels();
    assert_eq!(
        transitions.len(),
        n - 1,
        "expected one transition matrix per adjacent level pair"
    );
    let mut logits = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut probs: Vec<Array1<f64>> = Vec::with_capacity(n);
    for level in 0..n {
        let z = level_logits(params, level, features)?;
        let mask = if level == 0 {
            Array1::ones(z.len())
        } else {
            attention_mask(probs[level - 1].view(), &transitions[level - 1])?
        };
        let p = if params.variant.uses_mask() {
            softmax_t((&z * &mask).view(), params.tau)?
        } else {
            softmax_t(z.view(), params.tau)?
        };
        logits.push(z);
        masks.push(mask);
        probs.push(p);
    }
    Ok(ForwardTrace {
        logits,
        masks,
        probs,
    })
}

/// Index of the largest entry; ties resolve to the lowest index so
/// predictions are deterministic.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Predicted class path (one id per level, independent argmax per level) for
/// every row of `features`. Paths from flat variants can violate the
/// parent relation; that is what the consistency metric measures.
pub fn predict_paths(
    params: &ModelParams,
    tax: &Taxonomy,
    features: ArrayView2<f64>,
) -> Result<Vec<Vec<ClassId>>> {
    params.validate_against(tax, features.ncols())?;
    let transitions = tax.transition_matrices()?;
    let mut paths = Vec::with_capacity(features.nrows());
    for row in features.outer_iter() {
        let trace = forward_with(params, &transitions, row)?;
        let path = trace
            .probs
            .iter()
            .enumerate()
            .map(|(level, p)| tax.class_id(level, argmax(p.view())))
            .collect();
        paths.push(path);
    }
    Ok(paths)
}
