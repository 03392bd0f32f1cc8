//! Class-name embeddings that condition the detector.
//!
//! Class names decompose into attribute tokens ("red triangle" → {red,
//! triangle}); each token gets a unit-norm seeded Gaussian basis vector and a
//! class embedding is the normalized sum of its token vectors. Novel classes
//! therefore share structure with base classes, which is what makes zero-shot
//! conditioning meaningful. The provider is deliberately stateless and
//! deterministic: same vocabulary file + seed → bit-identical vectors.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DecolaError, Result};

/// Reserved phrase for unconditioned (Phase 2) selection. It owns a basis
/// token of its own and never tokenizes into class attributes.
pub const OBJECT_PHRASE: &str = "an object";

/// Default embedding dimension when a vocabulary file does not say otherwise.
pub const DEFAULT_DIM: usize = 64;

/// Unit-norm embedding for a class name (or the reserved object phrase).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbedding {
    pub name: String,
    pub vector: Vec<f64>,
    /// Attribute tokens the name decomposes into.
    pub attributes: Vec<String>,
}

impl ClassEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Which side of the open-vocabulary split a class lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitGroup {
    Base,
    Novel,
}

/// On-disk vocabulary schema.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VocabularyFile {
    pub classes: Vec<String>,
    pub split: SplitSpec,
    pub seed: u64,
    /// Embedding dimension; absent means 64.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SplitSpec {
    pub base: Vec<String>,
    pub novel: Vec<String>,
}

/// Immutable class vocabulary with its seeded attribute basis.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    classes: Vec<String>,
    split: BTreeMap<String, SplitGroup>,
    seed: u64,
    dim: usize,
    attribute_basis: BTreeMap<String, Vec<f64>>,
}

fn token_seed(seed: u64, token: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(b"/");
    hasher.update(token.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn unit_gaussian(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..dim)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in &mut v {
        *x /= norm;
    }
    v
}

fn tokenize(name: &str) -> Vec<String> {
    name.split_whitespace().map(|t| t.to_string()).collect()
}

impl Vocabulary {
    pub fn new(file: &VocabularyFile) -> Result<Self> {
        let dim = file.dim.unwrap_or(DEFAULT_DIM);
        if dim == 0 {
            return Err(DecolaError::Config("vocabulary dim must be positive".into()));
        }
        let base: BTreeSet<&String> = file.split.base.iter().collect();
        let novel: BTreeSet<&String> = file.split.novel.iter().collect();
        if let Some(both) = base.intersection(&novel).next() {
            return Err(DecolaError::Schema {
                path: "split".into(),
                message: format!("class `{both}` is in both base and novel"),
            });
        }
        let all: BTreeSet<&String> = file.classes.iter().collect();
        let covered: BTreeSet<&String> = base.union(&novel).copied().collect();
        if all != covered {
            return Err(DecolaError::Schema {
                path: "split".into(),
                message: "base ∪ novel must equal the class list".into(),
            });
        }
        let mut split = BTreeMap::new();
        for c in &file.split.base {
            split.insert(c.clone(), SplitGroup::Base);
        }
        for c in &file.split.novel {
            split.insert(c.clone(), SplitGroup::Novel);
        }

        let mut attribute_basis = BTreeMap::new();
        for class in &file.classes {
            for token in tokenize(class) {
                attribute_basis
                    .entry(token.clone())
                    .or_insert_with(|| unit_gaussian(token_seed(file.seed, &token), dim));
            }
        }
        attribute_basis.insert(
            OBJECT_PHRASE.to_string(),
            unit_gaussian(token_seed(file.seed, OBJECT_PHRASE), dim),
        );

        Ok(Self {
            classes: file.classes.clone(),
            split,
            seed: file.seed,
            dim,
            attribute_basis,
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: VocabularyFile = serde_json::from_str(&text)?;
        Self::new(&file)
    }

    pub fn to_file(&self) -> VocabularyFile {
        VocabularyFile {
            classes: self.classes.clone(),
            split: SplitSpec {
                base: self
                    .classes
                    .iter()
                    .filter(|c| self.split[*c] == SplitGroup::Base)
                    .cloned()
                    .collect(),
                novel: self
                    .classes
                    .iter()
                    .filter(|c| self.split[*c] == SplitGroup::Novel)
                    .cloned()
                    .collect(),
            },
            seed: self.seed,
            dim: Some(self.dim),
        }
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn group_of(&self, class: &str) -> Option<SplitGroup> {
        self.split.get(class).copied()
    }

    pub fn base_classes(&self) -> Vec<String> {
        self.classes
            .iter()
            .filter(|c| self.split[*c] == SplitGroup::Base)
            .cloned()
            .collect()
    }

    pub fn novel_classes(&self) -> Vec<String> {
        self.classes
            .iter()
            .filter(|c| self.split[*c] == SplitGroup::Novel)
            .cloned()
            .collect()
    }

    pub fn contains(&self, class: &str) -> bool {
        self.split.contains_key(class)
    }

    /// Index of a class in vocabulary order; the canonical "class id".
    pub fn class_index(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }

    /// SHA-256 over the canonical vocabulary JSON; ties checkpoints to the
    /// vocabulary they were trained with.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(&self.to_file()).expect("vocabulary serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex::encode(hasher.finalize())
    }

    /// Embedding for a class name: normalized sum of its attribute vectors.
    pub fn embed_class(&self, name: &str) -> Result<ClassEmbedding> {
        let attributes = tokenize(name);
        if attributes.is_empty() {
            return Err(DecolaError::UnknownClass { name: name.into() });
        }
        let mut vector = vec![0.0; self.dim];
        for token in &attributes {
            let basis = self
                .attribute_basis
                .get(token)
                .filter(|_| token != OBJECT_PHRASE)
                .ok_or_else(|| DecolaError::UnknownAttribute {
                    token: token.clone(),
                    name: name.into(),
                })?;
            for (v, b) in vector.iter_mut().zip(basis) {
                *v += b;
            }
        }
        let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for v in &mut vector {
            *v /= norm;
        }
        Ok(ClassEmbedding {
            name: name.into(),
            vector,
            attributes,
        })
    }

    /// Reserved embedding for the phrase "an object" (Phase 2 conditioning).
    pub fn embed_object_phrase(&self) -> ClassEmbedding {
        let basis = &self.attribute_basis[OBJECT_PHRASE];
        ClassEmbedding {
            name: OBJECT_PHRASE.into(),
            vector: basis.clone(),
            attributes: vec![OBJECT_PHRASE.into()],
        }
    }

    pub fn embed_all(&self, names: &[String]) -> Result<Vec<ClassEmbedding>> {
        names.iter().map(|n| self.embed_class(n)).collect()
    }
}

/// Cosine similarity of every (embedding, feature) pair.
///
/// Output entry (y, j) = cosine(f_j, t(y)). Zero-norm features score 0 for
/// every class; the second return value counts how many were seen.
pub fn similarity_matrix(
    embeddings: &[ClassEmbedding],
    features: &Array2<f64>,
) -> Result<(Array2<f64>, usize)> {
    let d = features.ncols();
    for e in embeddings {
        if e.dim() != d {
            return Err(DecolaError::DimensionMismatch {
                context: format!("embedding `{}` vs feature dim", e.name),
                expected: d,
                got: e.dim(),
            });
        }
    }
    let mut zero_norm = 0usize;
    let mut out = Array2::zeros((embeddings.len(), features.nrows()));
    for (j, f) in features.rows().into_iter().enumerate() {
        let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 1e-12 {
            zero_norm += 1;
            continue;
        }
        for (y, e) in embeddings.iter().enumerate() {
            let dot: f64 = f.iter().zip(&e.vector).map(|(a, b)| a * b).sum();
            let en = e.vector.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            out[(y, j)] = dot / (norm * en);
        }
    }
    Ok((out, zero_norm))
}

#[cfg(test)]
pub(crate) fn toy_vocabulary(dim: usize) -> Vocabulary {
    let colors = ["red", "green", "blue", "yellow"];
    let shapes = ["circle", "square", "triangle", "cross"];
    let mut classes = Vec::new();
    for c in colors {
        for s in shapes {
            classes.push(format!("{c} {s}"));
        }
    }
    let novel = vec![
        "red cross".to_string(),
        "green triangle".to_string(),
        "blue square".to_string(),
        "yellow circle".to_string(),
    ];
    let base = classes
        .iter()
        .filter(|c| !novel.contains(c))
        .cloned()
        .collect();
    Vocabulary::new(&VocabularyFile {
        classes,
        split: SplitSpec { base, novel },
        seed: 7,
        dim: Some(dim),
    })
    .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn embeddings_are_deterministic_and_unit_norm() {
        let v1 = toy_vocabulary(64);
        let v2 = toy_vocabulary(64);
        let a = v1.embed_class("red triangle").unwrap();
        let b = v2.embed_class("red triangle").unwrap();
        assert_eq!(a.vector, b.vector);
        let norm: f64 = a.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-6);
        assert_eq!(a.attributes, vec!["red".to_string(), "triangle".to_string()]);
    }

    #[test]
    fn shared_attribute_raises_cosine() {
        let v = toy_vocabulary(64);
        let rt = v.embed_class("red triangle").unwrap();
        let rc = v.embed_class("red circle").unwrap();
        let bc = v.embed_class("blue circle").unwrap();
        assert!(cosine(&rt.vector, &rc.vector) > cosine(&rt.vector, &bc.vector));
    }

    #[test]
    fn unknown_attribute_names_the_token() {
        let v = toy_vocabulary(64);
        match v.embed_class("red dodecahedron").unwrap_err() {
            DecolaError::UnknownAttribute { token, .. } => assert_eq!(token, "dodecahedron"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn object_phrase_is_reserved_distinct_and_unit() {
        let v = toy_vocabulary(64);
        let obj = v.embed_object_phrase();
        let obj2 = v.embed_object_phrase();
        assert_eq!(obj.vector, obj2.vector);
        let norm: f64 = obj.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-6);
        for class in v.classes() {
            let e = v.embed_class(class).unwrap();
            assert!(cosine(&obj.vector, &e.vector) < 0.99, "too close to {class}");
        }
        // the reserved phrase is not reachable through embed_class
        assert!(v.embed_class(OBJECT_PHRASE).is_err());
    }

    #[test]
    fn similarity_matrix_matches_double_loop_oracle() {
        let v = toy_vocabulary(16);
        let embs: Vec<_> = v
            .classes()
            .iter()
            .map(|c| v.embed_class(c).unwrap())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let features =
            Array2::from_shape_fn((10, 16), |_| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let (m, zeros) = similarity_matrix(&embs, &features).unwrap();
        assert_eq!(zeros, 0);
        for (y, e) in embs.iter().enumerate() {
            for j in 0..features.nrows() {
                let f: Vec<f64> = features.row(j).to_vec();
                let expect = cosine(&f, &e.vector);
                assert!((m[(y, j)] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn similarity_matrix_zero_feature_scores_zero_and_counts() {
        let v = toy_vocabulary(8);
        let embs = vec![v.embed_class("red circle").unwrap()];
        let mut features = Array2::zeros((2, 8));
        features[(1, 0)] = 1.0;
        let (m, zeros) = similarity_matrix(&embs, &features).unwrap();
        assert_eq!(zeros, 1);
        assert_eq!(m[(0, 0)], 0.0);
        assert!(m[(0, 1)].abs() > 0.0 || m[(0, 1)] == 0.0);
    }

    #[test]
    fn cosine_self_is_one_orthogonal_is_zero() {
        let v = toy_vocabulary(8);
        let e = v.embed_class("red circle").unwrap();
        let mut features = Array2::zeros((2, 8));
        for (k, val) in e.vector.iter().enumerate() {
            features[(0, k)] = *val;
        }
        // build a vector orthogonal to e by Gram-Schmidt on a basis vector
        let mut u = vec![0.0; 8];
        u[0] = 1.0;
        let dot: f64 = u.iter().zip(&e.vector).map(|(a, b)| a * b).sum();
        for (k, val) in e.vector.iter().enumerate() {
            features[(1, k)] = u[k] - dot * val;
        }
        let (m, _) = similarity_matrix(&[e], &features).unwrap();
        assert_abs_diff_eq!(m[(0, 0)], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(m[(0, 1)], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn expected_cosine_monotone_in_shared_attributes() {
        let v = toy_vocabulary(64);
        let classes = v.classes().to_vec();
        let mut sums = [0.0f64; 3];
        let mut counts = [0usize; 3];
        for i in 0..classes.len() {
            for j in (i + 1)..classes.len() {
                let a = v.embed_class(&classes[i]).unwrap();
                let b = v.embed_class(&classes[j]).unwrap();
                let shared = a
                    .attributes
                    .iter()
                    .filter(|t| b.attributes.contains(t))
                    .count();
                sums[shared] += cosine(&a.vector, &b.vector);
                counts[shared] += 1;
            }
        }
        assert!(counts[0] > 0 && counts[1] > 0);
        let mean0 = sums[0] / counts[0] as f64;
        let mean1 = sums[1] / counts[1] as f64;
        assert!(mean1 > mean0, "mean cosine not monotone: {mean0} vs {mean1}");
    }

    #[test]
    fn split_partition_is_validated() {
        let bad = VocabularyFile {
            classes: vec!["red circle".into(), "blue circle".into()],
            split: SplitSpec {
                base: vec!["red circle".into(), "blue circle".into()],
                novel: vec!["blue circle".into()],
            },
            seed: 1,
            dim: Some(8),
        };
        assert!(Vocabulary::new(&bad).is_err());
    }

    #[test]
    fn file_round_trip_preserves_embeddings() {
        let v = toy_vocabulary(32);
        let file = v.to_file();
        let text = serde_json::to_string_pretty(&file).unwrap();
        let parsed: VocabularyFile = serde_json::from_str(&text).unwrap();
        let v2 = Vocabulary::new(&parsed).unwrap();
        assert_eq!(v.hash(), v2.hash());
        let a = v.embed_class("green square").unwrap();
        let b = v2.embed_class("green square").unwrap();
        assert_eq!(a.vector, b.vector);
    }

    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
}
