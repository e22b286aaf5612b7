//! Word-conditioned patch relevance providers.

use ndarray::{Array2, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, ClipBackbone, ClipConfig};
use crate::{Error, Result, Scalar};

/// `P × P` scores in `[0, 1]` for one image and word.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap<T> {
    pub scores: Array2<T>,
    pub word: String,
}

impl<T: Scalar> RelevanceMap<T> {
    /// Min-max normalizes raw scores; a constant map becomes all zeros.
    pub fn from_raw(raw: Array2<T>, word: &str) -> Result<Self> {
        if raw.nrows() != raw.ncols() || raw.is_empty() {
            return Err(Error::RelevanceUnavailable(format!(
                "relevance grid must be square and non-empty, got {:?}",
                raw.shape()
            )));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::RelevanceUnavailable(format!("non-finite relevance for {word:?}")));
        }
        let min = raw.iter().copied().fold(T::infinity(), T::min);
        let max = raw.iter().copied().fold(T::neg_infinity(), T::max);
        let range = max - min;
        let scores = if range > T::zero() {
            raw.mapv(|v| ((v - min) / range).max(T::zero()).min(T::one()))
        } else {
            Array2::zeros(raw.raw_dim())
        };
        Ok(Self { scores, word: word.to_string() })
    }

    pub fn grid(&self) -> usize {
        self.scores.nrows()
    }
}

pub trait RelevanceProvider<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;

    /// Patch grid side `P`.
    fn grid(&self) -> usize;

    /// Unnormalized scores, `P × P`.
    fn raw_scores(&self, image: ArrayView3<T>, word: &str) -> Result<Array2<T>>;

    fn relevance_map(&self, image: ArrayView3<T>, word: &str) -> Result<RelevanceMap<T>> {
        if word.trim().is_empty() {
            return Err(Error::InvalidInput("relevance word must be non-empty".into()));
        }
        let raw = self.raw_scores(image, word)?;
        if raw.nrows() != self.grid() || raw.ncols() != self.grid() {
            return Err(Error::RelevanceUnavailable(format!(
                "provider {} returned {:?}, expected {}x{}",
                self.name(),
                raw.shape(),
                self.grid(),
                self.grid()
            )));
        }
        RelevanceMap::from_raw(raw, word)
    }
}

/// Deterministic pseudo-random maps keyed by seed, word and pixels.
#[derive(Debug, Clone)]
pub struct StubRelevance {
    pub seed: u64,
    pub grid: usize,
}

impl StubRelevance {
    pub const DEFAULT_GRID: usize = 4;

    pub fn new(seed: u64, grid: usize) -> Result<Self> {
        if grid == 0 {
            return Err(Error::Config("mask.grid must be at least 1".into()));
        }
        Ok(Self { seed, grid })
    }
}

impl<T: Scalar> RelevanceProvider<T> for StubRelevance {
    fn name(&self) -> &str {
        "stub"
    }

    fn grid(&self) -> usize {
        self.grid
    }

    fn raw_scores(&self, image: ArrayView3<T>, word: &str) -> Result<Array2<T>> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(word.to_lowercase().as_bytes());
        let mut buf = Vec::with_capacity(image.len() * T::BYTES);
        for &v in image.iter() {
            v.write_le(&mut buf);
        }
        hasher.update(&buf);
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(key);
        Ok(Array2::from_shape_fn((self.grid, self.grid), |_| T::lit(rng.gen::<f64>())))
    }
}

/// Gradient-weighted final-block attention of a CLIP vision tower.
///
/// The map is conditioned on the similarity between the image and the text
/// "a photo of <word>". With the B/32 model at 224 px the grid is 7.
pub struct GradientAttentionRelevance<T> {
    backbone: ClipBackbone<T>,
}

impl<T: Scalar> GradientAttentionRelevance<T> {
    pub fn new(backbone: ClipBackbone<T>) -> Self {
        Self { backbone }
    }

    /// Loads the B/32 relevance model from a weights directory.
    pub fn load_b32(dir: &std::path::Path) -> Result<Self> {
        Ok(Self::new(ClipBackbone::load(ClipConfig::vit_b_32(), dir)?))
    }

    pub fn resolution(&self) -> usize {
        self.backbone.model().config().image_size
    }
}

impl<T: Scalar> RelevanceProvider<T> for GradientAttentionRelevance<T> {
    fn name(&self) -> &str {
        "gradient-attention"
    }

    fn grid(&self) -> usize {
        self.backbone.model().config().grid()
    }

    fn raw_scores(&self, image: ArrayView3<T>, word: &str) -> Result<Array2<T>> {
        let res = self.resolution();
        if image.shape()[0] != res || image.shape()[1] != res {
            return Err(Error::RelevanceUnavailable(format!(
                "relevance model expects {res}x{res} images, got {}x{}",
                image.shape()[0],
                image.shape()[1]
            )));
        }
        let tokens = self.backbone.tokenize(&format!("a photo of {word}"))?;
        let text = self.backbone.encode_text(&tokens)?;
        self.backbone
            .model()
            .last_block_relevance(image, text.row(0))
            .map_err(|e| Error::RelevanceUnavailable(e.to_string()))
    }
}

/// Builds the provider named by `mask.relevance_provider`.
pub fn load_provider<T: Scalar>(
    name: &str,
    seed: u64,
    grid: usize,
    weights: Option<&std::path::Path>,
) -> Result<Box<dyn RelevanceProvider<T>>> {
    match name {
        "stub" => Ok(Box::new(StubRelevance::new(seed, grid)?)),
        "gradient-attention" => {
            let dir = weights.ok_or_else(|| {
                Error::Config("mask.relevance_weights_path is required for gradient-attention".into())
            })?;
            Ok(Box::new(GradientAttentionRelevance::<T>::load_b32(dir)?))
        }
        other => Err(Error::Config(format!(
            "unknown mask.relevance_provider {other:?}; expected \"stub\" or \"gradient-attention\""
        ))),
    }
}
