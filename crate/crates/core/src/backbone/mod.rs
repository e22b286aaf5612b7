//! Frozen dual-encoder interface.
//!
//! Every backbone exposes its token-embedding table so pseudo words can be
//! spliced in before positional encoding. Text encoding always goes through
//! [`Backbone::text_forward`] on embedded rows, which makes
//! `encode_embedded(embed_tokens(t)) == encode_text(t)` hold by construction.

pub mod clip;
pub mod stub;
pub mod tokenizer;

use std::path::PathBuf;

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;

use crate::nn::{l2_normalize, l2_normalize_backward};
use crate::{Error, Result, Scalar};

pub use clip::{ClipBackbone, ClipConfig, ClipModel};
pub use stub::{StubBackbone, StubConfig};
pub use tokenizer::{ClipTokenizer, SpecialTokens, StubTokenizer, TokenSequence, Tokenizer, WordSpan};

/// One preprocessed image, `[H, W, 3]`.
pub type Image<T> = Array3<T>;

/// Tolerance on unit norms of returned features.
pub const UNIT_NORM_TOL: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct ImageBatch<T> {
    pixels: Array4<T>,
}

impl<T: Scalar> ImageBatch<T> {
    pub fn new(pixels: Array4<T>) -> Result<Self> {
        if pixels.shape()[0] == 0 {
            return Err(Error::InvalidInput("empty image batch".into()));
        }
        if pixels.shape()[3] != 3 {
            return Err(Error::dims("image channels", 3, pixels.shape()[3]));
        }
        Ok(Self { pixels })
    }

    pub fn from_images(images: &[Image<T>]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidInput("empty image batch".into()));
        }
        let views: Vec<ArrayView3<T>> = images.iter().map(|i| i.view()).collect();
        let pixels = ndarray::stack(Axis(0), &views)
            .map_err(|e| Error::InvalidInput(format!("images differ in shape: {e}")))?;
        Self::new(pixels)
    }

    pub fn len(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, T> {
        self.pixels.index_axis(Axis(0), i)
    }

    pub fn pixels(&self) -> &Array4<T> {
        &self.pixels
    }
}

/// Token embeddings before positional encoding, `[context, D^W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSequence<T> {
    pub embeddings: Array2<T>,
    pub length: usize,
}

impl<T> EmbeddedSequence<T> {
    pub fn end_position(&self) -> usize {
        self.length - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch<T> {
    pub vectors: Array2<T>,
    pub normalized: bool,
}

impl<T: Scalar> FeatureBatch<T> {
    /// Normalizes each row to unit length.
    pub fn normalize(vectors: Array2<T>) -> Self {
        let mut vectors = vectors;
        for mut row in vectors.rows_mut() {
            let (n, _) = l2_normalize(row.view());
            row.assign(&n);
        }
        Self {
            vectors,
            normalized: true,
        }
    }

    pub fn from_rows(rows: &[Array1<T>], normalized: bool) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("empty feature batch".into()));
        }
        let views: Vec<ArrayView1<T>> = rows.iter().map(|r| r.view()).collect();
        let vectors = ndarray::stack(Axis(0), &views)
            .map_err(|e| Error::InvalidInput(format!("feature rows differ in width: {e}")))?;
        Ok(Self { vectors, normalized })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, T> {
        self.vectors.row(i)
    }

    /// Fails unless the batch is flagged normalized and every row has unit norm.
    pub fn check_normalized(&self) -> Result<()> {
        if !self.normalized {
            return Err(Error::ContractViolation("features are not normalized".into()));
        }
        for (i, row) in self.vectors.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt().to_f64_lossy();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::ContractViolation(format!(
                    "feature row {i} has norm {norm}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneDims {
    pub resolution: usize,
    /// Width of image features and of the shared embedding space (D^I).
    pub image_dim: usize,
    /// Width of token embeddings (D^W).
    pub token_dim: usize,
    pub context_length: usize,
}

/// Resize/crop target and per-channel normalization of the image encoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preprocessing {
    pub resolution: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Preprocessing {
    pub const CLIP_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
    pub const CLIP_STD: [f32; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];
}

/// Maps a cotangent of the unnormalized text output to row gradients.
pub type TextBackward<'a, T> = Box<dyn FnOnce(ArrayView1<T>) -> Array2<T> + Send + 'a>;

/// A text-side forward result together with its pullback.
pub struct TracedFeature<'a, T> {
    /// Unit-normalized feature.
    pub feature: Array1<T>,
    norm: T,
    backward: TextBackward<'a, T>,
}

impl<'a, T: Scalar> TracedFeature<'a, T> {
    /// Gradient w.r.t. the embedded rows given the gradient w.r.t. the normalized feature.
    pub fn backward(self, grad_feature: ArrayView1<T>) -> Array2<T> {
        let d_raw = l2_normalize_backward(self.feature.view(), self.norm, grad_feature);
        (self.backward)(d_raw.view())
    }
}

pub trait Backbone<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;

    fn dims(&self) -> BackboneDims;

    fn preprocessing(&self) -> Preprocessing;

    fn tokenizer(&self) -> &dyn Tokenizer;

    /// Learned inverse temperature of the pretrained similarity.
    fn logit_scale(&self) -> T;

    /// Row of the token-embedding table.
    fn token_embedding(&self, id: u32) -> ArrayView1<'_, T>;

    /// Unnormalized image projection for one `[H, W, 3]` image.
    fn image_forward(&self, image: ArrayView3<T>) -> Result<Array1<T>>;

    /// Unnormalized text projection pooled at `end_position`.
    fn text_forward(&self, rows: ArrayView2<T>, end_position: usize) -> Result<Array1<T>>;

    /// `text_forward` plus the pullback to the embedded rows.
    fn text_forward_traced(
        &self,
        rows: ArrayView2<T>,
        end_position: usize,
    ) -> Result<(Array1<T>, TextBackward<'_, T>)>;

    /// Digest over all frozen weights.
    fn weights_checksum(&self) -> String;

    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        self.tokenizer().tokenize(text)
    }

    fn embed_tokens(&self, tokens: &TokenSequence) -> Result<EmbeddedSequence<T>> {
        let dims = self.dims();
        if tokens.context_length() != dims.context_length {
            return Err(Error::dims("token context", dims.context_length, tokens.context_length()));
        }
        tokens.validate()?;
        let vocab = self.tokenizer().vocab_size();
        let mut embeddings = Array2::zeros((dims.context_length, dims.token_dim));
        for (mut row, &id) in embeddings.rows_mut().into_iter().zip(&tokens.ids) {
            if id as usize >= vocab {
                return Err(Error::InvalidInput(format!("token id {id} outside vocabulary")));
            }
            row.assign(&self.token_embedding(id));
        }
        Ok(EmbeddedSequence {
            embeddings,
            length: tokens.length,
        })
    }

    fn encode_image(&self, batch: &ImageBatch<T>) -> Result<FeatureBatch<T>> {
        let res = self.dims().resolution;
        let shape = batch.pixels().shape();
        if shape[1] != res || shape[2] != res {
            return Err(Error::Config(format!(
                "backbone {} expects {res}x{res} images, got {}x{}",
                self.name(),
                shape[1],
                shape[2]
            )));
        }
        let rows = (0..batch.len())
            .into_par_iter()
            .map(|i| self.image_forward(batch.image(i)))
            .collect::<Result<Vec<_>>>()?;
        let raw = FeatureBatch::from_rows(&rows, false)?;
        Ok(FeatureBatch::normalize(raw.vectors))
    }

    fn encode_text(&self, tokens: &TokenSequence) -> Result<FeatureBatch<T>> {
        let seq = self.embed_tokens(tokens)?;
        self.encode_embedded(&seq, tokens.end_position())
    }

    fn encode_embedded(&self, seq: &EmbeddedSequence<T>, end_position: usize) -> Result<FeatureBatch<T>> {
        self.check_embedded(seq, end_position)?;
        let raw = self.text_forward(seq.embeddings.view(), end_position)?;
        let (feature, _) = l2_normalize(raw.view());
        FeatureBatch::from_rows(&[feature], true)
    }

    /// Encodes many sequences, each pooled at its own end position.
    fn encode_embedded_batch(&self, seqs: &[EmbeddedSequence<T>]) -> Result<FeatureBatch<T>> {
        let rows = seqs
            .par_iter()
            .map(|s| {
                self.check_embedded(s, s.end_position())?;
                let raw = self.text_forward(s.embeddings.view(), s.end_position())?;
                Ok(l2_normalize(raw.view()).0)
            })
            .collect::<Result<Vec<_>>>()?;
        FeatureBatch::from_rows(&rows, true)
    }

    /// Normalized feature plus a pullback to the embedded rows.
    fn encode_embedded_traced(
        &self,
        seq: &EmbeddedSequence<T>,
        end_position: usize,
    ) -> Result<TracedFeature<'_, T>> {
        self.check_embedded(seq, end_position)?;
        let (raw, backward) = self.text_forward_traced(seq.embeddings.view(), end_position)?;
        let (feature, norm) = l2_normalize(raw.view());
        Ok(TracedFeature {
            feature,
            norm,
            backward,
        })
    }

    fn check_embedded(&self, seq: &EmbeddedSequence<T>, end_position: usize) -> Result<()> {
        let dims = self.dims();
        if seq.embeddings.ncols() != dims.token_dim {
            return Err(Error::dims("token embedding width", dims.token_dim, seq.embeddings.ncols()));
        }
        if seq.embeddings.nrows() != dims.context_length {
            return Err(Error::dims("embedded context", dims.context_length, seq.embeddings.nrows()));
        }
        if end_position >= dims.context_length {
            return Err(Error::InvalidInput(format!(
                "end position {end_position} outside context {}",
                dims.context_length
            )));
        }
        Ok(())
    }
}

/// Backbone selection (`backbone.name`, `backbone.weights_path`, stub settings).
#[derive(Debug, Clone, PartialEq)]
pub enum BackboneSpec {
    Stub(StubConfig),
    Clip { config: ClipConfig, weights: PathBuf },
}

impl BackboneSpec {
    pub const NAMES: [&'static str; 3] = ["stub", "vit-l-14", "vit-b-32"];

    pub fn from_name(name: &str, weights: PathBuf, stub: StubConfig) -> Result<Self> {
        match name {
            "stub" => Ok(Self::Stub(stub)),
            "vit-l-14" => Ok(Self::Clip { config: ClipConfig::vit_l_14(), weights }),
            "vit-b-32" => Ok(Self::Clip { config: ClipConfig::vit_b_32(), weights }),
            other => Err(Error::Config(format!(
                "unknown backbone.name {other:?}; expected one of {:?}",
                Self::NAMES
            ))),
        }
    }

    /// Dimensions known without loading weights.
    pub fn dims(&self) -> BackboneDims {
        match self {
            Self::Stub(c) => c.dims(),
            Self::Clip { config, .. } => config.dims(),
        }
    }

    pub fn load<T: Scalar>(&self) -> Result<Box<dyn Backbone<T>>> {
        Ok(match self {
            Self::Stub(c) => Box::new(StubBackbone::<T>::new(c.clone())),
            Self::Clip { config, weights } => {
                if weights.as_os_str().is_empty() {
                    return Err(Error::Config(format!(
                        "backbone.weights_path is required for {}",
                        config.name
                    )));
                }
                Box::new(ClipBackbone::<T>::load(config.clone(), weights)?)
            }
        })
    }
}

/// SHA-256 over the little-endian bytes of every weight array, in order.
pub(crate) fn weights_digest<'a, T: Scalar>(parts: impl IntoIterator<Item = ndarray::ArrayViewD<'a, T>>) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    let mut buf = Vec::new();
    for part in parts {
        buf.clear();
        for &v in part.iter() {
            v.write_le(&mut buf);
        }
        hasher.update(&buf);
    }
    hex::encode(hasher.finalize())
}
