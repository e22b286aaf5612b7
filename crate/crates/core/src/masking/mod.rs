//! Image-text masking: drop the first noun from the caption and keep only the
//! image patches relevant to it, filling the rest from a batch partner.

pub mod pos;
pub mod relevance;

use ndarray::{Array2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::{Backbone, Image, ImageBatch, TokenSequence, WordSpan};
use crate::{Error, Result, Scalar};

pub use pos::{load_tagger, LexiconTagger, PerceptronTagger, PosTag, PosTagger};
pub use relevance::{load_provider, GradientAttentionRelevance, RelevanceMap, RelevanceProvider, StubRelevance};

/// The caption word taken out of a sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemovedWord {
    pub word: String,
    pub word_index: usize,
    pub token_position: usize,
    pub token_count: usize,
}

/// Complementary patch masks; `relevant[p] + irrelevant[p] == 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMasks {
    pub relevant: Array2<u8>,
    pub irrelevant: Array2<u8>,
}

impl BinaryMasks {
    pub fn from_relevant(relevant: Array2<u8>) -> Self {
        let irrelevant = relevant.mapv(|v| 1 - v);
        Self { relevant, irrelevant }
    }

    pub fn grid(&self) -> usize {
        self.relevant.nrows()
    }

    pub fn relevant_fraction(&self) -> f64 {
        let n = self.relevant.len().max(1);
        self.relevant.iter().map(|&v| v as usize).sum::<usize>() as f64 / n as f64
    }
}

#[derive(Debug, Clone)]
pub struct MaskedPairBundle<T> {
    /// Batch index of the sample itself.
    pub index: usize,
    pub masked_image: Image<T>,
    pub masked_tokens: TokenSequence,
    pub removed: RemovedWord,
    pub partner_index: usize,
    pub relevance: RelevanceMap<T>,
    pub masks: BinaryMasks,
}

/// First word of the sequence tagged as a noun, with its token span.
pub fn select_first_noun(text: &str, tokens: &TokenSequence, tagger: &dyn PosTagger) -> Result<RemovedWord> {
    let words = tokens.words();
    if words.is_empty() {
        return Err(Error::InvalidInput(format!("caption {text:?} has no words")));
    }
    let tags = tagger.tag(&words);
    let (word_index, span) = tokens
        .word_spans
        .iter()
        .enumerate()
        .zip(tags)
        .find(|(_, tag)| tag.is_noun())
        .map(|(found, _)| found)
        .ok_or_else(|| Error::NoMaskableWord(text.to_string()))?;
    Ok(RemovedWord {
        word: span.word.clone(),
        word_index,
        token_position: span.start,
        token_count: span.count,
    })
}

/// Deletes the removed word's token span and re-pads.
pub fn mask_text(tokens: &TokenSequence, removed: &RemovedWord) -> Result<TokenSequence> {
    let span = tokens.word_spans.get(removed.word_index).ok_or_else(|| {
        Error::InvalidInput(format!("word index {} outside caption", removed.word_index))
    })?;
    if span.start != removed.token_position
        || span.count != removed.token_count
        || removed.token_count == 0
        || removed.token_position + removed.token_count >= tokens.length
    {
        return Err(Error::InvalidInput(format!(
            "removed span {}..+{} does not match the sequence",
            removed.token_position, removed.token_count
        )));
    }
    let (start, count) = (removed.token_position, removed.token_count);
    let mut ids = tokens.ids.clone();
    ids.drain(start..start + count);
    ids.resize(tokens.ids.len(), tokens.specials.pad);
    let word_spans = tokens
        .word_spans
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != removed.word_index)
        .map(|(_, s)| WordSpan {
            word: s.word.clone(),
            start: if s.start > start { s.start - count } else { s.start },
            count: s.count,
        })
        .collect();
    Ok(TokenSequence {
        ids,
        length: tokens.length - count,
        word_spans,
        truncated: tokens.truncated,
        specials: tokens.specials,
    })
}

/// `relevant = score >= tau`.
pub fn split_masks<T: Scalar>(map: &RelevanceMap<T>, tau: f64) -> Result<BinaryMasks> {
    check_tau(tau)?;
    let tau = T::lit(tau);
    Ok(BinaryMasks::from_relevant(map.scores.mapv(|s| u8::from(s >= tau))))
}

pub fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("mask.tau must lie in [0, 1], got {tau}")));
    }
    Ok(())
}

/// Patch-wise mix: relevant patches from `own`, the rest from `partner`.
pub fn mix_images<T: Scalar>(own: ArrayView3<T>, partner: ArrayView3<T>, masks: &BinaryMasks) -> Result<Image<T>> {
    if own.shape() != partner.shape() {
        return Err(Error::InvalidInput(format!(
            "image shapes differ: {:?} vs {:?}",
            own.shape(),
            partner.shape()
        )));
    }
    let p = masks.grid();
    let (h, w) = (own.shape()[0], own.shape()[1]);
    if p == 0 || masks.relevant.ncols() != p || h % p != 0 || w % p != 0 {
        return Err(Error::InvalidInput(format!(
            "{h}x{w} image cannot be split into a {p}x{p} patch grid"
        )));
    }
    let (ph, pw) = (h / p, w / p);
    let mut out = partner.to_owned();
    for ((r, c), &keep) in masks.relevant.indexed_iter() {
        if keep == 1 {
            let rows = r * ph..(r + 1) * ph;
            let cols = c * pw..(c + 1) * pw;
            out.slice_mut(ndarray::s![rows.clone(), cols.clone(), ..])
                .assign(&own.slice(ndarray::s![rows, cols, ..]));
        }
    }
    Ok(out)
}

/// Uniform random derangement of `0..n` (identity for `n == 1`).
pub fn assign_partners(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    if n < 2 {
        return perm;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// Why a sample was left out of a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SkipReason {
    NoMaskableWord,
    RelevanceUnavailable(String),
    InvalidCaption(String),
}

impl SkipReason {
    pub fn code(&self) -> &'static str {
        match self {
            Self::NoMaskableWord => "no_noun",
            Self::RelevanceUnavailable(_) => "relevance_unavailable",
            Self::InvalidCaption(_) => "invalid_caption",
        }
    }

    fn classify(err: Error) -> Result<Self> {
        match err {
            Error::NoMaskableWord(_) => Ok(Self::NoMaskableWord),
            Error::RelevanceUnavailable(m) => Ok(Self::RelevanceUnavailable(m)),
            Error::InvalidInput(m) => Ok(Self::InvalidCaption(m)),
            other => Err(other),
        }
    }
}

/// Per-sample masking result before partners are known.
#[derive(Debug, Clone)]
pub struct PreparedSample<T> {
    pub tokens: TokenSequence,
    pub removed: RemovedWord,
    pub masked_tokens: TokenSequence,
    pub relevance: RelevanceMap<T>,
    pub masks: BinaryMasks,
}

#[derive(Debug, Clone)]
pub struct BatchMasking<T> {
    pub bundles: Vec<MaskedPairBundle<T>>,
    pub skipped: Vec<(usize, SkipReason)>,
}

/// Masking pipeline bound to a backbone, tagger and relevance provider.
pub struct Masker<'a, T: Scalar> {
    backbone: &'a dyn Backbone<T>,
    tagger: &'a dyn PosTagger,
    relevance: &'a dyn RelevanceProvider<T>,
    tau: f64,
}

impl<'a, T: Scalar> Masker<'a, T> {
    pub fn new(
        backbone: &'a dyn Backbone<T>,
        tagger: &'a dyn PosTagger,
        relevance: &'a dyn RelevanceProvider<T>,
        tau: f64,
    ) -> Result<Self> {
        check_tau(tau)?;
        let res = backbone.dims().resolution;
        let grid = relevance.grid();
        if grid == 0 || res % grid != 0 {
            return Err(Error::Config(format!(
                "relevance grid {grid} does not divide the {res}px backbone resolution"
            )));
        }
        Ok(Self { backbone, tagger, relevance, tau })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn prepare(&self, caption: &str, image: ArrayView3<T>) -> Result<PreparedSample<T>> {
        let tokens = self.backbone.tokenize(caption)?;
        let removed = select_first_noun(caption, &tokens, self.tagger)?;
        let masked_tokens = mask_text(&tokens, &removed)?;
        let relevance = self.relevance.relevance_map(image, &removed.word)?;
        let masks = split_masks(&relevance, self.tau)?;
        Ok(PreparedSample { tokens, removed, masked_tokens, relevance, masks })
    }

    /// Masks a batch. Unmaskable samples are skipped and partners are drawn
    /// among the remaining ones.
    pub fn mask_batch(&self, images: &ImageBatch<T>, captions: &[String], seed: u64) -> Result<BatchMasking<T>> {
        if images.len() != captions.len() {
            return Err(Error::dims("captions per image batch", images.len(), captions.len()));
        }
        let prepared: Vec<Result<PreparedSample<T>>> = captions
            .par_iter()
            .enumerate()
            .map(|(i, c)| self.prepare(c, images.image(i)))
            .collect();
        let mut usable = Vec::new();
        let mut skipped = Vec::new();
        for (i, p) in prepared.into_iter().enumerate() {
            match p {
                Ok(p) => usable.push((i, p)),
                Err(e) => skipped.push((i, SkipReason::classify(e)?)),
            }
        }
        let perm = assign_partners(usable.len(), seed);
        let order: Vec<usize> = usable.iter().map(|(i, _)| *i).collect();
        let bundles = usable
            .into_iter()
            .zip(perm)
            .map(|((index, p), slot)| {
                let partner_index = order[slot];
                let masked_image = mix_images(images.image(index), images.image(partner_index), &p.masks)?;
                Ok(MaskedPairBundle {
                    index,
                    masked_image,
                    masked_tokens: p.masked_tokens,
                    removed: p.removed,
                    partner_index,
                    relevance: p.relevance,
                    masks: p.masks,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BatchMasking { bundles, skipped })
    }
}

/// Stacks masked images into a batch in bundle order.
pub fn masked_batch<T: Scalar>(bundles: &[MaskedPairBundle<T>]) -> Result<ImageBatch<T>> {
    let views: Vec<_> = bundles.iter().map(|b| b.masked_image.view().insert_axis(Axis(0))).collect();
    let stacked = ndarray::concatenate(Axis(0), &views)
        .map_err(|e| Error::InvalidInput(format!("cannot stack masked images: {e}")))?;
    ImageBatch::new(stacked)
}
