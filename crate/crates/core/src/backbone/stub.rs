//! Tiny seeded backbone for running the full pipeline without downloads.
//!
//! Image side: an affine map of the flattened pixels. Text side: positional
//! embeddings are added, each row goes through `tanh(A x + a)`, rows up to the
//! end symbol are mean-pooled and projected with `B`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{weights_digest, Backbone, BackboneDims, Preprocessing, StubTokenizer, TextBackward, Tokenizer};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StubConfig {
    pub dim: usize,
    pub context_length: usize,
    pub resolution: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            context_length: 16,
            resolution: 8,
            vocab_size: 512,
            seed: 0,
        }
    }
}

impl StubConfig {
    pub fn dims(&self) -> BackboneDims {
        BackboneDims {
            resolution: self.resolution,
            image_dim: self.dim,
            token_dim: self.dim,
            context_length: self.context_length,
        }
    }
}

pub struct StubBackbone<T> {
    config: StubConfig,
    tokenizer: StubTokenizer,
    table: Array2<T>,
    positions: Array2<T>,
    mix: Array2<T>,
    mix_bias: Array1<T>,
    text_proj: Array2<T>,
    image_proj: Array2<T>,
    image_bias: Array1<T>,
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<T> {
    Array2::from_shape_simple_fn(shape, || T::lit(rng.gen_range(-1.0..1.0) * scale))
}

impl<T: Scalar> StubBackbone<T> {
    /// Stub logit scale (inverse of a 0.07 temperature).
    pub const LOGIT_SCALE: f64 = 1.0 / 0.07;

    pub fn new(config: StubConfig) -> Self {
        let d = config.dim;
        let pixels = config.resolution * config.resolution * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let table = uniform(&mut rng, (config.vocab_size, d), 1.0);
        let positions = uniform(&mut rng, (config.context_length, d), 0.1);
        let mix = uniform(&mut rng, (d, d), (3.0 / d as f64).sqrt());
        let mix_bias = uniform(&mut rng, (1, d), 0.1).row(0).to_owned();
        let text_proj = uniform(&mut rng, (d, d), (3.0 / d as f64).sqrt());
        let image_proj = uniform(&mut rng, (d, pixels), (3.0 / pixels as f64).sqrt());
        let image_bias = uniform(&mut rng, (1, d), 0.5).row(0).to_owned();
        Self {
            tokenizer: StubTokenizer::new(config.context_length, config.vocab_size),
            config,
            table,
            positions,
            mix,
            mix_bias,
            text_proj,
            image_proj,
            image_bias,
        }
    }

    pub fn config(&self) -> &StubConfig {
        &self.config
    }

    /// Rows `0..=end` after positional encoding and the tanh mixing.
    fn hidden(&self, rows: ArrayView2<T>, end: usize) -> Array2<T> {
        let x = &rows.slice(s![..=end, ..]) + &self.positions.slice(s![..=end, ..]);
        let mut h = x.dot(&self.mix.t()) + &self.mix_bias;
        h.mapv_inplace(|v| v.tanh());
        h
    }

    fn check_end(&self, rows: ArrayView2<T>, end: usize) -> Result<()> {
        if end >= rows.nrows() || end >= self.config.context_length {
            return Err(Error::InvalidInput(format!(
                "end position {end} outside context {}",
                self.config.context_length
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> Backbone<T> for StubBackbone<T> {
    fn name(&self) -> &str {
        "stub"
    }

    fn dims(&self) -> BackboneDims {
        self.config.dims()
    }

    fn preprocessing(&self) -> Preprocessing {
        Preprocessing {
            resolution: self.config.resolution,
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.tokenizer
    }

    fn logit_scale(&self) -> T {
        T::lit(Self::LOGIT_SCALE)
    }

    fn token_embedding(&self, id: u32) -> ArrayView1<'_, T> {
        self.table.row(id as usize)
    }

    fn image_forward(&self, image: ArrayView3<T>) -> Result<Array1<T>> {
        let flat = image.iter().copied().collect::<Array1<T>>();
        if flat.len() != self.image_proj.ncols() {
            return Err(Error::Config(format!(
                "stub backbone expects {0}x{0}x3 images",
                self.config.resolution
            )));
        }
        Ok(self.image_proj.dot(&flat) + &self.image_bias)
    }

    fn text_forward(&self, rows: ArrayView2<T>, end_position: usize) -> Result<Array1<T>> {
        self.check_end(rows, end_position)?;
        let h = self.hidden(rows, end_position);
        let pooled = h.mean_axis(ndarray::Axis(0)).expect("non-empty");
        Ok(self.text_proj.dot(&pooled))
    }

    fn text_forward_traced(
        &self,
        rows: ArrayView2<T>,
        end_position: usize,
    ) -> Result<(Array1<T>, TextBackward<'_, T>)> {
        self.check_end(rows, end_position)?;
        let h = self.hidden(rows, end_position);
        let pooled = h.mean_axis(ndarray::Axis(0)).expect("non-empty");
        let out = self.text_proj.dot(&pooled);
        let context = rows.nrows();
        let backward = move |d_out: ArrayView1<T>| -> Array2<T> {
            let count = T::lit((end_position + 1) as f64);
            let d_pooled = self.text_proj.t().dot(&d_out) / count;
            let d_pre = h.mapv(|v| T::one() - v * v) * &d_pooled;
            let mut grad = Array2::zeros((context, self.config.dim));
            grad.slice_mut(s![..=end_position, ..])
                .assign(&d_pre.dot(&self.mix));
            grad
        };
        Ok((out, Box::new(backward)))
    }

    fn weights_checksum(&self) -> String {
        weights_digest([
            self.table.view().into_dyn(),
            self.positions.view().into_dyn(),
            self.mix.view().into_dyn(),
            self.mix_bias.view().into_dyn(),
            self.text_proj.view().into_dyn(),
            self.image_proj.view().into_dyn(),
            self.image_bias.view().into_dyn(),
        ])
    }
}
