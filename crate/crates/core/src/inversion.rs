//! Textual inversion network and composed-query construction.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Ix1, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::tokenizer::split_words;
use crate::backbone::{Backbone, EmbeddedSequence, FeatureBatch, TokenSequence};
use crate::nn::{gelu, gelu_grad, layer_norm, layer_norm_backward, layer_norm_backward_params, linear, LayerNormCache};
use crate::optim::Params;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub output_dim: usize,
    /// Dropout after each hidden activation; 0 disables it.
    pub dropout: f64,
    /// Layer norm before each hidden activation.
    pub layer_norm: bool,
    pub seed: u64,
}

impl InversionConfig {
    /// Hidden width `4·output_dim` when unset.
    pub fn new(input_dim: usize, output_dim: usize, hidden: Option<usize>, seed: u64) -> Self {
        Self {
            input_dim,
            hidden: hidden.unwrap_or(4 * output_dim),
            output_dim,
            dropout: 0.0,
            layer_norm: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.output_dim == 0 {
            return Err(Error::Config(format!("inversion widths must be positive: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("inversion.dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Three fully connected layers with GELU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionNetwork<T> {
    pub config: InversionConfig,
    pub params: Params<T>,
}

struct HiddenCache<T> {
    input: Array2<T>,
    pre: Array2<T>,
    ln: Option<LayerNormCache<T>>,
    mask: Option<Array2<T>>,
}

/// Activations kept for the backward pass.
pub struct InversionCache<T> {
    hidden: Vec<HiddenCache<T>>,
    last_input: Array2<T>,
}

const LAYERS: [&str; 3] = ["fc1", "fc2", "fc3"];

impl<T: Scalar> InversionNetwork<T> {
    /// Fan-in scaled uniform init, `U(-1/√fan_in, 1/√fan_in)`.
    pub fn new(config: InversionConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let widths = [config.input_dim, config.hidden, config.hidden, config.output_dim];
        let mut params = Params::new();
        for (k, name) in LAYERS.iter().enumerate() {
            let (fan_in, fan_out) = (widths[k], widths[k + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = Array2::from_shape_simple_fn((fan_out, fan_in), || T::lit(rng.gen_range(-bound..bound)));
            let b = Array1::from_shape_simple_fn(fan_out, || T::lit(rng.gen_range(-bound..bound)));
            params.push(format!("{name}.weight"), w.into_dyn());
            params.push(format!("{name}.bias"), b.into_dyn());
            if config.layer_norm && k < 2 {
                params.push(format!("ln{}.weight", k + 1), Array1::<T>::ones(fan_out).into_dyn());
                params.push(format!("ln{}.bias", k + 1), Array1::<T>::zeros(fan_out).into_dyn());
            }
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a network from stored parameters, checking names and shapes.
    pub fn from_params(config: InversionConfig, params: Params<T>) -> Result<Self> {
        let template = Self::new(InversionConfig { seed: 0, ..config.clone() })?;
        template.params.check_same_layout(&params)?;
        Ok(Self { config, params })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    fn matrix(&self, name: &str) -> ArrayView2<'_, T> {
        self.params.get(name).expect("known parameter").view().into_dimensionality::<Ix2>().expect("matrix")
    }

    fn vector(&self, name: &str) -> ArrayView1<'_, T> {
        self.params.get(name).expect("known parameter").view().into_dimensionality::<Ix1>().expect("vector")
    }

    fn check_input(&self, x: ArrayView2<T>) -> Result<()> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::dims("inversion input width", self.config.input_dim, x.ncols()));
        }
        Ok(())
    }

    /// Deterministic forward pass (no dropout).
    pub fn forward(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_input(x)?;
        Ok(self.run(x, None).0)
    }

    /// Forward pass with dropout drawn from `rng`, keeping activations for backward.
    pub fn forward_train(&self, x: ArrayView2<T>, rng: &mut ChaCha8Rng) -> Result<(Array2<T>, InversionCache<T>)> {
        self.check_input(x)?;
        Ok(self.run(x, Some(rng)))
    }

    fn run(&self, x: ArrayView2<T>, mut rng: Option<&mut ChaCha8Rng>) -> (Array2<T>, InversionCache<T>) {
        let mut h = x.to_owned();
        let mut hidden = Vec::with_capacity(2);
        for k in 0..2 {
            let name = LAYERS[k];
            let z = linear(h.view(), self.matrix(&format!("{name}.weight")), Some(self.vector(&format!("{name}.bias"))));
            let (pre, ln) = if self.config.layer_norm {
                let (y, cache) = layer_norm(
                    z.view(),
                    self.vector(&format!("ln{}.weight", k + 1)),
                    self.vector(&format!("ln{}.bias", k + 1)),
                );
                (y, Some(cache))
            } else {
                (z, None)
            };
            let mut a = pre.mapv(gelu);
            let p = self.config.dropout;
            let mask = match rng.as_deref_mut() {
                Some(r) if p > 0.0 => {
                    let keep = T::lit(1.0 / (1.0 - p));
                    let m = Array2::from_shape_simple_fn(a.raw_dim(), || if r.gen::<f64>() < p { T::zero() } else { keep });
                    a *= &m;
                    Some(m)
                }
                _ => None,
            };
            hidden.push(HiddenCache { input: h, pre, ln, mask });
            h = a;
        }
        let y = linear(h.view(), self.matrix("fc3.weight"), Some(self.vector("fc3.bias")));
        (y, InversionCache { hidden, last_input: h })
    }

    /// Parameter gradients for output cotangent `dy`.
    pub fn backward(&self, cache: &InversionCache<T>, dy: ArrayView2<T>) -> Params<T> {
        let mut grads = self.params.zeros_like();
        let mut set = |name: &str, g: ndarray::ArrayD<T>| {
            let i = grads.names.iter().position(|n| n == name).expect("known parameter");
            grads.tensors[i] = g;
        };
        set("fc3.weight", dy.t().dot(&cache.last_input).into_dyn());
        set("fc3.bias", dy.sum_axis(ndarray::Axis(0)).into_dyn());
        let mut d = dy.dot(&self.matrix("fc3.weight"));
        for k in (0..2).rev() {
            let c = &cache.hidden[k];
            if let Some(m) = &c.mask {
                d *= m;
            }
            let mut dpre = d;
            ndarray::Zip::from(&mut dpre).and(&c.pre).for_each(|g, &z| *g = *g * gelu_grad(z));
            let dz = match &c.ln {
                Some(ln) => {
                    let gamma = self.vector(&format!("ln{}.weight", k + 1));
                    let (dg, db) = layer_norm_backward_params(dpre.view(), ln);
                    set(&format!("ln{}.weight", k + 1), dg.into_dyn());
                    set(&format!("ln{}.bias", k + 1), db.into_dyn());
                    layer_norm_backward(dpre.view(), gamma, ln)
                }
                None => dpre,
            };
            let name = LAYERS[k];
            set(&format!("{name}.weight"), dz.t().dot(&c.input).into_dyn());
            set(&format!("{name}.bias"), dz.sum_axis(ndarray::Axis(0)).into_dyn());
            d = dz.dot(&self.matrix(&format!("{name}.weight")));
        }
        grads
    }
}

/// Pseudo words `φ(f)` for a feature batch, one row per sample.
pub fn invert<T: Scalar>(features: &FeatureBatch<T>, net: &InversionNetwork<T>) -> Result<Array2<T>> {
    net.forward(features.vectors.view())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuerySource {
    MaskedPair,
    Prompt,
    Inference,
}

/// Embedded sequence with one pseudo-word row.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedQuery<T> {
    pub embedded: EmbeddedSequence<T>,
    pub pseudo_position: usize,
    pub source: QuerySource,
}

impl<T> ComposedQuery<T> {
    pub fn end_position(&self) -> usize {
        self.embedded.length - 1
    }
}

fn splice<T: Scalar>(
    backbone: &dyn Backbone<T>,
    tokens: &TokenSequence,
    pseudo: ArrayView1<T>,
    position: usize,
    source: QuerySource,
) -> Result<ComposedQuery<T>> {
    let dims = backbone.dims();
    if pseudo.len() != dims.token_dim {
        return Err(Error::dims("pseudo word width", dims.token_dim, pseudo.len()));
    }
    if tokens.length + 1 > tokens.context_length() {
        return Err(Error::QueryTooLong { length: tokens.length + 1, context: tokens.context_length() });
    }
    if position == 0 || position > tokens.end_position() {
        return Err(Error::InvalidInput(format!(
            "pseudo position {position} outside 1..={}",
            tokens.end_position()
        )));
    }
    let base = backbone.embed_tokens(tokens)?;
    let ctx = tokens.context_length();
    let mut embeddings = Array2::zeros(base.embeddings.raw_dim());
    embeddings.slice_mut(s![..position, ..]).assign(&base.embeddings.slice(s![..position, ..]));
    embeddings.row_mut(position).assign(&pseudo);
    embeddings.slice_mut(s![position + 1.., ..]).assign(&base.embeddings.slice(s![position..ctx - 1, ..]));
    Ok(ComposedQuery {
        embedded: EmbeddedSequence { embeddings, length: tokens.length + 1 },
        pseudo_position: position,
        source,
    })
}

/// Inserts `pseudo` where the removed word used to start; the sequence grows by one row.
pub fn compose_query<T: Scalar>(
    backbone: &dyn Backbone<T>,
    masked_tokens: &TokenSequence,
    pseudo: ArrayView1<T>,
    position: usize,
) -> Result<ComposedQuery<T>> {
    splice(backbone, masked_tokens, pseudo, position, QuerySource::MaskedPair)
}

pub const PROMPT_TEMPLATE: &str = "a photo of";

/// "a photo of *".
pub fn build_prompt_query<T: Scalar>(backbone: &dyn Backbone<T>, pseudo: ArrayView1<T>) -> Result<ComposedQuery<T>> {
    let tokens = backbone.tokenize(PROMPT_TEMPLATE)?;
    let position = tokens.end_position();
    splice(backbone, &tokens, pseudo, position, QuerySource::Prompt)
}

fn inference_words(query_text: &str) -> (Vec<String>, usize) {
    let mut words = split_words(PROMPT_TEMPLATE);
    let slot_word = words.len();
    words.push(",".into());
    words.extend(split_words(query_text));
    (words, slot_word)
}

/// "a photo of * , <query_text>".
pub fn build_inference_query<T: Scalar>(
    backbone: &dyn Backbone<T>,
    pseudo: ArrayView1<T>,
    query_text: &str,
) -> Result<ComposedQuery<T>> {
    let tokenizer = backbone.tokenizer();
    let (words, slot_word) = inference_words(query_text);
    let needed = 3 + words.iter().map(|w| tokenizer.encode_word(w).len()).sum::<usize>();
    let ctx = tokenizer.context_length();
    if needed > ctx {
        return Err(Error::QueryTooLong { length: needed, context: ctx });
    }
    let tokens = tokenizer.tokenize_words(&words);
    let position = tokens.word_spans[slot_word].start;
    splice(backbone, &tokens, pseudo, position, QuerySource::Inference)
}

/// Like [`build_inference_query`] but drops trailing query words until it fits.
/// The flag reports whether anything was dropped.
pub fn build_inference_query_fitted<T: Scalar>(
    backbone: &dyn Backbone<T>,
    pseudo: ArrayView1<T>,
    query_text: &str,
) -> Result<(ComposedQuery<T>, bool)> {
    let mut words = split_words(query_text);
    let mut dropped = false;
    loop {
        match build_inference_query(backbone, pseudo, &words.join(" ")) {
            Err(Error::QueryTooLong { .. }) if !words.is_empty() => {
                words.pop();
                dropped = true;
            }
            other => return other.map(|q| (q, dropped)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{StubBackbone, StubConfig};
    use crate::masking::{mask_text, select_first_noun, LexiconTagger};
    use ndarray::Array2;

    fn stub() -> StubBackbone<f64> {
        StubBackbone::new(StubConfig::default())
    }

    fn net(layer_norm: bool, dropout: f64) -> InversionNetwork<f64> {
        let mut c = InversionConfig::new(16, 16, None, 11);
        c.layer_norm = layer_norm;
        c.dropout = dropout;
        InversionNetwork::new(c).unwrap()
    }

    fn close(a: ArrayView1<f64>, b: ArrayView1<f64>, tol: f64) -> bool {
        a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn default_hidden_is_four_times_output() {
        let n = net(false, 0.0);
        assert_eq!(n.config.hidden, 64);
        assert_eq!(InversionConfig::new(768, 768, None, 0).hidden, 3072);
        assert_eq!(n.parameter_count(), 16 * 64 + 64 + 64 * 64 + 64 + 64 * 16 + 16);
    }

    #[test]
    fn zero_last_layer_gives_zero_word() {
        let mut n = net(false, 0.0);
        for name in ["fc3.weight", "fc3.bias"] {
            let i = n.params.names.iter().position(|x| x == name).unwrap();
            n.params.tensors[i].fill(0.0);
        }
        let x = Array2::from_elem((3, 16), 0.7);
        assert!(n.forward(x.view()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let e = net(false, 0.0).forward(Array2::zeros((2, 5)).view()).unwrap_err();
        assert!(e.is_config());
    }

    #[test]
    fn golden_output_for_seed() {
        let n = net(false, 0.0);
        let x = Array2::from_shape_fn((1, 16), |(_, j)| (j as f64 * 0.37).sin());
        let y = n.forward(x.view()).unwrap();
        let again = net(false, 0.0).forward(x.view()).unwrap();
        assert_eq!(y, again);
        for (got, want) in [y[[0, 0]], y[[0, 7]], y[[0, 15]]].iter().zip(GOLDEN) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    const GOLDEN: [f64; 3] = [0.06836660398182613, -0.01873655903480098, -0.017908231100910124];

    fn fd_check(n: &InversionNetwork<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array2::from_shape_simple_fn((3, 16), || rng.gen_range(-1.0..1.0));
        let probe = Array2::from_shape_simple_fn((3, 16), || rng.gen_range(-1.0..1.0));
        let (_, cache) = n.forward_train(x.view(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let grads = n.backward(&cache, probe.view());
        let f = |m: &InversionNetwork<f64>| {
            let (y, _) = m.forward_train(x.view(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            (&y * &probe).sum()
        };
        let h = 1e-4;
        for (t, g) in grads.tensors.iter().enumerate() {
            for idx in (0..g.len()).step_by(7) {
                let mut p = n.clone();
                p.params.tensors[t].as_slice_mut().unwrap()[idx] += h;
                let mut m = n.clone();
                m.params.tensors[t].as_slice_mut().unwrap()[idx] -= h;
                let num = (f(&p) - f(&m)) / (2.0 * h);
                let ana = g.as_slice().unwrap()[idx];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(rel < 1e-4, "{} [{idx}]: {num} vs {ana}", grads.names[t]);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        fd_check(&net(false, 0.0));
        fd_check(&net(true, 0.0));
        fd_check(&net(true, 0.3));
    }

    #[test]
    fn invert_is_permutation_equivariant() {
        let n = net(false, 0.0);
        let x = Array2::from_shape_fn((4, 16), |(i, j)| ((i * 16 + j) as f64).cos());
        let y = n.forward(x.view()).unwrap();
        let perm = [2, 0, 3, 1];
        let yp = n.forward(x.select(ndarray::Axis(0), &perm).view()).unwrap();
        for (k, &p) in perm.iter().enumerate() {
            assert!(close(yp.row(k), y.row(p), 1e-12));
        }
    }

    #[test]
    fn prompt_splice_identity() {
        let b = stub();
        let dog = b.tokenize("dog").unwrap().ids[1];
        let q = build_prompt_query(&b, b.token_embedding(dog)).unwrap();
        assert_eq!(q.pseudo_position, 4);
        let via = b.encode_embedded(&q.embedded, q.end_position()).unwrap();
        let plain = b.encode_text(&b.tokenize("a photo of dog").unwrap()).unwrap();
        assert!(close(via.row(0), plain.row(0), 1e-12));
    }

    #[test]
    fn prompts_differ_only_at_slot() {
        let b = stub();
        let (u, v) = (Array1::from_elem(16, 0.1), Array1::from_elem(16, -0.2));
        let (p, q) = (build_prompt_query(&b, u.view()).unwrap(), build_prompt_query(&b, v.view()).unwrap());
        for r in 0..16 {
            assert_eq!(p.embedded.embeddings.row(r) == q.embedded.embeddings.row(r), r != 4);
        }
    }

    #[test]
    fn masked_pair_splice_identity() {
        let b = stub();
        let caption = "a dog on grass";
        let tokens = b.tokenize(caption).unwrap();
        let removed = select_first_noun(caption, &tokens, &LexiconTagger).unwrap();
        let masked = mask_text(&tokens, &removed).unwrap();
        let pseudo = b.token_embedding(tokens.ids[removed.token_position]);
        let q = compose_query(&b, &masked, pseudo, removed.token_position).unwrap();
        assert_eq!(q.embedded, b.embed_tokens(&tokens).unwrap());
        let changed = compose_query(&b, &masked, Array1::zeros(16).view(), removed.token_position).unwrap();
        assert_ne!(
            b.encode_embedded(&changed.embedded, changed.end_position()).unwrap(),
            b.encode_text(&tokens).unwrap()
        );
    }

    #[test]
    fn empty_masked_text_gives_sos_pseudo_eos() {
        let b = stub();
        let tokens = b.tokenize("dog").unwrap();
        let removed = select_first_noun("dog", &tokens, &LexiconTagger).unwrap();
        let masked = mask_text(&tokens, &removed).unwrap();
        let pseudo = Array1::from_elem(16, 0.5);
        let q = compose_query(&b, &masked, pseudo.view(), 1).unwrap();
        assert_eq!(q.embedded.length, 3);
        assert_eq!(q.embedded.embeddings.row(1), pseudo);
        assert_eq!(q.embedded.embeddings.row(2), b.token_embedding(2));
    }

    #[test]
    fn full_context_is_too_long() {
        let b = stub();
        let long = vec!["dog"; 14].join(" ");
        let tokens = b.tokenize(&long).unwrap();
        assert_eq!(tokens.length, 16);
        let err = compose_query(&b, &tokens, Array1::zeros(16).view(), 1).unwrap_err();
        assert!(matches!(err, Error::QueryTooLong { length: 17, context: 16 }));
    }

    #[test]
    fn inference_query_layout() {
        let b = stub();
        let pseudo = Array1::from_elem(16, 0.3);
        let q = build_inference_query(&b, pseudo.view(), "is pulling a carriage").unwrap();
        assert_eq!(q.pseudo_position, 4);
        let r = build_inference_query(&b, pseudo.view(), "is red").unwrap();
        for row in 0..=4 {
            assert_eq!(q.embedded.embeddings.row(row), r.embedded.embeddings.row(row));
        }
        let empty = build_inference_query(&b, pseudo.view(), "").unwrap();
        let prompt = build_prompt_query(&b, pseudo.view()).unwrap();
        assert_eq!(empty.embedded.length, prompt.embedded.length + 1);
        let comma = b.tokenize(",").unwrap().ids[1];
        assert_eq!(empty.embedded.embeddings.row(5), b.token_embedding(comma));
        let dog = b.tokenize("dog").unwrap().ids[1];
        let spliced = build_inference_query(&b, b.token_embedding(dog), "").unwrap();
        let via = b.encode_embedded(&spliced.embedded, spliced.end_position()).unwrap();
        let plain = b.encode_text(&b.tokenize("a photo of dog ,").unwrap()).unwrap();
        assert!(close(via.row(0), plain.row(0), 1e-12));
    }

    #[test]
    fn long_inference_text_is_fitted() {
        let b = stub();
        let pseudo = Array1::from_elem(16, 0.3);
        let text = vec!["red"; 20].join(" ");
        assert!(matches!(build_inference_query(&b, pseudo.view(), &text), Err(Error::QueryTooLong { .. })));
        let (q, dropped) = build_inference_query_fitted(&b, pseudo.view(), &text).unwrap();
        assert!(dropped);
        assert_eq!(q.embedded.length, 16);
    }
}
