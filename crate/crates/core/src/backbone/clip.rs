//! CLIP dual encoder (ViT image tower, causal text transformer).
//!
//! Weights load from a Hugging Face style `model.safetensors`. The text tower
//! carries a hand-written backward pass w.r.t. its input rows; that is all the
//! training loop needs since the backbone stays frozen.

use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, ArrayD, ArrayView1, ArrayView2, ArrayView3, ArrayViewD, Axis, Ix1, Ix2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safetensors::{Dtype, SafeTensors};

use super::{
    weights_digest, Backbone, BackboneDims, ClipTokenizer, Preprocessing, TextBackward, Tokenizer,
};
use crate::nn::{
    l2_normalize, l2_normalize_backward, layer_norm, layer_norm_backward, linear,
    linear_backward_input, quick_gelu, quick_gelu_grad, softmax_rows, LayerNormCache,
};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TowerConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipConfig {
    pub name: String,
    pub embed_dim: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub vision: TowerConfig,
    pub text: TowerConfig,
    pub context_length: usize,
    pub vocab_size: usize,
}

impl ClipConfig {
    pub fn vit_l_14() -> Self {
        Self {
            name: "vit-l-14".into(),
            embed_dim: 768,
            image_size: 224,
            patch_size: 14,
            vision: TowerConfig { width: 1024, layers: 24, heads: 16, mlp_width: 4096 },
            text: TowerConfig { width: 768, layers: 12, heads: 12, mlp_width: 3072 },
            context_length: 77,
            vocab_size: 49408,
        }
    }

    pub fn vit_b_32() -> Self {
        Self {
            name: "vit-b-32".into(),
            embed_dim: 512,
            image_size: 224,
            patch_size: 32,
            vision: TowerConfig { width: 768, layers: 12, heads: 12, mlp_width: 3072 },
            text: TowerConfig { width: 512, layers: 12, heads: 8, mlp_width: 2048 },
            context_length: 77,
            vocab_size: 49408,
        }
    }

    /// Patches per image side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn dims(&self) -> BackboneDims {
        BackboneDims {
            resolution: self.image_size,
            image_dim: self.embed_dim,
            token_dim: self.text.width,
            context_length: self.context_length,
        }
    }
}

struct Block<T> {
    ln1: (Array1<T>, Array1<T>),
    q: (Array2<T>, Array1<T>),
    k: (Array2<T>, Array1<T>),
    v: (Array2<T>, Array1<T>),
    out: (Array2<T>, Array1<T>),
    ln2: (Array1<T>, Array1<T>),
    fc1: (Array2<T>, Array1<T>),
    fc2: (Array2<T>, Array1<T>),
}

struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    ln2: LayerNormCache<T>,
    pre_act: Array2<T>,
}

impl<T: Scalar> Block<T> {
    fn forward(&self, x: &Array2<T>, heads: usize, causal: bool) -> (Array2<T>, BlockCache<T>) {
        let (h1, ln1) = layer_norm(x.view(), self.ln1.0.view(), self.ln1.1.view());
        let q = linear(h1.view(), self.q.0.view(), Some(self.q.1.view()));
        let k = linear(h1.view(), self.k.0.view(), Some(self.k.1.view()));
        let v = linear(h1.view(), self.v.0.view(), Some(self.v.1.view()));
        let (concat, probs) = attend(&q, &k, &v, heads, causal);
        let a = linear(concat.view(), self.out.0.view(), Some(self.out.1.view()));
        let x2 = x + &a;
        let (h2, ln2) = layer_norm(x2.view(), self.ln2.0.view(), self.ln2.1.view());
        let pre_act = linear(h2.view(), self.fc1.0.view(), Some(self.fc1.1.view()));
        let act = pre_act.mapv(quick_gelu);
        let f2 = linear(act.view(), self.fc2.0.view(), Some(self.fc2.1.view()));
        let y = x2 + f2;
        (y, BlockCache { ln1, q, k, v, probs, ln2, pre_act })
    }

    /// Gradient w.r.t. the block input given the gradient w.r.t. its output.
    fn backward(&self, cache: &BlockCache<T>, dy: &Array2<T>, heads: usize) -> Array2<T> {
        let d_act = linear_backward_input(dy.view(), self.fc2.0.view());
        let d_pre = &d_act * &cache.pre_act.mapv(quick_gelu_grad);
        let d_h2 = linear_backward_input(d_pre.view(), self.fc1.0.view());
        let dx2 = dy + &layer_norm_backward(d_h2.view(), self.ln2.0.view(), &cache.ln2);

        let d_concat = linear_backward_input(dx2.view(), self.out.0.view());
        let width = cache.q.ncols();
        let head_dim = width / heads;
        let scale = T::one() / T::lit(head_dim as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for (h, p) in cache.probs.iter().enumerate() {
            let cols = s![.., h * head_dim..(h + 1) * head_dim];
            let d_o = d_concat.slice(cols);
            let v_h = cache.v.slice(cols);
            let d_p = d_o.dot(&v_h.t());
            dv.slice_mut(cols).assign(&p.t().dot(&d_o));
            let row_dot = (&d_p * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let d_s = (p * &(&d_p - &row_dot)).mapv(|x| x * scale);
            dq.slice_mut(cols).assign(&d_s.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&d_s.t().dot(&cache.q.slice(cols)));
        }
        let d_h1 = linear_backward_input(dq.view(), self.q.0.view())
            + linear_backward_input(dk.view(), self.k.0.view())
            + linear_backward_input(dv.view(), self.v.0.view());
        dx2 + layer_norm_backward(d_h1.view(), self.ln1.0.view(), &cache.ln1)
    }
}

/// Multi-head scaled dot-product attention; returns concatenated head outputs
/// and per-head probability matrices.
fn attend<T: Scalar>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    heads: usize,
    causal: bool,
) -> (Array2<T>, Vec<Array2<T>>) {
    let (len, width) = q.dim();
    let head_dim = width / heads;
    let scale = T::one() / T::lit(head_dim as f64).sqrt();
    let mut concat = Array2::zeros((len, width));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * head_dim..(h + 1) * head_dim];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()).mapv(|x| x * scale);
        if causal {
            for i in 0..len {
                for j in i + 1..len {
                    scores[[i, j]] = T::neg_infinity();
                }
            }
        }
        softmax_rows(&mut scores);
        concat.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    (concat, probs)
}

pub struct ClipModel<T> {
    config: ClipConfig,
    token_embedding: Array2<T>,
    text_positions: Array2<T>,
    text_blocks: Vec<Block<T>>,
    final_ln: (Array1<T>, Array1<T>),
    text_projection: Array2<T>,
    class_embedding: Array1<T>,
    /// `[width, 3·p·p]`, flattened in (channel, row, column) order.
    patch_weight: Array2<T>,
    vision_positions: Array2<T>,
    pre_ln: (Array1<T>, Array1<T>),
    vision_blocks: Vec<Block<T>>,
    post_ln: (Array1<T>, Array1<T>),
    visual_projection: Array2<T>,
    logit_scale: T,
}

/// Supplies a named tensor of the requested shape.
type TensorSource<'a, T> = dyn FnMut(&str, &[usize]) -> Result<ArrayD<T>> + 'a;

fn take<T: Scalar, D: ndarray::Dimension>(src: &mut TensorSource<'_, T>, name: &str, shape: &[usize]) -> Result<ndarray::Array<T, D>> {
    let arr = src(name, shape)?;
    if arr.shape() != shape {
        return Err(Error::dims(name, format!("{shape:?}"), format!("{:?}", arr.shape())));
    }
    arr.into_dimensionality::<D>()
        .map_err(|e| Error::dims(name, format!("{shape:?}"), e.to_string()))
}

fn take1<T: Scalar>(src: &mut TensorSource<'_, T>, name: &str, n: usize) -> Result<Array1<T>> {
    take::<T, Ix1>(src, name, &[n])
}

fn take2<T: Scalar>(src: &mut TensorSource<'_, T>, name: &str, r: usize, c: usize) -> Result<Array2<T>> {
    take::<T, Ix2>(src, name, &[r, c])
}

fn load_block<T: Scalar>(src: &mut TensorSource<'_, T>, prefix: &str, tower: &TowerConfig) -> Result<Block<T>> {
    let w = tower.width;
    let m = tower.mlp_width;
    let lin = |src: &mut TensorSource<'_, T>, name: &str, out: usize, inp: usize| -> Result<(Array2<T>, Array1<T>)> {
        Ok((
            take2(src, &format!("{prefix}.{name}.weight"), out, inp)?,
            take1(src, &format!("{prefix}.{name}.bias"), out)?,
        ))
    };
    let ln = |src: &mut TensorSource<'_, T>, name: &str| -> Result<(Array1<T>, Array1<T>)> {
        Ok((
            take1(src, &format!("{prefix}.{name}.weight"), w)?,
            take1(src, &format!("{prefix}.{name}.bias"), w)?,
        ))
    };
    Ok(Block {
        ln1: ln(src, "layer_norm1")?,
        q: lin(src, "self_attn.q_proj", w, w)?,
        k: lin(src, "self_attn.k_proj", w, w)?,
        v: lin(src, "self_attn.v_proj", w, w)?,
        out: lin(src, "self_attn.out_proj", w, w)?,
        ln2: ln(src, "layer_norm2")?,
        fc1: lin(src, "mlp.fc1", m, w)?,
        fc2: lin(src, "mlp.fc2", w, m)?,
    })
}

impl<T: Scalar> ClipModel<T> {
    /// Assembles a model from a tensor source using Hugging Face parameter names.
    pub fn build(config: ClipConfig, src: &mut TensorSource<'_, T>) -> Result<Self> {
        let t = config.text;
        let v = config.vision;
        let grid = config.grid();
        let p = config.patch_size;
        let text_blocks = (0..t.layers)
            .map(|i| load_block(src, &format!("text_model.encoder.layers.{i}"), &t))
            .collect::<Result<Vec<_>>>()?;
        let vision_blocks = (0..v.layers)
            .map(|i| load_block(src, &format!("vision_model.encoder.layers.{i}"), &v))
            .collect::<Result<Vec<_>>>()?;
        let patch = take::<T, ndarray::Ix4>(src, "vision_model.embeddings.patch_embedding.weight", &[v.width, 3, p, p])?;
        let patch_weight = patch
            .into_shape_with_order((v.width, 3 * p * p))
            .map_err(|e| Error::dims("patch embedding", "contiguous", e.to_string()))?;
        let logit = take::<T, IxDyn>(src, "logit_scale", &[])?;
        Ok(Self {
            token_embedding: take2(src, "text_model.embeddings.token_embedding.weight", config.vocab_size, t.width)?,
            text_positions: take2(src, "text_model.embeddings.position_embedding.weight", config.context_length, t.width)?,
            text_blocks,
            final_ln: (
                take1(src, "text_model.final_layer_norm.weight", t.width)?,
                take1(src, "text_model.final_layer_norm.bias", t.width)?,
            ),
            text_projection: take2(src, "text_projection.weight", config.embed_dim, t.width)?,
            class_embedding: take1(src, "vision_model.embeddings.class_embedding", v.width)?,
            patch_weight,
            vision_positions: take2(src, "vision_model.embeddings.position_embedding.weight", grid * grid + 1, v.width)?,
            pre_ln: (
                take1(src, "vision_model.pre_layrnorm.weight", v.width)?,
                take1(src, "vision_model.pre_layrnorm.bias", v.width)?,
            ),
            vision_blocks,
            post_ln: (
                take1(src, "vision_model.post_layernorm.weight", v.width)?,
                take1(src, "vision_model.post_layernorm.bias", v.width)?,
            ),
            visual_projection: take2(src, "visual_projection.weight", config.embed_dim, v.width)?,
            logit_scale: logit.iter().next().copied().unwrap_or_else(T::zero).exp(),
            config,
        })
    }

    /// Randomly initialized model, used for tests and shape checks.
    pub fn random(config: ClipConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut src = |name: &str, shape: &[usize]| -> Result<ArrayD<T>> {
            let is_ln = name.contains("layer_norm") || name.contains("layrnorm") || name.contains("post_layernorm");
            if name == "logit_scale" {
                return Ok(ArrayD::from_elem(IxDyn(&[]), T::lit((1.0f64 / 0.07).ln())));
            }
            if is_ln && name.ends_with(".weight") {
                return Ok(ArrayD::from_shape_simple_fn(IxDyn(shape), || T::lit(1.0 + rng.gen_range(-0.1..0.1))));
            }
            let fan_in = if shape.len() >= 2 { shape[1..].iter().product::<usize>() } else { shape.first().copied().unwrap_or(1) };
            let scale = if name.ends_with(".bias") { 0.05 } else { (1.0 / fan_in as f64).sqrt() };
            Ok(ArrayD::from_shape_simple_fn(IxDyn(shape), || T::lit(rng.gen_range(-1.0..1.0) * scale)))
        };
        Self::build(config, &mut src).expect("random tensors have the requested shapes")
    }

    /// Loads `model.safetensors` (f32, f16 or bf16).
    pub fn load_safetensors(config: ClipConfig, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let tensors = SafeTensors::deserialize(&bytes).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut src = |name: &str, shape: &[usize]| -> Result<ArrayD<T>> {
            let view = tensors.tensor(name).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                message: format!("{name}: {e}"),
            })?;
            let data = view.data();
            let values: Vec<T> = match view.dtype() {
                Dtype::F32 => data.chunks_exact(4).map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect(),
                Dtype::F16 => data.chunks_exact(2).map(|c| T::lit(half::f16::from_le_bytes([c[0], c[1]]).to_f64())).collect(),
                Dtype::BF16 => data.chunks_exact(2).map(|c| T::lit(half::bf16::from_le_bytes([c[0], c[1]]).to_f64())).collect(),
                other => {
                    return Err(Error::Format {
                        path: path.to_path_buf(),
                        message: format!("{name}: unsupported dtype {other:?}"),
                    })
                }
            };
            // Some exports store logit_scale as shape [1].
            let stored: Vec<usize> = view.shape().to_vec();
            let target = if shape.is_empty() && stored.iter().product::<usize>() == 1 { shape.to_vec() } else { stored };
            ArrayD::from_shape_vec(IxDyn(&target), values)
                .map_err(|e| Error::dims(name, format!("{shape:?}"), e.to_string()))
        };
        Self::build(config, &mut src)
    }

    /// Every parameter in load order, keyed by its Hugging Face name.
    pub fn named_tensors(&self) -> Vec<(String, ArrayD<T>)> {
        let mut out: Vec<(String, ArrayD<T>)> = Vec::new();
        let mut push = |name: String, arr: ArrayViewD<T>| out.push((name, arr.to_owned()));
        let blocks = |push: &mut dyn FnMut(String, ArrayViewD<T>), prefix: &str, blocks: &[Block<T>]| {
            for (i, b) in blocks.iter().enumerate() {
                let p = format!("{prefix}.{i}");
                for (name, (w, bias)) in [("self_attn.q_proj", &b.q), ("self_attn.k_proj", &b.k), ("self_attn.v_proj", &b.v), ("self_attn.out_proj", &b.out), ("mlp.fc1", &b.fc1), ("mlp.fc2", &b.fc2)] {
                    push(format!("{p}.{name}.weight"), w.view().into_dyn());
                    push(format!("{p}.{name}.bias"), bias.view().into_dyn());
                }
                for (name, (g, beta)) in [("layer_norm1", &b.ln1), ("layer_norm2", &b.ln2)] {
                    push(format!("{p}.{name}.weight"), g.view().into_dyn());
                    push(format!("{p}.{name}.bias"), beta.view().into_dyn());
                }
            }
        };
        blocks(&mut push, "text_model.encoder.layers", &self.text_blocks);
        blocks(&mut push, "vision_model.encoder.layers", &self.vision_blocks);
        let p = self.config.patch_size;
        let patch = self.patch_weight.clone().into_shape_with_order((self.patch_weight.nrows(), 3, p, p)).expect("patch shape");
        push("vision_model.embeddings.patch_embedding.weight".into(), patch.view().into_dyn());
        push("text_model.embeddings.token_embedding.weight".into(), self.token_embedding.view().into_dyn());
        push("text_model.embeddings.position_embedding.weight".into(), self.text_positions.view().into_dyn());
        push("text_model.final_layer_norm.weight".into(), self.final_ln.0.view().into_dyn());
        push("text_model.final_layer_norm.bias".into(), self.final_ln.1.view().into_dyn());
        push("text_projection.weight".into(), self.text_projection.view().into_dyn());
        push("vision_model.embeddings.class_embedding".into(), self.class_embedding.view().into_dyn());
        push("vision_model.embeddings.position_embedding.weight".into(), self.vision_positions.view().into_dyn());
        push("vision_model.pre_layrnorm.weight".into(), self.pre_ln.0.view().into_dyn());
        push("vision_model.pre_layrnorm.bias".into(), self.pre_ln.1.view().into_dyn());
        push("vision_model.post_layernorm.weight".into(), self.post_ln.0.view().into_dyn());
        push("vision_model.post_layernorm.bias".into(), self.post_ln.1.view().into_dyn());
        push("visual_projection.weight".into(), self.visual_projection.view().into_dyn());
        let logit = ArrayD::from_elem(IxDyn(&[]), self.logit_scale.ln());
        push("logit_scale".into(), logit.view());
        out
    }

    /// Writes all parameters as f32 safetensors.
    pub fn save_safetensors(&self, path: &Path) -> Result<()> {
        let tensors = self.named_tensors();
        let encoded: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
            .into_iter()
            .map(|(name, arr)| {
                let bytes = arr.iter().flat_map(|v| (v.to_f64_lossy() as f32).to_le_bytes()).collect();
                (name, arr.shape().to_vec(), bytes)
            })
            .collect();
        let views = encoded
            .iter()
            .map(|(name, shape, bytes)| {
                safetensors::tensor::TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })
            })
            .collect::<Result<Vec<_>>>()?;
        safetensors::serialize_to_file(views, &None, path).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn config(&self) -> &ClipConfig {
        &self.config
    }

    pub fn logit_scale(&self) -> T {
        self.logit_scale
    }

    pub fn token_embedding(&self, id: u32) -> ArrayView1<'_, T> {
        self.token_embedding.row(id as usize)
    }

    fn text_input(&self, rows: ArrayView2<T>, end: usize) -> Result<Array2<T>> {
        if end >= rows.nrows() || end >= self.config.context_length {
            return Err(Error::InvalidInput(format!(
                "end position {end} outside context {}",
                self.config.context_length
            )));
        }
        Ok(&rows.slice(s![..=end, ..]) + &self.text_positions.slice(s![..=end, ..]))
    }

    /// Unnormalized text feature pooled at the end-symbol row.
    pub fn text_forward(&self, rows: ArrayView2<T>, end: usize) -> Result<Array1<T>> {
        let mut x = self.text_input(rows, end)?;
        let heads = self.config.text.heads;
        for block in &self.text_blocks {
            x = block.forward(&x, heads, true).0;
        }
        let last = x.slice(s![end..=end, ..]);
        let (y, _) = layer_norm(last, self.final_ln.0.view(), self.final_ln.1.view());
        Ok(self.text_projection.dot(&y.row(0)))
    }

    pub fn text_forward_traced(&self, rows: ArrayView2<T>, end: usize) -> Result<(Array1<T>, TextBackward<'_, T>)> {
        let mut x = self.text_input(rows, end)?;
        let context = rows.nrows();
        let heads = self.config.text.heads;
        let mut caches = Vec::with_capacity(self.text_blocks.len());
        for block in &self.text_blocks {
            let (y, cache) = block.forward(&x, heads, true);
            caches.push(cache);
            x = y;
        }
        let last = x.slice(s![end..=end, ..]).to_owned();
        let (y, ln_cache) = layer_norm(last.view(), self.final_ln.0.view(), self.final_ln.1.view());
        let out = self.text_projection.dot(&y.row(0));
        let backward = move |d_out: ArrayView1<T>| -> Array2<T> {
            let d_y = self.text_projection.t().dot(&d_out).insert_axis(Axis(0));
            let d_last = layer_norm_backward(d_y.view(), self.final_ln.0.view(), &ln_cache);
            let mut dx = Array2::zeros((end + 1, self.config.text.width));
            dx.row_mut(end).assign(&d_last.row(0));
            for (block, cache) in self.text_blocks.iter().zip(&caches).rev() {
                dx = block.backward(cache, &dx, heads);
            }
            let mut grad = Array2::zeros((context, self.config.text.width));
            grad.slice_mut(s![..=end, ..]).assign(&dx);
            grad
        };
        Ok((out, Box::new(backward)))
    }

    /// Patch tokens plus class token, positions added, before the pre-norm.
    fn vision_tokens(&self, image: ArrayView3<T>) -> Result<Array2<T>> {
        let (h, w, c) = image.dim();
        let res = self.config.image_size;
        if h != res || w != res || c != 3 {
            return Err(Error::Config(format!(
                "backbone {} expects {res}x{res} images, got {h}x{w}",
                self.config.name
            )));
        }
        let p = self.config.patch_size;
        let grid = self.config.grid();
        let mut patches = Array2::zeros((grid * grid, 3 * p * p));
        for gy in 0..grid {
            for gx in 0..grid {
                let mut row = patches.row_mut(gy * grid + gx);
                let mut idx = 0;
                for ch in 0..3 {
                    for y in 0..p {
                        for x in 0..p {
                            row[idx] = image[[gy * p + y, gx * p + x, ch]];
                            idx += 1;
                        }
                    }
                }
            }
        }
        let width = self.config.vision.width;
        let mut tokens = Array2::zeros((grid * grid + 1, width));
        tokens.row_mut(0).assign(&self.class_embedding);
        tokens.slice_mut(s![1.., ..]).assign(&patches.dot(&self.patch_weight.t()));
        tokens += &self.vision_positions;
        Ok(layer_norm(tokens.view(), self.pre_ln.0.view(), self.pre_ln.1.view()).0)
    }

    /// Unnormalized image feature.
    pub fn image_forward(&self, image: ArrayView3<T>) -> Result<Array1<T>> {
        let mut x = self.vision_tokens(image)?;
        for block in &self.vision_blocks {
            x = block.forward(&x, self.config.vision.heads, false).0;
        }
        Ok(self.pool_image(x.row(0)).0)
    }

    fn pool_image(&self, cls: ArrayView1<T>) -> (Array1<T>, LayerNormCache<T>) {
        let (y, cache) = layer_norm(cls.insert_axis(Axis(0)), self.post_ln.0.view(), self.post_ln.1.view());
        (self.visual_projection.dot(&y.row(0)), cache)
    }

    /// Gradient-weighted attention of the final vision block, class row to patches.
    ///
    /// The score is the cosine similarity between the image feature and a unit
    /// `text_feature`; each head's class-row attention is multiplied by its
    /// gradient, clamped at zero and averaged over heads. Returns a raw
    /// `grid × grid` map.
    pub fn last_block_relevance(&self, image: ArrayView3<T>, text_feature: ArrayView1<T>) -> Result<Array2<T>> {
        let tail = self.final_block_tail(image)?;
        let grads = tail.probability_gradient(self, text_feature);
        let heads = self.config.vision.heads;
        let grid = self.config.grid();
        let mut map = Array2::zeros((grid, grid));
        for (h, g) in grads.iter().enumerate() {
            for j in 0..grid * grid {
                let weighted = g[j + 1] * tail.cache.probs[h][[0, j + 1]];
                if weighted > T::zero() {
                    map[[j / grid, j % grid]] += weighted;
                }
            }
        }
        Ok(map / T::lit(heads as f64))
    }

    fn final_block_tail(&self, image: ArrayView3<T>) -> Result<FinalBlockTail<T>> {
        let mut x = self.vision_tokens(image)?;
        let heads = self.config.vision.heads;
        let (last, rest) = self.vision_blocks.split_last().ok_or_else(|| Error::Config("vision tower has no blocks".into()))?;
        for block in rest {
            x = block.forward(&x, heads, false).0;
        }
        let (_, cache) = last.forward(&x, heads, false);
        Ok(FinalBlockTail { input: x, cache })
    }
}

/// Cached state of the last vision block for relevance computation.
struct FinalBlockTail<T> {
    input: Array2<T>,
    cache: BlockCache<T>,
}

impl<T: Scalar> FinalBlockTail<T> {
    #[cfg(test)]
    /// Cosine similarity of the image feature with `text` when the class row
    /// of the final attention is replaced by `probs` (one row per head).
    fn similarity_from_probs(&self, model: &ClipModel<T>, probs: &[Array1<T>], text: ArrayView1<T>) -> T {
        let block = model.vision_blocks.last().expect("checked");
        let (x2_0, _) = self.class_row_after_attention(block, probs);
        let cls = self.class_row_after_mlp(block, &x2_0);
        let (z, _) = model.pool_image(cls.view());
        l2_normalize(z.view()).0.dot(&text)
    }

    fn class_row_after_attention(&self, block: &Block<T>, probs: &[Array1<T>]) -> (Array1<T>, Array1<T>) {
        let width = self.cache.v.ncols();
        let head_dim = width / probs.len();
        let mut concat = Array1::zeros(width);
        for (h, p) in probs.iter().enumerate() {
            let cols = s![.., h * head_dim..(h + 1) * head_dim];
            concat.slice_mut(s![h * head_dim..(h + 1) * head_dim]).assign(&p.dot(&self.cache.v.slice(cols)));
        }
        let a = block.out.0.dot(&concat) + &block.out.1;
        (&self.input.row(0) + &a, concat)
    }

    #[cfg(test)]
    fn class_row_after_mlp(&self, block: &Block<T>, x2_0: &Array1<T>) -> Array1<T> {
        let (h2, _) = layer_norm(x2_0.view().insert_axis(Axis(0)), block.ln2.0.view(), block.ln2.1.view());
        let pre = block.fc1.0.dot(&h2.row(0)) + &block.fc1.1;
        let act = pre.mapv(quick_gelu);
        x2_0 + &(block.fc2.0.dot(&act) + &block.fc2.1)
    }

    /// d similarity / d probs[h][0, j] for every head.
    fn probability_gradient(&self, model: &ClipModel<T>, text: ArrayView1<T>) -> Vec<Array1<T>> {
        let block = model.vision_blocks.last().expect("checked");
        let probs: Vec<Array1<T>> = self.cache.probs.iter().map(|p| p.row(0).to_owned()).collect();
        let (x2_0, _) = self.class_row_after_attention(block, &probs);
        let (h2, ln2) = layer_norm(x2_0.view().insert_axis(Axis(0)), block.ln2.0.view(), block.ln2.1.view());
        let pre = block.fc1.0.dot(&h2.row(0)) + &block.fc1.1;
        let act = pre.mapv(quick_gelu);
        let cls = &x2_0 + &(block.fc2.0.dot(&act) + &block.fc2.1);
        let (z, post) = model.pool_image(cls.view());
        let (f, norm) = l2_normalize(z.view());

        let d_z = l2_normalize_backward(f.view(), norm, text);
        let d_y = model.visual_projection.t().dot(&d_z).insert_axis(Axis(0));
        let d_cls = layer_norm_backward(d_y.view(), model.post_ln.0.view(), &post).row(0).to_owned();
        let d_act = block.fc2.0.t().dot(&d_cls);
        let d_pre = &d_act * &pre.mapv(quick_gelu_grad);
        let d_h2 = block.fc1.0.t().dot(&d_pre).insert_axis(Axis(0));
        let d_x2 = &d_cls + &layer_norm_backward(d_h2.view(), block.ln2.0.view(), &ln2).row(0);
        let d_concat = block.out.0.t().dot(&d_x2);
        let heads = probs.len();
        let head_dim = d_concat.len() / heads;
        (0..heads)
            .map(|h| {
                let d_o = d_concat.slice(s![h * head_dim..(h + 1) * head_dim]);
                self.cache.v.slice(s![.., h * head_dim..(h + 1) * head_dim]).dot(&d_o)
            })
            .collect()
    }
}

/// A loaded CLIP checkpoint with its tokenizer.
pub struct ClipBackbone<T> {
    model: ClipModel<T>,
    tokenizer: ClipTokenizer,
    source: PathBuf,
}

impl<T: Scalar> ClipBackbone<T> {
    /// Loads `model.safetensors`, `vocab.json` and `merges.txt` from `dir`.
    pub fn load(config: ClipConfig, dir: &Path) -> Result<Self> {
        let tokenizer = ClipTokenizer::from_dir(dir, config.context_length)?;
        let model = ClipModel::load_safetensors(config, &dir.join("model.safetensors"))?;
        Ok(Self::from_parts(model, tokenizer, dir.to_path_buf()))
    }

    pub fn from_parts(model: ClipModel<T>, tokenizer: ClipTokenizer, source: PathBuf) -> Self {
        Self { model, tokenizer, source }
    }

    pub fn model(&self) -> &ClipModel<T> {
        &self.model
    }

    pub fn source(&self) -> &Path {
        &self.source
    }
}

impl<T: Scalar> Backbone<T> for ClipBackbone<T> {
    fn name(&self) -> &str {
        &self.model.config.name
    }

    fn dims(&self) -> BackboneDims {
        self.model.config.dims()
    }

    fn preprocessing(&self) -> Preprocessing {
        Preprocessing {
            resolution: self.model.config.image_size,
            mean: Preprocessing::CLIP_MEAN,
            std: Preprocessing::CLIP_STD,
        }
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.tokenizer
    }

    fn logit_scale(&self) -> T {
        self.model.logit_scale
    }

    fn token_embedding(&self, id: u32) -> ArrayView1<'_, T> {
        self.model.token_embedding(id)
    }

    fn image_forward(&self, image: ArrayView3<T>) -> Result<Array1<T>> {
        self.model.image_forward(image)
    }

    fn text_forward(&self, rows: ArrayView2<T>, end_position: usize) -> Result<Array1<T>> {
        self.model.text_forward(rows, end_position)
    }

    fn text_forward_traced(&self, rows: ArrayView2<T>, end_position: usize) -> Result<(Array1<T>, TextBackward<'_, T>)> {
        self.model.text_forward_traced(rows, end_position)
    }

    fn weights_checksum(&self) -> String {
        let tensors = self.model.named_tensors();
        weights_digest(tensors.iter().map(|(_, a)| a.view()))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use ndarray::Array3;

    pub(crate) fn tiny_config() -> ClipConfig {
        ClipConfig {
            name: "tiny".into(),
            embed_dim: 6,
            image_size: 8,
            patch_size: 4,
            vision: TowerConfig { width: 8, layers: 2, heads: 2, mlp_width: 12 },
            text: TowerConfig { width: 8, layers: 2, heads: 2, mlp_width: 12 },
            context_length: 7,
            vocab_size: 20,
        }
    }

    /// Word-level vocabulary of 20 entries covering "a photo of dog".
    pub(crate) fn tiny_tokenizer() -> ClipTokenizer {
        let vocab = [
            "!", "a</w>", "p", "h", "o", "t", "o</w>", "f</w>", "d", "g</w>", "ph", "pho", "phot",
            "photo</w>", "of</w>", "do", "dog</w>", "cat</w>", ClipTokenizer::START, ClipTokenizer::END,
        ];
        let merges: Vec<(String, String)> = [
            ("p", "h"), ("ph", "o"), ("pho", "t"), ("phot", "o</w>"), ("o", "f</w>"), ("d", "o"), ("do", "g</w>"),
        ]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
        let encoder = vocab.iter().enumerate().map(|(i, s)| (s.to_string(), i as u32)).collect();
        ClipTokenizer::new(encoder, &merges, 7).unwrap()
    }

    pub(crate) fn tiny_backbone(seed: u64) -> ClipBackbone<f64> {
        ClipBackbone::from_parts(ClipModel::random(tiny_config(), seed), tiny_tokenizer(), "memory".into())
    }

    fn image(seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((8, 8, 3), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn published_presets_have_expected_widths() {
        let l = ClipConfig::vit_l_14();
        assert_eq!((l.dims().image_dim, l.dims().token_dim), (768, 768));
        assert_eq!(ClipConfig::vit_b_32().grid(), 7);
        assert_eq!(l.grid(), 16);
    }

    #[test]
    fn text_backward_matches_finite_differences() {
        let model = ClipModel::<f64>::random(tiny_config(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows = Array2::from_shape_simple_fn((7, 8), || rng.gen_range(-0.5..0.5));
        let end = 4;
        let probe = Array1::from_shape_fn(6, |i| 0.3 - 0.2 * i as f64);
        let (out, back) = model.text_forward_traced(rows.view(), end).unwrap();
        assert_eq!(out, model.text_forward(rows.view(), end).unwrap());
        let grad = back(probe.view());
        let f = |r: &Array2<f64>| model.text_forward(r.view(), end).unwrap().dot(&probe);
        for r in 0..7 {
            for c in 0..8 {
                let mut p = rows.clone();
                p[[r, c]] += 1e-6;
                let mut m = rows.clone();
                m[[r, c]] -= 1e-6;
                let num = (f(&p) - f(&m)) / 2e-6;
                assert!((num - grad[[r, c]]).abs() < 1e-7, "({r},{c}) {num} vs {}", grad[[r, c]]);
            }
        }
        // causal: rows after the end symbol never matter
        assert!(grad.row(5).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relevance_gradient_matches_finite_differences() {
        let model = ClipModel::<f64>::random(tiny_config(), 5);
        let img = image(1);
        let text = l2_normalize(Array1::from_shape_fn(6, |i| (i as f64 + 1.0).cos()).view()).0;
        let tail = model.final_block_tail(img.view()).unwrap();
        let grads = tail.probability_gradient(&model, text.view());
        let base: Vec<Array1<f64>> = tail.cache.probs.iter().map(|p| p.row(0).to_owned()).collect();
        let direct = tail.similarity_from_probs(&model, &base, text.view());
        let feature = l2_normalize(model.image_forward(img.view()).unwrap().view()).0;
        assert!((direct - feature.dot(&text)).abs() < 1e-12);
        for h in 0..2 {
            for j in 0..5 {
                let mut p = base.clone();
                p[h][j] += 1e-6;
                let mut m = base.clone();
                m[h][j] -= 1e-6;
                let num = (tail.similarity_from_probs(&model, &p, text.view())
                    - tail.similarity_from_probs(&model, &m, text.view()))
                    / 2e-6;
                assert!((num - grads[h][j]).abs() < 1e-8);
            }
        }
        let map = model.last_block_relevance(img.view(), text.view()).unwrap();
        assert_eq!(map.dim(), (2, 2));
        assert!(map.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn safetensors_roundtrip_reproduces_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let model = ClipModel::<f32>::random(tiny_config(), 11);
        let path = dir.path().join("model.safetensors");
        model.save_safetensors(&path).unwrap();
        let loaded = ClipModel::<f32>::load_safetensors(tiny_config(), &path).unwrap();
        let img = image(2).mapv(|v| v as f32);
        assert_eq!(model.image_forward(img.view()).unwrap(), loaded.image_forward(img.view()).unwrap());
        assert!((model.logit_scale() - loaded.logit_scale()).abs() < 1e-4);
        let wrong = ClipConfig { embed_dim: 5, ..tiny_config() };
        assert!(matches!(
            ClipModel::<f32>::load_safetensors(wrong, &path),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn wrong_image_size_names_expected_resolution() {
        let model = ClipModel::<f64>::random(tiny_config(), 1);
        let err = model.image_forward(Array3::zeros((9, 9, 3)).view()).unwrap_err();
        assert!(err.to_string().contains("8x8"));
    }
}
