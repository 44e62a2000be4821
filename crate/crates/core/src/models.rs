//! Toy vision-transformer encoder (teacher and student capacities), a linear
//! segmentation decoder, and masked-input handling.
//!
//! Encoders emit one CLS token plus N patch tokens from the last block,
//! after a final layer norm. Masking replaces patch embeddings with a
//! learned mask token before positional addition; the CLS position is never
//! masked. Parameter names form a stable, deterministic ordering which is
//! the checkpoint contract.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, TensorRef};
use crate::tensor::Tensor;

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 {
            return Err(Error::validation("image_size and patch_size must be positive"));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::validation(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::validation(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::validation("mlp_ratio must be positive"));
        }
        Ok(())
    }

    /// Patch tokens per image, N = (image_size / patch_size)^2.
    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patch_dim(&self) -> usize {
        IMAGE_CHANNELS * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[in, out]`.
    pub weight: Tensor,
    /// `[out]`.
    pub bias: Tensor,
}

impl Linear {
    pub fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: trunc_normal_tensor(rng, vec![fan_in, fan_out], 0.02),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }
}

impl ParamModule for Linear {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("weight".to_string(), &self.weight),
            ("bias".to_string(), &self.bias),
        ]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("weight".to_string(), &mut self.weight),
            ("bias".to_string(), &mut self.bias),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl Norm {
    pub fn init(dim: usize) -> Self {
        Norm {
            gain: Tensor::filled(vec![dim], 1.0),
            bias: Tensor::zeros(vec![dim]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub ln2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub patch: Linear,
    /// `[N+1, dim]`, CLS position first.
    pub pos_table: Tensor,
    /// `[1, 1, dim]`.
    pub cls_token: Tensor,
    /// `[dim]`.
    pub mask_token: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: Norm,
}

/// Modules whose parameters are exposed as a stable, deterministically
/// ordered name/tensor list. The ordering is the checkpoint contract.
pub trait ParamModule {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

fn linear_params<'a>(prefix: &str, l: &'a Linear, out: &mut Vec<(String, &'a Tensor)>) {
    out.push((format!("{prefix}.weight"), &l.weight));
    out.push((format!("{prefix}.bias"), &l.bias));
}

fn linear_params_mut<'a>(prefix: &str, l: &'a mut Linear, out: &mut Vec<(String, &'a mut Tensor)>) {
    out.push((format!("{prefix}.weight"), &mut l.weight));
    out.push((format!("{prefix}.bias"), &mut l.bias));
}

fn norm_params<'a>(prefix: &str, n: &'a Norm, out: &mut Vec<(String, &'a Tensor)>) {
    out.push((format!("{prefix}.gain"), &n.gain));
    out.push((format!("{prefix}.bias"), &n.bias));
}

fn norm_params_mut<'a>(prefix: &str, n: &'a mut Norm, out: &mut Vec<(String, &'a mut Tensor)>) {
    out.push((format!("{prefix}.gain"), &mut n.gain));
    out.push((format!("{prefix}.bias"), &mut n.bias));
}

impl ParamModule for Encoder {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        linear_params("patch", &self.patch, &mut out);
        out.push(("pos_table".to_string(), &self.pos_table));
        out.push(("cls_token".to_string(), &self.cls_token));
        out.push(("mask_token".to_string(), &self.mask_token));
        for (i, b) in self.blocks.iter().enumerate() {
            norm_params(&format!("block{i}.ln1"), &b.ln1, &mut out);
            linear_params(&format!("block{i}.attn.q"), &b.q, &mut out);
            linear_params(&format!("block{i}.attn.k"), &b.k, &mut out);
            linear_params(&format!("block{i}.attn.v"), &b.v, &mut out);
            linear_params(&format!("block{i}.attn.proj"), &b.proj, &mut out);
            norm_params(&format!("block{i}.ln2"), &b.ln2, &mut out);
            linear_params(&format!("block{i}.mlp.fc1"), &b.fc1, &mut out);
            linear_params(&format!("block{i}.mlp.fc2"), &b.fc2, &mut out);
        }
        norm_params("final_norm", &self.final_norm, &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        linear_params_mut("patch", &mut self.patch, &mut out);
        out.push(("pos_table".to_string(), &mut self.pos_table));
        out.push(("cls_token".to_string(), &mut self.cls_token));
        out.push(("mask_token".to_string(), &mut self.mask_token));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            norm_params_mut(&format!("block{i}.ln1"), &mut b.ln1, &mut out);
            linear_params_mut(&format!("block{i}.attn.q"), &mut b.q, &mut out);
            linear_params_mut(&format!("block{i}.attn.k"), &mut b.k, &mut out);
            linear_params_mut(&format!("block{i}.attn.v"), &mut b.v, &mut out);
            linear_params_mut(&format!("block{i}.attn.proj"), &mut b.proj, &mut out);
            norm_params_mut(&format!("block{i}.ln2"), &mut b.ln2, &mut out);
            linear_params_mut(&format!("block{i}.mlp.fc1"), &mut b.fc1, &mut out);
            linear_params_mut(&format!("block{i}.mlp.fc2"), &mut b.fc2, &mut out);
        }
        norm_params_mut("final_norm", &mut self.final_norm, &mut out);
        out
    }
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    // Box-Muller with resampling outside two standard deviations.
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.is_finite() && z.abs() <= 2.0 {
            return z * std;
        }
    }
}

fn trunc_normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| trunc_normal(rng, std)).collect();
    Tensor::from_vec(shape, data).expect("finite init values")
}

/// Builds an encoder with truncated-normal weights (std 0.02), zero biases,
/// unit norms, and zero-initialized CLS and mask tokens. Deterministic in
/// the seed.
pub fn init_encoder(config: &EncoderConfig, seed: u64) -> Result<Encoder> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.num_patches();
    let dim = config.dim;
    let patch = Linear::init(&mut rng, config.patch_dim(), dim);
    let pos_table = trunc_normal_tensor(&mut rng, vec![n + 1, dim], 0.02);
    let cls_token = Tensor::zeros(vec![1, 1, dim]);
    let mask_token = Tensor::zeros(vec![dim]);
    let hidden = config.mlp_hidden();
    let blocks = (0..config.depth)
        .map(|_| Block {
            ln1: Norm::init(dim),
            q: Linear::init(&mut rng, dim, dim),
            k: Linear::init(&mut rng, dim, dim),
            v: Linear::init(&mut rng, dim, dim),
            proj: Linear::init(&mut rng, dim, dim),
            ln2: Norm::init(dim),
            fc1: Linear::init(&mut rng, dim, hidden),
            fc2: Linear::init(&mut rng, hidden, dim),
        })
        .collect();
    Ok(Encoder {
        config: config.clone(),
        patch,
        pos_table,
        cls_token,
        mask_token,
        blocks,
        final_norm: Norm::init(dim),
    })
}

/// Patch positions replaced by the mask token during a masked forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub ratio: f64,
    /// Sorted unique patch indices, each `< N`; the CLS token is never masked.
    pub indices: Vec<usize>,
    pub seed: u64,
}

impl MaskSpec {
    /// A mask that replaces nothing.
    pub fn empty() -> Self {
        MaskSpec {
            ratio: 0.0,
            indices: Vec::new(),
            seed: 0,
        }
    }
}

/// Uniform sample of ceil(ratio * n_tokens) distinct patch indices.
pub fn sample_mask(n_tokens: usize, ratio: f64, seed: u64) -> Result<MaskSpec> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::validation(format!(
            "mask ratio must lie in (0, 1), got {ratio}"
        )));
    }
    let count = (ratio * n_tokens as f64).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Partial Fisher-Yates.
    let mut pool: Vec<usize> = (0..n_tokens).collect();
    for i in 0..count {
        let j = rng.gen_range(i..n_tokens);
        pool.swap(i, j);
    }
    let mut indices = pool[..count].to_vec();
    indices.sort_unstable();
    Ok(MaskSpec { ratio, indices, seed })
}

/// Graph handles for one bound encoder. Leaves are inserted in the canonical
/// parameter order.
pub struct EncoderBinding {
    pub refs: Vec<(String, TensorRef)>,
}

impl EncoderBinding {
    pub fn get(&self, name: &str) -> TensorRef {
        self.refs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| *r)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }
}

impl Encoder {
    /// Inserts every parameter as a graph leaf. `trainable` leaves receive
    /// gradients from backward.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> EncoderBinding {
        let refs = self
            .named_params()
            .into_iter()
            .map(|(name, t)| (name, g.leaf(t.clone().requires_grad(trainable))))
            .collect();
        EncoderBinding { refs }
    }
}

fn linear_apply(g: &mut Graph, x: TensorRef, w: TensorRef, b: TensorRef) -> Result<TensorRef> {
    g.affine(x, w, b)
}

/// Full encoder forward: patch embedding (+ optional mask-token replacement)
/// -> CLS concat -> positions -> transformer blocks -> final norm. Returns
/// `(cls [B,1,C], tokens [B,N,C])`.
pub fn encode(
    g: &mut Graph,
    cfg: &EncoderConfig,
    enc: &EncoderBinding,
    image: TensorRef,
    mask: Option<&MaskSpec>,
) -> Result<(TensorRef, TensorRef)> {
    let shape = g.value(image).shape().to_vec();
    if shape.len() != 4
        || shape[1] != IMAGE_CHANNELS
        || shape[2] != cfg.image_size
        || shape[3] != cfg.image_size
    {
        return Err(Error::dim(format!(
            "encode expects [B, {}, {}, {}], got {:?}",
            IMAGE_CHANNELS, cfg.image_size, cfg.image_size, shape
        )));
    }
    let batch = shape[0];
    let n = cfg.num_patches();
    let heads = cfg.heads;
    let head_dim = cfg.head_dim();
    let tokens_len = n + 1;

    let patches = g.extract_patches(image, cfg.patch_size)?;
    let mut tok = linear_apply(g, patches, enc.get("patch.weight"), enc.get("patch.bias"))?;
    if let Some(m) = mask {
        if m.indices.iter().any(|&i| i >= n) {
            return Err(Error::validation(format!(
                "mask index out of range for {} patches",
                n
            )));
        }
        if !m.indices.is_empty() {
            tok = g.replace_rows(tok, enc.get("mask_token"), &m.indices)?;
        }
    }
    let cls = g.expand_lead(enc.get("cls_token"), batch)?;
    let mut x = g.concat(cls, tok, 1)?;
    x = g.add(x, enc.get("pos_table"))?;

    let scale = 1.0 / (head_dim as f64).sqrt();
    for i in 0..cfg.depth {
        let p = |s: &str| format!("block{i}.{s}");
        let h = g.layer_norm(x, enc.get(&p("ln1.gain")), enc.get(&p("ln1.bias")), 1e-6)?;
        let to_heads = |g: &mut Graph, t: TensorRef| -> Result<TensorRef> {
            let r = g.reshape(t, vec![batch, tokens_len, heads, head_dim])?;
            g.permute(r, &[0, 2, 1, 3])
        };
        let q0 = linear_apply(g, h, enc.get(&p("attn.q.weight")), enc.get(&p("attn.q.bias")))?;
        let k0 = linear_apply(g, h, enc.get(&p("attn.k.weight")), enc.get(&p("attn.k.bias")))?;
        let v0 = linear_apply(g, h, enc.get(&p("attn.v.weight")), enc.get(&p("attn.v.bias")))?;
        let q = to_heads(g, q0)?;
        let k = to_heads(g, k0)?;
        let v = to_heads(g, v0)?;
        let kt = g.transpose(k)?;
        let scores0 = g.matmul(q, kt)?;
        let scores = g.scale(scores0, scale)?;
        let attn = g.softmax(scores, 3)?;
        let ctx0 = g.matmul(attn, v)?;
        let ctx1 = g.permute(ctx0, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx1, vec![batch, tokens_len, cfg.dim])?;
        let out = linear_apply(
            g,
            ctx,
            enc.get(&p("attn.proj.weight")),
            enc.get(&p("attn.proj.bias")),
        )?;
        x = g.add(x, out)?;

        let h2 = g.layer_norm(x, enc.get(&p("ln2.gain")), enc.get(&p("ln2.bias")), 1e-6)?;
        let m1 = linear_apply(g, h2, enc.get(&p("mlp.fc1.weight")), enc.get(&p("mlp.fc1.bias")))?;
        let m2 = g.gelu(m1)?;
        let m3 = linear_apply(g, m2, enc.get(&p("mlp.fc2.weight")), enc.get(&p("mlp.fc2.bias")))?;
        x = g.add(x, m3)?;
    }
    x = g.layer_norm(
        x,
        enc.get("final_norm.gain"),
        enc.get("final_norm.bias"),
        1e-6,
    )?;
    let cls_out = g.narrow(x, 1, 0, 1)?;
    let tok_out = g.narrow(x, 1, 1, n)?;
    Ok((cls_out, tok_out))
}

/// Per-token linear classifier plus bilinear upsampling to the pixel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub classify: Linear,
    /// Patch-grid side length the decoder expects (tokens = grid^2).
    pub grid: usize,
    pub image_size: usize,
    pub classes: usize,
}

impl ParamModule for Decoder {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        linear_params("classify", &self.classify, &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        linear_params_mut("classify", &mut self.classify, &mut out);
        out
    }
}

pub fn init_decoder(
    dim: usize,
    classes: usize,
    grid: usize,
    image_size: usize,
    seed: u64,
) -> Decoder {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Decoder {
        classify: Linear::init(&mut rng, dim, classes),
        grid,
        image_size,
        classes,
    }
}

pub struct DecoderBinding {
    pub refs: Vec<(String, TensorRef)>,
}

impl Decoder {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> DecoderBinding {
        let refs = self
            .named_params()
            .into_iter()
            .map(|(name, t)| (name, g.leaf(t.clone().requires_grad(trainable))))
            .collect();
        DecoderBinding { refs }
    }
}

impl DecoderBinding {
    pub fn get(&self, name: &str) -> TensorRef {
        self.refs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| *r)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }
}

/// Classifies tokens `[B, N, C]` and upsamples to pixel logits `[B, K, H, W]`.
pub fn decode(
    g: &mut Graph,
    dec: &Decoder,
    binding: &DecoderBinding,
    tokens: TensorRef,
) -> Result<TensorRef> {
    let shape = g.value(tokens).shape().to_vec();
    if shape.len() != 3 || shape[1] != dec.grid * dec.grid {
        return Err(Error::dim(format!(
            "decode expects [B, {}, C] tokens, got {:?}",
            dec.grid * dec.grid,
            shape
        )));
    }
    let batch = shape[0];
    let logits_tok = linear_apply(
        g,
        tokens,
        binding.get("classify.weight"),
        binding.get("classify.bias"),
    )?;
    let grid = g.reshape(logits_tok, vec![batch, dec.grid, dec.grid, dec.classes])?;
    let chans = g.permute(grid, &[0, 3, 1, 2])?;
    g.bilinear_upsample(chans, dec.image_size, dec.image_size)
}

/// Runs a plain forward pass outside any training step and returns
/// `(cls, tokens)` as owned tensors. Accepts a single `[3, H, W]` image or a
/// `[B, 3, H, W]` batch.
pub fn encode_tensors(
    encoder: &Encoder,
    image: &Tensor,
    mask: Option<&MaskSpec>,
) -> Result<(Tensor, Tensor)> {
    let batched = if image.rank() == 3 {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        Tensor::from_vec(shape, image.data().to_vec())?
    } else {
        image.clone()
    };
    let mut g = Graph::new();
    let img = g.constant(batched);
    let binding = encoder.bind(&mut g, false);
    let (cls, tok) = encode(&mut g, &encoder.config, &binding, img, mask)?;
    Ok((g.value(cls).clone(), g.value(tok).clone()))
}
