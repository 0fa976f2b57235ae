//! ViT-style image encoder and transformer text encoder.
//!
//! The image encoder maps one RGB image to a single `d`-vector (the final
//! class-token state). The same parameters encode left and right eyes. The
//! text encoder maps a fixed-length token sequence to `[l×d]` states whose
//! row 0 (the `cls` position) summarizes the report.

use alloc::{format, vec, vec::Vec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::nn::{self, Graph, Init, ParamSpec, TransformerBlockConfig, INIT_STD};
use crate::tensor::{Tensor, Var};

pub const IMAGE_PREFIX: &str = "img";
pub const TEXT_PREFIX: &str = "txt";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageEncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
    /// Extra linear map on the class token before it leaves the encoder.
    pub projection: bool,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            d_model: 64,
            n_blocks: 2,
            n_heads: 2,
            mlp_ratio: 4.0,
            projection: false,
        }
    }
}

impl ImageEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        self.block().validate()
    }

    pub fn block(&self) -> TransformerBlockConfig {
        TransformerBlockConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn n_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.d_model;
        let p = IMAGE_PREFIX;
        let mut specs = nn::linear_specs(&format!("{p}.patch"), self.patch_dim(), d);
        specs.push(ParamSpec::new(format!("{p}.cls"), &[1, d], Init::TruncatedNormal(INIT_STD)));
        specs.push(ParamSpec::new(
            format!("{p}.pos"),
            &[self.n_patches() + 1, d],
            Init::TruncatedNormal(INIT_STD),
        ));
        for b in 0..self.n_blocks {
            specs.extend(nn::block_specs(&format!("{p}.block{b}"), &self.block()));
        }
        specs.extend(nn::layer_norm_specs(&format!("{p}.ln_f"), d));
        if self.projection {
            specs.extend(nn::linear_specs(&format!("{p}.proj"), d, d));
        }
        specs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
    pub cls_id: usize,
    pub pad_id: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            max_len: 16,
            d_model: 64,
            n_blocks: 2,
            n_heads: 2,
            mlp_ratio: 4.0,
            cls_id: 0,
            pad_id: 1,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cls_id == self.pad_id {
            return Err(Error::Config("cls_id and pad_id must differ".into()));
        }
        if self.cls_id >= self.vocab_size || self.pad_id >= self.vocab_size {
            return Err(Error::Config(format!(
                "reserved ids must be below vocab_size {}",
                self.vocab_size
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        self.block().validate()
    }

    pub fn block(&self) -> TransformerBlockConfig {
        TransformerBlockConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.d_model;
        let p = TEXT_PREFIX;
        let mut specs = vec![
            ParamSpec::new(format!("{p}.tok"), &[self.vocab_size, d], Init::TruncatedNormal(INIT_STD)),
            ParamSpec::new(format!("{p}.pos"), &[self.max_len, d], Init::TruncatedNormal(INIT_STD)),
        ];
        for b in 0..self.n_blocks {
            specs.extend(nn::block_specs(&format!("{p}.block{b}"), &self.block()));
        }
        specs.extend(nn::layer_norm_specs(&format!("{p}.ln_f"), d));
        specs
    }

    /// Fits an id sequence to exactly `max_len`. Sequences longer than
    /// `max_len` keep their first `max_len − 1` ids and gain one pad.
    pub fn fit_length(&self, ids: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = if ids.len() > self.max_len {
            ids[..self.max_len - 1].to_vec()
        } else {
            ids.to_vec()
        };
        out.resize(self.max_len, self.pad_id);
        out
    }
}

/// Splits an image into non-overlapping `p×p` patches in row-major patch
/// order; each patch is flattened row, column, channel.
pub fn patchify(image: &Image, cfg: &ImageEncoderConfig) -> Result<Tensor> {
    if image.height() != cfg.image_size || image.width() != cfg.image_size {
        return Err(Error::Tensor(crate::tensor::TensorError::Shape {
            op: "patchify",
            lhs: vec![image.height(), image.width(), CHANNELS],
            rhs: vec![cfg.image_size, cfg.image_size, CHANNELS],
        }));
    }
    let p = cfg.patch_size;
    let per_side = cfg.image_size / p;
    let mut data = Vec::with_capacity(cfg.n_patches() * cfg.patch_dim());
    for py in 0..per_side {
        for px in 0..per_side {
            for y in 0..p {
                for x in 0..p {
                    for c in 0..CHANNELS {
                        data.push(image.get(py * p + y, px * p + x, c));
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![cfg.n_patches(), cfg.patch_dim()], data)?)
}

/// Encodes one image to its `[d]` feature.
pub fn encode_image(g: &mut Graph<'_>, cfg: &ImageEncoderConfig, image: &Image) -> Result<Var> {
    let p = IMAGE_PREFIX;
    let patches = patchify(image, cfg)?;
    let patches = g.tape.leaf(&patches);
    let tokens = nn::linear(g, patches, &format!("{p}.patch"))?;
    let cls = g.param(&format!("{p}.cls"))?;
    let mut x = g.tape.stack_rows(&[cls, tokens])?;
    let pos = g.param(&format!("{p}.pos"))?;
    x = g.tape.add(x, pos)?;
    let block = cfg.block();
    for b in 0..cfg.n_blocks {
        x = nn::transformer_block(g, x, &format!("{p}.block{b}"), &block)?;
    }
    x = nn::layer_norm(g, x, &format!("{p}.ln_f"))?;
    let v = g.tape.row(x, 0)?;
    if cfg.projection {
        nn::linear(g, v, &format!("{p}.proj"))
    } else {
        Ok(v)
    }
}

/// Encodes several images into an `[N×d]` matrix.
pub fn encode_images(g: &mut Graph<'_>, cfg: &ImageEncoderConfig, images: &[&Image]) -> Result<Var> {
    let rows = images
        .iter()
        .map(|im| encode_image(g, cfg, im))
        .collect::<Result<Vec<_>>>()?;
    Ok(g.tape.stack_rows(&rows)?)
}

#[derive(Clone, Copy, Debug)]
pub struct EncodedText {
    pub t_seq: Var,
    pub t0: Var,
}

/// Encodes a report. `tokens` must start with `cls_id`; it is fitted to
/// `max_len` (truncated or right-padded) before encoding.
pub fn encode_text(g: &mut Graph<'_>, cfg: &TextEncoderConfig, tokens: &[usize]) -> Result<EncodedText> {
    if tokens.first() != Some(&cfg.cls_id) {
        return Err(Error::Contract("token sequence must start with the cls id".into()));
    }
    if let Some(&id) = tokens.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Vocabulary {
            id,
            vocab_size: cfg.vocab_size,
        });
    }
    let ids = cfg.fit_length(tokens);
    let p = TEXT_PREFIX;
    let emb = nn::embedding_lookup(g, &ids, &format!("{p}.tok"))?;
    let pos = g.param(&format!("{p}.pos"))?;
    let mut x = g.tape.add(emb, pos)?;
    let block = cfg.block();
    for b in 0..cfg.n_blocks {
        x = nn::transformer_block(g, x, &format!("{p}.block{b}"), &block)?;
    }
    let t_seq = nn::layer_norm(g, x, &format!("{p}.ln_f"))?;
    let t0 = g.tape.row(t_seq, 0)?;
    Ok(EncodedText { t_seq, t0 })
}
