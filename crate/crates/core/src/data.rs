//! Synthetic binocular cohorts, the report vocabulary and image augmentation.
//!
//! Each synthetic eye independently carries a subset of `n_conditions`
//! findings. A finding is drawn into the image as a coloured disk at a
//! class-specific position, and named in the patient report after a
//! laterality marker (`left:` / `right:`). Reports mix both eyes, so the
//! per-eye assignment has to be read off the markers.

use alloc::{
    collections::BTreeMap,
    format,
    string::{String, ToString},
    vec,
    vec::Vec,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::math;

pub const CLS_ID: usize = 0;
pub const PAD_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const CLS_TOKEN: &str = "[CLS]";
pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const LEFT_MARKER: &str = "left:";
pub const RIGHT_MARKER: &str = "right:";

const FINDING_NAMES: [&str; 8] = [
    "drusen",
    "hemorrhage",
    "exudate",
    "cupping",
    "edema",
    "atrophy",
    "neovascularization",
    "scar",
];

const FILLER: [&str; 5] = ["both", "eyes", "normal", ".", "and"];

pub fn finding_name(k: usize) -> String {
    FINDING_NAMES
        .get(k)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("finding{k}"))
}

/// Per-eye ground truth; only the synthetic generator knows it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EyeLabels {
    pub left: Vec<bool>,
    pub right: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientTriplet {
    pub patient_id: String,
    pub left_image: Image,
    pub right_image: Image,
    pub report: String,
    /// Starts with [`CLS_ID`]; not padded.
    pub report_tokens: Vec<usize>,
    pub ground_truth: Option<EyeLabels>,
}

/// Word-level vocabulary. Ids 0, 1, 2 are `[CLS]`, `[PAD]`, `[UNK]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3
            || tokens[CLS_ID] != CLS_TOKEN
            || tokens[PAD_ID] != PAD_TOKEN
            || tokens[UNK_ID] != UNK_TOKEN
        {
            return Err(Error::Config(
                "vocabulary must start with [CLS], [PAD], [UNK]".into(),
            ));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary token {t:?} at line {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// The template language used by [`generate_cohort`].
    pub fn synthetic(n_conditions: usize) -> Self {
        let mut tokens: Vec<String> = [CLS_TOKEN, PAD_TOKEN, UNK_TOKEN, LEFT_MARKER, RIGHT_MARKER]
            .iter()
            .map(|s| s.to_string())
            .collect();
        tokens.extend(FILLER.iter().map(|s| s.to_string()));
        tokens.extend((0..n_conditions).map(finding_name));
        Self::from_tokens(tokens).expect("synthetic vocabulary is well formed")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    /// `[CLS]` followed by one id per whitespace-separated word.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        core::iter::once(CLS_ID)
            .chain(text.split_whitespace().map(|w| self.id(w)))
            .collect()
    }

    /// [`tokenize`](Self::tokenize), then fitted to exactly `max_len`:
    /// right-padded, or cut to `max_len − 1` ids plus one pad when too long.
    pub fn tokenize_padded(&self, text: &str, max_len: usize) -> Vec<usize> {
        let ids = self.tokenize(text);
        let mut out = if ids.len() > max_len {
            ids[..max_len.saturating_sub(1)].to_vec()
        } else {
            ids
        };
        out.resize(max_len, PAD_ID);
        out
    }

    /// Drops `[CLS]`/`[PAD]` and joins the remaining words with spaces.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&id| id != CLS_ID && id != PAD_ID)
            .map(|&id| self.tokens.get(id).map(String::as_str).unwrap_or(UNK_TOKEN))
            .collect();
        words.join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCohortConfig {
    pub n_patients: usize,
    pub image_size: usize,
    pub n_conditions: usize,
    /// Probability that an eye carries each condition.
    pub condition_prior: f64,
    pub noise_std: f64,
    /// Interleave left and right findings in the report.
    pub template_mix: bool,
    pub seed: u64,
}

impl Default for SyntheticCohortConfig {
    fn default() -> Self {
        Self {
            n_patients: 64,
            image_size: 32,
            n_conditions: 4,
            condition_prior: 0.3,
            noise_std: 0.05,
            template_mix: true,
            seed: 0,
        }
    }
}

impl SyntheticCohortConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.condition_prior) {
            return Err(Error::Config("condition_prior must lie in [0, 1]".into()));
        }
        if self.n_conditions < 2 {
            return Err(Error::Config("n_conditions must be at least 2".into()));
        }
        if self.image_size < 4 {
            return Err(Error::Config("image_size must be at least 4".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        Ok(())
    }
}

const BACKGROUND: f64 = 0.35;

/// Disk colour of condition `k`: evenly spaced hues.
fn condition_color(k: usize, n: usize) -> [f64; 3] {
    let h = 6.0 * k as f64 / n as f64;
    let i = math::floor(h) as usize % 6;
    let f = h - math::floor(h);
    let (r, g, b) = match i {
        0 => (1.0, f, 0.0),
        1 => (1.0 - f, 1.0, 0.0),
        2 => (0.0, 1.0, f),
        3 => (0.0, 1.0 - f, 1.0),
        4 => (f, 0.0, 1.0),
        _ => (1.0, 0.0, 1.0 - f),
    };
    [0.1 + 0.85 * r, 0.1 + 0.85 * g, 0.1 + 0.85 * b]
}

/// Centre (y, x) and radius of condition `k` for a given image size.
fn condition_disk(k: usize, n: usize, size: usize) -> (f64, f64, f64) {
    let c = (size as f64 - 1.0) / 2.0;
    let ring = 0.28 * size as f64;
    let angle = 2.0 * core::f64::consts::PI * k as f64 / n as f64;
    let radius = (0.12 * size as f64).max(1.0);
    (c + ring * math::sin(angle), c + ring * math::cos(angle), radius)
}

/// Draws an eye image with the given findings. Pure function of its inputs.
pub fn render_eye(labels: &[bool], size: usize, noise_std: f64, rng: &mut ChaCha8Rng) -> Image {
    let n = labels.len();
    let mut img = Image::filled(size, size, BACKGROUND);
    for (k, _) in labels.iter().enumerate().filter(|(_, on)| **on) {
        let (cy, cx, r) = condition_disk(k, n, size);
        let color = condition_color(k, n);
        for y in 0..size {
            for x in 0..size {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                if dy * dy + dx * dx <= r * r {
                    for (c, v) in color.iter().enumerate() {
                        img.set(y, x, c, *v);
                    }
                }
            }
        }
    }
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).expect("finite std");
        for v in img.data_mut() {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }
    img
}

/// Patient-level report text for the given per-eye findings.
pub fn compose_report(labels: &EyeLabels, template_mix: bool) -> String {
    let names = |ls: &[bool]| -> Vec<String> {
        ls.iter()
            .enumerate()
            .filter(|(_, on)| **on)
            .map(|(k, _)| finding_name(k))
            .collect()
    };
    let left = names(&labels.left);
    let right = names(&labels.right);
    if left.is_empty() && right.is_empty() {
        return "both eyes normal .".into();
    }
    let left = if left.is_empty() { vec!["normal".to_string()] } else { left };
    let right = if right.is_empty() { vec!["normal".to_string()] } else { right };
    let mut words: Vec<String> = Vec::new();
    if template_mix {
        for i in 0..left.len().max(right.len()) {
            if let Some(w) = left.get(i) {
                words.push(LEFT_MARKER.into());
                words.push(w.clone());
            }
            if let Some(w) = right.get(i) {
                words.push(RIGHT_MARKER.into());
                words.push(w.clone());
            }
        }
    } else {
        words.push(LEFT_MARKER.into());
        words.extend(left);
        words.push(RIGHT_MARKER.into());
        words.extend(right);
    }
    words.push(".".into());
    words.join(" ")
}

/// Per-patient RNG; patient `i` draws from `seed ⊕ i`.
pub fn patient_rng(cohort_seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cohort_seed ^ index as u64)
}

pub fn generate_patient(config: &SyntheticCohortConfig, vocab: &Vocabulary, index: usize) -> PatientTriplet {
    let mut rng = patient_rng(config.seed, index);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<bool> {
        (0..config.n_conditions)
            .map(|_| rng.random::<f64>() < config.condition_prior)
            .collect()
    };
    let left = draw(&mut rng);
    let right = draw(&mut rng);
    let left_image = render_eye(&left, config.image_size, config.noise_std, &mut rng);
    let right_image = render_eye(&right, config.image_size, config.noise_std, &mut rng);
    let labels = EyeLabels { left, right };
    let report = compose_report(&labels, config.template_mix);
    PatientTriplet {
        patient_id: format!("P{index:05}"),
        left_image,
        right_image,
        report_tokens: vocab.tokenize(&report),
        report,
        ground_truth: Some(labels),
    }
}

/// Generates a full cohort; deterministic per config.
pub fn generate_cohort(config: &SyntheticCohortConfig) -> Result<Vec<PatientTriplet>> {
    config.validate()?;
    let vocab = Vocabulary::synthetic(config.n_conditions);
    Ok((0..config.n_patients)
        .map(|i| generate_patient(config, &vocab, i))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Range of crop area as a fraction of the image area.
    pub crop_scale: (f64, f64),
    pub out_size: usize,
    pub hflip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.8, 1.0),
            out_size: 32,
            hflip_prob: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.1,
            norm_mean: [0.5; 3],
            norm_std: [0.5; 3],
        }
    }
}

impl AugmentConfig {
    /// Resize and normalization only; what evaluation uses.
    pub fn deterministic(&self) -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            hflip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop_scale ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config("hflip_prob must lie in [0, 1]".into()));
        }
        if self.out_size == 0 {
            return Err(Error::Config("out_size must be positive".into()));
        }
        if self.norm_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("norm_std entries must be positive".into()));
        }
        for s in [self.brightness, self.contrast, self.saturation] {
            if !(0.0..1.0).contains(&s) {
                return Err(Error::Config("jitter strengths must lie in [0, 1)".into()));
            }
        }
        Ok(())
    }

    /// Output value range after normalization, per channel.
    pub fn value_bounds(&self) -> [(f64, f64); 3] {
        let mut out = [(0.0, 0.0); 3];
        for (c, o) in out.iter_mut().enumerate() {
            *o = (
                (0.0 - self.norm_mean[c]) / self.norm_std[c],
                (1.0 - self.norm_mean[c]) / self.norm_std[c],
            );
        }
        out
    }
}

/// Bilinear resize of the `side×side` window at `(y0, x0)` to `out×out`,
/// using half-pixel centres.
pub fn resize_window(image: &Image, y0: usize, x0: usize, side_h: usize, side_w: usize, out: usize) -> Image {
    if side_h == out && side_w == out {
        let mut img = Image::filled(out, out, 0.0);
        for y in 0..out {
            for x in 0..out {
                for c in 0..CHANNELS {
                    img.set(y, x, c, image.get(y0 + y, x0 + x, c));
                }
            }
        }
        return img;
    }
    let sy = side_h as f64 / out as f64;
    let sx = side_w as f64 / out as f64;
    let coord = |dst: usize, scale: f64, len: usize| -> (usize, usize, f64) {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = math::floor(src) as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut img = Image::filled(out, out, 0.0);
    for y in 0..out {
        let (ya, yb, wy) = coord(y, sy, side_h);
        for x in 0..out {
            let (xa, xb, wx) = coord(x, sx, side_w);
            for c in 0..CHANNELS {
                let p = |yy: usize, xx: usize| image.get(y0 + yy, x0 + xx, c);
                let top = p(ya, xa) * (1.0 - wx) + p(ya, xb) * wx;
                let bot = p(yb, xa) * (1.0 - wx) + p(yb, xb) * wx;
                img.set(y, x, c, top * (1.0 - wy) + bot * wy);
            }
        }
    }
    img
}

pub fn hflip(image: &Image) -> Image {
    let (h, w) = (image.height(), image.width());
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                out.set(y, x, c, image.get(y, w - 1 - x, c));
            }
        }
    }
    out
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn jitter<R: Rng>(img: &mut Image, cfg: &AugmentConfig, rng: &mut R) {
    let factor = |s: f64, rng: &mut R| rng.random_range(1.0 - s..=1.0 + s);
    if cfg.brightness > 0.0 {
        let f = factor(cfg.brightness, rng);
        for v in img.data_mut() {
            *v = (*v * f).clamp(0.0, 1.0);
        }
    }
    if cfg.contrast > 0.0 {
        let f = factor(cfg.contrast, rng);
        let px = img.data().len() / CHANNELS;
        let mean = img
            .data()
            .chunks(CHANNELS)
            .map(|p| luma(p[0], p[1], p[2]))
            .sum::<f64>()
            / px as f64;
        for v in img.data_mut() {
            *v = ((*v - mean) * f + mean).clamp(0.0, 1.0);
        }
    }
    if cfg.saturation > 0.0 {
        let f = factor(cfg.saturation, rng);
        for p in img.data_mut().chunks_mut(CHANNELS) {
            let g = luma(p[0], p[1], p[2]);
            for v in p.iter_mut() {
                *v = (g + (*v - g) * f).clamp(0.0, 1.0);
            }
        }
    }
}

pub fn normalize(img: &mut Image, cfg: &AugmentConfig) {
    for p in img.data_mut().chunks_mut(CHANNELS) {
        for (c, v) in p.iter_mut().enumerate() {
            *v = (*v - cfg.norm_mean[c]) / cfg.norm_std[c];
        }
    }
}

/// Random square crop → bilinear resize → horizontal flip → colour jitter
/// (clamped to `[0, 1]`) → per-channel normalization. A crop that rounds to
/// an empty window falls back to the whole image.
pub fn augment<R: Rng>(image: &Image, cfg: &AugmentConfig, rng: &mut R) -> Result<Image> {
    cfg.validate()?;
    let (h, w) = (image.height(), image.width());
    let (lo, hi) = cfg.crop_scale;
    let area = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    let side = math::round(math::sqrt(area) * h.min(w) as f64) as usize;
    let mut img = if side == 0 || side > h.min(w) || area >= 1.0 {
        resize_window(image, 0, 0, h, w, cfg.out_size)
    } else {
        let y0 = rng.random_range(0..=h - side);
        let x0 = rng.random_range(0..=w - side);
        resize_window(image, y0, x0, side, side, cfg.out_size)
    };
    if cfg.hflip_prob > 0.0 && rng.random::<f64>() < cfg.hflip_prob {
        img = hflip(&img);
    }
    jitter(&mut img, cfg, rng);
    if cfg.brightness == 0.0 && cfg.contrast == 0.0 && cfg.saturation == 0.0 {
        for v in img.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    normalize(&mut img, cfg);
    Ok(img)
}

/// Deterministic path for evaluation: full-image resize and normalization.
pub fn preprocess(image: &Image, cfg: &AugmentConfig) -> Image {
    let mut img = resize_window(image, 0, 0, image.height(), image.width(), cfg.out_size);
    for v in img.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    normalize(&mut img, cfg);
    img
}
