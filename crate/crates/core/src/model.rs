//! Binocular fusion, report decoupling and the three-level contrastive loss.
//!
//! For a batch of `N` patients the model produces six `[N×d]` feature
//! matrices: image features for the left eye, right eye and the fused patient
//! view, and text features for the same three levels decoded from the report's
//! class token. Each level contributes a symmetric InfoNCE term; the total is
//! their sum.

use alloc::{format, vec::Vec};

use serde::{Deserialize, Serialize};

use crate::data::PatientTriplet;
use crate::encoders::{self, ImageEncoderConfig, TextEncoderConfig};
use crate::error::{Error, Result};
use crate::math;
use crate::nn::{self, Graph, Init, ParamSpec};
use crate::tensor::Var;

pub const FUSION_PREFIX: &str = "fuse";
pub const LEFT_HEAD: &str = "dec_left";
pub const RIGHT_HEAD: &str = "dec_right";
pub const PATIENT_HEAD: &str = "dec_patient";
pub const LOGIT_SCALE: &str = "logit_scale";

/// `exp(logit_scale)` never exceeds this.
pub const MAX_SCALE: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image: ImageEncoderConfig,
    pub text: TextEncoderConfig,
    /// Initial log-temperature; the default is `ln(1/0.07)`.
    pub init_logit_scale: f64,
    /// When set, similarities are multiplied by this constant instead of the
    /// learned `exp(logit_scale)`. `1.0` gives raw cosine logits.
    pub fixed_scale: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image: ImageEncoderConfig::default(),
            text: TextEncoderConfig::default(),
            init_logit_scale: math::ln(1.0 / 0.07),
            fixed_scale: None,
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.image.d_model
    }

    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.text.validate()?;
        if self.image.d_model != self.text.d_model {
            return Err(Error::Config(format!(
                "image d_model {} differs from text d_model {}",
                self.image.d_model, self.text.d_model
            )));
        }
        if let Some(s) = self.fixed_scale {
            if !(s > 0.0 && s <= MAX_SCALE) {
                return Err(Error::Config(format!("fixed_scale {s} outside (0, {MAX_SCALE}]")));
            }
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.d_model();
        let mut specs = self.image.param_specs();
        specs.extend(self.text.param_specs());
        specs.extend(nn::mlp_specs(FUSION_PREFIX, 2 * d, d, d));
        for head in [LEFT_HEAD, RIGHT_HEAD, PATIENT_HEAD] {
            specs.extend(nn::mlp_specs(head, d, d, d));
        }
        specs.push(ParamSpec::new(LOGIT_SCALE, &[1], Init::Constant(self.init_logit_scale)));
        specs
    }

    pub fn init(&self, seed: u64) -> Result<nn::ParamStore> {
        self.validate()?;
        nn::init_params(&self.param_specs(), seed)
    }
}

/// Which contrastive levels contribute to the total.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossToggles {
    pub left: bool,
    pub right: bool,
    pub patient: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self::full()
    }
}

impl LossToggles {
    pub fn full() -> Self {
        Self {
            left: true,
            right: true,
            patient: true,
        }
    }

    pub fn patient_only() -> Self {
        Self {
            left: false,
            right: false,
            patient: true,
        }
    }

    pub fn monocular_only() -> Self {
        Self {
            left: true,
            right: true,
            patient: false,
        }
    }

    pub fn any(&self) -> bool {
        self.left || self.right || self.patient
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchFeatures {
    pub v_left: Var,
    pub v_right: Var,
    pub v_patient: Var,
    pub t0: Var,
    pub t_left: Var,
    pub t_right: Var,
    pub t_patient: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct SimilarityPair {
    pub v2t: Var,
    pub t2v: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_left: f64,
    pub l_right: f64,
    pub l_patient: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub left: Var,
    pub right: Var,
    pub patient: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchOutput {
    pub features: BatchFeatures,
    pub sims: [SimilarityPair; 3],
    pub terms: LossTerms,
    pub breakdown: LossBreakdown,
}

/// Patient-level image feature from `[V_l ⊕ V_r]` through the fusion MLP.
pub fn fuse_patient(g: &mut Graph<'_>, v_left: Var, v_right: Var) -> Result<Var> {
    if g.tape.shape(v_left) != g.tape.shape(v_right) {
        return Err(Error::Tensor(crate::tensor::TensorError::Shape {
            op: "fuse_patient",
            lhs: g.tape.shape(v_left).to_vec(),
            rhs: g.tape.shape(v_right).to_vec(),
        }));
    }
    let joined = g.tape.concat_last(&[v_left, v_right])?;
    nn::two_layer_mlp(g, joined, FUSION_PREFIX)
}

/// Left, right and patient text features from the report class token.
pub fn decouple_text(g: &mut Graph<'_>, t0: Var) -> Result<(Var, Var, Var)> {
    let l = nn::two_layer_mlp(g, t0, LEFT_HEAD)?;
    let r = nn::two_layer_mlp(g, t0, RIGHT_HEAD)?;
    let p = nn::two_layer_mlp(g, t0, PATIENT_HEAD)?;
    Ok((l, r, p))
}

/// The similarity multiplier as a scalar on the tape.
pub fn logit_scale(g: &mut Graph<'_>, cfg: &ModelConfig) -> Result<Var> {
    match cfg.fixed_scale {
        Some(s) => Ok(g.tape.constant(&[1], alloc::vec![s])?),
        None => {
            let raw = g.param(LOGIT_SCALE)?;
            let clamped = g.tape.clamp_max(raw, math::ln(MAX_SCALE))?;
            Ok(g.tape.exp(clamped)?)
        }
    }
}

/// Scaled cosine similarities between rows of `v` and rows of `t`.
pub fn similarity_pair(g: &mut Graph<'_>, v: Var, t: Var, scale: Var) -> Result<SimilarityPair> {
    if g.tape.shape(v) != g.tape.shape(t) {
        return Err(Error::Tensor(crate::tensor::TensorError::Shape {
            op: "similarity_pair",
            lhs: g.tape.shape(v).to_vec(),
            rhs: g.tape.shape(t).to_vec(),
        }));
    }
    let vn = g.tape.l2_normalize_rows(v)?;
    let tn = g.tape.l2_normalize_rows(t)?;
    let tt = g.tape.transpose(tn)?;
    let cos = g.tape.matmul(vn, tt)?;
    let v2t = g.tape.scale_by(cos, scale)?;
    let t2v = g.tape.transpose(v2t)?;
    Ok(SimilarityPair { v2t, t2v })
}

fn cross_entropy_diagonal(g: &mut Graph<'_>, logits: Var) -> Result<Var> {
    let logp = g.tape.log_softmax_rows(logits)?;
    let diag = g.tape.diagonal(logp)?;
    let mean = g.tape.mean_all(diag)?;
    Ok(g.tape.scale(mean, -1.0)?)
}

/// `½ (CE(P_v2t, I) + CE(P_t2v, I))` with batch-mean reduction.
pub fn infonce_symmetric(g: &mut Graph<'_>, sim: SimilarityPair) -> Result<Var> {
    let a = cross_entropy_diagonal(g, sim.v2t)?;
    let b = cross_entropy_diagonal(g, sim.t2v)?;
    let s = g.tape.add(a, b)?;
    Ok(g.tape.scale(s, 0.5)?)
}

/// All three levels are always evaluated; only enabled ones enter `total`.
pub fn tripartite_loss(
    g: &mut Graph<'_>,
    sims: &[SimilarityPair; 3],
    toggles: LossToggles,
) -> Result<(LossTerms, LossBreakdown)> {
    if !toggles.any() {
        return Err(Error::Config("at least one loss level must be enabled".into()));
    }
    let left = infonce_symmetric(g, sims[0])?;
    let right = infonce_symmetric(g, sims[1])?;
    let patient = infonce_symmetric(g, sims[2])?;
    let enabled: Vec<Var> = [(toggles.left, left), (toggles.right, right), (toggles.patient, patient)]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, v)| *v)
        .collect();
    let mut total = enabled[0];
    for &v in &enabled[1..] {
        total = g.tape.add(total, v)?;
    }
    let breakdown = LossBreakdown {
        l_left: g.tape.scalar(left),
        l_right: g.tape.scalar(right),
        l_patient: g.tape.scalar(patient),
        total: g.tape.scalar(total),
    };
    Ok((
        LossTerms {
            left,
            right,
            patient,
            total,
        },
        breakdown,
    ))
}

/// Similarity pairs for the left, right and patient levels.
pub fn level_similarities(
    g: &mut Graph<'_>,
    feats: &BatchFeatures,
    scale: Var,
) -> Result<[SimilarityPair; 3]> {
    Ok([
        similarity_pair(g, feats.v_left, feats.t_left, scale)?,
        similarity_pair(g, feats.v_right, feats.t_right, scale)?,
        similarity_pair(g, feats.v_patient, feats.t_patient, scale)?,
    ])
}

/// Encodes a batch, builds every feature matrix and evaluates the loss.
pub fn forward_batch(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    batch: &[PatientTriplet],
    toggles: LossToggles,
) -> Result<BatchOutput> {
    if batch.is_empty() {
        return Err(Error::Contract("forward_batch needs at least one patient".into()));
    }
    let lefts: Vec<_> = batch.iter().map(|p| &p.left_image).collect();
    let rights: Vec<_> = batch.iter().map(|p| &p.right_image).collect();
    let v_left = encoders::encode_images(g, &cfg.image, &lefts)?;
    let v_right = encoders::encode_images(g, &cfg.image, &rights)?;
    let v_patient = fuse_patient(g, v_left, v_right)?;

    let t0_rows = batch
        .iter()
        .map(|p| encoders::encode_text(g, &cfg.text, &p.report_tokens).map(|e| e.t0))
        .collect::<Result<Vec<_>>>()?;
    let t0 = g.tape.stack_rows(&t0_rows)?;
    let (t_left, t_right, t_patient) = decouple_text(g, t0)?;

    let features = BatchFeatures {
        v_left,
        v_right,
        v_patient,
        t0,
        t_left,
        t_right,
        t_patient,
    };
    let scale = logit_scale(g, cfg)?;
    let sims = level_similarities(g, &features, scale)?;
    let (terms, breakdown) = tripartite_loss(g, &sims, toggles)?;
    Ok(BatchOutput {
        features,
        sims,
        terms,
        breakdown,
    })
}

/// Fraction of rows whose argmax is the diagonal entry.
pub fn top1_accuracy(matrix: &[f64], n: usize) -> f64 {
    let hits = (0..n)
        .filter(|&i| {
            let row = &matrix[i * n..(i + 1) * n];
            row.iter().enumerate().all(|(j, v)| j == i || *v < row[i])
        })
        .count();
    hits as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;
    use alloc::vec;

    fn mlp_store(prefix: &str, d_in: usize, d: usize, seed: u64) -> ParamStore {
        nn::init_params(&nn::mlp_specs(prefix, d_in, d, d), seed).unwrap()
    }

    #[test]
    fn fuse_zero_weights_and_order_sensitivity() {
        let mut store = mlp_store(FUSION_PREFIX, 6, 3, 1);
        let mut g = Graph::new(&store);
        let l = g.tape.constant(&[2, 3], vec![0.1, 0.5, -0.3, 1.0, 0.0, 0.2]).unwrap();
        let r = g.tape.constant(&[2, 3], vec![-0.7, 0.4, 0.9, 0.3, 0.3, -1.0]).unwrap();
        let a = fuse_patient(&mut g, l, r).unwrap();
        let b = fuse_patient(&mut g, r, l).unwrap();
        assert_eq!(g.tape.shape(a), &[2, 3]);
        assert_ne!(g.tape.value(a), g.tape.value(b));

        for (_, t) in store.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new(&store);
        let l = g.tape.constant(&[1, 3], vec![0.1, 0.5, -0.3]).unwrap();
        let r = g.tape.constant(&[1, 3], vec![0.2, 0.2, 0.2]).unwrap();
        let z = fuse_patient(&mut g, l, r).unwrap();
        assert_eq!(g.tape.shape(z), &[1, 3]);
        assert!(g.tape.value(z).iter().all(|v| *v == 0.0));
    }

    fn head_store(seed: u64) -> ParamStore {
        let mut specs = nn::mlp_specs(LEFT_HEAD, 2, 2, 2);
        specs.extend(nn::mlp_specs(RIGHT_HEAD, 2, 2, 2));
        specs.extend(nn::mlp_specs(PATIENT_HEAD, 2, 2, 2));
        nn::init_params(&specs, seed).unwrap()
    }

    #[test]
    fn decouple_heads_are_isolated() {
        let store = head_store(3);
        let mut g = Graph::new(&store);
        let t0 = g.tape.constant(&[2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let (l, r, p) = decouple_text(&mut g, t0).unwrap();
        let before = [g.tape.tensor(l), g.tape.tensor(r), g.tape.tensor(p)];

        let mut changed = store.clone();
        changed.get_mut("dec_left.fc1.w").unwrap().data_mut()[0] += 0.5;
        let mut g = Graph::new(&changed);
        let t0 = g.tape.constant(&[2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let (l, r, p) = decouple_text(&mut g, t0).unwrap();
        assert_ne!(g.tape.tensor(l), before[0]);
        assert_eq!(g.tape.tensor(r), before[1]);
        assert_eq!(g.tape.tensor(p), before[2]);

        let mut zero = store.clone();
        for (_, t) in zero.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new(&zero);
        let t0 = g.tape.constant(&[2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let (l, r, p) = decouple_text(&mut g, t0).unwrap();
        for v in [l, r, p] {
            assert!(g.tape.value(v).iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn decouple_matches_scalar_oracle() {
        let mut store = ParamStore::new();
        let put = |s: &mut ParamStore, n: &str, shape: &[usize], d: &[f64]| {
            s.insert(n, Tensor::new(shape.to_vec(), d.to_vec()).unwrap());
        };
        let w1 = [0.5, -0.25, 1.0, 0.75];
        let b1 = [0.1, -0.1];
        let w2 = [1.5, 0.5, -0.5, 2.0];
        let b2 = [0.0, 0.3];
        for (k, head) in [LEFT_HEAD, RIGHT_HEAD, PATIENT_HEAD].iter().enumerate() {
            let f = 1.0 + k as f64;
            let sw1: Vec<f64> = w1.iter().map(|v| v * f).collect();
            put(&mut store, &format!("{head}.fc1.w"), &[2, 2], &sw1);
            put(&mut store, &format!("{head}.fc1.b"), &[2], &b1);
            put(&mut store, &format!("{head}.fc2.w"), &[2, 2], &w2);
            put(&mut store, &format!("{head}.fc2.b"), &[2], &b2);
        }
        let x = [0.8, -0.6];
        let gelu = |v: f64| 0.5 * v * (1.0 + libm::erf(v / 2f64.sqrt()));
        let oracle = |f: f64| {
            let h: Vec<f64> = (0..2)
                .map(|j| gelu(b1[j] + x[0] * w1[j] * f + x[1] * w1[2 + j] * f))
                .collect();
            [
                b2[0] + h[0] * w2[0] + h[1] * w2[2],
                b2[1] + h[0] * w2[1] + h[1] * w2[3],
            ]
        };
        let mut g = Graph::new(&store);
        let t0 = g.tape.constant(&[1, 2], x.to_vec()).unwrap();
        let (l, r, p) = decouple_text(&mut g, t0).unwrap();
        for (k, v) in [l, r, p].iter().enumerate() {
            let want = oracle(1.0 + k as f64);
            for (a, b) in g.tape.value(*v).iter().zip(want) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn similarity_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let one = g.tape.constant(&[1], vec![1.0]).unwrap();
        let v = g.tape.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = similarity_pair(&mut g, v, v, one).unwrap();
        assert_eq!(g.tape.value(s.v2t), &[1.0, 0.0, 0.0, 1.0]);

        let a = g.tape.constant(&[2, 2], vec![1.0, 0.0, 2.0, 0.0]).unwrap();
        let b = g.tape.constant(&[2, 2], vec![0.0, 3.0, 0.0, 1.0]).unwrap();
        let s = similarity_pair(&mut g, a, b, one).unwrap();
        assert!(g.tape.value(s.v2t).iter().all(|x| *x == 0.0));

        let h = core::f64::consts::FRAC_1_SQRT_2;
        let t = g.tape.constant(&[2, 2], vec![1.0, 0.0, h, h]).unwrap();
        let s = similarity_pair(&mut g, v, t, one).unwrap();
        let want = [1.0, h, 0.0, h];
        for (x, w) in g.tape.value(s.v2t).iter().zip(want) {
            assert!((x - w).abs() < 1e-15);
        }
        let vt = g.tape.value(s.v2t).to_vec();
        let tv = g.tape.value(s.t2v).to_vec();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(vt[i * 2 + j], tv[j * 2 + i]);
            }
        }
    }

    fn infonce_of(p: &[f64], n: usize) -> f64 {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let v2t = g.tape.constant(&[n, n], p.to_vec()).unwrap();
        let t2v = g.tape.transpose(v2t).unwrap();
        let l = infonce_symmetric(&mut g, SimilarityPair { v2t, t2v }).unwrap();
        g.tape.scalar(l)
    }

    #[test]
    fn infonce_examples() {
        let l = infonce_of(&[0.7; 16], 4);
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let l = infonce_of(&[20.0, 0.0, 0.0, 20.0], 2);
        assert!(l < 1e-3);
        let l = infonce_of(&[2.0, 0.0, 0.0, 2.0], 2);
        assert!((l - (1.0 + (-2f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.126928).abs() < 1e-6);
        assert_eq!(infonce_of(&[3.3], 1), 0.0);
    }

    #[test]
    fn tripartite_toggles() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let mk = |g: &mut Graph<'_>, val: f64| {
            let v2t = g.tape.constant(&[4, 4], vec![val; 16]).unwrap();
            let t2v = g.tape.transpose(v2t).unwrap();
            SimilarityPair { v2t, t2v }
        };
        let sims = [mk(&mut g, 0.1), mk(&mut g, -2.0), mk(&mut g, 5.0)];
        let (_, b) = tripartite_loss(&mut g, &sims, LossToggles::full()).unwrap();
        assert!((b.total - 3.0 * 4f64.ln()).abs() < 1e-12);
        assert!((b.total - 4.158883).abs() < 1e-6);

        let (_, b) = tripartite_loss(&mut g, &sims, LossToggles::patient_only()).unwrap();
        assert_eq!(b.total, b.l_patient);
        assert!(b.l_left > 0.0 && b.l_right > 0.0);

        let off = LossToggles {
            left: false,
            right: false,
            patient: false,
        };
        assert!(matches!(
            tripartite_loss(&mut g, &sims, off),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn top1_accuracy_counts_strict_diagonal_wins() {
        assert_eq!(top1_accuracy(&[1.0, 0.0, 0.0, 1.0], 2), 1.0);
        assert_eq!(top1_accuracy(&[1.0, 1.0, 0.0, 1.0], 2), 0.5);
    }
}
