//! Pre-training: warmup schedule, AdamW and the epoch/batch loop.

use alloc::{boxed::Box, collections::BTreeMap, string::String, vec, vec::Vec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, AugmentConfig, PatientTriplet};
use crate::error::{Error, Result};
use crate::math;
use crate::model::{self, LossBreakdown, LossToggles, ModelConfig, LOGIT_SCALE};
use crate::nn::{Graph, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Schedule {
    /// Linear warmup, then flat at the peak.
    Constant,
    /// Linear warmup, then cosine decay to `min_lr` at `total_steps`.
    Cosine { total_steps: usize, min_lr: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Run exactly this many optimizer steps, cycling epochs as needed.
    pub max_steps: Option<usize>,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub loss: LossToggles,
    /// Random crop/flip/jitter on every batch; when off only resize and
    /// normalization are applied.
    pub augmentation: bool,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 10,
            max_steps: None,
            peak_lr: 1e-3,
            warmup_steps: 50,
            schedule: Schedule::Constant,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            loss: LossToggles::full(),
            augmentation: true,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        if !self.loss.any() {
            return Err(Error::Config("at least one loss level must be enabled".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        self.augment.validate()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn total_steps(&self, n_patients: usize) -> usize {
        self.max_steps
            .unwrap_or_else(|| self.epochs * n_patients.div_ceil(self.batch_size))
    }
}

/// Linear ramp from 0 to `peak_lr` over `warmup_steps`, then the schedule.
pub fn lr_at_step(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    match cfg.schedule {
        Schedule::Constant => cfg.peak_lr,
        Schedule::Cosine { total_steps, min_lr } => {
            let span = total_steps.saturating_sub(cfg.warmup_steps).max(1);
            let t = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
            min_lr + 0.5 * (cfg.peak_lr - min_lr) * (1.0 + math::cos(core::f64::consts::PI * t))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moment estimates keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub first: BTreeMap<String, Vec<f64>>,
    pub second: BTreeMap<String, Vec<f64>>,
}

/// One AdamW update for every parameter in `grads`. `step` is 1-based.
/// Decay is decoupled: `p ← p·(1 − lr·wd)` precedes the Adam delta. Names
/// in `no_decay` skip the decay. Nothing is modified if any gradient is
/// non-finite.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    moments: &mut Moments,
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
    no_decay: &[&str],
) -> Result<()> {
    if step == 0 {
        return Err(Error::Contract("AdamW step counter starts at 1".into()));
    }
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.clone()))?;
        if p.len() != g.len() {
            return Err(Error::Tensor(crate::tensor::TensorError::Shape {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: vec![g.len()],
            }));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    let bc1 = 1.0 - math::powi(cfg.beta1, step as i32);
    let bc2 = 1.0 - math::powi(cfg.beta2, step as i32);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above").data_mut();
        let m = moments
            .first
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = moments
            .second
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let decay = if no_decay.contains(&name.as_str()) {
            1.0
        } else {
            1.0 - lr * cfg.weight_decay
        };
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] = p[i] * decay - lr * mhat / (math::sqrt(vhat) + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss_left: f64,
    pub loss_right: f64,
    pub loss_patient: f64,
    pub loss_total: f64,
}

impl StepRecord {
    fn new(step: usize, lr: f64, b: &LossBreakdown) -> Self {
        Self {
            step,
            lr,
            loss_left: b.l_left,
            loss_right: b.l_right,
            loss_patient: b.l_patient,
            loss_total: b.total,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub params: ParamStore,
    pub moments: Moments,
    pub log: Vec<StepRecord>,
}

#[derive(Debug, Clone)]
pub struct Aborted {
    pub step: usize,
    pub last_good: ParamStore,
    pub log: Vec<StepRecord>,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum PretrainError {
    #[error(transparent)]
    Setup(#[from] Error),
    #[error("non-finite loss or gradient at step {}", .0.step)]
    NonFinite(Box<Aborted>),
}

/// Deterministic augmentation stream for a given step.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_A06E_0000_0000);
    rng.set_stream(step as u64);
    rng
}

fn prepare_batch(
    cohort: &[PatientTriplet],
    indices: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PatientTriplet>> {
    indices
        .iter()
        .map(|&i| {
            let p = &cohort[i];
            let (l, r) = if cfg.augmentation {
                (
                    data::augment(&p.left_image, &cfg.augment, rng)?,
                    data::augment(&p.right_image, &cfg.augment, rng)?,
                )
            } else {
                (
                    data::preprocess(&p.left_image, &cfg.augment),
                    data::preprocess(&p.right_image, &cfg.augment),
                )
            };
            Ok(PatientTriplet {
                patient_id: p.patient_id.clone(),
                left_image: l,
                right_image: r,
                report: String::new(),
                report_tokens: p.report_tokens.clone(),
                ground_truth: None,
            })
        })
        .collect()
}

/// The batch order for every step: per-epoch seeded shuffles, last partial
/// batch kept.
pub fn batch_schedule(n_patients: usize, cfg: &TrainConfig) -> Vec<Vec<usize>> {
    let total = cfg.total_steps(n_patients);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x05DE_F00D);
    let mut out = Vec::with_capacity(total);
    while out.len() < total {
        let mut order: Vec<usize> = (0..n_patients).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if out.len() == total {
                break;
            }
            out.push(chunk.to_vec());
        }
    }
    out
}

/// Runs the full pre-training loop. `on_step` sees every logged record.
pub fn pretrain(
    cohort: &[PatientTriplet],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> core::result::Result<PretrainOutcome, PretrainError> {
    if cohort.is_empty() {
        return Err(Error::Contract("cannot pre-train on an empty cohort".into()).into());
    }
    model_cfg.validate()?;
    cfg.validate()?;
    let mut params = model_cfg.init(cfg.seed)?;
    let mut moments = Moments::default();
    let mut log = Vec::new();
    let adamw = cfg.adamw();

    for (step, indices) in batch_schedule(cohort.len(), cfg).iter().enumerate() {
        let mut rng = step_rng(cfg.seed, step);
        let batch = prepare_batch(cohort, indices, cfg, &mut rng)?;
        let lr = lr_at_step(step, cfg);

        let mut g = Graph::new(&params);
        let out = model::forward_batch(&mut g, model_cfg, &batch, cfg.loss)?;
        let record = StepRecord::new(step, lr, &out.breakdown);
        let abort = |log: &Vec<StepRecord>, params: &ParamStore| {
            PretrainError::NonFinite(Box::new(Aborted {
                step,
                last_good: params.clone(),
                log: log.clone(),
            }))
        };
        if !out.breakdown.total.is_finite() {
            drop(g);
            return Err(abort(&log, &params));
        }
        let grads = g.tape.backward(out.terms.total).map_err(Error::from)?;
        let param_grads = g.param_grads(&grads);
        drop(g);

        match adamw_step(
            &mut params,
            &param_grads,
            &mut moments,
            step as u64 + 1,
            lr,
            &adamw,
            &[LOGIT_SCALE],
        ) {
            Ok(()) => {}
            Err(Error::NonFiniteGradient(_)) => return Err(abort(&log, &params)),
            Err(e) => return Err(e.into()),
        }
        on_step(&record);
        log.push(record);
    }
    Ok(PretrainOutcome {
        params,
        moments,
        log,
    })
}

/// In-batch retrieval over a whole (small) cohort with no augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalReport {
    pub breakdown: LossBreakdown,
    /// `[left, right, patient]` image→text top-1 accuracy.
    pub image_to_text: [f64; 3],
    /// `[left, right, patient]` text→image top-1 accuracy.
    pub text_to_image: [f64; 3],
}

pub fn evaluate_retrieval(
    params: &ParamStore,
    model_cfg: &ModelConfig,
    cohort: &[PatientTriplet],
    cfg: &TrainConfig,
) -> Result<RetrievalReport> {
    let indices: Vec<usize> = (0..cohort.len()).collect();
    let plain = TrainConfig {
        augmentation: false,
        ..cfg.clone()
    };
    let mut rng = step_rng(0, 0);
    let batch = prepare_batch(cohort, &indices, &plain, &mut rng)?;
    let mut g = Graph::inference(params);
    let out = model::forward_batch(&mut g, model_cfg, &batch, LossToggles::full())?;
    let n = cohort.len();
    let mut i2t = [0.0; 3];
    let mut t2i = [0.0; 3];
    for (k, s) in out.sims.iter().enumerate() {
        i2t[k] = model::top1_accuracy(g.tape.value(s.v2t), n);
        t2i[k] = model::top1_accuracy(g.tape.value(s.t2v), n);
    }
    Ok(RetrievalReport {
        breakdown: out.breakdown,
        image_to_text: i2t,
        text_to_image: t2i,
    })
}
