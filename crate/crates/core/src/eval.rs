//! Downstream evaluation: stratified splits, linear probing, fine-tuning and
//! rank-based AUROC / average-precision AUPR.

use alloc::{collections::BTreeMap, format, string::String, vec, vec::Vec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, AugmentConfig, PatientTriplet};
use crate::encoders::{self, ImageEncoderConfig, IMAGE_PREFIX};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::math;
use crate::nn::{self, Graph, ParamStore};
use crate::tensor::Var;
use crate::train::{adamw_step, AdamWConfig, Moments};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Multiclass,
    Multilabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledItem {
    pub image: Image,
    /// Exactly one class for multiclass tasks; any subset for multilabel.
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageDataset {
    pub items: Vec<LabeledItem>,
    pub task: TaskKind,
    pub n_classes: usize,
}

impl LabeledImageDataset {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::Config("n_classes must be positive".into()));
        }
        for (i, item) in self.items.iter().enumerate() {
            if self.task == TaskKind::Multiclass && item.labels.len() != 1 {
                return Err(Error::Config(format!(
                    "item {i}: multiclass items carry exactly one label"
                )));
            }
            if let Some(l) = item.labels.iter().find(|&&l| l >= self.n_classes) {
                return Err(Error::Config(format!(
                    "item {i}: label {l} outside [0, {})",
                    self.n_classes
                )));
            }
        }
        Ok(())
    }

    pub fn targets(&self, index: usize) -> Vec<bool> {
        let mut t = vec![false; self.n_classes];
        for &l in &self.items[index].labels {
            t[l] = true;
        }
        t
    }
}

/// One image per eye, labelled with that eye's findings (multilabel).
pub fn eye_dataset(cohort: &[PatientTriplet], n_conditions: usize) -> Result<LabeledImageDataset> {
    let mut items = Vec::with_capacity(cohort.len() * 2);
    for p in cohort {
        let gt = p.ground_truth.as_ref().ok_or_else(|| {
            Error::Contract(format!("patient {} has no ground-truth labels", p.patient_id))
        })?;
        for (img, ls) in [(&p.left_image, &gt.left), (&p.right_image, &gt.right)] {
            items.push(LabeledItem {
                image: img.clone(),
                labels: ls
                    .iter()
                    .enumerate()
                    .filter(|(_, on)| **on)
                    .map(|(k, _)| k)
                    .collect(),
            });
        }
    }
    Ok(LabeledImageDataset {
        items,
        task: TaskKind::Multilabel,
        n_classes: n_conditions,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratios: [0.56, 0.14, 0.3],
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|r| !(*r >= 0.0)) {
            return Err(Error::Config("split ratios must be non-negative".into()));
        }
        let sum: f64 = self.ratios.iter().sum();
        if math::abs(sum - 1.0) > 1e-9 {
            return Err(Error::Config(format!("split ratios sum to {sum}, not 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits `n` items into three counts by largest remainder. Ties in the
/// fractional part go to the earlier split.
pub fn largest_remainder(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, q) in counts.iter_mut().zip(&quotas) {
        *c = math::floor(*q) as usize;
    }
    let assigned: usize = counts.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - math::floor(quotas[a]);
        let fb = quotas[b] - math::floor(quotas[b]);
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Per-stratum partition, then concatenated and shuffled. Multiclass items
/// are stratified by class; multilabel items by their exact label set.
pub fn stratified_split(dataset: &LabeledImageDataset, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    dataset.validate()?;
    let mut seen = vec![false; dataset.n_classes];
    for item in &dataset.items {
        for &l in &item.labels {
            seen[l] = true;
        }
    }
    if let Some(class) = seen.iter().position(|s| !s) {
        return Err(Error::EmptyClass(class));
    }
    let mut strata: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for (i, item) in dataset.items.iter().enumerate() {
        let mut key = item.labels.clone();
        key.sort_unstable();
        strata.entry(key).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        let counts = largest_remainder(members.len(), &spec.ratios);
        let mut start = 0;
        for (k, c) in counts.iter().enumerate() {
            parts[k].extend_from_slice(&members[start..start + c]);
            start += c;
        }
    }
    for p in parts.iter_mut() {
        p.shuffle(&mut rng);
    }
    let [train, val, test] = parts;
    Ok(Splits { train, val, test })
}

fn require_both(labels: &[bool], what: &str) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "{what} needs at least one positive and one negative"
        )));
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUROC, `(wins + ½·ties) / (P·N)`, via average ranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract("scores and labels differ in length".into()));
    }
    let (pos, neg) = require_both(labels, "AUROC")?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (doubled) average ranks of positives keeps the arithmetic in
    // integers until the final division.
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1, doubled average = i + j + 2
        let avg2 = (i + j + 2) as u64;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum2 += avg2;
            }
        }
        i = j + 1;
    }
    let p = pos as u64;
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / 2.0 / (pos as f64 * neg as f64))
}

/// Average precision over positives in descending score order. Equal
/// scores keep their input order.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract("scores and labels differ in length".into()));
    }
    let pos = labels.iter().filter(|l| **l).count();
    if pos == 0 {
        return Err(Error::UndefinedMetric("AUPR needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &k) in order.iter().enumerate() {
        if labels[k] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / pos as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetric {
    pub class: usize,
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub auroc: f64,
    pub aupr: f64,
    pub per_class: Vec<ClassMetric>,
    pub excluded_classes: usize,
}

/// Macro average over classes whose AUROC is defined; the rest are counted
/// as excluded.
pub fn aggregate_metrics(per_class: Vec<ClassMetric>) -> Result<MetricSummary> {
    let included: Vec<&ClassMetric> = per_class.iter().filter(|c| c.auroc.is_some()).collect();
    if included.is_empty() {
        return Err(Error::UndefinedMetric("no class has a defined AUROC".into()));
    }
    let n = included.len() as f64;
    let auroc = included.iter().map(|c| c.auroc.unwrap_or(0.0)).sum::<f64>() / n;
    let aupr = included.iter().map(|c| c.aupr.unwrap_or(0.0)).sum::<f64>() / n;
    let excluded_classes = per_class.len() - included.len();
    Ok(MetricSummary {
        auroc,
        aupr,
        per_class,
        excluded_classes,
    })
}

/// One-vs-rest metrics from an `n × C` score matrix.
pub fn evaluate_scores(scores: &[Vec<f64>], targets: &[Vec<bool>], n_classes: usize) -> Result<MetricSummary> {
    let per_class = (0..n_classes)
        .map(|k| {
            let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
            let l: Vec<bool> = targets.iter().map(|t| t[k]).collect();
            ClassMetric {
                class: k,
                auroc: auroc(&s, &l).ok(),
                aupr: aupr(&s, &l).ok(),
            }
        })
        .collect();
    aggregate_metrics(per_class)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptMode {
    Probe,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub probe_lr: f64,
    pub finetune_lr: f64,
    pub weight_decay: f64,
    /// Train, validation and test fractions.
    pub split_ratios: [f64; 3],
    /// Number of seeded repetitions reported by the command line.
    pub seeds: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            probe_lr: 1e-2,
            finetune_lr: 1e-4,
            weight_decay: 0.01,
            split_ratios: SplitSpec::default().ratios,
            seeds: 5,
        }
    }
}

impl AdaptConfig {
    pub fn lr(&self, mode: AdaptMode) -> f64 {
        match mode {
            AdaptMode::Probe => self.probe_lr,
            AdaptMode::Finetune => self.finetune_lr,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub mode: AdaptMode,
    pub seed: u64,
    pub test: MetricSummary,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub val_auroc: Vec<f64>,
    pub epochs: usize,
    /// Image-encoder parameters after adaptation; unchanged for probing.
    pub encoder: ParamStore,
}

pub const HEAD_PREFIX: &str = "head";

fn head_store(d: usize, n_classes: usize, seed: u64) -> Result<ParamStore> {
    nn::init_params(&nn::linear_specs(HEAD_PREFIX, d, n_classes), seed)
}

/// Encoder-only store: the `img.*` parameters of a pre-trained model.
pub fn image_encoder_params(params: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    out.copy_prefix_from(params, &format!("{IMAGE_PREFIX}."));
    out
}

/// Classification loss on `[B×C]` logits: softmax cross-entropy for
/// multiclass, per-class binary cross-entropy for multilabel.
pub fn head_loss(g: &mut Graph<'_>, logits: Var, targets: &[Vec<bool>], task: TaskKind) -> Result<Var> {
    let b = targets.len();
    let c = g.tape.shape(logits)[1];
    match task {
        TaskKind::Multiclass => {
            let logp = g.tape.log_softmax_rows(logits)?;
            let mask: Vec<f64> = targets
                .iter()
                .flat_map(|t| t.iter().map(|&on| if on { 1.0 } else { 0.0 }))
                .collect();
            let mask = g.tape.constant(&[b, c], mask)?;
            let picked = g.tape.mul(logp, mask)?;
            let total = g.tape.sum_all(picked)?;
            Ok(g.tape.scale(total, -1.0 / b as f64)?)
        }
        TaskKind::Multilabel => {
            // log σ(z) and log(1 − σ(z)) as a two-way log-softmax over (z, 0).
            let z = g.tape.reshape(logits, &[b * c, 1])?;
            let zeros = g.tape.constant(&[b * c, 1], vec![0.0; b * c])?;
            let pair = g.tape.concat_last(&[z, zeros])?;
            let logp = g.tape.log_softmax_rows(pair)?;
            let mask: Vec<f64> = targets
                .iter()
                .flat_map(|t| t.iter().flat_map(|&on| if on { [1.0, 0.0] } else { [0.0, 1.0] }))
                .collect();
            let mask = g.tape.constant(&[b * c, 2], mask)?;
            let picked = g.tape.mul(logp, mask)?;
            let total = g.tape.sum_all(picked)?;
            Ok(g.tape.scale(total, -1.0 / (b * c) as f64)?)
        }
    }
}

/// Scores used for ranking: class probabilities for multiclass, logits for
/// multilabel (the sigmoid is monotone, so rankings agree).
fn scores_from_logits(logits: &[f64], c: usize, task: TaskKind) -> Vec<Vec<f64>> {
    logits
        .chunks(c)
        .map(|row| match task {
            TaskKind::Multilabel => row.to_vec(),
            TaskKind::Multiclass => {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| math::exp(v - max)).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|v| v / s).collect()
            }
        })
        .collect()
}

/// Frozen-encoder features for every item.
pub fn extract_features(
    encoder: &ParamStore,
    cfg: &ImageEncoderConfig,
    images: &[&Image],
    preprocess: &AugmentConfig,
) -> Result<Vec<Vec<f64>>> {
    images
        .iter()
        .map(|img| {
            let mut g = Graph::inference(encoder);
            let x = data::preprocess(img, preprocess);
            let v = encoders::encode_image(&mut g, cfg, &x)?;
            Ok(g.tape.value(v).to_vec())
        })
        .collect()
}

fn linear_logits(head: &ParamStore, features: &[Vec<f64>]) -> Vec<f64> {
    let w = head.get("head.w").expect("head weight");
    let b = head.get("head.b").expect("head bias");
    let (d, c) = (w.shape()[0], w.shape()[1]);
    let mut out = Vec::with_capacity(features.len() * c);
    for f in features {
        for k in 0..c {
            let mut s = b.data()[k];
            for i in 0..d {
                s += f[i] * w.data()[i * c + k];
            }
            out.push(s);
        }
    }
    out
}

struct Run<'a> {
    pretrained: &'a ParamStore,
    dataset: &'a LabeledImageDataset,
    splits: Splits,
    cfg: &'a AdaptConfig,
    adamw: AdamWConfig,
    seed: u64,
}

impl Run<'_> {
    fn targets(&self, idx: &[usize]) -> Vec<Vec<bool>> {
        idx.iter().map(|&i| self.dataset.targets(i)).collect()
    }

    fn batches(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut order = self.splits.train.clone();
        order.shuffle(rng);
        order.chunks(self.cfg.batch_size).map(|c| c.to_vec()).collect()
    }

    fn val_auroc(&self, logits: &[f64]) -> f64 {
        let c = self.dataset.n_classes;
        let scores = scores_from_logits(logits, c, self.dataset.task);
        evaluate_scores(&scores, &self.targets(&self.splits.val), c)
            .map(|m| m.auroc)
            .unwrap_or(f64::NAN)
    }
}

/// Linear probing or fine-tuning of the image encoder in `pretrained`.
///
/// The best epoch by validation macro AUROC is kept and scored on the test
/// split.
pub fn adapt(
    pretrained: &ParamStore,
    encoder_cfg: &ImageEncoderConfig,
    preprocess: &AugmentConfig,
    dataset: &LabeledImageDataset,
    cfg: &AdaptConfig,
    mode: AdaptMode,
    seed: u64,
) -> Result<AdaptOutcome> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }
    let split = SplitSpec {
        ratios: cfg.split_ratios,
        seed,
    };
    let splits = stratified_split(dataset, &split)?;
    if splits.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let run = Run {
        pretrained,
        dataset,
        splits,
        cfg,
        adamw: AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        },
        seed,
    };
    let encoder = image_encoder_params(pretrained);
    if encoder.is_empty() {
        return Err(Error::MissingParam(format!("{IMAGE_PREFIX}.*")));
    }
    match mode {
        AdaptMode::Probe => probe(&run, encoder, encoder_cfg, preprocess),
        AdaptMode::Finetune => finetune(&run, encoder, encoder_cfg, preprocess),
    }
}

fn probe(
    run: &Run<'_>,
    encoder: ParamStore,
    encoder_cfg: &ImageEncoderConfig,
    preprocess: &AugmentConfig,
) -> Result<AdaptOutcome> {
    let ds = run.dataset;
    let c = ds.n_classes;
    let images: Vec<&Image> = ds.items.iter().map(|it| &it.image).collect();
    let feats = extract_features(&encoder, encoder_cfg, &images, preprocess)?;
    let pick = |idx: &[usize]| -> Vec<Vec<f64>> { idx.iter().map(|&i| feats[i].clone()).collect() };
    let val_feats = pick(&run.splits.val);
    let test_feats = pick(&run.splits.test);

    let d = encoder_cfg.d_model;
    let mut head = head_store(d, c, run.seed)?;
    let mut moments = Moments::default();
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x9E37_79B9);
    let lr = run.cfg.lr(AdaptMode::Probe);
    let mut step = 0u64;
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut history = Vec::with_capacity(run.cfg.epochs);

    for epoch in 1..=run.cfg.epochs {
        for batch in run.batches(&mut rng) {
            let x: Vec<f64> = batch.iter().flat_map(|&i| feats[i].iter().copied()).collect();
            let mut g = Graph::new(&head);
            let xv = g.tape.constant(&[batch.len(), d], x)?;
            let logits = nn::linear(&mut g, xv, HEAD_PREFIX)?;
            let loss = head_loss(&mut g, logits, &run.targets(&batch), ds.task)?;
            let grads = g.tape.backward(loss)?;
            let pg = g.param_grads(&grads);
            drop(g);
            step += 1;
            adamw_step(&mut head, &pg, &mut moments, step, lr, &run.adamw, &[])?;
        }
        let score = run.val_auroc(&linear_logits(&head, &val_feats));
        history.push(score);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b || b.is_nan()) {
            best = Some((score, epoch, head.clone()));
        }
    }
    let (_, best_epoch, best_head) = best.expect("at least one epoch");
    let logits = linear_logits(&best_head, &test_feats);
    let test = evaluate_scores(
        &scores_from_logits(&logits, c, ds.task),
        &run.targets(&run.splits.test),
        c,
    )?;
    if encoder != image_encoder_params(run.pretrained) {
        return Err(Error::Contract("linear probe modified the frozen encoder".into()));
    }
    Ok(AdaptOutcome {
        mode: AdaptMode::Probe,
        seed: run.seed,
        test,
        best_epoch,
        val_auroc: history,
        epochs: run.cfg.epochs,
        encoder,
    })
}

fn finetune(
    run: &Run<'_>,
    encoder: ParamStore,
    encoder_cfg: &ImageEncoderConfig,
    preprocess: &AugmentConfig,
) -> Result<AdaptOutcome> {
    let ds = run.dataset;
    let c = ds.n_classes;
    let d = encoder_cfg.d_model;
    let inputs: Vec<Image> = ds
        .items
        .iter()
        .map(|it| data::preprocess(&it.image, preprocess))
        .collect();

    let mut params = encoder;
    for (name, t) in head_store(d, c, run.seed)?.iter() {
        params.insert(name, t.clone());
    }
    let mut moments = Moments::default();
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x9E37_79B9);
    let lr = run.cfg.lr(AdaptMode::Finetune);
    let mut step = 0u64;
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut history = Vec::with_capacity(run.cfg.epochs);

    let logits_for = |params: &ParamStore, idx: &[usize]| -> Result<Vec<f64>> {
        let mut feats = Vec::with_capacity(idx.len());
        for &i in idx {
            let mut g = Graph::inference(params);
            let v = encoders::encode_image(&mut g, encoder_cfg, &inputs[i])?;
            feats.push(g.tape.value(v).to_vec());
        }
        let mut head = ParamStore::new();
        head.copy_prefix_from(params, &format!("{HEAD_PREFIX}."));
        Ok(linear_logits(&head, &feats))
    };

    for epoch in 1..=run.cfg.epochs {
        for batch in run.batches(&mut rng) {
            let mut g = Graph::new(&params);
            let imgs: Vec<&Image> = batch.iter().map(|&i| &inputs[i]).collect();
            let feats = encoders::encode_images(&mut g, encoder_cfg, &imgs)?;
            let logits = nn::linear(&mut g, feats, HEAD_PREFIX)?;
            let loss = head_loss(&mut g, logits, &run.targets(&batch), ds.task)?;
            let grads = g.tape.backward(loss)?;
            let pg = g.param_grads(&grads);
            drop(g);
            step += 1;
            adamw_step(&mut params, &pg, &mut moments, step, lr, &run.adamw, &[])?;
        }
        let score = run.val_auroc(&logits_for(&params, &run.splits.val)?);
        history.push(score);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b || b.is_nan()) {
            best = Some((score, epoch, params.clone()));
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    let logits = logits_for(&best_params, &run.splits.test)?;
    let test = evaluate_scores(
        &scores_from_logits(&logits, c, ds.task),
        &run.targets(&run.splits.test),
        c,
    )?;
    Ok(AdaptOutcome {
        mode: AdaptMode::Finetune,
        seed: run.seed,
        test,
        best_epoch,
        val_auroc: history,
        epochs: run.cfg.epochs,
        encoder: image_encoder_params(&best_params),
    })
}

/// Mean of a metric over seeded runs.
pub fn mean_over(outcomes: &[AdaptOutcome], f: impl Fn(&AdaptOutcome) -> f64) -> f64 {
    outcomes.iter().map(f).sum::<f64>() / outcomes.len() as f64
}

pub fn mode_name(mode: AdaptMode) -> String {
    match mode {
        AdaptMode::Probe => "probe".into(),
        AdaptMode::Finetune => "finetune".into(),
    }
}
