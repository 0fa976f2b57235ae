//! Acceptance suite: runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retclip::checkpoint::{decode, encode, Checkpoint};
use retclip::logs::metrics_csv;
use retclip_core::data::{self, PatientTriplet, SyntheticCohortConfig};
use retclip_core::eval::{self, aupr, auroc, AdaptConfig, AdaptMode};
use retclip_core::gradcheck::{self, GradcheckConfig};
use retclip_core::model::{self, LossToggles, ModelConfig, SimilarityPair};
use retclip_core::nn::{Graph, ParamStore};
use retclip_core::train::{self, lr_at_step, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn cohort(n: usize, seed: u64) -> Vec<PatientTriplet> {
    data::generate_cohort(&SyntheticCohortConfig {
        n_patients: n,
        seed,
        ..Default::default()
    })
    .expect("cohort")
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    for eps in [1e-6, 1e-5] {
        let report = gradcheck::run_suite(
            &GradcheckConfig {
                eps,
                ..Default::default()
            },
            0,
        )
        .expect("gradcheck runs");
        worst = worst.max(report.worst());
        failed.extend(report.components.iter().filter(|c| !c.passed()).map(|c| c.name.clone()));
    }
    let elapsed = start.elapsed();
    outcome(
        failed.is_empty() && elapsed < Duration::from_secs(30),
        format!(
            "{} op components + end-to-end loss at eps 1e-6 and 1e-5, worst rel. error {worst:.2e}, {:.1} s{}",
            gradcheck::op_cases().len(),
            secs(elapsed),
            if failed.is_empty() { String::new() } else { format!(", failing: {failed:?}") }
        ),
    )
}

fn loss_calibration() -> Outcome {
    let ln4 = 4f64.ln();
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let m = g.tape.constant(&[4, 4], vec![0.37; 16]).expect("matrix");
    let pair = SimilarityPair { v2t: m, t2v: m };
    let (_, b) = model::tripartite_loss(&mut g, &[pair; 3], LossToggles::full()).expect("loss");
    let direct = [b.l_left, b.l_right, b.l_patient]
        .iter()
        .all(|l| (l - ln4).abs() <= 1e-9)
        && (b.total - 3.0 * ln4).abs() <= 1e-9;

    // The same through the full model: constant output layers make every
    // feature identical, so every similarity entry is equal.
    let cfg = ModelConfig::default();
    let mut params = cfg.init(0).expect("init");
    for (name, t) in params.iter_mut() {
        let output_layer = ["img.proj.", "fuse.fc2.", "dec_left.fc2.", "dec_right.fc2.", "dec_patient.fc2."]
            .iter()
            .any(|p| name.starts_with(p));
        if output_layer {
            let fill = if name.ends_with(".b") { 0.1 } else { 0.0 };
            t.data_mut().iter_mut().for_each(|v| *v = fill);
        }
    }
    let mut g = Graph::inference(&params);
    let batch = cohort(4, 1);
    let out = model::forward_batch(&mut g, &cfg, &batch, LossToggles::full()).expect("forward");
    let m = out.breakdown;
    let through_model = [m.l_left, m.l_right, m.l_patient]
        .iter()
        .all(|l| (l - ln4).abs() <= 1e-9)
        && (m.total - 3.0 * ln4).abs() <= 1e-9;
    outcome(
        direct && through_model,
        format!(
            "levels {:.12} / {:.12} / {:.12}, total {:.12} vs 3 ln 4 = {:.12}",
            m.l_left,
            m.l_right,
            m.l_patient,
            m.total,
            3.0 * ln4
        ),
    )
}

fn overfit_config() -> TrainConfig {
    TrainConfig {
        max_steps: Some(200),
        augmentation: false,
        ..Default::default()
    }
}

fn overfit_retrieval() -> (Outcome, Option<ParamStore>) {
    let c = cohort(8, 0);
    let mcfg = ModelConfig::default();
    let tcfg = overfit_config();
    let start = Instant::now();
    let out = match train::pretrain(&c, &mcfg, &tcfg, |_| {}) {
        Ok(o) => o,
        Err(e) => return (outcome(false, format!("pretraining failed: {e}")), None),
    };
    let elapsed = start.elapsed();
    let final_loss = out.log.last().map(|r| r.loss_total).unwrap_or(f64::NAN);
    let rep = train::evaluate_retrieval(&out.params, &mcfg, &c, &tcfg).expect("retrieval");
    let all_top1 = rep.image_to_text.iter().chain(&rep.text_to_image).all(|a| *a == 1.0);
    let pass = final_loss < 0.1 && all_top1 && elapsed < Duration::from_secs(60);
    (
        outcome(
            pass,
            format!(
                "final loss {final_loss:.4}, i2t {:?}, t2i {:?}, {:.1} s",
                rep.image_to_text,
                rep.text_to_image,
                secs(elapsed)
            ),
        ),
        Some(out.params),
    )
}

fn additivity_and_permutation() -> Outcome {
    let mcfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (mut worst_add, mut worst_perm) = (0f64, 0f64);
    for i in 0..100u64 {
        let params = mcfg.init(i).expect("init");
        let n = rng.random_range(2..7);
        let mut batch = cohort(n, 1000 + i);
        let toggles = [LossToggles::full(), LossToggles::patient_only(), LossToggles::monocular_only()][i as usize % 3];
        let mut g = Graph::inference(&params);
        let b = model::forward_batch(&mut g, &mcfg, &batch, toggles).expect("forward").breakdown;
        let sum: f64 = [(toggles.left, b.l_left), (toggles.right, b.l_right), (toggles.patient, b.l_patient)]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, v)| v)
            .sum();
        worst_add = worst_add.max((b.total - sum).abs());

        for k in (1..batch.len()).rev() {
            batch.swap(k, rng.random_range(0..=k));
        }
        let mut g = Graph::inference(&params);
        let p = model::forward_batch(&mut g, &mcfg, &batch, toggles).expect("forward").breakdown;
        worst_perm = worst_perm.max((b.total - p.total).abs());
    }
    outcome(
        worst_add <= 1e-12 && worst_perm <= 1e-9,
        format!("100 batches: max |total − Σ terms| {worst_add:.1e}, max permutation drift {worst_perm:.1e}"),
    )
}

fn freezing_contract() -> Outcome {
    let c = cohort(24, 7);
    let mcfg = ModelConfig::default();
    let tcfg = TrainConfig {
        epochs: 2,
        ..Default::default()
    };
    let trained = train::pretrain(&c, &mcfg, &tcfg, |_| {}).expect("pretrain");
    let ckpt = Checkpoint {
        model: mcfg,
        train: tcfg.clone(),
        params: trained.params,
        moments: None,
    };
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("model.rclp");
    retclip::save_checkpoint(&path, &ckpt).expect("save");
    let on_disk = std::fs::read(&path).expect("read");
    let loaded = retclip::load_checkpoint(&path).expect("load");

    let ds = eval::eye_dataset(&c, 4).expect("dataset");
    let acfg = AdaptConfig {
        epochs: 3,
        ..Default::default()
    };
    let probe = eval::adapt(&loaded.params, &mcfg.image, &tcfg.augment, &ds, &acfg, AdaptMode::Probe, 0).expect("probe");
    let mut after = loaded.params.clone();
    for (name, t) in probe.encoder.iter() {
        after.insert(name, t.clone());
    }
    let probe_bytes = encode(&Checkpoint {
        params: after,
        ..loaded.clone()
    });
    let frozen = probe_bytes == on_disk;

    let ft = eval::adapt(&loaded.params, &mcfg.image, &tcfg.augment, &ds, &acfg, AdaptMode::Finetune, 0).expect("finetune");
    let before = eval::image_encoder_params(&loaded.params);
    let changed = before
        .iter()
        .zip(ft.encoder.iter())
        .filter(|((_, a), (_, b))| a.data() != b.data())
        .count();
    outcome(
        frozen && changed > 0,
        format!(
            "probe: encoder bytes identical = {frozen}; fine-tune: {changed}/{} encoder tensors changed",
            before.len()
        ),
    )
}

fn pair_auroc(s: &[f64], l: &[bool]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if l[i] && !l[j] {
                pairs += 1;
                twice += if s[i] > s[j] { 2 } else if s[i] == s[j] { 1 } else { 0 };
            }
        }
    }
    twice as f64 / 2.0 / pairs as f64
}

fn brute_ap(s: &[f64], l: &[bool]) -> f64 {
    let p = l.iter().filter(|y| **y).count();
    let mut terms = Vec::new();
    for k in (0..s.len()).filter(|&k| l[k]) {
        let above = |j: usize| s[j] > s[k] || (s[j] == s[k] && j < k);
        let rank = (0..s.len()).filter(|&j| above(j)).count() + 1;
        let hits = (0..s.len()).filter(|&j| l[j] && above(j)).count() + 1;
        terms.push((rank, hits as f64 / rank as f64));
    }
    // Accumulate in rank order so rounding matches a single ranked pass.
    terms.sort_by_key(|t| t.0);
    terms.iter().map(|t| t.1).sum::<f64>() / p as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    let mut instances = 0;
    while instances < 200 {
        let n = rng.random_range(2..=50);
        let levels = rng.random_range(2..12);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / 3.0).collect();
        let l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if !l.iter().any(|y| *y) || l.iter().all(|y| *y) {
            continue;
        }
        instances += 1;
        let a = auroc(&s, &l).expect("auroc");
        let ap = aupr(&s, &l).expect("aupr");
        let warped: Vec<f64> = s.iter().map(|v| (2.0 * v).exp() - 7.0).collect();
        if a != pair_auroc(&s, &l) || ap != brute_ap(&s, &l) || auroc(&warped, &l).expect("auroc") != a {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{instances} instances (n ≤ 50, with ties): {mismatches} mismatches against pair-count / precision oracles and monotone transform"),
    )
}

/// Pre-training epochs per ablation run; five seeds times three variants
/// must fit the runtime budget on a single core.
const ABLATION_EPOCHS: usize = 6;

fn ablation_direction() -> Outcome {
    let start = Instant::now();
    let c = cohort(500, 2024);
    let ds = eval::eye_dataset(&c, 4).expect("dataset");
    let mcfg = ModelConfig::default();
    let variants = [LossToggles::full(), LossToggles::patient_only(), LossToggles::monocular_only()];
    // Seed s drives both pre-training and the probe split, so the mean
    // covers pre-training variance as well as probe variance.
    let means: Vec<(f64, Vec<f64>)> = variants
        .iter()
        .map(|toggles| {
            let runs: Vec<f64> = (0..5u64)
                .map(|seed| {
                    let tcfg = TrainConfig {
                        loss: *toggles,
                        epochs: ABLATION_EPOCHS,
                        seed,
                        ..Default::default()
                    };
                    let params = train::pretrain(&c, &mcfg, &tcfg, |_| {}).expect("pretrain").params;
                    eval::adapt(&params, &mcfg.image, &tcfg.augment, &ds, &AdaptConfig::default(), AdaptMode::Probe, seed)
                        .expect("probe")
                        .test
                        .auroc
                })
                .collect();
            (runs.iter().sum::<f64>() / runs.len() as f64, runs)
        })
        .collect();
    let elapsed = start.elapsed();
    let (full, patient, mono) = (means[0].0, means[1].0, means[2].0);
    let pass = full - patient >= -0.01 && full - mono >= -0.01 && elapsed < Duration::from_secs(600);
    let fmt = |runs: &[f64]| runs.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ");
    outcome(
        pass,
        format!(
            "probe macro AUROC mean of 5 seeds: full {full:.4} [{}], patient-only {patient:.4} [{}], monocular-only {mono:.4} [{}]; margins {:+.4} / {:+.4}; {:.0} s",
            fmt(&means[0].1),
            fmt(&means[1].1),
            fmt(&means[2].1),
            full - patient,
            full - mono,
            secs(elapsed)
        ),
    )
}

fn warmup_schedule() -> Outcome {
    let cfg = TrainConfig {
        peak_lr: 3e-5,
        warmup_steps: 50,
        ..Default::default()
    };
    let ramp: Vec<f64> = (0..=50).map(|s| lr_at_step(s, &cfg)).collect();
    let monotone = ramp.windows(2).all(|w| w[0] <= w[1]);
    let pass = ramp[0] == 0.0 && ramp[50] == 3e-5 && monotone;
    outcome(
        pass,
        format!("lr(0) = {}, lr(25) = {:e}, lr(50) = {:e}, monotone ramp = {monotone}", ramp[0], ramp[25], ramp[50]),
    )
}

fn run_once(c: &[PatientTriplet], mcfg: &ModelConfig, tcfg: &TrainConfig) -> (Vec<u8>, String) {
    let out = train::pretrain(c, mcfg, tcfg, |_| {}).expect("pretrain");
    let bytes = encode(&Checkpoint {
        model: *mcfg,
        train: tcfg.clone(),
        params: out.params,
        moments: Some(out.moments),
    });
    (bytes, metrics_csv(&out.log))
}

fn determinism() -> Outcome {
    let c = cohort(20, 3);
    let mcfg = ModelConfig::default();
    let tcfg = TrainConfig {
        max_steps: Some(12),
        batch_size: 8,
        seed: 17,
        ..Default::default()
    };
    let (a_bytes, a_log) = run_once(&c, &mcfg, &tcfg);
    let (b_bytes, b_log) = run_once(&c, &mcfg, &tcfg);
    let other = TrainConfig { seed: 18, ..tcfg.clone() };
    let (c_bytes, _) = run_once(&c, &mcfg, &other);
    let pass = a_bytes == b_bytes && a_log == b_log && a_bytes != c_bytes;
    outcome(
        pass,
        format!(
            "two runs: checkpoints identical = {}, metric logs identical = {}, different seed differs = {}",
            a_bytes == b_bytes,
            a_log == b_log,
            a_bytes != c_bytes
        ),
    )
}

fn checkpoint_round_trip(trained: Option<ParamStore>) -> Outcome {
    let mcfg = ModelConfig::default();
    let params = trained.unwrap_or_else(|| mcfg.init(0).expect("init"));
    let ckpt = Checkpoint {
        model: mcfg,
        train: overfit_config(),
        params,
        moments: None,
    };
    let bytes = encode(&ckpt);
    let loaded = match decode(&bytes) {
        Ok(l) => l,
        Err(e) => return outcome(false, format!("reload failed: {e}")),
    };
    let stable = encode(&loaded) == bytes;
    let batch = cohort(8, 0);
    let forward = |p: &ParamStore| {
        let mut g = Graph::inference(p);
        let out = model::forward_batch(&mut g, &mcfg, &batch, LossToggles::full()).expect("forward");
        let f = out.features;
        let mut outputs: Vec<Vec<f64>> = [f.v_left, f.v_right, f.v_patient, f.t_left, f.t_right, f.t_patient]
            .iter()
            .map(|v| g.tape.value(*v).to_vec())
            .collect();
        outputs.push(vec![out.breakdown.l_left, out.breakdown.l_right, out.breakdown.l_patient, out.breakdown.total]);
        outputs
    };
    let a = forward(&ckpt.params);
    let b = forward(&loaded.params);
    // Relative error per output block: max |Δ| over max |value|.
    let worst = a
        .iter()
        .zip(&b)
        .map(|(x, y)| {
            let scale = x.iter().fold(0f64, |m, v| m.max(v.abs()));
            x.iter().zip(y).fold(0f64, |m, (p, q)| m.max((p - q).abs())) / scale
        })
        .fold(0f64, f64::max);
    outcome(
        worst <= 1e-6 && stable,
        format!("max relative forward difference {worst:.2e} after f32 reload; save→load→save byte-identical = {stable}"),
    )
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |id: u32, name: &'static str, o: Outcome| {
        println!("[{}] criterion {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };
    report(1, "gradient correctness", gradient_correctness());
    report(2, "loss calibration", loss_calibration());
    let (o, trained) = overfit_retrieval();
    report(3, "overfit retrieval", o);
    report(4, "additivity and permutation invariance", additivity_and_permutation());
    report(5, "freezing contract", freezing_contract());
    report(6, "metric oracles", metric_oracles());
    report(7, "ablation direction", ablation_direction());
    report(8, "warmup schedule", warmup_schedule());
    report(9, "determinism", determinism());
    report(10, "checkpoint round-trip", checkpoint_round_trip(trained));

    let failed: Vec<u32> = results.iter().filter(|(_, _, o)| !o.pass).map(|(id, _, _)| *id).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.0} s",
        results.len() - failed.len(),
        results.len(),
        secs(start.elapsed())
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
