//! End-to-end checks shared by the integration tests and the acceptance
//! report. Each returns a one-line summary or a description of the failure.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use pixelrt_core::autograd::{Graph, Grads};
use pixelrt_core::exec::Parallelism;
use pixelrt_core::mask::{BinaryMask, FrameSize, SpatioTemporalMask};
use pixelrt_core::params::ParamId;
use pixelrt_core::tensor::Matrix;
use pixelrt_core::Error;
use pixelrt_model::chat::{parse_response_objects, render_injected_prompt, render_prefill_target, SlotBinding, SlotKind, SpecialTokens};
use pixelrt_model::data::{generate_toy_corpus, render_training_conversation, SampleKind, ToyCorpusConfig, TrainSample};
use pixelrt_model::eval::{evaluate_corpus, EvalMode};
use pixelrt_model::loss::LossWeights;
use pixelrt_model::memory::{ObjectMemoryBank, Session};
use pixelrt_model::model::{ModelConfig, PixelModel};
use pixelrt_model::train::{apply_stage_policy, forward_phase, sample_loss, EarlyStop, StageConfig, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

fn fail(e: impl std::fmt::Display) -> String {
    e.to_string()
}

pub fn toy_samples(cfg: &ToyCorpusConfig) -> Vec<TrainSample> {
    generate_toy_corpus(cfg)
        .expect("toy corpus")
        .iter()
        .map(|s| s.to_train_sample().expect("toy sample"))
        .collect()
}

fn small_corpus(n: usize, seed: u64) -> Vec<TrainSample> {
    toy_samples(&ToyCorpusConfig {
        n_samples: n,
        clip_length: 3,
        frame_size: [32, 32],
        seed,
        ..Default::default()
    })
}

/// Mean batch loss and its gradient. The first call records the detached
/// values (mask J targets); later calls replay them so the function being
/// differentiated stays fixed.
fn batch_loss(
    model: &PixelModel,
    batch: &[TrainSample],
    seeds: &[u64],
    pins: &mut Vec<Vec<Matrix>>,
    parts: Option<&mut [f64; 5]>,
) -> Result<(f64, Grads), Error> {
    let weights = LossWeights::default();
    let replay = !pins.is_empty();
    let mut total = 0.0;
    let mut grads = Grads::default();
    let mut sums = [0.0; 5];
    for (k, (s, &seed)) in batch.iter().zip(seeds).enumerate() {
        let g = Graph::new(&model.store);
        let mut g = if replay {
            g.replaying_pins(pins[k].clone())
        } else {
            g.recording_pins()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = sample_loss(model, &mut g, s, &weights, &mut rng)?;
        total += g.scalar(l.total);
        grads.accumulate(&g.backward(l.total));
        let p = l.parts;
        for (acc, v) in sums.iter_mut().zip([p.lm, p.focal, p.dice, p.iou, p.objectness]) {
            *acc += v;
        }
        if !replay {
            pins.push(g.take_pins());
        }
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    if let Some(out) = parts {
        *out = sums.map(|v| v / n);
    }
    Ok((total / n, grads))
}

/// Central differences against backprop on `n_batches` toy batches. Each
/// parameter tensor contributes its largest-gradient coordinate and one
/// random coordinate.
pub fn gradient_check(n_batches: usize) -> Check {
    const H: f64 = 1e-5;
    const REL_TOL: f64 = 1e-3;
    // Below this absolute gap the difference is finite-difference roundoff.
    const ABS_FLOOR: f64 = 1e-7;
    let mut model = PixelModel::new(ModelConfig::tiny()).map_err(fail)?;
    let samples = small_corpus(2 * n_batches, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut seen = [0.0f64; 5];
    let (mut checked, mut worst) = (0usize, 0.0f64);
    for b in 0..n_batches {
        let batch = &samples[2 * b..2 * b + 2];
        let seeds = [rng.random(), rng.random()];
        let mut pins = Vec::new();
        let mut parts = [0.0; 5];
        let (_, grads) = batch_loss(&model, batch, &seeds, &mut pins, Some(&mut parts)).map_err(fail)?;
        for (s, p) in seen.iter_mut().zip(parts) {
            *s = s.max(p.abs());
        }
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            let len = model.store.entry(id).value.len();
            let analytic = |k: usize| grads.get(id).map_or(0.0, |m| m.data()[k]);
            let top = (0..len)
                .max_by(|&a, &c| analytic(a).abs().total_cmp(&analytic(c).abs()))
                .unwrap_or(0);
            for k in [top, rng.random_range(0..len)] {
                let orig = model.store.entry(id).value.data()[k];
                model.store.value_mut(id).data_mut()[k] = orig + H;
                let (up, _) = batch_loss(&model, batch, &seeds, &mut pins, None).map_err(fail)?;
                model.store.value_mut(id).data_mut()[k] = orig - H;
                let (down, _) = batch_loss(&model, batch, &seeds, &mut pins, None).map_err(fail)?;
                model.store.value_mut(id).data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * H);
                let a = analytic(k);
                let gap = (a - numeric).abs();
                let scale = a.abs().max(numeric.abs());
                if scale > ABS_FLOOR {
                    worst = worst.max(gap / scale);
                }
                if gap > ABS_FLOOR {
                    let rel = gap / scale;
                    if rel >= REL_TOL {
                        return Err(format!(
                            "batch {b}, {}[{k}]: backprop {a:.6e} vs finite difference {numeric:.6e} (rel {rel:.2e})",
                            model.store.entry(id).name
                        ));
                    }
                }
                checked += 1;
            }
        }
    }
    if let Some(i) = seen.iter().position(|&v| v == 0.0) {
        return Err(format!("loss component {i} was zero on every batch"));
    }
    Ok(format!("{checked} coordinates over {n_batches} batches, worst relative error {worst:.2e}"))
}

/// One optimizer step per stage preset; everything outside the stage must
/// keep its exact bits and something inside must move.
pub fn stage_freeze() -> Check {
    let samples = small_corpus(4, 3);
    let batch: Vec<&TrainSample> = samples.iter().collect();
    let mut out = Vec::new();
    for stage in 1..=3u8 {
        let mut model = PixelModel::new(ModelConfig::tiny()).map_err(fail)?;
        let cfg = TrainConfig {
            model: ModelConfig::tiny(),
            stage,
            steps: 10,
            warmup: 0.0,
            batch_size: 4,
            frames: 3,
            ..Default::default()
        };
        let preset = StageConfig::preset(stage).map_err(fail)?;
        let trainable = apply_stage_policy(&model.store, &preset).map_err(fail)?;
        let before: Vec<Vec<u64>> = model
            .store
            .entries()
            .iter()
            .map(|e| e.value.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut t = Trainer::new(&model, cfg).map_err(fail)?;
        t.step(&mut model, &batch).map_err(fail)?;
        let mut moved = 0;
        for (i, e) in model.store.entries().iter().enumerate() {
            let now: Vec<u64> = e.value.data().iter().map(|v| v.to_bits()).collect();
            if now != before[i] {
                if !trainable[i] {
                    return Err(format!("stage {stage}: frozen parameter {} changed", e.name));
                }
                moved += 1;
            }
        }
        if moved == 0 {
            return Err(format!("stage {stage}: no trainable parameter moved"));
        }
        let frozen = trainable.iter().filter(|t| !**t).count();
        out.push(format!("stage {stage}: {frozen} frozen intact, {moved} updated"));
    }
    Ok(out.join("; "))
}

fn random_object(rng: &mut ChaCha8Rng, clip_length: usize, size: FrameSize) -> SpatioTemporalMask {
    let mut m = SpatioTemporalMask::new(clip_length, size);
    for t in 0..clip_length {
        if !rng.random_bool(0.7) {
            continue;
        }
        let (h, w) = (size.height, size.width);
        let y0 = rng.random_range(0..h);
        let x0 = rng.random_range(0..w);
        let y1 = rng.random_range(y0..h);
        let x1 = rng.random_range(x0..w);
        let mask = BinaryMask::from_fn(size, |y, x| (y0..=y1).contains(&y) && (x0..=x1).contains(&x));
        m.insert(t, mask).expect("frame in range");
    }
    m
}

/// Fuzzed pre-fill and injection rounds directly on the memory bank.
pub fn protocol_conservation(sessions: usize) -> Check {
    let tokens = SpecialTokens::default();
    let size = FrameSize::new(16, 16).unwrap();
    let grid = FrameSize::new(4, 4).unwrap();
    let width = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let (mut slots_total, mut arity_errors) = (0usize, 0usize);
    for s in 0..sessions {
        let clip_length = rng.random_range(1..=6);
        let mut bank = ObjectMemoryBank::new();
        if !bank.is_empty() || !bank.bank_view().is_empty() {
            return Err(format!("session {s}: bank not empty at creation"));
        }
        let features: Vec<Matrix> = (0..clip_length)
            .map(|_| Matrix::from_vec(grid.area(), width, (0..grid.area() * width).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        for turn in 0..rng.random_range(1..=3) {
            let n = rng.random_range(1..=4u32);
            let ids: Vec<u32> = (0..n).map(|_| rng.random_range(1..=6)).collect::<BTreeSet<_>>().into_iter().collect();
            let response = render_prefill_target(&ids, &tokens).map_err(fail)?;
            let parse = parse_response_objects(&response.token_ids, &tokens).map_err(fail)?;
            if parse.object_ids() != ids {
                return Err(format!("session {s}: parsed {:?} from a response naming {ids:?}", parse.object_ids()));
            }
            let delta: i64 = [-1, 0, 0, 1][rng.random_range(0..4)];
            let count = (ids.len() as i64 + delta).max(0) as usize;
            let masks: Vec<_> = (0..count).map(|_| random_object(&mut rng, clip_length, size)).collect();
            let before = bank.ids();
            match bank.prefill(&parse, masks) {
                Err(Error::PrefillArity { .. }) if count != ids.len() => {
                    arity_errors += 1;
                    if bank.ids() != before {
                        return Err(format!("session {s}: failed pre-fill changed the bank"));
                    }
                    continue;
                }
                Ok(()) if count == ids.len() => {}
                other => {
                    return Err(format!(
                        "session {s} turn {turn}: {} objects, {count} masks gave {other:?}",
                        ids.len()
                    ))
                }
            }
            bank.prepare_injection(grid, &features, |v| v.to_vec()).map_err(fail)?;
            let pooled: BTreeSet<(u32, usize)> = bank
                .entries()
                .flat_map(|e| {
                    let id = e.object_id;
                    e.pooled().into_iter().flat_map(move |p| p.keys().map(move |&t| (id, t)))
                })
                .collect();
            let view = bank.bank_view();
            if view.is_empty() {
                if !pooled.is_empty() {
                    return Err(format!("session {s}: pooled vectors but an empty view"));
                }
                if !matches!(
                    render_injected_prompt("q", &view, clip_length, &tokens),
                    Err(Error::NothingToInject)
                ) {
                    return Err(format!("session {s}: empty view rendered"));
                }
                continue;
            }
            let seq = render_injected_prompt("What is [1]?", &view, clip_length, &tokens).map_err(fail)?;
            let emitted: Vec<(u32, usize)> = seq
                .slots
                .iter()
                .filter_map(|sl| match sl.binding {
                    SlotBinding::Mem { object_id, frame } => Some((object_id, frame)),
                    _ => None,
                })
                .collect();
            if seq.count(SlotKind::Mem) != pooled.len() || emitted.iter().copied().collect::<BTreeSet<_>>() != pooled {
                return Err(format!(
                    "session {s}: {} MEM slots for {} pooled vectors",
                    seq.count(SlotKind::Mem),
                    pooled.len()
                ));
            }
            let consumed = bank.resolve_mem_slots(&seq).map_err(fail)?;
            if consumed.len() != pooled.len() {
                return Err(format!("session {s}: {} vectors consumed of {}", consumed.len(), pooled.len()));
            }
            let emb = Matrix::zeros(seq.len(), width);
            let sub = bank.substitute_mem_tokens(&seq, &emb).map_err(fail)?;
            let changed = (0..seq.len()).filter(|&r| sub.row(r) != emb.row(r)).count();
            if changed > pooled.len() {
                return Err(format!("session {s}: {changed} rows replaced for {} slots", pooled.len()));
            }
            slots_total += pooled.len();
        }
    }
    Ok(format!("{sessions} sessions, {slots_total} MEM slots matched, {arity_errors} arity errors raised"))
}

fn seg_count(text: &str) -> usize {
    text.matches("<SEG>").count()
}

/// Teacher-forced routing over `samples` plus one inference turn per
/// segmentation sample; both must yield `token_count` decoder tokens per
/// `<SEG>`.
pub fn seg_routing_on(model: &PixelModel, samples: &[TrainSample]) -> Result<(usize, usize), String> {
    let per = model.cfg.decoder.token_count;
    let (mut segs, mut produced) = (0, 0);
    for s in samples {
        let mut g = Graph::new(&model.store);
        let clip = model.clip_vars(&mut g, &s.clip).map_err(fail)?;
        let phases = render_training_conversation(s, clip.grid, &model.tokens).map_err(fail)?;
        for p in &phases {
            let f = forward_phase(model, &mut g, &clip, s, p).map_err(fail)?;
            for slot in p.answer.slots.iter().filter(|sl| sl.binding.kind() == SlotKind::Seg) {
                let h = g.slice_rows(f.hidden, f.answer_start + slot.position, 1);
                let seg = model.seg_to_decoder_tokens(&mut g, h).map_err(fail)?;
                model.decode_mask(&mut g, seg, &clip).map_err(fail)?;
                produced += g.shape(seg).0;
                segs += 1;
            }
        }
        if s.kind == SampleKind::Segmentation || s.kind == SampleKind::Referring {
            let mut session = Session::new("routing", std::sync::Arc::new(s.clip.clone()));
            let out = model.run_turn(&mut session, &s.conversation[0].text, &s.prompts).map_err(fail)?;
            let k = seg_count(&out.answer) + out.prefill_response.as_deref().map_or(0, seg_count);
            if out.decoder_tokens != per * k {
                return Err(format!(
                    "{}: {} decoder tokens for {k} <SEG> with token_count {per}",
                    s.sample_id, out.decoder_tokens
                ));
            }
            segs += k;
            produced += out.decoder_tokens;
        }
    }
    if produced != per * segs {
        return Err(format!("{produced} decoder tokens for {segs} <SEG> with token_count {per}"));
    }
    Ok((segs, produced))
}

pub fn seg_routing_sweep() -> Check {
    let samples = small_corpus(5, 21);
    let mut out = Vec::new();
    for k in [1, 2, 4, 8] {
        let mut cfg = ModelConfig::tiny();
        cfg.decoder.token_count = k;
        let model = PixelModel::new(cfg).map_err(fail)?;
        let (segs, produced) = seg_routing_on(&model, &samples)?;
        let mut g = Graph::new(&model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in &samples {
            sample_loss(&model, &mut g, s, &LossWeights::default(), &mut rng).map_err(|e| format!("token_count {k}: {e}"))?;
        }
        out.push(format!("k={k}: {produced} tokens / {segs} SEG"));
    }
    Ok(out.join(", "))
}

/// The overfit run: default toy model on the default 8-sample corpus.
pub fn overfit_config() -> TrainConfig {
    TrainConfig {
        lr: Some(1e-3),
        early_stop: Some(EarlyStop::default()),
        ..Default::default()
    }
}

pub struct OverfitRun {
    pub model: PixelModel,
    pub samples: Vec<TrainSample>,
    pub steps: usize,
    pub elapsed: Duration,
    pub fit: (f64, f64),
}

pub fn overfit_run(cfg: TrainConfig) -> Result<OverfitRun, String> {
    let samples = toy_samples(&ToyCorpusConfig::default());
    let mut model = PixelModel::new(cfg.model.clone()).map_err(fail)?;
    let mut trainer = Trainer::new(&model, cfg).map_err(fail)?;
    let start = Instant::now();
    let summary = trainer
        .run(&mut model, &samples, None, |m| {
            Ok(evaluate_corpus(m, &samples, EvalMode::TeacherForced, Parallelism::Auto)?.fit())
        })
        .map_err(fail)?;
    let elapsed = start.elapsed();
    let fit = match summary.eval {
        Some(f) => f,
        None => evaluate_corpus(&model, &samples, EvalMode::TeacherForced, Parallelism::Auto)
            .map_err(fail)?
            .fit(),
    };
    Ok(OverfitRun {
        model,
        samples,
        steps: summary.steps,
        elapsed,
        fit,
    })
}

pub fn oracle_injection_is_exact(model: &PixelModel, samples: &[TrainSample]) -> Check {
    let r = evaluate_corpus(model, samples, EvalMode::OracleInjection, Parallelism::Auto).map_err(fail)?;
    let a = r.aggregate.ok_or("no segmented objects")?;
    if a.jf != 1.0 {
        return Err(format!("oracle-injection J&F {}", a.jf));
    }
    Ok("oracle-injection J&F = 1.0".into())
}
