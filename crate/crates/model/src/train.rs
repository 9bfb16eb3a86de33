//! Stage policies, sampling rules, the per-sample loss graph and the AdamW
//! training loop.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use pixelrt_core::autograd::{Grads, Graph, Var};
use pixelrt_core::exec::{self, Parallelism};
use pixelrt_core::mask::{region_similarity_j, BinaryMask, FrameSize};
use pixelrt_core::params::{Block, ParamStore};
use pixelrt_core::tensor::Matrix;
use pixelrt_core::{Error, Result};

use crate::chat::SlotBinding;
use crate::data::{render_training_conversation, TrainSample, TrainingPhase};
use crate::loss::{
    dice_on_graph, focal_on_graph, iou_mae_on_graph, objectness_on_graph, total_loss, total_on_graph, LossComponents,
    LossWeights, DICE_EPS, FOCAL_ALPHA, FOCAL_GAMMA,
};
use crate::model::{join_turn, token_grid, ClipVars, DecoderVars, ModelConfig, PixelModel};
use crate::prompt::encode_mask_on_graph;

pub const MAX_TRAINING_OBJECTS: usize = 5;
pub const TRAINING_FRAMES: usize = 8;

/// Which blocks a stage updates, and at what learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    pub trainable_blocks: BTreeSet<Block>,
    pub lr_map: BTreeMap<Block, f64>,
}

impl StageConfig {
    /// The three-stage recipe: prompt encoder, then the language-to-mask
    /// projector, then everything.
    pub fn preset(stage: u8) -> Result<Self> {
        let (blocks, lr): (Vec<Block>, fn(Block) -> f64) = match stage {
            1 => (vec![Block::SparsePromptEncoder], |_| 1e-3),
            2 => (vec![Block::L2mProjector], |_| 1e-3),
            3 => (Block::ALL.to_vec(), |b| if b == Block::MaskDecoder { 5e-6 } else { 2e-5 }),
            other => return Err(Error::Config(format!("stage {other} is not one of 1, 2, 3"))),
        };
        Ok(Self {
            stage,
            lr_map: blocks.iter().map(|&b| (b, lr(b))).collect(),
            trainable_blocks: blocks.into_iter().collect(),
        })
    }

    /// Builds a stage from block names, checking each one.
    pub fn from_names(stage: u8, names: &[&str], lr: f64) -> Result<Self> {
        let blocks = names
            .iter()
            .map(|n| n.parse::<Block>())
            .collect::<Result<BTreeSet<_>>>()?;
        let cfg = Self {
            stage,
            lr_map: blocks.iter().map(|&b| (b, lr)).collect(),
            trainable_blocks: blocks,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage) {
            return Err(Error::Config(format!("stage {} is not one of 1, 2, 3", self.stage)));
        }
        if let Some(b) = self.trainable_blocks.iter().find(|b| !self.lr_map.contains_key(b)) {
            return Err(Error::Config(format!("no learning rate for trainable block {b}")));
        }
        if let Some((b, lr)) = self.lr_map.iter().find(|(_, lr)| !(lr.is_finite() && **lr >= 0.0)) {
            return Err(Error::Config(format!("learning rate {lr} for {b} is invalid")));
        }
        Ok(())
    }

    /// Multiplies every learning rate by `factor`.
    pub fn scaled(mut self, factor: f64) -> Self {
        for lr in self.lr_map.values_mut() {
            *lr *= factor;
        }
        self
    }
}

/// One flag per parameter: whether the stage updates it.
pub fn apply_stage_policy(store: &ParamStore, stage: &StageConfig) -> Result<Vec<bool>> {
    stage.validate()?;
    Ok(store
        .ids()
        .map(|id| stage.trainable_blocks.contains(&store.block_of(id)))
        .collect())
}

/// Up to five entries, uniformly without replacement, kept in input order.
pub fn select_training_objects<T: Clone>(objects: &[T], rng: &mut impl Rng) -> Vec<T> {
    let k = objects.len().min(MAX_TRAINING_OBJECTS);
    let mut picked = index::sample(rng, objects.len(), k).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| objects[i].clone()).collect()
}

/// `count` frame indices in temporal order: distinct when the clip is long
/// enough, drawn with replacement otherwise.
pub fn sample_frames(clip_length: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    assert!(clip_length >= 1, "cannot sample frames from an empty clip");
    let mut out = if clip_length >= count {
        index::sample(rng, clip_length, count).into_vec()
    } else {
        (0..count).map(|_| rng.random_range(0..clip_length)).collect()
    };
    out.sort_unstable();
    out
}

/// Linear warmup over `warmup` of the run, then cosine decay to zero.
pub fn lr_factor(step: usize, total: usize, warmup: f64) -> f64 {
    let warm = ((total as f64 * warmup).ceil() as usize).max(1);
    if step < warm {
        return (step + 1) as f64 / warm as f64;
    }
    let span = total.saturating_sub(warm).max(1);
    let p = ((step - warm) as f64 / span as f64).min(1.0);
    0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
        }
    }
}

/// AdamW with per-block learning rates. Parameters without a gradient are
/// left untouched, moments included.
pub struct AdamW {
    cfg: AdamWConfig,
    moments: Vec<Option<(Matrix, Matrix)>>,
    steps: Vec<i32>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            moments: vec![None; store.len()],
            steps: vec![0; store.len()],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr_of: impl Fn(Block) -> f64) {
        let mut scale = 1.0;
        if self.cfg.grad_clip > 0.0 {
            // Sum in parameter order so the result does not depend on map order.
            let mut parts: Vec<_> = grads.iter().map(|(id, g)| (id.index(), g.data().iter().map(|v| v * v).sum::<f64>())).collect();
            parts.sort_by_key(|p| p.0);
            let norm = parts.iter().map(|p| p.1).sum::<f64>().sqrt();
            if norm > self.cfg.grad_clip {
                scale = self.cfg.grad_clip / norm;
            }
        }
        let c = &self.cfg;
        for (id, g) in grads.iter() {
            let lr = lr_of(store.block_of(id));
            let i = id.index();
            self.steps[i] += 1;
            let t = self.steps[i];
            let (m, v) = self.moments[i].get_or_insert_with(|| (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols())));
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let w = store.value_mut(id);
            for (((wv, &gv), mv), vv) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gv = gv * scale;
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let update = (*mv / bc1) / ((*vv / bc2).sqrt() + c.eps);
                *wv -= lr * (update + c.weight_decay * *wv);
            }
        }
    }
}

/// Graph values of one supervised phase.
pub struct PhaseVars {
    /// Hidden states of the whole input.
    pub hidden: Var,
    /// Row of the first answer token in `hidden`.
    pub answer_start: usize,
    /// Mean cross-entropy over the answer tokens, and how many there are.
    pub lm_loss: Var,
    pub lm_tokens: usize,
}

/// Teacher-forced forward pass of one phase. `<MEM>` rows are pooled from
/// the ground-truth masks on the graph so the projector is trained.
pub fn forward_phase(
    model: &PixelModel,
    g: &mut Graph,
    clip: &ClipVars,
    sample: &TrainSample,
    phase: &TrainingPhase,
) -> Result<PhaseVars> {
    let (seq, offset) = join_turn(&phase.prompt, &phase.answer);
    let mut rows = model.ref_rows(g, clip, &seq, &sample.prompts)?;
    for slot in &seq.slots {
        if let SlotBinding::Mem { object_id, frame } = slot.binding {
            let mask = sample
                .gt_masks
                .get(&object_id)
                .ok_or(Error::DanglingReference(object_id))?
                .frame_or_empty(frame);
            let feats = *clip
                .visual
                .get(frame)
                .ok_or_else(|| Error::Range(format!("<MEM> frame {frame} outside the clip")))?;
            let row = encode_mask_on_graph(g, &mask, feats, clip.grid, &model.m2l)
                .map_err(|_| Error::UnresolvedSlot { object_id, frame })?;
            rows.insert(slot.position, row);
        }
    }
    let x = model.embed_turn(g, clip, &seq.token_ids, &rows)?;
    let hidden = model.lm.hidden(g, x)?;
    let base = clip.visual_tokens();
    // Row `base + offset - 1 + j` predicts answer token `j`.
    let n = phase.answer.len();
    let from = g.slice_rows(hidden, base + offset - 1, n);
    let logits = model.lm.head.forward(g, from);
    let targets = phase.answer.token_ids.iter().map(|&t| Some(t as usize)).collect();
    let lm_loss = g.cross_entropy(logits, targets);
    Ok(PhaseVars {
        hidden,
        answer_start: base + offset,
        lm_loss,
        lm_tokens: n,
    })
}

/// A `<SEG>` in some phase, with the object it must segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegTarget {
    pub phase: usize,
    /// Position in the phase's answer.
    pub position: usize,
    pub object_id: u32,
}

pub fn seg_targets(phases: &[TrainingPhase]) -> Vec<SegTarget> {
    let mut out = Vec::new();
    for (i, p) in phases.iter().enumerate() {
        for slot in &p.answer.slots {
            if let SlotBinding::Seg { object_id } = slot.binding {
                out.push(SegTarget {
                    phase: i,
                    position: slot.position,
                    object_id,
                });
            }
        }
    }
    out
}

/// Ground truth of one object at the decoder resolution, one row per frame.
pub fn decoder_targets(sample: &TrainSample, object_id: u32, resolution: usize) -> Result<(Matrix, Vec<BinaryMask>, Vec<bool>)> {
    let m = sample.gt_masks.get(&object_id).ok_or(Error::DanglingReference(object_id))?;
    let size = FrameSize::new(resolution, resolution)?;
    let frames: Vec<BinaryMask> = (0..sample.clip.len())
        .map(|t| m.frame_or_empty(t).resize_nearest(size))
        .collect();
    let visible = (0..sample.clip.len()).map(|t| m.is_visible(t)).collect();
    let mut data = Vec::with_capacity(frames.len() * size.area());
    for f in &frames {
        data.extend(f.to_f64());
    }
    Ok((Matrix::from_vec(frames.len(), size.area(), data), frames, visible))
}

/// Mean per-frame J of the binarized decoder logits against `gt`.
pub fn decoder_j(g: &Graph, upsampled: Var, gt: &[BinaryMask]) -> Result<f64> {
    let v = g.value(upsampled);
    let mut j = 0.0;
    for (t, gt) in gt.iter().enumerate() {
        let pred = BinaryMask::from_logits(gt.size(), v.row(t))?;
        j += region_similarity_j(&pred, gt)?;
    }
    Ok(j / gt.len() as f64)
}

/// Everything one sample contributes to a step.
pub struct SampleLoss {
    pub total: Var,
    pub parts: LossComponents,
    /// Mean J of the selected objects at the decoder resolution.
    pub mask_j: Option<f64>,
}

/// Builds the full loss of one (already frame-sampled) sample.
pub fn sample_loss(
    model: &PixelModel,
    g: &mut Graph,
    sample: &TrainSample,
    weights: &LossWeights,
    rng: &mut impl Rng,
) -> Result<SampleLoss> {
    let clip = model.clip_vars(g, &sample.clip)?;
    let phases = render_training_conversation(sample, clip.grid, &model.tokens)?;
    let mut fwd = Vec::with_capacity(phases.len());
    for p in &phases {
        fwd.push(forward_phase(model, g, &clip, sample, p)?);
    }
    let n_tokens: usize = fwd.iter().map(|f| f.lm_tokens).sum();
    let mut lm = g.constant(Matrix::scalar(0.0));
    for f in &fwd {
        let w = g.scale(f.lm_loss, f.lm_tokens as f64 / n_tokens.max(1) as f64);
        lm = g.add(lm, w);
    }

    let chosen = select_training_objects(&seg_targets(&phases), rng);
    let res = model.cfg.decoder.resolution;
    let zero = g.constant(Matrix::scalar(0.0));
    let (mut focal, mut dice, mut iou, mut obj) = (zero, zero, zero, zero);
    let mut js = Vec::new();
    for target in &chosen {
        let f = &fwd[target.phase];
        let h = g.slice_rows(f.hidden, f.answer_start + target.position, 1);
        let seg = model.seg_to_decoder_tokens(g, h)?;
        let dec: DecoderVars = model.decode_mask(g, seg, &clip)?;
        let up = model.decoder.upsampled(g, &dec);
        let (gt, gt_frames, visible) = decoder_targets(sample, target.object_id, res)?;
        let j = decoder_j(g, up, &gt_frames)?;
        js.push(j);
        let j = g.pin(Matrix::scalar(j)).get(0, 0);
        let l = focal_on_graph(g, up, &gt, FOCAL_GAMMA, FOCAL_ALPHA);
        focal = g.add(focal, l);
        let l = dice_on_graph(g, up, &gt, DICE_EPS);
        dice = g.add(dice, l);
        let l = iou_mae_on_graph(g, dec.iou_pred, j);
        iou = g.add(iou, l);
        let l = objectness_on_graph(g, dec.objectness_logits, &visible);
        obj = g.add(obj, l);
    }
    if !chosen.is_empty() {
        let k = 1.0 / chosen.len() as f64;
        focal = g.scale(focal, k);
        dice = g.scale(dice, k);
        iou = g.scale(iou, k);
        obj = g.scale(obj, k);
    }
    let parts = LossComponents {
        lm: g.scalar(lm),
        focal: g.scalar(focal),
        dice: g.scalar(dice),
        iou: g.scalar(iou),
        objectness: g.scalar(obj),
    };
    total_loss(&parts, weights)?;
    let total = total_on_graph(g, [lm, focal, dice, iou, obj], weights);
    Ok(SampleLoss {
        total,
        parts,
        mask_j: (!js.is_empty()).then(|| js.iter().sum::<f64>() / js.len() as f64),
    })
}

/// Stops a run once the train set is fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStop {
    pub mask_j: f64,
    pub lm_loss: f64,
    /// Evaluate every this many steps.
    pub every: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            mask_j: 0.8,
            lm_loss: 0.1,
            every: 25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    /// A preset stage number, unless `stage_config` is given.
    pub stage: u8,
    pub stage_config: Option<StageConfig>,
    /// Replaces every learning rate of the stage when set.
    pub lr: Option<f64>,
    pub weights: LossWeights,
    pub optimizer: AdamWConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub warmup: f64,
    pub frames: usize,
    pub early_stop: Option<EarlyStop>,
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            stage: 3,
            stage_config: None,
            lr: None,
            weights: LossWeights::default(),
            optimizer: AdamWConfig::default(),
            steps: 2000,
            batch_size: 8,
            warmup: 0.03,
            frames: TRAINING_FRAMES,
            early_stop: None,
            parallel: true,
        }
    }
}

impl TrainConfig {
    /// Reads TOML or JSON, chosen by extension.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.resolved_stage()?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn resolved_stage(&self) -> Result<StageConfig> {
        let mut stage = match &self.stage_config {
            Some(s) => s.clone(),
            None => StageConfig::preset(self.stage)?,
        };
        if let Some(lr) = self.lr {
            for v in stage.lr_map.values_mut() {
                *v = lr;
            }
        }
        stage.validate()?;
        Ok(stage)
    }

    pub fn parallelism(&self) -> Parallelism {
        if self.parallel {
            Parallelism::Auto
        } else {
            Parallelism::Sequential
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lm: f64,
    pub focal: f64,
    pub dice: f64,
    pub iou: f64,
    pub objectness: f64,
    pub total: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_j: Option<f64>,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub stage: StageConfig,
    pub trainable: Vec<bool>,
    optimizer: AdamW,
    rng: ChaCha8Rng,
    pub step: usize,
}

impl Trainer {
    pub fn new(model: &PixelModel, cfg: TrainConfig) -> Result<Self> {
        let stage = cfg.resolved_stage()?;
        let trainable = apply_stage_policy(&model.store, &stage)?;
        Ok(Self {
            optimizer: AdamW::new(&model.store, cfg.optimizer.clone()),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            stage,
            trainable,
            cfg,
            step: 0,
        })
    }

    /// Losses and averaged gradients of a batch, without updating.
    pub fn batch_gradients(&mut self, model: &PixelModel, batch: &[&TrainSample]) -> Result<(Grads, StepMetrics)> {
        let frames = self.cfg.frames;
        // Draw all randomness up front so both execution modes agree.
        let jobs: Vec<(TrainSample, u64)> = batch
            .iter()
            .map(|s| {
                let idx = sample_frames(s.clip.len(), frames, &mut self.rng);
                (s.select(&idx), self.rng.next_u64())
            })
            .collect();
        let weights = self.cfg.weights;
        let trainable = &self.trainable;
        let results = exec::map(self.cfg.parallelism(), &jobs, |(sample, seed)| -> Result<_> {
            let mut g = Graph::new(&model.store).with_trainable(trainable);
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let loss = sample_loss(model, &mut g, sample, &weights, &mut rng)?;
            Ok((g.backward(loss.total), loss.parts, g.scalar(loss.total), loss.mask_j))
        });
        let mut grads = Grads::default();
        let mut m = StepMetrics {
            step: self.step,
            lm: 0.0,
            focal: 0.0,
            dice: 0.0,
            iou: 0.0,
            objectness: 0.0,
            total: 0.0,
            lr: 0.0,
            mask_j: None,
        };
        let n = batch.len().max(1) as f64;
        let mut js = Vec::new();
        for r in results {
            let (gr, parts, total, j) = r?;
            grads.accumulate(&gr);
            m.lm += parts.lm / n;
            m.focal += parts.focal / n;
            m.dice += parts.dice / n;
            m.iou += parts.iou / n;
            m.objectness += parts.objectness / n;
            m.total += total / n;
            js.extend(j);
        }
        grads.scale(1.0 / n);
        if !grads.all_finite() {
            return Err(Error::TrainingAbort(format!("non-finite gradient at step {}", self.step)));
        }
        m.mask_j = (!js.is_empty()).then(|| js.iter().sum::<f64>() / js.len() as f64);
        Ok((grads, m))
    }

    /// One optimizer step on `batch`.
    pub fn step(&mut self, model: &mut PixelModel, batch: &[&TrainSample]) -> Result<StepMetrics> {
        let (grads, mut m) = self.batch_gradients(model, batch)?;
        let factor = lr_factor(self.step, self.cfg.steps, self.cfg.warmup);
        let lr_map = self.stage.lr_map.clone();
        self.optimizer
            .step(&mut model.store, &grads, |b| lr_map.get(&b).copied().unwrap_or(0.0) * factor);
        m.lr = factor * lr_map.values().copied().fold(0.0, f64::max);
        self.step += 1;
        Ok(m)
    }

    /// Picks the next batch: the whole set when it fits, else a random draw.
    pub fn next_batch<'a>(&mut self, samples: &'a [TrainSample]) -> Vec<&'a TrainSample> {
        if samples.len() <= self.cfg.batch_size {
            return samples.iter().collect();
        }
        index::sample(&mut self.rng, samples.len(), self.cfg.batch_size)
            .into_iter()
            .map(|i| &samples[i])
            .collect()
    }

    /// Trains until `cfg.steps` or the early-stop bar, logging one JSON line
    /// per step. `evaluate` returns `(mask J, LM loss)` on the train set.
    pub fn run(
        &mut self,
        model: &mut PixelModel,
        samples: &[TrainSample],
        mut log: Option<&mut dyn Write>,
        mut evaluate: impl FnMut(&PixelModel) -> Result<(f64, f64)>,
    ) -> Result<RunSummary> {
        let mut last = None;
        while self.step < self.cfg.steps {
            let batch = self.next_batch(samples);
            let m = self.step(model, &batch)?;
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &m)?;
                writeln!(w)?;
            }
            last = Some(m);
            if let Some(es) = &self.cfg.early_stop {
                if self.step.is_multiple_of(es.every.max(1)) {
                    let (j, lm) = evaluate(model)?;
                    if j >= es.mask_j && lm <= es.lm_loss {
                        return Ok(RunSummary {
                            steps: self.step,
                            stopped_early: true,
                            last,
                            eval: Some((j, lm)),
                        });
                    }
                }
            }
        }
        Ok(RunSummary {
            steps: self.step,
            stopped_early: false,
            last,
            eval: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub steps: usize,
    pub stopped_early: bool,
    pub last: Option<StepMetrics>,
    /// Train-set `(mask J, LM loss)` at the stopping point, if evaluated.
    pub eval: Option<(f64, f64)>,
}

/// Visual token grid of a sample, for rendering outside a graph.
pub fn sample_grid(cfg: &ModelConfig, sample: &TrainSample) -> Result<FrameSize> {
    token_grid(&cfg.visual, sample.clip.frame_size())
}
