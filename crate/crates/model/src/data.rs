//! JSON-lines sample manifests, the synthetic moving-shapes corpus, and the
//! rendering of a sample's conversation into supervised phases.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use pixelrt_core::mask::{box_from_mask, decode_rle, downsample_mask, BinaryMask, FrameSize, RleMask, SpatioTemporalMask};
use pixelrt_core::{Error, Result};

use crate::chat::{
    parse_response_objects, render_injected_prompt, render_prefill_target, render_referring_prompt, RenderedSequence,
    SlotBinding, SpecialTokens,
};
use crate::clip::VideoClip;
use crate::prompt::{PromptJson, PromptKind, VisualPrompt};

pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Referring,
    Segmentation,
    Regional,
    MemoryPrefill,
    General,
}

impl SampleKind {
    pub const ALL: [SampleKind; 5] = [
        SampleKind::Referring,
        SampleKind::Segmentation,
        SampleKind::Regional,
        SampleKind::MemoryPrefill,
        SampleKind::General,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SampleKind::Referring => "referring",
            SampleKind::Segmentation => "segmentation",
            SampleKind::Regional => "regional",
            SampleKind::MemoryPrefill => "memory_prefill",
            SampleKind::General => "general",
        }
    }
}

impl fmt::Display for SampleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            text: text.into(),
        }
    }
}

/// One training or evaluation sample. Assistant turns mark mask outputs as
/// `[k] <SEG>`; user turns refer to visual prompt `k` as `[k]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub sample_id: String,
    pub kind: SampleKind,
    /// Directory of `frame_NNN.png` files, relative to the manifest.
    pub clip_path: PathBuf,
    pub frames: usize,
    /// `[height, width]`.
    pub frame_size: [usize; 2],
    pub conversation: Vec<Turn>,
    /// Object id → frame → mask. Frames where the object is absent are
    /// omitted.
    #[serde(default)]
    pub objects: BTreeMap<u32, BTreeMap<usize, RleMask>>,
    #[serde(default)]
    pub prompts: Vec<PromptJson>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    schema: u32,
}

pub fn frame_file_name(t: usize) -> String {
    format!("frame_{t:03}.png")
}

/// `(field, message)` of the first violated invariant.
type FieldIssue = (String, String);

fn issue(field: impl Into<String>, message: impl Into<String>) -> FieldIssue {
    (field.into(), message.into())
}

/// Object labels bound by `<SEG>` markers in an assistant turn.
fn seg_labels(text: &str, tokens: &SpecialTokens) -> Result<Vec<u32>> {
    let (_, ids) = parse_marked_answer(text, tokens)?;
    Ok(ids)
}

impl ManifestRecord {
    pub fn frame_size(&self) -> Result<FrameSize> {
        FrameSize::new(self.frame_size[0], self.frame_size[1])
    }

    pub fn validate(&self) -> std::result::Result<(), FieldIssue> {
        if self.sample_id.is_empty() {
            return Err(issue("sample_id", "must not be empty"));
        }
        if self.frames == 0 || self.frames > 64 {
            return Err(issue("frames", format!("{} is outside 1..=64", self.frames)));
        }
        let size = self.frame_size().map_err(|e| issue("frame_size", e.to_string()))?;
        for (id, per_frame) in &self.objects {
            if *id == 0 {
                return Err(issue("objects.0", "object ids start at 1"));
            }
            for (t, rle) in per_frame {
                let field = format!("objects.{id}.{t}");
                if *t >= self.frames {
                    return Err(issue(field, format!("frame outside a clip of {}", self.frames)));
                }
                if rle.size != size {
                    return Err(issue(
                        format!("{field}.size"),
                        format!(
                            "object {id} mask is {}x{}, frames are {}x{}",
                            rle.size.height, rle.size.width, size.height, size.width
                        ),
                    ));
                }
                rle.validate()
                    .map_err(|e| issue(format!("{field}.counts"), format!("object {id}: {e}")))?;
            }
        }
        for (i, p) in self.prompts.iter().enumerate() {
            p.validate(self.frames, size)
                .map_err(|e| issue(format!("prompts[{i}].{}", e.field), e.message))?;
        }
        if self.conversation.is_empty() || !self.conversation.len().is_multiple_of(2) {
            return Err(issue("conversation", "expected alternating user/assistant pairs"));
        }
        let tokens = SpecialTokens::default();
        let mut n_seg = 0;
        for (i, turn) in self.conversation.iter().enumerate() {
            let want = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if turn.role != want {
                return Err(issue(format!("conversation[{i}].role"), format!("expected {want:?}")));
            }
            if turn.role == Role::Assistant {
                let ids = seg_labels(&turn.text, &tokens).map_err(|e| issue(format!("conversation[{i}].text"), e.to_string()))?;
                if let Some(id) = ids.iter().find(|id| !self.objects.contains_key(id)) {
                    return Err(issue(
                        format!("conversation[{i}].text"),
                        Error::DanglingReference(*id).to_string(),
                    ));
                }
                n_seg += ids.len();
            }
        }
        let kinds = |k: &[PromptKind]| self.prompts.iter().all(|p| k.contains(&p.kind));
        match self.kind {
            SampleKind::Segmentation if n_seg == 0 => Err(issue("conversation", "segmentation sample has no <SEG> output")),
            SampleKind::General if n_seg > 0 || !self.prompts.is_empty() => {
                Err(issue("conversation", "general sample cannot carry prompts or <SEG> outputs"))
            }
            SampleKind::Referring if self.prompts.is_empty() || !kinds(&[PromptKind::Point, PromptKind::Box]) => {
                Err(issue("prompts", "referring sample needs point or box prompts"))
            }
            SampleKind::Regional if self.prompts.is_empty() || !kinds(&[PromptKind::Mask]) => {
                Err(issue("prompts", "regional sample needs mask prompts"))
            }
            SampleKind::MemoryPrefill => {
                if self.prompts.is_empty() {
                    return Err(issue("prompts", "memory pre-fill sample needs prompts"));
                }
                match (1..=self.prompts.len() as u32).find(|k| !self.objects.contains_key(k)) {
                    Some(k) => Err(issue("objects", Error::DanglingReference(k).to_string())),
                    None => Ok(()),
                }
            }
            _ => Ok(()),
        }
    }
}

/// Parses manifest text. Line numbers in errors are 1-based.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((i, first)) = lines.next() else {
        return Ok(Vec::new());
    };
    let header: ManifestHeader = serde_json::from_str(first).map_err(|e| Error::Parse {
        line: i + 1,
        message: format!("expected a {{\"schema\": {MANIFEST_SCHEMA}}} header: {e}"),
    })?;
    if header.schema != MANIFEST_SCHEMA {
        return Err(Error::Validation {
            line: i + 1,
            field: "schema".into(),
            message: format!("unsupported schema {}", header.schema),
        });
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        rec.validate().map_err(|(field, message)| Error::Validation {
            line: i + 1,
            field,
            message,
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    parse_manifest(&fs::read_to_string(path)?)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut w, &ManifestHeader { schema: MANIFEST_SCHEMA })?;
    writeln!(w)?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Text with `<SEG>` markers to tokens; each marker binds to the last `[k]`
/// before it. Returns the sequence and the bound ids in order.
pub fn parse_marked_answer(text: &str, tokens: &SpecialTokens) -> Result<(RenderedSequence, Vec<u32>)> {
    let mut raw: Vec<u32> = Vec::new();
    for (i, part) in text.split("<SEG>").enumerate() {
        if i > 0 {
            raw.push(tokens.seg_id);
        }
        raw.extend(part.bytes().map(u32::from));
    }
    let parse = parse_response_objects(&raw, tokens)?;
    let mut rebuilt = RenderedSequence::new();
    let mut start = 0;
    for &(id, pos) in &parse.objects {
        rebuilt.token_ids.extend_from_slice(&raw[start..pos]);
        rebuilt.push_slot(SlotBinding::Seg { object_id: id }, tokens);
        start = pos + 1;
    }
    rebuilt.token_ids.extend_from_slice(&raw[start..]);
    Ok((rebuilt, parse.object_ids()))
}

/// A sample with pixels and decoded masks.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub sample_id: String,
    pub kind: SampleKind,
    pub clip: VideoClip,
    pub prompts: Vec<VisualPrompt>,
    pub gt_masks: BTreeMap<u32, SpatioTemporalMask>,
    pub conversation: Vec<Turn>,
}

impl TrainSample {
    /// Decodes a validated record with frames already in memory.
    pub fn from_record(record: &ManifestRecord, clip: VideoClip) -> Result<Self> {
        let size = record.frame_size()?;
        if clip.len() != record.frames || clip.frame_size() != size {
            return Err(Error::Validation {
                line: 0,
                field: "clip_path".into(),
                message: format!(
                    "{}: clip has {} frames of {}x{}, record says {} of {}x{}",
                    record.sample_id,
                    clip.len(),
                    clip.frame_size().height,
                    clip.frame_size().width,
                    record.frames,
                    size.height,
                    size.width
                ),
            });
        }
        let prompts = record
            .prompts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                p.validate(record.frames, size).map_err(|e| Error::Validation {
                    line: 0,
                    field: format!("prompts[{i}].{}", e.field),
                    message: e.message,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut gt_masks = BTreeMap::new();
        for (&id, per_frame) in &record.objects {
            let mut m = SpatioTemporalMask::new(record.frames, size);
            for (&t, rle) in per_frame {
                m.insert(t, decode_rle(rle)?)?;
            }
            gt_masks.insert(id, m);
        }
        Ok(Self {
            sample_id: record.sample_id.clone(),
            kind: record.kind,
            clip,
            prompts,
            gt_masks,
            conversation: record.conversation.clone(),
        })
    }

    /// Loads frames from `base_dir / clip_path`.
    pub fn load(record: &ManifestRecord, base_dir: &Path) -> Result<Self> {
        let dir = base_dir.join(&record.clip_path);
        let paths: Vec<PathBuf> = (0..record.frames).map(|t| dir.join(frame_file_name(t))).collect();
        Self::from_record(record, VideoClip::load(&paths)?)
    }

    /// Keeps frames `indices` (in order). Prompt frames move to the nearest
    /// kept frame, the earliest on ties.
    pub fn select(&self, indices: &[usize]) -> Self {
        let nearest = |t: usize| {
            indices
                .iter()
                .enumerate()
                .min_by_key(|(_, &s)| s.abs_diff(t))
                .map_or(0, |(k, _)| k)
        };
        let prompts = self
            .prompts
            .iter()
            .map(|p| {
                let mut p = p.clone();
                match &mut p {
                    VisualPrompt::Point(x) => x.t = nearest(x.t),
                    VisualPrompt::Box(x) => x.t = nearest(x.t),
                    VisualPrompt::Mask(x) => x.t = nearest(x.t),
                }
                p
            })
            .collect();
        Self {
            sample_id: self.sample_id.clone(),
            kind: self.kind,
            clip: self.clip.select(indices),
            prompts,
            gt_masks: self.gt_masks.iter().map(|(&id, m)| (id, m.reindexed(indices))).collect(),
            conversation: self.conversation.clone(),
        }
    }
}

/// One supervised step of a conversation: the model sees `prompt`, the
/// separator, and is trained to produce `answer` (ending in `<EOS>`).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPhase {
    pub prompt: RenderedSequence,
    pub answer: RenderedSequence,
    /// Object ids of the answer's `<SEG>` slots, in order.
    pub seg_objects: Vec<u32>,
}

/// Frames of each object whose mask survives downsampling to `grid`; the
/// objects a memory injection would list.
pub fn injectable_view(masks: &BTreeMap<u32, SpatioTemporalMask>, ids: &[u32], grid: FrameSize) -> Result<Vec<(u32, Vec<usize>)>> {
    let mut view = Vec::new();
    for &id in ids {
        let m = masks.get(&id).ok_or(Error::DanglingReference(id))?;
        let mut frames = Vec::new();
        for (t, mask) in m.iter() {
            if !downsample_mask(mask, grid)?.is_empty() {
                frames.push(t);
            }
        }
        if !frames.is_empty() {
            view.push((id, frames));
        }
    }
    view.sort_unstable_by_key(|(id, _)| *id);
    view.dedup_by_key(|(id, _)| *id);
    Ok(view)
}

/// Renders every user/assistant pair. Memory pre-fill samples expand their
/// first pair into the pre-fill sentence and an injected-prompt answer, the
/// way inference runs them. `grid` is the visual token grid of the clip.
pub fn render_training_conversation(
    sample: &TrainSample,
    grid: FrameSize,
    tokens: &SpecialTokens,
) -> Result<Vec<TrainingPhase>> {
    let finish = |mut answer: RenderedSequence| {
        answer.token_ids.push(tokens.eos_id);
        answer
    };
    let mut phases = Vec::new();
    for (i, pair) in sample.conversation.chunks(2).enumerate() {
        let [user, assistant] = pair else {
            return Err(Error::Precondition("conversation ends with an unanswered turn".into()));
        };
        let (answer, seg_objects) = parse_marked_answer(&assistant.text, tokens)?;
        if let Some(&id) = seg_objects.iter().find(|id| !sample.gt_masks.contains_key(id)) {
            return Err(Error::DanglingReference(id));
        }
        let with_prompts = i == 0 && !sample.prompts.is_empty();
        if with_prompts && sample.kind == SampleKind::MemoryPrefill {
            let ids: Vec<u32> = (1..=sample.prompts.len() as u32).collect();
            if let Some(&id) = ids.iter().find(|id| !sample.gt_masks.contains_key(id)) {
                return Err(Error::DanglingReference(id));
            }
            let referring = render_referring_prompt(&user.text, sample.prompts.len(), tokens);
            phases.push(TrainingPhase {
                prompt: referring.clone(),
                answer: finish(render_prefill_target(&ids, tokens)?),
                seg_objects: ids.clone(),
            });
            let view = injectable_view(&sample.gt_masks, &ids, grid)?;
            let prompt = if view.is_empty() {
                referring
            } else {
                render_injected_prompt(&user.text, &view, sample.clip.len(), tokens)?
            };
            phases.push(TrainingPhase {
                prompt,
                answer: finish(answer),
                seg_objects,
            });
            continue;
        }
        let prompt = if with_prompts {
            render_referring_prompt(&user.text, sample.prompts.len(), tokens)
        } else {
            RenderedSequence::from_text(&user.text)
        };
        phases.push(TrainingPhase {
            prompt,
            answer: finish(answer),
            seg_objects,
        });
    }
    Ok(phases)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyCorpusConfig {
    pub n_samples: usize,
    pub clip_length: usize,
    /// `[height, width]`.
    pub frame_size: [usize; 2],
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub seed: u64,
    /// Relative share of each kind.
    pub kind_mix: BTreeMap<SampleKind, u32>,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            n_samples: 8,
            clip_length: 8,
            frame_size: [64, 64],
            min_shapes: 2,
            max_shapes: 3,
            seed: 7,
            kind_mix: BTreeMap::from([
                (SampleKind::Segmentation, 2),
                (SampleKind::MemoryPrefill, 2),
                (SampleKind::Referring, 2),
                (SampleKind::Regional, 1),
                (SampleKind::General, 1),
            ]),
        }
    }
}

const PALETTE: [(&str, [u8; 3]); 6] = [
    ("red", [220, 40, 40]),
    ("green", [40, 200, 60]),
    ("blue", [50, 80, 230]),
    ("yellow", [230, 210, 40]),
    ("magenta", [210, 60, 200]),
    ("cyan", [40, 200, 210]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }
}

/// A shape moving at constant velocity. Positions and radii are multiples
/// of 1/4 pixel so coverage tests are exact in floating point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyShape {
    pub kind: ShapeKind,
    pub color: String,
    pub rgb: [u8; 3],
    pub cx: f64,
    pub cy: f64,
    pub vx: f64,
    pub vy: f64,
    /// Half side, radius, or half height.
    pub r: f64,
}

impl ToyShape {
    pub fn center(&self, t: usize) -> (f64, f64) {
        (self.cx + self.vx * t as f64, self.cy + self.vy * t as f64)
    }

    /// Whether the shape covers the center of pixel `(x, y)` at frame `t`.
    /// Triangles point up with the apex at `cy - r` and a base of width
    /// `2r` at `cy + r`.
    pub fn covers(&self, t: usize, x: usize, y: usize) -> bool {
        let (cx, cy) = self.center(t);
        let dx = x as f64 + 0.5 - cx;
        let dy = y as f64 + 0.5 - cy;
        match self.kind {
            ShapeKind::Square => dx.abs() <= self.r && dy.abs() <= self.r,
            ShapeKind::Circle => dx * dx + dy * dy <= self.r * self.r,
            ShapeKind::Triangle => dy <= self.r && 2.0 * dx.abs() <= dy + self.r,
        }
    }

    pub fn describe(&self) -> String {
        format!("{} {}", self.color, self.kind.name())
    }
}

/// Draws `shapes` in order over `background`. Masks are the pixels each
/// shape owns after occlusion by later shapes.
pub fn rasterize(shapes: &[ToyShape], t: usize, size: FrameSize, background: [u8; 3]) -> (RgbImage, Vec<BinaryMask>) {
    let mut img = RgbImage::from_pixel(size.width as u32, size.height as u32, Rgb(background));
    let mut masks = vec![BinaryMask::zeros(size); shapes.len()];
    for y in 0..size.height {
        for x in 0..size.width {
            if let Some(i) = (0..shapes.len()).rev().find(|&i| shapes[i].covers(t, x, y)) {
                img.put_pixel(x as u32, y as u32, Rgb(shapes[i].rgb));
                masks[i].set(y, x, true);
            }
        }
    }
    (img, masks)
}

/// Samples per kind: largest-remainder apportionment of `n` by the mix
/// weights, ties broken in [`SampleKind::ALL`] order.
pub fn kind_counts(mix: &BTreeMap<SampleKind, u32>, n: usize) -> Result<BTreeMap<SampleKind, usize>> {
    let total: u64 = mix.values().map(|&w| w as u64).sum();
    if total == 0 {
        return Err(Error::Config("kind_mix needs at least one positive weight".into()));
    }
    let mut counts = BTreeMap::new();
    let mut rema = Vec::new();
    let mut used = 0;
    for (&k, &w) in mix {
        let exact = n as u64 * w as u64;
        let c = (exact / total) as usize;
        counts.insert(k, c);
        used += c;
        rema.push((exact % total, k));
    }
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, k) in rema.into_iter().take(n - used) {
        *counts.get_mut(&k).unwrap() += 1;
    }
    counts.retain(|_, c| *c > 0);
    Ok(counts)
}

/// An in-memory toy sample: its record, frames and the shapes behind it.
#[derive(Clone, Debug)]
pub struct ToySample {
    pub record: ManifestRecord,
    pub frames: Vec<RgbImage>,
    pub shapes: Vec<ToyShape>,
    pub background: [u8; 3],
    /// Index into `shapes` of object `[1]`, if the sample has objects.
    pub target: Option<usize>,
}

impl ToySample {
    pub fn to_train_sample(&self) -> Result<TrainSample> {
        TrainSample::from_record(&self.record, VideoClip::from_images(self.frames.clone())?)
    }
}

fn quarter(v: f64) -> f64 {
    (v * 4.0).round() / 4.0
}

fn random_shape(rng: &mut ChaCha8Rng, size: FrameSize, clip_length: usize, color: (&str, [u8; 3])) -> ToyShape {
    let kind = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle][rng.random_range(0..3)];
    let short = size.height.min(size.width) as f64;
    let r = quarter(rng.random_range(0.11..0.19) * short).max(1.0);
    let cx = quarter(rng.random_range(r..size.width as f64 - r));
    let cy = quarter(rng.random_range(r..size.height as f64 - r));
    let steps = clip_length.max(2) as f64 - 1.0;
    let (vx, vy) = if rng.random_bool(0.25) {
        // Leaves through the nearest vertical edge before the clip ends.
        let dist = if cx < size.width as f64 / 2.0 { -(cx + r + 1.0) } else { size.width as f64 - cx + r + 1.0 };
        (quarter(dist / (steps * 0.75)), 0.0)
    } else {
        (quarter(rng.random_range(-2.0..2.0)), quarter(rng.random_range(-2.0..2.0)))
    };
    ToyShape {
        kind,
        color: color.0.to_string(),
        rgb: color.1,
        cx,
        cy,
        vx,
        vy,
        r,
    }
}

fn point_inside(mask: &BinaryMask) -> (usize, usize) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                sx += x as f64;
                sy += y as f64;
                n += 1.0;
            }
        }
    }
    let (mx, my) = (sx / n, sy / n);
    let mut best = (0, 0);
    let mut best_d = f64::INFINITY;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            let d = (x as f64 - mx).powi(2) + (y as f64 - my).powi(2);
            if mask.get(y, x) && d < best_d {
                best = (x, y);
                best_d = d;
            }
        }
    }
    best
}

fn prompt_json(kind: PromptKind, t: usize, mask: &BinaryMask) -> Result<PromptJson> {
    let (h, w) = (mask.height() as f64, mask.width() as f64);
    Ok(match kind {
        PromptKind::Point => {
            let (x, y) = point_inside(mask);
            PromptJson {
                kind,
                t,
                xy: Some(vec![(x as f64 + 0.5) / w, (y as f64 + 0.5) / h]),
                rle: None,
            }
        }
        PromptKind::Box => {
            let b = box_from_mask(mask)?;
            PromptJson {
                kind,
                t,
                xy: Some(vec![
                    b.x1 as f64 / w,
                    b.y1 as f64 / h,
                    (b.x2 + 1) as f64 / w,
                    (b.y2 + 1) as f64 / h,
                ]),
                rle: None,
            }
        }
        PromptKind::Mask => PromptJson {
            kind,
            t,
            xy: None,
            rle: Some(pixelrt_core::mask::encode_rle(mask)),
        },
    })
}

/// Generates the corpus in memory. Deterministic for a given config.
pub fn generate_toy_corpus(cfg: &ToyCorpusConfig) -> Result<Vec<ToySample>> {
    let size = FrameSize::new(cfg.frame_size[0], cfg.frame_size[1])?;
    if cfg.clip_length == 0 || cfg.min_shapes == 0 || cfg.max_shapes < cfg.min_shapes || cfg.max_shapes > PALETTE.len() {
        return Err(Error::Config(format!(
            "need clip_length >= 1 and 1 <= min_shapes <= max_shapes <= {}",
            PALETTE.len()
        )));
    }
    let counts = kind_counts(&cfg.kind_mix, cfg.n_samples)?;
    let mut kinds: Vec<SampleKind> = counts.iter().flat_map(|(&k, &c)| std::iter::repeat_n(k, c)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    kinds.shuffle(&mut rng);

    let mut out = Vec::with_capacity(kinds.len());
    for (i, kind) in kinds.into_iter().enumerate() {
        let n_shapes = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
        let mut palette = PALETTE.to_vec();
        palette.shuffle(&mut rng);
        let background = {
            let v = rng.random_range(16..72u8);
            [v, v, v]
        };
        // Redraw until every shape shows up somewhere in the clip and a
        // mask prompt would survive pooling on the coarsest token grid.
        let coarsest = FrameSize::new(4, 4)?;
        let (shapes, frames, masks, target, t) = loop {
            let shapes: Vec<ToyShape> = palette[..n_shapes]
                .iter()
                .map(|&c| random_shape(&mut rng, size, cfg.clip_length, c))
                .collect();
            let mut frames = Vec::with_capacity(cfg.clip_length);
            let mut masks: Vec<SpatioTemporalMask> = vec![SpatioTemporalMask::new(cfg.clip_length, size); n_shapes];
            for t in 0..cfg.clip_length {
                let (img, per_shape) = rasterize(&shapes, t, size, background);
                frames.push(img);
                for (m, pm) in masks.iter_mut().zip(per_shape) {
                    m.insert(t, pm)?;
                }
            }
            if masks.iter().any(|m| m.visible_frames().is_empty()) {
                continue;
            }
            let target = rng.random_range(0..n_shapes);
            let mut candidates = masks[target].visible_frames();
            if kind == SampleKind::Regional {
                candidates.retain(|&t| {
                    downsample_mask(&masks[target].frame_or_empty(t), coarsest).is_ok_and(|m| !m.is_empty())
                });
            }
            if !candidates.is_empty() {
                let t = candidates[rng.random_range(0..candidates.len())];
                break (shapes, frames, masks, target, t);
            }
        };
        let shape = &shapes[target];
        let on_t = masks[target].frame_or_empty(t);
        let ask_color = rng.random_bool(0.5);
        let attribute = |s: &ToyShape| {
            if ask_color {
                ("What color is [1]?".to_string(), format!("It is {}.", s.color))
            } else {
                ("What shape is [1]?".to_string(), format!("It is a {}.", s.kind.name()))
            }
        };
        let (user, assistant, prompts, with_object) = match kind {
            SampleKind::Referring => {
                let pk = if rng.random_bool(0.5) { PromptKind::Point } else { PromptKind::Box };
                let (q, a) = attribute(shape);
                (q, a, vec![prompt_json(pk, t, &on_t)?], true)
            }
            SampleKind::MemoryPrefill => {
                let (q, a) = attribute(shape);
                (q, a, vec![prompt_json(PromptKind::Point, t, &on_t)?], true)
            }
            SampleKind::Regional => (
                "Describe [1].".to_string(),
                format!("A {}.", shape.describe()),
                vec![prompt_json(PromptKind::Mask, t, &on_t)?],
                true,
            ),
            SampleKind::Segmentation => (
                format!("Please segment the {}.", shape.describe()),
                "It is [1] <SEG>.".to_string(),
                Vec::new(),
                true,
            ),
            SampleKind::General => (
                "How many shapes are there?".to_string(),
                format!("There are {n_shapes} shapes."),
                Vec::new(),
                false,
            ),
        };
        let sample_id = format!("toy-{i:04}");
        let objects = if with_object {
            BTreeMap::from([(1, masks[target].to_rle_map())])
        } else {
            BTreeMap::new()
        };
        let record = ManifestRecord {
            sample_id: sample_id.clone(),
            kind,
            clip_path: PathBuf::from("clips").join(&sample_id),
            frames: cfg.clip_length,
            frame_size: cfg.frame_size,
            conversation: vec![Turn::user(user), Turn::assistant(assistant)],
            objects,
            prompts,
        };
        out.push(ToySample {
            record,
            frames,
            shapes,
            background,
            target: with_object.then_some(target),
        });
    }
    Ok(out)
}

/// Writes `manifest.jsonl` and `clips/<id>/frame_NNN.png` under `out_dir`.
pub fn synthesize_toy_corpus(cfg: &ToyCorpusConfig, out_dir: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let out_dir = out_dir.as_ref();
    let samples = generate_toy_corpus(cfg)?;
    for s in &samples {
        let dir = out_dir.join(&s.record.clip_path);
        fs::create_dir_all(&dir)?;
        for (t, f) in s.frames.iter().enumerate() {
            f.save_with_format(dir.join(frame_file_name(t)), image::ImageFormat::Png)?;
        }
    }
    let records: Vec<ManifestRecord> = samples.into_iter().map(|s| s.record).collect();
    write_manifest(out_dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}

/// Loads every record of a manifest with its frames.
pub fn load_samples(manifest: impl AsRef<Path>) -> Result<Vec<TrainSample>> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().unwrap_or(Path::new("."));
    load_manifest(manifest)?
        .iter()
        .map(|r| TrainSample::load(r, base))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chat::SlotKind;

    fn tokens() -> SpecialTokens {
        SpecialTokens::default()
    }

    fn small_cfg() -> ToyCorpusConfig {
        ToyCorpusConfig {
            n_samples: 10,
            clip_length: 4,
            frame_size: [32, 48],
            ..Default::default()
        }
    }

    #[test]
    fn kind_counts_follow_mix() {
        let cfg = ToyCorpusConfig::default();
        let c = kind_counts(&cfg.kind_mix, 8).unwrap();
        assert_eq!(c[&SampleKind::Segmentation], 2);
        assert_eq!(c[&SampleKind::MemoryPrefill], 2);
        assert_eq!(c[&SampleKind::Referring], 2);
        assert_eq!(c[&SampleKind::Regional], 1);
        assert_eq!(c[&SampleKind::General], 1);
        let c = kind_counts(&cfg.kind_mix, 21).unwrap();
        assert_eq!(c.values().sum::<usize>(), 21);
        assert!(kind_counts(&BTreeMap::new(), 3).is_err());
    }

    #[test]
    fn corpus_counts_match_mix() {
        let cfg = ToyCorpusConfig::default();
        let corpus = generate_toy_corpus(&cfg).unwrap();
        let want = kind_counts(&cfg.kind_mix, cfg.n_samples).unwrap();
        let mut got = BTreeMap::new();
        for s in &corpus {
            *got.entry(s.record.kind).or_insert(0) += 1;
        }
        assert_eq!(got, want);
    }

    #[test]
    fn triangle_coverage_examples() {
        let s = ToyShape {
            kind: ShapeKind::Triangle,
            color: "red".into(),
            rgb: [1, 2, 3],
            cx: 4.0,
            cy: 4.0,
            vx: 1.0,
            vy: 0.0,
            r: 2.0,
        };
        // Apex at (4, 2), base from x=2 to x=6 at y=6.
        assert!(s.covers(0, 3, 4));
        assert!(!s.covers(0, 3, 2));
        assert!(s.covers(0, 3, 5));
        assert!(!s.covers(0, 6, 5));
        assert!(s.covers(1, 4, 4));
    }

    #[test]
    fn records_validate_and_round_trip() {
        let corpus = generate_toy_corpus(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let records: Vec<ManifestRecord> = corpus.iter().map(|s| s.record.clone()).collect();
        write_manifest(&path, &records).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), records);
    }

    #[test]
    fn manifest_errors_carry_line_numbers() {
        assert!(parse_manifest("").unwrap().is_empty());
        assert!(parse_manifest("{\"schema\":1}\n").unwrap().is_empty());
        let rec = generate_toy_corpus(&small_cfg()).unwrap().remove(0).record;
        let good = serde_json::to_string(&rec).unwrap();
        let text = format!("{{\"schema\":1}}\n{good}\n{good}\nnot json\n");
        assert!(matches!(parse_manifest(&text), Err(Error::Parse { line: 4, .. })));
        assert!(matches!(parse_manifest("{\"schema\":2}"), Err(Error::Validation { line: 1, .. })));
        assert!(matches!(parse_manifest(&good), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn rle_sum_mismatch_names_the_object() {
        let mut rec = generate_toy_corpus(&small_cfg())
            .unwrap()
            .into_iter()
            .find(|s| !s.record.objects.is_empty())
            .unwrap()
            .record;
        let frame = rec.objects.get_mut(&1).unwrap().values_mut().next().unwrap();
        frame.counts.push(3);
        let text = format!("{{\"schema\":1}}\n{}\n", serde_json::to_string(&rec).unwrap());
        match parse_manifest(&text) {
            Err(Error::Validation { line, field, message }) => {
                assert_eq!(line, 2);
                assert!(field.starts_with("objects.1."), "{field}");
                assert!(message.contains("object 1"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dangling_reference_is_rejected() {
        let mut rec = generate_toy_corpus(&small_cfg())
            .unwrap()
            .into_iter()
            .find(|s| s.record.kind == SampleKind::Segmentation)
            .unwrap()
            .record;
        rec.conversation[1].text = "It is [1] <SEG> and [2] <SEG>.".into();
        let (field, message) = rec.validate().unwrap_err();
        assert_eq!(field, "conversation[1].text");
        assert!(message.contains("[2]"));
    }

    #[test]
    fn marked_answer_binds_labels() {
        let t = tokens();
        let (seq, ids) = parse_marked_answer("It is [1] <SEG>, and [3] <SEG>.", &t).unwrap();
        assert_eq!(ids, vec![1, 3]);
        assert_eq!(seq.count(SlotKind::Seg), 2);
        assert_eq!(seq.display(&t), "It is [1] <SEG>, and [3] <SEG>.");
        assert!(parse_marked_answer("<SEG>", &t).is_err());
        let (plain, ids) = parse_marked_answer("No masks.", &t).unwrap();
        assert!(ids.is_empty() && plain.slots.is_empty());
    }

    #[test]
    fn rendering_follows_kind_contracts() {
        let t = tokens();
        let corpus = generate_toy_corpus(&ToyCorpusConfig {
            n_samples: 20,
            ..Default::default()
        })
        .unwrap();
        let grid = FrameSize::new(4, 4).unwrap();
        for s in &corpus {
            let sample = s.to_train_sample().unwrap();
            let phases = render_training_conversation(&sample, grid, &t).unwrap();
            let refs: usize = phases.iter().map(|p| p.prompt.count(SlotKind::Ref)).sum();
            let segs: usize = phases.iter().map(|p| p.answer.count(SlotKind::Seg)).sum();
            for p in &phases {
                assert_eq!(p.answer.token_ids.last(), Some(&t.eos_id));
                assert_eq!(p.answer.count(SlotKind::Seg), p.seg_objects.len());
            }
            match s.record.kind {
                SampleKind::Segmentation => assert!(segs >= 1 && sample.gt_masks.contains_key(&phases[0].seg_objects[0])),
                SampleKind::General => assert_eq!((refs, segs), (0, 0)),
                SampleKind::MemoryPrefill => {
                    assert_eq!(phases.len(), 2);
                    assert!(phases[0].answer.display(&t).starts_with("The relevant regions"));
                    assert_eq!(phases[0].seg_objects, vec![1]);
                    let view = injectable_view(&sample.gt_masks, &[1], grid).unwrap();
                    let second = &phases[1].prompt;
                    if view.is_empty() {
                        assert_eq!((second.count(SlotKind::Ref), second.count(SlotKind::Mem)), (1, 0));
                    } else {
                        assert_eq!(second.count(SlotKind::Ref), 0);
                        assert_eq!(second.count(SlotKind::Mem), view[0].1.len());
                    }
                }
                SampleKind::Referring | SampleKind::Regional => assert_eq!((refs, segs), (1, 0)),
            }
        }
    }

    #[test]
    fn select_remaps_prompts_to_nearest_frame() {
        let corpus = generate_toy_corpus(&small_cfg()).unwrap();
        let s = corpus.iter().find(|s| !s.record.prompts.is_empty()).unwrap();
        let sample = s.to_train_sample().unwrap();
        let sub = sample.select(&[0, 0, 3, 3]);
        assert_eq!(sub.clip.len(), 4);
        let want = match sample.prompts[0].frame() {
            0 | 1 => 0,
            _ => 2,
        };
        assert_eq!(sub.prompts[0].frame(), want);
        assert_eq!(sub.gt_masks[&1].clip_length(), 4);
    }
}
