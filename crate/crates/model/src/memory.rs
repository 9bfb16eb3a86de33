//! Per-session object memory: object id → spatio-temporal mask, plus the
//! pooled per-frame features that replace `<MEM>` slots.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;

use pixelrt_core::mask::{downsample_mask, FrameSize, SpatioTemporalMask};
use pixelrt_core::tensor::Matrix;
use pixelrt_core::{Error, Result};

use crate::chat::{PrefillParse, RenderedSequence, SlotBinding};
use crate::clip::VideoClip;
use crate::model::EncodedClip;
use crate::prompt::masked_pool;

pub const DEFAULT_CAPACITY: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    pub object_id: u32,
    pub mask: SpatioTemporalMask,
    pooled: Option<BTreeMap<usize, Vec<f64>>>,
}

impl MemoryEntry {
    pub fn new(object_id: u32, mask: SpatioTemporalMask) -> Self {
        Self {
            object_id,
            mask,
            pooled: None,
        }
    }

    /// Frame → projected feature, once injection has been prepared.
    pub fn pooled(&self) -> Option<&BTreeMap<usize, Vec<f64>>> {
        self.pooled.as_ref()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectMemoryBank {
    entries: BTreeMap<u32, MemoryEntry>,
    capacity: usize,
}

impl Default for ObjectMemoryBank {
    fn default() -> Self {
        Self::with_capacity(DEFAULT_CAPACITY)
    }
}

impl ObjectMemoryBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            entries: BTreeMap::new(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn ids(&self) -> Vec<u32> {
        self.entries.keys().copied().collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.values()
    }

    /// Stores one mask per parsed object. A repeated id replaces the old
    /// entry and drops its cached features, unless the mask is unchanged.
    /// Nothing is written when an error is returned.
    pub fn prefill(&mut self, parse: &PrefillParse, masks: Vec<SpatioTemporalMask>) -> Result<()> {
        if parse.objects.len() != masks.len() {
            return Err(Error::PrefillArity {
                objects: parse.objects.len(),
                masks: masks.len(),
            });
        }
        let mut fresh: Vec<u32> = parse
            .objects
            .iter()
            .map(|&(id, _)| id)
            .filter(|id| !self.entries.contains_key(id))
            .collect();
        fresh.sort_unstable();
        fresh.dedup();
        if self.entries.len() + fresh.len() > self.capacity {
            return Err(Error::BankFull(self.capacity));
        }
        for (&(id, _), mask) in parse.objects.iter().zip(masks) {
            match self.entries.get(&id) {
                Some(old) if old.mask == mask => {}
                _ => {
                    self.entries.insert(id, MemoryEntry::new(id, mask));
                }
            }
        }
        Ok(())
    }

    /// Pools and projects one feature per visible frame of every entry that
    /// has no cached features. Frames whose mask disappears on the feature
    /// grid are left out. `features[t]` holds `grid.area()` rows.
    pub fn prepare_injection(
        &mut self,
        grid: FrameSize,
        features: &[Matrix],
        mut project: impl FnMut(&[f64]) -> Vec<f64>,
    ) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::NothingToInject);
        }
        for entry in self.entries.values_mut() {
            if entry.pooled.is_some() {
                continue;
            }
            let mut pooled = BTreeMap::new();
            for (t, mask) in entry.mask.iter() {
                let f = features.get(t).ok_or_else(|| {
                    Error::Shape(format!("no features for frame {t} of object {}", entry.object_id))
                })?;
                let small = downsample_mask(mask, grid)?;
                if let Some(v) = masked_pool(f, grid, &small)? {
                    pooled.insert(t, project(&v));
                }
            }
            entry.pooled = Some(pooled);
        }
        Ok(())
    }

    /// `(object_id, frames with pooled features)` for every prepared entry
    /// that still has at least one frame.
    pub fn bank_view(&self) -> Vec<(u32, Vec<usize>)> {
        self.entries
            .values()
            .filter_map(|e| {
                let frames: Vec<usize> = e.pooled.as_ref()?.keys().copied().collect();
                (!frames.is_empty()).then_some((e.object_id, frames))
            })
            .collect()
    }

    /// `(position, feature)` for every `<MEM>` slot of `rendered`.
    pub fn resolve_mem_slots<'a>(&'a self, rendered: &RenderedSequence) -> Result<Vec<(usize, &'a [f64])>> {
        rendered
            .slots
            .iter()
            .filter_map(|s| match s.binding {
                SlotBinding::Mem { object_id, frame } => Some((s.position, object_id, frame)),
                _ => None,
            })
            .map(|(pos, object_id, frame)| {
                self.entries
                    .get(&object_id)
                    .and_then(|e| e.pooled.as_ref())
                    .and_then(|p| p.get(&frame))
                    .map(|v| (pos, v.as_slice()))
                    .ok_or(Error::UnresolvedSlot { object_id, frame })
            })
            .collect()
    }

    /// Copies `token_embeddings` and overwrites the `<MEM>` rows.
    pub fn substitute_mem_tokens(&self, rendered: &RenderedSequence, token_embeddings: &Matrix) -> Result<Matrix> {
        let mut out = token_embeddings.clone();
        for (pos, v) in self.resolve_mem_slots(rendered)? {
            if v.len() != out.cols() || pos >= out.rows() {
                return Err(Error::Shape(format!(
                    "slot at {pos} with width {} against {}x{} embeddings",
                    v.len(),
                    out.rows(),
                    out.cols()
                )));
            }
            out.row_mut(pos).copy_from_slice(v);
        }
        Ok(out)
    }

    pub fn resolve_reference(&self, object_id: u32) -> Result<&MemoryEntry> {
        self.entries.get(&object_id).ok_or(Error::UnknownObject(object_id))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChatTurn {
    pub question: String,
    pub answer: String,
    pub object_ids: Vec<u32>,
}

/// One conversation over one clip. Turns must be applied serially.
#[derive(Clone, Debug)]
pub struct Session {
    pub id: String,
    pub clip: Arc<VideoClip>,
    pub bank: ObjectMemoryBank,
    pub history: Vec<ChatTurn>,
    /// Visual prompts supplied so far (N).
    pub n_prompts: usize,
    /// Objects segmented so far (K); may exceed N.
    pub n_segmented: usize,
    pub(crate) encoded: Option<Arc<EncodedClip>>,
}

impl Session {
    pub fn new(id: impl Into<String>, clip: Arc<VideoClip>) -> Self {
        Self {
            id: id.into(),
            clip,
            bank: ObjectMemoryBank::new(),
            history: Vec::new(),
            n_prompts: 0,
            n_segmented: 0,
            encoded: None,
        }
    }

    pub fn prefill(&mut self, parse: &PrefillParse, masks: Vec<SpatioTemporalMask>) -> Result<()> {
        self.bank.prefill(parse, masks)?;
        self.n_segmented = self.bank.len();
        Ok(())
    }

    pub fn resolve_reference(&self, object_id: u32) -> Result<&MemoryEntry> {
        self.bank.resolve_reference(object_id)
    }
}
