//! Named parameter storage grouped by trainable block.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Coarse groups of parameters that the training stages freeze or unfreeze
/// as a unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    SparsePromptEncoder,
    VisualEncoder,
    VlProjector,
    Llm,
    M2lProjector,
    L2mProjector,
    MaskDecoder,
}

impl Block {
    pub const ALL: [Block; 7] = [
        Block::SparsePromptEncoder,
        Block::VisualEncoder,
        Block::VlProjector,
        Block::Llm,
        Block::M2lProjector,
        Block::L2mProjector,
        Block::MaskDecoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::SparsePromptEncoder => "sparse_prompt_encoder",
            Block::VisualEncoder => "visual_encoder",
            Block::VlProjector => "vl_projector",
            Block::Llm => "llm",
            Block::M2lProjector => "m2l_projector",
            Block::L2mProjector => "l2m_projector",
            Block::MaskDecoder => "mask_decoder",
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Block {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Block::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown block name `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub block: Block,
    pub value: Matrix,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on duplicate names; parameter layout is fixed at construction.
    pub fn insert(&mut self, name: impl Into<String>, block: Block, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, block, value });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn block_of(&self, id: ParamId) -> Block {
        self.entries[id.0].block
    }

    pub fn count_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Snapshot of every parameter, keyed by name.
    pub fn snapshot(&self) -> BTreeMap<String, Vec<f64>> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.data().to_vec()))
            .collect()
    }

    /// Replaces values from `(name, matrix)` pairs; every stored parameter
    /// must be provided with its exact shape.
    pub fn load_values(&mut self, values: impl IntoIterator<Item = (String, Matrix)>) -> Result<()> {
        let mut seen = vec![false; self.entries.len()];
        for (name, m) in values {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
            let slot = &mut self.entries[id.0];
            if slot.value.shape() != m.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                    slot.value.shape(),
                    m.shape()
                )));
            }
            slot.value = m;
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!(
                "checkpoint is missing parameter `{}`",
                self.entries[missing].name
            )));
        }
        Ok(())
    }
}

/// Deterministic initializer used while building a model.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        let dist = Normal::new(0.0, std).expect("std must be positive");
        Matrix::from_fn(rows, cols, |_, _| dist.sample(&mut self.rng))
    }

    /// Weight matrix stored as `fan_in × fan_out`, scaled by `1/sqrt(fan_in)`.
    pub fn linear(&mut self, fan_in: usize, fan_out: usize) -> Matrix {
        self.normal(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
    }

    pub fn uniform(&mut self, rows: usize, cols: usize, bound: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.rng.random_range(-bound..bound))
    }
}
