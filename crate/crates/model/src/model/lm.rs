use pixelrt_core::autograd::{Graph, Var};
use pixelrt_core::nn::{causal_bias, LayerNorm, Linear, TransformerBlock};
use pixelrt_core::params::{Block, Init, ParamId, ParamStore};
use pixelrt_core::{Error, Result};

use super::LmConfig;

#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub embed: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln_f: LayerNorm,
    pub head: Linear,
    pub max_seq: usize,
    pub d_llm: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LmOutput {
    /// `n × vocab`.
    pub logits: Var,
    /// Last-layer states, `n × d_llm`.
    pub hidden: Var,
}

impl LanguageModel {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &LmConfig) -> Self {
        let b = Block::Llm;
        Self {
            embed: store.insert("lm.embed", b, init.normal(cfg.vocab_size, cfg.d_llm, 0.5)),
            blocks: (0..cfg.n_layers)
                .map(|i| {
                    TransformerBlock::new(
                        store,
                        init,
                        &format!("lm.block{i}"),
                        b,
                        cfg.d_llm,
                        cfg.n_heads,
                        cfg.mlp_ratio * cfg.d_llm,
                    )
                })
                .collect(),
            ln_f: LayerNorm::new(store, "lm.ln_f", b, cfg.d_llm),
            head: Linear::new(store, init, "lm.head", b, cfg.d_llm, cfg.vocab_size),
            max_seq: cfg.max_seq,
            d_llm: cfg.d_llm,
        }
    }

    pub fn forward(&self, g: &mut Graph, inputs: Var) -> Result<LmOutput> {
        let hidden = self.hidden(g, inputs)?;
        let logits = self.head.forward(g, hidden);
        Ok(LmOutput { logits, hidden })
    }

    /// Final normalized states without the vocabulary projection.
    pub fn hidden(&self, g: &mut Graph, inputs: Var) -> Result<Var> {
        let (n, d) = g.shape(inputs);
        if n > self.max_seq {
            return Err(Error::SequenceLength { len: n, max: self.max_seq });
        }
        if d != self.d_llm {
            return Err(Error::Shape(format!("inputs are {d} wide, model is {}", self.d_llm)));
        }
        let bias = g.constant(causal_bias(n));
        let mut x = inputs;
        for block in &self.blocks {
            x = block.forward(g, x, Some(bias));
        }
        Ok(self.ln_f.forward(g, x))
    }
}
