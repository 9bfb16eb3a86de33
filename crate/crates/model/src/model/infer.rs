//! Greedy generation and the per-turn pipeline: pre-fill, segment, inject,
//! answer.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use pixelrt_core::autograd::{Graph, Var};
use pixelrt_core::mask::SpatioTemporalMask;
use pixelrt_core::tensor::Matrix;
use pixelrt_core::Result;

use super::{join_turn, ClipVars, DecoderOutput, EncodedClip, PixelModel};
use crate::chat::{
    display_tokens, parse_response_objects, render_injected_prompt, render_referring_prompt,
    PrefillParse, RenderedSequence, SlotBinding,
};
use crate::memory::{ChatTurn, ObjectMemoryBank, Session};
use crate::prompt::VisualPrompt;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ObjectOutput {
    pub object_id: u32,
    #[serde(skip)]
    pub mask: SpatioTemporalMask,
    pub iou_pred: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TurnOutput {
    pub answer: String,
    /// The pre-fill response when the turn went through memory pre-filling.
    pub prefill_response: Option<String>,
    pub objects: Vec<ObjectOutput>,
    /// Decoder tokens produced across all `<SEG>`s of the turn.
    pub decoder_tokens: usize,
    /// Milliseconds per phase.
    pub timing: BTreeMap<String, f64>,
}

/// A generated answer plus the decoded masks of its `<SEG>` tokens.
struct Generation {
    ids: Vec<u32>,
    parse: PrefillParse,
    outputs: Vec<DecoderOutput>,
    decoder_tokens: usize,
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

impl PixelModel {
    /// Replacement rows for every `<REF>` and `<MEM>` slot of `seq`.
    fn slot_rows(
        &self,
        g: &mut Graph,
        clip: &ClipVars,
        seq: &RenderedSequence,
        prompts: &[VisualPrompt],
        bank: Option<&ObjectMemoryBank>,
    ) -> Result<BTreeMap<usize, Var>> {
        let mut rows = self.ref_rows(g, clip, seq, prompts)?;
        if seq.slots.iter().any(|s| matches!(s.binding, SlotBinding::Mem { .. })) {
            let empty = ObjectMemoryBank::new();
            for (pos, v) in bank.unwrap_or(&empty).resolve_mem_slots(seq)? {
                rows.insert(pos, g.constant(Matrix::row_vector(v.to_vec())));
            }
        }
        Ok(rows)
    }

    fn next_token(&self, g: &Graph, logits: Var) -> u32 {
        let m = g.value(logits);
        let row = m.row(m.rows() - 1);
        let t = &self.tokens;
        let allowed = |id: usize| id < crate::chat::BASE_VOCAB as usize || id == t.seg_id as usize || id == t.eos_id as usize;
        let mut best = t.eos_id as usize;
        let mut best_v = f64::NEG_INFINITY;
        for (id, &v) in row.iter().enumerate() {
            if allowed(id) && v > best_v {
                best = id;
                best_v = v;
            }
        }
        best as u32
    }

    /// Greedy continuation of `prompt` until `<EOS>` or the token cap,
    /// followed by mask decoding for every generated `<SEG>`.
    fn generate(
        &self,
        enc: &EncodedClip,
        session_clip: &crate::clip::VideoClip,
        prompt: &RenderedSequence,
        prompts: &[VisualPrompt],
        bank: Option<&ObjectMemoryBank>,
    ) -> Result<Generation> {
        let frame_size = session_clip.frame_size();
        let (base, offset) = join_turn(prompt, &RenderedSequence::new());
        let mut ids = Vec::new();
        for _ in 0..self.cfg.max_new_tokens {
            let mut g = Graph::new(&self.store);
            let clip = self.constant_clip_vars(&mut g, enc, frame_size);
            let rows = self.slot_rows(&mut g, &clip, &base, prompts, bank)?;
            let mut text = base.token_ids.clone();
            text.extend_from_slice(&ids);
            let x = self.embed_turn(&mut g, &clip, &text, &rows)?;
            let out = self.lm_forward(&mut g, x)?;
            let next = self.next_token(&g, out.logits);
            if next == self.tokens.eos_id {
                break;
            }
            ids.push(next);
        }
        let parse = parse_response_objects(&ids, &self.tokens)?;
        let mut outputs = Vec::new();
        let mut decoder_tokens = 0;
        if !parse.objects.is_empty() {
            let mut g = Graph::new(&self.store);
            let clip = self.constant_clip_vars(&mut g, enc, frame_size);
            let rows = self.slot_rows(&mut g, &clip, &base, prompts, bank)?;
            let mut text = base.token_ids.clone();
            text.extend_from_slice(&ids);
            let x = self.embed_turn(&mut g, &clip, &text, &rows)?;
            let out = self.lm_forward(&mut g, x)?;
            for &(_, pos) in &parse.objects {
                let row = g.slice_rows(out.hidden, clip.visual_tokens() + offset + pos, 1);
                let seg = self.seg_to_decoder_tokens(&mut g, row)?;
                decoder_tokens += g.shape(seg).0;
                let dec = self.decode_mask(&mut g, seg, &clip)?;
                outputs.push(dec.output(&g, self.cfg.decoder.resolution));
            }
        }
        Ok(Generation {
            ids,
            parse,
            outputs,
            decoder_tokens,
        })
    }

    fn encoded(&self, session: &mut Session) -> Result<Arc<EncodedClip>> {
        if let Some(e) = &session.encoded {
            return Ok(e.clone());
        }
        let e = Arc::new(self.encode_clip(&session.clip)?);
        session.encoded = Some(e.clone());
        Ok(e)
    }

    fn objects_of(&self, session: &Session, gen: &Generation) -> Result<Vec<ObjectOutput>> {
        let size = session.clip.frame_size();
        gen.parse
            .objects
            .iter()
            .zip(&gen.outputs)
            .map(|(&(object_id, _), out)| {
                Ok(ObjectOutput {
                    object_id,
                    mask: out.to_mask(size)?,
                    iou_pred: out.iou_pred,
                })
            })
            .collect()
    }

    fn store_objects(&self, session: &mut Session, gen: &Generation, objects: &[ObjectOutput]) -> Result<()> {
        if objects.is_empty() {
            return Ok(());
        }
        session.prefill(&gen.parse, objects.iter().map(|o| o.mask.clone()).collect())
    }

    fn inject(&self, session: &mut Session, enc: &EncodedClip) -> Result<()> {
        session
            .bank
            .prepare_injection(enc.grid, &enc.visual, |v| self.project_memory(v))
    }

    /// Answers one question about the session's clip, updating its memory.
    ///
    /// With visual prompts (and memory enabled) the model first produces a
    /// pre-fill response whose `<SEG>` masks are stored, then answers from a
    /// memory-injected prompt. Without prompts a non-empty memory is
    /// injected; otherwise the question is answered directly. Masks of any
    /// `<SEG>` in the final answer are decoded and stored as well.
    pub fn run_turn(&self, session: &mut Session, question: &str, prompts: &[VisualPrompt]) -> Result<TurnOutput> {
        let mut timing = BTreeMap::new();
        let start = Instant::now();
        let enc = self.encoded(session)?;
        timing.insert("encode".to_string(), ms(start));
        let clip = session.clip.clone();
        let n_frames = clip.len();
        let mut objects = Vec::new();
        let mut prefill_response = None;
        let mut decoder_tokens = 0;

        let (final_prompt, final_prompts): (RenderedSequence, &[VisualPrompt]) = if !prompts.is_empty() {
            let referring = render_referring_prompt(question, prompts.len(), &self.tokens);
            if self.cfg.use_memory {
                let start = Instant::now();
                let gen = self.generate(&enc, &clip, &referring, prompts, None)?;
                let found = self.objects_of(session, &gen)?;
                self.store_objects(session, &gen, &found)?;
                timing.insert("prefill".to_string(), ms(start));
                prefill_response = Some(display_tokens(&gen.ids, &self.tokens));
                decoder_tokens += gen.decoder_tokens;
                if found.is_empty() {
                    // No object was segmented: the pre-fill response is the answer.
                    session.n_prompts += prompts.len();
                    let answer = prefill_response.clone().unwrap_or_default();
                    session.history.push(ChatTurn {
                        question: question.to_string(),
                        answer: answer.clone(),
                        object_ids: Vec::new(),
                    });
                    return Ok(TurnOutput {
                        answer,
                        prefill_response,
                        objects,
                        decoder_tokens,
                        timing,
                    });
                }
                objects = found;
                let start = Instant::now();
                self.inject(session, &enc)?;
                timing.insert("inject".to_string(), ms(start));
                let view = session.bank.bank_view();
                if view.is_empty() {
                    (referring, prompts)
                } else {
                    (render_injected_prompt(question, &view, n_frames, &self.tokens)?, &[])
                }
            } else {
                (referring, prompts)
            }
        } else if !session.bank.is_empty() {
            let start = Instant::now();
            self.inject(session, &enc)?;
            timing.insert("inject".to_string(), ms(start));
            let view = session.bank.bank_view();
            if view.is_empty() {
                (RenderedSequence::from_text(question), &[])
            } else {
                (render_injected_prompt(question, &view, n_frames, &self.tokens)?, &[])
            }
        } else {
            (RenderedSequence::from_text(question), &[])
        };

        let start = Instant::now();
        let gen = self.generate(&enc, &clip, &final_prompt, final_prompts, Some(&session.bank))?;
        let found = self.objects_of(session, &gen)?;
        self.store_objects(session, &gen, &found)?;
        timing.insert("answer".to_string(), ms(start));
        decoder_tokens += gen.decoder_tokens;
        for o in found {
            objects.retain(|p: &ObjectOutput| p.object_id != o.object_id);
            objects.push(o);
        }
        let answer = display_tokens(&gen.ids, &self.tokens);
        session.n_prompts += prompts.len();
        session.history.push(ChatTurn {
            question: question.to_string(),
            answer: answer.clone(),
            object_ids: objects.iter().map(|o| o.object_id).collect(),
        });
        Ok(TurnOutput {
            answer,
            prefill_response,
            objects,
            decoder_tokens,
            timing,
        })
    }
}
