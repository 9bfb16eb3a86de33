//! Byte-level vocabulary with `<REF>`, `<MEM>`, `<SEG>` placeholders and the
//! text templates that place them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use pixelrt_core::error::{Error, Result};

pub const BASE_VOCAB: u32 = 256;

const PREFILL_TEMPLATE: &str = include_str!("../templates/prefill.txt");
const HEADER_TEMPLATE: &str = include_str!("../templates/injected_header.txt");
const HEADER_IMAGE_TEMPLATE: &str = include_str!("../templates/injected_header_image.txt");
const OBJECT_TEMPLATE: &str = include_str!("../templates/injected_object.txt");

/// Separates the user turn from the assistant turn in a model input.
pub const TURN_SEPARATOR: &str = "\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub ref_id: u32,
    pub mem_id: u32,
    pub seg_id: u32,
    pub eos_id: u32,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        Self {
            ref_id: BASE_VOCAB,
            mem_id: BASE_VOCAB + 1,
            seg_id: BASE_VOCAB + 2,
            eos_id: BASE_VOCAB + 3,
        }
    }
}

impl SpecialTokens {
    pub fn vocab_size(&self) -> usize {
        self.ref_id.max(self.mem_id).max(self.seg_id).max(self.eos_id) as usize + 1
    }

    pub fn is_special(&self, id: u32) -> bool {
        id >= BASE_VOCAB
    }

    fn kind_of(&self, id: u32) -> Option<SlotKind> {
        if id == self.ref_id {
            Some(SlotKind::Ref)
        } else if id == self.mem_id {
            Some(SlotKind::Mem)
        } else if id == self.seg_id {
            Some(SlotKind::Seg)
        } else {
            None
        }
    }

    fn id_of(&self, kind: SlotKind) -> u32 {
        match kind {
            SlotKind::Ref => self.ref_id,
            SlotKind::Mem => self.mem_id,
            SlotKind::Seg => self.seg_id,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SlotKind {
    Ref,
    Mem,
    Seg,
}

impl SlotKind {
    pub fn marker(self) -> &'static str {
        match self {
            SlotKind::Ref => "<REF>",
            SlotKind::Mem => "<MEM>",
            SlotKind::Seg => "<SEG>",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotBinding {
    /// Index into the turn's visual prompts.
    Ref { prompt_index: usize },
    Mem { object_id: u32, frame: usize },
    Seg { object_id: u32 },
}

impl SlotBinding {
    pub fn kind(&self) -> SlotKind {
        match self {
            SlotBinding::Ref { .. } => SlotKind::Ref,
            SlotBinding::Mem { .. } => SlotKind::Mem,
            SlotBinding::Seg { .. } => SlotKind::Seg,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub position: usize,
    pub binding: SlotBinding,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedSequence {
    pub token_ids: Vec<u32>,
    pub slots: Vec<Slot>,
}

impl RenderedSequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_text(text: &str) -> Self {
        let mut s = Self::new();
        s.push_text(text);
        s
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn push_text(&mut self, text: &str) {
        self.token_ids.extend(text.bytes().map(u32::from));
    }

    pub fn push_slot(&mut self, binding: SlotBinding, tokens: &SpecialTokens) {
        self.slots.push(Slot {
            position: self.token_ids.len(),
            binding,
        });
        self.token_ids.push(tokens.id_of(binding.kind()));
    }

    pub fn append(&mut self, other: &RenderedSequence) {
        let offset = self.token_ids.len();
        self.token_ids.extend_from_slice(&other.token_ids);
        self.slots.extend(other.slots.iter().map(|s| Slot {
            position: s.position + offset,
            binding: s.binding,
        }));
    }

    pub fn count(&self, kind: SlotKind) -> usize {
        self.slots.iter().filter(|s| s.binding.kind() == kind).count()
    }

    pub fn display(&self, tokens: &SpecialTokens) -> String {
        display_tokens(&self.token_ids, tokens)
    }
}

/// Decodes ids to text, spelling special tokens as their markers.
pub fn display_tokens(ids: &[u32], tokens: &SpecialTokens) -> String {
    let mut out = String::new();
    let mut bytes = Vec::new();
    let flush = |bytes: &mut Vec<u8>, out: &mut String| {
        out.push_str(&String::from_utf8_lossy(bytes));
        bytes.clear();
    };
    for &id in ids {
        if id < BASE_VOCAB {
            bytes.push(id as u8);
            continue;
        }
        flush(&mut bytes, &mut out);
        match tokens.kind_of(id) {
            Some(kind) => out.push_str(kind.marker()),
            None if id == tokens.eos_id => out.push_str("<EOS>"),
            None => {
                let _ = write!(out, "<{id}>");
            }
        }
    }
    flush(&mut bytes, &mut out);
    out
}

/// Walks `template`, emitting literal text and calling `fill` for each
/// `{name}` placeholder.
fn render_template(
    seq: &mut RenderedSequence,
    template: &str,
    mut fill: impl FnMut(&mut RenderedSequence, &str) -> Result<()>,
) -> Result<()> {
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        seq.push_text(&rest[..open]);
        let close = rest[open..]
            .find('}')
            .map(|c| open + c)
            .ok_or_else(|| Error::Config(format!("unterminated placeholder in {template:?}")))?;
        fill(seq, &rest[open + 1..close])?;
        rest = &rest[close + 1..];
    }
    seq.push_text(rest);
    Ok(())
}

fn unknown_placeholder(name: &str) -> Error {
    Error::Config(format!("unknown template placeholder {{{name}}}"))
}

/// Attaches one `<REF>` per prompt. The k-th prompt binds right after the
/// first `[k]` in the question; prompts without a label in the text are
/// appended as ` [k] <REF>`.
pub fn render_referring_prompt(
    question: &str,
    n_prompts: usize,
    tokens: &SpecialTokens,
) -> RenderedSequence {
    let mut inline: Vec<(usize, usize)> = Vec::new();
    let mut trailing = Vec::new();
    for k in 0..n_prompts {
        let label = format!("[{}]", k + 1);
        match question.find(&label) {
            Some(at) => inline.push((at + label.len(), k)),
            None => trailing.push(k),
        }
    }
    inline.sort_unstable();
    let mut seq = RenderedSequence::new();
    let mut cursor = 0;
    for (at, k) in inline {
        seq.push_text(&question[cursor..at]);
        seq.push_text(" ");
        seq.push_slot(SlotBinding::Ref { prompt_index: k }, tokens);
        cursor = at;
    }
    seq.push_text(&question[cursor..]);
    for k in trailing {
        seq.push_text(&format!(" [{}] ", k + 1));
        seq.push_slot(SlotBinding::Ref { prompt_index: k }, tokens);
    }
    seq
}

/// The assistant's pre-fill sentence listing `[k] <SEG>` per object.
pub fn render_prefill_target(object_ids: &[u32], tokens: &SpecialTokens) -> Result<RenderedSequence> {
    if object_ids.is_empty() {
        return Err(Error::NoObject);
    }
    let mut seq = RenderedSequence::new();
    render_template(&mut seq, PREFILL_TEMPLATE, |seq, name| match name {
        "regions" => {
            for (i, &id) in object_ids.iter().enumerate() {
                if i > 0 {
                    seq.push_text(" ");
                }
                seq.push_text(&format!("[{id}] "));
                seq.push_slot(SlotBinding::Seg { object_id: id }, tokens);
            }
            Ok(())
        }
        other => Err(unknown_placeholder(other)),
    })?;
    Ok(seq)
}

/// Header, one `[k]: <t> <MEM> ...` line per object over its visible frames
/// (1-based labels), then the question.
pub fn render_injected_prompt(
    question: &str,
    bank_view: &[(u32, Vec<usize>)],
    clip_length: usize,
    tokens: &SpecialTokens,
) -> Result<RenderedSequence> {
    if bank_view.is_empty() {
        return Err(Error::NothingToInject);
    }
    for (id, frames) in bank_view {
        if frames.is_empty() {
            return Err(Error::OmittedObject(*id));
        }
        if let Some(&t) = frames.iter().find(|&&t| t >= clip_length) {
            return Err(Error::Range(format!(
                "object {id} frame {t} outside clip of {clip_length}"
            )));
        }
    }
    let mut seq = RenderedSequence::new();
    let header = if clip_length == 1 {
        HEADER_IMAGE_TEMPLATE
    } else {
        HEADER_TEMPLATE
    };
    render_template(&mut seq, header, |seq, name| match name {
        "frames" => {
            seq.push_text(&clip_length.to_string());
            Ok(())
        }
        other => Err(unknown_placeholder(other)),
    })?;
    for (id, frames) in bank_view {
        render_template(&mut seq, OBJECT_TEMPLATE, |seq, name| match name {
            "object" => {
                seq.push_text(&id.to_string());
                Ok(())
            }
            "slots" => {
                for (i, &t) in frames.iter().enumerate() {
                    if i > 0 {
                        seq.push_text(" ");
                    }
                    seq.push_text(&format!("<{}> ", t + 1));
                    seq.push_slot(
                        SlotBinding::Mem {
                            object_id: *id,
                            frame: t,
                        },
                        tokens,
                    );
                }
                Ok(())
            }
            other => Err(unknown_placeholder(other)),
        })?;
    }
    seq.push_text(question);
    Ok(seq)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefillParse {
    /// `(object_id, position of its <SEG> in the generated sequence)`.
    pub objects: Vec<(u32, usize)>,
}

impl PrefillParse {
    pub fn object_ids(&self) -> Vec<u32> {
        self.objects.iter().map(|&(id, _)| id).collect()
    }
}

/// Last `[digits]` label in a byte span.
fn last_label(bytes: &[u8]) -> Option<u32> {
    let mut best = None;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'[' {
            let digits = bytes[i + 1..].iter().take_while(|b| b.is_ascii_digit()).count();
            let end = i + 1 + digits;
            if digits > 0 && end < bytes.len() && bytes[end] == b']' {
                if let Some(id) = std::str::from_utf8(&bytes[i + 1..end])
                    .ok()
                    .and_then(|s| s.parse::<u32>().ok())
                {
                    best = Some(id);
                }
                i = end;
            }
        }
        i += 1;
    }
    best
}

/// Pairs every `<SEG>` with the nearest `[k]` label between it and the
/// previous `<SEG>`. Text around the labels is ignored.
pub fn parse_response_objects(generated: &[u32], tokens: &SpecialTokens) -> Result<PrefillParse> {
    let mut objects = Vec::new();
    let mut span: Vec<u8> = Vec::new();
    for (pos, &id) in generated.iter().enumerate() {
        if id < BASE_VOCAB {
            span.push(id as u8);
        } else if id == tokens.seg_id {
            match last_label(&span) {
                Some(k) if k > 0 => objects.push((k, pos)),
                Some(_) => {
                    return Err(Error::MalformedResponse(format!(
                        "object label 0 before <SEG> at {pos}"
                    )))
                }
                None => {
                    return Err(Error::MalformedResponse(format!(
                        "<SEG> at {pos} has no preceding [k] label"
                    )))
                }
            }
            span.clear();
        }
    }
    Ok(PrefillParse { objects })
}

/// Canonical renderings used for snapshot tests and `render --golden`.
pub fn golden_renderings(tokens: &SpecialTokens) -> Result<Vec<(&'static str, String)>> {
    let question = "How does the behavior of [1] differ from [2] and [3]?";
    let bank = vec![
        (1, vec![0, 1, 2]),
        (2, vec![0, 1, 2, 3]),
        (3, vec![0, 1, 2, 3]),
        (4, vec![0, 1, 2, 3]),
    ];
    let cases = vec![
        ("referring", render_referring_prompt(question, 3, tokens)),
        (
            "referring_unlabeled",
            render_referring_prompt("What is happening here?", 2, tokens),
        ),
        ("prefill", render_prefill_target(&[1, 2, 3, 4], tokens)?),
        ("injected", render_injected_prompt(question, &bank, 4, tokens)?),
        (
            "injected_followup",
            render_injected_prompt("What food is [4] offering?", &bank, 4, tokens)?,
        ),
        (
            "injected_image",
            render_injected_prompt("What color is [1]?", &[(1, vec![0])], 1, tokens)?,
        ),
    ];
    Ok(cases
        .into_iter()
        .map(|(name, seq)| (name, golden_text(&seq, tokens)))
        .collect())
}

fn golden_text(seq: &RenderedSequence, tokens: &SpecialTokens) -> String {
    let mut out = seq.display(tokens);
    out.push_str("\n--- slots\n");
    for s in &seq.slots {
        let _ = match s.binding {
            SlotBinding::Ref { prompt_index } => writeln!(out, "{} REF prompt={prompt_index}", s.position),
            SlotBinding::Mem { object_id, frame } => {
                writeln!(out, "{} MEM object={object_id} frame={frame}", s.position)
            }
            SlotBinding::Seg { object_id } => writeln!(out, "{} SEG object={object_id}", s.position),
        };
    }
    out
}
