//! Corpus evaluation: per-sample and aggregate J, F, J&F, cIoU and gIoU.

use serde::{Deserialize, Serialize};

use pixelrt_core::autograd::Graph;
use pixelrt_core::exec::{self, Parallelism};
use pixelrt_core::mask::{aggregate_iou, video_scores, MetricReport, SpatioTemporalMask};
use pixelrt_core::{Error, Result};

use crate::data::{render_training_conversation, SampleKind, TrainSample};
use crate::model::PixelModel;
use crate::train::{forward_phase, seg_targets};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Decode each `<SEG>` from the hidden state under the reference answer.
    #[default]
    TeacherForced,
    /// Use the ground-truth masks as predictions; checks the scoring path.
    OracleInjection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectScore {
    pub object_id: u32,
    pub j: f64,
    pub f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub sample_id: String,
    pub kind: SampleKind,
    pub objects: Vec<ObjectScore>,
    /// Mean over objects; absent when the sample has no mask output.
    pub j: Option<f64>,
    pub f: Option<f64>,
    pub jf: Option<f64>,
    /// Teacher-forced LM loss over all answer tokens.
    pub lm_loss: Option<f64>,
    #[serde(skip)]
    pub per_image: Vec<(u64, u64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub samples: Vec<SampleReport>,
    /// Mean over scored objects; `None` when nothing was segmented.
    pub aggregate: Option<MetricReport>,
    /// Token-weighted mean LM loss across samples.
    pub lm_loss: Option<f64>,
}

/// Scores one object's prediction against its ground truth, plus the
/// per-frame `(intersection, union)` areas.
pub fn score_prediction(pred: &SpatioTemporalMask, gt: &SpatioTemporalMask) -> Result<(f64, f64, Vec<(u64, u64)>)> {
    let (j, f) = video_scores(pred, gt)?;
    let areas = (0..gt.clip_length())
        .map(|t| {
            let p = pred.frame_or_empty(t);
            let g = gt.frame_or_empty(t);
            (p.intersection_area(&g) as u64, p.union_area(&g) as u64)
        })
        .collect();
    Ok((j, f, areas))
}

fn evaluate_sample(model: &PixelModel, sample: &TrainSample, mode: EvalMode) -> Result<(SampleReport, usize)> {
    let mut g = Graph::new(&model.store);
    let clip = model.clip_vars(&mut g, &sample.clip)?;
    let phases = render_training_conversation(sample, clip.grid, &model.tokens)?;
    let mut fwd = Vec::with_capacity(phases.len());
    let (mut lm_sum, mut tokens) = (0.0, 0);
    for p in &phases {
        let f = forward_phase(model, &mut g, &clip, sample, p)?;
        lm_sum += g.scalar(f.lm_loss) * f.lm_tokens as f64;
        tokens += f.lm_tokens;
        fwd.push(f);
    }
    let mut objects = Vec::new();
    let mut per_image = Vec::new();
    for target in seg_targets(&phases) {
        let gt = sample
            .gt_masks
            .get(&target.object_id)
            .ok_or(Error::DanglingReference(target.object_id))?;
        let pred = match mode {
            EvalMode::OracleInjection => gt.clone(),
            EvalMode::TeacherForced => {
                let f = &fwd[target.phase];
                let h = g.slice_rows(f.hidden, f.answer_start + target.position, 1);
                let seg = model.seg_to_decoder_tokens(&mut g, h)?;
                let dec = model.decode_mask(&mut g, seg, &clip)?;
                dec.output(&g, model.cfg.decoder.resolution).to_mask(sample.clip.frame_size())?
            }
        };
        let (j, f, areas) = score_prediction(&pred, gt)?;
        per_image.extend(areas);
        objects.push(ObjectScore {
            object_id: target.object_id,
            j,
            f,
        });
    }
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let j = mean(objects.iter().map(|o| o.j).collect());
    let f = mean(objects.iter().map(|o| o.f).collect());
    Ok((
        SampleReport {
            sample_id: sample.sample_id.clone(),
            kind: sample.kind,
            jf: j.zip(f).map(|(j, f)| (j + f) / 2.0),
            j,
            f,
            objects,
            lm_loss: (tokens > 0).then(|| lm_sum / tokens as f64),
            per_image,
        },
        tokens,
    ))
}

/// Scores every sample on its full clip. Deterministic for fixed weights.
pub fn evaluate_corpus(model: &PixelModel, samples: &[TrainSample], mode: EvalMode, par: Parallelism) -> Result<EvalReport> {
    let results = exec::map(par, samples, |s| evaluate_sample(model, s, mode));
    let mut reports = Vec::with_capacity(samples.len());
    let (mut lm_sum, mut tokens) = (0.0, 0);
    for r in results {
        let (rep, n) = r?;
        if let Some(l) = rep.lm_loss {
            lm_sum += l * n as f64;
            tokens += n;
        }
        reports.push(rep);
    }
    let scored: Vec<&ObjectScore> = reports.iter().flat_map(|r| &r.objects).collect();
    let aggregate = if scored.is_empty() {
        None
    } else {
        let n = scored.len() as f64;
        let j = scored.iter().map(|o| o.j).sum::<f64>() / n;
        let f = scored.iter().map(|o| o.f).sum::<f64>() / n;
        // For video corpora every frame counts as one image.
        let (ciou, giou) = aggregate_iou(&reports.iter().flat_map(|r| r.per_image.iter().copied()).collect::<Vec<_>>())?;
        Some(MetricReport::new(j, f, ciou, giou))
    };
    Ok(EvalReport {
        mode,
        samples: reports,
        aggregate,
        lm_loss: (tokens > 0).then(|| lm_sum / tokens as f64),
    })
}

impl EvalReport {
    /// Train-set `(mask J, LM loss)`, the quantities of the overfit bar.
    pub fn fit(&self) -> (f64, f64) {
        (
            self.aggregate.map_or(0.0, |a| a.j),
            self.lm_loss.unwrap_or(f64::INFINITY),
        )
    }

    /// Fixed-width text table, one row per sample and a final mean row.
    pub fn table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut out = format!("{:<16} {:<15} {:>7} {:>7} {:>7} {:>8}\n", "sample", "kind", "J", "F", "J&F", "lm_loss");
        for s in &self.samples {
            out.push_str(&format!(
                "{:<16} {:<15} {:>7} {:>7} {:>7} {:>8}\n",
                s.sample_id,
                s.kind.name(),
                cell(s.j),
                cell(s.f),
                cell(s.jf),
                cell(s.lm_loss)
            ));
        }
        let a = self.aggregate;
        out.push_str(&format!(
            "{:<16} {:<15} {:>7} {:>7} {:>7} {:>8}\n",
            "mean",
            "",
            cell(a.map(|a| a.j)),
            cell(a.map(|a| a.f)),
            cell(a.map(|a| a.jf)),
            cell(self.lm_loss)
        ));
        if let Some(a) = a {
            out.push_str(&format!("cIoU {:.4}  gIoU {:.4}\n", a.ciou, a.giou));
        }
        out
    }
}
