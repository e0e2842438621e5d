use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Sample;
use crate::error::Result;
use crate::model::{ClipAnalysis, Model};
use crate::segmentation::{binarize, evaluate_clip, random_baseline, ClipReport, MaskSet};

/// Clips per inference batch during evaluation.
pub const EVAL_BATCH: usize = 16;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clips: usize,
    pub accuracy: f64,
    #[serde(rename = "JF", skip_serializing_if = "Option::is_none")]
    pub jf: Option<f64>,
    #[serde(rename = "J", skip_serializing_if = "Option::is_none")]
    pub j: Option<f64>,
    #[serde(rename = "F", skip_serializing_if = "Option::is_none")]
    pub f: Option<f64>,
    /// Mean JF of per-frame pixel-shuffled predictions.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub random_jf: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fg_bg_norm_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_clip: Vec<ClipReport>,
}

/// Runs the model over `samples` in fixed-size chunks.
pub fn analyze_all(model: &Model, samples: &[Sample]) -> Result<Vec<ClipAnalysis>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let feats: Vec<_> = chunk.iter().map(|s| &s.features).collect();
        out.extend(model.analyze(&feats)?);
    }
    Ok(out)
}

/// Slot masks at image resolution for one analysed clip.
pub fn clip_masks(analysis: &ClipAnalysis, sample: &Sample, image: (usize, usize)) -> Result<MaskSet> {
    binarize(&analysis.attn, sample.features.h, sample.features.w, image.0, image.1)
}

/// Accuracy, zero-shot segmentation and the foreground/background ratio of
/// state-change norms. Segmentation numbers are omitted when no sample has
/// masks.
pub fn evaluate(model: &Model, samples: &[Sample], baseline_samples: usize, seed: u64) -> Result<EvalReport> {
    let analyses = analyze_all(model, samples)?;
    let correct = analyses
        .iter()
        .zip(samples)
        .filter(|(a, s)| a.predicted() == s.label)
        .count();
    let mut report = EvalReport {
        clips: samples.len(),
        accuracy: if samples.is_empty() {
            0.0
        } else {
            correct as f64 / samples.len() as f64
        },
        ..EvalReport::default()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut j, mut f, mut rnd, mut scored) = (0.0, 0.0, 0.0, 0usize);
    let (mut fg, mut bg) = (Vec::new(), Vec::new());
    for (a, s) in analyses.iter().zip(samples) {
        let Some(gt) = &s.gt_masks else { continue };
        let image = (gt.shape()[1], gt.shape()[2]);
        let masks = clip_masks(a, s, image)?;
        let score = evaluate_clip(&masks, gt)?;
        if score.empty_foreground {
            continue;
        }
        let matched: Vec<usize> = score.matches.iter().map(|&(slot, _)| slot).collect();
        for (slot, norm) in a.states.slot_norms().into_iter().enumerate() {
            if matched.contains(&slot) {
                fg.push(norm);
            } else {
                bg.push(norm);
            }
        }
        if baseline_samples > 0 {
            rnd += random_baseline(&masks, gt, baseline_samples, &mut rng)?.jf;
        }
        j += score.j;
        f += score.f;
        scored += 1;
        report.per_clip.push(ClipReport::new(&s.id, &score));
    }
    if scored > 0 {
        let n = scored as f64;
        report.j = Some(j / n);
        report.f = Some(f / n);
        report.jf = Some((j / n + f / n) / 2.0);
        if baseline_samples > 0 {
            report.random_jf = Some(rnd / n);
        }
        if !fg.is_empty() && !bg.is_empty() {
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            report.fg_bg_norm_ratio = Some(mean(&fg) / mean(&bg));
        }
    }
    Ok(report)
}
