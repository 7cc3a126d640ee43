use serde::{Deserialize, Serialize};

use crate::cam::{make_label_map, LabelMap, ProbStack, DEFAULT_SIGMA_C};
use crate::crf::{self, CrfParams, MarginalStack};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::image::Image;
use crate::proposal::{Proposal, SoftMask};
use crate::tensor::bilinear_resize;

use super::nms::{filter_by_score, nms_with_records, NmsOutcome};
use super::provider::{DetectionProvider, RefinementPrior};

/// Adds `mask`, resampled to the box footprint, into `channel` at the box location.
fn splat(channel: &mut [f64], height: usize, width: usize, p: &Proposal, mask: &SoftMask) -> Result<()> {
    let r = p.bbox.raster();
    if r.is_empty() {
        return Ok(());
    }
    let m = bilinear_resize(&mask.values, mask.height, mask.width, r.height(), r.width())?;
    let c = r.clip(width, height);
    for y in c.y0..c.y1 {
        for x in c.x0..c.x1 {
            let (my, mx) = ((y - r.y0) as usize, (x - r.x0) as usize);
            channel[y as usize * width + x as usize] += m[my * r.width() + mx];
        }
    }
    Ok(())
}

/// Probability stack from an NMS outcome: channel `j` sums the masks of
/// survivor `j` and everything it suppressed, then is scaled by its maximum.
/// A group with no masks at all falls back to the survivor's box filled
/// with its score.
pub fn accumulate_prob_stack(outcome: &NmsOutcome, height: usize, width: usize) -> Result<ProbStack> {
    if outcome.n() == 0 {
        return Err(Error::arg("cannot accumulate a probability stack without survivors"));
    }
    let mut channels = Vec::with_capacity(outcome.n());
    for j in 0..outcome.n() {
        let mut ch = vec![0.0; height * width];
        let members: Vec<usize> = std::iter::once(outcome.survivors[j])
            .chain(outcome.suppressed_by(j))
            .collect();
        let mut any_mask = false;
        for &i in &members {
            let p = &outcome.proposals[i];
            if let Some(m) = &p.mask {
                any_mask = true;
                splat(&mut ch, height, width, p, m)?;
            }
        }
        if !any_mask {
            let s = outcome.survivor(j);
            let r = s.bbox.raster();
            splat(&mut ch, height, width, s, &SoftMask::filled(r.height(), r.width(), s.score))?;
        }
        let peak = ch.iter().copied().fold(0.0, f64::max);
        if peak > 0.0 {
            ch.iter_mut().for_each(|v| *v = (*v / peak).clamp(0.0, 1.0));
        }
        channels.push(ch);
    }
    ProbStack::from_instances(height, width, channels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub sigma_0: f64,
    pub tau: f64,
    pub sigma_c: f64,
    pub rounds: usize,
    pub crf: CrfParams,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            sigma_0: super::DEFAULT_SIGMA_0,
            tau: super::DEFAULT_TAU,
            sigma_c: DEFAULT_SIGMA_C,
            rounds: 3,
            crf: CrfParams::default(),
        }
    }
}

/// Survivor geometry recorded for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub proposals: usize,
    pub kept: usize,
    pub survivors: Vec<(BBox, u32)>,
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub nms: NmsOutcome,
    pub stack: ProbStack,
    pub labels: LabelMap,
    pub marginals: MarginalStack,
    pub history: Vec<RoundSummary>,
}

/// Alternates detection and CRF segmentation for `cfg.rounds` rounds:
/// provider -> score filter -> NMS -> accumulation -> CRF, handing each
/// round's refined segmentation back to the provider.
pub fn iterative_refine<P: DetectionProvider>(image: &Image, mut provider: P, cfg: &RefineConfig) -> Result<RefineOutcome> {
    if cfg.rounds == 0 {
        return Err(Error::arg("refinement needs at least one round"));
    }
    cfg.crf.validate()?;
    let (h, w) = (image.height(), image.width());
    let mut history = Vec::with_capacity(cfg.rounds);
    let mut last = None;
    for round in 1..=cfg.rounds {
        let raw = provider.propose(round, image)?;
        let kept = filter_by_score(&raw, cfg.sigma_0);
        if kept.is_empty() {
            return Err(Error::NoProposals { round });
        }
        let nms = nms_with_records(kept, cfg.tau)?;
        let stack = accumulate_prob_stack(&nms, h, w)?;
        let seeds = make_label_map(&stack, cfg.sigma_c);
        let (labels, marginals) = crf::infer(&seeds, &stack, image, &cfg.crf)?;
        history.push(RoundSummary {
            round,
            proposals: raw.len(),
            kept: nms.proposals.len(),
            survivors: (0..nms.n()).map(|j| (nms.survivor(j).bbox, nms.survivor(j).class_id)).collect(),
        });
        provider.observe(&RefinementPrior {
            round,
            nms: &nms,
            labels: &labels,
            marginals: &marginals,
        });
        last = Some((nms, stack, labels, marginals));
    }
    let (nms, stack, labels, marginals) = last.expect("at least one round ran");
    Ok(RefineOutcome {
        nms,
        stack,
        labels,
        marginals,
        history,
    })
}

/// Mean over ground-truth instances of the best same-class survivor IoU.
pub fn mean_instance_iou(ground_truth: &[(BBox, u32)], survivors: &[(BBox, u32)]) -> f64 {
    if ground_truth.is_empty() {
        return 0.0;
    }
    let total: f64 = ground_truth
        .iter()
        .map(|(g, c)| {
            survivors
                .iter()
                .filter(|(_, sc)| sc == c)
                .map(|(b, _)| iou(g, b))
                .fold(0.0, f64::max)
        })
        .sum();
    total / ground_truth.len() as f64
}
