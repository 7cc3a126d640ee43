use crate::cam::LabelMap;
use crate::crf::MarginalStack;
use crate::error::Result;
use crate::image::Image;
use crate::proposal::Proposal;

use super::NmsOutcome;

/// What the refinement loop hands back to the provider after each round.
#[derive(Debug, Clone, Copy)]
pub struct RefinementPrior<'a> {
    pub round: usize,
    pub nms: &'a NmsOutcome,
    pub labels: &'a LabelMap,
    pub marginals: &'a MarginalStack,
}

/// Source of scored proposals for an image.
///
/// Implementations must return scores in `[0,1]` and be deterministic for a
/// fixed seed. `observe` receives the CRF-refined segmentation of the
/// previous round and may use it as a localization prior.
pub trait DetectionProvider {
    fn propose(&mut self, round: usize, image: &Image) -> Result<Vec<Proposal>>;

    fn observe(&mut self, _prior: &RefinementPrior<'_>) {}
}

/// Returns the same proposal list every round and ignores priors.
#[derive(Debug, Clone)]
pub struct EchoProvider {
    pub proposals: Vec<Proposal>,
}

impl DetectionProvider for EchoProvider {
    fn propose(&mut self, _round: usize, _image: &Image) -> Result<Vec<Proposal>> {
        Ok(self.proposals.clone())
    }
}

impl<P: DetectionProvider + ?Sized> DetectionProvider for &mut P {
    fn propose(&mut self, round: usize, image: &Image) -> Result<Vec<Proposal>> {
        (**self).propose(round, image)
    }

    fn observe(&mut self, prior: &RefinementPrior<'_>) {
        (**self).observe(prior)
    }
}
