use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::proposal::Proposal;

/// Keeps proposals scoring strictly above `sigma_0`, in input order.
pub fn filter_by_score(proposals: &[Proposal], sigma_0: f64) -> Vec<Proposal> {
    proposals.iter().filter(|p| p.score > sigma_0).cloned().collect()
}

/// Result of NMS that remembers who suppressed whom.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NmsOutcome {
    /// The score-filtered input, indexed by the other two fields.
    pub proposals: Vec<Proposal>,
    /// Surviving proposal indices in selection order; survivor `j` is `proposals[survivors[j]]`.
    pub survivors: Vec<usize>,
    /// Suppressed proposal index -> position `j` of its suppressor in `survivors`.
    pub suppression: BTreeMap<usize, usize>,
}

impl NmsOutcome {
    pub fn n(&self) -> usize {
        self.survivors.len()
    }

    pub fn survivor(&self, j: usize) -> &Proposal {
        &self.proposals[self.survivors[j]]
    }

    /// Indices of the proposals suppressed by survivor `j`, ascending.
    pub fn suppressed_by(&self, j: usize) -> Vec<usize> {
        self.suppression
            .iter()
            .filter(|&(_, &s)| s == j)
            .map(|(&i, _)| i)
            .collect()
    }

    pub fn validate(&self, tau: f64) -> Result<()> {
        let mut seen = vec![false; self.proposals.len()];
        for &s in &self.survivors {
            if s >= seen.len() || std::mem::replace(&mut seen[s], true) {
                return Err(Error::Format(format!("survivor index {s} invalid or repeated")));
            }
        }
        for (&i, &j) in &self.suppression {
            if i >= seen.len() || j >= self.survivors.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Format(format!("suppression entry {i}->{j} invalid")));
            }
            let (p, s) = (&self.proposals[i], self.survivor(j));
            if p.class_id != s.class_id || iou(&p.bbox, &s.bbox) <= tau || p.score > s.score {
                return Err(Error::Format(format!("survivor {j} does not dominate proposal {i}")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Format("some proposals are neither kept nor suppressed".into()));
        }
        for a in 0..self.n() {
            for b in a + 1..self.n() {
                let (p, q) = (self.survivor(a), self.survivor(b));
                if p.class_id == q.class_id && iou(&p.bbox, &q.bbox) > tau {
                    return Err(Error::Format(format!("survivors {a} and {b} overlap above tau")));
                }
            }
        }
        Ok(())
    }
}

/// Greedy per-class NMS, highest score first (equal scores: lower index
/// first). Every suppressed proposal records the survivor that removed it.
pub fn nms_with_records(proposals: Vec<Proposal>, tau: f64) -> Result<NmsOutcome> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::arg(format!("NMS threshold {tau} not in (0,1)")));
    }
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| proposals[b].score.total_cmp(&proposals[a].score));

    let mut removed = vec![false; proposals.len()];
    let mut survivors = Vec::new();
    let mut suppression = BTreeMap::new();
    for (rank, &i) in order.iter().enumerate() {
        if removed[i] {
            continue;
        }
        let j = survivors.len();
        survivors.push(i);
        for &k in &order[rank + 1..] {
            if removed[k] || proposals[k].class_id != proposals[i].class_id {
                continue;
            }
            if iou(&proposals[i].bbox, &proposals[k].bbox) > tau {
                removed[k] = true;
                suppression.insert(k, j);
            }
        }
    }
    Ok(NmsOutcome {
        proposals,
        survivors,
        suppression,
    })
}
