//! Complementary parts models: hypothesis scoring, grid-template
//! initialization, greedy search and an exhaustive reference search.
//!
//! A model holds `n + 1` parts; index `0` is the center part and index `n`
//! is the root part covering the whole object. The hypothesis score is
//!
//! ```text
//! S = sum_i f_i - lambda_0 * sum_{p<q} [ |phi_p - phi_q|^2 + beta_0 * IoU(u_p, u_q) ]
//! ```
//!
//! where the pair sum runs over every pair that contains a non-root part.

use serde::{Deserialize, Serialize};

use crate::detect::NmsOutcome;
use crate::error::{Error, Result};
use crate::feature::{semantic_distance, FeatureVec};
use crate::geometry::{iou, BBox};
use crate::par;
use crate::proposal::Proposal;

pub const DEFAULT_LAMBDA_0: f64 = 0.01;
pub const DEFAULT_BETA_0: f64 = 0.1;
pub const DEFAULT_PARTS: usize = 9;

/// Upper bound on the number of hypotheses the exhaustive search will visit.
pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartSource {
    /// Candidate proposal at this index.
    Proposal { index: usize },
    /// Synthetic part cut from this grid cell (row-major).
    GridCell { cell: usize },
    Root,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Part {
    pub feature: FeatureVec,
    pub geometry: BBox,
    pub det_score: f64,
    pub source: PartSource,
}

impl Part {
    pub fn from_proposal(p: &Proposal, index: usize) -> Part {
        Part {
            feature: p.feature.clone(),
            geometry: p.bbox,
            det_score: p.score,
            source: PartSource::Proposal { index },
        }
    }

    fn root(p: &Proposal) -> Part {
        Part {
            source: PartSource::Root,
            ..Part::from_proposal(p, 0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRepr")]
pub struct PartsModel {
    parts: Vec<Part>,
}

#[derive(Deserialize)]
struct ModelRepr {
    parts: Vec<Part>,
}

impl TryFrom<ModelRepr> for PartsModel {
    type Error = Error;

    fn try_from(r: ModelRepr) -> Result<Self> {
        PartsModel::new(r.parts)
    }
}

impl PartsModel {
    /// `parts` lists the `n` searchable parts followed by the root.
    pub fn new(parts: Vec<Part>) -> Result<Self> {
        if parts.len() < 2 {
            return Err(Error::CorruptModel(format!("{} parts; need at least one part and a root", parts.len())));
        }
        let dim = parts[0].feature.dim();
        let mut used = std::collections::BTreeSet::new();
        for (i, p) in parts.iter().enumerate() {
            p.geometry.validate()?;
            if p.feature.dim() != dim {
                return Err(Error::dim(format!("part {i} feature dim {} vs {dim}", p.feature.dim())));
            }
            if !(0.0..=1.0).contains(&p.det_score) {
                return Err(Error::CorruptModel(format!("part {i} score {} outside [0,1]", p.det_score)));
            }
            if i + 1 < parts.len() {
                if let PartSource::Proposal { index } = p.source {
                    if !used.insert(index) {
                        return Err(Error::CorruptModel(format!("proposal {index} used by two parts")));
                    }
                }
            }
        }
        Ok(PartsModel { parts })
    }

    /// Number of non-root parts.
    pub fn n(&self) -> usize {
        self.parts.len() - 1
    }

    pub fn parts(&self) -> &[Part] {
        &self.parts
    }

    pub fn root(&self) -> &Part {
        &self.parts[self.n()]
    }

    fn uses(&self, index: usize) -> bool {
        self.parts[..self.n()]
            .iter()
            .any(|p| p.source == PartSource::Proposal { index })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub lambda_0: f64,
    pub beta_0: f64,
    pub n: usize,
    pub s: usize,
    /// Greedy sweeps over the parts; one sweep gives the O(nk) search.
    pub passes: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            lambda_0: DEFAULT_LAMBDA_0,
            beta_0: DEFAULT_BETA_0,
            n: DEFAULT_PARTS,
            s: 3,
            passes: 1,
        }
    }
}

impl SearchConfig {
    pub fn with_parts(n: usize) -> Result<Self> {
        let s = (n as f64).sqrt().round() as usize;
        let cfg = SearchConfig {
            n,
            s,
            ..SearchConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.s * self.s != self.n {
            return Err(Error::arg(format!("grid side {} does not tile {} parts", self.s, self.n)));
        }
        if !(self.lambda_0 >= 0.0 && self.beta_0 >= 0.0) {
            return Err(Error::arg("lambda_0 and beta_0 must be non-negative"));
        }
        if self.passes == 0 {
            return Err(Error::arg("greedy search needs at least one pass"));
        }
        Ok(())
    }

    /// Grid cell assigned to each non-root part: the center cell first, the
    /// rest in row-major order.
    pub fn cell_order(&self) -> Vec<usize> {
        let center = (self.s / 2) * self.s + self.s / 2;
        std::iter::once(center)
            .chain((0..self.n).filter(|&c| c != center))
            .collect()
    }
}

fn penalty(p: &Part, q: &Part, beta_0: f64) -> f64 {
    let ds = semantic_distance(&p.feature, &q.feature).expect("parts share a feature dim");
    ds + beta_0 * iou(&p.geometry, &q.geometry)
}

fn score_parts(parts: &[&Part], cfg: &SearchConfig) -> f64 {
    let n = parts.len() - 1;
    let total: f64 = parts.iter().map(|p| p.det_score).sum();
    let mut pen = 0.0;
    for p in 0..n {
        for q in p + 1..=n {
            pen += penalty(parts[p], parts[q], cfg.beta_0);
        }
    }
    total - cfg.lambda_0 * pen
}

/// Hypothesis score of a parts model.
pub fn score_hypothesis(model: &PartsModel, cfg: &SearchConfig) -> f64 {
    let refs: Vec<&Part> = model.parts.iter().collect();
    score_parts(&refs, cfg)
}

fn check_candidates(root: &Proposal, candidates: &[Proposal]) -> Result<()> {
    let dim = root.feature.dim();
    match candidates.iter().position(|c| c.feature.dim() != dim) {
        Some(i) => Err(Error::dim(format!("candidate {i} feature dim differs from root ({dim})"))),
        None => Ok(()),
    }
}

/// Grid-template initialization: each grid cell over the root box takes the
/// unused candidate whose center is nearest its own (cells visited center
/// first, then row-major); cells left without candidates become parts cut
/// from the cell with the root's feature and score.
pub fn grid_init(root: &Proposal, candidates: &[Proposal], cfg: &SearchConfig) -> Result<PartsModel> {
    cfg.validate()?;
    check_candidates(root, candidates)?;
    let mut taken = vec![false; candidates.len()];
    let mut parts = Vec::with_capacity(cfg.n + 1);
    for cell in cfg.cell_order() {
        let geom = root.bbox.grid_cell(cfg.s, cell);
        let nearest = (0..candidates.len())
            .filter(|&i| !taken[i])
            .fold(None, |best: Option<(usize, f64)>, i| {
                let d = candidates[i].bbox.center_distance(&geom);
                match best {
                    Some((_, bd)) if bd <= d => best,
                    _ => Some((i, d)),
                }
            });
        parts.push(match nearest {
            Some((i, _)) => {
                taken[i] = true;
                Part::from_proposal(&candidates[i], i)
            }
            None => Part {
                feature: root.feature.clone(),
                geometry: geom,
                det_score: root.score,
                source: PartSource::GridCell { cell },
            },
        });
    }
    parts.push(Part::root(root));
    PartsModel::new(parts)
}

/// Greedy search: for each non-root part in order, swap in the unused
/// candidate that most increases the score (ties keep the incumbent).
pub fn greedy_search(init: &PartsModel, candidates: &[Proposal], cfg: &SearchConfig) -> Result<PartsModel> {
    cfg.validate()?;
    let dim = init.root().feature.dim();
    if let Some(i) = candidates.iter().position(|c| c.feature.dim() != dim) {
        return Err(Error::dim(format!("candidate {i} feature dim differs from model ({dim})")));
    }
    let pool: Vec<Part> = candidates.iter().enumerate().map(|(i, c)| Part::from_proposal(c, i)).collect();
    let mut model = init.clone();
    let mut current = score_hypothesis(&model, cfg);
    let n = model.n();
    for _ in 0..cfg.passes {
        for i in 0..n {
            // score terms that involve slot i: its own f minus its pair penalties
            let slot = |p: &Part, model: &PartsModel| {
                let pen: f64 = (0..=n)
                    .filter(|&q| q != i)
                    .map(|q| penalty(p, &model.parts[q], cfg.beta_0))
                    .sum();
                p.det_score - cfg.lambda_0 * pen
            };
            let incumbent = slot(&model.parts[i], &model);
            let mut best: Option<(usize, f64)> = None;
            for (c, part) in pool.iter().enumerate() {
                if model.uses(c) {
                    continue;
                }
                let delta = slot(part, &model) - incumbent;
                if delta > 0.0 && best.is_none_or(|(_, b)| delta > b) {
                    best = Some((c, delta));
                }
            }
            if let Some((c, _)) = best {
                let mut trial = model.clone();
                trial.parts[i] = pool[c].clone();
                let s = score_hypothesis(&trial, cfg);
                if s > current {
                    model = trial;
                    current = s;
                }
            }
        }
    }
    Ok(model)
}

pub(crate) fn binomial(k: usize, n: usize) -> u128 {
    if n > k {
        return 0;
    }
    let n = n.min(k - n);
    (0..n).fold(1u128, |acc, i| acc * (k - i) as u128 / (i + 1) as u128)
}

/// Lexicographic successor of an ascending `n`-subset of `0..k`.
fn next_combination(idx: &mut [usize], k: usize) -> bool {
    let n = idx.len();
    let Some(i) = (0..n).rev().find(|&i| idx[i] != i + k - n) else {
        return false;
    };
    idx[i] += 1;
    for j in i + 1..n {
        idx[j] = idx[j - 1] + 1;
    }
    true
}

/// Exhaustive argmax over all `n`-subsets of the candidates (parts listed
/// by ascending candidate index, root last). The first maximum in
/// lexicographic subset order wins.
pub fn brute_force_search(root: &Proposal, candidates: &[Proposal], cfg: &SearchConfig) -> Result<PartsModel> {
    cfg.validate()?;
    check_candidates(root, candidates)?;
    let (k, n) = (candidates.len(), cfg.n);
    if k < n {
        return Err(Error::arg(format!("{k} candidates cannot fill {n} parts")));
    }
    let hypotheses = binomial(k, n);
    if hypotheses > BRUTE_FORCE_LIMIT {
        return Err(Error::SearchTooLarge {
            hypotheses,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let pool: Vec<Part> = candidates.iter().enumerate().map(|(i, c)| Part::from_proposal(c, i)).collect();
    let root_part = Part::root(root);
    let mut subsets = Vec::with_capacity(hypotheses as usize);
    let mut idx: Vec<usize> = (0..n).collect();
    loop {
        subsets.push(idx.clone());
        if !next_combination(&mut idx, k) {
            break;
        }
    }
    let scores = par::map(&subsets, |sub| {
        let refs: Vec<&Part> = sub.iter().map(|&i| &pool[i]).chain(std::iter::once(&root_part)).collect();
        score_parts(&refs, cfg)
    });
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    let parts = subsets[best]
        .iter()
        .map(|&i| pool[i].clone())
        .chain(std::iter::once(root_part))
        .collect();
    PartsModel::new(parts)
}

/// Parts mined for one surviving object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedObject {
    /// Position of the object among the NMS survivors.
    pub survivor: usize,
    /// Candidate count (proposals suppressed by this object).
    pub candidates: usize,
    pub init_score: f64,
    pub score: f64,
    /// Part sources refer to indices into the NMS proposal list.
    pub model: PartsModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_score: Option<f64>,
}

/// Grid init plus greedy search for survivor `j`, with candidates drawn from
/// the proposals it suppressed. With `oracle`, also runs the exhaustive search
/// when its guard allows.
pub fn mine_object(nms: &NmsOutcome, j: usize, cfg: &SearchConfig, oracle: bool) -> Result<MinedObject> {
    let root = nms.survivor(j);
    let ids = nms.suppressed_by(j);
    let candidates: Vec<Proposal> = ids.iter().map(|&i| nms.proposals[i].clone()).collect();
    let init = grid_init(root, &candidates, cfg)?;
    let found = greedy_search(&init, &candidates, cfg)?;
    let oracle_score = if oracle && candidates.len() >= cfg.n && binomial(candidates.len(), cfg.n) <= BRUTE_FORCE_LIMIT {
        Some(score_hypothesis(&brute_force_search(root, &candidates, cfg)?, cfg))
    } else {
        None
    };
    let score = score_hypothesis(&found, cfg);
    let parts = found
        .parts
        .into_iter()
        .map(|mut p| {
            if let PartSource::Proposal { index } = p.source {
                p.source = PartSource::Proposal { index: ids[index] };
            }
            p
        })
        .collect();
    Ok(MinedObject {
        survivor: j,
        candidates: candidates.len(),
        init_score: score_hypothesis(&init, cfg),
        score,
        model: PartsModel::new(parts)?,
        oracle_score,
    })
}

/// Mines every survivor; objects are processed in parallel.
pub fn mine_all(nms: &NmsOutcome, cfg: &SearchConfig, oracle: bool) -> Result<Vec<MinedObject>> {
    let js: Vec<usize> = (0..nms.n()).collect();
    par::map(&js, |&j| mine_object(nms, j, cfg, oracle)).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn part(f: &[f64], b: (f64, f64, f64, f64), score: f64, index: usize) -> Part {
        Part {
            feature: FeatureVec::new(f.to_vec()).unwrap(),
            geometry: BBox::new(b.0, b.1, b.2, b.3).unwrap(),
            det_score: score,
            source: PartSource::Proposal { index },
        }
    }

    fn proposal(cx: f64, cy: f64, s: f64, score: f64, f: &[f64]) -> Proposal {
        Proposal::new(BBox::new(cx, cy, s, s).unwrap(), score, 0, FeatureVec::new(f.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn worked_score_example() {
        // d_s = 2 and IoU = 0.25 (overlap 1.6 over union 6.4)
        let a = part(&[1.0, 0.0], (1.0, 1.0, 2.0, 2.0), 0.5, 0);
        let mut b = part(&[0.0, 1.0], (2.2, 1.0, 2.0, 2.0), 0.5, 1);
        b.source = PartSource::Root;
        assert!((iou(&a.geometry, &b.geometry) - 0.25).abs() < 1e-12);
        let m = PartsModel::new(vec![a, b]).unwrap();
        let cfg = SearchConfig::with_parts(1).unwrap();
        assert!((score_hypothesis(&m, &cfg) - 0.97975).abs() < 1e-12);
        let off = SearchConfig { lambda_0: 0.0, ..cfg };
        assert_eq!(score_hypothesis(&m, &off), 1.0);
    }

    #[test]
    fn duplicate_pair_vs_distinct_pair() {
        // duplicate: d_s 0, IoU 1 -> penalty beta_0; distinct: d_s + beta_0 * IoU'
        let cfg = SearchConfig::with_parts(1).unwrap();
        let root = part(&[0.0], (0.5, 0.5, 1.0, 1.0), 0.5, 9);
        let dup = PartsModel::new(vec![part(&[0.0], (0.5, 0.5, 1.0, 1.0), 0.5, 0), root.clone()]).unwrap();
        let near = PartsModel::new(vec![part(&[0.2], (5.5, 0.5, 1.0, 1.0), 0.5, 1), root.clone()]).unwrap();
        let far = PartsModel::new(vec![part(&[0.5], (5.5, 0.5, 1.0, 1.0), 0.5, 2), root]).unwrap();
        // 0.04 < beta_0 (1 - 0): the duplicate scores lower
        assert!(score_hypothesis(&dup, &cfg) < score_hypothesis(&near, &cfg));
        // 0.25 > beta_0: the literal squared-distance term makes the duplicate win
        assert!(score_hypothesis(&dup, &cfg) > score_hypothesis(&far, &cfg));
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = SearchConfig::default();
        assert_eq!((cfg.lambda_0, cfg.beta_0, cfg.n, cfg.s), (0.01, 0.1, 9, 3));
        assert_eq!(cfg.cell_order(), vec![4, 0, 1, 2, 3, 5, 6, 7, 8]);
        assert!(SearchConfig { s: 2, ..cfg.clone() }.validate().is_err());
        assert!(SearchConfig { lambda_0: -1.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn grid_init_without_candidates_tiles_the_root() {
        let root = proposal(10.0, 10.0, 9.0, 0.8, &[1.0]);
        let m = grid_init(&root, &[], &SearchConfig::default()).unwrap();
        assert_eq!(m.n(), 9);
        let area: f64 = m.parts()[..9].iter().map(|p| p.geometry.area()).sum();
        assert!((area - 81.0).abs() < 1e-12);
        assert!(m.parts()[..9].iter().all(|p| matches!(p.source, PartSource::GridCell { .. }) && p.det_score == 0.8));
        assert_eq!(m.parts()[0].geometry.cx, 10.0);
        assert_eq!(m.root().source, PartSource::Root);
    }

    #[test]
    fn grid_init_takes_cell_centers() {
        let root = proposal(10.0, 10.0, 9.0, 0.8, &[1.0]);
        let cells: Vec<Proposal> = (0..9)
            .rev()
            .map(|c| {
                let g = root.bbox.grid_cell(3, c);
                proposal(g.cx, g.cy, 2.0, 0.5, &[0.0])
            })
            .collect();
        let m = grid_init(&root, &cells, &SearchConfig::default()).unwrap();
        for (slot, cell) in SearchConfig::default().cell_order().into_iter().enumerate() {
            assert_eq!(m.parts()[slot].source, PartSource::Proposal { index: 8 - cell });
        }
    }

    #[test]
    fn grid_init_contested_cell() {
        // n = 1: single cell at the root center; two candidates, the nearer wins
        let cfg = SearchConfig::with_parts(4).unwrap();
        let root = proposal(4.0, 4.0, 8.0, 0.9, &[0.0]);
        // cells of a 2x2 grid: centers (2,2) (6,2) (2,6) (6,6); center cell is index 3
        let far = proposal(5.0, 5.0, 1.0, 0.5, &[0.0]);
        let near = proposal(6.0, 6.5, 1.0, 0.5, &[0.0]);
        let m = grid_init(&root, &[far, near], &cfg).unwrap();
        assert_eq!(m.parts()[0].source, PartSource::Proposal { index: 1 });
        // next cell in row-major order (cell 0) gets the remaining candidate
        assert_eq!(m.parts()[1].source, PartSource::Proposal { index: 0 });
        assert!(matches!(m.parts()[2].source, PartSource::GridCell { cell: 1 }));
    }

    #[test]
    fn greedy_edge_cases() {
        let cfg = SearchConfig::with_parts(4).unwrap();
        let root = proposal(4.0, 4.0, 8.0, 0.9, &[0.0, 0.0]);
        let cands: Vec<Proposal> = (0..4)
            .map(|c| {
                let g = root.bbox.grid_cell(2, c);
                proposal(g.cx, g.cy, 3.0, 0.6, &[c as f64 * 0.1, 0.0])
            })
            .collect();
        let init = grid_init(&root, &cands, &cfg).unwrap();
        assert_eq!(greedy_search(&init, &[], &cfg).unwrap(), init);
        assert_eq!(greedy_search(&init, &cands, &cfg).unwrap(), init);
    }

    #[test]
    fn brute_force_edge_cases() {
        let cfg = SearchConfig::with_parts(1).unwrap();
        let root = proposal(4.0, 4.0, 8.0, 0.9, &[0.0]);
        let cands = vec![
            proposal(2.0, 2.0, 2.0, 0.5, &[0.3]),
            proposal(6.0, 6.0, 2.0, 0.7, &[0.9]),
            proposal(4.0, 4.0, 6.0, 0.6, &[0.1]),
        ];
        let m = brute_force_search(&root, &cands, &cfg).unwrap();
        let closed_form = |c: &Proposal| {
            c.score - cfg.lambda_0 * (semantic_distance(&c.feature, &root.feature).unwrap() + cfg.beta_0 * iou(&c.bbox, &root.bbox))
        };
        let best = (0..3).max_by(|&a, &b| closed_form(&cands[a]).total_cmp(&closed_form(&cands[b]))).unwrap();
        assert_eq!(m.parts()[0].source, PartSource::Proposal { index: best });

        let one = brute_force_search(&root, &cands[..1], &cfg).unwrap();
        assert_eq!(one.parts()[0].source, PartSource::Proposal { index: 0 });
        assert!(brute_force_search(&root, &[], &cfg).is_err());
    }

    #[test]
    fn brute_force_guard() {
        let cfg = SearchConfig::with_parts(9).unwrap();
        let root = proposal(4.0, 4.0, 8.0, 0.9, &[0.0]);
        let cands = vec![proposal(4.0, 4.0, 2.0, 0.5, &[0.0]); 40];
        assert!(matches!(
            brute_force_search(&root, &cands, &cfg),
            Err(Error::SearchTooLarge { hypotheses: 273438880, .. })
        ));
    }

    #[test]
    fn combinations_enumerate_everything() {
        let mut idx = vec![0, 1];
        let mut seen = vec![idx.clone()];
        while next_combination(&mut idx, 4) {
            seen.push(idx.clone());
        }
        assert_eq!(seen, vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]);
        assert_eq!(binomial(12, 4), 495);
        assert_eq!(binomial(3, 5), 0);
    }

    #[test]
    fn model_rejects_reused_proposals() {
        let a = part(&[0.0], (1.0, 1.0, 1.0, 1.0), 0.5, 3);
        let root = Part { source: PartSource::Root, ..a.clone() };
        assert!(PartsModel::new(vec![a.clone(), a, root]).is_err());
    }
}
