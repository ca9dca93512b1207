//! Spatio-temporal conflict detection on predicted trajectories: two agents
//! conflict when their bounding boxes overlap at the same future tick. A
//! conflict is a warning about the future, not a collision — the current
//! boxes are usually still apart when one fires.

use std::collections::BTreeMap;

use crate::geometry::{obb_overlap_depth, OrientedBox, Vec2};
use crate::predict::PredictedTrajectory;
use crate::scenario::AgentId;

/// A detected future overlap between a pair of agents.
#[derive(Debug, Clone, PartialEq)]
pub struct Conflict {
    /// Ordered pair, smaller id first.
    pub pair: (AgentId, AgentId),
    /// First horizon step (1-based) at which the boxes overlap.
    pub first_step: usize,
    /// Midpoint of the two box centers at `first_step`.
    pub cross_point: Vec2,
    /// Minimum projected overlap across the separating-axis candidates at
    /// the first overlapping step.
    pub penetration: f64,
}

impl Conflict {
    pub fn involves(&self, id: AgentId) -> bool {
        self.pair.0 == id || self.pair.1 == id
    }

    pub fn other(&self, id: AgentId) -> AgentId {
        if self.pair.0 == id {
            self.pair.1
        } else {
            self.pair.0
        }
    }
}

/// Heading of a predicted trajectory at step index `i`, from consecutive
/// means; falls back to the previous delta (or 0) when stationary.
fn mean_yaw(mean: &[Vec2], i: usize) -> f64 {
    let eps = 1e-6;
    // prefer the forward difference at i, then backward ones
    if i + 1 < mean.len() {
        let d = mean[i + 1] - mean[i];
        if d.norm() > eps {
            return d.angle();
        }
    }
    for k in (1..=i).rev() {
        let d = mean[k] - mean[k - 1];
        if d.norm() > eps {
            return d.angle();
        }
    }
    0.0
}

/// Box of an agent at a predicted step, inflated by `margin` on each side.
fn step_box(mean: &[Vec2], i: usize, dims: (f64, f64), margin: f64) -> OrientedBox {
    let (width, length) = dims;
    OrientedBox::new(
        mean[i],
        Vec2::new(length / 2.0 + margin, width / 2.0 + margin),
        mean_yaw(mean, i),
    )
}

/// Which predicted modes participate in conflict checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModeSelection {
    /// Only the most likely mode of each trajectory.
    #[default]
    MostLikely,
    /// Any mode pair overlapping counts (earliest step over all pairs).
    AnyMode,
}

/// Earliest-step pairwise conflict between two predicted trajectories
/// (mode-argmax point estimates), over the common horizon. `dims` are
/// (width, length) per agent; `inflation` grows both boxes.
pub fn detect_pair(
    a: &PredictedTrajectory,
    b: &PredictedTrajectory,
    dims_a: (f64, f64),
    dims_b: (f64, f64),
    inflation: f64,
) -> Option<Conflict> {
    detect_means(
        a.agent_id,
        b.agent_id,
        a.point_estimate(),
        b.point_estimate(),
        dims_a,
        dims_b,
        inflation,
    )
}

/// [`detect_pair`] with an explicit mode-selection policy.
pub fn detect_pair_with(
    a: &PredictedTrajectory,
    b: &PredictedTrajectory,
    dims_a: (f64, f64),
    dims_b: (f64, f64),
    inflation: f64,
    selection: ModeSelection,
) -> Option<Conflict> {
    match selection {
        ModeSelection::MostLikely => detect_pair(a, b, dims_a, dims_b, inflation),
        ModeSelection::AnyMode => {
            let mut best: Option<Conflict> = None;
            for ma in &a.modes {
                for mb in &b.modes {
                    if let Some(c) = detect_means(
                        a.agent_id, b.agent_id, &ma.mean, &mb.mean, dims_a, dims_b, inflation,
                    ) {
                        if best.as_ref().is_none_or(|b| c.first_step < b.first_step) {
                            best = Some(c);
                        }
                    }
                }
            }
            best
        }
    }
}

fn detect_means(
    id_a: AgentId,
    id_b: AgentId,
    mean_a: &[Vec2],
    mean_b: &[Vec2],
    dims_a: (f64, f64),
    dims_b: (f64, f64),
    inflation: f64,
) -> Option<Conflict> {
    let horizon = mean_a.len().min(mean_b.len());
    for i in 0..horizon {
        let box_a = step_box(mean_a, i, dims_a, inflation);
        let box_b = step_box(mean_b, i, dims_b, inflation);
        if let Some(penetration) = obb_overlap_depth(&box_a, &box_b) {
            let pair = if id_a <= id_b { (id_a, id_b) } else { (id_b, id_a) };
            return Some(Conflict {
                pair,
                first_step: i + 1,
                cross_point: (mean_a[i] + mean_b[i]).scale(0.5),
                penetration,
            });
        }
    }
    None
}

/// All pairwise conflicts among the predicted agents, sorted by
/// (first_step, pair) so downstream takeover order is reproducible.
///
/// A bounding-circle prefilter skips pairs whose centers never come within
/// the sum of their half-diagonals; it cannot change the result set.
pub fn detect_all(
    preds: &BTreeMap<AgentId, PredictedTrajectory>,
    dims: &BTreeMap<AgentId, (f64, f64)>,
    inflation: f64,
) -> Vec<Conflict> {
    let ids: Vec<AgentId> = preds.keys().copied().collect();
    let mut conflicts = Vec::new();
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            let (pa, pb) = (&preds[&ids[i]], &preds[&ids[j]]);
            let (da, db) = (dims[&ids[i]], dims[&ids[j]]);
            if circle_prefilter_skips(pa, pb, da, db, inflation) {
                continue;
            }
            if let Some(c) = detect_pair(pa, pb, da, db, inflation) {
                conflicts.push(c);
            }
        }
    }
    conflicts.sort_by_key(|a| (a.first_step, a.pair));
    conflicts
}

fn circle_prefilter_skips(
    a: &PredictedTrajectory,
    b: &PredictedTrajectory,
    dims_a: (f64, f64),
    dims_b: (f64, f64),
    inflation: f64,
) -> bool {
    let ra = Vec2::new(dims_a.1 / 2.0 + inflation, dims_a.0 / 2.0 + inflation).norm();
    let rb = Vec2::new(dims_b.1 / 2.0 + inflation, dims_b.0 / 2.0 + inflation).norm();
    let reach = ra + rb;
    let ma = a.point_estimate();
    let mb = b.point_estimate();
    let horizon = ma.len().min(mb.len());
    (0..horizon).all(|i| ma[i].dist(mb[i]) > reach)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::obb_overlap;
    use crate::predict::PredictedTrajectory;

    fn straight(id: u64, start: Vec2, vel: Vec2, n: usize) -> PredictedTrajectory {
        let mean = (1..=n)
            .map(|i| start + vel.scale(i as f64 * 0.1))
            .collect();
        PredictedTrajectory::single_mode(AgentId(id), mean, 0.1, false)
    }

    /// Exhaustive per-tick overlap scan with no early exit and no
    /// prefilter; the reference for earliest-step minimality.
    fn brute_force_first_overlap(
        a: &PredictedTrajectory,
        b: &PredictedTrajectory,
        dims_a: (f64, f64),
        dims_b: (f64, f64),
    ) -> Option<usize> {
        let ma = a.point_estimate();
        let mb = b.point_estimate();
        let mut first = None;
        for i in 0..ma.len().min(mb.len()) {
            let ba = step_box(ma, i, dims_a, 0.0);
            let bb = step_box(mb, i, dims_b, 0.0);
            if obb_overlap(&ba, &bb) && first.is_none() {
                first = Some(i + 1);
            }
        }
        first
    }

    #[test]
    fn parallel_lanes_no_conflict() {
        let a = straight(1, Vec2::new(0.0, 0.0), Vec2::new(5.0, 0.0), 50);
        let b = straight(2, Vec2::new(0.0, 4.0), Vec2::new(5.0, 0.0), 50);
        assert!(detect_pair(&a, &b, (2.0, 4.0), (2.0, 4.0), 0.0).is_none());
    }

    #[test]
    fn head_on_first_step_matches_oracle() {
        // 20 m apart, approaching at 5 m/s each
        let a = straight(1, Vec2::new(0.0, 0.0), Vec2::new(5.0, 0.0), 50);
        let b = straight(2, Vec2::new(20.0, 0.0), Vec2::new(-5.0, 0.0), 50);
        let got = detect_pair(&a, &b, (2.0, 4.0), (2.0, 4.0), 0.0).unwrap();
        let expect = brute_force_first_overlap(&a, &b, (2.0, 4.0), (2.0, 4.0)).unwrap();
        assert_eq!(got.first_step, expect);
        // gap closes at 1 m per step from 20 m; boxes touch when the
        // center gap reaches 4 m (two half-lengths)
        assert_eq!(got.first_step, 16);
        assert!((got.cross_point.x - 10.0).abs() < 0.51);
    }

    #[test]
    fn identical_stationary_trajectories_conflict_at_one() {
        let a = straight(1, Vec2::new(3.0, 3.0), Vec2::ZERO, 20);
        let b = straight(2, Vec2::new(3.0, 3.0), Vec2::ZERO, 20);
        let c = detect_pair(&a, &b, (2.0, 4.0), (2.0, 4.0), 0.0).unwrap();
        assert_eq!(c.first_step, 1);
        assert_eq!(c.cross_point, Vec2::new(3.0, 3.0));
    }

    #[test]
    fn pair_symmetry() {
        let a = straight(7, Vec2::new(0.0, 0.0), Vec2::new(5.0, 0.0), 50);
        let b = straight(3, Vec2::new(18.0, 0.5), Vec2::new(-5.0, 0.0), 50);
        let ab = detect_pair(&a, &b, (2.0, 4.0), (2.0, 4.0), 0.0).unwrap();
        let ba = detect_pair(&b, &a, (2.0, 4.0), (2.0, 4.0), 0.0).unwrap();
        assert_eq!(ab.pair, ba.pair);
        assert_eq!(ab.first_step, ba.first_step);
        assert_eq!(ab.pair, (AgentId(3), AgentId(7)));
    }

    #[test]
    fn unequal_lengths_compare_common_prefix() {
        let a = straight(1, Vec2::new(0.0, 0.0), Vec2::new(5.0, 0.0), 10);
        let b = straight(2, Vec2::new(30.0, 0.0), Vec2::new(-5.0, 0.0), 50);
        // within the 10 common steps the gap only closes to 20 m
        assert!(detect_pair(&a, &b, (2.0, 4.0), (2.0, 4.0), 0.0).is_none());
    }

    #[test]
    fn conflict_fires_while_live_boxes_are_separate() {
        let a = straight(1, Vec2::new(0.0, 0.0), Vec2::new(5.0, 0.0), 50);
        let b = straight(2, Vec2::new(20.0, 0.0), Vec2::new(-5.0, 0.0), 50);
        // current boxes (at the trajectory starts) are 20 m apart
        let live_a = step_box(a.point_estimate(), 0, (2.0, 4.0), 0.0);
        let live_b = step_box(b.point_estimate(), 0, (2.0, 4.0), 0.0);
        assert!(!obb_overlap(&live_a, &live_b));
        assert!(detect_pair(&a, &b, (2.0, 4.0), (2.0, 4.0), 0.0).is_some());
    }

    #[test]
    fn inflation_is_monotone() {
        let a = straight(1, Vec2::new(0.0, 0.0), Vec2::new(5.0, 0.0), 50);
        let b = straight(2, Vec2::new(20.0, 0.0), Vec2::new(-5.0, 0.0), 50);
        let base = detect_pair(&a, &b, (2.0, 4.0), (2.0, 4.0), 0.0).unwrap();
        for margin in [0.1, 0.5, 1.0, 2.0] {
            let inflated = detect_pair(&a, &b, (2.0, 4.0), (2.0, 4.0), margin).unwrap();
            assert!(inflated.first_step <= base.first_step);
        }
    }

    #[test]
    fn single_agent_yields_nothing() {
        let mut preds = BTreeMap::new();
        preds.insert(AgentId(1), straight(1, Vec2::ZERO, Vec2::new(5.0, 0.0), 50));
        let mut dims = BTreeMap::new();
        dims.insert(AgentId(1), (2.0, 4.0));
        assert!(detect_all(&preds, &dims, 0.0).is_empty());
    }

    #[test]
    fn three_agents_one_overlapping_pair() {
        let mut preds = BTreeMap::new();
        let mut dims = BTreeMap::new();
        preds.insert(AgentId(1), straight(1, Vec2::new(0.0, 0.0), Vec2::new(5.0, 0.0), 50));
        preds.insert(AgentId(2), straight(2, Vec2::new(20.0, 0.0), Vec2::new(-5.0, 0.0), 50));
        preds.insert(AgentId(3), straight(3, Vec2::new(0.0, 50.0), Vec2::new(5.0, 0.0), 50));
        for id in [1u64, 2, 3] {
            dims.insert(AgentId(id), (2.0, 4.0));
        }
        // O(N^2) no-pruning oracle
        let mut expected = 0;
        let ids: Vec<_> = preds.keys().copied().collect();
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                if brute_force_first_overlap(
                    &preds[&ids[i]],
                    &preds[&ids[j]],
                    dims[&ids[i]],
                    dims[&ids[j]],
                )
                .is_some()
                {
                    expected += 1;
                }
            }
        }
        assert_eq!(expected, 1);
        let found = detect_all(&preds, &dims, 0.0);
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].pair, (AgentId(1), AgentId(2)));
    }

    #[test]
    fn prefilter_does_not_change_results_on_random_agents() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut preds = BTreeMap::new();
        let mut dims = BTreeMap::new();
        for id in 0..50u64 {
            let start = Vec2::new(rng.gen_range(-60.0..60.0), rng.gen_range(-60.0..60.0));
            let vel = Vec2::new(rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0));
            preds.insert(AgentId(id), straight(id, start, vel, 50));
            dims.insert(AgentId(id), (rng.gen_range(1.5..2.5), rng.gen_range(3.5..5.5)));
        }
        let pruned = detect_all(&preds, &dims, 0.0);

        // unpruned oracle: every pair through detect_pair directly
        let ids: Vec<_> = preds.keys().copied().collect();
        let mut unpruned = Vec::new();
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                if let Some(c) = detect_pair(
                    &preds[&ids[i]],
                    &preds[&ids[j]],
                    dims[&ids[i]],
                    dims[&ids[j]],
                    0.0,
                ) {
                    unpruned.push(c);
                }
            }
        }
        unpruned.sort_by_key(|a| (a.first_step, a.pair));
        assert_eq!(pruned.len(), unpruned.len());
        for (p, u) in pruned.iter().zip(&unpruned) {
            assert_eq!(p.pair, u.pair);
            assert_eq!(p.first_step, u.first_step);
        }
        assert!(!pruned.is_empty(), "corpus should contain some conflicts");
    }

    #[test]
    fn earliest_step_minimality_randomized() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let a = straight(
                1,
                Vec2::new(rng.gen_range(-20.0..20.0), rng.gen_range(-5.0..5.0)),
                Vec2::new(rng.gen_range(-8.0..8.0), rng.gen_range(-2.0..2.0)),
                50,
            );
            let b = straight(
                2,
                Vec2::new(rng.gen_range(-20.0..20.0), rng.gen_range(-5.0..5.0)),
                Vec2::new(rng.gen_range(-8.0..8.0), rng.gen_range(-2.0..2.0)),
                50,
            );
            let dims = (2.0, 4.4);
            match detect_pair(&a, &b, dims, dims, 0.0) {
                Some(c) => {
                    let oracle = brute_force_first_overlap(&a, &b, dims, dims).unwrap();
                    assert_eq!(c.first_step, oracle);
                }
                None => {
                    assert!(brute_force_first_overlap(&a, &b, dims, dims).is_none());
                }
            }
        }
    }
}
