//! One-to-one assignment between ground-truth and predicted objects that
//! maximizes total box IoU.
//!
//! [`match_objects`] runs the Hungarian algorithm on a zero-padded square
//! cost matrix and then picks, among all optimal assignments, the
//! lexicographically smallest pair list. [`brute_force_match`] enumerates
//! every assignment and applies the same tie rule, so the two agree on
//! pairings whenever the optimum is unique.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::iou;
use crate::structured_output::ObjectAnswer;

/// Largest side the brute-force oracle accepts.
pub const BRUTE_FORCE_MAX: usize = 8;

/// Reduced costs within this distance of zero count as tight.
const TIGHT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MatchingError {
    #[error("brute-force matching supports at most {BRUTE_FORCE_MAX} objects per side, got {0}")]
    TooLarge(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Matching {
    /// `(gt_index, pred_index)`, sorted by gt index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_pred: Vec<usize>,
}

impl Matching {
    fn from_pairs(mut pairs: Vec<(usize, usize)>, n_gt: usize, n_pred: usize) -> Self {
        pairs.sort_unstable();
        let mut gt_used = vec![false; n_gt];
        let mut pred_used = vec![false; n_pred];
        for &(g, p) in &pairs {
            gt_used[g] = true;
            pred_used[p] = true;
        }
        Self {
            pairs,
            unmatched_gt: (0..n_gt).filter(|&i| !gt_used[i]).collect(),
            unmatched_pred: (0..n_pred).filter(|&j| !pred_used[j]).collect(),
        }
    }

    /// Sum of `weights[gt][pred]` over matched pairs.
    pub fn total(&self, weights: &[Vec<f64>]) -> f64 {
        self.pairs.iter().map(|&(g, p)| weights[g][p]).sum()
    }
}

/// `weights[i][j] = iou(gt[i].bbox, pred[j].bbox)`.
pub fn iou_matrix(gt: &[ObjectAnswer], pred: &[ObjectAnswer]) -> Vec<Vec<f64>> {
    gt.iter()
        .map(|g| pred.iter().map(|p| iou(&g.bbox, &p.bbox)).collect())
        .collect()
}

/// Optimal IoU matching of ground truth against predictions.
pub fn match_objects(gt: &[ObjectAnswer], pred: &[ObjectAnswer]) -> Matching {
    max_weight_matching(&iou_matrix(gt, pred), gt.len(), pred.len())
}

/// Maximum-weight assignment on an `n_gt x n_pred` weight matrix.
///
/// Always returns `min(n_gt, n_pred)` pairs, including zero-weight ones.
pub fn max_weight_matching(weights: &[Vec<f64>], n_gt: usize, n_pred: usize) -> Matching {
    let n = n_gt.max(n_pred);
    if n_gt == 0 || n_pred == 0 {
        return Matching::from_pairs(Vec::new(), n_gt, n_pred);
    }
    let cost = |i: usize, j: usize| if i < n_gt && j < n_pred { -weights[i][j] } else { 0.0 };
    let tight = tight_edges(n, &cost, &|_, _| true);
    lexicographic_pick(&tight, n_gt, n_pred)
}

/// Like [`max_weight_matching`], but among assignments optimal for `weights`
/// picks one maximizing the total of the integer-valued `secondary` matrix.
///
/// Used where several optimal pairings score differently downstream; the
/// result then no longer depends on the input order.
pub fn max_weight_matching_refined(
    weights: &[Vec<f64>],
    secondary: &[Vec<u32>],
    n_gt: usize,
    n_pred: usize,
) -> Matching {
    let n = n_gt.max(n_pred);
    if n_gt == 0 || n_pred == 0 {
        return Matching::from_pairs(Vec::new(), n_gt, n_pred);
    }
    let real = |i: usize, j: usize| i < n_gt && j < n_pred;
    let cost = |i: usize, j: usize| if real(i, j) { -weights[i][j] } else { 0.0 };
    let optimal = tight_edges(n, &cost, &|_, _| true);
    let second = |i: usize, j: usize| if real(i, j) { -f64::from(secondary[i][j]) } else { 0.0 };
    let tight = tight_edges(n, &second, &|i, j| optimal[i][j]);
    lexicographic_pick(&tight, n_gt, n_pred)
}

/// Edges lying on some optimal assignment of `cost` restricted to `allowed`.
fn tight_edges(
    n: usize,
    cost: &dyn Fn(usize, usize) -> f64,
    allowed: &dyn Fn(usize, usize) -> bool,
) -> Vec<Vec<bool>> {
    // Disallowed cells get a cost no optimal assignment can afford.
    let forbidden = 1e9;
    let restricted = |i: usize, j: usize| if allowed(i, j) { cost(i, j) } else { forbidden };
    let (u, v) = hungarian_potentials(n, &restricted);
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| allowed(i, j) && (restricted(i, j) - u[i] - v[j]).abs() <= TIGHT_TOL)
                .collect()
        })
        .collect()
}

/// Row by row, takes the smallest real column (then any padding column)
/// that still admits a perfect matching on the remaining tight graph.
fn lexicographic_pick(tight: &[Vec<bool>], n_gt: usize, n_pred: usize) -> Matching {
    let n = tight.len();
    let mut row_fixed = vec![None; n];
    let mut col_taken = vec![false; n];
    for i in 0..n {
        for j in 0..n {
            if !tight[i][j] || col_taken[j] {
                continue;
            }
            row_fixed[i] = Some(j);
            col_taken[j] = true;
            if perfect_matching_exists(tight, &row_fixed, &col_taken) {
                break;
            }
            row_fixed[i] = None;
            col_taken[j] = false;
        }
        debug_assert!(row_fixed[i].is_some(), "tight subgraph lost its perfect matching");
    }
    let pairs = row_fixed
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| (i, j)))
        .filter(|&(i, j)| i < n_gt && j < n_pred)
        .collect();
    Matching::from_pairs(pairs, n_gt, n_pred)
}

/// Jonker-style shortest augmenting path Hungarian algorithm on an `n x n`
/// cost function. Returns optimal dual potentials `(u, v)` with
/// `cost(i, j) - u[i] - v[j] >= 0` and equality on an optimal assignment.
fn hungarian_potentials(n: usize, cost: &dyn Fn(usize, usize) -> f64) -> (Vec<f64>, Vec<f64>) {
    // 1-based internally; index 0 is the virtual root column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (u[1..].to_vec(), v[1..].to_vec())
}

/// Kuhn's augmenting-path check that the free rows can be matched into the
/// free columns using tight edges only.
fn perfect_matching_exists(tight: &[Vec<bool>], row_fixed: &[Option<usize>], col_taken: &[bool]) -> bool {
    let n = tight.len();
    let mut col_owner: Vec<Option<usize>> = vec![None; n];
    for i in (0..n).filter(|&i| row_fixed[i].is_none()) {
        let mut seen = vec![false; n];
        if !augment(i, tight, col_taken, &mut col_owner, &mut seen) {
            return false;
        }
    }
    true
}

fn augment(
    row: usize,
    tight: &[Vec<bool>],
    col_taken: &[bool],
    col_owner: &mut [Option<usize>],
    seen: &mut [bool],
) -> bool {
    for j in 0..tight.len() {
        if !tight[row][j] || col_taken[j] || seen[j] {
            continue;
        }
        seen[j] = true;
        let free = match col_owner[j] {
            None => true,
            Some(other) => augment(other, tight, col_taken, col_owner, seen),
        };
        if free {
            col_owner[j] = Some(row);
            return true;
        }
    }
    false
}

/// Exhaustive oracle for [`match_objects`].
pub fn brute_force_match(gt: &[ObjectAnswer], pred: &[ObjectAnswer]) -> Result<Matching, MatchingError> {
    brute_force_weights(&iou_matrix(gt, pred), gt.len(), pred.len())
}

/// Exhaustive maximum-weight assignment; ties within 1e-9 go to the
/// lexicographically smallest pair list.
pub fn brute_force_weights(weights: &[Vec<f64>], n_gt: usize, n_pred: usize) -> Result<Matching, MatchingError> {
    let largest = n_gt.max(n_pred);
    if largest > BRUTE_FORCE_MAX {
        return Err(MatchingError::TooLarge(largest));
    }
    let transpose = n_gt > n_pred;
    let (rows, cols) = if transpose { (n_pred, n_gt) } else { (n_gt, n_pred) };
    let weight = |r: usize, c: usize| if transpose { weights[c][r] } else { weights[r][c] };

    let mut candidates: Vec<(f64, Vec<(usize, usize)>)> = Vec::new();
    let mut chosen = Vec::with_capacity(rows);
    let mut used = vec![false; cols];
    enumerate(rows, cols, &mut chosen, &mut used, &mut |assignment| {
        let mut pairs: Vec<(usize, usize)> = assignment
            .iter()
            .enumerate()
            .map(|(r, &c)| if transpose { (c, r) } else { (r, c) })
            .collect();
        pairs.sort_unstable();
        let total = assignment.iter().enumerate().map(|(r, &c)| weight(r, c)).sum();
        candidates.push((total, pairs));
    });
    let best = candidates.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
    let pairs = candidates
        .into_iter()
        .filter(|c| c.0 >= best - TIGHT_TOL)
        .map(|c| c.1)
        .min()
        .unwrap_or_default();
    Ok(Matching::from_pairs(pairs, n_gt, n_pred))
}

fn enumerate(
    rows: usize,
    cols: usize,
    chosen: &mut Vec<usize>,
    used: &mut [bool],
    visit: &mut dyn FnMut(&[usize]),
) {
    if chosen.len() == rows {
        visit(chosen);
        return;
    }
    for c in 0..cols {
        if used[c] {
            continue;
        }
        used[c] = true;
        chosen.push(c);
        enumerate(rows, cols, chosen, used, visit);
        chosen.pop();
        used[c] = false;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Bbox, Point};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn obj(x1: f64, y1: f64, x2: f64, y2: f64) -> ObjectAnswer {
        ObjectAnswer::new(Bbox::new(x1, y1, x2, y2).unwrap(), Point::new(x1, y1))
    }

    #[test]
    fn empty_side() {
        let m = match_objects(&[], &[obj(0., 0., 1., 1.)]);
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_pred, vec![0]);
        let m = match_objects(&[obj(0., 0., 1., 1.)], &[]);
        assert_eq!(m.unmatched_gt, vec![0]);
    }

    #[test]
    fn identical_disjoint_lists_pair_diagonally() {
        let boxes = vec![obj(0., 0., 10., 10.), obj(20., 20., 30., 30.), obj(40., 40., 50., 50.)];
        let m = match_objects(&boxes, &boxes);
        assert_eq!(m.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(m.total(&iou_matrix(&boxes, &boxes)), 3.0);
    }

    #[test]
    fn three_by_three_weight_case() {
        // Brute force over 3! permutations: identity 2.4 is the unique best
        // (next best 0.9 + 0 + 0.7 ... and 0.1 + 0.2 + 0.7 = 1.0).
        let w = vec![vec![0.9, 0.1, 0.0], vec![0.2, 0.8, 0.0], vec![0.0, 0.0, 0.7]];
        let m = max_weight_matching(&w, 3, 3);
        assert_eq!(m.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert!((m.total(&w) - 2.4).abs() < 1e-12);
        assert_eq!(brute_force_weights(&w, 3, 3).unwrap(), m);
    }

    #[test]
    fn ties_break_lexicographically() {
        let w = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        assert_eq!(max_weight_matching(&w, 2, 2).pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(brute_force_weights(&w, 2, 2).unwrap().pairs, vec![(0, 0), (1, 1)]);
        // More gt than preds: prefer matching gt 0 first.
        let w = vec![vec![0.0], vec![0.0], vec![0.0]];
        assert_eq!(max_weight_matching(&w, 3, 1).pairs, vec![(0, 0)]);
        assert_eq!(brute_force_weights(&w, 3, 1).unwrap().pairs, vec![(0, 0)]);
        let b = obj(0., 0., 5., 5.);
        assert_eq!(brute_force_match(&[b], &[b]).unwrap().pairs, vec![(0, 0)]);
    }

    #[test]
    fn brute_force_rejects_large_inputs() {
        let boxes: Vec<_> = (0..9).map(|i| obj(i as f64, 0., i as f64 + 1., 1.)).collect();
        assert_eq!(brute_force_match(&boxes, &boxes[..2]), Err(MatchingError::TooLarge(9)));
    }

    fn random_weights(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..k).map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen::<f64>() }).collect())
            .collect()
    }

    #[test]
    fn agrees_with_brute_force_including_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let n = rng.gen_range(0..=6);
            let k = rng.gen_range(0..=6);
            let mut w = random_weights(&mut rng, n, k);
            // Force some exact ties.
            if n > 1 && k > 1 && rng.gen_bool(0.3) {
                let v = w[0][0];
                w[1][1] = v;
                w[0][1] = v;
                w[1][0] = v;
            }
            let fast = max_weight_matching(&w, n, k);
            let slow = brute_force_weights(&w, n, k).unwrap();
            assert_eq!(fast.pairs.len(), n.min(k));
            assert!((fast.total(&w) - slow.total(&w)).abs() < 1e-9);
            assert_eq!(fast, slow, "weights {w:?}");
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.gen_range(1..=5);
            let k = rng.gen_range(1..=5);
            let w = random_weights(&mut rng, n, k);
            let mut perm: Vec<usize> = (0..k).collect();
            for i in (1..k).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            // pred j in the permuted list is original pred perm[j]
            let wp: Vec<Vec<f64>> = w.iter().map(|row| perm.iter().map(|&j| row[j]).collect()).collect();
            let a = max_weight_matching(&w, n, k);
            let b = max_weight_matching(&wp, n, k);
            assert!((a.total(&w) - b.total(&wp)).abs() < 1e-9);
        }
    }

    #[test]
    fn refined_matching_is_lexicographically_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let n = rng.gen_range(1..=5);
            let k = rng.gen_range(1..=5);
            let w = random_weights(&mut rng, n, k);
            let sec: Vec<Vec<u32>> = (0..n).map(|_| (0..k).map(|_| rng.gen_range(0..20)).collect()).collect();
            let m = max_weight_matching_refined(&w, &sec, n, k);
            let score = |pairs: &[(usize, usize)]| {
                let p: f64 = pairs.iter().map(|&(i, j)| w[i][j]).sum();
                let s: u32 = pairs.iter().map(|&(i, j)| sec[i][j]).sum();
                (p, s)
            };
            // Oracle: enumerate every full assignment from the smaller side.
            let mut best: Option<(f64, u32)> = None;
            let rows = n.min(k);
            let cols = n.max(k);
            let mut chosen = Vec::new();
            let mut used = vec![false; cols];
            enumerate(rows, cols, &mut chosen, &mut used, &mut |a| {
                let pairs: Vec<(usize, usize)> =
                    a.iter().enumerate().map(|(r, &c)| if n <= k { (r, c) } else { (c, r) }).collect();
                let (p, s) = score(&pairs);
                best = match best {
                    None => Some((p, s)),
                    Some((bp, bs)) if p > bp + 1e-9 || ((p - bp).abs() <= 1e-9 && s > bs) => Some((p, s)),
                    keep => keep,
                };
            });
            let (bp, bs) = best.unwrap();
            let (p, s) = score(&m.pairs);
            assert!((p - bp).abs() < 1e-9);
            assert_eq!(s, bs);
        }
    }
}
