//! Optimal one-to-one assignment between target and predicted strokes.

use super::{stroke_param_l1, LAMBDA_W};
use crate::error::{shape_err, Result};
use crate::losses::gaussian::gaussian_wasserstein;
use crate::stroke::StrokeParams;

/// `assignment[u]` is the predicted index matched to target `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    pub assignment: Vec<usize>,
    pub cost: f64,
}

/// Minimum-cost perfect matching on a square cost matrix (shortest
/// augmenting paths with row/column potentials, `O(n^3)`).
///
/// Ties resolve toward the lowest column index at every relaxation, so the
/// result is deterministic.
pub fn solve_assignment(cost: &[Vec<f64>]) -> Result<Matching> {
    let n = cost.len();
    if let Some(row) = cost.iter().find(|r| r.len() != n) {
        return Err(shape_err(format!("{n} columns"), row.len()));
    }
    if n == 0 {
        return Ok(Matching {
            assignment: Vec::new(),
            cost: 0.0,
        });
    }
    // 1-based with a virtual column 0, following the classic formulation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0usize;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0usize;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let reduced = cost[r0 - 1][col - 1] - u[r0] - v[col];
                if reduced < min_to[col] {
                    min_to[col] = reduced;
                    way[col] = col0;
                }
                if min_to[col] < delta {
                    delta = min_to[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    min_to[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for col in 1..=n {
        assignment[owner[col] - 1] = col - 1;
    }
    let total = assignment.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
    Ok(Matching {
        assignment,
        cost: total,
    })
}

/// Pairwise matching cost `D_L1 + lambda_W * D_W`.
pub fn pair_cost(target: &StrokeParams, predicted: &StrokeParams, lambda_w: f64) -> Result<f64> {
    Ok(stroke_param_l1(target, predicted) + lambda_w * gaussian_wasserstein(target, predicted)?)
}

pub fn cost_matrix(target: &[StrokeParams], predicted: &[StrokeParams], lambda_w: f64) -> Result<Vec<Vec<f64>>> {
    target
        .iter()
        .map(|t| predicted.iter().map(|p| pair_cost(t, p, lambda_w)).collect())
        .collect()
}

/// Optimal bijection between target and predicted strokes under the
/// default `lambda_W`.
pub fn match_strokes(target: &[StrokeParams], predicted: &[StrokeParams]) -> Result<Matching> {
    match_strokes_weighted(target, predicted, LAMBDA_W)
}

pub fn match_strokes_weighted(target: &[StrokeParams], predicted: &[StrokeParams], lambda_w: f64) -> Result<Matching> {
    if target.len() != predicted.len() {
        return Err(shape_err(target.len(), predicted.len()));
    }
    solve_assignment(&cost_matrix(target, predicted, lambda_w)?)
}
