//! Test-time constraint formulations the demonstrations never saw.
//!
//! Each suite keeps the training field (workspace walls, obstacle disks)
//! and adds novel keep-out geometry. Novelty is enforced by counting: a
//! suite must be satisfied end-to-end by some demos (so a demo-adjacent
//! corridor exists) but by fewer than 15% of them.

use nalgebra::DVector;

use crate::constraint::{ConstraintPrimitive, StageConstraintSet};
use crate::dataset::Dataset;
use crate::{Error, Result};

use super::EnvConfig;

/// Demo-satisfaction ceiling for a suite to count as novel.
pub const NOVELTY_CEILING: f64 = 0.15;

/// Smallest box containing every action in the dataset.
pub fn action_bounding_box(ds: &Dataset) -> Result<(DVector<f64>, DVector<f64>)> {
    let d_a = ds.demos.first().map(|d| d.d_a()).ok_or_else(|| {
        Error::InvalidArgument("cannot derive an action box from an empty dataset".into())
    })?;
    let mut lower = DVector::from_element(d_a, f64::INFINITY);
    let mut upper = DVector::from_element(d_a, f64::NEG_INFINITY);
    for demo in &ds.demos {
        for r in 0..demo.actions.nrows() {
            for c in 0..d_a {
                lower[c] = lower[c].min(demo.actions[(r, c)]);
                upper[c] = upper[c].max(demo.actions[(r, c)]);
            }
        }
    }
    Ok((lower, upper))
}

/// Whether every state of a demonstration satisfies the given primitives.
pub fn demo_satisfies(demo: &crate::dataset::Demonstration, prims: &[ConstraintPrimitive]) -> bool {
    for r in 0..demo.states.nrows() {
        let s = demo.states.row(r).transpose();
        if prims.iter().any(|p| p.violation(&s) > 1e-12) {
            return false;
        }
    }
    true
}

fn x_halfspace(bound: f64) -> ConstraintPrimitive {
    ConstraintPrimitive::Halfspace {
        a: DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]),
        b: bound,
    }
}

fn disk(center: [f64; 2], radius: f64) -> ConstraintPrimitive {
    ConstraintPrimitive::AvoidDisk { center, radius, coords: (0, 1) }
}

/// The three test-time formulations: each is the training field plus novel
/// geometry, uniform over the planning window, with the dataset's action
/// bounding box.
///
/// 1. keep-left: everything right of x = -0.2 is off limits and the inner
///    left gap of the lower row is sealed, funneling through the far-left
///    gaps.
/// 2. sealed-gaps: three upper gaps and the two inner lower gaps are
///    sealed by disks, leaving only the outermost crossings.
/// 3. diagonal: the half-plane x + y > 0.6 is off limits (which rules out
///    every finish except the far-left one) and the inner right gap of the
///    lower row is sealed.
///
/// Gap seals in 2 and 3 reuse the training obstacle radius: wide enough to
/// close the crossing against the demonstrator's waypoint jitter, narrow
/// enough that a tightened seal and its tightened neighbor overlap in a
/// shallow sliver instead of a pocket deeper than the tightening margin.
pub fn novel_constraint_suites(
    cfg: &EnvConfig,
    demos: &Dataset,
    rows: usize,
) -> Result<Vec<StageConstraintSet>> {
    cfg.validate()?;
    if demos.is_empty() {
        return Err(Error::InvalidArgument("suites need demonstrations for the action box".into()));
    }
    let (a_lo, a_hi) = action_bounding_box(demos)?;

    let novel: [Vec<ConstraintPrimitive>; 3] = [
        vec![x_halfspace(-0.2), disk([-0.25, -0.25], 0.16)],
        vec![
            disk([-0.81, 0.3], 0.12),
            disk([-0.25, 0.3], 0.12),
            disk([0.25, 0.3], 0.12),
            disk([-0.25, -0.25], 0.12),
            disk([0.25, -0.25], 0.12),
        ],
        vec![
            ConstraintPrimitive::Halfspace {
                a: DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0]),
                b: 0.6,
            },
            disk([0.25, -0.25], 0.12),
        ],
    ];

    let mut out = Vec::with_capacity(novel.len());
    for (i, extra) in novel.into_iter().enumerate() {
        let base = cfg.training_constraints(rows, a_lo.clone(), a_hi.clone())?;
        let mut prims = base.stages[0].clone();
        prims.extend(extra);
        let set = StageConstraintSet::uniform(prims, rows, a_lo.clone(), a_hi.clone())?;

        let satisfied =
            demos.demos.iter().filter(|d| demo_satisfies(d, &set.stages[0])).count();
        let frac = satisfied as f64 / demos.len() as f64;
        if satisfied == 0 {
            return Err(Error::Config(format!(
                "suite {i} leaves no demo-adjacent corridor (0/{} demos satisfy it)",
                demos.len()
            )));
        }
        if frac >= NOVELTY_CEILING {
            return Err(Error::Config(format!(
                "suite {i} is not novel: {satisfied}/{} demos satisfy it",
                demos.len()
            )));
        }
        out.push(set);
    }
    Ok(out)
}
