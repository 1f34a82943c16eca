//! Margin tightening of state constraints.
//!
//! Shrinking each state set by a margin `gamma` guarantees that any point of
//! the shrunk set stays inside the original set under an additive state
//! disturbance of 2-norm at most `gamma`. Action bounds are commands rather
//! than predictions, so they carry no model error and are left alone.

use crate::constraint::{ConstraintPrimitive, StageConstraintSet};
use crate::{Error, Result};

/// Shrinks one primitive by `gamma`.
///
/// Halfspace: the offset retreats by `gamma * ||a||`. Box: every finite bound
/// moves inward by `gamma` (conservative for the 2-norm, exact per axis).
/// Keep-out disk: the radius grows by `gamma`.
pub fn tighten_primitive(p: &ConstraintPrimitive, gamma: f64) -> Result<ConstraintPrimitive> {
    Ok(match p {
        ConstraintPrimitive::Halfspace { a, b } => {
            ConstraintPrimitive::Halfspace { a: a.clone(), b: b - gamma * a.norm() }
        }
        ConstraintPrimitive::Box { lower, upper } => {
            let l = lower.map(|v| if v.is_finite() { v + gamma } else { v });
            let u = upper.map(|v| if v.is_finite() { v - gamma } else { v });
            if l.iter().zip(u.iter()).any(|(lo, hi)| lo > hi) {
                return Err(Error::EmptySet(format!("box emptied by margin {gamma}")));
            }
            ConstraintPrimitive::Box { lower: l, upper: u }
        }
        ConstraintPrimitive::AvoidDisk { center, radius, coords } => {
            ConstraintPrimitive::AvoidDisk { center: *center, radius: radius + gamma, coords: *coords }
        }
    })
}

/// Shrinks every state constraint of `set` by `gamma`, keeping the action box.
pub fn tighten(set: &StageConstraintSet, gamma: f64) -> Result<StageConstraintSet> {
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("margin must be finite and >= 0, got {gamma}")));
    }
    let stages = set
        .stages
        .iter()
        .map(|stage| stage.iter().map(|p| tighten_primitive(p, gamma)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    StageConstraintSet::new(stages, set.action_lower.clone(), set.action_upper.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use rand::Rng;

    use crate::rng;

    fn vecn(v: &[f64]) -> DVector<f64> {
        DVector::from_vec(v.to_vec())
    }

    #[test]
    fn zero_margin_is_identity() {
        let set = StageConstraintSet::uniform(
            vec![
                ConstraintPrimitive::Halfspace { a: vecn(&[1.0, 2.0]), b: 0.3 },
                ConstraintPrimitive::AvoidDisk { center: [0.1, 0.2], radius: 0.5, coords: (0, 1) },
            ],
            4,
            vecn(&[-1.0]),
            vecn(&[1.0]),
        )
        .unwrap();
        assert_eq!(tighten(&set, 0.0).unwrap(), set);
    }

    #[test]
    fn halfspace_offset_retreats_by_scaled_margin() {
        // ||a|| = 5, margin 0.1: offset drops by 0.5.
        let p = ConstraintPrimitive::Halfspace { a: vecn(&[3.0, 4.0]), b: 2.0 };
        match tighten_primitive(&p, 0.1).unwrap() {
            ConstraintPrimitive::Halfspace { b, .. } => assert!((b - 1.5).abs() < 1e-15),
            _ => unreachable!(),
        }
    }

    #[test]
    fn box_keeps_infinite_bounds() {
        let p = ConstraintPrimitive::Box {
            lower: vecn(&[f64::NEG_INFINITY, 0.0]),
            upper: vecn(&[1.0, f64::INFINITY]),
        };
        match tighten_primitive(&p, 0.25).unwrap() {
            ConstraintPrimitive::Box { lower, upper } => {
                assert_eq!(lower[0], f64::NEG_INFINITY);
                assert!((lower[1] - 0.25).abs() < 1e-15);
                assert!((upper[0] - 0.75).abs() < 1e-15);
                assert_eq!(upper[1], f64::INFINITY);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn disk_radius_grows() {
        let p = ConstraintPrimitive::AvoidDisk { center: [0.0, 0.0], radius: 0.12, coords: (0, 1) };
        match tighten_primitive(&p, 0.03).unwrap() {
            ConstraintPrimitive::AvoidDisk { radius, .. } => assert!((radius - 0.15).abs() < 1e-15),
            _ => unreachable!(),
        }
    }

    #[test]
    fn overtightened_box_reports_empty() {
        let p = ConstraintPrimitive::Box { lower: vecn(&[0.0]), upper: vecn(&[0.1]) };
        assert!(matches!(tighten_primitive(&p, 0.06), Err(Error::EmptySet(_))));
    }

    #[test]
    fn negative_margin_rejected() {
        let set = StageConstraintSet::uniform(vec![], 2, vecn(&[-1.0]), vecn(&[1.0])).unwrap();
        assert!(tighten(&set, -0.01).is_err());
        assert!(tighten(&set, f64::NAN).is_err());
    }

    #[test]
    fn action_box_untouched() {
        let set = StageConstraintSet::uniform(
            vec![ConstraintPrimitive::Halfspace { a: vecn(&[1.0, 0.0]), b: 1.0 }],
            3,
            vecn(&[-0.7, -0.7]),
            vecn(&[0.7, 0.7]),
        )
        .unwrap();
        let t = tighten(&set, 0.2).unwrap();
        assert_eq!(t.action_lower, set.action_lower);
        assert_eq!(t.action_upper, set.action_upper);
    }

    // Soundness: a point of the tightened set plus any disturbance of norm
    // <= gamma must satisfy the original primitive. Sampled over random
    // primitives, points, and worst-case-norm disturbances.
    #[test]
    fn tightened_set_absorbs_disturbances() {
        let mut r = rng::stream(0x716);
        let gamma = 0.07;
        let mut accepted = 0usize;
        while accepted < 10_000 {
            let p = match r.gen_range(0..3) {
                0 => ConstraintPrimitive::Halfspace {
                    a: vecn(&[r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0f64)]).normalize().scale(r.gen_range(0.5..2.0)),
                    b: r.gen_range(-0.5..0.5),
                },
                1 => {
                    let l0 = r.gen_range(-1.0..0.0);
                    let l1 = r.gen_range(-1.0..0.0);
                    ConstraintPrimitive::Box {
                        lower: vecn(&[l0, l1]),
                        upper: vecn(&[l0 + r.gen_range(0.5..1.5), l1 + r.gen_range(0.5..1.5)]),
                    }
                }
                _ => ConstraintPrimitive::AvoidDisk {
                    center: [r.gen_range(-0.3..0.3), r.gen_range(-0.3..0.3)],
                    radius: r.gen_range(0.1..0.4),
                    coords: (0, 1),
                },
            };
            let tightened = match tighten_primitive(&p, gamma) {
                Ok(t) => t,
                Err(_) => continue,
            };
            let s = vecn(&[r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)]);
            if tightened.violation(&s) > 0.0 {
                continue;
            }
            let ang = r.gen_range(0.0..std::f64::consts::TAU);
            let w = vecn(&[gamma * ang.cos(), gamma * ang.sin()]);
            let shifted = &s + &w;
            assert!(
                p.violation(&shifted) <= 1e-12,
                "disturbance escaped: {p:?} at {s:?} + {w:?}"
            );
            accepted += 1;
        }
    }

    // Monotonicity: a bigger margin yields a subset.
    #[test]
    fn larger_margin_is_subset() {
        let mut r = rng::stream(0x717);
        for _ in 0..2000 {
            let p = ConstraintPrimitive::Halfspace {
                a: vecn(&[r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0f64)]),
                b: r.gen_range(-0.5..0.5),
            };
            if let ConstraintPrimitive::Halfspace { a, .. } = &p {
                if a.norm() < 1e-3 {
                    continue;
                }
            }
            let small = tighten_primitive(&p, 0.05).unwrap();
            let large = tighten_primitive(&p, 0.15).unwrap();
            let s = vecn(&[r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)]);
            if large.violation(&s) == 0.0 {
                assert_eq!(small.violation(&s), 0.0);
            }
        }
    }
}
