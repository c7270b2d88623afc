//! Three linear functionals on covering space-time, stored scaled by three so
//! that every quantity is an integer ("thirds"):
//!
//! ```text
//! f1(x, y, z, t) = -3x - t
//! f2(x, y, z, t) = -3y - t
//! f3(x, y, z, t) =  3x + 3y + 2t
//! ```
//!
//! They sum to zero at every point and ignore the line coordinate `z`. The
//! size of a set adds up the three maxima; the span of a spanned set adds up
//! each functional at its own pole.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::lattice::SpaceTimePoint;
use crate::rules::TOOM_NEIGHBORHOOD;

/// Index of one of the three functionals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Functional {
    First,
    Second,
    Third,
}

impl Functional {
    pub const ALL: [Functional; 3] = [Functional::First, Functional::Second, Functional::Third];

    pub fn index(self) -> usize {
        self as usize
    }

    #[inline]
    pub fn eval(self, v: &SpaceTimePoint) -> i64 {
        match self {
            Functional::First => -3 * v.a - v.t,
            Functional::Second => -3 * v.b - v.t,
            Functional::Third => 3 * v.a + 3 * v.b + 2 * v.t,
        }
    }
}

/// Scaled size of a non-empty set.
pub fn size<'a, I>(points: I) -> Result<i64>
where
    I: IntoIterator<Item = &'a SpaceTimePoint>,
{
    let mut max = [i64::MIN; 3];
    let mut any = false;
    for v in points {
        any = true;
        for f in Functional::ALL {
            max[f.index()] = max[f.index()].max(f.eval(v));
        }
    }
    if !any {
        return Err(Error::Precondition("size of an empty set".into()));
    }
    Ok(max.iter().sum())
}

/// A finite base set with three designated poles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpannedSet {
    base: BTreeSet<SpaceTimePoint>,
    poles: [SpaceTimePoint; 3],
}

impl SpannedSet {
    pub fn new(base: BTreeSet<SpaceTimePoint>, poles: [SpaceTimePoint; 3]) -> Result<Self> {
        if let Some(p) = poles.iter().find(|p| !base.contains(p)) {
            return Err(Error::Precondition(format!(
                "pole {p} is not in the base set"
            )));
        }
        Ok(Self { base, poles })
    }

    pub fn base(&self) -> &BTreeSet<SpaceTimePoint> {
        &self.base
    }

    pub fn poles(&self) -> &[SpaceTimePoint; 3] {
        &self.poles
    }

    pub fn pole(&self, f: Functional) -> SpaceTimePoint {
        self.poles[f.index()]
    }

    /// Scaled span: each functional evaluated at its pole.
    pub fn span(&self) -> i64 {
        span_of_poles(&self.poles)
    }

    pub fn size(&self) -> i64 {
        size(&self.base).expect("base contains the poles")
    }
}

pub fn span_of_poles(poles: &[SpaceTimePoint; 3]) -> i64 {
    Functional::ALL
        .iter()
        .map(|f| f.eval(&poles[f.index()]))
        .sum()
}

/// Spanned set whose span equals the size of `points`: each pole maximises
/// its functional, ties going to the lexicographically least point.
pub fn create_spanned<I>(points: I) -> Result<SpannedSet>
where
    I: IntoIterator<Item = SpaceTimePoint>,
{
    let base: BTreeSet<_> = points.into_iter().collect();
    let first = *base
        .first()
        .ok_or_else(|| Error::Precondition("spanned set over an empty set".into()))?;
    let mut poles = [first; 3];
    for f in Functional::ALL {
        // BTreeSet iterates in increasing order, so strict comparison keeps
        // the least maximiser.
        let mut best = first;
        for v in &base {
            if f.eval(v) > f.eval(&best) {
                best = *v;
            }
        }
        poles[f.index()] = best;
    }
    SpannedSet::new(base, poles)
}

/// The nine offsets an arrow can take from a point down to a predecessor.
pub fn arrow_offsets() -> [SpaceTimePoint; 9] {
    let mut out = [SpaceTimePoint::new(0, 0, 0, -1); 9];
    let mut k = 0;
    for du in [-1, 0, 1] {
        for &(da, db) in &TOOM_NEIGHBORHOOD {
            out[k] = SpaceTimePoint::new(da, db, du, -1);
            k += 1;
        }
    }
    out
}

/// Whether an offset lies in the prism `(0,0,0,-1) + {f1 <= 0, f2 <= 0, f3 <= 3}`
/// (scaled units).
pub fn in_excuse_prism(offset: &SpaceTimePoint) -> bool {
    let shifted = offset.offset(0, 0, 0, 1);
    Functional::First.eval(&shifted) <= 0
        && Functional::Second.eval(&shifted) <= 0
        && Functional::Third.eval(&shifted) <= 3
}

/// Size of the arrow offsets, after checking each of them lies in the prism.
/// The result is 3 (one unscaled unit).
pub fn prism_check() -> i64 {
    let offsets = arrow_offsets();
    assert!(
        offsets.iter().all(in_excuse_prism),
        "arrow offset outside the prism"
    );
    let s = size(&offsets).expect("nine offsets");
    assert_eq!(s, 3, "prism size");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(a: i64, b: i64, u: i64, t: i64) -> SpaceTimePoint {
        SpaceTimePoint::new(a, b, u, t)
    }

    #[test]
    fn size_examples() {
        assert_eq!(size(&[p(4, -2, 7, 3)]).unwrap(), 0);
        assert_eq!(size(&[p(3, 2, 1, 5), p(2, 3, 1, 5)]).unwrap(), 3);
        assert_eq!(size(&[p(2, 2, 0, 5), p(2, 2, 2, 5)]).unwrap(), 0);
        assert!(size(&[]).is_err());
    }

    #[test]
    fn create_spanned_examples() {
        let single = create_spanned([p(1, 2, 3, 4)]).unwrap();
        assert_eq!(single.poles(), &[p(1, 2, 3, 4); 3]);
        assert_eq!(single.span(), 0);

        let pair = create_spanned([p(0, 0, 0, 0), p(1, 0, 0, 0)]).unwrap();
        assert_eq!(pair.poles(), &[p(0, 0, 0, 0), p(0, 0, 0, 0), p(1, 0, 0, 0)]);
        assert_eq!(pair.span(), 3);
        assert!(create_spanned(std::iter::empty()).is_err());
    }

    #[test]
    fn poles_must_be_in_base() {
        let base: BTreeSet<_> = [p(0, 0, 0, 0)].into_iter().collect();
        assert!(SpannedSet::new(base, [p(0, 0, 0, 0), p(1, 0, 0, 0), p(0, 0, 0, 0)]).is_err());
    }

    #[test]
    fn prism_facts() {
        assert_eq!(prism_check(), 3);
        let offsets = arrow_offsets();
        for f in Functional::ALL {
            assert_eq!(offsets.iter().map(|o| f.eval(o)).max(), Some(1));
        }
        // A slightly larger triangle leaves the prism.
        assert!(!in_excuse_prism(&p(-1, 0, 0, -1)));
        assert!(!in_excuse_prism(&p(1, 1, 0, -1)));
    }

    fn point() -> impl Strategy<Value = SpaceTimePoint> {
        (-50i64..50, -50i64..50, -10i64..10, -20i64..40).prop_map(|(a, b, u, t)| p(a, b, u, t))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn functionals_sum_to_zero(v in point()) {
            let total: i64 = Functional::ALL.iter().map(|f| f.eval(&v)).sum();
            prop_assert_eq!(total, 0);
            prop_assert_eq!(Functional::First.eval(&v), Functional::First.eval(&v.offset(0, 0, 5, 0)));
        }

        #[test]
        fn functionals_are_additive(v in point(), w in point()) {
            let sum = p(v.a + w.a, v.b + w.b, v.u + w.u, v.t + w.t);
            for f in Functional::ALL {
                prop_assert_eq!(f.eval(&sum), f.eval(&v) + f.eval(&w));
            }
        }

        #[test]
        fn size_is_translation_invariant(set in prop::collection::vec(point(), 1..12), w in point()) {
            let moved: Vec<_> = set.iter().map(|v| p(v.a + w.a, v.b + w.b, v.u + w.u, v.t + w.t)).collect();
            prop_assert_eq!(size(&set).unwrap(), size(&moved).unwrap());
        }

        #[test]
        fn size_is_monotone(set in prop::collection::vec(point(), 1..12), extra in prop::collection::vec(point(), 0..5)) {
            let mut bigger = set.clone();
            bigger.extend(extra);
            prop_assert!(size(&set).unwrap() <= size(&bigger).unwrap());
            prop_assert!(size(&set).unwrap() >= 0);
        }

        #[test]
        fn created_span_equals_size(set in prop::collection::vec(point(), 1..12)) {
            let spanned = create_spanned(set.iter().copied()).unwrap();
            prop_assert_eq!(spanned.span(), size(&set).unwrap());
        }

        #[test]
        fn any_poles_are_bounded_by_size(set in prop::collection::vec(point(), 1..8), picks in (0usize..8, 0usize..8, 0usize..8)) {
            let n = set.len();
            let poles = [set[picks.0 % n], set[picks.1 % n], set[picks.2 % n]];
            let spanned = SpannedSet::new(set.iter().copied().collect(), poles).unwrap();
            prop_assert!(spanned.span() <= spanned.size());
        }
    }
}
