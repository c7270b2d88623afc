//! Sites, configurations and space-time indexing for the product space
//! `Z_m x Z_m x A x [0, t_max]`, where `A` is a line of `n_line` cells.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the simulated lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatticeShape {
    m: usize,
    n_line: usize,
    line_periodic: bool,
    t_max: usize,
}

impl LatticeShape {
    pub fn new(m: usize, n_line: usize, line_periodic: bool, t_max: usize) -> Result<Self> {
        if m < 3 {
            return Err(Error::InvalidShape(format!(
                "torus side m={m} must be at least 3"
            )));
        }
        if n_line < 1 {
            return Err(Error::InvalidShape("line length must be at least 1".into()));
        }
        Ok(Self {
            m,
            n_line,
            line_periodic,
            t_max,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n_line(&self) -> usize {
        self.n_line
    }

    pub fn line_periodic(&self) -> bool {
        self.line_periodic
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// Number of sites in one configuration.
    pub fn cells(&self) -> usize {
        self.m * self.m * self.n_line
    }

    /// Number of space-time points with `t >= 1`.
    pub fn noisy_volume(&self) -> usize {
        self.cells() * self.t_max
    }

    /// Dense index of a site that is already reduced.
    #[inline]
    pub fn index(&self, a: usize, b: usize, u: usize) -> usize {
        (u * self.m + a) * self.m + b
    }

    /// Inverse of [`LatticeShape::index`].
    #[inline]
    pub fn site(&self, index: usize) -> (usize, usize, usize) {
        let b = index % self.m;
        let rest = index / self.m;
        (rest % self.m, b, rest / self.m)
    }

    /// Reduces a line coordinate, or returns `None` for a point off a
    /// non-periodic line.
    #[inline]
    pub fn reduce_line(&self, u: i64) -> Option<usize> {
        let n = self.n_line as i64;
        if self.line_periodic {
            Some(u.rem_euclid(n) as usize)
        } else if (0..n).contains(&u) {
            Some(u as usize)
        } else {
            None
        }
    }

    #[inline]
    pub fn reduce_torus(&self, x: i64) -> usize {
        x.rem_euclid(self.m as i64) as usize
    }

    /// Dense index of an arbitrary (possibly unreduced) site.
    pub fn index_of(&self, a: i64, b: i64, u: i64) -> Option<usize> {
        let u = self.reduce_line(u)?;
        Some(self.index(self.reduce_torus(a), self.reduce_torus(b), u))
    }
}

/// A point `(a, b, u, t)` of space-time. The space coordinate comes first.
///
/// The derived ordering is lexicographic in `(a, b, u, t)`; every
/// deterministic tie-break in the crate relies on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SpaceTimePoint {
    pub a: i64,
    pub b: i64,
    pub u: i64,
    pub t: i64,
}

impl SpaceTimePoint {
    pub const fn new(a: i64, b: i64, u: i64, t: i64) -> Self {
        Self { a, b, u, t }
    }

    pub fn time(&self) -> i64 {
        self.t
    }

    pub fn offset(&self, da: i64, db: i64, du: i64, dt: i64) -> Self {
        Self::new(self.a + da, self.b + db, self.u + du, self.t + dt)
    }
}

impl fmt::Display for SpaceTimePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.a, self.b, self.u, self.t)
    }
}

/// Projects a point onto the lattice: torus coordinates modulo `m`, the
/// line coordinate modulo `n_line` when the line is periodic.
pub fn wrap(point: SpaceTimePoint, shape: &LatticeShape) -> Result<SpaceTimePoint> {
    let u = shape
        .reduce_line(point.u)
        .ok_or(Error::OutOfDomain(point))?;
    Ok(SpaceTimePoint::new(
        shape.reduce_torus(point.a) as i64,
        shape.reduce_torus(point.b) as i64,
        u as i64,
        point.t,
    ))
}

/// Assignment of a state to every site of a shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Configuration {
    shape: LatticeShape,
    alphabet: u8,
    cells: Vec<u8>,
}

impl Configuration {
    pub fn uniform(shape: LatticeShape, alphabet: u8, state: u8) -> Result<Self> {
        check_alphabet(alphabet)?;
        if state >= alphabet {
            return Err(Error::InvalidState { state, alphabet });
        }
        Ok(Self {
            shape,
            alphabet,
            cells: vec![state; shape.cells()],
        })
    }

    pub fn from_cells(shape: LatticeShape, alphabet: u8, cells: Vec<u8>) -> Result<Self> {
        check_alphabet(alphabet)?;
        if cells.len() != shape.cells() {
            return Err(Error::InvalidShape(format!(
                "configuration has {} cells, shape needs {}",
                cells.len(),
                shape.cells()
            )));
        }
        if let Some(&state) = cells.iter().find(|&&s| s >= alphabet) {
            return Err(Error::InvalidState { state, alphabet });
        }
        Ok(Self {
            shape,
            alphabet,
            cells,
        })
    }

    /// Product configuration `(a, b, u) -> line[u]`, constant on every plane.
    pub fn from_line(shape: LatticeShape, alphabet: u8, line: &[u8]) -> Result<Self> {
        if line.len() != shape.n_line() {
            return Err(Error::InvalidShape(format!(
                "line pattern has {} cells, line length is {}",
                line.len(),
                shape.n_line()
            )));
        }
        let cells = (0..shape.cells()).map(|i| line[shape.site(i).2]).collect();
        Self::from_cells(shape, alphabet, cells)
    }

    pub fn shape(&self) -> &LatticeShape {
        &self.shape
    }

    pub fn alphabet(&self) -> u8 {
        self.alphabet
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize, u: usize) -> u8 {
        self.cells[self.shape.index(a, b, u)]
    }

    /// State at an unreduced site; `None` off a non-periodic line.
    pub fn get_wrapped(&self, a: i64, b: i64, u: i64) -> Option<u8> {
        self.shape.index_of(a, b, u).map(|i| self.cells[i])
    }

    pub fn set(&mut self, a: usize, b: usize, u: usize, state: u8) -> Result<()> {
        if state >= self.alphabet {
            return Err(Error::InvalidState {
                state,
                alphabet: self.alphabet,
            });
        }
        let i = self.shape.index(a, b, u);
        self.cells[i] = state;
        Ok(())
    }

    pub(crate) fn cells_mut(&mut self) -> &mut [u8] {
        &mut self.cells
    }
}

fn check_alphabet(alphabet: u8) -> Result<()> {
    if alphabet < 2 {
        return Err(Error::InvalidAlphabet(alphabet));
    }
    Ok(())
}

/// Configurations for `t = 0..=t_max`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpaceTimeConfiguration {
    frames: Vec<Configuration>,
}

impl SpaceTimeConfiguration {
    pub fn new(frames: Vec<Configuration>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidShape("space-time configuration needs a frame".into()))?;
        let shape = *first.shape();
        if frames.len() != shape.t_max() + 1 {
            return Err(Error::InvalidShape(format!(
                "{} frames for t_max={}",
                frames.len(),
                shape.t_max()
            )));
        }
        if frames
            .iter()
            .any(|f| *f.shape() != shape || f.alphabet() != first.alphabet())
        {
            return Err(Error::InvalidShape(
                "frames disagree on shape or alphabet".into(),
            ));
        }
        Ok(Self { frames })
    }

    pub fn shape(&self) -> &LatticeShape {
        self.frames[0].shape()
    }

    pub fn alphabet(&self) -> u8 {
        self.frames[0].alphabet()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, t: usize) -> Option<&Configuration> {
        self.frames.get(t)
    }

    pub fn frames(&self) -> &[Configuration] {
        &self.frames
    }

    /// State at a space-time point, after wrapping the site.
    pub fn state_at(&self, point: SpaceTimePoint) -> Result<u8> {
        if point.t < 0 || point.t as usize >= self.frames.len() {
            return Err(Error::TimeOutOfRange {
                t: point.t,
                t_max: self.frames.len() as i64 - 1,
            });
        }
        self.frames[point.t as usize]
            .get_wrapped(point.a, point.b, point.u)
            .ok_or(Error::OutOfDomain(point))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(a: i64, b: i64, u: i64, t: i64) -> SpaceTimePoint {
        SpaceTimePoint::new(a, b, u, t)
    }

    #[test]
    fn wrap_examples() {
        let shape = LatticeShape::new(5, 4, true, 10).unwrap();
        assert_eq!(wrap(p(7, -3, 2, 1), &shape).unwrap(), p(2, 2, 2, 1));
        assert_eq!(wrap(p(0, 0, 0, 0), &shape).unwrap(), p(0, 0, 0, 0));
        let shape = LatticeShape::new(3, 2, false, 10).unwrap();
        assert_eq!(wrap(p(3, 3, 1, 9), &shape).unwrap(), p(0, 0, 1, 9));
    }

    #[test]
    fn wrap_rejects_points_off_a_fixed_line() {
        let shape = LatticeShape::new(3, 2, false, 10).unwrap();
        assert!(matches!(
            wrap(p(0, 0, 2, 0), &shape),
            Err(Error::OutOfDomain(_))
        ));
        assert!(matches!(
            wrap(p(0, 0, -1, 0), &shape),
            Err(Error::OutOfDomain(_))
        ));
    }

    #[test]
    fn shape_validation() {
        assert!(LatticeShape::new(2, 1, true, 0).is_err());
        assert!(LatticeShape::new(3, 0, true, 0).is_err());
        assert!(LatticeShape::new(3, 1, false, 0).is_ok());
    }

    #[test]
    fn index_round_trip() {
        let shape = LatticeShape::new(4, 3, true, 1).unwrap();
        for i in 0..shape.cells() {
            let (a, b, u) = shape.site(i);
            assert_eq!(shape.index(a, b, u), i);
        }
    }

    #[test]
    fn state_at_examples() {
        let shape = LatticeShape::new(4, 2, true, 2).unwrap();
        let zero = Configuration::uniform(shape, 2, 0).unwrap();
        let mut one = zero.clone();
        one.set(1, 1, 0, 1).unwrap();
        let traj =
            SpaceTimeConfiguration::new(vec![zero.clone(), one.clone(), zero.clone()]).unwrap();
        assert_eq!(traj.state_at(p(3, 2, 1, 0)).unwrap(), 0);
        assert_eq!(traj.state_at(p(1, 1, 0, 1)).unwrap(), 1);
        assert_eq!(traj.state_at(p(1 + 4, 1, 0, 1)).unwrap(), 1);
        assert!(matches!(
            traj.state_at(p(0, 0, 0, 3)),
            Err(Error::TimeOutOfRange { .. })
        ));
    }

    #[test]
    fn frame_count_must_match_window() {
        let shape = LatticeShape::new(3, 1, true, 2).unwrap();
        let zero = Configuration::uniform(shape, 2, 0).unwrap();
        assert!(SpaceTimeConfiguration::new(vec![zero.clone(), zero]).is_err());
    }

    #[test]
    fn configuration_rejects_bad_states() {
        let shape = LatticeShape::new(3, 1, true, 0).unwrap();
        assert!(Configuration::uniform(shape, 2, 2).is_err());
        assert!(Configuration::uniform(shape, 1, 0).is_err());
        assert!(Configuration::from_cells(shape, 2, vec![0; 8]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn wrap_is_idempotent(a in -100i64..100, b in -100i64..100, u in -50i64..50, t in 0i64..20,
                                  m in 3usize..9, n in 1usize..6) {
                let shape = LatticeShape::new(m, n, true, 20).unwrap();
                let once = wrap(p(a, b, u, t), &shape).unwrap();
                prop_assert_eq!(wrap(once, &shape).unwrap(), once);
            }

            #[test]
            fn wrap_commutes_with_torus_translation(a in -100i64..100, b in -100i64..100,
                                                     u in 0i64..4, t in 0i64..20, m in 3usize..9) {
                let shape = LatticeShape::new(m, 4, false, 20).unwrap();
                let m = m as i64;
                prop_assert_eq!(
                    wrap(p(a + m, b + m, u, t), &shape).unwrap(),
                    wrap(p(a, b, u, t), &shape).unwrap()
                );
            }
        }
    }
}
