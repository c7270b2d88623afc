//! The deviation field between the noisy and the ideal trajectory, the
//! majority operator over it, the propagation inequality, and the read-only
//! lift of both the field and the noise set to the covering space.

use std::ops::RangeInclusive;

use crate::error::{Error, Result};
use crate::lattice::{LatticeShape, SpaceTimePoint};
use crate::noise_sim::{NoiseSet, TrajectoryPair};
use crate::rules::TOOM_NEIGHBORHOOD;

/// `xi(w, t) = 1` exactly where the noisy trajectory differs from the ideal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviationField {
    shape: LatticeShape,
    bits: Vec<bool>,
}

impl DeviationField {
    pub fn from_bits(shape: LatticeShape, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != shape.cells() * (shape.t_max() + 1) {
            return Err(Error::InvalidShape("deviation field size mismatch".into()));
        }
        Ok(Self { shape, bits })
    }

    pub fn shape(&self) -> &LatticeShape {
        &self.shape
    }

    #[inline]
    pub(crate) fn at_index(&self, t: usize, cell: usize) -> bool {
        self.bits[t * self.shape.cells() + cell]
    }

    /// Value at a point, wrapping the site; `None` off the lattice or window.
    pub fn get(&self, p: SpaceTimePoint) -> Option<bool> {
        if p.t < 0 || p.t as usize > self.shape.t_max() {
            return None;
        }
        let cell = self.shape.index_of(p.a, p.b, p.u)?;
        Some(self.at_index(p.t as usize, cell))
    }

    pub fn count_at(&self, t: usize) -> usize {
        let cells = self.shape.cells();
        self.bits[t * cells..(t + 1) * cells]
            .iter()
            .filter(|&&x| x)
            .count()
    }

    /// Deviating points at time `t`, as reduced coordinates.
    pub fn deviations_at(&self, t: usize) -> impl Iterator<Item = SpaceTimePoint> + '_ {
        let cells = self.shape.cells();
        (0..cells)
            .filter(move |&i| self.at_index(t, i))
            .map(move |i| {
                let (a, b, u) = self.shape.site(i);
                SpaceTimePoint::new(a as i64, b as i64, u as i64, t as i64)
            })
    }
}

pub fn compute_xi(pair: &TrajectoryPair) -> DeviationField {
    let shape = *pair.shape();
    let mut bits = Vec::with_capacity(shape.cells() * (shape.t_max() + 1));
    for (ideal, noisy) in pair.ideal.frames().iter().zip(pair.perturbed.frames()) {
        bits.extend(ideal.cells().iter().zip(noisy.cells()).map(|(x, y)| x != y));
    }
    DeviationField { shape, bits }
}

/// Binary majority of the field over the Toom triangle at `(a, b, u, t)`,
/// wrapping around the torus.
pub fn corr(field: &DeviationField, a: i64, b: i64, u: i64, t: i64) -> Result<bool> {
    let shape = field.shape();
    if t < 0 || t as usize > shape.t_max() {
        return Err(Error::TimeOutOfRange {
            t,
            t_max: shape.t_max() as i64,
        });
    }
    let here = SpaceTimePoint::new(a, b, u, t);
    let u = shape.reduce_line(u).ok_or(Error::OutOfDomain(here))?;
    Ok(corr_reduced(
        field,
        shape.reduce_torus(a),
        shape.reduce_torus(b),
        u,
        t as usize,
    ))
}

#[inline]
fn corr_reduced(field: &DeviationField, a: usize, b: usize, u: usize, t: usize) -> bool {
    let shape = field.shape();
    let m = shape.m();
    let count = [(a, b), ((a + 1) % m, b), (a, (b + 1) % m)]
        .iter()
        .filter(|&&(x, y)| field.at_index(t, shape.index(x, y, u)))
        .count();
    count >= 2
}

/// Every point `(a, b, u, t + 1)` outside the noise set whose deviation is
/// not covered by a majority deviation in one of the three triangles below
/// it. Line neighbours that fall off a fixed boundary are ignored.
pub fn check_propagation(field: &DeviationField, noise: &NoiseSet) -> Vec<SpaceTimePoint> {
    let shape = *field.shape();
    let mut violations = Vec::new();
    for t in 1..=shape.t_max() {
        for cell in 0..shape.cells() {
            if !field.at_index(t, cell) || noise.contains_index(t, cell) {
                continue;
            }
            let (a, b, u) = shape.site(cell);
            let explained = [-1i64, 0, 1].iter().any(|&du| {
                shape
                    .reduce_line(u as i64 + du)
                    .is_some_and(|v| corr_reduced(field, a, b, v, t - 1))
            });
            if !explained {
                violations.push(SpaceTimePoint::new(a as i64, b as i64, u as i64, t as i64));
            }
        }
    }
    violations
}

/// A bounded box of the covering space-time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoveringWindow {
    pub a: RangeInclusive<i64>,
    pub b: RangeInclusive<i64>,
    pub u: RangeInclusive<i64>,
    pub t: RangeInclusive<i64>,
}

impl CoveringWindow {
    /// `[-t_max - 1, m + t_max]` in both torus directions; the same margin
    /// around a periodic line, the line itself otherwise; all times.
    pub fn default_for(shape: &LatticeShape) -> Self {
        let t_max = shape.t_max() as i64;
        let m = shape.m() as i64;
        let n = shape.n_line() as i64;
        let u = if shape.line_periodic() {
            -t_max - 1..=n + t_max
        } else {
            0..=n - 1
        };
        Self {
            a: -t_max - 1..=m + t_max,
            b: -t_max - 1..=m + t_max,
            u,
            t: 0..=t_max,
        }
    }

    pub fn contains(&self, p: &SpaceTimePoint) -> bool {
        self.a.contains(&p.a)
            && self.b.contains(&p.b)
            && self.u.contains(&p.u)
            && self.t.contains(&p.t)
    }
}

/// The deviation field and noise set seen through the projection from the
/// covering space.
#[derive(Debug, Clone)]
pub struct CoveringView<'a> {
    field: &'a DeviationField,
    noise: &'a NoiseSet,
    window: CoveringWindow,
}

pub fn lift<'a>(
    field: &'a DeviationField,
    noise: &'a NoiseSet,
    window: CoveringWindow,
) -> Result<CoveringView<'a>> {
    if field.shape() != noise.shape() {
        return Err(Error::InvalidShape(
            "field and noise set disagree on shape".into(),
        ));
    }
    if window.a.is_empty() || window.b.is_empty() || window.u.is_empty() || window.t.is_empty() {
        return Err(Error::InvalidShape("empty covering window".into()));
    }
    Ok(CoveringView {
        field,
        noise,
        window,
    })
}

impl<'a> CoveringView<'a> {
    pub fn shape(&self) -> &LatticeShape {
        self.field.shape()
    }

    pub fn window(&self) -> &CoveringWindow {
        &self.window
    }

    /// Whether the point's line coordinate exists (always, on a periodic line).
    pub fn on_lattice(&self, p: &SpaceTimePoint) -> bool {
        self.shape().reduce_line(p.u).is_some()
    }

    fn check(&self, p: &SpaceTimePoint) -> Result<()> {
        if !self.window.contains(p) {
            return Err(Error::OutsideWindow(*p));
        }
        Ok(())
    }

    pub fn xi(&self, p: &SpaceTimePoint) -> Result<bool> {
        self.check(p)?;
        self.field.get(*p).ok_or(Error::OutOfDomain(*p))
    }

    pub fn in_noise(&self, p: &SpaceTimePoint) -> Result<bool> {
        self.check(p)?;
        Ok(self.noise.contains(*p))
    }
}

/// The nine possible predecessors of `(a, b, u, t)` under the composed rule.
pub fn predecessors(p: &SpaceTimePoint) -> impl Iterator<Item = SpaceTimePoint> + '_ {
    [-1i64, 0, 1].into_iter().flat_map(move |du| {
        TOOM_NEIGHBORHOOD
            .iter()
            .map(move |&(da, db)| p.offset(da, db, du, -1))
    })
}
