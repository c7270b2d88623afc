//! Transition functions: tabulated one-dimensional rules, Toom's
//! north-east-center majority vote, and their three-dimensional composition.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::lattice::{Configuration, LatticeShape};

/// Offsets `(da, db)` of Toom's voting neighborhood: self, east, north.
pub const TOOM_NEIGHBORHOOD: [(i64, i64); 3] = [(0, 0), (1, 0), (0, 1)];

/// Which argument of [`maj3`] holds the voter's own state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelfIndex {
    First,
    Second,
    Third,
}

/// Majority of three states. A three-way tie keeps the voter's own state.
#[inline]
pub fn maj3(x: u8, y: u8, z: u8, own: SelfIndex) -> u8 {
    if x == y || x == z {
        x
    } else if y == z {
        y
    } else {
        match own {
            SelfIndex::First => x,
            SelfIndex::Second => y,
            SelfIndex::Third => z,
        }
    }
}

/// A radius-one rule on a line, stored as a lookup table over
/// `(left, self, right)` in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule1D {
    alphabet: u8,
    table: Vec<u8>,
}

impl Rule1D {
    pub fn from_table(alphabet: u8, table: Vec<u8>) -> Result<Self> {
        if alphabet < 2 {
            return Err(Error::InvalidAlphabet(alphabet));
        }
        let s = alphabet as usize;
        if table.len() != s * s * s {
            return Err(Error::InvalidRule(format!(
                "table has {} entries, expected {}",
                table.len(),
                s * s * s
            )));
        }
        if let Some(&state) = table.iter().find(|&&v| v >= alphabet) {
            return Err(Error::InvalidRule(format!(
                "output {state} outside alphabet {alphabet}"
            )));
        }
        Ok(Self { alphabet, table })
    }

    pub fn from_fn(alphabet: u8, f: impl Fn(u8, u8, u8) -> u8) -> Result<Self> {
        let mut table = Vec::with_capacity((alphabet as usize).pow(3));
        for l in 0..alphabet {
            for c in 0..alphabet {
                for r in 0..alphabet {
                    table.push(f(l, c, r));
                }
            }
        }
        Self::from_table(alphabet, table)
    }

    /// `trans(l, c, r) = c`.
    pub fn middle_projection(alphabet: u8) -> Result<Self> {
        Self::from_fn(alphabet, |_, c, _| c)
    }

    pub fn constant(alphabet: u8, state: u8) -> Result<Self> {
        Self::from_fn(alphabet, |_, _, _| state)
    }

    pub fn alphabet(&self) -> u8 {
        self.alphabet
    }

    pub fn table(&self) -> &[u8] {
        &self.table
    }

    #[inline]
    pub fn apply(&self, left: u8, centre: u8, right: u8) -> u8 {
        let s = self.alphabet as usize;
        self.table[(left as usize * s + centre as usize) * s + right as usize]
    }

    /// Text form: a header line `"<alphabet> 3"` followed by the table.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} 3\n", self.alphabet);
        for chunk in self.table.chunks(self.alphabet as usize) {
            let line: Vec<String> = chunk.iter().map(u8::to_string).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }
}

impl FromStr for Rule1D {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut tokens = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace);
        let mut next = |what: &str| -> Result<u64> {
            let tok = tokens
                .next()
                .ok_or_else(|| Error::InvalidRule(format!("missing {what}")))?;
            tok.parse::<u64>()
                .map_err(|_| Error::InvalidRule(format!("bad {what} {tok:?}")))
        };
        let alphabet = next("alphabet size")?;
        let arity = next("neighborhood size")?;
        if arity != 3 {
            return Err(Error::InvalidRule(format!(
                "neighborhood size {arity}, expected 3"
            )));
        }
        if !(2..=255).contains(&alphabet) {
            return Err(Error::InvalidRule(format!(
                "alphabet size {alphabet} out of range"
            )));
        }
        let count = (alphabet as usize).pow(3);
        let mut table = Vec::with_capacity(count);
        for i in 0..count {
            let v = next(&format!("table entry {i}"))?;
            table.push(u8::try_from(v).map_err(|_| Error::InvalidRule(format!("entry {v}")))?);
        }
        if tokens.next().is_some() {
            return Err(Error::InvalidRule("trailing data after table".into()));
        }
        Self::from_table(alphabet as u8, table)
    }
}

/// Toom voting in every plane followed by a line rule along `u`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule3D {
    line: Rule1D,
}

impl Rule3D {
    pub fn new(line: Rule1D) -> Self {
        Self { line }
    }

    pub fn line_rule(&self) -> &Rule1D {
        &self.line
    }

    pub fn alphabet(&self) -> u8 {
        self.line.alphabet
    }
}

/// One synchronous Toom step in every constant-`u` plane.
pub fn step_toom_plane(cfg: &Configuration) -> Configuration {
    let shape = *cfg.shape();
    let mut next = cfg.clone();
    toom_vote_into(cfg.cells(), next.cells_mut(), &shape);
    next
}

fn toom_vote_into(old: &[u8], new: &mut [u8], shape: &LatticeShape) {
    let m = shape.m();
    for u in 0..shape.n_line() {
        for a in 0..m {
            let east = if a + 1 == m { 0 } else { a + 1 };
            for b in 0..m {
                let north = if b + 1 == m { 0 } else { b + 1 };
                let own = old[shape.index(a, b, u)];
                new[shape.index(a, b, u)] = maj3(
                    own,
                    old[shape.index(east, b, u)],
                    old[shape.index(a, north, u)],
                    SelfIndex::First,
                );
            }
        }
    }
}

/// One step of the composed rule: Toom voting, then the line rule. On a
/// fixed-boundary line a missing neighbour is replaced by the cell itself.
pub fn step_composed(cfg: &Configuration, rule: &Rule3D) -> Configuration {
    let shape = *cfg.shape();
    let mut voted = vec![0u8; shape.cells()];
    toom_vote_into(cfg.cells(), &mut voted, &shape);
    let mut next = cfg.clone();
    apply_line_rule(&voted, next.cells_mut(), &shape, &rule.line);
    next
}

fn apply_line_rule(voted: &[u8], out: &mut [u8], shape: &LatticeShape, rule: &Rule1D) {
    let n = shape.n_line();
    let m = shape.m();
    for u in 0..n {
        let (left, right) = line_neighbours(u, n, shape.line_periodic());
        for a in 0..m {
            for b in 0..m {
                out[shape.index(a, b, u)] = rule.apply(
                    voted[shape.index(a, b, left)],
                    voted[shape.index(a, b, u)],
                    voted[shape.index(a, b, right)],
                );
            }
        }
    }
}

#[inline]
fn line_neighbours(u: usize, n: usize, periodic: bool) -> (usize, usize) {
    if periodic {
        ((u + n - 1) % n, (u + 1) % n)
    } else {
        (
            if u == 0 { 0 } else { u - 1 },
            if u + 1 == n { u } else { u + 1 },
        )
    }
}

/// Runs a one-dimensional rule on a line for `steps` steps, returning every
/// row including the initial one.
pub fn evolve_line(rule: &Rule1D, initial: &[u8], periodic: bool, steps: usize) -> Vec<Vec<u8>> {
    let n = initial.len();
    let mut rows = vec![initial.to_vec()];
    for _ in 0..steps {
        let prev = rows.last().unwrap();
        let next = (0..n)
            .map(|u| {
                let (l, r) = line_neighbours(u, n, periodic);
                rule.apply(prev[l], prev[u], prev[r])
            })
            .collect();
        rows.push(next);
    }
    rows
}

/// Degree of the space-time graph for a `d + 2` dimensional space.
pub fn degree_formula(d: u32) -> Result<u64> {
    if d == 0 {
        return Err(Error::Precondition(
            "spatial dimension d must be at least 1".into(),
        ));
    }
    Ok(12 * (d as u64 + 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn plane(m: usize) -> LatticeShape {
        LatticeShape::new(m, 1, true, 0).unwrap()
    }

    fn ones_at(shape: LatticeShape, sites: &[(usize, usize, usize)]) -> Configuration {
        let mut cfg = Configuration::uniform(shape, 2, 0).unwrap();
        for &(a, b, u) in sites {
            cfg.set(a, b, u, 1).unwrap();
        }
        cfg
    }

    fn ones(cfg: &Configuration) -> Vec<(usize, usize, usize)> {
        (0..cfg.shape().cells())
            .filter(|&i| cfg.cells()[i] == 1)
            .map(|i| cfg.shape().site(i))
            .collect()
    }

    #[test]
    fn maj3_examples() {
        assert_eq!(maj3(0, 0, 1, SelfIndex::First), 0);
        assert_eq!(maj3(1, 1, 1, SelfIndex::First), 1);
        assert_eq!(maj3(0, 1, 2, SelfIndex::First), 0);
        assert_eq!(maj3(0, 1, 2, SelfIndex::Third), 2);
    }

    #[test]
    fn maj3_output_is_always_an_input() {
        for x in 0..3 {
            for y in 0..3 {
                for z in 0..3 {
                    for own in [SelfIndex::First, SelfIndex::Second, SelfIndex::Third] {
                        let v = maj3(x, y, z, own);
                        assert!(v == x || v == y || v == z);
                        if x == y || x == z || y == z {
                            let count = [x, y, z].iter().filter(|&&s| s == v).count();
                            assert!(count >= 2);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn binary_majority_ignores_self_index() {
        for bits in 0..8u8 {
            let (x, y, z) = (bits & 1, (bits >> 1) & 1, (bits >> 2) & 1);
            let first = maj3(x, y, z, SelfIndex::First);
            assert_eq!(first, maj3(x, y, z, SelfIndex::Second));
            assert_eq!(first, maj3(x, y, z, SelfIndex::Third));
            assert_eq!(first, u8::from(x + y + z >= 2));
        }
    }

    #[test]
    fn quiescent_and_lone_deviation() {
        let shape = plane(5);
        let zero = Configuration::uniform(shape, 2, 0).unwrap();
        assert_eq!(step_toom_plane(&zero), zero);
        assert_eq!(step_toom_plane(&ones_at(shape, &[(2, 3, 0)])), zero);
    }

    #[test]
    fn east_and_north_pair_leaves_one_cell() {
        let shape = plane(5);
        let next = step_toom_plane(&ones_at(shape, &[(3, 2, 0), (2, 3, 0)]));
        assert_eq!(ones(&next), vec![(2, 2, 0)]);
        // Wrapping across the torus seam.
        let next = step_toom_plane(&ones_at(shape, &[(0, 4, 0), (4, 0, 0)]));
        assert_eq!(ones(&next), vec![(4, 4, 0)]);
    }

    #[test]
    fn uniform_configurations_are_fixed() {
        let shape = LatticeShape::new(4, 3, false, 0).unwrap();
        for s in 0..3 {
            let cfg = Configuration::uniform(shape, 3, s).unwrap();
            assert_eq!(step_toom_plane(&cfg), cfg);
        }
    }

    #[test]
    fn composed_with_projection_is_toom() {
        let shape = LatticeShape::new(6, 4, true, 0).unwrap();
        let rule = Rule3D::new(Rule1D::middle_projection(2).unwrap());
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..20 {
            let cells = (0..shape.cells()).map(|_| rng.gen_range(0..2)).collect();
            let cfg = Configuration::from_cells(shape, 2, cells).unwrap();
            assert_eq!(step_composed(&cfg, &rule), step_toom_plane(&cfg));
        }
    }

    #[test]
    fn composed_with_constant_is_constant() {
        let shape = LatticeShape::new(4, 3, false, 0).unwrap();
        let rule = Rule3D::new(Rule1D::constant(2, 0).unwrap());
        let cfg = ones_at(shape, &[(1, 1, 1), (2, 0, 2)]);
        assert_eq!(
            step_composed(&cfg, &rule),
            Configuration::uniform(shape, 2, 0).unwrap()
        );
    }

    #[test]
    fn product_trajectory_is_preserved() {
        let mut rng = StdRng::seed_from_u64(11);
        for periodic in [true, false] {
            for _ in 0..10 {
                let table = (0..8).map(|_| rng.gen_range(0..2)).collect();
                let line_rule = Rule1D::from_table(2, table).unwrap();
                let rule = Rule3D::new(line_rule.clone());
                let init: Vec<u8> = (0..6).map(|_| rng.gen_range(0..2)).collect();
                let rows = evolve_line(&line_rule, &init, periodic, 10);
                let shape = LatticeShape::new(4, 6, periodic, 10).unwrap();
                let mut cfg = Configuration::from_line(shape, 2, &rows[0]).unwrap();
                for row in &rows[1..] {
                    cfg = step_composed(&cfg, &rule);
                    assert_eq!(cfg, Configuration::from_line(shape, 2, row).unwrap());
                }
            }
        }
    }

    #[test]
    fn single_cells_erode_in_one_step() {
        let shape = plane(6);
        let zero = Configuration::uniform(shape, 2, 0).unwrap();
        for a in 0..6 {
            for b in 0..6 {
                assert_eq!(step_toom_plane(&ones_at(shape, &[(a, b, 0)])), zero);
            }
        }
    }

    #[test]
    fn rectangles_erode_in_width_plus_height_minus_one_steps() {
        let shape = plane(20);
        let zero = Configuration::uniform(shape, 2, 0).unwrap();
        for w in 1..=8 {
            for h in 1..=8 {
                let sites: Vec<_> = (0..w)
                    .flat_map(|i| (0..h).map(move |j| (5 + i, 7 + j, 0)))
                    .collect();
                let mut cfg = ones_at(shape, &sites);
                let mut steps = 0;
                while cfg != zero {
                    cfg = step_toom_plane(&cfg);
                    steps += 1;
                }
                assert_eq!(steps, w + h - 1, "{w}x{h}");
            }
        }
    }

    #[test]
    fn degree_examples() {
        assert_eq!(degree_formula(1).unwrap(), 24);
        assert_eq!(degree_formula(2).unwrap(), 36);
        assert!(degree_formula(0).is_err());
    }

    #[test]
    fn rule_text_round_trip() {
        let rule = Rule1D::from_fn(3, |l, c, r| (l + 2 * c + r) % 3).unwrap();
        let parsed: Rule1D = rule.to_text().parse().unwrap();
        assert_eq!(parsed, rule);
    }

    #[test]
    fn rule_text_errors() {
        assert!("2 3\n0 1 0 1 0 1 0".parse::<Rule1D>().is_err());
        assert!("2 5\n0 1 0 1 0 1 0 1".parse::<Rule1D>().is_err());
        assert!("2 3\n0 1 0 1 0 1 0 2".parse::<Rule1D>().is_err());
        assert!("2 3\n0 1 0 1 0 1 0 1 1".parse::<Rule1D>().is_err());
        let rule: Rule1D = "# xor of neighbours\n2 3\n0 1 0 1\n1 0 1 0\n"
            .parse()
            .unwrap();
        assert_eq!(rule.apply(1, 0, 0), 1);
        assert_eq!(rule.apply(1, 1, 1), 0);
    }
}
