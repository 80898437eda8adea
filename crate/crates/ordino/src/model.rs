//! Threshold structures for bivariate ordered responses.
//!
//! A response pair (Y1, Y2) with M1 x M2 categories partitions the latent
//! plane into rectangular cells. Cell (j1, j2) is
//! (A1[j1-1][j2], A1[j1][j2]] x (A2[j1][j2-1], A2[j1][j2]], where the
//! dimension-1 thresholds A1 may vary with the dimension-2 category j2 and
//! vice versa. Indices are 1-based; level 0 and level M_d rows are pinned to
//! -inf / +inf. A structure is *coherent* (the cells tile the plane) when at
//! every interior corner at least one of the two boundary segments meeting
//! it continues straight: min(|A1[j1][j2+1] - A1[j1][j2]|,
//! |A2[j1+1][j2] - A2[j1][j2]|) <= tol. Lattice structures (thresholds
//! constant across the other dimension) and hierarchical structures (cells
//! generated by a binary decision tree of full-width splits) are special
//! cases; coherent structures that are not hierarchical exist (see the
//! pinwheel search in the tests).

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use rand_core::RngCore;

use crate::seed::standard_uniform;
use crate::{Error, Result};

/// Number of categories per dimension (both at least 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseSpec {
    pub m1: usize,
    pub m2: usize,
}

impl ResponseSpec {
    pub fn new(m1: usize, m2: usize) -> Result<Self> {
        if m1 == 0 || m2 == 0 {
            return Err(Error::InvalidParameter(
                "each dimension needs at least one category".into(),
            ));
        }
        Ok(Self { m1, m2 })
    }

    /// Cells in canonical order: j1 major, j2 minor, both 1-based.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let m2 = self.m2;
        (1..=self.m1).flat_map(move |j1| (1..=m2).map(move |j2| (j1, j2)))
    }
}

/// Identifies one interior threshold entry: `dim` 1 means A1[j1][j2] with
/// j1 in 1..M1, j2 in 1..=M2; `dim` 2 means A2[j1][j2] with j1 in 1..=M1,
/// j2 in 1..M2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntryId {
    pub dim: usize,
    pub j1: usize,
    pub j2: usize,
}

impl std::fmt::Display for EntryId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "a{}[{}][{}]", self.dim, self.j1, self.j2)
    }
}

/// Interior entries of both grids in canonical order: all of A1 (j1 major),
/// then all of A2 (j1 major). This order also fixes the threshold block of
/// the full likelihood coordinate vector.
pub fn interior_entries(spec: ResponseSpec) -> Vec<EntryId> {
    let mut out = Vec::with_capacity((spec.m1 - 1) * spec.m2 + spec.m1 * (spec.m2 - 1));
    for j1 in 1..spec.m1 {
        for j2 in 1..=spec.m2 {
            out.push(EntryId { dim: 1, j1, j2 });
        }
    }
    for j1 in 1..=spec.m1 {
        for j2 in 1..spec.m2 {
            out.push(EntryId { dim: 2, j1, j2 });
        }
    }
    out
}

/// Both threshold grids, boundary rows included.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdStructure {
    spec: ResponseSpec,
    /// (m1 + 1) x m2, row-major in j1 = 0..=m1; column j2 - 1.
    a1: Vec<f64>,
    /// m1 x (m2 + 1), row-major in j1 - 1; column j2 = 0..=m2.
    a2: Vec<f64>,
}

impl ThresholdStructure {
    /// Builds from full grids including the +/- infinity boundary rows.
    /// `a1` must be (m1+1) rows of m2 values; `a2` m1 rows of (m2+1) values.
    pub fn from_grids(spec: ResponseSpec, a1: Vec<Vec<f64>>, a2: Vec<Vec<f64>>) -> Result<Self> {
        let (m1, m2) = (spec.m1, spec.m2);
        if a1.len() != m1 + 1 || a1.iter().any(|r| r.len() != m2) {
            return Err(Error::InvalidStructure(format!(
                "A1 must be {} rows of {} values",
                m1 + 1,
                m2
            )));
        }
        if a2.len() != m1 || a2.iter().any(|r| r.len() != m2 + 1) {
            return Err(Error::InvalidStructure(format!(
                "A2 must be {} rows of {} values",
                m1,
                m2 + 1
            )));
        }
        let ts = Self {
            spec,
            a1: a1.into_iter().flatten().collect(),
            a2: a2.into_iter().flatten().collect(),
        };
        ts.validate()?;
        Ok(ts)
    }

    /// Builds from interior rows only; boundary rows are added. `a1_interior`
    /// is m1-1 rows (levels 1..M1) of m2 values; `a2_interior` m2-1 columns
    /// (levels 1..M2) of m1 values, i.e. one slice per threshold level.
    pub fn from_interior(
        spec: ResponseSpec,
        a1_interior: &[Vec<f64>],
        a2_interior: &[Vec<f64>],
    ) -> Result<Self> {
        let (m1, m2) = (spec.m1, spec.m2);
        if a1_interior.len() != m1 - 1 || a1_interior.iter().any(|r| r.len() != m2) {
            return Err(Error::InvalidStructure(format!(
                "interior A1 must be {} levels of {} values",
                m1 - 1,
                m2
            )));
        }
        if a2_interior.len() != m2 - 1 || a2_interior.iter().any(|r| r.len() != m1) {
            return Err(Error::InvalidStructure(format!(
                "interior A2 must be {} levels of {} values",
                m2 - 1,
                m1
            )));
        }
        let mut a1 = vec![vec![f64::NEG_INFINITY; m2]];
        a1.extend(a1_interior.iter().cloned());
        a1.push(vec![f64::INFINITY; m2]);
        let mut a2 = Vec::with_capacity(m1);
        for j1 in 1..=m1 {
            let mut row = Vec::with_capacity(m2 + 1);
            row.push(f64::NEG_INFINITY);
            for level in a2_interior {
                row.push(level[j1 - 1]);
            }
            row.push(f64::INFINITY);
            a2.push(row);
        }
        Self::from_grids(spec, a1, a2)
    }

    /// Lattice structure: thresholds constant across the other dimension.
    /// `cuts1` has m1-1 strictly increasing values, `cuts2` m2-1.
    pub fn lattice(spec: ResponseSpec, cuts1: &[f64], cuts2: &[f64]) -> Result<Self> {
        let a1: Vec<Vec<f64>> = cuts1.iter().map(|&c| vec![c; spec.m2]).collect();
        let a2: Vec<Vec<f64>> = cuts2.iter().map(|&c| vec![c; spec.m1]).collect();
        Self::from_interior(spec, &a1, &a2)
    }

    fn validate(&self) -> Result<()> {
        let (m1, m2) = (self.spec.m1, self.spec.m2);
        for j2 in 1..=m2 {
            if self.a1(0, j2) != f64::NEG_INFINITY || self.a1(m1, j2) != f64::INFINITY {
                return Err(Error::InvalidStructure(
                    "A1 boundary rows must be -inf / +inf".into(),
                ));
            }
        }
        for j1 in 1..=m1 {
            if self.a2(j1, 0) != f64::NEG_INFINITY || self.a2(j1, m2) != f64::INFINITY {
                return Err(Error::InvalidStructure(
                    "A2 boundary columns must be -inf / +inf".into(),
                ));
            }
        }
        for j2 in 1..=m2 {
            for j1 in 1..m1 {
                if !self.a1(j1, j2).is_finite() {
                    return Err(Error::InvalidStructure(format!(
                        "interior entry a1[{j1}][{j2}] must be finite"
                    )));
                }
            }
        }
        for j1 in 1..=m1 {
            for j2 in 1..m2 {
                if !self.a2(j1, j2).is_finite() {
                    return Err(Error::InvalidStructure(format!(
                        "interior entry a2[{j1}][{j2}] must be finite"
                    )));
                }
            }
        }
        if !self.is_strictly_monotone() {
            return Err(Error::InvalidStructure(
                "thresholds must increase strictly within each row/column".into(),
            ));
        }
        Ok(())
    }

    pub fn spec(&self) -> ResponseSpec {
        self.spec
    }

    /// Dimension-1 threshold at level `j1` (0..=m1) in row `j2` (1..=m2).
    pub fn a1(&self, j1: usize, j2: usize) -> f64 {
        debug_assert!(j1 <= self.spec.m1 && (1..=self.spec.m2).contains(&j2));
        self.a1[j1 * self.spec.m2 + (j2 - 1)]
    }

    /// Dimension-2 threshold at level `j2` (0..=m2) in column `j1` (1..=m1).
    pub fn a2(&self, j1: usize, j2: usize) -> f64 {
        debug_assert!(j2 <= self.spec.m2 && (1..=self.spec.m1).contains(&j1));
        self.a2[(j1 - 1) * (self.spec.m2 + 1) + j2]
    }

    pub fn entry(&self, id: EntryId) -> f64 {
        match id.dim {
            1 => self.a1(id.j1, id.j2),
            2 => self.a2(id.j1, id.j2),
            _ => panic!("entry dim must be 1 or 2"),
        }
    }

    // Used by finite-difference checks; estimation rebuilds full grids.
    #[cfg_attr(not(test), allow(dead_code))]
    pub(crate) fn set_entry(&mut self, id: EntryId, v: f64) {
        match id.dim {
            1 => {
                debug_assert!((1..self.spec.m1).contains(&id.j1));
                self.a1[id.j1 * self.spec.m2 + (id.j2 - 1)] = v;
            }
            2 => {
                debug_assert!((1..self.spec.m2).contains(&id.j2));
                self.a2[(id.j1 - 1) * (self.spec.m2 + 1) + id.j2] = v;
            }
            _ => panic!("entry dim must be 1 or 2"),
        }
    }

    /// True when both grids increase strictly along their own level index.
    pub fn is_strictly_monotone(&self) -> bool {
        let (m1, m2) = (self.spec.m1, self.spec.m2);
        for j2 in 1..=m2 {
            for j1 in 1..=m1 {
                if !(self.a1(j1 - 1, j2) < self.a1(j1, j2)) {
                    return false;
                }
            }
        }
        for j1 in 1..=m1 {
            for j2 in 1..=m2 {
                if !(self.a2(j1, j2 - 1) < self.a2(j1, j2)) {
                    return false;
                }
            }
        }
        true
    }

    /// Latent-plane bounds of cell (j1, j2): ((lo1, hi1), (lo2, hi2)), the
    /// cell being the half-open rectangle (lo1, hi1] x (lo2, hi2].
    pub fn cell_bounds(&self, j1: usize, j2: usize) -> ((f64, f64), (f64, f64)) {
        (
            (self.a1(j1 - 1, j2), self.a1(j1, j2)),
            (self.a2(j1, j2 - 1), self.a2(j1, j2)),
        )
    }

    /// Interior corners (j1, j2) whose two boundary jumps are both larger
    /// than `tol`, with the smaller jump reported.
    pub fn coherency_violations(&self, tol: f64) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for j1 in 1..self.spec.m1 {
            for j2 in 1..self.spec.m2 {
                let d1 = (self.a1(j1, j2 + 1) - self.a1(j1, j2)).abs();
                let d2 = (self.a2(j1 + 1, j2) - self.a2(j1, j2)).abs();
                let m = d1.min(d2);
                if m > tol {
                    out.push((j1, j2, m));
                }
            }
        }
        out
    }

    /// True when the cells tile the plane: at every interior corner one of
    /// the two boundary segments continues straight (within `tol`).
    pub fn is_coherent(&self, tol: f64) -> bool {
        self.coherency_violations(tol).is_empty()
    }

    /// Partition of the interior entries into tie classes: entries at the
    /// same level that agree within `tau` along a shared boundary segment
    /// (adjacent in the cross dimension) join the same class, transitively.
    /// Classes are sorted by their smallest member; singletons included.
    pub fn tie_groups(&self, tau: f64) -> Vec<Vec<EntryId>> {
        let entries = interior_entries(self.spec);
        let index_of = |id: &EntryId| entries.binary_search(id).expect("interior entry");
        let mut parent: Vec<usize> = (0..entries.len()).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        let union = |parent: &mut [usize], a: usize, b: usize| {
            let (ra, rb) = (find(parent, a), find(parent, b));
            if ra != rb {
                let (lo, hi) = (ra.min(rb), ra.max(rb));
                parent[hi] = lo;
            }
        };
        for id in &entries {
            let neighbor = match id.dim {
                1 if id.j2 < self.spec.m2 => EntryId {
                    dim: 1,
                    j1: id.j1,
                    j2: id.j2 + 1,
                },
                2 if id.j1 < self.spec.m1 => EntryId {
                    dim: 2,
                    j1: id.j1 + 1,
                    j2: id.j2,
                },
                _ => continue,
            };
            if (self.entry(*id) - self.entry(neighbor)).abs() <= tau {
                union(&mut parent, index_of(id), index_of(&neighbor));
            }
        }
        let mut classes: std::collections::BTreeMap<usize, Vec<EntryId>> = Default::default();
        for (i, id) in entries.iter().enumerate() {
            classes.entry(find(&mut parent, i)).or_default().push(*id);
        }
        classes.into_values().collect()
    }

    /// Detects whether the structure is hierarchical: generated by a binary
    /// decision tree whose splits span the full remaining range of the other
    /// dimension. Returns the tree, or None. Split preference: dimension 1
    /// before dimension 2, lower threshold levels first; later candidates
    /// are tried if an earlier one leaves a non-hierarchical sub-model.
    /// Boundary (+/- infinity) levels are never split points.
    pub fn detect_hierarchy(&self, tol: f64) -> Option<DecisionTree> {
        self.detect_region(1, self.spec.m1, 1, self.spec.m2, tol)
    }

    fn detect_region(
        &self,
        lo1: usize,
        hi1: usize,
        lo2: usize,
        hi2: usize,
        tol: f64,
    ) -> Option<DecisionTree> {
        if lo1 == hi1 && lo2 == hi2 {
            return Some(DecisionTree::Leaf { cell: (lo1, lo2) });
        }
        for c in lo1..hi1 {
            let base = self.a1(c, lo2);
            if (lo2..=hi2).all(|j2| (self.a1(c, j2) - base).abs() <= tol) {
                let value =
                    (lo2..=hi2).map(|j2| self.a1(c, j2)).sum::<f64>() / (hi2 - lo2 + 1) as f64;
                if let (Some(below), Some(above)) = (
                    self.detect_region(lo1, c, lo2, hi2, tol),
                    self.detect_region(c + 1, hi1, lo2, hi2, tol),
                ) {
                    return Some(DecisionTree::Split {
                        dim: 1,
                        value,
                        below: Box::new(below),
                        above: Box::new(above),
                    });
                }
            }
        }
        for c in lo2..hi2 {
            let base = self.a2(lo1, c);
            if (lo1..=hi1).all(|j1| (self.a2(j1, c) - base).abs() <= tol) {
                let value =
                    (lo1..=hi1).map(|j1| self.a2(j1, c)).sum::<f64>() / (hi1 - lo1 + 1) as f64;
                if let (Some(below), Some(above)) = (
                    self.detect_region(lo1, hi1, lo2, c, tol),
                    self.detect_region(lo1, hi1, c + 1, hi2, tol),
                ) {
                    return Some(DecisionTree::Split {
                        dim: 2,
                        value,
                        below: Box::new(below),
                        above: Box::new(above),
                    });
                }
            }
        }
        None
    }
}

/// Binary decision tree over the latent plane. `Split` sends
/// y*_dim <= value to `below` and the rest to `above`; leaves carry the cell
/// index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DecisionTree {
    Leaf {
        cell: (usize, usize),
    },
    Split {
        dim: usize,
        value: f64,
        below: Box<DecisionTree>,
        above: Box<DecisionTree>,
    },
}

/// Axis-aligned latent-space rectangle ((lo1, hi1), (lo2, hi2)).
pub type LatentRect = ((f64, f64), (f64, f64));

impl DecisionTree {
    /// Leaf rectangles with the owning cell, in depth-first below-then-above
    /// order.
    pub fn leaf_rectangles(&self) -> Vec<((usize, usize), LatentRect)> {
        let mut out = Vec::new();
        self.collect_leaves(
            (
                (f64::NEG_INFINITY, f64::INFINITY),
                (f64::NEG_INFINITY, f64::INFINITY),
            ),
            &mut out,
        );
        out
    }

    fn collect_leaves(&self, rect: LatentRect, out: &mut Vec<((usize, usize), LatentRect)>) {
        match self {
            DecisionTree::Leaf { cell } => out.push((*cell, rect)),
            DecisionTree::Split {
                dim,
                value,
                below,
                above,
            } => {
                let ((x_lo, x_hi), (y_lo, y_hi)) = rect;
                if *dim == 1 {
                    below.collect_leaves(((x_lo, *value), (y_lo, y_hi)), out);
                    above.collect_leaves(((*value, x_hi), (y_lo, y_hi)), out);
                } else {
                    below.collect_leaves(((x_lo, x_hi), (y_lo, *value)), out);
                    above.collect_leaves(((x_lo, x_hi), (*value, y_hi)), out);
                }
            }
        }
    }

    fn render(&self, indent: usize, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let pad = "  ".repeat(indent);
        match self {
            DecisionTree::Leaf { cell } => writeln!(f, "{pad}cell ({}, {})", cell.0, cell.1),
            DecisionTree::Split {
                dim,
                value,
                below,
                above,
            } => {
                writeln!(f, "{pad}y*{dim} <= {value}")?;
                below.render(indent + 1, f)?;
                writeln!(f, "{pad}y*{dim} > {value}")?;
                above.render(indent + 1, f)
            }
        }
    }
}

impl std::fmt::Display for DecisionTree {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.render(0, f)
    }
}

/// Draws a random coherent structure by building a random binary decision
/// tree: each node picks a dimension (uniformly among those with more than
/// one remaining category), a split level, and a split value uniform inside
/// the current latent box intersected with `range`; the value fills the
/// entire cross-section, so the result is hierarchical and hence coherent.
/// Draw order per node: dimension (only when both are available), level
/// (only when several), value; then the below subtree, then the above.
pub fn random_coherent_structure<R: RngCore>(
    spec: ResponseSpec,
    range: (f64, f64),
    rng: &mut R,
) -> ThresholdStructure {
    assert!(range.0 < range.1, "empty threshold range");
    let mut a1 = vec![vec![0.0; spec.m2]; spec.m1 + 1];
    let mut a2 = vec![vec![0.0; spec.m2 + 1]; spec.m1];
    for j2 in 1..=spec.m2 {
        a1[0][j2 - 1] = f64::NEG_INFINITY;
        a1[spec.m1][j2 - 1] = f64::INFINITY;
    }
    for j1 in 1..=spec.m1 {
        a2[j1 - 1][0] = f64::NEG_INFINITY;
        a2[j1 - 1][spec.m2] = f64::INFINITY;
    }
    build_random_region(
        (1, spec.m1, 1, spec.m2),
        ((range.0, range.1), (range.0, range.1)),
        &mut a1,
        &mut a2,
        rng,
    );
    ThresholdStructure::from_grids(spec, a1, a2).expect("random tree yields a valid structure")
}

fn build_random_region<R: RngCore>(
    region: (usize, usize, usize, usize),
    bbox: ((f64, f64), (f64, f64)),
    a1: &mut [Vec<f64>],
    a2: &mut [Vec<f64>],
    rng: &mut R,
) {
    let (lo1, hi1, lo2, hi2) = region;
    let can1 = hi1 > lo1;
    let can2 = hi2 > lo2;
    if !can1 && !can2 {
        return;
    }
    let dim = if can1 && can2 {
        if standard_uniform(rng) < 0.5 {
            1
        } else {
            2
        }
    } else if can1 {
        1
    } else {
        2
    };
    let ((x_lo, x_hi), (y_lo, y_hi)) = bbox;
    if dim == 1 {
        let count = hi1 - lo1;
        let c = if count == 1 {
            lo1
        } else {
            lo1 + ((standard_uniform(rng) * count as f64) as usize).min(count - 1)
        };
        let v = x_lo + standard_uniform(rng) * (x_hi - x_lo);
        for j2 in lo2..=hi2 {
            a1[c][j2 - 1] = v;
        }
        build_random_region((lo1, c, lo2, hi2), ((x_lo, v), (y_lo, y_hi)), a1, a2, rng);
        build_random_region((c + 1, hi1, lo2, hi2), ((v, x_hi), (y_lo, y_hi)), a1, a2, rng);
    } else {
        let count = hi2 - lo2;
        let c = if count == 1 {
            lo2
        } else {
            lo2 + ((standard_uniform(rng) * count as f64) as usize).min(count - 1)
        };
        let v = y_lo + standard_uniform(rng) * (y_hi - y_lo);
        for j1 in lo1..=hi1 {
            a2[j1 - 1][c] = v;
        }
        build_random_region((lo1, hi1, lo2, c), ((x_lo, x_hi), (y_lo, v)), a1, a2, rng);
        build_random_region((lo1, hi1, c + 1, hi2), ((x_lo, x_hi), (v, y_hi)), a1, a2, rng);
    }
}

// JSON form: {"M":[m1,m2],"A1":[...],"A2":[...]} with grids stored including
// boundary rows and infinities spelled "inf"/"-inf".
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum JsonReal {
    Num(f64),
    Tag(String),
}

impl JsonReal {
    fn encode(v: f64) -> Self {
        if v == f64::INFINITY {
            JsonReal::Tag("inf".into())
        } else if v == f64::NEG_INFINITY {
            JsonReal::Tag("-inf".into())
        } else {
            JsonReal::Num(v)
        }
    }

    fn decode(&self) -> std::result::Result<f64, String> {
        match self {
            JsonReal::Num(v) => Ok(*v),
            JsonReal::Tag(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(format!("unknown threshold value {other:?}")),
            },
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonStructure {
    #[serde(rename = "M")]
    m: [usize; 2],
    #[serde(rename = "A1")]
    a1: Vec<Vec<JsonReal>>,
    #[serde(rename = "A2")]
    a2: Vec<Vec<JsonReal>>,
}

impl Serialize for ThresholdStructure {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let (m1, m2) = (self.spec.m1, self.spec.m2);
        let a1 = (0..=m1)
            .map(|j1| (1..=m2).map(|j2| JsonReal::encode(self.a1(j1, j2))).collect())
            .collect();
        let a2 = (1..=m1)
            .map(|j1| (0..=m2).map(|j2| JsonReal::encode(self.a2(j1, j2))).collect())
            .collect();
        JsonStructure {
            m: [m1, m2],
            a1,
            a2,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ThresholdStructure {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = JsonStructure::deserialize(deserializer)?;
        let spec = ResponseSpec::new(raw.m[0], raw.m[1]).map_err(D::Error::custom)?;
        let decode_grid = |g: &[Vec<JsonReal>]| -> std::result::Result<Vec<Vec<f64>>, D::Error> {
            g.iter()
                .map(|row| {
                    row.iter()
                        .map(|v| v.decode().map_err(D::Error::custom))
                        .collect()
                })
                .collect()
        };
        ThresholdStructure::from_grids(spec, decode_grid(&raw.a1)?, decode_grid(&raw.a2)?)
            .map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::stream;

    const NEG: f64 = f64::NEG_INFINITY;
    const POS: f64 = f64::INFINITY;

    fn design1_like() -> ThresholdStructure {
        ThresholdStructure::from_interior(
            ResponseSpec::new(2, 2).unwrap(),
            &[vec![-2.0, 1.5]],
            &[vec![1.0, 1.0]],
        )
        .unwrap()
    }

    fn design2_like() -> ThresholdStructure {
        ThresholdStructure::from_interior(
            ResponseSpec::new(4, 3).unwrap(),
            &[
                vec![-3.25, -3.25, -0.5],
                vec![0.5, 1.0, 5.0],
                vec![8.0, 8.0, 8.0],
            ],
            &[vec![-4.0, -2.0, -2.0, 0.0], vec![0.5, 0.5, 0.5, 4.0]],
        )
        .unwrap()
    }

    fn pinwheel() -> ThresholdStructure {
        ThresholdStructure::from_interior(
            ResponseSpec::new(3, 3).unwrap(),
            &[vec![1.0, 1.0, 2.0], vec![2.0, 3.0, 3.0]],
            &[vec![0.0, 1.0, 1.0], vec![2.0, 2.0, 3.0]],
        )
        .unwrap()
    }

    #[test]
    fn cell_bounds_examples() {
        let ts = design1_like();
        assert_eq!(ts.cell_bounds(1, 1), ((NEG, -2.0), (NEG, 1.0)));
        assert_eq!(ts.cell_bounds(2, 2), ((1.5, POS), (1.0, POS)));

        let single = ThresholdStructure::from_interior(
            ResponseSpec::new(1, 1).unwrap(),
            &[],
            &[],
        )
        .unwrap();
        assert_eq!(single.cell_bounds(1, 1), ((NEG, POS), (NEG, POS)));

        let lat = ThresholdStructure::lattice(
            ResponseSpec::new(2, 2).unwrap(),
            &[0.3],
            &[-0.7],
        )
        .unwrap();
        assert_eq!(lat.cell_bounds(2, 2), ((0.3, POS), (-0.7, POS)));
    }

    #[test]
    fn coherency_examples() {
        assert!(design1_like().is_coherent(1e-9));
        assert!(design2_like().is_coherent(1e-9));
        assert!(pinwheel().is_coherent(1e-9));
        let lat =
            ThresholdStructure::lattice(ResponseSpec::new(3, 4).unwrap(), &[-1.0, 1.0], &[0.0, 0.5, 2.0])
                .unwrap();
        assert!(lat.is_coherent(0.0));

        // both segments jump at the single interior corner
        let bad = ThresholdStructure::from_interior(
            ResponseSpec::new(2, 2).unwrap(),
            &[vec![0.0, 0.7]],
            &[vec![1.0, 1.7]],
        )
        .unwrap();
        assert!(!bad.is_coherent(1e-9));
        let v = bad.coherency_violations(1e-9);
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].0, v[0].1), (1, 1));
        assert!((v[0].2 - 0.7).abs() < 1e-15);
    }

    #[test]
    fn construction_rejects_bad_grids() {
        let spec = ResponseSpec::new(2, 2).unwrap();
        // non-monotone row
        assert!(ThresholdStructure::from_interior(spec, &[vec![0.0, 0.0]], &[vec![1.0, 1.0]]).is_ok());
        let r = ThresholdStructure::from_grids(
            spec,
            vec![vec![NEG, NEG], vec![2.0, 1.5], vec![POS, POS]],
            vec![vec![NEG, 1.0, 5.0], vec![NEG, 1.0, POS]],
        );
        assert!(r.is_err());
        // wrong shape
        let r = ThresholdStructure::from_grids(
            spec,
            vec![vec![NEG, NEG], vec![POS, POS]],
            vec![vec![NEG, 1.0, POS], vec![NEG, 1.0, POS]],
        );
        assert!(matches!(r, Err(crate::Error::InvalidStructure(_))));
        // interior must be finite and increasing within a row
        let r = ThresholdStructure::from_interior(spec, &[vec![f64::NAN, 0.0]], &[vec![0.0, 0.0]]);
        assert!(r.is_err());
    }

    #[test]
    fn hierarchy_of_lattice_and_design2() {
        let lat = ThresholdStructure::lattice(
            ResponseSpec::new(3, 2).unwrap(),
            &[-1.0, 0.5],
            &[0.0],
        )
        .unwrap();
        assert!(lat.detect_hierarchy(1e-9).is_some());

        let tree = design2_like().detect_hierarchy(1e-9).expect("hierarchical");
        match &tree {
            DecisionTree::Split { dim, value, .. } => {
                assert_eq!(*dim, 1);
                assert!((value - 8.0).abs() < 1e-12);
            }
            _ => panic!("expected a split at the root"),
        }
    }

    #[test]
    fn hierarchy_rejects_pinwheel() {
        assert!(pinwheel().detect_hierarchy(1e-9).is_none());
    }

    #[test]
    fn leaf_rectangles_retile_cells() {
        for ts in [design1_like(), design2_like()] {
            let tree = ts.detect_hierarchy(1e-9).expect("hierarchical");
            let leaves = tree.leaf_rectangles();
            assert_eq!(leaves.len(), ts.spec().m1 * ts.spec().m2);
            for (cell, rect) in leaves {
                assert_eq!(rect, ts.cell_bounds(cell.0, cell.1), "cell {cell:?}");
            }
        }
    }

    #[test]
    fn hierarchy_is_translation_invariant() {
        let base = design2_like();
        let spec = base.spec();
        let shift = 3.7;
        let mut moved = base.clone();
        for id in interior_entries(spec) {
            moved.set_entry(id, base.entry(id) + shift);
        }
        let a = base.detect_hierarchy(1e-9).unwrap().leaf_rectangles();
        let b = moved.detect_hierarchy(1e-9).unwrap().leaf_rectangles();
        let cells_a: Vec<_> = a.iter().map(|(c, _)| *c).collect();
        let cells_b: Vec<_> = b.iter().map(|(c, _)| *c).collect();
        assert_eq!(cells_a, cells_b);
    }

    #[test]
    fn tie_groups_design2() {
        let classes = design2_like().tie_groups(1e-9);
        let find = |dim, j1, j2| {
            classes
                .iter()
                .find(|c| c.contains(&EntryId { dim, j1, j2 }))
                .unwrap()
                .clone()
        };
        assert_eq!(
            find(1, 1, 1),
            vec![
                EntryId { dim: 1, j1: 1, j2: 1 },
                EntryId { dim: 1, j1: 1, j2: 2 }
            ]
        );
        assert_eq!(find(1, 1, 3), vec![EntryId { dim: 1, j1: 1, j2: 3 }]);
        assert_eq!(find(1, 3, 1).len(), 3);
        assert_eq!(find(2, 2, 1).len(), 2);
        assert_eq!(find(2, 1, 2).len(), 3);
        let total: usize = classes.iter().map(|c| c.len()).sum();
        assert_eq!(total, interior_entries(design2_like().spec()).len());
    }

    #[test]
    fn tie_groups_lattice_one_class_per_level() {
        let lat = ThresholdStructure::lattice(
            ResponseSpec::new(3, 4).unwrap(),
            &[-1.0, 1.0],
            &[-0.5, 0.0, 0.5],
        )
        .unwrap();
        let classes = lat.tie_groups(1e-9);
        assert_eq!(classes.len(), 2 + 3);
        for class in classes {
            let dim = class[0].dim;
            let span = if dim == 1 { lat.spec().m2 } else { lat.spec().m1 };
            assert_eq!(class.len(), span);
        }
    }

    #[test]
    fn random_structures_are_coherent_and_deterministic() {
        let spec = ResponseSpec::new(4, 3).unwrap();
        let mut rng = stream(101, 0);
        for _ in 0..1000 {
            let ts = random_coherent_structure(spec, (-4.0, 4.0), &mut rng);
            assert!(ts.is_strictly_monotone());
            assert!(ts.is_coherent(1e-12));
            assert!(ts.detect_hierarchy(1e-12).is_some());
        }
        let a = random_coherent_structure(spec, (-4.0, 4.0), &mut stream(7, 3));
        let b = random_coherent_structure(spec, (-4.0, 4.0), &mut stream(7, 3));
        assert_eq!(a, b);

        let single = random_coherent_structure(
            ResponseSpec::new(1, 1).unwrap(),
            (-4.0, 4.0),
            &mut stream(7, 3),
        );
        assert_eq!(single.cell_bounds(1, 1), ((NEG, POS), (NEG, POS)));
    }

    #[test]
    fn random_structures_cover_ties() {
        // spanning splits create tied entries in any structure with m >= 3
        let spec = ResponseSpec::new(3, 3).unwrap();
        let mut rng = stream(5, 0);
        let mut saw_tie = false;
        for _ in 0..50 {
            let ts = random_coherent_structure(spec, (-4.0, 4.0), &mut rng);
            if ts.tie_groups(1e-12).iter().any(|c| c.len() > 1) {
                saw_tie = true;
            }
        }
        assert!(saw_tie);
    }

    #[test]
    fn json_roundtrip_and_exact_form() {
        let ts = design1_like();
        let s = serde_json::to_string(&ts).unwrap();
        assert_eq!(
            s,
            r#"{"M":[2,2],"A1":[["-inf","-inf"],[-2.0,1.5],["inf","inf"]],"A2":[["-inf",1.0,"inf"],["-inf",1.0,"inf"]]}"#
        );
        let back: ThresholdStructure = serde_json::from_str(&s).unwrap();
        assert_eq!(back, ts);

        for ts in [design2_like(), pinwheel()] {
            let s = serde_json::to_string(&ts).unwrap();
            let back: ThresholdStructure = serde_json::from_str(&s).unwrap();
            assert_eq!(back, ts);
        }
    }

    #[test]
    fn json_rejects_malformed_input() {
        // wrong row count
        let bad = r#"{"M":[2,2],"A1":[["-inf","-inf"],["inf","inf"]],"A2":[["-inf",1.0,"inf"],["-inf",1.0,"inf"]]}"#;
        assert!(serde_json::from_str::<ThresholdStructure>(bad).is_err());
        // variation across the cross dimension is legal (monotonicity binds
        // along each grid's own level index only)
        let ok = r#"{"M":[2,2],"A1":[["-inf","-inf"],[2.0,1.5],["inf","inf"]],"A2":[["-inf",1.0,"inf"],["-inf",0.9,"inf"]]}"#;
        assert!(serde_json::from_str::<ThresholdStructure>(ok).is_ok());
        let bad = r#"{"M":[2,2],"A1":[["-inf","-inf"],["oops",1.5],["inf","inf"]],"A2":[["-inf",1.0,"inf"],["-inf",0.9,"inf"]]}"#;
        assert!(serde_json::from_str::<ThresholdStructure>(bad).is_err());
    }
}
