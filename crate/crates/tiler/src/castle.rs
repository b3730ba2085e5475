//! Multisections and castles.
//!
//! A multisection is stored either as an anchor set with one ladder per
//! index (a bisection with source the anchor), from which
//! `C_{i,j} = L_i L_j⁻¹`, or as an explicit matrix of bisections. The anchored
//! form satisfies the matrix axioms by construction and keeps tall towers
//! linear in size; the matrix form is validated axiom by axiom.
//!
//! Fibers are evaluated on *atoms*: the pieces of the anchor on which every
//! ladder uses a single group element. On the image of an atom under a ladder
//! the fiber is a fixed set of group elements, so "for every unit" checks
//! reduce to one computation per atom and level.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::cantor::{CantorError, ClopenSet, PartitionTree};
use crate::groupoid::{point_in, Bisection, CompactSet, FiberSet, GroupoidError, Slice, SliceRecord};
use crate::systems::{GroupElement, PointCode, System, SystemError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CastleError {
    #[error(transparent)]
    Groupoid(#[from] GroupoidError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Cantor(#[from] CantorError),
    #[error("index {0} is not in the multisection")]
    UnknownIndex(usize),
    #[error("set is not inside level {level}: {witness}")]
    NotInLevel { level: usize, witness: String },
    #[error("invalid multisection: {0}")]
    Invalid(Violation),
    #[error("range map is not injective on the K-orbit of {point}: {first} and {second} agree")]
    NotInjective { point: String, first: GroupElement, second: GroupElement },
    #[error("bad record: {0}")]
    Record(String),
}

pub type Result<T> = std::result::Result<T, CastleError>;

/// The axiom a multisection or castle fails, with the offending indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Bisection { i: usize, j: usize, reason: String },
    LadderSource { i: usize, witness: String },
    Diagonal { i: usize, witness: String },
    SourceRange { i: usize, j: usize, witness: String },
    Composition { i: usize, j: usize, k: usize, witness: String },
    LevelOverlap { i: usize, j: usize, witness: String },
    CrossProduct { l: usize, i: usize, m: usize, j: usize, witness: String },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Bisection { i, j, reason } => write!(f, "C({i},{j}) is not a bisection: {reason}"),
            Violation::LadderSource { i, witness } => write!(f, "ladder {i} does not have the anchor as source ({witness})"),
            Violation::Diagonal { i, witness } => write!(f, "C({i},{i}) is not the unit of its level ({witness})"),
            Violation::SourceRange { i, j, witness } => {
                write!(f, "source of C({j},{i}) or range of C({i},{j}) differs from level {i} ({witness})")
            }
            Violation::Composition { i, j, k, witness } => write!(f, "C({i},{j})C({j},{k}) ≠ C({i},{k}) ({witness})"),
            Violation::LevelOverlap { i, j, witness } => write!(f, "levels {i} and {j} meet in {witness}"),
            Violation::CrossProduct { l, i, m, j, witness } => {
                write!(f, "level {i} of multisection {l} meets level {j} of multisection {m} in {witness}")
            }
        }
    }
}

/// Result of a validator: the first violated axiom, if any, and the depth of
/// the sets involved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub valid: bool,
    pub depth: usize,
    pub violation: Option<Violation>,
}

impl Verdict {
    fn ok(depth: usize) -> Self {
        Self { valid: true, depth, violation: None }
    }

    fn fail(depth: usize, v: Violation) -> Self {
        Self { valid: false, depth, violation: Some(v) }
    }
}

#[derive(Debug, Clone)]
enum Repr {
    Anchored { anchor: ClopenSet, ladders: Vec<Bisection> },
    Matrix { entries: Vec<Vec<Bisection>> },
}

/// A finite matrix of bisections `C_{i,j}` indexed by labels.
#[derive(Debug, Clone)]
pub struct Multisection {
    index: Vec<usize>,
    repr: Repr,
    levels: OnceLock<Vec<ClopenSet>>,
}

impl PartialEq for Multisection {
    fn eq(&self, other: &Self) -> bool {
        self.index == other.index
            && match (&self.repr, &other.repr) {
                (Repr::Anchored { anchor: a, ladders: l }, Repr::Anchored { anchor: b, ladders: m }) => a == b && l == m,
                (Repr::Matrix { entries: a }, Repr::Matrix { entries: b }) => a == b,
                _ => false,
            }
    }
}

impl Multisection {
    /// Anchored multisection; `ladders[p]` belongs to label `index[p]` and
    /// must have source `anchor`.
    pub fn anchored(index: Vec<usize>, anchor: ClopenSet, ladders: Vec<Bisection>) -> Result<Self> {
        if index.len() != ladders.len() || index.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CastleError::Record("labels must be strictly increasing, one per ladder".into()));
        }
        Ok(Self { index, repr: Repr::Anchored { anchor, ladders }, levels: OnceLock::new() })
    }

    /// Explicit matrix; `entries[p][q]` is `C_{index[p], index[q]}`.
    pub fn matrix(index: Vec<usize>, entries: Vec<Vec<Bisection>>) -> Result<Self> {
        if entries.len() != index.len() || entries.iter().any(|r| r.len() != index.len()) {
            return Err(CastleError::Record("matrix shape does not match the index".into()));
        }
        if index.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CastleError::Record("labels must be strictly increasing".into()));
        }
        Ok(Self { index, repr: Repr::Matrix { entries }, levels: OnceLock::new() })
    }

    /// `{C_{0,0} = set}`.
    pub fn single_level(system: &System, set: ClopenSet) -> Self {
        let ladder = Bisection::identity(system, set.clone());
        Self { index: vec![0], repr: Repr::Anchored { anchor: set, ladders: vec![ladder] }, levels: OnceLock::new() }
    }

    /// Rank-one tower `base, base+1, …, base+(height−1)` labelled `0..height`.
    pub fn tower(system: &System, base: ClopenSet, height: usize) -> Result<Self> {
        let mut ladders = Vec::with_capacity(height);
        for i in 0..height {
            ladders.push(Bisection::slice(system, GroupElement::z(i as i64), base.clone())?);
        }
        Self::anchored((0..height).collect(), base, ladders)
    }

    /// Anchored multisection whose ladders are single slices over `anchor`.
    pub fn from_elements(system: &System, anchor: ClopenSet, elements: &[GroupElement]) -> Result<Self> {
        let mut ladders = Vec::with_capacity(elements.len());
        for g in elements {
            ladders.push(Bisection::slice(system, *g, anchor.clone())?);
        }
        Self::anchored((0..elements.len()).collect(), anchor, ladders)
    }

    pub fn index(&self) -> &[usize] {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    /// Whether every level is empty.
    pub fn is_empty(&self) -> bool {
        match &self.repr {
            Repr::Anchored { anchor, .. } => self.index.is_empty() || anchor.is_empty(),
            Repr::Matrix { entries } => entries.iter().all(|r| r.iter().all(Bisection::is_empty)),
        }
    }

    fn position(&self, label: usize) -> Result<usize> {
        self.index.binary_search(&label).map_err(|_| CastleError::UnknownIndex(label))
    }

    pub fn is_anchored(&self) -> bool {
        matches!(self.repr, Repr::Anchored { .. })
    }

    /// All levels `C_{i,i}`, in label order.
    pub fn levels(&self, system: &System) -> Result<&[ClopenSet]> {
        if let Some(l) = self.levels.get() {
            return Ok(l);
        }
        let tree = system.tree();
        let levels: Vec<ClopenSet> = match &self.repr {
            Repr::Anchored { ladders, .. } => {
                ladders.iter().map(|l| l.range(system)).collect::<std::result::Result<_, _>>()?
            }
            Repr::Matrix { entries } => {
                (0..entries.len()).map(|p| entries[p][p].source(tree)).collect::<std::result::Result<_, _>>()?
            }
        };
        Ok(self.levels.get_or_init(|| levels))
    }

    pub fn level(&self, system: &System, label: usize) -> Result<ClopenSet> {
        let p = self.position(label)?;
        Ok(self.levels(system)?[p].clone())
    }

    pub fn footprint(&self, system: &System) -> Result<ClopenSet> {
        Ok(system.tree().union_all(self.levels(system)?.iter())?)
    }

    /// `C_{i,j}`.
    pub fn entry(&self, system: &System, i: usize, j: usize) -> Result<Bisection> {
        let (p, q) = (self.position(i)?, self.position(j)?);
        match &self.repr {
            Repr::Anchored { ladders, .. } => Ok(ladders[p].compose(system, &ladders[q].inverse(system)?)?),
            Repr::Matrix { entries } => Ok(entries[p][q].clone()),
        }
    }

    /// Anchor and ladders; for matrices the anchor is the first level and
    /// the ladders are the first column.
    pub fn anchor_and_ladders(&self, system: &System) -> Result<(ClopenSet, Vec<Bisection>)> {
        match &self.repr {
            Repr::Anchored { anchor, ladders } => Ok((anchor.clone(), ladders.clone())),
            Repr::Matrix { entries } => {
                let anchor = match entries.first() {
                    Some(row) => row[0].source(system.tree())?,
                    None => system.tree().empty(),
                };
                Ok((anchor, entries.iter().map(|r| r[0].clone()).collect()))
            }
        }
    }

    /// Equivalent anchored form.
    pub fn to_anchored(&self, system: &System) -> Result<Self> {
        let (anchor, ladders) = self.anchor_and_ladders(system)?;
        Self::anchored(self.index.clone(), anchor, ladders)
    }

    /// Equivalent matrix form (quadratic in the number of levels).
    pub fn to_matrix(&self, system: &System) -> Result<Self> {
        let mut entries = Vec::with_capacity(self.len());
        for &i in &self.index {
            let mut row = Vec::with_capacity(self.len());
            for &j in &self.index {
                row.push(self.entry(system, i, j)?);
            }
            entries.push(row);
        }
        Self::matrix(self.index.clone(), entries)
    }

    /// Deepest cell among sources and levels.
    pub fn depth(&self, system: &System) -> Result<usize> {
        let mut d = self.levels(system)?.iter().map(ClopenSet::max_depth).max().unwrap_or(0);
        let (anchor, ladders) = self.anchor_and_ladders(system)?;
        d = d.max(anchor.max_depth());
        for l in &ladders {
            d = d.max(l.depth());
        }
        Ok(d)
    }

    /// Pieces of the anchor on which every ladder uses one group element,
    /// with those elements in label order.
    pub fn atoms(&self, system: &System) -> Result<Vec<(ClopenSet, Vec<GroupElement>)>> {
        let tree = system.tree();
        let (anchor, ladders) = self.anchor_and_ladders(system)?;
        let mut classes: Vec<(ClopenSet, Vec<GroupElement>)> =
            if anchor.is_empty() { Vec::new() } else { vec![(anchor, Vec::new())] };
        for ladder in &ladders {
            let mut next = Vec::with_capacity(classes.len());
            for (set, elems) in classes {
                for (g, src) in ladder.elements() {
                    let piece = tree.intersect(&set, src)?;
                    if !piece.is_empty() {
                        let mut e = elems.clone();
                        e.push(*g);
                        next.push((piece, e));
                    }
                }
            }
            classes = next;
        }
        Ok(classes)
    }

    /// `M|_V` on the labels in `keep`: `B_{i,j} = C_{i,i₀} V C_{j,i₀}⁻¹`.
    pub fn restrict(&self, system: &System, level: usize, v: &ClopenSet, keep: &BTreeSet<usize>) -> Result<Self> {
        let tree = system.tree();
        let lv = self.level(system, level)?;
        if !tree.is_subset(v, &lv)? {
            let outside = tree.difference(v, &lv)?;
            return Err(CastleError::NotInLevel { level, witness: outside.to_string() });
        }
        let (_, ladders) = self.anchor_and_ladders(system)?;
        let p0 = self.position(level)?;
        let pre = preimage(system, &ladders[p0], v)?;
        let mut index = Vec::new();
        let mut out = Vec::new();
        for (p, &label) in self.index.iter().enumerate() {
            if keep.contains(&label) {
                index.push(label);
                out.push(ladders[p].restrict_source(system, &pre)?);
            }
        }
        Self::anchored(index, pre, out)
    }

    /// The fiber of `u` in the elementary groupoid of this multisection.
    pub fn fiber(&self, system: &System, u: &PointCode) -> Result<Option<FiberSet>> {
        let levels = self.levels(system)?;
        let Some(p) = levels.iter().position(|l| point_in(system, l, u).unwrap_or(false)) else {
            return Ok(None);
        };
        let (_, ladders) = self.anchor_and_ladders(system)?;
        let mut v = None;
        for (g, src) in ladders[p].elements() {
            let cand = system.act(-*g, u)?;
            if point_in(system, src, &cand)? {
                v = Some((cand, *g));
                break;
            }
        }
        let (v, gp) = v.ok_or_else(|| CastleError::Record(format!("{u} lies in level {p} but in no ladder range")))?;
        let mut elems = Vec::with_capacity(ladders.len());
        for l in &ladders {
            if let Some(g) = l.element_at(system, &v)? {
                elems.push(g - gp);
            }
        }
        Ok(Some(FiberSet::new(u.clone(), elems)))
    }

    pub fn record(&self, system: &System) -> Result<MultisectionRecord> {
        let (base, column) = match &self.repr {
            Repr::Anchored { ladders, .. } => {
                let b = self.index.first().copied().unwrap_or(0);
                let inv = match ladders.first() {
                    Some(l) => l.inverse(system)?,
                    None => Bisection::empty(),
                };
                let col = ladders.iter().map(|l| l.compose(system, &inv)).collect::<std::result::Result<Vec<_>, _>>()?;
                (b, col)
            }
            Repr::Matrix { entries } => (self.index.first().copied().unwrap_or(0), entries.iter().map(|r| r[0].clone()).collect()),
        };
        let mut bisections = BTreeMap::new();
        for (p, b) in column.iter().enumerate() {
            bisections.insert(format!("{},{}", self.index[p], base), records_of(b));
        }
        Ok(MultisectionRecord { index: self.index.clone(), base, bisections })
    }
}

fn records_of(b: &Bisection) -> Vec<SliceRecord> {
    b.elements().map(|(g, s)| SliceRecord { g: *g, src: s.words() }).collect()
}

/// `L⁻¹(V)`: points of the source of `l` mapped into `v`.
pub fn preimage(system: &System, l: &Bisection, v: &ClopenSet) -> Result<ClopenSet> {
    let tree = system.tree();
    let mut parts = Vec::new();
    for (g, src) in l.elements() {
        let back = system.act_on_set(-*g, v)?;
        parts.push(tree.intersect(src, &back)?);
    }
    Ok(tree.union_all(parts.iter())?)
}

/// Serialized multisection: the column `C_{i,base}` for every label `i`,
/// which determines the matrix through `C_{i,j} = C_{i,base} C_{j,base}⁻¹`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultisectionRecord {
    pub index: Vec<usize>,
    pub base: usize,
    pub bisections: BTreeMap<String, Vec<SliceRecord>>,
}

impl MultisectionRecord {
    pub fn to_multisection(&self, system: &System) -> Result<Multisection> {
        let mut index = self.index.clone();
        index.sort_unstable();
        index.dedup();
        if index != self.index || !index.contains(&self.base) {
            return Err(CastleError::Record("index must be sorted, distinct and contain the base".into()));
        }
        let full = self.bisections.len() == index.len() * index.len() && index.len() > 1;
        if full {
            let mut entries = Vec::with_capacity(index.len());
            for &i in &index {
                let mut row = Vec::with_capacity(index.len());
                for &j in &index {
                    let recs = self
                        .bisections
                        .get(&format!("{i},{j}"))
                        .ok_or_else(|| CastleError::Record(format!("missing entry {i},{j}")))?;
                    row.push(Bisection::from_records(system, recs)?);
                }
                entries.push(row);
            }
            return Multisection::matrix(index, entries);
        }
        let mut ladders = Vec::with_capacity(index.len());
        for &i in &index {
            let recs = self
                .bisections
                .get(&format!("{i},{}", self.base))
                .ok_or_else(|| CastleError::Record(format!("missing entry {i},{}", self.base)))?;
            ladders.push(Bisection::from_records(system, recs)?);
        }
        let p = index.binary_search(&self.base).expect("base checked above");
        let anchor = ladders[p].source(system.tree())?;
        Multisection::anchored(index, anchor, ladders)
    }
}

/// Checks every multisection axiom exactly.
pub fn validate_multisection(system: &System, m: &Multisection) -> Result<Verdict> {
    let tree = system.tree();
    let levels = m.levels(system)?.to_vec();
    let depth = m.depth(system)?;
    match &m.repr {
        Repr::Anchored { anchor, ladders } => {
            for (p, l) in ladders.iter().enumerate() {
                let i = m.index[p];
                if let Err(e) = l.validate(system) {
                    return Ok(Verdict::fail(depth, Violation::Bisection { i, j: m.index[0], reason: e.to_string() }));
                }
                let src = l.source(tree)?;
                if src != *anchor {
                    let diff = tree.union(&tree.difference(&src, anchor)?, &tree.difference(anchor, &src)?)?;
                    return Ok(Verdict::fail(depth, Violation::LadderSource { i, witness: diff.to_string() }));
                }
            }
        }
        Repr::Matrix { entries } => {
            let n = entries.len();
            for p in 0..n {
                for q in 0..n {
                    if let Err(e) = entries[p][q].validate(system) {
                        let (i, j) = (m.index[p], m.index[q]);
                        return Ok(Verdict::fail(depth, Violation::Bisection { i, j, reason: e.to_string() }));
                    }
                }
            }
            for p in 0..n {
                let unit = Bisection::identity(system, levels[p].clone());
                if entries[p][p] != unit {
                    let bad: Vec<String> =
                        entries[p][p].elements().filter(|(g, _)| !g.is_zero()).map(|(g, _)| g.to_string()).collect();
                    let i = m.index[p];
                    return Ok(Verdict::fail(depth, Violation::Diagonal { i, witness: bad.join(" ") }));
                }
            }
            for p in 0..n {
                for q in 0..n {
                    let s = entries[q][p].source(tree)?;
                    let r = entries[p][q].range(system)?;
                    if s != levels[p] || r != levels[p] {
                        let w = if s != levels[p] { symmetric(tree, &s, &levels[p])? } else { symmetric(tree, &r, &levels[p])? };
                        let (i, j) = (m.index[p], m.index[q]);
                        return Ok(Verdict::fail(depth, Violation::SourceRange { i, j, witness: w.to_string() }));
                    }
                }
            }
            for p in 0..n {
                for q in 0..n {
                    for r in 0..n {
                        let c = entries[p][q].compose(system, &entries[q][r])?;
                        if c != entries[p][r] {
                            let (i, j, k) = (m.index[p], m.index[q], m.index[r]);
                            let witness = bisection_difference(system, &c, &entries[p][r])?;
                            return Ok(Verdict::fail(depth, Violation::Composition { i, j, k, witness }));
                        }
                    }
                }
            }
        }
    }
    if let Some((p, q, w)) = first_overlap(tree, &levels)? {
        let (i, j) = (m.index[p], m.index[q]);
        return Ok(Verdict::fail(depth, Violation::LevelOverlap { i, j, witness: w.to_string() }));
    }
    Ok(Verdict::ok(depth))
}

fn symmetric(tree: &PartitionTree, a: &ClopenSet, b: &ClopenSet) -> Result<ClopenSet> {
    Ok(tree.union(&tree.difference(a, b)?, &tree.difference(b, a)?)?)
}

fn bisection_difference(system: &System, a: &Bisection, b: &Bisection) -> Result<String> {
    let tree = system.tree();
    let empty = tree.empty();
    let mut keys: BTreeSet<GroupElement> = a.elements().map(|(g, _)| *g).collect();
    keys.extend(b.elements().map(|(g, _)| *g));
    for g in keys {
        let sa = a.elements().find(|(h, _)| **h == g).map_or(&empty, |(_, s)| s);
        let sb = b.elements().find(|(h, _)| **h == g).map_or(&empty, |(_, s)| s);
        if sa != sb {
            return Ok(format!("{g} on {}", symmetric(tree, sa, sb)?));
        }
    }
    Ok(String::new())
}

/// First pair of sets that meet, found with a running union.
fn first_overlap(tree: &PartitionTree, sets: &[ClopenSet]) -> Result<Option<(usize, usize, ClopenSet)>> {
    let mut acc = tree.empty();
    for (q, s) in sets.iter().enumerate() {
        if !tree.is_disjoint(&acc, s)? {
            for (p, earlier) in sets[..q].iter().enumerate() {
                let both = tree.intersect(earlier, s)?;
                if !both.is_empty() {
                    return Ok(Some((p, q, both)));
                }
            }
        }
        acc = tree.union(&acc, s)?;
    }
    Ok(None)
}

/// A disjoint family of multisections.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Castle {
    pub multisections: Vec<Multisection>,
}

impl Castle {
    pub fn new(multisections: Vec<Multisection>) -> Self {
        Self { multisections }
    }

    pub fn footprint(&self, system: &System) -> Result<ClopenSet> {
        let mut parts = Vec::with_capacity(self.multisections.len());
        for m in &self.multisections {
            parts.push(m.footprint(system)?);
        }
        Ok(system.tree().union_all(parts.iter())?)
    }

    pub fn num_levels(&self) -> usize {
        self.multisections.iter().map(Multisection::len).sum()
    }

    pub fn depth(&self, system: &System) -> Result<usize> {
        let mut d = 0;
        for m in &self.multisections {
            d = d.max(m.depth(system)?);
        }
        Ok(d)
    }

    /// The fiber through `u` of the elementary groupoid of the castle.
    pub fn fiber(&self, system: &System, u: &PointCode) -> Result<FiberSet> {
        let u = system.normalize_point(u)?;
        for m in &self.multisections {
            if let Some(f) = m.fiber(system, &u)? {
                return Ok(f);
            }
        }
        Ok(FiberSet::new(u, []))
    }

    /// Exact fiber classes: clopen pieces of the footprint on which the fiber
    /// is a fixed set of group elements.
    pub fn fiber_classes(&self, system: &System) -> Result<Vec<FiberClass>> {
        let mut out = Vec::new();
        for (l, m) in self.multisections.iter().enumerate() {
            let atoms = m.atoms(system)?;
            for (atom, elems) in atoms {
                for (p, gp) in elems.iter().enumerate() {
                    let set = system.act_on_set(*gp, &atom)?;
                    let fiber: BTreeSet<GroupElement> = elems.iter().map(|g| *g - *gp).collect();
                    out.push(FiberClass { multisection: l, level: m.index[p], set, elements: fiber });
                }
            }
        }
        Ok(out)
    }

    pub fn record(&self, system: &System) -> Result<CastleRecord> {
        let multisections = self.multisections.iter().map(|m| m.record(system)).collect::<Result<Vec<_>>>()?;
        Ok(CastleRecord { multisections })
    }
}

/// Units of `set` (inside level `level` of multisection `multisection`)
/// share the fiber `elements`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiberClass {
    pub multisection: usize,
    pub level: usize,
    pub set: ClopenSet,
    pub elements: BTreeSet<GroupElement>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CastleRecord {
    pub multisections: Vec<MultisectionRecord>,
}

impl CastleRecord {
    pub fn to_castle(&self, system: &System) -> Result<Castle> {
        let ms = self.multisections.iter().map(|m| m.to_multisection(system)).collect::<Result<Vec<_>>>()?;
        Ok(Castle::new(ms))
    }
}

/// Serializes through [`CastleRecord`]; needs the system, so it is a wrapper.
pub struct CastleJson<'a>(pub &'a System, pub &'a Castle);

impl Serialize for CastleJson<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rec = self.1.record(self.0).map_err(serde::ser::Error::custom)?;
        let mut st = s.serialize_struct("Castle", 1)?;
        st.serialize_field("multisections", &rec.multisections)?;
        st.end()
    }
}

/// Validates each multisection and the disjointness of levels across them.
pub fn validate_castle(system: &System, c: &Castle) -> Result<Verdict> {
    let tree = system.tree();
    let mut depth = 0;
    for m in &c.multisections {
        let v = validate_multisection(system, m)?;
        depth = depth.max(v.depth);
        if !v.valid {
            return Ok(v);
        }
    }
    let mut labelled: Vec<(usize, usize)> = Vec::new();
    let mut sets: Vec<ClopenSet> = Vec::new();
    let mut footprints = Vec::new();
    for (l, m) in c.multisections.iter().enumerate() {
        footprints.push(m.footprint(system)?);
        for (p, s) in m.levels(system)?.iter().enumerate() {
            labelled.push((l, m.index[p]));
            sets.push(s.clone());
        }
    }
    if first_overlap(tree, &footprints)?.is_some() {
        if let Some((a, b, w)) = first_overlap(tree, &sets)? {
            let ((l, i), (m, j)) = (labelled[a], labelled[b]);
            return Ok(Verdict::fail(depth, Violation::CrossProduct { l, i, m, j, witness: w.to_string() }));
        }
    }
    Ok(Verdict::ok(depth))
}

/// `D ⊆ C`: labels of `d` are labels of `c` and `D_{i,j} ⊆ C_{i,j}`.
pub fn is_contained(system: &System, d: &Multisection, c: &Multisection) -> Result<bool> {
    if d.index.iter().any(|i| c.index.binary_search(i).is_err()) {
        return Ok(false);
    }
    let Some(&b) = d.index.first() else { return Ok(true) };
    let tree = system.tree();
    for (dl, cl) in d.levels(system)?.iter().zip(d.index.iter().map(|i| c.level(system, *i))) {
        if !tree.is_subset(dl, &cl?)? {
            return Ok(false);
        }
    }
    for &i in &d.index {
        if !d.entry(system, i, b)?.is_subset(system, &c.entry(system, i, b)?)? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Every multisection of `d` is contained in some multisection of `c`.
pub fn is_subcastle(system: &System, d: &Castle, c: &Castle) -> Result<bool> {
    'outer: for m in &d.multisections {
        for n in &c.multisections {
            if is_contained(system, m, n)? {
                continue 'outer;
            }
        }
        return Ok(false);
    }
    Ok(true)
}

/// Outcome of an extendability check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Extendability {
    pub extendable: bool,
    /// Always "smaller-inside-larger": the labels of `C` sit inside those of `D`.
    pub convention: &'static str,
    pub witness: Option<String>,
}

/// Whether `K·⋃C_l ⊆ ⋃D_l` for every `l`, with `C_l` a restriction of `D_l`
/// on its labels.
pub fn is_extendable(system: &System, c: &Castle, d: &Castle, k: &CompactSet) -> Result<Extendability> {
    let convention = "smaller-inside-larger";
    let fail = |w: String| Ok(Extendability { extendable: false, convention, witness: Some(w) });
    if c.multisections.len() != d.multisections.len() {
        return fail(format!("{} multisections against {}", c.multisections.len(), d.multisections.len()));
    }
    let tree = system.tree();
    for (l, (cm, dm)) in c.multisections.iter().zip(&d.multisections).enumerate() {
        if !is_contained(system, cm, dm)? {
            return fail(format!("multisection {l} of C is not inside multisection {l} of D"));
        }
        let cc = Castle::new(vec![cm.clone()]);
        let dc = Castle::new(vec![dm.clone()]);
        let c_classes = cc.fiber_classes(system)?;
        let d_classes = dc.fiber_classes(system)?;
        for cls in &c_classes {
            for dcls in &d_classes {
                let piece = tree.intersect(&cls.set, &dcls.set)?;
                if piece.is_empty() {
                    continue;
                }
                for (kset, kelems) in k_pieces(system, k, &piece, &cls.elements)? {
                    for (h, ks) in cls.elements.iter().zip(&kelems) {
                        for kk in ks {
                            let t = *kk + *h;
                            if !dcls.elements.contains(&t) {
                                return fail(format!("arrow {t} from {kset} (multisection {l}) escapes D"));
                            }
                        }
                    }
                }
            }
        }
        for u in exceptional_units(system, k, &cc)? {
            let f = cc.fiber(system, &u)?;
            if f.is_empty() {
                continue;
            }
            let g = dc.fiber(system, &u)?;
            for t in crate::groupoid::k_apply(system, k, &f)? {
                if !g.elements.contains(&t) {
                    return fail(format!("arrow {t} at {u} (multisection {l}) escapes D"));
                }
            }
        }
    }
    Ok(Extendability { extendable: true, convention, witness: None })
}

/// Splits `set` into pieces on which, for each `h` in `elems`, the set of
/// `K`-elements with source `h·u` is constant (ignoring undefinedness, which
/// [`exceptional_units`] covers).
pub fn k_pieces(
    system: &System,
    k: &CompactSet,
    set: &ClopenSet,
    elems: &BTreeSet<GroupElement>,
) -> Result<Vec<(ClopenSet, Vec<BTreeSet<GroupElement>>)>> {
    let tree = system.tree();
    let mut pieces: Vec<(ClopenSet, Vec<BTreeSet<GroupElement>>)> = vec![(set.clone(), vec![BTreeSet::new(); elems.len()])];
    for (p, h) in elems.iter().enumerate() {
        for s in k.slices() {
            if s.src.is_whole() {
                for (_, ks) in pieces.iter_mut() {
                    ks[p].insert(s.g);
                }
                continue;
            }
            let back = system.act_on_set(-*h, &s.src)?;
            let mut next = Vec::with_capacity(pieces.len() * 2);
            for (piece, ks) in pieces {
                let inside = tree.intersect(&piece, &back)?;
                let outside = tree.difference(&piece, &back)?;
                if !inside.is_empty() {
                    let mut ks2 = ks.clone();
                    ks2[p].insert(s.g);
                    next.push((inside, ks2));
                }
                if !outside.is_empty() {
                    next.push((outside, ks));
                }
            }
            pieces = next;
        }
    }
    Ok(pieces)
}

/// Units of the castle footprint whose fiber passes through a point where
/// an element of `K` is undefined. Empty for total systems.
pub fn exceptional_units(system: &System, k: &CompactSet, c: &Castle) -> Result<Vec<PointCode>> {
    let mut out = BTreeSet::new();
    for s in k.slices() {
        for x in system.undefined_points(s.g)? {
            let f = c.fiber(system, &x)?;
            for y in f.ranges(system)? {
                out.insert(y);
            }
        }
    }
    Ok(out.into_iter().collect())
}

/// Largest `N` such that every level of `d` contains at least `N` levels of
/// `b`, no `b`-level straddles a `d`-level boundary, and `d`-ladders carry
/// the `b`-levels inside one `d`-level onto those inside another.
pub fn nesting_multiplicity(system: &System, b: &Castle, d: &Castle) -> Result<usize> {
    let tree = system.tree();
    let mut b_levels = Vec::new();
    for m in &b.multisections {
        b_levels.extend(m.levels(system)?.iter().filter(|s| !s.is_empty()).cloned());
    }
    let mut best: Option<usize> = None;
    for dm in &d.multisections {
        let levels = dm.levels(system)?;
        let mut inside: Vec<Vec<usize>> = Vec::with_capacity(levels.len());
        for lv in levels {
            let mut here = Vec::new();
            for (q, bl) in b_levels.iter().enumerate() {
                if tree.is_subset(bl, lv)? {
                    here.push(q);
                } else if !tree.is_disjoint(bl, lv)? {
                    return Ok(0);
                }
            }
            inside.push(here);
        }
        let base = dm.index[0];
        for (p, &i) in dm.index.iter().enumerate() {
            let ladder = dm.entry(system, i, base)?;
            for &q in &inside[0] {
                let img = ladder.image(system, &b_levels[q])?;
                if !inside[p].iter().any(|&r| b_levels[r] == img) {
                    return Ok(0);
                }
            }
            if inside[p].len() != inside[0].len() {
                return Ok(0);
            }
        }
        let n = inside.iter().map(Vec::len).min().unwrap_or(0);
        best = Some(best.map_or(n, |b: usize| b.min(n)));
    }
    Ok(best.unwrap_or(0))
}

/// Multisection whose ladders over a cylinder `V ∋ u` enumerate `{u} ∪ K·u`.
/// Returns the multisection and the label of the level containing `u`.
pub fn build_tower(system: &System, k: &CompactSet, u: &PointCode) -> Result<(Multisection, usize)> {
    let u = system.normalize_point(u)?;
    let mut elems: BTreeSet<GroupElement> = k.elements_at(system, &u)?;
    elems.insert(GroupElement::zero(system.rank()));
    let elems: Vec<GroupElement> = elems.into_iter().collect();
    let mut seen: BTreeMap<PointCode, GroupElement> = BTreeMap::new();
    for g in &elems {
        let p = system.act(*g, &u)?;
        if let Some(prev) = seen.insert(p, *g) {
            return Err(CastleError::NotInjective { point: u.to_string(), first: prev, second: *g });
        }
    }
    let tree = system.tree();
    // each ladder must stay inside a slice of K containing u
    let mut within: Vec<Option<ClopenSet>> = Vec::with_capacity(elems.len());
    for g in &elems {
        let mut acc: Option<ClopenSet> = None;
        if !g.is_zero() {
            for s in k.slices().iter().filter(|s| s.g == *g) {
                if point_in(system, &s.src, &u)? {
                    acc = Some(s.src.clone());
                    break;
                }
            }
        }
        within.push(acc);
    }
    for depth in 0..=tree.depth_cap() {
        let v = tree.set(vec![system.cell_of(&u, depth)?])?;
        let mut ok = true;
        for (g, w) in elems.iter().zip(&within) {
            if let Some(w) = w {
                if !tree.is_subset(&v, w)? {
                    ok = false;
                    break;
                }
            }
            if Slice::new(system, *g, v.clone()).is_err() {
                ok = false;
                break;
            }
        }
        if !ok {
            continue;
        }
        let m = match Multisection::from_elements(system, v, &elems) {
            Ok(m) => m,
            Err(CastleError::Groupoid(GroupoidError::System(SystemError::Cantor(CantorError::Capacity { .. })))) => break,
            Err(e) => return Err(e),
        };
        let levels = m.levels(system)?;
        if first_overlap(tree, levels)?.is_none() {
            let base = elems.iter().position(GroupElement::is_zero).expect("identity included");
            return Ok((m, base));
        }
    }
    Err(GroupoidError::NotFree { point: u.to_string(), depth: tree.depth_cap(), reason: "translates never separate".into() }
        .into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::SystemSpec;
    use proptest::prelude::*;

    fn odometer() -> System {
        SystemSpec::odometer(2).build().unwrap()
    }

    fn set(sys: &System, words: &[&str]) -> ClopenSet {
        sys.tree().set_from_words(words).unwrap()
    }

    fn zeros() -> PointCode {
        PointCode::digits(vec![], vec![0])
    }

    /// KR tower of height 2^d over [0^d].
    fn kr(sys: &System, d: usize) -> Multisection {
        let base = sys.tree().set(vec![sys.cell_of(&zeros(), d).unwrap()]).unwrap();
        Multisection::tower(sys, base, 1 << d).unwrap()
    }

    #[test]
    fn towers_and_single_levels_validate() {
        let sys = odometer();
        let t = kr(&sys, 3);
        assert!(validate_multisection(&sys, &t).unwrap().valid);
        assert!(validate_multisection(&sys, &t.to_matrix(&sys).unwrap()).unwrap().valid);
        let single = Multisection::single_level(&sys, set(&sys, &["01", "1"]));
        assert!(validate_multisection(&sys, &single).unwrap().valid);
        // the KR tower covers the space exactly
        assert!(t.footprint(&sys).unwrap().is_whole());
    }

    #[test]
    fn matrix_inverse_is_transpose() {
        let sys = odometer();
        let t = kr(&sys, 2).to_matrix(&sys).unwrap();
        for &i in t.index() {
            for &j in t.index() {
                assert_eq!(t.entry(&sys, i, j).unwrap().inverse(&sys).unwrap(), t.entry(&sys, j, i).unwrap());
            }
        }
    }

    #[test]
    fn shared_level_cell_gives_cross_product_witness() {
        let sys = odometer();
        let a = Multisection::single_level(&sys, set(&sys, &["0"]));
        let b = Multisection::single_level(&sys, set(&sys, &["00", "1"]));
        let v = validate_castle(&sys, &Castle::new(vec![a, b])).unwrap();
        assert!(!v.valid);
        match v.violation.unwrap() {
            Violation::CrossProduct { l, m, witness, .. } => {
                assert_eq!((l, m), (0, 1));
                assert_eq!(witness, "[00]");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn broken_matrix_entry_names_a_triple() {
        let sys = odometer();
        let t = kr(&sys, 2).to_matrix(&sys).unwrap();
        let Repr::Matrix { mut entries } = t.repr.clone() else { unreachable!() };
        // a different bisection from [00] onto [10]: [000] -> [101] by -3, [001] -> [100] by +5
        let other = Bisection::from_slices(
            &sys,
            vec![
                Slice::new(&sys, GroupElement::z(-3), set(&sys, &["000"])).unwrap(),
                Slice::new(&sys, GroupElement::z(5), set(&sys, &["001"])).unwrap(),
            ],
        )
        .unwrap();
        assert_eq!(other.range(&sys).unwrap(), set(&sys, &["10"]));
        entries[1][0] = other;
        let bad = Multisection::matrix(t.index().to_vec(), entries).unwrap();
        let v = validate_multisection(&sys, &bad).unwrap();
        assert!(!v.valid);
        match v.violation.unwrap() {
            Violation::Composition { i, j, k, .. } => assert!([i, j, k].contains(&1) && [i, j, k].contains(&0)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn fibers() {
        let sys = odometer();
        let c = Castle::new(vec![kr(&sys, 2)]);
        for w in [vec![0u8, 1, 1], vec![1, 1, 0, 1], vec![0, 0]] {
            let u = PointCode::digits(w, vec![1, 0]);
            assert_eq!(c.fiber(&sys, &u).unwrap().len(), 4);
        }
        let tower = Castle::new(vec![Multisection::tower(&sys, set(&sys, &["000"]), 5).unwrap()]);
        assert_eq!(tower.fiber(&sys, &zeros()).unwrap().len(), 5);
        let outside = PointCode::digits(vec![1, 1, 1], vec![0]);
        assert!(tower.fiber(&sys, &outside).unwrap().is_empty());
    }

    #[test]
    fn fiber_classes_agree_with_pointwise_fibers() {
        let sys = odometer();
        let c = Castle::new(vec![kr(&sys, 3)]);
        let classes = c.fiber_classes(&sys).unwrap();
        assert_eq!(classes.len(), 8);
        for cls in &classes {
            let cell = &cls.set.cells()[0];
            let u = PointCode::digits(cell.word().to_vec(), vec![1]);
            assert_eq!(c.fiber(&sys, &u).unwrap().elements, cls.elements);
        }
    }

    #[test]
    fn restriction() {
        let sys = odometer();
        let t = kr(&sys, 2);
        let all: BTreeSet<usize> = t.index().iter().copied().collect();
        let same = t.restrict(&sys, 0, &t.level(&sys, 0).unwrap(), &all).unwrap();
        assert_eq!(same.levels(&sys).unwrap(), t.levels(&sys).unwrap());
        assert!(same.restrict(&sys, 0, &sys.tree().empty(), &all).unwrap().is_empty());
        let half = set(&sys, &["000"]);
        let keep: BTreeSet<usize> = [0, 2].into_iter().collect();
        let r = t.restrict(&sys, 0, &half, &keep).unwrap();
        assert!(validate_multisection(&sys, &r).unwrap().valid);
        assert_eq!(r.len(), 2);
        assert_eq!(sys.measure(&r.footprint(&sys).unwrap()), 0.5 * sys.measure(&t.footprint(&sys).unwrap()) * 0.5);
        assert_eq!(r.level(&sys, 2).unwrap(), set(&sys, &["010"]));
        assert!(is_contained(&sys, &r, &t).unwrap());
        assert!(!is_contained(&sys, &t, &r).unwrap());
        let err = t.restrict(&sys, 1, &half, &keep).unwrap_err();
        assert!(matches!(err, CastleError::NotInLevel { .. }));
    }

    #[test]
    fn extendability() {
        let sys = odometer();
        let unit = CompactSet::unit(&sys);
        let c = Castle::new(vec![kr(&sys, 2)]);
        assert!(is_extendable(&sys, &c, &c, &unit).unwrap().extendable);
        let k = CompactSet::ball(&sys, 1);
        // height-8 tower over [0000]; a height-4 tower on its rungs s..s+3
        let d8 = Multisection::tower(&sys, set(&sys, &["0000"]), 8).unwrap();
        for s in 0..=4usize {
            let base = d8.level(&sys, s).unwrap();
            let labels: BTreeSet<usize> = (s..s + 4).collect();
            let inner = d8.restrict(&sys, s, &base, &labels).unwrap();
            let e = is_extendable(&sys, &Castle::new(vec![inner]), &Castle::new(vec![d8.clone()]), &k).unwrap();
            assert_eq!(e.extendable, s >= 1 && s + 4 <= 7, "start {s}");
            if !e.extendable {
                assert!(e.witness.is_some());
            }
        }
        let big = CompactSet::ball(&sys, 9);
        let e = is_extendable(&sys, &Castle::new(vec![d8.clone()]), &Castle::new(vec![d8]), &big).unwrap();
        assert!(!e.extendable);
    }

    #[test]
    fn nesting() {
        let sys = odometer();
        let c2 = Castle::new(vec![kr(&sys, 2)]);
        assert_eq!(nesting_multiplicity(&sys, &c2, &c2).unwrap(), 1);
        for (k, m) in [(1usize, 3usize), (2, 4), (1, 4)] {
            let fine = Castle::new(vec![kr(&sys, m)]);
            let coarse = Castle::new(vec![kr(&sys, k)]);
            assert_eq!(nesting_multiplicity(&sys, &fine, &coarse).unwrap(), 1 << (m - k));
        }
        let a = Castle::new(vec![Multisection::single_level(&sys, set(&sys, &["0"]))]);
        let b = Castle::new(vec![Multisection::single_level(&sys, set(&sys, &["1"]))]);
        assert_eq!(nesting_multiplicity(&sys, &a, &b).unwrap(), 0);
    }

    #[test]
    fn towers_from_k() {
        let sys = odometer();
        let (m, base) = build_tower(&sys, &CompactSet::unit(&sys), &zeros()).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(base, 0);
        let k = CompactSet::new(
            [-1, 1].into_iter().map(|g| Slice { g: GroupElement::z(g), src: sys.tree().whole() }).collect(),
        );
        let (m, base) = build_tower(&sys, &k, &zeros()).unwrap();
        assert_eq!(m.len(), 3);
        assert!(validate_multisection(&sys, &m).unwrap().valid);
        let f = m.fiber(&sys, &zeros()).unwrap().unwrap();
        assert_eq!(f.elements, [-1, 0, 1].into_iter().map(GroupElement::z).collect());
        assert_eq!(m.index()[base], 1);
    }

    #[test]
    fn records_round_trip() {
        let sys = odometer();
        let c = Castle::new(vec![kr(&sys, 2), Multisection::single_level(&sys, sys.tree().empty())]);
        let json = serde_json::to_string(&CastleJson(&sys, &c)).unwrap();
        let rec: CastleRecord = serde_json::from_str(&json).unwrap();
        let back = rec.to_castle(&sys).unwrap();
        for (a, b) in c.multisections.iter().zip(&back.multisections) {
            assert_eq!(a.levels(&sys).unwrap(), b.levels(&sys).unwrap());
        }
        let full = kr(&sys, 1).to_matrix(&sys).unwrap();
        let mut rec = full.record(&sys).unwrap();
        for &i in full.index() {
            for &j in full.index() {
                rec.bisections.insert(format!("{i},{j}"), records_of(&full.entry(&sys, i, j).unwrap()));
            }
        }
        assert_eq!(rec.to_multisection(&sys).unwrap(), full);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn restricted_towers_are_valid_and_contained(d in 1usize..4, sub in 0u32..64, keep in proptest::collection::btree_set(0usize..8, 1..8)) {
            let sys = odometer();
            let t = kr(&sys, d);
            let h = 1usize << d;
            let keep: BTreeSet<usize> = keep.into_iter().filter(|i| *i < h).collect();
            prop_assume!(!keep.is_empty());
            let base = t.level(&sys, 0).unwrap();
            let cells = sys.tree().refine(&base, d + 2).unwrap();
            let pick: Vec<_> = cells.into_iter().enumerate().filter(|(i, _)| sub >> i & 1 == 1).map(|(_, c)| c).collect();
            let v = sys.tree().set(pick).unwrap();
            let r = t.restrict(&sys, 0, &v, &keep).unwrap();
            prop_assert!(validate_multisection(&sys, &r).unwrap().valid);
            prop_assert!(is_contained(&sys, &r, &t).unwrap());
            for cls in Castle::new(vec![r.clone()]).fiber_classes(&sys).unwrap() {
                prop_assert_eq!(cls.elements.len(), keep.len());
            }
        }
    }
}
