//! The transformation groupoid of a system: slices, bisections, compact
//! sets, fibers, K-boundaries and Følner predicates.
//!
//! An arrow is a pair `(g, u)` with source `u` and range `g·u`; a fiber
//! `G_u` is identified with the group elements defined at `u`. For partial
//! systems a slice `(g, src)` requires `g` to be defined on all of `src`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::cantor::{CantorError, Cell, ClopenSet, PartitionTree};
use crate::report::{frac, frac_le, Frac, FracJson};
use crate::systems::{GroupElement, PointCode, System, SystemError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GroupoidError {
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Cantor(#[from] CantorError),
    #[error("not a bisection: {reason} (at {witness})")]
    NotBisection { reason: String, witness: String },
    #[error("slice {g} is undefined at {point}, which lies in its source")]
    UndefinedSource { g: GroupElement, point: String },
    #[error("arrows from different fibers")]
    MixedFibers,
    #[error("empty set of arrows")]
    Empty,
    #[error("search exhausted its cap of {cap}")]
    SearchExhausted { cap: u64 },
    #[error("no free neighbourhood of {point} up to depth {depth}: {reason}")]
    NotFree { point: String, depth: usize, reason: String },
    #[error("{0}")]
    Precondition(String),
}

pub type Result<T> = std::result::Result<T, GroupoidError>;

/// Whether `p` lies in `set`.
pub fn point_in(system: &System, set: &ClopenSet, p: &PointCode) -> Result<bool> {
    if set.is_empty() {
        return Ok(false);
    }
    let w = system.word(p, set.max_depth())?;
    Ok(set.contains_word(&w))
}

/// `{(g·x, g, x) : x ∈ src}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slice {
    pub g: GroupElement,
    pub src: ClopenSet,
}

impl Slice {
    pub fn new(system: &System, g: GroupElement, src: ClopenSet) -> Result<Self> {
        check_defined(system, g, &src)?;
        Ok(Self { g, src })
    }

    pub fn range(&self, system: &System) -> Result<ClopenSet> {
        Ok(system.act_on_set(self.g, &self.src)?)
    }
}

impl Serialize for Slice {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("Slice", 2)?;
        st.serialize_field("g", &self.g)?;
        st.serialize_field("src", &self.src)?;
        st.end()
    }
}

/// Slice as read back from JSON, before it is tied to a system.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub g: GroupElement,
    pub src: Vec<String>,
}

impl SliceRecord {
    pub fn to_slice(&self, system: &System) -> Result<Slice> {
        let words: Vec<&str> = self.src.iter().map(String::as_str).collect();
        let src = system.tree().set_from_words(&words)?;
        Slice::new(system, self.g, src)
    }
}

/// Whether `g` is defined at every point of `set`.
pub fn defined_on(system: &System, g: GroupElement, set: &ClopenSet) -> Result<bool> {
    Ok(check_defined(system, g, set).is_ok())
}

fn check_defined(system: &System, g: GroupElement, src: &ClopenSet) -> Result<()> {
    for x in system.undefined_points(g)? {
        if point_in(system, src, &x)? {
            return Err(GroupoidError::UndefinedSource { g, point: x.to_string() });
        }
    }
    Ok(())
}

/// A compact open bisection: slices with disjoint sources and disjoint ranges.
///
/// Slices with the same group element are merged, so the representation is
/// canonical.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Bisection {
    slices: BTreeMap<GroupElement, ClopenSet>,
}

impl Serialize for Bisection {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let list: Vec<Slice> = self.slices().collect();
        list.serialize(s)
    }
}

impl Bisection {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The unit slice over `set`.
    pub fn identity(system: &System, set: ClopenSet) -> Self {
        let mut slices = BTreeMap::new();
        if !set.is_empty() {
            slices.insert(GroupElement::zero(system.rank()), set);
        }
        Self { slices }
    }

    pub fn slice(system: &System, g: GroupElement, src: ClopenSet) -> Result<Self> {
        Self::from_slices(system, vec![Slice::new(system, g, src)?])
    }

    /// Builds and validates a bisection.
    pub fn from_slices(system: &System, slices: Vec<Slice>) -> Result<Self> {
        let b = Self::from_slices_unchecked(system, slices)?;
        b.validate(system)?;
        Ok(b)
    }

    /// Merges slices without checking injectivity of source and range.
    pub fn from_slices_unchecked(system: &System, slices: Vec<Slice>) -> Result<Self> {
        let tree = system.tree();
        let mut map: BTreeMap<GroupElement, ClopenSet> = BTreeMap::new();
        for s in slices {
            if s.src.is_empty() {
                continue;
            }
            check_defined(system, s.g, &s.src)?;
            match map.get_mut(&s.g) {
                Some(prev) => {
                    if !tree.is_disjoint(prev, &s.src)? {
                        return Err(GroupoidError::NotBisection {
                            reason: format!("two slices for {} overlap", s.g),
                            witness: tree.intersect(prev, &s.src)?.to_string(),
                        });
                    }
                    *prev = tree.union(prev, &s.src)?;
                }
                None => {
                    map.insert(s.g, s.src);
                }
            }
        }
        Ok(Self { slices: map })
    }

    pub fn from_records(system: &System, records: &[SliceRecord]) -> Result<Self> {
        let slices = records.iter().map(|r| r.to_slice(system)).collect::<Result<Vec<_>>>()?;
        Self::from_slices(system, slices)
    }

    /// Checks that sources and ranges are pairwise disjoint.
    pub fn validate(&self, system: &System) -> Result<()> {
        let tree = system.tree();
        let entries: Vec<(&GroupElement, &ClopenSet)> = self.slices.iter().collect();
        let ranges: Vec<ClopenSet> =
            entries.iter().map(|(g, s)| system.act_on_set(**g, s)).collect::<std::result::Result<_, _>>()?;
        for i in 0..entries.len() {
            for j in i + 1..entries.len() {
                let both = tree.intersect(entries[i].1, entries[j].1)?;
                if !both.is_empty() {
                    return Err(GroupoidError::NotBisection {
                        reason: format!("sources of {} and {} overlap", entries[i].0, entries[j].0),
                        witness: both.to_string(),
                    });
                }
                let both = tree.intersect(&ranges[i], &ranges[j])?;
                if !both.is_empty() {
                    return Err(GroupoidError::NotBisection {
                        reason: format!("ranges of {} and {} overlap", entries[i].0, entries[j].0),
                        witness: both.to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn slices(&self) -> impl Iterator<Item = Slice> + '_ {
        self.slices.iter().map(|(g, src)| Slice { g: *g, src: src.clone() })
    }

    pub fn elements(&self) -> impl Iterator<Item = (&GroupElement, &ClopenSet)> {
        self.slices.iter()
    }

    pub fn num_slices(&self) -> usize {
        self.slices.len()
    }

    /// Longest group element used.
    pub fn max_length(&self) -> u64 {
        self.slices.keys().map(GroupElement::length).max().unwrap_or(0)
    }

    /// Deepest source cell.
    pub fn depth(&self) -> usize {
        self.slices.values().map(ClopenSet::max_depth).max().unwrap_or(0)
    }

    pub fn source(&self, tree: &PartitionTree) -> Result<ClopenSet> {
        Ok(tree.union_all(self.slices.values())?)
    }

    pub fn range(&self, system: &System) -> Result<ClopenSet> {
        let mut parts = Vec::with_capacity(self.slices.len());
        for (g, s) in &self.slices {
            parts.push(system.act_on_set(*g, s)?);
        }
        Ok(system.tree().union_all(parts.iter())?)
    }

    pub fn inverse(&self, system: &System) -> Result<Self> {
        let mut slices = BTreeMap::new();
        for (g, s) in &self.slices {
            slices.insert(-*g, system.act_on_set(*g, s)?);
        }
        Ok(Self { slices })
    }

    /// `self ∘ other`: first `other`, then `self`.
    pub fn compose(&self, system: &System, other: &Self) -> Result<Self> {
        let tree = system.tree();
        let mut parts: BTreeMap<GroupElement, Vec<ClopenSet>> = BTreeMap::new();
        for (g2, s2) in &other.slices {
            for (g1, s1) in &self.slices {
                let pre = system.act_on_set(-*g2, s1)?;
                let src = tree.intersect(s2, &pre)?;
                if !src.is_empty() {
                    parts.entry(*g1 + *g2).or_default().push(src);
                }
            }
        }
        let mut slices = BTreeMap::new();
        for (g, sets) in parts {
            slices.insert(g, tree.union_all(sets.iter())?);
        }
        let out = Self { slices };
        debug_assert!(out.validate(system).is_ok(), "composite of bisections failed validation");
        Ok(out)
    }

    /// Restriction to sources inside `set`.
    pub fn restrict_source(&self, system: &System, set: &ClopenSet) -> Result<Self> {
        let tree = system.tree();
        let mut slices = BTreeMap::new();
        for (g, s) in &self.slices {
            let t = tree.intersect(s, set)?;
            if !t.is_empty() {
                slices.insert(*g, t);
            }
        }
        Ok(Self { slices })
    }

    /// Restriction to ranges inside `set`.
    pub fn restrict_range(&self, system: &System, set: &ClopenSet) -> Result<Self> {
        let tree = system.tree();
        let mut slices = BTreeMap::new();
        for (g, s) in &self.slices {
            let pre = system.act_on_set(-*g, set)?;
            let t = tree.intersect(s, &pre)?;
            if !t.is_empty() {
                slices.insert(*g, t);
            }
        }
        Ok(Self { slices })
    }

    /// Image of the clopen set `set` (the part inside the source).
    pub fn image(&self, system: &System, set: &ClopenSet) -> Result<ClopenSet> {
        self.restrict_source(system, set)?.range(system)
    }

    /// Group element of the slice whose source contains `u`.
    pub fn element_at(&self, system: &System, u: &PointCode) -> Result<Option<GroupElement>> {
        for (g, s) in &self.slices {
            if point_in(system, s, u)? {
                return Ok(Some(*g));
            }
        }
        Ok(None)
    }

    pub fn apply(&self, system: &System, u: &PointCode) -> Result<Option<PointCode>> {
        match self.element_at(system, u)? {
            Some(g) => Ok(Some(system.act(g, u)?)),
            None => Ok(None),
        }
    }

    /// Slicewise containment of the underlying arrow sets.
    pub fn is_subset(&self, system: &System, other: &Self) -> Result<bool> {
        let tree = system.tree();
        for (g, s) in &self.slices {
            match other.slices.get(g) {
                Some(t) if tree.is_subset(s, t)? => {}
                _ => return Ok(false),
            }
        }
        Ok(true)
    }
}

/// A finite union of slices with no injectivity requirement.
///
/// On partial systems a slice stands for the arrows `(g, x)` with `x` in its
/// source and `g` defined at `x`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CompactSet {
    slices: Vec<Slice>,
}

impl CompactSet {
    pub fn new(slices: Vec<Slice>) -> Self {
        Self { slices }
    }

    /// Unit slice over the whole space.
    pub fn unit(system: &System) -> Self {
        Self::ball(system, 0)
    }

    /// All arrows of length at most `radius`.
    pub fn ball(system: &System, radius: u64) -> Self {
        let whole = system.tree().whole();
        let slices =
            GroupElement::ball(system.rank(), radius).into_iter().map(|g| Slice { g, src: whole.clone() }).collect();
        Self { slices }
    }

    pub fn slices(&self) -> &[Slice] {
        &self.slices
    }

    pub fn radius(&self) -> u64 {
        self.slices.iter().map(|s| s.g.length()).max().unwrap_or(0)
    }

    pub fn depth(&self) -> usize {
        self.slices.iter().map(|s| s.src.max_depth()).max().unwrap_or(0)
    }

    /// Whether every slice has the whole space as source.
    pub fn is_full_sourced(&self) -> bool {
        self.slices.iter().all(|s| s.src.is_whole())
    }

    pub fn inverse(&self, system: &System) -> Result<Self> {
        let mut slices = Vec::with_capacity(self.slices.len());
        for s in &self.slices {
            slices.push(Slice { g: -s.g, src: system.act_on_set(s.g, &s.src)? });
        }
        Ok(Self { slices })
    }

    /// Elements `k` with an arrow `(k, v)` in the set.
    pub fn elements_at(&self, system: &System, v: &PointCode) -> Result<BTreeSet<GroupElement>> {
        let mut out = BTreeSet::new();
        for s in &self.slices {
            if out.contains(&s.g) {
                continue;
            }
            if point_in(system, &s.src, v)? && system.is_defined(s.g, v)? {
                out.insert(s.g);
            }
        }
        Ok(out)
    }
}

/// A single arrow `(g, base)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Arrow {
    pub g: GroupElement,
    pub base: PointCode,
}

/// A finite set of arrows sharing the source `base`, stored as group elements.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FiberSet {
    pub base: PointCode,
    pub elements: BTreeSet<GroupElement>,
}

impl FiberSet {
    pub fn new(base: PointCode, elements: impl IntoIterator<Item = GroupElement>) -> Self {
        Self { base, elements: elements.into_iter().collect() }
    }

    pub fn from_arrows(arrows: &[Arrow]) -> Result<Self> {
        let first = arrows.first().ok_or(GroupoidError::Empty)?;
        if arrows.iter().any(|a| a.base != first.base) {
            return Err(GroupoidError::MixedFibers);
        }
        Ok(Self::new(first.base.clone(), arrows.iter().map(|a| a.g)))
    }

    pub fn arrows(&self) -> Vec<Arrow> {
        self.elements.iter().map(|g| Arrow { g: *g, base: self.base.clone() }).collect()
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// `F·g`: right translation by an arrow `(g, v)` with `g·v = base`.
    pub fn right_translate(&self, system: &System, g: GroupElement) -> Result<Self> {
        let v = system.act(-g, &self.base)?;
        Ok(Self::new(v, self.elements.iter().map(|h| *h + g)))
    }

    pub fn ranges(&self, system: &System) -> Result<Vec<PointCode>> {
        self.elements.iter().map(|g| Ok(system.act(*g, &self.base)?)).collect()
    }
}

/// Closed ball of radius `radius` in the fiber of `u`, by breadth-first
/// search over generators so that undefined steps are never crossed.
pub fn fiber_ball(system: &System, u: &PointCode, radius: u64) -> Result<FiberSet> {
    let u = system.normalize_point(u)?;
    let mut seen = BTreeSet::new();
    let zero = GroupElement::zero(system.rank());
    seen.insert(zero);
    let mut queue = VecDeque::from([(zero, u.clone(), 0u64)]);
    let gens = GroupElement::generators(system.rank());
    while let Some((g, p, d)) = queue.pop_front() {
        if d == radius {
            continue;
        }
        for s in &gens {
            let h = g + *s;
            if seen.contains(&h) {
                continue;
            }
            if let Some(q) = system.try_act(*s, &p)? {
                seen.insert(h);
                queue.push_back((h, q, d + 1));
            }
        }
    }
    Ok(FiberSet { base: u, elements: seen })
}

/// `K·F` inside the fiber of `F`.
pub fn k_apply(system: &System, k: &CompactSet, f: &FiberSet) -> Result<BTreeSet<GroupElement>> {
    let mut out = BTreeSet::new();
    for h in &f.elements {
        let v = system.act(*h, &f.base)?;
        for kk in k.elements_at(system, &v)? {
            out.insert(kk + *h);
        }
    }
    Ok(out)
}

/// Outer, inner and full K-boundaries of a fiber set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Boundary {
    pub outer: BTreeSet<GroupElement>,
    pub inner: BTreeSet<GroupElement>,
    pub full: BTreeSet<GroupElement>,
}

pub fn k_boundary(system: &System, k: &CompactSet, f: &FiberSet) -> Result<Boundary> {
    let mut outer = BTreeSet::new();
    let mut inner = BTreeSet::new();
    for h in &f.elements {
        let v = system.act(*h, &f.base)?;
        for kk in k.elements_at(system, &v)? {
            let t = kk + *h;
            if !f.elements.contains(&t) {
                outer.insert(t);
                inner.insert(*h);
            }
        }
    }
    let full = outer.union(&inner).copied().collect();
    Ok(Boundary { outer, inner, full })
}

/// The three Følner ratios of a fiber set and their verdicts at `epsilon`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FolnerReport {
    pub size: usize,
    pub epsilon: f64,
    /// `|∂_K F| / |F|`.
    pub boundary_ratio: FracJson,
    /// `|KF| / |F|`, compared with `1 + ε`.
    pub growth_ratio: FracJson,
    /// `|KF ∖ F| / |F|`.
    pub difference_ratio: FracJson,
    pub boundary_ok: bool,
    pub growth_ok: bool,
    pub difference_ok: bool,
}

/// Which Følner inequality a construction certifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// `|∂_K F| ≤ ε|F|`.
    Boundary,
    /// `|KF ∖ F| ≤ ε|F|`.
    Difference,
    /// `|KF| ≤ (1+ε)|F|`.
    Growth,
}

impl FolnerReport {
    pub fn holds(&self, criterion: Criterion) -> bool {
        match criterion {
            Criterion::Boundary => self.boundary_ok,
            Criterion::Difference => self.difference_ok,
            Criterion::Growth => self.growth_ok,
        }
    }

    pub fn ratio(&self, criterion: Criterion) -> Frac {
        match criterion {
            Criterion::Boundary => self.boundary_ratio.0,
            Criterion::Difference => self.difference_ratio.0,
            Criterion::Growth => self.growth_ratio.0,
        }
    }
}

pub fn is_folner(system: &System, k: &CompactSet, epsilon: f64, f: &FiberSet) -> Result<FolnerReport> {
    if f.is_empty() {
        return Err(GroupoidError::Empty);
    }
    let b = k_boundary(system, k, f)?;
    let kf = k_apply(system, k, f)?;
    Ok(folner_report(f.len(), b.full.len(), kf.len(), b.outer.len(), epsilon))
}

pub(crate) fn folner_report(size: usize, boundary: usize, grown: usize, outer: usize, epsilon: f64) -> FolnerReport {
    let boundary_ratio = frac(boundary, size);
    let growth_ratio = frac(grown, size);
    let difference_ratio = frac(outer, size);
    FolnerReport {
        size,
        epsilon,
        boundary_ratio: FracJson(boundary_ratio),
        growth_ratio: FracJson(growth_ratio),
        difference_ratio: FracJson(difference_ratio),
        boundary_ok: frac_le(&boundary_ratio, epsilon),
        growth_ok: frac_le(&(growth_ratio - Frac::from(1)), epsilon) || growth_ratio <= Frac::from(1),
        difference_ok: frac_le(&difference_ratio, epsilon),
    }
}

/// Shape family explored by [`folner_search`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Interval,
    Box,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FolnerWitness {
    pub shape: Shape,
    /// Side lengths of the interval or box.
    pub sides: Vec<u64>,
    pub set: FiberSet,
    pub report: FolnerReport,
    pub candidates_tried: u64,
}

pub const DEFAULT_SEARCH_CAP: u64 = 4096;

/// Smallest interval (rank 1) or box (rank 2) containing `L·u` that is
/// `(K, ε)`-Følner in the growth sense. `cap` bounds the side length.
pub fn folner_search(
    system: &System,
    u: &PointCode,
    k: &CompactSet,
    epsilon: f64,
    l: &CompactSet,
    cap: u64,
) -> Result<FolnerWitness> {
    let u = system.normalize_point(u)?;
    let mut core = l.elements_at(system, &u)?;
    core.insert(GroupElement::zero(system.rank()));
    let rank = system.rank();
    let lo: Vec<i64> = (0..rank).map(|i| core.iter().map(|g| g.coord(i)).min().unwrap()).collect();
    let hi: Vec<i64> = (0..rank).map(|i| core.iter().map(|g| g.coord(i)).max().unwrap()).collect();
    let min_side: Vec<u64> = (0..rank).map(|i| (hi[i] - lo[i] + 1) as u64).collect();
    let mut tried = 0u64;
    let mut check = |sides: &[u64], start: &[i64]| -> Result<Option<FolnerWitness>> {
        tried += 1;
        let elems: Vec<GroupElement> = match rank {
            1 => (0..sides[0] as i64).map(|a| GroupElement::z(start[0] + a)).collect(),
            _ => (0..sides[0] as i64)
                .flat_map(|a| (0..sides[1] as i64).map(move |b| GroupElement::z2(start[0] + a, start[1] + b)))
                .collect(),
        };
        for g in &elems {
            if !system.is_defined(*g, &u)? {
                return Ok(None);
            }
        }
        let f = FiberSet::new(u.clone(), elems);
        let report = is_folner(system, k, epsilon, &f)?;
        if report.growth_ok {
            let shape = if rank == 1 { Shape::Interval } else { Shape::Box };
            return Ok(Some(FolnerWitness { shape, sides: sides.to_vec(), set: f, report, candidates_tried: tried }));
        }
        Ok(None)
    };
    match rank {
        1 => {
            for n in min_side[0]..=cap.max(min_side[0]) {
                let slack = (n - min_side[0]) as i64;
                for shift in 0..=slack {
                    if let Some(w) = check(&[n], &[lo[0] - slack + shift])? {
                        return Ok(w);
                    }
                }
            }
        }
        2 => {
            let mut shapes: Vec<(u64, u64)> = Vec::new();
            for a in min_side[0]..=cap.max(min_side[0]) {
                for b in min_side[1]..=cap.max(min_side[1]) {
                    shapes.push((a, b));
                }
            }
            shapes.sort_by_key(|&(a, b)| (a * b, a.abs_diff(b), a, b));
            for (a, b) in shapes {
                let sa = (a - min_side[0]) as i64;
                let sb = (b - min_side[1]) as i64;
                for da in 0..=sa {
                    for db in 0..=sb {
                        if let Some(w) = check(&[a, b], &[lo[0] - sa + da, lo[1] - sb + db])? {
                            return Ok(w);
                        }
                    }
                }
            }
        }
        _ => return Err(GroupoidError::Precondition(format!("rank {rank} is not searched"))),
    }
    Err(GroupoidError::SearchExhausted { cap })
}

/// A cylinder around a unit whose translates by the ball are disjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSlice {
    pub base: ClopenSet,
    pub depth: usize,
    /// Ball elements in increasing order; index 0 is the identity.
    pub elements: Vec<GroupElement>,
    pub base_index: usize,
}

/// Smallest base cylinder `V ∋ u` such that every element of the radius-`R`
/// ball is defined on `V` and the translates of `V` are pairwise disjoint.
pub fn local_slice(system: &System, u: &PointCode, radius: u64) -> Result<LocalSlice> {
    let u = system.normalize_point(u)?;
    let ball = fiber_ball(system, &u, radius)?;
    let full = GroupElement::ball(system.rank(), radius);
    if ball.len() != full.len() {
        let missing: Vec<String> = full.iter().filter(|g| !ball.elements.contains(g)).map(|g| g.to_string()).collect();
        return Err(GroupoidError::NotFree {
            point: u.to_string(),
            depth: 0,
            reason: format!("ball is cut by undefined steps, missing {}", missing.join(" ")),
        });
    }
    let tree = system.tree();
    let mut elements: Vec<GroupElement> = ball.elements.iter().copied().collect();
    elements.sort_by_key(|g| (g.length(), *g));
    let cap = tree.depth_cap();
    let mut last_reason = String::from("depth cap reached");
    for depth in 0..=cap {
        let base = tree.set(vec![system.cell_of(&u, depth)?])?;
        let mut ok = true;
        for g in &elements {
            if check_defined(system, *g, &base).is_err() {
                ok = false;
                last_reason = format!("{g} undefined inside {base}");
                break;
            }
        }
        if !ok {
            continue;
        }
        let mut images: Vec<ClopenSet> = Vec::with_capacity(elements.len());
        for g in &elements {
            let img = match system.act_on_set(*g, &base) {
                Ok(s) => s,
                Err(SystemError::Cantor(CantorError::Capacity { .. })) => {
                    last_reason = "depth cap reached".into();
                    ok = false;
                    break;
                }
                Err(e) => return Err(e.into()),
            };
            if let Some(prev) = images.iter().position(|p| !tree.is_disjoint(p, &img).unwrap_or(false)) {
                ok = false;
                last_reason = format!("translates by {} and {g} meet", elements[prev]);
                break;
            }
            images.push(img);
        }
        if ok {
            return Ok(LocalSlice { base, depth, elements, base_index: 0 });
        }
    }
    Err(GroupoidError::NotFree { point: u.to_string(), depth: cap, reason: last_reason })
}

/// `‖K‖`: the largest number of slices whose sources share a point.
pub fn norm_of(system: &System, k: &CompactSet) -> Result<usize> {
    let tree = system.tree();
    let depth = k.depth();
    let mut counts: BTreeMap<Cell, BTreeSet<GroupElement>> = BTreeMap::new();
    for s in k.slices() {
        for c in tree.refine(&s.src, depth)? {
            counts.entry(c).or_default().insert(s.g);
        }
    }
    Ok(counts.values().map(BTreeSet::len).max().unwrap_or(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::SystemSpec;
    use proptest::prelude::*;

    fn odometer() -> System {
        SystemSpec::odometer(2).build().unwrap()
    }

    fn fib() -> System {
        SystemSpec::fibonacci().build().unwrap()
    }

    fn z2() -> System {
        SystemSpec::Product { factors: vec![SystemSpec::odometer(2), SystemSpec::odometer(2)] }.build().unwrap()
    }

    fn partial_odometer() -> System {
        SystemSpec::Partial {
            base: Some(2),
            rules: None,
            removed: vec![PointCode::digits(vec![], vec![0])],
        }
        .build()
        .unwrap()
    }

    fn zeros() -> PointCode {
        PointCode::digits(vec![], vec![0])
    }

    fn set(sys: &System, words: &[&str]) -> ClopenSet {
        sys.tree().set_from_words(words).unwrap()
    }

    #[test]
    fn composing_two_unit_steps_on_the_odometer() {
        let sys = odometer();
        let a = Bisection::slice(&sys, GroupElement::z(1), set(&sys, &["0"])).unwrap();
        let b = Bisection::slice(&sys, GroupElement::z(1), set(&sys, &["1"])).unwrap();
        let c = a.compose(&sys, &b).unwrap();
        // enumerate depth-2 cells x ∈ [1] and keep those with x+1 ∈ [0]
        let tree = sys.tree();
        let mut cells = Vec::new();
        for cell in tree.cells_at_depth(2).unwrap() {
            let x = PointCode::digits(cell.word().to_vec(), vec![0]);
            let y = sys.act(GroupElement::z(1), &x).unwrap();
            if cell.word()[0] == 1 && sys.word(&y, 1).unwrap() == [0] {
                cells.push(cell);
            }
        }
        let want = Bisection::slice(&sys, GroupElement::z(2), tree.set(cells).unwrap()).unwrap();
        assert_eq!(c, want);
        assert_eq!(c.source(tree).unwrap(), set(&sys, &["1"]));
        assert!(a.compose(&sys, &Bisection::empty()).unwrap().is_empty());
        let inv = c.inverse(&sys).unwrap();
        let unit = c.compose(&sys, &inv).unwrap();
        assert_eq!(unit, Bisection::identity(&sys, c.range(&sys).unwrap()));
    }

    #[test]
    fn overlapping_ranges_are_rejected() {
        let sys = odometer();
        let s1 = Slice::new(&sys, GroupElement::z(0), set(&sys, &["1"])).unwrap();
        let s2 = Slice::new(&sys, GroupElement::z(1), set(&sys, &["00"])).unwrap();
        let err = Bisection::from_slices(&sys, vec![s1, s2]).unwrap_err();
        assert!(matches!(err, GroupoidError::NotBisection { .. }), "{err}");
    }

    #[test]
    fn ball_sizes() {
        let sys = fib();
        let u = sys.free_unit();
        assert_eq!(fiber_ball(&sys, &u, 2).unwrap().len(), 5);
        let p = z2();
        assert_eq!(fiber_ball(&p, &p.free_unit(), 1).unwrap().len(), 5);
        let part = partial_odometer();
        // +1 is undefined at the removed point
        let b = fiber_ball(&part, &zeros(), 1).unwrap();
        assert_eq!(b.elements, [GroupElement::z(-1), GroupElement::z(0)].into_iter().collect());
    }

    #[test]
    fn boundaries_of_an_interval() {
        let sys = odometer();
        let k = CompactSet::ball(&sys, 1);
        let f = FiberSet::new(zeros(), (0..10).map(GroupElement::z));
        let b = k_boundary(&sys, &k, &f).unwrap();
        assert_eq!(b.outer, [-1, 10].into_iter().map(GroupElement::z).collect());
        assert_eq!(b.inner, [0, 9].into_iter().map(GroupElement::z).collect());
        assert_eq!(b.full.len(), 4);
        let unit = CompactSet::unit(&sys);
        let b = k_boundary(&sys, &unit, &f).unwrap();
        assert!(b.full.is_empty());
        let ball = fiber_ball(&sys, &zeros(), 5).unwrap();
        let r = is_folner(&sys, &k, 0.5, &ball).unwrap();
        assert_eq!(r.boundary_ratio.0, frac(4, 11));
        assert_eq!(r.difference_ratio.0, frac(2, 11));
    }

    #[test]
    fn interval_ratios() {
        let sys = fib();
        let k = CompactSet::ball(&sys, 1);
        let f = FiberSet::new(sys.free_unit(), (0..32).map(GroupElement::z));
        let r = is_folner(&sys, &k, 0.1, &f).unwrap();
        assert_eq!(r.difference_ratio.0, frac(1, 16));
        assert!(r.difference_ok && r.growth_ok);
        assert_eq!(r.boundary_ratio.0, frac(4, 32));
        assert!(!r.boundary_ok);
        let single = FiberSet::new(sys.free_unit(), [GroupElement::z(0)]);
        let r = is_folner(&sys, &CompactSet::unit(&sys), 0.0, &single).unwrap();
        assert!(r.boundary_ok && r.difference_ok && r.growth_ok);
    }

    /// Smallest `n` with `n + 2 ≤ (1+ε)n`, found by counting.
    fn smallest_interval(eps: f64) -> u64 {
        (1..).find(|&n: &u64| (n + 2) as f64 <= (1.0 + eps) * n as f64).unwrap()
    }

    /// Smallest-area box with `ab + 2a + 2b ≤ (1+ε)ab`, by enumeration.
    fn smallest_box(eps: f64) -> u64 {
        let mut best = u64::MAX;
        for a in 1..64u64 {
            for b in 1..64u64 {
                let kf = a * b + 2 * a + 2 * b;
                if kf as f64 <= (1.0 + eps) * (a * b) as f64 {
                    best = best.min(a * b);
                }
            }
        }
        best
    }

    #[test]
    fn search_finds_smallest_shapes() {
        let sys = odometer();
        let k = CompactSet::ball(&sys, 1);
        let l = CompactSet::unit(&sys);
        let w = folner_search(&sys, &zeros(), &k, 0.1, &l, 256).unwrap();
        assert_eq!(w.sides, vec![smallest_interval(0.1)]);
        assert_eq!(w.sides, vec![20]);
        let w = folner_search(&sys, &zeros(), &k, 2.0, &l, 256).unwrap();
        assert_eq!(w.set.len(), 1);

        let p = z2();
        let k2 = CompactSet::ball(&p, 1);
        let w = folner_search(&p, &p.free_unit(), &k2, 0.5, &CompactSet::unit(&p), 32).unwrap();
        assert_eq!(w.sides[0] * w.sides[1], smallest_box(0.5));
        assert_eq!(w.sides, vec![8, 8]);

        let err = folner_search(&sys, &zeros(), &k, 0.01, &l, 50).unwrap_err();
        assert_eq!(err, GroupoidError::SearchExhausted { cap: 50 });
    }

    #[test]
    fn search_contains_the_core() {
        let sys = fib();
        let k = CompactSet::ball(&sys, 1);
        let l = CompactSet::ball(&sys, 7);
        let w = folner_search(&sys, &sys.free_unit(), &k, 0.1, &l, 256).unwrap();
        assert!((-7..=7).all(|i| w.set.elements.contains(&GroupElement::z(i))));
        assert_eq!(w.set.len(), 20);
    }

    #[test]
    fn local_slices() {
        let sys = odometer();
        let s = local_slice(&sys, &zeros(), 1).unwrap();
        assert_eq!(s.elements.len(), 3);
        // translates of [00] by -1, 0, 1 are [11], [00], [10]
        assert_eq!(s.depth, 2);
        let s0 = local_slice(&sys, &zeros(), 0).unwrap();
        assert_eq!(s0.depth, 0);
        assert_eq!(s0.elements.len(), 1);

        let f = fib();
        let s = local_slice(&f, &f.free_unit(), 1).unwrap();
        assert_eq!(s.elements.len(), 3);
        let tree = f.tree();
        let imgs: Vec<ClopenSet> = s.elements.iter().map(|g| f.act_on_set(*g, &s.base).unwrap()).collect();
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(tree.is_disjoint(&imgs[i], &imgs[j]).unwrap());
            }
        }
        // a shallower base always has meeting translates
        let shallow = tree.set(vec![f.cell_of(&f.free_unit(), s.depth - 1).unwrap()]).unwrap();
        let a = f.act_on_set(GroupElement::z(1), &shallow).unwrap();
        let b = f.act_on_set(GroupElement::z(-1), &shallow).unwrap();
        let c = shallow.clone();
        assert!(
            !tree.is_disjoint(&a, &b).unwrap() || !tree.is_disjoint(&a, &c).unwrap() || !tree.is_disjoint(&b, &c).unwrap()
        );

        let part = partial_odometer();
        assert!(matches!(local_slice(&part, &zeros(), 1), Err(GroupoidError::NotFree { .. })));
    }

    #[test]
    fn norms() {
        let sys = odometer();
        assert_eq!(norm_of(&sys, &CompactSet::ball(&sys, 1)).unwrap(), 3);
        let k = CompactSet::new(vec![
            Slice::new(&sys, GroupElement::z(1), set(&sys, &["0"])).unwrap(),
            Slice::new(&sys, GroupElement::z(5), set(&sys, &["1"])).unwrap(),
        ]);
        assert_eq!(norm_of(&sys, &k).unwrap(), 1);
        let p = z2();
        let count = (-2i64..=2).flat_map(|a| (-2i64..=2).map(move |b| (a, b))).filter(|(a, b)| a.abs() + b.abs() <= 2);
        assert_eq!(norm_of(&p, &CompactSet::ball(&p, 2)).unwrap(), count.count());
    }

    #[test]
    fn mixed_fibers_are_rejected() {
        let arrows = vec![
            Arrow { g: GroupElement::z(0), base: zeros() },
            Arrow { g: GroupElement::z(1), base: PointCode::digits(vec![1], vec![0]) },
        ];
        assert_eq!(FiberSet::from_arrows(&arrows).unwrap_err(), GroupoidError::MixedFibers);
    }

    #[test]
    fn partial_slices_must_avoid_undefined_points() {
        let part = partial_odometer();
        let err = Slice::new(&part, GroupElement::z(1), part.tree().whole()).unwrap_err();
        assert!(matches!(err, GroupoidError::UndefinedSource { .. }));
        assert!(Slice::new(&part, GroupElement::z(1), set(&part, &["1"])).is_ok());
    }

    fn interval(lo: i64, len: i64) -> Vec<GroupElement> {
        (lo..lo + len).map(GroupElement::z).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn right_translation_preserves_ratios(lo in -20i64..20, len in 1i64..40, shift in -30i64..30) {
            let sys = odometer();
            let k = CompactSet::ball(&sys, 1);
            let f = FiberSet::new(PointCode::digits(vec![1, 0, 1], vec![0, 1]), interval(lo, len));
            let g = f.right_translate(&sys, GroupElement::z(shift)).unwrap();
            let a = is_folner(&sys, &k, 0.1, &f).unwrap();
            let b = is_folner(&sys, &k, 0.1, &g).unwrap();
            prop_assert_eq!(a.boundary_ratio, b.boundary_ratio);
            prop_assert_eq!(a.growth_ratio, b.growth_ratio);
        }

        #[test]
        fn perturbation_bound(len in 10i64..60, drop in proptest::collection::btree_set(0i64..60, 0..4)) {
            let sys = odometer();
            let k = CompactSet::ball(&sys, 1);
            let f = FiberSet::new(zeros(), interval(0, len));
            let g = FiberSet::new(zeros(), interval(0, len).into_iter().filter(|x| !drop.contains(&x.coord(0))));
            prop_assume!(!g.is_empty());
            let sym = f.elements.symmetric_difference(&g.elements).count() as f64;
            let eps = (sym + 0.5) / len as f64;
            prop_assume!(eps < 1.0);
            let norm = norm_of(&sys, &k).unwrap() as f64;
            let growth_f = is_folner(&sys, &k, 0.0, &f).unwrap().growth_ratio.0;
            let growth_g = crate::report::frac_value(&is_folner(&sys, &k, 0.0, &g).unwrap().growth_ratio.0);
            let delta = crate::report::frac_value(&growth_f) - 1.0;
            prop_assert!(growth_g <= 1.0 + delta + eps * (2.0 + norm) / (1.0 - eps) + 1e-12);
        }

        #[test]
        fn compose_matches_pointwise(a in 0u8..8, b in 0u8..8, g1 in -5i64..5, g2 in -5i64..5, tail in 0u8..16) {
            let sys = odometer();
            let w = |v: u8| -> String { (0..3).map(|i| char::from(b'0' + ((v >> i) & 1))).collect() };
            let s1 = Bisection::slice(&sys, GroupElement::z(g1), set(&sys, &[&w(a)])).unwrap();
            let s2 = Bisection::slice(&sys, GroupElement::z(g2), set(&sys, &[&w(b)])).unwrap();
            let c = s1.compose(&sys, &s2).unwrap();
            let digits: Vec<u8> = (0..4).map(|i| (tail >> i) & 1).collect();
            let mut x = PointCode::digits(digits, vec![0]);
            for _ in 0..8 {
                let direct = s2.apply(&sys, &x).unwrap().and_then(|y| s1.apply(&sys, &y).unwrap());
                prop_assert_eq!(c.apply(&sys, &x).unwrap(), direct);
                x = sys.act(GroupElement::z(3), &x).unwrap();
            }
        }
    }
}
