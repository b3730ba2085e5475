//! Normal Følner sets: towers whose base levels partition the unit space,
//! the builders for them, validation, goodness and controlled height.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cantor::{CantorError, Cell, ClopenSet, PartitionVerdict};
use crate::castle::{validate_castle, validate_multisection, Castle, CastleError, Multisection, MultisectionRecord};
use crate::groupoid::{
    defined_on, folner_report, folner_search, is_folner, local_slice, point_in, CompactSet, Criterion, FiberSet,
    FolnerReport, GroupoidError, DEFAULT_SEARCH_CAP,
};
use crate::report::{frac, Frac, FracJson, SCHEMA_VERSION};
use crate::systems::{GroupElement, MeasureTable, PointCode, System, SystemError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FolnerError {
    #[error(transparent)]
    Castle(#[from] CastleError),
    #[error(transparent)]
    Groupoid(#[from] GroupoidError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Cantor(#[from] CantorError),
    #[error("no tower partition up to depth {depth}: cell {cell} still has meeting translates (periodicity suspected)")]
    TowerPartition { depth: usize, cell: String },
    #[error("no return from {cell} into {target} within {radius} steps (minimality not certified)")]
    NoReturn { cell: String, target: String, radius: i64 },
    #[error("measure bound not met up to the depth cap: {0}")]
    MeasureBound(String),
    #[error("construction failed validation: {0}")]
    Invalid(String),
    #[error("{0}")]
    Precondition(String),
}

pub type Result<T> = std::result::Result<T, FolnerError>;

/// Largest return time tried by first-return searches.
pub const RETURN_CAP: i64 = 1 << 14;

/// Multisection `tower` of the set, used with base label `base`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Part {
    pub tower: usize,
    pub base: usize,
}

/// The `(K, ε)` a set was certified for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certification {
    pub k_radius: u64,
    pub epsilon: f64,
    pub criterion: Criterion,
}

/// `S = ⋃_l ⊔_{i∈F_l} C^l_{i,i_l}`. Several parts may share one multisection
/// with different base labels, which is how reindexed castles are stored.
#[derive(Debug, Clone)]
pub struct NormalFolnerSet {
    towers: Vec<Multisection>,
    parts: Vec<Part>,
    pub method: String,
    pub certified: Option<Certification>,
    atoms: OnceLock<Vec<Vec<(ClopenSet, Vec<GroupElement>)>>>,
}

impl PartialEq for NormalFolnerSet {
    fn eq(&self, other: &Self) -> bool {
        self.towers == other.towers && self.parts == other.parts
    }
}

/// Units of `set` share the fiber `elements`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageClass {
    pub part: Option<usize>,
    pub set: ClopenSet,
    pub elements: BTreeSet<GroupElement>,
}

fn position(m: &Multisection, label: usize) -> Result<usize> {
    m.index().binary_search(&label).map_err(|_| FolnerError::Castle(CastleError::UnknownIndex(label)))
}

impl NormalFolnerSet {
    pub fn new(towers: Vec<Multisection>, parts: Vec<Part>, method: &str) -> Result<Self> {
        for p in &parts {
            let m = towers
                .get(p.tower)
                .ok_or_else(|| FolnerError::Precondition(format!("part refers to missing tower {}", p.tower)))?;
            position(m, p.base)?;
        }
        Ok(Self { towers, parts, method: method.to_string(), certified: None, atoms: OnceLock::new() })
    }

    pub fn towers(&self) -> &[Multisection] {
        &self.towers
    }

    pub fn parts(&self) -> &[Part] {
        &self.parts
    }

    /// Number of multisections `m`.
    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn multisection(&self, l: usize) -> &Multisection {
        &self.towers[self.parts[l].tower]
    }

    /// `|F_l|` for every part.
    pub fn sizes(&self) -> Vec<usize> {
        self.parts.iter().map(|p| self.towers[p.tower].len()).collect()
    }

    /// `h(S) = min |F_l|`.
    pub fn height(&self) -> usize {
        self.sizes().into_iter().min().unwrap_or(0)
    }

    /// `|F_l| ≤ N·h(S)` for all `l`.
    pub fn is_controlled(&self, n: usize) -> bool {
        let h = self.height();
        self.sizes().into_iter().all(|s| s <= n * h)
    }

    pub fn base_levels(&self, system: &System) -> Result<Vec<ClopenSet>> {
        self.parts.iter().map(|p| Ok(self.towers[p.tower].level(system, p.base)?)).collect()
    }

    pub fn depth(&self, system: &System) -> Result<usize> {
        let mut d = 0;
        for m in &self.towers {
            d = d.max(m.depth(system)?);
        }
        Ok(d)
    }

    fn tower_atoms(&self, system: &System) -> Result<&[Vec<(ClopenSet, Vec<GroupElement>)>]> {
        if let Some(a) = self.atoms.get() {
            return Ok(a);
        }
        let atoms = self.towers.iter().map(|m| m.atoms(system)).collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(self.atoms.get_or_init(|| atoms))
    }

    /// Pieces of the base levels on which `Su` is a fixed set of elements.
    pub fn fiber_classes(&self, system: &System) -> Result<Vec<StageClass>> {
        let atoms = self.tower_atoms(system)?;
        let mut out = Vec::new();
        for (l, part) in self.parts.iter().enumerate() {
            let p = position(&self.towers[part.tower], part.base)?;
            for (atom, elems) in &atoms[part.tower] {
                let gp = elems[p];
                let set = system.act_on_set(gp, atom)?;
                let elements = elems.iter().map(|g| *g - gp).collect();
                out.push(StageClass { part: Some(l), set, elements });
            }
        }
        Ok(out)
    }

    /// `Su`, read off the part whose base level contains `u`.
    pub fn fiber(&self, system: &System, u: &PointCode) -> Result<FiberSet> {
        let u = system.normalize_point(u)?;
        for part in &self.parts {
            let m = &self.towers[part.tower];
            if point_in(system, &m.level(system, part.base)?, &u)? {
                if let Some(f) = m.fiber(system, &u)? {
                    return Ok(f);
                }
            }
        }
        Ok(FiberSet::new(u, []))
    }

    /// Units `u` with `x ∈ r(Su)`.
    pub fn units_through(&self, system: &System, x: &PointCode) -> Result<Vec<PointCode>> {
        let x = system.normalize_point(x)?;
        let mut out = BTreeSet::new();
        for part in &self.parts {
            let m = &self.towers[part.tower];
            let (_, ladders) = m.anchor_and_ladders(system)?;
            let pb = position(m, part.base)?;
            for ladder in &ladders {
                for (g, src) in ladder.elements() {
                    let Some(v) = system.try_act(-*g, &x)? else { continue };
                    if point_in(system, src, &v)? {
                        if let Some(u) = ladders[pb].apply(system, &v)? {
                            out.insert(u);
                        }
                    }
                }
            }
        }
        Ok(out.into_iter().collect())
    }

    pub fn record(&self, system: &System) -> Result<NormalFolnerRecord> {
        let towers = self.towers.iter().map(|m| m.record(system)).collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(NormalFolnerRecord {
            schema_version: SCHEMA_VERSION,
            method: self.method.clone(),
            certified: self.certified.clone(),
            towers,
            parts: self.parts.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalFolnerRecord {
    pub schema_version: u32,
    pub method: String,
    pub certified: Option<Certification>,
    pub towers: Vec<MultisectionRecord>,
    pub parts: Vec<Part>,
}

impl NormalFolnerRecord {
    pub fn to_set(&self, system: &System) -> Result<NormalFolnerSet> {
        let towers = self.towers.iter().map(|m| m.to_multisection(system)).collect::<std::result::Result<Vec<_>, _>>()?;
        let mut s = NormalFolnerSet::new(towers, self.parts.clone(), &self.method)?;
        s.certified = self.certified.clone();
        Ok(s)
    }
}

/// Følner report of a fiber `elems` given, for each element `h`, the
/// `K`-elements with source `h·u`.
pub(crate) fn piece_report(elems: &BTreeSet<GroupElement>, ks: &[BTreeSet<GroupElement>], epsilon: f64) -> FolnerReport {
    let mut grown = BTreeSet::new();
    let mut outer = BTreeSet::new();
    let mut inner = 0usize;
    for (h, kh) in elems.iter().zip(ks) {
        let mut on_edge = false;
        for k in kh {
            let t = *k + *h;
            grown.insert(t);
            if !elems.contains(&t) {
                outer.insert(t);
                on_edge = true;
            }
        }
        inner += on_edge as usize;
    }
    folner_report(elems.len(), outer.len() + inner, grown.len(), outer.len(), epsilon)
}

/// Worst fiber ratio of a family of classes plus explicit exceptional fibers.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Worst {
    pub ratio: Frac,
    pub at: String,
    pub all_hold: bool,
}

pub(crate) fn worst_ratio(
    system: &System,
    classes: &[StageClass],
    exceptional: &[FiberSet],
    k: &CompactSet,
    epsilon: f64,
    criterion: Criterion,
) -> Result<Option<Worst>> {
    let mut worst: Option<Worst> = None;
    let mut note = |r: &FolnerReport, at: &dyn Fn() -> String| {
        let ratio = r.ratio(criterion);
        let holds = r.holds(criterion);
        match &mut worst {
            Some(w) => {
                w.all_hold &= holds;
                if ratio > w.ratio {
                    w.ratio = ratio;
                    w.at = at();
                }
            }
            None => worst = Some(Worst { ratio, at: at(), all_hold: holds }),
        }
    };
    for c in classes {
        if c.elements.is_empty() || c.set.is_empty() {
            continue;
        }
        for (piece, ks) in crate::castle::k_pieces(system, k, &c.set, &c.elements)? {
            let r = piece_report(&c.elements, &ks, epsilon);
            note(&r, &|| piece.to_string());
        }
    }
    for f in exceptional {
        if f.is_empty() {
            continue;
        }
        let r = is_folner(system, k, epsilon, f)?;
        note(&r, &|| f.base.to_string());
    }
    Ok(worst)
}

/// Outcome of [`validate_normal`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalVerdict {
    pub valid: bool,
    pub criterion: Criterion,
    pub epsilon: f64,
    pub depth: usize,
    pub worst_ratio: Option<FracJson>,
    pub worst_at: Option<String>,
    pub failure: Option<String>,
}

/// Fibers through the points where some element of `K` is undefined.
fn exceptional_fibers(system: &System, s: &NormalFolnerSet, k: &CompactSet) -> Result<Vec<FiberSet>> {
    let mut units = BTreeSet::new();
    for sl in k.slices() {
        for x in system.undefined_points(sl.g)? {
            units.extend(s.units_through(system, &x)?);
        }
    }
    units.into_iter().map(|u| s.fiber(system, &u)).collect()
}

/// Checks the four defining conditions of a normal `(K, ε)`-Følner set.
pub fn validate_normal(
    system: &System,
    s: &NormalFolnerSet,
    k: &CompactSet,
    epsilon: f64,
    criterion: Criterion,
) -> Result<NormalVerdict> {
    let mut verdict =
        NormalVerdict { valid: false, criterion, epsilon, depth: 0, worst_ratio: None, worst_at: None, failure: None };
    for (t, m) in s.towers.iter().enumerate() {
        let v = validate_multisection(system, m)?;
        verdict.depth = verdict.depth.max(v.depth);
        if let Some(violation) = v.violation {
            verdict.failure = Some(format!("multisection {t}: {violation}"));
            return Ok(verdict);
        }
    }
    let bases = s.base_levels(system)?;
    match system.tree().is_partition(&bases)? {
        PartitionVerdict::Partition => {}
        PartitionVerdict::Uncovered { cell } => {
            verdict.failure = Some(format!("cell {cell} lies in no base level"));
            return Ok(verdict);
        }
        PartitionVerdict::Overlap { cell, first, second } => {
            verdict.failure = Some(format!("base levels of parts {first} and {second} meet at {cell}"));
            return Ok(verdict);
        }
    }
    let classes = s.fiber_classes(system)?;
    for c in &classes {
        verdict.depth = verdict.depth.max(c.set.max_depth());
    }
    let exceptional = exceptional_fibers(system, s, k)?;
    let worst = worst_ratio(system, &classes, &exceptional, k, epsilon, criterion)?;
    if let Some(w) = worst {
        verdict.worst_ratio = Some(FracJson(w.ratio));
        verdict.worst_at = Some(w.at.clone());
        if !w.all_hold {
            verdict.failure = Some(format!("fiber ratio {} at {} exceeds ε", w.ratio, w.at));
            return Ok(verdict);
        }
    }
    verdict.valid = true;
    Ok(verdict)
}

fn positive_differences(elements: &[GroupElement]) -> Vec<GroupElement> {
    let mut out = BTreeSet::new();
    for a in elements {
        for b in elements {
            let d = *a - *b;
            if d.coords().iter().find(|c| **c != 0).is_some_and(|c| *c > 0) {
                out.insert(d);
            }
        }
    }
    out.into_iter().collect()
}

fn single(system: &System, cell: &Cell) -> Result<ClopenSet> {
    Ok(system.tree().set(vec![cell.clone()])?)
}

/// Whether every element is defined on `set` and the translates of `set`
/// are pairwise disjoint.
fn is_tower_base(system: &System, set: &ClopenSet, elements: &[GroupElement]) -> Result<bool> {
    let tree = system.tree();
    for g in elements {
        if !defined_on(system, *g, set)? {
            return Ok(false);
        }
    }
    if system.is_partial() {
        let mut images: Vec<ClopenSet> = Vec::with_capacity(elements.len());
        for g in elements {
            let img = system.act_on_set(*g, set)?;
            for prev in &images {
                if !tree.is_disjoint(prev, &img)? {
                    return Ok(false);
                }
            }
            images.push(img);
        }
        return Ok(true);
    }
    for d in positive_differences(elements) {
        if !tree.is_disjoint(set, &system.act_on_set(d, set)?)? {
            return Ok(false);
        }
    }
    Ok(true)
}

fn capacity_to_partition(e: SystemError, cell: &Cell) -> FolnerError {
    match e {
        SystemError::Cantor(CantorError::Capacity { cap, .. }) => {
            FolnerError::TowerPartition { depth: cap, cell: cell.to_string() }
        }
        e => e.into(),
    }
}

/// Breadth-first refinement of `region` into cells that are tower bases for
/// `elements`. Cells are visited by depth, then lexicographically.
pub fn tower_partition(system: &System, region: &ClopenSet, elements: &[GroupElement]) -> Result<Vec<Cell>> {
    let tree = system.tree();
    let mut queue: BTreeSet<(usize, Cell)> = region.cells().iter().map(|c| (c.depth(), c.clone())).collect();
    let mut out = Vec::new();
    while let Some((d, cell)) = queue.pop_first() {
        let set = single(system, &cell)?;
        let ok = is_tower_base(system, &set, elements).map_err(|e| match e {
            FolnerError::System(s) => capacity_to_partition(s, &cell),
            FolnerError::Groupoid(GroupoidError::System(s)) => capacity_to_partition(s, &cell),
            e => e,
        })?;
        if ok {
            out.push(cell);
            continue;
        }
        if d >= tree.depth_cap() {
            return Err(FolnerError::TowerPartition { depth: d, cell: cell.to_string() });
        }
        for c in tree.children(cell.word()) {
            queue.insert((d + 1, c));
        }
    }
    out.sort();
    Ok(out)
}

/// The canonical normal set `{(γx, γ, x) : x ∈ X, γ ∈ F}` cut along a tower
/// partition `{V_l}`: one multisection per `V_l`, based at the identity.
pub fn build_from_group_folner(system: &System, elements: &[GroupElement]) -> Result<NormalFolnerSet> {
    let zero = GroupElement::zero(system.rank());
    let mut f: Vec<GroupElement> = elements.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if !f.contains(&zero) {
        return Err(FolnerError::Precondition("the group Følner set must contain the identity".into()));
    }
    f.sort();
    let base = f.iter().position(|g| *g == zero).unwrap();
    let cells = tower_partition(system, &system.tree().whole(), &f)?;
    let mut towers = Vec::with_capacity(cells.len());
    for c in &cells {
        towers.push(Multisection::from_elements(system, single(system, c)?, &f)?);
    }
    let parts = (0..towers.len()).map(|t| Part { tower: t, base }).collect();
    NormalFolnerSet::new(towers, parts, "group")
}

/// Kakutani-Rokhlin castle of first return to the smallest cylinder around
/// the free unit whose return times are all at least `min_height`.
pub fn kakutani_rokhlin(system: &System, min_height: usize) -> Result<Castle> {
    if system.rank() != 1 || system.is_partial() {
        return Err(FolnerError::Precondition("first-return castles need a total Z-system".into()));
    }
    let tree = system.tree();
    let u = system.free_unit();
    for depth in 0..=tree.depth_cap() {
        let b = single(system, &system.cell_of(&u, depth)?)?;
        let mut remaining = b.clone();
        let mut returns: Vec<(ClopenSet, usize)> = Vec::new();
        let mut t = 1i64;
        while !remaining.is_empty() {
            if t > RETURN_CAP {
                return Err(FolnerError::NoReturn { cell: remaining.to_string(), target: b.to_string(), radius: RETURN_CAP });
            }
            let back = system.act_on_set(GroupElement::z(-t), &b)?;
            let hit = tree.intersect(&remaining, &back)?;
            if !hit.is_empty() {
                remaining = tree.difference(&remaining, &hit)?;
                returns.push((hit, t as usize));
            }
            t += 1;
        }
        if returns.first().is_some_and(|(_, h)| *h >= min_height) {
            let towers = returns
                .into_iter()
                .map(|(base, h)| Multisection::tower(system, base, h))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let castle = Castle::new(towers);
            let v = validate_castle(system, &castle)?;
            if let Some(violation) = v.violation {
                return Err(FolnerError::Invalid(violation.to_string()));
            }
            if !castle.footprint(system)?.is_whole() {
                return Err(FolnerError::Invalid("first-return castle does not cover the space".into()));
            }
            return Ok(castle);
        }
    }
    Err(FolnerError::TowerPartition { depth: tree.depth_cap(), cell: u.to_string() })
}

/// Every level of every multisection of a castle becomes a base: part
/// `(l, i)` is `C_l` with base label `i`.
pub fn reindex(castle: &Castle) -> Result<NormalFolnerSet> {
    let mut parts = Vec::new();
    for (t, m) in castle.multisections.iter().enumerate() {
        for &i in m.index() {
            parts.push(Part { tower: t, base: i });
        }
    }
    NormalFolnerSet::new(castle.multisections.clone(), parts, "reindexed")
}

/// First return from the cell `w` into `target`: the element `b` with
/// `b·w ⊆ target`, or the children of `w` when some translate straddles.
fn first_return(system: &System, w: &Cell, target: &ClopenSet) -> Result<std::result::Result<GroupElement, Vec<Cell>>> {
    let tree = system.tree();
    let set = single(system, w)?;
    for step in 1..=RETURN_CAP {
        for b in [step, -step] {
            let g = GroupElement::z(b);
            let img = system.act_on_set(g, &set).map_err(|e| capacity_to_partition(e, w))?;
            if tree.is_subset(&img, target)? {
                return Ok(Ok(g));
            }
            if !tree.is_disjoint(&img, target)? {
                if w.depth() >= tree.depth_cap() {
                    return Err(FolnerError::TowerPartition { depth: w.depth(), cell: w.to_string() });
                }
                return Ok(Err(tree.children(w.word())));
            }
        }
    }
    Err(FolnerError::NoReturn { cell: w.to_string(), target: target.to_string(), radius: RETURN_CAP })
}

/// The normal set of the first-return construction around a Følner interval
/// `d` at the free unit: the tower `(d, V)`, its translated copies based at
/// the other levels, and, for each cell `W` off the tower, the tower moved
/// by the first return `b` into `V` with the element `b` replaced by the
/// identity.
pub fn first_return_set(system: &System, d: &[GroupElement]) -> Result<NormalFolnerSet> {
    let tree = system.tree();
    let u = system.free_unit();
    let zero = GroupElement::zero(1);
    let mut d: Vec<GroupElement> = d.to_vec();
    d.sort();
    d.dedup();
    let p0 = d.iter().position(|g| *g == zero).ok_or_else(|| FolnerError::Precondition("Følner set misses 0".into()))?;
    let radius = d.iter().map(GroupElement::length).max().unwrap_or(0);
    let v = local_slice(system, &u, radius)?.base;
    let tower = Multisection::from_elements(system, v.clone(), &d)?;
    let footprint = tower.footprint(system)?;
    let mut towers = vec![tower];
    let mut parts = vec![Part { tower: 0, base: p0 }];
    for (i, gi) in d.iter().enumerate() {
        if i == p0 {
            continue;
        }
        let w = system.act_on_set(*gi, &v)?;
        let shifted: Vec<GroupElement> = d.iter().map(|g| *g - *gi).collect();
        towers.push(Multisection::from_elements(system, w, &shifted)?);
        parts.push(Part { tower: towers.len() - 1, base: i });
    }
    let outside = tree.complement(&footprint)?;
    let mut queue: BTreeSet<(usize, Cell)> = outside.cells().iter().map(|c| (c.depth(), c.clone())).collect();
    while let Some((depth, w)) = queue.pop_first() {
        match first_return(system, &w, &v)? {
            Ok(b) => {
                let elems: Vec<GroupElement> =
                    d.iter().enumerate().map(|(j, g)| if j == p0 { zero } else { *g + b }).collect();
                towers.push(Multisection::from_elements(system, single(system, &w)?, &elems)?);
                parts.push(Part { tower: towers.len() - 1, base: p0 });
            }
            Err(children) => {
                for c in children {
                    queue.insert((depth + 1, c));
                }
            }
        }
    }
    NormalFolnerSet::new(towers, parts, "first-return")
}

/// Runs the first-return construction, halving the Følner tolerance of the
/// seed interval until the result validates at `(K, ε)`.
pub fn build_minimal_first_return(system: &System, k: &CompactSet, epsilon: f64) -> Result<NormalFolnerSet> {
    if system.rank() != 1 || system.is_partial() {
        return Err(FolnerError::Precondition("first-return sets need a total Z-system".into()));
    }
    let u = system.free_unit();
    let unit = CompactSet::unit(system);
    let mut delta = epsilon;
    let mut last = String::new();
    for _ in 0..16 {
        let seed = folner_search(system, &u, k, delta, &unit, DEFAULT_SEARCH_CAP)?;
        let d: Vec<GroupElement> = seed.set.elements.iter().copied().collect();
        let mut s = first_return_set(system, &d)?;
        let v = validate_normal(system, &s, k, epsilon, Criterion::Difference)?;
        if v.valid {
            s.certified = Some(Certification { k_radius: k.radius(), epsilon, criterion: Criterion::Difference });
            return Ok(s);
        }
        last = v.failure.unwrap_or_default();
        delta /= 2.0;
    }
    Err(FolnerError::Invalid(last))
}

/// The sets `T_n` of the ill-behaved density example: on each piece `O_k`
/// the fiber is `{0} ∪ (s_k + F_n)` with `F_n = {0..n}` and `s_k O_k ⊆ V_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathologicalSet {
    pub n: usize,
    /// `V_n`; its translates by `F_n` are disjoint.
    pub v: ClopenSet,
    /// `(O_k, s_k)`.
    pub pieces: Vec<(ClopenSet, GroupElement)>,
}

impl PathologicalSet {
    pub fn elements(&self, s: GroupElement) -> BTreeSet<GroupElement> {
        let mut e: BTreeSet<GroupElement> = (0..=self.n as i64).map(|j| s + GroupElement::z(j)).collect();
        e.insert(GroupElement::z(0));
        e
    }

    pub fn classes(&self) -> Vec<StageClass> {
        self.pieces
            .iter()
            .enumerate()
            .map(|(l, (o, s))| StageClass { part: Some(l), set: o.clone(), elements: self.elements(*s) })
            .collect()
    }

    pub fn fiber(&self, system: &System, u: &PointCode) -> Result<FiberSet> {
        let u = system.normalize_point(u)?;
        for (o, s) in &self.pieces {
            if point_in(system, o, &u)? {
                return Ok(FiberSet::new(u, self.elements(*s)));
            }
        }
        Ok(FiberSet::new(u, []))
    }

    /// The same arrows written as multisections based at the identity; their
    /// translated levels collapse onto `V_n`, so they need not be valid.
    pub fn as_normal(&self, system: &System) -> Result<NormalFolnerSet> {
        let mut towers = Vec::new();
        let mut parts = Vec::new();
        for (o, s) in &self.pieces {
            let e: Vec<GroupElement> = self.elements(*s).into_iter().collect();
            let base = e.iter().position(|g| g.is_zero()).unwrap();
            towers.push(Multisection::from_elements(system, o.clone(), &e)?);
            parts.push(Part { tower: towers.len() - 1, base });
        }
        NormalFolnerSet::new(towers, parts, "pathological")
    }
}

/// Builds `T_n` on a total Z-system. `V_0` is the smallest cylinder at the
/// free unit with measure below 1/3 and `V_n ⊆ V_0` the smallest one whose
/// translates by `{0..n}` are disjoint.
pub fn build_pathological(system: &System, n: usize) -> Result<PathologicalSet> {
    if system.rank() != 1 || system.is_partial() {
        return Err(FolnerError::Precondition("the example needs a total Z-system".into()));
    }
    let tree = system.tree();
    let u = system.free_unit();
    let fn_: Vec<GroupElement> = (0..=n as i64).map(GroupElement::z).collect();
    let mut v = None;
    for depth in 1..=tree.depth_cap() {
        let c = single(system, &system.cell_of(&u, depth)?)?;
        if system.measure(&c) < 1.0 / 3.0 && is_tower_base(system, &c, &fn_)? {
            v = Some(c);
            break;
        }
    }
    let v = v.ok_or_else(|| FolnerError::MeasureBound("no cylinder with measure below 1/3".into()))?;
    let translates: Vec<ClopenSet> =
        fn_.iter().map(|g| system.act_on_set(*g, &v)).collect::<std::result::Result<_, _>>()?;
    let mut queue: BTreeSet<(usize, Cell)> = BTreeSet::from([(0, Cell::root())]);
    let mut pieces = Vec::new();
    'cells: while let Some((depth, w)) = queue.pop_first() {
        let set = single(system, &w)?;
        let split = |queue: &mut BTreeSet<(usize, Cell)>| -> Result<()> {
            if depth >= tree.depth_cap() {
                return Err(FolnerError::TowerPartition { depth, cell: w.to_string() });
            }
            for c in tree.children(w.word()) {
                queue.insert((depth + 1, c));
            }
            Ok(())
        };
        let mut inside = None;
        for (k, t) in translates.iter().enumerate() {
            if tree.is_subset(&set, t)? {
                inside = Some(k as i64);
            } else if !tree.is_disjoint(&set, t)? {
                split(&mut queue)?;
                continue 'cells;
            }
        }
        for step in 1..=RETURN_CAP {
            for s in [step, -step] {
                if inside == Some(-s) {
                    continue;
                }
                let img = system.act_on_set(GroupElement::z(s), &set)?;
                if tree.is_subset(&img, &v)? {
                    pieces.push((set, GroupElement::z(s)));
                    continue 'cells;
                }
                if !tree.is_disjoint(&img, &v)? {
                    split(&mut queue)?;
                    continue 'cells;
                }
            }
        }
        return Err(FolnerError::NoReturn { cell: w.to_string(), target: v.to_string(), radius: RETURN_CAP });
    }
    Ok(PathologicalSet { n, v, pieces })
}

/// A bad point of the partial example with its perturbed shape.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BadPoint {
    pub point: String,
    /// `g_i`, which moves the point off the bad set.
    pub shift: GroupElement,
    /// `T_{n,i}`.
    pub shape: Vec<GroupElement>,
    /// `|T_{n,i} Δ F_n g_i|`.
    pub perturbation: usize,
    /// `N_i`.
    pub neighbourhood: ClopenSet,
}

/// Normal set of the partial-action example with `F_n = {0..n−1}`, plus the
/// bad points it had to route around.
pub fn build_partial_folner_detailed(system: &System, n: usize) -> Result<(NormalFolnerSet, Vec<BadPoint>)> {
    if system.rank() != 1 || n == 0 {
        return Err(FolnerError::Precondition("the partial example needs a Z-system and n ≥ 1".into()));
    }
    let fn_: Vec<GroupElement> = (0..n as i64).map(GroupElement::z).collect();
    if system.removed_points().is_empty() {
        let mut s = build_from_group_folner(system, &fn_)?;
        s.method = "partial".into();
        return Ok((s, Vec::new()));
    }
    let tree = system.tree();
    let mut bad: BTreeSet<PointCode> = BTreeSet::new();
    for g in &fn_ {
        bad.extend(system.undefined_points(*g)?);
    }
    let bad: Vec<PointCode> = bad.into_iter().collect();
    let m = bad.len();
    let mut shapes = Vec::with_capacity(m);
    for x in &bad {
        shapes.push(perturbed_shape(system, x, &bad, n)?);
    }
    let bound = 1.0 / (n * m) as f64;
    let mut chosen = None;
    for depth in 1..=tree.depth_cap() {
        let cells: Vec<Cell> = bad.iter().map(|x| system.cell_of(x, depth)).collect::<std::result::Result<_, _>>()?;
        if cells.iter().collect::<BTreeSet<_>>().len() < m {
            continue;
        }
        let mut ok = true;
        for (c, (_, shape)) in cells.iter().zip(&shapes) {
            let set = single(system, c)?;
            if system.measure(&set) >= bound || !is_tower_base(system, &set, shape)? {
                ok = false;
                break;
            }
        }
        if ok {
            chosen = Some(cells);
            break;
        }
    }
    let cells = chosen.ok_or_else(|| FolnerError::MeasureBound(format!("neighbourhoods of measure < {bound}")))?;
    let nbhd: Vec<ClopenSet> = cells.iter().map(|c| single(system, c)).collect::<Result<_>>()?;
    let rest = tree.difference(&tree.whole(), &tree.union_all(nbhd.iter())?)?;
    let mut towers = Vec::new();
    let mut parts = Vec::new();
    for c in tower_partition(system, &rest, &fn_)? {
        towers.push(Multisection::from_elements(system, single(system, &c)?, &fn_)?);
        parts.push(Part { tower: towers.len() - 1, base: 0 });
    }
    let mut details = Vec::with_capacity(m);
    for ((x, (g, shape)), set) in bad.iter().zip(&shapes).zip(&nbhd) {
        let base = shape.iter().position(GroupElement::is_zero).unwrap();
        towers.push(Multisection::from_elements(system, set.clone(), shape)?);
        parts.push(Part { tower: towers.len() - 1, base });
        let moved: BTreeSet<GroupElement> = fn_.iter().map(|f| *f + *g).collect();
        let own: BTreeSet<GroupElement> = shape.iter().copied().collect();
        details.push(BadPoint {
            point: x.to_string(),
            shift: *g,
            shape: shape.clone(),
            perturbation: moved.symmetric_difference(&own).count(),
            neighbourhood: set.clone(),
        });
    }
    Ok((NormalFolnerSet::new(towers, parts, "partial")?, details))
}

pub fn build_partial_folner(system: &System, n: usize) -> Result<NormalFolnerSet> {
    Ok(build_partial_folner_detailed(system, n)?.0)
}

/// The shift `g` of smallest length moving `x` off the bad set, and the
/// shape `F_n + g`, with its far end swapped for 0 when it misses 0, every
/// element of which is defined at `x`.
fn perturbed_shape(system: &System, x: &PointCode, bad: &[PointCode], n: usize) -> Result<(GroupElement, Vec<GroupElement>)> {
    for step in 1..=RETURN_CAP {
        for s in [step, -step] {
            let g = GroupElement::z(s);
            let Some(y) = system.try_act(g, x)? else { continue };
            if bad.contains(&y) {
                continue;
            }
            let mut shape: Vec<GroupElement> = (0..n as i64).map(|j| GroupElement::z(s + j)).collect();
            if !shape.iter().any(GroupElement::is_zero) {
                if s > 0 {
                    shape.pop();
                } else {
                    shape.remove(0);
                }
                shape.push(GroupElement::z(0));
                shape.sort();
            }
            let mut defined = true;
            for t in &shape {
                defined &= system.is_defined(*t, x)?;
            }
            if defined {
                return Ok((g, shape));
            }
        }
    }
    Err(FolnerError::NoReturn { cell: x.to_string(), target: "the good set".into(), radius: RETURN_CAP })
}

/// Rung data of a goodness certificate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GoodnessWitness {
    pub m: usize,
    pub epsilon: f64,
    pub height: usize,
    /// `f_l(k)` for `k < h(S)`, as labels.
    pub injections: Vec<Vec<usize>>,
    /// The parts `L`.
    pub selected: Vec<usize>,
    /// Greedy colour count of each rung family over `L`.
    pub colors: Vec<usize>,
    /// Smallest measure of `⋃_l C^l_{f_l(k), f_l(k)}` over the supplied measures.
    pub rung_measures: Vec<f64>,
    /// Smallest measure of the base levels over `L`.
    pub selected_measure: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Goodness {
    Certified(GoodnessWitness),
    /// Greedy colouring or a measure bound failed; this is not a proof that
    /// no witness exists.
    NotCertified { rung: Option<usize>, deficit: f64, reason: String },
}

impl Goodness {
    pub fn is_certified(&self) -> bool {
        matches!(self, Goodness::Certified(_))
    }

    pub fn witness(&self) -> Option<&GoodnessWitness> {
        match self {
            Goodness::Certified(w) => Some(w),
            Goodness::NotCertified { .. } => None,
        }
    }
}

/// Largest-degree-first greedy colouring of the intersection graph.
pub fn greedy_colors(system: &System, sets: &[ClopenSet]) -> Result<usize> {
    let tree = system.tree();
    let n = sets.len();
    let mut adj = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            if !tree.is_disjoint(&sets[i], &sets[j])? {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(adj[i].len()), i));
    let mut color = vec![usize::MAX; n];
    let mut used = 0;
    for i in order {
        let taken: BTreeSet<usize> = adj[i].iter().map(|&j| color[j]).collect();
        let c = (0..).find(|c| !taken.contains(c)).unwrap();
        color[i] = c;
        used = used.max(c + 1);
    }
    Ok(used)
}

/// Searches for an `(M, ε)`-goodness witness with cyclic injections
/// `f_l(k) = i_l + k` (mod the labels of `C_l`) and a greedily grown `L`.
pub fn goodness(system: &System, s: &NormalFolnerSet, m: usize, epsilon: f64, measures: &[MeasureTable]) -> Result<Goodness> {
    let tree = system.tree();
    let h = s.height();
    let measure = |set: &ClopenSet| measures.iter().map(|mt| mt.measure(set)).fold(f64::INFINITY, f64::min);
    let mut injections = Vec::with_capacity(s.len());
    let mut rungs: Vec<Vec<ClopenSet>> = Vec::with_capacity(s.len());
    for part in s.parts() {
        let t = &s.towers[part.tower];
        let p = position(t, part.base)?;
        let levels = t.levels(system)?;
        let labels: Vec<usize> = (0..h).map(|k| t.index()[(p + k) % t.len()]).collect();
        rungs.push((0..h).map(|k| levels[(p + k) % t.len()].clone()).collect());
        injections.push(labels);
    }
    let mut rung_measures = Vec::with_capacity(h);
    for k in 0..h {
        let u = tree.union_all(rungs.iter().map(|r| &r[k]))?;
        let mu = measure(&u);
        if mu < 1.0 - epsilon {
            return Ok(Goodness::NotCertified {
                rung: Some(k),
                deficit: 1.0 - epsilon - mu,
                reason: format!("rung {k} covers measure {mu}"),
            });
        }
        rung_measures.push(mu);
    }
    let bases: Vec<ClopenSet> = (0..s.len()).map(|l| rungs[l][0].clone()).collect();
    let mut order: Vec<usize> = (0..s.len()).collect();
    let masses: Vec<f64> = bases.iter().map(measure).collect();
    order.sort_by(|&a, &b| masses[b].total_cmp(&masses[a]).then(a.cmp(&b)));
    let mut selected: Vec<usize> = Vec::new();
    let mut unions: Vec<ClopenSet> = vec![tree.empty(); h];
    for l in order {
        let fits = if m == 1 {
            let mut ok = true;
            for k in 0..h {
                if !tree.is_disjoint(&unions[k], &rungs[l][k])? {
                    ok = false;
                    break;
                }
            }
            ok
        } else {
            let mut ok = true;
            for k in 0..h {
                let fam: Vec<ClopenSet> = selected.iter().chain([&l]).map(|&q| rungs[q][k].clone()).collect();
                if greedy_colors(system, &fam)? > m {
                    ok = false;
                    break;
                }
            }
            ok
        };
        if fits {
            selected.push(l);
            if m == 1 {
                for k in 0..h {
                    unions[k] = tree.union(&unions[k], &rungs[l][k])?;
                }
            }
        }
    }
    selected.sort();
    let selected_set = tree.union_all(selected.iter().map(|&l| &bases[l]))?;
    let selected_measure = measure(&selected_set);
    if selected_measure <= 1.0 - epsilon {
        return Ok(Goodness::NotCertified {
            rung: None,
            deficit: 1.0 - epsilon - selected_measure,
            reason: format!("greedy colouring with {m} colours keeps base measure {selected_measure}, not above 1−ε"),
        });
    }
    let mut colors = Vec::with_capacity(h);
    for k in 0..h {
        let fam: Vec<ClopenSet> = selected.iter().map(|&q| rungs[q][k].clone()).collect();
        colors.push(greedy_colors(system, &fam)?);
    }
    Ok(Goodness::Certified(GoodnessWitness {
        m,
        epsilon,
        height: h,
        injections,
        selected,
        colors,
        rung_measures,
        selected_measure,
    }))
}

/// One term of a Følner sequence.
#[derive(Debug, Clone)]
pub enum Stage {
    Normal(NormalFolnerSet),
    /// `S_{F,X}`: every fiber is `F·u`. The tower partition is not built.
    Uniform(Vec<GroupElement>),
    Pathological(PathologicalSet),
}

impl Stage {
    pub fn classes(&self, system: &System) -> Result<Vec<StageClass>> {
        match self {
            Stage::Normal(s) => s.fiber_classes(system),
            Stage::Uniform(f) => {
                Ok(vec![StageClass { part: None, set: system.tree().whole(), elements: f.iter().copied().collect() }])
            }
            Stage::Pathological(t) => Ok(t.classes()),
        }
    }

    pub fn fiber(&self, system: &System, u: &PointCode) -> Result<FiberSet> {
        match self {
            Stage::Normal(s) => s.fiber(system, u),
            Stage::Uniform(f) => Ok(FiberSet::new(system.normalize_point(u)?, f.iter().copied())),
            Stage::Pathological(t) => t.fiber(system, u),
        }
    }

    /// Smallest and largest fiber size.
    pub fn size_range(&self, system: &System) -> Result<(usize, usize)> {
        let sizes: Vec<usize> = self.classes(system)?.iter().map(|c| c.elements.len()).collect();
        Ok((sizes.iter().copied().min().unwrap_or(0), sizes.iter().copied().max().unwrap_or(0)))
    }

    /// Worst fiber ratio against `K`, over all units.
    pub fn ratio(&self, system: &System, k: &CompactSet, criterion: Criterion) -> Result<Frac> {
        let classes = self.classes(system)?;
        let exceptional = match self {
            Stage::Normal(s) => exceptional_fibers(system, s, k)?,
            _ if system.is_partial() => {
                return Err(FolnerError::Precondition("this stage kind needs a total system".into()))
            }
            _ => Vec::new(),
        };
        Ok(worst_ratio(system, &classes, &exceptional, k, 0.0, criterion)?.map_or(frac(0, 1), |w| w.ratio))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SequenceKind {
    /// First-return castles of height at least `2^n`, reindexed.
    KakutaniRokhlin,
    /// Intervals `{0..2^n − 1}`.
    Intervals,
    /// First-return sets for `K` of radius 1 and `ε = 2^{1−n}`.
    FirstReturn,
    Pathological,
    /// The partial-action example with `F = {0..2^n − 1}`.
    Partial,
}

#[derive(Debug, Clone)]
pub struct FolnerSequence {
    pub system: System,
    pub kind: SequenceKind,
}

impl FolnerSequence {
    pub fn new(system: &System, kind: SequenceKind) -> Self {
        Self { system: system.clone(), kind }
    }

    pub fn stage(&self, n: usize) -> Result<Stage> {
        let sys = &self.system;
        let size = 1usize.checked_shl(n as u32).ok_or_else(|| FolnerError::Precondition(format!("stage {n} too large")))?;
        Ok(match self.kind {
            SequenceKind::KakutaniRokhlin => Stage::Normal(reindex(&kakutani_rokhlin(sys, size)?)?),
            SequenceKind::Intervals => Stage::Uniform((0..size as i64).map(GroupElement::z).collect()),
            SequenceKind::FirstReturn => {
                let eps = 2.0 / size as f64;
                Stage::Normal(build_minimal_first_return(sys, &CompactSet::ball(sys, 1), eps)?)
            }
            SequenceKind::Pathological => Stage::Pathological(build_pathological(sys, n)?),
            SequenceKind::Partial => Stage::Normal(build_partial_folner(sys, size)?),
        })
    }

    /// `(radius of K_n, ε_n)`.
    pub fn schedule(&self, n: usize) -> (u64, f64) {
        let r = n.max(1);
        match self.kind {
            SequenceKind::Pathological => (1, 4.0 / (n + 1) as f64),
            _ => (r as u64, 2.0 * r as f64 / (1u64 << n.min(62)) as f64),
        }
    }
}

/// Counts how many arrows of each class end in the K-boundary; exposed for
/// tests of the reduction.
pub fn class_map(classes: &[StageClass]) -> BTreeMap<usize, usize> {
    let mut out = BTreeMap::new();
    for c in classes {
        *out.entry(c.elements.len()).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{invariant_measure, SystemSpec};
    use proptest::prelude::*;

    fn odo() -> System {
        SystemSpec::odometer(2).build().unwrap()
    }

    fn fib() -> System {
        SystemSpec::fibonacci().build().unwrap()
    }

    fn partial_odo() -> System {
        SystemSpec::Partial { base: Some(2), rules: None, removed: vec![PointCode::digits(vec![], vec![0])] }
            .build()
            .unwrap()
    }

    fn interval(n: i64) -> Vec<GroupElement> {
        (0..n).map(GroupElement::z).collect()
    }

    /// Oracle: the Følner ratio of `S` at a representative of every cell of
    /// `depth`, plus the exceptional points, computed pointwise.
    fn pointwise_worst(sys: &System, s: &NormalFolnerSet, k: &CompactSet, depth: usize) -> Frac {
        let mut worst = frac(0, 1);
        for tp in sys.test_points(depth, k.radius() + 64).unwrap() {
            let f = s.fiber(sys, &tp.point).unwrap();
            assert!(!f.is_empty(), "{} lies in no base level", tp.point);
            let r = is_folner(sys, k, 1.0, &f).unwrap().difference_ratio.0;
            worst = worst.max(r);
        }
        worst
    }

    #[test]
    fn kr_height_32_validates_with_ratio_one_sixteenth() {
        let sys = odo();
        let s = reindex(&kakutani_rokhlin(&sys, 32).unwrap()).unwrap();
        assert_eq!(s.height(), 32);
        let k = CompactSet::ball(&sys, 1);
        let v = validate_normal(&sys, &s, &k, 0.1, Criterion::Difference).unwrap();
        assert!(v.valid, "{v:?}");
        assert_eq!(v.worst_ratio.unwrap().0, frac(1, 16));
        assert_eq!(pointwise_worst(&sys, &s, &k, 6), frac(1, 16));
    }

    #[test]
    fn missing_base_cell_is_reported() {
        let sys = odo();
        let full = build_from_group_folner(&sys, &interval(4)).unwrap();
        let towers: Vec<Multisection> = full.towers()[1..].to_vec();
        let parts = (0..towers.len()).map(|t| Part { tower: t, base: 0 }).collect();
        let s = NormalFolnerSet::new(towers, parts, "test").unwrap();
        let v = validate_normal(&sys, &s, &CompactSet::ball(&sys, 1), 1.0, Criterion::Difference).unwrap();
        assert!(!v.valid);
        assert_eq!(v.failure.unwrap(), "cell [00] lies in no base level");
    }

    #[test]
    fn single_levels_over_a_partition_pass_at_two() {
        let sys = fib();
        let cells = sys.tree().cells_at_depth(2).unwrap();
        let towers: Vec<Multisection> =
            cells.iter().map(|c| Multisection::single_level(&sys, sys.tree().set(vec![c.clone()]).unwrap())).collect();
        let parts = (0..towers.len()).map(|t| Part { tower: t, base: 0 }).collect();
        let s = NormalFolnerSet::new(towers, parts, "test").unwrap();
        let v = validate_normal(&sys, &s, &CompactSet::ball(&sys, 1), 2.0, Criterion::Difference).unwrap();
        assert!(v.valid);
        assert_eq!(v.worst_ratio.unwrap().0, frac(2, 1));
    }

    #[test]
    fn dyadic_intervals_give_exact_kr_partitions() {
        let sys = odo();
        for k in 0..5u32 {
            let n = 1i64 << k;
            let s = build_from_group_folner(&sys, &interval(n)).unwrap();
            assert_eq!(s.len(), n as usize);
            assert!(s.is_controlled(1));
            for m in s.towers() {
                assert!(m.footprint(&sys).unwrap().is_whole());
                assert_eq!(m.depth(&sys).unwrap(), k as usize);
            }
            let v = validate_normal(&sys, &s, &CompactSet::ball(&sys, 1), 2.0, Criterion::Difference).unwrap();
            assert!(v.valid);
            assert_eq!(v.worst_ratio.unwrap().0, frac(2, n as usize));
        }
    }

    #[test]
    fn identity_gives_the_unit_space() {
        let sys = fib();
        let s = build_from_group_folner(&sys, &interval(1)).unwrap();
        assert_eq!(s.len(), 1);
        assert!(s.base_levels(&sys).unwrap()[0].is_whole());
    }

    #[test]
    fn fibonacci_towers_of_ten() {
        let sys = fib();
        let s = build_from_group_folner(&sys, &interval(10)).unwrap();
        let k = CompactSet::ball(&sys, 1);
        let v = validate_normal(&sys, &s, &k, 0.2, Criterion::Difference).unwrap();
        assert!(v.valid, "{v:?}");
        assert!(v.worst_ratio.unwrap().0 <= frac(2, 10));
        let depth = s.depth(&sys).unwrap();
        assert_eq!(pointwise_worst(&sys, &s, &k, depth), frac(2, 10));
        let oracle_ok = sys.tree().cells_at_depth(depth).unwrap().len();
        assert!(s.len() <= oracle_ok);
    }

    #[test]
    fn first_return_on_the_odometer() {
        let sys = odo();
        let k = CompactSet::ball(&sys, 1);
        let s = build_minimal_first_return(&sys, &k, 0.1).unwrap();
        assert!(s.height() >= 21);
        assert!(s.is_controlled(1));
        assert!(sys.tree().is_partition(&s.base_levels(&sys).unwrap()).unwrap().holds());
        let depth = s.depth(&sys).unwrap();
        let worst = pointwise_worst(&sys, &s, &k, depth);
        assert!(crate::report::frac_le(&worst, 0.1));
    }

    #[test]
    fn first_return_on_fibonacci() {
        let sys = fib();
        let k = CompactSet::ball(&sys, 1);
        let s = build_minimal_first_return(&sys, &k, 0.5).unwrap();
        assert!(s.height() >= 5);
        assert!(s.is_controlled(1));
        let v = validate_normal(&sys, &s, &k, 0.5, Criterion::Difference).unwrap();
        assert!(v.valid);
        let worst = pointwise_worst(&sys, &s, &k, s.depth(&sys).unwrap());
        assert_eq!(worst, v.worst_ratio.unwrap().0);
    }

    #[test]
    fn unit_k_at_large_epsilon_is_one_cell() {
        let sys = odo();
        let s = build_minimal_first_return(&sys, &CompactSet::unit(&sys), 2.0).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.height(), 1);
        assert!(s.base_levels(&sys).unwrap()[0].is_whole());
    }

    #[test]
    fn pathological_fibers_have_three_arrows() {
        let sys = odo();
        let t = build_pathological(&sys, 1).unwrap();
        assert!(sys.measure(&t.v) < 1.0 / 3.0);
        for tp in sys.test_points(6, 0).unwrap() {
            let f = t.fiber(&sys, &tp.point).unwrap();
            assert_eq!(f.len(), 3);
            let in_v = f
                .ranges(&sys)
                .unwrap()
                .iter()
                .filter(|p| point_in(&sys, &t.v, p).unwrap())
                .count();
            assert!(in_v >= 1);
        }
    }

    #[test]
    fn pathological_sets_follow_their_schedule() {
        let sys = odo();
        let seq = FolnerSequence::new(&sys, SequenceKind::Pathological);
        for n in 1..5 {
            let (_, eps) = seq.schedule(n);
            let stage = seq.stage(n).unwrap();
            let r = stage.ratio(&sys, &CompactSet::ball(&sys, 1), Criterion::Difference).unwrap();
            assert!(crate::report::frac_le(&r, eps), "stage {n}: {r} > {eps}");
        }
    }

    #[test]
    fn pathological_goodness_is_not_certified() {
        let sys = odo();
        let t = build_pathological(&sys, 2).unwrap();
        let s = t.as_normal(&sys).unwrap();
        assert!(!validate_normal(&sys, &s, &CompactSet::ball(&sys, 1), 1.0, Criterion::Difference).unwrap().valid);
        let g = goodness(&sys, &s, 1, 0.05, &[invariant_measure(&sys)]).unwrap();
        assert!(!g.is_certified());
    }

    #[test]
    fn partial_example_small_n() {
        let sys = partial_odo();
        for n in [2usize, 4, 8] {
            let (s, bad) = build_partial_folner_detailed(&sys, n).unwrap();
            assert_eq!(bad.len(), n - 1);
            for b in &bad {
                assert!(b.perturbation <= 2);
            }
            assert!(s.is_controlled(1));
            assert_eq!(s.height(), n);
            let k = CompactSet::ball(&sys, 1);
            let v = validate_normal(&sys, &s, &k, 2.0 / n as f64, Criterion::Difference).unwrap();
            assert!(v.valid, "n={n}: {v:?}");
            let g = goodness(&sys, &s, 1, 1.0 / n as f64, &[invariant_measure(&sys)]).unwrap();
            assert!(g.is_certified(), "n={n}: {g:?}");
        }
    }

    #[test]
    fn partial_without_removed_points_is_the_group_set() {
        let sys = odo();
        let a = build_partial_folner(&sys, 4).unwrap();
        let b = build_from_group_folner(&sys, &interval(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn heights_and_control() {
        let sys = odo();
        let a = Multisection::tower(&sys, sys.tree().set_from_words(&["00"]).unwrap(), 4).unwrap();
        let b = Multisection::tower(&sys, sys.tree().set_from_words(&["000"]).unwrap(), 8).unwrap();
        let s = NormalFolnerSet::new(vec![a.clone(), b], vec![Part { tower: 0, base: 0 }, Part { tower: 1, base: 0 }], "t")
            .unwrap();
        assert_eq!(s.height(), 4);
        assert!(s.is_controlled(2));
        assert!(!s.is_controlled(1));
        let same = NormalFolnerSet::new(vec![a], vec![Part { tower: 0, base: 0 }], "t").unwrap();
        assert_eq!(same.height(), 4);
        assert!(same.is_controlled(1));
    }

    #[test]
    fn reindexed_castles_are_one_good() {
        for sys in [odo(), fib()] {
            let castle = kakutani_rokhlin(&sys, 8).unwrap();
            let s = reindex(&castle).unwrap();
            let mu = [invariant_measure(&sys)];
            let g = goodness(&sys, &s, 1, 0.01, &mu).unwrap();
            let w = g.witness().expect("certified");
            assert!(w.colors.iter().all(|c| *c == 1));
            assert_eq!(w.selected.len(), s.len());
            let many = goodness(&sys, &s, s.len(), 0.01, &mu).unwrap();
            assert!(many.is_certified());
        }
    }

    #[test]
    fn fibonacci_kr_is_two_controlled() {
        let sys = fib();
        let s = reindex(&kakutani_rokhlin(&sys, 13).unwrap()).unwrap();
        assert!(s.height() >= 13);
        assert!(s.is_controlled(2));
        let v = validate_normal(&sys, &s, &CompactSet::ball(&sys, 1), 0.25, Criterion::Difference).unwrap();
        assert!(v.valid);
    }

    #[test]
    fn sequence_property_for_requested_k() {
        let sys = odo();
        let seq = FolnerSequence::new(&sys, SequenceKind::KakutaniRokhlin);
        for n in 2..7 {
            let (r, eps) = seq.schedule(n);
            let k = CompactSet::ball(&sys, r.min(2));
            let ratio = seq.stage(n).unwrap().ratio(&sys, &k, Criterion::Difference).unwrap();
            assert!(crate::report::frac_le(&ratio, eps));
        }
    }

    #[test]
    fn records_round_trip() {
        let sys = fib();
        let s = build_from_group_folner(&sys, &interval(5)).unwrap();
        let rec = s.record(&sys).unwrap();
        let text = serde_json::to_string(&rec).unwrap();
        let back: NormalFolnerRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_set(&sys).unwrap(), s);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn constructed_sets_validate(len in 1i64..12, fibonacci in any::<bool>()) {
            let sys = if fibonacci { fib() } else { odo() };
            let s = build_from_group_folner(&sys, &interval(len)).unwrap();
            let k = CompactSet::ball(&sys, 1);
            let v = validate_normal(&sys, &s, &k, 2.0, Criterion::Difference).unwrap();
            prop_assert!(v.valid);
            prop_assert_eq!(v.worst_ratio.unwrap().0, frac(2, len as usize));
            prop_assert!(sys.tree().is_partition(&s.base_levels(&sys).unwrap()).unwrap().holds());
        }
    }
}
