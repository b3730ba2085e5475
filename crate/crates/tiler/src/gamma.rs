//! Nested two-scale castles, nesting systems and the diagonal contractions
//! `g_m = ψ(e_mm)`, with exact checks of orthogonality, trace balance and
//! commutators against bisection-supported elements.

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use serde::Serialize;
use thiserror::Error;

use crate::cantor::{CantorError, Cell, ClopenSet};
use crate::castle::{Castle, CastleError, Multisection};
use crate::folner::{kakutani_rokhlin, FolnerError};
use crate::groupoid::{Bisection, GroupoidError};
use crate::report::{frac, Frac, FracJson, RationalJson, SCHEMA_VERSION};
use crate::systems::{invariant_measure, rational_to_f64, GroupElement, MeasureTable, System, SystemError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GammaError {
    #[error(transparent)]
    Folner(#[from] FolnerError),
    #[error(transparent)]
    Castle(#[from] CastleError),
    #[error(transparent)]
    Groupoid(#[from] GroupoidError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Cantor(#[from] CantorError),
    #[error("{0}")]
    Precondition(String),
    #[error("nesting multiplicity {found} is below {needed} with the tall castle at height {height}")]
    Multiplicity { found: usize, needed: usize, height: usize },
    #[error("nesting system: {0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, GammaError>;

/// A D-level, addressed by multisection and label.
pub type LevelId = (usize, usize);

/// Four tower castles: `C ⊆ D` and `A ⊆ B` are label restrictions, every
/// `D`-level is a union of `B`-levels, and `A`-levels sit inside `C`-levels.
#[derive(Debug, Clone)]
pub struct NestedCastles {
    pub a: Castle,
    pub b: Castle,
    pub c: Castle,
    pub d: Castle,
    pub k_radius: u64,
    pub n: usize,
    pub big_n: usize,
    pub epsilon: f64,
    /// `placement[l][i]` is the `D`-level containing level `i` of `B^l`.
    pub placement: Vec<Vec<LevelId>>,
    pub heights_b: Vec<usize>,
    pub heights_d: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NestingSummary {
    pub heights_d: Vec<usize>,
    pub heights_b: Vec<usize>,
    pub towers_b: usize,
    /// Minimum over `(p, l)` with `B^l` passing through `D^p`.
    pub multiplicity: usize,
    pub a_extends_to_b: bool,
    pub c_extends_to_d: bool,
    pub uncovered: f64,
    pub uncovered_exact: Option<RationalJson>,
    /// Deepest `D`-level; the levels refine every partition at most this deep.
    pub d_depth: usize,
}

impl NestedCastles {
    /// `|{B-levels of B^l inside a D^p-level}|`, i.e. the number of passes.
    pub fn multiplicity(&self, p: usize, l: usize) -> usize {
        self.placement[l].iter().filter(|&&(q, t)| q == p && t == 0).count()
    }

    pub fn min_multiplicity(&self) -> usize {
        let mut m = usize::MAX;
        for l in 0..self.placement.len() {
            for p in 0..self.heights_d.len() {
                let k = self.multiplicity(p, l);
                if k > 0 {
                    m = m.min(k);
                }
            }
        }
        if m == usize::MAX {
            0
        } else {
            m
        }
    }

    /// `C⁰` as level ids.
    pub fn c_levels(&self) -> BTreeSet<LevelId> {
        let mut out = BTreeSet::new();
        for (p, m) in self.c.multisections.iter().enumerate() {
            for &t in m.index() {
                out.insert((p, t));
            }
        }
        out
    }

    pub fn d_levels(&self) -> BTreeSet<LevelId> {
        let mut out = BTreeSet::new();
        for (p, h) in self.heights_d.iter().enumerate() {
            for t in 0..*h {
                out.insert((p, t));
            }
        }
        out
    }

    pub fn summary(&self, system: &System) -> Result<NestingSummary> {
        let tree = system.tree();
        let uncovered = tree.complement(&self.a.footprint(system)?)?;
        let mu = invariant_measure(system);
        Ok(NestingSummary {
            heights_d: self.heights_d.clone(),
            heights_b: self.heights_b.iter().copied().collect::<BTreeSet<_>>().into_iter().collect(),
            towers_b: self.heights_b.len(),
            multiplicity: self.min_multiplicity(),
            a_extends_to_b: tower_extendable(&self.a, &self.heights_b, self.k_radius),
            c_extends_to_d: tower_extendable(&self.c, &self.heights_d, self.k_radius),
            uncovered: mu.measure(&uncovered),
            uncovered_exact: mu.exact_measure(&uncovered).map(RationalJson),
            d_depth: self.d.depth(system)?,
        })
    }
}

/// `K·⋃C ⊆ ⋃D` for a label restriction `C` of a tower castle and `K` the
/// ball of radius `r`: every label stays at least `r` away from both ends.
pub fn tower_extendable(c: &Castle, heights: &[usize], r: u64) -> bool {
    let r = r as usize;
    c.multisections.len() == heights.len()
        && c.multisections.iter().zip(heights).all(|(m, &h)| m.index().iter().all(|&i| i >= r && i + r < h))
}

fn restrict_tower(system: &System, base: &ClopenSet, labels: Vec<usize>) -> Result<Multisection> {
    let mut ladders = Vec::with_capacity(labels.len());
    for &i in &labels {
        ladders.push(Bisection::slice(system, GroupElement::z(i as i64), base.clone())?);
    }
    Ok(Multisection::anchored(labels, base.clone(), ladders)?)
}

/// Splits the bases of the towers of `b` so that every level lies in a
/// single level of `d`. Returns the new towers with their placements.
fn refine_into(
    system: &System,
    b: &[(ClopenSet, usize)],
    d: &[(ClopenSet, usize)],
) -> Result<Vec<(ClopenSet, usize, Vec<LevelId>)>> {
    let tree = system.tree();
    let mut out = Vec::new();
    for (base, h) in b {
        let mut pieces: Vec<(ClopenSet, Vec<LevelId>)> = Vec::new();
        for (p, (dbase, _)) in d.iter().enumerate() {
            let part = tree.intersect(base, dbase)?;
            if !part.is_empty() {
                pieces.push((part, vec![(p, 0)]));
            }
        }
        if tree.union_all(pieces.iter().map(|x| &x.0))? != *base {
            return Err(GammaError::Precondition(format!("tall base {base} is not inside the short bases")));
        }
        for i in 1..*h {
            let mut next = Vec::with_capacity(pieces.len());
            for (piece, path) in pieces {
                let (p, t) = *path.last().expect("nonempty path");
                if t + 1 < d[p].1 {
                    let mut path = path;
                    path.push((p, t + 1));
                    next.push((piece, path));
                    continue;
                }
                let mut rest = piece.clone();
                for (q, (dbase, _)) in d.iter().enumerate() {
                    let back = system.act_on_set(GroupElement::z(-(i as i64)), dbase)?;
                    let part = tree.intersect(&piece, &back)?;
                    if !part.is_empty() {
                        rest = tree.difference(&rest, &part)?;
                        let mut p2 = path.clone();
                        p2.push((q, 0));
                        next.push((part, p2));
                    }
                }
                if !rest.is_empty() {
                    return Err(GammaError::Precondition(format!("{rest} leaves the short castle at step {i}")));
                }
            }
            pieces = next;
        }
        for (piece, path) in pieces {
            if path.last().is_some_and(|&(p, t)| t + 1 != d[p].1) {
                return Err(GammaError::Precondition(format!("tall tower over {piece} ends inside a short tower")));
            }
            out.push((piece, *h, path));
        }
    }
    Ok(out)
}

fn towers_of(system: &System, castle: &Castle) -> Result<Vec<(ClopenSet, usize)>> {
    castle
        .multisections
        .iter()
        .map(|m| Ok((m.level(system, 0)?, m.len())))
        .collect()
}

/// Two first-return scales on a total `Z`-system. The short castle `D` has
/// minimum height above `4R/ε`, so its `R`-margins carry mass below `ε/2`;
/// the tall castle `B` is raised until every tower of `B` passes every tower
/// of `D` it meets at least `nN` times.
pub fn build_nested_castles(system: &System, k_radius: u64, n: usize, big_n: usize, epsilon: f64) -> Result<NestedCastles> {
    if system.rank() != 1 || system.is_partial() {
        return Err(GammaError::Precondition("nested castles are built for total Z-systems".into()));
    }
    if n == 0 || big_n == 0 || !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(GammaError::Precondition(format!("need n, N ≥ 1 and 0 < ε < 1, got {n}, {big_n}, {epsilon}")));
    }
    let r = k_radius as usize;
    let short_min = ((4.0 * r as f64 / epsilon).floor() as usize + 1).max(2 * r + 1);
    let d = kakutani_rokhlin(system, short_min)?;
    let d_towers = towers_of(system, &d)?;
    let heights_d: Vec<usize> = d_towers.iter().map(|t| t.1).collect();
    let needed = n * big_n;
    let mut tall = needed * heights_d.iter().copied().max().unwrap_or(1);
    let mut found = 0;
    for _ in 0..4 {
        let b = kakutani_rokhlin(system, tall)?;
        let refined = refine_into(system, &towers_of(system, &b)?, &d_towers)?;
        let mut b_ms = Vec::with_capacity(refined.len());
        let mut a_ms = Vec::with_capacity(refined.len());
        let mut placement = Vec::with_capacity(refined.len());
        let mut heights_b = Vec::with_capacity(refined.len());
        for (base, h, path) in refined {
            b_ms.push(Multisection::tower(system, base.clone(), h)?);
            let keep: Vec<usize> = (0..h).filter(|&i| path[i].1 >= r && path[i].1 + r < heights_d[path[i].0]).collect();
            a_ms.push(restrict_tower(system, &base, keep)?);
            placement.push(path);
            heights_b.push(h);
        }
        let mut c_ms = Vec::with_capacity(d_towers.len());
        for (base, h) in &d_towers {
            c_ms.push(restrict_tower(system, base, (r..h - r).collect())?);
        }
        let nested = NestedCastles {
            a: Castle::new(a_ms),
            b: Castle::new(b_ms),
            c: Castle::new(c_ms),
            d: d.clone(),
            k_radius,
            n,
            big_n,
            epsilon,
            placement,
            heights_b,
            heights_d: heights_d.clone(),
        };
        found = nested.min_multiplicity();
        if found >= needed {
            return Ok(nested);
        }
        tall *= 2;
    }
    Err(GammaError::Multiplicity { found, needed, height: tall / 2 })
}

/// Blocks of one pair `(p, l)`: `transport[D]` lists `P_{D,l}` in the order
/// carried from the reference level, so `P_{D,l,m}` is the `m`-th run of
/// length `block`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NestBlock {
    pub p: usize,
    pub l: usize,
    pub reference: usize,
    pub block: usize,
    pub transport: BTreeMap<usize, Vec<usize>>,
}

impl NestBlock {
    fn run(&self, t: usize, m: usize) -> &[usize] {
        &self.transport[&t][(m - 1) * self.block..m * self.block]
    }

    /// `Θ_{D,l,k,m}` on `P_{D,l,m}`.
    pub fn theta(&self, t: usize, k: usize, m: usize) -> BTreeMap<usize, usize> {
        self.run(t, m).iter().copied().zip(self.run(t, k).iter().copied()).collect()
    }

    pub fn block_labels(&self, t: usize, m: usize) -> &[usize] {
        self.run(t, m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NestingSystem {
    pub n: usize,
    pub big_n: usize,
    /// `H⁰`.
    pub levels: BTreeSet<LevelId>,
    pub blocks: Vec<NestBlock>,
}

fn b_level_index(system: &System, nested: &NestedCastles, l: usize) -> Result<BTreeMap<Vec<String>, usize>> {
    let mut out = BTreeMap::new();
    for (i, lv) in nested.b.multisections[l].levels(system)?.iter().enumerate() {
        out.insert(lv.words(), i);
    }
    Ok(out)
}

/// Exact images of the `B^l`-levels inside the reference level under the
/// ladders `D_{t, reference}`, for every `t` in `H^p`.
fn ladder_images(
    system: &System,
    nested: &NestedCastles,
    p: usize,
    l: usize,
    reference: usize,
    targets: &[usize],
) -> Result<BTreeMap<usize, Vec<usize>>> {
    let index = b_level_index(system, nested, l)?;
    let dm = &nested.d.multisections[p];
    let bm = &nested.b.multisections[l];
    let start: Vec<usize> = (0..nested.heights_b[l]).filter(|&i| nested.placement[l][i] == (p, reference)).collect();
    let mut out = BTreeMap::new();
    for &t in targets {
        let ladder = dm.entry(system, t, reference)?;
        let mut row = Vec::with_capacity(start.len());
        for &i in &start {
            let img = ladder.image(system, &bm.level(system, i)?)?;
            match index.get(&img.words()) {
                Some(&j) => row.push(j),
                None => {
                    return Err(GammaError::Invariant(format!(
                        "D^{p} ladder ({t}, {reference}) carries B^{l} level {i} onto {img}, which is no B^{l} level"
                    )))
                }
            }
        }
        out.insert(t, row);
    }
    Ok(out)
}

/// Reference level = lowest label of `H^p`; its `B^l`-levels are split into
/// `n` runs of `⌊|P|/n⌋` in label order and carried along the `D`-ladders.
pub fn build_nesting_system(system: &System, nested: &NestedCastles, h: &BTreeSet<LevelId>) -> Result<NestingSystem> {
    let c = nested.c_levels();
    if let Some(missing) = c.iter().find(|x| !h.contains(x)) {
        return Err(GammaError::Precondition(format!("H⁰ misses the C-level {missing:?}")));
    }
    let all = nested.d_levels();
    if let Some(extra) = h.iter().find(|x| !all.contains(x)) {
        return Err(GammaError::Precondition(format!("{extra:?} is not a D-level")));
    }
    let needed = nested.n * nested.big_n;
    let mut blocks = Vec::new();
    for p in 0..nested.heights_d.len() {
        let hp: Vec<usize> = h.iter().filter(|x| x.0 == p).map(|x| x.1).collect();
        let Some(&reference) = hp.first() else { continue };
        for l in 0..nested.placement.len() {
            if nested.multiplicity(p, l) < needed {
                continue;
            }
            let transport = ladder_images(system, nested, p, l, reference, &hp)?;
            let size = transport[&reference].len();
            blocks.push(NestBlock { p, l, reference, block: size / nested.n, transport });
        }
    }
    let ns = NestingSystem { n: nested.n, big_n: nested.big_n, levels: h.clone(), blocks };
    validate_nesting_system(system, nested, &ns)?;
    Ok(ns)
}

/// Exhaustive check of the nesting-system identities. Ladder images are
/// recomputed from the castle, so a tampered transport is caught by the
/// equivariance identity with the offending ladder as witness.
pub fn validate_nesting_system(system: &System, nested: &NestedCastles, ns: &NestingSystem) -> Result<()> {
    let n = ns.n;
    let needed = n * ns.big_n;
    for blk in &ns.blocks {
        let (p, l) = (blk.p, blk.l);
        let hp: Vec<usize> = ns.levels.iter().filter(|x| x.0 == p).map(|x| x.1).collect();
        for &t in &hp {
            let row = blk
                .transport
                .get(&t)
                .ok_or_else(|| GammaError::Invariant(format!("no blocks at D^{p} level {t}")))?;
            let inside: BTreeSet<usize> =
                (0..nested.heights_b[l]).filter(|&i| nested.placement[l][i] == (p, t)).collect();
            let listed: BTreeSet<usize> = row.iter().copied().collect();
            if listed != inside || listed.len() != row.len() {
                return Err(GammaError::Invariant(format!("P at D^{p} level {t} is not the set of B^{l} levels inside it")));
            }
            if row.len() < needed {
                return Err(GammaError::Invariant(format!("|P| = {} < nN at D^{p} level {t}", row.len())));
            }
            if blk.block != row.len() / n {
                return Err(GammaError::Invariant(format!("block size {} is not ⌊{}/{n}⌋", blk.block, row.len())));
            }
            for k in 1..=n {
                let id = blk.theta(t, k, k);
                if id.iter().any(|(x, y)| x != y) {
                    return Err(GammaError::Invariant(format!("Θ_{{{k},{k}}} is not the identity at D^{p} level {t}")));
                }
                for m in 1..=n {
                    let km = blk.theta(t, k, m);
                    let mk = blk.theta(t, m, k);
                    if km.iter().any(|(x, y)| mk.get(y) != Some(x)) {
                        return Err(GammaError::Invariant(format!("Θ_{{{k},{m}}}⁻¹ ≠ Θ_{{{m},{k}}} at D^{p} level {t}")));
                    }
                    for q in 1..=n {
                        let mq = blk.theta(t, m, q);
                        let kq = blk.theta(t, k, q);
                        if mq.iter().any(|(x, y)| km.get(y) != kq.get(x)) {
                            return Err(GammaError::Invariant(format!(
                                "Θ_{{{k},{m}}}Θ_{{{m},{q}}} ≠ Θ_{{{k},{q}}} at D^{p} level {t}"
                            )));
                        }
                    }
                }
            }
        }
        let actual = ladder_images(system, nested, p, l, blk.reference, &hp)?;
        let back: BTreeMap<usize, BTreeMap<usize, usize>> = actual
            .iter()
            .map(|(t, row)| (*t, row.iter().enumerate().map(|(j, x)| (*x, j)).collect()))
            .collect();
        for &s in &hp {
            for &r in &hp {
                // D_{r,s} = D_{r,ref} D_{ref,s}
                let carry = |x: usize| actual[&r][back[&s][&x]];
                for k in 1..=n {
                    for m in 1..=n {
                        let ts = blk.theta(s, k, m);
                        let tr = blk.theta(r, k, m);
                        for (&x, &y) in &ts {
                            if tr.get(&carry(x)) != Some(&carry(y)) {
                                return Err(GammaError::Invariant(format!(
                                    "equivariance fails for the ladder D^{p}_({r},{s}) on B^{l} level {x} (k = {k}, m = {m})"
                                )));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Stratification of `D`-levels by the number of test-bisection steps
/// needed to reach them from `C⁰`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Strata {
    pub strata: Vec<Vec<LevelId>>,
    /// Images that were not whole `D`-levels, or levels split by a source.
    pub unmatched: Vec<String>,
}

impl Strata {
    /// `⋃_{k ≤ N} D⁰_k`.
    pub fn h_levels(&self, big_n: usize) -> BTreeSet<LevelId> {
        self.strata.iter().take(big_n + 1).flatten().copied().collect()
    }

    /// `κ(D) = 1 − k/N` on `D⁰_k`, `k ≤ N`.
    pub fn staircase(&self, big_n: usize) -> BTreeMap<LevelId, Frac> {
        let mut out = BTreeMap::new();
        for (k, s) in self.strata.iter().enumerate().take(big_n + 1) {
            for x in s {
                out.insert(*x, frac(big_n - k, big_n));
            }
        }
        out
    }
}

pub fn strata(system: &System, nested: &NestedCastles, tests: &[Bisection], big_n: usize) -> Result<Strata> {
    let tree = system.tree();
    let mut index: BTreeMap<Vec<String>, LevelId> = BTreeMap::new();
    let mut sets: BTreeMap<LevelId, ClopenSet> = BTreeMap::new();
    for (p, m) in nested.d.multisections.iter().enumerate() {
        for (t, lv) in m.levels(system)?.iter().enumerate() {
            index.insert(lv.words(), (p, t));
            sets.insert((p, t), lv.clone());
        }
    }
    let mut moves = Vec::with_capacity(2 * tests.len());
    for o in tests {
        moves.push(o.clone());
        moves.push(o.inverse(system)?);
    }
    let mut seen: BTreeSet<LevelId> = nested.c_levels();
    let mut out = vec![seen.iter().copied().collect::<Vec<_>>()];
    let mut unmatched = Vec::new();
    for _ in 1..=big_n + 1 {
        let mut fresh = BTreeSet::new();
        for x in out.last().expect("stratum 0") {
            let lv = &sets[x];
            for u in &moves {
                let src = u.source(tree)?;
                if tree.is_disjoint(lv, &src)? {
                    continue;
                }
                if !tree.is_subset(lv, &src)? {
                    unmatched.push(format!("level {x:?} straddles a test source"));
                    continue;
                }
                let img = u.image(system, lv)?;
                match index.get(&img.words()) {
                    Some(y) if !seen.contains(y) => {
                        fresh.insert(*y);
                    }
                    Some(_) => {}
                    None => unmatched.push(format!("image {img} of level {x:?} is not a D-level")),
                }
            }
        }
        seen.extend(fresh.iter().copied());
        out.push(fresh.into_iter().collect());
    }
    Ok(Strata { strata: out, unmatched })
}

/// A locally constant function with values in `[0, 1]`, as constants on
/// disjoint cells; cells not listed carry 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagonalFunction {
    pub values: BTreeMap<Cell, FracJson>,
}

impl DiagonalFunction {
    pub fn support(&self, system: &System) -> Result<ClopenSet> {
        Ok(system.tree().set(self.values.iter().filter(|(_, v)| v.0 != Frac::zero()).map(|(c, _)| c.clone()))?)
    }

    pub fn depth(&self) -> usize {
        self.values.keys().map(Cell::depth).max().unwrap_or(0)
    }

    /// Whether the function is nonzero somewhere on `cell`.
    pub fn meets(&self, cell: &Cell) -> bool {
        self.values
            .iter()
            .any(|(c, v)| v.0 != Frac::zero() && (c.is_prefix_of(cell.word()) || cell.is_prefix_of(c.word())))
    }

    /// Value on a cell at least as deep as every stored cell.
    pub fn value_at(&self, cell: &Cell) -> Frac {
        for d in 0..=cell.depth() {
            if let Some(v) = self.values.get(&cell.truncate(d)) {
                return v.0;
            }
        }
        Frac::zero()
    }

    /// `μ(g·1_P)`, exact when the measure is.
    pub fn integrate(&self, mu: &MeasureTable, p: &ClopenSet) -> (f64, Option<BigRational>) {
        let mut approx = 0.0;
        let mut exact = Some(BigRational::zero());
        for (cell, v) in &self.values {
            let inside = p.contains_cell(cell);
            let part: Vec<Cell> = if inside {
                vec![cell.clone()]
            } else {
                p.cells().iter().filter(|c| cell.is_prefix_of(c.word())).cloned().collect()
            };
            for c in part {
                approx += mu.mass(&c) * (*v.0.numer() as f64 / *v.0.denom() as f64);
                exact = match (exact, mu.exact_mass(&c)) {
                    (Some(e), Some(m)) => Some(e + m * to_big(&v.0)),
                    _ => None,
                };
            }
        }
        (approx, exact)
    }
}

fn to_big(f: &Frac) -> BigRational {
    BigRational::new(BigInt::from(*f.numer()), BigInt::from(*f.denom()))
}

/// `g_m = Σ_{D ∈ H⁰} κ(D) Σ_{B ∈ P_{D,l,m}} 1_B`.
pub fn psi_diagonal(
    system: &System,
    nested: &NestedCastles,
    ns: &NestingSystem,
    kappa: &BTreeMap<LevelId, Frac>,
) -> Result<Vec<DiagonalFunction>> {
    if kappa.values().any(|v| *v > Frac::one()) {
        return Err(GammaError::Precondition("κ takes values in [0, 1]".into()));
    }
    if let Some(c) = nested.c_levels().iter().find(|c| kappa.get(c) != Some(&Frac::one())) {
        return Err(GammaError::Precondition(format!("κ must be 1 on the C-level {c:?}")));
    }
    let mut out = vec![BTreeMap::new(); ns.n];
    for blk in &ns.blocks {
        let bm = &nested.b.multisections[blk.l];
        for &t in blk.transport.keys() {
            let k = kappa.get(&(blk.p, t)).copied().unwrap_or_else(Frac::zero);
            if k == Frac::zero() {
                continue;
            }
            for (m, g) in out.iter_mut().enumerate() {
                for &i in blk.block_labels(t, m + 1) {
                    for c in bm.level(system, i)?.cells() {
                        if g.insert(c.clone(), FracJson(k)).is_some() {
                            return Err(GammaError::Invariant(format!("cell {c} is assigned twice")));
                        }
                    }
                }
            }
        }
    }
    Ok(out.into_iter().map(|values| DiagonalFunction { values }).collect())
}

/// `f = c·1_O` for a compact open bisection `O`.
#[derive(Debug, Clone)]
pub struct TestElement {
    pub name: String,
    pub bisection: Bisection,
    pub coefficient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Margin {
    pub value: f64,
    pub exact: Option<String>,
    pub bound: f64,
    pub holds: bool,
    pub at: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommutatorMargin {
    pub element: String,
    pub function: usize,
    pub margin: Margin,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaReport {
    pub n: usize,
    pub epsilon: f64,
    pub partition_depth: usize,
    pub orthogonal: bool,
    pub overlap: Option<String>,
    /// `max |μ(g_m 1_P) − μ(1_P)/n|`.
    pub trace: Margin,
    /// `n μ(g_m 1_P) ≤ μ(1_P)` for every block.
    pub trace_upper: bool,
    pub commutators: Vec<CommutatorMargin>,
    pub holds: bool,
}

/// Checks the three conditions for `g_1, …, g_n`: disjoint supports, trace
/// balance on the blocks of the depth-`partition_depth` partition, and
/// commutator norms against `c·1_O`, which equal
/// `|c|·sup_{γ ∈ O} |g(r(γ)) − g(s(γ))|`.
pub fn verify_gamma(
    system: &System,
    gs: &[DiagonalFunction],
    partition_depth: usize,
    measures: &[MeasureTable],
    tests: &[TestElement],
    epsilon: f64,
    n: usize,
) -> Result<GammaReport> {
    let tree = system.tree();
    let mut overlap = None;
    let supports: Vec<ClopenSet> = gs.iter().map(|g| g.support(system)).collect::<Result<_>>()?;
    'outer: for i in 0..supports.len() {
        for j in i + 1..supports.len() {
            let common = tree.intersect(&supports[i], &supports[j])?;
            if !common.is_empty() {
                overlap = Some(format!("g_{} and g_{} share {common}", i + 1, j + 1));
                break 'outer;
            }
        }
    }
    let nn = BigRational::from_integer(BigInt::from(n));
    let mut worst = (f64::NEG_INFINITY, None::<BigRational>, None::<String>);
    let mut upper = true;
    for mu in measures {
        for cell in tree.cells_at_depth(partition_depth)? {
            let p = tree.set([cell.clone()])?;
            let mp = mu.measure(&p);
            let mpe = mu.exact_measure(&p);
            for (m, g) in gs.iter().enumerate() {
                let (v, ve) = g.integrate(mu, &p);
                let (d, de) = match (&ve, &mpe) {
                    (Some(a), Some(b)) => {
                        let d = (a - b / &nn).abs();
                        if &nn * a > *b {
                            upper = false;
                        }
                        (rational_to_f64(&d), Some(d))
                    }
                    _ => {
                        if n as f64 * v > mp + 1e-12 {
                            upper = false;
                        }
                        ((v - mp / n as f64).abs(), None)
                    }
                };
                if d > worst.0 {
                    worst = (d, de, Some(format!("g_{} on {cell}", m + 1)));
                }
            }
        }
    }
    let trace = Margin {
        value: worst.0.max(0.0),
        exact: worst.1.map(|r| r.to_string()),
        bound: epsilon,
        holds: worst.0 < epsilon,
        at: worst.2,
    };
    let mut commutators = Vec::new();
    for t in tests {
        for (m, g) in gs.iter().enumerate() {
            let (sup, at) = commutator_sup(system, g, &t.bisection)?;
            let value = t.coefficient.abs() * frac_f64(&sup);
            commutators.push(CommutatorMargin {
                element: t.name.clone(),
                function: m + 1,
                margin: Margin {
                    value,
                    exact: (t.coefficient.abs() == 1.0).then(|| sup.to_string()),
                    bound: epsilon,
                    holds: value < epsilon,
                    at,
                },
            });
        }
    }
    let holds = overlap.is_none() && trace.holds && upper && commutators.iter().all(|c| c.margin.holds);
    Ok(GammaReport {
        n,
        epsilon,
        partition_depth,
        orthogonal: overlap.is_none(),
        overlap,
        trace,
        trace_upper: upper,
        commutators,
        holds,
    })
}

fn frac_f64(f: &Frac) -> f64 {
    *f.numer() as f64 / *f.denom() as f64
}

/// `sup_{γ ∈ O} |g(r(γ)) − g(s(γ))|` with the arrow where it is attained.
pub fn commutator_sup(system: &System, g: &DiagonalFunction, o: &Bisection) -> Result<(Frac, Option<String>)> {
    let tree = system.tree();
    let dg = g.depth();
    let mut best = (Frac::zero(), None);
    for s in o.slices() {
        let depth = system.locality_depth(dg.max(s.src.max_depth()), s.g.length());
        for cell in tree.refine(&s.src, depth)? {
            let Some(img) = system.translate_cell(s.g, &cell, dg)? else { continue };
            let (a, b) = (g.value_at(&cell), g.value_at(&img));
            let d = if a > b { a - b } else { b - a };
            if d > best.0 || best.1.is_none() {
                best = (d, Some(format!("{} at {cell}", s.g)));
            }
        }
    }
    Ok(best)
}

/// `μ(⋃{A ∈ A⁰ : Σ_m g_m ≡ 0 on A})`.
pub fn count_bound(system: &System, nested: &NestedCastles, gs: &[DiagonalFunction]) -> Result<(f64, Option<BigRational>)> {
    let mu = invariant_measure(system);
    let mut null = Vec::new();
    for m in &nested.a.multisections {
        for lv in m.levels(system)? {
            let zero = lv.cells().iter().all(|c| gs.iter().all(|g| !g.meets(c)));
            if zero {
                null.push(lv.clone());
            }
        }
    }
    let set = system.tree().union_all(null.iter())?;
    Ok((mu.measure(&set), mu.exact_measure(&set)))
}

/// Whether `μ(g_m|_D)` agrees across `m` on every `D`-level; returns the
/// first level where it does not.
pub fn measure_balance(system: &System, nested: &NestedCastles, gs: &[DiagonalFunction]) -> Result<Option<LevelId>> {
    let mu = invariant_measure(system);
    for (p, m) in nested.d.multisections.iter().enumerate() {
        for (t, lv) in m.levels(system)?.iter().enumerate() {
            let vals: Vec<(f64, Option<BigRational>)> = gs.iter().map(|g| g.integrate(&mu, lv)).collect();
            let same = match vals.iter().map(|v| v.1.clone()).collect::<Option<Vec<_>>>() {
                Some(ex) => ex.windows(2).all(|w| w[0] == w[1]),
                None => vals.windows(2).all(|w| (w[0].0 - w[1].0).abs() < 1e-12),
            };
            if !same {
                return Ok(Some((p, t)));
            }
        }
    }
    Ok(None)
}

/// Which `κ` to use: constant 1 on every `D`-level, or the staircase
/// `1 − k/N` on the strata reached from `C⁰` by the test bisections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KappaChoice {
    One,
    Staircase,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaRun {
    pub schema_version: u32,
    pub system: String,
    pub n: usize,
    pub big_n: usize,
    pub k_radius: u64,
    pub kappa: KappaChoice,
    pub nesting: NestingSummary,
    pub strata_sizes: Vec<usize>,
    pub unmatched: Vec<String>,
    pub h_levels: usize,
    pub blocks: usize,
    pub report: GammaReport,
    pub balance_fails_at: Option<LevelId>,
    /// `μ` of the `A`-levels where `Σ g_m` vanishes, against `1/N`.
    pub count: Margin,
    /// `Σ_m μ(g_m|_{⋃A⁰})`.
    pub a_mass: f64,
    pub holds: bool,
}

/// End-to-end run with the generator slice `+1` as the single test element,
/// so `K` is the ball of radius `N + 1`.
pub fn run_gamma(system: &System, n: usize, big_n: usize, epsilon: f64, partition_depth: usize, kappa: KappaChoice) -> Result<GammaRun> {
    let k_radius = big_n as u64 + 1;
    let nested = build_nested_castles(system, k_radius, n, big_n, epsilon)?;
    let shift = Bisection::slice(system, GroupElement::z(1), system.tree().whole())?;
    let st = strata(system, &nested, std::slice::from_ref(&shift), big_n)?;
    let (h, kap) = match kappa {
        KappaChoice::One => {
            let all = nested.d_levels();
            let kap = all.iter().map(|x| (*x, Frac::one())).collect();
            (all, kap)
        }
        KappaChoice::Staircase => (st.h_levels(big_n), st.staircase(big_n)),
    };
    let ns = build_nesting_system(system, &nested, &h)?;
    let gs = psi_diagonal(system, &nested, &ns, &kap)?;
    let tests = vec![
        TestElement { name: "unit".into(), bisection: Bisection::identity(system, system.tree().whole()), coefficient: 1.0 },
        TestElement { name: "shift".into(), bisection: shift, coefficient: 1.0 },
    ];
    let report = verify_gamma(system, &gs, partition_depth, &[invariant_measure(system)], &tests, epsilon, n)?;
    let balance = measure_balance(system, &nested, &gs)?;
    let (cv, ce) = count_bound(system, &nested, &gs)?;
    let bound = BigRational::new(BigInt::one(), BigInt::from(big_n));
    let count_holds = match &ce {
        Some(e) => *e <= bound,
        None => cv <= 1.0 / big_n as f64,
    };
    let count = Margin { value: cv, exact: ce.map(|e| e.to_string()), bound: 1.0 / big_n as f64, holds: count_holds, at: None };
    let mu = invariant_measure(system);
    let a_fp = nested.a.footprint(system)?;
    let a_mass = gs.iter().map(|g| g.integrate(&mu, &a_fp).0).fold(0.0, |a, b| a + b);
    let nesting = nested.summary(system)?;
    let holds = report.holds && balance.is_none() && count.holds && nesting.a_extends_to_b && nesting.c_extends_to_d;
    Ok(GammaRun {
        schema_version: SCHEMA_VERSION,
        system: system.name().to_string(),
        n,
        big_n,
        k_radius,
        kappa,
        nesting,
        strata_sizes: st.strata.iter().map(Vec::len).collect(),
        unmatched: st.unmatched,
        h_levels: h.len(),
        blocks: ns.blocks.len(),
        report,
        balance_fails_at: balance,
        count,
        a_mass,
        holds,
    })
}
