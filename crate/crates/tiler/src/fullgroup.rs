//! Topological full group elements and their finite permutation models on
//! orbit windows.

use std::collections::{BTreeMap, BTreeSet};

use num_rational::BigRational;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cantor::{CantorError, ClopenSet};
use crate::density::{density_stage, DensityError};
use crate::folner::{FolnerError, Stage};
use crate::groupoid::{Bisection, CompactSet, GroupoidError, Slice};
use crate::report::{frac, frac_le, frac_value, Frac, FracJson, RationalJson, SCHEMA_VERSION};
use crate::systems::{invariant_measure, rational_to_f64, GroupElement, MeasureTable, PointCode, System, SystemError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FullGroupError {
    #[error(transparent)]
    Groupoid(#[from] GroupoidError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Cantor(#[from] CantorError),
    #[error(transparent)]
    Folner(#[from] FolnerError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error("not a full bisection: {0}")]
    NotFull(String),
    #[error("{0}")]
    Precondition(String),
    #[error("stage: {0}")]
    Stage(String),
    #[error("element file: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, FullGroupError>;

/// `π_B` for a bisection `B` with `s(B) = r(B) = X`. The bisection form is
/// canonical, so equality of values is equality in the group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FullGroupElement {
    bisection: Bisection,
}

impl Serialize for FullGroupElement {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.bisection.serialize(s)
    }
}

impl FullGroupElement {
    pub fn new(system: &System, bisection: Bisection) -> Result<Self> {
        let tree = system.tree();
        let src = bisection.source(tree)?;
        if !src.is_whole() {
            return Err(FullGroupError::NotFull(format!("source misses {}", tree.complement(&src)?)));
        }
        let rng = bisection.range(system)?;
        if !rng.is_whole() {
            return Err(FullGroupError::NotFull(format!("range misses {}", tree.complement(&rng)?)));
        }
        Ok(Self { bisection })
    }

    pub fn identity(system: &System) -> Self {
        Self { bisection: Bisection::identity(system, system.tree().whole()) }
    }

    /// From pieces `(g_i, C_i)`; both `{C_i}` and `{g_i C_i}` must partition `X`.
    pub fn from_pieces(system: &System, pieces: Vec<(GroupElement, ClopenSet)>) -> Result<Self> {
        let slices = pieces
            .into_iter()
            .filter(|(_, c)| !c.is_empty())
            .map(|(g, c)| Slice::new(system, g, c))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let b = Bisection::from_slices(system, slices).map_err(|e| FullGroupError::NotFull(e.to_string()))?;
        Self::new(system, b)
    }

    /// Exchanges level `i` and level `j` of the tower `base, base+1, …` for
    /// every pair, fixing all other points.
    pub fn tower_transposition(system: &System, base: &ClopenSet, pairs: &[(usize, usize)]) -> Result<Self> {
        let tree = system.tree();
        let mut pieces = Vec::new();
        let mut moved = Vec::new();
        for &(i, j) in pairs {
            let li = system.act_on_set(GroupElement::z(i as i64), base)?;
            let lj = system.act_on_set(GroupElement::z(j as i64), base)?;
            pieces.push((GroupElement::z(j as i64 - i as i64), li.clone()));
            pieces.push((GroupElement::z(i as i64 - j as i64), lj.clone()));
            moved.push(li);
            moved.push(lj);
        }
        let rest = tree.complement(&tree.union_all(moved.iter())?)?;
        pieces.push((GroupElement::zero(system.rank()), rest));
        let mut merged: BTreeMap<GroupElement, Vec<ClopenSet>> = BTreeMap::new();
        for (g, c) in pieces {
            merged.entry(g).or_default().push(c);
        }
        let pieces = merged
            .into_iter()
            .map(|(g, cs)| Ok((g, tree.union_all(cs.iter())?)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_pieces(system, pieces)
    }

    pub fn bisection(&self) -> &Bisection {
        &self.bisection
    }

    /// `self ∘ other`.
    pub fn compose(&self, system: &System, other: &Self) -> Result<Self> {
        Self::new(system, self.bisection.compose(system, &other.bisection)?)
    }

    pub fn inverse(&self, system: &System) -> Result<Self> {
        Ok(Self { bisection: self.bisection.inverse(system)? })
    }

    /// `{u : φ(u) ≠ u}`; on free systems these are the pieces with `g ≠ 0`.
    pub fn support(&self, system: &System) -> Result<ClopenSet> {
        let pieces: Vec<&ClopenSet> = self.bisection.elements().filter(|(g, _)| !g.is_zero()).map(|(_, c)| c).collect();
        Ok(system.tree().union_all(pieces)?)
    }

    pub fn is_identity(&self) -> bool {
        self.bisection.elements().all(|(g, _)| g.is_zero())
    }

    pub fn apply(&self, system: &System, u: &PointCode) -> Result<PointCode> {
        self.bisection
            .apply(system, u)?
            .ok_or_else(|| FullGroupError::NotFull(format!("{u} is outside the source")))
    }

    pub fn element_at(&self, system: &System, u: &PointCode) -> Result<GroupElement> {
        self.bisection
            .element_at(system, u)?
            .ok_or_else(|| FullGroupError::NotFull(format!("{u} is outside the source")))
    }

    pub fn table(&self) -> ElementTable {
        ElementTable {
            name: String::new(),
            pieces: self.bisection.elements().map(|(g, c)| PieceRecord { g: *g, cells: c.words() }).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceRecord {
    pub g: GroupElement,
    pub cells: Vec<String>,
}

/// One named element as a partition table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementTable {
    pub name: String,
    pub pieces: Vec<PieceRecord>,
}

impl ElementTable {
    pub fn to_element(&self, system: &System) -> Result<FullGroupElement> {
        let tree = system.tree();
        let mut pieces = Vec::with_capacity(self.pieces.len());
        for p in &self.pieces {
            let words: Vec<&str> = p.cells.iter().map(String::as_str).collect();
            pieces.push((p.g, tree.set_from_words(&words)?));
        }
        let total: usize = pieces.iter().map(|(_, c)| c.len()).sum();
        let union = tree.union_all(pieces.iter().map(|(_, c)| c))?;
        let disjoint = pieces.iter().enumerate().all(|(i, a)| {
            pieces[i + 1..].iter().all(|b| tree.is_disjoint(&a.1, &b.1).unwrap_or(false))
        });
        if !disjoint || total == 0 || !union.is_whole() {
            return Err(FullGroupError::NotFull(format!("the pieces of {} do not partition the space", self.name)));
        }
        FullGroupElement::from_pieces(system, pieces)
    }
}

pub fn parse_elements(system: &System, text: &str) -> Result<Vec<(String, FullGroupElement)>> {
    let tables: Vec<ElementTable> = serde_json::from_str(text).map_err(|e| FullGroupError::Parse(e.to_string()))?;
    tables.iter().map(|t| Ok((t.name.clone(), t.to_element(system)?))).collect()
}

/// `P_n = r(T_n u_n)` in orbit coordinates: point `k` is `t_k·u_n`.
#[derive(Debug, Clone)]
pub struct SoficStage {
    pub base: PointCode,
    pub elements: Vec<GroupElement>,
    points: Vec<PointCode>,
    coord: BTreeMap<GroupElement, usize>,
}

impl SoficStage {
    pub fn new(system: &System, base: PointCode, elements: Vec<GroupElement>) -> Result<Self> {
        if system.is_partial() {
            return Err(FullGroupError::Precondition("orbit windows need a total action".into()));
        }
        let mut elements = elements;
        elements.sort();
        elements.dedup();
        let mut points = Vec::with_capacity(elements.len());
        let mut seen = BTreeSet::new();
        for g in &elements {
            let p = system.normalize_point(&system.act(*g, &base)?)?;
            if !seen.insert(p.clone()) {
                return Err(FullGroupError::Stage(format!("r is not injective on the window: {p} repeats")));
            }
            points.push(p);
        }
        let coord = elements.iter().enumerate().map(|(i, g)| (*g, i)).collect();
        Ok(Self { base, elements, points, coord })
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn points(&self) -> &[PointCode] {
        &self.points
    }

    /// `φ` on the window: `Some(j)` when `φ(p_i) = p_j`, `None` when it leaves.
    pub fn partial_map(&self, system: &System, phi: &FullGroupElement) -> Result<Vec<Option<usize>>> {
        let mut out = Vec::with_capacity(self.len());
        for (g, p) in self.elements.iter().zip(&self.points) {
            let h = phi.element_at(system, p)?;
            out.push(self.coord.get(&(h + *g)).copied());
        }
        Ok(out)
    }
}

/// `θ_n(φ)`: `φ` on `φ⁻¹(P) ∩ P`, completed by the order-preserving
/// matching of `P ∖ φ⁻¹(P)` onto `P ∖ φ(P)`.
pub fn sofic_map(system: &System, phi: &FullGroupElement, stage: &SoficStage) -> Result<Vec<usize>> {
    let partial = stage.partial_map(system, phi)?;
    let hit: BTreeSet<usize> = partial.iter().flatten().copied().collect();
    let leave: Vec<usize> = (0..stage.len()).filter(|&i| partial[i].is_none()).collect();
    let free: Vec<usize> = (0..stage.len()).filter(|j| !hit.contains(j)).collect();
    if leave.len() != free.len() || hit.len() + free.len() != stage.len() {
        return Err(FullGroupError::Stage(format!(
            "σ and ρ do not fit: {} leaving, {} unreached, {} hit",
            leave.len(),
            free.len(),
            hit.len()
        )));
    }
    let mut out: Vec<usize> = partial.iter().map(|x| x.unwrap_or(usize::MAX)).collect();
    for (i, j) in leave.into_iter().zip(free) {
        out[i] = j;
    }
    Ok(out)
}

pub fn compose_perm(a: &[usize], b: &[usize]) -> Vec<usize> {
    b.iter().map(|&x| a[x]).collect()
}

pub fn hamming(a: &[usize], b: &[usize]) -> Frac {
    frac(a.iter().zip(b).filter(|(x, y)| x != y).count(), a.len())
}

fn identity_perm(n: usize) -> Vec<usize> {
    (0..n).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProductDefect {
    pub f: String,
    pub g: String,
    pub defect: FracJson,
    /// `θ(fg) = θ(f)θ(g)` on `f⁻¹(P) ∩ g⁻¹(P) ∩ g⁻¹f⁻¹(P) ∩ P`.
    pub interior_exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Displacement {
    pub f: String,
    pub distance: FracJson,
    pub floor: f64,
    pub support_measure: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntersectionBound {
    /// `|⋂_{g ∈ F ∪ F²} g⁻¹(P) ∩ P|`.
    pub intersection: usize,
    /// `|{γ ∈ S : Kγ ⊆ S}|`.
    pub interior: usize,
    pub size: usize,
    /// `1 − interior/size`, the least `ε` for which `S` is `(K, ε)`-Følner in the inner sense.
    pub epsilon: FracJson,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRow {
    pub size: usize,
    pub max_defect: FracJson,
    pub defect_bound: FracJson,
    pub products: Vec<ProductDefect>,
    pub displacements: Vec<Displacement>,
    pub intersection: IntersectionBound,
    /// `D⁻` of each support on the window's stage.
    pub support_densities: Vec<(String, FracJson)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SoficReport {
    pub schema_version: u32,
    pub system: String,
    pub elements: Vec<String>,
    pub rows: Vec<StageRow>,
    pub defects_decrease: bool,
    pub defects_bounded: bool,
    pub displacements_hold: bool,
    pub intersections_hold: bool,
    /// The support floors are only promised on minimal systems.
    pub minimal: bool,
}

impl SoficReport {
    pub fn holds(&self) -> bool {
        self.defects_bounded && self.defects_decrease && self.intersections_hold && (self.displacements_hold || !self.minimal)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("size,f,g,defect,bound\n");
        for r in &self.rows {
            for p in &r.products {
                out.push_str(&format!("{},{},{},{},{}\n", r.size, p.f, p.g, p.defect.0, r.defect_bound.0));
            }
            for d in &r.displacements {
                out.push_str(&format!("{},{},id,{},{}\n", r.size, d.f, d.distance.0, d.floor));
            }
        }
        out
    }
}

/// `K = ⋃ V_iV_j ∪ ⋃ V_i ∪ X` as slices.
pub fn assembled_k(system: &System, elements: &[FullGroupElement]) -> Result<CompactSet> {
    let mut slices = vec![Slice::new(system, GroupElement::zero(system.rank()), system.tree().whole())?];
    for f in elements {
        slices.extend(f.bisection().slices());
        for g in elements {
            slices.extend(f.compose(system, g)?.bisection().slices());
        }
    }
    Ok(CompactSet::new(slices))
}

fn support_measure(mu: &MeasureTable, set: &ClopenSet) -> (f64, Option<BigRational>) {
    let e = mu.exact_measure(set);
    (e.as_ref().map_or_else(|| mu.measure(set), rational_to_f64), e)
}

/// Per stage: multiplicativity defects over `F²`, displacement against
/// `inf_μ μ(supp f)/3`, and the intersection bound for the assembled `K`.
/// The window at size `s` is `t·u` for `t` in the interval stage of that
/// size, based at `base`.
pub fn sofic_report(
    system: &System,
    elements: &[(String, FullGroupElement)],
    sizes: &[usize],
    base: &PointCode,
    measures: &[MeasureTable],
) -> Result<SoficReport> {
    if system.rank() != 1 {
        return Err(FullGroupError::Precondition("orbit windows are intervals of Z".into()));
    }
    let names: Vec<String> = elements.iter().map(|e| e.0.clone()).collect();
    let elems: Vec<FullGroupElement> = elements.iter().map(|e| e.1.clone()).collect();
    let k = assembled_k(system, &elems)?;
    let supports: Vec<ClopenSet> = elems.iter().map(|f| f.support(system)).collect::<Result<_>>()?;
    let floors: Vec<(f64, f64)> = supports
        .iter()
        .map(|s| {
            let m = measures.iter().map(|mu| support_measure(mu, s).0).fold(f64::INFINITY, f64::min);
            (m, m / 3.0)
        })
        .collect();
    let mut products_of = BTreeMap::new();
    for (i, f) in elems.iter().enumerate() {
        for (j, g) in elems.iter().enumerate() {
            products_of.insert((i, j), f.compose(system, g)?);
        }
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let window: Vec<GroupElement> = (0..size as i64).map(GroupElement::z).collect();
        let stage = SoficStage::new(system, base.clone(), window.clone())?;
        let n = stage.len();
        let theta: Vec<Vec<usize>> = elems.iter().map(|f| sofic_map(system, f, &stage)).collect::<Result<_>>()?;
        let partials: Vec<Vec<Option<usize>>> =
            elems.iter().map(|f| stage.partial_map(system, f)).collect::<Result<_>>()?;
        let mut products = Vec::new();
        let mut max_defect = frac(0, 1);
        let mut all_partials: Vec<Vec<Option<usize>>> = partials.clone();
        for (i, _) in elems.iter().enumerate() {
            for (j, _) in elems.iter().enumerate() {
                let fg = &products_of[&(i, j)];
                let lhs = sofic_map(system, fg, &stage)?;
                let rhs = compose_perm(&theta[i], &theta[j]);
                let defect = hamming(&lhs, &rhs);
                let pfg = stage.partial_map(system, fg)?;
                let interior_exact = (0..n).all(|u| {
                    let inside = partials[j][u].is_some_and(|v| partials[i][v].is_some()) && pfg[u].is_some();
                    !inside || lhs[u] == rhs[u]
                });
                all_partials.push(pfg);
                max_defect = max_defect.max(defect);
                products.push(ProductDefect { f: names[i].clone(), g: names[j].clone(), defect: FracJson(defect), interior_exact });
            }
        }
        let mut displacements = Vec::new();
        for (i, f) in elems.iter().enumerate() {
            if f.is_identity() {
                continue;
            }
            let d = hamming(&theta[i], &identity_perm(n));
            displacements.push(Displacement {
                f: names[i].clone(),
                distance: FracJson(d),
                floor: floors[i].1,
                support_measure: floors[i].0,
                holds: !frac_le(&d, floors[i].1),
            });
        }
        let intersection_count = (0..n).filter(|&u| all_partials.iter().all(|p| p[u].is_some())).count();
        let mut interior = 0;
        for (g, p) in stage.elements.iter().zip(stage.points()) {
            let ks = k.elements_at(system, p)?;
            if ks.iter().all(|e| stage.coord.contains_key(&(*e + *g))) {
                interior += 1;
            }
        }
        let eps = frac(n - interior, n);
        let intersection = IntersectionBound {
            intersection: intersection_count,
            interior,
            size: n,
            epsilon: FracJson(eps),
            holds: intersection_count >= interior,
        };
        let dstage = Stage::Uniform(window);
        let mut support_densities = Vec::new();
        for (name, s) in names.iter().zip(&supports) {
            if !s.is_empty() {
                support_densities.push((name.clone(), density_stage(system, &dstage, s)?.inf));
            }
        }
        rows.push(StageRow {
            size: n,
            max_defect: FracJson(max_defect),
            defect_bound: FracJson(frac(4, n)),
            products,
            displacements,
            intersection,
            support_densities,
        });
    }
    let defects_decrease = rows.windows(2).all(|w| w[1].max_defect.0 <= w[0].max_defect.0);
    let defects_bounded = rows.iter().all(|r| r.max_defect.0 <= r.defect_bound.0);
    let displacements_hold = rows.iter().all(|r| r.displacements.iter().all(|d| d.holds));
    let intersections_hold = rows.iter().all(|r| r.intersection.holds);
    Ok(SoficReport {
        schema_version: SCHEMA_VERSION,
        system: system.name().to_string(),
        elements: names,
        rows,
        defects_decrease,
        defects_bounded,
        displacements_hold,
        intersections_hold,
        minimal: !system.is_partial(),
    })
}

/// The two height-8 elements used by the default sofic run on an odometer:
/// `f` swaps levels `0↔1` and `2↔3`, `g` swaps `1↔2` and `5↔6`, of the tower
/// over the depth-3 cylinder of `0`.
pub fn default_elements(system: &System) -> Result<Vec<(String, FullGroupElement)>> {
    let u = system.free_unit();
    let base = system.tree().set([system.cell_of(&u, 3)?])?;
    Ok(vec![
        ("id".into(), FullGroupElement::identity(system)),
        ("f".into(), FullGroupElement::tower_transposition(system, &base, &[(0, 1), (2, 3)])?),
        ("g".into(), FullGroupElement::tower_transposition(system, &base, &[(1, 2), (5, 6)])?),
    ])
}

/// Base point of the default windows: three steps along the orbit of the
/// system's free point, so windows do not start on a tower base.
pub fn default_base(system: &System) -> Result<PointCode> {
    Ok(system.normalize_point(&system.act(GroupElement::z(3), &system.free_unit())?)?)
}

pub fn default_sofic(system: &System, sizes: &[usize]) -> Result<SoficReport> {
    sofic_report(system, &default_elements(system)?, sizes, &default_base(system)?, &[invariant_measure(system)])
}

/// Exact value of `inf_μ μ(supp f)` when available.
pub fn support_mass(system: &System, f: &FullGroupElement) -> Result<Option<RationalJson>> {
    Ok(invariant_measure(system).exact_measure(&f.support(system)?).map(RationalJson))
}

/// Whether every row's max defect is at most the value of `bound(size)`.
pub fn defects_within(report: &SoficReport, bound: impl Fn(usize) -> f64) -> bool {
    report.rows.iter().all(|r| frac_value(&r.max_defect.0) <= bound(r.size))
}
