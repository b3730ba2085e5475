//! Banach densities along Følner sequences and their comparison with
//! invariant measures.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use serde::Serialize;
use thiserror::Error;

use crate::cantor::{CantorError, Cell, ClopenSet};
use crate::folner::{FolnerError, FolnerSequence, Stage, StageClass};
use crate::report::{frac, frac_value, Frac, FracJson, SCHEMA_VERSION};
use crate::systems::{rational_to_f64, GroupElement, MeasureTable, PointCode, System, SystemError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DensityError {
    #[error(transparent)]
    Folner(#[from] FolnerError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Cantor(#[from] CantorError),
    #[error("translate of {cell} by {g} is not determined at depth {depth}")]
    Undetermined { cell: String, g: GroupElement, depth: usize },
    #[error("{0}")]
    Precondition(String),
}

pub type Result<T> = std::result::Result<T, DensityError>;

/// `inf_u` and `sup_u` of `|A ∩ r(Su)| / |Su|` for one stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageDensity {
    pub inf: FracJson,
    pub sup: FracJson,
    /// Depth of the cells the counts were read on.
    pub depth: usize,
    pub inf_at: Option<String>,
    pub sup_at: Option<String>,
}

/// Visits every cell on which the counts `|B ∩ r(Su)|` for each `B` in
/// `sets` are constant, reading them `extra` levels below the locality depth.
/// The callback gets the cell, `|Su|` and the counts.
pub fn class_counts<F>(system: &System, classes: &[StageClass], sets: &[&ClopenSet], extra: usize, mut visit: F) -> Result<usize>
where
    F: FnMut(&Cell, usize, &[usize]) -> Result<()>,
{
    let depth_sets = sets.iter().map(|s| s.max_depth()).max().unwrap_or(0);
    let mut used = 0usize;
    let mut counts = vec![0usize; sets.len()];
    for class in classes {
        if class.elements.is_empty() || class.set.is_empty() {
            continue;
        }
        let radius = class.elements.iter().map(GroupElement::length).max().unwrap_or(0);
        let local = system.locality_depth(depth_sets, radius) + extra;
        let sys = if local > system.tree().depth_cap() { system.with_depth_cap(local) } else { system.clone() };
        let elements: Vec<GroupElement> = class.elements.iter().copied().collect();
        for c in class.set.cells() {
            let cells = if c.depth() >= local { vec![c.clone()] } else { sys.extensions(c, local)? };
            for cell in cells {
                used = used.max(cell.depth());
                counts.iter_mut().for_each(|k| *k = 0);
                for (h, t) in elements.iter().zip(sys.translate_cell_many(&elements, &cell, depth_sets)?) {
                    let t = t.ok_or_else(|| DensityError::Undetermined { cell: cell.to_string(), g: *h, depth: depth_sets })?;
                    for (k, set) in counts.iter_mut().zip(sets) {
                        *k += set.contains_cell(&t) as usize;
                    }
                }
                visit(&cell, class.elements.len(), &counts)?;
            }
        }
    }
    Ok(used)
}

/// Exact densities of `a` over `classes`, reading counts on cells `extra`
/// levels below the locality depth.
pub fn density_of_classes(system: &System, classes: &[StageClass], a: &ClopenSet, extra: usize) -> Result<StageDensity> {
    let mut best: Option<(Frac, String, Frac, String)> = None;
    let used = class_counts(system, classes, &[a], extra, |cell, size, counts| {
        let r = frac(counts[0], size);
        match &mut best {
            None => best = Some((r, cell.to_string(), r, cell.to_string())),
            Some((lo, lo_at, hi, hi_at)) => {
                if r < *lo {
                    *lo = r;
                    *lo_at = cell.to_string();
                }
                if r > *hi {
                    *hi = r;
                    *hi_at = cell.to_string();
                }
            }
        }
        Ok(())
    })?;
    Ok(match best {
        Some((lo, lo_at, hi, hi_at)) => StageDensity {
            inf: FracJson(lo),
            sup: FracJson(hi),
            depth: used,
            inf_at: Some(lo_at),
            sup_at: Some(hi_at),
        },
        None => StageDensity { inf: FracJson(frac(0, 1)), sup: FracJson(frac(0, 1)), depth: 0, inf_at: None, sup_at: None },
    })
}

pub fn density_stage(system: &System, stage: &Stage, a: &ClopenSet) -> Result<StageDensity> {
    density_of_classes(system, &stage.classes(system)?, a, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityRow {
    pub stage: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub inf: FracJson,
    pub sup: FracJson,
    pub depth: usize,
}

/// The four limits, estimated over the trailing window of stages.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityEstimates {
    /// limsup of the infima.
    pub lower_plus: FracJson,
    /// liminf of the infima.
    pub lower_minus: FracJson,
    /// limsup of the suprema.
    pub upper_plus: FracJson,
    /// liminf of the suprema.
    pub upper_minus: FracJson,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityReport {
    pub schema_version: u32,
    pub set: Vec<String>,
    pub rows: Vec<DensityRow>,
    pub window: usize,
    pub estimates: Option<DensityEstimates>,
}

impl DensityReport {
    pub fn from_rows(set: &ClopenSet, rows: Vec<DensityRow>, window: usize) -> Self {
        let tail = &rows[rows.len().saturating_sub(window.max(1))..];
        let window = tail.len();
        let estimates = (!tail.is_empty()).then(|| {
            let infs = tail.iter().map(|r| r.inf.0);
            let sups = tail.iter().map(|r| r.sup.0);
            DensityEstimates {
                lower_plus: FracJson(infs.clone().max().unwrap()),
                lower_minus: FracJson(infs.min().unwrap()),
                upper_plus: FracJson(sups.clone().max().unwrap()),
                upper_minus: FracJson(sups.min().unwrap()),
            }
        });
        Self { schema_version: SCHEMA_VERSION, set: set.words(), rows, window, estimates }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,min_size,max_size,inf,sup,depth\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.stage,
                r.min_size,
                r.max_size,
                frac_value(&r.inf.0),
                frac_value(&r.sup.0),
                r.depth
            ));
        }
        out
    }
}

/// Densities of `a` at the given stages of `seq`, with the last `window`
/// stages used for the limit estimates.
pub fn density_limits(seq: &FolnerSequence, a: &ClopenSet, stages: &[usize], window: usize) -> Result<DensityReport> {
    let sys = &seq.system;
    let mut rows = Vec::with_capacity(stages.len());
    for &n in stages {
        let stage = seq.stage(n)?;
        let classes = stage.classes(sys)?;
        let sizes = classes.iter().filter(|c| !c.set.is_empty()).map(|c| c.elements.len());
        let (min_size, max_size) = (sizes.clone().min().unwrap_or(0), sizes.max().unwrap_or(0));
        let d = density_of_classes(sys, &classes, a, 0)?;
        rows.push(DensityRow { stage: n, min_size, max_size, inf: d.inf, sup: d.sup, depth: d.depth });
    }
    Ok(DensityReport::from_rows(a, rows, window))
}

/// Measure of a set under a table, exactly when the table allows it.
fn measure_of(table: &MeasureTable, a: &ClopenSet) -> (f64, Option<BigRational>) {
    match table.exact_measure(a) {
        Some(r) => (rational_to_f64(&r), Some(r)),
        None => (table.measure(a), None),
    }
}

fn to_big(f: &Frac) -> BigRational {
    BigRational::new(BigInt::from(*f.numer()), BigInt::from(*f.denom()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub control: usize,
    pub tolerance: f64,
    pub sup_measure: f64,
    pub lower_bound: f64,
    pub upper_minus: FracJson,
    pub upper_plus: FracJson,
    /// `|D̄⁺ − sup μ|` and `|D̄⁻ − sup μ|`.
    pub gap_plus: f64,
    pub gap_minus: f64,
    /// Exact differences when every measure is exact.
    pub exact_gaps: Option<(String, String)>,
    pub sandwich_holds: bool,
    /// For `N = 1`: both gaps within tolerance.
    pub equality_holds: Option<bool>,
}

/// Checks `(1/N) sup μ(A) ≤ D̄⁻ ≤ D̄⁺ ≤ sup μ(A)` up to `tolerance`.
pub fn compare_density_measure(
    report: &DensityReport,
    a: &ClopenSet,
    measures: &[MeasureTable],
    control: usize,
    tolerance: f64,
) -> Result<GapReport> {
    if measures.is_empty() || control == 0 {
        return Err(DensityError::Precondition("need at least one measure and N ≥ 1".into()));
    }
    let est = report.estimates.as_ref().ok_or_else(|| DensityError::Precondition("no stages in the report".into()))?;
    let values: Vec<(f64, Option<BigRational>)> = measures.iter().map(|m| measure_of(m, a)).collect();
    let sup_measure = values.iter().map(|v| v.0).fold(f64::NEG_INFINITY, f64::max);
    let exact_sup = values.iter().map(|v| v.1.clone()).collect::<Option<Vec<_>>>().and_then(|v| v.into_iter().max());
    let up = frac_value(&est.upper_plus.0);
    let um = frac_value(&est.upper_minus.0);
    let lower_bound = sup_measure / control as f64;
    let sandwich_holds = lower_bound - tolerance <= um && um <= up && up <= sup_measure + tolerance;
    let exact_gaps = exact_sup.map(|s| {
        let gp = to_big(&est.upper_plus.0) - &s;
        let gm = to_big(&est.upper_minus.0) - &s;
        (gp.to_string(), gm.to_string())
    });
    let gap_plus = (up - sup_measure).abs();
    let gap_minus = (um - sup_measure).abs();
    Ok(GapReport {
        control,
        tolerance,
        sup_measure,
        lower_bound,
        upper_minus: est.upper_minus,
        upper_plus: est.upper_plus,
        gap_plus,
        gap_minus,
        exact_gaps,
        sandwich_holds,
        equality_holds: (control == 1).then_some(gap_plus < tolerance && gap_minus < tolerance),
    })
}

/// `μ = (1/|Su|) Σ_{γ∈Su} δ_{r(γ)}` tabulated on cells of one depth, with
/// the total-variation distance to its translate by each generator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalMeasure {
    pub stage: usize,
    pub unit: String,
    pub size: usize,
    pub depth: usize,
    pub masses: BTreeMap<String, FracJson>,
    pub defects: Vec<(GroupElement, FracJson)>,
}

impl EmpiricalMeasure {
    pub fn table(&self, system: &System) -> Result<MeasureTable> {
        let mut masses = BTreeMap::new();
        for (w, m) in &self.masses {
            masses.insert(system.tree().parse_cell(w)?, frac_value(&m.0));
        }
        Ok(MeasureTable::Empirical { tree: system.tree().clone(), depth: self.depth, masses })
    }

    pub fn max_defect(&self) -> Frac {
        self.defects.iter().map(|d| d.1 .0).max().unwrap_or(frac(0, 1))
    }
}

fn counts(system: &System, points: &[PointCode], shift: GroupElement, depth: usize) -> Result<BTreeMap<Cell, usize>> {
    let mut out = BTreeMap::new();
    for p in points {
        let q = system.completion().act(shift, p)?;
        *out.entry(system.cell_of(&q, depth)?).or_insert(0) += 1;
    }
    Ok(out)
}

/// Empirical measure of the fiber at `u` of each stage of `seq`.
pub fn empirical_invariant_measure(
    seq: &FolnerSequence,
    stages: &[usize],
    u: &PointCode,
    depth: usize,
) -> Result<Vec<EmpiricalMeasure>> {
    let sys = &seq.system;
    let mut out = Vec::with_capacity(stages.len());
    for &n in stages {
        let fiber = seq.stage(n)?.fiber(sys, u)?;
        let size = fiber.len();
        if size == 0 {
            return Err(DensityError::Precondition(format!("empty fiber at stage {n}")));
        }
        let points = fiber.ranges(sys).map_err(FolnerError::from)?;
        let base = counts(sys, &points, GroupElement::zero(sys.rank()), depth)?;
        let masses = base.iter().map(|(c, k)| (c.to_string(), FracJson(frac(*k, size)))).collect();
        let mut defects = Vec::new();
        for g in GroupElement::generators(sys.rank()) {
            let moved = counts(sys, &points, g, depth)?;
            let mut total = 0usize;
            for c in base.keys().chain(moved.keys()).collect::<std::collections::BTreeSet<_>>() {
                let a = base.get(c).copied().unwrap_or(0);
                let b = moved.get(c).copied().unwrap_or(0);
                total += a.abs_diff(b);
            }
            defects.push((g, FracJson(frac(total, size))));
        }
        out.push(EmpiricalMeasure { stage: n, unit: fiber.base.to_string(), size, depth, masses, defects });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::folner::{build_pathological, kakutani_rokhlin, reindex, SequenceKind};
    use crate::systems::{invariant_measure, SystemSpec};
    use proptest::prelude::*;

    fn odo() -> System {
        SystemSpec::odometer(2).build().unwrap()
    }

    fn fib() -> System {
        SystemSpec::fibonacci().build().unwrap()
    }

    /// Oracle: count pointwise over generic points of every cell of `depth`.
    fn pointwise(sys: &System, stage: &Stage, a: &ClopenSet, depth: usize) -> (Frac, Frac) {
        let mut lo = frac(1, 1);
        let mut hi = frac(0, 1);
        for tp in sys.test_points(depth, 0).unwrap() {
            let f = stage.fiber(sys, &tp.point).unwrap();
            let ranges = f.ranges(sys).unwrap();
            let k = ranges.iter().filter(|p| a.contains_word(&sys.word(p, a.max_depth()).unwrap())).count();
            let r = frac(k, f.len());
            lo = lo.min(r);
            hi = hi.max(r);
        }
        (lo, hi)
    }

    #[test]
    fn kr_rungs_give_one_half() {
        let sys = odo();
        let a = sys.tree().set_from_words(&["0"]).unwrap();
        for k in 1..6 {
            let stage = Stage::Normal(reindex(&kakutani_rokhlin(&sys, 1 << k).unwrap()).unwrap());
            let d = density_stage(&sys, &stage, &a).unwrap();
            assert_eq!((d.inf.0, d.sup.0), (frac(1, 2), frac(1, 2)));
        }
    }

    #[test]
    fn whole_and_empty_sets() {
        let sys = fib();
        let seq = FolnerSequence::new(&sys, SequenceKind::Intervals);
        let whole = density_limits(&seq, &sys.tree().whole(), &[1, 2, 3], 2).unwrap();
        assert!(whole.rows.iter().all(|r| r.inf.0 == frac(1, 1) && r.sup.0 == frac(1, 1)));
        let empty = density_limits(&seq, &sys.tree().empty(), &[1, 2, 3], 2).unwrap();
        let e = empty.estimates.unwrap();
        assert_eq!(e.upper_plus.0, frac(0, 1));
        assert_eq!(e.lower_minus.0, frac(0, 1));
    }

    #[test]
    fn matches_pointwise_counts() {
        let sys = fib();
        let a = sys.tree().set_from_words(&["01"]).unwrap();
        for n in 1..5 {
            let stage = FolnerSequence::new(&sys, SequenceKind::Intervals).stage(n).unwrap();
            let d = density_stage(&sys, &stage, &a).unwrap();
            assert_eq!((d.inf.0, d.sup.0), pointwise(&sys, &stage, &a, d.depth));
        }
        let stage = Stage::Normal(reindex(&kakutani_rokhlin(&sys, 5).unwrap()).unwrap());
        let d = density_stage(&sys, &stage, &a).unwrap();
        assert_eq!((d.inf.0, d.sup.0), pointwise(&sys, &stage, &a, d.depth));
    }

    #[test]
    fn odometer_limits_are_exact() {
        let sys = odo();
        let a = sys.tree().set_from_words(&["0"]).unwrap();
        let seq = FolnerSequence::new(&sys, SequenceKind::KakutaniRokhlin);
        let r = density_limits(&seq, &a, &[1, 2, 3, 4, 5], 3).unwrap();
        let e = r.estimates.clone().unwrap();
        for v in [e.lower_plus, e.lower_minus, e.upper_plus, e.upper_minus] {
            assert_eq!(v.0, frac(1, 2));
        }
        let gap = compare_density_measure(&r, &a, &[invariant_measure(&sys)], 1, 1e-9).unwrap();
        assert_eq!(gap.equality_holds, Some(true));
        assert_eq!(gap.exact_gaps, Some(("0".into(), "0".into())));
    }

    #[test]
    fn fibonacci_letter_frequency() {
        let sys = fib();
        let a = sys.tree().set_from_words(&["0"]).unwrap();
        let seq = FolnerSequence::new(&sys, SequenceKind::Intervals);
        let r = density_limits(&seq, &a, &[6, 7, 8], 2).unwrap();
        let golden = (5f64.sqrt() - 1.0) / 2.0;
        for row in r.rows.iter().filter(|row| row.min_size >= 200) {
            assert!((frac_value(&row.inf.0) - golden).abs() < 0.02);
            assert!((frac_value(&row.sup.0) - golden).abs() < 0.02);
        }
        let gap = compare_density_measure(&r, &a, &[invariant_measure(&sys)], 1, 0.02).unwrap();
        assert_eq!(gap.equality_holds, Some(true));
    }

    #[test]
    fn pathological_density_stays_below_measure() {
        let sys = odo();
        let t = build_pathological(&sys, 1).unwrap();
        let a = sys.tree().complement(&t.v).unwrap();
        let d = density_stage(&sys, &Stage::Pathological(t.clone()), &a).unwrap();
        assert!(d.sup.0 <= frac(2, 3));
        let mu = sys.measure_exact(&a).unwrap();
        assert!(mu > BigRational::new(2.into(), 3.into()));
        let report = DensityReport::from_rows(
            &a,
            vec![DensityRow { stage: 1, min_size: 3, max_size: 3, inf: d.inf, sup: d.sup, depth: d.depth }],
            1,
        );
        let gap = compare_density_measure(&report, &a, &[invariant_measure(&sys)], 1, 1e-9).unwrap();
        assert!(!gap.sandwich_holds);
    }

    #[test]
    fn empirical_measures() {
        let sys = odo();
        let u = sys.free_unit();
        let kr = FolnerSequence::new(&sys, SequenceKind::KakutaniRokhlin);
        for m in empirical_invariant_measure(&kr, &[3, 4, 5], &u, 3).unwrap() {
            assert_eq!(m.masses.len(), 8);
            assert!(m.masses.values().all(|v| v.0 == frac(1, 8)));
            assert_eq!(m.max_defect(), frac(0, 1));
        }
        let unit = FolnerSequence::new(&sys, SequenceKind::Intervals);
        let point = empirical_invariant_measure(&unit, &[0], &u, 3).unwrap();
        assert_eq!(point[0].masses.len(), 1);
        assert_eq!(point[0].max_defect(), frac(2, 1));

        let sys = fib();
        let seq = FolnerSequence::new(&sys, SequenceKind::Intervals);
        let ms = empirical_invariant_measure(&seq, &[3, 5, 7], &sys.free_unit(), 1).unwrap();
        for m in &ms {
            assert!(m.max_defect() <= frac(2, m.size));
        }
        assert!(ms.windows(2).all(|w| frac(2, w[1].size) < frac(2, w[0].size)));
    }

    #[test]
    fn two_sequences_agree_on_fibonacci() {
        let sys = fib().with_depth_cap(160);
        let a = sys.tree().set_from_words(&["0"]).unwrap();
        let kr = Stage::Normal(reindex(&kakutani_rokhlin(&sys, 34).unwrap()).unwrap());
        let iv = FolnerSequence::new(&sys, SequenceKind::Intervals).stage(6).unwrap();
        let x = density_stage(&sys, &kr, &a).unwrap();
        let y = density_stage(&sys, &iv, &a).unwrap();
        assert!((frac_value(&x.sup.0) - frac_value(&y.sup.0)).abs() < 0.05);
    }

    fn arb_set(sys: &System, depth: usize, mask: u64) -> ClopenSet {
        let cells = sys.tree().cells_at_depth(depth).unwrap();
        let chosen: Vec<Cell> = cells.into_iter().enumerate().filter(|(i, _)| mask >> (i % 64) & 1 == 1).map(|(_, c)| c).collect();
        sys.tree().set(chosen).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn refinement_and_complement(depth in 1usize..5, mask in any::<u64>(), n in 1usize..5, fibonacci in any::<bool>()) {
            let sys = if fibonacci { fib() } else { odo() };
            let a = arb_set(&sys, depth, mask);
            let stage = FolnerSequence::new(&sys, SequenceKind::Intervals).stage(n).unwrap();
            let classes = stage.classes(&sys).unwrap();
            let d0 = density_of_classes(&sys, &classes, &a, 0).unwrap();
            let d1 = density_of_classes(&sys, &classes, &a, 1).unwrap();
            prop_assert_eq!((d0.inf, d0.sup), (d1.inf, d1.sup));
            let b = sys.tree().complement(&a).unwrap();
            let e = density_of_classes(&sys, &classes, &b, 0).unwrap();
            prop_assert_eq!(d0.sup.0, frac(1, 1) - e.inf.0);
            prop_assert!(d0.inf.0 <= d0.sup.0);
        }
    }
}
