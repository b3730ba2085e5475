//! Quasi-tilings: `(K, δ)*`-invariance, the castle recursion inside a normal
//! Følner set, and the driver that assembles a certified castle.

use std::collections::BTreeSet;

use num_rational::BigRational;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cantor::{CantorError, ClopenSet};
use crate::castle::{exceptional_units, preimage, validate_castle, Castle, CastleError, CastleRecord};
use crate::density::{class_counts, density_stage, DensityError};
use crate::folner::{
    build_from_group_folner, goodness, validate_normal, worst_ratio, FolnerError, FolnerSequence, NormalFolnerSet,
    SequenceKind, Stage, StageClass,
};
use crate::groupoid::{CompactSet, Criterion, FiberSet, GroupoidError};
use crate::report::{frac, frac_le, frac_lt, frac_value, FracJson, SCHEMA_VERSION};
use crate::systems::{invariant_measure, rational_to_f64, GroupElement, MeasureTable, System, SystemError, SystemSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TilingError {
    #[error(transparent)]
    Folner(#[from] FolnerError),
    #[error(transparent)]
    Density(#[from] DensityError),
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
    #[error("assertion failed ({what}) at {cell}")]
    Assertion { what: String, cell: String },
    #[error("stage {stage}: {reason}")]
    Schedule { stage: usize, reason: String },
    #[error("stage {stage}: density {after} is below the growth bound {bound} (previous {before})")]
    DensityGrowth { stage: usize, before: f64, after: f64, bound: f64 },
    #[error("certificate: {0}")]
    Certificate(String),
}

pub type Result<T> = std::result::Result<T, TilingError>;

/// Outcome of a `(K, δ)*` check against one witness stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StarInvarianceCheck {
    pub delta: f64,
    pub k_radius: u64,
    /// `sup_u |r(KA∖A) ∩ r(Su)| / |A ∩ r(Su)|`.
    pub ratio: Option<FracJson>,
    pub at: Option<String>,
    pub passes: bool,
    pub failure: Option<String>,
    pub depth: usize,
}

/// `r(KA) ∖ A`.
pub fn k_shell(system: &System, k: &CompactSet, a: &ClopenSet) -> Result<ClopenSet> {
    let tree = system.tree();
    let mut parts = Vec::with_capacity(k.slices().len());
    for s in k.slices() {
        parts.push(system.act_on_set(s.g, &tree.intersect(a, &s.src)?)?);
    }
    Ok(tree.difference(&tree.union_all(parts.iter())?, a)?)
}

pub fn check_star_invariance(
    system: &System,
    a: &ClopenSet,
    k: &CompactSet,
    delta: f64,
    stage: &Stage,
) -> Result<StarInvarianceCheck> {
    let shell = k_shell(system, k, a)?;
    let classes = stage.classes(system)?;
    let mut worst: Option<(crate::report::Frac, String)> = None;
    let mut empty_at: Option<String> = None;
    let depth = class_counts(system, &classes, &[&shell, a], 0, |cell, _, counts| {
        if counts[1] == 0 {
            if empty_at.is_none() {
                empty_at = Some(cell.to_string());
            }
            return Ok(());
        }
        let r = frac(counts[0], counts[1]);
        if worst.as_ref().is_none_or(|(w, _)| r > *w) {
            worst = Some((r, cell.to_string()));
        }
        Ok(())
    })?;
    let mut check = StarInvarianceCheck {
        delta,
        k_radius: k.radius(),
        ratio: worst.as_ref().map(|w| FracJson(w.0)),
        at: worst.as_ref().map(|w| w.1.clone()),
        passes: false,
        failure: None,
        depth,
    };
    if let Some(cell) = empty_at {
        check.failure = Some(format!("A misses r(Su) for u in {cell}"));
    } else if let Some((r, at)) = &worst {
        if frac_lt(r, delta) {
            check.passes = true;
        } else {
            check.failure = Some(format!("ratio {r} at {at} is not below δ"));
        }
    }
    Ok(check)
}

/// One nonempty `V_{T,l}` of the castle recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizedClass {
    pub part: usize,
    pub keep: BTreeSet<usize>,
    pub v: ClopenSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecursionOutcome {
    /// One multisection per realized class, in the order of `classes`.
    pub castle: Castle,
    pub classes: Vec<RealizedClass>,
    /// The union of the new levels.
    pub a: ClopenSet,
    /// `A ∪ Y`.
    pub covered: ClopenSet,
    /// `min_u |(A ∪ Y) ∩ r(Su)| / |Su|`.
    pub min_coverage: Option<FracJson>,
}

/// Whether `|T| ≥ (1−ε)|F|`, with `ε` read as its exact binary value.
pub fn large_enough(kept: usize, total: usize, epsilon: f64) -> bool {
    frac_le(&frac(total - kept, total), epsilon)
}

/// The castle recursion over the parts of `s`, starting from `A₀ = Y`. Base
/// units are classified by `T(u) = {i : C_{i,i_l}u ∉ A_{l−1}}` and only the
/// realized classes are restricted.
pub fn castle_recursion(system: &System, s: &NormalFolnerSet, y: &ClopenSet, epsilon: f64) -> Result<RecursionOutcome> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(TilingError::Precondition(format!("ε = {epsilon} must lie in (0, 1/2)")));
    }
    let tree = system.tree();
    let mut acc = y.clone();
    let mut castle = Vec::new();
    let mut classes = Vec::new();
    for (l, part) in s.parts().iter().enumerate() {
        let m = s.multisection(l);
        let base = m.level(system, part.base)?;
        let mut pieces: Vec<(ClopenSet, BTreeSet<usize>)> = vec![(base, m.index().iter().copied().collect())];
        for &i in m.index() {
            let hit = preimage(system, &m.entry(system, i, part.base)?, &acc)?;
            let mut next = Vec::with_capacity(pieces.len() + 1);
            for (v, t) in pieces {
                let inside = tree.intersect(&v, &hit)?;
                let outside = tree.difference(&v, &hit)?;
                if !inside.is_empty() {
                    let mut t2 = t.clone();
                    t2.remove(&i);
                    next.push((inside, t2));
                }
                if !outside.is_empty() {
                    next.push((outside, t));
                }
            }
            pieces = next;
        }
        let mut fresh = Vec::new();
        let mut kept_sets: Vec<&ClopenSet> = Vec::new();
        for (v, t) in &pieces {
            if t.is_empty() || !large_enough(t.len(), m.len(), epsilon) {
                continue;
            }
            for other in &kept_sets {
                if !tree.is_disjoint(other, v)? {
                    return Err(TilingError::Assertion { what: format!("classes of part {l} overlap"), cell: v.to_string() });
                }
            }
            kept_sets.push(v);
            let q = m.restrict(system, part.base, v, t)?;
            let levels = q.footprint(system)?;
            let clash = tree.intersect(&levels, &acc)?;
            if !clash.is_empty() {
                return Err(TilingError::Assertion { what: format!("part {l} reuses covered units"), cell: clash.to_string() });
            }
            fresh.push(levels);
            castle.push(q);
            classes.push(RealizedClass { part: l, keep: t.clone(), v: v.clone() });
        }
        fresh.push(acc);
        acc = tree.union_all(fresh.iter())?;
    }
    let a = tree.difference(&acc, y)?;
    let mut min_coverage: Option<(crate::report::Frac, String)> = None;
    class_counts(system, &s.fiber_classes(system)?, &[&acc], 0, |cell, size, counts| {
        let r = frac(counts[0], size);
        if min_coverage.as_ref().is_none_or(|(m, _)| r < *m) {
            min_coverage = Some((r, cell.to_string()));
        }
        Ok(())
    })?;
    if let Some((r, cell)) = &min_coverage {
        if frac_lt(r, epsilon) {
            return Err(TilingError::Assertion { what: format!("coverage {r} below ε"), cell: cell.clone() });
        }
    }
    Ok(RecursionOutcome {
        castle: Castle::new(castle),
        classes,
        a,
        covered: acc,
        min_coverage: min_coverage.map(|m| FracJson(m.0)),
    })
}

/// Parameters of the quasi-tiling driver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileParams {
    pub epsilon: f64,
    pub eta: f64,
    pub beta: f64,
    pub beta0: f64,
    /// Number of stages the descent would need in the worst case.
    pub n: usize,
    /// Colouring constant of the goodness certificates.
    pub m: usize,
}

/// `η = ε/2`, `β = (ε−η)/(2(1−ε))`, `β₀ = β/2` and the least `n` with
/// `(1−ε/M)^n < 1 − (1−ε)(1+β)/(1−η)`.
pub fn tile_parameters(epsilon: f64, m: usize) -> Result<TileParams> {
    if !(epsilon > 0.0 && epsilon < 0.5) || m == 0 {
        return Err(TilingError::Precondition(format!("need 0 < ε < 1/2 and M ≥ 1, got ε = {epsilon}, M = {m}")));
    }
    let eta = epsilon / 2.0;
    let beta = (epsilon - eta) / (2.0 * (1.0 - epsilon));
    let beta0 = beta / 2.0;
    if epsilon * (1.0 + beta) >= 1.0 {
        return Err(TilingError::Precondition("ε(1+β) ≥ 1".into()));
    }
    let target = 1.0 - (1.0 - epsilon) * (1.0 + beta) / (1.0 - eta);
    let q = 1.0 - epsilon / m as f64;
    let mut n = 1usize;
    while q.powi(n as i32) >= target {
        n += 1;
    }
    Ok(TileParams { epsilon, eta, beta, beta0, n, m })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileOptions {
    /// Følner sequence the stages come from; chosen per system when absent.
    pub kind: Option<SequenceKind>,
    /// Largest stage index tried.
    pub max_stage: usize,
    /// Partition-tree depth cap used for the run.
    pub depth_cap: usize,
}

impl Default for TileOptions {
    fn default() -> Self {
        Self { kind: None, max_stage: 10, depth_cap: 256 }
    }
}

/// `S_p` is `(S_q⁻¹, tolerance)`-Følner, checked against a ball containing `S_q⁻¹`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferCheck {
    pub earlier: usize,
    pub radius: u64,
    pub ratio: Option<FracJson>,
    pub tolerance: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Smallest `N` with `N`-controlled height.
    pub control: usize,
    pub k_ratio: Option<FracJson>,
    pub k_tolerance: f64,
    pub goodness_m: usize,
    pub transfer: Vec<TransferCheck>,
    pub multisections: usize,
    pub min_coverage: Option<FracJson>,
    pub covered_measure: f64,
}

/// The growth inequality `D(B) ≥ (1 − (ε/M)(1+β))·D(A) + (1−η)ε/M` at one
/// step, with lower densities read at a reference stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityStep {
    pub stage: usize,
    pub reference_stage: usize,
    pub before: FracJson,
    pub after: FracJson,
    pub bound: f64,
    pub holds: bool,
    pub retried: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintMeasure {
    pub measure: String,
    pub value: f64,
    pub exact: Option<String>,
    /// `μ(H⁰) > 1 − ε`.
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilingCertificate {
    pub schema_version: u32,
    pub system: SystemSpec,
    pub k_radius: u64,
    pub params: TileParams,
    pub sequence: SequenceKind,
    pub castle: CastleRecord,
    /// `max_u |KHu ∖ Hu| / |Hu|`.
    pub worst_ratio: FracJson,
    pub worst_at: String,
    pub ratio_holds: bool,
    pub footprint: Vec<FootprintMeasure>,
    pub depth: usize,
    pub depth_cap: usize,
    pub stage_trace: Vec<StageTrace>,
    pub density_trace: Vec<DensityStep>,
}

impl TilingCertificate {
    pub fn holds(&self) -> bool {
        self.ratio_holds && self.footprint.iter().all(|f| f.holds)
    }

    pub fn footprint_measure(&self) -> f64 {
        self.footprint.iter().map(|f| f.value).fold(f64::INFINITY, f64::min)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| TilingError::Certificate(e.to_string()))?;
        if c.schema_version != SCHEMA_VERSION {
            return Err(TilingError::Certificate(format!("schema version {} is not {SCHEMA_VERSION}", c.schema_version)));
        }
        Ok(c)
    }
}

fn default_kind(system: &System) -> Result<SequenceKind> {
    if system.rank() != 1 {
        return Err(TilingError::Precondition("quasi-tiling stages are built for Z-systems".into()));
    }
    Ok(if system.is_partial() { SequenceKind::Partial } else { SequenceKind::KakutaniRokhlin })
}

fn normal_stage(seq: &FolnerSequence, n: usize) -> Result<NormalFolnerSet> {
    match seq.stage(n)? {
        Stage::Normal(s) => Ok(s),
        Stage::Uniform(f) => Ok(build_from_group_folner(&seq.system, &f)?),
        Stage::Pathological(_) => Err(TilingError::Precondition("the ill-behaved sets are not normal".into())),
    }
}

fn castle_classes(system: &System, castle: &Castle) -> Result<Vec<StageClass>> {
    Ok(castle
        .fiber_classes(system)?
        .into_iter()
        .map(|c| StageClass { part: Some(c.multisection), set: c.set, elements: c.elements })
        .collect())
}

fn castle_exceptional(system: &System, k: &CompactSet, castle: &Castle) -> Result<Vec<FiberSet>> {
    let mut out = Vec::new();
    for u in exceptional_units(system, k, castle)? {
        let f = castle.fiber(system, &u)?;
        if !f.is_empty() {
            out.push(f);
        }
    }
    Ok(out)
}

/// Worst `|KHu ∖ Hu| / |Hu|` over the footprint of a castle.
pub fn castle_ratio(system: &System, k: &CompactSet, castle: &Castle) -> Result<Option<(crate::report::Frac, String)>> {
    let classes = castle_classes(system, castle)?;
    let exceptional = castle_exceptional(system, k, castle)?;
    Ok(worst_ratio(system, &classes, &exceptional, k, 0.0, Criterion::Difference)?.map(|w| (w.ratio, w.at)))
}

fn footprint_measures(system: &System, castle: &Castle, measures: &[MeasureTable], epsilon: f64) -> Result<Vec<FootprintMeasure>> {
    let fp = castle.footprint(system)?;
    let bound = BigRational::from_integer(1.into()) - BigRational::from_float(epsilon).expect("finite ε");
    Ok(measures
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let name = format!("measure-{i}");
            match m.exact_measure(&fp) {
                Some(r) => FootprintMeasure {
                    measure: name,
                    value: rational_to_f64(&r),
                    exact: Some(r.to_string()),
                    holds: r > bound,
                },
                None => {
                    let v = m.measure(&fp);
                    FootprintMeasure { measure: name, value: v, exact: None, holds: v > 1.0 - epsilon }
                }
            }
        })
        .collect())
}

fn control_of(s: &NormalFolnerSet) -> usize {
    let h = s.height().max(1);
    s.sizes().into_iter().map(|x| x.div_ceil(h)).max().unwrap_or(1)
}

fn max_fiber_radius(system: &System, s: &NormalFolnerSet) -> Result<u64> {
    let mut r = 0;
    for c in s.fiber_classes(system)? {
        r = r.max(c.elements.iter().map(GroupElement::length).max().unwrap_or(0));
    }
    Ok(r)
}

fn density_reference(system: &System, kind: SequenceKind, top: usize) -> (FolnerSequence, usize) {
    if system.is_partial() {
        (FolnerSequence::new(system, kind), top + 2)
    } else {
        (FolnerSequence::new(system, SequenceKind::Intervals), top + 4)
    }
}

fn lower_density(seq: &FolnerSequence, n: usize, a: &ClopenSet) -> Result<crate::report::Frac> {
    Ok(density_stage(&seq.system, &seq.stage(n)?, a)?.inf.0)
}

/// Builds a castle whose fibers are `(K, ε)`-Følner and whose footprint has
/// measure above `1−ε`. The largest stage is run first with nothing covered;
/// smaller stages are added, each meeting the Følner conditions relative to
/// the stages already used, until both conditions hold.
pub fn quasi_tile(system: &System, k_radius: u64, epsilon: f64, options: &TileOptions) -> Result<TilingCertificate> {
    let sys = &system.with_depth_cap(system.tree().depth_cap().max(options.depth_cap));
    let kind = match options.kind {
        Some(k) => k,
        None => default_kind(sys)?,
    };
    let seq = FolnerSequence::new(sys, kind);
    let k = CompactSet::ball(sys, k_radius);
    let measures = [invariant_measure(sys)];
    let mut params = tile_parameters(epsilon, 1)?;
    let k_tol = epsilon - params.beta0 * epsilon;
    let transfer_tol = params.beta0 * (1.0 - epsilon) - params.beta0 * epsilon;

    let mut top = None;
    let mut last_reason = String::from("no stage tried");
    for n in 1..=options.max_stage {
        let s = match normal_stage(&seq, n) {
            Ok(s) => s,
            Err(e) => {
                last_reason = e.to_string();
                continue;
            }
        };
        let v = validate_normal(sys, &s, &k, k_tol, Criterion::Difference)?;
        if !v.valid {
            last_reason = v.failure.unwrap_or_default();
            continue;
        }
        let good = goodness(sys, &s, 1, params.eta, &measures)?;
        let m = if good.is_certified() {
            1
        } else if goodness(sys, &s, s.len(), params.eta, &measures)?.is_certified() {
            s.len()
        } else {
            last_reason = format!("stage {n} has no goodness certificate at η = {}", params.eta);
            continue;
        };
        top = Some((n, s, v.worst_ratio, m));
        break;
    }
    let (top_n, top_s, top_ratio, m) = top.ok_or(TilingError::Schedule { stage: options.max_stage, reason: last_reason })?;
    if m != 1 {
        params = tile_parameters(epsilon, m)?;
    }
    let (ref_seq, mut ref_n) = density_reference(sys, kind, top_n);

    let tree = sys.tree();
    let mut used: Vec<(usize, NormalFolnerSet)> = Vec::new();
    let mut pending = Some((top_n, top_s, top_ratio, Vec::new()));
    let mut covered = tree.empty();
    let mut multisections = Vec::new();
    let mut stage_trace = Vec::new();
    let mut density_trace = Vec::new();
    loop {
        let Some((n, s, k_ratio, transfer)) = pending.take() else { unreachable!() };
        let outcome = castle_recursion(sys, &s, &covered, epsilon)?;
        let before = if covered.is_empty() { frac(0, 1) } else { lower_density(&ref_seq, ref_n, &covered)? };
        let mut after = lower_density(&ref_seq, ref_n, &outcome.covered)?;
        let rate = params.epsilon / params.m as f64;
        let bound = |b: f64| (1.0 - rate * (1.0 + params.beta)) * b + (1.0 - params.eta) * rate;
        let mut holds = frac_value(&after) >= bound(frac_value(&before)) - 1e-12;
        let mut retried = false;
        let mut before_used = before;
        if !holds {
            retried = true;
            ref_n += 1;
            before_used = if covered.is_empty() { frac(0, 1) } else { lower_density(&ref_seq, ref_n, &covered)? };
            after = lower_density(&ref_seq, ref_n, &outcome.covered)?;
            holds = frac_value(&after) >= bound(frac_value(&before_used)) - 1e-12;
        }
        density_trace.push(DensityStep {
            stage: n,
            reference_stage: ref_n,
            before: FracJson(before_used),
            after: FracJson(after),
            bound: bound(frac_value(&before_used)),
            holds,
            retried,
        });
        if !holds {
            return Err(TilingError::DensityGrowth {
                stage: n,
                before: frac_value(&before_used),
                after: frac_value(&after),
                bound: bound(frac_value(&before_used)),
            });
        }
        covered = outcome.covered.clone();
        multisections.extend(outcome.castle.multisections.iter().cloned());
        let (min_size, max_size) = (s.height(), s.sizes().into_iter().max().unwrap_or(0));
        stage_trace.push(StageTrace {
            stage: n,
            min_size,
            max_size,
            control: control_of(&s),
            k_ratio,
            k_tolerance: k_tol,
            goodness_m: params.m,
            transfer,
            multisections: outcome.castle.multisections.len(),
            min_coverage: outcome.min_coverage,
            covered_measure: measures[0].measure(&covered),
        });
        used.push((n, s));

        let castle = Castle::new(multisections.clone());
        let ratio = castle_ratio(sys, &k, &castle)?;
        let footprint = footprint_measures(sys, &castle, &measures, epsilon)?;
        let ratio_holds = ratio.as_ref().is_some_and(|(r, _)| frac_lt(r, epsilon));
        if ratio_holds && footprint.iter().all(|f| f.holds) {
            let verdict = validate_castle(sys, &castle)?;
            if let Some(v) = verdict.violation {
                return Err(TilingError::Assertion { what: "assembled castle".into(), cell: v.to_string() });
            }
            let (r, at) = ratio.expect("ratio present");
            return Ok(TilingCertificate {
                schema_version: SCHEMA_VERSION,
                system: sys.spec().clone(),
                k_radius,
                params,
                sequence: kind,
                castle: castle.record(sys)?,
                worst_ratio: FracJson(r),
                worst_at: at,
                ratio_holds,
                footprint,
                depth: castle.depth(sys)?,
                depth_cap: sys.tree().depth_cap(),
                stage_trace,
                density_trace,
            });
        }

        let current = n;
        let mut reasons = Vec::new();
        for q in (1..current).rev() {
            let sq = match normal_stage(&seq, q) {
                Ok(s) => s,
                Err(e) => {
                    reasons.push(format!("stage {q}: {e}"));
                    continue;
                }
            };
            let v = validate_normal(sys, &sq, &k, k_tol, Criterion::Difference)?;
            if !v.valid {
                reasons.push(format!("stage {q}: not (K, {k_tol})-Følner"));
                continue;
            }
            let radius = max_fiber_radius(sys, &sq)?;
            let kq = CompactSet::ball(sys, radius);
            let mut checks = Vec::new();
            for (p, sp) in &used {
                let t = validate_normal(sys, sp, &kq, transfer_tol, Criterion::Difference)?;
                checks.push(TransferCheck {
                    earlier: *p,
                    radius,
                    ratio: t.worst_ratio,
                    tolerance: transfer_tol,
                    holds: t.valid,
                });
            }
            if checks.iter().all(|c| c.holds) {
                pending = Some((q, sq, v.worst_ratio, checks));
                break;
            }
            let worst = checks.iter().filter(|c| !c.holds).filter_map(|c| c.ratio.map(|r| frac_value(&r.0))).fold(0.0, f64::max);
            reasons.push(format!("stage {q}: used stages are not ({radius}-ball, {transfer_tol})-Følner (ratio {worst})"));
        }
        if pending.is_none() {
            let r = ratio.map(|(r, _)| frac_value(&r)).unwrap_or(f64::NAN);
            let fp = footprint.iter().map(|f| f.value).fold(f64::INFINITY, f64::min);
            return Err(TilingError::Schedule {
                stage: current,
                reason: format!(
                    "castle has ratio {r} and footprint {fp}; no smaller stage qualifies: {}",
                    if reasons.is_empty() { "none left".to_string() } else { reasons.join("; ") }
                ),
            });
        }
    }
}

/// Independent recheck of a certificate: the castle is rebuilt from its
/// record, validated, and every fiber is recomputed pointwise at a
/// representative of each cell of the certificate depth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reverification {
    pub castle_valid: bool,
    pub worst_ratio: FracJson,
    pub footprint: Vec<FootprintMeasure>,
    pub cells_checked: usize,
    pub matches: bool,
    pub holds: bool,
}

pub fn reverify(text: &str) -> Result<Reverification> {
    let cert = TilingCertificate::from_json(text)?;
    let sys = &cert.system.build()?.with_depth_cap(cert.depth_cap);
    let castle = cert.castle.to_castle(sys)?;
    let castle_valid = validate_castle(sys, &castle)?.valid;
    let k = CompactSet::ball(sys, cert.k_radius);
    let mut worst = frac(0, 1);
    let points = sys.test_points(cert.depth, cert.k_radius + 1)?;
    for tp in &points {
        let f = castle.fiber(sys, &tp.point)?;
        if f.is_empty() {
            continue;
        }
        let r = crate::groupoid::is_folner(sys, &k, cert.params.epsilon, &f)?.difference_ratio.0;
        worst = worst.max(r);
    }
    let footprint = footprint_measures(sys, &castle, &[invariant_measure(sys)], cert.params.epsilon)?;
    let holds = castle_valid && frac_lt(&worst, cert.params.epsilon) && footprint.iter().all(|f| f.holds);
    let matches = worst == cert.worst_ratio.0
        && footprint.iter().zip(&cert.footprint).all(|(a, b)| a.exact == b.exact && a.value == b.value);
    Ok(Reverification {
        castle_valid,
        worst_ratio: FracJson(worst),
        footprint,
        cells_checked: points.len(),
        matches,
        holds,
    })
}

/// Outcome of the union-invariance check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnionInvariance {
    pub piece_ratio: FracJson,
    pub piece_tolerance: f64,
    pub lower_density: FracJson,
    /// Radius of the ball standing in for `WW⁻¹K⁻¹ ∪ G⁰`.
    pub t_radius: u64,
    pub t_norm: usize,
    pub tolerance: f64,
    pub stage: Option<usize>,
    pub check: Option<StarInvarianceCheck>,
    pub passes: bool,
    pub failure: Option<String>,
}

/// `A = ⋃ r(F_c)` for the fibers `F_c` of a castle: finds a stage meeting
/// the three witness conditions and checks `(K, δ)*`-invariance against it.
#[allow(clippy::too_many_arguments)]
pub fn check_union_invariance(
    system: &System,
    pieces: &Castle,
    a: &ClopenSet,
    k: &CompactSet,
    delta: f64,
    delta0: f64,
    epsilon: f64,
    seq: &FolnerSequence,
    stages: &[usize],
) -> Result<UnionInvariance> {
    if delta <= delta0 {
        return Err(TilingError::Precondition(format!("δ = {delta} must exceed δ₀ = {delta0}")));
    }
    if let Some(v) = validate_castle(system, pieces)?.violation {
        return Err(TilingError::Precondition(format!("pieces are not disjoint: {v}")));
    }
    let piece_tolerance = delta0 * (1.0 - epsilon);
    let (piece_ratio, _) = castle_ratio(system, k, pieces)?
        .ok_or_else(|| TilingError::Precondition("no pieces".into()))?;
    if !frac_le(&piece_ratio, piece_tolerance) {
        return Err(TilingError::Precondition(format!("pieces have ratio {piece_ratio} above {piece_tolerance}")));
    }
    let mut lower = None;
    for &n in stages {
        let d = lower_density(seq, n, a)?;
        lower = Some(lower.map_or(d, |l: crate::report::Frac| l.min(d)));
    }
    let lower = lower.ok_or_else(|| TilingError::Precondition("no stages given".into()))?;
    if lower == frac(0, 1) {
        return Err(TilingError::Precondition("the lower density of A is not positive".into()));
    }
    let mut spread = 0;
    for c in castle_classes(system, pieces)? {
        for g in &c.elements {
            for h in &c.elements {
                spread = spread.max((*g - *h).length());
            }
        }
    }
    let t_radius = spread + k.radius();
    let t_norm = GroupElement::ball(system.rank(), t_radius).len();
    let tolerance = frac_value(&lower) / (2.0 * t_norm as f64) * (delta - delta0);
    let t = CompactSet::ball(system, t_radius);
    let mut out = UnionInvariance {
        piece_ratio: FracJson(piece_ratio),
        piece_tolerance,
        lower_density: FracJson(lower),
        t_radius,
        t_norm,
        tolerance,
        stage: None,
        check: None,
        passes: false,
        failure: None,
    };
    for &n in stages {
        let stage = seq.stage(n)?;
        if !frac_le(&stage.ratio(system, k, Criterion::Difference)?, epsilon) {
            continue;
        }
        if !frac_le(&stage.ratio(system, &t, Criterion::Difference)?, tolerance) {
            continue;
        }
        let d = density_stage(system, &stage, a)?;
        if frac_value(&d.inf.0) <= frac_value(&lower) / 2.0 {
            continue;
        }
        let check = check_star_invariance(system, a, k, delta, &stage)?;
        out.stage = Some(n);
        out.passes = check.passes;
        out.failure = check.failure.clone();
        out.check = Some(check);
        return Ok(out);
    }
    out.failure = Some(format!("no stage among {stages:?} meets the witness conditions at tolerance {tolerance}"));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::castle::Multisection;
    use crate::folner::{build_from_group_folner, build_partial_folner, kakutani_rokhlin, reindex, Part};
    use crate::systems::PointCode;
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

    /// Oracle: every `T` with `|T| ≥ (1−ε)|F_l|`, with `V_{T,l}` built from
    /// the defining intersections.
    fn brute_force(sys: &System, s: &NormalFolnerSet, y: &ClopenSet, eps: f64) -> (Vec<RealizedClass>, ClopenSet) {
        let tree = sys.tree();
        let mut acc = y.clone();
        let mut out = Vec::new();
        for (l, part) in s.parts().iter().enumerate() {
            let m = s.multisection(l);
            let labels: Vec<usize> = m.index().to_vec();
            let base = m.level(sys, part.base).unwrap();
            let back: Vec<ClopenSet> = labels
                .iter()
                .map(|&i| preimage(sys, &m.entry(sys, i, part.base).unwrap(), &acc).unwrap())
                .collect();
            let mut fresh = vec![acc.clone()];
            for mask in 0u32..(1 << labels.len()) {
                let t: BTreeSet<usize> = (0..labels.len()).filter(|b| mask >> b & 1 == 1).map(|b| labels[b]).collect();
                if t.is_empty() || !large_enough(t.len(), labels.len(), eps) {
                    continue;
                }
                let mut v = base.clone();
                for (b, set) in back.iter().enumerate() {
                    v = if mask >> b & 1 == 1 {
                        tree.difference(&v, set).unwrap()
                    } else {
                        tree.intersect(&v, set).unwrap()
                    };
                }
                if v.is_empty() {
                    continue;
                }
                fresh.push(m.restrict(sys, part.base, &v, &t).unwrap().footprint(sys).unwrap());
                out.push(RealizedClass { part: l, keep: t, v });
            }
            acc = tree.union_all(fresh.iter()).unwrap();
        }
        (out, tree.difference(&acc, y).unwrap())
    }

    fn sorted(mut v: Vec<RealizedClass>) -> Vec<(usize, Vec<usize>, Vec<String>)> {
        let mut keys: Vec<_> = v.drain(..).map(|c| (c.part, c.keep.into_iter().collect(), c.v.words())).collect();
        keys.sort();
        keys
    }

    #[test]
    fn whole_space_is_invariant() {
        let sys = odo();
        let stage = FolnerSequence::new(&sys, SequenceKind::Intervals).stage(3).unwrap();
        let c = check_star_invariance(&sys, &sys.tree().whole(), &CompactSet::ball(&sys, 1), 0.1, &stage).unwrap();
        assert!(c.passes);
        assert_eq!(c.ratio.unwrap().0, frac(0, 1));
    }

    #[test]
    fn tower_footprint_against_deeper_kr_sets() {
        let sys = odo();
        let tower = Multisection::tower(&sys, sys.tree().set_from_words(&["00000"]).unwrap(), 32).unwrap();
        let a = tower.footprint(&sys).unwrap();
        assert!(a.is_whole());
        let stage = Stage::Normal(reindex(&kakutani_rokhlin(&sys, 64).unwrap()).unwrap());
        let c = check_star_invariance(&sys, &a, &CompactSet::ball(&sys, 1), 2.0 / 32.0 + 1e-9, &stage).unwrap();
        assert!(c.passes);
        assert!(c.ratio.unwrap().0 <= frac(2, 32));

        let half = Multisection::tower(&sys, sys.tree().set_from_words(&["000000"]).unwrap(), 32).unwrap();
        let a = half.footprint(&sys).unwrap();
        let c = check_star_invariance(&sys, &a, &CompactSet::ball(&sys, 1), 1.0, &stage).unwrap();
        assert_eq!(c.ratio.unwrap().0, frac(2, 32));
    }

    #[test]
    fn single_deep_cell_fails_against_a_coarse_stage() {
        let sys = odo();
        let a = sys.tree().set_from_words(&["00000000"]).unwrap();
        let stage = FolnerSequence::new(&sys, SequenceKind::Intervals).stage(2).unwrap();
        let c = check_star_invariance(&sys, &a, &CompactSet::ball(&sys, 1), 0.5, &stage).unwrap();
        assert!(!c.passes);
        assert!(c.failure.unwrap().starts_with("A misses"));
        let fine = FolnerSequence::new(&sys, SequenceKind::Intervals).stage(9).unwrap();
        let c = check_star_invariance(&sys, &a, &CompactSet::ball(&sys, 1), 3.0, &fine).unwrap();
        assert_eq!(c.ratio.unwrap().0, frac(2, 1));
    }

    #[test]
    fn empty_y_keeps_full_towers() {
        let sys = odo();
        let s = reindex(&kakutani_rokhlin(&sys, 4).unwrap()).unwrap();
        let out = castle_recursion(&sys, &s, &sys.tree().empty(), 0.25).unwrap();
        assert!(out.a.is_whole());
        assert_eq!(out.castle.multisections.len(), 1);
        assert_eq!(out.castle.multisections[0].len(), 4);
        assert_eq!(out.classes[0].keep.len(), 4);
    }

    #[test]
    fn avoids_y_and_covers() {
        let sys = fib();
        let s = build_from_group_folner(&sys, &interval(6)).unwrap();
        let y = s.towers()[0].footprint(&sys).unwrap();
        let out = castle_recursion(&sys, &s, &y, 0.25).unwrap();
        assert!(sys.tree().is_disjoint(&out.a, &y).unwrap());
        assert!(!frac_lt(&out.min_coverage.unwrap().0, 0.25));
        for (q, c) in out.castle.multisections.iter().zip(&out.classes) {
            assert!(large_enough(q.len(), s.multisection(c.part).len(), 0.25));
        }
    }

    #[test]
    fn matches_enumeration_on_small_instances() {
        for (sys, len) in [(odo(), 4), (fib(), 5), (fib(), 6), (odo(), 3)] {
            let s = build_from_group_folner(&sys, &interval(len)).unwrap();
            for y in [sys.tree().empty(), s.towers()[0].footprint(&sys).unwrap(), sys.tree().set_from_words(&["1"]).unwrap()] {
                for eps in [0.2, 0.34, 0.49] {
                    let out = castle_recursion(&sys, &s, &y, eps);
                    let (classes, a) = brute_force(&sys, &s, &y, eps);
                    match out {
                        Ok(out) => {
                            assert_eq!(sorted(out.classes), sorted(classes));
                            assert_eq!(out.a, a);
                        }
                        Err(TilingError::Assertion { what, .. }) => assert!(what.starts_with("coverage")),
                        Err(e) => panic!("{e}"),
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_large_epsilon() {
        let sys = odo();
        let s = build_from_group_folner(&sys, &interval(2)).unwrap();
        assert!(matches!(castle_recursion(&sys, &s, &sys.tree().empty(), 0.5), Err(TilingError::Precondition(_))));
    }

    #[test]
    fn parameter_rule() {
        let p = tile_parameters(0.25, 1).unwrap();
        assert_eq!(p.eta, 0.125);
        assert!((p.beta - 0.125 / 1.5).abs() < 1e-15);
        assert_eq!(p.n, 10);
        let target = 1.0 - 0.75 * (1.0 + p.beta) / (1.0 - p.eta);
        assert!(0.75f64.powi(10) < target && 0.75f64.powi(9) >= target);
    }

    #[test]
    fn odometer_tiles_exactly() {
        let sys = odo();
        let cert = quasi_tile(&sys, 1, 0.25, &TileOptions::default()).unwrap();
        assert!(cert.holds());
        assert_eq!(cert.footprint[0].exact.as_deref(), Some("1"));
        let h = cert.stage_trace[0].min_size;
        assert!(cert.worst_ratio.0 <= frac(2, h));
        assert!(frac_le(&cert.worst_ratio.0, 0.25));
        let re = reverify(&cert.to_json()).unwrap();
        assert!(re.matches && re.holds);
    }

    #[test]
    fn fibonacci_tiles() {
        let sys = fib();
        let cert = quasi_tile(&sys, 1, 0.25, &TileOptions::default()).unwrap();
        assert!(cert.holds(), "{:?}", cert.worst_ratio);
        assert!(cert.stage_trace[0].min_size >= 8);
        assert!(cert.stage_trace[0].control <= 2);
        assert!(cert.density_trace.iter().all(|d| d.holds));
        assert!(reverify(&cert.to_json()).unwrap().matches);
    }

    #[test]
    fn smaller_epsilon_never_worsens_the_ratio() {
        let sys = odo();
        let mut last = None;
        for eps in [0.4, 0.25, 0.125, 0.0625] {
            let cert = quasi_tile(&sys, 1, eps, &TileOptions::default()).unwrap();
            assert_eq!(cert.footprint[0].exact.as_deref(), Some("1"));
            assert_eq!(Castle::new(cert.castle.to_castle(&sys.with_depth_cap(cert.depth_cap)).unwrap().multisections).multisections.len(), 1);
            if let Some(prev) = last {
                assert!(cert.worst_ratio.0 <= prev);
            }
            last = Some(cert.worst_ratio.0);
        }
    }

    #[test]
    fn partial_system_tiles() {
        let sys = partial_odo();
        let cert = quasi_tile(&sys, 1, 0.3, &TileOptions::default()).unwrap();
        assert!(cert.holds());
        assert!(frac_lt(&cert.worst_ratio.0, 0.3));
        assert!(reverify(&cert.to_json()).unwrap().holds);
    }

    #[test]
    fn tampered_certificates_are_caught() {
        let sys = odo();
        let cert = quasi_tile(&sys, 1, 0.25, &TileOptions::default()).unwrap();
        let mut bad = cert.clone();
        bad.worst_ratio = FracJson(frac(1, 100));
        assert!(!reverify(&bad.to_json()).unwrap().matches);
        let mut other = cert;
        other.castle.multisections.pop();
        assert!(!reverify(&other.to_json()).unwrap().holds);
    }

    #[test]
    fn union_invariance_of_a_tower() {
        let sys = odo();
        let tower = Multisection::tower(&sys, sys.tree().set_from_words(&["000"]).unwrap(), 4).unwrap();
        let a = tower.footprint(&sys).unwrap();
        let castle = Castle::new(vec![tower]);
        let k = CompactSet::ball(&sys, 1);
        let seq = FolnerSequence::new(&sys, SequenceKind::Intervals);
        let stages: Vec<usize> = (3..=11).collect();
        let v = check_union_invariance(&sys, &castle, &a, &k, 0.9, 0.6, 1.0 / 6.0, &seq, &stages).unwrap();
        assert!(v.passes, "{v:?}");
        assert_eq!(v.check.unwrap().ratio.unwrap().0, frac(1, 2));
        assert!(matches!(
            check_union_invariance(&sys, &castle, &a, &k, 0.5, 0.6, 0.1, &seq, &stages),
            Err(TilingError::Precondition(_))
        ));
        let whole = Castle::new(vec![Multisection::single_level(&sys, sys.tree().whole())]);
        let w = check_union_invariance(&sys, &whole, &sys.tree().whole(), &CompactSet::unit(&sys), 0.2, 0.1, 0.1, &seq, &[1, 2]).unwrap();
        assert!(w.passes);
    }

    #[test]
    fn partial_stage_castle_recursion() {
        let sys = partial_odo();
        let s = build_partial_folner(&sys, 4).unwrap();
        let out = castle_recursion(&sys, &s, &sys.tree().empty(), 0.3).unwrap();
        assert!(out.covered.is_whole());
        let _ = Part { tower: 0, base: 0 };
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10))]

        #[test]
        fn recursion_invariants(len in 2i64..7, eps in 0.05f64..0.49, ycells in proptest::collection::vec(0usize..8, 0..4)) {
            let sys = odo();
            let s = build_from_group_folner(&sys, &interval(len)).unwrap();
            let cells = sys.tree().cells_at_depth(3).unwrap();
            let y = sys.tree().set(ycells.iter().map(|i| cells[*i].clone())).unwrap();
            match castle_recursion(&sys, &s, &y, eps) {
                Ok(out) => {
                    prop_assert!(sys.tree().is_disjoint(&out.a, &y).unwrap());
                    prop_assert!(validate_castle(&sys, &out.castle).unwrap().valid);
                    let (classes, a) = brute_force(&sys, &s, &y, eps);
                    prop_assert_eq!(sorted(out.classes), sorted(classes));
                    prop_assert_eq!(out.a, a);
                }
                Err(TilingError::Assertion { what, .. }) => prop_assert!(what.starts_with("coverage")),
                Err(e) => prop_assert!(false, "{}", e),
            }
        }
    }
}
