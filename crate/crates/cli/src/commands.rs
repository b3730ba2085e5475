use std::path::{Path, PathBuf};

use num_rational::BigRational;
use serde::Serialize;
use serde_json::json;

use groupoid_tiler::castle::{validate_castle, CastleRecord};
use groupoid_tiler::density::{compare_density_measure, density_limits, density_stage, DensityRow, DensityReport};
use groupoid_tiler::folner::{
    build_from_group_folner, build_minimal_first_return, build_partial_folner, build_pathological, goodness,
    validate_normal, FolnerSequence, NormalFolnerRecord, SequenceKind, Stage,
};
use groupoid_tiler::fullgroup::{default_base, default_elements, parse_elements, sofic_report};
use groupoid_tiler::gamma::run_gamma;
use groupoid_tiler::groupoid::{folner_search, CompactSet, Criterion, DEFAULT_SEARCH_CAP};
use groupoid_tiler::report::{frac, frac_value, FracJson, SCHEMA_VERSION};
use groupoid_tiler::systems::{invariant_measure, System, SystemSpec};
use groupoid_tiler::tiling::{quasi_tile, reverify, TileOptions};

use crate::config::{depth_cap, load_system, parse_json, parse_set, read, write, CliError, Result};
use crate::{Command, Common, CriterionArg, Method, SequenceArg};

const DEFAULT_CAP: usize = 64;
const TILE_CAP: usize = 256;

pub struct Outcome {
    pub holds: bool,
}

fn sequence_kind(arg: SequenceArg) -> SequenceKind {
    match arg {
        SequenceArg::KakutaniRokhlin => SequenceKind::KakutaniRokhlin,
        SequenceArg::Intervals => SequenceKind::Intervals,
        SequenceArg::FirstReturn => SequenceKind::FirstReturn,
        SequenceArg::Partial => SequenceKind::Partial,
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifacts serialize");
    s.push('\n');
    s
}

/// Artifact to `out` with the summary on stdout, or artifact to stdout with
/// the summary on stderr.
fn emit(out: Option<&Path>, artifact: &str, summary: &str) -> Result<()> {
    match out {
        Some(p) => {
            write(p, artifact)?;
            println!("{summary}");
            println!("wrote {}", p.display());
        }
        None => {
            print!("{artifact}");
            eprintln!("{summary}");
        }
    }
    Ok(())
}

fn verdict(holds: bool) -> &'static str {
    if holds {
        "PASS"
    } else {
        "FAIL"
    }
}

pub fn run(command: Command) -> Result<Outcome> {
    match command {
        Command::Validate { common, castle, folner, certificate, k_radius, epsilon, criterion } => {
            validate(&common, castle, folner, certificate, k_radius, epsilon, criterion)
        }
        Command::Folner { common, k_radius, epsilon, method, n, criterion } => {
            folner(&common, k_radius, epsilon, method, n, criterion.into())
        }
        Command::Density { common, set, stages, sequence, window, tolerance } => {
            density(&common, &set, stages, sequence, window, tolerance)
        }
        Command::Tile { common, k_radius, epsilon, max_stage, sequence } => {
            tile(&common, k_radius, epsilon, max_stage, sequence)
        }
        Command::Gamma { common, n, big_n, epsilon, partition_depth, kappa } => {
            let (_, sys) = load_system(&common.system, depth_cap(common.depth_cap, DEFAULT_CAP)?)?;
            let run = run_gamma(&sys, n, big_n, epsilon, partition_depth, kappa.into())?;
            let worst = run.report.commutators.iter().map(|c| c.margin.value).fold(0.0, f64::max);
            let summary = format!(
                "gamma {}: n={} N={} D heights {:?}, B heights {:?}, orthogonal={}, trace defect {}, worst commutator {} (bound {}), uncovered A-mass {} ≤ 1/N: {}",
                verdict(run.holds),
                n,
                big_n,
                run.nesting.heights_d,
                run.nesting.heights_b,
                run.report.orthogonal,
                run.report.trace.value,
                worst,
                1.0 / big_n as f64,
                run.count.value,
                run.count.holds
            );
            emit(common.out.as_deref(), &to_json(&run), &summary)?;
            Ok(Outcome { holds: run.holds })
        }
        Command::Sofic { common, elements, stages, json } => sofic(&common, elements, &stages, json),
    }
}

fn validate(
    common: &Common,
    castle: Option<PathBuf>,
    folner: Option<PathBuf>,
    certificate: Option<PathBuf>,
    k_radius: u64,
    epsilon: f64,
    criterion: CriterionArg,
) -> Result<Outcome> {
    let (spec, sys) = load_system(&common.system, depth_cap(common.depth_cap, DEFAULT_CAP)?)?;
    if let Some(path) = castle {
        let record: CastleRecord = parse_json(&path)?;
        let c = record.to_castle(&sys)?;
        let v = validate_castle(&sys, &c)?;
        let summary = match &v.violation {
            None => format!("castle {}: {} multisections, depth {}", verdict(true), c.multisections.len(), v.depth),
            Some(w) => format!("castle {}: {w}", verdict(false)),
        };
        emit(common.out.as_deref(), &to_json(&json!({ "schema_version": SCHEMA_VERSION, "verdict": v })), &summary)?;
        return Ok(Outcome { holds: v.valid });
    }
    if let Some(path) = folner {
        let record: NormalFolnerRecord = parse_json(&path)?;
        let s = record.to_set(&sys)?;
        let v = validate_normal(&sys, &s, &CompactSet::ball(&sys, k_radius), epsilon, criterion.into())?;
        let summary = match &v.failure {
            None => format!(
                "normal Følner set {}: worst ratio {}",
                verdict(true),
                v.worst_ratio.map_or("-".to_string(), |r| r.0.to_string())
            ),
            Some(f) => format!("normal Følner set {}: {f}", verdict(false)),
        };
        emit(common.out.as_deref(), &to_json(&json!({ "schema_version": SCHEMA_VERSION, "verdict": v })), &summary)?;
        return Ok(Outcome { holds: v.valid });
    }
    if let Some(path) = certificate {
        let r = reverify(&read(&path)?)?;
        let summary = format!(
            "certificate {}: castle valid {}, worst ratio {}, {} cells checked, recorded values match {}",
            verdict(r.holds && r.matches),
            r.castle_valid,
            r.worst_ratio.0,
            r.cells_checked,
            r.matches
        );
        emit(common.out.as_deref(), &to_json(&json!({ "schema_version": SCHEMA_VERSION, "reverification": r })), &summary)?;
        return Ok(Outcome { holds: r.holds && r.matches });
    }
    let summary = format!("system {}: builds with depth cap {}", sys.name(), sys.tree().depth_cap());
    emit(common.out.as_deref(), &to_json(&json!({ "schema_version": SCHEMA_VERSION, "system": spec })), &summary)?;
    Ok(Outcome { holds: true })
}

fn folner(common: &Common, k_radius: u64, epsilon: f64, method: Method, n: Option<usize>, criterion: Criterion) -> Result<Outcome> {
    let (spec, sys) = load_system(&common.system, depth_cap(common.depth_cap, DEFAULT_CAP)?)?;
    let k = CompactSet::ball(&sys, k_radius);
    if let Method::Pathological = method {
        return pathological(common, &spec, &sys, &k, n.unwrap_or(1));
    }
    let (set, n_used) = match method {
        Method::Group => {
            let w = folner_search(&sys, &sys.free_unit(), &k, epsilon, &CompactSet::unit(&sys), DEFAULT_SEARCH_CAP)?;
            let elements: Vec<_> = w.set.elements.iter().copied().collect();
            (build_from_group_folner(&sys, &elements)?, None)
        }
        Method::FirstReturn => (build_minimal_first_return(&sys, &k, epsilon)?, None),
        Method::Partial => {
            let n = n.unwrap_or_else(|| (2.0 / epsilon).ceil() as usize);
            (build_partial_folner(&sys, n)?, Some(n))
        }
        Method::Pathological => unreachable!(),
    };
    let v = validate_normal(&sys, &set, &k, epsilon, criterion)?;
    let good = match n_used {
        Some(n) => Some(goodness(&sys, &set, 1, 1.0 / n as f64, &[invariant_measure(&sys)])?),
        None => None,
    };
    let controlled = set.is_controlled(1);
    let holds = v.valid && good.as_ref().is_none_or(|g| g.is_certified());
    let artifact = json!({
        "schema_version": SCHEMA_VERSION,
        "system": spec,
        "method": set.method,
        "k_radius": k_radius,
        "epsilon": epsilon,
        "n": n_used,
        "height": set.height(),
        "sizes": set.sizes(),
        "one_controlled": controlled,
        "verdict": v,
        "goodness": good,
        "set": set.record(&sys)?,
    });
    let summary = format!(
        "folner {} ({}): {} parts, height {}, 1-controlled {}, worst ratio {}{}{}",
        verdict(holds),
        set.method,
        set.len(),
        set.height(),
        controlled,
        v.worst_ratio.map_or("-".to_string(), |r| r.0.to_string()),
        good.as_ref().map_or(String::new(), |g| format!(", (1, 1/n)-good {}", g.is_certified())),
        v.failure.as_ref().map_or(String::new(), |f| format!(", {f}"))
    );
    emit(common.out.as_deref(), &to_json(&artifact), &summary)?;
    Ok(Outcome { holds })
}

/// The ill-behaved sets: fiber ratio against the `4/(n+1)` schedule and the
/// density of `X ∖ V_n` against its measure.
fn pathological(common: &Common, spec: &SystemSpec, sys: &System, k: &CompactSet, n: usize) -> Result<Outcome> {
    let t = build_pathological(sys, n)?;
    let stage = Stage::Pathological(t.clone());
    let ratio = stage.ratio(sys, k, Criterion::Difference)?;
    let schedule = FolnerSequence::new(sys, SequenceKind::Pathological).schedule(n).1;
    let a = sys.tree().complement(&t.v)?;
    let d = density_stage(sys, &stage, &a)?;
    let mu = sys
        .measure_exact(&a)
        .ok_or_else(|| CliError::Config("the pathological example needs an exact measure".into()))?;
    let ratio_holds = frac_value(&ratio) <= schedule;
    let two_thirds = BigRational::new(2.into(), 3.into());
    let density_below = d.sup.0 <= frac(2, 3) && mu > two_thirds;
    let holds = ratio_holds && density_below;
    let artifact = json!({
        "schema_version": SCHEMA_VERSION,
        "system": spec,
        "method": "pathological",
        "n": n,
        "v": t.v.words(),
        "pieces": t.pieces.len(),
        "fiber_ratio": FracJson(ratio),
        "schedule": schedule,
        "complement": a.words(),
        "sup_density": d.sup,
        "inf_density": d.inf,
        "measure": mu.to_string(),
        "holds": holds,
    });
    let summary = format!(
        "pathological {}: n={n}, fiber ratio {} ≤ {schedule}: {ratio_holds}, sup density of X∖V {} vs measure {}",
        verdict(holds),
        ratio,
        d.sup.0,
        mu
    );
    emit(common.out.as_deref(), &to_json(&artifact), &summary)?;
    Ok(Outcome { holds })
}

fn density(
    common: &Common,
    set: &str,
    stages: usize,
    sequence: Option<SequenceArg>,
    window: usize,
    tolerance: f64,
) -> Result<Outcome> {
    let kind = sequence.map(sequence_kind);
    let (_, sys) = load_system(&common.system, depth_cap(common.depth_cap, DEFAULT_CAP)?)?;
    let kind = kind.unwrap_or(if sys.odometer_base().is_some() && !sys.is_partial() {
        SequenceKind::KakutaniRokhlin
    } else {
        SequenceKind::Intervals
    });
    let a = parse_set(&sys, set)?;
    let seq = FolnerSequence::new(&sys, kind);
    let idx: Vec<usize> = (1..=stages).collect();
    let report: DensityReport = density_limits(&seq, &a, &idx, window)?;
    let gap = compare_density_measure(&report, &a, &[invariant_measure(&sys)], 1, tolerance)?;
    let holds = gap.sandwich_holds && gap.equality_holds != Some(false);
    let last: Option<&DensityRow> = report.rows.last();
    let summary = format!(
        "density {}: set {}, measure {:.6}, last stage inf {:.6} sup {:.6}, gaps {:.3e} / {:.3e} (tolerance {tolerance})",
        verdict(holds),
        a,
        gap.sup_measure,
        last.map_or(f64::NAN, |r| frac_value(&r.inf.0)),
        last.map_or(f64::NAN, |r| frac_value(&r.sup.0)),
        gap.gap_plus,
        gap.gap_minus
    );
    emit(common.out.as_deref(), &report.to_csv(), &summary)?;
    Ok(Outcome { holds })
}

fn tile(common: &Common, k_radius: u64, epsilon: f64, max_stage: usize, sequence: Option<SequenceArg>) -> Result<Outcome> {
    let cap = depth_cap(common.depth_cap, TILE_CAP)?;
    let (_, sys) = load_system(&common.system, cap)?;
    let options = TileOptions { kind: sequence.map(sequence_kind), max_stage, depth_cap: cap };
    let cert = quasi_tile(&sys, k_radius, epsilon, &options)?;
    let text = cert.to_json();
    let re = reverify(&text)?;
    let holds = cert.holds() && re.holds && re.matches;
    let summary = format!(
        "tile {}: {} multisections, worst fiber ratio {} (ε = {epsilon}), footprint measure {}, reverified {} over {} cells",
        verdict(holds),
        cert.castle.multisections.len(),
        cert.worst_ratio.0,
        cert.footprint_measure(),
        re.matches && re.holds,
        re.cells_checked
    );
    emit(common.out.as_deref(), &text, &summary)?;
    Ok(Outcome { holds })
}

fn sofic(common: &Common, elements: Option<PathBuf>, stages: &[usize], json_out: Option<PathBuf>) -> Result<Outcome> {
    let (_, sys) = load_system(&common.system, depth_cap(common.depth_cap, DEFAULT_CAP)?)?;
    let elems = match elements {
        Some(p) => parse_elements(&sys, &read(&p)?)?,
        None => default_elements(&sys)?,
    };
    let report = sofic_report(&sys, &elems, stages, &default_base(&sys)?, &[invariant_measure(&sys)])?;
    let holds = report.holds();
    let mut lines = vec![format!(
        "sofic {}: defects ≤ 4/|P| {}, decreasing {}, displacement floors {}, intersection bound {}{}",
        verdict(holds),
        report.defects_bounded,
        report.defects_decrease,
        report.displacements_hold,
        report.intersections_hold,
        if report.minimal { "" } else { " (non-minimal: floors flagged only)" }
    )];
    for r in &report.rows {
        lines.push(format!(
            "  |P| = {:>4}: max defect {} (bound {}), interior {}/{}",
            r.size, r.max_defect.0, r.defect_bound.0, r.intersection.interior, r.size
        ));
    }
    emit(common.out.as_deref(), &report.to_csv(), &lines.join("\n"))?;
    if let Some(p) = json_out {
        write(&p, &to_json(&report))?;
    }
    Ok(Outcome { holds })
}
