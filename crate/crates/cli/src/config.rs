use std::fs;
use std::path::{Path, PathBuf};

use groupoid_tiler::cantor::{depth_cap_from_env, CantorError, ClopenSet, DEPTH_CAP_ENV};
use groupoid_tiler::castle::CastleError;
use groupoid_tiler::density::DensityError;
use groupoid_tiler::folner::FolnerError;
use groupoid_tiler::fullgroup::FullGroupError;
use groupoid_tiler::gamma::GammaError;
use groupoid_tiler::groupoid::GroupoidError;
use groupoid_tiler::systems::{window_to_tree_word, PointCode, System, SystemError, SystemSpec};
use groupoid_tiler::tiling::TilingError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Cantor(#[from] CantorError),
    #[error(transparent)]
    Groupoid(#[from] GroupoidError),
    #[error(transparent)]
    Castle(#[from] CastleError),
    #[error(transparent)]
    Folner(#[from] FolnerError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error(transparent)]
    Gamma(#[from] GammaError),
    #[error(transparent)]
    FullGroup(#[from] FullGroupError),
}

pub type Result<T> = std::result::Result<T, CliError>;

pub fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

pub fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?).map_err(|source| CliError::Json { path: path.display().to_string(), source })
}

pub fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

pub fn builtin(name: &str) -> Option<SystemSpec> {
    Some(match name {
        "odometer2" => SystemSpec::odometer(2),
        "odometer3" => SystemSpec::odometer(3),
        "fibonacci" => SystemSpec::fibonacci(),
        "partial-odometer2" => {
            SystemSpec::Partial { base: Some(2), rules: None, removed: vec![PointCode::digits(vec![], vec![0])] }
        }
        _ => return None,
    })
}

pub fn load_spec(arg: &str) -> Result<SystemSpec> {
    let path = Path::new(arg);
    if path.exists() {
        return parse_json(path);
    }
    builtin(arg).ok_or_else(|| CliError::Config(format!("{arg} is neither a file nor a built-in system")))
}

/// Flag, then environment, then `default`.
pub fn depth_cap(flag: Option<usize>, default: usize) -> Result<usize> {
    let cap = match flag {
        Some(c) => c,
        None if std::env::var_os(DEPTH_CAP_ENV).is_some() => depth_cap_from_env(),
        None => default,
    };
    if cap == 0 {
        return Err(CliError::Config("the depth cap must be positive".into()));
    }
    Ok(cap)
}

pub fn load_system(arg: &str, cap: usize) -> Result<(SystemSpec, System)> {
    let spec = load_spec(arg)?;
    let system = spec.build()?.with_depth_cap(cap);
    Ok((spec, system))
}

/// `"[0],[10]"` as tree words, or letter windows of odd length on a
/// substitution system, centred at the origin.
pub fn parse_set(system: &System, text: &str) -> Result<ClopenSet> {
    let tokens: Vec<&str> = text
        .split([',', ' '])
        .map(|t| t.trim().trim_start_matches('[').trim_end_matches(']'))
        .filter(|t| !t.is_empty())
        .collect();
    let mut words = Vec::with_capacity(tokens.len());
    for t in tokens {
        if t.chars().all(|c| c.is_ascii_digit()) {
            words.push(t.to_string());
            continue;
        }
        let sub = system
            .substitution()
            .ok_or_else(|| CliError::Config(format!("letters in {t} need a substitution system")))?;
        let letters = sub.letters();
        let window = t
            .chars()
            .map(|c| letters.iter().position(|l| *l == c).map(|i| i as u8))
            .collect::<Option<Vec<u8>>>()
            .ok_or_else(|| CliError::Config(format!("{t} uses letters outside {letters:?}")))?;
        if window.len() % 2 == 0 {
            return Err(CliError::Config(format!("window {t} must have odd length")));
        }
        let w = window_to_tree_word(&window, letters.len());
        words.push(w.iter().map(|d| char::from(b'0' + d)).collect());
    }
    let refs: Vec<&str> = words.iter().map(String::as_str).collect();
    Ok(system.tree().set_from_words(&refs)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_and_unknown_names() {
        assert_eq!(load_spec("fibonacci").unwrap(), SystemSpec::fibonacci());
        assert!(matches!(load_spec("nowhere.json"), Err(CliError::Config(_))));
    }

    #[test]
    fn letter_windows_become_cells() {
        let (_, sys) = load_system("fibonacci", 16).unwrap();
        let a = parse_set(&sys, "[a]").unwrap();
        assert_eq!(a, sys.tree().set_from_words(&["0"]).unwrap());
        let aba = parse_set(&sys, "[aba]").unwrap();
        assert_eq!(aba, parse_set(&sys, "[b]").unwrap());
        assert_eq!(aba.words(), vec!["1".to_string()]);
        assert!(parse_set(&sys, "[ab]").is_err());
        assert!(parse_set(&sys, "[c]").is_err());
        let (_, odo) = load_system("odometer2", 16).unwrap();
        assert_eq!(parse_set(&odo, "[0], [10]").unwrap().words(), vec!["0", "10"]);
        assert!(parse_set(&odo, "[a]").is_err());
    }

    #[test]
    fn explicit_caps_win() {
        assert_eq!(depth_cap(Some(7), 64).unwrap(), 7);
        assert!(depth_cap(Some(0), 64).is_err());
    }
}
