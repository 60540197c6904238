//! Flat key=value experiment configuration files ('#' starts a comment).

use std::collections::BTreeMap;
use std::path::Path;

use dcb_core::error::{DcbError, Result};
use dcb_core::sim::{BetaDesign, Method, SimConfig};

#[derive(Debug, Clone)]
pub struct ExperimentFile {
    pub sim: SimConfig,
    pub replicates: usize,
    pub methods: Vec<Method>,
    pub alpha: f64,
    /// "none", "level", or "contrast".
    pub coverage_target: String,
}

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| DcbError::Parse {
            row: lineno + 1,
            column: String::new(),
            message: format!("expected key = value, found `{line}`"),
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn get_parse<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, default: T) -> Result<T> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| {
            DcbError::InvalidArgument(format!("config key `{key}`: cannot parse `{v}`"))
        }),
    }
}

/// Loads an experiment description. The optional `profile` preset
/// ("desk" or "full") fixes (n, p); explicit keys override it.
pub fn load_experiment(path: &Path, profile: Option<&str>, seed: u64) -> Result<ExperimentFile> {
    let text = std::fs::read_to_string(path)?;
    let map = parse_kv(&text)?;

    let profile = map
        .get("profile")
        .map(String::as_str)
        .or(profile)
        .unwrap_or("desk");
    let t_periods = get_parse(&map, "t_periods", 2usize)?;
    let eta = get_parse(&map, "eta", 0.1f64)?;
    let design = BetaDesign::parse(map.get("design").map(String::as_str).unwrap_or("sparse"))?;
    let mut sim = match profile {
        "desk" => SimConfig::desk(t_periods, eta, design, seed),
        "full" => SimConfig::full(t_periods, eta, design, seed),
        other => {
            return Err(DcbError::InvalidArgument(format!(
                "unknown profile `{other}` (expected desk|full)"
            )))
        }
    };
    sim.n = get_parse(&map, "n", sim.n)?;
    sim.p = get_parse(&map, "p", sim.p)?;
    sim.tau = get_parse(&map, "tau", sim.tau)?;
    sim.eta = eta;
    sim.delta1 = get_parse(&map, "delta1", sim.delta1)?;
    sim.delta2 = get_parse(&map, "delta2", sim.delta2)?;
    sim.misspecified = get_parse(&map, "misspecified", sim.misspecified)?;
    sim.outcome_noise = get_parse(&map, "outcome_noise", sim.outcome_noise)?;
    sim.seed = get_parse(&map, "seed", seed)?;

    let default_reps = if profile == "full" { 200 } else { 100 };
    let replicates = get_parse(&map, "replicates", default_reps)?;

    let methods: Vec<Method> = match map.get("methods") {
        None => vec![Method::Dcb, Method::AipwOracle],
        Some(list) => list
            .split(',')
            .map(|s| Method::parse(s.trim()))
            .collect::<Result<Vec<_>>>()?,
    };

    let alpha = get_parse(&map, "alpha", 0.05f64)?;
    let coverage_target = map
        .get("coverage_target")
        .cloned()
        .unwrap_or_else(|| "none".to_string());
    if !["none", "level", "contrast"].contains(&coverage_target.as_str()) {
        return Err(DcbError::InvalidArgument(format!(
            "coverage_target `{coverage_target}` (expected none|level|contrast)"
        )));
    }

    Ok(ExperimentFile {
        sim,
        replicates,
        methods,
        alpha,
        coverage_target,
    })
}

/// Parses the --schema flag into a column mapping.
pub fn parse_schema(arg: Option<&str>) -> Result<dcb_core::ColumnSchema> {
    let mut schema = dcb_core::ColumnSchema::default();
    let Some(arg) = arg else {
        return Ok(schema);
    };
    for part in arg.split(',') {
        let (k, v) = part.split_once('=').ok_or_else(|| {
            DcbError::InvalidArgument(format!("schema entry `{part}` is not key=value"))
        })?;
        match k.trim() {
            "unit" => schema.unit = v.trim().to_string(),
            "period" => schema.period = v.trim().to_string(),
            "treatment" => schema.treatment = v.trim().to_string(),
            "outcome" => schema.outcome = v.trim().to_string(),
            "covariates" => {
                schema.covariates =
                    Some(v.split(';').map(|s| s.trim().to_string()).collect())
            }
            other => {
                return Err(DcbError::InvalidArgument(format!(
                    "unknown schema key `{other}`"
                )))
            }
        }
    }
    Ok(schema)
}
