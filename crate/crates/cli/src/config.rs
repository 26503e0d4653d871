use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use selftest::estimators::{HFitConfig, PhiFitConfig, VFitConfig};
use selftest::Error;

use crate::commands::{DiagnoseParams, GenDataParams, JointParams};
use crate::CommandKind;

/// Failure classes mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config: {m}"),
            CliError::Numerical(m) => write!(f, "numerical: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParameter(_)
            | Error::DimensionMismatch { .. }
            | Error::GridMismatch
            | Error::UnsupportedDimension(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => CliError::Config(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

/// `--sweep param=v1,v2,...`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub param: String,
    /// Tokens as written; used for directory names and the sweep CSV.
    pub labels: Vec<String>,
    pub values: Vec<Value>,
}

/// Numbers, `a^b` powers, booleans or bare strings.
fn parse_token(token: &str) -> Result<Value, CliError> {
    if let Some((base, exp)) = token.split_once('^') {
        let (b, e): (f64, f64) = match (base.trim().parse(), exp.trim().parse()) {
            (Ok(b), Ok(e)) => (b, e),
            _ => return Err(CliError::Config(format!("bad sweep value '{token}'"))),
        };
        return Ok(Value::from(b.powf(e)));
    }
    Ok(serde_json::from_str(token).unwrap_or_else(|_| Value::String(token.to_string())))
}

impl SweepSpec {
    pub fn parse(raw: &str) -> Result<Self, CliError> {
        let (param, list) = raw
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("sweep '{raw}' is not of the form param=v1,v2")))?;
        let param = param.trim().to_string();
        let labels: Vec<String> = list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        if param.is_empty() || labels.is_empty() {
            return Err(CliError::Config(format!("sweep '{raw}' needs a parameter and at least one value")));
        }
        let values = labels.iter().map(|t| parse_token(t)).collect::<Result<_, _>>()?;
        Ok(Self { param, labels, values })
    }

    pub fn pointer(&self) -> String {
        format!("/{}", self.param.replace('.', "/"))
    }
}

fn default_percentiles() -> Vec<f64> {
    vec![10.0, 50.0, 90.0]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// File layout of a run config; `params` is command specific.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    #[serde(default = "default_percentiles")]
    percentiles: Vec<f64>,
    /// Input data for fits: a directory of `u_k.csv`/`f_k.csv` pairs, or an ensemble CSV.
    #[serde(default)]
    data: Option<PathBuf>,
    #[serde(default)]
    params: Value,
}

/// Fully resolved run config, embedded in every output.
#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub seeds: Vec<u64>,
    pub percentiles: Vec<f64>,
    pub data: Option<PathBuf>,
    pub sweep: Option<SweepSpec>,
    /// Command parameters with every default filled in.
    pub params: Value,
}

pub fn command_name(kind: CommandKind) -> &'static str {
    match kind {
        CommandKind::GenData => "gen-data",
        CommandKind::FitH => "fit-h",
        CommandKind::FitPhi => "fit-phi",
        CommandKind::FitV => "fit-v",
        CommandKind::FitJoint => "fit-joint",
        CommandKind::Diagnose => "diagnose",
    }
}

/// Parse `params` into the command's type and back, which fills defaults and rejects unknown keys.
pub fn resolve_params(kind: CommandKind, params: Value) -> Result<Value, CliError> {
    let params = if params.is_null() { Value::Object(Default::default()) } else { params };
    fn round<T: Serialize + for<'de> Deserialize<'de>>(v: Value) -> Result<Value, CliError> {
        let typed: T = serde_json::from_value(v).map_err(|e| CliError::Config(format!("params: {e}")))?;
        Ok(serde_json::to_value(typed)?)
    }
    match kind {
        CommandKind::GenData => round::<GenDataParams>(params),
        CommandKind::FitH => round::<HFitConfig>(params),
        CommandKind::FitPhi => round::<PhiFitConfig>(params),
        CommandKind::FitV => round::<VFitConfig>(params),
        CommandKind::FitJoint => round::<JointParams>(params),
        CommandKind::Diagnose => round::<DiagnoseParams>(params),
    }
}

/// Resolved params with the sweep value substituted at its key.
pub fn params_at(kind: CommandKind, base: &Value, sweep: Option<(&SweepSpec, usize)>) -> Result<Value, CliError> {
    let mut v = base.clone();
    if let Some((spec, i)) = sweep {
        let slot = v
            .pointer_mut(&spec.pointer())
            .ok_or_else(|| CliError::Config(format!("unknown sweep parameter '{}'", spec.param)))?;
        *slot = spec.values[i].clone();
    }
    resolve_params(kind, v)
}

pub fn parse_seeds(raw: &str) -> Result<Vec<u64>, CliError> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u64>().map_err(|_| CliError::Config(format!("bad seed '{s}'"))))
        .collect()
}

pub fn load(kind: CommandKind, path: Option<&Path>, seeds: Option<&str>, sweep: Option<SweepSpec>) -> Result<RunConfig, CliError> {
    let raw: RawRunConfig = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => serde_json::from_value(Value::Object(Default::default()))?,
    };
    let seeds = match seeds {
        Some(s) => parse_seeds(s)?,
        None => raw.seeds,
    };
    if seeds.is_empty() {
        return Err(CliError::Config("seed list is empty".into()));
    }
    if raw.percentiles.is_empty() || raw.percentiles.iter().any(|&p| !(p > 0.0 && p <= 100.0)) {
        return Err(CliError::Config("percentiles must be nonempty and lie in (0, 100]".into()));
    }
    let params = resolve_params(kind, raw.params)?;
    if let Some(spec) = &sweep {
        for i in 0..spec.values.len() {
            params_at(kind, &params, Some((spec, i)))?;
        }
    }
    Ok(RunConfig {
        command: command_name(kind).into(),
        seeds,
        percentiles: raw.percentiles,
        data: raw.data,
        sweep,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_parsing() {
        let s = SweepSpec::parse("sigma=2^-5,0.25, 1").unwrap();
        assert_eq!(s.param, "sigma");
        assert_eq!(s.values, vec![Value::from(2f64.powi(-5)), Value::from(0.25), Value::from(1)]);
        assert_eq!(s.labels, vec!["2^-5", "0.25", "1"]);
        assert_eq!(SweepSpec::parse("joint.m=3").unwrap().pointer(), "/joint/m");
        assert!(SweepSpec::parse("sigma").is_err());
        assert!(SweepSpec::parse("sigma=").is_err());
        assert!(SweepSpec::parse("sigma=2^x").is_err());
    }

    #[test]
    fn seeds_parsing() {
        assert_eq!(parse_seeds("1, 2,3").unwrap(), vec![1, 2, 3]);
        assert!(parse_seeds("").unwrap().is_empty());
        assert!(parse_seeds("a").is_err());
    }

    #[test]
    fn defaults_are_filled_and_unknown_keys_rejected() {
        let v = resolve_params(CommandKind::FitH, Value::Null).unwrap();
        assert_eq!(v["n"], Value::from(400));
        assert!(resolve_params(CommandKind::FitH, serde_json::json!({"nn": 3})).is_err());
        let spec = SweepSpec::parse("n=100,200").unwrap();
        let at = params_at(CommandKind::FitH, &v, Some((&spec, 1))).unwrap();
        assert_eq!(at["n"], Value::from(200));
        let bad = SweepSpec::parse("bogus=1").unwrap();
        assert!(params_at(CommandKind::FitH, &v, Some((&bad, 0))).is_err());
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(CliError::from(Error::InvalidParameter("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(Error::IllConditioned { condition: 1e20, cap: 1e12 }).exit_code(), 3);
        assert_eq!(CliError::from(Error::ParticleBlowup { simulation: 0, step: 1 }).exit_code(), 3);
    }
}
