use std::path::PathBuf;

use crate::error::{Error, Result};

use super::toy::ToyModel;
use super::{make_schedule, AnalyticGaussian, ScheduleKind, ScoreModel, ValueDomain};

/// Directory searched for relative `toy:` model paths.
pub const CACHE_ENV: &str = "BRACKETFORGE_CACHE";

/// Resolves a backend spec string to a model.
///
/// * `toy:<path>` loads a serialised toy model; relative paths that do not
///   exist are looked up under `$BRACKETFORGE_CACHE`.
/// * `analytic:gauss:mu=<m>,var=<v>[,size=<n>|h=<h>,w=<w>][,c=<c>][,T=<steps>][,schedule=linear|cosine][,domain=unit|signed]`
///   builds the exact Gaussian oracle (defaults: 32x32x3, 1000 linear
///   steps, `[0,1]` domain).
pub fn external_model_adapter(spec: &str) -> Result<Box<dyn ScoreModel>> {
    let (backend, rest) = spec
        .split_once(':')
        .ok_or_else(|| Error::Capability(format!("model spec '{spec}' has no backend prefix")))?;
    match backend {
        "toy" => {
            if rest.is_empty() {
                return Err(Error::Config("toy: needs a model path".into()));
            }
            Ok(Box::new(ToyModel::load(&resolve_path(rest))?))
        }
        "analytic" => {
            let params = rest
                .strip_prefix("gauss:")
                .ok_or_else(|| Error::Capability(format!("unknown analytic model in '{spec}'")))?;
            Ok(Box::new(gaussian(params)?))
        }
        other => Err(Error::Capability(format!(
            "model backend '{other}' is not available in this build (known: toy, analytic)"
        ))),
    }
}

fn resolve_path(raw: &str) -> PathBuf {
    let p = PathBuf::from(raw);
    if p.is_absolute() || p.exists() {
        return p;
    }
    match std::env::var_os(CACHE_ENV) {
        Some(dir) => PathBuf::from(dir).join(p),
        None => p,
    }
}

fn gaussian(params: &str) -> Result<AnalyticGaussian> {
    let (mut mu, mut var) = (None, None);
    let (mut h, mut w, mut c) = (32usize, 32usize, 3usize);
    let mut steps = 1000usize;
    let mut kind = ScheduleKind::LinearBeta;
    let mut domain = ValueDomain::Unit;
    for kv in params.split(',').filter(|s| !s.is_empty()) {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got '{kv}'")))?;
        let num = |v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad number '{v}' for '{k}'")))
        };
        let int = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad integer '{v}' for '{k}'")))
        };
        match k {
            "mu" => mu = Some(num(v)?),
            "var" => var = Some(num(v)?),
            "size" => {
                h = int(v)?;
                w = h;
            }
            "h" => h = int(v)?,
            "w" => w = int(v)?,
            "c" => c = int(v)?,
            "T" | "steps" => steps = int(v)?,
            "schedule" => kind = v.parse()?,
            "domain" => {
                domain = match v {
                    "unit" => ValueDomain::Unit,
                    "signed" => ValueDomain::SignedUnit,
                    "unbounded" => ValueDomain::Unbounded,
                    _ => return Err(Error::Config(format!("unknown value domain '{v}'"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown analytic parameter '{k}'"))),
        }
    }
    let mu = mu.ok_or_else(|| Error::Config("analytic:gauss needs mu".into()))?;
    let var = var.ok_or_else(|| Error::Config("analytic:gauss needs var".into()))?;
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Config("image dimensions must be positive".into()));
    }
    AnalyticGaussian::new(vec![mu], vec![var], (h, w, c), make_schedule(steps, kind)?, domain)
}
