//! Weighted-centroid location inference on uploaded gradients.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Error, Result};
use crate::geometry::{GridSpec, Point2};

/// Weight exponent `nu`: weights are `|G_m|^nu`, or the single strongest
/// cell for `Inf`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Nu {
    Finite(f64),
    Inf,
}

impl Nu {
    pub fn new(v: f64) -> Result<Self> {
        if v == f64::INFINITY {
            return Ok(Nu::Inf);
        }
        if !(v.is_finite() && v > 0.0) {
            return Err(invalid(format!("nu must be positive, got {v}")));
        }
        Ok(Nu::Finite(v))
    }

    pub fn value(&self) -> f64 {
        match self {
            Nu::Finite(v) => *v,
            Nu::Inf => f64::INFINITY,
        }
    }
}

impl Default for Nu {
    fn default() -> Self {
        Nu::Finite(2.0)
    }
}

impl fmt::Display for Nu {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Nu::Finite(v) => write!(f, "{v}"),
            Nu::Inf => f.write_str("inf"),
        }
    }
}

impl FromStr for Nu {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinity" => Ok(Nu::Inf),
            t => Nu::new(t.parse::<f64>().map_err(|_| invalid(format!("cannot parse nu from '{s}'")))?),
        }
    }
}

impl Serialize for Nu {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Nu::Finite(v) => s.serialize_f64(*v),
            Nu::Inf => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Nu {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Nu::new(v),
            Raw::Text(t) => t.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}

/// Weighted centroid of cell centers with weights `|g_m|^nu`.
///
/// Weights are computed on `|g_m| / max |g|`, which leaves the estimate
/// unchanged and keeps tiny gradients from underflowing.
pub fn wcl_estimate(g: &[f64], grid: &GridSpec, nu: Nu) -> Result<Point2> {
    if g.len() != grid.num_cells() {
        return Err(invalid(format!(
            "gradient has {} entries, grid has {} cells",
            g.len(),
            grid.num_cells()
        )));
    }
    let (arg, peak) = g
        .iter()
        .enumerate()
        .fold((0, 0.0_f64), |(bi, bv), (m, v)| if v.abs() > bv { (m, v.abs()) } else { (bi, bv) });
    if peak == 0.0 || !peak.is_finite() {
        return Err(Error::NoInformation);
    }
    let nu = match nu {
        Nu::Inf => return Ok(grid.center_of(arg)),
        Nu::Finite(v) => v,
    };
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for (m, v) in g.iter().enumerate() {
        if *v == 0.0 {
            continue;
        }
        let w = (v.abs() / peak).powf(nu);
        let c = grid.center_of(m);
        sx += w * c[0];
        sy += w * c[1];
        sw += w;
    }
    Ok([sx / sw, sy / sw])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserEstimate {
    pub user_id: usize,
    pub truth: Point2,
    /// `None` when the upload was all zero.
    pub estimate: Option<Point2>,
    pub error_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    pub round: usize,
    pub nu: Nu,
    pub users: Vec<UserEstimate>,
    /// Root mean squared error over users with an estimate (m); `None` if
    /// every upload was excluded.
    pub rmse_m: Option<f64>,
}

impl AttackReport {
    pub fn excluded(&self) -> impl Iterator<Item = usize> + '_ {
        self.users.iter().filter(|u| u.estimate.is_none()).map(|u| u.user_id)
    }

    /// Rows `round,user_id,err_m,rmse_m,nu`; excluded users have an empty
    /// `err_m`.
    pub fn write_csv<W: Write>(&self, writer: W, header: bool) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        if header {
            w.write_record(["round", "user_id", "err_m", "rmse_m", "nu"])?;
        }
        let rmse = self.rmse_m.map(|v| v.to_string()).unwrap_or_default();
        for u in &self.users {
            w.write_record([
                self.round.to_string(),
                u.user_id.to_string(),
                u.error_m.map(|v| v.to_string()).unwrap_or_default(),
                rmse.clone(),
                self.nu.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Attacks every upload; `uploads` and `truths` are `(user_id, value)`
/// pairs matched by id.
pub fn attack_round(
    round: usize,
    uploads: &[(usize, &[f64])],
    truths: &[(usize, Point2)],
    grid: &GridSpec,
    nu: Nu,
) -> Result<AttackReport> {
    let mut users = Vec::with_capacity(uploads.len());
    for &(id, g) in uploads {
        let truth = truths
            .iter()
            .find(|t| t.0 == id)
            .map(|t| t.1)
            .ok_or_else(|| invalid(format!("no true location for user {id}")))?;
        let (estimate, error_m) = match wcl_estimate(g, grid, nu) {
            Ok(p) => (Some(p), Some((p[0] - truth[0]).hypot(p[1] - truth[1]))),
            Err(Error::NoInformation) => (None, None),
            Err(e) => return Err(e),
        };
        users.push(UserEstimate { user_id: id, truth, estimate, error_m });
    }
    let errs: Vec<f64> = users.iter().filter_map(|u| u.error_m).collect();
    let rmse_m = (!errs.is_empty()).then(|| (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt());
    Ok(AttackReport { round, nu, users, rmse_m })
}
