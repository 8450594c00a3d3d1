use std::f64::consts::PI;

use crate::error::{DdclError, Result};
use crate::numerics::{Matrix, SeededRng};

use super::{standardize_columns, LabeledDataset};

/// Earth's gravitational parameter, km³/s².
pub const MU_EARTH_KM3_S2: f64 = 398_600.441_8;
const EARTH_RADIUS_KM: f64 = 6378.0;

/// Orbital period `2π √(a³/μ)` in seconds for a semi-major axis in km.
pub fn orbital_period(a_km: f64) -> f64 {
    2.0 * PI * (a_km.powi(3) / MU_EARTH_KM3_S2).sqrt()
}

/// Mean orbital elements and radar cross-section range of one regime.
#[derive(Clone, Debug, PartialEq)]
pub struct RegimeParams {
    pub name: &'static str,
    pub a_km: f64,
    pub e: f64,
    pub inclination_deg: f64,
    /// Log-uniform RCS range in m².
    pub rcs_m2: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DebrisParams {
    pub regimes: Vec<RegimeParams>,
    pub per_class: usize,
    /// Per-class feature noise is spaced linearly over `[sigma_min, sigma_max]`
    /// in regime order.
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub standardize: bool,
}

impl Default for DebrisParams {
    fn default() -> Self {
        Self {
            regimes: vec![
                RegimeParams {
                    name: "LEO",
                    a_km: 7200.0,
                    e: 0.0,
                    inclination_deg: 51.6,
                    rcs_m2: (0.01, 1.0),
                },
                RegimeParams {
                    name: "MEO",
                    a_km: 20200.0,
                    e: 0.0,
                    inclination_deg: 55.0,
                    rcs_m2: (1.0, 10.0),
                },
                RegimeParams {
                    name: "GEO",
                    a_km: 42164.0,
                    e: 0.0,
                    inclination_deg: 0.0,
                    rcs_m2: (5.0, 50.0),
                },
                RegimeParams {
                    name: "HEO",
                    a_km: 26560.0,
                    e: 0.74,
                    inclination_deg: 63.4,
                    rcs_m2: (0.5, 5.0),
                },
            ],
            per_class: 400,
            sigma_min: 0.02,
            sigma_max: 0.04,
            standardize: true,
        }
    }
}

impl DebrisParams {
    /// Noise-free, unstandardised features; useful for inspecting the raw
    /// feature map.
    pub fn noiseless(mut self) -> Self {
        self.sigma_min = 0.0;
        self.sigma_max = 0.0;
        self.standardize = false;
        self
    }

    pub fn class_sigma(&self, class: usize) -> f64 {
        let k = self.regimes.len();
        if k <= 1 {
            return self.sigma_min;
        }
        self.sigma_min + (self.sigma_max - self.sigma_min) * class as f64 / (k - 1) as f64
    }

    fn validate(&self) -> Result<()> {
        if self.regimes.is_empty() || self.per_class == 0 {
            return Err(DdclError::invalid("regimes", "need at least one regime and object"));
        }
        for r in &self.regimes {
            if !(r.a_km > EARTH_RADIUS_KM) {
                return Err(DdclError::invalid(
                    "a_km",
                    format!("{}: semi-major axis {} km is inside the Earth", r.name, r.a_km),
                ));
            }
            if !(0.0..1.0).contains(&r.e) {
                return Err(DdclError::invalid("e", format!("{}: eccentricity {} not in [0,1)", r.name, r.e)));
            }
            if !(r.rcs_m2.0 > 0.0 && r.rcs_m2.1 >= r.rcs_m2.0) {
                return Err(DdclError::invalid("rcs_m2", format!("{}: bad RCS range", r.name)));
            }
        }
        if !(self.sigma_min >= 0.0 && self.sigma_max >= self.sigma_min) {
            return Err(DdclError::invalid("sigma", "need 0 <= sigma_min <= sigma_max"));
        }
        Ok(())
    }
}

pub const DEBRIS_FEATURES: [&str; 7] = [
    "a_over_amax",
    "e",
    "sin_i",
    "cos_i",
    "sin_raan",
    "rcs_over_rcsmax",
    "period_over_tmax",
];

/// Synthetic orbital-debris catalogue with feature vector
/// `[a/a_max, e, sin i, cos i, sin Ω, RCS/RCS_max, T_orb/T_max]`.
///
/// Objects cycle through the regimes in order. Per-class Gaussian noise is
/// added to the assembled features before (optional) standardisation.
pub fn generate_debris(params: &DebrisParams, seed: u64) -> Result<LabeledDataset> {
    params.validate()?;
    let root = SeededRng::new(seed);
    let mut draw = root.split(0);
    let mut noise = root.split(1);

    let k = params.regimes.len();
    let n = k * params.per_class;
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let raan: Vec<f64> = (0..n).map(|_| draw.uniform(0.0, 2.0 * PI)).collect();
    let rcs: Vec<f64> = labels
        .iter()
        .map(|&c| {
            let (lo, hi) = params.regimes[c].rcs_m2;
            draw.uniform(lo.ln(), hi.ln()).exp()
        })
        .collect();

    let a_max = params.regimes.iter().map(|r| r.a_km).fold(0.0, f64::max);
    let t_max = orbital_period(a_max);
    let rcs_max = rcs.iter().copied().fold(0.0, f64::max);

    let mut data = Vec::with_capacity(n * DEBRIS_FEATURES.len());
    for i in 0..n {
        let c = labels[i];
        let r = &params.regimes[c];
        let inc = r.inclination_deg.to_radians();
        let sigma = params.class_sigma(c);
        let features = [
            r.a_km / a_max,
            r.e,
            inc.sin(),
            inc.cos(),
            raan[i].sin(),
            rcs[i] / rcs_max,
            orbital_period(r.a_km) / t_max,
        ];
        for f in features {
            data.push(if sigma > 0.0 { f + sigma * noise.normal() } else { f });
        }
    }
    let mut x = Matrix::new(n, DEBRIS_FEATURES.len(), data)?;
    if params.standardize {
        standardize_columns(&mut x);
    }
    LabeledDataset::new(
        x,
        labels,
        DEBRIS_FEATURES.iter().map(|s| s.to_string()).collect(),
    )
}
