//! Noise schedules, forward diffusion and parameterization conversions.
//!
//! Two schedule kinds share one representation: a discrete grid of `T + 1`
//! signal/noise coefficient pairs `(alpha_t, sigma_t)` with `t = 0` the clean
//! end. `vp_linear` is the variance-preserving DDPM construction with linear
//! betas; `edm_sigma` keeps `alpha = 1` and places the noise levels on the
//! rho-warped grid used by EDM samplers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Coefficients below this are treated as zero when dividing.
pub const MIN_COEFF: f64 = 1e-6;

/// Upper clamp on the truncated-SNR loss weight.
pub const SNR_WEIGHT_CAP: f64 = 1e4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    VpLinear {
        steps: usize,
        beta_min: f64,
        beta_max: f64,
    },
    EdmSigma {
        steps: usize,
        sigma_min: f64,
        sigma_max: f64,
        #[serde(default = "default_rho")]
        rho: f64,
    },
}

fn default_rho() -> f64 {
    7.0
}

impl ScheduleSpec {
    pub fn vp_default(steps: usize) -> Self {
        ScheduleSpec::VpLinear {
            steps,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }

    pub fn edm_default(steps: usize) -> Self {
        ScheduleSpec::EdmSigma {
            steps,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
        }
    }

    pub fn steps(&self) -> usize {
        match *self {
            ScheduleSpec::VpLinear { steps, .. } | ScheduleSpec::EdmSigma { steps, .. } => steps,
        }
    }

    pub fn is_vp(&self) -> bool {
        matches!(self, ScheduleSpec::VpLinear { .. })
    }
}

/// One resolved position on a schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimePoint {
    /// Native coordinate: step index for `vp_linear`, noise level for `edm_sigma`.
    pub t: f64,
    pub alpha: f64,
    pub sigma: f64,
    /// Conditioning time in `[0, 1]`.
    pub t_norm: f64,
}

impl TimePoint {
    pub fn snr(&self) -> f64 {
        (self.alpha * self.alpha) / (self.sigma * self.sigma)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(spec: ScheduleSpec) -> Result<Self> {
        let steps = spec.steps();
        if steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        let (alpha, sigma) = match spec {
            ScheduleSpec::VpLinear { beta_min, beta_max, .. } => {
                if !(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0) {
                    return Err(Error::config(format!(
                        "vp_linear needs 0 < beta_min < beta_max < 1, got [{beta_min}, {beta_max}]"
                    )));
                }
                let mut alpha = vec![1.0];
                let mut sigma = vec![0.0];
                let mut alpha_bar = 1.0f64;
                for t in 1..=steps {
                    let frac = if steps == 1 { 0.0 } else { (t - 1) as f64 / (steps - 1) as f64 };
                    alpha_bar *= 1.0 - (beta_min + frac * (beta_max - beta_min));
                    alpha.push(alpha_bar.sqrt());
                    sigma.push((1.0 - alpha_bar).sqrt());
                }
                (alpha, sigma)
            }
            ScheduleSpec::EdmSigma { sigma_min, sigma_max, rho, .. } => {
                if !(sigma_min > 0.0 && sigma_min < sigma_max && rho > 0.0) {
                    return Err(Error::config(format!(
                        "edm_sigma needs 0 < sigma_min < sigma_max and rho > 0, got [{sigma_min}, {sigma_max}], rho {rho}"
                    )));
                }
                let mut sigma = vec![0.0];
                for t in 1..=steps {
                    let frac = if steps == 1 { 1.0 } else { (t - 1) as f64 / (steps - 1) as f64 };
                    sigma.push(rho_interp(sigma_min, sigma_max, rho, frac));
                }
                (vec![1.0; steps + 1], sigma)
            }
        };
        Ok(Self { spec, alpha, sigma })
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    pub fn steps(&self) -> usize {
        self.spec.steps()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn is_vp(&self) -> bool {
        self.spec.is_vp()
    }

    /// `log(alpha_t^2 / sigma_t^2)` for every `t` (`+inf` at the clean end).
    pub fn log_snr(&self) -> Vec<f64> {
        self.alpha
            .iter()
            .zip(&self.sigma)
            .map(|(a, s)| (a * a / (s * s)).ln())
            .collect()
    }

    fn check_index(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::contract(format!(
                "timestep {t} outside [0, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Grid point `t` of the discrete schedule.
    pub fn at_index(&self, t: usize) -> Result<TimePoint> {
        self.check_index(t)?;
        let (alpha, sigma) = (self.alpha[t], self.sigma[t]);
        Ok(match self.spec {
            ScheduleSpec::VpLinear { steps, .. } => TimePoint {
                t: t as f64,
                alpha,
                sigma,
                t_norm: t as f64 / steps as f64,
            },
            ScheduleSpec::EdmSigma { .. } => self.at_sigma(sigma)?,
        })
    }

    /// Continuous noise level on an `edm_sigma` schedule.
    pub fn at_sigma(&self, sigma: f64) -> Result<TimePoint> {
        let ScheduleSpec::EdmSigma { sigma_min, sigma_max, .. } = self.spec else {
            return Err(Error::contract("continuous sigma lookup needs an edm_sigma schedule"));
        };
        if !(0.0..=sigma_max * (1.0 + 1e-9)).contains(&sigma) {
            return Err(Error::contract(format!("sigma {sigma} outside [0, {sigma_max}]")));
        }
        let t_norm = if sigma <= 0.0 {
            0.0
        } else {
            ((sigma.ln() - sigma_min.ln()) / (sigma_max.ln() - sigma_min.ln())).clamp(0.0, 1.0)
        };
        Ok(TimePoint {
            t: sigma,
            alpha: 1.0,
            sigma,
            t_norm,
        })
    }

    /// Resolves a native coordinate: an integral step index for `vp_linear`,
    /// a noise level for `edm_sigma`.
    pub fn point(&self, t: f64) -> Result<TimePoint> {
        if self.is_vp() {
            if t < 0.0 || t.fract() != 0.0 {
                return Err(Error::contract(format!("vp timestep must be a whole index, got {t}")));
            }
            self.at_index(t as usize)
        } else {
            self.at_sigma(t)
        }
    }

    /// `alpha_t * x0 + sigma_t * eps`.
    pub fn forward_diffuse(&self, x0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        self.check_index(t)?;
        x0.lin_comb(self.alpha[t], eps, self.sigma[t])
    }
}

/// Noise level at fraction `frac` of the rho-warped interval.
pub fn rho_interp(lo: f64, hi: f64, rho: f64, frac: f64) -> f64 {
    let (a, b) = (lo.powf(1.0 / rho), hi.powf(1.0 / rho));
    (a + frac * (b - a)).powf(rho)
}

/// `alpha_i * x0_i + sigma_i * eps_i` row by row.
pub fn forward_diffuse_rows(x0: &Tensor, eps: &Tensor, points: &[TimePoint]) -> Result<Tensor> {
    let alpha: Vec<f64> = points.iter().map(|p| p.alpha).collect();
    let sigma: Vec<f64> = points.iter().map(|p| p.sigma).collect();
    combine_rows(x0, &alpha, eps, &sigma)
}

/// Row-wise `ca[i] * a[i] + cb[i] * b[i]` in `f64` arithmetic.
pub fn combine_rows(a: &Tensor, ca: &[f64], b: &Tensor, cb: &[f64]) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim("combine_rows", a.shape(), b.shape()));
    }
    if ca.len() != a.rows() || cb.len() != a.rows() {
        return Err(Error::dim("combine_rows", a.shape(), &[ca.len(), cb.len()]));
    }
    let cols = a.cols();
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(|(i, (&x, &y))| {
            let r = i / cols;
            (ca[r] * x as f64 + cb[r] * y as f64) as f32
        })
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Row `i` multiplied by `c[i]`, in `f64` arithmetic.
pub fn scale_rows(a: &Tensor, c: &[f64]) -> Result<Tensor> {
    if c.len() != a.rows() {
        return Err(Error::dim("scale_rows", a.shape(), &[c.len()]));
    }
    let cols = a.cols();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| (c[i / cols] * x as f64) as f32)
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    Epsilon,
    X0,
    V,
}

impl Parameterization {
    pub const ALL: [Parameterization; 3] =
        [Parameterization::Epsilon, Parameterization::X0, Parameterization::V];
}

/// Coefficients `(c_value, c_z)` with `to = c_value * from + c_z * z_t`.
///
/// Uses `z = alpha x0 + sigma eps` and `v = alpha eps - sigma x0` without
/// assuming `alpha^2 + sigma^2 = 1`.
pub fn conversion_coeffs(
    from: Parameterization,
    to: Parameterization,
    alpha: f64,
    sigma: f64,
) -> Result<(f64, f64)> {
    use Parameterization::*;
    let norm = alpha * alpha + sigma * sigma;
    let need = |value: f64, what: &str| -> Result<f64> {
        if value.abs() < MIN_COEFF {
            Err(Error::Singularity(format!(
                "{from:?} -> {to:?} divides by {what} = {value:e}"
            )))
        } else {
            Ok(value)
        }
    };
    Ok(match (from, to) {
        (a, b) if a == b => (1.0, 0.0),
        (Epsilon, X0) => {
            let a = need(alpha, "alpha")?;
            (-sigma / a, 1.0 / a)
        }
        (X0, Epsilon) => {
            let s = need(sigma, "sigma")?;
            (-alpha / s, 1.0 / s)
        }
        (Epsilon, V) => {
            let a = need(alpha, "alpha")?;
            (norm / a, -sigma / a)
        }
        (V, Epsilon) => (alpha / norm, sigma / norm),
        (X0, V) => {
            let s = need(sigma, "sigma")?;
            (-norm / s, alpha / s)
        }
        (V, X0) => (-sigma / norm, alpha / norm),
        _ => unreachable!(),
    })
}

/// Converts a prediction between parameterizations at one time point.
pub fn convert_param(
    value: &Tensor,
    from: Parameterization,
    to: Parameterization,
    z_t: &Tensor,
    point: &TimePoint,
) -> Result<Tensor> {
    if value.shape() != z_t.shape() {
        return Err(Error::dim("convert_param", value.shape(), z_t.shape()));
    }
    if from == to {
        return Ok(value.detach());
    }
    let (cv, cz) = conversion_coeffs(from, to, point.alpha, point.sigma)?;
    value.lin_comb(cv, z_t, cz)
}

/// Row-wise [`convert_param`] for batches with per-row time points.
pub fn convert_param_rows(
    value: &Tensor,
    from: Parameterization,
    to: Parameterization,
    z_t: &Tensor,
    points: &[TimePoint],
) -> Result<Tensor> {
    let (cv, cz) = conversion_rows(from, to, points)?;
    combine_rows(value, &cv, z_t, &cz)
}

pub(crate) fn conversion_rows(
    from: Parameterization,
    to: Parameterization,
    points: &[TimePoint],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut cv = Vec::with_capacity(points.len());
    let mut cz = Vec::with_capacity(points.len());
    for p in points {
        let (a, b) = conversion_coeffs(from, to, p.alpha, p.sigma)?;
        cv.push(a);
        cz.push(b);
    }
    Ok((cv, cz))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnrWeighting {
    Uniform,
    TruncatedSnr,
}

/// Loss weight `w(lambda_t)`: 1, or `max(alpha^2 / sigma^2, 1)` capped at
/// [`SNR_WEIGHT_CAP`].
pub fn snr_weight(point: &TimePoint, scheme: SnrWeighting) -> f64 {
    match scheme {
        SnrWeighting::Uniform => 1.0,
        SnrWeighting::TruncatedSnr => {
            let snr = point.snr();
            if snr.is_nan() {
                SNR_WEIGHT_CAP
            } else {
                snr.clamp(1.0, SNR_WEIGHT_CAP)
            }
        }
    }
}
