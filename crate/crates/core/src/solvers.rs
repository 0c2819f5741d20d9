//! Deterministic probability-flow samplers.
//!
//! DDIM runs on any schedule through `(alpha, sigma)`; Euler and Heun use the
//! `edm_sigma` convention where `alpha = 1` and the ODE time is `sigma`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Denoiser;
use crate::schedule::{combine_rows, rho_interp, NoiseSchedule, TimePoint, MIN_COEFF};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Ddim,
    Euler,
    Heun,
}

impl SolverKind {
    pub const ALL: [SolverKind; 3] = [SolverKind::Ddim, SolverKind::Euler, SolverKind::Heun];

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Ddim => "ddim",
            SolverKind::Euler => "euler",
            SolverKind::Heun => "heun",
        }
    }
}

impl std::str::FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SolverKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown solver `{s}`, expected one of ddim, euler, heun")))
    }
}

/// Strictly decreasing sequence of time points; the last one is the clean end.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    points: Vec<TimePoint>,
}

impl TimeGrid {
    pub fn new(points: Vec<TimePoint>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::contract("a time grid needs at least one interval"));
        }
        if let Some(w) = points.windows(2).find(|w| w[0].t <= w[1].t) {
            return Err(Error::contract(format!(
                "time grid must be strictly decreasing, found {} then {}",
                w[0].t, w[1].t
            )));
        }
        Ok(Self { points })
    }

    /// Resolves native coordinates against `sched`.
    pub fn from_times(sched: &NoiseSchedule, times: &[f64]) -> Result<Self> {
        let points = times.iter().map(|&t| sched.point(t)).collect::<Result<_>>()?;
        Self::new(points)
    }

    /// `steps` equal index strides from `T` down to 0 on a `vp_linear` schedule.
    pub fn uniform_indices(sched: &NoiseSchedule, steps: usize) -> Result<Self> {
        let total = sched.steps();
        if !sched.is_vp() {
            return Err(Error::config("index grids need a vp_linear schedule"));
        }
        if steps == 0 || !total.is_multiple_of(steps) {
            return Err(Error::config(format!(
                "{steps} steps do not divide the {total}-step schedule"
            )));
        }
        let stride = total / steps;
        let times: Vec<f64> = (0..=steps).rev().map(|i| (i * stride) as f64).collect();
        Self::from_times(sched, &times)
    }

    /// `nfe + 1` points on a rho-warped sigma grid from `sigma_max` to
    /// `sigma_min`, with the last one replaced by 0.
    pub fn karras(sched: &NoiseSchedule, nfe: usize, rho: f64) -> Result<Self> {
        let crate::schedule::ScheduleSpec::EdmSigma { sigma_min, sigma_max, .. } = *sched.spec() else {
            return Err(Error::config("sigma grids need an edm_sigma schedule"));
        };
        if nfe == 0 {
            return Err(Error::config("nfe must be >= 1"));
        }
        let mut sigmas: Vec<f64> = (0..=nfe)
            .map(|i| rho_interp(sigma_min, sigma_max, rho, 1.0 - i as f64 / nfe as f64))
            .collect();
        sigmas[0] = sigma_max;
        sigmas[nfe] = 0.0;
        Self::from_times(sched, &sigmas)
    }

    /// `k` sub-steps between `t` and `t_prev`, uniform in the schedule's native
    /// coordinate: index for `vp_linear`, log-sigma for `edm_sigma`. The first
    /// and last points are `t` and `t_prev` exactly.
    pub fn subdivide(sched: &NoiseSchedule, t: &TimePoint, t_prev: &TimePoint, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("sub-step count must be >= 1"));
        }
        if t.t <= t_prev.t {
            return Err(Error::contract(format!("interval [{}, {}] is empty", t_prev.t, t.t)));
        }
        let mut points = vec![*t];
        if sched.is_vp() {
            let (hi, lo) = (t.t as usize, t_prev.t as usize);
            if (hi - lo) % k != 0 {
                return Err(Error::config(format!(
                    "{k} sub-steps do not divide the index interval [{lo}, {hi}]"
                )));
            }
            let stride = (hi - lo) / k;
            for j in 1..k {
                points.push(sched.at_index(hi - j * stride)?);
            }
        } else {
            let crate::schedule::ScheduleSpec::EdmSigma { sigma_min, .. } = *sched.spec() else {
                unreachable!("non-vp schedules are edm_sigma")
            };
            let lo = t_prev.t.max(sigma_min.min(t.t * 0.5));
            let (a, b) = (t.t.ln(), lo.ln());
            for j in 1..k {
                let s = (a + (b - a) * j as f64 / k as f64).exp();
                points.push(sched.at_sigma(s)?);
            }
        }
        points.push(*t_prev);
        Self::new(points)
    }

    pub fn points(&self) -> &[TimePoint] {
        &self.points
    }

    pub fn intervals(&self) -> usize {
        self.points.len() - 1
    }

    pub fn first(&self) -> &TimePoint {
        &self.points[0]
    }

    pub fn last(&self) -> &TimePoint {
        self.points.last().expect("non-empty grid")
    }

    pub fn times(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.t).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryEntry {
    /// Time point of each row of `state`.
    pub points: Vec<TimePoint>,
    pub state: Tensor,
}

impl TrajectoryEntry {
    /// Time of the first row; rows share it on a plain [`TimeGrid`] solve.
    pub fn t(&self) -> f64 {
        self.points[0].t
    }
}

/// States visited by a solver, starting with the initial one.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    entries: Vec<TrajectoryEntry>,
}

impl TrajectoryRecord {
    pub fn new(entries: Vec<TrajectoryEntry>) -> Result<Self> {
        let first = entries
            .first()
            .ok_or_else(|| Error::contract("empty trajectory"))?;
        let shape = first.state.shape().to_vec();
        for e in &entries {
            if e.state.shape() != shape.as_slice() {
                return Err(Error::dim("trajectory", &shape, e.state.shape()));
            }
            if e.points.len() != e.state.rows() {
                return Err(Error::dim("trajectory", &[e.state.rows()], &[e.points.len()]));
            }
            if e.state.requires_grad() {
                return Err(Error::contract("trajectory states must not require gradients"));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[TrajectoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn state(&self, i: usize) -> &Tensor {
        &self.entries[i].state
    }

    pub fn endpoint(&self) -> &Tensor {
        &self.entries.last().expect("non-empty").state
    }

    pub fn times(&self) -> Vec<f64> {
        self.entries.iter().map(TrajectoryEntry::t).collect()
    }

    /// One row per `(step, sample)` with columns `step,sample,t,x0..`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let c = self.entries[0].state.cols();
        let cols: Vec<String> = (0..c).map(|i| format!("x{i}")).collect();
        writeln!(w, "step,sample,t,{}", cols.join(","))?;
        for (step, e) in self.entries.iter().enumerate() {
            for r in 0..e.state.rows() {
                let vals: Vec<String> = e.state.row(r).iter().map(|v| v.to_string()).collect();
                writeln!(w, "{step},{r},{},{}", e.points[r].t, vals.join(","))?;
            }
        }
        Ok(())
    }
}

fn check_order(t: &[TimePoint], t_prev: &[TimePoint], rows: usize) -> Result<()> {
    if t.len() != rows || t_prev.len() != rows {
        return Err(Error::dim("solver step", &[rows], &[t.len(), t_prev.len()]));
    }
    if let Some((a, b)) = t.iter().zip(t_prev).find(|(a, b)| a.t < b.t) {
        return Err(Error::contract(format!(
            "solver steps run toward the clean end, got t = {} -> {}",
            a.t, b.t
        )));
    }
    Ok(())
}

/// DDIM update with row `i` moving from `t[i]` to `t_prev[i]`.
pub fn ddim_step_rows<D: Denoiser + ?Sized>(
    net: &D,
    z: &Tensor,
    t: &[TimePoint],
    t_prev: &[TimePoint],
) -> Result<Tensor> {
    check_order(t, t_prev, z.rows())?;
    if t.iter().zip(t_prev).all(|(a, b)| a.t == b.t) {
        return Ok(z.detach());
    }
    if let Some(p) = t.iter().find(|p| p.alpha < MIN_COEFF) {
        return Err(Error::Singularity(format!("DDIM step from t = {} with alpha {}", p.t, p.alpha)));
    }
    let eps = net.predict_eps(z, t)?;
    // z' = (alpha' / alpha) z + (sigma' - alpha' sigma / alpha) eps
    let cz: Vec<f64> = t.iter().zip(t_prev).map(|(a, b)| b.alpha / a.alpha).collect();
    let ce: Vec<f64> = t
        .iter()
        .zip(t_prev)
        .map(|(a, b)| b.sigma - b.alpha * a.sigma / a.alpha)
        .collect();
    let mut out = combine_rows(z, &cz, &eps, &ce)?;
    for (r, (a, b)) in t.iter().zip(t_prev).enumerate() {
        if a.t == b.t {
            let c = z.cols();
            out.data_mut()[r * c..(r + 1) * c].copy_from_slice(z.row(r));
        }
    }
    Ok(out)
}

pub fn ddim_step<D: Denoiser + ?Sized>(net: &D, z: &Tensor, t: &TimePoint, t_prev: &TimePoint) -> Result<Tensor> {
    let n = z.rows();
    ddim_step_rows(net, z, &vec![*t; n], &vec![*t_prev; n])
}

/// PF-ODE velocity `(x - x0_hat) / sigma`, which is the noise prediction when
/// `alpha = 1`.
fn velocity<D: Denoiser + ?Sized>(net: &D, x: &Tensor, t: &[TimePoint]) -> Result<Tensor> {
    if let Some(p) = t.iter().find(|p| p.alpha != 1.0) {
        return Err(Error::config(format!(
            "euler/heun need edm_sigma time points (alpha = 1), got alpha {}",
            p.alpha
        )));
    }
    if let Some(p) = t.iter().find(|p| p.sigma <= 0.0) {
        return Err(Error::Singularity(format!("velocity at sigma = {}", p.sigma)));
    }
    net.predict_eps(x, t)
}

fn step_sizes(t: &[TimePoint], t_prev: &[TimePoint]) -> Vec<f64> {
    t.iter().zip(t_prev).map(|(a, b)| b.t - a.t).collect()
}

pub fn euler_step_rows<D: Denoiser + ?Sized>(
    net: &D,
    x: &Tensor,
    t: &[TimePoint],
    t_prev: &[TimePoint],
) -> Result<Tensor> {
    check_order(t, t_prev, x.rows())?;
    let d = velocity(net, x, t)?;
    combine_rows(x, &vec![1.0; x.rows()], &d, &step_sizes(t, t_prev))
}

pub fn euler_step<D: Denoiser + ?Sized>(net: &D, x: &Tensor, t: &TimePoint, t_prev: &TimePoint) -> Result<Tensor> {
    let n = x.rows();
    euler_step_rows(net, x, &vec![*t; n], &vec![*t_prev; n])
}

/// Euler predictor plus trapezoidal corrector. Rows stepping into `sigma = 0`
/// keep the Euler result.
pub fn heun_step_rows<D: Denoiser + ?Sized>(
    net: &D,
    x: &Tensor,
    t: &[TimePoint],
    t_prev: &[TimePoint],
) -> Result<Tensor> {
    check_order(t, t_prev, x.rows())?;
    let d1 = velocity(net, x, t)?;
    let h = step_sizes(t, t_prev);
    let ones = vec![1.0; x.rows()];
    let pred = combine_rows(x, &ones, &d1, &h)?;
    if t_prev.iter().all(|p| p.sigma <= 0.0) {
        return Ok(pred);
    }
    // rows ending at sigma = 0 get a dummy evaluation point and keep `pred`
    let eval_at: Vec<TimePoint> = t_prev
        .iter()
        .zip(t)
        .map(|(b, a)| if b.sigma > 0.0 { *b } else { *a })
        .collect();
    let d2 = velocity(net, &pred, &eval_at)?;
    let half: Vec<f64> = h.iter().map(|h| 0.5 * h).collect();
    let mut out = combine_rows(&d1, &half, &d2, &half)?;
    let c = x.cols();
    for r in 0..x.rows() {
        let dst = &mut out.data_mut()[r * c..(r + 1) * c];
        if t_prev[r].sigma <= 0.0 {
            dst.copy_from_slice(pred.row(r));
        } else {
            for (o, &xi) in dst.iter_mut().zip(x.row(r)) {
                *o = (xi as f64 + *o as f64) as f32;
            }
        }
    }
    Ok(out)
}

pub fn heun_step<D: Denoiser + ?Sized>(net: &D, x: &Tensor, t: &TimePoint, t_prev: &TimePoint) -> Result<Tensor> {
    let n = x.rows();
    heun_step_rows(net, x, &vec![*t; n], &vec![*t_prev; n])
}

pub fn step_rows<D: Denoiser + ?Sized>(
    net: &D,
    method: SolverKind,
    x: &Tensor,
    t: &[TimePoint],
    t_prev: &[TimePoint],
) -> Result<Tensor> {
    match method {
        SolverKind::Ddim => ddim_step_rows(net, x, t, t_prev),
        SolverKind::Euler => euler_step_rows(net, x, t, t_prev),
        SolverKind::Heun => heun_step_rows(net, x, t, t_prev),
    }
}

/// Integrates along per-row schedules: `steps[j][i]` is the time of row `i`
/// after `j` steps.
pub fn solve_rows<D: Denoiser + ?Sized>(
    net: &D,
    x_init: &Tensor,
    steps: &[Vec<TimePoint>],
    method: SolverKind,
) -> Result<TrajectoryRecord> {
    if steps.len() < 2 {
        return Err(Error::contract("solve needs at least one interval"));
    }
    let mut entries = Vec::with_capacity(steps.len());
    let mut x = x_init.detach();
    entries.push(TrajectoryEntry {
        points: steps[0].clone(),
        state: x.clone(),
    });
    for w in steps.windows(2) {
        x = step_rows(net, method, &x, &w[0], &w[1])?;
        entries.push(TrajectoryEntry {
            points: w[1].clone(),
            state: x.clone(),
        });
    }
    TrajectoryRecord::new(entries)
}

pub fn solve<D: Denoiser + ?Sized>(
    net: &D,
    x_init: &Tensor,
    grid: &TimeGrid,
    method: SolverKind,
) -> Result<TrajectoryRecord> {
    let n = x_init.rows();
    let steps: Vec<Vec<TimePoint>> = grid.points().iter().map(|p| vec![*p; n]).collect();
    solve_rows(net, x_init, &steps, method)
}

/// Default sampling grid: equal index strides for `vp_linear` (DDIM only),
/// a rho = 7 sigma grid for `edm_sigma`.
pub fn sampling_grid(sched: &NoiseSchedule, steps: usize, method: SolverKind) -> Result<TimeGrid> {
    if steps == 0 {
        return Err(Error::config("sampling needs at least one step"));
    }
    if sched.is_vp() {
        if method != SolverKind::Ddim {
            return Err(Error::config(format!(
                "{} needs an edm_sigma schedule; use ddim on vp_linear",
                method.name()
            )));
        }
        TimeGrid::uniform_indices(sched, steps)
    } else {
        TimeGrid::karras(sched, steps, 7.0)
    }
}

/// `n` draws from `N(0, sigma^2 I)` at the first grid point.
pub fn prior_sample<R: rand::Rng + ?Sized>(grid: &TimeGrid, n: usize, channels: usize, rng: &mut R) -> Result<Tensor> {
    Ok(Tensor::randn(&[n, channels], rng)?.scaled(grid.first().sigma))
}

/// Draws `n` samples by integrating from the prior; deterministic in `seed`.
pub fn generate<D: Denoiser + ?Sized>(
    net: &D,
    channels: usize,
    sched: &NoiseSchedule,
    steps: usize,
    n: usize,
    method: SolverKind,
    seed: u64,
) -> Result<Tensor> {
    let grid = sampling_grid(sched, steps, method)?;
    let mut rng = crate::seed::stream(seed, "sample/prior");
    let x = prior_sample(&grid, n, channels, &mut rng)?;
    Ok(solve(net, &x, &grid, method)?.endpoint().clone())
}
