//! Distillation loops.
//!
//! Progressive distillation (`pd`) halves a VP teacher's DDIM step count per
//! round; trajectory matching (`sfd`) trains a few-step Euler student against
//! a teacher's fine solver run on an `edm_sigma` schedule. The `_bdense`
//! variants expand the student's output head into `K` branches and supervise
//! every intermediate teacher state inside each collapsed interval.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{sliced_wasserstein, SampleSet};
use crate::net::{branch_slice_var, convert_on_tape, ScoreNet};
use crate::optim::{AdamW, AdamWConfig};
use crate::schedule::{
    combine_rows, forward_diffuse_rows, snr_weight, NoiseSchedule, Parameterization, SnrWeighting, TimePoint,
};
use crate::seed;
use crate::solvers::{generate, solve, solve_rows, SolverKind, TimeGrid, TrajectoryEntry, TrajectoryRecord};
use crate::tape::{LossKind, Tape, Var};
use crate::tensor::Tensor;

/// Per-branch loss weights; index 0 is the earliest sub-step, `K - 1` the
/// interval endpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchWeights {
    lambdas: Vec<f64>,
}

impl BranchWeights {
    pub fn new(lambdas: Vec<f64>) -> Result<Self> {
        if lambdas.is_empty() {
            return Err(Error::config("branch weights need at least one entry"));
        }
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::config(format!("branch weights must be finite and >= 0, got {lambdas:?}")));
        }
        if lambdas.iter().all(|&l| l == 0.0) {
            return Err(Error::config("at least one branch weight must be positive"));
        }
        Ok(Self { lambdas })
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![1.0; k])
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }
}

/// Log-linear weights `lambda_i = exp(a i + b)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometricSchedule {
    pub a: f64,
    pub b: f64,
}

pub fn geometric_weights(s: GeometricSchedule, k: usize) -> Result<BranchWeights> {
    if k == 0 {
        return Err(Error::config("branch count must be >= 1"));
    }
    if !(s.a.is_finite() && s.b.is_finite()) {
        return Err(Error::config(format!("schedule coefficients must be finite, got ({}, {})", s.a, s.b)));
    }
    let lambdas = (0..k)
        .map(|i| (s.a * i as f64 + s.b).exp().clamp(f64::MIN_POSITIVE, f64::MAX))
        .collect();
    BranchWeights::new(lambdas)
}

/// Published four-branch weights for trajectory matching on CIFAR-10.
pub const CIFAR_WEIGHTS: [f64; 4] = [0.017, 0.056, 0.191, 0.651];
/// Published four-branch weights for trajectory matching on ImageNet 64.
pub const IMAGENET_WEIGHTS: [f64; 4] = [0.014, 0.056, 0.223, 0.892];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightSpec {
    #[default]
    Uniform,
    Explicit {
        lambdas: Vec<f64>,
    },
    Geometric {
        a: f64,
        b: f64,
    },
}

impl WeightSpec {
    pub fn resolve(&self, k: usize) -> Result<BranchWeights> {
        match self {
            WeightSpec::Uniform => BranchWeights::uniform(k),
            WeightSpec::Explicit { lambdas } => {
                if lambdas.len() != k {
                    return Err(Error::config(format!(
                        "{} branch weights given for K = {k}",
                        lambdas.len()
                    )));
                }
                BranchWeights::new(lambdas.clone())
            }
            WeightSpec::Geometric { a, b } => geometric_weights(GeometricSchedule { a: *a, b: *b }, k),
        }
    }
}

/// `snr_w * sum_k lambda_k * dist(branch_k(student_out), targets[k + 1])`.
///
/// `targets` holds the initial state followed by exactly `K` states; they
/// enter the tape as constants.
pub fn branch_loss(
    tape: &mut Tape,
    student_out: Var,
    targets: &TrajectoryRecord,
    w: &BranchWeights,
    snr_w: f32,
    dist: LossKind,
) -> Result<Var> {
    let k = w.len();
    if targets.len() != k + 1 {
        return Err(Error::contract(format!(
            "{k} branches need {} trajectory entries, got {}",
            k + 1,
            targets.len()
        )));
    }
    let c = targets.state(0).cols();
    let width = tape.value(student_out).cols();
    if width != k * c {
        return Err(Error::contract(format!("student output has {width} channels, expected {k} x {c}")));
    }
    let mut terms = Vec::with_capacity(k);
    for (i, &lambda) in w.lambdas().iter().enumerate() {
        let pred = branch_slice_var(tape, student_out, c, k, i)?;
        let target = tape.constant(targets.state(i + 1).detach());
        terms.push(tape.reduce_loss(dist, pred, target, lambda as f32)?);
    }
    let total = tape.sum_scalars(&terms)?;
    Ok(tape.scale(total, snr_w))
}

/// Mean elementwise distance between two tensors.
pub fn distance(kind: LossKind, a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim("distance", a.shape(), b.shape()));
    }
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&p, &q)| {
            let d = p as f64 - q as f64;
            match kind {
                LossKind::Mse => d * d,
                LossKind::L1 => d.abs(),
            }
        })
        .sum();
    Ok(total / a.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMethod {
    Pd,
    PdBdense,
    Sfd,
    SfdBdense,
}

impl DistillMethod {
    pub fn name(self) -> &'static str {
        match self {
            DistillMethod::Pd => "pd",
            DistillMethod::PdBdense => "pd_bdense",
            DistillMethod::Sfd => "sfd",
            DistillMethod::SfdBdense => "sfd_bdense",
        }
    }

    pub fn is_pd(self) -> bool {
        matches!(self, DistillMethod::Pd | DistillMethod::PdBdense)
    }

    pub fn is_dense(self) -> bool {
        matches!(self, DistillMethod::PdBdense | DistillMethod::SfdBdense)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub method: DistillMethod,
    /// `K`: student branches for the dense methods and teacher sub-steps per
    /// interval for trajectory matching. Defaults to `factor` for
    /// `pd_bdense`, 4 for the trajectory-matching methods and 1 for `pd`.
    #[serde(default)]
    pub branches: Option<usize>,
    /// `N`: step reduction per progressive round.
    #[serde(default = "default_factor")]
    pub factor: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// Teacher DDIM steps at the first progressive round.
    #[serde(default = "default_start_steps")]
    pub start_steps: usize,
    /// Student steps for trajectory matching, 2 when omitted.
    #[serde(default)]
    pub nfe: Option<usize>,
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Updates per progressive round, or in total for trajectory matching.
    pub updates: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: AdamWConfig,
    /// Defaults to truncated SNR for `pd*` and uniform otherwise.
    #[serde(default)]
    pub snr: Option<SnrWeighting>,
    /// Defaults to MSE for `pd*` and L1 otherwise.
    #[serde(default)]
    pub distance: Option<LossKind>,
    /// Defaults to the CIFAR vector for `sfd_bdense` with four branches and to
    /// uniform otherwise.
    #[serde(default)]
    pub weights: Option<WeightSpec>,
    /// Defaults to DDIM for `pd*` and Heun otherwise.
    #[serde(default)]
    pub teacher_solver: Option<SolverKind>,
    #[serde(default)]
    pub seed: u64,
}

fn default_factor() -> usize {
    2
}
fn default_rounds() -> usize {
    1
}
fn default_start_steps() -> usize {
    64
}
fn default_rho() -> f64 {
    7.0
}
fn default_batch() -> usize {
    128
}
fn default_optimizer() -> AdamWConfig {
    AdamWConfig::with_lr(5e-4)
}

impl DistillConfig {
    pub fn new(method: DistillMethod, updates: usize, seed: u64) -> Self {
        Self {
            method,
            branches: None,
            factor: default_factor(),
            rounds: default_rounds(),
            start_steps: default_start_steps(),
            nfe: None,
            rho: default_rho(),
            updates,
            batch_size: default_batch(),
            optimizer: default_optimizer(),
            snr: None,
            distance: None,
            weights: None,
            teacher_solver: None,
            seed,
        }
    }

    pub fn k(&self) -> usize {
        self.branches.unwrap_or(match self.method {
            DistillMethod::Pd => 1,
            DistillMethod::PdBdense => self.factor,
            DistillMethod::Sfd | DistillMethod::SfdBdense => 4,
        })
    }

    /// Student steps for trajectory matching; 2 unless set.
    pub fn student_nfe(&self) -> usize {
        self.nfe.unwrap_or(2)
    }

    pub fn student_branches(&self) -> usize {
        if self.method.is_dense() {
            self.k()
        } else {
            1
        }
    }

    pub fn snr(&self) -> SnrWeighting {
        self.snr.unwrap_or(if self.method.is_pd() {
            SnrWeighting::TruncatedSnr
        } else {
            SnrWeighting::Uniform
        })
    }

    pub fn distance(&self) -> LossKind {
        self.distance
            .unwrap_or(if self.method.is_pd() { LossKind::Mse } else { LossKind::L1 })
    }

    pub fn teacher_solver(&self) -> SolverKind {
        self.teacher_solver
            .unwrap_or(if self.method.is_pd() { SolverKind::Ddim } else { SolverKind::Heun })
    }

    pub fn weight_spec(&self) -> WeightSpec {
        match &self.weights {
            Some(w) => w.clone(),
            None if self.method == DistillMethod::SfdBdense && self.k() == 4 => WeightSpec::Explicit {
                lambdas: CIFAR_WEIGHTS.to_vec(),
            },
            None => WeightSpec::Uniform,
        }
    }

    /// Weights over the student's branches.
    pub fn branch_weights(&self) -> Result<BranchWeights> {
        if self.method.is_dense() {
            self.weight_spec().resolve(self.k())
        } else {
            BranchWeights::uniform(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        let m = self.method.name();
        if k == 0 {
            return Err(Error::config("K must be >= 1"));
        }
        if self.updates == 0 || self.batch_size == 0 {
            return Err(Error::config("updates and batch_size must be >= 1"));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be > 0, got {}", self.optimizer.lr)));
        }
        if self.method.is_pd() {
            if self.factor < 2 {
                return Err(Error::config(format!("{m} needs a step-reduction factor N >= 2")));
            }
            if self.method == DistillMethod::Pd && k != 1 {
                return Err(Error::config(format!("pd trains a single-branch student, got K = {k}")));
            }
            if !self.factor.is_multiple_of(k) {
                return Err(Error::config(format!(
                    "{m}: K = {k} must divide the per-round teacher step count N = {}",
                    self.factor
                )));
            }
            let shrink = (self.factor as u64)
                .checked_pow(self.rounds as u32)
                .ok_or_else(|| Error::config("too many rounds"))?;
            if self.start_steps == 0 || !(self.start_steps as u64).is_multiple_of(shrink) {
                return Err(Error::config(format!(
                    "{} steps are not divisible by N^rounds = {shrink}",
                    self.start_steps
                )));
            }
            if self.teacher_solver() != SolverKind::Ddim {
                return Err(Error::config(format!("{m} uses a DDIM teacher")));
            }
            if self.nfe.is_some() {
                return Err(Error::config(format!("{m} derives its step count from start_steps; drop `nfe`")));
            }
        } else {
            if self.nfe == Some(0) {
                return Err(Error::config(format!("{m} needs `nfe` >= 1")));
            }
            if !(self.rho > 0.0) {
                return Err(Error::config("rho must be > 0"));
            }
        }
        if !self.method.is_dense() && self.weights.as_ref().is_some_and(|w| *w != WeightSpec::Uniform) {
            return Err(Error::config(format!("{m} has a single branch; branch weights do not apply")));
        }
        self.branch_weights()?;
        Ok(())
    }
}

/// Number of rounds taking `from` steps to `to` with factor `n`, if exact.
pub fn rounds_needed(from: usize, to: usize, n: usize) -> Option<usize> {
    if n < 2 || to == 0 || from < to {
        return None;
    }
    let (mut steps, mut rounds) = (from, 0);
    while steps > to {
        if steps % n != 0 {
            return None;
        }
        steps /= n;
        rounds += 1;
    }
    (steps == to).then_some(rounds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub loss: f64,
    /// Unweighted distance of each student branch to its target.
    pub branches: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub student_steps: usize,
    pub losses: Vec<f64>,
    pub branch_losses: Vec<Vec<f64>>,
}

impl RoundReport {
    fn push(&mut self, s: UpdateStats) {
        self.losses.push(s.loss);
        self.branch_losses.push(s.branches);
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DistillReport {
    pub method: DistillMethod,
    pub seed: u64,
    pub config: DistillConfig,
    pub rounds: Vec<RoundReport>,
    /// Sampling steps the final student was trained for.
    pub trained_steps: usize,
    pub wall_clock_secs: f64,
    #[serde(skip)]
    pub student: ScoreNet,
}

fn check_finite(stats: &UpdateStats, what: &str) -> Result<()> {
    if !stats.loss.is_finite() || stats.branches.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what}: loss {} {:?}", stats.loss, stats.branches)));
    }
    Ok(())
}

fn apply_update(student: &mut ScoreNet, opt: &mut AdamW, tape: &mut Tape, loss: Var, bound: &crate::net::Bound) -> Result<()> {
    tape.backward(loss)?;
    student.zero_grad();
    student.accumulate_grads(tape, bound)?;
    opt.step(&mut student.params_mut())
}

/// Teacher states of one progressive update, with the student's inputs.
struct PdBatch {
    z: Tensor,
    points: Vec<TimePoint>,
    teacher: TrajectoryRecord,
    root_w: Vec<f64>,
}

/// One round of progressive distillation, stepped one update at a time.
pub struct PdRound<'a> {
    teacher: &'a ScoreNet,
    sched: &'a NoiseSchedule,
    data: &'a Tensor,
    cfg: &'a DistillConfig,
    round: usize,
    teacher_steps: usize,
    student: ScoreNet,
    opt: AdamW,
    weights: BranchWeights,
    tape: Tape,
    done: usize,
}

impl<'a> PdRound<'a> {
    pub fn new(
        teacher: &'a ScoreNet,
        sched: &'a NoiseSchedule,
        data: &'a Tensor,
        cfg: &'a DistillConfig,
        round: usize,
        teacher_steps: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if !cfg.method.is_pd() {
            return Err(Error::config(format!("{} is not a progressive method", cfg.method.name())));
        }
        if !sched.is_vp() {
            return Err(Error::config("progressive distillation runs DDIM on a vp_linear schedule"));
        }
        if teacher.branches() != 1 {
            return Err(Error::config("the teacher must be a single-branch network"));
        }
        if data.cols() != teacher.channels() {
            return Err(Error::dim("distillation data", &[teacher.channels()], &[data.cols()]));
        }
        if teacher_steps == 0 || !sched.steps().is_multiple_of(teacher_steps) || !teacher_steps.is_multiple_of(cfg.factor) {
            return Err(Error::config(format!(
                "{teacher_steps} teacher steps must divide T = {} and be divisible by N = {}",
                sched.steps(),
                cfg.factor
            )));
        }
        let student = if cfg.method.is_dense() {
            teacher.expand_branch_head(cfg.k())?
        } else {
            teacher.clone()
        };
        Ok(Self {
            teacher,
            sched,
            data,
            cfg,
            round,
            teacher_steps,
            student,
            opt: AdamW::new(cfg.optimizer),
            weights: cfg.branch_weights()?,
            tape: Tape::new(),
            done: 0,
        })
    }

    /// Starts the round from `student` instead of the teacher's weights.
    pub fn with_student(mut self, student: ScoreNet) -> Result<Self> {
        if student.spec() != self.student.spec() {
            return Err(Error::config("replacement student has a different architecture"));
        }
        self.student = student;
        Ok(self)
    }

    pub fn student_steps(&self) -> usize {
        self.teacher_steps / self.cfg.factor
    }

    pub fn student(&self) -> &ScoreNet {
        &self.student
    }

    pub fn into_student(self) -> ScoreNet {
        self.student
    }

    /// Tape of the most recent update.
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    fn batch(&self) -> Result<PdBatch> {
        let mut rng = seed::stream(self.cfg.seed, &format!("pd/round{}/update{}", self.round, self.done));
        let b = self.cfg.batch_size;
        let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..self.data.rows())).collect();
        let x0 = self.data.gather_rows(&idx)?;
        let eps = Tensor::randn(&[b, self.teacher.channels()], &mut rng)?;
        let stride = self.sched.steps() / self.student_steps();
        let sub = stride / self.cfg.factor;
        let start: Vec<usize> = (0..b)
            .map(|_| stride * rng.gen_range(1..=self.student_steps()))
            .collect();
        let steps = (0..=self.cfg.factor)
            .map(|m| start.iter().map(|&t| self.sched.at_index(t - m * sub)).collect())
            .collect::<Result<Vec<Vec<TimePoint>>>>()?;
        let points = steps[0].clone();
        let z = forward_diffuse_rows(&x0, &eps, &points)?;
        let teacher = solve_rows(self.teacher, &z, &steps, SolverKind::Ddim)?;
        let root_w = points.iter().map(|p| snr_weight(p, self.cfg.snr()).sqrt()).collect();
        Ok(PdBatch {
            z,
            points,
            teacher,
            root_w,
        })
    }

    /// Clean-data target implied by the teacher reaching `z_tau` from `z_t`
    /// in one DDIM step, scaled by the root loss weight.
    fn x_target(&self, batch: &PdBatch, m: usize) -> Result<Tensor> {
        let entry = &batch.teacher.entries()[m];
        let mut c_tau = Vec::with_capacity(batch.points.len());
        let mut c_t = Vec::with_capacity(batch.points.len());
        for ((t, tau), w) in batch.points.iter().zip(&entry.points).zip(&batch.root_w) {
            let r = tau.sigma / t.sigma;
            let d = tau.alpha - r * t.alpha;
            c_tau.push(w / d);
            c_t.push(-w * r / d);
        }
        combine_rows(&entry.state, &c_tau, &batch.z, &c_t)
    }

    /// Branch prediction in clean-data space, scaled by the root loss weight.
    fn x_prediction(&mut self, raw: Var, batch: &PdBatch) -> Result<Var> {
        let from = self.student.spec().parameterization;
        let x = convert_on_tape(&mut self.tape, raw, from, Parameterization::X0, &batch.z, &batch.points)?;
        let w: Vec<f32> = batch.root_w.iter().map(|&w| w as f32).collect();
        self.tape.scale_rows(x, &w)
    }

    pub fn step(&mut self) -> Result<UpdateStats> {
        let batch = self.batch()?;
        self.tape.clear();
        let zv = self.tape.constant(batch.z.clone());
        let (out, bound) = self.student.forward(&mut self.tape, zv, &batch.points)?;
        let stats = if self.cfg.method.is_dense() {
            self.dense_loss(out, &bound, &batch)?
        } else {
            self.sparse_loss(out, &bound, &batch)?
        };
        self.done += 1;
        check_finite(&stats, "progressive distillation")?;
        Ok(stats)
    }

    /// Endpoint-only objective.
    fn sparse_loss(&mut self, out: Var, bound: &crate::net::Bound, batch: &PdBatch) -> Result<UpdateStats> {
        let pred = self.x_prediction(out, batch)?;
        let target = self.x_target(batch, self.cfg.factor)?;
        let tv = self.tape.constant(target);
        let loss = self.tape.reduce_loss(self.cfg.distance(), pred, tv, 1.0)?;
        let value = self.tape.value(loss).item()? as f64;
        apply_update(&mut self.student, &mut self.opt, &mut self.tape, loss, bound)?;
        Ok(UpdateStats {
            loss: value,
            branches: vec![value],
        })
    }

    /// Branch `k` against the teacher state after `(k + 1) N / K` steps.
    fn dense_loss(&mut self, out: Var, bound: &crate::net::Bound, batch: &PdBatch) -> Result<UpdateStats> {
        let (k, c) = (self.cfg.k(), self.student.channels());
        let per = self.cfg.factor / k;
        let mut preds = Vec::with_capacity(k);
        let mut entries = vec![batch.teacher.entries()[0].clone()];
        for i in 0..k {
            let raw = branch_slice_var(&mut self.tape, out, c, k, i)?;
            preds.push(self.x_prediction(raw, batch)?);
            let m = (i + 1) * per;
            entries.push(TrajectoryEntry {
                points: batch.teacher.entries()[m].points.clone(),
                state: self.x_target(batch, m)?,
            });
        }
        let targets = TrajectoryRecord::new(entries)?;
        let mut joined = preds[0];
        for &p in &preds[1..] {
            joined = self.tape.concat_cols(joined, p)?;
        }
        let loss = branch_loss(&mut self.tape, joined, &targets, &self.weights, 1.0, self.cfg.distance())?;
        let branches = preds
            .iter()
            .enumerate()
            .map(|(i, &p)| distance(self.cfg.distance(), self.tape.value(p), targets.state(i + 1)))
            .collect::<Result<_>>()?;
        let value = self.tape.value(loss).item()? as f64;
        apply_update(&mut self.student, &mut self.opt, &mut self.tape, loss, bound)?;
        Ok(UpdateStats { loss: value, branches })
    }
}

fn run_pd(teacher: &ScoreNet, sched: &NoiseSchedule, cfg: &DistillConfig, data: &Tensor, method: DistillMethod) -> Result<DistillReport> {
    if cfg.method != method {
        return Err(Error::config(format!(
            "config method is {}, expected {}",
            cfg.method.name(),
            method.name()
        )));
    }
    cfg.validate()?;
    if !sched.steps().is_multiple_of(cfg.start_steps) {
        return Err(Error::config(format!(
            "{} start steps do not divide the {}-step schedule",
            cfg.start_steps,
            sched.steps()
        )));
    }
    let clock = Instant::now();
    let mut current = teacher.clone();
    let mut student = teacher.clone();
    let mut steps = cfg.start_steps;
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for r in 0..cfg.rounds {
        let mut round = PdRound::new(&current, sched, data, cfg, r, steps)?;
        let mut log = RoundReport {
            student_steps: round.student_steps(),
            ..RoundReport::default()
        };
        for _ in 0..cfg.updates {
            log.push(round.step()?);
        }
        log::info!(
            "{} round {r}: {} -> {} steps, final loss {:.4e}",
            method.name(),
            steps,
            log.student_steps,
            log.losses.last().copied().unwrap_or(f64::NAN)
        );
        steps = round.student_steps();
        student = round.into_student();
        current = if student.branches() > 1 {
            student.collapse_to_branch(student.inference_branch())?
        } else {
            student.clone()
        };
        rounds.push(log);
    }
    Ok(DistillReport {
        method,
        seed: cfg.seed,
        config: cfg.clone(),
        rounds,
        trained_steps: steps,
        wall_clock_secs: clock.elapsed().as_secs_f64(),
        student,
    })
}

/// Progressive distillation with endpoint supervision.
pub fn pd_distill(teacher: &ScoreNet, sched: &NoiseSchedule, cfg: &DistillConfig, data: &Tensor) -> Result<DistillReport> {
    run_pd(teacher, sched, cfg, data, DistillMethod::Pd)
}

/// Progressive distillation with one student branch per teacher sub-step.
pub fn pd_bdense_distill(teacher: &ScoreNet, sched: &NoiseSchedule, cfg: &DistillConfig, data: &Tensor) -> Result<DistillReport> {
    run_pd(teacher, sched, cfg, data, DistillMethod::PdBdense)
}

/// Trajectory-matching distillation, stepped one update at a time.
///
/// Each iteration draws a prior batch at the first grid point and walks the
/// student down the grid one interval per update. The teacher covers each
/// interval in `K` sub-steps; the student's own detached state seeds the next
/// interval.
pub struct SfdTrainer<'a> {
    teacher: &'a ScoreNet,
    sched: &'a NoiseSchedule,
    cfg: &'a DistillConfig,
    grid: TimeGrid,
    student: ScoreNet,
    opt: AdamW,
    weights: BranchWeights,
    tape: Tape,
    done: usize,
    iteration: usize,
    interval: usize,
    x: Option<Tensor>,
    last_targets: Option<TrajectoryRecord>,
}

impl<'a> SfdTrainer<'a> {
    pub fn new(teacher: &'a ScoreNet, sched: &'a NoiseSchedule, cfg: &'a DistillConfig, grid: TimeGrid) -> Result<Self> {
        cfg.validate()?;
        if cfg.method.is_pd() {
            return Err(Error::config(format!("{} is not a trajectory-matching method", cfg.method.name())));
        }
        if sched.is_vp() {
            return Err(Error::config("trajectory matching runs on an edm_sigma schedule"));
        }
        if teacher.branches() != 1 {
            return Err(Error::config("the teacher must be a single-branch network"));
        }
        let nfe = cfg.student_nfe();
        if grid.intervals() != nfe {
            return Err(Error::config(format!(
                "grid has {} intervals but nfe = {nfe}",
                grid.intervals()
            )));
        }
        for p in grid.points() {
            if sched.at_sigma(p.t).ok().as_ref() != Some(p) {
                return Err(Error::config(format!("grid point t = {} does not belong to the teacher's schedule", p.t)));
            }
        }
        let student = if cfg.method.is_dense() {
            teacher.expand_branch_head(cfg.k())?
        } else {
            teacher.clone()
        };
        Ok(Self {
            teacher,
            sched,
            cfg,
            grid,
            student,
            opt: AdamW::new(cfg.optimizer),
            weights: cfg.branch_weights()?,
            tape: Tape::new(),
            done: 0,
            iteration: 0,
            interval: 0,
            x: None,
            last_targets: None,
        })
    }

    pub fn student(&self) -> &ScoreNet {
        &self.student
    }

    pub fn into_student(self) -> ScoreNet {
        self.student
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Teacher trajectory used by the most recent update.
    pub fn last_targets(&self) -> Option<&TrajectoryRecord> {
        self.last_targets.as_ref()
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn step(&mut self) -> Result<UpdateStats> {
        let x = match self.x.take() {
            Some(x) if self.interval > 0 => x,
            _ => {
                let mut rng = seed::stream(self.cfg.seed, &format!("sfd/prior{}", self.iteration));
                let c = self.teacher.channels();
                Tensor::randn(&[self.cfg.batch_size, c], &mut rng)?.scaled(self.grid.first().sigma)
            }
        };
        let (t, t_prev) = (self.grid.points()[self.interval], self.grid.points()[self.interval + 1]);
        let sub = TimeGrid::subdivide(self.sched, &t, &t_prev, self.cfg.k())?;
        let targets = solve(self.teacher, &x, &sub, self.cfg.teacher_solver())?;
        let snr_w = snr_weight(&t, self.cfg.snr()) as f32;
        let points = vec![t; x.rows()];

        self.tape.clear();
        let zv = self.tape.constant(x.clone());
        let (out, bound) = self.student.forward(&mut self.tape, zv, &points)?;
        let (stats, next) = if self.cfg.method.is_dense() {
            self.dense_update(out, &bound, &x, &points, &targets, snr_w)?
        } else {
            self.sparse_update(out, &bound, &x, &points, &targets, snr_w)?
        };
        self.last_targets = Some(targets);
        self.done += 1;
        self.interval += 1;
        if self.interval == self.grid.intervals() {
            self.interval = 0;
            self.iteration += 1;
        } else {
            self.x = Some(next);
        }
        check_finite(&stats, "trajectory matching")?;
        Ok(stats)
    }

    /// `x + (t_to - t) * eps_hat`, recorded on the tape.
    fn euler_on_tape(&mut self, eps: Var, x: &Tensor, t: &TimePoint, t_to: &TimePoint) -> Result<Var> {
        let moved = self.tape.scale(eps, (t_to.t - t.t) as f32);
        let xc = self.tape.constant(x.clone());
        self.tape.add(moved, xc)
    }

    /// One Euler step compared against the teacher's endpoint.
    fn sparse_update(
        &mut self,
        out: Var,
        bound: &crate::net::Bound,
        x: &Tensor,
        points: &[TimePoint],
        targets: &TrajectoryRecord,
        snr_w: f32,
    ) -> Result<(UpdateStats, Tensor)> {
        let end = targets.entries().last().expect("non-empty").points[0];
        let eps = self.student.branch_eps(&mut self.tape, out, x, points, 0)?;
        let state = self.euler_on_tape(eps, x, &points[0], &end)?;
        let target = self.tape.constant(targets.endpoint().detach());
        let raw = self.tape.reduce_loss(self.cfg.distance(), state, target, 1.0)?;
        let loss = self.tape.scale(raw, snr_w);
        let value = self.tape.value(loss).item()? as f64;
        let dist = self.tape.value(raw).item()? as f64;
        let next = self.tape.value(state).detach();
        apply_update(&mut self.student, &mut self.opt, &mut self.tape, loss, bound)?;
        Ok((
            UpdateStats {
                loss: value,
                branches: vec![dist],
            },
            next,
        ))
    }

    /// Branch `k` jumps straight to sub-step boundary `k + 1`; the last
    /// branch covers the whole interval and seeds the next one.
    fn dense_update(
        &mut self,
        out: Var,
        bound: &crate::net::Bound,
        x: &Tensor,
        points: &[TimePoint],
        targets: &TrajectoryRecord,
        snr_w: f32,
    ) -> Result<(UpdateStats, Tensor)> {
        let k = self.cfg.k();
        let mut states = Vec::with_capacity(k);
        for i in 0..k {
            let eps = self.student.branch_eps(&mut self.tape, out, x, points, i)?;
            let to = targets.entries()[i + 1].points[0];
            states.push(self.euler_on_tape(eps, x, &points[0], &to)?);
        }
        let mut joined = states[0];
        for &s in &states[1..] {
            joined = self.tape.concat_cols(joined, s)?;
        }
        let loss = branch_loss(&mut self.tape, joined, targets, &self.weights, snr_w, self.cfg.distance())?;
        let branches = states
            .iter()
            .enumerate()
            .map(|(i, &s)| distance(self.cfg.distance(), self.tape.value(s), targets.state(i + 1)))
            .collect::<Result<_>>()?;
        let value = self.tape.value(loss).item()? as f64;
        let next = self.tape.value(states[k - 1]).detach();
        apply_update(&mut self.student, &mut self.opt, &mut self.tape, loss, bound)?;
        Ok((UpdateStats { loss: value, branches }, next))
    }
}

fn run_sfd(teacher: &ScoreNet, sched: &NoiseSchedule, cfg: &DistillConfig, grid: &TimeGrid, method: DistillMethod) -> Result<DistillReport> {
    if cfg.method != method {
        return Err(Error::config(format!(
            "config method is {}, expected {}",
            cfg.method.name(),
            method.name()
        )));
    }
    let clock = Instant::now();
    let mut trainer = SfdTrainer::new(teacher, sched, cfg, grid.clone())?;
    let mut log = RoundReport {
        student_steps: grid.intervals(),
        ..RoundReport::default()
    };
    for _ in 0..cfg.updates {
        log.push(trainer.step()?);
    }
    Ok(DistillReport {
        method,
        seed: cfg.seed,
        config: cfg.clone(),
        rounds: vec![log],
        trained_steps: grid.intervals(),
        wall_clock_secs: clock.elapsed().as_secs_f64(),
        student: trainer.into_student(),
    })
}

/// Trajectory matching with endpoint supervision. Data-free: the student
/// only ever sees states the teacher and itself produce from the prior.
pub fn sfd_distill(teacher: &ScoreNet, sched: &NoiseSchedule, cfg: &DistillConfig, grid: &TimeGrid) -> Result<DistillReport> {
    run_sfd(teacher, sched, cfg, grid, DistillMethod::Sfd)
}

/// Trajectory matching with one student branch per teacher sub-step.
pub fn sfd_bdense_distill(teacher: &ScoreNet, sched: &NoiseSchedule, cfg: &DistillConfig, grid: &TimeGrid) -> Result<DistillReport> {
    run_sfd(teacher, sched, cfg, grid, DistillMethod::SfdBdense)
}

/// The student grid trajectory matching uses for `cfg`.
pub fn sfd_grid(sched: &NoiseSchedule, cfg: &DistillConfig) -> Result<TimeGrid> {
    TimeGrid::karras(sched, cfg.student_nfe(), cfg.rho)
}

/// Runs whichever loop `cfg.method` names.
pub fn distill(teacher: &ScoreNet, sched: &NoiseSchedule, cfg: &DistillConfig, data: Option<&Tensor>) -> Result<DistillReport> {
    cfg.validate()?;
    match cfg.method {
        DistillMethod::Pd | DistillMethod::PdBdense => {
            let data = data.ok_or_else(|| Error::config("progressive distillation needs training data"))?;
            run_pd(teacher, sched, cfg, data, cfg.method)
        }
        DistillMethod::Sfd | DistillMethod::SfdBdense => {
            let grid = sfd_grid(sched, cfg)?;
            run_sfd(teacher, sched, cfg, &grid, cfg.method)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchTrial {
    pub a: f64,
    pub b: f64,
    pub score: f64,
}

/// Seeded uniform random search over `a_range x b_range`, evaluated in
/// parallel. Returns every trial, best (lowest) score first.
pub fn weight_search<F>(objective: F, a_range: (f64, f64), b_range: (f64, f64), trials: usize, seed: u64) -> Result<Vec<SearchTrial>>
where
    F: Fn(GeometricSchedule) -> Result<f64> + Sync,
{
    if trials == 0 {
        return Err(Error::config("weight search needs at least one trial"));
    }
    for (name, (lo, hi)) in [("a", a_range), ("b", b_range)] {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::config(format!("search range for {name} is empty: [{lo}, {hi}]")));
        }
    }
    let mut rng = seed::stream(seed, "search/points");
    let mut draw = |(lo, hi): (f64, f64)| if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let points: Vec<GeometricSchedule> = (0..trials)
        .map(|_| {
            let a = draw(a_range);
            let b = draw(b_range);
            GeometricSchedule { a, b }
        })
        .collect();
    let mut results = points
        .par_iter()
        .map(|&s| {
            let score = objective(s)?;
            if !score.is_finite() {
                return Err(Error::NonFinite(format!("objective at a = {}, b = {} gave {score}", s.a, s.b)));
            }
            Ok(SearchTrial { a: s.a, b: s.b, score })
        })
        .collect::<Result<Vec<_>>>()?;
    results.sort_by(|x, y| x.score.total_cmp(&y.score));
    Ok(results)
}

/// Sliced-Wasserstein distance of a dense trajectory-matching student, trained
/// with the candidate weights, to held-out data.
pub struct SfdWeightObjective<'a> {
    pub teacher: &'a ScoreNet,
    pub sched: &'a NoiseSchedule,
    /// An `sfd_bdense` config; its weights are replaced per trial.
    pub cfg: DistillConfig,
    pub reference: &'a SampleSet,
    pub samples: usize,
    pub projections: usize,
    pub eval_seed: u64,
}

impl SfdWeightObjective<'_> {
    pub fn score(&self, s: GeometricSchedule) -> Result<f64> {
        let mut cfg = self.cfg.clone();
        cfg.weights = Some(WeightSpec::Geometric { a: s.a, b: s.b });
        let grid = sfd_grid(self.sched, &cfg)?;
        let report = sfd_bdense_distill(self.teacher, self.sched, &cfg, &grid)?;
        let x = generate(
            &report.student,
            report.student.channels(),
            self.sched,
            grid.intervals(),
            self.samples,
            SolverKind::Euler,
            self.eval_seed,
        )?;
        let set = SampleSet::unlabeled(x)?;
        Ok(sliced_wasserstein(&set, self.reference, self.projections, self.eval_seed)?.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_degenerate_and_positive() {
        let w = geometric_weights(GeometricSchedule { a: 0.0, b: 0.0 }, 5).unwrap();
        assert_eq!(w.lambdas(), &[1.0; 5]);
        let tiny = geometric_weights(GeometricSchedule { a: -400.0, b: -400.0 }, 4).unwrap();
        assert!(tiny.lambdas().iter().all(|&l| l > 0.0));
        assert!(geometric_weights(GeometricSchedule { a: 1.0, b: 0.0 }, 0).is_err());
    }

    #[test]
    fn branch_weight_invariants() {
        assert!(BranchWeights::new(vec![]).is_err());
        assert!(BranchWeights::new(vec![0.0, 0.0]).is_err());
        assert!(BranchWeights::new(vec![-0.1, 1.0]).is_err());
        assert!(BranchWeights::new(vec![0.0, 1.0]).is_ok());
        assert!(WeightSpec::Explicit { lambdas: vec![1.0] }.resolve(2).is_err());
    }

    fn record(states: Vec<Tensor>) -> TrajectoryRecord {
        let p = TimePoint { t: 0.0, alpha: 1.0, sigma: 0.0, t_norm: 0.0 };
        TrajectoryRecord::new(
            states
                .into_iter()
                .map(|s| TrajectoryEntry { points: vec![p; s.rows()], state: s })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn branch_loss_hand_example() {
        // branch MSEs 0.1 and 0.2 with weights 0.5 and 1
        let zero = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let t1 = Tensor::matrix(1, 2, vec![0.1f32.sqrt(), 0.1f32.sqrt()]).unwrap();
        let t2 = Tensor::matrix(1, 2, vec![0.2f32.sqrt(), 0.2f32.sqrt()]).unwrap();
        let targets = record(vec![zero.clone(), t1.clone(), t2.clone()]);
        let w = BranchWeights::new(vec![0.5, 1.0]).unwrap();
        let mut tape = Tape::new();
        let out = tape.constant(Tensor::zeros(&[1, 4]).unwrap());
        let loss = branch_loss(&mut tape, out, &targets, &w, 2.0, LossKind::Mse).unwrap();
        assert!((tape.value(loss).item().unwrap() - 0.5).abs() < 1e-6);

        let exact = tape.constant(Tensor::matrix(1, 4, [t1.data(), t2.data()].concat()).unwrap());
        let l = branch_loss(&mut tape, exact, &targets, &w, 1.0, LossKind::Mse).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);

        let short = record(vec![zero.clone(), t1]);
        assert!(matches!(
            branch_loss(&mut tape, out, &short, &w, 1.0, LossKind::Mse),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn default_weights_follow_method() {
        let sfd = DistillConfig::new(DistillMethod::SfdBdense, 1, 0);
        assert_eq!(sfd.branch_weights().unwrap().lambdas(), &CIFAR_WEIGHTS);
        let pd = DistillConfig::new(DistillMethod::PdBdense, 1, 0);
        assert_eq!(pd.branch_weights().unwrap().lambdas(), &[1.0, 1.0]);
        let mut k2 = sfd.clone();
        k2.branches = Some(2);
        assert_eq!(k2.branch_weights().unwrap().lambdas(), &[1.0, 1.0]);
    }

    #[test]
    fn round_counting() {
        assert_eq!(rounds_needed(1024, 128, 2), Some(3));
        assert_eq!(rounds_needed(64, 8, 2), Some(3));
        assert_eq!(rounds_needed(64, 64, 2), Some(0));
        assert_eq!(rounds_needed(96, 5, 2), None);
    }

    #[test]
    fn config_validation() {
        let ok = DistillConfig::new(DistillMethod::PdBdense, 10, 0);
        assert_eq!(ok.k(), 2);
        ok.validate().unwrap();
        let mut bad = DistillConfig::new(DistillMethod::Pd, 10, 0);
        bad.branches = Some(2);
        assert!(bad.validate().is_err());
        let mut bad = DistillConfig::new(DistillMethod::PdBdense, 10, 0);
        bad.branches = Some(3);
        assert!(bad.validate().is_err());
        let mut bad = DistillConfig::new(DistillMethod::Pd, 10, 0);
        bad.factor = 1;
        assert!(bad.validate().is_err());
        let mut bad = DistillConfig::new(DistillMethod::Pd, 10, 0);
        bad.start_steps = 12;
        bad.rounds = 3;
        assert!(bad.validate().is_err());
        let mut bad = DistillConfig::new(DistillMethod::Sfd, 10, 0);
        bad.nfe = Some(0);
        assert!(bad.validate().is_err());
        let mut bad = DistillConfig::new(DistillMethod::SfdBdense, 10, 0);
        bad.weights = Some(WeightSpec::Explicit { lambdas: vec![1.0; 3] });
        assert!(bad.validate().is_err());
        let sfd = DistillConfig::new(DistillMethod::Sfd, 10, 0);
        assert_eq!((sfd.k(), sfd.student_branches(), sfd.distance()), (4, 1, LossKind::L1));
    }

    #[test]
    fn search_contract() {
        let f = |s: GeometricSchedule| Ok((s.a - 1.0).powi(2) + (s.b + 4.0).powi(2));
        let r = weight_search(f, (0.0, 2.0), (-7.0, -2.0), 25, 3).unwrap();
        assert_eq!(r.len(), 25);
        assert!(r.windows(2).all(|w| w[0].score <= w[1].score));
        assert!(r.iter().all(|t| (-7.0..=-2.0).contains(&t.b)));
        assert_eq!(r, weight_search(f, (0.0, 2.0), (-7.0, -2.0), 25, 3).unwrap());
        assert_eq!(weight_search(f, (0.0, 2.0), (-7.0, -2.0), 1, 3).unwrap().len(), 1);
        assert!(weight_search(f, (0.0, 2.0), (-7.0, -2.0), 0, 3).is_err());
        assert!(weight_search(f, (2.0, 0.0), (-7.0, -2.0), 5, 3).is_err());
    }
}
