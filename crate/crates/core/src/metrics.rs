//! Sample-quality and trajectory-fidelity metrics for low-dimensional data.

use std::cmp::Ordering;
use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Denoiser;
use crate::seed;
use crate::solvers::{solve, SolverKind, TimeGrid, TrajectoryRecord};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub method: String,
    pub nfe: usize,
    pub seed: u64,
}

/// `n x C` points with their provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    points: Tensor,
    pub meta: SampleMeta,
}

impl SampleSet {
    pub fn new(points: Tensor, meta: SampleMeta) -> Result<Self> {
        if points.shape().len() != 2 || points.rows() < 2 {
            return Err(Error::contract(format!(
                "a sample set needs at least 2 rows, got shape {:?}",
                points.shape()
            )));
        }
        if !points.all_finite() {
            return Err(Error::NonFinite("sample set contains non-finite entries".into()));
        }
        Ok(Self { points, meta })
    }

    pub fn unlabeled(points: Tensor) -> Result<Self> {
        Self::new(points, SampleMeta::default())
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channels(&self) -> usize {
        self.points.cols()
    }

    fn row(&self, i: usize) -> &[f32] {
        self.points.row(i)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub nfe: usize,
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
    /// 95% normal-approximation half-width, where the metric averages
    /// independent terms.
    pub half_width: Option<f64>,
    /// Samples within the radius of each center, for mode coverage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_mode: Option<Vec<usize>>,
}

pub const METRICS_CSV_HEADER: &str = "method,nfe,metric,value,n,seed";

impl MetricReport {
    fn new(meta: &SampleMeta, metric: &str, value: f64, n: usize, seed: u64) -> Self {
        Self {
            method: meta.method.clone(),
            nfe: meta.nfe,
            metric: metric.to_string(),
            value,
            n,
            seed,
            half_width: None,
            per_mode: None,
        }
    }

    pub fn write_csv_row<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            self.method, self.nfe, self.metric, self.value, self.n, self.seed
        )?;
        Ok(())
    }
}

fn check_dims(a: &SampleSet, b: &SampleSet) -> Result<()> {
    if a.channels() != b.channels() {
        return Err(Error::Contract(format!(
            "sample sets have {} and {} channels",
            a.channels(),
            b.channels()
        )));
    }
    Ok(())
}

fn sq_dist(x: &[f32], y: &[f32]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&p, &q)| {
            let d = p as f64 - q as f64;
            d * d
        })
        .sum()
}

/// Order of two sets that does not depend on argument order.
fn canonical<'a>(a: &'a SampleSet, b: &'a SampleSet) -> (&'a SampleSet, &'a SampleSet) {
    let key = |s: &SampleSet| (s.len(), s.points.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    match a.len().cmp(&b.len()).then_with(|| key(a).cmp(&key(b))) {
        Ordering::Greater => (b, a),
        _ => (a, b),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Median,
    Fixed(f64),
}

const MEDIAN_POOL: usize = 1000;

fn median_distance(a: &SampleSet, b: &SampleSet) -> f64 {
    let take = |s: &SampleSet| (0..s.len().min(MEDIAN_POOL / 2)).map(|i| s.row(i).to_vec()).collect::<Vec<_>>();
    let mut pool = take(a);
    pool.extend(take(b));
    let mut d = Vec::with_capacity(pool.len() * pool.len() / 2);
    for i in 0..pool.len() {
        for j in i + 1..pool.len() {
            d.push(sq_dist(&pool[i], &pool[j]).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let m = d[d.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Unbiased squared maximum mean discrepancy with kernel
/// `exp(-|x - y|^2 / (2 h^2))`, clamped at 0.
pub fn mmd_rbf(a: &SampleSet, b: &SampleSet, bandwidth: Bandwidth) -> Result<MetricReport> {
    check_dims(a, b)?;
    let (x, y) = canonical(a, b);
    let h = match bandwidth {
        Bandwidth::Median => median_distance(x, y),
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => h,
        Bandwidth::Fixed(h) => return Err(Error::config(format!("bandwidth must be > 0, got {h}"))),
    };
    let gamma = 1.0 / (2.0 * h * h);
    let within = |s: &SampleSet| {
        let n = s.len();
        let mut total = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                total += (-gamma * sq_dist(s.row(i), s.row(j))).exp();
            }
        }
        2.0 * total / (n * (n - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..x.len() {
        for j in 0..y.len() {
            cross += (-gamma * sq_dist(x.row(i), y.row(j))).exp();
        }
    }
    let cross = cross / (x.len() * y.len()) as f64;
    let raw = within(x) + within(y) - 2.0 * cross;
    if raw < 0.0 {
        log::debug!("mmd_rbf raw estimate {raw} clamped to 0");
    }
    let mut report = MetricReport::new(&a.meta, "mmd", raw.max(0.0), a.len().min(b.len()), 0);
    report.half_width = None;
    Ok(report)
}

/// Exact Wasserstein-1 distance between two empirical 1-D measures given as
/// sorted values.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len() as u64, b.len() as u64);
    if n == m {
        return a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64;
    }
    // quantile functions are piecewise constant with breaks at i/n and j/m;
    // walk both in units of 1/(n m)
    let (mut i, mut j) = (0u64, 0u64);
    let (mut pos, mut total) = (0u64, 0.0);
    while i < n && j < m {
        let (next_a, next_b) = ((i + 1) * m, (j + 1) * n);
        let next = next_a.min(next_b);
        total += (a[i as usize] - b[j as usize]).abs() * (next - pos) as f64;
        pos = next;
        if next_a == next {
            i += 1;
        }
        if next_b == next {
            j += 1;
        }
    }
    total / (n * m) as f64
}

fn unit_directions(channels: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::stream(seed, "metrics/projections");
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..channels).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

fn project_sorted(s: &SampleSet, dir: &[f64]) -> Vec<f64> {
    let mut p: Vec<f64> = (0..s.len())
        .map(|i| s.row(i).iter().zip(dir).map(|(&x, d)| x as f64 * d).sum())
        .collect();
    p.sort_by(f64::total_cmp);
    p
}

/// Mean 1-D Wasserstein-1 distance over seeded random unit projections.
pub fn sliced_wasserstein(a: &SampleSet, b: &SampleSet, projections: usize, seed: u64) -> Result<MetricReport> {
    check_dims(a, b)?;
    if projections == 0 {
        return Err(Error::config("sliced_wasserstein needs at least one projection"));
    }
    let dirs = unit_directions(a.channels(), projections, seed);
    let per: Vec<f64> = dirs
        .iter()
        .map(|d| wasserstein_1d(&project_sorted(a, d), &project_sorted(b, d)))
        .collect();
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    let mut report = MetricReport::new(&a.meta, "swd", mean, a.len().min(b.len()), seed);
    if per.len() > 1 {
        let var = per.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (per.len() - 1) as f64;
        report.half_width = Some(1.96 * (var / per.len() as f64).sqrt());
    }
    Ok(report)
}

/// Mean squared distance between the student's endpoint and a fine-grid
/// reference trajectory's endpoint, both started from `noise`.
pub fn trajectory_endpoint_error<D: Denoiser + ?Sized>(
    student: &D,
    grid: &TimeGrid,
    solver: SolverKind,
    reference: &TrajectoryRecord,
    noise: &Tensor,
) -> Result<MetricReport> {
    if !reference.state(0).bit_eq(noise) {
        return Err(Error::contract("reference trajectory was started from a different noise set"));
    }
    let fine = reference.len() - 1;
    if fine < 16 * grid.intervals() {
        return Err(Error::contract(format!(
            "reference grid has {fine} steps, needs at least 16 x {}",
            grid.intervals()
        )));
    }
    let end = solve(student, noise, grid, solver)?;
    let (s, r) = (end.endpoint(), reference.endpoint());
    let per: Vec<f64> = (0..s.rows()).map(|i| sq_dist(s.row(i), r.row(i))).collect();
    let n = per.len();
    let mean = per.iter().sum::<f64>() / n as f64;
    let meta = SampleMeta {
        method: String::new(),
        nfe: grid.intervals(),
        seed: 0,
    };
    let mut report = MetricReport::new(&meta, "endpoint_error", mean, n, 0);
    if n > 1 {
        let var = per.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        report.half_width = Some(1.96 * (var / n as f64).sqrt());
    }
    Ok(report)
}

/// Fraction of centers with at least one sample within `radius`.
pub fn mode_coverage(samples: &SampleSet, centers: &[Vec<f64>], radius: f64) -> Result<MetricReport> {
    if centers.is_empty() {
        return Err(Error::config("mode coverage needs at least one center"));
    }
    if !(radius > 0.0) {
        return Err(Error::config(format!("coverage radius must be > 0, got {radius}")));
    }
    if let Some(c) = centers.iter().find(|c| c.len() != samples.channels()) {
        return Err(Error::dim("mode_coverage", &[samples.channels()], &[c.len()]));
    }
    let r2 = radius * radius;
    let counts: Vec<usize> = centers
        .iter()
        .map(|c| {
            (0..samples.len())
                .filter(|&i| {
                    let d: f64 = samples.row(i).iter().zip(c).map(|(&x, y)| (x as f64 - y).powi(2)).sum();
                    d <= r2
                })
                .count()
        })
        .collect();
    let covered = counts.iter().filter(|&&c| c > 0).count();
    let mut report = MetricReport::new(
        &samples.meta,
        "mode_coverage",
        covered as f64 / centers.len() as f64,
        samples.len(),
        samples.meta.seed,
    );
    report.per_mode = Some(counts);
    Ok(report)
}
