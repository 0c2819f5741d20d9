use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use bdense::checkpoint::Checkpoint;
use bdense::data::Dataset;
use bdense::distill::{self, geometric_weights, DistillConfig, DistillMethod, GeometricSchedule, SfdWeightObjective};
use bdense::metrics::{self, Bandwidth, MetricReport, SampleMeta, SampleSet, METRICS_CSV_HEADER};
use bdense::solvers::{generate, SolverKind};
use bdense::train::TeacherTrainer;
use bdense::{seed, NoiseSchedule, ScoreNet};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{check_metrics, RunConfig};

pub const DATA_FILE: &str = "data.csv";
pub const TEACHER_FILE: &str = "teacher.bdns";
pub const STUDENT_FILE: &str = "student.bdns";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const METRICS_FILE: &str = "metrics.csv";

/// Written next to every samples file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub method: String,
    pub nfe: usize,
    pub seed: u64,
    pub solver: SolverKind,
    pub n: usize,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn read_points(path: &Path) -> Result<Dataset> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Dataset::read_csv(f).with_context(|| format!("reading {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn provenance_str<'a>(ck: &'a Checkpoint, key: &str) -> Option<&'a str> {
    ck.meta.provenance.get(key).and_then(|v| v.as_str())
}

pub fn gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    let data = cfg.dataset.load()?;
    let path = cfg.out_dir.join(DATA_FILE);
    let mut w = create(&path)?;
    data.write_csv(&mut w)?;
    w.flush()?;
    info!("wrote {} rows to {}", data.len(), path.display());
    Ok(path)
}

/// Trains (or resumes) the teacher. `stop_at` ends the run early after that
/// many total updates without changing the learning-rate schedule.
pub fn train_teacher(cfg: &RunConfig, resume: Option<&Path>, stop_at: Option<usize>) -> Result<PathBuf> {
    let data = cfg.dataset.load()?.to_tensor()?;
    let sched = NoiseSchedule::build(cfg.schedule)?;
    let (net, opt) = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.meta.schedule != cfg.schedule {
                bail!("checkpoint {} was trained on a different schedule", path.display());
            }
            let opt = ck
                .optimizer()?
                .ok_or_else(|| anyhow!("checkpoint {} has no optimizer state to resume from", path.display()))?;
            (ck.net()?, Some(opt))
        }
        None => {
            let mut rng = seed::stream(cfg.teacher.seed, "teacher/init");
            (ScoreNet::new(cfg.net.clone(), &mut rng)?, None)
        }
    };
    let mut trainer = TeacherTrainer::new(net, &sched, &data, cfg.teacher.clone())?;
    if let Some(opt) = opt {
        trainer = trainer.with_optimizer(opt);
    }
    let start = trainer.done();
    let end = stop_at.unwrap_or(cfg.teacher.updates).min(cfg.teacher.updates);
    let mut losses = Vec::new();
    while trainer.done() < end {
        losses.push(trainer.step()?);
        let u = trainer.done();
        if u % 500 == 0 {
            info!("update {u}: loss {:.5}", losses.last().unwrap());
        }
    }

    let mut ck = Checkpoint::from_net(
        &trainer.net,
        &cfg.schedule,
        json!({"role": "teacher", "seed": cfg.teacher.seed, "updates": trainer.done()}),
    )
    .with_optimizer(&trainer.opt)?;
    ck.meta.trained_steps = None;
    let path = cfg.out_dir.join(TEACHER_FILE);
    fs::create_dir_all(&cfg.out_dir)?;
    ck.save(&path)?;

    let loss_path = cfg.out_dir.join("teacher_loss.csv");
    let mut w = if resume.is_some() && loss_path.exists() {
        BufWriter::new(OpenOptions::new().append(true).open(&loss_path)?)
    } else {
        let mut w = create(&loss_path)?;
        writeln!(w, "update,loss")?;
        w
    };
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{},{l}", start + i)?;
    }
    w.flush()?;
    info!("teacher at {} updates saved to {}", trainer.done(), path.display());
    Ok(path)
}

pub fn distill_config(cfg: &RunConfig) -> Result<&DistillConfig> {
    cfg.distill
        .as_ref()
        .ok_or_else(|| anyhow!("the config has no `distill` section"))
}

/// Resolved view of the distillation settings for `--dry-run`.
pub fn describe_distill(d: &DistillConfig) -> Result<serde_json::Value> {
    Ok(json!({
        "method": d.method.name(),
        "k": d.k(),
        "student_branches": d.student_branches(),
        "lambdas": d.branch_weights()?.lambdas(),
        "snr": d.snr(),
        "distance": d.distance(),
        "teacher_solver": d.teacher_solver(),
    }))
}

fn student_solver(method: DistillMethod) -> SolverKind {
    if method.is_pd() {
        SolverKind::Ddim
    } else {
        SolverKind::Euler
    }
}

pub fn distill(cfg: &RunConfig, teacher_path: &Path) -> Result<PathBuf> {
    let d = distill_config(cfg)?;
    let ck = load_checkpoint(teacher_path)?;
    if ck.meta.schedule != cfg.schedule {
        bail!(
            "teacher {} was trained on {:?}, the config asks for {:?}",
            teacher_path.display(),
            ck.meta.schedule,
            cfg.schedule
        );
    }
    let teacher = ck.net()?;
    let sched = NoiseSchedule::build(cfg.schedule)?;
    let data = if d.method.is_pd() {
        Some(cfg.dataset.load()?.to_tensor()?)
    } else {
        None
    };
    let report = distill::distill(&teacher, &sched, d, data.as_ref())?;

    fs::create_dir_all(&cfg.out_dir)?;
    let mut out = Checkpoint::from_net(
        &report.student,
        &cfg.schedule,
        json!({
            "role": "student",
            "method": d.method.name(),
            "solver": student_solver(d.method).name(),
            "seed": d.seed,
            "teacher": teacher_path.display().to_string(),
        }),
    );
    out.meta.trained_steps = Some(report.trained_steps);
    let path = cfg.out_dir.join(STUDENT_FILE);
    out.save(&path)?;

    let mut w = create(&cfg.out_dir.join("distill_report.json"))?;
    serde_json::to_writer_pretty(&mut w, &report)?;
    w.flush()?;

    let k = report
        .rounds
        .iter()
        .flat_map(|r| r.branch_losses.first())
        .map(|b| b.len())
        .max()
        .unwrap_or(0);
    let mut w = create(&cfg.out_dir.join("distill_loss.csv"))?;
    let branch_cols: Vec<String> = (0..k).map(|i| format!(",branch{i}")).collect();
    writeln!(w, "round,update,loss{}", branch_cols.concat())?;
    for (r, round) in report.rounds.iter().enumerate() {
        for (u, (loss, branches)) in round.losses.iter().zip(&round.branch_losses).enumerate() {
            let cols: Vec<String> = branches.iter().map(|b| format!(",{b}")).collect();
            writeln!(w, "{r},{u},{loss}{}", cols.concat())?;
        }
    }
    w.flush()?;
    info!(
        "{} student for {} steps saved to {} ({:.1}s)",
        d.method.name(),
        report.trained_steps,
        path.display(),
        report.wall_clock_secs
    );
    Ok(path)
}

pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub nfe: Option<usize>,
    pub n: Option<usize>,
    pub solver: Option<SolverKind>,
    pub output: Option<PathBuf>,
}

pub fn sample(cfg: &RunConfig, args: &SampleArgs) -> Result<PathBuf> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let net = ck.net()?;
    let sched = NoiseSchedule::build(ck.meta.schedule)?;
    let nfe = match (ck.meta.trained_steps, args.nfe) {
        (Some(trained), Some(nfe)) if nfe != trained => bail!(
            "{} was distilled for a fixed grid; --nfe {nfe} is not supported, valid values: [{trained}]",
            args.checkpoint.display()
        ),
        (Some(trained), _) => trained,
        (None, Some(nfe)) => nfe,
        (None, None) => 64,
    };
    if nfe == 0 {
        bail!("--nfe must be >= 1");
    }
    let solver = match (args.solver, provenance_str(&ck, "solver")) {
        (Some(s), _) => s,
        (None, Some(s)) => s.parse()?,
        (None, None) if sched.is_vp() => SolverKind::Ddim,
        (None, None) => SolverKind::Heun,
    };
    let method = provenance_str(&ck, "method").unwrap_or("teacher").to_string();
    let n = args.n.unwrap_or(cfg.eval.samples);

    let points = if n == 0 {
        Dataset::new(net.channels(), Vec::new())?
    } else {
        let x = generate(&net, net.channels(), &sched, nfe, n, solver, cfg.seed)?;
        Dataset::from_tensor(&x)
    };
    let path = args.output.clone().unwrap_or_else(|| cfg.out_dir.join(SAMPLES_FILE));
    let mut w = create(&path)?;
    points.write_csv(&mut w)?;
    w.flush()?;

    let sidecar = Sidecar {
        method,
        nfe,
        seed: cfg.seed,
        solver,
        n,
    };
    let mut w = create(&path.with_extension("json"))?;
    serde_json::to_writer_pretty(&mut w, &sidecar)?;
    w.flush()?;
    info!("wrote {n} samples ({} {}, nfe {nfe}) to {}", sidecar.method, solver.name(), path.display());
    Ok(path)
}

fn sidecar_for(samples: &Path, seed: u64) -> Result<SampleMeta> {
    let side = samples.with_extension("json");
    if !side.exists() {
        return Ok(SampleMeta {
            method: "unknown".into(),
            nfe: 0,
            seed,
        });
    }
    let s: Sidecar = serde_json::from_str(&fs::read_to_string(&side)?)
        .with_context(|| format!("parsing {}", side.display()))?;
    Ok(SampleMeta {
        method: s.method,
        nfe: s.nfe,
        seed: s.seed,
    })
}

/// Computes each metric and appends one row per metric to the metrics CSV.
pub fn eval(cfg: &RunConfig, samples: &Path, reference: &Path, metrics_override: Option<Vec<String>>) -> Result<Vec<MetricReport>> {
    let names = metrics_override.unwrap_or_else(|| cfg.eval.metrics.clone());
    check_metrics(&names)?;
    let meta = sidecar_for(samples, cfg.seed)?;
    let a = SampleSet::new(read_points(samples)?.to_tensor()?, meta)?;
    let b = SampleSet::unlabeled(read_points(reference)?.to_tensor()?)?;
    if a.channels() != b.channels() {
        bail!(
            "{} has {} channels but {} has {}",
            samples.display(),
            a.channels(),
            reference.display(),
            b.channels()
        );
    }
    let mut reports = Vec::with_capacity(names.len());
    for name in &names {
        let r = match name.as_str() {
            "swd" => metrics::sliced_wasserstein(&a, &b, cfg.eval.projections, cfg.seed)?,
            "mmd" => metrics::mmd_rbf(&a, &b, Bandwidth::Median)?,
            "mode_coverage" => {
                let centers = cfg
                    .centers()
                    .ok_or_else(|| anyhow!("mode_coverage needs a gmm_ring dataset in the config"))?;
                metrics::mode_coverage(&a, &centers, cfg.coverage_radius())?
            }
            other => unreachable!("metric {other} passed validation"),
        };
        info!("{} {} nfe {}: {:.6}", r.metric, r.method, r.nfe, r.value);
        reports.push(r);
    }

    let path = cfg.out_dir.join(METRICS_FILE);
    let fresh = !path.exists();
    fs::create_dir_all(&cfg.out_dir)?;
    let mut w = BufWriter::new(OpenOptions::new().create(true).append(true).open(&path)?);
    if fresh {
        writeln!(w, "{METRICS_CSV_HEADER}")?;
    }
    for r in &reports {
        r.write_csv_row(&mut w)?;
    }
    w.flush()?;
    Ok(reports)
}

pub fn search_config(cfg: &RunConfig) -> Result<DistillConfig> {
    let d = match &cfg.distill {
        Some(d) => d.clone(),
        None => DistillConfig::new(DistillMethod::SfdBdense, 500, cfg.seed),
    };
    if d.method != DistillMethod::SfdBdense {
        bail!("the weight search trains sfd_bdense students, the config has {}", d.method.name());
    }
    Ok(d)
}

pub fn search_weights(cfg: &RunConfig, teacher_path: &Path) -> Result<PathBuf> {
    let d = search_config(cfg)?;
    d.validate()?;
    let ck = load_checkpoint(teacher_path)?;
    let teacher = ck.net()?;
    let sched = NoiseSchedule::build(ck.meta.schedule)?;
    let held_out = bdense::data::DatasetSpec {
        n: cfg.search.samples,
        seed: seed::child_seed(cfg.dataset.seed, "held-out"),
        ..cfg.dataset.clone()
    }
    .load()?;
    let reference = SampleSet::unlabeled(held_out.to_tensor()?)?;
    let objective = SfdWeightObjective {
        teacher: &teacher,
        sched: &sched,
        cfg: d.clone(),
        reference: &reference,
        samples: cfg.search.samples,
        projections: cfg.search.projections,
        eval_seed: cfg.seed,
    };
    let trials = distill::weight_search(|s| objective.score(s), cfg.search.a_range, cfg.search.b_range, cfg.search.trials, cfg.seed)?;

    fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("search_results.csv");
    let mut w = create(&path)?;
    writeln!(w, "rank,a,b,score")?;
    for (i, t) in trials.iter().enumerate() {
        writeln!(w, "{},{},{},{}", i + 1, t.a, t.b, t.score)?;
    }
    w.flush()?;

    let best = &trials[0];
    let lambdas = geometric_weights(GeometricSchedule { a: best.a, b: best.b }, d.k())?;
    let mut w = create(&cfg.out_dir.join("best_weights.json"))?;
    serde_json::to_writer_pretty(
        &mut w,
        &json!({"a": best.a, "b": best.b, "score": best.score, "lambdas": lambdas.lambdas()}),
    )?;
    w.flush()?;
    info!("best of {} trials: a = {:.4}, b = {:.4}, score {:.5}", trials.len(), best.a, best.b, best.score);
    Ok(path)
}
