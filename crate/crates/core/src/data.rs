//! Toy 2-D datasets and point-set CSV files.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::PathBuf;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    GmmRing,
    Checkerboard,
    SwissRoll,
    CsvFile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Rows to generate. Ignored for `csv_file`, which loads every row.
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    /// Mixture components on the ring.
    #[serde(default = "default_modes")]
    pub modes: usize,
    #[serde(default = "default_radius")]
    pub radius: f64,
    /// Per-component standard deviation for `gmm_ring`, additive noise for
    /// `swiss_roll`.
    #[serde(default = "default_std")]
    pub std: f64,
    #[serde(default)]
    pub path: Option<PathBuf>,
}

fn default_n() -> usize {
    10_000
}
fn default_modes() -> usize {
    8
}
fn default_radius() -> f64 {
    4.0
}
fn default_std() -> f64 {
    0.1
}

impl DatasetSpec {
    pub fn gmm_ring(n: usize, seed: u64) -> Self {
        Self {
            kind: DatasetKind::GmmRing,
            n,
            seed,
            modes: default_modes(),
            radius: default_radius(),
            std: default_std(),
            path: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            DatasetKind::GmmRing => {
                if self.modes == 0 || !(self.radius > 0.0) || !(self.std >= 0.0) {
                    return Err(Error::config(format!(
                        "gmm_ring needs modes >= 1, radius > 0 and std >= 0, got {}, {}, {}",
                        self.modes, self.radius, self.std
                    )));
                }
            }
            DatasetKind::Checkerboard => {}
            DatasetKind::SwissRoll => {
                if !(self.std >= 0.0) {
                    return Err(Error::config("swiss_roll noise must be >= 0"));
                }
            }
            DatasetKind::CsvFile => {
                if self.path.is_none() {
                    return Err(Error::config("csv_file dataset needs a `path`"));
                }
            }
        }
        Ok(())
    }

    /// Materializes the dataset.
    pub fn load(&self) -> Result<Dataset> {
        self.validate()?;
        let mut rng = seed::stream(self.seed, "dataset");
        let mut data = Vec::with_capacity(2 * self.n);
        match self.kind {
            DatasetKind::GmmRing => {
                let centers = ring_centers(self.modes, self.radius);
                for _ in 0..self.n {
                    let c = centers[rng.gen_range(0..self.modes)];
                    for v in c {
                        let e: f64 = rng.sample(StandardNormal);
                        data.push((v + self.std * e) as f32);
                    }
                }
            }
            DatasetKind::Checkerboard => {
                for _ in 0..self.n {
                    let x: f64 = rng.gen_range(-2.0..2.0);
                    let lift = (x.floor().rem_euclid(2.0)) + 2.0 * rng.gen_range(0..2) as f64 - 2.0;
                    let y = rng.gen_range(0.0..1.0) + lift;
                    data.extend([x as f32, y as f32]);
                }
            }
            DatasetKind::SwissRoll => {
                for _ in 0..self.n {
                    let t = 1.5 * PI * (1.0 + 2.0 * rng.gen::<f64>());
                    let (e1, e2): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                    data.push((t * t.cos() / 4.0 + self.std * e1) as f32);
                    data.push((t * t.sin() / 4.0 + self.std * e2) as f32);
                }
            }
            DatasetKind::CsvFile => {
                let path = self.path.as_ref().expect("validated");
                return Dataset::read_csv(std::fs::File::open(path)?);
            }
        }
        Dataset::new(2, data)
    }
}

/// `modes` points spaced evenly on a circle, the first on the positive x axis.
pub fn ring_centers(modes: usize, radius: f64) -> Vec<[f64; 2]> {
    (0..modes)
        .map(|m| {
            let a = 2.0 * PI * m as f64 / modes as f64;
            [radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

/// Row-major point set that, unlike [`Tensor`], may be empty.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    channels: usize,
    data: Vec<f32>,
}

impl Dataset {
    pub fn new(channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || !data.len().is_multiple_of(channels) {
            return Err(Error::dim("dataset", &[channels], &[data.len()]));
        }
        Ok(Self { channels, data })
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            channels: t.cols(),
            data: t.data().to_vec(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::contract("dataset has no rows"));
        }
        Tensor::matrix(self.len(), self.channels, self.data.clone())
    }

    /// Header `x0,..,x{C-1}` then one row per point.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (0..self.channels).map(|i| format!("x{i}")).collect();
        writeln!(w, "{}", header.join(","))?;
        let mut line = String::new();
        for i in 0..self.len() {
            line.clear();
            for (j, v) in self.row(i).iter().enumerate() {
                if j > 0 {
                    line.push(',');
                }
                line.push_str(&v.to_string());
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let headers = reader
            .headers()
            .map_err(|e| Error::Format(format!("csv header: {e}")))?
            .clone();
        let channels = headers.len();
        if channels == 0 || headers.iter().enumerate().any(|(i, h)| h.trim() != format!("x{i}")) {
            return Err(Error::Format(format!(
                "expected header x0..x{{C-1}}, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut data = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Format(format!("csv row {}: {e}", line + 1)))?;
            if rec.len() != channels {
                return Err(Error::Format(format!(
                    "csv row {} has {} fields, expected {channels}",
                    line + 1,
                    rec.len()
                )));
            }
            for field in rec.iter() {
                let v: f32 = field
                    .trim()
                    .parse()
                    .map_err(|e| Error::Format(format!("csv row {}: `{field}`: {e}", line + 1)))?;
                data.push(v);
            }
        }
        Self::new(channels, data)
    }
}
