//! Plain f64 reimplementation of the score MLP, used as a finite-difference
//! oracle for the tape gradients.
#![allow(dead_code)]

use bdense::{ScoreNet, Tensor, TimePoint};

pub struct MlpOracle {
    pub sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

impl MlpOracle {
    pub fn from_net(net: &ScoreNet) -> Self {
        let mut sizes = vec![net.layers()[0].weight.rows()];
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in net.layers() {
            sizes.push(l.weight.cols());
            weights.push(l.weight.data().iter().map(|&v| v as f64).collect());
            biases.push(l.bias.data().iter().map(|&v| v as f64).collect());
        }
        Self { sizes, weights, biases }
    }

    /// Network input rows: scaled state followed by sinusoidal time features.
    pub fn inputs(net: &ScoreNet, z: &Tensor, points: &[TimePoint]) -> Vec<Vec<f64>> {
        let spec = net.spec();
        let half = spec.time_dim / 2;
        (0..z.rows())
            .map(|i| {
                let p = &points[i];
                let sd = spec.sigma_data;
                let c_in = 1.0 / (p.alpha * p.alpha * sd * sd + p.sigma * p.sigma).sqrt();
                let mut row: Vec<f64> = z.row(i).iter().map(|&v| c_in * v as f64).collect();
                let mut sin = Vec::with_capacity(half);
                let mut cos = Vec::with_capacity(half);
                for j in 0..half {
                    let freq = (-(10000f64).ln() * j as f64 / half as f64).exp();
                    let a = p.t_norm * 1000.0 * freq;
                    sin.push(a.sin());
                    cos.push(a.cos());
                }
                row.extend(sin);
                row.extend(cos);
                row
            })
            .collect()
    }

    fn layer(&self, l: usize, x: &[f64]) -> Vec<f64> {
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let w = &self.weights[l];
        let mut out = self.biases[l].clone();
        for i in 0..n_in {
            let xi = x[i];
            let row = &w[i * n_out..(i + 1) * n_out];
            for (o, &wij) in out.iter_mut().zip(row) {
                *o += xi * wij;
            }
        }
        if l + 2 < self.sizes.len() {
            out.iter_mut().for_each(|v| *v = silu(*v));
        }
        out
    }

    /// Inputs to every layer, then the output, for one row.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        for l in 0..self.sizes.len() - 1 {
            let next = self.layer(l, acts.last().unwrap());
            acts.push(next);
        }
        acts
    }

    fn output_from(&self, l: usize, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for j in l..self.sizes.len() - 1 {
            h = self.layer(j, &h);
        }
        h
    }

    pub fn output(&self, x: &[f64]) -> Vec<f64> {
        self.output_from(0, x)
    }

    fn row_sq_err(out: &[f64], target: &[f64]) -> f64 {
        out.iter().zip(target).map(|(o, t)| (o - t) * (o - t)).sum()
    }

    /// Mean squared error over every output entry.
    pub fn loss(&self, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
        let total: f64 = inputs
            .iter()
            .zip(targets)
            .map(|(x, t)| Self::row_sq_err(&self.output(x), t))
            .sum();
        total / (inputs.len() * targets[0].len()) as f64
    }

    /// Central differences of [`MlpOracle::loss`] for every parameter, in
    /// `(weight, bias)` per layer order.
    pub fn fd_grads(&mut self, inputs: &[Vec<f64>], targets: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
        let acts: Vec<Vec<Vec<f64>>> = inputs.iter().map(|x| self.activations(x)).collect();
        let n = (inputs.len() * targets[0].len()) as f64;
        let mut out = Vec::new();
        for l in 0..self.weights.len() {
            for which in 0..2 {
                let len = if which == 0 { self.weights[l].len() } else { self.biases[l].len() };
                let mut g = vec![0.0; len];
                for (j, gj) in g.iter_mut().enumerate() {
                    let eval = |delta: f64, me: &mut Self| {
                        let p = if which == 0 { &mut me.weights[l][j] } else { &mut me.biases[l][j] };
                        let orig = *p;
                        *p = orig + delta;
                        let s: f64 = acts
                            .iter()
                            .zip(targets)
                            .map(|(a, t)| Self::row_sq_err(&me.output_from(l, &a[l]), t))
                            .sum();
                        let p = if which == 0 { &mut me.weights[l][j] } else { &mut me.biases[l][j] };
                        *p = orig;
                        s / n
                    };
                    let plus = eval(h, self);
                    let minus = eval(-h, self);
                    *gj = (plus - minus) / (2.0 * h);
                }
                out.push(g);
            }
        }
        out
    }
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
