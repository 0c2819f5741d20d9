//! Time-conditioned MLP score network with an expandable branch head.
//!
//! The network maps `(z_t, t)` to `K * C` output channels. Branch `k` owns
//! the contiguous channel slice `[k * C, (k + 1) * C)`; the last branch is the
//! one used at inference. A single-branch net is an ordinary score network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{conversion_rows, forward_diffuse_rows, scale_rows, NoiseSchedule, Parameterization, TimePoint};
use crate::tape::{LossKind, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    /// Data channels `C`.
    pub channels: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_time_dim")]
    pub time_dim: usize,
    #[serde(default = "default_param")]
    pub parameterization: Parameterization,
    /// Data standard deviation used for input scaling.
    #[serde(default = "default_sigma_data")]
    pub sigma_data: f64,
    /// Branch count `K`.
    #[serde(default = "default_branches")]
    pub branches: usize,
}

fn default_hidden() -> Vec<usize> {
    vec![128, 128, 128]
}
fn default_time_dim() -> usize {
    16
}
fn default_param() -> Parameterization {
    Parameterization::Epsilon
}
fn default_sigma_data() -> f64 {
    1.0
}
fn default_branches() -> usize {
    1
}

impl NetSpec {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            hidden: default_hidden(),
            time_dim: default_time_dim(),
            parameterization: default_param(),
            sigma_data: default_sigma_data(),
            branches: default_branches(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("network needs at least one channel"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config(format!("invalid hidden sizes {:?}", self.hidden)));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::config(format!(
                "time embedding dimension must be even and >= 2, got {}",
                self.time_dim
            )));
        }
        if !(self.sigma_data > 0.0) {
            return Err(Error::config("sigma_data must be positive"));
        }
        if self.branches == 0 {
            return Err(Error::config("branch count must be >= 1"));
        }
        Ok(())
    }
}

/// Affine layer `y = x W + b`, with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-bound..bound)).collect::<Vec<f32>>();
        Ok(Self {
            weight: Tensor::matrix(fan_in, fan_out, draw(fan_in * fan_out))?,
            bias: Tensor::new(vec![fan_out], draw(fan_out))?,
        })
    }
}

/// Parameter vars bound to one tape by [`ScoreNet::forward`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Sinusoidal features of a normalized time in `[0, 1]`.
pub fn time_features(t_norm: f64, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let scaled = t_norm * 1000.0;
    let mut out = vec![0.0f32; dim];
    for j in 0..half {
        let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
        let angle = scaled * freq;
        out[j] = angle.sin() as f32;
        out[half + j] = angle.cos() as f32;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNet {
    spec: NetSpec,
    layers: Vec<Linear>,
}

impl ScoreNet {
    pub fn new<R: Rng + ?Sized>(spec: NetSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut sizes = vec![spec.channels + spec.time_dim];
        sizes.extend(&spec.hidden);
        sizes.push(spec.channels * spec.branches);
        let layers = sizes
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { spec, layers })
    }

    /// Rebuilds a network from named tensors in [`ScoreNet::named_tensors`] order.
    pub fn from_tensors(spec: NetSpec, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        spec.validate()?;
        let mut sizes = vec![spec.channels + spec.time_dim];
        sizes.extend(&spec.hidden);
        sizes.push(spec.channels * spec.branches);
        if tensors.len() != 2 * (sizes.len() - 1) {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                2 * (sizes.len() - 1),
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let mut layers = Vec::new();
        for (i, w) in sizes.windows(2).enumerate() {
            let (wn, weight) = it.next().expect("length checked");
            let (bn, bias) = it.next().expect("length checked");
            if wn != format!("layers.{i}.weight") || bn != format!("layers.{i}.bias") {
                return Err(Error::Format(format!("unexpected tensor names {wn}, {bn}")));
            }
            if weight.shape() != [w[0], w[1]] || bias.shape() != [w[1]] {
                return Err(Error::Format(format!(
                    "layer {i} has shapes {:?}/{:?}, expected [{}, {}]/[{}]",
                    weight.shape(),
                    bias.shape(),
                    w[0],
                    w[1],
                    w[1]
                )));
            }
            layers.push(Linear { weight, bias });
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn branches(&self) -> usize {
        self.spec.branches
    }

    pub fn channels(&self) -> usize {
        self.spec.channels
    }

    pub fn inference_branch(&self) -> usize {
        self.spec.branches - 1
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("layers.{i}.weight"), &l.weight),
                    (format!("layers.{i}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("layers.{i}.weight"), &mut l.weight),
                    (format!("layers.{i}.bias"), &mut l.bias),
                ]
            })
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Adds the tape gradients of the bound parameter vars into the
    /// parameters' own gradient buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != bound.0.len() {
            return Err(Error::contract("bound parameters do not belong to this network"));
        }
        for ((_, p), v) in params.iter_mut().zip(&bound.0) {
            if let Some(g) = tape.grad(*v) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn conditioning(&self, rows: usize, points: &[TimePoint]) -> Result<(Vec<f32>, Tensor)> {
        if points.len() != rows {
            return Err(Error::dim("conditioning", &[rows], &[points.len()]));
        }
        let sd = self.spec.sigma_data;
        let c_in = points
            .iter()
            .map(|p| (1.0 / (p.alpha * p.alpha * sd * sd + p.sigma * p.sigma).sqrt()) as f32)
            .collect();
        let dim = self.spec.time_dim;
        let feats = points.iter().flat_map(|p| time_features(p.t_norm, dim)).collect();
        Ok((c_in, Tensor::matrix(rows, dim, feats)?))
    }

    /// Records the forward pass of `z` (one row per sample, row `i` at
    /// `points[i]`) and returns the raw `K * C` output.
    pub fn forward(&self, tape: &mut Tape, z: Var, points: &[TimePoint]) -> Result<(Var, Bound)> {
        let shape = tape.value(z).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.spec.channels {
            return Err(Error::dim("score net input", &shape, &[points.len(), self.spec.channels]));
        }
        let (c_in, temb) = self.conditioning(shape[0], points)?;
        let scaled = tape.scale_rows(z, &c_in)?;
        let temb = tape.constant(temb);
        let mut h = tape.concat_cols(scaled, temb)?;
        let mut bound = Vec::with_capacity(2 * self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.param(&layer.weight);
            let b = tape.param(&layer.bias);
            bound.extend([w, b]);
            h = tape.matmul(h, w)?;
            h = tape.add_bias(h, b)?;
            if i + 1 < self.layers.len() {
                h = tape.silu(h);
            }
        }
        Ok((h, Bound(bound)))
    }

    /// Untracked forward pass returning the raw `K * C` output.
    pub fn eval(&self, z: &Tensor, points: &[TimePoint]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.detach());
        let (out, _) = self.forward(&mut tape, zv, points)?;
        Ok(tape.value(out).detach())
    }

    /// Branch `k` of a recorded output, converted to a noise prediction.
    pub fn branch_eps(
        &self,
        tape: &mut Tape,
        out: Var,
        z: &Tensor,
        points: &[TimePoint],
        k: usize,
    ) -> Result<Var> {
        let raw = branch_slice_var(tape, out, self.spec.channels, self.spec.branches, k)?;
        to_eps_on_tape(tape, raw, self.spec.parameterization, z, points)
    }

    /// Untracked noise prediction of branch `k`, row `i` at `points[i]`.
    pub fn predict_eps_branch(&self, z: &Tensor, points: &[TimePoint], k: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.detach());
        let (out, _) = self.forward(&mut tape, zv, points)?;
        let eps = self.branch_eps(&mut tape, out, z, points, k)?;
        Ok(tape.value(eps).detach())
    }

    /// Tiles the final layer `k` times along its output dimension; every other
    /// parameter is copied unchanged.
    pub fn expand_branch_head(&self, k: usize) -> Result<ScoreNet> {
        if k < 1 {
            return Err(Error::config("branch count must be >= 1"));
        }
        if self.spec.branches != 1 {
            return Err(Error::contract(format!(
                "branch expansion needs a single-branch net, got K = {}",
                self.spec.branches
            )));
        }
        let mut out = self.clone();
        out.spec.branches = k;
        let last = out.layers.last_mut().expect("at least one layer");
        let (fan_in, c) = (last.weight.rows(), last.weight.cols());
        let mut w = Vec::with_capacity(fan_in * c * k);
        for r in 0..fan_in {
            let row = last.weight.row(r);
            for _ in 0..k {
                w.extend_from_slice(row);
            }
        }
        let b: Vec<f32> = (0..k).flat_map(|_| last.bias.data().to_vec()).collect();
        last.weight = Tensor::matrix(fan_in, c * k, w)?;
        last.bias = Tensor::new(vec![c * k], b)?;
        Ok(out)
    }

    /// Single-branch network computing branch `k` of this one.
    pub fn collapse_to_branch(&self, k: usize) -> Result<ScoreNet> {
        let (c, kk) = (self.spec.channels, self.spec.branches);
        if k >= kk {
            return Err(Error::contract(format!("branch {k} out of range for K = {kk}")));
        }
        let mut out = self.clone();
        out.spec.branches = 1;
        let last = out.layers.last_mut().expect("at least one layer");
        last.weight = last.weight.slice_cols(k * c, (k + 1) * c)?;
        last.bias = Tensor::new(vec![c], last.bias.data()[k * c..(k + 1) * c].to_vec())?;
        Ok(out)
    }
}

/// Network whose noise prediction drives a sampler.
pub trait Denoiser {
    /// Noise prediction for row `i` of `z` at `points[i]`.
    fn predict_eps(&self, z: &Tensor, points: &[TimePoint]) -> Result<Tensor>;

    /// Noise prediction with every row at the same time point.
    fn predict_eps_at(&self, z: &Tensor, point: &TimePoint) -> Result<Tensor> {
        self.predict_eps(z, &vec![*point; z.rows()])
    }
}

impl Denoiser for ScoreNet {
    fn predict_eps(&self, z: &Tensor, points: &[TimePoint]) -> Result<Tensor> {
        self.predict_eps_branch(z, points, self.inference_branch())
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict_eps(&self, z: &Tensor, points: &[TimePoint]) -> Result<Tensor> {
        (**self).predict_eps(z, points)
    }
}

/// Channels `[k * C, (k + 1) * C)` of a `K * C` output.
pub fn branch_slice(output: &Tensor, channels: usize, branches: usize, k: usize) -> Result<Tensor> {
    check_branch(output.cols(), channels, branches, k)?;
    output.slice_cols(k * channels, (k + 1) * channels)
}

/// Tape-recorded [`branch_slice`].
pub fn branch_slice_var(tape: &mut Tape, out: Var, channels: usize, branches: usize, k: usize) -> Result<Var> {
    check_branch(tape.value(out).cols(), channels, branches, k)?;
    if branches == 1 {
        return Ok(out);
    }
    tape.slice_cols(out, k * channels, (k + 1) * channels)
}

fn check_branch(width: usize, channels: usize, branches: usize, k: usize) -> Result<()> {
    if width != channels * branches {
        return Err(Error::dim("branch_slice", &[width], &[channels, branches]));
    }
    if k >= branches {
        return Err(Error::contract(format!("branch {k} out of range for K = {branches}")));
    }
    Ok(())
}

/// Converts a recorded prediction to the noise parameterization; `z` is a
/// constant.
pub fn to_eps_on_tape(
    tape: &mut Tape,
    raw: Var,
    from: Parameterization,
    z: &Tensor,
    points: &[TimePoint],
) -> Result<Var> {
    convert_on_tape(tape, raw, from, Parameterization::Epsilon, z, points)
}

/// Tape-recorded row-wise parameterization change.
pub fn convert_on_tape(
    tape: &mut Tape,
    value: Var,
    from: Parameterization,
    to: Parameterization,
    z: &Tensor,
    points: &[TimePoint],
) -> Result<Var> {
    if from == to {
        return Ok(value);
    }
    let (cv, cz) = conversion_rows(from, to, points)?;
    let cv: Vec<f32> = cv.iter().map(|&c| c as f32).collect();
    let zc = scale_rows(z, &cz)?;
    let scaled = tape.scale_rows(value, &cv)?;
    let zc = tape.constant(zc);
    tape.add(scaled, zc)
}

/// `mse(eps, eps_hat(z_t, t))` with `z_t = alpha x0 + sigma eps` per row.
///
/// `branch` selects the supervised branch; it may be omitted only for
/// single-branch nets.
pub fn loss_simple(
    tape: &mut Tape,
    net: &ScoreNet,
    x0: &Tensor,
    eps: &Tensor,
    points: &[TimePoint],
    branch: Option<usize>,
) -> Result<(Var, Bound)> {
    let k = match branch {
        Some(k) => k,
        None if net.branches() == 1 => 0,
        None => {
            return Err(Error::contract(format!(
                "loss_simple on a {}-branch net needs an explicit branch",
                net.branches()
            )))
        }
    };
    let z = forward_diffuse_rows(x0, eps, points)?;
    let zv = tape.constant(z.clone());
    let (out, bound) = net.forward(tape, zv, points)?;
    let eps_hat = net.branch_eps(tape, out, &z, points, k)?;
    let target = tape.constant(eps.detach());
    let loss = tape.reduce_loss(LossKind::Mse, eps_hat, target, 1.0)?;
    Ok((loss, bound))
}

/// Draws training time points uniformly from `1..=T`.
pub fn sample_train_points<R: Rng + ?Sized>(
    sched: &NoiseSchedule,
    n: usize,
    rng: &mut R,
) -> Result<Vec<TimePoint>> {
    (0..n)
        .map(|_| sched.at_index(rng.gen_range(1..=sched.steps())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> NetSpec {
        NetSpec {
            hidden: vec![16, 16],
            time_dim: 8,
            ..NetSpec::new(2)
        }
    }

    fn points(n: usize) -> Vec<TimePoint> {
        let s = NoiseSchedule::build(ScheduleSpec::vp_default(100)).unwrap();
        (0..n).map(|i| s.at_index(1 + (i * 37) % 100).unwrap()).collect()
    }

    #[test]
    fn output_width_is_k_times_c() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = ScoreNet::new(NetSpec { branches: 3, ..small_spec() }, &mut rng).unwrap();
        let z = Tensor::randn(&[5, 2], &mut rng).unwrap();
        let out = net.eval(&z, &points(5)).unwrap();
        assert_eq!(out.shape(), &[5, 6]);
    }

    #[test]
    fn expansion_k1_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = ScoreNet::new(small_spec(), &mut rng).unwrap();
        assert_eq!(net.expand_branch_head(1).unwrap(), net);
        assert!(matches!(net.expand_branch_head(0), Err(Error::Config(_))));
    }

    #[test]
    fn expanded_branches_match_original() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = ScoreNet::new(small_spec(), &mut rng).unwrap();
        let wide = net.expand_branch_head(4).unwrap();
        let z = Tensor::randn(&[7, 2], &mut rng).unwrap();
        let p = points(7);
        let base = net.eval(&z, &p).unwrap();
        let out = wide.eval(&z, &p).unwrap();
        for k in 0..4 {
            let s = branch_slice(&out, 2, 4, k).unwrap();
            assert!(s.max_abs_diff(&base).unwrap() <= 1e-6);
        }
        let hidden = *small_spec().hidden.last().unwrap();
        assert_eq!(wide.num_params() - net.num_params(), 3 * (hidden + 1) * 2);
    }

    #[test]
    fn branch_partition_reconstructs_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = Tensor::randn(&[3, 8], &mut rng).unwrap();
        let parts: Vec<Tensor> = (0..4).map(|k| branch_slice(&out, 2, 4, k).unwrap()).collect();
        for r in 0..3 {
            let joined: Vec<f32> = parts.iter().flat_map(|p| p.row(r).to_vec()).collect();
            assert_eq!(joined, out.row(r));
        }
        assert!(branch_slice(&out, 2, 4, 4).is_err());
        let single = Tensor::randn(&[3, 2], &mut rng).unwrap();
        assert_eq!(branch_slice(&single, 2, 1, 0).unwrap(), single);
    }

    #[test]
    fn collapse_inverts_expand() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = ScoreNet::new(small_spec(), &mut rng).unwrap();
        let wide = net.expand_branch_head(3).unwrap();
        assert_eq!(wide.collapse_to_branch(2).unwrap(), net);
        assert!(net.expand_branch_head(2).unwrap().expand_branch_head(2).is_err());
    }

    #[test]
    fn loss_simple_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = ScoreNet::new(small_spec().clone(), &mut rng)
            .unwrap()
            .expand_branch_head(2)
            .unwrap();
        let x0 = Tensor::randn(&[4, 2], &mut rng).unwrap();
        let eps = Tensor::randn(&[4, 2], &mut rng).unwrap();
        let mut tape = Tape::new();
        let r = loss_simple(&mut tape, &net, &x0, &eps, &points(4), None);
        assert!(matches!(r, Err(Error::Contract(_))));
        assert!(loss_simple(&mut tape, &net, &x0, &eps, &points(4), Some(1)).is_ok());
    }

    #[test]
    fn tensors_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = ScoreNet::new(small_spec(), &mut rng).unwrap();
        let tensors = net
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        assert_eq!(ScoreNet::from_tensors(small_spec(), tensors).unwrap(), net);
    }
}
