//! Flow-matching objective, Adam training loop with EMA weights, and a
//! finite-difference gradient check.
//!
//! The probability path is `x_t = (1 - t) x₀ + t x₁` with `x₀ ~ N(0, I)`,
//! `x₁` from the target and `t ~ U[0, 1]`; the regression target is
//! `x₁ - x₀` (forward-time velocity).

use ndarray::{Array2, Zip};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::mlp::{MlpArchitecture, MlpParams};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: MlpArchitecture,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    pub seed: u64,
    /// Loss-curve resolution: one averaged point per this many steps.
    pub log_every: usize,
    pub heldout_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: MlpArchitecture::default(),
            steps: 20_000,
            batch_size: 512,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            ema_decay: 0.999,
            seed: 0,
            log_every: 100,
            heldout_size: 4096,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let ok = self.batch_size > 0
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && (0.0..1.0).contains(&self.ema_decay)
            && self.log_every > 0
            && self.heldout_size > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config: {self:?}")))
        }
    }
}

/// One flow-matching regression batch.
#[derive(Debug, Clone)]
pub struct FmBatch {
    pub noise: Array2<f64>,
    pub data: Array2<f64>,
    pub times: Vec<f64>,
}

impl FmBatch {
    pub fn draw(dataset: &Dataset, rng: &mut Rng, n: usize) -> Self {
        let data = dataset.sample_with(rng, n);
        let mut noise = Array2::zeros(data.raw_dim());
        noise.mapv_inplace(|_: f64| StandardNormal.sample(rng));
        let times = (0..n).map(|_| rng.random::<f64>()).collect();
        Self { noise, data, times }
    }

    fn validate(&self, arch: &MlpArchitecture) -> Result<()> {
        if self.noise.shape() != self.data.shape() {
            return Err(Error::Contract(format!(
                "noise batch {:?} and data batch {:?} differ in shape",
                self.noise.shape(),
                self.data.shape()
            )));
        }
        if self.noise.ncols() != arch.data_dim || self.times.len() != self.noise.nrows() {
            return Err(Error::Contract(format!(
                "batch of {} points in {} dims with {} times does not fit a {}-dim model",
                self.noise.nrows(),
                self.noise.ncols(),
                self.times.len(),
                arch.data_dim
            )));
        }
        if self.noise.nrows() == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        if let Some(t) = self.times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Contract(format!("time {t} outside [0, 1]")));
        }
        Ok(())
    }

    /// Interpolants `x_t` and regression targets `x₁ - x₀`.
    fn inputs_and_targets(&self) -> (Array2<f64>, Array2<f64>) {
        let mut xt = self.data.clone();
        for ((mut row, noise), &t) in xt.rows_mut().into_iter().zip(self.noise.rows()).zip(&self.times) {
            Zip::from(&mut row)
                .and(&noise)
                .for_each(|x, &x0| *x = (1.0 - t) * x0 + t * *x);
        }
        let target = &self.data - &self.noise;
        (xt, target)
    }
}

fn mse(out: &Array2<f64>, target: &Array2<f64>) -> f64 {
    let n = out.nrows() as f64;
    Zip::from(out)
        .and(target)
        .fold(0.0, |acc, &o, &y| acc + (o - y) * (o - y))
        / n
}

/// Mean over the batch of `‖model(x_t, t) - (x₁ - x₀)‖²`.
pub fn fm_loss(params: &MlpParams, batch: &FmBatch) -> Result<f64> {
    batch.validate(&params.architecture())?;
    let (xt, target) = batch.inputs_and_targets();
    let out = params.forward(xt.view(), &batch.times);
    let loss = mse(&out, &target);
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numeric("flow-matching loss is not finite".into()))
    }
}

/// Loss and its gradient with respect to every parameter.
pub fn fm_loss_and_grad(params: &MlpParams, batch: &FmBatch) -> Result<(f64, MlpParams)> {
    batch.validate(&params.architecture())?;
    let (xt, target) = batch.inputs_and_targets();
    let (out, cache) = params.forward_cached(xt.view(), &batch.times);
    let loss = mse(&out, &target);
    if !loss.is_finite() {
        return Err(Error::Numeric("flow-matching loss is not finite".into()));
    }
    let scale = 2.0 / out.nrows() as f64;
    let d_out = (&out - &target) * scale;
    Ok((loss, params.backward(&cache, &d_out)))
}

struct Adam {
    m: MlpParams,
    v: MlpParams,
    step: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(params: &MlpParams, cfg: &TrainConfig) -> Self {
        Self {
            m: MlpParams::zeros(params.architecture()),
            v: MlpParams::zeros(params.architecture()),
            step: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    fn update(&mut self, params: &mut MlpParams, grads: &MlpParams) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in params
            .slices_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(self.m.slices_mut())
            .zip(self.v.slices_mut())
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

fn ema_update(ema: &mut MlpParams, live: &MlpParams, decay: f64) {
    for (e, l) in ema.slices_mut().into_iter().zip(live.slices()) {
        for (e, l) in e.iter_mut().zip(l) {
            *e = decay * *e + (1.0 - decay) * l;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    /// Held-out loss of the initialization.
    pub initial_heldout_loss: f64,
    /// Held-out loss of the returned EMA weights.
    pub final_heldout_loss: f64,
    /// `(last step of window, mean training loss over window)`.
    pub loss_curve: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub ema: MlpParams,
    pub live: MlpParams,
    pub report: TrainReport,
}

/// Trains the residual MLP on `dataset` and returns EMA weights.
///
/// Single-threaded and fully determined by `config.seed`.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    dataset.validate()?;
    let mut live = MlpParams::init(config.model, derive_seed(config.seed, "init"))?;
    let mut ema = live.clone();
    let mut adam = Adam::new(&live, config);

    let heldout = FmBatch::draw(
        dataset,
        &mut stream_rng(derive_seed(config.seed, "heldout"), 0),
        config.heldout_size,
    );
    let initial_heldout_loss = fm_loss(&live, &heldout)?;

    let mut rng = stream_rng(derive_seed(config.seed, "batches"), 0);
    let mut loss_curve = Vec::new();
    let mut window = 0.0;
    let mut window_len = 0usize;
    for step in 0..config.steps {
        let batch = FmBatch::draw(dataset, &mut rng, config.batch_size);
        let (loss, grads) = match fm_loss_and_grad(&live, &batch) {
            Ok(v) => v,
            Err(Error::Numeric(_)) => {
                return Err(Error::TrainingDiverged {
                    step,
                    loss: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        adam.update(&mut live, &grads);
        if !live.is_finite() {
            return Err(Error::TrainingDiverged { step, loss });
        }
        ema_update(&mut ema, &live, config.ema_decay);

        window += loss;
        window_len += 1;
        if window_len == config.log_every || step + 1 == config.steps {
            loss_curve.push((step + 1, window / window_len as f64));
            window = 0.0;
            window_len = 0;
        }
    }

    let final_heldout_loss = fm_loss(&ema, &heldout)?;
    Ok(TrainOutcome {
        ema,
        live,
        report: TrainReport {
            steps: config.steps,
            initial_heldout_loss,
            final_heldout_loss,
            loss_curve,
        },
    })
}

/// Step used by [`gradient_check`] for central differences.
pub const GRAD_CHECK_STEP: f64 = 1e-4;

/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Largest relative discrepancy between the analytic gradient and central
/// finite differences over every parameter,
/// `|g - ĝ| / max(|g|, |ĝ|, GRAD_CHECK_FLOOR)`.
///
/// Costs two forward passes per parameter; meant for small networks.
pub fn gradient_check(params: &MlpParams, batch: &FmBatch) -> Result<f64> {
    let (_, analytic) = fm_loss_and_grad(params, batch)?;
    let analytic: Vec<f64> = analytic.slices().concat();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    let mut flat = 0usize;
    let n_tensors = probe.slices().len();
    for tensor in 0..n_tensors {
        let len = probe.slices()[tensor].len();
        for i in 0..len {
            let orig = probe.slices()[tensor][i];
            probe.slices_mut()[tensor][i] = orig + GRAD_CHECK_STEP;
            let up = fm_loss(&probe, batch)?;
            probe.slices_mut()[tensor][i] = orig - GRAD_CHECK_STEP;
            let down = fm_loss(&probe, batch)?;
            probe.slices_mut()[tensor][i] = orig;
            let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
            let a = analytic[flat];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max(rel);
            flat += 1;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};

    fn arch(width: usize) -> MlpArchitecture {
        MlpArchitecture {
            data_dim: 2,
            width,
            blocks: 3,
            time_embed_dim: 8,
        }
    }

    fn random_batch(n: usize, seed: u64) -> FmBatch {
        FmBatch::draw(&Dataset::rotated_grid(), &mut stream_rng(seed, 0), n)
    }

    #[test]
    fn exact_fit_has_zero_loss() {
        // Zero network predicts the output bias; pick a batch whose target is that bias.
        let mut p = MlpParams::zeros(arch(4));
        p.output.bias = ndarray::arr1(&[0.25, -0.125]);
        let noise = arr2(&[[0.0, 0.0], [1.0, 1.0]]);
        let data = arr2(&[[0.25, -0.125], [1.25, 0.875]]);
        let batch = FmBatch {
            noise,
            data,
            times: vec![0.2, 0.7],
        };
        assert_eq!(fm_loss(&p, &batch).unwrap(), 0.0);
    }

    #[test]
    fn single_pair_unit_loss() {
        let p = MlpParams::zeros(arch(4));
        let batch = FmBatch {
            noise: arr2(&[[0.0, 0.0]]),
            data: arr2(&[[1.0, 0.0]]),
            times: vec![0.5],
        };
        assert_eq!(fm_loss(&p, &batch).unwrap(), 1.0);
    }

    #[test]
    fn loss_matches_scalar_loop() {
        let p = MlpParams::init(arch(16), 2).unwrap();
        let batch = random_batch(32, 3);
        let loss = fm_loss(&p, &batch).unwrap();
        let mut total = 0.0;
        for i in 0..32 {
            let t = batch.times[i];
            let x = [
                (1.0 - t) * batch.noise[[i, 0]] + t * batch.data[[i, 0]],
                (1.0 - t) * batch.noise[[i, 1]] + t * batch.data[[i, 1]],
            ];
            let row = Array2::from_shape_vec((1, 2), x.to_vec()).unwrap();
            let out = p.forward(row.view(), &[t]);
            for k in 0..2 {
                let target = batch.data[[i, k]] - batch.noise[[i, k]];
                total += (out[[0, k]] - target).powi(2);
            }
        }
        assert!((loss - total / 32.0).abs() < 1e-10);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let p = MlpParams::zeros(arch(4));
        let batch = FmBatch {
            noise: Array2::zeros((3, 2)),
            data: Array2::zeros((2, 2)),
            times: vec![0.1; 3],
        };
        assert!(matches!(fm_loss(&p, &batch), Err(Error::Contract(_))));
        let batch = FmBatch {
            noise: Array2::zeros((1, 2)),
            data: Array2::zeros((1, 2)),
            times: vec![1.5],
        };
        assert!(matches!(fm_loss(&p, &batch), Err(Error::Contract(_))));
    }

    #[test]
    fn gradient_check_small_widths() {
        for (width, seed) in [(4, 0), (8, 1), (16, 2)] {
            let p = MlpParams::init(arch(width), seed).unwrap();
            let err = gradient_check(&p, &random_batch(8, seed + 10)).unwrap();
            assert!(err < 1e-4, "width {width}: max relative error {err}");
        }
    }

    #[test]
    fn zero_network_bias_gradients() {
        let p = MlpParams::zeros(arch(8));
        let batch = random_batch(6, 4);
        let (_, grads) = fm_loss_and_grad(&p, &batch).unwrap();
        // Only the output bias moves a zero network: d/db = 2/n Σ (b - y) = -2 mean(y).
        let (xt_target_mean0, xt_target_mean1) = {
            let target = &batch.data - &batch.noise;
            (target.column(0).mean().unwrap(), target.column(1).mean().unwrap())
        };
        assert!((grads.output.bias[0] + 2.0 * xt_target_mean0).abs() < 1e-12);
        assert!((grads.output.bias[1] + 2.0 * xt_target_mean1).abs() < 1e-12);
        assert!(grads.input.bias.iter().all(|&g| g == 0.0));
        let err = gradient_check(&p, &batch).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn output_layer_gradient_is_linear_regression_gradient() {
        // With hidden features F fixed, the output layer is a linear model
        // out = F W + b whose MSE gradient is (2/n) Fᵀ(out - y).
        let p = MlpParams::init(arch(8), 5).unwrap();
        let batch = random_batch(10, 6);
        let (xt, target) = batch.inputs_and_targets();
        let (out, _) = p.forward_cached(xt.view(), &batch.times);
        let features = hidden_features(&p, &xt, &batch.times);
        let resid = &out - &target;
        let expected_w = features.t().dot(&resid) * (2.0 / 10.0);
        let expected_b = resid.sum_axis(ndarray::Axis(0)) * (2.0 / 10.0);
        let (_, grads) = fm_loss_and_grad(&p, &batch).unwrap();
        for (a, b) in grads.output.weight.iter().zip(expected_w.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
        for (a, b) in grads.output.bias.iter().zip(expected_b.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    /// `silu(h_L)` computed independently of the cached forward pass.
    fn hidden_features(p: &MlpParams, xt: &Array2<f64>, times: &[f64]) -> Array2<f64> {
        let n = xt.nrows();
        let width = p.architecture().width;
        let mut feats = Array2::zeros((n, width));
        for i in 0..n {
            let emb = super::super::mlp::time_embedding(&times[i..i + 1], 8);
            let z: Vec<f64> = xt.row(i).iter().chain(emb.row(0).iter()).copied().collect();
            let mut h: Vec<f64> = (0..width)
                .map(|o| p.input.bias[o] + (0..z.len()).map(|k| z[k] * p.input.weight[[k, o]]).sum::<f64>())
                .collect();
            for b in &p.blocks {
                let a: Vec<f64> = (0..width)
                    .map(|o| b.fc1.bias[o] + (0..width).map(|k| h[k] * b.fc1.weight[[k, o]]).sum::<f64>())
                    .collect();
                let g: Vec<f64> = a.iter().map(|&a| a / (1.0 + (-a).exp())).collect();
                h = (0..width)
                    .map(|o| h[o] + b.fc2.bias[o] + (0..width).map(|k| g[k] * b.fc2.weight[[k, o]]).sum::<f64>())
                    .collect();
            }
            for o in 0..width {
                feats[[i, o]] = h[o] / (1.0 + (-h[o]).exp());
            }
        }
        feats
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let cfg = TrainConfig {
            model: arch(8),
            steps: 0,
            batch_size: 16,
            heldout_size: 64,
            ..Default::default()
        };
        let out = train(&cfg, &Dataset::rotated_grid()).unwrap();
        let init = MlpParams::init(cfg.model, derive_seed(cfg.seed, "init")).unwrap();
        assert_eq!(out.ema, init);
        assert!(out.report.loss_curve.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_reduces_heldout_loss() {
        let cfg = TrainConfig {
            model: arch(16),
            steps: 300,
            batch_size: 64,
            ema_decay: 0.9,
            heldout_size: 512,
            ..Default::default()
        };
        let a = train(&cfg, &Dataset::rotated_grid()).unwrap();
        let b = train(&cfg, &Dataset::rotated_grid()).unwrap();
        assert_eq!(a.ema, b.ema);
        assert!(a.ema.same_shape(&a.live));
        assert!(a.report.final_heldout_loss < a.report.initial_heldout_loss);
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let cfg = TrainConfig {
            model: arch(8),
            steps: 200,
            batch_size: 16,
            learning_rate: 1e200,
            heldout_size: 16,
            ..Default::default()
        };
        match train(&cfg, &Dataset::rotated_grid()) {
            Err(Error::TrainingDiverged { step, .. }) => assert!(step < 200),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
