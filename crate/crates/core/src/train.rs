//! MAE training with Adam and cosine annealing, inference, held-out
//! evaluation and the framework ablation.

use std::fmt::Write as _;
use std::path::PathBuf;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{self, Dataset, ImagePair};
use crate::error::{Error, Result};
use crate::metrics;
use crate::network::{self, ModelConfig};
use crate::params::ParameterStore;
use crate::retinex::{self, OrfMode};
use crate::tensor::{Real, Tensor};

/// `mean |pred − target|`. Shapes must match exactly.
pub fn mae_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::shape(format!(
            "loss inputs differ: {:?} vs {:?}",
            tape.shape(pred),
            tape.shape(target)
        )));
    }
    let d = tape.sub(pred, target)?;
    let a = tape.abs(d)?;
    tape.mean(a)
}

/// Cosine annealing from `lr_start` at step 0 to `lr_end` at `total_steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_steps: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { lr_start: 2e-4, lr_end: 1e-6, total_steps: 5000 }
    }
}

impl Schedule {
    pub fn new(lr_start: f64, lr_end: f64, total_steps: usize) -> Result<Self> {
        let s = Schedule { lr_start, lr_end, total_steps };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start > self.lr_end && self.lr_end > 0.0) {
            return Err(Error::config(format!(
                "learning rates must satisfy start > end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        Ok(())
    }

    /// Written as a convex combination so both endpoints are exact.
    pub fn lr_at(&self, step: usize) -> f64 {
        let step = if step > self.total_steps {
            warn!("step {step} beyond schedule length {}; clamping", self.total_steps);
            self.total_steps
        } else {
            step
        };
        let w = 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / self.total_steps as f64).cos());
        self.lr_start * w + self.lr_end * (1.0 - w)
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// First and second moments for every parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T = f32> {
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> OptimState<T> {
    pub fn new(store: &ParameterStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        OptimState { first_moment: zeros.clone(), second_moment: zeros, step: 0 }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Real>(
    store: &mut ParameterStore<T>,
    grads: &[Tensor<T>],
    state: &mut OptimState<T>,
    lr: f64,
) -> Result<()> {
    if grads.len() != store.len() || state.first_moment.len() != store.len() {
        return Err(Error::usage(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.first_moment.len(),
            store.len()
        )));
    }
    for (i, ((name, p), g)) in store.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.first_moment[i].shape() != p.shape() {
            return Err(Error::usage(format!("gradient for `{name}` has shape {:?}", g.shape())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 / (1.0 - ADAM_BETA1.powi(t));
    let c2 = 1.0 / (1.0 - ADAM_BETA2.powi(t));
    let cv = |x: f64| T::from_f64_lossy(x);
    let (b1, b2, eps) = (cv(ADAM_BETA1), cv(ADAM_BETA2), cv(ADAM_EPSILON));
    let (c1, c2, lr) = (cv(c1), cv(c2), cv(lr));
    let one = T::one();
    for (i, (_, p)) in store.iter_mut().enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *p = *p - lr * (*m * c1) / ((*v * c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Everything that determines a training run.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub mode: OrfMode,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub seed: u64,
    /// Random crop, rotation and flip per sample.
    pub augment: bool,
    /// Adds `MAE(I_lu, reference)` to the loss.
    pub aux_lit_loss: bool,
    /// Held-out evaluation interval in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            mode: OrfMode::Full,
            schedule: Schedule::default(),
            batch_size: 2,
            seed: 0,
            augment: true,
            aux_lit_loss: false,
            eval_every: 500,
            checkpoint: None,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub eval_psnr: Option<f64>,
    pub eval_ssim: Option<f64>,
}

pub const LOG_CSV_HEADER: &str = "step,lr,loss,eval_psnr,eval_ssim";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_default();
        format!("{},{:e},{:.6},{},{}", self.step, self.lr, self.loss, opt(self.eval_psnr), opt(self.eval_ssim))
    }
}

/// Loss of one forward pass, plus `I_lu` and `I_en` for inspection.
pub struct ForwardLoss {
    pub loss: Var,
    pub lit_image: Var,
    pub enhanced: Var,
}

pub fn forward_loss<T: Real>(
    tape: &mut Tape<T>,
    p: &crate::params::Bound,
    config: &TrainConfig,
    pair: &ImagePair,
) -> Result<ForwardLoss> {
    let low = tape.constant(pair.low.cast());
    let reference = tape.constant(pair.reference.cast());
    let out = retinex::orf_forward(tape, p, &config.model, low, config.mode)?;
    let mut loss = mae_loss(tape, out.enhanced, reference)?;
    if config.aux_lit_loss {
        let aux = mae_loss(tape, out.lit_image, reference)?;
        loss = tape.add(loss, aux)?;
    }
    Ok(ForwardLoss { loss, lit_image: out.lit_image, enhanced: out.enhanced })
}

/// Training state: parameters, optimizer moments and the step counter.
pub struct Trainer {
    pub config: TrainConfig,
    pub store: ParameterStore<f32>,
    state: OptimState<f32>,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let store = network::init_parameters(&config.model, config.seed)?;
        Ok(Self::with_store(config, store))
    }

    pub fn with_store(config: TrainConfig, store: ParameterStore<f32>) -> Self {
        let state = OptimState::new(&store);
        Trainer { config, store, state, step: 0 }
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn optimizer(&self) -> &OptimState<f32> {
        &self.state
    }

    fn sample(&self, data: &[ImagePair], batch_seed: u64) -> Result<Vec<ImagePair>> {
        let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
        let size = self.config.model.crop_size;
        (0..self.config.batch_size)
            .map(|_| {
                let pair = &data[rng.random_range(0..data.len())];
                let crop_seed: u64 = rng.random();
                if self.config.augment || pair.low.shape()[..2] != [size, size] {
                    data::random_crop_augment(pair, size, crop_seed)
                } else {
                    Ok(pair.clone())
                }
            })
            .collect()
    }

    /// Runs one optimizer step on a freshly sampled batch and returns
    /// `(lr, mean loss)`.
    pub fn step(&mut self, data: &[ImagePair]) -> Result<(f64, f64)> {
        if data.is_empty() {
            return Err(Error::usage("training set is empty"));
        }
        let batch_seed = data::derive_seed(self.config.seed, self.step as u64);
        let tag = |e: Error, step: usize| match e {
            Error::Numeric(m) => Error::numeric(format!("{m} at step {step}, batch seed {batch_seed}")),
            other => other,
        };
        let batch = self.sample(data, batch_seed)?;
        let scale = 1.0 / batch.len() as f32;
        let mut total: Option<Vec<Tensor<f32>>> = None;
        let mut loss_sum = 0.0;
        for pair in &batch {
            let mut tape = Tape::new();
            let p = self.store.bind(&mut tape, true);
            let f = forward_loss(&mut tape, &p, &self.config, pair).map_err(|e| tag(e, self.step))?;
            let loss = tape.value(f.loss).data()[0] as f64;
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss {loss} at step {}, batch seed {batch_seed}",
                    self.step
                )));
            }
            loss_sum += loss;
            let mut grads = tape.backward(f.loss).map_err(|e| tag(e, self.step))?;
            let g = p.gradients(&mut grads);
            match &mut total {
                None => total = Some(g.into_iter().map(|t| t.map(|v| v * scale)).collect()),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&g) {
                        for (x, &y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y * scale;
                        }
                    }
                }
            }
        }
        let lr = self.config.schedule.lr_at(self.step);
        adam_step(&mut self.store, &total.expect("non-empty batch"), &mut self.state, lr)?;
        self.step += 1;
        Ok((lr, loss_sum / batch.len() as f64))
    }

    /// Trains for the schedule's remaining steps, calling `sink` for each log
    /// row and checkpointing as configured.
    pub fn run(
        &mut self,
        data: &[ImagePair],
        held_out: Option<&Dataset>,
        mut sink: impl FnMut(&LogRow),
    ) -> Result<Vec<LogRow>> {
        let mut rows = Vec::new();
        let total = self.config.schedule.total_steps;
        while self.step < total {
            let step = self.step;
            let (lr, loss) = self.step(data)?;
            let last = self.step == total;
            let evaluate = held_out.is_some()
                && (last || (self.config.eval_every > 0 && self.step.is_multiple_of(self.config.eval_every)));
            let (mut eval_psnr, mut eval_ssim) = (None, None);
            if evaluate {
                let summary = summarize(&evaluate_pairs(&self.store, &self.config.model, self.config.mode, held_out.unwrap())?);
                eval_psnr = Some(summary.psnr_out);
                eval_ssim = Some(summary.ssim_out);
                info!("step {} held-out PSNR {:.3} SSIM {:.4}", self.step, summary.psnr_out, summary.ssim_out);
            }
            let row = LogRow { step, lr, loss, eval_psnr, eval_ssim };
            sink(&row);
            rows.push(row);
            if let Some(path) = &self.config.checkpoint {
                if last || (self.config.checkpoint_every > 0 && self.step.is_multiple_of(self.config.checkpoint_every)) {
                    self.store.save(path)?;
                }
            }
        }
        Ok(rows)
    }
}

/// Maps an index onto `0..n` by mirror reflection (edge pixel not repeated).
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n { m } else { period - m }
}

/// Pads bottom/right by reflection so both sides are multiples of 4.
pub fn reflect_pad_to_multiple(image: &Tensor, multiple: usize) -> Result<Tensor> {
    let (h, w, c) = image.hwc()?;
    let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    if (ph, pw) == (h, w) {
        return Ok(image.clone());
    }
    let mut out = Vec::with_capacity(ph * pw * c);
    for y in 0..ph {
        let sy = reflect(y, h);
        for x in 0..pw {
            let sx = reflect(x, w);
            out.extend_from_slice(&image.data()[(sy * w + sx) * c..][..c]);
        }
    }
    Tensor::new(vec![ph, pw, c], out)
}

/// Outputs of a single inference pass.
#[derive(Clone, Debug)]
pub struct Enhancement {
    pub lit_image: Tensor,
    pub enhanced: Tensor,
}

/// Runs the framework on one image of any size (reflect-padded to a multiple
/// of 4 and cropped back). Output values are not clamped.
pub fn enhance(store: &ParameterStore<f32>, model: &ModelConfig, mode: OrfMode, image: &Tensor) -> Result<Enhancement> {
    let (h, w, _) = image.hwc()?;
    let padded = reflect_pad_to_multiple(image, 4)?;
    let mut tape = Tape::new().check_finite(false);
    let p = store.bind(&mut tape, false);
    let x = tape.constant(padded);
    let out = retinex::orf_forward(&mut tape, &p, model, x, mode)?;
    let cut = |v: Var| data::crop(tape.value(v), 0, 0, h, w);
    Ok(Enhancement { lit_image: cut(out.lit_image)?, enhanced: cut(out.enhanced)? })
}

/// Per-image metrics: the raw input and the clamped enhanced output, each
/// against the reference.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub psnr_in: f64,
    pub psnr_out: f64,
    pub ssim_in: f64,
    pub ssim_out: f64,
}

pub const METRIC_CSV_HEADER: &str = "image_id,psnr_in,psnr_out,ssim_in,ssim_out";

impl MetricRow {
    pub fn compute(id: impl Into<String>, low: &Tensor, output: &Tensor, reference: &Tensor) -> Result<Self> {
        let clamped = output.map(|v| v.clamp(0.0, 1.0));
        Ok(MetricRow {
            id: id.into(),
            psnr_in: metrics::psnr(low, reference, 1.0)?,
            psnr_out: metrics::psnr(&clamped, reference, 1.0)?,
            ssim_in: metrics::ssim(low, reference)?,
            ssim_out: metrics::ssim(&clamped, reference)?,
        })
    }

    pub fn to_csv(&self) -> String {
        format!("{},{:.6},{:.6},{:.6},{:.6}", self.id, self.psnr_in, self.psnr_out, self.ssim_in, self.ssim_out)
    }
}

pub fn evaluate_pairs(
    store: &ParameterStore<f32>,
    model: &ModelConfig,
    mode: OrfMode,
    set: &Dataset,
) -> Result<Vec<MetricRow>> {
    set.ids
        .iter()
        .zip(&set.pairs)
        .map(|(id, pair)| {
            let out = enhance(store, model, mode, &pair.low)?;
            MetricRow::compute(id.clone(), &pair.low, &out.enhanced, &pair.reference)
        })
        .collect()
}

/// Means over a metric table.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricSummary {
    pub psnr_in: f64,
    pub psnr_out: f64,
    pub ssim_in: f64,
    pub ssim_out: f64,
}

pub fn summarize(rows: &[MetricRow]) -> MetricSummary {
    let n = rows.len().max(1) as f64;
    let mean = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    MetricSummary {
        psnr_in: mean(|r| r.psnr_in),
        psnr_out: mean(|r| r.psnr_out),
        ssim_in: mean(|r| r.ssim_in),
        ssim_out: mean(|r| r.ssim_out),
    }
}

/// Renders a metric table with a trailing `mean` row.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = format!("{METRIC_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.to_csv());
    }
    let m = summarize(rows);
    let _ = writeln!(s, "mean,{:.6},{:.6},{:.6},{:.6}", m.psnr_in, m.psnr_out, m.ssim_in, m.ssim_out);
    s
}

/// Held-out result of one ablation variant.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mode: OrfMode,
    pub seed: u64,
    pub psnr: f64,
    pub ssim: f64,
    pub final_loss: f64,
    /// Set when training stopped on a numeric failure.
    pub failure: Option<String>,
}

pub const ABLATION_CSV_HEADER: &str = "mode,seed,psnr,ssim,final_loss,status";

impl AblationRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.4},{:.4},{:.6},{}",
            self.mode.name(),
            self.seed,
            self.psnr,
            self.ssim,
            self.final_loss,
            self.failure.as_deref().unwrap_or("ok")
        )
    }
}

/// Trains one variant per `(mode, seed)` from the same base configuration
/// and data, and scores each on `held_out`.
pub fn ablate_orf(
    base: &TrainConfig,
    modes: &[OrfMode],
    seeds: &[u64],
    train: &Dataset,
    held_out: &Dataset,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for &mode in modes {
            let config = TrainConfig { mode, seed, checkpoint: None, eval_every: 0, ..base.clone() };
            let mut trainer = Trainer::new(config)?;
            let mut last = f64::NAN;
            let outcome = trainer.run(&train.pairs, None, |r| last = r.loss);
            let row = match outcome {
                Ok(_) => {
                    let m = summarize(&evaluate_pairs(&trainer.store, &base.model, mode, held_out)?);
                    AblationRow { mode, seed, psnr: m.psnr_out, ssim: m.ssim_out, final_loss: last, failure: None }
                }
                Err(Error::Numeric(msg)) => AblationRow {
                    mode,
                    seed,
                    psnr: f64::NAN,
                    ssim: f64::NAN,
                    final_loss: last,
                    failure: Some(msg.replace(',', ";")),
                },
                Err(e) => return Err(e),
            };
            info!("ablation {}", row.to_csv());
            rows.push(row);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_exact() {
        let s = Schedule::default();
        assert_eq!(s.lr_at(0), 2e-4);
        assert_eq!(s.lr_at(s.total_steps), 1e-6);
        assert!((s.lr_at(s.total_steps / 2) - 1.005e-4).abs() < 1e-15);
        assert_eq!(s.lr_at(s.total_steps + 10), 1e-6);
        assert!(Schedule::new(1e-6, 2e-4, 10).is_err());
        assert!(Schedule::new(2e-4, 0.0, 10).is_err());
    }

    #[test]
    fn schedule_monotone() {
        let s = Schedule { total_steps: 97, ..Default::default() };
        for i in 0..97 {
            assert!(s.lr_at(i + 1) <= s.lr_at(i));
        }
    }

    #[test]
    fn adam_zero_grad_is_fixed_point() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("w", Tensor::from_f64_slice(vec![3], &[1.0, -2.0, 0.5]).unwrap()).unwrap();
        let before = store.clone();
        let mut st = OptimState::new(&store);
        adam_step(&mut store, &[Tensor::zeros(vec![3])], &mut st, 1e-3).unwrap();
        assert_eq!(store, before);
        assert!(st.first_moment[0].data().iter().all(|&v| v == 0.0));
        assert!(adam_step(&mut store, &[], &mut st, 1e-3).is_err());
    }

    #[test]
    fn adam_first_step_is_sign() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("w", Tensor::zeros(vec![4])).unwrap();
        let g = Tensor::from_f64_slice(vec![4], &[0.3, -2.0, 1e-2, -5e-3]).unwrap();
        let mut st = OptimState::new(&store);
        adam_step(&mut store, std::slice::from_ref(&g), &mut st, 1e-3).unwrap();
        for (p, g) in store.get("w").unwrap().data().iter().zip(g.data()) {
            assert!((p + 1e-3 * g.signum()).abs() < 1e-8, "{p}");
        }
    }

    #[test]
    fn reflect_pad_shapes() {
        let t = Tensor::from_fn(vec![5, 6, 3], |i| (i[0] * 10 + i[1]) as f32);
        let p = reflect_pad_to_multiple(&t, 4).unwrap();
        assert_eq!(p.shape(), &[8, 8, 3]);
        assert_eq!(p.get(&[5, 0, 0]), t.get(&[3, 0, 0]));
        assert_eq!(p.get(&[0, 7, 0]), t.get(&[0, 3, 0]));
        assert_eq!(data::crop(&p, 0, 0, 5, 6).unwrap(), t);
        let one = Tensor::<f32>::ones(vec![1, 1, 3]);
        assert_eq!(reflect_pad_to_multiple(&one, 4).unwrap(), Tensor::ones(vec![4, 4, 3]));
    }
}
