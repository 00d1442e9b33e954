//! Losses, metrics, the zero-velocity baseline, the optimizer loop, and
//! evaluation.

mod gradcheck;
mod report;

pub use gradcheck::{gradcheck_model, GradcheckReport};
pub use report::{render_table, ActionRow, EvalReport};

use std::sync::Once;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{
    apply_norm_updates, forward, ForwardPass, ModelConfig, ModelParams,
};
use crate::multiscale::{build_pyramid, ScalePyramid};
use crate::seed_for;
use crate::tensor::{adam_step, lr_at, AdamState, Matrix, Scalar};

/// One training/evaluation window: observed history and ground-truth future.
#[derive(Debug, Clone)]
pub struct Sample {
    pub history: Matrix<f64>,
    pub future: Matrix<f64>,
    pub action: String,
}

impl Sample {
    /// History and future concatenated along time: the reconstruction target.
    pub fn full_sequence(&self) -> Matrix<f64> {
        let (k, th) = self.history.dims();
        let tf = self.future.cols();
        Matrix::from_fn(k, th + tf, |r, c| {
            if c < th {
                self.history.get(r, c)
            } else {
                self.future.get(r, c - th)
            }
        })
    }
}

/// Replicates the last observed frame `t_future` times, giving input and
/// target sequences equal length.
pub fn pad_replicate<T: Scalar>(history: &Matrix<T>, t_future: usize) -> Result<Matrix<T>> {
    let (k, th) = history.dims();
    if th == 0 {
        return Err(Error::Data("empty history".into()));
    }
    Ok(Matrix::from_fn(k, th + t_future, |r, c| {
        history.get(r, c.min(th - 1))
    }))
}

/// Zero-velocity baseline: every future frame equals the last observed one.
pub fn zero_velocity_baseline<T: Scalar>(history: &Matrix<T>, t_future: usize) -> Result<Matrix<T>> {
    let (k, th) = history.dims();
    if th == 0 {
        return Err(Error::Data("empty history".into()));
    }
    Ok(Matrix::from_fn(k, t_future, |r, _| history.get(r, th - 1)))
}

/// Mean per-joint position error in millimeters: the mean over joints and
/// frames of the Euclidean distance between predicted and true positions.
pub fn mpjpe<T: Scalar>(pred: &Matrix<T>, gt: &Matrix<T>) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape("mpjpe", pred.dims(), gt.dims()));
    }
    if pred.rows() % 3 != 0 || pred.rows() == 0 || pred.cols() == 0 {
        return Err(Error::Data(format!(
            "mpjpe needs a non-empty (3J) x T matrix, got {:?}",
            pred.dims()
        )));
    }
    let joints = pred.rows() / 3;
    let mut total = 0.0f64;
    for t in 0..pred.cols() {
        for j in 0..joints {
            let mut d2 = 0.0f64;
            for axis in 0..3 {
                let diff = pred.get(3 * j + axis, t).as_f64() - gt.get(3 * j + axis, t).as_f64();
                d2 += diff * diff;
            }
            total += d2.sqrt();
        }
    }
    Ok(total / (joints * pred.cols()) as f64)
}

/// Which frames the training loss covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossFrames {
    /// All T frames: history reconstruction plus future.
    All,
    /// Only the predicted future frames.
    FutureOnly { t_history: usize },
}

impl LossFrames {
    fn range(self, t: usize) -> std::ops::Range<usize> {
        match self {
            LossFrames::All => 0..t,
            LossFrames::FutureOnly { t_history } => t_history.min(t)..t,
        }
    }
}

/// Per-scale loss over a batch: the mean over samples, joints, and covered
/// frames of the per-joint Euclidean distance (or its square). Also returns
/// d(loss)/d(pred) per sample for the backward pass.
pub fn scale_loss_with_grads<T: Scalar>(
    preds: &[&Matrix<T>],
    gts: &[&Matrix<T>],
    frames: LossFrames,
    squared: bool,
) -> Result<(f64, Vec<Matrix<T>>)> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::Data(format!(
            "batch mismatch: {} predictions vs {} targets",
            preds.len(),
            gts.len()
        )));
    }
    let (k, t) = preds[0].dims();
    let joints = k / 3;
    let range = frames.range(t);
    let count = preds.len() * joints * range.len();
    if count == 0 {
        return Err(Error::Data("loss over zero frames".into()));
    }
    let norm = 1.0 / count as f64;

    let mut total = 0.0f64;
    let mut grads = Vec::with_capacity(preds.len());
    for (pred, gt) in preds.iter().zip(gts) {
        if pred.dims() != (k, t) || gt.dims() != (k, t) {
            return Err(Error::shape("scale_loss", pred.dims(), gt.dims()));
        }
        let mut grad = Matrix::zeros(k, t);
        for ti in range.clone() {
            for j in 0..joints {
                let mut diff = [0.0f64; 3];
                let mut d2 = 0.0f64;
                for axis in 0..3 {
                    let d = pred.get(3 * j + axis, ti).as_f64() - gt.get(3 * j + axis, ti).as_f64();
                    diff[axis] = d;
                    d2 += d * d;
                }
                if squared {
                    total += d2;
                    for axis in 0..3 {
                        grad.set(3 * j + axis, ti, T::from_f64(2.0 * diff[axis] * norm));
                    }
                } else {
                    let dist = d2.sqrt();
                    total += dist;
                    if dist > 1e-12 {
                        for axis in 0..3 {
                            grad.set(3 * j + axis, ti, T::from_f64(diff[axis] / dist * norm));
                        }
                    }
                }
            }
        }
        grads.push(grad);
    }
    Ok((total * norm, grads))
}

/// Mean per-joint Euclidean distance at one scale (single pair, all frames).
pub fn scale_loss<T: Scalar>(pred: &Matrix<T>, gt: &Matrix<T>) -> Result<f64> {
    let (v, _) = scale_loss_with_grads(&[pred], &[gt], LossFrames::All, false)?;
    Ok(v)
}

/// Weighted sum of per-scale losses.
pub fn total_loss(per_scale: &[f64], lambdas: &[f64]) -> f64 {
    per_scale
        .iter()
        .zip(lambdas)
        .map(|(l, w)| l * w)
        .sum()
}

/// Per-scale weights after the inter-loss switch: with intermediate
/// supervision off, only scale 0 contributes.
pub fn effective_lambdas(base: &[f64], levels: usize, use_inter_loss: bool) -> Vec<f64> {
    (0..levels)
        .map(|s| {
            let w = base.get(s).copied().unwrap_or(1.0);
            if s == 0 || use_inter_loss {
                w
            } else {
                0.0
            }
        })
        .collect()
}

/// Frame index (1-based into the future segment) of a horizon in
/// milliseconds, rounding half up.
pub fn horizon_to_frame(horizon_ms: u32, fps: f64) -> usize {
    (horizon_ms as f64 * fps / 1000.0).round() as usize
}

/// Input pyramid (padded history) and target pyramid (full sequence) of one
/// sample, in the model precision.
pub fn sample_pyramids<T: Scalar>(
    sample: &Sample,
    cfg: &ModelConfig,
) -> Result<(ScalePyramid<T>, ScalePyramid<T>)> {
    let grouping = cfg.active_grouping();
    let padded = pad_replicate(&sample.history.cast::<T>(), cfg.t_future)?;
    let input = build_pyramid(&padded, &grouping)?;
    let target = build_pyramid(&sample.full_sequence().cast::<T>(), &grouping)?;
    Ok((input, target))
}

static RAYON_INIT: Once = Once::new();

/// Builds the global worker pool once, honouring the MSR_THREADS cap.
fn init_workers() {
    RAYON_INIT.call_once(|| {
        if let Ok(v) = std::env::var("MSR_THREADS") {
            if let Ok(n) = v.parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    });
}

/// Per-sample evaluation record used by the aggregation step.
struct SampleEval {
    action: String,
    per_horizon: Vec<f64>,
    per_joint: Vec<f64>,
}

/// MPJPE evaluation over a dataset: per (action, horizon) table, per-joint
/// mean errors over the future segment, and sample-weighted overall row.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    samples: &[Sample],
    horizons_ms: &[u32],
    fps: f64,
) -> Result<EvalReport> {
    init_workers();
    if samples.is_empty() {
        return Err(Error::Data("evaluate on an empty dataset".into()));
    }
    let mut frames = Vec::with_capacity(horizons_ms.len());
    for &h in horizons_ms {
        let f = horizon_to_frame(h, fps);
        if f == 0 || f > cfg.t_future {
            return Err(Error::Config(format!(
                "horizon {h} ms maps to future frame {f}, outside 1..={}",
                cfg.t_future
            )));
        }
        frames.push(f);
    }

    let chunks: Vec<&[Sample]> = samples.chunks(32).collect();
    let evals: Vec<Result<Vec<SampleEval>>> = chunks
        .par_iter()
        .map(|chunk| evaluate_chunk(params, cfg, chunk, &frames))
        .collect();

    let joints = samples[0].history.rows() / 3;
    let mut per_joint_sum = vec![0.0f64; joints];
    let mut overall_sum = vec![0.0f64; frames.len()];
    let mut rows: Vec<ActionRow> = Vec::new();
    let mut total = 0usize;
    for chunk in evals {
        for e in chunk? {
            total += 1;
            for (acc, v) in overall_sum.iter_mut().zip(&e.per_horizon) {
                *acc += v;
            }
            for (acc, v) in per_joint_sum.iter_mut().zip(&e.per_joint) {
                *acc += v;
            }
            match rows.iter_mut().find(|r| r.action == e.action) {
                Some(row) => {
                    row.count += 1;
                    for (acc, v) in row.mpjpe.iter_mut().zip(&e.per_horizon) {
                        *acc += v;
                    }
                }
                None => rows.push(ActionRow {
                    action: e.action,
                    count: 1,
                    mpjpe: e.per_horizon,
                }),
            }
        }
    }
    for row in &mut rows {
        for v in &mut row.mpjpe {
            *v /= row.count as f64;
        }
    }
    rows.sort_by(|a, b| a.action.cmp(&b.action));
    let overall: Vec<f64> = overall_sum.iter().map(|s| s / total as f64).collect();
    let per_joint: Vec<f64> = per_joint_sum.iter().map(|s| s / total as f64).collect();
    Ok(EvalReport {
        horizons_ms: horizons_ms.to_vec(),
        rows,
        overall,
        per_joint,
        sample_count: total,
    })
}

fn evaluate_chunk<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    chunk: &[Sample],
    frames: &[usize],
) -> Result<Vec<SampleEval>> {
    let mut pyramids = Vec::with_capacity(chunk.len());
    for s in chunk {
        pyramids.push(sample_pyramids::<T>(s, cfg)?.0);
    }
    let pass = forward(params, cfg, &pyramids, Mode::Eval, None, false)?;
    let outputs = pass.outputs();

    let mut out = Vec::with_capacity(chunk.len());
    for (sample, output) in chunk.iter().zip(&outputs) {
        let pred = &output.scales[0];
        let gt = &sample.future;
        let joints = gt.rows() / 3;
        let th = cfg.t_history;

        let joint_dist = |future_frame: usize, j: usize| -> f64 {
            let mut d2 = 0.0;
            for axis in 0..3 {
                let p = pred.get(3 * j + axis, th + future_frame).as_f64();
                let g = gt.get(3 * j + axis, future_frame);
                d2 += (p - g) * (p - g);
            }
            d2.sqrt()
        };

        let per_horizon: Vec<f64> = frames
            .iter()
            .map(|&f| (0..joints).map(|j| joint_dist(f - 1, j)).sum::<f64>() / joints as f64)
            .collect();
        let per_joint: Vec<f64> = (0..joints)
            .map(|j| {
                (0..cfg.t_future).map(|f| joint_dist(f, j)).sum::<f64>() / cfg.t_future as f64
            })
            .collect();
        out.push(SampleEval {
            action: sample.action.clone(),
            per_horizon,
            per_joint,
        });
    }
    Ok(out)
}

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub lambdas: Vec<f64>,
    pub loss_frames: LossFrames,
    pub squared_loss: bool,
    pub norm_momentum: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 200,
            batch_size: 16,
            seed: 1,
            base_lr: 2e-4,
            lr_decay: 0.98,
            lr_decay_every: 2,
            lambdas: vec![1.0; 4],
            loss_frames: LossFrames::All,
            squared_loss: false,
            norm_momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mpjpe: f64,
}

#[derive(Debug)]
pub struct FitResult<T> {
    /// Parameters of the best validation epoch.
    pub best: ModelParams<T>,
    /// Parameters after the final epoch.
    pub last: ModelParams<T>,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

/// Mini-batch training with Adam, the stepped LR schedule, per-scale
/// supervision, and best-validation retention.
pub fn fit<T: Scalar>(
    params: ModelParams<T>,
    cfg: &ModelConfig,
    train: &[Sample],
    val: &[Sample],
    opts: &TrainOptions,
) -> Result<FitResult<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let lambdas = effective_lambdas(&opts.lambdas, cfg.levels, cfg.use_inter_loss);

    // Pyramids are deterministic per sample; build them once.
    let train_pyr: Vec<(ScalePyramid<T>, ScalePyramid<T>)> = train
        .iter()
        .map(|s| sample_pyramids::<T>(s, cfg))
        .collect::<Result<_>>()?;
    let val_pyr: Vec<(ScalePyramid<T>, ScalePyramid<T>)> = val
        .iter()
        .map(|s| sample_pyramids::<T>(s, cfg))
        .collect::<Result<_>>()?;

    let mut params = params;
    let mut adam: Vec<Option<AdamState<T>>> = params.entries().iter().map(|_| None).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed_for(opts.seed, "shuffle"));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed_for(opts.seed, "dropout"));

    let mut curve = Vec::with_capacity(opts.epochs);
    let mut best: Option<(f64, usize, ModelParams<T>)> = None;

    for epoch in 0..opts.epochs {
        let lr = lr_at(opts.base_lr, opts.lr_decay, opts.lr_decay_every, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for batch in order.chunks(opts.batch_size) {
            let inputs: Vec<ScalePyramid<T>> =
                batch.iter().map(|&i| train_pyr[i].0.clone()).collect();
            let pass = forward(
                &params,
                cfg,
                &inputs,
                Mode::Train,
                Some(&mut dropout_rng),
                false,
            )?;
            let outputs = pass.outputs();

            let (loss, seeds) = batch_loss_and_seeds(
                &outputs,
                batch.iter().map(|&i| &train_pyr[i].1),
                &lambdas,
                opts.loss_frames,
                opts.squared_loss,
            )?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: diagnose_non_finite(&params, &pass),
                });
            }
            epoch_loss += loss;
            batches += 1;

            pass.backward(&mut params, &seeds)?;
            apply_norm_updates(&mut params, &pass.norm_updates, opts.norm_momentum);
            let lr_t = T::from_f64(lr);
            for (entry, state) in params.entries_mut().iter_mut().zip(adam.iter_mut()) {
                if !entry.learnable || !entry.value.has_grad() {
                    entry.value.clear_grad();
                    continue;
                }
                let st = state.get_or_insert_with(|| AdamState::new(entry.value.len()));
                adam_step(&mut entry.value, st, lr_t)?;
            }
        }

        let train_loss = epoch_loss / batches as f64;
        let (val_loss, val_mpjpe) = validate(&params, cfg, val, &val_pyr, &lambdas, opts)?;
        log::info!(
            "epoch {epoch}: lr {lr:.3e} train {train_loss:.4} val {val_loss:.4} val-mpjpe {val_mpjpe:.3}"
        );
        curve.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_mpjpe,
        });
        if best.as_ref().map_or(true, |(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, params.clone()));
        }
    }

    let (best_params, best_epoch) = match best {
        Some((_, e, p)) => (p, Some(e)),
        None => (params.clone(), None),
    };
    Ok(FitResult {
        best: best_params,
        last: params,
        curve,
        best_epoch,
    })
}

/// Total weighted loss over a forward batch plus the per-output seeds.
fn batch_loss_and_seeds<'a, T: Scalar>(
    outputs: &[crate::model::MultiScaleOutput<T>],
    targets: impl Iterator<Item = &'a ScalePyramid<T>>,
    lambdas: &[f64],
    frames: LossFrames,
    squared: bool,
) -> Result<(f64, Vec<Vec<Option<Matrix<T>>>>)> {
    let targets: Vec<&ScalePyramid<T>> = targets.collect();
    let levels = lambdas.len();
    let mut seeds: Vec<Vec<Option<Matrix<T>>>> = outputs
        .iter()
        .map(|o| vec![None; o.scales.len()])
        .collect();
    let mut total = 0.0f64;
    for s in 0..levels {
        let preds: Vec<&Matrix<T>> = outputs.iter().map(|o| &o.scales[s]).collect();
        let gts: Vec<&Matrix<T>> = targets.iter().map(|p| p.scale(s)).collect();
        let (loss, grads) = scale_loss_with_grads(&preds, &gts, frames, squared)?;
        total += lambdas[s] * loss;
        if lambdas[s] != 0.0 {
            let w = T::from_f64(lambdas[s]);
            for (seed_row, g) in seeds.iter_mut().zip(grads) {
                seed_row[s] = Some(g.scale(w));
            }
        }
    }
    Ok((total, seeds))
}

fn validate<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    val: &[Sample],
    val_pyr: &[(ScalePyramid<T>, ScalePyramid<T>)],
    lambdas: &[f64],
    opts: &TrainOptions,
) -> Result<(f64, f64)> {
    if val.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut loss_sum = 0.0f64;
    let mut mpjpe_sum = 0.0f64;
    let mut batches = 0usize;
    for (chunk, samples) in val_pyr.chunks(32).zip(val.chunks(32)) {
        let inputs: Vec<ScalePyramid<T>> = chunk.iter().map(|(i, _)| i.clone()).collect();
        let pass = forward(params, cfg, &inputs, Mode::Eval, None, false)?;
        let outputs = pass.outputs();
        let (loss, _) = batch_loss_and_seeds(
            &outputs,
            chunk.iter().map(|(_, t)| t),
            lambdas,
            opts.loss_frames,
            opts.squared_loss,
        )?;
        loss_sum += loss;
        batches += 1;
        for (out, sample) in outputs.iter().zip(samples) {
            let pred = future_segment(&out.scales[0], cfg.t_history);
            mpjpe_sum += mpjpe(&pred, &sample.future.cast::<T>())?;
        }
    }
    Ok((loss_sum / batches as f64, mpjpe_sum / val.len() as f64))
}

/// The future-frame columns of a full-length prediction.
pub fn future_segment<T: Scalar>(full: &Matrix<T>, t_history: usize) -> Matrix<T> {
    Matrix::from_fn(full.rows(), full.cols() - t_history, |r, c| {
        full.get(r, t_history + c)
    })
}

/// Names the first non-finite tensor for the NaN-abort diagnostic.
fn diagnose_non_finite<T: Scalar>(params: &ModelParams<T>, pass: &ForwardPass<T>) -> String {
    for e in params.entries() {
        if !e.value.all_finite() {
            return format!("parameter {}", e.path);
        }
    }
    for (n, out) in pass.outputs().iter().enumerate() {
        for (s, m) in out.scales.iter().enumerate() {
            if !m.all_finite() {
                return format!("prediction of sample {n} at scale {s}");
            }
        }
    }
    "loss (inputs and parameters are finite)".into()
}
