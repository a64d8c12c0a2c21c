//! Training and evaluation loops.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{batches, read_dataset, SequenceBatch};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::model::{save_checkpoint, Model, ModelConfig};
use crate::ops::{mse, Mode};
use crate::optim::{Adam, AdamConfig, ScheduleKind, ScheduleSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub max_lr: f64,
    pub final_div_factor: f64,
    pub batch_size: usize,
    pub schedule: ScheduleKind,
    pub epochs: usize,
    pub seed: u64,
    /// Validate every this many epochs (and always after the last one).
    pub eval_every: usize,
    /// Reshuffle training sequences each epoch.
    pub shuffle: bool,
    pub weight_decay: f64,
    /// Fraction of sequences held out for validation when no separate
    /// validation file is given; taken from the end of the dataset.
    pub val_fraction: f64,
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    /// Best-validation checkpoint.
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            max_lr: 0.003,
            final_div_factor: 1e4,
            batch_size: 16,
            schedule: ScheduleKind::OneCycle,
            epochs: 200,
            seed: 0,
            eval_every: 1,
            shuffle: true,
            weight_decay: 0.0,
            val_fraction: 0.2,
            train_data: None,
            val_data: None,
            checkpoint: None,
            log: None,
        }
    }
}

impl TrainConfig {
    pub fn schedule_spec(&self, total_steps: usize) -> ScheduleSpec {
        let base = ScheduleSpec::one_cycle(self.max_lr, total_steps).with_final_div_factor(self.final_div_factor);
        match self.schedule {
            ScheduleKind::OneCycle => base,
            ScheduleKind::Cosine => ScheduleSpec {
                kind: ScheduleKind::Cosine,
                min_lr: base.final_lr(),
                ..base
            },
            ScheduleKind::Constant => ScheduleSpec {
                kind: ScheduleKind::Constant,
                ..base
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-pixel training loss over the epoch's steps.
    pub train_mse: f64,
    /// Per-pixel validation MSE, when validated this epoch.
    pub val_mse_pixel: Option<f64>,
    /// Frame-sum validation MSE, when validated this epoch.
    pub val_mse: Option<f64>,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub wall_clock_s: f64,
    /// Standard deviation of consecutive-epoch training-loss differences.
    pub dispersion: Option<f64>,
    pub best_val_mse: Option<f64>,
}

impl TrainLog {
    pub fn initial_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    /// Line-delimited JSON: one object per step, per epoch, then a summary.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        let line = |w: &mut BufWriter<fs::File>, kind: &str, v: serde_json::Value| -> Result<()> {
            let mut obj = serde_json::json!({ "kind": kind });
            if let (Some(o), serde_json::Value::Object(fields)) = (obj.as_object_mut(), v) {
                o.extend(fields);
            }
            writeln!(w, "{obj}")?;
            Ok(())
        };
        for s in &self.steps {
            line(&mut w, "step", serde_json::to_value(s).expect("plain data"))?;
        }
        for e in &self.epochs {
            line(&mut w, "epoch", serde_json::to_value(e).expect("plain data"))?;
        }
        line(
            &mut w,
            "summary",
            serde_json::json!({
                "wall_clock_s": self.wall_clock_s,
                "dispersion": self.dispersion,
                "best_val_mse": self.best_val_mse,
                "steps": self.steps.len(),
            }),
        )?;
        w.flush()?;
        Ok(())
    }
}

/// Standard deviation of consecutive differences, or `None` for fewer than
/// two differences.
pub fn dispersion(losses: &[f64]) -> Option<f64> {
    if losses.len() < 3 {
        return None;
    }
    let d: Vec<f64> = losses.windows(2).map(|w| w[1] - w[0]).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64;
    Some(var.sqrt())
}

/// Checks that `ds` carries the frames `config` consumes and produces.
pub fn check_compatible(config: &ModelConfig, ds: &SequenceBatch) -> Result<()> {
    let [c, h, w] = ds.frame_dims();
    let want = [config.t_in, config.t_out, config.channels, config.height, config.width];
    let got = [ds.t_past(), ds.t_future(), c, h, w];
    for ((name, a), b) in ["t_in", "t_out", "channels", "height", "width"].iter().zip(want).zip(got) {
        if a != b {
            return Err(Error::ConfigMismatch {
                field: name,
                expected: a,
                found: b,
            });
        }
    }
    Ok(())
}

/// Reads the configured dataset(s) and trains.
pub fn train(cfg: &TrainConfig) -> Result<(Model<f32>, TrainLog)> {
    let path = cfg
        .train_data
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("no training dataset given".into()))?;
    let ds = read_dataset(path)?;
    let (train_set, val_set) = match &cfg.val_data {
        Some(p) => (ds, Some(read_dataset(p)?)),
        None => validation_split(&ds, cfg.val_fraction)?,
    };
    train_on(cfg, &train_set, val_set.as_ref())
}

/// Holds out the last `fraction` of sequences (none if that rounds to zero).
pub fn validation_split(ds: &SequenceBatch, fraction: f64) -> Result<(SequenceBatch, Option<SequenceBatch>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("validation fraction {fraction} not in [0, 1)")));
    }
    let n_val = (ds.len() as f64 * fraction).round() as usize;
    if n_val == ds.len() {
        return Err(Error::InvalidArgument(format!(
            "holding out {n_val} of {} sequences leaves nothing to train on",
            ds.len()
        )));
    }
    let n_train = ds.len() - n_val;
    let train = ds.select(&(0..n_train).collect::<Vec<_>>())?;
    let val = (n_val > 0)
        .then(|| ds.select(&(n_train..ds.len()).collect::<Vec<_>>()))
        .transpose()?;
    Ok((train, val))
}

/// Trains on in-memory data, validating on `val` when given.
pub fn train_on(
    cfg: &TrainConfig,
    train: &SequenceBatch,
    val: Option<&SequenceBatch>,
) -> Result<(Model<f32>, TrainLog)> {
    check_compatible(&cfg.model, train)?;
    if let Some(v) = val {
        check_compatible(&cfg.model, v)?;
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let start = Instant::now();
    let mut model = Model::<f32>::build(cfg.model, cfg.seed)?;
    let shapes: Vec<Vec<usize>> = model.named_parameters().iter().map(|(_, t)| t.dims().to_vec()).collect();
    let mut adam = Adam::<f32>::new(
        shapes.iter().map(Vec::as_slice),
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
    )?;
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = cfg.schedule_spec(cfg.epochs * steps_per_epoch);
    let mut log = TrainLog::default();
    let mut best: Option<f64> = None;
    let mut step = 0;

    if cfg.epochs == 0 {
        if let Some(p) = &cfg.checkpoint {
            save_checkpoint(&model, p)?;
        }
    }

    for epoch in 0..cfg.epochs {
        let shuffle = cfg.shuffle.then(|| cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64));
        let mut epoch_loss = 0.0;
        let mut n_batches = 0;
        for batch in batches(train, cfg.batch_size, shuffle) {
            let lr = schedule.lr_at(step)?;
            let loss = train_step(&mut model, &mut adam, &batch, lr)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, lr });
            }
            log.steps.push(StepRecord { step, epoch, loss, lr });
            epoch_loss += loss;
            n_batches += 1;
            step += 1;
        }
        let train_mse = epoch_loss / n_batches.max(1) as f64;

        let due = (epoch + 1) % cfg.eval_every.max(1) == 0 || epoch + 1 == cfg.epochs;
        let (mut val_mse_pixel, mut val_mse) = (None, None);
        if let Some(val) = val.filter(|_| due) {
            let r = evaluate_model(&model, val, cfg.batch_size)?;
            val_mse_pixel = Some(r.mse_pixel);
            val_mse = Some(r.mse);
            if best.is_none_or(|b| r.mse < b) {
                best = Some(r.mse);
                if let Some(p) = &cfg.checkpoint {
                    save_checkpoint(&model, p)?;
                }
            }
        }
        info!(
            "epoch {epoch}: train loss {train_mse:.6}{}",
            val_mse.map(|v| format!(", val mse {v:.4}")).unwrap_or_default()
        );
        log.epochs.push(EpochRecord {
            epoch,
            train_mse,
            val_mse_pixel,
            val_mse,
            elapsed_s: start.elapsed().as_secs_f64(),
        });
    }

    // without validation data the last state is the one kept
    if val.is_none() && cfg.epochs > 0 {
        if let Some(p) = &cfg.checkpoint {
            save_checkpoint(&model, p)?;
        }
    }
    let epoch_losses: Vec<f64> = log.epochs.iter().map(|e| e.train_mse).collect();
    log.dispersion = dispersion(&epoch_losses);
    log.best_val_mse = best;
    log.wall_clock_s = start.elapsed().as_secs_f64();
    if let Some(p) = &cfg.log {
        log.write_jsonl(p)?;
    }
    Ok((model, log))
}

/// One forward/backward/update on `batch`; returns the per-pixel loss.
pub fn train_step(model: &mut Model<f32>, adam: &mut Adam<f32>, batch: &SequenceBatch, lr: f64) -> Result<f64> {
    let tape = Tape::<f32>::new();
    let x = tape.constant(batch.past()?);
    let (y, params) = model.forward(&x, Mode::Train)?;
    let loss = mse(&y, &batch.future()?)?;
    let value = loss.value().item()? as f64;
    if !value.is_finite() {
        return Ok(value);
    }
    loss.backward()?;
    let grads: Vec<Tensor<f32>> = params.iter().map(|p| p.grad_or_zeros()).collect();
    let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
    adam.step(&mut model.parameters_mut(), &grad_refs, lr)?;
    Ok(value)
}

/// Concatenates per-batch predictions of `predictor` over `ds`.
pub fn predict_all(
    ds: &SequenceBatch,
    batch_size: usize,
    mut predictor: impl FnMut(&Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<Tensor<f32>> {
    let [c, h, w] = ds.frame_dims();
    let mut out = Vec::with_capacity(ds.len() * ds.t_future() * c * h * w);
    for b in batches(ds, batch_size, None) {
        let y = predictor(&b.past()?)?;
        out.extend_from_slice(y.data());
    }
    Tensor::from_vec(&[ds.len(), ds.t_future(), c, h, w], out)
}

/// Eval-mode metrics over `ds`. Does not touch the model.
pub fn evaluate_model(model: &Model<f32>, ds: &SequenceBatch, batch_size: usize) -> Result<MetricsReport> {
    check_compatible(model.config(), ds)?;
    let pred = predict_all(ds, batch_size, |x| model.predict(x))?;
    metrics::evaluate(&pred, &ds.future()?)
}

/// Repeats the last past frame `t_out` times.
pub fn copy_last_frame(past: &Tensor<f32>, t_out: usize) -> Result<Tensor<f32>> {
    let d = past.dims();
    if d.len() != 5 || d[1] == 0 {
        return Err(Error::InvalidShape(d.to_vec(), "expected [B, T, C, H, W] with T ≥ 1"));
    }
    let frame = d[2] * d[3] * d[4];
    let mut out = Vec::with_capacity(d[0] * t_out * frame);
    for seq in past.data().chunks_exact(d[1] * frame) {
        let last = &seq[(d[1] - 1) * frame..];
        for _ in 0..t_out {
            out.extend_from_slice(last);
        }
    }
    Tensor::from_vec(&[d[0], t_out, d[2], d[3], d[4]], out)
}

/// Metrics of the copy-last-frame predictor, through the same path as
/// [`evaluate_model`].
pub fn evaluate_baseline(ds: &SequenceBatch, batch_size: usize) -> Result<MetricsReport> {
    let t_out = ds.t_future();
    let pred = predict_all(ds, batch_size, |x| copy_last_frame(x, t_out))?;
    metrics::evaluate(&pred, &ds.future()?)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes one frame `[C, H, W]` as binary PGM (C ≠ 3, channels tiled
/// side by side) or PPM (C = 3).
pub fn write_frame_image(frame: &[f32], c: usize, h: usize, w: usize, path: &Path) -> Result<()> {
    let plane = h * w;
    let mut bytes;
    if c == 3 {
        bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
        for i in 0..plane {
            for ch in 0..3 {
                bytes.push(quantize(frame[ch * plane + i]));
            }
        }
    } else {
        bytes = format!("P5\n{} {h}\n255\n", w * c).into_bytes();
        for y in 0..h {
            for ch in 0..c {
                bytes.extend(frame[ch * plane + y * w..ch * plane + (y + 1) * w].iter().map(|&v| quantize(v)));
            }
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Predicts from `past` `[B, T, C, H, W]` and writes one image per
/// (sequence, frame) into `dir`, plus |target − prediction| images when
/// targets are given. Returns the written paths.
pub fn predict_dump(
    model: &Model<f32>,
    past: &Tensor<f32>,
    targets: Option<&Tensor<f32>>,
    dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let pred = model.predict(past)?;
    if let Some(t) = targets {
        if t.dims() != pred.dims() {
            return Err(Error::ShapeMismatch {
                op: "predict_dump targets",
                lhs: t.dims().to_vec(),
                rhs: pred.dims().to_vec(),
            });
        }
    }
    let [b, t_out, c, h, w]: [usize; 5] = pred.dims().try_into().unwrap();
    let frame = c * h * w;
    let ext = if c == 3 { "ppm" } else { "pgm" };
    let mut written = Vec::new();
    for s in 0..b {
        for t in 0..t_out {
            let off = (s * t_out + t) * frame;
            let p = &pred.data()[off..off + frame];
            let path = dir.join(format!("pred_s{s:03}_t{t:02}.{ext}"));
            write_frame_image(p, c, h, w, &path)?;
            written.push(path);
            if let Some(target) = targets {
                let diff: Vec<f32> = target.data()[off..off + frame]
                    .iter()
                    .zip(p)
                    .map(|(a, b)| (a - b).abs())
                    .collect();
                let path = dir.join(format!("diff_s{s:03}_t{t:02}.{ext}"));
                write_frame_image(&diff, c, h, w, &path)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
