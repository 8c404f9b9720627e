//! End-to-end optimization: RMSProp updates, the early-stopped epoch loop,
//! checkpoint persistence, and the evaluation / transcription entry points.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint;
use crate::config::{DecodeMode, RunConfig};
use crate::ctc::{ctc_loss_from_dist, decode_beam, decode_greedy, CtcDistribution, LabelSeq};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::metrics::EvalReport;
use crate::model::{
    forward_batch, loss_and_grads, update_batch_norm_stats, ModelConfig, ModelParams,
};
use crate::pipeline::{preprocess, Charset, DatasetBundle, RawImage};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// RMSProp state: one squared-gradient accumulator per parameter tensor.
pub struct OptimizerState {
    pub acc: ModelParams,
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, learning_rate: f64, decay: f64, epsilon: f64) -> Result<Self> {
        if learning_rate <= 0.0 {
            return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0 < decay && decay < 1.0) {
            return Err(Error::Config(format!("decay must lie in (0,1), got {decay}")));
        }
        Ok(OptimizerState {
            acc: params.zeros_like(),
            learning_rate,
            decay,
            epsilon,
            step: 0,
        })
    }
}

/// One RMSProp update:
/// `acc ← ρ·acc + (1−ρ)·g²; param ← param − lr·g / (√acc + ε)`.
/// Non-finite gradients abort with the offending tensor named; `clip_norm`
/// (when positive) rescales the whole gradient to that global norm first.
pub fn rmsprop_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    clip_norm: f64,
) -> Result<()> {
    let named_grads = grads.named();
    for (name, g) in &named_grads {
        if !ModelParams::is_trainable(name) {
            continue;
        }
        if !g.all_finite() {
            return Err(Error::Diverged(format!("non-finite gradient in {name}")));
        }
    }
    let mut scale = 1.0;
    if clip_norm > 0.0 {
        let sq: f64 = named_grads
            .iter()
            .filter(|(n, _)| ModelParams::is_trainable(n))
            .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum();
        let norm = sq.sqrt();
        if norm > clip_norm {
            scale = clip_norm / norm;
        }
    }
    let rho = state.decay;
    let lr = state.learning_rate;
    let eps = state.epsilon;
    for (((name, p), (gn, g)), (an, a)) in params
        .named_mut()
        .into_iter()
        .zip(named_grads)
        .zip(state.acc.named_mut())
    {
        debug_assert!(name == gn && name == an);
        if !ModelParams::is_trainable(&name) {
            continue;
        }
        for (i, pv) in p.data_mut().iter_mut().enumerate() {
            let gv = g.data()[i] * scale;
            let av = &mut a.data_mut()[i];
            *av = rho * *av + (1.0 - rho) * gv * gv;
            *pv -= lr * gv / (av.sqrt() + eps);
        }
    }
    state.step += 1;
    Ok(())
}

// ---------------------------------------------------------------------------
// Early stopping and the log
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EarlyStopState {
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    pub patience: usize,
}

impl EarlyStopState {
    pub fn new(patience: usize) -> Self {
        EarlyStopState {
            best_val_loss: f64::INFINITY,
            best_epoch: 0,
            epochs_since_improvement: 0,
            patience,
        }
    }

    /// Returns true when this epoch improved the best validation loss.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best_val_loss {
            self.best_val_loss = val_loss;
            self.best_epoch = epoch;
            self.epochs_since_improvement = 0;
            true
        } else {
            self.epochs_since_improvement += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.epochs_since_improvement >= self.patience
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub seed: u64,
    pub entries: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut out = format!("# seed={}\nepoch\ttrain_loss\tval_loss\tseconds\n", self.seed);
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.3}\n",
                e.epoch, e.train_loss, e.val_loss, e.seconds
            ));
        }
        out
    }

    pub fn parse_tsv(text: &str) -> Result<TrainLog> {
        let mut log = TrainLog::default();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# seed=") {
                log.seed = rest.trim().parse().map_err(|_| {
                    Error::Format { path: "<train log>".into(), msg: format!("bad seed line {line:?}") }
                })?;
                continue;
            }
            if line.starts_with("epoch\t") || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::Format {
                    path: "<train log>".into(),
                    msg: format!("expected 4 columns, got {line:?}"),
                });
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::Format {
                    path: "<train log>".into(),
                    msg: format!("bad number {s:?}"),
                })
            };
            log.entries.push(EpochRecord {
                epoch: parse(cols[0])? as usize,
                train_loss: parse(cols[1])?,
                val_loss: parse(cols[2])?,
                seconds: parse(cols[3])?,
            });
        }
        Ok(log)
    }
}

// ---------------------------------------------------------------------------
// Checkpoint packaging (parameters + charset + progress + optimizer)
// ---------------------------------------------------------------------------

pub struct Checkpoint {
    pub params: ModelParams,
    pub charset: Charset,
    pub epoch: usize,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub optimizer: Option<(u64, ModelParams)>,
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    charset: &Charset,
    epoch: usize,
    best_val_loss: f64,
    best_epoch: usize,
    optimizer: Option<&OptimizerState>,
) -> Result<()> {
    let charset_codes = Tensor::from_parts(
        &[charset.len()],
        charset.symbols().iter().map(|&c| c as u32 as f64).collect(),
    );
    let epoch_t = Tensor::scalar(epoch as f64);
    let best_t = Tensor::scalar(if best_val_loss.is_finite() { best_val_loss } else { f64::MAX });
    let best_epoch_t = Tensor::scalar(best_epoch as f64);
    let mut tensors: Vec<(String, &Tensor)> = params.named();
    tensors.push(("meta.charset".into(), &charset_codes));
    tensors.push(("meta.epoch".into(), &epoch_t));
    tensors.push(("meta.best_val_loss".into(), &best_t));
    tensors.push(("meta.best_epoch".into(), &best_epoch_t));
    let step_t;
    let acc_named;
    let mut opt_named: Vec<(String, &Tensor)> = Vec::new();
    if let Some(opt) = optimizer {
        step_t = Tensor::scalar(opt.step as f64);
        opt_named.push(("opt.step".into(), &step_t));
        acc_named = opt.acc.named();
        for (name, t) in &acc_named {
            if ModelParams::is_trainable(name) {
                opt_named.push((format!("opt.acc.{name}"), t));
            }
        }
    }
    tensors.extend(opt_named);
    checkpoint::save_tensors(path, &tensors)
}

pub fn load_checkpoint(path: &Path, run: &RunConfig) -> Result<Checkpoint> {
    let tensors = checkpoint::load_tensors(path)?;
    let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);
    let charset_codes = find("meta.charset")
        .ok_or_else(|| Error::Mismatch(format!("{}: missing meta.charset", path.display())))?;
    let symbols: Vec<char> = charset_codes
        .data()
        .iter()
        .map(|&v| {
            char::from_u32(v as u32).ok_or_else(|| {
                Error::Format { path: path.display().to_string(), msg: format!("bad charset codepoint {v}") }
            })
        })
        .collect::<Result<_>>()?;
    let charset = Charset::new(symbols)?;
    let cfg = ModelConfig::from_run(run, charset.len())?;
    let params = ModelParams::from_named(&cfg, &tensors)?;
    let scalar = |name: &str| find(name).map(|t| t.data()[0]);
    let epoch = scalar("meta.epoch").unwrap_or(0.0) as usize;
    let best_val_loss = scalar("meta.best_val_loss").unwrap_or(f64::MAX);
    let best_epoch = scalar("meta.best_epoch").unwrap_or(0.0) as usize;

    let optimizer = if let Some(step) = scalar("opt.step") {
        let mut acc = params.zeros_like();
        for (name, slot) in acc.named_mut() {
            if !ModelParams::is_trainable(&name) {
                continue;
            }
            let t = find(&format!("opt.acc.{name}")).ok_or_else(|| {
                Error::Mismatch(format!("{}: missing optimizer tensor for {name}", path.display()))
            })?;
            *slot = t.clone();
        }
        Some((step as u64, acc))
    } else {
        None
    };
    Ok(Checkpoint {
        params,
        charset,
        epoch,
        best_val_loss: if best_val_loss == f64::MAX { f64::INFINITY } else { best_val_loss },
        best_epoch,
        optimizer,
    })
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

pub struct TrainOutcome {
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub log_path: PathBuf,
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed.wrapping_add(salt.wrapping_mul(0x9E3779B97F4A7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn bundle_tensors(bundle: &DatasetBundle, idx: &[usize], invert: bool) -> Vec<Tensor> {
    idx.iter()
        .map(|&i| bundle.samples[i].image.to_tensor(invert))
        .collect()
}

fn check_feasibility(bundle: &DatasetBundle, time_steps: usize) -> Result<()> {
    for s in &bundle.samples {
        let needed = s.label.len() + s.label.adjacent_repeats();
        if needed > time_steps {
            return Err(Error::Usage(format!(
                "sample {:?}: label needs {needed} frames but the encoder produces {time_steps}",
                s.id
            )));
        }
    }
    Ok(())
}

/// Mean validation CTC loss in infer mode, chunked at the batch size.
fn validation_loss(
    params: &ModelParams,
    cfg: &ModelConfig,
    bundle: &DatasetBundle,
    invert: bool,
    batch_size: usize,
) -> Result<f64> {
    let n = bundle.samples.len();
    let mut total = 0.0;
    let mut idx: Vec<usize> = (0..n).collect();
    while !idx.is_empty() {
        let take: Vec<usize> = idx.drain(..batch_size.min(idx.len())).collect();
        let images = bundle_tensors(bundle, &take, invert);
        let (logits, _) = forward_batch(params, cfg, &images, Mode::Infer, 0)?;
        let losses: Vec<Result<f64>> = logits
            .par_iter()
            .zip(take.par_iter())
            .map(|(l, &i)| {
                let dist = CtcDistribution::from_logits(l.tensor())?;
                ctc_loss_from_dist(&dist, &bundle.samples[i].label)
            })
            .collect();
        for l in losses {
            total += l?;
        }
    }
    Ok(total / n as f64)
}

/// The paper's protocol: shuffled mini-batches under RMSProp, per-epoch
/// validation loss, best-checkpoint keeping, early stopping on patience.
pub fn train(
    run: &RunConfig,
    train_bundle: &DatasetBundle,
    valid_bundle: &DatasetBundle,
    out_dir: &Path,
    resume: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if train_bundle.samples.is_empty() || valid_bundle.samples.is_empty() {
        return Err(Error::Usage("training and validation bundles must be non-empty".into()));
    }
    if train_bundle.manifest.charset_hash != valid_bundle.manifest.charset_hash {
        return Err(Error::Mismatch(format!(
            "charset hash differs between train ({}) and valid ({})",
            train_bundle.manifest.charset_hash, valid_bundle.manifest.charset_hash
        )));
    }
    let charset = train_bundle.charset()?;
    let cfg = ModelConfig::from_run(run, charset.len())?;
    let time_steps = cfg.time_steps();
    check_feasibility(train_bundle, time_steps)?;
    check_feasibility(valid_bundle, time_steps)?;

    let (mut params, mut opt, start_epoch, mut stopper) = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path, run)?;
            if ckpt.charset.hash_hex() != charset.hash_hex() {
                return Err(Error::Mismatch(format!(
                    "checkpoint charset {} does not match bundle charset {}",
                    ckpt.charset.hash_hex(),
                    charset.hash_hex()
                )));
            }
            let mut opt = OptimizerState::new(
                &ckpt.params,
                run.learning_rate,
                run.rmsprop_decay,
                run.rmsprop_epsilon,
            )?;
            if let Some((step, acc)) = ckpt.optimizer {
                opt.step = step;
                opt.acc = acc;
            }
            let mut stopper = EarlyStopState::new(run.patience);
            stopper.best_val_loss = ckpt.best_val_loss;
            stopper.best_epoch = ckpt.best_epoch;
            stopper.epochs_since_improvement = ckpt.epoch.saturating_sub(ckpt.best_epoch);
            (ckpt.params, opt, ckpt.epoch + 1, stopper)
        }
        None => {
            let params = ModelParams::init(&cfg, run.seed)?;
            let opt = OptimizerState::new(
                &params,
                run.learning_rate,
                run.rmsprop_decay,
                run.rmsprop_epsilon,
            )?;
            (params, opt, 1, EarlyStopState::new(run.patience))
        }
    };

    std::fs::create_dir_all(out_dir)?;
    let best_path = out_dir.join("best.htrf");
    let last_path = out_dir.join("last.htrf");
    let log_path = out_dir.join("train_log.tsv");
    let mut log = TrainLog {
        seed: run.seed,
        entries: Vec::new(),
    };

    let n_train = train_bundle.samples.len();
    let labels: Vec<LabelSeq> = train_bundle.samples.iter().map(|s| s.label.clone()).collect();
    let mut epochs_run = start_epoch.saturating_sub(1);
    let mut stopped_early = false;

    for epoch in start_epoch..=run.max_epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n_train).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(run.seed, epoch as u64));
        order.shuffle(&mut rng);

        let mut train_loss = 0.0;
        for (step, chunk) in order.chunks(run.batch_size).enumerate() {
            let images = bundle_tensors(train_bundle, chunk, run.invert_colors);
            let batch_labels: Vec<LabelSeq> = chunk.iter().map(|&i| labels[i].clone()).collect();
            let dropout_seed = mix_seed(run.seed, (epoch as u64) << 20 | step as u64);
            let bl = loss_and_grads(&params, &cfg, &images, &batch_labels, dropout_seed)?;
            if !bl.mean_loss.is_finite() {
                return Err(Error::Diverged(format!("epoch {epoch} step {step}: loss is not finite")));
            }
            rmsprop_step(&mut params, &bl.grads, &mut opt, run.clip_norm)?;
            update_batch_norm_stats(&mut params, &bl.cache, cfg.bn_momentum);
            train_loss += bl.mean_loss * chunk.len() as f64;
        }
        train_loss /= n_train as f64;

        let val_loss = validation_loss(&params, &cfg, valid_bundle, run.invert_colors, run.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged(format!("epoch {epoch}: validation loss is not finite")));
        }

        let improved = stopper.observe(epoch, val_loss);
        if improved {
            save_checkpoint(&best_path, &params, &charset, epoch, stopper.best_val_loss, stopper.best_epoch, None)?;
        }
        save_checkpoint(&last_path, &params, &charset, epoch, stopper.best_val_loss, stopper.best_epoch, Some(&opt))?;

        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        log.entries.push(record.clone());
        std::fs::write(&log_path, log.to_tsv())?;
        on_epoch(&record);
        epochs_run = epoch;

        if stopper.should_stop() {
            stopped_early = true;
            break;
        }
    }

    Ok(TrainOutcome {
        log,
        best_epoch: stopper.best_epoch,
        best_val_loss: stopper.best_val_loss,
        epochs_run,
        stopped_early,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        log_path,
    })
}

// ---------------------------------------------------------------------------
// Evaluation and transcription
// ---------------------------------------------------------------------------

fn decode_dist(dist: &CtcDistribution, mode: DecodeMode) -> Result<LabelSeq> {
    match mode {
        DecodeMode::Greedy => Ok(decode_greedy(dist)),
        DecodeMode::Beam(width) => decode_beam(dist, width),
    }
}

/// Transcribe every bundle sample with the given decoder and score it.
pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    charset: &Charset,
    bundle: &DatasetBundle,
    decode: DecodeMode,
    invert: bool,
    batch_size: usize,
) -> Result<EvalReport> {
    if charset.hash_hex() != bundle.manifest.charset_hash {
        return Err(Error::Mismatch(format!(
            "checkpoint charset {} does not match bundle charset {}",
            charset.hash_hex(),
            bundle.manifest.charset_hash
        )));
    }
    let n = bundle.samples.len();
    let mut triples: Vec<(String, String, String)> = Vec::with_capacity(n);
    let mut idx: Vec<usize> = (0..n).collect();
    while !idx.is_empty() {
        let take: Vec<usize> = idx.drain(..batch_size.min(idx.len())).collect();
        let images = bundle_tensors(bundle, &take, invert);
        let (logits, _) = forward_batch(params, cfg, &images, Mode::Infer, 0)?;
        let decoded: Vec<Result<(String, String, String)>> = logits
            .par_iter()
            .zip(take.par_iter())
            .map(|(l, &i)| {
                let dist = CtcDistribution::from_logits(l.tensor())?;
                let hyp = charset.decode(&decode_dist(&dist, decode)?);
                let sample = &bundle.samples[i];
                Ok((sample.id.clone(), charset.decode(&sample.label), hyp))
            })
            .collect();
        for d in decoded {
            triples.push(d?);
        }
    }
    EvalReport::from_triples(triples)
}

/// Preprocess a raw image exactly as bundle building does, run the network,
/// and decode. Returns the text and the per-step class distribution.
pub fn transcribe(
    params: &ModelParams,
    cfg: &ModelConfig,
    charset: &Charset,
    image: &RawImage,
    invert: bool,
    decode: DecodeMode,
) -> Result<(String, CtcDistribution)> {
    let prepared = preprocess(image, cfg.input_w, cfg.input_h);
    let tensor = prepared.to_tensor(invert);
    let (logits, _) = forward_batch(params, cfg, &[tensor], Mode::Infer, 0)?;
    let dist = CtcDistribution::from_logits(logits[0].tensor())?;
    let label = decode_dist(&dist, decode)?;
    Ok((charset.decode(&label), dist))
}
