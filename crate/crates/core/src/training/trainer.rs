use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{loss_grad_logits, loss_grad_probs, majority_pool};
use super::optim::{lr_at, AdamW};
use super::{LossKind, TrainConfig, TrainError};
use crate::dataset::{load_image, tokenize, BenchmarkSplit, ExpressionTokens, Vocabulary, WordVocab};
use crate::mask::{bilinear_taps, BinaryMask};
use crate::model::{save_checkpoint, Checkpoint, ModelConfig, UniRes};
use crate::nn::{Graph, Matrix, Scalar, Var};
use crate::pixels::PixelGrid;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_PREFIX: &str = "epoch_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// One supervised triple, preprocessed to model resolution.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub id: String,
    pub pixels: PixelGrid,
    pub tokens: ExpressionTokens,
    /// Row-major target on a `target_side²` grid.
    pub target: Vec<f64>,
    pub target_side: usize,
}

/// Resizes the image to model size and reduces the ground truth either to
/// the patch grid (majority vote) or to the model input size.
pub fn prepare_example(
    id: impl Into<String>,
    config: &ModelConfig,
    full_res: bool,
    image: &image::RgbImage,
    tokens: ExpressionTokens,
    gt: &BinaryMask,
) -> Result<TrainExample, TrainError> {
    let side = if full_res { config.image_size } else { config.grid_size() };
    let target = if full_res {
        gt.resize_nearest(side, side)?
    } else {
        majority_pool(gt, side, side)?
    };
    Ok(TrainExample {
        id: id.into(),
        pixels: PixelGrid::prepare(image, config.image_size),
        tokens,
        target: target.data().iter().map(|&v| f64::from(v)).collect(),
        target_side: side,
    })
}

/// Loads, tokenizes and reduces every sample of a split, in order.
pub fn prepare_examples(
    split: &BenchmarkSplit,
    root: &Path,
    vocab: &WordVocab,
    config: &ModelConfig,
    full_res: bool,
) -> Result<Vec<TrainExample>, TrainError> {
    split
        .samples
        .par_iter()
        .map(|s| {
            let image = load_image(root, s)?;
            let tokens = tokenize(&s.expression, vocab as &dyn Vocabulary, config.max_text_len)?;
            let gt = s.decode_mask()?;
            prepare_example(s.sample_id.clone(), config, full_res, &image, tokens, &gt)
        })
        .collect()
}

/// Forward pass plus loss node. Returns the scalar loss variable.
pub fn build_loss<T: Scalar>(
    model: &UniRes<T>,
    g: &mut Graph<T>,
    ex: &TrainExample,
    kind: LossKind,
) -> Result<Var, TrainError> {
    let cfg = model.config();
    let v = model.build(g, &ex.pixels, &ex.tokens)?;
    let n = cfg.grid_size();
    if ex.target_side == n {
        let z: Vec<f64> = g.value(v.logits).data().iter().map(|x| x.as_f64()).collect();
        let (loss, grad) = loss_grad_logits(&z, &ex.target, kind);
        let grad = Matrix::from_vec(z.len(), 1, grad.into_iter().map(T::of).collect());
        return Ok(g.objective(v.logits, T::of(loss), grad));
    }
    let side = ex.target_side;
    let interp = |taps: Vec<(usize, usize, f64)>| {
        let mut m = Matrix::<T>::zeros(side, n);
        for (o, (lo, hi, f)) in taps.into_iter().enumerate() {
            m.set(o, lo, m.get(o, lo) + T::of(1.0 - f));
            m.set(o, hi, m.get(o, hi) + T::of(f));
        }
        m
    };
    let r = interp(bilinear_taps(n, side));
    let grid = g.reshape(v.probs, n, n);
    let ry = g.constant(r.clone());
    let rx = g.constant(r);
    let rows = g.matmul(ry, grid);
    let full = g.matmul_t(rows, rx);
    let q: Vec<f64> = g.value(full).data().iter().map(|x| x.as_f64()).collect();
    let (loss, grad) = loss_grad_probs(&q, &ex.target, kind);
    let grad = Matrix::from_vec(side, side, grad.into_iter().map(T::of).collect());
    Ok(g.objective(full, T::of(loss), grad))
}

/// Loss and parameter gradients for one example.
pub fn example_gradients<T: Scalar>(
    model: &UniRes<T>,
    ex: &TrainExample,
    kind: LossKind,
) -> Result<(f64, Vec<Matrix<T>>), TrainError> {
    let mut g = Graph::new();
    let loss = build_loss(model, &mut g, ex, kind)?;
    let value = g.value(loss).get(0, 0).as_f64();
    let mut grads = model.params().zero_grads();
    g.backward(loss).accumulate_params(&mut grads);
    Ok((value, grads))
}

/// One optimizer update on the mean loss of `batch`. Per-example gradients
/// are computed in parallel and reduced in batch order.
pub fn train_step<T: Scalar>(
    model: &mut UniRes<T>,
    optimizer: &mut AdamW,
    batch: &[&TrainExample],
    lr: f64,
    kind: LossKind,
    step: usize,
) -> Result<f64, TrainError> {
    let results: Vec<_> = batch
        .par_iter()
        .map(|ex| example_gradients(model, ex, kind))
        .collect::<Result<_, _>>()?;
    let scale = T::of(1.0 / batch.len() as f64);
    let mut total = model.params().zero_grads();
    let mut loss = 0.0;
    for (l, grads) in &results {
        loss += l;
        for (acc, gr) in total.iter_mut().zip(grads) {
            acc.add_assign(gr);
        }
    }
    loss /= batch.len() as f64;
    let finite = total.iter().all(|m| m.all_finite());
    if !loss.is_finite() || !finite {
        return Err(TrainError::NonFiniteLoss {
            step,
            loss,
            samples: batch.iter().map(|e| e.id.as_str()).collect::<Vec<_>>().join(","),
        });
    }
    for m in &mut total {
        *m = m.scale(scale);
    }
    optimizer.step(model.params_mut(), &total, lr);
    Ok(loss)
}

/// Position in a run, stored in each checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    /// Optimizer updates completed.
    pub step: usize,
    /// Epochs completed.
    pub epoch: usize,
    pub optimizer: AdamW,
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Where checkpoints and the log go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    pub vocab: Option<WordVocab>,
    pub resume: Option<TrainState>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub log: Vec<TrainLogEntry>,
    pub state: TrainState,
    pub checkpoints: Vec<PathBuf>,
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64));
    order.shuffle(&mut rng);
    order
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Runs `epochs × ⌈N / batch_size⌉` updates, shuffling each epoch with a
/// seed derived from `config.seed` and the epoch index.
pub fn fit<T: Scalar>(
    model: &mut UniRes<T>,
    examples: &[TrainExample],
    config: &TrainConfig,
    options: FitOptions,
) -> Result<FitOutcome, TrainError> {
    config.validate()?;
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for prefix in &config.freeze {
        model.params_mut().set_frozen(prefix, true);
    }
    let per_epoch = examples.len().div_ceil(config.batch_size);
    let total = config.epochs * per_epoch;
    let mut state = match options.resume {
        Some(s) => {
            if !s.optimizer.matches(model.params()) {
                return Err(TrainError::Resume("optimizer state does not fit the model".into()));
            }
            if s.step != s.epoch * per_epoch {
                return Err(TrainError::Resume(format!(
                    "saved step {} is not the end of epoch {} at {per_epoch} steps per epoch",
                    s.step, s.epoch
                )));
            }
            s
        }
        None => TrainState {
            step: 0,
            epoch: 0,
            optimizer: AdamW::new(model.params(), config.weight_decay),
        },
    };
    if let Some(dir) = &options.out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut log_file = match &options.out_dir {
        Some(dir) => {
            let path = dir.join(LOG_FILE);
            let mut open = OpenOptions::new();
            open.create(true);
            if state.step > 0 {
                open.append(true);
            } else {
                open.write(true).truncate(true);
            }
            Some((open.open(&path).map_err(io_err(&path))?, path))
        }
        None => None,
    };

    let start = Instant::now();
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    for epoch in state.epoch..config.epochs {
        let order = epoch_order(config.seed, epoch, examples.len());
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let lr = lr_at(state.step, total, config);
            let loss = train_step(model, &mut state.optimizer, &batch, lr, config.loss, state.step)?;
            let entry = TrainLogEntry {
                step: state.step,
                epoch,
                loss,
                lr,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            if let Some((file, path)) = log_file.as_mut() {
                let line = serde_json::to_string(&entry).expect("log entry serializes");
                writeln!(file, "{line}").map_err(io_err(path))?;
            }
            log.push(entry);
            state.step += 1;
        }
        state.epoch = epoch + 1;
        if let Some(dir) = &options.out_dir {
            let path = dir.join(format!("{CHECKPOINT_PREFIX}{:04}.json", state.epoch));
            let mut ckpt = Checkpoint::from_model(model, options.vocab.as_ref());
            ckpt.train_state = Some(serde_json::to_value(&state).expect("train state serializes"));
            save_checkpoint(&path, &ckpt)?;
            checkpoints.push(path);
        }
    }
    Ok(FitOutcome {
        log,
        state,
        checkpoints,
    })
}

pub fn read_log(path: &Path) -> Result<Vec<TrainLogEntry>, TrainError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| TrainError::ConfigParse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
