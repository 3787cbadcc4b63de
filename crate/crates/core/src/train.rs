//! End-to-end optimization: per-iteration patch sampling, augmentation,
//! cascade forward, focal losses with deep supervision, Adam updates, the
//! two-value plateau learning-rate schedule, per-epoch checkpoints and a CSV
//! loss log.
//!
//! Epochs are one pass of one random patch per case. Every epoch draws from
//! its own seeded RNG stream, so a run resumed from the epoch-k checkpoint
//! continues bit-identically to the unbroken run.

use std::path::{Path, PathBuf};

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::augment::augment;
use crate::cascade::CascadeModel;
use crate::checkpoint::{load_checkpoint_expecting, save_checkpoint};
use crate::config::{PipelineConfig, TrainSection};
use crate::error::{Error, Result};
use crate::losses::focal_loss_grad;
use crate::nn::{Adam, ParamStore, Tape};
use crate::patch::sample_patch;
use crate::volume::{region_mask_from_labels, LabelMap, Modality, ModalityStack, Region};

/// One row of the training loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossLogRow {
    pub iteration: u64,
    pub epoch: usize,
    pub loss_wt: f64,
    pub loss_tc: f64,
    pub loss_et: f64,
    pub total: f64,
    pub lr: f64,
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossLogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
    r.deserialize().collect::<std::result::Result<Vec<_>, _>>().map_err(|e| Error::Csv(e.to_string()))
}

/// Two-value plateau schedule: the initial rate until the best epoch-mean
/// loss has failed to improve by at least `plateau_min_rel_improvement`
/// (relative) for `plateau_patience` consecutive epochs; afterwards the
/// decayed rate, permanently.
pub fn update_learning_rate(history: &[f64], cfg: &TrainSection) -> f64 {
    let mut best = f64::INFINITY;
    let mut streak = 0usize;
    for &loss in history {
        if best.is_infinite() || loss <= best * (1.0 - cfg.plateau_min_rel_improvement) {
            streak = 0;
        } else {
            streak += 1;
            if streak >= cfg.plateau_patience {
                return cfg.lr_after_plateau;
            }
        }
        best = best.min(loss);
    }
    cfg.lr_initial
}

/// Result of a completed training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epoch_losses: Vec<f64>,
    /// The latest checkpoint (also saved per epoch under `checkpoints/`).
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(1)
}

/// Trains the cascade on in-memory cases. `resume` continues from a
/// checkpoint written by a run with the same config.
pub fn train_run(
    cfg: &PipelineConfig,
    dataset: &[(ModalityStack, LabelMap)],
    run_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Training("dataset is empty".into()));
    }
    let patch = cfg.train.patch_size;
    for (stack, labels) in dataset {
        if stack.shape() != labels.shape() {
            return Err(Error::Training(format!(
                "case {}: image and label shapes differ",
                stack.case_id
            )));
        }
        if patch.iter().zip(&stack.shape()).any(|(p, v)| p > v) {
            return Err(Error::Training(format!(
                "case {}: patch size {patch:?} exceeds volume shape {:?}",
                stack.case_id,
                stack.shape()
            )));
        }
        if !stack.is_finite() {
            return Err(Error::Training(format!(
                "case {}: non-finite intensities; was it preprocessed?",
                stack.case_id
            )));
        }
    }

    std::fs::create_dir_all(run_dir)?;
    crate::config::save_config(&run_dir.join("config.toml"), cfg)?;
    let ckpt_dir = run_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;

    let (model, mut store, mut adam, start_epoch) = match resume {
        Some(path) => {
            let loaded = load_checkpoint_expecting(path, &cfg.cascade)?;
            if loaded.epoch >= cfg.train.epochs {
                return Err(Error::Training(format!(
                    "checkpoint is already at epoch {} of {}",
                    loaded.epoch, cfg.train.epochs
                )));
            }
            (loaded.model, loaded.store, loaded.adam, loaded.epoch)
        }
        None => {
            let mut store = ParamStore::new();
            let mut init_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
            let model = CascadeModel::build(cfg.cascade, &mut store, &mut init_rng)?;
            let adam = Adam::new(&store, cfg.train.adam);
            (model, store, adam, 0)
        }
    };

    let log_path = run_dir.join("loss_log.csv");
    let mut log = csv::Writer::from_path(&log_path).map_err(|e| Error::Csv(e.to_string()))?;

    let mut epoch_losses: Vec<f64> = Vec::with_capacity(cfg.train.epochs);
    let mut lr = cfg.train.lr_initial;
    let mut iteration = (start_epoch * dataset.len()) as u64;
    let latest = ckpt_dir.join("latest.ckpt");

    for epoch in (start_epoch + 1)..=cfg.train.epochs {
        let mut rng = ChaCha12Rng::seed_from_u64(epoch_seed(cfg.seed, epoch));
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_sum = 0.0;
        for &case_idx in &order {
            iteration += 1;
            let (stack, labels) = &dataset[case_idx];

            let mut sample =
                sample_patch(stack.data.view(), labels.labels.view(), patch, &mut rng)?;
            if cfg.train.foreground_bias > 0.0 && rng.random::<f64>() < cfg.train.foreground_bias {
                for _ in 0..20 {
                    if sample.labels.iter().any(|&l| l != 0) {
                        break;
                    }
                    sample =
                        sample_patch(stack.data.view(), labels.labels.view(), patch, &mut rng)?;
                }
            }
            let (images, label_patch) = augment(&sample.images, &sample.labels, &cfg.augment, &mut rng);
            let patch_map = LabelMap { labels: label_patch, spacing: labels.spacing };
            let targets = [
                region_mask_from_labels(&patch_map, Region::Wt).mask,
                region_mask_from_labels(&patch_map, Region::Tc).mask,
                region_mask_from_labels(&patch_map, Region::Et).mask,
            ];

            let mut tape = Tape::new(true);
            let flair = tape
                .input(images.index_axis(Axis(0), Modality::Flair.channel()).to_owned().insert_axis(Axis(0)));
            let t1ce = tape
                .input(images.index_axis(Axis(0), Modality::T1ce.channel()).to_owned().insert_axis(Axis(0)));
            let fwd = model.forward(&mut tape, &store, flair, t1ce, cfg.train.gating)?;

            let mut seeds = Vec::with_capacity(12);
            let mut step_losses = [0.0f64; 3];
            for k in 0..3 {
                let sw = cfg.loss.step_weights[k];
                let heads = std::iter::once((fwd.steps[k].main, 1.0)).chain(
                    fwd.steps[k].aux.iter().zip(cfg.loss.aux_weights).map(|(&a, w)| (a, w)),
                );
                for (node, head_weight) in heads {
                    let probs = tape.value3(node).to_owned();
                    let (loss, grad) =
                        focal_loss_grad(probs.view(), targets[k].view(), &cfg.loss.focal)?;
                    step_losses[k] += head_weight * loss;
                    let scale = sw * head_weight;
                    if scale != 0.0 {
                        seeds.push((node, (grad * scale).insert_axis(Axis(0))));
                    }
                }
            }
            let total: f64 =
                (0..3).map(|k| cfg.loss.step_weights[k] * step_losses[k]).sum();
            if !total.is_finite() {
                let bad = step_losses.iter().position(|l| !l.is_finite()).map(|k| k + 1);
                return Err(Error::Training(format!(
                    "non-finite loss at iteration {iteration} (epoch {epoch}{})",
                    bad.map(|k| format!(", step {k}")).unwrap_or_default()
                )));
            }

            tape.backward(&mut store, seeds)?;
            adam.step(&mut store, lr);
            store.zero_grads();

            log.serialize(LossLogRow {
                iteration,
                epoch,
                loss_wt: step_losses[0],
                loss_tc: step_losses[1],
                loss_et: step_losses[2],
                total,
                lr,
            })
            .map_err(|e| Error::Csv(e.to_string()))?;
            epoch_sum += total;
        }
        log.flush()?;

        epoch_losses.push(epoch_sum / order.len() as f64);
        lr = update_learning_rate(&epoch_losses, &cfg.train);

        save_checkpoint(
            &ckpt_dir.join(format!("epoch_{epoch:04}.ckpt")),
            &cfg.cascade,
            &store,
            &adam,
            epoch,
        )?;
        save_checkpoint(&latest, &cfg.cascade, &store, &adam, epoch)?;
    }

    Ok(TrainOutcome { epoch_losses, checkpoint: latest, log: log_path })
}
