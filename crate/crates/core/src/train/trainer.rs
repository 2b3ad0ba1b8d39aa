use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::autodiff::{Graph, ParamKind, ParamStore, Var};
use crate::data::{augment, case_seed, AugmentParams, AugmentRanges, Dataset, Sample};
use crate::error::{ensure, Error, Result};
use crate::geometry::BinaryMask;
use crate::model::{GuidedNet, Mode, ModelConfig, NetOutput};
use crate::par;
use crate::tensor::Tensor;

/// Inputs, guidance masks and targets for one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B,3,S,S]`.
    pub input: Tensor,
    /// `[B,1,F,F]`.
    pub masks: Tensor,
    pub targets: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub classification: f64,
    pub guidance: f64,
}

/// Graph handles of the objective.
pub struct Objective {
    pub total: Var,
    pub classification: Var,
    pub guidance: Var,
    pub output: NetOutput,
}

/// Build `L_class + lambda * L_guide` for `batch` on `g`.
pub fn build_objective(
    g: &mut Graph,
    net: &GuidedNet,
    store: &ParamStore,
    batch: &Batch,
    lambda: f64,
    epsilon: f64,
    mode: Mode,
) -> Result<Objective> {
    let x = g.input(batch.input.clone());
    let output = net.forward_with(g, store, x, mode)?;
    let classification = g.classification_loss(output.y_pred, &batch.targets)?;
    let guidance = g.guidance_loss(output.activation, &batch.masks, epsilon)?;
    let total = g.add_scaled(classification, guidance, lambda)?;
    Ok(Objective {
        total,
        classification,
        guidance,
        output,
    })
}

/// Guidance mask for one sample: its cue mask when positive, otherwise all
/// ones (or all zeros when negatives are suppressed).
pub fn guidance_mask(
    sample: &Sample,
    cue: Option<&BinaryMask>,
    feat: usize,
    suppress_negatives: bool,
) -> Result<BinaryMask> {
    if sample.label {
        let m = cue.ok_or_else(|| Error::contract(format!("positive {} has no cue mask", sample.id)))?;
        ensure!(
            m.count() > 0,
            "positive {} has an empty cue mask on the {feat}x{feat} grid",
            sample.id
        );
        Ok(m.clone())
    } else {
        Ok(BinaryMask::filled(feat, feat, !suppress_negatives))
    }
}

/// Canonical-orientation cue masks, `None` for negatives.
pub fn cue_masks(ds: &Dataset, feat: usize) -> Result<Vec<Option<BinaryMask>>> {
    par::map_range(ds.len(), |i| {
        let s = &ds.samples[i];
        s.label.then(|| s.cue_mask(feat)).transpose()
    })
    .into_iter()
    .collect()
}

/// Assemble a batch from `indices`. With `augment`, each sample draws its
/// own parameters from `(seed, position)`; moved samples get cue masks
/// recomputed from their moved landmarks.
#[allow(clippy::too_many_arguments)]
pub fn assemble_batch(
    ds: &Dataset,
    cues: &[Option<BinaryMask>],
    indices: &[usize],
    feat: usize,
    suppress_negatives: bool,
    augmentation: Option<(&AugmentRanges, u64)>,
) -> Result<Batch> {
    let s = ds.input_size;
    let parts = par::map_range(indices.len(), |k| -> Result<(Vec<f64>, BinaryMask)> {
        let sample = &ds.samples[indices[k]];
        let image = sample.tensor();
        let Some((ranges, seed)) = augmentation else {
            let mask = guidance_mask(sample, cues[indices[k]].as_ref(), feat, suppress_negatives)?;
            return Ok((image.into_data(), mask));
        };
        let mut rng = ChaCha8Rng::seed_from_u64(case_seed(seed, k));
        let mut params = AugmentParams::sample(&mut rng, ranges);
        let moved = match params.map_landmarks(&sample.landmarks) {
            Ok(lm) => Some(lm),
            Err(_) => {
                // landmarks pushed off the image: keep the photometric part only
                params = AugmentParams {
                    intensity_scale: params.intensity_scale,
                    ..Default::default()
                };
                None
            }
        };
        let out = augment(&image, &params)?;
        let mask = match (sample.label, moved) {
            (true, Some(lm)) if lm != sample.landmarks => {
                let m = sample.cue_mask_at(&lm, feat)?;
                guidance_mask(sample, Some(&m), feat, suppress_negatives)?
            }
            _ => guidance_mask(sample, cues[indices[k]].as_ref(), feat, suppress_negatives)?,
        };
        Ok((out.into_data(), mask))
    });
    let mut input = Vec::with_capacity(indices.len() * 3 * s * s);
    let mut masks = Vec::with_capacity(indices.len() * feat * feat);
    for part in parts {
        let (img, mask) = part?;
        input.extend(img);
        masks.extend(mask.to_f64());
    }
    Ok(Batch {
        input: Tensor::new(vec![indices.len(), 3, s, s], input)?,
        masks: Tensor::new(vec![indices.len(), 1, feat, feat], masks)?,
        targets: indices
            .iter()
            .map(|&i| if ds.samples[i].label { 1.0 } else { 0.0 })
            .collect(),
    })
}

/// Mini-batch SGD with Nesterov momentum over a guided network.
#[derive(Clone, Debug)]
pub struct Trainer {
    net: GuidedNet,
    config: TrainConfig,
    velocity: Vec<Option<Tensor>>,
    learning_rate: f64,
}

impl Trainer {
    pub fn new(net: GuidedNet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let velocity = net
            .params()
            .entries()
            .map(|(_, e)| (e.kind == ParamKind::Trainable).then(|| Tensor::zeros(e.value.shape().to_vec())))
            .collect();
        Ok(Trainer {
            learning_rate: config.learning_rate,
            net,
            config,
            velocity,
        })
    }

    pub fn net(&self) -> &GuidedNet {
        &self.net
    }

    pub fn into_net(self) -> GuidedNet {
        self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    /// One optimizer step on `batch`: `v = mu*v + g`, `p -= lr*(g + mu*v)`.
    /// Batch-norm running statistics are updated from the batch.
    pub fn step(&mut self, batch: &Batch) -> Result<LossParts> {
        let mut g = Graph::new();
        let obj = build_objective(
            &mut g,
            &self.net,
            self.net.params(),
            batch,
            self.config.lambda,
            self.config.epsilon_guide,
            Mode::Train,
        )?;
        let loss = LossParts {
            total: g.value(obj.total).item()?,
            classification: g.value(obj.classification).item()?,
            guidance: g.value(obj.guidance).item()?,
        };
        if !loss.total.is_finite() {
            return Ok(loss);
        }
        let grads = g.backward(obj.total)?;
        let mu = self.config.momentum;
        let lr = self.learning_rate;
        for (id, grad) in grads.params() {
            let Some(v) = self.velocity[id.index()].as_mut() else {
                continue;
            };
            let p = self.net.params_mut().value_mut(id);
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
                *vv = mu * *vv + gv;
                *pv -= lr * (gv + mu * *vv);
            }
        }
        self.net.apply_bn_updates(&obj.output.bn_updates);
        Ok(loss)
    }
}

/// Average objective over `ds` in inference mode, without augmentation.
pub fn dataset_loss(
    net: &GuidedNet,
    ds: &Dataset,
    cues: &[Option<BinaryMask>],
    config: &TrainConfig,
    batch_size: usize,
) -> Result<LossParts> {
    let feat = net.feature_size();
    let mut sum = LossParts::default();
    let order: Vec<usize> = (0..ds.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let batch = assemble_batch(ds, cues, chunk, feat, config.suppress_negatives, None)?;
        let mut g = Graph::new();
        let obj = build_objective(
            &mut g,
            net,
            net.params(),
            &batch,
            config.lambda,
            config.epsilon_guide,
            Mode::Infer,
        )?;
        let w = chunk.len() as f64;
        sum.total += w * g.value(obj.total).item()?;
        sum.classification += w * g.value(obj.classification).item()?;
        sum.guidance += w * g.value(obj.guidance).item()?;
    }
    let n = ds.len() as f64;
    Ok(LossParts {
        total: sum.total / n,
        classification: sum.classification / n,
        guidance: sum.guidance / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_classification: f64,
    pub train_guidance: f64,
    pub val_loss: f64,
    pub val_classification: f64,
    pub val_guidance: f64,
    pub learning_rate: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the lowest validation loss.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    /// Copy with wall-clock fields zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> TrainHistory {
        let mut h = self.clone();
        for e in &mut h.epochs {
            e.wall_seconds = 0.0;
        }
        h
    }

    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("record serializes") + "\n")
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub net: GuidedNet,
    pub history: TrainHistory,
}

/// Train a freshly initialized network (weights seeded by
/// `config.seed`).
pub fn train(
    model: &ModelConfig,
    config: &TrainConfig,
    derivation: &Dataset,
    validation: &Dataset,
) -> Result<TrainOutcome> {
    let net = GuidedNet::build(model.clone(), config.seed)?;
    train_from(net, config, derivation, validation)
}

/// Train starting from `net`.
pub fn train_from(
    net: GuidedNet,
    config: &TrainConfig,
    derivation: &Dataset,
    validation: &Dataset,
) -> Result<TrainOutcome> {
    config.validate()?;
    ensure!(!derivation.is_empty(), "derivation set is empty");
    ensure!(!validation.is_empty(), "validation set is empty");
    let size = net.config().input_size;
    for (name, ds) in [("derivation", derivation), ("validation", validation)] {
        ensure!(
            ds.input_size == size,
            "{name} images are {0}x{0} but the model expects {size}x{size}",
            ds.input_size
        );
    }
    let feat = net.feature_size();
    let train_cues = cue_masks(derivation, feat)?;
    let val_cues = cue_masks(validation, feat)?;
    let ranges = config.augment.ranges();
    let mut trainer = Trainer::new(net, config.clone())?;
    let mut history = TrainHistory::default();
    let mut best_loss = f64::INFINITY;
    let mut best_params = trainer.net().params().clone();
    let mut since_best = 0;
    let mut since_change = 0;
    for epoch in 0..config.max_epochs {
        let started = Instant::now();
        let epoch_seed = case_seed(config.seed, epoch);
        let mut order: Vec<usize> = (0..derivation.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut sum = LossParts::default();
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let aug = ranges.as_ref().map(|r| (r, case_seed(epoch_seed, b)));
            let batch =
                assemble_batch(derivation, &train_cues, chunk, feat, config.suppress_negatives, aug)?;
            let loss = trainer.step(&batch)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!(
                        "batch {b}: loss {} (classification {}, guidance {}) at learning rate {}",
                        loss.total, loss.classification, loss.guidance,
                        trainer.learning_rate()
                    ),
                });
            }
            let w = chunk.len() as f64;
            sum.total += w * loss.total;
            sum.classification += w * loss.classification;
            sum.guidance += w * loss.guidance;
        }
        let n = derivation.len() as f64;
        let val = dataset_loss(trainer.net(), validation, &val_cues, config, 64)?;
        if !val.total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("validation loss {}", val.total),
            });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: sum.total / n,
            train_classification: sum.classification / n,
            train_guidance: sum.guidance / n,
            val_loss: val.total,
            val_classification: val.classification,
            val_guidance: val.guidance,
            learning_rate: trainer.learning_rate(),
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {epoch}: train {:.5} val {:.5} lr {}",
            sum.total / n,
            val.total,
            trainer.learning_rate()
        );
        if val.total < best_loss {
            best_loss = val.total;
            best_params = trainer.net().params().clone();
            history.best_epoch = history.epochs.len() - 1;
            since_best = 0;
            since_change = 0;
        } else {
            since_best += 1;
            since_change += 1;
        }
        if since_best >= config.early_stop_patience {
            history.stopped_early = epoch + 1 < config.max_epochs;
            break;
        }
        if since_change >= config.plateau_patience {
            let lr = trainer.learning_rate() * config.lr_decay;
            trainer.set_learning_rate(lr);
            since_change = 0;
        }
    }
    let mut net = trainer.into_net();
    net.params_mut().copy_values_from(&best_params)?;
    Ok(TrainOutcome { net, history })
}
