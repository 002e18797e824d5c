use super::{ExperimentError, Result};
use crate::preprocess::{augment_tags, AugPolicy, AugTag, PatchPair};
use crate::redcnn::{forward, ExpertModel};
use crate::tensor::{adam_step, AdamConfig, PlateauScheduler, Tape, Tensor4, TrainSchedule};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_EPOCHS: u32 = 3;

/// Base patch pairs plus the augmentation of each emitted item; transforms
/// are applied lazily when a batch is assembled.
#[derive(Debug, Clone)]
pub struct PatchSet {
    base: Vec<PatchPair>,
    items: Vec<(usize, AugTag)>,
}

impl PatchSet {
    /// Without a policy every base pair is emitted once, untransformed.
    pub fn new(base: Vec<PatchPair>, policy: Option<AugPolicy>, seed: u64) -> Self {
        let items = (0..base.len())
            .flat_map(|i| {
                let tags = match policy {
                    Some(p) => augment_tags(p, seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
                    None => vec![AugTag::Identity],
                };
                tags.into_iter().map(move |t| (i, t))
            })
            .collect();
        Self { base, items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn base_len(&self) -> usize {
        self.base.len()
    }

    /// `(low, full)` tensors of shape `(idx.len(), 1, h, w)`.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor4<f32>, Tensor4<f32>)> {
        let first = &self.base[self.items[idx[0]].0].low;
        let (h, w) = (first.height, first.width);
        let mut low = Vec::with_capacity(idx.len() * h * w);
        let mut full = Vec::with_capacity(idx.len() * h * w);
        for &i in idx {
            let (b, tag) = self.items[i];
            let p = &self.base[b];
            low.extend_from_slice(&tag.apply(&p.low).data);
            full.extend_from_slice(&tag.apply(&p.full).data);
        }
        let shape = [idx.len(), 1, h, w];
        let err = |e: crate::tensor::TensorError| ExperimentError::stage("batch", e);
        Ok((
            Tensor4::from_vec(shape, low).map_err(err)?,
            Tensor4::from_vec(shape, full).map_err(err)?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub patches_per_epoch: Option<usize>,
    pub val_patches: Option<usize>,
    pub schedule: TrainSchedule,
    pub adam: AdamConfig,
}

/// One epoch of the loss curve; `lr` is the rate used during the epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: u32,
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ExpertModel,
    pub curve: Vec<CurvePoint>,
    /// Validation MSE of the untrained model.
    pub initial_val_mse: f64,
    /// Validation MSE of returning the low-dose input unchanged.
    pub identity_val_mse: f64,
    pub stopped_early: bool,
    pub lr_reductions: u32,
    pub train_items: usize,
    pub val_items: usize,
}

/// Flags validation losses above `DIVERGENCE_FACTOR` times the initial one
/// for `DIVERGENCE_EPOCHS` consecutive epochs, or any non-finite loss.
struct DivergenceGuard {
    initial: f64,
    bad: u32,
}

impl DivergenceGuard {
    fn new(initial: f64) -> Self {
        Self { initial, bad: 0 }
    }

    fn observe(&mut self, v: f64) -> bool {
        if !v.is_finite() {
            return true;
        }
        if v > DIVERGENCE_FACTOR * self.initial {
            self.bad += 1;
        } else {
            self.bad = 0;
        }
        self.bad >= DIVERGENCE_EPOCHS
    }
}

fn mse64(a: &[f32], b: &[f32]) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum();
    s / a.len().max(1) as f64
}

fn subset(n: usize, take: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    match take {
        Some(k) if k < n => {
            idx.shuffle(rng);
            idx.truncate(k);
            idx.sort_unstable();
            idx
        }
        _ => idx,
    }
}

/// Mini-batch Adam on MSE with plateau scheduling, early stopping and a
/// divergence guard. Validation uses the clamped inference path.
pub fn train_model(
    mut model: ExpertModel,
    train: &PatchSet,
    val: &PatchSet,
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(ExperimentError::stage(
            format!("train {}", model.cluster_id),
            "empty training or validation set",
        ));
    }
    let stage = |e: &dyn std::fmt::Display| ExperimentError::stage(format!("train {}", model.cluster_id), e);
    let mut val_rng = ChaCha8Rng::seed_from_u64(seed);
    val_rng.set_stream(u64::MAX);
    let val_idx = subset(val.len(), settings.val_patches, &mut val_rng);
    let (val_x, val_y) = val.batch(&val_idx)?;
    let identity_val_mse = mse64(val_x.data(), val_y.data());
    let val_mse = |m: &ExpertModel| -> Result<f64> {
        let out = m.denoise(&val_x).map_err(|e| stage(&e))?;
        Ok(mse64(out.data(), val_y.data()))
    };
    let initial_val_mse = val_mse(&model)?;
    let mut sched = PlateauScheduler::new(settings.schedule.clone()).map_err(|e| stage(&e))?;
    let mut curve = Vec::new();
    let mut stopped_early = false;
    let mut guard = DivergenceGuard::new(initial_val_mse);
    let mut step = 0u64;
    let mut tape = Tape::new();
    let batch = settings.batch_size.max(1);

    for epoch in 1..=settings.schedule.max_epochs {
        let lr = sched.lr();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(epoch));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        if let Some(k) = settings.patches_per_epoch {
            order.truncate(k.max(1));
        }
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch) {
            let (x, y) = train.batch(chunk)?;
            let xv = tape.constant(x);
            let yv = tape.constant(y);
            let out = forward(&model.config, &model.params, &mut tape, xv).map_err(|e| stage(&e))?;
            let loss = tape.mse(out, yv).map_err(|e| stage(&e))?;
            loss_sum += f64::from(tape.value(loss).data()[0]) * chunk.len() as f64;
            tape.backward(loss, &mut model.params).map_err(|e| stage(&e))?;
            step += 1;
            adam_step(&mut model.params, &settings.adam, lr, step).map_err(|e| stage(&e))?;
        }
        let v = val_mse(&model)?;
        let point = CurvePoint {
            epoch,
            train_mse: loss_sum / order.len() as f64,
            val_mse: v,
            lr,
        };
        log::info!(
            "{} epoch {epoch}: train {:.4e} val {:.4e} lr {lr:.2e}",
            model.cluster_id,
            point.train_mse,
            v
        );
        curve.push(point);
        if guard.observe(v) {
            return Err(ExperimentError::Diverged {
                slot: model.cluster_id.to_string(),
                epoch,
                val_mse: v,
                initial: initial_val_mse,
                curve,
            });
        }
        if sched.update(v).stop {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        model,
        curve,
        initial_val_mse,
        identity_val_mse,
        stopped_early,
        lr_reductions: sched.reductions(),
        train_items: train.len(),
        val_items: val_idx.len(),
    })
}
