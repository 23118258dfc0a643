//! Adam optimization of the fusion network over mined triplets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use crate::descriptors::{extract_feature_set, IndexedCloud, LocalDescriptor};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::net::{Gradients, NetworkConfig, NetworkParams, TripletSample};
use crate::sampler::{pair_seed, shuffle_and_batch, TripletBatch};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.99,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 512,
            epochs: 3,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        self.loss.validate()
    }
}

/// First and second moment estimates plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Gradients,
    pub v: Gradients,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &NetworkParams) -> Self {
        Self {
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut NetworkParams,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.shapes() != params.shapes() || state.m.shapes() != params.shapes() {
        return Err(Error::Shape("gradient layout does not match the parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for (((theta, g), m), v) in params
        .slices_mut()
        .into_iter()
        .zip(grads.slices())
        .zip(state.m.slices_mut())
        .zip(state.v.slices_mut())
    {
        for i in 0..theta.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            theta[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Descriptor tuples plus triplets of indices into them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingSet {
    pub tuples: Vec<Vec<Vec<f64>>>,
    pub triplets: Vec<[usize; 3]>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    fn samples(&self, ids: &[[usize; 3]]) -> Vec<TripletSample<'_, Vec<f64>>> {
        ids.iter()
            .map(|&[a, p, n]| TripletSample {
                anchor: &self.tuples[a][..],
                positive: &self.tuples[p][..],
                negative: &self.tuples[n][..],
            })
            .collect()
    }

    /// Describes the points referenced by `batch` and appends its triplets.
    /// Triplets touching a point that could not be described are skipped.
    /// Returns the number of triplets added.
    pub fn add_pair(
        &mut self,
        source: &IndexedCloud,
        target: &IndexedCloud,
        batch: &TripletBatch,
        descriptors: &[Arc<dyn LocalDescriptor>],
    ) -> Result<usize> {
        let mut src: Vec<usize> = batch.triplets.iter().map(|t| t.anchor).collect();
        src.sort_unstable();
        src.dedup();
        let mut tgt: Vec<usize> = batch
            .triplets
            .iter()
            .flat_map(|t| [t.positive, t.negative])
            .collect();
        tgt.sort_unstable();
        tgt.dedup();
        let mut rows = |set: crate::descriptors::FeatureSet| -> BTreeMap<usize, usize> {
            let base = self.tuples.len();
            let map = set
                .keypoints()
                .iter()
                .enumerate()
                .map(|(i, &k)| (k, base + i))
                .collect();
            self.tuples.extend(set.tuples().iter().cloned());
            map
        };
        let src_rows = rows(extract_feature_set(source, &src, descriptors)?);
        let tgt_rows = rows(extract_feature_set(target, &tgt, descriptors)?);
        let before = self.triplets.len();
        for t in &batch.triplets {
            if let (Some(&a), Some(&p), Some(&n)) = (
                src_rows.get(&t.anchor),
                tgt_rows.get(&t.positive),
                tgt_rows.get(&t.negative),
            ) {
                self.triplets.push([a, p, n]);
            }
        }
        Ok(self.triplets.len() - before)
    }

    /// Mean loss over the whole set, without updating anything.
    pub fn mean_loss(&self, params: &NetworkParams, loss: &LossConfig) -> Result<f64> {
        params.batch_loss(&self.samples(&self.triplets), loss)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_auc: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Mean loss over the training set before the first update.
    pub initial_loss: f64,
    /// Mean loss over the training set after the last update.
    pub final_loss: f64,
    pub wall_seconds: f64,
    pub digest: String,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,val_auc,seconds\n");
        for e in &self.epochs {
            let auc = e.val_auc.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{:.3}", e.epoch, e.mean_loss, auc, e.seconds);
        }
        out
    }

    /// Equality ignoring wall-clock fields.
    pub fn same_outcome(&self, other: &TrainReport) -> bool {
        self.initial_loss == other.initial_loss
            && self.final_loss == other.final_loss
            && self.digest == other.digest
            && self.epochs.len() == other.epochs.len()
            && self
                .epochs
                .iter()
                .zip(&other.epochs)
                .all(|(a, b)| a.epoch == b.epoch && a.mean_loss == b.mean_loss && a.val_auc == b.val_auc)
    }
}

/// Per-epoch observer; its value is recorded and never feeds back into training.
pub type Validator<'a> = dyn FnMut(&NetworkParams) -> Result<f64> + 'a;

/// Trains a freshly initialized network. Every batch runs one shared-weight
/// forward over its anchors, positives and negatives, then one Adam step.
pub fn train(
    data: &TrainingSet,
    net: NetworkConfig,
    cfg: &TrainConfig,
    mut validator: Option<&mut Validator<'_>>,
) -> Result<(NetworkParams, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyBatch("training set holds no triplets".into()));
    }
    let started = Instant::now();
    let mut params = NetworkParams::init(net, cfg.seed)?;
    let mut state = AdamState::new(&params);
    let initial_loss = data.mean_loss(&params, &cfg.loss)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let batches = shuffle_and_batch(&data.triplets, cfg.batch_size, pair_seed(cfg.seed, epoch as u64 + 1))?;
        let mut total = 0.0;
        for (b, ids) in batches.iter().enumerate() {
            let samples = data.samples(ids);
            let (loss, grads) = params.backward(&samples, &cfg.loss).map_err(|e| match e {
                Error::NumericOverflow(m) => {
                    Error::NumericOverflow(format!("epoch {epoch}, batch {b}: {m}"))
                }
                other => other,
            })?;
            total += loss * ids.len() as f64;
            adam_step(&mut params, &grads, &mut state, cfg)?;
        }
        let mean_loss = total / data.len() as f64;
        let val_auc = match validator.as_mut() {
            Some(v) => Some(v(&params)?),
            None => None,
        };
        log::info!("epoch {epoch}: loss {mean_loss:.5}");
        epochs.push(EpochRecord {
            epoch,
            mean_loss,
            val_auc,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    let final_loss = data.mean_loss(&params, &cfg.loss)?;
    let report = TrainReport {
        epochs,
        initial_loss,
        final_loss,
        wall_seconds: started.elapsed().as_secs_f64(),
        digest: params.digest(),
    };
    Ok((params, report))
}
