//! The state-aware rate predictor: a prediction network that forecasts the
//! next frame's MCS from CSI and flight state, an evaluation network that
//! labels the current frame from CSI alone, offline training of both, the
//! training prober and FC-only online fine-tuning against the evaluation
//! network's soft outputs.

use std::collections::VecDeque;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{AdapterObservation, RateAdapter, ThresholdEvaluator};
use crate::channel::ChannelState;
use crate::error::{Error, Result};
use crate::flightsim::FlightState;
use crate::nn::loss::{cross_entropy_rows, softmax, softmax_rows};
use crate::nn::model::csi_tensor;
use crate::nn::{Adam, AdamConfig, ArchSpec, EvaluationNet, Grads, LstmState, Mode, ParamGroup, ParamStore, PredictionNet, Tensor};
use crate::phy::{McsIndex, NUM_MCS};
use crate::sync::{Features, LabeledSample, LabeledTrace, Standardizer, STATE_FEATURES};

const NORM_TOL: f64 = 1e-6;

/// Probability over the eight MCS indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateDistribution([f64; NUM_MCS]);

impl RateDistribution {
    pub fn new(weights: [f64; NUM_MCS]) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > NORM_TOL {
            return Err(Error::domain(format!(
                "rate distribution must be non-negative and sum to 1 (sum {sum})"
            )));
        }
        Ok(RateDistribution(weights))
    }

    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.len() != NUM_MCS {
            return Err(Error::config(format!(
                "expected {NUM_MCS} logits, got {}",
                logits.len()
            )));
        }
        Self::from_slice(&softmax(logits))
    }

    pub fn from_slice(p: &[f64]) -> Result<Self> {
        let arr: [f64; NUM_MCS] = p
            .try_into()
            .map_err(|_| Error::config(format!("expected {NUM_MCS} probabilities, got {}", p.len())))?;
        Self::new(arr)
    }

    pub fn one_hot(mcs: McsIndex) -> Self {
        RateDistribution(mcs.one_hot())
    }

    pub fn weights(&self) -> &[f64; NUM_MCS] {
        &self.0
    }

    /// Most probable index; ties go to the lower index.
    pub fn argmax(&self) -> McsIndex {
        let mut best = 0;
        for i in 1..NUM_MCS {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        McsIndex::saturating(best)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub arch: ArchSpec,
    pub seed: u64,
    pub pred_epochs: usize,
    pub eval_epochs: usize,
    pub batch: usize,
    pub window: usize,
    pub lr: f64,
    /// Cosine decay target as a fraction of `lr`, reached on the last epoch.
    pub final_lr_fraction: f64,
    pub clip_norm: Option<f64>,
    /// Trailing fraction of every trace held out for validation.
    pub validation_fraction: f64,
    /// Permute training labels (no-signal control).
    pub shuffle_labels: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: ArchSpec::default(),
            seed: 0,
            pred_epochs: 20,
            eval_epochs: 20,
            batch: 64,
            window: 16,
            lr: 1e-3,
            final_lr_fraction: 0.05,
            clip_norm: Some(5.0),
            validation_fraction: 0.2,
            shuffle_labels: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.arch.classes != NUM_MCS || self.arch.state_features != STATE_FEATURES {
            return Err(Error::config(format!(
                "architecture must have {NUM_MCS} classes and {STATE_FEATURES} state features"
            )));
        }
        if self.batch == 0 || self.window == 0 {
            return Err(Error::config("batch and window must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::config("final_lr_fraction must be in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("validation_fraction must be in [0, 1)"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub config_hash: String,
    pub train_frames: usize,
    pub val_frames: usize,
    pub label_histogram: [usize; NUM_MCS],
    pub pred: Vec<EpochStats>,
    pub eval: Vec<EpochStats>,
}

impl TrainingReport {
    pub fn final_pred_val_accuracy(&self) -> Option<f64> {
        self.pred.last().and_then(|e| e.val_accuracy)
    }

    pub fn final_eval_val_accuracy(&self) -> Option<f64> {
        self.eval.last().and_then(|e| e.val_accuracy)
    }
}

/// Featurized frames of one contiguous segment.
#[derive(Debug, Clone, Default)]
pub struct FeatureSequence {
    pub csi: Vec<Vec<f64>>,
    pub state: Vec<[f64; STATE_FEATURES]>,
    pub labels: Vec<usize>,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.csi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.csi.is_empty()
    }

    pub fn from_samples(samples: &[LabeledSample], standardizer: &Standardizer) -> Result<Self> {
        let mut seq = FeatureSequence::default();
        for s in samples {
            let f = standardizer.featurize(&s.channel, &s.flight)?;
            seq.push(f, s.label.get());
        }
        Ok(seq)
    }

    pub fn push(&mut self, f: Features, label: usize) {
        self.csi.push(f.csi);
        self.state.push(f.state);
        self.labels.push(label);
    }
}

/// Trained prediction and evaluation networks with their input
/// standardization.
#[derive(Debug, Clone)]
pub struct StateRateModel {
    pub pred: PredictionNet,
    pub eval: EvaluationNet,
    pub standardizer: Standardizer,
    pub config: TrainConfig,
}

impl StateRateModel {
    pub fn featurize(&self, channel: &ChannelState, flight: &FlightState) -> Result<Features> {
        self.standardizer.featurize(channel, flight)
    }

    pub fn zero_state(&self) -> LstmState {
        self.pred.zero_state(1)
    }

    /// One prediction step: distribution over the next frame's MCS.
    pub fn predict(&self, input: &Features, state: &LstmState) -> Result<(RateDistribution, LstmState)> {
        let (p, next) = self.pred.step(&input.csi, &input.state, state)?;
        Ok((RateDistribution::from_slice(&p)?, next))
    }

    /// Distribution over the current frame's MCS from its CSI and RSSI.
    pub fn evaluate(&self, input: &Features) -> Result<RateDistribution> {
        let p = self.eval.evaluate(&input.csi, input.state[STATE_FEATURES - 1])?;
        RateDistribution::from_slice(&p)
    }

    /// Predictions for a whole sequence from the zero state; entry `n` is
    /// the forecast for frame `n + 1`.
    pub fn predict_sequence(&self, seq: &FeatureSequence) -> Result<Vec<RateDistribution>> {
        predict_sequence_with(&self.pred, seq)
    }

    pub fn evaluate_sequence(&self, seq: &FeatureSequence) -> Result<Vec<RateDistribution>> {
        evaluate_sequence_with(&self.eval, seq)
    }
}

const INFER_CHUNK: usize = 256;

fn predict_sequence_with(net: &PredictionNet, seq: &FeatureSequence) -> Result<Vec<RateDistribution>> {
    let mut state = net.zero_state(1);
    let mut out = Vec::with_capacity(seq.len());
    for start in (0..seq.len()).step_by(INFER_CHUNK) {
        let end = (start + INFER_CHUNK).min(seq.len());
        let csi = csi_tensor(seq.csi[start..end].iter().map(|v| v.as_slice()), net.arch.subcarriers)?;
        let st: Vec<f64> = seq.state[start..end].iter().flatten().copied().collect();
        let (logits, next, _) = net.forward_with(&net.params, &csi, &st, end - start, 1, Some(&state), Mode::Infer)?;
        state = next;
        for row in softmax_rows(logits.data(), NUM_MCS).chunks(NUM_MCS) {
            out.push(RateDistribution::from_slice(row)?);
        }
    }
    Ok(out)
}

fn evaluate_sequence_with(net: &EvaluationNet, seq: &FeatureSequence) -> Result<Vec<RateDistribution>> {
    let mut out = Vec::with_capacity(seq.len());
    for start in (0..seq.len()).step_by(INFER_CHUNK) {
        let end = (start + INFER_CHUNK).min(seq.len());
        let csi = csi_tensor(seq.csi[start..end].iter().map(|v| v.as_slice()), net.arch.subcarriers)?;
        let rssi: Vec<f64> = seq.state[start..end].iter().map(|s| s[STATE_FEATURES - 1]).collect();
        for row in net.evaluate_batch(&csi, &rssi)?.chunks(NUM_MCS) {
            out.push(RateDistribution::from_slice(row)?);
        }
    }
    Ok(out)
}

/// Fraction of forecasts whose argmax equals the next frame's label.
pub fn prediction_accuracy(preds: &[RateDistribution], labels: &[usize]) -> f64 {
    let n = preds.len().min(labels.len().saturating_sub(1));
    if n == 0 {
        return 0.0;
    }
    let hits = (0..n).filter(|&i| preds[i].argmax().get() == labels[i + 1]).count();
    hits as f64 / n as f64
}

/// Fraction of same-frame evaluations whose argmax equals the label.
pub fn evaluation_accuracy(evals: &[RateDistribution], labels: &[usize]) -> f64 {
    let n = evals.len().min(labels.len());
    if n == 0 {
        return 0.0;
    }
    let hits = (0..n).filter(|&i| evals[i].argmax().get() == labels[i]).count();
    hits as f64 / n as f64
}

fn one_hot_rows(labels: &[usize]) -> Vec<f64> {
    let mut t = vec![0.0; labels.len() * NUM_MCS];
    for (r, &l) in labels.iter().enumerate() {
        t[r * NUM_MCS + l] = 1.0;
    }
    t
}

fn argmax_hits(probs: &[f64], labels: &[usize]) -> usize {
    probs
        .chunks(NUM_MCS)
        .zip(labels)
        .filter(|(p, &l)| RateDistribution((*p).try_into().expect("row width")).argmax().get() == l)
        .count()
}

struct Split {
    train: Vec<FeatureSequence>,
    val: Vec<FeatureSequence>,
}

fn split_and_featurize(traces: &[LabeledTrace], cfg: &TrainConfig) -> Result<(Split, Standardizer)> {
    let mut train_parts = Vec::new();
    let mut val_parts = Vec::new();
    for t in traces {
        let n = t.samples.len();
        let n_val = (n as f64 * cfg.validation_fraction).round() as usize;
        let n_train = n - n_val;
        if n_train >= 2 {
            train_parts.push(&t.samples[..n_train]);
        }
        if n_val >= 2 {
            val_parts.push(&t.samples[n_train..]);
        }
    }
    if train_parts.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let standardizer = Standardizer::fit(train_parts.iter().flat_map(|p| p.iter()))?;
    let train = train_parts
        .iter()
        .map(|p| FeatureSequence::from_samples(p, &standardizer))
        .collect::<Result<Vec<_>>>()?;
    let val = val_parts
        .iter()
        .map(|p| FeatureSequence::from_samples(p, &standardizer))
        .collect::<Result<Vec<_>>>()?;
    Ok((Split { train, val }, standardizer))
}

/// Trains both networks. Training labels are permuted when
/// `config.shuffle_labels` is set; validation labels never are.
pub fn train_offline(traces: &[LabeledTrace], config: &TrainConfig) -> Result<(StateRateModel, TrainingReport)> {
    config.validate()?;
    if traces.iter().all(|t| t.is_empty()) {
        return Err(Error::config("training dataset is empty"));
    }
    let (mut split, standardizer) = split_and_featurize(traces, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    if config.shuffle_labels {
        let mut all: Vec<usize> = split.train.iter().flat_map(|s| s.labels.iter().copied()).collect();
        all.shuffle(&mut rng);
        let mut it = all.into_iter();
        for s in &mut split.train {
            for l in &mut s.labels {
                *l = it.next().expect("same length");
            }
        }
    }
    let mut label_histogram = [0usize; NUM_MCS];
    for s in &split.train {
        for &l in &s.labels {
            label_histogram[l] += 1;
        }
    }
    let mut pred = PredictionNet::new(&config.arch, config.seed ^ 0x5052_4544)?;
    let mut eval = EvaluationNet::new(&config.arch, config.seed ^ 0x4556_414c)?;
    let pred_stats = train_prediction(&mut pred, &split, config, &mut rng)?;
    let eval_stats = train_evaluation(&mut eval, &split, config, &mut rng)?;
    let report = TrainingReport {
        config_hash: config.hash(),
        train_frames: split.train.iter().map(|s| s.len()).sum(),
        val_frames: split.val.iter().map(|s| s.len()).sum(),
        label_histogram,
        pred: pred_stats,
        eval: eval_stats,
    };
    Ok((
        StateRateModel {
            pred,
            eval,
            standardizer,
            config: config.clone(),
        },
        report,
    ))
}

/// Cosine schedule from `lr` down to `lr · final_lr_fraction`.
fn epoch_lr(cfg: &TrainConfig, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return cfg.lr;
    }
    let progress = epoch as f64 / (epochs - 1) as f64;
    let f = cfg.final_lr_fraction;
    cfg.lr * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Concatenated (input n, target n+1) pairs cut into `batch` equal streams.
struct Streams {
    csi: Vec<Vec<Vec<f64>>>,
    state: Vec<Vec<[f64; STATE_FEATURES]>>,
    target: Vec<Vec<usize>>,
    len: usize,
}

fn build_streams(train: &[FeatureSequence], batch: usize) -> Result<Streams> {
    let mut csi = Vec::new();
    let mut state = Vec::new();
    let mut target = Vec::new();
    for s in train {
        for n in 0..s.len().saturating_sub(1) {
            csi.push(&s.csi[n]);
            state.push(s.state[n]);
            target.push(s.labels[n + 1]);
        }
    }
    let batch = batch.min(csi.len()).max(1);
    let len = csi.len() / batch;
    if len == 0 {
        return Err(Error::config("not enough training frames for one stream"));
    }
    let mut st = Streams {
        csi: Vec::with_capacity(batch),
        state: Vec::with_capacity(batch),
        target: Vec::with_capacity(batch),
        len,
    };
    for b in 0..batch {
        let r = b * len..(b + 1) * len;
        st.csi.push(csi[r.clone()].iter().map(|v| v.to_vec()).collect());
        st.state.push(state[r.clone()].to_vec());
        st.target.push(target[r].to_vec());
    }
    Ok(st)
}

fn train_prediction(
    net: &mut PredictionNet,
    split: &Split,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochStats>> {
    use rand::Rng;
    // `batch` counts frames per step: batch / window parallel streams.
    let streams = build_streams(&split.train, (cfg.batch / cfg.window).max(1))?;
    let batch = streams.csi.len();
    let mut adam = Adam::new(
        &net.params,
        AdamConfig {
            lr: cfg.lr,
            clip_norm: cfg.clip_norm,
            ..AdamConfig::default()
        },
    );
    let w = cfg.window.min(streams.len);
    let mut stats = Vec::with_capacity(cfg.pred_epochs);
    for epoch in 0..cfg.pred_epochs {
        adam.config.lr = epoch_lr(cfg, epoch, cfg.pred_epochs);
        let offset = if streams.len > w { rng.random_range(0..w.min(streams.len - w + 1)) } else { 0 };
        let mut state = net.zero_state(batch);
        let (mut loss_sum, mut hits, mut count) = (0.0, 0usize, 0usize);
        let mut start = offset;
        while start + w <= streams.len {
            // Time-major rows: row t·batch + b.
            let mut planes = Vec::with_capacity(w * batch);
            let mut st = Vec::with_capacity(w * batch * STATE_FEATURES);
            let mut labels = Vec::with_capacity(w * batch);
            for t in start..start + w {
                for b in 0..batch {
                    planes.push(streams.csi[b][t].as_slice());
                    st.extend_from_slice(&streams.state[b][t]);
                    labels.push(streams.target[b][t]);
                }
            }
            let csi = csi_tensor(planes, cfg.arch.subcarriers)?;
            let (logits, next, cache) =
                net.forward_with(&net.params, &csi, &st, w, batch, Some(&state), Mode::Train)?;
            let probs = softmax_rows(logits.data(), NUM_MCS);
            let (loss, dz) = cross_entropy_rows(&probs, &one_hot_rows(&labels), NUM_MCS)?;
            let mut grads = Grads::zeros_like(&net.params);
            net.backward_with(&net.params, &cache, &Tensor::from_vec(logits.shape(), dz)?, &mut grads)?;
            adam.step(&mut net.params, &grads);
            net.commit_running(&cache);
            loss_sum += loss * labels.len() as f64;
            hits += argmax_hits(&probs, &labels);
            count += labels.len();
            state = next;
            start += w;
        }
        let val_accuracy = validation_accuracy(&split.val, |seq| {
            Ok(prediction_accuracy(&predict_sequence_with(net, seq)?, &seq.labels))
        })?;
        stats.push(EpochStats {
            epoch,
            train_loss: loss_sum / count.max(1) as f64,
            train_accuracy: hits as f64 / count.max(1) as f64,
            val_accuracy,
        });
    }
    Ok(stats)
}

/// Frame-weighted mean over validation segments.
fn validation_accuracy(
    val: &[FeatureSequence],
    mut acc: impl FnMut(&FeatureSequence) -> Result<f64>,
) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut weight = 0.0;
    for seq in val {
        let n = seq.len() as f64;
        total += acc(seq)? * n;
        weight += n;
    }
    Ok((weight > 0.0).then(|| total / weight))
}

fn train_evaluation(
    net: &mut EvaluationNet,
    split: &Split,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochStats>> {
    let frames: Vec<(usize, usize)> = split
        .train
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| (0..seq.len()).map(move |n| (s, n)))
        .collect();
    let mut adam = Adam::new(
        &net.params,
        AdamConfig {
            lr: cfg.lr,
            clip_norm: cfg.clip_norm,
            ..AdamConfig::default()
        },
    );
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut stats = Vec::with_capacity(cfg.eval_epochs);
    for epoch in 0..cfg.eval_epochs {
        adam.config.lr = epoch_lr(cfg, epoch, cfg.eval_epochs);
        order.shuffle(rng);
        let (mut loss_sum, mut hits, mut count) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch) {
            if chunk.len() < 2 {
                continue;
            }
            let picks: Vec<(usize, usize)> = chunk.iter().map(|&i| frames[i]).collect();
            let csi = csi_tensor(
                picks.iter().map(|&(s, n)| split.train[s].csi[n].as_slice()),
                cfg.arch.subcarriers,
            )?;
            let rssi: Vec<f64> = picks
                .iter()
                .map(|&(s, n)| split.train[s].state[n][STATE_FEATURES - 1])
                .collect();
            let labels: Vec<usize> = picks.iter().map(|&(s, n)| split.train[s].labels[n]).collect();
            let (logits, cache) = net.forward_with(&net.params, &csi, &rssi, Mode::Train)?;
            let probs = softmax_rows(logits.data(), NUM_MCS);
            let (loss, dz) = cross_entropy_rows(&probs, &one_hot_rows(&labels), NUM_MCS)?;
            let mut grads = Grads::zeros_like(&net.params);
            net.backward_with(&net.params, &cache, &Tensor::from_vec(logits.shape(), dz)?, &mut grads)?;
            adam.step(&mut net.params, &grads);
            net.commit_running(&cache);
            loss_sum += loss * labels.len() as f64;
            hits += argmax_hits(&probs, &labels);
            count += labels.len();
        }
        let val_accuracy = validation_accuracy(&split.val, |seq| {
            Ok(evaluation_accuracy(&evaluate_sequence_with(net, seq)?, &seq.labels))
        })?;
        stats.push(EpochStats {
            epoch,
            train_loss: loss_sum / count.max(1) as f64,
            train_accuracy: hits as f64 / count.max(1) as f64,
            val_accuracy,
        });
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProberConfig {
    pub distance_threshold: f64,
    pub accuracy_window: usize,
    pub accuracy_threshold: f64,
    pub cooldown_frames: usize,
    pub buffer_capacity: usize,
}

impl Default for ProberConfig {
    fn default() -> Self {
        ProberConfig {
            distance_threshold: 50.0,
            accuracy_window: 100,
            accuracy_threshold: 0.7,
            cooldown_frames: 1000,
            buffer_capacity: 2000,
        }
    }
}

impl ProberConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.accuracy_threshold > 0.0 && self.accuracy_threshold <= 1.0) {
            return Err(Error::config("accuracy_threshold must be in (0, 1]"));
        }
        if self.accuracy_window == 0 || self.buffer_capacity == 0 {
            return Err(Error::config("accuracy_window and buffer_capacity must be positive"));
        }
        if !(self.distance_threshold >= 0.0) {
            return Err(Error::config("distance_threshold must be non-negative"));
        }
        Ok(())
    }
}

/// Decides when to fine-tune, and keeps the recent samples to fine-tune on.
#[derive(Debug, Clone)]
pub struct ProberState {
    pub config: ProberConfig,
    pub takeoff_position: [f64; 3],
    window: VecDeque<bool>,
    correct_in_window: usize,
    buffer: VecDeque<(ChannelState, FlightState)>,
    cooldown: usize,
}

impl ProberState {
    pub fn new(config: ProberConfig, takeoff_position: [f64; 3]) -> Result<Self> {
        config.validate()?;
        Ok(ProberState {
            config,
            takeoff_position,
            window: VecDeque::with_capacity(config.accuracy_window),
            correct_in_window: 0,
            buffer: VecDeque::with_capacity(config.buffer_capacity),
            cooldown: 0,
        })
    }

    pub fn cooldown(&self) -> usize {
        self.cooldown
    }

    pub fn buffer(&self) -> &VecDeque<(ChannelState, FlightState)> {
        &self.buffer
    }

    /// Windowed accuracy, or `None` until the window holds K results.
    pub fn windowed_accuracy(&self) -> Option<f64> {
        (self.window.len() == self.config.accuracy_window)
            .then(|| self.correct_in_window as f64 / self.window.len() as f64)
    }

    pub fn distance_from_takeoff(&self, flight: &FlightState) -> f64 {
        flight
            .position
            .iter()
            .zip(&self.takeoff_position)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Records one frame and returns whether fine-tuning should start now.
///
/// Triggers iff the UAV is farther than the distance threshold from takeoff,
/// a full window's accuracy is below the threshold, and no cooldown is
/// pending. A trigger starts a cooldown of `cooldown_frames` frames.
pub fn prober_step(
    state: &mut ProberState,
    channel: &ChannelState,
    flight: &FlightState,
    prediction_correct: bool,
) -> bool {
    let k = state.config.accuracy_window;
    if state.window.len() == k && state.window.pop_front() == Some(true) {
        state.correct_in_window -= 1;
    }
    state.window.push_back(prediction_correct);
    if prediction_correct {
        state.correct_in_window += 1;
    }
    if state.buffer.len() == state.config.buffer_capacity {
        state.buffer.pop_front();
    }
    state.buffer.push_back((channel.clone(), *flight));

    let far = state.distance_from_takeoff(flight) > state.config.distance_threshold;
    let inaccurate = state
        .windowed_accuracy()
        .is_some_and(|a| a < state.config.accuracy_threshold);
    let trigger = far && inaccurate && state.cooldown == 0;
    if trigger {
        state.cooldown = state.config.cooldown_frames;
    } else {
        state.cooldown = state.cooldown.saturating_sub(1);
    }
    trigger
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 5,
            lr: 1e-4,
            batch: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub samples: usize,
    pub epoch_losses: Vec<f64>,
    /// L2 norm of the change in classifier parameters.
    pub fc_change_norm: f64,
    pub skipped: Option<String>,
}

/// Top-layer LSTM outputs of the frozen body over a buffer, from the zero
/// recurrent state.
pub fn body_outputs(pred: &PredictionNet, seq: &FeatureSequence) -> Result<Vec<Vec<f64>>> {
    let mut state = pred.zero_state(1);
    let mut out = Vec::with_capacity(seq.len());
    for n in 0..seq.len() {
        let csi = csi_tensor([seq.csi[n].as_slice()], pred.arch.subcarriers)?;
        let (h, next) = pred.body_step(&csi, &seq.state[n], &state)?;
        out.push(h.into_data());
        state = next;
    }
    Ok(out)
}

/// Trains only the classifier head on `(hidden, target)` pairs with
/// soft-target cross-entropy. Every other block is left untouched.
pub fn finetune_head(
    pred: &PredictionNet,
    hidden: &[Vec<f64>],
    targets: &[RateDistribution],
    config: &FinetuneConfig,
) -> Result<(PredictionNet, FinetuneReport)> {
    let mut next = pred.clone();
    let n = hidden.len().min(targets.len());
    if n == 0 {
        return Ok((
            next,
            FinetuneReport {
                samples: 0,
                epoch_losses: Vec::new(),
                fc_change_norm: 0.0,
                skipped: Some("empty fine-tuning buffer".to_string()),
            },
        ));
    }
    let before = pred.params.group_values(ParamGroup::Classifier);
    let hs = pred.arch.lstm_hidden;
    let mut adam = Adam::new(
        &next.params,
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    )
    .restricted_to(&[ParamGroup::Classifier]);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch.max(1)) {
            let x: Vec<f64> = chunk.iter().flat_map(|&i| hidden[i].iter().copied()).collect();
            let t: Vec<f64> = chunk.iter().flat_map(|&i| targets[i].weights().iter().copied()).collect();
            let x = Tensor::from_vec(&[chunk.len(), hs], x)?;
            let (logits, cache) = next.head().forward(&next.params, &x)?;
            let probs = softmax_rows(logits.data(), NUM_MCS);
            let (loss, dz) = cross_entropy_rows(&probs, &t, NUM_MCS)?;
            let mut grads = Grads::zeros_like(&next.params);
            next.head()
                .backward(&next.params, &cache, &Tensor::from_vec(logits.shape(), dz)?, &mut grads)?;
            adam.step(&mut next.params, &grads);
            total += loss * chunk.len() as f64;
        }
        epoch_losses.push(total / n as f64);
    }
    let after = next.params.group_values(ParamGroup::Classifier);
    let fc_change_norm = before
        .iter()
        .zip(&after)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok((
        next,
        FinetuneReport {
            samples: n,
            epoch_losses,
            fc_change_norm,
            skipped: None,
        },
    ))
}

/// Cross-modal fine-tuning: the prediction for frame `n + 1` is pulled toward
/// the evaluation network's soft output on frame `n + 1`. Returns updated
/// prediction parameters; the input model is not modified.
pub fn finetune_online(
    model: &StateRateModel,
    buffer: &[(ChannelState, FlightState)],
    config: &FinetuneConfig,
) -> Result<(PredictionNet, FinetuneReport)> {
    finetune_against(model, buffer, None, config)
}

/// [`finetune_online`] with an optional threshold rule standing in for the
/// evaluation network as the source of virtual labels.
pub fn finetune_against(
    model: &StateRateModel,
    buffer: &[(ChannelState, FlightState)],
    evaluator: Option<&ThresholdEvaluator>,
    config: &FinetuneConfig,
) -> Result<(PredictionNet, FinetuneReport)> {
    if buffer.len() < 2 {
        return finetune_head(&model.pred, &[], &[], config);
    }
    let mut seq = FeatureSequence::default();
    for (c, f) in buffer {
        seq.push(model.featurize(c, f)?, 0);
    }
    let hidden = body_outputs(&model.pred, &seq)?;
    let soft = match evaluator {
        Some(e) => buffer.iter().map(|(c, _)| e.evaluate(c)).collect(),
        None => model.evaluate_sequence(&seq)?,
    };
    finetune_head(&model.pred, &hidden[..hidden.len() - 1], &soft[1..], config)
}

/// Online behaviour of [`StateRateAdapter`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineConfig {
    pub prober: ProberConfig,
    pub finetune: FinetuneConfig,
}

/// Rate adapter driven by the prediction network.
///
/// Before frame `n` it featurizes the ACK channel and sensor reading of frame
/// `n - 1` and forecasts frame `n`. In online mode the evaluation network
/// labels frame `n - 1`, its agreement with the forecast made for that frame
/// feeds the prober, and a trigger fine-tunes the classifier on a snapshot
/// of the prober buffer before the next forecast.
#[derive(Debug, Clone)]
pub struct StateRateAdapter {
    name: String,
    model: StateRateModel,
    state: LstmState,
    online: Option<(ProberState, FinetuneConfig)>,
    evaluator: Option<ThresholdEvaluator>,
    last_forecast: Option<McsIndex>,
    finetunes: usize,
}

impl StateRateAdapter {
    pub fn new(model: StateRateModel) -> Self {
        let state = model.zero_state();
        StateRateAdapter {
            name: "staterate".to_string(),
            model,
            state,
            online: None,
            evaluator: None,
            last_forecast: None,
            finetunes: 0,
        }
    }

    /// Online variant; `takeoff_position` anchors the prober's distance signal.
    pub fn online(model: StateRateModel, config: OnlineConfig, takeoff_position: [f64; 3]) -> Result<Self> {
        let prober = ProberState::new(config.prober, takeoff_position)?;
        let mut adapter = Self::new(model);
        adapter.name = "staterate_online".to_string();
        adapter.online = Some((prober, config.finetune));
        Ok(adapter)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Replaces the evaluation network as the online label source.
    pub fn with_evaluator(mut self, evaluator: ThresholdEvaluator) -> Self {
        self.evaluator = Some(evaluator);
        self
    }

    pub fn model(&self) -> &StateRateModel {
        &self.model
    }

    pub fn prober(&self) -> Option<&ProberState> {
        self.online.as_ref().map(|(p, _)| p)
    }
}

impl RateAdapter for StateRateAdapter {
    fn name(&self) -> &str {
        &self.name
    }

    fn choose(&mut self, obs: &AdapterObservation) -> Result<McsIndex> {
        let Some(channel) = obs.last_channel else {
            return Ok(McsIndex::LOWEST);
        };
        let input = self.model.featurize(channel, obs.flight)?;
        if let Some((prober, finetune)) = &mut self.online {
            let virtual_label = match &self.evaluator {
                Some(e) => e.label(channel),
                None => self.model.evaluate(&input)?.argmax(),
            };
            let correct = self.last_forecast == Some(virtual_label);
            if prober_step(prober, channel, obs.flight, correct) {
                let snapshot: Vec<_> = prober.buffer().iter().cloned().collect();
                let cfg = FinetuneConfig {
                    seed: finetune.seed.wrapping_add(self.finetunes as u64),
                    ..*finetune
                };
                let (pred, _) = finetune_against(&self.model, &snapshot, self.evaluator.as_ref(), &cfg)?;
                self.model.pred = pred;
                self.finetunes += 1;
            }
        }
        let (dist, next) = self.model.predict(&input, &self.state)?;
        self.state = next;
        let mcs = dist.argmax();
        self.last_forecast = Some(mcs);
        Ok(mcs)
    }

    fn finetune_count(&self) -> usize {
        self.finetunes
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SRCKPT\0\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: TrainConfig,
    config_hash: String,
    n_subcarriers: usize,
}

fn push_block(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn f64s_to_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

impl StateRateModel {
    /// Checkpoint layout: magic, version (u32 LE), then length-prefixed
    /// (u64 LE) blocks: JSON header, standardizer values, prediction
    /// parameters, evaluation parameters.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            config_hash: self.config.hash(),
            n_subcarriers: self.standardizer.n_subcarriers(),
        };
        let s = &self.standardizer;
        let mut stdz = Vec::new();
        stdz.extend_from_slice(&s.csi_mean);
        stdz.extend_from_slice(&s.csi_std);
        stdz.extend_from_slice(&s.state_mean);
        stdz.extend_from_slice(&s.state_std);
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        push_block(&mut out, &serde_json::to_vec(&header).expect("header serializes"));
        push_block(&mut out, &f64s_to_bytes(&stdz));
        push_block(&mut out, &self.pred.params.to_bytes());
        push_block(&mut out, &self.eval.params.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(origin, msg);
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mut offset = 12;
        let mut next_block = || -> Result<&[u8]> {
            let len = bytes
                .get(offset..offset + 8)
                .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
                .ok_or_else(|| bad("truncated checkpoint".into()))?;
            let block = bytes
                .get(offset + 8..offset + 8 + len)
                .ok_or_else(|| bad("truncated checkpoint".into()))?;
            offset += 8 + len;
            Ok(block)
        };
        let header: CheckpointHeader = serde_json::from_slice(next_block()?)?;
        if header.config_hash != header.config.hash() {
            return Err(bad("config hash does not match stored config".into()));
        }
        let stdz: Vec<f64> = next_block()?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let w = 2 * header.n_subcarriers;
        if stdz.len() != 2 * w + 2 * STATE_FEATURES {
            return Err(bad("standardization block has the wrong size".into()));
        }
        let standardizer = Standardizer {
            csi_mean: stdz[..w].to_vec(),
            csi_std: stdz[w..2 * w].to_vec(),
            state_mean: stdz[2 * w..2 * w + STATE_FEATURES].try_into().expect("width"),
            state_std: stdz[2 * w + STATE_FEATURES..].try_into().expect("width"),
        };
        let pred_params = ParamStore::from_bytes(next_block()?)?;
        let eval_params = ParamStore::from_bytes(next_block()?)?;
        let mut pred = PredictionNet::new(&header.config.arch, 0)?;
        pred.params.load_from(&pred_params)?;
        let mut eval = EvaluationNet::new(&header.config.arch, 0)?;
        eval.params.load_from(&eval_params)?;
        Ok(StateRateModel {
            pred,
            eval,
            standardizer,
            config: header.config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flight_at(x: f64) -> FlightState {
        FlightState {
            timestamp: 0.0,
            position: [x, 0.0, 0.0],
            distance: x,
            speed: 0.0,
            accel: 0.0,
        }
    }

    fn chan() -> ChannelState {
        ChannelState::from_csi(vec![num_complex::Complex64::new(1.0, 0.0); 4], 0.0)
    }

    #[test]
    fn argmax_ties_go_low() {
        let d = RateDistribution::new([0.0, 0.25, 0.25, 0.0, 0.25, 0.25, 0.0, 0.0]).unwrap();
        assert_eq!(d.argmax().get(), 1);
    }

    #[test]
    fn unnormalized_distribution_rejected() {
        assert!(RateDistribution::new([0.2; NUM_MCS]).is_err());
        assert!(RateDistribution::from_logits(&[0.0; 3]).is_err());
    }

    #[test]
    fn near_takeoff_never_triggers() {
        let mut p = ProberState::new(ProberConfig::default(), [0.0; 3]).unwrap();
        for i in 0..500 {
            assert!(!prober_step(&mut p, &chan(), &flight_at(10.0), i % 2 == 0));
        }
    }

    #[test]
    fn warmup_blocks_trigger() {
        let mut p = ProberState::new(ProberConfig::default(), [0.0; 3]).unwrap();
        for _ in 0..99 {
            assert!(!prober_step(&mut p, &chan(), &flight_at(80.0), false));
        }
        assert!(prober_step(&mut p, &chan(), &flight_at(80.0), false));
    }

    #[test]
    fn buffer_is_bounded_fifo() {
        let cfg = ProberConfig {
            buffer_capacity: 3,
            ..ProberConfig::default()
        };
        let mut p = ProberState::new(cfg, [0.0; 3]).unwrap();
        for i in 0..5 {
            prober_step(&mut p, &chan(), &flight_at(i as f64), true);
        }
        let xs: Vec<f64> = p.buffer().iter().map(|(_, f)| f.distance).collect();
        assert_eq!(xs, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn invalid_prober_config() {
        let cfg = ProberConfig {
            accuracy_threshold: 0.0,
            ..ProberConfig::default()
        };
        assert!(ProberState::new(cfg, [0.0; 3]).is_err());
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
