//! The CSI feature extractor and the two networks built on it.
//!
//! The prediction network maps a sequence of (CSI, flight state) frames to
//! a distribution over the next frame's MCS. The evaluation network maps a
//! single frame's CSI and RSSI to a distribution over that frame's MCS.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    maxpool_backward, maxpool_forward, relu_backward, relu_forward, BatchNorm, BatchNormCache,
    Conv1d, Conv1dCache, Dense, DenseCache, MaxPoolCache, Mode, ReluCache,
};
use super::loss::softmax_rows;
use super::lstm::{Lstm, LstmCache, LstmState};
use super::params::{Grads, ParamGroup, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSpec {
    pub subcarriers: usize,
    pub input_planes: usize,
    pub conv: Vec<ConvSpec>,
    pub state_features: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub fc_hidden: usize,
    pub classes: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            subcarriers: crate::channel::NUM_SUBCARRIERS,
            input_planes: 2,
            conv: vec![
                ConvSpec { channels: 16, kernel: 5, pool: true },
                ConvSpec { channels: 32, kernel: 5, pool: true },
                ConvSpec { channels: 32, kernel: 3, pool: false },
            ],
            state_features: crate::sync::STATE_FEATURES,
            lstm_hidden: 64,
            lstm_layers: 2,
            fc_hidden: 32,
            classes: 8,
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("subcarriers", self.subcarriers),
            ("input_planes", self.input_planes),
            ("lstm_hidden", self.lstm_hidden),
            ("lstm_layers", self.lstm_layers),
            ("fc_hidden", self.fc_hidden),
            ("classes", self.classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("architecture: {name} must be positive")));
            }
        }
        for (i, c) in self.conv.iter().enumerate() {
            if c.channels == 0 || c.kernel == 0 || c.kernel % 2 == 0 {
                return Err(Error::config(format!(
                    "architecture: conv {i} needs positive channels and an odd kernel"
                )));
            }
        }
        if self.feature_len() == 0 {
            return Err(Error::config("architecture: pooling leaves no features"));
        }
        Ok(())
    }

    /// Flattened extractor output width.
    pub fn feature_len(&self) -> usize {
        let mut len = self.subcarriers;
        let mut ch = self.input_planes;
        for c in &self.conv {
            ch = c.channels;
            if c.pool {
                len /= 2;
            }
        }
        len * ch
    }
}

/// Packs CSI planes (all real parts, then all imaginary parts) into a
/// channels-last `[rows, subcarriers, 2]` tensor.
pub fn csi_tensor<'a>(planes: impl IntoIterator<Item = &'a [f64]>, subcarriers: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    for p in planes {
        if p.len() != 2 * subcarriers {
            return Err(Error::config(format!(
                "CSI input has {} values, expected {}",
                p.len(),
                2 * subcarriers
            )));
        }
        for k in 0..subcarriers {
            data.push(p[k]);
            data.push(p[subcarriers + k]);
        }
        rows += 1;
    }
    Tensor::from_vec(&[rows, subcarriers, 2], data)
}

#[derive(Debug, Clone)]
struct Stage {
    conv: Conv1d,
    bn: BatchNorm,
    pool: bool,
}

pub struct ExtractorCache {
    stages: Vec<(Conv1dCache, BatchNormCache, ReluCache, Option<MaxPoolCache>)>,
    pre_flatten: Vec<usize>,
}

/// Conv → BN → ReLU (→ pool) stages, flattened.
#[derive(Debug, Clone)]
pub struct CsiExtractor {
    stages: Vec<Stage>,
    out_len: usize,
}

impl CsiExtractor {
    pub fn new(store: &mut ParamStore, prefix: &str, arch: &ArchSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut stages = Vec::new();
        let mut ch = arch.input_planes;
        for (i, c) in arch.conv.iter().enumerate() {
            let name = format!("{prefix}.conv{i}");
            let conv = Conv1d::new(store, &name, ch, c.channels, c.kernel, ParamGroup::Extractor, rng);
            let bn = BatchNorm::new(store, &format!("{prefix}.bn{i}"), c.channels, ParamGroup::Extractor);
            stages.push(Stage { conv, bn, pool: c.pool });
            ch = c.channels;
        }
        CsiExtractor {
            stages,
            out_len: arch.feature_len(),
        }
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    pub fn forward(&self, p: &ParamStore, x: &Tensor, mode: Mode) -> Result<(Tensor, ExtractorCache)> {
        let mut h = x.clone();
        let mut stages = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let (y, cc) = s.conv.forward(p, &h)?;
            let (y, bc) = s.bn.forward(p, &y, mode)?;
            let (y, rc) = relu_forward(&y);
            let (y, pc) = if s.pool {
                let (y, pc) = maxpool_forward(&y)?;
                (y, Some(pc))
            } else {
                (y, None)
            };
            stages.push((cc, bc, rc, pc));
            h = y;
        }
        let pre_flatten = h.shape().to_vec();
        let rows = pre_flatten[0];
        let flat = h.reshape(&[rows, self.out_len])?;
        Ok((flat, ExtractorCache { stages, pre_flatten }))
    }

    pub fn backward(&self, p: &ParamStore, cache: &ExtractorCache, dy: &Tensor, grads: &mut Grads) -> Result<Tensor> {
        if cache.stages.len() != self.stages.len() {
            return Err(Error::precondition("extractor cache from a different network"));
        }
        let mut g = dy.clone().reshape(&cache.pre_flatten)?;
        for (s, (cc, bc, rc, pc)) in self.stages.iter().zip(&cache.stages).rev() {
            if let Some(pc) = pc {
                g = maxpool_backward(pc, &g)?;
            }
            g = relu_backward(rc, &g)?;
            g = s.bn.backward(p, bc, &g, grads)?;
            g = s.conv.backward(p, cc, &g, grads)?;
        }
        Ok(g)
    }

    pub fn commit_running(&self, p: &mut ParamStore, cache: &ExtractorCache) {
        for (s, (_, bc, _, _)) in self.stages.iter().zip(&cache.stages) {
            s.bn.update_running(p, bc);
        }
    }
}

/// Concatenates `[rows, a]` and `[rows, b]` row-wise.
fn concat_rows(a: &Tensor, b: &[f64], b_width: usize) -> Result<Tensor> {
    let rows = a.rows();
    if b.len() != rows * b_width {
        return Err(Error::config(format!(
            "side input has {} values, expected {rows}×{b_width}",
            b.len()
        )));
    }
    let aw = a.row_len();
    let mut out = Vec::with_capacity(rows * (aw + b_width));
    for r in 0..rows {
        out.extend_from_slice(&a.data()[r * aw..(r + 1) * aw]);
        out.extend_from_slice(&b[r * b_width..(r + 1) * b_width]);
    }
    Tensor::from_vec(&[rows, aw + b_width], out)
}

fn split_rows(g: &Tensor, a_width: usize) -> Result<Tensor> {
    let rows = g.rows();
    let w = g.row_len();
    let mut out = Vec::with_capacity(rows * a_width);
    for r in 0..rows {
        out.extend_from_slice(&g.data()[r * w..r * w + a_width]);
    }
    Tensor::from_vec(&[rows, a_width], out)
}

pub struct HeadCache {
    fc1: DenseCache,
    relu: ReluCache,
    fc2: DenseCache,
}

/// Two fully connected layers with a ReLU between them.
#[derive(Debug, Clone)]
pub struct Head {
    fc1: Dense,
    fc2: Dense,
}

impl Head {
    fn new(store: &mut ParamStore, prefix: &str, inputs: usize, arch: &ArchSpec, rng: &mut ChaCha8Rng) -> Self {
        Head {
            fc1: Dense::new(store, &format!("{prefix}.fc1"), inputs, arch.fc_hidden, ParamGroup::Classifier, rng),
            fc2: Dense::new(store, &format!("{prefix}.fc2"), arch.fc_hidden, arch.classes, ParamGroup::Classifier, rng),
        }
    }

    pub fn forward(&self, p: &ParamStore, x: &Tensor) -> Result<(Tensor, HeadCache)> {
        let (h, fc1) = self.fc1.forward(p, x)?;
        let (h, relu) = relu_forward(&h);
        let (y, fc2) = self.fc2.forward(p, &h)?;
        Ok((y, HeadCache { fc1, relu, fc2 }))
    }

    pub fn backward(&self, p: &ParamStore, cache: &HeadCache, dy: &Tensor, grads: &mut Grads) -> Result<Tensor> {
        let g = self.fc2.backward(p, &cache.fc2, dy, grads)?;
        let g = relu_backward(&cache.relu, &g)?;
        self.fc1.backward(p, &cache.fc1, &g, grads)
    }
}

pub struct PredictionCache {
    extractor: ExtractorCache,
    lstm: LstmCache,
    head: HeadCache,
    time: usize,
    batch: usize,
}

/// Extractor → concat(state) → LSTM → FC → FC.
#[derive(Debug, Clone)]
pub struct PredictionNet {
    pub arch: ArchSpec,
    pub params: ParamStore,
    extractor: CsiExtractor,
    lstm: Lstm,
    head: Head,
}

impl PredictionNet {
    pub fn new(arch: &ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let extractor = CsiExtractor::new(&mut params, "pred.extractor", arch, &mut rng);
        let lstm = Lstm::new(
            &mut params,
            "pred.lstm",
            extractor.out_len() + arch.state_features,
            arch.lstm_hidden,
            arch.lstm_layers,
            ParamGroup::Recurrent,
            &mut rng,
        );
        let head = Head::new(&mut params, "pred.head", arch.lstm_hidden, arch, &mut rng);
        Ok(PredictionNet {
            arch: arch.clone(),
            params,
            extractor,
            lstm,
            head,
        })
    }

    pub fn zero_state(&self, batch: usize) -> LstmState {
        self.lstm.zero_state(batch)
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    /// Forward over a time-major window. `csi` is `[time·batch, subcarriers,
    /// planes]` and `state` holds `time·batch` state vectors, both ordered
    /// with time as the outer index. Returns logits `[time·batch, classes]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_with(
        &self,
        p: &ParamStore,
        csi: &Tensor,
        state: &[f64],
        time: usize,
        batch: usize,
        init: Option<&LstmState>,
        mode: Mode,
    ) -> Result<(Tensor, LstmState, PredictionCache)> {
        if csi.shape().first() != Some(&(time * batch)) {
            return Err(Error::config(format!(
                "prediction input has {:?} rows, expected {time}×{batch}",
                csi.shape().first()
            )));
        }
        let (feat, extractor) = self.extractor.forward(p, csi, mode)?;
        let joint = concat_rows(&feat, state, self.arch.state_features)?;
        let width = joint.row_len();
        let seq = joint.reshape(&[time, batch, width])?;
        let (h, last, lstm) = self.lstm.forward(p, &seq, init)?;
        let h = h.reshape(&[time * batch, self.arch.lstm_hidden])?;
        let (logits, head) = self.head.forward(p, &h)?;
        Ok((
            logits,
            last,
            PredictionCache {
                extractor,
                lstm,
                head,
                time,
                batch,
            },
        ))
    }

    pub fn backward_with(&self, p: &ParamStore, cache: &PredictionCache, dlogits: &Tensor, grads: &mut Grads) -> Result<()> {
        let g = self.head.backward(p, &cache.head, dlogits, grads)?;
        let g = g.reshape(&[cache.time, cache.batch, self.arch.lstm_hidden])?;
        let g = self.lstm.backward(p, &cache.lstm, &g, grads)?;
        let rows = cache.time * cache.batch;
        let g = g.reshape(&[rows, self.lstm.inputs])?;
        let g = split_rows(&g, self.extractor.out_len())?;
        self.extractor.backward(p, &cache.extractor, &g, grads)?;
        Ok(())
    }

    pub fn commit_running(&mut self, cache: &PredictionCache) {
        self.extractor.commit_running(&mut self.params, &cache.extractor);
    }

    /// Frozen body (extractor and LSTM) in inference mode for one time step
    /// over `batch` independent streams; returns the top LSTM output.
    pub fn body_step(&self, csi: &Tensor, state: &[f64], lstm_state: &LstmState) -> Result<(Tensor, LstmState)> {
        let batch = lstm_state.batch;
        let (feat, _) = self.extractor.forward(&self.params, csi, Mode::Infer)?;
        let joint = concat_rows(&feat, state, self.arch.state_features)?;
        let width = joint.row_len();
        let (h, next, _) = self.lstm.forward(&self.params, &joint.reshape(&[1, batch, width])?, Some(lstm_state))?;
        Ok((h.reshape(&[batch, self.arch.lstm_hidden])?, next))
    }

    /// One inference step: class probabilities for the next frame and the
    /// advanced recurrent state.
    pub fn step(&self, csi_planes: &[f64], state: &[f64], lstm_state: &LstmState) -> Result<(Vec<f64>, LstmState)> {
        if lstm_state.batch != 1 {
            return Err(Error::config("step expects a single-stream recurrent state"));
        }
        let csi = csi_tensor([csi_planes], self.arch.subcarriers)?;
        let (h, next) = self.body_step(&csi, state, lstm_state)?;
        let (logits, _) = self.head.forward(&self.params, &h)?;
        Ok((softmax_rows(logits.data(), self.arch.classes), next))
    }
}

pub struct EvaluationCache {
    extractor: ExtractorCache,
    head: HeadCache,
}

/// Extractor → concat(rssi) → FC → FC.
#[derive(Debug, Clone)]
pub struct EvaluationNet {
    pub arch: ArchSpec,
    pub params: ParamStore,
    extractor: CsiExtractor,
    head: Head,
}

impl EvaluationNet {
    pub fn new(arch: &ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let extractor = CsiExtractor::new(&mut params, "eval.extractor", arch, &mut rng);
        let head = Head::new(&mut params, "eval.head", extractor.out_len() + 1, arch, &mut rng);
        Ok(EvaluationNet {
            arch: arch.clone(),
            params,
            extractor,
            head,
        })
    }

    pub fn forward_with(&self, p: &ParamStore, csi: &Tensor, rssi: &[f64], mode: Mode) -> Result<(Tensor, EvaluationCache)> {
        let (feat, extractor) = self.extractor.forward(p, csi, mode)?;
        let joint = concat_rows(&feat, rssi, 1)?;
        let (logits, head) = self.head.forward(p, &joint)?;
        Ok((logits, EvaluationCache { extractor, head }))
    }

    pub fn backward_with(&self, p: &ParamStore, cache: &EvaluationCache, dlogits: &Tensor, grads: &mut Grads) -> Result<()> {
        let g = self.head.backward(p, &cache.head, dlogits, grads)?;
        let g = split_rows(&g, self.extractor.out_len())?;
        self.extractor.backward(p, &cache.extractor, &g, grads)?;
        Ok(())
    }

    pub fn commit_running(&mut self, cache: &EvaluationCache) {
        self.extractor.commit_running(&mut self.params, &cache.extractor);
    }

    /// Class probabilities for each row, inference mode.
    pub fn evaluate_batch(&self, csi: &Tensor, rssi: &[f64]) -> Result<Vec<f64>> {
        let (logits, _) = self.forward_with(&self.params, csi, rssi, Mode::Infer)?;
        Ok(softmax_rows(logits.data(), self.arch.classes))
    }

    pub fn evaluate(&self, csi_planes: &[f64], rssi: f64) -> Result<Vec<f64>> {
        let csi = csi_tensor([csi_planes], self.arch.subcarriers)?;
        self.evaluate_batch(&csi, &[rssi])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_arch_flattens_to_416() {
        assert_eq!(ArchSpec::default().feature_len(), 416);
    }

    #[test]
    fn step_output_is_a_distribution() {
        let net = PredictionNet::new(&ArchSpec::default(), 3).unwrap();
        let planes: Vec<f64> = (0..104).map(|v| (v as f64 * 0.37).sin()).collect();
        let s0 = net.zero_state(1);
        let (p, s1) = net.step(&planes, &[0.1, -0.2, 0.3, 0.0], &s0).unwrap();
        assert_eq!(p.len(), 8);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (q, s1b) = net.step(&planes, &[0.1, -0.2, 0.3, 0.0], &s0).unwrap();
        assert_eq!(p, q);
        assert_eq!(s1, s1b);
    }

    #[test]
    fn wrong_csi_width_is_a_config_error() {
        let net = EvaluationNet::new(&ArchSpec::default(), 0).unwrap();
        assert!(matches!(net.evaluate(&[0.0; 10], 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn classifier_group_is_exactly_the_heads() {
        let net = PredictionNet::new(&ArchSpec::default(), 0).unwrap();
        for b in net.params.blocks() {
            assert_eq!(b.group == ParamGroup::Classifier, b.name.contains(".head."), "{}", b.name);
        }
    }
}
