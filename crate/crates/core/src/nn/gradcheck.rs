//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Grads, ParamStore};
use crate::error::Result;

/// A scalar function of a parameter store with an analytic gradient.
pub trait Objective {
    fn loss(&self, params: &ParamStore) -> Result<f64>;
    fn gradients(&self, params: &ParamStore) -> Result<(f64, Grads)>;
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub fraction: f64,
    pub min_per_block: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-5,
            fraction: 0.01,
            min_per_block: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Block name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates re-measured because the step straddled a kink.
    pub kinks: usize,
}

/// Relative error with a small absolute floor so that coordinates whose
/// true gradient is zero do not divide by rounding noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

fn central_difference<O: Objective + ?Sized>(
    objective: &O,
    params: &mut ParamStore,
    id: usize,
    idx: usize,
    eps: f64,
) -> Result<f64> {
    let orig = params.get(id)[idx];
    params.get_mut(id)[idx] = orig + eps;
    let plus = objective.loss(params);
    params.get_mut(id)[idx] = orig - eps;
    let minus = objective.loss(params);
    params.get_mut(id)[idx] = orig;
    Ok((plus? - minus?) / (2.0 * eps))
}

/// Checks every trainable block on a random subsample of coordinates and
/// returns the worst relative error. `params` is restored before returning.
///
/// ReLU and max-pool are not differentiable everywhere. When a coordinate
/// disagrees at `epsilon` but the differences at `epsilon/10` and
/// `epsilon/100` agree with each other far better, the interval straddled a
/// kink; the finest difference is used and the coordinate is counted in
/// `kinks`. A wrong analytic gradient disagrees at every step size.
pub fn gradient_check<O: Objective + ?Sized>(
    objective: &O,
    params: &mut ParamStore,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (_, grads) = objective.gradients(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        kinks: 0,
    };
    for id in 0..params.len() {
        let block = &params.blocks()[id];
        if !block.trainable {
            continue;
        }
        let n = block.data.len();
        let want = ((n as f64 * config.fraction).ceil() as usize)
            .max(config.min_per_block)
            .min(n);
        let name = block.name.clone();
        for idx in sample(&mut rng, n, want).into_iter() {
            let analytic = grads.block(id)[idx];
            let mut numeric = central_difference(objective, params, id, idx, config.epsilon)?;
            let mut err = relative_error(analytic, numeric);
            if err > KINK_PROBE_ABOVE {
                let fine = central_difference(objective, params, id, idx, config.epsilon / 10.0)?;
                let finest = central_difference(objective, params, id, idx, config.epsilon / 100.0)?;
                if relative_error(fine, finest) * 10.0 < relative_error(numeric, finest) {
                    numeric = finest;
                    err = relative_error(analytic, numeric);
                    report.kinks += 1;
                }
            }
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}

const KINK_PROBE_ABOVE: f64 = 1e-6;

/// Wraps an objective and negates its analytic gradient; a correct check
/// must reject it.
pub struct SignFlipped<O>(pub O);

impl<O: Objective> Objective for SignFlipped<O> {
    fn loss(&self, params: &ParamStore) -> Result<f64> {
        self.0.loss(params)
    }

    fn gradients(&self, params: &ParamStore) -> Result<(f64, Grads)> {
        let (l, mut g) = self.0.gradients(params)?;
        g.scale(-1.0);
        Ok((l, g))
    }
}

/// Single-layer objectives whose input lives in a `Probe` block, so the
/// check covers both parameter and input gradients.
pub mod probes {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::Objective;
    use crate::error::Result;
    use crate::nn::layers::{
        maxpool_backward, maxpool_forward, relu_backward, relu_forward, BatchNorm, Conv1d, Dense,
        Mode,
    };
    use crate::nn::loss::{cross_entropy_rows, softmax_rows};
    use crate::nn::lstm::Lstm;
    use crate::nn::model::{EvaluationNet, PredictionNet};
    use crate::nn::params::{BlockId, Grads, ParamGroup, ParamStore};
    use crate::nn::tensor::Tensor;

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum LayerKind {
        Conv,
        BatchNorm,
        Relu,
        MaxPool,
        Dense,
        Lstm,
        SoftmaxCrossEntropy,
    }

    impl LayerKind {
        pub const ALL: [LayerKind; 7] = [
            LayerKind::Conv,
            LayerKind::BatchNorm,
            LayerKind::Relu,
            LayerKind::MaxPool,
            LayerKind::Dense,
            LayerKind::Lstm,
            LayerKind::SoftmaxCrossEntropy,
        ];
    }

    enum Layer {
        Conv(Conv1d),
        BatchNorm(BatchNorm),
        Relu,
        MaxPool,
        Dense(Dense),
        Lstm(Lstm),
        SoftmaxCrossEntropy { classes: usize, targets: Vec<f64> },
    }

    /// `L = Σ wᵢ·yᵢ` over the layer output `y`, or the cross-entropy itself
    /// for the loss layer.
    pub struct LayerProbe {
        layer: Layer,
        input: BlockId,
        input_shape: Vec<usize>,
        weights: Vec<f64>,
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Builds a probe of the given kind and the parameter store it acts on.
    pub fn layer_probe(kind: LayerKind, seed: u64) -> (LayerProbe, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let g = ParamGroup::Probe;
        let (layer, input_shape, out_len) = match kind {
            LayerKind::Conv => (
                Layer::Conv(Conv1d::new(&mut store, "conv", 3, 4, 5, g, &mut rng)),
                vec![2, 9, 3],
                2 * 9 * 4,
            ),
            LayerKind::BatchNorm => {
                let bn = BatchNorm::new(&mut store, "bn", 4, g);
                let gamma = store.blocks().iter().position(|b| b.name == "bn.gamma").expect("gamma");
                let beta = store.blocks().iter().position(|b| b.name == "bn.beta").expect("beta");
                let gv = random_vec(&mut rng, 4).into_iter().map(|v| 1.0 + 0.5 * v).collect::<Vec<_>>();
                store.get_mut(gamma).copy_from_slice(&gv);
                let bv = random_vec(&mut rng, 4);
                store.get_mut(beta).copy_from_slice(&bv);
                (Layer::BatchNorm(bn), vec![3, 5, 4], 60)
            }
            LayerKind::Relu => (Layer::Relu, vec![4, 6], 24),
            LayerKind::MaxPool => (Layer::MaxPool, vec![2, 8, 3], 2 * 4 * 3),
            LayerKind::Dense => (
                Layer::Dense(Dense::new(&mut store, "fc", 7, 5, g, &mut rng)),
                vec![4, 7],
                20,
            ),
            LayerKind::Lstm => (
                Layer::Lstm(Lstm::new(&mut store, "lstm", 3, 5, 2, g, &mut rng)),
                vec![6, 2, 3],
                6 * 2 * 5,
            ),
            LayerKind::SoftmaxCrossEntropy => {
                let classes = 8;
                let mut targets = Vec::new();
                for r in 0..3 {
                    let mut t: Vec<f64> = random_vec(&mut rng, classes).iter().map(|v| v.abs() + 0.01).collect();
                    if r == 0 {
                        t = vec![0.0; classes];
                        t[2] = 1.0;
                    }
                    let s: f64 = t.iter().sum();
                    targets.extend(t.iter().map(|v| v / s));
                }
                (Layer::SoftmaxCrossEntropy { classes, targets }, vec![3, 8], 0)
            }
        };
        let n_in: usize = input_shape.iter().product();
        let mut x = random_vec(&mut rng, n_in);
        if kind == LayerKind::Relu {
            // Keep inputs away from the kink.
            for v in &mut x {
                *v += 0.1 * v.signum();
            }
        }
        let input = store.add("input", &input_shape, x, ParamGroup::Probe, true);
        let weights = random_vec(&mut rng, out_len);
        (
            LayerProbe {
                layer,
                input,
                input_shape,
                weights,
            },
            store,
        )
    }

    impl LayerProbe {
        fn run(&self, p: &ParamStore, grads: Option<&mut Grads>) -> Result<f64> {
            let x = Tensor::from_vec(&self.input_shape, p.get(self.input).to_vec())?;
            let dot = |y: &Tensor| y.data().iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>();
            let upstream = |y: &Tensor| Tensor::from_vec(y.shape(), self.weights.clone());
            let (loss, dx) = match &self.layer {
                Layer::Conv(l) => {
                    let (y, c) = l.forward(p, &x)?;
                    let dx = match grads {
                        Some(g) => Some((l.backward(p, &c, &upstream(&y)?, g)?, g)),
                        None => None,
                    };
                    (dot(&y), dx)
                }
                Layer::BatchNorm(l) => {
                    let (y, c) = l.forward(p, &x, Mode::Train)?;
                    let dx = match grads {
                        Some(g) => Some((l.backward(p, &c, &upstream(&y)?, g)?, g)),
                        None => None,
                    };
                    (dot(&y), dx)
                }
                Layer::Relu => {
                    let (y, c) = relu_forward(&x);
                    let dx = match grads {
                        Some(g) => Some((relu_backward(&c, &upstream(&y)?)?, g)),
                        None => None,
                    };
                    (dot(&y), dx)
                }
                Layer::MaxPool => {
                    let (y, c) = maxpool_forward(&x)?;
                    let dx = match grads {
                        Some(g) => Some((maxpool_backward(&c, &upstream(&y)?)?, g)),
                        None => None,
                    };
                    (dot(&y), dx)
                }
                Layer::Dense(l) => {
                    let (y, c) = l.forward(p, &x)?;
                    let dx = match grads {
                        Some(g) => Some((l.backward(p, &c, &upstream(&y)?, g)?, g)),
                        None => None,
                    };
                    (dot(&y), dx)
                }
                Layer::Lstm(l) => {
                    let (y, _, c) = l.forward(p, &x, None)?;
                    let dx = match grads {
                        Some(g) => Some((l.backward(p, &c, &upstream(&y)?, g)?, g)),
                        None => None,
                    };
                    (dot(&y), dx)
                }
                Layer::SoftmaxCrossEntropy { classes, targets } => {
                    let probs = softmax_rows(x.data(), *classes);
                    let (loss, dz) = cross_entropy_rows(&probs, targets, *classes)?;
                    let dx = match grads {
                        Some(g) => Some((Tensor::from_vec(x.shape(), dz)?, g)),
                        None => None,
                    };
                    (loss, dx)
                }
            };
            if let Some((dx, g)) = dx {
                g.block_mut(self.input).copy_from_slice(dx.data());
            }
            Ok(loss)
        }
    }

    /// Mean cross-entropy of a prediction network over a random window,
    /// train-mode batch norm.
    pub struct PredictionObjective<'a> {
        net: &'a PredictionNet,
        csi: Tensor,
        state: Vec<f64>,
        time: usize,
        batch: usize,
        targets: Vec<f64>,
    }

    fn random_targets(rng: &mut ChaCha8Rng, rows: usize, classes: usize) -> Vec<f64> {
        let mut t = vec![0.0; rows * classes];
        for r in 0..rows {
            t[r * classes + rng.random_range(0..classes)] = 1.0;
        }
        t
    }

    impl<'a> PredictionObjective<'a> {
        pub fn random(net: &'a PredictionNet, time: usize, batch: usize, seed: u64) -> Result<Self> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = &net.arch;
            let rows = time * batch;
            let csi = Tensor::from_vec(
                &[rows, a.subcarriers, a.input_planes],
                random_vec(&mut rng, rows * a.subcarriers * a.input_planes),
            )?;
            Ok(PredictionObjective {
                net,
                csi,
                state: random_vec(&mut rng, rows * a.state_features),
                time,
                batch,
                targets: random_targets(&mut rng, rows, a.classes),
            })
        }
    }

    impl Objective for PredictionObjective<'_> {
        fn loss(&self, p: &ParamStore) -> Result<f64> {
            Ok(self.gradients_inner(p, false)?.0)
        }

        fn gradients(&self, p: &ParamStore) -> Result<(f64, Grads)> {
            self.gradients_inner(p, true)
        }
    }

    impl PredictionObjective<'_> {
        fn gradients_inner(&self, p: &ParamStore, backward: bool) -> Result<(f64, Grads)> {
            let classes = self.net.arch.classes;
            let (logits, _, cache) =
                self.net
                    .forward_with(p, &self.csi, &self.state, self.time, self.batch, None, Mode::Train)?;
            let probs = softmax_rows(logits.data(), classes);
            let (loss, dz) = cross_entropy_rows(&probs, &self.targets, classes)?;
            let mut g = Grads::zeros_like(p);
            if backward {
                self.net
                    .backward_with(p, &cache, &Tensor::from_vec(logits.shape(), dz)?, &mut g)?;
            }
            Ok((loss, g))
        }
    }

    /// Mean cross-entropy of an evaluation network over a random batch.
    pub struct EvaluationObjective<'a> {
        net: &'a EvaluationNet,
        csi: Tensor,
        rssi: Vec<f64>,
        targets: Vec<f64>,
    }

    impl<'a> EvaluationObjective<'a> {
        pub fn random(net: &'a EvaluationNet, rows: usize, seed: u64) -> Result<Self> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = &net.arch;
            let csi = Tensor::from_vec(
                &[rows, a.subcarriers, a.input_planes],
                random_vec(&mut rng, rows * a.subcarriers * a.input_planes),
            )?;
            Ok(EvaluationObjective {
                net,
                csi,
                rssi: random_vec(&mut rng, rows),
                targets: random_targets(&mut rng, rows, a.classes),
            })
        }
    }

    impl Objective for EvaluationObjective<'_> {
        fn loss(&self, p: &ParamStore) -> Result<f64> {
            Ok(self.gradients_inner(p, false)?.0)
        }

        fn gradients(&self, p: &ParamStore) -> Result<(f64, Grads)> {
            self.gradients_inner(p, true)
        }
    }

    impl EvaluationObjective<'_> {
        fn gradients_inner(&self, p: &ParamStore, backward: bool) -> Result<(f64, Grads)> {
            let classes = self.net.arch.classes;
            let (logits, cache) = self.net.forward_with(p, &self.csi, &self.rssi, Mode::Train)?;
            let probs = softmax_rows(logits.data(), classes);
            let (loss, dz) = cross_entropy_rows(&probs, &self.targets, classes)?;
            let mut g = Grads::zeros_like(p);
            if backward {
                self.net
                    .backward_with(p, &cache, &Tensor::from_vec(logits.shape(), dz)?, &mut g)?;
            }
            Ok((loss, g))
        }
    }

    impl Objective for LayerProbe {
        fn loss(&self, params: &ParamStore) -> Result<f64> {
            self.run(params, None)
        }

        fn gradients(&self, params: &ParamStore) -> Result<(f64, Grads)> {
            let mut g = Grads::zeros_like(params);
            let l = self.run(params, Some(&mut g))?;
            Ok((l, g))
        }
    }
}
