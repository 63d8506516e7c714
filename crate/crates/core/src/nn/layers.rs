//! Feed-forward layers. Convolution, pooling and batch norm operate on
//! channels-last activations shaped `[batch, length, channels]`.

use rand::Rng;

use super::params::{BlockId, Grads, ParamGroup, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Infer,
}

fn check_grad_shape(layer: &str, expected: &[usize], got: &[usize]) -> Result<()> {
    if expected != got {
        return Err(Error::precondition(format!(
            "{layer}: upstream gradient {got:?} does not match cached output {expected:?}"
        )));
    }
    Ok(())
}

/// 1-D convolution over the length axis with "same" zero padding.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    weight: BlockId,
    bias: BlockId,
}

pub struct Conv1dCache {
    cols: Vec<f64>,
    in_shape: [usize; 3],
    out_shape: [usize; 3],
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * in_channels;
        let weight = store.add_glorot(
            format!("{name}.weight"),
            &[fan_in, out_channels],
            fan_in,
            kernel * out_channels,
            group,
            rng,
        );
        let bias = store.add_const(format!("{name}.bias"), &[out_channels], 0.0, group, true);
        Conv1d {
            name: name.to_string(),
            in_channels,
            out_channels,
            kernel,
            weight,
            bias,
        }
    }

    pub fn weight_id(&self) -> BlockId {
        self.weight
    }

    pub fn bias_id(&self) -> BlockId {
        self.bias
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, Conv1dCache)> {
        let &[n, len, c] = x.shape() else {
            return Err(Error::config(format!(
                "{}: expected [batch, length, channels], got {:?}",
                self.name,
                x.shape()
            )));
        };
        if c != self.in_channels {
            return Err(Error::config(format!(
                "{}: expected {} input channels, got {c}",
                self.name, self.in_channels
            )));
        }
        let k = self.kernel;
        let width = k * c;
        let pad = self.pad() as isize;
        let mut cols = vec![0.0; n * len * width];
        let xd = x.data();
        for b in 0..n {
            for l in 0..len {
                let row = &mut cols[(b * len + l) * width..(b * len + l + 1) * width];
                for kk in 0..k {
                    let src = l as isize + kk as isize - pad;
                    if src >= 0 && (src as usize) < len {
                        let off = (b * len + src as usize) * c;
                        row[kk * c..(kk + 1) * c].copy_from_slice(&xd[off..off + c]);
                    }
                }
            }
        }
        let oc = self.out_channels;
        let bias = store.get(self.bias);
        let mut out = Vec::with_capacity(n * len * oc);
        for _ in 0..n * len {
            out.extend_from_slice(bias);
        }
        gemm(n * len, width, oc, &cols, false, store.get(self.weight), false, 1.0, &mut out);
        let y = Tensor::from_vec(&[n, len, oc], out)?;
        Ok((
            y,
            Conv1dCache {
                cols,
                in_shape: [n, len, c],
                out_shape: [n, len, oc],
            },
        ))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &Conv1dCache,
        dy: &Tensor,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        check_grad_shape(&self.name, &cache.out_shape, dy.shape())?;
        let [n, len, c] = cache.in_shape;
        let oc = self.out_channels;
        let width = self.kernel * c;
        let rows = n * len;
        gemm(width, rows, oc, &cache.cols, true, dy.data(), false, 1.0, grads.block_mut(self.weight));
        let db = grads.block_mut(self.bias);
        for r in 0..rows {
            for (g, d) in db.iter_mut().zip(&dy.data()[r * oc..(r + 1) * oc]) {
                *g += d;
            }
        }
        let mut dcols = vec![0.0; rows * width];
        gemm(rows, oc, width, dy.data(), false, store.get(self.weight), true, 0.0, &mut dcols);
        let mut dx = vec![0.0; n * len * c];
        let pad = self.pad() as isize;
        for b in 0..n {
            for l in 0..len {
                let row = &dcols[(b * len + l) * width..(b * len + l + 1) * width];
                for kk in 0..self.kernel {
                    let src = l as isize + kk as isize - pad;
                    if src >= 0 && (src as usize) < len {
                        let off = (b * len + src as usize) * c;
                        for (d, g) in dx[off..off + c].iter_mut().zip(&row[kk * c..(kk + 1) * c]) {
                            *d += g;
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&[n, len, c], dx)
    }
}

/// Batch normalization over the last axis.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub features: usize,
    pub momentum: f64,
    pub eps: f64,
    gamma: BlockId,
    beta: BlockId,
    running_mean: BlockId,
    running_var: BlockId,
}

pub struct BatchNormCache {
    mode: Mode,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    shape: Vec<usize>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

impl BatchNormCache {
    pub fn batch_mean(&self) -> &[f64] {
        &self.batch_mean
    }

    pub fn batch_var(&self) -> &[f64] {
        &self.batch_var
    }
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, features: usize, group: ParamGroup) -> Self {
        BatchNorm {
            name: name.to_string(),
            features,
            momentum: 0.1,
            eps: 1e-5,
            gamma: store.add_const(format!("{name}.gamma"), &[features], 1.0, group, true),
            beta: store.add_const(format!("{name}.beta"), &[features], 0.0, group, true),
            running_mean: store.add_const(
                format!("{name}.running_mean"),
                &[features],
                0.0,
                group,
                false,
            ),
            running_var: store.add_const(
                format!("{name}.running_var"),
                &[features],
                1.0,
                group,
                false,
            ),
        }
    }

    pub fn running_ids(&self) -> (BlockId, BlockId) {
        (self.running_mean, self.running_var)
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor, mode: Mode) -> Result<(Tensor, BatchNormCache)> {
        let c = self.features;
        if x.shape().last() != Some(&c) {
            return Err(Error::config(format!(
                "{}: expected {c} features on the last axis, got {:?}",
                self.name,
                x.shape()
            )));
        }
        let rows = x.len() / c;
        let xd = x.data();
        let (mean, var) = match mode {
            Mode::Train => {
                if rows == 0 {
                    return Err(Error::config(format!("{}: empty batch", self.name)));
                }
                let mut mean = vec![0.0; c];
                for r in 0..rows {
                    for (m, v) in mean.iter_mut().zip(&xd[r * c..(r + 1) * c]) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; c];
                for r in 0..rows {
                    for ((s, v), m) in var.iter_mut().zip(&xd[r * c..(r + 1) * c]).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= rows as f64);
                (mean, var)
            }
            Mode::Infer => (
                store.get(self.running_mean).to_vec(),
                store.get(self.running_var).to_vec(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let gamma = store.get(self.gamma);
        let beta = store.get(self.beta);
        let mut xhat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        for r in 0..rows {
            for j in 0..c {
                let i = r * c + j;
                xhat[i] = (xd[i] - mean[j]) * inv_std[j];
                y[i] = gamma[j] * xhat[i] + beta[j];
            }
        }
        Ok((
            Tensor::from_vec(x.shape(), y)?,
            BatchNormCache {
                mode,
                xhat,
                inv_std,
                shape: x.shape().to_vec(),
                batch_mean: mean,
                batch_var: var,
            },
        ))
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// estimates.
    pub fn update_running(&self, store: &mut ParamStore, cache: &BatchNormCache) {
        if cache.mode != Mode::Train {
            return;
        }
        let rows = cache.xhat.len() / self.features;
        let unbias = if rows > 1 { rows as f64 / (rows - 1) as f64 } else { 1.0 };
        let m = self.momentum;
        for (r, b) in store.get_mut(self.running_mean).iter_mut().zip(&cache.batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in store.get_mut(self.running_var).iter_mut().zip(&cache.batch_var) {
            *r = (1.0 - m) * *r + m * b * unbias;
        }
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &BatchNormCache,
        dy: &Tensor,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        check_grad_shape(&self.name, &cache.shape, dy.shape())?;
        let c = self.features;
        let rows = cache.xhat.len() / c;
        let dyd = dy.data();
        let gamma = store.get(self.gamma);
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for r in 0..rows {
            for j in 0..c {
                let i = r * c + j;
                sum_dy[j] += dyd[i];
                sum_dy_xhat[j] += dyd[i] * cache.xhat[i];
            }
        }
        for (g, s) in grads.block_mut(self.gamma).iter_mut().zip(&sum_dy_xhat) {
            *g += s;
        }
        for (g, s) in grads.block_mut(self.beta).iter_mut().zip(&sum_dy) {
            *g += s;
        }
        let mut dx = vec![0.0; dyd.len()];
        match cache.mode {
            Mode::Train => {
                let n = rows as f64;
                for r in 0..rows {
                    for j in 0..c {
                        let i = r * c + j;
                        dx[i] = gamma[j] * cache.inv_std[j] / n
                            * (n * dyd[i] - sum_dy[j] - cache.xhat[i] * sum_dy_xhat[j]);
                    }
                }
            }
            Mode::Infer => {
                for r in 0..rows {
                    for j in 0..c {
                        let i = r * c + j;
                        dx[i] = dyd[i] * gamma[j] * cache.inv_std[j];
                    }
                }
            }
        }
        Tensor::from_vec(&cache.shape, dx)
    }
}

pub struct ReluCache {
    mask: Vec<bool>,
    shape: Vec<usize>,
}

pub fn relu_forward(x: &Tensor) -> (Tensor, ReluCache) {
    let mask: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
    let y = x
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v } else { 0.0 })
        .collect();
    (
        Tensor::from_vec(x.shape(), y).expect("same shape"),
        ReluCache {
            mask,
            shape: x.shape().to_vec(),
        },
    )
}

pub fn relu_backward(cache: &ReluCache, dy: &Tensor) -> Result<Tensor> {
    check_grad_shape("relu", &cache.shape, dy.shape())?;
    let dx = dy
        .data()
        .iter()
        .zip(&cache.mask)
        .map(|(&g, &m)| if m { g } else { 0.0 })
        .collect();
    Tensor::from_vec(&cache.shape, dx)
}

pub struct MaxPoolCache {
    argmax: Vec<usize>,
    in_shape: [usize; 3],
    out_shape: [usize; 3],
}

/// Non-overlapping max pooling of width 2 along the length axis; an odd
/// trailing element is dropped.
pub fn maxpool_forward(x: &Tensor) -> Result<(Tensor, MaxPoolCache)> {
    let &[n, len, c] = x.shape() else {
        return Err(Error::config(format!(
            "maxpool: expected [batch, length, channels], got {:?}",
            x.shape()
        )));
    };
    let out_len = len / 2;
    let xd = x.data();
    let mut y = Vec::with_capacity(n * out_len * c);
    let mut argmax = Vec::with_capacity(n * out_len * c);
    for b in 0..n {
        for l in 0..out_len {
            for j in 0..c {
                let i0 = (b * len + 2 * l) * c + j;
                let i1 = i0 + c;
                let pick = if xd[i1] > xd[i0] { i1 } else { i0 };
                y.push(xd[pick]);
                argmax.push(pick);
            }
        }
    }
    Ok((
        Tensor::from_vec(&[n, out_len, c], y)?,
        MaxPoolCache {
            argmax,
            in_shape: [n, len, c],
            out_shape: [n, out_len, c],
        },
    ))
}

pub fn maxpool_backward(cache: &MaxPoolCache, dy: &Tensor) -> Result<Tensor> {
    check_grad_shape("maxpool", &cache.out_shape, dy.shape())?;
    let mut dx = vec![0.0; cache.in_shape.iter().product()];
    for (&src, &g) in cache.argmax.iter().zip(dy.data()) {
        dx[src] += g;
    }
    Tensor::from_vec(&cache.in_shape, dx)
}

/// Fully connected layer on `[rows, in]` inputs.
#[derive(Debug, Clone)]
pub struct Dense {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
    weight: BlockId,
    bias: BlockId,
}

pub struct DenseCache {
    x: Vec<f64>,
    rows: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_glorot(
            format!("{name}.weight"),
            &[inputs, outputs],
            inputs,
            outputs,
            group,
            rng,
        );
        let bias = store.add_const(format!("{name}.bias"), &[outputs], 0.0, group, true);
        Dense {
            name: name.to_string(),
            inputs,
            outputs,
            weight,
            bias,
        }
    }

    pub fn weight_id(&self) -> BlockId {
        self.weight
    }

    pub fn bias_id(&self) -> BlockId {
        self.bias
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, DenseCache)> {
        if x.row_len() != self.inputs || x.shape().len() < 2 {
            return Err(Error::config(format!(
                "{}: expected [rows, {}], got {:?}",
                self.name,
                self.inputs,
                x.shape()
            )));
        }
        let rows = x.rows();
        let bias = store.get(self.bias);
        let mut out = Vec::with_capacity(rows * self.outputs);
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        gemm(rows, self.inputs, self.outputs, x.data(), false, store.get(self.weight), false, 1.0, &mut out);
        Ok((
            Tensor::from_vec(&[rows, self.outputs], out)?,
            DenseCache {
                x: x.data().to_vec(),
                rows,
            },
        ))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &DenseCache,
        dy: &Tensor,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        check_grad_shape(&self.name, &[cache.rows, self.outputs], dy.shape())?;
        let (rows, i, o) = (cache.rows, self.inputs, self.outputs);
        gemm(i, rows, o, &cache.x, true, dy.data(), false, 1.0, grads.block_mut(self.weight));
        let db = grads.block_mut(self.bias);
        for r in 0..rows {
            for (g, d) in db.iter_mut().zip(&dy.data()[r * o..(r + 1) * o]) {
                *g += d;
            }
        }
        let mut dx = vec![0.0; rows * i];
        gemm(rows, o, i, dy.data(), false, store.get(self.weight), true, 0.0, &mut dx);
        Tensor::from_vec(&[rows, i], dx)
    }
}
