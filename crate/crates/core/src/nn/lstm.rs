//! Stacked LSTM over time-major sequences `[time, batch, features]`.
//!
//! Gate order within the fused `4·hidden` projection is input, forget,
//! cell, output. Forget-gate biases start at 1.

use rand::Rng;

use super::params::{BlockId, Grads, ParamGroup, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
struct LstmLayer {
    inputs: usize,
    w_x: BlockId,
    w_h: BlockId,
    bias: BlockId,
}

/// Hidden and cell state per layer, each `[batch·hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub batch: usize,
}

impl LstmState {
    pub fn zeros(layers: usize, batch: usize, hidden: usize) -> Self {
        LstmState {
            h: vec![vec![0.0; batch * hidden]; layers],
            c: vec![vec![0.0; batch * hidden]; layers],
            batch,
        }
    }
}

struct LayerCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

pub struct LstmCache {
    layers: Vec<LayerCache>,
    time: usize,
    batch: usize,
}

#[derive(Debug, Clone)]
pub struct Lstm {
    pub name: String,
    pub inputs: usize,
    pub hidden: usize,
    layers: Vec<LstmLayer>,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        hidden: usize,
        num_layers: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let li = if l == 0 { inputs } else { hidden };
            let w_x = store.add_glorot(
                format!("{name}.{l}.w_x"),
                &[li, 4 * hidden],
                li,
                hidden,
                group,
                rng,
            );
            let w_h = store.add_glorot(
                format!("{name}.{l}.w_h"),
                &[hidden, 4 * hidden],
                hidden,
                hidden,
                group,
                rng,
            );
            let mut b = vec![0.0; 4 * hidden];
            b[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
            let bias = store.add(format!("{name}.{l}.bias"), &[4 * hidden], b, group, true);
            layers.push(LstmLayer {
                inputs: li,
                w_x,
                w_h,
                bias,
            });
        }
        Lstm {
            name: name.to_string(),
            inputs,
            hidden,
            layers,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn param_ids(&self) -> Vec<BlockId> {
        self.layers
            .iter()
            .flat_map(|l| [l.w_x, l.w_h, l.bias])
            .collect()
    }

    pub fn zero_state(&self, batch: usize) -> LstmState {
        LstmState::zeros(self.layers.len(), batch, self.hidden)
    }

    /// Runs the whole sequence. Returns the top-layer outputs
    /// `[time, batch, hidden]`, the final state and the cache for
    /// [`Lstm::backward`].
    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        init: Option<&LstmState>,
    ) -> Result<(Tensor, LstmState, LstmCache)> {
        let &[time, batch, feat] = x.shape() else {
            return Err(Error::config(format!(
                "{}: expected [time, batch, features], got {:?}",
                self.name,
                x.shape()
            )));
        };
        if feat != self.inputs {
            return Err(Error::config(format!(
                "{}: expected {} input features, got {feat}",
                self.name, self.inputs
            )));
        }
        let hs = self.hidden;
        let mut state = match init {
            Some(s) => {
                if s.batch != batch || s.h.len() != self.layers.len() {
                    return Err(Error::config(format!(
                        "{}: initial state has batch {} and {} layers, expected {batch} and {}",
                        self.name,
                        s.batch,
                        s.h.len(),
                        self.layers.len()
                    )));
                }
                s.clone()
            }
            None => self.zero_state(batch),
        };
        let mut input = x.data().to_vec();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let rows = time * batch;
            let mut z_all = vec![0.0; rows * 4 * hs];
            let bias = store.get(layer.bias);
            for r in 0..rows {
                z_all[r * 4 * hs..(r + 1) * 4 * hs].copy_from_slice(bias);
            }
            gemm(rows, layer.inputs, 4 * hs, &input, false, store.get(layer.w_x), false, 1.0, &mut z_all);
            let w_h = store.get(layer.w_h);
            let mut h_prev = Vec::with_capacity(rows * hs);
            let mut c_prev = Vec::with_capacity(rows * hs);
            let mut tanh_c = vec![0.0; rows * hs];
            let mut out = vec![0.0; rows * hs];
            let h = &mut state.h[li];
            let c = &mut state.c[li];
            for t in 0..time {
                h_prev.extend_from_slice(h);
                c_prev.extend_from_slice(c);
                let z = &mut z_all[t * batch * 4 * hs..(t + 1) * batch * 4 * hs];
                gemm(batch, hs, 4 * hs, h, false, w_h, false, 1.0, z);
                for b in 0..batch {
                    let zr = &mut z[b * 4 * hs..(b + 1) * 4 * hs];
                    for j in 0..hs {
                        let i_g = sigmoid(zr[j]);
                        let f_g = sigmoid(zr[hs + j]);
                        let g_g = zr[2 * hs + j].tanh();
                        let o_g = sigmoid(zr[3 * hs + j]);
                        zr[j] = i_g;
                        zr[hs + j] = f_g;
                        zr[2 * hs + j] = g_g;
                        zr[3 * hs + j] = o_g;
                        let k = b * hs + j;
                        c[k] = f_g * c[k] + i_g * g_g;
                        let tc = c[k].tanh();
                        h[k] = o_g * tc;
                        let r = (t * batch + b) * hs + j;
                        tanh_c[r] = tc;
                        out[r] = h[k];
                    }
                }
            }
            caches.push(LayerCache {
                x: input,
                h_prev,
                c_prev,
                gates: z_all,
                tanh_c,
            });
            input = out;
        }
        let y = Tensor::from_vec(&[time, batch, hs], input)?;
        Ok((
            y,
            state,
            LstmCache {
                layers: caches,
                time,
                batch,
            },
        ))
    }

    /// Backpropagation through the full cached window. `dy` is the gradient
    /// with respect to the top-layer outputs; the final state receives no
    /// gradient. Returns the gradient with respect to the input sequence.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &LstmCache,
        dy: &Tensor,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        let (time, batch, hs) = (cache.time, cache.batch, self.hidden);
        if dy.shape() != [time, batch, hs] || cache.layers.len() != self.layers.len() {
            return Err(Error::precondition(format!(
                "{}: upstream gradient {:?} does not match cached output {:?}",
                self.name,
                dy.shape(),
                [time, batch, hs]
            )));
        }
        let rows = time * batch;
        let mut d_out = dy.data().to_vec();
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            let w_h = store.get(layer.w_h);
            let mut dz = vec![0.0; rows * 4 * hs];
            let mut dh_next = vec![0.0; batch * hs];
            let mut dc_next = vec![0.0; batch * hs];
            for t in (0..time).rev() {
                for b in 0..batch {
                    let gr = (t * batch + b) * 4 * hs;
                    for j in 0..hs {
                        let k = b * hs + j;
                        let r = (t * batch + b) * hs + j;
                        let (i_g, f_g, g_g, o_g) = (
                            lc.gates[gr + j],
                            lc.gates[gr + hs + j],
                            lc.gates[gr + 2 * hs + j],
                            lc.gates[gr + 3 * hs + j],
                        );
                        let dh = d_out[r] + dh_next[k];
                        let tc = lc.tanh_c[r];
                        let dc = dc_next[k] + dh * o_g * (1.0 - tc * tc);
                        dz[gr + j] = dc * g_g * i_g * (1.0 - i_g);
                        dz[gr + hs + j] = dc * lc.c_prev[r] * f_g * (1.0 - f_g);
                        dz[gr + 2 * hs + j] = dc * i_g * (1.0 - g_g * g_g);
                        dz[gr + 3 * hs + j] = dh * tc * o_g * (1.0 - o_g);
                        dc_next[k] = dc * f_g;
                    }
                }
                let dz_t = &dz[t * batch * 4 * hs..(t + 1) * batch * 4 * hs];
                gemm(batch, 4 * hs, hs, dz_t, false, w_h, true, 0.0, &mut dh_next);
            }
            gemm(hs, rows, 4 * hs, &lc.h_prev, true, &dz, false, 1.0, grads.block_mut(layer.w_h));
            gemm(layer.inputs, rows, 4 * hs, &lc.x, true, &dz, false, 1.0, grads.block_mut(layer.w_x));
            let db = grads.block_mut(layer.bias);
            for r in 0..rows {
                for (g, d) in db.iter_mut().zip(&dz[r * 4 * hs..(r + 1) * 4 * hs]) {
                    *g += d;
                }
            }
            let mut dx = vec![0.0; rows * layer.inputs];
            gemm(rows, 4 * hs, layer.inputs, &dz, false, store.get(layer.w_x), true, 0.0, &mut dx);
            d_out = dx;
        }
        Tensor::from_vec(&[time, batch, self.inputs], d_out)
    }
}
