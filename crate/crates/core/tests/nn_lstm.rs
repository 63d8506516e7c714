//! Truncated BPTT against a complex-step derivative of an unrolled scalar LSTM.

use num_complex::Complex64 as C;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use staterate_core::nn::lstm::Lstm;
use staterate_core::nn::{Grads, ParamGroup, ParamStore, Tensor};

const T: usize = 4;
const B: usize = 2;
const F: usize = 3;
const H: usize = 2;

fn sigmoid(z: C) -> C {
    C::new(1.0, 0.0) / (C::new(1.0, 0.0) + (-z).exp())
}

/// Loss `sum(y ⊙ weights)` of a one-layer LSTM, written out step by step.
fn unrolled_loss(w_x: &[C], w_h: &[C], bias: &[C], x: &[C], weights: &[f64]) -> C {
    let mut h = vec![C::new(0.0, 0.0); B * H];
    let mut c = h.clone();
    let mut loss = C::new(0.0, 0.0);
    for t in 0..T {
        let mut next_h = h.clone();
        for b in 0..B {
            for j in 0..H {
                let pre = |gate: usize| {
                    let col = gate * H + j;
                    let mut z = bias[col];
                    for f in 0..F {
                        z += x[(t * B + b) * F + f] * w_x[f * 4 * H + col];
                    }
                    for k in 0..H {
                        z += h[b * H + k] * w_h[k * 4 * H + col];
                    }
                    z
                };
                let i = sigmoid(pre(0));
                let fg = sigmoid(pre(1));
                let g = pre(2).tanh();
                let o = sigmoid(pre(3));
                let idx = b * H + j;
                c[idx] = fg * c[idx] + i * g;
                next_h[idx] = o * c[idx].tanh();
                loss += next_h[idx] * weights[(t * B + b) * H + j];
            }
        }
        h = next_h;
    }
    loss
}

#[test]
fn bptt_matches_unrolled_complex_step_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut store = ParamStore::new();
    let lstm = Lstm::new(&mut store, "l", F, H, 1, ParamGroup::Recurrent, &mut rng);
    let ids = lstm.param_ids();

    let x_data: Vec<f64> = (0..T * B * F).map(|i| ((i as f64) * 0.37).sin()).collect();
    let weights: Vec<f64> = (0..T * B * H).map(|i| ((i as f64) * 0.91).cos()).collect();
    let x = Tensor::from_vec(&[T, B, F], x_data.clone()).unwrap();
    let (_, _, cache) = lstm.forward(&store, &x, None).unwrap();
    let dy = Tensor::from_vec(&[T, B, H], weights.clone()).unwrap();
    let mut grads = Grads::zeros_like(&store);
    let dx = lstm.backward(&store, &cache, &dy, &mut grads).unwrap();

    let lift = |v: &[f64]| v.iter().map(|&a| C::new(a, 0.0)).collect::<Vec<_>>();
    let base: Vec<Vec<C>> = ids.iter().map(|&id| lift(store.get(id))).collect();
    let xc = lift(&x_data);
    let step = 1e-30;
    let mut worst: f64 = 0.0;

    for (slot, &id) in ids.iter().enumerate() {
        for k in 0..base[slot].len() {
            let mut p = base.clone();
            p[slot][k].im = step;
            let l = unrolled_loss(&p[0], &p[1], &p[2], &xc, &weights);
            worst = worst.max((l.im / step - grads.block(id)[k]).abs());
        }
    }
    for k in 0..xc.len() {
        let mut xp = xc.clone();
        xp[k].im = step;
        let l = unrolled_loss(&base[0], &base[1], &base[2], &xp, &weights);
        worst = worst.max((l.im / step - dx.data()[k]).abs());
    }
    assert!(worst <= 1e-8, "max abs gradient error {worst:e}");
}

#[test]
fn initial_state_carries_into_the_next_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let lstm = Lstm::new(&mut store, "l", F, H, 2, ParamGroup::Recurrent, &mut rng);
    let data: Vec<f64> = (0..2 * T * B * F).map(|i| ((i as f64) * 0.53).sin()).collect();
    let whole = Tensor::from_vec(&[2 * T, B, F], data.clone()).unwrap();
    let (y_whole, s_whole, _) = lstm.forward(&store, &whole, None).unwrap();

    let half = T * B * F;
    let first = Tensor::from_vec(&[T, B, F], data[..half].to_vec()).unwrap();
    let second = Tensor::from_vec(&[T, B, F], data[half..].to_vec()).unwrap();
    let (_, s1, _) = lstm.forward(&store, &first, None).unwrap();
    let (y2, s2, _) = lstm.forward(&store, &second, Some(&s1)).unwrap();

    assert_eq!(&y_whole.data()[T * B * H..], y2.data());
    assert_eq!(s_whole, s2);
}
