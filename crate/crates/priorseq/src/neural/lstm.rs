//! Single-cell LSTM forward and backward passes. Gate order in the stacked
//! pre-activation vector is input, forget, output, candidate.

use super::tensor::{matvec, matvec_t_acc, outer_acc, Tensor};
use crate::error::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct LstmParams {
    /// Input-to-hidden weights, shape [4H, E].
    pub w_x: Tensor,
    /// Hidden-to-hidden weights, shape [4H, H].
    pub w_h: Tensor,
    /// Bias, shape [4H].
    pub b: Tensor,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl LstmParams {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        LstmParams {
            w_x: Tensor::zeros(&[4 * hidden_size, input_size]),
            w_h: Tensor::zeros(&[4 * hidden_size, hidden_size]),
            b: Tensor::zeros(&[4 * hidden_size]),
            input_size,
            hidden_size,
        }
    }

    /// Uniform(-0.08, 0.08) weights, zero biases, forget-gate bias +1.
    pub fn init<R: Rng>(input_size: usize, hidden_size: usize, rng: &mut R) -> Self {
        let mut p = LstmParams {
            w_x: Tensor::uniform(&[4 * hidden_size, input_size], 0.08, rng),
            w_h: Tensor::uniform(&[4 * hidden_size, hidden_size], 0.08, rng),
            b: Tensor::zeros(&[4 * hidden_size]),
            input_size,
            hidden_size,
        };
        for i in hidden_size..2 * hidden_size {
            p.b.data_mut()[i] = 1.0;
        }
        p
    }
}

/// Intermediates kept from a forward step for the backward pass.
#[derive(Debug, Clone)]
pub struct LstmCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub gate_i: Vec<f64>,
    pub gate_f: Vec<f64>,
    pub gate_o: Vec<f64>,
    pub gate_g: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn lstm_step(
    params: &LstmParams,
    h_prev: &[f64],
    c_prev: &[f64],
    x: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, LstmCache)> {
    let h_size = params.hidden_size;
    if x.len() != params.input_size || h_prev.len() != h_size || c_prev.len() != h_size {
        return Err(Error::ShapeMismatch(format!(
            "lstm_step: x={} h={} c={} vs E={} H={}",
            x.len(),
            h_prev.len(),
            c_prev.len(),
            params.input_size,
            h_size
        )));
    }
    let mut pre = vec![0.0; 4 * h_size];
    matvec(&params.w_x, x, &mut pre);
    let mut pre_h = vec![0.0; 4 * h_size];
    matvec(&params.w_h, h_prev, &mut pre_h);
    for i in 0..4 * h_size {
        pre[i] += pre_h[i] + params.b.data()[i];
    }
    let mut gi = vec![0.0; h_size];
    let mut gf = vec![0.0; h_size];
    let mut go = vec![0.0; h_size];
    let mut gg = vec![0.0; h_size];
    let mut c = vec![0.0; h_size];
    let mut tanh_c = vec![0.0; h_size];
    let mut h = vec![0.0; h_size];
    for j in 0..h_size {
        gi[j] = sigmoid(pre[j]);
        gf[j] = sigmoid(pre[h_size + j]);
        go[j] = sigmoid(pre[2 * h_size + j]);
        gg[j] = pre[3 * h_size + j].tanh();
        c[j] = gf[j] * c_prev[j] + gi[j] * gg[j];
        tanh_c[j] = c[j].tanh();
        h[j] = go[j] * tanh_c[j];
    }
    let cache = LstmCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        gate_i: gi,
        gate_f: gf,
        gate_o: go,
        gate_g: gg,
        c: c.clone(),
        tanh_c,
    };
    Ok((h, c, cache))
}

/// Backward through one step. `dh` and `dc` are gradients flowing into this
/// step's outputs; returns (dx, dh_prev, dc_prev) and accumulates parameter
/// gradients into `grads`.
pub fn lstm_backward(
    params: &LstmParams,
    grads: &mut LstmParams,
    cache: &LstmCache,
    dh: &[f64],
    dc_in: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let h_size = params.hidden_size;
    let mut dpre = vec![0.0; 4 * h_size];
    let mut dc_prev = vec![0.0; h_size];
    for j in 0..h_size {
        let tc = cache.tanh_c[j];
        let d_o = dh[j] * tc;
        let dc = dc_in[j] + dh[j] * cache.gate_o[j] * (1.0 - tc * tc);
        let d_i = dc * cache.gate_g[j];
        let d_g = dc * cache.gate_i[j];
        let d_f = dc * cache.c_prev[j];
        dc_prev[j] = dc * cache.gate_f[j];
        let (i, f, o, g) = (
            cache.gate_i[j],
            cache.gate_f[j],
            cache.gate_o[j],
            cache.gate_g[j],
        );
        dpre[j] = d_i * i * (1.0 - i);
        dpre[h_size + j] = d_f * f * (1.0 - f);
        dpre[2 * h_size + j] = d_o * o * (1.0 - o);
        dpre[3 * h_size + j] = d_g * (1.0 - g * g);
    }
    outer_acc(&mut grads.w_x, &dpre, &cache.x);
    outer_acc(&mut grads.w_h, &dpre, &cache.h_prev);
    for (db, dp) in grads.b.data_mut().iter_mut().zip(&dpre) {
        *db += dp;
    }
    let mut dx = vec![0.0; params.input_size];
    matvec_t_acc(&params.w_x, &dpre, &mut dx);
    let mut dh_prev = vec![0.0; h_size];
    matvec_t_acc(&params.w_h, &dpre, &mut dh_prev);
    (dx, dh_prev, dc_prev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn zero_params_give_zero_hidden() {
        let p = LstmParams::zeros(3, 4);
        let (h, _, _) = lstm_step(&p, &[0.0; 4], &[0.0; 4], &[1.0, -2.0, 0.5]).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hidden_values_bounded_by_one() {
        let mut rng = stream(3, "lstm-test");
        let p = LstmParams::init(5, 6, &mut rng);
        let x: Vec<f64> = (0..5).map(|i| (i as f64) - 2.0).collect();
        let (h, _, _) = lstm_step(&p, &[0.3; 6], &[0.9; 6], &x).unwrap();
        assert!(h.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = LstmParams::zeros(3, 4);
        assert!(lstm_step(&p, &[0.0; 4], &[0.0; 4], &[0.0; 2]).is_err());
    }

    // Scalar-loop re-implementation of the gate equations, written
    // independently of lstm_step, used as the value oracle.
    fn scalar_lstm(
        p: &LstmParams,
        h_prev: &[f64],
        c_prev: &[f64],
        x: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let hs = p.hidden_size;
        let es = p.input_size;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = vec![0.0; hs];
        let mut c = vec![0.0; hs];
        for j in 0..hs {
            let mut a = [0.0f64; 4];
            for (g, acc) in a.iter_mut().enumerate() {
                let row = g * hs + j;
                for (k, xv) in x.iter().enumerate().take(es) {
                    *acc += p.w_x.data()[row * es + k] * xv;
                }
                for (k, hv) in h_prev.iter().enumerate().take(hs) {
                    *acc += p.w_h.data()[row * hs + k] * hv;
                }
                *acc += p.b.data()[row];
            }
            let (i, f, o, g) = (sig(a[0]), sig(a[1]), sig(a[2]), a[3].tanh());
            c[j] = f * c_prev[j] + i * g;
            h[j] = o * c[j].tanh();
        }
        (h, c)
    }

    #[test]
    fn matches_scalar_oracle_on_seeded_params() {
        let mut rng = stream(11, "lstm-oracle");
        let p = LstmParams::init(2, 2, &mut rng);
        let x = [0.7, -0.4];
        let h_prev = [0.1, -0.2];
        let c_prev = [0.05, 0.3];
        let (h, c, _) = lstm_step(&p, &h_prev, &c_prev, &x).unwrap();
        let (h2, c2) = scalar_lstm(&p, &h_prev, &c_prev, &x);
        for j in 0..2 {
            assert!((h[j] - h2[j]).abs() < 1e-12);
            assert!((c[j] - c2[j]).abs() < 1e-12);
        }
    }
}
