//! Single LSTM layer with backpropagation through time.

use rand_chacha::ChaCha8Rng;

use super::layers::{uniform_param, zero_param, Layer, Mode, Param};
use super::tensor::{gemm, Tensor};

const GATES: [&str; 4] = ["input", "forget", "cell", "output"];

struct Step {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Post-activation gate values, indexed like `GATES`.
    gates: [Vec<f64>; 4],
    tanh_c: Vec<f64>,
}

/// Input `[B, T, D]`; output `[B, T, H]` with `return_sequences`, else the
/// last hidden state `[B, H]`. Gate weights `W_* : [D, H]`, recurrent
/// weights `U_* : [H, H]`.
pub(crate) struct Lstm {
    inputs: usize,
    units: usize,
    return_sequences: bool,
    w: [Param; 4],
    u: [Param; 4],
    b: [Param; 4],
    steps: Vec<Step>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl Lstm {
    pub(crate) fn new(
        prefix: &str,
        inputs: usize,
        units: usize,
        return_sequences: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = GATES.map(|g| {
            uniform_param(
                &format!("{prefix}.w_{g}"),
                vec![inputs, units],
                1.0 / (inputs as f64).sqrt(),
                rng,
            )
        });
        let u = GATES.map(|g| {
            uniform_param(
                &format!("{prefix}.u_{g}"),
                vec![units, units],
                1.0 / (units as f64).sqrt(),
                rng,
            )
        });
        let b = GATES.map(|g| zero_param(&format!("{prefix}.b_{g}"), vec![units]));
        Lstm {
            inputs,
            units,
            return_sequences,
            w,
            u,
            b,
            steps: Vec::new(),
        }
    }
}

impl Layer for Lstm {
    fn forward(&mut self, x: Tensor, _mode: Mode, _rng: &mut ChaCha8Rng) -> Tensor {
        let (batch, t_len, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let hu = self.units;
        let mut h = vec![0.0; batch * hu];
        let mut c = vec![0.0; batch * hu];
        let mut outputs = Vec::new();
        self.steps.clear();
        for t in 0..t_len {
            let mut xt = Vec::with_capacity(batch * d);
            for bi in 0..batch {
                xt.extend_from_slice(&x.item(bi)[t * d..(t + 1) * d]);
            }
            let gates: [Vec<f64>; 4] = std::array::from_fn(|gi| {
                let mut pre: Vec<f64> = (0..batch).flat_map(|_| self.b[gi].value.iter().copied()).collect();
                gemm(false, false, batch, hu, d, 1.0, &xt, &self.w[gi].value, 1.0, &mut pre);
                gemm(false, false, batch, hu, hu, 1.0, &h, &self.u[gi].value, 1.0, &mut pre);
                if gi == 2 {
                    pre.iter().map(|v| v.tanh()).collect()
                } else {
                    pre.into_iter().map(sigmoid).collect()
                }
            });
            let c_new: Vec<f64> = (0..batch * hu)
                .map(|i| gates[1][i] * c[i] + gates[0][i] * gates[2][i])
                .collect();
            let tanh_c: Vec<f64> = c_new.iter().map(|v| v.tanh()).collect();
            let h_new: Vec<f64> = (0..batch * hu).map(|i| gates[3][i] * tanh_c[i]).collect();
            self.steps.push(Step {
                x: xt,
                h_prev: std::mem::replace(&mut h, h_new),
                c_prev: std::mem::replace(&mut c, c_new),
                gates,
                tanh_c,
            });
            if self.return_sequences {
                outputs.push(h.clone());
            }
        }
        if self.return_sequences {
            let mut out = vec![0.0; batch * t_len * hu];
            for (t, ht) in outputs.iter().enumerate() {
                for bi in 0..batch {
                    out[(bi * t_len + t) * hu..(bi * t_len + t + 1) * hu]
                        .copy_from_slice(&ht[bi * hu..(bi + 1) * hu]);
                }
            }
            Tensor::new(vec![batch, t_len, hu], out).expect("lstm shape")
        } else {
            Tensor::new(vec![batch, hu], h).expect("lstm shape")
        }
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let batch = grad.batch();
        let t_len = self.steps.len();
        let (d, hu) = (self.inputs, self.units);
        let g = grad.data();
        let mut dh_next = vec![0.0; batch * hu];
        let mut dc_next = vec![0.0; batch * hu];
        let mut dx = vec![0.0; batch * t_len * d];
        for t in (0..t_len).rev() {
            let step = &self.steps[t];
            let mut dh = dh_next.clone();
            if self.return_sequences {
                for bi in 0..batch {
                    for j in 0..hu {
                        dh[bi * hu + j] += g[(bi * t_len + t) * hu + j];
                    }
                }
            } else if t == t_len - 1 {
                dh.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            let [gi, gf, gc, go] = &step.gates;
            let n = batch * hu;
            let mut dpre: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; n]);
            for i in 0..n {
                let dc = dc_next[i] + dh[i] * go[i] * (1.0 - step.tanh_c[i] * step.tanh_c[i]);
                dpre[0][i] = dc * gc[i] * gi[i] * (1.0 - gi[i]);
                dpre[1][i] = dc * step.c_prev[i] * gf[i] * (1.0 - gf[i]);
                dpre[2][i] = dc * gi[i] * (1.0 - gc[i] * gc[i]);
                dpre[3][i] = dh[i] * step.tanh_c[i] * go[i] * (1.0 - go[i]);
                dc_next[i] = dc * gf[i];
            }
            let mut dxt = vec![0.0; batch * d];
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..4 {
                let dp = &dpre[k];
                gemm(true, false, d, hu, batch, 1.0, &step.x, dp, 1.0, &mut self.w[k].grad);
                gemm(true, false, hu, hu, batch, 1.0, &step.h_prev, dp, 1.0, &mut self.u[k].grad);
                for row in dp.chunks(hu) {
                    self.b[k].grad.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                gemm(false, true, batch, d, hu, 1.0, dp, &self.w[k].value, 1.0, &mut dxt);
                gemm(false, true, batch, hu, hu, 1.0, dp, &self.u[k].value, 1.0, &mut dh_next);
            }
            for bi in 0..batch {
                dx[(bi * t_len + t) * d..(bi * t_len + t + 1) * d]
                    .copy_from_slice(&dxt[bi * d..(bi + 1) * d]);
            }
        }
        Tensor::new(vec![batch, t_len, d], dx).expect("lstm grad shape")
    }

    fn params(&self) -> Vec<&Param> {
        self.w.iter().chain(&self.u).chain(&self.b).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.w.iter_mut().chain(&mut self.u).chain(&mut self.b).collect()
    }
}
