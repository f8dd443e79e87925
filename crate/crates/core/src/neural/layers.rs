//! Parameterised building blocks: dense layers, small MLPs and LSTM cells.
//!
//! Parameters live in plain [`Tensor`]s owned by the layer structs. A
//! forward pass binds them onto a [`Tape`] (producing `*Vars` handles) so
//! one training step can collect gradients for every bound tensor. The
//! binding order is stable, which the optimizer relies on to pair moment
//! buffers with parameters.

use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Fully connected layer, `x (N x in) -> x W + b (N x out)`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

pub struct DenseVars {
    pub w: Var,
    pub b: Var,
}

impl Dense {
    pub fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = 1.0 / (input as f64).sqrt();
        Dense {
            w: Tensor::uniform(input, output, limit, rng),
            b: Tensor::zeros(1, output),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> DenseVars {
        DenseVars {
            w: tape.leaf(&self.w),
            b: tape.leaf(&self.b),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }
}

impl DenseVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = tape.matmul(x, self.w);
        tape.add_row(h, self.b)
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.w, self.b]
    }
}

/// Stack of dense layers with ReLU between them and a linear output.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

pub struct MlpVars {
    pub layers: Vec<DenseVars>,
}

impl Mlp {
    /// `dims` lists layer widths including input and output,
    /// e.g. `[8, 64, 64, 3]`.
    pub fn new(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let layers = dims
            .windows(2)
            .map(|w| Dense::new(w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn bind(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            layers: self.layers.iter().map(|l| l.bind(tape)).collect(),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

impl MlpVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h);
            if i < last {
                h = tape.relu(h);
            }
        }
        h
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| l.vars()).collect()
    }
}

/// LSTM cell parameters. The four gates are packed side by side in the
/// weight columns in the order input, forget, cell, output, so `w` is
/// `input x 4H`, `u` is `H x 4H` and `b` is `1 x 4H`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LstmParams {
    pub hidden: usize,
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
}

pub struct LstmVars {
    hidden: usize,
    w: Var,
    u: Var,
    b: Var,
}

impl LstmParams {
    pub fn new(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let wl = 1.0 / (input as f64).sqrt();
        let ul = 1.0 / (hidden as f64).sqrt();
        let mut b = Tensor::zeros(1, 4 * hidden);
        // forget gate opens at init so early training can carry state
        for j in hidden..2 * hidden {
            b.data[j] = 1.0;
        }
        LstmParams {
            hidden,
            w: Tensor::uniform(input, 4 * hidden, wl, rng),
            u: Tensor::uniform(hidden, 4 * hidden, ul, rng),
            b,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> LstmVars {
        LstmVars {
            hidden: self.hidden,
            w: tape.leaf(&self.w),
            u: tape.leaf(&self.u),
            b: tape.leaf(&self.b),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.u, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.u, &mut self.b]
    }
}

impl LstmVars {
    pub fn vars(&self) -> Vec<Var> {
        vec![self.w, self.u, self.b]
    }

    /// One cell update from a precomputed input projection row
    /// (`x_t W`, shape 1 x 4H). Returns (h, c).
    fn step(&self, tape: &mut Tape, xw_row: Var, h: Var, c: Var) -> (Var, Var) {
        let hh = self.hidden;
        let hu = tape.matmul(h, self.u);
        let z = tape.add(xw_row, hu);
        let z = tape.add(z, self.b);
        let zi = tape.slice_cols(z, 0, hh);
        let zf = tape.slice_cols(z, hh, 2 * hh);
        let zg = tape.slice_cols(z, 2 * hh, 3 * hh);
        let zo = tape.slice_cols(z, 3 * hh, 4 * hh);
        let i = tape.sigmoid(zi);
        let f = tape.sigmoid(zf);
        let g = tape.tanh(zg);
        let o = tape.sigmoid(zo);
        let fc = tape.mul(f, c);
        let ig = tape.mul(i, g);
        let c_next = tape.add(fc, ig);
        let ct = tape.tanh(c_next);
        let h_next = tape.mul(o, ct);
        (h_next, c_next)
    }

    /// Runs the cell over a `T x input` sequence from zero state and
    /// returns the `T x H` matrix of hidden states. With `reverse` the
    /// recurrence runs from the last row to the first, and the output
    /// rows are flipped back so row `t` still corresponds to input
    /// row `t`.
    pub fn sequence(&self, tape: &mut Tape, x: Var, reverse: bool) -> Var {
        let t_len = x.rows;
        assert!(t_len > 0, "lstm sequence needs at least one step");
        let xw = tape.matmul(x, self.w);
        let zeros = Tensor::zeros(1, self.hidden);
        let mut h = tape.leaf(&zeros);
        let mut c = tape.leaf(&zeros);
        let mut outputs = vec![h; t_len];
        let order: Vec<usize> = if reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        for t in order {
            let xw_row = tape.slice_rows(xw, t, t + 1);
            let (h2, c2) = self.step(tape, xw_row, h, c);
            h = h2;
            c = c2;
            outputs[t] = h;
        }
        tape.concat_rows(&outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sub_rng;
    use approx::assert_relative_eq;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Scalar reference for one LSTM step, written independently of the
    /// tape ops.
    fn reference_step(
        p: &LstmParams,
        x: &[f64],
        h_prev: &[f64],
        c_prev: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let hh = p.hidden;
        let mut z = vec![0.0; 4 * hh];
        for (j, zj) in z.iter_mut().enumerate() {
            let mut s = p.b.data[j];
            for (k, &xk) in x.iter().enumerate() {
                s += xk * p.w.get(k, j);
            }
            for (k, &hk) in h_prev.iter().enumerate() {
                s += hk * p.u.get(k, j);
            }
            *zj = s;
        }
        let mut h = vec![0.0; hh];
        let mut c = vec![0.0; hh];
        for j in 0..hh {
            let i = sig(z[j]);
            let f = sig(z[hh + j]);
            let g = z[2 * hh + j].tanh();
            let o = sig(z[3 * hh + j]);
            c[j] = f * c_prev[j] + i * g;
            h[j] = o * c[j].tanh();
        }
        (h, c)
    }

    #[test]
    fn forget_gate_bias_starts_open() {
        let mut rng = sub_rng(7, "test/lstm-init");
        let p = LstmParams::new(3, 5, &mut rng);
        for j in 0..20 {
            let expected = if (5..10).contains(&j) { 1.0 } else { 0.0 };
            assert_eq!(p.b.data[j], expected, "bias column {j}");
        }
        assert!(p.w.data.iter().all(|v| v.abs() <= 1.0 / 3f64.sqrt()));
        assert!(p.u.data.iter().all(|v| v.abs() <= 1.0 / 5f64.sqrt()));
    }

    #[test]
    fn sequence_matches_scalar_reference() {
        let mut rng = sub_rng(11, "test/lstm-ref");
        let p = LstmParams::new(4, 3, &mut rng);
        let x = Tensor::uniform(6, 4, 1.0, &mut rng);

        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let xv = tape.leaf(&x);
        let out = vars.sequence(&mut tape, xv, false);

        let mut h = vec![0.0; 3];
        let mut c = vec![0.0; 3];
        for t in 0..6 {
            let (h2, c2) = reference_step(&p, x.row_slice(t), &h, &c);
            h = h2;
            c = c2;
            for (j, &hj) in h.iter().enumerate() {
                assert_relative_eq!(
                    tape.value(out)[t * 3 + j],
                    hj,
                    max_relative = 1e-12,
                    epsilon = 1e-14
                );
            }
        }
    }

    #[test]
    fn reversed_sequence_equals_forward_on_flipped_input() {
        let mut rng = sub_rng(13, "test/lstm-rev");
        let p = LstmParams::new(2, 4, &mut rng);
        let x = Tensor::uniform(5, 2, 1.0, &mut rng);
        let flipped_rows: Vec<Vec<f64>> =
            (0..5).rev().map(|t| x.row_slice(t).to_vec()).collect();
        let flipped = Tensor::from_rows(&flipped_rows);

        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let xv = tape.leaf(&x);
        let fv = tape.leaf(&flipped);
        let rev = vars.sequence(&mut tape, xv, true);
        let fwd = vars.sequence(&mut tape, fv, false);
        for t in 0..5 {
            assert_eq!(
                tape.value(rev)[t * 4..(t + 1) * 4],
                tape.value(fwd)[(4 - t) * 4..(5 - t) * 4],
                "row {t}"
            );
        }
    }

    #[test]
    fn mlp_hidden_layers_are_rectified() {
        let mut rng = sub_rng(3, "test/mlp");
        let mlp = Mlp::new(&[2, 8, 1], &mut rng);
        let mut tape = Tape::new();
        let vars = mlp.bind(&mut tape);
        let x = tape.leaf(&Tensor::from_vec(1, 2, vec![0.3, -0.8]));
        let y = vars.forward(&mut tape, x);
        assert_eq!((y.rows, y.cols), (1, 1));
        // manual forward
        let h: Vec<f64> = (0..8)
            .map(|j| {
                (0.3 * mlp.layers[0].w.get(0, j) - 0.8 * mlp.layers[0].w.get(1, j)
                    + mlp.layers[0].b.data[j])
                    .max(0.0)
            })
            .collect();
        let expect: f64 = h
            .iter()
            .enumerate()
            .map(|(j, &v)| v * mlp.layers[1].w.get(j, 0))
            .sum::<f64>()
            + mlp.layers[1].b.data[0];
        assert_relative_eq!(tape.value_scalar(y), expect, max_relative = 1e-12);
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let mut rng = sub_rng(17, "test/lstm-grad");
        let p = LstmParams::new(2, 3, &mut rng);
        let x = Tensor::uniform(4, 2, 1.0, &mut rng);

        let loss_of = |p: &LstmParams| {
            let mut tape = Tape::new();
            let vars = p.bind(&mut tape);
            let xv = tape.leaf(&x);
            let out = vars.sequence(&mut tape, xv, false);
            let l = tape.mean_all(out);
            tape.value_scalar(l)
        };

        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let xv = tape.leaf(&x);
        let out = vars.sequence(&mut tape, xv, false);
        let l = tape.mean_all(out);
        let grads = tape.backward(l).unwrap();

        let h = 1e-6;
        let bound = vars.vars();
        for (pi, tensor) in p.params().into_iter().enumerate() {
            for ci in 0..tensor.len() {
                let mut plus = p.clone();
                plus.params_mut()[pi].data[ci] += h;
                let mut minus = p.clone();
                minus.params_mut()[pi].data[ci] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let g = grads.of(bound[pi])[ci];
                let rel = (fd - g).abs() / (fd.abs() + g.abs() + 1e-9);
                assert!(rel < 1e-5, "param {pi} entry {ci}: fd {fd} vs {g}");
            }
        }
    }
}
