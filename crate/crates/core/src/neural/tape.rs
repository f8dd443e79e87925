//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Forward operations append nodes carrying their value and a backward
//! closure; `backward` walks the tape in reverse and accumulates gradients.
//! Because nodes only ever reference earlier nodes, gradient propagation
//! can split the buffer at the current node and write parent gradients
//! without aliasing.
//!
//! Every operation checks its output for non-finite values and poisons the
//! tape on the first occurrence; `backward` then refuses to run and names
//! the operation, which makes numeric blow-ups during training show up at
//! their source instead of as mysterious NaN weights.
//!
//! Shape mismatches are programmer errors and panic; data-dependent
//! failures are reported through [`NeuralError`].

use super::tensor::Tensor;
use super::NeuralError;

/// Handle to a tape node. Carries its shape so op builders can check
/// dimensions without a tape lookup.
#[derive(Debug, Clone, Copy)]
pub struct Var {
    pub(crate) id: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Var {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Backward closure: (all node values, gradients of earlier nodes, own
/// output gradient).
type BackFn = Box<dyn Fn(&[Vec<f64>], &mut [Vec<f64>], &[f64])>;

/// Gradients produced by one backward pass, indexed by the `Var` they
/// belong to.
#[derive(Debug)]
pub struct Gradients {
    store: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> &[f64] {
        &self.store[v.id]
    }

    pub fn take(&mut self, v: Var) -> Vec<f64> {
        std::mem::take(&mut self.store[v.id])
    }
}

#[derive(Default)]
pub struct Tape {
    shapes: Vec<(usize, usize)>,
    values: Vec<Vec<f64>>,
    backs: Vec<Option<BackFn>>,
    poison: Option<&'static str>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.values[v.id]
    }

    pub fn value_scalar(&self, v: Var) -> f64 {
        assert_eq!((v.rows, v.cols), (1, 1), "not a scalar");
        self.values[v.id][0]
    }

    pub fn poisoned(&self) -> Option<&'static str> {
        self.poison
    }

    fn push(&mut self, op: &'static str, rows: usize, cols: usize, value: Vec<f64>, back: Option<BackFn>) -> Var {
        debug_assert_eq!(value.len(), rows * cols, "{op}: wrong output length");
        if self.poison.is_none() && value.iter().any(|v| !v.is_finite()) {
            self.poison = Some(op);
        }
        let id = self.shapes.len();
        self.shapes.push((rows, cols));
        self.values.push(value);
        self.backs.push(back);
        Var { id, rows, cols }
    }

    /// Registers a leaf. Leaves receive gradients but have no parents;
    /// trainable parameters and constants both enter this way.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push("leaf", t.rows, t.cols, t.data.clone(), None)
    }

    pub fn leaf_from(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        self.push("leaf", rows, cols, data, None)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push("leaf", 1, 1, vec![v], None)
    }

    /// Runs the backward pass from a scalar root. Fails if any forward
    /// operation produced a non-finite value.
    pub fn backward(&self, root: Var) -> Result<Gradients, NeuralError> {
        if let Some(op) = self.poison {
            return Err(NeuralError::NonFinite { op });
        }
        assert_eq!((root.rows, root.cols), (1, 1), "backward needs a scalar root");
        let mut store: Vec<Vec<f64>> = self
            .shapes
            .iter()
            .map(|&(r, c)| vec![0.0; r * c])
            .collect();
        store[root.id][0] = 1.0;
        for id in (0..=root.id).rev() {
            let Some(back) = &self.backs[id] else { continue };
            let (before, at) = store.split_at_mut(id);
            back(&self.values, before, &at[0]);
        }
        Ok(Gradients { store })
    }

    // ---- binary elementwise ----

    fn binary_elementwise(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Vec<f64> {
        assert_eq!(
            (a.rows, a.cols),
            (b.rows, b.cols),
            "{op}: shape mismatch {}x{} vs {}x{}",
            a.rows,
            a.cols,
            b.rows,
            b.cols
        );
        self.values[a.id]
            .iter()
            .zip(&self.values[b.id])
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary_elementwise("add", a, b, |x, y| x + y);
        self.push(
            "add",
            a.rows,
            a.cols,
            out,
            Some(Box::new(move |_vals, grads, gout| {
                for (g, &d) in grads[a.id].iter_mut().zip(gout) {
                    *g += d;
                }
                for (g, &d) in grads[b.id].iter_mut().zip(gout) {
                    *g += d;
                }
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary_elementwise("sub", a, b, |x, y| x - y);
        self.push(
            "sub",
            a.rows,
            a.cols,
            out,
            Some(Box::new(move |_vals, grads, gout| {
                for (g, &d) in grads[a.id].iter_mut().zip(gout) {
                    *g += d;
                }
                for (g, &d) in grads[b.id].iter_mut().zip(gout) {
                    *g -= d;
                }
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary_elementwise("mul", a, b, |x, y| x * y);
        self.push(
            "mul",
            a.rows,
            a.cols,
            out,
            Some(Box::new(move |vals, grads, gout| {
                // a and b may be the same node; accumulate sequentially
                for i in 0..gout.len() {
                    grads[a.id][i] += gout[i] * vals[b.id][i];
                }
                for i in 0..gout.len() {
                    grads[b.id][i] += gout[i] * vals[a.id][i];
                }
            })),
        )
    }

    /// Dense matrix product `a (R x K) * b (K x C)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            a.cols, b.rows,
            "matmul: inner dimensions {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        );
        let (r, k, c) = (a.rows, a.cols, b.cols);
        let av = &self.values[a.id];
        let bv = &self.values[b.id];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for kk in 0..k {
                let x = av[i * k + kk];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[kk * c..(kk + 1) * c];
                let orow = &mut out[i * c..(i + 1) * c];
                for j in 0..c {
                    orow[j] += x * brow[j];
                }
            }
        }
        self.push(
            "matmul",
            r,
            c,
            out,
            Some(Box::new(move |vals, grads, gout| {
                let av = &vals[a.id];
                let bv = &vals[b.id];
                {
                    let ga = &mut grads[a.id];
                    for i in 0..r {
                        for kk in 0..k {
                            let mut s = 0.0;
                            let brow = &bv[kk * c..(kk + 1) * c];
                            let grow = &gout[i * c..(i + 1) * c];
                            for j in 0..c {
                                s += grow[j] * brow[j];
                            }
                            ga[i * k + kk] += s;
                        }
                    }
                }
                {
                    let gb = &mut grads[b.id];
                    for kk in 0..k {
                        for i in 0..r {
                            let x = av[i * k + kk];
                            if x == 0.0 {
                                continue;
                            }
                            let grow = &gout[i * c..(i + 1) * c];
                            let gbrow = &mut gb[kk * c..(kk + 1) * c];
                            for j in 0..c {
                                gbrow[j] += x * grow[j];
                            }
                        }
                    }
                }
            })),
        )
    }

    // ---- broadcasts ----

    /// Adds a 1 x C row vector to every row of an R x C matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(row.rows, 1, "add_row: second operand must be a row");
        assert_eq!(a.cols, row.cols, "add_row: width mismatch");
        let (r, c) = (a.rows, a.cols);
        let out: Vec<f64> = (0..r * c)
            .map(|i| self.values[a.id][i] + self.values[row.id][i % c])
            .collect();
        self.push(
            "add_row",
            r,
            c,
            out,
            Some(Box::new(move |_vals, grads, gout| {
                for (g, &d) in grads[a.id].iter_mut().zip(gout) {
                    *g += d;
                }
                let grow = &mut grads[row.id];
                for i in 0..r {
                    for j in 0..c {
                        grow[j] += gout[i * c + j];
                    }
                }
            })),
        )
    }

    /// Multiplies every row of an R x C matrix by a 1 x C row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(row.rows, 1, "mul_row: second operand must be a row");
        assert_eq!(a.cols, row.cols, "mul_row: width mismatch");
        let (r, c) = (a.rows, a.cols);
        let out: Vec<f64> = (0..r * c)
            .map(|i| self.values[a.id][i] * self.values[row.id][i % c])
            .collect();
        self.push(
            "mul_row",
            r,
            c,
            out,
            Some(Box::new(move |vals, grads, gout| {
                for i in 0..r * c {
                    grads[a.id][i] += gout[i] * vals[row.id][i % c];
                }
                let grow = &mut grads[row.id];
                for i in 0..r {
                    for j in 0..c {
                        grow[j] += gout[i * c + j] * vals[a.id][i * c + j];
                    }
                }
            })),
        )
    }

    /// Multiplies every column of an R x C matrix by an R x 1 column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(col.cols, 1, "mul_col: second operand must be a column");
        assert_eq!(a.rows, col.rows, "mul_col: height mismatch");
        let (r, c) = (a.rows, a.cols);
        let out: Vec<f64> = (0..r * c)
            .map(|i| self.values[a.id][i] * self.values[col.id][i / c])
            .collect();
        self.push(
            "mul_col",
            r,
            c,
            out,
            Some(Box::new(move |vals, grads, gout| {
                for i in 0..r * c {
                    grads[a.id][i] += gout[i] * vals[col.id][i / c];
                }
                let gcol = &mut grads[col.id];
                for i in 0..r {
                    let mut s = 0.0;
                    for j in 0..c {
                        s += gout[i * c + j] * vals[a.id][i * c + j];
                    }
                    gcol[i] += s;
                }
            })),
        )
    }

    // ---- scalar-parameter ops ----

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out: Vec<f64> = self.values[a.id].iter().map(|&x| x * k).collect();
        self.push(
            "scale",
            a.rows,
            a.cols,
            out,
            Some(Box::new(move |_vals, grads, gout| {
                for (g, &d) in grads[a.id].iter_mut().zip(gout) {
                    *g += k * d;
                }
            })),
        )
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out: Vec<f64> = self.values[a.id].iter().map(|&x| x + k).collect();
        self.push(
            "add_scalar",
            a.rows,
            a.cols,
            out,
            Some(Box::new(move |_vals, grads, gout| {
                for (g, &d) in grads[a.id].iter_mut().zip(gout) {
                    *g += d;
                }
            })),
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Elementwise `a * scale + offset` with constant coefficient buffers.
    /// Used to override entries with fixed values: a scale of 0 detaches
    /// the entry from the graph and the offset supplies the replacement.
    pub fn affine_mask(&mut self, a: Var, scale: Vec<f64>, offset: Vec<f64>) -> Var {
        assert_eq!(scale.len(), a.len(), "affine_mask: scale length");
        assert_eq!(offset.len(), a.len(), "affine_mask: offset length");
        let out: Vec<f64> = self.values[a.id]
            .iter()
            .enumerate()
            .map(|(i, &x)| x * scale[i] + offset[i])
            .collect();
        self.push(
            "affine_mask",
            a.rows,
            a.cols,
            out,
            Some(Box::new(move |_vals, grads, gout| {
                for i in 0..gout.len() {
                    grads[a.id][i] += gout[i] * scale[i];
                }
            })),
        )
    }

    // ---- unary math ----

    fn unary(
        &mut self,
        op: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        // derivative from (input, output)
        d: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let out: Vec<f64> = self.values[a.id].iter().map(|&x| f(x)).collect();
        let id = self.shapes.len(); // the node being pushed
        self.push(
            op,
            a.rows,
            a.cols,
            out,
            Some(Box::new(move |vals, grads, gout| {
                for i in 0..gout.len() {
                    let x = vals[a.id][i];
                    let y = vals[id][i];
                    grads[a.id][i] += gout[i] * d(x, y);
                }
            })),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary("exp", a, f64::exp, |_x, y| y)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary("tanh", a, f64::tanh, |_x, y| 1.0 - y * y)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        fn sig(x: f64) -> f64 {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }
        self.unary("sigmoid", a, sig, |_x, y| y * (1.0 - y))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary("relu", a, |x| x.max(0.0), |x, _y| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        fn sp(x: f64) -> f64 {
            x.max(0.0) + (-x.abs()).exp().ln_1p()
        }
        fn sig(x: f64) -> f64 {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }
        self.unary("softplus", a, sp, |x, _y| sig(x))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary("recip", a, |x| 1.0 / x, |_x, y| -y * y)
    }

    /// Square root clamped below at zero; the gradient vanishes at the
    /// clamp instead of blowing up.
    pub fn sqrt_guarded(&mut self, a: Var) -> Var {
        self.unary(
            "sqrt",
            a,
            |x| x.max(0.0).sqrt(),
            |x, y| if x > 1e-24 { 0.5 / y } else { 0.0 },
        )
    }

    /// Elementwise Huber penalty of the input residuals.
    pub fn huber(&mut self, a: Var, delta: f64) -> Var {
        assert!(delta > 0.0, "huber: delta must be positive");
        self.unary(
            "huber",
            a,
            move |x| {
                if x.abs() <= delta {
                    0.5 * x * x
                } else {
                    delta * (x.abs() - 0.5 * delta)
                }
            },
            move |x, _y| x.clamp(-delta, delta),
        )
    }

    // ---- structure ops ----

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let r = parts[0].rows;
        assert!(
            parts.iter().all(|p| p.rows == r),
            "concat_cols: row mismatch"
        );
        let total: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for p in parts {
            for i in 0..r {
                let src = &self.values[p.id][i * p.cols..(i + 1) * p.cols];
                out[i * total + offset..i * total + offset + p.cols].copy_from_slice(src);
            }
            offset += p.cols;
        }
        let parts: Vec<Var> = parts.to_vec();
        self.push(
            "concat_cols",
            r,
            total,
            out,
            Some(Box::new(move |_vals, grads, gout| {
                let mut offset = 0;
                for p in &parts {
                    for i in 0..r {
                        for j in 0..p.cols {
                            grads[p.id][i * p.cols + j] += gout[i * total + offset + j];
                        }
                    }
                    offset += p.cols;
                }
            })),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let c = parts[0].cols;
        assert!(
            parts.iter().all(|p| p.cols == c),
            "concat_rows: column mismatch"
        );
        let total: usize = parts.iter().map(|p| p.rows).sum();
        let mut out = Vec::with_capacity(total * c);
        for p in parts {
            out.extend_from_slice(&self.values[p.id]);
        }
        let parts: Vec<Var> = parts.to_vec();
        self.push(
            "concat_rows",
            total,
            c,
            out,
            Some(Box::new(move |_vals, grads, gout| {
                let mut offset = 0;
                for p in &parts {
                    let len = p.rows * c;
                    for i in 0..len {
                        grads[p.id][i] += gout[offset + i];
                    }
                    offset += len;
                }
            })),
        )
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        assert!(r0 < r1 && r1 <= a.rows, "slice_rows: bad range {r0}..{r1}");
        let c = a.cols;
        let out = self.values[a.id][r0 * c..r1 * c].to_vec();
        self.push(
            "slice_rows",
            r1 - r0,
            c,
            out,
            Some(Box::new(move |_vals, grads, gout| {
                for i in 0..gout.len() {
                    grads[a.id][r0 * c + i] += gout[i];
                }
            })),
        )
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        self.slice_rows(a, r, r + 1)
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        assert!(c0 < c1 && c1 <= a.cols, "slice_cols: bad range {c0}..{c1}");
        let (r, c) = (a.rows, a.cols);
        let w = c1 - c0;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&self.values[a.id][i * c + c0..i * c + c1]);
        }
        self.push(
            "slice_cols",
            r,
            w,
            out,
            Some(Box::new(move |_vals, grads, gout| {
                for i in 0..r {
                    for j in 0..w {
                        grads[a.id][i * c + c0 + j] += gout[i * w + j];
                    }
                }
            })),
        )
    }

    /// Reinterprets the data with a new shape of the same total size.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(a.len(), rows * cols, "reshape: size mismatch");
        let out = self.values[a.id].clone();
        self.push(
            "reshape",
            rows,
            cols,
            out,
            Some(Box::new(move |_vals, grads, gout| {
                for i in 0..gout.len() {
                    grads[a.id][i] += gout[i];
                }
            })),
        )
    }

    /// Stacks `times` copies of the full matrix vertically.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Var {
        assert!(times > 0, "tile_rows: zero repetitions");
        let block = a.len();
        let mut out = Vec::with_capacity(block * times);
        for _ in 0..times {
            out.extend_from_slice(&self.values[a.id]);
        }
        self.push(
            "tile_rows",
            a.rows * times,
            a.cols,
            out,
            Some(Box::new(move |_vals, grads, gout| {
                for t in 0..times {
                    for i in 0..block {
                        grads[a.id][i] += gout[t * block + i];
                    }
                }
            })),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.values[a.id].iter().sum();
        self.push(
            "sum_all",
            1,
            1,
            vec![s],
            Some(Box::new(move |_vals, grads, gout| {
                let d = gout[0];
                for g in grads[a.id].iter_mut() {
                    *g += d;
                }
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = a.len() as f64;
        let s: f64 = self.values[a.id].iter().sum::<f64>() / n;
        self.push(
            "mean_all",
            1,
            1,
            vec![s],
            Some(Box::new(move |_vals, grads, gout| {
                let d = gout[0] / n;
                for g in grads[a.id].iter_mut() {
                    *g += d;
                }
            })),
        )
    }

    /// Per-row sum, R x C -> R x 1.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let (r, c) = (a.rows, a.cols);
        let out: Vec<f64> = (0..r)
            .map(|i| self.values[a.id][i * c..(i + 1) * c].iter().sum())
            .collect();
        self.push(
            "row_sum",
            r,
            1,
            out,
            Some(Box::new(move |_vals, grads, gout| {
                for i in 0..r {
                    let d = gout[i];
                    for j in 0..c {
                        grads[a.id][i * c + j] += d;
                    }
                }
            })),
        )
    }

    pub fn row_mean(&mut self, a: Var) -> Var {
        let s = self.row_sum(a);
        self.scale(s, 1.0 / a.cols as f64)
    }

    /// Running sum down the rows: `out[r] = sum_{k <= r} a[k]`, per column.
    pub fn cumsum_rows(&mut self, a: Var) -> Var {
        let (r, c) = (a.rows, a.cols);
        let av = &self.values[a.id];
        let mut out = vec![0.0; r * c];
        for j in 0..c {
            let mut acc = 0.0;
            for i in 0..r {
                acc += av[i * c + j];
                out[i * c + j] = acc;
            }
        }
        self.push(
            "cumsum_rows",
            r,
            c,
            out,
            Some(Box::new(move |_vals, grads, gout| {
                // gradient of a prefix sum is a suffix sum
                for j in 0..c {
                    let mut acc = 0.0;
                    for i in (0..r).rev() {
                        acc += gout[i * c + j];
                        grads[a.id][i * c + j] += acc;
                    }
                }
            })),
        )
    }

    /// Weighted per-segment aggregation: `h` holds T segments of `seg` rows
    /// each ((T*seg) x H), `w` the weights (T x seg);
    /// `out[t] = sum_a w[t,a] * h[t*seg + a]`.
    pub fn segment_weighted_sum(&mut self, h: Var, w: Var) -> Var {
        let seg = w.cols;
        let t = w.rows;
        assert_eq!(h.rows, t * seg, "segment_weighted_sum: row count");
        let width = h.cols;
        let hv = &self.values[h.id];
        let wv = &self.values[w.id];
        let mut out = vec![0.0; t * width];
        for ti in 0..t {
            for a in 0..seg {
                let weight = wv[ti * seg + a];
                if weight == 0.0 {
                    continue;
                }
                let hrow = &hv[(ti * seg + a) * width..(ti * seg + a + 1) * width];
                let orow = &mut out[ti * width..(ti + 1) * width];
                for j in 0..width {
                    orow[j] += weight * hrow[j];
                }
            }
        }
        self.push(
            "segment_weighted_sum",
            t,
            width,
            out,
            Some(Box::new(move |vals, grads, gout| {
                let hv = &vals[h.id];
                let wv = &vals[w.id];
                for ti in 0..t {
                    let grow = &gout[ti * width..(ti + 1) * width];
                    for a in 0..seg {
                        let weight = wv[ti * seg + a];
                        let base = (ti * seg + a) * width;
                        let mut s = 0.0;
                        for j in 0..width {
                            grads[h.id][base + j] += weight * grow[j];
                            s += hv[base + j] * grow[j];
                        }
                        grads[w.id][ti * seg + a] += s;
                    }
                }
            })),
        )
    }

    /// Sums any number of same-shape vars.
    pub fn add_many(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "add_many: no parts");
        let (r, c) = (parts[0].rows, parts[0].cols);
        assert!(
            parts.iter().all(|p| (p.rows, p.cols) == (r, c)),
            "add_many: shape mismatch"
        );
        let mut out = vec![0.0; r * c];
        for p in parts {
            for (o, &v) in out.iter_mut().zip(&self.values[p.id]) {
                *o += v;
            }
        }
        let parts: Vec<Var> = parts.to_vec();
        self.push(
            "add_many",
            r,
            c,
            out,
            Some(Box::new(move |_vals, grads, gout| {
                for p in &parts {
                    for (g, &d) in grads[p.id].iter_mut().zip(gout) {
                        *g += d;
                    }
                }
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grad_of(
        build: impl Fn(&mut Tape, Var) -> Var,
        input: &Tensor,
    ) -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let x = tape.leaf(input);
        let y = build(&mut tape, x);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        (tape.value_scalar(loss), grads.of(x).to_vec())
    }

    fn numeric_grad(
        build: impl Fn(&mut Tape, Var) -> Var + Copy,
        input: &Tensor,
        h: f64,
    ) -> Vec<f64> {
        let mut out = Vec::with_capacity(input.len());
        for i in 0..input.len() {
            let mut plus = input.clone();
            plus.data[i] += h;
            let mut minus = input.clone();
            minus.data[i] -= h;
            let f = |t: &Tensor| {
                let mut tape = Tape::new();
                let x = tape.leaf(t);
                let y = build(&mut tape, x);
                let l = tape.sum_all(y);
                tape.value_scalar(l)
            };
            out.push((f(&plus) - f(&minus)) / (2.0 * h));
        }
        out
    }

    fn check_op(build: impl Fn(&mut Tape, Var) -> Var + Copy, input: Tensor) {
        let (_, analytic) = grad_of(build, &input);
        let numeric = numeric_grad(build, &input, 1e-6);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let rel = (a - n).abs() / (a.abs() + n.abs() + 1e-9);
            assert!(rel < 1e-6, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn unary_op_gradients_match_finite_differences() {
        let x = Tensor::from_vec(2, 3, vec![0.5, -1.2, 2.0, 0.1, -0.4, 1.5]);
        check_op(|t, v| t.exp(v), x.clone());
        check_op(|t, v| t.tanh(v), x.clone());
        check_op(|t, v| t.sigmoid(v), x.clone());
        check_op(|t, v| t.softplus(v), x.clone());
        check_op(|t, v| t.relu(v), x.clone());
        check_op(|t, v| t.huber(v, 0.7), x.clone());
        check_op(|t, v| t.scale(v, -2.5), x.clone());
        check_op(|t, v| t.add_scalar(v, 3.0), x.clone());
        check_op(|t, v| t.cumsum_rows(v), x.clone());
        check_op(|t, v| t.row_sum(v), x.clone());
        check_op(|t, v| t.row_mean(v), x);
        let positive = Tensor::from_vec(1, 4, vec![0.5, 1.5, 2.0, 0.01]);
        check_op(|t, v| t.recip(v), positive.clone());
        check_op(|t, v| t.sqrt_guarded(v), positive);
    }

    #[test]
    fn composite_graph_gradient_matches_finite_differences() {
        // f(x) = sum(tanh(x W + b) * x) with W, b fixed: exercises matmul,
        // broadcasts and elementwise products together
        let w = Tensor::from_vec(3, 3, vec![0.2, -0.1, 0.4, 0.5, 0.3, -0.2, -0.3, 0.1, 0.6]);
        let b = Tensor::from_vec(1, 3, vec![0.1, -0.2, 0.05]);
        let build = |t: &mut Tape, x: Var| {
            let wv = t.leaf(&w);
            let bv = t.leaf(&b);
            let h = t.matmul(x, wv);
            let h = t.add_row(h, bv);
            let h = t.tanh(h);
            t.mul(h, x)
        };
        check_op(build, Tensor::from_vec(2, 3, vec![0.3, -0.6, 1.1, 0.8, 0.2, -0.9]));
    }

    #[test]
    fn matmul_values_are_correct() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.leaf(&Tensor::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn structure_ops_round_trip_values_and_gradients() {
        let x = Tensor::from_vec(2, 4, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        check_op(|t, v| t.slice_cols(v, 1, 3), x.clone());
        check_op(|t, v| t.slice_rows(v, 1, 2), x.clone());
        check_op(|t, v| t.reshape(v, 4, 2), x.clone());
        check_op(|t, v| t.tile_rows(v, 3), x.clone());
        check_op(
            |t, v| {
                let a = t.slice_cols(v, 0, 2);
                let b = t.slice_cols(v, 2, 4);
                t.concat_cols(&[b, a])
            },
            x.clone(),
        );
        check_op(
            |t, v| {
                let a = t.row(v, 0);
                let b = t.row(v, 1);
                t.concat_rows(&[b, a, b])
            },
            x,
        );
    }

    #[test]
    fn segment_weighted_sum_matches_manual_loop() {
        let mut tape = Tape::new();
        // 2 segments of 3 rows, width 2
        let h = Tensor::from_vec(
            6,
            2,
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0],
        );
        let w = Tensor::from_vec(2, 3, vec![0.5, 0.0, 2.0, 1.0, 1.0, 0.0]);
        let hv = tape.leaf(&h);
        let wv = tape.leaf(&w);
        let out = tape.segment_weighted_sum(hv, wv);
        // segment 0: 0.5*[1,2] + 0*[3,4] + 2*[5,6] = [10.5, 13]
        // segment 1: 1*[7,8] + 1*[9,10] + 0*[11,12] = [16, 18]
        assert_eq!(tape.value(out), &[10.5, 13.0, 16.0, 18.0]);

        // gradient check through both inputs
        let build = |t: &mut Tape, x: Var| {
            let w = Tensor::from_vec(2, 3, vec![0.5, -0.3, 2.0, 1.0, 1.0, -0.7]);
            let wv = t.leaf(&w);
            t.segment_weighted_sum(x, wv)
        };
        check_op(build, h);
        let h_fixed = Tensor::from_vec(
            6,
            2,
            vec![1.0, -2.0, 3.0, 4.0, -5.0, 6.0, 7.0, 8.0, 9.0, -10.0, 11.0, 12.0],
        );
        let build_w = |t: &mut Tape, x: Var| {
            let hv = t.leaf(&h_fixed);
            t.segment_weighted_sum(hv, x)
        };
        check_op(build_w, Tensor::from_vec(2, 3, vec![0.5, -0.3, 2.0, 1.0, 1.0, -0.7]));
    }

    #[test]
    fn affine_mask_detaches_masked_entries() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(1, 3, vec![2.0, 3.0, 4.0]));
        let y = tape.affine_mask(x, vec![1.0, 0.0, 1.0], vec![0.0, 9.0, 0.0]);
        assert_eq!(tape.value(y), &[2.0, 9.0, 4.0]);
        let l = tape.sum_all(y);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.of(x), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn reused_nodes_accumulate_gradient() {
        // f(x) = sum(x * x): gradient 2x through the doubly-used node
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(1, 3, vec![1.0, -2.0, 3.0]));
        let y = tape.mul(x, x);
        let l = tape.sum_all(y);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.of(x), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn non_finite_values_poison_the_tape() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(1, 2, vec![800.0, 1.0]));
        let y = tape.exp(x); // overflows to +inf
        let l = tape.sum_all(y);
        assert_eq!(tape.poisoned(), Some("exp"));
        let err = tape.backward(l).unwrap_err();
        assert_eq!(err, NeuralError::NonFinite { op: "exp" });
    }

    #[test]
    fn cumsum_is_a_prefix_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(3, 2, vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0]));
        let y = tape.cumsum_rows(x);
        assert_eq!(tape.value(y), &[1.0, 10.0, 3.0, 30.0, 6.0, 60.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn sigmoid_and_tanh_stay_in_range(xs in prop::collection::vec(-50.0..50.0f64, 1..20)) {
            let mut tape = Tape::new();
            let n = xs.len();
            let x = tape.leaf_from(1, n, xs);
            let s = tape.sigmoid(x);
            let t = tape.tanh(x);
            prop_assert!(tape.value(s).iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!(tape.value(t).iter().all(|&v| (-1.0..=1.0).contains(&v)));
            prop_assert!(tape.poisoned().is_none());
        }

        #[test]
        fn softplus_is_positive_and_monotone(xs in prop::collection::vec(-30.0..30.0f64, 2..20)) {
            let mut sorted = xs.clone();
            sorted.sort_by(f64::total_cmp);
            let mut tape = Tape::new();
            let n = sorted.len();
            let x = tape.leaf_from(1, n, sorted);
            let y = tape.softplus(x);
            let v = tape.value(y);
            prop_assert!(v.iter().all(|&u| u > 0.0));
            prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
