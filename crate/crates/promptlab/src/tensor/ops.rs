//! Forward constructors and the backward dispatch for every tape op.

use super::{add_into, Data, Node, Op, TensorError, Var, EPS_NORM};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<'t> Var<'t> {
    fn binary_same_shape(self, other: Var<'t>, name: &str) -> (Data, Data) {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape, b.shape, "{name}: shape {:?} vs {:?}", a.shape, b.shape);
        (a, b)
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = self.binary_same_shape(other, "add");
        let values = a.values.iter().zip(&b.values).map(|(x, y)| x + y).collect();
        self.tape.push(Op::Add(self.id, other.id), Data::new(a.shape, values))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = self.binary_same_shape(other, "sub");
        let values = a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect();
        self.tape.push(Op::Sub(self.id, other.id), Data::new(a.shape, values))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = self.binary_same_shape(other, "mul");
        let values = a.values.iter().zip(&b.values).map(|(x, y)| x * y).collect();
        self.tape.push(Op::Mul(self.id, other.id), Data::new(a.shape, values))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let a = self.value();
        let values = a.values.iter().map(|x| x * c).collect();
        self.tape.push(Op::Scale(self.id, c), Data::new(a.shape, values))
    }

    /// `[r, c] + [c]`, the bias-row broadcast.
    pub fn add_row_vec(self, row: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = row.value();
        assert_eq!(a.shape.len(), 2, "add_row_vec lhs must be rank-2");
        assert_eq!(b.shape, vec![a.cols()], "add_row_vec rhs must match columns");
        let c = a.cols();
        let values = a
            .values
            .iter()
            .enumerate()
            .map(|(i, x)| x + b.values[i % c])
            .collect();
        self.tape.push(Op::AddRowVec(self.id, row.id), Data::new(a.shape, values))
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape.len(), 2, "matmul lhs must be rank-2");
        assert_eq!(b.shape.len(), 2, "matmul rhs must be rank-2");
        assert_eq!(a.cols(), b.rows(), "matmul inner dims differ");
        let out = matmul_data(&a, &b);
        self.tape.push(Op::Matmul(self.id, other.id), out)
    }

    pub fn transpose(self) -> Var<'t> {
        let a = self.value();
        self.tape.push(Op::Transpose(self.id), transpose_data(&a))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Var<'t> {
        let a = self.value();
        assert_eq!(
            shape.iter().product::<usize>(),
            a.len(),
            "reshape to {:?} changes element count",
            shape
        );
        self.tape.push(Op::Reshape(self.id), Data::new(shape, a.values))
    }

    /// Row-wise `softmax(x / temp)`. Shift-invariant by max subtraction.
    pub fn softmax_rows(self, temp: f64) -> Result<Var<'t>, TensorError> {
        if temp <= 0.0 {
            return Err(TensorError::InvalidParameter(format!(
                "softmax temperature must be positive, got {temp}"
            )));
        }
        let a = self.value();
        let (rows, cols) = rows_cols(&a);
        assert!(cols >= 1, "softmax needs a nonempty last axis");
        let mut values = vec![0.0; a.len()];
        for r in 0..rows {
            let row = &a.values[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|x| ((x - m) / temp).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (c, e) in exps.iter().enumerate() {
                values[r * cols + c] = e / sum;
            }
        }
        Ok(self
            .tape
            .push(Op::SoftmaxRows { input: self.id, temp }, Data::new(a.shape, values)))
    }

    pub fn log(self) -> Var<'t> {
        let a = self.value();
        let values = a.values.iter().map(|x| x.ln()).collect();
        self.tape.push(Op::Log(self.id), Data::new(a.shape, values))
    }

    pub fn exp(self) -> Var<'t> {
        let a = self.value();
        let values = a.values.iter().map(|x| x.exp()).collect();
        self.tape.push(Op::Exp(self.id), Data::new(a.shape, values))
    }

    pub fn tanh(self) -> Var<'t> {
        let a = self.value();
        let values = a.values.iter().map(|x| x.tanh()).collect();
        self.tape.push(Op::Tanh(self.id), Data::new(a.shape, values))
    }

    pub fn sqrt(self) -> Var<'t> {
        let a = self.value();
        let values = a.values.iter().map(|x| x.sqrt()).collect();
        self.tape.push(Op::Sqrt(self.id), Data::new(a.shape, values))
    }

    pub fn abs(self) -> Var<'t> {
        let a = self.value();
        let values = a.values.iter().map(|x| x.abs()).collect();
        self.tape.push(Op::Abs(self.id), Data::new(a.shape, values))
    }

    /// tanh-approximation GELU.
    pub fn gelu(self) -> Var<'t> {
        let a = self.value();
        let values = a.values.iter().map(|&x| gelu_fwd(x)).collect();
        self.tape.push(Op::Gelu(self.id), Data::new(a.shape, values))
    }

    /// Elementwise `max(x, floor)`; gradient passes where `x >= floor`.
    pub fn clamp_min(self, floor: f64) -> Var<'t> {
        let a = self.value();
        let values = a.values.iter().map(|x| x.max(floor)).collect();
        self.tape.push(Op::ClampMin(self.id, floor), Data::new(a.shape, values))
    }

    pub fn sum_all(self) -> Var<'t> {
        let a = self.value();
        self.tape.push(Op::SumAll(self.id), Data::scalar(a.values.iter().sum()))
    }

    pub fn mean_all(self) -> Var<'t> {
        let a = self.value();
        let n = a.len() as f64;
        self.tape
            .push(Op::MeanAll(self.id), Data::scalar(a.values.iter().sum::<f64>() / n))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Var<'t> {
        let a = self.value();
        let c = a.cols();
        assert!(start + len <= a.rows(), "slice_rows out of range");
        let values = a.values[start * c..(start + len) * c].to_vec();
        self.tape
            .push(Op::SliceRows { input: self.id, start, len }, Data::matrix(len, c, values))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Var<'t> {
        let a = self.value();
        let (rows, cols) = (a.rows(), a.cols());
        assert!(start + len <= cols, "slice_cols out of range");
        let mut values = Vec::with_capacity(rows * len);
        for r in 0..rows {
            values.extend_from_slice(&a.values[r * cols + start..r * cols + start + len]);
        }
        self.tape
            .push(Op::SliceCols { input: self.id, start, len }, Data::matrix(rows, len, values))
    }

    /// Interpret a rank-1 vector as a single-row matrix.
    pub fn as_row(self) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.shape.len(), 1, "as_row needs a rank-1 tensor");
        let n = a.len();
        self.reshape(vec![1, n])
    }

    /// Row `r` of a rank-2 tensor, as a rank-1 vector.
    pub fn row(self, r: usize) -> Var<'t> {
        let c = self.value().cols();
        self.slice_rows(r, 1).reshape(vec![c])
    }

    /// Layer norm over each row, with per-column gain and bias.
    pub fn layer_norm_rows(self, gain: Var<'t>, bias: Var<'t>) -> Var<'t> {
        let a = self.value();
        let g = gain.value();
        let b = bias.value();
        let (rows, cols) = (a.rows(), a.cols());
        assert_eq!(g.shape, vec![cols], "layer_norm gain shape");
        assert_eq!(b.shape, vec![cols], "layer_norm bias shape");
        let mut values = vec![0.0; a.len()];
        for r in 0..rows {
            let row = &a.values[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let inv_std = 1.0 / (var + EPS_NORM).sqrt();
            for c in 0..cols {
                let xhat = (row[c] - mean) * inv_std;
                values[r * cols + c] = xhat * g.values[c] + b.values[c];
            }
        }
        self.tape.push(
            Op::LayerNormRows { input: self.id, gain: gain.id, bias: bias.id },
            Data::new(a.shape, values),
        )
    }

    /// Cosine similarity of two rank-1 vectors.
    pub fn cos_sim(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (a, b) = self.binary_same_shape(other, "cos_sim");
        assert_eq!(a.shape.len(), 1, "cos_sim needs rank-1 vectors");
        let na = a.norm();
        let nb = b.norm();
        if na <= EPS_NORM {
            return Err(TensorError::DegenerateVector(na));
        }
        if nb <= EPS_NORM {
            return Err(TensorError::DegenerateVector(nb));
        }
        let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
        let s = dot / (na * nb + EPS_NORM);
        Ok(self.tape.push(Op::CosSim(self.id, other.id), Data::scalar(s)))
    }

    /// Cosine similarity of a rank-1 vector against every row of a matrix.
    pub fn cos_sim_rows(self, mat: Var<'t>) -> Result<Var<'t>, TensorError> {
        let z = self.value();
        let v = mat.value();
        assert_eq!(z.shape.len(), 1, "cos_sim_rows lhs must be rank-1");
        assert_eq!(v.cols(), z.len(), "cos_sim_rows dims differ");
        let nz = z.norm();
        if nz <= EPS_NORM {
            return Err(TensorError::DegenerateVector(nz));
        }
        let mut sims = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            let row = v.row(r);
            let nr = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nr <= EPS_NORM {
                return Err(TensorError::DegenerateVector(nr));
            }
            let dot: f64 = z.values.iter().zip(row).map(|(x, y)| x * y).sum();
            sims.push(dot / (nz * nr + EPS_NORM));
        }
        Ok(self.tape.push(Op::CosSimRows(self.id, mat.id), Data::vector(sims)))
    }

    /// Select rows of a matrix by index (embedding lookup).
    pub fn gather_rows(self, ids: &[usize]) -> Var<'t> {
        let a = self.value();
        let c = a.cols();
        let mut values = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            assert!(i < a.rows(), "gather_rows index {i} out of range");
            values.extend_from_slice(a.row(i));
        }
        self.tape.push(
            Op::GatherRows { input: self.id, ids: ids.to_vec() },
            Data::matrix(ids.len(), c, values),
        )
    }
}

/// Vertical concatenation of matrices with equal column counts.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat_rows needs at least one part");
    let tape = parts[0].tape;
    let datas: Vec<Data> = parts.iter().map(|p| p.value()).collect();
    let cols = datas[0].cols();
    let mut values = Vec::new();
    let mut rows = 0;
    for d in &datas {
        assert_eq!(d.cols(), cols, "concat_rows column mismatch");
        rows += d.rows();
        values.extend_from_slice(&d.values);
    }
    tape.push(
        Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
        Data::matrix(rows, cols, values),
    )
}

fn rows_cols(d: &Data) -> (usize, usize) {
    match d.shape.len() {
        0 => (1, 1),
        1 => (1, d.shape[0]),
        _ => {
            let cols = *d.shape.last().unwrap();
            (d.len() / cols, cols)
        }
    }
}

pub(crate) fn matmul_data(a: &Data, b: &Data) -> Data {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.values[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.values[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Data::matrix(m, n, out)
}

pub(crate) fn transpose_data(a: &Data) -> Data {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.values[i * n + j];
        }
    }
    Data::matrix(n, m, out)
}

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Propagate `out_grad` of node `id` into its inputs' gradient slots.
pub(crate) fn accumulate(nodes: &[Node], id: usize, out_grad: &Data, grads: &mut [Option<Data>]) {
    let val = |i: usize| -> &Data { &nodes[i].value };
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            add_into(&mut grads[*a], &val(*a).shape, &out_grad.values);
            add_into(&mut grads[*b], &val(*b).shape, &out_grad.values);
        }
        Op::Sub(a, b) => {
            add_into(&mut grads[*a], &val(*a).shape, &out_grad.values);
            let neg: Vec<f64> = out_grad.values.iter().map(|g| -g).collect();
            add_into(&mut grads[*b], &val(*b).shape, &neg);
        }
        Op::Mul(a, b) => {
            let ga: Vec<f64> =
                out_grad.values.iter().zip(&val(*b).values).map(|(g, y)| g * y).collect();
            let gb: Vec<f64> =
                out_grad.values.iter().zip(&val(*a).values).map(|(g, x)| g * x).collect();
            add_into(&mut grads[*a], &val(*a).shape, &ga);
            add_into(&mut grads[*b], &val(*b).shape, &gb);
        }
        Op::Scale(a, c) => {
            let g: Vec<f64> = out_grad.values.iter().map(|g| g * c).collect();
            add_into(&mut grads[*a], &val(*a).shape, &g);
        }
        Op::AddRowVec(a, b) => {
            add_into(&mut grads[*a], &val(*a).shape, &out_grad.values);
            let c = val(*b).len();
            let mut gb = vec![0.0; c];
            for (i, g) in out_grad.values.iter().enumerate() {
                gb[i % c] += g;
            }
            add_into(&mut grads[*b], &val(*b).shape, &gb);
        }
        Op::Matmul(a, b) => {
            let ga = matmul_data(out_grad, &transpose_data(val(*b)));
            let gb = matmul_data(&transpose_data(val(*a)), out_grad);
            add_into(&mut grads[*a], &val(*a).shape, &ga.values);
            add_into(&mut grads[*b], &val(*b).shape, &gb.values);
        }
        Op::Transpose(a) => {
            let g = transpose_data(out_grad);
            add_into(&mut grads[*a], &val(*a).shape, &g.values);
        }
        Op::Reshape(a) => {
            add_into(&mut grads[*a], &val(*a).shape, &out_grad.values);
        }
        Op::SoftmaxRows { input, temp } => {
            let y = &nodes[id].value;
            let (rows, cols) = rows_cols(y);
            let mut g = vec![0.0; y.len()];
            for r in 0..rows {
                let yr = &y.values[r * cols..(r + 1) * cols];
                let gr = &out_grad.values[r * cols..(r + 1) * cols];
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for c in 0..cols {
                    g[r * cols + c] = yr[c] * (gr[c] - dot) / temp;
                }
            }
            add_into(&mut grads[*input], &val(*input).shape, &g);
        }
        Op::Log(a) => {
            let g: Vec<f64> =
                out_grad.values.iter().zip(&val(*a).values).map(|(g, x)| g / x).collect();
            add_into(&mut grads[*a], &val(*a).shape, &g);
        }
        Op::Exp(a) => {
            let g: Vec<f64> =
                out_grad.values.iter().zip(&nodes[id].value.values).map(|(g, y)| g * y).collect();
            add_into(&mut grads[*a], &val(*a).shape, &g);
        }
        Op::Tanh(a) => {
            let g: Vec<f64> = out_grad
                .values
                .iter()
                .zip(&nodes[id].value.values)
                .map(|(g, y)| g * (1.0 - y * y))
                .collect();
            add_into(&mut grads[*a], &val(*a).shape, &g);
        }
        Op::Sqrt(a) => {
            let g: Vec<f64> = out_grad
                .values
                .iter()
                .zip(&nodes[id].value.values)
                .map(|(g, y)| g / (2.0 * y))
                .collect();
            add_into(&mut grads[*a], &val(*a).shape, &g);
        }
        Op::Abs(a) => {
            let g: Vec<f64> = out_grad
                .values
                .iter()
                .zip(&val(*a).values)
                .map(|(g, x)| g * x.signum() * (*x != 0.0) as u8 as f64)
                .collect();
            add_into(&mut grads[*a], &val(*a).shape, &g);
        }
        Op::Gelu(a) => {
            let g: Vec<f64> = out_grad
                .values
                .iter()
                .zip(&val(*a).values)
                .map(|(g, x)| g * gelu_bwd(*x))
                .collect();
            add_into(&mut grads[*a], &val(*a).shape, &g);
        }
        Op::ClampMin(a, floor) => {
            let g: Vec<f64> = out_grad
                .values
                .iter()
                .zip(&val(*a).values)
                .map(|(g, x)| if x >= floor { *g } else { 0.0 })
                .collect();
            add_into(&mut grads[*a], &val(*a).shape, &g);
        }
        Op::SumAll(a) => {
            let g = vec![out_grad.values[0]; val(*a).len()];
            add_into(&mut grads[*a], &val(*a).shape, &g);
        }
        Op::MeanAll(a) => {
            let n = val(*a).len() as f64;
            let g = vec![out_grad.values[0] / n; val(*a).len()];
            add_into(&mut grads[*a], &val(*a).shape, &g);
        }
        Op::ConcatRows(parts) => {
            let cols = nodes[id].value.cols();
            let mut offset = 0;
            for &p in parts {
                let pr = val(p).rows();
                let g = &out_grad.values[offset * cols..(offset + pr) * cols];
                add_into(&mut grads[p], &val(p).shape, g);
                offset += pr;
            }
        }
        Op::SliceRows { input, start, len } => {
            let src = val(*input);
            let cols = src.cols();
            let mut g = vec![0.0; src.len()];
            g[start * cols..(start + len) * cols].copy_from_slice(&out_grad.values);
            add_into(&mut grads[*input], &src.shape, &g);
        }
        Op::SliceCols { input, start, len } => {
            let src = val(*input);
            let (rows, cols) = (src.rows(), src.cols());
            let mut g = vec![0.0; src.len()];
            for r in 0..rows {
                for c in 0..*len {
                    g[r * cols + start + c] = out_grad.values[r * len + c];
                }
            }
            add_into(&mut grads[*input], &src.shape, &g);
        }
        Op::LayerNormRows { input, gain, bias } => {
            let x = val(*input);
            let gn = val(*gain);
            let (rows, cols) = (x.rows(), x.cols());
            let mut gx = vec![0.0; x.len()];
            let mut gg = vec![0.0; cols];
            let mut gb = vec![0.0; cols];
            for r in 0..rows {
                let row = &x.values[r * cols..(r + 1) * cols];
                let gr = &out_grad.values[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var =
                    row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let inv_std = 1.0 / (var + EPS_NORM).sqrt();
                let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                // dL/dxhat = grad * gain
                let gxh: Vec<f64> =
                    gr.iter().zip(&gn.values).map(|(g, w)| g * w).collect();
                let mean_gxh = gxh.iter().sum::<f64>() / cols as f64;
                let mean_gxh_xhat =
                    gxh.iter().zip(&xhat).map(|(g, h)| g * h).sum::<f64>() / cols as f64;
                for c in 0..cols {
                    gx[r * cols + c] =
                        inv_std * (gxh[c] - mean_gxh - xhat[c] * mean_gxh_xhat);
                    gg[c] += gr[c] * xhat[c];
                    gb[c] += gr[c];
                }
            }
            add_into(&mut grads[*input], &x.shape, &gx);
            add_into(&mut grads[*gain], &gn.shape, &gg);
            add_into(&mut grads[*bias], &val(*bias).shape, &gb);
        }
        Op::CosSim(a, b) => {
            let av = val(*a);
            let bv = val(*b);
            let na = av.norm();
            let nb = bv.norm();
            let denom = na * nb + EPS_NORM;
            let s = nodes[id].value.values[0];
            let g = out_grad.values[0];
            let ga: Vec<f64> = av
                .values
                .iter()
                .zip(&bv.values)
                .map(|(x, y)| g * (y / denom - s * nb * x / (na * denom)))
                .collect();
            let gb: Vec<f64> = av
                .values
                .iter()
                .zip(&bv.values)
                .map(|(x, y)| g * (x / denom - s * na * y / (nb * denom)))
                .collect();
            add_into(&mut grads[*a], &av.shape, &ga);
            add_into(&mut grads[*b], &bv.shape, &gb);
        }
        Op::CosSimRows(z, v) => {
            let zv = val(*z);
            let vv = val(*v);
            let nz = zv.norm();
            let d = zv.len();
            let mut gz = vec![0.0; d];
            let mut gv = vec![0.0; vv.len()];
            for r in 0..vv.rows() {
                let row = vv.row(r);
                let nr = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                let denom = nz * nr + EPS_NORM;
                let s = nodes[id].value.values[r];
                let g = out_grad.values[r];
                for c in 0..d {
                    gz[c] += g * (row[c] / denom - s * nr * zv.values[c] / (nz * denom));
                    gv[r * d + c] +=
                        g * (zv.values[c] / denom - s * nz * row[c] / (nr * denom));
                }
            }
            add_into(&mut grads[*z], &zv.shape, &gz);
            add_into(&mut grads[*v], &vv.shape, &gv);
        }
        Op::GatherRows { input, ids } => {
            let src = val(*input);
            let cols = src.cols();
            let mut g = vec![0.0; src.len()];
            for (k, &i) in ids.iter().enumerate() {
                for c in 0..cols {
                    g[i * cols + c] += out_grad.values[k * cols + c];
                }
            }
            add_into(&mut grads[*input], &src.shape, &g);
        }
    }
}
