//! Recorded-graph reverse-mode differentiation for the fixed op set the
//! model needs: products, elementwise tanh, addition, dropout, batch
//! normalization, column concatenation, and reshape.
//!
//! Each forward call appends an op record; [`Tape::backward`] walks the
//! records in reverse and accumulates gradients per node. There is no
//! general autodiff here on purpose.

use rand::Rng;
use rand::RngCore;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar};

/// Handle to a node (value) on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Position in the gradient vector returned by [`Tape::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which axes batch-normalization statistics are reduced over.
///
/// `Entry` treats every (node, feature) entry as a channel and reduces over
/// the batch; `Feature` reduces each feature column over batch and nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormAxes {
    Entry,
    Feature,
}

impl NormAxes {
    /// Shape of the statistic/affine buffers for an input of shape `(rows, cols)`.
    pub fn stat_dims(self, rows: usize, cols: usize) -> (usize, usize) {
        match self {
            NormAxes::Entry => (rows, cols),
            NormAxes::Feature => (1, cols),
        }
    }
}

/// Batch statistics produced by a train-mode normalization, used by the
/// caller to update running buffers.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Matrix<T>,
    pub var: Matrix<T>,
}

enum Op<T> {
    MatMul { a: Var, b: Var, out: Var },
    /// out = a^T * b (used by node resampling).
    MatMulTA { a: Var, b: Var, out: Var },
    Add { a: Var, b: Var, out: Var },
    Tanh { x: Var, out: Var },
    Dropout { x: Var, mask: Matrix<T>, out: Var },
    Reshape { x: Var, out: Var },
    ConcatCols { a: Var, b: Var, out: Var },
    BatchNorm {
        xs: Vec<Var>,
        gamma: Var,
        beta: Var,
        outs: Vec<Var>,
        xhat: Vec<Matrix<T>>,
        inv_std: Matrix<T>,
        axes: NormAxes,
    },
    /// Eval-mode normalization folded to y = x*scale + shift; only the input
    /// receives gradient, which is all eval mode ever needs.
    ScaleShift { x: Var, scale: Matrix<T>, out: Var },
}

/// Wengert list: node values plus the op records that produced them.
pub struct Tape<T> {
    values: Vec<Matrix<T>>,
    ops: Vec<Op<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Registers an input node (parameter or constant).
    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        value.debug_assert_finite("tape leaf");
        self.values.push(value);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.values[v.0]
    }

    fn push(&mut self, value: Matrix<T>, context: &str) -> Var {
        value.debug_assert_finite(context);
        self.values.push(value);
        Var(self.values.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.values[a.0].matmul(&self.values[b.0])?;
        let out = self.push(out, "matmul");
        self.ops.push(Op::MatMul { a, b, out });
        Ok(out)
    }

    /// out = a^T * b without materializing the transpose.
    pub fn matmul_ta(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.values[a.0].matmul_tn(&self.values[b.0])?;
        let out = self.push(out, "matmul_ta");
        self.ops.push(Op::MatMulTA { a, b, out });
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.values[a.0].add(&self.values[b.0])?;
        let out = self.push(out, "add");
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.values[x.0].tanh_map();
        let out = self.push(out, "tanh");
        self.ops.push(Op::Tanh { x, out });
        out
    }

    /// Inverted dropout: kept entries are scaled by 1/(1-rate) so the
    /// expected value matches the dropout-free output. `rate == 0` is the
    /// identity and records nothing.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut dyn RngCore) -> Result<Var> {
        if rate == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
        }
        let keep_scale = T::from_f64(1.0 / (1.0 - rate));
        let (r, c) = self.values[x.0].dims();
        let mask = Matrix::from_fn(r, c, |_, _| {
            if rng.gen::<f64>() < rate {
                T::zero()
            } else {
                keep_scale
            }
        });
        let out = self.values[x.0].hadamard(&mask)?;
        let out = self.push(out, "dropout");
        self.ops.push(Op::Dropout { x, mask, out });
        Ok(out)
    }

    /// Row-major reinterpretation to `rows x cols`.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.values[x.0].reshaped(rows, cols)?;
        let out = self.push(out, "reshape");
        self.ops.push(Op::Reshape { x, out });
        Ok(out)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.values[a.0].dims();
        let (rb, cb) = self.values[b.0].dims();
        if ra != rb {
            return Err(Error::shape("concat_cols", (ra, ca), (rb, cb)));
        }
        let mut out = Matrix::zeros(ra, ca + cb);
        for i in 0..ra {
            for j in 0..ca {
                out.set(i, j, self.values[a.0].get(i, j));
            }
            for j in 0..cb {
                out.set(i, ca + j, self.values[b.0].get(i, j));
            }
        }
        let out = self.push(out, "concat_cols");
        self.ops.push(Op::ConcatCols { a, b, out });
        Ok(out)
    }

    /// Train-mode batch normalization over a batch of same-shaped inputs.
    ///
    /// Statistics use the biased variance. Returns the normalized outputs and
    /// the batch statistics for the caller's running-buffer update.
    pub fn batch_norm(
        &mut self,
        xs: &[Var],
        gamma: Var,
        beta: Var,
        axes: NormAxes,
        eps: f64,
    ) -> Result<(Vec<Var>, BatchStats<T>)> {
        if xs.is_empty() {
            return Err(Error::Config("batch_norm on empty batch".into()));
        }
        let (rows, cols) = self.values[xs[0].0].dims();
        for &x in xs {
            if self.values[x.0].dims() != (rows, cols) {
                return Err(Error::shape("batch_norm", (rows, cols), self.values[x.0].dims()));
            }
        }
        let (sr, sc) = axes.stat_dims(rows, cols);
        if self.values[gamma.0].dims() != (sr, sc) {
            return Err(Error::shape("batch_norm gamma", (sr, sc), self.values[gamma.0].dims()));
        }
        if self.values[beta.0].dims() != (sr, sc) {
            return Err(Error::shape("batch_norm beta", (sr, sc), self.values[beta.0].dims()));
        }

        let count = match axes {
            NormAxes::Entry => xs.len(),
            NormAxes::Feature => xs.len() * rows,
        };
        let inv_count = T::from_f64(1.0 / count as f64);
        let stat_index = move |r: usize, c: usize| match axes {
            NormAxes::Entry => r * cols + c,
            NormAxes::Feature => c,
        };

        let mut mean = Matrix::zeros(sr, sc);
        for &x in xs {
            let v = &self.values[x.0];
            for r in 0..rows {
                for c in 0..cols {
                    mean.data_mut()[stat_index(r, c)] += v.get(r, c);
                }
            }
        }
        for m in mean.data_mut() {
            *m *= inv_count;
        }

        let mut var = Matrix::zeros(sr, sc);
        for &x in xs {
            let v = &self.values[x.0];
            for r in 0..rows {
                for c in 0..cols {
                    let d = v.get(r, c) - mean.data()[stat_index(r, c)];
                    var.data_mut()[stat_index(r, c)] += d * d;
                }
            }
        }
        for v in var.data_mut() {
            *v *= inv_count;
        }

        let eps_t = T::from_f64(eps);
        let inv_std = var.map(|v: T| T::one() / (v + eps_t).sqrt());

        let mut outs = Vec::with_capacity(xs.len());
        let mut xhats = Vec::with_capacity(xs.len());
        for &x in xs {
            let v = self.values[x.0].clone();
            let mut xhat = Matrix::zeros(rows, cols);
            let mut y = Matrix::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    let si = stat_index(r, c);
                    let h = (v.get(r, c) - mean.data()[si]) * inv_std.data()[si];
                    xhat.set(r, c, h);
                    y.set(
                        r,
                        c,
                        self.values[gamma.0].data()[si] * h + self.values[beta.0].data()[si],
                    );
                }
            }
            xhats.push(xhat);
            outs.push(self.push(y, "batch_norm"));
        }

        self.ops.push(Op::BatchNorm {
            xs: xs.to_vec(),
            gamma,
            beta,
            outs: outs.clone(),
            xhat: xhats,
            inv_std: inv_std.clone(),
            axes,
        });
        Ok((outs, BatchStats { mean, var }))
    }

    /// Eval-mode normalization with frozen statistics:
    /// y = gamma*(x - mean)/sqrt(var + eps) + beta, folded into scale/shift.
    pub fn norm_eval(
        &mut self,
        x: Var,
        gamma: &Matrix<T>,
        beta: &Matrix<T>,
        running_mean: &Matrix<T>,
        running_var: &Matrix<T>,
        axes: NormAxes,
        eps: f64,
    ) -> Result<Var> {
        let (rows, cols) = self.values[x.0].dims();
        let (sr, sc) = axes.stat_dims(rows, cols);
        if gamma.dims() != (sr, sc) || running_mean.dims() != (sr, sc) {
            return Err(Error::shape("norm_eval", (sr, sc), gamma.dims()));
        }
        let eps_t = T::from_f64(eps);
        let stat_index = move |r: usize, c: usize| match axes {
            NormAxes::Entry => r * cols + c,
            NormAxes::Feature => c,
        };
        // Broadcast scale/shift to the input shape.
        let mut scale = Matrix::zeros(rows, cols);
        let mut y = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let si = stat_index(r, c);
                let s = gamma.data()[si] / (running_var.data()[si] + eps_t).sqrt();
                scale.set(r, c, s);
                let v = self.values[x.0].get(r, c);
                y.set(r, c, s * (v - running_mean.data()[si]) + beta.data()[si]);
            }
        }
        let out = self.push(y, "norm_eval");
        self.ops.push(Op::ScaleShift { x, scale, out });
        Ok(out)
    }

    /// Reverse pass. Seeds are (node, upstream gradient) pairs; returns one
    /// gradient slot per node, `None` where no gradient flowed.
    pub fn backward(&self, seeds: Vec<(Var, Matrix<T>)>) -> Result<Vec<Option<Matrix<T>>>> {
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.values.len()];
        for (var, seed) in seeds {
            if seed.dims() != self.values[var.0].dims() {
                return Err(Error::shape("backward seed", self.values[var.0].dims(), seed.dims()));
            }
            accumulate(&mut grads, var, seed)?;
        }

        for op in self.ops.iter().rev() {
            match op {
                Op::MatMul { a, b, out } => {
                    let Some(g) = grads[out.0].as_ref() else { continue };
                    let da = g.matmul_nt(&self.values[b.0])?;
                    let db = self.values[a.0].matmul_tn(g)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::MatMulTA { a, b, out } => {
                    let Some(g) = grads[out.0].as_ref() else { continue };
                    let da = self.values[b.0].matmul_nt(g)?;
                    let db = self.values[a.0].matmul(g)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Add { a, b, out } => {
                    let Some(g) = grads[out.0].as_ref() else { continue };
                    let g = g.clone();
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Tanh { x, out } => {
                    let Some(g) = grads[out.0].as_ref() else { continue };
                    let y = &self.values[out.0];
                    let one = T::one();
                    let dx = g.zip_map(y, |gv, yv| gv * (one - yv * yv))?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Dropout { x, mask, out } => {
                    let Some(g) = grads[out.0].as_ref() else { continue };
                    let dx = g.hadamard(mask)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Reshape { x, out } => {
                    let Some(g) = grads[out.0].as_ref() else { continue };
                    let (r, c) = self.values[x.0].dims();
                    let dx = g.reshaped(r, c)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::ConcatCols { a, b, out } => {
                    let Some(g) = grads[out.0].as_ref() else { continue };
                    let (ra, ca) = self.values[a.0].dims();
                    let cb = self.values[b.0].cols();
                    let mut da = Matrix::zeros(ra, ca);
                    let mut db = Matrix::zeros(ra, cb);
                    for i in 0..ra {
                        for j in 0..ca {
                            da.set(i, j, g.get(i, j));
                        }
                        for j in 0..cb {
                            db.set(i, j, g.get(i, ca + j));
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::ScaleShift { x, scale, out } => {
                    let Some(g) = grads[out.0].as_ref() else { continue };
                    let dx = g.hadamard(scale)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::BatchNorm {
                    xs,
                    gamma,
                    beta,
                    outs,
                    xhat,
                    inv_std,
                    axes,
                } => {
                    self.batch_norm_backward(
                        &mut grads, xs, *gamma, *beta, outs, xhat, inv_std, *axes,
                    )?;
                }
            }
        }
        Ok(grads)
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_backward(
        &self,
        grads: &mut Vec<Option<Matrix<T>>>,
        xs: &[Var],
        gamma: Var,
        beta: Var,
        outs: &[Var],
        xhat: &[Matrix<T>],
        inv_std: &Matrix<T>,
        axes: NormAxes,
    ) -> Result<()> {
        if outs.iter().all(|o| grads[o.0].is_none()) {
            return Ok(());
        }
        let (rows, cols) = self.values[xs[0].0].dims();
        let (sr, sc) = axes.stat_dims(rows, cols);
        let count = match axes {
            NormAxes::Entry => xs.len(),
            NormAxes::Feature => xs.len() * rows,
        };
        let inv_count = T::from_f64(1.0 / count as f64);
        let stat_index = move |r: usize, c: usize| match axes {
            NormAxes::Entry => r * cols + c,
            NormAxes::Feature => c,
        };

        let out_grads: Vec<Matrix<T>> = outs
            .iter()
            .map(|o| {
                grads[o.0]
                    .clone()
                    .unwrap_or_else(|| Matrix::zeros(rows, cols))
            })
            .collect();
        let gamma_v = &self.values[gamma.0];

        // Group sums of dxhat and dxhat*xhat, where dxhat = dy*gamma.
        let mut sum_dxh = Matrix::<T>::zeros(sr, sc);
        let mut sum_dxh_xh = Matrix::<T>::zeros(sr, sc);
        let mut dgamma = Matrix::<T>::zeros(sr, sc);
        let mut dbeta = Matrix::<T>::zeros(sr, sc);
        for (n, g) in out_grads.iter().enumerate() {
            for r in 0..rows {
                for c in 0..cols {
                    let si = stat_index(r, c);
                    let dy = g.get(r, c);
                    let xh = xhat[n].get(r, c);
                    dbeta.data_mut()[si] += dy;
                    dgamma.data_mut()[si] += dy * xh;
                    let dxh = dy * gamma_v.data()[si];
                    sum_dxh.data_mut()[si] += dxh;
                    sum_dxh_xh.data_mut()[si] += dxh * xh;
                }
            }
        }

        for (n, g) in out_grads.iter().enumerate() {
            let mut dx = Matrix::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    let si = stat_index(r, c);
                    let dxh = g.get(r, c) * gamma_v.data()[si];
                    let centered = dxh
                        - sum_dxh.data()[si] * inv_count
                        - xhat[n].get(r, c) * sum_dxh_xh.data()[si] * inv_count;
                    dx.set(r, c, inv_std.data()[si] * centered);
                }
            }
            accumulate(grads, xs[n], dx)?;
        }
        accumulate(grads, gamma, dgamma)?;
        accumulate(grads, beta, dbeta)?;
        Ok(())
    }
}

fn accumulate<T: Scalar>(
    grads: &mut Vec<Option<Matrix<T>>>,
    var: Var,
    g: Matrix<T>,
) -> Result<()> {
    match &mut grads[var.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
