//! Layer vocabulary: graph convolutional layer (graph conv, normalization,
//! tanh, dropout), residual blocks, node/feature resampling, and the
//! fully-connected ablation layer.
//!
//! Layers are pure functions of (inputs, parameters, rng, mode). Parameters
//! reach a layer as tape leaves bundled in small wire structs; the model
//! module owns the registry those leaves are bound from. All forwards are
//! batched: one `Var` per sample, same shape across the batch, because
//! train-mode normalization couples the batch.

use rand::Rng;
use rand::RngCore;

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Matrix, NormAxes, Scalar, Tape, Var};

/// Dropout rate used throughout the architecture.
pub const DEFAULT_DROPOUT: f64 = 0.1;
/// Normalization epsilon.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Normalization behaviour. `Passthrough` (identity) exists for gradient
/// checks; the statistic axes are a configuration switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Entry,
    Feature,
    Passthrough,
}

impl NormKind {
    pub fn axes(self) -> Option<NormAxes> {
        match self {
            NormKind::Entry => Some(NormAxes::Entry),
            NormKind::Feature => Some(NormAxes::Feature),
            NormKind::Passthrough => None,
        }
    }
}

/// Per-forward knobs shared by every layer in a pass.
#[derive(Debug, Clone, Copy)]
pub struct LayerSettings {
    pub mode: Mode,
    pub norm: NormKind,
    pub dropout: f64,
    pub eps: f64,
}

impl LayerSettings {
    pub fn train(norm: NormKind, dropout: f64) -> Self {
        LayerSettings {
            mode: Mode::Train,
            norm,
            dropout,
            eps: NORM_EPS,
        }
    }

    pub fn eval(norm: NormKind) -> Self {
        LayerSettings {
            mode: Mode::Eval,
            norm,
            dropout: DEFAULT_DROPOUT,
            eps: NORM_EPS,
        }
    }

    /// Gradcheck configuration: no dropout, identity normalization.
    pub fn passthrough() -> Self {
        LayerSettings {
            mode: Mode::Train,
            norm: NormKind::Passthrough,
            dropout: 0.0,
            eps: NORM_EPS,
        }
    }
}

/// Affine + running statistics of one normalization layer.
pub struct NormWire<'a, T> {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: &'a Matrix<T>,
    pub running_var: &'a Matrix<T>,
}

/// One graph convolutional layer: adjacency, weight, and its normalization.
pub struct GclWire<'a, T> {
    pub adjacency: Var,
    pub weight: Var,
    pub norm: NormWire<'a, T>,
}

/// One dense layer over the flattened node-feature vector (FCL ablation).
pub struct FclWire<'a, T> {
    /// (K*F_in) x (K*F_out).
    pub weight: Var,
    pub norm: NormWire<'a, T>,
}

pub enum LayerWire<'a, T> {
    Gcl(GclWire<'a, T>),
    Fcl(FclWire<'a, T>),
}

/// Two inner layers wrapped by an elementwise skip connection.
pub struct ResBlockWire<'a, T> {
    pub first: LayerWire<'a, T>,
    pub second: LayerWire<'a, T>,
}

pub struct LayerOut<T> {
    pub ys: Vec<Var>,
    /// Batch statistics when train-mode normalization ran, for the caller's
    /// running-buffer update.
    pub stats: Option<BatchStats<T>>,
}

pub struct ResBlockOut<T> {
    pub ys: Vec<Var>,
    /// Stats of the inner layers in order.
    pub stats: Vec<Option<BatchStats<T>>>,
}

/// Optional dropout stream, passed by `&mut` so nested calls can share it.
pub type MaybeRng<'a, 'r> = &'a mut Option<&'r mut dyn RngCore>;

/// Shared normalization/tanh/dropout tail of both layer kinds.
fn norm_tanh_dropout<T: Scalar>(
    tape: &mut Tape<T>,
    hs: Vec<Var>,
    norm: &NormWire<T>,
    s: LayerSettings,
    rng: MaybeRng,
) -> Result<LayerOut<T>> {
    let (normed, stats) = match (s.norm.axes(), s.mode) {
        (None, _) => (hs, None),
        (Some(axes), Mode::Train) => {
            let (outs, stats) = tape.batch_norm(&hs, norm.gamma, norm.beta, axes, s.eps)?;
            (outs, Some(stats))
        }
        (Some(axes), Mode::Eval) => {
            let gamma = tape.value(norm.gamma).clone();
            let beta = tape.value(norm.beta).clone();
            let mut outs = Vec::with_capacity(hs.len());
            for h in hs {
                outs.push(tape.norm_eval(
                    h,
                    &gamma,
                    &beta,
                    norm.running_mean,
                    norm.running_var,
                    axes,
                    s.eps,
                )?);
            }
            (outs, None)
        }
    };

    let activated: Vec<Var> = normed.into_iter().map(|h| tape.tanh(h)).collect();

    let ys = match s.mode {
        Mode::Eval => activated,
        Mode::Train if s.dropout == 0.0 => activated,
        Mode::Train => {
            let rng = rng.as_mut().ok_or_else(|| {
                Error::Config("rng required in train mode with dropout_rate > 0".into())
            })?;
            let mut outs = Vec::with_capacity(activated.len());
            for h in activated {
                outs.push(tape.dropout(h, s.dropout, &mut **rng)?);
            }
            outs
        }
    };
    Ok(LayerOut { ys, stats })
}

/// Graph convolutional layer: dropout(tanh(norm(A * H * W))) per sample.
pub fn gcl_forward<T: Scalar>(
    tape: &mut Tape<T>,
    xs: &[Var],
    wire: &GclWire<T>,
    s: LayerSettings,
    rng: MaybeRng,
) -> Result<LayerOut<T>> {
    let mut hs = Vec::with_capacity(xs.len());
    for &x in xs {
        let ah = tape.matmul(wire.adjacency, x)?;
        hs.push(tape.matmul(ah, wire.weight)?);
    }
    norm_tanh_dropout(tape, hs, &wire.norm, s, rng)
}

/// FCL ablation layer: the graph product is replaced by one dense map on the
/// flattened K*F vector; the norm/tanh/dropout stack is unchanged.
pub fn fcl_layer_forward<T: Scalar>(
    tape: &mut Tape<T>,
    xs: &[Var],
    wire: &FclWire<T>,
    s: LayerSettings,
    rng: MaybeRng,
) -> Result<LayerOut<T>> {
    let mut hs = Vec::with_capacity(xs.len());
    for &x in xs {
        let (k, f_in) = tape.value(x).dims();
        let wf = tape.value(wire.weight).cols();
        if tape.value(wire.weight).rows() != k * f_in || wf % k != 0 {
            return Err(Error::shape(
                "fcl weight",
                (k * f_in, wf),
                tape.value(wire.weight).dims(),
            ));
        }
        let flat = tape.reshape(x, 1, k * f_in)?;
        let mapped = tape.matmul(flat, wire.weight)?;
        hs.push(tape.reshape(mapped, k, wf / k)?);
    }
    norm_tanh_dropout(tape, hs, &wire.norm, s, rng)
}

fn layer_forward<T: Scalar>(
    tape: &mut Tape<T>,
    xs: &[Var],
    wire: &LayerWire<T>,
    s: LayerSettings,
    rng: MaybeRng,
) -> Result<LayerOut<T>> {
    match wire {
        LayerWire::Gcl(w) => gcl_forward(tape, xs, w, s, rng),
        LayerWire::Fcl(w) => fcl_layer_forward(tape, xs, w, s, rng),
    }
}

/// Residual block: H + L2(L1(H)), skip addition elementwise.
pub fn res_block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    xs: &[Var],
    wire: &ResBlockWire<T>,
    s: LayerSettings,
    rng: MaybeRng,
) -> Result<ResBlockOut<T>> {
    let l1 = layer_forward(tape, xs, &wire.first, s, rng)?;
    let l2 = layer_forward(tape, &l1.ys, &wire.second, s, rng)?;
    let mut ys = Vec::with_capacity(xs.len());
    for (&x, &y) in xs.iter().zip(&l2.ys) {
        ys.push(tape.add(x, y)?);
    }
    Ok(ResBlockOut {
        ys,
        stats: vec![l1.stats, l2.stats],
    })
}

/// Residual GCN: two GCLs wrapped by a skip connection.
pub fn res_gcn_forward<'a, T: Scalar>(
    tape: &mut Tape<T>,
    xs: &[Var],
    first: GclWire<'a, T>,
    second: GclWire<'a, T>,
    s: LayerSettings,
    rng: MaybeRng,
) -> Result<ResBlockOut<T>> {
    let wire = ResBlockWire {
        first: LayerWire::Gcl(first),
        second: LayerWire::Gcl(second),
    };
    res_block_forward(tape, xs, &wire, s, rng)
}

/// Residual FCL block; interface identical to [`res_gcn_forward`].
pub fn fcl_forward<'a, T: Scalar>(
    tape: &mut Tape<T>,
    xs: &[Var],
    first: FclWire<'a, T>,
    second: FclWire<'a, T>,
    s: LayerSettings,
    rng: MaybeRng,
) -> Result<ResBlockOut<T>> {
    let wire = ResBlockWire {
        first: LayerWire::Fcl(first),
        second: LayerWire::Fcl(second),
    };
    res_block_forward(tape, xs, &wire, s, rng)
}

/// Scale transition: H' = node_map^T * H, then H'' = H' * feat_map.
/// No activation or normalization between the two maps.
pub fn resample<T: Scalar>(
    tape: &mut Tape<T>,
    xs: &[Var],
    node_map: Var,
    feat_map: Var,
) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        let nodes = tape.matmul_ta(node_map, x)?;
        out.push(tape.matmul(nodes, feat_map)?);
    }
    Ok(out)
}

// ----- initialization -----

/// U[-limit, limit], drawn in f64 then narrowed so streams match across
/// precisions.
pub fn init_uniform<T: Scalar>(
    rows: usize,
    cols: usize,
    limit: f64,
    rng: &mut dyn RngCore,
) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| {
        T::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * limit)
    })
}

/// Adjacency init: U[-1/sqrt(K), 1/sqrt(K)].
pub fn init_adjacency<T: Scalar>(k: usize, rng: &mut dyn RngCore) -> Matrix<T> {
    init_uniform(k, k, 1.0 / (k as f64).sqrt(), rng)
}

/// Weight init: U[-1/sqrt(F_in), 1/sqrt(F_in)].
pub fn init_weight<T: Scalar>(f_in: usize, f_out: usize, rng: &mut dyn RngCore) -> Matrix<T> {
    init_uniform(f_in, f_out, 1.0 / (f_in as f64).sqrt(), rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{max_rel_err, xorshift_stream};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct OwnedGcl {
        adjacency: Matrix<f64>,
        weight: Matrix<f64>,
        gamma: Matrix<f64>,
        beta: Matrix<f64>,
        running_mean: Matrix<f64>,
        running_var: Matrix<f64>,
    }

    impl OwnedGcl {
        fn init(k: usize, f_in: usize, f_out: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            OwnedGcl {
                adjacency: init_adjacency(k, &mut rng),
                weight: init_weight(f_in, f_out, &mut rng),
                gamma: Matrix::filled(k, f_out, 1.0),
                beta: Matrix::zeros(k, f_out),
                running_mean: Matrix::zeros(k, f_out),
                running_var: Matrix::filled(k, f_out, 1.0),
            }
        }

        fn wire(&self, tape: &mut Tape<f64>) -> GclWire<'_, f64> {
            GclWire {
                adjacency: tape.leaf(self.adjacency.clone()),
                weight: tape.leaf(self.weight.clone()),
                norm: NormWire {
                    gamma: tape.leaf(self.gamma.clone()),
                    beta: tape.leaf(self.beta.clone()),
                    running_mean: &self.running_mean,
                    running_var: &self.running_var,
                },
            }
        }
    }

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut s = xorshift_stream(seed);
        Matrix::from_fn(rows, cols, |_, _| s())
    }

    #[test]
    fn gcl_shape_contract() {
        // 66x35 input with A(66x66), W(35x64) -> 66x64.
        let gcl = OwnedGcl::init(66, 35, 64, 1);
        let mut tape = Tape::new();
        let x = tape.leaf(rand_matrix(66, 35, 2));
        let wire = gcl.wire(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = gcl_forward(
            &mut tape,
            &[x],
            &wire,
            LayerSettings::train(NormKind::Entry, DEFAULT_DROPOUT),
            &mut Some(&mut rng),
        )
        .unwrap();
        assert_eq!(tape.value(out.ys[0]).dims(), (66, 64));
        assert!(out.stats.is_some());
    }

    #[test]
    fn gcl_zero_input_stays_zero() {
        let gcl = OwnedGcl::init(5, 4, 6, 4);
        for mode in [Mode::Train, Mode::Eval] {
            let mut tape = Tape::new();
            let xs: Vec<Var> = (0..2).map(|_| tape.leaf(Matrix::zeros(5, 4))).collect();
            let wire = gcl.wire(&mut tape);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let s = LayerSettings {
                mode,
                norm: NormKind::Entry,
                dropout: DEFAULT_DROPOUT,
                eps: NORM_EPS,
            };
            let out = gcl_forward(&mut tape, &xs, &wire, s, &mut Some(&mut rng)).unwrap();
            for y in out.ys {
                assert!(tape.value(y).data().iter().all(|&v| v == 0.0), "{mode:?}");
            }
        }
    }

    #[test]
    fn eval_mode_ignores_dropout_rate() {
        let gcl = OwnedGcl::init(4, 3, 3, 6);
        let run = |dropout: f64| -> Matrix<f64> {
            let mut tape = Tape::new();
            let x = tape.leaf(rand_matrix(4, 3, 7));
            let wire = gcl.wire(&mut tape);
            let s = LayerSettings {
                mode: Mode::Eval,
                norm: NormKind::Entry,
                dropout,
                eps: NORM_EPS,
            };
            let out = gcl_forward(&mut tape, &[x], &wire, s, &mut None).unwrap();
            tape.value(out.ys[0]).clone()
        };
        assert_eq!(run(0.1), run(0.0));
    }

    #[test]
    fn train_dropout_without_rng_is_an_error() {
        let gcl = OwnedGcl::init(3, 3, 3, 8);
        let mut tape = Tape::new();
        let x = tape.leaf(rand_matrix(3, 3, 9));
        let wire = gcl.wire(&mut tape);
        let s = LayerSettings::train(NormKind::Entry, 0.1);
        assert!(gcl_forward(&mut tape, &[x], &wire, s, &mut None).is_err());
    }

    #[test]
    fn res_gcn_zeroed_inner_is_identity() {
        // Zero final weight and shift: the block must return H exactly.
        let first = OwnedGcl::init(4, 5, 5, 10);
        let mut second = OwnedGcl::init(4, 5, 5, 11);
        second.weight = Matrix::zeros(5, 5);
        second.beta = Matrix::zeros(4, 5);
        let x_val = rand_matrix(4, 5, 12);

        let mut tape = Tape::new();
        let x = tape.leaf(x_val.clone());
        let w1 = first.wire(&mut tape);
        let w2 = second.wire(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let out = res_gcn_forward(
            &mut tape,
            &[x],
            w1,
            w2,
            LayerSettings::train(NormKind::Entry, DEFAULT_DROPOUT),
            &mut Some(&mut rng),
        )
        .unwrap();
        assert_eq!(tape.value(out.ys[0]), &x_val);
    }

    #[test]
    fn res_gcn_shape_512() {
        let a = OwnedGcl::init(12, 512, 512, 14);
        let b = OwnedGcl::init(12, 512, 512, 15);
        let mut tape = Tape::new();
        let x = tape.leaf(rand_matrix(12, 512, 16));
        let (w1, w2) = (a.wire(&mut tape), b.wire(&mut tape));
        let out = res_gcn_forward(&mut tape, &[x], w1, w2, LayerSettings::passthrough(), &mut None)
            .unwrap();
        assert_eq!(tape.value(out.ys[0]).dims(), (12, 512));
    }

    #[test]
    fn res_gcn_gradient_reaches_input_with_zero_weights() {
        // The skip term keeps dH nonzero even with zeroed inner weights.
        let mut first = OwnedGcl::init(3, 4, 4, 17);
        let mut second = OwnedGcl::init(3, 4, 4, 18);
        first.weight = Matrix::zeros(4, 4);
        second.weight = Matrix::zeros(4, 4);
        let x_val = rand_matrix(3, 4, 19);

        let mut tape = Tape::new();
        let x = tape.leaf(x_val.clone());
        let (w1, w2) = (first.wire(&mut tape), second.wire(&mut tape));
        let out = res_gcn_forward(&mut tape, &[x], w1, w2, LayerSettings::passthrough(), &mut None)
            .unwrap();
        let seed = Matrix::filled(3, 4, 1.0);
        let grads = tape.backward(vec![(out.ys[0], seed)]).unwrap();
        let dx = grads[0].as_ref().expect("input gradient");

        // Finite-difference against the sum of outputs.
        let eval = |xv: &Matrix<f64>| -> f64 {
            let mut t = Tape::new();
            let x = t.leaf(xv.clone());
            let (w1, w2) = (first.wire(&mut t), second.wire(&mut t));
            let o = res_gcn_forward(&mut t, &[x], w1, w2, LayerSettings::passthrough(), &mut None)
                .unwrap();
            t.value(o.ys[0]).data().iter().sum()
        };
        let eps = 1e-5;
        for e in 0..x_val.len() {
            let mut p = x_val.clone();
            p.data_mut()[e] += eps;
            let mut m = x_val.clone();
            m.data_mut()[e] -= eps;
            let numeric = (eval(&p) - eval(&m)) / (2.0 * eps);
            assert!(max_rel_err(dx.data()[e], numeric) < 1e-6);
            assert!(dx.data()[e].abs() > 0.5, "identity term missing");
        }
    }

    #[test]
    fn resample_shapes_and_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_matrix(66, 64, 20));
        let node = tape.leaf(rand_matrix(66, 36, 21));
        let feat = tape.leaf(rand_matrix(64, 128, 22));
        let out = resample(&mut tape, &[x], node, feat).unwrap();
        assert_eq!(tape.value(out[0]).dims(), (36, 128));

        // Identity maps leave H unchanged.
        let mut tape = Tape::new();
        let x_val = rand_matrix(4, 3, 23);
        let x = tape.leaf(x_val.clone());
        let eye_n = tape.leaf(Matrix::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.0 }));
        let eye_f = tape.leaf(Matrix::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.0 }));
        let out = resample(&mut tape, &[x], eye_n, eye_f).unwrap();
        assert_eq!(tape.value(out[0]), &x_val);

        // Upsampling 2: 12x512 -> 21x256.
        let mut tape = Tape::new();
        let x = tape.leaf(rand_matrix(12, 512, 24));
        let node = tape.leaf(rand_matrix(12, 21, 25));
        let feat = tape.leaf(rand_matrix(512, 256, 26));
        let out = resample(&mut tape, &[x], node, feat).unwrap();
        assert_eq!(tape.value(out[0]).dims(), (21, 256));
    }

    struct OwnedFcl {
        weight: Matrix<f64>,
        gamma: Matrix<f64>,
        beta: Matrix<f64>,
        running_mean: Matrix<f64>,
        running_var: Matrix<f64>,
    }

    impl OwnedFcl {
        fn init(k: usize, f: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            OwnedFcl {
                weight: init_weight(k * f, k * f, &mut rng),
                gamma: Matrix::filled(k, f, 1.0),
                beta: Matrix::zeros(k, f),
                running_mean: Matrix::zeros(k, f),
                running_var: Matrix::filled(k, f, 1.0),
            }
        }

        fn wire(&self, tape: &mut Tape<f64>) -> FclWire<'_, f64> {
            FclWire {
                weight: tape.leaf(self.weight.clone()),
                norm: NormWire {
                    gamma: tape.leaf(self.gamma.clone()),
                    beta: tape.leaf(self.beta.clone()),
                    running_mean: &self.running_mean,
                    running_var: &self.running_var,
                },
            }
        }
    }

    #[test]
    fn fcl_zeroed_inner_is_identity_and_preserves_shape() {
        let first = OwnedFcl::init(4, 5, 30);
        let mut second = OwnedFcl::init(4, 5, 31);
        second.weight = Matrix::zeros(20, 20);
        let x_val = rand_matrix(4, 5, 32);
        let mut tape = Tape::new();
        let x = tape.leaf(x_val.clone());
        let (w1, w2) = (first.wire(&mut tape), second.wire(&mut tape));
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let out = fcl_forward(
            &mut tape,
            &[x],
            w1,
            w2,
            LayerSettings::train(NormKind::Entry, DEFAULT_DROPOUT),
            &mut Some(&mut rng),
        )
        .unwrap();
        assert_eq!(tape.value(out.ys[0]), &x_val);
    }

    #[test]
    fn fcl_has_more_parameters_when_kf_exceeds_k_plus_f() {
        // Dense (K*F)^2 vs adjacency K^2 + weight F^2, affine identical.
        let count = |k: usize, f: usize| ((k * f) * (k * f), k * k + f * f);
        for (k, f) in [(4, 5), (12, 512), (2, 3)] {
            let (fcl, gcl) = count(k, f);
            if k * f > k + f {
                assert!(fcl > gcl, "K={k} F={f}");
            }
        }
    }

    #[test]
    fn gradcheck_gcl_and_res_gcn_including_adjacency() {
        // Dropout 0, passthrough norm; checks A, W, and the input.
        let k = 4;
        let (f_in, f_out) = (3, 3);
        let gcl1 = OwnedGcl::init(k, f_in, f_out, 40);
        let gcl2 = OwnedGcl::init(k, f_out, f_out, 41);
        let x_val = rand_matrix(k, f_in, 42);
        let mut weights_stream = xorshift_stream(43);
        let weights = Matrix::from_fn(k, f_out, |_, _| weights_stream());

        let eval = |a1: &Matrix<f64>, w1: &Matrix<f64>, a2: &Matrix<f64>, w2: &Matrix<f64>, xv: &Matrix<f64>| -> f64 {
            let mut t = Tape::new();
            let x = t.leaf(xv.clone());
            fn mk<'g>(
                t: &mut Tape<f64>,
                a: &Matrix<f64>,
                w: &Matrix<f64>,
                g: &'g OwnedGcl,
            ) -> GclWire<'g, f64> {
                GclWire {
                    adjacency: t.leaf(a.clone()),
                    weight: t.leaf(w.clone()),
                    norm: NormWire {
                        gamma: t.leaf(g.gamma.clone()),
                        beta: t.leaf(g.beta.clone()),
                        running_mean: &g.running_mean,
                        running_var: &g.running_var,
                    },
                }
            }
            let wire1 = mk(&mut t, a1, w1, &gcl1);
            let wire2 = mk(&mut t, a2, w2, &gcl2);
            let out = res_gcn_forward(&mut t, &[x], wire1, wire2, LayerSettings::passthrough(), &mut None)
                .unwrap();
            t.value(out.ys[0])
                .data()
                .iter()
                .zip(weights.data())
                .map(|(a, b)| a * b)
                .sum()
        };

        // Analytic gradients.
        let mut tape = Tape::new();
        let x = tape.leaf(x_val.clone());
        let a1 = tape.leaf(gcl1.adjacency.clone());
        let w1v = tape.leaf(gcl1.weight.clone());
        let a2 = tape.leaf(gcl2.adjacency.clone());
        let w2v = tape.leaf(gcl2.weight.clone());
        let wire1 = GclWire {
            adjacency: a1,
            weight: w1v,
            norm: NormWire {
                gamma: tape.leaf(gcl1.gamma.clone()),
                beta: tape.leaf(gcl1.beta.clone()),
                running_mean: &gcl1.running_mean,
                running_var: &gcl1.running_var,
            },
        };
        let wire2 = GclWire {
            adjacency: a2,
            weight: w2v,
            norm: NormWire {
                gamma: tape.leaf(gcl2.gamma.clone()),
                beta: tape.leaf(gcl2.beta.clone()),
                running_mean: &gcl2.running_mean,
                running_var: &gcl2.running_var,
            },
        };
        let out = res_gcn_forward(&mut tape, &[x], wire1, wire2, LayerSettings::passthrough(), &mut None)
            .unwrap();
        let grads = tape.backward(vec![(out.ys[0], weights.clone())]).unwrap();

        let eps = 1e-5;
        let mut check = |target: usize, base: &Matrix<f64>, which: &str| {
            let g = grads[target].as_ref().expect("gradient present");
            for e in 0..base.len() {
                let perturb = |delta: f64| {
                    let mut m = base.clone();
                    m.data_mut()[e] += delta;
                    match which {
                        "x" => eval(&gcl1.adjacency, &gcl1.weight, &gcl2.adjacency, &gcl2.weight, &m),
                        "a1" => eval(&m, &gcl1.weight, &gcl2.adjacency, &gcl2.weight, &x_val),
                        "w1" => eval(&gcl1.adjacency, &m, &gcl2.adjacency, &gcl2.weight, &x_val),
                        "a2" => eval(&gcl1.adjacency, &gcl1.weight, &m, &gcl2.weight, &x_val),
                        _ => eval(&gcl1.adjacency, &gcl1.weight, &gcl2.adjacency, &m, &x_val),
                    }
                };
                let numeric = (perturb(eps) - perturb(-eps)) / (2.0 * eps);
                let err = max_rel_err(g.data()[e], numeric);
                assert!(err < 1e-6, "{which}[{e}]: rel err {err}");
            }
        };
        check(0, &x_val, "x");
        check(1, &gcl1.adjacency, "a1");
        check(2, &gcl1.weight, "w1");
        check(3, &gcl2.adjacency, "a2");
        check(4, &gcl2.weight, "w2");
    }

    #[test]
    fn dropout_is_inverted_in_expectation() {
        // Mean over 10^4 masks matches the dropout-free output within 2%.
        let rate = 0.1;
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let n = 64;
        let x = Matrix::filled(1, n, 1.0f64);
        let trials = 10_000;
        let mut acc = vec![0.0; n];
        for _ in 0..trials {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let y = tape.dropout(xv, rate, &mut rng).unwrap();
            for (a, v) in acc.iter_mut().zip(tape.value(y).data()) {
                *a += *v;
            }
        }
        let grand_mean = acc.iter().sum::<f64>() / (trials as f64 * n as f64);
        assert!((grand_mean - 1.0).abs() < 0.02, "mean {grand_mean}");
    }
}
