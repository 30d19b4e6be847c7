//! Trainable layers built on the autodiff graph: convolution, linear,
//! residual blocks with instance normalization, the LSTM cell and its
//! bidirectional wrapper, and non-overlapping sequence average pooling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, Scalar, Tensor, TensorError, TensorResult, Var};

/// Epsilon inside every normalization square root.
pub const NORM_EPS: f64 = 1e-5;

/// Named trainable tensor with an accumulated-gradient buffer.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    name: String,
    value: Tensor<T>,
    grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        &mut self.value
    }

    pub fn grad(&self) -> &Tensor<T> {
        &self.grad
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    /// Replaces the value, keeping the shape fixed.
    pub fn set_value(&mut self, value: Tensor<T>) -> TensorResult<()> {
        if value.shape() != self.value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_value",
                left: self.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        self.value = value;
        Ok(())
    }

    /// Registers this parameter on the graph; repeated binds within one
    /// graph share the node, so gradients accumulate across uses.
    pub fn bind<'g>(&self, g: &'g Graph<T>) -> TensorResult<Var<'g, T>> {
        g.bound_leaf(&self.name, &self.value)
    }

    pub fn zero_grad(&mut self) {
        self.grad = Tensor::zeros(self.value.shape());
    }

    pub fn accumulate_grad(&mut self, delta: &Tensor<T>) -> TensorResult<()> {
        if delta.shape() != self.grad.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate_grad",
                left: self.grad.shape().to_vec(),
                right: delta.shape().to_vec(),
            });
        }
        let dst = self.grad.data_mut();
        for (d, s) in dst.iter_mut().zip(delta.data()) {
            *d += *s;
        }
        Ok(())
    }
}

/// Adds the gradients a finished backward pass left on the graph into the
/// matching parameters' accumulation buffers.
pub fn pull_gradients<'a, T: Scalar>(
    graph: &Graph<T>,
    params: impl IntoIterator<Item = &'a mut Param<T>>,
) -> TensorResult<()> {
    for p in params {
        if let Some(g) = graph.binding_grad(&p.name) {
            p.accumulate_grad(&g)?;
        }
    }
    Ok(())
}

/// Uniform init on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`. Samples are drawn
/// in 64-bit so the stream is identical for every element precision.
pub fn uniform_fan_in<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    assert!(fan_in > 0, "fan_in must be positive");
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
}

/// 2D convolution layer (no bias; normalization follows every use here).
#[derive(Debug, Clone)]
pub struct Conv2dLayer<T: Scalar> {
    pub w: Param<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2dLayer<T> {
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = uniform_fan_in(rng, &[c_out, c_in, k, k], c_in * k * k);
        Conv2dLayer {
            w: Param::new(format!("{name}.w"), w),
            stride,
            pad,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> TensorResult<Var<'g, T>> {
        x.conv2d(self.w.bind(g)?, self.stride, self.pad)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.w]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.w]
    }
}

/// 3D convolution layer with cubic kernels (no bias).
#[derive(Debug, Clone)]
pub struct Conv3dLayer<T: Scalar> {
    pub w: Param<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv3dLayer<T> {
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = uniform_fan_in(rng, &[c_out, c_in, k, k, k], c_in * k * k * k);
        Conv3dLayer {
            w: Param::new(format!("{name}.w"), w),
            stride,
            pad,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> TensorResult<Var<'g, T>> {
        x.conv3d(self.w.bind(g)?, self.stride, self.pad)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.w]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.w]
    }
}

/// Fully connected layer on rank-1 inputs: `y = W x + b`.
#[derive(Debug, Clone)]
pub struct LinearLayer<T: Scalar> {
    pub w: Param<T>,
    pub b: Param<T>,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn new(name: &str, in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = uniform_fan_in(rng, &[out_features, in_features], in_features);
        LinearLayer {
            w: Param::new(format!("{name}.w"), w),
            b: Param::new(format!("{name}.b"), Tensor::zeros(&[out_features])),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> TensorResult<Var<'g, T>> {
        self.w.bind(g)?.matvec(x)?.add(self.b.bind(g)?)
    }

    pub fn in_features(&self) -> usize {
        self.w.value().shape()[1]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.w, &mut self.b]
    }
}

fn norm_eps<T: Scalar>() -> T {
    T::from_f64(NORM_EPS)
}

/// Residual block: two 3x3 convolutions with instance norm, ReLU after the
/// first norm and after the residual sum. The skip is the identity, or a
/// strided 1x1 convolution plus instance norm when the shape changes.
#[derive(Debug, Clone)]
pub struct BasicBlock2d<T: Scalar> {
    conv1: Conv2dLayer<T>,
    conv2: Conv2dLayer<T>,
    proj: Option<Conv2dLayer<T>>,
}

impl<T: Scalar> BasicBlock2d<T> {
    pub fn new(name: &str, c_in: usize, c_out: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let conv1 = Conv2dLayer::new(&format!("{name}.conv1"), c_in, c_out, 3, stride, 1, rng);
        let conv2 = Conv2dLayer::new(&format!("{name}.conv2"), c_out, c_out, 3, 1, 1, rng);
        let proj = (stride != 1 || c_in != c_out)
            .then(|| Conv2dLayer::new(&format!("{name}.proj"), c_in, c_out, 1, stride, 0, rng));
        BasicBlock2d { conv1, conv2, proj }
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> TensorResult<Var<'g, T>> {
        let eps = norm_eps::<T>();
        let h = self
            .conv1
            .forward(g, x)?
            .instance_norm(eps)?
            .relu()?;
        let h = self.conv2.forward(g, h)?.instance_norm(eps)?;
        let skip = match &self.proj {
            Some(p) => p.forward(g, x)?.instance_norm(eps)?,
            None => x,
        };
        h.add(skip)?.relu()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = vec![&self.conv1.w, &self.conv2.w];
        if let Some(p) = &self.proj {
            out.push(&p.w);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = vec![&mut self.conv1.w, &mut self.conv2.w];
        if let Some(p) = &mut self.proj {
            out.push(&mut p.w);
        }
        out
    }
}

/// 3D residual block, mirroring [`BasicBlock2d`] with cubic kernels.
#[derive(Debug, Clone)]
pub struct BasicBlock3d<T: Scalar> {
    conv1: Conv3dLayer<T>,
    conv2: Conv3dLayer<T>,
    proj: Option<Conv3dLayer<T>>,
}

impl<T: Scalar> BasicBlock3d<T> {
    pub fn new(name: &str, c_in: usize, c_out: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let conv1 = Conv3dLayer::new(&format!("{name}.conv1"), c_in, c_out, 3, stride, 1, rng);
        let conv2 = Conv3dLayer::new(&format!("{name}.conv2"), c_out, c_out, 3, 1, 1, rng);
        let proj = (stride != 1 || c_in != c_out)
            .then(|| Conv3dLayer::new(&format!("{name}.proj"), c_in, c_out, 1, stride, 0, rng));
        BasicBlock3d { conv1, conv2, proj }
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> TensorResult<Var<'g, T>> {
        let eps = norm_eps::<T>();
        let h = self
            .conv1
            .forward(g, x)?
            .instance_norm(eps)?
            .relu()?;
        let h = self.conv2.forward(g, h)?.instance_norm(eps)?;
        let skip = match &self.proj {
            Some(p) => p.forward(g, x)?.instance_norm(eps)?,
            None => x,
        };
        h.add(skip)?.relu()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = vec![&self.conv1.w, &self.conv2.w];
        if let Some(p) = &self.proj {
            out.push(&p.w);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = vec![&mut self.conv1.w, &mut self.conv2.w];
        if let Some(p) = &mut self.proj {
            out.push(&mut p.w);
        }
        out
    }
}

/// The twelve parameters of one LSTM direction: input and recurrent weight
/// matrices plus biases for the input, forget, and output gates and the
/// candidate. The forget bias starts at one so early training can retain
/// cell state; all other biases start at zero.
#[derive(Debug, Clone)]
pub struct LstmParams<T: Scalar> {
    pub w_ix: Param<T>,
    pub w_fx: Param<T>,
    pub w_ox: Param<T>,
    pub w_gx: Param<T>,
    pub w_ih: Param<T>,
    pub w_fh: Param<T>,
    pub w_oh: Param<T>,
    pub w_gh: Param<T>,
    pub b_i: Param<T>,
    pub b_f: Param<T>,
    pub b_o: Param<T>,
    pub b_g: Param<T>,
}

impl<T: Scalar> LstmParams<T> {
    pub fn new(name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let wx = |rng: &mut ChaCha8Rng| uniform_fan_in(rng, &[hidden, input], input);
        let wh = |rng: &mut ChaCha8Rng| uniform_fan_in(rng, &[hidden, hidden], hidden);
        LstmParams {
            w_ix: Param::new(format!("{name}.w_ix"), wx(rng)),
            w_fx: Param::new(format!("{name}.w_fx"), wx(rng)),
            w_ox: Param::new(format!("{name}.w_ox"), wx(rng)),
            w_gx: Param::new(format!("{name}.w_gx"), wx(rng)),
            w_ih: Param::new(format!("{name}.w_ih"), wh(rng)),
            w_fh: Param::new(format!("{name}.w_fh"), wh(rng)),
            w_oh: Param::new(format!("{name}.w_oh"), wh(rng)),
            w_gh: Param::new(format!("{name}.w_gh"), wh(rng)),
            b_i: Param::new(format!("{name}.b_i"), Tensor::zeros(&[hidden])),
            b_f: Param::new(format!("{name}.b_f"), Tensor::filled(&[hidden], T::one())),
            b_o: Param::new(format!("{name}.b_o"), Tensor::zeros(&[hidden])),
            b_g: Param::new(format!("{name}.b_g"), Tensor::zeros(&[hidden])),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b_i.value().numel()
    }

    pub fn input(&self) -> usize {
        self.w_ix.value().shape()[1]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![
            &self.w_ix, &self.w_fx, &self.w_ox, &self.w_gx, &self.w_ih, &self.w_fh, &self.w_oh,
            &self.w_gh, &self.b_i, &self.b_f, &self.b_o, &self.b_g,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.w_ix,
            &mut self.w_fx,
            &mut self.w_ox,
            &mut self.w_gx,
            &mut self.w_ih,
            &mut self.w_fh,
            &mut self.w_oh,
            &mut self.w_gh,
            &mut self.b_i,
            &mut self.b_f,
            &mut self.b_o,
            &mut self.b_g,
        ]
    }
}

/// Hidden and cell state flowing between LSTM steps.
#[derive(Clone, Copy)]
pub struct LstmState<'g, T: Scalar> {
    pub h: Var<'g, T>,
    pub c: Var<'g, T>,
}

/// Zero initial state.
pub fn lstm_zero_state<'g, T: Scalar>(
    g: &'g Graph<T>,
    hidden: usize,
) -> TensorResult<LstmState<'g, T>> {
    Ok(LstmState {
        h: g.constant(Tensor::zeros(&[hidden]))?,
        c: g.constant(Tensor::zeros(&[hidden]))?,
    })
}

/// One LSTM step:
/// gates `i,f,o = sigmoid(W.x p + W.h h + b)`, candidate `g = tanh(...)`,
/// then `c' = f.c + i.g` and `h' = o.tanh(c')`. Every component of the new
/// hidden state must stay inside (-1, 1).
pub fn lstm_step<'g, T: Scalar>(
    g: &'g Graph<T>,
    params: &LstmParams<T>,
    input: Var<'g, T>,
    state: LstmState<'g, T>,
) -> TensorResult<LstmState<'g, T>> {
    let gate = |wx: &Param<T>, wh: &Param<T>, b: &Param<T>| -> TensorResult<Var<'g, T>> {
        wx.bind(g)?
            .matvec(input)?
            .add(wh.bind(g)?.matvec(state.h)?)?
            .add(b.bind(g)?)
    };
    let i = gate(&params.w_ix, &params.w_ih, &params.b_i)?.sigmoid()?;
    let f = gate(&params.w_fx, &params.w_fh, &params.b_f)?.sigmoid()?;
    let o = gate(&params.w_ox, &params.w_oh, &params.b_o)?.sigmoid()?;
    let cand = gate(&params.w_gx, &params.w_gh, &params.b_g)?.tanh()?;
    let c = f.mul(state.c)?.add(i.mul(cand)?)?;
    let h = o.mul(c.tanh()?)?;
    if h.value().data().iter().any(|v| v.abs() >= T::one()) {
        return Err(TensorError::Unstable {
            what: "lstm hidden state reached magnitude 1".into(),
        });
    }
    Ok(LstmState { h, c })
}

/// Runs two independent LSTM directions over the sequence from zero states
/// and concatenates per step: forward state for step t, then the backward
/// state that was produced while scanning from the end back to t.
pub fn bilstm<'g, T: Scalar>(
    g: &'g Graph<T>,
    inputs: &[Var<'g, T>],
    fwd: &LstmParams<T>,
    bwd: &LstmParams<T>,
) -> TensorResult<Vec<Var<'g, T>>> {
    if inputs.is_empty() {
        return Err(TensorError::InvalidShape {
            op: "bilstm",
            detail: "empty sequence".into(),
        });
    }
    let hidden = fwd.hidden();
    let mut fwd_h = Vec::with_capacity(inputs.len());
    let mut state = lstm_zero_state(g, hidden)?;
    for &x in inputs {
        state = lstm_step(g, fwd, x, state)?;
        fwd_h.push(state.h);
    }
    let mut bwd_h = Vec::with_capacity(inputs.len());
    let mut state = lstm_zero_state(g, bwd.hidden())?;
    for &x in inputs.iter().rev() {
        state = lstm_step(g, bwd, x, state)?;
        bwd_h.push(state.h);
    }
    bwd_h.reverse();
    fwd_h
        .into_iter()
        .zip(bwd_h)
        .map(|(hf, hb)| g.concat(&[hf, hb]))
        .collect()
}

/// Non-overlapping average pooling over a feature sequence: each output is
/// the mean of `k` consecutive inputs; the trailing `n mod k` inputs are
/// dropped.
pub fn seq_avg_pool<'g, T: Scalar>(
    g: &'g Graph<T>,
    feats: &[Var<'g, T>],
    k: usize,
) -> TensorResult<Vec<Var<'g, T>>> {
    let _ = g;
    if k == 0 {
        return Err(TensorError::InvalidArg {
            arg: "k",
            detail: "pool window must be at least 1".into(),
        });
    }
    if feats.len() < k {
        return Err(TensorError::InvalidShape {
            op: "seq_avg_pool",
            detail: format!("sequence length {} shorter than window {k}", feats.len()),
        });
    }
    let inv_k = T::from_usize(k).recip();
    let mut out = Vec::with_capacity(feats.len() / k);
    for chunk in feats.chunks_exact(k) {
        let mut acc = chunk[0];
        for &f in &chunk[1..] {
            acc = acc.add(f)?;
        }
        out.push(acc.scale(inv_k)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Scalar LSTM step evaluated with plain arithmetic, used as the oracle
    /// for the graph implementation.
    fn scalar_lstm_step(
        wx: f64,
        wh: f64,
        b: f64,
        p: f64,
        h0: f64,
        c0: f64,
    ) -> (f64, f64, f64, f64) {
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let pre = wx * p + wh * h0 + b;
        let i = sig(pre);
        let f = sig(pre);
        let o = sig(pre);
        let g = pre.tanh();
        let c = f * c0 + i * g;
        let h = o * c.tanh();
        (i, g, c, h)
    }

    fn unit_lstm(hidden: usize, input: usize) -> LstmParams<f64> {
        let mut p = LstmParams::new("lstm", input, hidden, &mut rng(0));
        for param in p.params_mut() {
            let shape = param.value().shape().to_vec();
            let fill = if param.name().contains(".w_") && param.name().ends_with('x') {
                1.0
            } else {
                0.0
            };
            param.set_value(Tensor::filled(&shape, fill)).unwrap();
        }
        p
    }

    #[test]
    fn lstm_step_matches_scalar_oracle() {
        let params = unit_lstm(1, 1);
        let g = Graph::new();
        let x = g
            .leaf(Tensor::from_vec(&[1], vec![1.0]).unwrap(), false)
            .unwrap();
        let state = lstm_zero_state(&g, 1).unwrap();
        let next = lstm_step(&g, &params, x, state).unwrap();

        let (i, cand, c, h) = scalar_lstm_step(1.0, 0.0, 0.0, 1.0, 0.0, 0.0);
        assert!((i - 0.73106).abs() < 1e-5);
        assert!((cand - 0.76159).abs() < 1e-5);
        assert!((c - 0.55677).abs() < 1e-5);
        assert!((next.c.value().data()[0] - c).abs() < 1e-12);
        assert!((next.h.value().data()[0] - h).abs() < 1e-12);
        // Cross-check against frozen oracle outputs to 1e-4.
        assert!((next.c.value().data()[0] - 0.5567699).abs() < 1e-4);
        assert!((next.h.value().data()[0] - 0.3696063).abs() < 1e-4);
    }

    #[test]
    fn strong_forget_bias_preserves_cell_state() {
        let mut params = unit_lstm(1, 1);
        for p in params.params_mut() {
            let shape = p.value().shape().to_vec();
            let v = match p.name() {
                "lstm.b_f" => 20.0,
                "lstm.b_i" => -20.0,
                _ => 0.0,
            };
            p.set_value(Tensor::filled(&shape, v)).unwrap();
        }
        let g = Graph::new();
        let x = g
            .leaf(Tensor::from_vec(&[1], vec![0.3]).unwrap(), false)
            .unwrap();
        let c_prev = 0.8;
        let state = LstmState {
            h: g.constant(Tensor::zeros(&[1])).unwrap(),
            c: g.constant(Tensor::from_vec(&[1], vec![c_prev]).unwrap())
                .unwrap(),
        };
        let next = lstm_step(&g, &params, x, state).unwrap();
        assert!((next.c.value().data()[0] - c_prev).abs() < 1e-6);
    }

    #[test]
    fn hidden_state_stays_inside_the_open_unit_interval() {
        let mut r = rng(9);
        let params = LstmParams::<f64>::new("lstm", 6, 8, &mut r);
        let g = Graph::new();
        let mut state = lstm_zero_state(&g, 8).unwrap();
        for step in 0..100 {
            let x = g
                .leaf(
                    Tensor::from_fn(&[6], |_| r.gen_range(-3.0..3.0)),
                    false,
                )
                .unwrap();
            state = lstm_step(&g, &params, x, state).unwrap();
            let max = state
                .h
                .value()
                .data()
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max < 1.0, "step {step}: |h| = {max}");
        }
    }

    #[test]
    fn bilstm_forward_half_ignores_backward_parameters() {
        let mut r = rng(4);
        let fwd = LstmParams::<f64>::new("fwd", 3, 4, &mut r);
        let bwd = LstmParams::<f64>::new("bwd", 3, 4, &mut r);
        let inputs: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();

        let run = |bwd: &LstmParams<f64>| {
            let g = Graph::new();
            let vars: Vec<_> = inputs
                .iter()
                .map(|v| {
                    g.leaf(Tensor::from_vec(&[3], v.clone()).unwrap(), false)
                        .unwrap()
                })
                .collect();
            bilstm(&g, &vars, &fwd, bwd)
                .unwrap()
                .iter()
                .map(|o| o.value().data().to_vec())
                .collect::<Vec<_>>()
        };

        let base = run(&bwd);
        let mut bwd2 = bwd.clone();
        for p in bwd2.params_mut() {
            let bumped: Vec<f64> = p.value().data().iter().map(|v| v + 0.37).collect();
            let shape = p.value().shape().to_vec();
            p.set_value(Tensor::from_vec(&shape, bumped).unwrap()).unwrap();
        }
        let changed = run(&bwd2);
        for (a, b) in base.iter().zip(&changed) {
            assert_eq!(a.len(), 8);
            assert_eq!(&a[..4], &b[..4], "forward half must be bit-identical");
            assert_ne!(&a[4..], &b[4..], "backward half must respond");
        }
    }

    #[test]
    fn seq_avg_pool_drops_the_trailing_remainder() {
        let g = Graph::new();
        let feats: Vec<_> = (0..7)
            .map(|i| {
                g.leaf(Tensor::from_vec(&[2], vec![i as f64, 0.0]).unwrap(), false)
                    .unwrap()
            })
            .collect();
        let pooled = seq_avg_pool(&g, &feats, 3).unwrap();
        assert_eq!(pooled.len(), 2);
        assert_eq!(pooled[0].value().data()[0], 1.0);
        assert_eq!(pooled[1].value().data()[0], 4.0);
    }

    #[test]
    fn seq_avg_pool_preserves_the_mean_when_k_divides_n() {
        let mut r = rng(12);
        let g = Graph::new();
        let n = 9;
        let dim = 5;
        let raw: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| r.gen_range(-2.0..2.0)).collect())
            .collect();
        let feats: Vec<_> = raw
            .iter()
            .map(|v| {
                g.leaf(Tensor::from_vec(&[dim], v.clone()).unwrap(), false)
                    .unwrap()
            })
            .collect();
        let pooled = seq_avg_pool(&g, &feats, 3).unwrap();
        for d in 0..dim {
            let original: f64 = raw.iter().map(|v| v[d]).sum::<f64>() / n as f64;
            let pooled_mean: f64 = pooled
                .iter()
                .map(|p| p.value().data()[d])
                .sum::<f64>()
                / pooled.len() as f64;
            assert!((original - pooled_mean).abs() < 1e-6);
        }
    }

    #[test]
    fn seq_avg_pool_rejects_sequences_shorter_than_the_window() {
        let g = Graph::<f64>::new();
        let f = g.leaf(Tensor::zeros(&[2]), false).unwrap();
        assert!(seq_avg_pool(&g, &[f], 3).is_err());
        assert!(seq_avg_pool(&g, &[f], 0).is_err());
    }

    #[test]
    fn basic_block_halves_spatial_extent_and_widens_channels_when_strided() {
        let mut r = rng(3);
        let block = BasicBlock2d::<f64>::new("block", 4, 8, 2, &mut r);
        let g = Graph::new();
        let x = g
            .leaf(Tensor::from_fn(&[4, 8, 8], |i| (i as f64 * 0.13).sin()), false)
            .unwrap();
        let y = block.forward(&g, x).unwrap();
        assert_eq!(y.value().shape(), &[8, 4, 4]);
        assert_eq!(block.params().len(), 3);

        let same = BasicBlock2d::<f64>::new("same", 4, 4, 1, &mut r);
        let x2 = g
            .leaf(Tensor::from_fn(&[4, 8, 8], |i| (i as f64 * 0.07).cos()), false)
            .unwrap();
        let y2 = same.forward(&g, x2).unwrap();
        assert_eq!(y2.value().shape(), &[4, 8, 8]);
        assert_eq!(same.params().len(), 2);
    }

    #[test]
    fn basic_block3d_shapes_follow_the_2d_pattern() {
        let mut r = rng(5);
        let block = BasicBlock3d::<f64>::new("block", 2, 4, 2, &mut r);
        let g = Graph::new();
        let x = g
            .leaf(
                Tensor::from_fn(&[2, 6, 6, 6], |i| (i as f64 * 0.11).sin()),
                false,
            )
            .unwrap();
        let y = block.forward(&g, x).unwrap();
        assert_eq!(y.value().shape(), &[4, 3, 3, 3]);
    }

    #[test]
    fn initialization_is_bounded_by_fan_in_and_biases_start_correctly() {
        let mut r = rng(21);
        let t: Tensor<f64> = uniform_fan_in(&mut r, &[16, 9], 9);
        let bound = 1.0 / 3.0;
        for &v in t.data() {
            assert!(v.abs() <= bound);
        }
        let mean: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        assert!(mean.abs() < 0.05);

        let lstm = LstmParams::<f64>::new("lstm", 4, 4, &mut r);
        assert!(lstm.b_f.value().data().iter().all(|&v| v == 1.0));
        assert!(lstm.b_i.value().data().iter().all(|&v| v == 0.0));
        assert!(lstm.b_o.value().data().iter().all(|&v| v == 0.0));
        assert!(lstm.b_g.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pull_gradients_accumulates_into_parameters() {
        let mut p = Param::new("w", Tensor::from_vec(&[2], vec![1.0f64, 2.0]).unwrap());
        let g = Graph::new();
        let w = p.bind(&g).unwrap();
        let loss = w.mul(w).unwrap().sum_all().unwrap();
        g.backward(loss).unwrap();
        pull_gradients(&g, std::iter::once(&mut p)).unwrap();
        assert_eq!(p.grad().data(), &[2.0, 4.0]);
        p.zero_grad();
        assert_eq!(p.grad().data(), &[0.0, 0.0]);
    }
}
