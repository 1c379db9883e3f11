//! Equalized-learning-rate layers and modulated convolution.

use rand::Rng;
use rand_distr::StandardNormal;
use spaceedit_tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

pub const LRELU_SLOPE: f64 = 0.2;
pub const LRELU_GAIN: f64 = std::f64::consts::SQRT_2;
const DEMOD_EPS: f64 = 1e-8;

fn normal<T: Real>(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| {
        T::lit(rng.sample::<f64, _>(StandardNormal) * scale)
    })
}

/// Leaky ReLU scaled to preserve activation magnitude.
pub fn lrelu<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    let y = g.leaky_relu(x, LRELU_SLOPE);
    g.scale(y, T::lit(LRELU_GAIN))
}

/// Add a per-channel bias stored as `[C]` to an NCHW tensor.
pub fn add_channel_bias<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    bias: ParamId,
) -> Var {
    let b = g.param(store, bias);
    let c = store.get(bias).numel();
    let b = g.reshape(b, vec![1, c, 1, 1]);
    g.add(x, b)
}

/// Dense layer with runtime weight scaling.
#[derive(Clone, Debug)]
pub struct EqLinear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub lr_mult: f64,
}

impl EqLinear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias_init: Option<f64>,
        lr_mult: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            normal(rng, &[out_dim, in_dim], 1.0 / lr_mult),
        );
        let bias = bias_init.map(|b| {
            store.add(
                format!("{name}.bias"),
                Tensor::full(vec![out_dim], T::lit(b / lr_mult)),
            )
        });
        EqLinear {
            weight,
            bias,
            in_dim,
            out_dim,
            lr_mult,
        }
    }

    pub fn weight_gain(&self) -> f64 {
        self.lr_mult / (self.in_dim as f64).sqrt()
    }

    /// Effective `[out, in]` weight as used at runtime.
    pub fn effective_weight<T: Real>(&self, store: &ParamStore<T>) -> Tensor<T> {
        let gain = T::lit(self.weight_gain());
        store.get(self.weight).map(|v| v * gain)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let y = g.matmul_t(x, false, w, true);
        let y = g.scale(y, T::lit(self.weight_gain()));
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                let b = if self.lr_mult == 1.0 {
                    b
                } else {
                    g.scale(b, T::lit(self.lr_mult))
                };
                g.add(y, b)
            }
            None => y,
        }
    }
}

/// Plain convolution with runtime weight scaling.
#[derive(Clone, Debug)]
pub struct EqConv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl EqConv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            normal(rng, &[out_ch, in_ch, kernel, kernel], 1.0),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![out_ch])));
        EqConv {
            weight,
            bias,
            kernel,
            in_ch,
            out_ch,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let gain = 1.0 / ((self.in_ch * self.kernel * self.kernel) as f64).sqrt();
        let w = g.scale(w, T::lit(gain));
        let y = g.conv2d(x, w, self.kernel / 2);
        match self.bias {
            Some(b) => add_channel_bias(g, store, y, b),
            None => y,
        }
    }

    /// Conv, bias and scaled leaky ReLU.
    pub fn forward_act<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let y = self.forward(g, store, x);
        lrelu(g, y)
    }
}

/// Modulated convolution on graph values.
///
/// `x` is `[B, I, H, W]`, `weight` `[O, I, k, k]`, `style` `[B, I]`. The
/// per-sample kernel `weight * style` is never materialized: the input is
/// scaled instead, and demodulation rescales each output channel by the
/// inverse norm of its modulated kernel.
pub fn modulated_conv<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    weight: Var,
    style: Var,
    demodulate: bool,
) -> Var {
    let xs = g.shape(x).to_vec();
    let ws = g.shape(weight).to_vec();
    let (b, i) = (xs[0], xs[1]);
    assert_eq!(
        ws[1], i,
        "modulated_conv: weight expects {} input channels, got {i}",
        ws[1]
    );
    assert_eq!(
        g.shape(style),
        &[b, i],
        "modulated_conv: style must be [batch, in_channels]"
    );
    let s4 = g.reshape(style, vec![b, i, 1, 1]);
    let xm = g.mul(x, s4);
    let y = g.conv2d(xm, weight, ws[2] / 2);
    if !demodulate {
        return y;
    }
    let o = ws[0];
    let w2 = g.square(weight);
    let w2 = g.sum_keepdim(w2, &[2, 3]);
    let w2 = g.reshape(w2, vec![o, i]);
    let s2 = g.square(style);
    let norm = g.matmul_t(s2, false, w2, true);
    let norm = g.shift(norm, T::lit(DEMOD_EPS));
    let d = g.rsqrt(norm);
    let d = g.reshape(d, vec![b, o, 1, 1]);
    g.mul(y, d)
}

/// Convolution whose kernel is modulated by a per-layer style affine.
#[derive(Clone, Debug)]
pub struct ModConv {
    pub weight: ParamId,
    pub affine: EqLinear,
    pub kernel: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub demodulate: bool,
}

impl ModConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        style_dim: usize,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        demodulate: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let affine = EqLinear::new(
            store,
            &format!("{name}.affine"),
            style_dim,
            in_ch,
            Some(1.0),
            1.0,
            rng,
        );
        let weight = store.add(
            format!("{name}.weight"),
            normal(rng, &[out_ch, in_ch, kernel, kernel], 1.0),
        );
        ModConv {
            weight,
            affine,
            kernel,
            in_ch,
            out_ch,
            demodulate,
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        style_in: Var,
    ) -> Var {
        let s = self.affine.forward(g, store, style_in);
        let w = g.param(store, self.weight);
        let gain = 1.0 / ((self.in_ch * self.kernel * self.kernel) as f64).sqrt();
        let w = g.scale(w, T::lit(gain));
        modulated_conv(g, x, w, s, self.demodulate)
    }
}
