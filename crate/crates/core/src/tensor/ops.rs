use super::Tensor;
use crate::error::{Error, Result};

/// Stride-1, same-padded (zero fill) 2-D convolution parameters.
///
/// `kernel` is laid out `Kh×Kw×Cin×Cout`, `bias` has `Cout` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    pub fn new(kernel: Tensor, bias: Tensor) -> Result<Self> {
        let p = ConvParams { kernel, bias };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let [kh, kw, _, cout] = *self.kernel.dims() else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be Kh×Kw×Cin×Cout, got {:?}", self.kernel.dims()),
            ));
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidParam(format!(
                "conv2d kernel size {kh}×{kw} must be odd"
            )));
        }
        if self.bias.dims() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias dims {:?}, expected [{cout}]", self.bias.dims()),
            ));
        }
        Ok(())
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernel.dims()[0], self.kernel.dims()[1])
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.dims()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.dims()[3]
    }
}

/// Inference-mode batch normalization with stored moving statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub moving_mean: Tensor,
    pub moving_var: Tensor,
    pub epsilon: f32,
}

impl BatchNormParams {
    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Checks shapes and value ranges. `epsilon` may be zero here so that
    /// hand-built identity parameters validate; [`batchnorm_infer`] rejects
    /// a negative one.
    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        for (name, t) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("moving_mean", &self.moving_mean),
            ("moving_var", &self.moving_var),
        ] {
            if t.dims() != [c] {
                return Err(Error::shape(
                    "batchnorm",
                    format!("{name} dims {:?}, expected [{c}]", t.dims()),
                ));
            }
        }
        if self.moving_var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidParam("batchnorm moving_var must be >= 0".into()));
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(Error::InvalidParam(format!(
                "batchnorm epsilon must be non-negative, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let (h, w, cin) = x.hwc("conv2d")?;
    p.validate()?;
    let (kh, kw) = p.kernel_size();
    if p.in_channels() != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels, kernel expects {}", p.in_channels()),
        ));
    }
    let cout = p.out_channels();
    let (ph, pw) = (kh / 2, kw / 2);
    let kernel = p.kernel.data();
    let input = x.data();

    let mut out = vec![0.0f32; h * w * cout];
    let mut acc = vec![0.0f64; cout];
    for oh in 0..h {
        for ow in 0..w {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for dh in 0..kh {
                let Some(ih) = (oh + dh).checked_sub(ph).filter(|&v| v < h) else {
                    continue;
                };
                for dw in 0..kw {
                    let Some(iw) = (ow + dw).checked_sub(pw).filter(|&v| v < w) else {
                        continue;
                    };
                    let pixel = &input[(ih * w + iw) * cin..][..cin];
                    let taps = &kernel[(dh * kw + dw) * cin * cout..][..cin * cout];
                    for (&xv, tap) in pixel.iter().zip(taps.chunks_exact(cout)) {
                        let xv = xv as f64;
                        for (a, &k) in acc.iter_mut().zip(tap) {
                            *a += xv * k as f64;
                        }
                    }
                }
            }
            let dst = &mut out[(oh * w + ow) * cout..][..cout];
            for ((d, &a), &b) in dst.iter_mut().zip(&acc).zip(p.bias.data()) {
                *d = (a + b as f64) as f32;
            }
        }
    }
    Tensor::new(vec![h, w, cout], out)
}

pub fn batchnorm_infer(x: &Tensor, p: &BatchNormParams) -> Result<Tensor> {
    let (_, _, c) = x.hwc("batchnorm")?;
    p.validate()?;
    if p.channels() != c {
        return Err(Error::shape(
            "batchnorm",
            format!("input has {c} channels, parameters have {}", p.channels()),
        ));
    }
    let (scale, shift): (Vec<f32>, Vec<f32>) = (0..c)
        .map(|ch| {
            let inv = 1.0 / (p.moving_var.data()[ch] + p.epsilon).sqrt();
            let g = p.gamma.data()[ch];
            (g * inv, p.moving_mean.data()[ch])
        })
        .unzip();
    let beta = p.beta.data();
    let mut out = x.clone();
    for pixel in out.data_mut().chunks_exact_mut(c) {
        for ch in 0..c {
            pixel[ch] = scale[ch] * (pixel[ch] - shift[ch]) + beta[ch];
        }
    }
    Ok(out)
}

pub fn leaky_relu(x: &Tensor, alpha: f32) -> Result<Tensor> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidParam(format!(
            "leaky_relu alpha must be in [0, 1), got {alpha}"
        )));
    }
    Ok(x.map(|v| v.max(alpha * v)))
}

/// Non-overlapping 2×2 max pooling.
pub fn maxpool2(x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = x.hwc("maxpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "maxpool2",
            format!("spatial dims {h}×{w} must be even"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = x.data();
    let mut out = vec![f32::NEG_INFINITY; oh * ow * c];
    for ih in 0..h {
        for iw in 0..w {
            let s = &src[(ih * w + iw) * c..][..c];
            let d = &mut out[((ih / 2) * ow + iw / 2) * c..][..c];
            for (d, &s) in d.iter_mut().zip(s) {
                *d = d.max(s);
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

/// 3×3 stride-1 max pooling with same padding; out-of-range taps never win.
pub fn maxpool_same(x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = x.hwc("maxpool_same")?;
    let src = x.data();
    let mut out = vec![f32::NEG_INFINITY; h * w * c];
    for oh in 0..h {
        let rows = oh.saturating_sub(1)..(oh + 2).min(h);
        for ow in 0..w {
            let d = &mut out[(oh * w + ow) * c..][..c];
            for ih in rows.clone() {
                for iw in ow.saturating_sub(1)..(ow + 2).min(w) {
                    let s = &src[(ih * w + iw) * c..][..c];
                    for (d, &s) in d.iter_mut().zip(s) {
                        *d = d.max(s);
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Nearest-neighbor 2× upsampling: every pixel becomes a 2×2 block.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = x.hwc("upsample2")?;
    let (oh, ow) = (2 * h, 2 * w);
    let src = x.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for xx in 0..ow {
            out.extend_from_slice(&src[((y / 2) * w + xx / 2) * c..][..c]);
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

// Largest f32 strictly below 1.0.
const BELOW_ONE: f32 = 1.0 - f32::EPSILON / 2.0;

/// Logistic function, evaluated in `f64` and clamped so the result stays
/// strictly inside (0, 1) after rounding to `f32`.
pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| {
        let s = 1.0 / (1.0 + (-(v as f64)).exp());
        (s as f32).clamp(f32::MIN_POSITIVE, BELOW_ONE)
    })
}

pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs.first().ok_or(Error::Empty("concat_channels"))?;
    let (h, w, _) = first.hwc("concat_channels")?;
    let mut channels = Vec::with_capacity(xs.len());
    for (i, t) in xs.iter().enumerate() {
        let (th, tw, tc) = t.hwc("concat_channels")?;
        if (th, tw) != (h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("input {i} is {th}×{tw}, expected {h}×{w}"),
            ));
        }
        channels.push(tc);
    }
    let total: usize = channels.iter().sum();
    let mut out = Vec::with_capacity(h * w * total);
    for px in 0..h * w {
        for (t, &c) in xs.iter().zip(&channels) {
            out.extend_from_slice(&t.data()[px * c..][..c]);
        }
    }
    Tensor::new(vec![h, w, total], out)
}

/// Per-channel spatial mean: `H×W×C → C`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = x.hwc("global_avg_pool")?;
    let mut sums = vec![0.0f64; c];
    for pixel in x.data().chunks_exact(c) {
        for (s, &v) in sums.iter_mut().zip(pixel) {
            *s += v as f64;
        }
    }
    let n = (h * w) as f64;
    Tensor::vector(sums.into_iter().map(|s| (s / n) as f32).collect())
}
