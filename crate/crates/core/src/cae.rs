//! Inception-like convolutional autoencoder: weight binding and inference.
//!
//! Stage layout for a `32×32×C` input:
//!
//! | stage  | op                          | output        |
//! |--------|-----------------------------|---------------|
//! | enc1   | Inception(8) + maxpool 2×2  | 16×16×32      |
//! | enc2   | Inception(16) + maxpool 2×2 | 8×8×64        |
//! | enc3   | Inception(32) + maxpool 2×2 | 4×4×128       |
//! | dec1   | Inception(32) + upsample 2× | 8×8×128       |
//! | dec2   | Inception(16) + upsample 2× | 16×16×64      |
//! | dec3   | Inception(8) + upsample 2×  | 32×32×32      |
//! | final  | conv(C) + sigmoid           | 32×32×C       |
//!
//! Each Inception(n) layer concatenates four branches of width `n`, in this
//! order: 1×1 conv, 3×3 conv, 5×5 conv, and 3×3 same-padded max pooling
//! followed by a 1×1 conv. Every branch conv is followed by batch
//! normalization and a leaky ReLU. The representation is the per-channel
//! mean of the `4×4×128` bottleneck.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::storage::WeightContainer;
use crate::tensor::{
    batchnorm_infer, concat_channels, conv2d, global_avg_pool, leaky_relu, maxpool2,
    maxpool_same, sigmoid, upsample2, BatchNormParams, ConvParams, Tensor,
};

pub const INPUT_SIZE: usize = 32;
pub const ENCODER_WIDTHS: [usize; 3] = [8, 16, 32];
pub const DECODER_WIDTHS: [usize; 3] = [32, 16, 8];
pub const REPRESENTATION_DIM: usize = 4 * ENCODER_WIDTHS[2];

pub const DEFAULT_ALPHA: f32 = 0.1;
pub const DEFAULT_BN_EPSILON: f32 = 1e-3;

pub const META_ALPHA: &str = "meta.alpha";
pub const META_BN_EPSILON: &str = "meta.bn_epsilon";
pub const META_N_CHANNELS: &str = "meta.n_channels";
pub const FINAL_CONV_W: &str = "final.conv.w";
pub const FINAL_CONV_B: &str = "final.conv.b";

const ENCODER_STAGES: [&str; 3] = ["enc1", "enc2", "enc3"];
const DECODER_STAGES: [&str; 3] = ["dec1", "dec2", "dec3"];
const BRANCH_PARAMS: [&str; 6] = ["conv.w", "conv.b", "bn.gamma", "bn.beta", "bn.mean", "bn.var"];

/// The four parallel paths of an Inception-like layer, in concatenation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Conv1x1,
    Conv3x3,
    Conv5x5,
    Pool,
}

impl Branch {
    pub const ALL: [Branch; 4] = [Branch::Conv1x1, Branch::Conv3x3, Branch::Conv5x5, Branch::Pool];

    pub fn tag(self) -> &'static str {
        match self {
            Branch::Conv1x1 => "b1x1",
            Branch::Conv3x3 => "b3x3",
            Branch::Conv5x5 => "b5x5",
            Branch::Pool => "bpool",
        }
    }

    pub fn kernel_size(self) -> usize {
        match self {
            Branch::Conv1x1 | Branch::Pool => 1,
            Branch::Conv3x3 => 3,
            Branch::Conv5x5 => 5,
        }
    }
}

pub fn param_name(stage: &str, branch: Branch, param: &str) -> String {
    format!("{stage}.{}.{param}", branch.tag())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    n_channels: usize,
}

impl ModelSpec {
    pub fn new(n_channels: usize) -> Result<Self> {
        if n_channels != 1 && n_channels != 3 {
            return Err(Error::InvalidParam(format!(
                "n_channels must be 1 or 3, got {n_channels}"
            )));
        }
        Ok(ModelSpec { n_channels })
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn input_dims(&self) -> [usize; 3] {
        [INPUT_SIZE, INPUT_SIZE, self.n_channels]
    }

    /// Output dims of each of the seven stages, encoder first.
    pub fn stage_shapes(&self) -> [[usize; 3]; 7] {
        let s = INPUT_SIZE;
        [
            [s / 2, s / 2, 4 * ENCODER_WIDTHS[0]],
            [s / 4, s / 4, 4 * ENCODER_WIDTHS[1]],
            [s / 8, s / 8, 4 * ENCODER_WIDTHS[2]],
            [s / 4, s / 4, 4 * DECODER_WIDTHS[0]],
            [s / 2, s / 2, 4 * DECODER_WIDTHS[1]],
            [s, s, 4 * DECODER_WIDTHS[2]],
            [s, s, self.n_channels],
        ]
    }

    pub fn stage_names() -> [&'static str; 7] {
        let [e1, e2, e3] = ENCODER_STAGES;
        let [d1, d2, d3] = DECODER_STAGES;
        [e1, e2, e3, d1, d2, d3, "final"]
    }

    /// `(stage name, input channels, branch width)` for the six Inception layers.
    fn inception_layout(&self) -> [(&'static str, usize, usize); 6] {
        let enc_out = ENCODER_WIDTHS.map(|n| 4 * n);
        let dec_out = DECODER_WIDTHS.map(|n| 4 * n);
        [
            (ENCODER_STAGES[0], self.n_channels, ENCODER_WIDTHS[0]),
            (ENCODER_STAGES[1], enc_out[0], ENCODER_WIDTHS[1]),
            (ENCODER_STAGES[2], enc_out[1], ENCODER_WIDTHS[2]),
            (DECODER_STAGES[0], enc_out[2], DECODER_WIDTHS[0]),
            (DECODER_STAGES[1], dec_out[0], DECODER_WIDTHS[1]),
            (DECODER_STAGES[2], dec_out[1], DECODER_WIDTHS[2]),
        ]
    }

    /// Every entry name a weight container must hold for this spec.
    pub fn required_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (stage, _, _) in self.inception_layout() {
            for branch in Branch::ALL {
                for p in BRANCH_PARAMS {
                    names.push(param_name(stage, branch, p));
                }
            }
        }
        names.extend([FINAL_CONV_W, FINAL_CONV_B, META_BN_EPSILON, META_ALPHA, META_N_CHANNELS].map(String::from));
        names
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams {
    pub conv: ConvParams,
    pub bn: BatchNormParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InceptionParams {
    /// Indexed like [`Branch::ALL`].
    pub branches: [BranchParams; 4],
}

impl InceptionParams {
    pub fn width(&self) -> usize {
        self.branches[0].conv.out_channels()
    }
}

pub fn inception_layer(x: &Tensor, p: &InceptionParams, alpha: f32) -> Result<Tensor> {
    let n = p.width();
    if let Some(b) = p.branches.iter().find(|b| b.conv.out_channels() != n) {
        return Err(Error::shape(
            "inception_layer",
            format!("branch widths differ: {} vs {n}", b.conv.out_channels()),
        ));
    }
    let pooled = maxpool_same(x)?;
    let outs = Branch::ALL
        .iter()
        .zip(&p.branches)
        .map(|(&branch, bp)| {
            let input = if branch == Branch::Pool { &pooled } else { x };
            let y = conv2d(input, &bp.conv)?;
            leaky_relu(&batchnorm_infer(&y, &bp.bn)?, alpha)
        })
        .collect::<Result<Vec<_>>>()?;
    concat_channels(&outs.iter().collect::<Vec<_>>())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    alpha: f32,
    encoder: Vec<InceptionParams>,
    decoder: Vec<InceptionParams>,
    final_conv: ConvParams,
}

fn bound<'a>(w: &'a WeightContainer, name: &str, dims: &[usize]) -> Result<&'a Tensor> {
    let t = w.require(name)?;
    if t.dims() != dims {
        return Err(Error::shape(
            "build_model",
            format!("`{name}` has dims {:?}, expected {dims:?}", t.dims()),
        ));
    }
    if !t.all_finite() {
        return Err(Error::NonFinite(format!("weight `{name}`")));
    }
    Ok(t)
}

fn bind_inception(
    w: &WeightContainer,
    stage: &str,
    cin: usize,
    n: usize,
    epsilon: f32,
) -> Result<InceptionParams> {
    let bind = |branch: Branch| -> Result<BranchParams> {
        let name = |p: &str| param_name(stage, branch, p);
        let k = branch.kernel_size();
        let vec = |p: &str| bound(w, &name(p), &[n]).cloned();
        let conv = ConvParams::new(bound(w, &name("conv.w"), &[k, k, cin, n])?.clone(), vec("conv.b")?)?;
        let bn = BatchNormParams {
            gamma: vec("bn.gamma")?,
            beta: vec("bn.beta")?,
            moving_mean: vec("bn.mean")?,
            moving_var: vec("bn.var")?,
            epsilon,
        };
        bn.validate()?;
        Ok(BranchParams { conv, bn })
    };
    let [a, b, c, d] = Branch::ALL;
    Ok(InceptionParams {
        branches: [bind(a)?, bind(b)?, bind(c)?, bind(d)?],
    })
}

/// Bind and validate every parameter required by `spec`.
pub fn build_model(spec: ModelSpec, weights: &WeightContainer) -> Result<Model> {
    let missing = weights.missing(spec.required_names().iter().map(String::as_str));
    if let Some(first) = missing.first() {
        return Err(Error::MissingWeight(if missing.len() == 1 {
            first.clone()
        } else {
            format!("{first}` and {} more: `{}", missing.len() - 1, missing[1..].join("`, `"))
        }));
    }

    let channels = weights.scalar(META_N_CHANNELS)?;
    if channels != spec.n_channels() as f32 {
        return Err(Error::shape(
            "build_model",
            format!("weights are for {channels} channels, spec has {}", spec.n_channels()),
        ));
    }
    let alpha = weights.scalar(META_ALPHA)?;
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidParam(format!("{META_ALPHA} = {alpha} outside [0, 1)")));
    }
    let epsilon = weights.scalar(META_BN_EPSILON)?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidParam(format!("{META_BN_EPSILON} = {epsilon} must be positive")));
    }

    let layers = spec
        .inception_layout()
        .iter()
        .map(|&(stage, cin, n)| bind_inception(weights, stage, cin, n, epsilon))
        .collect::<Result<Vec<_>>>()?;
    let (encoder, decoder) = {
        let mut it = layers.into_iter();
        (it.by_ref().take(3).collect(), it.collect())
    };

    let kernel = weights.require(FINAL_CONV_W)?;
    let c = spec.n_channels();
    let last_width = 4 * DECODER_WIDTHS[2];
    let (kh, kw) = match *kernel.dims() {
        [kh, kw, cin, cout] if cin == last_width && cout == c => (kh, kw),
        _ => {
            return Err(Error::shape(
                "build_model",
                format!(
                    "`{FINAL_CONV_W}` has dims {:?}, expected Kh×Kw×{last_width}×{c}",
                    kernel.dims()
                ),
            ))
        }
    };
    let final_conv = ConvParams::new(
        bound(weights, FINAL_CONV_W, &[kh, kw, last_width, c])?.clone(),
        bound(weights, FINAL_CONV_B, &[c])?.clone(),
    )?;

    Ok(Model {
        spec,
        alpha,
        encoder,
        decoder,
        final_conv,
    })
}

fn check_stage(name: &str, t: &Tensor, want: &[usize; 3]) -> Result<()> {
    if t.dims() != want {
        return Err(Error::shape(
            "forward",
            format!("stage {name} produced {:?}, expected {want:?}", t.dims()),
        ));
    }
    Ok(())
}

impl Model {
    pub fn spec(&self) -> ModelSpec {
        self.spec
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    pub fn encoder(&self) -> &[InceptionParams] {
        &self.encoder
    }

    pub fn decoder(&self) -> &[InceptionParams] {
        &self.decoder
    }

    pub fn final_conv(&self) -> &ConvParams {
        &self.final_conv
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        let want = self.spec.input_dims();
        if image.dims() != want {
            return Err(Error::shape(
                "forward",
                format!("stage input has dims {:?}, expected {want:?}", image.dims()),
            ));
        }
        if !image.all_finite() {
            return Err(Error::NonFinite("input image".into()));
        }
        Ok(())
    }

    /// Run the encoder, returning the bottleneck feature map.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        self.check_input(image)?;
        let shapes = self.spec.stage_shapes();
        let mut x = image.clone();
        for (i, layer) in self.encoder.iter().enumerate() {
            x = maxpool2(&inception_layer(&x, layer, self.alpha)?)?;
            check_stage(ENCODER_STAGES[i], &x, &shapes[i])?;
        }
        Ok(x)
    }

    /// Output of every stage, encoder first; the last entry is the
    /// reconstruction.
    pub fn forward_stages(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(image)?;
        let shapes = self.spec.stage_shapes();
        let names = ModelSpec::stage_names();
        let mut stages = Vec::with_capacity(7);
        let mut x = image.clone();
        for (i, layer) in self.encoder.iter().enumerate() {
            x = maxpool2(&inception_layer(&x, layer, self.alpha)?)?;
            check_stage(names[i], &x, &shapes[i])?;
            stages.push(x.clone());
        }
        for (i, layer) in self.decoder.iter().enumerate() {
            x = upsample2(&inception_layer(&x, layer, self.alpha)?)?;
            check_stage(names[3 + i], &x, &shapes[3 + i])?;
            stages.push(x.clone());
        }
        x = sigmoid(&conv2d(&x, &self.final_conv)?);
        check_stage(names[6], &x, &shapes[6])?;
        stages.push(x);
        Ok(stages)
    }

    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.forward_stages(image)?.pop().expect("seven stages"))
    }

    /// 128-d representation: global average of the bottleneck. The decoder is
    /// not run.
    pub fn extract_representation(&self, image: &Tensor) -> Result<Tensor> {
        global_avg_pool(&self.encode(image)?)
    }

    /// Mean squared difference between `image` and its reconstruction.
    pub fn reconstruction_error(&self, image: &Tensor) -> Result<f64> {
        let out = self.forward(image)?;
        Ok(mean_squared_error(image.data(), out.data()))
    }

    fn check_batch(&self, images: &Tensor) -> Result<()> {
        let want = self.spec.input_dims();
        if images.rank() != 4 || images.dims()[1..] != want {
            return Err(Error::shape(
                "extract_batch",
                format!("stage input: images have dims {:?}, expected N×{want:?}", images.dims()),
            ));
        }
        Ok(())
    }

    /// `N×32×32×C → N×128`, rows in input order.
    pub fn extract_batch(&self, images: &Tensor) -> Result<Tensor> {
        self.check_batch(images)?;
        let rows = (0..images.outer_len())
            .into_par_iter()
            .map(|i| Ok(self.extract_representation(&images.slab(i)?)?.into_data()))
            .collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&rows)
    }

    /// Per-image reconstruction error of an `N×32×32×C` batch.
    pub fn reconstruction_errors(&self, images: &Tensor) -> Result<Vec<f64>> {
        self.check_batch(images)?;
        (0..images.outer_len())
            .into_par_iter()
            .map(|i| self.reconstruction_error(&images.slab(i)?))
            .collect()
    }
}

pub fn mean_squared_error(a: &[f32], b: &[f32]) -> f64 {
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    sum / a.len() as f64
}

fn meta(w: &mut WeightContainer, spec: &ModelSpec) {
    w.set(META_N_CHANNELS, Tensor::vector(vec![spec.n_channels() as f32]).unwrap());
    w.set(META_ALPHA, Tensor::vector(vec![DEFAULT_ALPHA]).unwrap());
    w.set(META_BN_EPSILON, Tensor::vector(vec![DEFAULT_BN_EPSILON]).unwrap());
}

/// Kernel side length used for the final reconstruction conv by the
/// initializers in this module.
pub const FINAL_KERNEL: usize = 3;

/// He-style random weights and lightly perturbed batch-norm statistics. Meant
/// for tests and benchmarks; real weights come from training.
pub fn random_weights(spec: &ModelSpec, seed: u64) -> WeightContainer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |n: usize, scale: f32, offset: f32| -> Vec<f32> {
        (0..n).map(|_| offset + scale * rng.random_range(-1.0f32..1.0)).collect()
    };
    let mut w = WeightContainer::new();
    for (stage, cin, n) in spec.inception_layout() {
        for branch in Branch::ALL {
            let k = branch.kernel_size();
            let fan_in = (k * k * cin) as f32;
            let limit = (6.0 / fan_in).sqrt();
            let name = |p: &str| param_name(stage, branch, p);
            let t = |dims: Vec<usize>, data| Tensor::new(dims, data).unwrap();
            w.set(name("conv.w"), t(vec![k, k, cin, n], uniform(k * k * cin * n, limit, 0.0)));
            w.set(name("conv.b"), t(vec![n], uniform(n, 0.05, 0.0)));
            w.set(name("bn.gamma"), t(vec![n], uniform(n, 0.1, 1.0)));
            w.set(name("bn.beta"), t(vec![n], uniform(n, 0.1, 0.0)));
            w.set(name("bn.mean"), t(vec![n], uniform(n, 0.1, 0.0)));
            w.set(name("bn.var"), t(vec![n], uniform(n, 0.2, 1.0)));
        }
    }
    let (c, k, cin) = (spec.n_channels(), FINAL_KERNEL, 4 * DECODER_WIDTHS[2]);
    let limit = (6.0 / (k * k * cin) as f32).sqrt();
    w.set(FINAL_CONV_W, Tensor::new(vec![k, k, cin, c], uniform(k * k * cin * c, limit, 0.0)).unwrap());
    w.set(FINAL_CONV_B, Tensor::new(vec![c], uniform(c, 0.05, 0.0)).unwrap());
    meta(&mut w, spec);
    w
}

/// All kernels, biases, betas and means zero; gammas and variances one.
pub fn zeroed_weights(spec: &ModelSpec) -> WeightContainer {
    let mut w = random_weights(spec, 0);
    let names: Vec<String> = w.names().map(String::from).collect();
    for name in names {
        if name.starts_with("meta.") {
            continue;
        }
        let t = w.get(&name).unwrap();
        let fill = if name.ends_with("bn.gamma") || name.ends_with("bn.var") { 1.0 } else { 0.0 };
        let z = Tensor::filled(t.dims().to_vec(), fill).unwrap();
        w.set(name, z);
    }
    w
}
