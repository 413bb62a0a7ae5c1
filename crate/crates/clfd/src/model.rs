//! Backbone feature extractor and masked linear classifier.
//!
//! Two architectures share one layer vocabulary: `Desk`, a 3-stage residual
//! CNN (channels 20/40/80, two blocks per stage, global average pool, 80
//! features) sized so a full task sequence trains in CPU-minutes, and
//! `ResNet18`, the standard 18-layer residual reference (3x3 stem, stages
//! 64/128/256/512). The same architecture walk drives both network
//! construction and the analytic FLOPs counter, so counted and executed
//! layers cannot drift apart.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array4, ArrayView1, Axis};
use rand::Rng;

use crate::cffs::Mask;
use crate::error::{Error, Result};
use crate::ffe::EncodedMap;
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, sgd_update, Conv2d, Linear,
};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"CLFDNET\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Desk,
    ResNet18,
}

impl Arch {
    pub fn id(&self) -> &'static str {
        match self {
            Arch::Desk => "desk",
            Arch::ResNet18 => "resnet18",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "desk" => Ok(Arch::Desk),
            "resnet18" => Ok(Arch::ResNet18),
            other => Err(Error::Config(format!(
                "unknown architecture `{other}` (expected desk|resnet18)"
            ))),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Arch::Desk => 80,
            Arch::ResNet18 => 512,
        }
    }

    /// (stem out channels, per-stage (channels, blocks, first stride)).
    fn plan(&self) -> (usize, Vec<(usize, usize, usize)>) {
        match self {
            Arch::Desk => (20, vec![(20, 2, 1), (40, 2, 2), (80, 2, 2)]),
            Arch::ResNet18 => (64, vec![(64, 2, 1), (128, 2, 2), (256, 2, 2), (512, 2, 2)]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackboneConfig {
    pub arch: Arch,
    /// (channels, height, width) the network is built for.
    pub input_shape: (usize, usize, usize),
    pub n_classes: usize,
}

impl BackboneConfig {
    pub fn new(arch: Arch, input_shape: (usize, usize, usize), n_classes: usize) -> Self {
        Self {
            arch,
            input_shape,
            n_classes,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim()
    }
}

/// Static description of one convolution for FLOPs accounting.
#[derive(Debug, Clone, Copy)]
pub struct ConvDesc {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDesc {
    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// 2 k^2 C_in C_out H_out W_out.
    pub fn flops(&self, h_in: usize, w_in: usize) -> u64 {
        let (oh, ow) = self.out_spatial(h_in, w_in);
        2 * (self.k * self.k * self.c_in * self.c_out * oh * ow) as u64
    }
}

/// All convolutions of the architecture, in forward order, with their input
/// spatial sizes for the given input shape.
fn conv_walk(config: &BackboneConfig) -> Vec<(ConvDesc, usize, usize)> {
    let (stem, stages) = config.arch.plan();
    let (_, mut h, mut w) = config.input_shape;
    let mut out = Vec::new();
    out.push((
        ConvDesc {
            c_in: config.input_shape.0,
            c_out: stem,
            k: 3,
            stride: 1,
            pad: 1,
        },
        h,
        w,
    ));
    let mut c_prev = stem;
    for (channels, blocks, first_stride) in stages {
        for b in 0..blocks {
            let stride = if b == 0 { first_stride } else { 1 };
            let c_in = if b == 0 { c_prev } else { channels };
            out.push((
                ConvDesc {
                    c_in,
                    c_out: channels,
                    k: 3,
                    stride,
                    pad: 1,
                },
                h,
                w,
            ));
            let (h2, w2) = (h / stride, w / stride);
            out.push((
                ConvDesc {
                    c_in: channels,
                    c_out: channels,
                    k: 3,
                    stride: 1,
                    pad: 1,
                },
                h2,
                w2,
            ));
            if stride != 1 || c_in != channels {
                out.push((
                    ConvDesc {
                        c_in,
                        c_out: channels,
                        k: 1,
                        stride,
                        pad: 0,
                    },
                    h,
                    w,
                ));
            }
            h = h2;
            w = w2;
        }
        c_prev = channels;
    }
    out
}

/// Analytic forward FLOPs for one example: convolutions as
/// 2 k^2 C_in C_out H_out W_out plus 2 fan_in fan_out for the linear head.
pub fn count_flops(config: &BackboneConfig) -> u64 {
    let convs: u64 = conv_walk(config)
        .iter()
        .map(|(desc, h, w)| desc.flops(*h, *w))
        .sum();
    convs + 2 * (config.feature_dim() * config.n_classes) as u64
}

#[derive(Debug, Clone)]
struct ResidualBlock<F: Scalar> {
    conv1: Conv2d<F>,
    conv2: Conv2d<F>,
    skip: Option<Conv2d<F>>,
}

struct BlockCache<F: Scalar> {
    x: Array4<F>,
    y1: Array4<F>,
    out: Array4<F>,
}

impl<F: Scalar> ResidualBlock<F> {
    fn new<R: Rng>(c_in: usize, c_out: usize, stride: usize, rng: &mut R) -> Self {
        let conv1 = Conv2d::new(c_in, c_out, 3, stride, 1, rng);
        let conv2 = Conv2d::new(c_out, c_out, 3, 1, 1, rng);
        let skip = if stride != 1 || c_in != c_out {
            Some(Conv2d::new(c_in, c_out, 1, stride, 0, rng))
        } else {
            None
        };
        Self { conv1, conv2, skip }
    }

    fn forward(&self, x: Array4<F>) -> BlockCache<F> {
        let mut y1 = self.conv1.forward(&x);
        relu(&mut y1);
        let mut out = self.conv2.forward(&y1);
        match &self.skip {
            Some(proj) => out += &proj.forward(&x),
            None => out += &x,
        }
        relu(&mut out);
        BlockCache { x, y1, out }
    }

    fn backward(&mut self, cache: &BlockCache<F>, mut dout: Array4<F>) -> Array4<F> {
        relu_backward(&cache.out, &mut dout);
        let mut dy1 = self.conv2.backward(&cache.y1, &dout);
        relu_backward(&cache.y1, &mut dy1);
        let mut dx = self.conv1.backward(&cache.x, &dy1);
        match &mut self.skip {
            Some(proj) => dx += &proj.backward(&cache.x, &dout),
            None => dx += &dout,
        }
        dx
    }
}

/// Feature extractor: stem convolution, residual blocks, global average
/// pool.
#[derive(Debug, Clone)]
pub struct Backbone<F: Scalar> {
    conv_in: Conv2d<F>,
    blocks: Vec<ResidualBlock<F>>,
    feature_dim: usize,
}

pub struct BackboneCache<F: Scalar> {
    input: Array4<F>,
    h0: Array4<F>,
    blocks: Vec<BlockCache<F>>,
    last_spatial: (usize, usize),
}

impl<F: Scalar> Backbone<F> {
    fn new<R: Rng>(config: &BackboneConfig, rng: &mut R) -> Self {
        let (stem, stages) = config.arch.plan();
        let conv_in = Conv2d::new(config.input_shape.0, stem, 3, 1, 1, rng);
        let mut blocks = Vec::new();
        let mut c_prev = stem;
        for (channels, n_blocks, first_stride) in stages {
            for b in 0..n_blocks {
                let stride = if b == 0 { first_stride } else { 1 };
                let c_in = if b == 0 { c_prev } else { channels };
                blocks.push(ResidualBlock::new(c_in, channels, stride, rng));
            }
            c_prev = channels;
        }
        Self {
            conv_in,
            blocks,
            feature_dim: config.arch.feature_dim(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Forward pass keeping the activations needed by `backward`.
    pub fn forward(&self, input: Array4<F>) -> (Array2<F>, BackboneCache<F>) {
        let mut h0 = self.conv_in.forward(&input);
        relu(&mut h0);
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = h0.clone();
        for block in &self.blocks {
            let cache = block.forward(h);
            h = cache.out.clone();
            caches.push(cache);
        }
        let (_, _, sh, sw) = h.dim();
        let features = global_avg_pool(&h);
        (
            features,
            BackboneCache {
                input,
                h0,
                blocks: caches,
                last_spatial: (sh, sw),
            },
        )
    }

    /// Returns the gradient with respect to the input (consumed by encoder
    /// training during the first task).
    pub fn backward_batch(&mut self, cache: &BackboneCache<F>, dfeatures: &Array2<F>) -> Array4<F> {
        let mut dh = global_avg_pool_backward(dfeatures.view(), cache.last_spatial);
        for (block, bcache) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            dh = block.backward(bcache, dh);
        }
        relu_backward(&cache.h0, &mut dh);
        self.conv_in.backward(&cache.input, &dh)
    }
}

/// Backbone plus linear head.
pub struct Network<F: Scalar> {
    pub config: BackboneConfig,
    pub backbone: Backbone<F>,
    pub head: Linear<F>,
}

impl<F: Scalar> Network<F> {
    pub fn new<R: Rng>(config: BackboneConfig, rng: &mut R) -> Self {
        let backbone = Backbone::new(&config, rng);
        let head = Linear::new(config.feature_dim(), config.n_classes, rng);
        Self {
            config,
            backbone,
            head,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    fn check_input(&self, dim: (usize, usize, usize)) -> Result<()> {
        if dim != self.config.input_shape {
            return Err(Error::ShapeMismatch {
                context: "backbone input",
                expected: format!("{:?}", self.config.input_shape),
                got: format!("{dim:?}"),
            });
        }
        Ok(())
    }

    /// Batch feature extraction with cache for training.
    pub fn extract_train(&self, batch: Array4<F>) -> Result<(Array2<F>, BackboneCache<F>)> {
        let (_, c, h, w) = batch.dim();
        self.check_input((c, h, w))?;
        Ok(self.backbone.forward(batch))
    }

    /// Deterministic evaluation-mode feature extraction.
    pub fn extract_batch(&self, batch: Array4<F>) -> Result<Array2<F>> {
        Ok(self.extract_train(batch)?.0)
    }

    /// Logits for already-masked features.
    pub fn head_forward(&self, masked_features: &Array2<F>) -> Array2<F> {
        self.head.forward(masked_features.view())
    }

    pub fn zero_grads(&mut self) {
        let zero = |c: &mut Conv2d<F>| {
            c.wgrad.fill(F::zero());
            c.bgrad.fill(F::zero());
        };
        zero(&mut self.backbone.conv_in);
        for b in &mut self.backbone.blocks {
            zero(&mut b.conv1);
            zero(&mut b.conv2);
            if let Some(s) = &mut b.skip {
                zero(s);
            }
        }
        self.head.wgrad.fill(F::zero());
        self.head.bgrad.fill(F::zero());
    }

    pub fn sgd_step(&mut self, lr: F, momentum: F, clip: Option<F>) {
        let step = |c: &mut Conv2d<F>| {
            sgd_update(
                c.weight.as_slice_mut().unwrap(),
                c.wgrad.as_slice_mut().unwrap(),
                c.wvel.as_slice_mut().unwrap(),
                lr,
                momentum,
                clip,
            );
            sgd_update(
                c.bias.as_slice_mut().unwrap(),
                c.bgrad.as_slice_mut().unwrap(),
                c.bvel.as_slice_mut().unwrap(),
                lr,
                momentum,
                clip,
            );
        };
        step(&mut self.backbone.conv_in);
        for b in &mut self.backbone.blocks {
            step(&mut b.conv1);
            step(&mut b.conv2);
            if let Some(s) = &mut b.skip {
                step(s);
            }
        }
        sgd_update(
            self.head.weight.as_slice_mut().unwrap(),
            self.head.wgrad.as_slice_mut().unwrap(),
            self.head.wvel.as_slice_mut().unwrap(),
            lr,
            momentum,
            clip,
        );
        sgd_update(
            self.head.bias.as_slice_mut().unwrap(),
            self.head.bgrad.as_slice_mut().unwrap(),
            self.head.bvel.as_slice_mut().unwrap(),
            lr,
            momentum,
            clip,
        );
    }

    /// Visit every parameter tensor as (name, values); fixed order.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &[F])) {
        self.visit(|name, slice, _| f(name, slice));
    }

    /// Visit every (parameter, gradient) pair mutably; fixed order.
    pub fn visit_params_grads_mut(&mut self, f: &mut dyn FnMut(&str, &mut [F], &mut [F])) {
        let conv = |name: String, c: &mut Conv2d<F>, f: &mut dyn FnMut(&str, &mut [F], &mut [F])| {
            f(
                &format!("{name}.weight"),
                c.weight.as_slice_mut().unwrap(),
                c.wgrad.as_slice_mut().unwrap(),
            );
            f(
                &format!("{name}.bias"),
                c.bias.as_slice_mut().unwrap(),
                c.bgrad.as_slice_mut().unwrap(),
            );
        };
        conv("conv_in".into(), &mut self.backbone.conv_in, f);
        for (i, b) in self.backbone.blocks.iter_mut().enumerate() {
            conv(format!("block{i}.conv1"), &mut b.conv1, f);
            conv(format!("block{i}.conv2"), &mut b.conv2, f);
            if let Some(s) = &mut b.skip {
                conv(format!("block{i}.skip"), s, f);
            }
        }
        f(
            "head.weight",
            self.head.weight.as_slice_mut().unwrap(),
            self.head.wgrad.as_slice_mut().unwrap(),
        );
        f(
            "head.bias",
            self.head.bias.as_slice_mut().unwrap(),
            self.head.bgrad.as_slice_mut().unwrap(),
        );
    }

    fn visit(&self, mut f: impl FnMut(&str, &[F], &[usize])) {
        let conv = |name: String, c: &Conv2d<F>, f: &mut dyn FnMut(&str, &[F], &[usize])| {
            f(
                &format!("{name}.weight"),
                c.weight.as_slice().unwrap(),
                &[c.weight.nrows(), c.weight.ncols()],
            );
            f(&format!("{name}.bias"), c.bias.as_slice().unwrap(), &[c.bias.len()]);
        };
        conv("conv_in".into(), &self.backbone.conv_in, &mut f);
        for (i, b) in self.backbone.blocks.iter().enumerate() {
            conv(format!("block{i}.conv1"), &b.conv1, &mut f);
            conv(format!("block{i}.conv2"), &b.conv2, &mut f);
            if let Some(s) = &b.skip {
                conv(format!("block{i}.skip"), s, &mut f);
            }
        }
        f(
            "head.weight",
            self.head.weight.as_slice().unwrap(),
            &[self.head.weight.nrows(), self.head.weight.ncols()],
        );
        f("head.bias", self.head.bias.as_slice().unwrap(), &[self.head.bias.len()]);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, slice, _| n += slice.len());
        n
    }

    /// Named parameter table: little-endian f32 payload with an
    /// architecture and shape manifest.
    pub fn to_writer<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let arch = self.config.arch.id().as_bytes();
        w.write_all(&(arch.len() as u32).to_le_bytes())?;
        w.write_all(arch)?;
        for d in [
            self.config.input_shape.0,
            self.config.input_shape.1,
            self.config.input_shape.2,
            self.config.n_classes,
        ] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut count = 0u32;
        self.visit(|_, _, _| count += 1);
        w.write_all(&count.to_le_bytes())?;
        let mut io_err = None;
        self.visit(|name, slice, dims| {
            if io_err.is_some() {
                return;
            }
            let mut write_one = || -> std::io::Result<()> {
                w.write_all(&(name.len() as u32).to_le_bytes())?;
                w.write_all(name.as_bytes())?;
                w.write_all(&(dims.len() as u32).to_le_bytes())?;
                for &d in dims {
                    w.write_all(&(d as u32).to_le_bytes())?;
                }
                for v in slice {
                    w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
                }
                Ok(())
            };
            if let Err(e) = write_one() {
                io_err = Some(e);
            }
        });
        match io_err {
            Some(e) => Err(e.into()),
            None => Ok(()),
        }
    }

    /// Restore parameters from a checkpoint written by `to_writer`. The
    /// network must already be built with the same architecture manifest.
    pub fn load_into<R: Read>(&mut self, mut r: R) -> Result<()> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("network checkpoint: bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != VERSION {
            return Err(Error::Format("network checkpoint: bad version".into()));
        }
        r.read_exact(&mut b4)?;
        let arch_len = u32::from_le_bytes(b4) as usize;
        let mut arch_bytes = vec![0u8; arch_len];
        r.read_exact(&mut arch_bytes)?;
        let arch = String::from_utf8(arch_bytes)
            .map_err(|e| Error::Format(format!("network checkpoint: {e}")))?;
        if Arch::from_id(&arch)? != self.config.arch {
            return Err(Error::Format(format!(
                "network checkpoint: architecture {arch} does not match {}",
                self.config.arch.id()
            )));
        }
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            r.read_exact(&mut b4)?;
            *d = u32::from_le_bytes(b4) as usize;
        }
        if (dims[0], dims[1], dims[2]) != self.config.input_shape
            || dims[3] != self.config.n_classes
        {
            return Err(Error::Format("network checkpoint: shape manifest mismatch".into()));
        }
        r.read_exact(&mut b4)?;
        let count = u32::from_le_bytes(b4) as usize;

        let mut table: Vec<(String, Vec<f32>)> = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut b4)?;
            let name_len = u32::from_le_bytes(b4) as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| Error::Format(format!("network checkpoint: {e}")))?;
            r.read_exact(&mut b4)?;
            let ndim = u32::from_le_bytes(b4) as usize;
            let mut total = 1usize;
            for _ in 0..ndim {
                r.read_exact(&mut b4)?;
                total *= u32::from_le_bytes(b4) as usize;
            }
            let mut values = Vec::with_capacity(total);
            for _ in 0..total {
                r.read_exact(&mut b4)?;
                values.push(f32::from_le_bytes(b4));
            }
            table.push((name, values));
        }

        let mut idx = 0usize;
        let mut err: Option<Error> = None;
        self.visit_params_grads_mut(&mut |name, slice, _| {
            if err.is_some() {
                return;
            }
            match table.get(idx) {
                Some((tname, values)) if tname == name && values.len() == slice.len() => {
                    for (dst, src) in slice.iter_mut().zip(values.iter()) {
                        *dst = F::real(*src as f64);
                    }
                }
                Some((tname, values)) => {
                    err = Some(Error::Format(format!(
                        "network checkpoint: expected {name} ({}), found {tname} ({})",
                        slice.len(),
                        values.len()
                    )));
                }
                None => err = Some(Error::Format("network checkpoint: missing parameters".into())),
            }
            idx += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if idx != table.len() {
            return Err(Error::Format("network checkpoint: extra parameters".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.to_writer(std::io::BufWriter::new(file))
    }
}

/// Evaluation-mode feature extraction for a single encoded map.
pub fn extract<F: Scalar>(map: &EncodedMap<F>, network: &Network<F>) -> Result<Array1<F>> {
    let dim = map.values().dim();
    let mut batch = Array4::zeros((1, dim.0, dim.1, dim.2));
    batch.index_axis_mut(Axis(0), 0).assign(&map.values());
    let features = network.extract_batch(batch)?;
    Ok(features.index_axis(Axis(0), 0).to_owned())
}

/// Masked linear head: logits = W (features * mask) + b.
pub fn classify<F: Scalar>(
    features: ArrayView1<F>,
    mask: &Mask,
    network: &Network<F>,
) -> Result<Array1<F>> {
    if mask.len() != features.len() {
        return Err(Error::ShapeMismatch {
            context: "classify mask",
            expected: format!("{}", features.len()),
            got: format!("{}", mask.len()),
        });
    }
    let masked = Array1::from_shape_fn(features.len(), |j| {
        if mask[j] {
            features[j]
        } else {
            F::zero()
        }
    });
    let mut logits = network.head.weight.dot(&masked);
    logits += &network.head.bias;
    Ok(logits)
}

/// Apply a per-sample mask matrix to a feature batch.
pub fn apply_masks<F: Scalar>(features: &Array2<F>, masks: &[Mask]) -> Array2<F> {
    let mut out = features.clone();
    for (mut row, mask) in out.outer_iter_mut().zip(masks.iter()) {
        for (v, &keep) in row.iter_mut().zip(mask.iter()) {
            if !keep {
                *v = F::zero();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn desk_config() -> BackboneConfig {
        BackboneConfig::new(Arch::Desk, (3, 16, 16), 10)
    }

    #[test]
    fn zero_input_zero_bias_network_gives_zero_features() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let net = Network::<f32>::new(desk_config(), &mut rng);
        let map = EncodedMap::new(Array3::zeros((3, 16, 16)), (32, 32)).unwrap();
        let features = extract(&map, &net).unwrap();
        assert!(features.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extraction_is_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let net = Network::<f32>::new(desk_config(), &mut rng);
        let values = Array3::from_shape_fn((3, 16, 16), |_| rng.random_range(-1.0f32..1.0));
        let map = EncodedMap::new(values, (32, 32)).unwrap();
        let a = extract(&map, &net).unwrap();
        let b = extract(&map, &net).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn feature_dims_match_architecture() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let desk = Network::<f32>::new(desk_config(), &mut rng);
        assert_eq!(desk.feature_dim(), 80);
        let map = EncodedMap::new(Array3::zeros((3, 16, 16)), (32, 32)).unwrap();
        assert_eq!(extract(&map, &desk).unwrap().len(), 80);
        assert_eq!(Arch::ResNet18.feature_dim(), 512);
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let net = Network::<f32>::new(desk_config(), &mut rng);
        let map = EncodedMap::new(Array3::zeros((3, 8, 8)), (16, 16)).unwrap();
        assert!(extract(&map, &net).is_err());
    }

    #[test]
    fn classify_mask_behaviour() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut net = Network::<f32>::new(desk_config(), &mut rng);
        let features = Array1::from_shape_fn(80, |_| rng.random_range(-1.0f32..1.0));

        let all = vec![true; 80];
        let plain = classify(features.view(), &all, &net).unwrap();
        let direct = net.head.weight.dot(&features) + &net.head.bias;
        assert_eq!(plain, direct);

        let none = vec![false; 80];
        let only_bias = classify(features.view(), &none, &net).unwrap();
        assert_eq!(only_bias, net.head.bias);

        // Zeroing a column makes that feature's mask bit irrelevant.
        net.head.weight.column_mut(7).fill(0.0);
        let mut without7 = all.clone();
        without7[7] = false;
        let a = classify(features.view(), &all, &net).unwrap();
        let b = classify(features.view(), &without7, &net).unwrap();
        assert_eq!(a, b);

        assert!(classify(features.view(), &vec![true; 79], &net).is_err());
    }

    #[test]
    fn classify_is_linear_in_features() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let net = Network::<f64>::new(desk_config(), &mut rng);
        let f1 = Array1::from_shape_fn(80, |_| rng.random_range(-1.0..1.0));
        let f2 = Array1::from_shape_fn(80, |_| rng.random_range(-1.0..1.0));
        let mask: Mask = (0..80).map(|j| j % 3 != 0).collect();

        let bias = &net.head.bias;
        let y1 = classify(f1.view(), &mask, &net).unwrap() - bias;
        let y2 = classify(f2.view(), &mask, &net).unwrap() - bias;
        let sum = &f1 + &f2;
        let y12 = classify(sum.view(), &mask, &net).unwrap() - bias;
        for ((a, b), c) in y1.iter().zip(y2.iter()).zip(y12.iter()) {
            assert!((a + b - c).abs() < 1e-9);
        }
    }

    #[test]
    fn flops_hand_values() {
        let conv = ConvDesc {
            c_in: 3,
            c_out: 16,
            k: 3,
            stride: 1,
            pad: 1,
        };
        assert_eq!(conv.flops(32, 32), 884_736);
        assert_eq!(conv.flops(16, 16), 221_184);
        assert_eq!(conv.flops(32, 32) / conv.flops(16, 16), 4);
    }

    #[test]
    fn flops_spatial_homogeneity_for_conv_stages() {
        // Conv part scales exactly with area; only the head is fixed.
        for arch in [Arch::Desk, Arch::ResNet18] {
            let full = BackboneConfig::new(arch, (3, 32, 32), 10);
            let half = BackboneConfig::new(arch, (3, 16, 16), 10);
            let head = 2 * (arch.feature_dim() * 10) as u64;
            let conv_full = count_flops(&full) - head;
            let conv_half = count_flops(&half) - head;
            assert_eq!(conv_full, 4 * conv_half);
        }
    }

    #[test]
    fn resnet18_flops_ratio_near_four() {
        let full = BackboneConfig::new(Arch::ResNet18, (3, 32, 32), 10);
        let half = BackboneConfig::new(Arch::ResNet18, (3, 16, 16), 10);
        let ratio = count_flops(&full) as f64 / count_flops(&half) as f64;
        assert!((ratio - 3.96).abs() < 0.15, "ratio {ratio}");
    }

    #[test]
    fn checkpoint_roundtrip_restores_parameters() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let net = Network::<f32>::new(desk_config(), &mut rng);
        let mut bytes = Vec::new();
        net.to_writer(&mut bytes).unwrap();

        let mut other = Network::<f32>::new(desk_config(), &mut rng);
        other.load_into(bytes.as_slice()).unwrap();

        let values = Array3::from_shape_fn((3, 16, 16), |_| rng.random_range(-1.0f32..1.0));
        let map = EncodedMap::new(values, (32, 32)).unwrap();
        assert_eq!(extract(&map, &net).unwrap(), extract(&map, &other).unwrap());

        let wrong = Network::<f32>::new(BackboneConfig::new(Arch::Desk, (3, 8, 8), 10), &mut rng);
        let mut wrong = wrong;
        assert!(wrong.load_into(bytes.as_slice()).is_err());
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let config = BackboneConfig::new(Arch::Desk, (3, 8, 8), 4);
        let mut net = Network::<f64>::new(config, &mut rng);
        let batch = Array4::from_shape_fn((2, 3, 8, 8), |_| rng.random_range(-1.0..1.0));
        let labels = [1usize, 3];

        // Loss: mean cross-entropy on the batch, all-ones mask.
        let loss_of = |net: &Network<f64>| -> f64 {
            let feats = net.extract_batch(batch.clone()).unwrap();
            let logits = net.head_forward(&feats);
            let mut total = 0.0;
            for (row, &label) in logits.outer_iter().zip(labels.iter()) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let logsum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                total += logsum - row[label];
            }
            total / labels.len() as f64
        };

        net.zero_grads();
        let (feats, cache) = net.extract_train(batch.clone()).unwrap();
        let logits = net.head_forward(&feats);
        // d loss / d logits = (softmax - onehot) / batch.
        let mut dlogits = Array2::zeros(logits.dim());
        for (i, (row, &label)) in logits.outer_iter().zip(labels.iter()).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                dlogits[[i, j]] = (e / sum - if j == label { 1.0 } else { 0.0 }) / 2.0;
            }
        }
        let dfeats = net.head.backward(feats.view(), dlogits.view());
        net.backbone.backward_batch(&cache, &dfeats);

        // Sample 20 parameters across the network and compare.
        let mut flat: Vec<(String, usize, f64)> = Vec::new();
        net.visit_params_grads_mut(&mut |name, _vals, grads| {
            for (i, g) in grads.iter().enumerate() {
                flat.push((name.to_string(), i, *g));
            }
        });
        let mut pick = ChaCha12Rng::seed_from_u64(99);
        for _ in 0..20 {
            let target = pick.random_range(0..flat.len());
            let (ref name, offset, analytic) = flat[target];
            let h = 1e-3;
            let mut probe = |delta: f64| -> f64 {
                net.visit_params_grads_mut(&mut |n, vals, _| {
                    if n == name {
                        vals[offset] += delta;
                    }
                });
                let l = loss_of(&net);
                net.visit_params_grads_mut(&mut |n, vals, _| {
                    if n == name {
                        vals[offset] -= delta;
                    }
                });
                l
            };
            let numeric = (probe(h) - probe(-h)) / (2.0 * h);
            let denom = numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(
                (analytic - numeric).abs() / denom < 1e-2,
                "{name}[{offset}]: analytic {analytic} vs numeric {numeric}"
            );
        }
    }
}
