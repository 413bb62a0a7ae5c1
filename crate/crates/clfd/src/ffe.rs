//! Frequency-domain feature encoder: three learnable 1x1 merges over the
//! twelve per-channel Haar subbands of an RGB image, producing a 3-channel
//! map at half resolution. The encoder trains during the first task only and
//! is frozen afterwards; the freeze is enforced here by the update guard.
//!
//! Plane ordering is fixed for weights, gradients and serialization:
//! `w_low[c]` multiplies the ll band of channel `c`, `w_high[3c + b]` the
//! band `b in {lh, hl, hh}` of channel `c`, and `w_global[4c + b]` the band
//! `b in {ll, lh, hl, hh}` of channel `c`.

use ndarray::{Array2, Array3, ArrayView3, Axis};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::dwt::{dwt_image, SubbandSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const LOW_COEFFS: usize = 3;
pub const HIGH_COEFFS: usize = 9;
pub const GLOBAL_COEFFS: usize = 12;

/// Serialized size: 27 little-endian f32 values plus one frozen byte.
pub const WEIGHT_BYTES: usize = 4 * (LOW_COEFFS + HIGH_COEFFS + GLOBAL_COEFFS + 3) + 1;

/// Coefficients and biases of the three 1x1 merges.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights<F: Scalar> {
    pub w_low: [F; LOW_COEFFS],
    pub b_low: F,
    pub w_high: [F; HIGH_COEFFS],
    pub b_high: F,
    pub w_global: [F; GLOBAL_COEFFS],
    pub b_global: F,
    frozen: bool,
}

/// Gradient of a scalar loss with respect to every encoder parameter.
#[derive(Debug, Clone)]
pub struct EncoderGrads<F: Scalar> {
    pub w_low: [F; LOW_COEFFS],
    pub b_low: F,
    pub w_high: [F; HIGH_COEFFS],
    pub b_high: F,
    pub w_global: [F; GLOBAL_COEFFS],
    pub b_global: F,
}

impl<F: Scalar> EncoderGrads<F> {
    pub fn zeros() -> Self {
        Self {
            w_low: [F::zero(); LOW_COEFFS],
            b_low: F::zero(),
            w_high: [F::zero(); HIGH_COEFFS],
            b_high: F::zero(),
            w_global: [F::zero(); GLOBAL_COEFFS],
            b_global: F::zero(),
        }
    }

    pub fn scale(&mut self, s: F) {
        for v in self.w_low.iter_mut() {
            *v *= s;
        }
        for v in self.w_high.iter_mut() {
            *v *= s;
        }
        for v in self.w_global.iter_mut() {
            *v *= s;
        }
        self.b_low *= s;
        self.b_high *= s;
        self.b_global *= s;
    }
}

impl<F: Scalar> EncoderWeights<F> {
    /// Uniform init in +-1/sqrt(fan_in) per merge, biases zero.
    pub fn init<R: Rng>(rng: &mut R) -> Self {
        let mut draw = |fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            F::real(rng.random_range(-bound..bound))
        };
        let mut w_low = [F::zero(); LOW_COEFFS];
        for v in w_low.iter_mut() {
            *v = draw(LOW_COEFFS);
        }
        let mut w_high = [F::zero(); HIGH_COEFFS];
        for v in w_high.iter_mut() {
            *v = draw(HIGH_COEFFS);
        }
        let mut w_global = [F::zero(); GLOBAL_COEFFS];
        for v in w_global.iter_mut() {
            *v = draw(GLOBAL_COEFFS);
        }
        Self {
            w_low,
            b_low: F::zero(),
            w_high,
            b_high: F::zero(),
            w_global,
            b_global: F::zero(),
            frozen: false,
        }
    }

    pub fn zeros() -> Self {
        Self {
            w_low: [F::zero(); LOW_COEFFS],
            b_low: F::zero(),
            w_high: [F::zero(); HIGH_COEFFS],
            b_high: F::zero(),
            w_global: [F::zero(); GLOBAL_COEFFS],
            b_global: F::zero(),
            frozen: false,
        }
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    /// Marks the weights immutable. Idempotent.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// One SGD step. The guard: frozen weights are left bit-identical.
    pub fn apply_update(&mut self, grads: &EncoderGrads<F>, lr: F, use_bias: bool) {
        if self.frozen {
            return;
        }
        for (w, g) in self.w_low.iter_mut().zip(grads.w_low.iter()) {
            *w -= lr * *g;
        }
        for (w, g) in self.w_high.iter_mut().zip(grads.w_high.iter()) {
            *w -= lr * *g;
        }
        for (w, g) in self.w_global.iter_mut().zip(grads.w_global.iter()) {
            *w -= lr * *g;
        }
        if use_bias {
            self.b_low -= lr * grads.b_low;
            self.b_high -= lr * grads.b_high;
            self.b_global -= lr * grads.b_global;
        }
    }

    /// Fixed order: w_low[3], bias_low, w_high[9], bias_high, w_global[12],
    /// bias_global as little-endian f32, then one frozen byte.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(WEIGHT_BYTES);
        {
            let mut push = |v: F| out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            for v in self.w_low {
                push(v);
            }
            push(self.b_low);
            for v in self.w_high {
                push(v);
            }
            push(self.b_high);
            for v in self.w_global {
                push(v);
            }
            push(self.b_global);
        }
        out.push(self.frozen as u8);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != WEIGHT_BYTES {
            return Err(Error::Format(format!(
                "encoder weights: expected {WEIGHT_BYTES} bytes, got {}",
                bytes.len()
            )));
        }
        let mut pos = 0usize;
        let mut next = || {
            let v = f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
            pos += 4;
            F::real(v as f64)
        };
        let mut w = Self::zeros();
        for v in w.w_low.iter_mut() {
            *v = next();
        }
        w.b_low = next();
        for v in w.w_high.iter_mut() {
            *v = next();
        }
        w.b_high = next();
        for v in w.w_global.iter_mut() {
            *v = next();
        }
        w.b_global = next();
        w.frozen = match bytes[WEIGHT_BYTES - 1] {
            0 => false,
            1 => true,
            other => {
                return Err(Error::Format(format!(
                    "encoder weights: bad frozen flag {other}"
                )))
            }
        };
        Ok(w)
    }

    /// Content digest used to audit freeze durability across tasks.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_bytes());
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// 3-channel half-resolution frequency feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedMap<F: Scalar> {
    values: Array3<F>,
    source_shape: (usize, usize),
}

impl<F: Scalar> EncodedMap<F> {
    pub fn new(values: Array3<F>, source_shape: (usize, usize)) -> Result<Self> {
        if values.dim().0 != 3 {
            return Err(Error::ShapeMismatch {
                context: "encoded map",
                expected: "3 channels".into(),
                got: format!("{} channels", values.dim().0),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition(
                "encoded map contains non-finite values".into(),
            ));
        }
        Ok(Self {
            values,
            source_shape,
        })
    }

    pub fn values(&self) -> ArrayView3<'_, F> {
        self.values.view()
    }

    pub fn into_values(self) -> Array3<F> {
        self.values
    }

    pub fn source_shape(&self) -> (usize, usize) {
        self.source_shape
    }

    /// Spatial shape of the map itself.
    pub fn spatial(&self) -> (usize, usize) {
        (self.values.dim().1, self.values.dim().2)
    }
}

fn check_rgb<F: Scalar>(image: &ArrayView3<F>) -> Result<()> {
    if image.dim().0 != 3 {
        return Err(Error::ShapeMismatch {
            context: "encoder input",
            expected: "3 channels".into(),
            got: format!("{} channels", image.dim().0),
        });
    }
    Ok(())
}

/// Encode one image. Channel 0 merges the three ll planes, channel 1 the
/// nine high-frequency planes, channel 2 all twelve.
pub fn encode<F: Scalar>(
    image: ArrayView3<F>,
    weights: &EncoderWeights<F>,
) -> Result<EncodedMap<F>> {
    let (map, _) = encode_with_subbands(image, weights)?;
    Ok(map)
}

/// Encode and also return the per-channel subbands, which the training path
/// reuses for weight gradients and class signatures.
pub fn encode_with_subbands<F: Scalar>(
    image: ArrayView3<F>,
    weights: &EncoderWeights<F>,
) -> Result<(EncodedMap<F>, Vec<SubbandSet<F>>)> {
    check_rgb(&image)?;
    let (_, h, w) = image.dim();
    let subbands = dwt_image(image)?;
    let (h2, w2) = subbands[0].shape();

    let mut low = Array2::from_elem((h2, w2), weights.b_low);
    let mut high = Array2::from_elem((h2, w2), weights.b_high);
    let mut global = Array2::from_elem((h2, w2), weights.b_global);

    for (c, set) in subbands.iter().enumerate() {
        low.scaled_add(weights.w_low[c], &set.ll);
        global.scaled_add(weights.w_global[4 * c], &set.ll);
        for (b, band) in [&set.lh, &set.hl, &set.hh].into_iter().enumerate() {
            high.scaled_add(weights.w_high[3 * c + b], band);
            global.scaled_add(weights.w_global[4 * c + b + 1], band);
        }
    }

    let mut values = Array3::zeros((3, h2, w2));
    values.index_axis_mut(Axis(0), 0).assign(&low);
    values.index_axis_mut(Axis(0), 1).assign(&high);
    values.index_axis_mut(Axis(0), 2).assign(&global);
    Ok((EncodedMap::new(values, (h, w))?, subbands))
}

/// Accumulate parameter gradients for one sample given the upstream gradient
/// with respect to the encoded map. Subbands must come from the same forward
/// call.
pub fn accumulate_grads<F: Scalar>(
    grads: &mut EncoderGrads<F>,
    subbands: &[SubbandSet<F>],
    output_grad: ArrayView3<F>,
) {
    let g_low = output_grad.index_axis(Axis(0), 0);
    let g_high = output_grad.index_axis(Axis(0), 1);
    let g_global = output_grad.index_axis(Axis(0), 2);

    for (c, set) in subbands.iter().enumerate() {
        grads.w_low[c] += set.ll.iter().zip(g_low.iter()).map(|(a, g)| *a * *g).sum();
        grads.w_global[4 * c] += set
            .ll
            .iter()
            .zip(g_global.iter())
            .map(|(a, g)| *a * *g)
            .sum();
        for (b, band) in [&set.lh, &set.hl, &set.hh].into_iter().enumerate() {
            grads.w_high[3 * c + b] += band.iter().zip(g_high.iter()).map(|(a, g)| *a * *g).sum();
            grads.w_global[4 * c + b + 1] += band
                .iter()
                .zip(g_global.iter())
                .map(|(a, g)| *a * *g)
                .sum();
        }
    }
    grads.b_low += g_low.iter().copied().sum();
    grads.b_high += g_high.iter().copied().sum();
    grads.b_global += g_global.iter().copied().sum();
}
