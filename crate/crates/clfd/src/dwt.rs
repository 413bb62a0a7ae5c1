//! Single-level 2-D orthonormal Haar transform and its exact inverse.
//!
//! The transform is evaluated per non-overlapping 2x2 block, which for the
//! Haar basis is identical to the separable filter-bank form but directly
//! testable: block `[[a, b], [c, d]]` maps to
//!
//! ```text
//! ll = (a + b + c + d) / 2      lh = (a - b + c - d) / 2
//! hl = (a + b - c - d) / 2      hh = (a - b - c + d) / 2
//! ```
//!
//! One decomposition level only; odd dimensions are rejected rather than
//! padded so downstream even-aligned augmentation stays exact.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A single image plane with even dimensions and finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<F: Scalar> {
    values: Array2<F>,
}

impl<F: Scalar> Plane<F> {
    pub fn new(values: Array2<F>) -> Result<Self> {
        let (h, w) = values.dim();
        check_even_dims(h, w)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("plane contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> ArrayView2<'_, F> {
        self.values.view()
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }
}

/// The four Haar subbands of one plane, each half the plane's size.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandSet<F: Scalar> {
    pub ll: Array2<F>,
    pub lh: Array2<F>,
    pub hl: Array2<F>,
    pub hh: Array2<F>,
}

impl<F: Scalar> SubbandSet<F> {
    /// Shape shared by all four subbands.
    pub fn shape(&self) -> (usize, usize) {
        self.ll.dim()
    }

    fn check_consistent(&self) -> Result<()> {
        let want = self.ll.dim();
        for (name, band) in [("lh", &self.lh), ("hl", &self.hl), ("hh", &self.hh)] {
            if band.dim() != want {
                return Err(Error::ShapeMismatch {
                    context: "subband set",
                    expected: format!("{:?} (ll shape)", want),
                    got: format!("{:?} ({name})", band.dim()),
                });
            }
        }
        Ok(())
    }
}

fn check_even_dims(h: usize, w: usize) -> Result<()> {
    if h < 2 || h % 2 != 0 {
        return Err(Error::Dimension {
            axis: "height",
            detail: format!("must be even and >= 2, got {h}"),
        });
    }
    if w < 2 || w % 2 != 0 {
        return Err(Error::Dimension {
            axis: "width",
            detail: format!("must be even and >= 2, got {w}"),
        });
    }
    Ok(())
}

/// Forward Haar transform of one plane.
pub fn haar_forward<F: Scalar>(plane: &Plane<F>) -> SubbandSet<F> {
    // Plane construction already guarantees even dimensions.
    haar_forward_view(plane.values()).expect("plane invariant guarantees even dims")
}

/// Forward transform on a raw view; the hot path used by batch encoding.
pub fn haar_forward_view<F: Scalar>(x: ArrayView2<F>) -> Result<SubbandSet<F>> {
    let (h, w) = x.dim();
    check_even_dims(h, w)?;
    let (hh2, wh2) = (h / 2, w / 2);
    let half = F::real(0.5);

    let mut ll = Array2::zeros((hh2, wh2));
    let mut lh = Array2::zeros((hh2, wh2));
    let mut hl = Array2::zeros((hh2, wh2));
    let mut hh = Array2::zeros((hh2, wh2));
    for i in 0..hh2 {
        for j in 0..wh2 {
            let a = x[[2 * i, 2 * j]];
            let b = x[[2 * i, 2 * j + 1]];
            let c = x[[2 * i + 1, 2 * j]];
            let d = x[[2 * i + 1, 2 * j + 1]];
            ll[[i, j]] = (a + b + c + d) * half;
            lh[[i, j]] = (a - b + c - d) * half;
            hl[[i, j]] = (a + b - c - d) * half;
            hh[[i, j]] = (a - b - c + d) * half;
        }
    }
    Ok(SubbandSet { ll, lh, hl, hh })
}

/// Exact inverse: returns the unique plane whose forward transform equals
/// the given subbands.
pub fn haar_inverse<F: Scalar>(subbands: &SubbandSet<F>) -> Result<Plane<F>> {
    subbands.check_consistent()?;
    let (hh2, wh2) = subbands.shape();
    let half = F::real(0.5);

    let mut out = Array2::zeros((hh2 * 2, wh2 * 2));
    for i in 0..hh2 {
        for j in 0..wh2 {
            let ll = subbands.ll[[i, j]];
            let lh = subbands.lh[[i, j]];
            let hl = subbands.hl[[i, j]];
            let hh = subbands.hh[[i, j]];
            out[[2 * i, 2 * j]] = (ll + lh + hl + hh) * half;
            out[[2 * i, 2 * j + 1]] = (ll - lh + hl - hh) * half;
            out[[2 * i + 1, 2 * j]] = (ll + lh - hl - hh) * half;
            out[[2 * i + 1, 2 * j + 1]] = (ll - lh - hl + hh) * half;
        }
    }
    Plane::new(out)
}

/// Per-channel transform of a channel-major image volume; channel order is
/// preserved.
pub fn dwt_image<F: Scalar>(image: ArrayView3<F>) -> Result<Vec<SubbandSet<F>>> {
    image
        .outer_iter()
        .map(|channel| haar_forward_view(channel))
        .collect()
}

/// Inverse of [`dwt_image`], for round-trip checks.
pub fn idwt_image<F: Scalar>(subbands: &[SubbandSet<F>]) -> Result<Array3<F>> {
    if subbands.is_empty() {
        return Err(Error::Precondition("no subband sets given".into()));
    }
    let (hh2, wh2) = subbands[0].shape();
    let mut out = Array3::zeros((subbands.len(), hh2 * 2, wh2 * 2));
    for (c, set) in subbands.iter().enumerate() {
        let plane = haar_inverse(set)?;
        out.index_axis_mut(ndarray::Axis(0), c).assign(&plane.values());
    }
    Ok(out)
}
