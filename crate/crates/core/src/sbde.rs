//! Symmetry-breaking dimensional expansion of images.
//!
//! `expand` embeds a C×H×W image into a C×(H·F)×(W·F) grid: signal pixel
//! (i, j) lands at expanded coordinate (i·F, j·F) — the top-left corner of
//! each F×F block — and every other coordinate is filled by the configured
//! fill scheme. `project` is the test-time mask projection that resets the
//! auxiliary coordinates to their fill values while leaving signal
//! coordinates untouched.
//!
//! All operations here are pure and reentrant.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// Rule assigning values to auxiliary coordinates.
///
/// `GapCycle` cycles -a, 0, +a over auxiliary coordinates in raster order,
/// with the identical pattern on every channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FillScheme {
    Constant { value: f64 },
    GapCycle { amplitude: f64 },
}

impl FillScheme {
    pub fn constant(value: f64) -> Self {
        FillScheme::Constant { value }
    }

    pub fn gap_cycle(amplitude: f64) -> Self {
        FillScheme::GapCycle { amplitude }
    }

    pub fn validate(&self, pixel_range: (f64, f64)) -> Result<()> {
        match *self {
            FillScheme::Constant { value } => {
                if value < pixel_range.0 || value > pixel_range.1 {
                    return Err(Error::InvalidArgument(format!(
                        "fill constant {} outside valid pixel range [{}, {}]",
                        value, pixel_range.0, pixel_range.1
                    )));
                }
            }
            FillScheme::GapCycle { amplitude } => {
                if amplitude <= 0.0 {
                    return Err(Error::InvalidArgument(
                        "gap-cycle amplitude must be positive".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Fill value for the auxiliary coordinate with raster ordinal
    /// `aux_index` (per channel; the pattern repeats identically across
    /// channels).
    pub fn value_at(&self, aux_index: usize) -> f64 {
        match *self {
            FillScheme::Constant { value } => value,
            FillScheme::GapCycle { amplitude } => match aux_index % 3 {
                0 => -amplitude,
                1 => 0.0,
                _ => amplitude,
            },
        }
    }

    /// Compact label used in report tables, e.g. `0.5` or `0.2-gapcycle`.
    pub fn label(&self) -> String {
        match *self {
            FillScheme::Constant { value } => format!("{}", value),
            FillScheme::GapCycle { amplitude } => format!("{}-gapcycle", amplitude),
        }
    }

    /// The per-coordinate valid box for attacks on expanded inputs:
    /// `[0, 1]` for constant fills, widened to `[-a, 1]` for gap-cycle fills
    /// whose negative phase lies below zero.
    pub fn default_box(&self) -> (f64, f64) {
        match *self {
            FillScheme::Constant { .. } => (0.0, 1.0),
            FillScheme::GapCycle { amplitude } => (-amplitude, 1.0),
        }
    }
}

/// Expansion factor, fill scheme, and source-image geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionSpec {
    pub factor: usize,
    pub fill: FillScheme,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ExpansionSpec {
    pub fn new(
        factor: usize,
        fill: FillScheme,
        channels: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidArgument("expansion factor must be >= 1".into()));
        }
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(
                "expansion source dimensions must be positive".into(),
            ));
        }
        Ok(ExpansionSpec {
            factor,
            fill,
            channels,
            height,
            width,
        })
    }

    /// Expanded spatial size `(H*F, W*F)`.
    pub fn expanded_hw(&self) -> (usize, usize) {
        (self.height * self.factor, self.width * self.factor)
    }

    pub fn expanded_shape(&self) -> Vec<usize> {
        let (h, w) = self.expanded_hw();
        vec![self.channels, h, w]
    }

    pub fn source_shape(&self) -> Vec<usize> {
        vec![self.channels, self.height, self.width]
    }

    /// Fraction of expanded coordinates that are auxiliary: `1 - 1/F^2`.
    pub fn aux_fraction(&self) -> f64 {
        1.0 - 1.0 / (self.factor * self.factor) as f64
    }

    fn check_expanded(&self, t: &[usize]) -> Result<()> {
        if t != self.expanded_shape().as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "expected expanded shape {:?}, got {:?}",
                self.expanded_shape(),
                t
            )));
        }
        Ok(())
    }

    /// Whether expanded coordinate `(i, j)` is a signal coordinate.
    #[inline]
    pub fn is_signal(&self, i: usize, j: usize) -> bool {
        i % self.factor == 0 && j % self.factor == 0
    }

    /// Raster-scan ordinal of auxiliary coordinate `(i, j)` within the
    /// auxiliary set of one channel.
    pub fn aux_ordinal(&self, i: usize, j: usize) -> Result<usize> {
        if self.is_signal(i, j) {
            return Err(Error::InvalidArgument(format!(
                "({i}, {j}) is a signal coordinate"
            )));
        }
        let (hf, wf) = self.expanded_hw();
        if i >= hf || j >= wf {
            return Err(Error::InvalidArgument(format!(
                "({i}, {j}) outside expanded grid {hf}x{wf}"
            )));
        }
        let f = self.factor;
        // Signal coordinates preceding (i, j) in raster order: full signal
        // rows above, plus signal columns to the left when row i is signal.
        let sig_rows_above = i.div_ceil(f);
        let mut sig_before = sig_rows_above * self.width;
        if i % f == 0 {
            sig_before += j.div_ceil(f);
        }
        Ok(i * wf + j - sig_before)
    }

    /// Fill value at auxiliary coordinate `(i, j)` of `channel`. The channel
    /// argument is validated but the pattern is channel-independent.
    pub fn fill_value_at(&self, channel: usize, i: usize, j: usize) -> Result<f64> {
        if channel >= self.channels {
            return Err(Error::InvalidArgument(format!(
                "channel {} out of range (C = {})",
                channel, self.channels
            )));
        }
        Ok(self.fill.value_at(self.aux_ordinal(i, j)?))
    }
}

/// Boolean signal/auxiliary partition of the expanded grid; `true` marks a
/// signal coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateMask {
    height: usize,
    width: usize,
    mask: Vec<bool>,
}

impl CoordinateMask {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn is_signal(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.width + j]
    }

    pub fn signal_count(&self) -> usize {
        self.mask.iter().filter(|&&v| v).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }
}

/// Derives the signal/auxiliary partition from a spec.
pub fn partition(spec: &ExpansionSpec) -> CoordinateMask {
    let (hf, wf) = spec.expanded_hw();
    let mut mask = vec![false; hf * wf];
    for i in (0..hf).step_by(spec.factor) {
        for j in (0..wf).step_by(spec.factor) {
            mask[i * wf + j] = true;
        }
    }
    CoordinateMask {
        height: hf,
        width: wf,
        mask,
    }
}

/// Expands a `[C, H, W]` image to `[C, H*F, W*F]`: original pixels on the
/// signal lattice, fill values everywhere else.
pub fn expand<F: Scalar>(image: &Tensor<F>, spec: &ExpansionSpec) -> Result<Tensor<F>> {
    if image.shape() != spec.source_shape().as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "expected image shape {:?}, got {:?}",
            spec.source_shape(),
            image.shape()
        )));
    }
    let (hf, wf) = spec.expanded_hw();
    let f = spec.factor;
    let mut out = Tensor::zeros(spec.expanded_shape());
    {
        let src = image.data();
        let dst = out.data_mut();
        for c in 0..spec.channels {
            let c_src = c * spec.height * spec.width;
            let c_dst = c * hf * wf;
            let mut aux_index = 0usize;
            for i in 0..hf {
                for j in 0..wf {
                    dst[c_dst + i * wf + j] = if i % f == 0 && j % f == 0 {
                        src[c_src + (i / f) * spec.width + (j / f)]
                    } else {
                        let v = F::from_f64(spec.fill.value_at(aux_index));
                        aux_index += 1;
                        v
                    };
                }
            }
        }
    }
    Ok(out)
}

/// Expands every sample of an `[N, C, H, W]` batch.
pub fn expand_batch<F: Scalar>(images: &Tensor<F>, spec: &ExpansionSpec) -> Result<Tensor<F>> {
    if images.shape().len() != 4 || images.shape()[1..] != *spec.source_shape().as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "expected batch of {:?}, got {:?}",
            spec.source_shape(),
            images.shape()
        )));
    }
    let n = images.shape()[0];
    let expanded: Vec<Tensor<F>> = (0..n)
        .map(|i| expand(&images.sample(i), spec))
        .collect::<Result<_>>()?;
    Tensor::stack(&expanded)
}

/// Mask projection: resets auxiliary coordinates to their fill values,
/// keeping signal coordinates as they are. Idempotent; the identity on
/// expanded images.
pub fn project<F: Scalar>(x: &Tensor<F>, spec: &ExpansionSpec) -> Result<Tensor<F>> {
    spec.check_expanded(x.shape())?;
    let (hf, wf) = spec.expanded_hw();
    let f = spec.factor;
    let mut out = x.clone();
    {
        let dst = out.data_mut();
        for c in 0..spec.channels {
            let c_dst = c * hf * wf;
            let mut aux_index = 0usize;
            for i in 0..hf {
                for j in 0..wf {
                    if i % f != 0 || j % f != 0 {
                        dst[c_dst + i * wf + j] = F::from_f64(spec.fill.value_at(aux_index));
                        aux_index += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Projects every sample of an `[N, C, HF, WF]` batch.
pub fn project_batch<F: Scalar>(x: &Tensor<F>, spec: &ExpansionSpec) -> Result<Tensor<F>> {
    if x.shape().len() != 4 || x.shape()[1..] != *spec.expanded_shape().as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "expected batch of {:?}, got {:?}",
            spec.expanded_shape(),
            x.shape()
        )));
    }
    let n = x.shape()[0];
    let projected: Vec<Tensor<F>> = (0..n)
        .map(|i| project(&x.sample(i), spec))
        .collect::<Result<_>>()?;
    Tensor::stack(&projected)
}

/// Pulls the signal pixels back out as a compact `[C, H, W]` image;
/// the left inverse of `expand`.
pub fn extract<F: Scalar>(x: &Tensor<F>, spec: &ExpansionSpec) -> Result<Tensor<F>> {
    spec.check_expanded(x.shape())?;
    let (hf, wf) = spec.expanded_hw();
    let f = spec.factor;
    let mut out = Tensor::zeros(spec.source_shape());
    {
        let src = x.data();
        let dst = out.data_mut();
        for c in 0..spec.channels {
            let c_src = c * hf * wf;
            let c_dst = c * spec.height * spec.width;
            for i in 0..spec.height {
                for j in 0..spec.width {
                    dst[c_dst + i * spec.width + j] = src[c_src + (i * f) * wf + (j * f)];
                }
            }
        }
    }
    Ok(out)
}
