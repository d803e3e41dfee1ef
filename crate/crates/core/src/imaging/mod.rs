//! Image and label-map containers, gray levels and patch slicing.
//!
//! Images are stored planar (channel-major, then row-major) so they can be
//! handed to the convolution code without reshuffling.

mod io;

pub use io::{load_image, load_label_map, load_mask, save_image, save_label_map, save_mask};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Three-channel raster with intensities in `[0, 1]`, stored `C×H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "image must be at least 1x1, got {height}x{width}"
            )));
        }
        if data.len() != CHANNELS * height * width {
            return Err(Error::ShapeMismatch(format!(
                "image {height}x{width} needs {} values, got {}",
                CHANNELS * height * width,
                data.len()
            )));
        }
        if let Some(v) = data
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::OutOfRange(format!("intensity {v} outside [0,1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Uniform color image.
    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, height * width));
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        [
            self.get(0, row, col),
            self.get(1, row, col),
            self.get(2, row, col),
        ]
    }

    /// Window `[row, row+height) × [col, col+width)`; coordinates outside the
    /// image are mirrored back in.
    pub fn reflect_window(&self, row: usize, col: usize, height: usize, width: usize) -> Image {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for r in 0..height {
                let sr = reflect_index(row + r, self.height);
                for q in 0..width {
                    data.push(self.get(c, sr, reflect_index(col + q, self.width)));
                }
            }
        }
        Image {
            height,
            width,
            data,
        }
    }
}

/// Per-pixel gray level in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl GrayMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }
}

pub fn luminance(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

/// Gray level of every pixel. With `invert` set, darker pixels score higher
/// (`1 - luma`), which is the convention the border cue relies on.
pub fn to_gray_level(img: &Image, invert: bool) -> GrayMap {
    let plane = img.height * img.width;
    let (r, rest) = img.data.split_at(plane);
    let (g, b) = rest.split_at(plane);
    let data = r
        .iter()
        .zip(g)
        .zip(b)
        .map(|((&r, &g), &b)| {
            let luma = luminance([r, g, b]).clamp(0.0, 1.0);
            if invert {
                1.0 - luma
            } else {
                luma
            }
        })
        .collect();
    GrayMap {
        height: img.height,
        width: img.width,
        data,
    }
}

/// Dense map of small integer class ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, classes: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "label map {height}x{width} needs {} ids, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(&id) = data.iter().find(|&&id| id as usize >= classes) {
            return Err(Error::InvalidLabel {
                id: id as u32,
                classes,
            });
        }
        Ok(Self {
            height,
            width,
            classes,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, classes: usize, id: u16) -> Result<Self> {
        Self::new(height, width, classes, vec![id; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.data[row * self.width + col]
    }

    /// Pixel count per class id.
    pub fn histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &id in &self.data {
            counts[id as usize] += 1;
        }
        counts
    }

    /// Binary mask of the pixels whose id is in `ids`.
    pub fn mask_of(&self, ids: &[u16]) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|id| ids.contains(id)).collect(),
        }
    }

    pub fn reflect_window(&self, row: usize, col: usize, height: usize, width: usize) -> LabelMap {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            let sr = reflect_index(row + r, self.height);
            for q in 0..width {
                data.push(self.get(sr, reflect_index(col + q, self.width)));
            }
        }
        LabelMap {
            height,
            width,
            classes: self.classes,
            data,
        }
    }
}

/// Row-major boolean mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        check_dims(self.dims(), other.dims())?;
        Ok(Mask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| *a || *b)
                .collect(),
        })
    }
}

/// Per-pixel 3-way label: background, gland border or gland interior.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ProposalMap(LabelMap);

impl ProposalMap {
    pub const CLASSES: usize = 3;
    pub const BACKGROUND: u16 = 0;
    pub const BORDER: u16 = 1;
    pub const INTERIOR: u16 = 2;

    pub fn new(height: usize, width: usize, data: Vec<u16>) -> Result<Self> {
        LabelMap::new(height, width, Self::CLASSES, data).map(Self)
    }

    pub fn background(height: usize, width: usize) -> Self {
        Self(LabelMap {
            height,
            width,
            classes: Self::CLASSES,
            data: vec![Self::BACKGROUND; height * width],
        })
    }

    pub fn from_label_map(map: LabelMap) -> Result<Self> {
        if map.classes != Self::CLASSES {
            return Err(Error::InvalidArgument(format!(
                "proposal maps have 3 classes, got {}",
                map.classes
            )));
        }
        Ok(Self(map))
    }

    pub fn as_label_map(&self) -> &LabelMap {
        &self.0
    }

    pub fn into_label_map(self) -> LabelMap {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn data(&self) -> &[u16] {
        &self.0.data
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.0.get(row, col)
    }

    /// `[background, border, interior]` pixel counts.
    pub fn histogram(&self) -> [usize; 3] {
        let h = self.0.histogram();
        [h[0], h[1], h[2]]
    }

    /// Border ∪ interior.
    pub fn gland_mask(&self) -> Mask {
        self.0.mask_of(&[Self::BORDER, Self::INTERIOR])
    }

    pub fn border_mask(&self) -> Mask {
        self.0.mask_of(&[Self::BORDER])
    }

    pub fn interior_mask(&self) -> Mask {
        self.0.mask_of(&[Self::INTERIOR])
    }
}

/// Aligned image/proposal window cut from a reflect-padded parent.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub image: Image,
    pub proposal: ProposalMap,
    /// `(row, col)` of the top-left corner in the padded parent.
    pub origin: (usize, usize),
}

/// Mirror an index into `0..n` without repeating the edge sample
/// (`-1 → 1`, `n → n-2`), with period `2(n-1)` for long overhangs.
pub fn reflect_index(i: usize, n: usize) -> usize {
    if n <= 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Top-left origins along one axis: `0, stride, 2·stride, …` while the
/// origin still lies inside the image.
pub fn patch_origins(extent: usize, stride: usize) -> Vec<usize> {
    (0..extent).step_by(stride).collect()
}

/// Extent of the padded canvas the patches are cut from.
pub fn padded_extent(extent: usize, patch: usize, stride: usize) -> usize {
    patch_origins(extent, stride)
        .last()
        .map_or(patch, |o| o + patch)
}

pub fn slice_patches(
    img: &Image,
    prop: &ProposalMap,
    patch: usize,
    stride: usize,
) -> Result<Vec<Patch>> {
    check_dims(img.dims(), prop.dims())?;
    check_patch_geometry(patch, stride)?;
    let rows = patch_origins(img.height(), stride);
    let cols = patch_origins(img.width(), stride);
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            out.push(Patch {
                image: img.reflect_window(r, c, patch, patch),
                proposal: ProposalMap(prop.0.reflect_window(r, c, patch, patch)),
                origin: (r, c),
            });
        }
    }
    Ok(out)
}

pub(crate) fn check_patch_geometry(patch: usize, stride: usize) -> Result<()> {
    if patch == 0 || stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "patch ({patch}) and stride ({stride}) must be positive"
        )));
    }
    if stride > patch {
        return Err(Error::InvalidArgument(format!(
            "stride {stride} larger than patch {patch} would leave gaps"
        )));
    }
    Ok(())
}

pub(crate) fn check_dims(expected: (usize, usize), actual: (usize, usize)) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}
