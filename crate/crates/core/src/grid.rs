//! Grid arithmetic shared by every stage: quarter-turn rotation, resizing and
//! cosine similarity.
//!
//! Grids are stored row-major as `height × width × channels`. Rotations are
//! counter-clockwise and act only on the two spatial axes; they are exact
//! permutations of the stored values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default norm guard for [`cosine_similarity`].
pub const COSINE_EPS: f64 = 1e-8;

/// A dense `height × width × channels` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

/// RGB image with values in `[0, 1]`.
pub type ImageGrid = Grid<f32>;

/// Token grid produced by a vision encoder.
pub type FeatureGrid = Grid<f64>;

/// Per-pixel class scores, `height × width × classes`.
pub type LogitMap = Grid<f64>;

/// Single-channel class-index mask.
pub type LabelMask = Grid<u8>;

/// Conventional "unlabelled" mask value.
pub const IGNORE_INDEX: u8 = 255;

impl LogitMap {
    /// Per-pixel argmax; ties go to the lowest class index.
    pub fn argmax(&self) -> LabelMask {
        let data = self
            .data
            .chunks(self.channels)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = i;
                    }
                }
                best as u8
            })
            .collect();
        LabelMask {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }
}

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape(format!(
                "grid dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "grid {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Channel vector at `(row, col)`.
    pub fn pixel(&self, row: usize, col: usize) -> &[T] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [T] {
        let start = (row * self.width + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Rotates the spatial axes counter-clockwise by `turns` quarter turns.
    pub fn rotate(&self, turns: Orientation) -> Result<Self> {
        if !self.is_square() {
            return Err(Error::shape(format!(
                "rotation needs a square grid, got {}x{}",
                self.height, self.width
            )));
        }
        let data = rotate_hwc(&self.data, self.height, self.channels, turns);
        Ok(Self { data, ..*self })
    }

    /// Reverses both spatial axes.
    pub fn flip_both(&self) -> Self {
        let c = self.channels;
        let mut data = Vec::with_capacity(self.data.len());
        for r in (0..self.height).rev() {
            for col in (0..self.width).rev() {
                data.extend_from_slice(&self.data[(r * self.width + col) * c..][..c]);
            }
        }
        Self { data, ..*self }
    }
}

impl<T: Copy + Default> Grid<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::filled(height, width, channels, T::default())
    }
}

impl ImageGrid {
    /// Builds an RGB image and checks the `[0, 1]` value range.
    pub fn from_rgb(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::input(format!(
                "image values must lie in [0, 1], found {bad}"
            )));
        }
        Self::new(height, width, 3, data)
    }

    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Self> {
        let src: Vec<f64> = self.data.iter().map(|&v| f64::from(v)).collect();
        let resized = bilinear_resize_hwc(
            &src,
            self.height,
            self.width,
            self.channels,
            out_h,
            out_w,
            Sampling::HalfPixel,
        )?;
        // Interpolation is a convex combination so the range is preserved up
        // to rounding.
        let data = resized
            .into_iter()
            .map(|v| (v as f32).clamp(0.0, 1.0))
            .collect();
        Self::new(out_h, out_w, self.channels, data)
    }
}

impl FeatureGrid {
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn resize_bilinear(&self, out_h: usize, out_w: usize, sampling: Sampling) -> Result<Self> {
        let data = bilinear_resize_hwc(
            &self.data,
            self.height,
            self.width,
            self.channels,
            out_h,
            out_w,
            sampling,
        )?;
        Self::new(out_h, out_w, self.channels, data)
    }
}

/// A counter-clockwise rotation by a multiple of 90°.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Orientation(u8);

impl Orientation {
    pub const IDENTITY: Orientation = Orientation(0);

    pub fn new(quarter_turns: u8) -> Result<Self> {
        if quarter_turns > 3 {
            return Err(Error::input(format!(
                "orientation must be 0..=3 quarter turns, got {quarter_turns}"
            )));
        }
        Ok(Self(quarter_turns))
    }

    pub fn quarter_turns(self) -> u8 {
        self.0
    }

    pub fn inverse(self) -> Self {
        Self((4 - self.0) % 4)
    }

    pub fn degrees(self) -> u32 {
        u32::from(self.0) * 90
    }

    pub fn all() -> [Orientation; 4] {
        [Self(0), Self(1), Self(2), Self(3)]
    }
}

impl TryFrom<u8> for Orientation {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        Self::new(value)
    }
}

impl From<Orientation> for u8 {
    fn from(o: Orientation) -> u8 {
        o.0
    }
}

/// `(4 - turns) mod 4`.
pub fn inverse_rotation(turns: Orientation) -> Orientation {
    turns.inverse()
}

/// Rotates a grid's spatial axes counter-clockwise; see [`Grid::rotate`].
pub fn rotate_grid<T: Copy>(grid: &Grid<T>, turns: Orientation) -> Result<Grid<T>> {
    grid.rotate(turns)
}

/// Source `(row, col)` that lands at `(row, col)` after rotating a `side × side`
/// grid counter-clockwise by `turns`.
#[inline]
pub fn rotation_source(row: usize, col: usize, side: usize, turns: Orientation) -> (usize, usize) {
    let last = side - 1;
    match turns.0 {
        0 => (row, col),
        1 => (col, last - row),
        2 => (last - row, last - col),
        _ => (last - col, row),
    }
}

/// Rotates a square `side × side × channels` buffer.
pub fn rotate_hwc<T: Copy>(data: &[T], side: usize, channels: usize, turns: Orientation) -> Vec<T> {
    if turns.0 == 0 {
        return data.to_vec();
    }
    let mut out = Vec::with_capacity(data.len());
    for r in 0..side {
        for c in 0..side {
            let (sr, sc) = rotation_source(r, c, side, turns);
            let start = (sr * side + sc) * channels;
            out.extend_from_slice(&data[start..start + channels]);
        }
    }
    out
}

/// `dot(a, b) / (max(|a|, eps) * max(|b|, eps))`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64], eps: f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Sample placement for linear interpolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Pixel centres map onto pixel centres (`align_corners = false`).
    #[default]
    HalfPixel,
    /// First and last samples coincide with the input corners
    /// (`align_corners = true`).
    Corners,
}

/// One output sample of 1-D linear interpolation: `w0 * x[i0] + w1 * x[i1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LerpTap {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

/// Interpolation taps for resampling `input` samples to `output` samples.
pub fn linear_taps(input: usize, output: usize, sampling: Sampling) -> Vec<LerpTap> {
    assert!(input > 0 && output > 0, "resize lengths must be positive");
    if input == output {
        return (0..output)
            .map(|i| LerpTap {
                i0: i,
                i1: i,
                w0: 1.0,
                w1: 0.0,
            })
            .collect();
    }
    (0..output)
        .map(|o| {
            let src = match sampling {
                Sampling::HalfPixel => {
                    let scale = input as f64 / output as f64;
                    ((o as f64 + 0.5) * scale - 0.5).max(0.0)
                }
                Sampling::Corners if output == 1 => 0.0,
                Sampling::Corners => o as f64 * (input - 1) as f64 / (output - 1) as f64,
            };
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let w1 = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            LerpTap {
                i0,
                i1,
                w0: 1.0 - w1,
                w1,
            }
        })
        .collect()
}

/// Bilinear resize of an `h × w × c` buffer.
pub fn bilinear_resize_hwc(
    data: &[f64],
    h: usize,
    w: usize,
    c: usize,
    out_h: usize,
    out_w: usize,
    sampling: Sampling,
) -> Result<Vec<f64>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize target must be at least 1x1"));
    }
    if data.len() != h * w * c {
        return Err(Error::shape("buffer length does not match h*w*c"));
    }
    if out_h == h && out_w == w {
        return Ok(data.to_vec());
    }
    let rows = linear_taps(h, out_h, sampling);
    let cols = linear_taps(w, out_w, sampling);
    let mut out = vec![0.0; out_h * out_w * c];
    for (oy, ty) in rows.iter().enumerate() {
        for (ox, tx) in cols.iter().enumerate() {
            let dst = &mut out[(oy * out_w + ox) * c..][..c];
            for (y, wy) in [(ty.i0, ty.w0), (ty.i1, ty.w1)] {
                for (x, wx) in [(tx.i0, tx.w0), (tx.i1, tx.w1)] {
                    let wgt = wy * wx;
                    if wgt == 0.0 {
                        continue;
                    }
                    let src = &data[(y * w + x) * c..][..c];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wgt * s;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour source index for each of `output` samples.
pub fn nearest_indices(input: usize, output: usize) -> Vec<usize> {
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * input as f64 / output as f64).floor() as usize;
            src.min(input - 1)
        })
        .collect()
}

/// Nearest-neighbour resize of a single-channel label buffer. Never produces a
/// value absent from the input.
pub fn nearest_resize<T: Copy>(data: &[T], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<T> {
    let rows = nearest_indices(h, out_h);
    let cols = nearest_indices(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &r in &rows {
        for &c in &cols {
            out.push(data[r * w + c]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g2(vals: [f64; 4]) -> FeatureGrid {
        FeatureGrid::new(2, 2, 1, vals.to_vec()).unwrap()
    }

    #[test]
    fn rotate_examples() {
        let (a, b, c, d) = (1.0, 2.0, 3.0, 4.0);
        let g = g2([a, b, c, d]);
        assert_eq!(g.rotate(Orientation(0)).unwrap(), g);
        assert_eq!(g.rotate(Orientation(1)).unwrap().data(), &[b, d, a, c]);
        let mut r = g.clone();
        for _ in 0..4 {
            r = r.rotate(Orientation(1)).unwrap();
        }
        assert_eq!(r, g);
    }

    #[test]
    fn rotate_rejects_non_square() {
        let g = FeatureGrid::zeros(2, 3, 1).unwrap();
        assert!(matches!(g.rotate(Orientation(1)), Err(Error::Shape(_))));
    }

    #[test]
    fn rotation_keeps_channels_together() {
        let g = FeatureGrid::new(2, 2, 2, vec![1., 10., 2., 20., 3., 30., 4., 40.]).unwrap();
        let r = g.rotate(Orientation(1)).unwrap();
        assert_eq!(r.pixel(0, 0), &[2., 20.]);
        assert_eq!(r.pixel(1, 1), &[3., 30.]);
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(inverse_rotation(Orientation(0)), Orientation(0));
        assert_eq!(inverse_rotation(Orientation(1)), Orientation(3));
        assert_eq!(inverse_rotation(Orientation(2)), Orientation(2));
        assert!(Orientation::new(4).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1., 0.], &[1., 0.], COSINE_EPS), 1.0);
        assert_eq!(cosine_similarity(&[1., 0.], &[0., 1.], COSINE_EPS), 0.0);
        let v = cosine_similarity(&[1., 1.], &[1., 0.], COSINE_EPS);
        assert!((v - 0.707_106_78).abs() < 1e-8);
        assert_eq!(cosine_similarity(&[0., 0.], &[1., 0.], COSINE_EPS), 0.0);
    }

    #[test]
    fn resize_identity_and_constant() {
        let g = g2([1., 2., 3., 4.]);
        assert_eq!(g.resize_bilinear(2, 2, Sampling::HalfPixel).unwrap(), g);
        let c = FeatureGrid::filled(3, 5, 2, 0.25).unwrap();
        for (h, w) in [(1, 1), (7, 2), (6, 10)] {
            for s in [Sampling::HalfPixel, Sampling::Corners] {
                let r = c.resize_bilinear(h, w, s).unwrap();
                assert!(r.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
            }
        }
    }

    #[test]
    fn resize_row_ramp() {
        // Half-pixel centres: source positions -0.25 (clamped), 0.25, 0.75, 1.25 (clamped).
        let g = g2([0., 1., 0., 1.]);
        let r = g.resize_bilinear(2, 4, Sampling::HalfPixel).unwrap();
        for row in r.data().chunks(4) {
            assert_eq!(row, &[0.0, 0.25, 0.75, 1.0]);
        }
        // Corner-aligned sampling puts samples at 0, 1/3, 2/3, 1.
        let r = g.resize_bilinear(2, 4, Sampling::Corners).unwrap();
        for row in r.data().chunks(4) {
            for (v, e) in row.iter().zip([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]) {
                assert!((v - e).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn nearest_downscale_keeps_labels() {
        let src: Vec<u8> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as u8 * 7).collect();
        let out = nearest_resize(&src, 4, 4, 2, 2);
        assert!(out.iter().all(|v| *v == 0 || *v == 7));
    }

    proptest! {
        #[test]
        fn rotation_round_trip_is_exact(side in 1usize..9, ch in 1usize..4, t in 0u8..4, seed in any::<u64>()) {
            let n = side * side * ch;
            let data: Vec<f64> = (0..n).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 7.0).collect();
            let g = FeatureGrid::new(side, side, ch, data).unwrap();
            let t = Orientation::new(t).unwrap();
            let back = g.rotate(t).unwrap().rotate(t.inverse()).unwrap();
            prop_assert_eq!(&back, &g);
            let half = g.rotate(Orientation(2)).unwrap();
            prop_assert_eq!(half, g.flip_both());
        }

        #[test]
        fn cosine_is_symmetric_bounded_scale_invariant(
            a in proptest::collection::vec(-10.0f64..10.0, 4),
            b in proptest::collection::vec(-10.0f64..10.0, 4),
            s in 0.01f64..100.0,
        ) {
            let ab = cosine_similarity(&a, &b, COSINE_EPS);
            prop_assert_eq!(ab, cosine_similarity(&b, &a, COSINE_EPS));
            prop_assert!((-1.0..=1.0).contains(&ab));
            let scaled: Vec<f64> = a.iter().map(|v| v * s).collect();
            prop_assert!((cosine_similarity(&scaled, &b, COSINE_EPS) - ab).abs() < 1e-6);
        }
    }
}
