//! Simulated radiographs: average-intensity projection of a volume along the
//! anterior-posterior axis (frontal view) or left-right axis (lateral view),
//! followed by min-max normalization to [-1, 1] and centering on a fixed
//! 512 x 512 zero canvas.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{f32_le_bytes, parse_fields, read_f32_le, FormatError, HeaderReader};
use crate::volgrid::{resample_isotropic, Volume3D, VolumeError};

/// Side length of the preprocessed canvas.
pub const CANVAS: usize = 512;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image data length {len} does not match dims {w}x{h}")]
    LengthMismatch { len: usize, w: usize, h: usize },
    #[error("image contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("downsample factor {factor} does not divide image dims {w}x{h}")]
    BadFactor { factor: usize, w: usize, h: usize },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Frontal,
    Lateral,
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            View::Frontal => "frontal",
            View::Lateral => "lateral",
        })
    }
}

impl FromStr for View {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "frontal" => Ok(View::Frontal),
            "lateral" => Ok(View::Lateral),
            other => Err(format!("unknown view `{other}`")),
        }
    }
}

/// Row-major 2D float image, top row first.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    width: usize,
    height: usize,
    spacing: [f64; 2],
    view: View,
    data: Vec<f32>,
}

impl Image2D {
    pub fn new(
        width: usize,
        height: usize,
        spacing: [f64; 2],
        view: View,
        data: Vec<f32>,
    ) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::LengthMismatch {
                len: data.len(),
                w: width,
                h: height,
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(ImageError::NonFinite(i));
        }
        Ok(Self {
            width,
            height,
            spacing,
            view,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn spacing(&self) -> [f64; 2] {
        self.spacing
    }

    pub fn view(&self) -> View {
        self.view
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn with_data(&self, data: Vec<f32>) -> Result<Self, ImageError> {
        Self::new(self.width, self.height, self.spacing, self.view, data)
    }
}

/// Average-intensity projection.
///
/// Frontal: mean over y, image columns follow x. Lateral: mean over x,
/// image columns follow y. Rows follow z with the superior end on top.
pub fn project_aip(vol: &Volume3D, view: View) -> Image2D {
    let [nx, ny, nz] = vol.dims();
    let [sx, sy, sz] = vol.spacing();
    let data = vol.data();
    let (width, spacing) = match view {
        View::Frontal => (nx, [sx, sz]),
        View::Lateral => (ny, [sy, sz]),
    };
    let mut out = Vec::with_capacity(width * nz);
    for row in 0..nz {
        let k = nz - 1 - row;
        let slab = &data[k * nx * ny..(k + 1) * nx * ny];
        match view {
            View::Frontal => {
                let mut acc = vec![0.0f64; nx];
                for line in slab.chunks_exact(nx) {
                    for (a, &v) in acc.iter_mut().zip(line) {
                        *a += v as f64;
                    }
                }
                out.extend(acc.iter().map(|a| (a / ny as f64) as f32));
            }
            View::Lateral => {
                out.extend(slab.chunks_exact(nx).map(|line| {
                    (line.iter().map(|&v| v as f64).sum::<f64>() / nx as f64) as f32
                }));
            }
        }
    }
    Image2D {
        width,
        height: nz,
        spacing,
        view,
        data: out,
    }
}

/// Center-crop `len` to at most `CANVAS`; returns (start, kept length).
fn crop_range(len: usize) -> (usize, usize) {
    if len > CANVAS {
        ((len - CANVAS) / 2, CANVAS)
    } else {
        (0, len)
    }
}

/// Min-max normalization to [-1, 1] on the image's own range, then centering
/// on a 512 x 512 zero canvas. Oversized inputs are center-cropped first.
pub fn preprocess(img: &Image2D) -> Image2D {
    let (c0, w) = crop_range(img.width);
    let (r0, h) = crop_range(img.height);
    let rows = || (r0..r0 + h).map(|r| &img.data[r * img.width + c0..r * img.width + c0 + w]);

    let (lo, hi) = rows()
        .flatten()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let (lo, hi) = (lo as f64, hi as f64);
    let range = hi - lo;

    let off_c = (CANVAS - w) / 2;
    let off_r = (CANVAS - h) / 2;
    let mut data = vec![0.0f32; CANVAS * CANVAS];
    for (r, row) in rows().enumerate() {
        let dst = &mut data[(off_r + r) * CANVAS + off_c..(off_r + r) * CANVAS + off_c + w];
        if range > 0.0 {
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = ((2.0 * (v as f64 - lo) / range - 1.0) as f32).clamp(-1.0, 1.0);
            }
        }
    }
    Image2D {
        width: CANVAS,
        height: CANVAS,
        spacing: img.spacing,
        view: img.view,
        data,
    }
}

/// Block-mean downsampling by an integer factor.
pub fn downsample(img: &Image2D, factor: usize) -> Result<Image2D, ImageError> {
    if factor == 0 || img.width % factor != 0 || img.height % factor != 0 {
        return Err(ImageError::BadFactor {
            factor,
            w: img.width,
            h: img.height,
        });
    }
    let (w, h) = (img.width / factor, img.height / factor);
    let norm = (factor * factor) as f64;
    let mut data = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0f64;
            for dr in 0..factor {
                let base = (r * factor + dr) * img.width + c * factor;
                acc += img.data[base..base + factor]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
            data.push((acc / norm) as f32);
        }
    }
    Ok(Image2D {
        width: w,
        height: h,
        spacing: [img.spacing[0] * factor as f64, img.spacing[1] * factor as f64],
        view: img.view,
        data,
    })
}

/// Resample to 1 mm, project both views and preprocess them.
pub fn simulate_pair(vol: &Volume3D) -> Result<(Image2D, Image2D), ImageError> {
    let iso = resample_isotropic(vol, 1.0)?;
    Ok((
        preprocess(&project_aip(&iso, View::Frontal)),
        preprocess(&project_aip(&iso, View::Lateral)),
    ))
}

/// [`simulate_pair`] followed by block-mean reduction to `side` x `side`
/// network inputs. `side` must divide 512.
pub fn simulate_network_inputs(vol: &Volume3D, side: usize) -> Result<(Image2D, Image2D), ImageError> {
    let (f, l) = simulate_pair(vol)?;
    if side == 0 || CANVAS % side != 0 {
        return Err(ImageError::BadFactor {
            factor: 0,
            w: side,
            h: side,
        });
    }
    let factor = CANVAS / side;
    Ok((downsample(&f, factor)?, downsample(&l, factor)?))
}

pub fn encode_rimg(img: &Image2D) -> Vec<u8> {
    let mut out = format!(
        "RIMG1\ndims {} {}\nspacing {} {}\nview {}\ndata\n",
        img.width, img.height, img.spacing[0], img.spacing[1], img.view
    )
    .into_bytes();
    out.extend_from_slice(&f32_le_bytes(&img.data));
    out
}

pub fn decode_rimg(buf: &[u8]) -> Result<Image2D, FormatError> {
    let mut r = HeaderReader::new(buf);
    r.expect("RIMG1")?;
    let (off, f) = r.keyed("dims")?;
    let dims: Vec<usize> = parse_fields(off, &f, 2, "dims")?;
    let (soff, f) = r.keyed("spacing")?;
    let spacing: Vec<f64> = parse_fields(soff, &f, 2, "spacing")?;
    if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(FormatError::parse(soff, "spacing must be finite and positive"));
    }
    let (voff, f) = r.keyed("view")?;
    let view = match f.as_slice() {
        [v] => v.parse::<View>().map_err(|e| FormatError::parse(voff, e))?,
        _ => return Err(FormatError::parse(voff, "expected a single view tag")),
    };
    r.expect("data")?;
    let poff = r.offset();
    let n = dims[0] * dims[1];
    if r.rest().len() != n * 4 {
        return Err(FormatError::parse(
            poff,
            format!("expected {} payload bytes, found {}", n * 4, r.rest().len()),
        ));
    }
    let data = read_f32_le(poff, r.rest(), n)?;
    Image2D::new(dims[0], dims[1], [spacing[0], spacing[1]], view, data)
        .map_err(|e| FormatError::parse(poff, e.to_string()))
}

pub fn read_rimg_file(path: &std::path::Path) -> Result<Image2D, FormatError> {
    decode_rimg(&std::fs::read(path)?)
}

/// 8-bit binary PGM preview, linear map [-1, 1] -> [0, 255].
pub fn encode_pgm(img: &Image2D) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(
        img.data
            .iter()
            .map(|&v| (((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round()) as u8),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume3D {
        let g = Grid::new(dims, [1.0; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume3D::new(g, (0..g.len()).map(|_| rng.gen_range(-1000.0..500.0)).collect()).unwrap()
    }

    #[test]
    fn two_value_projection() {
        let g = Grid::new([2, 1, 1], [1.0; 3]).unwrap();
        let v = Volume3D::new(g, vec![2.0, 4.0]).unwrap();
        let f = project_aip(&v, View::Frontal);
        assert_eq!((f.width(), f.height()), (2, 1));
        assert_eq!(f.data(), &[2.0, 4.0]);
        let l = project_aip(&v, View::Lateral);
        assert_eq!(l.data(), &[3.0]);
    }

    #[test]
    fn projection_matches_brute_force_means() {
        let v = random_volume([8, 8, 8], 3);
        let f = project_aip(&v, View::Frontal);
        let l = project_aip(&v, View::Lateral);
        for k in 0..8 {
            let row = 7 - k;
            for i in 0..8 {
                let mut s = 0.0f64;
                for j in 0..8 {
                    s += v.get(i, j, k) as f64;
                }
                assert!((f.get(i, row) as f64 - s / 8.0).abs() <= 1e-6 * (s / 8.0).abs().max(1.0));
            }
            for j in 0..8 {
                let mut s = 0.0f64;
                for i in 0..8 {
                    s += v.get(i, j, k) as f64;
                }
                assert!((l.get(j, row) as f64 - s / 8.0).abs() <= 1e-6 * (s / 8.0).abs().max(1.0));
            }
        }
    }

    #[test]
    fn superior_slice_is_top_row() {
        let g = Grid::new([1, 1, 3], [1.0, 1.0, 2.0]).unwrap();
        let v = Volume3D::new(g, vec![1.0, 2.0, 3.0]).unwrap();
        let f = project_aip(&v, View::Frontal);
        assert_eq!(f.data(), &[3.0, 2.0, 1.0]);
        assert_eq!(f.spacing(), [1.0, 2.0]);
    }

    #[test]
    fn projection_is_linear_and_mean_preserving() {
        let a = random_volume([6, 5, 4], 1);
        let b = random_volume([6, 5, 4], 2);
        let combo = Volume3D::new(
            *a.grid(),
            a.data().iter().zip(b.data()).map(|(x, y)| 0.5 * x - 2.0 * y).collect(),
        )
        .unwrap();
        let mean = |d: &[f32]| d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
        for view in [View::Frontal, View::Lateral] {
            let (pa, pb, pc) = (project_aip(&a, view), project_aip(&b, view), project_aip(&combo, view));
            for ((x, y), z) in pa.data().iter().zip(pb.data()).zip(pc.data()) {
                let want = 0.5 * *x as f64 - 2.0 * *y as f64;
                let scale = 0.5 * x.abs() as f64 + 2.0 * y.abs() as f64;
                assert!((*z as f64 - want).abs() <= 1e-6 * scale.max(1.0));
            }
            let (m0, m1) = (mean(a.data()), mean(pa.data()));
            assert!((m0 - m1).abs() <= 1e-6 * m0.abs());
        }
    }

    #[test]
    fn preprocess_maps_endpoints_and_pads() {
        let mut data = vec![0.0f32; 400 * 300];
        data[0] = -1000.0;
        data[1] = 1000.0;
        data[150 * 400 + 200] = 0.0;
        let img = Image2D::new(400, 300, [1.0, 1.0], View::Frontal, data).unwrap();
        let p = preprocess(&img);
        assert_eq!((p.width(), p.height()), (512, 512));
        let (oc, or) = ((512 - 400) / 2, (512 - 300) / 2);
        assert_eq!(p.get(oc + 200, or + 150), 0.0);
        assert_eq!(p.get(oc, or), -1.0);
        assert_eq!(p.get(oc + 1, or), 1.0);
        for (c, r) in [(0, 0), (511, 0), (0, 511), (511, 511)] {
            assert_eq!(p.get(c, r), 0.0);
        }
        let (lo, hi) = p.data().iter().fold((1.0f32, -1.0f32), |(a, b), &v| (a.min(v), b.max(v)));
        assert_eq!((lo, hi), (-1.0, 1.0));
    }

    #[test]
    fn preprocess_constant_and_full_size() {
        let img = Image2D::new(37, 91, [1.0, 1.0], View::Lateral, vec![5.5; 37 * 91]).unwrap();
        assert!(preprocess(&img).data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f32> = (0..512 * 512).map(|_| rng.gen_range(-3.0..7.0)).collect();
        let img = Image2D::new(512, 512, [1.0, 1.0], View::Frontal, data.clone()).unwrap();
        let p = preprocess(&img);
        let (lo, hi) = data.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        for (o, v) in p.data().iter().zip(&data) {
            let want = (2.0 * (*v as f64 - lo as f64) / (hi as f64 - lo as f64) - 1.0) as f32;
            assert_eq!(*o, want);
        }
    }

    #[test]
    fn preprocess_center_crops_oversized_inputs() {
        let w = 520;
        let data: Vec<f32> = (0..w * 10).map(|i| (i % w) as f32).collect();
        let img = Image2D::new(w, 10, [1.0, 1.0], View::Frontal, data).unwrap();
        let p = preprocess(&img);
        // columns 4..516 survive; column 4 is the minimum, 515 the maximum
        let r0 = (512 - 10) / 2;
        assert_eq!(p.get(0, r0), -1.0);
        assert_eq!(p.get(511, r0), 1.0);
    }

    #[test]
    fn constant_volume_gives_zero_canvases() {
        let g = Grid::new([10, 8, 12], [1.25; 3]).unwrap();
        let (f, l) = simulate_pair(&Volume3D::filled(g, 7.0)).unwrap();
        assert!(f.data().iter().chain(l.data()).all(|&v| v == 0.0));
        let (f, _) = simulate_network_inputs(&Volume3D::filled(g, 7.0), 128).unwrap();
        assert_eq!((f.width(), f.height()), (128, 128));
        assert_eq!(f.spacing(), [4.0, 4.0]);
    }

    #[test]
    fn downsample_averages_blocks() {
        let img = Image2D::new(4, 2, [1.0, 1.0], View::Frontal, vec![1., 3., 5., 7., 1., 3., 5., 7.]).unwrap();
        let d = downsample(&img, 2).unwrap();
        assert_eq!(d.data(), &[2.0, 6.0]);
        assert!(downsample(&img, 3).is_err());
    }

    #[test]
    fn rimg_round_trip_and_errors() {
        let img = preprocess(&project_aip(&random_volume([5, 6, 7], 4), View::Lateral));
        let bytes = encode_rimg(&img);
        let back = decode_rimg(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(encode_rimg(&back), bytes);
        assert!(matches!(
            decode_rimg(b"RIMG1\ndims 1 1\nspacing 1 1\nview top\ndata\n\0\0\0\0"),
            Err(FormatError::Parse { offset: 27, .. })
        ));
        let pgm = encode_pgm(&img);
        assert!(pgm.starts_with(b"P5\n512 512\n255\n"));
        assert_eq!(pgm.len(), 15 + 512 * 512);
    }
}
