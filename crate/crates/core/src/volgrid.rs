//! 3D scalar volumes and binary masks on a regular grid with physical
//! spacing, isotropic resampling and mask volumetry.
//!
//! Index `(i, j, k)` addresses x (left to right), y (posterior to anterior)
//! and z (inferior to superior). Storage is x-fastest. The physical
//! position of voxel `i` along an axis is `(i + 0.5) * spacing`.

use std::io::Write;

use thiserror::Error;

use crate::io::{parse_fields, read_f32_le, FormatError, HeaderReader};

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("data length {len} does not match dims {dims:?}")]
    LengthMismatch { len: usize, dims: [usize; 3] },
    #[error("spacing must be finite and positive, got {0:?}")]
    BadSpacing([f64; 3]),
    #[error("dims must be non-zero, got {0:?}")]
    EmptyDims([usize; 3]),
    #[error("volume contains a non-finite value at linear index {0}")]
    NonFinite(usize),
    #[error("mask contains value {value} at linear index {index}; only 0 and 1 are allowed")]
    NonBinary { index: usize, value: u8 },
    #[error("target spacing must be finite and positive, got {0}")]
    BadTargetSpacing(f64),
}

/// Grid geometry shared by volumes and masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self, VolumeError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::EmptyDims(dims));
        }
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(VolumeError::BadSpacing(spacing));
        }
        Ok(Self { dims, spacing })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// Physical extent along each axis in millimeters.
    pub fn extent(&self) -> [f64; 3] {
        [
            self.dims[0] as f64 * self.spacing[0],
            self.dims[1] as f64 * self.spacing[1],
            self.dims[2] as f64 * self.spacing[2],
        ]
    }

    /// Grid covering the same physical extent at isotropic `target` spacing.
    pub fn isotropic(&self, target: f64) -> Result<Grid, VolumeError> {
        if !target.is_finite() || target <= 0.0 {
            return Err(VolumeError::BadTargetSpacing(target));
        }
        let mut dims = [0usize; 3];
        for (d, ext) in dims.iter_mut().zip(self.extent()) {
            *d = ((ext / target + 0.5).floor() as usize).max(1);
        }
        Grid::new(dims, [target; 3])
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    grid: Grid,
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(grid: Grid, data: Vec<f32>) -> Result<Self, VolumeError> {
        if data.len() != grid.len() {
            return Err(VolumeError::LengthMismatch {
                len: data.len(),
                dims: grid.dims,
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Self { grid, data })
    }

    pub fn filled(grid: Grid, value: f32) -> Self {
        Self {
            data: vec![value; grid.len()],
            grid,
        }
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel center (mm).
    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64, f64) -> f32) -> Result<Self, VolumeError> {
        let [nx, ny, nz] = grid.dims;
        let [sx, sy, sz] = grid.spacing;
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..nz {
            let z = (k as f64 + 0.5) * sz;
            for j in 0..ny {
                let y = (j as f64 + 0.5) * sy;
                for i in 0..nx {
                    data.push(f((i as f64 + 0.5) * sx, y, z));
                }
            }
        }
        Self::new(grid, data)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mask3D {
    grid: Grid,
    data: Vec<u8>,
}

impl Mask3D {
    pub fn new(grid: Grid, data: Vec<u8>) -> Result<Self, VolumeError> {
        if data.len() != grid.len() {
            return Err(VolumeError::LengthMismatch {
                len: data.len(),
                dims: grid.dims,
            });
        }
        if let Some(index) = data.iter().position(|&v| v > 1) {
            return Err(VolumeError::NonBinary {
                index,
                value: data[index],
            });
        }
        Ok(Self { grid, data })
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64, f64) -> bool) -> Self {
        let [nx, ny, nz] = grid.dims;
        let [sx, sy, sz] = grid.spacing;
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..nz {
            let z = (k as f64 + 0.5) * sz;
            for j in 0..ny {
                let y = (j as f64 + 0.5) * sy;
                for i in 0..nx {
                    data.push(f((i as f64 + 0.5) * sx, y, z) as u8);
                }
            }
        }
        Self { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[self.grid.index(i, j, k)] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// Volume of the set voxels in liters (1 mm^3 = 1e-6 L).
pub fn volume_from_mask(mask: &Mask3D) -> f64 {
    mask.count() as f64 * mask.grid.voxel_volume_mm3() * 1e-6
}

/// Linear interpolation taps for one output axis: `(lower, upper, weight)`.
fn linear_taps(n_in: usize, s_in: f64, n_out: usize, s_out: f64) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let u = ((o as f64 + 0.5) * s_out / s_in - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = u.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, u - lo as f64)
        })
        .collect()
}

fn nearest_taps(n_in: usize, s_in: f64, n_out: usize, s_out: f64) -> Vec<usize> {
    (0..n_out)
        .map(|o| (((o as f64 + 0.5) * s_out / s_in).floor() as usize).min(n_in - 1))
        .collect()
}

#[inline]
fn lerp(a: f32, b: f32, w: f64) -> f32 {
    ((1.0 - w) * a as f64 + w * b as f64) as f32
}

/// Trilinear resampling onto an isotropic grid covering the same extent.
///
/// Implemented as three separable linear passes (x, then y, then z), which
/// is algebraically the trilinear interpolant. Sample positions outside the
/// outermost voxel centers clamp to the edge voxel.
pub fn resample_isotropic(vol: &Volume3D, target_spacing_mm: f64) -> Result<Volume3D, VolumeError> {
    let src = vol.grid;
    let dst = src.isotropic(target_spacing_mm)?;
    let [nx, ny, nz] = src.dims;
    let [mx, my, mz] = dst.dims;
    let tx = linear_taps(nx, src.spacing[0], mx, dst.spacing[0]);
    let ty = linear_taps(ny, src.spacing[1], my, dst.spacing[1]);
    let tz = linear_taps(nz, src.spacing[2], mz, dst.spacing[2]);

    // x pass: (mx, ny, nz)
    let mut px = Vec::with_capacity(mx * ny * nz);
    for row in vol.data.chunks_exact(nx) {
        px.extend(tx.iter().map(|&(lo, hi, w)| lerp(row[lo], row[hi], w)));
    }
    // y pass: (mx, my, nz)
    let mut py = Vec::with_capacity(mx * my * nz);
    for slab in px.chunks_exact(mx * ny) {
        for &(lo, hi, w) in &ty {
            let a = &slab[lo * mx..(lo + 1) * mx];
            let b = &slab[hi * mx..(hi + 1) * mx];
            py.extend(a.iter().zip(b).map(|(&a, &b)| lerp(a, b, w)));
        }
    }
    drop(px);
    // z pass: (mx, my, mz)
    let plane = mx * my;
    let mut out = Vec::with_capacity(dst.len());
    for &(lo, hi, w) in &tz {
        let a = &py[lo * plane..(lo + 1) * plane];
        let b = &py[hi * plane..(hi + 1) * plane];
        out.extend(a.iter().zip(b).map(|(&a, &b)| lerp(a, b, w)));
    }
    Ok(Volume3D {
        grid: dst,
        data: out,
    })
}

/// Nearest-neighbour resampling of a mask onto an isotropic grid.
pub fn nearest_resample_mask(mask: &Mask3D, target_spacing_mm: f64) -> Result<Mask3D, VolumeError> {
    let src = mask.grid;
    let dst = src.isotropic(target_spacing_mm)?;
    let tx = nearest_taps(src.dims[0], src.spacing[0], dst.dims[0], dst.spacing[0]);
    let ty = nearest_taps(src.dims[1], src.spacing[1], dst.dims[1], dst.spacing[1]);
    let tz = nearest_taps(src.dims[2], src.spacing[2], dst.dims[2], dst.spacing[2]);
    let mut data = Vec::with_capacity(dst.len());
    for &k in &tz {
        for &j in &ty {
            let row = src.index(0, j, k);
            data.extend(tx.iter().map(|&i| mask.data[row + i]));
        }
    }
    Ok(Mask3D { grid: dst, data })
}

/// Contents of an RVOL1 file.
#[derive(Debug, Clone, PartialEq)]
pub enum Rvol {
    Volume(Volume3D),
    Mask(Mask3D),
}

fn write_rvol_header(out: &mut Vec<u8>, grid: &Grid, dtype: &str) {
    let [nx, ny, nz] = grid.dims;
    let [sx, sy, sz] = grid.spacing;
    out.extend_from_slice(
        format!("RVOL1\ndims {nx} {ny} {nz}\nspacing {sx} {sy} {sz}\ndtype {dtype}\ndata\n")
            .as_bytes(),
    );
}

pub fn encode_volume(vol: &Volume3D) -> Vec<u8> {
    let mut out = Vec::with_capacity(vol.data.len() * 4 + 64);
    write_rvol_header(&mut out, &vol.grid, "f32");
    out.extend_from_slice(&crate::io::f32_le_bytes(&vol.data));
    out
}

pub fn encode_mask(mask: &Mask3D) -> Vec<u8> {
    let mut out = Vec::with_capacity(mask.data.len() + 64);
    write_rvol_header(&mut out, &mask.grid, "u8");
    out.extend_from_slice(&mask.data);
    out
}

pub fn decode_rvol(buf: &[u8]) -> Result<Rvol, FormatError> {
    let mut r = HeaderReader::new(buf);
    r.expect("RVOL1")?;
    let (off, f) = r.keyed("dims")?;
    let dims: Vec<usize> = parse_fields(off, &f, 3, "dims")?;
    let (soff, f) = r.keyed("spacing")?;
    let spacing: Vec<f64> = parse_fields(soff, &f, 3, "spacing")?;
    let grid = Grid::new([dims[0], dims[1], dims[2]], [spacing[0], spacing[1], spacing[2]])
        .map_err(|e| FormatError::parse(off, e.to_string()))?;
    let (doff, f) = r.keyed("dtype")?;
    let dtype = match f.as_slice() {
        ["f32"] => "f32",
        ["u8"] => "u8",
        _ => return Err(FormatError::parse(doff, format!("unknown dtype {f:?}"))),
    };
    r.expect("data")?;
    let payload_off = r.offset();
    let payload = r.rest();
    let n = grid.len();
    if dtype == "f32" {
        if payload.len() != n * 4 {
            return Err(FormatError::parse(
                payload_off,
                format!("expected {} payload bytes, found {}", n * 4, payload.len()),
            ));
        }
        let data = read_f32_le(payload_off, payload, n)?;
        Volume3D::new(grid, data)
            .map(Rvol::Volume)
            .map_err(|e| FormatError::parse(payload_off, e.to_string()))
    } else {
        if payload.len() != n {
            return Err(FormatError::parse(
                payload_off,
                format!("expected {n} payload bytes, found {}", payload.len()),
            ));
        }
        Mask3D::new(grid, payload.to_vec())
            .map(Rvol::Mask)
            .map_err(|e| FormatError::parse(payload_off, e.to_string()))
    }
}

pub fn write_rvol_file(path: &std::path::Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(bytes)?;
    f.flush()
}

pub fn read_rvol_file(path: &std::path::Path) -> Result<Rvol, FormatError> {
    let buf = std::fs::read(path)?;
    decode_rvol(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(dims: [usize; 3], s: [f64; 3]) -> Grid {
        Grid::new(dims, s).unwrap()
    }

    #[test]
    fn volume_from_mask_unit_conversion() {
        let g = grid([100, 100, 500], [1.0; 3]);
        let m = Mask3D::new(g, vec![1; g.len()]).unwrap();
        assert!((volume_from_mask(&m) - 5.0).abs() < 1e-12);

        let g = grid([2, 1, 1], [2.0; 3]);
        let m = Mask3D::new(g, vec![1, 0]).unwrap();
        assert!((volume_from_mask(&m) - 8e-6).abs() < 1e-18);

        let m = Mask3D::new(g, vec![0, 0]).unwrap();
        assert_eq!(volume_from_mask(&m), 0.0);
    }

    #[test]
    fn constructors_enforce_invariants() {
        assert!(Grid::new([1, 1, 1], [1.0, 0.0, 1.0]).is_err());
        assert!(Grid::new([1, 1, 1], [1.0, f64::NAN, 1.0]).is_err());
        let g = grid([2, 1, 1], [1.0; 3]);
        assert!(Volume3D::new(g, vec![0.0]).is_err());
        assert!(Volume3D::new(g, vec![0.0, f32::NAN]).is_err());
        assert!(matches!(
            Mask3D::new(g, vec![0, 2]),
            Err(VolumeError::NonBinary { index: 1, value: 2 })
        ));
    }

    #[test]
    fn resample_rejects_bad_target() {
        let v = Volume3D::filled(grid([2, 2, 2], [1.0; 3]), 1.0);
        for t in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(
                resample_isotropic(&v, t),
                Err(VolumeError::BadTargetSpacing(_))
            ));
        }
        let m = Mask3D::new(*v.grid(), vec![1; 8]).unwrap();
        assert!(nearest_resample_mask(&m, 0.0).is_err());
    }

    #[test]
    fn output_dims_round_half_up_with_minimum_one() {
        let g = grid([3, 5, 1], [1.5, 1.3, 0.2]);
        // extents 4.5, 6.5, 0.2
        assert_eq!(g.isotropic(1.0).unwrap().dims, [5, 7, 1]);
    }

    #[test]
    fn constant_volume_stays_constant() {
        let v = Volume3D::filled(grid([7, 5, 6], [1.7, 0.6, 2.3]), 7.0);
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(r.spacing(), [1.0; 3]);
        assert!(r.data().iter().all(|&x| x == 7.0));
    }

    #[test]
    fn identity_spacing_is_identity() {
        let g = grid([4, 3, 5], [1.0; 3]);
        let v = Volume3D::from_fn(g, |x, y, z| (x * 3.1 - y * y + z.sin()) as f32).unwrap();
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(r, v);

        let m = Mask3D::from_fn(g, |x, y, _| x + y > 3.0);
        assert_eq!(nearest_resample_mask(&m, 1.0).unwrap(), m);
    }

    #[test]
    fn trilinear_is_exact_on_linear_fields() {
        let g = grid([20, 16, 12], [1.5; 3]);
        let f = |x: f64, y: f64, z: f64| 2.0 * x + 3.0 * y - z;
        let v = Volume3D::from_fn(g, |x, y, z| f(x, y, z) as f32).unwrap();
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(r.dims(), [30, 24, 18]);
        // interior: output centers whose sample position lies between input centers
        let lo = 0.75;
        let [hx, hy, hz] = [20.0 * 1.5 - 0.75, 16.0 * 1.5 - 0.75, 12.0 * 1.5 - 0.75];
        let mut checked = 0;
        for k in 0..18 {
            for j in 0..24 {
                for i in 0..30 {
                    let (x, y, z) = (i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5);
                    if x < lo || y < lo || z < lo || x > hx || y > hy || z > hz {
                        continue;
                    }
                    let want = f(x, y, z);
                    let got = r.get(i, j, k) as f64;
                    assert!(
                        (got - want).abs() <= 1e-5 * want.abs().max(1.0),
                        "({i},{j},{k}) got {got} want {want}"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 5_000);
    }

    #[test]
    fn half_space_mask_volume_is_preserved() {
        let g = grid([40, 30, 20], [2.0; 3]);
        let x0 = 37.0;
        let m = Mask3D::from_fn(g, |x, _, _| x < x0);
        let r = nearest_resample_mask(&m, 1.0).unwrap();
        assert!(r.data().iter().all(|&v| v <= 1));
        let analytic = x0 * 60.0 * 40.0 * 1e-6;
        let got = volume_from_mask(&r);
        assert!((got - analytic).abs() / analytic < 0.03, "{got} vs {analytic}");
        let ones = Mask3D::new(g, vec![1; g.len()]).unwrap();
        let r = nearest_resample_mask(&ones, 1.3).unwrap();
        assert!(r.data().iter().all(|&v| v == 1));
    }

    #[test]
    fn rvol_rejects_malformed_header_with_offset() {
        let err = decode_rvol(b"RVOL1\ndims 2 2\n").unwrap_err();
        match err {
            FormatError::Parse { offset, .. } => assert_eq!(offset, 6),
            other => panic!("{other:?}"),
        }
        let err = decode_rvol(b"RVOL1\ndims 1 1 1\nspacing 1 1 1\ndtype f64\ndata\n").unwrap_err();
        assert!(matches!(err, FormatError::Parse { offset: 31, .. }), "{err}");
        let err = decode_rvol(b"RVOL1\ndims 1 1 1\nspacing 1 1 1\ndtype u8\ndata\n\x05").unwrap_err();
        assert!(err.to_string().contains("only 0 and 1"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn resample_stays_within_input_range(
            nx in 1usize..6, ny in 1usize..6, nz in 1usize..6,
            sx in 0.4f64..2.5, sy in 0.4f64..2.5, sz in 0.4f64..2.5,
            t in 0.5f64..2.0, seed in any::<u64>(),
        ) {
            let g = grid([nx, ny, nz], [sx, sy, sz]);
            let mut state = seed;
            let data = (0..g.len()).map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 40) as f32 / 16777216.0) * 2000.0 - 1000.0
            }).collect();
            let v = Volume3D::new(g, data).unwrap();
            let (lo, hi) = v.min_max();
            let r = resample_isotropic(&v, t).unwrap();
            let (rlo, rhi) = r.min_max();
            prop_assert!(rlo >= lo && rhi <= hi);
            prop_assert_eq!(resample_isotropic(&v, t).unwrap(), r);
        }

        #[test]
        fn rvol_round_trip_is_byte_identical(
            nx in 1usize..5, ny in 1usize..5, nz in 1usize..5,
            sx in 0.1f64..3.0, seed in any::<u32>(),
        ) {
            let g = grid([nx, ny, nz], [sx, 1.25, 0.7]);
            let v = Volume3D::from_fn(g, |x, y, z| ((x * 13.0 + y * 7.0 - z) * seed as f64).sin() as f32).unwrap();
            let bytes = encode_volume(&v);
            let back = match decode_rvol(&bytes).unwrap() { Rvol::Volume(v) => v, _ => unreachable!() };
            prop_assert_eq!(encode_volume(&back), bytes);
            let m = Mask3D::from_fn(g, |x, _, _| x > sx);
            let bytes = encode_mask(&m);
            let back = match decode_rvol(&bytes).unwrap() { Rvol::Mask(m) => m, _ => unreachable!() };
            prop_assert_eq!(encode_mask(&back), bytes);
        }
    }
}
