//! Synthetic thorax phantoms with analytically defined lungs, and datasets
//! of simulated radiograph pairs with (optionally noisy) volume labels.
//!
//! Geometry lives in millimeters relative to the grid center. Lungs are
//! superellipsoids (exponent 2 is an ordinary ellipsoid), the torso is a
//! superelliptic cylinder along z, the heart is an ellipsoid and the
//! diaphragm is a horizontal cut plane.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;
use thiserror::Error;

use crate::drr::{encode_rimg, simulate_network_inputs, ImageError};
use crate::seed::stream;
use crate::volgrid::{
    encode_mask, encode_volume, volume_from_mask, write_rvol_file, Grid, Mask3D, Volume3D,
    VolumeError,
};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom parameters: {0}")]
    InvalidParams(String),
    #[error("lung {0} extends outside the grid")]
    LungOutsideGrid(usize),
    #[error("lung {0} extends outside the body")]
    LungOutsideBody(usize),
    #[error("invalid noise spec `{0}`; expected exact, mult:<rel>, add:<ml> or bias:<ml>")]
    BadNoiseSpec(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PhantomError + '_ {
    move |source| PhantomError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intensities {
    pub air: f32,
    pub body: f32,
    pub lung: f32,
    pub heart: f32,
}

impl Default for Intensities {
    fn default() -> Self {
        Self {
            air: -1000.0,
            body: 0.0,
            lung: -800.0,
            heart: 40.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Superellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub exponent: f64,
}

impl Superellipsoid {
    pub fn ellipsoid(center: [f64; 3], semi_axes: [f64; 3]) -> Self {
        Self {
            center,
            semi_axes,
            exponent: 2.0,
        }
    }

    /// Closed-form volume in liters: 8abc * Gamma(1 + 1/p)^3 / Gamma(1 + 3/p).
    pub fn analytic_volume_liters(&self) -> f64 {
        let [a, b, c] = self.semi_axes;
        let p = self.exponent;
        8.0 * a * b * c * gamma(1.0 + 1.0 / p).powi(3) / gamma(1.0 + 3.0 / p) * 1e-6
    }

    fn axis_terms(&self, axis: usize, coords: &[f64]) -> Vec<f64> {
        axis_terms(self.center[axis], self.semi_axes[axis], self.exponent, coords)
    }
}

fn axis_terms(center: f64, semi: f64, exponent: f64, coords: &[f64]) -> Vec<f64> {
    coords
        .iter()
        .map(|&x| {
            let t = ((x - center) / semi).abs();
            if exponent == 2.0 {
                t * t
            } else {
                t.powf(exponent)
            }
        })
        .collect()
}

/// Superelliptic cylinder along z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Torso {
    pub center_xy: [f64; 2],
    pub semi_axes: [f64; 2],
    pub exponent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomGeometry {
    pub torso: Torso,
    pub lungs: Vec<Superellipsoid>,
    pub heart: Option<Superellipsoid>,
    /// Lung tissue exists only strictly above this z (mm).
    pub diaphragm_z: Option<f64>,
}

/// Sampling ranges for the default thorax distribution. Lung sizes share a
/// latent size factor so the volume distribution spans small to large
/// subjects instead of concentrating around the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeRanges {
    pub lung_lr_mm: (f64, f64),
    pub lung_ap_mm: (f64, f64),
    pub lung_si_mm: (f64, f64),
    pub exponent: (f64, f64),
    /// Standard deviation of per-axis deviation from the latent size factor.
    pub size_jitter: f64,
    /// Scale of the heart-side lung relative to the other, left-right axis.
    pub heart_side_scale: (f64, f64),
    pub medial_gap_mm: f64,
    pub lung_center_y_mm: (f64, f64),
    pub lung_center_z_mm: (f64, f64),
    /// Diaphragm height as a fraction of the lung semi-axis below center;
    /// 1.0 leaves the lung uncut.
    pub diaphragm_fraction: (f64, f64),
    pub heart_semi_mm: [(f64, f64); 3],
    pub heart_offset_mm: [f64; 3],
    pub torso_semi_mm: [f64; 2],
    pub torso_exponent: f64,
}

impl Default for ShapeRanges {
    fn default() -> Self {
        Self {
            lung_lr_mm: (36.0, 57.0),
            lung_ap_mm: (55.0, 90.0),
            lung_si_mm: (88.0, 134.0),
            exponent: (2.0, 5.0),
            size_jitter: 0.08,
            heart_side_scale: (0.85, 1.0),
            medial_gap_mm: 4.0,
            lung_center_y_mm: (-6.0, 0.0),
            lung_center_z_mm: (-6.0, 6.0),
            diaphragm_fraction: (0.65, 1.0),
            heart_semi_mm: [(40.0, 55.0), (30.0, 42.0), (40.0, 55.0)],
            heart_offset_mm: [-18.0, 35.0, -0.45],
            torso_semi_mm: [126.0, 110.0],
            torso_exponent: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub intensities: Intensities,
    pub noise_sigma: f32,
    pub shapes: ShapeRanges,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            dims: [192, 160, 224],
            spacing_mm: [1.25; 3],
            intensities: Intensities::default(),
            noise_sigma: 10.0,
            shapes: ShapeRanges::default(),
        }
    }
}

impl PhantomParams {
    pub fn grid(&self) -> Result<Grid, PhantomError> {
        Ok(Grid::new(self.dims, self.spacing_mm)?)
    }

    fn validate(&self) -> Result<(), PhantomError> {
        let s = &self.shapes;
        let ranges = [
            ("lung_lr_mm", s.lung_lr_mm),
            ("lung_ap_mm", s.lung_ap_mm),
            ("lung_si_mm", s.lung_si_mm),
            ("exponent", s.exponent),
            ("heart_side_scale", s.heart_side_scale),
            ("diaphragm_fraction", s.diaphragm_fraction),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(PhantomError::InvalidParams(format!(
                    "{name} range ({lo}, {hi}) must be positive and ordered"
                )));
            }
        }
        if s.exponent.0 < 1.0 {
            return Err(PhantomError::InvalidParams("exponent must be >= 1".into()));
        }
        let i = self.intensities;
        if ![i.air, i.body, i.lung, i.heart].iter().all(|v| v.is_finite()) {
            return Err(PhantomError::InvalidParams("intensity levels must be finite".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(PhantomError::InvalidParams("noise sigma must be >= 0".into()));
        }
        Ok(())
    }

    /// Draws one concrete thorax geometry.
    pub fn sample_geometry(&self, rng: &mut impl Rng) -> PhantomGeometry {
        let s = &self.shapes;
        let size: f64 = rng.gen();
        let jitter = Normal::new(0.0, s.size_jitter.max(0.0)).expect("finite sd");
        let mut axis = |(lo, hi): (f64, f64)| {
            let u = (size + jitter.sample(rng)).clamp(0.0, 1.0);
            lo + (hi - lo) * u
        };
        let lr = axis(s.lung_lr_mm);
        let ap = axis(s.lung_ap_mm);
        let si = axis(s.lung_si_mm);
        // boxier lungs in larger subjects
        let shape_u = 0.5 * size + 0.5 * rng.gen::<f64>();
        let exponent = s.exponent.0 + (s.exponent.1 - s.exponent.0) * shape_u;
        let heart_side = rng.gen_range(s.heart_side_scale.0..=s.heart_side_scale.1);
        let cy = rng.gen_range(s.lung_center_y_mm.0..=s.lung_center_y_mm.1);
        let cz = rng.gen_range(s.lung_center_z_mm.0..=s.lung_center_z_mm.1);
        let cut = rng.gen_range(s.diaphragm_fraction.0..=s.diaphragm_fraction.1);

        let half_gap = 0.5 * s.medial_gap_mm;
        let right = Superellipsoid {
            center: [half_gap + lr, cy, cz],
            semi_axes: [lr, ap, si],
            exponent,
        };
        let lr_left = lr * heart_side;
        let left = Superellipsoid {
            center: [-(half_gap + lr_left), cy, cz],
            semi_axes: [lr_left, ap, si],
            exponent,
        };
        let size_scale = 0.8 + 0.4 * size;
        let mut heart_axes = [0.0; 3];
        for (h, (lo, hi)) in heart_axes.iter_mut().zip(s.heart_semi_mm) {
            *h = rng.gen_range(lo..=hi) * size_scale;
        }
        let heart = Superellipsoid::ellipsoid(
            [
                s.heart_offset_mm[0],
                cy + s.heart_offset_mm[1],
                cz + s.heart_offset_mm[2] * si,
            ],
            heart_axes,
        );
        PhantomGeometry {
            torso: Torso {
                center_xy: [0.0, 0.0],
                semi_axes: s.torso_semi_mm,
                exponent: s.torso_exponent,
            },
            lungs: vec![right, left],
            heart: Some(heart),
            diaphragm_z: (cut < 1.0).then(|| cz - cut * si),
        }
    }
}

/// A rendered phantom with its ground-truth lung volume.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: Volume3D,
    pub mask: Mask3D,
    pub tlv_liters: f64,
    pub geometry: PhantomGeometry,
}

/// Voxel-center coordinates along one axis, relative to the grid center.
fn centered_coords(n: usize, spacing: f64) -> Vec<f64> {
    let half = 0.5 * n as f64 * spacing;
    (0..n).map(|i| (i as f64 + 0.5) * spacing - half).collect()
}

/// Rasterizes a geometry. Voxels are lung iff inside a lung, above the
/// diaphragm and outside the heart; lungs must lie inside the grid and the
/// torso.
pub fn render(
    geometry: &PhantomGeometry,
    grid: Grid,
    intensities: Intensities,
    noise_sigma: f32,
    noise_rng: &mut impl Rng,
) -> Result<(Volume3D, Mask3D), PhantomError> {
    let ext = grid.extent();
    for (n, lung) in geometry.lungs.iter().enumerate() {
        let inside = (0..3).all(|a| {
            let half = 0.5 * ext[a];
            lung.center[a] - lung.semi_axes[a] >= -half && lung.center[a] + lung.semi_axes[a] <= half
        });
        if !inside {
            return Err(PhantomError::LungOutsideGrid(n));
        }
        if lung.semi_axes.iter().any(|&a| !(a > 0.0)) || !(lung.exponent >= 1.0) {
            return Err(PhantomError::InvalidParams(format!("lung {n} has a degenerate shape")));
        }
    }
    let [nx, ny, nz] = grid.dims;
    let xs = centered_coords(nx, grid.spacing[0]);
    let ys = centered_coords(ny, grid.spacing[1]);
    let zs = centered_coords(nz, grid.spacing[2]);

    let t = &geometry.torso;
    let torso_x = axis_terms(t.center_xy[0], t.semi_axes[0], t.exponent, &xs);
    let torso_y = axis_terms(t.center_xy[1], t.semi_axes[1], t.exponent, &ys);
    let lung_terms: Vec<[Vec<f64>; 3]> = geometry
        .lungs
        .iter()
        .map(|l| [l.axis_terms(0, &xs), l.axis_terms(1, &ys), l.axis_terms(2, &zs)])
        .collect();
    let heart_terms = geometry
        .heart
        .map(|h| [h.axis_terms(0, &xs), h.axis_terms(1, &ys), h.axis_terms(2, &zs)]);

    let noise = (noise_sigma > 0.0).then(|| Normal::new(0.0f32, noise_sigma).expect("finite sigma"));
    let mut data = Vec::with_capacity(grid.len());
    let mut mask = Vec::with_capacity(grid.len());
    for (k, &z) in zs.iter().enumerate() {
        let above = geometry.diaphragm_z.map_or(true, |d| z > d);
        for j in 0..ny {
            for i in 0..nx {
                let in_torso = torso_x[i] + torso_y[j] <= 1.0;
                let mut in_lung = false;
                for (n, [lx, ly, lz]) in lung_terms.iter().enumerate() {
                    if lx[i] + ly[j] + lz[k] <= 1.0 {
                        if !in_torso {
                            return Err(PhantomError::LungOutsideBody(n));
                        }
                        in_lung = true;
                    }
                }
                let in_heart = heart_terms
                    .as_ref()
                    .is_some_and(|[hx, hy, hz]| hx[i] + hy[j] + hz[k] <= 1.0);
                let is_lung = in_lung && above && !in_heart;
                let level = if is_lung {
                    intensities.lung
                } else if !in_torso {
                    intensities.air
                } else if in_heart {
                    intensities.heart
                } else {
                    intensities.body
                };
                mask.push(is_lung as u8);
                data.push(match &noise {
                    Some(n) => level + n.sample(noise_rng),
                    None => level,
                });
            }
        }
    }
    Ok((Volume3D::new(grid, data)?, Mask3D::new(grid, mask)?))
}

/// Generates one phantom. The same `(params, seed)` always yields
/// bit-identical output.
pub fn generate(params: &PhantomParams, seed: u64) -> Result<Phantom, PhantomError> {
    params.validate()?;
    let grid = params.grid()?;
    let geometry = params.sample_geometry(&mut stream(seed, 0));
    let (volume, mask) = render(
        &geometry,
        grid,
        params.intensities,
        params.noise_sigma,
        &mut stream(seed, 1),
    )?;
    Ok(Phantom {
        tlv_liters: volume_from_mask(&mask),
        volume,
        mask,
        geometry,
    })
}

/// Label noise applied to the true volume to emulate reference-standard
/// error. Magnitudes are in liters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LabelNoise {
    Exact,
    MultiplicativeGaussian { sigma_rel: f64 },
    AdditiveGaussian { sigma_liters: f64 },
    Bias { delta_liters: f64 },
}

impl LabelNoise {
    /// Label for case `index`, drawing from a stream derived from `seed`.
    pub fn apply(&self, true_tlv: f64, seed: u64, index: u64) -> f64 {
        let z = || -> f64 { rand_distr::StandardNormal.sample(&mut stream(seed, index)) };
        match *self {
            LabelNoise::Exact => true_tlv,
            LabelNoise::MultiplicativeGaussian { sigma_rel } => true_tlv * (1.0 + sigma_rel * z()),
            LabelNoise::AdditiveGaussian { sigma_liters } => true_tlv + sigma_liters * z(),
            LabelNoise::Bias { delta_liters } => true_tlv + delta_liters,
        }
    }
}

impl FromStr for LabelNoise {
    type Err = PhantomError;

    /// `exact`, `mult:<relative sigma>`, `add:<sigma ml>`, `bias:<delta ml>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PhantomError::BadNoiseSpec(s.to_string());
        if s == "exact" {
            return Ok(LabelNoise::Exact);
        }
        let (kind, value) = s.split_once(':').ok_or_else(bad)?;
        let v: f64 = value.parse().map_err(|_| bad())?;
        if !v.is_finite() {
            return Err(bad());
        }
        match kind {
            "mult" if v >= 0.0 => Ok(LabelNoise::MultiplicativeGaussian { sigma_rel: v }),
            "add" if v >= 0.0 => Ok(LabelNoise::AdditiveGaussian {
                sigma_liters: v / 1000.0,
            }),
            "bias" => Ok(LabelNoise::Bias {
                delta_liters: v / 1000.0,
            }),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for LabelNoise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LabelNoise::Exact => write!(f, "exact"),
            LabelNoise::MultiplicativeGaussian { sigma_rel } => write!(f, "mult:{sigma_rel}"),
            LabelNoise::AdditiveGaussian { sigma_liters } => write!(f, "add:{}", sigma_liters * 1000.0),
            LabelNoise::Bias { delta_liters } => write!(f, "bias:{}", delta_liters * 1000.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Consecutive case counts per split; cases are assigned in index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitPlan {
    /// 60/20/20, remainder to train.
    pub fn proportional(n: usize) -> Self {
        let val = n / 5;
        let test = n / 5;
        Self {
            train: n - val - test,
            val,
            test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn split_of(&self, index: usize) -> Split {
        if index < self.train {
            Split::Train
        } else if index < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub frontal_path: String,
    pub lateral_path: String,
    #[serde(serialize_with = "six_decimals")]
    pub label_liters: f64,
    #[serde(serialize_with = "six_decimals")]
    pub true_tlv_liters: f64,
    pub split: Split,
}

fn six_decimals<S: serde::Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{v:.6}"))
}

pub const MANIFEST_NAME: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub splits: SplitPlan,
    /// Side of the stored network-input images (must divide 512).
    pub image_side: usize,
    pub save_volumes: bool,
    pub save_previews: bool,
}

impl DatasetOptions {
    pub fn new(n: usize) -> Self {
        Self {
            splits: SplitPlan::proportional(n),
            image_side: 128,
            save_volumes: false,
            save_previews: false,
        }
    }
}

/// Generates `splits.total()` phantoms into `out_dir`: RIMG pairs under
/// `images/`, optional RVOL volume/mask pairs under `volumes/`, and
/// `manifest.csv`. Case `i` uses phantom seed `derive_seed(seed, i)`;
/// label noise uses an independent stream family.
pub fn make_dataset(
    params: &PhantomParams,
    noise: LabelNoise,
    seed: u64,
    options: &DatasetOptions,
    out_dir: &Path,
) -> Result<Vec<CaseRecord>, PhantomError> {
    let n = options.splits.total();
    if n == 0 {
        return Err(PhantomError::InvalidParams("dataset size must be > 0".into()));
    }
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    let volumes = out_dir.join("volumes");
    if options.save_volumes {
        fs::create_dir_all(&volumes).map_err(io_err(&volumes))?;
    }
    let noise_seed = crate::seed::derive_seed(seed, u64::MAX);
    let mut records = Vec::with_capacity(n);
    for index in 0..n {
        let case_id = format!("case{index:05}");
        let phantom = generate(params, crate::seed::derive_seed(seed, index as u64))?;
        let (frontal, lateral) = simulate_network_inputs(&phantom.volume, options.image_side)?;
        let frontal_path = format!("images/{case_id}_frontal.rimg");
        let lateral_path = format!("images/{case_id}_lateral.rimg");
        for (rel, img) in [(&frontal_path, &frontal), (&lateral_path, &lateral)] {
            let path = out_dir.join(rel);
            fs::write(&path, encode_rimg(img)).map_err(io_err(&path))?;
            if options.save_previews {
                let pgm = path.with_extension("pgm");
                fs::write(&pgm, crate::drr::encode_pgm(img)).map_err(io_err(&pgm))?;
            }
        }
        if options.save_volumes {
            let vp = volumes.join(format!("{case_id}_ct.rvol"));
            write_rvol_file(&vp, &encode_volume(&phantom.volume)).map_err(io_err(&vp))?;
            let mp = volumes.join(format!("{case_id}_mask.rvol"));
            write_rvol_file(&mp, &encode_mask(&phantom.mask)).map_err(io_err(&mp))?;
        }
        records.push(CaseRecord {
            label_liters: noise.apply(phantom.tlv_liters, noise_seed, index as u64),
            true_tlv_liters: phantom.tlv_liters,
            split: options.splits.split_of(index),
            case_id,
            frontal_path,
            lateral_path,
        });
    }
    write_manifest(&out_dir.join(MANIFEST_NAME), &records)?;
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[CaseRecord]) -> Result<(), PhantomError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<CaseRecord>, PhantomError> {
    let mut r = csv::Reader::from_path(path)?;
    let expected = [
        "case_id",
        "frontal_path",
        "lateral_path",
        "label_liters",
        "true_tlv_liters",
        "split",
    ];
    let headers = r.headers()?.clone();
    if headers.iter().ne(expected.iter().copied()) {
        return Err(PhantomError::InvalidParams(format!(
            "{}: unexpected manifest header {:?}",
            path.display(),
            headers
        )));
    }
    r.deserialize().map(|row| row.map_err(PhantomError::from)).collect()
}

/// Rewrites labels in-place using a new noise model (the images are reused).
pub fn relabel(records: &[CaseRecord], noise: LabelNoise, seed: u64) -> Vec<CaseRecord> {
    let noise_seed = crate::seed::derive_seed(seed, u64::MAX);
    records
        .iter()
        .enumerate()
        .map(|(i, r)| CaseRecord {
            label_liters: noise.apply(r.true_tlv_liters, noise_seed, i as u64),
            ..r.clone()
        })
        .collect()
}
