//! Procedural 32×32 grayscale shapes dataset with exact ground-truth factors.
//!
//! Five discrete factors drive the renderer: shape (square / ellipse /
//! triangle), an 8×8 grid position, three sizes, and three intensities.
//! Rendering is anti-aliased by 8×8 supersampling and peak-normalized per
//! image, so the brightest pixel always equals the intensity factor exactly
//! and shapes never clip the canvas at any position.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;
use thiserror::Error;

use crate::archive::{self, ArchiveError};
use crate::tensor::Tensor;

pub const RES: usize = 32;
pub const GRID: usize = 8;
pub const CELL: f64 = (RES / GRID) as f64;
const SUPER: usize = 8;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("split rule matched no items ({0})")]
    EmptyRule(&'static str),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("dataset file: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    Square,
    Ellipse,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Ellipse, Shape::Triangle];

    pub fn code(self) -> usize {
        match self {
            Shape::Square => 0,
            Shape::Ellipse => 1,
            Shape::Triangle => 2,
        }
    }

    pub fn from_code(c: usize) -> Option<Shape> {
        Shape::ALL.get(c).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Ellipse => "ellipse",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scale {
    Small,
    Medium,
    Large,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Small, Scale::Medium, Scale::Large];

    pub fn code(self) -> usize {
        match self {
            Scale::Small => 0,
            Scale::Medium => 1,
            Scale::Large => 2,
        }
    }

    pub fn from_code(c: usize) -> Option<Scale> {
        Scale::ALL.get(c).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Scale::Small => "small",
            Scale::Medium => "medium",
            Scale::Large => "large",
        }
    }

    /// Shape radius in pixels. The largest radius together with the 8-cell
    /// position grid exactly fills the 32 px canvas without clipping, and
    /// the smallest stays above one pixel so every shape's anti-aliased
    /// footprint is asymmetric enough to identify it.
    pub fn radius(self) -> f64 {
        match self {
            Scale::Small => 1.25,
            Scale::Medium => 1.6,
            Scale::Large => 2.0,
        }
    }
}

pub const INTENSITIES: [f64; 3] = [0.5, 0.75, 1.0];

/// Ground-truth factors of one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ShapeFactors {
    pub shape: Shape,
    pub pos_x: usize,
    pub pos_y: usize,
    pub scale: Scale,
    pub intensity_idx: usize,
}

impl ShapeFactors {
    pub fn intensity(&self) -> f64 {
        INTENSITIES[self.intensity_idx]
    }

    pub fn codes(&self) -> [usize; 5] {
        [
            self.shape.code(),
            self.pos_x,
            self.pos_y,
            self.scale.code(),
            self.intensity_idx,
        ]
    }

    pub fn from_codes(c: &[usize; 5]) -> Option<ShapeFactors> {
        if c[1] >= GRID || c[2] >= GRID || c[4] >= 3 {
            return None;
        }
        Some(ShapeFactors {
            shape: Shape::from_code(c[0])?,
            pos_x: c[1],
            pos_y: c[2],
            scale: Scale::from_code(c[3])?,
            intensity_idx: c[4],
        })
    }

    /// Number of values each factor can take, in column order.
    pub const CARDINALITIES: [usize; 5] = [3, GRID, GRID, 3, 3];
    pub const NAMES: [&'static str; 5] = ["shape", "pos_x", "pos_y", "scale", "intensity"];
}

fn inside(shape: Shape, r: f64, dx: f64, dy: f64) -> bool {
    match shape {
        Shape::Square => dx.abs() <= r && dy.abs() <= r,
        Shape::Ellipse => {
            let b = 0.75 * r;
            (dx / r) * (dx / r) + (dy / b) * (dy / b) <= 1.0
        }
        Shape::Triangle => {
            // equilateral, apex up (negative dy), circumradius r
            let (ax, ay) = (0.0, -r);
            let (bx, by) = (-0.866_025_403_784_438_6 * r, 0.5 * r);
            let (cx, cy) = (-bx, by);
            let e1 = (bx - ax) * (dy - ay) - (by - ay) * (dx - ax);
            let e2 = (cx - bx) * (dy - by) - (cy - by) * (dx - bx);
            let e3 = (ax - cx) * (dy - cy) - (ay - cy) * (dx - cx);
            (e1 >= 0.0 && e2 >= 0.0 && e3 >= 0.0) || (e1 <= 0.0 && e2 <= 0.0 && e3 <= 0.0)
        }
    }
}

/// Deterministic anti-aliased rasterization, background 0. The coverage map
/// is peak-normalized so the brightest pixel equals the intensity exactly.
pub fn render(f: &ShapeFactors) -> Tensor {
    let cx = CELL / 2.0 + CELL * f.pos_x as f64;
    let cy = CELL / 2.0 + CELL * f.pos_y as f64;
    let r = f.scale.radius();
    let pad = r + 1.0;

    let mut coverage = vec![0.0f64; RES * RES];
    let x_lo = (cx - pad).floor().max(0.0) as usize;
    let x_hi = (cx + pad).ceil().min(RES as f64) as usize;
    let y_lo = (cy - pad).floor().max(0.0) as usize;
    let y_hi = (cy + pad).ceil().min(RES as f64) as usize;

    let mut max_cov = 0.0f64;
    for iy in y_lo..y_hi {
        for ix in x_lo..x_hi {
            let mut hits = 0usize;
            for sy in 0..SUPER {
                for sx in 0..SUPER {
                    let px = ix as f64 + (2 * sx + 1) as f64 / (2 * SUPER) as f64;
                    let py = iy as f64 + (2 * sy + 1) as f64 / (2 * SUPER) as f64;
                    if inside(f.shape, r, px - cx, py - cy) {
                        hits += 1;
                    }
                }
            }
            let cov = hits as f64 / (SUPER * SUPER) as f64;
            coverage[iy * RES + ix] = cov;
            max_cov = max_cov.max(cov);
        }
    }

    let intensity = f.intensity();
    let data = coverage
        .into_iter()
        .map(|c| if max_cov > 0.0 { intensity * c / max_cov } else { 0.0 })
        .collect();
    Tensor::new(vec![1, RES, RES], data).unwrap()
}

/// Images with their exact factor table and the generation seed.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Vec<Tensor>,
    pub factors: Vec<ShapeFactors>,
    pub seed: u64,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// One label column (values as small integers).
    pub fn label_column(&self, attr: usize) -> Vec<usize> {
        self.factors.iter().map(|f| f.codes()[attr]).collect()
    }
}

/// Draw n factor rows i.i.d. uniform and render them.
pub fn generate(n: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors: Vec<ShapeFactors> = (0..n)
        .map(|_| ShapeFactors {
            shape: Shape::ALL[rng.gen_range(0..3)],
            pos_x: rng.gen_range(0..GRID),
            pos_y: rng.gen_range(0..GRID),
            scale: Scale::ALL[rng.gen_range(0..3)],
            intensity_idx: rng.gen_range(0..3),
        })
        .collect();
    let images: Vec<Tensor> = factors.par_iter().map(render).collect();
    LabeledDataset {
        images,
        factors,
        seed,
    }
}

/// Inlier-only training indices plus a balanced, disjoint test set.
#[derive(Debug, Clone)]
pub struct AnomalySplit {
    pub train_inliers: Vec<usize>,
    pub test_inliers: Vec<usize>,
    pub test_outliers: Vec<usize>,
}

pub fn default_inlier_rule(f: &ShapeFactors) -> bool {
    f.shape != Shape::Ellipse
}

pub fn default_outlier_rule(f: &ShapeFactors) -> bool {
    f.shape == Shape::Ellipse
}

/// Split by predicate: training keeps inliers only; the test set is balanced
/// 50/50 between held-out inliers and outliers, disjoint from training.
pub fn anomaly_split(
    dataset: &LabeledDataset,
    inlier_rule: impl Fn(&ShapeFactors) -> bool,
    outlier_rule: impl Fn(&ShapeFactors) -> bool,
    seed: u64,
) -> Result<AnomalySplit, DataError> {
    let mut inliers: Vec<usize> = (0..dataset.len())
        .filter(|&i| inlier_rule(&dataset.factors[i]))
        .collect();
    let mut outliers: Vec<usize> = (0..dataset.len())
        .filter(|&i| outlier_rule(&dataset.factors[i]))
        .collect();
    if inliers.is_empty() {
        return Err(DataError::EmptyRule("inlier rule"));
    }
    if outliers.is_empty() {
        return Err(DataError::EmptyRule("outlier rule"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    inliers.shuffle(&mut rng);
    outliers.shuffle(&mut rng);
    let m = outliers.len().min(inliers.len() / 2);
    Ok(AnomalySplit {
        test_outliers: outliers[..m].to_vec(),
        test_inliers: inliers[..m].to_vec(),
        train_inliers: inliers[m..].to_vec(),
    })
}

/// Write `dataset.bin`: tensors `images` [n,1,32,32], `factors` [n,5], `seed`.
pub fn save_dataset(dataset: &LabeledDataset, path: &Path) -> Result<(), DataError> {
    let n = dataset.len();
    let mut img = Vec::with_capacity(n * RES * RES);
    for t in &dataset.images {
        img.extend_from_slice(t.data());
    }
    let images = Tensor::new(vec![n, 1, RES, RES], img).unwrap();
    let mut fac = Vec::with_capacity(n * 5);
    for f in &dataset.factors {
        fac.extend(f.codes().iter().map(|&c| c as f64));
    }
    let factors = Tensor::new(vec![n, 5], fac).unwrap();
    let seed = Tensor::scalar(dataset.seed as f64);
    archive::write_archive(
        path,
        &[
            ("images".into(), &images),
            ("factors".into(), &factors),
            ("seed".into(), &seed),
        ],
    )?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset, DataError> {
    let entries = archive::read_archive(path)?;
    let find = |name: &str| {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| DataError::Malformed(format!("missing tensor '{name}'")))
    };
    let images_t = find("images")?;
    let factors_t = find("factors")?;
    let seed = find("seed").map(|t| t.item() as u64).unwrap_or(0);

    let shape = images_t.shape();
    if shape.len() != 4 || shape[1] != 1 || shape[2] != RES || shape[3] != RES {
        return Err(DataError::Malformed(format!(
            "images shape {shape:?}, expected [n, 1, {RES}, {RES}]"
        )));
    }
    let n = shape[0];
    if factors_t.shape() != [n, 5] {
        return Err(DataError::Malformed(format!(
            "factors shape {:?}, expected [{n}, 5]",
            factors_t.shape()
        )));
    }
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let start = i * RES * RES;
        images.push(
            Tensor::new(
                vec![1, RES, RES],
                images_t.data()[start..start + RES * RES].to_vec(),
            )
            .unwrap(),
        );
    }
    let mut factors = Vec::with_capacity(n);
    for i in 0..n {
        let row = &factors_t.data()[i * 5..(i + 1) * 5];
        let codes = [
            row[0] as usize,
            row[1] as usize,
            row[2] as usize,
            row[3] as usize,
            row[4] as usize,
        ];
        factors.push(
            ShapeFactors::from_codes(&codes)
                .ok_or_else(|| DataError::Malformed(format!("bad factor row {i}: {row:?}")))?,
        );
    }
    Ok(LabeledDataset {
        images,
        factors,
        seed,
    })
}

pub fn write_factors_csv(dataset: &LabeledDataset, path: &Path) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "index,shape,pos_x,pos_y,scale,intensity")?;
    for (i, fac) in dataset.factors.iter().enumerate() {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            i,
            fac.shape.name(),
            fac.pos_x,
            fac.pos_y,
            fac.scale.name(),
            fac.intensity()
        )?;
    }
    f.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn centered_large_square_has_exact_interior() {
        let f = ShapeFactors {
            shape: Shape::Square,
            pos_x: 3,
            pos_y: 3,
            scale: Scale::Large,
            intensity_idx: 2,
        };
        let img = render(&f);
        // center (14, 14), half-side 2 → pixels 12..16 fully covered
        for iy in 12..16 {
            for ix in 12..16 {
                assert_eq!(img.data()[iy * RES + ix], 1.0, "pixel ({ix},{iy})");
            }
        }
        assert_eq!(img.data()[0], 0.0);
        assert_eq!(img.data()[RES - 1], 0.0);
        assert_eq!(img.data()[RES * RES - 1], 0.0);
    }

    #[test]
    fn render_is_bitwise_deterministic() {
        let f = ShapeFactors {
            shape: Shape::Triangle,
            pos_x: 5,
            pos_y: 2,
            scale: Scale::Medium,
            intensity_idx: 1,
        };
        assert_eq!(render(&f), render(&f));
    }

    #[test]
    fn cell_translation_shifts_four_pixels() {
        for shape in Shape::ALL {
            let base = ShapeFactors {
                shape,
                pos_x: 2,
                pos_y: 4,
                scale: Scale::Large,
                intensity_idx: 2,
            };
            let moved = ShapeFactors { pos_x: 3, ..base };
            let a = render(&base);
            let b = render(&moved);
            for iy in 0..RES {
                for ix in 0..RES - 4 {
                    assert_eq!(
                        a.data()[iy * RES + ix],
                        b.data()[iy * RES + ix + 4],
                        "{shape:?} ({ix},{iy})"
                    );
                }
            }
        }
    }

    #[test]
    fn max_pixel_equals_intensity() {
        let ds = generate(200, 3);
        for (img, f) in ds.images.iter().zip(&ds.factors) {
            let max = img.data().iter().cloned().fold(0.0f64, f64::max);
            assert_eq!(max, f.intensity(), "{f:?}");
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate(50, 11);
        let b = generate(50, 11);
        assert_eq!(a.factors, b.factors);
        assert_eq!(a.images, b.images);
    }

    #[test]
    fn shape_marginal_is_roughly_uniform() {
        let ds = generate(10_000, 1);
        for shape in Shape::ALL {
            let frac = ds.factors.iter().filter(|f| f.shape == shape).count() as f64 / 10_000.0;
            assert!((frac - 1.0 / 3.0).abs() < 0.04, "{shape:?}: {frac}");
        }
    }

    #[test]
    fn factor_to_image_map_is_injective() {
        let mut seen: HashSet<Vec<u64>> = HashSet::new();
        let mut count = 0;
        for shape in Shape::ALL {
            for pos_x in 0..GRID {
                for pos_y in 0..GRID {
                    for scale in Scale::ALL {
                        for intensity_idx in 0..3 {
                            let f = ShapeFactors {
                                shape,
                                pos_x,
                                pos_y,
                                scale,
                                intensity_idx,
                            };
                            let img = render(&f);
                            let bits: Vec<u64> =
                                img.data().iter().map(|v| v.to_bits()).collect();
                            assert!(seen.insert(bits), "collision at {f:?}");
                            count += 1;
                        }
                    }
                }
            }
        }
        assert_eq!(count, 1728);
    }

    #[test]
    fn split_excludes_outliers_from_training() {
        let ds = generate(3000, 5);
        let split = anomaly_split(&ds, default_inlier_rule, default_outlier_rule, 9).unwrap();
        assert!(split
            .train_inliers
            .iter()
            .all(|&i| ds.factors[i].shape != Shape::Ellipse));
        assert_eq!(split.test_inliers.len(), split.test_outliers.len());
        let train: HashSet<usize> = split.train_inliers.iter().copied().collect();
        assert!(split.test_inliers.iter().all(|i| !train.contains(i)));
        assert!(split.test_outliers.iter().all(|i| !train.contains(i)));
        assert!(!split.train_inliers.is_empty());
    }

    #[test]
    fn split_rejects_empty_rules() {
        let ds = generate(100, 5);
        let err = anomaly_split(&ds, |_| false, default_outlier_rule, 1).unwrap_err();
        assert!(matches!(err, DataError::EmptyRule(_)));
    }

    #[test]
    fn dataset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.bin");
        let ds = generate(20, 13);
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.len(), 20);
        assert_eq!(back.seed, 13);
        assert_eq!(back.factors, ds.factors);
        assert_eq!(back.images, ds.images);
    }
}
