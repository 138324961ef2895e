//! Age-annotated manifests, age-group binning, stratified splits, and the
//! synthetic ring-pattern corpus used for desk-scale verification.
//!
//! The toy corpus encodes an "age" as the number of concentric rings in a
//! disk: group k gets `1 + 2k` rings, so older groups carry more
//! high-frequency radial structure. [`toy_age_oracle`] inverts the encoding
//! by counting sign changes along the radial intensity profile, giving an
//! analytic stand-in for a pre-trained age estimator.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of age groups.
pub const N_GROUPS: usize = 4;

/// Lower bounds of the four bins; upper bound of bin i is the next entry,
/// the last bin is open-ended.
const GROUP_BOUNDS: [u32; N_GROUPS] = [0, 30, 40, 50];

/// Representative age per group, used for synthetic records and as the
/// toy ground truth.
pub const REPRESENTATIVE_AGES: [f64; N_GROUPS] = [15.0, 35.0, 45.0, 55.0];

/// One of four ordinal age bins: [0,30), [30,40), [40,50), [50,inf).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgeGroup {
    index: usize,
}

impl AgeGroup {
    pub fn new(index: usize) -> Result<Self> {
        if index < N_GROUPS {
            Ok(AgeGroup { index })
        } else {
            Err(Error::InvalidArgument(format!(
                "age group index {index} out of range 0..{N_GROUPS}"
            )))
        }
    }

    pub fn all() -> [AgeGroup; N_GROUPS] {
        [0, 1, 2, 3].map(|index| AgeGroup { index })
    }

    /// Bin an age in years. Total over all non-negative ages; boundary ages
    /// 30, 40, 50 belong to the higher group.
    pub fn from_age(age: u32) -> Self {
        let mut index = 0;
        for (i, &lo) in GROUP_BOUNDS.iter().enumerate() {
            if age >= lo {
                index = i;
            }
        }
        AgeGroup { index }
    }

    pub fn index(&self) -> usize {
        self.index
    }

    /// Half-open age interval in years; `None` upper bound for the last bin.
    pub fn bounds(&self) -> (u32, Option<u32>) {
        let lo = GROUP_BOUNDS[self.index];
        let hi = GROUP_BOUNDS.get(self.index + 1).copied();
        (lo, hi)
    }

    pub fn representative_age(&self) -> f64 {
        REPRESENTATIVE_AGES[self.index]
    }

    /// Rings encoding the group in the toy corpus: 1, 3, 5, 7.
    pub fn ring_count(&self) -> usize {
        1 + 2 * self.index
    }

    /// Nearest group for a given ring count.
    pub fn from_ring_count(rings: usize) -> Self {
        let index = (((rings as f64 - 1.0) / 2.0).round() as usize).min(N_GROUPS - 1);
        AgeGroup { index }
    }
}

impl fmt::Display for AgeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.bounds() {
            (lo, Some(hi)) => write!(f, "{lo}-{}", hi - 1),
            (lo, None) => write!(f, "{lo}+"),
        }
    }
}

/// One manifest row: an image path with its age annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceRecord {
    pub image_path: PathBuf,
    pub age: u32,
    pub group: AgeGroup,
    /// Opaque subject identifier; empty when the source gives none.
    pub subject_id: String,
}

impl FaceRecord {
    pub fn new(image_path: impl Into<PathBuf>, age: u32, subject_id: impl Into<String>) -> Self {
        FaceRecord {
            image_path: image_path.into(),
            age,
            group: AgeGroup::from_age(age),
            subject_id: subject_id.into(),
        }
    }
}

/// An ordered, duplicate-free list of face records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub records: Vec<FaceRecord>,
    pub source_name: String,
}

impl Manifest {
    pub fn new(records: Vec<FaceRecord>, source_name: impl Into<String>) -> Self {
        Manifest {
            records,
            source_name: source_name.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record indices per age group, in manifest order.
    pub fn indices_by_group(&self) -> [Vec<usize>; N_GROUPS] {
        let mut by_group: [Vec<usize>; N_GROUPS] = Default::default();
        for (i, r) in self.records.iter().enumerate() {
            by_group[r.group.index()].push(i);
        }
        by_group
    }

    pub fn group_counts(&self) -> [usize; N_GROUPS] {
        let mut counts = [0usize; N_GROUPS];
        for r in &self.records {
            counts[r.group.index()] += 1;
        }
        counts
    }

    /// Write as a CSV manifest with the standard header.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        w.write_record(["image_path", "age", "subject_id"])
            .and_then(|_| {
                for r in &self.records {
                    w.write_record([
                        r.image_path.to_string_lossy().as_ref(),
                        &r.age.to_string(),
                        &r.subject_id,
                    ])?;
                }
                w.flush()?;
                Ok(())
            })
            .map_err(|e| Error::Manifest {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
    }
}

/// Probability distribution over classes (age groups here).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    probabilities: Vec<f64>,
}

impl ClassDistribution {
    /// Build from probabilities; they must be non-negative and sum to 1
    /// within 1e-9.
    pub fn new(probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.is_empty() {
            return Err(Error::InvalidArgument("empty distribution".into()));
        }
        if probabilities.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::InvalidArgument(
                "probabilities must be non-negative and finite".into(),
            ));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(ClassDistribution { probabilities })
    }

    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::EmptyManifest);
        }
        ClassDistribution::new(counts.iter().map(|&c| c as f64 / total as f64).collect())
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn n_classes(&self) -> usize {
        self.probabilities.len()
    }
}

/// Load a CSV manifest with header `image_path,age[,subject_id]`.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Manifest {
                path: path.to_path_buf(),
                reason: format!("cannot open: {e}"),
            },
            _ => Error::Manifest {
                path: path.to_path_buf(),
                reason: e.to_string(),
            },
        })?;

    {
        let headers = reader.headers().map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if headers.len() < 2 || &headers[0] != "image_path" || &headers[1] != "age" {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                reason: format!(
                    "expected header `image_path,age[,subject_id]`, got `{}`",
                    headers.iter().collect::<Vec<_>>().join(",")
                ),
            });
        }
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let rownum = i + 2; // 1-based, after the header
        let row = row.map_err(|e| Error::ManifestRow {
            path: path.to_path_buf(),
            row: rownum,
            reason: e.to_string(),
        })?;
        if row.len() < 2 {
            return Err(Error::ManifestRow {
                path: path.to_path_buf(),
                row: rownum,
                reason: "expected at least 2 columns".into(),
            });
        }
        let image_path = row[0].trim();
        if image_path.is_empty() {
            return Err(Error::ManifestRow {
                path: path.to_path_buf(),
                row: rownum,
                reason: "empty image_path".into(),
            });
        }
        let age: i64 = row[1].trim().parse().map_err(|_| Error::ManifestRow {
            path: path.to_path_buf(),
            row: rownum,
            reason: format!("malformed age `{}`", &row[1]),
        })?;
        if age < 0 {
            return Err(Error::NegativeAge { age, row: rownum });
        }
        if !seen.insert(image_path.to_string()) {
            return Err(Error::ManifestRow {
                path: path.to_path_buf(),
                row: rownum,
                reason: format!("duplicate image_path `{image_path}`"),
            });
        }
        let subject_id = if row.len() > 2 { row[2].trim() } else { "" };
        records.push(FaceRecord::new(image_path, age as u32, subject_id));
    }

    if records.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let source_name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".into());
    Ok(Manifest::new(records, source_name))
}

/// Stratified train/test split. Each group is shuffled and `test_fraction`
/// of it (rounded to nearest, at least 1 when the group has 2+ records)
/// goes to the test manifest. Groups with fewer than 2 records cannot be
/// stratified and are assigned wholly to train with a warning.
pub fn split(manifest: &Manifest, test_fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_idx = HashSet::new();
    for (gi, group) in manifest.indices_by_group().iter().enumerate() {
        if group.len() < 2 {
            if !group.is_empty() {
                log::warn!(
                    "group {gi} has {} record(s); assigning wholly to train",
                    group.len()
                );
            }
            continue;
        }
        let mut shuffled = group.clone();
        // Fisher-Yates, driven by the shared seed for reproducibility.
        for i in (1..shuffled.len()).rev() {
            let j = rng.gen_range(0..=i);
            shuffled.swap(i, j);
        }
        let n_test =
            ((group.len() as f64 * test_fraction).round() as usize).clamp(1, group.len() - 1);
        test_idx.extend(shuffled.into_iter().take(n_test));
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, r) in manifest.records.iter().enumerate() {
        if test_idx.contains(&i) {
            test.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((
        Manifest::new(train, format!("{}-train", manifest.source_name)),
        Manifest::new(test, format!("{}-test", manifest.source_name)),
    ))
}

/// Per-group probability distribution of a manifest.
pub fn class_distribution(manifest: &Manifest) -> Result<ClassDistribution> {
    if manifest.is_empty() {
        return Err(Error::EmptyManifest);
    }
    ClassDistribution::from_counts(&manifest.group_counts())
}

/// Parameters of the synthetic ring corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToySpec {
    pub image_size: usize,
    pub samples_per_group: usize,
    /// Additive noise amplitude in [0, 1] on the [-1, 1] intensity scale.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            image_size: 64,
            samples_per_group: 200,
            noise_level: 0.1,
            seed: 0,
        }
    }
}

/// Render one toy sample as a (3, S, S) tensor in [-1, 1].
///
/// The pattern is a disk whose radial intensity profile is
/// `amplitude * cos(pi * rings * r / radius)` inside the disk and -1
/// outside, so the number of radial sign changes equals `rings` exactly.
pub fn render_toy_image(
    size: usize,
    rings: usize,
    radius_frac: f64,
    amplitude: f64,
    noise_level: f64,
    rng: &mut ChaCha8Rng,
) -> Array3<f32> {
    let c = (size as f64 - 1.0) / 2.0;
    let radius = radius_frac * size as f64;
    let mut img = Array3::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let r = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
            let mut v = if r <= radius {
                amplitude * (std::f64::consts::PI * rings as f64 * r / radius).cos()
            } else {
                -1.0
            };
            if noise_level > 0.0 {
                v += rng.gen_range(-noise_level..=noise_level);
            }
            let v = v.clamp(-1.0, 1.0) as f32;
            for ch in 0..3 {
                img[(ch, y, x)] = v;
            }
        }
    }
    img
}

fn to_png_bytes(img: &ArrayView3<f32>) -> Vec<u8> {
    let (_, h, w) = img.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|ch| {
                let v = (img[(ch, y, x)].clamp(-1.0, 1.0) + 1.0) * 127.5;
                v.round() as u8
            });
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    let mut bytes = Vec::new();
    let mut cursor = std::io::Cursor::new(&mut bytes);
    image::DynamicImage::ImageRgb8(buf)
        .write_to(&mut cursor, image::ImageFormat::Png)
        .expect("png encode");
    bytes
}

/// Generate the toy corpus under `out_dir/group_<k>/<n>.png` and return its
/// manifest. Deterministic for a fixed spec.
pub fn generate_toy(spec: &ToySpec, out_dir: &Path) -> Result<Manifest> {
    let mut records = Vec::new();
    for group in AgeGroup::all() {
        let dir = out_dir.join(format!("group_{}", group.index()));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for n in 0..spec.samples_per_group {
            // Every image draws from its own stream so generation order
            // (or parallel generation by the caller) cannot change pixels.
            let mut rng = ChaCha8Rng::seed_from_u64(
                spec.seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add((group.index() * spec.samples_per_group + n) as u64),
            );
            let radius_frac = rng.gen_range(0.38..0.48);
            let amplitude = rng.gen_range(0.85..1.0);
            let img = render_toy_image(
                spec.image_size,
                group.ring_count(),
                radius_frac,
                amplitude,
                spec.noise_level,
                &mut rng,
            );
            let path = dir.join(format!("{n}.png"));
            fs::write(&path, to_png_bytes(&img.view())).map_err(|e| Error::io(&path, e))?;
            records.push(FaceRecord::new(
                path,
                group.representative_age() as u32,
                format!("toy-{}-{}", group.index(), n),
            ));
        }
    }
    Ok(Manifest::new(records, "toy"))
}

/// Outcome of the toy age oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleEstimate {
    pub age: f64,
    pub rings: usize,
    /// Set when the image carried no usable radial signal; the estimate
    /// falls back to group 0's representative age.
    pub degenerate: bool,
}

/// Estimate the toy "age" of an image by counting radial sign changes.
///
/// The profile is the intensity averaged over annuli of 1-pixel width;
/// a sign change is only counted once the profile moves past a +-0.3
/// hysteresis band, which makes the count robust to the corpus noise.
pub fn toy_age_oracle(image: &ArrayView3<f32>) -> OracleEstimate {
    let (_, h, w) = image.dim();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let n_bins = h.min(w) / 2;
    let mut sums = vec![0.0f64; n_bins];
    let mut counts = vec![0usize; n_bins];
    for y in 0..h {
        for x in 0..w {
            let r = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            let bin = r as usize;
            if bin < n_bins {
                // channel-mean intensity
                let v = (image[(0, y, x)] + image[(1, y, x)] + image[(2, y, x)]) as f64 / 3.0;
                sums[bin] += v;
                counts[bin] += 1;
            }
        }
    }

    const THRESHOLD: f64 = 0.3;
    let mut last_sign = 0i8;
    let mut crossings = 0usize;
    for (s, &c) in sums.iter().zip(&counts) {
        if c == 0 {
            continue;
        }
        let v = s / c as f64;
        if v.abs() < THRESHOLD {
            continue;
        }
        let sign = if v > 0.0 { 1 } else { -1 };
        if last_sign != 0 && sign != last_sign {
            crossings += 1;
        }
        last_sign = sign;
    }

    if crossings == 0 {
        // Uniform sign or no signal above the band: no ring structure.
        return OracleEstimate {
            age: REPRESENTATIVE_AGES[0],
            rings: 0,
            degenerate: true,
        };
    }
    let rings = crossings;
    let group = AgeGroup::from_ring_count(rings);
    OracleEstimate {
        age: group.representative_age(),
        rings,
        degenerate: false,
    }
}
