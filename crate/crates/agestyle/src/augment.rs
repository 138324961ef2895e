//! Dataset augmentation: translate every record to the remaining three age
//! groups, producing a perfectly balanced manifest four times the size.
//! Also the aging-accuracy evaluation with a pluggable age estimator.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{AgeGroup, FaceRecord, Manifest, N_GROUPS};
use crate::error::{Error, Result};
use crate::trainer::{save_image, translate_pairs, ImageCache, TrainState};

/// Ground-truth mean ages of the toy corpus per target group 1..3.
pub const GT_MEANS_TOY: [f64; 3] = [35.0, 45.0, 55.0];
/// Ground-truth mean ages of the MORPH test groups 31-40, 41-50, 50+.
pub const GT_MEANS_MORPH: [f64; 3] = [35.9, 44.77, 54.92];
/// Ground-truth mean ages of the CACD test groups 31-40, 41-50, 50+.
pub const GT_MEANS_CACD: [f64; 3] = [35.41, 45.45, 55.01];

/// Look up a named ground-truth profile: `toy`, `morph`, or `cacd`.
pub fn gt_means_profile(name: &str) -> Option<[f64; 3]> {
    match name {
        "toy" => Some(GT_MEANS_TOY),
        "morph" => Some(GT_MEANS_MORPH),
        "cacd" => Some(GT_MEANS_CACD),
        _ => None,
    }
}

/// Strategy for choosing the style target within a group.
pub trait TargetPicker {
    /// Choose one of `candidates` (record indices into `pool`, never
    /// empty) as the style target for a translation into `group`.
    fn pick(&mut self, group: AgeGroup, candidates: &[usize], pool: &Manifest) -> usize;
}

/// The default: a uniformly random candidate.
#[derive(Debug, Clone)]
pub struct UniformPicker {
    rng: ChaCha8Rng,
}

impl UniformPicker {
    pub fn new(seed: u64) -> Self {
        UniformPicker {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl TargetPicker for UniformPicker {
    fn pick(&mut self, _group: AgeGroup, candidates: &[usize], _pool: &Manifest) -> usize {
        candidates[self.rng.gen_range(0..candidates.len())]
    }
}

/// Picks the oldest candidate, preferring externally estimated ages (keyed
/// by image path) over the ages recorded in the manifest.
#[derive(Debug, Clone, Default)]
pub struct OldestTargetPicker {
    estimated: HashMap<PathBuf, f64>,
}

impl OldestTargetPicker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_ages(estimated: HashMap<PathBuf, f64>) -> Self {
        OldestTargetPicker { estimated }
    }

    fn age_of(&self, pool: &Manifest, idx: usize) -> f64 {
        let record = &pool.records[idx];
        self.estimated
            .get(&record.image_path)
            .copied()
            .unwrap_or(record.age as f64)
    }
}

impl TargetPicker for OldestTargetPicker {
    fn pick(&mut self, _group: AgeGroup, candidates: &[usize], pool: &Manifest) -> usize {
        *candidates
            .iter()
            .max_by(|&&a, &&b| {
                self.age_of(pool, a)
                    .partial_cmp(&self.age_of(pool, b))
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .expect("candidates are never empty")
    }
}

const TRANSLATE_CHUNK: usize = 8;

struct Job<'m> {
    source: usize,
    target_group: AgeGroup,
    target_pool: &'m Manifest,
    target: usize,
}

fn file_label(manifest: &Manifest, idx: usize) -> String {
    let stem = manifest.records[idx]
        .image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    format!("r{idx:04}-{stem}")
}

/// Run a list of translation jobs in batches, saving each output according
/// to `name_for` and handing the saved path to `sink`.
fn run_jobs(
    state: &TrainState,
    source_set: &Manifest,
    jobs: &[Job<'_>],
    cache: &mut ImageCache,
    name_for: impl Fn(&Job<'_>) -> PathBuf,
    mut sink: impl FnMut(&Job<'_>, PathBuf) -> Result<()>,
) -> Result<()> {
    let size = state.config.image_size;
    for chunk in jobs.chunks(TRANSLATE_CHUNK) {
        let mut xs = Array4::zeros((chunk.len(), 3, size, size));
        let mut ts = Array4::zeros((chunk.len(), 3, size, size));
        for (i, job) in chunk.iter().enumerate() {
            let src = cache.get(&source_set.records[job.source].image_path)?;
            xs.index_axis_mut(ndarray::Axis(0), i).assign(src);
            let tgt = cache.get(&job.target_pool.records[job.target].image_path)?;
            ts.index_axis_mut(ndarray::Axis(0), i).assign(tgt);
        }
        let out = translate_pairs(&state.generator, &state.discriminator, &xs, &ts)?;
        for (i, job) in chunk.iter().enumerate() {
            let path = name_for(job);
            save_image(&out.index_axis(ndarray::Axis(0), i).to_owned(), &path)?;
            sink(job, path)?;
        }
    }
    Ok(())
}

/// Translate every record of `test_set` to the three other age groups and
/// write the synthetic images plus a combined manifest under `out_dir`.
///
/// Originals are referenced at their existing paths, not copied. Synthetic
/// images land at `out_dir/group_<k>/<origin>_<k>.png` and carry the target
/// group's representative age. Style targets come from `test_set`; a group
/// with no test candidates falls back to `train_set` with a warning.
pub fn augment(
    state: &TrainState,
    test_set: &Manifest,
    train_set: Option<&Manifest>,
    picker: &mut dyn TargetPicker,
    out_dir: &Path,
) -> Result<Manifest> {
    if test_set.is_empty() {
        return Err(Error::EmptyManifest);
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let test_groups = test_set.indices_by_group();
    let train_groups = train_set.map(|m| m.indices_by_group());
    let mut pools: Vec<(&Manifest, Vec<usize>)> = Vec::with_capacity(N_GROUPS);
    for g in 0..N_GROUPS {
        if !test_groups[g].is_empty() {
            pools.push((test_set, test_groups[g].clone()));
            continue;
        }
        let fallback = train_set
            .zip(train_groups.as_ref())
            .filter(|(_, groups)| !groups[g].is_empty())
            .map(|(train, groups)| (train, groups[g].clone()));
        match fallback {
            Some(pool) => {
                log::warn!("test set has no group-{g} targets; using training-set targets");
                pools.push(pool);
            }
            None => return Err(Error::EmptyGroup { group: g }),
        }
    }

    let mut jobs = Vec::with_capacity(3 * test_set.len());
    for (i, record) in test_set.records.iter().enumerate() {
        for group in AgeGroup::all() {
            if group == record.group {
                continue;
            }
            let (pool, candidates) = &pools[group.index()];
            let target = picker.pick(group, candidates, pool);
            jobs.push(Job {
                source: i,
                target_group: group,
                target_pool: pool,
                target,
            });
        }
    }

    let mut cache = ImageCache::from_env(state.config.image_size);
    let mut synthetic: Vec<Vec<FaceRecord>> = vec![Vec::new(); test_set.len()];
    run_jobs(
        state,
        test_set,
        &jobs,
        &mut cache,
        |job| {
            let k = job.target_group.index();
            out_dir
                .join(format!("group_{k}"))
                .join(format!("{}_{k}.png", file_label(test_set, job.source)))
        },
        |job, path| {
            let age = job.target_group.representative_age() as u32;
            let subject = test_set.records[job.source].subject_id.clone();
            synthetic[job.source].push(FaceRecord::new(path, age, subject));
            Ok(())
        },
    )?;

    let mut records = Vec::with_capacity(4 * test_set.len());
    for (i, record) in test_set.records.iter().enumerate() {
        records.push(record.clone());
        records.append(&mut synthetic[i]);
    }
    let augmented = Manifest::new(records, format!("{}+aug", test_set.source_name));
    augmented.save_csv(&out_dir.join("manifest.csv"))?;
    Ok(augmented)
}

/// Predicts an age in years from an image file.
pub trait AgeEstimator {
    fn estimate(&self, image: &Path) -> Result<f64>;
}

/// The toy corpus oracle as an estimator: counts rings at the image's
/// native resolution. Degenerate profiles are estimator failures.
#[derive(Debug, Clone, Default)]
pub struct ToyOracleEstimator;

impl AgeEstimator for ToyOracleEstimator {
    fn estimate(&self, image: &Path) -> Result<f64> {
        let probe = image::open(image).map_err(|e| Error::Image {
            path: image.to_path_buf(),
            reason: e.to_string(),
        })?;
        let side = probe.width().min(probe.height()) as usize;
        let tensor = crate::trainer::load_image(image, side)?;
        let estimate = crate::dataset::toy_age_oracle(&tensor.view());
        if estimate.degenerate {
            return Err(Error::Estimator {
                path: image.to_path_buf(),
                reason: "degenerate radial profile".into(),
            });
        }
        Ok(estimate.age)
    }
}

/// Always predicts the same age; useful as a baseline and in tests.
#[derive(Debug, Clone, Copy)]
pub struct ConstantEstimator(pub f64);

impl AgeEstimator for ConstantEstimator {
    fn estimate(&self, _image: &Path) -> Result<f64> {
        Ok(self.0)
    }
}

/// Runs an external command with the image path appended as the final
/// argument and parses the first line of stdout as a decimal age.
#[derive(Debug, Clone)]
pub struct SubprocessEstimator {
    pub program: String,
    pub args: Vec<String>,
}

impl SubprocessEstimator {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        SubprocessEstimator {
            program: program.into(),
            args,
        }
    }
}

impl AgeEstimator for SubprocessEstimator {
    fn estimate(&self, image: &Path) -> Result<f64> {
        let fail = |reason: String| Error::Estimator {
            path: image.to_path_buf(),
            reason,
        };
        let output = std::process::Command::new(&self.program)
            .args(&self.args)
            .arg(image)
            .output()
            .map_err(|e| fail(format!("spawn {}: {e}", self.program)))?;
        if !output.status.success() {
            return Err(fail(format!(
                "{} exited with {}",
                self.program, output.status
            )));
        }
        let stdout = String::from_utf8_lossy(&output.stdout);
        let line = stdout
            .lines()
            .next()
            .ok_or_else(|| fail("no output".into()))?;
        line.trim()
            .parse::<f64>()
            .map_err(|e| fail(format!("bad age {line:?}: {e}")))
    }
}

/// Accuracy of one target group's translations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub group: usize,
    pub count: usize,
    pub skipped: usize,
    pub mean_pred_age: Option<f64>,
    pub std_pred_age: Option<f64>,
    pub gt_mean: f64,
    pub mae: Option<f64>,
}

/// Aging accuracy over target groups 1..3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeAccuracyReport {
    pub per_target_group: Vec<GroupAccuracy>,
}

impl fmt::Display for AgeAccuracyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "group  n     skipped  mean      std      gt      mae")?;
        for g in &self.per_target_group {
            let fmt_opt = |v: Option<f64>| match v {
                Some(v) => format!("{v:8.2}"),
                None => format!("{:>8}", "-"),
            };
            writeln!(
                f,
                "{:<6} {:<5} {:<8} {} {} {:7.2} {}",
                g.group,
                g.count,
                g.skipped,
                fmt_opt(g.mean_pred_age),
                fmt_opt(g.std_pred_age),
                g.gt_mean,
                fmt_opt(g.mae)
            )?;
        }
        Ok(())
    }
}

/// Translate every group-0 image of `source` into target groups 1..3 and
/// score the results with `estimator` against `gt_means`.
///
/// Translated images are written to `out_dir/group_<t>/<origin>.png` so the
/// estimator (possibly an external process) can read them. Estimator
/// failures are skipped and counted.
pub fn aging_accuracy(
    state: &TrainState,
    source: &Manifest,
    targets: &Manifest,
    estimator: &dyn AgeEstimator,
    picker: &mut dyn TargetPicker,
    gt_means: [f64; 3],
    out_dir: &Path,
) -> Result<AgeAccuracyReport> {
    let sources = source.indices_by_group()[0].clone();
    if sources.is_empty() {
        return Err(Error::InvalidArgument(
            "aging accuracy needs group-0 source images".into(),
        ));
    }
    let target_groups = targets.indices_by_group();
    let mut cache = ImageCache::from_env(state.config.image_size);
    let mut per_target_group = Vec::with_capacity(3);

    for t in 1..N_GROUPS {
        let candidates = &target_groups[t];
        if candidates.is_empty() {
            return Err(Error::EmptyGroup { group: t });
        }
        let group = AgeGroup::new(t)?;
        let jobs: Vec<Job<'_>> = sources
            .iter()
            .map(|&src| Job {
                source: src,
                target_group: group,
                target_pool: targets,
                target: picker.pick(group, candidates, targets),
            })
            .collect();

        let mut ages = Vec::with_capacity(jobs.len());
        let mut skipped = 0usize;
        run_jobs(
            state,
            source,
            &jobs,
            &mut cache,
            |job| {
                out_dir
                    .join(format!("group_{t}"))
                    .join(format!("{}.png", file_label(source, job.source)))
            },
            |_, path| {
                match estimator.estimate(&path) {
                    Ok(age) => ages.push(age),
                    Err(e) => {
                        skipped += 1;
                        log::warn!("estimator skipped {}: {e}", path.display());
                    }
                }
                Ok(())
            },
        )?;

        let gt_mean = gt_means[t - 1];
        let (mean, std, mae) = if ages.is_empty() {
            (None, None, None)
        } else {
            let n = ages.len() as f64;
            let mean = ages.iter().sum::<f64>() / n;
            let var = ages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            (Some(mean), Some(var.sqrt()), Some((mean - gt_mean).abs()))
        };
        per_target_group.push(GroupAccuracy {
            group: t,
            count: ages.len(),
            skipped,
            mean_pred_age: mean,
            std_pred_age: std,
            gt_mean,
            mae,
        });
    }
    Ok(AgeAccuracyReport { per_target_group })
}
