//! The acceptance gate. Every criterion prints one pass/fail line; the
//! test fails if any criterion does. Criterion 7 trains the full toy model
//! and dominates the runtime (around ten minutes on one core).

use std::cell::OnceCell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use agestyle::augment::{
    aging_accuracy, augment, ConstantEstimator, UniformPicker, GT_MEANS_MORPH,
};
use agestyle::autodiff::numgrad::{central_diff, max_relative_error};
use agestyle::autodiff::{Tape, Var};
use agestyle::dataset::{
    generate_toy, split, toy_age_oracle, AgeGroup, ClassDistribution, Manifest, ToySpec,
};
use agestyle::diversity::{diversity_report, shannon, shannon_evenness, simpson, simpson_evenness};
use agestyle::losses::{adversarial_loss_graph, feature_matching_graph, l1_graph, r1_graph};
use agestyle::stylestats::{adain, channel_stats, FeatureMap, DEFAULT_EPS};
use agestyle::trainer::{load_image, train, translate, TrainConfig, TrainState};
use ndarray::{Array1, Array4, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

struct Outcome {
    n: usize,
    detail: Result<String, String>,
}

fn run_criterion(
    n: usize,
    name: &str,
    budget_secs: Option<f64>,
    f: impl FnOnce() -> Result<String, String>,
) -> Outcome {
    let t0 = Instant::now();
    let detail = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "opaque panic".into());
            Err(format!("panicked: {msg}"))
        }
    };
    let elapsed = t0.elapsed();
    let detail = match (detail, budget_secs) {
        (Ok(d), Some(limit)) if elapsed.as_secs_f64() > limit => Err(format!(
            "checks passed but runtime {:.1}s exceeds the {limit:.0}s budget; {d}",
            elapsed.as_secs_f64()
        )),
        (r, _) => r,
    };
    let status = if detail.is_ok() { "PASS" } else { "FAIL" };
    let text = match &detail {
        Ok(d) => d.clone(),
        Err(e) => e.clone(),
    };
    println!(
        "criterion {n} {status} [{:>7.1}s] {name}: {text}",
        elapsed.as_secs_f64()
    );
    Outcome { n, detail }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---- criterion 1 -------------------------------------------------------

fn adain_moment_matching() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let c = rng.gen_range(2..=8usize);
        let hw = rng.gen_range(8..=16usize);
        let m = rng.gen_range(-2.0f32..2.0);
        let sigma = rng.gen_range(0.1f32..2.0);
        let content = FeatureMap::new(
            Array4::from_shape_simple_fn((1, c, hw, hw), || {
                m + sigma * rng.gen_range(-1.0f32..1.0)
            }),
            0,
        )
        .map_err(|e| e.to_string())?;
        let (_, cs) = channel_stats(&content);
        if cs.iter().any(|&s| s < 0.01) {
            return Err("sampled a content channel with std below 0.01".into());
        }
        let style_mean = Array1::from_shape_simple_fn(c, || {
            let mag = rng.gen_range(0.05f32..2.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        });
        let style_std = Array1::from_shape_simple_fn(c, || rng.gen_range(0.05f32..2.0));
        let out =
            adain(&content, &style_mean, &style_std, DEFAULT_EPS).map_err(|e| e.to_string())?;
        let (om, os) = channel_stats(&out);
        for ch in 0..c {
            let rm = ((om[(0, ch)] - style_mean[ch]).abs() / style_mean[ch].abs()) as f64;
            let rs = ((os[(0, ch)] - style_std[ch]).abs() / style_std[ch]) as f64;
            worst = worst.max(rm).max(rs);
        }
    }
    if worst <= 1e-3 {
        Ok(format!(
            "max relative stat error {worst:.2e} over 100 pairs"
        ))
    } else {
        Err(format!("max relative stat error {worst:.2e} exceeds 1e-3"))
    }
}

// ---- criterion 2 -------------------------------------------------------

/// A 72-parameter two-conv discriminator with three heads; `which` picks
/// the loss term assembled on top of it.
fn disc_term(
    tape: &Tape<f64>,
    w1: Var,
    w2: Var,
    x: &ArrayD<f64>,
    x_t: &ArrayD<f64>,
    which: &str,
) -> Var {
    let xv = tape.constant(x.clone());
    let xtv = tape.param(x_t.clone());
    let forward = |inp: Var| {
        let h1 = tape.leaky_relu(tape.conv2d(inp, w1, 2, 1), 0.2);
        let h2 = tape.leaky_relu(tape.conv2d(h1, w2, 2, 1), 0.2);
        let pooled = tape.mean_axes(h2, &[2, 3]);
        let b = tape.shape(pooled)[0];
        (tape.reshape(pooled, &[b, 3]), vec![h1, h2])
    };
    let (logits_real, acts_t) = forward(xtv);
    let (logits_fake, acts_f) = forward(xv);
    let sel_r = tape.select_per_row(logits_real, &[0, 2]);
    let sel_f = tape.select_per_row(logits_fake, &[1, 1]);
    match which {
        "adv" => adversarial_loss_graph(tape, sel_r, sel_f),
        "fm" => feature_matching_graph(tape, &acts_t, &acts_f),
        "gp" => r1_graph(tape, tape.sum_all(sel_r), xtv, 10.0),
        other => unreachable!("{other}"),
    }
}

/// A 36-parameter two-conv generator; the loss is the L1 distance between
/// the input and its own translation.
fn gen_term(tape: &Tape<f64>, g1: Var, g2: Var, input: &ArrayD<f64>) -> Var {
    let iv = tape.constant(input.clone());
    let h = tape.leaky_relu(tape.conv2d(iv, g1, 1, 1), 0.2);
    let out = tape.tanh(tape.conv2d(h, g2, 1, 1));
    l1_graph(tape, iv, out)
}

fn gradcheck<F>(build: F, params: &[ArrayD<f64>]) -> f64
where
    F: Fn(&Tape<f64>, &[Var]) -> Var,
{
    let tape: Tape<f64> = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&tape, &vars);
    let analytic = tape.grad_arrays(loss, &vars);
    let numeric = central_diff(
        |ps: &[ArrayD<f64>]| {
            let t: Tape<f64> = Tape::new();
            let vs: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
            t.scalar_value(build(&t, &vs))
        },
        params,
        1e-4,
    );
    max_relative_error(&analytic, &numeric)
}

fn loss_gradients_match_finite_differences() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut arr = |shape: &[usize], scale: f64| {
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-scale..scale))
    };
    let w1 = arr(&[2, 1, 3, 3], 0.5);
    let w2 = arr(&[3, 2, 3, 3], 0.5);
    let g1 = arr(&[2, 1, 3, 3], 0.5);
    let g2 = arr(&[1, 2, 3, 3], 0.5);
    let x = arr(&[2, 1, 6, 6], 1.0);
    let x_t = arr(&[2, 1, 6, 6], 1.0);
    let x_i = arr(&[2, 1, 6, 6], 1.0);
    let d_params = w1.len() + w2.len();
    let g_params = g1.len() + g2.len();
    if d_params > 200 || g_params > 200 {
        return Err(format!(
            "micro-networks too large: {d_params} and {g_params} parameters"
        ));
    }

    let disc_weights = [w1, w2];
    let gen_weights = [g1, g2];
    let errs = [
        (
            "adv",
            gradcheck(
                |t, vs| disc_term(t, vs[0], vs[1], &x, &x_t, "adv"),
                &disc_weights,
            ),
        ),
        (
            "fm",
            gradcheck(
                |t, vs| disc_term(t, vs[0], vs[1], &x, &x_t, "fm"),
                &disc_weights,
            ),
        ),
        (
            "rec",
            gradcheck(|t, vs| gen_term(t, vs[0], vs[1], &x), &gen_weights),
        ),
        (
            "id",
            gradcheck(|t, vs| gen_term(t, vs[0], vs[1], &x_i), &gen_weights),
        ),
        (
            "gp",
            gradcheck(
                |t, vs| disc_term(t, vs[0], vs[1], &x, &x_t, "gp"),
                &disc_weights,
            ),
        ),
    ];
    let summary: Vec<String> = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    let worst = errs.iter().map(|&(_, e)| e).fold(0.0f64, f64::max);
    if worst < 1e-3 {
        Ok(format!(
            "relative errors {} ({d_params}- and {g_params}-parameter nets, h=1e-4)",
            summary.join(", ")
        ))
    } else {
        Err(format!("relative errors {}", summary.join(", ")))
    }
}

// ---- criterion 3 -------------------------------------------------------

fn diversity_metric_oracle() -> Result<String, String> {
    let uniform = ClassDistribution::from_counts(&[5, 5, 5, 5]).map_err(|e| e.to_string())?;
    let (h, e) = shannon(&uniform);
    let e = e.ok_or("uniform evenness undefined")?;
    let (d, se) = simpson(&uniform);
    for (name, got, want, tol) in [
        ("H", h, 1.386294, 1e-6),
        ("ShE", e, 1.0, 1e-6),
        ("D", d, 4.0, 1e-6),
        ("SiE", se, 1.0, 1e-6),
    ] {
        if (got - want).abs() > tol {
            return Err(format!("uniform {name} = {got}, want {want} within {tol}"));
        }
    }

    let degen = ClassDistribution::from_counts(&[7, 0, 0, 0]).map_err(|e| e.to_string())?;
    let (h0, _) = shannon(&degen);
    let (d0, _) = simpson(&degen);
    if h0.abs() > 1e-12 || (d0 - 1.0).abs() > 1e-12 {
        return Err(format!("degenerate H = {h0}, D = {d0}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for i in 0..1000 {
        let s = rng.gen_range(2..=10usize);
        let mut probs: Vec<f64> = (0..s)
            .map(|_| {
                if rng.gen_bool(0.15) {
                    0.0
                } else {
                    rng.gen_range(0.0..1.0)
                }
            })
            .collect();
        let sum: f64 = probs.iter().sum();
        if sum == 0.0 {
            probs[0] = 1.0;
        } else {
            for p in &mut probs {
                *p /= sum;
            }
        }
        let dist = ClassDistribution::new(probs).map_err(|e| e.to_string())?;
        let (h, e) = shannon(&dist);
        let (d, se) = simpson(&dist);
        let ln_s = (s as f64).ln();
        let ok = h >= -1e-12
            && h <= ln_s + 1e-9
            && e.is_some_and(|e| (-1e-12..=1.0 + 1e-9).contains(&e))
            && d >= 1.0 - 1e-9
            && d <= s as f64 + 1e-9
            && se > 0.0
            && se <= 1.0 + 1e-9;
        if !ok {
            return Err(format!(
                "bounds violated on distribution {i}: H {h} E {e:?} D {d} SiE {se} (S = {s})"
            ));
        }
    }
    Ok("uniform and degenerate values exact; 1000 random distributions within bounds".into())
}

// ---- criterion 4 -------------------------------------------------------

fn published_evenness_consistency() -> Result<String, String> {
    let round2 = |v: f64| (v * 100.0).round() / 100.0;
    let she = shannon_evenness(1.36, 4).ok_or("evenness undefined for S = 4")?;
    let sie = simpson_evenness(3.81, 4);
    if round2(she) == 0.98 && round2(sie) == 0.95 {
        Ok(format!(
            "1.36/ln 4 = {she:.4} -> 0.98, 3.81/4 = {sie:.4} -> 0.95"
        ))
    } else {
        Err(format!(
            "1.36/ln 4 = {she:.4}, 3.81/4 = {sie:.4}; expected 0.98 and 0.95"
        ))
    }
}

// ---- criteria 5 and 6 --------------------------------------------------

struct MicroFixture {
    _dir: TempDir,
    manifest: Manifest,
    state: TrainState,
}

fn micro_fixture() -> MicroFixture {
    let dir = TempDir::new().expect("tempdir");
    let spec = ToySpec {
        image_size: 16,
        samples_per_group: 2,
        noise_level: 0.1,
        seed: 9,
    };
    let manifest = generate_toy(&spec, dir.path()).expect("micro corpus");
    let config = TrainConfig {
        batch_size: 2,
        steps: 0,
        seed: 9,
        image_size: 16,
        n_layers: 2,
        base_channels: 4,
        ..TrainConfig::default()
    };
    let state = TrainState::new(config).expect("micro state");
    MicroFixture {
        _dir: dir,
        manifest,
        state,
    }
}

fn published_mae_recomputation(micro: &MicroFixture, out_dir: &Path) -> Result<String, String> {
    let by = micro.manifest.indices_by_group();
    let sources = Manifest::new(
        by[0]
            .iter()
            .map(|&i| micro.manifest.records[i].clone())
            .collect(),
        "acceptance-sources",
    );
    let mut picker = UniformPicker::new(5);
    let report = aging_accuracy(
        &micro.state,
        &sources,
        &micro.manifest,
        &ConstantEstimator(56.62),
        &mut picker,
        GT_MEANS_MORPH,
        out_dir,
    )
    .map_err(|e| e.to_string())?;
    let g3 = report
        .per_target_group
        .iter()
        .find(|g| g.group == 3)
        .ok_or("no group-3 row in the report")?;
    let mae = g3.mae.ok_or("group-3 MAE missing")?;
    if (mae - 1.69).abs() <= 0.02 {
        Ok(format!("|56.62 - 54.92| = {mae:.4}, within 0.02 of 1.69"))
    } else {
        Err(format!("group-3 MAE {mae:.4} not within 0.02 of 1.69"))
    }
}

fn augmentation_evenness(micro: &MicroFixture, root: &Path) -> Result<String, String> {
    let by = micro.manifest.indices_by_group();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for i in 0..50u64 {
        let counts: [usize; 4] = std::array::from_fn(|_| rng.gen_range(1..=3));
        let mut records = Vec::new();
        for (k, &count) in counts.iter().enumerate() {
            for j in 0..count {
                records.push(micro.manifest.records[by[k][j % by[k].len()]].clone());
            }
        }
        let manifest = Manifest::new(records, format!("random-{i}"));
        let n = manifest.len();
        let mut picker = UniformPicker::new(i);
        let augmented = augment(
            &micro.state,
            &manifest,
            None,
            &mut picker,
            &root.join(format!("aug{i:02}")),
        )
        .map_err(|e| e.to_string())?;
        if augmented.len() != 4 * n {
            return Err(format!(
                "input counts {counts:?}: augmented to {} records, want {}",
                augmented.len(),
                4 * n
            ));
        }
        let gc = augmented.group_counts();
        if gc.iter().any(|&c| c != n) {
            return Err(format!(
                "input counts {counts:?}: augmented counts {gc:?} are not all {n}"
            ));
        }
    }
    Ok("50 random manifests quadrupled with exactly equal group counts".into())
}

// ---- criteria 7 and 8 --------------------------------------------------

struct ToyCorpus {
    _dir: TempDir,
    manifest: Manifest,
}

fn build_toy_corpus() -> ToyCorpus {
    let dir = TempDir::new().expect("tempdir");
    let spec = ToySpec {
        image_size: 64,
        samples_per_group: 200,
        noise_level: 0.1,
        seed: 0,
    };
    let manifest = generate_toy(&spec, dir.path()).expect("toy corpus");
    ToyCorpus {
        _dir: dir,
        manifest,
    }
}

fn toy_end_to_end(corpus: &OnceCell<ToyCorpus>, out_root: &Path) -> Result<String, String> {
    let corpus = corpus.get_or_init(build_toy_corpus);
    let (train_set, test_set) = split(&corpus.manifest, 0.1, 7).map_err(|e| e.to_string())?;

    let config = TrainConfig {
        batch_size: 2,
        steps: 2250,
        seed: 0,
        image_size: 64,
        n_layers: 5,
        base_channels: 16,
        learning_rate: 3e-4,
        ..TrainConfig::default()
    };
    let artifacts = train(&config, &train_set, &out_root.join("run")).map_err(|e| e.to_string())?;
    let state =
        agestyle::checkpoint::load(&artifacts.final_checkpoint).map_err(|e| e.to_string())?;

    let by = test_set.indices_by_group();
    if by[0].len() < 14 || by[1].len() < 2 || by[2].is_empty() || by[3].is_empty() {
        return Err(format!(
            "unexpected test split {:?}",
            test_set.group_counts()
        ));
    }
    let mut eval_rng = ChaCha8Rng::seed_from_u64(99);
    let mut moved = 0usize;
    for &si in &by[0] {
        let x = load_image(&test_set.records[si].image_path, 64).map_err(|e| e.to_string())?;
        let ti = by[3][eval_rng.gen_range(0..by[3].len())];
        let t = load_image(&test_set.records[ti].image_path, 64).map_err(|e| e.to_string())?;
        let y =
            translate(&state.generator, &state.discriminator, &x, &t).map_err(|e| e.to_string())?;
        let est = toy_age_oracle(&y.view());
        if !est.degenerate && AgeGroup::from_ring_count(est.rings).index() >= 2 {
            moved += 1;
        }
    }
    let total = by[0].len();
    let frac = moved as f64 / total as f64;

    let mut records = Vec::new();
    for (k, want) in [(0usize, 14usize), (1, 2), (2, 1), (3, 1)] {
        for &i in by[k].iter().take(want) {
            records.push(test_set.records[i].clone());
        }
    }
    let subset = Manifest::new(records, "imbalanced-test");
    let before = diversity_report(&subset).map_err(|e| e.to_string())?;
    let e_before = before.shannon_e.ok_or("subset evenness undefined")?;
    if !(0.50..=0.60).contains(&e_before) {
        return Err(format!(
            "imbalanced subset evenness {e_before:.3} outside 0.55 +- 0.05"
        ));
    }
    let mut picker = UniformPicker::new(7);
    let augmented = augment(&state, &subset, None, &mut picker, &out_root.join("aug"))
        .map_err(|e| e.to_string())?;
    let after = diversity_report(&augmented).map_err(|e| e.to_string())?;
    let e_after = after.shannon_e.ok_or("augmented evenness undefined")?;

    if frac < 0.7 {
        return Err(format!(
            "only {moved}/{total} translations reached oracle group >= 2"
        ));
    }
    if e_after < 0.99 {
        return Err(format!("augmented evenness {e_after:.4} below 0.99"));
    }
    Ok(format!(
        "0->3 transfer moved {moved}/{total}; shannon E {e_before:.3} -> {e_after:.3} (2250 steps)"
    ))
}

fn determinism(corpus: &OnceCell<ToyCorpus>, out_root: &Path) -> Result<String, String> {
    let corpus = corpus
        .get()
        .ok_or("toy corpus unavailable (criterion 7 setup failed)")?;
    let config = TrainConfig {
        batch_size: 2,
        steps: 150,
        seed: 42,
        image_size: 64,
        n_layers: 5,
        base_channels: 16,
        learning_rate: 3e-4,
        checkpoint_every: 50,
        ..TrainConfig::default()
    };
    let a = train(&config, &corpus.manifest, &out_root.join("a")).map_err(|e| e.to_string())?;
    let b = train(&config, &corpus.manifest, &out_root.join("b")).map_err(|e| e.to_string())?;
    let log_a = std::fs::read(&a.loss_log).map_err(|e| e.to_string())?;
    let log_b = std::fs::read(&b.loss_log).map_err(|e| e.to_string())?;
    let rows = log_a.split(|&c| c == b'\n').count();
    if log_a == log_b {
        Ok(format!(
            "two complete 150-step runs wrote identical loss logs ({} bytes, {rows} lines)",
            log_a.len()
        ))
    } else {
        Err("loss logs differ between identically seeded runs".into())
    }
}

// ---- the gate ----------------------------------------------------------

#[test]
fn acceptance() {
    let started = Instant::now();
    let mut outcomes = vec![
        run_criterion(
            1,
            "adain moment matching",
            Some(10.0),
            adain_moment_matching,
        ),
        run_criterion(
            2,
            "loss gradients vs finite differences",
            Some(60.0),
            loss_gradients_match_finite_differences,
        ),
        run_criterion(
            3,
            "diversity metric oracle",
            Some(5.0),
            diversity_metric_oracle,
        ),
        run_criterion(
            4,
            "published evenness consistency",
            None,
            published_evenness_consistency,
        ),
    ];

    let micro = micro_fixture();
    let micro_out = TempDir::new().expect("tempdir");
    outcomes.push(run_criterion(
        5,
        "published MAE recomputation",
        None,
        || published_mae_recomputation(&micro, &micro_out.path().join("mae")),
    ));
    outcomes.push(run_criterion(6, "augmentation evenness", Some(5.0), || {
        augmentation_evenness(&micro, micro_out.path())
    }));

    let corpus: OnceCell<ToyCorpus> = OnceCell::new();
    let toy_out = TempDir::new().expect("tempdir");
    outcomes.push(run_criterion(7, "toy end-to-end", Some(1200.0), || {
        toy_end_to_end(&corpus, &toy_out.path().join("e2e"))
    }));
    outcomes.push(run_criterion(8, "determinism", None, || {
        determinism(&corpus, &toy_out.path().join("det"))
    }));

    let passed = outcomes.iter().filter(|o| o.detail.is_ok()).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.0}s",
        outcomes.len(),
        secs(started.elapsed())
    );
    let failures: Vec<String> = outcomes
        .iter()
        .filter_map(|o| {
            o.detail
                .as_ref()
                .err()
                .map(|e| format!("criterion {}: {e}", o.n))
        })
        .collect();
    assert!(failures.is_empty(), "\n{}", failures.join("\n"));
}
