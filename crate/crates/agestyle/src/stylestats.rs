//! Channel-wise feature statistics and adaptive instance normalization.
//!
//! The aging signal travels between networks as per-channel first and
//! second moments of feature maps: [`extract_style`] reads them off
//! discriminator activations, and [`adain`] re-imposes them on generator
//! feature maps. Array-level functions operate on concrete `f32` tensors;
//! the `*_graph` variants build the same computation on an autodiff
//! [`Tape`] so it can be trained through.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{Error, Result};

/// Guard added to the content standard deviation before dividing.
pub const DEFAULT_EPS: f32 = 1e-5;

/// Variance floor inside graph-mode square roots; keeps the sqrt gradient
/// finite on constant feature maps without visibly changing the statistics.
const VAR_GUARD: f64 = 1e-12;

/// A named rank-4 activation tensor (batch, channels, height, width).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Array4<f32>,
    pub layer_id: usize,
}

impl FeatureMap {
    pub fn new(values: Array4<f32>, layer_id: usize) -> Result<Self> {
        if values.shape().contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "feature map dimensions must all be >= 1, got {:?}",
                values.shape()
            )));
        }
        Ok(FeatureMap { values, layer_id })
    }

    pub fn channels(&self) -> usize {
        self.values.dim().1
    }
}

/// Per-layer channel statistics: the "age style" payload for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleStats {
    per_layer: Vec<(Array1<f32>, Array1<f32>)>,
    layer_ids: Vec<usize>,
}

impl StyleStats {
    /// Build from (mean, std) pairs keyed by decoder layer id.
    pub fn new(per_layer: Vec<(Array1<f32>, Array1<f32>)>, layer_ids: Vec<usize>) -> Result<Self> {
        if per_layer.len() != layer_ids.len() {
            return Err(Error::InvalidArgument(
                "style stats and layer ids must have the same length".into(),
            ));
        }
        for (mean, std) in &per_layer {
            if mean.len() != std.len() {
                return Err(Error::InvalidArgument(
                    "mean and std vectors must have the same length".into(),
                ));
            }
            if std.iter().any(|&s| s < 0.0 || !s.is_finite()) {
                return Err(Error::InvalidArgument(
                    "std entries must be finite and non-negative".into(),
                ));
            }
        }
        Ok(StyleStats {
            per_layer,
            layer_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.per_layer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_layer.is_empty()
    }

    pub fn layer_ids(&self) -> &[usize] {
        &self.layer_ids
    }

    /// Entry for the i-th modulated decoder layer, in decoder order.
    pub fn entry(&self, i: usize) -> (&Array1<f32>, &Array1<f32>) {
        (&self.per_layer[i].0, &self.per_layer[i].1)
    }

    /// Euclidean distance between two style payloads of identical layout.
    pub fn l2_distance(&self, other: &StyleStats) -> Result<f64> {
        if self.layer_ids != other.layer_ids
            || self
                .per_layer
                .iter()
                .zip(&other.per_layer)
                .any(|(a, b)| a.0.len() != b.0.len())
        {
            return Err(Error::InvalidArgument(
                "style payloads have different layouts".into(),
            ));
        }
        let mut acc = 0.0f64;
        for ((m1, s1), (m2, s2)) in self.per_layer.iter().zip(&other.per_layer) {
            for (a, b) in m1.iter().zip(m2).chain(s1.iter().zip(s2)) {
                acc += ((a - b) as f64).powi(2);
            }
        }
        Ok(acc.sqrt())
    }
}

/// Pairing of discriminator layers to the decoder layers they modulate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMap {
    pairs: Vec<(usize, usize)>,
}

impl LayerMap {
    /// Pairs must reference each decoder layer at most once.
    pub fn new(pairs: Vec<(usize, usize)>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for &(_, dec) in &pairs {
            if !seen.insert(dec) {
                return Err(Error::InvalidArgument(format!(
                    "decoder layer {dec} mapped more than once"
                )));
            }
        }
        Ok(LayerMap { pairs })
    }

    /// The resolution-mirrored map for `n_layers` encoder/decoder stages:
    /// discriminator layer `n-1-k` feeds decoder site `k`, so the deepest
    /// (coarsest) discriminator features modulate the bottleneck and the
    /// shallowest modulate the last upsampling stage.
    pub fn mirrored(n_layers: usize) -> Self {
        LayerMap {
            pairs: (0..n_layers).map(|k| (n_layers - 1 - k, k)).collect(),
        }
    }

    /// (discriminator_layer_id, decoder_layer_id) pairs in decoder order.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }
}

/// Per-sample, per-channel mean and population standard deviation over
/// spatial positions. Returns (B, C) matrices.
pub fn channel_stats(f: &FeatureMap) -> (Array2<f32>, Array2<f32>) {
    let (b, c, h, w) = f.values.dim();
    let n = (h * w) as f64;
    let mut mean = Array2::zeros((b, c));
    let mut std = Array2::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let slice = f.values.index_axis(Axis(0), bi);
            let slice = slice.index_axis(Axis(0), ci);
            let m: f64 = slice.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var: f64 = slice.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
            mean[(bi, ci)] = m as f32;
            std[(bi, ci)] = var.sqrt() as f32;
        }
    }
    (mean, std)
}

/// Adaptive instance normalization: realign each channel of `content` to
/// the target mean and std. One style vector is applied to every sample
/// in the batch; content statistics stay per-sample.
pub fn adain(
    content: &FeatureMap,
    style_mean: &Array1<f32>,
    style_std: &Array1<f32>,
    eps: f32,
) -> Result<FeatureMap> {
    let (b, c, h, w) = content.values.dim();
    if style_mean.len() != c || style_std.len() != c {
        return Err(Error::ChannelMismatch {
            content: c,
            style: style_mean.len().max(style_std.len()),
        });
    }
    let (mean, std) = channel_stats(content);
    let mut out = content.values.clone();
    for bi in 0..b {
        for ci in 0..c {
            let m = mean[(bi, ci)];
            let s = std[(bi, ci)] + eps;
            let scale = style_std[ci] / s;
            let shift = style_mean[ci];
            let mut view = out.index_axis_mut(Axis(0), bi);
            let mut view = view.index_axis_mut(Axis(0), ci);
            view.mapv_inplace(|v| (v - m) * scale + shift);
            let _ = (h, w);
        }
    }
    FeatureMap::new(out, content.layer_id)
}

/// Read the style payload for a single image (batch size 1) off a set of
/// discriminator activations, ordered by decoder layer.
pub fn extract_style(d_activations: &[FeatureMap], layer_map: &LayerMap) -> Result<StyleStats> {
    let mut per_layer = Vec::with_capacity(layer_map.pairs().len());
    let mut layer_ids = Vec::with_capacity(layer_map.pairs().len());
    let mut pairs: Vec<_> = layer_map.pairs().to_vec();
    pairs.sort_by_key(|&(_, dec)| dec);
    for (disc_id, dec_id) in pairs {
        let fm = d_activations
            .iter()
            .find(|f| f.layer_id == disc_id)
            .ok_or(Error::MissingLayer { layer: disc_id })?;
        if fm.values.dim().0 != 1 {
            return Err(Error::InvalidArgument(format!(
                "style extraction expects batch size 1, got {}",
                fm.values.dim().0
            )));
        }
        let (mean, std) = channel_stats(fm);
        per_layer.push((
            mean.index_axis(Axis(0), 0).to_owned(),
            std.index_axis(Axis(0), 0).to_owned(),
        ));
        layer_ids.push(dec_id);
    }
    StyleStats::new(per_layer, layer_ids)
}

/// Graph-mode channel statistics: per-sample mean and std over the spatial
/// axes, each shaped (B, C, 1, 1) so they broadcast over the source map.
pub fn channel_stats_graph<T: Scalar>(tape: &Tape<T>, x: Var) -> (Var, Var) {
    let mean = tape.mean_axes(x, &[2, 3]);
    let centered = tape.sub(x, tape.broadcast_to(mean, &tape.shape(x)));
    let var = tape.mean_axes(tape.square(centered), &[2, 3]);
    let std = tape.sqrt(tape.add_scalar(var, T::from_f64(VAR_GUARD)));
    (mean, std)
}

/// Graph-mode non-affine instance normalization.
pub fn instance_norm_graph<T: Scalar>(tape: &Tape<T>, x: Var, eps: f32) -> Var {
    let (mean, std) = channel_stats_graph(tape, x);
    let shape = tape.shape(x);
    let centered = tape.sub(x, tape.broadcast_to(mean, &shape));
    let denom = tape.broadcast_to(tape.add_scalar(std, T::from_f64(eps as f64)), &shape);
    tape.div(centered, denom)
}

/// Graph-mode AdaIN. `style_mean` and `style_std` are (B, C, 1, 1)
/// tensors, letting each sample in the batch carry its own target style.
pub fn adain_graph<T: Scalar>(
    tape: &Tape<T>,
    content: Var,
    style_mean: Var,
    style_std: Var,
    eps: f32,
) -> Var {
    let normalized = instance_norm_graph(tape, content, eps);
    let shape = tape.shape(content);
    let scaled = tape.mul(normalized, tape.broadcast_to(style_std, &shape));
    tape.add(scaled, tape.broadcast_to(style_mean, &shape))
}

/// Lift a per-channel style vector pair into (1, C, 1, 1) graph constants.
pub fn style_constants<T: Scalar>(
    tape: &Tape<T>,
    mean: &Array1<f32>,
    std: &Array1<f32>,
) -> (Var, Var) {
    let c = mean.len();
    let to_const = |v: &Array1<f32>| {
        let data: Vec<T> = v.iter().map(|&x| T::from_f64(x as f64)).collect();
        tape.constant(
            ArrayD::from_shape_vec(ndarray::IxDyn(&[1, c, 1, 1]), data).expect("style shape"),
        )
    };
    (to_const(mean), to_const(std))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::numgrad::{central_diff, max_relative_error};
    use approx::assert_abs_diff_eq;
    use ndarray::{Array, IxDyn};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(shape: (usize, usize, usize, usize), seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = Array4::from_shape_simple_fn(shape, || rng.gen_range(-1.0f32..1.0));
        FeatureMap::new(values, 0).unwrap()
    }

    #[test]
    fn constant_map_stats() {
        let f = FeatureMap::new(Array4::from_elem((2, 3, 4, 4), 3.0), 0).unwrap();
        let (mean, std) = channel_stats(&f);
        assert!(mean.iter().all(|&m| (m - 3.0).abs() < 1e-7));
        assert!(std.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn symmetric_pair_stats() {
        let f = FeatureMap::new(
            Array4::from_shape_vec((1, 1, 1, 2), vec![-1.0, 1.0]).unwrap(),
            0,
        )
        .unwrap();
        let (mean, std) = channel_stats(&f);
        assert_abs_diff_eq!(mean[(0, 0)], 0.0, epsilon = 1e-7);
        assert_abs_diff_eq!(std[(0, 0)], 1.0, epsilon = 1e-7);
    }

    #[test]
    fn stats_match_two_pass_oracle() {
        let f = random_map((2, 3, 4, 4), 11);
        let (mean, std) = channel_stats(&f);
        for b in 0..2 {
            for c in 0..3 {
                let vals: Vec<f64> = f
                    .values
                    .index_axis(Axis(0), b)
                    .index_axis(Axis(0), c)
                    .iter()
                    .map(|&v| v as f64)
                    .collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
                assert_abs_diff_eq!(mean[(b, c)] as f64, m, epsilon = 1e-6);
                assert_abs_diff_eq!(std[(b, c)] as f64, var.sqrt(), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn adain_normalization_case() {
        let content = random_map((2, 3, 8, 8), 5);
        let mean = Array1::zeros(3);
        let std = Array1::ones(3);
        let out = adain(&content, &mean, &std, DEFAULT_EPS).unwrap();
        assert_eq!(out.values.dim(), content.values.dim());
        let (m, s) = channel_stats(&out);
        assert!(m.iter().all(|&v| v.abs() < 1e-6));
        assert!(s.iter().all(|&v| (v - 1.0).abs() < 1e-4));
    }

    #[test]
    fn adain_identity_case() {
        let content = random_map((1, 2, 6, 6), 9);
        let (mean, std) = channel_stats(&content);
        let out = adain(
            &content,
            &mean.index_axis(Axis(0), 0).to_owned(),
            &std.index_axis(Axis(0), 0).to_owned(),
            DEFAULT_EPS,
        )
        .unwrap();
        for (a, b) in out.values.iter().zip(content.values.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn adain_constant_content_maps_to_style_mean() {
        let content = FeatureMap::new(Array4::from_elem((1, 2, 4, 4), 0.7), 0).unwrap();
        let out = adain(
            &content,
            &Array1::from_elem(2, 5.0),
            &Array1::from_elem(2, 2.0),
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(out.values.iter().all(|&v| (v - 5.0).abs() < 1e-6));
    }

    #[test]
    fn adain_rejects_channel_mismatch() {
        let content = random_map((1, 3, 4, 4), 2);
        let err = adain(&content, &Array1::zeros(2), &Array1::ones(2), DEFAULT_EPS).unwrap_err();
        assert!(matches!(
            err,
            Error::ChannelMismatch {
                content: 3,
                style: 2
            }
        ));
    }

    #[test]
    fn extract_style_single_pair() {
        let fm = FeatureMap::new(Array4::from_elem((1, 4, 2, 2), 1.5), 3).unwrap();
        let map = LayerMap::new(vec![(3, 0)]).unwrap();
        let style = extract_style(&[fm], &map).unwrap();
        assert_eq!(style.len(), 1);
        assert_eq!(style.layer_ids(), &[0]);
        let (mean, std) = style.entry(0);
        assert!(mean.iter().all(|&m| (m - 1.5).abs() < 1e-7));
        assert!(std.iter().all(|&s| s.abs() < 1e-7));
    }

    #[test]
    fn extract_style_missing_layer() {
        let fm = FeatureMap::new(Array4::zeros((1, 4, 2, 2)), 0).unwrap();
        let map = LayerMap::new(vec![(5, 0)]).unwrap();
        let err = extract_style(&[fm], &map).unwrap_err();
        assert!(matches!(err, Error::MissingLayer { layer: 5 }));
    }

    #[test]
    fn toy_images_with_different_rings_have_distinct_styles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let map = LayerMap::new(vec![(0, 0)]).unwrap();
        let style_of = |rings: usize, rng: &mut ChaCha8Rng| {
            let img = crate::dataset::render_toy_image(32, rings, 0.45, 1.0, 0.0, rng);
            let fm = FeatureMap::new(img.insert_axis(Axis(0)), 0).unwrap();
            extract_style(&[fm], &map).unwrap()
        };
        let a = style_of(1, &mut rng);
        let b = style_of(7, &mut rng);
        assert!(a.l2_distance(&b).unwrap() > 0.0);
    }

    #[test]
    fn layer_map_rejects_duplicate_decoder_layer() {
        assert!(LayerMap::new(vec![(0, 1), (2, 1)]).is_err());
        let m = LayerMap::mirrored(6);
        assert_eq!(m.pairs(), &[(5, 0), (4, 1), (3, 2), (2, 3), (1, 4), (0, 5)]);
    }

    #[test]
    fn graph_adain_matches_array_adain() {
        let content = random_map((2, 3, 4, 4), 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mean = Array1::from_shape_simple_fn(3, || rng.gen_range(-2.0f32..2.0));
        let std = Array1::from_shape_simple_fn(3, || rng.gen_range(0.1f32..2.0));
        let expected = adain(&content, &mean, &std, DEFAULT_EPS).unwrap();

        let tape: Tape<f32> = Tape::new();
        let x = tape.constant(content.values.clone().into_dyn());
        let (sm, ss) = style_constants(&tape, &mean, &std);
        let shape = [2, 3, 1, 1];
        let sm = tape.broadcast_to(tape.reshape(sm, &[1, 3, 1, 1]), &shape);
        let ss = tape.broadcast_to(tape.reshape(ss, &[1, 3, 1, 1]), &shape);
        let out = adain_graph(&tape, x, sm, ss, DEFAULT_EPS);
        let got = tape.value(out);
        for (a, b) in got.iter().zip(expected.values.iter()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn graph_adain_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let content =
            Array::from_shape_simple_fn(IxDyn(&[2, 2, 2, 2]), || rng.gen_range(-1.0f64..1.0));
        let weights =
            Array::from_shape_simple_fn(IxDyn(&[2, 2, 2, 2]), || rng.gen_range(-1.0f64..1.0));
        let style_mean =
            Array::from_shape_simple_fn(IxDyn(&[2, 2, 1, 1]), || rng.gen_range(-1.0f64..1.0));
        let style_std =
            Array::from_shape_simple_fn(IxDyn(&[2, 2, 1, 1]), || rng.gen_range(0.5f64..1.5));

        let f = |params: &[ArrayD<f64>]| -> f64 {
            let tape: Tape<f64> = Tape::new();
            let x = tape.param(params[0].clone());
            let sm = tape.constant(style_mean.clone());
            let ss = tape.constant(style_std.clone());
            let out = adain_graph(&tape, x, sm, ss, DEFAULT_EPS);
            let loss = tape.sum_all(tape.mul(out, tape.constant(weights.clone())));
            tape.scalar_value(loss)
        };

        let tape: Tape<f64> = Tape::new();
        let x = tape.param(content.clone());
        let sm = tape.constant(style_mean.clone());
        let ss = tape.constant(style_std.clone());
        let out = adain_graph(&tape, x, sm, ss, DEFAULT_EPS);
        let loss = tape.sum_all(tape.mul(out, tape.constant(weights.clone())));
        let analytic = tape.grad_arrays(loss, &[x]);

        let numeric = central_diff(f, &[content], 1e-5);
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-3, "relative error {err}");
    }

    proptest! {
        #[test]
        fn moment_matching(
            seed in 0u64..1000,
            mus in proptest::array::uniform3(-3.0f32..3.0),
            sigmas in proptest::array::uniform3(0.01f32..3.0),
        ) {
            let content = random_map((2, 3, 6, 6), seed);
            let (_, c_std) = channel_stats(&content);
            prop_assume!(c_std.iter().all(|&s| s >= 0.01));
            let mu = Array1::from_vec(mus.to_vec());
            let sigma = Array1::from_vec(sigmas.to_vec());
            let out = adain(&content, &mu, &sigma, DEFAULT_EPS).unwrap();
            prop_assert_eq!(out.values.dim(), content.values.dim());
            let (m, s) = channel_stats(&out);
            for b in 0..2 {
                for c in 0..3 {
                    let tol_m = 1e-3f32 * mus[c].abs().max(1.0);
                    prop_assert!((m[(b, c)] - mus[c]).abs() <= tol_m,
                        "mean {} target {}", m[(b, c)], mus[c]);
                    let tol_s = 1e-3f32 * sigmas[c].max(1.0);
                    prop_assert!((s[(b, c)] - sigmas[c]).abs() <= tol_s,
                        "std {} target {}", s[(b, c)], sigmas[c]);
                }
            }
        }

        #[test]
        fn adain_is_idempotent(seed in 0u64..1000) {
            let content = random_map((1, 2, 5, 5), seed);
            let mu = Array1::from_vec(vec![0.3, -0.7]);
            let sigma = Array1::from_vec(vec![1.2, 0.4]);
            let once = adain(&content, &mu, &sigma, DEFAULT_EPS).unwrap();
            let twice = adain(&once, &mu, &sigma, DEFAULT_EPS).unwrap();
            for (a, b) in twice.values.iter().zip(once.values.iter()) {
                prop_assert!((a - b).abs() < 1e-4);
            }
        }
    }
}
