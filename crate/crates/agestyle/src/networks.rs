//! Generator and discriminator architectures.
//!
//! The generator is a 6-stage strided-convolution encoder feeding a
//! mirrored 6-stage transposed-convolution decoder with full skip
//! connections. Every decoder stage (the bottleneck plus the five inner
//! upsampling stages) is modulated by AdaIN with style statistics taken
//! from the discriminator activation of matching channel count and
//! resolution; the final stage projects to three channels and bounds the
//! output with tanh. The discriminator mirrors the encoder, applies no
//! normalization (its raw activation statistics are the style signal),
//! and ends in a four-logit head, one real/fake logit per age group.
//!
//! Everything is expressed twice: as concrete `f32` forward passes for
//! inference and evaluation, and as graph builders on an autodiff
//! [`Tape`] for training.

use ndarray::{Array1, Array2, Array4, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Var};
use crate::dataset::AgeGroup;
use crate::error::{Error, Result};
use crate::stylestats::{
    adain_graph, channel_stats_graph, style_constants, FeatureMap, LayerMap, StyleStats,
    DEFAULT_EPS,
};

const LEAKY_SLOPE: f64 = 0.2;
const INIT_STD: f64 = 0.02;

/// Shape contract for the generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub n_layers: usize,
    pub base_channels: usize,
    pub image_size: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            n_layers: 6,
            base_channels: 32,
            image_size: 128,
        }
    }
}

/// Shape contract for the multi-task discriminator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub n_layers: usize,
    pub base_channels: usize,
    pub image_size: usize,
    pub heads: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            n_layers: 6,
            base_channels: 32,
            image_size: 128,
            heads: 4,
        }
    }
}

fn validate_dims(n_layers: usize, base_channels: usize, image_size: usize) -> Result<()> {
    if n_layers < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 encoder/decoder layers".into(),
        ));
    }
    if base_channels == 0 {
        return Err(Error::InvalidArgument("base_channels must be >= 1".into()));
    }
    let factor = 1usize << n_layers;
    if image_size == 0 || !image_size.is_multiple_of(factor) {
        return Err(Error::InvalidArgument(format!(
            "image_size {image_size} must be a positive multiple of {factor}"
        )));
    }
    // A 1x1 bottleneck would make per-sample spatial statistics
    // degenerate (AdaIN would erase the content path), so the deepest
    // feature map must keep at least 2x2 spatial extent.
    if image_size / factor < 2 {
        return Err(Error::InvalidArgument(format!(
            "image_size {image_size} with {n_layers} layers leaves a 1x1 bottleneck; \
             use at least {} or fewer layers",
            2 * factor
        )));
    }
    Ok(())
}

/// Channel width after encoder stage k: doubles per stage, capped at 8x.
fn stage_channels(base: usize, k: usize) -> usize {
    base * (1usize << k.min(3))
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        validate_dims(self.n_layers, self.base_channels, self.image_size)
    }

    /// (channels, spatial) of each encoder stage output, outermost first.
    pub fn encoder_dims(&self) -> Vec<(usize, usize)> {
        (0..self.n_layers)
            .map(|k| {
                (
                    stage_channels(self.base_channels, k),
                    self.image_size >> (k + 1),
                )
            })
            .collect()
    }

    /// (channels, spatial) at each AdaIN site in decoder order: site 0 is
    /// the bottleneck, site k >= 1 the pre-skip output of upsampling
    /// stage k. These are the dims style statistics must match.
    pub fn modulation_dims(&self) -> Vec<(usize, usize)> {
        let n = self.n_layers;
        (0..n)
            .map(|k| {
                (
                    stage_channels(self.base_channels, n - 1 - k),
                    self.image_size >> (n - k),
                )
            })
            .collect()
    }

    pub fn layer_map(&self) -> LayerMap {
        LayerMap::mirrored(self.n_layers)
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        validate_dims(self.n_layers, self.base_channels, self.image_size)?;
        if self.heads == 0 {
            return Err(Error::InvalidArgument("heads must be >= 1".into()));
        }
        Ok(())
    }

    /// (channels, spatial) of activations[k].
    pub fn activation_dims(&self) -> Vec<(usize, usize)> {
        (0..self.n_layers)
            .map(|k| {
                (
                    stage_channels(self.base_channels, k),
                    self.image_size >> (k + 1),
                )
            })
            .collect()
    }

    /// Spec matching a generator: same depth, width, and input size.
    pub fn mirroring(g: &GeneratorSpec) -> Self {
        DiscriminatorSpec {
            n_layers: g.n_layers,
            base_channels: g.base_channels,
            image_size: g.image_size,
            heads: AgeGroup::all().len(),
        }
    }
}

/// Check that discriminator activation k matches the generator's
/// modulation site (n-1-k) in both channel count and resolution, so the
/// mirrored [`LayerMap`] is exact.
pub fn check_mirroring(g: &GeneratorSpec, d: &DiscriminatorSpec) -> Result<()> {
    let sites = g.modulation_dims();
    let acts = d.activation_dims();
    if sites.len() != acts.len() {
        return Err(Error::InvalidArgument(format!(
            "generator has {} modulation sites, discriminator {} layers",
            sites.len(),
            acts.len()
        )));
    }
    for &(disc_id, dec_id) in g.layer_map().pairs() {
        if acts[disc_id] != sites[dec_id] {
            return Err(Error::InvalidArgument(format!(
                "discriminator layer {disc_id} {:?} does not mirror decoder site {dec_id} {:?}",
                acts[disc_id], sites[dec_id]
            )));
        }
    }
    Ok(())
}

/// Named, ordered parameter tensors of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<(String, ArrayD<f32>)>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, ArrayD<f32>)>) -> Self {
        ParamSet { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f32>)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn arrays(&self) -> Vec<&ArrayD<f32>> {
        self.entries.iter().map(|(_, a)| a).collect()
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut ArrayD<f32>> {
        self.entries.iter_mut().map(|(_, a)| a).collect()
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    /// Bind every tensor onto a tape, as trainable parameters or frozen
    /// constants. Returned vars align with entry order.
    pub fn bind<T: Scalar>(&self, tape: &Tape<T>, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, a)| {
                let v = a.mapv(|x| T::from_f64(x as f64));
                if trainable {
                    tape.param(v)
                } else {
                    tape.constant(v)
                }
            })
            .collect()
    }

    /// Copy evaluated tape values back into the tensors (after an
    /// optimizer built its update in-graph, for instance).
    pub fn assign_from<T: Scalar>(&mut self, tape: &Tape<T>, vars: &[Var]) {
        assert_eq!(vars.len(), self.entries.len());
        for ((_, a), &v) in self.entries.iter_mut().zip(vars) {
            *a = tape.value(v).mapv(|x| x.to_f64() as f32);
        }
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f32> {
    let dist = Normal::new(0.0, std).expect("valid normal");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng) as f32)
}

/// The style-conditioned generator: spec plus parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub spec: GeneratorSpec,
    pub params: ParamSet,
}

impl Generator {
    /// Random initialization: kernels from N(0, 0.02), output bias zero.
    pub fn init(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let n = spec.n_layers;
        let c = spec.base_channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();

        let mut in_ch = 3;
        for k in 0..n {
            let out_ch = stage_channels(c, k);
            entries.push((
                format!("enc{}.weight", k + 1),
                normal_tensor(&mut rng, &[out_ch, in_ch, 4, 4], INIT_STD),
            ));
            in_ch = out_ch;
        }
        // Upsampling stage j consumes the previous site's channels, plus
        // the skip concat for every stage after the first; the last stage
        // projects to RGB and is the only biased convolution.
        for j in 1..=n {
            let in_ch = if j == 1 {
                stage_channels(c, n - 1)
            } else {
                2 * stage_channels(c, n - j)
            };
            let out_ch = if j == n {
                3
            } else {
                stage_channels(c, n - 1 - j)
            };
            entries.push((
                format!("dec{j}.weight"),
                normal_tensor(&mut rng, &[in_ch, out_ch, 4, 4], INIT_STD),
            ));
        }
        entries.push((format!("dec{n}.bias"), ArrayD::zeros(IxDyn(&[3]))));
        Ok(Generator {
            spec,
            params: ParamSet::new(entries),
        })
    }

    /// Build the forward graph. `style` holds one (mean, std) pair per
    /// modulation site in decoder order, each broadcastable to
    /// (B, C_site, 1, 1). Returns the output image var and the post-skip
    /// decoder activations.
    pub fn forward_graph<T: Scalar>(
        &self,
        tape: &Tape<T>,
        vars: &[Var],
        x: Var,
        style: &[(Var, Var)],
    ) -> Result<(Var, Vec<Var>)> {
        let n = self.spec.n_layers;
        if style.len() != n {
            return Err(Error::InvalidArgument(format!(
                "expected {} style entries, got {}",
                n,
                style.len()
            )));
        }
        let xs = tape.shape(x);
        let s = self.spec.image_size;
        if xs.len() != 4 || xs[1] != 3 || xs[2] != s || xs[3] != s {
            return Err(Error::ShapeMismatch {
                expected: format!("(B, 3, {s}, {s})"),
                got: format!("{xs:?}"),
            });
        }
        let eps = DEFAULT_EPS;
        let slope = T::from_f64(LEAKY_SLOPE);

        let mut h = x;
        let mut skips = Vec::with_capacity(n - 1);
        for (k, &w) in vars.iter().enumerate().take(n) {
            h = tape.conv2d(h, w, 2, 1);
            if k + 1 < n {
                h = crate::stylestats::instance_norm_graph(tape, h, eps);
                h = tape.leaky_relu(h, slope);
                skips.push(h);
            } else {
                h = adain_graph(tape, h, style[0].0, style[0].1, eps);
                h = tape.leaky_relu(h, slope);
            }
        }

        let mut dec_acts = Vec::with_capacity(n);
        for j in 1..=n {
            let w = vars[n - 1 + j];
            let out_hw = s >> (n - j);
            h = tape.conv_transpose2d(h, w, 2, 1, (out_hw, out_hw));
            if j < n {
                h = adain_graph(tape, h, style[j].0, style[j].1, eps);
                h = tape.leaky_relu(h, slope);
                h = tape.concat(1, &[h, skips[n - 1 - j]]);
                dec_acts.push(h);
            } else {
                let bias = tape.reshape(vars[2 * n], &[1, 3, 1, 1]);
                h = tape.add(h, tape.broadcast_to(bias, &tape.shape(h)));
                h = tape.tanh(h);
                dec_acts.push(h);
            }
        }
        Ok((h, dec_acts))
    }
}

/// The mirrored multi-task discriminator: spec plus parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub spec: DiscriminatorSpec,
    pub params: ParamSet,
}

impl Discriminator {
    pub fn init(spec: DiscriminatorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let n = spec.n_layers;
        let c = spec.base_channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        let mut in_ch = 3;
        for k in 0..n {
            let out_ch = stage_channels(c, k);
            entries.push((
                format!("disc{}.weight", k + 1),
                normal_tensor(&mut rng, &[out_ch, in_ch, 4, 4], INIT_STD),
            ));
            entries.push((
                format!("disc{}.bias", k + 1),
                ArrayD::zeros(IxDyn(&[out_ch])),
            ));
            in_ch = out_ch;
        }
        entries.push((
            "head.weight".into(),
            normal_tensor(&mut rng, &[in_ch, spec.heads], INIT_STD),
        ));
        entries.push(("head.bias".into(), ArrayD::zeros(IxDyn(&[spec.heads]))));
        Ok(Discriminator {
            spec,
            params: ParamSet::new(entries),
        })
    }

    /// Build the forward graph: returns the (B, heads) logit var and the
    /// post-activation feature maps of all layers.
    pub fn forward_graph<T: Scalar>(
        &self,
        tape: &Tape<T>,
        vars: &[Var],
        x: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let n = self.spec.n_layers;
        let s = self.spec.image_size;
        let xs = tape.shape(x);
        if xs.len() != 4 || xs[1] != 3 || xs[2] != s || xs[3] != s {
            return Err(Error::ShapeMismatch {
                expected: format!("(B, 3, {s}, {s})"),
                got: format!("{xs:?}"),
            });
        }
        let slope = T::from_f64(LEAKY_SLOPE);
        let mut h = x;
        let mut acts = Vec::with_capacity(n);
        for k in 0..n {
            h = tape.conv2d(h, vars[2 * k], 2, 1);
            let ch = tape.shape(h)[1];
            let bias = tape.reshape(vars[2 * k + 1], &[1, ch, 1, 1]);
            h = tape.add(h, tape.broadcast_to(bias, &tape.shape(h)));
            h = tape.leaky_relu(h, slope);
            acts.push(h);
        }
        let pooled = tape.mean_axes(h, &[2, 3]);
        let b = tape.shape(pooled)[0];
        let ch = tape.shape(pooled)[1];
        let pooled = tape.reshape(pooled, &[b, ch]);
        let mut logits = tape.matmul(pooled, vars[2 * n]);
        let hb = tape.reshape(vars[2 * n + 1], &[1, self.spec.heads]);
        logits = tape.add(logits, tape.broadcast_to(hb, &[b, self.spec.heads]));
        Ok((logits, acts))
    }
}

/// Per-sample style statistics of mapped discriminator activations, as
/// graph vars in decoder-site order.
pub fn style_from_activations_graph<T: Scalar>(
    tape: &Tape<T>,
    acts: &[Var],
    layer_map: &LayerMap,
) -> Result<Vec<(Var, Var)>> {
    let mut pairs: Vec<_> = layer_map.pairs().to_vec();
    pairs.sort_by_key(|&(_, dec)| dec);
    pairs
        .iter()
        .map(|&(disc_id, _)| {
            let act = *acts
                .get(disc_id)
                .ok_or(Error::MissingLayer { layer: disc_id })?;
            Ok(channel_stats_graph(tape, act))
        })
        .collect()
}

/// Generator inference output.
#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    pub image: Array4<f32>,
    pub decoder_activations: Option<Vec<FeatureMap>>,
}

/// Discriminator inference output.
#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    pub logits: Array2<f32>,
    pub activations: Vec<FeatureMap>,
}

fn to_array4(a: ArrayD<f32>) -> Array4<f32> {
    a.into_dimensionality().expect("rank-4 tensor")
}

/// Run the generator on a batch with a fixed style payload.
pub fn generator_forward(
    gen: &Generator,
    x: &Array4<f32>,
    style: &StyleStats,
) -> Result<GeneratorOutput> {
    if style.len() != gen.spec.n_layers {
        return Err(Error::InvalidArgument(format!(
            "style covers {} layers, generator has {} modulation sites",
            style.len(),
            gen.spec.n_layers
        )));
    }
    let tape: Tape<f32> = Tape::new();
    let vars = gen.params.bind(&tape, false);
    let xv = tape.constant(x.clone().into_dyn());
    let style_vars: Vec<(Var, Var)> = (0..style.len())
        .map(|i| {
            let (mean, std) = style.entry(i);
            style_constants(&tape, mean, std)
        })
        .collect();
    let (img, dec_acts) = gen.forward_graph(&tape, &vars, xv, &style_vars)?;
    let decoder_activations = dec_acts
        .iter()
        .enumerate()
        .map(|(i, &v)| FeatureMap::new(to_array4(tape.value(v)), i))
        .collect::<Result<Vec<_>>>()?;
    Ok(GeneratorOutput {
        image: to_array4(tape.value(img)),
        decoder_activations: Some(decoder_activations),
    })
}

/// Run the discriminator on a batch.
pub fn discriminator_forward(disc: &Discriminator, x: &Array4<f32>) -> Result<DiscriminatorOutput> {
    let tape: Tape<f32> = Tape::new();
    let vars = disc.params.bind(&tape, false);
    let xv = tape.constant(x.clone().into_dyn());
    let (logits, acts) = disc.forward_graph(&tape, &vars, xv)?;
    let activations = acts
        .iter()
        .enumerate()
        .map(|(i, &v)| FeatureMap::new(to_array4(tape.value(v)), i))
        .collect::<Result<Vec<_>>>()?;
    Ok(DiscriminatorOutput {
        logits: tape
            .value(logits)
            .into_dimensionality()
            .expect("rank-2 logits"),
        activations,
    })
}

/// The age-group logit of each sample in a batch.
pub fn select_logit(out: &DiscriminatorOutput, group: AgeGroup) -> Array1<f32> {
    out.logits.column(group.index()).to_owned()
}

/// Extract the style payload of a single image through a discriminator.
pub fn style_of_image(disc: &Discriminator, x: &Array4<f32>) -> Result<StyleStats> {
    if x.dim().0 != 1 {
        return Err(Error::InvalidArgument(format!(
            "style extraction expects batch size 1, got {}",
            x.dim().0
        )));
    }
    let out = discriminator_forward(disc, x)?;
    let map = LayerMap::mirrored(disc.spec.n_layers);
    crate::stylestats::extract_style(&out.activations, &map)
}
