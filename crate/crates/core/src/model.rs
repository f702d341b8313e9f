//! Model configuration, named parameter groups and their initialisation.
//!
//! Parameters live in three namespaces: `seg/` (segmentation net), `mvp/`
//! (mean-variance network and preference embedder) and `weight/` (weight
//! network). Names ending in `_buf` are fixed buffers and never receive
//! gradients.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Grads, Graph, Var};
use crate::tensor::Tensor;

/// Width of every prompt token.
pub const PROMPT_DIM: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
    /// Output channels of each 3×3 encoder block.
    pub encoder_channels: Vec<usize>,
    pub encoder_strides: Vec<usize>,
    pub latent_dim: usize,
    pub components: usize,
    pub conditioner_kernel: usize,
    /// Number of random Fourier projections; features are `2 ×` this.
    pub fourier_features: usize,
    pub decoder_width: usize,
    pub decoder_heads: usize,
    pub decoder_layers: usize,
    pub decoder_mlp: usize,
    pub upsample_channels: [usize; 2],
    /// Number of learned candidate-slot prompt vectors (≥ K).
    pub candidate_slots: usize,
    /// Channel width of the mean-variance and preference conv stacks.
    pub aux_channels: usize,
    pub weight_hidden: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            image_channels: 1,
            encoder_channels: vec![16, 32, 32, 32],
            encoder_strides: vec![1, 2, 2, 2],
            latent_dim: crate::space::DEFAULT_LATENT_DIM,
            components: crate::space::DEFAULT_COMPONENTS,
            conditioner_kernel: 3,
            fourier_features: 32,
            decoder_width: 128,
            decoder_heads: 4,
            decoder_layers: 2,
            decoder_mlp: 256,
            upsample_channels: [32, 16],
            candidate_slots: 3,
            aux_channels: 16,
            weight_hidden: 32,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// A narrow variant for quick experiments on a single CPU core.
    pub fn compact() -> Self {
        Self {
            encoder_channels: vec![8, 16, 16, 16],
            decoder_width: 32,
            decoder_heads: 2,
            decoder_layers: 2,
            decoder_mlp: 64,
            upsample_channels: [16, 8],
            ..Self::default()
        }
    }

    pub fn embed_dim(&self) -> usize {
        *self.encoder_channels.last().unwrap_or(&0)
    }

    pub fn downsample(&self) -> usize {
        self.encoder_strides.iter().product()
    }

    pub fn embed_hw(&self) -> (usize, usize) {
        let ds = self.downsample();
        (self.image_height / ds, self.image_width / ds)
    }

    /// Bilinear factor applied after the two ×2 transposed convolutions.
    pub fn final_upsample(&self) -> usize {
        self.downsample() / 4
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.encoder_channels.is_empty() || self.encoder_channels.len() != self.encoder_strides.len() {
            return bad("encoder channels and strides must be non-empty and equally long".into());
        }
        if self.encoder_strides.contains(&0) {
            return bad("encoder strides must be positive".into());
        }
        let ds = self.downsample();
        if ds < 4 || !ds.is_multiple_of(4) {
            return bad(format!("encoder downsample {ds} must be a multiple of 4"));
        }
        if !self.image_height.is_multiple_of(ds) || !self.image_width.is_multiple_of(ds) {
            return bad(format!("image {}×{} not divisible by downsample {ds}", self.image_height, self.image_width));
        }
        let (h, w) = self.embed_hw();
        if h < 4 || w < 4 {
            return bad(format!("embedding grid {h}×{w} is smaller than 4×4"));
        }
        if self.image_channels != 1 && self.image_channels != 3 {
            return bad("image channels must be 1 or 3".into());
        }
        if self.latent_dim == 0 || self.components == 0 {
            return bad("latent_dim and components must be ≥ 1".into());
        }
        if self.decoder_heads == 0 || !self.decoder_width.is_multiple_of(self.decoder_heads) {
            return bad("decoder width must be divisible by the head count".into());
        }
        if self.conditioner_kernel.is_multiple_of(2) {
            return bad("conditioner kernel must be odd".into());
        }
        if self.candidate_slots == 0 {
            return bad("at least one candidate slot is required".into());
        }
        Ok(())
    }
}

/// A namespace of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_buffer(name: &str) -> bool {
        name.ends_with("_buf")
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex_digest(&h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Plain gradient-descent step.
    pub fn sgd_step(&mut self, grads: &BTreeMap<String, Tensor>, lr: f64) {
        for (name, g) in grads {
            if let Some(p) = self.tensors.get_mut(name) {
                for (w, gi) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * gi;
                }
            }
        }
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Mean-variance network + preference embedder, and the weight network.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingParams {
    pub mvp: ParamSet,
    pub weight: ParamSet,
}

/// The full parameter bundle a checkpoint carries.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub seg: ParamSet,
    pub sampling: SamplingParams,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn he(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        Tensor::from_fn(shape, |_| normal.sample(&mut self.rng))
    }

    fn standard(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| StandardNormal.sample(&mut self.rng))
    }

    fn conv(&mut self, set: &mut ParamSet, name: &str, c_out: usize, c_in: usize, k: usize) {
        set.insert(format!("{name}.w"), self.he(&[c_out, c_in, k, k], c_in * k * k));
        set.insert(format!("{name}.b"), Tensor::zeros(&[c_out]));
    }

    fn conv_t(&mut self, set: &mut ParamSet, name: &str, c_in: usize, c_out: usize) {
        set.insert(format!("{name}.w"), self.he(&[c_in, c_out, 2, 2], c_in));
        set.insert(format!("{name}.b"), Tensor::zeros(&[c_out]));
    }

    fn linear(&mut self, set: &mut ParamSet, name: &str, inp: usize, out: usize) {
        set.insert(format!("{name}.w"), self.he(&[inp, out], inp));
        set.insert(format!("{name}.b"), Tensor::zeros(&[out]));
    }

    fn norm(&mut self, set: &mut ParamSet, name: &str, width: usize) {
        set.insert(format!("{name}.g"), Tensor::full(&[width], 1.0));
        set.insert(format!("{name}.b"), Tensor::zeros(&[width]));
    }

    fn attention(&mut self, set: &mut ParamSet, name: &str, width: usize) {
        for p in ["q", "k", "v", "o"] {
            self.linear(set, &format!("{name}.{p}"), width, width);
        }
    }
}

impl Model {
    /// Seeded He-normal initialisation with zero biases.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(config.init_seed) };
        let c = &config;
        let de = c.embed_dim();
        let w = c.decoder_width;
        let ff = 2 * c.fourier_features;

        let mut seg = ParamSet::new();
        let mut c_in = c.image_channels;
        for (i, &c_out) in c.encoder_channels.iter().enumerate() {
            init.conv(&mut seg, &format!("seg/enc{i}"), c_out, c_in, 3);
            c_in = c_out;
        }
        init.conv(&mut seg, "seg/cond", de, de + c.latent_dim, c.conditioner_kernel);
        seg.insert("seg/prompt.fourier_buf", init.standard(&[2, c.fourier_features]));
        init.linear(&mut seg, "seg/prompt.proj", ff, PROMPT_DIM);
        seg.insert("seg/prompt.polarity", init.standard(&[2, PROMPT_DIM]));
        seg.insert("seg/prompt.slots", init.standard(&[c.candidate_slots, PROMPT_DIM]));
        seg.insert("seg/prompt.none", init.standard(&[1, PROMPT_DIM]));
        init.linear(&mut seg, "seg/dec.img_in", de, w);
        init.linear(&mut seg, "seg/dec.pe", ff, w);
        init.linear(&mut seg, "seg/dec.prompt_in", PROMPT_DIM, w);
        seg.insert("seg/dec.mask_token", init.standard(&[1, w]));
        for l in 0..c.decoder_layers {
            for a in ["sa", "t2i", "i2t"] {
                init.attention(&mut seg, &format!("seg/dec.l{l}.{a}"), w);
            }
            init.linear(&mut seg, &format!("seg/dec.l{l}.mlp1"), w, c.decoder_mlp);
            init.linear(&mut seg, &format!("seg/dec.l{l}.mlp2"), c.decoder_mlp, w);
            for n in 1..=4 {
                init.norm(&mut seg, &format!("seg/dec.l{l}.ln{n}"), w);
            }
        }
        init.attention(&mut seg, "seg/dec.final", w);
        init.norm(&mut seg, "seg/dec.lnf", w);
        let [u0, u1] = c.upsample_channels;
        init.conv_t(&mut seg, "seg/dec.up0", w, u0);
        init.conv_t(&mut seg, "seg/dec.up1", u0, u1);
        init.linear(&mut seg, "seg/dec.hyper1", w, w);
        init.linear(&mut seg, "seg/dec.hyper2", w, u1);

        let a = c.aux_channels;
        let md = c.components * c.latent_dim;
        let mut mvp = ParamSet::new();
        init.conv(&mut mvp, "mvp/mv.conv1", a, de, 3);
        init.conv(&mut mvp, "mvp/mv.conv2", a, a, 3);
        init.linear(&mut mvp, "mvp/mv.mean", a, md);
        init.linear(&mut mvp, "mvp/mv.logvar", a, md);
        init.conv(&mut mvp, "mvp/pref.conv1", a, de + 1, 3);
        init.conv(&mut mvp, "mvp/pref.conv2", a, a, 3);
        init.linear(&mut mvp, "mvp/pref.out", a, c.latent_dim);

        let hd = c.weight_hidden;
        let mut weight = ParamSet::new();
        init.linear(&mut weight, "weight/l1", de, hd);
        init.linear(&mut weight, "weight/l2", hd, hd);
        init.linear(&mut weight, "weight/l3", hd, c.components);

        Ok(Self { config, seg, sampling: SamplingParams { mvp, weight } })
    }

    pub fn parameter_count(&self) -> usize {
        self.seg.scalar_count() + self.sampling.mvp.scalar_count() + self.sampling.weight.scalar_count()
    }
}

/// Binds named parameters into a graph on first use.
pub(crate) struct Scope<'p> {
    set: &'p ParamSet,
    trainable: bool,
    vars: BTreeMap<&'p str, Var>,
}

impl<'p> Scope<'p> {
    pub fn new(set: &'p ParamSet, trainable: bool) -> Self {
        Self { set, trainable, vars: BTreeMap::new() }
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Var {
        let (key, t) = self
            .set
            .tensors
            .get_key_value(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from parameter set"));
        if let Some(&v) = self.vars.get(key.as_str()) {
            return v;
        }
        let v = if self.trainable && !ParamSet::is_buffer(key) { g.param(t.clone()) } else { g.constant(t.clone()) };
        self.vars.insert(key.as_str(), v);
        v
    }

    /// Gradients for every trainable tensor in the set; untouched tensors get zeros.
    pub fn collect(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        self.set
            .tensors
            .iter()
            .filter(|(name, _)| !ParamSet::is_buffer(name))
            .map(|(name, t)| {
                let g = self
                    .vars
                    .get(name.as_str())
                    .and_then(|&v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(t.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}
