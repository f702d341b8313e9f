//! Sample-conditioned ensemble segmentation.
//!
//! Image encoder → latent conditioning (`ReLU(Conv(E_G ⊕ S_i))`) → two-way
//! attention mask decoder with a hypernetwork head → majority-vote fusion.
//! The encoder is a strided conv stack behind [`encode_image`]; swapping it
//! only has to preserve the `[d_e, h_e, w_e]` embedding contract.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::domain::{Action, BinaryMask, ImageSample, InteractionEvent, Polarity, SoftMask};
use crate::error::{ensure_finite, Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{ModelConfig, ParamSet, Scope, PROMPT_DIM};
use crate::parallel::par_map;
use crate::tensor::Tensor;

/// General image embedding `[d_e, h_e, w_e]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedding {
    features: Tensor,
    downsample: usize,
}

impl ImageEmbedding {
    pub fn new(features: Tensor, downsample: usize) -> Result<Self> {
        if features.shape().len() != 3 {
            return Err(Error::Shape(format!("embedding must be [d,h,w], got {:?}", features.shape())));
        }
        if features.dim(1) < 4 || features.dim(2) < 4 {
            return Err(Error::Shape(format!("embedding grid {:?} smaller than 4×4", &features.shape()[1..])));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("image embedding".into()));
        }
        Ok(Self { features, downsample })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn downsample(&self) -> usize {
        self.downsample
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.features.dim(0), self.features.dim(1), self.features.dim(2))
    }
}

/// One 256-wide token per interaction, or the single no-prompt token.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    tokens: Tensor,
}

impl PromptEmbedding {
    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.tokens.data()[i * PROMPT_DIM..(i + 1) * PROMPT_DIM]
    }
}

/// Per-sample decoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub logits: Vec<Vec<f64>>,
    pub masks: Vec<BinaryMask>,
}

// ----- graph builders ------------------------------------------------------

fn linear(g: &mut Graph, sc: &mut Scope, name: &str, x: Var) -> Var {
    let w = sc.get(g, &format!("{name}.w"));
    let b = sc.get(g, &format!("{name}.b"));
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

fn conv(g: &mut Graph, sc: &mut Scope, name: &str, x: Var, stride: usize) -> Var {
    let w = sc.get(g, &format!("{name}.w"));
    let b = sc.get(g, &format!("{name}.b"));
    let k = g.value(w).dim(2);
    g.conv2d(x, w, b, stride, k / 2)
}

fn norm(g: &mut Graph, sc: &mut Scope, name: &str, x: Var) -> Var {
    let gamma = sc.get(g, &format!("{name}.g"));
    let beta = sc.get(g, &format!("{name}.b"));
    let y = g.layer_norm_rows(x, 1e-5);
    let y = g.mul_row(y, gamma);
    g.add_row(y, beta)
}

fn attention(g: &mut Graph, sc: &mut Scope, name: &str, q_in: Var, k_in: Var, v_in: Var, heads: usize) -> Var {
    let q = linear(g, sc, &format!("{name}.q"), q_in);
    let k = linear(g, sc, &format!("{name}.k"), k_in);
    let v = linear(g, sc, &format!("{name}.v"), v_in);
    let width = g.value(q).dim(1);
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let outs: Vec<Var> = (0..heads)
        .map(|h| {
            let qh = g.slice_cols(q, h * dh, (h + 1) * dh);
            let kh = g.slice_cols(k, h * dh, (h + 1) * dh);
            let vh = g.slice_cols(v, h * dh, (h + 1) * dh);
            let s = g.matmul_t(qh, kh);
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s);
            g.matmul(a, vh)
        })
        .collect();
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    linear(g, sc, &format!("{name}.o"), cat)
}

pub(crate) fn g_encode(g: &mut Graph, sc: &mut Scope, cfg: &ModelConfig, image: Var) -> Var {
    let mut x = image;
    for (i, &stride) in cfg.encoder_strides.iter().enumerate() {
        let y = conv(g, sc, &format!("seg/enc{i}"), x, stride);
        x = g.relu(y);
    }
    x
}

/// `ReLU(Conv(E_G ⊕ broadcast(s)))`; `latent` is `[1, D]` or `[D]`.
pub(crate) fn g_condition(g: &mut Graph, sc: &mut Scope, e_g: Var, latent: Var) -> Var {
    let shape = g.value(e_g).shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let d = g.value(latent).len();
    let flat = g.reshape(latent, &[d]);
    let map = g.broadcast_map(flat, h, w);
    let x = g.concat0(&[e_g, map]);
    let y = conv(g, sc, "seg/cond", x, 1);
    g.relu(y)
}

/// Random Fourier features of normalised `(row, col)` positions: `[n, 2F]`.
pub(crate) fn fourier_features(basis: &Tensor, coords: &[(f64, f64)]) -> Tensor {
    let f = basis.dim(1);
    let b = basis.data();
    let mut out = Vec::with_capacity(coords.len() * 2 * f);
    for &(y, x) in coords {
        // map [0,1] → [-1,1]; basis rows are (x, y)
        let (xs, ys) = (2.0 * x - 1.0, 2.0 * y - 1.0);
        let proj: Vec<f64> = (0..f).map(|j| 2.0 * PI * (xs * b[j] + ys * b[f + j])).collect();
        out.extend(proj.iter().map(|p| p.sin()));
        out.extend(proj.iter().map(|p| p.cos()));
    }
    Tensor::new(vec![coords.len(), 2 * f], out)
}

fn click_position(row: usize, col: usize, height: usize, width: usize) -> (f64, f64) {
    ((row as f64 + 0.5) / height as f64, (col as f64 + 0.5) / width as f64)
}

pub(crate) fn g_prompt(
    g: &mut Graph,
    sc: &mut Scope,
    params: &ParamSet,
    history: &[InteractionEvent],
    height: usize,
    width: usize,
) -> Result<Var> {
    if history.is_empty() {
        return Ok(sc.get(g, "seg/prompt.none"));
    }
    let slots = params.get("seg/prompt.slots").map_or(0, |t| t.dim(0));
    let basis = params.get("seg/prompt.fourier_buf").expect("fourier basis").clone();
    let mut rows = Vec::with_capacity(history.len());
    for ev in history {
        match ev.validate(height, width, slots)? {
            Action::Click { row, col, polarity } => {
                let ff = g.constant(fourier_features(&basis, &[click_position(row, col, height, width)]));
                let tok = linear(g, sc, "seg/prompt.proj", ff);
                let pol = sc.get(g, "seg/prompt.polarity");
                let idx = match polarity {
                    Polarity::Foreground => 0,
                    Polarity::Background => 1,
                };
                let p = g.gather_rows(pol, &[idx]);
                rows.push(g.add(tok, p));
            }
            Action::Select(k) => {
                let s = sc.get(g, "seg/prompt.slots");
                rows.push(g.gather_rows(s, &[k]));
            }
        }
    }
    Ok(if rows.len() == 1 { rows[0] } else { g.concat0(&rows) })
}

/// Decoder on one conditioned embedding; returns logits `[1, H·W]`.
pub(crate) fn g_decode(g: &mut Graph, sc: &mut Scope, cfg: &ModelConfig, params: &ParamSet, cond: Var, tokens: Var) -> Var {
    let shape = g.value(cond).shape().to_vec();
    let (de, h, w) = (shape[0], shape[1], shape[2]);
    let hw = h * w;
    let heads = cfg.decoder_heads;

    let flat = g.reshape(cond, &[de, hw]);
    let img_tokens = g.transpose(flat);
    let mut img = linear(g, sc, "seg/dec.img_in", img_tokens);

    let basis = params.get("seg/prompt.fourier_buf").expect("fourier basis");
    let grid: Vec<(f64, f64)> = (0..h)
        .flat_map(|r| (0..w).map(move |c| ((r as f64 + 0.5) / h as f64, (c as f64 + 0.5) / w as f64)))
        .collect();
    let pe_in = g.constant(fourier_features(basis, &grid));
    let pe = linear(g, sc, "seg/dec.pe", pe_in);

    let prompt = linear(g, sc, "seg/dec.prompt_in", tokens);
    let mask_token = sc.get(g, "seg/dec.mask_token");
    let mut tok = g.concat0(&[mask_token, prompt]);

    for l in 0..cfg.decoder_layers {
        let p = format!("seg/dec.l{l}");
        let a = attention(g, sc, &format!("{p}.sa"), tok, tok, tok, heads);
        let t = g.add(tok, a);
        tok = norm(g, sc, &format!("{p}.ln1"), t);

        let keys = g.add(img, pe);
        let a = attention(g, sc, &format!("{p}.t2i"), tok, keys, img, heads);
        let t = g.add(tok, a);
        tok = norm(g, sc, &format!("{p}.ln2"), t);

        let m = linear(g, sc, &format!("{p}.mlp1"), tok);
        let m = g.relu(m);
        let m = linear(g, sc, &format!("{p}.mlp2"), m);
        let t = g.add(tok, m);
        tok = norm(g, sc, &format!("{p}.ln3"), t);

        let queries = g.add(img, pe);
        let a = attention(g, sc, &format!("{p}.i2t"), queries, tok, tok, heads);
        let t = g.add(img, a);
        img = norm(g, sc, &format!("{p}.ln4"), t);
    }
    let keys = g.add(img, pe);
    let a = attention(g, sc, "seg/dec.final", tok, keys, img, heads);
    let t = g.add(tok, a);
    tok = norm(g, sc, "seg/dec.lnf", t);

    let width = cfg.decoder_width;
    let feat = g.transpose(img);
    let feat = g.reshape(feat, &[width, h, w]);
    let w0 = sc.get(g, "seg/dec.up0.w");
    let b0 = sc.get(g, "seg/dec.up0.b");
    let up = g.conv_transpose2x2(feat, w0, b0);
    let up = g.relu(up);
    let w1 = sc.get(g, "seg/dec.up1.w");
    let b1 = sc.get(g, "seg/dec.up1.b");
    let up = g.conv_transpose2x2(up, w1, b1);
    let up = g.relu(up);
    let c2 = cfg.upsample_channels[1];
    let (h4, w4) = (4 * h, 4 * w);
    let up = g.reshape(up, &[c2, h4 * w4]);

    let mt = g.slice_rows(tok, 0, 1);
    let hyper = linear(g, sc, "seg/dec.hyper1", mt);
    let hyper = g.relu(hyper);
    let hyper = linear(g, sc, "seg/dec.hyper2", hyper);
    let low = g.matmul(hyper, up);
    let low = g.reshape(low, &[1, h4, w4]);
    let full = g.upsample_bilinear(low, cfg.final_upsample());
    let n = g.value(full).len();
    g.reshape(full, &[1, n])
}

// ----- public operations ----------------------------------------------------

fn check_image(cfg: &ModelConfig, image: &ImageSample) -> Result<()> {
    if (image.height(), image.width(), image.channels()) != (cfg.image_height, cfg.image_width, cfg.image_channels) {
        return Err(Error::Shape(format!(
            "image {} is {}×{}×{}, model expects {}×{}×{}",
            image.case_id(),
            image.height(),
            image.width(),
            image.channels(),
            cfg.image_height,
            cfg.image_width,
            cfg.image_channels
        )));
    }
    Ok(())
}

pub fn encode_image(cfg: &ModelConfig, seg: &ParamSet, image: &ImageSample) -> Result<ImageEmbedding> {
    check_image(cfg, image)?;
    let mut g = Graph::new();
    let mut sc = Scope::new(seg, false);
    let x = g.constant(image.to_tensor());
    let e = g_encode(&mut g, &mut sc, cfg, x);
    ImageEmbedding::new(g.value(e).clone(), cfg.downsample())
}

fn check_latent(cfg: &ModelConfig, latent: &[f64]) -> Result<()> {
    if latent.len() != cfg.latent_dim {
        return Err(Error::Shape(format!("latent has {} entries, model expects D={}", latent.len(), cfg.latent_dim)));
    }
    Ok(())
}

pub fn condition_embedding(cfg: &ModelConfig, seg: &ParamSet, e_g: &ImageEmbedding, latent: &[f64]) -> Result<ImageEmbedding> {
    check_latent(cfg, latent)?;
    let mut g = Graph::new();
    let mut sc = Scope::new(seg, false);
    let e = g.constant(e_g.features.clone());
    let s = g.constant(Tensor::new(vec![latent.len()], latent.to_vec()));
    let out = g_condition(&mut g, &mut sc, e, s);
    ImageEmbedding::new(g.value(out).clone(), e_g.downsample)
}

pub fn encode_prompt(cfg: &ModelConfig, seg: &ParamSet, history: &[InteractionEvent]) -> Result<PromptEmbedding> {
    let mut g = Graph::new();
    let mut sc = Scope::new(seg, false);
    let t = g_prompt(&mut g, &mut sc, seg, history, cfg.image_height, cfg.image_width)?;
    Ok(PromptEmbedding { tokens: g.value(t).clone() })
}

fn logits_to_mask(cfg: &ModelConfig, logits: &[f64]) -> BinaryMask {
    BinaryMask::new(cfg.image_height, cfg.image_width, logits.iter().map(|&l| u8::from(l > 0.0)).collect())
        .expect("decoder output has image shape")
}

/// Decodes each conditioned embedding independently against the shared prompt.
pub fn decode_masks(cfg: &ModelConfig, seg: &ParamSet, conditioned: &[ImageEmbedding], prompt: &PromptEmbedding) -> Result<Decoded> {
    if conditioned.is_empty() {
        return Err(Error::InvalidArgument("decode_masks needs at least one embedding".into()));
    }
    let logits: Vec<Vec<f64>> = par_map(conditioned, |e| {
        let mut g = Graph::new();
        let mut sc = Scope::new(seg, false);
        let c = g.constant(e.features.clone());
        let t = g.constant(prompt.tokens.clone());
        let l = g_decode(&mut g, &mut sc, cfg, seg, c, t);
        g.value(l).data().to_vec()
    });
    let masks = logits.iter().map(|l| logits_to_mask(cfg, l)).collect();
    Ok(Decoded { logits, masks })
}

/// Conditions and decodes one mask per latent; each sample runs on its own tape.
pub fn predict_ensemble(
    cfg: &ModelConfig,
    seg: &ParamSet,
    e_g: &ImageEmbedding,
    latents: &[Vec<f64>],
    history: &[InteractionEvent],
) -> Result<Decoded> {
    if latents.is_empty() {
        return Err(Error::InvalidArgument("ensemble needs at least one latent".into()));
    }
    for l in latents {
        check_latent(cfg, l)?;
    }
    let prompt = encode_prompt(cfg, seg, history)?;
    let logits: Vec<Vec<f64>> = par_map(latents, |s| {
        let mut g = Graph::new();
        let mut sc = Scope::new(seg, false);
        let e = g.constant(e_g.features.clone());
        let lv = g.constant(Tensor::new(vec![s.len()], s.clone()));
        let c = g_condition(&mut g, &mut sc, e, lv);
        let t = g.constant(prompt.tokens.clone());
        let l = g_decode(&mut g, &mut sc, cfg, seg, c, t);
        g.value(l).data().to_vec()
    });
    let masks = logits.iter().map(|l| logits_to_mask(cfg, l)).collect();
    Ok(Decoded { logits, masks })
}

/// Majority vote over the ensemble masks.
pub fn fuse_majority(masks: &[BinaryMask]) -> Result<SoftMask> {
    let refs: Vec<&BinaryMask> = masks.iter().collect();
    SoftMask::majority(&refs)
}

/// Cross-entropy between the ensemble-mean sigmoid probability and `gt`,
/// with gradients for every trainable segmentation parameter.
pub fn segnet_loss_grads(
    cfg: &ModelConfig,
    seg: &ParamSet,
    image: &ImageSample,
    latents: &[Vec<f64>],
    history: &[InteractionEvent],
    gt: &BinaryMask,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    segnet_training_loss_grads(cfg, seg, image, latents, history, gt, 0.0)
}

/// [`segnet_loss_grads`] plus `best_of_weight` times the cross-entropy of the
/// single member closest to `gt`. The extra term rewards members that differ
/// along the annotators' disagreement, which gives the latent something to encode.
pub fn segnet_training_loss_grads(
    cfg: &ModelConfig,
    seg: &ParamSet,
    image: &ImageSample,
    latents: &[Vec<f64>],
    history: &[InteractionEvent],
    gt: &BinaryMask,
    best_of_weight: f64,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    if !(best_of_weight >= 0.0 && best_of_weight.is_finite()) {
        return Err(Error::InvalidArgument(format!("best-of weight {best_of_weight} must be finite and ≥ 0")));
    }
    check_image(cfg, image)?;
    if gt.shape() != (image.height(), image.width()) {
        return Err(Error::Shape(format!("ground truth {:?} vs image {:?}", gt.shape(), (image.height(), image.width()))));
    }
    if latents.is_empty() {
        return Err(Error::InvalidArgument("update needs at least one sample".into()));
    }
    for l in latents {
        check_latent(cfg, l)?;
    }
    let mut g = Graph::new();
    let mut sc = Scope::new(seg, true);
    let x = g.constant(image.to_tensor());
    let e_g = g_encode(&mut g, &mut sc, cfg, x);
    let tokens = g_prompt(&mut g, &mut sc, seg, history, image.height(), image.width())?;
    let probs: Vec<Var> = latents
        .iter()
        .map(|s| {
            let lv = g.constant(Tensor::new(vec![s.len()], s.clone()));
            let c = g_condition(&mut g, &mut sc, e_g, lv);
            let l = g_decode(&mut g, &mut sc, cfg, seg, c, tokens);
            g.sigmoid(l)
        })
        .collect();
    let stacked = g.concat0(&probs);
    let n = latents.len();
    let avg = g.constant(Tensor::full(&[1, n], 1.0 / n as f64));
    let q = g.matmul(avg, stacked);
    let target = gt.to_f64();
    let mut loss = g.bce_mean(q, &target);
    if best_of_weight > 0.0 {
        let per_member: Vec<Var> = probs.iter().map(|&p| g.bce_mean(p, &target)).collect();
        let best = *per_member
            .iter()
            .min_by(|a, b| g.value(**a).item().total_cmp(&g.value(**b).item()))
            .expect("nonempty");
        let extra = g.scale(best, best_of_weight);
        loss = g.add(loss, extra);
    }
    let value = ensure_finite("segmentation loss", g.value(loss).item())?;
    let grads = g.backward_scalar(loss);
    Ok((value, sc.collect(&grads)))
}

/// One gradient-descent step on the segmentation parameters; returns the pre-step loss.
pub fn update_segnet(
    cfg: &ModelConfig,
    seg: &mut ParamSet,
    image: &ImageSample,
    latents: &[Vec<f64>],
    history: &[InteractionEvent],
    gt: &BinaryMask,
    lr: f64,
) -> Result<f64> {
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be positive")));
    }
    let (loss, grads) = segnet_loss_grads(cfg, seg, image, latents, history, gt)?;
    seg.sgd_step(&grads, lr);
    Ok(loss)
}
