//! Preference calibration: candidate clustering, the preference embedder, the
//! mean-variance and weight networks, and their online update rules.

use std::collections::BTreeMap;

use crate::domain::{mean_votes, BinaryMask, InteractionEvent, SoftMask};
use crate::error::{ensure_finite, Error, Result};
use crate::graph::{Graph, Var};
use crate::kmeans::{kmeans, mask_features};
use crate::model::{ModelConfig, ParamSet, SamplingParams, Scope};
use crate::segnet::{fuse_majority, g_condition, g_decode, g_prompt, ImageEmbedding};
use crate::space::MixtureSpace;
use crate::tensor::Tensor;

/// K cluster representatives of an ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    regions: Vec<SoftMask>,
    member_indices: Vec<Vec<usize>>,
}

impl CandidateSet {
    pub fn regions(&self) -> &[SoftMask] {
        &self.regions
    }

    pub fn member_indices(&self) -> &[Vec<usize>] {
        &self.member_indices
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
}

/// Groups the ensemble into `k` candidates, nearest to the fused mask first;
/// each candidate's votes are its members' mean.
pub fn cluster_candidates(masks: &[BinaryMask], k: usize, seed: u64) -> Result<CandidateSet> {
    if masks.len() < k || k == 0 {
        return Err(Error::InvalidArgument(format!("cannot form K={k} candidates from N={} masks", masks.len())));
    }
    let shape = masks[0].shape();
    if let Some(m) = masks.iter().find(|m| m.shape() != shape) {
        return Err(Error::Shape(format!("ensemble masks {:?} and {:?}", shape, m.shape())));
    }
    let features: Vec<Vec<f64>> = masks.iter().map(mask_features).collect();
    let assign = kmeans(&features, k, seed)?;
    let mut member_indices = vec![Vec::new(); k];
    for (i, &c) in assign.iter().enumerate() {
        member_indices[c].push(i);
    }
    let regions = member_indices
        .iter()
        .map(|members| {
            let refs: Vec<&BinaryMask> = members.iter().map(|&i| &masks[i]).collect();
            SoftMask::from_votes(shape.0, shape.1, mean_votes(&refs)?)
        })
        .collect::<Result<Vec<_>>>()?;
    // closest to the fused mask first, so a selection that expresses no
    // preference (ties go to index 0) points at the consensus
    let fused = fuse_majority(masks)?;
    let distance = |r: &SoftMask| -> f64 {
        r.votes().iter().zip(fused.binarized().data()).map(|(v, &f)| (v - f64::from(f)).abs()).sum()
    };
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| distance(&regions[a]).total_cmp(&distance(&regions[b])).then(member_indices[a][0].cmp(&member_indices[b][0])));
    let regions = order.iter().map(|&i| regions[i].clone()).collect();
    let member_indices = order.iter().map(|&i| member_indices[i].clone()).collect();
    Ok(CandidateSet { regions, member_indices })
}

/// A region mapped into the latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceLatent {
    pub vector: Vec<f64>,
}

/// Which gradient paths the mean-variance update may use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MvpPaths {
    /// Latents are `μ + σ ⊙ ε` on the tape; otherwise they enter as constants.
    pub reparam_grad: bool,
    /// Ensemble members are weighted by their component's posterior given the preference latent.
    pub preference_path: bool,
}

impl Default for MvpPaths {
    fn default() -> Self {
        Self { reparam_grad: true, preference_path: true }
    }
}

/// Everything the mean-variance update needs besides parameters.
#[derive(Clone, Debug)]
pub struct MvpContext<'a> {
    pub e_g: &'a ImageEmbedding,
    /// Prompt history including the event being learned from.
    pub history: &'a [InteractionEvent],
    /// Held `(component, ε)` pairs, one per ensemble member.
    pub draws: &'a [(usize, Vec<f64>)],
    /// The clinician's preferred region.
    pub preference: &'a SoftMask,
    pub paths: MvpPaths,
}

// ----- graph builders ------------------------------------------------------

fn linear(g: &mut Graph, sc: &mut Scope, name: &str, x: Var) -> Var {
    let w = sc.get(g, &format!("{name}.w"));
    let b = sc.get(g, &format!("{name}.b"));
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

fn conv_relu(g: &mut Graph, sc: &mut Scope, name: &str, x: Var) -> Var {
    let w = sc.get(g, &format!("{name}.w"));
    let b = sc.get(g, &format!("{name}.b"));
    let y = g.conv2d(x, w, b, 1, 1);
    g.relu(y)
}

/// Log-variances stay within ±this bound.
pub const LOGVAR_BOUND: f64 = 6.0;

/// `(means, log-variances)`, each `[1, M·D]`.
fn g_mean_variance(g: &mut Graph, sc: &mut Scope, e_g: Var) -> (Var, Var) {
    let h = conv_relu(g, sc, "mvp/mv.conv1", e_g);
    let h = conv_relu(g, sc, "mvp/mv.conv2", h);
    let p = g.global_avg_pool(h);
    let mean = linear(g, sc, "mvp/mv.mean", p);
    // soft bound B·tanh(r/B), written as B·(2σ(2r/B) − 1)
    let raw = linear(g, sc, "mvp/mv.logvar", p);
    let t = g.scale(raw, 2.0 / LOGVAR_BOUND);
    let t = g.sigmoid(t);
    let t = g.scale(t, 2.0 * LOGVAR_BOUND);
    (mean, g.add_scalar(t, -LOGVAR_BOUND))
}

/// `votes: [1,H,W]` → `[1,D]`.
fn g_preference(g: &mut Graph, sc: &mut Scope, downsample: usize, votes: Var, e_g: Var) -> Var {
    let pooled = g.avg_pool(votes, downsample);
    let x = g.concat0(&[e_g, pooled]);
    let h = conv_relu(g, sc, "mvp/pref.conv1", x);
    let h = conv_relu(g, sc, "mvp/pref.conv2", h);
    let p = g.global_avg_pool(h);
    linear(g, sc, "mvp/pref.out", p)
}

/// Raw mixture scores `[1,M]`.
fn g_weight_logits(g: &mut Graph, sc: &mut Scope, e_g: Var) -> Var {
    let p = g.global_avg_pool(e_g);
    let h = linear(g, sc, "weight/l1", p);
    let h = g.relu(h);
    let h = linear(g, sc, "weight/l2", h);
    let h = g.relu(h);
    linear(g, sc, "weight/l3", h)
}

/// Component posterior `[1,M]` of `x: [1,D]` under the mixture given by
/// `means`/`logvar` (`[1,M·D]`) and raw weights `[1,M]`.
fn g_posterior(g: &mut Graph, m: usize, d: usize, x: Var, means: Var, logvar: Var, raw: Var) -> Var {
    let logits = g_posterior_logits(g, m, d, x, means, logvar, raw);
    g.softmax_rows(logits)
}

/// Unnormalised log posterior `[1,M]`.
fn g_posterior_logits(g: &mut Graph, m: usize, d: usize, x: Var, means: Var, logvar: Var, raw: Var) -> Var {
    let mu = g.reshape(means, &[m, d]);
    let lv = g.reshape(logvar, &[m, d]);
    let xf = g.reshape(x, &[d]);
    let neg_x = g.scale(xf, -1.0);
    let diff = g.add_row(mu, neg_x);
    let sq = g.mul(diff, diff);
    let neg_lv = g.scale(lv, -1.0);
    let prec = g.exp(neg_lv);
    let quad = g.mul(sq, prec);
    let t = g.add(quad, lv);
    let s = g.row_sums(t);
    let s = g.scale(s, -0.5);
    let s = g.reshape(s, &[1, m]);
    g.add(raw, s)
}

fn check_region(e_g: &ImageEmbedding, region: &SoftMask) -> Result<()> {
    let (_, h, w) = e_g.shape();
    let ds = e_g.downsample();
    if region.shape() != (h * ds, w * ds) {
        return Err(Error::Shape(format!(
            "region {:?} does not match the {}×{} image behind the embedding",
            region.shape(),
            h * ds,
            w * ds
        )));
    }
    Ok(())
}

fn votes_tensor(region: &SoftMask) -> Tensor {
    let (h, w) = region.shape();
    Tensor::new(vec![1, h, w], region.votes().to_vec())
}

// ----- forwards -------------------------------------------------------------

pub fn embed_preference(mvp: &ParamSet, region: &SoftMask, e_g: &ImageEmbedding) -> Result<PreferenceLatent> {
    check_region(e_g, region)?;
    let mut g = Graph::new();
    let mut sc = Scope::new(mvp, false);
    let v = g.constant(votes_tensor(region));
    let e = g.constant(e_g.features().clone());
    let x = g_preference(&mut g, &mut sc, e_g.downsample(), v, e);
    Ok(PreferenceLatent { vector: g.value(x).data().to_vec() })
}

/// Means `M×D` and strictly positive variances `M×D`, row-major.
pub fn mean_variance_forward(cfg: &ModelConfig, mvp: &ParamSet, e_g: &ImageEmbedding) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let mut sc = Scope::new(mvp, false);
    let e = g.constant(e_g.features().clone());
    let (mu, lv) = g_mean_variance(&mut g, &mut sc, e);
    let means = g.value(mu).data().to_vec();
    let variances: Vec<f64> = g.value(lv).data().iter().map(|l| l.exp()).collect();
    debug_assert_eq!(means.len(), cfg.components * cfg.latent_dim);
    if !means.iter().chain(&variances).all(|v| v.is_finite()) || variances.iter().any(|&v| v <= 0.0) {
        return Err(Error::NonFinite("mean-variance network output".into()));
    }
    Ok((means, variances))
}

fn weight_logits(weight: &ParamSet, e_g: &ImageEmbedding) -> Vec<f64> {
    let mut g = Graph::new();
    let mut sc = Scope::new(weight, false);
    let e = g.constant(e_g.features().clone());
    let r = g_weight_logits(&mut g, &mut sc, e);
    g.value(r).data().to_vec()
}

pub fn weight_forward(weight: &ParamSet, e_g: &ImageEmbedding) -> Result<Vec<f64>> {
    crate::space::normalize_weights(&weight_logits(weight, e_g))
}

/// The sampling space for one image; raw weights are the weight network's scores.
pub fn build_space(cfg: &ModelConfig, params: &SamplingParams, e_g: &ImageEmbedding) -> Result<MixtureSpace> {
    let mut g = Graph::new();
    let mut sc = Scope::new(&params.mvp, false);
    let e = g.constant(e_g.features().clone());
    let (mu, lv) = g_mean_variance(&mut g, &mut sc, e);
    MixtureSpace::new(
        cfg.components,
        cfg.latent_dim,
        g.value(mu).data().to_vec(),
        g.value(lv).data().to_vec(),
        weight_logits(&params.weight, e_g),
    )
}

// ----- updates ----------------------------------------------------------------

/// Result of the mean-variance loss: value, gradients and the vote fraction of P_mod.
#[derive(Clone, Debug)]
pub struct MvpOutcome {
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor>,
    pub p_mod: SoftMask,
}

/// Cross-entropy between the posterior-weighted ensemble probability and `target`,
/// with the segmentation net frozen; gradients only for `mvp/` parameters.
pub fn mvp_loss_grads(
    cfg: &ModelConfig,
    seg: &ParamSet,
    params: &SamplingParams,
    ctx: &MvpContext<'_>,
    target: &BinaryMask,
) -> Result<MvpOutcome> {
    mvp_loss_inner(cfg, seg, params, ctx, target, None)
}

/// [`mvp_loss_grads`] counting only pixels with nonzero `weights`
/// (the loss is still divided by the full pixel count).
pub fn mvp_loss_grads_weighted(
    cfg: &ModelConfig,
    seg: &ParamSet,
    params: &SamplingParams,
    ctx: &MvpContext<'_>,
    target: &BinaryMask,
    weights: &[f64],
) -> Result<MvpOutcome> {
    if weights.len() != target.data().len() || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidArgument("pixel weights must be finite, ≥ 0 and one per pixel".into()));
    }
    mvp_loss_inner(cfg, seg, params, ctx, target, Some(weights))
}

fn mvp_loss_inner(
    cfg: &ModelConfig,
    seg: &ParamSet,
    params: &SamplingParams,
    ctx: &MvpContext<'_>,
    target: &BinaryMask,
    weights: Option<&[f64]>,
) -> Result<MvpOutcome> {
    let (m, d) = (cfg.components, cfg.latent_dim);
    let (hh, ww) = (cfg.image_height, cfg.image_width);
    check_region(ctx.e_g, ctx.preference)?;
    if target.shape() != (hh, ww) {
        return Err(Error::Shape(format!("target {:?} vs image {:?}", target.shape(), (hh, ww))));
    }
    if ctx.draws.is_empty() {
        return Err(Error::InvalidArgument("mean-variance update needs at least one draw".into()));
    }
    for (c, eps) in ctx.draws {
        if *c >= m || eps.len() != d {
            return Err(Error::Shape(format!("draw (component {c}, |ε|={}) invalid for M={m}, D={d}", eps.len())));
        }
    }

    let mut g = Graph::new();
    let mut sc_mvp = Scope::new(&params.mvp, true);
    let mut sc_w = Scope::new(&params.weight, false);
    let mut sc_seg = Scope::new(seg, false);
    let e = g.constant(ctx.e_g.features().clone());
    let (mu, lv) = g_mean_variance(&mut g, &mut sc_mvp, e);
    let (mu_c, lv_c) = if ctx.paths.reparam_grad {
        (mu, lv)
    } else {
        let a = g.value(mu).clone();
        let b = g.value(lv).clone();
        (g.constant(a), g.constant(b))
    };
    let mu_r = g.reshape(mu_c, &[m, d]);
    let lv_r = g.reshape(lv_c, &[m, d]);
    let half_lv = g.scale(lv_r, 0.5);
    let std = g.exp(half_lv);

    let tokens = g_prompt(&mut g, &mut sc_seg, seg, ctx.history, hh, ww)?;
    let mut probs = Vec::with_capacity(ctx.draws.len());
    for (c, eps) in ctx.draws {
        let mean_c = g.gather_rows(mu_r, &[*c]);
        let std_c = g.gather_rows(std, &[*c]);
        let noise = g.constant(Tensor::new(vec![1, d], eps.clone()));
        let spread = g.mul(std_c, noise);
        let s = g.add(mean_c, spread);
        let cond = g_condition(&mut g, &mut sc_seg, e, s);
        let logits = g_decode(&mut g, &mut sc_seg, cfg, seg, cond, tokens);
        probs.push(g.sigmoid(logits));
    }
    let n = ctx.draws.len();
    let stacked = if n == 1 { probs[0] } else { g.concat0(&probs) };

    let member_weights = if ctx.paths.preference_path {
        let votes = g.constant(votes_tensor(ctx.preference));
        let x = g_preference(&mut g, &mut sc_mvp, ctx.e_g.downsample(), votes, e);
        let raw = g_weight_logits(&mut g, &mut sc_w, e);
        // posterior of each member's component, renormalised over the members
        let logits = g_posterior_logits(&mut g, m, d, x, mu_c, lv_c, raw);
        let logits = g.reshape(logits, &[m, 1]);
        let comps: Vec<usize> = ctx.draws.iter().map(|(c, _)| *c).collect();
        let w = g.gather_rows(logits, &comps);
        let w = g.reshape(w, &[1, n]);
        g.softmax_rows(w)
    } else {
        g.constant(Tensor::full(&[1, n], 1.0 / n as f64))
    };
    let q = g.matmul(member_weights, stacked);
    let loss = match weights {
        Some(w) => g.bce_weighted(q, &target.to_f64(), w),
        None => g.bce_mean(q, &target.to_f64()),
    };
    let value = ensure_finite("mean-variance loss", g.value(loss).item())?;
    let p_mod = SoftMask::from_votes(hh, ww, g.value(q).data().iter().map(|v| v.clamp(0.0, 1.0)).collect())?;
    let grads = g.backward_scalar(loss);
    Ok(MvpOutcome { loss: value, grads: sc_mvp.collect(&grads), p_mod })
}

/// One descent step on θ_MVP; θ_Seg and θ_W are untouched.
pub fn update_mvp(
    cfg: &ModelConfig,
    seg: &ParamSet,
    params: &mut SamplingParams,
    ctx: &MvpContext<'_>,
    target: &BinaryMask,
    lr: f64,
) -> Result<MvpOutcome> {
    check_lr(lr)?;
    let out = mvp_loss_grads(cfg, seg, params, ctx, target)?;
    params.mvp.sgd_step(&out.grads, lr);
    Ok(out)
}

/// Mean squared error between the posterior of `x_mod` (weights from the weight
/// network, differentiable) and the fixed posterior of `x_gt` under `space`.
pub fn weight_loss_grads(
    weight: &ParamSet,
    space: &MixtureSpace,
    e_g: &ImageEmbedding,
    x_mod: &PreferenceLatent,
    x_gt: &PreferenceLatent,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let (m, d) = (space.components(), space.dim());
    for x in [x_mod, x_gt] {
        if x.vector.len() != d || x.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("preference latent {:?} invalid for D={d}", x.vector)));
        }
    }
    let target = {
        // same arithmetic as the differentiable branch, so equal latents give exactly zero loss
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, d], x_gt.vector.clone()));
        let mu = g.constant(Tensor::new(vec![1, m * d], space.means().to_vec()));
        let lv = g.constant(Tensor::new(vec![1, m * d], space.log_variances().to_vec()));
        let raw = g.constant(Tensor::new(vec![1, m], space.raw_weights().to_vec()));
        let post = g_posterior(&mut g, m, d, x, mu, lv, raw);
        g.value(post).data().to_vec()
    };
    let mut g = Graph::new();
    let mut sc = Scope::new(weight, true);
    let e = g.constant(e_g.features().clone());
    let raw = g_weight_logits(&mut g, &mut sc, e);
    if g.value(raw).len() != m {
        return Err(Error::Shape(format!("weight network emits {} scores, space has M={m}", g.value(raw).len())));
    }
    let x = g.constant(Tensor::new(vec![1, d], x_mod.vector.clone()));
    let mu = g.constant(Tensor::new(vec![1, m * d], space.means().to_vec()));
    let lv = g.constant(Tensor::new(vec![1, m * d], space.log_variances().to_vec()));
    let post = g_posterior(&mut g, m, d, x, mu, lv, raw);
    let t = g.constant(Tensor::new(vec![1, m], target));
    let diff = g.sub(post, t);
    let sq = g.mul(diff, diff);
    let loss = g.mean_all(sq);
    let value = ensure_finite("weight loss", g.value(loss).item())?;
    let grads = g.backward_scalar(loss);
    Ok((value, sc.collect(&grads)))
}

/// One descent step on θ_W; returns the pre-step loss.
pub fn update_weights(
    weight: &mut ParamSet,
    space: &MixtureSpace,
    e_g: &ImageEmbedding,
    x_mod: &PreferenceLatent,
    x_gt: &PreferenceLatent,
    lr: f64,
) -> Result<f64> {
    check_lr(lr)?;
    let (loss, grads) = weight_loss_grads(weight, space, e_g, x_mod, x_gt)?;
    weight.sgd_step(&grads, lr);
    Ok(loss)
}

fn check_lr(lr: f64) -> Result<()> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("learning rate {lr} must be positive")))
    }
}

/// Mean squared difference of two posteriors; the reference for [`weight_loss_grads`].
pub fn posterior_mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}
