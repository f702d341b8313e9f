//! Two-phase training. Phase 1 fits θ_Seg on simulated interaction rollouts;
//! phase 2 freezes θ_Seg and fits θ_MVP and θ_W on interaction episodes.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clinician::{Decision, SessionView, SimulatedClinician, Strategy};
use crate::data::make_ground_truth;
use crate::domain::{AnnotatedCase, BinaryMask, InteractionEvent, SoftMask};
use crate::engine::{candidate_for_click, derive_seed};
use crate::error::{Error, Result};
use crate::model::{Model, ParamSet};
use crate::optim::{Adam, StepLr};
use crate::parallel::par_map;
use crate::samplingnet::{
    build_space, cluster_candidates, embed_preference, mvp_loss_grads, weight_loss_grads, MvpContext, MvpPaths,
};
use crate::segnet::{encode_image, fuse_majority, predict_ensemble, segnet_training_loss_grads};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    /// Images per optimiser step.
    pub batch_size: usize,
    pub schedule: StepLr,
    /// Clinician interactions per image per epoch.
    pub interactions: usize,
    /// Clinician strategies for training episodes, used in rotation.
    pub strategies: Vec<Strategy>,
    pub n_samples: usize,
    pub k_candidates: usize,
    /// Weight of the closest-member term in the phase-1 loss.
    pub best_of_weight: f64,
    pub seed: u64,
    /// Train on at most this many cases (all when absent).
    pub max_cases: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase1_epochs: 10,
            phase2_epochs: 2,
            batch_size: 1,
            schedule: StepLr::default(),
            interactions: 3,
            strategies: vec![Strategy::LastWrong],
            n_samples: 8,
            k_candidates: 3,
            best_of_weight: 4.0,
            seed: 0,
            max_cases: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::InvalidArgument("at least one training strategy is required".into()));
        }
        if self.batch_size == 0 || self.n_samples == 0 || self.k_candidates == 0 || self.n_samples < self.k_candidates {
            return Err(Error::InvalidArgument("batch_size ≥ 1 and n_samples ≥ k_candidates ≥ 1 are required".into()));
        }
        let s = &self.schedule;
        if !(s.base_lr > 0.0) || s.step_size == 0 || !(s.gamma > 0.0 && s.gamma <= 1.0) {
            return Err(Error::InvalidArgument("learning rate must be positive and gamma in (0,1]".into()));
        }
        if !(self.best_of_weight >= 0.0 && self.best_of_weight.is_finite()) {
            return Err(Error::InvalidArgument("best_of_weight must be finite and ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub phase: u8,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<LossRecord>,
    pub phase1_epoch_loss: Vec<f64>,
    pub phase2_epoch_loss: Vec<f64>,
    pub seg_checksum_phase2_start: String,
    pub seg_checksum_phase2_end: String,
}

/// Receives loss records as they are produced.
pub trait LossSink {
    fn record(&mut self, rec: &LossRecord) -> Result<()>;
}

impl LossSink for () {
    fn record(&mut self, _: &LossRecord) -> Result<()> {
        Ok(())
    }
}

/// JSON lines `{step, phase, loss, lr}`.
pub struct JsonLinesSink<W: Write>(pub W);

impl<W: Write> LossSink for JsonLinesSink<W> {
    fn record(&mut self, rec: &LossRecord) -> Result<()> {
        serde_json::to_writer(&mut self.0, rec)?;
        self.0.write_all(b"\n")?;
        Ok(())
    }
}

/// Training stopped early; `last_good` holds the parameters before the failing step.
#[derive(Debug)]
pub struct Diverged {
    pub error: Error,
    pub last_good: Model,
    pub report: TrainReport,
}

fn add_scaled(acc: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>, scale: f64) {
    for (name, mut g) in grads {
        g.scale_assign(scale);
        match acc.get_mut(&name) {
            Some(a) => a.add_assign(&g),
            None => {
                acc.insert(name, g);
            }
        }
    }
}

struct Episode {
    loss: f64,
    grads: BTreeMap<String, Tensor>,
    weight_grads: BTreeMap<String, Tensor>,
}

fn episode_seed(cfg: &TrainConfig, phase: u64, epoch: usize, case: usize) -> u64 {
    derive_seed(cfg.seed, phase * 1_000_003 + epoch as u64, case as u64)
}

fn clinician_for(cfg: &TrainConfig, gt: BinaryMask, seed: u64) -> SimulatedClinician {
    let strategy = cfg.strategies[(seed % cfg.strategies.len() as u64) as usize];
    SimulatedClinician::new(strategy, gt, "train", seed)
}

fn episode_target(case: &AnnotatedCase, seed: u64) -> Result<BinaryMask> {
    let r = ChaCha8Rng::seed_from_u64(seed).gen_range(1..=case.annotator_count());
    make_ground_truth(case, r, derive_seed(seed, 7, 0))
}

/// Rollout with fixed parameters: a loss term at each history length, clicks
/// chosen by the clinician against the current prediction.
fn phase1_episode(model: &Model, case: &AnnotatedCase, cfg: &TrainConfig, seed: u64) -> Result<Episode> {
    let gt = episode_target(case, seed)?;
    let e_g = encode_image(&model.config, &model.seg, case.image())?;
    let space = build_space(&model.config, &model.sampling, &e_g)?;
    let clinician = clinician_for(cfg, gt.clone(), derive_seed(seed, 3, 0));
    let mut history: Vec<InteractionEvent> = Vec::new();
    let mut grads = BTreeMap::new();
    let mut total = 0.0;
    let steps = cfg.interactions + 1;
    for t in 0..steps {
        let draws = space.draw_samples(cfg.n_samples, derive_seed(seed, 11, t as u64))?;
        let latents: Vec<Vec<f64>> = draws.into_iter().map(|s| s.vector).collect();
        let (loss, g) = segnet_training_loss_grads(&model.config, &model.seg, case.image(), &latents, &history, &gt, cfg.best_of_weight)?;
        total += loss / steps as f64;
        add_scaled(&mut grads, g, 1.0 / steps as f64);
        if t + 1 == steps {
            break;
        }
        let pred = predict_ensemble(&model.config, &model.seg, &e_g, &latents, &history)?;
        let soft = fuse_majority(&pred.masks)?;
        let candidates = cluster_candidates(&pred.masks, cfg.k_candidates, derive_seed(seed, 13, t as u64))?;
        let view = SessionView { last_soft: &soft, candidates: &candidates, history: &history, iteration: t };
        match clinician.next_event(&view)? {
            Decision::Event(ev) => history.push(ev),
            Decision::Done => break,
        }
    }
    Ok(Episode { loss: total, grads, weight_grads: BTreeMap::new() })
}

/// Interaction episode with frozen θ_Seg: each selection yields a mean-variance
/// loss against the true mask and a weight loss between P_mod and the truth.
fn phase2_episode(model: &Model, case: &AnnotatedCase, cfg: &TrainConfig, seed: u64) -> Result<Episode> {
    let mc = &model.config;
    let gt = episode_target(case, seed)?;
    let gt_soft = SoftMask::majority(&[&gt])?;
    let e_g = encode_image(mc, &model.seg, case.image())?;
    let space = build_space(mc, &model.sampling, &e_g)?;
    let clinician = clinician_for(cfg, gt.clone(), derive_seed(seed, 3, 0));
    let x_gt = embed_preference(&model.sampling.mvp, &gt_soft, &e_g)?;
    let mut history: Vec<InteractionEvent> = Vec::new();
    let (mut grads, mut weight_grads) = (BTreeMap::new(), BTreeMap::new());
    let mut total = 0.0;
    let mut terms = 0usize;
    for t in 0..cfg.interactions {
        let samples = space.draw_samples(cfg.n_samples, derive_seed(seed, 11, t as u64))?;
        let draws: Vec<(usize, Vec<f64>)> = samples.iter().map(|s| (s.component, s.noise.clone())).collect();
        let latents: Vec<Vec<f64>> = samples.into_iter().map(|s| s.vector).collect();
        let pred = predict_ensemble(mc, &model.seg, &e_g, &latents, &history)?;
        let soft = fuse_majority(&pred.masks)?;
        let candidates = cluster_candidates(&pred.masks, cfg.k_candidates, derive_seed(seed, 13, t as u64))?;
        let view = SessionView { last_soft: &soft, candidates: &candidates, history: &history, iteration: t };
        let event = match clinician.next_event(&view)? {
            Decision::Event(ev) => ev,
            Decision::Done => break,
        };
        let k = match event.action()? {
            crate::domain::Action::Select(k) => k,
            crate::domain::Action::Click { row, col, polarity } => candidate_for_click(&candidates, row, col, polarity),
        };
        let preference = candidates.regions()[k].clone();
        history.push(event);
        let ctx = MvpContext { e_g: &e_g, history: &history, draws: &draws, preference: &preference, paths: MvpPaths::default() };
        let out = mvp_loss_grads(mc, &model.seg, &model.sampling, &ctx, &gt)?;
        let x_mod = embed_preference(&model.sampling.mvp, &out.p_mod, &e_g)?;
        let (wl, wg) = weight_loss_grads(&model.sampling.weight, &space, &e_g, &x_mod, &x_gt)?;
        total += out.loss + wl;
        terms += 1;
        add_scaled(&mut grads, out.grads, 1.0);
        add_scaled(&mut weight_grads, wg, 1.0);
    }
    if terms > 0 {
        let s = 1.0 / terms as f64;
        grads.values_mut().for_each(|g| g.scale_assign(s));
        weight_grads.values_mut().for_each(|g| g.scale_assign(s));
        total *= s;
    }
    Ok(Episode { loss: total, grads, weight_grads })
}

fn check_finite(loss: f64, grads: &[&BTreeMap<String, Tensor>], phase: u8, step: usize) -> Result<()> {
    if !loss.is_finite() || grads.iter().any(|g| !g.values().all(Tensor::is_finite)) {
        return Err(Error::NonFinite(format!("phase {phase} step {step}: loss {loss}")));
    }
    Ok(())
}

/// Runs both phases from `model`; on divergence returns the last good parameters.
pub fn train(
    mut model: Model,
    cases: &[&AnnotatedCase],
    cfg: &TrainConfig,
    sink: &mut dyn LossSink,
) -> std::result::Result<(Model, TrainReport), Box<Diverged>> {
    let mut report = TrainReport::default();
    let fail = |error: Error, model: &Model, report: &TrainReport| {
        Box::new(Diverged { error, last_good: model.clone(), report: report.clone() })
    };
    if let Err(e) = cfg.validate() {
        return Err(fail(e, &model, &report));
    }
    if cases.is_empty() {
        return Err(fail(Error::InvalidArgument("training split is empty".into()), &model, &report));
    }
    let cases: Vec<&AnnotatedCase> = cases.iter().copied().take(cfg.max_cases.unwrap_or(usize::MAX)).collect();
    let mut step = 0usize;

    let mut seg_opt = Adam::new(cfg.schedule.base_lr);
    for epoch in 0..cfg.phase1_epochs {
        seg_opt.lr = cfg.schedule.lr_at(epoch);
        let order = shuffled(cases.len(), derive_seed(cfg.seed, 101, epoch as u64));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = par_map(batch, |&i| phase1_episode(&model, cases[i], cfg, episode_seed(cfg, 1, epoch, i)));
            let (loss, grads, _) = match merge(results) {
                Ok(v) => v,
                Err(e) => return Err(fail(e, &model, &report)),
            };
            if let Err(e) = check_finite(loss, &[&grads], 1, step) {
                return Err(fail(e, &model, &report));
            }
            seg_opt.step(&mut model.seg, &grads);
            let rec = LossRecord { step, phase: 1, loss, lr: seg_opt.lr };
            if let Err(e) = sink.record(&rec) {
                return Err(fail(e, &model, &report));
            }
            report.losses.push(rec);
            epoch_loss += loss * batch.len() as f64;
            step += 1;
        }
        report.phase1_epoch_loss.push(epoch_loss / cases.len() as f64);
        log::info!("phase 1 epoch {epoch}: mean loss {:.5}", epoch_loss / cases.len() as f64);
    }

    report.seg_checksum_phase2_start = model.seg.checksum();
    let mut mvp_opt = Adam::new(cfg.schedule.base_lr);
    let mut weight_opt = Adam::new(cfg.schedule.base_lr);
    for epoch in 0..cfg.phase2_epochs {
        let lr = cfg.schedule.lr_at(epoch);
        mvp_opt.lr = lr;
        weight_opt.lr = lr;
        let order = shuffled(cases.len(), derive_seed(cfg.seed, 202, epoch as u64));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = par_map(batch, |&i| phase2_episode(&model, cases[i], cfg, episode_seed(cfg, 2, epoch, i)));
            let (loss, grads, wgrads) = match merge(results) {
                Ok(v) => v,
                Err(e) => return Err(fail(e, &model, &report)),
            };
            if let Err(e) = check_finite(loss, &[&grads, &wgrads], 2, step) {
                return Err(fail(e, &model, &report));
            }
            mvp_opt.step(&mut model.sampling.mvp, &grads);
            weight_opt.step(&mut model.sampling.weight, &wgrads);
            let rec = LossRecord { step, phase: 2, loss, lr };
            if let Err(e) = sink.record(&rec) {
                return Err(fail(e, &model, &report));
            }
            report.losses.push(rec);
            epoch_loss += loss * batch.len() as f64;
            step += 1;
        }
        report.phase2_epoch_loss.push(epoch_loss / cases.len() as f64);
        log::info!("phase 2 epoch {epoch}: mean loss {:.5}", epoch_loss / cases.len() as f64);
    }
    report.seg_checksum_phase2_end = model.seg.checksum();
    Ok((model, report))
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

type Merged = (f64, BTreeMap<String, Tensor>, BTreeMap<String, Tensor>);

/// Averages episode losses and gradients in batch order.
fn merge(results: Vec<Result<Episode>>) -> Result<Merged> {
    let n = results.len() as f64;
    let mut loss = 0.0;
    let mut grads = BTreeMap::new();
    let mut wgrads = BTreeMap::new();
    for r in results {
        let ep = r?;
        loss += ep.loss / n;
        add_scaled(&mut grads, ep.grads, 1.0 / n);
        add_scaled(&mut wgrads, ep.weight_grads, 1.0 / n);
    }
    Ok((loss, grads, wgrads))
}

/// Parameter groups touched by each phase, for callers that verify freezing.
pub fn seg_checksum(model: &Model) -> String {
    model.seg.checksum()
}

#[doc(hidden)]
pub fn group_checksums(model: &Model) -> [String; 3] {
    let f = |p: &ParamSet| p.checksum();
    [f(&model.seg), f(&model.sampling.mvp), f(&model.sampling.weight)]
}
