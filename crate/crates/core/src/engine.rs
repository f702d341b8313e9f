//! The interactive loop: sample → segment → fuse → offer candidates → take a
//! selection → recalibrate → repeat.

use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::domain::{Action, BinaryMask, ImageSample, InteractionEvent, Polarity, SoftMask};
use crate::error::{Error, Result};
use crate::model::{Model, SamplingParams};
use crate::optim::Adam;
use crate::samplingnet::{
    build_space, cluster_candidates, embed_preference, mvp_loss_grads_weighted, weight_loss_grads, CandidateSet, MvpContext,
    MvpPaths,
};
use crate::segnet::{encode_image, fuse_majority, predict_ensemble, ImageEmbedding};
use crate::space::MixtureSpace;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Accepted,
    Expired,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionMode {
    /// Online recalibration of the sampling space after every selection.
    Adaptive,
    /// The space stays as built; only the prompt history grows.
    Frozen,
}

impl std::str::FromStr for SessionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Self::Adaptive),
            "frozen" => Ok(Self::Frozen),
            other => Err(Error::InvalidArgument(format!("unknown mode {other:?} (adaptive|frozen)"))),
        }
    }
}

/// Update rule for the per-session θ_MVP / θ_W copies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnlineOptimizer {
    Adam,
    #[default]
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub n_samples: usize,
    pub k_candidates: usize,
    pub components: usize,
    pub latent_dim: usize,
    pub max_iterations: usize,
    /// Step size for the online θ_MVP and θ_W updates.
    pub online_lr: f64,
    /// Optimiser steps per selection.
    pub online_steps: usize,
    pub online_optimizer: OnlineOptimizer,
    /// Spread (pixels) of a click's influence on the online loss; cut off at 3σ.
    pub click_sigma: f64,
    /// Online mean-variance updates (adaptive mode only).
    pub adapt_mean_variance: bool,
    /// Online weight updates (adaptive mode only).
    pub adapt_weights: bool,
    /// Reuse the first iteration's draws instead of redrawing every round.
    pub hold_samples: bool,
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            n_samples: 8,
            k_candidates: 3,
            components: crate::space::DEFAULT_COMPONENTS,
            latent_dim: crate::space::DEFAULT_LATENT_DIM,
            max_iterations: 6,
            online_lr: 1.0,
            online_steps: 1,
            online_optimizer: OnlineOptimizer::default(),
            click_sigma: 12.0,
            adapt_mean_variance: true,
            adapt_weights: true,
            hold_samples: false,
            seed: 0,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self, model: &Model) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.k_candidates == 0 || self.n_samples < self.k_candidates {
            return bad(format!("need N ≥ K ≥ 1, got N={} K={}", self.n_samples, self.k_candidates));
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be ≥ 1".into());
        }
        if self.components != model.config.components || self.latent_dim != model.config.latent_dim {
            return bad(format!(
                "session M={} D={} but the model was built with M={} D={}",
                self.components, self.latent_dim, model.config.components, model.config.latent_dim
            ));
        }
        if self.k_candidates > model.config.candidate_slots {
            return bad(format!("K={} exceeds the model's {} candidate slots", self.k_candidates, model.config.candidate_slots));
        }
        if !(self.click_sigma > 0.0 && self.click_sigma.is_finite()) {
            return bad(format!("click_sigma {} must be positive", self.click_sigma));
        }
        if !(self.online_lr > 0.0 && self.online_lr.is_finite()) {
            return bad(format!("online_lr {} must be positive", self.online_lr));
        }
        Ok(())
    }

    /// Session settings that agree with a model's latent geometry.
    pub fn for_model(model: &Model) -> Self {
        Self { components: model.config.components, latent_dim: model.config.latent_dim, ..Self::default() }
    }
}

/// Per-pixel weights of the online loss. The preferred region only speaks
/// where it departs from the current fused mask, and a click only near itself
/// (Gaussian of spread `sigma`, zero beyond 3σ).
pub fn correction_weights(target: &BinaryMask, fused: &BinaryMask, focus: Option<(usize, usize)>, sigma: f64) -> Vec<f64> {
    let w = target.width();
    target
        .data()
        .iter()
        .zip(fused.data())
        .enumerate()
        .map(|(i, (a, b))| {
            if a == b {
                return 0.0;
            }
            let Some((row, col)) = focus else { return 1.0 };
            let dy = (i / w) as f64 - row as f64;
            let dx = (i % w) as f64 - col as f64;
            let d2 = dy * dy + dx * dx;
            if d2 > 9.0 * sigma * sigma {
                0.0
            } else {
                (-d2 / (2.0 * sigma * sigma)).exp()
            }
        })
        .collect()
}

/// What one predict step produced.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationResult {
    pub ensemble: Vec<BinaryMask>,
    pub soft: SoftMask,
    pub candidates: CandidateSet,
}

/// SplitMix64 finaliser over `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SAMPLES: u64 = 1;
const STREAM_CLUSTER: u64 = 2;

/// Candidate whose votes at the click are highest (foreground) or lowest
/// (background); ties go to the lowest index.
pub fn candidate_for_click(candidates: &CandidateSet, row: usize, col: usize, polarity: Polarity) -> usize {
    let mut best = 0;
    let mut best_v = f64::NAN;
    for (k, r) in candidates.regions().iter().enumerate() {
        let v = r.votes()[row * r.shape().1 + col];
        let better = match polarity {
            Polarity::Foreground => v > best_v,
            Polarity::Background => v < best_v,
        };
        if k == 0 || better {
            best = k;
            best_v = v;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct Session {
    id: String,
    model: Arc<Model>,
    image: ImageSample,
    e_g: ImageEmbedding,
    config: SessionConfig,
    mode: SessionMode,
    status: SessionStatus,
    iteration: usize,
    sampling: SamplingParams,
    mvp_opt: Adam,
    weight_opt: Adam,
    initial_space: MixtureSpace,
    space: MixtureSpace,
    draws: Vec<(usize, Vec<f64>)>,
    history: Vec<InteractionEvent>,
    last: Option<IterationResult>,
}

impl Session {
    /// Encodes the image once, builds the initial space and runs the first predict step.
    pub fn create(id: impl Into<String>, model: Arc<Model>, image: ImageSample, config: SessionConfig, mode: SessionMode) -> Result<Self> {
        config.validate(&model)?;
        let e_g = encode_image(&model.config, &model.seg, &image)?;
        let sampling = model.sampling.clone();
        let space = build_space(&model.config, &sampling, &e_g)?;
        let mut s = Self {
            id: id.into(),
            image,
            e_g,
            mode,
            status: SessionStatus::Active,
            iteration: 0,
            mvp_opt: Adam::new(config.online_lr),
            weight_opt: Adam::new(config.online_lr),
            initial_space: space.clone(),
            space,
            sampling,
            draws: Vec::new(),
            history: Vec::new(),
            last: None,
            config,
            model,
        };
        s.step_predict()?;
        Ok(s)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn image(&self) -> &ImageSample {
        &self.image
    }

    pub fn embedding(&self) -> &ImageEmbedding {
        &self.e_g
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn mode(&self) -> SessionMode {
        self.mode
    }

    pub fn status(&self) -> SessionStatus {
        self.status
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn remaining(&self) -> usize {
        self.config.max_iterations.saturating_sub(self.iteration)
    }

    pub fn space(&self) -> &MixtureSpace {
        &self.space
    }

    pub fn initial_space(&self) -> &MixtureSpace {
        &self.initial_space
    }

    pub fn sampling_params(&self) -> &SamplingParams {
        &self.sampling
    }

    pub fn history(&self) -> &[InteractionEvent] {
        &self.history
    }

    pub fn held_draws(&self) -> &[(usize, Vec<f64>)] {
        &self.draws
    }

    pub fn last(&self) -> Option<&IterationResult> {
        self.last.as_ref()
    }

    pub fn last_soft(&self) -> Option<&SoftMask> {
        self.last.as_ref().map(|r| &r.soft)
    }

    pub fn candidates(&self) -> Option<&CandidateSet> {
        match self.status {
            SessionStatus::Active => self.last.as_ref().map(|r| &r.candidates),
            _ => None,
        }
    }

    fn ensure_active(&self) -> Result<()> {
        match self.status {
            SessionStatus::Active => Ok(()),
            s => Err(Error::SessionClosed(s)),
        }
    }

    /// Draws the ensemble for the current iteration and refreshes the candidates.
    pub fn step_predict(&mut self) -> Result<IterationResult> {
        self.ensure_active()?;
        let cfg = &self.config;
        if !(cfg.hold_samples && !self.draws.is_empty()) {
            let samples = self
                .space
                .draw_samples(cfg.n_samples, derive_seed(cfg.seed, STREAM_SAMPLES, self.iteration as u64))?;
            self.draws = samples.into_iter().map(|s| (s.component, s.noise)).collect();
        }
        let latents: Vec<Vec<f64>> = self.draws.iter().map(|(c, e)| self.space.reparameterize(*c, e)).collect();
        let decoded = predict_ensemble(&self.model.config, &self.model.seg, &self.e_g, &latents, &self.history)?;
        let soft = fuse_majority(&decoded.masks)?;
        let candidates = cluster_candidates(
            &decoded.masks,
            cfg.k_candidates,
            derive_seed(cfg.seed, STREAM_CLUSTER, self.iteration as u64),
        )?;
        let result = IterationResult { ensemble: decoded.masks, soft, candidates };
        self.last = Some(result.clone());
        Ok(result)
    }

    /// Region the event expresses a preference for.
    pub fn preferred_candidate(&self, event: &InteractionEvent) -> Result<usize> {
        let last = self.last.as_ref().ok_or(Error::NoPrediction)?;
        Ok(match event.validate(self.image.height(), self.image.width(), self.config.k_candidates)? {
            Action::Select(k) => k,
            Action::Click { row, col, polarity } => candidate_for_click(&last.candidates, row, col, polarity),
        })
    }

    /// Ingests one clinician act, recalibrates (adaptive mode) and predicts the next round.
    pub fn apply_selection(&mut self, event: InteractionEvent) -> Result<IterationResult> {
        self.ensure_active()?;
        if self.iteration >= self.config.max_iterations {
            self.status = SessionStatus::Expired;
            return Err(Error::IterationCap(self.config.max_iterations));
        }
        if event.iteration != self.iteration {
            return Err(Error::InvalidEvent(format!(
                "event is for iteration {} but the session is at iteration {}",
                event.iteration, self.iteration
            )));
        }
        let k = self.preferred_candidate(&event)?;
        let preference = self.last.as_ref().expect("checked above").candidates.regions()[k].clone();
        let focus = match event.action()? {
            Action::Click { row, col, .. } => Some((row, col)),
            Action::Select(_) => None,
        };
        self.history.push(event);

        if self.mode == SessionMode::Adaptive && (self.config.adapt_mean_variance || self.config.adapt_weights) {
            self.recalibrate(&preference, focus)?;
        }
        self.iteration += 1;
        let result = self.step_predict()?;
        if self.iteration >= self.config.max_iterations {
            self.status = SessionStatus::Expired;
        }
        Ok(result)
    }

    /// Online updates toward the preferred region, which stands in for the
    /// ground truth during interaction.
    fn recalibrate(&mut self, preference: &SoftMask, focus: Option<(usize, usize)>) -> Result<()> {
        let target = preference.binarized().clone();
        let fused = self.last.as_ref().ok_or(Error::NoPrediction)?.soft.binarized();
        let weights = correction_weights(&target, fused, focus, self.config.click_sigma);
        if weights.iter().all(|&w| w == 0.0) {
            return Ok(());
        }

        let model = Arc::clone(&self.model);
        let cfg = &model.config;
        for _ in 0..self.config.online_steps.max(1) {
            let ctx = MvpContext {
                e_g: &self.e_g,
                history: &self.history,
                draws: &self.draws,
                preference,
                paths: MvpPaths::default(),
            };
            let out = mvp_loss_grads_weighted(cfg, &model.seg, &self.sampling, &ctx, &target, &weights)?;
            if self.config.adapt_mean_variance {
                match self.config.online_optimizer {
                    OnlineOptimizer::Adam => self.mvp_opt.step(&mut self.sampling.mvp, &out.grads),
                    OnlineOptimizer::Sgd => self.sampling.mvp.sgd_step(&out.grads, self.config.online_lr),
                }
            }
            if self.config.adapt_weights {
                let space = build_space(cfg, &self.sampling, &self.e_g)?;
                let x_mod = embed_preference(&self.sampling.mvp, &out.p_mod, &self.e_g)?;
                let x_gt = embed_preference(&self.sampling.mvp, preference, &self.e_g)?;
                let (_, grads) = weight_loss_grads(&self.sampling.weight, &space, &self.e_g, &x_mod, &x_gt)?;
                match self.config.online_optimizer {
                    OnlineOptimizer::Adam => self.weight_opt.step(&mut self.sampling.weight, &grads),
                    OnlineOptimizer::Sgd => self.sampling.weight.sgd_step(&grads, self.config.online_lr),
                }
            }
        }
        if !self.sampling.mvp.all_finite() || !self.sampling.weight.all_finite() {
            return Err(Error::NonFinite("online update produced non-finite parameters".into()));
        }
        self.space = build_space(cfg, &self.sampling, &self.e_g)?;
        Ok(())
    }

    /// Final mask; the session becomes read-only. Idempotent.
    pub fn accept(&mut self) -> Result<BinaryMask> {
        let mask = self.last.as_ref().ok_or(Error::NoPrediction)?.soft.binarized().clone();
        if self.status == SessionStatus::Active {
            self.status = SessionStatus::Accepted;
        }
        Ok(mask)
    }

    /// Marks the session expired (idle timeout); the last soft mask remains final.
    pub fn expire(&mut self) {
        if self.status == SessionStatus::Active {
            self.status = SessionStatus::Expired;
        }
    }
}

// ----- journal ----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JournalImage {
    pub case_id: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Little-endian f64 pixels, base64.
    pub pixels: String,
}

impl JournalImage {
    pub fn from_image(image: &ImageSample) -> Self {
        Self {
            case_id: image.case_id().to_string(),
            height: image.height(),
            width: image.width(),
            channels: image.channels(),
            pixels: crate::codec::f64s_to_base64(image.pixels()),
        }
    }

    pub fn to_image(&self) -> Result<ImageSample> {
        ImageSample::new(
            self.case_id.clone(),
            self.height,
            self.width,
            self.channels,
            crate::codec::f64s_from_base64(&self.pixels)?,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum JournalRecord {
    Header {
        session_id: String,
        mode: SessionMode,
        config: SessionConfig,
        checkpoint_sha256: Option<String>,
        image: JournalImage,
    },
    Event {
        event: InteractionEvent,
    },
    Accept,
}

impl JournalRecord {
    pub fn header(session: &Session, checkpoint_sha256: Option<String>) -> Self {
        Self::Header {
            session_id: session.id.clone(),
            mode: session.mode,
            config: session.config.clone(),
            checkpoint_sha256,
            image: JournalImage::from_image(&session.image),
        }
    }

    pub fn write_line(&self, out: &mut impl Write) -> Result<()> {
        serde_json::to_writer(&mut *out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }
}

pub fn read_journal(input: impl BufRead) -> Result<Vec<JournalRecord>> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JournalRecord = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidArgument(format!("journal line {}: {e}", i + 1)))?;
        records.push(rec);
    }
    match records.first() {
        Some(JournalRecord::Header { .. }) => Ok(records),
        _ => Err(Error::InvalidArgument("journal must start with a header record".into())),
    }
}

/// Rebuilds a session by re-running every journaled event.
pub fn replay(model: Arc<Model>, records: &[JournalRecord]) -> Result<Session> {
    let Some(JournalRecord::Header { session_id, mode, config, image, .. }) = records.first() else {
        return Err(Error::InvalidArgument("journal must start with a header record".into()));
    };
    let mut session = Session::create(session_id.clone(), model, image.to_image()?, config.clone(), *mode)?;
    for rec in &records[1..] {
        match rec {
            JournalRecord::Event { event } => {
                session.apply_selection(event.clone())?;
            }
            JournalRecord::Accept => {
                session.accept()?;
            }
            JournalRecord::Header { .. } => {
                return Err(Error::InvalidArgument("journal has more than one header".into()));
            }
        }
    }
    Ok(session)
}
