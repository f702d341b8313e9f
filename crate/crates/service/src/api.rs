//! JSON bodies of the HTTP interface.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use segloop_core::codec::{to_base64, votes_to_png};
use segloop_core::{InteractionEvent, Rle, Session, SessionMode, SessionStatus, SoftMask};

use crate::error::ApiError;

/// `POST /sessions`. Exactly one of `image_png` (base64 PNG) and `case_id`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_png: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<SessionMode>,
    /// Overrides for individual session settings, e.g. `{"seed": 3}`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<Map<String, Value>>,
}

/// A mask as runs plus the vote fractions as an 8-bit PNG (value = round(255·vote)), base64.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskView {
    pub mask: Rle,
    pub votes_png: String,
}

impl MaskView {
    pub fn of(soft: &SoftMask) -> Result<Self, ApiError> {
        let (h, w) = soft.shape();
        Ok(Self { mask: Rle::encode(soft.binarized()), votes_png: to_base64(&votes_to_png(soft.votes(), h, w)?) })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub index: usize,
    /// Ensemble members clustered into this region.
    pub members: Vec<usize>,
    #[serde(flatten)]
    pub region: MaskView,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub status: SessionStatus,
    pub mode: SessionMode,
    pub iteration: usize,
    pub remaining: usize,
    pub max_iterations: usize,
    pub height: usize,
    pub width: usize,
    pub soft: Option<MaskView>,
    /// Empty unless the session is active.
    pub candidates: Vec<CandidateView>,
    pub history: Vec<InteractionEvent>,
    /// Unix seconds.
    pub created_at: u64,
    pub last_active_at: u64,
}

impl SessionView {
    pub fn of(session: &Session, created_at: u64, last_active_at: u64) -> Result<Self, ApiError> {
        let soft = session.last_soft().map(MaskView::of).transpose()?;
        let candidates = match (session.status(), session.candidates()) {
            (SessionStatus::Active, Some(set)) => set
                .regions()
                .iter()
                .zip(set.member_indices())
                .enumerate()
                .map(|(index, (region, members))| {
                    Ok(CandidateView { index, members: members.clone(), region: MaskView::of(region)? })
                })
                .collect::<Result<Vec<_>, ApiError>>()?,
            _ => Vec::new(),
        };
        Ok(Self {
            session_id: session.id().to_string(),
            status: session.status(),
            mode: session.mode(),
            iteration: session.iteration(),
            remaining: session.remaining(),
            max_iterations: session.config().max_iterations,
            height: session.image().height(),
            width: session.image().width(),
            soft,
            candidates,
            history: session.history().to_vec(),
            created_at,
            last_active_at,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcceptResponse {
    pub session_id: String,
    pub status: SessionStatus,
    pub iteration: usize,
    pub remaining: usize,
    pub mask: Rle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub checkpoint_sha256: String,
    pub sessions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume_hint: Option<String>,
}
