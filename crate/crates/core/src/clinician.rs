//! Scripted clinicians with a private ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{dice, BinaryMask, InteractionEvent, Polarity, SoftMask};
use crate::engine::{derive_seed, Session};
use crate::error::{Error, Result};
use crate::samplingnet::CandidateSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Uniform click anywhere.
    RandomSelect,
    /// Click where the ensemble disagrees.
    Disagreement,
    /// Click on an error of the last fused prediction.
    LastWrong,
    /// Select the candidate with the best Dice against the private mask.
    OracleCandidate,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Self::RandomSelect, Self::Disagreement, Self::LastWrong, Self::OracleCandidate];

    pub fn name(self) -> &'static str {
        match self {
            Self::RandomSelect => "random_select",
            Self::Disagreement => "disagreement",
            Self::LastWrong => "last_wrong",
            Self::OracleCandidate => "oracle_candidate",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy {s:?}")))
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// What a clinician sees of a session.
#[derive(Clone, Copy, Debug)]
pub struct SessionView<'a> {
    pub last_soft: &'a SoftMask,
    pub candidates: &'a CandidateSet,
    pub history: &'a [InteractionEvent],
    pub iteration: usize,
}

impl<'a> SessionView<'a> {
    /// `None` once the session no longer offers candidates.
    pub fn of(session: &'a Session) -> Option<Self> {
        Some(Self {
            last_soft: session.last_soft()?,
            candidates: session.candidates()?,
            history: session.history(),
            iteration: session.iteration(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Decision {
    Event(InteractionEvent),
    Done,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedClinician {
    pub strategy: Strategy,
    pub private_gt: BinaryMask,
    pub annotator_id: String,
    pub seed: u64,
}

impl SimulatedClinician {
    pub fn new(strategy: Strategy, private_gt: BinaryMask, annotator_id: impl Into<String>, seed: u64) -> Self {
        Self { strategy, private_gt, annotator_id: annotator_id.into(), seed }
    }

    fn click_from(&self, pool: &[usize], view: &SessionView<'_>) -> Decision {
        if pool.is_empty() {
            return Decision::Done;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 0xC11C, view.history.len() as u64));
        let p = pool[rng.gen_range(0..pool.len())];
        let w = self.private_gt.width();
        let (row, col) = (p / w, p % w);
        let polarity = if self.private_gt.get(row, col) { Polarity::Foreground } else { Polarity::Background };
        Decision::Event(InteractionEvent::click(view.iteration, row, col, polarity))
    }

    pub fn next_event(&self, view: &SessionView<'_>) -> Result<Decision> {
        if view.last_soft.shape() != self.private_gt.shape() {
            return Err(Error::Shape(format!(
                "clinician mask {:?} vs prediction {:?}",
                self.private_gt.shape(),
                view.last_soft.shape()
            )));
        }
        let all = || (0..self.private_gt.data().len()).collect::<Vec<_>>();
        Ok(match self.strategy {
            Strategy::RandomSelect => self.click_from(&all(), view),
            Strategy::Disagreement => {
                let pool: Vec<usize> = view
                    .last_soft
                    .votes()
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v > 0.0 && v < 1.0)
                    .map(|(i, _)| i)
                    .collect();
                if pool.is_empty() {
                    self.click_from(&all(), view)
                } else {
                    self.click_from(&pool, view)
                }
            }
            Strategy::LastWrong => {
                let pool: Vec<usize> = view
                    .last_soft
                    .binarized()
                    .data()
                    .iter()
                    .zip(self.private_gt.data())
                    .enumerate()
                    .filter(|(_, (a, b))| a != b)
                    .map(|(i, _)| i)
                    .collect();
                self.click_from(&pool, view)
            }
            Strategy::OracleCandidate => {
                let mut best = (0, f64::NEG_INFINITY);
                for (k, region) in view.candidates.regions().iter().enumerate() {
                    let d = dice(region.binarized(), &self.private_gt)?;
                    if d > best.1 {
                        best = (k, d);
                    }
                }
                Decision::Event(InteractionEvent::selection(view.iteration, best.0))
            }
        })
    }
}
