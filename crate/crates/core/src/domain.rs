//! Shared value types and elementary mask algebra.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_IMAGE_SIDE: usize = 16;

/// An input image with pixel values in `[0,1]`, stored channel-major (`[c,h,w]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    case_id: String,
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl ImageSample {
    pub fn new(case_id: impl Into<String>, height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        let case_id = case_id.into();
        if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
            return Err(Error::InvalidArgument(format!(
                "image {case_id} is {height}×{width}; both sides must be at least {MIN_IMAGE_SIDE}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!("image {case_id} has {channels} channels; expected 1 or 3")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "image {case_id}: {} pixel values for {height}×{width}×{channels}",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!("image {case_id}: pixel value {bad} outside [0,1]")));
        }
        Ok(Self { case_id, height, width, channels, pixels })
    }

    pub fn case_id(&self) -> &str {
        &self.case_id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Channel-major pixel values.
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.channels, self.height, self.width], self.pixels.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} mask values for {height}×{width}", data.len())));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!("mask value {v} is not 0 or 1")));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(u8::from(f(r, c)));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] == 1
    }

    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    fn check_same_shape(&self, other: &BinaryMask) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "masks are {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// Per-pixel vote fraction of an ensemble and its strict-majority binarisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftMask {
    votes: Vec<f64>,
    binarized: BinaryMask,
}

impl SoftMask {
    pub fn from_votes(height: usize, width: usize, votes: Vec<f64>) -> Result<Self> {
        if votes.len() != height * width {
            return Err(Error::Shape(format!("{} votes for {height}×{width}", votes.len())));
        }
        if let Some(v) = votes.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("vote fraction {v} outside [0,1]")));
        }
        let data = votes.iter().map(|&v| u8::from(v > 0.5)).collect();
        Ok(Self { votes, binarized: BinaryMask { height, width, data } })
    }

    /// Majority vote over an ensemble; ties at exactly one half binarise to 0.
    pub fn majority(masks: &[&BinaryMask]) -> Result<Self> {
        let first = masks
            .first()
            .ok_or_else(|| Error::InvalidArgument("majority vote over an empty mask list".into()))?;
        let (h, w) = first.shape();
        let votes = mean_votes(masks)?;
        Self::from_votes(h, w, votes)
    }

    pub fn votes(&self) -> &[f64] {
        &self.votes
    }

    pub fn binarized(&self) -> &BinaryMask {
        &self.binarized
    }

    pub fn shape(&self) -> (usize, usize) {
        self.binarized.shape()
    }
}

/// Per-pixel mean of equally shaped masks: integer counts divided by the mask count.
pub fn mean_votes(masks: &[&BinaryMask]) -> Result<Vec<f64>> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidArgument("vote over an empty mask list".into()))?;
    let mut counts = vec![0u32; first.data.len()];
    for m in masks {
        first.check_same_shape(m)?;
        for (c, &v) in counts.iter_mut().zip(&m.data) {
            *c += v as u32;
        }
    }
    let n = masks.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// `2|a∩b| / (|a|+|b|)`, with two empty masks scoring 1.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_same_shape(b)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x & y) as usize;
        total += (x + y) as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// One image plus the independent annotations of `R ≥ 1` annotators.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedCase {
    image: ImageSample,
    annotations: Vec<BinaryMask>,
    annotator_ids: Vec<String>,
}

impl AnnotatedCase {
    pub fn new(image: ImageSample, annotations: Vec<BinaryMask>, annotator_ids: Vec<String>) -> Result<Self> {
        let id = image.case_id().to_string();
        let fail = |message: String| Error::Dataset { case_id: id.clone(), message };
        if annotations.is_empty() {
            return Err(fail("at least one annotation is required".into()));
        }
        if annotations.len() != annotator_ids.len() {
            return Err(fail(format!("{} annotations but {} annotator ids", annotations.len(), annotator_ids.len())));
        }
        for (m, aid) in annotations.iter().zip(&annotator_ids) {
            if m.shape() != (image.height(), image.width()) {
                return Err(fail(format!(
                    "annotation {aid} is {:?}, image is {:?}",
                    m.shape(),
                    (image.height(), image.width())
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = annotator_ids.iter().find(|a| !seen.insert(a.as_str())) {
            return Err(fail(format!("duplicate annotator id {dup}")));
        }
        Ok(Self { image, annotations, annotator_ids })
    }

    pub fn image(&self) -> &ImageSample {
        &self.image
    }

    pub fn annotations(&self) -> &[BinaryMask] {
        &self.annotations
    }

    pub fn annotator_ids(&self) -> &[String] {
        &self.annotator_ids
    }

    pub fn case_id(&self) -> &str {
        self.image.case_id()
    }

    pub fn annotator_count(&self) -> usize {
        self.annotations.len()
    }
}

/// Strict-majority fusion of the chosen annotators' masks.
pub fn fuse_annotations(case: &AnnotatedCase, subset: &[usize]) -> Result<BinaryMask> {
    if subset.is_empty() {
        return Err(Error::InvalidArgument("fusion subset is empty".into()));
    }
    let masks = subset
        .iter()
        .map(|&i| {
            case.annotations.get(i).ok_or_else(|| {
                Error::InvalidArgument(format!("annotator index {i} out of range for {} annotators", case.annotations.len()))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SoftMask::majority(&masks)?.binarized)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Foreground,
    Background,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Click,
    CandidateSelection,
}

/// A single clinician act. Wire form mirrors the field list exactly; use
/// [`InteractionEvent::action`] for a checked view.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub kind: EventKind,
    pub iteration: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub click_coords: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polarity: Option<Polarity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_index: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Click { row: usize, col: usize, polarity: Polarity },
    Select(usize),
}

impl InteractionEvent {
    pub fn click(iteration: usize, row: usize, col: usize, polarity: Polarity) -> Self {
        Self {
            kind: EventKind::Click,
            iteration,
            click_coords: Some((row, col)),
            polarity: Some(polarity),
            candidate_index: None,
        }
    }

    pub fn selection(iteration: usize, candidate_index: usize) -> Self {
        Self {
            kind: EventKind::CandidateSelection,
            iteration,
            click_coords: None,
            polarity: None,
            candidate_index: Some(candidate_index),
        }
    }

    /// Checks the field combination against `kind`.
    pub fn action(&self) -> Result<Action> {
        match (self.kind, self.click_coords, self.polarity, self.candidate_index) {
            (EventKind::Click, Some((row, col)), Some(polarity), None) => Ok(Action::Click { row, col, polarity }),
            (EventKind::CandidateSelection, None, None, Some(k)) => Ok(Action::Select(k)),
            _ => Err(Error::InvalidEvent(format!(
                "fields inconsistent with kind {:?}: click_coords={:?} polarity={:?} candidate_index={:?}",
                self.kind, self.click_coords, self.polarity, self.candidate_index
            ))),
        }
    }

    /// Full validation against an image size and candidate count.
    pub fn validate(&self, height: usize, width: usize, k: usize) -> Result<Action> {
        let action = self.action()?;
        match action {
            Action::Click { row, col, .. } if row >= height || col >= width => Err(Error::InvalidEvent(format!(
                "click ({row},{col}) outside {height}×{width} image"
            ))),
            Action::Select(i) if i >= k => Err(Error::InvalidEvent(format!("candidate index {i} not below K={k}"))),
            a => Ok(a),
        }
    }
}

/// Row-major run-length encoding; runs alternate starting with background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn encode(mask: &BinaryMask) -> Self {
        let mut counts = Vec::new();
        let mut current = 0u8;
        let mut run = 0u32;
        for &v in &mask.data {
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
        counts.push(run);
        Self { height: mask.height, width: mask.width, counts }
    }

    pub fn decode(&self) -> Result<BinaryMask> {
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if total != (self.height * self.width) as u64 {
            return Err(Error::Shape(format!(
                "RLE runs cover {total} pixels, expected {}",
                self.height * self.width
            )));
        }
        let mut data = Vec::with_capacity(self.height * self.width);
        for (i, &c) in self.counts.iter().enumerate() {
            data.extend(std::iter::repeat_n((i % 2) as u8, c as usize));
        }
        BinaryMask::new(self.height, self.width, data)
    }
}
