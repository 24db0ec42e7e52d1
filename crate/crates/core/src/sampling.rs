//! Positive candidate bags and in-batch negatives.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::Stream;
use crate::encoders::Narration;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// A segment addressed by stream position and index within the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SegmentRef {
    pub stream: usize,
    pub segment: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateBag {
    pub anchor: SegmentRef,
    /// Candidate narrations in temporal order; all from the anchor's stream.
    pub candidates: Vec<SegmentRef>,
    /// Position of the anchor's own narration within `candidates`.
    pub anchor_pos: usize,
}

impl CandidateBag {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Anchor narration plus the `k - 1` temporally nearest narrations of the
/// same stream. Ties in distance go to the earlier segment. Near a stream
/// boundary the window grows on the side that still has segments.
pub fn build_positive_bag(
    stream: &Stream,
    stream_pos: usize,
    anchor: usize,
    k: usize,
) -> Result<CandidateBag> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("bag size {k} must be odd and positive")));
    }
    if k > stream.len() {
        return Err(Error::InvalidArgument(format!(
            "bag size {k} exceeds stream length {}",
            stream.len()
        )));
    }
    if anchor >= stream.len() {
        return Err(Error::InvalidArgument(format!("anchor {anchor} outside stream")));
    }
    let t0 = stream.segments[anchor].timestamp;
    let mut order: Vec<usize> = (0..stream.len()).collect();
    order.sort_by(|&a, &b| {
        let da = (stream.segments[a].timestamp - t0).abs();
        let db = (stream.segments[b].timestamp - t0).abs();
        da.total_cmp(&db).then(a.cmp(&b))
    });
    let mut chosen: Vec<usize> = order[..k].to_vec();
    chosen.sort_unstable();
    let anchor_pos = chosen.binary_search(&anchor).expect("anchor has distance 0");
    Ok(CandidateBag {
        anchor: SegmentRef {
            stream: stream_pos,
            segment: anchor,
        },
        candidates: chosen
            .into_iter()
            .map(|segment| SegmentRef {
                stream: stream_pos,
                segment,
            })
            .collect(),
        anchor_pos,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    /// `(x, y)`: negatives for both the clip and the narration.
    Joint,
    /// `(y|x)`: the anchor clip against other narrations.
    TextGivenVideo,
    /// `(x|y)`: other clips against the anchor narration.
    VideoGivenText,
}

impl NegativeMode {
    pub const ALL: [NegativeMode; 3] = [
        NegativeMode::Joint,
        NegativeMode::TextGivenVideo,
        NegativeMode::VideoGivenText,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NegativeMode::Joint => "joint",
            NegativeMode::TextGivenVideo => "text_given_video",
            NegativeMode::VideoGivenText => "video_given_text",
        }
    }

    /// Negatives per sample for a batch of `b`.
    pub fn count(self, b: usize) -> usize {
        match self {
            NegativeMode::Joint => 2 * (b - 1),
            _ => b - 1,
        }
    }
}

impl std::fmt::Display for NegativeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for NegativeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown negative mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSpec {
    pub mode: NegativeMode,
    /// Sample ids making up the batch.
    pub batch: Vec<usize>,
}

/// A (clip, narration) pairing by sample id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PairIndex {
    pub clip: usize,
    pub narration: usize,
}

/// Negatives for the sample at batch position `i`. Joint mode lists the
/// `(x_i, y_j)` pairs first, then the `(x_j, y_i)` pairs, `j` ascending.
pub fn build_negatives(spec: &NegativeSpec, i: usize) -> Result<Vec<PairIndex>> {
    let b = spec.batch.len();
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch of {b} has no negatives"
        )));
    }
    if i >= b {
        return Err(Error::InvalidArgument(format!("sample {i} outside batch of {b}")));
    }
    let me = spec.batch[i];
    let others = || spec.batch.iter().enumerate().filter(move |(j, _)| *j != i).map(|(_, &s)| s);
    let text = others().map(|s| PairIndex { clip: me, narration: s });
    let video = others().map(|s| PairIndex { clip: s, narration: me });
    Ok(match spec.mode {
        NegativeMode::Joint => text.chain(video).collect(),
        NegativeMode::TextGivenVideo => text.collect(),
        NegativeMode::VideoGivenText => video.collect(),
    })
}

/// All candidate narrations joined in temporal order, cut to `max_words`.
pub fn concat_candidates(stream: &Stream, bag: &CandidateBag, max_words: usize) -> Narration {
    let mut tokens = Vec::new();
    for c in &bag.candidates {
        tokens.extend_from_slice(stream.segments[c.segment].narration.tokens());
        if tokens.len() >= max_words {
            break;
        }
    }
    tokens.truncate(max_words);
    Narration(tokens)
}

/// `b` distinct anchors drawn uniformly over every segment of `streams`.
/// Each draw is `below(total_segments)`, redrawn on repeats.
pub fn sample_anchors(streams: &[Stream], b: usize, rng: &mut Rng) -> Result<Vec<SegmentRef>> {
    let mut offsets = Vec::with_capacity(streams.len());
    let mut total = 0usize;
    for s in streams {
        offsets.push(total);
        total += s.len();
    }
    if b > total {
        return Err(Error::InvalidArgument(format!(
            "batch of {b} exceeds {total} available segments"
        )));
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(b);
    while out.len() < b {
        let g = rng.below_usize(total);
        if !seen.insert(g) {
            continue;
        }
        let stream = offsets.partition_point(|&o| o <= g) - 1;
        out.push(SegmentRef {
            stream,
            segment: g - offsets[stream],
        });
    }
    Ok(out)
}
