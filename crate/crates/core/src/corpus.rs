//! Synthetic narrated streams with controlled misalignment.
//!
//! Each stream is a sequence of segments. A segment shows one latent topic:
//! its clip is `A·z(topic) + noise` for a fixed random projection `A` and
//! per-topic latent `z`. Its narration either describes the segment itself,
//! describes a neighbouring segment a few positions away, or is irrelevant
//! chatter drawn from a reserved noise vocabulary.
//!
//! Vocabulary layout: with `w = floor(V / (T + 1))`, topic `t` owns token ids
//! `[t·w, (t+1)·w)` and the noise slice is the remainder `[T·w, V)`.
//!
//! Seeding: the shared projection and latents come from
//! `derive_seed(seed, 0x57_4f_52_4c_44)`; stream `s` uses its own generator
//! keyed by `derive_seed(seed, s + 1)`, so streams can be produced in any order.
//! Within a stream, topics are drawn first (a partial Fisher-Yates over all
//! topics, so they are distinct whenever `T ≥ L`; otherwise in shuffled
//! rounds), then timestamps, then per segment: clip noise, irrelevance flag,
//! alignment flag, offset, tokens.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{ClipFeature, Narration};
use crate::error::{Error, Result};
use crate::numkernel::Matrix;
use crate::rng::{derive_seed, Rng};

pub const CORPUS_FORMAT: &str = "milnce-corpus";
pub const CORPUS_VERSION: u32 = 1;

const WORLD_TAG: u64 = 0x57_4f_52_4c_44;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub num_streams: usize,
    pub segments_per_stream: usize,
    pub num_topics: usize,
    pub topic_dim: usize,
    pub clip_dim: usize,
    pub vocab_size: usize,
    pub tokens_per_narration: usize,
    pub noise_sigma: f64,
    pub p_aligned: f64,
    /// Largest misalignment, in segments.
    pub max_offset: usize,
    pub p_irrelevant: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_streams: 2000,
            segments_per_stream: 12,
            num_topics: 20,
            topic_dim: 16,
            clip_dim: 32,
            vocab_size: 200,
            tokens_per_narration: 8,
            noise_sigma: 0.8,
            p_aligned: 0.5,
            max_offset: 2,
            p_irrelevant: 0.1,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        for (name, p) in [("p_aligned", self.p_aligned), ("p_irrelevant", self.p_irrelevant)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma = {} must be finite and >= 0", self.noise_sigma));
        }
        for (name, v) in [
            ("num_streams", self.num_streams),
            ("segments_per_stream", self.segments_per_stream),
            ("num_topics", self.num_topics),
            ("topic_dim", self.topic_dim),
            ("clip_dim", self.clip_dim),
            ("tokens_per_narration", self.tokens_per_narration),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.slice_width() == 0 {
            return bad(format!(
                "vocab_size {} too small for {} topics plus a noise slice",
                self.vocab_size, self.num_topics
            ));
        }
        if self.p_aligned < 1.0 {
            if self.max_offset == 0 {
                return bad("max_offset must be >= 1 when p_aligned < 1".into());
            }
            if self.segments_per_stream < 2 {
                return bad("misalignment needs at least 2 segments per stream".into());
            }
        }
        Ok(())
    }

    /// Number of token ids owned by each topic.
    pub fn slice_width(&self) -> usize {
        self.vocab_size / (self.num_topics + 1)
    }

    pub fn topic_tokens(&self, topic: usize) -> std::ops::Range<u32> {
        let w = self.slice_width();
        (topic * w) as u32..((topic + 1) * w) as u32
    }

    pub fn noise_tokens(&self) -> std::ops::Range<u32> {
        (self.num_topics * self.slice_width()) as u32..self.vocab_size as u32
    }

    /// Class id used for irrelevant narrations.
    pub fn noise_class(&self) -> u32 {
        self.num_topics as u32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub timestamp: f64,
    pub topic_id: u32,
    pub clip: ClipFeature,
    pub narration: Narration,
    /// Topic the narration talks about; the noise class when irrelevant.
    pub aligned_topic_id: u32,
    pub is_irrelevant: bool,
    /// Segment whose content the narration describes; `None` when irrelevant.
    pub source_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stream {
    pub id: usize,
    pub segments: Vec<Segment>,
}

impl Stream {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn clip_matrix(&self) -> Matrix {
        let rows: Vec<Vec<f64>> = self.segments.iter().map(|s| s.clip.0.clone()).collect();
        Matrix::from_rows(&rows).expect("clips share a width")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corpus {
    pub format: String,
    pub version: u32,
    pub config: GenConfig,
    pub streams: Vec<Stream>,
}

/// Ground truth for one narration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Index of the segment the narration describes; `None` for irrelevant ones.
    pub matched_segment: Option<usize>,
    pub aligned_topic_id: u32,
    /// Topic shown by this segment's clip, the probe label.
    pub clip_topic_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorpusStats {
    pub segments: usize,
    pub irrelevant_fraction: f64,
    /// Among relevant narrations, the fraction describing another segment.
    pub misaligned_fraction: f64,
}

struct World {
    projection: Matrix,
    latents: Matrix,
}

impl World {
    fn new(cfg: &GenConfig) -> Self {
        let mut rng = Rng::new(derive_seed(cfg.seed, WORLD_TAG));
        let scale = 1.0 / (cfg.topic_dim as f64).sqrt();
        let proj: Vec<f64> = (0..cfg.clip_dim * cfg.topic_dim)
            .map(|_| rng.normal() * scale)
            .collect();
        let lat: Vec<f64> = (0..cfg.num_topics * cfg.topic_dim).map(|_| rng.normal()).collect();
        Self {
            projection: Matrix::from_vec(cfg.clip_dim, cfg.topic_dim, proj).expect("sized"),
            latents: Matrix::from_vec(cfg.num_topics, cfg.topic_dim, lat).expect("sized"),
        }
    }

    fn clean_clip(&self, topic: usize) -> Vec<f64> {
        let z = self.latents.row(topic);
        (0..self.projection.rows())
            .map(|r| crate::numkernel::dot(self.projection.row(r), z))
            .collect()
    }
}

fn stream_topics(cfg: &GenConfig, rng: &mut Rng) -> Vec<u32> {
    let mut out = Vec::with_capacity(cfg.segments_per_stream);
    let mut pool: Vec<u32> = (0..cfg.num_topics as u32).collect();
    while out.len() < cfg.segments_per_stream {
        let take = (cfg.segments_per_stream - out.len()).min(pool.len());
        for i in 0..take {
            let j = i + rng.below_usize(pool.len() - i);
            pool.swap(i, j);
            out.push(pool[i]);
        }
    }
    out
}

fn sample_tokens(range: std::ops::Range<u32>, n: usize, rng: &mut Rng) -> Narration {
    let width = u64::from(range.end - range.start);
    Narration((0..n).map(|_| range.start + rng.below(width) as u32).collect())
}

fn generate_stream(cfg: &GenConfig, world: &World, id: usize) -> Stream {
    let mut rng = Rng::new(derive_seed(cfg.seed, id as u64 + 1));
    let len = cfg.segments_per_stream;
    let topics = stream_topics(cfg, &mut rng);
    let mut timestamps = Vec::with_capacity(len);
    let mut t = rng.uniform_range(0.0, 5.0);
    for _ in 0..len {
        timestamps.push(t);
        t += rng.uniform_range(2.0, 8.0);
    }

    let mut segments = Vec::with_capacity(len);
    for j in 0..len {
        let topic = topics[j] as usize;
        let clip: Vec<f64> = world
            .clean_clip(topic)
            .into_iter()
            .map(|v| v + cfg.noise_sigma * rng.normal())
            .collect();
        let irrelevant = rng.bernoulli(cfg.p_irrelevant);
        let (source, narration, aligned_topic) = if irrelevant {
            let tokens = sample_tokens(cfg.noise_tokens(), cfg.tokens_per_narration, &mut rng);
            (None, tokens, cfg.noise_class())
        } else {
            let source = if rng.bernoulli(cfg.p_aligned) {
                j
            } else {
                misaligned_source(j, len, cfg.max_offset, &mut rng)
            };
            let narrated = topics[source];
            let tokens = sample_tokens(
                cfg.topic_tokens(narrated as usize),
                cfg.tokens_per_narration,
                &mut rng,
            );
            (Some(source), tokens, narrated)
        };
        segments.push(Segment {
            timestamp: timestamps[j],
            topic_id: topics[j],
            clip: ClipFeature(clip),
            narration,
            aligned_topic_id: aligned_topic,
            is_irrelevant: irrelevant,
            source_index: source,
        });
    }
    Stream { id, segments }
}

/// Uniform over nonzero offsets in `[-max_offset, max_offset]` that stay inside the stream.
fn misaligned_source(j: usize, len: usize, max_offset: usize, rng: &mut Rng) -> usize {
    let lo = j.saturating_sub(max_offset);
    let hi = (j + max_offset).min(len - 1);
    let choices = hi - lo;
    let pick = lo + rng.below_usize(choices);
    if pick >= j {
        pick + 1
    } else {
        pick
    }
}

pub fn generate_corpus(cfg: &GenConfig) -> Result<Corpus> {
    cfg.validate()?;
    let world = World::new(cfg);
    let streams = (0..cfg.num_streams)
        .map(|id| generate_stream(cfg, &world, id))
        .collect();
    Ok(Corpus {
        format: CORPUS_FORMAT.to_string(),
        version: CORPUS_VERSION,
        config: cfg.clone(),
        streams,
    })
}

/// Per stream, per segment ground truth.
pub fn ground_truth(corpus: &Corpus) -> Vec<Vec<GroundTruth>> {
    corpus
        .streams
        .iter()
        .map(|s| {
            s.segments
                .iter()
                .map(|seg| GroundTruth {
                    matched_segment: seg.source_index,
                    aligned_topic_id: seg.aligned_topic_id,
                    clip_topic_id: seg.topic_id,
                })
                .collect()
        })
        .collect()
}

impl Corpus {
    /// Number of streams reserved for evaluation: the last tenth by id, at least one.
    pub fn heldout_count(&self) -> usize {
        let n = self.streams.len();
        if n < 2 {
            return 0;
        }
        n.div_ceil(10).clamp(1, n - 1)
    }

    pub fn train_streams(&self) -> &[Stream] {
        &self.streams[..self.streams.len() - self.heldout_count()]
    }

    pub fn heldout_streams(&self) -> &[Stream] {
        &self.streams[self.streams.len() - self.heldout_count()..]
    }

    pub fn stats(&self) -> CorpusStats {
        let mut segments = 0usize;
        let mut irrelevant = 0usize;
        let mut misaligned = 0usize;
        for seg in self.streams.iter().flat_map(|s| s.segments.iter().enumerate()) {
            segments += 1;
            match seg.1.source_index {
                None => irrelevant += 1,
                Some(src) if src != seg.0 => misaligned += 1,
                Some(_) => {}
            }
        }
        let relevant = segments - irrelevant;
        CorpusStats {
            segments,
            irrelevant_fraction: ratio(irrelevant, segments),
            misaligned_fraction: ratio(misaligned, relevant),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != CORPUS_FORMAT {
            return Err(Error::Format(format!("not a corpus file (format {:?})", self.format)));
        }
        if self.version != CORPUS_VERSION {
            return Err(Error::VersionMismatch {
                found: self.version,
                expected: CORPUS_VERSION,
            });
        }
        self.config.validate()?;
        for s in &self.streams {
            if s.segments.is_empty() {
                return Err(Error::Format(format!("stream {} has no segments", s.id)));
            }
            if s.segments.windows(2).any(|w| w[1].timestamp <= w[0].timestamp) {
                return Err(Error::Format(format!("stream {} timestamps not increasing", s.id)));
            }
            for seg in &s.segments {
                if seg.clip.0.len() != self.config.clip_dim {
                    return Err(Error::Format(format!("stream {} clip width", s.id)));
                }
                if seg.narration.0.iter().any(|&t| t as usize >= self.config.vocab_size) {
                    return Err(Error::Format(format!("stream {} token out of vocabulary", s.id)));
                }
                if seg.source_index.is_some_and(|i| i >= s.segments.len()) {
                    return Err(Error::Format(format!("stream {} source index", s.id)));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let corpus: Corpus = serde_json::from_str(&text)?;
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        write_atomic(path, &bytes)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
