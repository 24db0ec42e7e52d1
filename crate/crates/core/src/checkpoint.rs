//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic     8 bytes   "MILNCECK"
//! version   u32       CHECKPOINT_VERSION
//! config    u32 byte length, then UTF-8 JSON of the training config
//! step      u64       completed updates
//! window    f64 loss sum, u64 count of updates since the last metrics record
//! rng       32-byte ChaCha key, u64 stream id, u128 word position
//! adam      u64 t, f64 beta1, f64 beta2, f64 eps
//! count     u32       number of arrays
//! array     u32 name length, name bytes (UTF-8),
//!           u32 rows, u32 cols, rows·cols f64 values in row-major order
//! ```
//!
//! Array names are `param/<tensor>` for every encoder tensor (the frozen
//! word table included) and `adam.m/<tensor>`, `adam.v/<tensor>` for each
//! trainable one. Attention heads are present iff `param/video.wa` is.

use std::collections::BTreeMap;
use std::path::Path;

use crate::corpus::write_atomic;
use crate::encoders::{EncoderParams, Projection, TextEncoderParams, VideoEncoderParams};
use crate::error::{Error, Result};
use crate::numkernel::Matrix;
use crate::rng::RngState;
use crate::trainer::{AdamState, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MILNCECK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: EncoderParams,
    pub adam: AdamState,
    pub rng: RngState,
    pub step: u64,
    /// Loss sum and update count not yet folded into a metrics record, so a
    /// resumed run reports the same metrics as an uninterrupted one.
    pub metrics_window: (f64, u64),
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn array(&mut self, name: &str, m: &Matrix) {
        self.bytes(name.as_bytes());
        self.u32(m.rows() as u32);
        self.u32(m.cols() as u32);
        for &v in m.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.bytes(serde_json::to_string(&self.config)?.as_bytes());
        w.u64(self.step);
        w.f64(self.metrics_window.0);
        w.u64(self.metrics_window.1);
        w.0.extend_from_slice(&self.rng.key);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.u64(self.adam.t);
        w.f64(self.adam.beta1);
        w.f64(self.adam.beta2);
        w.f64(self.adam.eps);

        let all = self.params.all_tensors();
        let trainable = self.params.trainable();
        w.u32((all.len() + 2 * trainable.len()) as u32);
        for (name, m) in &all {
            w.array(&format!("param/{name}"), m);
        }
        for (i, (name, _)) in trainable.iter().enumerate() {
            w.array(&format!("adam.m/{name}"), &self.adam.m[i]);
            w.array(&format!("adam.v/{name}"), &self.adam.v[i]);
        }
        Ok(w.0)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let config: TrainConfig = serde_json::from_slice(r.bytes()?)?;
        let step = r.u64()?;
        let metrics_window = (r.f64()?, r.u64()?);
        let key: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let rng = RngState {
            key,
            stream: r.u64()?,
            word_pos: r.u128()?,
        };
        let t = r.u64()?;
        let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);

        let count = r.u32()?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let name = String::from_utf8(r.bytes()?.to_vec())
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Format(format!("array {name} too large")))?;
            let mut data = Vec::with_capacity(n.min(buf.len() / 8));
            for _ in 0..n {
                data.push(r.f64()?);
            }
            arrays.insert(name, Matrix::from_vec(rows, cols, data)?);
        }
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }

        let has_heads = arrays.contains_key("param/video.wa");
        let mut take = |name: &str| -> Result<Matrix> {
            arrays
                .remove(name)
                .ok_or_else(|| Error::Format(format!("missing array {name}")))
        };
        let mut proj = |w: &str, b: &str| -> Result<Projection> {
            Ok(Projection {
                weight: take(w)?,
                bias: take(b)?,
            })
        };
        let video = VideoEncoderParams {
            trunk: proj("param/video.w1", "param/video.b1")?,
            out: proj("param/video.w2", "param/video.b2")?,
            head: if has_heads {
                Some(proj("param/video.wa", "param/video.ba")?)
            } else {
                None
            },
        };
        let text_trunk = proj("param/text.w1", "param/text.b1")?;
        let text_out = proj("param/text.w2", "param/text.b2")?;
        let text_head = if has_heads {
            Some(proj("param/text.wa", "param/text.ba")?)
        } else {
            None
        };
        let embedding = take("param/text.embedding")?;
        let params = EncoderParams {
            video,
            text: TextEncoderParams {
                embedding,
                trunk: text_trunk,
                out: text_out,
                head: text_head,
                max_words: config.encoder.max_words,
            },
        };
        if params.dims() != config.encoder {
            return Err(Error::Format("tensor shapes disagree with the config echo".into()));
        }

        let names: Vec<&str> = params.trainable().iter().map(|(n, _)| *n).collect();
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for name in &names {
            m.push(take(&format!("adam.m/{name}"))?);
            v.push(take(&format!("adam.v/{name}"))?);
        }
        if let Some(extra) = arrays.keys().next() {
            return Err(Error::Format(format!("unexpected array {extra}")));
        }
        Ok(Checkpoint {
            config,
            params,
            adam: AdamState {
                t,
                beta1,
                beta2,
                eps,
                m,
                v,
            },
            rng,
            step,
            metrics_window,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
