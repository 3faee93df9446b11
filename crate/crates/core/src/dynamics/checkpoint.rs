//! Binary checkpoint format.
//!
//! ```text
//! "SBCK" | version u16 | learner tag u8 | diverged u8 | step u64 | lr f64
//! | entropy_coef f64 | n u64 | params f64 x n | optimizer tag u8
//! | moment vectors f64 x n (0, 1 or 2 of them) | cursor count u32
//! | cursors (key [u8; 32], stream u64, word_pos u128) | sha256 prefix [u8; 8]
//! ```
//! All integers and floats are little-endian.

use sha2::{Digest, Sha256};

use super::learner::LearnerState;
use super::optim::OptState;
use super::task::TaskKind;
use crate::rng::RngCursor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"SBCK";
const VERSION: u16 = 1;

/// Learner state plus the positions of the random streams driving a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: LearnerState,
    pub rng_cursors: Vec<RngCursor>,
}

pub fn serialize_state(state: &LearnerState) -> Vec<u8> {
    Checkpoint {
        state: state.clone(),
        rng_cursors: Vec::new(),
    }
    .to_bytes()
}

pub fn restore_state(bytes: &[u8]) -> Result<LearnerState> {
    Checkpoint::from_bytes(bytes).map(|c| c.state)
}

fn kind_tag(kind: TaskKind) -> u8 {
    match kind {
        TaskKind::Quadratic => 0,
        TaskKind::Logistic => 1,
        TaskKind::MlpClassify => 2,
        TaskKind::BanditPolicy => 3,
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.state;
        let mut out = Vec::with_capacity(64 + 8 * 3 * s.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(kind_tag(s.kind));
        out.push(u8::from(s.diverged));
        out.extend_from_slice(&s.step_index.to_le_bytes());
        out.extend_from_slice(&s.lr.to_le_bytes());
        out.extend_from_slice(&s.entropy_coef.to_le_bytes());
        out.extend_from_slice(&(s.params.len() as u64).to_le_bytes());
        put_floats(&mut out, &s.params);
        let opt_tag = match &s.opt_state {
            OptState::Sgd => 0u8,
            OptState::Momentum { .. } => 1,
            OptState::Adam { .. } => 2,
        };
        out.push(opt_tag);
        for v in s.opt_state.vectors() {
            put_floats(&mut out, v);
        }
        out.extend_from_slice(&(self.rng_cursors.len() as u32).to_le_bytes());
        for c in &self.rng_cursors {
            out.extend_from_slice(&c.key);
            out.extend_from_slice(&c.stream.to_le_bytes());
            out.extend_from_slice(&c.word_pos.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest[..8]);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + MAGIC.len() {
            return Err(Error::Checkpoint(format!("only {} bytes", bytes.len())));
        }
        let (body, check) = bytes.split_at(bytes.len() - 8);
        if &Sha256::digest(body)[..8] != check {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = match r.u8()? {
            0 => TaskKind::Quadratic,
            1 => TaskKind::Logistic,
            2 => TaskKind::MlpClassify,
            3 => TaskKind::BanditPolicy,
            t => return Err(Error::Checkpoint(format!("unknown learner tag {t}"))),
        };
        let diverged = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(Error::Checkpoint(format!("bad diverged flag {v}"))),
        };
        let step_index = u64::from_le_bytes(r.array()?);
        let lr = f64::from_le_bytes(r.array()?);
        let entropy_coef = f64::from_le_bytes(r.array()?);
        let n = u64::from_le_bytes(r.array()?) as usize;
        let params = r.floats(n)?;
        let opt_state = match r.u8()? {
            0 => OptState::Sgd,
            1 => OptState::Momentum {
                velocity: r.floats(n)?,
            },
            2 => OptState::Adam {
                m: r.floats(n)?,
                v: r.floats(n)?,
            },
            t => return Err(Error::Checkpoint(format!("unknown optimizer tag {t}"))),
        };
        let count = u32::from_le_bytes(r.array()?) as usize;
        let mut rng_cursors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            rng_cursors.push(RngCursor {
                key: r.array()?,
                stream: u64::from_le_bytes(r.array()?),
                word_pos: u128::from_le_bytes(r.array()?),
            });
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                body.len() - r.pos
            )));
        }
        Ok(Self {
            state: LearnerState {
                kind,
                params,
                opt_state,
                step_index,
                entropy_coef,
                lr,
                diverged,
            },
            rng_cursors,
        })
    }
}

fn put_floats(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
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
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}
