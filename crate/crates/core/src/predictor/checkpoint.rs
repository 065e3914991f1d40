//! Versioned binary model checkpoint.
//!
//! ```text
//! magic      8 bytes  "CSEGMLP\0"
//! version    u32
//! layers     u32, then (outputs u32, inputs u32) per layer
//! params     f64 × num_params, per layer weights (column-major) then biases
//! epochs     u64      completed training epochs
//! seed       u64      training seed
//! has_adam   u8
//! adam       step u64, lr, beta1, beta2, epsilon f64, m f64 × n, v f64 × n
//! ```
//!
//! All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::{AdamState, Dense, MlpModel, PredictorError};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"CSEGMLP\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_LAYERS: u32 = 64;
const MAX_WIDTH: u32 = 1 << 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: MlpModel,
    pub epochs_done: u64,
    pub seed: u64,
    pub adam: Option<AdamState>,
}

fn bad(msg: impl Into<String>) -> PredictorError {
    PredictorError::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], PredictorError> {
        if self.buf.len() < n {
            return Err(bad("truncated file"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, PredictorError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, PredictorError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, PredictorError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64, PredictorError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, PredictorError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| bad("size overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let shapes = self.model.layer_shapes();
        out.extend_from_slice(&(shapes.len() as u32).to_le_bytes());
        for (o, i) in shapes {
            out.extend_from_slice(&(o as u32).to_le_bytes());
            out.extend_from_slice(&(i as u32).to_le_bytes());
        }
        for p in self.model.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out.extend_from_slice(&self.epochs_done.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        match &self.adam {
            None => out.push(0),
            Some(a) => {
                out.push(1);
                out.extend_from_slice(&a.step.to_le_bytes());
                for v in [a.lr, a.beta1, a.beta2, a.epsilon]
                    .into_iter()
                    .chain(a.m.iter().copied())
                    .chain(a.v.iter().copied())
                {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PredictorError> {
        let mut r = Reader { buf: bytes };
        if r.take(8).map_err(|_| bad("not a model checkpoint"))? != CHECKPOINT_MAGIC {
            return Err(bad("not a model checkpoint"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let n_layers = r.u32()?;
        if n_layers == 0 || n_layers > MAX_LAYERS {
            return Err(bad(format!("implausible layer count {n_layers}")));
        }
        let mut layers = Vec::new();
        for _ in 0..n_layers {
            let (o, i) = (r.u32()?, r.u32()?);
            if o == 0 || i == 0 || o > MAX_WIDTH || i > MAX_WIDTH {
                return Err(bad(format!("implausible layer shape {o}x{i}")));
            }
            layers.push(Dense::zeros(i as usize, o as usize));
        }
        let mut model = MlpModel { layers };
        let params = r.f64s(model.num_params())?;
        model.set_params(&params)?;
        model.validate()?;
        let epochs_done = r.u64()?;
        let seed = r.u64()?;
        let adam = match r.u8()? {
            0 => None,
            1 => {
                let n = model.num_params();
                let step = r.u64()?;
                let (lr, beta1, beta2, epsilon) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
                Some(AdamState {
                    lr,
                    beta1,
                    beta2,
                    epsilon,
                    step,
                    m: r.f64s(n)?,
                    v: r.f64s(n)?,
                })
            }
            other => return Err(bad(format!("invalid optimizer flag {other}"))),
        };
        if !r.buf.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            model,
            epochs_done,
            seed,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), PredictorError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PredictorError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
