use std::path::Path;

use crate::error::{Result, SpnError};
use crate::graph::{compile, parse_structure, ExecutionPlan, NetworkSpec};
use crate::leaves::GaussianLeafParams;
use crate::params::{AccumulatorSpace, LeafParams, ModelParams, SumWeights};
use crate::training::TrainMode;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPNC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained model: structure text, parameters and the run's seed and mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: ModelParams,
    pub seed: u64,
    pub mode: TrainMode,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn err(&self, message: impl Into<String>) -> SpnError {
        SpnError::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n * 8)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION as usize);
        w.0.extend_from_slice(&self.seed.to_le_bytes());
        w.u32(self.mode.code() as usize);
        let text = self.spec.to_string();
        w.u32(text.len());
        w.0.extend_from_slice(text.as_bytes());
        match &self.params.leaf {
            LeafParams::Gaussian(g) => {
                w.u32(0);
                w.u32(g.height);
                w.u32(g.width);
                w.u32(g.components);
                w.f64s(&g.means);
                w.f64s(&g.variances);
            }
            LeafParams::Indicator { arity } => {
                w.u32(1);
                w.u32(*arity);
            }
        }
        w.u32(self.params.sums.len());
        for s in &self.params.sums {
            w.u32(s.space.code() as usize);
            w.u32(s.outputs);
            w.u32(s.inputs);
            w.f64s(s.accumulators());
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != CHECKPOINT_MAGIC {
            r.pos = 0;
            return Err(r.err("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(format!("unsupported checkpoint version {version}")));
        }
        let seed = r.u64()?;
        let mode_code = r.u32()?;
        let mode = TrainMode::from_code(mode_code).ok_or_else(|| r.err(format!("unknown mode code {mode_code}")))?;
        let len = r.u32()? as usize;
        let raw = r.take(len)?.to_vec();
        let text = String::from_utf8(raw).map_err(|_| r.err("structure text is not utf-8"))?;
        let spec = parse_structure(&text)?;
        let leaf = match r.u32()? {
            0 => {
                let (h, w, k) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
                let means = r.f64s(h * w * k)?;
                let variances = r.f64s(h * w * k)?;
                LeafParams::Gaussian(GaussianLeafParams::new(h, w, k, means, variances)?)
            }
            1 => LeafParams::Indicator {
                arity: r.u32()? as usize,
            },
            other => return Err(r.err(format!("unknown leaf kind {other}"))),
        };
        let slots = r.u32()? as usize;
        let mut sums = Vec::with_capacity(slots);
        for _ in 0..slots {
            let code = r.u32()?;
            let space =
                AccumulatorSpace::from_code(code).ok_or_else(|| r.err(format!("unknown accumulator space {code}")))?;
            let (outputs, inputs) = (r.u32()? as usize, r.u32()? as usize);
            let accum = r.f64s(outputs * inputs)?;
            sums.push(SumWeights::new(inputs, outputs, space, accum)?);
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after the last sum slot"));
        }
        Ok(Checkpoint {
            spec,
            params: ModelParams { leaf, sums },
            seed,
            mode,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Loads a checkpoint and compiles its structure.
    pub fn load(path: &Path) -> Result<(Self, ExecutionPlan)> {
        let bytes = std::fs::read(path)?;
        let ck = Self::from_bytes(&bytes, path)?;
        let plan = compile(&ck.spec)?;
        ck.params.check(&plan)?;
        Ok((ck, plan))
    }
}
