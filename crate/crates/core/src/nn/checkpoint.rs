//! Binary parameter checkpoints.
//!
//! All integers are little-endian `u32`, all reals little-endian IEEE-754
//! `f64`, so a save/load round trip is bit-exact.
//!
//! ```text
//! file    := magic "PRIOCKPT" (8 bytes), version u32 (= 1), n_agents u32, agent*
//! agent   := actor:mlp, with_priority u8, control_dim u32,
//!            n_log_std u32, log_std f64*, critic:mlp
//! mlp     := n_sizes u32, size u32 * n_sizes,
//!            for each layer k: weights f64 * (sizes[k+1] * sizes[k]) row-major,
//!                              bias f64 * sizes[k+1]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::mlp::Mlp;
use super::policy::GaussianPolicyHead;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PRIOCKPT";
pub const VERSION: u32 = 1;

/// Parameters of one agent: actor network, policy head, critic network.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentParameters {
    pub actor: Mlp,
    pub head: GaussianPolicyHead,
    pub critic: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub agents: Vec<AgentParameters>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn encode_mlp(out: &mut Vec<u8>, mlp: &Mlp) {
    put_u32(out, mlp.layer_sizes().len() as u32);
    for &s in mlp.layer_sizes() {
        put_u32(out, s as u32);
    }
    for (w, b) in mlp.weights().iter().zip(mlp.biases()) {
        w.iter().for_each(|&v| put_f64(out, v));
        b.iter().for_each(|&v| put_f64(out, v));
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "unexpected end of data at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn mlp(&mut self) -> Result<Mlp> {
        let n_sizes = self.u32()? as usize;
        if n_sizes > 64 {
            return Err(Error::Checkpoint(format!("implausible layer count {n_sizes}")));
        }
        let sizes = (0..n_sizes)
            .map(|_| self.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let data = self.f64s(fan_in * fan_out)?;
            weights
                .push(Array2::from_shape_vec((fan_out, fan_in), data).map_err(|e| Error::Checkpoint(e.to_string()))?);
            biases.push(Array1::from_vec(self.f64s(fan_out)?));
        }
        Mlp::from_parts(&sizes, weights, biases).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.agents.len() as u32);
        for agent in &self.agents {
            encode_mlp(&mut out, &agent.actor);
            out.push(u8::from(agent.head.with_priority()));
            put_u32(&mut out, agent.head.control_dim() as u32);
            put_u32(&mut out, agent.head.log_std().len() as u32);
            agent.head.log_std().iter().for_each(|&v| put_f64(&mut out, v));
            encode_mlp(&mut out, &agent.critic);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(Error::Checkpoint("missing PRIOCKPT magic".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let n_agents = cur.u32()? as usize;
        let mut agents = Vec::with_capacity(n_agents.min(1024));
        for i in 0..n_agents {
            let ctx = |e: Error| e.context(format!("agent {i}"));
            let actor = cur.mlp().map_err(ctx)?;
            let with_priority = match cur.u8()? {
                0 => false,
                1 => true,
                other => return Err(Error::Checkpoint(format!("agent {i}: bad priority flag {other}"))),
            };
            let control_dim = cur.u32()? as usize;
            let n_log_std = cur.u32()? as usize;
            let log_std = cur.f64s(n_log_std)?;
            let head = GaussianPolicyHead::from_log_std(control_dim, with_priority, log_std)
                .map_err(|e| Error::Checkpoint(format!("agent {i}: {e}")))?;
            if actor.output_dim() != head.dim() {
                return Err(Error::Checkpoint(format!(
                    "agent {i}: actor emits {} values, head expects {}",
                    actor.output_dim(),
                    head.dim()
                )));
            }
            let critic = cur.mlp().map_err(ctx)?;
            agents.push(AgentParameters { actor, head, critic });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last agent",
                bytes.len() - cur.pos
            )));
        }
        Ok(Self { agents })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file =
            std::fs::File::create(path).map_err(|e| Error::Io(format!("cannot create {}: {e}", path.display())))?;
        file.write_all(&self.to_bytes())
            .map_err(|e| Error::Io(format!("cannot write {}: {e}", path.display())))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::Io(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| e.context(path.display()))
    }
}
