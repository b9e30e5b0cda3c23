//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! magic    8 bytes  "AGCKPT\0\0"
//! version  u32
//! hash     32 bytes SHA-256 of (model json || metadata)
//! model    u32 length + UTF-8 JSON of the model config
//! metadata u32 length + UTF-8 (free-form, the harness stores its run config)
//! count    u32
//! count x { name: u32 length + UTF-8, rows: u32, cols: u32, rows*cols f64 }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ActorCritic, ModelConfig, NeuralError, ParamStore, Result, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AGCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub metadata: String,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_model(net: &ActorCritic, metadata: impl Into<String>) -> Self {
        Self { model: net.config().clone(), metadata: metadata.into(), params: net.params().clone() }
    }

    /// Rebuilds the network with the stored weights.
    pub fn into_model(self) -> Result<ActorCritic> {
        // Initial values are overwritten; any rng will do.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut net = ActorCritic::new(self.model, &mut rng)?;
        net.load_params(&self.params)?;
        Ok(net)
    }
}

pub fn config_hash(model_json: &str, metadata: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(model_json.as_bytes());
    h.update(metadata.as_bytes());
    h.finalize().into()
}

fn bad<T>(msg: impl Into<String>) -> Result<T> {
    Err(NeuralError::Checkpoint(msg.into()))
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).or_else(|_| bad("length does not fit in u32"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let model_json = serde_json::to_string(&ck.model).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&config_hash(&model_json, &ck.metadata));
    put_str(&mut out, &model_json)?;
    put_str(&mut out, &ck.metadata)?;
    put_u32(&mut out, ck.params.len())?;
    for (name, t) in ck.params.names().iter().zip(ck.params.values()) {
        put_str(&mut out, name)?;
        put_u32(&mut out, t.rows())?;
        put_u32(&mut out, t.cols())?;
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return bad("truncated file");
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).or_else(|_| bad("invalid UTF-8"))
    }
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return bad("not a checkpoint file");
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return bad(format!("unsupported version {version}"));
    }
    let hash: [u8; 32] = c.take(32)?.try_into().expect("32 bytes");
    let model_json = c.string()?;
    let metadata = c.string()?;
    if config_hash(&model_json, &metadata) != hash {
        return bad("config hash mismatch");
    }
    let model: ModelConfig = serde_json::from_str(&model_json).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
    let count = c.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = c.string()?;
        let rows = c.u32()?;
        let cols = c.u32()?;
        let bytes = c.take(rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(|| NeuralError::Checkpoint("tensor too large".into()))?)?;
        let data = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        params.add(name, Tensor::from_vec(rows, cols, data)?);
    }
    if c.pos != buf.len() {
        return bad("trailing bytes");
    }
    Ok(Checkpoint { model, metadata, params })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode(ck)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn net(seed: u64) -> ActorCritic {
        let cfg = ModelConfig { d_raw: 4, stack_len: 2, d_model: 8, layers: 1, heads: 2, d_ff: 8, d_out: 4, ..ModelConfig::default() };
        ActorCritic::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let a = net(1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &Checkpoint::from_model(&a, "{\"k\":1}")).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.metadata, "{\"k\":1}");
        let b = ck.into_model().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_vec(3, 8, (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let (pa, va) = a.evaluate(&x).unwrap();
        let (pb, vb) = b.evaluate(&x).unwrap();
        for (p, q) in pa.iter().flatten().zip(pb.iter().flatten()) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
        for (p, q) in va.iter().zip(&vb) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&Checkpoint::from_model(&net(2), "meta")).unwrap();
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut flipped = bytes.clone();
        flipped[60] ^= 1;
        assert!(decode(&flipped).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(decode(&magic).is_err());
    }

    #[test]
    fn mismatched_parameters_are_rejected() {
        let mut a = net(3);
        let other = ModelConfig { d_model: 4, ..a.config().clone() };
        let b = ActorCritic::new(other, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(a.load_params(b.params()).is_err());
    }
}
