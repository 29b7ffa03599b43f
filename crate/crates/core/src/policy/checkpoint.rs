//! Binary checkpoint format: magic, format version, architecture
//! descriptor, vocabulary table, then the flat parameter array as
//! little-endian 64-bit reals. Round-trips exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::policy::model::{ModelConfig, PolicyModel};
use crate::vocab::Vocab;

const MAGIC: &[u8; 4] = b"QXPM";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, model: &PolicyModel, vocab: &Vocab) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let c = &model.cfg;
    for dim in [
        c.vocab_size,
        c.d_model,
        c.n_heads,
        c.n_layers,
        c.d_ff,
        c.context_len,
    ] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    w.write_all(&(vocab.len() as u32).to_le_bytes())?;
    for tok in vocab.tokens() {
        let bytes = tok.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
    }
    w.write_all(&(model.params.len() as u64).to_le_bytes())?;
    for p in &model.params {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load_checkpoint(path: &Path) -> Result<(PolicyModel, Vocab)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::CheckpointVersion(format!(
            "{}: not a policy checkpoint",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::CheckpointVersion(format!(
            "{}: format version {version}, expected {VERSION}",
            path.display()
        )));
    }
    let dims: Vec<usize> = (0..6)
        .map(|_| read_u32(&mut r).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let cfg = ModelConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_heads: dims[2],
        n_layers: dims[3],
        d_ff: dims[4],
        context_len: dims[5],
    };
    let n_tokens = read_u32(&mut r)? as usize;
    let mut tokens = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        let len = read_u32(&mut r)? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        tokens.push(
            String::from_utf8(buf)
                .map_err(|e| Error::Schema(format!("invalid vocab token: {e}")))?,
        );
    }
    let vocab = Vocab::from_tokens(tokens);
    if vocab.len() != cfg.vocab_size {
        return Err(Error::Schema(format!(
            "vocabulary size {} != model vocab_size {}",
            vocab.len(),
            cfg.vocab_size
        )));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let n_params = u64::from_le_bytes(b8) as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        r.read_exact(&mut b8)?;
        params.push(f64::from_le_bytes(b8));
    }
    let model = PolicyModel::from_params(cfg, params)?;
    Ok((model, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::model::Init;
    use tempfile::tempdir;

    fn tiny() -> (PolicyModel, Vocab) {
        let vocab = Vocab::build(["aa", "bb", "cc"].iter().map(|s| s.to_string()));
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            context_len: 16,
        };
        (
            PolicyModel::new(cfg, Init::Gaussian { std: 0.02 }, 9).unwrap(),
            vocab,
        )
    }

    #[test]
    fn round_trip_exact() {
        let (m, v) = tiny();
        let dir = tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        save_checkpoint(&p, &m, &v).unwrap();
        let (m2, v2) = load_checkpoint(&p).unwrap();
        assert_eq!(m.cfg, m2.cfg);
        assert_eq!(m.params, m2.params);
        assert_eq!(v, v2);
        // save again -> identical bytes
        let p2 = dir.path().join("model2.ckpt");
        save_checkpoint(&p2, &m2, &v2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_magic_is_version_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("junk.ckpt");
        std::fs::write(&p, b"NOPEnopenope").unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(Error::CheckpointVersion(_))
        ));
    }
}
