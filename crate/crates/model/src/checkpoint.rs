//! Weights on disk: `PXRT`, a format version, a length-prefixed JSON header
//! holding the model config and parameter table, then every parameter as
//! little-endian f64 in table order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use pixelrt_core::params::Block;
use pixelrt_core::tensor::Matrix;
use pixelrt_core::{Error, Result};

use crate::model::{ModelConfig, PixelModel};

const MAGIC: &[u8; 4] = b"PXRT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    block: Block,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    params: Vec<ParamHeader>,
}

pub fn write_checkpoint(model: &PixelModel, mut w: impl Write) -> Result<()> {
    let header = Header {
        config: model.cfg.clone(),
        params: model
            .store
            .entries()
            .iter()
            .map(|e| ParamHeader {
                name: e.name.clone(),
                block: e.block,
                rows: e.value.rows(),
                cols: e.value.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for e in model.store.entries() {
        let mut buf = Vec::with_capacity(e.value.len() * 8);
        for v in e.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn save_checkpoint(model: &PixelModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        write_checkpoint(model, &mut f)?;
        f.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Rebuilds the model described by the checkpoint and loads its weights.
/// With `expect`, the stored config must equal it.
pub fn read_checkpoint(mut r: impl Read, expect: Option<&ModelConfig>) -> Result<PixelModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b)?;
    let len = u64::from_le_bytes(u64b) as usize;
    if len > 64 << 20 {
        return Err(bad(format!("header of {len} bytes is implausible")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("header: {e}")))?;
    if let Some(cfg) = expect {
        if *cfg != header.config {
            return Err(bad("checkpoint was written for a different model config"));
        }
    }
    let mut model = PixelModel::new(header.config)?;
    if header.params.len() != model.store.len() {
        return Err(bad(format!(
            "{} stored parameters, the config builds {}",
            header.params.len(),
            model.store.len()
        )));
    }
    let mut values = Vec::with_capacity(header.params.len());
    for (p, e) in header.params.iter().zip(model.store.entries()) {
        if p.name != e.name || p.block != e.block || (p.rows, p.cols) != e.value.shape() {
            return Err(bad(format!(
                "parameter {} ({}x{}) does not match {} ({}x{})",
                p.name,
                p.rows,
                p.cols,
                e.name,
                e.value.rows(),
                e.value.cols()
            )));
        }
        let mut raw = vec![0u8; p.rows * p.cols * 8];
        r.read_exact(&mut raw)
            .map_err(|_| bad(format!("truncated data for {}", p.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        values.push((p.name.clone(), Matrix::from_vec(p.rows, p.cols, data)));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after the last parameter"));
    }
    model.store.load_values(values)?;
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>, expect: Option<&ModelConfig>) -> Result<PixelModel> {
    let f = fs::File::open(path.as_ref())
        .map_err(|e| bad(format!("{}: {e}", path.as_ref().display())))?;
    read_checkpoint(std::io::BufReader::new(f), expect)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut model = PixelModel::new(tiny_config()).unwrap();
        let id = model.store.ids().next().unwrap();
        model.store.value_mut(id).data_mut()[0] = -0.0;
        model.store.value_mut(id).data_mut()[1] = f64::MIN_POSITIVE;
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice(), Some(&model.cfg)).unwrap();
        let a = model.store.snapshot();
        let b = back.store.snapshot();
        assert_eq!(a.len(), b.len());
        for (k, v) in &a {
            let bits = |x: &Vec<f64>| x.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(v), bits(&b[k]), "{k}");
        }
    }

    #[test]
    fn mismatches_are_load_errors() {
        let model = PixelModel::new(tiny_config()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        let mut other = tiny_config();
        other.decoder.token_count = 4;
        assert!(matches!(read_checkpoint(buf.as_slice(), Some(&other)), Err(Error::Checkpoint(_))));
        assert!(matches!(read_checkpoint(&buf[..buf.len() - 3], None), Err(Error::Checkpoint(_))));
        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(read_checkpoint(extra.as_slice(), None), Err(Error::Checkpoint(_))));
        assert!(matches!(read_checkpoint(&b"NOPE"[..], None), Err(Error::Checkpoint(_))));
    }
}
