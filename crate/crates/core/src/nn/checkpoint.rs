//! Checkpoint byte layout (all integers little-endian):
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 8 | magic `RNADOTNN` |
//! | 8 | 4 | format version, `u32` (currently 1) |
//! | 12 | 4 | spec length `L` in bytes, `u32` |
//! | 16 | L | [`ModelSpec`] text, UTF-8 |
//! | 16+L | 8 | parameter count `P`, `u64` |
//! | 24+L | 8P | parameters as `f64`, layer order, weights before bias |
//!
//! Nothing follows the parameter block.

use super::{ModelSpec, NnError};

pub const MAGIC: &[u8; 8] = b"RNADOTNN";
pub const VERSION: u32 = 1;

pub(crate) fn encode(spec: &ModelSpec, params: &[&[f64]]) -> Vec<u8> {
    let spec_text = spec.to_string();
    let count: usize = params.iter().map(|p| p.len()).sum();
    let mut out = Vec::with_capacity(24 + spec_text.len() + 8 * count);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(spec_text.len() as u32).to_le_bytes());
    out.extend_from_slice(spec_text.as_bytes());
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for v in params.iter().flat_map(|p| p.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn decode(bytes: &[u8]) -> Result<(ModelSpec, Vec<f64>), NnError> {
    let bad = |m: &str| NnError::Checkpoint(m.to_string());
    let mut rest = bytes;
    let mut take = |n: usize| -> Result<&[u8], NnError> {
        if rest.len() < n {
            return Err(bad("truncated checkpoint"));
        }
        let (head, tail) = rest.split_at(n);
        rest = tail;
        Ok(head)
    };
    if take(8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let spec_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let spec_text = std::str::from_utf8(take(spec_len)?).map_err(|_| bad("spec is not UTF-8"))?;
    let spec: ModelSpec = spec_text.parse()?;
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let expected: usize = spec.param_sizes()?.iter().sum();
    if count != expected {
        return Err(NnError::Checkpoint(format!(
            "spec needs {expected} parameters, checkpoint has {count}"
        )));
    }
    let raw = take(count.checked_mul(8).ok_or_else(|| bad("parameter count overflow"))?)?;
    let values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if !rest.is_empty() {
        return Err(bad("trailing bytes after parameters"));
    }
    Ok((spec, values))
}

#[cfg(test)]
mod tests {
    use super::super::Model;
    use super::*;

    #[test]
    fn save_load_is_bitwise() {
        let m = Model::init(&ModelSpec::minivgg(16), 3).unwrap();
        let bytes = m.save();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Model::load(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.save(), bytes);
    }

    #[test]
    fn layout_of_a_tiny_model() {
        let m = Model::init(&ModelSpec::linear(1), 0).unwrap();
        let bytes = m.save();
        let spec = b"side=1;flatten,dense(2),softmax_xent";
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &(spec.len() as u32).to_le_bytes());
        assert_eq!(&bytes[16..16 + spec.len()], spec);
        let off = 16 + spec.len();
        assert_eq!(&bytes[off..off + 8], &4u64.to_le_bytes());
        assert_eq!(bytes.len(), off + 8 + 4 * 8);
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let bytes = Model::init(&ModelSpec::linear(2), 0).unwrap().save();
        assert!(Model::load(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Model::load(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Model::load(&magic).is_err());
        let mut version = bytes.clone();
        version[8] = 2;
        assert!(Model::load(&version).is_err());
        assert!(Model::load(&[]).is_err());
    }
}
