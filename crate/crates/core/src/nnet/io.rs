//! `NNP1` parameter files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "NNP1"
//! u32 input_side
//! u32 len, bytes   init scheme
//! u64              init seed
//! u32 tensor count
//! per tensor: u32 len, name bytes, u32 ndim, u32 dims...
//! payload: every tensor's f32 values in manifest order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::network::{InitRecord, NetworkParams, NetworkSpec};
use super::tensor::Tensor;
use super::NnetError;

const MAGIC: &[u8; 4] = b"NNP1";

pub fn encode_params(params: &NetworkParams<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.spec.input_side as u32).to_le_bytes());
    let scheme = params.init.scheme.as_bytes();
    out.extend_from_slice(&(scheme.len() as u32).to_le_bytes());
    out.extend_from_slice(scheme);
    out.extend_from_slice(&params.init.seed.to_le_bytes());
    let tensors = params.named_tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| NnetError::BadParamFile("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, NnetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> Result<String, NnetError> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| NnetError::BadParamFile("non-utf8 name".into()))
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<NetworkParams<f32>, NnetError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(NnetError::BadParamFile("bad magic".into()));
    }
    let input_side = cur.u32()?;
    let scheme = cur.string()?;
    let seed = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
    let count = cur.u32()?;
    let mut manifest = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = cur.string()?;
        let ndim = cur.u32()?;
        let shape = (0..ndim).map(|_| cur.u32()).collect::<Result<Vec<_>, _>>()?;
        manifest.push((name, shape));
    }
    if count < 4 || count % 2 != 0 {
        return Err(NnetError::BadParamFile(format!("unexpected tensor count {count}")));
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, shape) in &manifest {
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name.clone(), Tensor::from_vec(shape, data).unwrap()));
    }
    if cur.pos != bytes.len() {
        return Err(NnetError::BadParamFile("trailing bytes".into()));
    }

    let blocks = count / 2 - 1;
    let block_channels: Vec<usize> = (0..blocks).map(|i| tensors[2 * i].1.shape()[0]).collect();
    let num_classes = tensors[count - 1].1.len();
    let spec = NetworkSpec::new(input_side, block_channels, num_classes)?;
    let mut params = NetworkParams::zeros(&spec);
    params.init = InitRecord { scheme, seed };
    let expected: Vec<(String, Vec<usize>)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    for ((want_name, want_shape), (name, t)) in expected.iter().zip(&tensors) {
        if want_name != name || want_shape.as_slice() != t.shape() {
            return Err(NnetError::BadParamFile(format!(
                "tensor {name} {:?} does not fit the architecture (expected {want_name} {want_shape:?})",
                t.shape()
            )));
        }
    }
    for (slot, (_, t)) in params.tensors_mut().into_iter().zip(tensors) {
        *slot = t;
    }
    Ok(params)
}

pub fn save_params(path: &Path, params: &NetworkParams<f32>) -> Result<(), NnetError> {
    std::fs::File::create(path)?.write_all(&encode_params(params))?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<NetworkParams<f32>, NnetError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_params(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn round_trips_bit_exactly(seed in any::<u64>(), blocks in 1usize..4, classes in 2usize..9) {
            let channels: Vec<usize> = (0..blocks).map(|i| 2 + i).collect();
            let spec = NetworkSpec::new(16, channels, classes).unwrap();
            let params = NetworkParams::<f32>::he_uniform(&spec, seed);
            let bytes = encode_params(&params);
            let back = decode_params(&bytes).unwrap();
            prop_assert_eq!(encode_params(&back), bytes);
            prop_assert_eq!(back, params);
        }
    }

    #[test]
    fn rejects_corruption() {
        let spec = NetworkSpec::new(8, vec![2, 3], 4).unwrap();
        let bytes = encode_params(&NetworkParams::he_uniform(&spec, 1));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_params(&bad).is_err());
        assert!(decode_params(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_params(&long).is_err());
    }
}
