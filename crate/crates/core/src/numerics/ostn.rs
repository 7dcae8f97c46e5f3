//! `OSTN` tensor files: magic `OSTN`, u32-LE rank, rank × u32-LE dims, then
//! the f32-LE payload in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{NumericsError, Result, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"OSTN";

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = bytes;
    let mut word = [0u8; 4];
    let mut next = |r: &mut &[u8], what: &str| -> Result<[u8; 4]> {
        r.read_exact(&mut word)
            .map_err(|_| NumericsError::Format(format!("truncated {what}")))?;
        Ok(word)
    };
    if &next(&mut r, "magic")? != MAGIC {
        return Err(NumericsError::Format("bad magic".into()));
    }
    let rank = u32::from_le_bytes(next(&mut r, "rank")?) as usize;
    if rank == 0 || rank > 16 {
        return Err(NumericsError::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(next(&mut r, "dims")?) as usize);
    }
    let n: usize = shape.iter().product();
    if r.len() != 4 * n {
        return Err(NumericsError::Format(format!(
            "payload has {} bytes, shape {:?} needs {}",
            r.len(),
            shape,
            4 * n
        )));
    }
    let data = r
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn write<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Tensor<f32>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_f64(&[2, 1], &[1.0, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"OSTN");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"NOPE").is_err());
        let mut b = encode(&Tensor::<f32>::zeros(&[3]));
        b.pop();
        assert!(decode(&b).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(dims in proptest::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let t = Tensor::<f32>::randn(&dims, 1.0, &mut rng);
            prop_assert_eq!(decode(&encode(&t)).unwrap(), t);
        }
    }
}
