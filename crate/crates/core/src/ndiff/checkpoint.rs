//! Binary parameter checkpoints.
//!
//! ```text
//! "SBNDIFF1" | input_dim u32 | hidden u32 | depth u32 | activation u32
//!            | count u64 | count x f64      (all little-endian)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Activation, ControlField, NetShape};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"SBNDIFF1";

pub fn write_checkpoint<W: Write>(field: &ControlField, mut w: W) -> Result<()> {
    let s = field.shape();
    w.write_all(MAGIC)?;
    for v in [s.input_dim, s.hidden, s.depth] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&field.activation().id().to_le_bytes())?;
    w.write_all(&(field.params().len() as u64).to_le_bytes())?;
    for p in field.params() {
        w.write_all(&p.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ControlField> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a network checkpoint".into()));
    }
    let input_dim = read_u32(&mut r)? as usize;
    let hidden = read_u32(&mut r)? as usize;
    let depth = read_u32(&mut r)? as usize;
    let act_id = read_u32(&mut r)?;
    let activation = Activation::from_id(act_id)
        .ok_or_else(|| Error::Format(format!("unknown activation id {act_id}")))?;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;
    let shape = NetShape {
        input_dim,
        hidden,
        depth,
    };
    if input_dim < 2 || hidden == 0 || count != shape.num_params() {
        return Err(Error::Format(format!(
            "header {input_dim}x{hidden}x{depth} inconsistent with {count} parameters"
        )));
    }
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut b8)?;
        params.push(f64::from_le_bytes(b8));
    }
    ControlField::from_params(shape, activation, params)
}

pub fn save_checkpoint(field: &ControlField, path: &Path) -> Result<()> {
    write_checkpoint(field, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<ControlField> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut f = ControlField::new(NetShape::new(2, 7, 3), Activation::Softplus, 12);
        f.params_mut()[3] = f64::MIN_POSITIVE;
        *f.output_bias_mut() = -1.0 / 3.0;
        let mut buf = Vec::new();
        write_checkpoint(&f, &mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 16 + 8 + 8 * f.params().len());
        let g = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(g.shape(), f.shape());
        assert_eq!(g.activation(), f.activation());
        let a: Vec<u64> = f.params().iter().map(|p| p.to_bits()).collect();
        let b: Vec<u64> = g.params().iter().map(|p| p.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(
            read_checkpoint(&b"NOTMAGIC\0\0\0\0"[..]),
            Err(Error::Format(_))
        ));
        let f = ControlField::zeros(NetShape::new(1, 2, 1), Activation::Relu);
        let mut buf = Vec::new();
        write_checkpoint(&f, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_checkpoint(buf.as_slice()), Err(Error::Io(_))));
    }
}
