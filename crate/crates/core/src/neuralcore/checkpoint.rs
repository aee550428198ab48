//! Binary checkpoint container.
//!
//! Layout (all integers little-endian `u32`):
//! `SEMLOGCK` magic, format version, kind string, JSON header with every
//! hyper-parameter, tensor count, then per tensor its name, rows, cols and
//! `rows · cols` little-endian `f64` values.

use std::io::{Read, Write};

use super::{NnError, Param};

const MAGIC: &[u8; 8] = b"SEMLOGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawCheckpoint {
    pub version: u32,
    pub kind: String,
    pub header: String,
    pub tensors: Vec<Tensor>,
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<(), NnError> {
    let v = u32::try_from(v).map_err(|_| NnError::Checkpoint(format!("{v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_str<W: Write>(w: &mut W, s: &str) -> Result<(), NnError> {
    put_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_str<R: Read>(r: &mut R, what: &str) -> Result<String, NnError> {
    let len = get_u32(r)?;
    if len > 1 << 28 {
        return Err(NnError::Checkpoint(format!(
            "{what} length {len} is implausible"
        )));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| NnError::Checkpoint(format!("{what} is not UTF-8")))
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    kind: &str,
    header: &str,
    params: &[&Param],
) -> Result<(), NnError> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    put_str(&mut w, kind)?;
    put_str(&mut w, header)?;
    put_u32(&mut w, params.len())?;
    for p in params {
        put_str(&mut w, &p.name)?;
        put_u32(&mut w, p.rows)?;
        put_u32(&mut w, p.cols)?;
        for v in &p.value {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<RawCheckpoint, NnError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint(
            "bad magic; not a checkpoint file".into(),
        ));
    }
    let version = get_u32(&mut r)? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let kind = get_str(&mut r, "kind")?;
    let header = get_str(&mut r, "header")?;
    let count = get_u32(&mut r)?;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = get_str(&mut r, "tensor name")?;
        let rows = get_u32(&mut r)?;
        let cols = get_u32(&mut r)?;
        let n = rows
            .checked_mul(cols)
            .filter(|n| *n <= 1 << 28)
            .ok_or_else(|| NnError::Checkpoint(format!("tensor {name} is implausibly large")))?;
        let mut values = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            values.push(f64::from_le_bytes(b));
        }
        tensors.push(Tensor {
            name,
            rows,
            cols,
            values,
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(NnError::Checkpoint(
            "trailing bytes after last tensor".into(),
        ));
    }
    Ok(RawCheckpoint {
        version,
        kind,
        header,
        tensors,
    })
}

/// Copies stored tensors into freshly constructed parameters, validating
/// names, order, shapes and finiteness.
pub fn restore_params(params: Vec<&mut Param>, tensors: &[Tensor]) -> Result<(), NnError> {
    if params.len() != tensors.len() {
        return Err(NnError::Checkpoint(format!(
            "expected {} tensors, found {}",
            params.len(),
            tensors.len()
        )));
    }
    for (p, t) in params.into_iter().zip(tensors) {
        if p.name != t.name {
            return Err(NnError::Checkpoint(format!(
                "expected tensor {}, found {}",
                p.name, t.name
            )));
        }
        if p.rows != t.rows || p.cols != t.cols {
            return Err(NnError::Checkpoint(format!(
                "tensor {} has shape {}x{}, expected {}x{}",
                t.name, t.rows, t.cols, p.rows, p.cols
            )));
        }
        if t.values.iter().any(|v| !v.is_finite()) {
            return Err(NnError::Checkpoint(format!(
                "tensor {} has non-finite values",
                t.name
            )));
        }
        p.value.copy_from_slice(&t.values);
        p.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_shape_validation() {
        let a = Param::from_values("a", 2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 3.25]);
        let b = Param::from_values("b", 1, 3, vec![0.1, 0.2, 0.3]);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "test", "{\"x\":1}", &[&a, &b]).unwrap();
        let raw = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(raw.kind, "test");
        assert_eq!(raw.header, "{\"x\":1}");
        let mut a2 = Param::zeros("a", 2, 2);
        let mut b2 = Param::zeros("b", 1, 3);
        restore_params(vec![&mut a2, &mut b2], &raw.tensors).unwrap();
        assert_eq!(
            a2.value.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            a.value.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(b2, b);

        let mut wrong = Param::zeros("b", 3, 1);
        let mut a3 = Param::zeros("a", 2, 2);
        assert!(restore_params(vec![&mut a3, &mut wrong], &raw.tensors).is_err());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        assert!(read_checkpoint(&b"NOTACKPT"[..]).is_err());
        let a = Param::zeros("a", 1, 1);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "k", "{}", &[&a]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}
