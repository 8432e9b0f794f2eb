//! Weight checkpoint format.
//!
//! ```text
//! FILLERLM-TENSORS 1\n
//! count <N>\n
//! <name> <ndim> <dim_0> ... <dim_{ndim-1}>\n     (N lines, declaration order)
//! end\n
//! <raw little-endian f64 values of tensor 0, then tensor 1, ...>
//! ```
//!
//! The header is ASCII; names contain no whitespace. The payload length is
//! exactly `8 * Σ numel` bytes with nothing after it.

use std::io::{BufRead, Write};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &str = "FILLERLM-TENSORS 1";

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    let mut header = format!("{MAGIC}\ncount {}\n", store.len());
    for p in store.iter() {
        if p.name.is_empty() || p.name.contains(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("invalid tensor name `{}`", p.name)));
        }
        header.push_str(&p.name);
        header.push(' ');
        header.push_str(&p.value.shape().len().to_string());
        for d in p.value.shape() {
            header.push(' ');
            header.push_str(&d.to_string());
        }
        header.push('\n');
    }
    header.push_str("end\n");
    w.write_all(header.as_bytes())?;
    let mut buf = Vec::with_capacity(store.num_scalars() * 8);
    for p in store.iter() {
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

fn header_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if !line.ends_with('\n') {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    line.pop();
    Ok(line)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Reads a checkpoint into a fresh store (all parameters trainable).
pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<ParamStore> {
    if header_line(&mut r)? != MAGIC {
        return Err(bad("bad magic line"));
    }
    let count_line = header_line(&mut r)?;
    let count: usize = count_line
        .strip_prefix("count ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(format!("bad count line `{count_line}`")))?;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let line = header_line(&mut r)?;
        let mut parts = line.split(' ');
        let name = parts.next().filter(|s| !s.is_empty()).ok_or_else(|| bad("missing name"))?;
        let ndim: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("bad rank in `{line}`")))?;
        let dims: Vec<usize> = parts
            .map(|s| s.parse().map_err(|_| bad(format!("bad dim in `{line}`"))))
            .collect::<Result<_>>()?;
        if dims.len() != ndim {
            return Err(bad(format!("rank mismatch in `{line}`")));
        }
        table.push((name.to_string(), dims));
    }
    if header_line(&mut r)? != "end" {
        return Err(bad("missing end marker"));
    }
    let mut store = ParamStore::new();
    let mut bytes = [0u8; 8];
    for (name, dims) in table {
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut bytes).map_err(|_| bad("truncated payload"))?;
            data.push(f64::from_le_bytes(bytes));
        }
        store.add(name, Tensor::new(dims, data)?);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    Ok(store)
}

/// Overwrites `store`'s values from a checkpoint with identical names and shapes.
pub fn load_into<R: BufRead>(store: &mut ParamStore, r: R) -> Result<()> {
    let loaded = read_checkpoint(r)?;
    if loaded.len() != store.len() {
        return Err(bad(format!("expected {} tensors, found {}", store.len(), loaded.len())));
    }
    for (dst, src) in store.iter_mut().zip(loaded.iter()) {
        if dst.name != src.name || dst.value.shape() != src.value.shape() {
            return Err(bad(format!(
                "tensor `{}` {:?} does not match `{}` {:?}",
                src.name,
                src.value.shape(),
                dst.name,
                dst.value.shape()
            )));
        }
        dst.value = src.value.clone();
    }
    Ok(())
}
