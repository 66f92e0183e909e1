//! Portable tensor file: a plain-text header of `key = value` lines ended
//! by an empty line, then the little-endian `f32` payload.
//!
//! ```text
//! RTTENSOR 1
//! shape = 3,4
//! dtype = f32
//! byte_order = little
//!
//! <12 * 4 bytes>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &str = "RTTENSOR 1";

/// Reads a `key = value` header terminated by an empty line.
pub(crate) fn read_header<R: BufRead>(r: &mut R, magic: &str) -> Result<BTreeMap<String, String>> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != magic {
        return Err(Error::Format(format!(
            "expected magic {magic:?}, found {:?}",
            line.trim_end()
        )));
    }
    let mut fields = BTreeMap::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("header not terminated".into()));
        }
        let l = line.trim_end_matches(['\n', '\r']);
        if l.is_empty() {
            break;
        }
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad header line {l:?}")))?;
        fields.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(fields)
}

pub(crate) fn field<'a>(fields: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    fields
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Format(format!("missing header field {key:?}")))
}

pub(crate) fn parse_field<T: std::str::FromStr>(fields: &BTreeMap<String, String>, key: &str) -> Result<T> {
    field(fields, key)?
        .parse()
        .map_err(|_| Error::Format(format!("unparsable header field {key:?}")))
}

pub(crate) fn write_f32_payload<W: Write, S: Scalar>(w: &mut W, data: &[S]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_f32_payload<R: Read, S: Scalar>(r: &mut R, n: usize) -> Result<Vec<S>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("payload truncated: {e}")))?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing payload bytes", rest.len())));
    }
    Ok(buf
        .chunks_exact(4)
        .map(|b| S::from_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect())
}

pub fn write_tensor<W: Write, S: Scalar>(w: &mut W, t: &Tensor<S>) -> Result<()> {
    let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
    write!(
        w,
        "{MAGIC}\nshape = {}\ndtype = f32\nbyte_order = little\n\n",
        shape.join(",")
    )?;
    write_f32_payload(w, t.data())
}

pub fn read_tensor<R: Read, S: Scalar>(r: R) -> Result<Tensor<S>> {
    let mut r = BufReader::new(r);
    let fields = read_header(&mut r, MAGIC)?;
    if field(&fields, "dtype")? != "f32" {
        return Err(Error::Format("only f32 payloads are supported".into()));
    }
    if field(&fields, "byte_order")? != "little" {
        return Err(Error::Format("only little-endian payloads are supported".into()));
    }
    let shape: Vec<usize> = field(&fields, "shape")?
        .split(',')
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Format("bad shape".into()))?;
    let n = shape.iter().product();
    let data = read_f32_payload(&mut r, n)?;
    Tensor::new(shape, data)
}

pub fn save<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write_tensor(&mut f, t)?;
    f.flush()?;
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    read_tensor(fs::File::open(path)?)
}
