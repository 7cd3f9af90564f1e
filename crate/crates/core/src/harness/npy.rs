//! `.npy` array files, little-endian float payloads only.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8] = b"\x93NUMPY";

#[derive(Clone, Copy)]
enum Dtype {
    F8,
    F4,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Value of `'key': value` in the header dict, up to the next top-level comma
/// or closing brace.
fn dict_value<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let needle_sq = format!("'{key}'");
    let needle_dq = format!("\"{key}\"");
    let start = header
        .find(&needle_sq)
        .map(|p| p + needle_sq.len())
        .or_else(|| header.find(&needle_dq).map(|p| p + needle_dq.len()))
        .ok_or_else(|| fmt_err(format!("header lacks `{key}`")))?;
    let rest = header[start..].trim_start();
    let rest = rest
        .strip_prefix(':')
        .ok_or_else(|| fmt_err(format!("malformed `{key}` entry")))?
        .trim_start();
    let mut depth = 0i32;
    for (i, ch) in rest.char_indices() {
        match ch {
            '(' | '[' => depth += 1,
            ')' | ']' => depth -= 1,
            ',' | '}' if depth == 0 => return Ok(rest[..i].trim()),
            _ => {}
        }
    }
    Err(fmt_err(format!("unterminated `{key}` entry")))
}

fn parse_header(header: &str) -> Result<(Dtype, Vec<usize>)> {
    let descr = dict_value(header, "descr")?.trim_matches(|c| c == '\'' || c == '"');
    let dtype = match descr {
        "<f8" => Dtype::F8,
        "<f4" => Dtype::F4,
        other => return Err(fmt_err(format!("unsupported dtype `{other}`"))),
    };
    match dict_value(header, "fortran_order")? {
        "False" => {}
        "True" => return Err(fmt_err("fortran_order True is not supported")),
        other => return Err(fmt_err(format!("bad fortran_order `{other}`"))),
    }
    let shape_txt = dict_value(header, "shape")?;
    let inner = shape_txt
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| fmt_err(format!("bad shape `{shape_txt}`")))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| fmt_err(format!("bad shape entry `{s}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((dtype, shape))
}

/// Decodes an in-memory `.npy` image.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let (header_len, offset) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(fmt_err("truncated header"));
            }
            (
                u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
                12,
            )
        }
        v => return Err(fmt_err(format!("unsupported format version {v}"))),
    };
    let end = offset + header_len;
    if bytes.len() < end {
        return Err(fmt_err("truncated header"));
    }
    let header =
        std::str::from_utf8(&bytes[offset..end]).map_err(|_| fmt_err("header is not text"))?;
    let (dtype, shape) = parse_header(header)?;
    let count: usize = shape.iter().product();
    let payload = &bytes[end..];
    let width = match dtype {
        Dtype::F8 => 8,
        Dtype::F4 => 4,
    };
    if payload.len() != count * width {
        return Err(fmt_err(format!(
            "payload length mismatch: expected {} bytes, found {}",
            count * width,
            payload.len()
        )));
    }
    let data: Vec<f64> = match dtype {
        Dtype::F8 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F4 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Tensor::new(shape, data)
}

/// Encodes as format version 1.0 with a `<f8` payload.
pub fn encode(t: &Tensor) -> Vec<u8> {
    let shape = match t.shape() {
        [] => "()".to_string(),
        [n] => format!("({n},)"),
        dims => format!(
            "({})",
            dims.iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {shape}, }}");
    // total preamble is a multiple of 64 and ends in '\n'
    let unpadded = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn load_array(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save_array(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}
