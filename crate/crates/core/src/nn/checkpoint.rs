//! Parameter checkpoints: one plain-text header line followed by the flat
//! parameter array as little-endian `f64`.
//!
//! ```text
//! camel-net layers=2,16,16,3 activation=tanh bias_head=true [key=value ...]
//! <raw f64 LE bytes>
//! ```
//!
//! Extra `key=value` tokens are preserved so higher layers (the meta-model)
//! can store their own fields in the same header.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::{Activation, Architecture};
use crate::error::{Error, Result};

pub const MAGIC: &str = "camel-net";

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub arch: Architecture,
    pub extra: BTreeMap<String, String>,
}

impl Header {
    pub fn to_line(&self) -> String {
        let layers: Vec<String> = self.arch.layer_sizes().iter().map(|d| d.to_string()).collect();
        let mut line = format!(
            "{MAGIC} layers={} activation={} bias_head={}",
            layers.join(","),
            self.arch.activation(),
            self.arch.bias_head()
        );
        for (k, v) in &self.extra {
            line.push_str(&format!(" {k}={v}"));
        }
        line
    }

    pub fn parse(line: &str) -> Result<Self> {
        let mut tokens = line.split_whitespace();
        if tokens.next() != Some(MAGIC) {
            return Err(Error::Parse(format!("checkpoint header must start with '{MAGIC}'")));
        }
        let mut fields = BTreeMap::new();
        for tok in tokens {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("malformed header token '{tok}'")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let layers = fields
            .remove("layers")
            .ok_or_else(|| Error::Parse("header missing 'layers'".into()))?;
        let layer_sizes = layers
            .split(',')
            .map(|d| d.parse::<usize>().map_err(|e| Error::Parse(format!("bad layer size '{d}': {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let activation: Activation = fields
            .remove("activation")
            .ok_or_else(|| Error::Parse("header missing 'activation'".into()))?
            .parse()?;
        let bias_head = match fields.remove("bias_head").as_deref() {
            Some("true") | Some("1") => true,
            Some("false") | Some("0") => false,
            other => return Err(Error::Parse(format!("bad bias_head flag {other:?}"))),
        };
        Ok(Self {
            arch: Architecture::new(layer_sizes, activation, bias_head)?,
            extra: fields,
        })
    }
}

pub fn write_checkpoint<W: Write>(mut out: W, header: &Header, values: &[f64]) -> std::io::Result<()> {
    writeln!(out, "{}", header.to_line())?;
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    out.flush()
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(Header, Vec<f64>)> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Parse(format!("reading checkpoint: {e}")))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Parse("checkpoint has no header line".into()))?;
    let line = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Parse("header is not utf-8".into()))?;
    let header = Header::parse(line)?;
    let body = &bytes[nl + 1..];
    if body.len() % 8 != 0 {
        return Err(Error::Parse(format!("payload length {} is not a multiple of 8", body.len())));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, values))
}
