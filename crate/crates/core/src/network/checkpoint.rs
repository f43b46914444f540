//! Single-file checkpoints: a text manifest of run metadata and parameter
//! names, each parameter followed by its tensor dump.
//!
//! ```text
//! AMRCKPT 1
//! meta <count>
//! <key>=<value>            (count lines)
//! params <count>
//! param <name>
//! TNSR <rank> <d0> ...     (then the little-endian f32 payload)
//! ...
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

const MAGIC: &str = "AMRCKPT 1";

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: Vec<(String, String)>,
    pub params: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "meta {}", self.metadata.len())?;
        for (k, v) in &self.metadata {
            writeln!(w, "{k}={v}")?;
        }
        writeln!(w, "params {}", self.params.len())?;
        for (name, t) in &self.params {
            writeln!(w, "param {name}")?;
            t.write_dump(&mut w)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        let mut next_line = |r: &mut R| -> Result<String> {
            line.clear();
            let n = r
                .read_line(&mut line)
                .map_err(|e| Error::Format(format!("reading checkpoint: {e}")))?;
            if n == 0 {
                return Err(Error::Format("unexpected end of checkpoint".into()));
            }
            Ok(line.trim_end_matches(['\n', '\r']).to_string())
        };
        if next_line(&mut r)? != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let count = |l: String, tag: &str| -> Result<usize> {
            l.strip_prefix(tag)
                .and_then(|n| n.trim().parse().ok())
                .ok_or_else(|| Error::Format(format!("expected `{tag} <count>`, got {l:?}")))
        };
        let n_meta = count(next_line(&mut r)?, "meta ")?;
        let mut metadata = Vec::with_capacity(n_meta);
        for _ in 0..n_meta {
            let l = next_line(&mut r)?;
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad metadata line {l:?}")))?;
            metadata.push((k.to_string(), v.to_string()));
        }
        let n_params = count(next_line(&mut r)?, "params ")?;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let l = next_line(&mut r)?;
            let name = l
                .strip_prefix("param ")
                .ok_or_else(|| Error::Format(format!("expected `param <name>`, got {l:?}")))?
                .to_string();
            params.push((name, Tensor::read_dump(&mut r)?));
        }
        Ok(Self { metadata, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}
