//! Text container of named parameter tensors.
//!
//! ```text
//! dualrl-checkpoint v1
//! meta <key> <value...>
//! tensor <name> <d0>x<d1>...
//! <values separated by spaces>
//! ```
//!
//! Values are written with Rust's shortest round-trip float formatting, so
//! save → load reproduces every parameter bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::nn::Params;
use crate::{Error, Result};

const MAGIC: &str = "dualrl-checkpoint v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    /// Insertion order is preserved so files diff cleanly.
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("missing or invalid meta {key:?}")))
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        self.tensors.push((name.to_string(), Tensor { shape: shape.to_vec(), data: data.to_vec() }));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Stores every parameter of `p` under `prefix`.
    pub fn add_params<P: Params + ?Sized>(&mut self, prefix: &str, p: &P) {
        p.visit(&mut |name, shape, data| self.push(&format!("{prefix}{name}"), shape, data));
    }

    /// Loads parameters of `p` from tensors under `prefix`; shapes must match.
    pub fn load_params<P: Params + ?Sized>(&self, prefix: &str, p: &mut P) -> Result<()> {
        let mut err = None;
        p.visit_mut(&mut |name, shape, data| {
            if err.is_some() {
                return;
            }
            let full = format!("{prefix}{name}");
            match self.tensor(&full) {
                Some(t) if t.shape == shape => data.copy_from_slice(&t.data),
                Some(t) => err = Some(Error::Checkpoint(format!("{full}: shape {:?} != {:?}", t.shape, shape))),
                None => err = Some(Error::Checkpoint(format!("missing tensor {full}"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {}", v.replace('\n', " "));
        }
        for (name, t) in &self.tensors {
            let shape: Vec<String> = t.shape.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "tensor {name} {}", shape.join("x"));
            let values: Vec<String> = t.data.iter().map(f64::to_string).collect();
            out.push_str(&values.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::Checkpoint("not a dualrl checkpoint (bad header)".into()));
        }
        let mut ck = Checkpoint::new();
        while let Some(line) = lines.next() {
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ck.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let (name, shape) =
                    rest.split_once(' ').ok_or_else(|| Error::Checkpoint(format!("bad tensor line {line:?}")))?;
                let shape: Vec<usize> = shape
                    .split('x')
                    .map(|d| d.parse().map_err(|_| Error::Checkpoint(format!("bad shape in {line:?}"))))
                    .collect::<Result<_>>()?;
                let values = lines.next().ok_or_else(|| Error::Checkpoint(format!("{name}: missing values")))?;
                let data: Vec<f64> = values
                    .split_whitespace()
                    .map(|v| v.parse().map_err(|_| Error::Checkpoint(format!("{name}: bad value {v:?}"))))
                    .collect::<Result<_>>()?;
                if data.len() != shape.iter().product::<usize>() {
                    return Err(Error::Checkpoint(format!("{name}: {} values for shape {shape:?}", data.len())));
                }
                ck.tensors.push((name.to_string(), Tensor { shape, data }));
            } else if !line.trim().is_empty() {
                return Err(Error::Checkpoint(format!("unexpected line {line:?}")));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
