//! Named-array parameter checkpoints and loss-trace CSV files.
//!
//! A checkpoint is a flat binary file: a text header naming each array and
//! its shape, followed by the packed little-endian f64 payloads in header
//! order.  Arrays are matched by name on load, so field order inside the
//! file does not matter.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::vae::{GenerativeParams, LossBreakdown, RecognitionParams};
use crate::{Error, Result};

/// One named parameter array with its logical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// An ordered collection of named arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArrayStore {
    arrays: Vec<NamedArray>,
}

impl ArrayStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of arrays held.
    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// All arrays in insertion order.
    pub fn arrays(&self) -> &[NamedArray] {
        &self.arrays
    }

    /// Adds an array; the name must be new and the shape must match the
    /// element count.
    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Parameter(format!(
                "array name {name:?} must be non-empty without whitespace"
            )));
        }
        if self.arrays.iter().any(|a| a.name == name) {
            return Err(Error::Parameter(format!("duplicate array name {name:?}")));
        }
        let count: usize = shape.iter().product();
        if shape.is_empty() || count != data.len() {
            return Err(Error::Dimension(format!(
                "array {name:?}: shape {shape:?} does not describe {} values",
                data.len()
            )));
        }
        self.arrays.push(NamedArray { name: name.to_owned(), shape, data });
        Ok(())
    }

    /// Looks up an array by name.
    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Serializes header and payloads to a writer.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "params v1 arrays={}", self.arrays.len())?;
        for a in &self.arrays {
            write!(w, "array {} rank={}", a.name, a.shape.len())?;
            for d in &a.shape {
                write!(w, " {d}")?;
            }
            writeln!(w, " count={}", a.data.len())?;
        }
        for a in &self.arrays {
            for v in &a.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Parses a checkpoint from a reader.
    pub fn read_from(r: &mut impl BufRead) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header = line.trim_end_matches('\n');
        let count = header
            .strip_prefix("params v1 arrays=")
            .and_then(|n| n.parse::<usize>().ok())
            .ok_or_else(|| Error::Format(format!("bad checkpoint header {header:?}")))?;
        let mut declared = Vec::with_capacity(count);
        for _ in 0..count {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format("truncated checkpoint header".into()));
            }
            let entry = line.trim_end_matches('\n');
            declared.push(parse_array_line(entry)?);
        }
        let mut store = Self::new();
        for (name, shape, len) in declared {
            let mut data = vec![0.0; len];
            let mut buf = [0u8; 8];
            for v in &mut data {
                r.read_exact(&mut buf).map_err(|e| {
                    if e.kind() == std::io::ErrorKind::UnexpectedEof {
                        Error::Format(format!("truncated payload for array {name:?}"))
                    } else {
                        Error::Io(e)
                    }
                })?;
                *v = f64::from_le_bytes(buf);
            }
            store.push(&name, shape, data)?;
        }
        Ok(store)
    }

    /// Writes the checkpoint to a file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint file.
    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    /// Captures both models under `gen.` and `rec.` name prefixes.
    pub fn from_models(gen: &GenerativeParams, rec: &RecognitionParams) -> Self {
        let mut store = Self::new();
        for (name, shape, data) in gen.arrays() {
            store
                .push(&format!("gen.{name}"), shape, data.to_vec())
                .expect("model arrays are well-formed");
        }
        for (name, shape, data) in rec.arrays() {
            store
                .push(&format!("rec.{name}"), shape, data.to_vec())
                .expect("model arrays are well-formed");
        }
        store
    }

    /// Restores both models from `gen.` and `rec.` prefixed arrays, matching
    /// by name and verifying shapes.
    pub fn apply(&self, gen: &mut GenerativeParams, rec: &mut RecognitionParams) -> Result<()> {
        let gen_flat = self.flat_for("gen.", &gen.arrays())?;
        let rec_flat = self.flat_for("rec.", &rec.arrays())?;
        gen.set_flat(&gen_flat)?;
        rec.set_flat(&rec_flat)?;
        Ok(())
    }

    fn flat_for(&self, prefix: &str, expected: &[(String, Vec<usize>, &[f64])]) -> Result<Vec<f64>> {
        let mut flat = Vec::new();
        for (name, shape, data) in expected {
            let full = format!("{prefix}{name}");
            let found = self
                .get(&full)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing array {full:?}")))?;
            if &found.shape != shape {
                return Err(Error::Dimension(format!(
                    "array {full:?}: stored shape {:?} does not match model shape {shape:?}",
                    found.shape
                )));
            }
            debug_assert_eq!(found.data.len(), data.len());
            flat.extend_from_slice(&found.data);
        }
        Ok(flat)
    }
}

fn parse_array_line(entry: &str) -> Result<(String, Vec<usize>, usize)> {
    let bad = || Error::Format(format!("bad array header {entry:?}"));
    let mut parts = entry.split(' ');
    if parts.next() != Some("array") {
        return Err(bad());
    }
    let name = parts.next().ok_or_else(bad)?.to_owned();
    let rank: usize = parts
        .next()
        .and_then(|p| p.strip_prefix("rank="))
        .and_then(|n| n.parse().ok())
        .ok_or_else(bad)?;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(parts.next().and_then(|d| d.parse().ok()).ok_or_else(bad)?);
    }
    let count: usize = parts
        .next()
        .and_then(|p| p.strip_prefix("count="))
        .and_then(|n| n.parse().ok())
        .ok_or_else(bad)?;
    if parts.next().is_some() {
        return Err(bad());
    }
    if shape.iter().product::<usize>() != count {
        return Err(Error::Format(format!(
            "array {name:?}: shape {shape:?} does not describe count {count}"
        )));
    }
    Ok((name, shape, count))
}

/// Writes a loss trace as CSV with one row per step.
pub fn write_loss_trace(path: &Path, trace: &[LossBreakdown]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "step,encoder,decoder,prediction,total")?;
    for (step, b) in trace.iter().enumerate() {
        writeln!(w, "{step},{},{},{},{}", b.encoder, b.decoder, b.prediction, b.total)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a loss trace written by [`write_loss_trace`].
pub fn read_loss_trace(path: &Path) -> Result<Vec<LossBreakdown>> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty loss trace".into()))??;
    if header != "step,encoder,decoder,prediction,total" {
        return Err(Error::Format(format!("bad loss trace header {header:?}")));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Format(format!("bad loss trace row {line:?}")));
        }
        let step: usize = fields[0]
            .parse()
            .map_err(|_| Error::Format(format!("bad step in row {line:?}")))?;
        if step != i {
            return Err(Error::Format(format!("non-sequential step {step} at row {i}")));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad number {s:?} in loss trace")))
        };
        out.push(LossBreakdown {
            encoder: num(fields[1])?,
            decoder: num(fields[2])?,
            prediction: num(fields[3])?,
            total: num(fields[4])?,
        });
    }
    Ok(out)
}
