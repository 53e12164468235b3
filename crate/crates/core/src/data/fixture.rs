//! JSON-lines fixture: one header line, then one line per sample.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureHeader {
    pub classes: usize,
    pub dim: usize,
    pub tokens: usize,
    pub domains: Vec<usize>,
    /// Class prototypes, row-major `classes × dim`.
    pub anchors: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    domain: usize,
    label: usize,
    tokens: Vec<f64>,
}

pub fn write_fixture(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = FixtureHeader {
        classes: dataset.classes,
        dim: dataset.dim,
        tokens: dataset.tokens,
        domains: dataset.domain_ids(),
        anchors: dataset.prototypes.as_slice().to_vec(),
    };
    write_line(&mut out, &header).map_err(|e| Error::io(path, e))?;
    for s in &dataset.samples {
        let rec = Record {
            domain: s.domain,
            label: s.label,
            tokens: s.tokens.as_slice().to_vec(),
        };
        write_line(&mut out, &rec).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn write_line<T: Serialize>(out: &mut impl Write, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")
}

pub fn read_fixture(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let context = |line: usize| format!("{}:{line}", path.display());
    let first = lines
        .next()
        .ok_or_else(|| Error::Format {
            context: context(1),
            message: "empty fixture".into(),
        })?
        .map_err(|e| Error::io(path, e))?;
    let header: FixtureHeader = serde_json::from_str(&first).map_err(|e| Error::Format {
        context: context(1),
        message: e.to_string(),
    })?;
    let prototypes = Mat::from_vec(header.classes, header.dim, header.anchors.clone())?;
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Format {
            context: context(i + 2),
            message,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if rec.label >= header.classes {
            return Err(bad(format!("label {} out of range", rec.label)));
        }
        if !header.domains.contains(&rec.domain) {
            return Err(bad(format!("domain {} missing from header", rec.domain)));
        }
        let tokens = Mat::from_vec(header.tokens, header.dim, rec.tokens).map_err(|e| bad(e.to_string()))?;
        samples.push(Sample {
            tokens,
            label: rec.label,
            domain: rec.domain,
        });
    }
    Ok(Dataset {
        classes: header.classes,
        dim: header.dim,
        tokens: header.tokens,
        prototypes,
        samples,
    })
}
