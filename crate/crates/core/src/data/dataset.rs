//! CSV sample container.
//!
//! ```text
//! label,<n>,<d>
//! <label>,<v(0,0)>,<v(0,1)>,...,<v(n-1,d-1)>
//! ```
//!
//! Values are row-major; a missing cell is an empty field.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::csi::CsiMatrix;
use crate::error::{Error, Result};
use crate::numeric::Tensor2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub matrix: CsiMatrix,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub n: usize,
    pub d: usize,
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn new(n: usize, d: usize, samples: Vec<LabeledSample>) -> Result<Self> {
        if let Some(bad) = samples
            .iter()
            .find(|s| s.matrix.n() != n || s.matrix.d() != d)
        {
            return Err(Error::dim(
                "dataset",
                format!(
                    "sample is {}x{}, dataset is {n}x{d}",
                    bad.matrix.n(),
                    bad.matrix.d()
                ),
            ));
        }
        Ok(Self { n, d, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn classes(&self) -> BTreeSet<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn filter_classes(&self, classes: &[usize]) -> Dataset {
        Dataset {
            n: self.n,
            d: self.d,
            samples: self
                .samples
                .iter()
                .filter(|s| classes.contains(&s.label))
                .cloned()
                .collect(),
        }
    }

    /// Stratified split: the first `ratio` share of each class (in file
    /// order) goes to the first half.
    pub fn split(&self, ratio: f64) -> (Dataset, Dataset) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for class in self.classes() {
            let members: Vec<&LabeledSample> =
                self.samples.iter().filter(|s| s.label == class).collect();
            let cut = ((members.len() as f64) * ratio).round() as usize;
            let cut = cut.clamp(1.min(members.len()), members.len());
            for (i, s) in members.into_iter().enumerate() {
                if i < cut {
                    train.push(s.clone());
                } else {
                    test.push(s.clone());
                }
            }
        }
        let mk = |samples| Dataset {
            n: self.n,
            d: self.d,
            samples,
        };
        (mk(train), mk(test))
    }

    /// Interpolates missing cells of every sample.
    pub fn interpolated(&self) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                Ok(LabeledSample {
                    matrix: s.matrix.interpolate_missing()?,
                    label: s.label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            n: self.n,
            d: self.d,
            samples,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "label,{},{}", self.n, self.d);
        for s in &self.samples {
            let _ = write!(out, "{}", s.label);
            let v = s.matrix.values();
            for t in 0..self.n {
                for i in 0..self.d {
                    out.push(',');
                    if !s.matrix.is_missing(t, i) {
                        let _ = write!(out, "{}", v.get(t, i));
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Parses the CSV container without constraining which labels appear.
pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| parse_err(1, "empty file"))?;
    let fields: Vec<&str> = header.trim().split(',').collect();
    if fields.len() != 3 || fields[0] != "label" {
        return Err(parse_err(1, "expected header `label,<n>,<d>`"));
    }
    let dim = |s: &str, what: &str| -> Result<usize> {
        match s.trim().parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(parse_err(1, format!("invalid {what} `{s}`"))),
        }
    };
    let n = dim(fields[1], "n")?;
    let d = dim(fields[2], "d")?;

    let mut samples = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let label_field = parts.next().unwrap_or_default();
        let label: usize = label_field
            .trim()
            .parse()
            .map_err(|_| parse_err(lineno, format!("invalid label `{label_field}`")))?;
        let mut data = Vec::with_capacity(n * d);
        let mut missing = Vec::with_capacity(n * d);
        for field in parts {
            let field = field.trim();
            if field.is_empty() {
                data.push(f64::NAN);
                missing.push(true);
            } else {
                let v: f64 = field
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("invalid value `{field}`")))?;
                if !v.is_finite() {
                    return Err(parse_err(lineno, format!("non-finite value `{field}`")));
                }
                data.push(v);
                missing.push(false);
            }
        }
        if data.len() != n * d {
            return Err(parse_err(
                lineno,
                format!("expected {} values for {n}x{d}, got {}", n * d, data.len()),
            ));
        }
        let values = Tensor2::from_vec(n, d, data)?;
        let matrix = CsiMatrix::with_missing(values, missing)?;
        samples.push(LabeledSample { matrix, label });
    }
    Dataset::new(n, d, samples)
}

/// Loads a dataset file. Class ids must be contiguous from 0.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let ds = parse_csv(&text)?;
    if ds.is_empty() {
        return Err(parse_err(2, "no samples"));
    }
    let classes = ds.classes();
    let count = classes.len();
    if let Some(pos) = ds.samples.iter().position(|s| s.label >= count) {
        return Err(parse_err(
            pos + 2,
            format!(
                "unknown label {}: class ids must be contiguous from 0 ({} classes present)",
                ds.samples[pos].label, count
            ),
        ));
    }
    Ok(ds)
}
