use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor2;

/// Amplitude of a complex CSI value `re + i·im`.
pub fn amplitude(re: f64, im: f64) -> f64 {
    (re * re + im * im).sqrt()
}

/// One activity sample: `n` time steps by `d` subcarrier amplitudes, with
/// cells that were not received flagged as missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsiMatrix {
    values: Tensor2,
    missing: Vec<bool>,
}

impl CsiMatrix {
    pub fn new(values: Tensor2) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::dim(
                "csi_matrix",
                format!("empty matrix {:?}", values.shape()),
            ));
        }
        let missing = vec![false; values.len()];
        Ok(Self { values, missing })
    }

    pub fn with_missing(values: Tensor2, missing: Vec<bool>) -> Result<Self> {
        let mut m = Self::new(values)?;
        if missing.len() != m.values.len() {
            return Err(Error::dim(
                "csi_matrix",
                format!("{} missing flags for {} cells", missing.len(), m.values.len()),
            ));
        }
        m.missing = missing;
        Ok(m)
    }

    /// Builds a matrix from complex readings, taking the amplitude per cell.
    pub fn from_complex(n: usize, d: usize, cells: &[(f64, f64)]) -> Result<Self> {
        let data = cells.iter().map(|&(re, im)| amplitude(re, im)).collect();
        Self::new(Tensor2::from_vec(n, d, data)?)
    }

    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn d(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Tensor2 {
        &self.values
    }

    pub fn is_missing(&self, t: usize, i: usize) -> bool {
        self.missing[t * self.d() + i]
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    pub fn has_missing(&self) -> bool {
        self.missing.iter().any(|&m| m)
    }

    pub fn set_missing(&mut self, t: usize, i: usize) {
        let d = self.d();
        self.missing[t * d + i] = true;
        self.values.set(t, i, f64::NAN);
    }

    /// Fills every missing cell by linear interpolation in time between the
    /// nearest valid readings of the same subcarrier. Gaps before the first
    /// or after the last valid reading take that reading's value.
    pub fn interpolate_missing(&self) -> Result<CsiMatrix> {
        if !self.has_missing() {
            return Ok(self.clone());
        }
        let (n, d) = (self.n(), self.d());
        let mut out = self.values.clone();
        for i in 0..d {
            let valid: Vec<usize> = (0..n).filter(|&t| !self.is_missing(t, i)).collect();
            if valid.is_empty() {
                return Err(Error::UnrecoverableColumn { column: i });
            }
            if valid.len() == n {
                continue;
            }
            // `next` is the index into `valid` of the first valid time > t.
            let mut next: usize = 0;
            for t in 0..n {
                if !self.is_missing(t, i) {
                    next += 1;
                    continue;
                }
                let value = match (next.checked_sub(1).map(|k| valid[k]), valid.get(next)) {
                    (Some(t1), Some(&t2)) => {
                        let (v1, v2) = (self.values.get(t1, i), self.values.get(t2, i));
                        v1 + (v2 - v1) * (t - t1) as f64 / (t2 - t1) as f64
                    }
                    (Some(t1), None) => self.values.get(t1, i),
                    (None, Some(&t2)) => self.values.get(t2, i),
                    (None, None) => unreachable!("column has at least one valid entry"),
                };
                out.set(t, i, value);
            }
        }
        Ok(CsiMatrix {
            values: out,
            missing: vec![false; n * d],
        })
    }
}
