use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::signature::SpecializationMatrix;
use crate::error::{Error, Result};

/// Centered Pearson coefficient, clamped to `[-1, 1]`.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Input(format!(
            "pearson needs two vectors of equal length ≥ 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("an input vector has zero variance".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Symmetric matrix of pairwise correlations between languages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub languages: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl CorrelationMatrix {
    /// Validates shape, range, symmetry and the unit diagonal.
    pub fn new(languages: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        let n = languages.len();
        if values.len() != n || values.iter().any(|r| r.len() != n) {
            return Err(Error::Input(format!("correlation matrix must be {n}×{n}")));
        }
        for i in 0..n {
            if values[i][i] != 1.0 {
                return Err(Error::Input(format!("diagonal entry {i} is {}", values[i][i])));
            }
            for j in 0..n {
                let v = values[i][j];
                if !(-1.0..=1.0).contains(&v) || (v - values[j][i]).abs() > 1e-12 {
                    return Err(Error::Input(format!("entry ({i},{j}) = {v} is out of range or asymmetric")));
                }
            }
        }
        Ok(Self { languages, values })
    }

    pub fn len(&self) -> usize {
        self.languages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.languages.is_empty()
    }

    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.languages.iter().position(|l| l == a)?;
        let j = self.languages.iter().position(|l| l == b)?;
        Some(self.values[i][j])
    }

    /// CSV with the language ids as header row and first column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("language");
        for l in &self.languages {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (l, row) in self.languages.iter().zip(&self.values) {
            out.push_str(l);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty correlation CSV".into()))?;
        let languages: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
        let mut values = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut cells = line.split(',');
            let name = cells.next().unwrap_or_default();
            if languages.get(i).map(String::as_str) != Some(name) {
                return Err(Error::Format(format!("row {i} is labelled {name}")));
            }
            let row = cells
                .map(|c| c.trim().parse::<f64>().map_err(|e| Error::Format(format!("row {name}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            values.push(row);
        }
        Self::new(languages, values)
    }
}

/// Pearson correlations between the flattened (layer-major) signatures.
pub fn correlation_matrix(signatures: &[SpecializationMatrix]) -> Result<CorrelationMatrix> {
    if signatures.len() < 2 {
        return Err(Error::Input("correlation needs at least two languages".into()));
    }
    let (d, e) = (signatures[0].layers, signatures[0].experts);
    if let Some(bad) = signatures.iter().find(|s| s.layers != d || s.experts != e) {
        return Err(Error::Input(format!(
            "signature of {} is {}×{}, expected {d}×{e}",
            bad.language, bad.layers, bad.experts
        )));
    }
    let n = signatures.len();
    let mut values = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let r = pearson(&signatures[i].matrix, &signatures[j].matrix)?;
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    CorrelationMatrix::new(signatures.iter().map(|s| s.language.clone()).collect(), values)
}
