//! File formats: the dataset CSV exchanged with external tools and the JSON
//! documents (model spec, fitted parameters) used by the command line.
//!
//! CSV layout: header `y1,y2,x1_1..x1_k1,x2_1..x2_k2`, responses as
//! integers, covariates as shortest-round-trip decimal floats, so a write
//! followed by a read reproduces the dataset exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::likelihood::{Dataset, ModelParams};
use crate::model::{ResponseSpec, ThresholdStructure};
use crate::{Error, Result};

pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["y1".to_string(), "y2".to_string()];
    header.extend((1..=data.k1()).map(|c| format!("x1_{c}")));
    header.extend((1..=data.k2()).map(|c| format!("x2_{c}")));
    w.write_record(&header)?;
    let mut record = Vec::with_capacity(header.len());
    for i in 0..data.n() {
        record.clear();
        record.push(data.y1()[i].to_string());
        record.push(data.y2()[i].to_string());
        record.extend(data.x1_row(i).iter().map(f64::to_string));
        record.extend(data.x2_row(i).iter().map(f64::to_string));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() < 2 || &headers[0] != "y1" || &headers[1] != "y2" {
        return Err(Error::Data(format!(
            "dataset header must start with y1,y2; found {:?}",
            headers.iter().take(2).collect::<Vec<_>>()
        )));
    }
    let mut pos = 2;
    let mut k1 = 0;
    while pos < headers.len() && headers[pos] == format!("x1_{}", k1 + 1) {
        k1 += 1;
        pos += 1;
    }
    let mut k2 = 0;
    while pos < headers.len() && headers[pos] == format!("x2_{}", k2 + 1) {
        k2 += 1;
        pos += 1;
    }
    if pos != headers.len() {
        return Err(Error::Data(format!(
            "unexpected dataset column {:?} at position {pos}",
            &headers[pos]
        )));
    }

    let (mut y1, mut y2) = (Vec::new(), Vec::new());
    let (mut x1, mut x2) = (Vec::new(), Vec::new());
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Data(format!(
                "row {} has {} fields, expected {}",
                row + 1,
                record.len(),
                headers.len()
            )));
        }
        let int = |field: &str, name: &str| {
            field.parse::<u32>().map_err(|_| {
                Error::Data(format!(
                    "row {}: {name} must be a non-negative integer, found {field:?}",
                    row + 1
                ))
            })
        };
        let real = |field: &str, name: &str| {
            field.parse::<f64>().map_err(|_| {
                Error::Data(format!(
                    "row {}: {name} must be a decimal number, found {field:?}",
                    row + 1
                ))
            })
        };
        y1.push(int(&record[0], "y1")?);
        y2.push(int(&record[1], "y2")?);
        for c in 0..k1 {
            x1.push(real(&record[2 + c], &format!("x1_{}", c + 1))?);
        }
        for c in 0..k2 {
            x2.push(real(&record[2 + k1 + c], &format!("x2_{}", c + 1))?);
        }
    }
    Dataset::new(y1, y2, x1, k1, x2, k2)
}

/// Model specification document, JSON schema "v1": response grid sizes,
/// named covariate columns per equation (the same name in both lists means
/// one shared column), and optionally a full threshold structure.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpecFile {
    pub version: String,
    pub m: [usize; 2],
    pub x1: Vec<String>,
    pub x2: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<ThresholdStructure>,
}

impl SpecFile {
    pub fn load(path: &Path) -> Result<Self> {
        let spec: Self = load_json(path)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        save_json(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != "v1" {
            return Err(Error::Data(format!(
                "unsupported spec version {:?}, expected \"v1\"",
                self.version
            )));
        }
        let spec = self.response_spec()?;
        for names in [&self.x1, &self.x2] {
            for (i, name) in names.iter().enumerate() {
                if name.is_empty() {
                    return Err(Error::Data("empty covariate name".into()));
                }
                if names[..i].contains(name) {
                    return Err(Error::Data(format!(
                        "covariate {name:?} listed twice in one equation"
                    )));
                }
            }
        }
        if let Some(ts) = &self.thresholds {
            if ts.spec() != spec {
                return Err(Error::Data(format!(
                    "threshold grids are {}x{} but m is {}x{}",
                    ts.spec().m1,
                    ts.spec().m2,
                    spec.m1,
                    spec.m2
                )));
            }
        }
        Ok(())
    }

    pub fn response_spec(&self) -> Result<ResponseSpec> {
        ResponseSpec::new(self.m[0], self.m[1])
    }

    /// Column names declared in both equations.
    pub fn shared(&self) -> Vec<String> {
        self.x1
            .iter()
            .filter(|n| self.x2.contains(n))
            .cloned()
            .collect()
    }

    /// Checks that the dataset's covariate block widths match the declared
    /// column lists.
    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.k1() != self.x1.len() || data.k2() != self.x2.len() {
            return Err(Error::DimensionMismatch(format!(
                "dataset has {}+{} covariate columns, spec declares {}+{}",
                data.k1(),
                data.k2(),
                self.x1.len(),
                self.x2.len()
            )));
        }
        Ok(())
    }
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut file, value)?;
    file.write_all(b"\n")?;
    file.flush()?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Reads fitted parameters from either a bare parameter document or a full
/// estimation result (which nests them under "params").
pub fn load_params(path: &Path) -> Result<ModelParams> {
    let value: serde_json::Value = load_json(path)?;
    let node = match value.get("params") {
        Some(inner) => inner.clone(),
        None => value,
    };
    Ok(serde_json::from_value(node)?)
}
