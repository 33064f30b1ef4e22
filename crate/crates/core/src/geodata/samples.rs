//! Labeled sample points: CSV `x,y,label` with label 0, 1, or empty.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub x: f64,
    pub y: f64,
    pub label: Option<u8>,
}

pub fn load_samples_csv(path: &Path) -> Result<Vec<SamplePoint>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let expected = ["x", "y", "label"];
    for (i, want) in expected.iter().enumerate() {
        if headers.get(i).map(|h| h.to_ascii_lowercase()) != Some(want.to_string()) {
            return Err(Error::Parse {
                line: 1,
                msg: format!("samples CSV header must be x,y,label; got '{headers:?}'"),
            });
        }
    }
    let mut out = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record?;
        let field = |i: usize| -> Result<&str> {
            record.get(i).ok_or_else(|| Error::Parse {
                line,
                msg: format!("missing column {i}"),
            })
        };
        let parse_f = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("unparseable number '{s}'"),
            })
        };
        let x = parse_f(field(0)?)?;
        let y = parse_f(field(1)?)?;
        let label = match field(2)? {
            "" => None,
            "0" => Some(0),
            "1" => Some(1),
            other => {
                return Err(Error::Parse {
                    line,
                    msg: format!("label must be 0, 1 or empty; got '{other}'"),
                })
            }
        };
        out.push(SamplePoint { x, y, label });
    }
    Ok(out)
}

pub fn write_samples_csv(path: &Path, samples: &[SamplePoint]) -> Result<()> {
    let mut out = String::from("x,y,label\n");
    for s in samples {
        let label = match s.label {
            Some(l) => l.to_string(),
            None => String::new(),
        };
        out.push_str(&format!("{},{},{}\n", s.x, s.y, label));
    }
    std::fs::write(path, out)?;
    Ok(())
}
