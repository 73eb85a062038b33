use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::atomic_write;

/// One table cell. A failed cell carries its reason instead of a number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
    Bool(bool),
    Failed(String),
}

impl Cell {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Num(x) => Some(*x),
            Cell::Int(i) => Some(*i as f64),
            _ => None,
        }
    }

    pub fn is_failed(&self) -> bool {
        matches!(self, Cell::Failed(_))
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Num(x) => write!(f, "{x}"),
            Cell::Int(i) => write!(f, "{i}"),
            Cell::Text(s) => f.write_str(s),
            Cell::Bool(b) => write!(f, "{b}"),
            Cell::Failed(reason) => write!(f, "FAILED: {reason}"),
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

impl From<bool> for Cell {
    fn from(b: bool) -> Self {
        Cell::Bool(b)
    }
}

/// A benchmark table with enough metadata to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub name: String,
    pub config_digest: String,
    pub seed: u64,
    pub wall_clock_secs: f64,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    #[serde(default)]
    pub summary: BTreeMap<String, f64>,
}

impl BenchResult {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut out = format!(
            "# name={} config_digest={} seed={} wall_clock_secs={:.3}\n",
            self.name, self.config_digest, self.seed, self.wall_clock_secs
        );
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|c| c.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        out.push_str(&String::from_utf8(bytes).expect("csv of utf-8 fields"));
        Ok(out)
    }

    /// Writes `<dir>/results.csv` and `<dir>/results.json`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let csv_path = dir.join("results.csv");
        let json_path = dir.join("results.json");
        atomic_write(&csv_path, self.to_csv()?.as_bytes())?;
        atomic_write(&json_path, &serde_json::to_vec_pretty(self)?)?;
        Ok((csv_path, json_path))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::corrupt(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BenchResult {
        BenchResult {
            name: "latency".into(),
            config_digest: "abc".into(),
            seed: 7,
            wall_clock_secs: 1.5,
            columns: vec!["size".into(), "ms".into(), "note".into()],
            rows: vec![
                vec![Cell::from(480usize), Cell::from(0.25), Cell::from("ok, fine")],
                vec![Cell::from(960usize), Cell::Failed("overflow".into()), Cell::from(true)],
            ],
            summary: BTreeMap::from([("speedup".to_string(), 3.0)]),
        }
    }

    #[test]
    fn json_round_trip_and_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample();
        let (csv_path, json_path) = r.write(dir.path()).unwrap();
        assert_eq!(BenchResult::read_json(&json_path).unwrap(), r);
        let text = fs::read_to_string(csv_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# name=latency config_digest=abc seed=7"));
        assert_eq!(lines[1], "size,ms,note");
        assert_eq!(lines[2], "480,0.25,\"ok, fine\"");
        assert_eq!(lines[3], "960,FAILED: overflow,true");
        assert!(fs::read_to_string(json_path).unwrap().contains("\"config_digest\": \"abc\""));
    }

    #[test]
    fn empty_result_is_header_only() {
        let r = BenchResult {
            rows: Vec::new(),
            ..sample()
        };
        let csv = r.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(csv.lines().nth(1), Some("size,ms,note"));
    }
}
