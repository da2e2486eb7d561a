use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// One raw interaction as it appears in the input file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimestampedEdge {
    pub src: u64,
    pub dst: u64,
    pub timestamp: f64,
    pub weight: Option<f64>,
    pub label: Option<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Column {
    Src,
    Dst,
    Time,
    Weight,
    Label,
    Skip,
}

/// Ordered column layout of an edge-list file, e.g. `"src,dst,weight,time"`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnSpec {
    columns: Vec<Column>,
}

impl ColumnSpec {
    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    fn position(&self, col: Column) -> Option<usize> {
        self.columns.iter().position(|&c| c == col)
    }
}

impl Default for ColumnSpec {
    fn default() -> Self {
        ColumnSpec {
            columns: vec![Column::Src, Column::Dst, Column::Time],
        }
    }
}

impl FromStr for ColumnSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut columns = Vec::new();
        for name in s.split(',').map(str::trim) {
            let col = match name.to_ascii_lowercase().as_str() {
                "src" | "source" => Column::Src,
                "dst" | "target" => Column::Dst,
                "time" | "timestamp" | "t" => Column::Time,
                "weight" | "rating" | "w" => Column::Weight,
                "label" => Column::Label,
                "_" | "skip" | "" => Column::Skip,
                other => return Err(Error::Config(format!("unknown column '{other}'"))),
            };
            if col != Column::Skip && columns.contains(&col) {
                return Err(Error::Config(format!("column '{name}' given twice")));
            }
            columns.push(col);
        }
        let spec = ColumnSpec { columns };
        for required in [Column::Src, Column::Dst, Column::Time] {
            if spec.position(required).is_none() {
                return Err(Error::Config(format!(
                    "column spec '{s}' lacks {required:?}"
                )));
            }
        }
        Ok(spec)
    }
}

pub fn load_edge_stream(path: impl AsRef<Path>, spec: &ColumnSpec) -> Result<Vec<TimestampedEdge>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_edge_stream(&text, spec)
}

/// Parses edge-list text. Fields are comma-separated when the line contains a
/// comma and whitespace-separated otherwise; `#` starts a comment line.
pub fn parse_edge_stream(text: &str, spec: &ColumnSpec) -> Result<Vec<TimestampedEdge>> {
    let need = spec.columns.len().max(3);
    let mut edges = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let line_no = lineno + 1;
        let fields: Vec<&str> = if line.contains(',') {
            line.split(',').map(str::trim).collect()
        } else {
            line.split_whitespace().collect()
        };
        if fields.len() < need {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {need} columns, found {}", fields.len()),
            });
        }
        let bad = |what: &str, f: &str| Error::Parse {
            line: line_no,
            msg: format!("invalid {what} '{f}'"),
        };
        let mut edge = TimestampedEdge {
            src: 0,
            dst: 0,
            timestamp: 0.0,
            weight: None,
            label: None,
        };
        for (col, f) in spec.columns.iter().zip(&fields) {
            match col {
                Column::Src => edge.src = f.parse().map_err(|_| bad("source id", f))?,
                Column::Dst => edge.dst = f.parse().map_err(|_| bad("destination id", f))?,
                Column::Time => {
                    let t: f64 = f.parse().map_err(|_| bad("timestamp", f))?;
                    if !t.is_finite() {
                        return Err(bad("timestamp", f));
                    }
                    edge.timestamp = t;
                }
                Column::Weight => {
                    let w: f64 = f.parse().map_err(|_| bad("weight", f))?;
                    edge.weight = Some(w);
                }
                Column::Label => edge.label = Some(f.parse().map_err(|_| bad("label", f))?),
                Column::Skip => {}
            }
        }
        edges.push(edge);
    }
    if edges.is_empty() {
        return Err(Error::Data("no edges".into()));
    }
    Ok(edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_whitespace_triples() {
        let edges = parse_edge_stream("0 1 5\n1 2 7", &ColumnSpec::default()).unwrap();
        assert_eq!(edges.len(), 2);
        assert_eq!((edges[0].src, edges[0].dst, edges[0].timestamp), (0, 1, 5.0));
        assert_eq!((edges[1].src, edges[1].dst, edges[1].timestamp), (1, 2, 7.0));
    }

    #[test]
    fn short_line_reports_line_number() {
        let err = parse_edge_stream("a b", &ColumnSpec::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        let err = parse_edge_stream("# header\n0 1 2\nx 1 2", &ColumnSpec::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn bitcoin_csv_layout() {
        let spec: ColumnSpec = "src,dst,rating,time".parse().unwrap();
        let edges = parse_edge_stream("7188,1,10,1407470400\n", &spec).unwrap();
        let e = edges[0];
        assert_eq!((e.src, e.dst), (7188, 1));
        assert_eq!(e.weight, Some(10.0));
        assert_eq!(e.timestamp, 1407470400.0);
    }

    #[test]
    fn empty_and_comment_only_inputs_have_no_edges() {
        for text in ["", "# nothing\n\n"] {
            let err = parse_edge_stream(text, &ColumnSpec::default()).unwrap_err();
            assert!(err.to_string().contains("no edges"));
        }
    }

    #[test]
    fn non_finite_timestamp_rejected() {
        assert!(parse_edge_stream("0 1 inf", &ColumnSpec::default()).is_err());
        assert!(parse_edge_stream("0 1 NaN", &ColumnSpec::default()).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!("src,dst".parse::<ColumnSpec>().is_err());
        assert!("src,dst,time,time".parse::<ColumnSpec>().is_err());
        assert!("src,dst,bogus,time".parse::<ColumnSpec>().is_err());
        let spec: ColumnSpec = "src,dst,_,time,label".parse().unwrap();
        let e = parse_edge_stream("3,4,zzz,9,-1", &spec).unwrap()[0];
        assert_eq!(e.label, Some(-1));
        assert_eq!(e.timestamp, 9.0);
    }
}
