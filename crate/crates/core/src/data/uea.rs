//! Reader and writer for the UEA/UCR `.ts` text format (the subset without
//! timestamps).

use std::fs;
use std::io::Write;
use std::path::Path;

use super::SequenceRecord;
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct UeaDataset {
    pub problem: String,
    /// Class labels in header order; record labels index into this.
    pub class_labels: Vec<String>,
    pub records: Vec<SequenceRecord>,
}

impl UeaDataset {
    pub fn n_classes(&self) -> usize {
        self.class_labels.len()
    }

    pub fn channels(&self) -> usize {
        self.records.first().map_or(0, SequenceRecord::channels)
    }
}

struct Header {
    problem: String,
    labels: Vec<String>,
    dimensions: Option<usize>,
}

fn err(file: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { file: file.to_path_buf(), line, msg: msg.into() }
}

pub fn parse_uea_ts(path: &Path) -> Result<UeaDataset> {
    let text = fs::read_to_string(path)?;
    parse_uea_str(&text, path)
}

/// Parses `.ts` content; `origin` is used in error messages only.
pub fn parse_uea_str(text: &str, origin: &Path) -> Result<UeaDataset> {
    let mut header = Header { problem: String::new(), labels: Vec::new(), dimensions: None };
    let mut data_at = None;
    let mut lines = text.lines().enumerate();
    for (i, raw) in lines.by_ref() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some(directive) = line.strip_prefix('@') else {
            return Err(err(origin, i + 1, "data before @data"));
        };
        let mut parts = directive.split_whitespace();
        let key = parts.next().unwrap_or("").to_ascii_lowercase();
        let rest: Vec<&str> = parts.collect();
        match key.as_str() {
            "problemname" => header.problem = rest.join(" "),
            "timestamps" if rest.first().is_some_and(|v| v.eq_ignore_ascii_case("true")) => {
                return Err(err(origin, i + 1, "timestamped .ts files are not supported"));
            }
            "classlabel" => {
                if !rest.first().is_some_and(|v| v.eq_ignore_ascii_case("true")) {
                    return Err(err(origin, i + 1, "classification files need `@classLabel true <labels>`"));
                }
                header.labels = rest[1..].iter().map(|s| s.to_string()).collect();
            }
            "dimensions" => {
                header.dimensions = Some(rest.first().and_then(|v| v.parse().ok()).ok_or_else(|| err(origin, i + 1, "bad @dimensions"))?);
            }
            "univariate" if rest.first().is_some_and(|v| v.eq_ignore_ascii_case("true")) => header.dimensions = Some(1),
            "data" => {
                data_at = Some(i);
                break;
            }
            _ => {}
        }
    }
    if data_at.is_none() {
        return Err(err(origin, text.lines().count(), "missing @data section"));
    }
    if header.labels.is_empty() {
        return Err(err(origin, 1, "no class labels declared"));
    }
    let cases: Vec<(usize, &str)> = lines.map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#')).collect();
    let parsed = par::map_range(cases.len(), |c| parse_case(&header, origin, c, cases[c].0, cases[c].1));
    let records = parsed.into_iter().collect::<Result<Vec<_>>>()?;
    if let (Some(first), Some(d)) = (records.first(), header.dimensions) {
        if first.channels() != d {
            return Err(err(origin, cases[0].0, format!("case 0 has {} channels, header declares {d}", first.channels())));
        }
    }
    for (c, r) in records.iter().enumerate() {
        if r.channels() != records[0].channels() {
            return Err(err(origin, cases[c].0, format!("case {c} has {} channels, case 0 has {}", r.channels(), records[0].channels())));
        }
    }
    Ok(UeaDataset { problem: header.problem, class_labels: header.labels, records })
}

fn parse_case(h: &Header, origin: &Path, case: usize, line_no: usize, line: &str) -> Result<SequenceRecord> {
    let mut fields: Vec<&str> = line.split(':').collect();
    if fields.len() < 2 {
        return Err(err(origin, line_no, format!("case {case}: expected `values:...:label`")));
    }
    let label_tok = fields.pop().unwrap_or_default().trim();
    let label = h
        .labels
        .iter()
        .position(|l| l == label_tok)
        .ok_or_else(|| err(origin, line_no, format!("case {case}: label `{label_tok}` not declared in header")))?;
    let mut channels: Vec<Vec<f64>> = Vec::with_capacity(fields.len());
    for (ch, f) in fields.iter().enumerate() {
        let vals = f
            .split(',')
            .map(|v| {
                let v = v.trim();
                if v == "?" || v.eq_ignore_ascii_case("nan") {
                    Ok(f64::NAN)
                } else {
                    v.parse::<f64>().map_err(|_| err(origin, line_no, format!("case {case}, channel {ch}: `{v}` is not a number")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = channels.first() {
            if first.len() != vals.len() {
                return Err(err(
                    origin,
                    line_no,
                    format!("case {case}: channel {ch} has {} values, channel 0 has {}", vals.len(), first.len()),
                ));
            }
        }
        channels.push(vals);
    }
    let len = channels[0].len();
    let rows = (0..len).map(|t| channels.iter().map(|c| c[t]).collect()).collect();
    let names = (0..channels.len()).map(|c| format!("dim{c}")).collect();
    let times = (0..len).map(|t| t as f64).collect();
    SequenceRecord::from_rows(format!("case{case:05}"), times, rows, names, label)
}

/// Writes `records` (unit-spaced, labels indexing `class_labels`) as `.ts`.
pub fn write_uea_ts(path: &Path, problem: &str, class_labels: &[String], records: &[SequenceRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    let dims = records.first().map_or(0, SequenceRecord::channels);
    writeln!(out, "@problemName {problem}")?;
    writeln!(out, "@timeStamps false")?;
    writeln!(out, "@missing {}", records.iter().any(|r| r.mask.iter().any(|m| !m)))?;
    writeln!(out, "@univariate {}", dims == 1)?;
    writeln!(out, "@dimensions {dims}")?;
    writeln!(out, "@classLabel true {}", class_labels.join(" "))?;
    writeln!(out, "@data")?;
    let mut line = String::new();
    for r in records {
        line.clear();
        for c in 0..r.channels() {
            for t in 0..r.len() {
                if t > 0 {
                    line.push(',');
                }
                match r.value(t, c) {
                    Some(v) => line.push_str(&format!("{v:?}")),
                    None => line.push('?'),
                }
            }
            line.push(':');
        }
        let label = class_labels.get(r.label).ok_or_else(|| Error::Config(format!("label {} has no class name", r.label)))?;
        line.push_str(label);
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "# toy\n@problemName Toy\n@timeStamps false\n@univariate false\n@dimensions 2\n\
                         @classLabel true up down flat\n@data\n1,2,3:4,5,6:down\n0.5,?,1:2,2,2:up\n";

    #[test]
    fn parses_a_small_file() {
        let ds = parse_uea_str(SMALL, Path::new("toy.ts")).unwrap();
        assert_eq!(ds.problem, "Toy");
        assert_eq!(ds.records.len(), 2);
        assert_eq!(ds.records[0].values.shape(), &[3, 2]);
        assert_eq!(ds.records[0].values.row(1), &[2.0, 5.0]);
        assert_eq!(ds.records[0].label, 1);
        assert_eq!(ds.records[1].label, 0);
        assert_eq!(ds.records[1].mask, vec![true, true, false, true, true, true]);
        assert_eq!(ds.records[1].times, vec![0.0, 1.0, 2.0]);
        // `flat` never occurs but still counts
        assert_eq!(ds.n_classes(), 3);
    }

    #[test]
    fn ragged_channels_report_the_case() {
        let bad = SMALL.replace("0.5,?,1:2,2,2:up", "0.5,1:2,2,2:up");
        let e = parse_uea_str(&bad, Path::new("toy.ts")).unwrap_err();
        assert!(matches!(&e, Error::Parse { line: 9, msg, .. } if msg.contains("case 1")), "{e}");
        let unknown = SMALL.replace(":up", ":sideways");
        assert!(parse_uea_str(&unknown, Path::new("toy.ts")).is_err());
    }

    #[test]
    fn write_then_parse_round_trips() {
        let ds = parse_uea_str(SMALL, Path::new("toy.ts")).unwrap();
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("rt.ts");
        write_uea_ts(&p, &ds.problem, &ds.class_labels, &ds.records).unwrap();
        let back = parse_uea_ts(&p).unwrap();
        assert_eq!(back.class_labels, ds.class_labels);
        for (a, b) in back.records.iter().zip(&ds.records) {
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.label, b.label);
            for t in 0..a.len() {
                for c in 0..a.channels() {
                    assert_eq!(a.value(t, c), b.value(t, c));
                }
            }
        }
    }
}
