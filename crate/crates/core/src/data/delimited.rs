//! Directory-of-files sequence format.
//!
//! Each sequence is `<id>.csv` with a header `t,<channel>,...`; empty cells or
//! `NaN` mark missing values. `labels.csv` maps `id,label` and the optional
//! `statics.csv` maps `id,<feature>,...`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::SequenceRecord;
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::par;

pub const LABELS_FILE: &str = "labels.csv";
pub const STATICS_FILE: &str = "statics.csv";

fn parse_err(file: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse { file: file.to_path_buf(), line: line as usize, msg: msg.into() }
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(path, 1, e.to_string()))
}

fn cell(path: &Path, line: u64, s: &str) -> Result<f64> {
    if s.is_empty() || s.eq_ignore_ascii_case("nan") {
        return Ok(f64::NAN);
    }
    s.parse::<f64>().map_err(|_| parse_err(path, line, format!("`{s}` is not a number")))
}

/// Reads a `key,<fields...>` side table into a map.
fn side_table(path: &Path) -> Result<(Vec<String>, HashMap<String, (u64, Vec<String>)>)> {
    let mut rd = reader(path)?;
    let header: Vec<String> = rd.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.iter().map(str::to_string).collect();
    let mut out = HashMap::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| parse_err(path, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(parse_err(path, line, format!("{} fields, header has {}", rec.len(), header.len())));
        }
        let id = rec[0].to_string();
        if out.insert(id.clone(), (line, rec.iter().skip(1).map(str::to_string).collect())).is_some() {
            return Err(parse_err(path, line, format!("duplicate id `{id}`")));
        }
    }
    Ok((header, out))
}

/// Parses one sequence file (label and statics attached by the caller).
pub fn parse_sequence_file(path: &Path, id: &str, label: usize) -> Result<SequenceRecord> {
    let mut rd = reader(path)?;
    let header: Vec<String> = rd.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("t") {
        return Err(parse_err(path, 1, "first column must be `t`"));
    }
    let names = header[1..].to_vec();
    let mut times = Vec::new();
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| parse_err(path, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(parse_err(path, line, format!("ragged row: {} fields, header has {}", rec.len(), header.len())));
        }
        let t = cell(path, line, &rec[0])?;
        if t.is_nan() {
            return Err(parse_err(path, line, "missing time"));
        }
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(Error::Ordering(format!("{}:{line}: time {t} does not increase over {prev}", path.display())));
            }
        }
        times.push(t);
        rows.push(rec.iter().skip(1).map(|s| cell(path, line, s)).collect::<Result<Vec<_>>>()?);
    }
    if times.is_empty() {
        return Err(parse_err(path, 1, "no observations"));
    }
    SequenceRecord::from_rows(id, times, rows, names, label)
}

/// Reads every sequence in `dir`, sorted by id.
pub fn parse_csv_sequences(dir: &Path) -> Result<Vec<SequenceRecord>> {
    let labels_path = dir.join(LABELS_FILE);
    if !labels_path.exists() {
        return Err(parse_err(&labels_path, 0, "labels file not found"));
    }
    let (_, labels) = side_table(&labels_path)?;
    let statics_path = dir.join(STATICS_FILE);
    let statics = if statics_path.exists() { Some(side_table(&statics_path)?.1) } else { None };

    let mut files: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if path.extension().and_then(|e| e.to_str()) != Some("csv") || name == LABELS_FILE || name == STATICS_FILE {
            continue;
        }
        files.push((name.trim_end_matches(".csv").to_string(), path));
    }
    files.sort();

    let parsed = par::map_range(files.len(), |i| -> Result<SequenceRecord> {
        let (id, path) = &files[i];
        let Some((line, fields)) = labels.get(id) else {
            return Err(parse_err(&labels_path, 0, format!("no label for sequence `{id}`")));
        };
        let label = fields
            .first()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| parse_err(&labels_path, *line, format!("unknown label for `{id}`")))?;
        let mut rec = parse_sequence_file(path, id, label)?;
        if let Some(st) = &statics {
            let (sline, fields) = st.get(id).ok_or_else(|| parse_err(&statics_path, 0, format!("no statics for `{id}`")))?;
            let vals = fields.iter().map(|s| cell(&statics_path, *sline, s)).collect::<Result<Vec<_>>>()?;
            if vals.iter().any(|v| v.is_nan()) {
                return Err(parse_err(&statics_path, *sline, "missing static feature"));
            }
            rec.statics = Some(vals);
        }
        Ok(rec)
    });
    let records = parsed.into_iter().collect::<Result<Vec<_>>>()?;
    for id in labels.keys() {
        if !files.iter().any(|(f, _)| f == id) {
            return Err(parse_err(&labels_path, labels[id].0, format!("label for unknown sequence `{id}`")));
        }
    }
    Ok(records)
}

fn fmt_cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:?}")
    }
}

/// Writes records in the layout read by [`parse_csv_sequences`].
pub fn write_csv_sequences(dir: &Path, records: &[SequenceRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut labels = csv::Writer::from_path(dir.join(LABELS_FILE)).map_err(io)?;
    labels.write_record(["id", "label"]).map_err(io)?;
    let with_statics = records.first().is_some_and(|r| r.statics.is_some());
    let mut statics = if with_statics { Some(csv::Writer::from_path(dir.join(STATICS_FILE)).map_err(io)?) } else { None };
    if let (Some(w), Some(first)) = (statics.as_mut(), records.first()) {
        let n = first.statics.as_ref().map_or(0, Vec::len);
        let mut h = vec!["id".to_string()];
        h.extend((0..n).map(|i| format!("s{i}")));
        w.write_record(&h).map_err(io)?;
    }
    for r in records {
        let mut w = csv::Writer::from_path(dir.join(format!("{}.csv", r.id))).map_err(io)?;
        let mut h = vec!["t".to_string()];
        h.extend(r.channel_names.iter().cloned());
        w.write_record(&h).map_err(io)?;
        for (i, t) in r.times.iter().enumerate() {
            let mut row = vec![format!("{t:?}")];
            row.extend(r.values.row(i).iter().map(|v| fmt_cell(*v)));
            w.write_record(&row).map_err(io)?;
        }
        w.flush()?;
        labels.write_record([r.id.clone(), r.label.to_string()]).map_err(io)?;
        if let Some(sw) = statics.as_mut() {
            let vals = r.statics.as_ref().ok_or_else(|| Error::Config(format!("sequence {} lacks statics", r.id)))?;
            let mut row = vec![r.id.clone()];
            row.extend(vals.iter().map(|v| format!("{v:?}")));
            sw.write_record(&row).map_err(io)?;
        }
    }
    labels.flush()?;
    if let Some(mut sw) = statics {
        sw.flush()?;
    }
    Ok(())
}

/// Convenience for tests and synthetic data: a record without missing cells.
pub fn dense_record(id: &str, times: Vec<f64>, values: Tensor, names: Vec<String>, label: usize) -> Result<SequenceRecord> {
    let (n, _) = values.dims2()?;
    let rows = (0..n).map(|i| values.row(i).to_vec()).collect();
    SequenceRecord::from_rows(id, times, rows, names, label)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    #[test]
    fn parses_masks_labels_and_statics() {
        let d = tempfile::tempdir().unwrap();
        write(d.path(), "a.csv", "t,x,y\n0,1,2\n0.5,3,4\n1.5,5,6\n");
        write(d.path(), "b.csv", "t,x,y\n0,1,\n1,NaN,4\n");
        write(d.path(), LABELS_FILE, "id,label\na,1\nb,0\n");
        write(d.path(), STATICS_FILE, "id,age\na,40\nb,61.5\n");
        let recs = parse_csv_sequences(d.path()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].id, "a");
        assert!(recs[0].mask.iter().all(|m| *m));
        assert_eq!(recs[0].label, 1);
        assert_eq!(recs[1].mask, vec![true, false, false, true]);
        assert_eq!(recs[1].statics, Some(vec![61.5]));
    }

    #[test]
    fn decreasing_time_names_the_line() {
        let d = tempfile::tempdir().unwrap();
        write(d.path(), "a.csv", "t,x\n0,1\n2,1\n1,1\n");
        write(d.path(), LABELS_FILE, "id,label\na,0\n");
        let err = parse_csv_sequences(d.path()).unwrap_err();
        assert!(matches!(&err, Error::Ordering(m) if m.contains("a.csv:4")), "{err}");
    }

    #[test]
    fn ragged_rows_and_missing_labels_are_errors() {
        let d = tempfile::tempdir().unwrap();
        write(d.path(), "a.csv", "t,x\n0,1\n1,1,3\n");
        write(d.path(), LABELS_FILE, "id,label\na,0\n");
        assert!(matches!(parse_csv_sequences(d.path()), Err(Error::Parse { line: 3, .. })));

        write(d.path(), "a.csv", "t,x\n0,1\n");
        write(d.path(), LABELS_FILE, "id,label\na,zero\n");
        assert!(matches!(parse_csv_sequences(d.path()), Err(Error::Parse { .. })));
        write(d.path(), LABELS_FILE, "id,label\nb,0\n");
        assert!(parse_csv_sequences(d.path()).is_err());
    }

    #[test]
    fn round_trip_is_identity() {
        let d = tempfile::tempdir().unwrap();
        let mut a = SequenceRecord::from_rows(
            "s0",
            vec![0.0, 0.1, 0.30000000000000004],
            vec![vec![1e-300, f64::NAN], vec![-2.5, 3.0], vec![f64::NAN, 7.125]],
            vec!["p".into(), "q".into()],
            2,
        )
        .unwrap();
        a.statics = Some(vec![0.1, -3.0]);
        let mut b = SequenceRecord::from_rows("s1", vec![5.0], vec![vec![1.0, 2.0]], vec!["p".into(), "q".into()], 0).unwrap();
        b.statics = Some(vec![9.0, 8.0]);
        write_csv_sequences(d.path(), &[a.clone(), b.clone()]).unwrap();
        let back = parse_csv_sequences(d.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (x, y) in back.iter().zip([&a, &b]) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.times, y.times);
            assert_eq!(x.mask, y.mask);
            assert_eq!(x.label, y.label);
            assert_eq!(x.statics, y.statics);
            let bits = |r: &SequenceRecord| r.values.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            let nan_norm = |r: &SequenceRecord| bits(r).iter().zip(&r.mask).map(|(b, m)| if *m { *b } else { 0 }).collect::<Vec<_>>();
            assert_eq!(nan_norm(x), nan_norm(y));
        }
    }
}
