use std::fmt::Write as _;
use std::path::Path;

use super::{AttackRecord, AttackSummary};
use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, fmt_mdeg, read_bytes, read_json, sha256_hex, write_json};
use crate::linegen::deg_to_mdeg;

pub const RECORDS_HEADER: &str = "model_id,image_id,row,col,alpha_deg,length,source_label,predicted_class,p0,p1";

pub fn records_to_csv(records: &[AttackRecord]) -> String {
    let mut s = String::with_capacity(64 * (records.len() + 1));
    s.push_str(RECORDS_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.model_id,
            r.image_id,
            r.row,
            r.col,
            fmt_mdeg(r.alpha_mdeg),
            r.length,
            r.source_label,
            r.predicted_class,
            r.probs[0],
            r.probs[1]
        );
    }
    s
}

/// Writes the records CSV atomically and returns its SHA-256.
pub fn write_records(path: &Path, records: &[AttackRecord]) -> Result<String> {
    let csv = records_to_csv(records);
    atomic_write(path, csv.as_bytes())?;
    Ok(sha256_hex(csv.as_bytes()))
}

pub fn read_records(path: &Path) -> Result<Vec<AttackRecord>> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Corrupt(format!("{} is not UTF-8", path.display())))?;
    let mut lines = text.lines();
    if lines.next() != Some(RECORDS_HEADER) {
        return Err(Error::Corrupt(format!("{}: unexpected header", path.display())));
    }
    lines
        .enumerate()
        .map(|(i, line)| parse_line(line).map_err(|e| Error::Corrupt(format!("{}:{}: {e}", path.display(), i + 2))))
        .collect()
}

fn parse_line(line: &str) -> std::result::Result<AttackRecord, String> {
    let f: Vec<&str> = line.split(',').collect();
    if f.len() != 10 {
        return Err(format!("expected 10 fields, found {}", f.len()));
    }
    fn num<T: std::str::FromStr>(s: &str, what: &str) -> std::result::Result<T, String> {
        s.parse().map_err(|_| format!("bad {what} {s:?}"))
    }
    let alpha: f64 = num(f[4], "alpha_deg")?;
    Ok(AttackRecord {
        model_id: f[0].to_string(),
        image_id: num(f[1], "image_id")?,
        row: num(f[2], "row")?,
        col: num(f[3], "col")?,
        alpha_mdeg: deg_to_mdeg(alpha).map_err(|e| e.to_string())?,
        length: num(f[5], "length")?,
        source_label: num(f[6], "source_label")?,
        predicted_class: num(f[7], "predicted_class")?,
        probs: [num(f[8], "p0")?, num(f[9], "p1")?],
    })
}

pub fn write_summary(path: &Path, summary: &AttackSummary) -> Result<()> {
    write_json(path, summary)
}

pub fn read_summary(path: &Path) -> Result<AttackSummary> {
    read_json(path)
}
