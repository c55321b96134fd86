//! Score CSV files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::check_consistent;
use crate::metrics::ScoreRecord;

pub const HEADER: [&str; 7] =
    ["probe_id", "reference_id", "is_genuine", "probe_liveness", "pai_species", "match_score", "pad_score"];

/// Rounds to the 9 significant digits stored in score files. Idempotent, so
/// quantized scores survive a write/read cycle bit for bit.
pub fn quantize_score(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

fn format_score(x: f64) -> String {
    let q = quantize_score(x);
    if q == 0.0 { "0".into() } else { q.to_string() }
}

pub fn write_scores_to<W: std::io::Write>(records: &[ScoreRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_err = |e: csv::Error| Error::invalid(format!("writing scores: {e}"));
    w.write_record(HEADER).map_err(to_err)?;
    for r in records {
        w.write_record([
            r.probe_id.as_str(),
            r.reference_id.as_str(),
            if r.is_genuine { "true" } else { "false" },
            r.probe_liveness.as_str(),
            r.pai_species.as_str(),
            &format_score(r.match_score),
            &format_score(r.pad_score),
        ])
        .map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io("<scores>", e))
}

pub fn write_scores(records: &[ScoreRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_scores_to(records, &mut buf)?;
    crate::config::write_atomic(path, &buf)
}

pub fn read_scores_from<R: std::io::Read>(input: R, path: &Path) -> Result<Vec<ScoreRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(input);
    let bad = |line: usize, message: String| Error::ScoreFile { path: path.to_path_buf(), line, message };
    let mut rows = rdr.records();
    match rows.next() {
        Some(Ok(h)) if h.iter().eq(HEADER) => {}
        Some(Ok(h)) => return Err(bad(1, format!("expected header {:?}, found {:?}", HEADER.join(","), h.iter().collect::<Vec<_>>().join(",")))),
        Some(Err(e)) => return Err(bad(1, e.to_string())),
        None => return Err(bad(1, "missing header".into())),
    }
    let mut out = Vec::new();
    for row in rows {
        let row = row.map_err(|e| bad(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.len() != HEADER.len() {
            return Err(bad(line, format!("expected {} fields, found {}", HEADER.len(), row.len())));
        }
        let field = |i: usize| &row[i];
        let is_genuine = match field(2) {
            "true" | "1" => true,
            "false" | "0" => false,
            other => return Err(bad(line, format!("is_genuine: expected true|false, found {other:?}"))),
        };
        let parse_score = |i: usize| -> Result<f64> {
            let v: f64 = field(i).trim().parse().map_err(|_| bad(line, format!("{}: not a number: {:?}", HEADER[i], field(i))))?;
            if !v.is_finite() {
                return Err(bad(line, format!("{}: non-finite score", HEADER[i])));
            }
            Ok(v)
        };
        let record = ScoreRecord {
            probe_id: field(0).to_string(),
            reference_id: field(1).to_string(),
            is_genuine,
            probe_liveness: field(3).parse().map_err(|e: Error| bad(line, e.to_string()))?,
            pai_species: field(4).parse().map_err(|e: Error| bad(line, e.to_string()))?,
            match_score: parse_score(5)?,
            pad_score: parse_score(6)?,
        };
        check_consistent(record.probe_liveness, record.pai_species).map_err(|e| bad(line, e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_scores_from(std::io::BufReader::new(file), path)
}
