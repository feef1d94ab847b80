//! Report plumbing: provenance headers, aligned text tables, and the
//! CSV/text file pair every command emits.
//!
//! Reports must be byte-identical across runs with the same config and
//! seed, so nothing here writes timestamps, absolute paths, or anything
//! else that varies between machines.

use std::path::{Path, PathBuf};

use microexit::format::fnv1a64;
use microexit::{Error, Result};

/// The lines prepended to every report: which command produced it, under
/// which config and seed, from which artifacts.
#[derive(Debug, Clone)]
pub struct Provenance {
    lines: Vec<String>,
}

impl Provenance {
    pub fn new(command: &str, config_bytes: &[u8], seed: u64) -> Self {
        Provenance {
            lines: vec![
                format!("# microexit {command}"),
                format!("# config: fnv64 {:016x}", fnv1a64(config_bytes)),
                format!("# seed: {seed}"),
            ],
        }
    }

    /// Records an input artifact by basename and content checksum.
    pub fn artifact(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Data(format!("cannot read artifact {}: {e}", path.display())))?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        self.lines.push(format!("# {name}: fnv64 {:016x}", fnv1a64(&bytes)));
        Ok(())
    }

    pub fn header(&self) -> String {
        let mut out = self.lines.join("\n");
        out.push('\n');
        out
    }
}

/// Renders rows as an aligned table: first row is the header, first column
/// left-aligned, everything else right-aligned.
pub fn aligned(rows: &[Vec<String>]) -> String {
    let columns = rows.iter().map(Vec::len).max().unwrap_or(0);
    let width = |c: usize| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..columns).map(width).collect();
    let mut out = String::new();
    for row in rows {
        for (c, cell) in row.iter().enumerate() {
            if c == 0 {
                out.push_str(&format!("{:<w$}", cell, w = widths[0]));
            } else {
                out.push_str(&format!("  {:>w$}", cell, w = widths[c]));
            }
        }
        out.push('\n');
    }
    out
}

/// Joins rows into CSV lines. Cells are plain values by construction
/// (numbers, names without commas), so no quoting is applied.
pub fn csv(rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Writes `<name>.csv` and `<name>.txt` under `dir`, both starting with
/// the provenance header, and returns the text form for printing.
pub fn emit(dir: &Path, name: &str, provenance: &Provenance, rows: &[Vec<String>], notes: &[String]) -> Result<String> {
    let mut csv_body = provenance.header();
    csv_body.push_str(&csv(rows));
    write(dir.join(format!("{name}.csv")), &csv_body)?;

    let mut text_body = provenance.header();
    text_body.push_str(&aligned(rows));
    for note in notes {
        text_body.push_str(note);
        text_body.push('\n');
    }
    write(dir.join(format!("{name}.txt")), &text_body)?;
    Ok(text_body)
}

fn write(path: PathBuf, content: &str) -> Result<()> {
    std::fs::write(&path, content)
        .map_err(|e| Error::Data(format!("cannot write report {}: {e}", path.display())))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

pub fn percent(value: f64) -> String {
    format!("{:.2}", 100.0 * value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_carries_command_config_hash_and_seed() {
        let provenance = Provenance::new("synth", b"", 42);
        let header = provenance.header();
        assert!(header.starts_with("# microexit synth\n"));
        assert!(header.contains("# config: fnv64 cbf29ce484222325\n"));
        assert!(header.contains("# seed: 42\n"));
    }

    #[test]
    fn aligned_pads_every_column() {
        let rows = vec![
            vec!["variant".into(), "accuracy".into()],
            vec!["early".into(), "0.91".into()],
            vec!["baseline-of-record".into(), "0.95".into()],
        ];
        let table = aligned(&rows);
        let widths: Vec<usize> = table.lines().map(str::len).collect();
        assert_eq!(widths[0], widths[1]);
        assert_eq!(widths[1], widths[2]);
        // Col 0 pads to the longest name, then a two-space gap, then the
        // value right-justified to its column width.
        let head = format!("{:<18}  {:>8}", "variant", "accuracy");
        assert!(table.contains(&head), "{table:?}");
    }
}
