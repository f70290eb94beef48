//! Flat key/value reports and versioned CSV files.
//!
//! Every artifact is plain text. Reports are `key = value` lines in
//! insertion order; CSV files start with a `# qswitch-csv v1` schema
//! comment so downstream tooling can sanity-check what it is reading.
//! Nothing here writes wall-clock times or host paths: rerunning a
//! command with the same seed must reproduce every byte.

use std::fmt::Display;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use qswitch::Result;

/// Ordered key/value summary of one command or preset run.
#[derive(Debug, Clone, Default)]
pub struct Report {
    entries: Vec<(String, String)>,
}

impl Report {
    pub fn new() -> Self {
        Report::default()
    }

    /// Record one entry. `f64` values go through `Display`, which in
    /// Rust is shortest-roundtrip and therefore stable across reruns.
    pub fn push(&mut self, key: &str, value: impl Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    /// Record a numeric slice as a single comma-joined entry.
    pub fn push_slice(&mut self, key: &str, values: &[f64]) {
        let joined = values
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        self.entries.push((key.to_string(), joined));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }
}

/// Write a CSV file with the schema comment line, a header row, and
/// pre-rendered data rows.
pub fn write_csv(
    path: &Path,
    kind: &str,
    meta: &[(&str, String)],
    header: &str,
    rows: &[String],
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "# qswitch-csv v1 kind={kind}")?;
    for (k, v) in meta {
        write!(out, " {k}={v}")?;
    }
    writeln!(out)?;
    writeln!(out, "{header}")?;
    for row in rows {
        writeln!(out, "{row}")?;
    }
    out.flush()?;
    Ok(())
}

/// Comma-join mixed field values for a CSV row.
pub fn csv_row(fields: &[String]) -> String {
    fields.join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_preserves_order_and_formats_floats() {
        let mut r = Report::new();
        r.push("alpha", 1u64);
        r.push("beta", 0.1f64);
        r.push_slice("gamma", &[1.0, 0.25]);
        assert_eq!(r.render(), "alpha = 1\nbeta = 0.1\ngamma = 1,0.25\n");
        assert_eq!(r.get("beta"), Some("0.1"));
        assert_eq!(r.get("missing"), None);
    }

    #[test]
    fn float_display_roundtrips() {
        // Display must reproduce the exact bits on parse, otherwise
        // reports are not a faithful record.
        for &x in &[0.1, 1.0 / 3.0, 2.556e-4, f64::MIN_POSITIVE] {
            let s = format!("{x}");
            assert_eq!(s.parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn csv_file_layout() {
        let dir = std::env::temp_dir().join(format!("qswitch-report-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.csv");
        write_csv(
            &path,
            "demo",
            &[("seed", "7".to_string())],
            "a,b",
            &["1,2".to_string()],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "# qswitch-csv v1 kind=demo seed=7\na,b\n1,2\n");
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
