//! Output artifacts: structured text reports, CSV tables and SVG plots, all
//! carrying the same provenance header.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

use crate::svg::Plot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Text,
    Svg,
}

/// Shortest round-trip representation, switching to exponent form for very
/// small or large magnitudes.
pub fn num(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let a = x.abs();
    if (1e-4..1e15).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub command: String,
    pub digest: String,
    pub seed: u64,
}

impl Header {
    fn lines(&self, prefix: &str) -> String {
        format!(
            "{prefix}phaselab {} {}\n{prefix}config-sha256 {}\n{prefix}seed {}\n",
            self.command,
            env!("CARGO_PKG_VERSION"),
            self.digest,
            self.seed
        )
    }
}

/// One `[section]` of a structured text report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Section {
    pub name: String,
    pub entries: Vec<(String, String)>,
}

impl Section {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), entries: Vec::new() }
    }

    pub fn put(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.entries.push((key.into(), value.to_string()));
        self
    }

    pub fn num(&mut self, key: &str, x: f64) -> &mut Self {
        self.put(key, num(x))
    }

    pub fn nums(&mut self, key: &str, xs: &[f64]) -> &mut Self {
        let v: Vec<String> = xs.iter().map(|x| num(*x)).collect();
        self.put(key, format!("[{}]", v.join(", ")))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub sections: Vec<Section>,
}

impl Report {
    pub fn section(&mut self, name: impl Into<String>) -> &mut Section {
        self.sections.push(Section::new(name));
        self.sections.last_mut().unwrap()
    }

    pub fn find(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.find(section).and_then(|s| s.get(key))
    }

    pub fn get_f64(&self, section: &str, key: &str) -> Option<f64> {
        self.get(section, key).and_then(|v| v.parse().ok())
    }

    /// False if any section records `pass = false`.
    pub fn all_pass(&self) -> bool {
        self.sections.iter().all(|s| s.get("pass") != Some("false"))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "[{}]", s.name);
            for (k, v) in &s.entries {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }
}

/// A CSV table built column-first.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn with_columns(columns: Vec<String>) -> Self {
        Self { columns, rows: Vec::new() }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        debug_assert_eq!(cells.len(), self.columns.len());
        self.rows.push(cells);
    }

    pub fn nums(&mut self, xs: &[f64]) {
        self.row(xs.iter().map(|x| num(*x)).collect());
    }

    fn render(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

/// Writes artifacts into the output directory, honoring `--format`.
pub struct Sink {
    pub dir: PathBuf,
    pub header: Header,
    formats: Vec<Format>,
    pub written: Vec<PathBuf>,
}

impl Sink {
    pub fn new(dir: &Path, header: Header, formats: &[Format]) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf(), header, formats: formats.to_vec(), written: Vec::new() })
    }

    pub fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }

    fn write(&mut self, name: &str, body: String) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        self.written.push(path);
        Ok(())
    }

    pub fn csv(&mut self, name: &str, table: &Table) -> Result<()> {
        if !self.wants(Format::Csv) {
            return Ok(());
        }
        let body = self.header.lines("# ") + &table.render();
        self.write(&format!("{name}.csv"), body)
    }

    /// Raw CSV text produced elsewhere (layer exports, slices).
    pub fn csv_text(&mut self, name: &str, text: &str) -> Result<()> {
        if !self.wants(Format::Csv) {
            return Ok(());
        }
        let body = self.header.lines("# ") + text;
        self.write(&format!("{name}.csv"), body)
    }

    pub fn text(&mut self, name: &str, report: &Report) -> Result<()> {
        if !self.wants(Format::Text) {
            return Ok(());
        }
        let body = self.header.lines("# ") + "\n" + &report.render();
        self.write(&format!("{name}.txt"), body)
    }

    pub fn svg(&mut self, name: &str, plot: &Plot) -> Result<()> {
        if !self.wants(Format::Svg) {
            return Ok(());
        }
        let comment = format!("<!-- phaselab {} config-sha256 {} seed {} -->\n", self.header.command, self.header.digest, self.header.seed);
        self.write(&format!("{name}.svg"), plot.render(&comment))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn number_format_round_trips() {
        for x in [0.0, 1.0, -2.5, 1e-9, 123456.789, 6.02e23, f64::MIN_POSITIVE] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(num(1e-9), "1e-9");
        assert_eq!(num(0.5), "0.5");
    }

    #[test]
    fn report_render_and_lookup() {
        let mut r = Report::default();
        r.section("a").num("x", 0.25).put("pass", true);
        r.section("b").put("pass", false);
        assert_eq!(r.get_f64("a", "x"), Some(0.25));
        assert!(!r.all_pass());
        assert_eq!(r.render(), "[a]\nx = 0.25\npass = true\n\n[b]\npass = false\n");
    }

    #[test]
    fn digest_is_sha256() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
