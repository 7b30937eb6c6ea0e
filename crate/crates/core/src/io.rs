//! Field checkpoints (little-endian binary plus a JSON sidecar), CSV slices,
//! layer exports and point-cloud ingestion.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{BoundaryConditions, Face, GridSpec, ScalarField};
use crate::levelset::{LayerGeometry, LayerSet};

const MAGIC: &[u8; 8] = b"PHLBFLD1";

/// Human-readable description of a binary checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldMetadata {
    pub format: String,
    pub dim: usize,
    pub counts: Vec<usize>,
    pub lower: Vec<f64>,
    pub spacing: Vec<f64>,
    pub epsilon: f64,
    pub faces: Vec<[Face; 2]>,
    pub values: String,
    /// Caller-supplied provenance such as a config digest and seed.
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

fn face_code(f: Face) -> u8 {
    match f {
        Face::Dirichlet => 0,
        Face::Neumann => 1,
        Face::Periodic => 2,
    }
}

fn face_from(c: u8) -> Result<Face> {
    match c {
        0 => Ok(Face::Dirichlet),
        1 => Ok(Face::Neumann),
        2 => Ok(Face::Periodic),
        _ => Err(Error::Format(format!("unknown face code {c}"))),
    }
}

/// Header: magic, dim (u32), counts (u64), lower, spacing, epsilon (f64),
/// face codes (u8 pairs); then the values as f64, axis 0 slowest.
pub fn encode_field(field: &ScalarField) -> Vec<u8> {
    let g = field.grid();
    let d = g.dim();
    let mut out = Vec::with_capacity(64 + 8 * g.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for &c in g.counts() {
        out.extend_from_slice(&(c as u64).to_le_bytes());
    }
    for v in g.lower().iter().chain(g.spacing()).chain(std::iter::once(&field.epsilon())) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for a in 0..d {
        let [lo, hi] = field.bc().axis(a);
        out.push(face_code(lo));
        out.push(face_code(hi));
    }
    for v in field.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_field(bytes: &[u8]) -> Result<ScalarField> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a phaselab field checkpoint".into()));
    }
    let d = r.u32()? as usize;
    if d == 0 || d > 3 {
        return Err(Error::Format(format!("dimension {d} in header")));
    }
    let counts = (0..d).map(|_| r.u64().map(|c| c as usize)).collect::<Result<Vec<_>>>()?;
    let lower = (0..d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let spacing = (0..d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let epsilon = r.f64()?;
    let faces = (0..d)
        .map(|_| {
            let lo = face_from(r.take(1)?[0])?;
            let hi = face_from(r.take(1)?[0])?;
            Ok([lo, hi])
        })
        .collect::<Result<Vec<_>>>()?;
    let grid = GridSpec::from_parts(&lower, &spacing, &counts)?;
    let n = grid.len();
    let raw = r.take(8 * n)?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after the values", bytes.len() - r.pos)));
    }
    let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    ScalarField::new(grid, BoundaryConditions::new(faces)?, epsilon, values)
}

pub fn metadata(field: &ScalarField, values_file: &str, extra: &BTreeMap<String, String>) -> FieldMetadata {
    let g = field.grid();
    FieldMetadata {
        format: "phaselab-field/1".into(),
        dim: g.dim(),
        counts: g.counts().to_vec(),
        lower: g.lower().to_vec(),
        spacing: g.spacing().to_vec(),
        epsilon: field.epsilon(),
        faces: (0..g.dim()).map(|a| field.bc().axis(a)).collect(),
        values: values_file.into(),
        extra: extra.clone(),
    }
}

/// Write `<stem>.bin` and `<stem>.json`; returns both paths.
pub fn write_field(dir: &Path, stem: &str, field: &ScalarField, extra: &BTreeMap<String, String>) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let bin = dir.join(format!("{stem}.bin"));
    let json = dir.join(format!("{stem}.json"));
    fs::write(&bin, encode_field(field))?;
    let meta = metadata(field, &format!("{stem}.bin"), extra);
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&json, text + "\n")?;
    Ok((bin, json))
}

/// Read a checkpoint from its `.bin` or `.json` path, cross-checking the
/// sidecar when present.
pub fn read_field(path: &Path) -> Result<ScalarField> {
    let (bin, json) = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => {
            let text = fs::read_to_string(path)?;
            let meta: FieldMetadata = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            (path.with_file_name(&meta.values), Some(meta))
        }
        _ => {
            let side = path.with_extension("json");
            let meta = match fs::read_to_string(&side) {
                Ok(t) => Some(serde_json::from_str::<FieldMetadata>(&t).map_err(|e| Error::Format(format!("{}: {e}", side.display())))?),
                Err(_) => None,
            };
            (path.to_path_buf(), meta)
        }
    };
    let field = decode_field(&fs::read(&bin)?)?;
    if let Some(m) = json {
        let g = field.grid();
        if m.counts != g.counts() || m.dim != g.dim() || m.epsilon != field.epsilon() {
            return Err(Error::Format(format!("sidecar disagrees with the header of {}", bin.display())));
        }
    }
    Ok(field)
}

/// CSV of u along `axis` through the node `through` (other indices fixed).
pub fn slice_csv(field: &ScalarField, axis: usize, through: &[usize]) -> Result<String> {
    let g = field.grid();
    if axis >= g.dim() || through.len() != g.dim() || through.iter().zip(g.counts()).any(|(i, c)| i >= c) {
        return Err(Error::InvalidArgument("slice axis or node out of range".into()));
    }
    let mut out = String::from("x,u\n");
    let mut m = through.to_vec();
    for i in 0..g.counts()[axis] {
        m[axis] = i;
        out.push_str(&format!("{},{}\n", g.coord(axis, i), field.get(&m)));
    }
    Ok(out)
}

/// One CSV per layer: base coordinates, height, H, |II|.
pub fn layers_csv(layers: &LayerSet, geometry: Option<&LayerGeometry>) -> Vec<String> {
    let d = layers.base.dim();
    (0..layers.count())
        .map(|i| {
            let mut s: String = (0..d).map(|a| format!("y{a},")).collect();
            s.push_str("height,mean_curvature,second_fundamental\n");
            for k in 0..layers.base.len() {
                for c in layers.base.point(k) {
                    s.push_str(&format!("{c},"));
                }
                let (h, ii) = geometry.map_or((f64::NAN, f64::NAN), |g| (g.mean_curvature[i][k], g.second_fundamental[i][k]));
                s.push_str(&format!("{},{},{}\n", layers.heights[i][k], h, ii));
            }
            s
        })
        .collect()
}

/// Numeric rows of a CSV; `#` comment lines and a non-numeric header are
/// skipped.
pub fn read_numeric_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rdr =
        csv::ReaderBuilder::new().has_headers(false).comment(Some(b'#')).trim(csv::Trim::All).flexible(false).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(|f| f.parse::<f64>()).collect();
        match parsed {
            Ok(v) => rows.push(v),
            Err(_) if rows.is_empty() && line == 0 => continue,
            Err(e) => return Err(Error::Format(format!("record {}: {e}", line + 1))),
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_field() -> ScalarField {
        let g = GridSpec::new(&[-1.0, 0.0], &[1.0, 0.7], &[11, 8]).unwrap();
        let bc = BoundaryConditions::new(vec![[Face::Dirichlet, Face::Neumann], [Face::Periodic, Face::Periodic]]).unwrap();
        ScalarField::from_fn(g, bc, 0.3, |p| (p[0] * 3.0).tanh() + 0.1 * (p[1] * 9.0).cos()).unwrap()
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let f = sample_field();
        let back = decode_field(&encode_field(&f)).unwrap();
        assert_eq!(back, f);
        let mut bytes = encode_field(&f);
        bytes.pop();
        assert!(matches!(decode_field(&bytes), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(decode_field(&bytes).is_err());
    }

    #[test]
    fn files_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let f = sample_field();
        let extra = BTreeMap::from([("seed".to_string(), "7".to_string())]);
        let (bin, json) = write_field(dir.path(), "u", &f, &extra).unwrap();
        assert_eq!(read_field(&bin).unwrap(), f);
        assert_eq!(read_field(&json).unwrap(), f);
        let meta: FieldMetadata = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
        assert_eq!(meta.extra["seed"], "7");
    }

    #[test]
    fn csv_reader_skips_comments_and_header() {
        let rows = read_numeric_csv("# digest abc\nx,y,z\n1,2,3\n4, 5 ,6\n").unwrap();
        assert_eq!(rows, vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        assert!(read_numeric_csv("1,2\n3,x\n").is_err());
        let s = slice_csv(&sample_field(), 0, &[0, 2]).unwrap();
        assert_eq!(s.lines().count(), 12);
    }
}
