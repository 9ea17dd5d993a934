//! Output plumbing: RFC-4180 CSV emission with the run digest on every row,
//! run manifests with per-file checksums, and direct SVG rendering for the
//! phase portraits, critical-set geometry and scaling plots.

use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex_string(&h.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Collects output files for one run and finishes with a manifest carrying
/// per-file checksums.
pub struct RunWriter {
    pub out_dir: PathBuf,
    pub digest: String,
    files: Vec<(String, String)>,
    started: Instant,
    threads: usize,
}

impl RunWriter {
    pub fn new(
        out_dir: &Path,
        config_digest: &str,
        threads: usize,
    ) -> Result<RunWriter, ReportError> {
        fs::create_dir_all(out_dir).map_err(|source| ReportError::Io {
            path: out_dir.to_path_buf(),
            source,
        })?;
        Ok(RunWriter {
            out_dir: out_dir.to_path_buf(),
            digest: config_digest.to_string(),
            files: Vec::new(),
            started: Instant::now(),
            threads,
        })
    }

    /// Write a CSV file; every row gets the run digest as the first field.
    pub fn write_csv(
        &mut self,
        name: &str,
        header: &[&str],
        rows: &[Vec<String>],
    ) -> Result<PathBuf, ReportError> {
        let path = self.out_dir.join(name);
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::CRLF)
            .from_path(&path)?;
        let mut full_header = vec!["run_digest"];
        full_header.extend_from_slice(header);
        wtr.write_record(&full_header)?;
        for row in rows {
            let mut rec = Vec::with_capacity(row.len() + 1);
            rec.push(self.digest.clone());
            rec.extend(row.iter().cloned());
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(|source| ReportError::Io {
            path: path.clone(),
            source,
        })?;
        self.register(&path)?;
        Ok(path)
    }

    /// Write JSON-lines content (one serialized record per line, each
    /// tagged with the run digest).
    pub fn write_jsonl<T: Serialize>(
        &mut self,
        name: &str,
        records: &[T],
    ) -> Result<PathBuf, ReportError> {
        let path = self.out_dir.join(name);
        let mut out = String::new();
        for r in records {
            let mut obj = serde_json::to_value(r)?;
            if let serde_json::Value::Object(ref mut m) = obj {
                m.insert(
                    "run_digest".to_string(),
                    serde_json::Value::String(self.digest.clone()),
                );
            }
            out.push_str(&serde_json::to_string(&obj)?);
            out.push('\n');
        }
        fs::write(&path, out).map_err(|source| ReportError::Io {
            path: path.clone(),
            source,
        })?;
        self.register(&path)?;
        Ok(path)
    }

    pub fn write_text(&mut self, name: &str, content: &str) -> Result<PathBuf, ReportError> {
        let path = self.out_dir.join(name);
        fs::write(&path, content).map_err(|source| ReportError::Io {
            path: path.clone(),
            source,
        })?;
        self.register(&path)?;
        Ok(path)
    }

    fn register(&mut self, path: &Path) -> Result<(), ReportError> {
        let bytes = fs::read(path).map_err(|source| ReportError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.files.push((
            path.file_name().unwrap().to_string_lossy().into_owned(),
            sha256_hex(&bytes),
        ));
        Ok(())
    }

    /// Emit the manifest and consume the writer.
    pub fn finish(self) -> Result<PathBuf, ReportError> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            config_digest: &'a str,
            code_version: &'a str,
            files: Vec<FileEntry<'a>>,
            wall_clock_seconds: f64,
            thread_count: usize,
        }
        #[derive(Serialize)]
        struct FileEntry<'a> {
            name: &'a str,
            sha256: &'a str,
        }
        let manifest = Manifest {
            config_digest: &self.digest,
            code_version: env!("CARGO_PKG_VERSION"),
            files: self
                .files
                .iter()
                .map(|(n, s)| FileEntry { name: n, sha256: s })
                .collect(),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            thread_count: self.threads,
        };
        let path = self.out_dir.join("manifest.json");
        let mut f = fs::File::create(&path).map_err(|source| ReportError::Io {
            path: path.clone(),
            source,
        })?;
        f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())
            .map_err(|source| ReportError::Io {
                path: path.clone(),
                source,
            })?;
        Ok(path)
    }
}

// ---------------------------------------------------------------------------
// SVG rendering
// ---------------------------------------------------------------------------

/// Minimal direct SVG emitter.
pub struct Svg {
    width: u32,
    height: u32,
    body: String,
}

impl Svg {
    pub fn new(width: u32, height: u32) -> Svg {
        Svg {
            width,
            height,
            body: String::new(),
        }
    }

    pub fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = write!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}"/>"#
        );
        self.body.push('\n');
    }

    pub fn circle(&mut self, cx: f64, cy: f64, r: f64, fill: &str) {
        let _ = write!(
            self.body,
            r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="{r:.2}" fill="{fill}"/>"#
        );
        self.body.push('\n');
    }

    pub fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str) {
        let mut s = String::new();
        for (x, y) in pts {
            let _ = write!(s, "{x:.2},{y:.2} ");
        }
        let _ = write!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="1"/>"#,
            s.trim_end()
        );
        self.body.push('\n');
    }

    pub fn text(&mut self, x: f64, y: f64, content: &str) {
        let _ = write!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" font-size="11" font-family="monospace">{content}</text>"#
        );
        self.body.push('\n');
    }

    pub fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.width, self.height, self.width, self.height, self.body
        )
    }
}

/// Pixel classification grid for the critical-set geometry render.
#[derive(Clone, Debug)]
pub struct ClassGrid {
    pub width: usize,
    pub height: usize,
    /// 0 = outside, 1 = augmented order-1, 2 = order-1, 3 = extended
    /// order-2, 4 = augmented order-2, 5 = core
    pub classes: Vec<u8>,
}

impl ClassGrid {
    pub fn class_at(&self, col: usize, row: usize) -> u8 {
        self.classes[row * self.width + col]
    }

    pub fn count_at_least(&self, level: u8) -> usize {
        self.classes.iter().filter(|&&c| c >= level).count()
    }

    /// Number of pixels with class ≥ `level` per row.
    pub fn row_run_widths(&self, level: u8) -> Vec<usize> {
        (0..self.height)
            .map(|r| {
                (0..self.width)
                    .filter(|&c| self.class_at(c, r) >= level)
                    .count()
            })
            .collect()
    }

    pub fn to_svg(&self, scale: u32) -> String {
        let mut svg = Svg::new(self.width as u32 * scale, self.height as u32 * scale);
        let palette = [
            "#ffffff", "#ffe2b8", "#ffb86c", "#d06040", "#903020", "#401008",
        ];
        for row in 0..self.height {
            // run-length encode each row
            let mut col = 0;
            while col < self.width {
                let class = self.class_at(col, row);
                let mut end = col + 1;
                while end < self.width && self.class_at(end, row) == class {
                    end += 1;
                }
                if class > 0 {
                    svg.rect(
                        (col as u32 * scale) as f64,
                        (row as u32 * scale) as f64,
                        ((end - col) as u32 * scale) as f64,
                        scale as f64,
                        palette[class as usize % palette.len()],
                    );
                }
                col = end;
            }
        }
        svg.finish()
    }
}

/// Simple log-log scatter+line plot.
pub fn log_log_plot(points: &[(f64, f64)], title: &str) -> String {
    let mut svg = Svg::new(480, 360);
    let valid: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|&(x, y)| (x.log10(), y.log10()))
        .collect();
    if valid.len() >= 2 {
        let (x0, x1) = valid
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &(x, _)| {
                (a.min(x), b.max(x))
            });
        let (y0, y1) = valid
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &(_, y)| {
                (a.min(y), b.max(y))
            });
        let sx = |x: f64| 40.0 + 400.0 * (x - x0) / (x1 - x0).max(1e-12);
        let sy = |y: f64| 320.0 - 280.0 * (y - y0) / (y1 - y0).max(1e-12);
        let pts: Vec<(f64, f64)> = valid.iter().map(|&(x, y)| (sx(x), sy(y))).collect();
        svg.polyline(&pts, "#3060c0");
        for &(x, y) in &pts {
            svg.circle(x, y, 3.0, "#c03030");
        }
    }
    svg.text(12.0, 16.0, title);
    svg.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn csv_rows_carry_digest_and_manifest_lists_files() {
        let dir = std::env::temp_dir().join(format!("ft-report-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let mut w = RunWriter::new(&dir, "deadbeef", 2).unwrap();
        w.write_csv(
            "demo.csv",
            &["a", "b"],
            &[vec!["1".into(), "2".into()], vec!["3".into(), "4".into()]],
        )
        .unwrap();
        let manifest_path = w.finish().unwrap();
        let content = fs::read_to_string(dir.join("demo.csv")).unwrap();
        for line in content.lines().skip(1) {
            assert!(line.starts_with("deadbeef,"), "{line}");
        }
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(manifest_path).unwrap()).unwrap();
        assert_eq!(manifest["config_digest"], "deadbeef");
        assert_eq!(manifest["files"][0]["name"], "demo.csv");
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn svg_emits_valid_skeleton() {
        let grid = ClassGrid {
            width: 4,
            height: 2,
            classes: vec![0, 1, 1, 0, 0, 2, 2, 0],
        };
        let svg = grid.to_svg(4);
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert!(svg.contains("<rect"));
        assert_eq!(grid.count_at_least(2), 2);
        assert_eq!(grid.row_run_widths(1), vec![2, 2]);
    }
}
