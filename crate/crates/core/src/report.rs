//! Figure and table emission: CSV tables, SVG line plots, PNG sample grids
//! and a hashed manifest of everything written.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{ErrorCurve, GradNormRow, RecallReport, ShiftInequalityReport};
use crate::denoiser::ModelTag;
use crate::error::{validate, Error, Result};
use crate::harness::{comparison_csv, ComparisonRow, ExperimentRecord};
use crate::tensor::Mat;

pub const MANIFEST_NAME: &str = "manifest.json";

/// Everything a report may contain. Empty fields emit nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct ReportInputs<'a> {
    pub records: &'a [ExperimentRecord],
    pub curves: &'a [ErrorCurve],
    pub grad_table: &'a [GradNormRow],
    pub recall: &'a [RecallReport],
    pub comparison: &'a [ComparisonRow],
    pub inequality: Option<&'a ShiftInequalityReport>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        crate::checkpoint::load_json(path)
    }
}

fn tag_name(tag: ModelTag) -> &'static str {
    match tag {
        ModelTag::Pretrained => "pretrained",
        ModelTag::Adapter => "adapter",
        ModelTag::Oracle => "oracle",
    }
}

pub fn curve_csv(c: &ErrorCurve) -> String {
    let mut s = String::from("t,mean,std,n\n");
    for i in 0..c.timesteps.len() {
        let _ = writeln!(s, "{},{},{},{}", c.timesteps[i], c.mean_error[i], c.std_error[i], c.sample_count);
    }
    s
}

pub fn grad_table_csv(rows: &[GradNormRow]) -> String {
    let mut s = String::from("objective,median,p10,p90\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.objective, r.median, r.p10, r.p90);
    }
    s
}

pub fn recall_csv(r: &RecallReport) -> String {
    let mut s = String::from("class,hits,total\n");
    for (c, h, t) in &r.per_class {
        let _ = writeln!(s, "{c},{h},{t}");
    }
    s
}

pub fn inequality_csv(r: &ShiftInequalityReport) -> String {
    let mut s = String::from("t,dt,mean_at_t,mean_at_shift,diff_stderr,pass\n");
    for p in &r.pairs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            p.t, p.dt, p.mean_at_t, p.mean_at_shift, p.diff_stderr, p.pass
        );
    }
    s
}

/// Minimal line chart; one polyline per series.
pub fn line_plot_svg(title: &str, x_label: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let pts = series.iter().flat_map(|(_, p)| p.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{M} {} H{} M{M} {M} V{}" stroke="black" fill="none"/>"#,
        H - M,
        W - M,
        H - M
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(x_label));
    let _ = writeln!(s, r#"<text x="{M}" y="{}">{x0:.3}</text><text x="{}" y="{}" text-anchor="end">{x1:.3}</text>"#, H - M + 15.0, W - M, H - M + 15.0);
    let _ = writeln!(s, r#"<text x="4" y="{}">{y0:.3e}</text><text x="4" y="{}">{y1:.3e}</text>"#, H - M, M);
    for (i, (name, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#, path.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}" text-anchor="end">{}</text>"#,
            W - M,
            M + 15.0 * i as f64,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Tiles square images (rows of `samples`, values in `[-1, 1]`) into a
/// grayscale PNG with `cols` tiles per row.
pub fn write_image_grid(samples: &Mat, cols: usize, path: &Path) -> Result<()> {
    let n = samples.rows();
    validate(n > 0 && cols > 0, || "image grid needs samples and columns".into())?;
    let side = (samples.cols() as f64).sqrt().round() as usize;
    validate(side * side == samples.cols(), || "samples are not square images".into())?;
    let grid_rows = n.div_ceil(cols);
    let pad = 1;
    let (w, h) = (cols * (side + pad) + pad, grid_rows * (side + pad) + pad);
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for k in 0..n {
        let (gr, gc) = (k / cols, k % cols);
        for i in 0..side {
            for j in 0..side {
                let v = samples.get(k, i * side + j);
                let byte = (((v + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8;
                let x = (gc * (side + pad) + pad + j) as u32;
                let y = (gr * (side + pad) + pad + i) as u32;
                img.put_pixel(x, y, image::Luma([byte]));
            }
        }
    }
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Serde(other.to_string()),
    })
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct Writer {
    dir: PathBuf,
    files: Vec<String>,
}

impl Writer {
    fn text(&mut self, name: String, body: &str) -> Result<()> {
        let p = self.dir.join(&name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        self.files.push(name);
        Ok(())
    }
}

/// Writes every table and plot for `inputs` into `out_dir` under
/// deterministic names, then `manifest.json` listing each file's hash.
pub fn emit_report(inputs: &ReportInputs<'_>, out_dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut w = Writer {
        dir: out_dir.to_path_buf(),
        files: Vec::new(),
    };

    for (i, c) in inputs.curves.iter().enumerate() {
        let stem = format!("curve_{i:02}_{}", tag_name(c.tag));
        w.text(format!("{stem}.csv"), &curve_csv(c))?;
    }
    if !inputs.curves.is_empty() {
        let series: Vec<(String, Vec<(f64, f64)>)> = inputs
            .curves
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let pts = c.timesteps.iter().zip(&c.mean_error).map(|(&t, &e)| (t as f64, e)).collect();
                (format!("{i:02} {}", tag_name(c.tag)), pts)
            })
            .collect();
        let refs: Vec<(&str, Vec<(f64, f64)>)> = series.iter().map(|(n, p)| (n.as_str(), p.clone())).collect();
        w.text("error_curves.svg".into(), &line_plot_svg("noise prediction error", "timestep t", &refs))?;
    }
    if !inputs.grad_table.is_empty() {
        w.text("grad_norms.csv".into(), &grad_table_csv(inputs.grad_table))?;
    }
    for (i, r) in inputs.recall.iter().enumerate() {
        w.text(format!("recall_{i:02}.csv"), &recall_csv(r))?;
    }
    if !inputs.comparison.is_empty() {
        w.text("comparison.csv".into(), &comparison_csv(inputs.comparison))?;
    }
    if let Some(r) = inputs.inequality {
        w.text("inequality.csv".into(), &inequality_csv(r))?;
    }
    for (i, r) in inputs.records.iter().enumerate() {
        w.text(format!("metrics_{i:02}.csv"), &r.metrics_csv())?;
    }
    if !inputs.records.is_empty() {
        let series: Vec<(String, Vec<(f64, f64)>)> = inputs
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let pts = r.metrics.iter().map(|m| (m.iter as f64, m.grad_norm)).collect();
                (format!("{i:02} {}", r.config.objective.kind), pts)
            })
            .collect();
        let refs: Vec<(&str, Vec<(f64, f64)>)> = series.iter().map(|(n, p)| (n.as_str(), p.clone())).collect();
        w.text("grad_norms.svg".into(), &line_plot_svg("gradient norm", "iteration", &refs))?;
    }

    let mut files = Vec::with_capacity(w.files.len());
    for name in &w.files {
        let p = out_dir.join(name);
        let bytes = std::fs::metadata(&p).map_err(|e| Error::io(&p, e))?.len();
        files.push(ManifestEntry {
            file: name.clone(),
            sha256: sha256_file(&p)?,
            bytes,
        });
    }
    let manifest = Manifest { files };
    crate::checkpoint::save_json(&out_dir.join(MANIFEST_NAME), &manifest)?;
    Ok(manifest)
}
