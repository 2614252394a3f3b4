use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::hypnet::Geometry;
use crate::numcore::artanh_clamped;
use crate::par::map_indexed;
use crate::scenes::Example;

use super::{Checkpoint, TrainError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub predicate: String,
    pub state: String,
    pub label: bool,
    pub coords: Vec<f64>,
    pub norm: f64,
    /// Distance from the origin in the model's geometry.
    pub d0: f64,
}

/// Head outputs for every example; writes them as CSV when `out` is given.
pub fn export_embeddings(
    ckpt: &Checkpoint,
    examples: &[Example],
    out: Option<&Path>,
) -> Result<Vec<EmbeddingRow>, TrainError> {
    let model = ckpt.model();
    let prepared = model.prepare_all(examples)?;
    let rows: Vec<EmbeddingRow> = map_indexed(ckpt.config.exec, prepared.len(), |i| {
        let ex = &prepared[i];
        let (h, _) = model.infer(ex);
        let norm = h.norm();
        let d0 = match model.geometry {
            Geometry::Hyperbolic => 2.0 * artanh_clamped(norm),
            Geometry::Euclidean => norm,
        };
        EmbeddingRow {
            predicate: ex.predicate.to_string(),
            state: ex.state.clone(),
            label: ex.label,
            coords: h.into_data(),
            norm,
            d0,
        }
    });
    if let Some(path) = out {
        fs::write(path, to_csv(&rows))?;
    }
    Ok(rows)
}

fn to_csv(rows: &[EmbeddingRow]) -> String {
    let dim = rows.first().map_or(0, |r| r.coords.len());
    let mut s = String::from("predicate,state,label,norm,d0");
    for i in 0..dim {
        let _ = write!(s, ",h{i}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},\"{}\",{},{},{}", r.predicate, r.state, r.label, r.norm, r.d0);
        for x in &r.coords {
            let _ = write!(s, ",{x}");
        }
        s.push('\n');
    }
    s
}

const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
    "#393b79", "#637939",
];

/// Scatter of the first two coordinates inside the unit disk, one colour
/// per predicate. Higher-dimensional points are drawn by their first two
/// coordinates rescaled to keep their norm.
pub fn write_svg(rows: &[EmbeddingRow], path: &Path) -> Result<(), TrainError> {
    const SIZE: f64 = 600.0;
    let half = SIZE / 2.0;
    let r0 = half - 20.0;
    let mut colours: BTreeMap<&str, &str> = BTreeMap::new();
    for r in rows {
        let n = colours.len();
        colours.entry(&r.predicate).or_insert(PALETTE[n % PALETTE.len()]);
    }
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{w}" viewBox="0 0 {w} {w}">"#,
        w = SIZE + 160.0
    );
    let _ = writeln!(s, r#"<circle cx="{half}" cy="{half}" r="{r0}" fill="none" stroke="black"/>"#);
    for r in rows {
        let (x, y) = planar(&r.coords, r.norm);
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}" fill-opacity="{}"/>"#,
            half + x * r0,
            half - y * r0,
            colours[r.predicate.as_str()],
            if r.label { "0.9" } else { "0.35" }
        );
    }
    for (i, (name, c)) in colours.iter().enumerate() {
        let y = 20.0 + 18.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{c}"/>"#, SIZE + 10.0, y - 9.0);
        let _ =
            writeln!(s, r#"<text x="{}" y="{y}" font-size="12" font-family="sans-serif">{name}</text>"#, SIZE + 26.0);
    }
    s.push_str("</svg>\n");
    fs::write(path, s)?;
    Ok(())
}

fn planar(coords: &[f64], norm: f64) -> (f64, f64) {
    let x = coords.first().copied().unwrap_or(0.0);
    let y = coords.get(1).copied().unwrap_or(0.0);
    let n2 = (x * x + y * y).sqrt();
    if coords.len() <= 2 || n2 == 0.0 {
        return (x, y);
    }
    let k = norm.min(1.0) / n2;
    (x * k, y * k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_svg_shapes() {
        let rows = vec![
            EmbeddingRow {
                predicate: "Open".into(),
                state: "Open(cabinet)".into(),
                label: true,
                coords: vec![0.1, 0.2],
                norm: 0.2236,
                d0: 0.45,
            },
            EmbeddingRow {
                predicate: "NextTo".into(),
                state: "NextTo(cup, plate)".into(),
                label: false,
                coords: vec![-0.3, 0.0],
                norm: 0.3,
                d0: 0.62,
            },
        ];
        let csv = to_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("predicate,state,label,norm,d0,h0,h1\n"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.svg");
        write_svg(&rows, &p).unwrap();
        let svg = fs::read_to_string(p).unwrap();
        assert_eq!(svg.matches("r=\"2.5\"").count(), 2);
        assert!(svg.contains("NextTo"));
    }

    #[test]
    fn planar_keeps_norm() {
        let (x, y) = planar(&[0.3, 0.4, 0.5], 0.8);
        assert!(((x * x + y * y).sqrt() - 0.8).abs() < 1e-12);
    }
}
