//! Attention-map overlays and the ablation bar chart.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::annotations::{BoundingBox, ImageRecord, Pose};
use crate::error::{Error, Result};
use crate::grid::ImageDims;
use crate::pipeline::{AblationTable, Workspace};
use crate::pseudolabel::box_from_attention;
use crate::rrpn::AttentionMap;
use crate::training::SourceModel;

const TRUTH: [u8; 3] = [30, 200, 60];
const PSEUDO: [u8; 3] = [250, 210, 0];
const JOINT: [u8; 3] = [20, 120, 255];

fn outline(img: &mut RgbImage, b: &BoundingBox, color: [u8; 3]) {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return;
    }
    let x0 = (b.x_min.round() as u32).min(w - 1);
    let y0 = (b.y_min.round() as u32).min(h - 1);
    let x1 = ((b.x_max.round() as u32).max(1) - 1).min(w - 1);
    let y1 = ((b.y_max.round() as u32).max(1) - 1).min(h - 1);
    for x in x0..=x1 {
        img.put_pixel(x, y0, Rgb(color));
        img.put_pixel(x, y1, Rgb(color));
    }
    for y in y0..=y1 {
        img.put_pixel(x0, y, Rgb(color));
        img.put_pixel(x1, y, Rgb(color));
    }
}

/// Blend `map` over `base` in red, then draw the truth box (green), the
/// pseudo box (yellow) and the joints (blue).
pub fn overlay(
    base: &RgbImage,
    map: &AttentionMap,
    truth: Option<&BoundingBox>,
    pseudo: Option<&BoundingBox>,
    pose: &Pose,
) -> RgbImage {
    let dims = ImageDims::new(base.width(), base.height());
    let grid = map.dims();
    let mut img = base.clone();
    for (x, y, p) in img.enumerate_pixels_mut() {
        let (r, c) = grid.cell_of(dims, x as f64 + 0.5, y as f64 + 0.5);
        let a = 0.65 * map.values[[r, c]];
        let mix = |v: u8, t: f64| ((1.0 - a) * v as f64 + a * t).round() as u8;
        *p = Rgb([mix(p[0], 255.0), mix(p[1], 0.0), mix(p[2], 0.0)]);
    }
    if let Some(b) = truth {
        outline(&mut img, b, TRUTH);
    }
    if let Some(b) = pseudo {
        outline(&mut img, b, PSEUDO);
    }
    for k in pose.0.iter().flatten() {
        let (cx, cy) = (k[0].round() as i64, k[1].round() as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (x, y) = (cx + dx, cy + dy);
                if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
                    img.put_pixel(x as u32, y as u32, Rgb(JOINT));
                }
            }
        }
    }
    img
}

/// Write one overlay PNG per tuple of the first `limit` records.
pub fn plot_attention(
    ws: &mut Workspace,
    model: &SourceModel,
    records: &[ImageRecord],
    limit: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let set = ws.attention_set(model, &records[..limit.min(records.len())])?;
    for (map, seed) in set.maps.iter().zip(&set.truths) {
        let record = records
            .iter()
            .find(|r| r.image_id == seed.tuple_ref.0)
            .expect("set built from records");
        let tuple = &record.tuples[seed.tuple_ref.1];
        let pseudo = box_from_attention(map, ws.cfg.pseudo.delta, ws.cfg.pseudo.policy, seed.dims)?.map(|(b, _)| b);
        let base = ws.images.rgb(record, record.width.max(record.height))?.clone();
        let img = overlay(&base, map, Some(&seed.truth), pseudo.as_ref(), &tuple.keypoints);
        let path = out_dir.join(format!("{}_{}_{}.png", record.image_id, seed.tuple_ref.1, tuple.verb));
        img.save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        written.push(path);
    }
    Ok(written)
}

/// Grouped bar chart of recall and mAP per ablation cell.
pub fn ablation_svg(table: &AblationTable) -> String {
    let series: [(&str, &str); 4] = [
        ("target train recall", "#4c72b0"),
        ("target test recall", "#55a868"),
        ("target mAP (pseudo)", "#c44e52"),
        ("target mAP (supervised)", "#8172b2"),
    ];
    let group_w = 28.0 * series.len() as f64 + 24.0;
    let (left, top, plot_h) = (50.0, 40.0, 220.0);
    let width = left + group_w * table.cells.len().max(1) as f64 + 20.0;
    let height = top + plot_h + 140.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let y = top + plot_h * (1.0 - v);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"##,
            width - 20.0,
            left - 6.0,
            y + 4.0
        );
    }
    for (k, (name, color)) in series.iter().enumerate() {
        let x = left + 160.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="12" width="10" height="10" fill="{color}"/><text x="{:.1}" y="21">{name}</text>"#,
            x + 14.0
        );
    }
    for (i, cell) in table.cells.iter().enumerate() {
        let gx = left + group_w * i as f64 + 12.0;
        let values: [Option<f64>; 4] = match &cell.metrics {
            Some(m) => [
                Some(m.recall_at_05.target_train),
                Some(m.recall_at_05.target_test),
                m.map_at_05_by_detector.get("target_weak").map(|a| a.map),
                m.map_at_05_by_detector.get("target_supervised").map(|a| a.map),
            ],
            None => [None; 4],
        };
        for (k, v) in values.iter().enumerate() {
            if let Some(v) = v {
                let h = plot_h * v.clamp(0.0, 1.0);
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="24" height="{h:.1}" fill="{}"/>"#,
                    gx + 28.0 * k as f64,
                    top + plot_h - h,
                    series[k].1
                );
            }
        }
        let label = if cell.key.is_empty() {
            "baseline".to_string()
        } else {
            cell.key.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
        };
        let label = if cell.error.is_some() { format!("{label} (failed)") } else { label };
        let lx = gx + group_w / 2.0 - 12.0;
        let ly = top + plot_h + 12.0;
        let _ = writeln!(
            s,
            r#"<text x="{lx:.1}" y="{ly:.1}" transform="rotate(40 {lx:.1} {ly:.1})">{}</text>"#,
            escape(&label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
