//! Deterministic PNG figures: loss curves, eval-metric curves, study bars,
//! and qualitative panoptic overlays using the class-table palette.

use std::path::Path;

use anyhow::{bail, Result};
use image::{Rgb, RgbImage};

use crate::core::{ClassTable, PanopticLabel, Sample, VOID_CLASS};

use super::{LogRecord, StudyRow};

const BG: Rgb<u8> = Rgb([250, 250, 250]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const SERIES: [Rgb<u8>; 6] = [
    Rgb([214, 69, 65]),
    Rgb([31, 119, 180]),
    Rgb([44, 160, 44]),
    Rgb([148, 103, 189]),
    Rgb([255, 127, 14]),
    Rgb([23, 190, 207]),
];

fn blank(w: u32, h: u32) -> RgbImage {
    RgbImage::from_pixel(w, h, BG)
}

fn draw_line(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
    let (dx, sx) = ((x1 - x0).abs(), if x0 < x1 { 1 } else { -1 });
    let (dy, sy) = (-(y1 - y0).abs(), if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

struct Frame {
    w: u32,
    h: u32,
    margin: u32,
}

impl Frame {
    fn map(&self, fx: f64, fy: f64) -> (i64, i64) {
        let m = self.margin as f64;
        let px = m + fx * (self.w as f64 - 2.0 * m);
        let py = (self.h as f64 - m) - fy * (self.h as f64 - 2.0 * m);
        (px.round() as i64, py.round() as i64)
    }

    fn axes(&self, img: &mut RgbImage) {
        let (x0, y0) = self.map(0.0, 0.0);
        let (x1, _) = self.map(1.0, 0.0);
        let (_, y1) = self.map(0.0, 1.0);
        draw_line(img, x0, y0, x1, y0, AXIS);
        draw_line(img, x0, y0, x0, y1, AXIS);
    }
}

fn polyline(img: &mut RgbImage, frame: &Frame, pts: &[(f64, f64)], color: Rgb<u8>) {
    for pair in pts.windows(2) {
        let (x0, y0) = frame.map(pair[0].0, pair[0].1);
        let (x1, y1) = frame.map(pair[1].0, pair[1].1);
        draw_line(img, x0, y0, x1, y1, color);
    }
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path)?;
    Ok(())
}

/// Loss curves over iterations, one series per logged loss component.
pub fn loss_curves(records: &[LogRecord], path: &Path) -> Result<()> {
    let steps: Vec<(u64, &crate::uda::LossBreakdown)> = records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Step { iter, losses } => Some((*iter, losses)),
            _ => None,
        })
        .collect();
    if steps.is_empty() {
        bail!("log contains no training steps");
    }
    let series: [(&str, fn(&crate::uda::LossBreakdown) -> f64); 5] = [
        ("total", |l| l.total),
        ("source_semantic", |l| l.source_semantic),
        ("source_instance", |l| l.source_instance),
        ("mixed_semantic", |l| l.mixed_semantic),
        ("mixed_instance", |l| l.mixed_instance),
    ];
    let max_iter = steps.iter().map(|&(i, _)| i).max().unwrap() as f64;
    let max_loss = steps
        .iter()
        .flat_map(|&(_, l)| series.iter().map(move |(_, f)| f(l)))
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let mut img = blank(640, 400);
    let frame = Frame { w: 640, h: 400, margin: 40 };
    frame.axes(&mut img);
    for (si, (_, f)) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = steps
            .iter()
            .map(|&(i, l)| (i as f64 / max_iter.max(1.0), f(l) / max_loss))
            .collect();
        polyline(&mut img, &frame, &pts, SERIES[si % SERIES.len()]);
    }
    save(&img, path)
}

/// Evaluation metrics over iterations. Returns false (and writes nothing)
/// when the log holds no eval records.
pub fn pq_curve(records: &[LogRecord], path: &Path) -> Result<bool> {
    let evals: Vec<(u64, &super::EvalSummary)> = records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Eval { iter, eval } => Some((*iter, eval)),
            _ => None,
        })
        .collect();
    if evals.is_empty() {
        return Ok(false);
    }
    let max_iter = evals.iter().map(|&(i, _)| i).max().unwrap() as f64;
    let mut img = blank(640, 400);
    let frame = Frame { w: 640, h: 400, margin: 40 };
    frame.axes(&mut img);
    let series: [(&str, fn(&super::EvalSummary) -> f64); 3] =
        [("mpq", |e| e.mpq), ("miou", |e| e.miou), ("map", |e| e.map)];
    for (si, (_, f)) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = evals
            .iter()
            .map(|&(i, e)| (i as f64 / max_iter.max(1.0), f(e).clamp(0.0, 1.0)))
            .collect();
        polyline(&mut img, &frame, &pts, SERIES[si % SERIES.len()]);
    }
    save(&img, path)?;
    Ok(true)
}

/// Grouped bars of mean mPQ and mAP per topology.
pub fn study_bar_plot(rows: &[StudyRow], path: &Path) -> Result<()> {
    let mut img = blank(640, 400);
    let frame = Frame { w: 640, h: 400, margin: 40 };
    frame.axes(&mut img);
    let n = rows.len().max(1);
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in [row.mpq.mean, row.map.mean].iter().enumerate() {
            let x0 = (i as f64 + 0.15 + 0.35 * j as f64) / n as f64;
            let x1 = (i as f64 + 0.15 + 0.35 * j as f64 + 0.3) / n as f64;
            let v = v.clamp(0.0, 1.0);
            let (px0, py0) = frame.map(x0, 0.0);
            let (px1, py1) = frame.map(x1, v);
            for x in px0..=px1 {
                draw_line(&mut img, x, py0, x, py1, SERIES[j]);
            }
        }
    }
    save(&img, path)
}

/// Panoptic label as a palette-colored image; instance identity is encoded
/// by brightness steps within the class color, void is black.
pub fn render_panoptic(label: &PanopticLabel, table: &ClassTable) -> RgbImage {
    let (h, w) = label.semantic.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let c = label.semantic[[y, x]];
            let px = if c == VOID_CLASS {
                Rgb([0, 0, 0])
            } else {
                let [r, g, b] = table.color(c);
                let inst = label.instance[[y, x]];
                let f = if inst == 0 { 1.0 } else { 1.0 - 0.12 * ((inst - 1) % 4) as f64 };
                Rgb([
                    (r as f64 * f) as u8,
                    (g as f64 * f) as u8,
                    (b as f64 * f) as u8,
                ])
            };
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    img
}

/// Input image and blended panoptic overlay, side by side.
pub fn panoptic_overlay(
    sample: &Sample,
    panoptic: &PanopticLabel,
    table: &ClassTable,
    path: &Path,
) -> Result<()> {
    let (h, w, _) = sample.image.dim();
    let colored = render_panoptic(panoptic, table);
    let mut img = RgbImage::new(2 * w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let rgb = |c: usize| (sample.image[[y, x, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, Rgb([rgb(0), rgb(1), rgb(2)]));
            let over = colored.get_pixel(x as u32, y as u32);
            let blend = |a: u8, b: u8| ((a as u16 * 2 + b as u16 * 3) / 5) as u8;
            img.put_pixel(
                (w + x) as u32,
                y as u32,
                Rgb([blend(rgb(0), over[0]), blend(rgb(1), over[1]), blend(rgb(2), over[2])]),
            );
        }
    }
    save(&img, path)
}
