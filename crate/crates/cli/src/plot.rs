use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use plotters::prelude::*;
use tasksr::train::METRICS_HEADER;

use crate::draw::Canvas;
use crate::{CliError, Outcome};

const WIDTH: usize = 720;
const PANEL_H: usize = 300;
const TITLE_H: usize = 16;
const LEFT: usize = 72;
const RIGHT: usize = 150;
const PAD: usize = 10;
const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189], [255, 127, 14], [23, 190, 207]];

/// `component -> [(epoch, raw, weight)]`, epochs ascending.
pub type Series = BTreeMap<String, Vec<(usize, f64, f64)>>;

fn malformed(path: &Path, line: u64, what: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{} line {line}: {what}", path.display()))
}

pub fn parse_metrics(path: &Path) -> Result<Series, CliError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let mut series = Series::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(k as u64 + 1);
            malformed(path, line, e)
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(k as u64 + 1);
        if k == 0 {
            if rec.iter().ne(METRICS_HEADER) {
                return Err(malformed(path, line, format!("expected header {}", METRICS_HEADER.join(","))));
            }
            continue;
        }
        if rec.len() != METRICS_HEADER.len() {
            return Err(malformed(path, line, format!("expected {} fields, found {}", METRICS_HEADER.len(), rec.len())));
        }
        let epoch: usize = rec[0].parse().map_err(|_| malformed(path, line, format!("bad epoch '{}'", &rec[0])))?;
        let num = |i: usize| -> Result<f64, CliError> {
            match rec[i].parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(malformed(path, line, format!("bad {} '{}'", METRICS_HEADER[i], &rec[i]))),
            }
        };
        let (raw, weight) = (num(2)?, num(3)?);
        let points = series.entry(rec[1].to_string()).or_default();
        if points.last().is_some_and(|p| p.0 >= epoch) {
            return Err(malformed(path, line, format!("epoch {epoch} out of order for {}", &rec[1])));
        }
        points.push((epoch, raw, weight));
    }
    if series.is_empty() {
        return Err(malformed(path, 1, "no data rows"));
    }
    Ok(series)
}

/// Per-epoch weights, their sum and the number of components present.
pub fn companion_csv(series: &Series) -> String {
    let mut by_epoch: BTreeMap<usize, BTreeMap<&str, f64>> = BTreeMap::new();
    for (c, pts) in series {
        for &(e, _, w) in pts {
            by_epoch.entry(e).or_default().insert(c, w);
        }
    }
    let mut s = String::from("epoch");
    for c in series.keys() {
        write!(s, ",weight_{c}").expect("string write");
    }
    s.push_str(",weight_sum,n\n");
    for (e, ws) in &by_epoch {
        write!(s, "{e}").expect("string write");
        for c in series.keys() {
            match ws.get(c.as_str()) {
                Some(w) => write!(s, ",{w}").expect("string write"),
                None => s.push(','),
            }
        }
        writeln!(s, ",{},{}", ws.values().sum::<f64>(), ws.len()).expect("string write");
    }
    s
}

fn color(k: usize) -> RGBColor {
    let [r, g, b] = PALETTE[k % PALETTE.len()];
    RGBColor(r, g, b)
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn panel_rect(k: usize) -> (usize, usize, usize, usize) {
    let top = k * (PANEL_H + TITLE_H) + TITLE_H;
    (LEFT, top, WIDTH - RIGHT, top + PANEL_H - PAD)
}

/// Raw loss (log scale) on top, DWA weights with their sum below.
pub fn render(series: &Series) -> Result<Canvas, CliError> {
    let height = 2 * (PANEL_H + TITLE_H);
    let mut buf = vec![255u8; WIDTH * height * 3];
    let (e0, e1) = series.values().flatten().fold((usize::MAX, 0), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let x_range = e0 as f64..(e1.max(e0 + 1)) as f64;
    let raws = series.values().flatten().map(|p| p.1.max(1e-12));
    let (lo, hi) = raws.fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo * 0.5, lo * 2.0) };
    let n = series.len() as f64;
    let w_hi = series.values().flatten().map(|p| p.2).fold(n, f64::max) * 1.05;

    let sum_line: Vec<(f64, f64)> = {
        let mut m: BTreeMap<usize, f64> = BTreeMap::new();
        for p in series.values().flatten() {
            *m.entry(p.0).or_default() += p.2;
        }
        m.into_iter().map(|(e, s)| (e as f64, s)).collect()
    };
    {
        let fail = |e: &dyn std::fmt::Display| CliError::Runtime(format!("plot rendering: {e}"));
        let root = BitMapBackend::with_buffer(&mut buf, (WIDTH as u32, height as u32)).into_drawing_area();
        let (l, t, r, b) = panel_rect(0);
        let top = root.margin(t as u32, (height - b) as u32, l as u32, (WIDTH - r) as u32);
        let mut loss = ChartBuilder::on(&top).build_cartesian_2d(x_range.clone(), (lo..hi).log_scale()).map_err(|e| fail(&e))?;
        loss.configure_mesh().x_labels(0).y_labels(0).light_line_style(WHITE).draw().map_err(|e| fail(&e))?;
        for (k, pts) in series.values().enumerate() {
            let line = pts.iter().map(|p| (p.0 as f64, p.1.max(1e-12)));
            loss.draw_series(LineSeries::new(line, color(k).stroke_width(2))).map_err(|e| fail(&e))?;
        }
        let (l, t, r, b) = panel_rect(1);
        let bottom = root.margin(t as u32, (height - b) as u32, l as u32, (WIDTH - r) as u32);
        let mut weights = ChartBuilder::on(&bottom).build_cartesian_2d(x_range, 0.0..w_hi).map_err(|e| fail(&e))?;
        weights.configure_mesh().x_labels(0).y_labels(0).light_line_style(WHITE).draw().map_err(|e| fail(&e))?;
        weights.draw_series(LineSeries::new(sum_line, BLACK.stroke_width(1))).map_err(|e| fail(&e))?;
        for (k, pts) in series.values().enumerate() {
            let line = pts.iter().map(|p| (p.0 as f64, p.2));
            weights.draw_series(LineSeries::new(line, color(k).stroke_width(2))).map_err(|e| fail(&e))?;
        }
        root.present().map_err(|e| fail(&e))?;
    }

    let mut c = Canvas { width: WIDTH, height, pixels: buf };
    let ink = [0, 0, 0];
    for (k, (title, y_hi, y_lo)) in [("raw loss (log)", hi, lo), ("DWA weight (black: sum)", w_hi, 0.0)].into_iter().enumerate() {
        let (l, t, r, b) = panel_rect(k);
        let frame = tasksr::BBox::new(l as f64, t as f64, r as f64, b as f64)?;
        c.rect_outline(&frame, 0, 0, [120, 120, 120]);
        c.text(title, l, t - TITLE_H + 4, 1, ink);
        c.text(&fmt_tick(y_hi), 2, t, 1, ink);
        c.text(&fmt_tick(y_lo), 2, b - 8, 1, ink);
        c.text(&format!("epoch {e0}"), l, b + 1, 1, ink);
        let last = format!("{e1}");
        c.text(&last, r - 8 * last.len(), b + 1, 1, ink);
    }
    for (k, name) in series.keys().enumerate() {
        let (_, t, r, _) = panel_rect(0);
        let y = t + 4 + 14 * k;
        for dx in 0..16 {
            for dy in 0..3 {
                c.put((r + 8 + dx) as i64, (y + 3 + dy) as i64, PALETTE[k % PALETTE.len()]);
            }
        }
        c.text(name, r + 28, y, 1, ink);
    }
    Ok(c)
}

pub fn run(metrics: &Path, output: Option<&Path>) -> Result<Outcome, CliError> {
    let series = parse_metrics(metrics)?;
    let dir = match output {
        Some(d) => d.to_path_buf(),
        None => metrics.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let png = dir.join("curves.png");
    render(&series)?.save(&png)?;
    let csv = dir.join("curves.csv");
    std::fs::write(&csv, companion_csv(&series)).map_err(|e| CliError::Runtime(format!("{}: {e}", csv.display())))?;
    println!("wrote {} and {}", png.display(), csv.display());
    Ok(Outcome::Ok)
}
