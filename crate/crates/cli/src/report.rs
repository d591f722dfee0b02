//! SVG charts from the CSV files other commands leave in an output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Category, CliError};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Table, CliError> {
        let mut r = csv::Reader::from_path(path)
            .map_err(|e| CliError::new(Category::Io, format!("{}: {e}", path.display())))?;
        let header = r.headers()?.iter().map(str::to_owned).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_owned).collect()))
            .collect::<Result<_, _>>()?;
        Ok(Table { header, rows })
    }

    fn col(&self, name: &str) -> Result<usize, CliError> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::new(Category::InvalidData, format!("missing column `{name}`")))
    }

    fn numbers(&self, name: &str) -> Result<Vec<f64>, CliError> {
        let c = self.col(name)?;
        Ok(self.rows.iter().map(|r| r[c].parse().unwrap_or(f64::NAN)).collect())
    }

    fn series(&self, x: &str, ys: &[&str]) -> Result<Vec<Series>, CliError> {
        let xs = self.numbers(x)?;
        ys.iter()
            .map(|y| {
                let vals = self.numbers(y)?;
                Ok(Series {
                    name: y.to_string(),
                    points: xs
                        .iter()
                        .zip(vals)
                        .filter(|(a, b)| a.is_finite() && b.is_finite())
                        .map(|(a, b)| (*a, b))
                        .collect(),
                })
            })
            .collect()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn header(title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        (LEFT + WIDTH - RIGHT) / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (LEFT + WIDTH - RIGHT) / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{y}" text-anchor="middle" transform="rotate(-90 16 {y})">{}</text>"#,
        escape(y_label),
        y = (TOP + HEIGHT - BOTTOM) / 2.0
    );
    s
}

fn axes(s: &mut String, (y0, y1): (f64, f64)) {
    let (bottom, right) = (HEIGHT - BOTTOM, WIDTH - RIGHT);
    let _ = writeln!(
        s,
        r#"<path d="M{LEFT} {TOP} V{bottom} H{right}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let v = y0 + (y1 - y0) * i as f64 / 4.0;
        let y = bottom - (bottom - TOP) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y}" x2="{right}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{}</text>"##,
            LEFT - 6.0,
            y + 4.0,
            tick(v)
        );
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn legend(s: &mut String, names: &[String]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let x = WIDTH - RIGHT + 14.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            y - 10.0,
            COLORS[i % COLORS.len()],
            x + 18.0,
            y,
            escape(name)
        );
    }
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (x0, x1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let (bottom, right) = (HEIGHT - BOTTOM, WIDTH - RIGHT);
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * (right - LEFT);
    let py = |y: f64| bottom - (y - y0) / (y1 - y0) * (bottom - TOP);
    let mut s = header(title, x_label, y_label);
    axes(&mut s, (y0, y1));
    for i in 0..=4 {
        let v = x0 + (x1 - x0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            px(v),
            bottom + 16.0,
            tick(v)
        );
    }
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .enumerate()
            .map(|(j, &(x, y))| format!("{}{:.2} {:.2}", if j == 0 { "M" } else { "L" }, px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<path d="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        for &(x, y) in &ser.points {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                px(x),
                py(y)
            );
        }
    }
    legend(&mut s, &series.iter().map(|s| s.name.clone()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Grouped bars: one group per category, one bar per series.
pub fn bar_chart(title: &str, y_label: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let (lo, hi) = range(series.iter().flat_map(|s| s.1.iter().copied()));
    let (y0, y1) = (lo.min(0.0), hi.max(0.0));
    let (bottom, right) = (HEIGHT - BOTTOM, WIDTH - RIGHT);
    let py = |y: f64| bottom - (y - y0) / (y1 - y0) * (bottom - TOP);
    let group = (right - LEFT) / categories.len().max(1) as f64;
    let bar = group * 0.8 / series.len().max(1) as f64;
    let mut s = header(title, "", y_label);
    axes(&mut s, (y0, y1));
    let label_every = (categories.len() / 16).max(1);
    for (c, cat) in categories.iter().enumerate() {
        let gx = LEFT + group * c as f64 + group * 0.1;
        for (k, (_, vals)) in series.iter().enumerate() {
            let v = vals[c];
            if !v.is_finite() {
                continue;
            }
            let (top, h) = (py(v.max(0.0)), (py(0.0) - py(v)).abs());
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                gx + bar * k as f64,
                top,
                bar,
                h,
                COLORS[k % COLORS.len()]
            );
        }
        if c % label_every == 0 {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
                LEFT + group * (c as f64 + 0.5),
                bottom + 16.0,
                escape(cat)
            );
        }
    }
    legend(&mut s, &series.iter().map(|s| s.0.clone()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

fn files_matching(dir: &Path, prefix: &str, suffix: &str) -> Result<Vec<PathBuf>, CliError> {
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(e, dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(prefix) && n.ends_with(suffix))
        })
        .collect();
    found.sort();
    Ok(found)
}

fn stem<'a>(path: &'a Path, prefix: &str) -> &'a str {
    let name = path.file_stem().and_then(|n| n.to_str()).unwrap_or("");
    name.strip_prefix(prefix).unwrap_or(name)
}

fn write(dir: &Path, name: &str, svg: String, written: &mut Vec<String>) -> Result<(), CliError> {
    let path = dir.join(name);
    std::fs::write(&path, svg).map_err(|e| CliError::io(e, &path))?;
    written.push(name.to_owned());
    Ok(())
}

/// Renders every chart whose source CSV exists; returns the files written.
pub fn render_all(dir: &Path) -> Result<Vec<String>, CliError> {
    let mut written = Vec::new();
    for path in files_matching(dir, "curves-", ".csv")? {
        let phase = stem(&path, "curves-");
        let t = Table::read(&path)?;
        let svg = line_chart(
            &format!("Training curve ({phase})"),
            "epoch",
            "value",
            &t.series("epoch", &["ce", "dev_acc", "dev_macro_f1"])?,
        );
        write(dir, &format!("curves-{phase}.svg"), svg, &mut written)?;
    }
    for path in files_matching(dir, "sweep-", ".csv")? {
        let axis = stem(&path, "sweep-");
        let t = Table::read(&path)?;
        let svg = line_chart(
            &format!("Accuracy / macro-F1 vs {axis}"),
            axis,
            "score",
            &t.series("value", &["accuracy", "macro_f1"])?,
        );
        write(dir, &format!("sweep-{axis}.svg"), svg, &mut written)?;
        let svg = line_chart(
            &format!("AOPC / Ph-Acc vs {axis}"),
            axis,
            "percent",
            &t.series("value", &["aopc", "ph_acc"])?,
        );
        write(dir, &format!("sweep-{axis}-faithfulness.svg"), svg, &mut written)?;
    }
    let faith = files_matching(dir, "faithfulness-", ".csv")?;
    if !faith.is_empty() {
        let (mut cats, mut aopc, mut ph) = (Vec::new(), Vec::new(), Vec::new());
        for path in &faith {
            let t = Table::read(path)?;
            cats.push(stem(path, "faithfulness-").to_owned());
            aopc.push(t.numbers("aopc")?.first().copied().unwrap_or(f64::NAN));
            ph.push(t.numbers("ph_acc")?.first().copied().unwrap_or(f64::NAN));
        }
        let svg = bar_chart(
            "Faithfulness by method",
            "percent",
            &cats,
            &[("AOPC".into(), aopc), ("Ph-Acc".into(), ph)],
        );
        write(dir, "faithfulness.svg", svg, &mut written)?;
    }
    for path in files_matching(dir, "dims-", ".csv")? {
        let split = stem(&path, "dims-");
        let t = Table::read(&path)?;
        let cats: Vec<String> = t
            .rows
            .iter()
            .map(|r| r[t.col("dim_index").unwrap_or(0)].clone())
            .collect();
        let svg = bar_chart(
            &format!("Top-K frequency per dimension ({split})"),
            "fraction of samples",
            &cats,
            &[("frequency".into(), t.numbers("frequency")?)],
        );
        write(dir, &format!("dims-{split}.svg"), svg, &mut written)?;
    }
    for path in files_matching(dir, "masking-", ".csv")? {
        let split = stem(&path, "masking-");
        let t = Table::read(&path)?;
        let svg = line_chart(
            &format!("Accuracy keeping top-k dimensions ({split})"),
            "k",
            "accuracy",
            &t.series("k", &["masked_accuracy"])?,
        );
        write(dir, &format!("masking-{split}.svg"), svg, &mut written)?;
    }
    if written.is_empty() {
        return Err(CliError::new(
            Category::MissingFile,
            format!(
                "no report inputs (curves-, sweep-, faithfulness-, dims-, masking- CSVs) in {}",
                dir.display()
            ),
        ));
    }
    Ok(written)
}
