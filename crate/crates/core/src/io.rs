//! CSV tables and small SVG plots for run directories.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::Condition;
use crate::ndcore::Tensor;

/// A header plus rows of already-formatted cells.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::invalid(format!(
                "row has {} cells, header has {}",
                row.len(),
                self.header.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Parses the simple comma-separated format written by [`Table::to_csv`].
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::invalid("empty csv"))?
            .split(',')
            .map(str::to_string)
            .collect::<Vec<_>>();
        let mut t = Table {
            header,
            rows: Vec::new(),
        };
        for l in lines {
            t.push(l.split(',').map(str::to_string).collect())?;
        }
        Ok(t)
    }
}

/// Shortest round-trip formatting for floats.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn condition_label(c: Condition) -> String {
    match c {
        Condition::Class(k) => k.to_string(),
        Condition::Null => "null".to_string(),
    }
}

pub fn parse_condition(s: &str) -> Result<Condition> {
    if s == "null" {
        return Ok(Condition::Null);
    }
    s.parse()
        .map(Condition::Class)
        .map_err(|_| Error::invalid(format!("bad condition label `{s}`")))
}

/// `x,y,class` rows.
pub fn samples_table(x: &Tensor, cond: &[Condition]) -> Result<Table> {
    if x.rank() != 2 || x.cols() != 2 || x.rows() != cond.len() {
        return Err(Error::shape("samples_table", x.shape(), &[cond.len(), 2]));
    }
    let mut t = Table::new(["x", "y", "class"]);
    for (i, &c) in cond.iter().enumerate() {
        let r = x.row(i);
        t.push(vec![fmt_f64(r[0]), fmt_f64(r[1]), condition_label(c)])?;
    }
    Ok(t)
}

pub fn read_samples(text: &str) -> Result<(Tensor, Vec<Condition>)> {
    let t = Table::parse_csv(text)?;
    if t.header != ["x", "y", "class"] {
        return Err(Error::invalid(format!("expected x,y,class header, got {:?}", t.header)));
    }
    let mut data = Vec::with_capacity(2 * t.rows.len());
    let mut cond = Vec::with_capacity(t.rows.len());
    for r in &t.rows {
        for cell in &r[..2] {
            data.push(cell.parse::<f64>().map_err(|_| Error::invalid(format!("bad number `{cell}`")))?);
        }
        cond.push(parse_condition(&r[2])?);
    }
    Ok((Tensor::new(&[cond.len(), 2], data)?, cond))
}

/// `(iteration, value)` curve.
pub fn curve_table(name: &str, curve: &[(usize, f64)]) -> Table {
    let mut t = Table::new(["iteration".to_string(), name.to_string()]);
    for &(i, v) in curve {
        t.rows.push(vec![i.to_string(), fmt_f64(v)]);
    }
    t
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Scatter plot of 2D samples colored by class, optionally with markers at
/// `centers`.
pub fn scatter_svg(x: &Tensor, cond: &[Condition], centers: &[[f64; 2]], title: &str) -> Result<String> {
    if x.cols() != 2 || x.rows() != cond.len() {
        return Err(Error::shape("scatter_svg", x.shape(), &[cond.len(), 2]));
    }
    let size = 480.0;
    let pad = 24.0;
    let mut lim = centers
        .iter()
        .flat_map(|c| c.iter())
        .chain(x.data().iter())
        .fold(1.0f64, |m, v| m.max(v.abs()));
    lim *= 1.05;
    let px = |v: f64| pad + (v + lim) / (2.0 * lim) * (size - 2.0 * pad);
    let py = |v: f64| size - px(v);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{pad}" y="16" font-size="12" font-family="sans-serif">{}</text>"#, escape(title));
    for (i, &c) in cond.iter().enumerate().take(5000) {
        let r = x.row(i);
        let color = match c {
            Condition::Class(k) => PALETTE[k % PALETTE.len()],
            Condition::Null => "#000000",
        };
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="1.2" fill="{color}" fill-opacity="0.5"/>"#,
            px(r[0]),
            py(r[1])
        );
    }
    for c in centers {
        let _ = writeln!(
            s,
            r#"<path d="M{:.2} {:.2} l6 6 m0 -6 l-6 6" stroke="black" stroke-width="1.5"/>"#,
            px(c[0]) - 3.0,
            py(c[1]) - 3.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Horizontal bar chart of labelled values.
pub fn bar_svg(labels: &[String], values: &[f64], title: &str) -> Result<String> {
    if labels.len() != values.len() {
        return Err(Error::invalid("bar_svg needs one value per label"));
    }
    let row_h = 22.0;
    let left = 160.0;
    let width = 560.0;
    let height = 40.0 + row_h * labels.len() as f64;
    let vmax = values.iter().cloned().filter(|v| v.is_finite()).fold(0.0f64, f64::max).max(1e-300);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="8" y="16" font-size="12" font-family="sans-serif">{}</text>"#, escape(title));
    for (i, (l, &v)) in labels.iter().zip(values).enumerate() {
        let y = 28.0 + row_h * i as f64;
        let w = if v.is_finite() { (v.max(0.0) / vmax) * (width - left - 90.0) } else { 0.0 };
        let _ = writeln!(
            s,
            r#"<text x="8" y="{:.1}" font-size="11" font-family="sans-serif">{}</text>"#,
            y + 13.0,
            escape(l)
        );
        let _ = writeln!(s, r##"<rect x="{left}" y="{y:.1}" width="{w:.2}" height="16" fill="#1f77b4"/>"##);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" font-family="sans-serif">{v:.3e}</text>"#,
            left + w + 4.0,
            y + 13.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
