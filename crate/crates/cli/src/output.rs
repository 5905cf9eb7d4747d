//! CSV, JSON and SVG writers. Floats are always written with 17 significant
//! digits so repeated runs produce byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;

use forced_kepler::flow::TrajectoryPoint;

/// `x` with 17 significant digits in scientific notation.
pub fn fmt17(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.16e}")
    }
}

/// Simple CSV table with a fixed header.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

pub enum Cell {
    F(f64),
    U(u64),
    B(bool),
    S(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::F(x) => fmt17(*x),
            Cell::U(n) => n.to_string(),
            Cell::B(b) => b.to_string(),
            Cell::S(s) => s.clone(),
        }
    }
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Table { header: header.iter().map(|s| s.as_ref().to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row.iter().map(Cell::render).collect());
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        fs::write(path, self.render())
    }
}

/// Trajectory table `s,t,tau,q1..qd,p1..pd,energy`.
pub fn trajectory_table(points: &[TrajectoryPoint]) -> Table {
    let d = points.first().map_or(0, |p| p.q.len());
    let mut header = vec!["s".to_string(), "t".into(), "tau".into()];
    header.extend((1..=d).map(|i| format!("q{i}")));
    header.extend((1..=d).map(|i| format!("p{i}")));
    header.push("energy".into());
    let mut t = Table::new(&header);
    for p in points {
        let mut row = vec![Cell::F(p.s), Cell::F(p.t), Cell::F(p.tau)];
        row.extend(p.q.iter().map(|v| Cell::F(*v)));
        row.extend(p.p.iter().map(|v| Cell::F(*v)));
        row.push(Cell::F(p.energy));
        t.push(row);
    }
    t
}

struct Fixed17(serde_json::ser::PrettyFormatter<'static>);

impl serde_json::ser::Formatter for Fixed17 {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        w.write_all(fmt17(value).as_bytes())
    }
    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }
    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Pretty JSON with 17-digit floats; non-finite values become `null`.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Fixed17(serde_json::ser::PrettyFormatter::new()));
    value.serialize(&mut ser).expect("serializable value");
    buf.push(b'\n');
    String::from_utf8(buf).expect("JSON is UTF-8")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    fs::write(path, to_json(value))
}

/// Standalone SVG with the `(q1, q2)` projection as a single polyline.
pub fn svg_polyline(points: &[[f64; 2]], title: &str) -> String {
    let finite: Vec<[f64; 2]> = points.iter().copied().filter(|p| p[0].is_finite() && p[1].is_finite()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for p in &finite {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-12);
    let pad = 0.05 * span;
    let size = 512.0;
    let scale = size / (span + 2.0 * pad);
    let mut pts = String::new();
    for p in &finite {
        let x = (p[0] - x0 + pad) * scale;
        let y = size - (p[1] - y0 + pad) * scale;
        let _ = write!(pts, "{x:.3},{y:.3} ");
    }
    let ox = (-x0 + pad) * scale;
    let oy = size - (-y0 + pad) * scale;
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n\
         <title>{title}</title>\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <circle cx=\"{ox:.3}\" cy=\"{oy:.3}\" r=\"3\" fill=\"black\"/>\n\
         <polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1\" points=\"{}\"/>\n\
         </svg>\n",
        pts.trim_end()
    )
}

pub fn write_svg(path: &Path, points: &[TrajectoryPoint], title: &str) -> io::Result<()> {
    let proj: Vec<[f64; 2]> = points.iter().map(|p| [p.q[0], p.q.get(1).copied().unwrap_or(0.0)]).collect();
    fs::write(path, svg_polyline(&proj, title))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 0.0] {
            let s = fmt17(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
            assert_eq!(s.split('e').next().unwrap().trim_start_matches('-').replace('.', "").len(), 17);
        }
        assert_eq!(fmt17(f64::NAN), "NaN");
    }

    #[test]
    fn json_floats_use_fixed_format() {
        #[derive(Serialize)]
        struct R {
            a: f64,
            b: Vec<f64>,
            c: f64,
        }
        let s = to_json(&R { a: 0.5, b: vec![1.0, -3e-7], c: f64::NAN });
        assert!(s.contains("5.0000000000000000e-1"), "{s}");
        assert!(s.contains("-2.9999999999999999e-7"), "{s}");
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["a"].as_f64(), Some(0.5));
        assert!(v["c"].is_null());
    }

    #[test]
    fn table_renders_header_and_rows() {
        let mut t = Table::new(&["n", "x", "ok"]);
        t.push(vec![Cell::U(1), Cell::F(2.0), Cell::B(true)]);
        assert_eq!(t.render(), "n,x,ok\n1,2.0000000000000000e0,true\n");
    }

    #[test]
    fn svg_is_standalone() {
        let s = svg_polyline(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]], "t");
        assert!(s.starts_with("<svg") && s.contains("<polyline") && !s.contains("href"));
    }
}
