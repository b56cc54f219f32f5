//! CSV tables, SVG figures and regular grids. Writers only serialise
//! geometry computed elsewhere.

use std::fmt::Write as _;

use landreg_core::LandmarkConfig;

/// A table with a header row.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Table { header: header.iter().map(|s| s.as_ref().to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| e.into_error().into())
    }
}

/// Shortest round-trip decimal form.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn nums(v: &[f64]) -> Vec<String> {
    v.iter().copied().map(num).collect()
}

/// Column names for `d` coordinates with a prefix, e.g. `ref_x`, `ref_y`.
pub fn axis_columns(prefix: &str, d: usize) -> Vec<String> {
    (0..d)
        .map(|a| {
            let axis = if d <= 3 { ["x", "y", "z"][a].to_string() } else { format!("c{a}") };
            if prefix.is_empty() {
                axis
            } else {
                format!("{prefix}_{axis}")
            }
        })
        .collect()
}

/// Axis-aligned bounding box in the plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Bounds {
    pub fn of_points<'a>(points: impl IntoIterator<Item = &'a [f64]>) -> Option<Bounds> {
        let mut it = points.into_iter().peekable();
        it.peek()?;
        let mut b = Bounds { min: [f64::INFINITY; 2], max: [f64::NEG_INFINITY; 2] };
        for p in it {
            for a in 0..2 {
                b.min[a] = b.min[a].min(p[a]);
                b.max[a] = b.max[a].max(p[a]);
            }
        }
        Some(b)
    }

    pub fn inflate(&self, by: f64) -> Bounds {
        Bounds { min: [self.min[0] - by, self.min[1] - by], max: [self.max[0] + by, self.max[1] + by] }
    }

    pub fn extent(&self) -> f64 {
        (self.max[0] - self.min[0]).max(self.max[1] - self.min[1])
    }
}

/// A `side × side` lattice of planar points, row-major from the lower-left.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub side: usize,
    pub points: Vec<Vec<f64>>,
}

impl Grid {
    pub fn new(bounds: Bounds, side: usize) -> Grid {
        let lerp = |a: usize, i: usize| bounds.min[a] + (bounds.max[a] - bounds.min[a]) * i as f64 / (side - 1) as f64;
        let points = (0..side).flat_map(|j| (0..side).map(move |i| vec![lerp(0, i), lerp(1, j)])).collect();
        Grid { side, points }
    }

    /// Lattice covering the landmarks with a margin of `max(ell, extent/4)`.
    pub fn around(set: &LandmarkConfig, ell: f64, side: usize) -> Grid {
        let pts = set.points();
        let b = Bounds::of_points(pts.iter().map(Vec::as_slice)).expect("non-empty set");
        Grid::new(b.inflate(ell.max(0.25 * b.extent())), side)
    }

    /// Grid lines through `warped` (same ordering as `points`).
    pub fn lines(&self, warped: &[Vec<f64>]) -> Vec<Vec<Vec<f64>>> {
        let s = self.side;
        let rows = (0..s).map(|j| (0..s).map(|i| warped[j * s + i].clone()).collect());
        let cols = (0..s).map(|i| (0..s).map(|j| warped[j * s + i].clone()).collect());
        rows.chain(cols).collect()
    }
}

/// Closed polygon through the landmarks, with `per_edge` points per edge.
pub fn densify_closed(set: &LandmarkConfig, per_edge: usize) -> Vec<Vec<f64>> {
    let pts = set.points();
    let n = pts.len();
    let mut out = Vec::with_capacity(n * per_edge);
    for i in 0..n {
        let (a, b) = (&pts[i], &pts[(i + 1) % n]);
        for s in 0..per_edge {
            let t = s as f64 / per_edge as f64;
            out.push(a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect());
        }
    }
    out
}

/// Minimal SVG canvas in world coordinates (y up).
pub struct Svg {
    bounds: Bounds,
    scale: f64,
    size: [f64; 2],
    body: String,
}

const SVG_WIDTH: f64 = 600.0;

impl Svg {
    pub fn new(bounds: Bounds) -> Svg {
        let w = (bounds.max[0] - bounds.min[0]).max(1e-9);
        let h = (bounds.max[1] - bounds.min[1]).max(1e-9);
        let scale = SVG_WIDTH / w;
        Svg { bounds, scale, size: [SVG_WIDTH, h * scale], body: String::new() }
    }

    /// Canvas covering `points` plus a 5% margin.
    pub fn fitting<'a>(points: impl IntoIterator<Item = &'a [f64]>) -> Svg {
        let b = Bounds::of_points(points).unwrap_or(Bounds { min: [0.0; 2], max: [1.0; 2] });
        Svg::new(b.inflate(0.05 * b.extent().max(1e-6)))
    }

    fn px(&self, p: &[f64]) -> (f64, f64) {
        ((p[0] - self.bounds.min[0]) * self.scale, (self.bounds.max[1] - p[1]) * self.scale)
    }

    pub fn polyline(&mut self, points: &[Vec<f64>], stroke: &str, width: f64, closed: bool) {
        let tag = if closed { "polygon" } else { "polyline" };
        let coords: Vec<String> = points.iter().map(|p| self.px(p)).map(|(x, y)| format!("{x:.3},{y:.3}")).collect();
        let _ = writeln!(
            self.body,
            r#"<{tag} points="{}" fill="none" stroke="{stroke}" stroke-width="{width}"/>"#,
            coords.join(" ")
        );
    }

    /// Disc of world radius `r`.
    pub fn disc(&mut self, centre: &[f64], r: f64, fill: &str, opacity: f64) {
        let (x, y) = self.px(centre);
        let _ = writeln!(
            self.body,
            r#"<circle cx="{x:.3}" cy="{y:.3}" r="{:.3}" fill="{fill}" fill-opacity="{opacity}"/>"#,
            r * self.scale
        );
    }

    /// Marker of fixed pixel radius.
    pub fn dot(&mut self, centre: &[f64], fill: &str) {
        let (x, y) = self.px(centre);
        let _ = writeln!(self.body, r#"<circle cx="{x:.3}" cy="{y:.3}" r="3" fill="{fill}"/>"#);
    }

    /// Axis-aligned cell with lower-left corner `lo` and side lengths `size`.
    pub fn cell(&mut self, lo: &[f64], size: [f64; 2], fill: &str) {
        let (x, y) = self.px(&[lo[0], lo[1] + size[1]]);
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.3}" y="{y:.3}" width="{:.3}" height="{:.3}" fill="{fill}"/>"#,
            size[0] * self.scale,
            size[1] * self.scale
        );
    }

    pub fn text(&mut self, at: &[f64], text: &str) {
        let (x, y) = self.px(at);
        let _ = writeln!(self.body, r#"<text x="{x:.3}" y="{y:.3}" font-size="12" font-family="sans-serif">{text}</text>"#);
    }

    pub fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.3} {h:.3}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n",
            w = self.size[0],
            h = self.size[1],
            body = self.body
        )
    }
}

/// Colour for `v ∈ [0, 1]` on a white-to-red ramp.
pub fn heat_colour(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let c = (255.0 * (1.0 - v)).round() as u8;
    format!("#ff{c:02x}{c:02x}")
}
