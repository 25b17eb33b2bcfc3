use super::{GridGeometry, SceneError};

/// Simple polygon given by its outer ring (no repeated closing vertex).
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    vertices: Vec<[f64; 2]>,
}

/// Cell membership of a rasterized plot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rasterized {
    pub pixels: Vec<usize>,
    pub border_pixels: Vec<usize>,
}

impl Polygon {
    /// Drops a trailing vertex equal to the first one.
    pub fn new(mut vertices: Vec<[f64; 2]>) -> Self {
        if vertices.len() > 1 && vertices.first() == vertices.last() {
            vertices.pop();
        }
        Polygon { vertices }
    }

    pub fn rectangle(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Polygon::new(vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn reversed(&self) -> Self {
        let mut v = self.vertices.clone();
        v.reverse();
        Polygon { vertices: v }
    }

    fn edges(&self) -> impl Iterator<Item = ([f64; 2], [f64; 2])> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn area(&self) -> f64 {
        let twice: f64 = self
            .edges()
            .map(|(a, b)| a[0] * b[1] - b[0] * a[1])
            .sum();
        twice.abs() / 2.0
    }

    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            b.0 = b.0.min(v[0]);
            b.1 = b.1.min(v[1]);
            b.2 = b.2.max(v[0]);
            b.3 = b.3.max(v[1]);
        }
        b
    }

    /// Even-odd point-in-polygon test. Each edge is evaluated with its
    /// endpoints in a canonical order so the result does not depend on the
    /// ring's orientation.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            let (lo, hi) = if a[1] <= b[1] { (a, b) } else { (b, a) };
            if (lo[1] > y) != (hi[1] > y) {
                let xi = lo[0] + (y - lo[1]) * (hi[0] - lo[0]) / (hi[1] - lo[1]);
                if x < xi {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Returns the first pair of non-adjacent edges that touch, if any.
    pub fn self_intersection(&self) -> Option<(usize, usize)> {
        let n = self.vertices.len();
        let edges: Vec<_> = self.edges().collect();
        for i in 0..n {
            for j in (i + 1)..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    // Adjacent edges only share their common vertex unless they fold back.
                    if collinear_overlap(edges[i], edges[j]) {
                        return Some((i, j));
                    }
                    continue;
                }
                if segments_touch(edges[i].0, edges[i].1, edges[j].0, edges[j].1) {
                    return Some((i, j));
                }
            }
        }
        None
    }

    pub fn is_simple(&self) -> bool {
        self.vertices.len() >= 3 && self.self_intersection().is_none()
    }

    /// Parses `POLYGON ((x y, x y, ...))`. Interior rings are rejected.
    pub fn from_wkt(text: &str) -> Result<Self, SceneError> {
        let t = text.trim();
        let upper = t.to_ascii_uppercase();
        let rest = upper
            .strip_prefix("POLYGON")
            .ok_or_else(|| SceneError::Wkt(format!("expected POLYGON, got {t:?}")))?;
        let rest = rest.trim();
        let inner = rest
            .strip_prefix('(')
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| SceneError::Wkt("unbalanced parentheses".into()))?
            .trim();
        let ring = inner
            .strip_prefix('(')
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| SceneError::Wkt("missing ring parentheses".into()))?;
        if ring.contains('(') || ring.contains(')') {
            return Err(SceneError::Wkt("interior rings are not supported".into()));
        }
        let mut vertices = Vec::new();
        for pair in ring.split(',') {
            let mut it = pair.split_whitespace();
            let (Some(x), Some(y), None) = (it.next(), it.next(), it.next()) else {
                return Err(SceneError::Wkt(format!("bad coordinate pair {pair:?}")));
            };
            let x: f64 = x
                .parse()
                .map_err(|_| SceneError::Wkt(format!("bad number {x:?}")))?;
            let y: f64 = y
                .parse()
                .map_err(|_| SceneError::Wkt(format!("bad number {y:?}")))?;
            vertices.push([x, y]);
        }
        Ok(Polygon::new(vertices))
    }

    pub fn to_wkt(&self) -> String {
        let mut s = String::from("POLYGON ((");
        for (i, v) in self.vertices.iter().chain(self.vertices.first()).enumerate() {
            if i > 0 {
                s.push_str(", ");
            }
            s.push_str(&format!("{} {}", v[0], v[1]));
        }
        s.push_str("))");
        s
    }
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

fn segments_touch(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

fn collinear_overlap(e: ([f64; 2], [f64; 2]), f: ([f64; 2], [f64; 2])) -> bool {
    // e.1 == f.0 (or e.0 == f.1 for the wrap-around pair); they fold back when
    // the far endpoint of one lies on the other.
    let (shared, e_far, f_far) = if e.1 == f.0 {
        (e.1, e.0, f.1)
    } else {
        (e.0, e.1, f.0)
    };
    if orient(shared, e_far, f_far) != 0.0 {
        return false;
    }
    let dot = (e_far[0] - shared[0]) * (f_far[0] - shared[0]) + (e_far[1] - shared[1]) * (f_far[1] - shared[1]);
    dot > 0.0
}

/// Closed segment vs closed axis-aligned rectangle (Liang-Barsky clip).
fn segment_hits_rect(a: [f64; 2], b: [f64; 2], rect: (f64, f64, f64, f64)) -> bool {
    let (a, b) = if (a[0], a[1]) <= (b[0], b[1]) { (a, b) } else { (b, a) };
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for (p, q) in [
        (-dx, a[0] - rect.0),
        (dx, rect.2 - a[0]),
        (-dy, a[1] - rect.1),
        (dy, rect.3 - a[1]),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return false;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
            if t0 > t1 {
                return false;
            }
        }
    }
    true
}

/// Rasterizes a plot polygon: cells whose centre lies inside the polygon form
/// the plot; those whose footprint touches the polygon boundary are flagged as
/// border cells.
pub fn rasterize_plot(polygon: &Polygon, grid: &GridGeometry) -> Result<Rasterized, SceneError> {
    if polygon.vertices.len() < 3 {
        return Err(SceneError::EmptyPlot);
    }
    if let Some((i, j)) = polygon.self_intersection() {
        return Err(SceneError::NotSimple(i, j));
    }
    let (xmin, ymin, xmax, ymax) = polygon.bbox();
    if xmin < grid.xll || ymin < grid.yll || xmax > grid.x_max() || ymax > grid.y_max() {
        return Err(SceneError::OutsideGrid);
    }
    if polygon.area() < grid.cellsize * grid.cellsize {
        return Err(SceneError::EmptyPlot);
    }

    let cs = grid.cellsize;
    let col_range = |x0: f64, x1: f64| {
        let c0 = (((x0 - grid.xll) / cs).floor().max(0.0)) as usize;
        let c1 = ((((x1 - grid.xll) / cs).floor()) as usize).min(grid.ncols - 1);
        (c0, c1)
    };
    let row_range = |y0: f64, y1: f64| {
        let r0 = (((grid.y_max() - y1) / cs).floor().max(0.0)) as usize;
        let r1 = ((((grid.y_max() - y0) / cs).floor()) as usize).min(grid.nrows - 1);
        (r0, r1)
    };

    let (c0, c1) = col_range(xmin, xmax);
    let (r0, r1) = row_range(ymin, ymax);
    let width = c1 - c0 + 1;
    let mut inside = vec![false; width * (r1 - r0 + 1)];
    let mut pixels = Vec::new();
    for row in r0..=r1 {
        for col in c0..=c1 {
            let (x, y) = grid.cell_center(row, col);
            if polygon.contains(x, y) {
                inside[(row - r0) * width + (col - c0)] = true;
                pixels.push(grid.index(row, col));
            }
        }
    }
    if pixels.is_empty() {
        return Err(SceneError::EmptyPlot);
    }

    let mut border = vec![false; inside.len()];
    for (a, b) in polygon.edges() {
        let (ec0, ec1) = col_range(a[0].min(b[0]), a[0].max(b[0]));
        let (er0, er1) = row_range(a[1].min(b[1]), a[1].max(b[1]));
        // Footprints are closed, so a boundary lying exactly on a cell edge
        // also touches the neighbouring cell.
        let ec0 = ec0.saturating_sub(1).max(c0);
        let er0 = er0.saturating_sub(1).max(r0);
        let ec1 = (ec1 + 1).min(c1);
        let er1 = (er1 + 1).min(r1);
        for row in er0..=er1 {
            for col in ec0..=ec1 {
                let k = (row - r0) * width + (col - c0);
                if inside[k] && !border[k] && segment_hits_rect(a, b, grid.cell_bounds(row, col)) {
                    border[k] = true;
                }
            }
        }
    }
    let border_pixels = pixels
        .iter()
        .copied()
        .filter(|&cell| {
            let (row, col) = grid.row_col(cell);
            border[(row - r0) * width + (col - c0)]
        })
        .collect();
    Ok(Rasterized {
        pixels,
        border_pixels,
    })
}
