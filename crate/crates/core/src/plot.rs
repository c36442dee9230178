//! Bandit figures: behavior scatter colored by reward, Q level curves of the
//! trained ensemble and extracted-policy samples, one panel per checkpoint.
//! The CSV is the data contract; the SVG is a self-contained rendering of it.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::Serialize;

use crate::actor::DiffusionPolicy;
use crate::critic::CriticEnsemble;
use crate::data::{ActionBounds, OfflineDataset};
use crate::error::{DacError, Result};
use crate::eval::extract_actions;

/// Values on a regular lattice; `values[[iy, ix]]` sits at `(xs[ix], ys[iy])`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub values: Array2<f64>,
}

impl Grid {
    /// `n x n` lattice spanning the first two action dimensions of `bounds`.
    pub fn evaluate<F>(bounds: &ActionBounds, n: usize, f: F) -> Result<Grid>
    where
        F: Fn(&Array2<f64>) -> Result<Vec<f64>>,
    {
        if n < 2 || bounds.dim() < 2 {
            return Err(DacError::Range("a grid needs at least 2 points per side and a 2-D action box".into()));
        }
        let axis = |k: usize| -> Vec<f64> {
            (0..n).map(|i| bounds.lo[k] + (bounds.hi[k] - bounds.lo[k]) * i as f64 / (n - 1) as f64).collect()
        };
        let (xs, ys) = (axis(0), axis(1));
        let points = Array2::from_shape_fn((n * n, 2), |(r, c)| if c == 0 { xs[r % n] } else { ys[r / n] });
        let v = f(&points)?;
        let values = Array2::from_shape_vec((n, n), v).map_err(|e| DacError::Shape(e.to_string()))?;
        Ok(Grid { xs, ys, values })
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

pub type Segment = ([f64; 2], [f64; 2]);

/// Marching squares: line segments where the bilinear interpolant of `grid`
/// crosses `level`. Saddle cells are split by the cell-center average.
pub fn contour_segments(grid: &Grid, level: f64) -> Vec<Segment> {
    let (ny, nx) = grid.values.dim();
    let mut out = Vec::new();
    for iy in 0..ny.saturating_sub(1) {
        for ix in 0..nx.saturating_sub(1) {
            // corners counter-clockwise from bottom-left
            let c = [
                ([grid.xs[ix], grid.ys[iy]], grid.values[[iy, ix]]),
                ([grid.xs[ix + 1], grid.ys[iy]], grid.values[[iy, ix + 1]]),
                ([grid.xs[ix + 1], grid.ys[iy + 1]], grid.values[[iy + 1, ix + 1]]),
                ([grid.xs[ix], grid.ys[iy + 1]], grid.values[[iy + 1, ix]]),
            ];
            let cross = |a: usize, b: usize| -> Option<[f64; 2]> {
                let ((pa, va), (pb, vb)) = (c[a], c[b]);
                if (va < level) == (vb < level) {
                    return None;
                }
                let w = (level - va) / (vb - va);
                Some([pa[0] + w * (pb[0] - pa[0]), pa[1] + w * (pb[1] - pa[1])])
            };
            let pts: Vec<[f64; 2]> = [(0, 1), (1, 2), (2, 3), (3, 0)].iter().filter_map(|&(a, b)| cross(a, b)).collect();
            match pts.len() {
                2 => out.push((pts[0], pts[1])),
                4 => {
                    let center = c.iter().map(|(_, v)| v).sum::<f64>() / 4.0;
                    // corner 0's side of the level decides which edges pair up
                    if (center < level) == (c[0].1 < level) {
                        out.push((pts[0], pts[1]));
                        out.push((pts[2], pts[3]));
                    } else {
                        out.push((pts[0], pts[3]));
                        out.push((pts[1], pts[2]));
                    }
                }
                _ => {}
            }
        }
    }
    out
}

/// Evenly spaced interior levels between the grid's extremes.
pub fn contour_levels(grid: &Grid, count: usize) -> Vec<f64> {
    let (lo, hi) = grid.min_max();
    (1..=count).map(|k| lo + (hi - lo) * k as f64 / (count + 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub title: String,
    pub bounds: ActionBounds,
    pub behavior: Vec<[f64; 2]>,
    pub rewards: Vec<f64>,
    pub q: Grid,
    pub samples: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PanelSettings {
    pub grid: usize,
    pub samples: usize,
    pub n_a: usize,
}

impl Default for PanelSettings {
    fn default() -> Self {
        PanelSettings { grid: 41, samples: 500, n_a: 1 }
    }
}

fn first_two(a: &Array2<f64>) -> Vec<[f64; 2]> {
    a.rows().into_iter().map(|r| [r[0], r[1]]).collect()
}

/// Builds one panel from a trained policy and ensemble on a 2-D action box.
pub fn build_panel<R: Rng + ?Sized>(
    title: &str,
    policy: &DiffusionPolicy,
    critic: &CriticEnsemble,
    ds: &OfflineDataset,
    settings: &PanelSettings,
    rng: &mut R,
) -> Result<Panel> {
    if ds.action_dim() != 2 {
        return Err(DacError::Shape(format!("plots need 2-D actions, dataset has {}", ds.action_dim())));
    }
    let state_dim = policy.state_dim();
    let q = Grid::evaluate(ds.bounds(), settings.grid, |pts| {
        let states = Array2::zeros((pts.nrows(), state_dim));
        Ok(critic.mean_q(states.view(), pts.view())?.to_vec())
    })?;
    let states = Array2::zeros((settings.samples, state_dim));
    let samples = extract_actions(states.view(), policy, critic, settings.n_a, rng)?;
    Ok(Panel {
        title: title.to_string(),
        bounds: ds.bounds().clone(),
        behavior: first_two(ds.actions()),
        rewards: ds.rewards().to_vec(),
        q,
        samples: first_two(&samples),
    })
}

/// Long-format CSV: `panel,kind,x,y,value` with kinds `behavior` (value =
/// reward), `q` (value = ensemble-mean Q) and `sample` (empty value).
pub fn write_csv(panels: &[Panel], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["panel", "kind", "x", "y", "value"])?;
    for p in panels {
        for (a, r) in p.behavior.iter().zip(&p.rewards) {
            w.write_record([p.title.as_str(), "behavior", &a[0].to_string(), &a[1].to_string(), &r.to_string()])?;
        }
        for (iy, y) in p.q.ys.iter().enumerate() {
            for (ix, x) in p.q.xs.iter().enumerate() {
                w.write_record([p.title.as_str(), "q", &x.to_string(), &y.to_string(), &p.q.values[[iy, ix]].to_string()])?;
            }
        }
        for a in &p.samples {
            w.write_record([p.title.as_str(), "sample", &a[0].to_string(), &a[1].to_string(), ""])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Blue (low) to yellow (high) ramp.
fn ramp(u: f64) -> String {
    const STOPS: [[f64; 3]; 4] = [[48.0, 18.0, 120.0], [33.0, 120.0, 160.0], [60.0, 185.0, 110.0], [245.0, 225.0, 40.0]];
    let u = if u.is_finite() { u.clamp(0.0, 1.0) } else { 0.0 } * 3.0;
    let k = (u.floor() as usize).min(2);
    let w = u - k as f64;
    let c: Vec<u8> = (0..3).map(|i| (STOPS[k][i] + w * (STOPS[k + 1][i] - STOPS[k][i])).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

const PANEL: f64 = 320.0;
const MARGIN: f64 = 36.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Side-by-side panels as a standalone SVG document.
pub fn render_svg(panels: &[Panel], levels: usize) -> String {
    let width = panels.len().max(1) as f64 * (PANEL + MARGIN) + MARGIN;
    let height = PANEL + 2.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (k, p) in panels.iter().enumerate() {
        let ox = MARGIN + k as f64 * (PANEL + MARGIN);
        let oy = MARGIN;
        let (lo, hi) = (&p.bounds.lo, &p.bounds.hi);
        let px = |x: f64| ox + (x - lo[0]) / (hi[0] - lo[0]) * PANEL;
        let py = |y: f64| oy + (hi[1] - y) / (hi[1] - lo[1]) * PANEL;
        let _ = writeln!(s, r#"<g>"#);
        let _ = writeln!(s, r##"<rect x="{ox}" y="{oy}" width="{PANEL}" height="{PANEL}" fill="none" stroke="#444"/>"##);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, ox + PANEL / 2.0, oy - 12.0, escape(&p.title));
        let (rlo, rhi) = p.rewards.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &r| (a.min(r), b.max(r)));
        for (a, r) in p.behavior.iter().zip(&p.rewards) {
            let u = if rhi > rlo { (r - rlo) / (rhi - rlo) } else { 0.5 };
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2.2" fill="{}" fill-opacity="0.8"/>"#, px(a[0]), py(a[1]), ramp(u));
        }
        for level in contour_levels(&p.q, levels) {
            let mut d = String::new();
            for (a, b) in contour_segments(&p.q, level) {
                let _ = write!(d, "M{:.2} {:.2}L{:.2} {:.2}", px(a[0]), py(a[1]), px(b[0]), py(b[1]));
            }
            if !d.is_empty() {
                let _ = writeln!(s, r##"<path d="{d}" fill="none" stroke="#555" stroke-width="0.8"><title>Q = {level:.3}</title></path>"##);
            }
        }
        for a in &p.samples {
            let _ = writeln!(s, r##"<circle cx="{:.2}" cy="{:.2}" r="1.8" fill="#d62728" fill-opacity="0.7"/>"##, px(a[0]), py(a[1]));
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn radial(n: usize) -> Grid {
        Grid::evaluate(&ActionBounds::symmetric(2, 1.0), n, |p| Ok(p.rows().into_iter().map(|r| (r[0] * r[0] + r[1] * r[1]).sqrt()).collect()))
            .unwrap()
    }

    #[test]
    fn grid_layout() {
        let g = Grid::evaluate(&ActionBounds::symmetric(2, 1.0), 3, |p| Ok(p.rows().into_iter().map(|r| r[0] + 10.0 * r[1]).collect())).unwrap();
        assert_eq!(g.xs, vec![-1.0, 0.0, 1.0]);
        assert_eq!(g.values[[0, 2]], 1.0 - 10.0);
        assert_eq!(g.values[[2, 0]], -1.0 + 10.0);
    }

    #[test]
    fn contour_of_distance_is_a_circle() {
        let g = radial(51);
        let segs = contour_segments(&g, 0.5);
        assert!(segs.len() > 40);
        for (a, b) in segs {
            for p in [a, b] {
                assert!(((p[0] * p[0] + p[1] * p[1]).sqrt() - 0.5).abs() < 0.01);
            }
        }
    }

    #[test]
    fn no_contour_outside_range() {
        assert!(contour_segments(&radial(11), 5.0).is_empty());
    }

    #[test]
    fn saddle_cell_gives_two_segments() {
        let g = Grid { xs: vec![0.0, 1.0], ys: vec![0.0, 1.0], values: ndarray::array![[1.0, 0.0], [0.0, 1.0]] };
        assert_eq!(contour_segments(&g, 0.5).len(), 2);
    }

    #[test]
    fn levels_are_interior() {
        let g = radial(11);
        let (lo, hi) = g.min_max();
        for l in contour_levels(&g, 6) {
            assert!(l > lo && l < hi);
        }
    }

    #[test]
    fn svg_and_csv() {
        let p = Panel {
            title: "soft <1>".into(),
            bounds: ActionBounds::symmetric(2, 1.0),
            behavior: vec![[0.1, 0.2], [0.5, -0.5]],
            rewards: vec![-1.0, 0.0],
            q: radial(11),
            samples: vec![[0.0, 0.0]],
        };
        let svg = render_svg(&[p.clone(), p.clone()], 5);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("soft &lt;1&gt;"));
        assert_eq!(svg.matches("<circle").count(), 6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fig.csv");
        write_csv(&[p], &path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 + 121 + 1);
        assert!(text.lines().nth(1).unwrap().starts_with("soft <1>,behavior,0.1,0.2,-1"));
    }

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp(0.0), "#301278");
        assert_eq!(ramp(1.0), "#f5e128");
        assert_eq!(ramp(f64::NAN), ramp(0.0));
    }
}
