//! Top-down x-y trajectory plots as standalone SVG.

use geonlf_core::geometry::Trajectory;

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// One polyline per trajectory plus a legend; the view box covers all
/// positions with a 5% margin. SVG y points down, so y is negated.
pub fn trajectory_svg(trajs: &[(String, Trajectory)]) -> String {
    let pts: Vec<(f64, f64)> = trajs.iter().flat_map(|(_, t)| t.positions()).map(|p| (p.x, -p.y)).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if pts.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-9);
    let margin = 0.05 * span;
    let (vx, vy) = (x0 - margin, y0 - margin);
    let (vw, vh) = ((x1 - x0).max(1e-9) + 2.0 * margin, (y1 - y0).max(1e-9) + 2.0 * margin);
    let stroke = span / 200.0;
    let mut s = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"{vx} {vy} {vw} {vh}\" width=\"600\" height=\"{}\">\n",
        (600.0 * vh / vw).round().max(1.0)
    );
    for (k, (name, t)) in trajs.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let coords: Vec<String> = t.positions().iter().map(|p| format!("{},{}", p.x, -p.y)).collect();
        s.push_str(&format!(
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"{stroke}\" points=\"{}\"><title>{}</title></polyline>\n",
            coords.join(" "),
            escape(name)
        ));
    }
    let fs = span / 30.0;
    for (k, (name, _)) in trajs.iter().enumerate() {
        s.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-size=\"{fs}\" fill=\"{}\">{}</text>\n",
            vx + margin,
            vy + margin + fs * (k as f64 + 1.0),
            COLORS[k % COLORS.len()],
            escape(name)
        ));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use geonlf_core::geometry::{Mat4, Vec3};

    fn line(n: usize, dy: f64) -> Trajectory {
        Trajectory::from_poses(
            (0..n)
                .map(|k| {
                    let mut m = Mat4::identity();
                    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&Vec3::new(k as f64, dy, 0.0));
                    m
                })
                .collect(),
        )
    }

    #[test]
    fn one_polyline_per_trajectory() {
        let svg = trajectory_svg(&[("gt".into(), line(5, 0.0)), ("est".into(), line(5, 0.5)), ("a<b".into(), line(3, 1.0))]);
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.contains("a&lt;b"));
        assert!(svg.trim_end().ends_with("</svg>"));
        // x from 0 to 4 with a 5% margin of the larger span
        assert!(svg.contains("viewBox=\"-0.2 "));
    }
}
