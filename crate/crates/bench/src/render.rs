//! Static SVG drawings of a world and an optional plan.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use kinoplan::plan::Plan;
use kinoplan::vehicle::footprint;
use kinoplan::world::WorldMap;
use kinoplan::{Obb, RobotState, Vec2};

use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderStyle {
    /// Pixels per meter.
    pub scale: f64,
    /// Border around the map, pixels.
    pub border: f64,
    /// Most obstacle snapshots drawn along a plan.
    pub max_snapshots: usize,
}

impl Default for RenderStyle {
    fn default() -> Self {
        Self {
            scale: 8.0,
            border: 16.0,
            max_snapshots: 6,
        }
    }
}

struct Canvas {
    style: RenderStyle,
    height_m: f64,
}

impl Canvas {
    fn x(&self, x: f64) -> f64 {
        self.style.border + x * self.style.scale
    }

    fn y(&self, y: f64) -> f64 {
        self.style.border + (self.height_m - y) * self.style.scale
    }

    fn point(&self, p: Vec2) -> String {
        format!("{:.3},{:.3}", self.x(p.x), self.y(p.y))
    }

    fn polygon(&self, corners: &[Vec2]) -> String {
        corners.iter().map(|&c| self.point(c)).collect::<Vec<_>>().join(" ")
    }
}

/// Snapshot times for moving obstacles: evenly spaced over the plan.
fn snapshot_times(plan: Option<&Plan>, max: usize) -> Vec<f64> {
    match plan {
        Some(p) if p.ttr() > 0.0 && max > 1 => {
            let step = p.ttr() / (max - 1) as f64;
            (0..max).map(|k| k as f64 * step).collect()
        }
        _ => vec![0.0],
    }
}

fn arrow(out: &mut String, c: &Canvas, s: &RobotState, color: &str) {
    let tip = s.position() + Vec2::from_angle(s.theta) * 3.0;
    let left = s.position() + Vec2::from_angle(s.theta + 2.6) * 1.2 + Vec2::from_angle(s.theta) * 3.0;
    let right = s.position() + Vec2::from_angle(s.theta - 2.6) * 1.2 + Vec2::from_angle(s.theta) * 3.0;
    let _ = writeln!(
        out,
        r#"<line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}" stroke="{color}" stroke-width="2"/>"#,
        c.x(s.x),
        c.y(s.y),
        c.x(tip.x),
        c.y(tip.y)
    );
    let _ = writeln!(out, r#"<polygon points="{}" fill="{color}"/>"#, c.polygon(&[tip, left, right]));
}

/// SVG text for `world` and, when given, a plan with its start, goal and
/// obstacle snapshots.
pub fn svg_document(world: &WorldMap, plan: Option<&Plan>, style: &RenderStyle) -> String {
    let c = Canvas {
        style: *style,
        height_m: world.height(),
    };
    let w = world.width() * style.scale + 2.0 * style.border;
    let h = world.height() * style.scale + 2.0 * style.border;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.3} {h:.3}">"#
    );
    let _ = writeln!(
        out,
        r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="white" stroke="black"/>"#,
        c.x(0.0),
        c.y(world.height()),
        world.width() * style.scale,
        world.height() * style.scale
    );
    out.push_str("<g fill=\"#808080\">\n");
    for s in world.statics() {
        let _ = writeln!(out, r#"<polygon points="{}"/>"#, c.polygon(&s.obb_at(0.0).corners()));
    }
    out.push_str("</g>\n");

    let times = snapshot_times(plan, style.max_snapshots);
    if !world.dynamics().is_empty() {
        out.push_str("<g fill=\"#d04040\" fill-opacity=\"0.35\" font-size=\"9\" font-family=\"sans-serif\">\n");
        for (i, d) in world.dynamics().iter().enumerate() {
            for &t in &times {
                let b: Obb = d.obb_at(t);
                let _ = writeln!(out, r#"<polygon points="{}"/>"#, c.polygon(&b.corners()));
                let _ = writeln!(
                    out,
                    r#"<text x="{:.3}" y="{:.3}" fill-opacity="1">{i}@{t:.1}s</text>"#,
                    c.x(b.center.x),
                    c.y(b.center.y)
                );
            }
        }
        out.push_str("</g>\n");
    }

    if let Some(p) = plan {
        let pts: Vec<String> = p.trajectory.states.iter().map(|s| c.point(s.position())).collect();
        let _ = writeln!(
            out,
            r##"<polyline points="{}" fill="none" stroke="#2060c0" stroke-width="1.5"/>"##,
            pts.join(" ")
        );
        if let Some(last) = p.trajectory.states.last() {
            let _ = writeln!(
                out,
                r##"<polygon points="{}" fill="none" stroke="#2060c0"/>"##,
                c.polygon(&footprint(last, world.vehicle()).corners())
            );
        }
        arrow(&mut out, &c, &p.start, "#20a040");
        arrow(&mut out, &c, &p.goal, "#c08000");
    }
    out.push_str("</svg>\n");
    out
}

pub fn render_svg(world: &WorldMap, plan: Option<&Plan>, path: impl AsRef<Path>) -> Result<(), BenchError> {
    let path = path.as_ref();
    fs::write(path, svg_document(world, plan, &RenderStyle::default())).map_err(|source| BenchError::Io {
        path: path.display().to_string(),
        source,
    })
}
