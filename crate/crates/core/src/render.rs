//! SVG snapshots of a closed-loop episode.

use std::fmt::Write as _;

use crate::geom::Shape;
use crate::scene::WorldSpec;
use crate::sim::Frame;

const PX_PER_M: f64 = 40.0;

struct Canvas {
    x0: f64,
    y1: f64,
    out: String,
}

impl Canvas {
    fn new(bounds: [f64; 4]) -> Self {
        let [x0, y0, x1, y1] = bounds;
        let w = (x1 - x0) * PX_PER_M;
        let h = (y1 - y0) * PX_PER_M;
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.1} {h:.1}">"#
        );
        let _ = writeln!(out, r##"<rect width="100%" height="100%" fill="#ffffff" stroke="#444444"/>"##);
        Self { x0, y1, out }
    }

    // world y points up, svg y points down
    fn px(&self, p: [f64; 2]) -> (f64, f64) {
        ((p[0] - self.x0) * PX_PER_M, (self.y1 - p[1]) * PX_PER_M)
    }

    fn circle(&mut self, c: [f64; 2], r: f64, style: &str) {
        let (x, y) = self.px(c);
        let _ = writeln!(self.out, r#"<circle cx="{x:.1}" cy="{y:.1}" r="{:.1}" {style}/>"#, r * PX_PER_M);
    }

    fn polyline(&mut self, pts: &[[f64; 2]], style: &str) {
        if pts.len() < 2 {
            return;
        }
        let mut d = String::new();
        for p in pts {
            let (x, y) = self.px(*p);
            let _ = write!(d, "{x:.1},{y:.1} ");
        }
        let _ = writeln!(self.out, r#"<polyline points="{}" fill="none" {style}/>"#, d.trim_end());
    }

    fn shape(&mut self, s: &Shape) {
        match *s {
            Shape::Circle { center, radius } => self.circle(center, radius, r##"fill="#777777""##),
            Shape::Rect { min, max } => {
                let (x, y) = self.px([min[0], max[1]]);
                let w = (max[0] - min[0]) * PX_PER_M;
                let h = (max[1] - min[1]) * PX_PER_M;
                let _ = writeln!(
                    self.out,
                    r##"<rect x="{x:.1}" y="{y:.1}" width="{w:.1}" height="{h:.1}" fill="#777777"/>"##
                );
            }
        }
    }

    fn finish(mut self, caption: &str) -> String {
        let _ = writeln!(
            self.out,
            r#"<text x="6" y="16" font-family="monospace" font-size="12">{caption}</text>"#
        );
        self.out.push_str("</svg>\n");
        self.out
    }
}

/// One replan step: static shapes, pedestrians with velocity ticks, the goal,
/// every candidate in gray and the chosen trajectory in blue.
pub fn frame_svg(world: &WorldSpec, frame: &Frame) -> String {
    let mut c = Canvas::new(world.bounds);
    for s in &world.static_shapes {
        c.shape(s);
    }
    c.circle(world.robot_goal, 0.2, r##"fill="none" stroke="#2a9d2a" stroke-width="2""##);
    for a in frame.agents {
        c.circle(a.pos, a.radius, r##"fill="#e07b39" fill-opacity="0.8""##);
        let tip = [a.pos[0] + 0.5 * a.vel[0], a.pos[1] + 0.5 * a.vel[1]];
        c.polyline(&[a.pos, tip], r##"stroke="#e07b39" stroke-width="1.5""##);
    }
    let pose = frame.robot.pose;
    for (i, cand) in frame.plan.candidates.iter().enumerate() {
        if Some(i) == frame.plan.cand_idx {
            continue;
        }
        let world_pts: Vec<[f64; 2]> = cand.iter().map(|p| pose.to_world(*p)).collect();
        c.polyline(&world_pts, r##"stroke="#9a9a9a" stroke-width="1""##);
    }
    let chosen: Vec<[f64; 2]> = frame.plan.trajectory.xy.iter().map(|p| pose.to_world(*p)).collect();
    c.polyline(&chosen, r##"stroke="#1f5fbf" stroke-width="2.5""##);
    c.circle(pose.position(), frame.robot.radius, r##"fill="#1f5fbf""##);
    let head = pose.to_world([frame.robot.radius * 1.6, 0.0]);
    c.polyline(&[pose.position(), head], r##"stroke="#0b2e66" stroke-width="2""##);
    let caption = match frame.plan.cand_idx {
        Some(i) => format!("step {} t={:.1}s chosen={i}", frame.step, frame.time),
        None => format!("step {} t={:.1}s", frame.step, frame.time),
    };
    c.finish(&caption)
}
