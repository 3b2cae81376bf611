//! Top-down orthographic rasterizer. Painter's order: table, frame, hole,
//! peg, gripper (so the gripper occludes the peg beneath it).

use super::geometry::{contains, dist_to_polygon, translate, Point};
use super::obs::IMAGE_LEN;
use super::{FrameKind, FRAME_HALF_SIZE, GRIPPER_PALM_HALF_WIDTH, IMAGE_SIZE, PAD_HALF_SPAN, PAD_THICKNESS, WORKSPACE_HALF};

pub const TABLE_RGB: [f32; 3] = [0.36, 0.31, 0.26];
pub const FRAME_RGB: [f32; 3] = [0.20, 0.40, 0.80];
pub const HOLE_RGB: [f32; 3] = [0.05, 0.05, 0.10];
pub const PEG_RGB: [f32; 3] = [0.95, 0.60, 0.10];
pub const GRIPPER_RGB: [f32; 3] = [0.55, 0.55, 0.58];

#[derive(Clone, Debug)]
pub struct FrameGeom {
    pub kind: FrameKind,
    pub center: Point,
    /// Hole outline: the peg outline grown by the clearance, centered on `center`.
    pub hole_outline: Vec<Point>,
    pub clearance: f64,
}

#[derive(Clone, Debug)]
pub struct PegGeom {
    /// World-frame outline.
    pub outline: Vec<Point>,
    pub bottom_z: f64,
}

#[derive(Clone, Debug)]
pub struct GripperGeom {
    pub position: [f64; 3],
    /// World x of the inner faces of the left and right pads.
    pub pad_inner_x: [f64; 2],
}

/// What to draw; absent entities are skipped.
#[derive(Clone, Debug, Default)]
pub struct Scene {
    pub frame: Option<FrameGeom>,
    pub peg: Option<PegGeom>,
    pub gripper: Option<GripperGeom>,
}

/// Which entity owns each pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Table,
    Frame,
    Hole,
    Peg,
    Gripper,
}

fn pixel_center(u: usize, v: usize) -> Point {
    let pitch = 2.0 * WORKSPACE_HALF / IMAGE_SIZE as f64;
    [-WORKSPACE_HALF + (u as f64 + 0.5) * pitch, WORKSPACE_HALF - (v as f64 + 0.5) * pitch]
}

fn in_frame(frame: &FrameGeom, p: Point) -> bool {
    let (dx, dy) = (p[0] - frame.center[0], p[1] - frame.center[1]);
    match frame.kind {
        FrameKind::Square => dx.abs() <= FRAME_HALF_SIZE && dy.abs() <= FRAME_HALF_SIZE,
        FrameKind::Circle => dx * dx + dy * dy <= FRAME_HALF_SIZE * FRAME_HALF_SIZE,
    }
}

fn in_gripper(g: &GripperGeom, p: Point) -> bool {
    let y = g.position[1];
    let dy = (p[1] - y).abs();
    let [left, right] = g.pad_inner_x;
    let in_pads = dy <= PAD_HALF_SPAN && ((p[0] >= left - PAD_THICKNESS && p[0] <= left) || (p[0] >= right && p[0] <= right + PAD_THICKNESS));
    let in_palm = dy <= GRIPPER_PALM_HALF_WIDTH && p[0] >= left - PAD_THICKNESS && p[0] <= right + PAD_THICKNESS;
    in_pads || in_palm
}

/// Top-most entity at world point `p`.
pub fn layer_at(scene: &Scene, p: Point) -> Layer {
    if scene.gripper.as_ref().is_some_and(|g| in_gripper(g, p)) {
        return Layer::Gripper;
    }
    if scene.peg.as_ref().is_some_and(|peg| contains(&peg.outline, p)) {
        return Layer::Peg;
    }
    if let Some(frame) = &scene.frame {
        if in_frame(frame, p) {
            return if dist_to_polygon(&frame.hole_outline, p) <= frame.clearance { Layer::Hole } else { Layer::Frame };
        }
    }
    Layer::Table
}

fn shade(rgb: [f32; 3], height: f64) -> [f32; 3] {
    // brighter when higher above the table
    let k = (0.7 + 4.0 * height).clamp(0.5, 1.0) as f32;
    [rgb[0] * k, rgb[1] * k, rgb[2] * k]
}

/// 64x64x3 image in [0, 1], row 0 at the far (+y) edge of the workspace.
pub fn render_scene(scene: &Scene) -> Vec<f32> {
    let mut img = Vec::with_capacity(IMAGE_LEN);
    for v in 0..IMAGE_SIZE {
        for u in 0..IMAGE_SIZE {
            let rgb = match layer_at(scene, pixel_center(u, v)) {
                Layer::Table => TABLE_RGB,
                Layer::Frame => FRAME_RGB,
                Layer::Hole => HOLE_RGB,
                Layer::Peg => shade(PEG_RGB, scene.peg.as_ref().map_or(0.0, |p| p.bottom_z)),
                Layer::Gripper => shade(GRIPPER_RGB, scene.gripper.as_ref().map_or(0.0, |g| g.position[2])),
            };
            img.extend_from_slice(&rgb);
        }
    }
    img
}

/// Fraction of the peg's pixels hidden by the gripper.
pub fn peg_occlusion(scene: &Scene) -> f64 {
    let Some(peg) = &scene.peg else { return 0.0 };
    let mut covered = 0usize;
    let mut total = 0usize;
    for v in 0..IMAGE_SIZE {
        for u in 0..IMAGE_SIZE {
            let p = pixel_center(u, v);
            if contains(&peg.outline, p) {
                total += 1;
                if layer_at(scene, p) == Layer::Gripper {
                    covered += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        covered as f64 / total as f64
    }
}

pub(crate) fn hole_outline(peg_outline: &[Point], center: Point) -> Vec<Point> {
    translate(peg_outline, center)
}
