//! Planar peg insertion with a floating parallel-jaw gripper.
//!
//! Kinematics are quasi-static: the gripper tracks its commanded position
//! unless the held peg is blocked by the target frame, the hole walls, or the
//! table. Blocked motion becomes spring penetration (force = stiffness x depth)
//! and is transmitted to the two finger pads as pressure and shear, limited by
//! Coulomb friction; load beyond the friction cap makes the peg slip in the
//! grasp.

pub mod geometry;
mod obs;
pub mod render;
pub mod shapes;
pub mod tactile;
mod vec_env;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{EnvConfig, Split};
use crate::error::{Error, Result};
use geometry::{polygon_overlaps_disk, polygons_overlap, scanline_x_range, translate, Point};
pub(crate) use obs::note_tactile_read;
pub use obs::{reset_tactile_reads, tactile_reads, FrameStack, StackedObs, VisuoTactileObs, IMAGE_LEN, TAXEL_LEN};
use render::{FrameGeom, GripperGeom, PegGeom, Scene};
pub use shapes::{PegShape, ShapeLibrary, TEST_SHAPE_IDS};
pub use vec_env::{EpisodeStats, VecEnv, VecStep};

pub const IMAGE_SIZE: usize = 64;
pub const TAXEL_GRID: usize = 32;
/// Half extent of each pad face (m); the pad covers +-this in both pad axes.
pub const PAD_HALF_SPAN: f64 = 0.016;
pub const TAXEL_PITCH: f64 = 2.0 * PAD_HALF_SPAN / TAXEL_GRID as f64;
pub const PAD_THICKNESS: f64 = 0.004;
pub const GRIPPER_PALM_HALF_WIDTH: f64 = 0.01;
/// Pad compliance: peg surface within this depth of the extreme face touches the pad.
pub const PAD_COMPLIANCE: f64 = 0.0015;
/// The camera sees `[-h, h]^2` of the table.
pub const WORKSPACE_HALF: f64 = 0.1;
pub const MAX_GRIPPER_Z: f64 = 0.12;
pub const FRAME_HALF_SIZE: f64 = 0.035;
pub const FRAME_TOP_Z: f64 = 0.03;
pub const HOLE_FLOOR_Z: f64 = 0.01;
pub const PEG_HEIGHT: f64 = 0.04;
/// Peg bottom sits this far below the pad center when the grasp is unslipped.
pub const PEG_BELOW_GRIPPER: f64 = 0.025;
pub const TARGET_RANGE: f64 = 0.05;
pub const INIT_XY_RANGE: f64 = 0.08;
pub const INIT_Z_RANGE: (f64, f64) = (0.06, 0.09);
/// Largest slip of the peg inside the grasp along either pad axis (m).
pub const SLIP_LIMIT: f64 = 0.01;
/// Seeded jitter of the initial grasp along the pad's horizontal axis (m).
pub const GRASP_JITTER: f64 = 0.001;
const GRAVITY: f64 = 9.81;

/// Row-major taxel index.
pub fn taxel_index(row: usize, col: usize) -> usize {
    row * TAXEL_GRID + col
}

/// Pad-plane coordinates `[horizontal, vertical]` (m) of a taxel center,
/// relative to the pad center. Row 0 is the top of the pad; column 0 is at -y.
pub fn taxel_center(index: usize) -> [f64; 2] {
    let (row, col) = (index / TAXEL_GRID, index % TAXEL_GRID);
    [-PAD_HALF_SPAN + (col as f64 + 0.5) * TAXEL_PITCH, PAD_HALF_SPAN - (row as f64 + 0.5) * TAXEL_PITCH]
}

/// r = -ln(100 d + 1).
pub fn dense_reward(d: f64) -> Result<f64> {
    if d.is_nan() || d < 0.0 {
        return Err(Error::NegativeDistance(d));
    }
    Ok(-(100.0 * d + 1.0).ln())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    Square,
    Circle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub peg: PegShape,
    pub target_frame: FrameKind,
    /// Hole center on the table (m).
    pub target_position: Point,
    pub init_gripper_position: [f64; 3],
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        self.peg.validate().map_err(|e| Error::InvalidTask(format!("peg: {e}")))?;
        let [tx, ty] = self.target_position;
        if !(tx.abs() <= TARGET_RANGE && ty.abs() <= TARGET_RANGE) {
            return Err(Error::InvalidTask(format!("target_position ({tx}, {ty}) lies outside the workspace bounds +-{TARGET_RANGE}")));
        }
        let [x, y, z] = self.init_gripper_position;
        if !(x.abs() <= INIT_XY_RANGE && y.abs() <= INIT_XY_RANGE && z >= INIT_Z_RANGE.0 && z <= INIT_Z_RANGE.1) {
            return Err(Error::InvalidTask(format!("init_gripper_position ({x}, {y}, {z}) lies outside the randomization box")));
        }
        Ok(())
    }

    /// Peg-bottom position at full insertion.
    pub fn target_3d(&self) -> [f64; 3] {
        [self.target_position[0], self.target_position[1], HOLE_FLOOR_Z]
    }
}

/// Uniform draw of peg, frame kind, target location and initial gripper position.
pub fn sample_task<R: Rng + ?Sized>(rng: &mut R, shapes: &[&PegShape]) -> Result<TaskSpec> {
    if shapes.is_empty() {
        return Err(Error::Config("cannot sample a task from an empty shape set".into()));
    }
    let peg = shapes[rng.random_range(0..shapes.len())].clone();
    let target_frame = if rng.random_bool(0.5) { FrameKind::Square } else { FrameKind::Circle };
    let target_position = [rng.random_range(-TARGET_RANGE..=TARGET_RANGE), rng.random_range(-TARGET_RANGE..=TARGET_RANGE)];
    let init_gripper_position = [
        rng.random_range(-INIT_XY_RANGE..=INIT_XY_RANGE),
        rng.random_range(-INIT_XY_RANGE..=INIT_XY_RANGE),
        rng.random_range(INIT_Z_RANGE.0..=INIT_Z_RANGE.1),
    ];
    Ok(TaskSpec { peg, target_frame, target_position, init_gripper_position })
}

/// Draws tasks from one split of a shape library.
#[derive(Clone, Debug)]
pub struct TaskSampler {
    shapes: Vec<PegShape>,
    split: Split,
}

impl TaskSampler {
    pub fn new(library: &ShapeLibrary, split: Split, allow: &[String]) -> Result<Self> {
        let allow: &[String] = if split == Split::Train { allow } else { &[] };
        let shapes: Vec<PegShape> = library.select(split, allow)?.into_iter().cloned().collect();
        if shapes.is_empty() {
            return Err(Error::Config(format!("the {split} split has no shapes")));
        }
        Ok(Self { shapes, split })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn shape_ids(&self) -> Vec<&str> {
        self.shapes.iter().map(|s| s.id.as_str()).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TaskSpec {
        let refs: Vec<&PegShape> = self.shapes.iter().collect();
        sample_task(rng, &refs).expect("sampler holds at least one shape")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pad {
    /// Finger on the -x side of the peg.
    Left,
    Right,
}

/// A pad-peg contact and the taxel patch carrying it.
#[derive(Clone, Debug, PartialEq)]
pub struct Contact {
    pub pad: Pad,
    /// Application point in pad-plane coordinates (see [`taxel_center`]).
    pub point: [f64; 2],
    /// Compressive force on the pad (N), never negative.
    pub normal_force: f64,
    /// Force the peg exerts on the pad along the pad axes (N).
    pub tangential_force: [f64; 2],
    /// Taxel indices of the contact patch.
    pub patch: Vec<u16>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoneReason {
    #[default]
    None,
    Success,
    Timeout,
}

/// Peg pose; rotation is fixed by the grasp so `yaw` stays 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PegPose {
    /// Center of the peg's bottom face (m).
    pub position: [f64; 3],
    pub yaw: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EnvState {
    pub gripper_position: [f64; 3],
    /// Displacement over the last step (m/step).
    pub gripper_velocity: [f64; 3],
    pub peg_pose: PegPose,
    /// Peg offset inside the grasp along the pad axes (m).
    pub grasp_offset: [f64; 2],
    /// Force from the frame/table on the peg (N).
    pub external_force: [f64; 3],
    pub contact_set: Vec<Contact>,
    pub distance_to_target: f64,
    pub step_count: usize,
    pub done_reason: DoneReason,
}

#[derive(Clone, Debug)]
pub struct StepInfo {
    pub distance: f64,
    pub contacts: Vec<Contact>,
    pub done_reason: DoneReason,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub obs: StackedObs,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Single insertion environment instance.
#[derive(Clone, Debug)]
pub struct InsertionEnv {
    cfg: EnvConfig,
    task: Option<TaskSpec>,
    state: EnvState,
    stack: FrameStack,
}

struct Resolved {
    peg: [f64; 3],
    external: [f64; 3],
}

impl InsertionEnv {
    pub fn new(cfg: EnvConfig) -> Self {
        let stack = FrameStack::new(cfg.frame_stack.max(1));
        Self { cfg, task: None, state: EnvState::default(), stack }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn task(&self) -> Option<&TaskSpec> {
        self.task.as_ref()
    }

    pub fn reset(&mut self, seed: u64, task: TaskSpec) -> Result<StackedObs> {
        task.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let jitter = rng.random_range(-GRASP_JITTER..=GRASP_JITTER);
        let g = task.init_gripper_position;
        let offset = [jitter, 0.0];
        let peg = peg_from_gripper(g, offset);
        self.state = EnvState {
            gripper_position: g,
            gripper_velocity: [0.0; 3],
            peg_pose: PegPose { position: peg, yaw: 0.0 },
            grasp_offset: offset,
            external_force: [0.0; 3],
            contact_set: Vec::new(),
            distance_to_target: distance(peg, task.target_3d()),
            step_count: 0,
            done_reason: DoneReason::None,
        };
        self.task = Some(task);
        self.state.contact_set = self.pad_contacts([0.0; 3]);
        let first = self.observe();
        self.stack.reset(first);
        Ok(self.stack.stacked())
    }

    pub fn step(&mut self, action: [f64; 3]) -> Result<StepResult> {
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFiniteAction(action));
        }
        let task = self.task.as_ref().ok_or(Error::EpisodeDone)?;
        if self.state.done_reason != DoneReason::None {
            return Err(Error::EpisodeDone);
        }
        let target = task.target_3d();
        let prev = self.state.gripper_position;
        let step = self.cfg.max_displacement;
        let cmd = [
            (prev[0] + action[0].clamp(-1.0, 1.0) * step).clamp(-WORKSPACE_HALF, WORKSPACE_HALF),
            (prev[1] + action[1].clamp(-1.0, 1.0) * step).clamp(-WORKSPACE_HALF, WORKSPACE_HALF),
            (prev[2] + action[2].clamp(-1.0, 1.0) * step).clamp(0.0, MAX_GRIPPER_Z),
        ];

        let mut offset = self.state.grasp_offset;
        let mut res = self.resolve(cmd, offset);
        let (normal_total, _) = self.pad_normals(res.external);
        let load = self.pad_tangential_load(res.external);
        let cap = self.cfg.friction * normal_total;
        let load_norm = (load[0] * load[0] + load[1] * load[1]).sqrt();
        if load_norm > cap && self.cfg.contact_stiffness > 0.0 {
            let slip = (load_norm - cap) / self.cfg.contact_stiffness;
            let dir = [load[0] / load_norm, load[1] / load_norm];
            offset = [(offset[0] + slip * dir[0]).clamp(-SLIP_LIMIT, SLIP_LIMIT), (offset[1] + slip * dir[1]).clamp(-SLIP_LIMIT, SLIP_LIMIT)];
            res = self.resolve(cmd, offset);
        }

        let gripper = gripper_from_peg(res.peg, offset);
        self.state.gripper_velocity = [gripper[0] - prev[0], gripper[1] - prev[1], gripper[2] - prev[2]];
        self.state.gripper_position = gripper;
        self.state.peg_pose.position = res.peg;
        self.state.grasp_offset = offset;
        self.state.external_force = res.external;
        self.state.contact_set = self.pad_contacts(res.external);
        self.state.step_count += 1;
        let d = distance(res.peg, target);
        self.state.distance_to_target = d;

        let mut reward = dense_reward(d)?;
        if d < self.cfg.success_threshold {
            reward += self.cfg.success_bonus;
            self.state.done_reason = DoneReason::Success;
        } else if self.state.step_count >= self.cfg.max_steps {
            self.state.done_reason = DoneReason::Timeout;
        }
        let frame = self.observe();
        self.stack.push(frame);
        Ok(StepResult {
            obs: self.stack.stacked(),
            reward,
            done: self.state.done_reason != DoneReason::None,
            info: StepInfo { distance: d, contacts: self.state.contact_set.clone(), done_reason: self.state.done_reason },
        })
    }

    fn task_ref(&self) -> &TaskSpec {
        self.task.as_ref().expect("environment was reset")
    }

    fn peg_outline_at(&self, xy: Point) -> Vec<Point> {
        translate(&self.task_ref().peg.vertices, xy)
    }

    fn in_hole(&self, xy: Point) -> bool {
        let t = self.task_ref().target_position;
        let (dx, dy) = (xy[0] - t[0], xy[1] - t[1]);
        // the hole is the peg outline grown by the clearance, so the translated
        // peg fits exactly when the offset is within the clearance
        (dx * dx + dy * dy).sqrt() <= self.cfg.hole_clearance
    }

    fn over_frame(&self, xy: Point) -> bool {
        let task = self.task_ref();
        let outline = self.peg_outline_at(xy);
        let c = task.target_position;
        match task.target_frame {
            FrameKind::Square => {
                let h = FRAME_HALF_SIZE;
                let square = [[c[0] - h, c[1] - h], [c[0] + h, c[1] - h], [c[0] + h, c[1] + h], [c[0] - h, c[1] + h]];
                polygons_overlap(&outline, &square)
            }
            FrameKind::Circle => polygon_overlaps_disk(&outline, c, FRAME_HALF_SIZE),
        }
    }

    fn floor_at(&self, xy: Point) -> f64 {
        if self.in_hole(xy) {
            HOLE_FLOOR_Z
        } else if self.over_frame(xy) {
            FRAME_TOP_Z
        } else {
            0.0
        }
    }

    /// Projects the commanded peg position onto the reachable set.
    fn resolve(&self, cmd: [f64; 3], offset: [f64; 2]) -> Resolved {
        let k = self.cfg.contact_stiffness;
        let from = self.state.peg_pose.position;
        let want = peg_from_gripper(cmd, offset);
        let mut xy = [want[0], want[1]];
        if from[2] < FRAME_TOP_Z - 1e-12 {
            let start = [from[0], from[1]];
            if self.in_hole(start) {
                let t = self.task_ref().target_position;
                let (dx, dy) = (xy[0] - t[0], xy[1] - t[1]);
                let r = (dx * dx + dy * dy).sqrt();
                let c = self.cfg.hole_clearance;
                if r > c {
                    xy = [t[0] + dx * c / r, t[1] + dy * c / r];
                }
            } else if self.over_frame(xy) && !self.in_hole(xy) {
                // beside the frame and below its top: stop at the wall
                let (mut lo, mut hi) = (0.0, 1.0);
                for _ in 0..30 {
                    let mid = 0.5 * (lo + hi);
                    let p = [start[0] + mid * (xy[0] - start[0]), start[1] + mid * (xy[1] - start[1])];
                    if self.over_frame(p) {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                xy = [start[0] + lo * (xy[0] - start[0]), start[1] + lo * (xy[1] - start[1])];
            }
        }
        let floor = self.floor_at(xy);
        let z = want[2].max(floor);
        let peg = [xy[0], xy[1], z];
        let external = [k * (peg[0] - want[0]), k * (peg[1] - want[1]), k * (peg[2] - want[2])];
        Resolved { peg, external }
    }

    /// Total and per-pad `[left, right]` normal forces under an external load.
    fn pad_normals(&self, external: [f64; 3]) -> (f64, [f64; 2]) {
        let grip = self.cfg.grip_force;
        // the left pad pushes the peg toward +x, so a -x load on the peg presses into it
        let left = (grip - 0.5 * external[0]).max(0.0);
        let right = (grip + 0.5 * external[0]).max(0.0);
        (left + right, [left, right])
    }

    /// Load the peg puts on the pads along `[horizontal, vertical]`, gravity included.
    fn pad_tangential_load(&self, external: [f64; 3]) -> [f64; 2] {
        [external[1], external[2] - self.cfg.peg_mass * GRAVITY]
    }

    fn pad_contacts(&self, external: [f64; 3]) -> Vec<Contact> {
        let (total, normals) = self.pad_normals(external);
        let mut load = self.pad_tangential_load(external);
        let cap = self.cfg.friction * total;
        let norm = (load[0] * load[0] + load[1] * load[1]).sqrt();
        if norm > cap && norm > 0.0 {
            load = [load[0] * cap / norm, load[1] * cap / norm];
        }
        let offset = self.state.grasp_offset;
        let peg_bottom = offset[1] - PEG_BELOW_GRIPPER;
        let mut contacts = Vec::with_capacity(2);
        for (pad, normal) in [(Pad::Left, normals[0]), (Pad::Right, normals[1])] {
            let patch = self.pad_patch(pad, offset);
            if patch.is_empty() || normal <= 0.0 {
                continue;
            }
            let n = patch.len() as f64;
            let centroid = patch.iter().fold([0.0; 2], |acc, &t| {
                let p = taxel_center(t as usize);
                [acc[0] + p[0] / n, acc[1] + p[1] / n]
            });
            let (zmin, zmax) = patch.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &t| {
                let z = taxel_center(t as usize)[1];
                (lo.min(z), hi.max(z))
            });
            // lateral load enters at the peg bottom, shifting the center of pressure toward it
            let extra = normal - self.cfg.grip_force;
            let shift = extra * (peg_bottom - centroid[1]) / normal;
            let point = [centroid[0], (centroid[1] + shift).clamp(zmin, zmax)];
            let share = total.max(f64::MIN_POSITIVE);
            contacts.push(Contact {
                pad,
                point,
                normal_force: normal,
                tangential_force: [load[0] * normal / share, load[1] * normal / share],
                patch,
            });
        }
        contacts
    }

    /// Taxels of `pad` touching the peg for the given grasp offset.
    fn pad_patch(&self, pad: Pad, offset: [f64; 2]) -> Vec<u16> {
        let poly = &self.task_ref().peg.vertices;
        let (lo, hi) = geometry::bounds(poly);
        let bottom = offset[1] - PEG_BELOW_GRIPPER;
        let top = bottom + PEG_HEIGHT;
        let mut patch = Vec::new();
        for col in 0..TAXEL_GRID {
            let y = taxel_center(col)[0] - offset[0];
            let Some((xmin, xmax)) = scanline_x_range(poly, y) else { continue };
            let touching = match pad {
                Pad::Left => xmin - lo[0] < PAD_COMPLIANCE,
                Pad::Right => hi[0] - xmax < PAD_COMPLIANCE,
            };
            if !touching {
                continue;
            }
            for row in 0..TAXEL_GRID {
                let z = taxel_center(taxel_index(row, col))[1];
                if z >= bottom && z <= top {
                    patch.push(taxel_index(row, col) as u16);
                }
            }
        }
        patch.sort_unstable();
        patch
    }

    pub fn scene(&self) -> Scene {
        let task = self.task_ref();
        let peg = self.state.peg_pose.position;
        let outline = self.peg_outline_at([peg[0], peg[1]]);
        let (lo, hi) = geometry::bounds(&task.peg.vertices);
        Scene {
            frame: Some(FrameGeom {
                kind: task.target_frame,
                center: task.target_position,
                hole_outline: render::hole_outline(&task.peg.vertices, task.target_position),
                clearance: self.cfg.hole_clearance,
            }),
            peg: Some(PegGeom { outline, bottom_z: peg[2] }),
            gripper: Some(GripperGeom { position: self.state.gripper_position, pad_inner_x: [peg[0] + lo[0], peg[0] + hi[0]] }),
        }
    }

    pub fn render_image(&self) -> Vec<f32> {
        render::render_scene(&self.scene())
    }

    fn observe(&self) -> VisuoTactileObs {
        let (tactile_left, tactile_right) = tactile::compute_taxel_maps(&self.state, self.cfg.taxel_force_max);
        VisuoTactileObs { image: self.render_image(), tactile_left, tactile_right }
    }
}

fn peg_from_gripper(g: [f64; 3], offset: [f64; 2]) -> [f64; 3] {
    [g[0], g[1] + offset[0], g[2] - PEG_BELOW_GRIPPER + offset[1]]
}

fn gripper_from_peg(p: [f64; 3], offset: [f64; 2]) -> [f64; 3] {
    [p[0], p[1] - offset[0], p[2] + PEG_BELOW_GRIPPER - offset[1]]
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}
