//! Contact loads to taxel force maps.
//!
//! Each contact spreads its normal force over the taxels of its patch: a
//! uniform share plus a linear gradient about the patch centroid whose first
//! moment reproduces the force's offset from that centroid. Negative pressure
//! from the gradient is clipped to zero. Tangential force follows the pressure
//! distribution. Readings are divided by the per-taxel force scale and clipped
//! to [-1, 1].

use super::obs::TAXEL_LEN;
use super::{taxel_center, Contact, EnvState, Pad, TAXEL_GRID};

/// Per-taxel forces in newtons before normalization, as `[shear_x, shear_y, pressure]` per taxel.
pub fn contact_forces(contacts: &[Contact], pad: Pad) -> Vec<[f64; 3]> {
    let mut out = vec![[0.0; 3]; TAXEL_GRID * TAXEL_GRID];
    for c in contacts.iter().filter(|c| c.pad == pad && !c.patch.is_empty()) {
        let pts: Vec<[f64; 2]> = c.patch.iter().map(|&t| taxel_center(t as usize)).collect();
        let n = pts.len() as f64;
        let mean = pts.iter().fold([0.0; 2], |acc, p| [acc[0] + p[0] / n, acc[1] + p[1] / n]);
        // second moment of the patch about its centroid
        let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
        for p in &pts {
            let (dx, dy) = (p[0] - mean[0], p[1] - mean[1]);
            sxx += dx * dx;
            sxy += dx * dy;
            syy += dy * dy;
        }
        let moment = [c.normal_force * (c.point[0] - mean[0]), c.normal_force * (c.point[1] - mean[1])];
        let grad = solve_2x2(sxx, sxy, syy, moment);
        let mut pressure: Vec<f64> =
            pts.iter().map(|p| (c.normal_force / n + grad[0] * (p[0] - mean[0]) + grad[1] * (p[1] - mean[1])).max(0.0)).collect();
        let total: f64 = pressure.iter().sum();
        if total <= 0.0 {
            pressure.iter_mut().for_each(|v| *v = c.normal_force.max(0.0) / n);
        }
        let total: f64 = pressure.iter().sum();
        for (&taxel, &p) in c.patch.iter().zip(&pressure) {
            let share = if total > 0.0 { p / total } else { 1.0 / n };
            let cell = &mut out[taxel as usize];
            cell[0] += c.tangential_force[0] * share;
            cell[1] += c.tangential_force[1] * share;
            cell[2] += p;
        }
    }
    out
}

/// Solves the symmetric system, falling back to per-axis division for degenerate patches.
fn solve_2x2(sxx: f64, sxy: f64, syy: f64, rhs: [f64; 2]) -> [f64; 2] {
    let det = sxx * syy - sxy * sxy;
    let scale = (sxx + syy).max(f64::MIN_POSITIVE);
    if det.abs() > 1e-9 * scale * scale {
        [(syy * rhs[0] - sxy * rhs[1]) / det, (sxx * rhs[1] - sxy * rhs[0]) / det]
    } else {
        let axis = |s: f64, r: f64| if s > 1e-12 * scale { r / s } else { 0.0 };
        [axis(sxx, rhs[0]), axis(syy, rhs[1])]
    }
}

fn normalize(forces: &[[f64; 3]], force_max: f64) -> Vec<f32> {
    let mut out = Vec::with_capacity(TAXEL_LEN);
    for f in forces {
        for &v in f {
            out.push((v / force_max).clamp(-1.0, 1.0) as f32);
        }
    }
    out
}

/// Normalized `(left, right)` maps, 32x32x3 each.
pub fn compute_taxel_maps(state: &EnvState, force_max: f64) -> (Vec<f32>, Vec<f32>) {
    (normalize(&contact_forces(&state.contact_set, Pad::Left), force_max), normalize(&contact_forces(&state.contact_set, Pad::Right), force_max))
}
