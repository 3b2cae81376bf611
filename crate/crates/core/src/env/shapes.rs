//! Peg shape library: 18 training shapes and 2 held-out test shapes.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::geometry::{bounds, is_simple, signed_area, Point};
use super::PAD_HALF_SPAN;
use crate::config::Split;
use crate::error::{Error, Result};

/// Widest peg (along the grip axis) the gripper can hold, in meters.
pub const MAX_GRIP_OPENING: f64 = 0.032;

pub const TEST_SHAPE_IDS: [&str; 2] = ["rectangle", "v_shape"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PegShape {
    pub id: String,
    pub split: Split,
    /// Counter-clockwise outline in meters, in the peg frame (grip axis is x).
    pub vertices: Vec<Point>,
}

impl PegShape {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: &str| Err(Error::InvalidShape { id: self.id.clone(), reason: reason.into() });
        if self.vertices.len() < 3 {
            return fail("needs at least 3 vertices");
        }
        if self.vertices.iter().flatten().any(|v| !v.is_finite()) {
            return fail("vertices must be finite");
        }
        if !is_simple(&self.vertices) {
            return fail("outline self-intersects");
        }
        if signed_area(&self.vertices) <= 0.0 {
            return fail("vertices must be counter-clockwise");
        }
        let (lo, hi) = bounds(&self.vertices);
        if hi[0] - lo[0] > MAX_GRIP_OPENING {
            return fail("wider than the gripper opening");
        }
        if lo[1] < -PAD_HALF_SPAN || hi[1] > PAD_HALF_SPAN {
            return fail("extends beyond the pad span");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeLibrary {
    pub shapes: Vec<PegShape>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LibraryFile {
    shape: Vec<PegShape>,
}

fn mm(points: &[(f64, f64)]) -> Vec<Point> {
    let mut v: Vec<Point> = points.iter().map(|&(x, y)| [x * 1e-3, y * 1e-3]).collect();
    if signed_area(&v) < 0.0 {
        v.reverse();
    }
    v
}

fn regular(n: usize, radius_mm: f64, phase: f64) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let a = phase + 2.0 * PI * i as f64 / n as f64;
            (radius_mm * a.cos(), radius_mm * a.sin())
        })
        .collect()
}

type Outline = (&'static str, Split, Vec<(f64, f64)>);

fn builtin_outlines() -> Vec<Outline> {
    use Split::{Test, Train};
    let star: Vec<(f64, f64)> = (0..10)
        .map(|i| {
            let r = if i % 2 == 0 { 13.0 } else { 6.0 };
            let a = PI / 2.0 + PI * i as f64 / 5.0;
            (r * a.cos(), r * a.sin())
        })
        .collect();
    let half_disk: Vec<(f64, f64)> = (0..=12)
        .map(|i| {
            let a = PI * i as f64 / 12.0;
            (12.0 * a.cos(), 12.0 * a.sin() - 5.0)
        })
        .collect();
    let ellipse: Vec<(f64, f64)> = (0..16)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / 16.0;
            (12.0 * a.cos(), 8.0 * a.sin())
        })
        .collect();
    vec![
        ("square", Train, vec![(-10., -10.), (10., -10.), (10., 10.), (-10., 10.)]),
        (
            "cross",
            Train,
            vec![
                (-4., -12.),
                (4., -12.),
                (4., -4.),
                (12., -4.),
                (12., 4.),
                (4., 4.),
                (4., 12.),
                (-4., 12.),
                (-4., 4.),
                (-12., 4.),
                (-12., -4.),
                (-4., -4.),
            ],
        ),
        ("l_shape", Train, vec![(-10., -12.), (10., -12.), (10., -4.), (-2., -4.), (-2., 12.), (-10., 12.)]),
        ("t_shape", Train, vec![(-4., -12.), (4., -12.), (4., 4.), (12., 4.), (12., 12.), (-12., 12.), (-12., 4.), (-4., 4.)]),
        ("u_shape", Train, vec![(-11., -11.), (11., -11.), (11., 11.), (4., 11.), (4., -3.), (-4., -3.), (-4., 11.), (-11., 11.)]),
        ("notched_rect", Train, vec![(-12., -8.), (-3., -8.), (-3., -2.), (3., -2.), (3., -8.), (12., -8.), (12., 8.), (-12., 8.)]),
        ("hexagon", Train, regular(6, 12.0, 0.0)),
        ("octagon", Train, regular(8, 12.0, PI / 8.0)),
        ("triangle", Train, regular(3, 13.0, PI / 2.0)),
        ("trapezoid", Train, vec![(-12., -9.), (12., -9.), (6., 9.), (-6., 9.)]),
        ("diamond", Train, vec![(0., -13.), (11., 0.), (0., 13.), (-11., 0.)]),
        ("pentagon", Train, regular(5, 12.0, PI / 2.0)),
        ("arrow", Train, vec![(-3., -12.), (3., -12.), (3., 2.), (10., 2.), (0., 12.), (-10., 2.), (-3., 2.)]),
        (
            "h_shape",
            Train,
            vec![
                (-11., -12.),
                (-5., -12.),
                (-5., -3.),
                (5., -3.),
                (5., -12.),
                (11., -12.),
                (11., 12.),
                (5., 12.),
                (5., 3.),
                (-5., 3.),
                (-5., 12.),
                (-11., 12.),
            ],
        ),
        (
            "z_shape",
            Train,
            vec![(-11., -12.), (11., -12.), (11., -6.), (-1., -6.), (11., 6.), (11., 12.), (-11., 12.), (-11., 6.), (1., 6.), (-11., -6.)],
        ),
        ("star", Train, star),
        ("half_disk", Train, half_disk),
        ("ellipse", Train, ellipse),
        ("rectangle", Test, vec![(-12., -6.), (12., -6.), (12., 6.), (-12., 6.)]),
        ("v_shape", Test, vec![(-2., -12.), (2., -12.), (12., 12.), (6., 12.), (0., -2.), (-6., 12.), (-12., 12.)]),
    ]
}

impl ShapeLibrary {
    /// The procedurally defined default library.
    pub fn builtin() -> Self {
        let shapes = builtin_outlines().into_iter().map(|(id, split, pts)| PegShape { id: id.to_string(), split, vertices: mm(&pts) }).collect();
        Self { shapes }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for shape in &self.shapes {
            shape.validate()?;
            if !seen.insert(shape.id.as_str()) {
                return Err(Error::InvalidShape { id: shape.id.clone(), reason: "duplicate id".into() });
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&PegShape> {
        self.shapes.iter().find(|s| s.id == id)
    }

    pub fn split(&self, split: Split) -> Vec<&PegShape> {
        self.shapes.iter().filter(|s| s.split == split).collect()
    }

    /// Shapes of `split`, restricted to `allow` when it is nonempty.
    pub fn select(&self, split: Split, allow: &[String]) -> Result<Vec<&PegShape>> {
        let all = self.split(split);
        if allow.is_empty() {
            return Ok(all);
        }
        allow
            .iter()
            .map(|id| {
                all.iter().copied().find(|s| &s.id == id).ok_or_else(|| Error::Config(format!("`env.train_shapes`: `{id}` is not a {split} shape")))
            })
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&LibraryFile { shape: self.shapes.clone() }).expect("library serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: LibraryFile = toml::from_str(text).map_err(|e| Error::Config(format!("shape library: {e}")))?;
        let lib = Self { shapes: file.shape };
        lib.validate()?;
        Ok(lib)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_library_has_the_expected_split() {
        let lib = ShapeLibrary::builtin();
        lib.validate().unwrap();
        assert_eq!(lib.split(Split::Train).len(), 18);
        let test: Vec<&str> = lib.split(Split::Test).iter().map(|s| s.id.as_str()).collect();
        assert_eq!(test, TEST_SHAPE_IDS);
    }

    #[test]
    fn library_roundtrips_through_text() {
        let lib = ShapeLibrary::builtin();
        let text = lib.to_toml();
        assert!(text.contains("id = \"v_shape\""));
        assert_eq!(ShapeLibrary::from_toml(&text).unwrap(), lib);
    }

    #[test]
    fn invalid_shapes_are_rejected_with_reason() {
        let mut shape = ShapeLibrary::builtin().get("square").unwrap().clone();
        shape.vertices.reverse();
        assert!(shape.validate().unwrap_err().to_string().contains("counter-clockwise"));

        let wide = PegShape { id: "wide".into(), split: Split::Train, vertices: mm(&[(-20., -5.), (20., -5.), (0., 5.)]) };
        assert!(wide.validate().unwrap_err().to_string().contains("opening"));

        let tall = PegShape { id: "tall".into(), split: Split::Train, vertices: mm(&[(-5., -20.), (5., -20.), (0., 5.)]) };
        assert!(tall.validate().unwrap_err().to_string().contains("pad span"));
    }

    #[test]
    fn selection_respects_allow_list() {
        let lib = ShapeLibrary::builtin();
        let picked = lib.select(Split::Train, &["cross".into(), "square".into()]).unwrap();
        assert_eq!(picked.len(), 2);
        assert!(lib.select(Split::Train, &["rectangle".into()]).is_err());
    }
}
