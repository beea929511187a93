//! Reproducible synthetic indoor scenes: a floor plane with boxes,
//! cylinders and L-shaped blocks standing on it.
//!
//! Objects are kept at least `min_gap` apart along some axis (their
//! axis-aligned footprints never come closer), and start `min_gap` above
//! the floor, so any voxel size `<= min_gap` gives label-pure voxels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PointCloud, SceneSample};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub object_count: usize,
    /// Floor extent in x and y (meters).
    pub room_size: [f64; 2],
    /// Range of each footprint side (meters).
    pub footprint_range: [f64; 2],
    pub height_range: [f64; 2],
    pub points_per_m2: f64,
    /// Probability that an object is placed flush (at `min_gap`) against
    /// an earlier one.
    pub adjacency: f64,
    pub min_gap: f64,
    pub min_points: usize,
    pub max_attempts: usize,
    pub colors: bool,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            seed: 0,
            object_count: 3,
            room_size: [3.0, 3.0],
            footprint_range: [0.2, 1.0],
            height_range: [0.2, 1.2],
            points_per_m2: 1600.0,
            adjacency: 0.4,
            min_gap: 0.05,
            min_points: 60,
            max_attempts: 500,
            colors: true,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Box,
    Cylinder,
    /// Two boxes: the full-width base strip along y and a leg along x.
    LShape { split_x: f64, split_y: f64 },
}

#[derive(Clone, Copy, Debug)]
struct Object {
    shape: Shape,
    min: [f64; 3],
    max: [f64; 3],
}

impl Object {
    fn separated(&self, other: &Object, gap: f64) -> bool {
        (0..2).any(|a| self.min[a] >= other.max[a] + gap || other.min[a] >= self.max[a] + gap)
    }

    fn covers_floor(&self, x: f64, y: f64) -> bool {
        match self.shape {
            Shape::Box => {
                x >= self.min[0] && x <= self.max[0] && y >= self.min[1] && y <= self.max[1]
            }
            Shape::Cylinder => {
                let (cx, cy, r) = self.circle();
                (x - cx).powi(2) + (y - cy).powi(2) <= r * r
            }
            Shape::LShape { .. } => self.l_boxes().iter().any(|b| {
                x >= b.0[0] && x <= b.1[0] && y >= b.0[1] && y <= b.1[1]
            }),
        }
    }

    fn circle(&self) -> (f64, f64, f64) {
        let r = 0.5 * (self.max[0] - self.min[0]).min(self.max[1] - self.min[1]);
        (
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            r,
        )
    }

    fn l_boxes(&self) -> [([f64; 3], [f64; 3]); 2] {
        let Shape::LShape { split_x, split_y } = self.shape else {
            unreachable!("l_boxes on a non-L object")
        };
        let base = (self.min, [split_x, self.max[1], self.max[2]]);
        let leg = ([split_x, self.min[1], self.min[2]], [self.max[0], split_y, self.max[2]]);
        [base, leg]
    }

    fn sample(&self, density: f64, min_points: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
        let mut pts = Vec::new();
        match self.shape {
            Shape::Box => sample_box_surface(self.min, self.max, density, &mut pts, rng),
            Shape::Cylinder => {
                let (cx, cy, r) = self.circle();
                let h = self.max[2] - self.min[2];
                let side = (std::f64::consts::TAU * r * h * density).round() as usize;
                for _ in 0..side {
                    let t = rng.random_range(0.0..std::f64::consts::TAU);
                    let z = rng.random_range(self.min[2]..self.max[2]);
                    pts.push([cx + r * t.cos(), cy + r * t.sin(), z]);
                }
                let top = (std::f64::consts::PI * r * r * density).round() as usize;
                for _ in 0..top {
                    let t = rng.random_range(0.0..std::f64::consts::TAU);
                    let s = r * rng.random_range(0.0f64..1.0).sqrt();
                    pts.push([cx + s * t.cos(), cy + s * t.sin(), self.max[2]]);
                }
            }
            Shape::LShape { split_x, split_y } => {
                let [base, leg] = self.l_boxes();
                let on_seam = |p: &[f64; 3]| (p[0] - split_x).abs() < 1e-9;
                let mut part = Vec::new();
                sample_box_surface(base.0, base.1, density, &mut part, rng);
                pts.extend(part.drain(..).filter(|p| !(on_seam(p) && p[1] < split_y)));
                sample_box_surface(leg.0, leg.1, density, &mut part, rng);
                pts.extend(part.into_iter().filter(|p| !on_seam(p)));
            }
        }
        // densify thin objects so every one is clickable
        while pts.len() < min_points && !pts.is_empty() {
            let extra = self.sample(density * 2.0, 0, rng);
            pts.extend(extra);
        }
        pts
    }
}

fn sample_box_surface(
    min: [f64; 3],
    max: [f64; 3],
    density: f64,
    out: &mut Vec<[f64; 3]>,
    rng: &mut impl Rng,
) {
    let ext = [max[0] - min[0], max[1] - min[1], max[2] - min[2]];
    // four side faces and the top; the bottom rests on the floor
    let faces: [(usize, f64); 5] = [(0, min[0]), (0, max[0]), (1, min[1]), (1, max[1]), (2, max[2])];
    for (axis, fixed) in faces {
        let (u, v) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let n = (ext[u] * ext[v] * density).round() as usize;
        for _ in 0..n {
            let mut p = [0.0; 3];
            p[axis] = fixed;
            p[u] = min[u] + rng.random_range(0.0..=1.0) * ext[u];
            p[v] = min[v] + rng.random_range(0.0..=1.0) * ext[v];
            out.push(p);
        }
    }
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    // saturated hue so objects differ from the gray floor
    let h = rng.random_range(0.0..6.0);
    let s = rng.random_range(0.55..0.95);
    let v = rng.random_range(0.55..0.95);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0f64).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn jitter(c: [f64; 3], rng: &mut impl Rng) -> [f64; 3] {
    c.map(|v| (v + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0))
}

pub fn generate_synthetic_scene(spec: &GeneratorSpec) -> Result<SceneSample> {
    if spec.object_count == 0 || spec.object_count > 10 {
        return Err(Error::Generation(format!(
            "object_count must be in 1..=10, got {}",
            spec.object_count
        )));
    }
    let [fmin, fmax] = spec.footprint_range;
    let [hmin, hmax] = spec.height_range;
    if !(fmin > 0.0 && fmin <= fmax && hmin > 0.0 && hmin <= hmax && spec.points_per_m2 > 0.0) {
        return Err(Error::Generation("invalid size ranges or density".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gap = spec.min_gap;
    let [room_x, room_y] = spec.room_size;

    let mut objects: Vec<Object> = Vec::with_capacity(spec.object_count);
    for i in 0..spec.object_count {
        let mut placed = None;
        for _ in 0..spec.max_attempts {
            let sx = rng.random_range(fmin..=fmax);
            let sy = rng.random_range(fmin..=fmax);
            let h = rng.random_range(hmin..=hmax);
            let kind = rng.random_range(0..3u32);
            let (x0, y0) = if !objects.is_empty() && rng.random_bool(spec.adjacency) {
                let other = objects[rng.random_range(0..objects.len())];
                match rng.random_range(0..4u32) {
                    0 => (other.max[0] + gap, rng.random_range(other.min[1] - sy..=other.max[1])),
                    1 => (other.min[0] - gap - sx, rng.random_range(other.min[1] - sy..=other.max[1])),
                    2 => (rng.random_range(other.min[0] - sx..=other.max[0]), other.max[1] + gap),
                    _ => (rng.random_range(other.min[0] - sx..=other.max[0]), other.min[1] - gap - sy),
                }
            } else {
                if sx > room_x || sy > room_y {
                    continue;
                }
                (rng.random_range(0.0..=room_x - sx), rng.random_range(0.0..=room_y - sy))
            };
            let min = [x0, y0, gap];
            let max = [x0 + sx, y0 + sy, gap + h];
            if min[0] < 0.0 || min[1] < 0.0 || max[0] > room_x || max[1] > room_y {
                continue;
            }
            let shape = match kind {
                0 => Shape::Box,
                1 => Shape::Cylinder,
                _ => Shape::LShape {
                    split_x: x0 + sx * rng.random_range(0.35..0.65),
                    split_y: y0 + sy * rng.random_range(0.35..0.65),
                },
            };
            let candidate = Object { shape, min, max };
            if objects.iter().all(|o| candidate.separated(o, gap)) {
                placed = Some(candidate);
                break;
            }
        }
        let obj = placed.ok_or_else(|| {
            Error::Generation(format!(
                "could not place object {} of {} after {} attempts",
                i + 1,
                spec.object_count,
                spec.max_attempts
            ))
        })?;
        objects.push(obj);
    }

    let mut points = Vec::new();
    let mut colors = Vec::new();
    let mut labels = Vec::new();

    let floor_color = [0.55, 0.52, 0.48];
    let floor_n = (room_x * room_y * spec.points_per_m2).round() as usize;
    for _ in 0..floor_n {
        let x = rng.random_range(0.0..=room_x);
        let y = rng.random_range(0.0..=room_y);
        if objects.iter().any(|o| o.covers_floor(x, y)) {
            continue;
        }
        points.push([x, y, 0.0]);
        colors.push(jitter(floor_color, &mut rng));
        labels.push(0);
    }
    for (i, obj) in objects.iter().enumerate() {
        let base = random_color(&mut rng);
        for p in obj.sample(spec.points_per_m2, spec.min_points, &mut rng) {
            points.push(p);
            colors.push(jitter(base, &mut rng));
            labels.push(i as u32 + 1);
        }
    }

    let cloud = PointCloud {
        points,
        colors: spec.colors.then_some(colors),
        labels: Some(labels),
    };
    SceneSample::new(
        format!("synthetic-{}", spec.seed),
        cloud,
        (1..=spec.object_count as u32).collect(),
    )
}
