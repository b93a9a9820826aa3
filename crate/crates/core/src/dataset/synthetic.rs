//! Procedural labelled facades.
//!
//! Frame: x runs along the facade, z is up, y points out of the wall
//! (the wall plane is y = 0, window glass sits behind it).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::rng::Prng;

use super::class;

/// Default label proportions, indexed by class id.
pub const CLASS_TARGETS: [f64; 8] = [0.05, 0.09, 0.12, 0.30, 0.07, 0.15, 0.17, 0.05];

const COLUMN_WIDTH: f64 = 0.7;
const COLUMN_DEPTH: f64 = 0.35;
const WINDOW_RECESS: f64 = 0.15;
const BALCONY_DEPTH: f64 = 1.1;
const SLAB: f64 = 0.2;
const RAIL_HEIGHT: f64 = 0.9;
const EAVE_HEIGHT: f64 = 0.5;
const EAVE_DEPTH: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FacadeSpec {
    pub width: f64,
    pub floors: usize,
    pub floor_height: f64,
    pub columns: usize,
    pub windows_per_bay: usize,
    pub balcony_prob: f64,
    pub clutter_blobs: usize,
    /// Standard deviation of the positional jitter, metres.
    pub position_noise: f64,
    /// Standard deviation of the per-point colour jitter, 0..255 units.
    pub color_noise: f64,
    pub class_fractions: [f64; 8],
}

impl Default for FacadeSpec {
    fn default() -> Self {
        FacadeSpec {
            width: 20.0,
            floors: 4,
            floor_height: 3.2,
            columns: 4,
            windows_per_bay: 2,
            balcony_prob: 0.4,
            clutter_blobs: 8,
            position_noise: 0.01,
            color_noise: 10.0,
            class_fractions: CLASS_TARGETS,
        }
    }
}

impl FacadeSpec {
    /// Layout varied per seed around the default, same class fractions.
    pub fn sample(rng: &mut Prng) -> Self {
        let mut s = FacadeSpec {
            width: rng.uniform(16.0, 24.0),
            floors: 3 + rng.below(3),
            floor_height: rng.uniform(3.0, 3.5),
            columns: 3 + rng.below(3),
            windows_per_bay: 1 + rng.below(3),
            balcony_prob: rng.uniform(0.3, 0.6),
            clutter_blobs: 6 + rng.below(7),
            ..FacadeSpec::default()
        };
        let fits = (s.bay_width() / 1.4).floor() as usize;
        s.windows_per_bay = s.windows_per_bay.min(fits.max(1));
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("facade spec: {m}")));
        if self.floors < 2 {
            return bad("at least 2 floors are needed for balconies");
        }
        if self.columns < 2 || self.windows_per_bay == 0 {
            return bad("at least 2 columns and 1 window per bay");
        }
        if !(self.floor_height >= 2.8) {
            return bad("floor_height must be at least 2.8 m");
        }
        let bay = self.bay_width();
        if !(bay / self.windows_per_bay as f64 >= 1.4) {
            return bad("facade too narrow for the requested columns and windows");
        }
        if !(0.0..=1.0).contains(&self.balcony_prob) {
            return bad("balcony_prob must lie in [0, 1]");
        }
        if !(self.position_noise >= 0.0 && self.color_noise >= 0.0) {
            return bad("noise levels must be nonnegative");
        }
        if self.class_fractions.iter().any(|f| !(*f >= 0.0)) || self.class_fractions.iter().sum::<f64>() <= 0.0 {
            return bad("class fractions must be nonnegative with a positive sum");
        }
        Ok(())
    }

    fn column_centers(&self) -> Vec<f64> {
        let (lo, hi) = (COLUMN_WIDTH / 2.0, self.width - COLUMN_WIDTH / 2.0);
        (0..self.columns).map(|j| lo + (hi - lo) * j as f64 / (self.columns - 1) as f64).collect()
    }

    fn bay_width(&self) -> f64 {
        (self.width - COLUMN_WIDTH * self.columns as f64) / (self.columns - 1) as f64
    }
}

/// A parallelogram patch `origin + a*u + b*v`, `a, b` in [0, 1].
#[derive(Clone, Debug)]
struct Patch {
    origin: [f64; 3],
    u: [f64; 3],
    v: [f64; 3],
    color: [f64; 3],
}

impl Patch {
    fn area(&self) -> f64 {
        let (u, v) = (self.u, self.v);
        let c = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
        (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
    }

    fn at(&self, a: f64, b: f64) -> [f64; 3] {
        std::array::from_fn(|i| self.origin[i] + a * self.u[i] + b * self.v[i])
    }
}

/// Facing the street (constant y).
fn front(x0: f64, x1: f64, z0: f64, z1: f64, y: f64, color: [f64; 3]) -> Patch {
    Patch { origin: [x0, y, z0], u: [x1 - x0, 0.0, 0.0], v: [0.0, 0.0, z1 - z0], color }
}

/// Horizontal (constant z).
fn flat(x0: f64, x1: f64, y0: f64, y1: f64, z: f64, color: [f64; 3]) -> Patch {
    Patch { origin: [x0, y0, z], u: [x1 - x0, 0.0, 0.0], v: [0.0, y1 - y0, 0.0], color }
}

/// Side-on (constant x).
fn side(y0: f64, y1: f64, z0: f64, z1: f64, x: f64, color: [f64; 3]) -> Patch {
    Patch { origin: [x, y0, z0], u: [0.0, y1 - y0, 0.0], v: [0.0, 0.0, z1 - z0], color }
}

struct Blob {
    center: [f64; 3],
    radii: [f64; 3],
    color: [f64; 3],
}

struct Scene {
    patches: [Vec<Patch>; 8],
    /// Wall regions hidden by windows and columns, as (x0, x1, z0, z1).
    wall_holes: Vec<[f64; 4]>,
    blobs: Vec<Blob>,
}

fn tint(rng: &mut Prng, base: [f64; 3], spread: f64) -> [f64; 3] {
    base.map(|c| (c + rng.uniform(-spread, spread)).clamp(0.0, 255.0))
}

fn vivid(rng: &mut Prng) -> [f64; 3] {
    let mut c = [rng.uniform(0.0, 90.0), rng.uniform(0.0, 90.0), rng.uniform(0.0, 90.0)];
    c[rng.below(3)] = rng.uniform(200.0, 255.0);
    c
}

fn build_scene(spec: &FacadeSpec, rng: &mut Prng) -> Scene {
    let mut patches: [Vec<Patch>; 8] = Default::default();
    let mut holes = Vec::new();
    let fh = spec.floor_height;
    let top = spec.floors as f64 * fh;
    let w = spec.width;

    let wall = tint(rng, [205.0, 190.0, 165.0], 15.0);
    patches[class::WALL as usize].push(front(0.0, w, 0.0, top, 0.0, wall));

    let eave = tint(rng, [130.0, 100.0, 80.0], 15.0);
    let e = &mut patches[class::EAVE as usize];
    e.push(flat(0.0, w, 0.0, EAVE_DEPTH, top, eave));
    e.push(front(0.0, w, top, top + EAVE_HEIGHT, EAVE_DEPTH, eave));
    e.push(flat(0.0, w, 0.0, EAVE_DEPTH, top + EAVE_HEIGHT, eave));

    let centers = spec.column_centers();
    let column = tint(rng, [215.0, 205.0, 185.0], 15.0);
    for &xc in &centers {
        let (x0, x1) = (xc - COLUMN_WIDTH / 2.0, xc + COLUMN_WIDTH / 2.0);
        let c = &mut patches[class::COLUMN as usize];
        c.push(front(x0, x1, 0.0, top, COLUMN_DEPTH, column));
        c.push(side(0.0, COLUMN_DEPTH, 0.0, top, x0, column));
        c.push(side(0.0, COLUMN_DEPTH, 0.0, top, x1, column));
        holes.push([x0, x1, 0.0, top]);

        let board = vivid(rng);
        let (z0, z1) = (rng.uniform(1.2, 1.6), rng.uniform(2.4, 2.8));
        let (b0, b1, y) = (x0 - 0.1, x1 + 0.1, COLUMN_DEPTH + 0.06);
        let a = &mut patches[class::ADVBOARD as usize];
        a.push(front(b0, b1, z0, z1, y, board));
        a.push(side(COLUMN_DEPTH, y, z0, z1, b0, board));
        a.push(side(COLUMN_DEPTH, y, z0, z1, b1, board));
    }

    let glass = tint(rng, [70.0, 90.0, 110.0], 15.0);
    let slab_color = tint(rng, [170.0, 165.0, 160.0], 10.0);
    let rail = tint(rng, [60.0, 60.0, 65.0], 10.0);
    let per_bay = spec.windows_per_bay;
    let slot = spec.bay_width() / per_bay as f64;
    let ww = (slot - 0.8).min(1.4);
    let mut windows = Vec::new();
    for bay in 0..centers.len() - 1 {
        let start = centers[bay] + COLUMN_WIDTH / 2.0;
        for i in 0..per_bay {
            let cx = start + (i as f64 + 0.5) * slot;
            for f in 0..spec.floors {
                let base = f as f64 * fh;
                let (z0, z1) = if f == 0 { (0.5, 2.5) } else { (base + 0.9, base + fh - 0.5) };
                windows.push((cx - ww / 2.0, cx + ww / 2.0, z0, z1, f));
            }
        }
    }
    let mut balconies: Vec<(f64, f64, f64)> = Vec::new();
    for &(x0, x1, z0, z1, f) in &windows {
        let p = &mut patches[class::WINDOW as usize];
        let y = -WINDOW_RECESS;
        p.push(front(x0, x1, z0, z1, y, glass));
        p.push(flat(x0, x1, y, 0.0, z0, glass));
        p.push(flat(x0, x1, y, 0.0, z1, glass));
        p.push(side(y, 0.0, z0, z1, x0, glass));
        p.push(side(y, 0.0, z0, z1, x1, glass));
        holes.push([x0, x1, z0, z1]);
        if f > 0 && rng.next_f64() < spec.balcony_prob {
            balconies.push((x0 - 0.3, x1 + 0.3, f as f64 * fh));
        }
    }
    if balconies.is_empty() {
        let &(x0, x1, _, _, f) = windows.iter().find(|w| w.4 > 0).expect("at least two floors");
        balconies.push((x0 - 0.3, x1 + 0.3, f as f64 * fh));
    }
    for &(x0, x1, zb) in &balconies {
        let (zt, d) = (zb + SLAB, BALCONY_DEPTH);
        let b = &mut patches[class::BALCONY as usize];
        b.push(flat(x0, x1, 0.0, d, zb, slab_color));
        b.push(flat(x0, x1, 0.0, d, zt, slab_color));
        b.push(front(x0, x1, zb, zt, d, slab_color));
        b.push(side(0.0, d, zb, zt, x0, slab_color));
        b.push(side(0.0, d, zb, zt, x1, slab_color));
        let r = &mut patches[class::BALUSTRADE as usize];
        let yr = d - 0.05;
        r.push(front(x0, x1, zt, zt + RAIL_HEIGHT, yr, rail));
        r.push(side(0.05, yr, zt, zt + RAIL_HEIGHT, x0 + 0.05, rail));
        r.push(side(0.05, yr, zt, zt + RAIL_HEIGHT, x1 - 0.05, rail));
    }

    let blobs = (0..spec.clutter_blobs.max(1))
        .map(|_| {
            let x = rng.uniform(0.3, w - 0.3);
            let on_column = centers.iter().any(|&c| (x - c).abs() < COLUMN_WIDTH / 2.0);
            Blob {
                center: [x, if on_column { COLUMN_DEPTH } else { 0.0 }, rng.uniform(0.3, top - 0.3)],
                radii: [rng.uniform(0.15, 0.5), rng.uniform(0.1, 0.3), rng.uniform(0.15, 0.5)],
                color: [rng.uniform(20.0, 235.0), rng.uniform(20.0, 235.0), rng.uniform(20.0, 235.0)],
            }
        })
        .collect();

    Scene { patches, wall_holes: holes, blobs }
}

/// Largest-remainder apportionment of `n` points over the class fractions.
fn class_counts(fractions: &[f64; 8], n: usize) -> [usize; 8] {
    let total: f64 = fractions.iter().sum();
    let exact: Vec<f64> = fractions.iter().map(|f| f / total * n as f64).collect();
    let mut counts: [usize; 8] = std::array::from_fn(|c| exact[c].floor() as usize);
    let mut order: Vec<usize> = (0..8).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = n - counts.iter().sum::<usize>();
    for &c in order.iter().take(short) {
        counts[c] += 1;
    }
    counts
}

fn pick<'a>(patches: &'a [Patch], cumulative: &[f64], rng: &mut Prng) -> &'a Patch {
    let t = rng.uniform(0.0, *cumulative.last().unwrap());
    &patches[cumulative.partition_point(|&c| c <= t).min(patches.len() - 1)]
}

/// Deterministic labelled facade of exactly `n_points` points.  Without a
/// spec the layout is drawn from the seed.
pub fn generate_synthetic_facade(seed: u64, n_points: usize, spec: Option<&FacadeSpec>) -> Result<PointCloud> {
    if n_points < 256 {
        return Err(Error::invalid(format!("a synthetic facade needs at least 256 points, got {n_points}")));
    }
    let spec = match spec {
        Some(s) => s.clone(),
        None => FacadeSpec::sample(&mut Prng::derive(seed, 0)),
    };
    spec.validate()?;
    let scene = build_scene(&spec, &mut Prng::derive(seed, 1));
    let mut rng = Prng::derive(seed, 2);
    let counts = class_counts(&spec.class_fractions, n_points);

    let mut positions = Vec::with_capacity(n_points);
    let mut colors = Vec::with_capacity(n_points);
    let mut labels = Vec::with_capacity(n_points);
    for (c, &count) in counts.iter().enumerate() {
        let patches = &scene.patches[c];
        let cumulative: Vec<f64> = patches
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p.area();
                Some(*acc)
            })
            .collect();
        for _ in 0..count {
            let (p, base) = if c == class::CLUTTER as usize {
                let b = &scene.blobs[rng.below(scene.blobs.len())];
                let n = [rng.normal(), rng.normal().abs(), rng.normal()];
                (std::array::from_fn(|i| b.center[i] + 0.5 * n[i] * b.radii[i]), b.color)
            } else {
                let patch = pick(patches, &cumulative, &mut rng);
                let mut q = patch.at(rng.next_f64(), rng.next_f64());
                if c == class::WALL as usize {
                    // rejection keeps wall points off windows and column footprints
                    for _ in 0..1000 {
                        let hidden = scene.wall_holes.iter().any(|h| q[0] > h[0] && q[0] < h[1] && q[2] > h[2] && q[2] < h[3]);
                        if !hidden {
                            break;
                        }
                        q = patch.at(rng.next_f64(), rng.next_f64());
                    }
                }
                (q, patch.color)
            };
            positions.push(p.map(|v| v + spec.position_noise * rng.normal()));
            colors.push(base.map(|v| (v + spec.color_noise * rng.normal()).round().clamp(0.0, 255.0) as u8));
            labels.push(c as u8);
        }
    }

    let mut order: Vec<u32> = (0..n_points as u32).collect();
    rng.shuffle(&mut order);
    let cloud = PointCloud::new(positions, Some(colors), Some(labels))?;
    Ok(cloud.select(&order))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apportionment_is_exact() {
        let c = class_counts(&CLASS_TARGETS, 1000);
        assert_eq!(c, [50, 90, 120, 300, 70, 150, 170, 50]);
        let c = class_counts(&CLASS_TARGETS, 257);
        assert_eq!(c.iter().sum::<usize>(), 257);
    }

    #[test]
    fn sampled_specs_are_valid() {
        let mut rng = Prng::new(3);
        for _ in 0..200 {
            FacadeSpec::sample(&mut rng).validate().unwrap();
        }
        FacadeSpec::default().validate().unwrap();
    }
}
