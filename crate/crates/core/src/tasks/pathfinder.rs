//! Pathfinder scenes: dashed random-walk contours with two circular markers.
//!
//! Positive scenes put both markers on the two ends of one contour; negative
//! scenes put them on ends of two different contours. Contours keep a
//! clearance wider than the dash gap from each other, so gap-tolerant dash
//! adjacency never bridges two contours and the construction label is
//! recoverable from geometry alone.

use serde::{Deserialize, Serialize};

use super::pixels::PixelSequence;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathfinderConfig {
    /// Image side, 32 or 128.
    pub size: usize,
    /// Contours besides the one carrying the first marker.
    pub distractors: usize,
    pub dash_len: f64,
    pub gap: f64,
    pub marker_radius: f64,
    pub dashes_per_contour: usize,
    /// Largest heading change between consecutive dashes, in degrees.
    pub max_turn_deg: f64,
    /// Minimum distance between dashes of different contours.
    pub clearance: f64,
    pub intensity: u8,
    pub max_retries: usize,
}

/// Fresh random walks tried per contour before the whole scene restarts.
const WALK_TRIES: usize = 64;

/// Side length at which the base parameters apply.
const BASE_SIZE: usize = 32;

impl PathfinderConfig {
    /// Defaults for `size`; at 128 the path length and marker radius scale by 4.
    pub fn for_size(size: usize) -> Result<Self> {
        if size != 32 && size != 128 {
            return Err(Error::Param(format!("pathfinder size must be 32 or 128, got {size}")));
        }
        let s = (size / BASE_SIZE) as f64;
        Ok(PathfinderConfig {
            size,
            distractors: 2,
            dash_len: 3.0,
            gap: 2.0,
            marker_radius: s,
            dashes_per_contour: 4 * size / BASE_SIZE,
            max_turn_deg: 45.0,
            clearance: 3.0,
            intensity: 255,
            max_retries: 500,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.size != 32 && self.size != 128 {
            return Err(Error::Param(format!("pathfinder size must be 32 or 128, got {}", self.size)));
        }
        if self.distractors < 1 {
            return Err(Error::Param("at least one distractor contour is required".into()));
        }
        if self.dashes_per_contour < 1 || !(self.dash_len > 0.0) || !(self.gap > 0.0) || self.marker_radius < 0.0 {
            return Err(Error::Param("dash count, dash length and gap must be positive".into()));
        }
        if self.clearance <= self.gap {
            return Err(Error::Param("clearance must exceed the dash gap".into()));
        }
        Ok(())
    }
}

pub type Point = (f64, f64);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dash {
    pub a: Point,
    pub b: Point,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Marker {
    pub center: Point,
    /// Index of the contour whose end the marker sits on.
    pub contour: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathfinderScene {
    pub size: usize,
    pub contours: Vec<Vec<Dash>>,
    pub markers: [Marker; 2],
    pub connected: bool,
    pub pixels: PixelSequence,
}

impl PathfinderScene {
    pub fn label(&self) -> u8 {
        u8::from(self.connected)
    }

    /// Breadth-first search over dashes, joining dashes closer than `tol`
    /// and starting from dashes touching the first marker.
    pub fn dash_path_exists(&self, tol: f64) -> bool {
        let dashes: Vec<Dash> = self.contours.iter().flatten().copied().collect();
        let touching = |m: &Marker| -> Vec<usize> {
            (0..dashes.len()).filter(|&i| point_segment(m.center, dashes[i]) <= 0.5).collect()
        };
        let mut seen = vec![false; dashes.len()];
        let mut queue: std::collections::VecDeque<usize> = touching(&self.markers[0]).into();
        for &i in &queue {
            seen[i] = true;
        }
        while let Some(i) = queue.pop_front() {
            for j in 0..dashes.len() {
                if !seen[j] && segment_distance(dashes[i], dashes[j]) <= tol {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        touching(&self.markers[1]).into_iter().any(|j| seen[j])
    }
}

fn dot(u: Point, v: Point) -> f64 {
    u.0 * v.0 + u.1 * v.1
}

fn sub(u: Point, v: Point) -> Point {
    (u.0 - v.0, u.1 - v.1)
}

fn dist(u: Point, v: Point) -> f64 {
    let d = sub(u, v);
    dot(d, d).sqrt()
}

pub fn point_segment(p: Point, s: Dash) -> f64 {
    let ab = sub(s.b, s.a);
    let len2 = dot(ab, ab);
    let t = if len2 == 0.0 { 0.0 } else { (dot(sub(p, s.a), ab) / len2).clamp(0.0, 1.0) };
    dist(p, (s.a.0 + t * ab.0, s.a.1 + t * ab.1))
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    let (u, v) = (sub(a, o), sub(b, o));
    u.0 * v.1 - u.1 * v.0
}

pub fn segment_distance(s: Dash, t: Dash) -> f64 {
    let d1 = cross(s.a, s.b, t.a);
    let d2 = cross(s.a, s.b, t.b);
    let d3 = cross(t.a, t.b, s.a);
    let d4 = cross(t.a, t.b, s.b);
    if d1 * d2 < 0.0 && d3 * d4 < 0.0 {
        return 0.0;
    }
    point_segment(s.a, t).min(point_segment(s.b, t)).min(point_segment(t.a, s)).min(point_segment(t.b, s))
}

struct Builder<'a> {
    cfg: &'a PathfinderConfig,
    lo: f64,
    hi: f64,
}

impl Builder<'_> {
    fn inside(&self, p: Point) -> bool {
        p.0 >= self.lo && p.0 <= self.hi && p.1 >= self.lo && p.1 <= self.hi
    }

    fn clear_of(&self, d: Dash, others: &[Vec<Dash>]) -> bool {
        others.iter().flatten().all(|&o| segment_distance(d, o) > self.cfg.clearance)
    }

    fn walk(&self, rng: &mut Rng, others: &[Vec<Dash>]) -> Option<Vec<Dash>> {
        let cfg = self.cfg;
        let span = self.hi - self.lo;
        let mut p = (self.lo + rng.uniform() * span, self.lo + rng.uniform() * span);
        let mut heading = rng.uniform() * std::f64::consts::TAU;
        let max_turn = cfg.max_turn_deg.to_radians();
        let mut dashes = Vec::with_capacity(cfg.dashes_per_contour);
        for i in 0..cfg.dashes_per_contour {
            let mut placed = false;
            for _ in 0..24 {
                let turn = if i == 0 { 0.0 } else { (rng.uniform() * 2.0 - 1.0) * max_turn };
                let h = heading + turn;
                let dir = (h.cos(), h.sin());
                let d = Dash { a: p, b: (p.0 + cfg.dash_len * dir.0, p.1 + cfg.dash_len * dir.1) };
                let next = (d.b.0 + cfg.gap * dir.0, d.b.1 + cfg.gap * dir.1);
                let last = i + 1 == cfg.dashes_per_contour;
                if self.inside(d.b) && (last || self.inside(next)) && self.clear_of(d, others) {
                    dashes.push(d);
                    heading = h;
                    p = next;
                    placed = true;
                    break;
                }
                if i == 0 {
                    heading = rng.uniform() * std::f64::consts::TAU;
                }
            }
            if !placed {
                return None;
            }
        }
        Some(dashes)
    }

    fn attempt(&self, rng: &mut Rng, connected: bool) -> Option<(Vec<Vec<Dash>>, [Marker; 2])> {
        let cfg = self.cfg;
        let mut contours: Vec<Vec<Dash>> = Vec::with_capacity(1 + cfg.distractors);
        for _ in 0..=cfg.distractors {
            let c = (0..WALK_TRIES).find_map(|_| self.walk(rng, &contours))?;
            contours.push(c);
        }
        let start = |c: &Vec<Dash>| c[0].a;
        let end = |c: &Vec<Dash>| c[c.len() - 1].b;
        let first = Marker { center: start(&contours[0]), contour: 0 };
        let second = if connected {
            Marker { center: end(&contours[0]), contour: 0 }
        } else {
            let pick_start = rng.bernoulli(0.5);
            let c = &contours[1];
            Marker { center: if pick_start { start(c) } else { end(c) }, contour: 1 }
        };
        let min_sep = (2.0 * cfg.marker_radius + 2.0).max(2.0);
        if dist(first.center, second.center) < min_sep {
            return None;
        }
        // markers stay visually clear of contours they do not belong to
        for m in [&first, &second] {
            for (ci, c) in contours.iter().enumerate() {
                if ci != m.contour && c.iter().any(|&d| point_segment(m.center, d) <= cfg.marker_radius + cfg.gap) {
                    return None;
                }
            }
        }
        Some((contours, [first, second]))
    }
}

fn render(cfg: &PathfinderConfig, contours: &[Vec<Dash>], markers: &[Marker; 2]) -> Result<PixelSequence> {
    let n = cfg.size;
    let mut px = vec![0u8; n * n];
    let mut set = |x: f64, y: f64| {
        let (c, r) = (x.round(), y.round());
        if c >= 0.0 && r >= 0.0 && (c as usize) < n && (r as usize) < n {
            px[r as usize * n + c as usize] = cfg.intensity;
        }
    };
    for d in contours.iter().flatten() {
        let steps = (dist(d.a, d.b) * 4.0).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            set(d.a.0 + t * (d.b.0 - d.a.0), d.a.1 + t * (d.b.1 - d.a.1));
        }
    }
    let r = cfg.marker_radius;
    let ri = r.ceil() as i64;
    for m in markers {
        let (cx, cy) = (m.center.0.round() as i64, m.center.1.round() as i64);
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                if ((dx * dx + dy * dy) as f64) <= r * r {
                    set((cx + dx) as f64, (cy + dy) as f64);
                }
            }
        }
    }
    PixelSequence::new(n, n, px)
}

/// One scene with the requested label, retrying placement up to
/// `max_retries` times.
pub fn gen_scene(cfg: &PathfinderConfig, rng: &mut Rng, connected: bool) -> Result<PathfinderScene> {
    cfg.validate()?;
    let margin = cfg.marker_radius + 1.0;
    let b = Builder { cfg, lo: margin, hi: cfg.size as f64 - 1.0 - margin };
    for _ in 0..cfg.max_retries {
        if let Some((contours, markers)) = b.attempt(rng, connected) {
            let pixels = render(cfg, &contours, &markers)?;
            return Ok(PathfinderScene { size: cfg.size, contours, markers, connected, pixels });
        }
    }
    Err(Error::Generation(format!("pathfinder placement failed after {} attempts", cfg.max_retries)))
}

/// `n` scenes; scene `i` depends only on the seed and `i`, and its label is a
/// fair coin flip.
pub fn gen_pathfinder(cfg: &PathfinderConfig, rng: &Rng, n: usize) -> Result<Vec<PathfinderScene>> {
    cfg.validate()?;
    (0..n)
        .map(|i| {
            let mut r = rng.fork(i as u64);
            let connected = r.bernoulli(0.5);
            gen_scene(cfg, &mut r, connected)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathfinderSidecar {
    pub task: String,
    pub seed: u64,
    pub n: usize,
    pub positives: usize,
    pub config: PathfinderConfig,
}

impl PathfinderSidecar {
    pub fn new(cfg: &PathfinderConfig, seed: u64, scenes: &[PathfinderScene]) -> Self {
        PathfinderSidecar {
            task: if cfg.size == 128 { "path_x".into() } else { "pathfinder".into() },
            seed,
            n: scenes.len(),
            positives: scenes.iter().filter(|s| s.connected).count(),
            config: cfg.clone(),
        }
    }
}
