//! Deterministic synthetic tracking sequences with scripted entries, exits
//! and occlusions.
//!
//! Each object is a truncated Gaussian blob whose `C` channel amplitudes are a
//! per-object appearance vector. Objects are drawn back to front and overwrite
//! the pixels inside their box, so an occluder hides whatever it covers. A
//! fully occluded object is not drawn at all but stays in the ground truth
//! with `visible == false`.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::assignment::BBox;
use crate::error::{Error, Result};

/// Class label of every synthetic object (single-class tracking).
pub const OBJECT_LABEL: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Waypoint {
    pub frame: u32,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ObjectScript {
    pub identity: u64,
    /// First frame present.
    pub entry: u32,
    /// First frame absent again (exclusive).
    pub exit: u32,
    pub waypoints: Vec<Waypoint>,
    /// Normalized `(w, h)`.
    pub size: (f64, f64),
    pub appearance_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum OcclusionKind {
    Full,
    Partial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OcclusionScript {
    pub occluder: u64,
    pub occludee: u64,
    pub start: u32,
    pub duration: u32,
    pub kind: OcclusionKind,
}

impl OcclusionScript {
    pub fn covers(&self, frame: u32) -> bool {
        frame >= self.start && frame < self.start + self.duration
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScenarioSpec {
    pub name: String,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub length: u32,
    pub objects: Vec<ObjectScript>,
    pub occlusions: Vec<OcclusionScript>,
    /// Standard deviation of per-frame center noise, normalized units.
    pub jitter_sigma: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Spec(format!("{}: {m}", self.name)));
        if self.grid_h == 0 || self.grid_w == 0 || self.channels == 0 || self.length == 0 {
            return err("grid, channels and length must be positive".into());
        }
        if !(self.jitter_sigma >= 0.0) {
            return err("jitter must be nonnegative".into());
        }
        let mut seen = BTreeSet::new();
        for o in &self.objects {
            if !seen.insert(o.identity) {
                return err(format!("identity {} declared twice", o.identity));
            }
            if o.entry >= o.exit || o.exit > self.length {
                return err(format!(
                    "object {}: need entry < exit <= length, got {}..{} of {}",
                    o.identity, o.entry, o.exit, self.length
                ));
            }
            if o.waypoints.is_empty() {
                return err(format!("object {} has no waypoints", o.identity));
            }
            if !(o.size.0 > 0.0 && o.size.0 <= 1.0 && o.size.1 > 0.0 && o.size.1 <= 1.0) {
                return err(format!("object {} size must lie in (0, 1]", o.identity));
            }
            if o.waypoints.windows(2).any(|w| w[0].frame >= w[1].frame) {
                return err(format!("object {} waypoints must have increasing frames", o.identity));
            }
        }
        for occ in &self.occlusions {
            let find = |id: u64| self.objects.iter().find(|o| o.identity == id);
            let (Some(a), Some(b)) = (find(occ.occluder), find(occ.occludee)) else {
                return err(format!("occlusion references unknown object ({}, {})", occ.occluder, occ.occludee));
            };
            if occ.occluder == occ.occludee || occ.duration == 0 {
                return err("occlusion needs two distinct objects and positive duration".into());
            }
            let end = occ.start + occ.duration;
            for o in [a, b] {
                if occ.start < o.entry || end > o.exit {
                    return err(format!(
                        "occlusion {}..{} leaves lifespan of object {}",
                        occ.start, end, o.identity
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GtObject {
    pub identity: u64,
    pub class: u32,
    pub bbox: BBox,
    pub visible: bool,
}

/// One rendered frame, `H × W × C` stored cell-major
/// (`(row * W + col) * C + channel`).
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFrame {
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    pub name: String,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub frames: Vec<RenderedFrame>,
    pub ground_truth: Vec<Vec<GtObject>>,
}

impl SyntheticSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

fn interpolate(waypoints: &[Waypoint], frame: u32) -> (f64, f64) {
    let first = waypoints[0];
    if frame <= first.frame {
        return (first.cx, first.cy);
    }
    for w in waypoints.windows(2) {
        let (a, b) = (w[0], w[1]);
        if frame <= b.frame {
            let s = (frame - a.frame) as f64 / (b.frame - a.frame) as f64;
            return (a.cx + s * (b.cx - a.cx), a.cy + s * (b.cy - a.cy));
        }
    }
    let last = waypoints[waypoints.len() - 1];
    (last.cx, last.cy)
}

/// Per-object channel amplitudes in `[0.25, 1]`.
pub fn appearance(seed: u64, channels: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..channels).map(|_| rng.random_range(0.25f32..1.0)).collect()
}

/// Draws one object into `frame`, overwriting the pixels whose centers fall
/// inside its box.
pub fn draw_object(frame: &mut [f32], h: usize, w: usize, channels: usize, bbox: BBox, look: &[f32]) {
    let sx = bbox.w / 4.0;
    let sy = bbox.h / 4.0;
    let [x0, y0, x1, y1] = bbox.corners();
    for r in 0..h {
        let py = (r as f64 + 0.5) / h as f64;
        if py < y0 || py > y1 {
            continue;
        }
        for c in 0..w {
            let px = (c as f64 + 0.5) / w as f64;
            if px < x0 || px > x1 {
                continue;
            }
            let dx = (px - bbox.cx) / sx;
            let dy = (py - bbox.cy) / sy;
            let g = libm::exp(-0.5 * (dx * dx + dy * dy)) as f32;
            let cell = &mut frame[(r * w + c) * channels..(r * w + c + 1) * channels];
            for (v, a) in cell.iter_mut().zip(look) {
                *v = a * g;
            }
        }
    }
}

struct Placed {
    index: usize,
    gt: GtObject,
    depth: f64,
}

/// Renders a scenario.
pub fn generate(spec: &ScenarioSpec) -> Result<SyntheticSequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.jitter_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Spec(format!("jitter: {e:?}")))?;
    let looks: Vec<Vec<f32>> = spec
        .objects
        .iter()
        .map(|o| appearance(o.appearance_seed, spec.channels))
        .collect();
    let (h, w, ch) = (spec.grid_h, spec.grid_w, spec.channels);

    let mut frames = Vec::with_capacity(spec.length as usize);
    let mut ground_truth = Vec::with_capacity(spec.length as usize);
    for f in 0..spec.length {
        let mut placed: Vec<Placed> = Vec::new();
        for (index, o) in spec.objects.iter().enumerate() {
            if f < o.entry || f >= o.exit {
                continue;
            }
            let (mut cx, mut cy) = interpolate(&o.waypoints, f);
            if spec.jitter_sigma > 0.0 {
                cx += noise.sample(&mut rng);
                cy += noise.sample(&mut rng);
            }
            let (bw, bh) = o.size;
            cx = cx.clamp(bw / 2.0, 1.0 - bw / 2.0);
            cy = cy.clamp(bh / 2.0, 1.0 - bh / 2.0);
            let visible = !spec
                .occlusions
                .iter()
                .any(|occ| occ.kind == OcclusionKind::Full && occ.occludee == o.identity && occ.covers(f));
            placed.push(Placed {
                index,
                gt: GtObject {
                    identity: o.identity,
                    class: OBJECT_LABEL,
                    bbox: BBox::new(cx, cy, bw, bh),
                    visible,
                },
                depth: index as f64,
            });
        }
        for occ in spec.occlusions.iter().filter(|o| o.kind == OcclusionKind::Partial && o.covers(f)) {
            let below = placed.iter().find(|p| p.gt.identity == occ.occludee).map(|p| p.depth);
            if let (Some(d), Some(top)) = (below, placed.iter_mut().find(|p| p.gt.identity == occ.occluder)) {
                top.depth = top.depth.max(d + 0.5);
            }
        }
        let mut order: Vec<&Placed> = placed.iter().collect();
        order.sort_by(|a, b| a.depth.total_cmp(&b.depth));

        let mut data = vec![0f32; h * w * ch];
        for p in order.iter().filter(|p| p.gt.visible) {
            draw_object(&mut data, h, w, ch, p.gt.bbox, &looks[p.index]);
        }
        frames.push(RenderedFrame { data });
        ground_truth.push(placed.iter().map(|p| p.gt).collect());
    }
    Ok(SyntheticSequence {
        name: spec.name.clone(),
        grid_h: h,
        grid_w: w,
        channels: ch,
        frames,
        ground_truth,
    })
}

/// A named group of scenarios.
#[derive(Clone, Debug, PartialEq)]
pub struct Suite {
    pub name: String,
    pub scenarios: Vec<ScenarioSpec>,
}

impl Suite {
    pub fn generate(&self) -> Result<Vec<SyntheticSequence>> {
        self.scenarios.iter().map(generate).collect()
    }
}

pub const GRID: usize = 16;
pub const CHANNELS: usize = 8;

struct Builder {
    rng: ChaCha8Rng,
    name: String,
    length: u32,
    objects: Vec<ObjectScript>,
    occlusions: Vec<OcclusionScript>,
    next_id: u64,
}

impl Builder {
    fn new(name: String, length: u32, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            name,
            length,
            objects: Vec::new(),
            occlusions: Vec::new(),
            next_id: 1,
        }
    }

    fn point(&mut self) -> (f64, f64) {
        (self.rng.random_range(0.2..0.8), self.rng.random_range(0.2..0.8))
    }

    fn size(&mut self, lo: f64, hi: f64) -> (f64, f64) {
        (self.rng.random_range(lo..hi), self.rng.random_range(lo..hi))
    }

    /// An object drifting between two random points over its lifespan.
    fn drifting(&mut self, entry: u32, exit: u32, size: (f64, f64), max_speed: f64) -> u64 {
        let (ax, ay) = self.point();
        let span = (exit - entry - 1).max(1) as f64;
        let reach = max_speed * span;
        let bx = (ax + self.rng.random_range(-reach..=reach)).clamp(0.2, 0.8);
        let by = (ay + self.rng.random_range(-reach..=reach)).clamp(0.2, 0.8);
        self.push(entry, exit, vec![(entry, ax, ay), (exit - 1, bx, by)], size)
    }

    fn push(&mut self, entry: u32, exit: u32, path: Vec<(u32, f64, f64)>, size: (f64, f64)) -> u64 {
        let identity = self.next_id;
        self.next_id += 1;
        let appearance_seed = self.rng.random();
        let mut waypoints: Vec<Waypoint> = path
            .into_iter()
            .map(|(frame, cx, cy)| Waypoint { frame, cx, cy })
            .collect();
        waypoints.dedup_by_key(|w| w.frame);
        self.objects.push(ObjectScript {
            identity,
            entry,
            exit,
            waypoints,
            size,
            appearance_seed,
        });
        identity
    }

    /// An occluder crossing path: `occludee` passes behind a slow occluder and
    /// is hidden for `duration` frames starting at `start`.
    fn occlusion_pair(&mut self, entry: u32, exit: u32, start: u32, duration: u32) {
        let (px, py) = self.point();
        let occluder_size = (0.3, 0.3);
        let occluder = self.push(entry, exit, vec![(entry, px, py), (exit - 1, px + 0.05, py)], occluder_size);
        let mid = start + duration / 2;
        let frac = (mid - entry) as f64 / (exit - 1 - entry) as f64;
        let (ox, oy) = (px + 0.05 * frac, py);
        let dir = if self.rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let speed = 0.02;
        let path = vec![
            (entry, (ox - dir * speed * (mid - entry) as f64).clamp(0.1, 0.9), oy - 0.05),
            (mid, ox, oy),
            (exit - 1, (ox + dir * speed * (exit - 1 - mid) as f64).clamp(0.1, 0.9), oy + 0.05),
        ];
        let size = self.size(0.2, 0.26);
        let occludee = self.push(entry, exit, path, size);
        self.occlusions.push(OcclusionScript {
            occluder,
            occludee,
            start,
            duration,
            kind: OcclusionKind::Full,
        });
    }

    fn finish(self, seed: u64) -> ScenarioSpec {
        ScenarioSpec {
            name: self.name,
            grid_h: GRID,
            grid_w: GRID,
            channels: CHANNELS,
            length: self.length,
            objects: self.objects,
            occlusions: self.occlusions,
            jitter_sigma: 0.0,
            seed,
        }
    }
}

fn overfit_tiny() -> Suite {
    let mut scenarios = Vec::new();
    for k in 0..5u64 {
        let seed = 1000 + k;
        let length = 24;
        let mut b = Builder::new(format!("overfit-tiny-{k:02}"), length, seed);
        match k {
            0 => {
                let s = b.size(0.22, 0.3);
                b.drifting(0, length, s, 0.0);
            }
            1 => {
                for _ in 0..2 {
                    let s = b.size(0.22, 0.3);
                    b.drifting(0, length, s, 0.012);
                }
            }
            2 => {
                let s = b.size(0.22, 0.3);
                b.drifting(0, length, s, 0.012);
                let s = b.size(0.22, 0.3);
                b.drifting(0, 16, s, 0.012);
                let s = b.size(0.22, 0.3);
                b.drifting(8, length, s, 0.012);
            }
            3 => {
                for _ in 0..3 {
                    let s = b.size(0.2, 0.26);
                    b.drifting(0, length, s, 0.01);
                }
                let s = b.size(0.2, 0.26);
                b.drifting(6, 18, s, 0.01);
            }
            _ => {
                let s = b.size(0.22, 0.3);
                b.drifting(0, length, s, 0.015);
                let s = b.size(0.22, 0.3);
                b.drifting(4, length, s, 0.015);
            }
        }
        scenarios.push(b.finish(seed));
    }
    Suite {
        name: "overfit-tiny".into(),
        scenarios,
    }
}

fn occlusion_suite() -> Suite {
    let mut scenarios = Vec::new();
    for k in 0..8u64 {
        let seed = 2000 + k;
        let length = 32;
        let mut b = Builder::new(format!("occlusion-suite-{k:02}"), length, seed);
        // one occluder/occludee pair hidden twice plus a free-moving object
        let d1 = 3 + (k % 6) as u32;
        let start1 = 8;
        b.occlusion_pair(0, length, start1, d1);
        let occluder = b.objects[0].identity;
        let occludee = b.objects[1].identity;
        let d2 = 3 + ((k + 3) % 6) as u32;
        let start2 = (start1 + d1 + 6).min(length - d2 - 2);
        b.occlusions.push(OcclusionScript {
            occluder,
            occludee,
            start: start2,
            duration: d2,
            kind: OcclusionKind::Full,
        });
        let s = b.size(0.2, 0.26);
        let free = b.drifting(0, length, s, 0.01);
        let d3 = 3 + ((k + 1) % 4) as u32;
        b.occlusions.push(OcclusionScript {
            occluder,
            occludee: free,
            start: 20,
            duration: d3,
            kind: OcclusionKind::Full,
        });
        scenarios.push(b.finish(seed));
    }
    Suite {
        name: "occlusion-suite".into(),
        scenarios,
    }
}

fn lifecycle_suite() -> Suite {
    let mut scenarios = Vec::new();
    for k in 0..6u64 {
        let seed = 3000 + k;
        let length = 40;
        let mut b = Builder::new(format!("lifecycle-suite-{k:02}"), length, seed);
        // staggered short lives, at most four at a time
        let mut t = 0;
        let mut lane = 0;
        while t < length - 6 {
            let life = b.rng.random_range(8..20u32);
            let exit = (t + life).min(length);
            let s = b.size(0.2, 0.28);
            b.drifting(t, exit, s, 0.012);
            lane += 1;
            t += if lane % 2 == 0 { 6 } else { 3 };
        }
        scenarios.push(b.finish(seed));
    }
    Suite {
        name: "lifecycle-suite".into(),
        scenarios,
    }
}

fn crowd_suite() -> Suite {
    let mut scenarios = Vec::new();
    for k in 0..4u64 {
        let seed = 4000 + k;
        let length = 24;
        let mut b = Builder::new(format!("crowd-suite-{k:02}"), length, seed);
        let count = 6 + 2 * k as usize;
        for _ in 0..count {
            let s = b.size(0.14, 0.2);
            b.drifting(0, length, s, 0.01);
        }
        let mut spec = b.finish(seed);
        spec.jitter_sigma = 0.003;
        scenarios.push(spec);
    }
    Suite {
        name: "crowd-suite".into(),
        scenarios,
    }
}

/// The fixed evaluation collections: `overfit-tiny`, `occlusion-suite`,
/// `lifecycle-suite` and `crowd-suite`.
pub fn standard_suites() -> Vec<Suite> {
    vec![overfit_tiny(), occlusion_suite(), lifecycle_suite(), crowd_suite()]
}

pub fn suite(name: &str) -> Option<Suite> {
    standard_suites().into_iter().find(|s| s.name == name)
}

/// Two objects; the second passes behind the first and is fully hidden for
/// frames 10, 11 and 12.
pub fn three_frame_occlusion_fixture() -> ScenarioSpec {
    let mut b = Builder::new("three-frame-occlusion".into(), 24, 77);
    b.occlusion_pair(0, 24, 10, 3);
    b.finish(77)
}
