//! Synthetic videos of textured shapes moving over textured backgrounds.
//!
//! Everything lives in world coordinates and is viewed through a camera that can pan and shake.
//! Positions are rounded to whole pixels when rendering, so masks stay crisp and object pixels
//! keep their exact colors from frame to frame; the true fractional object positions are kept
//! in [`Rendered::tracks`].

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::video::{SegmentationMask, VideoSequence};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Background {
    Flat([f32; 3]),
    /// Blocky value noise around `base`, fixed to the world so it pans with the camera.
    Noise { base: [f32; 3], amplitude: f32 },
    /// Linear ramp across the canvas (in world coordinates).
    Gradient { from: [f32; 3], to: [f32; 3] },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Rect { height: f64, width: f64 },
    Disk { diameter: f64 },
}

impl Shape {
    fn size(self) -> (f64, f64) {
        match self {
            Shape::Rect { height, width } => (height, width),
            Shape::Disk { diameter } => (diameter, diameter),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: [f32; 3],
    /// Relative strength of the object's surface texture; 0 gives a flat color.
    pub texture: f32,
    /// Top-left corner of the bounding box at frame 0, `(y, x)`, world pixels.
    pub position: (f64, f64),
    /// `(dy, dx)` per frame.
    pub velocity: (f64, f64),
    /// Size multiplier per frame is `1 + scale_rate`, about the box center.
    pub scale_rate: f64,
    /// Higher draws on top.
    pub z: i32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub background: Background,
    pub objects: Vec<ObjectSpec>,
    /// Camera motion per frame, `(dy, dx)`; the scene moves the opposite way on screen.
    pub pan: (f64, f64),
    /// Maximum camera shake in whole pixels, drawn independently per frame after the first.
    pub jitter: usize,
    /// Standard deviation of i.i.d. pixel noise; 0 keeps colors exactly constant.
    pub noise: f32,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Config(format!("scene needs at least 2 frames, got {}", self.frames)));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("empty canvas".into()));
        }
        if self.objects.len() > 255 {
            return Err(Error::Config("at most 255 objects".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            let (y, x) = o.position;
            if !(0.0..self.height as f64).contains(&y) || !(0.0..self.width as f64).contains(&x) {
                return Err(Error::Config(format!("object {} starts outside the canvas at ({y}, {x})", i + 1)));
            }
            let (h, w) = o.shape.size();
            if !(h > 0.0 && w > 0.0) || !(o.scale_rate > -1.0) {
                return Err(Error::Config(format!("object {} has a degenerate size or scale", i + 1)));
            }
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// A generated video with the extra bookkeeping the generator knows.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub video: VideoSequence,
    /// True (unrounded) top-left screen position of every object in every frame.
    pub tracks: Vec<Vec<(f64, f64)>>,
    /// Objects whose mask is empty in at least one frame.
    pub left_canvas: Vec<usize>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic value in `[-1, 1]` for an integer lattice cell.
fn lattice(seed: u64, a: i64, b: i64) -> f32 {
    let h = splitmix(seed ^ splitmix(a as u64 ^ splitmix(b as u64)));
    (h >> 40) as f32 / (1u64 << 23) as f32 - 1.0
}

const CELL: f64 = 2.0;

struct Placement {
    top: f64,
    left: f64,
    h: f64,
    w: f64,
    scale: f64,
    ri: (i64, i64),
}

fn place(o: &ObjectSpec, t: usize, cam: (i64, i64)) -> Placement {
    let scale = (1.0 + o.scale_rate).powi(t as i32);
    let (h0, w0) = o.shape.size();
    let (h, w) = ((h0 * scale).max(1.0), (w0 * scale).max(1.0));
    let cy = o.position.0 + h0 / 2.0 + o.velocity.0 * t as f64;
    let cx = o.position.1 + w0 / 2.0 + o.velocity.1 * t as f64;
    let (top, left) = (cy - h / 2.0 - cam.0 as f64, cx - w / 2.0 - cam.1 as f64);
    Placement {
        top,
        left,
        h,
        w,
        scale,
        ri: (top.round() as i64, left.round() as i64),
    }
}

impl Placement {
    /// Object-local coordinates (pre-scale pixels) of screen pixel `(y, x)` if covered.
    fn local(&self, o: &ObjectSpec, y: usize, x: usize) -> Option<(f64, f64)> {
        let (u, v) = ((y as i64 - self.ri.0) as f64, (x as i64 - self.ri.1) as f64);
        if u < 0.0 || v < 0.0 || u >= self.h.round() || v >= self.w.round() {
            return None;
        }
        let inside = match o.shape {
            Shape::Rect { .. } => true,
            Shape::Disk { .. } => {
                let r = self.h.round() / 2.0;
                let (dy, dx) = (u + 0.5 - r, v + 0.5 - r);
                dy * dy + dx * dx <= r * r
            }
        };
        inside.then_some((u / self.scale, v / self.scale))
    }
}

fn background_color(bg: &Background, seed: u64, y: i64, x: i64, h: usize, w: usize) -> [f32; 3] {
    match *bg {
        Background::Flat(c) => c,
        Background::Noise { base, amplitude } => {
            let (cy, cx) = ((y as f64 / CELL).floor() as i64, (x as f64 / CELL).floor() as i64);
            let mut c = base;
            for (k, ch) in c.iter_mut().enumerate() {
                *ch += amplitude * lattice(seed.wrapping_add(k as u64), cy, cx);
            }
            c
        }
        Background::Gradient { from, to } => {
            let t = ((y as f32 / h as f32 + x as f32 / w as f32) / 2.0).clamp(0.0, 1.0);
            [0, 1, 2].map(|k| from[k] + (to[k] - from[k]) * t)
        }
    }
}

/// Renders a scene. Deterministic in `spec`.
pub fn gen_sequence(spec: &SceneSpec, name: impl Into<String>) -> Result<Rendered> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bg_seed = splitmix(spec.seed ^ 0xB6);
    let cams: Vec<(i64, i64)> = (0..spec.frames)
        .map(|t| {
            let j = spec.jitter as i64;
            let (jy, jx) = if t == 0 || j == 0 {
                (0, 0)
            } else {
                (rng.random_range(-j..=j), rng.random_range(-j..=j))
            };
            ((spec.pan.0 * t as f64).round() as i64 + jy, (spec.pan.1 * t as f64).round() as i64 + jx)
        })
        .collect();
    let noise = (spec.noise > 0.0).then(|| Normal::new(0.0f32, spec.noise).expect("validated"));

    let mut order: Vec<usize> = (0..spec.objects.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(spec.objects[i].z));

    let mut frames = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    let mut flows = Vec::with_capacity(spec.frames);
    let mut tracks = vec![Vec::with_capacity(spec.frames); spec.objects.len()];
    let mut left_canvas = Vec::new();
    for t in 0..spec.frames {
        let cam = cams[t];
        let places: Vec<Placement> = spec.objects.iter().map(|o| place(o, t, cam)).collect();
        let prev: Option<Vec<Placement>> = (t > 0).then(|| spec.objects.iter().map(|o| place(o, t - 1, cams[t - 1])).collect());
        for (k, p) in places.iter().enumerate() {
            tracks[k].push((p.top, p.left));
        }
        let mut frame = Tensor::zeros([3, h, w]);
        let mut mask = SegmentationMask::filled(h, w, 0);
        let mut flow = Tensor::zeros([2, h, w]);
        for y in 0..h {
            for x in 0..w {
                let hit = order.iter().find_map(|&k| places[k].local(&spec.objects[k], y, x).map(|l| (k, l)));
                let (color, d) = match hit {
                    Some((k, (u, v))) => {
                        let o = &spec.objects[k];
                        let tex_seed = splitmix(spec.seed ^ (k as u64 + 1).wrapping_mul(0x51));
                        let (cu, cv) = ((u / CELL).floor() as i64, (v / CELL).floor() as i64);
                        let m = 1.0 + o.texture * lattice(tex_seed, cu, cv);
                        mask.set(y, x, (k + 1) as u8);
                        let d = prev.as_ref().map(|pp| {
                            let q = &pp[k];
                            let (sy, sx) = (q.ri.0 as f64 + u * q.scale, q.ri.1 as f64 + v * q.scale);
                            (y as f64 - sy, x as f64 - sx)
                        });
                        (o.color.map(|c| c * m), d)
                    }
                    None => {
                        let c = background_color(&spec.background, bg_seed, y as i64 + cam.0, x as i64 + cam.1, h, w);
                        let d = (t > 0).then(|| ((cams[t - 1].0 - cam.0) as f64, (cams[t - 1].1 - cam.1) as f64));
                        (c, d)
                    }
                };
                let (dy, dx) = d.unwrap_or((0.0, 0.0));
                flow.data_mut()[y * w + x] = dy as f32;
                flow.data_mut()[h * w + y * w + x] = dx as f32;
                for (ch, &c) in color.iter().enumerate() {
                    let n = noise.as_ref().map_or(0.0, |n| n.sample(&mut rng));
                    frame.data_mut()[ch * h * w + y * w + x] = (c + n).clamp(0.0, 1.0);
                }
            }
        }
        for k in 0..spec.objects.len() {
            if mask.count((k + 1) as u8) == 0 && !left_canvas.contains(&k) {
                left_canvas.push(k);
            }
        }
        frames.push(frame);
        masks.push(mask);
        flows.push(flow);
    }
    let mut video = VideoSequence::new(name, frames)?;
    video.masks = Some(masks);
    video.flows = Some(flows);
    Ok(Rendered {
        video,
        tracks,
        left_canvas,
    })
}

/// Motion presets for random corpora.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Motion {
    Static,
    /// Object speeds up to 1 px/frame (magnitude, as for the other presets).
    Slow,
    /// Object speeds up to 2 px/frame.
    Moderate,
    /// Object speeds up to 4 px/frame.
    Fast,
    /// Static objects, camera panning up to 2 px/frame.
    Pan,
    /// Moderate object motion plus 1 px camera shake.
    Shake,
}

impl Motion {
    pub fn max_speed(self) -> f64 {
        match self {
            Motion::Static | Motion::Pan => 0.0,
            Motion::Slow => 1.0,
            Motion::Moderate | Motion::Shake => 2.0,
            Motion::Fast => 4.0,
        }
    }
}

impl FromStr for Motion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "static" => Motion::Static,
            "slow" => Motion::Slow,
            "moderate" => Motion::Moderate,
            "fast" => Motion::Fast,
            "pan" => Motion::Pan,
            "shake" => Motion::Shake,
            _ => return Err(Error::Config(format!("unknown motion `{s}` (static|slow|moderate|fast|pan|shake)"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub motion: Motion,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object box side range in pixels.
    pub min_size: f64,
    pub max_size: f64,
    /// Choose start positions so objects stay fully inside the canvas for the whole clip.
    pub keep_inside: bool,
    pub noise: f32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            frames: 20,
            motion: Motion::Moderate,
            min_objects: 1,
            max_objects: 2,
            min_size: 14.0,
            max_size: 22.0,
            keep_inside: true,
            noise: 0.0,
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [0, 1, 2].map(|_| rng.random_range(0.1..0.9))
}

/// Uniform over the disk of radius `r`, so speed bounds hold for the magnitude.
fn disk_sample(rng: &mut ChaCha8Rng, r: f64) -> (f64, f64) {
    if r <= 0.0 {
        return (0.0, 0.0);
    }
    loop {
        let v = (rng.random_range(-r..=r), rng.random_range(-r..=r));
        if v.0 * v.0 + v.1 * v.1 <= r * r {
            return v;
        }
    }
}

/// Scene drawn from `cfg` with the given seed.
pub fn random_scene(cfg: &CorpusConfig, seed: u64) -> Result<SceneSpec> {
    if cfg.min_objects > cfg.max_objects || !(cfg.min_size > 0.0 && cfg.min_size <= cfg.max_size) {
        return Err(Error::Config("corpus object ranges are inverted or empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = match rng.random_range(0..3) {
        0 => Background::Flat(random_color(&mut rng)),
        1 => Background::Noise {
            base: random_color(&mut rng),
            amplitude: 0.15,
        },
        _ => Background::Gradient {
            from: random_color(&mut rng),
            to: random_color(&mut rng),
        },
    };
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let speed = cfg.motion.max_speed();
    let span = (cfg.frames - 1) as f64;
    let mut objects = Vec::with_capacity(n);
    for i in 0..n {
        let size = rng.random_range(cfg.min_size..=cfg.max_size);
        let shape = if rng.random_bool(0.5) {
            Shape::Rect {
                height: size.round(),
                width: (size * rng.random_range(0.7..1.3)).round(),
            }
        } else {
            Shape::Disk { diameter: size.round() }
        };
        let velocity = disk_sample(&mut rng, speed);
        let (oh, ow) = shape.size();
        let axis = |rng: &mut ChaCha8Rng, extent: usize, size: f64, v: f64| -> f64 {
            let extent = extent as f64;
            let (lo, hi) = if cfg.keep_inside {
                let travel = v * span;
                ((-travel).max(0.0), (extent - size - travel.max(0.0)).max(0.0))
            } else {
                (0.0, extent - 1.0)
            };
            if hi > lo { rng.random_range(lo..hi).floor() } else { lo.floor() }
        };
        let position = (axis(&mut rng, cfg.height, oh, velocity.0), axis(&mut rng, cfg.width, ow, velocity.1));
        objects.push(ObjectSpec {
            shape,
            color: random_color(&mut rng),
            texture: 0.25,
            position,
            velocity,
            scale_rate: 0.0,
            z: i as i32,
        });
    }
    let pan = if cfg.motion == Motion::Pan {
        disk_sample(&mut rng, 2.0)
    } else {
        (0.0, 0.0)
    };
    Ok(SceneSpec {
        height: cfg.height,
        width: cfg.width,
        frames: cfg.frames,
        background,
        objects,
        pan,
        jitter: usize::from(cfg.motion == Motion::Shake),
        noise: cfg.noise,
        seed: splitmix(seed),
    })
}

/// `count` random sequences named `seq00000`, `seq00001`, ...; sequence `i` uses seed `seed + i`.
pub fn gen_corpus(cfg: &CorpusConfig, count: usize, seed: u64) -> Result<Vec<VideoSequence>> {
    (0..count)
        .map(|i| {
            let spec = random_scene(cfg, seed.wrapping_add(i as u64))?;
            Ok(gen_sequence(&spec, format!("seq{i:05}"))?.video)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(y: f64, x: f64, v: (f64, f64)) -> ObjectSpec {
        ObjectSpec {
            shape: Shape::Rect { height: 4.0, width: 4.0 },
            color: [0.9, 0.1, 0.1],
            texture: 0.0,
            position: (y, x),
            velocity: v,
            scale_rate: 0.0,
            z: 0,
        }
    }

    fn scene(objects: Vec<ObjectSpec>, frames: usize) -> SceneSpec {
        SceneSpec {
            height: 16,
            width: 16,
            frames,
            background: Background::Flat([0.2, 0.2, 0.2]),
            objects,
            pan: (0.0, 0.0),
            jitter: 0,
            noise: 0.0,
            seed: 1,
        }
    }

    fn columns(m: &SegmentationMask, class: u8) -> Vec<usize> {
        let mut c: Vec<usize> = (0..m.width()).filter(|&x| (0..m.height()).any(|y| m.get(y, x) == class)).collect();
        c.dedup();
        c
    }

    #[test]
    fn translating_square_rasterizes_by_hand() {
        let r = gen_sequence(&scene(vec![square(4.0, 4.0, (0.0, 1.0))], 3), "s").unwrap();
        let masks = r.video.masks.unwrap();
        assert_eq!(columns(&masks[0], 1), vec![4, 5, 6, 7]);
        assert_eq!(columns(&masks[1], 1), vec![5, 6, 7, 8]);
        assert_eq!(columns(&masks[2], 1), vec![6, 7, 8, 9]);
        assert!(masks.iter().all(|m| m.count(1) == 16));
    }

    #[test]
    fn static_square_gives_identical_frames() {
        let r = gen_sequence(&scene(vec![square(4.0, 4.0, (0.0, 0.0))], 4), "s").unwrap();
        let v = r.video;
        assert!(v.frames.windows(2).all(|f| f[0] == f[1]));
        assert!(v.masks.unwrap().windows(2).all(|m| m[0] == m[1]));
    }

    #[test]
    fn higher_z_wins_overlaps() {
        let mut top = square(5.0, 5.0, (0.0, 0.0));
        top.z = 3;
        let r = gen_sequence(&scene(vec![top, square(4.0, 4.0, (0.0, 0.0))], 2), "s").unwrap();
        let m = &r.video.masks.unwrap()[0];
        assert_eq!(m.get(5, 5), 1);
        assert_eq!(m.get(4, 4), 2);
        assert_eq!(m.count(1), 16);
    }

    #[test]
    fn leaving_the_canvas_is_recorded() {
        let r = gen_sequence(&scene(vec![square(4.0, 12.0, (0.0, 4.0))], 3), "s").unwrap();
        assert_eq!(r.left_canvas, vec![0]);
        assert_eq!(r.video.masks.unwrap()[2].count(1), 0);
    }

    #[test]
    fn invalid_scenes() {
        assert!(gen_sequence(&scene(vec![], 1), "s").is_err());
        assert!(gen_sequence(&scene(vec![square(-1.0, 0.0, (0.0, 0.0))], 2), "s").is_err());
    }

    #[test]
    fn pan_moves_everything_the_other_way() {
        let mut s = scene(vec![square(4.0, 4.0, (0.0, 0.0))], 2);
        s.pan = (0.0, 2.0);
        s.background = Background::Noise { base: [0.5; 3], amplitude: 0.2 };
        let v = gen_sequence(&s, "p").unwrap().video;
        let (f0, f1) = (&v.frames[0], &v.frames[1]);
        for y in 0..16 {
            for x in 0..14 {
                assert_eq!(f1.data()[y * 16 + x], f0.data()[y * 16 + x + 2]);
            }
        }
        let flow = &v.flows.unwrap()[1];
        assert!(flow.data()[256..].iter().all(|&d| d == -2.0));
        assert!(flow.data()[..256].iter().all(|&d| d == 0.0));
    }

    #[test]
    fn random_corpora_are_deterministic_and_stay_inside() {
        let cfg = CorpusConfig::default();
        assert_eq!(gen_corpus(&cfg, 3, 11).unwrap(), gen_corpus(&cfg, 3, 11).unwrap());
        for seed in 0..20 {
            let spec = random_scene(&cfg, seed).unwrap();
            for o in &spec.objects {
                assert!(o.velocity.0.hypot(o.velocity.1) <= cfg.motion.max_speed());
            }
            let r = gen_sequence(&spec, "r").unwrap();
            for (o, track) in spec.objects.iter().zip(&r.tracks) {
                let (h, w) = o.shape.size();
                for &(y, x) in track {
                    assert!(y > -0.5 && x > -0.5 && y + h < 64.5 && x + w < 64.5, "seed {seed}: ({y}, {x})");
                }
            }
        }
    }
}
