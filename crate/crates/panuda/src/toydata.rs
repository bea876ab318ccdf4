//! Procedural source/target panoptic benchmark with a controlled,
//! appearance-only domain shift, plus on-disk storage and class statistics.
//!
//! Geometry (and therefore the panoptic label) depends only on the scene
//! seed; the domain tag changes appearance alone, so a source render and a
//! target render of the same seed are pixel-aligned in label space.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::core::{
    validate_panoptic, ClassEntry, ClassKind, ClassTable, CoreError, Dataset, Domain,
    PanopticLabel, Sample, VOID_CLASS,
};

pub const FORMAT_VERSION: u32 = 1;

/// Default toy class table: 5 stuff + 3 thing classes. Thing spawn rates are
/// deliberately imbalanced (triangle is rare) so rare-class sampling has a
/// measurable effect.
pub fn toy_class_table() -> ClassTable {
    ClassTable::new(vec![
        ClassEntry { id: 0, name: "sky".into(), kind: ClassKind::Stuff, color: [70, 130, 180] },
        ClassEntry { id: 1, name: "ground".into(), kind: ClassKind::Stuff, color: [152, 121, 80] },
        ClassEntry { id: 2, name: "wall".into(), kind: ClassKind::Stuff, color: [102, 102, 156] },
        ClassEntry { id: 3, name: "road".into(), kind: ClassKind::Stuff, color: [128, 64, 128] },
        ClassEntry { id: 4, name: "vegetation".into(), kind: ClassKind::Stuff, color: [107, 142, 35] },
        ClassEntry { id: 5, name: "disk".into(), kind: ClassKind::Thing, color: [220, 20, 60] },
        ClassEntry { id: 6, name: "box".into(), kind: ClassKind::Thing, color: [255, 200, 0] },
        ClassEntry { id: 7, name: "triangle".into(), kind: ClassKind::Thing, color: [0, 220, 220] },
    ])
    .unwrap()
}

pub const CLASS_SKY: u8 = 0;
pub const CLASS_GROUND: u8 = 1;
pub const CLASS_WALL: u8 = 2;
pub const CLASS_ROAD: u8 = 3;
pub const CLASS_VEGETATION: u8 = 4;
pub const CLASS_DISK: u8 = 5;
pub const CLASS_BOX: u8 = 6;
pub const CLASS_TRIANGLE: u8 = 7;

/// Appearance transform applied only to target-domain renders.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DomainShift {
    /// hue rotation angle in degrees
    pub hue_deg: f64,
    /// additive Gaussian noise sigma (in [0,1] intensity units)
    pub noise_sigma: f64,
    /// multiplicative brightness factor
    pub brightness: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        DomainShift {
            hue_deg: 60.0,
            noise_sigma: 0.04,
            brightness: 0.80,
        }
    }
}

/// Per-thing-class spawn configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ThingSpawn {
    pub class_id: u8,
    /// probability that any instances of this class spawn at all
    pub presence_prob: f64,
    /// inclusive count range, conditional on presence
    pub count: (usize, usize),
    /// half-size range in pixels
    pub radius: (usize, usize),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub domain: Domain,
    pub shift: DomainShift,
    /// horizon height as a fraction of image height
    pub horizon_frac: (f64, f64),
    /// per-class appearance noise amplitude
    pub noise_amplitude: f64,
    pub things: Vec<ThingSpawn>,
    /// probability of a void strip at the bottom of the image
    pub void_strip_prob: f64,
}

impl SceneSpec {
    pub fn toy(seed: u64, domain: Domain, size: usize) -> Self {
        SceneSpec {
            seed,
            height: size,
            width: size,
            domain,
            shift: DomainShift::default(),
            horizon_frac: (0.22, 0.42),
            noise_amplitude: 0.035,
            things: vec![
                ThingSpawn { class_id: CLASS_DISK, presence_prob: 0.9, count: (1, 3), radius: (7, 14) },
                ThingSpawn { class_id: CLASS_BOX, presence_prob: 0.7, count: (1, 2), radius: (6, 12) },
                ThingSpawn { class_id: CLASS_TRIANGLE, presence_prob: 0.18, count: (1, 1), radius: (7, 13) },
            ],
            void_strip_prob: 0.25,
        }
    }
}

fn base_color(class: u8) -> [f64; 3] {
    match class {
        CLASS_SKY => [0.42, 0.60, 0.85],
        CLASS_GROUND => [0.58, 0.46, 0.30],
        CLASS_WALL => [0.44, 0.44, 0.58],
        CLASS_ROAD => [0.35, 0.33, 0.38],
        CLASS_VEGETATION => [0.28, 0.52, 0.17],
        CLASS_DISK => [0.85, 0.12, 0.20],
        CLASS_BOX => [0.95, 0.78, 0.10],
        CLASS_TRIANGLE => [0.05, 0.82, 0.80],
        _ => [0.0, 0.0, 0.0],
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / d) % 6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let h = if h < 0.0 { h + 360.0 } else { h };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let hp = (h / 60.0) % 6.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix-style hash over the parts
    let mut h: u64 = 0x9e3779b97f4a7c15;
    for &p in parts {
        h ^= p.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xbf58476d1ce4e5b9);
        h ^= h >> 27;
    }
    h
}

struct PlacedThing {
    class_id: u8,
    shape: u8, // 0 disk, 1 box, 2 triangle
    cy: f64,
    cx: f64,
    r: f64,
}

/// Render one scene. Identical `SceneSpec` values produce bit-identical
/// samples; source and target renders of the same seed share the label.
pub fn generate_scene(spec: &SceneSpec) -> Sample {
    let (h, w) = (spec.height, spec.width);
    let mut geo = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, 0xA11CE]));

    // ---- geometry (domain-independent) ----
    let horizon = ((spec.horizon_frac.0
        + geo.gen::<f64>() * (spec.horizon_frac.1 - spec.horizon_frac.0))
        * h as f64) as usize;
    let wall_present = geo.gen::<f64>() < 0.7;
    let wall_h = if wall_present {
        (h as f64 * (0.05 + geo.gen::<f64>() * 0.10)) as usize
    } else {
        0
    };
    let road_top = horizon + wall_h + ((h - horizon - wall_h) as f64 * (0.15 + geo.gen::<f64>() * 0.4)) as usize;
    let road_h = ((h as f64) * (0.10 + geo.gen::<f64>() * 0.12)) as usize;

    let mut semantic = Array2::<u8>::zeros((h, w));
    let mut instance = Array2::<u16>::zeros((h, w));
    for y in 0..h {
        let c = if y < horizon {
            CLASS_SKY
        } else if y < horizon + wall_h {
            CLASS_WALL
        } else if y >= road_top && y < road_top + road_h {
            CLASS_ROAD
        } else {
            CLASS_GROUND
        };
        for x in 0..w {
            semantic[[y, x]] = c;
        }
    }
    // vegetation blobs on ground
    let n_veg = geo.gen_range(0..3usize);
    for _ in 0..n_veg {
        let cy = geo.gen_range(horizon as f64..h as f64);
        let cx = geo.gen_range(0.0..w as f64);
        let ry = geo.gen_range(4.0..12.0);
        let rx = geo.gen_range(8.0..24.0);
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                if dy * dy + dx * dx <= 1.0 && semantic[[y, x]] == CLASS_GROUND {
                    semantic[[y, x]] = CLASS_VEGETATION;
                }
            }
        }
    }

    // things: rejection-sampled so instances never overlap (keeps each
    // instance a connected, non-empty pixel set)
    let mut placed: Vec<PlacedThing> = Vec::new();
    for spawn in &spec.things {
        if geo.gen::<f64>() >= spawn.presence_prob {
            continue;
        }
        let count = geo.gen_range(spawn.count.0..=spawn.count.1);
        for _ in 0..count {
            let r = geo.gen_range(spawn.radius.0 as f64..=spawn.radius.1 as f64);
            let mut ok = None;
            for _try in 0..40 {
                let cy = geo.gen_range((horizon as f64 + r).min(h as f64 - r - 1.0)..(h as f64 - r));
                let cx = geo.gen_range(r..(w as f64 - r));
                let clear = placed
                    .iter()
                    .all(|p| ((p.cy - cy).powi(2) + (p.cx - cx).powi(2)).sqrt() > p.r + r + 2.0);
                if clear {
                    ok = Some((cy, cx));
                    break;
                }
            }
            if let Some((cy, cx)) = ok {
                let shape = match spawn.class_id {
                    CLASS_DISK => 0,
                    CLASS_BOX => 1,
                    _ => 2,
                };
                placed.push(PlacedThing { class_id: spawn.class_id, shape, cy, cx, r });
            }
        }
    }
    for (i, t) in placed.iter().enumerate() {
        let inst_id = (i + 1) as u16;
        let y0 = (t.cy - t.r).floor().max(0.0) as usize;
        let y1 = ((t.cy + t.r).ceil() as usize).min(h - 1);
        let x0 = (t.cx - t.r).floor().max(0.0) as usize;
        let x1 = ((t.cx + t.r).ceil() as usize).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dy = y as f64 - t.cy;
                let dx = x as f64 - t.cx;
                let inside = match t.shape {
                    0 => dy * dy + dx * dx <= t.r * t.r,
                    1 => dy.abs() <= t.r * 0.9 && dx.abs() <= t.r * 0.9,
                    _ => {
                        // upward triangle with apex at (cy - r, cx)
                        let fy = (dy + t.r) / (2.0 * t.r); // 0 at apex, 1 at base
                        fy >= 0.0 && fy <= 1.0 && dx.abs() <= fy * t.r
                    }
                };
                if inside {
                    semantic[[y, x]] = t.class_id;
                    instance[[y, x]] = inst_id;
                }
            }
        }
    }

    // void strip (ignore region) at the bottom
    if geo.gen::<f64>() < spec.void_strip_prob {
        let strip = geo.gen_range(3..7usize);
        for y in h - strip..h {
            for x in 0..w {
                semantic[[y, x]] = VOID_CLASS;
                instance[[y, x]] = 0;
            }
        }
    }
    // instances fully inside the void strip would be empty; compress ids
    let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
    for &i in instance.iter() {
        if i > 0 {
            *counts.entry(i).or_default() += 1;
        }
    }
    let remap: BTreeMap<u16, u16> = counts
        .keys()
        .enumerate()
        .map(|(new, &old)| (old, (new + 1) as u16))
        .collect();
    instance.mapv_inplace(|i| if i == 0 { 0 } else { remap[&i] });

    // ---- appearance ----
    let mut app = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, 0xC0105]));
    // per-instance color jitter, indexed by (compressed) instance id
    let n_inst = remap.len();
    let inst_jitter: Vec<[f64; 3]> = (0..=n_inst)
        .map(|_| [app.gen::<f64>() - 0.5, app.gen::<f64>() - 0.5, app.gen::<f64>() - 0.5])
        .collect();
    let mut image = Array3::<f32>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let c = semantic[[y, x]];
            let base = if c == VOID_CLASS { [0.02, 0.02, 0.02] } else { base_color(c) };
            let inst = instance[[y, x]] as usize;
            let n = spec.noise_amplitude;
            for ch in 0..3 {
                let mut v = base[ch];
                if inst > 0 {
                    v += inst_jitter[inst][ch] * 0.12;
                }
                v += (app.gen::<f64>() - 0.5) * 2.0 * n;
                image[[y, x, ch]] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }

    if spec.domain == Domain::Target {
        let mut tgt = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, 0x7A26E7]));
        for y in 0..h {
            for x in 0..w {
                let (r, g, b) = (
                    image[[y, x, 0]] as f64,
                    image[[y, x, 1]] as f64,
                    image[[y, x, 2]] as f64,
                );
                let (hh, s, v) = rgb_to_hsv(r, g, b);
                let (r, g, b) = hsv_to_rgb((hh + spec.shift.hue_deg).rem_euclid(360.0), s, v);
                for (ch, val) in [r, g, b].into_iter().enumerate() {
                    // Box-Muller Gaussian noise
                    let u1: f64 = tgt.gen::<f64>().max(1e-12);
                    let u2: f64 = tgt.gen();
                    let gauss = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                    let shifted = val * spec.shift.brightness + gauss * spec.shift.noise_sigma;
                    image[[y, x, ch]] = shifted.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }

    // quantize to the 8-bit grid so PNG round-trips are lossless
    image.mapv_inplace(|v| (v * 255.0).round() / 255.0);

    let prefix = match spec.domain {
        Domain::Source => "src",
        Domain::Target => "tgt",
    };
    Sample {
        id: format!("{prefix}_{:08}", spec.seed),
        image,
        label: Some(PanopticLabel { semantic, instance }),
        domain: spec.domain,
    }
}

/// Configuration for [`generate_dataset`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyConfig {
    pub size: usize,
    pub shift: DomainShift,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            size: 128,
            shift: DomainShift::default(),
        }
    }
}

pub fn generate_dataset(n: usize, domain: Domain, base_seed: u64, cfg: &ToyConfig) -> Dataset {
    assert!(n >= 1, "generate_dataset: n must be >= 1");
    let samples: Vec<Sample> = (0..n)
        .map(|i| {
            let mut spec = SceneSpec::toy(base_seed + i as u64, domain, cfg.size);
            spec.shift = cfg.shift.clone();
            generate_scene(&spec)
        })
        .collect();
    Dataset::new(samples, toy_class_table())
}

/// `f_c` = pixels of class c / total non-void pixels over the dataset.
pub fn compute_class_frequencies(ds: &Dataset) -> Result<Vec<f64>, CoreError> {
    let c = ds.class_table.len();
    let mut counts = vec![0u64; c];
    let mut total = 0u64;
    for s in &ds.samples {
        let label = s
            .label
            .as_ref()
            .ok_or_else(|| CoreError::Unlabeled(s.id.clone()))?;
        for &cls in label.semantic.iter() {
            if cls == VOID_CLASS {
                continue;
            }
            counts[cls as usize] += 1;
            total += 1;
        }
    }
    Ok(counts
        .iter()
        .map(|&k| k as f64 / total.max(1) as f64)
        .collect())
}

// ---- on-disk format ----

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("index: {0}")]
    Index(#[from] serde_json::Error),
    #[error("unsupported format version {0} (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("sample {id}: {msg}")]
    Sample { id: String, msg: String },
    #[error("core: {0}")]
    Core(#[from] CoreError),
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    format_version: u32,
    class_table: ClassTable,
    samples: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    id: String,
    domain: Domain,
    labeled: bool,
}

/// Layout: `index.json`, `images/<id>.png` (8-bit RGB), `semantic/<id>.png`
/// (8-bit gray, 255 = void), `instance/<id>.png` (16-bit gray).
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<(), IoError> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("semantic"))?;
    std::fs::create_dir_all(dir.join("instance"))?;
    for s in &ds.samples {
        let (h, w) = (s.height(), s.width());
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    (s.image[[y, x, 0]] * 255.0).round() as u8,
                    (s.image[[y, x, 1]] * 255.0).round() as u8,
                    (s.image[[y, x, 2]] * 255.0).round() as u8,
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(dir.join("images").join(format!("{}.png", s.id)))?;
        if let Some(label) = &s.label {
            let mut sem = image::GrayImage::new(w as u32, h as u32);
            let mut inst = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    sem.put_pixel(x as u32, y as u32, image::Luma([label.semantic[[y, x]]]));
                    inst.put_pixel(x as u32, y as u32, image::Luma([label.instance[[y, x]]]));
                }
            }
            sem.save(dir.join("semantic").join(format!("{}.png", s.id)))?;
            inst.save(dir.join("instance").join(format!("{}.png", s.id)))?;
        }
    }
    let index = IndexFile {
        format_version: FORMAT_VERSION,
        class_table: ds.class_table.clone(),
        samples: ds
            .samples
            .iter()
            .map(|s| IndexEntry {
                id: s.id.clone(),
                domain: s.domain,
                labeled: s.label.is_some(),
            })
            .collect(),
    };
    std::fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, IoError> {
    let index: IndexFile = serde_json::from_slice(&std::fs::read(dir.join("index.json"))?)?;
    if index.format_version != FORMAT_VERSION {
        return Err(IoError::Version(index.format_version));
    }
    let mut samples = Vec::with_capacity(index.samples.len());
    for e in &index.samples {
        let img = image::open(dir.join("images").join(format!("{}.png", e.id)))?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut image_arr = Array3::<f32>::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                let px = img.get_pixel(x as u32, y as u32);
                for ch in 0..3 {
                    image_arr[[y, x, ch]] = px[ch] as f32 / 255.0;
                }
            }
        }
        let label = if e.labeled {
            let sem_img = image::open(dir.join("semantic").join(format!("{}.png", e.id)))?.to_luma8();
            let inst_img =
                image::open(dir.join("instance").join(format!("{}.png", e.id)))?.to_luma16();
            if (sem_img.width() as usize, sem_img.height() as usize) != (w, h)
                || (inst_img.width() as usize, inst_img.height() as usize) != (w, h)
            {
                return Err(IoError::Sample {
                    id: e.id.clone(),
                    msg: "label shape does not match image shape".into(),
                });
            }
            let semantic = Array2::from_shape_fn((h, w), |(y, x)| {
                sem_img.get_pixel(x as u32, y as u32)[0]
            });
            let instance = Array2::from_shape_fn((h, w), |(y, x)| {
                inst_img.get_pixel(x as u32, y as u32)[0]
            });
            let label = PanopticLabel { semantic, instance };
            let violations = validate_panoptic(&label, &index.class_table);
            if !violations.is_empty() {
                return Err(IoError::Sample {
                    id: e.id.clone(),
                    msg: violations.join("; "),
                });
            }
            Some(label)
        } else {
            None
        };
        samples.push(Sample {
            id: e.id.clone(),
            image: image_arr,
            label,
            domain: e.domain,
        });
    }
    Ok(Dataset::new(samples, index.class_table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::extract_segments;

    #[test]
    fn deterministic_generation() {
        let spec = SceneSpec::toy(3, Domain::Source, 64);
        let a = generate_scene(&spec);
        let b = generate_scene(&spec);
        assert_eq!(a.image, b.image);
        assert_eq!(a.label, b.label);
    }

    #[test]
    fn source_target_share_geometry_not_appearance() {
        let src = generate_scene(&SceneSpec::toy(11, Domain::Source, 64));
        let tgt = generate_scene(&SceneSpec::toy(11, Domain::Target, 64));
        assert_eq!(src.label, tgt.label);
        assert_ne!(src.image, tgt.image);
    }

    #[test]
    fn zero_thing_spec_has_empty_instance_map() {
        let mut spec = SceneSpec::toy(5, Domain::Source, 64);
        spec.things.clear();
        let s = generate_scene(&spec);
        assert!(s.label.unwrap().instance.iter().all(|&i| i == 0));
    }

    #[test]
    fn generated_labels_always_validate() {
        let table = toy_class_table();
        for seed in 0..30 {
            let s = generate_scene(&SceneSpec::toy(seed, Domain::Source, 64));
            let v = validate_panoptic(s.label.as_ref().unwrap(), &table);
            assert!(v.is_empty(), "seed {seed}: {v:?}");
        }
    }

    #[test]
    fn instance_segments_are_connected() {
        // spec example: forced 2 disks -> exactly 2 connected instance segments
        let mut spec = SceneSpec::toy(7, Domain::Source, 64);
        spec.things = vec![ThingSpawn {
            class_id: CLASS_DISK,
            presence_prob: 1.0,
            count: (2, 2),
            radius: (6, 9),
        }];
        spec.void_strip_prob = 0.0;
        let s = generate_scene(&spec);
        let label = s.label.unwrap();
        let segs: Vec<_> = extract_segments(&label)
            .into_iter()
            .filter(|s| s.instance_id > 0)
            .collect();
        assert_eq!(segs.len(), 2);
        for seg in segs {
            // BFS connectivity over the pixel set
            let set: std::collections::HashSet<(usize, usize)> =
                seg.pixels.iter().copied().collect();
            let mut seen = std::collections::HashSet::new();
            let mut stack = vec![seg.pixels[0]];
            seen.insert(seg.pixels[0]);
            while let Some((y, x)) = stack.pop() {
                for (dy, dx) in [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)] {
                    let ny = y as i64 + dy;
                    let nx = x as i64 + dx;
                    if ny < 0 || nx < 0 {
                        continue;
                    }
                    let p = (ny as usize, nx as usize);
                    if set.contains(&p) && seen.insert(p) {
                        stack.push(p);
                    }
                }
            }
            assert_eq!(seen.len(), seg.pixels.len(), "instance not connected");
        }
    }

    #[test]
    fn dataset_indexing_and_frequencies() {
        let ds = generate_dataset(50, Domain::Source, 100, &ToyConfig { size: 64, ..Default::default() });
        assert_eq!(ds.len(), 50);
        // classes with nonzero spawn probability appear somewhere
        for c in [CLASS_SKY, CLASS_GROUND, CLASS_ROAD, CLASS_DISK] {
            assert!(!ds.per_class_index[&c].is_empty(), "class {c} never present");
        }
        let f = compute_class_frequencies(&ds).unwrap();
        let sum: f64 = f.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        // brute-force recount oracle
        let mut counts = vec![0u64; ds.class_table.len()];
        let mut total = 0u64;
        for s in &ds.samples {
            for &c in s.label.as_ref().unwrap().semantic.iter() {
                if c != VOID_CLASS {
                    counts[c as usize] += 1;
                    total += 1;
                }
            }
        }
        for (i, &k) in counts.iter().enumerate() {
            assert!((f[i] - k as f64 / total as f64).abs() < 1e-15);
        }
        // triangle is rare but not absent over 50 scenes
        assert!(f[CLASS_TRIANGLE as usize] < f[CLASS_DISK as usize]);
    }

    #[test]
    fn roundtrip_read_write() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = generate_dataset(2, Domain::Target, 7, &ToyConfig { size: 32, ..Default::default() });
        ds.samples[1].label = None; // unlabeled target sample survives round-trip
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.class_table, ds.class_table);
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.domain, b.domain);
            assert_eq!(a.image, b.image);
            assert_eq!(a.label, b.label);
        }
    }

    #[test]
    fn missing_index_is_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_dataset(dir.path()).is_err());
    }

    #[test]
    fn corrupt_label_names_sample() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(1, Domain::Source, 3, &ToyConfig { size: 32, ..Default::default() });
        write_dataset(&ds, dir.path()).unwrap();
        let id = ds.samples[0].id.clone();
        // overwrite the semantic map with an out-of-table class id
        let bad = image::GrayImage::from_pixel(32, 32, image::Luma([200u8]));
        bad.save(dir.path().join("semantic").join(format!("{id}.png"))).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains(&id), "{err}");
    }

    #[test]
    fn unknown_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(1, Domain::Source, 3, &ToyConfig { size: 32, ..Default::default() });
        write_dataset(&ds, dir.path()).unwrap();
        let mut idx: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("index.json")).unwrap()).unwrap();
        idx["format_version"] = serde_json::json!(99);
        std::fs::write(dir.path().join("index.json"), serde_json::to_vec(&idx).unwrap()).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(IoError::Version(99))));
    }
}
