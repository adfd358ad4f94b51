//! Synthetic video generation, DAVIS-layout dataset I/O, and checkpoints.
//!
//! Datasets live on disk in the DAVIS directory convention:
//! `<root>/JPEGImages/<seq>/NNNNN.png`, `<root>/Annotations/<seq>/NNNNN.png`
//! (grayscale index images, 0 = background, k = object k, or palette images
//! using the VOC colormap), and `<root>/ImageSets/<split>.txt` listing
//! sequence names.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::{Frame, Mask, MaskKind, MultiObjectMask, VideoClip};
use crate::net::{Hyper, SegModel};

// ---------------------------------------------------------------------------
// synthetic videos
// ---------------------------------------------------------------------------

/// Shape vocabulary for generated objects.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

/// Parameters for the synthetic moving-shapes generator.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub n_videos: usize,
    pub frames_per_video: usize,
    /// Working resolution `(H, W)`, at least 32x32.
    pub resolution: (usize, usize),
    /// Objects per video, 1..=3.
    pub n_objects: usize,
    /// Maximum per-axis speed in pixels per frame (integer motion).
    pub velocity_max: i64,
    /// Probability that a video contains a moving occluder bar.
    pub occluder_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_videos: 8,
            frames_per_video: 40,
            resolution: (64, 112),
            n_objects: 1,
            velocity_max: 3,
            occluder_prob: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let (h, w) = self.resolution;
        if h < 32 || w < 32 {
            return Err(Error::InvalidArgument(format!(
                "synthetic resolution {h}x{w} below 32x32"
            )));
        }
        if !(1..=3).contains(&self.n_objects) {
            return Err(Error::InvalidArgument(format!(
                "n_objects {} outside 1..=3",
                self.n_objects
            )));
        }
        if self.n_videos == 0 || self.frames_per_video == 0 {
            return Err(Error::InvalidArgument("empty synthetic dataset".into()));
        }
        if self.velocity_max < 1 {
            return Err(Error::InvalidArgument("velocity_max must be >= 1".into()));
        }
        Ok(())
    }
}

struct MovingShape {
    kind: ShapeKind,
    radius: i64,
    center: (i64, i64),
    velocity: (i64, i64),
    color: [f64; 3],
}

impl MovingShape {
    fn contains(&self, y: i64, x: i64) -> bool {
        let dy = y - self.center.0;
        let dx = x - self.center.1;
        let r = self.radius;
        match self.kind {
            ShapeKind::Square => dy.abs() <= r && dx.abs() <= r,
            ShapeKind::Circle => dy * dy + dx * dx <= r * r,
            ShapeKind::Triangle => dy.abs() <= r && 2 * dx.abs() <= dy + r,
        }
    }

    fn step(&mut self, h: i64, w: i64) {
        // reflect before moving so the shape never leaves the frame
        let (mut vy, mut vx) = self.velocity;
        let ny = self.center.0 + vy;
        if ny - self.radius < 0 || ny + self.radius >= h {
            vy = -vy;
        }
        let nx = self.center.1 + vx;
        if nx - self.radius < 0 || nx + self.radius >= w {
            vx = -vx;
        }
        self.velocity = (vy, vx);
        self.center.0 += vy;
        self.center.1 += vx;
    }
}

/// Low-frequency value-noise background: bilinear interpolation of a coarse
/// random grid, one per channel.
fn value_noise_background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array3<f64> {
    let gh = (h / 16).max(2) + 1;
    let gw = (w / 16).max(2) + 1;
    let coarse: Vec<Vec<[f64; 3]>> = (0..gh)
        .map(|_| {
            (0..gw)
                .map(|_| {
                    [
                        rng.gen_range(0.1..0.9),
                        rng.gen_range(0.1..0.9),
                        rng.gen_range(0.1..0.9),
                    ]
                })
                .collect()
        })
        .collect();
    Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        let fy = y as f64 / (h - 1).max(1) as f64 * (gh - 1) as f64;
        let fx = x as f64 / (w - 1).max(1) as f64 * (gw - 1) as f64;
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(gh - 1), (x0 + 1).min(gw - 1));
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let v00 = coarse[y0][x0][c];
        let v01 = coarse[y0][x1][c];
        let v10 = coarse[y1][x0][c];
        let v11 = coarse[y1][x1][c];
        v00 * (1.0 - ty) * (1.0 - tx)
            + v01 * (1.0 - ty) * tx
            + v10 * ty * (1.0 - tx)
            + v11 * ty * tx
    })
}

fn sample_velocity(rng: &mut ChaCha8Rng, vmax: i64) -> i64 {
    let mag = rng.gen_range(1..=vmax);
    if rng.gen_bool(0.5) {
        mag
    } else {
        -mag
    }
}

/// Saturated object color: each channel sits at the extremes, past the
/// background's tonal range, so foreground stays separable under the noise.
fn sample_object_color(rng: &mut ChaCha8Rng, used: &[[f64; 3]]) -> [f64; 3] {
    for _ in 0..20 {
        let mut color = [0.0; 3];
        for c in color.iter_mut() {
            *c = if rng.gen_bool(0.5) {
                rng.gen_range(0.0..0.1)
            } else {
                rng.gen_range(0.9..1.0)
            };
        }
        let distinct = used
            .iter()
            .all(|u| u.iter().zip(&color).map(|(a, b)| (a - b).abs()).sum::<f64>() > 0.8);
        if distinct || used.is_empty() {
            return color;
        }
    }
    [1.0, 0.05, 0.05]
}

fn splitmix(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Generate textured-background clips with moving colored shapes and exact
/// per-object visibility masks. Deterministic per seed.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Vec<VideoClip>> {
    cfg.validate()?;
    let (h, w) = cfg.resolution;
    let (hi, wi) = (h as i64, w as i64);
    let shapes = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    let mut videos = Vec::with_capacity(cfg.n_videos);
    for vid in 0..cfg.n_videos {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ (vid as u64) << 17));
        let background = value_noise_background(&mut rng, h, w);

        let min_dim = h.min(w) as i64;
        let mut objects: Vec<MovingShape> = Vec::new();
        for obj in 0..cfg.n_objects {
            let mut placed = false;
            for _attempt in 0..50 {
                let radius = rng.gen_range(min_dim / 8..=min_dim / 5).max(3);
                if 2 * radius + 2 >= hi || 2 * radius + 2 >= wi {
                    continue;
                }
                let cy = rng.gen_range(radius..hi - radius);
                let cx = rng.gen_range(radius..wi - radius);
                // keep starting centers apart so objects are distinguishable
                if objects.iter().any(|o| {
                    (o.center.0 - cy).abs() < radius + o.radius
                        && (o.center.1 - cx).abs() < radius + o.radius
                }) {
                    continue;
                }
                let used: Vec<[f64; 3]> = objects.iter().map(|o: &MovingShape| o.color).collect();
                // later objects sometimes mimic the first object's look,
                // acting as distractors that stress mask propagation
                let (kind, color) = if obj > 0 && rng.gen_bool(0.3) {
                    let mut c = objects[0].color;
                    for ch in c.iter_mut() {
                        *ch = (*ch + rng.gen_range(-0.15..0.15)).clamp(0.0, 1.0);
                    }
                    (objects[0].kind, c)
                } else {
                    (
                        shapes[(vid + obj) % shapes.len()],
                        sample_object_color(&mut rng, &used),
                    )
                };
                objects.push(MovingShape {
                    kind,
                    radius,
                    center: (cy, cx),
                    velocity: (
                        sample_velocity(&mut rng, cfg.velocity_max),
                        sample_velocity(&mut rng, cfg.velocity_max),
                    ),
                    color,
                });
                placed = true;
                break;
            }
            if !placed {
                return Err(Error::Dataset(format!(
                    "could not place object {obj} in video {vid} after 50 attempts"
                )));
            }
        }

        let mut occluder = if rng.gen_bool(cfg.occluder_prob) {
            let thickness = (min_dim / 8).max(2);
            let vertical = rng.gen_bool(0.5);
            let pos = if vertical {
                rng.gen_range(0..wi - thickness)
            } else {
                rng.gen_range(0..hi - thickness)
            };
            let vel = sample_velocity(&mut rng, cfg.velocity_max.min(2));
            Some((vertical, pos, thickness, vel))
        } else {
            None
        };

        let mut frames = Vec::with_capacity(cfg.frames_per_video);
        let mut gts = Vec::with_capacity(cfg.frames_per_video);
        for t in 0..cfg.frames_per_video {
            let mut pixels = background.clone();
            // topmost object per pixel; 0 = none
            let mut top = Array2::<u32>::zeros((h, w));
            for (i, obj) in objects.iter().enumerate() {
                let id = i as u32 + 1;
                let r = obj.radius;
                for y in (obj.center.0 - r).max(0)..=(obj.center.0 + r).min(hi - 1) {
                    for x in (obj.center.1 - r).max(0)..=(obj.center.1 + r).min(wi - 1) {
                        if obj.contains(y, x) {
                            top[(y as usize, x as usize)] = id;
                            for c in 0..3 {
                                pixels[(c, y as usize, x as usize)] = obj.color[c];
                            }
                        }
                    }
                }
            }
            if let Some((vertical, pos, thickness, _)) = occluder {
                let range = pos.max(0)..(pos + thickness).min(if vertical { wi } else { hi });
                for p in range {
                    for q in 0..(if vertical { hi } else { wi }) {
                        let (y, x) = if vertical { (q, p) } else { (p, q) };
                        top[(y as usize, x as usize)] = 0;
                        for c in 0..3 {
                            pixels[(c, y as usize, x as usize)] = 0.45;
                        }
                    }
                }
            }

            frames.push(Frame::new(pixels, t + 1)?);
            gts.push(Some(labels_to_multi_object(
                &top,
                &(1..=cfg.n_objects as u32).collect::<Vec<_>>(),
            )));

            for obj in objects.iter_mut() {
                obj.step(hi, wi);
            }
            if let Some((vertical, ref mut pos, thickness, ref mut vel)) = occluder {
                let limit = if vertical { wi } else { hi };
                if *pos + *vel < 0 || *pos + *vel + thickness > limit {
                    *vel = -*vel;
                }
                *pos += *vel;
            }
        }

        let clip = VideoClip {
            frames,
            gt: gts,
            object_ids: (1..=cfg.n_objects as u32).collect(),
            original_size: None,
            name: format!("synth{vid:03}"),
        };
        clip.validate()?;
        videos.push(clip);
    }
    Ok(videos)
}

/// Build a binary-partition multi-object mask from a label grid.
pub fn labels_to_multi_object(labels: &Array2<u32>, object_ids: &[u32]) -> MultiObjectMask {
    let per_object: Vec<Mask> = object_ids
        .iter()
        .map(|&id| Mask {
            values: labels.mapv(|l| (l == id) as u8 as f64),
            object_id: id,
            kind: MaskKind::Probability,
        })
        .collect();
    let background = Mask {
        values: labels.mapv(|l| (l == 0) as u8 as f64),
        object_id: 1,
        kind: MaskKind::Probability,
    };
    MultiObjectMask {
        per_object,
        background,
    }
}

// ---------------------------------------------------------------------------
// resize helpers
// ---------------------------------------------------------------------------

/// Bilinear resize of a channel-first image.
pub fn resize_bilinear(src: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = src.dim();
    Array3::from_shape_fn((c, out_h, out_w), |(ci, y, x)| {
        let fy = if out_h > 1 {
            y as f64 * (h - 1) as f64 / (out_h - 1) as f64
        } else {
            0.0
        };
        let fx = if out_w > 1 {
            x as f64 * (w - 1) as f64 / (out_w - 1) as f64
        } else {
            0.0
        };
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        src[(ci, y0, x0)] * (1.0 - ty) * (1.0 - tx)
            + src[(ci, y0, x1)] * (1.0 - ty) * tx
            + src[(ci, y1, x0)] * ty * (1.0 - tx)
            + src[(ci, y1, x1)] * ty * tx
    })
}

/// Nearest-neighbor resize of a label/mask grid.
pub fn resize_nearest<T: Copy>(src: &Array2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let sy = ((y as f64 + 0.5) * h as f64 / out_h as f64) as usize;
        let sx = ((x as f64 + 0.5) * w as f64 / out_w as f64) as usize;
        src[(sy.min(h - 1), sx.min(w - 1))]
    })
}

// ---------------------------------------------------------------------------
// DAVIS-layout persistence
// ---------------------------------------------------------------------------

fn frame_to_rgb(frame: &Frame) -> RgbImage {
    let (h, w) = frame.shape();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (frame.pixels[(0, y, x)] * 255.0).round().clamp(0.0, 255.0) as u8,
                (frame.pixels[(1, y, x)] * 255.0).round().clamp(0.0, 255.0) as u8,
                (frame.pixels[(2, y, x)] * 255.0).round().clamp(0.0, 255.0) as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img
}

fn rgb_to_pixels(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
    })
}

/// Standard VOC/DAVIS palette color for an annotation index.
pub fn voc_palette(index: u8) -> [u8; 3] {
    let mut rgb = [0u8; 3];
    let mut id = index;
    for shift in (0..8).rev() {
        for (c, v) in rgb.iter_mut().enumerate() {
            *v |= ((id >> c) & 1) << shift;
        }
        id >>= 3;
    }
    rgb
}

fn labels_to_gray(labels: &Array2<u32>) -> GrayImage {
    let (h, w) = labels.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Luma([labels[(y, x)] as u8]));
        }
    }
    img
}

fn image_to_labels(img: &DynamicImage, path: &Path) -> Result<Array2<u32>> {
    match img {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                g.get_pixel(x as u32, y as u32).0[0] as u32
            }))
        }
        other => {
            // palette PNGs decode to RGB; map colors through the VOC palette
            let rgb = other.to_rgb8();
            let mut table = std::collections::HashMap::new();
            for idx in 0..=255u8 {
                table.entry(voc_palette(idx)).or_insert(idx);
            }
            let (w, h) = rgb.dimensions();
            let mut out = Array2::zeros((h as usize, w as usize));
            for y in 0..h {
                for x in 0..w {
                    let px = rgb.get_pixel(x, y).0;
                    match table.get(&px) {
                        Some(&idx) => out[(y as usize, x as usize)] = idx as u32,
                        None => {
                            return Err(Error::Dataset(format!(
                                "unknown annotation color {:?} in {}",
                                px,
                                path.display()
                            )))
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Persist clips in the DAVIS layout under `root`, appending sequence names
/// to `ImageSets/<split>.txt`.
pub fn save_dataset(videos: &[VideoClip], root: &Path, split: &str) -> Result<()> {
    let sets = root.join("ImageSets");
    fs::create_dir_all(&sets).map_err(|e| Error::io(&sets, e))?;
    let mut names = Vec::new();
    for clip in videos {
        let img_dir = root.join("JPEGImages").join(&clip.name);
        let ann_dir = root.join("Annotations").join(&clip.name);
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        fs::create_dir_all(&ann_dir).map_err(|e| Error::io(&ann_dir, e))?;
        for (i, frame) in clip.frames.iter().enumerate() {
            let img_path = img_dir.join(format!("{i:05}.png"));
            frame_to_rgb(frame).save(&img_path)?;
            if let Some(gt) = &clip.gt[i] {
                let ann_path = ann_dir.join(format!("{i:05}.png"));
                labels_to_gray(&gt.argmax_labels()).save(&ann_path)?;
            }
        }
        names.push(clip.name.clone());
    }
    let list = sets.join(format!("{split}.txt"));
    let mut f = fs::File::create(&list).map_err(|e| Error::io(&list, e))?;
    for n in names {
        writeln!(f, "{n}").map_err(|e| Error::io(&list, e))?;
    }
    Ok(())
}

/// Sequence names listed in `ImageSets/<split>.txt`.
pub fn read_split(root: &Path, split: &str) -> Result<Vec<String>> {
    let list = root.join("ImageSets").join(format!("{split}.txt"));
    let text = fs::read_to_string(&list).map_err(|e| Error::io(&list, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    Ok(entries)
}

/// Load one sequence, resizing frames bilinearly and annotations with
/// nearest-neighbor to `working_res` when given.
pub fn load_davis_clip(
    root: &Path,
    sequence: &str,
    working_res: Option<(usize, usize)>,
) -> Result<VideoClip> {
    let img_dir = root.join("JPEGImages").join(sequence);
    let ann_dir = root.join("Annotations").join(sequence);
    if !img_dir.is_dir() {
        return Err(Error::Dataset(format!(
            "missing frame directory {}",
            img_dir.display()
        )));
    }
    let frame_files = sorted_files(&img_dir)?;
    if frame_files.is_empty() {
        return Err(Error::Dataset(format!(
            "no frames in {}",
            img_dir.display()
        )));
    }

    let mut frames = Vec::with_capacity(frame_files.len());
    let mut gts = Vec::with_capacity(frame_files.len());
    let mut object_ids: Vec<u32> = Vec::new();
    let mut original_size = None;

    for (i, fpath) in frame_files.iter().enumerate() {
        let img = image::open(fpath)?.to_rgb8();
        let mut pixels = rgb_to_pixels(&img);
        let (_, h, w) = pixels.dim();
        if original_size.is_none() {
            original_size = Some((h, w));
        }
        if let Some((th, tw)) = working_res {
            if (h, w) != (th, tw) {
                pixels = resize_bilinear(&pixels, th, tw);
            }
        }
        frames.push(Frame::new(pixels.mapv(|v| v.clamp(0.0, 1.0)), i + 1)?);

        let stem = fpath.file_stem().unwrap().to_string_lossy().to_string();
        let ann_path = ann_dir.join(format!("{stem}.png"));
        if ann_path.is_file() {
            let ann = image::open(&ann_path)?;
            let mut labels = image_to_labels(&ann, &ann_path)?;
            if let Some((th, tw)) = working_res {
                if labels.dim() != (th, tw) {
                    labels = resize_nearest(&labels, th, tw);
                }
            }
            for &l in labels.iter() {
                if l > 0 && !object_ids.contains(&l) {
                    object_ids.push(l);
                }
            }
            gts.push(Some(labels));
        } else if i == 0 {
            return Err(Error::Dataset(format!(
                "missing first-frame annotation {}",
                ann_path.display()
            )));
        } else {
            gts.push(None);
        }
    }
    object_ids.sort_unstable();

    let gt = gts
        .into_iter()
        .map(|labels| labels.map(|l| labels_to_multi_object(&l, &object_ids)))
        .collect();

    let resized = working_res.is_some() && working_res != original_size;
    let clip = VideoClip {
        frames,
        gt,
        object_ids,
        original_size: if resized { original_size } else { None },
        name: sequence.to_string(),
    };
    clip.validate()?;
    Ok(clip)
}

/// Load every sequence of a split.
pub fn load_split(
    root: &Path,
    split: &str,
    working_res: Option<(usize, usize)>,
) -> Result<Vec<VideoClip>> {
    read_split(root, split)?
        .iter()
        .map(|name| load_davis_clip(root, name, working_res))
        .collect()
}

/// Write predicted label grids in the annotation layout, upsampling to the
/// clip's original resolution by nearest interpolation.
pub fn save_predictions(
    clip: &VideoClip,
    predictions: &[Array2<u32>],
    out_root: &Path,
) -> Result<()> {
    let dir = out_root.join("Annotations").join(&clip.name);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (i, labels) in predictions.iter().enumerate() {
        let labels = match clip.original_size {
            Some((h, w)) if labels.dim() != (h, w) => resize_nearest(labels, h, w),
            _ => labels.clone(),
        };
        let path = dir.join(format!("{i:05}.png"));
        labels_to_gray(&labels).save(&path)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &str = "cyclevos-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Training metadata carried by a checkpoint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: u64,
}

/// FNV-1a hash used to stamp config snapshots into checkpoints.
pub fn fnv1a(text: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in text.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn tensor_file_name(name: &str) -> String {
    format!("{}.bin", name.replace('.', "_"))
}

/// Save model parameters as little-endian f32 payloads plus a plain-text
/// manifest. Parameters are f32-clean by construction, so the round trip is
/// bitwise exact.
pub fn save_checkpoint(model: &SegModel, meta: &CheckpointMeta, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join("manifest.txt");
    let mut manifest = String::new();
    manifest.push_str(&format!("{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}\n"));
    manifest.push_str(&format!("epoch {}\n", meta.epoch));
    manifest.push_str(&format!("seed {}\n", meta.seed));
    manifest.push_str(&format!("config_hash {:016x}\n", meta.config_hash));
    manifest.push_str(&format!("base_width {}\n", model.hyper.base_width));

    for (name, tensor) in model.params() {
        let file = tensor_file_name(name);
        let shape = tensor
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        manifest.push_str(&format!("tensor {name} f32 {shape} {file}\n"));

        let mut bytes = Vec::with_capacity(tensor.len() * 4);
        for &v in tensor.iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    }
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

/// Load a checkpoint directory back into a model.
pub fn load_checkpoint(dir: &Path) -> Result<(SegModel, CheckpointMeta)> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Checkpoint("empty manifest".into()))?;
    let expected = format!("{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}");
    if header.trim() != expected {
        return Err(Error::Checkpoint(format!(
            "unsupported header {header:?}, expected {expected:?}"
        )));
    }

    let mut meta = CheckpointMeta::default();
    let mut base_width = None;
    let mut params = BTreeMap::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("epoch") => {
                meta.epoch = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Checkpoint("bad epoch line".into()))?
            }
            Some("seed") => {
                meta.seed = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Checkpoint("bad seed line".into()))?
            }
            Some("config_hash") => {
                meta.config_hash = parts
                    .next()
                    .and_then(|v| u64::from_str_radix(v, 16).ok())
                    .ok_or_else(|| Error::Checkpoint("bad config_hash line".into()))?
            }
            Some("base_width") => {
                base_width = parts.next().and_then(|v| v.parse::<usize>().ok());
            }
            Some("tensor") => {
                let name = parts
                    .next()
                    .ok_or_else(|| Error::Checkpoint("tensor line missing name".into()))?;
                let dtype = parts
                    .next()
                    .ok_or_else(|| Error::Checkpoint("tensor line missing dtype".into()))?;
                if dtype != "f32" {
                    return Err(Error::Checkpoint(format!(
                        "unsupported dtype {dtype} for {name}"
                    )));
                }
                let shape: Vec<usize> = parts
                    .next()
                    .ok_or_else(|| Error::Checkpoint("tensor line missing shape".into()))?
                    .split('x')
                    .map(|d| {
                        d.parse()
                            .map_err(|_| Error::Checkpoint(format!("bad shape for {name}")))
                    })
                    .collect::<Result<_>>()?;
                let file = parts
                    .next()
                    .ok_or_else(|| Error::Checkpoint("tensor line missing file".into()))?;

                let path = dir.join(file);
                let mut bytes = Vec::new();
                fs::File::open(&path)
                    .and_then(|mut f| f.read_to_end(&mut bytes))
                    .map_err(|e| Error::io(&path, e))?;
                let count: usize = shape.iter().product();
                if bytes.len() != count * 4 {
                    return Err(Error::Checkpoint(format!(
                        "{name}: payload is {} bytes, expected {}",
                        bytes.len(),
                        count * 4
                    )));
                }
                let data: Vec<f64> = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect();
                params.insert(
                    name.to_string(),
                    ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap(),
                );
            }
            Some(other) => {
                return Err(Error::Checkpoint(format!("unknown manifest key {other}")))
            }
            None => {}
        }
    }

    let base_width =
        base_width.ok_or_else(|| Error::Checkpoint("manifest missing base_width".into()))?;
    let model = SegModel::from_params(Hyper { base_width }, params)?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_generation_is_deterministic() {
        let cfg = SynthConfig {
            n_videos: 2,
            frames_per_video: 6,
            resolution: (32, 48),
            ..Default::default()
        };
        let a = gen_synthetic(&cfg).unwrap();
        let b = gen_synthetic(&cfg).unwrap();
        for (ca, cb) in a.iter().zip(&b) {
            for (fa, fb) in ca.frames.iter().zip(&cb.frames) {
                assert_eq!(fa.pixels, fb.pixels);
            }
        }
    }

    fn connected_components(mask: &Array2<bool>) -> usize {
        let (h, w) = mask.dim();
        let mut seen = Array2::from_elem((h, w), false);
        let mut count = 0;
        for sy in 0..h {
            for sx in 0..w {
                if !mask[(sy, sx)] || seen[(sy, sx)] {
                    continue;
                }
                count += 1;
                let mut stack = vec![(sy, sx)];
                seen[(sy, sx)] = true;
                while let Some((y, x)) = stack.pop() {
                    let mut push = |ny: usize, nx: usize, stack: &mut Vec<(usize, usize)>| {
                        if mask[(ny, nx)] && !seen[(ny, nx)] {
                            seen[(ny, nx)] = true;
                            stack.push((ny, nx));
                        }
                    };
                    if y > 0 {
                        push(y - 1, x, &mut stack);
                    }
                    if y + 1 < h {
                        push(y + 1, x, &mut stack);
                    }
                    if x > 0 {
                        push(y, x - 1, &mut stack);
                    }
                    if x + 1 < w {
                        push(y, x + 1, &mut stack);
                    }
                }
            }
        }
        count
    }

    #[test]
    fn single_object_without_occluder_is_one_component() {
        let cfg = SynthConfig {
            n_videos: 3,
            frames_per_video: 10,
            resolution: (40, 56),
            n_objects: 1,
            occluder_prob: 0.0,
            seed: 5,
            ..Default::default()
        };
        for clip in gen_synthetic(&cfg).unwrap() {
            for gt in clip.gt.iter().flatten() {
                let bin = gt.per_object[0].binarize();
                assert_eq!(connected_components(&bin), 1);
            }
        }
    }

    #[test]
    fn mask_area_constant_under_pure_translation() {
        // integer velocities with wall bounce: no occlusion, no boundary exit,
        // so the rasterized area must be exactly constant per object
        let cfg = SynthConfig {
            n_videos: 4,
            frames_per_video: 20,
            resolution: (48, 64),
            n_objects: 1,
            occluder_prob: 0.0,
            seed: 11,
            ..Default::default()
        };
        for clip in gen_synthetic(&cfg).unwrap() {
            let areas: Vec<usize> = clip
                .gt
                .iter()
                .map(|g| g.as_ref().unwrap().per_object[0].foreground_area())
                .collect();
            assert!(
                areas.windows(2).all(|w| w[0] == w[1]),
                "areas varied: {areas:?}"
            );
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let model = SegModel::init(Hyper { base_width: 8 }, 3);
        let dir = tempfile::tempdir().unwrap();
        let meta = CheckpointMeta {
            epoch: 7,
            seed: 42,
            config_hash: 0xabc,
        };
        save_checkpoint(&model, &meta, dir.path()).unwrap();
        let (loaded, got_meta) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(got_meta, meta);
        for (name, tensor) in model.params() {
            assert_eq!(tensor, &loaded.params()[name], "tensor {name}");
        }
    }

    #[test]
    fn checkpoint_detects_corrupt_payload() {
        let model = SegModel::init(Hyper { base_width: 8 }, 3);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, &CheckpointMeta::default(), dir.path()).unwrap();
        let victim = dir.path().join(tensor_file_name("dec.head.b"));
        let mut bytes = fs::read(&victim).unwrap();
        bytes.pop();
        fs::write(&victim, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn dataset_round_trip_preserves_labels() {
        let cfg = SynthConfig {
            n_videos: 1,
            frames_per_video: 4,
            resolution: (32, 48),
            n_objects: 2,
            occluder_prob: 0.0,
            seed: 9,
            ..Default::default()
        };
        let videos = gen_synthetic(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&videos, dir.path(), "train").unwrap();

        let names = read_split(dir.path(), "train").unwrap();
        assert_eq!(names, vec!["synth000".to_string()]);

        let clip = load_davis_clip(dir.path(), "synth000", None).unwrap();
        assert_eq!(clip.len(), 4);
        assert_eq!(clip.object_ids, vec![1, 2]);
        for (orig, loaded) in videos[0].gt.iter().zip(&clip.gt) {
            let a = orig.as_ref().unwrap().argmax_labels();
            let b = loaded.as_ref().unwrap().argmax_labels();
            assert_eq!(a, b);
        }
        // frames go through u8 quantization
        let diff = (&videos[0].frames[0].pixels - &clip.frames[0].pixels)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff <= 0.5 / 255.0 + 1e-9);
    }

    #[test]
    fn annotation_resize_round_trip_mostly_agrees() {
        // down 2x then back up with nearest keeps >= 95% of pixels on a disk
        let (h, w) = (48, 64);
        let mut labels = Array2::<u32>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let dy = y as i64 - 24;
                let dx = x as i64 - 32;
                if dy * dy + dx * dx <= 14 * 14 {
                    labels[(y, x)] = 1;
                }
            }
        }
        let down = resize_nearest(&labels, h / 2, w / 2);
        let up = resize_nearest(&down, h, w);
        let agree = labels
            .iter()
            .zip(up.iter())
            .filter(|(a, b)| a == b)
            .count();
        assert!(agree as f64 / (h * w) as f64 >= 0.95);
    }

    #[test]
    fn voc_palette_known_entries() {
        assert_eq!(voc_palette(0), [0, 0, 0]);
        assert_eq!(voc_palette(1), [128, 0, 0]);
        assert_eq!(voc_palette(2), [0, 128, 0]);
        assert_eq!(voc_palette(3), [128, 128, 0]);
        assert_eq!(voc_palette(4), [0, 0, 128]);
    }
}
