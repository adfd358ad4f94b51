//! Training pipeline: curriculum clip sampling, clip-consistent augmentation,
//! the forward-then-cyclic-backward pass, and Adam optimization.
//!
//! The cyclic branch re-predicts the clip's first frame from the current
//! frame and its *predicted* mask, and the reconstruction loss at that end
//! backpropagates through the prediction into the parameters (nothing is
//! detached).

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayD};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::loss::{combined_loss_g, LossConfig};
use crate::mask::{Frame, VideoClip};
use crate::net::{encode_memory_g, forward_g, insert_params, RefVars, SegModel};

/// Reference-set policy for sequential prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefStrategy {
    /// Only the initial frame and its ground-truth mask.
    First,
    /// Only the previous frame and its predicted mask.
    Prev,
    /// Initial pair plus the previous prediction.
    FirstPrev,
    /// Initial pair plus predictions appended at a fixed frame stride.
    Mem,
}

impl std::str::FromStr for RefStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(Self::First),
            "prev" => Ok(Self::Prev),
            "first_prev" => Ok(Self::FirstPrev),
            "mem" => Ok(Self::Mem),
            other => Err(Error::InvalidArgument(format!(
                "unknown strategy {other:?} (expected first|prev|first_prev|mem)"
            ))),
        }
    }
}

impl std::fmt::Display for RefStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::First => "first",
            Self::Prev => "prev",
            Self::FirstPrev => "first_prev",
            Self::Mem => "mem",
        };
        write!(f, "{s}")
    }
}

/// Training hyperparameters. Defaults follow the full-scale recipe; desk runs
/// shrink epochs and raise the learning rate through the config file.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub frames_per_clip: usize,
    /// Interval-curriculum step: max sampling gap grows by `interval_step`
    /// every `interval_epoch_period` epochs.
    pub interval_step: usize,
    pub interval_epoch_period: usize,
    pub seed: u64,
    /// Weight of the cyclic reconstruction term; 0 disables the branch.
    pub cycle_weight: f64,
    pub augment: bool,
    /// Checkpoint callback fires every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    pub strategy: RefStrategy,
    /// Frame stride for the `mem` strategy at inference.
    pub mem_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 240,
            batch_size: 4,
            lr: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            frames_per_clip: 3,
            interval_step: 5,
            interval_epoch_period: 20,
            seed: 0,
            cycle_weight: 1.0,
            augment: true,
            checkpoint_every: 0,
            strategy: RefStrategy::FirstPrev,
            mem_stride: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0
            || self.batch_size == 0
            || self.interval_step == 0
            || self.interval_epoch_period == 0
            || self.mem_stride == 0
        {
            return Err(Error::InvalidArgument(
                "train config fields must be positive".into(),
            ));
        }
        if self.frames_per_clip < 2 {
            return Err(Error::InvalidArgument("frames_per_clip must be >= 2".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::InvalidArgument("lr must be positive".into()));
        }
        if self.cycle_weight < 0.0 {
            return Err(Error::InvalidArgument("cycle_weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Sampled training clip: frames plus binary ground truth for one object.
/// The first frame is the reference.
#[derive(Clone, Debug)]
pub struct ClipSample {
    pub frames: Vec<Frame>,
    pub gts: Vec<Array2<f64>>,
    pub object_id: u32,
}

/// Maximum sampling gap at a given epoch.
pub fn max_interval(epoch: usize, cfg: &TrainConfig) -> usize {
    cfg.interval_step * (1 + epoch / cfg.interval_epoch_period)
}

/// Sample `frames_per_clip` frames with all pairwise gaps bounded by the
/// epoch's curriculum interval, sorted ascending. One object is drawn
/// uniformly; its binary masks become the clip ground truth.
pub fn sample_clip(
    video: &VideoClip,
    epoch: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ClipSample> {
    let n = video.len();
    let k = cfg.frames_per_clip;
    if n < k {
        return Err(Error::InvalidArgument(format!(
            "video {} has {} frames, need {}",
            video.name, n, k
        )));
    }
    let interval = max_interval(epoch, cfg).max(k - 1);
    let start = rng.gen_range(0..=n - k);
    let window_end = (start + interval).min(n - 1);

    let mut others: Vec<usize> = (start + 1..=window_end).collect();
    others.shuffle(rng);
    let mut indices: Vec<usize> = std::iter::once(start)
        .chain(others.into_iter().take(k - 1))
        .collect();
    indices.sort_unstable();

    let object_id = *video
        .object_ids
        .get(rng.gen_range(0..video.object_ids.len().max(1)))
        .ok_or_else(|| Error::Dataset(format!("video {} has no objects", video.name)))?;

    let mut frames = Vec::with_capacity(k);
    let mut gts = Vec::with_capacity(k);
    for &i in &indices {
        let gt = video.gt_binary(i, object_id).ok_or_else(|| {
            Error::Dataset(format!(
                "video {} frame {} lacks ground truth required for training",
                video.name, i
            ))
        })?;
        frames.push(video.frames[i].clone());
        gts.push(gt.mapv(|b| b as u8 as f64));
    }
    Ok(ClipSample {
        frames,
        gts,
        object_id,
    })
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

/// One draw of clip-consistent augmentation parameters.
#[derive(Clone, Copy, Debug)]
pub struct AugmentParams {
    pub flip: bool,
    pub noise_sigma: f64,
    pub contrast: f64,
    /// Crop rectangle as fractions: (top, left, height, width) of the image.
    pub crop: (f64, f64, f64, f64),
    pub rotation_deg: f64,
    pub shear_deg: f64,
    pub scale: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            flip: false,
            noise_sigma: 0.0,
            contrast: 1.0,
            crop: (0.0, 0.0, 1.0, 1.0),
            rotation_deg: 0.0,
            shear_deg: 0.0,
            scale: 1.0,
        }
    }

    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        let ch = rng.gen_range(0.7..=1.0);
        let cw = rng.gen_range(0.7..=1.0);
        Self {
            flip: rng.gen_bool(0.5),
            noise_sigma: rng.gen_range(0.0..=0.02),
            contrast: rng.gen_range(0.8..=1.2),
            crop: (
                rng.gen_range(0.0..=1.0 - ch),
                rng.gen_range(0.0..=1.0 - cw),
                ch,
                cw,
            ),
            rotation_deg: rng.gen_range(-15.0..=15.0),
            shear_deg: rng.gen_range(-10.0..=10.0),
            scale: rng.gen_range(0.9..=1.1),
        }
    }

    /// Inverse of the affine part (rotation ∘ shear ∘ scale about center),
    /// mapping output coordinates to source coordinates.
    fn inverse_affine(&self) -> [[f64; 2]; 2] {
        let th = self.rotation_deg.to_radians();
        let sh = self.shear_deg.to_radians().tan();
        let k = self.scale;
        // forward: R * Shear * Scale
        let m = [
            [
                k * (th.cos() + sh * -th.sin()),
                k * -th.sin(),
            ],
            [
                k * (th.sin() + sh * th.cos()),
                k * th.cos(),
            ],
        ];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        [
            [m[1][1] / det, -m[0][1] / det],
            [-m[1][0] / det, m[0][0] / det],
        ]
    }
}

fn bilinear_at(src: &ndarray::Array3<f64>, c: usize, y: f64, x: f64) -> f64 {
    let (_, h, w) = src.dim();
    let yc = y.clamp(0.0, (h - 1) as f64);
    let xc = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (yc.floor() as usize, xc.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (yc - y0 as f64, xc - x0 as f64);
    src[(c, y0, x0)] * (1.0 - ty) * (1.0 - tx)
        + src[(c, y0, x1)] * (1.0 - ty) * tx
        + src[(c, y1, x0)] * ty * (1.0 - tx)
        + src[(c, y1, x1)] * ty * tx
}

fn nearest_at(src: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = src.dim();
    let yy = y.round();
    let xx = x.round();
    if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
        return 0.0;
    }
    src[(yy as usize, xx as usize)]
}

/// Apply one parameter draw to a whole clip. Frames get the full geometric +
/// photometric treatment (bilinear resampling); masks follow the same
/// geometry with nearest-neighbor lookup and are re-binarized.
pub fn apply_augment(clip: &ClipSample, params: &AugmentParams, rng: &mut ChaCha8Rng) -> ClipSample {
    let (h, w) = clip.frames[0].shape();
    let (hf, wf) = (h as f64, w as f64);
    let inv = params.inverse_affine();
    let (cy, cx) = ((hf - 1.0) / 2.0, (wf - 1.0) / 2.0);
    let (crop_y, crop_x, crop_h, crop_w) = params.crop;

    // output pixel -> source coordinate, combining affine, crop and flip
    let map_coord = |y: usize, x: usize| -> (f64, f64) {
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        let sy = inv[0][0] * dy + inv[0][1] * dx + cy;
        let sx = inv[1][0] * dy + inv[1][1] * dx + cx;
        // map through the crop (crop then resize back = inverse scale into rect)
        let sy = crop_y * hf + sy * crop_h;
        let sx = crop_x * wf + sx * crop_w;
        let sx = if params.flip { wf - 1.0 - sx } else { sx };
        (sy, sx)
    };

    let noise = Normal::new(0.0, params.noise_sigma.max(1e-12)).unwrap();
    let mut frames = Vec::with_capacity(clip.frames.len());
    let mut gts = Vec::with_capacity(clip.gts.len());
    for (frame, gt) in clip.frames.iter().zip(&clip.gts) {
        let mut pixels = ndarray::Array3::zeros((3, h, w));
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = map_coord(y, x);
                for c in 0..3 {
                    let v = bilinear_at(&frame.pixels, c, sy, sx);
                    let v = (v - 0.5) * params.contrast + 0.5;
                    let v = if params.noise_sigma > 0.0 {
                        v + noise.sample(rng)
                    } else {
                        v
                    };
                    pixels[(c, y, x)] = v.clamp(0.0, 1.0);
                }
            }
        }
        let new_gt = Array2::from_shape_fn((h, w), |(y, x)| {
            let (sy, sx) = map_coord(y, x);
            (nearest_at(gt, sy, sx) >= 0.5) as u8 as f64
        });
        frames.push(Frame::new(pixels, frame.timestamp).expect("augmented frame in range"));
        gts.push(new_gt);
    }
    ClipSample {
        frames,
        gts,
        object_id: clip.object_id,
    }
}

/// Sample augmentation parameters and apply them clip-wide. Draws that erase
/// a previously nonempty mask are retried up to 10 times, then the clip is
/// returned untouched.
pub fn augment_clip(clip: &ClipSample, rng: &mut ChaCha8Rng) -> ClipSample {
    let had_fg: Vec<bool> = clip.gts.iter().map(|g| g.iter().any(|&v| v >= 0.5)).collect();
    for _ in 0..10 {
        let params = AugmentParams::sample(rng);
        let out = apply_augment(clip, &params, rng);
        let degenerate = out
            .gts
            .iter()
            .zip(&had_fg)
            .any(|(g, &had)| had && !g.iter().any(|&v| v >= 0.5));
        if !degenerate {
            return out;
        }
    }
    clip.clone()
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

/// Adam with bias correction. Parameters are rounded through f32 after every
/// update so checkpoints round-trip bitwise.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut SegModel, grads: &BTreeMap<String, ArrayD<f64>>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, param) in model.params_mut().iter_mut() {
            let Some(grad) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(param.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(param.raw_dim()));
            ndarray::Zip::from(param)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    let updated = *p - self.lr * mh / (vh.sqrt() + self.eps);
                    *p = updated as f32 as f64;
                });
        }
    }
}

// ---------------------------------------------------------------------------
// the training step
// ---------------------------------------------------------------------------

/// Scalar losses of one step.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepReport {
    pub total: f64,
    pub direct: f64,
    pub cyclic: f64,
}

/// Reference entries for predicting clip index `t`, per strategy. Entries are
/// (frame var, mask var) pairs already in the graph; predicted masks stay
/// attached so gradients flow through them.
fn training_refs(
    strategy: RefStrategy,
    t: usize,
    frame_vars: &[Var],
    first_gt: Var,
    preds: &[Option<Var>],
) -> Vec<RefVars> {
    let entry = |i: usize| RefVars {
        frame: frame_vars[i],
        mask: if i == 0 {
            first_gt
        } else {
            preds[i].expect("prediction for earlier frame exists")
        },
    };
    match strategy {
        RefStrategy::First => vec![entry(0)],
        RefStrategy::Prev => vec![entry(t - 1)],
        RefStrategy::FirstPrev => {
            if t == 1 {
                vec![entry(0)]
            } else {
                vec![entry(0), entry(t - 1)]
            }
        }
        // clips are short samples, so the memory policy keeps every frame
        RefStrategy::Mem => (0..t).map(entry).collect(),
    }
}

/// Build the forward + cyclic graph for one clip and return (loss var,
/// direct sum, cyclic sum).
fn clip_loss_graph(
    g: &mut Graph,
    model: &SegModel,
    pvars: &crate::net::ParamVars,
    clip: &ClipSample,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<(Var, f64, f64)> {
    let frame_vars: Vec<Var> = clip
        .frames
        .iter()
        .map(|f| g.constant(f.pixels.clone().into_dyn()))
        .collect();
    let first_gt = g.constant(clip.gts[0].clone().into_dyn());

    let mut preds: Vec<Option<Var>> = vec![None; clip.frames.len()];
    let mut total: Option<Var> = None;
    let mut direct_sum = 0.0;
    let mut cyclic_sum = 0.0;

    for t in 1..clip.frames.len() {
        let refs = training_refs(cfg.strategy, t, &frame_vars, first_gt, &preds);
        let memory = encode_memory_g(g, pvars, &refs);
        let pred_t = forward_g(g, model, pvars, memory, frame_vars[t]);
        preds[t] = Some(pred_t);

        let direct = combined_loss_g(g, pred_t, &clip.gts[t], loss_cfg)?;
        direct_sum += g.scalar(direct);
        let term = if cfg.cycle_weight > 0.0 {
            // cyclic reference set: the current frame with its prediction
            let cyc_refs = vec![RefVars {
                frame: frame_vars[t],
                mask: pred_t,
            }];
            let cyc_memory = encode_memory_g(g, pvars, &cyc_refs);
            let pred_first = forward_g(g, model, pvars, cyc_memory, frame_vars[0]);
            let cyc = combined_loss_g(g, pred_first, &clip.gts[0], loss_cfg)?;
            cyclic_sum += g.scalar(cyc);
            let cyc_w = g.scale(cyc, cfg.cycle_weight);
            g.add(direct, cyc_w)
        } else {
            direct
        };
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term),
        });
    }
    Ok((total.expect("clip has at least two frames"), direct_sum, cyclic_sum))
}

fn accumulate_grads(
    acc: &mut BTreeMap<String, ArrayD<f64>>,
    g: &Graph,
    pvars: &crate::net::ParamVars,
    loss: Var,
) -> Result<()> {
    let mut grads = g.backward(loss);
    for (name, &var) in pvars.names() {
        if let Some(grad) = grads.take(var) {
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("parameter gradient {name}"),
                });
            }
            match acc.get_mut(name) {
                Some(a) => *a += &grad,
                None => {
                    acc.insert(name.clone(), grad);
                }
            }
        }
    }
    Ok(())
}

/// One clip, one optimizer update.
pub fn train_step(
    model: &mut SegModel,
    optimizer: &mut Adam,
    clip: &ClipSample,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<StepReport> {
    if clip.frames.len() < 2 {
        return Err(Error::InvalidArgument("clip must have >= 2 frames".into()));
    }
    let mut g = Graph::new();
    let pvars = insert_params(&mut g, model, true);
    let (loss, direct, cyclic) = clip_loss_graph(&mut g, model, &pvars, clip, cfg, loss_cfg)?;
    let total = g.scalar(loss);
    if !total.is_finite() {
        return Err(Error::NonFinite {
            context: format!("training loss (direct {direct}, cyclic {cyclic})"),
        });
    }
    let mut grads = BTreeMap::new();
    accumulate_grads(&mut grads, &g, &pvars, loss)?;
    optimizer.step(model, &grads);
    Ok(StepReport {
        total,
        direct,
        cyclic,
    })
}

/// Per-epoch mean losses.
#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub direct: f64,
    pub cyclic: f64,
}

pub type History = Vec<EpochStats>;

/// Full training loop: `epochs` passes over the dataset, one sampled clip per
/// video per epoch, gradients averaged over `batch_size` clips per update.
/// Deterministic given the config seed. `on_checkpoint` fires every
/// `checkpoint_every` epochs (when nonzero) and always after the last epoch.
pub fn train<F>(
    model: &mut SegModel,
    dataset: &[VideoClip],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    mut on_checkpoint: F,
) -> Result<History>
where
    F: FnMut(usize, &SegModel),
{
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = Adam::new(cfg.lr, cfg.adam_beta1, cfg.adam_beta2);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);

        let mut stats = EpochStats {
            epoch,
            total: 0.0,
            direct: 0.0,
            cyclic: 0.0,
        };
        let mut clips_done = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            let mut grads: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
            let mut in_batch = 0usize;
            for &vi in chunk {
                let clip = sample_clip(&dataset[vi], epoch, cfg, &mut rng)?;
                let clip = if cfg.augment {
                    augment_clip(&clip, &mut rng)
                } else {
                    clip
                };
                let mut g = Graph::new();
                let pvars = insert_params(&mut g, model, true);
                let (loss, direct, cyclic) =
                    clip_loss_graph(&mut g, model, &pvars, &clip, cfg, loss_cfg)?;
                let total = g.scalar(loss);
                if !total.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("training loss at epoch {epoch}, video {vi}"),
                    });
                }
                accumulate_grads(&mut grads, &g, &pvars, loss)?;
                stats.total += total;
                stats.direct += direct;
                stats.cyclic += cyclic;
                in_batch += 1;
                clips_done += 1;
            }
            let scale = 1.0 / in_batch as f64;
            for grad in grads.values_mut() {
                grad.mapv_inplace(|v| v * scale);
            }
            optimizer.step(model, &grads);
        }

        let n = clips_done.max(1) as f64;
        stats.total /= n;
        stats.direct /= n;
        stats.cyclic /= n;
        history.push(stats);

        let last = epoch + 1 == cfg.epochs;
        if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) || last {
            on_checkpoint(epoch, model);
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{gen_synthetic, SynthConfig};
    use crate::net::Hyper;
    use ndarray::Array3;

    fn toy_video(frames: usize, h: usize, w: usize) -> VideoClip {
        gen_synthetic(&SynthConfig {
            n_videos: 1,
            frames_per_video: frames,
            resolution: (h, w),
            n_objects: 1,
            occluder_prob: 0.0,
            seed: 77,
            ..Default::default()
        })
        .unwrap()
        .remove(0)
    }

    #[test]
    fn max_interval_follows_curriculum() {
        let cfg = TrainConfig::default();
        assert_eq!(max_interval(0, &cfg), 5);
        assert_eq!(max_interval(19, &cfg), 5);
        assert_eq!(max_interval(20, &cfg), 10);
        assert_eq!(max_interval(45, &cfg), 15);
    }

    #[test]
    fn sampled_clips_respect_interval_bound() {
        let video = toy_video(60, 32, 32);
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let indices: Vec<usize> = {
                let clip = sample_clip(&video, 0, &cfg, &mut rng).unwrap();
                clip.frames.iter().map(|f| f.timestamp - 1).collect()
            };
            assert!(indices.windows(2).all(|w| w[0] < w[1]), "not sorted");
            let span = indices[indices.len() - 1] - indices[0];
            assert!(span <= 5, "span {span} exceeds interval 5");
        }
    }

    #[test]
    fn reference_frame_is_earliest() {
        let video = toy_video(40, 32, 32);
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for epoch in [0, 25, 80] {
            let clip = sample_clip(&video, epoch, &cfg, &mut rng).unwrap();
            let first = clip.frames[0].timestamp;
            assert!(clip.frames.iter().all(|f| f.timestamp >= first));
        }
    }

    #[test]
    fn sample_clip_rejects_short_videos() {
        let video = toy_video(2, 32, 32);
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(sample_clip(&video, 0, &cfg, &mut rng).is_err());
    }

    #[test]
    fn flip_twice_restores_clip() {
        let video = toy_video(3, 32, 32);
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let clip = sample_clip(&video, 0, &cfg, &mut rng).unwrap();

        let mut params = AugmentParams::identity();
        params.flip = true;
        let once = apply_augment(&clip, &params, &mut rng);
        let twice = apply_augment(&once, &params, &mut rng);
        for (a, b) in clip.frames.iter().zip(&twice.frames) {
            let diff = (&a.pixels - &b.pixels)
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-12);
        }
        for (a, b) in clip.gts.iter().zip(&twice.gts) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn identical_frames_receive_identical_transform() {
        // same pixels in, same pixels out for every clip member (photometric
        // noise disabled) proves the parameters are shared clip-wide
        let frame = Frame::new(
            Array3::from_shape_fn((3, 24, 24), |(c, y, x)| {
                ((c + 1) * (y * 24 + x)) as f64 / (3.0 * 576.0)
            }),
            1,
        )
        .unwrap();
        let gt = Array2::from_shape_fn((24, 24), |(y, x)| ((y > 8) && (x > 8)) as u8 as f64);
        let clip = ClipSample {
            frames: vec![
                frame.clone(),
                Frame::new(frame.pixels.clone(), 2).unwrap(),
                Frame::new(frame.pixels.clone(), 3).unwrap(),
            ],
            gts: vec![gt.clone(), gt.clone(), gt],
            object_id: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = AugmentParams::sample(&mut rng);
        params.noise_sigma = 0.0;
        let out = apply_augment(&clip, &params, &mut rng);
        for f in &out.frames[1..] {
            assert_eq!(out.frames[0].pixels, f.pixels);
        }
        for g in &out.gts[1..] {
            assert_eq!(&out.gts[0], g);
        }
    }

    #[test]
    fn rotation_changes_square_area_moderately() {
        let mut gt = Array2::zeros((48, 48));
        for y in 14..34 {
            for x in 14..34 {
                gt[(y, x)] = 1.0;
            }
        }
        let pixels = Array3::from_elem((3, 48, 48), 0.5);
        let clip = ClipSample {
            frames: vec![Frame::new(pixels, 1).unwrap()],
            gts: vec![gt.clone()],
            object_id: 1,
        };
        let before: f64 = gt.sum();
        for deg in [-15.0, -7.0, 7.0, 15.0] {
            let mut params = AugmentParams::identity();
            params.rotation_deg = deg;
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let out = apply_augment(&clip, &params, &mut rng);
            let after: f64 = out.gts[0].sum();
            let change = (after - before).abs() / before;
            assert!(change <= 0.15, "area change {change} at {deg} degrees");
        }
    }

    #[test]
    fn augment_clip_never_erases_foreground() {
        let video = toy_video(10, 32, 48);
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let clip = sample_clip(&video, 0, &cfg, &mut rng).unwrap();
            let out = augment_clip(&clip, &mut rng);
            for g in &out.gts {
                assert!(g.iter().any(|&v| v >= 0.5));
            }
        }
    }

    #[test]
    fn train_step_loss_is_finite_and_positive() {
        let video = toy_video(6, 32, 32);
        let cfg = TrainConfig {
            lr: 1e-4,
            ..Default::default()
        };
        let loss_cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let clip = sample_clip(&video, 0, &cfg, &mut rng).unwrap();
        let mut model = SegModel::init(Hyper { base_width: 8 }, 1);
        let mut opt = Adam::new(cfg.lr, cfg.adam_beta1, cfg.adam_beta2);
        let report = train_step(&mut model, &mut opt, &clip, &cfg, &loss_cfg).unwrap();
        assert!(report.total.is_finite() && report.total > 0.0);
        assert!(report.cyclic > 0.0);
    }

    #[test]
    fn zero_cycle_weight_reduces_to_direct_loss() {
        let video = toy_video(6, 32, 32);
        let base = TrainConfig::default();
        let loss_cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let clip = sample_clip(&video, 0, &base, &mut rng).unwrap();
        let model = SegModel::init(Hyper { base_width: 8 }, 1);

        let eval = |cycle_weight: f64| {
            let cfg = TrainConfig {
                cycle_weight,
                ..base.clone()
            };
            let mut g = Graph::new();
            let pvars = insert_params(&mut g, &model, true);
            let (loss, direct, cyclic) =
                clip_loss_graph(&mut g, &model, &pvars, &clip, &cfg, &loss_cfg).unwrap();
            (g.scalar(loss), direct, cyclic)
        };
        let (total_off, direct_off, cyclic_off) = eval(0.0);
        assert_eq!(cyclic_off, 0.0);
        assert!((total_off - direct_off).abs() < 1e-12);

        let (_, direct_on, _) = eval(1.0);
        // same forward branch regardless of the cyclic branch
        assert!((direct_on - direct_off).abs() < 1e-12);
    }

    #[test]
    fn cyclic_branch_alone_reaches_parameters() {
        // zero out the forward-branch loss: gradients must still arrive at
        // the parameters through the predicted mask in the cyclic reference
        let video = toy_video(4, 32, 32);
        let cfg = TrainConfig::default();
        let loss_cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let clip = sample_clip(&video, 0, &cfg, &mut rng).unwrap();
        let model = SegModel::init(Hyper { base_width: 8 }, 1);

        let mut g = Graph::new();
        let pvars = insert_params(&mut g, &model, true);
        let frame_vars: Vec<Var> = clip
            .frames
            .iter()
            .map(|f| g.constant(f.pixels.clone().into_dyn()))
            .collect();
        let first_gt = g.constant(clip.gts[0].clone().into_dyn());
        let refs = vec![RefVars {
            frame: frame_vars[0],
            mask: first_gt,
        }];
        let memory = encode_memory_g(&mut g, &pvars, &refs);
        let pred_t = forward_g(&mut g, &model, &pvars, memory, frame_vars[1]);
        let cyc_refs = vec![RefVars {
            frame: frame_vars[1],
            mask: pred_t,
        }];
        let cyc_memory = encode_memory_g(&mut g, &pvars, &cyc_refs);
        let pred_first = forward_g(&mut g, &model, &pvars, cyc_memory, frame_vars[0]);
        let loss = combined_loss_g(&mut g, pred_first, &clip.gts[0], &loss_cfg).unwrap();

        let mut grads = g.backward(loss);
        let mut nonzero = 0usize;
        for (_, &var) in pvars.names() {
            if let Some(grad) = grads.take(var) {
                if grad.iter().any(|&v| v != 0.0) {
                    nonzero += 1;
                }
            }
        }
        assert!(nonzero > 20, "only {nonzero} parameter tensors got gradient");
    }

    #[test]
    fn training_history_and_determinism() {
        let videos = gen_synthetic(&SynthConfig {
            n_videos: 4,
            frames_per_video: 8,
            resolution: (32, 32),
            n_objects: 1,
            occluder_prob: 0.0,
            seed: 21,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            lr: 1e-4,
            seed: 5,
            augment: true,
            ..Default::default()
        };
        let loss_cfg = LossConfig::default();

        let mut m1 = SegModel::init(Hyper { base_width: 8 }, 9);
        let h1 = train(&mut m1, &videos, &cfg, &loss_cfg, |_, _| {}).unwrap();
        assert_eq!(h1.len(), 2);

        let mut m2 = SegModel::init(Hyper { base_width: 8 }, 9);
        let h2 = train(&mut m2, &videos, &cfg, &loss_cfg, |_, _| {}).unwrap();
        assert!((h1[1].total - h2[1].total).abs() < 1e-6);
        for (name, p1) in m1.params() {
            assert_eq!(p1, &m2.params()[name], "param {name} diverged");
        }
    }
}
