//! Reference-noise robustness harness.
//!
//! Natural degradations (low-quality predictions, box templates) and
//! adversarial perturbations (FGSM, MI-FGSM) are injected into the `mem`
//! reference stream: every mask about to be appended to memory is replaced
//! by its noisy version, optionally passed through gradient correction as a
//! defense, and the resulting J&F is compared against the clean run.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::correct::{
    score_outputs, run_inference, AppendFilter, CorrectionConfig, InferOptions,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{combined_loss_g, LossConfig};
use crate::mask::{Frame, JFReport, Mask, MaskKind, ReferenceSet, VideoClip};
use crate::net::{encode_memory_g, forward_g, insert_params, RefVars, SegModel};
use crate::train::RefStrategy;

/// Attack protocol setting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackMode {
    /// Noise generated from the victim model itself.
    WhiteBox,
    /// Noise generated from a surrogate model.
    BlackBox,
}

/// Adversarial attack knobs. The paper's pixel budget of 20 on a 0-255 mask
/// scale becomes `20/255` on unit-interval masks.
#[derive(Clone, Copy, Debug)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub mi_iters: usize,
    pub mi_decay: f64,
    pub mode: AttackMode,
    /// Number of subsequent frames whose prediction loss the attack
    /// maximizes when linearizing around a reference mask.
    pub attack_window: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 20.0 / 255.0,
            mi_iters: 10,
            mi_decay: 1.0,
            mode: AttackMode::WhiteBox,
            attack_window: 2,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 {
            return Err(Error::InvalidArgument("epsilon must be positive".into()));
        }
        if self.mi_iters == 0 || self.attack_window == 0 {
            return Err(Error::InvalidArgument(
                "mi_iters and attack_window must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Natural degradation: replace a predicted mask with the prediction of a
/// weaker model on the same frame and references.
pub fn degrade_lowquality(
    model_weak: &SegModel,
    frame: &Frame,
    refs: &ReferenceSet,
) -> Result<Mask> {
    model_weak.segment(refs, frame)
}

/// Natural degradation: the tight bounding box of the binarized ground truth
/// filled with ones. An empty mask stays empty.
pub fn box_template(gt: &Mask) -> Mask {
    let bin = gt.binarize();
    let (h, w) = bin.dim();
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for ((y, x), &v) in bin.indexed_iter() {
        if v {
            bounds = Some(match bounds {
                None => (y, y, x, x),
                Some((y0, y1, x0, x1)) => (y0.min(y), y1.max(y), x0.min(x), x1.max(x)),
            });
        }
    }
    let mut values = Array2::zeros((h, w));
    if let Some((y0, y1, x0, x1)) = bounds {
        for y in y0..=y1 {
            for x in x0..=x1 {
                values[(y, x)] = 1.0;
            }
        }
    }
    Mask {
        values,
        object_id: gt.object_id,
        kind: MaskKind::Probability,
    }
}

/// Gradient of the summed prediction loss over `window` following frames with
/// respect to the reference mask at `frame_idx` (linearized: the perturbed
/// mask is the sole reference entry during the gradient computation).
fn attack_gradient(
    attack_model: &SegModel,
    video: &VideoClip,
    frame_idx: usize,
    mask_values: &Array2<f64>,
    object_id: u32,
    window: usize,
    loss_cfg: &LossConfig,
) -> Result<Array2<f64>> {
    let mut g = Graph::new();
    let p = insert_params(&mut g, attack_model, false);
    let frame_var = g.constant(video.frames[frame_idx].pixels.clone().into_dyn());
    let mask_var = g.leaf(mask_values.clone().into_dyn());
    let refs = vec![RefVars {
        frame: frame_var,
        mask: mask_var,
    }];
    let memory = encode_memory_g(&mut g, &p, &refs);

    let mut total = None;
    for idx in frame_idx + 1..=(frame_idx + window).min(video.len() - 1) {
        let Some(gt) = &video.gt[idx] else { continue };
        let Some(gt_mask) = gt.per_object.iter().find(|m| m.object_id == object_id) else {
            continue;
        };
        let query = g.constant(video.frames[idx].pixels.clone().into_dyn());
        let pred = forward_g(&mut g, attack_model, &p, memory, query);
        let loss = combined_loss_g(&mut g, pred, &gt_mask.values, loss_cfg)?;
        total = Some(match total {
            None => loss,
            Some(acc) => g.add(acc, loss),
        });
    }
    let Some(total) = total else {
        return Ok(Array2::zeros(mask_values.dim()));
    };
    let mut grads = g.backward(total);
    let grad = grads
        .take(mask_var)
        .expect("mask is a gradient leaf")
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("attack gradient at frame {frame_idx}"),
        });
    }
    Ok(grad)
}

/// Single-step FGSM on reference masks: one signed gradient-ascent step of
/// size epsilon on the windowed prediction loss, clamped to `[0,1]`.
pub fn fgsm_noise(
    attack_model: &SegModel,
    video: &VideoClip,
    masks_to_perturb: &[(usize, Mask)],
    cfg: &AttackConfig,
    loss_cfg: &LossConfig,
) -> Result<Vec<Mask>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(masks_to_perturb.len());
    for (frame_idx, mask) in masks_to_perturb {
        let grad = attack_gradient(
            attack_model,
            video,
            *frame_idx,
            &mask.values,
            mask.object_id,
            cfg.attack_window,
            loss_cfg,
        )?;
        let values = ndarray::Zip::from(&mask.values)
            .and(&grad)
            .map_collect(|&m, &g| (m + cfg.epsilon * g.signum()).clamp(0.0, 1.0));
        out.push(Mask {
            values,
            object_id: mask.object_id,
            kind: MaskKind::Probability,
        });
    }
    Ok(out)
}

/// Momentum-iterative FGSM: `mi_iters` signed steps of size
/// `epsilon / mi_iters` on the l1-normalized momentum-accumulated gradient,
/// confined to the epsilon ball around the original mask and `[0,1]`.
pub fn mi_fgsm_noise(
    attack_model: &SegModel,
    video: &VideoClip,
    masks_to_perturb: &[(usize, Mask)],
    cfg: &AttackConfig,
    loss_cfg: &LossConfig,
) -> Result<Vec<Mask>> {
    cfg.validate()?;
    let step = cfg.epsilon / cfg.mi_iters as f64;
    let mut out = Vec::with_capacity(masks_to_perturb.len());
    for (frame_idx, mask) in masks_to_perturb {
        let mut current = mask.values.clone();
        let mut momentum = Array2::<f64>::zeros(mask.values.dim());
        for _ in 0..cfg.mi_iters {
            let grad = attack_gradient(
                attack_model,
                video,
                *frame_idx,
                &current,
                mask.object_id,
                cfg.attack_window,
                loss_cfg,
            )?;
            let l1: f64 = grad.iter().map(|v| v.abs()).sum();
            let normalized = if l1 > 0.0 { &grad / l1 } else { grad };
            momentum = &momentum * cfg.mi_decay + &normalized;
            ndarray::Zip::from(&mut current)
                .and(&momentum)
                .and(&mask.values)
                .for_each(|c, &m, &orig| {
                    let stepped = *c + step * m.signum();
                    *c = stepped
                        .clamp(orig - cfg.epsilon, orig + cfg.epsilon)
                        .clamp(0.0, 1.0);
                });
        }
        out.push(Mask {
            values: current,
            object_id: mask.object_id,
            kind: MaskKind::Probability,
        });
    }
    Ok(out)
}

/// Noise kinds injected into the `mem` reference stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    None,
    LowQuality,
    BoxTemplate,
    Fgsm,
    MiFgsm,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "lowq" | "low_quality" => Ok(Self::LowQuality),
            "box" | "box_template" => Ok(Self::BoxTemplate),
            "fgsm" => Ok(Self::Fgsm),
            "mifgsm" | "mi_fgsm" => Ok(Self::MiFgsm),
            other => Err(Error::InvalidArgument(format!(
                "unknown noise kind {other:?} (expected none|lowq|box|fgsm|mifgsm)"
            ))),
        }
    }
}

struct BoxFilter<'a> {
    video: &'a VideoClip,
}

impl AppendFilter for BoxFilter<'_> {
    fn filter(
        &mut self,
        frame_idx: usize,
        object_id: u32,
        mask: &Mask,
        _frame: &Frame,
        _refs: &ReferenceSet,
    ) -> Result<Mask> {
        match &self.video.gt[frame_idx] {
            Some(gt) => {
                let gt_mask = gt
                    .per_object
                    .iter()
                    .find(|m| m.object_id == object_id)
                    .ok_or_else(|| {
                        Error::Dataset(format!("no gt for object {object_id} at {frame_idx}"))
                    })?;
                Ok(box_template(gt_mask))
            }
            None => Ok(mask.clone()),
        }
    }
}

struct LowQualityFilter<'a> {
    weak: &'a SegModel,
}

impl AppendFilter for LowQualityFilter<'_> {
    fn filter(
        &mut self,
        _frame_idx: usize,
        _object_id: u32,
        _mask: &Mask,
        frame: &Frame,
        refs: &ReferenceSet,
    ) -> Result<Mask> {
        degrade_lowquality(self.weak, frame, refs)
    }
}

struct ReplacementFilter {
    replacements: BTreeMap<(usize, u32), Mask>,
}

impl AppendFilter for ReplacementFilter {
    fn filter(
        &mut self,
        frame_idx: usize,
        object_id: u32,
        mask: &Mask,
        _frame: &Frame,
        _refs: &ReferenceSet,
    ) -> Result<Mask> {
        Ok(self
            .replacements
            .get(&(frame_idx, object_id))
            .cloned()
            .unwrap_or_else(|| mask.clone()))
    }
}

/// Clean-vs-attacked evaluation of one protocol run.
#[derive(Clone, Debug)]
pub struct ProtocolRow {
    pub video: String,
    pub clean: JFReport,
    pub attacked: JFReport,
}

#[derive(Clone, Debug)]
pub struct ProtocolOutcome {
    pub rows: Vec<ProtocolRow>,
    pub clean: JFReport,
    pub attacked: JFReport,
}

/// Run the MEM-reference noise protocol over a dataset.
///
/// For each video: a clean `mem`-strategy pass, then an attacked pass where
/// every appended mask is first replaced by its noisy version (generated by
/// `attack_model` for the adversarial kinds, which is the victim in white-box
/// mode and the surrogate in black-box). When `with_gc` is set, the noisy
/// mask is gradient-corrected before it enters the memory.
#[allow(clippy::too_many_arguments)]
pub fn run_attack_protocol(
    victim: &SegModel,
    attack_model: &SegModel,
    weak_model: Option<&SegModel>,
    noise: NoiseKind,
    cfg: &AttackConfig,
    videos: &[VideoClip],
    with_gc: bool,
    mem_stride: usize,
    gc_cfg: &CorrectionConfig,
    loss_cfg: &LossConfig,
) -> Result<ProtocolOutcome> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(Error::EmptyInput("attack protocol videos"));
    }

    let clean_opts = InferOptions {
        strategy: RefStrategy::Mem,
        mem_stride,
        correction: None,
        gc_on_append: None,
        loss_cfg: *loss_cfg,
    };
    let attacked_opts = InferOptions {
        gc_on_append: with_gc.then_some(*gc_cfg),
        ..clean_opts.clone()
    };

    let mut rows = Vec::with_capacity(videos.len());
    for video in videos {
        let initial = video.gt[0].as_ref().ok_or_else(|| {
            Error::Dataset(format!("video {} lacks frame-1 annotation", video.name))
        })?;

        let clean_run = run_inference(victim, video, initial, &clean_opts, None)?;
        let clean_report = score_outputs(video, &clean_run.outputs)?;

        let attacked_report = match noise {
            NoiseKind::None => {
                let rerun = run_inference(victim, video, initial, &attacked_opts, None)?;
                score_outputs(video, &rerun.outputs)?
            }
            NoiseKind::BoxTemplate => {
                let mut filter = BoxFilter { video };
                let run =
                    run_inference(victim, video, initial, &attacked_opts, Some(&mut filter))?;
                score_outputs(video, &run.outputs)?
            }
            NoiseKind::LowQuality => {
                let weak = weak_model.ok_or_else(|| {
                    Error::InvalidArgument("low-quality noise requires a weak model".into())
                })?;
                let mut filter = LowQualityFilter { weak };
                let run =
                    run_inference(victim, video, initial, &attacked_opts, Some(&mut filter))?;
                score_outputs(video, &run.outputs)?
            }
            NoiseKind::Fgsm | NoiseKind::MiFgsm => {
                // linearize around the clean run's appended masks
                let targets: Vec<(usize, Mask)> = clean_run
                    .appended
                    .iter()
                    .map(|(idx, _, m)| (*idx, m.clone()))
                    .collect();
                let perturbed = match noise {
                    NoiseKind::Fgsm => {
                        fgsm_noise(attack_model, video, &targets, cfg, loss_cfg)?
                    }
                    _ => mi_fgsm_noise(attack_model, video, &targets, cfg, loss_cfg)?,
                };
                let replacements = clean_run
                    .appended
                    .iter()
                    .zip(perturbed)
                    .map(|((idx, id, _), m)| ((*idx, *id), m))
                    .collect();
                let mut filter = ReplacementFilter { replacements };
                let run =
                    run_inference(victim, video, initial, &attacked_opts, Some(&mut filter))?;
                score_outputs(video, &run.outputs)?
            }
        };

        rows.push(ProtocolRow {
            video: video.name.clone(),
            clean: clean_report,
            attacked: attacked_report,
        });
    }

    let mean = |f: &dyn Fn(&ProtocolRow) -> JFReport| -> JFReport {
        let js: Vec<f64> = rows.iter().map(|r| f(r).mean_j).collect();
        let fs: Vec<f64> = rows.iter().map(|r| f(r).mean_f).collect();
        crate::mask::jf_mean(&js, &fs).expect("nonempty rows")
    };
    Ok(ProtocolOutcome {
        clean: mean(&|r| r.clean),
        attacked: mean(&|r| r.attacked),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{gen_synthetic, SynthConfig};
    use crate::net::Hyper;

    fn toy() -> (SegModel, VideoClip) {
        let video = gen_synthetic(&SynthConfig {
            n_videos: 1,
            frames_per_video: 8,
            resolution: (32, 32),
            n_objects: 1,
            occluder_prob: 0.0,
            seed: 51,
            ..Default::default()
        })
        .unwrap()
        .remove(0);
        (SegModel::init(Hyper { base_width: 8 }, 29), video)
    }

    #[test]
    fn box_template_cases() {
        // a full rectangle is a fixed point
        let mut rect = Array2::zeros((6, 8));
        for y in 1..4 {
            for x in 2..7 {
                rect[(y, x)] = 1.0;
            }
        }
        let m = Mask::probability(rect.clone(), 1).unwrap();
        assert_eq!(box_template(&m).values, rect);

        // two diagonal pixels span the whole grid
        let mut diag = Array2::zeros((4, 4));
        diag[(0, 0)] = 1.0;
        diag[(3, 3)] = 1.0;
        let m = Mask::probability(diag, 1).unwrap();
        assert!(box_template(&m).values.iter().all(|&v| v == 1.0));

        // empty stays empty
        let empty = Mask::probability(Array2::zeros((4, 4)), 1).unwrap();
        assert!(box_template(&empty).values.iter().all(|&v| v == 0.0));

        // superset of an L-shape
        let mut ell = Array2::zeros((8, 8));
        for y in 2..7 {
            ell[(y, 2)] = 1.0;
        }
        for x in 2..6 {
            ell[(6, x)] = 1.0;
        }
        let m = Mask::probability(ell.clone(), 1).unwrap();
        let b = box_template(&m);
        assert!(b.values.sum() >= ell.sum());
        for (idx, &v) in ell.indexed_iter() {
            if v == 1.0 {
                assert_eq!(b.values[idx], 1.0);
            }
        }
    }

    #[test]
    fn weak_equals_strong_is_identity_degradation() {
        let (model, video) = toy();
        let refs = ReferenceSet::single(
            video.frames[0].clone(),
            video.gt[0].as_ref().unwrap().per_object[0].clone(),
        )
        .unwrap();
        let strong = model.segment(&refs, &video.frames[1]).unwrap();
        let weak = degrade_lowquality(&model, &video.frames[1], &refs).unwrap();
        assert_eq!(strong.values, weak.values);
        assert!(weak.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn zero_epsilon_like_bound_holds() {
        let (model, video) = toy();
        let mask = video.gt[2].as_ref().unwrap().per_object[0].clone();
        let targets = vec![(2usize, mask.clone())];
        let loss_cfg = LossConfig::default();

        // tiny epsilon: perturbation bounded by it
        for eps in [1e-6, 20.0 / 255.0] {
            let cfg = AttackConfig {
                epsilon: eps,
                ..Default::default()
            };
            let out = fgsm_noise(&model, &video, &targets, &cfg, &loss_cfg).unwrap();
            let linf = out[0]
                .values
                .iter()
                .zip(mask.values.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(linf <= eps + 1e-12, "linf {linf} > eps {eps}");
        }
        let cfg = AttackConfig::default();
        assert!(AttackConfig {
            epsilon: 0.0,
            ..cfg
        }
        .validate()
        .is_err());
    }

    #[test]
    fn mi_fgsm_bound_and_degenerate_schedule() {
        let (model, video) = toy();
        let mask = video.gt[2].as_ref().unwrap().per_object[0].clone();
        let targets = vec![(2usize, mask.clone())];
        let loss_cfg = LossConfig::default();

        let cfg = AttackConfig::default();
        let out = mi_fgsm_noise(&model, &video, &targets, &cfg, &loss_cfg).unwrap();
        let linf = out[0]
            .values
            .iter()
            .zip(mask.values.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(linf <= cfg.epsilon + 1e-12);

        // one iteration with zero decay reduces to fgsm
        let degenerate = AttackConfig {
            mi_iters: 1,
            mi_decay: 0.0,
            ..cfg
        };
        let mi = mi_fgsm_noise(&model, &video, &targets, &degenerate, &loss_cfg).unwrap();
        let fg = fgsm_noise(&model, &video, &targets, &degenerate, &loss_cfg).unwrap();
        assert_eq!(mi[0].values, fg[0].values);
    }

    #[test]
    fn protocol_with_no_noise_matches_clean() {
        let (model, video) = toy();
        let out = run_attack_protocol(
            &model,
            &model,
            None,
            NoiseKind::None,
            &AttackConfig::default(),
            std::slice::from_ref(&video),
            false,
            3,
            &CorrectionConfig::default(),
            &LossConfig::default(),
        )
        .unwrap();
        assert_eq!(out.rows.len(), 1);
        assert!((out.clean.jf - out.attacked.jf).abs() < 1e-12);
        assert!((out.clean.mean_j - out.attacked.mean_j).abs() < 1e-12);
        assert!((out.clean.mean_f - out.attacked.mean_f).abs() < 1e-12);
    }

    #[test]
    fn protocol_report_contains_both_metrics_per_condition() {
        let (model, video) = toy();
        let out = run_attack_protocol(
            &model,
            &model,
            None,
            NoiseKind::BoxTemplate,
            &AttackConfig::default(),
            std::slice::from_ref(&video),
            false,
            3,
            &CorrectionConfig::default(),
            &LossConfig::default(),
        )
        .unwrap();
        for row in &out.rows {
            for rep in [&row.clean, &row.attacked] {
                assert!(rep.mean_j.is_finite());
                assert!(rep.mean_f.is_finite());
                assert!((rep.jf - 0.5 * (rep.mean_j + rep.mean_f)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn protocol_is_deterministic() {
        let (model, video) = toy();
        let run = || {
            run_attack_protocol(
                &model,
                &model,
                None,
                NoiseKind::Fgsm,
                &AttackConfig {
                    attack_window: 1,
                    ..Default::default()
                },
                std::slice::from_ref(&video),
                false,
                3,
                &CorrectionConfig::default(),
                &LossConfig::default(),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.attacked.jf, b.attacked.jf);
        assert_eq!(a.clean.jf, b.clean.jf);
    }
}
