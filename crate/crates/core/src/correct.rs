//! Online inference with gradient correction.
//!
//! Per frame the driver predicts each object against its reference memory,
//! periodically refines the predicted mask by gradient descent on the
//! regularized first-frame reconstruction error, aggregates, and feeds the
//! aggregated masks back into the references per the configured policy.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{combined_loss_g, smooth_loss_g, LossConfig};
use crate::mask::{
    jaccard, contour_f, default_contour_tolerance, jf_mean, soft_aggregate, Frame, JFReport, Mask,
    MaskKind, MultiObjectMask, ReferenceSet, VideoClip,
};
use crate::net::{encode_memory_g, forward_g, insert_params, MemoryBank, RefVars, SegModel};
use crate::train::RefStrategy;

/// Mask constraint applied between correction steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClampMode {
    /// Clamp iterates to `[0,1]` (the memory encoder consumes them as
    /// probability maps).
    UnitInterval,
    /// Leave iterates free (receptive-field descent).
    Unbounded,
}

/// Gradient-correction knobs.
#[derive(Clone, Copy, Debug)]
pub struct CorrectionConfig {
    /// Step size of the mask update.
    pub alpha: f64,
    /// Number of descent iterations per corrected frame.
    pub n_iters: usize,
    /// Correct once every this many frames.
    pub every_k: usize,
    /// Weight of the smoothness regularizer.
    pub lambda: f64,
    pub clamp: ClampMode,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            alpha: 180.0,
            n_iters: 10,
            every_k: 5,
            lambda: 0.75,
            clamp: ClampMode::UnitInterval,
        }
    }
}

/// Result of a mask-descent run.
#[derive(Clone, Debug)]
pub struct DescentResult {
    pub mask: Array2<f64>,
    /// Objective value at every iterate, starting with the initial mask.
    pub trajectory: Vec<f64>,
    /// Set when a non-finite gradient stopped the descent early.
    pub warned: bool,
}

/// Objective value and gradient of the regularized reconstruction error with
/// respect to the candidate mask.
fn objective_with_grad(
    model: &SegModel,
    query_frame: &Frame,
    candidate: &Array2<f64>,
    first_frame: &Frame,
    first_gt: &Array2<f64>,
    lambda: f64,
    loss_cfg: &LossConfig,
) -> Result<(f64, Array2<f64>)> {
    let mut g = Graph::new();
    let p = insert_params(&mut g, model, false);
    let frame_var = g.constant(query_frame.pixels.clone().into_dyn());
    let mask_var = g.leaf(candidate.clone().into_dyn());
    let refs = vec![RefVars {
        frame: frame_var,
        mask: mask_var,
    }];
    let memory = encode_memory_g(&mut g, &p, &refs);
    let query = g.constant(first_frame.pixels.clone().into_dyn());
    let pred = forward_g(&mut g, model, &p, memory, query);
    let rec = combined_loss_g(&mut g, pred, first_gt, loss_cfg)?;
    let loss = if lambda > 0.0 {
        let smooth = smooth_loss_g(&mut g, mask_var)?;
        let sw = g.scale(smooth, lambda);
        g.add(rec, sw)
    } else {
        rec
    };
    let value = g.scalar(loss);
    let mut grads = g.backward(loss);
    let grad = grads
        .take(mask_var)
        .expect("mask is a gradient leaf")
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    Ok((value, grad))
}

/// Reconstruction objective of Eq-style gradient correction: loss of
/// re-predicting the first-frame mask from `(X_t, candidate)` plus
/// `lambda * smooth(candidate)`.
pub fn reconstruction_objective(
    model: &SegModel,
    query_frame: &Frame,
    candidate: &Mask,
    first_frame: &Frame,
    first_gt: &Mask,
    lambda: f64,
    loss_cfg: &LossConfig,
) -> Result<f64> {
    reconstruction_objective_with_grad(
        model,
        query_frame,
        candidate,
        first_frame,
        first_gt,
        lambda,
        loss_cfg,
    )
    .map(|(v, _)| v)
}

/// As [`reconstruction_objective`] but also returning the gradient with
/// respect to the candidate mask values.
pub fn reconstruction_objective_with_grad(
    model: &SegModel,
    query_frame: &Frame,
    candidate: &Mask,
    first_frame: &Frame,
    first_gt: &Mask,
    lambda: f64,
    loss_cfg: &LossConfig,
) -> Result<(f64, Array2<f64>)> {
    objective_with_grad(
        model,
        query_frame,
        &candidate.values,
        first_frame,
        &first_gt.values,
        lambda,
        loss_cfg,
    )
}

/// Iterative gradient descent on a mask against a fixed reconstruction
/// target. Shared by gradient correction and cycle-ERF.
#[allow(clippy::too_many_arguments)]
pub fn descend_on_mask(
    model: &SegModel,
    ref_frame: &Frame,
    init: Array2<f64>,
    target_frame: &Frame,
    target_gt: &Array2<f64>,
    steps: usize,
    alpha: f64,
    lambda: f64,
    clamp: ClampMode,
    loss_cfg: &LossConfig,
) -> Result<DescentResult> {
    let mut mask = init;
    let mut trajectory = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let (value, grad) = objective_with_grad(
            model, ref_frame, &mask, target_frame, target_gt, lambda, loss_cfg,
        )?;
        trajectory.push(value);
        if grad.iter().any(|v| !v.is_finite()) || !value.is_finite() {
            return Ok(DescentResult {
                mask,
                trajectory,
                warned: true,
            });
        }
        mask.zip_mut_with(&grad, |m, &g| *m -= alpha * g);
        if clamp == ClampMode::UnitInterval {
            mask.mapv_inplace(|v| v.clamp(0.0, 1.0));
        }
    }
    let (final_value, _) = objective_with_grad(
        model, ref_frame, &mask, target_frame, target_gt, lambda, loss_cfg,
    )?;
    trajectory.push(final_value);
    Ok(DescentResult {
        mask,
        trajectory,
        warned: false,
    })
}

/// Refine a predicted mask by `n_iters` descent steps on the reconstruction
/// objective. Returns the final iterate and the objective trajectory.
pub fn correct_mask(
    model: &SegModel,
    query_frame: &Frame,
    initial: &Mask,
    first_frame: &Frame,
    first_gt: &Mask,
    cfg: &CorrectionConfig,
    loss_cfg: &LossConfig,
) -> Result<(Mask, Vec<f64>, bool)> {
    let result = descend_on_mask(
        model,
        query_frame,
        initial.values.clone(),
        first_frame,
        &first_gt.values,
        cfg.n_iters,
        cfg.alpha,
        cfg.lambda,
        cfg.clamp,
        loss_cfg,
    )?;
    let kind = match cfg.clamp {
        ClampMode::UnitInterval => MaskKind::Probability,
        ClampMode::Unbounded => MaskKind::Unconstrained,
    };
    Ok((
        Mask {
            values: result.mask,
            object_id: initial.object_id,
            kind,
        },
        result.trajectory,
        result.warned,
    ))
}

// ---------------------------------------------------------------------------
// sequential inference driver
// ---------------------------------------------------------------------------

/// Options for the sequential driver.
#[derive(Clone, Debug)]
pub struct InferOptions {
    pub strategy: RefStrategy,
    pub mem_stride: usize,
    /// Periodic gradient correction; fires when `(t-1) % every_k == 0`.
    pub correction: Option<CorrectionConfig>,
    /// Defense-style correction applied to masks right before they are
    /// appended to `mem` references (after any noise filter).
    pub gc_on_append: Option<CorrectionConfig>,
    pub loss_cfg: LossConfig,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            strategy: RefStrategy::FirstPrev,
            mem_stride: 5,
            correction: None,
            gc_on_append: None,
            loss_cfg: LossConfig::default(),
        }
    }
}

/// Intercepts masks about to be appended to the memory reference stream.
pub trait AppendFilter {
    fn filter(
        &mut self,
        frame_idx: usize,
        object_id: u32,
        mask: &Mask,
        frame: &Frame,
        refs: &ReferenceSet,
    ) -> Result<Mask>;
}

/// One periodic correction event.
#[derive(Clone, Debug)]
pub struct CorrectionRecord {
    pub frame_idx: usize,
    pub object_id: u32,
    pub before: Array2<f64>,
    pub after: Array2<f64>,
    pub trajectory: Vec<f64>,
    pub warned: bool,
}

/// Driver output: per-frame aggregated masks plus correction bookkeeping.
#[derive(Debug)]
pub struct InferenceOutcome {
    /// One entry per frame; index 0 is the provided initial annotation.
    pub outputs: Vec<MultiObjectMask>,
    pub corrections: Vec<CorrectionRecord>,
    /// Masks appended to memory under the `mem` strategy.
    pub appended: Vec<(usize, u32, Mask)>,
}

struct ObjectState {
    refs: ReferenceSet,
    bank: MemoryBank,
    first_bank: MemoryBank,
    prev: Option<(Frame, Mask)>,
}

/// Sequential semi-supervised inference over one video.
///
/// `initial` is the frame-1 annotation (the semi-supervised contract). Mask
/// probabilities are aggregated per frame; reference updates use the
/// aggregated per-object probabilities, optionally passed through
/// `append_filter` and defense correction for the `mem` strategy.
pub fn run_inference(
    model: &SegModel,
    video: &VideoClip,
    initial: &MultiObjectMask,
    opts: &InferOptions,
    mut append_filter: Option<&mut dyn AppendFilter>,
) -> Result<InferenceOutcome> {
    video.validate()?;
    if video.frames.is_empty() {
        return Err(Error::EmptyInput("video"));
    }
    let first_frame = &video.frames[0];
    if initial.background.shape() != first_frame.shape() {
        return Err(Error::shape(
            format!("{:?}", first_frame.shape()),
            format!("{:?}", initial.background.shape()),
        ));
    }

    let mut states: BTreeMap<u32, ObjectState> = BTreeMap::new();
    let mut first_gts: BTreeMap<u32, Mask> = BTreeMap::new();
    for m in &initial.per_object {
        let refs = ReferenceSet::single(first_frame.clone(), m.clone())?;
        let bank = model.encode_memory(&refs)?;
        states.insert(
            m.object_id,
            ObjectState {
                refs,
                first_bank: bank.clone(),
                bank,
                prev: None,
            },
        );
        first_gts.insert(m.object_id, m.clone());
    }

    let mut outputs = Vec::with_capacity(video.len());
    outputs.push(initial.clone());
    let mut corrections = Vec::new();
    let mut appended = Vec::new();

    for idx in 1..video.len() {
        let t = idx + 1; // 1-based timestamp
        let frame = &video.frames[idx];

        // predict each object from its current memory
        let mut per_object: Vec<Mask> = Vec::with_capacity(states.len());
        for (&id, state) in states.iter() {
            let pred = model.segment_with_bank(&state.bank, frame, id)?;
            per_object.push(pred);
        }

        // periodic gradient correction on the raw predictions
        if let Some(ccfg) = &opts.correction {
            if (t - 1) % ccfg.every_k == 0 {
                for pred in per_object.iter_mut() {
                    let first_gt = &first_gts[&pred.object_id];
                    match correct_mask(model, frame, pred, first_frame, first_gt, ccfg, &opts.loss_cfg)
                    {
                        Ok((corrected, trajectory, warned)) => {
                            corrections.push(CorrectionRecord {
                                frame_idx: idx,
                                object_id: pred.object_id,
                                before: pred.values.clone(),
                                after: corrected.values.clone(),
                                trajectory,
                                warned,
                            });
                            if !warned {
                                *pred = corrected;
                            }
                        }
                        // a failed correction falls back to the uncorrected mask
                        Err(Error::NonFinite { .. }) => {}
                        Err(e) => return Err(e),
                    }
                }
            }
        }

        let aggregated = soft_aggregate(&per_object)?;
        outputs.push(aggregated.clone());

        // reference updates with the aggregated per-object probabilities
        for agg_mask in &aggregated.per_object {
            let id = agg_mask.object_id;
            let state = states.get_mut(&id).unwrap();
            match opts.strategy {
                RefStrategy::First => {}
                RefStrategy::Prev | RefStrategy::FirstPrev => {
                    state.prev = Some((frame.clone(), agg_mask.clone()));
                    let prev_bank = model.encode_entry(frame, agg_mask)?;
                    state.bank = match opts.strategy {
                        RefStrategy::Prev => prev_bank,
                        _ => {
                            let mut b = state.first_bank.clone();
                            b.append(&prev_bank);
                            b
                        }
                    };
                    state.refs = match opts.strategy {
                        RefStrategy::Prev => {
                            ReferenceSet::single(frame.clone(), agg_mask.clone())?
                        }
                        _ => ReferenceSet::new(vec![
                            (first_frame.clone(), first_gts[&id].clone()),
                            (frame.clone(), agg_mask.clone()),
                        ])?,
                    };
                }
                RefStrategy::Mem => {
                    if (t - 1) % opts.mem_stride == 0 {
                        let mut to_append = agg_mask.clone();
                        if let Some(filter) = append_filter.as_deref_mut() {
                            to_append =
                                filter.filter(idx, id, &to_append, frame, &state.refs)?;
                        }
                        if let Some(gcfg) = &opts.gc_on_append {
                            let first_gt = &first_gts[&id];
                            if let Ok((corrected, _, warned)) = correct_mask(
                                model,
                                frame,
                                &to_append,
                                first_frame,
                                first_gt,
                                gcfg,
                                &opts.loss_cfg,
                            ) {
                                if !warned {
                                    to_append = corrected;
                                }
                            }
                        }
                        appended.push((idx, id, to_append.clone()));
                        state.refs.push(frame.clone(), to_append.clone());
                        let new_rows = model.encode_entry(frame, &to_append)?;
                        state.bank.append(&new_rows);
                    }
                }
            }
        }
    }

    Ok(InferenceOutcome {
        outputs,
        corrections,
        appended,
    })
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

/// Per-video evaluation row.
#[derive(Clone, Debug)]
pub struct EvalRow {
    pub video: String,
    pub report: JFReport,
}

/// Dataset evaluation result.
#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub rows: Vec<EvalRow>,
    pub overall: JFReport,
}

/// Evaluate a model over annotated videos: predictions for frames 2..T are
/// scored against ground truth with J (region) and F (contour), per object,
/// then averaged per video and across videos.
pub fn evaluate(
    model: &SegModel,
    videos: &[VideoClip],
    opts: &InferOptions,
) -> Result<EvalOutcome> {
    if videos.is_empty() {
        return Err(Error::EmptyInput("evaluation videos"));
    }
    let mut rows = Vec::with_capacity(videos.len());
    for video in videos {
        let initial = video.gt[0]
            .as_ref()
            .ok_or_else(|| Error::Dataset(format!("video {} lacks frame-1 annotation", video.name)))?;
        let outcome = run_inference(model, video, initial, opts, None)?;
        rows.push(EvalRow {
            video: video.name.clone(),
            report: score_outputs(video, &outcome.outputs)?,
        });
    }
    let js: Vec<f64> = rows.iter().map(|r| r.report.mean_j).collect();
    let fs: Vec<f64> = rows.iter().map(|r| r.report.mean_f).collect();
    let overall = jf_mean(&js, &fs)?;
    Ok(EvalOutcome { rows, overall })
}

/// Score per-frame outputs against a video's ground truth (frames 2..T that
/// carry annotations).
pub fn score_outputs(video: &VideoClip, outputs: &[MultiObjectMask]) -> Result<JFReport> {
    let (h, w) = video.frames[0].shape();
    let tol = default_contour_tolerance(h, w);
    let mut per_object_j = Vec::new();
    let mut per_object_f = Vec::new();
    for &id in &video.object_ids {
        let mut js = Vec::new();
        let mut fs = Vec::new();
        for idx in 1..video.len() {
            let Some(gt) = &video.gt[idx] else { continue };
            let gt_bin = Mask {
                values: gt.object_binary(id).mapv(|b| b as u8 as f64),
                object_id: id,
                kind: MaskKind::Probability,
            };
            let pred_bin = Mask {
                values: outputs[idx].object_binary(id).mapv(|b| b as u8 as f64),
                object_id: id,
                kind: MaskKind::Probability,
            };
            js.push(jaccard(&pred_bin, &gt_bin)?);
            fs.push(contour_f(&pred_bin, &gt_bin, tol)?);
        }
        if !js.is_empty() {
            let r = jf_mean(&js, &fs)?;
            per_object_j.push(r.mean_j);
            per_object_f.push(r.mean_f);
        }
    }
    jf_mean(&per_object_j, &per_object_f)
}
