//! Mask and frame types, multi-object soft aggregation, and the J/F metrics.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Clamp applied to per-object probabilities before the odds transform.
const ODDS_CLAMP: f64 = 1e-5;

/// How a mask's values are to be interpreted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    /// Values constrained to `[0,1]`.
    Probability,
    /// Free real values; only valid inside optimization loops
    /// (gradient correction, receptive-field descent).
    Unconstrained,
}

/// Single-object soft mask over an `H x W` grid.
#[derive(Clone, Debug)]
pub struct Mask {
    pub values: Array2<f64>,
    pub object_id: u32,
    pub kind: MaskKind,
}

impl Mask {
    pub fn probability(values: Array2<f64>, object_id: u32) -> Result<Self> {
        if object_id < 1 {
            return Err(Error::InvalidArgument("object_id must be >= 1".into()));
        }
        if values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument(
                "probability mask values must lie in [0,1]".into(),
            ));
        }
        Ok(Self {
            values,
            object_id,
            kind: MaskKind::Probability,
        })
    }

    pub fn unconstrained(values: Array2<f64>, object_id: u32) -> Self {
        Self {
            values,
            object_id,
            kind: MaskKind::Unconstrained,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        let d = self.values.dim();
        (d.0, d.1)
    }

    /// Binary view at threshold 0.5; ties count as foreground.
    pub fn binarize(&self) -> Array2<bool> {
        self.values.mapv(|v| v >= 0.5)
    }

    pub fn foreground_area(&self) -> usize {
        self.values.iter().filter(|&&v| v >= 0.5).count()
    }
}

/// One RGB video frame with values in `[0,1]`, stored channel-first `(3,H,W)`.
#[derive(Clone, Debug)]
pub struct Frame {
    pub pixels: Array3<f64>,
    pub timestamp: usize,
}

impl Frame {
    pub fn new(pixels: Array3<f64>, timestamp: usize) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 3 {
            return Err(Error::shape("(3,H,W)", format!("({c},{h},{w})")));
        }
        if h < 8 || w < 8 {
            return Err(Error::InvalidArgument(format!(
                "frame resolution {h}x{w} below minimum 8x8"
            )));
        }
        if timestamp < 1 {
            return Err(Error::InvalidArgument("timestamp must be >= 1".into()));
        }
        if pixels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument(
                "frame pixel values must lie in [0,1]".into(),
            ));
        }
        Ok(Self { pixels, timestamp })
    }

    pub fn shape(&self) -> (usize, usize) {
        let (_, h, w) = self.pixels.dim();
        (h, w)
    }
}

/// Per-pixel distribution over background and all objects.
#[derive(Clone, Debug)]
pub struct MultiObjectMask {
    pub per_object: Vec<Mask>,
    pub background: Mask,
}

impl MultiObjectMask {
    /// Hard labeling: 0 for background, else the argmax object id.
    pub fn argmax_labels(&self) -> Array2<u32> {
        let (h, w) = self.background.shape();
        let mut labels = Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let mut best = self.background.values[(y, x)];
                let mut id = 0u32;
                for m in &self.per_object {
                    let v = m.values[(y, x)];
                    if v > best {
                        best = v;
                        id = m.object_id;
                    }
                }
                labels[(y, x)] = id;
            }
        }
        labels
    }

    /// Binary mask of one object under the argmax labeling.
    pub fn object_binary(&self, object_id: u32) -> Array2<bool> {
        self.argmax_labels().mapv(|l| l == object_id)
    }
}

/// Ordered (frame, mask) pairs used as segmentation guidance.
#[derive(Clone, Debug, Default)]
pub struct ReferenceSet {
    pub entries: Vec<(Frame, Mask)>,
    pub capacity: Option<usize>,
}

impl ReferenceSet {
    pub fn new(entries: Vec<(Frame, Mask)>) -> Result<Self> {
        let set = Self {
            entries,
            capacity: None,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn single(frame: Frame, mask: Mask) -> Result<Self> {
        Self::new(vec![(frame, mask)])
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::EmptyInput("reference set"));
        }
        let base = self.entries[0].0.shape();
        for (f, m) in &self.entries {
            if f.shape() != base || m.shape() != base {
                return Err(Error::shape(
                    format!("{base:?} for all reference entries"),
                    format!("frame {:?} / mask {:?}", f.shape(), m.shape()),
                ));
            }
        }
        Ok(())
    }

    pub fn push(&mut self, frame: Frame, mask: Mask) {
        self.entries.push((frame, mask));
        if let Some(cap) = self.capacity {
            while self.entries.len() > cap {
                self.entries.remove(0);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Frame sequence with optional per-frame ground truth.
#[derive(Clone, Debug)]
pub struct VideoClip {
    pub frames: Vec<Frame>,
    /// One entry per frame; `None` when no annotation exists for that frame.
    pub gt: Vec<Option<MultiObjectMask>>,
    pub object_ids: Vec<u32>,
    /// Resolution the source material had before resizing, if different.
    pub original_size: Option<(usize, usize)>,
    pub name: String,
}

impl VideoClip {
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::EmptyInput("video clip"));
        }
        if self.gt.len() != self.frames.len() {
            return Err(Error::shape(
                format!("{} gt slots", self.frames.len()),
                format!("{}", self.gt.len()),
            ));
        }
        for pair in self.frames.windows(2) {
            if pair[1].timestamp <= pair[0].timestamp {
                return Err(Error::InvalidArgument(
                    "frame timestamps must be strictly increasing".into(),
                ));
            }
        }
        let res = self.frames[0].shape();
        for (i, g) in self.gt.iter().enumerate() {
            if let Some(g) = g {
                if g.background.shape() != res {
                    return Err(Error::shape(
                        format!("gt at frame {i} matching {res:?}"),
                        format!("{:?}", g.background.shape()),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Ground-truth binary mask of `object_id` at `frame_idx`, if annotated.
    pub fn gt_binary(&self, frame_idx: usize, object_id: u32) -> Option<Array2<bool>> {
        self.gt[frame_idx]
            .as_ref()
            .map(|m| m.object_binary(object_id))
    }
}

/// Merge per-object probability masks into a per-pixel distribution.
///
/// Background starts from the product of complements and every class goes
/// through an odds transform before normalization, so the output sums to one
/// at each pixel.
pub fn soft_aggregate(per_object: &[Mask]) -> Result<MultiObjectMask> {
    if per_object.is_empty() {
        return Err(Error::EmptyInput("soft_aggregate: per-object masks"));
    }
    let shape = per_object[0].shape();
    let mut seen = std::collections::HashSet::new();
    for m in per_object {
        if m.kind != MaskKind::Probability {
            return Err(Error::InvalidArgument(
                "soft_aggregate requires probability masks".into(),
            ));
        }
        if m.shape() != shape {
            return Err(Error::shape(format!("{shape:?}"), format!("{:?}", m.shape())));
        }
        if !seen.insert(m.object_id) {
            return Err(Error::InvalidArgument(format!(
                "duplicate object id {}",
                m.object_id
            )));
        }
    }

    let (h, w) = shape;
    let odds = |p: f64| {
        let p = p.clamp(ODDS_CLAMP, 1.0 - ODDS_CLAMP);
        p / (1.0 - p)
    };

    let mut out: Vec<Array2<f64>> = vec![Array2::zeros((h, w)); per_object.len()];
    let mut bg = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let p0: f64 = per_object
                .iter()
                .map(|m| 1.0 - m.values[(y, x)])
                .product();
            let o0 = odds(p0);
            let mut total = o0;
            for (i, m) in per_object.iter().enumerate() {
                let o = odds(m.values[(y, x)]);
                out[i][(y, x)] = o;
                total += o;
            }
            bg[(y, x)] = o0 / total;
            for arr in out.iter_mut() {
                arr[(y, x)] /= total;
            }
        }
    }

    let per_object = out
        .into_iter()
        .zip(per_object)
        .map(|(values, src)| Mask {
            values,
            object_id: src.object_id,
            kind: MaskKind::Probability,
        })
        .collect();

    Ok(MultiObjectMask {
        per_object,
        background: Mask {
            values: bg,
            object_id: 1,
            kind: MaskKind::Probability,
        },
    })
}

fn check_same_shape(pred: &Mask, gt: &Mask) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            format!("{:?}", gt.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    Ok(())
}

/// Region similarity: intersection over union after binarizing both masks.
/// Defined as 1 when both are empty.
pub fn jaccard(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let p = pred.binarize();
    let g = gt.binarize();
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&a, &b) in p.iter().zip(g.iter()) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Boundary pixels: foreground pixels with a background 4-neighbor or lying
/// on the image border.
pub fn boundary_pixels(mask: &Array2<bool>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[(y, x)] {
                continue;
            }
            let edge = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            if edge
                || !mask[(y - 1, x)]
                || !mask[(y + 1, x)]
                || !mask[(y, x - 1)]
                || !mask[(y, x + 1)]
            {
                out.push((y, x));
            }
        }
    }
    out
}

/// Conventional boundary tolerance: `ceil(0.0075 * image diagonal)`.
pub fn default_contour_tolerance(h: usize, w: usize) -> usize {
    let diag = ((h * h + w * w) as f64).sqrt();
    (0.0075 * diag).ceil() as usize
}

/// Contour F-measure: boundary precision/recall with matches allowed within
/// `tol_px` (Euclidean), combined as `2PR/(P+R)`.
///
/// Both boundaries empty gives 1, exactly one empty gives 0.
pub fn contour_f(pred: &Mask, gt: &Mask, tol_px: usize) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let pb = boundary_pixels(&pred.binarize());
    let gb = boundary_pixels(&gt.binarize());
    match (pb.is_empty(), gb.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }

    // Disk offsets with squared radius <= tol^2 realize dilation by the
    // Euclidean disk exactly.
    let t = tol_px as isize;
    let t2 = (tol_px * tol_px) as isize;
    let mut offsets = Vec::new();
    for dy in -t..=t {
        for dx in -t..=t {
            if dy * dy + dx * dx <= t2 {
                offsets.push((dy, dx));
            }
        }
    }

    let (h, w) = pred.shape();
    let mark = |pix: &[(usize, usize)]| {
        let mut grid = vec![false; h * w];
        for &(y, x) in pix {
            grid[y * w + x] = true;
        }
        grid
    };
    let dilate = |pix: &[(usize, usize)]| {
        let mut grid = vec![false; h * w];
        for &(y, x) in pix {
            for &(dy, dx) in &offsets {
                let ny = y as isize + dy;
                let nx = x as isize + dx;
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    grid[ny as usize * w + nx as usize] = true;
                }
            }
        }
        grid
    };

    let gt_dilated = dilate(&gb);
    let pred_dilated = dilate(&pb);
    let _ = mark; // boundary grids not needed beyond the dilations

    let matched_p = pb.iter().filter(|&&(y, x)| gt_dilated[y * w + x]).count();
    let matched_g = gb.iter().filter(|&&(y, x)| pred_dilated[y * w + x]).count();
    let precision = matched_p as f64 / pb.len() as f64;
    let recall = matched_g as f64 / gb.len() as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Mean J, mean F, and their average.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JFReport {
    pub mean_j: f64,
    pub mean_f: f64,
    pub jf: f64,
}

impl std::fmt::Display for JFReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "J={:.4} F={:.4} J&F={:.4}",
            self.mean_j, self.mean_f, self.jf
        )
    }
}

pub fn jf_mean(per_frame_j: &[f64], per_frame_f: &[f64]) -> Result<JFReport> {
    if per_frame_j.is_empty() || per_frame_f.is_empty() {
        return Err(Error::EmptyInput("jf_mean: per-frame scores"));
    }
    if per_frame_j.len() != per_frame_f.len() {
        return Err(Error::shape(
            format!("{} F scores", per_frame_j.len()),
            format!("{}", per_frame_f.len()),
        ));
    }
    let mean_j = per_frame_j.iter().sum::<f64>() / per_frame_j.len() as f64;
    let mean_f = per_frame_f.iter().sum::<f64>() / per_frame_f.len() as f64;
    Ok(JFReport {
        mean_j,
        mean_f,
        jf: 0.5 * (mean_j + mean_f),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn prob_mask(values: Array2<f64>, id: u32) -> Mask {
        Mask::probability(values, id).unwrap()
    }

    #[test]
    fn soft_aggregate_single_half_splits_evenly() {
        let m = prob_mask(Array2::from_elem((4, 4), 0.5), 1);
        let agg = soft_aggregate(&[m]).unwrap();
        for (&p, &b) in agg.per_object[0]
            .values
            .iter()
            .zip(agg.background.values.iter())
        {
            assert!((p - 0.5).abs() < 1e-12);
            assert!((b - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_aggregate_symmetric_objects_tie() {
        let a = prob_mask(Array2::from_elem((4, 4), 0.8), 1);
        let b = prob_mask(Array2::from_elem((4, 4), 0.8), 2);
        let agg = soft_aggregate(&[a, b]).unwrap();
        for (&p, &q) in agg.per_object[0]
            .values
            .iter()
            .zip(agg.per_object[1].values.iter())
        {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_aggregate_matches_odds_formula() {
        // direct evaluation of the aggregation formula at (0.9, 0.3)
        let (p1, p2) = (0.9f64, 0.3f64);
        let p0: f64 = (1.0 - p1) * (1.0 - p2);
        let odds = |p: f64| p / (1.0 - p);
        let total = odds(p0) + odds(p1) + odds(p2);
        let expect = [odds(p1) / total, odds(p2) / total, odds(p0) / total];

        let a = prob_mask(Array2::from_elem((2, 2), p1), 1);
        let b = prob_mask(Array2::from_elem((2, 2), p2), 2);
        let agg = soft_aggregate(&[a, b]).unwrap();
        assert!((agg.per_object[0].values[(0, 0)] - expect[0]).abs() < 1e-12);
        assert!((agg.per_object[1].values[(0, 0)] - expect[1]).abs() < 1e-12);
        assert!((agg.background.values[(0, 0)] - expect[2]).abs() < 1e-12);
    }

    #[test]
    fn soft_aggregate_sums_to_one() {
        let mut rng = 0x12345u64;
        let mut next = move || {
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            rng as f64 / u64::MAX as f64
        };
        for n_obj in 1..=3 {
            let masks: Vec<Mask> = (0..n_obj)
                .map(|i| {
                    let vals = Array2::from_shape_fn((8, 8), |_| next());
                    prob_mask(vals, i as u32 + 1)
                })
                .collect();
            let agg = soft_aggregate(&masks).unwrap();
            let (h, w) = agg.background.shape();
            for y in 0..h {
                for x in 0..w {
                    let s: f64 = agg.background.values[(y, x)]
                        + agg
                            .per_object
                            .iter()
                            .map(|m| m.values[(y, x)])
                            .sum::<f64>();
                    assert!((s - 1.0).abs() < 1e-6, "pixel sum {s}");
                }
            }
        }
    }

    #[test]
    fn soft_aggregate_rejects_bad_input() {
        assert!(matches!(
            soft_aggregate(&[]),
            Err(Error::EmptyInput(_))
        ));
        let a = prob_mask(Array2::from_elem((4, 4), 0.5), 1);
        let b = prob_mask(Array2::from_elem((5, 4), 0.5), 2);
        assert!(soft_aggregate(&[a, b]).is_err());
    }

    #[test]
    fn jaccard_identity_disjoint_and_halves() {
        let mut full = Array2::zeros((4, 4));
        full.fill(1.0);
        let full = prob_mask(full, 1);
        assert_eq!(jaccard(&full, &full).unwrap(), 1.0);

        let mut left = Array2::zeros((4, 4));
        for y in 0..4 {
            for x in 0..2 {
                left[(y, x)] = 1.0;
            }
        }
        let mut right = Array2::zeros((4, 4));
        for y in 0..4 {
            for x in 2..4 {
                right[(y, x)] = 1.0;
            }
        }
        let left = prob_mask(left, 1);
        let right = prob_mask(right, 1);
        assert_eq!(jaccard(&left, &right).unwrap(), 0.0);

        // left half vs full frame: 8 / 16
        assert_eq!(jaccard(&left, &full).unwrap(), 0.5);
    }

    #[test]
    fn jaccard_both_empty_is_one() {
        let e = prob_mask(Array2::zeros((4, 4)), 1);
        assert_eq!(jaccard(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn jaccard_shape_mismatch_errors() {
        let a = prob_mask(Array2::zeros((4, 4)), 1);
        let b = prob_mask(Array2::zeros((4, 5)), 1);
        assert!(jaccard(&a, &b).is_err());
    }

    #[test]
    fn contour_f_identity_and_empty_cases() {
        let mut sq = Array2::zeros((16, 16));
        for y in 4..12 {
            for x in 4..12 {
                sq[(y, x)] = 1.0;
            }
        }
        let sq = prob_mask(sq, 1);
        assert_eq!(contour_f(&sq, &sq, 2).unwrap(), 1.0);

        let empty = prob_mask(Array2::zeros((16, 16)), 1);
        assert_eq!(contour_f(&empty, &sq, 2).unwrap(), 0.0);
        assert_eq!(contour_f(&sq, &empty, 2).unwrap(), 0.0);
        assert_eq!(contour_f(&empty, &empty, 2).unwrap(), 1.0);
    }

    /// Exhaustive oracle: boundary matching via pairwise distances.
    fn contour_f_oracle(pred: &Array2<bool>, gt: &Array2<bool>, tol: usize) -> f64 {
        let pb = boundary_pixels(pred);
        let gb = boundary_pixels(gt);
        match (pb.is_empty(), gb.is_empty()) {
            (true, true) => return 1.0,
            (true, false) | (false, true) => return 0.0,
            _ => {}
        }
        let t2 = (tol * tol) as isize;
        let near = |a: &(usize, usize), set: &[(usize, usize)]| {
            set.iter().any(|b| {
                let dy = a.0 as isize - b.0 as isize;
                let dx = a.1 as isize - b.1 as isize;
                dy * dy + dx * dx <= t2
            })
        };
        let p = pb.iter().filter(|q| near(q, &gb)).count() as f64 / pb.len() as f64;
        let r = gb.iter().filter(|q| near(q, &pb)).count() as f64 / gb.len() as f64;
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    #[test]
    fn contour_f_shifted_square_matches_oracle() {
        let mut a = Array2::zeros((16, 16));
        let mut b = Array2::zeros((16, 16));
        for y in 4..10 {
            for x in 4..10 {
                a[(y, x)] = 1.0;
                b[(y + 1, x + 1)] = 1.0;
            }
        }
        let a = prob_mask(a, 1);
        let b = prob_mask(b, 1);
        let got = contour_f(&a, &b, 2).unwrap();
        let want = contour_f_oracle(&a.binarize(), &b.binarize(), 2);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn contour_f_matches_oracle_on_random_small_masks() {
        let mut rng = 0xdeadu64;
        let mut next = move || {
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            rng
        };
        for _ in 0..120 {
            let h = 5 + (next() % 8) as usize;
            let w = 5 + (next() % 8) as usize;
            let a_vals = Array2::from_shape_fn((h, w), |_| ((next() % 100) < 35) as u8 as f64);
            let b_vals = Array2::from_shape_fn((h, w), |_| ((next() % 100) < 35) as u8 as f64);
            let tol = 1 + (next() % 3) as usize;
            let a = prob_mask(a_vals, 1);
            let b = prob_mask(b_vals, 1);
            let got = contour_f(&a, &b, tol).unwrap();
            let want = contour_f_oracle(&a.binarize(), &b.binarize(), tol);
            assert!((got - want).abs() < 1e-9, "{got} vs {want} at {h}x{w} tol {tol}");
        }
    }

    #[test]
    fn metrics_are_symmetric_on_binary_masks() {
        let mut rng = 0xbeefu64;
        let mut next = move || {
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            rng
        };
        for _ in 0..50 {
            let a_vals = Array2::from_shape_fn((9, 11), |_| ((next() % 100) < 40) as u8 as f64);
            let b_vals = Array2::from_shape_fn((9, 11), |_| ((next() % 100) < 40) as u8 as f64);
            let a = prob_mask(a_vals, 1);
            let b = prob_mask(b_vals, 1);
            let j1 = jaccard(&a, &b).unwrap();
            let j2 = jaccard(&b, &a).unwrap();
            assert!((j1 - j2).abs() < 1e-9);
            let f1 = contour_f(&a, &b, 2).unwrap();
            let f2 = contour_f(&b, &a, 2).unwrap();
            assert!((f1 - f2).abs() < 1e-9);
        }
    }

    #[test]
    fn jf_mean_basic_cases() {
        let r = jf_mean(&[1.0], &[1.0]).unwrap();
        assert_eq!(r.jf, 1.0);
        let r = jf_mean(&[0.6, 0.8], &[0.7, 0.9]).unwrap();
        assert!((r.mean_j - 0.7).abs() < 1e-12);
        assert!((r.mean_f - 0.8).abs() < 1e-12);
        assert!((r.jf - 0.75).abs() < 1e-12);
        assert!(jf_mean(&[], &[]).is_err());
        assert!(jf_mean(&[1.0], &[1.0, 0.5]).is_err());
    }

    #[test]
    fn default_tolerance_follows_diagonal() {
        // 480x854 diagonal ~ 979.7 -> ceil(7.35) = 8
        assert_eq!(default_contour_tolerance(480, 854), 8);
        assert_eq!(default_contour_tolerance(64, 112), 1);
    }
}
