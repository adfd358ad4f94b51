//! The memory-matching segmentation network.
//!
//! Reference (frame, mask) pairs are encoded into key/value memory rows, the
//! query frame reads the memory with scaled dot-product attention, and a
//! small decoder with one skip connection upsamples back to a probability
//! mask. Every stage is built on the autodiff graph, so the output is
//! differentiable with respect to both the parameters and the reference mask
//! values.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mask::{soft_aggregate, Frame, Mask, MaskKind, MultiObjectMask, ReferenceSet};

/// Architectural knobs. The downsampling factor is fixed at 4 by the two
/// stride-2 encoder stages.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyper {
    /// Narrow encoder width; wide layers use twice this. Also the key width.
    pub base_width: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Self { base_width: 32 }
    }
}

impl Hyper {
    pub const STRIDE: usize = 4;

    fn narrow(&self) -> usize {
        self.base_width
    }

    fn wide(&self) -> usize {
        2 * self.base_width
    }

    fn key_dim(&self) -> usize {
        self.base_width
    }

    fn value_dim(&self) -> usize {
        2 * self.base_width
    }

    fn decoder_tail(&self) -> usize {
        self.base_width / 2
    }
}

/// Encoded reference memory: one row per downsampled reference pixel.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    /// `(L, C_k)`
    pub keys: Array2<f64>,
    /// `(L, C_v)`
    pub values: Array2<f64>,
}

impl MemoryBank {
    pub fn rows(&self) -> usize {
        self.keys.nrows()
    }

    pub fn append(&mut self, other: &MemoryBank) {
        self.keys.append(ndarray::Axis(0), other.keys.view()).unwrap();
        self.values
            .append(ndarray::Axis(0), other.values.view())
            .unwrap();
    }
}

/// Named parameter tensors plus hyperparameters.
#[derive(Clone, Debug)]
pub struct SegModel {
    pub hyper: Hyper,
    params: BTreeMap<String, ArrayD<f64>>,
}

fn conv_spec(hyper: &Hyper) -> Vec<(&'static str, Vec<usize>)> {
    let n = hyper.narrow();
    let w = hyper.wide();
    let ck = hyper.key_dim();
    let cv = hyper.value_dim();
    let tail = hyper.decoder_tail();
    vec![
        // query encoder: 4 conv blocks, strides 1,2,2,1
        ("q_enc.c1.w", vec![n, 3, 3, 3]),
        ("q_enc.c1.b", vec![n]),
        ("q_enc.c2.w", vec![n, n, 3, 3]),
        ("q_enc.c2.b", vec![n]),
        ("q_enc.c3.w", vec![w, n, 3, 3]),
        ("q_enc.c3.b", vec![w]),
        ("q_enc.c4.w", vec![w, w, 3, 3]),
        ("q_enc.c4.b", vec![w]),
        // memory encoder: identical but 4 input channels (RGB + mask)
        ("m_enc.c1.w", vec![n, 4, 3, 3]),
        ("m_enc.c1.b", vec![n]),
        ("m_enc.c2.w", vec![n, n, 3, 3]),
        ("m_enc.c2.b", vec![n]),
        ("m_enc.c3.w", vec![w, n, 3, 3]),
        ("m_enc.c3.b", vec![w]),
        ("m_enc.c4.w", vec![w, w, 3, 3]),
        ("m_enc.c4.b", vec![w]),
        // 1x1 projections to keys/values
        ("proj.q_key.w", vec![ck, w, 1, 1]),
        ("proj.q_key.b", vec![ck]),
        ("proj.m_key.w", vec![ck, w, 1, 1]),
        ("proj.m_key.b", vec![ck]),
        ("proj.m_val.w", vec![cv, w, 1, 1]),
        ("proj.m_val.b", vec![cv]),
        // decoder: fuse read with query features, two transpose-conv stages,
        // one skip from the stride-2 encoder stage
        ("dec.d1.w", vec![w, 2 * w, 3, 3]),
        ("dec.d1.b", vec![w]),
        ("dec.up1.w", vec![w, n, 3, 3]), // transposed: (c_in, c_out, k, k)
        ("dec.up1.b", vec![n]),
        ("dec.d2.w", vec![n, 2 * n, 3, 3]),
        ("dec.d2.b", vec![n]),
        ("dec.up2.w", vec![n, tail, 3, 3]),
        ("dec.up2.b", vec![tail]),
        ("dec.head.w", vec![1, tail, 3, 3]),
        ("dec.head.b", vec![1]),
    ]
}

impl SegModel {
    /// Random initialization (He-style fan-in scaling), deterministic per seed.
    /// Values are generated in f32 so checkpoints round-trip bitwise.
    pub fn init(hyper: Hyper, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in conv_spec(&hyper) {
            let arr = if name.ends_with(".b") {
                ArrayD::zeros(IxDyn(&shape))
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                let dist = Normal::new(0.0, std).unwrap();
                let data: Vec<f64> = (0..shape.iter().product())
                    .map(|_| dist.sample(&mut rng) as f32 as f64)
                    .collect();
                ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap()
            };
            params.insert(name.to_string(), arr);
        }
        Self { hyper, params }
    }

    /// Rebuild a model from named tensors (checkpoint loading).
    pub fn from_params(hyper: Hyper, params: BTreeMap<String, ArrayD<f64>>) -> Result<Self> {
        for (name, shape) in conv_spec(&hyper) {
            match params.get(name) {
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        shape
                    )))
                }
                _ => {}
            }
        }
        Ok(Self { hyper, params })
    }

    pub fn params(&self) -> &BTreeMap<String, ArrayD<f64>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, ArrayD<f64>> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.len()).sum()
    }
}

/// Parameter vars inserted into a graph for one forward pass.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Insert every model parameter into `g`, as gradient leaves when
/// `trainable`, else as constants.
pub fn insert_params(g: &mut Graph, model: &SegModel, trainable: bool) -> ParamVars {
    let mut vars = BTreeMap::new();
    for (name, value) in &model.params {
        let v = if trainable {
            g.leaf(value.clone())
        } else {
            g.constant(value.clone())
        };
        vars.insert(name.clone(), v);
    }
    ParamVars { vars }
}

fn conv_block(
    g: &mut Graph,
    p: &ParamVars,
    prefix: &str,
    x: Var,
    stride: usize,
    relu: bool,
) -> Var {
    let w = p.get(&format!("{prefix}.w"));
    let b = p.get(&format!("{prefix}.b"));
    let pad = g.value(w).shape()[2] / 2;
    let y = g.conv2d(x, w, Some(b), stride, pad);
    if relu {
        g.relu(y)
    } else {
        y
    }
}

/// Shared encoder trunk. Returns the half-resolution feature (skip source)
/// and the quarter-resolution output.
fn encode_trunk(g: &mut Graph, p: &ParamVars, prefix: &str, x: Var) -> (Var, Var) {
    let c1 = conv_block(g, p, &format!("{prefix}.c1"), x, 1, true);
    let c2 = conv_block(g, p, &format!("{prefix}.c2"), c1, 2, true);
    let c3 = conv_block(g, p, &format!("{prefix}.c3"), c2, 2, true);
    let c4 = conv_block(g, p, &format!("{prefix}.c4"), c3, 1, true);
    (c2, c4)
}

/// `(C,h,w)` feature map to `(h*w, C)` row matrix.
fn to_rows(g: &mut Graph, feat: Var) -> Var {
    let sh = g.value(feat).shape().to_vec();
    let flat = g.reshape(feat, &[sh[0], sh[1] * sh[2]]);
    g.transpose2(flat)
}

/// One reference entry as graph vars.
pub struct RefVars {
    pub frame: Var,
    pub mask: Var,
}

/// Build graph vars for a reference set. Masks become gradient leaves when
/// `masks_trainable` is set (gradient correction, attacks, cycle-ERF).
pub fn insert_refs(
    g: &mut Graph,
    refs: &ReferenceSet,
    masks_trainable: bool,
) -> Result<Vec<RefVars>> {
    refs.validate()?;
    let mut out = Vec::with_capacity(refs.len());
    for (frame, mask) in &refs.entries {
        let f = g.constant(frame.pixels.clone().into_dyn());
        let m_arr = mask.values.clone().into_dyn();
        let m = if masks_trainable {
            g.leaf(m_arr)
        } else {
            g.constant(m_arr)
        };
        out.push(RefVars { frame: f, mask: m });
    }
    Ok(out)
}

/// Encode reference entries into memory key/value row matrices on the graph.
pub fn encode_memory_g(g: &mut Graph, p: &ParamVars, refs: &[RefVars]) -> (Var, Var) {
    let mut keys: Option<Var> = None;
    let mut values: Option<Var> = None;
    for r in refs {
        let fsh = g.value(r.frame).shape().to_vec();
        let m3 = g.reshape(r.mask, &[1, fsh[1], fsh[2]]);
        let x = g.concat_ax0(r.frame, m3);
        let (_, feat) = encode_trunk(g, p, "m_enc", x);
        let k = conv_block(g, p, "proj.m_key", feat, 1, false);
        let v = conv_block(g, p, "proj.m_val", feat, 1, false);
        let k_rows = to_rows(g, k);
        let v_rows = to_rows(g, v);
        keys = Some(match keys {
            None => k_rows,
            Some(acc) => g.concat_ax0(acc, k_rows),
        });
        values = Some(match values {
            None => v_rows,
            Some(acc) => g.concat_ax0(acc, v_rows),
        });
    }
    (keys.expect("nonempty refs"), values.expect("nonempty refs"))
}

/// Full forward pass producing a probability mask `(H,W)` on the graph.
///
/// `memory` may come from [`encode_memory_g`] or from constant rows of a
/// cached [`MemoryBank`].
pub fn forward_g(
    g: &mut Graph,
    model: &SegModel,
    p: &ParamVars,
    memory: (Var, Var),
    query: Var,
) -> Var {
    let (mem_k, mem_v) = memory;
    let qsh = g.value(query).shape().to_vec();
    let (h, w) = (qsh[1], qsh[2]);

    let (skip, q_feat) = encode_trunk(g, p, "q_enc", query);
    let q_key = conv_block(g, p, "proj.q_key", q_feat, 1, false);
    let q_rows = to_rows(g, q_key); // (hw/16, C_k)

    // scaled dot-product attention over all memory rows
    let kt = g.transpose2(mem_k);
    let scores = g.matmul(q_rows, kt);
    let scaled = g.scale(scores, 1.0 / (model.hyper.key_dim() as f64).sqrt());
    let att = g.softmax_rows(scaled);
    let read = g.matmul(att, mem_v); // (hw/16, C_v)

    // back to a (C_v, h/4, w/4) map, fuse with query features
    let fsh = g.value(q_feat).shape().to_vec();
    let (fh, fw) = (fsh[1], fsh[2]);
    let read_t = g.transpose2(read);
    let read_map = g.reshape(read_t, &[model.hyper.value_dim(), fh, fw]);
    let fused = g.concat_ax0(read_map, q_feat);

    let d1 = conv_block(g, p, "dec.d1", fused, 1, true);
    let ssh = g.value(skip).shape().to_vec();
    let up1w = p.get("dec.up1.w");
    let up1b = p.get("dec.up1.b");
    let up1 = g.conv_transpose2d(d1, up1w, Some(up1b), 2, 1, (ssh[1], ssh[2]));
    let up1 = g.relu(up1);
    let cat = g.concat_ax0(up1, skip);
    let d2 = conv_block(g, p, "dec.d2", cat, 1, true);
    let up2w = p.get("dec.up2.w");
    let up2b = p.get("dec.up2.b");
    let up2 = g.conv_transpose2d(d2, up2w, Some(up2b), 2, 1, (h, w));
    let up2 = g.relu(up2);
    let logits = conv_block(g, p, "dec.head", up2, 1, false);
    let prob = g.sigmoid(logits);
    g.reshape(prob, &[h, w])
}

impl SegModel {
    /// Encode a reference set into a plain memory bank (no gradients kept).
    pub fn encode_memory(&self, refs: &ReferenceSet) -> Result<MemoryBank> {
        refs.validate()?;
        let mut g = Graph::new();
        let p = insert_params(&mut g, self, false);
        let ref_vars = insert_refs(&mut g, refs, false)?;
        let (k, v) = encode_memory_g(&mut g, &p, &ref_vars);
        let keys = g
            .value(k)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let values = g
            .value(v)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        Ok(MemoryBank { keys, values })
    }

    /// Memory rows contributed by a single (frame, mask) entry.
    pub fn encode_entry(&self, frame: &Frame, mask: &Mask) -> Result<MemoryBank> {
        let refs = ReferenceSet::single(frame.clone(), mask.clone())?;
        self.encode_memory(&refs)
    }

    fn check_query(&self, refs: &ReferenceSet, query: &Frame) -> Result<()> {
        if refs.entries[0].0.shape() != query.shape() {
            return Err(Error::shape(
                format!("query at {:?}", refs.entries[0].0.shape()),
                format!("{:?}", query.shape()),
            ));
        }
        Ok(())
    }

    /// Segment the query frame against a reference set.
    pub fn segment(&self, refs: &ReferenceSet, query: &Frame) -> Result<Mask> {
        refs.validate()?;
        self.check_query(refs, query)?;
        let mut g = Graph::new();
        let p = insert_params(&mut g, self, false);
        let ref_vars = insert_refs(&mut g, refs, false)?;
        let memory = encode_memory_g(&mut g, &p, &ref_vars);
        let qv = g.constant(query.pixels.clone().into_dyn());
        let out = forward_g(&mut g, self, &p, memory, qv);
        let values = g
            .value(out)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        Ok(Mask {
            values,
            object_id: refs.entries[0].1.object_id,
            kind: MaskKind::Probability,
        })
    }

    /// Segment against a pre-encoded memory bank (rows enter as constants).
    pub fn segment_with_bank(&self, bank: &MemoryBank, query: &Frame, object_id: u32) -> Result<Mask> {
        let mut g = Graph::new();
        let p = insert_params(&mut g, self, false);
        let k = g.constant(bank.keys.clone().into_dyn());
        let v = g.constant(bank.values.clone().into_dyn());
        let qv = g.constant(query.pixels.clone().into_dyn());
        let out = forward_g(&mut g, self, &p, (k, v), qv);
        let values = g
            .value(out)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        Ok(Mask {
            values,
            object_id,
            kind: MaskKind::Probability,
        })
    }

    /// Per-object segmentation followed by soft aggregation.
    pub fn segment_multi(
        &self,
        refs_per_object: &BTreeMap<u32, ReferenceSet>,
        query: &Frame,
    ) -> Result<MultiObjectMask> {
        if refs_per_object.is_empty() {
            return Err(Error::EmptyInput("segment_multi: objects"));
        }
        let mut masks = Vec::with_capacity(refs_per_object.len());
        for (&id, refs) in refs_per_object {
            let mut m = self.segment(refs, query)?;
            m.object_id = id;
            masks.push(m);
        }
        soft_aggregate(&masks)
    }

    /// Gradient of a scalar loss (built by `loss_builder` from the predicted
    /// mask var) with respect to every reference mask, in entry order.
    pub fn backward_to_mask<F>(
        &self,
        refs: &ReferenceSet,
        query: &Frame,
        loss_builder: F,
    ) -> Result<Vec<Array2<f64>>>
    where
        F: FnOnce(&mut Graph, Var) -> Result<Var>,
    {
        refs.validate()?;
        self.check_query(refs, query)?;
        let mut g = Graph::new();
        let p = insert_params(&mut g, self, false);
        let ref_vars = insert_refs(&mut g, refs, true)?;
        let memory = encode_memory_g(&mut g, &p, &ref_vars);
        let qv = g.constant(query.pixels.clone().into_dyn());
        let pred = forward_g(&mut g, self, &p, memory, qv);
        let loss = loss_builder(&mut g, pred)?;
        let mut grads = g.backward(loss);
        let mut out = Vec::with_capacity(ref_vars.len());
        for (i, rv) in ref_vars.iter().enumerate() {
            let grad = grads
                .take(rv.mask)
                .unwrap_or_else(|| ArrayD::zeros(g.value(rv.mask).raw_dim()));
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("gradient of reference mask {i}"),
                });
            }
            out.push(grad.into_dimensionality::<ndarray::Ix2>().unwrap());
        }
        Ok(out)
    }
}
