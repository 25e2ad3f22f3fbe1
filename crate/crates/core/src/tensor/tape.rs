//! Define-by-run reverse-mode autodiff on a Wengert tape.
//!
//! Every operation evaluates its result immediately and records what backward
//! needs (input ids plus saved intermediates such as argmax indices or batch
//! statistics). [`Tape::backward`] consumes the tape, runs a single reverse
//! sweep accumulating gradients across fan-out, and returns the leaf
//! gradients; intermediate gradient buffers are freed as the sweep passes
//! them.

use serde::{Deserialize, Serialize};

use super::kernels as k;
use super::kernels::ConvDims;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

/// Whether batch normalization uses batch statistics (updating the running
/// averages) or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Exponential running mean/variance tracked by a batch-norm layer, updated
/// outside the tape so recording a forward pass has no hidden state cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

enum Op {
    Leaf,
    Conv2d { x: VarId, w: VarId, dims: ConvDims },
    Relu { x: VarId },
    Sigmoid { x: VarId },
    MaxPool2d { x: VarId, argmax: Vec<u32>, in_len: usize },
    BatchNorm { x: VarId, gamma: VarId, beta: VarId, mode: BnMode, mean: Vec<f32>, inv_std: Vec<f32>, n: usize, c: usize, hw: usize },
    Dense { x: VarId, w: VarId, bias: Option<VarId>, n: usize, din: usize, dout: usize },
    SoftmaxCe { logits: VarId, labels: Vec<usize>, probs: Vec<f32>, n: usize, k: usize },
    ProtoDistance { z: VarId, p: VarId, n: usize, d: usize, cells: usize, pcount: usize },
    LogSimilarity { dist: VarId, eps: f32 },
    SpatialMax { x: VarId, argmax: Vec<u32>, cells: usize },
    MinClassDistance { dist: VarId, argmin: Vec<u32>, pcount: usize, cells: usize, n: usize },
    GlobalAvgPool { x: VarId, hw: usize },
    Affine { terms: Vec<(VarId, f32)> },
    Add { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    Scale { x: VarId, c: f32 },
    Sum { x: VarId },
    L1Masked { w: VarId, mask: Vec<f32> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Leaf gradients produced by [`Tape::backward`], indexed by the `VarId`s the
/// consumed tape handed out.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&[f32]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> VarId {
        self.nodes.push(Node { value, op, needs_grad });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn data(&self, id: VarId) -> &[f32] {
        self.nodes[id.0].value.data()
    }

    /// Place a tensor on the tape. Gradients flow into it iff
    /// `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> VarId {
        let needs = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs)
    }

    // ── neural ops ───────────────────────────────────────────────────

    pub fn conv2d(&mut self, x: VarId, w: VarId, stride: usize, pad: usize) -> Result<VarId> {
        if x == w {
            return Err(Error::InvalidInput("conv2d input and kernel must be distinct variables".into()));
        }
        let dims = ConvDims::resolve(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        let out = k::conv2d_forward(self.data(x), self.data(w), &dims);
        let value = Tensor::new(vec![dims.n, dims.f, dims.out_h, dims.out_w], out)?;
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(value, Op::Conv2d { x, w, dims }, needs))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let data = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        let needs = self.needs(x);
        self.push(value, Op::Relu { x }, needs)
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let data = self.data(x).iter().map(|&v| k::stable_sigmoid(v)).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        let needs = self.needs(x);
        self.push(value, Op::Sigmoid { x }, needs)
    }

    /// 2×2 stride-2 max pooling; requires even spatial extents.
    pub fn maxpool2d(&mut self, x: VarId) -> Result<VarId> {
        let shape = self.value(x).shape();
        if shape.len() != 4 {
            return Err(Error::shape("maxpool2d", format!("expected 4-d input, got {shape:?}")));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("maxpool2d", format!("spatial dims {h}x{w} not divisible by 2")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0f32; n * c * oh * ow];
        let mut argmax = vec![0u32; n * c * oh * ow];
        k::maxpool2d_forward(self.data(x), n, c, h, w, &mut out, &mut argmax);
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::MaxPool2d { x, argmax, in_len: n * c * h * w }, needs))
    }

    /// Batch normalization over the channel axis of an n×c×h×w tensor.
    /// Train mode uses biased batch statistics and folds them into `running`
    /// with the given momentum; eval mode reads `running` and leaves it
    /// untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        mode: BnMode,
        running: &mut RunningStats,
        momentum: f32,
        eps: f32,
    ) -> Result<VarId> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("batch_norm", format!("expected 4-d input, got {shape:?}")));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.value(id).numel() != c {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} has {} elements, expected {c}", self.value(id).numel()),
                ));
            }
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("running stats sized for {} channels, input has {c}", running.mean.len()),
            ));
        }
        let (mean, var) = match mode {
            BnMode::Train => {
                if n * hw < 2 {
                    return Err(Error::InvalidInput(format!(
                        "batch_norm train mode needs at least 2 samples per channel, got {}",
                        n * hw
                    )));
                }
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                k::bn_batch_stats(self.data(x), n, c, hw, &mut mean, &mut var);
                for ch in 0..c {
                    running.mean[ch] = (1.0 - momentum) * running.mean[ch] + momentum * mean[ch];
                    running.var[ch] = (1.0 - momentum) * running.var[ch] + momentum * var[ch];
                }
                (mean, var)
            }
            BnMode::Eval => (running.mean.clone(), running.var.clone()),
        };
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0f32; n * c * hw];
        k::bn_normalize(self.data(x), n, c, hw, &mean, &inv_std, self.data(gamma), self.data(beta), &mut out);
        let value = Tensor::new(shape, out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(value, Op::BatchNorm { x, gamma, beta, mode, mean, inv_std, n, c, hw }, needs))
    }

    /// Fully-connected layer: out = x·wᵀ (+ bias), x n×din, w dout×din.
    pub fn dense(&mut self, x: VarId, w: VarId, bias: Option<VarId>) -> Result<VarId> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::shape("dense", format!("expected 2-d input and weight, got {xs:?} and {ws:?}")));
        }
        let (n, din) = (xs[0], xs[1]);
        let (dout, wdin) = (ws[0], ws[1]);
        if wdin != din {
            return Err(Error::shape("dense", format!("weight expects {wdin} features, input has {din}")));
        }
        if let Some(b) = bias {
            if self.value(b).numel() != dout {
                return Err(Error::shape(
                    "dense",
                    format!("bias has {} elements, expected {dout}", self.value(b).numel()),
                ));
            }
        }
        let mut out = vec![0.0f32; n * dout];
        k::dense_forward(self.data(x), self.data(w), bias.map(|b| self.data(b)), n, din, dout, &mut out);
        let value = Tensor::new(vec![n, dout], out)?;
        let needs = self.needs(x) || self.needs(w) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Dense { x, w, bias, n, din, dout }, needs))
    }

    /// Mean softmax cross-entropy over an n×k logit matrix; returns a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: VarId, labels: &[usize]) -> Result<VarId> {
        let shape = self.value(logits).shape();
        if shape.len() != 2 {
            return Err(Error::shape("softmax_cross_entropy", format!("expected 2-d logits, got {shape:?}")));
        }
        let (n, kk) = (shape[0], shape[1]);
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= kk) {
            return Err(Error::InvalidInput(format!("label {bad} out of range for {kk} classes")));
        }
        let mut probs = vec![0.0f32; n * kk];
        let loss = k::softmax_ce_forward(self.data(logits), n, kk, labels, &mut probs);
        let value = Tensor::scalar(loss);
        let needs = self.needs(logits);
        Ok(self.push(value, Op::SoftmaxCe { logits, labels: labels.to_vec(), probs, n, k: kk }, needs))
    }

    /// Squared L2 distances between latent cells and prototype vectors:
    /// z n×d×gh×gw with p pcount×d gives n×pcount×gh×gw.
    pub fn proto_distance(&mut self, z: VarId, p: VarId) -> Result<VarId> {
        let zs = self.value(z).shape();
        let ps = self.value(p).shape();
        if zs.len() != 4 || ps.len() != 2 {
            return Err(Error::shape(
                "proto_distance",
                format!("expected 4-d latent and 2-d prototypes, got {zs:?} and {ps:?}"),
            ));
        }
        let (n, d, gh, gw) = (zs[0], zs[1], zs[2], zs[3]);
        let (pcount, pd) = (ps[0], ps[1]);
        if pd != d {
            return Err(Error::shape(
                "proto_distance",
                format!("prototypes have {pd} channels, latent has {d}"),
            ));
        }
        let cells = gh * gw;
        let mut out = vec![0.0f32; n * pcount * cells];
        k::proto_distance_forward(self.data(z), n, d, cells, self.data(p), pcount, &mut out);
        let value = Tensor::new(vec![n, pcount, gh, gw], out)?;
        let needs = self.needs(z) || self.needs(p);
        Ok(self.push(value, Op::ProtoDistance { z, p, n, d, cells, pcount }, needs))
    }

    /// Similarity score log((d+1)/(d+eps)) applied elementwise to distances.
    pub fn log_similarity(&mut self, dist: VarId, eps: f32) -> Result<VarId> {
        if eps <= 0.0 {
            return Err(Error::InvalidConfig(format!("similarity eps must be positive, got {eps}")));
        }
        let data = self.data(dist).iter().map(|&d| (d + 1.0).ln() - (d + eps).ln()).collect();
        let value = Tensor::new(self.value(dist).shape().to_vec(), data)?;
        let needs = self.needs(dist);
        Ok(self.push(value, Op::LogSimilarity { dist, eps }, needs))
    }

    /// Max over the trailing spatial axes: n×p×gh×gw reduces to n×p.
    pub fn spatial_max(&mut self, x: VarId) -> Result<VarId> {
        let shape = self.value(x).shape();
        if shape.len() != 4 {
            return Err(Error::shape("spatial_max", format!("expected 4-d input, got {shape:?}")));
        }
        let (n, p, gh, gw) = (shape[0], shape[1], shape[2], shape[3]);
        let cells = gh * gw;
        let groups = n * p;
        let mut out = vec![0.0f32; groups];
        let mut argmax = vec![0u32; groups];
        k::spatial_max_forward(self.data(x), groups, cells, &mut out, &mut argmax);
        let value = Tensor::new(vec![n, p], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SpatialMax { x, argmax, cells }, needs))
    }

    /// Mean over the batch of each image's minimum distance to a prototype in
    /// (`own` = true) or outside (`own` = false) its labelled class.
    pub fn min_class_distance(
        &mut self,
        dist: VarId,
        labels: &[usize],
        class_of: &[usize],
        own: bool,
    ) -> Result<VarId> {
        let shape = self.value(dist).shape();
        if shape.len() != 4 {
            return Err(Error::shape("min_class_distance", format!("expected 4-d distances, got {shape:?}")));
        }
        let (n, pcount, gh, gw) = (shape[0], shape[1], shape[2], shape[3]);
        let cells = gh * gw;
        if labels.len() != n {
            return Err(Error::shape(
                "min_class_distance",
                format!("{} labels for {n} images", labels.len()),
            ));
        }
        if class_of.len() != pcount {
            return Err(Error::shape(
                "min_class_distance",
                format!("{} class assignments for {pcount} prototypes", class_of.len()),
            ));
        }
        let (mean, argmin) =
            k::min_class_distance_forward(self.data(dist), n, pcount, cells, labels, class_of, own);
        if !mean.is_finite() {
            return Err(Error::InvalidInput(
                "min_class_distance: some image has no prototype matching the class selection".into(),
            ));
        }
        let value = Tensor::scalar(mean);
        let needs = self.needs(dist);
        Ok(self.push(value, Op::MinClassDistance { dist, argmin, pcount, cells, n }, needs))
    }

    /// Mean over the trailing spatial axes: n×c×h×w reduces to n×c.
    pub fn global_avg_pool(&mut self, x: VarId) -> Result<VarId> {
        let shape = self.value(x).shape();
        if shape.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("expected 4-d input, got {shape:?}")));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        let groups = n * c;
        let mut out = vec![0.0f32; groups];
        k::global_avg_pool_forward(self.data(x), groups, hw, &mut out);
        let value = Tensor::new(vec![n, c], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::GlobalAvgPool { x, hw }, needs))
    }

    // ── scalar / elementwise ops ─────────────────────────────────────

    /// Weighted sum of scalars: Σ coeff·x. Used to combine loss terms.
    pub fn affine(&mut self, terms: &[(VarId, f32)]) -> Result<VarId> {
        if terms.is_empty() {
            return Err(Error::Empty("affine term list"));
        }
        let mut total = 0.0f32;
        for &(id, c) in terms {
            let v = self.value(id).item()?;
            total += c * v;
        }
        let value = Tensor::scalar(total);
        let needs = terms.iter().any(|&(id, _)| self.needs(id));
        Ok(self.push(value, Op::Affine { terms: terms.to_vec() }, needs))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: VarId, c: f32) -> VarId {
        let data = self.data(x).iter().map(|&v| c * v).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, c }, needs)
    }

    pub fn sum(&mut self, x: VarId) -> VarId {
        let mut s = 0.0f32;
        for &v in self.data(x) {
            s += v;
        }
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, needs)
    }

    /// Masked L1 norm Σ mask·|w|, with d|w|/dw taken as 0 at w = 0.
    pub fn l1_masked(&mut self, w: VarId, mask: &Tensor) -> Result<VarId> {
        if self.value(w).shape() != mask.shape() {
            return Err(Error::shape(
                "l1_masked",
                format!("{:?} vs mask {:?}", self.value(w).shape(), mask.shape()),
            ));
        }
        let mut s = 0.0f32;
        for (&wv, &mv) in self.data(w).iter().zip(mask.data()) {
            s += mv * wv.abs();
        }
        let needs = self.needs(w);
        Ok(self.push(Tensor::scalar(s), Op::L1Masked { w, mask: mask.data().to_vec() }, needs))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Consumes the tape and returns the
    /// gradients of the root with respect to every grad-requiring leaf.
    pub fn backward(self, root: VarId) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be a scalar, got shape {:?}", root_value.shape()),
            ));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f32>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[root.0].needs_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            if matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let needs = |id: VarId| nodes[id.0].needs_grad;
            let numel = |id: VarId| nodes[id.0].value.numel();
            macro_rules! acc {
                ($slot:expr, $len:expr) => {
                    grads[$slot.0].get_or_insert_with(|| vec![0.0f32; $len]).as_mut_slice()
                };
            }
            match &nodes[i].op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { x, w, dims } => {
                    let want_dx = needs(*x);
                    let want_dw = needs(*w);
                    if want_dx && want_dw {
                        let (gx, rest) = {
                            let (lo, hi) = grads.split_at_mut(x.0.max(w.0));
                            if x.0 < w.0 {
                                (lo[x.0].get_or_insert_with(|| vec![0.0; numel(*x)]), hi)
                            } else {
                                (lo[w.0].get_or_insert_with(|| vec![0.0; numel(*w)]), hi)
                            }
                        };
                        let gy = rest[0].get_or_insert_with(|| {
                            vec![0.0; if x.0 < w.0 { numel(*w) } else { numel(*x) }]
                        });
                        let (dx, dw) = if x.0 < w.0 { (gx, gy) } else { (gy, gx) };
                        k::conv2d_backward(
                            nodes[x.0].value.data(),
                            nodes[w.0].value.data(),
                            &g,
                            dims,
                            Some(dx),
                            Some(dw),
                        );
                    } else if want_dx {
                        k::conv2d_backward(
                            nodes[x.0].value.data(),
                            nodes[w.0].value.data(),
                            &g,
                            dims,
                            Some(acc!(x, numel(*x))),
                            None,
                        );
                    } else if want_dw {
                        k::conv2d_backward(
                            nodes[x.0].value.data(),
                            nodes[w.0].value.data(),
                            &g,
                            dims,
                            None,
                            Some(acc!(w, numel(*w))),
                        );
                    }
                }
                Op::Relu { x } => {
                    if needs(*x) {
                        let xv = nodes[x.0].value.data();
                        let dst = acc!(x, xv.len());
                        for ((d, &gv), &v) in dst.iter_mut().zip(&g).zip(xv) {
                            if v > 0.0 {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    if needs(*x) {
                        let yv = nodes[i].value.data();
                        let dst = acc!(x, yv.len());
                        for ((d, &gv), &y) in dst.iter_mut().zip(&g).zip(yv) {
                            *d += gv * y * (1.0 - y);
                        }
                    }
                }
                Op::MaxPool2d { x, argmax, in_len } => {
                    if needs(*x) {
                        k::maxpool2d_backward(&g, argmax, acc!(x, *in_len));
                    }
                }
                Op::BatchNorm { x, gamma, beta, mode, mean, inv_std, n, c, hw } => {
                    let (want_x, want_g, want_b) = (needs(*x), needs(*gamma), needs(*beta));
                    let xv = nodes[x.0].value.data();
                    let gv = nodes[gamma.0].value.data();
                    // split_at_mut gymnastics are avoidable: buffers are
                    // computed locally, then folded into the shared slots.
                    let mut dx = want_x.then(|| vec![0.0f32; xv.len()]);
                    let mut dgamma = want_g.then(|| vec![0.0f32; *c]);
                    let mut dbeta = want_b.then(|| vec![0.0f32; *c]);
                    let bw = match mode {
                        BnMode::Train => k::bn_backward_train,
                        BnMode::Eval => k::bn_backward_eval,
                    };
                    bw(
                        xv,
                        &g,
                        *n,
                        *c,
                        *hw,
                        mean,
                        inv_std,
                        gv,
                        dx.as_deref_mut(),
                        dgamma.as_deref_mut(),
                        dbeta.as_deref_mut(),
                    );
                    if let Some(dx) = dx {
                        fold(acc!(x, xv.len()), &dx);
                    }
                    if let Some(dg) = dgamma {
                        fold(acc!(gamma, *c), &dg);
                    }
                    if let Some(db) = dbeta {
                        fold(acc!(beta, *c), &db);
                    }
                }
                Op::Dense { x, w, bias, n, din, dout } => {
                    let xv = nodes[x.0].value.data();
                    let wv = nodes[w.0].value.data();
                    let mut dx = needs(*x).then(|| vec![0.0f32; xv.len()]);
                    let mut dw = needs(*w).then(|| vec![0.0f32; wv.len()]);
                    let mut db = bias.filter(|b| needs(*b)).map(|_| vec![0.0f32; *dout]);
                    k::dense_backward(
                        xv,
                        wv,
                        &g,
                        *n,
                        *din,
                        *dout,
                        dx.as_deref_mut(),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    if let Some(dx) = dx {
                        fold(acc!(x, xv.len()), &dx);
                    }
                    if let Some(dw) = dw {
                        fold(acc!(w, wv.len()), &dw);
                    }
                    if let (Some(db), Some(b)) = (db, bias) {
                        fold(acc!(b, *dout), &db);
                    }
                }
                Op::SoftmaxCe { logits, labels, probs, n, k: kk } => {
                    if needs(*logits) {
                        k::softmax_ce_backward(probs, *n, *kk, labels, g[0], acc!(logits, n * kk));
                    }
                }
                Op::ProtoDistance { z, p, n, d, cells, pcount } => {
                    let zv = nodes[z.0].value.data();
                    let pv = nodes[p.0].value.data();
                    let mut dz = needs(*z).then(|| vec![0.0f32; zv.len()]);
                    let mut dp = needs(*p).then(|| vec![0.0f32; pv.len()]);
                    k::proto_distance_backward(
                        zv,
                        *n,
                        *d,
                        *cells,
                        pv,
                        *pcount,
                        &g,
                        dz.as_deref_mut(),
                        dp.as_deref_mut(),
                    );
                    if let Some(dz) = dz {
                        fold(acc!(z, zv.len()), &dz);
                    }
                    if let Some(dp) = dp {
                        fold(acc!(p, pv.len()), &dp);
                    }
                }
                Op::LogSimilarity { dist, eps } => {
                    if needs(*dist) {
                        let dv = nodes[dist.0].value.data();
                        let dst = acc!(dist, dv.len());
                        for ((o, &gv), &d) in dst.iter_mut().zip(&g).zip(dv) {
                            *o += gv * (1.0 / (d + 1.0) - 1.0 / (d + eps));
                        }
                    }
                }
                Op::SpatialMax { x, argmax, cells } => {
                    if needs(*x) {
                        let dst = acc!(x, numel(*x));
                        for (grp, (&gv, &at)) in g.iter().zip(argmax).enumerate() {
                            dst[grp * cells + at as usize] += gv;
                        }
                    }
                }
                Op::MinClassDistance { dist, argmin, pcount, cells, n } => {
                    if needs(*dist) {
                        let dst = acc!(dist, numel(*dist));
                        let per = g[0] / *n as f32;
                        for (img, &at) in argmin.iter().enumerate() {
                            dst[img * pcount * cells + at as usize] += per;
                        }
                    }
                }
                Op::GlobalAvgPool { x, hw } => {
                    if needs(*x) {
                        let dst = acc!(x, numel(*x));
                        let inv = 1.0 / *hw as f32;
                        for (grp, &gv) in g.iter().enumerate() {
                            let seg = &mut dst[grp * hw..][..*hw];
                            let gvi = gv * inv;
                            for d in seg {
                                *d += gvi;
                            }
                        }
                    }
                }
                Op::Affine { terms } => {
                    for &(id, c) in terms {
                        if needs(id) {
                            acc!(id, 1)[0] += g[0] * c;
                        }
                    }
                }
                Op::Add { a, b } => {
                    for id in [a, b] {
                        if needs(*id) {
                            fold(acc!(id, g.len()), &g);
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    if needs(a) {
                        let bv = nodes[b.0].value.data();
                        let dst = acc!(a, g.len());
                        for ((d, &gv), &v) in dst.iter_mut().zip(&g).zip(bv) {
                            *d += gv * v;
                        }
                    }
                    if needs(b) {
                        let av = nodes[a.0].value.data();
                        let dst = acc!(b, g.len());
                        for ((d, &gv), &v) in dst.iter_mut().zip(&g).zip(av) {
                            *d += gv * v;
                        }
                    }
                }
                Op::Scale { x, c } => {
                    if needs(*x) {
                        let dst = acc!(x, g.len());
                        for (d, &gv) in dst.iter_mut().zip(&g) {
                            *d += c * gv;
                        }
                    }
                }
                Op::Sum { x } => {
                    if needs(*x) {
                        let dst = acc!(x, numel(*x));
                        for d in dst {
                            *d += g[0];
                        }
                    }
                }
                Op::L1Masked { w, mask } => {
                    if needs(*w) {
                        let wv = nodes[w.0].value.data();
                        let dst = acc!(w, wv.len());
                        for ((d, &m), &v) in dst.iter_mut().zip(mask).zip(wv) {
                            let sign = if v > 0.0 {
                                1.0
                            } else if v < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            *d += g[0] * m * sign;
                        }
                    }
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn fold(dst: &mut [f32], src: &[f32]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
