//! Concept-guided two-stage attention head.
//!
//! Stage one scores every instance of a bag against each effective concept
//! (expert concepts shifted by a learned low-rank context offset, plus
//! learned data-driven concepts) and pools instances per concept with a
//! softmax over cosine similarities. Stage two pools the concept features
//! per class, weighted by their similarity to that class's prompt, passes
//! the result through a residual bottleneck adapter, and scores it against
//! the prompt again.
//!
//! Everything is computed in f64. [`HeadParams::loss_and_grad`] is an exact
//! reverse-mode pass over the same trace the forward pass records.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{dot, norm, ConceptSet, EmbeddingBag, StoreError};
use crate::Label;

pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum HeadError {
    #[error("a concept vector vanished after applying its context offset")]
    ZeroVector,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("bag has no instances")]
    EmptyBag,
}

impl From<StoreError> for HeadError {
    fn from(_: StoreError) -> Self {
        HeadError::ZeroVector
    }
}

/// Architecture and fixed hyper-parameters of the head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub dim: usize,
    /// Number of learnable data-driven concepts.
    pub data_concepts: usize,
    /// Rank of the shared context-offset basis.
    pub context_rank: usize,
    /// Adapter hidden width is `dim / bottleneck_ratio`.
    pub bottleneck_ratio: usize,
    pub alpha: f64,
    pub tau_inst: f64,
    pub tau_bag: f64,
    pub tau_cls: f64,
    /// Weight of the data-concept orthogonality penalty.
    pub orth_weight: f64,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            dim: 512,
            data_concepts: 8,
            context_rank: 16,
            bottleneck_ratio: 4,
            alpha: 0.2,
            tau_inst: 0.1,
            tau_bag: 1.0,
            tau_cls: 0.07,
            orth_weight: 2.0,
            seed: 0,
        }
    }
}

/// Learnable tensors of the head. [`HeadGrads`] mirrors the layout.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub config: HeadConfig,
    /// Number of frozen expert instance concepts the offsets apply to.
    pub expert_concepts: usize,
    /// `K x dim`.
    pub data_concepts: Vec<f64>,
    /// `dim x rank`, shared by all expert concepts.
    pub context_basis: Vec<f64>,
    /// `expert_concepts x rank`.
    pub context_coeffs: Vec<f64>,
    /// `hidden x dim`: maps a feature down to the bottleneck.
    pub w_down: Vec<f64>,
    /// `dim x hidden`.
    pub w_up: Vec<f64>,
}

/// Gradient (or any per-parameter quantity) congruent with [`HeadParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrads {
    pub data_concepts: Vec<f64>,
    pub context_basis: Vec<f64>,
    pub context_coeffs: Vec<f64>,
    pub w_down: Vec<f64>,
    pub w_up: Vec<f64>,
}

impl HeadGrads {
    pub fn blocks(&self) -> [&[f64]; 5] {
        [
            &self.data_concepts,
            &self.context_basis,
            &self.context_coeffs,
            &self.w_down,
            &self.w_up,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 5] {
        [
            &mut self.data_concepts,
            &mut self.context_basis,
            &mut self.context_coeffs,
            &mut self.w_down,
            &mut self.w_up,
        ]
    }

    pub fn scale(&mut self, s: f64) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// `self += other`, block by block in index order.
    pub fn add(&mut self, other: &HeadGrads) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn len(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A bag's instances in f64, each row unit-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub dim: usize,
    pub rows: Vec<f64>,
    pub label: Label,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn from_rows(dim: usize, rows: &[f64], label: Label) -> Result<Self, HeadError> {
        if dim == 0 || rows.is_empty() || rows.len() % dim != 0 {
            return Err(HeadError::EmptyBag);
        }
        let mut out = Vec::with_capacity(rows.len());
        for r in rows.chunks_exact(dim) {
            let n = norm(r);
            if !(n > 1e-12) || !n.is_finite() {
                return Err(HeadError::ZeroVector);
            }
            out.extend(r.iter().map(|v| v / n));
        }
        Ok(Self {
            dim,
            rows: out,
            label,
        })
    }

    pub fn from_embedding(bag: &EmbeddingBag) -> Result<Self, HeadError> {
        let rows: Vec<f64> = bag.instances.iter().map(|&v| f64::from(v)).collect();
        Self::from_rows(bag.dim, &rows, bag.label)
    }

    /// Keeps the listed instances, in order.
    pub fn subset(&self, keep: &[usize]) -> Self {
        let mut rows = Vec::with_capacity(keep.len() * self.dim);
        for &i in keep {
            rows.extend_from_slice(self.row(i));
        }
        Self {
            dim: self.dim,
            rows,
            label: self.label,
        }
    }
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub n: usize,
    pub num_concepts: usize,
    /// Norms of the un-normalized effective concepts.
    concept_norms: Vec<f64>,
    /// `J x dim`, unit rows.
    pub concepts: Vec<f64>,
    /// `J x N`; row j is concept j's attention over instances.
    pub attention: Vec<f64>,
    /// `J x dim` concept features.
    pub features: Vec<f64>,
    feature_norms: Vec<f64>,
    /// `C x J` cosine of each concept feature to each class prompt.
    bag_sims: Vec<f64>,
    /// `C x J` class-wise weights over concept features.
    pub bag_weights: Vec<f64>,
    /// `C x dim` pooled class features before the adapter.
    pub class_features: Vec<f64>,
    /// `C x hidden` adapter pre-activations.
    hidden: Vec<f64>,
    /// `C x dim` adapter outputs.
    adapted: Vec<f64>,
    pub logits: [f64; NUM_CLASSES],
    pub probs: [f64; NUM_CLASSES],
}

impl ForwardTrace {
    pub fn attention_row(&self, j: usize) -> &[f64] {
        &self.attention[j * self.n..(j + 1) * self.n]
    }

    pub fn predicted(&self) -> Label {
        if self.logits[Label::Plexus.index()] > self.logits[Label::NoPlexus.index()] {
            Label::Plexus
        } else {
            Label::NoPlexus
        }
    }

    /// Probability of the positive class.
    pub fn score(&self) -> f64 {
        self.probs[Label::Plexus.index()]
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

/// Mean over ordered pairs of squared cosines between rows.
pub fn orth_loss(rows: &[f64], dim: usize) -> Result<f64, HeadError> {
    Ok(orth_loss_and_grad(rows, dim, None)?)
}

fn orth_loss_and_grad(rows: &[f64], dim: usize, grad: Option<(f64, &mut [f64])>) -> Result<f64, HeadError> {
    let k = rows.len() / dim;
    let mut unit = Vec::with_capacity(rows.len());
    let mut norms = Vec::with_capacity(k);
    for r in rows.chunks_exact(dim) {
        let n = norm(r);
        if !(n > 1e-12) {
            return Err(HeadError::ZeroVector);
        }
        norms.push(n);
        unit.extend(r.iter().map(|v| v / n));
    }
    if k < 2 {
        return Ok(0.0);
    }
    let pairs = (k * (k - 1)) as f64;
    let mut gram = vec![0.0; k * k];
    let mut total = 0.0;
    for a in 0..k {
        for b in a + 1..k {
            let g = dot(&unit[a * dim..(a + 1) * dim], &unit[b * dim..(b + 1) * dim]);
            gram[a * k + b] = g;
            gram[b * k + a] = g;
            total += 2.0 * g * g;
        }
    }
    if let Some((weight, out)) = grad {
        let mut dn = vec![0.0; dim];
        for a in 0..k {
            dn.iter_mut().for_each(|v| *v = 0.0);
            for b in 0..k {
                if a != b {
                    axpy(4.0 * gram[a * k + b] / pairs, &unit[b * dim..(b + 1) * dim], &mut dn);
                }
            }
            let ua = &unit[a * dim..(a + 1) * dim];
            let radial = dot(&dn, ua);
            for t in 0..dim {
                out[a * dim + t] += weight * (dn[t] - radial * ua[t]) / norms[a];
            }
        }
    }
    Ok(total / pairs)
}

impl HeadParams {
    /// Seeded initialization. Context coefficients start at zero so the
    /// untrained head uses the expert concepts unchanged; the up-projection
    /// starts at zero so the adapter starts as a scaled identity.
    pub fn init(config: &HeadConfig, expert_concepts: usize) -> Result<Self, HeadError> {
        let d = config.dim;
        if d == 0 || config.bottleneck_ratio == 0 || d % config.bottleneck_ratio != 0 {
            return Err(HeadError::Shape(format!(
                "dim {d} not divisible by bottleneck ratio {}",
                config.bottleneck_ratio
            )));
        }
        if !(0.0..=1.0).contains(&config.alpha) {
            return Err(HeadError::Shape(format!("alpha {} outside [0, 1]", config.alpha)));
        }
        let h = d / config.bottleneck_ratio;
        let r = config.context_rank;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut gauss = |n: usize, std: f64| -> Vec<f64> {
            (0..n)
                .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect()
        };
        let mut data_concepts = gauss(config.data_concepts * d, 1.0);
        for row in data_concepts.chunks_exact_mut(d) {
            let n = norm(row);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let context_basis = gauss(d * r, 1.0 / (d as f64).sqrt());
        let w_down = gauss(h * d, 1.0 / (d as f64).sqrt());
        Ok(Self {
            config: config.clone(),
            expert_concepts,
            data_concepts,
            context_basis,
            context_coeffs: vec![0.0; expert_concepts * r],
            w_down,
            w_up: vec![0.0; d * h],
        })
    }

    pub fn hidden(&self) -> usize {
        self.config.dim / self.config.bottleneck_ratio
    }

    pub fn zeros_like(&self) -> HeadGrads {
        HeadGrads {
            data_concepts: vec![0.0; self.data_concepts.len()],
            context_basis: vec![0.0; self.context_basis.len()],
            context_coeffs: vec![0.0; self.context_coeffs.len()],
            w_down: vec![0.0; self.w_down.len()],
            w_up: vec![0.0; self.w_up.len()],
        }
    }

    pub fn blocks(&self) -> [&[f64]; 5] {
        [
            &self.data_concepts,
            &self.context_basis,
            &self.context_coeffs,
            &self.w_down,
            &self.w_up,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 5] {
        [
            &mut self.data_concepts,
            &mut self.context_basis,
            &mut self.context_coeffs,
            &mut self.w_down,
            &mut self.w_up,
        ]
    }

    /// Validates that the stored tensor sizes agree with the configuration.
    pub fn check_shapes(&self) -> Result<(), HeadError> {
        let d = self.config.dim;
        let (k, r, h) = (self.config.data_concepts, self.config.context_rank, self.hidden());
        let want = [k * d, d * r, self.expert_concepts * r, h * d, d * h];
        for (name, (have, want)) in ["data_concepts", "context_basis", "context_coeffs", "w_down", "w_up"]
            .iter()
            .zip(self.blocks().iter().map(|b| b.len()).zip(want))
        {
            if have != want {
                return Err(HeadError::Shape(format!("{name}: {have} values, expected {want}")));
            }
        }
        Ok(())
    }

    fn check_inputs(&self, concepts: &ConceptSet) -> Result<(), HeadError> {
        if concepts.dim != self.config.dim {
            return Err(HeadError::Shape(format!(
                "concept dim {} vs head dim {}",
                concepts.dim, self.config.dim
            )));
        }
        if concepts.num_instance_concepts() != self.expert_concepts {
            return Err(HeadError::Shape(format!(
                "{} expert concepts vs {} context coefficient rows",
                concepts.num_instance_concepts(),
                self.expert_concepts
            )));
        }
        Ok(())
    }

    /// Unit-normalized expert concepts after their context offsets, followed
    /// by the unit-normalized data-driven concepts. Returns the rows and the
    /// pre-normalization norms.
    pub fn effective_concepts(&self, concepts: &ConceptSet) -> Result<(Vec<f64>, Vec<f64>), HeadError> {
        self.check_inputs(concepts)?;
        let d = self.config.dim;
        let r = self.config.context_rank;
        let m = self.expert_concepts;
        let j_total = m + self.config.data_concepts;
        let mut rows = Vec::with_capacity(j_total * d);
        let mut norms = Vec::with_capacity(j_total);
        let mut u = vec![0.0; d];
        for j in 0..m {
            let coeffs = &self.context_coeffs[j * r..(j + 1) * r];
            let c = concepts.concept(j);
            for t in 0..d {
                u[t] = c[t] + dot(&self.context_basis[t * r..(t + 1) * r], coeffs);
            }
            let n = norm(&u);
            if !(n > 1e-12) {
                return Err(HeadError::ZeroVector);
            }
            norms.push(n);
            rows.extend(u.iter().map(|v| v / n));
        }
        for row in self.data_concepts.chunks_exact(d) {
            let n = norm(row);
            if !(n > 1e-12) {
                return Err(HeadError::ZeroVector);
            }
            norms.push(n);
            rows.extend(row.iter().map(|v| v / n));
        }
        Ok((rows, norms))
    }

    pub fn forward(&self, bag: &Bag, concepts: &ConceptSet) -> Result<ForwardTrace, HeadError> {
        let d = self.config.dim;
        if bag.dim != d {
            return Err(HeadError::Shape(format!("bag dim {} vs head dim {d}", bag.dim)));
        }
        if bag.is_empty() {
            return Err(HeadError::EmptyBag);
        }
        let (eff, concept_norms) = self.effective_concepts(concepts)?;
        let n = bag.len();
        let j_total = concept_norms.len();
        let (attention, features) = instance_aggregate(bag, &eff, self.config.tau_inst);
        let feature_norms: Vec<f64> = features.chunks_exact(d).map(norm).collect();

        let h = self.hidden();
        let alpha = self.config.alpha;
        let mut bag_sims = vec![0.0; NUM_CLASSES * j_total];
        let mut bag_weights = vec![0.0; NUM_CLASSES * j_total];
        let mut class_features = vec![0.0; NUM_CLASSES * d];
        let mut hidden = vec![0.0; NUM_CLASSES * h];
        let mut adapted = vec![0.0; NUM_CLASSES * d];
        let mut logits = [0.0; NUM_CLASSES];
        for y in 0..NUM_CLASSES {
            let p = &concepts.class_prompts[y];
            let sims = &mut bag_sims[y * j_total..(y + 1) * j_total];
            for j in 0..j_total {
                sims[j] = dot(&features[j * d..(j + 1) * d], p) / feature_norms[j];
            }
            let w = &mut bag_weights[y * j_total..(y + 1) * j_total];
            for j in 0..j_total {
                w[j] = sims[j] / self.config.tau_bag;
            }
            softmax_in_place(w);
            let f_y = &mut class_features[y * d..(y + 1) * d];
            for j in 0..j_total {
                axpy(w[j], &features[j * d..(j + 1) * d], f_y);
            }
            let hid = &mut hidden[y * h..(y + 1) * h];
            let g = &mut adapted[y * d..(y + 1) * d];
            adapter_apply(&self.w_down, &self.w_up, alpha, f_y, hid, g);
            logits[y] = dot(g, p) / (norm(g) * self.config.tau_cls);
        }
        let mut probs = logits;
        softmax_in_place(&mut probs);
        Ok(ForwardTrace {
            n,
            num_concepts: j_total,
            concept_norms,
            concepts: eff,
            attention,
            features,
            feature_norms,
            bag_sims,
            bag_weights,
            class_features,
            hidden,
            adapted,
            logits,
            probs,
        })
    }

    /// Cross-entropy of the bag's label plus the weighted orthogonality
    /// penalty on the data-driven concepts.
    pub fn loss(&self, bag: &Bag, concepts: &ConceptSet) -> Result<f64, HeadError> {
        let trace = self.forward(bag, concepts)?;
        let orth = orth_loss(&self.data_concepts, self.config.dim)?;
        Ok(-trace.probs[bag.label.index()].ln() + self.config.orth_weight * orth)
    }

    /// Loss and its exact gradient with respect to every learnable tensor.
    pub fn loss_and_grad(&self, bag: &Bag, concepts: &ConceptSet) -> Result<(f64, HeadGrads), HeadError> {
        let mut grads = self.zeros_like();
        let ce = self.accumulate_ce_grad(bag, concepts, 1.0, &mut grads)?.0;
        let orth = self.accumulate_orth_grad(1.0, &mut grads)?;
        Ok((ce + self.config.orth_weight * orth, grads))
    }

    /// Adds `weight * d(orth_weight * orth)/dθ` into `grads`; returns the
    /// unweighted orthogonality loss.
    pub fn accumulate_orth_grad(&self, weight: f64, grads: &mut HeadGrads) -> Result<f64, HeadError> {
        orth_loss_and_grad(
            &self.data_concepts,
            self.config.dim,
            Some((weight * self.config.orth_weight, &mut grads.data_concepts)),
        )
    }

    /// Adds `weight * dCE/dθ` into `grads` and returns the cross-entropy and
    /// the forward trace.
    pub fn accumulate_ce_grad(
        &self,
        bag: &Bag,
        concepts: &ConceptSet,
        weight: f64,
        grads: &mut HeadGrads,
    ) -> Result<(f64, ForwardTrace), HeadError> {
        let tr = self.forward(bag, concepts)?;
        let d = self.config.dim;
        let h = self.hidden();
        let r = self.config.context_rank;
        let m = self.expert_concepts;
        let n = tr.n;
        let jt = tr.num_concepts;
        let alpha = self.config.alpha;
        let label = bag.label.index();
        let ce = -tr.probs[label].ln();

        let mut d_features = vec![0.0; jt * d];
        let mut d_g = vec![0.0; d];
        let mut d_r = vec![0.0; h];
        let mut d_f = vec![0.0; d];
        for y in 0..NUM_CLASSES {
            let dz = weight * (tr.probs[y] - if y == label { 1.0 } else { 0.0 });
            let p = &concepts.class_prompts[y];
            let g = &tr.adapted[y * d..(y + 1) * d];
            let gn = norm(g);
            let cos = dot(g, p) / gn;
            let s = dz / self.config.tau_cls;
            for t in 0..d {
                d_g[t] = s * (p[t] / gn - cos * g[t] / (gn * gn));
            }

            // Adapter: G = alpha * W_up relu(W_down F) + (1 - alpha) F.
            let f_y = &tr.class_features[y * d..(y + 1) * d];
            let hid = &tr.hidden[y * h..(y + 1) * h];
            d_r.iter_mut().for_each(|v| *v = 0.0);
            for t in 0..d {
                let dg = alpha * d_g[t];
                if dg == 0.0 {
                    continue;
                }
                let up_row = &self.w_up[t * h..(t + 1) * h];
                let grad_row = &mut grads.w_up[t * h..(t + 1) * h];
                for q in 0..h {
                    let act = hid[q].max(0.0);
                    grad_row[q] += dg * act;
                    d_r[q] += up_row[q] * dg;
                }
            }
            for t in 0..d {
                d_f[t] = (1.0 - alpha) * d_g[t];
            }
            for q in 0..h {
                if hid[q] <= 0.0 || d_r[q] == 0.0 {
                    continue;
                }
                let dh = d_r[q];
                axpy(dh, f_y, &mut grads.w_down[q * d..(q + 1) * d]);
                axpy(dh, &self.w_down[q * d..(q + 1) * d], &mut d_f);
            }

            // Class pooling: F_y = sum_j b_jy f_j with b = softmax(g / tau_bag).
            let w = &tr.bag_weights[y * jt..(y + 1) * jt];
            let sims = &tr.bag_sims[y * jt..(y + 1) * jt];
            let mut d_b = vec![0.0; jt];
            for j in 0..jt {
                d_b[j] = dot(&d_f, &tr.features[j * d..(j + 1) * d]);
            }
            let mean: f64 = (0..jt).map(|j| w[j] * d_b[j]).sum();
            for j in 0..jt {
                let f_j = &tr.features[j * d..(j + 1) * d];
                let fn_ = tr.feature_norms[j];
                let dsim = w[j] * (d_b[j] - mean) / self.config.tau_bag;
                let df = &mut d_features[j * d..(j + 1) * d];
                for t in 0..d {
                    df[t] += w[j] * d_f[t] + dsim * (p[t] / fn_ - sims[j] * f_j[t] / (fn_ * fn_));
                }
            }
        }

        // Instance pooling: f_j = sum_i a_ij x_i with a = softmax(s / tau_inst).
        let mut d_a = vec![0.0; n];
        let mut d_c = vec![0.0; d];
        for j in 0..jt {
            let df = &d_features[j * d..(j + 1) * d];
            let a = tr.attention_row(j);
            for i in 0..n {
                d_a[i] = dot(df, bag.row(i));
            }
            let mean: f64 = (0..n).map(|i| a[i] * d_a[i]).sum();
            d_c.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n {
                let ds = a[i] * (d_a[i] - mean) / self.config.tau_inst;
                axpy(ds, bag.row(i), &mut d_c);
            }
            // Through the normalization of the effective concept.
            let c = &tr.concepts[j * d..(j + 1) * d];
            let radial = dot(&d_c, c);
            let cn = tr.concept_norms[j];
            let du: Vec<f64> = (0..d).map(|t| (d_c[t] - radial * c[t]) / cn).collect();
            if j < m {
                let coeffs = &self.context_coeffs[j * r..(j + 1) * r];
                let dcoef = &mut grads.context_coeffs[j * r..(j + 1) * r];
                for t in 0..d {
                    let basis_row = &self.context_basis[t * r..(t + 1) * r];
                    let grad_row = &mut grads.context_basis[t * r..(t + 1) * r];
                    for q in 0..r {
                        grad_row[q] += du[t] * coeffs[q];
                        dcoef[q] += basis_row[q] * du[t];
                    }
                }
            } else {
                let k = j - m;
                axpy(1.0, &du, &mut grads.data_concepts[k * d..(k + 1) * d]);
            }
        }
        Ok((ce, tr))
    }
}

/// Softmax attention of every concept over the bag's instances, and the
/// resulting attention-pooled concept features. Returns `(J x N, J x dim)`.
pub fn instance_aggregate(bag: &Bag, concepts: &[f64], tau_inst: f64) -> (Vec<f64>, Vec<f64>) {
    let d = bag.dim;
    let n = bag.len();
    let jt = concepts.len() / d;
    let mut attention = vec![0.0; jt * n];
    let mut features = vec![0.0; jt * d];
    for j in 0..jt {
        let c = &concepts[j * d..(j + 1) * d];
        let a = &mut attention[j * n..(j + 1) * n];
        for i in 0..n {
            a[i] = dot(bag.row(i), c) / tau_inst;
        }
        softmax_in_place(a);
        let f = &mut features[j * d..(j + 1) * d];
        for i in 0..n {
            axpy(a[i], bag.row(i), f);
        }
    }
    (attention, features)
}

/// `alpha * W_up relu(W_down h) + (1 - alpha) h`, writing the pre-activation
/// into `hidden` and the result into `out`.
fn adapter_apply(w_down: &[f64], w_up: &[f64], alpha: f64, input: &[f64], hidden: &mut [f64], out: &mut [f64]) {
    let d = input.len();
    let h = hidden.len();
    for q in 0..h {
        hidden[q] = dot(&w_down[q * d..(q + 1) * d], input);
    }
    for t in 0..d {
        let up = &w_up[t * h..(t + 1) * h];
        let mut s = 0.0;
        for q in 0..h {
            s += up[q] * hidden[q].max(0.0);
        }
        out[t] = alpha * s + (1.0 - alpha) * input[t];
    }
}

/// Adapter output for one feature vector.
pub fn adapter_forward(params: &HeadParams, input: &[f64]) -> Vec<f64> {
    let mut hidden = vec![0.0; params.hidden()];
    let mut out = vec![0.0; input.len()];
    adapter_apply(&params.w_down, &params.w_up, params.config.alpha, input, &mut hidden, &mut out);
    out
}

/// Class logits from concept features (`J x dim`), i.e. the second stage
/// on its own.
pub fn bag_aggregate(params: &HeadParams, features: &[f64], concepts: &ConceptSet) -> [f64; NUM_CLASSES] {
    let d = params.config.dim;
    let jt = features.len() / d;
    let mut logits = [0.0; NUM_CLASSES];
    for (y, logit) in logits.iter_mut().enumerate() {
        let p = &concepts.class_prompts[y];
        let mut w: Vec<f64> = features
            .chunks_exact(d)
            .map(|f| dot(f, p) / (norm(f) * params.config.tau_bag))
            .collect();
        softmax_in_place(&mut w);
        let mut pooled = vec![0.0; d];
        for j in 0..jt {
            axpy(w[j], &features[j * d..(j + 1) * d], &mut pooled);
        }
        let g = adapter_forward(params, &pooled);
        *logit = dot(&g, p) / (norm(&g) * params.config.tau_cls);
    }
    logits
}
