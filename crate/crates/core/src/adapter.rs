//! The trainable linear adapter.
//!
//! An image embedding `e` is mapped to `W e / |W e|` and scored against the
//! unit text embeddings of the seen classes by cosine similarity divided by a
//! temperature. Gradients of both training losses are analytic and include the
//! output normalization.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{RapfError, Result};
use crate::par::{self, Exec};
use crate::store::ClassCatalog;

/// Samples per work unit when splitting a batch across threads.
const CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterState {
    pub weight: DMatrix<f64>,
    pub adam_m: DMatrix<f64>,
    pub adam_v: DMatrix<f64>,
    pub step_count: u64,
    pub temperature: f64,
}

/// Text embeddings of the seen classes, one row per class.
#[derive(Clone, Debug)]
pub struct TextSlice {
    ids: Vec<u32>,
    texts: DMatrix<f64>,
    lookup: HashMap<u32, usize>,
}

impl TextSlice {
    pub fn new(ids: Vec<u32>, texts: DMatrix<f64>) -> Result<Self> {
        if ids.len() != texts.nrows() {
            return Err(RapfError::Contract("text slice ids/rows mismatch".into()));
        }
        let lookup = ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Ok(Self { ids, texts, lookup })
    }

    pub fn from_catalog(catalog: &ClassCatalog, ids: &[u32]) -> Self {
        let mut texts = DMatrix::zeros(ids.len(), catalog.dim());
        for (row, &c) in ids.iter().enumerate() {
            texts.set_row(row, &catalog.text_f64(c).transpose());
        }
        let lookup = ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Self {
            ids: ids.to_vec(),
            texts,
            lookup,
        }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, class_id: u32) -> Option<usize> {
        self.lookup.get(&class_id).copied()
    }

    pub fn text(&self, index: usize) -> DVector<f64> {
        self.texts.row(index).transpose()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.texts
    }

    fn require(&self, class_id: u32) -> Result<usize> {
        self.index_of(class_id).ok_or_else(|| {
            RapfError::Contract(format!("class {class_id} is not among the seen classes"))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HingeItem {
    pub feature: DVector<f64>,
    pub old_class: u32,
    pub new_class: u32,
}

/// One optimization step's worth of data.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub features: Vec<DVector<f64>>,
    pub labels: Vec<u32>,
    pub hinge: Vec<HingeItem>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    pub hinge: f64,
    pub total: f64,
}

/// Result of pushing one feature through the adapter.
struct Projection {
    unit: DVector<f64>,
    norm: f64,
}

/// Pulls a gradient w.r.t. the unit output back to the pre-normalization output.
fn through_normalization(p: &Projection, g_unit: &DVector<f64>) -> DVector<f64> {
    (g_unit - &p.unit * p.unit.dot(g_unit)) / p.norm
}

impl AdapterState {
    /// Identity adapter with zeroed optimizer moments.
    pub fn identity(dim: usize, temperature: f64) -> Result<Self> {
        Self::from_weight(DMatrix::identity(dim, dim), temperature)
    }

    pub fn from_weight(weight: DMatrix<f64>, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(RapfError::Config(format!(
                "temperature {temperature} must be > 0"
            )));
        }
        if !weight.is_square() {
            return Err(RapfError::Contract("adapter weight must be square".into()));
        }
        let d = weight.nrows();
        Ok(Self {
            weight,
            adam_m: DMatrix::zeros(d, d),
            adam_v: DMatrix::zeros(d, d),
            step_count: 0,
            temperature,
        })
    }

    pub fn dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Fresh optimizer moments, keeping the weight.
    pub fn reset_optimizer(&mut self) {
        self.adam_m.fill(0.0);
        self.adam_v.fill(0.0);
        self.step_count = 0;
    }

    fn project(&self, feature: &DVector<f64>) -> Result<Projection> {
        let out = &self.weight * feature;
        let norm = out.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(RapfError::DegenerateProjection);
        }
        Ok(Projection {
            unit: out / norm,
            norm,
        })
    }

    /// `W e / |W e|`.
    pub fn forward(&self, feature: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.project(feature)?.unit)
    }

    /// Cosine similarity to every seen class divided by the temperature.
    pub fn logits(&self, feature: &DVector<f64>, texts: &TextSlice) -> Result<DVector<f64>> {
        if texts.is_empty() {
            return Err(RapfError::Contract("no seen classes".into()));
        }
        Ok(texts.matrix() * self.forward(feature)? / self.temperature)
    }

    /// Index into `texts` of the highest-scoring class.
    pub fn predict(&self, feature: &DVector<f64>, texts: &TextSlice) -> Result<usize> {
        let cos = texts.matrix() * self.forward(feature)?;
        Ok(cos.argmax().0)
    }

    /// Adam update with bias correction. A non-finite gradient leaves the
    /// state untouched.
    pub fn adam_step(&mut self, gradient: &DMatrix<f64>, lr: f64, cfg: &AdamConfig) -> Result<()> {
        if gradient.iter().any(|g| !g.is_finite()) {
            return Err(RapfError::Numerical("non-finite gradient".into()));
        }
        if gradient.shape() != self.weight.shape() {
            return Err(RapfError::Contract("gradient shape mismatch".into()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..gradient.len() {
            let g = gradient[i];
            let m = cfg.beta1 * self.adam_m[i] + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * self.adam_v[i] + (1.0 - cfg.beta2) * g * g;
            self.adam_m[i] = m;
            self.adam_v[i] = v;
            self.weight[i] -= lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
        }
        Ok(())
    }
}

fn sum_partials(
    d: usize,
    partials: Vec<Result<(f64, DMatrix<f64>)>>,
) -> Result<(f64, DMatrix<f64>)> {
    let mut loss = 0.0;
    let mut grad = DMatrix::zeros(d, d);
    for p in partials {
        let (l, g) = p?;
        loss += l;
        grad += g;
    }
    Ok((loss, grad))
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the weight.
pub fn ce_loss_and_grad(
    state: &AdapterState,
    features: &[DVector<f64>],
    labels: &[u32],
    texts: &TextSlice,
    exec: Exec,
) -> Result<(f64, DMatrix<f64>)> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(RapfError::Contract(format!(
            "batch has {} features and {} labels",
            features.len(),
            labels.len()
        )));
    }
    if texts.is_empty() {
        return Err(RapfError::Contract("no seen classes".into()));
    }
    let targets: Vec<usize> = labels
        .iter()
        .map(|&l| texts.require(l))
        .collect::<Result<_>>()?;
    let items: Vec<(&DVector<f64>, usize)> = features.iter().zip(targets).collect();
    let d = state.dim();
    let tau = state.temperature;

    let partials = par::map_chunks(exec, &items, CHUNK, |chunk| {
        let mut loss = 0.0;
        let mut grad = DMatrix::zeros(d, d);
        for &(e, y) in chunk {
            let p = state.project(e)?;
            let z = texts.matrix() * &p.unit / tau;
            let zmax = z.max();
            let exp = z.map(|v| (v - zmax).exp());
            let sum = exp.sum();
            loss += -(z[y] - zmax - sum.ln());
            let mut dz = exp / sum;
            dz[y] -= 1.0;
            let g_unit = texts.matrix().transpose() * dz / tau;
            let g_out = through_normalization(&p, &g_unit);
            grad.ger(1.0, &g_out, e, 1.0);
        }
        Ok((loss, grad))
    });
    let (loss, grad) = sum_partials(d, partials)?;
    let n = features.len() as f64;
    Ok((loss / n, grad / n))
}

/// Margin loss separating generated old-class features from neighboring new
/// classes.
///
/// Each distinct (old, new) pair contributes the mean hinge over its payload
/// entries, and pair contributions are summed. Terms exactly at the hinge
/// point contribute a zero subgradient.
pub fn hinge_loss_and_grad(
    state: &AdapterState,
    payload: &[HingeItem],
    texts: &TextSlice,
    margin: f64,
    exec: Exec,
) -> Result<(f64, DMatrix<f64>)> {
    if margin.is_nan() || margin < 0.0 {
        return Err(RapfError::Config(format!("margin {margin} must be >= 0")));
    }
    let d = state.dim();
    if payload.is_empty() {
        return Ok((0.0, DMatrix::zeros(d, d)));
    }
    let mut per_pair: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for h in payload {
        *per_pair.entry((h.old_class, h.new_class)).or_default() += 1;
    }
    let items: Vec<(&DVector<f64>, usize, usize, f64)> = payload
        .iter()
        .map(|h| {
            let w = 1.0 / per_pair[&(h.old_class, h.new_class)] as f64;
            Ok((
                &h.feature,
                texts.require(h.old_class)?,
                texts.require(h.new_class)?,
                w,
            ))
        })
        .collect::<Result<_>>()?;

    let partials = par::map_chunks(exec, &items, CHUNK, |chunk| {
        let mut loss = 0.0;
        let mut grad = DMatrix::zeros(d, d);
        for &(e, own, other, w) in chunk {
            let p = state.project(e)?;
            let to_own = &p.unit - texts.text(own);
            let to_other = &p.unit - texts.text(other);
            let (d_own, d_other) = (to_own.norm(), to_other.norm());
            let term = d_own - d_other + margin;
            if term <= 0.0 {
                continue;
            }
            loss += w * term;
            let mut g_unit = DVector::zeros(d);
            if d_own > 0.0 {
                g_unit += to_own / d_own;
            }
            if d_other > 0.0 {
                g_unit -= to_other / d_other;
            }
            let g_out = through_normalization(&p, &(g_unit * w));
            grad.ger(1.0, &g_out, e, 1.0);
        }
        Ok((loss, grad))
    });
    sum_partials(d, partials)
}

/// Cross-entropy plus (optionally) hinge on one batch. The two losses are
/// added without weighting.
pub fn loss_and_grad(
    state: &AdapterState,
    batch: &Batch,
    texts: &TextSlice,
    margin: f64,
    exec: Exec,
) -> Result<(LossReport, DMatrix<f64>)> {
    let (ce, mut grad) = ce_loss_and_grad(state, &batch.features, &batch.labels, texts, exec)?;
    let mut hinge = 0.0;
    if !batch.hinge.is_empty() {
        let (h, g) = hinge_loss_and_grad(state, &batch.hinge, texts, margin, exec)?;
        hinge = h;
        grad += g;
    }
    Ok((
        LossReport {
            ce,
            hinge,
            total: ce + hinge,
        },
        grad,
    ))
}

/// Step-decay schedule: `base_lr * gamma^(number of milestones <= epoch)`.
pub fn lr_at(epoch: usize, base_lr: f64, milestones: &[usize], gamma: f64) -> f64 {
    let passed = milestones.iter().filter(|&&m| m <= epoch).count();
    base_lr * gamma.powi(passed as i32)
}
