//! Synthetic embedding benchmarks.
//!
//! Each class gets a unit "text" direction. A fraction of classes is grouped
//! into confusable pairs: the partner direction is placed by spherical
//! interpolation away from its anchor at a fixed text distance, and its visual
//! offset is planted the same way so the pair is close in both modalities.
//! Every other pair of directions keeps at least `min_separation` apart.
//!
//! Image class centers are `image_scale * normalize(t + visual_offset * v + modality_gap * g)`
//! with `v` a per-class unit offset and `g` a direction shared by all classes;
//! samples add isotropic noise whose expected norm is `intra_class_spread`.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ClassCatalog, ClassEntry, EmbeddingStore, LabeledEmbedding, Split};
use crate::error::{RapfError, Result};
use crate::rng::{self, tag, Rng};

const PLACEMENT_ATTEMPTS: usize = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub intra_class_spread: f64,
    pub confusable_fraction: f64,
    pub seed: u64,
    /// Text distance between the two members of a confusable pair.
    pub pair_distance: f64,
    /// Minimum text distance between any two classes that are not partners.
    pub min_separation: f64,
    pub image_scale: f64,
    pub visual_offset: f64,
    pub modality_gap: f64,
    /// Sub-clusters per class; samples pick one uniformly.
    pub modes_per_class: usize,
    /// Norm of each sub-cluster's offset from the class center.
    pub mode_spread: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 20,
            dim: 32,
            train_per_class: 100,
            test_per_class: 50,
            intra_class_spread: 0.5,
            confusable_fraction: 0.5,
            seed: 0,
            pair_distance: 0.5,
            min_separation: 0.9,
            image_scale: 1.0,
            visual_offset: 0.0,
            modality_gap: 0.0,
            modes_per_class: 1,
            mode_spread: 0.0,
        }
    }
}

fn random_unit(rng: &mut Rng, dim: usize) -> DVector<f64> {
    loop {
        let v = DVector::<f64>::from_fn(dim, |_, _| rng.sample(StandardNormal));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Unit vector at angle `theta` from unit `anchor`, rotated towards a random
/// direction.
fn slerp_away(rng: &mut Rng, anchor: &DVector<f64>, theta: f64) -> DVector<f64> {
    loop {
        let r = random_unit(rng, anchor.len());
        let perp = &r - anchor * anchor.dot(&r);
        let n = perp.norm();
        if n > 1e-6 {
            let v = anchor * theta.cos() + perp * (theta.sin() / n);
            return v.normalize();
        }
    }
}

fn far_from_all(
    v: &DVector<f64>,
    placed: &[Option<DVector<f64>>],
    skip: Option<usize>,
    min: f64,
) -> bool {
    placed
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != skip)
        .filter_map(|(_, p)| p.as_ref())
        .all(|p| (v - p).norm() >= min)
}

/// Returns, per class, its partner if it belongs to a confusable pair.
fn plan_pairs(spec: &SynthSpec, rng: &mut Rng) -> Result<Vec<Option<usize>>> {
    let k = spec.num_classes;
    let want_classes = (spec.confusable_fraction * k as f64 - 1e-9).ceil().max(0.0) as usize;
    let num_pairs = want_classes.div_ceil(2);
    if 2 * num_pairs > k {
        return Err(RapfError::Config(format!(
            "confusable_fraction {} needs {num_pairs} disjoint pairs but only {k} classes exist",
            spec.confusable_fraction
        )));
    }
    let mut ids: Vec<usize> = (0..k).collect();
    ids.shuffle(rng);
    let mut partner = vec![None; k];
    for p in 0..num_pairs {
        let (a, b) = (ids[2 * p], ids[2 * p + 1]);
        partner[a] = Some(b);
        partner[b] = Some(a);
    }
    Ok(partner)
}

/// Places unit directions so that partners sit at `pair_dist` and everything
/// else at least `min_sep` apart.
fn place(
    rng: &mut Rng,
    dim: usize,
    partner: &[Option<usize>],
    pair_dist: f64,
    min_sep: f64,
) -> Result<Vec<DVector<f64>>> {
    let theta = 2.0 * (pair_dist / 2.0).asin();
    let mut placed: Vec<Option<DVector<f64>>> = vec![None; partner.len()];
    for c in 0..partner.len() {
        if placed[c].is_some() {
            continue;
        }
        let mut ok = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let v = random_unit(rng, dim);
            if !far_from_all(&v, &placed, None, min_sep) {
                continue;
            }
            match partner[c] {
                None => {
                    placed[c] = Some(v);
                    ok = true;
                }
                Some(p) => {
                    let w = slerp_away(rng, &v, theta);
                    placed[c] = Some(v);
                    if far_from_all(&w, &placed, Some(c), min_sep) {
                        placed[p] = Some(w);
                        ok = true;
                    } else {
                        placed[c] = None;
                        continue;
                    }
                }
            }
            break;
        }
        if !ok {
            return Err(RapfError::Config(format!(
                "cannot place {} classes in dimension {dim} with separation {min_sep}",
                partner.len()
            )));
        }
    }
    Ok(placed.into_iter().map(Option::unwrap).collect())
}

pub fn make_synthetic(spec: &SynthSpec) -> Result<EmbeddingStore> {
    if spec.num_classes < 2 {
        return Err(RapfError::Config(
            "synthetic store needs at least 2 classes".into(),
        ));
    }
    if spec.dim < 8 {
        return Err(RapfError::Config("synthetic store needs dim >= 8".into()));
    }
    if !(0.0..=1.0).contains(&spec.confusable_fraction) {
        return Err(RapfError::Config(
            "confusable_fraction must lie in [0, 1]".into(),
        ));
    }
    if !(spec.intra_class_spread >= 0.0 && spec.image_scale > 0.0) {
        return Err(RapfError::Config(
            "spread must be >= 0 and image_scale > 0".into(),
        ));
    }
    if !(spec.pair_distance > 0.0
        && spec.pair_distance < spec.min_separation
        && spec.min_separation <= 2.0)
    {
        return Err(RapfError::Config(
            "need 0 < pair_distance < min_separation <= 2".into(),
        ));
    }

    let mut rng = rng::stream(spec.seed, &[tag::SYNTH_TEXT]);
    let partner = plan_pairs(spec, &mut rng)?;
    let texts = place(
        &mut rng,
        spec.dim,
        &partner,
        spec.pair_distance,
        spec.min_separation,
    )?;
    // visual offsets mirror the text geometry of the pairs, with no separation demand
    let offsets = place(&mut rng, spec.dim, &partner, spec.pair_distance, 0.0)?;
    let gap = random_unit(&mut rng, spec.dim);

    let entries = texts
        .iter()
        .enumerate()
        .map(|(c, t)| ClassEntry {
            name: match partner[c] {
                Some(p) => format!("class-{c:03}~{p:03}"),
                None => format!("class-{c:03}"),
            },
            text: t.iter().map(|&x| x as f32).collect(),
        })
        .collect();
    let catalog = ClassCatalog::new(spec.dim, entries)?;

    let noise_sd = spec.intra_class_spread / (spec.dim as f64).sqrt();
    let mut records =
        Vec::with_capacity(spec.num_classes * (spec.train_per_class + spec.test_per_class));
    for (c, t) in texts.iter().enumerate() {
        let center = (t + &offsets[c] * spec.visual_offset + &gap * spec.modality_gap).normalize()
            * spec.image_scale;
        let mut rng = rng::stream(spec.seed, &[tag::SYNTH_IMAGE, c as u64]);
        let modes: Vec<DVector<f64>> = (0..spec.modes_per_class.max(1))
            .map(|_| &center + random_unit(&mut rng, spec.dim) * spec.mode_spread)
            .collect();
        let splits = std::iter::repeat_n(Split::Train, spec.train_per_class)
            .chain(std::iter::repeat_n(Split::Test, spec.test_per_class));
        for split in splits {
            let mode = &modes[rng.random_range(0..modes.len())];
            let vector = mode
                .iter()
                .map(|&m| {
                    let z: f64 = rng.sample(StandardNormal);
                    (m + noise_sd * z) as f32
                })
                .collect();
            records.push(LabeledEmbedding {
                class_id: c as u32,
                split,
                vector,
            });
        }
    }
    EmbeddingStore::new(catalog, records)
}
