//! Deterministic synthetic data: stained slides with elliptical plexus
//! masks for the imaging path, and labeled embedding bags with a sparse
//! positive signal for the learning path.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::image::{MaskImage, RgbImage};
use crate::store::{dot, norm, ConceptSet, EmbeddingBag, PromptLevel, PromptLine};
use crate::{seed_for, Label};

/// Unit OD vectors of hematoxylin and eosin (Ruifrok-Johnston values).
pub const DEFAULT_STAINS: [[f64; 3]; 2] = [
    [0.651_107_825_757_449_2, 0.701_193_043_123_406_8, 0.290_494_260_722_554_24],
    [0.070_101_721_297_366_7, 0.991_438_629_777_043_2, 0.110_159_847_753_004_8],
];

/// Per-pixel stain concentrations. A `dominant_fraction` of pixels carry a
/// single stain with the other at `min`; the rest mix both uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationMix {
    pub min: f64,
    pub max: f64,
    pub dominant_fraction: f64,
}

impl Default for ConcentrationMix {
    fn default() -> Self {
        Self {
            min: 0.05,
            max: 1.5,
            dominant_fraction: 0.6,
        }
    }
}

impl ConcentrationMix {
    fn draw(&self, rng: &mut impl Rng) -> [f64; 2] {
        let major = rng.random_range(self.min..=self.max);
        let minor = if rng.random::<f64>() < self.dominant_fraction {
            self.min
        } else {
            rng.random_range(self.min..=self.max)
        };
        if rng.random::<bool>() {
            [major, minor]
        } else {
            [minor, major]
        }
    }
}

fn od_to_u8(od: f64) -> u8 {
    (255.0 * 10f64.powf(-od) - 1.0).round().clamp(0.0, 255.0) as u8
}

fn stain_pixel(stains: &[[f64; 3]; 2], c: [f64; 2]) -> [u8; 3] {
    std::array::from_fn(|ch| od_to_u8(stains[0][ch] * c[0] + stains[1][ch] * c[1]))
}

/// Renders an image whose pixels are Beer-Lambert mixtures of `stains`.
pub fn render_stained(
    rng: &mut impl Rng,
    width: usize,
    height: usize,
    stains: &[[f64; 3]; 2],
    mix: &ConcentrationMix,
) -> RgbImage {
    let data = (0..width * height)
        .flat_map(|_| stain_pixel(stains, mix.draw(rng)))
        .collect();
    RgbImage::new(width, height, data).expect("nonempty")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedSpec {
    pub dim: usize,
    pub instances: usize,
    /// Class separation in [0, 1]: the angle between the positive and
    /// background centroids is `separation * 90` degrees.
    pub separation: f64,
    /// Per-coordinate Gaussian noise added before normalization.
    pub noise: f64,
    pub bags_per_slide: usize,
    /// Cosine between an expert concept and its class centroid.
    pub concept_alignment: f64,
    /// Cosine between a class prompt and its class centroid.
    pub prompt_alignment: f64,
}

impl Default for EmbedSpec {
    fn default() -> Self {
        Self {
            dim: 512,
            instances: 49,
            separation: 1.0,
            noise: 0.01,
            bags_per_slide: 500,
            concept_alignment: 0.5,
            prompt_alignment: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_slides: usize,
    pub slide_width: usize,
    pub slide_height: usize,
    pub blob_count: (usize, usize),
    /// Semi-axis range in pixels.
    pub blob_radius: (f64, f64),
    pub stains: [[f64; 3]; 2],
    pub concentrations: ConcentrationMix,
    pub embed: EmbedSpec,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_slides: 30,
            slide_width: 896,
            slide_height: 896,
            blob_count: (2, 5),
            blob_radius: (20.0, 70.0),
            stains: DEFAULT_STAINS,
            concentrations: ConcentrationMix::default(),
            embed: EmbedSpec::default(),
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), String> {
        let e = &self.embed;
        if !(0.0..=1.0).contains(&e.separation) {
            return Err(format!("separation {} outside [0, 1]", e.separation));
        }
        if !(e.noise >= 0.0) {
            return Err("noise must be non-negative".into());
        }
        if self.slide_width < 224 || self.slide_height < 224 {
            return Err("slides must be at least 224x224".into());
        }
        if e.dim < 2 || e.instances == 0 || e.bags_per_slide == 0 {
            return Err("embedding dim >= 2, instances >= 1 and bags_per_slide >= 1 required".into());
        }
        if self.blob_count.0 > self.blob_count.1 || self.blob_radius.0 > self.blob_radius.1 {
            return Err("blob ranges must be ordered".into());
        }
        Ok(())
    }

    pub fn slide_id(&self, idx: usize) -> String {
        format!("S{idx:02}")
    }
}

/// One synthetic slide and its plexus mask.
pub fn gen_slide(spec: &SynthSpec, idx: usize) -> (RgbImage, MaskImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(spec.seed, &format!("slide/{idx}")));
    let (w, h) = (spec.slide_width, spec.slide_height);
    let mut mask = MaskImage::zeros(w, h).expect("nonempty");
    let blobs = rng.random_range(spec.blob_count.0..=spec.blob_count.1);
    for _ in 0..blobs {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let a = rng.random_range(spec.blob_radius.0..=spec.blob_radius.1);
        let b = rng.random_range(spec.blob_radius.0..=spec.blob_radius.1);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let (s, c) = theta.sin_cos();
        let reach = a.max(b).ceil() as i64;
        for y in (cy as i64 - reach).max(0)..(cy as i64 + reach + 1).min(h as i64) {
            for x in (cx as i64 - reach).max(0)..(cx as i64 + reach + 1).min(w as i64) {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let u = (dx * c + dy * s) / a;
                let v = (-dx * s + dy * c) / b;
                if u * u + v * v <= 1.0 {
                    mask.set(x as usize, y as usize, 255);
                }
            }
        }
    }
    let mix = &spec.concentrations;
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let mut conc = mix.draw(&mut rng);
            if mask.get(x, y) != 0 {
                // Plexus reads darker in hematoxylin.
                conc[0] = (conc[0] * 1.3).min(mix.max);
            }
            data.extend(stain_pixel(&spec.stains, conc));
        }
    }
    (RgbImage::new(w, h, data).expect("nonempty"), mask)
}

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

/// Unit vector orthogonal to every vector in `basis` (assumed orthonormal).
fn random_orthogonal(rng: &mut impl Rng, dim: usize, basis: &[&[f64]]) -> Vec<f64> {
    let mut v = gaussian(rng, dim);
    for b in basis {
        let p = dot(&v, b);
        v.iter_mut().zip(b.iter()).for_each(|(x, y)| *x -= p * y);
    }
    unit(v)
}

/// `cos(angle) * anchor + sin(angle) * (random direction orthogonal to the
/// centroids)`.
fn tilt(rng: &mut impl Rng, anchor: &[f64], cosine: f64, centroids: &[&[f64]]) -> Vec<f64> {
    let off = random_orthogonal(rng, anchor.len(), centroids);
    let sine = (1.0 - cosine * cosine).max(0.0).sqrt();
    unit(anchor.iter().zip(&off).map(|(a, o)| cosine * a + sine * o).collect())
}

/// Expert descriptors used as concept names for synthetic data.
pub const EXPERT_PROMPTS: [(Label, PromptLevel, &str); 6] = [
    (
        Label::Plexus,
        PromptLevel::Instance,
        "Clustered large nuclei with prominent nucleoli: Fine, wavy fibrous mesh structures.",
    ),
    (
        Label::Plexus,
        PromptLevel::Instance,
        "Clustered large neuronal cell bodies with prominent nucleoli: Reticular stromal fibre networks.",
    ),
    (
        Label::NoPlexus,
        PromptLevel::Instance,
        "Absence of clustered ganglion cells: Uniform smooth muscle layers lacking neural structures.",
    ),
    (
        Label::NoPlexus,
        PromptLevel::Instance,
        "Enlarged, densely packed nerve fibres without clustered nuclei.",
    ),
    (
        Label::Plexus,
        PromptLevel::Bag,
        "An H&E image of muscularis propria containing myenteric plexus.",
    ),
    (
        Label::NoPlexus,
        PromptLevel::Bag,
        "An H&E image of muscularis propria without myenteric plexus.",
    ),
];

pub fn expert_prompt_lines() -> Vec<PromptLine> {
    EXPERT_PROMPTS
        .iter()
        .map(|(class, level, text)| PromptLine {
            class: *class,
            level: *level,
            text: (*text).to_owned(),
        })
        .collect()
}

/// Synthetic embedding dataset plus the construction centroids.
#[derive(Clone, Debug)]
pub struct SynthBags {
    pub bags: Vec<EmbeddingBag>,
    pub concepts: ConceptSet,
    pub slide_ids: Vec<String>,
    pub positive_centroid: Vec<f64>,
    pub background_centroid: Vec<f64>,
}

pub fn gen_bags(spec: &SynthSpec) -> SynthBags {
    let e = &spec.embed;
    let d = e.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(spec.seed, "centroids"));
    let background = unit(gaussian(&mut rng, d));
    let ortho = random_orthogonal(&mut rng, d, &[&background]);
    let angle = e.separation * std::f64::consts::FRAC_PI_2;
    let (s, c) = angle.sin_cos();
    let positive: Vec<f64> = background.iter().zip(&ortho).map(|(b, o)| c * b + s * o).collect();

    let centroids: [&[f64]; 2] = [&background, &ortho];
    let anchor = |l: Label| if l.is_positive() { &positive } else { &background };
    let mut concepts = ConceptSet {
        dim: d,
        instance_concepts: Vec::new(),
        instance_classes: Vec::new(),
        names: Vec::new(),
        class_prompts: [Vec::new(), Vec::new()],
        class_prompt_names: [String::new(), String::new()],
    };
    for line in expert_prompt_lines() {
        match line.level {
            PromptLevel::Instance => {
                let row = tilt(&mut rng, anchor(line.class), e.concept_alignment, &centroids);
                concepts.instance_concepts.extend(row);
                concepts.instance_classes.push(line.class);
                concepts.names.push(line.text);
            }
            PromptLevel::Bag => {
                let row = tilt(&mut rng, anchor(line.class), e.prompt_alignment, &centroids);
                concepts.class_prompts[line.class.index()] = row;
                concepts.class_prompt_names[line.class.index()] = line.text;
            }
        }
    }
    // Round through f32 so the in-memory set equals what a KDVE file holds.
    let round = |v: &mut Vec<f64>| {
        for x in v.iter_mut() {
            *x = f64::from(*x as f32);
        }
        let n = norm(v);
        v.iter_mut().for_each(|x| *x /= n);
    };
    let mut rows: Vec<Vec<f64>> = concepts.instance_concepts.chunks(d).map(<[f64]>::to_vec).collect();
    rows.iter_mut().for_each(round);
    concepts.instance_concepts = rows.concat();
    concepts.class_prompts.iter_mut().for_each(round);

    let n_pos = e.instances.div_ceil(4);
    let mut bags = Vec::with_capacity(spec.n_slides * e.bags_per_slide);
    let mut slide_ids = Vec::with_capacity(spec.n_slides);
    for idx in 0..spec.n_slides {
        let slide = spec.slide_id(idx);
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(spec.seed, &format!("bags/{slide}")));
        for b in 0..e.bags_per_slide {
            let label = if b % 2 == 0 { Label::Plexus } else { Label::NoPlexus };
            let mut which: Vec<bool> = (0..e.instances)
                .map(|i| label.is_positive() && i < n_pos)
                .collect();
            which.shuffle(&mut rng);
            let mut instances = Vec::with_capacity(e.instances * d);
            for is_pos in which {
                let center = if is_pos { &positive } else { &background };
                let noise = gaussian(&mut rng, d);
                let x = unit(center.iter().zip(&noise).map(|(m, g)| m + e.noise * g).collect());
                instances.extend(x.into_iter().map(|v| v as f32));
            }
            bags.push(EmbeddingBag {
                id: format!("{slide}/{b:04}"),
                label,
                dim: d,
                instances,
            });
        }
        slide_ids.push(slide);
    }
    SynthBags {
        bags,
        concepts,
        slide_ids,
        positive_centroid: positive,
        background_centroid: background,
    }
}

/// Nearest-centroid classifier applied to each bag's most positive-looking
/// instance, using the true construction centroids.
pub fn centroid_oracle(bag: &EmbeddingBag, positive: &[f64], background: &[f64]) -> Label {
    let best = (0..bag.len())
        .map(|i| bag.row(i).iter().map(|&v| f64::from(v)).collect::<Vec<f64>>())
        .max_by(|a, b| dot(a, positive).total_cmp(&dot(b, positive)))
        .expect("nonempty bag");
    if dot(&best, positive) > dot(&best, background) {
        Label::Plexus
    } else {
        Label::NoPlexus
    }
}

/// Accuracy of [`centroid_oracle`] over `bags`.
pub fn centroid_oracle_accuracy(data: &SynthBags, bags: &[EmbeddingBag]) -> f64 {
    let hits = bags
        .iter()
        .filter(|b| centroid_oracle(b, &data.positive_centroid, &data.background_centroid) == b.label)
        .count();
    hits as f64 / bags.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stain::{angle_deg, fit_stain_profile, StainParams};

    fn small() -> SynthSpec {
        SynthSpec {
            n_slides: 3,
            slide_width: 256,
            slide_height: 256,
            embed: EmbedSpec {
                dim: 32,
                instances: 9,
                bags_per_slide: 20,
                ..EmbedSpec::default()
            },
            ..SynthSpec::default()
        }
    }

    #[test]
    fn slides_are_deterministic() {
        let spec = small();
        assert_eq!(gen_slide(&spec, 1), gen_slide(&spec, 1));
        assert_ne!(gen_slide(&spec, 1).0, gen_slide(&spec, 2).0);
    }

    #[test]
    fn no_blobs_no_mask() {
        let spec = SynthSpec {
            blob_count: (0, 0),
            ..small()
        };
        let (_, mask) = gen_slide(&spec, 0);
        assert!(mask.data().iter().all(|&v| v == 0));
        let (_, mask) = gen_slide(&small(), 0);
        assert!(mask.data().iter().any(|&v| v != 0));
    }

    #[test]
    fn slide_stains_recoverable() {
        let spec = small();
        let (img, _) = gen_slide(&spec, 0);
        let p = fit_stain_profile(&img, &StainParams::default()).unwrap();
        for j in 0..2 {
            assert!(angle_deg(p.column(j), spec.stains[j]) < 2.0);
        }
    }

    #[test]
    fn bags_are_deterministic_and_shaped() {
        let spec = small();
        let a = gen_bags(&spec);
        let b = gen_bags(&spec);
        assert_eq!(a.bags, b.bags);
        assert_eq!(a.bags.len(), 60);
        assert_eq!(a.bags[0].len(), 9);
        assert_eq!(a.bags[0].label, Label::Plexus);
        assert_eq!(a.bags[0].slide_id(), "S00");
        for bag in &a.bags {
            for i in 0..bag.len() {
                let n: f64 = bag.row(i).iter().map(|&v| f64::from(v).powi(2)).sum();
                assert!((n.sqrt() - 1.0).abs() < 1e-6);
            }
        }
        a.concepts.check().unwrap();
        assert!((dot(&a.positive_centroid, &a.background_centroid)).abs() < 1e-12);
    }

    #[test]
    fn oracle_separates_at_full_separation() {
        let data = gen_bags(&small());
        assert!(centroid_oracle_accuracy(&data, &data.bags) >= 0.99);
        let spec = SynthSpec {
            embed: EmbedSpec {
                separation: 0.0,
                ..small().embed
            },
            ..small()
        };
        let data = gen_bags(&spec);
        assert!((dot(&data.positive_centroid, &data.background_centroid) - 1.0).abs() < 1e-12);
    }
}
