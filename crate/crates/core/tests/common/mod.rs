#![allow(dead_code)]

use plexus_core::head::{Bag, HeadConfig, HeadParams};
use plexus_core::store::ConceptSet;
use plexus_core::Label;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn unit_rows(mut v: Vec<f64>, d: usize) -> Vec<f64> {
    for row in v.chunks_exact_mut(d) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Random concept set with `m` instance concepts alternating between classes.
pub fn random_concepts(rng: &mut impl Rng, d: usize, m: usize) -> ConceptSet {
    ConceptSet {
        dim: d,
        instance_concepts: unit_rows(gaussian(rng, m * d), d),
        instance_classes: (0..m).map(|j| Label::from_index(j % 2).unwrap()).collect(),
        names: (0..m).map(|j| format!("concept {j}")).collect(),
        class_prompts: [unit_rows(gaussian(rng, d), d), unit_rows(gaussian(rng, d), d)],
        class_prompt_names: ["negative".into(), "positive".into()],
    }
}

pub fn random_bag(rng: &mut impl Rng, d: usize, n: usize, label: Label) -> Bag {
    Bag::from_rows(d, &gaussian(rng, n * d), label).expect("nonzero rows")
}

/// Initialized head with every tensor perturbed away from its special
/// starting values, so all gradient paths are live.
pub fn random_params(rng: &mut impl Rng, cfg: &HeadConfig, m: usize) -> HeadParams {
    let mut p = HeadParams::init(cfg, m).unwrap();
    for block in p.blocks_mut() {
        for v in block.iter_mut() {
            *v += 0.3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) / (cfg.dim as f64).sqrt();
        }
    }
    p
}
