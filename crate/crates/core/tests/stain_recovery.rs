use plexus_core::stain::{angle_deg, fit_stain_profile, normalize_to_reference, StainParams, StainProfile};
use plexus_core::synth::{gen_slide, render_stained, ConcentrationMix, SynthSpec, DEFAULT_STAINS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Stain pair jittered around the H&E defaults by up to 0.08 per component.
fn jittered_stains(rng: &mut impl Rng) -> [[f64; 3]; 2] {
    DEFAULT_STAINS.map(|s| unit(s.map(|c| (c + rng.random_range(-0.08..0.08)).max(0.01))))
}

fn max_channel_diff(a: &[u8], b: &[u8]) -> u8 {
    a.iter().zip(b).map(|(x, y)| x.abs_diff(*y)).max().unwrap_or(0)
}

#[test]
fn twenty_constructed_images() {
    let params = StainParams::default();
    let reference = StainProfile::reference();
    let mut worst = 0.0f64;
    for k in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(k);
        let stains = jittered_stains(&mut rng);
        let img = render_stained(&mut rng, 160, 160, &stains, &ConcentrationMix::default());
        let p = fit_stain_profile(&img, &params).unwrap();
        for j in 0..2 {
            let err = angle_deg(p.column(j), stains[j]);
            worst = worst.max(err);
            assert!(err < 2.0, "image {k} stain {j}: {err:.3} deg");
        }
        let once = normalize_to_reference(&img, &reference, &params).unwrap();
        let twice = normalize_to_reference(&once, &reference, &params).unwrap();
        let d = max_channel_diff(once.data(), twice.data());
        assert!(d <= 3, "image {k}: renormalization moved a channel by {d}");

    }
    assert!(worst < 2.0);
}

#[test]
fn bundled_reference_is_the_canonical_slide_fit() {
    let (img, _) = gen_slide(&SynthSpec::default(), 0);
    let fit = fit_stain_profile(&img, &StainParams::default()).unwrap();
    assert_eq!(fit, StainProfile::reference());
}
