//! Regenerates `assets/reference_profile.json`: the stain profile fitted to
//! synthetic slide 0 under the default spec.
//!
//!     cargo run -p plexus-core --example regen_reference > crates/core/assets/reference_profile.json

fn main() {
    let spec = plexus_core::synth::SynthSpec::default();
    let (img, _) = plexus_core::synth::gen_slide(&spec, 0);
    let p = plexus_core::stain::fit_stain_profile(&img, &Default::default()).unwrap();
    println!("{}", serde_json::to_string_pretty(&p).unwrap());
}
