//! Browser bindings for three interactive views: stain normalization,
//! tiling with the one-pixel label rule, and concept attention over a bag.
//! Every entry point takes plain numbers and returns JSON or RGBA bytes so
//! the same functions run natively in tests.

use plexus_core::head::{Bag, HeadConfig};
use plexus_core::image::RgbImage;
use plexus_core::optim::TrainConfig;
use plexus_core::stain::{angle_deg, fit_stain_profile, normalize_to_reference, StainParams, StainProfile};
use plexus_core::synth::{gen_bags, gen_slide, render_stained, ConcentrationMix, EmbedSpec, SynthSpec, DEFAULT_STAINS};
use plexus_core::tiler::index_slide;
use plexus_core::train::train;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn rgba(img: &RgbImage) -> Vec<u8> {
    img.pixels().flat_map(|[r, g, b]| [r, g, b, 255]).collect()
}

/// Stain pair tilted away from the H&E defaults by up to `shift` per
/// component, renormalized.
fn shifted_stains(rng: &mut impl Rng, shift: f64) -> [[f64; 3]; 2] {
    DEFAULT_STAINS.map(|s| {
        let v = s.map(|c| (c + rng.random_range(-shift..=shift)).max(0.01));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        v.map(|c| c / n)
    })
}

#[derive(Serialize)]
struct StainReport {
    width: usize,
    height: usize,
    true_stains: [[f64; 3]; 2],
    fitted_stains: [[f64; 3]; 2],
    angle_error_deg: [f64; 2],
    max_concentrations: [f64; 2],
}

/// Renders a two-stain image, fits its profile and maps it onto the bundled
/// reference. Returns JSON with the fit; pixels come from [`stain_pixels`].
#[wasm_bindgen]
pub fn stain_demo(seed: u32, shift: f64, size: usize) -> Result<String, String> {
    let (_, _, report) = stain_run(seed, shift, size)?;
    Ok(serde_json::to_string(&report).expect("report serializes"))
}

/// RGBA bytes of the original image followed by the normalized one.
#[wasm_bindgen]
pub fn stain_pixels(seed: u32, shift: f64, size: usize) -> Result<Vec<u8>, String> {
    let (orig, norm, _) = stain_run(seed, shift, size)?;
    let mut out = rgba(&orig);
    out.extend(rgba(&norm));
    Ok(out)
}

fn stain_run(seed: u32, shift: f64, size: usize) -> Result<(RgbImage, RgbImage, StainReport), String> {
    if !(0.0..=0.3).contains(&shift) || !(16..=512).contains(&size) {
        return Err("shift must lie in [0, 0.3] and size in [16, 512]".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(seed));
    let stains = shifted_stains(&mut rng, shift);
    let img = render_stained(&mut rng, size, size, &stains, &ConcentrationMix::default());
    let params = StainParams::default();
    let fit = fit_stain_profile(&img, &params).map_err(|e| e.to_string())?;
    let norm = normalize_to_reference(&img, &StainProfile::reference(), &params).map_err(|e| e.to_string())?;
    let report = StainReport {
        width: size,
        height: size,
        true_stains: stains,
        fitted_stains: [fit.column(0), fit.column(1)],
        angle_error_deg: [angle_deg(fit.column(0), stains[0]), angle_deg(fit.column(1), stains[1])],
        max_concentrations: fit.max_concentrations,
    };
    Ok((img, norm, report))
}

#[derive(Serialize)]
struct TileView {
    x: usize,
    y: usize,
    plexus: bool,
}

#[derive(Serialize)]
struct TileReport {
    width: usize,
    height: usize,
    tile: usize,
    stride: usize,
    tiles: Vec<TileView>,
}

fn tile_spec(seed: u32, side: usize) -> SynthSpec {
    SynthSpec {
        n_slides: 1,
        slide_width: side,
        slide_height: side,
        blob_count: (1, 3),
        blob_radius: (6.0, 30.0),
        seed: u64::from(seed),
        ..SynthSpec::default()
    }
}

/// Tiles a synthetic working-resolution slide; a tile is plexus when any
/// mask pixel inside it is set.
#[wasm_bindgen]
pub fn tile_demo(seed: u32, side: usize, tile: usize, stride: usize) -> Result<String, String> {
    if !(224..=1024).contains(&side) || tile == 0 || stride == 0 || tile > side {
        return Err("need 224 <= side <= 1024 and 0 < tile <= side, stride > 0".into());
    }
    let (_, mask) = gen_slide(&tile_spec(seed, side), 0);
    let tiles = index_slide("demo", &mask, tile, stride).map_err(|e| e.to_string())?;
    let report = TileReport {
        width: side,
        height: side,
        tile,
        stride,
        tiles: tiles
            .iter()
            .map(|t| TileView {
                x: t.x,
                y: t.y,
                plexus: t.label.is_positive(),
            })
            .collect(),
    };
    Ok(serde_json::to_string(&report).expect("report serializes"))
}

/// RGBA bytes of the synthetic slide with its mask tinted in.
#[wasm_bindgen]
pub fn tile_pixels(seed: u32, side: usize) -> Result<Vec<u8>, String> {
    if !(224..=1024).contains(&side) {
        return Err("side must lie in [224, 1024]".into());
    }
    let (img, mask) = gen_slide(&tile_spec(seed, side), 0);
    Ok(img
        .pixels()
        .zip(mask.data())
        .flat_map(|([r, g, b], &m)| if m != 0 { [r / 2 + 127, g / 2, b / 2, 255] } else { [r, g, b, 255] })
        .collect())
}

#[derive(Serialize)]
struct AttentionReport {
    concepts: Vec<String>,
    /// `concepts x instances`, each row sums to one.
    attention: Vec<Vec<f64>>,
    /// Which instances were drawn near the plexus centroid.
    evidence: Vec<bool>,
    label: String,
    plexus_probability: f64,
    val_accuracy: f64,
}

/// Trains a small head on synthetic bags with the given class separation,
/// then shows its concept attention over one held-out positive bag.
#[wasm_bindgen]
pub fn attention_demo(separation: f64, seed: u32, epochs: usize) -> Result<String, String> {
    if !(0.0..=1.0).contains(&separation) || !(2..=40).contains(&epochs) {
        return Err("separation must lie in [0, 1] and epochs in [2, 40]".into());
    }
    let dim = 32;
    let spec = SynthSpec {
        n_slides: 3,
        embed: EmbedSpec {
            dim,
            instances: 12,
            bags_per_slide: 40,
            separation,
            ..EmbedSpec::default()
        },
        seed: u64::from(seed),
        ..SynthSpec::default()
    };
    let data = gen_bags(&spec);
    let bags: Vec<Bag> = data
        .bags
        .iter()
        .map(Bag::from_embedding)
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let (tr, rest) = bags.split_at(80);
    let head = HeadConfig {
        dim,
        ..HeadConfig::default()
    };
    let cfg = TrainConfig {
        total_epochs: epochs,
        warmup_epochs: 1,
        batch_size: 8,
        // Few steps per epoch here, so a larger rate than the pipeline's.
        base_lr: 3e-3,
        seed: u64::from(seed),
        ..TrainConfig::default()
    };
    let out = train(tr, rest, &data.concepts, &head, &cfg).map_err(|e| e.to_string())?;
    let k = rest.iter().position(|b| b.label.is_positive()).ok_or("no positive bag held out")?;
    let (shown, shown_src) = (&rest[k], &data.bags[80 + k]);
    let trace = out.params.forward(shown, &data.concepts).map_err(|e| e.to_string())?;
    let mut names = data.concepts.names.clone();
    names.extend((0..head.data_concepts).map(|k| format!("learned concept {}", k + 1)));
    let evidence = (0..shown_src.len())
        .map(|i| {
            let row = shown_src.row(i);
            let dp: f64 = row.iter().zip(&data.positive_centroid).map(|(a, b)| f64::from(*a) * b).sum();
            let db: f64 = row.iter().zip(&data.background_centroid).map(|(a, b)| f64::from(*a) * b).sum();
            separation > 0.0 && dp > db
        })
        .collect();
    let report = AttentionReport {
        concepts: names,
        attention: (0..trace.num_concepts).map(|j| trace.attention_row(j).to_vec()).collect(),
        evidence,
        label: shown.label.to_string(),
        plexus_probability: trace.score(),
        val_accuracy: out.history[out.best_epoch].val_acc,
    };
    Ok(serde_json::to_string(&report).expect("report serializes"))
}
