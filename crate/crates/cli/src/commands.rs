use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use plexus_core::checkpoint::{load_checkpoint, save_checkpoint};
use plexus_core::config::RunConfig;
use plexus_core::cv::{cross_validate, metric_fields, score_report, scores_csv, CvReport, TileScore};
use plexus_core::eval::{kfold_split, render_table, MetricsReport};
use plexus_core::head::Bag;
use plexus_core::image::{MaskImage, RgbImage};
use plexus_core::stain::{fit_stain_profile, normalize_to_reference, StainProfile};
use plexus_core::store::{format_prompts, parse_prompts, read_bags, write_bags, ConceptSet, EmbeddingBag};
use plexus_core::synth::{centroid_oracle_accuracy, gen_bags, gen_slide};
use plexus_core::tiler::{balanced_sample, downsample_mask, index_slide, TileRecord};
use plexus_core::train::{history_csv, predict, train as train_head};
use plexus_core::Label;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::manifest::write_manifest;
use crate::verify::{render, run_checks};
use crate::{DataArgs, Format, NormalizeOp};

fn create_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::data(out.display(), e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::data(path.display(), e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes") + "\n"
}

pub fn synth(cfg: &RunConfig, out: &Path, images: usize) -> Result<(), CliError> {
    let spec = cfg.synth();
    create_dir(out)?;
    let data = gen_bags(&spec);
    write_bags(&data.bags, out.join("bags.kdve"))?;
    write_bags(&data.concepts.to_bags(), out.join("concepts.kdve"))?;
    write(&out.join("prompts.tsv"), format_prompts(&data.concepts.prompt_lines()))?;

    #[derive(Serialize)]
    struct Oracle {
        bags: usize,
        slides: usize,
        nearest_centroid_accuracy: f64,
    }
    let oracle = Oracle {
        bags: data.bags.len(),
        slides: data.slide_ids.len(),
        nearest_centroid_accuracy: centroid_oracle_accuracy(&data, &data.bags),
    };
    write(&out.join("oracle.json"), to_json(&oracle))?;

    if images > 0 {
        let dir = out.join("slides");
        create_dir(&dir)?;
        for idx in 0..images.min(spec.n_slides) {
            let (img, mask) = gen_slide(&spec, idx);
            let id = spec.slide_id(idx);
            img.save_png(dir.join(format!("{id}.png")))?;
            mask.save_png(dir.join(format!("{id}_mask.png")))?;
        }
    }
    write_manifest(out, "synth", cfg, &[])?;
    println!(
        "{} bags from {} slides, nearest-centroid oracle accuracy {:.4}",
        oracle.bags, oracle.slides, oracle.nearest_centroid_accuracy
    );
    Ok(())
}

pub fn normalize(cfg: &RunConfig, op: NormalizeOp) -> Result<(), CliError> {
    let params = cfg.stain();
    match op {
        NormalizeOp::Fit { image, out } => {
            let img = RgbImage::load_png(&image)?;
            let mut profile = fit_stain_profile(&img, &params)?;
            profile.params = params;
            write(&out, to_json(&profile))
        }
        NormalizeOp::Apply { image, profile, out } => {
            let reference = match profile {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| CliError::data(p.display(), e))?;
                    serde_json::from_str::<StainProfile>(&text).map_err(|e| CliError::data(p.display(), e))?
                }
                None => StainProfile::reference(),
            };
            let img = RgbImage::load_png(&image)?;
            normalize_to_reference(&img, &reference, &params)?.save_png(&out)?;
            Ok(())
        }
    }
}

fn slide_id_of(path: &Path) -> Result<String, CliError> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| CliError::Usage(format!("cannot derive a slide id from {}", path.display())))?;
    Ok(stem.strip_suffix("_mask").unwrap_or(stem).to_owned())
}

pub fn tile(cfg: &RunConfig, masks: &[PathBuf], full_resolution: bool, sample: bool, out: &Path) -> Result<(), CliError> {
    let mut records: Vec<TileRecord> = Vec::new();
    for path in masks {
        let mut mask = MaskImage::load_png(path)?;
        if full_resolution {
            mask = downsample_mask(&mask, cfg.downsample)?;
        }
        records.extend(index_slide(&slide_id_of(path)?, &mask, cfg.tile_size, cfg.tile_stride)?);
    }
    if sample {
        records = balanced_sample(&records, &cfg.sample_plan())?;
    }
    let body: String = records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect();
    write(out, body)?;
    let pos = records.iter().filter(|r| r.label.is_positive()).count();
    println!("{} tiles ({pos} plexus, {} no_plexus)", records.len(), records.len() - pos);
    Ok(())
}

struct Loaded {
    bags: Vec<EmbeddingBag>,
    concepts: ConceptSet,
}

fn load(cfg: &RunConfig, data: &DataArgs) -> Result<Loaded, CliError> {
    let text = fs::read_to_string(&data.prompts).map_err(|e| CliError::data(data.prompts.display(), e))?;
    let prompts = parse_prompts(&text)?;
    let concepts = ConceptSet::from_prompts(&prompts, &read_bags(&data.concepts)?)?;
    let bags = read_bags(&data.bags)?;
    if bags.is_empty() {
        return Err(CliError::Data(format!("{} holds no bags", data.bags.display())));
    }
    for (what, dim) in [("bags", bags[0].dim), ("concepts", concepts.dim)] {
        if dim != cfg.dim {
            return Err(CliError::Data(format!(
                "{what} have dimension {dim} but the config says dim = {}",
                cfg.dim
            )));
        }
    }
    Ok(Loaded { bags, concepts })
}

fn inputs(data: &DataArgs) -> [&PathBuf; 3] {
    [&data.bags, &data.prompts, &data.concepts]
}

fn bags_on(bags: &[EmbeddingBag], slides: &[String]) -> Result<Vec<Bag>, CliError> {
    let set: BTreeSet<&str> = slides.iter().map(String::as_str).collect();
    Ok(bags
        .iter()
        .filter(|b| set.contains(b.slide_id()))
        .map(Bag::from_embedding)
        .collect::<Result<_, _>>()?)
}

pub fn train(cfg: &RunConfig, data: &DataArgs, fold: usize, out: &Path) -> Result<(), CliError> {
    let d = load(cfg, data)?;
    let slides: Vec<String> = d
        .bags
        .iter()
        .map(|b| b.slide_id().to_owned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let plan = kfold_split(&slides, cfg.folds, cfg.fold_seed)?;
    let f = plan
        .folds
        .get(fold)
        .ok_or_else(|| CliError::Usage(format!("fold {fold} out of range (k = {})", cfg.folds)))?;
    let tr = bags_on(&d.bags, &f.train)?;
    let va = bags_on(&d.bags, &f.val)?;
    let outcome = train_head(&tr, &va, &d.concepts, &cfg.head(), &cfg.train())?;
    create_dir(out)?;
    save_checkpoint(&outcome.params, out.join("head.kdvh"))?;
    write(&out.join("history.csv"), history_csv(&outcome.history))?;
    write_manifest(out, "train", cfg, &inputs(data))?;
    let best = &outcome.history[outcome.best_epoch];
    println!(
        "best epoch {} of {}: val accuracy {:.4}, val loss {:.6}",
        outcome.best_epoch,
        outcome.history.len(),
        best.val_acc,
        best.val_loss
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct EvalReport {
    bags: usize,
    report: MetricsReport,
}

pub fn eval(cfg: &RunConfig, data: &DataArgs, checkpoint: &Path, out: &Path) -> Result<(), CliError> {
    let d = load(cfg, data)?;
    let params = load_checkpoint(checkpoint)?;
    let bags: Vec<Bag> = d.bags.iter().map(Bag::from_embedding).collect::<Result<_, _>>()?;
    let preds = predict(&params, &bags, &d.concepts)?;
    let labels: Vec<Label> = preds.iter().map(|p| p.label).collect();
    let predicted: Vec<Label> = preds.iter().map(|p| p.predicted).collect();
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let report = EvalReport {
        bags: bags.len(),
        report: score_report(&labels, &predicted, &scores)?,
    };
    create_dir(out)?;
    write(&out.join("report.json"), to_json(&report))?;
    let tiles: Vec<TileScore> = d
        .bags
        .iter()
        .zip(&preds)
        .map(|(b, p)| TileScore {
            fold: 0,
            id: b.id.clone(),
            label: p.label,
            score: p.score,
        })
        .collect();
    write(&out.join("scores.csv"), scores_csv(&tiles))?;
    let ckpt = checkpoint.to_path_buf();
    let mut ins = inputs(data).to_vec();
    ins.push(&ckpt);
    write_manifest(out, "eval", cfg, &ins)?;
    print!("{}", render_table(&[("checkpoint".to_owned(), &report.report)]));
    Ok(())
}

fn render_cv(r: &CvReport) -> String {
    let mut rows = vec![("pooled".to_owned(), &r.pooled)];
    rows.extend(r.folds.iter().map(|f| (format!("fold {}", f.fold), &f.report)));
    let mut out = render_table(&rows);
    out.push_str("\nfold mean ± sd (%)\n");
    for (name, _) in metric_fields(&r.pooled) {
        match r.fold_mean.get(name).copied().flatten() {
            Some(m) => out.push_str(&format!(
                "  {name:<12} {:>7.2} ± {:>5.2}  (n = {})\n",
                100.0 * m.mean,
                100.0 * m.sd,
                m.n
            )),
            None => out.push_str(&format!("  {name:<12}     n/a\n")),
        }
    }
    out
}

pub fn cv(cfg: &RunConfig, data: &DataArgs, out: &Path) -> Result<(), CliError> {
    let d = load(cfg, data)?;
    let report = cross_validate(&d.bags, &d.concepts, &cfg.head(), &cfg.train(), cfg.folds, cfg.fold_seed)?;
    create_dir(out)?;
    write(&out.join("report.json"), to_json(&report))?;
    let table = render_cv(&report);
    write(&out.join("table.txt"), &table)?;
    write(&out.join("scores.csv"), scores_csv(&report.scores))?;
    for f in &report.folds {
        write(&out.join(format!("fold{}_history.csv", f.fold)), history_csv(&f.history))?;
    }
    write_manifest(out, "cv", cfg, &inputs(data))?;
    print!("{table}");
    Ok(())
}

pub fn report(input: &Path, format: Format) -> Result<(), CliError> {
    let text = fs::read_to_string(input).map_err(|e| CliError::data(input.display(), e))?;
    let rendered = if let Ok(r) = serde_json::from_str::<CvReport>(&text) {
        match format {
            Format::Text => render_cv(&r),
            Format::Json => to_json(&r),
        }
    } else if let Ok(r) = serde_json::from_str::<EvalReport>(&text) {
        match format {
            Format::Text => render_table(&[("checkpoint".to_owned(), &r.report)]),
            Format::Json => to_json(&r),
        }
    } else {
        return Err(CliError::Data(format!("{} is neither a cv nor an eval report", input.display())));
    };
    print!("{rendered}");
    Ok(())
}

pub fn verify_metrics() -> Result<(), CliError> {
    let (checks, reports) = run_checks();
    print!("{}", render(&checks, &reports));
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| c.gated && !c.pass)
        .map(|c| format!("{} {}", c.model, c.column))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Mismatch(format!("metric mismatch: {}", failed.join(", "))))
    }
}
