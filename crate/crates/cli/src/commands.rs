use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cellshot::datamodel::{
    read_checkpoint, read_dataset_dir, read_mask, read_pgm, write_checkpoint, write_dataset_dir, write_mask,
    write_tensors, Image, Pgm, Tensor, MANIFEST,
};
use cellshot::error::Error;
use cellshot::evaluator::EvalReport;
use cellshot::labelgen::make_targets;
use cellshot::net::{predict, Params};
use cellshot::protocol::{
    adapt, extract_shots, mean_diameter, parse_results_csv, pretrain, rescale_dataset, run_experiment,
    summary_markdown, svg_chart, trend_checks, write_adapt_log, write_epoch_log, AdaptSchedule, ExperimentConfig,
    ResultRow, Variant,
};
use cellshot::segmenter::segment;
use cellshot::synthgen::{gen_dataset, Domain, SynthConfig};
use rayon::prelude::*;
use serde::de::DeserializeOwned;

use crate::overlay::overlay_ppm;
use crate::{AdaptArgs, Cli, CliError, CliResult, Command, SynthArgs};

fn io(path: &Path, source: std::io::Error) -> CliError {
    CliError::Run(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_config<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
}

fn out_dir(cli: &Cli) -> CliResult<&Path> {
    let dir = cli
        .out
        .as_deref()
        .ok_or_else(|| CliError::Usage("this command needs --out <dir>".into()))?;
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    Ok(dir)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| io(path, e))
}

pub fn run(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot size thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Targets { data } => targets(cli, data),
        Command::Pretrain { data } => pretrain_cmd(cli, data),
        Command::Adapt(a) => adapt_cmd(cli, a),
        Command::Segment { checkpoint, images } => segment_cmd(cli, checkpoint, images),
        Command::Eval { gt, pred } => eval(cli, gt, pred),
        Command::Experiment => experiment(cli),
        Command::Report { results } => report(cli, results),
    }
}

fn synth(cli: &Cli, a: &SynthArgs) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => load_config::<SynthConfig>(p)?,
        None => match a.domain.as_str() {
            "phase" => SynthConfig::phase(0, a.n),
            "fluor" => SynthConfig::fluor(0, a.n),
            "worm" => SynthConfig::worm(0, a.n),
            other => return Err(CliError::Usage(format!("unknown domain {other:?}"))),
        },
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = out_dir(cli)?;
    let ds = gen_dataset(&cfg)?;
    let value = serde_json::to_value(&cfg).map_err(Error::from)?;
    write_dataset_dir(&ds, out, Some(value))?;
    let domain = match cfg.domain {
        Domain::Phase => "phase",
        Domain::Fluor => "fluor",
        Domain::Worm => "worm",
    };
    println!("wrote {} {domain} images to {}", ds.len(), out.display());
    Ok(())
}

fn targets(cli: &Cli, data: &Path) -> CliResult<()> {
    let ds = read_dataset_dir(data)?;
    let out = out_dir(cli)?;
    for (i, s) in ds.items.iter().enumerate() {
        let t = make_targets(&s.mask);
        let dims = vec![t.h as u64, t.w as u64];
        let mut map = BTreeMap::new();
        map.insert("d".to_string(), Tensor::new(dims.clone(), t.d.clone())?);
        map.insert("gx".to_string(), Tensor::new(dims.clone(), t.gx.clone())?);
        map.insert("gy".to_string(), Tensor::new(dims.clone(), t.gy.clone())?);
        map.insert("b".to_string(), Tensor::new(dims, t.b.iter().map(|&b| b as f32).collect())?);
        write_tensors(&map, out.join(format!("tgt_{i:04}.madc")))?;
    }
    println!("wrote {} target files to {}", ds.len(), out.display());
    Ok(())
}

fn experiment_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let cfg = match &cli.config {
        Some(p) => load_config::<ExperimentConfig>(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn pretrain_cmd(cli: &Cli, data: &Path) -> CliResult<()> {
    let mut cfg = experiment_config(cli)?;
    if let Some(s) = cli.seed {
        cfg.pretrain.seed = s;
    }
    let ds = read_dataset_dir(data)?;
    let out = out_dir(cli)?;
    let init = Params::init(&cfg.model, cfg.pretrain.seed)?;
    let run = pretrain(init, &ds, &cfg.pretrain, &cfg.loss)?;
    let ckpt = run.params.to_checkpoint(Some(&run.optim), cfg.digest(), cfg.pretrain.epochs as u64);
    write_checkpoint(&ckpt, out.join("model.madc"))?;
    write_epoch_log(&out.join("pretrain_log.csv"), &run.log)?;
    if let Some(last) = run.log.last() {
        println!("epoch {} loss {:.6}", last.epoch, last.loss);
    }
    Ok(())
}

fn adapt_cmd(cli: &Cli, a: &AdaptArgs) -> CliResult<()> {
    let cfg = experiment_config(cli)?;
    let variant = Variant::parse(&a.variant).ok_or_else(|| CliError::Usage(format!("unknown variant {:?}", a.variant)))?;
    let (gamma1, gamma2) = variant
        .weights(&cfg.adapt)
        .ok_or_else(|| CliError::Usage(format!("{variant} is not an adaptation variant")))?;
    let acfg = cellshot::losses::AdaptConfig {
        gamma1,
        gamma2,
        ..cfg.adapt.clone()
    };
    let sched = AdaptSchedule {
        seed: cli.seed.unwrap_or(cfg.schedule.seed),
        ..cfg.schedule.clone()
    };
    let params = Params::<f32>::from_checkpoint(&read_checkpoint(&a.checkpoint)?)?;
    let source = read_dataset_dir(&a.source)?;
    let target = read_dataset_dir(&a.target)?;
    let d_src = mean_diameter(&source)?;
    let target = rescale_dataset(&target, d_src / mean_diameter(&target)?)?;
    let shots = extract_shots(&target, a.k, sched.seed, d_src)?;
    let out = out_dir(cli)?;
    let run = adapt(&params, &source, &shots, &acfg, &cfg.loss, &sched)?;
    let epochs = (sched.phase1_epochs + sched.phase2_epochs) as u64;
    write_checkpoint(&run.params.to_checkpoint(None, cfg.digest(), epochs), out.join("adapted.madc"))?;
    write_adapt_log(&out.join("adapt_log.csv"), &run.log)?;
    println!("{variant} K={} adapted over {} epochs", a.k, epochs);
    Ok(())
}

/// Image files of a directory: the manifest's list when there is one,
/// otherwise every 8-bit PGM in name order.
fn image_files(dir: &Path) -> CliResult<Vec<(String, Image)>> {
    if dir.join(MANIFEST).exists() {
        let ds = read_dataset_dir(dir)?;
        let m = cellshot::datamodel::read_manifest(dir)?;
        return Ok(m.files.into_iter().map(|f| f.image).zip(ds.items.into_iter().map(|s| s.image)).collect());
    }
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    names.sort();
    let mut out = Vec::new();
    for p in names {
        if let Pgm::Image(img) = read_pgm(&p)? {
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), img));
        }
    }
    Ok(out)
}

/// Output names for an input image: `img_X.pgm` maps to `msk_X.pgm` and
/// `ovl_X.ppm`.
fn output_names(image: &str) -> (String, String) {
    let stem = image.strip_suffix(".pgm").unwrap_or(image);
    match stem.strip_prefix("img_") {
        Some(rest) => (format!("msk_{rest}.pgm"), format!("ovl_{rest}.ppm")),
        None => (format!("{stem}_mask.pgm"), format!("{stem}_overlay.ppm")),
    }
}

fn segment_cmd(cli: &Cli, checkpoint: &Path, images: &Path) -> CliResult<()> {
    let cfg = experiment_config(cli)?;
    let params = Params::<f32>::from_checkpoint(&read_checkpoint(checkpoint)?)?;
    let files = image_files(images)?;
    let out = out_dir(cli)?;
    let masks = files
        .par_iter()
        .map(|(_, img)| segment(&predict(&params, img)?, &cfg.head))
        .collect::<Result<Vec<_>, Error>>()?;
    for ((name, img), mask) in files.iter().zip(&masks) {
        let (m, o) = output_names(name);
        write_mask(mask, out.join(m))?;
        write(&out.join(o), overlay_ppm(img, mask))?;
    }
    println!("segmented {} images into {}", files.len(), out.display());
    Ok(())
}

fn mask_names(dir: &Path) -> CliResult<Vec<String>> {
    if dir.join(MANIFEST).exists() {
        let m = cellshot::datamodel::read_manifest(dir)?;
        return Ok(m.files.into_iter().map(|f| f.mask).collect());
    }
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("msk_") && n.ends_with(".pgm"))
        .collect();
    names.sort();
    Ok(names)
}

fn eval(cli: &Cli, gt_dir: &Path, pred_dir: &Path) -> CliResult<()> {
    let names = mask_names(gt_dir)?;
    let gt = names.iter().map(|n| read_mask(gt_dir.join(n))).collect::<Result<Vec<_>, _>>()?;
    let pred = names.iter().map(|n| read_mask(pred_dir.join(n))).collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<_> = gt.iter().collect();
    let r = EvalReport::from_masks(&refs, &pred)?;
    match &cli.out {
        Some(_) => r.write_csv(&out_dir(cli)?.join("eval.csv"))?,
        None => print!("{}", r.to_csv()),
    }
    println!("images {} mean AP {:.4} pooled AP {:.4}", names.len(), r.mean_ap, r.pooled_ap);
    Ok(())
}

fn write_summary(dir: &Path, rows: &[ResultRow]) -> CliResult<String> {
    let checks = trend_checks(rows);
    let md = summary_markdown(rows, &checks);
    write(&dir.join("summary.md"), &md)?;
    write(&dir.join("ap_vs_k.svg"), svg_chart(rows))?;
    Ok(md)
}

fn experiment(cli: &Cli) -> CliResult<()> {
    let mut cfg = experiment_config(cli)?;
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    let out = out_dir(cli)?;
    let res = run_experiment(&cfg, Some(out))?;
    print!("{}", write_summary(out, &res.rows)?);
    Ok(())
}

fn report(cli: &Cli, results: &Path) -> CliResult<()> {
    let text = fs::read_to_string(results).map_err(|e| io(results, e))?;
    let rows = parse_results_csv(&text)?;
    let out = match &cli.out {
        Some(_) => out_dir(cli)?.to_path_buf(),
        None => results.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    print!("{}", write_summary(&out, &rows)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_names_follow_the_dataset_scheme() {
        assert_eq!(output_names("img_0007.pgm"), ("msk_0007.pgm".into(), "ovl_0007.ppm".into()));
        assert_eq!(output_names("cells.pgm"), ("cells_mask.pgm".into(), "cells_overlay.ppm".into()));
    }
}
