use std::fmt;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adapt::{adapt, AdaptEpochLog, AdaptSchedule};
use super::scale::{extract_shots, mean_diameter, rescale_dataset};
use super::train::{pretrain, EpochLog, TrainConfig};
use crate::datamodel::{write_checkpoint, Dataset, Split};
use crate::error::{Error, Result};
use crate::evaluator::evaluate_dataset;
use crate::losses::{AdaptConfig, LossConfig, Reduction};
use crate::net::{ModelConfig, Params};
use crate::segmenter::HeadConfig;
use crate::synthgen::{gen_dataset, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "LB")]
    Lb,
    #[serde(rename = "FT")]
    Ft,
    #[serde(rename = "ADAPT")]
    Adapt,
    #[serde(rename = "UB")]
    Ub,
    #[serde(rename = "NO_CB")]
    NoCb,
    #[serde(rename = "NO_CD")]
    NoCd,
    #[serde(rename = "NO_BOTH")]
    NoBoth,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Lb,
        Variant::Ft,
        Variant::Adapt,
        Variant::Ub,
        Variant::NoCb,
        Variant::NoCd,
        Variant::NoBoth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Lb => "LB",
            Variant::Ft => "FT",
            Variant::Adapt => "ADAPT",
            Variant::Ub => "UB",
            Variant::NoCb => "NO_CB",
            Variant::NoCd => "NO_CD",
            Variant::NoBoth => "NO_BOTH",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Contrastive weights for the adaptation variants.
    pub fn weights(self, base: &AdaptConfig) -> Option<(f64, f64)> {
        match self {
            Variant::Adapt => Some((base.gamma1, base.gamma2)),
            Variant::NoCb => Some((0.0, base.gamma2)),
            Variant::NoCd => Some((base.gamma1, 0.0)),
            Variant::Ft | Variant::NoBoth => Some((0.0, 0.0)),
            Variant::Lb | Variant::Ub => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub k_grid: Vec<usize>,
    /// Shot counts at which the ablation variants run.
    pub ablation_k: Vec<usize>,
    /// Seed of the synthetic datasets, shared by all runs.
    pub data_seed: u64,
    pub n_source_train: usize,
    pub n_target_train: usize,
    pub n_test: usize,
    pub source: SynthConfig,
    pub target: SynthConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub loss: LossConfig,
    pub adapt: AdaptConfig,
    pub schedule: AdaptSchedule,
    pub head: HeadConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![0, 1, 2],
            k_grid: vec![1, 2, 3, 5, 10],
            ablation_k: vec![1, 2, 3, 5, 10],
            data_seed: 2024,
            n_source_train: 200,
            n_target_train: 200,
            n_test: 50,
            source: SynthConfig::phase(0, 0),
            target: SynthConfig::fluor(0, 0),
            model: ModelConfig::default(),
            pretrain: TrainConfig {
                lr: 0.01,
                ..TrainConfig::default()
            },
            loss: LossConfig {
                reduction: Reduction::Mean,
                ..LossConfig::default()
            },
            adapt: AdaptConfig::default(),
            schedule: AdaptSchedule::default(),
            head: HeadConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.k_grid.is_empty() {
            return Err(Error::Config("experiment needs at least one seed and one K".into()));
        }
        if self.k_grid.iter().chain(&self.ablation_k).any(|&k| k == 0) {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if self.n_source_train == 0 || self.n_target_train == 0 || self.n_test == 0 {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        self.model.validate()?;
        self.pretrain.validate()?;
        self.loss.validate()?;
        self.adapt.validate()?;
        self.head.validate()?;
        for (base, n) in [(&self.source, self.n_source_train), (&self.target, self.n_target_train)] {
            SynthConfig {
                n_images: n,
                ..base.clone()
            }
            .validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }

    fn dataset(&self, base: &SynthConfig, n: usize, split: Split, salt: u64) -> Result<Dataset> {
        let cfg = SynthConfig {
            seed: self.data_seed.wrapping_mul(0x9E37_79B9).wrapping_add(salt),
            n_images: n,
            split,
            ..base.clone()
        };
        gen_dataset(&cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: Variant,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub mean_ap: f64,
    pub pooled_ap: f64,
    pub wall_seconds: f64,
}

pub const RESULTS_HEADER: &str = "variant,K,seed,mean_ap,pooled_ap,wall_seconds";

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = format!("{RESULTS_HEADER}\n");
    for r in rows {
        out += &format!(
            "{},{},{},{:.6},{:.6},{:.3}\n",
            r.variant, r.k, r.seed, r.mean_ap, r.pooled_ap, r.wall_seconds
        );
    }
    out
}

pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == RESULTS_HEADER => {}
        _ => return Err(Error::format(0, format!("results header must be `{RESULTS_HEADER}`"))),
    }
    let mut rows = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Data(format!("results line {}: malformed `{line}`", n + 1));
        if f.len() != 6 {
            return Err(bad());
        }
        rows.push(ResultRow {
            variant: Variant::parse(f[0]).ok_or_else(bad)?,
            k: f[1].parse().map_err(|_| bad())?,
            seed: f[2].parse().map_err(|_| bad())?,
            mean_ap: f[3].parse().map_err(|_| bad())?,
            pooled_ap: f[4].parse().map_err(|_| bad())?,
            wall_seconds: f[5].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

/// Everything the grid produced besides files.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    /// Per seed and ablation K: whether the no-contrastive ablation ended
    /// with exactly the fine-tuning parameters.
    pub no_both_matches_ft: Vec<(u64, usize, bool)>,
    /// Longest adaptation (both phases) in seconds.
    pub max_adapt_seconds: f64,
    pub source_diameter: f64,
    pub target_diameter: f64,
}

pub fn write_epoch_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut s = String::from("epoch,loss,steps\n");
    for e in log {
        s += &format!("{},{:.6},{}\n", e.epoch, e.loss, e.steps);
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn write_adapt_log(path: &Path, log: &[AdaptEpochLog]) -> Result<()> {
    let mut s = String::from("phase,epoch,loss,is,cb,cd,steps,skipped\n");
    for e in log {
        let phase = match e.phase {
            super::adapt::Phase::Adapt => "adapt",
            super::adapt::Phase::Finetune => "finetune",
        };
        s += &format!(
            "{phase},{},{:.6},{:.6},{:.6},{:.6},{},{}\n",
            e.epoch, e.loss, e.is, e.cb, e.cd, e.steps, e.skipped
        );
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Runs LB, FT, ADAPT and UB for every K and seed, plus the ablations at
/// `ablation_k`. With `out`, writes results.csv, checkpoints and logs.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let digest = cfg.digest();
    if let Some(dir) = out {
        mkdir(&dir.join("checkpoints"))?;
        mkdir(&dir.join("logs"))?;
        let json = serde_json::to_string_pretty(cfg)?;
        let p = dir.join("config.json");
        std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
    }
    let source = cfg.dataset(&cfg.source, cfg.n_source_train, Split::Train, 1)?;
    let target_train_raw = cfg.dataset(&cfg.target, cfg.n_target_train, Split::Train, 2)?;
    let target_test_raw = cfg.dataset(&cfg.target, cfg.n_test, Split::Test, 3)?;
    let d_src = mean_diameter(&source)?;
    let d_tgt = mean_diameter(&target_train_raw)?;
    let ratio = d_src / d_tgt;
    let target_train = rescale_dataset(&target_train_raw, ratio)?;
    let target_test = rescale_dataset(&target_test_raw, ratio)?;
    log::info!("mean diameter source {d_src:.2} px, target {d_tgt:.2} px, rescale {ratio:.3}");

    let save = |name: String, p: &Params<f32>, epoch: u64| -> Result<()> {
        if let Some(dir) = out {
            write_checkpoint(&p.to_checkpoint(None, digest, epoch), dir.join("checkpoints").join(name))?;
        }
        Ok(())
    };

    let mut rows = Vec::new();
    let mut identical = Vec::new();
    let mut max_adapt: f64 = 0.0;
    for &seed in &cfg.seeds {
        let train_cfg = TrainConfig {
            seed,
            ..cfg.pretrain.clone()
        };
        let t0 = Instant::now();
        let init = Params::init(&cfg.model, seed)?;
        let lb = pretrain(init.clone(), &source, &train_cfg, &cfg.loss)?;
        let lb_secs = t0.elapsed().as_secs_f64();
        save(format!("LB_s{seed}.madc"), &lb.params, cfg.pretrain.epochs as u64)?;
        if let Some(dir) = out {
            write_epoch_log(&dir.join("logs").join(format!("pretrain_s{seed}.csv")), &lb.log)?;
        }
        let lb_eval = evaluate_dataset(&lb.params, &target_test, &cfg.head)?;
        log::info!("seed {seed}: LB mean AP {:.3}", lb_eval.mean_ap);

        let t0 = Instant::now();
        let ub = pretrain(init, &target_train, &train_cfg, &cfg.loss)?;
        let ub_secs = t0.elapsed().as_secs_f64();
        save(format!("UB_s{seed}.madc"), &ub.params, cfg.pretrain.epochs as u64)?;
        if let Some(dir) = out {
            write_epoch_log(&dir.join("logs").join(format!("ub_s{seed}.csv")), &ub.log)?;
        }
        let ub_eval = evaluate_dataset(&ub.params, &target_test, &cfg.head)?;
        log::info!("seed {seed}: UB mean AP {:.3}", ub_eval.mean_ap);

        let mut ks: Vec<usize> = cfg.k_grid.iter().chain(&cfg.ablation_k).copied().collect();
        ks.sort_unstable();
        ks.dedup();
        for k in ks {
            let in_grid = cfg.k_grid.contains(&k);
            let in_ablation = cfg.ablation_k.contains(&k);
            if in_grid {
                for (v, e, secs) in [(Variant::Lb, &lb_eval, lb_secs), (Variant::Ub, &ub_eval, ub_secs)] {
                    rows.push(ResultRow {
                        variant: v,
                        k,
                        seed,
                        mean_ap: e.mean_ap,
                        pooled_ap: e.pooled_ap,
                        wall_seconds: secs,
                    });
                }
            }
            let run_seed = seed.wrapping_mul(1_000_003).wrapping_add(k as u64);
            let shots = extract_shots(&target_train, k, run_seed, d_src)?;
            let sched = AdaptSchedule {
                seed: run_seed,
                ..cfg.schedule.clone()
            };
            let mut variants = Vec::new();
            if in_grid {
                variants.extend([Variant::Ft, Variant::Adapt]);
            }
            if in_ablation {
                variants.extend([Variant::NoCb, Variant::NoCd, Variant::NoBoth]);
            }
            let mut ft_params = None;
            let mut no_both_params = None;
            for v in variants {
                let (g1, g2) = v.weights(&cfg.adapt).expect("adaptation variant");
                let acfg = AdaptConfig {
                    gamma1: g1,
                    gamma2: g2,
                    ..cfg.adapt.clone()
                };
                let t0 = Instant::now();
                let run = adapt(&lb.params, &source, &shots, &acfg, &cfg.loss, &sched)?;
                let secs = t0.elapsed().as_secs_f64();
                max_adapt = max_adapt.max(secs);
                let epochs = (sched.phase1_epochs + sched.phase2_epochs) as u64;
                save(format!("{v}_k{k}_s{seed}.madc"), &run.params, epochs)?;
                if let Some(dir) = out {
                    write_adapt_log(&dir.join("logs").join(format!("{v}_k{k}_s{seed}.csv")), &run.log)?;
                }
                let e = evaluate_dataset(&run.params, &target_test, &cfg.head)?;
                log::info!("seed {seed} K={k}: {v} mean AP {:.3} ({secs:.1}s)", e.mean_ap);
                rows.push(ResultRow {
                    variant: v,
                    k,
                    seed,
                    mean_ap: e.mean_ap,
                    pooled_ap: e.pooled_ap,
                    wall_seconds: secs,
                });
                match v {
                    Variant::Ft => ft_params = Some(run.params),
                    Variant::NoBoth => no_both_params = Some(run.params),
                    _ => {}
                }
            }
            if let Some(nb) = no_both_params {
                let ft = match ft_params {
                    Some(p) => p,
                    None => {
                        let acfg = AdaptConfig {
                            gamma1: 0.0,
                            gamma2: 0.0,
                            ..cfg.adapt.clone()
                        };
                        adapt(&lb.params, &source, &shots, &acfg, &cfg.loss, &sched)?.params
                    }
                };
                identical.push((seed, k, ft == nb));
            }
        }
    }
    rows.sort_by_key(|r| (r.variant, r.k, r.seed));
    if let Some(dir) = out {
        let p = dir.join("results.csv");
        std::fs::write(&p, results_csv(&rows)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(ExperimentOutput {
        rows,
        no_both_matches_ft: identical,
        max_adapt_seconds: max_adapt,
        source_diameter: d_src,
        target_diameter: d_tgt,
    })
}
