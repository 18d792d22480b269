//! Command-line driver: dataset generation, training, evaluation, parameter
//! sweeps, the post-click decomposition ablation, and report aggregation.
//!
//! Every command resolves one [`RunConfig`] (file plus flag overrides),
//! echoes it into its artifacts, and exits 0 on success, 1 on validation
//! errors, 2 on runtime failures.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::datagen::{generate_dataset, load_dataset, load_meta, Dataset, SPLIT_FILES};
use crate::error::{Esm2Error, Result};
use crate::metrics::{
    auc, f1_at_topk, gauc, grouped_auc_by_purchase_count, purchase_counts, render_table,
    MetricsReport, PurchaseBinRow, ScoredSet, TaskMetrics, TieHandling,
};
use crate::training::{
    train, validation_aucs, DactionChoice, TrainConfig, TrainOutcome, Variant,
};

#[derive(Debug, Parser)]
#[command(name = "esm2", version, about = "Entire-space multi-task conversion-rate modeling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// TOML run configuration; flags override individual fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override the generator and model seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Override the command's output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Suppress progress output.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic impression log (train/val/test plus sidecar).
    Gen {
        /// Override the configured impression count.
        #[arg(long)]
        impressions: Option<usize>,
        /// Independent generation shards (merged deterministically).
        #[arg(long, default_value_t = 1)]
        shards: usize,
    },
    /// Train one model variant and write final/best checkpoints.
    Train {
        /// Dataset directory (defaults to paths.data_dir).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        variant: Option<Variant>,
        /// Post-click behaviors composed into the DAction label.
        #[arg(long)]
        daction: Option<DactionChoice>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        dropout: Option<f64>,
        /// Artifact name prefix (defaults to the variant name).
        #[arg(long)]
        label: Option<String>,
    },
    /// Evaluate a checkpoint on one dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train/evaluate across one hyper-parameter axis.
    Sweep {
        /// dropout, layers or emb_dim.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; each axis has a default grid.
        #[arg(long)]
        values: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated seeds shared across values.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Compare DAction compositions (scart / wish / both) over seeds.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Merge eval metric CSVs into one comparison table.
    Report {
        /// metrics.csv files produced by `eval`.
        #[arg(long, num_args = 1..)]
        inputs: Vec<PathBuf>,
    },
}

struct Log {
    quiet: bool,
}

impl Log {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.generator.seed = seed;
        cfg.model.seed = seed;
    }
    cfg.validate()?;
    let log = Log { quiet: cli.quiet };

    match cli.command {
        Command::Gen { impressions, shards } => cmd_gen(cfg, cli.out, impressions, shards, &log),
        Command::Train {
            data,
            variant,
            daction,
            epochs,
            batch_size,
            learning_rate,
            dropout,
            label,
        } => {
            if let Some(v) = variant {
                cfg.model.variant = v;
            }
            if let Some(d) = daction {
                cfg.model.daction_composition = d;
            }
            if let Some(e) = epochs {
                cfg.model.epochs = e;
            }
            if let Some(b) = batch_size {
                cfg.model.batch_size = b;
            }
            if let Some(lr) = learning_rate {
                cfg.model.learning_rate = lr;
            }
            if let Some(p) = dropout {
                cfg.model.dropout = p;
            }
            cfg.model.validate()?;
            cmd_train(cfg, cli.out, data, label, &log)
        }
        Command::Eval {
            checkpoint,
            data,
            split,
        } => cmd_eval(cfg, cli.out, checkpoint, data, &split, &log),
        Command::Sweep {
            axis,
            values,
            data,
            seeds,
        } => cmd_sweep(cfg, cli.out, &axis, values, data, seeds, &log),
        Command::Ablate { data, seeds } => cmd_ablate(cfg, cli.out, data, seeds, &log),
        Command::Report { inputs } => cmd_report(cfg, cli.out, inputs, &log),
    }
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Esm2Error::io(dir, e))?;
        }
    }
    fs::write(path, body.as_bytes()).map_err(|e| Esm2Error::io(path, e))
}

/// Prefix every artifact with the resolved config as comment lines.
fn with_echo(echo: &str, body: &str) -> String {
    let mut out = String::new();
    for line in echo.lines() {
        let _ = writeln!(out, "# {line}");
    }
    out.push_str(body);
    out
}

pub fn cmd_gen(
    cfg: RunConfig,
    out: Option<PathBuf>,
    impressions: Option<usize>,
    shards: usize,
    log: &Log,
) -> Result<()> {
    let mut gen_cfg = cfg.generator.clone();
    if let Some(n) = impressions {
        gen_cfg.num_impressions = n;
    }
    gen_cfg.validate()?;
    let out_dir = out.unwrap_or_else(|| cfg.paths.data_dir.clone());
    if !out_dir.exists() {
        log.say(format!("creating output directory {}", out_dir.display()));
    }
    let report = generate_dataset(&gen_cfg, &out_dir, shards)?;

    log.say(format!(
        "generated {} impressions into {} (train/val/test = {}/{}/{})",
        gen_cfg.num_impressions,
        out_dir.display(),
        report.split_counts[0],
        report.split_counts[1],
        report.split_counts[2],
    ));
    let r = &report.rates;
    let t = &report.targets;
    let rows = vec![
        vec!["rate".to_string(), "target".to_string(), "empirical".to_string(), "rel err".to_string()],
        rate_row("click", t.click, r.click_rate),
        rate_row("daction | click", t.click * 0.0 + cfg.generator.target_daction_given_click, r.daction_given_click),
        rate_row("scart | click", t.scart, r.scart_given_click),
        rate_row("wish | click", t.wish, r.wish_given_click),
        rate_row("buy | daction", t.buy_daction, r.buy_given_daction),
        rate_row("buy | oaction", t.buy_oaction, r.buy_given_oaction),
    ];
    log.say(render_table(&rows));
    log.say(format!("buy | click (derived): {:.5}", r.buy_given_click));
    for (file, sum) in &report.checksums {
        log.say(format!("sha256 {sum}  {file}"));
    }
    Ok(())
}

fn rate_row(name: &str, target: f64, empirical: f64) -> Vec<String> {
    let rel = if target == 0.0 {
        0.0
    } else {
        (empirical - target) / target
    };
    vec![
        name.to_string(),
        format!("{target:.5}"),
        format!("{empirical:.5}"),
        format!("{rel:+.2}%", rel = rel * 100.0),
    ]
}

fn load_split(dir: &Path, split: &str) -> Result<Dataset> {
    let file = match split {
        "train" => SPLIT_FILES[0],
        "val" => SPLIT_FILES[1],
        "test" => SPLIT_FILES[2],
        other => {
            return Err(Esm2Error::InvalidConfig(format!(
                "unknown split `{other}` (expected train, val, test)"
            )))
        }
    };
    load_dataset(&dir.join(file))
}

fn epoch_log_csv(outcome: &TrainOutcome) -> String {
    let h = &outcome.history;
    let mut out = String::from(
        "epoch,train_loss,loss_ctr,loss_ctavr,loss_ctcvr,loss_cvr_clicked,val_ctr_auc,val_cvr_auc,val_ctcvr_auc\n",
    );
    for e in 0..h.train_loss.len() {
        let _ = writeln!(
            out,
            "{e},{},{},{},{},{},{},{},{}",
            h.train_loss[e],
            h.loss_ctr[e],
            h.loss_ctavr[e],
            h.loss_ctcvr[e],
            h.loss_cvr_clicked[e],
            h.val_ctr_auc[e],
            h.val_cvr_auc[e],
            h.val_ctcvr_auc[e],
        );
    }
    out
}

pub fn cmd_train(
    cfg: RunConfig,
    out: Option<PathBuf>,
    data: Option<PathBuf>,
    label: Option<String>,
    log: &Log,
) -> Result<()> {
    let data_dir = data.unwrap_or_else(|| cfg.paths.data_dir.clone());
    let ckpt_dir = out.unwrap_or_else(|| cfg.paths.checkpoint_dir.clone());
    let meta = load_meta(&data_dir)?;
    let train_ds = load_split(&data_dir, "train")?;
    let val_ds = load_split(&data_dir, "val")?;
    let label = label.unwrap_or_else(|| cfg.model.variant.to_string());

    log.say(format!(
        "training variant {} on {} records ({} validation), daction = {}",
        cfg.model.variant,
        train_ds.len(),
        val_ds.len(),
        cfg.model.daction_composition,
    ));
    let outcome = train(&train_ds, &val_ds, &meta.schema, &cfg.model)?;

    for e in 0..outcome.history.train_loss.len() {
        log.say(format!(
            "epoch {e}: loss {:.5}  val ctr/cvr/ctcvr auc {:.4}/{:.4}/{:.4}",
            outcome.history.train_loss[e],
            outcome.history.val_ctr_auc[e],
            outcome.history.val_cvr_auc[e],
            outcome.history.val_ctcvr_auc[e],
        ));
    }
    if matches!(cfg.model.variant, Variant::Dnn | Variant::DnnOs) {
        if let Some(n) = outcome.history.records_cvr_clicked.first() {
            log.say(format!(
                "conversion submodel trained on the clicked subset only: {n} records per epoch"
            ));
        }
    }

    fs::create_dir_all(&ckpt_dir).map_err(|e| Esm2Error::io(&ckpt_dir, e))?;
    let final_path = ckpt_dir.join(format!("{label}.final.ckpt"));
    let best_path = ckpt_dir.join(format!("{label}.best.ckpt"));
    let log_path = ckpt_dir.join(format!("{label}.epochs.csv"));
    Checkpoint::new(
        outcome.final_model.clone(),
        outcome.final_opt.clone(),
        outcome.history.clone(),
    )
    .save(&final_path)?;
    Checkpoint::new(
        outcome.best_model.clone(),
        outcome.best_opt.clone(),
        outcome.history.clone(),
    )
    .save(&best_path)?;
    write_text(&log_path, &epoch_log_csv(&outcome))?;
    log.say(format!(
        "wrote {} (best epoch {}) and {}",
        final_path.display(),
        outcome.best_epoch,
        best_path.display()
    ));

    if let Some((epoch, msg)) = outcome.diverged {
        return Err(Esm2Error::Diverged {
            epoch,
            msg: format!("{msg}; last good checkpoint kept at {}", final_path.display()),
        });
    }
    Ok(())
}

/// Full metric computation for one model on one dataset split.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    label: &str,
    topk: &[f64],
    ties: TieHandling,
) -> Result<MetricsReport> {
    let preds = crate::training::predict_dataset(&ckpt.model, dataset)?;
    // Entire-space inference: every impression in the split is scored.
    assert_eq!(preds.len(), dataset.len());
    let users: Vec<u64> = dataset.records.iter().map(|r| r.user_id).collect();
    let buy: Vec<bool> = dataset.records.iter().map(|r| r.buy).collect();
    let click: Vec<bool> = dataset.records.iter().map(|r| r.click).collect();
    let counts = purchase_counts(&dataset.records);

    let mut tasks = Vec::new();

    let ctr_set = ScoredSet::new(preds.iter().map(|p| p.pctr).collect(), click.clone(), Some(users.clone()))?;
    tasks.push(TaskMetrics {
        task: "ctr".into(),
        population: "all impressions".into(),
        records: ctr_set.len(),
        auc: auc(&ctr_set, ties)?,
        gauc: gauc(&ctr_set, ties).ok(),
        f1_table: vec![],
        grouped_auc: None,
    });

    let clicked_idx: Vec<usize> = (0..dataset.len()).filter(|&i| click[i]).collect();
    let cvr_set = ScoredSet::new(
        clicked_idx.iter().map(|&i| preds[i].pcvr).collect(),
        clicked_idx.iter().map(|&i| buy[i]).collect(),
        Some(clicked_idx.iter().map(|&i| users[i]).collect()),
    )?;
    let cvr_f1: Result<Vec<_>> = topk.iter().map(|&k| f1_at_topk(&cvr_set, k)).collect();
    tasks.push(TaskMetrics {
        task: "cvr".into(),
        population: "clicked impressions".into(),
        records: cvr_set.len(),
        auc: auc(&cvr_set, ties)?,
        gauc: gauc(&cvr_set, ties).ok(),
        f1_table: cvr_f1?,
        grouped_auc: Some(grouped_auc_by_purchase_count(&cvr_set, &counts, ties)?),
    });

    let cvr_all_set = ScoredSet::new(preds.iter().map(|p| p.pcvr).collect(), buy.clone(), Some(users.clone()))?;
    tasks.push(TaskMetrics {
        task: "cvr_entire_space".into(),
        population: "all impressions".into(),
        records: cvr_all_set.len(),
        auc: auc(&cvr_all_set, ties)?,
        gauc: None,
        f1_table: vec![],
        grouped_auc: None,
    });

    let ctcvr_set = ScoredSet::new(preds.iter().map(|p| p.pctcvr).collect(), buy, Some(users))?;
    let ctcvr_f1: Result<Vec<_>> = topk.iter().map(|&k| f1_at_topk(&ctcvr_set, k)).collect();
    tasks.push(TaskMetrics {
        task: "ctcvr".into(),
        population: "all impressions".into(),
        records: ctcvr_set.len(),
        auc: auc(&ctcvr_set, ties)?,
        gauc: gauc(&ctcvr_set, ties).ok(),
        f1_table: ctcvr_f1?,
        grouped_auc: Some(grouped_auc_by_purchase_count(&ctcvr_set, &counts, ties)?),
    });

    Ok(MetricsReport {
        model_label: label.to_string(),
        notes: vec![
            "cvr is scored over clicked test impressions (conditional definition); \
             cvr_entire_space scores the same predictions over all impressions"
                .into(),
        ],
        tasks,
    })
}

pub fn cmd_eval(
    cfg: RunConfig,
    out: Option<PathBuf>,
    checkpoint: PathBuf,
    data: Option<PathBuf>,
    split: &str,
    log: &Log,
) -> Result<()> {
    let data_dir = data.unwrap_or_else(|| cfg.paths.data_dir.clone());
    let report_dir = out.unwrap_or_else(|| cfg.paths.report_dir.clone());
    let ckpt = Checkpoint::load(&checkpoint)?;
    let meta = load_meta(&data_dir)?;
    ckpt.check_dataset_compat(&meta.schema)?;
    let dataset = load_split(&data_dir, split)?;

    let label = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let ties = if cfg.eval.tie_credit {
        TieHandling::HalfCredit
    } else {
        TieHandling::Strict
    };
    let report = evaluate_checkpoint(&ckpt, &dataset, &label, &cfg.eval.topk_percents, ties)?;

    let echo = ckpt.config_echo();
    let csv_path = report_dir.join(format!("{label}.metrics.csv"));
    let txt_path = report_dir.join(format!("{label}.report.txt"));
    write_text(&csv_path, &with_echo(&echo, &report.to_csv()))?;
    write_text(&txt_path, &with_echo(&echo, &report.to_text()))?;
    log.say(report.to_text());
    log.say(format!("wrote {} and {}", csv_path.display(), txt_path.display()));
    Ok(())
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>().map_err(|_| {
                Esm2Error::InvalidConfig(format!("cannot parse `{s}` as {what}"))
            })
        })
        .collect()
}

pub fn cmd_sweep(
    cfg: RunConfig,
    out: Option<PathBuf>,
    axis: &str,
    values: Option<String>,
    data: Option<PathBuf>,
    seeds: Option<String>,
    log: &Log,
) -> Result<()> {
    let data_dir = data.unwrap_or_else(|| cfg.paths.data_dir.clone());
    let report_dir = out.unwrap_or_else(|| cfg.paths.report_dir.clone());
    let meta = load_meta(&data_dir)?;
    let train_ds = load_split(&data_dir, "train")?;
    let val_ds = load_split(&data_dir, "val")?;
    let seeds: Vec<u64> = match seeds {
        Some(s) => parse_list(&s, "a seed")?,
        None => vec![cfg.model.seed],
    };

    let values: Vec<f64> = match (axis, values) {
        (_, Some(v)) => parse_list(&v, "a value")?,
        ("dropout", None) => vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
        ("layers", None) => vec![2.0, 3.0, 4.0, 5.0, 6.0, 7.0],
        ("emb_dim", None) => vec![4.0, 8.0, 16.0, 32.0, 64.0, 128.0],
        (other, None) => {
            return Err(Esm2Error::InvalidConfig(format!(
                "unknown sweep axis `{other}` (expected dropout, layers, emb_dim)"
            )))
        }
    };

    let mut csv = String::from("axis,value,seed,status,val_ctr_auc,val_cvr_auc,val_ctcvr_auc\n");
    let mut rows = vec![vec![
        axis.to_string(),
        "seed".to_string(),
        "val CVR AUC".to_string(),
        "val CTCVR AUC".to_string(),
    ]];
    for &value in &values {
        for &seed in &seeds {
            let mut model_cfg = cfg.model.clone();
            model_cfg.seed = seed;
            apply_axis(&mut model_cfg, axis, value)?;
            let result = model_cfg.validate().and_then(|_| {
                let outcome = train(&train_ds, &val_ds, &meta.schema, &model_cfg)?;
                validation_aucs(&outcome.best_model, &val_ds)
            });
            match result {
                Ok((ctr, cvr, ctcvr)) => {
                    let _ = writeln!(csv, "{axis},{value},{seed},ok,{ctr},{cvr},{ctcvr}");
                    rows.push(vec![
                        format!("{value}"),
                        format!("{seed}"),
                        format!("{cvr:.4}"),
                        format!("{ctcvr:.4}"),
                    ]);
                    log.say(format!(
                        "{axis} = {value} seed {seed}: val cvr auc {cvr:.4}, ctcvr auc {ctcvr:.4}"
                    ));
                }
                Err(e) => {
                    // Record the failure and keep sweeping.
                    let _ = writeln!(csv, "{axis},{value},{seed},error: {e},,,");
                    log.say(format!("{axis} = {value} seed {seed}: FAILED ({e})"));
                }
            }
        }
    }
    let csv_path = report_dir.join(format!("sweep_{axis}.csv"));
    write_text(&csv_path, &with_echo(&cfg.echo(), &csv))?;
    log.say(render_table(&rows));
    log.say(format!("wrote {}", csv_path.display()));
    Ok(())
}

fn apply_axis(cfg: &mut TrainConfig, axis: &str, value: f64) -> Result<()> {
    match axis {
        "dropout" => cfg.dropout = value,
        "layers" => {
            let n = value as usize;
            if n == 0 || value.fract() != 0.0 {
                return Err(Esm2Error::InvalidConfig(format!(
                    "layers value {value} must be a positive integer"
                )));
            }
            let base = cfg.layer_dims.first().copied().unwrap_or(64);
            cfg.layer_dims = (0..n).map(|i| (base >> i).max(8)).collect();
        }
        "emb_dim" => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(Esm2Error::InvalidConfig(format!(
                    "emb_dim value {value} must be a positive integer"
                )));
            }
            cfg.embedding_dim = value as usize;
        }
        other => {
            return Err(Esm2Error::InvalidConfig(format!(
                "unknown sweep axis `{other}`"
            )))
        }
    }
    Ok(())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn cmd_ablate(
    cfg: RunConfig,
    out: Option<PathBuf>,
    data: Option<PathBuf>,
    seeds: Option<String>,
    log: &Log,
) -> Result<()> {
    let data_dir = data.unwrap_or_else(|| cfg.paths.data_dir.clone());
    let report_dir = out.unwrap_or_else(|| cfg.paths.report_dir.clone());
    let meta = load_meta(&data_dir)?;
    let train_ds = load_split(&data_dir, "train")?;
    let val_ds = load_split(&data_dir, "val")?;
    let test_ds = load_split(&data_dir, "test")?;
    let seeds: Vec<u64> = match seeds {
        Some(s) => parse_list(&s, "a seed")?,
        None => vec![1, 2, 3, 4, 5],
    };

    let choices = [
        (DactionChoice::Scart, "SCart"),
        (DactionChoice::Wish, "Wish"),
        (DactionChoice::Both, "SCart and Wish"),
    ];
    let mut csv = String::from(
        "daction,seeds,cvr_auc_mean,cvr_auc_std,ctcvr_auc_mean,ctcvr_auc_std,ctcvr_gauc_mean,ctcvr_gauc_std\n",
    );
    let mut rows = vec![vec![
        "DAction".to_string(),
        "CVR AUC".to_string(),
        "CTCVR AUC".to_string(),
        "CTCVR GAUC".to_string(),
    ]];
    for (choice, label) in choices {
        let recomposed = crate::training::recompose_daction(&train_ds, choice);
        let a_rate = recomposed.records.iter().filter(|r| r.daction).count() as f64
            / recomposed.len() as f64;
        log.say(format!("daction = {label}: action rate {a_rate:.5}"));

        let mut cvr = Vec::new();
        let mut ctcvr = Vec::new();
        let mut ctcvr_gauc = Vec::new();
        for &seed in &seeds {
            let mut model_cfg = cfg.model.clone();
            model_cfg.variant = Variant::Esm2;
            model_cfg.daction_composition = choice;
            model_cfg.seed = seed;
            let outcome = train(&train_ds, &val_ds, &meta.schema, &model_cfg)?;
            let ckpt = Checkpoint::new(outcome.best_model, outcome.best_opt, outcome.history);
            let report = evaluate_checkpoint(
                &ckpt,
                &test_ds,
                label,
                &cfg.eval.topk_percents,
                TieHandling::Strict,
            )?;
            let task = |name: &str| report.tasks.iter().find(|t| t.task == name);
            if let Some(t) = task("cvr") {
                cvr.push(t.auc);
            }
            if let Some(t) = task("ctcvr") {
                ctcvr.push(t.auc);
                if let Some(g) = &t.gauc {
                    ctcvr_gauc.push(g.value);
                }
            }
        }
        let (cvr_m, cvr_s) = mean_std(&cvr);
        let (ctcvr_m, ctcvr_s) = mean_std(&ctcvr);
        let (gauc_m, gauc_s) = mean_std(&ctcvr_gauc);
        let _ = writeln!(
            csv,
            "{},{},{cvr_m},{cvr_s},{ctcvr_m},{ctcvr_s},{gauc_m},{gauc_s}",
            label,
            seeds.len()
        );
        rows.push(vec![
            label.to_string(),
            format!("{cvr_m:.4} ± {cvr_s:.4}"),
            format!("{ctcvr_m:.4} ± {ctcvr_s:.4}"),
            format!("{gauc_m:.4} ± {gauc_s:.4}"),
        ]);
    }
    let csv_path = report_dir.join("ablate_daction.csv");
    let txt = render_table(&rows);
    write_text(&csv_path, &with_echo(&cfg.echo(), &csv))?;
    write_text(&report_dir.join("ablate_daction.txt"), &with_echo(&cfg.echo(), &txt))?;
    log.say(txt);
    log.say(format!("wrote {}", csv_path.display()));
    Ok(())
}

/// Minimal CSV field splitter for our own metric files (quotes only guard
/// commas inside bin labels).
fn split_csv(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut in_quotes = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '"' if in_quotes && chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            '"' => in_quotes = !in_quotes,
            ',' if !in_quotes => fields.push(std::mem::take(&mut cur)),
            other => cur.push(other),
        }
    }
    fields.push(cur);
    fields
}

#[derive(Debug, Clone)]
struct MetricRow {
    model: String,
    task: String,
    section: String,
    metric: String,
    arg: String,
    value: f64,
}

fn read_metric_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let body = fs::read_to_string(path).map_err(|e| Esm2Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.starts_with('#') || line.is_empty() || line.starts_with("model,") {
            continue;
        }
        let f = split_csv(line);
        if f.len() != 6 {
            return Err(Esm2Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected 6 fields, got {}", f.len()),
            });
        }
        let value: f64 = f[5].parse().map_err(|e| Esm2Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("bad value `{}`: {e}", f[5]),
        })?;
        rows.push(MetricRow {
            model: f[0].clone(),
            task: f[1].clone(),
            section: f[2].clone(),
            metric: f[3].clone(),
            arg: f[4].clone(),
            value,
        });
    }
    Ok(rows)
}

pub fn cmd_report(
    cfg: RunConfig,
    out: Option<PathBuf>,
    inputs: Vec<PathBuf>,
    log: &Log,
) -> Result<()> {
    if inputs.is_empty() {
        return Err(Esm2Error::InvalidConfig("report needs at least one --inputs file".into()));
    }
    let report_dir = out.unwrap_or_else(|| cfg.paths.report_dir.clone());
    let mut models: Vec<(String, Vec<MetricRow>)> = Vec::new();
    for path in &inputs {
        let rows = read_metric_csv(path)?;
        let label = rows
            .first()
            .map(|r| r.model.clone())
            .unwrap_or_else(|| path.display().to_string());
        models.push((label, rows));
    }

    let find = |rows: &[MetricRow], task: &str, section: &str, metric: &str, arg: &str| -> Option<f64> {
        rows.iter()
            .find(|r| r.task == task && r.section == section && r.metric == metric && r.arg == arg)
            .map(|r| r.value)
    };

    let mut table = vec![vec![
        "model".to_string(),
        "CVR AUC".to_string(),
        "CTCVR AUC".to_string(),
        "CTCVR GAUC".to_string(),
    ]];
    let mut csv = String::from("model,cvr_auc,ctcvr_auc,ctcvr_gauc\n");
    for (label, rows) in &models {
        let cvr = find(rows, "cvr", "summary", "auc", "");
        let ctcvr = find(rows, "ctcvr", "summary", "auc", "");
        let gauc = find(rows, "ctcvr", "summary", "gauc", "");
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        table.push(vec![label.clone(), fmt(cvr), fmt(ctcvr), fmt(gauc)]);
        let raw = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(csv, "{label},{},{},{}", raw(cvr), raw(ctcvr), raw(gauc));
    }
    let mut txt = render_table(&table);

    // F1 comparison per task and cutoff.
    for task in ["cvr", "ctcvr"] {
        let mut args: Vec<String> = Vec::new();
        for (_, rows) in &models {
            for r in rows.iter().filter(|r| r.task == task && r.section == "topk" && r.metric == "f1") {
                if !args.contains(&r.arg) {
                    args.push(r.arg.clone());
                }
            }
        }
        if args.is_empty() {
            continue;
        }
        let mut f1_table = vec![{
            let mut h = vec![format!("{task} F1")];
            h.extend(args.iter().cloned());
            h
        }];
        for (label, rows) in &models {
            let mut row = vec![label.clone()];
            for arg in &args {
                let v = find(rows, task, "topk", "f1", arg);
                row.push(v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()));
            }
            f1_table.push(row);
        }
        txt.push('\n');
        txt.push_str(&render_table(&f1_table));
    }

    // Per-bin relative gains when exactly two models are compared.
    if models.len() == 2 {
        for task in ["cvr", "ctcvr"] {
            let bins: Vec<String> = models[0]
                .1
                .iter()
                .filter(|r| r.task == task && r.section == "purchase_bins" && r.metric == "auc")
                .map(|r| r.arg.clone())
                .collect();
            if bins.is_empty() {
                continue;
            }
            let mut gain_table = vec![vec![
                format!("{task} AUC by purchases"),
                models[0].0.clone(),
                models[1].0.clone(),
                "rel gain".to_string(),
            ]];
            for bin in &bins {
                let a = find(&models[0].1, task, "purchase_bins", "auc", bin);
                let b = find(&models[1].1, task, "purchase_bins", "auc", bin);
                let gain = match (a, b) {
                    (Some(a), Some(b)) if b != 0.0 => Some((a - b) / b),
                    _ => None,
                };
                gain_table.push(vec![
                    bin.clone(),
                    a.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
                    b.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
                    gain.map(|g| format!("{:+.2}%", g * 100.0)).unwrap_or_else(|| "-".into()),
                ]);
            }
            txt.push('\n');
            txt.push_str(&render_table(&gain_table));
        }
    }

    write_text(&report_dir.join("comparison.csv"), &csv)?;
    write_text(&report_dir.join("comparison.txt"), &txt)?;
    log.say(txt);
    log.say(format!("wrote {}", report_dir.join("comparison.csv").display()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_splitter_handles_quoted_bins() {
        assert_eq!(
            split_csv("m,cvr,purchase_bins,auc,\"[0,10]\",0.5"),
            vec!["m", "cvr", "purchase_bins", "auc", "[0,10]", "0.5"]
        );
        assert_eq!(split_csv("a,b"), vec!["a", "b"]);
        assert_eq!(split_csv("a,\"b\"\"c\",d"), vec!["a", "b\"c", "d"]);
    }

    #[test]
    fn axis_application() {
        let mut cfg = TrainConfig::default();
        apply_axis(&mut cfg, "dropout", 0.3).unwrap();
        assert_eq!(cfg.dropout, 0.3);
        apply_axis(&mut cfg, "layers", 4.0).unwrap();
        assert_eq!(cfg.layer_dims, vec![64, 32, 16, 8]);
        apply_axis(&mut cfg, "emb_dim", 8.0).unwrap();
        assert_eq!(cfg.embedding_dim, 8);
        assert!(apply_axis(&mut cfg, "nope", 1.0).is_err());
        assert!(apply_axis(&mut cfg, "layers", 2.5).is_err());
    }
}
