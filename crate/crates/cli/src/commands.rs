use std::fs;
use std::path::{Path, PathBuf};

use airid::autograd::Checkpoint;
use airid::losses::Variant;
use airid::model::Model;
use airid::retrieval::{evaluate, write_rankings_tsv, write_report_csv, Metrics};
use airid::synthdata::{make_split, read_dataset, write_dataset, DatasetSplit, SemanticId};
use airid::training::{
    sweep, write_training_log, LogRow, Phase, SweepParam, SweepRow, TrainConfig, TrainError,
    Trainer,
};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{self, SynthConfig, TrainOverrides};
use crate::error::{CliResult, Context, Failure};
use crate::manifest::RunManifest;
use crate::svg::{Chart, Series};

pub const PRETRAINED_FILE: &str = "pretrained.airc";
pub const MODEL_FILE: &str = "model.airc";
pub const LOG_FILE: &str = "training_log.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const RANKINGS_FILE: &str = "rankings.tsv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";

/// Contents of `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub variant: Option<String>,
    pub metrics: Metrics,
    pub checkpoint_sha256: String,
    pub model: Value,
    pub train: Value,
    pub data: DataSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub train_images: usize,
    pub train_ids: usize,
    pub gallery_images: usize,
    pub queries: usize,
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).ctx(format!("creating {}", dir.display()))
}

fn read_data(dir: &Path) -> CliResult<DatasetSplit> {
    read_dataset(dir).ctx(format!("reading dataset {}", dir.display()))
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.is_file() {
        return Err(Failure::data(anyhow::anyhow!(
            "no checkpoint at {}",
            path.display()
        )));
    }
    Checkpoint::load(path).ctx(format!("loading {}", path.display()))
}

fn save_checkpoint(ck: &Checkpoint, path: &Path) -> CliResult<()> {
    ck.save(path).ctx(format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: String) -> CliResult<()> {
    fs::write(path, text).ctx(format!("writing {}", path.display()))
}

pub fn synth(config: Option<&Path>, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let mut cfg: SynthConfig = config::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mut manifest = RunManifest::start("synth", &cfg, Some(cfg.seed));
    if let Some(c) = config {
        manifest.input("config", c);
    }
    let split = make_split(&cfg.schema, &cfg.render, &cfg.split())?;
    create_dir(out)?;
    write_dataset(&split, out).ctx(format!("writing dataset to {}", out.display()))?;
    info!(
        "{} train images ({} ids), {} gallery images, {} queries",
        split.train.len(),
        split.num_train_ids(),
        split.gallery.len(),
        split.queries.len()
    );
    manifest.output("dataset", out);
    manifest.finish(out)
}

/// Runs a trainer to the end of its phase, writing periodic checkpoints.
fn run_phase(trainer: &mut Trainer, out: &Path) -> CliResult<()> {
    let every = trainer.config().checkpoint_every;
    let dir = out.join("checkpoints");
    trainer.run(|t| {
        let row = t.log().last().expect("epoch logged");
        let g = row
            .generator_objective
            .map(|g| format!(" generator {g:.4}"))
            .unwrap_or_default();
        info!(
            "{} epoch {}/{}: l_I {:.4}{g}",
            t.phase(),
            row.epoch,
            t.epochs(),
            row.l_i
        );
        if every > 0 && t.epoch() % every == 0 {
            fs::create_dir_all(&dir).map_err(|source| TrainError::Io {
                path: dir.clone(),
                source,
            })?;
            t.to_checkpoint().save(dir.join(format!(
                "{}-epoch{:04}.airc",
                t.phase(),
                t.epoch()
            )))?;
        }
        Ok(())
    })?;
    Ok(())
}

fn write_log(rows: &[LogRow], path: &Path) -> CliResult<()> {
    write_training_log(rows, path).map_err(Failure::from)
}

pub struct TrainPaths<'a> {
    pub config: Option<&'a Path>,
    pub data: &'a Path,
    pub out: &'a Path,
}

pub fn pretrain(paths: &TrainPaths, overrides: &TrainOverrides) -> CliResult<()> {
    let cfg = config::train_config(paths.config, overrides)?;
    let split = read_data(paths.data)?;
    create_dir(paths.out)?;
    let mut manifest = RunManifest::start("pretrain", &cfg, Some(cfg.seed));
    manifest.input("data", paths.data);
    let mut trainer = Trainer::pretraining(&split, cfg)?;
    run_phase(&mut trainer, paths.out)?;
    finish_training(
        &trainer,
        trainer.log(),
        paths.out,
        PRETRAINED_FILE,
        manifest,
    )
}

fn finish_training(
    trainer: &Trainer,
    log: &[LogRow],
    out: &Path,
    file: &str,
    mut manifest: RunManifest,
) -> CliResult<()> {
    let ck = trainer.to_checkpoint();
    let path = out.join(file);
    save_checkpoint(&ck, &path)?;
    manifest.output("checkpoint", &path);
    manifest.checkpoint("checkpoint", &ck)?;
    let log_path = out.join(LOG_FILE);
    write_log(log, &log_path)?;
    manifest.output("training_log", &log_path);
    manifest.finish(out)
}

/// The pretrained checkpoint to start joint training from: `explicit`, an
/// existing `out/pretrained.airc`, or a fresh pretraining run saved there.
fn resolve_pretrained(
    explicit: Option<&Path>,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    out: &Path,
    manifest: &mut RunManifest,
    log: &mut Vec<LogRow>,
) -> CliResult<Checkpoint> {
    let existing = out.join(PRETRAINED_FILE);
    let path = match explicit {
        Some(p) => Some(p.to_path_buf()),
        None if existing.is_file() => Some(existing.clone()),
        None => None,
    };
    let ck = match path {
        Some(p) => {
            let ck = load_checkpoint(&p)?;
            manifest.input("pretrained", &p);
            ck
        }
        None => {
            info!("no pretrained checkpoint given; pretraining first");
            let mut t = Trainer::pretraining(split, cfg.clone())?;
            run_phase(&mut t, out)?;
            log.extend_from_slice(t.log());
            let ck = t.to_checkpoint();
            save_checkpoint(&ck, &existing)?;
            manifest.output("pretrained", &existing);
            ck
        }
    };
    manifest.checkpoint("pretrained", &ck)?;
    Ok(ck)
}

pub fn train(
    paths: &TrainPaths,
    overrides: &TrainOverrides,
    pretrained: Option<&Path>,
    resume: Option<&Path>,
) -> CliResult<()> {
    let split = read_data(paths.data)?;
    create_dir(paths.out)?;
    let mut log = Vec::new();
    let mut trainer = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let t = Trainer::from_checkpoint(&ck, &split)?;
            if paths.config.is_some() || overrides.variant.is_some() || overrides.seed.is_some() {
                warn!("resuming uses the configuration stored in {}; --config and overrides are ignored", path.display());
            }
            t
        }
        None => {
            let cfg = config::train_config(paths.config, overrides)?;
            let mut manifest = RunManifest::start("train", &cfg, Some(cfg.seed));
            let ck =
                resolve_pretrained(pretrained, &split, &cfg, paths.out, &mut manifest, &mut log)?;
            let mut t = Trainer::joint(&split, cfg, &ck)?;
            manifest.input("data", paths.data);
            run_phase(&mut t, paths.out)?;
            log.extend_from_slice(t.log());
            return finish_training(&t, &log, paths.out, MODEL_FILE, manifest);
        }
    };
    let mut manifest = RunManifest::start("train", trainer.config(), Some(trainer.config().seed));
    manifest.input("data", paths.data);
    manifest.input("resume", resume.expect("resume branch"));
    run_phase(&mut trainer, paths.out)?;
    if trainer.phase() == Phase::Pretrain {
        let ck = trainer.to_checkpoint();
        save_checkpoint(&ck, &paths.out.join(PRETRAINED_FILE))?;
        log.extend_from_slice(trainer.log());
        let cfg = trainer.config().clone();
        trainer = Trainer::joint(&split, cfg, &ck)?;
        run_phase(&mut trainer, paths.out)?;
    }
    log.extend_from_slice(trainer.log());
    finish_training(&trainer, &log, paths.out, MODEL_FILE, manifest)
}

/// Evaluates `ck` on the test split and writes `report.json` and `report.csv` into `out`.
fn evaluate_into(
    split: &DatasetSplit,
    ck: &Checkpoint,
    out: &Path,
    rankings: bool,
) -> CliResult<Report> {
    let model = Model::<f32>::from_checkpoint(ck)?;
    let (metrics, results) = evaluate(split, &model)?;
    let trainer = ck.metadata.get("trainer");
    let train = trainer
        .and_then(|t| t.get("config"))
        .cloned()
        .unwrap_or(Value::Null);
    let variant = match trainer.and_then(|t| t.get("phase")).and_then(Value::as_str) {
        Some("joint") => train
            .get("variant")
            .and_then(Value::as_str)
            .map(str::to_string),
        Some(phase) => Some(phase.to_string()),
        None => None,
    };
    let report = Report {
        variant,
        metrics,
        checkpoint_sha256: ck.digest()?,
        model: ck.metadata.get("model").cloned().unwrap_or(Value::Null),
        train,
        data: DataSummary {
            train_images: split.train.len(),
            train_ids: split.num_train_ids(),
            gallery_images: split.gallery.len(),
            queries: split.queries.len(),
        },
    };
    write_text(
        &out.join(REPORT_JSON),
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    )?;
    write_report_csv(&report.metrics, &out.join(REPORT_CSV))?;
    if rankings {
        let ids: Vec<SemanticId> = split.gallery.iter().map(|s| s.image.semantic_id).collect();
        let idx: Vec<usize> = split.gallery.iter().map(|s| s.index).collect();
        write_rankings_tsv(&results, &ids, &idx, &out.join(RANKINGS_FILE))?;
    }
    Ok(report)
}

pub fn eval(data: &Path, checkpoint: Option<&Path>, out: &Path, rankings: bool) -> CliResult<()> {
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join(MODEL_FILE));
    let ck = load_checkpoint(&path)
        .map_err(|e| e.context("pass --checkpoint or run `airid train` first"))?;
    let split = read_data(data)?;
    create_dir(out)?;
    let mut manifest = RunManifest::start("eval", &Value::Null, None);
    manifest.input("data", data);
    manifest.input("checkpoint", &path);
    manifest.checkpoint("checkpoint", &ck)?;
    let report = evaluate_into(&split, &ck, out, rankings)?;
    manifest.config = serde_json::json!({ "rankings": rankings });
    manifest.seed = report.train.get("seed").and_then(Value::as_u64);
    let m = &report.metrics;
    println!(
        "rank1 {:.4}  rank5 {:.4}  rank10 {:.4}  mAP {:.4}",
        m.rank1, m.rank5, m.rank10, m.map
    );
    manifest.output("report", &out.join(REPORT_JSON));
    manifest.output("report_csv", &out.join(REPORT_CSV));
    if rankings {
        manifest.output("rankings", &out.join(RANKINGS_FILE));
    }
    manifest.finish(out)
}

fn metric_row(label: &str, m: &Metrics) -> [String; 5] {
    [
        label.to_string(),
        m.rank1.to_string(),
        m.rank5.to_string(),
        m.rank10.to_string(),
        m.map.to_string(),
    ]
}

fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> CliResult<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_path(path).ctx(format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().ctx(format!("writing {}", path.display()))
}

pub fn ablate(
    paths: &TrainPaths,
    overrides: &TrainOverrides,
    variants: &[Variant],
    pretrained: Option<&Path>,
) -> CliResult<()> {
    let cfg = config::train_config(paths.config, overrides)?;
    let split = read_data(paths.data)?;
    create_dir(paths.out)?;
    let mut manifest = RunManifest::start("ablate", &cfg, Some(cfg.seed));
    manifest.input("data", paths.data);
    let mut pre_log = Vec::new();
    let ck = resolve_pretrained(
        pretrained,
        &split,
        &cfg,
        paths.out,
        &mut manifest,
        &mut pre_log,
    )?;

    let reports: Vec<(Variant, Report)> = variants
        .par_iter()
        .map(|&variant| -> CliResult<(Variant, Report)> {
            let dir = paths.out.join(variant.name());
            create_dir(&dir)?;
            let vcfg = TrainConfig {
                variant,
                ..cfg.clone()
            };
            let mut t = Trainer::joint(&split, vcfg, &ck)?;
            run_phase(&mut t, &dir).map_err(|e| e.context(format!("variant {variant}")))?;
            let model_ck = t.to_checkpoint();
            save_checkpoint(&model_ck, &dir.join(MODEL_FILE))?;
            write_log(t.log(), &dir.join(LOG_FILE))?;
            let report = evaluate_into(&split, &model_ck, &dir, false)?;
            info!(
                "{variant}: rank1 {:.4} mAP {:.4}",
                report.metrics.rank1, report.metrics.map
            );
            Ok((variant, report))
        })
        .collect::<CliResult<_>>()?;

    for (v, r) in &reports {
        manifest.output(v.name(), &paths.out.join(v.name()));
        manifest.checkpoint(
            v.name(),
            &load_checkpoint(&paths.out.join(v.name()).join(MODEL_FILE))?,
        )?;
        let m = &r.metrics;
        println!(
            "{:7} rank1 {:.4}  rank5 {:.4}  rank10 {:.4}  mAP {:.4}",
            v.name(),
            m.rank1,
            m.rank5,
            m.rank10,
            m.map
        );
    }
    let table = paths.out.join(ABLATION_FILE);
    write_csv(
        &table,
        &["variant", "rank1", "rank5", "rank10", "mAP"],
        reports
            .iter()
            .map(|(v, r)| metric_row(v.name(), &r.metrics)),
    )?;
    manifest.output("table", &table);
    manifest.finish(paths.out)
}

pub fn sweep_cmd(
    paths: &TrainPaths,
    overrides: &TrainOverrides,
    param: SweepParam,
    values: &[f64],
    pretrained: Option<&Path>,
) -> CliResult<()> {
    if values.is_empty() {
        return Err(Failure::usage(anyhow::anyhow!(
            "--values needs at least one value"
        )));
    }
    let cfg = config::train_config(paths.config, overrides)?;
    let split = read_data(paths.data)?;
    create_dir(paths.out)?;
    let mut manifest = RunManifest::start(
        "sweep",
        &serde_json::json!({ "train": cfg, "param": param, "values": values }),
        Some(cfg.seed),
    );
    manifest.input("data", paths.data);
    let mut pre_log = Vec::new();
    let ck = resolve_pretrained(
        pretrained,
        &split,
        &cfg,
        paths.out,
        &mut manifest,
        &mut pre_log,
    )?;
    let rows = sweep(param, values, &split, &cfg, Some(&ck))?;
    let path = paths.out.join(SWEEP_FILE);
    write_sweep(&path, param, &rows)?;
    for r in &rows {
        println!(
            "{param}={:<8} rank1 {:.4}  rank5 {:.4}  rank10 {:.4}  mAP {:.4}",
            r.value, r.rank1, r.rank5, r.rank10, r.map
        );
    }
    manifest.output("sweep", &path);
    manifest.finish(paths.out)
}

fn write_sweep(path: &Path, param: SweepParam, rows: &[SweepRow]) -> CliResult<()> {
    let p = param.to_string();
    write_csv(
        path,
        &["param", "value", "rank1", "rank5", "rank10", "mAP"],
        rows.iter().map(|r| {
            [
                p.clone(),
                r.value.to_string(),
                r.rank1.to_string(),
                r.rank5.to_string(),
                r.rank10.to_string(),
                r.map.to_string(),
            ]
        }),
    )
}

#[derive(Deserialize)]
struct SweepLine {
    param: String,
    value: f64,
    rank1: f64,
    #[serde(rename = "mAP")]
    map: f64,
}

/// Report directories under `dir`: itself, or its immediate children (an `ablate` output).
fn find_reports(dir: &Path) -> Vec<PathBuf> {
    if dir.join(REPORT_JSON).is_file() {
        return vec![dir.to_path_buf()];
    }
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.join(REPORT_JSON).is_file())
        .collect();
    found.sort();
    found
}

pub fn report(runs: &[PathBuf], out: &Path) -> CliResult<()> {
    let mut rows: Vec<(String, String, Report)> = Vec::new();
    let mut sweeps: Vec<(String, Vec<SweepLine>)> = Vec::new();
    for run in runs {
        let dirs = find_reports(run);
        let sweep_path = run.join(SWEEP_FILE);
        if dirs.is_empty() && !sweep_path.is_file() {
            warn!(
                "{}: no {REPORT_JSON} or {SWEEP_FILE}; skipped",
                run.display()
            );
            continue;
        }
        for dir in dirs {
            let path = dir.join(REPORT_JSON);
            let text = fs::read_to_string(&path).ctx(format!("reading {}", path.display()))?;
            match serde_json::from_str::<Report>(&text) {
                Ok(r) => rows.push((
                    r.variant.clone().unwrap_or_else(|| "unknown".into()),
                    dir.display().to_string(),
                    r,
                )),
                Err(e) => warn!("{}: unreadable report ({e}); skipped", path.display()),
            }
        }
        if sweep_path.is_file() {
            let mut rdr = csv::Reader::from_path(&sweep_path)
                .ctx(format!("reading {}", sweep_path.display()))?;
            let lines = rdr
                .deserialize()
                .collect::<Result<Vec<SweepLine>, _>>()
                .ctx(format!("parsing {}", sweep_path.display()))?;
            sweeps.push((run.display().to_string(), lines));
        }
    }
    if rows.is_empty() && sweeps.is_empty() {
        return Err(Failure::data(anyhow::anyhow!(
            "no completed runs among the given directories"
        )));
    }
    create_dir(out)?;
    let mut manifest = RunManifest::start("report", &serde_json::json!({ "runs": runs }), None);
    for (i, r) in runs.iter().enumerate() {
        manifest.input(&format!("run{i}"), r);
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)));

    if !rows.is_empty() {
        let table = out.join(COMPARISON_FILE);
        write_csv(
            &table,
            &["variant", "rank1", "rank5", "rank10", "mAP", "run"],
            rows.iter().map(|(v, run, r)| {
                let [a, b, c, d, e] = metric_row(v, &r.metrics);
                [a, b, c, d, e, run.clone()]
            }),
        )?;
        manifest.output("table", &table);
        let max_rank = rows
            .iter()
            .map(|r| r.2.metrics.cmc.0.len())
            .max()
            .unwrap_or(1)
            .min(20);
        let chart = Chart {
            title: "CMC",
            x_label: "rank",
            y_label: "matching accuracy",
            x_ticks: vec![],
            series: rows
                .iter()
                .map(|(v, run, r)| Series {
                    label: if rows.iter().filter(|x| &x.0 == v).count() > 1 {
                        format!("{v} ({run})")
                    } else {
                        v.clone()
                    },
                    points: (1..=max_rank)
                        .map(|k| (k as f64, r.metrics.cmc.at(k)))
                        .collect(),
                })
                .collect(),
        };
        let path = out.join("cmc.svg");
        write_text(&path, chart.render())?;
        manifest.output("cmc_plot", &path);
    }

    for (i, (run, lines)) in sweeps.iter().enumerate() {
        let param = lines.first().map(|l| l.param.clone()).unwrap_or_default();
        let series = |label: &str, f: fn(&SweepLine) -> f64| Series {
            label: label.into(),
            points: lines
                .iter()
                .enumerate()
                .map(|(k, l)| (k as f64, f(l)))
                .collect(),
        };
        let title = format!("{param} sweep");
        let chart = Chart {
            title: &title,
            x_label: &param,
            y_label: "score",
            x_ticks: lines
                .iter()
                .enumerate()
                .map(|(k, l)| (k as f64, l.value.to_string()))
                .collect(),
            series: vec![series("rank1", |l| l.rank1), series("mAP", |l| l.map)],
        };
        let path = out.join(format!("sweep{i}_{param}.svg"));
        write_text(&path, chart.render())?;
        manifest.output(&format!("sweep_plot{i}"), &path);
        info!("{run}: {} sweep points", lines.len());
    }
    manifest.finish(out)
}
