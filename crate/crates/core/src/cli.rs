//! The `refocus` command line.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::ablation::{self, AblationMode};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{self, Sample};
use crate::error::{Error, Result};
use crate::model::TwoStreamModel;
use crate::saliency;
use crate::train::{self, evaluate, local_input, EvalReport, MetricsRow};

#[derive(Debug, Parser)]
#[command(name = "refocus", version, about = "Two-stream classifier with a recurrent, attention-pooled local stream")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; defaults are used for missing keys.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Shorthand for `--set train.seed=N` (`data.seed` for `gen`).
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Override one configuration key, e.g. `--set train.lr=0.1`.
    #[arg(long = "set", value_name = "K=V")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset into `<out>/train` and `<out>/test`.
    Gen(Common),
    /// Train jointly; writes metrics.csv, timing.csv, model.ckpt, eval.json, alphas.csv.
    Train(Common),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/model.ckpt`.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Train the variants of one ablation table and write `ablation_<mode>.csv`.
    Ablate {
        /// components, sum_vs_attn, step_features or step_sweep.
        mode: String,
        #[command(flatten)]
        common: Common,
    },
    /// Per-step Grad-CAM heatmaps for one test image.
    Saliency {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Overrides `saliency.image_id`.
        #[arg(long)]
        image_id: Option<String>,
        /// Overrides `saliency.patch`.
        #[arg(long)]
        patch: Option<usize>,
        /// Overrides `saliency.class_id`.
        #[arg(long)]
        class_id: Option<usize>,
    },
}

fn effective_config(common: &Common, seed_key: &str) -> Result<RunConfig> {
    let mut sets = common.set.clone();
    if let Some(s) = common.seed {
        sets.push(format!("{seed_key}={s}"));
    }
    RunConfig::load(common.config.as_deref(), &sets)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join("config.echo.json"), cfg.to_json())
}

/// Train and test splits, read from `cfg.dataset` or generated.
pub fn load_data(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    match &cfg.dataset {
        Some(dir) => Ok((data::read_dataset(&dir.join("train"))?, data::read_dataset(&dir.join("test"))?)),
        None => data::generate(&cfg.data),
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{}\n", MetricsRow::CSV_HEADER);
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

pub fn timing_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("epoch,wall_ms\n");
    for r in rows {
        s.push_str(&format!("{},{}\n", r.epoch, r.wall_ms));
    }
    s
}

pub fn alphas_csv(report: &EvalReport, time_steps: usize) -> String {
    let with_alphas = report.rows.iter().any(|r| !r.alphas.is_empty());
    let mut s = String::from("image_id,label,global_pred,local_pred,fused_pred");
    if with_alphas {
        for t in 1..=time_steps {
            s.push_str(&format!(",alpha_{t}"));
        }
    }
    s.push('\n');
    for r in &report.rows {
        s.push_str(&format!(
            "{},{},{},{},{}",
            r.image_id, r.label, r.global_pred, r.local_pred, r.fused_pred
        ));
        for a in &r.alphas {
            s.push_str(&format!(",{a:.9}"));
        }
        s.push('\n');
    }
    s
}

pub fn eval_json(report: &EvalReport) -> String {
    let doc = json!({
        "samples": report.rows.len(),
        "global_acc": report.global_acc,
        "local_acc": report.local_acc,
        "fused_acc": report.fused_acc,
    });
    let mut s = serde_json::to_string_pretty(&doc).expect("json");
    s.push('\n');
    s
}

fn write_eval(out: &Path, model: &TwoStreamModel, report: &EvalReport) -> Result<()> {
    write(&out.join("eval.json"), eval_json(report))?;
    write(&out.join("alphas.csv"), alphas_csv(report, model.time_steps()))
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<TwoStreamModel> {
    let mut model = TwoStreamModel::zeros(cfg.model.clone())?;
    checkpoint::load_into(path, &mut model)?;
    Ok(model)
}

fn cmd_gen(common: &Common) -> Result<()> {
    let cfg = effective_config(common, "data.seed")?;
    let (tr, te) = data::generate(&cfg.data)?;
    prepare_out(&common.out, &cfg)?;
    data::write_dataset(&common.out.join("train"), &tr)?;
    data::write_dataset(&common.out.join("test"), &te)?;
    println!("wrote {} train and {} test samples to {}", tr.len(), te.len(), common.out.display());
    Ok(())
}

fn cmd_train(common: &Common) -> Result<()> {
    let cfg = effective_config(common, "train.seed")?;
    let (tr, te) = load_data(&cfg)?;
    let out = &common.out;
    prepare_out(out, &cfg)?;
    let mut model = TwoStreamModel::init(cfg.model.clone(), cfg.train.seed)?;
    let rows = train::train(&mut model, &tr, &te, &cfg.train, |r| {
        println!(
            "epoch {:>3}  loss {:.4}  global {:.4}  local {:.4}  fused {:.4}  ({} ms)",
            r.epoch, r.train_loss, r.global_acc, r.local_acc, r.fused_acc, r.wall_ms
        );
    })?;
    write(&out.join("metrics.csv"), metrics_csv(&rows))?;
    write(&out.join("timing.csv"), timing_csv(&rows))?;
    checkpoint::save(&model, &out.join("model.ckpt"))?;
    let o = &cfg.train;
    let report = evaluate(&model, &te, &o.weights, o.eval_patch, o.patch_size)?;
    write_eval(out, &model, &report)?;
    Ok(())
}

fn cmd_eval(common: &Common, ckpt: Option<&Path>) -> Result<()> {
    let cfg = effective_config(common, "train.seed")?;
    let path = ckpt.map(Path::to_path_buf).unwrap_or_else(|| common.out.join("model.ckpt"));
    let model = load_model(&cfg, &path)?;
    let (_, te) = load_data(&cfg)?;
    let o = &cfg.train;
    let report = evaluate(&model, &te, &o.weights, o.eval_patch, o.patch_size)?;
    prepare_out(&common.out, &cfg)?;
    write_eval(&common.out, &model, &report)?;
    println!(
        "global {:.4}  local {:.4}  fused {:.4}  ({} samples)",
        report.global_acc,
        report.local_acc,
        report.fused_acc,
        report.rows.len()
    );
    Ok(())
}

fn cmd_ablate(common: &Common, mode: &str) -> Result<()> {
    let mode: AblationMode = mode.parse()?;
    let cfg = effective_config(common, "train.seed")?;
    let (tr, te) = load_data(&cfg)?;
    prepare_out(&common.out, &cfg)?;
    let table = ablation::run(&cfg, mode, &tr, &te)?;
    let csv = table.to_csv();
    write(&common.out.join(format!("ablation_{mode}.csv")), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_saliency(
    common: &Common,
    ckpt: Option<&Path>,
    image_id: Option<&str>,
    patch: Option<usize>,
    class_id: Option<usize>,
) -> Result<()> {
    let cfg = effective_config(common, "train.seed")?;
    let path = ckpt.map(Path::to_path_buf).unwrap_or_else(|| common.out.join("model.ckpt"));
    let model = load_model(&cfg, &path)?;
    let (_, te) = load_data(&cfg)?;
    let wanted = image_id.map(str::to_string).or_else(|| cfg.saliency.image_id.clone());
    let sample = match &wanted {
        Some(id) => te
            .iter()
            .find(|s| &s.image_id == id)
            .ok_or_else(|| Error::Validation(format!("no test image with id {id}")))?,
        None => te
            .first()
            .ok_or_else(|| Error::Validation("test split is empty".into()))?,
    };
    let patch_index = patch.unwrap_or(cfg.saliency.patch);
    let spec = sample.patches.get(patch_index).ok_or_else(|| {
        Error::Validation(format!(
            "image {} has {} patches, index {patch_index} requested",
            sample.image_id,
            sample.patches.len()
        ))
    })?;
    let class = class_id.or(cfg.saliency.class_id).unwrap_or(sample.label);
    let input = local_input(sample, spec, cfg.train.patch_size)?;
    let maps = saliency::grad_cam_sweep(&model, &input, class, &format!("p{patch_index}"))?;
    prepare_out(&common.out, &cfg)?;
    for hm in &maps {
        let file = common.out.join(hm.file_name(&sample.image_id));
        saliency::export_heatmap(hm, &file)?;
    }
    println!("wrote {} heatmaps for {} to {}", maps.len(), sample.image_id, common.out.display());
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(c) => cmd_gen(c),
        Command::Train(c) => cmd_train(c),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint.as_deref()),
        Command::Ablate { mode, common } => cmd_ablate(common, mode),
        Command::Saliency {
            common,
            checkpoint,
            image_id,
            patch,
            class_id,
        } => cmd_saliency(common, checkpoint.as_deref(), image_id.as_deref(), *patch, *class_id),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
/// Failures print a single `E_CODE: message` line on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let first = e.to_string();
            let line = first.lines().next().unwrap_or("bad arguments").trim_start_matches("error: ");
            eprintln!("E_USAGE: {line}");
            return 2;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("{}: {msg}", e.code());
            1
        }
    }
}
