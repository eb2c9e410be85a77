//! `avgzsl`: synthetic data, training, evaluation and archive inspection.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
//! failure. Machine-readable results go to files, a human summary to
//! stdout and diagnostics to stderr.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avgzsl::data::{load_archive, stage_view, synth_generate, write_archive, FeatureArchive, Stage, SynthSpec};
use avgzsl::error::Error;
use avgzsl::evalkit::{
    build_task, embed_class_table, embed_samples, harmonic_mean, mean_class_accuracy, search_calibration,
    EvalReport,
};
use avgzsl::model::load_checkpoint;
use avgzsl::nn::Matrix;
use avgzsl::trainer::{run_protocol, write_atomic, EpochRecord, Observer, Preset, ProtocolConfig, REPORT_FILE};
use clap::{Parser, Subcommand, ValueEnum};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "avgzsl", version, about = "Audio-visual generalized zero-shot learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature archive.
    Synth {
        /// SynthSpec JSON; defaults apply to missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the two-stage protocol and write report, log and checkpoints.
    Train {
        /// Protocol config JSON. Without it the preset is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Base settings when no config is given.
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        #[arg(long)]
        archive: Option<PathBuf>,
        /// Sets the init, shuffle and dropout seeds.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// No per-epoch lines on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Score a checkpoint on the validation or test view.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        archive: PathBuf,
        /// Penalty added to seen-class distances.
        #[arg(long, default_value_t = 0.0, conflicts_with = "no_calibration")]
        gamma: f64,
        /// Plain nearest-class prediction over all classes.
        #[arg(long)]
        no_calibration: bool,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Where to write the JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Find the gamma that maximizes HM on a view.
    SearchCalibration {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        archive: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the output-space embeddings of every sample and class.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize an archive: classes per role, split sizes, dims.
    Inspect {
        #[arg(long)]
        archive: PathBuf,
        /// Print the summary as JSON.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

impl SplitArg {
    fn stage(self) -> Stage {
        match self {
            SplitArg::Val => Stage::One,
            SplitArg::Test => Stage::Two,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Vggsound,
    Ucf,
    Activitynet,
    Synthetic,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Vggsound => Preset::VggSound,
            PresetArg::Ucf => Preset::Ucf,
            PresetArg::Activitynet => Preset::ActivityNet,
            PresetArg::Synthetic => Preset::Synthetic,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { EXIT_NUMERIC } else { EXIT_DATA })
        }
    }
}

fn run(command: Command) -> avgzsl::error::Result<()> {
    match command {
        Command::Synth { spec, out, seed } => {
            let mut spec = match spec {
                Some(path) => read_json::<SynthSpec>(&path)?,
                None => SynthSpec::default(),
            };
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            let archive = synth_generate(&spec)?;
            write_archive(&archive, &out)?;
            println!("wrote {} samples, {} classes to {}", archive.num_samples(), archive.num_classes(), out.display());
            Ok(())
        }
        Command::Train {
            config,
            out,
            preset,
            archive,
            seed,
            epochs,
            lr,
            batch_size,
            quiet,
        } => {
            let mut c = match (config, preset) {
                (Some(path), _) => ProtocolConfig::load(path)?,
                (None, Some(p)) => ProtocolConfig::preset(p.into()),
                (None, None) => ProtocolConfig::default(),
            };
            if let Some(a) = archive {
                c.archive = a;
            }
            if let Some(s) = seed {
                c.seeds.init = s;
                c.seeds.shuffle = s;
                c.seeds.dropout = s;
            }
            if let Some(e) = epochs {
                c.epochs_stage1 = e;
            }
            if let Some(lr) = lr {
                c.optimizer.lr = lr;
            }
            if let Some(b) = batch_size {
                c.batch_size = b;
            }
            c.validate()?;
            let report = run_protocol(&c, &out, &mut EpochLines { quiet })?;
            println!(
                "stage 1: best epoch {} of {}, val HM {:.4} at gamma {:.2}",
                report.stage1.best_epoch, c.epochs_stage1, report.stage1.best_val_hm, report.stage1.best_gamma
            );
            print_eval("test", &report.test);
            println!("report: {}", out.join(REPORT_FILE).display());
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            archive,
            gamma,
            no_calibration,
            split,
            out,
        } => {
            let params = load_checkpoint(&checkpoint)?;
            let archive = load_archive(&archive)?;
            let report = if no_calibration {
                uncalibrated_report(&params, &archive, split.stage())?
            } else {
                build_task(&params, &archive, &stage_view(&archive, split.stage()))?.report(gamma)?
            };
            print_eval(split_name(split), &report);
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
            Ok(())
        }
        Command::SearchCalibration {
            checkpoint,
            archive,
            split,
            out,
        } => {
            let params = load_checkpoint(&checkpoint)?;
            let archive = load_archive(&archive)?;
            let task = build_task(&params, &archive, &stage_view(&archive, split.stage()))?;
            let (gamma, _) = search_calibration(&task, &avgzsl::evalkit::default_grid())?;
            let report = task.report(gamma)?;
            println!("best gamma {gamma:.2}");
            print_eval(split_name(split), &report);
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
            Ok(())
        }
        Command::ExportEmbeddings { checkpoint, archive, out } => {
            let params = load_checkpoint(&checkpoint)?;
            let archive = load_archive(&archive)?;
            export_embeddings(&params, &archive, &out)
        }
        Command::Inspect { archive, json } => {
            let archive = load_archive(&archive)?;
            let summary = summarize(&archive);
            if json {
                println!("{}", serde_json::to_string_pretty(&summary)?);
            } else {
                print_summary(&summary);
            }
            Ok(())
        }
    }
}

struct EpochLines {
    quiet: bool,
}

impl Observer for EpochLines {
    fn epoch_done(&mut self, r: &EpochRecord) {
        if self.quiet {
            return;
        }
        let stage = match r.stage {
            Stage::One => 1,
            Stage::Two => 2,
        };
        let mut line = format!("stage {stage} epoch {:>3} lr {:.1e} loss {:.4}", r.epoch, r.lr, r.loss.l_total);
        if let Some(v) = r.validation {
            line += &format!(" val HM {:.4} gamma {:.2}", v.hm, v.gamma);
        }
        eprintln!("{line}");
    }
}

fn split_name(split: SplitArg) -> &'static str {
    match split {
        SplitArg::Val => "val",
        SplitArg::Test => "test",
    }
}

fn print_eval(what: &str, r: &EvalReport) {
    println!(
        "{what}: acc_S {:.4} acc_U {:.4} HM {:.4} acc_ZSL {:.4} (gamma {:.2})",
        r.acc_s, r.acc_u, r.hm, r.acc_zsl, r.gamma
    );
}

/// Nearest class over all candidates with no seen-class penalty.
fn uncalibrated_report(
    params: &avgzsl::model::ModelParams<f32>,
    archive: &FeatureArchive,
    stage: Stage,
) -> avgzsl::error::Result<EvalReport> {
    let view = stage_view(archive, stage);
    let task = build_task(params, archive, &view)?;
    let all = task.table.classes.clone();
    let preds = task.table.classify(&all)?;
    let present = |classes: &[usize]| -> Vec<usize> {
        classes.iter().copied().filter(|c| task.labels.contains(c)).collect()
    };
    let seen = present(&view.seen_classes);
    let unseen = present(&view.unseen_classes);
    let acc_s = mean_class_accuracy(&preds, &task.labels, &seen)?;
    let acc_u = mean_class_accuracy(&preds, &task.labels, &unseen)?;
    let mut scored = seen.clone();
    scored.extend(&unseen);
    Ok(EvalReport {
        acc_s,
        acc_u,
        hm: harmonic_mean(acc_s, acc_u),
        acc_zsl: task.acc_zsl()?,
        gamma: 0.0,
        per_class_accuracy: avgzsl::evalkit::per_class_accuracy(&preds, &task.labels, &scored)?,
    })
}

fn export_embeddings(
    params: &avgzsl::model::ModelParams<f32>,
    archive: &FeatureArchive,
    out: &Path,
) -> avgzsl::error::Result<()> {
    std::fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let samples: Vec<usize> = (0..archive.num_samples()).collect();
    let classes: Vec<usize> = (0..archive.num_classes()).collect();
    let theta_o = embed_samples(params, archive, &samples)?;
    let theta_w = embed_class_table(params, archive, &classes)?;
    write_matrix(&out.join("samples.f32"), &theta_o)?;
    write_matrix(&out.join("classes.f32"), &theta_w)?;
    let meta = serde_json::json!({
        "samples": {"file": "samples.f32", "rows": theta_o.rows(), "cols": theta_o.cols()},
        "classes": {"file": "classes.f32", "rows": theta_w.rows(), "cols": theta_w.cols()},
        "dtype": "f32",
        "byte_order": "little",
    });
    write_json(&out.join("embeddings.json"), &meta)?;
    println!(
        "wrote {} sample and {} class embeddings of width {} to {}",
        theta_o.rows(),
        theta_w.rows(),
        theta_o.cols(),
        out.display()
    );
    Ok(())
}

fn write_matrix(path: &Path, m: &Matrix<f32>) -> avgzsl::error::Result<()> {
    let bytes: Vec<u8> = m.as_slice().iter().flat_map(|x| x.to_le_bytes()).collect();
    write_atomic(path, &bytes)
}

#[derive(serde::Serialize)]
struct Summary {
    dataset: String,
    d_in_a: usize,
    d_in_v: usize,
    num_samples: usize,
    train_seen_classes: usize,
    val_unseen_classes: usize,
    test_unseen_classes: usize,
    split_sizes: std::collections::BTreeMap<String, usize>,
}

fn summarize(a: &FeatureArchive) -> Summary {
    use avgzsl::data::ClassRole;
    let m = &a.manifest;
    Summary {
        dataset: m.dataset.clone(),
        d_in_a: m.d_in_a,
        d_in_v: m.d_in_v,
        num_samples: a.num_samples(),
        train_seen_classes: m.classes_with_role(ClassRole::TrainSeen).len(),
        val_unseen_classes: m.classes_with_role(ClassRole::ValUnseen).len(),
        test_unseen_classes: m.classes_with_role(ClassRole::TestUnseen).len(),
        split_sizes: a.split_sizes().into_iter().map(|(s, n)| (format!("{s:?}"), n)).collect(),
    }
}

fn print_summary(s: &Summary) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "dataset: {}", s.dataset);
    let _ = writeln!(out, "d_in_a={} d_in_v={}", s.d_in_a, s.d_in_v);
    let _ = writeln!(out, "samples: {}", s.num_samples);
    let _ = writeln!(
        out,
        "classes: K_s={} K_u(val)={} K_u(test)={}",
        s.train_seen_classes, s.val_unseen_classes, s.test_unseen_classes
    );
    for (split, n) in &s.split_sizes {
        let _ = writeln!(out, "  {split:<6} {n}");
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> avgzsl::error::Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> avgzsl::error::Result<()> {
    write_atomic(path, (serde_json::to_string_pretty(value)? + "\n").as_bytes())
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
