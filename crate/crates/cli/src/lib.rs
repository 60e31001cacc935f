//! `vesselseg` command-line front end.
//!
//! Exit status: 0 on success, 1 for errors reported by the toolkit, 2 for
//! usage errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use vesselseg_core::checkpoint::{self, read_checkpoint};
use vesselseg_core::config::{Settings, Source};
use vesselseg_core::dataio::{self, DatasetSplit, LabelledImage, VesselMask};
use vesselseg_core::error::{Error, Result};
use vesselseg_core::eval::{self, EvalReport};
use vesselseg_core::inference::{self, TilingPolicy};
use vesselseg_core::train::{self, EpochRecord, TrainObserver};
use vesselseg_core::vmetrics::{self, FractalOptions};
use vesselseg_core::{Model, VERSION};

pub const THREADS_ENV: &str = "VESSELSEG_NUM_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "vesselseg",
    version,
    about = "Retinal vessel segmentation for infra-red SLO images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Configuration file of `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SelectOn {
    Val,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a configuration file
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (overrides `output_dir`)
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on labelled images
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Split file; the test split is reported and the validation split can
        /// supply the threshold. Without it every manifest image is evaluated.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, conflicts_with = "select_on")]
        threshold: Option<f64>,
        /// Split on which the F1-optimal threshold is chosen
        #[arg(long, value_enum)]
        select_on: Option<SelectOn>,
        /// Directory for report.txt, report.csv, roc.csv and pr.csv
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Segment one image
    Segment {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// 16-bit probability map PNG
        #[arg(long)]
        output: PathBuf,
        /// Binary mask PNG; defaults to `<output stem>_mask.png`
        #[arg(long)]
        mask_output: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Force tiled inference
        #[arg(long)]
        tiled: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Vessel density and fractal dimension of binary masks
    Metrics {
        #[arg(long, required = true, num_args = 1..)]
        mask: Vec<PathBuf>,
        /// Box sizes in pixels, comma separated
        #[arg(long, value_delimiter = ',')]
        box_sizes: Option<Vec<usize>>,
        /// Grid offsets averaged per box size
        #[arg(long)]
        offsets: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    configure_threads();
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, output_dir } => cmd_train(&config, output_dir),
        Command::Eval {
            model,
            manifest,
            split,
            threshold,
            select_on,
            output,
            config,
        } => cmd_eval(
            &model,
            &manifest,
            split.as_deref(),
            threshold,
            select_on,
            output.as_deref(),
            &config,
        ),
        Command::Segment {
            model,
            input,
            output,
            mask_output,
            threshold,
            tiled,
            config,
        } => cmd_segment(&model, &input, &output, mask_output, threshold, tiled, &config),
        Command::Metrics {
            mask,
            box_sizes,
            offsets,
            config,
        } => cmd_metrics(&mask, box_sizes, offsets, &config),
    }
}

/// Defaults, then the config file, then `--set` overrides.
fn load_settings(args: &ConfigArgs) -> Result<(Settings, PathBuf)> {
    let mut s = Settings::default();
    let base = match &args.config {
        Some(path) => {
            s.apply_file(path)?;
            path.parent().map(Path::to_path_buf).unwrap_or_default()
        }
        None => PathBuf::new(),
    };
    s.apply_overrides(&args.set)?;
    Ok((s, base))
}

fn resolve(base: &Path, value: &str) -> PathBuf {
    let p = PathBuf::from(value);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

struct Progress;

impl TrainObserver for Progress {
    fn on_epoch_end(&mut self, epoch: usize, _: &Model, r: &EpochRecord) -> std::ops::ControlFlow<()> {
        let val = r.val_loss.map(|v| format!(" val_loss {v:.5}")).unwrap_or_default();
        eprintln!(
            "epoch {epoch:4} lr {:.0e} train_loss {:.5}{val} ({:.1}s)",
            r.learning_rate, r.train_loss, r.seconds
        );
        std::ops::ControlFlow::Continue(())
    }
}

fn cmd_train(args: &ConfigArgs, output_dir: Option<PathBuf>) -> Result<()> {
    let (mut settings, base) = load_settings(args)?;
    settings.resolve_seeds();
    let mut config = settings.train_config()?;
    if settings.get("manifest").is_empty() {
        return Err(Error::Config("'manifest' is not set".into()));
    }
    let out = match output_dir {
        Some(d) => {
            settings.set("output_dir", &d.to_string_lossy(), Source::Flag)?;
            d
        }
        None => resolve(&base, settings.get("output_dir")),
    };
    std::fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        message: e.to_string(),
    })?;

    let data = dataio::load_manifest(resolve(&base, settings.get("manifest")))?;
    let split = if settings.get("split_file").is_empty() {
        let ids: Vec<String> = data.iter().map(|s| s.id().to_string()).collect();
        let counts = (
            settings.parse("split.train")?,
            settings.parse("split.val")?,
            settings.parse("split.test")?,
        );
        dataio::make_split(&ids, counts, config.seeds.split)?
    } else {
        DatasetSplit::read(resolve(&base, settings.get("split_file")))?
    };
    split.write(out.join("split.txt"))?;
    write_text(
        &out.join("run.cfg"),
        &format!("# vesselseg {VERSION} train\n{}", settings.to_text()),
    )?;

    config.checkpoint_dir = Some(out.join("checkpoints"));
    let (model, history) = train::run_training_with(&config, &split, &data, &mut Progress)?;
    history.write_csv(out.join("history.csv"))?;
    let id = checkpoint::save_checkpoint(
        &model,
        &train::final_metadata(&config, &history),
        out.join("model.ckpt"),
    )?;
    println!("model {} written to {}", id, out.join("model.ckpt").display());
    Ok(())
}

fn subset(data: &[LabelledImage], ids: &[String]) -> Result<Vec<LabelledImage>> {
    Ok(dataio::select(data, ids)?.into_iter().cloned().collect())
}

fn cmd_eval(
    model_path: &Path,
    manifest: &Path,
    split: Option<&Path>,
    threshold: Option<f64>,
    select_on: Option<SelectOn>,
    output: Option<&Path>,
    args: &ConfigArgs,
) -> Result<()> {
    let (settings, _) = load_settings(args)?;
    let select_on = match select_on {
        Some(s) => Some(s),
        None if threshold.is_some() => None,
        None => match settings.get("select_on") {
            "val" if settings.source("select_on") == Source::Default => None,
            "val" => Some(SelectOn::Val),
            "test" => Some(SelectOn::Test),
            other => return Err(Error::Config(format!("select_on must be val or test, got '{other}'"))),
        },
    };
    let model = read_checkpoint(model_path)?.model;
    let data = dataio::load_manifest(manifest)?;
    let (select_set, report_set) = match split {
        Some(path) => {
            let split = DatasetSplit::read(path)?;
            let test = subset(&data, &split.test_ids)?;
            let select = match select_on.unwrap_or(SelectOn::Val) {
                SelectOn::Val => subset(&data, &split.val_ids)?,
                SelectOn::Test => test.clone(),
            };
            (select, test)
        }
        None => {
            if select_on == Some(SelectOn::Val) {
                return Err(Error::Config("--select-on val requires --split".into()));
            }
            (data.clone(), data)
        }
    };
    let report_refs: Vec<&LabelledImage> = report_set.iter().collect();
    let maps = eval::predict_all(&model, &report_refs)?;
    let masks: Vec<VesselMask> = report_set.iter().map(|s| s.mask.clone()).collect();
    let threshold = match threshold {
        Some(t) => t,
        None => {
            let same = select_set.len() == report_set.len()
                && select_set.iter().zip(&report_set).all(|(a, b)| a.id() == b.id());
            if same {
                eval::best_f1_threshold(&maps, &masks, None)?.0
            } else {
                let refs: Vec<&LabelledImage> = select_set.iter().collect();
                let sel_maps = eval::predict_all(&model, &refs)?;
                let sel_masks: Vec<VesselMask> = select_set.iter().map(|s| s.mask.clone()).collect();
                eval::best_f1_threshold(&sel_maps, &sel_masks, None)?.0
            }
        }
    };
    let report: EvalReport = eval::evaluate_maps(&maps, &masks, Some(threshold))?;
    print!("{}", report.to_text());
    if let Some(dir) = output {
        report.write(dir)?;
    }
    Ok(())
}

fn default_mask_path(output: &Path) -> PathBuf {
    let stem = output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    output.with_file_name(format!("{stem}_mask.png"))
}

fn cmd_segment(
    model_path: &Path,
    input: &Path,
    output: &Path,
    mask_output: Option<PathBuf>,
    threshold: Option<f64>,
    tiled: bool,
    args: &ConfigArgs,
) -> Result<()> {
    let (settings, _) = load_settings(args)?;
    let threshold = match threshold {
        Some(t) => t,
        None => settings.parse("threshold")?,
    };
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
    }
    let policy = TilingPolicy {
        tile_width: settings.parse("tile_width")?,
        tile_height: settings.parse("tile_height")?,
        overlap: settings.parse("tile_overlap")?,
    };
    let limit_mb: usize = settings.parse("memory_limit_mb")?;
    let limit = (limit_mb > 0).then_some(limit_mb << 20);

    let model = read_checkpoint(model_path)?.model;
    let image = dataio::load_image(input)?;
    let map = if tiled {
        inference::segment_tiled(&model, &image, &policy)?
    } else {
        inference::segment_auto(&model, &image, limit, &policy)?
    };
    let mask = inference::binarize(&map, threshold);
    let mask_path = mask_output.unwrap_or_else(|| default_mask_path(output));
    inference::write_probability_png(&map, output)?;
    inference::write_mask_png(&mask, &mask_path)?;

    let mut meta = BTreeMap::new();
    meta.insert("source".to_string(), input.display().to_string());
    meta.insert(
        "checkpoint_id".to_string(),
        map.checkpoint_id.clone().unwrap_or_default(),
    );
    meta.insert("threshold".to_string(), threshold.to_string());
    meta.insert("seconds".to_string(), format!("{:.4}", map.seconds));
    meta.insert("tiled".to_string(), map.tiled.to_string());
    meta.insert("version".to_string(), VERSION.to_string());
    meta.insert("mask".to_string(), mask_path.display().to_string());
    let mut sidecar = output.as_os_str().to_owned();
    sidecar.push(".txt");
    inference::write_sidecar(&meta, PathBuf::from(sidecar))?;
    println!(
        "{} {}x{} in {:.3}s{}",
        image.id,
        map.width(),
        map.height(),
        map.seconds,
        if map.tiled { " (tiled)" } else { "" }
    );
    Ok(())
}

fn cmd_metrics(
    masks: &[PathBuf],
    box_sizes: Option<Vec<usize>>,
    offsets: Option<usize>,
    args: &ConfigArgs,
) -> Result<()> {
    let (settings, _) = load_settings(args)?;
    let options = FractalOptions {
        box_sizes,
        offsets: match offsets {
            Some(n) => n,
            None => settings.parse("fractal.offsets")?,
        },
    };
    let mut out = String::from("id,vessel_density,fractal_dimension,fit_residual\n");
    for path in masks {
        let mask = dataio::load_mask(path)?;
        let m = vmetrics::vascular_metrics(&mask, &options)?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        out.push_str(&format!(
            "{id},{:.6},{:.6},{:.6}\n",
            m.vessel_density, m.fractal_dimension, m.fit.residual
        ));
    }
    print!("{out}");
    Ok(())
}
