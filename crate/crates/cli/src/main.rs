//! Single entry point for the segmentation pipeline:
//! `synth`, `preprocess`, `train`, `infer`, `evaluate`, `report`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use nestseg::checkpoint::load_checkpoint;
use nestseg::config::{apply_overrides, load_config, PipelineConfig};
use nestseg::infer::predict_case;
use nestseg::metrics::{
    evaluate_case_named, read_metrics_csv, summarize, write_metrics_csv, write_summary_csv,
};
use nestseg::preprocess::{correct_bias, zscore_normalize, BiasOptions};
use nestseg::synth::{case_seed, generate_case, BiasFieldSpec, PhantomParams};
use nestseg::train::train_run;
use nestseg::volume::{LabelMap, Modality, ModalityStack};
use nestseg::{io, Error};

#[derive(Parser)]
#[command(
    name = "nestseg",
    about = "Coarse-to-fine cascaded 3D segmentation of nested tumor regions",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantom cases in the dataset layout.
    Synth(SynthArgs),
    /// Bias-correct and normalize cases into a parallel directory tree.
    Preprocess(PreprocessArgs),
    /// Train the cascade on a preprocessed dataset.
    Train(TrainArgs),
    /// Predict fused label maps for every case in a dataset.
    Infer(InferArgs),
    /// Compare predictions against ground truth, one CSV row per case and region.
    Evaluate(EvaluateArgs),
    /// Summarize a metrics CSV into boxplot statistics per region and metric.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of cases to generate.
    #[arg(long)]
    cases: usize,
    /// Cubic volume edge length in voxels (>= 32).
    #[arg(long)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Additive noise sigma relative to the tissue mean.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Multiplicative bias-field amplitude; 0 disables injection.
    #[arg(long, default_value_t = 0.0)]
    bias_amplitude: f64,
    /// Polynomial degree of the injected bias field.
    #[arg(long, default_value_t = 2)]
    bias_degree: usize,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Input dataset root.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Polynomial degree of the bias-field estimator.
    #[arg(long, default_value_t = 3)]
    bias_degree: usize,
    #[arg(long, default_value_t = 5)]
    bias_iterations: usize,
    /// Skip bias correction, only normalize.
    #[arg(long, default_value_t = false)]
    no_bias: bool,
    /// External per-volume correction command with {input} and {output}
    /// placeholders, run through `sh -c`; replaces the built-in estimator.
    #[arg(long)]
    external_bias_cmd: Option<String>,
    /// Cases processed in parallel.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Preprocessed dataset root.
    #[arg(long)]
    data: PathBuf,
    /// TOML configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory (checkpoints, loss log, effective config).
    #[arg(long)]
    out: PathBuf,
    /// Resume from a checkpoint written with the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override one config key, e.g. --set train.epochs=3 (repeatable).
    #[arg(long = "set", value_parser = parse_key_value)]
    set: Vec<(String, String)>,
    /// Shorthand for --set seed=S.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for --set train.epochs=N.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Preprocessed dataset root.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write per-step probability volumes.
    #[arg(long, default_value_t = false)]
    save_probs: bool,
    /// TOML config supplying the [infer] section.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cubic patch edge; overrides the config.
    #[arg(long)]
    patch_size: Option<usize>,
    /// Cubic stride; defaults to half the patch size.
    #[arg(long)]
    stride: Option<usize>,
    /// Cases processed in parallel.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of `<case>_pred.nii.gz` files, or a dataset root whose
    /// `_seg` volumes serve as predictions.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth dataset root.
    #[arg(long)]
    truth: PathBuf,
    /// Output metrics CSV.
    #[arg(long)]
    out: PathBuf,
    /// Directed-distance percentile: 100 is the classic maximum, 95 the
    /// robust variant.
    #[arg(long, default_value_t = 100.0)]
    hausdorff_percentile: f64,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got '{s}'"))
}

/// The only execution backend is the CPU; reject anything else early.
fn check_device() -> Result<()> {
    if let Ok(device) = std::env::var("NESTSEG_DEVICE") {
        if !device.eq_ignore_ascii_case("cpu") && !device.is_empty() {
            bail!("NESTSEG_DEVICE={device} is not supported; this build only runs on 'cpu'");
        }
    }
    Ok(())
}

fn run_parallel<T: Send + Sync, E>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> Result<(), E> + Send + Sync,
) -> Result<(), E>
where
    E: Send,
{
    if workers <= 1 {
        items.iter().try_for_each(f)
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("thread pool");
        pool.install(|| {
            use rayon::prelude::*;
            items.par_iter().try_for_each(&f)
        })
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut params = PhantomParams::for_shape([args.size; 3]);
    params.noise_sigma = args.noise;
    for i in 0..args.cases {
        let seed = case_seed(args.seed, i as u64);
        params.seed = seed;
        params.bias = if args.bias_amplitude > 0.0 {
            Some(BiasFieldSpec::random_for_seed(args.bias_degree, args.bias_amplitude, seed)?)
        } else {
            None
        };
        let case_id = format!("case_{i:04}");
        let (stack, labels) = generate_case(&params, &case_id)?;
        io::write_case(&args.out, &stack, Some(&labels))?;
        println!("wrote {case_id}");
    }
    Ok(())
}

/// Runs the user-provided correction command on one volume file.
fn external_correct(cmd: &str, input: &Path, output: &Path) -> Result<()> {
    let line = cmd
        .replace("{input}", &input.display().to_string())
        .replace("{output}", &output.display().to_string());
    let status = std::process::Command::new("sh")
        .arg("-c")
        .arg(&line)
        .status()
        .with_context(|| format!("failed to launch external bias command: {line}"))?;
    if !status.success() {
        bail!("external bias command failed ({status}): {line}");
    }
    if !output.exists() {
        bail!("external bias command produced no output file: {line}");
    }
    Ok(())
}

fn cmd_preprocess(args: PreprocessArgs) -> Result<()> {
    let cases = io::list_cases(&args.input)?;
    let bias = (!args.no_bias).then_some(BiasOptions {
        degree: args.bias_degree,
        iterations: args.bias_iterations,
    });
    std::fs::create_dir_all(&args.out)?;

    run_parallel(&cases, args.workers, |case_dir| -> Result<()> {
        let (stack, labels) = io::read_case(case_dir)?;
        let case_id = stack.case_id.clone();
        let mut data = stack.data.clone();
        for m in Modality::ALL {
            let ch = m.channel();
            let vol = stack.data.index_axis(ndarray::Axis(0), ch).to_owned();
            let corrected = match (&args.external_bias_cmd, bias) {
                (Some(cmd), _) => {
                    let in_path = io::case_file(case_dir, &case_id, m.suffix());
                    let tmp = args.out.join(format!("{case_id}_{}_biascorr.nii.gz", m.suffix()));
                    external_correct(cmd, &in_path, &tmp)?;
                    let (vol, _) = io::read_volume(&tmp)?;
                    std::fs::remove_file(&tmp).ok();
                    vol
                }
                (None, Some(opts)) => correct_bias(&vol, opts)?,
                (None, None) => vol,
            };
            let normalized = zscore_normalize(&corrected)?;
            data.index_axis_mut(ndarray::Axis(0), ch).assign(&normalized);
        }
        let out_stack = ModalityStack::new(data, stack.spacing, case_id.clone())?;
        io::write_case(&args.out, &out_stack, labels.as_ref())?;
        println!("preprocessed {case_id}");
        Ok(())
    })?;
    Ok(())
}

fn load_pipeline_config(path: Option<&PathBuf>) -> Result<PipelineConfig> {
    match path {
        Some(p) => Ok(load_config(p)?),
        None => Ok(PipelineConfig::default()),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    check_device()?;
    let base = load_pipeline_config(args.config.as_ref())?;
    let mut overrides = args.set.clone();
    if let Some(seed) = args.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(epochs) = args.epochs {
        overrides.push(("train.epochs".into(), epochs.to_string()));
    }
    let cfg = apply_overrides(&base, &overrides)?;

    let mut dataset = Vec::new();
    for case_dir in io::list_cases(&args.data)? {
        let (stack, labels) = io::read_case(&case_dir)?;
        let labels = labels.ok_or_else(|| {
            Error::Dataset(format!("{}: no segmentation; cannot train", stack.case_id))
        })?;
        dataset.push((stack, labels));
    }
    let outcome = train_run(&cfg, &dataset, &args.out, args.resume.as_deref())?;
    println!(
        "trained {} epochs; final epoch-mean loss {:.6}; checkpoint {}",
        outcome.epoch_losses.len(),
        outcome.epoch_losses.last().copied().unwrap_or(f64::NAN),
        outcome.checkpoint.display()
    );
    Ok(())
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    check_device()?;
    let loaded = load_checkpoint(&args.checkpoint)?;
    let base = load_pipeline_config(args.config.as_ref())?;
    let mut opts = base.infer.clone();
    if let Some(p) = args.patch_size {
        opts.patch_size = [p; 3];
    }
    if let Some(s) = args.stride {
        opts.stride = Some([s; 3]);
    }
    opts.save_probs |= args.save_probs;
    std::fs::create_dir_all(&args.out)?;

    let cases = io::list_cases(&args.data)?;
    run_parallel(&cases, args.workers, |case_dir| -> Result<()> {
        let (stack, _) = io::read_case(case_dir)?;
        let pred = predict_case(&loaded.model, &loaded.store, &stack, &opts)?;
        let case_id = &stack.case_id;
        io::write_volume_u8(
            &args.out.join(format!("{case_id}_pred.nii.gz")),
            &pred.labels.labels,
            pred.labels.spacing,
        )?;
        if opts.save_probs {
            for (name, vol) in
                [("wt", &pred.p_wt), ("tc", &pred.p_tc), ("et", &pred.p_et)]
            {
                io::write_volume_f32(
                    &args.out.join(format!("{case_id}_prob_{name}.nii.gz")),
                    vol,
                    stack.spacing,
                )?;
            }
        }
        println!("predicted {case_id}");
        Ok(())
    })?;
    Ok(())
}

/// Finds the prediction for a case: an `infer` output file, or the case's own
/// `_seg` volume when predictions point at a dataset root.
fn find_prediction(pred_root: &Path, case_id: &str) -> Result<LabelMap> {
    let flat = pred_root.join(format!("{case_id}_pred.nii.gz"));
    if flat.exists() {
        return Ok(io::read_label_map(&flat)?);
    }
    let nested = pred_root.join(case_id).join(format!("{case_id}_seg.nii.gz"));
    if nested.exists() {
        return Ok(io::read_label_map(&nested)?);
    }
    bail!(
        "no prediction for {case_id}: looked for {} and {}",
        flat.display(),
        nested.display()
    )
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let mut records = Vec::new();
    for case_dir in io::list_cases(&args.truth)? {
        let case_id = case_dir
            .file_name()
            .and_then(|n| n.to_str())
            .context("bad case directory name")?
            .to_string();
        let truth_path = io::case_file(&case_dir, &case_id, "seg");
        let truth = io::read_label_map(&truth_path)?;
        let pred = find_prediction(&args.pred, &case_id)?;
        records.extend(evaluate_case_named(&pred, &truth, args.hausdorff_percentile, &case_id)?);
        println!("evaluated {case_id}");
    }
    write_metrics_csv(&args.out, &records)?;
    println!("wrote {} rows to {}", records.len(), args.out.display());
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let records = read_metrics_csv(&args.metrics)?;
    let rows = summarize(&records)?;
    write_summary_csv(&args.out, &rows)?;
    println!("wrote {} summary rows to {}", rows.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Preprocess(args) => cmd_preprocess(args),
        Command::Train(args) => cmd_train(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
