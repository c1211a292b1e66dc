//! `nptn`: train, evaluate, gradient-check and probe NPTN networks.
//!
//! Exit status: 0 on success, 2 for a configuration error, 3 for a data
//! error, 4 when training hits a non-finite loss, 1 for anything else
//! (including a failed gradient check).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nptn::data::{transform_dataset, DataPaths};
use nptn::gradcheck::{
    check_layer, standard_probes, write_grad_csv, GradProbe, GradReport, Mutated,
};
use nptn::group::{
    c4_rotation_orbit, cyclic_shift_orbit, invariance_score, verify_lemma1, write_invariance_csv,
    InputTransform, InvarianceRow,
};
use nptn::layers::NptnWeights;
use nptn::training::experiment::{
    execute_run, load_datasets, preset, run_preset, summarize, write_summary_csv, PRESET_NAMES,
};
use nptn::training::{
    evaluate, load_checkpoint, parse_config, DatasetKind, LayerKind, ResolvedConfig,
};
use nptn::{NDTensor, NptnError, Result, Rng};

#[derive(Parser)]
#[command(
    name = "nptn",
    version,
    about = "Non-parametric transformation networks on the CPU"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model into --out-dir.
    Train(TrainArgs),
    /// Evaluate a checkpoint on its test set.
    Eval(EvalArgs),
    /// Certify every layer's backward pass against finite differences.
    Gradcheck(GradArgs),
    /// Verify group invariance, or probe the nodes of a trained network.
    Invariance(InvArgs),
    /// Run a named experiment over its models and seeds.
    Preset(PresetArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    /// Only `none` (CPU) is supported.
    #[arg(long, default_value = "none", value_parser = ["none"])]
    device: String,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON configuration, or the manifest of an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from an experiment preset instead of the defaults.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Model label such as `mnist-nptn-12-3` or `convnet-36`.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Extra `key=value` overrides, e.g. `train.base_lr=0.02`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluate on the first N test images only.
    #[arg(long)]
    test_subset: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    rtol: f64,
    #[arg(long, default_value_t = 1e-6)]
    atol: f64,
    /// Scale every analytic parameter gradient by this factor first.
    #[arg(long)]
    mutate: Option<f64>,
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct InvArgs {
    /// Probe the NPTN nodes of this checkpoint. Without it, verify exact
    /// invariance on cyclic-shift and C4 orbits.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// `identity`, `shift:N`, `rot90:Q` or `translate:DY,DX`; repeatable.
    #[arg(long = "transform")]
    transforms: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PresetArgs {
    /// One of the experiment names; see --list.
    #[arg(long, required_unless_present = "list")]
    preset: Option<String>,
    /// Print the preset names and exit.
    #[arg(long)]
    list: bool,
    /// Models to run instead of the preset's own; repeatable.
    #[arg(long = "model")]
    models: Vec<String>,
    /// Seeds to run instead of the preset's own; repeatable.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(flatten)]
    common: Common,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Invariance(a) => invariance(a),
        Command::Preset(a) => run_named(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn overrides(set: &[String], epochs: Option<usize>) -> Result<Vec<(String, String)>> {
    let mut out = set
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| NptnError::Config {
                    key: s.clone(),
                    msg: "expected KEY=VALUE".into(),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(e) = epochs {
        out.push(("epochs".into(), e.to_string()));
    }
    Ok(out)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| NptnError::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn print_epoch(model: &str, seed: u64, r: &nptn::training::EpochMetrics) {
    eprintln!(
        "{model} seed {seed} epoch {:>3}: train loss {:.4}  test loss {:.4}  test error {:.2}%",
        r.epoch, r.train_loss, r.test_loss, r.test_error_pct
    );
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let mut ov = overrides(&a.set, a.epochs)?;
    if let Some(s) = a.seed {
        ov.push(("seed".into(), s.to_string()));
    }
    let cfg: ResolvedConfig = match (&a.config, &a.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| NptnError::Config {
                key: "--config".into(),
                msg: format!("{}: {e}", path.display()),
            })?;
            parse_config(&text, a.model.as_deref(), &ov)?
        }
        (None, Some(name)) => {
            let p = preset(name)?;
            let model = a.model.clone().unwrap_or_else(|| p.models[0].clone());
            p.resolve(&model, p.seeds[0], &ov)?
        }
        (None, None) => parse_config("", a.model.as_deref(), &ov)?,
    };
    let data = DataPaths::new(&a.common.data_dir);
    let seed = cfg.train.seed;
    let rec = execute_run(&cfg, &data, &a.common.out_dir, a.preset.as_deref(), |r| {
        print_epoch(&cfg.model, seed, r)
    })?;
    println!(
        "{}: final test error {:.2}% ({})",
        cfg.model,
        rec.final_error().unwrap_or(f64::NAN),
        rec.manifest.artifacts.metrics.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let arch = &ck.model.arch;
    let dataset = [DatasetKind::Mnist, DatasetKind::Cifar10]
        .into_iter()
        .find(|d| d.input() == arch.input)
        .ok_or_else(|| NptnError::Spec(format!("no dataset has {:?} images", arch.input)))?;
    let cfg = ResolvedConfig {
        model: ck.model_label.clone().unwrap_or_default(),
        dataset,
        arch: arch.clone(),
        train: ck.state.config.clone(),
        train_subset: Some(2),
        test_subset: a.test_subset,
    };
    let (_, test) = load_datasets(&cfg, &DataPaths::new(&a.common.data_dir))?;
    let view = transform_dataset(&test, &cfg.train.augment.test_view(), cfg.train.test_seed)?;
    let (loss, err) = evaluate(&ck.model, &view, cfg.train.eval_batch_size)?;
    create_dir(&a.common.out_dir)?;
    let out = a.common.out_dir.join("eval.json");
    let doc = serde_json::json!({
        "checkpoint": a.checkpoint,
        "model": cfg.model,
        "epoch": ck.state.epoch,
        "test_images": view.len(),
        "test_loss": loss,
        "test_error_pct": err,
    });
    fs::write(&out, format!("{doc:#}\n")).map_err(|e| NptnError::Io {
        path: out.clone(),
        source: e,
    })?;
    println!(
        "{} after {} epochs: test loss {loss:.4}, test error {err:.2}% on {} images",
        cfg.model,
        ck.state.epoch,
        view.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradArgs) -> Result<ExitCode> {
    let mut reports: Vec<GradReport> = Vec::new();
    for probe in standard_probes() {
        let probe: Box<dyn GradProbe> = match a.mutate {
            Some(scale) => Box::new(Mutated {
                inner: probe,
                scale,
            }),
            None => probe,
        };
        let r = check_layer(probe.as_ref(), a.trials, a.rtol, a.atol, a.seed)?;
        print!("{r}");
        reports.push(r);
    }
    create_dir(&a.out_dir)?;
    let path = a.out_dir.join("gradcheck.csv");
    let f = fs::File::create(&path).map_err(|e| NptnError::Io {
        path: path.clone(),
        source: e,
    })?;
    write_grad_csv(&reports, f)?;
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!(
        "{} of {} layers pass ({})",
        reports.len() - failed,
        reports.len(),
        path.display()
    );
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn invariance(a: InvArgs) -> Result<ExitCode> {
    let mut rng = Rng::new(a.seed);
    let mut rows = Vec::new();
    match &a.checkpoint {
        None => {
            let mut orbits = Vec::new();
            for d in [4, 8, 16] {
                let w: Vec<f64> = (0..d).map(|_| rng.uniform_f64(-1.0, 1.0)).collect();
                orbits.push(cyclic_shift_orbit(&w)?);
            }
            orbits.push(c4_rotation_orbit(&NDTensor::uniform(
                &[3, 3],
                -1.0,
                1.0,
                &mut rng,
            ))?);
            for orbit in &orbits {
                let r = verify_lemma1(orbit, a.trials, &mut rng)?;
                let mut row = InvarianceRow::new(0, (0, 0), &r);
                row.transform = format!("{} d={}", r.transform, orbit.dim());
                rows.push(row);
            }
        }
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let transforms = if a.transforms.is_empty() {
                vec![
                    "rot90:1".to_string(),
                    "translate:0,1".into(),
                    "shift:1".into(),
                ]
            } else {
                a.transforms.clone()
            };
            let transforms = transforms
                .iter()
                .map(|t| InputTransform::parse(t))
                .collect::<Result<Vec<_>>>()?;
            for (li, b) in ck.model.blocks.iter().enumerate() {
                if b.spec.kind != LayerKind::Nptn {
                    continue;
                }
                let spec = b.spec.nptn(ck.model.arch.aggregate);
                let wts = NptnWeights::from_tensor(&spec, b.weight.cast::<f64>())?;
                for m in 0..spec.in_channels {
                    for n in 0..spec.out_channels {
                        for &t in &transforms {
                            let r = invariance_score(&wts, (m, n), t, a.trials, &mut rng)?;
                            rows.push(InvarianceRow::new(li, (m, n), &r));
                        }
                    }
                }
            }
            if rows.is_empty() {
                return Err(NptnError::Spec("the checkpoint has no NPTN layers".into()));
            }
        }
    }
    create_dir(&a.out_dir)?;
    let path = a.out_dir.join("invariance.csv");
    let f = fs::File::create(&path).map_err(|e| NptnError::Io {
        path: path.clone(),
        source: e,
    })?;
    write_invariance_csv(&rows, f)?;
    if a.checkpoint.is_none() {
        for r in &rows {
            println!(
                "{:<32} trials {:>5}  max deviation {:.3e}",
                r.transform, r.trials, r.max_deviation
            );
        }
    } else {
        println!("{} node probes written to {}", rows.len(), path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn run_named(a: PresetArgs) -> Result<ExitCode> {
    if a.list {
        for name in PRESET_NAMES {
            println!("{name}");
        }
        return Ok(ExitCode::SUCCESS);
    }
    let p = preset(a.preset.as_deref().expect("clap requires --preset"))?;
    let models = if a.models.is_empty() {
        p.models.clone()
    } else {
        a.models.clone()
    };
    let seeds = if a.seeds.is_empty() {
        p.seeds.clone()
    } else {
        a.seeds.clone()
    };
    let ov = overrides(&a.set, a.epochs)?;
    let data = DataPaths::new(&a.common.data_dir);
    let records = run_preset(
        &p,
        &models,
        &seeds,
        &ov,
        &data,
        &a.common.out_dir,
        |c, r| print_epoch(&c.model, c.train.seed, r),
    )?;
    let rows = summarize(&p, &records);
    write_summary_csv(&rows, a.common.out_dir.join(&p.name).join("summary.csv"))?;
    println!(
        "{:<20} {:>5} {:>14} {:>10}",
        "model", "seeds", "median error %", "reference"
    );
    for r in &rows {
        println!(
            "{:<20} {:>5} {:>14.2} {:>10}",
            r.model,
            r.seeds,
            r.median_test_error_pct,
            r.reference_test_error_pct
                .map(|e| format!("{e:.2}"))
                .unwrap_or_else(|| "-".into())
        );
    }
    Ok(ExitCode::SUCCESS)
}
