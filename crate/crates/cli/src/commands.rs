use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hyperflux::checkpoint::Archive;
use hyperflux::config::RunConfig;
use hyperflux::data::Dataset;
use hyperflux::export::{
    export_histogram, layer_sparsity, write_csv, write_flip_counts, write_flip_steps,
    write_histogram_csv, EpochCsv,
};
use hyperflux::flops::flops_account;
use hyperflux::powerlaw::{fit_report, segment_regions, write_labeled_csv};
use hyperflux::saliency::{
    iterative_prune, sweep_to_series, trace_to_series, Method, SaliencySeries,
};
use hyperflux::trainer::{EpochRecord, Phase, Trainer};
use hyperflux::{MaskedNet, TrainError};

use crate::{manifest, Cli, Command, StartNet};

pub fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path, &cli.overrides)?,
        None => RunConfig::from_toml("", &cli.overrides)?,
    };
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    manifest::write(&cli.out, cli.command.name(), &cfg)?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Pretrain { epochs } => pretrain(&cfg, out, epochs),
        Command::Train { start } => train(&cfg, out, &start),
        Command::ConstantGamma {
            gamma,
            epochs,
            start,
        } => constant_gamma(&cfg, out, gamma, epochs, &start),
        Command::Sweep {
            gammas,
            epochs,
            jobs,
            start,
        } => sweep(&cfg, out, gammas, epochs, jobs, &start),
        Command::Imp { start } => iterative(&cfg, out, Method::Magnitude, &start),
        Command::Taylor { start } => iterative(&cfg, out, Method::Taylor, &start),
        Command::Fit {
            input,
            eps_acc,
            dense_accuracy,
        } => fit(&cfg, out, &input, eps_acc, dense_accuracy),
        Command::Export {
            checkpoint,
            bins,
            trainer,
        } => export(&cfg, out, &checkpoint, bins, trainer.as_deref()),
    }
}

fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    cfg.data.generate().context("generating dataset")
}

fn fresh_net(cfg: &RunConfig, data: &Dataset) -> MaskedNet {
    cfg.init_net(data.features(), cfg.data.classes)
}

/// Loads `start.from`, or pretrains a fresh network for
/// `train.pretrain_epochs`.
fn start_net(cfg: &RunConfig, data: &Dataset, start: &StartNet) -> Result<MaskedNet> {
    if let Some(path) = &start.from {
        return MaskedNet::load(path).with_context(|| format!("loading {}", path.display()));
    }
    let (net, _) = hyperflux::trainer::pretrain(
        fresh_net(cfg, data),
        data,
        &cfg.train,
        cfg.train.pretrain_epochs,
    )?;
    Ok(net)
}

fn epoch_sink(path: &Path) -> Result<EpochCsv> {
    EpochCsv::create(path).with_context(|| format!("creating {}", path.display()))
}

fn push(sink: &mut EpochCsv, record: &EpochRecord) -> Result<(), TrainError> {
    sink.push(record)
        .map_err(|e| TrainError::Io(std::io::Error::other(e.to_string())))
}

fn create(path: &Path) -> Result<File> {
    File::create(path).with_context(|| format!("creating {}", path.display()))
}

fn save_net(net: &MaskedNet, path: &Path) -> Result<()> {
    net.save(path)
        .with_context(|| format!("writing {}", path.display()))
}

/// Prints and stores final density, accuracy and FLOPs ratios.
fn summarize(net: &MaskedNet, data: &Dataset, out: &Path) -> Result<()> {
    let accuracy = net.accuracy(&data.validation.inputs, &data.validation.labels)?;
    let flops = flops_account(net)?;
    let mut table = toml::Table::new();
    table.insert("density".into(), net.density().into());
    table.insert(
        "active_weights".into(),
        (net.active_weights() as i64).into(),
    );
    table.insert("total_weights".into(), (net.num_weights() as i64).into());
    table.insert("val_accuracy".into(), accuracy.into());
    table.insert("flops_dense".into(), (flops.dense as i64).into());
    table.insert("flops_sparse".into(), (flops.sparse as i64).into());
    table.insert("test_ratio".into(), flops.test_ratio.to_string().into());
    table.insert("train_ratio".into(), flops.train_ratio.to_string().into());
    table.insert(
        "fixed_mask_train_ratio".into(),
        flops.fixed_mask_train_ratio.to_string().into(),
    );
    let path = out.join("summary.toml");
    std::fs::write(&path, toml::to_string(&table)?)
        .with_context(|| format!("writing {}", path.display()))?;
    println!(
        "density {:.4} ({}/{}), val accuracy {:.4}, train cost {:.4} x dense",
        net.density(),
        net.active_weights(),
        net.num_weights(),
        accuracy,
        flops.train_ratio_f64()
    );
    Ok(())
}

fn pretrain(cfg: &RunConfig, out: &Path, epochs: Option<usize>) -> Result<()> {
    let data = dataset(cfg)?;
    let epochs = epochs.unwrap_or(cfg.train.pretrain_epochs);
    let mut trainer = Trainer::new(fresh_net(cfg, &data), cfg.train.clone())?;
    let records = trainer.run_frozen(&data, epochs, cfg.train.weights.lr_start, Phase::Pretrain)?;
    let mut sink = epoch_sink(&out.join("epochs.csv"))?;
    for r in &records {
        push(&mut sink, r)?;
    }
    save_net(&trainer.net, &out.join("net.ckpt"))?;
    summarize(&trainer.net, &data, out)
}

fn train(cfg: &RunConfig, out: &Path, start: &StartNet) -> Result<()> {
    let data = dataset(cfg)?;
    let net = start_net(cfg, &data, start)?;
    let mut trainer = Trainer::new(net, cfg.train.clone())?;
    let mut sink = epoch_sink(&out.join("epochs.csv"))?;
    trainer.run_training(&data, |r| push(&mut sink, r))?;
    save_net(&trainer.net, &out.join("net.ckpt"))?;
    let archive = out.join("trainer.ckpt");
    trainer
        .to_archive()
        .write(&archive)
        .with_context(|| format!("writing {}", archive.display()))?;
    write_flip_steps(&trainer.flip_log, create(&out.join("flip_steps.csv"))?)?;
    write_csv(
        &layer_sparsity(&trainer.net),
        create(&out.join("layers.csv"))?,
    )?;
    summarize(&trainer.net, &data, out)
}

fn constant_gamma(
    cfg: &RunConfig,
    out: &Path,
    gamma: f64,
    epochs: Option<usize>,
    start: &StartNet,
) -> Result<()> {
    let data = dataset(cfg)?;
    let net = start_net(cfg, &data, start)?;
    let mut trainer = Trainer::new(net, cfg.train.clone())?;
    let mut sink = epoch_sink(&out.join("epochs.csv"))?;
    let epochs = epochs.unwrap_or(cfg.sweep.epochs);
    trainer.run_constant_pressure(&data, gamma, epochs, |r| push(&mut sink, r))?;
    save_net(&trainer.net, &out.join("net.ckpt"))?;
    summarize(&trainer.net, &data, out)
}

fn gamma_dir(out: &Path, gamma: f64) -> PathBuf {
    out.join(format!("gamma-{gamma}"))
}

/// One constant-pressure trial writing only into its own directory.
fn sweep_trial(
    cfg: &RunConfig,
    data: &Dataset,
    net: &MaskedNet,
    gamma: f64,
    epochs: usize,
    dir: &Path,
) -> Result<Vec<EpochRecord>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut trainer = Trainer::new(net.clone(), cfg.train.clone())?;
    let mut sink = epoch_sink(&dir.join("epochs.csv"))?;
    let records = trainer
        .run_constant_pressure(data, gamma, epochs, |r| push(&mut sink, r))
        .with_context(|| format!("gamma {gamma}"))?;
    save_net(&trainer.net, &dir.join("net.ckpt"))?;
    Ok(records)
}

fn sweep(
    cfg: &RunConfig,
    out: &Path,
    gammas: Option<Vec<f64>>,
    epochs: Option<usize>,
    jobs: usize,
    start: &StartNet,
) -> Result<()> {
    let mut gammas = gammas.unwrap_or_else(|| cfg.sweep.gammas.clone());
    if gammas.is_empty() {
        bail!("no gamma values to sweep");
    }
    if let Some(g) = gammas.iter().find(|g| !(g.is_finite() && **g >= 0.0)) {
        bail!("gamma must be finite and non-negative, got {g}");
    }
    gammas.sort_by(f64::total_cmp);
    gammas.dedup();
    let epochs = epochs.unwrap_or(cfg.sweep.epochs);
    if epochs == 0 {
        bail!("sweep needs at least one epoch");
    }
    let data = dataset(cfg)?;
    let net = start_net(cfg, &data, start)?;
    save_net(&net, &out.join("start.ckpt"))?;

    let (data, net) = (&data, &net);
    let mut runs = Vec::with_capacity(gammas.len());
    for chunk in gammas.chunks(jobs.max(1)) {
        let results: Vec<Result<Vec<EpochRecord>>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&g| {
                    let dir = gamma_dir(out, g);
                    s.spawn(move || sweep_trial(cfg, data, net, g, epochs, &dir))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep trial panicked"))
                .collect()
        });
        for (&g, records) in chunk.iter().zip(results) {
            runs.push((g, records?));
        }
    }

    let series = sweep_to_series(&runs, &cfg.sweep.convergence);
    series.write_csv(create(&out.join("series.csv"))?)?;
    for (gamma, records) in &runs {
        let last = records.last().expect("epochs validated non-zero");
        let flag = if series.flagged.iter().any(|p| p.threshold == *gamma) {
            " (unconverged)"
        } else {
            ""
        };
        println!(
            "gamma {gamma}: density {:.4}, val accuracy {:.4}{flag}",
            last.density, last.val_accuracy
        );
    }
    Ok(())
}

fn iterative(cfg: &RunConfig, out: &Path, method: Method, start: &StartNet) -> Result<()> {
    let data = dataset(cfg)?;
    let net = start_net(cfg, &data, start)?;
    let (net, trace) = iterative_prune(net, &data, method, &cfg.iterative, &cfg.train)?;
    write_csv(&trace, create(&out.join("trace.csv"))?)?;
    trace_to_series(method, &trace).write_csv(create(&out.join("series.csv"))?)?;
    save_net(&net, &out.join("net.ckpt"))?;
    println!("{method}: {} prune steps", trace.len());
    summarize(&net, &data, out)
}

fn fit(
    cfg: &RunConfig,
    out: &Path,
    input: &Path,
    eps_acc: Option<f64>,
    dense_accuracy: Option<f64>,
) -> Result<()> {
    let file = File::open(input).with_context(|| format!("opening {}", input.display()))?;
    let series = SaliencySeries::read_csv(file)
        .with_context(|| format!("reading series {}", input.display()))?;
    if series.points.is_empty() {
        bail!("series {} has no points", input.display());
    }
    let mut seg_cfg = cfg.analysis;
    if let Some(eps) = eps_acc {
        seg_cfg.eps_acc = eps;
    }
    let reference = dense_accuracy.unwrap_or_else(|| {
        series
            .points
            .iter()
            .map(|p| p.accuracy)
            .fold(f64::NEG_INFINITY, f64::max)
    });
    let seg = segment_regions(&series, reference, &seg_cfg);
    let report = fit_report(&series, &seg);
    let path = out.join("report.toml");
    std::fs::write(&path, report.to_toml())
        .with_context(|| format!("writing {}", path.display()))?;
    write_labeled_csv(&report.labeled_points(), create(&out.join("labeled.csv"))?)?;

    println!("method: {}", report.method);
    println!("labels: {:?}", seg.labels);
    match seg.fit {
        Some(f) => {
            println!("alpha0 = {:.6}", f.alpha0);
            println!("r2 = {:.6}", f.r_squared);
            println!("c = {:.6e}", f.ln_c.exp());
        }
        None => println!("no power-law region found"),
    }
    Ok(())
}

fn export(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: &Path,
    bins: usize,
    trainer: Option<&Path>,
) -> Result<()> {
    if bins == 0 {
        bail!("--bins must be at least 1");
    }
    let net =
        MaskedNet::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    write_histogram_csv(
        &export_histogram(&net, bins),
        create(&out.join("histogram.csv"))?,
    )?;
    write_csv(&layer_sparsity(&net), create(&out.join("layers.csv"))?)?;
    if let Some(path) = trainer {
        let archive = Archive::read(path).with_context(|| format!("loading {}", path.display()))?;
        let state = Trainer::from_archive(&archive, cfg.train.clone())?;
        write_flip_counts(&state.net, &state.flip_log, create(&out.join("flips.csv"))?)?;
    }
    let flops = flops_account(&net)?;
    println!(
        "density {:.4}, flops dense {} sparse {}, test ratio {}, train ratio {}",
        net.density(),
        flops.dense,
        flops.sparse,
        flops.test_ratio,
        flops.train_ratio
    );
    Ok(())
}
