//! Subcommand implementations. Each stage function is shared between the
//! standalone subcommand (flags, manifest, printed summary) and the
//! `pipeline` orchestrator, which chains them in-process so a whole
//! experiment runs from one invocation.

use std::path::{Path, PathBuf};

use crate::eval::{
    evaluate_attack, fgsm_at_rmsd, representation_stats, rmsd, AttackReport, AttackScenario,
    BlackBox, PIXEL_SCALE,
};
use crate::fooling::{
    generate, high_freq_energy, load_fooling_image, save_fooling_image, FoolingImage,
    FoolingMethod,
};
use crate::ftn::{build_representation_bank, load_ftn, save_ftn, train_ftn, FtnModel, FtnReport};
use crate::oracle::{resolve_addr, serve, OracleClient};
use crate::tensor::Tensor;
use crate::victims::{
    load_classifier, load_dataset, save_classifier, save_dataset, synthetic_dataset,
    train_classifier, ArchitectureSpec, Classifier, Dataset, TrainReport,
};

use super::attackset::{load_attack_set, save_attack_set, AttackSet, AttackSetHeader};
use super::manifest::{guard_fresh, RunManifest};
use super::settings::{parse_methods, PipelineConfig};
use super::{
    AttackArgs, CliError, DatasetArgs, EvaluateArgs, GenFoolingArgs, PipelineArgs, ReportArgs,
    ServeOracleArgs, TrainFtnArgs, TrainVictimArgs,
};

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io {
        path: dir.display().to_string(),
        msg: e.to_string(),
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Mean per-image distortion between two batches, in 0..255 units.
fn batch_rmsd_255(adv: &Tensor, src: &Tensor) -> Result<f64, CliError> {
    Ok(rmsd(adv, src)? * PIXEL_SCALE)
}

// ---------------------------------------------------------------- dataset

pub fn run_dataset(args: &DatasetArgs) -> Result<(), CliError> {
    let mut cfg = args.common.resolve()?;
    if let Some(n) = args.per_class_train {
        cfg.dataset.per_class_train = n;
    }
    if let Some(n) = args.per_class_val {
        cfg.dataset.per_class_val = n;
    }

    let data = match &args.cifar_dir {
        Some(dir) => crate::victims::load_cifar10(
            dir,
            cfg.dataset.per_class_train * crate::victims::NUM_CLASSES,
            cfg.dataset.per_class_val * crate::victims::NUM_CLASSES,
        )?,
        None => synthetic_dataset(
            cfg.seed,
            cfg.dataset.per_class_train,
            cfg.dataset.per_class_val,
        ),
    };

    let out = &args.common.out;
    ensure_dir(out)?;
    let path = out.join("dataset.ffdat");
    guard_fresh(&path, args.common.force)?;
    save_dataset(&data, &path)?;

    let mut manifest = RunManifest::new("dataset", cfg.seed, cfg.to_table()?);
    manifest.stamp_output(&path)?;
    manifest.write(out)?;

    println!(
        "dataset: {} ({} train / {} val, {} classes, sha256 {})",
        path.display(),
        data.train.len(),
        data.val.len(),
        data.num_classes,
        &data.hash[..12],
    );
    Ok(())
}

// ----------------------------------------------------------- train-victim

/// Expands an `--arch` selector into concrete specs.
fn select_architectures(selector: &str) -> Result<Vec<ArchitectureSpec>, CliError> {
    let mut known = crate::victims::stock_architectures();
    known.push(crate::victims::oracle_architecture());
    match selector {
        "all" => Ok(known),
        "train" => Ok(vec![crate::victims::train_architecture()]),
        "validation" => Ok(crate::victims::validation_architectures()),
        "oracle" => Ok(vec![crate::victims::oracle_architecture()]),
        name => known
            .into_iter()
            .find(|s| s.name == name)
            .map(|s| vec![s])
            .ok_or_else(|| CliError::Config {
                msg: format!(
                    "unknown architecture {name:?}; expected all, train, validation, oracle \
                     or a stock name"
                ),
            }),
    }
}

fn train_report_csv(report: &TrainReport) -> String {
    let mut csv = String::from("epoch,mean_loss\n");
    for e in &report.epochs {
        csv.push_str(&format!("{},{}\n", e.epoch, e.mean_loss));
    }
    csv
}

/// Trains every spec on the dataset and checkpoints it under `out`.
fn train_zoo(
    cfg: &PipelineConfig,
    data: &Dataset,
    specs: &[ArchitectureSpec],
    out: &Path,
    force: bool,
) -> Result<Vec<(Classifier, TrainReport, PathBuf)>, CliError> {
    ensure_dir(out)?;
    let train_cfg = cfg.train_config();
    let mut zoo = Vec::with_capacity(specs.len());
    for spec in specs {
        let path = out.join(format!("{}.ffcls", spec.name));
        guard_fresh(&path, force)?;
        let (classifier, report) = train_classifier(spec, data, &train_cfg)?;
        save_classifier(&classifier, &path)?;
        write_text(
            &out.join(format!("train-{}.csv", spec.name)),
            &train_report_csv(&report),
        )?;
        println!(
            "trained {}: train_acc={:.4} val_acc={:.4} -> {}",
            spec.name,
            report.train_accuracy,
            report.val_accuracy,
            path.display()
        );
        zoo.push((classifier, report, path));
    }
    Ok(zoo)
}

pub fn run_train_victim(args: &TrainVictimArgs) -> Result<(), CliError> {
    let mut cfg = args.common.resolve()?;
    if let Some(n) = args.epochs {
        cfg.victims.epochs = n;
    }
    if let Some(n) = args.batch_size {
        cfg.victims.batch_size = n;
    }
    if let Some(lr) = args.learning_rate {
        cfg.victims.learning_rate = lr;
    }

    let data = load_dataset(&args.data)?;
    let specs = select_architectures(&args.arch)?;
    let out = &args.common.out;
    let zoo = train_zoo(&cfg, &data, &specs, out, args.common.force)?;

    let mut manifest = RunManifest::new("train-victim", cfg.seed, cfg.to_table()?);
    manifest.stamp_input(&args.data)?;
    for (_, _, path) in &zoo {
        manifest.stamp_output(path)?;
    }
    manifest.write(out)?;
    Ok(())
}

// ------------------------------------------------------------ gen-fooling

/// Stem of one generated image's file triple. The seed in the name is the
/// per-image seed, so a stem alone reproduces the run.
fn fooling_stem(method: FoolingMethod, seed: u64, index: usize) -> String {
    format!("{}-s{}-i{}", method, seed, index)
}

/// Generates `count` images per method and saves each triple under `out`.
fn generate_fooling(
    cfg: &PipelineConfig,
    victim: &Classifier,
    methods: &[FoolingMethod],
    out: &Path,
    png: bool,
) -> Result<Vec<(String, FoolingImage)>, CliError> {
    ensure_dir(out)?;
    let mut all = Vec::new();
    for &method in methods {
        for i in 0..cfg.fooling.count {
            let seed = cfg.seed.wrapping_add(i as u64);
            let gen_cfg = cfg.fooling_config(method, seed);
            let image = generate(victim, &gen_cfg)?;
            let stem = fooling_stem(method, seed, i);
            save_fooling_image(out, &stem, &image)?;
            if png {
                crate::fooling::export_png(&image.image, &out.join(format!("{stem}.png")))?;
            }
            println!("fooling {stem}: confidence={:.4}", image.confidence);
            all.push((stem, image));
        }
    }
    Ok(all)
}

pub fn run_gen_fooling(args: &GenFoolingArgs) -> Result<(), CliError> {
    let mut cfg = args.common.resolve()?;
    if let Some(n) = args.count {
        cfg.fooling.count = n;
    }
    if let Some(n) = args.steps {
        cfg.fooling.steps = n;
    }
    if let Some(t) = args.target {
        cfg.target = t;
    }
    cfg.fooling.methods = vec![args.methods.clone()];
    let methods = parse_methods(&args.methods)?;

    let victim = load_classifier(&args.victim)?;
    if cfg.target >= victim.class_names.len() {
        return Err(CliError::Config {
            msg: format!(
                "target {} out of range for {} classes",
                cfg.target,
                victim.class_names.len()
            ),
        });
    }
    let out = &args.common.out;
    let images = generate_fooling(&cfg, &victim, &methods, out, args.png)?;

    let mut manifest = RunManifest::new("gen-fooling", cfg.seed, cfg.to_table()?);
    manifest.stamp_input(&args.victim)?;
    for (stem, _) in &images {
        manifest.stamp_output(&out.join(format!("{stem}.fftn")))?;
    }
    manifest.write(out)?;
    Ok(())
}

// -------------------------------------------------------------- train-ftn

/// Sorted stems of saved fooling images for one method under `dir`.
fn fooling_stems(dir: &Path, method: FoolingMethod) -> Result<Vec<String>, CliError> {
    let prefix = format!("{method}-s");
    let mut stems = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Io {
        path: dir.display().to_string(),
        msg: e.to_string(),
    })?;
    for entry in entries {
        let entry = entry.map_err(|e| CliError::Io {
            path: dir.display().to_string(),
            msg: e.to_string(),
        })?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".toml") {
            if stem.starts_with(&prefix) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

fn load_fooling_set(
    dir: &Path,
    method: FoolingMethod,
    take: usize,
) -> Result<Vec<FoolingImage>, CliError> {
    let stems = fooling_stems(dir, method)?;
    if stems.len() < take {
        return Err(CliError::Config {
            msg: format!(
                "{} has {} {method} images, need {take}",
                dir.display(),
                stems.len()
            ),
        });
    }
    let mut images = Vec::with_capacity(take);
    for stem in stems.iter().take(take) {
        let image = load_fooling_image(dir, stem)?;
        if image.method != method {
            return Err(CliError::Config {
                msg: format!("{stem} claims method {} in its sidecar", image.method),
            });
        }
        images.push(image);
    }
    Ok(images)
}

/// Builds the bank from `images` and trains one transfer net.
fn train_transfer_net(
    cfg: &PipelineConfig,
    victim: &Classifier,
    data: &Dataset,
    images: &[FoolingImage],
    method: FoolingMethod,
    out: &Path,
    force: bool,
) -> Result<(FtnModel, FtnReport, PathBuf), CliError> {
    ensure_dir(out)?;
    let path = out.join(format!("ftn-{method}.ffnet"));
    guard_fresh(&path, force)?;
    let taps: Vec<&str> = cfg.ftn.taps.iter().map(String::as_str).collect();
    let bank = build_representation_bank(victim, images, &taps)?;
    let ftn_cfg = cfg.ftn_config();
    let (model, report) = train_ftn(&ftn_cfg, victim, bank, &data.train)?;
    save_ftn(&model, &path)?;

    let mut csv = Vec::new();
    report.write_csv(&mut csv).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let csv_path = out.join(format!("ftn-{method}-loss.csv"));
    write_text(&csv_path, &String::from_utf8_lossy(&csv))?;

    let (first, last) = match (report.steps.first(), report.steps.last()) {
        (Some(a), Some(b)) => (a.l_total, b.l_total),
        _ => (f64::NAN, f64::NAN),
    };
    println!(
        "ftn {method}: steps={} l_total {first:.4} -> {last:.4} -> {}",
        report.steps.len(),
        path.display()
    );
    Ok((model, report, path))
}

pub fn run_train_ftn(args: &TrainFtnArgs) -> Result<(), CliError> {
    let mut cfg = args.common.resolve()?;
    if let Some(n) = args.epochs {
        cfg.ftn.epochs = n;
    }
    if let Some(n) = args.n_samples {
        cfg.ftn.n_samples = n;
    }
    if let Some(g) = args.gamma {
        cfg.ftn.gamma = g;
    }
    if let Some(l) = args.lambda {
        cfg.ftn.lambda = l;
    }
    if let Some(taps) = &args.taps {
        cfg.ftn.taps = taps.split(',').map(|s| s.trim().to_string()).collect();
    }
    if cfg.ftn.n_samples > cfg.fooling.count {
        // `fooling.count` only gates the generator; lift it to the request.
        cfg.fooling.count = cfg.ftn.n_samples;
    }

    let method: FoolingMethod = args.method.parse().map_err(|e| CliError::Config {
        msg: format!("{e}"),
    })?;
    let victim = load_classifier(&args.victim)?;
    let data = load_dataset(&args.data)?;
    let images = load_fooling_set(&args.fooling_dir, method, cfg.ftn.n_samples)?;

    let out = &args.common.out;
    let (_, _, path) =
        train_transfer_net(&cfg, &victim, &data, &images, method, out, args.common.force)?;

    let mut manifest = RunManifest::new("train-ftn", cfg.seed, cfg.to_table()?);
    manifest.stamp_input(&args.victim)?;
    manifest.stamp_input(&args.data)?;
    manifest.stamp_output(&path)?;
    manifest.write(out)?;
    Ok(())
}

// ----------------------------------------------------------------- attack

/// Maps the first `count` validation images through the net.
fn ftn_attack_set(
    model: &FtnModel,
    data: &Dataset,
    count: usize,
    tag: &str,
    seed: u64,
) -> Result<AttackSet, CliError> {
    let available = data.val.len();
    let count = count.min(available);
    if count == 0 {
        return Err(CliError::Config {
            msg: "validation split is empty".into(),
        });
    }
    let indices: Vec<usize> = (0..count).collect();
    let (sources, _) = data.val.batch(&indices);
    let adversarial = model.forward(&sources)?;
    Ok(AttackSet {
        header: AttackSetHeader {
            tag: tag.to_string(),
            target: model.bank.target,
            seed,
        },
        adversarial,
        sources,
    })
}

pub fn run_attack(args: &AttackArgs) -> Result<(), CliError> {
    let mut cfg = args.common.resolve()?;
    if let Some(n) = args.count {
        cfg.eval.attack_count = n;
    }

    let model = load_ftn(&args.ftn)?;
    let data = load_dataset(&args.data)?;
    let tag = match &args.tag {
        Some(t) => t.clone(),
        None => {
            let stem = file_stem(&args.ftn);
            match stem.strip_prefix("ftn-") {
                Some(rest) => format!("ftn_{rest}"),
                None => stem,
            }
        }
    };

    let set = ftn_attack_set(&model, &data, cfg.eval.attack_count, &tag, cfg.seed)?;
    let out = &args.common.out;
    ensure_dir(out)?;
    let path = out.join(format!("attack-{tag}.ffatk"));
    guard_fresh(&path, args.common.force)?;
    save_attack_set(&set, &path)?;

    let n = set.adversarial.shape()[0];
    println!(
        "attack {tag}: {n} images rmsd={:.3} -> {}",
        batch_rmsd_255(&set.adversarial, &set.sources)?,
        path.display()
    );

    let mut manifest = RunManifest::new("attack", cfg.seed, cfg.to_table()?);
    manifest.stamp_input(&args.ftn)?;
    manifest.stamp_input(&args.data)?;
    manifest.stamp_output(&path)?;
    manifest.write(out)?;
    Ok(())
}

// ----------------------------------------------------------- serve-oracle

pub fn run_serve_oracle(args: &ServeOracleArgs) -> Result<(), CliError> {
    let classifier = load_classifier(&args.victim)?;
    let addr = resolve_addr(args.addr.as_deref());
    let server = serve(classifier, &addr)?;
    println!("oracle listening on {}", server.addr());

    if let Some(path) = &args.ready_file {
        write_text(path, &server.addr().to_string())?;
    }

    // Without a request cap the server runs until the process is killed.
    loop {
        std::thread::sleep(std::time::Duration::from_millis(50));
        if let Some(max) = args.max_requests {
            if server.stats().requests >= max {
                break;
            }
        }
    }
    let stats = server.shutdown();
    println!(
        "served {} requests (mean {:.2} ms, max {:.2} ms)",
        stats.requests, stats.mean_latency_ms, stats.max_latency_ms
    );
    Ok(())
}

// --------------------------------------------------------------- evaluate

fn evaluate_set(
    set: &AttackSet,
    victims: &[&Classifier],
    oracle: Option<&dyn BlackBox>,
) -> Result<AttackReport, CliError> {
    let scenario = AttackScenario {
        method: &set.header.tag,
        adversarial: &set.adversarial,
        sources: &set.sources,
        target: set.header.target,
        seed: set.header.seed,
    };
    Ok(evaluate_attack(&scenario, victims, oracle)?)
}

fn print_report(report: &AttackReport) {
    for row in &report.rows {
        let rtd = row
            .rtd
            .map(|v| format!("{v:.2}"))
            .unwrap_or_else(|| "na".into());
        println!(
            "  {} vs {}: rate={:.4} rmsd={:.3} rtd={rtd}",
            row.method, row.victim, row.transfer_rate, row.rmsd
        );
    }
}

fn collect_victim_paths(args: &EvaluateArgs) -> Result<Vec<PathBuf>, CliError> {
    let mut paths = args.victims.clone();
    if let Some(dir) = &args.victims_dir {
        let entries = std::fs::read_dir(dir).map_err(|e| CliError::Io {
            path: dir.display().to_string(),
            msg: e.to_string(),
        })?;
        let mut found = Vec::new();
        for entry in entries {
            let path = entry
                .map_err(|e| CliError::Io {
                    path: dir.display().to_string(),
                    msg: e.to_string(),
                })?
                .path();
            if path.extension().is_some_and(|e| e == "ffcls") {
                found.push(path);
            }
        }
        found.sort();
        paths.extend(found);
    }
    if paths.is_empty() && args.oracle_addr.is_none() {
        return Err(CliError::Config {
            msg: "no victims given; pass --victims, --victims-dir or --oracle-addr".into(),
        });
    }
    Ok(paths)
}

pub fn run_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let cfg = args.common.resolve()?;
    let set = load_attack_set(&args.attack)?;
    let victim_paths = collect_victim_paths(args)?;
    let mut victims = Vec::with_capacity(victim_paths.len());
    for path in &victim_paths {
        victims.push(load_classifier(path)?);
    }
    let refs: Vec<&Classifier> = victims.iter().collect();

    let client = match &args.oracle_addr {
        Some(flag) => {
            let addr = resolve_addr(Some(flag));
            let mut c = OracleClient::new(&addr)?;
            if let Some(first) = victims.first() {
                c = c.with_class_names(first.class_names.clone());
            }
            Some(c)
        }
        None => None,
    };
    let oracle: Option<&dyn BlackBox> = client.as_ref().map(|c| c as &dyn BlackBox);

    let report = evaluate_set(&set, &refs, oracle)?;
    let out = &args.common.out;
    ensure_dir(out)?;
    let path = out.join(format!("report-{}.csv", set.header.tag));
    guard_fresh(&path, args.common.force)?;
    write_text(&path, &report.to_csv_string())?;

    println!("evaluate {}:", set.header.tag);
    print_report(&report);
    println!("report -> {}", path.display());

    let mut manifest = RunManifest::new("evaluate", cfg.seed, cfg.to_table()?);
    manifest.stamp_input(&args.attack)?;
    for p in &victim_paths {
        manifest.stamp_input(p)?;
    }
    manifest.stamp_output(&path)?;
    manifest.write(out)?;
    Ok(())
}

// ----------------------------------------------------------------- report

/// Extracts one plot-ready two-column CSV from a wider one.
fn two_columns(
    text: &str,
    keep: [&str; 2],
    source: &Path,
) -> Result<String, CliError> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let names: Vec<&str> = header.split(',').collect();
    let mut idx = [0usize; 2];
    for (slot, want) in idx.iter_mut().zip(keep) {
        *slot = names
            .iter()
            .position(|n| *n == want)
            .ok_or_else(|| CliError::Config {
                msg: format!("{}: no column {want:?} in {header:?}", source.display()),
            })?;
    }
    let mut out = format!("{},{}\n", keep[0], keep[1]);
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != names.len() {
            return Err(CliError::Config {
                msg: format!(
                    "{}: line {} has {} fields, expected {}",
                    source.display(),
                    lineno + 2,
                    fields.len(),
                    names.len()
                ),
            });
        }
        out.push_str(&format!("{},{}\n", fields[idx[0]], fields[idx[1]]));
    }
    Ok(out)
}

pub fn run_report(args: &ReportArgs) -> Result<(), CliError> {
    if args.format != "csv" {
        return Err(CliError::Config {
            msg: format!("unknown report format {:?}; only csv is supported", args.format),
        });
    }
    let out = &args.common.out;
    ensure_dir(out)?;

    if !args.reports.is_empty() {
        let mut merged = AttackReport { rows: Vec::new() };
        for path in &args.reports {
            let part = AttackReport::parse_csv(&read_text(path)?)?;
            merged.rows.extend(part.rows);
        }
        let path = out.join("report.csv");
        guard_fresh(&path, args.common.force)?;
        write_text(&path, &merged.to_csv_string())?;
        println!("merged {} rows -> {}", merged.rows.len(), path.display());
    }

    if let Some(dir) = &args.fooling_dir {
        // Spectrum table over every stored fooling image, sorted by stem.
        let mut stems = Vec::new();
        for method in FoolingMethod::ALL {
            stems.extend(fooling_stems(dir, method)?);
        }
        stems.sort();
        if stems.is_empty() {
            return Err(CliError::Config {
                msg: format!("{} holds no fooling images", dir.display()),
            });
        }
        let mut spectrum = String::from("image,high_freq_energy\n");
        for stem in &stems {
            let image = load_fooling_image(dir, stem)?;
            let energy = high_freq_energy(&image.image)?;
            spectrum.push_str(&format!("{stem},{energy}\n"));
        }
        let path = out.join("plot-spectrum.csv");
        guard_fresh(&path, args.common.force)?;
        write_text(&path, &spectrum)?;
        println!("plot -> {}", path.display());

        // Per-image confidence traces for the convergence figure.
        for stem in &stems {
            let trace_path = dir.join(format!("{stem}.trace.csv"));
            let csv = two_columns(&read_text(&trace_path)?, ["step", "confidence"], &trace_path)?;
            let path = out.join(format!("plot-confidence-{stem}.csv"));
            guard_fresh(&path, args.common.force)?;
            write_text(&path, &csv)?;
            println!("plot -> {}", path.display());
        }
    }

    for loss_path in &args.ftn_losses {
        let csv = two_columns(&read_text(loss_path)?, ["step", "l_total"], loss_path)?;
        let path = out.join(format!("plot-{}.csv", file_stem(loss_path)));
        guard_fresh(&path, args.common.force)?;
        write_text(&path, &csv)?;
        println!("plot -> {}", path.display());
    }
    Ok(())
}

// --------------------------------------------------------------- pipeline

/// Runs the whole experiment: corpus, victim zoo, fooling images, transfer
/// nets, matched baseline, evaluation tables and the separation score.
/// Report CSVs depend only on the resolved config, so two runs with the
/// same seed produce byte-identical tables.
pub fn run_pipeline(args: &PipelineArgs) -> Result<(), CliError> {
    let mut cfg = args.common.resolve()?;
    if args.no_oracle {
        cfg.eval.with_oracle = false;
    }
    let methods = cfg.fooling_methods()?;
    if cfg.ftn.n_samples > cfg.fooling.count {
        return Err(CliError::Config {
            msg: format!(
                "ftn.n_samples {} exceeds fooling.count {}",
                cfg.ftn.n_samples, cfg.fooling.count
            ),
        });
    }

    let out = &args.common.out;
    let force = args.common.force;
    let dirs = [
        out.join("data"),
        out.join("models"),
        out.join("fooling"),
        out.join("ftn"),
        out.join("attack"),
        out.join("reports"),
    ];
    for d in &dirs {
        ensure_dir(d)?;
    }
    let [data_dir, models_dir, fooling_dir, ftn_dir, attack_dir, reports_dir] = &dirs;

    println!("[1/7] dataset");
    let data = synthetic_dataset(
        cfg.seed,
        cfg.dataset.per_class_train,
        cfg.dataset.per_class_val,
    );
    let dataset_path = data_dir.join("dataset.ffdat");
    guard_fresh(&dataset_path, force)?;
    save_dataset(&data, &dataset_path)?;

    println!("[2/7] victim zoo");
    let mut specs = crate::victims::stock_architectures();
    if cfg.eval.with_oracle {
        specs.push(crate::victims::oracle_architecture());
    }
    let zoo = train_zoo(&cfg, &data, &specs, models_dir, force)?;
    let train_victim = &zoo[0].0;
    let validation: Vec<&Classifier> = zoo
        .iter()
        .skip(1)
        .take(crate::victims::validation_architectures().len())
        .map(|(c, _, _)| c)
        .collect();
    let oracle_victim = cfg.eval.with_oracle.then(|| &zoo[zoo.len() - 1].0);

    println!("[3/7] fooling images");
    let generated = generate_fooling(&cfg, train_victim, &methods, fooling_dir, false)?;

    // The oracle stays up for both evaluation tables.
    let server = match oracle_victim {
        Some(victim) => Some(serve((*victim).clone(), "127.0.0.1:0")?),
        None => None,
    };
    let client = match &server {
        Some(s) => Some(
            OracleClient::new(&s.endpoint())?.with_class_names(data.class_names.clone()),
        ),
        None => None,
    };
    let oracle: Option<&dyn BlackBox> = client.as_ref().map(|c| c as &dyn BlackBox);

    println!("[4/7] universality of the fooling images");
    let mut table1 = AttackReport { rows: Vec::new() };
    for &method in &methods {
        let images: Vec<&FoolingImage> = generated
            .iter()
            .filter(|(_, img)| img.method == method)
            .map(|(_, img)| img)
            .collect();
        let mut flat = Vec::new();
        for img in &images {
            flat.extend_from_slice(img.image.data());
        }
        let s = images[0].image.shape();
        let batch = Tensor::new(&[images.len(), s[0], s[1], s[2]], flat)?;
        let set = AttackSet {
            header: AttackSetHeader {
                tag: method.to_string(),
                target: cfg.target,
                seed: cfg.seed,
            },
            adversarial: batch.clone(),
            sources: batch,
        };
        let report = evaluate_set(&set, &validation, oracle)?;
        table1.rows.extend(report.rows);
    }
    let table1_path = reports_dir.join("table1.csv");
    guard_fresh(&table1_path, force)?;
    write_text(&table1_path, &table1.to_csv_string())?;
    print_report(&table1);

    println!("[5/7] transfer nets");
    let mut attack_sets = Vec::new();
    for &method in &methods {
        let images = load_fooling_set(fooling_dir, method, cfg.ftn.n_samples)?;
        let (model, _, _) =
            train_transfer_net(&cfg, train_victim, &data, &images, method, ftn_dir, force)?;
        let tag = format!("ftn_{method}");
        let set = ftn_attack_set(&model, &data, cfg.eval.attack_count, &tag, cfg.seed)?;
        let path = attack_dir.join(format!("attack-{tag}.ffatk"));
        guard_fresh(&path, force)?;
        save_attack_set(&set, &path)?;
        attack_sets.push(set);
    }

    println!("[6/7] matched baseline and attack tables");
    // Match the baseline's distortion to the strongest bank's output.
    let reference = attack_sets
        .iter()
        .find(|s| s.header.tag == "ftn_cppn_grad")
        .unwrap_or(&attack_sets[0]);
    let reference_rmsd = rmsd(&reference.adversarial, &reference.sources)?;
    if reference_rmsd > 0.0 {
        let calibration = fgsm_at_rmsd(
            train_victim,
            &reference.sources,
            cfg.target,
            cfg.eval.fgsm_steps,
            reference_rmsd,
            0.05,
            16,
        )?;
        let set = AttackSet {
            header: AttackSetHeader {
                tag: "fgsm".into(),
                target: cfg.target,
                seed: cfg.seed,
            },
            adversarial: calibration.adversarial.clone(),
            sources: reference.sources.clone(),
        };
        let path = attack_dir.join("attack-fgsm.ffatk");
        guard_fresh(&path, force)?;
        save_attack_set(&set, &path)?;
        attack_sets.push(set);
    }
    let mut table3 = AttackReport { rows: Vec::new() };
    for set in &attack_sets {
        let report = evaluate_set(set, &validation, oracle)?;
        table3.rows.extend(report.rows);
    }
    let table3_path = reports_dir.join("table3.csv");
    guard_fresh(&table3_path, force)?;
    write_text(&table3_path, &table3.to_csv_string())?;
    print_report(&table3);

    println!("[7/7] representation separation");
    let naive: Vec<Tensor> = generated
        .iter()
        .filter(|(_, img)| !img.method.is_low_frequency())
        .map(|(_, img)| img.image.clone())
        .collect();
    let low_freq: Vec<Tensor> = generated
        .iter()
        .filter(|(_, img)| img.method.is_low_frequency())
        .map(|(_, img)| img.image.clone())
        .collect();
    let mut separation = String::from("tap,separation\n");
    if !naive.is_empty() && !low_freq.is_empty() {
        let groups = vec![
            ("naive".to_string(), naive),
            ("low_freq".to_string(), low_freq),
        ];
        for tap in &cfg.ftn.taps {
            let (_, score) = representation_stats(train_victim, &groups, tap)?;
            separation.push_str(&format!("{tap},{score}\n"));
            println!("  separation at {tap}: {score:.3}");
        }
    }
    let separation_path = reports_dir.join("separation.csv");
    guard_fresh(&separation_path, force)?;
    write_text(&separation_path, &separation)?;

    if let Some(s) = server {
        let stats = s.shutdown();
        println!(
            "oracle served {} requests (mean {:.2} ms)",
            stats.requests, stats.mean_latency_ms
        );
    }

    let mut manifest = RunManifest::new("pipeline", cfg.seed, cfg.to_table()?);
    manifest.stamp_output(&dataset_path)?;
    for (_, _, path) in &zoo {
        manifest.stamp_output(path)?;
    }
    manifest.stamp_output(&table1_path)?;
    manifest.stamp_output(&table3_path)?;
    manifest.stamp_output(&separation_path)?;
    manifest.write(out)?;

    println!(
        "pipeline done: {} and {}",
        table1_path.display(),
        table3_path.display()
    );
    Ok(())
}
