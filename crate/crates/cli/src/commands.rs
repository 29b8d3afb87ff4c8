//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hsvseg::datamodel::{split_counts, DatasetManifest, ModalityName, Split};
use hsvseg::experiments::{self, ExperimentConfig, OutputLock, RunRecord, MANIFESTS_DIR};
use hsvseg::inference::{self, FrameOptions, Prompting};
use hsvseg::models::{checkpoint, load_segmenter, PromptableConfig, SegmenterOptions, UnetConfig};
use hsvseg::patching::{DEFAULT_BOX_JITTER, DEFAULT_CELL_SIZE, DEFAULT_PATCH_RES};
use hsvseg::preprocess::{preprocess_frame, ReferenceFrame};
use hsvseg::synth::{self, DatasetSpec, PresetName, MANIFEST_FILE};
use hsvseg::training::{self, SchedulerConfig, TrainConfig, TrainOutput};
use hsvseg::{imageio, Backend, Segmenter};

use crate::config::{invalid, ConfigFile};
use crate::{
    Command, EvalArgs, ExperimentArgs, GridArgs, InferArgs, InitFoundationArgs, ModelArgs, OutArg,
    PrepareArgs, ProposalArgs, ReportArgs, SynthArgs, TrainArgs, TrainCmdArgs,
};

const DEFAULT_OUT: &str = "out";

pub fn run(command: Command, cfg: &ConfigFile, dry_run: bool) -> Result<()> {
    match command {
        Command::Prepare(a) => prepare(a, cfg, dry_run),
        Command::Synth(a) => synth(a, cfg, dry_run),
        Command::Train(a) => train(a, cfg, dry_run),
        Command::Infer(a) => infer(a, cfg, dry_run),
        Command::Eval(a) => eval(a, cfg, dry_run),
        Command::Experiment(a) => experiment(a, cfg, dry_run),
        Command::Report(a) => report(a, cfg, dry_run),
        Command::InitFoundation(a) => init_foundation(a, cfg, dry_run),
    }
}

fn out_dir(arg: OutArg, cfg: &ConfigFile) -> Result<PathBuf> {
    cfg.pick(arg.out, "out", PathBuf::from(DEFAULT_OUT))
}

fn manifest_path(flag: Option<PathBuf>, cfg: &ConfigFile, out: &Path) -> Result<PathBuf> {
    cfg.pick(
        flag,
        "manifest",
        out.join(MANIFESTS_DIR).join(MANIFEST_FILE),
    )
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(invalid(format!("{what} {} does not exist", path.display())))
    }
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    require_file(path, "manifest")?;
    let manifest = DatasetManifest::load(path)?;
    let report = manifest.validate();
    if !report.is_valid() {
        let first: Vec<String> = report
            .violations
            .iter()
            .take(5)
            .map(|v| format!("{v:?}"))
            .collect();
        return Err(invalid(format!(
            "manifest {} has {} problem(s): {}",
            path.display(),
            report.violations.len(),
            first.join("; ")
        )));
    }
    Ok(manifest)
}

fn train_config(
    a: &TrainArgs,
    cfg: &ConfigFile,
    seed: u64,
    default_lr: f64,
) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let s = SchedulerConfig::default();
    let config = TrainConfig {
        learning_rate: cfg.pick(a.lr, "lr", default_lr)?,
        weight_decay: cfg.pick(a.weight_decay, "weight-decay", d.weight_decay)?,
        batch_size: cfg.pick(a.batch_size, "batch-size", d.batch_size)?,
        epochs: cfg.pick(a.epochs, "epochs", d.epochs)?,
        clip_max_norm: cfg.pick(a.clip_max_norm, "clip-max-norm", d.clip_max_norm)?,
        scheduler: SchedulerConfig {
            factor: cfg.pick(a.lr_factor, "lr-factor", s.factor)?,
            patience: cfg.pick(a.patience, "patience", s.patience)?,
            min_lr: cfg.pick(a.min_lr, "min-lr", s.min_lr)?,
        },
        mixed_precision: cfg.pick(a.mixed_precision, "mixed-precision", d.mixed_precision)?,
        seed,
        dice_epsilon: d.dice_epsilon,
    };
    config.validate()?;
    Ok(config)
}

fn grid(a: &GridArgs, cfg: &ConfigFile) -> Result<(usize, usize)> {
    let cell = cfg.pick(a.cell_size, "cell-size", DEFAULT_CELL_SIZE)?;
    if cell == 0 {
        return Err(invalid("--cell-size must be positive"));
    }
    Ok((
        cell,
        cfg.pick(a.box_jitter, "box-jitter", DEFAULT_BOX_JITTER)?,
    ))
}

fn unet_config(depth: Option<usize>, width: Option<usize>, cfg: &ConfigFile) -> Result<UnetConfig> {
    let d = UnetConfig::default();
    Ok(UnetConfig {
        depth: cfg.pick(depth, "unet-depth", d.depth)?,
        base_width: cfg.pick(width, "unet-width", d.base_width)?,
    })
}

/// Loads or initialises the segmenter described by `a`.
fn segmenter(a: &ModelArgs, cfg: &ConfigFile, seed: u64) -> Result<Segmenter> {
    let backend = cfg.pick(a.backend, "backend", Backend::Foundation)?;
    let mut reference = cfg.pick_opt(a.checkpoint.clone(), "checkpoint")?;
    if backend == Backend::Foundation && reference.is_none() {
        reference = Some(checkpoint::DEFAULT_FOUNDATION_REF.to_string());
    }
    let options = SegmenterOptions {
        patch_resolution: cfg.pick(a.patch_resolution, "patch-resolution", DEFAULT_PATCH_RES)?,
        unet: unet_config(a.unet_depth, a.unet_width, cfg)?,
        seed,
        ..SegmenterOptions::default()
    };
    load_segmenter(backend, reference.as_deref(), &options)
        .with_context(|| format!("preparing the {backend} backend"))
}

fn proposal(a: &ProposalArgs, cfg: &ConfigFile, main: &Segmenter) -> Result<Option<Segmenter>> {
    let Some(backend) = cfg.pick_opt(a.proposal_backend, "proposal-backend")? else {
        return Ok(None);
    };
    if backend != Backend::Unet {
        return Err(invalid(format!(
            "--proposal-backend must be unet, got {backend}"
        )));
    }
    if !inference::supports_proposals(main.backend()) {
        return Err(invalid(format!(
            "proposal prompting needs the foundation backend, not {}",
            main.backend()
        )));
    }
    let reference = cfg.pick_opt(a.proposal_checkpoint.clone(), "proposal-checkpoint")?;
    let Some(reference) = reference else {
        return Err(invalid(
            "--proposal-backend unet needs --proposal-checkpoint",
        ));
    };
    let options = SegmenterOptions {
        patch_resolution: main.patch_resolution(),
        ..SegmenterOptions::default()
    };
    Ok(Some(load_segmenter(
        Backend::Unet,
        Some(&reference),
        &options,
    )?))
}

fn frame_options<'a>(cell_size: usize, proposer: Option<&'a Segmenter>) -> FrameOptions<'a> {
    FrameOptions {
        cell_size,
        prompting: proposer.map_or(Prompting::Grid, Prompting::Proposal),
    }
}

fn prepare(a: PrepareArgs, cfg: &ConfigFile, dry_run: bool) -> Result<()> {
    let raw = cfg.require(a.raw, "raw")?;
    let out = out_dir(a.out, cfg)?;
    let seed = cfg.pick(a.split_seed, "split-seed", 0u64)?;
    let manifest_out = out.join(MANIFESTS_DIR).join(MANIFEST_FILE);
    if dry_run {
        for group in experiments::scan_raw(&raw)? {
            let (train, val, test) = split_counts(group.pairs.len());
            println!(
                "{}: {} frame(s) -> train {train}, val {val}, test {test}; {} excluded",
                group.modality,
                group.pairs.len(),
                group.excluded.len()
            );
            for e in &group.excluded {
                println!("  exclude {}: {}", e.path.display(), e.reason);
            }
        }
        println!("would write {}", manifest_out.display());
        return Ok(());
    }
    let _lock = OutputLock::acquire(&out)?;
    let prepared = experiments::prepare(&raw, &manifest_out, seed)?;
    for m in prepared.manifest.modalities() {
        let n = |s| prepared.manifest.select(s, Some(m)).len();
        println!(
            "{m}: train {}, val {}, test {}",
            n(Split::Train),
            n(Split::Val),
            n(Split::Test)
        );
    }
    if !prepared.excluded.is_empty() {
        let report = out.join(MANIFESTS_DIR).join("excluded.txt");
        let text: String = prepared
            .excluded
            .iter()
            .map(|e| format!("{}\t{}\n", e.path.display(), e.reason))
            .collect();
        fs::write(&report, &text).with_context(|| format!("writing {}", report.display()))?;
        eprintln!(
            "{} frame(s) excluded, listed in {}",
            prepared.excluded.len(),
            report.display()
        );
    }
    println!("manifest: {}", prepared.manifest_path.display());
    Ok(())
}

fn synth(a: SynthArgs, cfg: &ConfigFile, dry_run: bool) -> Result<()> {
    let out = out_dir(a.out, cfg)?;
    let mut layout = DatasetSpec::new(
        cfg.pick(a.seed, "seed", 42u64)?,
        cfg.pick(a.frames_per_modality, "frames-per-modality", 10usize)?,
        cfg.pick(a.height, "height", 256usize)?,
        cfg.pick(a.width, "width", 256usize)?,
    );
    let mut overrides = BTreeMap::new();
    for item in &a.preset {
        let (fluid, name) = item
            .split_once('=')
            .ok_or_else(|| invalid(format!("--preset expects FLUID=PRESET, got `{item}`")))?;
        let fluid: ModalityName = fluid
            .parse()
            .map_err(|e: hsvseg::Error| invalid(e.to_string()))?;
        let name: PresetName = name
            .parse()
            .map_err(|e: hsvseg::Error| invalid(e.to_string()))?;
        overrides.insert(fluid, name);
    }
    let noise = cfg.pick_opt(a.noise, "noise")?;
    for (fluid, preset) in layout.presets.iter_mut() {
        if let Some(name) = overrides.get(fluid) {
            *preset = name.preset();
        }
        if let Some(sigma) = noise {
            *preset = preset.with_noise(sigma);
        }
        preset.validate()?;
    }
    if layout.height < synth::MIN_FRAME_SIDE || layout.width < synth::MIN_FRAME_SIDE {
        return Err(invalid(format!(
            "frames must be at least {0}x{0}",
            synth::MIN_FRAME_SIDE
        )));
    }
    let dir = out.join(MANIFESTS_DIR);
    if dry_run {
        for (fluid, preset) in &layout.presets {
            println!(
                "{fluid}: {} frame(s) of {}x{}, preset {}, noise {}",
                layout.frames_per_modality,
                layout.height,
                layout.width,
                preset.name,
                preset.noise_sigma
            );
        }
        println!("would write {}", dir.join(MANIFEST_FILE).display());
        return Ok(());
    }
    let _lock = OutputLock::acquire(&out)?;
    let manifest = synth::generate_dataset(&layout, &dir)?;
    println!(
        "{} frame(s) -> {}",
        manifest.entries.len(),
        dir.join(MANIFEST_FILE).display()
    );
    Ok(())
}

fn train(a: TrainCmdArgs, cfg: &ConfigFile, dry_run: bool) -> Result<()> {
    let out = out_dir(a.out, cfg)?;
    let manifest_path = manifest_path(a.manifest, cfg, &out)?;
    let manifest = load_manifest(&manifest_path)?;
    let seed = cfg.pick(a.seed, "seed", 0u64)?;
    let backend = cfg.pick(a.model.backend, "backend", Backend::Foundation)?;
    if !backend.is_learned() {
        return Err(invalid(format!(
            "the {backend} backend has nothing to train"
        )));
    }
    let default_lr = if backend == Backend::Unet {
        1e-3
    } else {
        TrainConfig::default().learning_rate
    };
    let config = train_config(&a.train, cfg, seed, default_lr)?;
    let (cell, jitter) = grid(&a.grid, cfg)?;
    let mut model = segmenter(&a.model, cfg, seed)?;
    let modalities: Vec<ModalityName> = if a.modality.is_empty() {
        manifest.modalities().into_iter().collect()
    } else {
        a.modality
    };
    let dir = out
        .join(experiments::CHECKPOINTS_DIR)
        .join(backend.as_str());
    for &m in &modalities {
        if manifest.select(Split::Train, Some(m)).is_empty()
            || manifest.select(Split::Val, Some(m)).is_empty()
        {
            return Err(invalid(format!(
                "{m} has no train or no val frames in {}",
                manifest_path.display()
            )));
        }
    }
    if dry_run {
        let frames = |s| {
            modalities
                .iter()
                .map(|&m| manifest.select(s, Some(m)).len())
                .sum::<usize>()
        };
        println!(
            "train {backend} at {}px on {} train / {} val frame(s) of {:?}",
            model.patch_resolution(),
            frames(Split::Train),
            frames(Split::Val),
            modalities
        );
        println!(
            "{} epoch(s), lr {}, batch {}; outputs in {}",
            config.epochs,
            config.learning_rate,
            config.batch_size,
            dir.display()
        );
        return Ok(());
    }
    let _lock = OutputLock::acquire(&out)?;
    let res = model.patch_resolution();
    let collect = |split| {
        experiments::collect_samples(&manifest, split, &modalities, cell, res, jitter, seed)
    };
    let (train_set, val_set) = (collect(Split::Train)?, collect(Split::Val)?);
    eprintln!(
        "{} training and {} validation patch(es)",
        train_set.len(),
        val_set.len()
    );
    let logs = training::train(
        &mut model,
        &train_set,
        &val_set,
        &config,
        &TrainOutput::in_dir(&dir),
    )?;
    for l in &logs {
        println!(
            "epoch {:>3}  train {:.4}  val {:.4}  iou {:.4}  lr {:.2e}",
            l.epoch, l.train_loss, l.val_loss, l.val_iou, l.lr
        );
    }
    let path = dir.join(training::CHECKPOINT_FILE);
    model.save(&path)?;
    println!("final weights: {}", path.display());
    Ok(())
}

fn input_frames(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(invalid(format!("input {} does not exist", input.display())));
    }
    let mut frames: Vec<PathBuf> = fs::read_dir(input)
        .with_context(|| format!("listing {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "tif" | "tiff"))
        })
        .collect();
    frames.sort();
    if frames.is_empty() {
        return Err(invalid(format!(
            "no PNG or TIFF frames in {}",
            input.display()
        )));
    }
    Ok(frames)
}

fn infer(a: InferArgs, cfg: &ConfigFile, dry_run: bool) -> Result<()> {
    let out = out_dir(a.out, cfg)?;
    let frames = input_frames(&a.input)?;
    let (cell, _) = grid(&a.grid, cfg)?;
    let model = segmenter(&a.model, cfg, 0)?;
    let proposer = proposal(&a.proposal, cfg, &model)?;
    let reference = a
        .reference
        .as_ref()
        .map(|p| imageio::read_frame(p).map(|f| ReferenceFrame::new(f.into_pixels(), None)))
        .transpose()?;
    let dir = out.join(experiments::EVAL_DIR).join("masks");
    if dry_run {
        println!(
            "segment {} frame(s) with {} ({}), cell {cell}px; masks to {}",
            frames.len(),
            model.backend(),
            if proposer.is_some() {
                "unet proposal boxes"
            } else {
                "grid boxes"
            },
            dir.display()
        );
        return Ok(());
    }
    let _lock = OutputLock::acquire(&out)?;
    let options = frame_options(cell, proposer.as_ref());
    for path in &frames {
        let frame = preprocess_frame(&imageio::read_frame(path)?, reference.as_ref())?;
        let mask = inference::segment_frame_with(&model, &frame, &options)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        imageio::write_mask(dir.join(format!("{name}.png")), &mask)?;
        println!(
            "{}: {} foreground pixel(s)",
            path.display(),
            mask.count_foreground()
        );
    }
    Ok(())
}

fn eval(a: EvalArgs, cfg: &ConfigFile, dry_run: bool) -> Result<()> {
    let out = out_dir(a.out, cfg)?;
    let manifest = load_manifest(&manifest_path(a.manifest, cfg, &out)?)?;
    let split = cfg.pick(a.split, "split", Split::Test)?;
    let (cell, _) = grid(&a.grid, cfg)?;
    let model = segmenter(&a.model, cfg, 0)?;
    let proposer = proposal(&a.proposal, cfg, &model)?;
    let modalities: Vec<ModalityName> = if a.modality.is_empty() {
        manifest.modalities().into_iter().collect()
    } else {
        a.modality
    };
    let dir = out
        .join(experiments::EVAL_DIR)
        .join(model.backend().as_str());
    for &m in &modalities {
        if manifest.select(split, Some(m)).is_empty() {
            return Err(invalid(format!("no {split} frames for {m}")));
        }
    }
    if dry_run {
        for &m in &modalities {
            println!(
                "{m}: {} {split} frame(s)",
                manifest.select(split, Some(m)).len()
            );
        }
        println!(
            "score {} with cell {cell}px; CSVs to {}",
            model.backend(),
            dir.display()
        );
        return Ok(());
    }
    let _lock = OutputLock::acquire(&out)?;
    let options = frame_options(cell, proposer.as_ref());
    println!(
        "{:<10} {:>7} {:>7} {:>7} {:>11}",
        "fluid", "frames", "iou", "f1", "pooled_iou"
    );
    for m in modalities {
        let masks = a.save_masks.then(|| dir.join("masks").join(m.slug()));
        let evaluation =
            inference::evaluate_manifest(&model, &manifest, split, m, &options, masks.as_deref())?;
        inference::write_evaluation(&evaluation, &dir, m.slug())?;
        println!(
            "{:<10} {:>7} {:>7.4} {:>7.4} {:>11.4}",
            m.as_str(),
            evaluation.rows.len(),
            evaluation.mean("iou").unwrap_or(0.0),
            evaluation.mean("f1").unwrap_or(0.0),
            evaluation.pooled.iou
        );
    }
    Ok(())
}

fn experiment_config(
    a: ExperimentArgs,
    cfg: &ConfigFile,
) -> Result<(hsvseg::experiments::ExperimentKind, ExperimentConfig)> {
    if let Some(path) = a.from_run {
        require_file(&path, "run record")?;
        let record = RunRecord::load(&path)?;
        let mut config = record.config;
        if let Some(out) = cfg.pick_opt(a.out.out, "out")? {
            config.out_dir = out;
        }
        return Ok((record.experiment, config));
    }
    let kind = a
        .kind
        .ok_or_else(|| invalid("name an experiment or pass --from-run"))?;
    let out = out_dir(a.out, cfg)?;
    let mut config = ExperimentConfig::new(manifest_path(a.manifest, cfg, &out)?, out);
    config.seed = cfg.pick(a.seed, "seed", 0u64)?;
    config.foundation_checkpoint = cfg.pick(
        a.foundation_checkpoint,
        "foundation-checkpoint",
        config.foundation_checkpoint,
    )?;
    config.unet_checkpoint = cfg.pick_opt(a.unet_checkpoint, "unet-checkpoint")?;
    config.train = train_config(&a.train, cfg, config.seed, config.train.learning_rate)?;
    config.unet_train = TrainConfig {
        learning_rate: cfg.pick(a.unet_lr, "unet-lr", config.unet_train.learning_rate)?,
        epochs: cfg.pick(a.unet_epochs, "unet-epochs", config.train.epochs)?,
        batch_size: cfg.pick(
            a.unet_batch_size,
            "unet-batch-size",
            config.train.batch_size,
        )?,
        ..config.train
    };
    config.unet = unet_config(a.unet_depth, a.unet_width, cfg)?;
    (config.cell_size, config.box_jitter) = grid(&a.grid, cfg)?;
    Ok((kind, config))
}

fn experiment(a: ExperimentArgs, cfg: &ConfigFile, dry_run: bool) -> Result<()> {
    let (kind, config) = experiment_config(a, cfg)?;
    require_file(&config.manifest, "manifest")?;
    if dry_run {
        print!("{}", experiments::plan(kind, &config)?);
        return Ok(());
    }
    let record = experiments::run_experiment(kind, &config)?;
    print!("{}", experiments::render_table(&record.results));
    println!(
        "run record: {}",
        config.out_dir.join(experiments::RUN_RECORD_FILE).display()
    );
    Ok(())
}

fn report(a: ReportArgs, cfg: &ConfigFile, dry_run: bool) -> Result<()> {
    let out = out_dir(a.out, cfg)?;
    if dry_run {
        let csv = out
            .join(experiments::EVAL_DIR)
            .join(experiments::COMPARISON_FILE);
        let rows = experiments::read_comparison_csv(&csv)?;
        println!(
            "render {} row(s) from {} into {}",
            rows.len(),
            csv.display(),
            out.join(experiments::REPORTS_DIR).display()
        );
        return Ok(());
    }
    let outputs = experiments::report(&out)?;
    print!(
        "{}",
        fs::read_to_string(&outputs.table)
            .with_context(|| format!("reading {}", outputs.table.display()))?
    );
    for p in outputs.plots {
        println!("plot: {}", p.display());
    }
    Ok(())
}

fn init_foundation(a: InitFoundationArgs, cfg: &ConfigFile, dry_run: bool) -> Result<()> {
    let path = match (a.output, a.registry_id) {
        (Some(p), _) => p,
        (None, Some(id)) => {
            let dir = std::env::var_os(checkpoint::MODEL_DIR_ENV).ok_or_else(|| {
                invalid(format!(
                    "--registry-id needs ${} to be set",
                    checkpoint::MODEL_DIR_ENV
                ))
            })?;
            PathBuf::from(dir).join(checkpoint::registry_file_name(&id))
        }
        (None, None) => return Err(invalid("pass --output or --registry-id")),
    };
    let config = PromptableConfig {
        embed_dim: cfg.pick(
            a.embed_dim,
            "embed-dim",
            PromptableConfig::default().embed_dim,
        )?,
    };
    let res = cfg.pick(a.patch_resolution, "patch-resolution", DEFAULT_PATCH_RES)?;
    let seed = cfg.pick(a.seed, "seed", 0u64)?;
    let model = Segmenter::foundation(config, res, seed)?;
    if dry_run {
        println!(
            "would write a {res}px promptable checkpoint (embed {}) to {}",
            config.embed_dim,
            path.display()
        );
        return Ok(());
    }
    model.save(&path)?;
    println!(
        "{} (frozen digest {})",
        path.display(),
        model.frozen_digest()
    );
    Ok(())
}
