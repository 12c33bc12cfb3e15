//! `frusseg` — batch pipeline for weakly-supervised catheter segmentation
//! in 3D frustum ultrasound: phantom generation, scan conversion, line
//! filtering, training, inference, evaluation and FLOPs analysis.
//!
//! Every subcommand writes a run manifest (command echo, resolved config,
//! seeds, input hashes, timings) into the output directory. Seeded runs
//! reproduce their primary outputs byte-identically; manifests carry wall
//! times and are the one output excluded from that guarantee.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use frusseg::frangi::{vesselness, CParam, VesselnessParams};
use frusseg::geometry::{cartesian_to_frustum, frustum_to_cartesian, ProbeGeometry};
use frusseg::manifest::RunManifest;
use frusseg::metrics::{confusion, dsc, vs, EvalReport, VolumeScore};
use frusseg::network::checkpoint::{load_checkpoint, save_checkpoint};
use frusseg::network::flops::{count_flops, FlopsDomain, FlopsMode};
use frusseg::network::NetworkConfig;
use frusseg::phantom::{
    generate_dataset, parse_dataset_manifest, render_dataset_manifest, ManifestEntry,
    PhantomSpec, Split,
};
use frusseg::volume::{load_any, load_frustum, load_mask, AnyVolume};
use frusseg::weaksup::{infer, train, TrainConfig, TrainItem, TrainMode};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "frusseg", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset (volumes, masks, bboxes, manifest)
    Phantom(PhantomArgs),
    /// Scan-convert between frustum and Cartesian grids
    Convert(ConvertArgs),
    /// Multiscale vesselness line filtering
    Frangi(FrangiArgs),
    /// Train the three-head network on a phantom dataset
    Train(TrainArgs),
    /// Segment one volume with a trained checkpoint
    Infer(InferArgs),
    /// Evaluate predicted masks against ground truth (DSC, VS)
    Eval(EvalArgs),
    /// Per-layer multiply-add complexity analysis
    Flops(FlopsArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    train: usize,
    #[arg(long, default_value_t = 1)]
    val: usize,
    #[arg(long, default_value_t = 1)]
    test: usize,
    /// Volume shape DxAxE
    #[arg(long)]
    shape: Option<String>,
    #[arg(long)]
    diameter_mm: Option<f32>,
    #[arg(long)]
    bbox_margin: Option<u32>,
    #[arg(long)]
    speckle: Option<f32>,
    /// TOML file with a [phantom] section overriding the base spec
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Direction {
    F2c,
    C2f,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    direction: Direction,
    /// Isotropic value or sx,sy,sz in mm
    #[arg(long, default_value = "0.2")]
    spacing: String,
    #[arg(long, default_value_t = 0.0)]
    radial_start: f32,
    /// Frustum shape DxAxE (required for c2f)
    #[arg(long)]
    frustum_shape: Option<String>,
    /// Frustum steps r_mm,az_deg,el_deg (c2f only; f2c reads the header)
    #[arg(long, default_value = "0.2695,1.003,1.003")]
    steps: String,
    /// Also write the fan footprint mask (f2c)
    #[arg(long)]
    footprint_out: Option<PathBuf>,
}

#[derive(Args)]
struct FrangiArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Gaussian scales in voxels
    #[arg(long, default_value = "2,3")]
    scales: String,
    #[arg(long, default_value_t = 0.5)]
    alpha: f32,
    #[arg(long, default_value_t = 0.5)]
    beta: f32,
    /// "auto" or a fixed value
    #[arg(long, default_value = "auto")]
    c: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Compact,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum Schedule {
    Paper,
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Weak,
    Supervised,
    Bbox,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest written by `phantom`
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "weak")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "compact")]
    profile: Profile,
    /// Base hyperparameter schedule before config/flag overrides
    #[arg(long, value_enum, default_value = "paper")]
    schedule: Schedule,
    /// TOML file with [train] and/or [network] sections
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    eta: Option<f32>,
    #[arg(long)]
    tau_u: Option<f32>,
    #[arg(long)]
    tau_loc: Option<f32>,
    #[arg(long)]
    lr: Option<f64>,
    /// phase1,phase2,phase3_min,phase3_max
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    update_period: Option<u32>,
    #[arg(long)]
    n_regions: Option<usize>,
    #[arg(long)]
    m_rois: Option<usize>,
    #[arg(long)]
    pos_weight: Option<f32>,
    #[arg(long)]
    decoder_channels: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    m_rois: usize,
    #[arg(long, default_value_t = 0.5)]
    tau_loc: f32,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset manifest; evaluates `<pred_dir>/<id>_pred.msk` per item
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    pred_dir: Option<PathBuf>,
    /// Restrict manifest evaluation to one split
    #[arg(long)]
    split: Option<String>,
    /// Single-pair mode
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Frustum,
    Cartesian,
}

#[derive(Clone, Copy, ValueEnum)]
enum FlopsModeArg {
    Whole,
    Roi,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long, value_enum, default_value = "paper")]
    profile: Profile,
    #[arg(long, value_enum, default_value = "frustum")]
    domain: DomainArg,
    #[arg(long, value_enum, default_value = "whole")]
    mode: FlopsModeArg,
    /// Input shape DxAxE; defaults to the domain's standard size
    #[arg(long)]
    shape: Option<String>,
    /// ROI sizes for roi mode, e.g. 128x32x32,128x32x32
    #[arg(long, default_value = "128x32x32,128x32x32")]
    roi_shapes: String,
    #[arg(long)]
    decoder_channels: Option<usize>,
    /// Write the report here in addition to stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_shape(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = s
        .split(['x', 'X'])
        .map(|t| t.parse::<usize>().context("bad shape component"))
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        bail!("shape must be DxAxE, got {s}");
    }
    Ok((parts[0], parts[1], parts[2]))
}

fn parse_triple_f32(s: &str) -> Result<[f32; 3]> {
    let parts: Vec<f32> = s
        .split(',')
        .map(|t| t.trim().parse::<f32>().context("bad number"))
        .collect::<Result<_>>()?;
    match parts.len() {
        1 => Ok([parts[0]; 3]),
        3 => Ok([parts[0], parts[1], parts[2]]),
        _ => bail!("expected one value or three comma-separated values, got {s}"),
    }
}

#[derive(Debug, Default, serde::Deserialize)]
struct ConfigFile {
    phantom: Option<PhantomSpec>,
    train: Option<TrainConfig>,
    network: Option<NetworkConfig>,
}

fn load_config(path: &Option<PathBuf>) -> Result<ConfigFile> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

struct CommandOutcome {
    manifest_dir: Option<PathBuf>,
}

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    let started = Instant::now();
    let mut manifest;
    let name;
    let result = match cli.command {
        Command::Phantom(a) => {
            name = "phantom";
            manifest = RunManifest::new(name, &argv);
            cmd_phantom(a, &mut manifest)
        }
        Command::Convert(a) => {
            name = "convert";
            manifest = RunManifest::new(name, &argv);
            cmd_convert(a, &mut manifest)
        }
        Command::Frangi(a) => {
            name = "frangi";
            manifest = RunManifest::new(name, &argv);
            cmd_frangi(a, &mut manifest)
        }
        Command::Train(a) => {
            name = "train";
            manifest = RunManifest::new(name, &argv);
            cmd_train(a, &mut manifest)
        }
        Command::Infer(a) => {
            name = "infer";
            manifest = RunManifest::new(name, &argv);
            cmd_infer(a, &mut manifest)
        }
        Command::Eval(a) => {
            name = "eval";
            manifest = RunManifest::new(name, &argv);
            cmd_eval(a, &mut manifest)
        }
        Command::Flops(a) => {
            name = "flops";
            manifest = RunManifest::new(name, &argv);
            cmd_flops(a, &mut manifest)
        }
    };
    manifest.add_timing("total", started.elapsed());
    let write_manifest = |m: &RunManifest, dir: &Option<PathBuf>| {
        if let Some(dir) = dir {
            let _ = std::fs::create_dir_all(dir);
            let path = dir.join(format!("{name}-manifest.txt"));
            if let Err(e) = m.write(&path) {
                eprintln!("warning: could not write manifest: {e}");
            }
        }
    };
    match result {
        Ok(outcome) => {
            manifest.add("status", "ok");
            write_manifest(&manifest, &outcome.manifest_dir);
        }
        Err(e) => {
            manifest.add("status", &format!("error: {e:#}"));
            let dir = manifest_dir_hint(&manifest);
            write_manifest(&manifest, &dir);
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}

fn manifest_dir_hint(m: &RunManifest) -> Option<PathBuf> {
    m.render()
        .lines()
        .find_map(|l| l.strip_prefix("out_dir: ").map(|v| PathBuf::from(v.trim())))
}

fn cmd_phantom(a: PhantomArgs, m: &mut RunManifest) -> Result<CommandOutcome> {
    m.add("out_dir", &a.out_dir.display().to_string());
    m.add("seed", &a.seed.to_string());
    let cfg = load_config(&a.config)?;
    let mut spec = cfg.phantom.unwrap_or_else(|| PhantomSpec::desk_default(0));
    if let Some(s) = &a.shape {
        spec.shape = parse_shape(s)?;
    }
    if let Some(d) = a.diameter_mm {
        spec.catheter_diameter_mm = d;
    }
    if let Some(b) = a.bbox_margin {
        spec.bbox_margin_vox = b;
    }
    if let Some(s) = a.speckle {
        spec.speckle_strength = s;
    }
    m.add_multiline("spec", &toml::to_string(&spec)?);
    std::fs::create_dir_all(&a.out_dir)?;

    let items = generate_dataset(&spec, a.train, a.val, a.test, a.seed)?;
    let mut entries = Vec::new();
    for item in &items {
        let vol_path = a.out_dir.join(format!("{}.frv", item.id));
        let mask_path = a.out_dir.join(format!("{}_gt.msk", item.id));
        let bbox_path = a.out_dir.join(format!("{}_bbox.txt", item.id));
        item.phantom.volume.save(&vol_path)?;
        item.phantom.ground_truth.save(&mask_path)?;
        let bb = item.phantom.loose_bbox;
        std::fs::write(
            &bbox_path,
            format!(
                "start: {} {} {}\nend: {} {} {}\n",
                bb.start[0], bb.start[1], bb.start[2], bb.end[0], bb.end[1], bb.end[2]
            ),
        )?;
        entries.push(ManifestEntry {
            id: item.id.clone(),
            split: item.split,
            seed: item.seed,
            volume: PathBuf::from(format!("{}.frv", item.id)),
            mask: PathBuf::from(format!("{}_gt.msk", item.id)),
            bbox: bb,
        });
    }
    let manifest_text = render_dataset_manifest(a.seed, &entries);
    let dataset_manifest = a.out_dir.join("dataset.txt");
    std::fs::write(&dataset_manifest, manifest_text)?;
    m.add("items", &items.len().to_string());
    m.add_file_hash("dataset_manifest", &dataset_manifest)?;
    println!(
        "wrote {} phantoms ({} train / {} val / {} test) to {}",
        items.len(),
        a.train,
        a.val,
        a.test,
        a.out_dir.display()
    );
    Ok(CommandOutcome {
        manifest_dir: Some(a.out_dir),
    })
}

fn cmd_convert(a: ConvertArgs, m: &mut RunManifest) -> Result<CommandOutcome> {
    let out_dir = a.out.parent().map(|p| p.to_path_buf()).unwrap_or_default();
    m.add("out_dir", &out_dir.display().to_string());
    m.add_file_hash("input", &a.input)?;
    let spacing = parse_triple_f32(&a.spacing)?;
    match a.direction {
        Direction::F2c => {
            let fv = load_frustum(&a.input)?;
            let geom = ProbeGeometry::from_frustum(&fv, a.radial_start)?;
            let conv = frustum_to_cartesian(&fv, &geom, spacing)?;
            conv.volume.save(&a.out)?;
            m.add("output_shape", &format!("{:?}", conv.volume.shape()));
            m.add("origin_mm", &format!("{:?}", conv.origin_mm));
            if let Some(fp) = &a.footprint_out {
                conv.footprint.save(fp)?;
                m.add_file_hash("footprint", fp)?;
            }
            println!(
                "converted {:?} frustum -> {:?} cartesian at {:?} mm",
                fv.shape(),
                conv.volume.shape(),
                spacing
            );
        }
        Direction::C2f => {
            let shape = parse_shape(
                a.frustum_shape
                    .as_deref()
                    .context("--frustum-shape is required for c2f")?,
            )?;
            let steps = parse_triple_f32(&a.steps)?;
            let cv = match load_any(&a.input)? {
                AnyVolume::Cartesian(v) => v,
                _ => bail!("c2f input must be a Cartesian volume"),
            };
            let geom = ProbeGeometry::new(
                a.radial_start,
                steps[0],
                steps[1],
                steps[2],
                shape.1,
                shape.2,
            )?;
            let (fv, oob) = cartesian_to_frustum(&cv, &geom, shape)?;
            fv.save(&a.out)?;
            m.add("out_of_bounds_samples", &oob.to_string());
            println!(
                "converted {:?} cartesian -> {:?} frustum ({} out-of-bounds samples zeroed)",
                cv.shape(),
                shape,
                oob
            );
        }
    }
    m.add_file_hash("output", &a.out)?;
    Ok(CommandOutcome {
        manifest_dir: Some(out_dir),
    })
}

fn cmd_frangi(a: FrangiArgs, m: &mut RunManifest) -> Result<CommandOutcome> {
    let out_dir = a.out.parent().map(|p| p.to_path_buf()).unwrap_or_default();
    m.add("out_dir", &out_dir.display().to_string());
    m.add_file_hash("input", &a.input)?;
    let fv = load_frustum(&a.input)?;
    let scales: Vec<f32> = a
        .scales
        .split(',')
        .map(|t| t.trim().parse::<f32>().context("bad scale"))
        .collect::<Result<_>>()?;
    let c = if a.c == "auto" {
        CParam::Auto
    } else {
        CParam::Fixed(a.c.parse::<f32>().context("bad c value")?)
    };
    let params = VesselnessParams {
        scales,
        alpha: a.alpha,
        beta: a.beta,
        c,
        bright_on_dark: true,
    };
    params.validate().map_err(anyhow::Error::msg)?;
    m.add_multiline("params", &toml::to_string(&params)?);
    let resp = vesselness(&fv.data, &params);
    let out = frusseg::volume::FrustumVolume::new(
        resp,
        fv.radial_step_mm,
        fv.azimuth_step_deg,
        fv.elevation_step_deg,
        1.0,
    )?;
    out.save(&a.out)?;
    m.add_file_hash("output", &a.out)?;
    println!("wrote vesselness response to {}", a.out.display());
    Ok(CommandOutcome {
        manifest_dir: Some(out_dir),
    })
}

fn load_items(manifest_path: &Path, split: Split, with_gt: bool) -> Result<Vec<TrainItem>> {
    let text = std::fs::read_to_string(manifest_path)
        .with_context(|| format!("reading dataset manifest {}", manifest_path.display()))?;
    let (_, entries) = parse_dataset_manifest(&text)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut items = Vec::new();
    for e in entries.into_iter().filter(|e| e.split == split) {
        let volume = load_frustum(&base.join(&e.volume))?;
        let gt = if with_gt {
            Some(load_mask(&base.join(&e.mask))?)
        } else {
            None
        };
        items.push(TrainItem {
            id: e.id,
            volume,
            bbox: e.bbox,
            gt,
        });
    }
    Ok(items)
}

fn cmd_train(a: TrainArgs, m: &mut RunManifest) -> Result<CommandOutcome> {
    m.add("out_dir", &a.out_dir.display().to_string());
    m.add("seed", &a.seed.to_string());
    m.add_file_hash("dataset_manifest", &a.dataset)?;
    let cfg = load_config(&a.config)?;

    let mut tc = cfg.train.unwrap_or_else(|| match a.schedule {
        Schedule::Paper => TrainConfig::paper_defaults(a.seed),
        Schedule::Desk => TrainConfig::desk(a.seed),
    });
    tc.seed = a.seed;
    tc.mode = match a.mode {
        ModeArg::Weak => TrainMode::Weak,
        ModeArg::Supervised => TrainMode::FullySupervised,
        ModeArg::Bbox => TrainMode::BboxOnly,
    };
    if let Some(v) = a.eta {
        tc.eta = v;
    }
    if let Some(v) = a.tau_u {
        tc.crf.tau_u = v;
    }
    if let Some(v) = a.tau_loc {
        tc.tau_loc = v;
    }
    if let Some(v) = a.lr {
        tc.lr = v;
    }
    if let Some(s) = &a.epochs {
        let e: Vec<u32> = s
            .split(',')
            .map(|t| t.parse::<u32>().context("bad epoch count"))
            .collect::<Result<_>>()?;
        if e.len() != 4 {
            bail!("--epochs needs phase1,phase2,phase3_min,phase3_max");
        }
        tc.phase1_epochs = e[0];
        tc.phase2_epochs = e[1];
        tc.phase3_min = e[2];
        tc.phase3_max = e[3];
    }
    if let Some(v) = a.update_period {
        tc.update_period = v;
    }
    if let Some(v) = a.n_regions {
        tc.n_regions = v;
    }
    if let Some(v) = a.m_rois {
        tc.m_rois_train = v;
    }
    if let Some(v) = a.pos_weight {
        tc.pos_weight = v;
    }

    let mut nc = cfg.network.unwrap_or_else(|| match a.profile {
        Profile::Compact => NetworkConfig::compact(a.seed),
        Profile::Paper => NetworkConfig::paper(a.seed),
    });
    nc.rng_seed = a.seed;
    if let Some(d) = a.decoder_channels {
        nc.decoder_channels = d;
    }

    m.add_multiline("train_config", &toml::to_string(&tc)?);
    m.add_multiline("network_config", &toml::to_string(&nc)?);

    // gt loaded for validation metrics and the supervised mode
    let train_items = load_items(&a.dataset, Split::Train, true)?;
    let val_items = load_items(&a.dataset, Split::Val, true)?;
    if train_items.is_empty() {
        bail!("dataset has no train items");
    }
    m.add("train_items", &train_items.len().to_string());
    m.add("val_items", &val_items.len().to_string());

    let t0 = Instant::now();
    let out = train(&train_items, &val_items, &tc, &nc)?;
    m.add_timing("train", t0.elapsed());

    std::fs::create_dir_all(&a.out_dir)?;
    let ckpt = a.out_dir.join("checkpoint.nwt");
    save_checkpoint(&out.network, &ckpt)?;
    m.add_file_hash("checkpoint", &ckpt)?;

    for log in &out.logs {
        m.add(
            &format!("epoch.p{}e{:03}", log.phase, log.epoch),
            &format!(
                "cls={:.5} loc={:.5} seg={:.5} joint={:.5} val_dice={}",
                log.losses.l_cls,
                log.losses.l_loc,
                log.losses.l_seg,
                log.losses.l_joint(),
                log.val_dice.map_or("n/a".to_string(), |d| format!("{d:.4}")),
            ),
        );
    }
    for (stage, d) in &out.label_quality {
        m.add(&format!("label_dice.{stage}"), &format!("{d:.4}"));
    }
    for flag in &out.flags {
        m.add("flag", flag);
    }
    let final_val = out.logs.iter().rev().find_map(|l| l.val_dice);
    println!(
        "training done: {} epochs logged, final val Dice {}",
        out.logs.len(),
        final_val.map_or("n/a".to_string(), |d| format!("{d:.4}"))
    );
    println!("checkpoint: {}", ckpt.display());
    Ok(CommandOutcome {
        manifest_dir: Some(a.out_dir),
    })
}

fn cmd_infer(a: InferArgs, m: &mut RunManifest) -> Result<CommandOutcome> {
    let out_dir = a.out.parent().map(|p| p.to_path_buf()).unwrap_or_default();
    m.add("out_dir", &out_dir.display().to_string());
    m.add_file_hash("checkpoint", &a.checkpoint)?;
    m.add_file_hash("input", &a.input)?;
    let net = load_checkpoint(&a.checkpoint)?;
    let vol = load_frustum(&a.input)?;
    let (mask, fallback) = infer(&net, &vol, a.m_rois, a.tau_loc)?;
    mask.save(&a.out)?;
    m.add("whole_volume_fallback", &fallback.to_string());
    m.add_file_hash("output", &a.out)?;
    println!(
        "wrote mask ({} foreground voxels{}) to {}",
        mask.count_ones(),
        if fallback { ", whole-volume fallback" } else { "" },
        a.out.display()
    );
    Ok(CommandOutcome {
        manifest_dir: Some(out_dir),
    })
}

fn cmd_eval(a: EvalArgs, m: &mut RunManifest) -> Result<CommandOutcome> {
    m.add("out_dir", &a.out_dir.display().to_string());
    let mut report = EvalReport::default();
    match (&a.manifest, &a.pred, &a.gt) {
        (Some(manifest_path), None, None) => {
            let pred_dir = a
                .pred_dir
                .as_ref()
                .context("--pred-dir is required with --manifest")?;
            let split: Split = a
                .split
                .as_deref()
                .unwrap_or("test")
                .parse()
                .map_err(anyhow::Error::msg)?;
            let text = std::fs::read_to_string(manifest_path)?;
            let (_, entries) = parse_dataset_manifest(&text)?;
            let base = manifest_path.parent().unwrap_or(Path::new("."));
            for e in entries.into_iter().filter(|e| e.split == split) {
                let gt = load_mask(&base.join(&e.mask))?;
                let pred_path = pred_dir.join(format!("{}_pred.msk", e.id));
                let pred = load_mask(&pred_path)
                    .with_context(|| format!("prediction {}", pred_path.display()))?;
                let c = confusion(&pred, &gt)?;
                report.scores.push(VolumeScore {
                    id: e.id,
                    dsc: dsc(&c),
                    vs: vs(&c),
                });
            }
            report.config_echo = format!("manifest={} split={split}", manifest_path.display());
        }
        (None, Some(pred), Some(gt)) => {
            let p = load_mask(pred)?;
            let g = load_mask(gt)?;
            let c = confusion(&p, &g)?;
            report.scores.push(VolumeScore {
                id: pred
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "pair".into()),
                dsc: dsc(&c),
                vs: vs(&c),
            });
            report.config_echo = format!("pred={} gt={}", pred.display(), gt.display());
        }
        _ => bail!("use either --manifest with --pred-dir, or --pred with --gt"),
    }
    std::fs::create_dir_all(&a.out_dir)?;
    let table = report.to_table();
    print!("{table}");
    std::fs::write(a.out_dir.join("eval_report.txt"), &table)?;
    std::fs::write(a.out_dir.join("eval_report.csv"), report.to_csv())?;
    m.add_file_hash("report_csv", &a.out_dir.join("eval_report.csv"))?;
    Ok(CommandOutcome {
        manifest_dir: Some(a.out_dir),
    })
}

fn cmd_flops(a: FlopsArgs, m: &mut RunManifest) -> Result<CommandOutcome> {
    let out_dir = a
        .out
        .as_ref()
        .and_then(|p| p.parent().map(|q| q.to_path_buf()));
    if let Some(d) = &out_dir {
        m.add("out_dir", &d.display().to_string());
    }
    let mut cfg = match a.profile {
        Profile::Compact => NetworkConfig::compact(0),
        Profile::Paper => NetworkConfig::paper(0),
    };
    if let Some(d) = a.decoder_channels {
        cfg.decoder_channels = d;
    }
    let domain = match a.domain {
        DomainArg::Frustum => FlopsDomain::Frustum,
        DomainArg::Cartesian => FlopsDomain::CartesianStride8,
    };
    let default_shape = match a.domain {
        DomainArg::Frustum => (360usize, 96usize, 96usize),
        DomainArg::Cartesian => (360, 360, 336),
    };
    let shape = match &a.shape {
        Some(s) => parse_shape(s)?,
        None => default_shape,
    };
    let mode = match a.mode {
        FlopsModeArg::Whole => FlopsMode::WholeVolume,
        FlopsModeArg::Roi => {
            let rois: Vec<[usize; 3]> = a
                .roi_shapes
                .split(',')
                .map(|s| parse_shape(s).map(|(d, h, w)| [d, h, w]))
                .collect::<Result<_>>()?;
            FlopsMode::Rois(rois)
        }
    };
    let report = count_flops(&cfg, [shape.0, shape.1, shape.2], &mode, domain);
    let table = report.to_table();
    print!("{table}");
    if let Some(out) = &a.out {
        std::fs::write(out, &table)?;
        m.add_file_hash("report", out)?;
    }
    m.add("gflops", &format!("{:.4}", report.gflops()));
    Ok(CommandOutcome {
        manifest_dir: out_dir,
    })
}
