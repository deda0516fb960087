use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use braid::bai::eval::{cosine, edge_identification, score_all, translate_many};
use braid::bai::{adapt_new_subject, train_bai, voxel_saliency, BaiBundle, BaiModel, SaliencyTarget, Variant};
use braid::config::RunConfig;
use braid::container::{Table, DATASET_MAGIC};
use braid::diffusion::{train_denoiser, DiffusionModel, FusionMode};
use braid::imageio::{write_pgm, write_ppm};
use braid::metrics::{evaluate_dir, evaluate_images, item_file_name, pearson_f32};
use braid::pipeline::{alpha_maps_for, decode_triples_threaded, synthesize_and_redecode, DecodeOptions};
use braid::refinement::{train_refinement, ImprecisePairSet};
use braid::representations::RepresentationTriple;
use braid::subject_sim::{build_dataset, Dataset, D_V};
use braid::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "braid", version, about = "Cross-subject fMRI-to-image decoding on a synthetic visual system")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
struct Common {
    /// JSON run configuration; omitted fields take reference defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any configuration field, e.g. `--set bai.epochs=5`.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Simulate subjects and write a dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the bidirectional autoencoder.
    TrainBai {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the denoiser and control branches on ground-truth conditions.
    TrainDiffusion {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Generate pseudo-imprecise representation/image pairs.
    GenImprecise {
        #[arg(long)]
        bai: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Dataset whose world and codebook seeds the pairs share.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the semantic refinement and visual coherence modules.
    TrainRefine {
        #[arg(long)]
        diffusion: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Decode one subject's held-out voxels to images.
    Decode {
        #[arg(long)]
        bai: PathBuf,
        #[arg(long)]
        diffusion: PathBuf,
        #[arg(long)]
        refine: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        subject: u32,
        #[arg(long)]
        fusion: Option<FusionMode>,
        #[arg(long)]
        no_srm: bool,
        /// Decode only the first N test items.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fit a new subject's modulation modules with everything else frozen.
    Adapt {
        #[arg(long)]
        bai: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        /// Defaults to the only subject in the dataset.
        #[arg(long)]
        subject: Option<u32>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score a directory of decoded images against the held-out stimuli.
    Evaluate {
        #[arg(long)]
        decoded: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Voxel saliency of one held-out item, rendered as a grayscale map.
    Saliency {
        #[arg(long)]
        bai: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        subject: u32,
        #[arg(long)]
        target: SaliencyTarget,
        #[arg(long, default_value_t = 0)]
        item: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Synthesize fMRI from held-out representations and decode it back.
    SynthFmri {
        #[arg(long)]
        bai: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        subject: u32,
        /// Also decode images from the synthesized and the measured voxels.
        #[arg(long)]
        diffusion: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write the fusion gate maps of one held-out item.
    ExportAlpha {
        #[arg(long)]
        refine: PathBuf,
        #[arg(long)]
        diffusion: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        item: usize,
        /// Condition on representations translated from this subject's voxels instead of ground truth.
        #[arg(long, requires = "subject")]
        bai: Option<PathBuf>,
        #[arg(long)]
        subject: Option<u32>,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Re-run a command from its sidecar.
    Replay {
        sidecar: PathBuf,
    },
}

impl Cmd {
    fn common(&self) -> Option<&Common> {
        use Cmd::*;
        match self {
            GenData { common, .. }
            | TrainBai { common, .. }
            | TrainDiffusion { common, .. }
            | GenImprecise { common, .. }
            | TrainRefine { common, .. }
            | Decode { common, .. }
            | Adapt { common, .. }
            | Evaluate { common, .. }
            | Saliency { common, .. }
            | SynthFmri { common, .. }
            | ExportAlpha { common, .. } => Some(common),
            Replay { .. } => None,
        }
    }
}

/// Record written next to every output. `argv` without `--config`/`--set`
/// plus `config` reproduces the run.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    command: String,
    argv: Vec<String>,
    config: RunConfig,
    threads: usize,
    results: Value,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parameter(_) => 2,
        Error::Data(_) | Error::Format(_) | Error::Io(_) | Error::MissingSubject(_) | Error::SubjectConflict(_) | Error::Dimension(_) => 3,
        Error::Numerical(_) | Error::GradCheck { .. } => 4,
        Error::ContractViolation(_) | Error::UndefinedCorrelation(_) => 1,
    }
}

fn threads() -> Result<usize> {
    match std::env::var("BRAID_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("BRAID_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn existing(p: &Path) -> Result<&Path> {
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::Data(format!("no such file: {}", p.display())))
    }
}

fn sidecar_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("sidecar.json")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn progress(msg: impl AsRef<str>) {
    eprintln!("{}", msg.as_ref());
}

/// Arguments minus the configuration flags, which the sidecar replaces with the resolved config.
fn replay_argv(argv: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip = false;
    for a in argv.iter().skip(1) {
        if skip {
            skip = false;
            continue;
        }
        if a == "--config" || a == "--set" {
            skip = true;
            continue;
        }
        if a.starts_with("--config=") || a.starts_with("--set=") {
            continue;
        }
        out.push(a.clone());
    }
    out
}

fn load_bundle(p: &Path) -> Result<BaiBundle> {
    Ok(BaiBundle::load(existing(p)?)?.0)
}

fn load_data(p: &Path) -> Result<Dataset> {
    Dataset::load(existing(p)?)
}

fn load_diffusion(p: &Path, refine: Option<&Path>) -> Result<DiffusionModel> {
    let (mut m, _) = DiffusionModel::load_diffusion(existing(p)?)?;
    if let Some(r) = refine {
        m.load_refine(existing(r)?)?;
    }
    Ok(m)
}

fn test_voxels<'a>(data: &'a Dataset, subject: u32) -> Result<&'a Vec<Vec<f32>>> {
    data.test_voxels.get(&subject).ok_or(Error::MissingSubject(subject))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

struct Ctx {
    cfg: RunConfig,
    threads: usize,
}

fn run(cmd: &Cmd, ctx: &Ctx) -> Result<(PathBuf, Value)> {
    let cfg = &ctx.cfg;
    match cmd {
        Cmd::GenData { out, .. } => {
            let data = build_dataset(&cfg.dataset)?;
            data.save(out)?;
            Ok((out.clone(), json!({ "subjects": data.subjects(), "n_test": data.test.len() })))
        }
        Cmd::TrainBai { data, out, .. } => {
            let data = load_data(data)?;
            let outcome = train_bai(&data, &cfg.bai, |m, e, h| {
                progress(format!("train-bai model {m} epoch {e} loss {:.4}", h.total.last().unwrap_or(&f64::NAN)))
            })?;
            outcome.bundle.save(out, Some(&cfg.bai))?;
            let scores = score_all(&outcome.bundle, &data)?;
            let summary: Vec<Value> = scores
                .iter()
                .map(|s| json!({ "subject": s.subject, "mean_cos": s.mean_cos(), "edge_acc": s.edge_acc(), "voxel_corr": s.mean_voxel_corr() }))
                .collect();
            Ok((out.clone(), json!({ "histories": outcome.histories, "held_out": summary })))
        }
        Cmd::TrainDiffusion { data, out, .. } => {
            let data = load_data(data)?;
            let (m, hist) = train_denoiser(&data, &cfg.diffusion, |e, l| progress(format!("train-diffusion epoch {e} loss {l:.4}")))?;
            m.save_diffusion(out, Some(&cfg.diffusion), &hist)?;
            Ok((out.clone(), json!({ "loss_history": hist, "n_params": m.n_params("diffusion/") })))
        }
        Cmd::GenImprecise { bai, out, data, .. } => {
            let bundle = load_bundle(bai)?;
            let (world, codebook) = match data {
                Some(d) => {
                    let d = load_data(d)?;
                    (d.config.world_seed, d.config.codebook_seed)
                }
                None => (cfg.dataset.world_seed, cfg.dataset.codebook_seed),
            };
            let pairs = ImprecisePairSet::generate(&bundle.models[0], world, codebook, cfg.pairs.n, cfg.pairs.seed)?;
            pairs.save(out)?;
            let cos: Vec<f64> = pairs.imprecise.iter().zip(&pairs.gt).map(|(a, b)| cosine(&a.s, &b.s)).collect();
            Ok((out.clone(), json!({ "n": pairs.len(), "mean_semantic_cos": mean(&cos) })))
        }
        Cmd::TrainRefine { diffusion, pairs, out, .. } => {
            let base = load_diffusion(diffusion, None)?;
            let pairs = ImprecisePairSet::load(existing(pairs)?)?;
            let (m, hist) = train_refinement(&base, &pairs, &cfg.refine, |e, l| progress(format!("train-refine epoch {e} loss {l:.4}")))?;
            m.save_refine(out, Some(&cfg.refine), &hist)?;
            Ok((out.clone(), json!({ "loss_history": hist, "n_params": m.n_params("refine/") })))
        }
        Cmd::Decode {
            bai,
            diffusion,
            refine,
            data,
            subject,
            limit,
            out_dir,
            ..
        } => {
            let bundle = load_bundle(bai)?;
            let data = load_data(data)?;
            let model = bundle.model_for(*subject)?;
            let voxels = test_voxels(&data, *subject)?;
            let n = limit.unwrap_or(voxels.len()).min(voxels.len());
            let opts = &cfg.decode;
            if (opts.srm || opts.fusion == FusionMode::Vcm) && refine.is_none() {
                return Err(Error::Config("SRM or VCM decoding needs --refine (or --no-srm --fusion direct)".into()));
            }
            let dm = load_diffusion(diffusion, refine.as_deref())?;
            let reps = translate_many(model, &voxels[..n], *subject)?;
            let refs: Vec<&RepresentationTriple> = reps.iter().collect();
            let idx: Vec<usize> = (0..n).collect();
            let images = decode_triples_threaded(&dm, &refs, &idx, opts, ctx.threads)?;
            std::fs::create_dir_all(out_dir)?;
            for (i, im) in images.iter().enumerate() {
                write_ppm(&out_dir.join(item_file_name(i)), im)?;
            }
            Ok((out_dir.clone(), json!({ "n": n, "subject": subject, "options": opts })))
        }
        Cmd::Adapt { bai, data, subject, out, .. } => {
            let bundle = load_bundle(bai)?;
            let data = load_data(data)?;
            let subject = match subject {
                Some(s) => *s,
                None => match data.subjects().as_slice() {
                    [s] => *s,
                    other => return Err(Error::Config(format!("dataset has subjects {other:?}; pass --subject"))),
                },
            };
            let split = data.train.get(&subject).ok_or(Error::MissingSubject(subject))?;
            let base: &BaiModel = &bundle.models[0];
            let (adapted, hist) = adapt_new_subject(base, subject, split, cfg.adapt.samples, &cfg.adapt.training, |e, h| {
                progress(format!("adapt epoch {e} loss {:.4}", h.total.last().unwrap_or(&f64::NAN)))
            })?;
            let new = BaiBundle {
                variant: bundle.variant,
                models: vec![adapted],
            };
            new.save(out, Some(&cfg.adapt.training))?;
            let scores = score_all(&new, &data)?;
            let summary: Vec<Value> = scores
                .iter()
                .map(|s| json!({ "subject": s.subject, "mean_cos": s.mean_cos(), "edge_acc": s.edge_acc(), "voxel_corr": s.mean_voxel_corr() }))
                .collect();
            Ok((
                out.clone(),
                json!({ "subject": subject, "samples": cfg.adapt.samples, "history": hist, "frozen_digest": new.models[0].digest_except_subject(subject), "held_out": summary }),
            ))
        }
        Cmd::Evaluate { decoded, data, out, .. } => {
            let data = load_data(data)?;
            let gt: Vec<_> = data.test.iter().map(|s| s.image.clone()).collect();
            let decode_sidecar = decoded.join("sidecar.json");
            let echo = match std::fs::read_to_string(&decode_sidecar) {
                Ok(t) => serde_json::from_str::<Value>(&t).map_err(|e| Error::Format(e.to_string()))?,
                Err(_) => Value::Null,
            };
            let n = echo["results"]["n"].as_u64().map(|n| n as usize).unwrap_or(gt.len());
            let report = evaluate_dir(existing(decoded)?, &gt[..n.min(gt.len())], json!({ "decode": echo }))?;
            write_json(out, &report)?;
            let means: serde_json::Map<String, Value> = report.metrics.iter().map(|(k, m)| (k.clone(), json!(m.mean))).collect();
            Ok((out.clone(), json!({ "n": report.n, "means": means })))
        }
        Cmd::Saliency { bai, data, subject, target, item, out, .. } => {
            let bundle = load_bundle(bai)?;
            let data = load_data(data)?;
            let v = test_voxels(&data, *subject)?
                .get(*item)
                .ok_or_else(|| Error::Data(format!("no test item {item}")))?;
            let sal = voxel_saliency(bundle.model_for(*subject)?, v, *subject, *target)?;
            // 512 voxels render as a 32×16 map, row-major
            let w = 32;
            write_pgm(out, w, D_V / w, &sal)?;
            let mut top: Vec<usize> = (0..sal.len()).collect();
            top.sort_by(|&a, &b| sal[b].total_cmp(&sal[a]).then(a.cmp(&b)));
            Ok((out.clone(), json!({ "subject": subject, "target": target, "item": item, "top_voxels": &top[..10] })))
        }
        Cmd::SynthFmri {
            bai,
            data,
            subject,
            diffusion,
            limit,
            out,
            ..
        } => {
            let bundle = load_bundle(bai)?;
            let data = load_data(data)?;
            let model = bundle.model_for(*subject)?;
            let measured = test_voxels(&data, *subject)?;
            let n = limit.unwrap_or(data.test.len()).min(data.test.len());
            let gt: Vec<&RepresentationTriple> = data.test[..n].iter().map(|s| &s.triple).collect();
            let rt = synthesize_and_redecode(model, &gt, *subject)?;
            let mut t = Table::new();
            t.put_json("synth/manifest", &json!({ "subject": subject, "n": n, "world_seed": data.config.world_seed }))?;
            t.put_f32("synth/voxels", &[n, D_V], rt.voxels.concat())?;
            t.save(out, DATASET_MAGIC)?;
            let vcorr: Vec<f64> = rt.voxels.iter().zip(measured).map(|(a, b)| pearson_f32(a, b).unwrap_or(0.0)).collect();
            let cos: Vec<f64> = rt.reps.iter().zip(&gt).map(|(a, b)| cosine(&a.s, &b.s)).collect();
            let mut results = json!({
                "subject": subject,
                "n": n,
                "voxel_corr_vs_measured": mean(&vcorr),
                "redecoded_semantic_cos": mean(&cos),
                "redecoded_edge_acc": if n >= 2 { mean(&edge_identification(&rt.reps, &gt)?) } else { f64::NAN },
            });
            if let Some(dp) = diffusion {
                let dm = load_diffusion(dp, None)?;
                let direct = translate_many(model, &measured[..n], *subject)?;
                let idx: Vec<usize> = (0..n).collect();
                let stim: Vec<_> = data.test[..n].iter().map(|s| s.image.clone()).collect();
                let opts = DecodeOptions { fusion: FusionMode::Direct, srm: false, ..cfg.decode.clone() };
                let synth_imgs = decode_triples_threaded(&dm, &rt.reps.iter().collect::<Vec<_>>(), &idx, &opts, ctx.threads)?;
                let direct_imgs = decode_triples_threaded(&dm, &direct.iter().collect::<Vec<_>>(), &idx, &opts, ctx.threads)?;
                let a = evaluate_images(&synth_imgs, &stim, Value::Null)?;
                let b = evaluate_images(&direct_imgs, &stim, Value::Null)?;
                results["pixcorr_synth_redecode"] = json!(a.metrics["pixcorr"].mean);
                results["pixcorr_direct_decode"] = json!(b.metrics["pixcorr"].mean);
            }
            Ok((out.clone(), results))
        }
        Cmd::ExportAlpha {
            refine,
            diffusion,
            data,
            item,
            bai,
            subject,
            out_dir,
            ..
        } => {
            let dm = load_diffusion(diffusion, Some(refine))?;
            let data = load_data(data)?;
            let sample = data.test.get(*item).ok_or_else(|| Error::Data(format!("no test item {item}")))?;
            let triple = match (bai, subject) {
                (Some(b), Some(s)) => {
                    let bundle = load_bundle(b)?;
                    let v = test_voxels(&data, *s)?;
                    translate_many(bundle.model_for(*s)?, &v[*item..*item + 1], *s)?.remove(0)
                }
                _ => sample.triple.clone(),
            };
            let opts = DecodeOptions { fusion: FusionMode::Vcm, ..cfg.decode.clone() };
            let maps = alpha_maps_for(&dm, &triple, *item, &opts)?;
            std::fs::create_dir_all(out_dir)?;
            let mut files = Vec::new();
            for m in &maps {
                for (tag, vals) in [("edge", &m.edge), ("color", &m.color)] {
                    let name = format!("site{}_{tag}.pgm", m.site);
                    write_pgm(&out_dir.join(&name), m.width, m.height, vals)?;
                    files.push(json!({ "file": name, "mean_alpha": mean(&vals.iter().map(|&v| v as f64).collect::<Vec<_>>()) }));
                }
            }
            Ok((out_dir.clone(), json!({ "item": item, "maps": files })))
        }
        Cmd::Replay { .. } => unreachable!("handled in main"),
    }
}

fn apply_flags(cmd: &Cmd, mut cfg: RunConfig) -> Result<RunConfig> {
    match cmd {
        Cmd::TrainBai { variant: Some(v), .. } => cfg.bai.variant = *v,
        Cmd::GenImprecise { n: Some(n), .. } => cfg.pairs.n = *n,
        Cmd::Adapt { samples: Some(s), .. } => cfg.adapt.samples = *s,
        Cmd::Decode { fusion, no_srm, refine, .. } => {
            if let Some(f) = fusion {
                cfg.decode.fusion = *f;
            }
            if *no_srm {
                cfg.decode.srm = false;
            } else if refine.is_some() {
                cfg.decode.srm = true;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli, argv: Vec<String>, base: Option<RunConfig>) -> Result<()> {
    if let Cmd::Replay { sidecar } = &cli.cmd {
        let text = std::fs::read_to_string(existing(sidecar)?)?;
        let sc: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", sidecar.display())))?;
        let mut argv = vec!["braid".to_string()];
        argv.extend(sc.argv);
        let cli = Cli::try_parse_from(&argv).map_err(|e| Error::Format(format!("sidecar arguments: {e}")))?;
        return execute(cli, argv, Some(sc.config));
    }
    let common = cli.cmd.common().cloned().unwrap_or_default();
    let cfg = match (base, &common.config) {
        (Some(c), _) => c,
        (None, Some(p)) => RunConfig::load(p)?,
        (None, None) => RunConfig::default(),
    };
    let cfg = apply_flags(&cli.cmd, cfg.with_overrides(&common.sets)?)?;
    let ctx = Ctx { cfg, threads: threads()? };
    let (out, results) = run(&cli.cmd, &ctx)?;
    let sc = Sidecar {
        command: argv.get(1).cloned().unwrap_or_default(),
        argv: replay_argv(&argv),
        config: ctx.cfg.clone(),
        threads: ctx.threads,
        results,
    };
    write_json(&sidecar_path(&out), &sc)
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    // usage errors exit with clap's code 2, matching config errors
    let cli = Cli::parse_from(&argv);
    match execute(cli, argv, None) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("braid: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
