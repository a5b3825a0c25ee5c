//! Command-line front end.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pfr_core::data::{self, ReferenceSet};
use pfr_core::degradation::{self, Level};
use pfr_core::denoiser::{Denoiser, PersonalizationState};
use pfr_core::diffusion::NoiseSchedule;
use pfr_core::metrics::{self, EvalPair, FaceOracle};
use pfr_core::rng::{self, streams};
use pfr_core::tiling;
use pfr_core::train::{self, StepLog};
use pfr_core::ImageBuffer;

use crate::config::{parse_level, RunConfig};
use crate::{archive, io, manifest, parallel, report, Error, Result};

#[derive(Debug, Parser)]
#[command(name = "pfr", version, about = "Personalized diffusion face restoration")]
pub struct Cli {
    /// Flat `key = value` configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic identity dataset as `<out>/<id>/<k>.png`.
    MakeToyData(MakeToyData),
    /// Degrade every image below a directory and write JSON sidecars.
    Degrade(Degrade),
    /// Train the base denoiser on a dataset directory.
    TrainBase(TrainBase),
    /// Fit a personalization state for one identity.
    Personalize(Personalize),
    /// Restore an image or a directory of images.
    Restore(Restore),
    /// Compare restored images against ground truth.
    Evaluate(Evaluate),
}

#[derive(Debug, Args)]
pub struct MakeToyData {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub identities: Option<usize>,
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Degrade {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = level_arg)]
    pub level: Option<Level>,
    /// Probability of passing an image through unchanged.
    #[arg(long)]
    pub p_hq: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainBase {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct Personalize {
    #[arg(long)]
    pub base: PathBuf,
    /// Directory with reference images of the identity.
    #[arg(long)]
    pub refs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Training images; defaults to the reference images.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub n_ref: Option<usize>,
    #[arg(long)]
    pub lambda_gen: Option<f64>,
    #[arg(long)]
    pub lambda_pers: Option<f64>,
}

#[derive(Debug, Args)]
pub struct Restore {
    /// Base weights; may be omitted when `--state` was trained next to them.
    #[arg(long, required_unless_present = "state")]
    pub base: Option<PathBuf>,
    /// Input image or directory.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output image or directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub state: Option<PathBuf>,
    /// Tile edge in pixels.
    #[arg(long)]
    pub tile: Option<usize>,
    /// Tile overlap in pixels.
    #[arg(long)]
    pub overlap: Option<usize>,
    #[arg(long)]
    pub cfg: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Integer bicubic upscaling applied before restoration.
    #[arg(long, default_value_t = 1)]
    pub upscale: usize,
    #[arg(long)]
    pub lambda_att: Option<f64>,
}

#[derive(Debug, Args)]
pub struct Evaluate {
    #[arg(long)]
    pub restored: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// CSV report path.
    #[arg(long)]
    pub out: PathBuf,
}

fn level_arg(s: &str) -> std::result::Result<Level, String> {
    parse_level(s).map_err(|e| e.to_string())
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 2 on usage errors, 1 on runtime errors.
pub fn main_with_args(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli, argv) {
        Ok(()) => 0,
        Err(Error::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run(cli: Cli, argv: &[String]) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    if cfg.jobs == 0 {
        return Err(Error::Usage("--jobs must be at least 1".into()));
    }
    match cli.command {
        Command::MakeToyData(a) => make_toy_data(a, cfg, argv),
        Command::Degrade(a) => degrade(a, cfg, argv),
        Command::TrainBase(a) => train_base(a, cfg, argv),
        Command::Personalize(a) => personalize(a, cfg, argv),
        Command::Restore(a) => restore(a, cfg, argv),
        Command::Evaluate(a) => evaluate(a, cfg, argv),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_log(path: &Path, logs: &[StepLog]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for l in logs {
        serde_json::to_writer(&mut f, l)?;
        writeln!(f).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

fn log_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".log");
    out.with_file_name(name)
}

fn make_toy_data(a: MakeToyData, mut cfg: RunConfig, argv: &[String]) -> Result<()> {
    cfg.data_identities = a.identities.unwrap_or(cfg.data_identities);
    cfg.data_images = a.images.unwrap_or(cfg.data_images);
    cfg.data_size = a.size.unwrap_or(cfg.data_size);
    let ds = data::synthetic_dataset(cfg.data_identities, cfg.data_images, cfg.data_size, cfg.seed)?;
    create_dir(&a.out)?;
    let written = io::save_dataset(&a.out, &ds)?;
    let params: Vec<_> = ds.identities().iter().map(|i| serde_json::json!({ "id": i.id, "params": i.params })).collect();
    let params_path = a.out.join("identities.json");
    fs::write(&params_path, serde_json::to_string_pretty(&params)?).map_err(|e| Error::io(&params_path, e))?;
    let mut outputs = written;
    outputs.push(params_path);
    manifest::write(&a.out, "make-toy-data", argv, &cfg, &outputs)?;
    println!("wrote {} images of {} identities to {}", outputs.len() - 1, ds.len(), a.out.display());
    Ok(())
}

fn sidecar_path(image: &Path) -> PathBuf {
    image.with_extension("json")
}

fn degrade(a: Degrade, mut cfg: RunConfig, argv: &[String]) -> Result<()> {
    cfg.degradation_level = a.level.unwrap_or(cfg.degradation_level);
    cfg.degradation_p_hq = a.p_hq.unwrap_or(cfg.degradation_p_hq);
    if !(0.0..=1.0).contains(&cfg.degradation_p_hq) {
        return Err(Error::Usage("--p-hq must lie in [0, 1]".into()));
    }
    let files = io::list_images_recursive(&a.input)?;
    create_dir(&a.out)?;
    let results = parallel::map(&files, cfg.jobs, |i, rel| -> Result<Vec<PathBuf>> {
        let img = io::read_image(&a.input.join(rel))?;
        let mut r = rng::stream(rng::derive_seed(cfg.seed, i as u64), streams::DEGRADATION);
        let record = degradation::sample_degradation_with(cfg.degradation_level, cfg.degradation_p_hq, &mut r);
        let lq = degradation::degrade(&img, &record)?;
        let out = a.out.join(rel).with_extension("png");
        io::write_png(&out, &lq)?;
        let side = sidecar_path(&out);
        fs::write(&side, serde_json::to_string_pretty(&record)?).map_err(|e| Error::io(&side, e))?;
        Ok(vec![out, side])
    });
    let outputs: Vec<PathBuf> = results.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
    manifest::write(&a.out, "degrade", argv, &cfg, &outputs)?;
    println!("degraded {} images into {}", files.len(), a.out.display());
    Ok(())
}

fn train_base(a: TrainBase, mut cfg: RunConfig, argv: &[String]) -> Result<()> {
    cfg.train.epochs = a.epochs.unwrap_or(cfg.train.epochs);
    cfg.train.batch_size = a.batch_size.unwrap_or(cfg.train.batch_size);
    cfg.train.lr = a.lr.unwrap_or(cfg.train.lr);
    let ds = io::load_dataset(&a.data)?;
    let mut model = Denoiser::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let sched = NoiseSchedule::default();
    let tcfg = cfg.base_train();
    let total = tcfg.steps_for(&ds);
    let logs = train::train_base(&mut model, &ds, &tcfg, &sched, |l| {
        if (l.step + 1) % 100 == 0 || l.step + 1 == total {
            eprintln!("step {}/{total}  l_diff {:.5}", l.step + 1, l.l_diff);
        }
    })?;
    archive::save_model(&a.out, &model)?;
    let log = log_path(&a.out);
    write_log(&log, &logs)?;
    manifest::write(&a.out, "train-base", argv, &cfg, &[a.out.clone(), log])?;
    println!("trained {total} steps; weights in {}", a.out.display());
    Ok(())
}

/// `n` distinct images chosen with a seeded partial shuffle, in index order.
fn choose_references(images: &[ImageBuffer], n: usize, seed: u64) -> Vec<ImageBuffer> {
    if images.len() <= n {
        return images.to_vec();
    }
    let mut r = rng::stream(seed, streams::REFERENCE);
    let mut idx: Vec<usize> = (0..images.len()).collect();
    for k in 0..n {
        let j = k + data::sample_index(idx.len() - k, &mut r);
        idx.swap(k, j);
    }
    let mut chosen = idx[..n].to_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| images[i].clone()).collect()
}

fn personalize(a: Personalize, mut cfg: RunConfig, argv: &[String]) -> Result<()> {
    cfg.personalize.iterations = a.iters.unwrap_or(cfg.personalize.iterations);
    cfg.personalize.n_ref = a.n_ref.unwrap_or(cfg.personalize.n_ref);
    cfg.personalize.loss.lambda_gen = a.lambda_gen.unwrap_or(cfg.personalize.loss.lambda_gen);
    cfg.personalize.loss.lambda_pers = a.lambda_pers.unwrap_or(cfg.personalize.loss.lambda_pers);
    let model = archive::load_model(&a.base)?;
    cfg.model = model.config().clone();
    let all_refs = io::read_images(&a.refs)?;
    if all_refs.is_empty() {
        return Err(Error::Core(pfr_core::Error::EmptyReferences));
    }
    let id = a.refs.file_name().and_then(|n| n.to_str()).unwrap_or("identity").to_string();
    let refs = ReferenceSet::new(id, choose_references(&all_refs, cfg.personalize.n_ref, cfg.seed))?;
    let train_images = match &a.train {
        Some(dir) => io::read_images(dir)?,
        None => refs.images().to_vec(),
    };
    let sched = NoiseSchedule::default();
    let pcfg = cfg.personalize();
    let (state, logs) = train::personalize(&model, &refs, &train_images, &pcfg, &sched, |l| {
        if (l.step + 1) % 50 == 0 || l.step + 1 == pcfg.iterations {
            eprintln!(
                "iter {}/{}  l_diff {:.5}  l_gen {:.5}  l_pers {:.5}",
                l.step + 1,
                pcfg.iterations,
                l.l_diff,
                l.l_gen,
                l.l_pers
            );
        }
    })?;
    let digest = archive::model_digest(&model);
    let mut ar = archive::state_archive(&model, &state, &digest);
    let base_path = fs::canonicalize(&a.base).map_err(|e| Error::io(&a.base, e))?;
    ar.metadata.insert("base.path".into(), base_path.display().to_string());
    ar.save(&a.out)?;
    let log = log_path(&a.out);
    write_log(&log, &logs)?;
    manifest::write(&a.out, "personalize", argv, &cfg, &[a.out.clone(), log])?;
    println!("personalized {} iterations; state in {}", pcfg.iterations, a.out.display());
    Ok(())
}

fn restore_one(
    model: &Denoiser<f32>,
    state: Option<&PersonalizationState<f32>>,
    lq: &ImageBuffer,
    cfg: &RunConfig,
    upscale: usize,
) -> Result<ImageBuffer> {
    let sampler = cfg.sampler()?;
    let sched = NoiseSchedule::default();
    let f = pfr_core::latent::DEFAULT_FACTOR;
    let (tile, overlap) = (cfg.tile / f, cfg.overlap / f);
    if upscale > 1 {
        return Ok(tiling::restore_upscaled(model, lq, upscale, state, &sampler, tile, overlap, &sched)?);
    }
    let plan = tiling::plan_tiles(lq.height() / f, lq.width() / f, tile, overlap)?;
    Ok(tiling::restore_tiled(model, lq, state, &sampler, &plan, &sched)?)
}

fn restore(a: Restore, mut cfg: RunConfig, argv: &[String]) -> Result<()> {
    if let Some(v) = a.tile {
        cfg.tile = v;
    }
    if let Some(v) = a.overlap {
        cfg.overlap = v;
    }
    cfg.sampler_cfg = a.cfg.unwrap_or(cfg.sampler_cfg);
    cfg.sampler_steps = a.steps.unwrap_or(cfg.sampler_steps);
    cfg.sampler_lambda_att = a.lambda_att.unwrap_or(cfg.sampler_lambda_att);
    if a.upscale == 0 {
        return Err(Error::Usage("--upscale must be at least 1".into()));
    }
    if cfg.tile < 2 || cfg.overlap >= cfg.tile {
        return Err(Error::Usage("tile must be at least 2 pixels and larger than the overlap".into()));
    }
    let base_path = match (&a.base, &a.state) {
        (Some(b), _) => b.clone(),
        (None, Some(s)) => {
            let ar = archive::Archive::load(s)?;
            PathBuf::from(ar.metadata.get("base.path").ok_or_else(|| {
                Error::Usage(format!("{} does not record its base weights; pass --base", s.display()))
            })?)
        }
        (None, None) => unreachable!("clap requires --base without --state"),
    };
    let model = archive::load_model(&base_path)?;
    cfg.model = model.config().clone();
    let state = a.state.as_deref().map(|p| archive::load_state(p, &model)).transpose()?;

    let outputs = if a.input.is_dir() {
        let files = io::list_images_recursive(&a.input)?;
        create_dir(&a.out)?;
        let results = parallel::map(&files, cfg.jobs, |_, rel| -> Result<PathBuf> {
            let lq = io::read_image(&a.input.join(rel))?;
            let out = a.out.join(rel).with_extension("png");
            io::write_png(&out, &restore_one(&model, state.as_ref(), &lq, &cfg, a.upscale)?)?;
            Ok(out)
        });
        results.into_iter().collect::<Result<Vec<_>>>()?
    } else {
        let lq = io::read_image(&a.input)?;
        io::write_png(&a.out, &restore_one(&model, state.as_ref(), &lq, &cfg, a.upscale)?)?;
        vec![a.out.clone()]
    };
    manifest::write(&a.out, "restore", argv, &cfg, &outputs)?;
    println!("restored {} image(s) into {}", outputs.len(), a.out.display());
    Ok(())
}

fn evaluate(a: Evaluate, cfg: RunConfig, argv: &[String]) -> Result<()> {
    let files = io::list_images_recursive(&a.restored)?;
    if files.is_empty() {
        return Err(Error::Usage(format!("no images in {}", a.restored.display())));
    }
    let gt_for = |rel: &Path| -> Result<PathBuf> {
        let exact = a.gt.join(rel);
        if exact.is_file() {
            return Ok(exact);
        }
        ["png", "jpg", "jpeg"]
            .iter()
            .map(|e| a.gt.join(rel).with_extension(e))
            .find(|p| p.is_file())
            .ok_or_else(|| Error::Usage(format!("no ground truth for {}", rel.display())))
    };
    let pairs = parallel::map(&files, cfg.jobs, |_, rel| -> Result<(String, ImageBuffer, ImageBuffer)> {
        Ok((rel.display().to_string(), io::read_image(&a.restored.join(rel))?, io::read_image(&gt_for(rel)?)?))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let rows = parallel::map(&pairs, cfg.jobs, |_, (name, restored, gt)| {
        let pair = EvalPair { name: name.clone(), restored, ground_truth: gt };
        metrics::evaluate_dataset(std::slice::from_ref(&pair), &FaceOracle, &FaceOracle).map(|r| r.rows)
    });
    let rows: Vec<_> = rows.into_iter().collect::<pfr_core::Result<Vec<_>>>()?.into_iter().flatten().collect();
    let n = rows.len() as f64;
    let mean = metrics::MetricsRow {
        name: "mean".into(),
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        lmse: rows.iter().map(|r| r.lmse).sum::<f64>() / n,
        id_percent: rows.iter().map(|r| r.id_percent).sum::<f64>() / n,
    };
    let rep = metrics::MetricsReport { rows, mean };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    report::write_csv(&a.out, &rep)?;
    manifest::write(&a.out, "evaluate", argv, &cfg, std::slice::from_ref(&a.out))?;
    print!("{}", report::table(&rep));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_choice_is_seeded_and_distinct() {
        let imgs: Vec<ImageBuffer> =
            (0..9).map(|i| ImageBuffer::filled(2, 2, [i as f32 / 10.0; 3]).unwrap()).collect();
        let a = choose_references(&imgs, 5, 3);
        assert_eq!(a, choose_references(&imgs, 5, 3));
        assert_eq!(a.len(), 5);
        for (i, x) in a.iter().enumerate() {
            assert!(!a[..i].contains(x));
        }
        assert_eq!(choose_references(&imgs[..2], 5, 3).len(), 2);
    }
}
