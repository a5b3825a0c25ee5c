//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! The process fails when a contract check (1-6, 9, 10) fails. The two
//! directional quality checks (7, 8) are reported; set
//! `PFR_ACCEPTANCE_STRICT=1` to make their failures fatal as well.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use pfr::archive::{self, sha256_hex};
use pfr_core::data;
use pfr_core::degradation::{self, DegradationRecord, Level};
use pfr_core::denoiser::{Denoiser, PersonalizationState, PromptTokens, Session};
use pfr_core::diffusion::{self, NoiseSchedule, SamplerConfig};
use pfr_core::metrics::{self, FaceOracle, LMSE_CAP};
use pfr_core::rng::{self, streams};
use pfr_core::tensor::Tensor;
use pfr_core::tiling::{self, plan_tiles};
use pfr_core::train::{self, PersonalizeConfig};
use pfr_core::{face, latent, ImageBuffer, LatentCode};

const SEED: u64 = 2024;
const EVAL_SEED: u64 = 777;
const EVAL_IDS: usize = 5;
const N_REFS: usize = 5;
const PIPELINE_BUDGET: Duration = Duration::from_secs(30 * 60);
/// Sampler steps for the bit-equality checks; the contracts hold per step.
const CHECK_STEPS: usize = 10;

struct Outcome {
    id: usize,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn report(id: usize, pass: bool, detail: String, started: Instant) -> Outcome {
    let o = Outcome { id, pass, detail, elapsed: started.elapsed() };
    println!("{}", line(&o));
    o
}

fn line(o: &Outcome) -> String {
    format!(
        "criterion {:>2}: {}  {}  [{:.1}s]",
        o.id,
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        o.elapsed.as_secs_f64()
    )
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn pfr(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_pfr")).args(args).output().expect("pfr runs");
    assert!(
        out.status.success(),
        "pfr {args:?} failed\nstderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn file_digest(p: &Path) -> String {
    sha256_hex(&std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display())))
}

fn id_name(k: usize) -> String {
    format!("id{k:03}")
}

fn copy(from: &Path, to: &Path) {
    std::fs::create_dir_all(to.parent().unwrap()).unwrap();
    std::fs::copy(from, to).unwrap();
}

/// Rows of an evaluation CSV as (name, lmse, id_percent).
fn read_report(path: &Path) -> Vec<(String, f64, f64)> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[0].to_string(), rec[3].parse().unwrap(), rec[4].parse().unwrap())
        })
        .collect()
}

fn mean_row(rows: &[(String, f64, f64)]) -> (f64, f64) {
    let m = rows.iter().find(|r| r.0 == "mean").expect("mean row");
    (m.1, m.2)
}

/// Outputs of one run of the restoration pipeline.
struct Pipeline {
    dir: PathBuf,
    elapsed: Duration,
    base_before: String,
    base_after: String,
    state_base_digests: Vec<String>,
    base_report: PathBuf,
    pers_report: PathBuf,
}

impl Pipeline {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }
}

/// Synthetic data, heavy degradation, base training, five personalizations,
/// restoration with and without the state, evaluation.
fn run_pipeline(dir: &Path) -> Pipeline {
    let started = Instant::now();
    let p = |rel: &str| dir.join(rel);
    let seed = SEED.to_string();
    let eval_seed = EVAL_SEED.to_string();
    pfr(&["--seed", &seed, "make-toy-data", "--out", s(&p("train"))]);
    let images = (N_REFS + 1).to_string();
    let ids = EVAL_IDS.to_string();
    pfr(&["--seed", &eval_seed, "make-toy-data", "--out", s(&p("eval")), "--identities", &ids, "--images", &images]);
    for k in 0..EVAL_IDS {
        let id = id_name(k);
        for i in 0..N_REFS {
            copy(&p(&format!("eval/{id}/{i}.png")), &p(&format!("refs/{id}/{i}.png")));
        }
        copy(&p(&format!("eval/{id}/{N_REFS}.png")), &p(&format!("gt/{id}/{N_REFS}.png")));
    }
    pfr(&["--seed", &seed, "degrade", "--in", s(&p("gt")), "--out", s(&p("lq")), "--level", "heavy"]);
    pfr(&["--seed", &seed, "train-base", "--data", s(&p("train")), "--out", s(&p("base.pfrw"))]);
    let base_before = file_digest(&p("base.pfrw"));
    let mut state_base_digests = Vec::new();
    for k in 0..EVAL_IDS {
        let id = id_name(k);
        let state = p(&format!("states/{id}.pfrw"));
        std::fs::create_dir_all(state.parent().unwrap()).unwrap();
        pfr(&["--seed", &seed, "personalize", "--base", s(&p("base.pfrw")), "--refs", s(&p(&format!("refs/{id}"))), "--out", s(&state)]);
        let ar = archive::Archive::load(&state).unwrap();
        state_base_digests.push(ar.metadata.get("base.sha256").cloned().unwrap_or_default());
    }
    let base_after = file_digest(&p("base.pfrw"));
    pfr(&["--seed", &seed, "restore", "--base", s(&p("base.pfrw")), "--in", s(&p("lq")), "--out", s(&p("restored/base"))]);
    for k in 0..EVAL_IDS {
        let id = id_name(k);
        pfr(&[
            "--seed",
            &seed,
            "restore",
            "--state",
            s(&p(&format!("states/{id}.pfrw"))),
            "--in",
            s(&p(&format!("lq/{id}"))),
            "--out",
            s(&p(&format!("restored/pers/{id}"))),
        ]);
    }
    let base_report = p("reports/base.csv");
    let pers_report = p("reports/pers.csv");
    pfr(&["evaluate", "--restored", s(&p("restored/base")), "--gt", s(&p("gt")), "--out", s(&base_report)]);
    pfr(&["evaluate", "--restored", s(&p("restored/pers")), "--gt", s(&p("gt")), "--out", s(&pers_report)]);
    Pipeline {
        dir: dir.to_path_buf(),
        elapsed: started.elapsed(),
        base_before,
        base_after,
        state_base_digests,
        base_report,
        pers_report,
    }
}

fn eval_face(k: usize, image: usize) -> ImageBuffer {
    let params = data::synthetic_params(EVAL_SEED, k);
    face::generate_face(&params, 64, data::synthetic_render_seed(EVAL_SEED, k, image)).unwrap()
}

/// A heavy record with both light passes at `r = 10`, `delta = 15`.
fn extreme_record(seed: u64) -> DegradationRecord {
    let mut r = rng::stream(seed, streams::DEGRADATION);
    let mut rec = degradation::sample_degradation_with(Level::Heavy, 0.0, &mut r);
    let mut second = rec.second_pass.unwrap_or(rec.first);
    for pass in [&mut rec.first, &mut second] {
        pass.downsample = true;
        pass.down_factor = 10.0;
        pass.noise = true;
        pass.noise_std = 15.0;
    }
    rec.second_pass = Some(second);
    rec
}

// ---------------------------------------------------------------- criteria

fn criterion_1(model: &Denoiser<f32>) -> Outcome {
    let started = Instant::now();
    let sched = NoiseSchedule::default();
    let sampler = SamplerConfig { num_steps: CHECK_STEPS, seed: 11, ..Default::default() };
    let pcfg = PersonalizeConfig { iterations: 0, seed: 5, ..Default::default() };
    let mut r = rng::stream(SEED, 100);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let k = data::sample_index(1000, &mut r);
        let params = data::synthetic_params(SEED + 1, k);
        let imgs: Vec<ImageBuffer> =
            (0..N_REFS + 1).map(|j| face::generate_face(&params, 64, data::synthetic_render_seed(SEED + 1, k, j)).unwrap()).collect();
        let rec = degradation::sample_degradation(Level::Heavy, &mut r);
        let lq = degradation::degrade(&imgs[N_REFS], &rec).unwrap();
        let refs = data::ReferenceSet::new(format!("r{i}"), imgs[..N_REFS].to_vec()).unwrap();
        let (ps, _) = train::personalize(model, &refs, refs.images(), &pcfg, &sched, |_| {}).unwrap();
        let cfg = SamplerConfig { seed: 11 + i, ..sampler.clone() };
        let base = diffusion::sample(model, &lq, None, &cfg, &sched).unwrap();
        let pers = diffusion::sample(model, &lq, Some(&ps), &cfg, &sched).unwrap();
        worst = worst.max(f64::from(base.max_abs_diff(&pers)));
    }
    let fast = started.elapsed() < Duration::from_secs(60);
    report(1, worst <= 1e-6 && fast, format!("max |pers0 - base| = {worst:.3e} (<= 1e-6) on 20 inputs, runtime < 60s: {fast}"), started)
}

fn criterion_2(p: &Pipeline, model: &Denoiser<f32>) -> Outcome {
    let started = Instant::now();
    let loaded = archive::model_digest(model);
    let same_file = p.base_before == p.base_after;
    let recorded = p.state_base_digests.iter().all(|d| *d == p.base_before);
    let pass = same_file && recorded && loaded == p.base_before;
    report(
        2,
        pass,
        format!(
            "base sha256 {}.. before == after {EVAL_IDS} x 500-iteration personalizations: {same_file}; states record it: {recorded}; reloaded weights hash equal: {}",
            &p.base_before[..16],
            loaded == p.base_before
        ),
        started,
    )
}

enum Loss {
    Diff,
    Gen,
    Pers,
}

fn criterion_3(model32: &Denoiser<f32>, state32: &PersonalizationState<f32>) -> Outcome {
    let started = Instant::now();
    let model: Denoiser<f64> = model32.cast();
    let mut ps: PersonalizationState<f64> = state32.cast();
    let sched = NoiseSchedule::default();
    let prompt = PromptTokens::positive();
    let mut r = rng::stream(SEED, 300);
    let gt = eval_face(0, N_REFS);
    let rec = degradation::sample_degradation_with(Level::Heavy, 0.0, &mut r);
    let lq = degradation::degrade(&gt, &rec).unwrap();
    let z0 = latent::encode(&gt).unwrap();
    let (h, w, c) = z0.shape();
    let t = 350;
    let eps = diffusion::normal_latent(&mut r, h, w, c);
    let ref_eps = diffusion::normal_latent(&mut r, h, w, c);
    let rf = model.extract_reference_features(&ps.references()[0], t, &ref_eps, &sched).unwrap();
    let loss = |s: &mut Session<'_, f64>, which: &Loss| match which {
        Loss::Diff => diffusion::diffusion_loss_graph(s, &sched, &z0, t, &eps, &prompt, Some(&lq), Some(&rf), 1.0).unwrap(),
        Loss::Gen => diffusion::diffusion_loss_graph(s, &sched, &z0, t, &eps, &prompt, None, Some(&rf), 1.0).unwrap(),
        Loss::Pers => s.pers_loss(&rf, &prompt).unwrap(),
    };
    let mut summary = String::new();
    let mut pass = true;
    for (name, which) in [("L_Diff", Loss::Diff), ("L_Gen", Loss::Gen), ("L_Pers", Loss::Pers)] {
        let grads: Vec<Option<Tensor<f64>>> = {
            let mut sess = Session::new(&model, Some(&ps), false, true);
            let l = loss(&mut sess, &which);
            sess.backward(l);
            sess.pers_grads().into_iter().map(|g| g.cloned()).collect()
        };
        let candidates: Vec<usize> = (0..grads.len()).filter(|&i| grads[i].is_some()).collect();
        let (mut ok, mut worst) = (0usize, 0.0f64);
        let checks = 50;
        for _ in 0..checks {
            let pi = candidates[data::sample_index(candidates.len(), &mut r)];
            let g = grads[pi].as_ref().unwrap();
            let k = data::sample_index(g.len(), &mut r);
            let hstep = 1e-5;
            let orig = ps.params().get(pi).data()[k];
            let mut value = |v: f64| {
                ps.params_mut().get_mut(pi).data_mut()[k] = v;
                let mut sess = Session::new(&model, Some(&ps), false, false);
                let l = loss(&mut sess, &which);
                sess.graph.scalar(l)
            };
            let fd = (value(orig + hstep) - value(orig - hstep)) / (2.0 * hstep);
            ps.params_mut().get_mut(pi).data_mut()[k] = orig;
            let an = g.data()[k];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            worst = worst.max(rel);
            ok += usize::from(rel <= 1e-3);
        }
        pass &= ok == checks;
        let _ = write!(summary, "{name} {ok}/{checks} (max rel {worst:.1e}); ");
    }
    let fast = started.elapsed() < Duration::from_secs(300);
    report(3, pass && fast, format!("{summary}tolerance 1e-3 relative, f64, runtime < 300s: {fast}"), started)
}

/// DDPM loop with one prompt-conditioned prediction per step, on the same
/// random streams as the library sampler.
fn single_branch(model: &Denoiser<f32>, ps: &PersonalizationState<f32>, lq: &ImageBuffer, prompt: &PromptTokens, seed: u64) -> ImageBuffer {
    let sched = NoiseSchedule::default();
    let (h, w, c) = latent::encode(lq).unwrap().shape();
    let mut noise = rng::stream(seed, streams::SAMPLER);
    let mut refs = rng::stream(seed, streams::SAMPLER_REFERENCE);
    let ts = sched.timesteps(CHECK_STEPS).unwrap();
    let mut z = diffusion::normal_latent(&mut noise, h, w, c);
    for (i, &t) in ts.iter().enumerate() {
        let rf = diffusion::sampled_reference_features(model, ps, &sched, lq.dims(), t, &mut refs).unwrap();
        let eps: LatentCode = model.forward(&z.cast(), t, prompt, Some(lq), Some(&rf), Some(ps), 1.0).unwrap().cast();
        let prev = ts.get(i + 1).copied();
        let n = match prev {
            Some(_) => diffusion::normal_latent(&mut noise, h, w, c),
            None => LatentCode::zeros(h, w, c),
        };
        z = sched.step(&z, &eps, t, prev, &n);
    }
    latent::decode(&z).unwrap()
}

fn criterion_4(model: &Denoiser<f32>, ps: &PersonalizationState<f32>, lq: &ImageBuffer) -> Outcome {
    let started = Instant::now();
    let sched = NoiseSchedule::default();
    let base = SamplerConfig { num_steps: CHECK_STEPS, seed: 41, ..Default::default() };
    let one = diffusion::sample(model, lq, Some(ps), &SamplerConfig { lambda_cfg: 1.0, ..base.clone() }, &sched).unwrap();
    let zero = diffusion::sample(model, lq, Some(ps), &SamplerConfig { lambda_cfg: 0.0, ..base.clone() }, &sched).unwrap();
    let pos = single_branch(model, ps, lq, &base.positive, 41);
    let neg = single_branch(model, ps, lq, &base.negative, 41);
    let (a, b) = (one == pos, zero == neg);
    report(4, a && b, format!("lambda_cfg = 1 == positive-only: {a}; lambda_cfg = 0 == negative-only: {b} (bit-exact)"), started)
}

fn criterion_5() -> Outcome {
    let started = Instant::now();
    let n = 100_000;
    let mut r = rng::stream(SEED, 500);
    let (mut passes, mut noise, mut down) = (0usize, 0usize, 0usize);
    let (mut isp, mut motion, mut median, mut second, mut hq) = (0usize, 0usize, 0usize, 0usize, 0usize);
    let mut in_range = true;
    for _ in 0..n {
        let rec = degradation::sample_degradation(Level::Heavy, &mut r);
        in_range &= rec.validate().is_ok();
        for p in std::iter::once(&rec.first).chain(rec.second_pass.as_ref()) {
            passes += 1;
            noise += usize::from(p.noise);
            down += usize::from(p.downsample);
            in_range &= (0.1..=10.0).contains(&p.sigma)
                && (1.0..=10.0).contains(&p.down_factor)
                && (0.0..=15.0).contains(&p.noise_std)
                && (30..=100).contains(&p.jpeg_quality);
        }
        isp += usize::from(rec.isp.is_some());
        if let Some(m) = rec.motion {
            motion += 1;
            in_range &= (3..=15).contains(&m.length) && (0.0..std::f64::consts::PI).contains(&m.angle);
        }
        if let Some(k) = rec.median {
            median += 1;
            in_range &= [3, 5, 7].contains(&k);
        }
        second += usize::from(rec.second_pass.is_some());
        hq += usize::from(rec.passthrough_hq);
        in_range &= rec.sinc.is_some_and(|s| s.kernel_size % 2 == 1 && (7..=21).contains(&s.kernel_size));
    }
    let freqs = [
        ("noise", noise as f64 / passes as f64, 0.4),
        ("downsample", down as f64 / passes as f64, 0.7),
        ("isp", isp as f64 / n as f64, 0.5),
        ("motion", motion as f64 / n as f64, 0.05),
        ("median", median as f64 / n as f64, 0.1),
        ("second pass", second as f64 / n as f64, 0.9),
        ("pass-through", hq as f64 / n as f64, 0.03),
    ];
    let mut detail = String::new();
    let mut pass = in_range;
    for (name, f, want) in freqs {
        pass &= (f - want).abs() <= 0.01;
        let _ = write!(detail, "{name} {f:.4}/{want}; ");
    }
    let fast = started.elapsed() < Duration::from_secs(60);
    report(5, pass && fast, format!("{detail}tolerance 0.01; parameters in range: {in_range}; runtime < 60s: {fast}"), started)
}

fn criterion_6(model: &Denoiser<f32>, ps: &PersonalizationState<f32>) -> Outcome {
    let started = Instant::now();
    let sched = NoiseSchedule::default();
    let cfg = SamplerConfig { num_steps: CHECK_STEPS, seed: 61, ..Default::default() };
    let mut identical = true;
    let mut cases = 0;
    for (size, tile) in [(64, 32), (48, 32), (32, 24)] {
        let lq = eval_face(1, 0).resize_bilinear(size, size).unwrap();
        let plan = plan_tiles(size / 2, size / 2, tile, tile / 2).unwrap();
        for state in [None, Some(ps)] {
            let plain = diffusion::sample(model, &lq, state, &cfg, &sched).unwrap();
            let tiled = tiling::restore_tiled(model, &lq, state, &cfg, &plan, &sched).unwrap();
            identical &= plain == tiled;
            cases += 1;
        }
    }
    let mut r = rng::stream(SEED, 600);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let tile = 2 + data::sample_index(62, &mut r);
        let overlap = data::sample_index(tile, &mut r);
        let (h, w) = (1 + data::sample_index(160, &mut r), 1 + data::sample_index(160, &mut r));
        let plan = plan_tiles(h, w, tile, overlap).unwrap();
        worst = plan.weight_sums().iter().fold(worst, |m, s| m.max((s - 1.0).abs()));
    }
    report(
        6,
        identical && worst <= 1e-6,
        format!("tiled == untiled on {cases} single-tile cases: {identical}; max |sum w - 1| over 100 plans = {worst:.2e} (<= 1e-6)"),
        started,
    )
}

fn criterion_7(p: &Pipeline) -> Outcome {
    let started = Instant::now();
    let (base_lmse, base_id) = mean_row(&read_report(&p.base_report));
    let (pers_lmse, pers_id) = mean_row(&read_report(&p.pers_report));
    let gain = pers_id - base_id;
    let in_budget = p.elapsed <= PIPELINE_BUDGET;
    let pass = gain >= 5.0 && pers_lmse <= base_lmse && in_budget;
    let o = Outcome {
        id: 7,
        pass,
        detail: format!(
            "ID pers {pers_id:.2} - base {base_id:.2} = {gain:+.2} pp (>= 5); LMSE pers {pers_lmse:.2} <= base {base_lmse:.2}: {}; pipeline {:.0}s (<= 1800s)",
            pers_lmse <= base_lmse,
            p.elapsed.as_secs_f64()
        ),
        elapsed: p.elapsed + started.elapsed(),
    };
    println!("{}", line(&o));
    o
}

fn criterion_8(p: &Pipeline) -> Outcome {
    let started = Instant::now();
    let d = |rel: &str| p.path(rel);
    let seed = SEED.to_string();
    for k in 0..EVAL_IDS {
        let id = id_name(k);
        let gt = pfr::io::read_image(&d(&format!("gt/{id}/{N_REFS}.png"))).unwrap();
        let lq = degradation::degrade(&gt, &extreme_record(rng::derive_seed(SEED, k as u64))).unwrap();
        pfr::io::write_png(&d(&format!("lq_extreme/{id}/{N_REFS}.png")), &lq).unwrap();
        let state0 = d(&format!("states_gen0/{id}.pfrw"));
        std::fs::create_dir_all(state0.parent().unwrap()).unwrap();
        pfr(&[
            "--seed",
            &seed,
            "personalize",
            "--base",
            s(&d("base.pfrw")),
            "--refs",
            s(&d(&format!("refs/{id}"))),
            "--out",
            s(&state0),
            "--lambda-gen",
            "0",
        ]);
        for (states, out) in [("states", "extreme/gen01"), ("states_gen0", "extreme/gen0")] {
            pfr(&[
                "--seed",
                &seed,
                "restore",
                "--state",
                s(&d(&format!("{states}/{id}.pfrw"))),
                "--in",
                s(&d(&format!("lq_extreme/{id}"))),
                "--out",
                s(&d(&format!("{out}/{id}"))),
            ]);
        }
    }
    let mut rows = Vec::new();
    for out in ["gen01", "gen0"] {
        let csv = d(&format!("reports/extreme_{out}.csv"));
        pfr(&["evaluate", "--restored", s(&d(&format!("extreme/{out}"))), "--gt", s(&d("gt")), "--out", s(&csv)]);
        rows.push(read_report(&csv));
    }
    let mut wins = 0;
    let mut per_id = String::new();
    for (a, b) in rows[0].iter().zip(&rows[1]).filter(|(a, _)| a.0 != "mean") {
        assert_eq!(a.0, b.0);
        wins += usize::from(a.2 > b.2);
        let _ = write!(per_id, "{:.1}/{:.1} ", a.2, b.2);
    }
    report(8, wins >= 4, format!("lambda_Gen 0.1 beats 0 on r=10, delta=15 in {wins}/5 identities (>= 4); ID {per_id}"), started)
}

fn criterion_9() -> Outcome {
    let started = Instant::now();
    let zero = ImageBuffer::filled(32, 32, [0.0; 3]).unwrap();
    let half = ImageBuffer::filled(32, 32, [0.5; 3]).unwrap();
    let psnr = metrics::psnr(&zero, &half, 1.0).unwrap();
    let x = eval_face(2, 0);
    let ssim = metrics::ssim(&x, &x).unwrap();
    let flat = ImageBuffer::filled(64, 64, [0.5; 3]).unwrap();
    let lmse = metrics::lmse(&flat, &x, &FaceOracle);
    let id = metrics::id_cosine(&x, &x, &FaceOracle);
    let pass = (psnr - 6.0206).abs() <= 1e-3 && (ssim - 1.0).abs() <= 1e-12 && lmse == LMSE_CAP && (id - 100.0).abs() <= 1e-9;
    report(9, pass, format!("psnr(0, 0.5) = {psnr:.4} dB; ssim(x, x) = {ssim}; lmse(no face) = {lmse}; id_cosine(x, x) = {id}"), started)
}

fn criterion_10(first: &Pipeline, second: &Pipeline) -> Outcome {
    let started = Instant::now();
    let mut same = true;
    let mut detail = String::new();
    for (name, a, b) in [("base.csv", &first.base_report, &second.base_report), ("pers.csv", &first.pers_report, &second.pers_report)] {
        let (ha, hb) = (file_digest(a), file_digest(b));
        same &= ha == hb;
        let _ = write!(detail, "{name} {}.. vs {}..; ", &ha[..16], &hb[..16]);
    }
    let o = Outcome { id: 10, pass: same, detail: format!("{detail}identical: {same}"), elapsed: second.elapsed + started.elapsed() };
    println!("{}", line(&o));
    o
}

/// Mean |gamma| per site over the five states, finest site first.
fn print_gain_profile(p: &Pipeline, model: &Denoiser<f32>) {
    let mut sums: Vec<(String, f64)> = Vec::new();
    for k in 0..EVAL_IDS {
        let st = archive::load_state(&p.path(&format!("states/{}.pfrw", id_name(k))), model).unwrap();
        for (i, (site, g)) in st.gains().iter().enumerate() {
            let m = g.data().iter().map(|v| f64::from(v.abs())).sum::<f64>() / g.len() as f64 / EVAL_IDS as f64;
            match sums.get_mut(i) {
                Some(e) => e.1 += m,
                None => sums.push((site.name(), m)),
            }
        }
    }
    let (finest, coarsest) = (sums[0].1, sums.iter().map(|s| s.1).fold(0.0, f64::max));
    let profile: Vec<String> = sums.iter().map(|(n, m)| format!("{n} {m:.4}")).collect();
    println!(
        "gain profile after 500 iterations: {}; nonzero: {}; largest at a coarser site than the finest: {}",
        profile.join(", "),
        finest > 0.0,
        coarsest > finest
    );
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        // test discovery by `cargo test -- --list`
        return;
    }
    let strict = std::env::var("PFR_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut outcomes = vec![criterion_5(), criterion_9()];

    let first_dir = tempfile::tempdir().unwrap();
    let first = run_pipeline(first_dir.path());
    let model = archive::load_model(&first.path("base.pfrw")).unwrap();
    let state = archive::load_state(&first.path("states/id000.pfrw"), &model).unwrap();
    let lq = pfr::io::read_image(&first.path(&format!("lq/id000/{N_REFS}.png"))).unwrap();
    outcomes.push(criterion_7(&first));
    print_gain_profile(&first, &model);
    outcomes.push(criterion_2(&first, &model));
    outcomes.push(criterion_1(&model));
    outcomes.push(criterion_3(&model, &state));
    outcomes.push(criterion_4(&model, &state, &lq));
    outcomes.push(criterion_6(&model, &state));
    outcomes.push(criterion_8(&first));

    let second_dir = tempfile::tempdir().unwrap();
    let second = run_pipeline(second_dir.path());
    outcomes.push(criterion_10(&first, &second));

    outcomes.sort_by_key(|o| o.id);
    println!("\nacceptance summary");
    for o in &outcomes {
        println!("{}", line(o));
    }
    let fatal: Vec<usize> = outcomes.iter().filter(|o| !o.pass && (strict || !matches!(o.id, 7 | 8))).map(|o| o.id).collect();
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!("{} of {} criteria pass", outcomes.len() - failed, outcomes.len());
    if !fatal.is_empty() {
        eprintln!("contract criteria failed: {fatal:?}");
        std::process::exit(1);
    }
}
