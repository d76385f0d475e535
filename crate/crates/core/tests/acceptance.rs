//! End-to-end acceptance suite. Runs every criterion, prints one PASS/FAIL
//! line per criterion and exits non-zero if any failed.
//!
//! The desk-scale training run (20k steps on the 500-sequence corpus) is
//! cached under the cargo target tmpdir, keyed by a hash of this test
//! executable, so it is only repeated when the code changes. Set
//! `XMODAL_ACCEPTANCE_RETRAIN=1` to force a fresh run.

mod common;

use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use common::{images, oracle};
use xmodal::eval::{evaluate_model, psnr, ssim, EvalOptions, PSNR_CAP_DB};
use xmodal::gaussian::{kl_divergence, DiagonalGaussian};
use xmodal::model::{
    elbo_loss, generate, generate_with_noise, reconstruct, FrameStream, ModelConfig, ModelParams, NoiseSource, PARAM_GROUPS,
};
use xmodal::synth::{
    generate_corpus, lift_seed, load_corpus, synth_sequence, AudioLift, Corpus, CorpusSpec, Dataset, RegionMasks,
    SequenceSeeds,
};
use xmodal::train::{
    checkpoint_path, encode_checkpoint, finite_difference_gradcheck, load_checkpoint, tiny_fixture, train_with,
    Checkpoint, GradcheckOptions, TrainConfig, TrainOptions, TrainReport,
};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Model used for every desk-scale run: corpus-sized frames with the
/// default widths and `beta = 1`.
fn desk_model(spec: &CorpusSpec) -> ModelConfig {
    let mut c = ModelConfig::for_frames(spec.height, spec.width, 1, spec.audio_dim);
    c.beta = 1.0;
    c
}

fn work_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

// 1 ----------------------------------------------------------------------

fn random_gaussian(rng: &mut ChaCha8Rng, d: usize) -> DiagonalGaussian {
    let mean = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let log_var = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    DiagonalGaussian::new(mean, log_var).unwrap()
}

fn log_density(x: &[f64], g: &DiagonalGaussian) -> f64 {
    x.iter()
        .zip(g.mean())
        .zip(g.log_var())
        .map(|((x, m), lv)| -0.5 * ((2.0 * std::f64::consts::PI).ln() + lv + (x - m).powi(2) / lv.exp()))
        .sum()
}

fn kl_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let draws = 100_000;
    let mut worst_z: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.random_range(1..=4);
        let q = random_gaussian(&mut rng, d);
        let p = random_gaussian(&mut rng, d);
        let closed = kl_divergence(&q, &p).unwrap();
        let (mut sum, mut sq) = (0.0, 0.0);
        let mut x = vec![0.0; d];
        for _ in 0..draws {
            for (i, xi) in x.iter_mut().enumerate() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *xi = q.mean()[i] + (0.5 * q.log_var()[i]).exp() * e;
            }
            let v = log_density(&x, &q) - log_density(&x, &p);
            sum += v;
            sq += v * v;
        }
        let n = draws as f64;
        let mean = sum / n;
        let se = ((sq / n - mean * mean).max(0.0) / n).sqrt();
        worst_z = worst_z.max((closed - mean).abs() / se);
    }
    let mut negative = 0;
    for _ in 0..10_000 {
        let d = rng.random_range(1..=8);
        let q = random_gaussian(&mut rng, d);
        let p = random_gaussian(&mut rng, d);
        if kl_divergence(&q, &p).unwrap() < 0.0 {
            negative += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst_z < 3.0 && negative == 0 && secs < 30.0,
        format!("max |closed - MC| = {worst_z:.2} SE over 100 pairs, {negative} negative of 10^4, {secs:.1}s"),
    )
}

// 2 ----------------------------------------------------------------------

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let (config, frames, audio) = tiny_fixture(0).unwrap();
    let mut lines = Vec::new();
    let mut ok = true;
    for opts in [
        GradcheckOptions { num_coordinates: 200, ..Default::default() },
        GradcheckOptions { num_coordinates: 200, epsilon: 1e-3, relative_floor: 0.0, seed: 1 },
    ] {
        let r = finite_difference_gradcheck(&config, &frames, &audio, &opts).unwrap();
        let groups = r.per_group();
        let covered = PARAM_GROUPS.iter().all(|g| groups.iter().any(|(name, _)| name == g));
        ok &= r.max_relative_error < 1e-4 && covered && r.coordinates.len() >= 200;
        lines.push(format!("eps {:.0e} floor {:.0e}: max rel err {:.2e} over {} coords", opts.epsilon, opts.relative_floor, r.max_relative_error, r.coordinates.len()));
    }
    let secs = start.elapsed().as_secs_f64();
    check(ok && secs < 300.0, format!("{}; all groups covered; {secs:.1}s", lines.join("; ")))
}

// 3 ----------------------------------------------------------------------

fn objective_oracle() -> Outcome {
    let start = Instant::now();
    let (mut config, frames, audio) = tiny_fixture(4).unwrap();
    config.beta = 0.5;
    let params = ModelParams::<f64>::init(&config, 4).unwrap();
    let eps = NoiseSource::new(9).standard_normal::<f64>(frames.len() * config.latent_dim);
    let want = oracle::objective(&params, &config, &frames, &audio, &eps);
    let got = elbo_loss(&frames, &audio, &params, &config, &mut NoiseSource::new(9)).unwrap();
    let mut err = (got.total - want.total).abs();
    for t in 0..frames.len() {
        err = err.max((got.recon_per_t[t] - want.recon_per_t[t]).abs()).max((got.kl_per_t[t] - want.kl_per_t[t]).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    check(err < 1e-10 && secs < 60.0, format!("max abs difference {err:.2e} (total {:.6}), {secs:.2}s", got.total))
}

// 4 ----------------------------------------------------------------------

fn overfit(spec: &CorpusSpec) -> Result<(f64, usize), String> {
    let lift = AudioLift::from_seed(lift_seed(spec.seed), spec.audio_dim).unwrap();
    let seq = synth_sequence(spec, SequenceSeeds::derive(spec.seed, 0), &lift).unwrap();
    let data = Dataset::new(vec![seq.clone()]);
    let config = desk_model(spec);
    let tc = TrainConfig { max_steps: 2000, eval_every: 0, ..TrainConfig::default() };
    let out = train_with(&config, &tc, &data, TrainOptions::default()).map_err(|e| e.to_string())?;
    let recon = reconstruct(&seq.frames, &seq.audio, &out.checkpoint.params, &config, &mut NoiseSource::new(1)).unwrap();
    let mse = recon.data().iter().zip(seq.frames.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / recon.data().len() as f64;
    Ok((mse, out.report.steps.len()))
}

fn overfit_oracle() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    let small = CorpusSpec { sequence_length: 8, height: 16, width: 16, ..CorpusSpec::default() };
    for spec in [CorpusSpec::default(), small] {
        let (mse, steps) = overfit(&spec)?;
        ok &= mse < 1e-3 && steps <= 2000;
        parts.push(format!("{}x{} T={}: MSE {mse:.2e} after {steps} steps", spec.height, spec.width, spec.sequence_length));
    }
    let secs = start.elapsed().as_secs_f64();
    check(ok && secs < 900.0, format!("{}, {secs:.0}s", parts.join("; ")))
}

// 5 ----------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DeskRun {
    key: u64,
    report: TrainReport,
}

struct Desk {
    corpus: Corpus,
    config: ModelConfig,
    checkpoint: Checkpoint,
    report: TrainReport,
}

fn executable_key() -> u64 {
    let bytes = std::fs::read(std::env::current_exe().unwrap()).unwrap();
    let mut h = std::collections::hash_map::DefaultHasher::new();
    bytes.hash(&mut h);
    h.finish()
}

fn desk_run() -> Desk {
    let dir = work_dir().join("desk");
    let corpus_dir = dir.join("corpus");
    let spec = CorpusSpec::default();
    let key = executable_key();
    let cache = dir.join("run.json");
    let retrain = std::env::var_os("XMODAL_ACCEPTANCE_RETRAIN").is_some();
    let cached = std::fs::read_to_string(&cache)
        .ok()
        .and_then(|s| serde_json::from_str::<DeskRun>(&s).ok())
        .filter(|r| r.key == key && !retrain);
    if cached.is_none() {
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        generate_corpus(&spec, &corpus_dir).unwrap();
    }
    let corpus = load_corpus(&corpus_dir).unwrap();
    let config = desk_model(&spec);
    if let Some(run) = cached {
        eprintln!("acceptance: reusing desk run from {}", dir.display());
        let checkpoint = load_checkpoint(&checkpoint_path(&dir)).unwrap();
        return Desk { corpus, config, checkpoint, report: run.report };
    }
    eprintln!("acceptance: training the desk model for 20k steps (about 15-20 minutes)");
    let tc = TrainConfig::default();
    let out = train_with(&config, &tc, &corpus.train, TrainOptions { validation: Some(&corpus.test), out_dir: Some(&dir), ..Default::default() })
        .unwrap();
    std::fs::write(&cache, serde_json::to_string(&DeskRun { key, report: out.report.clone() }).unwrap()).unwrap();
    Desk { corpus, config, checkpoint: out.checkpoint, report: out.report }
}

fn window_mean(values: &[f64], range: std::ops::Range<usize>) -> f64 {
    values[range.clone()].iter().sum::<f64>() / range.len() as f64
}

/// Mean squared reconstruction error over frames `2..T` on pixels that
/// never change in the ground truth, and on the mouth region.
fn skip_fidelity(desk: &Desk) -> (f64, f64) {
    let cfg = &desk.config;
    let masks = RegionMasks::new(cfg.height, cfg.width).unwrap();
    let (mut s_err, mut s_n, mut m_err, mut m_n) = (0.0, 0usize, 0.0, 0usize);
    for (i, seq) in desk.corpus.test.iter().enumerate() {
        let recon = reconstruct(&seq.frames, &seq.audio, &desk.checkpoint.params, cfg, &mut NoiseSource::new(i as u64)).unwrap();
        let t = seq.frames.len();
        for p in 0..cfg.frame_len() {
            let first = seq.frames.frame(0)[p];
            let is_static = (1..t).all(|k| seq.frames.frame(k)[p] == first);
            for k in 1..t {
                let e = ((recon.frame(k)[p] - seq.frames.frame(k)[p]) as f64).powi(2);
                if is_static {
                    s_err += e;
                    s_n += 1;
                }
                if masks.mouth[p] {
                    m_err += e;
                    m_n += 1;
                }
            }
        }
    }
    (s_err / s_n as f64, m_err / m_n as f64)
}

fn desk_training(desk: &Desk) -> Outcome {
    let opts = EvalOptions { num_sequences: Some(desk.corpus.test.len()), ..Default::default() };
    let trained = evaluate_model(&desk.checkpoint.params, &desk.config, &desk.corpus.test, &opts).unwrap();
    let untrained_params = ModelParams::<f32>::init(&desk.config, TrainConfig::default().rng_seed).unwrap();
    let untrained = evaluate_model(&untrained_params, &desk.config, &desk.corpus.test, &opts).unwrap();

    let v = &desk.report.validation;
    let (kl_init, kl_end) = (v[0].kl, v[v.len() - 1].kl);
    let totals = desk.report.totals();
    let n = totals.len();
    let (early, late) = (window_mean(&totals, 50..150), window_mean(&totals, n - 100..n));
    let (static_err, mouth_err) = skip_fidelity(desk);
    let ratio = static_err / mouth_err;

    let seq = desk.corpus.test.get(0).unwrap();
    let len = seq.frames.len() * desk.config.latent_dim;
    let pair = generate_with_noise(seq.frames.frame(0), &seq.audio, &desk.checkpoint.params, &desk.config, &[vec![-1.0f32; len], vec![1.0f32; len]])
        .unwrap();
    let z_gap = pair.samples[0].data().iter().zip(pair.samples[1].data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
    let secs = desk.report.wall_clock_secs;

    let parts = [
        (trained.ssim_mean >= 0.80, format!("SSIM {:.4} (target 0.85, floor 0.80)", trained.ssim_mean)),
        (kl_end < kl_init, format!("validation KL {kl_end:.3} vs {kl_init:.3} at init")),
        (late < 0.5 * early, format!("smoothed loss {late:.2} vs {early:.2} at step 100")),
        (trained.ssim_mean > untrained.ssim_mean, format!("untrained SSIM {:.4}", untrained.ssim_mean)),
        (ratio < 1.0, format!("static/mouth error ratio {ratio:.3}")),
        (z_gap > 0.0, format!("distinct-z L2 gap {z_gap:.3}")),
        (secs <= 7200.0, format!("{n} steps in {:.0} min", secs / 60.0)),
    ];
    let detail = parts.iter().map(|(_, s)| s.as_str()).collect::<Vec<_>>().join(", ");
    let below_target = if trained.ssim_mean < 0.85 { " [SSIM below 0.85 target, above floor]" } else { "" };
    check(parts.iter().all(|(ok, _)| *ok), format!("{detail}{below_target}"))
}

// 6 ----------------------------------------------------------------------

/// Cross-sample variance per pixel, averaged over frames `2..T` and the
/// pixels of `mask`.
fn sample_variance(samples: &[FrameStream], mask: &[bool]) -> f64 {
    let k = samples.len() as f64;
    let t = samples[0].len();
    let (mut total, mut n) = (0.0, 0usize);
    for step in 1..t {
        for (p, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            let vals: Vec<f64> = samples.iter().map(|s| s.frame(step)[p] as f64).collect();
            let mean = vals.iter().sum::<f64>() / k;
            total += vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k;
            n += 1;
        }
    }
    total / n as f64
}

/// Temporal variance per pixel of the ground truth over frames `2..T`,
/// averaged over `mask`.
fn motion_variance(truth: &FrameStream, mask: &[bool]) -> f64 {
    let t = (truth.len() - 1) as f64;
    let (mut total, mut n) = (0.0, 0usize);
    for (p, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let vals: Vec<f64> = (1..truth.len()).map(|s| truth.frame(s)[p] as f64).collect();
        let mean = vals.iter().sum::<f64>() / t;
        total += vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t;
        n += 1;
    }
    total / n as f64
}

fn diversity_reproduction(desk: &Desk) -> Outcome {
    let cfg = &desk.config;
    let masks = RegionMasks::new(cfg.height, cfg.width).unwrap();
    let (mut eye, mut mouth, mut bg, mut eye_gt, mut mouth_gt) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut min_div = f64::INFINITY;
    for i in 0..16 {
        let seq = desk.corpus.test.get(i).unwrap();
        let mut noise = NoiseSource::with_stream(0, i as u64);
        let out = generate(seq.frames.frame(0), &seq.audio, &desk.checkpoint.params, cfg, 5, &mut noise).unwrap();
        min_div = min_div.min(xmodal::eval::diversity_score(&out.samples).unwrap());
        eye += sample_variance(&out.samples, &masks.eyes);
        mouth += sample_variance(&out.samples, &masks.mouth);
        bg += sample_variance(&out.samples, &masks.background);
        eye_gt += motion_variance(&seq.frames, &masks.eyes);
        mouth_gt += motion_variance(&seq.frames, &masks.mouth);
    }
    let (eye_norm, mouth_norm) = (eye / eye_gt, mouth / mouth_gt);
    check(
        min_div > 0.0 && eye >= 2.0 * bg && eye_norm > mouth_norm,
        format!(
            "min diversity {min_div:.4}; eye/background variance {:.1}x; normalized eye {eye_norm:.4} vs mouth {mouth_norm:.4}",
            eye / bg
        ),
    )
}

// 7 ----------------------------------------------------------------------

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn causality_and_determinism(desk: &Desk) -> Outcome {
    let cfg = &desk.config;
    let params = &desk.checkpoint.params;
    let mut violations = 0;
    let mut unchanged_at_k = 0;
    for i in 0..4 {
        let seq = desk.corpus.test.get(i).unwrap();
        let t = seq.audio.len();
        let noise: Vec<Vec<f32>> = (0..2).map(|s| NoiseSource::with_stream(7, (i * 2 + s) as u64).standard_normal(t * cfg.latent_dim)).collect();
        let base = generate_with_noise(seq.frames.frame(0), &seq.audio, params, cfg, &noise).unwrap();
        for k in 1..t {
            let bumped: Vec<f32> = seq.audio.step(k).iter().map(|v| v + 0.5).collect();
            let audio = seq.audio.with_step(k, &bumped).unwrap();
            let other = generate_with_noise(seq.frames.frame(0), &audio, params, cfg, &noise).unwrap();
            for (a, b) in base.samples.iter().zip(&other.samples) {
                violations += (0..k).filter(|&s| a.frame(s) != b.frame(s)).count();
                unchanged_at_k += usize::from(a.frame(k) == b.frame(k));
            }
        }
    }

    let root = work_dir().join("determinism");
    let _ = std::fs::remove_dir_all(&root);
    let spec = CorpusSpec { seed: 5, num_train: 6, num_test: 4, ..CorpusSpec::default() };
    generate_corpus(&spec, &root.join("a")).unwrap();
    generate_corpus(&spec, &root.join("b")).unwrap();
    let corpora_equal = dir_bytes(&root.join("a")) == dir_bytes(&root.join("b"));

    let corpus = load_corpus(&root.join("a")).unwrap();
    let small = desk_model(&spec);
    let tc = TrainConfig { max_steps: 20, eval_every: 10, rng_seed: 3, ..TrainConfig::default() };
    let mut checkpoints = Vec::new();
    let mut reports = Vec::new();
    for name in ["run_a", "run_b"] {
        let out_dir = root.join(name);
        std::fs::create_dir_all(&out_dir).unwrap();
        let out = train_with(&small, &tc, &corpus.train, TrainOptions { validation: Some(&corpus.test), out_dir: Some(&out_dir), ..Default::default() })
            .unwrap();
        checkpoints.push(encode_checkpoint(&out.checkpoint).unwrap());
        let report = evaluate_model(&out.checkpoint.params, &small, &corpus.test, &EvalOptions { seed: 2, ..Default::default() }).unwrap();
        reports.push(serde_json::to_vec(&report).unwrap());
    }
    let checkpoints_equal = checkpoints[0] == checkpoints[1];
    let reports_equal = reports[0] == reports[1];
    check(
        violations == 0 && unchanged_at_k == 0 && corpora_equal && checkpoints_equal && reports_equal,
        format!(
            "{violations} earlier frames changed by a later audio perturbation, {unchanged_at_k} perturbed steps unchanged; \
             identical corpora {corpora_equal}, checkpoints {checkpoints_equal}, reports {reports_equal}"
        ),
    )
}

// 8 ----------------------------------------------------------------------

fn metric_sanity() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut self_ok = true;
    for (k, &(h, w, c, want)) in images::SKIMAGE_SSIM.iter().enumerate() {
        let (x, y) = images::reference_pair(k, h, w, c);
        worst = worst.max((ssim(&x, &y, h, w, c).unwrap() - want).abs());
        self_ok &= (ssim(&x, &x, h, w, c).unwrap() - 1.0).abs() < 1e-12;
    }
    let img = images::reference_pair(2, 32, 32, 1).0;
    let cap_ok = psnr(&img, &img, 1.0).unwrap() == PSNR_CAP_DB;
    check(
        worst < 1e-6 && self_ok && cap_ok,
        format!("max |ssim - reference| {worst:.2e} on 10 images; ssim(x,x)=1 {self_ok}; PSNR cap {cap_ok}"),
    )
}

fn run(name: &str, f: impl FnOnce() -> Outcome + std::panic::UnwindSafe) -> bool {
    let start = Instant::now();
    let result = std::panic::catch_unwind(f).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = start.elapsed().as_secs_f64();
    match &result {
        Ok(d) => println!("PASS {name}: {d} [{secs:.1}s]"),
        Err(d) => println!("FAIL {name}: {d} [{secs:.1}s]"),
    }
    result.is_ok()
}

fn main() {
    let mut ok = true;
    ok &= run("1 kl-oracle", kl_oracle);
    ok &= run("2 gradient-check", gradient_check);
    ok &= run("3 objective-oracle", objective_oracle);
    ok &= run("4 overfit", overfit_oracle);
    let desk = desk_run();
    let desk = std::panic::AssertUnwindSafe(&desk);
    ok &= run("5 desk-training", || desk_training(&desk));
    ok &= run("6 diversity", || diversity_reproduction(&desk));
    ok &= run("7 causality-determinism", || causality_and_determinism(&desk));
    ok &= run("8 metric-sanity", metric_sanity);
    if !ok {
        std::process::exit(1);
    }
}
