//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. `MCD_ACCEPTANCE=1,2,5` runs a subset.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mcd_core::config::RunConfig;
use mcd_core::duality::{check_locking, midpoint_grid, static_duality};
use mcd_core::eval::{evaluate_cell, BenchmarkConfig};
use mcd_core::masking::{coupled_pair, mask_locked, LockNoise, MaskIndicator, TokenSequence};
use mcd_core::model::checkpoint;
use mcd_core::model::loss::{loss_and_gradient, loss_only, sharpen_log_probs, LossSpec, LossVariant, RowAux, TrainRow};
use mcd_core::model::{log_softmax_rows, Denoiser, DenoiserModel, ModelConfig};
use mcd_core::normal;
use mcd_core::pipeline::{self, student_ckpt_name, RunStatus, TEACHER_CKPT};
use mcd_core::rng;
use mcd_core::sampler::{generate, reverse_step, SamplerConfig};
use mcd_core::schedule::{cdf_y, CalibratedSchedule, Schedule};
use mcd_core::Result;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use statrs::distribution::{ChiSquared, ContinuousCDF, Discrete, Binomial};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn run(id: u32, title: &str, budget: Option<Duration>, f: impl FnOnce() -> Result<Verdict>) -> bool {
    let start = Instant::now();
    let v = f().unwrap_or_else(|e| verdict(false, format!("error: {e}")));
    let elapsed = start.elapsed();
    let in_time = budget.is_none_or(|b| elapsed <= b);
    let pass = v.pass && in_time;
    let timing = match budget {
        Some(b) if !in_time => format!("{elapsed:.1?}, over the {b:?} budget"),
        _ => format!("{elapsed:.1?}"),
    };
    println!("criterion {id} [{}] {title}: {} ({timing})", if pass { "PASS" } else { "FAIL" }, v.detail);
    pass
}

fn static_duality_check() -> Result<Verdict> {
    let times = midpoint_grid(16);
    let mut worst: f64 = 0.0;
    let mut misses = 0;
    for k in [2, 30, 1000] {
        let cal = CalibratedSchedule::new(Schedule::linear(), k)?;
        for row in static_duality(&cal, 1_000_000, &times, 11)? {
            worst = worst.max(row.abs_dev() / (row.gamma * (1.0 - row.gamma) / 1e6).sqrt());
            if !row.within_bound() {
                misses += 1;
            }
        }
    }
    Ok(verdict(misses == 0, format!("48 cells, worst deviation {worst:.2} sigma, {misses} outside 3 sigma")))
}

fn closed_form_check() -> Result<Verdict> {
    let mut worst_k2: f64 = 0.0;
    for i in 0..1000 {
        let y = -8.0 + 16.0 * i as f64 / 999.0;
        worst_k2 = worst_k2.max((cdf_y(y, 2)? - normal::cdf(y / 2f64.sqrt())).abs());
    }
    let mut worst_anchor: f64 = 0.0;
    for k in 2..=2048 {
        worst_anchor = worst_anchor.max((cdf_y(0.0, k)? - 1.0 / k as f64).abs());
    }
    Ok(verdict(
        worst_k2 <= 1e-9 && worst_anchor <= 1e-9,
        format!("K=2 max error {worst_k2:.1e}, max |F(0,K) - 1/K| {worst_anchor:.1e} for K <= 2048"),
    ))
}

fn locking_check() -> Result<Verdict> {
    let times = midpoint_grid(64);
    let mut parts = Vec::new();
    let mut pass = true;
    for k in [2, 28, 1000] {
        let cal = CalibratedSchedule::new(Schedule::linear(), k)?;
        let s = check_locking(&cal, 10_000, &times, 21)?;
        pass &= s.agreement_rate() >= 0.999 && s.disagreements_outside_tolerance == 0 && s.comparisons == 640_000;
        parts.push(format!("K={k} agreement {:.6} ({} disagreements, {} off-boundary)", s.agreement_rate(), s.disagreements, s.disagreements_outside_tolerance));
    }
    Ok(verdict(pass, parts.join("; ")))
}

fn nesting_check() -> Result<Verdict> {
    let mut r = rng::stream(31, "acceptance-nesting");
    let schedule = Schedule::linear();
    let len = 64;
    let mut violations = 0;
    for _ in 0..100_000 {
        let x0 = TokenSequence::new((0..len).map(|_| r.random_range(0..27)).collect(), 28)?;
        let u = LockNoise::sample(len, &mut r);
        let t: f64 = r.random();
        let s = t * r.random::<f64>();
        let pair = coupled_pair(&x0, &u, schedule.gamma(t)?, schedule.gamma(s)?)?;
        if !pair.m_s.is_subset_of(&pair.m_t) {
            violations += 1;
        }
    }
    // one switch per token along a dense grid from t = 0 to t = 1
    let grid: Vec<f64> = (0..=256).map(|i| i as f64 / 256.0).collect();
    let mut bad_trajectories = 0;
    for _ in 0..1000 {
        let x0 = TokenSequence::new((0..len).map(|_| r.random_range(0..27)).collect(), 28)?;
        let u = LockNoise::sample(len, &mut r);
        let masks: Vec<MaskIndicator> = grid.iter().map(|&t| Ok(mask_locked(&x0, &u, schedule.gamma(t)?)?.1)).collect::<Result<_>>()?;
        for i in 0..len {
            let switches = masks.windows(2).filter(|w| w[0].values()[i] != w[1].values()[i]).count();
            let starts_visible = !masks[0].values()[i];
            if switches != 1 || !starts_visible {
                bad_trajectories += 1;
            }
        }
    }
    Ok(verdict(
        violations == 0 && bad_trajectories == 0,
        format!("{violations} nesting violations in 100000 pairs; {bad_trajectories} of 64000 token trajectories without exactly one switch"),
    ))
}

fn fd_rows(model: &DenoiserModel) -> Result<(Vec<TrainRow>, Vec<TrainRow>)> {
    let v = model.config().vocab;
    let m = v as u32 - 1;
    let seq = |ids: &[u32]| TokenSequence::new(ids.to_vec(), v);
    let pre = vec![
        TrainRow {
            input: seq(&[m, 2, m, 0])?,
            target: seq(&[1, 2, 3, 0])?,
            aux: RowAux::Pretrain { mask: MaskIndicator::new(vec![true, false, true, false]), weight: 0.6 },
        },
        TrainRow { input: seq(&[m, m, m, m])?, target: seq(&[4, 0, 0, 2])?, aux: RowAux::Pretrain { mask: MaskIndicator::new(vec![true; 4]), weight: 0.3 } },
    ];
    let mut distill = Vec::new();
    for (x0, zt, zs) in [
        ([0u32, 3, 2, 4], [m, m, 2, m], [m, 3, 2, m]),
        ([1, 1, 0, 2], [m, m, m, m], [1, m, m, 2]),
        ([4, 0, 3, 3], [4, m, m, 3], [4, m, 0, 3]),
    ] {
        let zs = seq(&zs)?;
        let zt = seq(&zt)?;
        let teacher = log_softmax_rows(&model.logits(&zs)?.view());
        distill.push(TrainRow {
            aux: RowAux::Distill { m_t: MaskIndicator::of(&zt), m_s: MaskIndicator::of(&zs), teacher_log_probs: sharpen_log_probs(&teacher.view(), 0.7) },
            input: zt,
            target: seq(&x0)?,
        });
    }
    Ok((pre, distill))
}

fn gradient_check() -> Result<Verdict> {
    let cfg = ModelConfig { vocab: 6, seq_len: 4, width: 8, depth: 1, heads: 2, ffn_mult: 2, init_std: 0.5 };
    let mut model = DenoiserModel::new(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(5))?;
    let n = model.parameter_count();
    for k in 0..n {
        let v = model.params().get_flat(k);
        model.params_mut().set_flat(k, v + 0.2 * ((k as f64) * 0.61).cos());
    }
    let (pre, distill) = fd_rows(&model)?;
    let mut parts = Vec::new();
    let mut pass = n <= 1000;
    let cases = [
        ("pretrain_ce", LossSpec::PretrainCe, &pre),
        ("hybrid", LossSpec::Mcd(LossVariant::Hybrid), &distill),
        ("kl_fwd", LossSpec::Mcd(LossVariant::KlFwd), &distill),
        ("kl_bwd", LossSpec::Mcd(LossVariant::KlBwd), &distill),
    ];
    for (name, spec, rows) in cases {
        let out = loss_and_gradient(&model, rows, spec)?;
        let h = 1e-5;
        let mut probe = model.clone();
        let mut worst: f64 = 0.0;
        for k in 0..n {
            let v = model.params().get_flat(k);
            probe.params_mut().set_flat(k, v + h);
            let up = loss_only(&probe, rows, spec)?;
            probe.params_mut().set_flat(k, v - h);
            let down = loss_only(&probe, rows, spec)?;
            probe.params_mut().set_flat(k, v);
            let numeric = (up - down) / (2.0 * h);
            let analytic = out.grad.get_flat(k);
            worst = worst.max((numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-4));
        }
        pass &= worst < 1e-3;
        parts.push(format!("{name} {worst:.1e}"));
    }
    Ok(verdict(pass, format!("{n} parameters, worst relative error: {}", parts.join(", "))))
}

struct Flat {
    len: usize,
    vocab: usize,
}

impl Denoiser for Flat {
    fn seq_len(&self) -> usize {
        self.len
    }
    fn vocab(&self) -> usize {
        self.vocab
    }
    fn log_probs(&self, _z: &TokenSequence) -> Result<Array2<f64>> {
        Ok(Array2::from_elem((self.len, self.vocab - 1), -((self.vocab - 1) as f64).ln()))
    }
}

fn sampler_check() -> Result<Verdict> {
    let (len, vocab) = (32, 28);
    let model = Flat { len, vocab };
    let (gamma_t, gamma_s) = (0.3, 0.45);
    let p = (gamma_s - gamma_t) / (1.0 - gamma_t);
    // 20 masked positions, 12 visible
    let ids: Vec<u32> = (0..len).map(|i| if i % 8 < 5 { 27 } else { (i % 27) as u32 }).collect();
    let z = TokenSequence::new(ids, vocab)?;
    let m = z.mask_count();
    let trials = 100_000;
    let mut counts = vec![0usize; m + 1];
    let mut r = rng::stream(41, "acceptance-sampler");
    for _ in 0..trials {
        let out = reverse_step(&model, &z, gamma_t, gamma_s, &mut r)?;
        counts[m - out.mask_count()] += 1;
    }
    let binom = Binomial::new(p, m as u64).expect("valid binomial");
    // pool tail cells until every expected count is at least 5
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let (mut obs, mut exp) = (0.0, 0.0);
    for (k, &c) in counts.iter().enumerate() {
        obs += c as f64;
        exp += trials as f64 * binom.pmf(k as u64);
        if exp >= 5.0 {
            cells.push((obs, exp));
            obs = 0.0;
            exp = 0.0;
        }
    }
    if let Some(last) = cells.last_mut() {
        last.0 += obs;
        last.1 += exp;
    }
    let stat: f64 = cells.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    let dof = (cells.len() - 1) as f64;
    let p_value = 1.0 - ChiSquared::new(dof).expect("dof > 0").cdf(stat);
    let cfg = SamplerConfig::new(5, Schedule::linear(), 3)?;
    let residual: usize = generate(&model, &cfg, 200)?.iter().map(TokenSequence::mask_count).sum();
    Ok(verdict(
        p_value > 0.01 && residual == 0,
        format!("chi-square {stat:.2} on {dof} dof, p = {p_value:.3}; {residual} mask tokens in 200 generated sequences"),
    ))
}

/// Shared state for the two training criteria.
struct ToyRun {
    dir: tempfile::TempDir,
    cfg: RunConfig,
    teacher_8: f64,
    teacher_64: f64,
}

fn quiet() -> impl FnMut(&str) {
    |msg: &str| {
        if std::env::var_os("MCD_VERBOSE").is_some() {
            eprintln!("    {msg}");
        }
    }
}

fn load(path: &Path) -> Result<DenoiserModel> {
    Ok(checkpoint::load(path)?)
}

fn toy_bench(cfg: &RunConfig) -> Result<BenchmarkConfig> {
    Ok(BenchmarkConfig {
        steps: vec![],
        count: cfg.uint("eval.count"),
        schedule: pipeline::schedule(cfg)?,
        seed: rng::split_seed(cfg.u64("seed"), "benchmark"),
    })
}

fn ppl_at(model: &DenoiserModel, cfg: &RunConfig, steps: usize) -> Result<f64> {
    let src = pipeline::source(cfg)?;
    Ok(evaluate_cell(model, &src, steps, &toy_bench(cfg)?)?.0.ppl)
}

fn toy_pipeline(state: &mut Option<ToyRun>) -> Result<Verdict> {
    let dir = tempfile::tempdir()?;
    let mut cfg = RunConfig::default();
    cfg.set("eval.count", "512")?;
    let mut log = quiet();
    pipeline::pretrain(&cfg, dir.path(), &mut log)?;
    if pipeline::distill(&cfg, dir.path(), &mut log)? != RunStatus::Ok {
        return Ok(verdict(false, "distillation reported an invariant failure"));
    }
    let teacher = load(&dir.path().join(TEACHER_CKPT))?;
    let teacher_8 = ppl_at(&teacher, &cfg, 8)?;
    let teacher_64 = ppl_at(&teacher, &cfg, 64)?;
    let mut rounds = Vec::new();
    for r in 1..=cfg.uint("distill.rounds") {
        rounds.push(ppl_at(&load(&dir.path().join(student_ckpt_name(r)))?, &cfg, 8)?);
    }
    let student_8 = *rounds.last().expect("at least one round");
    let (a, b) = (student_8 < teacher_8, student_8 <= 1.10 * teacher_64);
    let detail = format!(
        "teacher PPL@8 {teacher_8:.3}, teacher PPL@64 {teacher_64:.3}, student PPL@8 by round {}; (a) {} (b) ratio to teacher@64 {:.3}",
        rounds.iter().map(|p| format!("{p:.3}")).collect::<Vec<_>>().join(" -> "),
        if a { "holds" } else { "fails" },
        student_8 / teacher_64
    );
    *state = Some(ToyRun { dir, cfg, teacher_8, teacher_64 });
    Ok(verdict(a && b, detail))
}

fn ablation(state: &mut Option<ToyRun>) -> Result<Verdict> {
    if state.is_none() {
        let mut s = None;
        toy_pipeline(&mut s)?;
        *state = s;
    }
    let run = state.as_ref().expect("toy run available");
    let teacher_path = run.dir.path().join(TEACHER_CKPT);
    let hybrid = ppl_at(&load(&run.dir.path().join(student_ckpt_name(run.cfg.uint("distill.rounds"))))?, &run.cfg, 8)?;
    let mut results = Vec::new();
    for variant in ["kl_fwd", "kl_bwd"] {
        let out = run.dir.path().join(variant);
        let mut cfg = run.cfg.clone();
        cfg.set("distill.loss", variant)?;
        cfg.set("distill.teacher", &teacher_path.display().to_string())?;
        let outcome = match pipeline::distill(&cfg, &out, &mut quiet()) {
            Ok(_) => {
                let ppl = ppl_at(&load(&out.join(student_ckpt_name(cfg.uint("distill.rounds"))))?, &cfg, 8)?;
                Ok(ppl)
            }
            Err(e) => Err(e.to_string()),
        };
        results.push((variant, outcome));
    }
    let fwd = match &results[0].1 {
        Ok(p) => *p,
        Err(e) => return Ok(verdict(false, format!("kl_fwd run failed: {e}"))),
    };
    let bwd = match &results[1].1 {
        Ok(p) => format!("{p:.3}"),
        Err(e) => format!("failed ({e})"),
    };
    Ok(verdict(
        hybrid <= fwd,
        format!(
            "PPL@8 hybrid {hybrid:.3} vs kl_fwd {fwd:.3}; kl_bwd (recorded only) {bwd}; teacher @8 {:.3} @64 {:.3}",
            run.teacher_8, run.teacher_64
        ),
    ))
}

fn csv_files(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            out.push((path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path)?));
        }
    }
    out.sort();
    Ok(out)
}

fn reproducibility_check() -> Result<Verdict> {
    let mut cfg = RunConfig::default();
    for kv in [
        "seed=17",
        "model.seq_len=16",
        "model.width=16",
        "eval.train_tokens=16000",
        "eval.heldout_tokens=1600",
        "eval.steps=1,4,16",
        "eval.count=16",
        "pretrain.steps=20",
        "pretrain.batch=8",
        "distill.iters=10",
        "distill.batch=8",
    ] {
        cfg.apply_override(kv)?;
    }
    let a = tempfile::tempdir()?;
    let b = tempfile::tempdir()?;
    pipeline::repro(&cfg, a.path(), &mut quiet())?;
    pipeline::repro(&cfg, b.path(), &mut quiet())?;
    let (fa, fb) = (csv_files(a.path())?, csv_files(b.path())?);
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    let identical = fa == fb && names.contains(&"table2_desk.csv") && names.contains(&"distill_metrics.csv");
    Ok(verdict(identical, format!("compared {}: {}", names.join(", "), if identical { "byte-identical" } else { "differ" })))
}

fn main() -> ExitCode {
    let selected: Option<Vec<u32>> = std::env::var("MCD_ACCEPTANCE").ok().map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let want = |id: u32| selected.as_ref().is_none_or(|s| s.contains(&id));
    let mut toy = None;
    let mut results = Vec::new();
    if want(1) {
        results.push(run(1, "static duality", Some(Duration::from_secs(120)), static_duality_check));
    }
    if want(2) {
        results.push(run(2, "closed-form calibration", Some(Duration::from_secs(30)), closed_form_check));
    }
    if want(3) {
        results.push(run(3, "scalar trajectory locking", Some(Duration::from_secs(60)), locking_check));
    }
    if want(4) {
        results.push(run(4, "trajectory determinism and nesting", None, nesting_check));
    }
    if want(5) {
        results.push(run(5, "gradient correctness", Some(Duration::from_secs(60)), gradient_check));
    }
    if want(6) {
        results.push(run(6, "sampler law", None, sampler_check));
    }
    if want(7) {
        results.push(run(7, "toy pipeline trend", None, || toy_pipeline(&mut toy)));
    }
    if want(8) {
        results.push(run(8, "ablation ordering", None, || ablation(&mut toy)));
    }
    if want(9) {
        results.push(run(9, "reproducibility", None, reproducibility_check));
    }
    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
