//! Subcommand drivers. Each one reads a resolved [`RunConfig`], writes its
//! artifacts plus `resolved.cfg` into an output directory and reports
//! whether the invariants it checks held.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::duality::{check_locking, midpoint_grid, static_duality, DualityReport};
use crate::eval::{self, make_source_with, BenchmarkConfig, EvalReport, MarkovSource, Tokenizer, ALPHABET};
use crate::masking::TokenSequence;
use crate::model::checkpoint;
use crate::model::optim::AdamConfig;
use crate::model::{DenoiserModel, ModelConfig};
use crate::rng;
use crate::sampler::{self, SamplerConfig};
use crate::schedule::{calibration_csv, calibration_row_at_gamma, calibration_table, CalibratedSchedule, Schedule};
use crate::trainer::{self, DataStream, DistillConfig, PretrainConfig};
use crate::{Error, Result};

pub const RESOLVED_CFG: &str = "resolved.cfg";
pub const TEACHER_CKPT: &str = "teacher.mcd";

/// Outcome of a subcommand that ran to completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunStatus {
    Ok,
    /// Artifacts were written but a checked invariant failed.
    InvariantFailed(String),
}

impl RunStatus {
    fn and(self, other: RunStatus) -> RunStatus {
        match (self, other) {
            (RunStatus::Ok, o) => o,
            (RunStatus::InvariantFailed(a), RunStatus::InvariantFailed(b)) => RunStatus::InvariantFailed(format!("{a}; {b}")),
            (s, RunStatus::Ok) => s,
        }
    }
}

/// Progress messages; the CLI prints them, tests discard them.
pub type Log<'a> = &'a mut dyn FnMut(&str);

pub fn student_ckpt_name(round: usize) -> String {
    format!("student_r{round}.mcd")
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents)?;
    Ok(())
}

fn prepare(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    write(&out.join(RESOLVED_CFG), cfg.resolved())
}

pub fn schedule(cfg: &RunConfig) -> Result<Schedule> {
    Schedule::new(cfg.raw("schedule.kind").parse()?, cfg.float("schedule.t_min"))
}

fn grad_clip(v: f64) -> Option<f64> {
    (v > 0.0).then_some(v)
}

pub fn tokenizer(cfg: &RunConfig) -> Result<Tokenizer> {
    let a = cfg.uint("eval.alphabet");
    let all: Vec<char> = ALPHABET.chars().collect();
    if a < 2 || a > all.len() {
        return Err(Error::Domain(format!("eval.alphabet = {a} outside 2..={}", all.len())));
    }
    Tokenizer::new(&all[..a].iter().collect::<String>())
}

pub fn model_config(cfg: &RunConfig) -> Result<ModelConfig> {
    let mc = ModelConfig {
        vocab: tokenizer(cfg)?.vocab_extended(),
        seq_len: cfg.uint("model.seq_len"),
        width: cfg.uint("model.width"),
        depth: cfg.uint("model.depth"),
        heads: cfg.uint("model.heads"),
        ffn_mult: cfg.uint("model.ffn_mult"),
        init_std: cfg.float("model.init_std"),
    };
    mc.validate()?;
    Ok(mc)
}

pub fn source(cfg: &RunConfig) -> Result<MarkovSource> {
    make_source_with(
        rng::split_seed(cfg.u64("seed"), "source"),
        cfg.uint("eval.order"),
        cfg.uint("eval.alphabet"),
        cfg.float("eval.concentration"),
        cfg.float("eval.backoff_strength"),
    )
}

pub fn pretrain_config(cfg: &RunConfig) -> Result<PretrainConfig> {
    Ok(PretrainConfig {
        steps: cfg.uint("pretrain.steps"),
        batch: cfg.uint("pretrain.batch"),
        optimizer: AdamConfig {
            lr: cfg.float("pretrain.lr"),
            warmup: cfg.uint("pretrain.warmup"),
            grad_clip: grad_clip(cfg.float("pretrain.grad_clip")),
            ..AdamConfig::default()
        },
        schedule: schedule(cfg)?,
    })
}

pub fn distill_config(cfg: &RunConfig) -> Result<DistillConfig> {
    let d = DistillConfig {
        rounds: cfg.uint("distill.rounds"),
        iters_per_round: cfg.uint("distill.iters"),
        delta0: cfg.float("distill.delta0"),
        lr: cfg.float("distill.lr"),
        warmup: cfg.uint("distill.warmup"),
        tau_init: cfg.float("distill.tau_init"),
        tau_step: cfg.float("distill.tau_step"),
        loss_variant: cfg.raw("distill.loss").parse()?,
        batch: cfg.uint("distill.batch"),
        seed: rng::split_seed(cfg.u64("seed"), "distill"),
        grad_clip: grad_clip(cfg.float("distill.grad_clip")),
        schedule: schedule(cfg)?,
    };
    d.validate()?;
    Ok(d)
}

/// Training and held-out corpora, regenerated deterministically from the seed.
pub fn corpora(cfg: &RunConfig, src: &MarkovSource) -> Result<(Vec<TokenSequence>, Vec<TokenSequence>)> {
    let len = cfg.uint("model.seq_len");
    let n_train = cfg.uint("eval.train_tokens").div_ceil(len);
    let n_held = cfg.uint("eval.heldout_tokens").div_ceil(len);
    if n_train == 0 {
        return Err(Error::Domain("eval.train_tokens must be positive".into()));
    }
    let seed = cfg.u64("seed");
    Ok((src.corpus(rng::split_seed(seed, "train-corpus"), n_train, len), src.corpus(rng::split_seed(seed, "heldout-corpus"), n_held, len)))
}

fn corpus_text(tok: &Tokenizer, seqs: &[TokenSequence]) -> Result<String> {
    let mut out = String::with_capacity(seqs.iter().map(|s| s.len() + 1).sum());
    for s in seqs {
        out.push_str(&tok.decode(s)?);
        out.push('\n');
    }
    Ok(out)
}

fn need(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingInput(path))
    }
}

pub fn calibrate(cfg: &RunConfig, out: &Path, log: Log) -> Result<RunStatus> {
    prepare(cfg, out)?;
    let cal = CalibratedSchedule::with_tolerance(schedule(cfg)?, cfg.uint("calibrate.vocab"), cfg.float("schedule.cdf_tolerance"))?;
    let mut rows = calibration_table(&cal, cfg.uint("calibrate.points"))?;
    if let Some(list) = cfg.text("calibrate.gammas") {
        for g in list.split(',') {
            let g: f64 = g.trim().parse().map_err(|_| Error::Domain(format!("calibrate.gammas entry '{g}' is not a number")))?;
            rows.push(calibration_row_at_gamma(&cal, g)?);
        }
    }
    let status = if rows.iter().all(|r| r.alpha.is_finite() && r.sigma.is_finite() && (r.alpha.powi(2) + r.sigma.powi(2) - 1.0).abs() < 1e-12) {
        RunStatus::Ok
    } else {
        RunStatus::InvariantFailed("latent coefficients are not variance preserving".into())
    };
    write(&out.join("calibration.csv"), calibration_csv(&rows))?;
    log(&format!("wrote {} calibration rows for K={}", rows.len(), cal.vocab_extended));
    Ok(status)
}

pub fn verify(cfg: &RunConfig, out: &Path, log: Log) -> Result<RunStatus> {
    prepare(cfg, out)?;
    let sched = schedule(cfg)?;
    let seed = rng::split_seed(cfg.u64("seed"), "verify");
    let times = midpoint_grid(cfg.uint("verify.times"));
    let lock_times = midpoint_grid(cfg.uint("verify.locking_times"));
    let n = cfg.uint("verify.samples");
    let vocabs = cfg.uint_list("verify.vocabs");
    if vocabs.is_empty() || times.is_empty() || n == 0 {
        return Err(Error::Domain("verify needs at least one vocabulary, one time and one sample".into()));
    }
    let mut csv = format!("{}\n", DualityReport::CSV_HEADER);
    let mut failed = Vec::new();
    for k in vocabs {
        let cal = CalibratedSchedule::with_tolerance(sched, k, cfg.float("schedule.cdf_tolerance"))?;
        let rows = static_duality(&cal, n, &times, seed)?;
        let locking = check_locking(&cal, cfg.uint("verify.trajectories"), &lock_times, seed)?;
        let report = DualityReport { vocab_extended: k, n_samples: n, rows, locking };
        log(&format!("K={k}: static rows within 3 SE: {}, locking agreement {:.6}", report.rows.iter().filter(|r| r.within_bound()).count(), report.locking.agreement_rate()));
        if !report.passed() {
            failed.push(k);
        }
        csv.push_str(&report.csv_body());
    }
    write(&out.join("duality_report.csv"), csv)?;
    Ok(if failed.is_empty() { RunStatus::Ok } else { RunStatus::InvariantFailed(format!("duality checks failed for K in {failed:?}")) })
}

pub fn pretrain(cfg: &RunConfig, out: &Path, log: Log) -> Result<RunStatus> {
    prepare(cfg, out)?;
    let src = source(cfg)?;
    let tok = tokenizer(cfg)?;
    let (train, held) = corpora(cfg, &src)?;
    write(&out.join("train.txt"), corpus_text(&tok, &train)?)?;
    write(&out.join("heldout.txt"), corpus_text(&tok, &held)?)?;
    let data = DataStream::new(train)?;
    let mc = model_config(cfg)?;
    let seed = cfg.u64("seed");
    let mut model = DenoiserModel::new(mc, &mut rng::stream(seed, "model-init"))?;
    let pc = pretrain_config(cfg)?;
    let mut rng = rng::stream(seed, "pretrain");
    let every = (pc.steps / 10).max(1);
    let result = trainer::pretrain_teacher(&data, &mut model, &pc, &mut rng, |row| {
        if row.step % every == 0 || row.step == pc.steps {
            log(&format!("pretrain step {}/{} loss {:.4}", row.step, pc.steps, row.loss));
        }
    });
    let rows = match result {
        Ok(rows) => rows,
        Err(e) => {
            // keep the last parameters that produced a finite loss
            checkpoint::save(&model, &out.join("teacher_last_good.mcd"))?;
            return Err(e);
        }
    };
    checkpoint::save(&model, &out.join(TEACHER_CKPT))?;
    write(&out.join("pretrain_metrics.csv"), trainer::pretrain_csv(&rows))?;
    let eval_set = if held.is_empty() { data.sequences() } else { &held[..] };
    let ce = trainer::masked_cross_entropy(&model, eval_set, 0.5, rng::split_seed(seed, "pretrain-eval"))?;
    let h = src.entropy_rate();
    let mut summary = String::from("metric,value\n");
    writeln!(summary, "masked_ce_at_half,{ce:.6}").unwrap();
    writeln!(summary, "source_entropy_rate,{h:.6}").unwrap();
    writeln!(summary, "relative_gap,{:.6}", (ce - h).abs() / h).unwrap();
    write(&out.join("pretrain_summary.csv"), summary)?;
    log(&format!("teacher masked CE at gamma=0.5: {ce:.4} (source entropy rate {h:.4})"));
    Ok(RunStatus::Ok)
}

pub fn distill(cfg: &RunConfig, out: &Path, log: Log) -> Result<RunStatus> {
    prepare(cfg, out)?;
    let teacher_path = need(cfg.text("distill.teacher").map(PathBuf::from).unwrap_or_else(|| out.join(TEACHER_CKPT)))?;
    let teacher = checkpoint::load_expecting(&teacher_path, &model_config(cfg)?)?;
    let src = source(cfg)?;
    let (train, _) = corpora(cfg, &src)?;
    let data = DataStream::new(train)?;
    let dc = distill_config(cfg)?;
    let total = dc.rounds * dc.iters_per_round;
    let every = (dc.iters_per_round / 4).max(1);
    let mut csv = format!("{}\n", trainer::DISTILL_CSV_HEADER);
    let metrics_path = out.join("distill_metrics.csv");
    let result = trainer::run_distillation(
        &teacher,
        &dc,
        &data,
        |row| {
            csv.push_str(&row.csv_line());
            csv.push('\n');
            if row.step % every == 0 {
                log(&format!("distill round {} step {}/{total} loss {:.4}", row.round, row.step, row.loss_total));
            }
        },
        |round, student| {
            checkpoint::save(student, &out.join(student_ckpt_name(round)))?;
            Ok(())
        },
    );
    // metrics are kept even when a later round fails
    write(&metrics_path, &csv)?;
    result?;
    log(&format!("wrote {} student checkpoints", dc.rounds));
    Ok(RunStatus::Ok)
}

pub fn sample(cfg: &RunConfig, out: &Path, log: Log) -> Result<RunStatus> {
    prepare(cfg, out)?;
    let path = need(cfg.text("sample.checkpoint").map(PathBuf::from).unwrap_or_else(|| out.join(TEACHER_CKPT)))?;
    let model = checkpoint::load(&path)?;
    let tok = tokenizer(cfg)?;
    if model.config().vocab != tok.vocab_extended() {
        return Err(Error::Contract(format!("checkpoint vocabulary {} does not match eval.alphabet", model.config().vocab)));
    }
    let sc = SamplerConfig::new(cfg.uint("sample.steps"), schedule(cfg)?, rng::split_seed(cfg.u64("seed"), "sample"))?;
    let samples = sampler::generate(&model, &sc, cfg.uint("sample.count"))?;
    write(&out.join("samples.txt"), corpus_text(&tok, &samples)?)?;
    let residual: usize = samples.iter().map(TokenSequence::mask_count).sum();
    if cfg.flag("sample.scores") {
        let src = source(cfg)?;
        let mut csv = String::from("index,nll_per_token,ppl\n");
        for (i, s) in samples.iter().enumerate() {
            let score = eval::oracle_score(std::slice::from_ref(s), &src)?;
            writeln!(csv, "{i},{:.6},{:.6}", score.nll, score.ppl).unwrap();
        }
        write(&out.join("samples_scores.csv"), csv)?;
    }
    log(&format!("wrote {} samples with {} steps", samples.len(), sc.steps));
    Ok(if residual == 0 { RunStatus::Ok } else { RunStatus::InvariantFailed(format!("{residual} mask tokens in samples")) })
}

fn benchmark_config(cfg: &RunConfig) -> Result<BenchmarkConfig> {
    Ok(BenchmarkConfig {
        steps: cfg.uint_list("eval.steps"),
        count: cfg.uint("eval.count"),
        schedule: schedule(cfg)?,
        seed: rng::split_seed(cfg.u64("seed"), "benchmark"),
    })
}

fn benchmark(cfg: &RunConfig, dir: &Path, log: Log) -> Result<(EvalReport, RunStatus)> {
    let mc = model_config(cfg)?;
    let teacher = checkpoint::load_expecting(&need(dir.join(TEACHER_CKPT))?, &mc)?;
    let mut students = Vec::new();
    while dir.join(student_ckpt_name(students.len() + 1)).is_file() {
        students.push(checkpoint::load_expecting(&dir.join(student_ckpt_name(students.len() + 1)), &mc)?);
    }
    log(&format!("evaluating teacher and {} student rounds", students.len()));
    let report = eval::run_benchmark(&teacher, &students, &source(cfg)?, &benchmark_config(cfg)?)?;
    let residual: usize = report.rows.iter().map(|r| r.mask_residual).sum();
    let status = if residual == 0 { RunStatus::Ok } else { RunStatus::InvariantFailed(format!("{residual} mask tokens in benchmark samples")) };
    Ok((report, status))
}

pub fn evaluate(cfg: &RunConfig, out: &Path, log: Log) -> Result<RunStatus> {
    prepare(cfg, out)?;
    let dir = cfg.text("eval.dir").map(PathBuf::from).unwrap_or_else(|| out.to_path_buf());
    let (report, status) = benchmark(cfg, &dir, log)?;
    write(&out.join("eval_report.csv"), report.to_csv())?;
    Ok(status)
}

/// Pretrain, distill, then benchmark every round into `table2_desk.csv`.
pub fn repro(cfg: &RunConfig, out: &Path, log: Log) -> Result<RunStatus> {
    let mut cfg = cfg.clone();
    cfg.set("distill.teacher", "")?;
    cfg.set("eval.dir", "")?;
    let status = pretrain(&cfg, out, log)?.and(distill(&cfg, out, log)?);
    let (report, bench) = benchmark(&cfg, out, log)?;
    write(&out.join("table2_desk.csv"), report.to_csv())?;
    Ok(status.and(bench))
}
