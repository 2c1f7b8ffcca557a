//! Flat `key = value` run configuration with documented defaults.
//!
//! Files are UTF-8, one entry per line, `#` starts a comment. Every key must
//! be known; values are type-checked when set.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("{}unknown configuration key '{key}'", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    UnknownKey { key: String, line: Option<usize> },
    #[error("{}invalid value '{value}' for '{key}': expected {expected}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    BadValue { key: String, value: String, expected: &'static str, line: Option<usize> },
    #[error("cannot read configuration {path}: {source}")]
    Read { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Uint,
    Float,
    Bool,
    Text,
    UintList,
    Choice(&'static [&'static str]),
}

impl Kind {
    fn expected(self) -> &'static str {
        match self {
            Kind::Uint => "a non-negative integer",
            Kind::Float => "a finite number",
            Kind::Bool => "true or false",
            Kind::Text => "text",
            Kind::UintList => "a comma-separated list of non-negative integers",
            Kind::Choice(_) => "one of the documented choices",
        }
    }

    fn accepts(self, v: &str) -> bool {
        match self {
            Kind::Uint => v.parse::<u64>().is_ok(),
            Kind::Float => v.parse::<f64>().map(f64::is_finite).unwrap_or(false),
            Kind::Bool => v == "true" || v == "false",
            Kind::Text => true,
            Kind::UintList => v.is_empty() || v.split(',').all(|p| p.trim().parse::<u64>().is_ok()),
            Kind::Choice(options) => options.contains(&v),
        }
    }
}

struct KeySpec {
    key: &'static str,
    default: &'static str,
    kind: Kind,
    doc: &'static str,
}

const fn k(key: &'static str, default: &'static str, kind: Kind, doc: &'static str) -> KeySpec {
    KeySpec { key, default, kind, doc }
}

const SCHEDULES: &[&str] = &["linear", "cosine"];
const LOSSES: &[&str] = &["hybrid", "kl_fwd", "kl_bwd"];

static KEYS: &[KeySpec] = &[
    k("seed", "0", Kind::Uint, "top-level seed; every module derives its own stream from it"),
    k("schedule.kind", "linear", Kind::Choice(SCHEDULES), "signal schedule gamma_t: linear (1-t) or cosine"),
    k("schedule.t_min", "0.001", Kind::Float, "smallest training time"),
    k("schedule.cdf_tolerance", "1e-10", Kind::Float, "absolute accuracy of the margin CDF F_Y"),
    k("calibrate.vocab", "28", Kind::Uint, "extended vocabulary K for `calibrate` (--K)"),
    k("calibrate.points", "101", Kind::Uint, "rows of the time grid t = i/(points-1)"),
    k("calibrate.gammas", "", Kind::Text, "extra signal levels to tabulate, comma-separated"),
    k("verify.vocabs", "2,30,1000", Kind::UintList, "extended vocabularies checked by `verify`"),
    k("verify.samples", "1000000", Kind::Uint, "Monte Carlo projections per vocabulary"),
    k("verify.times", "16", Kind::Uint, "interior grid times for the static check"),
    k("verify.trajectories", "10000", Kind::Uint, "trajectories for the locking check"),
    k("verify.locking_times", "64", Kind::Uint, "times per trajectory for the locking check"),
    k("model.seq_len", "64", Kind::Uint, "context length L"),
    k("model.width", "64", Kind::Uint, "embedding width"),
    k("model.depth", "2", Kind::Uint, "number of attention blocks"),
    k("model.heads", "2", Kind::Uint, "attention heads per block"),
    k("model.ffn_mult", "4", Kind::Uint, "feed-forward width multiplier"),
    k("model.init_std", "0.02", Kind::Float, "std of the normal parameter init"),
    k("pretrain.steps", "3000", Kind::Uint, "teacher optimiser steps"),
    k("pretrain.batch", "32", Kind::Uint, "sequences per step"),
    k("pretrain.lr", "0.002", Kind::Float, "peak learning rate"),
    k("pretrain.warmup", "200", Kind::Uint, "linear warmup steps"),
    k("pretrain.grad_clip", "1.0", Kind::Float, "global gradient-norm clip (0 disables)"),
    k("distill.teacher", "", Kind::Text, "teacher checkpoint (default: OUT/teacher.mcd)"),
    k("distill.rounds", "3", Kind::Uint, "distillation rounds N"),
    k("distill.iters", "2000", Kind::Uint, "iterations per round M"),
    k("distill.delta0", "0.001953125", Kind::Float, "initial time gap (doubled every round)"),
    k("distill.lr", "0.0003", Kind::Float, "student learning rate"),
    k("distill.warmup", "100", Kind::Uint, "linear warmup steps at distillation start"),
    k("distill.tau_init", "0.96", Kind::Float, "teacher sharpening temperature in round 1"),
    k("distill.tau_step", "0.03", Kind::Float, "temperature decrease per round (floored at 0.05)"),
    k("distill.loss", "hybrid", Kind::Choice(LOSSES), "objective: hybrid, kl_fwd or kl_bwd"),
    k("distill.batch", "32", Kind::Uint, "sequences per step"),
    k("distill.grad_clip", "1.0", Kind::Float, "global gradient-norm clip (0 disables)"),
    k("sample.checkpoint", "", Kind::Text, "model to sample from (default: OUT/teacher.mcd)"),
    k("sample.steps", "8", Kind::Uint, "reverse steps N"),
    k("sample.count", "64", Kind::Uint, "sequences to generate"),
    k("sample.scores", "false", Kind::Bool, "also write per-sample oracle scores"),
    k("eval.order", "2", Kind::Uint, "Markov order of the synthetic source"),
    k("eval.alphabet", "27", Kind::Uint, "clean symbols A (letters then space); K = A + 1"),
    k("eval.concentration", "0.1", Kind::Float, "Dirichlet concentration of source rows"),
    k("eval.backoff_strength", "10", Kind::Float, "Dirichlet mass around the lower-order row (0: independent rows)"),
    k("eval.train_tokens", "2000000", Kind::Uint, "training corpus size in tokens"),
    k("eval.heldout_tokens", "200000", Kind::Uint, "held-out corpus size in tokens"),
    k("eval.steps", "1,2,4,8,16,32,64", Kind::UintList, "step counts of the benchmark grid"),
    k("eval.count", "256", Kind::Uint, "samples per benchmark cell"),
    k("eval.dir", "", Kind::Text, "directory holding checkpoints to evaluate (default: OUT)"),
];

fn spec(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|s| s.key == key)
}

/// Fully resolved configuration: every known key has a value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|s| (s.key, s.default.to_string())).collect() }
    }
}

impl RunConfig {
    fn set_at(&mut self, key: &str, value: &str, line: Option<usize>) -> Result<(), ConfigError> {
        let spec = spec(key).ok_or_else(|| ConfigError::UnknownKey { key: key.to_string(), line })?;
        if !spec.kind.accepts(value) {
            return Err(ConfigError::BadValue { key: key.into(), value: value.into(), expected: spec.kind.expected(), line });
        }
        self.values.insert(spec.key, value.to_string());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.set_at(key.trim(), value.trim(), None)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax { line: 0, message: format!("override '{assignment}' is not key=value") })?;
        self.set(key, value)
    }

    pub fn parse_str(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line, message: format!("expected key = value, found '{content}'") })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax { line, message: "empty key".into() });
            }
            self.set_at(key, value.trim(), Some(line))?;
        }
        Ok(())
    }

    pub fn from_str_with_defaults(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.parse_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        Self::from_str_with_defaults(&text)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    pub fn uint(&self, key: &str) -> usize {
        self.raw(key).parse().expect("validated when set")
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.raw(key).parse().expect("validated when set")
    }

    pub fn float(&self, key: &str) -> f64 {
        self.raw(key).parse().expect("validated when set")
    }

    pub fn flag(&self, key: &str) -> bool {
        self.raw(key) == "true"
    }

    pub fn uint_list(&self, key: &str) -> Vec<usize> {
        let raw = self.raw(key);
        if raw.is_empty() {
            return Vec::new();
        }
        raw.split(',').map(|p| p.trim().parse().expect("validated when set")).collect()
    }

    /// Optional text value; empty means unset.
    pub fn text(&self, key: &str) -> Option<&str> {
        Some(self.raw(key)).filter(|v| !v.is_empty())
    }

    /// Every key in documentation order, one `key = value` per line.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for s in KEYS {
            writeln!(out, "{} = {}", s.key, self.values[s.key]).unwrap();
        }
        out
    }
}

/// `key (default: value)  description` for every key.
pub fn key_help() -> String {
    let width = KEYS.iter().map(|s| s.key.len()).max().unwrap_or(0);
    let mut out = String::new();
    for s in KEYS {
        let default = if s.default.is_empty() { "\"\"" } else { s.default };
        writeln!(out, "  {:width$}  {}  [default: {}]", s.key, s.doc, default).unwrap();
    }
    out
}

pub fn keys() -> impl Iterator<Item = (&'static str, &'static str)> {
    KEYS.iter().map(|s| (s.key, s.default))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_resolved_text() {
        let cfg = RunConfig::default();
        let again = RunConfig::from_str_with_defaults(&cfg.resolved()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.uint("distill.rounds"), 3);
        assert_eq!(cfg.uint_list("eval.steps"), vec![1, 2, 4, 8, 16, 32, 64]);
        assert_eq!(cfg.text("distill.teacher"), None);
    }

    #[test]
    fn comments_blank_lines_and_overrides() {
        let cfg = RunConfig::from_str_with_defaults("# header\n\nseed = 7   # trailing\n  distill.loss=kl_fwd\n").unwrap();
        assert_eq!(cfg.u64("seed"), 7);
        assert_eq!(cfg.raw("distill.loss"), "kl_fwd");
        let mut cfg = cfg;
        cfg.apply_override("seed=9").unwrap();
        assert_eq!(cfg.u64("seed"), 9);
    }

    #[test]
    fn unknown_keys_and_bad_lines_report_line_numbers() {
        let err = RunConfig::from_str_with_defaults("seed = 1\ndistill.ronuds = 4\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { line: Some(2), .. }), "{err}");
        assert!(err.to_string().contains("line 2"));
        let err = RunConfig::from_str_with_defaults("\n\njust words\n").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 3, .. }));
        let err = RunConfig::from_str_with_defaults("pretrain.steps = many\n").unwrap_err();
        assert!(matches!(err, ConfigError::BadValue { line: Some(1), .. }));
        assert!(RunConfig::default().apply_override("distill.loss=kl").is_err());
        assert!(RunConfig::default().apply_override("noequals").is_err());
    }

    #[test]
    fn help_lists_every_key_with_its_default() {
        let help = key_help();
        for (key, default) in keys() {
            let line = help.lines().find(|l| l.trim_start().starts_with(&format!("{key} "))).unwrap();
            if !default.is_empty() {
                assert!(line.contains(&format!("[default: {default}]")), "{line}");
            }
        }
    }
}
