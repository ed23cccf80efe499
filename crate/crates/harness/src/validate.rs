//! Schema and invariant checks with line-level diagnostics.

use std::fmt;
use std::path::Path;

use serde::Serialize;
use toml::Table;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::overrides::apply_overrides;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    /// 1-based line in the checked document, when it can be located.
    pub line: Option<usize>,
    /// Dotted path of the offending field; empty for syntax errors.
    pub field: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(line) = self.line {
            write!(f, "line {line}: ")?;
        }
        if !self.field.is_empty() {
            write!(f, "{}: ", self.field)?;
        }
        f.write_str(&self.message)
    }
}

pub fn validate_config(path: &Path) -> Result<Vec<Diagnostic>> {
    let src = std::fs::read_to_string(path).map_err(|e| HarnessError::file(path, e))?;
    Ok(match check_source(&src) {
        Ok(_) => Vec::new(),
        Err(d) => d,
    })
}

/// Parses and fully checks a config document.
pub fn check_source(src: &str) -> std::result::Result<ExperimentConfig, Vec<Diagnostic>> {
    let span_line = |span: Option<std::ops::Range<usize>>| span.map(|s| line_of(src, s.start));
    if let Err(e) = src.parse::<Table>() {
        return Err(vec![Diagnostic {
            line: span_line(e.span()),
            field: String::new(),
            message: e.message().trim().to_string(),
        }]);
    }
    let cfg: ExperimentConfig = match toml::from_str(src) {
        Ok(c) => c,
        Err(e) => {
            return Err(vec![Diagnostic {
                line: span_line(e.span()),
                field: String::new(),
                message: e.message().trim().to_string(),
            }])
        }
    };
    let diags: Vec<Diagnostic> = semantic_checks(&cfg)
        .into_iter()
        .map(|(field, message)| Diagnostic {
            line: locate(src, &field),
            field,
            message,
        })
        .collect();
    if diags.is_empty() {
        Ok(cfg)
    } else {
        Err(diags)
    }
}

/// Applies overrides to `src` and checks the result. Line numbers refer to
/// `src` when there are no overrides and to the merged document otherwise.
pub fn load_config(src: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let merged;
    let text = if overrides.is_empty() {
        src
    } else {
        let mut doc: Table = src.parse().map_err(|e: toml::de::Error| {
            HarnessError::Invalid(vec![Diagnostic {
                line: e.span().map(|s| line_of(src, s.start)),
                field: String::new(),
                message: e.message().trim().to_string(),
            }])
        })?;
        apply_overrides(&mut doc, overrides)?;
        merged = toml::to_string(&doc).expect("tables serialize");
        merged.as_str()
    };
    check_source(text).map_err(HarnessError::Invalid)
}

fn semantic_checks(cfg: &ExperimentConfig) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut check = |ok: bool, field: &str, msg: &str| {
        if !ok {
            out.push((field.to_string(), msg.to_string()));
        }
    };
    let t = &cfg.trainer;
    check(t.iterations >= 1, "trainer.iterations", "must be at least 1");
    check(
        t.prompts_per_iter >= 1,
        "trainer.prompts_per_iter",
        "must be at least 1",
    );
    check(
        t.rollouts_per_prompt >= 1,
        "trainer.rollouts_per_prompt",
        "must be at least 1",
    );
    check(
        t.updates_per_iter >= 1,
        "trainer.updates_per_iter",
        "must be at least 1",
    );
    check(
        t.learning_rate.is_finite() && t.learning_rate > 0.0,
        "trainer.learning_rate",
        "must be positive",
    );
    check(
        t.temperature.is_finite() && t.temperature > 0.0,
        "trainer.temperature",
        "must be positive",
    );
    check(
        t.objective.beta.is_finite() && t.objective.beta > 0.0,
        "trainer.objective.beta",
        "must be positive",
    );
    check(
        t.objective.clip_low < t.objective.clip_high,
        "trainer.objective.clip_low",
        "must be below clip_high",
    );
    check(
        (0.0..1.0).contains(&t.objective.clip_low),
        "trainer.objective.clip_low",
        "must lie in [0, 1)",
    );
    check(
        t.buffer.batch_size != Some(0),
        "trainer.buffer.batch_size",
        "must be at least 1",
    );
    check(
        t.buffer.capacity >= t.update_batch_size(),
        "trainer.buffer.capacity",
        "capacity M must be at least the batch size B",
    );
    check(
        t.buffer.capacity >= t.fresh_batch_size(),
        "trainer.buffer.capacity",
        "capacity M must hold one round of rollouts",
    );
    check(t.eval.n >= 1, "trainer.eval.n", "must be at least 1");
    check(!cfg.seeds.is_empty(), "seeds", "needs at least one seed");
    check(
        cfg.output.threshold > 0.0 && cfg.output.threshold <= 1.0,
        "output.threshold",
        "must lie in (0, 1]",
    );
    check(
        cfg.cost.t_generation >= 0.0 && cfg.cost.t_update >= 0.0,
        "cost",
        "unit times must be nonnegative",
    );
    check(
        cfg.sweep.beta.iter().all(|b| b.is_finite() && *b > 0.0),
        "sweep.beta",
        "every beta must be positive",
    );
    check(
        cfg.sweep.learning_rate.iter().all(|l| l.is_finite() && *l > 0.0),
        "sweep.learning_rate",
        "every learning rate must be positive",
    );
    check(
        cfg.sweep.methods.iter().all(|m| m.step >= 1),
        "sweep.methods",
        "every step must be at least 1",
    );
    if out.is_empty() {
        if let Err(e) = cfg.task.build(&cfg.policy) {
            out.push(("task".to_string(), e.to_string()));
        }
        for (label, _, point) in cfg.points() {
            if let Err(e) = point.validate() {
                out.push(("trainer".to_string(), format!("sweep point {label}: {e}")));
            }
        }
    }
    out
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

/// Line defining `path`, or the closest enclosing table or key.
fn locate(src: &str, path: &str) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    let mut header: Vec<String> = Vec::new();
    let target: Vec<&str> = path.split('.').collect();
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let full: Vec<String> = if line.starts_with('[') {
            header = line
                .trim_matches(|c| c == '[' || c == ']')
                .split('.')
                .map(|k| k.trim().to_string())
                .collect();
            header.clone()
        } else if let Some((key, _)) = line.split_once('=') {
            header
                .iter()
                .cloned()
                .chain(key.split('.').map(|k| k.trim().trim_matches('"').to_string()))
                .collect()
        } else {
            continue;
        };
        let common = full.iter().zip(&target).take_while(|(a, b)| a == *b).count();
        if common == full.len() && common > best.map_or(0, |(c, _)| c) {
            best = Some((common, i + 1));
        }
    }
    best.map(|(_, l)| l)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
name = "t"
seeds = [1]

[task]
kind = "one_shot"
difficulty = "easy"

[trainer]
iterations = 3
rollouts_per_prompt = 4
learning_rate = 0.05

[trainer.objective]
kind = "reval"
beta = 0.1

[trainer.buffer]
capacity = 20
"#;

    #[test]
    fn valid_file() {
        assert!(check_source(GOOD).is_ok());
    }

    #[test]
    fn capacity_below_batch_names_the_field() {
        let bad = GOOD.replace("capacity = 20", "capacity = 20\nbatch_size = 32");
        let d = check_source(&bad).unwrap_err();
        assert_eq!(d[0].field, "trainer.buffer.capacity");
        assert_eq!(d[0].line, Some(19));
    }

    #[test]
    fn negative_beta() {
        let d = check_source(&GOOD.replace("beta = 0.1", "beta = -0.1")).unwrap_err();
        assert_eq!(d[0].field, "trainer.objective.beta");
        assert_eq!(d[0].line, Some(16));
    }

    #[test]
    fn unknown_field_and_syntax_errors_carry_lines() {
        let d =
            check_source(&GOOD.replace("learning_rate = 0.05", "learning_rate = 0.05\nlearnig_rate = 1")).unwrap_err();
        assert!(d[0].message.contains("learnig_rate"), "{}", d[0]);
        assert!(d[0].line.is_some());
        let d = check_source("name = \n").unwrap_err();
        assert_eq!(d[0].line, Some(1));
    }

    #[test]
    fn overrides_are_checked() {
        let cfg = load_config(GOOD, &["trainer.iterations=7".into()]).unwrap();
        assert_eq!(cfg.trainer.iterations, 7);
        assert!(matches!(
            load_config(GOOD, &["trainer.objective.clip_low=0.5".into()]),
            Err(HarnessError::Invalid(_))
        ));
    }
}
