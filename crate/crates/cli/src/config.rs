//! Flat key=value config files with `#` comments. Unknown keys are
//! rejected; command-line `--set key=value` pairs override file keys.

use anyhow::{anyhow, bail, Context, Result};
use recall_core::bufferqueue::SelectionStrategy;
use recall_core::dataset::SynthConfig;
use recall_core::equations::EquationForm;
use recall_core::trainer::TrainerConfig;
use std::collections::BTreeMap;

/// Parse `key=value` lines, last occurrence wins.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected key=value, got '{line}'", idx + 1))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn apply_overrides(map: &mut BTreeMap<String, String>, sets: &[String]) -> Result<()> {
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects key=value, got '{s}'"))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(())
}

fn take_parse<T: std::str::FromStr>(
    map: &mut BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    match map.remove(key) {
        Some(v) => v
            .parse::<T>()
            .map_err(|e| anyhow!("config key '{key}': {e}")),
        None => Ok(default),
    }
}

fn take_bool(map: &mut BTreeMap<String, String>, key: &str, default: bool) -> Result<bool> {
    match map.remove(key) {
        Some(v) => match v.as_str() {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            other => bail!("config key '{key}': expected a boolean, got '{other}'"),
        },
        None => Ok(default),
    }
}

/// Training configuration resolved from file plus overrides, including the
/// learner-level split ratios applied to the corpus before training.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub trainer: TrainerConfig,
    pub ratios: (f64, f64, f64),
}

impl RunConfig {
    pub fn from_text(text: &str, sets: &[String]) -> Result<Self> {
        let mut map = parse_kv(text)?;
        apply_overrides(&mut map, sets)?;
        let d = TrainerConfig::default();
        let trainer = TrainerConfig {
            form: take_parse(&mut map, "form", d.form)?,
            strategy: take_parse(&mut map, "strategy", d.strategy)?,
            alpha: take_parse(&mut map, "alpha", d.alpha)?,
            lambda1: take_parse(&mut map, "lambda1", d.lambda1)?,
            epochs_per_phase: take_parse(&mut map, "epochs_per_phase", d.epochs_per_phase)?,
            max_outer_rounds: take_parse(&mut map, "max_outer_rounds", d.max_outer_rounds)?,
            lr_nn: take_parse(&mut map, "lr_nn", d.lr_nn)?,
            lr_sr: take_parse(&mut map, "lr_sr", d.lr_sr)?,
            batch_size: take_parse(&mut map, "batch_size", d.batch_size)?,
            patience: take_parse(&mut map, "patience", d.patience)?,
            seed: take_parse(&mut map, "seed", d.seed)?,
            hidden_dim: take_parse(&mut map, "hidden_dim", d.hidden_dim)?,
            decoder_hidden: take_parse(&mut map, "decoder_hidden", d.decoder_hidden)?,
            fd_epsilon: take_parse(&mut map, "fd_epsilon", d.fd_epsilon)?,
            queue_capacity: take_parse(&mut map, "queue_capacity", d.queue_capacity)?,
            alternate: take_bool(&mut map, "alternate", d.alternate)?,
            bias_column: take_bool(&mut map, "bias_column", d.bias_column)?,
            epoch_budget: take_parse(&mut map, "epoch_budget", d.epoch_budget)?,
            budget_per_phase: take_bool(&mut map, "budget_per_phase", d.budget_per_phase)?,
            prune_tol: take_parse(&mut map, "prune_tol", d.prune_tol)?,
            sr_horizon: take_parse(&mut map, "sr_horizon", d.sr_horizon)?,
        };
        let ratios = (
            take_parse(&mut map, "train_ratio", 0.8)?,
            take_parse(&mut map, "val_ratio", 0.1)?,
            take_parse(&mut map, "test_ratio", 0.1)?,
        );
        if let Some(key) = map.keys().next() {
            bail!("unknown config key '{key}'");
        }
        Ok(RunConfig { trainer, ratios })
    }

    /// Trace tag identifying the arm: form, strategy, and alternation mode.
    pub fn tag(&self) -> String {
        format!(
            "{}-{}-{}",
            self.trainer.form.name(),
            self.trainer.strategy.name(),
            if self.trainer.alternate { "alt" } else { "joint" }
        )
    }
}

/// Synthesis configuration from file plus overrides. `truth_weights` rows
/// are ';'-separated, entries ','-separated; absent means the built-in
/// defaults for the form.
pub fn synth_from_text(text: &str, sets: &[String]) -> Result<SynthConfig> {
    let mut map = parse_kv(text)?;
    apply_overrides(&mut map, sets)?;
    let form: EquationForm = take_parse(&mut map, "form", EquationForm::Hlr)?;
    let true_weights = match map.remove("truth_weights") {
        None => vec![],
        Some(spec) => {
            let rows: Result<Vec<Vec<f64>>> = spec
                .split(';')
                .map(|row| {
                    row.split(',')
                        .map(|v| {
                            v.trim()
                                .parse::<f64>()
                                .with_context(|| format!("truth_weights entry '{v}'"))
                        })
                        .collect()
                })
                .collect();
            rows?
        }
    };
    let cfg = SynthConfig {
        learners: take_parse(&mut map, "learners", 20usize)?,
        items: take_parse(&mut map, "items", 8usize)?,
        steps_per_learner: take_parse(&mut map, "steps_per_learner", 50usize)?,
        form,
        true_weights,
        noise_sd: take_parse(&mut map, "noise_sd", 0.0f64)?,
        seed: take_parse(&mut map, "seed", 42u64)?,
    };
    if let Some(key) = map.keys().next() {
        bail!("unknown config key '{key}'");
    }
    Ok(cfg)
}

/// `field=column` pairs for the ingest schema flag.
pub fn parse_schema_overrides(spec: &str) -> Result<Vec<(String, String)>> {
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            pair.split_once('=')
                .map(|(f, c)| (f.trim().to_string(), c.trim().to_string()))
                .ok_or_else(|| anyhow!("--schema expects field=column pairs, got '{pair}'"))
        })
        .collect()
}

impl std::str::FromStr for ParsedStrategy {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(ParsedStrategy(
            s.parse::<SelectionStrategy>().map_err(|e| anyhow!("{e}"))?,
        ))
    }
}

/// Newtype so clap can parse a strategy flag through FromStr.
#[derive(Clone, Copy, Debug)]
pub struct ParsedStrategy(pub SelectionStrategy);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_keys() {
        let cfg = RunConfig::from_text("seed=7\n", &[]).unwrap();
        assert_eq!(cfg.trainer.seed, 7);
        assert_eq!(cfg.trainer.epochs_per_phase, 5);
        assert_eq!(cfg.ratios, (0.8, 0.1, 0.1));
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_text("sneaky=1\n", &[]).unwrap_err();
        assert!(err.to_string().contains("sneaky"));
    }

    #[test]
    fn comments_and_overrides() {
        let text = "# a comment\nalpha=0.5\nseed=1\n";
        let cfg = RunConfig::from_text(text, &["alpha=0.25".into()]).unwrap();
        assert_eq!(cfg.trainer.alpha, 0.25);
    }

    #[test]
    fn synth_weights_parse() {
        let cfg = synth_from_text(
            "form=wickelgren\ntruth_weights=1,0,0;0,1,0;0,0,1\nlearners=3\nitems=2\nsteps_per_learner=4\n",
            &[],
        )
        .unwrap();
        assert_eq!(cfg.true_weights.len(), 3);
        assert_eq!(cfg.true_weights[2], vec![0.0, 0.0, 1.0]);
    }
}
