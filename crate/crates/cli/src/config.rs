//! Flat `key = value` run configuration.
//!
//! One file fully determines a run: the training hyper-parameters, the
//! testbed geometry (or a directory holding a saved testbed) and the
//! rewrite backend. Blank lines and `#` comments are ignored; unknown keys
//! are errors.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::str::FromStr;

use grape_core::bridge::{TemplateId, DEFAULT_TIMEOUT_MS};
use grape_core::optim::TrainConfig;
use grape_core::reward::RewardMode;
use grape_core::synthenv::TestbedSpec;
use grape_core::{GrapeError, Result};

/// Where sampled rewrites are realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    /// Action embeddings straight from the testbed.
    Testbed,
    /// The in-process protocol mock.
    Mock,
    /// An external adapter launched from `GRAPE_ADAPTER_CMD`.
    Adapter,
}

impl Backend {
    fn name(self) -> &'static str {
        match self {
            Backend::Testbed => "testbed",
            Backend::Mock => "mock",
            Backend::Adapter => "adapter",
        }
    }
}

impl FromStr for Backend {
    type Err = GrapeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "testbed" => Ok(Backend::Testbed),
            "mock" => Ok(Backend::Mock),
            "adapter" => Ok(Backend::Adapter),
            _ => Err(GrapeError::Parameter(format!(
                "unknown backend `{s}` (expected testbed, mock or adapter)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub spec: TestbedSpec,
    pub temperature: f64,
    pub backend: Backend,
    pub malform_rate: f64,
    pub template: TemplateId,
    pub timeout_ms: u64,
    pub testbed_dir: Option<PathBuf>,
    explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let spec = TestbedSpec {
            seed: train.seed,
            ..TestbedSpec::default()
        };
        Self {
            train,
            spec,
            temperature: 1.0,
            backend: Backend::Testbed,
            malform_rate: 0.0,
            template: TemplateId::Multilingual,
            timeout_ms: DEFAULT_TIMEOUT_MS,
            testbed_dir: None,
            explicit: BTreeSet::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| GrapeError::Parameter(format!("bad value `{value}` for `{key}`")))
}

impl RunConfig {
    /// Apply every `key = value` line of `src` on top of `self`.
    pub fn merge_text(&mut self, src: &str) -> Result<()> {
        for (i, raw) in src.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| GrapeError::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| GrapeError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    #[cfg(test)]
    pub fn from_text(src: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.merge_text(src)?;
        Ok(cfg)
    }

    /// Whether `key` was set explicitly rather than defaulted.
    pub fn is_set(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let s = &mut self.spec;
        match key {
            "group_size" => t.group_size = parse(key, value)?,
            "kl_weight" => t.kl_weight = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "steps" => t.steps = parse(key, value)?,
            "batch_queries" => t.batch_queries = parse(key, value)?,
            "reward_mode" => t.reward_mode = parse::<RewardMode>(key, value)?,
            "eps_std" => t.eps_std = parse(key, value)?,
            "eval_every" => t.eval_every = parse(key, value)?,
            "exclude_invalid_from_stats" => t.exclude_invalid_from_stats = parse(key, value)?,
            "seed" => {
                t.seed = parse(key, value)?;
                if !self.explicit.contains("testbed_seed") {
                    s.seed = t.seed;
                }
            }
            "temperature" => self.temperature = parse(key, value)?,
            "n" => s.n = parse(key, value)?,
            "dim" => s.dim = parse(key, value)?,
            "queries" => s.queries = parse(key, value)?,
            "disc_actions" => s.disc_actions = parse(key, value)?,
            "generic_actions" => s.generic_actions = parse(key, value)?,
            "generic_strength" => s.generic_strength = parse(key, value)?,
            "noise" => s.noise = parse(key, value)?,
            "testbed_seed" => s.seed = parse(key, value)?,
            "feature_dim" => {
                s.feature_dim = match value {
                    "onehot" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "backend" => self.backend = value.parse()?,
            "malform_rate" => {
                let r: f64 = parse(key, value)?;
                if !(0.0..=1.0).contains(&r) {
                    return Err(GrapeError::Parameter("malform_rate must lie in [0, 1]".into()));
                }
                self.malform_rate = r;
            }
            "template" => self.template = TemplateId::parse(value)?,
            "timeout_ms" => self.timeout_ms = parse(key, value)?,
            "testbed_dir" => self.testbed_dir = Some(PathBuf::from(value)),
            _ => return Err(GrapeError::Parameter(format!("unknown config key `{key}`"))),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Every setting as strings; feeding the result back through
    /// [`RunConfig::set`] reproduces this config.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        let t = &self.train;
        let s = &self.spec;
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("group_size", t.group_size.to_string());
        put("kl_weight", t.kl_weight.to_string());
        put("learning_rate", t.learning_rate.to_string());
        put("steps", t.steps.to_string());
        put("batch_queries", t.batch_queries.to_string());
        put("reward_mode", t.reward_mode.to_string());
        put("eps_std", t.eps_std.to_string());
        put("seed", t.seed.to_string());
        put("eval_every", t.eval_every.to_string());
        put("exclude_invalid_from_stats", t.exclude_invalid_from_stats.to_string());
        put("temperature", self.temperature.to_string());
        put("n", s.n.to_string());
        put("dim", s.dim.to_string());
        put("queries", s.queries.to_string());
        put("disc_actions", s.disc_actions.to_string());
        put("generic_actions", s.generic_actions.to_string());
        put("generic_strength", s.generic_strength.to_string());
        put("noise", s.noise.to_string());
        put("testbed_seed", s.seed.to_string());
        put(
            "feature_dim",
            s.feature_dim.map_or_else(|| "onehot".to_string(), |d| d.to_string()),
        );
        put("backend", self.backend.name().to_string());
        put("malform_rate", self.malform_rate.to_string());
        put("template", format!("{:?}", self.template).to_lowercase());
        put("timeout_ms", self.timeout_ms.to_string());
        if let Some(d) = &self.testbed_dir {
            put("testbed_dir", d.display().to_string());
        }
        m
    }

    /// The snapshot as a config file. Keys come out sorted, which puts
    /// `seed` ahead of `testbed_seed` so the latter wins on re-reading.
    pub fn to_text(&self) -> String {
        self.snapshot()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_round_trips() {
        let cfg = RunConfig::from_text(
            "# acceptance preset\nsteps = 12\nlearning_rate=2.0\nreward_mode = similarity\n\
             seed = 3\nfeature_dim = 16  # projected\nbackend = mock\nmalform_rate = 0.25\n",
        )
        .unwrap();
        assert_eq!(cfg.train.steps, 12);
        assert_eq!(cfg.train.learning_rate, 2.0);
        assert_eq!(cfg.train.reward_mode, RewardMode::Similarity);
        assert_eq!((cfg.train.seed, cfg.spec.seed), (3, 3));
        assert_eq!(cfg.spec.feature_dim, Some(16));
        assert_eq!(cfg.backend, Backend::Mock);
        assert!(cfg.is_set("learning_rate") && !cfg.is_set("kl_weight"));

        let again = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(again.snapshot(), cfg.snapshot());
    }

    #[test]
    fn testbed_seed_survives_seed() {
        let cfg = RunConfig::from_text("testbed_seed = 11\nseed = 2\n").unwrap();
        assert_eq!((cfg.train.seed, cfg.spec.seed), (2, 11));
        let cfg = RunConfig::from_text("seed = 2\ntestbed_seed = 11\n").unwrap();
        assert_eq!((cfg.train.seed, cfg.spec.seed), (2, 11));
    }

    #[test]
    fn errors_name_the_line() {
        let err = RunConfig::from_text("steps = 3\nlearning_rat = 1\n").unwrap_err();
        assert!(matches!(err, GrapeError::Parse { line: 2, .. }), "{err}");
        assert!(RunConfig::from_text("steps 3").is_err());
        assert!(RunConfig::from_text("malform_rate = 1.5").is_err());
        assert!(RunConfig::from_text("backend = http").is_err());
    }
}
