//! Run configuration: built-in defaults, then a preset, then the TOML file,
//! then command-line flags.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use pass_core::nn::NormKind;
use pass_core::prompts::PromptConfig;
use pass_core::tta::{
    BaselineConfig, LossKind, OfflineConfig, OnlineConfig, UpdateScheme, DEFAULT_FLOOR, DEFAULT_LR, DEFAULT_M0,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Method {
    Pass,
    SourceOnly,
    Ptbn,
    Tent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Online,
    Offline,
}

/// Hyperparameter pairs for slowly and quickly drifting streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// omega 0.94, lr 0.005
    Slow,
    /// omega 0.6, lr 0.01
    Fast,
}

impl Preset {
    fn omega(self) -> f64 {
        match self {
            Preset::Slow => 0.94,
            Preset::Fast => 0.6,
        }
    }

    fn lr(self) -> f64 {
        match self {
            Preset::Slow => 0.005,
            Preset::Fast => 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub augment: bool,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = pass_core::bench::PretrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            augment: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSection {
    pub method: Method,
    pub mode: Mode,
    pub loss: LossKind,
    pub preset: Option<Preset>,
    /// Falls back to the preset, then to the built-in default.
    pub lr: Option<f64>,
    pub omega: Option<f64>,
    pub m0: f64,
    pub c: f64,
    pub steps_per_sample: usize,
    pub scheme: UpdateScheme,
    /// Offline mode only.
    pub epochs: usize,
    pub batch_size: usize,
    pub update_running_stats: bool,
}

impl Default for AdaptSection {
    fn default() -> Self {
        Self {
            method: Method::Pass,
            mode: Mode::Online,
            loss: LossKind::Tent,
            preset: None,
            lr: None,
            omega: None,
            m0: DEFAULT_M0,
            c: DEFAULT_FLOOR,
            steps_per_sample: 1,
            scheme: UpdateScheme::Amu,
            epochs: OfflineConfig::default().epochs,
            batch_size: OfflineConfig::default().batch_size,
            update_running_stats: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    /// Bank size `L`.
    pub bank_size: usize,
    pub top_k: f64,
    pub id_norm: String,
    pub use_id: bool,
    pub use_capm: bool,
}

impl Default for PromptSection {
    fn default() -> Self {
        let d = PromptConfig::default();
        Self {
            bank_size: d.bank_size,
            top_k: d.top_k,
            id_norm: d.id_norm.to_string(),
            use_id: d.use_id,
            use_capm: d.use_capm,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Benchmark description for `gen`.
    pub spec: Option<PathBuf>,
    /// Root holding one directory per domain.
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Target domains; empty means every target of the benchmark.
    pub domains: Vec<String>,
    pub out: Option<PathBuf>,
    pub pretrain: PretrainSection,
    pub adapt: AdaptSection,
    pub prompts: PromptSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::missing(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Fills preset-dependent values and checks ranges.
    pub fn resolve(mut self) -> CliResult<Self> {
        let a = &mut self.adapt;
        a.lr = Some(a.lr.unwrap_or_else(|| a.preset.map_or(DEFAULT_LR, Preset::lr)));
        a.omega = Some(a.omega.unwrap_or_else(|| a.preset.map_or(0.94, Preset::omega)));
        self.id_norm()?;
        self.prompt_config(8, 8, 1)?.validate()?;
        pass_core::tta::MomentumSchedule::new(self.adapt.m0, self.omega(), self.adapt.c)?;
        if self.lr().is_nan() || self.lr() <= 0.0 {
            return Err(CliError::Config(format!(
                "learning rate {} must be positive",
                self.lr()
            )));
        }
        if self.adapt.batch_size == 0 || self.pretrain.batch_size == 0 {
            return Err(CliError::Config("batch sizes must be positive".into()));
        }
        Ok(self)
    }

    pub fn lr(&self) -> f64 {
        self.adapt.lr.unwrap_or(DEFAULT_LR)
    }

    pub fn omega(&self) -> f64 {
        self.adapt.omega.unwrap_or(0.94)
    }

    pub fn id_norm(&self) -> CliResult<NormKind> {
        self.prompts
            .id_norm
            .parse()
            .map_err(|_| CliError::Config(format!("unknown normalization {:?}", self.prompts.id_norm)))
    }

    pub fn prompt_config(&self, channels: usize, extent: usize, in_channels: usize) -> CliResult<PromptConfig> {
        Ok(PromptConfig {
            in_channels,
            channels,
            extent: (extent, extent),
            bank_size: self.prompts.bank_size,
            top_k: self.prompts.top_k,
            id_norm: self.id_norm()?,
            use_id: self.prompts.use_id,
            use_capm: self.prompts.use_capm,
            ..PromptConfig::default()
        })
    }

    pub fn online(&self) -> OnlineConfig {
        OnlineConfig {
            loss: self.adapt.loss,
            lr: self.lr(),
            steps_per_sample: self.adapt.steps_per_sample,
            scheme: self.adapt.scheme,
            m0: self.adapt.m0,
            omega: self.omega(),
            c: self.adapt.c,
            update_running_stats: self.adapt.update_running_stats,
            ..OnlineConfig::default()
        }
    }

    pub fn offline(&self) -> OfflineConfig {
        OfflineConfig {
            loss: self.adapt.loss,
            lr: self.lr(),
            epochs: self.adapt.epochs,
            batch_size: self.adapt.batch_size,
            seed: self.seed,
            update_running_stats: self.adapt.update_running_stats,
            ..OfflineConfig::default()
        }
    }

    pub fn baseline(&self) -> BaselineConfig {
        BaselineConfig {
            lr: self.lr(),
            steps_per_sample: self.adapt.steps_per_sample,
        }
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Short label for reports, e.g. `pass-online-amu` or `pass-online-amu-no_capm`.
    pub fn label(&self) -> String {
        let a = &self.adapt;
        let method = serde_json::to_value(a.method)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string));
        let mut s = method.unwrap_or_default();
        if a.method == Method::Pass {
            s += match a.mode {
                Mode::Online => "-online",
                Mode::Offline => "-offline",
            };
            if a.mode == Mode::Online {
                s += &format!("-{}", a.scheme);
            }
            if !self.prompts.use_id {
                s += "-no_id";
            }
            if !self.prompts.use_capm {
                s += "-no_capm";
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        let c = c.resolve().unwrap();
        assert_eq!(c.prompts.bank_size, 64);
        assert_eq!(c.prompts.top_k, 0.1);
        assert_eq!(c.omega(), 0.94);
        assert_eq!(c.adapt.m0, 0.1);
        assert_eq!(c.adapt.c, 0.005);
        assert_eq!(c.lr(), DEFAULT_LR);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[adapt]\nomgea = 0.5").is_err());
        assert!(toml::from_str::<RunConfig>("[prompts]\nL = 5").is_err());
    }

    #[test]
    fn preset_fills_only_unset_values() {
        let c: RunConfig = toml::from_str("[adapt]\npreset = \"fast\"\nlr = 0.02").unwrap();
        let c = c.resolve().unwrap();
        assert_eq!(c.omega(), 0.6);
        assert_eq!(c.lr(), 0.02);
        let c: RunConfig = toml::from_str("[adapt]\npreset = \"slow\"").unwrap();
        let c = c.resolve().unwrap();
        assert_eq!((c.omega(), c.lr()), (0.94, 0.005));
    }

    #[test]
    fn echo_round_trips() {
        let text = "seed = 3\ndomains = [\"a\"]\n[adapt]\nmethod = \"tent\"\nscheme = \"continual\"\n[prompts]\nid_norm = \"BN*\"\n";
        let c = toml::from_str::<RunConfig>(text).unwrap().resolve().unwrap();
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.resolve().unwrap(), c);
    }

    #[test]
    fn invalid_values() {
        for text in [
            "[prompts]\nid_norm = \"XN\"",
            "[prompts]\ntop_k = 0.0",
            "[adapt]\nomega = 1.5",
            "[adapt]\nlr = -1.0",
            "[adapt]\nbatch_size = 0",
            "[adapt]\nmethod = \"bogus\"",
        ] {
            let r = toml::from_str::<RunConfig>(text)
                .map_err(|e| CliError::Config(e.to_string()))
                .and_then(RunConfig::resolve);
            assert!(r.is_err(), "{text}");
        }
    }

    #[test]
    fn labels() {
        let mut c = RunConfig::default();
        assert_eq!(c.label(), "pass-online-amu");
        c.prompts.use_capm = false;
        assert_eq!(c.label(), "pass-online-amu-no_capm");
        c.adapt.method = Method::SourceOnly;
        assert_eq!(c.label(), "source_only");
    }
}
