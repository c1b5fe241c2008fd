//! Run configuration: one TOML file with a section per phase. Missing
//! sections and fields take the desk-scale defaults.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ae::AeConfig;
use crate::corpus::CorpusConfig;
use crate::error::{config_err, Error, Result};
use crate::frontend::P3dConfig;
use crate::metrics::Snr;
use crate::msr::{Curriculum, Mode, MsrConfig};
use crate::signal::NoiseSpec;
use crate::temporal::UnitKind;
use crate::train::{AeTrainOptions, FrontendTrainOptions, LrSchedule, ModeMix, MsrTrainOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Full,
}

/// Architecture choices; everything that changes parameter shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub scale: Scale,
    pub unit: UnitKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scale: Scale::Desk,
            unit: UnitKind::ResNet1d,
        }
    }
}

impl ModelConfig {
    pub fn frontend(&self) -> P3dConfig {
        match self.scale {
            Scale::Desk => P3dConfig::desk(),
            Scale::Full => P3dConfig::full(),
        }
    }

    pub fn ae(&self) -> AeConfig {
        match self.scale {
            Scale::Desk => AeConfig::desk(self.unit),
            Scale::Full => AeConfig::full(self.unit),
        }
    }

    pub fn msr(&self) -> MsrConfig {
        match self.scale {
            Scale::Desk => MsrConfig::desk(),
            Scale::Full => MsrConfig::full(),
        }
    }

    /// FNV-1a of the serialized section; stored in checkpoints so that
    /// weights are never loaded into a differently shaped model.
    pub fn fingerprint(&self) -> String {
        let text = toml::to_string(self).expect("model config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Sentences held out of every training phase.
    pub held_out: usize,
    pub split_seed: u64,
    pub snr: Vec<Snr>,
    pub modes: Vec<Mode>,
    /// Babble draws for the test mixtures.
    pub noise_seed: u64,
    /// Longest greedy decode, in characters.
    pub max_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            held_out: 20,
            split_seed: 7,
            snr: vec![Snr::Clean, Snr::Db(0)],
            modes: Mode::ALL.to_vec(),
            noise_seed: 1000,
            max_len: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Parameter initialization.
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub frontend_train: FrontendTrainOptions,
    pub ae_train: AeTrainOptions,
    pub msr_train: MsrTrainOptions,
    /// Recognizer fine-tuning on enhanced audio with the enhancer frozen.
    pub joint_train: MsrTrainOptions,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let desk_lr = LrSchedule {
            initial: 1e-3,
            ..LrSchedule::default()
        };
        Self {
            seed: 0,
            corpus: CorpusConfig {
                sentences: 80,
                ..CorpusConfig::default()
            },
            model: ModelConfig::default(),
            frontend_train: FrontendTrainOptions::default(),
            ae_train: AeTrainOptions {
                steps: 500,
                lr: desk_lr,
                noise: NoiseSpec {
                    p_n: 1.0,
                    ..NoiseSpec::default()
                },
                ..AeTrainOptions::default()
            },
            msr_train: MsrTrainOptions {
                steps: 2000,
                lr: LrSchedule {
                    patience: 6,
                    ..desk_lr
                },
                curriculum: Curriculum {
                    grow_every: 300,
                    ..Curriculum::default()
                },
                ..MsrTrainOptions::default()
            },
            joint_train: MsrTrainOptions {
                steps: 1000,
                lr: LrSchedule {
                    initial: 5e-4,
                    ..LrSchedule::default()
                },
                curriculum: Curriculum {
                    start_words: 1,
                    grow_every: 1,
                    max_words: None,
                },
                modes: ModeMix::default(),
                noise: Some(NoiseSpec::default()),
                ..MsrTrainOptions::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.frontend().validate()?;
        self.model.ae().validate()?;
        self.model.msr().validate()?;
        for (name, o) in [
            ("msr_train", &self.msr_train),
            ("joint_train", &self.joint_train),
        ] {
            o.curriculum.validate()?;
            o.modes.validate()?;
            if let Some(n) = &o.noise {
                n.validate()?;
            }
            if o.batch == 0 {
                return config_err(format!("{name}: batch must be positive"));
            }
        }
        self.ae_train.noise.validate()?;
        if self.ae_train.batch == 0 || self.frontend_train.batch == 0 {
            return config_err("batch sizes must be positive");
        }
        if self.eval.held_out >= self.corpus.sentences {
            return config_err(format!(
                "holding out {} of {} sentences leaves nothing to train on",
                self.eval.held_out, self.corpus.sentences
            ));
        }
        if self.eval.max_len == 0 {
            return config_err("eval.max_len must be positive");
        }
        Ok(())
    }
}
