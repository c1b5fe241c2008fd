//! Phase orchestration shared by the command-line tool, the examples and the
//! acceptance tests: model construction, the four training phases,
//! per-phase checkpoints and the mode-by-SNR evaluation table.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ae::AeModel;
use crate::checkpoint::Archive;
use crate::config::RunConfig;
use crate::corpus::{babble_sources, Utterance};
use crate::data::{noisy_set, prepare, NoiseMixer, Sample};
use crate::error::{config_err, Error, Result};
use crate::frontend::{Frontend, WordClassifier};
use crate::metrics::{ResultTable, Snr};
use crate::msr::{Mode, MsrModel};
use crate::nn::Builder;
use crate::params::ParamStore;
use crate::signal::{FeatureExtractor, MagnitudeSpectrogram};
use crate::train::{
    evaluate_wer, frontend_accuracy, split, train_ae, train_frontend, train_msr, word_clips,
    MsrTrainOptions,
};

/// Parameter name prefixes of the three sub-networks.
pub const VISUAL: &str = "visual/";
pub const AE: &str = "ae/";
pub const MSR: &str = "msr/";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Frontend,
    Ae,
    Msr,
    Joint,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Frontend, Phase::Ae, Phase::Msr, Phase::Joint];

    pub fn tag(self) -> &'static str {
        match self {
            Phase::Frontend => "frontend",
            Phase::Ae => "ae",
            Phase::Msr => "msr",
            Phase::Joint => "joint",
        }
    }

    /// Parameters this phase trains and checkpoints.
    pub fn prefix(self) -> &'static str {
        match self {
            Phase::Frontend => VISUAL,
            Phase::Ae => AE,
            Phase::Msr | Phase::Joint => MSR,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!("unknown phase '{s}' (frontend, ae, msr or joint)"))
            })
    }
}

/// All sub-networks over one parameter store.
#[derive(Clone, Debug)]
pub struct Models {
    pub classifier: WordClassifier,
    pub ae: AeModel,
    pub msr: MsrModel,
}

impl Models {
    /// Registers every parameter; initialization depends only on `cfg.seed`
    /// and the model section.
    pub fn build(cfg: &RunConfig) -> Result<(ParamStore, Models)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let classifier = WordClassifier::new(
            &mut Builder::new(&mut store, &mut rng, VISUAL),
            &cfg.model.frontend(),
            cfg.corpus.words.len(),
        )?;
        let width = classifier.frontend.out_width();
        let ae = AeModel::new(
            &mut Builder::new(&mut store, &mut rng, AE),
            &cfg.model.ae(),
            width,
        )?;
        let msr = MsrModel::new(
            &mut Builder::new(&mut store, &mut rng, MSR),
            &cfg.model.msr(),
            width,
        )?;
        Ok((
            store,
            Models {
                classifier,
                ae,
                msr,
            },
        ))
    }

    pub fn frontend(&self) -> &Frontend {
        &self.classifier.frontend
    }
}

/// `(train, test)` utterances; the split depends only on the eval section.
pub fn split_corpus(cfg: &RunConfig, utts: &[Utterance]) -> (Vec<Utterance>, Vec<Utterance>) {
    split(utts, cfg.eval.held_out, cfg.eval.split_seed)
}

pub fn babble(cfg: &RunConfig, fx: &FeatureExtractor) -> Result<NoiseMixer> {
    let n = cfg.ae_train.noise.n_sources;
    Ok(NoiseMixer::new(babble_sources(&cfg.corpus, n)?, fx.clone()))
}

/// Visual features of the current front end plus clean magnitudes.
pub fn features(
    store: &ParamStore,
    models: &Models,
    fx: &FeatureExtractor,
    utts: &[Utterance],
) -> Result<Vec<Sample>> {
    prepare(store, models.frontend(), fx, utts)
}

/// Word-classification pretraining of the front end; returns the final
/// training accuracy.
pub fn phase_frontend(
    store: &mut ParamStore,
    models: &Models,
    cfg: &RunConfig,
    train: &[Utterance],
    log: impl FnMut(usize, f64),
) -> Result<f64> {
    let clips = word_clips(train, &cfg.corpus.words)?;
    train_frontend(store, &models.classifier, &clips, &cfg.frontend_train, log)?;
    frontend_accuracy(store, &models.classifier, &clips)
}

pub fn phase_ae(
    store: &mut ParamStore,
    models: &Models,
    cfg: &RunConfig,
    train: &[Sample],
    mixer: &NoiseMixer,
    log: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    with_only_trainable(store, AE, |store| {
        train_ae(store, &models.ae, train, mixer, &cfg.ae_train, log)
    })
}

/// Recognizer training without an enhancer; audio is noisy only when
/// `opts.noise` is set.
pub fn phase_msr(
    store: &mut ParamStore,
    models: &Models,
    opts: &MsrTrainOptions,
    train: &[Sample],
    mixer: Option<&NoiseMixer>,
    log: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    with_only_trainable(store, MSR, |store| {
        train_msr(store, &models.msr, train, mixer, None, opts, log)
    })
}

/// Recognizer fine-tuning on enhanced audio; front end and enhancer stay
/// frozen.
pub fn phase_joint(
    store: &mut ParamStore,
    models: &Models,
    opts: &MsrTrainOptions,
    train: &[Sample],
    mixer: &NoiseMixer,
    log: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    with_only_trainable(store, MSR, |store| {
        train_msr(
            store,
            &models.msr,
            train,
            Some(mixer),
            Some(&models.ae),
            opts,
            log,
        )
    })
}

fn with_only_trainable<T>(
    store: &mut ParamStore,
    prefix: &str,
    f: impl FnOnce(&mut ParamStore) -> Result<T>,
) -> Result<T> {
    let frozen: Vec<bool> = store.iter().map(|(_, p)| p.frozen).collect();
    store.set_frozen("", true);
    store.set_frozen(prefix, false);
    let out = f(store);
    let ids: Vec<_> = store.ids().collect();
    for (id, was) in ids.into_iter().zip(frozen) {
        store.get_mut(id).frozen = was;
    }
    out
}

/// Writes the parameters a phase owns with `phase`, `steps` and the model
/// fingerprint as metadata.
pub fn save_phase(
    store: &ParamStore,
    cfg: &RunConfig,
    phase: Phase,
    steps: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Archive::from_store_prefix(store, phase.prefix())
        .with_meta("phase", phase)
        .with_meta("steps", steps)
        .with_meta("seed", cfg.seed)
        .with_meta("model", cfg.model.fingerprint())
        .save(path)
}

/// Loads a phase checkpoint; a phase or architecture mismatch is a
/// configuration error. Returns the recorded step count.
pub fn load_phase(
    store: &mut ParamStore,
    cfg: &RunConfig,
    phase: Phase,
    path: impl AsRef<Path>,
) -> Result<usize> {
    let path = path.as_ref();
    let a = Archive::load(path)?;
    let found = a.meta("phase")?;
    if found != phase.tag() {
        return config_err(format!(
            "{} holds a {found} checkpoint, expected {phase}",
            path.display()
        ));
    }
    let fp = cfg.model.fingerprint();
    if a.meta("model")? != fp {
        return config_err(format!(
            "{} was trained with model fingerprint {}, the configuration has {fp}",
            path.display(),
            a.meta("model")?
        ));
    }
    a.load_prefix_into(store, phase.prefix())?;
    a.meta("steps")?
        .parse()
        .map_err(|_| Error::Version(format!("{}: bad step count", path.display())))
}

/// Test audio per SNR row, reproducible from `eval.noise_seed`.
pub fn test_audio(
    cfg: &RunConfig,
    mixer: &NoiseMixer,
    test: &[Sample],
    snr: Snr,
) -> Result<Vec<MagnitudeSpectrogram>> {
    noisy_set(mixer, test, snr.db(), cfg.eval.noise_seed)
}

/// WER per (mode, SNR). Modes without enhancement use `recognizer`; VA and
/// VAV use `joint` when given (its enhancer and fine-tuned recognizer).
pub fn evaluate(
    cfg: &RunConfig,
    models: &Models,
    recognizer: &ParamStore,
    joint: Option<&ParamStore>,
    test: &[Sample],
    mixer: &NoiseMixer,
) -> Result<ResultTable> {
    let tags: Vec<&str> = cfg.eval.modes.iter().map(|m| m.tag()).collect();
    let mut table = ResultTable::new(&tags);
    for &snr in &cfg.eval.snr {
        let audio = test_audio(cfg, mixer, test, snr)?;
        for &mode in &cfg.eval.modes {
            let store = match (mode.needs_enhancer(), joint) {
                (true, Some(j)) => j,
                _ => recognizer,
            };
            let enhancer = mode.needs_enhancer().then_some(&models.ae);
            let wer = evaluate_wer(
                store,
                mode,
                test,
                &audio,
                enhancer,
                &models.msr,
                cfg.eval.max_len,
            )?;
            table.insert(mode.tag(), snr, wer);
        }
    }
    Ok(table)
}

/// Mean WER of each mode over several tables (one per seed).
pub fn mean_wer(tables: &[ResultTable], mode: Mode, snr: Snr) -> Option<f64> {
    let vals: Option<Vec<f64>> = tables.iter().map(|t| t.get(mode.tag(), snr)).collect();
    let vals = vals?;
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// The whole desk experiment on a freshly synthesized corpus, front end
/// left at its random initialization: enhancer, clean recognizer, then two
/// branches with equal step budgets. The baseline keeps training on clean
/// audio and scores A, V and AV; the joint branch fine-tunes on enhanced
/// babble mixtures and scores VA and VAV.
pub fn run_protocol(
    cfg: &RunConfig,
    mut log: impl FnMut(Phase, usize, f64),
) -> Result<ResultTable> {
    let fx = FeatureExtractor::default();
    let (mut store, models) = Models::build(cfg)?;
    let utts = crate::corpus::synth_corpus(&cfg.corpus)?;
    let (train, test) = split_corpus(cfg, &utts);
    let train = features(&store, &models, &fx, &train)?;
    let test = features(&store, &models, &fx, &test)?;
    let mixer = babble(cfg, &fx)?;

    phase_ae(&mut store, &models, cfg, &train, &mixer, |s, l| {
        log(Phase::Ae, s, l)
    })?;
    phase_msr(&mut store, &models, &cfg.msr_train, &train, None, |s, l| {
        log(Phase::Msr, s, l)
    })?;
    let mut baseline = store.clone();
    let clean = MsrTrainOptions {
        noise: None,
        ..cfg.joint_train.clone()
    };
    phase_msr(&mut baseline, &models, &clean, &train, None, |s, l| {
        log(Phase::Msr, s, l)
    })?;
    phase_joint(
        &mut store,
        &models,
        &cfg.joint_train,
        &train,
        &mixer,
        |s, l| log(Phase::Joint, s, l),
    )?;
    evaluate(cfg, &models, &baseline, Some(&store), &test, &mixer)
}
