//! The `avsr` command line. Everything lives under one data root:
//!
//! ```text
//! <root>/config.toml            run configuration (written by synth-corpus)
//! <root>/corpus/                manifest.tsv, <id>.wav, <id>.clip
//! <root>/features/              cached front-end features, <id>.feat
//! <root>/checkpoints/<phase>.avsr
//! ```

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::ae::{ae_forward, energy_error};
use crate::checkpoint::Archive;
use crate::config::RunConfig;
use crate::corpus::{read_corpus, synth_corpus, write_corpus, Utterance};
use crate::data::{load_feature_cache, save_feature_cache, Sample};
use crate::error::{config_err, Error, Result};
use crate::metrics::{wer_str, Snr};
use crate::msr::{run_mode, Mode, ModeInput};
use crate::params::ParamStore;
use crate::pipeline::{self, Models, Phase};
use crate::signal::FeatureExtractor;
use crate::train::window_means;

pub const DATA_ROOT_ENV: &str = "AVSR_DATA_ROOT";

#[derive(Debug, Parser)]
#[command(
    name = "avsr",
    version,
    about = "Visually guided enhancement and audio-visual recognition on a synthetic corpus"
)]
pub struct Cli {
    /// Data root holding corpus, features, checkpoints and config.
    #[arg(long, env = DATA_ROOT_ENV, default_value = "data")]
    pub data_root: PathBuf,
    /// Run configuration; defaults to <root>/config.toml when present.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured initialization seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic audio-visual corpus.
    SynthCorpus(SynthArgs),
    /// Run one training phase: frontend, ae, msr or joint.
    Train(TrainArgs),
    /// WER table by mode and SNR on the held-out sentences.
    Eval(EvalArgs),
    /// Dump mask and magnitudes of one utterance.
    Enhance(EnhanceArgs),
    /// Transcribe one utterance.
    Decode(DecodeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub sentences: Option<usize>,
    /// Replace an existing corpus.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub phase: Phase,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Print the loss every this many steps.
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Comma-separated SNR rows, e.g. clean,0,-5.
    #[arg(long, value_delimiter = ',')]
    pub snr: Vec<Snr>,
    #[arg(long, value_delimiter = ',')]
    pub modes: Vec<Mode>,
    /// Also write the table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub id: String,
    #[arg(long, default_value = "0")]
    pub snr: Snr,
    /// Output archive; defaults to <root>/enhanced/<id>.avsr.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub id: String,
    #[arg(long, default_value = "VAV")]
    pub mode: Mode,
    #[arg(long, default_value = "clean")]
    pub snr: Snr,
}

/// Resolved data root and configuration.
pub struct Workspace {
    pub root: PathBuf,
    pub config: RunConfig,
    pub fx: FeatureExtractor,
}

impl Workspace {
    pub fn open(cli: &Cli) -> Result<Self> {
        let root = cli.data_root.clone();
        let from_root = root.join("config.toml");
        let mut config = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None if from_root.exists() => RunConfig::load(&from_root)?,
            None => RunConfig::default(),
        };
        if let Some(s) = cli.seed {
            config.seed = s;
        }
        config.validate()?;
        Ok(Self {
            root,
            config,
            fx: FeatureExtractor::default(),
        })
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn checkpoint(&self, phase: Phase) -> PathBuf {
        self.root.join("checkpoints").join(format!("{phase}.avsr"))
    }

    fn features_dir(&self) -> PathBuf {
        self.root.join("features")
    }

    pub fn corpus(&self) -> Result<Vec<Utterance>> {
        read_corpus(self.corpus_dir())
    }

    /// Fresh models with every existing checkpoint among `phases` loaded.
    pub fn models(&self, phases: &[Phase]) -> Result<(ParamStore, Models)> {
        let (mut store, models) = Models::build(&self.config)?;
        for &p in phases {
            let path = self.checkpoint(p);
            if path.exists() {
                pipeline::load_phase(&mut store, &self.config, p, &path)?;
            }
        }
        Ok((store, models))
    }

    fn require(&self, phase: Phase, why: &str) -> Result<PathBuf> {
        let p = self.checkpoint(phase);
        if !p.exists() {
            return config_err(format!(
                "{why} needs a {phase} checkpoint; run `avsr train {phase}` first"
            ));
        }
        Ok(p)
    }

    /// Samples with cached features; the cache is rebuilt when its stamp
    /// does not match the front end that would produce it.
    pub fn samples(
        &self,
        store: &ParamStore,
        models: &Models,
        utts: &[Utterance],
    ) -> Result<Vec<Sample>> {
        let stamp = self.feature_stamp()?;
        let dir = self.features_dir();
        let stamp_file = dir.join("stamp");
        if fs::read_to_string(&stamp_file).ok().as_deref() == Some(stamp.as_str()) {
            if let Ok(s) = load_feature_cache(&dir, &self.fx, utts) {
                return Ok(s);
            }
        }
        let samples = pipeline::features(store, models, &self.fx, utts)?;
        save_feature_cache(&dir, &samples)?;
        fs::write(stamp_file, stamp)?;
        Ok(samples)
    }

    fn feature_stamp(&self) -> Result<String> {
        let fp = self.config.model.fingerprint();
        let p = self.checkpoint(Phase::Frontend);
        let trained = if p.exists() {
            let a = Archive::load(&p)?;
            format!("trained:{}", a.meta("steps")?)
        } else {
            "init".to_string()
        };
        Ok(format!("{fp}:{}:{trained}", self.config.seed))
    }

    fn find(&self, utts: &[Utterance], id: &str) -> Result<usize> {
        utts.iter().position(|u| u.id == id).ok_or_else(|| {
            Error::Format(format!(
                "no utterance '{id}' in {}",
                self.corpus_dir().display()
            ))
        })
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let ws = Workspace::open(&cli)?;
    match cli.command {
        Command::SynthCorpus(a) => synth(ws, a),
        Command::Train(a) => train(ws, a),
        Command::Eval(a) => eval(ws, a),
        Command::Enhance(a) => enhance(ws, a),
        Command::Decode(a) => decode(ws, a),
    }
}

fn synth(mut ws: Workspace, a: SynthArgs) -> Result<()> {
    if let Some(n) = a.sentences {
        ws.config.corpus.sentences = n;
        ws.config.validate()?;
    }
    let dir = ws.corpus_dir();
    if dir.join("manifest.tsv").exists() && !a.force {
        return config_err(format!(
            "{} already holds a corpus (use --force)",
            dir.display()
        ));
    }
    let utts = synth_corpus(&ws.config.corpus)?;
    write_corpus(&dir, &utts)?;
    fs::write(ws.root.join("config.toml"), ws.config.to_toml())?;
    let _ = fs::remove_dir_all(ws.root.join("features"));
    let frames: usize = utts.iter().map(|u| u.frames()).sum();
    println!(
        "wrote {} utterances ({frames} video frames) to {}",
        utts.len(),
        dir.display()
    );
    Ok(())
}

fn train(mut ws: Workspace, a: TrainArgs) -> Result<()> {
    let phase = a.phase;
    if let Some(s) = a.steps {
        match phase {
            Phase::Frontend => ws.config.frontend_train.steps = s,
            Phase::Ae => ws.config.ae_train.steps = s,
            Phase::Msr => ws.config.msr_train.steps = s,
            Phase::Joint => ws.config.joint_train.steps = s,
        }
    }
    if phase == Phase::Joint {
        ws.require(Phase::Ae, "joint training")?;
        ws.require(Phase::Msr, "joint training")?;
    }
    let utts = ws.corpus()?;
    let (train_utts, _) = pipeline::split_corpus(&ws.config, &utts);
    let loaded: &[Phase] = match phase {
        Phase::Frontend => &[Phase::Frontend],
        Phase::Ae => &[Phase::Frontend, Phase::Ae],
        Phase::Msr => &[Phase::Frontend, Phase::Msr],
        Phase::Joint => &[Phase::Frontend, Phase::Ae, Phase::Msr],
    };
    let (mut store, models) = ws.models(loaded)?;
    let every = a.log_every.max(1);
    let log = |s: usize, l: f64| {
        if s % every == 0 {
            eprintln!("{phase} step {s:>6} loss {l:.4}");
        }
    };
    let cfg = ws.config.clone();
    let steps = match phase {
        Phase::Frontend => {
            let acc = pipeline::phase_frontend(&mut store, &models, &cfg, &train_utts, log)?;
            println!("word accuracy on training clips {:.3}", acc);
            cfg.frontend_train.steps
        }
        Phase::Ae => {
            let train = ws.samples(&store, &models, &train_utts)?;
            let mixer = pipeline::babble(&cfg, &ws.fx)?;
            let losses = pipeline::phase_ae(&mut store, &models, &cfg, &train, &mixer, log)?;
            report(&losses);
            cfg.ae_train.steps
        }
        Phase::Msr => {
            let train = ws.samples(&store, &models, &train_utts)?;
            let mixer = cfg
                .msr_train
                .noise
                .as_ref()
                .map(|_| pipeline::babble(&cfg, &ws.fx))
                .transpose()?;
            let losses = pipeline::phase_msr(
                &mut store,
                &models,
                &cfg.msr_train,
                &train,
                mixer.as_ref(),
                log,
            )?;
            report(&losses);
            cfg.msr_train.steps
        }
        Phase::Joint => {
            let train = ws.samples(&store, &models, &train_utts)?;
            let mixer = pipeline::babble(&cfg, &ws.fx)?;
            let losses =
                pipeline::phase_joint(&mut store, &models, &cfg.joint_train, &train, &mixer, log)?;
            report(&losses);
            cfg.joint_train.steps
        }
    };
    let path = ws.checkpoint(phase);
    pipeline::save_phase(&store, &cfg, phase, steps, &path)?;
    if phase == Phase::Frontend {
        ws.samples(&store, &models, &utts)?;
    }
    println!("saved {}", path.display());
    Ok(())
}

fn report(losses: &[f64]) {
    let w = (losses.len() / 10).max(1);
    if let Some(last) = window_means(losses, w).last() {
        println!("final mean loss {last:.4} over the last {w} steps");
    }
}

fn eval(mut ws: Workspace, a: EvalArgs) -> Result<()> {
    if !a.snr.is_empty() {
        ws.config.eval.snr = a.snr;
    }
    if !a.modes.is_empty() {
        ws.config.eval.modes = a.modes;
    }
    ws.require(Phase::Msr, "evaluation")?;
    let needs_ae = ws.config.eval.modes.iter().any(|m| m.needs_enhancer());
    if needs_ae {
        ws.require(Phase::Ae, "evaluating VA or VAV")?;
    }
    let utts = ws.corpus()?;
    let (_, test_utts) = pipeline::split_corpus(&ws.config, &utts);
    let (store, models) = ws.models(&[Phase::Frontend, Phase::Ae, Phase::Msr])?;
    let test = ws.samples(&store, &models, &test_utts)?;
    let joint = if ws.checkpoint(Phase::Joint).exists() {
        let mut j = store.clone();
        pipeline::load_phase(
            &mut j,
            &ws.config,
            Phase::Joint,
            ws.checkpoint(Phase::Joint),
        )?;
        Some(j)
    } else {
        None
    };
    let mixer = pipeline::babble(&ws.config, &ws.fx)?;
    let table = pipeline::evaluate(&ws.config, &models, &store, joint.as_ref(), &test, &mixer)?;
    println!("WER (%) on {} held-out sentences", test.len());
    print!("{}", table.to_text());
    if let Some(p) = a.csv {
        fs::write(&p, table.to_csv())?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

/// One utterance as a sample plus its mixture at `snr`.
fn single(
    ws: &Workspace,
    store: &ParamStore,
    models: &Models,
    id: &str,
    snr: Snr,
) -> Result<(Sample, crate::signal::MagnitudeSpectrogram)> {
    let utts = ws.corpus()?;
    let i = ws.find(&utts, id)?;
    let samples = ws.samples(store, models, &utts)?;
    let sample = samples.into_iter().nth(i).expect("index from find");
    let mixer = pipeline::babble(&ws.config, &ws.fx)?;
    let noisy =
        pipeline::test_audio(&ws.config, &mixer, std::slice::from_ref(&sample), snr)?.remove(0);
    Ok((sample, noisy))
}

fn enhance(ws: Workspace, a: EnhanceArgs) -> Result<()> {
    ws.require(Phase::Ae, "enhancement")?;
    let (store, models) = ws.models(&[Phase::Frontend, Phase::Ae])?;
    let (sample, noisy) = single(&ws, &store, &models, &a.id, a.snr)?;
    let (mask, enhanced) = ae_forward(&store, &models.ae, &sample.visual, &noisy)?;
    let before = energy_error(noisy.frames(), sample.clean.frames())?;
    let after = energy_error(enhanced.frames(), sample.clean.frames())?;
    let mut out = Archive::new()
        .with_meta("id", &a.id)
        .with_meta("snr", a.snr)
        .with_meta("energy_error_noisy", before)
        .with_meta("energy_error_enhanced", after);
    out.push("mask", mask);
    out.push("noisy", noisy.frames().clone());
    out.push("enhanced", enhanced.frames().clone());
    out.push("clean", sample.clean.frames().clone());
    let path = a
        .out
        .unwrap_or_else(|| ws.root.join("enhanced").join(format!("{}.avsr", a.id)));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    out.save(&path)?;
    println!(
        "{} at {} dB: energy error {before:.4} noisy, {after:.4} enhanced",
        a.id, a.snr
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn decode(ws: Workspace, a: DecodeArgs) -> Result<()> {
    ws.require(Phase::Msr, "decoding")?;
    if a.mode.needs_enhancer() {
        ws.require(Phase::Ae, "decoding with enhancement")?;
    }
    let (mut store, models) = ws.models(&[Phase::Frontend, Phase::Ae, Phase::Msr])?;
    if a.mode.needs_enhancer() && ws.checkpoint(Phase::Joint).exists() {
        pipeline::load_phase(
            &mut store,
            &ws.config,
            Phase::Joint,
            ws.checkpoint(Phase::Joint),
        )?;
    }
    let (sample, noisy) = single(&ws, &store, &models, &a.id, a.snr)?;
    let input = ModeInput {
        noisy: &noisy,
        visual: &sample.visual,
    };
    let enhancer = a.mode.needs_enhancer().then_some(&models.ae);
    let hyp = run_mode(
        &store,
        a.mode,
        &input,
        enhancer,
        &models.msr,
        ws.config.eval.max_len,
    )?;
    let reference = sample.target.text();
    println!("ref: {reference}");
    println!("hyp: {hyp}");
    println!("wer: {:.3}", wer_str(&reference, &hyp)?.wer);
    Ok(())
}
