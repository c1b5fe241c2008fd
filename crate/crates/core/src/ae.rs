//! Visually guided enhancement: video and audio streams fused by channel
//! concatenation, one EleAtt-GRU layer, two dense layers and a sigmoid mask
//! applied to the noisy mel magnitude.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::gru::EleAttGruCell;
use crate::nn::{Builder, Linear};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::signal::{MagnitudeSpectrogram, MEL_BINS};
use crate::temporal::{Stream, StreamSpec, UnitKind};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeConfig {
    pub unit: UnitKind,
    pub video: StreamSpec,
    pub audio: StreamSpec,
    pub gru_units: usize,
    pub fc_units: usize,
    pub mel_bins: usize,
}

impl AeConfig {
    /// Published widths: 1536 (ResNet) or 520 (TCN) hidden, 256 stream
    /// outputs, 512 recurrent units, 600-wide dense layers.
    pub fn full(unit: UnitKind) -> Self {
        let hidden = match unit {
            UnitKind::Tcn => 520,
            UnitKind::ResNet1d => 1536,
        };
        Self {
            unit,
            video: StreamSpec::video(unit, hidden, 256),
            audio: StreamSpec::audio(unit, hidden, 256),
            gru_units: 512,
            fc_units: 600,
            mel_bins: MEL_BINS,
        }
    }

    /// Desk scale, roughly 1/16 of the published widths.
    pub fn desk(unit: UnitKind) -> Self {
        let hidden = match unit {
            UnitKind::Tcn => 32,
            UnitKind::ResNet1d => 48,
        };
        Self {
            unit,
            video: StreamSpec::video(unit, hidden, 16),
            audio: StreamSpec::audio(unit, hidden, 16),
            gru_units: 32,
            fc_units: 40,
            mel_bins: MEL_BINS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.video.unit != self.unit || self.audio.unit != self.unit {
            return config_err(format!(
                "stream unit kinds ({:?}, {:?}) differ from the model's {:?}",
                self.video.unit, self.audio.unit, self.unit
            ));
        }
        if self.gru_units == 0 || self.fc_units == 0 || self.mel_bins == 0 {
            return config_err("enhancement widths must be positive");
        }
        Ok(())
    }
}

/// The enhancement network. Parameter names start with the builder prefix.
#[derive(Clone, Debug)]
pub struct AeModel {
    pub video: Stream,
    pub audio: Stream,
    pub gru: EleAttGruCell,
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc_mask: Linear,
    pub config: AeConfig,
    pub visual_dim: usize,
}

impl AeModel {
    pub fn new(b: &mut Builder, config: &AeConfig, visual_dim: usize) -> Result<Self> {
        config.validate()?;
        let video = Stream::video(&mut b.sub("video"), &config.video, visual_dim)?;
        let audio = Stream::audio(&mut b.sub("audio"), &config.audio, config.mel_bins)?;
        let fused = video.out_width() + audio.out_width();
        let gru = EleAttGruCell::new(&mut b.sub("fusion/gru"), fused, config.gru_units)?;
        let fc1 = Linear::new(&mut b.sub("fusion/fc1"), config.gru_units, config.fc_units)?;
        let fc2 = Linear::new(&mut b.sub("fusion/fc2"), config.fc_units, config.fc_units)?;
        let fc_mask = Linear::new(
            &mut b.sub("fusion/fc_mask"),
            config.fc_units,
            config.mel_bins,
        )?;
        Ok(Self {
            video,
            audio,
            gru,
            fc1,
            fc2,
            fc_mask,
            config: config.clone(),
            visual_dim,
        })
    }

    pub fn unit(&self) -> UnitKind {
        self.config.unit
    }

    /// Makes the mask the constant `σ(logit)` by zeroing the last layer's
    /// weights; `logit = 0` gives exactly 0.5, large logits give exactly 1.
    pub fn force_mask_logit(&self, store: &mut ParamStore, logit: f64) {
        store.value_mut(self.fc_mask.w).data_mut().fill(0.0);
        store.value_mut(self.fc_mask.b).data_mut().fill(logit);
    }

    /// Mask from the fused `[4T, C]` features.
    pub fn fusion_head(&self, g: &mut Graph, fused: Var) -> Result<Var> {
        let h = self.gru.run_layer(g, fused, None)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.relu(h);
        let h = self.fc2.forward(g, h)?;
        let h = g.relu(h);
        let logits = self.fc_mask.forward(g, h)?;
        Ok(g.sigmoid(logits))
    }

    /// `v: [T, D]`, `m_noisy: [4T, F]` to `(mask, mask ⊙ m_noisy)`.
    pub fn forward(&self, g: &mut Graph, v: Var, m_noisy: Var) -> Result<(Var, Var)> {
        Ok(self.forward_many(g, &[(v, m_noisy)])?[0])
    }

    /// A batch of `(v, m_noisy)` pairs; batch norms share statistics.
    pub fn forward_many(&self, g: &mut Graph, pairs: &[(Var, Var)]) -> Result<Vec<(Var, Var)>> {
        let mut frames = Vec::with_capacity(pairs.len());
        for &(v, m_noisy) in pairs {
            let (sv, sm) = (g.shape(v).to_vec(), g.shape(m_noisy).to_vec());
            if sv.len() != 2 || sv[1] != self.visual_dim {
                return Err(Error::Dimension(format!(
                    "visual features {sv:?}, model expects width {}",
                    self.visual_dim
                )));
            }
            if sm.len() != 2 || sm[1] != self.config.mel_bins {
                return Err(Error::Dimension(format!(
                    "magnitudes {sm:?}, model expects {} bins",
                    self.config.mel_bins
                )));
            }
            if sm[0] != 4 * sv[0] {
                return Err(Error::Alignment(format!(
                    "{} audio frames with {} video frames",
                    sm[0], sv[0]
                )));
            }
            frames.push(sv[0]);
        }
        let vs: Vec<Var> = pairs.iter().map(|p| p.0).collect();
        let ms: Vec<Var> = pairs.iter().map(|p| p.1).collect();
        let fvs = self.video.forward_rows_many(g, &vs)?;
        let fas = self.audio.forward_rows_many(g, &ms)?;
        let mut out = Vec::with_capacity(pairs.len());
        for (((fv, fa), &m_noisy), t) in fvs.into_iter().zip(fas).zip(&ms).zip(frames) {
            if g.shape(fv)[0] != 4 * t || g.shape(fa)[0] != 4 * t {
                return Err(Error::Alignment(format!(
                    "streams produced {} and {} steps from {t} frames",
                    g.shape(fv)[0],
                    g.shape(fa)[0]
                )));
            }
            let fused = g.concat(&[fv, fa], 1)?;
            let mask = self.fusion_head(g, fused)?;
            let enhanced = g.mul(mask, m_noisy)?;
            out.push((mask, enhanced));
        }
        Ok(out)
    }
}

/// Evaluation-mode enhancement of one clip.
pub fn ae_forward(
    store: &ParamStore,
    model: &AeModel,
    v: &Tensor,
    m_noisy: &MagnitudeSpectrogram,
) -> Result<(Tensor, MagnitudeSpectrogram)> {
    let mut g = Graph::with_params(store);
    let vv = g.constant(v.clone());
    let mv = g.constant(m_noisy.frames().clone());
    let (mask, enh) = model.forward(&mut g, vv, mv)?;
    Ok((
        g.value(mask).clone(),
        MagnitudeSpectrogram::new(g.value(enh).clone())?,
    ))
}

/// One training example: features `[T, D]`, noisy and clean magnitudes `[4T, F]`.
#[derive(Clone, Debug)]
pub struct AeExample {
    pub visual: Tensor,
    pub noisy: Tensor,
    pub clean: Tensor,
}

/// Mean L1 between enhanced and clean magnitudes over the batch, one Adam
/// step. `seed` drives dropout.
pub fn ae_train_step(
    store: &mut ParamStore,
    model: &AeModel,
    opt: &mut Adam,
    batch: &[AeExample],
    seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Scheduling("empty enhancement batch".into()));
    }
    for ex in batch {
        if ex.noisy.shape() != ex.clean.shape() {
            return Err(Error::Alignment(format!(
                "noisy {:?} and clean {:?} magnitudes differ",
                ex.noisy.shape(),
                ex.clean.shape()
            )));
        }
    }
    let (total, grads) = {
        let mut g = Graph::with_params(store).training(seed);
        let pairs: Vec<(Var, Var)> = batch
            .iter()
            .map(|ex| (g.constant(ex.visual.clone()), g.constant(ex.noisy.clone())))
            .collect();
        let outs = model.forward_many(&mut g, &pairs)?;
        let mut total: Option<Var> = None;
        for (ex, (_, enh)) in batch.iter().zip(outs) {
            let c = g.constant(ex.clean.clone());
            let loss = g.l1_loss(enh, c)?;
            total = Some(match total {
                Some(t) => g.add(t, loss)?,
                None => loss,
            });
        }
        let total = g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64);
        let value = g.value(total).item();
        if !value.is_finite() {
            return Err(Error::Divergence(format!(
                "enhancement loss {value} (lr {})",
                opt.lr
            )));
        }
        (value, g.backward(total)?)
    };
    store.accumulate(&grads);
    opt.step(store)?;
    store.zero_grad();
    Ok(total)
}

/// `‖M − M_o‖₂ / ‖M_o‖₂` over all entries.
pub fn energy_error(m: &Tensor, m_o: &Tensor) -> Result<f64> {
    if m.shape() != m_o.shape() {
        return Err(Error::Dimension(format!(
            "energy error of {:?} against {:?}",
            m.shape(),
            m_o.shape()
        )));
    }
    let denom = m_o.norm();
    if denom == 0.0 {
        return Err(Error::DegenerateInput(
            "reference magnitude is all zero".into(),
        ));
    }
    let num = m
        .data()
        .iter()
        .zip(m_o.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(num / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded;

    fn tiny(unit: UnitKind) -> (ParamStore, AeModel) {
        let (mut store, mut rng) = seeded(5);
        let mut cfg = AeConfig::desk(unit);
        cfg.video = StreamSpec::video(unit, 6, 4);
        cfg.audio = StreamSpec::audio(unit, 6, 4);
        cfg.gru_units = 5;
        cfg.fc_units = 7;
        cfg.mel_bins = 8;
        let m = AeModel::new(&mut Builder::new(&mut store, &mut rng, "ae"), &cfg, 3).unwrap();
        (store, m)
    }

    #[test]
    fn constant_masks_are_exact() {
        for unit in [UnitKind::Tcn, UnitKind::ResNet1d] {
            let (mut store, m) = tiny(unit);
            let v = Tensor::full(&[2, 3], 0.3);
            let noisy = MagnitudeSpectrogram::new(Tensor::full(&[8, 8], 2.5)).unwrap();
            m.force_mask_logit(&mut store, 0.0);
            let (mask, enh) = ae_forward(&store, &m, &v, &noisy).unwrap();
            assert!(mask.data().iter().all(|&x| x == 0.5));
            assert!(enh.frames().data().iter().all(|&x| x == 1.25));
            m.force_mask_logit(&mut store, 800.0);
            let (_, enh) = ae_forward(&store, &m, &v, &noisy).unwrap();
            assert_eq!(enh, noisy);
        }
    }

    #[test]
    fn misaligned_inputs_are_alignment_errors() {
        let (store, m) = tiny(UnitKind::Tcn);
        let noisy = MagnitudeSpectrogram::new(Tensor::zeros(&[9, 8])).unwrap();
        let r = ae_forward(&store, &m, &Tensor::zeros(&[2, 3]), &noisy);
        assert!(matches!(r, Err(Error::Alignment(_))));
    }

    #[test]
    fn energy_error_identities() {
        let mo = Tensor::new(vec![2, 2], vec![1.0, 2.0, 0.0, 3.0]).unwrap();
        assert_eq!(energy_error(&mo, &mo).unwrap(), 0.0);
        assert!((energy_error(&mo.scale(2.0), &mo).unwrap() - 1.0).abs() < 1e-12);
        assert!((energy_error(&Tensor::zeros(&[2, 2]), &mo).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            energy_error(&mo, &Tensor::zeros(&[2, 2])),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn zero_batch_has_zero_loss() {
        let (mut store, m) = tiny(UnitKind::ResNet1d);
        let mut opt = Adam::new(1e-3).unwrap();
        let ex = AeExample {
            visual: Tensor::zeros(&[2, 3]),
            noisy: Tensor::zeros(&[8, 8]),
            clean: Tensor::zeros(&[8, 8]),
        };
        assert_eq!(
            ae_train_step(&mut store, &m, &mut opt, &[ex], 0).unwrap(),
            0.0
        );
    }
}
