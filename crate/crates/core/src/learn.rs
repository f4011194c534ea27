//! Learning the channel-combiner weights by minimizing a Focal-Dice loss
//! through the whole refinement loop.

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info};
use rayon::prelude::*;

use crate::error::{Result, SfsegError};
use crate::spectral::{combine_channels, segment_offline, ChannelWeights, SpectralConfig};
use crate::synth::SplitMix;
use crate::volume::{ChannelStack, VideoVolume};

/// Settings of the Focal-Dice loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Focal exponent applied to each frame's Dice deficit.
    pub gamma: f64,
    /// Smoothing term added to both sides of the Dice ratio.
    pub epsilon_dice: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 0.75,
            epsilon_dice: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(SfsegError::Parameter(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        if !(self.epsilon_dice.is_finite() && self.epsilon_dice > 0.0) {
            return Err(SfsegError::Parameter(format!(
                "epsilon_dice must be positive, got {}",
                self.epsilon_dice
            )));
        }
        Ok(())
    }
}

/// Sum over frames of `(1 - (2I + e) / (A + B + e))^gamma`.
pub fn focal_dice_loss(x: &VideoVolume, gt: &VideoVolume, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    x.ensure_same_shape(gt, "prediction vs ground truth")?;
    gt.ensure_binary("ground truth")?;
    x.ensure_range(0.0, 1.0, "prediction")?;
    let eps = cfg.epsilon_dice;
    let mut total = 0.0;
    for t in 0..x.frames() {
        let (mut i, mut a, mut b) = (0.0, 0.0, 0.0);
        for (&p, &g) in x.frame(t).iter().zip(gt.frame(t)) {
            i += p * g;
            a += p;
            b += g;
        }
        let deficit = (1.0 - (2.0 * i + eps) / (a + b + eps)).max(0.0);
        total += deficit.powf(cfg.gamma);
    }
    Ok(total)
}

/// Combiner weights for the unary map and, optionally, separate ones for the
/// pairwise map. Without them both maps share `unary`.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineWeights {
    pub unary: ChannelWeights,
    pub pairwise: Option<ChannelWeights>,
}

impl PipelineWeights {
    /// The uniform average `w_i = 1/n`, `b = 0`.
    pub fn initial(n_channels: usize, independent_pairwise: bool) -> Self {
        let cw = ChannelWeights::uniform(n_channels);
        PipelineWeights {
            pairwise: independent_pairwise.then(|| cw.clone()),
            unary: cw,
        }
    }

    pub fn shared(unary: ChannelWeights) -> Self {
        PipelineWeights {
            unary,
            pairwise: None,
        }
    }

    pub fn n_channels(&self) -> usize {
        self.unary.len()
    }

    pub fn n_params(&self) -> usize {
        let n = self.n_channels() + 1;
        if self.pairwise.is_some() {
            2 * n
        } else {
            n
        }
    }

    pub fn pairwise_weights(&self) -> &ChannelWeights {
        self.pairwise.as_ref().unwrap_or(&self.unary)
    }

    /// `[w_0.., b]` followed by the pairwise block when present.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        for cw in std::iter::once(&self.unary).chain(self.pairwise.as_ref()) {
            v.extend_from_slice(&cw.w);
            v.push(cw.b);
        }
        v
    }

    /// Same layout as `self`, values from `params`.
    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        if params.len() != self.n_params() {
            return Err(SfsegError::Shape(format!(
                "{} parameters for a model with {}",
                params.len(),
                self.n_params()
            )));
        }
        let n = self.n_channels();
        let unary = ChannelWeights::new(params[..n].to_vec(), params[n])?;
        let pairwise = match self.pairwise {
            Some(_) => Some(ChannelWeights::new(
                params[n + 1..2 * n + 1].to_vec(),
                params[2 * n + 1],
            )?),
            None => None,
        };
        Ok(PipelineWeights { unary, pairwise })
    }

    /// Name of parameter `i` in the text format.
    pub fn param_name(&self, i: usize) -> String {
        let n = self.n_channels();
        match i {
            i if i < n => format!("w_{i}"),
            i if i == n => "b".into(),
            i if i < 2 * n + 1 => format!("fw_{}", i - n - 1),
            _ => "fb".into(),
        }
    }

    /// One `name=value` line per parameter.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, v) in self.to_vec().iter().enumerate() {
            let _ = writeln!(out, "{}={v:.16e}", self.param_name(i));
        }
        out
    }

    /// Parses the [`to_text`](Self::to_text) format. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut w: Vec<Option<f64>> = Vec::new();
        let mut fw: Vec<Option<f64>> = Vec::new();
        let (mut b, mut fb) = (None, None);
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| SfsegError::Format(format!("weights line {}: {msg}", lineno + 1));
            let (name, value) = line.split_once('=').ok_or_else(|| bad("expected name=value"))?;
            let (name, value) = (name.trim(), value.trim());
            let value: f64 = value.parse().map_err(|_| bad(&format!("bad number {value:?}")))?;
            let slot = match name {
                "b" => &mut b,
                "fb" => &mut fb,
                _ => {
                    let (list, idx) = if let Some(i) = name.strip_prefix("fw_") {
                        (&mut fw, i)
                    } else if let Some(i) = name.strip_prefix("w_") {
                        (&mut w, i)
                    } else {
                        return Err(bad(&format!("unknown key {name:?}")));
                    };
                    let idx: usize = idx.parse().map_err(|_| bad(&format!("bad index in {name:?}")))?;
                    if list.len() <= idx {
                        list.resize(idx + 1, None);
                    }
                    &mut list[idx]
                }
            };
            if slot.replace(value).is_some() {
                return Err(bad(&format!("duplicate key {name:?}")));
            }
        }
        let collect = |list: Vec<Option<f64>>, prefix: &str| -> Result<Vec<f64>> {
            list.into_iter()
                .enumerate()
                .map(|(i, v)| v.ok_or_else(|| SfsegError::Format(format!("missing {prefix}_{i}"))))
                .collect()
        };
        let w = collect(w, "w")?;
        let b = b.ok_or_else(|| SfsegError::Format("missing b".into()))?;
        let unary = ChannelWeights::new(w, b)?;
        let pairwise = match (fw.is_empty(), fb) {
            (true, None) => None,
            (false, Some(fb)) => {
                let fw = collect(fw, "fw")?;
                if fw.len() != unary.len() {
                    return Err(SfsegError::Format(format!(
                        "{} pairwise weights for {} channels",
                        fw.len(),
                        unary.len()
                    )));
                }
                Some(ChannelWeights::new(fw, fb)?)
            }
            _ => return Err(SfsegError::Format("pairwise weights need both fw_i and fb".into())),
        };
        Ok(PipelineWeights { unary, pairwise })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SfsegError::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| SfsegError::io(path, e))
    }
}

/// Channels of one training video and its binary ground truth.
#[derive(Debug, Clone)]
pub struct TrainingInstance {
    pub channels: ChannelStack,
    /// Channels for the pairwise map; the unary channels are reused when absent.
    pub pairwise_channels: Option<ChannelStack>,
    pub gt: VideoVolume,
}

impl TrainingInstance {
    pub fn new(channels: ChannelStack, gt: VideoVolume) -> Result<Self> {
        if channels.shape() != gt.shape() {
            return Err(SfsegError::Shape(format!(
                "channels are {} but the ground truth is {}",
                channels.shape(),
                gt.shape()
            )));
        }
        gt.ensure_binary("ground truth")?;
        Ok(TrainingInstance {
            channels,
            pairwise_channels: None,
            gt,
        })
    }

    pub fn with_pairwise(mut self, pairwise: ChannelStack) -> Result<Self> {
        if pairwise.shape() != self.gt.shape() || pairwise.len() != self.channels.len() {
            return Err(SfsegError::Shape(
                "pairwise channels must match the unary channels in shape and count".into(),
            ));
        }
        self.pairwise_channels = Some(pairwise);
        Ok(self)
    }

    /// Frames `start..end` of every volume.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        Ok(TrainingInstance {
            channels: self.channels.slice_frames(start, end)?,
            pairwise_channels: match &self.pairwise_channels {
                Some(p) => Some(p.slice_frames(start, end)?),
                None => None,
            },
            gt: self.gt.slice_frames(start, end)?,
        })
    }

    /// Runs combine, refine and loss for one instance.
    pub fn loss(&self, weights: &PipelineWeights, spectral: &SpectralConfig, loss: &LossConfig) -> Result<f64> {
        let s = combine_channels(&self.channels, &weights.unary)?;
        let f = combine_channels(
            self.pairwise_channels.as_ref().unwrap_or(&self.channels),
            weights.pairwise_weights(),
        )?;
        let x = segment_offline(&s, &f, spectral, None)?;
        focal_dice_loss(&x, &self.gt, loss)
    }
}

/// Mean loss over a batch.
pub fn batch_loss(
    batch: &[TrainingInstance],
    weights: &PipelineWeights,
    spectral: &SpectralConfig,
    loss: &LossConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(SfsegError::Validation("training batch is empty".into()));
    }
    let mut total = 0.0;
    for inst in batch {
        total += inst.loss(weights, spectral, loss)?;
    }
    Ok(total / batch.len() as f64)
}

/// Central-difference gradient of `f` at `params`.
///
/// Components are evaluated in parallel and assembled in index order. A
/// non-finite value at a perturbed point is reported with `name(i)`.
pub fn fd_gradient_with<F, N>(f: F, params: &[f64], h: f64, name: N) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
    N: Fn(usize) -> String + Sync,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(SfsegError::Parameter(format!("finite-difference step must be positive, got {h}")));
    }
    (0..params.len())
        .into_par_iter()
        .map(|i| {
            let eval = |delta: f64, sign: &str| -> Result<f64> {
                let mut p = params.to_vec();
                p[i] += delta;
                let v = f(&p)?;
                if !v.is_finite() {
                    return Err(SfsegError::Numeric(format!(
                        "loss is {v} at {} {sign} {h}",
                        name(i)
                    )));
                }
                Ok(v)
            };
            Ok((eval(h, "+")? - eval(-h, "-")?) / (2.0 * h))
        })
        .collect()
}

/// Finite-difference gradient of [`batch_loss`] with respect to every weight.
pub fn fd_gradient(
    weights: &PipelineWeights,
    batch: &[TrainingInstance],
    spectral: &SpectralConfig,
    loss: &LossConfig,
    h: f64,
) -> Result<Vec<f64>> {
    fd_gradient_with(
        |p| batch_loss(batch, &weights.with_params(p)?, spectral, loss),
        &weights.to_vec(),
        h,
        |i| weights.param_name(i),
    )
}

/// Hyper-parameters of the optimizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str, v: f64| {
            if ok {
                Ok(())
            } else {
                Err(SfsegError::Parameter(format!("{what} out of range: {v}")))
            }
        };
        check(self.lr.is_finite() && self.lr > 0.0, "learning rate", self.lr)?;
        check((0.0..1.0).contains(&self.beta1), "beta1", self.beta1)?;
        check((0.0..1.0).contains(&self.beta2), "beta2", self.beta2)?;
        check(self.eps.is_finite() && self.eps > 0.0, "eps", self.eps)?;
        check(
            self.weight_decay.is_finite() && self.weight_decay >= 0.0,
            "weight decay",
            self.weight_decay,
        )
    }
}

/// Moment estimates of the adaptive optimizer with decoupled weight decay and
/// a running maximum of the second moment.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub v_max: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(n_params: usize, cfg: &OptimizerConfig) -> Self {
        OptimizerState {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            v_max: vec![0.0; n_params],
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// Updates the moments with `grad` and moves `params` in place.
pub fn optimizer_step(state: &mut OptimizerState, params: &mut [f64], grad: &[f64]) -> Result<()> {
    if params.len() != state.m.len() || grad.len() != state.m.len() {
        return Err(SfsegError::Shape(format!(
            "optimizer holds {} parameters, got {} values and {} gradients",
            state.m.len(),
            params.len(),
            grad.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let decay = 1.0 - state.lr * state.weight_decay;
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        state.v_max[i] = state.v_max[i].max(state.v[i]);
        let m_hat = state.m[i] / c1;
        let v_hat = state.v_max[i] / c2;
        params[i] = params[i] * decay - state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Settings of the training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub fd_step: f64,
    pub optimizer: OptimizerConfig,
    /// Epochs without relative improvement before the learning rate drops.
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub plateau_threshold: f64,
    /// When set, each epoch's gradient uses one random clip of this many
    /// consecutive frames per instance.
    pub clip_frames: Option<usize>,
    pub independent_pairwise: bool,
    /// Starting weights; the uniform average when absent.
    pub initial: Option<PipelineWeights>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            fd_step: 1e-4,
            optimizer: OptimizerConfig::default(),
            plateau_patience: 10,
            plateau_factor: 0.5,
            plateau_threshold: 1e-4,
            clip_frames: None,
            independent_pairwise: false,
            initial: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if !(self.fd_step.is_finite() && self.fd_step > 0.0) {
            return Err(SfsegError::Parameter(format!(
                "finite-difference step must be positive, got {}",
                self.fd_step
            )));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(SfsegError::Parameter(format!(
                "plateau factor must be in (0, 1], got {}",
                self.plateau_factor
            )));
        }
        if !(self.plateau_threshold.is_finite() && self.plateau_threshold >= 0.0) {
            return Err(SfsegError::Parameter(format!(
                "plateau threshold must be non-negative, got {}",
                self.plateau_threshold
            )));
        }
        if self.clip_frames == Some(0) {
            return Err(SfsegError::Parameter("clip length must be positive".into()));
        }
        Ok(())
    }
}

/// Training-set loss and learning rate at the start of an epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights with the lowest recorded training loss.
    pub weights: PipelineWeights,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// `epoch,loss,lr` rows.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,lr\n");
    for r in history {
        let _ = writeln!(out, "{},{:.16e},{:.16e}", r.epoch, r.loss, r.lr);
    }
    out
}

/// Learns combiner weights by gradient descent on the mean Focal-Dice loss.
///
/// Record `e` of the history holds the full training-set loss after `e`
/// optimizer steps. The returned weights are those with the lowest recorded
/// loss, so the result never scores worse than the initial weights.
pub fn train(
    instances: &[TrainingInstance],
    spectral: &SpectralConfig,
    loss: &LossConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    spectral.validate()?;
    loss.validate()?;
    let first = instances
        .first()
        .ok_or_else(|| SfsegError::Validation("no training instances".into()))?;
    let n = first.channels.len();
    if instances.iter().any(|i| i.channels.len() != n) {
        return Err(SfsegError::Validation(
            "training instances have different channel counts".into(),
        ));
    }

    let mut weights = match &cfg.initial {
        Some(w) if w.n_channels() != n => {
            return Err(SfsegError::Shape(format!(
                "initial weights cover {} channels, the data has {n}",
                w.n_channels()
            )))
        }
        Some(w) => w.clone(),
        None => PipelineWeights::initial(n, cfg.independent_pairwise),
    };
    let mut params = weights.to_vec();
    let mut state = OptimizerState::new(params.len(), &cfg.optimizer);
    let mut rng = SplitMix::new(cfg.seed);
    let mut history: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs + 1);

    let diverged = |history: &[EpochRecord], epoch: usize, loss: f64| SfsegError::Training {
        epoch,
        loss,
        history: history.iter().map(|r| r.loss).collect(),
    };

    let mut best = (f64::INFINITY, 0usize, weights.clone());
    let mut plateau_ref = f64::INFINITY;
    let mut stale = 0usize;
    for epoch in 0..=cfg.epochs {
        let current = match batch_loss(instances, &weights, spectral, loss) {
            Ok(v) if v.is_finite() => v,
            Ok(v) => return Err(diverged(&history, epoch, v)),
            Err(e) if e.is_numeric() => return Err(diverged(&history, epoch, f64::NAN)),
            Err(e) => return Err(e),
        };
        history.push(EpochRecord {
            epoch,
            loss: current,
            lr: state.lr,
        });
        debug!("epoch {epoch}: loss {current:.6e}, lr {:.3e}", state.lr);
        if current < best.0 {
            best = (current, epoch, weights.clone());
        }
        if epoch == cfg.epochs {
            break;
        }

        if current < plateau_ref * (1.0 - cfg.plateau_threshold) {
            plateau_ref = current;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.plateau_patience {
                state.lr *= cfg.plateau_factor;
                stale = 0;
                debug!("plateau at epoch {epoch}; learning rate now {:.3e}", state.lr);
            }
        }

        let clipped;
        let batch = match cfg.clip_frames {
            Some(q) => {
                clipped = instances
                    .iter()
                    .map(|inst| {
                        let nf = inst.gt.frames();
                        if nf <= q {
                            Ok(inst.clone())
                        } else {
                            let start = rng.below(nf - q + 1);
                            inst.slice_frames(start, start + q)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                &clipped[..]
            }
            None => instances,
        };
        let grad = match fd_gradient(&weights, batch, spectral, loss, cfg.fd_step) {
            Ok(g) => g,
            Err(e) if e.is_numeric() => return Err(diverged(&history, epoch, f64::NAN)),
            Err(e) => return Err(e),
        };
        optimizer_step(&mut state, &mut params, &grad)?;
        weights = match weights.with_params(&params) {
            Ok(w) => w,
            Err(_) => return Err(diverged(&history, epoch + 1, f64::NAN)),
        };
    }
    let (best_loss, best_epoch, weights) = best;
    info!(
        "trained {} epochs; best loss {best_loss:.6e} at epoch {best_epoch} (initial {:.6e})",
        cfg.epochs, history[0].loss
    );
    Ok(TrainOutcome {
        weights,
        best_epoch,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{ensemble_channels, generate, SynthShape, SynthSpec};
    use crate::volume::Shape;
    use proptest::prelude::*;

    fn vol(f: usize, h: usize, w: usize, data: Vec<f64>) -> VideoVolume {
        VideoVolume::from_dims(f, h, w, data).unwrap()
    }

    fn small_video(seed: u64) -> VideoVolume {
        generate(&SynthSpec {
            frames: 4,
            height: 12,
            width: 12,
            shape: SynthShape::Rectangle { height: 4, width: 5 },
            start: Some((3, 2)),
            velocity: (0, 1),
            seed,
        })
        .unwrap()
        .mask
    }

    fn small_spectral() -> SpectralConfig {
        SpectralConfig {
            n_iter: 3,
            n_cont: 1,
            ..SpectralConfig::default()
        }
    }

    #[test]
    fn perfect_overlap_is_zero() {
        let gt = small_video(0);
        for gamma in [0.5, 0.75, 1.0, 2.0] {
            let cfg = LossConfig { gamma, ..LossConfig::default() };
            assert!(focal_dice_loss(&gt, &gt, &cfg).unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn disjoint_is_one_per_frame() {
        let a = vol(2, 1, 2, vec![1., 0., 1., 0.]);
        let b = vol(2, 1, 2, vec![0., 1., 0., 1.]);
        let l = focal_dice_loss(&a, &b, &LossConfig::default()).unwrap();
        assert!((l - 2.0).abs() < 1e-6);
    }

    #[test]
    fn half_prediction_example() {
        let x = vol(1, 2, 2, vec![0.5; 4]);
        let gt = vol(1, 2, 2, vec![1., 0., 0., 0.]);
        let cfg = LossConfig { gamma: 1.0, epsilon_dice: 1e-12 };
        assert!((focal_dice_loss(&x, &gt, &cfg).unwrap() - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn loss_validation() {
        let x = vol(1, 1, 2, vec![0.5, 0.5]);
        let soft = vol(1, 1, 2, vec![0.5, 1.0]);
        assert!(matches!(
            focal_dice_loss(&x, &soft, &LossConfig::default()),
            Err(SfsegError::Validation(_))
        ));
        let other = vol(1, 2, 1, vec![1.0, 0.0]);
        assert!(matches!(
            focal_dice_loss(&x, &other, &LossConfig::default()),
            Err(SfsegError::Shape(_))
        ));
        let bad = LossConfig { gamma: 0.0, ..LossConfig::default() };
        assert!(focal_dice_loss(&x, &x.map(|_| 1.0).unwrap(), &bad).is_err());
    }

    #[test]
    fn quadratic_seam_gradient() {
        let p = vec![0.3, -1.2, 2.0];
        let g = fd_gradient_with(|p| Ok(p.iter().map(|v| v * v).sum()), &p, 1e-3, |i| format!("p{i}")).unwrap();
        for (gi, pi) in g.iter().zip(&p) {
            assert!((gi - 2.0 * pi).abs() < 1e-9);
        }
    }

    fn seam(p: &[f64]) -> Result<f64> {
        Ok(p.iter().enumerate().map(|(i, v)| (v * (i + 1) as f64).sin() + v.exp()).sum())
    }

    fn seam_grad(p: &[f64]) -> Vec<f64> {
        p.iter()
            .enumerate()
            .map(|(i, v)| (i + 1) as f64 * (v * (i + 1) as f64).cos() + v.exp())
            .collect()
    }

    #[test]
    fn richardson_ratio_on_seam() {
        let p = vec![0.4, -0.7, 1.1];
        let exact = seam_grad(&p);
        let err = |h: f64| -> Vec<f64> {
            let g = fd_gradient_with(seam, &p, h, |i| i.to_string()).unwrap();
            g.iter().zip(&exact).map(|(a, b)| (a - b).abs()).collect()
        };
        let (e1, e2) = (err(0.1), err(0.05));
        for i in 0..p.len() {
            let ratio = e1[i] / e2[i];
            assert!((3.0..=5.0).contains(&ratio), "component {i}: ratio {ratio}");
        }
    }

    #[test]
    fn halving_step_is_consistent() {
        let p = vec![0.4, -0.7, 1.1];
        let g1 = fd_gradient_with(seam, &p, 1e-3, |i| i.to_string()).unwrap();
        let g2 = fd_gradient_with(seam, &p, 5e-4, |i| i.to_string()).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-6f64.max(0.25 * b.abs()));
        }
    }

    #[test]
    fn non_finite_loss_names_parameter() {
        let err = fd_gradient_with(
            |p| Ok(if p[1] > 0.5 { f64::NAN } else { 0.0 }),
            &[0.0, 0.5],
            1e-3,
            |i| format!("w_{i}"),
        )
        .unwrap_err();
        assert!(err.is_numeric());
        assert!(err.to_string().contains("w_1"), "{err}");
        assert!(fd_gradient_with(seam, &[0.0], 0.0, |i| i.to_string()).is_err());
    }

    #[test]
    fn flat_channel_has_zero_gradient() {
        let gt = small_video(0);
        let zero = VideoVolume::zeros(gt.shape());
        let inst = TrainingInstance::new(ChannelStack::new(vec![gt.clone(), zero]).unwrap(), gt).unwrap();
        let w = PipelineWeights::initial(2, false);
        let g = fd_gradient(&w, &[inst], &small_spectral(), &LossConfig::default(), 1e-3).unwrap();
        assert!(g[1].abs() < 1e-8);
        assert!(g[0] < 0.0, "clean channel should want a larger weight: {g:?}");
    }

    #[test]
    fn richardson_ratio_on_pipeline() {
        let gt = small_video(3);
        let noise = ensemble_channels(&gt, 1, 1, 5).unwrap();
        let inst = TrainingInstance::new(noise, gt).unwrap();
        let w = PipelineWeights::initial(2, false);
        let (sp, lc) = (small_spectral(), LossConfig { gamma: 1.0, ..LossConfig::default() });
        let reference = fd_gradient(&w, &[inst.clone()], &sp, &lc, 1e-4).unwrap();
        let err = |h: f64| -> Vec<f64> {
            let g = fd_gradient(&w, &[inst.clone()], &sp, &lc, h).unwrap();
            g.iter().zip(&reference).map(|(a, b)| (a - b).abs()).collect()
        };
        let (e1, e2) = (err(0.1), err(0.05));
        let i = (0..reference.len())
            .max_by(|&a, &b| reference[a].abs().total_cmp(&reference[b].abs()))
            .unwrap();
        let ratio = e1[i] / e2[i];
        assert!((3.0..=5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn optimizer_examples() {
        let cfg = OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::default() };
        let mut st = OptimizerState::new(2, &cfg);
        let mut p = vec![0.3, -2.0];
        optimizer_step(&mut st, &mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![0.3, -2.0]);

        let cfg = OptimizerConfig { weight_decay: 0.5, lr: 0.1, ..OptimizerConfig::default() };
        let mut st = OptimizerState::new(2, &cfg);
        let mut p = vec![0.3, -2.0];
        optimizer_step(&mut st, &mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![0.3 * (1.0 - 0.05), -2.0 * (1.0 - 0.05)]);

        let cfg = OptimizerConfig { weight_decay: 0.0, lr: 0.1, ..OptimizerConfig::default() };
        let mut st = OptimizerState::new(1, &cfg);
        let mut p = vec![1.0];
        optimizer_step(&mut st, &mut p, &[1.0]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!(optimizer_step(&mut st, &mut p, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let cfg = OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::default() };
        let mut st = OptimizerState::new(2, &cfg);
        let mut p = vec![0.0, 0.0];
        let mut prev = p.clone();
        for _ in 0..50 {
            optimizer_step(&mut st, &mut p, &[2.0, -0.5]).unwrap();
            assert!(p[0] < prev[0] && p[1] > prev[1]);
            prev = p.clone();
        }
        assert!(st.v.iter().chain(&st.v_max).all(|&v| v >= 0.0));
    }

    #[test]
    fn weights_text_round_trip() {
        let w = PipelineWeights::shared(ChannelWeights::new(vec![0.1, -3.25e-7, 12.5], 0.3).unwrap());
        let text = w.to_text();
        assert!(text.starts_with("w_0=1.0000000000000001e-1\n"));
        assert_eq!(PipelineWeights::from_text(&text).unwrap(), w);

        let mut ind = PipelineWeights::initial(2, true);
        ind.pairwise.as_mut().unwrap().b = -1.5;
        let back = PipelineWeights::from_text(&ind.to_text()).unwrap();
        assert_eq!(back, ind);
        assert!(ind.to_text().contains("fb=-1.5"));
    }

    #[test]
    fn weights_text_errors() {
        assert!(PipelineWeights::from_text("w_0=1\n").is_err());
        assert!(PipelineWeights::from_text("w_1=1\nb=0\n").is_err());
        assert!(PipelineWeights::from_text("w_0=1\nw_0=2\nb=0\n").is_err());
        assert!(PipelineWeights::from_text("w_0=x\nb=0\n").is_err());
        assert!(PipelineWeights::from_text("w_0=1\nb=0\nfb=1\n").is_err());
        assert!(PipelineWeights::from_text("# note\n\nw_0 = 1\nb = 0\n").is_ok());
    }

    #[test]
    fn zero_epochs_returns_initial() {
        let gt = small_video(1);
        let inst = TrainingInstance::new(ensemble_channels(&gt, 1, 2, 4).unwrap(), gt).unwrap();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let out = train(&[inst], &small_spectral(), &LossConfig::default(), &cfg).unwrap();
        assert_eq!(out.weights, PipelineWeights::initial(3, false));
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.best_epoch, 0);
    }

    #[test]
    fn single_clean_channel_learns() {
        let gt = generate(&SynthSpec {
            frames: 5,
            height: 16,
            width: 16,
            shape: SynthShape::Rectangle { height: 8, width: 10 },
            start: Some((1, 1)),
            velocity: (0, 1),
            seed: 0,
        })
        .unwrap()
        .mask;
        let inst = TrainingInstance::new(ChannelStack::single(gt.clone()), gt).unwrap();
        let sp = SpectralConfig::default();
        let cfg = TrainConfig {
            epochs: 200,
            fd_step: 1e-3,
            optimizer: OptimizerConfig { lr: 0.1, ..OptimizerConfig::default() },
            initial: Some(PipelineWeights::shared(ChannelWeights::new(vec![0.0], 0.0).unwrap())),
            ..TrainConfig::default()
        };
        let out = train(&[inst], &sp, &LossConfig::default(), &cfg).unwrap();
        let initial = out.history[0].loss;
        let best = out.history[out.best_epoch].loss;
        assert!(out.weights.unary.w[0] > 1.0);
        assert!(best < 0.1 * initial, "{best} vs {initial}");
    }

    #[test]
    fn training_is_deterministic_and_beats_baseline() {
        let gt = small_video(4);
        let inst = TrainingInstance::new(ensemble_channels(&gt, 2, 3, 9).unwrap(), gt).unwrap();
        let cfg = TrainConfig {
            epochs: 15,
            fd_step: 1e-3,
            optimizer: OptimizerConfig { lr: 0.1, ..OptimizerConfig::default() },
            clip_frames: Some(3),
            seed: 11,
            ..TrainConfig::default()
        };
        let (sp, lc) = (small_spectral(), LossConfig::default());
        let a = train(&[inst.clone()], &sp, &lc, &cfg).unwrap();
        let b = train(&[inst.clone()], &sp, &lc, &cfg).unwrap();
        assert_eq!(a.weights.to_text(), b.weights.to_text());
        assert_eq!(history_csv(&a.history), history_csv(&b.history));
        let baseline = batch_loss(&[inst.clone()], &PipelineWeights::initial(5, false), &sp, &lc).unwrap();
        let learned = batch_loss(&[inst], &a.weights, &sp, &lc).unwrap();
        assert!(learned < baseline);
    }

    #[test]
    fn train_errors() {
        let sp = small_spectral();
        let lc = LossConfig::default();
        assert!(train(&[], &sp, &lc, &TrainConfig::default()).is_err());
        let gt = small_video(0);
        let a = TrainingInstance::new(ChannelStack::single(gt.clone()), gt.clone()).unwrap();
        let b = TrainingInstance::new(ensemble_channels(&gt, 1, 1, 0).unwrap(), gt).unwrap();
        assert!(train(&[a, b], &sp, &lc, &TrainConfig::default()).is_err());
        let shape = Shape::new(1, 2, 2).unwrap();
        assert!(TrainingInstance::new(
            ChannelStack::single(VideoVolume::zeros(shape)),
            VideoVolume::filled(shape, 0.5).unwrap()
        )
        .is_err());
    }

    #[test]
    fn history_csv_layout() {
        let csv = history_csv(&[EpochRecord { epoch: 0, loss: 0.5, lr: 0.01 }]);
        assert_eq!(csv, "epoch,loss,lr\n0,5.0000000000000000e-1,1.0000000000000000e-2\n");
    }

    proptest! {
        #[test]
        fn loss_permutation_invariant(
            xs in proptest::collection::vec(0.0f64..=1.0, 9),
            mask in proptest::collection::vec(any::<bool>(), 9),
            rot in 0usize..9,
        ) {
            let gt: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
            let (mut xr, mut gr) = (xs.clone(), gt.clone());
            xr.rotate_left(rot);
            gr.rotate_left(rot);
            let cfg = LossConfig::default();
            let a = focal_dice_loss(&vol(1, 3, 3, xs), &vol(1, 3, 3, gt), &cfg).unwrap();
            let b = focal_dice_loss(&vol(1, 3, 3, xr), &vol(1, 3, 3, gr), &cfg).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
