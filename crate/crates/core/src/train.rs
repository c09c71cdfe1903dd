//! Binary cross-entropy, Adam, plateau / early-stopping callbacks and the
//! epoch loop.

use crate::data::augment::{augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};

/// Probabilities are clamped to `[CLAMP, 1 - CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy and its gradient with respect to each
/// (clamped) probability.
pub fn bce_loss<S: Scalar>(p: &Tensor<S>, labels: &[u8]) -> Result<(f64, Tensor<S>)> {
    if p.numel() != labels.len() {
        return Err(Error::shape(format!(
            "{} probabilities for {} labels",
            p.numel(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Label(format!("label {bad} is not 0 or 1")));
    }
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(labels.len());
    for (&pv, &y) in p.data().iter().zip(labels) {
        let q = pv.to_f64().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let y = y as f64;
        loss -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
        grad.push(S::from_f64((-y / q + (1.0 - y) / (1.0 - q)) / n));
    }
    Ok((loss / n, Tensor::from_vec(p.shape(), grad)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S: Scalar = f32> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<S>>) -> Self {
        let m: Vec<_> = params.into_iter().map(|p| p.zeros_like()).collect();
        AdamState {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

pub fn adam_step<S: Scalar>(
    params: &mut [&mut Tensor<S>],
    grads: &[&Tensor<S>],
    state: &mut AdamState<S>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Usage(format!(
            "adam step over {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Usage(format!(
                "adam: parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gv = gv.to_f64();
            let mj = b1 * m[j].to_f64() + (1.0 - b1) * gv;
            let vj = b2 * v[j].to_f64() + (1.0 - b2) * gv * gv;
            m[j] = S::from_f64(mj);
            v[j] = S::from_f64(vj);
            let step = cfg.learning_rate * (mj / c1) / ((vj / c2).sqrt() + cfg.epsilon);
            *pv = S::from_f64(pv.to_f64() - step);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.5,
            patience: 2,
            min_delta: 1e-4,
            min_lr: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EarlyStopConfig {
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        EarlyStopConfig {
            patience: 4,
            min_delta: 1e-4,
        }
    }
}

/// Epoch-level monitor of validation loss shared by both callbacks (each
/// callback owns its own instance).
#[derive(Clone, Debug, PartialEq)]
pub struct CallbackState {
    pub best_val_loss: f64,
    pub epochs_since_improvement: usize,
    pub current_lr: f64,
    pub halted: bool,
}

impl CallbackState {
    pub fn new(lr: f64) -> Self {
        CallbackState {
            best_val_loss: f64::INFINITY,
            epochs_since_improvement: 0,
            current_lr: lr,
            halted: false,
        }
    }

    /// Improvement means `val_loss < best - min_delta`; anything else
    /// (including NaN) bumps the counter.
    fn observe(&mut self, val_loss: f64, min_delta: f64) {
        if val_loss < self.best_val_loss - min_delta {
            self.best_val_loss = val_loss;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
    }
}

pub fn reduce_lr_on_plateau(state: &mut CallbackState, val_loss: f64, cfg: &PlateauConfig) {
    state.observe(val_loss, cfg.min_delta);
    if state.epochs_since_improvement > cfg.patience {
        state.current_lr = (state.current_lr * cfg.factor).max(cfg.min_lr);
        state.epochs_since_improvement = 0;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Halt,
}

pub fn early_stopping(state: &mut CallbackState, val_loss: f64, cfg: &EarlyStopConfig) -> Decision {
    state.observe(val_loss, cfg.min_delta);
    if state.epochs_since_improvement > cfg.patience {
        state.halted = true;
    }
    if state.halted {
        Decision::Halt
    } else {
        Decision::Continue
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau: PlateauConfig,
    pub early_stop: EarlyStopConfig,
    pub seed: u64,
    /// Applied to every training sample each epoch when set.
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 32,
            max_epochs: 10,
            plateau: PlateauConfig::default(),
            early_stop: EarlyStopConfig::default(),
            seed: 0,
            augment: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.adam.learning_rate > 0.0) {
            return bad(format!("learning rate {} must be positive", self.adam.learning_rate));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam.epsilon > 0.0) {
            return bad("adam epsilon must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.plateau.factor > 0.0 && self.plateau.factor < 1.0) {
            return bad(format!("plateau factor {} outside (0, 1)", self.plateau.factor));
        }
        if self.plateau.patience == 0 || self.early_stop.patience == 0 {
            return bad("callback patience must be at least 1".into());
        }
        if self.plateau.min_lr < 0.0 || self.plateau.min_delta < 0.0 || self.early_stop.min_delta < 0.0 {
            return bad("min_lr and min_delta must be non-negative".into());
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

/// Preprocessed images (`[c, h, w]` each) with binary labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::Label(format!("label {bad} is not 0 or 1")));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<u8>)> {
        let imgs: Vec<&Tensor> = idx.iter().map(|&i| &self.images[i]).collect();
        Ok((Tensor::stack(&imgs)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub learning_rate: f64,
}

/// Loss, accuracy (threshold 0.5) and per-sample probabilities in Eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub probabilities: Vec<f64>,
}

pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut probabilities = Vec::with_capacity(data.len());
    let mut loss_sum = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let p = model.infer(&x)?;
        loss_sum += bce_loss(&p, &y)?.0 * chunk.len() as f64;
        probabilities.extend(p.data().iter().map(|&v| v as f64));
    }
    let correct = probabilities
        .iter()
        .zip(&data.labels)
        .filter(|(&p, &y)| (p >= 0.5) == (y == 1))
        .count();
    Ok(Evaluation {
        loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
        probabilities,
    })
}

/// Stateful epoch-by-epoch trainer. [`train`] drives it to completion;
/// callers that need to inspect the model between epochs step it directly.
pub struct Trainer {
    model: Model,
    cfg: TrainConfig,
    adam: AdamState,
    rng: SeededRng,
    plateau: CallbackState,
    stopper: CallbackState,
    epochs_done: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(model.params());
        Ok(Trainer {
            rng: SeededRng::new(cfg.seed),
            plateau: CallbackState::new(cfg.adam.learning_rate),
            stopper: CallbackState::new(cfg.adam.learning_rate),
            adam,
            model,
            cfg,
            epochs_done: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn learning_rate(&self) -> f64 {
        self.plateau.current_lr
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    fn train_batch(&mut self, x: &Tensor, y: &[u8], lr: f64) -> Result<(f64, usize)> {
        let (p, caches) = self.model.forward_train(x, &mut self.rng)?;
        let (loss, dp) = bce_loss(&p, y)?;
        let correct = p
            .data()
            .iter()
            .zip(y)
            .filter(|(&p, &y)| (p >= 0.5) == (y == 1))
            .count();
        let grads = self.model.backward(&caches, &dp)?;
        drop(caches);
        let grads: Vec<&Tensor> = grads.iter().flatten().collect();
        let cfg = AdamConfig {
            learning_rate: lr,
            ..self.cfg.adam
        };
        adam_step(&mut self.model.params_mut(), &grads, &mut self.adam, &cfg)?;
        Ok((loss, correct))
    }

    /// One pass over `train` (shuffled, mini-batched, Train mode) followed by
    /// Eval-mode validation and both callbacks.
    pub fn run_epoch(&mut self, train: &Dataset, val: &Dataset) -> Result<(EpochLog, Decision)> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Data("training and validation sets must be non-empty".into()));
        }
        let epoch = self.epochs_done + 1;
        let lr = self.plateau.current_lr;
        let mut order: Vec<usize> = (0..train.len()).collect();
        self.rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let (x, y) = match &self.cfg.augment {
                None => train.batch(chunk)?,
                Some(aug) => {
                    let run_seed = self.cfg.seed ^ (epoch as u64).wrapping_mul(0xd1b5_4a32_d192_ed03);
                    let imgs = chunk
                        .iter()
                        .map(|&i| augment(&train.images[i], aug, &mut SeededRng::derive(run_seed, i as u64)))
                        .collect::<Result<Vec<_>>>()?;
                    let refs: Vec<&Tensor> = imgs.iter().collect();
                    (Tensor::stack(&refs)?, chunk.iter().map(|&i| train.labels[i]).collect())
                }
            };
            let (loss, ok) = self.train_batch(&x, &y, lr)?;
            loss_sum += loss * chunk.len() as f64;
            correct += ok;
        }

        let val_eval = evaluate(&self.model, val, self.cfg.batch_size)?;
        reduce_lr_on_plateau(&mut self.plateau, val_eval.loss, &self.cfg.plateau);
        let decision = early_stopping(&mut self.stopper, val_eval.loss, &self.cfg.early_stop);
        self.epochs_done = epoch;
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_loss: val_eval.loss,
            val_accuracy: val_eval.accuracy,
            learning_rate: lr,
        };
        Ok((log, decision))
    }
}

/// Trains until `max_epochs` or early stopping; returns the trained model and
/// one log per completed epoch.
pub fn train(model: Model, train_set: &Dataset, val_set: &Dataset, cfg: &TrainConfig) -> Result<(Model, Vec<EpochLog>)> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut logs = Vec::new();
    while trainer.epochs_done() < cfg.max_epochs {
        let (log, decision) = trainer.run_epoch(train_set, val_set)?;
        logs.push(log);
        if decision == Decision::Halt {
            break;
        }
    }
    Ok((trainer.into_model(), logs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_loss() {
        let p = Tensor::<f64>::from_vec(&[1, 1], vec![1.0]).unwrap();
        let (loss, _) = bce_loss(&p, &[1]).unwrap();
        assert!(loss <= 1.2e-7 && loss >= 0.0);
    }

    #[test]
    fn half_probability_loss_is_ln2() {
        let p = Tensor::<f64>::from_vec(&[1, 1], vec![0.5]).unwrap();
        let (loss, _) = bce_loss(&p, &[1]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((loss - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn bad_label() {
        let p = Tensor::<f64>::from_vec(&[2, 1], vec![0.5, 0.5]).unwrap();
        assert!(matches!(bce_loss(&p, &[1, 2]), Err(Error::Label(_))));
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(55);
        for _ in 0..20 {
            let n = 1 + rng.below(8) as usize;
            let p: Vec<f64> = (0..n).map(|_| 0.05 + 0.9 * rng.next_f64()).collect();
            let y: Vec<u8> = (0..n).map(|_| rng.below(2) as u8).collect();
            let pt = Tensor::from_vec(&[n, 1], p.clone()).unwrap();
            let (_, grad) = bce_loss(&pt, &y).unwrap();
            let h = 1e-5;
            for i in 0..n {
                let mut up = p.clone();
                up[i] += h;
                let mut dn = p.clone();
                dn[i] -= h;
                let lu = bce_loss(&Tensor::from_vec(&[n, 1], up).unwrap(), &y).unwrap().0;
                let ld = bce_loss(&Tensor::from_vec(&[n, 1], dn).unwrap(), &y).unwrap().0;
                let fd = (lu - ld) / (2.0 * h);
                let a = grad.data()[i];
                assert!((a - fd).abs() / a.abs().max(fd.abs()) < 1e-6, "{a} vs {fd}");
            }
        }
    }

    fn scalar_param(v: f64) -> Tensor<f64> {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = Tensor::<f64>::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let g = p.zeros_like();
        let mut st = AdamState::new([&p]);
        for _ in 0..5 {
            adam_step(&mut [&mut p], &[&g], &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.t, 5);
    }

    #[test]
    fn first_step_is_minus_lr() {
        let mut p = scalar_param(0.0);
        let g = scalar_param(1.0);
        let mut st = AdamState::new([&p]);
        let cfg = AdamConfig::default();
        adam_step(&mut [&mut p], &[&g], &mut st, &cfg).unwrap();
        // m̂ = 1, v̂ = 1  =>  θ = -lr / (1 + eps)
        let want = -1e-3 / (1.0 + 1e-8);
        assert!((p.data()[0] - want).abs() < 1e-15);
        assert!((p.data()[0] + 0.001).abs() < 1e-10);
    }

    #[test]
    fn two_steps_match_reference_recurrence() {
        let cfg = AdamConfig::default();
        let mut p = scalar_param(0.0);
        let mut st = AdamState::new([&p]);
        for g in [1.0, -1.0] {
            adam_step(&mut [&mut p], &[&scalar_param(g)], &mut st, &cfg).unwrap();
        }
        // hand-rolled reference
        let (mut theta, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for (t, g) in [(1, 1.0f64), (2, -1.0)] {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            theta -= 1e-3 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p.data()[0] - theta).abs() < 1e-9);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = Tensor::<f64>::zeros(&[2]).unwrap();
        let g = Tensor::<f64>::zeros(&[3]).unwrap();
        let mut st = AdamState::new([&p]);
        assert!(matches!(
            adam_step(&mut [&mut p], &[&g], &mut st, &AdamConfig::default()),
            Err(Error::Usage(_))
        ));
    }

    fn run_plateau(losses: &[f64], cfg: &PlateauConfig, lr: f64) -> Vec<f64> {
        let mut st = CallbackState::new(lr);
        losses
            .iter()
            .map(|&l| {
                reduce_lr_on_plateau(&mut st, l, cfg);
                st.current_lr
            })
            .collect()
    }

    #[test]
    fn plateau_improving_keeps_lr() {
        let lrs = run_plateau(&[1.0, 0.8, 0.6], &PlateauConfig::default(), 1e-3);
        assert_eq!(lrs, vec![1e-3; 3]);
    }

    #[test]
    fn plateau_flat_halves_after_epoch_four() {
        let lrs = run_plateau(&[1.0; 4], &PlateauConfig::default(), 1e-3);
        assert_eq!(lrs, vec![1e-3, 1e-3, 1e-3, 5e-4]);
    }

    #[test]
    fn plateau_floor() {
        let cfg = PlateauConfig::default();
        let lrs = run_plateau(&[1.0; 12], &cfg, cfg.min_lr);
        assert!(lrs.iter().all(|&lr| lr == cfg.min_lr));
    }

    fn halt_epoch(losses: &[f64], cfg: &EarlyStopConfig) -> Option<usize> {
        let mut st = CallbackState::new(1e-3);
        losses
            .iter()
            .position(|&l| early_stopping(&mut st, l, cfg) == Decision::Halt)
            .map(|i| i + 1)
    }

    #[test]
    fn early_stop_never_on_improvement() {
        let losses: Vec<f64> = (0..50).map(|i| 1.0 - i as f64 * 0.01).collect();
        assert_eq!(halt_epoch(&losses, &EarlyStopConfig::default()), None);
    }

    #[test]
    fn early_stop_flat_halts_at_six() {
        assert_eq!(halt_epoch(&[1.0; 10], &EarlyStopConfig::default()), Some(6));
    }

    #[test]
    fn sub_min_delta_improvement_does_not_count() {
        let losses: Vec<f64> = (0..10).map(|i| 1.0 - i as f64 * 1.5e-5).collect();
        assert_eq!(halt_epoch(&losses, &EarlyStopConfig::default()), Some(6));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.plateau.factor = 1.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TrainConfig::default();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.adam.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.early_stop.patience = 0;
        assert!(c.validate().is_err());
    }
}
