//! Training loop, optimizer and inference helpers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Parameters;
use crate::losses::{total_loss, total_loss_with_grad, LossConfig, LossReport};
use crate::model::{build, forward, forward_traced, sigmoid_to_depth, DepthTransform, ModelConfig, ModelParams};
use crate::rng::Rng;
use crate::scene::{generate_scene, SceneConfig, StereoSample};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn default_decay_at() -> f64 {
    0.75
}

fn default_decay_factor() -> f64 {
    0.1
}

fn default_scene_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Fraction of the run after which the rate is multiplied by `decay_factor`.
    #[serde(default = "default_decay_at")]
    pub decay_at: f64,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    pub seed: u64,
    /// Scenes visited in order, one per step, cycling.
    #[serde(default = "default_scene_seeds")]
    pub scene_seeds: Vec<u64>,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub depth: DepthTransform,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub scene: SceneConfig,
}

impl TrainConfig {
    /// 64×32 two-plane scene, widths {8,16,32}, OT-MEA.
    pub fn toy(steps: usize, learning_rate: f64, seed: u64) -> Self {
        let model = ModelConfig::toy();
        Self {
            steps,
            learning_rate,
            decay_at: default_decay_at(),
            decay_factor: default_decay_factor(),
            seed,
            scene_seeds: default_scene_seeds(),
            adam: AdamConfig::default(),
            depth: DepthTransform::default(),
            loss: LossConfig::with_scales(model.scales),
            scene: SceneConfig::two_plane(model.height, model.width),
            model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps: must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate: must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.decay_at) || !(self.decay_factor > 0.0) {
            return Err(Error::InvalidConfig("decay: need decay_at in [0,1] and decay_factor > 0".into()));
        }
        if self.scene_seeds.is_empty() {
            return Err(Error::InvalidConfig("scene_seeds: at least one scene required".into()));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::InvalidConfig("adam: need 0 <= beta < 1 and eps > 0".into()));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.scene.validate()?;
        if self.loss.scales != self.model.scales {
            return Err(Error::InvalidConfig(format!(
                "loss.scales ({}) must equal model.scales ({})",
                self.loss.scales, self.model.scales
            )));
        }
        if (self.scene.height, self.scene.width) != (self.model.height, self.model.width) {
            return Err(Error::InvalidConfig("scene size must equal model input size".into()));
        }
        Ok(())
    }

    /// Rate in effect at `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let drop = (self.decay_at * self.steps as f64).floor() as usize;
        if step < drop {
            self.learning_rate
        } else {
            self.learning_rate * self.decay_factor
        }
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-tensor first and second moment estimates.
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ModelParams, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.named().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        let gs = grads.named();
        for (((_, p), (_, g)), (m, v)) in params
            .named_mut()
            .into_iter()
            .zip(gs)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub photometric: f64,
    pub smoothness: f64,
    pub total: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "step,photometric,smoothness,total,lr";

impl LogRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.photometric, self.smoothness, self.total, self.lr)
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

pub struct TrainOutcome {
    /// Weights after the last finite update.
    pub params: ModelParams,
    /// Loss before each update.
    pub log: Vec<LogRow>,
    /// Loss after the final update on the first scene.
    pub final_report: Option<LossReport>,
    /// Step at which a non-finite loss or gradient stopped the run.
    pub diverged_at: Option<usize>,
}

pub fn scenes(cfg: &TrainConfig) -> Result<Vec<StereoSample>> {
    cfg.scene_seeds.iter().map(|&s| generate_scene(&cfg.scene, s)).collect()
}

pub fn evaluate_loss(params: &ModelParams, sample: &StereoSample, cfg: &TrainConfig) -> Result<LossReport> {
    let (l, r) = forward(&sample.left, &sample.right, params)?;
    total_loss(&l, &r, &sample.left, &sample.right, &sample.camera, &cfg.depth, &cfg.loss)
}

/// Runs the optimizer from freshly built weights.
pub fn train(cfg: &TrainConfig, on_step: impl FnMut(&LogRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let params = build(&cfg.model, &mut Rng::new(cfg.seed))?;
    train_from(cfg, params, 0, on_step)
}

/// Continues from given weights, numbering steps from `start`. The optimizer
/// state starts fresh.
pub fn train_from(
    cfg: &TrainConfig,
    mut params: ModelParams,
    start: usize,
    mut on_step: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if params.config != cfg.model {
        return Err(Error::InvalidConfig("weights were built for a different model config".into()));
    }
    let data = scenes(cfg)?;
    let mut adam = Adam::new(&params, cfg.adam);
    let mut log = Vec::with_capacity(cfg.steps.saturating_sub(start));
    let mut diverged_at = None;
    for step in start..cfg.steps {
        let s = &data[step % data.len()];
        let trace = forward_traced(&s.left, &s.right, &params)?;
        let (l, r) = trace.outputs();
        let (report, gl, gr) =
            match total_loss_with_grad(&l, &r, &s.left, &s.right, &s.camera, &cfg.depth, &cfg.loss) {
                Ok(v) => v,
                Err(e) if e.is_numerical() => {
                    diverged_at = Some(step);
                    break;
                }
                Err(e) => return Err(e),
            };
        let lr = cfg.lr_at(step);
        let row = LogRow {
            step,
            photometric: report.photometric(),
            smoothness: report.smoothness(),
            total: report.total,
            lr,
        };
        let grads = trace.backward(&params, &gl, &gr)?;
        if !grads.params.named().iter().all(|(_, t)| t.is_finite()) {
            diverged_at = Some(step);
            break;
        }
        on_step(&row);
        log.push(row);
        adam.step(&mut params, &grads.params, lr);
    }
    let final_report = if diverged_at.is_none() {
        Some(evaluate_loss(&params, &data[0], cfg)?)
    } else {
        None
    };
    Ok(TrainOutcome {
        params,
        log,
        final_report,
        diverged_at,
    })
}

/// Finest-scale predictions for both views.
pub struct Prediction {
    pub depth_left: Tensor,
    pub depth_right: Tensor,
    pub disparity_left: Tensor,
    pub disparity_right: Tensor,
}

pub fn predict(params: &ModelParams, left: &Tensor, right: &Tensor, fb: f64, transform: &DepthTransform) -> Result<Prediction> {
    let (l, r) = forward(left, right, params)?;
    let disp = |o: &Tensor| transform.inverse_depth(o).map(|v| fb * v);
    Ok(Prediction {
        depth_left: sigmoid_to_depth(l.finest(), transform),
        depth_right: sigmoid_to_depth(r.finest(), transform),
        disparity_left: disp(l.finest()),
        disparity_right: disp(r.finest()),
    })
}

/// Mean `|pred − gt|` over pixels where `mask` is 0.
pub fn masked_mae(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<f64> {
    if pred.shape() != gt.shape() || mask.shape() != gt.shape() {
        return Err(Error::shape("masked_mae", pred.shape(), gt.shape()));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for ((p, g), m) in pred.data().iter().zip(gt.data()).zip(mask.data()) {
        if *m == 0.0 {
            sum += (p - g).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("masked_mae: every pixel is masked".into()));
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionMode;

    fn quick(steps: usize) -> TrainConfig {
        let mut cfg = TrainConfig::toy(steps, 1e-3, 3);
        cfg.model = ModelConfig {
            height: 16,
            width: 32,
            widths: vec![4, 8, 8],
            scales: 2,
            attention: AttentionMode::EgMea,
            sinkhorn: Default::default(),
        };
        cfg.loss = LossConfig::with_scales(2);
        cfg.scene = SceneConfig::two_plane(16, 32);
        cfg
    }

    #[test]
    fn schedule_drops_at_three_quarters() {
        let cfg = TrainConfig::toy(100, 1e-4, 0);
        assert_eq!(cfg.lr_at(74), 1e-4);
        assert!((cfg.lr_at(75) - 1e-5).abs() < 1e-20);
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = TrainConfig::toy(10, 1e-4, 0);
        let text = cfg.to_text().unwrap();
        assert_eq!(TrainConfig::from_text(&text).unwrap(), cfg);
        assert!(TrainConfig::from_text(&text.replace("steps = 10", "steps = 10\nbogus = 1")).is_err());
    }

    #[test]
    fn mismatched_scales_rejected() {
        let mut cfg = TrainConfig::toy(10, 1e-4, 0);
        cfg.loss.scales = 2;
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn runs_are_deterministic() {
        let a = train(&quick(3), |_| {}).unwrap();
        let b = train(&quick(3), |_| {}).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = quick(1);
        let mut p = build(&cfg.model, &mut Rng::new(0)).unwrap();
        let before = p.to_flat();
        let mut g = p.zeros_like();
        for (_, t) in g.named_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = -2.0);
        }
        let mut adam = Adam::new(&p, AdamConfig::default());
        adam.step(&mut p, &g, 0.01);
        let moved = p.to_flat();
        for (a, b) in before.data().iter().zip(moved.data()) {
            assert!((b - a - 0.01).abs() < 1e-9);
        }
    }
}
