//! Forward noising, DDIM reverse sampling conditioned on 2D input, and
//! hypothesis aggregation.
//!
//! The diffusion runs on the normalized pose representation produced by
//! [`crate::pose::to_representation`]: normalized absolute roots plus
//! root-relative joints.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, s, Array4, ArrayView4, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::pose::{from_representation, normalize_2d, PoseSeq3D, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(Error::Config(format!("unknown noise schedule `{other}`"))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Linear => "linear",
        })
    }
}

/// Cumulative signal coefficients `alpha_bar[0..=N]`, with `alpha_bar[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    kind: ScheduleKind,
}

const MAX_BETA: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Cosine => {
                let f = |n: f64| {
                    let x = (n / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                (1..=steps)
                    .map(|n| (1.0 - f(n as f64) / f((n - 1) as f64)).min(MAX_BETA))
                    .collect()
            }
            ScheduleKind::Linear => {
                // standard 1e-4..0.02 range for 1000 steps, rescaled for other lengths
                let scale = 1000.0 / steps as f64;
                let (lo, hi) = (1e-4 * scale, (0.02 * scale).min(MAX_BETA));
                (0..steps)
                    .map(|i| {
                        let frac = if steps == 1 { 1.0 } else { i as f64 / (steps - 1) as f64 };
                        lo + (hi - lo) * frac
                    })
                    .collect()
            }
        };
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for b in betas {
            let prev = *alpha_bar.last().expect("non-empty");
            alpha_bar.push(prev * (1.0 - b));
        }
        Ok(NoiseSchedule { alpha_bar, kind })
    }

    /// Schedule with explicitly given coefficients (must start at 1 and not increase).
    pub fn from_alpha_bar(alpha_bar: Vec<f64>, kind: ScheduleKind) -> Result<Self> {
        if alpha_bar.len() < 2 || alpha_bar[0] != 1.0 {
            return Err(Error::Config("alpha_bar must start at 1 and have N >= 1".into()));
        }
        if alpha_bar.windows(2).any(|w| w[1] > w[0]) || alpha_bar.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::Config("alpha_bar must be non-increasing within (0, 1]".into()));
        }
        Ok(NoiseSchedule { alpha_bar, kind })
    }

    /// Total number of diffusion steps `N`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn alpha_bar(&self, n: usize) -> f64 {
        self.alpha_bar[n]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_step(&self, n: usize) -> Result<()> {
        if n > self.steps() {
            return Err(Error::invalid(format!("step {n} outside 0..={}", self.steps())));
        }
        Ok(())
    }
}

/// Builds a schedule from its textual kind (`cosine` or `linear`).
pub fn make_schedule(steps: usize, kind: &str) -> Result<NoiseSchedule> {
    NoiseSchedule::new(steps, kind.parse()?)
}

fn same_shape(a: &ArrayView4<f64>, b: &ArrayView4<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// `y_n = sqrt(ab_n) * y0 + sqrt(1 - ab_n) * eps`.
pub fn forward_noise(y0: ArrayView4<f64>, n: usize, eps: ArrayView4<f64>, schedule: &NoiseSchedule) -> Result<Array4<f64>> {
    schedule.check_step(n)?;
    same_shape(&y0, &eps, "forward_noise")?;
    let ab = schedule.alpha_bar(n);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(&y0).and(&eps).map_collect(|&y, &e| a * y + b * e))
}

/// Closed-form transition from step `m` to a later step `n`:
/// `y_n = sqrt(ab_n / ab_m) * y_m + sqrt(1 - ab_n / ab_m) * eps`.
pub fn transition_noise(
    y_m: ArrayView4<f64>,
    m: usize,
    n: usize,
    eps: ArrayView4<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array4<f64>> {
    schedule.check_step(n)?;
    if m > n {
        return Err(Error::invalid(format!("transition must go forward, got {m} -> {n}")));
    }
    same_shape(&y_m, &eps, "transition_noise")?;
    let ratio = schedule.alpha_bar(n) / schedule.alpha_bar(m);
    let (a, b) = (ratio.sqrt(), (1.0 - ratio).max(0.0).sqrt());
    Ok(Zip::from(&y_m).and(&eps).map_collect(|&y, &e| a * y + b * e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `sigma_n = 0`: the reverse pass is deterministic given the initial noise.
    Deterministic,
    /// `sigma_n` of the DDPM posterior (DDIM with eta = 1).
    Stochastic,
}

impl FromStr for SigmaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "det" | "deterministic" => Ok(SigmaMode::Deterministic),
            "stoch" | "stochastic" => Ok(SigmaMode::Stochastic),
            other => Err(Error::Config(format!("unknown sigma mode `{other}`"))),
        }
    }
}

/// How the next sample is formed from the clean estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// `sqrt(ab') y0_hat + sqrt(1 - ab' - sigma^2) eps_hat + sigma eps`, where
    /// `eps_hat` is the noise implied by the current sample and `y0_hat`.
    #[default]
    Ddim,
    /// `sqrt(ab') y0_hat + sqrt(1 - ab') eps + sigma eps` with fresh noise `eps`.
    Renoise,
}

fn sigma(schedule: &NoiseSchedule, n: usize, n_prime: usize, mode: SigmaMode) -> f64 {
    match mode {
        SigmaMode::Deterministic => 0.0,
        SigmaMode::Stochastic => {
            let (ab, ab_p) = (schedule.alpha_bar(n), schedule.alpha_bar(n_prime));
            let v = (1.0 - ab_p) / (1.0 - ab).max(f64::MIN_POSITIVE) * (1.0 - ab / ab_p);
            v.max(0.0).sqrt()
        }
    }
}

/// One reverse step from `n` down to `n_prime < n`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step(
    y0_hat: ArrayView4<f64>,
    y_n: ArrayView4<f64>,
    n: usize,
    n_prime: usize,
    eps: ArrayView4<f64>,
    schedule: &NoiseSchedule,
    sigma_mode: SigmaMode,
    rule: UpdateRule,
) -> Result<Array4<f64>> {
    schedule.check_step(n)?;
    if n_prime >= n {
        return Err(Error::invalid(format!("reverse step needs n' < n, got {n_prime} >= {n}")));
    }
    same_shape(&y0_hat, &y_n, "ddim_step")?;
    same_shape(&y0_hat, &eps, "ddim_step")?;
    let (ab, ab_p) = (schedule.alpha_bar(n), schedule.alpha_bar(n_prime));
    let sig = sigma(schedule, n, n_prime, sigma_mode);
    let keep = ab_p.sqrt();
    match rule {
        UpdateRule::Ddim => {
            let dir = (1.0 - ab_p - sig * sig).max(0.0).sqrt();
            let inv = 1.0 / (1.0 - ab).max(f64::MIN_POSITIVE).sqrt();
            let sa = ab.sqrt();
            let mut out = Array4::zeros(y0_hat.dim());
            Zip::from(&mut out)
                .and(&y0_hat)
                .and(&y_n)
                .and(&eps)
                .for_each(|o, &x0, &yn, &e| {
                    let implied = (yn - sa * x0) * inv;
                    *o = keep * x0 + dir * implied + sig * e;
                });
            Ok(out)
        }
        UpdateRule::Renoise => {
            let b = (1.0 - ab_p).sqrt();
            Ok(Zip::from(&y0_hat).and(&eps).map_collect(|&x0, &e| keep * x0 + b * e + sig * e))
        }
    }
}

/// Settings for few-step sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub inference_steps: usize,
    pub hypotheses: usize,
    pub sigma_mode: SigmaMode,
    pub update: UpdateRule,
    pub seed: u64,
    /// Frames per denoiser call for long scenes; `None` uses the model maximum.
    pub window: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            inference_steps: 5,
            hypotheses: 5,
            sigma_mode: SigmaMode::Deterministic,
            update: UpdateRule::Ddim,
            seed: 0,
            window: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.inference_steps == 0 || self.inference_steps > schedule.steps() {
            return Err(Error::Config(format!(
                "inference steps must be in 1..={}, got {}",
                schedule.steps(),
                self.inference_steps
            )));
        }
        if self.hypotheses == 0 {
            return Err(Error::Config("at least one hypothesis is required".into()));
        }
        if self.window == Some(0) {
            return Err(Error::Config("window must be positive".into()));
        }
        Ok(())
    }
}

/// Uniformly strided steps from `N` down to 0, both endpoints included.
pub fn inference_timesteps(total: usize, inference_steps: usize) -> Vec<usize> {
    let k = inference_steps.max(1);
    let mut out: Vec<usize> = (0..=k)
        .map(|i| ((total as f64) * (k - i) as f64 / k as f64).round() as usize)
        .collect();
    out.dedup();
    out
}

fn standard_normal(dim: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<f64> {
    Array4::from_shape_simple_fn(dim, || StandardNormal.sample(rng))
}

/// Generator for hypothesis `h`: an independent stream of the seeded generator.
pub fn hypothesis_rng(seed: u64, h: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h as u64);
    rng
}

/// Draws `hypotheses` 3D reconstructions of the scene's 2D input. Each starts
/// from Gaussian noise and runs the strided reverse process; roots are
/// denormalized with the model's statistics before returning.
pub fn sample(scene: &Scene, model: &Denoiser, config: &SamplerConfig, schedule: &NoiseSchedule) -> Result<Vec<PoseSeq3D>> {
    config.validate(schedule)?;
    let (t, p, j) = scene.pose2d.dim();
    if j != model.config().joints {
        return Err(Error::invalid(format!(
            "scene has {j} joints, model expects {}",
            model.config().joints
        )));
    }
    if p > model.config().max_persons {
        return Err(Error::Capacity(format!(
            "{p} persons exceed the model's capacity of {}",
            model.config().max_persons
        )));
    }
    let window = config.window.unwrap_or(model.config().max_frames).min(model.config().max_frames);
    let cond = normalize_2d(&scene.pose2d, scene.camera.image_size);
    let slots: Vec<usize> = (0..p).collect();
    let steps = inference_timesteps(schedule.steps(), config.inference_steps);

    let mut out = Vec::with_capacity(config.hypotheses);
    for h in 0..config.hypotheses {
        let mut rng = hypothesis_rng(config.seed, h);
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < t {
            let len = window.min(t - start);
            let x = cond.slice(s![start..start + len, .., .., ..]);
            let mut y = standard_normal((len, p, j, 3), &mut rng);
            for pair in steps.windows(2) {
                let (n, n_prime) = (pair[0], pair[1]);
                let z = concatenate(Axis(3), &[x.view(), y.view()]).expect("matching shapes");
                let y0_hat = model.denoise(z.view(), n, &slots)?;
                let eps = standard_normal(y.dim(), &mut rng);
                y = ddim_step(
                    y0_hat.view(),
                    y.view(),
                    n,
                    n_prime,
                    eps.view(),
                    schedule,
                    config.sigma_mode,
                    config.update,
                )?;
            }
            pieces.push(y);
            start += len;
        }
        let views: Vec<_> = pieces.iter().map(|a| a.view()).collect();
        let repr = concatenate(Axis(0), &views).expect("matching shapes");
        out.push(from_representation(repr.view(), &scene.skeleton, model.root_norm())?);
    }
    Ok(out)
}

/// Joint-wise mean over hypotheses.
pub fn aggregate(hypotheses: &[PoseSeq3D]) -> Result<PoseSeq3D> {
    let first = hypotheses
        .first()
        .ok_or_else(|| Error::invalid("cannot aggregate an empty hypothesis list"))?;
    let mut sum = Array4::<f64>::zeros(first.data.dim());
    for h in hypotheses {
        if h.data.dim() != sum.dim() {
            return Err(Error::invalid("hypotheses have different shapes"));
        }
        sum += &h.data;
    }
    PoseSeq3D::new(sum / hypotheses.len() as f64)
}
