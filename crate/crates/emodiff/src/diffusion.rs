//! Conditional latent diffusion over VAE latents: a linear β schedule,
//! closed-form forward noising, a transformer denoiser conditioned on a
//! pooled audio embedding, the ε-prediction objective, and ancestral
//! sampling with an optional reduced step count.

use std::sync::OnceLock;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::adapter::{adapter_loss_on_tape, Adapter, LossWeights};
use crate::ckpt::ConfigMap;
use crate::error::{Error, Result};
use crate::nn::{
    decoder_stack, encoder_stack, init_decoder_stack, init_encoder_stack, init_layer_norm,
    init_linear, layer_norm, linear, normal_matrix, sinusoidal_pe, sinusoidal_scalar, sum_sq,
    AdamW, AdamWConfig, Bound, ParamStore,
};
use crate::seqcore::names::EmotionLabel;
use crate::seqcore::{AudioFeatureTrack, AUDIO_CHANNELS};
use crate::tape::{Matrix, Tape, Var};
use crate::vae::{Latent, Region, TrainLogRow, Vae};

pub const DEFAULT_DIFFUSION_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 8.5e-4;
pub const DEFAULT_BETA_END: f64 = 0.012;
pub const DEFAULT_INFERENCE_STEPS: usize = 50;

/// Forward-process noise levels. Index 0 holds step t=1.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(Error::Validation(format!(
                "diffusion step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Linear schedule: β_t interpolates from `beta_start` at t=1 to `beta_end`
/// at t=T.
pub fn make_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_steps < 2 {
        return Err(Error::Config(format!(
            "schedule needs at least 2 steps, got {t_steps}"
        )));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let span = beta_end - beta_start;
    let betas: Vec<f64> = (0..t_steps)
        .map(|i| beta_start + i as f64 / (t_steps - 1) as f64 * span)
        .collect();
    from_betas(&betas)
}

/// Build a schedule from explicit β values. Unlike [`make_schedule`] this
/// accepts β=0 entries so degenerate noiseless schedules can be constructed
/// in tests.
pub fn from_betas(betas: &[f64]) -> Result<NoiseSchedule> {
    if betas.is_empty() {
        return Err(Error::Config("empty beta schedule".into()));
    }
    for &b in betas {
        if !(0.0..1.0).contains(&b) {
            return Err(Error::Config(format!("beta {b} outside [0, 1)")));
        }
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(betas.len());
    let mut prod = 1.0;
    for &a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    if *alpha_bars.last().unwrap() <= 0.0 {
        return Err(Error::Config("alpha products must stay positive".into()));
    }
    Ok(NoiseSchedule {
        betas: betas.to_vec(),
        alphas,
        alpha_bars,
    })
}

pub fn schedule_to_config_map(sched_steps: usize, beta_start: f64, beta_end: f64) -> ConfigMap {
    let mut m = ConfigMap::new();
    m.insert("schedule.steps".into(), sched_steps.to_string());
    m.insert("schedule.beta_start".into(), beta_start.to_string());
    m.insert("schedule.beta_end".into(), beta_end.to_string());
    m
}

pub fn schedule_from_config_map(m: &ConfigMap) -> Result<NoiseSchedule> {
    let get = |key: &str| -> Result<&str> {
        m.get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("checkpoint missing {key}")))
    };
    let steps: usize = get("schedule.steps")?
        .parse()
        .map_err(|_| Error::Config("bad integer for schedule.steps".into()))?;
    let start: f64 = get("schedule.beta_start")?
        .parse()
        .map_err(|_| Error::Config("bad float for schedule.beta_start".into()))?;
    let end: f64 = get("schedule.beta_end")?
        .parse()
        .map_err(|_| Error::Config("bad float for schedule.beta_end".into()))?;
    make_schedule(steps, start, end)
}

/// Closed-form forward noising: `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
pub fn q_sample(z0: &Matrix, t: usize, eps: &Matrix, sched: &NoiseSchedule) -> Result<Matrix> {
    sched.check_step(t)?;
    if z0.dim() != eps.dim() {
        return Err(Error::Shape(format!(
            "latent {:?} and noise {:?} differ",
            z0.dim(),
            eps.dim()
        )));
    }
    let ab = sched.alpha_bar(t);
    Ok(z0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

pub const AUDIO_EMBED_DIM: usize = 256;
const AUDIO_STATS: usize = 4 * AUDIO_CHANNELS;
const AUDIO_PROJECTION_SEED: u64 = 20240101;

fn audio_projection() -> &'static Matrix {
    static TABLE: OnceLock<Matrix> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut rng = ChaCha12Rng::seed_from_u64(AUDIO_PROJECTION_SEED);
        normal_matrix(&mut rng, AUDIO_STATS, AUDIO_EMBED_DIM).mapv(|v| v / 8.0)
    })
}

/// Pool a feature track to a fixed 1×256 conditioning vector: per-channel
/// mean, std, min, and max over time, pushed through a frozen random
/// projection and tanh. There are no trainable parameters here.
pub fn embed_audio(track: &AudioFeatureTrack) -> Result<Matrix> {
    let f = track.features_f64();
    if f.ncols() != AUDIO_CHANNELS {
        return Err(Error::Shape(format!(
            "audio track has {} channels, expected {AUDIO_CHANNELS}",
            f.ncols()
        )));
    }
    let l = f.nrows();
    if l < 2 {
        return Err(Error::Validation(format!(
            "audio track length {l} is below the 2-frame minimum"
        )));
    }
    let mut stats = Matrix::zeros((1, AUDIO_STATS));
    for c in 0..AUDIO_CHANNELS {
        let col = f.column(c);
        let mean = col.sum() / l as f64;
        let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / l as f64;
        let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        stats[(0, c)] = mean;
        stats[(0, AUDIO_CHANNELS + c)] = var.sqrt();
        stats[(0, 2 * AUDIO_CHANNELS + c)] = min;
        stats[(0, 3 * AUDIO_CHANNELS + c)] = max;
    }
    Ok(stats.dot(audio_projection()).mapv(f64::tanh))
}

/// How the audio embedding reaches the denoiser: as an extra token in the
/// stream, or as cross-attention memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    Concat,
    CrossAttention,
}

impl Conditioning {
    pub fn name(self) -> &'static str {
        match self {
            Conditioning::Concat => "concat",
            Conditioning::CrossAttention => "cross_attention",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Conditioning::Concat),
            "cross_attention" => Ok(Conditioning::CrossAttention),
            other => Err(Error::Config(format!("unknown conditioning {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub latent_tokens: usize,
    pub conditioning: Conditioning,
    pub skip_connections: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            layers: 9,
            heads: 4,
            width: 256,
            latent_tokens: 1,
            conditioning: Conditioning::Concat,
            skip_connections: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if !self.width.is_multiple_of(2) {
            return Err(Error::Config(
                "width must be even for sinusoidal embeddings".into(),
            ));
        }
        if self.layers == 0 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        if self.latent_tokens == 0 {
            return Err(Error::Config("latent_tokens must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_config_map(&self, prefix: &str) -> ConfigMap {
        let mut m = ConfigMap::new();
        m.insert(format!("{prefix}.layers"), self.layers.to_string());
        m.insert(format!("{prefix}.heads"), self.heads.to_string());
        m.insert(format!("{prefix}.width"), self.width.to_string());
        m.insert(
            format!("{prefix}.latent_tokens"),
            self.latent_tokens.to_string(),
        );
        m.insert(
            format!("{prefix}.conditioning"),
            self.conditioning.name().into(),
        );
        m.insert(
            format!("{prefix}.skip_connections"),
            self.skip_connections.to_string(),
        );
        m
    }

    pub fn from_config_map(m: &ConfigMap, prefix: &str) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            m.get(&format!("{prefix}.{key}"))
                .map(String::as_str)
                .ok_or_else(|| Error::Config(format!("checkpoint missing {prefix}.{key}")))
        };
        let parse_usize = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::Config(format!("bad integer for {prefix}.{key}")))
        };
        let cfg = DenoiserConfig {
            layers: parse_usize("layers")?,
            heads: parse_usize("heads")?,
            width: parse_usize("width")?,
            latent_tokens: parse_usize("latent_tokens")?,
            conditioning: Conditioning::from_name(get("conditioning")?)?,
            skip_connections: get("skip_connections")?
                .parse()
                .map_err(|_| Error::Config(format!("bad bool for {prefix}.skip_connections")))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub params: ParamStore,
}

impl Denoiser {
    pub fn init(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_linear(&mut params, &mut rng, "time.fc1", d, d);
        init_linear(&mut params, &mut rng, "time.fc2", d, d);
        init_linear(&mut params, &mut rng, "cond", AUDIO_EMBED_DIM, d);
        init_linear(&mut params, &mut rng, "latent_in", d, d);
        match cfg.conditioning {
            Conditioning::Concat => {
                init_encoder_stack(&mut params, &mut rng, "blk", cfg.layers, d, cfg.skip_connections)
            }
            Conditioning::CrossAttention => {
                init_decoder_stack(&mut params, &mut rng, "blk", cfg.layers, d, cfg.skip_connections)
            }
        }
        init_layer_norm(&mut params, "final_ln", d);
        init_linear(&mut params, &mut rng, "out", d, d);
        Ok(Denoiser { cfg, params })
    }

    fn check_inputs(&self, z_t: &Matrix, t_step: usize, cond: &Matrix) -> Result<()> {
        let expected = (self.cfg.latent_tokens, self.cfg.width);
        if z_t.dim() != expected {
            return Err(Error::Shape(format!(
                "latent shape {:?} does not match config {:?}",
                z_t.dim(),
                expected
            )));
        }
        if cond.dim() != (1, AUDIO_EMBED_DIM) {
            return Err(Error::Shape(format!(
                "condition shape {:?}, expected (1, {AUDIO_EMBED_DIM})",
                cond.dim()
            )));
        }
        if t_step < 1 {
            return Err(Error::Validation("diffusion step must be at least 1".into()));
        }
        Ok(())
    }

    /// Predicted noise for a noisy latent, built on a tape. The stream is
    /// [time token, condition token, latent tokens] plus positional
    /// encoding in concat mode; in cross-attention mode the condition is
    /// attended to as memory instead of joining the stream.
    pub fn denoise_on_tape(&self, t: &mut Tape, p: &Bound, z_t: Var, t_step: usize, cond: Var) -> Var {
        let n = self.cfg.latent_tokens;
        let d = self.cfg.width;
        let tf = t.constant(sinusoidal_scalar(t_step as f64, d));
        let h = linear(t, p, "time.fc1", tf);
        let h = t.gelu(h);
        let time_tok = linear(t, p, "time.fc2", h);
        let cond_tok = linear(t, p, "cond", cond);
        let lat = linear(t, p, "latent_in", z_t);
        let h = match self.cfg.conditioning {
            Conditioning::Concat => {
                let stream = t.concat_rows(&[time_tok, cond_tok, lat]);
                let pe = t.constant(sinusoidal_pe(n + 2, d));
                let stream = t.add(stream, pe);
                let h = encoder_stack(
                    t,
                    p,
                    "blk",
                    stream,
                    self.cfg.layers,
                    self.cfg.heads,
                    self.cfg.skip_connections,
                );
                let h = layer_norm(t, p, "final_ln", h);
                t.slice_rows(h, 2, n)
            }
            Conditioning::CrossAttention => {
                let stream = t.concat_rows(&[time_tok, lat]);
                let pe = t.constant(sinusoidal_pe(n + 1, d));
                let stream = t.add(stream, pe);
                let h = decoder_stack(
                    t,
                    p,
                    "blk",
                    stream,
                    cond_tok,
                    self.cfg.layers,
                    self.cfg.heads,
                    self.cfg.skip_connections,
                );
                let h = layer_norm(t, p, "final_ln", h);
                t.slice_rows(h, 1, n)
            }
        };
        linear(t, p, "out", h)
    }

    /// Plain-matrix noise prediction.
    pub fn denoise(&self, z_t: &Matrix, t_step: usize, cond: &Matrix) -> Result<Matrix> {
        self.check_inputs(z_t, t_step, cond)?;
        let mut t = Tape::new();
        let p = self.params.bind(&mut t, false);
        let zv = t.constant(z_t.clone());
        let cv = t.constant(cond.clone());
        let out = self.denoise_on_tape(&mut t, &p, zv, t_step, cv);
        Ok(t.value(out).clone())
    }
}

/// `‖ε − ε̂(z_t, t, cond)‖²` summed over entries, with `z_t` formed by
/// closed-form noising.
pub fn diffusion_loss(
    den: &Denoiser,
    sched: &NoiseSchedule,
    z0: &Matrix,
    t_step: usize,
    eps: &Matrix,
    cond: &Matrix,
) -> Result<f64> {
    let z_t = q_sample(z0, t_step, eps, sched)?;
    let eps_hat = den.denoise(&z_t, t_step, cond)?;
    let loss = (eps - &eps_hat).mapv(|v| v * v).sum();
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite diffusion loss {loss}")));
    }
    Ok(loss)
}

/// One ancestral reverse-process step. Noise is injected for t > 1 only.
pub fn p_sample_step(
    den: &Denoiser,
    sched: &NoiseSchedule,
    z_t: &Matrix,
    t_step: usize,
    cond: &Matrix,
    rng: &mut ChaCha12Rng,
) -> Result<Matrix> {
    sched.check_step(t_step)?;
    let eps_hat = den.denoise(z_t, t_step, cond)?;
    let beta = sched.beta(t_step);
    let ab = sched.alpha_bar(t_step);
    let alpha = sched.alpha(t_step);
    let coef = if beta == 0.0 {
        0.0
    } else {
        beta / (1.0 - ab).sqrt()
    };
    let mu = (z_t - &(eps_hat * coef)) / alpha.sqrt();
    if t_step == 1 {
        return Ok(mu);
    }
    let ab_prev = sched.alpha_bar(t_step - 1);
    let beta_tilde = if beta == 0.0 {
        0.0
    } else {
        beta * (1.0 - ab_prev) / (1.0 - ab)
    };
    let noise = normal_matrix(rng, z_t.nrows(), z_t.ncols());
    Ok(mu + noise * beta_tilde.sqrt())
}

/// The decreasing step subsequence visited when sampling with a reduced
/// count: length `steps`, starting at T and ending at 1.
pub fn strided_steps(t_total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 1 || steps > t_total {
        return Err(Error::Config(format!(
            "inference steps {steps} outside 1..={t_total}"
        )));
    }
    if steps == 1 {
        return Ok(vec![t_total]);
    }
    Ok((0..steps)
        .map(|i| t_total - i * (t_total - 1) / (steps - 1))
        .collect())
}

/// Draw a clean latent by reversing the diffusion chain. `steps == T` runs
/// the exact full chain; smaller counts follow the strided subsequence with
/// the transition widths rescaled from the ᾱ ratios.
pub fn sample_latent(
    den: &Denoiser,
    sched: &NoiseSchedule,
    cond: &Matrix,
    steps: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Matrix> {
    let t_total = sched.steps();
    let ts = strided_steps(t_total, steps)?;
    let mut z = normal_matrix(rng, den.cfg.latent_tokens, den.cfg.width);
    if steps == t_total {
        for t_step in (1..=t_total).rev() {
            z = p_sample_step(den, sched, &z, t_step, cond, rng)?;
        }
        return Ok(z);
    }
    for (k, &t_cur) in ts.iter().enumerate() {
        let ab_cur = sched.alpha_bar(t_cur);
        let ab_prev = if k + 1 < ts.len() {
            sched.alpha_bar(ts[k + 1])
        } else {
            1.0
        };
        let alpha_eff = ab_cur / ab_prev;
        let beta_eff = 1.0 - alpha_eff;
        let eps_hat = den.denoise(&z, t_cur, cond)?;
        let coef = if beta_eff == 0.0 {
            0.0
        } else {
            beta_eff / (1.0 - ab_cur).sqrt()
        };
        let mu = (&z - &(eps_hat * coef)) / alpha_eff.sqrt();
        if k + 1 < ts.len() {
            let beta_tilde = if beta_eff == 0.0 {
                0.0
            } else {
                beta_eff * (1.0 - ab_prev) / (1.0 - ab_cur)
            };
            let noise = normal_matrix(rng, z.nrows(), z.ncols());
            z = mu + noise * beta_tilde.sqrt();
        } else {
            z = mu;
        }
    }
    Ok(z)
}

/// Sample a latent, map it back to encoder space, and decode it to an L×R
/// region sequence in one decoder pass.
pub fn sample_sequence(
    den: &Denoiser,
    sched: &NoiseSchedule,
    vae: &Vae,
    norm: &LatentNorm,
    cond: &Matrix,
    steps: usize,
    len: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Matrix> {
    if vae.cfg.width != den.cfg.width || vae.cfg.latent_tokens != den.cfg.latent_tokens {
        return Err(Error::Config(format!(
            "decoder latent {}x{} does not match denoiser {}x{}",
            vae.cfg.latent_tokens, vae.cfg.width, den.cfg.latent_tokens, den.cfg.width
        )));
    }
    norm.validate()?;
    let z = sample_latent(den, sched, cond, steps, rng)?;
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("sampled latent has non-finite values".into()));
    }
    let latent = Latent {
        z: norm.invert(&z)?,
        region: vae.cfg.region,
    };
    vae.decode(&latent, len)
}

/// One training example: a clean latent target, its audio conditioning
/// vector, and the label and frame count used when the adapter is coupled.
#[derive(Debug, Clone)]
pub struct DiffusionTrainItem {
    pub z0: Matrix,
    pub cond: Matrix,
    pub label: EmotionLabel,
    pub len: usize,
}

/// Entry-wise affine map between encoder latents and the standardized
/// space the denoiser operates in. `apply` shifts and scales a clean
/// latent to zero mean and unit spread as measured on the training set;
/// `invert` maps a sampled latent back before decoding.
#[derive(Debug, Clone)]
pub struct LatentNorm {
    pub shift: Matrix,
    pub scale: Matrix,
}

/// Spreads below this are treated as constant entries and left unscaled.
const MIN_LATENT_SPREAD: f64 = 1e-8;

impl LatentNorm {
    pub fn identity(latent_tokens: usize, width: usize) -> Self {
        LatentNorm {
            shift: Matrix::zeros((latent_tokens, width)),
            scale: Matrix::from_elem((latent_tokens, width), 1.0),
        }
    }

    /// Entry-wise mean and population standard deviation over the clean
    /// latents of a training set.
    pub fn fit(items: &[DiffusionTrainItem]) -> Result<Self> {
        let first = items.first().ok_or_else(|| {
            Error::Validation("cannot fit a latent normalizer on an empty set".into())
        })?;
        let dim = first.z0.dim();
        for item in items {
            if item.z0.dim() != dim {
                return Err(Error::Shape(format!(
                    "latent {:?} does not match {:?} while fitting the normalizer",
                    item.z0.dim(),
                    dim
                )));
            }
        }
        let inv_n = 1.0 / items.len() as f64;
        let mut shift = Matrix::zeros(dim);
        for item in items {
            shift += &item.z0;
        }
        shift *= inv_n;
        let mut var = Matrix::zeros(dim);
        for item in items {
            var += &(&item.z0 - &shift).mapv(|v| v * v);
        }
        var *= inv_n;
        let scale = var.mapv(|v| {
            let s = v.sqrt();
            if s > MIN_LATENT_SPREAD {
                s
            } else {
                1.0
            }
        });
        let norm = LatentNorm { shift, scale };
        norm.validate()?;
        Ok(norm)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shift.dim() != self.scale.dim() {
            return Err(Error::Shape(format!(
                "normalizer shift {:?} and scale {:?} differ",
                self.shift.dim(),
                self.scale.dim()
            )));
        }
        if self.shift.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("normalizer shift has non-finite values".into()));
        }
        if self.scale.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Numeric(
                "normalizer scale entries must be positive and finite".into(),
            ));
        }
        Ok(())
    }

    fn check_shape(&self, z: &Matrix) -> Result<()> {
        if z.dim() != self.shift.dim() {
            return Err(Error::Shape(format!(
                "latent {:?} does not match normalizer {:?}",
                z.dim(),
                self.shift.dim()
            )));
        }
        Ok(())
    }

    /// Encoder space to standardized space.
    pub fn apply(&self, z: &Matrix) -> Result<Matrix> {
        self.check_shape(z)?;
        Ok((z - &self.shift) / &self.scale)
    }

    /// Standardized space back to encoder space.
    pub fn invert(&self, z: &Matrix) -> Result<Matrix> {
        self.check_shape(z)?;
        Ok(z * &self.scale + &self.shift)
    }
}

/// Frozen companions for upper-region training: gradients flow through the
/// decoder and adapter into the denoiser, but only denoiser parameters
/// move. The normalizer maps predicted latents back to encoder space
/// before they reach the decoder.
pub struct AdapterCoupling<'a> {
    pub vae: &'a Vae,
    pub adapter: &'a Adapter,
    pub weights: LossWeights,
    pub norm: &'a LatentNorm,
}

#[derive(Debug, Clone)]
pub struct DiffTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for DiffTrainConfig {
    fn default() -> Self {
        DiffTrainConfig {
            steps: 300,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 1e-2,
            seed: 0,
        }
    }
}

/// Train the denoiser on clean latents from a frozen encoder. Each draw
/// picks a uniform step t and fresh noise; the per-sample ε-prediction
/// error is summed over entries and averaged over the batch. With a
/// coupling attached, the decoded ẑ₀ prediction is also scored by the
/// frozen adapter and both losses are mixed by the coupling weights. A
/// non-finite loss or gradient aborts before the parameter update, so the
/// model keeps its last good state.
pub fn train_denoiser(
    den: &mut Denoiser,
    sched: &NoiseSchedule,
    items: &[DiffusionTrainItem],
    coupling: Option<&AdapterCoupling>,
    tc: &DiffTrainConfig,
) -> Result<Vec<TrainLogRow>> {
    if items.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let n = den.cfg.latent_tokens;
    let d = den.cfg.width;
    for item in items {
        if item.z0.dim() != (n, d) {
            return Err(Error::Shape(format!(
                "latent target {:?}, expected ({n}, {d})",
                item.z0.dim()
            )));
        }
        if item.cond.dim() != (1, AUDIO_EMBED_DIM) {
            return Err(Error::Shape(format!(
                "condition {:?}, expected (1, {AUDIO_EMBED_DIM})",
                item.cond.dim()
            )));
        }
    }
    if let Some(c) = coupling {
        c.weights.validate()?;
        if !c.adapter.is_frozen() {
            return Err(Error::Config(
                "adapter must be pretrained and frozen before coupling".into(),
            ));
        }
        if c.vae.cfg.region != Region::Upper {
            return Err(Error::Config(
                "adapter coupling requires the upper-region decoder".into(),
            ));
        }
        if c.vae.cfg.width != d || c.vae.cfg.latent_tokens != n {
            return Err(Error::Config(
                "coupled decoder latent shape does not match the denoiser".into(),
            ));
        }
        c.norm.validate()?;
        if c.norm.shift.dim() != (n, d) {
            return Err(Error::Shape(format!(
                "coupled normalizer {:?}, expected ({n}, {d})",
                c.norm.shift.dim()
            )));
        }
    }

    let t_total = sched.steps();
    let mut rng = ChaCha12Rng::seed_from_u64(tc.seed);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: tc.lr,
            weight_decay: tc.weight_decay,
            ..Default::default()
        },
        &den.params,
    );
    let start = Instant::now();
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut cursor = order.len();

    for step in 1..=tc.steps {
        let mut batch = Vec::with_capacity(tc.batch_size);
        for _ in 0..tc.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&items[order[cursor]]);
            cursor += 1;
        }

        let mut t = Tape::new();
        let p = den.params.bind(&mut t, true);
        let frozen = coupling.map(|c| {
            (
                c.vae.params.bind(&mut t, false),
                c.adapter.params.bind(&mut t, false),
            )
        });

        let mut lat_terms = Vec::with_capacity(batch.len());
        let mut apt_terms = Vec::with_capacity(batch.len());
        for item in &batch {
            let t_step = rng.random_range(1..=t_total);
            let eps = normal_matrix(&mut rng, n, d);
            let z_t = q_sample(&item.z0, t_step, &eps, sched)?;
            let ztv = t.constant(z_t);
            let ev = t.constant(eps);
            let cv = t.constant(item.cond.clone());
            let eps_hat = den.denoise_on_tape(&mut t, &p, ztv, t_step, cv);
            let diff = t.sub(ev, eps_hat);
            lat_terms.push(sum_sq(&mut t, diff));

            if let (Some(c), Some((vae_p, adapter_p))) = (coupling, frozen.as_ref()) {
                let ab = sched.alpha_bar(t_step);
                let scaled_eps = t.scale(eps_hat, (1.0 - ab).sqrt());
                let numer = t.sub(ztv, scaled_eps);
                let z0_hat = t.scale(numer, 1.0 / ab.sqrt());
                let scale_c = t.constant(c.norm.scale.clone());
                let shift_c = t.constant(c.norm.shift.clone());
                let rescaled = t.mul(z0_hat, scale_c);
                let z0_raw = t.add(rescaled, shift_c);
                apt_terms.push(adapter_loss_on_tape(
                    &mut t,
                    c.vae,
                    vae_p,
                    c.adapter,
                    adapter_p,
                    z0_raw,
                    item.label,
                    item.len,
                )?);
            }
        }
        let inv_b = 1.0 / batch.len() as f64;
        let mut lat_sum = lat_terms[0];
        for &term in &lat_terms[1..] {
            lat_sum = t.add(lat_sum, term);
        }
        let l_lat = t.scale(lat_sum, inv_b);
        let mut fields = vec![("l_lat", t.scalar(l_lat))];
        let objective = if let Some(c) = coupling {
            let mut apt_sum = apt_terms[0];
            for &term in &apt_terms[1..] {
                apt_sum = t.add(apt_sum, term);
            }
            let l_apt = t.scale(apt_sum, inv_b);
            fields.push(("l_apt", t.scalar(l_apt)));
            let wl = t.scale(l_lat, c.weights.lambda_lat);
            let wa = t.scale(l_apt, c.weights.lambda_adapter);
            t.add(wl, wa)
        } else {
            l_lat
        };
        let loss_val = t.scalar(objective);
        fields.insert(0, ("loss", loss_val));
        if !loss_val.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite denoiser loss {loss_val} at step {step}"
            )));
        }
        let grads = t.backward(objective);
        let flat = den.params.collect_grads(&p, &grads);
        if crate::nn::any_non_finite(&flat) {
            return Err(Error::Numeric(format!(
                "non-finite denoiser gradient at step {step}"
            )));
        }
        opt.step(&mut den.params, &flat);
        log.push(TrainLogRow {
            step,
            wall_ms: start.elapsed().as_millis(),
            fields,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterConfig;
    use crate::vae::VaeConfig;
    use ndarray::Array2;

    fn tiny_denoiser(conditioning: Conditioning) -> Denoiser {
        Denoiser::init(
            DenoiserConfig {
                layers: 1,
                heads: 2,
                width: 8,
                latent_tokens: 1,
                conditioning,
                skip_connections: true,
            },
            7,
        )
        .unwrap()
    }

    fn tiny_upper_vae(seed: u64) -> Vae {
        Vae::init(
            VaeConfig {
                region: Region::Upper,
                layers: 1,
                heads: 2,
                width: 8,
                latent_tokens: 1,
                max_len: 32,
                kl_weight: 1e-4,
                skip_connections: true,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn linear_schedule_hits_both_endpoints() {
        let s = make_schedule(1000, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.beta(1), 8.5e-4);
        assert!((s.beta(1000) - 0.012).abs() < 1e-15);
        for t in 2..=1000 {
            assert!(s.beta(t) >= s.beta(t - 1));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(1000) > 0.0);
    }

    #[test]
    fn explicit_beta_fixture() {
        let s = from_betas(&[0.5, 0.5]).unwrap();
        assert_eq!(s.alpha(1), 0.5);
        assert_eq!(s.alpha(2), 0.5);
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.alpha_bar(2), 0.25);
    }

    #[test]
    fn invalid_schedules_are_config_errors() {
        assert!(matches!(
            make_schedule(1, 0.1, 0.2),
            Err(Error::Config(_))
        ));
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.2, 1.0).is_err());
        assert!(from_betas(&[]).is_err());
        assert!(from_betas(&[1.0]).is_err());
    }

    #[test]
    fn noising_identities() {
        let z0 = Matrix::from_elem((1, 4), 3.0);
        let zero_eps = Matrix::zeros((1, 4));

        let degenerate = from_betas(&[0.0; 5]).unwrap();
        let z5 = q_sample(&z0, 5, &zero_eps, &degenerate).unwrap();
        assert_eq!(z5, z0);

        let s = make_schedule(1000, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        let z1 = q_sample(&z0, 1, &zero_eps, &s).unwrap();
        let scale = (1.0 - 8.5e-4f64).sqrt();
        assert!((scale - 0.9995748).abs() < 1e-6);
        for v in z1.iter() {
            assert!((v - scale * 3.0).abs() < 1e-15);
        }

        assert!(q_sample(&z0, 0, &zero_eps, &s).is_err());
        assert!(q_sample(&z0, 1001, &zero_eps, &s).is_err());
    }

    #[test]
    fn closed_form_noising_matches_iterated_single_steps_in_distribution() {
        let s = make_schedule(10, 0.02, 0.2).unwrap();
        let z0 = 10.0f64;
        let t_step = 10;
        let draws = 20_000;

        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut closed = Vec::with_capacity(draws);
        for _ in 0..draws {
            let eps = crate::nn::normal_sample(&mut rng);
            closed.push(s.alpha_bar(t_step).sqrt() * z0 + (1.0 - s.alpha_bar(t_step)).sqrt() * eps);
        }
        let mut rng2 = ChaCha12Rng::seed_from_u64(12);
        let mut iterated = Vec::with_capacity(draws);
        for _ in 0..draws {
            let mut z = z0;
            for t in 1..=t_step {
                let e = crate::nn::normal_sample(&mut rng2);
                z = s.alpha(t).sqrt() * z + s.beta(t).sqrt() * e;
            }
            iterated.push(z);
        }
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
            (m, var.sqrt())
        };
        let (mc, sc) = stats(&closed);
        let (mi, si) = stats(&iterated);
        assert!((mc - mi).abs() / mi.abs() < 0.02, "means {mc} vs {mi}");
        assert!((sc - si).abs() / si < 0.05, "stds {sc} vs {si}");
    }

    #[test]
    fn audio_embedding_is_deterministic_and_emotion_sensitive() {
        let zero = AudioFeatureTrack {
            features: Array2::zeros((20, AUDIO_CHANNELS)),
            fps: 25,
            emotion: EmotionLabel::Neutral,
        };
        let a = embed_audio(&zero).unwrap();
        let b = embed_audio(&zero).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (1, AUDIO_EMBED_DIM));
        assert!(a.iter().all(|v| v.is_finite() && v.abs() <= 1.0));

        let short = AudioFeatureTrack {
            features: Array2::zeros((1, AUDIO_CHANNELS)),
            fps: 25,
            emotion: EmotionLabel::Neutral,
        };
        assert!(embed_audio(&short).is_err());

        let mut with_emotion = zero.features.clone();
        for r in 0..20 {
            for c in 8..16 {
                with_emotion[(r, c)] = 0.9;
            }
        }
        let other = AudioFeatureTrack {
            features: with_emotion,
            fps: 25,
            emotion: EmotionLabel::Angry,
        };
        let c = embed_audio(&other).unwrap();
        let dist = (&a - &c).mapv(|v| v * v).sum().sqrt();
        assert!(dist > 0.0);

        let longer = AudioFeatureTrack {
            features: Array2::zeros((77, AUDIO_CHANNELS)),
            fps: 25,
            emotion: EmotionLabel::Neutral,
        };
        assert_eq!(embed_audio(&longer).unwrap().dim(), (1, AUDIO_EMBED_DIM));
    }

    #[test]
    fn denoiser_output_shape_and_determinism_in_both_modes() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let z = normal_matrix(&mut rng, 1, 8);
        let cond = normal_matrix(&mut rng, 1, AUDIO_EMBED_DIM);
        for mode in [Conditioning::Concat, Conditioning::CrossAttention] {
            let den = tiny_denoiser(mode);
            let a = den.denoise(&z, 3, &cond).unwrap();
            assert_eq!(a.dim(), (1, 8));
            assert_eq!(a, den.denoise(&z, 3, &cond).unwrap());
            let zero_cond = Matrix::zeros((1, AUDIO_EMBED_DIM));
            let b = den.denoise(&z, 3, &zero_cond).unwrap();
            assert_eq!(b.dim(), (1, 8));
            assert_ne!(a, b);
        }
    }

    #[test]
    fn denoiser_rejects_bad_shapes() {
        let den = tiny_denoiser(Conditioning::Concat);
        let cond = Matrix::zeros((1, AUDIO_EMBED_DIM));
        assert!(den.denoise(&Matrix::zeros((2, 8)), 1, &cond).is_err());
        assert!(den
            .denoise(&Matrix::zeros((1, 8)), 1, &Matrix::zeros((1, 10)))
            .is_err());
        assert!(den.denoise(&Matrix::zeros((1, 8)), 0, &cond).is_err());
    }

    #[test]
    fn loss_matches_independent_recomputation_and_is_nonnegative() {
        let den = tiny_denoiser(Conditioning::Concat);
        let s = make_schedule(50, 1e-3, 0.05).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        for _ in 0..10 {
            let z0 = normal_matrix(&mut rng, 1, 8);
            let eps = normal_matrix(&mut rng, 1, 8);
            let cond = normal_matrix(&mut rng, 1, AUDIO_EMBED_DIM);
            let t_step = rng.random_range(1..=50);
            let loss = diffusion_loss(&den, &s, &z0, t_step, &eps, &cond).unwrap();
            assert!(loss >= 0.0);
            let z_t = &z0 * s.alpha_bar(t_step).sqrt() + &eps * (1.0 - s.alpha_bar(t_step)).sqrt();
            let eps_hat = den.denoise(&z_t, t_step, &cond).unwrap();
            let oracle: f64 = eps
                .iter()
                .zip(eps_hat.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            assert!((loss - oracle).abs() < 1e-12);
        }
        let zeros = Matrix::zeros((1, 8));
        let same: f64 = (&zeros - &zeros).mapv(|v| v * v).sum();
        assert_eq!(same, 0.0);
    }

    #[test]
    fn untrained_loss_estimates_agree_across_independent_streams() {
        let den = tiny_denoiser(Conditioning::Concat);
        let s = make_schedule(100, 1e-3, 0.05).unwrap();
        let estimate = |seed: u64| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut total = 0.0;
            let draws = 3000;
            for _ in 0..draws {
                let z0 = normal_matrix(&mut rng, 1, 8);
                let eps = normal_matrix(&mut rng, 1, 8);
                let cond = normal_matrix(&mut rng, 1, AUDIO_EMBED_DIM);
                let t_step = rng.random_range(1..=100);
                total += diffusion_loss(&den, &s, &z0, t_step, &eps, &cond).unwrap();
            }
            total / draws as f64
        };
        let a = estimate(31);
        let b = estimate(77);
        assert!((a - b).abs() / a < 0.05, "estimates {a} vs {b}");
    }

    #[test]
    fn reverse_step_is_deterministic_at_t1_and_inert_on_degenerate_schedule() {
        let mut den = tiny_denoiser(Conditioning::Concat);
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let cond = normal_matrix(&mut rng, 1, AUDIO_EMBED_DIM);
        let z = normal_matrix(&mut rng, 1, 8);

        let s = make_schedule(10, 0.02, 0.2).unwrap();
        let mut r1 = ChaCha12Rng::seed_from_u64(1);
        let mut r2 = ChaCha12Rng::seed_from_u64(2);
        let a = p_sample_step(&den, &s, &z, 1, &cond, &mut r1).unwrap();
        let b = p_sample_step(&den, &s, &z, 1, &cond, &mut r2).unwrap();
        assert_eq!(a, b);

        den.params.set("out.w", Matrix::zeros((8, 8)));
        den.params.set("out.b", Matrix::zeros((1, 8)));
        assert_eq!(den.denoise(&z, 3, &cond).unwrap(), Matrix::zeros((1, 8)));
        let degenerate = from_betas(&[0.0; 10]).unwrap();
        let out = p_sample_step(&den, &degenerate, &z, 3, &cond, &mut r1).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn reverse_step_matches_hand_computed_posterior_mean() {
        let mut den = Denoiser::init(
            DenoiserConfig {
                layers: 1,
                heads: 1,
                width: 2,
                latent_tokens: 1,
                conditioning: Conditioning::Concat,
                skip_connections: false,
            },
            9,
        )
        .unwrap();
        let eps_const = 0.37;
        den.params.set("out.w", Matrix::zeros((2, 2)));
        den.params.set("out.b", Matrix::from_elem((1, 2), eps_const));
        let s = from_betas(&[0.2, 0.1]).unwrap();
        let cond = Matrix::zeros((1, AUDIO_EMBED_DIM));
        let z2 = Matrix::from_elem((1, 2), 1.3);

        let mut rng = ChaCha12Rng::seed_from_u64(50);
        let mut rng_probe = rng.clone();
        let got = p_sample_step(&den, &s, &z2, 2, &cond, &mut rng).unwrap();

        let beta2 = 0.1;
        let ab2 = 0.8 * 0.9;
        let ab1 = 0.8;
        let alpha2 = 0.9;
        let mu = (1.3 - beta2 / (1.0f64 - ab2).sqrt() * eps_const) / f64::sqrt(alpha2);
        let beta_tilde = beta2 * (1.0 - ab1) / (1.0 - ab2);
        let noise = normal_matrix(&mut rng_probe, 1, 2);
        for c in 0..2 {
            let expected = mu + beta_tilde.sqrt() * noise[(0, c)];
            assert!((got[(0, c)] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn strided_step_sequences_are_well_formed() {
        assert_eq!(strided_steps(10, 10).unwrap(), (1..=10).rev().collect::<Vec<_>>());
        assert_eq!(strided_steps(10, 1).unwrap(), vec![10]);
        let ts = strided_steps(1000, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 1000);
        assert_eq!(*ts.last().unwrap(), 1);
        for w in ts.windows(2) {
            assert!(w[0] > w[1]);
        }
        assert!(strided_steps(10, 11).is_err());
        assert!(strided_steps(10, 0).is_err());
    }

    #[test]
    fn full_step_count_reproduces_the_naive_chain_bit_for_bit() {
        let den = tiny_denoiser(Conditioning::Concat);
        let s = make_schedule(12, 0.01, 0.1).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(60);
        let cond = normal_matrix(&mut rng, 1, AUDIO_EMBED_DIM);

        let mut r1 = ChaCha12Rng::seed_from_u64(61);
        let strided = sample_latent(&den, &s, &cond, 12, &mut r1).unwrap();

        let mut r2 = ChaCha12Rng::seed_from_u64(61);
        let mut z = normal_matrix(&mut r2, 1, 8);
        for t_step in (1..=12).rev() {
            z = p_sample_step(&den, &s, &z, t_step, &cond, &mut r2).unwrap();
        }
        assert_eq!(strided, z);
    }

    #[test]
    fn reduced_step_sampling_is_deterministic_and_finite() {
        let den = tiny_denoiser(Conditioning::Concat);
        let s = make_schedule(40, 1e-3, 0.05).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(70);
        let cond = normal_matrix(&mut rng, 1, AUDIO_EMBED_DIM);
        let mut r1 = ChaCha12Rng::seed_from_u64(71);
        let a = sample_latent(&den, &s, &cond, 8, &mut r1).unwrap();
        let mut r2 = ChaCha12Rng::seed_from_u64(71);
        let b = sample_latent(&den, &s, &cond, 8, &mut r2).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
        assert!(sample_latent(&den, &s, &cond, 41, &mut r1).is_err());
    }

    #[test]
    fn sampled_sequences_decode_through_the_region_vae() {
        let den = tiny_denoiser(Conditioning::Concat);
        let vae = tiny_upper_vae(80);
        let s = make_schedule(20, 1e-3, 0.05).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(81);
        let cond = normal_matrix(&mut rng, 1, AUDIO_EMBED_DIM);
        let mut r = ChaCha12Rng::seed_from_u64(82);
        let norm = LatentNorm::identity(1, 8);
        let seq = sample_sequence(&den, &s, &vae, &norm, &cond, 5, 14, &mut r).unwrap();
        assert_eq!(seq.dim(), (14, Region::Upper.cols()));
    }

    #[test]
    fn latent_normalizer_standardizes_and_round_trips() {
        let mut rng = ChaCha12Rng::seed_from_u64(300);
        let items: Vec<DiffusionTrainItem> = (0..40)
            .map(|_| DiffusionTrainItem {
                z0: &normal_matrix(&mut rng, 2, 5) * 0.03 + 4.0,
                cond: Matrix::zeros((1, AUDIO_EMBED_DIM)),
                label: EmotionLabel::Neutral,
                len: 3,
            })
            .collect();
        let norm = LatentNorm::fit(&items).unwrap();
        let mut mean = Matrix::zeros((2, 5));
        let mut var = Matrix::zeros((2, 5));
        let applied: Vec<Matrix> = items.iter().map(|i| norm.apply(&i.z0).unwrap()).collect();
        for a in &applied {
            mean += a;
        }
        mean /= items.len() as f64;
        for a in &applied {
            var += &(a - &mean).mapv(|v| v * v);
        }
        var /= items.len() as f64;
        assert!(mean.iter().all(|v| v.abs() < 1e-10));
        assert!(var.iter().all(|v| (v - 1.0).abs() < 1e-10));
        for item in &items {
            let back = norm.invert(&norm.apply(&item.z0).unwrap()).unwrap();
            let gap = (&back - &item.z0).mapv(f64::abs).sum();
            assert!(gap < 1e-9);
        }
        assert!(norm.apply(&Matrix::zeros((1, 5))).is_err());
    }

    #[test]
    fn latent_normalizer_leaves_constant_entries_unscaled() {
        let items: Vec<DiffusionTrainItem> = (0..6)
            .map(|i| DiffusionTrainItem {
                z0: Matrix::from_shape_fn((1, 3), |(_, c)| {
                    if c == 0 {
                        2.5
                    } else {
                        i as f64
                    }
                }),
                cond: Matrix::zeros((1, AUDIO_EMBED_DIM)),
                label: EmotionLabel::Neutral,
                len: 3,
            })
            .collect();
        let norm = LatentNorm::fit(&items).unwrap();
        assert_eq!(norm.scale[(0, 0)], 1.0);
        assert_eq!(norm.shift[(0, 0)], 2.5);
        let z = norm.apply(&items[0].z0).unwrap();
        assert_eq!(z[(0, 0)], 0.0);
        assert!(LatentNorm::fit(&[]).is_err());
    }

    #[test]
    fn training_gradients_match_finite_differences() {
        let cfg = DenoiserConfig {
            layers: 1,
            heads: 2,
            width: 8,
            latent_tokens: 1,
            conditioning: Conditioning::Concat,
            skip_connections: false,
        };
        let den = Denoiser::init(cfg.clone(), 90).unwrap();
        let s = make_schedule(10, 0.02, 0.2).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(91);
        let z0 = normal_matrix(&mut rng, 1, 8);
        let eps = normal_matrix(&mut rng, 1, 8);
        let cond = normal_matrix(&mut rng, 1, AUDIO_EMBED_DIM);
        let t_step = 4;

        let z_t = q_sample(&z0, t_step, &eps, &s).unwrap();
        let mut t = Tape::new();
        let p = den.params.bind(&mut t, true);
        let ztv = t.constant(z_t);
        let ev = t.constant(eps.clone());
        let cv = t.constant(cond.clone());
        let eps_hat = den.denoise_on_tape(&mut t, &p, ztv, t_step, cv);
        let diff = t.sub(ev, eps_hat);
        let loss = sum_sq(&mut t, diff);
        let grads = t.backward(loss);
        let flat = den.params.collect_grads(&p, &grads);

        let eval = |params: &ParamStore| {
            let probe = Denoiser {
                cfg: cfg.clone(),
                params: params.clone(),
            };
            diffusion_loss(&probe, &s, &z0, t_step, &eps, &cond).unwrap()
        };
        let eps_fd = 1e-5;
        for (pi, (name, value)) in den.params.iter().enumerate().step_by(4) {
            let probes = [(0, 0), (value.nrows() / 2, value.ncols() / 2)];
            for &(r, c) in &probes {
                let mut plus = den.params.clone();
                let mut vp = value.clone();
                vp[(r, c)] += eps_fd;
                plus.set(name, vp);
                let mut minus = den.params.clone();
                let mut vm = value.clone();
                vm[(r, c)] -= eps_fd;
                minus.set(name, vm);
                let num = (eval(&plus) - eval(&minus)) / (2.0 * eps_fd);
                let ana = flat[pi][(r, c)];
                let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-4);
                assert!(rel < 1e-4, "{name}[{r},{c}]: analytic {ana} vs numeric {num}");
            }
        }
    }

    #[test]
    fn short_training_is_reproducible() {
        let run = || {
            let mut den = tiny_denoiser(Conditioning::Concat);
            let s = make_schedule(10, 0.02, 0.2).unwrap();
            let mut rng = ChaCha12Rng::seed_from_u64(100);
            let items: Vec<DiffusionTrainItem> = (0..4)
                .map(|i| DiffusionTrainItem {
                    z0: normal_matrix(&mut rng, 1, 8),
                    cond: normal_matrix(&mut rng, 1, AUDIO_EMBED_DIM),
                    label: EmotionLabel::from_index(i).unwrap(),
                    len: 6,
                })
                .collect();
            let tc = DiffTrainConfig {
                steps: 4,
                batch_size: 2,
                lr: 1e-3,
                seed: 101,
                ..Default::default()
            };
            train_denoiser(&mut den, &s, &items, None, &tc).unwrap();
            den.params
        };
        let a = run();
        let b = run();
        for ((na, va), (nb, vb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(va, vb, "{na}");
        }
    }

    #[test]
    fn coupled_training_moves_only_denoiser_parameters() {
        let mut den = tiny_denoiser(Conditioning::Concat);
        let vae = tiny_upper_vae(110);
        let mut adapter = Adapter::init(
            AdapterConfig {
                layers: 1,
                heads: 2,
                width: 8,
                input_cols: Region::Upper.cols(),
                num_categories: 9,
                skip_connections: true,
            },
            111,
        )
        .unwrap();
        adapter.freeze();
        let vae_before = vae.params.clone();
        let adapter_before = adapter.params.clone();
        let den_before = den.params.clone();

        let s = make_schedule(10, 0.02, 0.2).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(112);
        let items: Vec<DiffusionTrainItem> = (0..4)
            .map(|i| DiffusionTrainItem {
                z0: normal_matrix(&mut rng, 1, 8),
                cond: normal_matrix(&mut rng, 1, AUDIO_EMBED_DIM),
                label: EmotionLabel::from_index(i).unwrap(),
                len: 6,
            })
            .collect();
        let norm = LatentNorm {
            shift: normal_matrix(&mut rng, 1, 8),
            scale: normal_matrix(&mut rng, 1, 8).mapv(|v| v.abs() + 0.5),
        };
        let coupling = AdapterCoupling {
            vae: &vae,
            adapter: &adapter,
            weights: LossWeights::default(),
            norm: &norm,
        };
        let tc = DiffTrainConfig {
            steps: 3,
            batch_size: 2,
            lr: 1e-3,
            seed: 113,
            ..Default::default()
        };
        let log = train_denoiser(&mut den, &s, &items, Some(&coupling), &tc).unwrap();
        assert_eq!(log.len(), 3);
        assert!(log[0].fields.iter().any(|(k, _)| *k == "l_apt"));

        for ((na, va), (_, vb)) in vae.params.iter().zip(vae_before.iter()) {
            assert_eq!(va, vb, "decoder parameter {na} moved");
        }
        for ((na, va), (_, vb)) in adapter.params.iter().zip(adapter_before.iter()) {
            assert_eq!(va, vb, "adapter parameter {na} moved");
        }
        let mut changed = false;
        for ((_, va), (_, vb)) in den.params.iter().zip(den_before.iter()) {
            if va != vb {
                changed = true;
            }
        }
        assert!(changed);
    }

    #[test]
    fn unfrozen_adapter_coupling_is_rejected() {
        let mut den = tiny_denoiser(Conditioning::Concat);
        let vae = tiny_upper_vae(120);
        let adapter = Adapter::init(
            AdapterConfig {
                layers: 1,
                heads: 2,
                width: 8,
                input_cols: Region::Upper.cols(),
                num_categories: 9,
                skip_connections: true,
            },
            121,
        )
        .unwrap();
        let s = make_schedule(10, 0.02, 0.2).unwrap();
        let items = vec![DiffusionTrainItem {
            z0: Matrix::zeros((1, 8)),
            cond: Matrix::zeros((1, AUDIO_EMBED_DIM)),
            label: EmotionLabel::Neutral,
            len: 6,
        }];
        let norm = LatentNorm::identity(1, 8);
        let coupling = AdapterCoupling {
            vae: &vae,
            adapter: &adapter,
            weights: LossWeights::default(),
            norm: &norm,
        };
        let tc = DiffTrainConfig {
            steps: 1,
            batch_size: 1,
            ..Default::default()
        };
        assert!(matches!(
            train_denoiser(&mut den, &s, &items, Some(&coupling), &tc),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn schedule_config_map_round_trip() {
        let m = schedule_to_config_map(200, 1e-3, 0.02);
        let s = schedule_from_config_map(&m).unwrap();
        assert_eq!(s.steps(), 200);
        assert_eq!(s.beta(1), 1e-3);
        assert!((s.beta(200) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn denoiser_config_map_round_trip() {
        let cfg = DenoiserConfig {
            layers: 3,
            heads: 2,
            width: 16,
            latent_tokens: 2,
            conditioning: Conditioning::CrossAttention,
            skip_connections: false,
        };
        let m = cfg.to_config_map("denoiser");
        let back = DenoiserConfig::from_config_map(&m, "denoiser").unwrap();
        assert_eq!(back.layers, cfg.layers);
        assert_eq!(back.heads, cfg.heads);
        assert_eq!(back.width, cfg.width);
        assert_eq!(back.latent_tokens, cfg.latent_tokens);
        assert_eq!(back.conditioning, cfg.conditioning);
        assert_eq!(back.skip_connections, cfg.skip_connections);
    }
}
