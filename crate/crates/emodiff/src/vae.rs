//! Per-region transformer VAE over blendshape frame sequences.
//!
//! The encoder prepends learnable distribution tokens (n rows for the mean,
//! n for the log-variance) to the embedded frame stream, runs pre-norm
//! self-attention blocks with long skip connections, and reads the posterior
//! off the token positions. The decoder cross-attends L position-encoded
//! zero-token queries against the latent and projects each output frame back
//! to region coefficients, unclamped. Training minimizes mean squared
//! reconstruction error plus a weighted KL term.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::ckpt::ConfigMap;
use crate::error::{Error, Result};
use crate::nn::{
    decoder_stack, encoder_stack, init_decoder_stack, init_encoder_stack, init_linear,
    init_tokens, linear, mse_mean, normal_matrix, sinusoidal_pe, AdamW, AdamWConfig, Bound,
    ParamStore,
};
use crate::seqcore::names::FacePartition;
use crate::tape::{Matrix, Tape, Var};

/// Which column set of the 51 coefficients a model operates on. `Full` is
/// the single-latent ablation that treats the whole face as one region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Upper,
    Mouth,
    Full,
}

impl Region {
    pub fn cols(self) -> usize {
        let part = FacePartition::standard();
        match self {
            Region::Upper => part.upper_idx.len(),
            Region::Mouth => part.mouth_idx.len(),
            Region::Full => crate::seqcore::NUM_COEFFS,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Upper => "upper",
            Region::Mouth => "mouth",
            Region::Full => "full",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "upper" => Ok(Region::Upper),
            "mouth" => Ok(Region::Mouth),
            "full" => Ok(Region::Full),
            other => Err(Error::Config(format!("unknown region {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VaeConfig {
    pub region: Region,
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub latent_tokens: usize,
    pub max_len: usize,
    pub kl_weight: f64,
    pub skip_connections: bool,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            region: Region::Full,
            layers: 9,
            heads: 4,
            width: 256,
            latent_tokens: 1,
            max_len: 256,
            kl_weight: 1e-4,
            skip_connections: true,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.latent_tokens == 0 {
            return Err(Error::Config("latent_tokens must be at least 1".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        Ok(())
    }

    pub fn to_config_map(&self, prefix: &str) -> ConfigMap {
        let mut m = ConfigMap::new();
        m.insert(format!("{prefix}.region"), self.region.name().into());
        m.insert(format!("{prefix}.layers"), self.layers.to_string());
        m.insert(format!("{prefix}.heads"), self.heads.to_string());
        m.insert(format!("{prefix}.width"), self.width.to_string());
        m.insert(
            format!("{prefix}.latent_tokens"),
            self.latent_tokens.to_string(),
        );
        m.insert(format!("{prefix}.max_len"), self.max_len.to_string());
        m.insert(format!("{prefix}.kl_weight"), self.kl_weight.to_string());
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
        let cfg = VaeConfig {
            region: Region::from_name(get("region")?)?,
            layers: parse_usize("layers")?,
            heads: parse_usize("heads")?,
            width: parse_usize("width")?,
            latent_tokens: parse_usize("latent_tokens")?,
            max_len: parse_usize("max_len")?,
            kl_weight: get("kl_weight")?
                .parse()
                .map_err(|_| Error::Config(format!("bad float for {prefix}.kl_weight")))?,
            skip_connections: get("skip_connections")?
                .parse()
                .map_err(|_| Error::Config(format!("bad bool for {prefix}.skip_connections")))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Diagonal Gaussian over the latent tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Matrix,
    pub logvar: Matrix,
}

impl GaussianPosterior {
    pub fn validate(&self) -> Result<()> {
        if self.mu.dim() != self.logvar.dim() {
            return Err(Error::Shape(format!(
                "posterior mean {:?} and log-variance {:?} differ",
                self.mu.dim(),
                self.logvar.dim()
            )));
        }
        if self.mu.iter().chain(self.logvar.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("posterior has non-finite entries".into()));
        }
        Ok(())
    }
}

/// A sampled or denoised latent, tagged with its region.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub z: Matrix,
    pub region: Region,
}

/// `z = μ + exp(logvar/2) ⊙ noise`.
pub fn reparameterize(post: &GaussianPosterior, noise: &Matrix, region: Region) -> Latent {
    debug_assert_eq!(post.mu.dim(), noise.dim());
    let z = &post.mu + &(post.logvar.mapv(|v| (0.5 * v).exp()) * noise);
    Latent { z, region }
}

/// `0.5 · Σ (μ² + exp(logvar) − 1 − logvar)` over all latent entries.
pub fn kl_loss(post: &GaussianPosterior) -> f64 {
    post.mu
        .iter()
        .zip(post.logvar.iter())
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
        * 0.5
}

/// Mean squared error over all entries.
pub fn recon_loss(pred: &Matrix, target: &Matrix) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "reconstruction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(target.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

pub struct Vae {
    pub cfg: VaeConfig,
    pub params: ParamStore,
}

impl Vae {
    pub fn init(cfg: VaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let r = cfg.region.cols();
        let d = cfg.width;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_linear(&mut params, &mut rng, "embed", r, d);
        init_tokens(&mut params, &mut rng, "dist_tokens", 2 * cfg.latent_tokens, d);
        init_encoder_stack(&mut params, &mut rng, "enc", cfg.layers, d, cfg.skip_connections);
        init_decoder_stack(&mut params, &mut rng, "dec", cfg.layers, d, cfg.skip_connections);
        init_linear(&mut params, &mut rng, "head", d, r);
        Ok(Vae { cfg, params })
    }

    fn check_input(&self, seq: &Matrix) -> Result<()> {
        if seq.ncols() != self.cfg.region.cols() {
            return Err(Error::Shape(format!(
                "{} region expects {} columns, got {}",
                self.cfg.region.name(),
                self.cfg.region.cols(),
                seq.ncols()
            )));
        }
        self.check_len(seq.nrows())?;
        if seq.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("encoder input has non-finite values".into()));
        }
        Ok(())
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.cfg.max_len {
            return Err(Error::Length {
                len,
                max_len: self.cfg.max_len,
            });
        }
        if len < 2 {
            return Err(Error::Validation(format!(
                "sequence length {len} is below the 2-frame minimum"
            )));
        }
        Ok(())
    }

    /// Build the encoder on a tape. Returns the (μ, logvar) vars.
    pub fn encode_on_tape(&self, t: &mut Tape, p: &Bound, seq: Var) -> (Var, Var) {
        let n = self.cfg.latent_tokens;
        let len = t.value(seq).nrows();
        let x = linear(t, p, "embed", seq);
        let pe = t.constant(sinusoidal_pe(len, self.cfg.width));
        let x = t.add(x, pe);
        let tokens = p.var("dist_tokens");
        let stream = t.concat_rows(&[tokens, x]);
        let h = encoder_stack(
            t,
            p,
            "enc",
            stream,
            self.cfg.layers,
            self.cfg.heads,
            self.cfg.skip_connections,
        );
        let mu = t.slice_rows(h, 0, n);
        let logvar = t.slice_rows(h, n, n);
        (mu, logvar)
    }

    /// Build the decoder on a tape: `len` position-encoded zero-token queries
    /// cross-attending to the latent, projected to region coefficients.
    pub fn decode_on_tape(&self, t: &mut Tape, p: &Bound, z: Var, len: usize) -> Var {
        let queries = t.constant(sinusoidal_pe(len, self.cfg.width));
        let h = decoder_stack(
            t,
            p,
            "dec",
            queries,
            z,
            self.cfg.layers,
            self.cfg.heads,
            self.cfg.skip_connections,
        );
        linear(t, p, "head", h)
    }

    pub fn encode(&self, seq: &Matrix) -> Result<GaussianPosterior> {
        self.check_input(seq)?;
        let mut t = Tape::new();
        let p = self.params.bind(&mut t, false);
        let sv = t.constant(seq.clone());
        let (mu, logvar) = self.encode_on_tape(&mut t, &p, sv);
        let post = GaussianPosterior {
            mu: t.value(mu).clone(),
            logvar: t.value(logvar).clone(),
        };
        post.validate()?;
        Ok(post)
    }

    pub fn decode(&self, latent: &Latent, len: usize) -> Result<Matrix> {
        if latent.region != self.cfg.region {
            return Err(Error::Config(format!(
                "latent is tagged {} but this model handles {}",
                latent.region.name(),
                self.cfg.region.name()
            )));
        }
        let expected = (self.cfg.latent_tokens, self.cfg.width);
        if latent.z.dim() != expected {
            return Err(Error::Shape(format!(
                "latent shape {:?} does not match config {:?}",
                latent.z.dim(),
                expected
            )));
        }
        self.check_len(len)?;
        let mut t = Tape::new();
        let p = self.params.bind(&mut t, false);
        let zv = t.constant(latent.z.clone());
        let out = self.decode_on_tape(&mut t, &p, zv, len);
        Ok(t.value(out).clone())
    }

    /// Deterministic round trip through the mean latent.
    pub fn reconstruct_mean(&self, seq: &Matrix) -> Result<Matrix> {
        let post = self.encode(seq)?;
        let latent = Latent {
            z: post.mu,
            region: self.cfg.region,
        };
        self.decode(&latent, seq.nrows())
    }

    /// Mean reconstruction MSE over a set of sequences using mean latents.
    pub fn validation_mse(&self, seqs: &[Matrix]) -> Result<f64> {
        if seqs.is_empty() {
            return Err(Error::Validation("validation set is empty".into()));
        }
        let mut total = 0.0;
        for s in seqs {
            let recon = self.reconstruct_mean(s)?;
            total += recon_loss(&recon, s)?;
        }
        Ok(total / seqs.len() as f64)
    }
}

/// Loss values from one optimization step.
#[derive(Debug, Clone, Copy)]
pub struct VaeStepStats {
    pub total: f64,
    pub mse: f64,
    pub kl: f64,
}

/// One forward/backward pass over a batch. Per-sample losses are averaged;
/// the KL term is weighted by the config's `kl_weight`. Returns gradients in
/// parameter-store order.
pub fn vae_training_step(
    vae: &Vae,
    batch: &[Matrix],
    rng: &mut ChaCha12Rng,
) -> Result<(VaeStepStats, Vec<Matrix>)> {
    if batch.is_empty() {
        return Err(Error::Validation("training batch is empty".into()));
    }
    for seq in batch {
        vae.check_input(seq)?;
    }
    let n = vae.cfg.latent_tokens;
    let d = vae.cfg.width;
    let mut t = Tape::new();
    let p = vae.params.bind(&mut t, true);

    let mut mse_terms = Vec::with_capacity(batch.len());
    let mut kl_terms = Vec::with_capacity(batch.len());
    for seq in batch {
        let sv = t.constant(seq.clone());
        let (mu, logvar) = vae.encode_on_tape(&mut t, &p, sv);
        let noise = t.constant(normal_matrix(rng, n, d));
        let half_lv = t.scale(logvar, 0.5);
        let sigma = t.exp(half_lv);
        let scaled = t.mul(sigma, noise);
        let z = t.add(mu, scaled);
        let recon = vae.decode_on_tape(&mut t, &p, z, seq.nrows());
        mse_terms.push(mse_mean(&mut t, recon, sv));

        let mu2 = t.mul(mu, mu);
        let ev = t.exp(logvar);
        let s = t.add(mu2, ev);
        let s = t.add_scalar(s, -1.0);
        let s = t.sub(s, logvar);
        let ksum = t.sum_all(s);
        kl_terms.push(t.scale(ksum, 0.5));
    }
    let inv_b = 1.0 / batch.len() as f64;
    let mut mse_sum = mse_terms[0];
    for &m in &mse_terms[1..] {
        mse_sum = t.add(mse_sum, m);
    }
    let mut kl_sum = kl_terms[0];
    for &k in &kl_terms[1..] {
        kl_sum = t.add(kl_sum, k);
    }
    let mse_mean_var = t.scale(mse_sum, inv_b);
    let kl_mean_var = t.scale(kl_sum, inv_b);
    let weighted = t.scale(kl_mean_var, vae.cfg.kl_weight);
    let total = t.add(mse_mean_var, weighted);

    let stats = VaeStepStats {
        total: t.scalar(total),
        mse: t.scalar(mse_mean_var),
        kl: t.scalar(kl_mean_var),
    };
    if !stats.total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss: total {} mse {} kl {}",
            stats.total, stats.mse, stats.kl
        )));
    }
    let grads = t.backward(total);
    let flat = vae.params.collect_grads(&p, &grads);
    if crate::nn::any_non_finite(&flat) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok((stats, flat))
}

#[derive(Debug, Clone)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig {
            steps: 200,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 1e-2,
            seed: 0,
            eval_every: 20,
        }
    }
}

/// One log row per optimization step; `val_mse` is present on evaluation
/// steps.
#[derive(Debug, Clone)]
pub struct TrainLogRow {
    pub step: usize,
    pub wall_ms: u128,
    pub fields: Vec<(&'static str, f64)>,
}

/// Train in place. Batches are drawn by epoch-wise shuffling with the
/// config seed; validation runs every `eval_every` steps and at the end, and
/// the parameters with the best validation MSE are restored before
/// returning. A non-finite loss aborts with the best parameters restored and
/// a numeric error.
pub fn train_vae(
    vae: &mut Vae,
    train: &[Matrix],
    val: &[Matrix],
    tc: &VaeTrainConfig,
) -> Result<Vec<TrainLogRow>> {
    if train.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(tc.seed);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: tc.lr,
            weight_decay: tc.weight_decay,
            ..Default::default()
        },
        &vae.params,
    );
    let start = Instant::now();
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();

    let initial_val = vae.validation_mse(val)?;
    let mut best = (initial_val, vae.params.clone());
    log.push(TrainLogRow {
        step: 0,
        wall_ms: start.elapsed().as_millis(),
        fields: vec![("val_mse", initial_val)],
    });

    for step in 1..=tc.steps {
        let mut batch = Vec::with_capacity(tc.batch_size);
        for _ in 0..tc.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(train[order[cursor]].clone());
            cursor += 1;
        }
        let step_result = vae_training_step(vae, &batch, &mut rng);
        let (stats, grads) = match step_result {
            Ok(v) => v,
            Err(e) => {
                vae.params = best.1;
                return Err(e);
            }
        };
        opt.step(&mut vae.params, &grads);

        let mut fields = vec![
            ("total", stats.total),
            ("mse", stats.mse),
            ("kl", stats.kl),
        ];
        if step % tc.eval_every == 0 || step == tc.steps {
            let val_mse = vae.validation_mse(val)?;
            if val_mse < best.0 {
                best = (val_mse, vae.params.clone());
            }
            fields.push(("val_mse", val_mse));
        }
        log.push(TrainLogRow {
            step,
            wall_ms: start.elapsed().as_millis(),
            fields,
        });
    }
    vae.params = best.1;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_cfg(region: Region) -> VaeConfig {
        VaeConfig {
            region,
            layers: 1,
            heads: 2,
            width: 8,
            latent_tokens: 1,
            max_len: 32,
            kl_weight: 1e-4,
            skip_connections: true,
        }
    }

    fn random_region_seq(rng: &mut ChaCha12Rng, l: usize, r: usize) -> Matrix {
        Matrix::from_shape_fn((l, r), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn posterior_has_latent_token_shape() {
        let mut cfg = tiny_cfg(Region::Upper);
        cfg.latent_tokens = 3;
        let vae = Vae::init(cfg, 1).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let seq = random_region_seq(&mut rng, 10, Region::Upper.cols());
        let post = vae.encode(&seq).unwrap();
        assert_eq!(post.mu.dim(), (3, 8));
        assert_eq!(post.logvar.dim(), (3, 8));
    }

    #[test]
    fn encode_is_deterministic_and_input_sensitive() {
        let vae = Vae::init(tiny_cfg(Region::Mouth), 3).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for _ in 0..20 {
            let a = random_region_seq(&mut rng, 12, Region::Mouth.cols());
            let b = random_region_seq(&mut rng, 12, Region::Mouth.cols());
            let pa1 = vae.encode(&a).unwrap();
            let pa2 = vae.encode(&a).unwrap();
            assert_eq!(pa1, pa2);
            let pb = vae.encode(&b).unwrap();
            assert_ne!(pa1, pb);
        }
    }

    #[test]
    fn reparameterize_closed_forms() {
        let region = Region::Upper;
        let post = GaussianPosterior {
            mu: Matrix::from_elem((1, 4), 1.5),
            logvar: Matrix::zeros((1, 4)),
        };
        let z = reparameterize(&post, &Matrix::zeros((1, 4)), region);
        assert_eq!(z.z, post.mu);

        let post0 = GaussianPosterior {
            mu: Matrix::zeros((1, 4)),
            logvar: Matrix::zeros((1, 4)),
        };
        let noise = Matrix::from_elem((1, 4), 0.7);
        assert_eq!(reparameterize(&post0, &noise, region).z, noise);

        let scalar = GaussianPosterior {
            mu: Matrix::from_elem((1, 1), 2.0),
            logvar: Matrix::from_elem((1, 1), 4.0f64.ln()),
        };
        let z = reparameterize(&scalar, &Matrix::from_elem((1, 1), 1.0), region);
        assert!((z.z[(0, 0)] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn reparameterization_gradients_are_identity_and_sigma() {
        let mut t = Tape::new();
        let mu = t.leaf(Matrix::from_elem((1, 4), 0.3));
        let logvar = t.leaf(Matrix::from_shape_fn((1, 4), |(_, c)| 0.2 * c as f64));
        let noise = t.leaf(Matrix::from_elem((1, 4), 0.9));
        let half = t.scale(logvar, 0.5);
        let sigma = t.exp(half);
        let zn = t.mul(sigma, noise);
        let z = t.add(mu, zn);
        let loss = t.sum_all(z);
        let grads = t.backward(loss);
        let dmu = grads.get(mu).unwrap();
        assert!(dmu.iter().all(|&g| (g - 1.0).abs() < 1e-12));
        let dnoise = grads.get(noise).unwrap();
        for c in 0..4 {
            let expected = (0.5 * 0.2 * c as f64).exp();
            assert!((dnoise[(0, c)] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_closed_forms_and_nonnegativity() {
        let zero = GaussianPosterior {
            mu: Matrix::zeros((1, 256)),
            logvar: Matrix::zeros((1, 256)),
        };
        assert_eq!(kl_loss(&zero), 0.0);

        let ones = GaussianPosterior {
            mu: Matrix::from_elem((1, 256), 1.0),
            logvar: Matrix::zeros((1, 256)),
        };
        assert!((kl_loss(&ones) - 128.0).abs() < 1e-12);

        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..50 {
            let post = GaussianPosterior {
                mu: normal_matrix(&mut rng, 2, 16),
                logvar: normal_matrix(&mut rng, 2, 16),
            };
            assert!(kl_loss(&post) >= 0.0);
        }

        // Zero KL forces the standard normal.
        let off = GaussianPosterior {
            mu: Matrix::from_elem((1, 4), 1e-3),
            logvar: Matrix::zeros((1, 4)),
        };
        assert!(kl_loss(&off) > 0.0);
        let wide = GaussianPosterior {
            mu: Matrix::zeros((1, 4)),
            logvar: Matrix::from_elem((1, 4), 1e-3),
        };
        assert!(kl_loss(&wide) > 0.0);
    }

    #[test]
    fn recon_loss_fixtures() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let a = random_region_seq(&mut rng, 5, 7);
        assert_eq!(recon_loss(&a, &a).unwrap(), 0.0);
        let b = a.mapv(|v| v + 0.1);
        assert!((recon_loss(&b, &a).unwrap() - 0.01).abs() < 1e-15);
        assert_eq!(recon_loss(&a, &b).unwrap(), recon_loss(&b, &a).unwrap());
    }

    #[test]
    fn decode_is_length_polymorphic_and_deterministic() {
        let vae = Vae::init(tiny_cfg(Region::Upper), 7).unwrap();
        let latent = Latent {
            z: Matrix::from_elem((1, 8), 0.2),
            region: Region::Upper,
        };
        for len in [2usize, 5, 17, 32] {
            let out = vae.decode(&latent, len).unwrap();
            assert_eq!(out.dim(), (len, Region::Upper.cols()));
            assert_eq!(out, vae.decode(&latent, len).unwrap());
        }
    }

    #[test]
    fn length_limits_are_enforced() {
        let vae = Vae::init(tiny_cfg(Region::Upper), 8).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let too_long = random_region_seq(&mut rng, 33, Region::Upper.cols());
        assert!(matches!(
            vae.encode(&too_long),
            Err(Error::Length { len: 33, max_len: 32 })
        ));
        let latent = Latent {
            z: Matrix::zeros((1, 8)),
            region: Region::Upper,
        };
        assert!(vae.decode(&latent, 33).is_err());
        assert!(vae.decode(&latent, 1).is_err());
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let vae = Vae::init(tiny_cfg(Region::Mouth), 10).unwrap();
        let mut seq = Matrix::zeros((5, Region::Mouth.cols()));
        seq[(2, 3)] = f64::NAN;
        assert!(matches!(vae.encode(&seq), Err(Error::Validation(_))));
    }

    #[test]
    fn zero_kl_weight_makes_total_equal_mse() {
        let mut cfg = tiny_cfg(Region::Upper);
        cfg.kl_weight = 0.0;
        let vae = Vae::init(cfg, 11).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let batch = vec![
            random_region_seq(&mut rng, 6, Region::Upper.cols()),
            random_region_seq(&mut rng, 6, Region::Upper.cols()),
        ];
        let mut step_rng = ChaCha12Rng::seed_from_u64(13);
        let (stats, _) = vae_training_step(&vae, &batch, &mut step_rng).unwrap();
        assert_eq!(stats.total, stats.mse);
    }

    #[test]
    fn training_step_gradients_match_finite_differences() {
        let mut cfg = tiny_cfg(Region::Upper);
        cfg.skip_connections = false;
        cfg.heads = 2;
        let vae = Vae::init(cfg.clone(), 14).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let batch = vec![random_region_seq(&mut rng, 4, Region::Upper.cols())];

        let (_, analytic) = {
            let mut r = ChaCha12Rng::seed_from_u64(99);
            vae_training_step(&vae, &batch, &mut r).unwrap()
        };
        let eval = |params: &ParamStore| -> f64 {
            let probe = Vae {
                cfg: cfg.clone(),
                params: params.clone(),
            };
            let mut r = ChaCha12Rng::seed_from_u64(99);
            vae_training_step(&probe, &batch, &mut r).unwrap().0.total
        };
        let eps = 1e-5;
        for (pi, (name, value)) in vae.params.iter().enumerate().step_by(5) {
            let probes = [(0, 0), (value.nrows() / 2, value.ncols() / 2)];
            for &(r, c) in &probes {
                let mut plus = vae.params.clone();
                let mut vp = value.clone();
                vp[(r, c)] += eps;
                plus.set(name, vp);
                let mut minus = vae.params.clone();
                let mut vm = value.clone();
                vm[(r, c)] -= eps;
                minus.set(name, vm);
                let num = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let ana = analytic[pi][(r, c)];
                let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-4);
                assert!(rel < 1e-4, "{name}[{r},{c}]: analytic {ana} vs numeric {num}");
            }
        }
    }

    #[test]
    fn short_training_with_same_seed_is_bit_identical() {
        let run = || {
            let mut vae = Vae::init(tiny_cfg(Region::Upper), 20).unwrap();
            let mut rng = ChaCha12Rng::seed_from_u64(21);
            let train: Vec<Matrix> = (0..4)
                .map(|_| random_region_seq(&mut rng, 6, Region::Upper.cols()))
                .collect();
            let val = vec![random_region_seq(&mut rng, 6, Region::Upper.cols())];
            let tc = VaeTrainConfig {
                steps: 5,
                batch_size: 2,
                lr: 1e-3,
                eval_every: 2,
                seed: 22,
                ..Default::default()
            };
            train_vae(&mut vae, &train, &val, &tc).unwrap();
            vae.params
        };
        let a = run();
        let b = run();
        for ((na, va), (nb, vb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(va, vb, "{na}");
        }
    }

    #[test]
    fn config_map_round_trip() {
        let mut cfg = tiny_cfg(Region::Mouth);
        cfg.kl_weight = 3.5e-4;
        cfg.latent_tokens = 5;
        let m = cfg.to_config_map("vae");
        let back = VaeConfig::from_config_map(&m, "vae").unwrap();
        assert_eq!(back.region, cfg.region);
        assert_eq!(back.layers, cfg.layers);
        assert_eq!(back.heads, cfg.heads);
        assert_eq!(back.width, cfg.width);
        assert_eq!(back.latent_tokens, cfg.latent_tokens);
        assert_eq!(back.max_len, cfg.max_len);
        assert_eq!(back.kl_weight, cfg.kl_weight);
        assert_eq!(back.skip_connections, cfg.skip_connections);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = tiny_cfg(Region::Upper);
        c.width = 6;
        c.heads = 4;
        assert!(c.validate().is_err());
        let mut c2 = tiny_cfg(Region::Upper);
        c2.latent_tokens = 0;
        assert!(c2.validate().is_err());
        let mut c3 = tiny_cfg(Region::Upper);
        c3.layers = 0;
        assert!(c3.validate().is_err());
    }
}
