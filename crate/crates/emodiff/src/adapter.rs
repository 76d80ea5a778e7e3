//! Emotion adapter: an encoder-only transformer that classifies an
//! upper-face sequence into one of the nine emotion categories, plus the
//! combined per-region training objectives.
//!
//! The adapter is pretrained with cross-entropy on labeled ground-truth
//! sequences and frozen afterwards. During upper-region denoiser training it
//! scores decoded latent predictions, and its negative log-likelihood joins
//! the latent loss through `upper_objective`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::ckpt::ConfigMap;
use crate::error::{Error, Result};
use crate::nn::{
    encoder_stack, init_encoder_stack, init_layer_norm, init_linear, init_tokens, layer_norm,
    linear, sinusoidal_pe, AdamW, AdamWConfig, Bound, ParamStore,
};
use crate::seqcore::names::{EmotionLabel, ALL_EMOTIONS, NUM_EMOTIONS};
use crate::tape::{Matrix, Tape, Var};
use crate::vae::{Latent, Region, TrainLogRow, Vae};

#[derive(Debug, Clone)]
pub struct AdapterConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub input_cols: usize,
    pub num_categories: usize,
    pub skip_connections: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            layers: 4,
            heads: 4,
            width: 256,
            input_cols: Region::Upper.cols(),
            num_categories: NUM_EMOTIONS,
            skip_connections: true,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        if self.num_categories < 2 {
            return Err(Error::Config("need at least 2 categories".into()));
        }
        if self.input_cols == 0 {
            return Err(Error::Config("input_cols must be positive".into()));
        }
        Ok(())
    }

    pub fn to_config_map(&self, prefix: &str) -> ConfigMap {
        let mut m = ConfigMap::new();
        m.insert(format!("{prefix}.layers"), self.layers.to_string());
        m.insert(format!("{prefix}.heads"), self.heads.to_string());
        m.insert(format!("{prefix}.width"), self.width.to_string());
        m.insert(format!("{prefix}.input_cols"), self.input_cols.to_string());
        m.insert(
            format!("{prefix}.num_categories"),
            self.num_categories.to_string(),
        );
        m.insert(
            format!("{prefix}.skip_connections"),
            self.skip_connections.to_string(),
        );
        let names: Vec<&str> = ALL_EMOTIONS.iter().map(|e| e.name()).collect();
        m.insert(format!("{prefix}.categories"), names.join(","));
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
        let expected: Vec<&str> = ALL_EMOTIONS.iter().map(|e| e.name()).collect();
        if get("categories")? != expected.join(",") {
            return Err(Error::Config(
                "checkpoint category list does not match this build".into(),
            ));
        }
        let cfg = AdapterConfig {
            layers: parse_usize("layers")?,
            heads: parse_usize("heads")?,
            width: parse_usize("width")?,
            input_cols: parse_usize("input_cols")?,
            num_categories: parse_usize("num_categories")?,
            skip_connections: get("skip_connections")?
                .parse()
                .map_err(|_| Error::Config(format!("bad bool for {prefix}.skip_connections")))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Weights mixing the latent diffusion loss with the adapter loss.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda_lat: f64,
    pub lambda_adapter: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_lat: 1.0,
            lambda_adapter: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_lat < 0.0 || self.lambda_adapter < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Upper-region objective: weighted sum of latent loss and adapter loss.
pub fn upper_objective(l_lat: f64, l_adapter: f64, w: LossWeights) -> f64 {
    w.lambda_lat * l_lat + w.lambda_adapter * l_adapter
}

/// Mouth-region objective: the latent loss alone.
pub fn mouth_objective(l_lat: f64) -> f64 {
    l_lat
}

/// `−log softmax(logits)[target]` for a 1×K logit row.
pub fn ce_from_logits(logits: &Matrix, target: usize) -> f64 {
    debug_assert_eq!(logits.nrows(), 1);
    debug_assert!(target < logits.ncols());
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    log_z - logits[(0, target)]
}

pub struct Adapter {
    pub cfg: AdapterConfig,
    pub params: ParamStore,
    frozen: bool,
}

impl Adapter {
    pub fn init(cfg: AdapterConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_linear(&mut params, &mut rng, "embed", cfg.input_cols, d);
        init_tokens(&mut params, &mut rng, "cls_token", 1, d);
        init_encoder_stack(&mut params, &mut rng, "blk", cfg.layers, d, cfg.skip_connections);
        init_layer_norm(&mut params, "final_ln", d);
        init_linear(&mut params, &mut rng, "head", d, cfg.num_categories);
        Ok(Adapter {
            cfg,
            params,
            frozen: false,
        })
    }

    pub fn from_parts(cfg: AdapterConfig, params: ParamStore, frozen: bool) -> Result<Self> {
        cfg.validate()?;
        Ok(Adapter { cfg, params, frozen })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    fn check_input(&self, seq: &Matrix) -> Result<()> {
        if seq.ncols() != self.cfg.input_cols {
            return Err(Error::Shape(format!(
                "adapter expects {} columns, got {}",
                self.cfg.input_cols,
                seq.ncols()
            )));
        }
        if seq.nrows() < 2 {
            return Err(Error::Validation(format!(
                "sequence length {} is below the 2-frame minimum",
                seq.nrows()
            )));
        }
        Ok(())
    }

    /// Category logits built on a tape: a class token prepended to the
    /// embedded position-encoded frames, read back after the blocks.
    pub fn forward_on_tape(&self, t: &mut Tape, p: &Bound, seq: Var) -> Var {
        let len = t.value(seq).nrows();
        let x = linear(t, p, "embed", seq);
        let pe = t.constant(sinusoidal_pe(len, self.cfg.width));
        let x = t.add(x, pe);
        let cls = p.var("cls_token");
        let stream = t.concat_rows(&[cls, x]);
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
        let cls_out = t.slice_rows(h, 0, 1);
        linear(t, p, "head", cls_out)
    }

    /// 1×9 category logits for an upper-face sequence.
    pub fn forward(&self, seq: &Matrix) -> Result<Matrix> {
        self.check_input(seq)?;
        let mut t = Tape::new();
        let p = self.params.bind(&mut t, false);
        let sv = t.constant(seq.clone());
        let logits = self.forward_on_tape(&mut t, &p, sv);
        Ok(t.value(logits).clone())
    }

    pub fn predict(&self, seq: &Matrix) -> Result<EmotionLabel> {
        let logits = self.forward(seq)?;
        let mut best = 0;
        for k in 1..logits.ncols() {
            if logits[(0, k)] > logits[(0, best)] {
                best = k;
            }
        }
        EmotionLabel::from_index(best)
    }

    /// Top-1 accuracy over labeled sequences.
    pub fn accuracy(&self, items: &[(Matrix, EmotionLabel)]) -> Result<f64> {
        if items.is_empty() {
            return Err(Error::Validation("accuracy over an empty set".into()));
        }
        let mut hits = 0usize;
        for (seq, label) in items {
            if self.predict(seq)? == *label {
                hits += 1;
            }
        }
        Ok(hits as f64 / items.len() as f64)
    }
}

/// `−log softmax[target]` of the adapter's logits on a var, as a tape
/// scalar. The one-hot selection keeps gradients flowing to the logits.
pub fn ce_on_tape(t: &mut Tape, logits: Var, target: usize, num_categories: usize) -> Var {
    let logp = t.log_softmax_rows(logits);
    let mut onehot = Matrix::zeros((1, num_categories));
    onehot[(0, target)] = 1.0;
    let mask = t.constant(onehot);
    let picked = t.mul(logp, mask);
    let s = t.sum_all(picked);
    t.scale(s, -1.0)
}

/// Adapter loss on a predicted clean latent: decode it with the frozen
/// upper-region decoder and take the negative log-likelihood of the target
/// emotion under the frozen adapter. Both models must already be frozen;
/// this is the score that flows back to the denoiser during training.
pub fn adapter_loss(
    latent: &Latent,
    target: EmotionLabel,
    len: usize,
    vae: &Vae,
    adapter: &Adapter,
) -> Result<f64> {
    if !adapter.frozen {
        return Err(Error::Config(
            "adapter must be pretrained and frozen before scoring".into(),
        ));
    }
    if vae.cfg.region != Region::Upper {
        return Err(Error::Config(format!(
            "adapter scoring needs the upper-region decoder, got {}",
            vae.cfg.region.name()
        )));
    }
    let decoded = vae.decode(latent, len)?;
    let logits = adapter.forward(&decoded)?;
    Ok(ce_from_logits(&logits, target.index()))
}

/// Tape version of [`adapter_loss`] used inside denoiser training steps.
/// `vae_p` and `adapter_p` must be bound non-trainable.
pub fn adapter_loss_on_tape(
    t: &mut Tape,
    vae: &Vae,
    vae_p: &Bound,
    adapter: &Adapter,
    adapter_p: &Bound,
    z0_hat: Var,
    target: EmotionLabel,
    len: usize,
) -> Result<Var> {
    if !adapter.frozen {
        return Err(Error::Config(
            "adapter must be pretrained and frozen before scoring".into(),
        ));
    }
    let decoded = vae.decode_on_tape(t, vae_p, z0_hat, len);
    let logits = adapter.forward_on_tape(t, adapter_p, decoded);
    Ok(ce_on_tape(
        t,
        logits,
        target.index(),
        adapter.cfg.num_categories,
    ))
}

#[derive(Debug, Clone)]
pub struct AdapterTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for AdapterTrainConfig {
    fn default() -> Self {
        AdapterTrainConfig {
            steps: 500,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 1e-2,
            seed: 0,
            eval_every: 25,
        }
    }
}

/// Supervised cross-entropy pretraining on labeled upper-face sequences.
/// The adapter is frozen when this returns successfully; the parameters
/// kept are the ones with the best validation accuracy. A non-finite loss
/// aborts with the best parameters restored.
pub fn pretrain_adapter(
    adapter: &mut Adapter,
    train: &[(Matrix, EmotionLabel)],
    val: &[(Matrix, EmotionLabel)],
    tc: &AdapterTrainConfig,
) -> Result<Vec<TrainLogRow>> {
    if train.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let mut seen = [false; NUM_EMOTIONS];
    for (_, label) in train {
        seen[label.index()] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::Validation(
            "adapter pretraining needs at least 2 emotion categories".into(),
        ));
    }
    for (seq, _) in train.iter().chain(val.iter()) {
        adapter.check_input(seq)?;
    }

    let mut rng = ChaCha12Rng::seed_from_u64(tc.seed);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: tc.lr,
            weight_decay: tc.weight_decay,
            ..Default::default()
        },
        &adapter.params,
    );
    let start = Instant::now();
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();

    let initial_acc = adapter.accuracy(val)?;
    let mut best = (initial_acc, adapter.params.clone());
    log.push(TrainLogRow {
        step: 0,
        wall_ms: start.elapsed().as_millis(),
        fields: vec![("val_acc", initial_acc)],
    });

    for step in 1..=tc.steps {
        let mut batch = Vec::with_capacity(tc.batch_size);
        for _ in 0..tc.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train[order[cursor]]);
            cursor += 1;
        }

        let mut t = Tape::new();
        let p = adapter.params.bind(&mut t, true);
        let mut terms = Vec::with_capacity(batch.len());
        let mut hits = 0usize;
        for (seq, label) in &batch {
            let sv = t.constant(seq.clone());
            let logits = adapter.forward_on_tape(&mut t, &p, sv);
            let row = t.value(logits);
            let mut argmax = 0;
            for k in 1..row.ncols() {
                if row[(0, k)] > row[(0, argmax)] {
                    argmax = k;
                }
            }
            if argmax == label.index() {
                hits += 1;
            }
            terms.push(ce_on_tape(
                &mut t,
                logits,
                label.index(),
                adapter.cfg.num_categories,
            ));
        }
        let mut sum = terms[0];
        for &term in &terms[1..] {
            sum = t.add(sum, term);
        }
        let loss = t.scale(sum, 1.0 / batch.len() as f64);
        let loss_val = t.scalar(loss);
        if !loss_val.is_finite() {
            adapter.params = best.1;
            return Err(Error::Numeric(format!(
                "non-finite adapter loss {loss_val} at step {step}"
            )));
        }
        let grads = t.backward(loss);
        let flat = adapter.params.collect_grads(&p, &grads);
        opt.step(&mut adapter.params, &flat);

        let mut fields = vec![
            ("ce", loss_val),
            ("batch_acc", hits as f64 / batch.len() as f64),
        ];
        if step % tc.eval_every == 0 || step == tc.steps {
            let val_acc = adapter.accuracy(val)?;
            if val_acc > best.0 {
                best = (val_acc, adapter.params.clone());
            }
            fields.push(("val_acc", val_acc));
        }
        log.push(TrainLogRow {
            step,
            wall_ms: start.elapsed().as_millis(),
            fields,
        });
    }
    adapter.params = best.1;
    adapter.freeze();
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal_matrix;
    use crate::vae::VaeConfig;
    use rand::Rng;

    fn tiny_cfg() -> AdapterConfig {
        AdapterConfig {
            layers: 1,
            heads: 2,
            width: 8,
            input_cols: Region::Upper.cols(),
            num_categories: NUM_EMOTIONS,
            skip_connections: true,
        }
    }

    fn random_upper(rng: &mut ChaCha12Rng, l: usize) -> Matrix {
        Matrix::from_shape_fn((l, Region::Upper.cols()), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn logits_have_category_shape_for_any_length() {
        let adapter = Adapter::init(tiny_cfg(), 1).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for l in [2usize, 7, 30] {
            let logits = adapter.forward(&random_upper(&mut rng, l)).unwrap();
            assert_eq!(logits.dim(), (1, 9));
            assert!(logits.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let adapter = Adapter::init(tiny_cfg(), 3).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let seq = random_upper(&mut rng, 10);
        assert_eq!(
            adapter.forward(&seq).unwrap(),
            adapter.forward(&seq).unwrap()
        );
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let uniform = Matrix::zeros((1, 9));
        let loss = ce_from_logits(&uniform, 4);
        assert!((loss - 9.0f64.ln()).abs() < 1e-12);
        assert!((loss - 2.1972245773362196).abs() < 1e-12);

        let mut onehot = Matrix::zeros((1, 9));
        onehot[(0, 2)] = 60.0;
        assert!(ce_from_logits(&onehot, 2) < 1e-12);

        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..20 {
            let logits = normal_matrix(&mut rng, 1, 9);
            let target = rng.random_range(0..9);
            let direct = ce_from_logits(&logits, target);
            let z: f64 = logits.iter().map(|&v| v.exp()).sum();
            let oracle = -(logits[(0, target)].exp() / z).ln();
            assert!((direct - oracle).abs() < 1e-10);
            assert!(direct >= 0.0);
        }
    }

    #[test]
    fn cross_entropy_decreases_as_target_logit_grows() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let base = normal_matrix(&mut rng, 1, 9);
        let mut prev = ce_from_logits(&base, 3);
        for bump in [0.5, 1.0, 2.0, 4.0] {
            let mut l = base.clone();
            l[(0, 3)] += bump;
            let cur = ce_from_logits(&l, 3);
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn ce_on_tape_matches_plain_and_has_softmax_gradient() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let logits = normal_matrix(&mut rng, 1, 9);
        let mut t = Tape::new();
        let lv = t.leaf(logits.clone());
        let loss = ce_on_tape(&mut t, lv, 2, 9);
        assert!((t.scalar(loss) - ce_from_logits(&logits, 2)).abs() < 1e-12);
        let grads = t.backward(loss);
        let g = grads.get(lv).unwrap();
        let z: f64 = logits.iter().map(|&v| v.exp()).sum();
        for k in 0..9 {
            let p = logits[(0, k)].exp() / z;
            let expected = if k == 2 { p - 1.0 } else { p };
            assert!((g[(0, k)] - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn objective_arithmetic() {
        let w = LossWeights::default();
        assert_eq!(w.lambda_lat, 1.0);
        assert_eq!(w.lambda_adapter, 10.0);
        assert_eq!(upper_objective(0.5, 0.2, w), 2.5);

        let no_adapter = LossWeights {
            lambda_lat: 1.0,
            lambda_adapter: 0.0,
        };
        assert_eq!(upper_objective(1.37, 9.9, no_adapter), 1.37);
        assert_eq!(mouth_objective(0.0), 0.0);
        assert_eq!(mouth_objective(1.37), 1.37);
        assert_eq!(
            mouth_objective(0.73),
            upper_objective(0.73, 123.0, no_adapter)
        );
    }

    #[test]
    fn objective_scales_linearly_in_the_weights() {
        let w = LossWeights {
            lambda_lat: 0.25,
            lambda_adapter: 1.5,
        };
        for c in [2.0f64, 0.5, 4.0] {
            let scaled = LossWeights {
                lambda_lat: c * w.lambda_lat,
                lambda_adapter: c * w.lambda_adapter,
            };
            assert_eq!(
                upper_objective(0.625, 0.375, scaled),
                c * upper_objective(0.625, 0.375, w)
            );
        }
    }

    #[test]
    fn negative_weights_are_rejected() {
        let w = LossWeights {
            lambda_lat: -1.0,
            lambda_adapter: 0.0,
        };
        assert!(w.validate().is_err());
    }

    #[test]
    fn adapter_loss_requires_frozen_adapter_and_upper_decoder() {
        let adapter = Adapter::init(tiny_cfg(), 8).unwrap();
        let vae = Vae::init(
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
            9,
        )
        .unwrap();
        let latent = Latent {
            z: Matrix::zeros((1, 8)),
            region: Region::Upper,
        };
        assert!(matches!(
            adapter_loss(&latent, EmotionLabel::Happy, 6, &vae, &adapter),
            Err(Error::Config(_))
        ));

        let mut frozen = Adapter::init(tiny_cfg(), 8).unwrap();
        frozen.freeze();
        let loss = adapter_loss(&latent, EmotionLabel::Happy, 6, &vae, &frozen).unwrap();
        let decoded = vae.decode(&latent, 6).unwrap();
        let logits = frozen.forward(&decoded).unwrap();
        assert!((loss - ce_from_logits(&logits, EmotionLabel::Happy.index())).abs() < 1e-12);

        let mouth_vae = Vae::init(
            VaeConfig {
                region: Region::Mouth,
                layers: 1,
                heads: 2,
                width: 8,
                latent_tokens: 1,
                max_len: 32,
                kl_weight: 1e-4,
                skip_connections: true,
            },
            10,
        )
        .unwrap();
        let mouth_latent = Latent {
            z: Matrix::zeros((1, 8)),
            region: Region::Mouth,
        };
        assert!(adapter_loss(&mouth_latent, EmotionLabel::Happy, 6, &mouth_vae, &frozen).is_err());
    }

    #[test]
    fn untrained_adapter_sits_at_chance_on_balanced_data() {
        let adapter = Adapter::init(tiny_cfg(), 11).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let mut items = Vec::new();
        for e in ALL_EMOTIONS {
            for _ in 0..20 {
                items.push((random_upper(&mut rng, 8), e));
            }
        }
        let acc = adapter.accuracy(&items).unwrap();
        assert!(
            (acc - 1.0 / 9.0).abs() <= 0.05,
            "chance-level accuracy expected, got {acc}"
        );
    }

    #[test]
    fn pretraining_learns_a_separable_toy_problem_and_freezes() {
        let mut adapter = Adapter::init(tiny_cfg(), 13).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let cols = Region::Upper.cols();
        let mut make = |e: EmotionLabel| {
            let mut m = Matrix::from_shape_fn((6, cols), |_| rng.random_range(0.0..0.05));
            let hot = e.index() % cols;
            for r in 0..6 {
                m[(r, hot)] = 0.95;
            }
            (m, e)
        };
        let labels = [EmotionLabel::Neutral, EmotionLabel::Angry, EmotionLabel::Happy];
        let train: Vec<_> = (0..30).map(|i| make(labels[i % 3])).collect();
        let val: Vec<_> = (0..9).map(|i| make(labels[i % 3])).collect();
        let tc = AdapterTrainConfig {
            steps: 120,
            batch_size: 6,
            lr: 3e-3,
            eval_every: 20,
            seed: 15,
            ..Default::default()
        };
        pretrain_adapter(&mut adapter, &train, &val, &tc).unwrap();
        assert!(adapter.is_frozen());
        let acc = adapter.accuracy(&val).unwrap();
        assert!(acc > 0.8, "toy separable accuracy {acc}");
    }

    #[test]
    fn pretraining_rejects_single_category_data() {
        let mut adapter = Adapter::init(tiny_cfg(), 16).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let train: Vec<_> = (0..8)
            .map(|_| (random_upper(&mut rng, 5), EmotionLabel::Sad))
            .collect();
        let val = train.clone();
        let tc = AdapterTrainConfig {
            steps: 2,
            batch_size: 2,
            ..Default::default()
        };
        assert!(matches!(
            pretrain_adapter(&mut adapter, &train, &val, &tc),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn config_map_round_trip() {
        let cfg = tiny_cfg();
        let m = cfg.to_config_map("adapter");
        assert!(m.get("adapter.categories").unwrap().starts_with("neutral,"));
        let back = AdapterConfig::from_config_map(&m, "adapter").unwrap();
        assert_eq!(back.layers, cfg.layers);
        assert_eq!(back.heads, cfg.heads);
        assert_eq!(back.width, cfg.width);
        assert_eq!(back.input_cols, cfg.input_cols);
        assert_eq!(back.num_categories, cfg.num_categories);
        assert_eq!(back.skip_connections, cfg.skip_connections);
    }
}
