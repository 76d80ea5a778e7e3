//! The operations behind each CLI verb. Every command takes a resolved
//! `RunConfig` plus the exact config text to snapshot into its output
//! directory, works only through the filesystem, and returns the paths it
//! produced so callers can chain stages.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::adapter::{pretrain_adapter, Adapter, AdapterTrainConfig, LossWeights};
use crate::diffusion::{
    embed_audio, sample_sequence, train_denoiser, AdapterCoupling, Conditioning, Denoiser,
    DiffTrainConfig, DiffusionTrainItem, LatentNorm,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dataset, EvalReport};
use crate::seqcore::io::{load_audio, load_pairs, save_sequence, DatasetManifest, DatasetPair, Split};
use crate::seqcore::synth::{generate_synthetic_dataset, sequence_seed, GenConfig};
use crate::seqcore::{merge_regions, AudioFeatureTrack, BlendshapeSequence, FacePartition};
use crate::tape::Matrix;
use crate::vae::{reparameterize, train_vae, Region, Vae, VaeTrainConfig};

use super::{
    component_seed, labeled_region, load_adapter_ckpt, load_denoiser_ckpt, load_vae_ckpt,
    param_fingerprint, region_frames, save_adapter_ckpt, save_denoiser_ckpt, save_vae_ckpt,
    write_log, DenoiserBundle, RunConfig,
};

fn write_config_snapshot(dir: &Path, snapshot: &str) -> Result<()> {
    fs::write(dir.join("config.txt"), snapshot)?;
    Ok(())
}

fn manifest_path(data_dir: &Path) -> PathBuf {
    data_dir.join("manifest.tsv")
}

fn split_frames(pairs: &[DatasetPair], split: Split, region: Region) -> Result<Vec<Matrix>> {
    pairs
        .iter()
        .filter(|p| p.split == split)
        .map(|p| region_frames(&p.seq, region))
        .collect()
}

fn require_nonempty<T>(items: &[T], what: &str, split: Split) -> Result<()> {
    if items.is_empty() {
        return Err(Error::Validation(format!(
            "{what}: the {split} split has no sequences"
        )));
    }
    Ok(())
}

/// Generate the synthetic dataset into `out`. An existing non-empty
/// directory is refused unless `force` is set.
pub fn cmd_gen_data(
    cfg: &RunConfig,
    out: &Path,
    force: bool,
    snapshot: &str,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    if cfg.data.n < crate::seqcore::NUM_EMOTIONS {
        return Err(Error::Config(format!(
            "data.n must be at least {}, got {}",
            crate::seqcore::NUM_EMOTIONS,
            cfg.data.n
        )));
    }
    if out.is_dir() && out.read_dir()?.next().is_some() && !force {
        return Err(Error::Validation(format!(
            "output directory {} is not empty; pass --force to overwrite",
            out.display()
        )));
    }
    fs::create_dir_all(out)?;
    let gen = GenConfig {
        n: cfg.data.n,
        seed: cfg.seed,
        length: cfg.data.frames,
        fps: cfg.data.fps,
    };
    let manifest = generate_synthetic_dataset(out, &gen)?;
    write_config_snapshot(out, snapshot)?;
    println!("manifest\t{}", manifest_path(out).display());
    for split in [Split::Train, Split::Val, Split::Test] {
        println!(
            "count.{split}\t{}",
            manifest.split_entries(split).count()
        );
    }
    Ok(manifest)
}

/// Train the VAE for one region and save the best-validation checkpoint.
/// A numeric abort still leaves the best checkpoint on disk.
pub fn cmd_train_vae(
    cfg: &RunConfig,
    region: Region,
    data_dir: &Path,
    out_dir: &Path,
    snapshot: &str,
) -> Result<PathBuf> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    write_config_snapshot(out_dir, snapshot)?;
    let (_, pairs) = load_pairs(&manifest_path(data_dir))?;
    let train = split_frames(&pairs, Split::Train, region)?;
    let val = split_frames(&pairs, Split::Val, region)?;
    require_nonempty(&train, "vae training", Split::Train)?;
    require_nonempty(&val, "vae training", Split::Val)?;
    let vcfg = cfg.vae_config_for(region);
    let mut vae = Vae::init(vcfg, component_seed(cfg.seed, &format!("vae_{}", region.name())))?;
    let tc = VaeTrainConfig {
        steps: cfg.train.vae_steps,
        batch_size: cfg.train.batch_size,
        lr: cfg.train.vae_lr,
        weight_decay: cfg.train.weight_decay,
        seed: component_seed(cfg.seed, &format!("train_vae_{}", region.name())),
        eval_every: cfg.train.eval_every,
    };
    let ckpt = out_dir.join(format!("vae_{}.edck", region.name()));
    let outcome = train_vae(&mut vae, &train, &val, &tc);
    save_vae_ckpt(&ckpt, &vae, cfg.precision)?;
    match outcome {
        Ok(rows) => {
            write_log(
                &out_dir.join(format!("train_vae_{}.log.tsv", region.name())),
                &rows,
            )?;
            let vals: Vec<f64> = rows
                .iter()
                .filter_map(|r| {
                    r.fields
                        .iter()
                        .find(|(n, _)| *n == "val_mse")
                        .map(|(_, v)| *v)
                })
                .collect();
            if let (Some(first), Some(best)) =
                (vals.first(), vals.iter().copied().reduce(f64::min))
            {
                println!("initial_val_mse\t{first:.9e}");
                println!("best_val_mse\t{best:.9e}");
            }
            println!("checkpoint\t{}", ckpt.display());
            Ok(ckpt)
        }
        Err(e) => {
            println!("aborted; best checkpoint retained at {}", ckpt.display());
            Err(e)
        }
    }
}

/// Train the emotion classifier on ground-truth upper-face sequences and
/// save it frozen.
pub fn cmd_pretrain_adapter(
    cfg: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
    snapshot: &str,
) -> Result<PathBuf> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    write_config_snapshot(out_dir, snapshot)?;
    let (_, pairs) = load_pairs(&manifest_path(data_dir))?;
    let train_refs: Vec<&BlendshapeSequence> = pairs
        .iter()
        .filter(|p| p.split == Split::Train)
        .map(|p| &p.seq)
        .collect();
    let val_refs: Vec<&BlendshapeSequence> = pairs
        .iter()
        .filter(|p| p.split == Split::Val)
        .map(|p| &p.seq)
        .collect();
    require_nonempty(&train_refs, "adapter training", Split::Train)?;
    require_nonempty(&val_refs, "adapter training", Split::Val)?;
    let train = labeled_region(&train_refs, Region::Upper)?;
    let val = labeled_region(&val_refs, Region::Upper)?;
    let mut adapter = Adapter::init(cfg.adapter.clone(), component_seed(cfg.seed, "adapter"))?;
    let tc = AdapterTrainConfig {
        steps: cfg.train.adapter_steps,
        batch_size: cfg.train.batch_size,
        lr: cfg.train.adapter_lr,
        weight_decay: cfg.train.weight_decay,
        seed: component_seed(cfg.seed, "train_adapter"),
        eval_every: cfg.train.eval_every,
    };
    let ckpt = out_dir.join("adapter.edck");
    let outcome = pretrain_adapter(&mut adapter, &train, &val, &tc);
    save_adapter_ckpt(&ckpt, &adapter, cfg.precision)?;
    match outcome {
        Ok(rows) => {
            write_log(&out_dir.join("pretrain_adapter.log.tsv"), &rows)?;
            println!("val_accuracy\t{:.6}", adapter.accuracy(&val)?);
            println!("frozen\t{}", adapter.is_frozen());
            println!("checkpoint\t{}", ckpt.display());
            Ok(ckpt)
        }
        Err(e) => {
            println!("aborted; best checkpoint retained at {}", ckpt.display());
            Err(e)
        }
    }
}

/// Train one region's denoiser in the frozen VAE's latent space. The upper
/// region couples the frozen classifier into the objective whenever
/// `weights.lambda_adapter` is positive; that case requires an adapter
/// checkpoint and every other case forbids one.
pub fn cmd_train_diffusion(
    cfg: &RunConfig,
    region: Region,
    data_dir: &Path,
    vae_ckpt: &Path,
    adapter_ckpt: Option<&Path>,
    out_dir: &Path,
    snapshot: &str,
) -> Result<PathBuf> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    write_config_snapshot(out_dir, snapshot)?;
    let (vae, _) = load_vae_ckpt(vae_ckpt)?;
    if vae.cfg.region != region {
        return Err(Error::Config(format!(
            "vae checkpoint is for region {}, expected {}",
            vae.cfg.region.name(),
            region.name()
        )));
    }
    let dcfg = cfg.denoiser_config_for(region);
    if dcfg.width != vae.cfg.width || dcfg.latent_tokens != vae.cfg.latent_tokens {
        return Err(Error::Config(format!(
            "checkpoint width mismatch: denoiser {}x{} vs vae {}x{}",
            dcfg.latent_tokens, dcfg.width, vae.cfg.latent_tokens, vae.cfg.width
        )));
    }
    let coupled = region == Region::Upper && cfg.weights.lambda_adapter > 0.0;
    let adapter = match (coupled, adapter_ckpt) {
        (true, Some(path)) => {
            let (a, _) = load_adapter_ckpt(path)?;
            if !a.is_frozen() {
                return Err(Error::Config(
                    "adapter checkpoint was not saved frozen; rerun pretraining".into(),
                ));
            }
            if a.cfg.width != vae.cfg.width {
                return Err(Error::Config(format!(
                    "adapter width {} does not match vae width {}",
                    a.cfg.width, vae.cfg.width
                )));
            }
            Some(a)
        }
        (true, None) => {
            return Err(Error::Config(
                "upper-region training with weights.lambda_adapter > 0 requires an adapter checkpoint".into(),
            ));
        }
        (false, Some(_)) => {
            return Err(Error::Config(
                "an adapter checkpoint only applies to upper-region training with weights.lambda_adapter > 0".into(),
            ));
        }
        (false, None) => None,
    };
    match (&adapter, adapter_ckpt) {
        (Some(_), Some(path)) => println!("adapter\t{}", path.display()),
        _ => println!("adapter\tnone"),
    }
    let vae_hash = param_fingerprint(&vae.params);
    println!("vae_fingerprint\t{vae_hash:016x}");

    let (_, pairs) = load_pairs(&manifest_path(data_dir))?;
    let mut z0_rng = ChaCha12Rng::seed_from_u64(component_seed(cfg.seed, "z0_sampling"));
    let mut items = Vec::new();
    for pair in pairs.iter().filter(|p| p.split == Split::Train) {
        let frames = region_frames(&pair.seq, region)?;
        let post = vae.encode(&frames)?;
        let z0 = if cfg.train.sampled_z0 {
            let noise =
                crate::nn::normal_matrix(&mut z0_rng, post.mu.nrows(), post.mu.ncols());
            reparameterize(&post, &noise, region).z
        } else {
            post.mu.clone()
        };
        items.push(DiffusionTrainItem {
            z0,
            cond: embed_audio(&pair.audio)?,
            label: pair.emotion,
            len: frames.nrows(),
        });
    }
    require_nonempty(&items, "denoiser training", Split::Train)?;

    let sched = cfg.schedule.build()?;
    let mut den = Denoiser::init(
        dcfg,
        component_seed(cfg.seed, &format!("denoiser_{}", region.name())),
    )?;
    let tc = DiffTrainConfig {
        steps: cfg.train.diff_steps,
        batch_size: cfg.train.batch_size,
        lr: cfg.train.diff_lr,
        weight_decay: cfg.train.weight_decay,
        seed: component_seed(cfg.seed, &format!("train_diff_{}", region.name())),
    };
    let norm = LatentNorm::fit(&items)?;
    for item in &mut items {
        item.z0 = norm.apply(&item.z0)?;
    }
    let coupling = adapter.as_ref().map(|a| AdapterCoupling {
        vae: &vae,
        adapter: a,
        weights: cfg.weights,
        norm: &norm,
    });
    let ckpt = out_dir.join(format!("denoiser_{}.edck", region.name()));
    let outcome = train_denoiser(&mut den, &sched, &items, coupling.as_ref(), &tc);
    save_denoiser_ckpt(&ckpt, &den, &cfg.schedule, &vae, &norm, cfg.precision)?;
    println!("vae_fingerprint_after\t{:016x}", param_fingerprint(&vae.params));
    match outcome {
        Ok(rows) => {
            write_log(
                &out_dir.join(format!("train_diff_{}.log.tsv", region.name())),
                &rows,
            )?;
            if let Some(last) = rows.last() {
                for (name, v) in &last.fields {
                    println!("final_{name}\t{v:.9e}");
                }
            }
            println!("checkpoint\t{}", ckpt.display());
            Ok(ckpt)
        }
        Err(e) => {
            println!("aborted; last good checkpoint retained at {}", ckpt.display());
            Err(e)
        }
    }
}

/// Which trained models drive sampling: the region pair, or one full-face
/// model.
pub enum SampleModelPaths<'a> {
    Dual { upper: &'a Path, mouth: &'a Path },
    Single(&'a Path),
}

enum SampleModels {
    Dual {
        upper: DenoiserBundle,
        mouth: DenoiserBundle,
    },
    Single(DenoiserBundle),
}

impl SampleModels {
    fn load(paths: &SampleModelPaths) -> Result<Self> {
        match paths {
            SampleModelPaths::Dual { upper, mouth } => {
                let upper = load_denoiser_ckpt(upper)?;
                let mouth = load_denoiser_ckpt(mouth)?;
                for (bundle, want) in [(&upper, Region::Upper), (&mouth, Region::Mouth)] {
                    if bundle.vae.cfg.region != want {
                        return Err(Error::Config(format!(
                            "checkpoint decodes region {}, expected {}",
                            bundle.vae.cfg.region.name(),
                            want.name()
                        )));
                    }
                }
                Ok(SampleModels::Dual { upper, mouth })
            }
            SampleModelPaths::Single(path) => {
                let bundle = load_denoiser_ckpt(path)?;
                if bundle.vae.cfg.region != Region::Full {
                    return Err(Error::Config(format!(
                        "checkpoint decodes region {}, expected {}",
                        bundle.vae.cfg.region.name(),
                        Region::Full.name()
                    )));
                }
                Ok(SampleModels::Single(bundle))
            }
        }
    }

    fn max_infer_steps(&self) -> usize {
        match self {
            SampleModels::Dual { upper, mouth } => {
                upper.sched.steps().min(mouth.sched.steps())
            }
            SampleModels::Single(b) => b.sched.steps(),
        }
    }

    /// Generate one full-face clip for an audio track. The caller's rng is
    /// consumed in a fixed order so results are reproducible per sequence.
    fn sample_track(
        &self,
        track: &AudioFeatureTrack,
        steps: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<ndarray::Array2<f32>> {
        let cond = embed_audio(track)?;
        let len = track.len();
        let clamp32 = |m: &Matrix| m.mapv(|v| v.clamp(0.0, 1.0) as f32);
        match self {
            SampleModels::Dual { upper, mouth } => {
                let u = sample_sequence(
                    &upper.den, &upper.sched, &upper.vae, &upper.norm, &cond, steps, len, rng,
                )?;
                let m = sample_sequence(
                    &mouth.den, &mouth.sched, &mouth.vae, &mouth.norm, &cond, steps, len, rng,
                )?;
                merge_regions(&clamp32(&u), &clamp32(&m), &FacePartition::standard())
            }
            SampleModels::Single(b) => {
                let full =
                    sample_sequence(&b.den, &b.sched, &b.vae, &b.norm, &cond, steps, len, rng)?;
                Ok(clamp32(&full))
            }
        }
    }
}

pub enum SampleInput<'a> {
    /// One audio feature file; the output path names the generated clip.
    Audio(&'a Path),
    /// Every sequence of one split of a dataset; outputs land in a
    /// directory, one file per sequence, named like the ground truth.
    DatasetSplit { data_dir: &'a Path, split: Split },
}

/// Generate blendshape sequences from audio. Returns the number written.
pub fn cmd_sample(
    cfg: &RunConfig,
    models: &SampleModelPaths,
    input: &SampleInput,
    out: &Path,
    gt_out: Option<&Path>,
    snapshot: &str,
) -> Result<usize> {
    cfg.validate()?;
    let models = SampleModels::load(models)?;
    let steps = cfg.infer_steps;
    if steps > models.max_infer_steps() {
        return Err(Error::Config(format!(
            "infer.steps {} exceeds the checkpoint schedule length {}",
            steps,
            models.max_infer_steps()
        )));
    }
    match input {
        SampleInput::Audio(audio_path) => {
            if gt_out.is_some() {
                return Err(Error::Config(
                    "ground-truth staging only applies to dataset-split sampling".into(),
                ));
            }
            let track = load_audio(audio_path)?;
            let mut rng = ChaCha12Rng::seed_from_u64(sequence_seed(cfg.seed, 0));
            let frames = models.sample_track(&track, steps, &mut rng)?;
            let id = out
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "sample".into());
            let seq = BlendshapeSequence {
                frames,
                fps: track.fps,
                emotion: track.emotion,
                id,
            };
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            save_sequence(&seq, out)?;
            println!("sampled\t1\t{}", out.display());
            Ok(1)
        }
        SampleInput::DatasetSplit { data_dir, split } => {
            fs::create_dir_all(out)?;
            write_config_snapshot(out, snapshot)?;
            if let Some(gt) = gt_out {
                fs::create_dir_all(gt)?;
            }
            let (manifest, pairs) = load_pairs(&manifest_path(data_dir))?;
            let selected: Vec<(u64, &crate::seqcore::io::ManifestEntry, &DatasetPair)> = manifest
                .entries
                .iter()
                .zip(pairs.iter())
                .enumerate()
                .filter(|(_, (e, _))| e.split == *split)
                .map(|(i, (e, p))| (i as u64, e, p))
                .collect();
            if selected.is_empty() {
                return Err(Error::Validation(format!(
                    "sampling: the {split} split has no sequences"
                )));
            }
            selected
                .par_iter()
                .map(|(index, entry, pair)| {
                    let file_name = entry
                        .seq_path
                        .file_name()
                        .ok_or_else(|| {
                            Error::Validation(format!(
                                "manifest entry {} has no file name",
                                entry.seq_path.display()
                            ))
                        })?
                        .to_owned();
                    let mut rng =
                        ChaCha12Rng::seed_from_u64(sequence_seed(cfg.seed, *index));
                    let frames = models.sample_track(&pair.audio, steps, &mut rng)?;
                    let seq = BlendshapeSequence {
                        frames,
                        fps: pair.seq.fps,
                        emotion: pair.emotion,
                        id: pair.seq.id.clone(),
                    };
                    save_sequence(&seq, &out.join(&file_name))?;
                    if let Some(gt) = gt_out {
                        fs::copy(data_dir.join(&entry.seq_path), gt.join(&file_name))?;
                    }
                    Ok(())
                })
                .collect::<Result<Vec<()>>>()?;
            println!("sampled\t{}\t{}", selected.len(), out.display());
            Ok(selected.len())
        }
    }
}

/// Compare generated sequences against ground truth and write the report.
pub fn cmd_eval(
    pred_dir: &Path,
    gt_dir: &Path,
    report_path: &Path,
    svg_path: Option<&Path>,
) -> Result<EvalReport> {
    let report = evaluate_dataset(pred_dir, gt_dir, &FacePartition::standard())?;
    if let Some(parent) = report_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    report.write_to(report_path)?;
    if let Some(svg) = svg_path {
        fs::write(svg, report.to_svg())?;
    }
    println!("report\t{}", report_path.display());
    println!("{}", report.summary_line());
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    LatentShape,
    Conditioning,
    Layers,
    Lambda,
    Structure,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::LatentShape => "latent_shape",
            AblationAxis::Conditioning => "conditioning",
            AblationAxis::Layers => "layers",
            AblationAxis::Lambda => "lambda",
            AblationAxis::Structure => "structure",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "latent_shape" => Ok(AblationAxis::LatentShape),
            "conditioning" => Ok(AblationAxis::Conditioning),
            "layers" => Ok(AblationAxis::Layers),
            "lambda" => Ok(AblationAxis::Lambda),
            "structure" => Ok(AblationAxis::Structure),
            other => Err(Error::Config(format!(
                "unknown ablation axis {other:?}; expected latent_shape, conditioning, layers, lambda, or structure"
            ))),
        }
    }
}

#[derive(Default)]
struct StagePaths<'a> {
    upper_vae: Option<&'a Path>,
    mouth_vae: Option<&'a Path>,
    adapter: Option<&'a Path>,
    mouth_den: Option<&'a Path>,
}

/// Train whatever a dual-model variant still needs, sample the test split,
/// and evaluate it. Stage paths short-circuit the stages shared across
/// variants.
fn dual_variant(
    cfg: &RunConfig,
    data_dir: &Path,
    vdir: &Path,
    stage: &StagePaths,
    snapshot: &str,
) -> Result<EvalReport> {
    fs::create_dir_all(vdir)?;
    let upper_vae = match stage.upper_vae {
        Some(p) => p.to_path_buf(),
        None => cmd_train_vae(cfg, Region::Upper, data_dir, vdir, snapshot)?,
    };
    let mouth_vae = match stage.mouth_vae {
        Some(p) => p.to_path_buf(),
        None => cmd_train_vae(cfg, Region::Mouth, data_dir, vdir, snapshot)?,
    };
    let coupled = cfg.weights.lambda_adapter > 0.0;
    let adapter = if coupled {
        Some(match stage.adapter {
            Some(p) => p.to_path_buf(),
            None => cmd_pretrain_adapter(cfg, data_dir, vdir, snapshot)?,
        })
    } else {
        None
    };
    let mouth_den = match stage.mouth_den {
        Some(p) => p.to_path_buf(),
        None => cmd_train_diffusion(cfg, Region::Mouth, data_dir, &mouth_vae, None, vdir, snapshot)?,
    };
    let upper_den = cmd_train_diffusion(
        cfg,
        Region::Upper,
        data_dir,
        &upper_vae,
        adapter.as_deref(),
        vdir,
        snapshot,
    )?;
    let samples = vdir.join("samples");
    let gt = vdir.join("gt");
    cmd_sample(
        cfg,
        &SampleModelPaths::Dual {
            upper: &upper_den,
            mouth: &mouth_den,
        },
        &SampleInput::DatasetSplit {
            data_dir,
            split: Split::Test,
        },
        &samples,
        Some(&gt),
        snapshot,
    )?;
    cmd_eval(&samples, &gt, &vdir.join("report.tsv"), None)
}

/// The single-latent variant: one full-face VAE and one denoiser.
fn single_variant(
    cfg: &RunConfig,
    data_dir: &Path,
    vdir: &Path,
    snapshot: &str,
) -> Result<EvalReport> {
    fs::create_dir_all(vdir)?;
    let full_vae = cmd_train_vae(cfg, Region::Full, data_dir, vdir, snapshot)?;
    let full_den =
        cmd_train_diffusion(cfg, Region::Full, data_dir, &full_vae, None, vdir, snapshot)?;
    let samples = vdir.join("samples");
    let gt = vdir.join("gt");
    cmd_sample(
        cfg,
        &SampleModelPaths::Single(&full_den),
        &SampleInput::DatasetSplit {
            data_dir,
            split: Split::Test,
        },
        &samples,
        Some(&gt),
        snapshot,
    )?;
    cmd_eval(&samples, &gt, &vdir.join("report.tsv"), None)
}

/// Run every variant along one ablation axis on a shared dataset and write
/// a table of test-split metrics. Stages whose inputs an axis does not vary
/// are trained once and reused.
pub fn cmd_ablate(
    cfg: &RunConfig,
    data_dir: &Path,
    axis: AblationAxis,
    out_dir: &Path,
    snapshot: &str,
) -> Result<PathBuf> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    write_config_snapshot(out_dir, snapshot)?;
    println!("axis\t{}", axis.name());
    println!("shared_dataset_seed\t{}", cfg.seed);
    let shared = out_dir.join("shared");
    let mut rows: Vec<(String, EvalReport)> = Vec::new();
    match axis {
        AblationAxis::Lambda => {
            let upper_vae = cmd_train_vae(cfg, Region::Upper, data_dir, &shared, snapshot)?;
            let mouth_vae = cmd_train_vae(cfg, Region::Mouth, data_dir, &shared, snapshot)?;
            let adapter = cmd_pretrain_adapter(cfg, data_dir, &shared, snapshot)?;
            let mouth_den = cmd_train_diffusion(
                cfg,
                Region::Mouth,
                data_dir,
                &mouth_vae,
                None,
                &shared,
                snapshot,
            )?;
            for ratio in [10.0f64, 1.0, 0.1] {
                let mut v = cfg.clone();
                v.weights = LossWeights {
                    lambda_lat: 1.0,
                    lambda_adapter: 1.0 / ratio,
                };
                let name = format!("ratio_{ratio}");
                let report = dual_variant(
                    &v,
                    data_dir,
                    &out_dir.join(&name),
                    &StagePaths {
                        upper_vae: Some(&upper_vae),
                        mouth_vae: Some(&mouth_vae),
                        adapter: Some(&adapter),
                        mouth_den: Some(&mouth_den),
                    },
                    snapshot,
                )?;
                rows.push((name, report));
            }
        }
        AblationAxis::Conditioning => {
            let upper_vae = cmd_train_vae(cfg, Region::Upper, data_dir, &shared, snapshot)?;
            let mouth_vae = cmd_train_vae(cfg, Region::Mouth, data_dir, &shared, snapshot)?;
            let adapter = if cfg.weights.lambda_adapter > 0.0 {
                Some(cmd_pretrain_adapter(cfg, data_dir, &shared, snapshot)?)
            } else {
                None
            };
            for mode in [Conditioning::Concat, Conditioning::CrossAttention] {
                let mut v = cfg.clone();
                v.denoiser_upper.conditioning = mode;
                v.denoiser_mouth.conditioning = mode;
                let name = mode.name().to_string();
                let report = dual_variant(
                    &v,
                    data_dir,
                    &out_dir.join(&name),
                    &StagePaths {
                        upper_vae: Some(&upper_vae),
                        mouth_vae: Some(&mouth_vae),
                        adapter: adapter.as_deref(),
                        mouth_den: None,
                    },
                    snapshot,
                )?;
                rows.push((name, report));
            }
        }
        AblationAxis::Layers => {
            let upper_vae = cmd_train_vae(cfg, Region::Upper, data_dir, &shared, snapshot)?;
            let mouth_vae = cmd_train_vae(cfg, Region::Mouth, data_dir, &shared, snapshot)?;
            let adapter = if cfg.weights.lambda_adapter > 0.0 {
                Some(cmd_pretrain_adapter(cfg, data_dir, &shared, snapshot)?)
            } else {
                None
            };
            for layers in [7usize, 9, 11] {
                let mut v = cfg.clone();
                v.denoiser_upper.layers = layers;
                v.denoiser_mouth.layers = layers;
                let name = format!("layers_{layers}");
                let report = dual_variant(
                    &v,
                    data_dir,
                    &out_dir.join(&name),
                    &StagePaths {
                        upper_vae: Some(&upper_vae),
                        mouth_vae: Some(&mouth_vae),
                        adapter: adapter.as_deref(),
                        mouth_den: None,
                    },
                    snapshot,
                )?;
                rows.push((name, report));
            }
        }
        AblationAxis::LatentShape => {
            let adapter = if cfg.weights.lambda_adapter > 0.0 {
                Some(cmd_pretrain_adapter(cfg, data_dir, &shared, snapshot)?)
            } else {
                None
            };
            for tokens in [1usize, 3, 5] {
                let mut v = cfg.clone();
                v.vae_upper.latent_tokens = tokens;
                v.vae_mouth.latent_tokens = tokens;
                v.denoiser_upper.latent_tokens = tokens;
                v.denoiser_mouth.latent_tokens = tokens;
                let name = format!("tokens_{tokens}");
                let report = dual_variant(
                    &v,
                    data_dir,
                    &out_dir.join(&name),
                    &StagePaths {
                        adapter: adapter.as_deref(),
                        ..StagePaths::default()
                    },
                    snapshot,
                )?;
                rows.push((name, report));
            }
        }
        AblationAxis::Structure => {
            let mut dual_cfg = cfg.clone();
            dual_cfg.weights.lambda_adapter = 0.0;
            dual_cfg.single_latent = false;
            let report = dual_variant(
                &dual_cfg,
                data_dir,
                &out_dir.join("dual"),
                &StagePaths::default(),
                snapshot,
            )?;
            rows.push(("dual".into(), report));
            let mut single_cfg = cfg.clone();
            single_cfg.weights.lambda_adapter = 0.0;
            single_cfg.single_latent = true;
            let report = single_variant(&single_cfg, data_dir, &out_dir.join("single"), snapshot)?;
            rows.push(("single".into(), report));
        }
    }
    let table = out_dir.join(format!("ablation_{}.tsv", axis.name()));
    let mut text = String::new();
    let _ = writeln!(text, "# axis {}", axis.name());
    let _ = writeln!(text, "# all variants share dataset seed {}", cfg.seed);
    let _ = writeln!(
        text,
        "# desk-scale synthetic-data measurements from this build"
    );
    let _ = writeln!(text, "variant\tfbe\tebe\tfdd\tfbe_mouth");
    for (name, r) in &rows {
        let _ = writeln!(
            text,
            "{name}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}",
            r.fbe, r.ebe, r.fdd, r.fbe_mouth
        );
    }
    fs::write(&table, text)?;
    for (name, r) in &rows {
        println!("{name}\t{}", r.summary_line());
    }
    println!("table\t{}", table.display());
    Ok(table)
}
