//! Two-stage training, synthesis and the coupled-vs-decoupled comparison.
//!
//! Every random choice is drawn from a ChaCha8 generator seeded with the run
//! seed on a fixed stream, so each artifact is a pure function of config and
//! seeds. Streams: 0 autoencoder init, 1 discriminator init, 2 stage-1 batch
//! order, 3 transformer init, 4 stage-2 batch order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adversarial::{d_loss, PatchDiscriminator};
use crate::autoencoder::{Batch, CoupledAutoencoder, DecoupledBaseline, GanTerm, LossParts, Modality, VqModel};
use crate::checkpoint::{Checkpoint, Stage};
use crate::config::{RunConfig, Variant};
use crate::data::{tile_images, write_file, write_image_ppm, PairedSample, RgbImage, SemanticMap};
use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::metrics::{frechet_distance, ssim, IouAccumulator, MetricsReport, FD_LABEL};
use crate::nn::{ParamStore, Parameterized};
use crate::optim::Adam;
use crate::quantizer::{Codebook, LatentGrid};
use crate::tensor::Tensor;
use crate::transformer::{SamplingParams, TokenSequence, TransformerModel};

const STREAM_AE_INIT: u64 = 0;
const STREAM_DISC_INIT: u64 = 1;
const STREAM_AE_BATCHES: u64 = 2;
const STREAM_AR_INIT: u64 = 3;
const STREAM_AR_BATCHES: u64 = 4;

const STAGE1_LINK: &str = "link.stage1";

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// `(train, held_out)`: the last `n_eval` samples are held out.
pub fn split_holdout(data: &[PairedSample], n_eval: usize) -> Result<(&[PairedSample], &[PairedSample])> {
    if n_eval >= data.len() {
        return Err(Error::config(format!(
            "cannot hold out {n_eval} of {} samples",
            data.len()
        )));
    }
    Ok(data.split_at(data.len() - n_eval))
}

/// Epoch-shuffled minibatches of indices.
struct BatchSampler {
    n: usize,
    batch: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, batch: usize, rng: ChaCha8Rng) -> Self {
        BatchSampler {
            n,
            batch: batch.min(n),
            order: Vec::new(),
            pos: n,
            rng,
        }
    }

    fn next(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.n {
                self.order = (0..self.n).collect();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

// ---- stage 1 -------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum Stage1Model {
    Coupled(CoupledAutoencoder<f32>),
    Baseline(DecoupledBaseline<f32>),
}

/// A trained (or freshly initialised) stage-1 model.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1 {
    pub config: RunConfig,
    pub model: Stage1Model,
    /// Present for the adversarial variants.
    pub disc: Option<PatchDiscriminator<f32>>,
    pub step: usize,
}

/// One logged training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub parts: LossParts,
    pub d_loss: Option<f64>,
}

fn usage_i32(cb: &Codebook<f32>) -> Vec<i32> {
    cb.usage_counts().iter().map(|&c| c.min(i32::MAX as u64) as i32).collect()
}

fn check_like(reference: &ParamStore<f32>, got: &ParamStore<f32>, what: &str) -> Result<()> {
    for (name, t) in reference.iter() {
        match got.get(name) {
            Some(g) if g.shape() == t.shape() => {}
            Some(g) => {
                return Err(Error::config(format!(
                    "{what} parameter `{name}` has shape {:?}, config implies {:?}",
                    g.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::config(format!("{what} parameter `{name}` missing"))),
        }
    }
    if got.len() != reference.len() {
        return Err(Error::config(format!("{what} checkpoint has unexpected extra parameters")));
    }
    Ok(())
}

fn load_codebook(ck: &Checkpoint, name: &str, usage: &str) -> Result<Codebook<f32>> {
    let mut cb = Codebook::from_entries(ck.arrays.tensor(name)?)?;
    let counts = ck.arrays.ints(usage)?;
    cb.set_usage_counts(counts.iter().map(|&c| c.max(0) as u64).collect())?;
    Ok(cb)
}

impl Stage1 {
    /// Freshly initialised stage-1 model for `config`.
    pub fn init(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng(config.seed, STREAM_AE_INIT);
        let model = if config.variant.is_coupled() {
            Stage1Model::Coupled(CoupledAutoencoder::new(config.arch(), config.weights(), &mut r)?)
        } else {
            Stage1Model::Baseline(DecoupledBaseline::new(config.arch(), config.weights(), &mut r)?)
        };
        let disc = config
            .variant
            .uses_gan()
            .then(|| PatchDiscriminator::new(config.disc_channels, &mut rng(config.seed, STREAM_DISC_INIT)));
        Ok(Stage1 {
            config: config.clone(),
            model,
            disc,
            step: 0,
        })
    }

    /// Every stage-1 weight (autoencoder(s) and codebooks; discriminator excluded)
    /// under stable names.
    pub fn autoencoder_params(&self) -> ParamStore<f32> {
        let mut all = ParamStore::new();
        match &self.model {
            Stage1Model::Coupled(m) => all.merge_prefixed("ae.", &m.all_params()),
            Stage1Model::Baseline(b) => {
                all.merge_prefixed("image.", &b.image.all_params());
                all.merge_prefixed("semantic.", &b.semantic.all_params());
            }
        }
        all
    }

    /// One checkpoint for the coupled model; two (image, semantic) for the baseline.
    pub fn checkpoints(&self) -> Result<Vec<Checkpoint>> {
        let disc = |ck: &mut Checkpoint| -> Result<()> {
            if let Some(d) = &self.disc {
                ck.arrays.put_params("disc.", &d.net)?;
            }
            Ok(())
        };
        match &self.model {
            Stage1Model::Coupled(m) => {
                let mut ck = Checkpoint::new(self.config.clone(), Stage::Coupled, self.step);
                ck.arrays.put_params("ae.", &m.all_params())?;
                ck.arrays.put_i32("usage.image", usage_i32(&m.image_codebook))?;
                ck.arrays.put_i32("usage.semantic", usage_i32(&m.semantic_codebook))?;
                disc(&mut ck)?;
                Ok(vec![ck])
            }
            Stage1Model::Baseline(b) => {
                let mut img = Checkpoint::new(self.config.clone(), Stage::BaselineImage, self.step);
                img.arrays.put_params("ae.", &b.image.all_params())?;
                img.arrays.put_i32("usage.codebook", usage_i32(&b.image.codebook))?;
                disc(&mut img)?;
                let mut sem = Checkpoint::new(self.config.clone(), Stage::BaselineSemantic, self.step);
                sem.arrays.put_params("ae.", &b.semantic.all_params())?;
                sem.arrays.put_i32("usage.codebook", usage_i32(&b.semantic.codebook))?;
                Ok(vec![img, sem])
            }
        }
    }

    pub fn from_checkpoints(cks: &[Checkpoint]) -> Result<Self> {
        let first = cks.first().ok_or_else(|| Error::config("no stage-1 checkpoint given"))?;
        let config = first.config.clone();
        let reference = Stage1::init(&config)?;
        let disc_from = |ck: &Checkpoint| -> Result<Option<PatchDiscriminator<f32>>> {
            let p = ck.arrays.params("disc.")?;
            if p.is_empty() {
                return Ok(None);
            }
            if let Some(r) = &reference.disc {
                check_like(&r.net, &p, "discriminator")?;
            }
            Ok(Some(PatchDiscriminator::from_params(config.disc_channels, p)?))
        };
        let model = match (&reference.model, cks) {
            (Stage1Model::Coupled(r), [ck]) => {
                ck.expect_stage(Stage::Coupled)?;
                let all = ck.arrays.params("ae.")?;
                check_like(&r.all_params(), &all, "autoencoder")?;
                let mut net = all.clone();
                for k in [crate::autoencoder::IMAGE_CODEBOOK, crate::autoencoder::SEMANTIC_CODEBOOK] {
                    net = ParamStore::from_iter_filtered(&net, k);
                }
                Stage1Model::Coupled(CoupledAutoencoder {
                    arch: config.arch(),
                    weights: config.weights(),
                    net,
                    image_codebook: load_codebook(ck, "ae.codebook.image", "usage.image")?,
                    semantic_codebook: load_codebook(ck, "ae.codebook.semantic", "usage.semantic")?,
                })
            }
            (Stage1Model::Baseline(r), [a, b]) => {
                let (img, sem) = match (a.stage, b.stage) {
                    (Stage::BaselineImage, Stage::BaselineSemantic) => (a, b),
                    (Stage::BaselineSemantic, Stage::BaselineImage) => (b, a),
                    _ => return Err(Error::config("baseline needs one image and one semantic stage-1 checkpoint")),
                };
                if img.config != sem.config {
                    return Err(Error::config("baseline image and semantic checkpoints disagree on config"));
                }
                let load = |ck: &Checkpoint, r: &VqModel<f32>, m: Modality| -> Result<VqModel<f32>> {
                    let all = ck.arrays.params("ae.")?;
                    check_like(&r.all_params(), &all, "baseline")?;
                    Ok(VqModel {
                        modality: m,
                        arch: config.arch(),
                        weights: config.weights(),
                        net: ParamStore::from_iter_filtered(&all, "codebook"),
                        codebook: load_codebook(ck, "ae.codebook", "usage.codebook")?,
                    })
                };
                Stage1Model::Baseline(DecoupledBaseline {
                    image: load(img, &r.image, Modality::Image)?,
                    semantic: load(sem, &r.semantic, Modality::Semantic)?,
                })
            }
            _ => {
                return Err(Error::config(format!(
                    "variant {} expects {} stage-1 checkpoint(s), got {}",
                    config.variant,
                    if config.variant.is_coupled() { 1 } else { 2 },
                    cks.len()
                )))
            }
        };
        let disc = match cks.iter().find(|c| c.stage != Stage::BaselineSemantic) {
            Some(ck) => disc_from(ck)?,
            None => None,
        };
        Ok(Stage1 {
            config,
            model,
            disc,
            step: first.step,
        })
    }

    /// Writes the checkpoint(s) into `dir` and returns their paths.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::new();
        for ck in self.checkpoints()? {
            let name = match ck.stage {
                Stage::Coupled => "stage1.svqc",
                Stage::BaselineImage => "stage1_image.svqc",
                Stage::BaselineSemantic => "stage1_semantic.svqc",
                Stage::Transformer => unreachable!("stage-1 checkpoints only"),
            };
            let p = dir.join(name);
            ck.save(&p)?;
            paths.push(p);
        }
        Ok(paths)
    }

    pub fn load(paths: &[PathBuf]) -> Result<Self> {
        let cks = paths.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
        Self::from_checkpoints(&cks)
    }

    /// Digest identifying the stage-1 weights (used to link stage-2 checkpoints).
    pub fn digest(&self) -> Result<String> {
        let mut c = crate::checkpoint::Container::new();
        c.put_params("", &self.autoencoder_params())?;
        Ok(c.digest(""))
    }

    /// Conditioning and target grids `(z_s, z_x)` for each sample.
    pub fn encode_pairs(&self, samples: &[&PairedSample]) -> Result<Vec<(LatentGrid, LatentGrid)>> {
        match &self.model {
            Stage1Model::Coupled(m) => Ok(m
                .encode_batch(samples)?
                .into_iter()
                .map(|e| (e.z_s, e.z_x))
                .collect()),
            Stage1Model::Baseline(b) => Ok(b.semantic.encode(samples)?.into_iter().zip(b.image.encode(samples)?).collect()),
        }
    }

    /// Conditioning grid: the encoded held-out pair for the coupled model, the
    /// encoded semantic map alone for the baseline.
    pub fn encode_conditioning(&self, samples: &[&PairedSample]) -> Result<Vec<LatentGrid>> {
        match &self.model {
            Stage1Model::Coupled(m) => Ok(m.encode_batch(samples)?.into_iter().map(|e| e.z_s).collect()),
            Stage1Model::Baseline(b) => b.semantic.encode(samples),
        }
    }

    /// Decodes `(z_x, z_s)` pairs; the baseline ignores `z_s`.
    pub fn decode_images(&self, pairs: &[(&LatentGrid, &LatentGrid)]) -> Result<Vec<RgbImage>> {
        match &self.model {
            Stage1Model::Coupled(m) => m.decode_images(pairs),
            Stage1Model::Baseline(b) => b.image.decode_images(&pairs.iter().map(|p| p.0).collect::<Vec<_>>()),
        }
    }

    /// Image and semantic reconstructions through the stage-1 bottleneck(s).
    pub fn reconstruct(&self, samples: &[&PairedSample]) -> Result<Vec<(RgbImage, SemanticMap)>> {
        match &self.model {
            Stage1Model::Coupled(m) => m.reconstruct(samples),
            Stage1Model::Baseline(b) => {
                let zx = b.image.encode(samples)?;
                let zs = b.semantic.encode(samples)?;
                let images = b.image.decode_images(&zx.iter().collect::<Vec<_>>())?;
                let maps = b.semantic.predict_semantics(&zs.iter().collect::<Vec<_>>())?;
                Ok(images.into_iter().zip(maps).collect())
            }
        }
    }

    /// Semantic maps read back from `(image, semantics)` pairs: for the coupled
    /// model the joint encoding is decoded, for the baseline the semantic VQ model
    /// reconstructs the map.
    fn read_semantics(&self, samples: &[&PairedSample]) -> Result<Vec<SemanticMap>> {
        match &self.model {
            Stage1Model::Coupled(m) => {
                let enc = m.encode_batch(samples)?;
                m.predict_semantics(&enc.iter().map(|e| &e.z_s).collect::<Vec<_>>())
            }
            Stage1Model::Baseline(b) => {
                let zs = b.semantic.encode(samples)?;
                b.semantic.predict_semantics(&zs.iter().collect::<Vec<_>>())
            }
        }
    }
}

impl ParamStore<f32> {
    /// Copy without the entry `name`.
    fn from_iter_filtered(src: &ParamStore<f32>, name: &str) -> ParamStore<f32> {
        let mut out = ParamStore::new();
        for (k, v) in src.iter() {
            if k != name {
                out.insert(k.clone(), v.clone());
            }
        }
        out
    }
}

/// Reconstruction quality of a stage-1 model on held-out pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconReport {
    pub n_samples: usize,
    pub image_mse: f64,
    pub ssim_mean: f64,
    pub miou_percent: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

pub fn evaluate_reconstruction(stage1: &Stage1, samples: &[PairedSample]) -> Result<ReconReport> {
    let refs: Vec<_> = samples.iter().collect();
    let recon = stage1.reconstruct(&refs)?;
    let mut acc = IouAccumulator::new(stage1.config.num_classes);
    let (mut mse, mut ss) = (0.0, 0.0);
    for (s, (img, map)) in samples.iter().zip(&recon) {
        acc.add(map, &s.semantics)?;
        ss += ssim(img, &s.image)?;
        mse += img
            .data
            .iter()
            .zip(&s.image.data)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / img.data.len() as f64;
    }
    let (miou, per_class) = acc.finish();
    let n = samples.len() as f64;
    Ok(ReconReport {
        n_samples: samples.len(),
        image_mse: mse / n,
        ssim_mean: ss / n,
        miou_percent: miou,
        per_class_iou: per_class,
    })
}

fn write_ppm(dir: &Path, name: &str, image: &RgbImage) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(name), &write_image_ppm(image))
}

/// Rows: ground truth, reconstruction, ground-truth semantics, reconstructed semantics.
fn recon_grid(stage1: &Stage1, samples: &[&PairedSample]) -> Result<RgbImage> {
    let recon = stage1.reconstruct(samples)?;
    Ok(tile_images(
        &[
            samples.iter().map(|s| s.image.clone()).collect(),
            recon.iter().map(|r| r.0.clone()).collect(),
            samples.iter().map(|s| s.semantics.colorize()).collect(),
            recon.iter().map(|r| r.1.colorize()).collect(),
        ],
        1,
    ))
}

fn diverged(step: usize, last: &Option<LossParts>) -> Error {
    Error::Diverged {
        step,
        last_parts: last.map(|p| p.to_string()).unwrap_or_else(|| "none".into()),
    }
}

fn scalar_f64(t: &Tensor<f32>) -> f64 {
    t.item() as f64
}

/// Discriminator hinge update on real images versus detached reconstructions.
fn disc_step(
    disc: &mut PatchDiscriminator<f32>,
    opt: &mut Adam<f32>,
    real: &Tensor<f32>,
    fake: Tensor<f32>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = disc.bind_params(&mut tape);
    let r = tape.constant(real.clone());
    let f = tape.constant(fake);
    let l = d_loss(disc, &mut tape, &p, r, f)?;
    let value = scalar_f64(tape.value(l));
    let g = tape.backward(l);
    disc.apply_grads(opt, &p.collect_grads(&g));
    Ok(value)
}

/// Trains the configured stage-1 variant on `train`. With `out`, periodic
/// reconstruction grids are written there.
pub fn train_stage1(config: &RunConfig, train: &[PairedSample], out: Option<&Path>) -> Result<(Stage1, Vec<StepLog>)> {
    let mut s1 = Stage1::init(config)?;
    let history = continue_stage1(&mut s1, train, config.ae_steps, out)?;
    Ok((s1, history))
}

/// Runs `steps` further stage-1 steps. Optimizer state starts fresh.
pub fn continue_stage1(s1: &mut Stage1, train: &[PairedSample], steps: usize, out: Option<&Path>) -> Result<Vec<StepLog>> {
    if train.is_empty() {
        return Err(Error::data("empty training set"));
    }
    let cfg = s1.config.clone();
    let mut sampler = BatchSampler::new(train.len(), cfg.batch_size, rng(cfg.seed, STREAM_AE_BATCHES));
    let mut opt_a = Adam::new(cfg.ae_adam());
    let mut opt_b = Adam::new(cfg.ae_adam());
    let mut opt_d = Adam::new(cfg.ae_adam());
    let mut history = Vec::with_capacity(steps);
    let mut last: Option<LossParts> = None;
    let preview: Vec<&PairedSample> = train.iter().take(4).collect();
    for _ in 0..steps {
        let step = s1.step;
        let idx = sampler.next();
        let refs: Vec<&PairedSample> = idx.iter().map(|&i| &train[i]).collect();
        let batch = Batch::<f32>::from_samples(&refs, cfg.num_classes)?;
        let gan_on = cfg.variant.uses_gan() && step >= cfg.gan_start() && cfg.w_gan > 0.0;
        let mut fake = None;
        let (total, parts) = match &mut s1.model {
            Stage1Model::Coupled(m) => {
                let mut tape = Tape::new();
                let p = m.bind_params(&mut tape);
                let gan = match (&s1.disc, gan_on) {
                    (Some(d), true) => Some(GanTerm { disc: d, weight: cfg.w_gan }),
                    _ => None,
                };
                let f = m.forward(&mut tape, p, &batch, gan)?;
                let total = scalar_f64(tape.value(f.total));
                if !total.is_finite() || !f.parts.all_finite() {
                    return Err(diverged(step, &last));
                }
                let g = tape.backward(f.total);
                m.apply_grads(&mut opt_a, &f.params.collect_grads(&g));
                for z in &f.z_x {
                    m.image_codebook.record_usage(z.indices());
                }
                for z in &f.z_s {
                    m.semantic_codebook.record_usage(z.indices());
                }
                if gan_on {
                    fake = Some(tape.value(f.x_hat).clone());
                }
                (total, f.parts)
            }
            Stage1Model::Baseline(b) => {
                let mut parts = LossParts::default();
                let mut total = 0.0;
                for model in [&mut b.image, &mut b.semantic] {
                    let is_image = model.modality == Modality::Image;
                    let mut tape = Tape::new();
                    let p = model.bind_params(&mut tape);
                    let gan = match (&s1.disc, gan_on && is_image) {
                        (Some(d), true) => Some(GanTerm { disc: d, weight: cfg.w_gan }),
                        _ => None,
                    };
                    let f = model.forward(&mut tape, p, &batch, gan)?;
                    let t = scalar_f64(tape.value(f.total));
                    if !t.is_finite() {
                        return Err(diverged(step, &last));
                    }
                    let g = tape.backward(f.total);
                    let opt = if is_image { &mut opt_a } else { &mut opt_b };
                    model.apply_grads(opt, &f.params.collect_grads(&g));
                    for z in &f.grids {
                        model.codebook.record_usage(z.indices());
                    }
                    total += t;
                    if is_image {
                        parts.image_recon = f.recon;
                        parts.codebook_x = f.codebook;
                        parts.commit_x = f.commit;
                        parts.gan_g = f.gan_g;
                        if gan_on {
                            fake = Some(tape.value(f.output).clone());
                        }
                    } else {
                        parts.semantic_ce = f.recon;
                        parts.codebook_s = f.codebook;
                        parts.commit_s = f.commit;
                    }
                }
                (total, parts)
            }
        };
        let d = match (fake, &mut s1.disc) {
            (Some(fake), Some(disc)) => Some(disc_step(disc, &mut opt_d, &batch.images, fake)?),
            _ => None,
        };
        if d.is_some_and(|v| !v.is_finite()) {
            return Err(diverged(step, &last));
        }
        last = Some(parts);
        s1.step += 1;
        if s1.step.is_multiple_of(cfg.log_every) || s1.step == 1 {
            info!(
                "stage1 {} step {}: total={total:.5} {parts}{}",
                cfg.variant,
                s1.step,
                d.map(|v| format!(" d={v:.4}")).unwrap_or_default()
            );
        }
        if let Some(dir) = out {
            if s1.step.is_multiple_of(cfg.grid_every) {
                write_ppm(dir, &format!("recon_{:06}.ppm", s1.step), &recon_grid(s1, &preview)?)?;
            }
        }
        history.push(StepLog {
            step: s1.step,
            total,
            parts,
            d_loss: d,
        });
    }
    Ok(history)
}

// ---- run directories -----------------------------------------------------------------

pub const CONFIG_FILE: &str = "config.toml";
pub const STAGE2_FILE: &str = "stage2.svqc";

/// Stage-1 checkpoint paths inside a run directory.
pub fn stage1_paths(run: &Path, config: &RunConfig) -> Vec<PathBuf> {
    if config.variant.is_coupled() {
        vec![run.join("stage1.svqc")]
    } else {
        vec![run.join("stage1_image.svqc"), run.join("stage1_semantic.svqc")]
    }
}

/// Loads a run directory: its config, stage-1 model and, when present, the
/// linked stage-2 transformer.
pub fn load_run(run: &Path) -> Result<(RunConfig, Stage1, Option<Stage2>)> {
    let config = RunConfig::load(&run.join(CONFIG_FILE))?;
    let s1 = Stage1::load(&stage1_paths(run, &config))?;
    let p2 = run.join(STAGE2_FILE);
    let s2 = if p2.exists() {
        let s2 = Stage2::load(&p2)?;
        s2.check_linked(&s1)?;
        Some(s2)
    } else {
        None
    };
    Ok((config, s1, s2))
}

// ---- stage 2 -------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2 {
    pub config: RunConfig,
    pub model: TransformerModel<f32>,
    /// Digest of the stage-1 weights the sequences came from.
    pub stage1_digest: String,
    pub step: usize,
}

impl Stage2 {
    pub fn init(config: &RunConfig, stage1: &Stage1) -> Result<Self> {
        check_compatible(config, &stage1.config)?;
        let model = TransformerModel::new(config.transformer_arch(), &mut rng(config.seed, STREAM_AR_INIT))?;
        Ok(Stage2 {
            config: config.clone(),
            model,
            stage1_digest: stage1.digest()?,
            step: 0,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(self.config.clone(), Stage::Transformer, self.step);
        ck.arrays.put_params("ar.", &self.model.params)?;
        ck.arrays.put_str(STAGE1_LINK, &self.stage1_digest)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_stage(Stage::Transformer)?;
        let model = TransformerModel::from_params(ck.config.transformer_arch(), ck.arrays.params("ar.")?)?;
        Ok(Stage2 {
            config: ck.config.clone(),
            model,
            stage1_digest: ck.arrays.string(STAGE1_LINK)?,
            step: ck.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Fails unless this transformer was trained on `stage1`'s tokens.
    pub fn check_linked(&self, stage1: &Stage1) -> Result<()> {
        check_compatible(&self.config, &stage1.config)?;
        if self.stage1_digest != stage1.digest()? {
            return Err(Error::config("stage-2 checkpoint was trained on a different stage-1 model"));
        }
        Ok(())
    }
}

fn check_compatible(a: &RunConfig, b: &RunConfig) -> Result<()> {
    if a.arch() != b.arch() || a.variant != b.variant {
        return Err(Error::config(format!(
            "stage-2 config ({} {:?}) does not match stage-1 checkpoint ({} {:?})",
            a.variant,
            a.arch(),
            b.variant,
            b.arch()
        )));
    }
    Ok(())
}

pub fn encode_sequences(stage1: &Stage1, samples: &[PairedSample]) -> Result<Vec<TokenSequence>> {
    let refs: Vec<_> = samples.iter().collect();
    stage1
        .encode_pairs(&refs)?
        .iter()
        .map(|(zs, zx)| TokenSequence::pack(zs, zx))
        .collect()
}

/// Trains the transformer on the frozen stage-1 model's token sequences.
/// Returns the model and the per-step training NLL.
pub fn train_stage2(config: &RunConfig, stage1: &Stage1, train: &[PairedSample]) -> Result<(Stage2, Vec<f64>)> {
    let before = stage1.autoencoder_params();
    let seqs = encode_sequences(stage1, train)?;
    let mut s2 = Stage2::init(config, stage1)?;
    let history = continue_stage2(&mut s2, &seqs, config.ar_steps)?;
    if !before.bitwise_eq(&stage1.autoencoder_params()) {
        return Err(Error::numeric("stage-1 parameters changed during stage 2"));
    }
    Ok((s2, history))
}

pub fn continue_stage2(s2: &mut Stage2, seqs: &[TokenSequence], steps: usize) -> Result<Vec<f64>> {
    if seqs.is_empty() {
        return Err(Error::data("no training sequences"));
    }
    let cfg = s2.config.clone();
    let mut sampler = BatchSampler::new(seqs.len(), cfg.batch_size, rng(cfg.seed, STREAM_AR_BATCHES));
    let mut opt = Adam::new(cfg.ar_adam());
    let mut history = Vec::with_capacity(steps);
    for _ in 0..steps {
        let batch: Vec<&TokenSequence> = sampler.next().into_iter().map(|i| &seqs[i]).collect();
        let mut tape = Tape::new();
        let p = s2.model.bind_params(&mut tape);
        let l = s2.model.nll_on_tape(&mut tape, &p, &batch)?;
        let nll = scalar_f64(tape.value(l));
        if !nll.is_finite() {
            return Err(Error::Diverged {
                step: s2.step,
                last_parts: format!("nll={}", history.last().copied().unwrap_or(f64::NAN)),
            });
        }
        let g = tape.backward(l);
        s2.model.apply_grads(&mut opt, &p.collect_grads(&g));
        s2.step += 1;
        if s2.step.is_multiple_of(cfg.log_every) || s2.step == 1 {
            info!("stage2 {} step {}: nll={nll:.5}", cfg.variant, s2.step);
        }
        history.push(nll);
    }
    Ok(history)
}

// ---- synthesis -----------------------------------------------------------------------

/// Sampling parameters for one synthesis run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub temperature: f64,
    pub top_k: usize,
    pub samples_per_map: usize,
    pub seed: u64,
}

impl SynthParams {
    pub fn from_config(c: &RunConfig) -> Self {
        SynthParams {
            temperature: c.temperature,
            top_k: c.top_k,
            samples_per_map: c.samples_per_map,
            seed: c.seed,
        }
    }

    /// Per-(map, draw) sampling seed.
    pub fn seed_for(&self, map: usize, draw: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((map * self.samples_per_map + draw) as u64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    /// `generations[i][j]`: draw `j` for held-out map `i`.
    pub generations: Vec<Vec<RgbImage>>,
    pub grids: Vec<Vec<LatentGrid>>,
    pub report: MetricsReport,
}

/// Samples image latents for each held-out map, decodes them and scores the
/// generations against the ground-truth images with the same semantic map.
pub fn synthesize(
    stage1: &Stage1,
    stage2: &Stage2,
    samples: &[PairedSample],
    params: SynthParams,
    out: Option<&Path>,
) -> Result<Synthesis> {
    stage2.check_linked(stage1)?;
    if samples.is_empty() || params.samples_per_map == 0 {
        return Err(Error::config("synthesis needs at least one sample and one draw per map"));
    }
    let refs: Vec<_> = samples.iter().collect();
    let cond = stage1.encode_conditioning(&refs)?;
    let mut grids = Vec::with_capacity(samples.len());
    for (i, zs) in cond.iter().enumerate() {
        let draws = (0..params.samples_per_map)
            .map(|j| {
                stage2.model.sample(
                    zs,
                    SamplingParams {
                        temperature: params.temperature,
                        top_k: params.top_k,
                        seed: params.seed_for(i, j),
                    },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        grids.push(draws);
    }
    let pairs: Vec<(&LatentGrid, &LatentGrid)> = cond
        .iter()
        .zip(&grids)
        .flat_map(|(zs, draws)| draws.iter().map(move |zx| (zx, zs)))
        .collect();
    let flat = stage1.decode_images(&pairs)?;
    let generations: Vec<Vec<RgbImage>> = flat.chunks(params.samples_per_map).map(|c| c.to_vec()).collect();

    let mut ssim_sum = 0.0;
    let mut regen = Vec::with_capacity(flat.len());
    for (s, gens) in samples.iter().zip(&generations) {
        for g in gens {
            ssim_sum += ssim(g, &s.image)?;
            regen.push(PairedSample::new(g.clone(), s.semantics.clone())?);
        }
    }
    let read = stage1.read_semantics(&regen.iter().collect::<Vec<_>>())?;
    let mut acc = IouAccumulator::new(stage1.config.num_classes);
    for (map, p) in read.iter().zip(&regen) {
        acc.add(map, &p.semantics)?;
    }
    let (miou, per_class) = acc.finish();
    let gt: Vec<RgbImage> = samples.iter().map(|s| s.image.clone()).collect();
    let fd = if flat.len() >= 2 && gt.len() >= 2 {
        frechet_distance(&flat, &gt)?
    } else {
        warn!("{FD_LABEL} needs at least two images per set; reporting NaN");
        f64::NAN
    };
    let report = MetricsReport {
        ssim_mean: ssim_sum / flat.len() as f64,
        frechet_distance: fd,
        miou_percent: miou,
        n_samples: flat.len(),
        per_class_iou: per_class,
    };
    if let Some(dir) = out {
        let rows: Vec<Vec<RgbImage>> = samples
            .iter()
            .zip(&generations)
            .take(8)
            .map(|(s, gens)| {
                let mut row = vec![s.semantics.colorize(), s.image.clone()];
                row.extend(gens.iter().cloned());
                row
            })
            .collect();
        write_ppm(dir, "synthesis.ppm", &tile_images(&rows, 1))?;
        write_file(&dir.join("metrics.tsv"), report.to_tsv().as_bytes())?;
    }
    Ok(Synthesis {
        generations,
        grids,
        report,
    })
}

// ---- comparison harness ------------------------------------------------------------------

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Metrics of one (variant, seed) run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub report: MetricsReport,
    pub nll: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub variant: Variant,
    pub fd: (f64, f64),
    pub ssim: (f64, f64),
    pub miou: (f64, f64),
    pub nll: (f64, f64),
}

impl CompareRow {
    fn cells(&self) -> [(f64, f64); 4] {
        [self.fd, self.ssim, self.miou, self.nll]
    }

    pub fn all_finite(&self) -> bool {
        self.cells().iter().all(|(m, s)| m.is_finite() && s.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub runs: Vec<RunResult>,
    pub rows: Vec<CompareRow>,
    /// One line per coupled/baseline pair and metric saying which side is better.
    pub directional: Vec<String>,
    /// Coupled NLL mean ≤ baseline mean + baseline std, for both pairs.
    pub nll_within_baseline: bool,
}

impl Comparison {
    pub fn row(&self, v: Variant) -> &CompareRow {
        self.rows.iter().find(|r| r.variant == v).expect("all variants present")
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("model\t{FD_LABEL}\t{FD_LABEL}_std\tSSIM\tSSIM_std\tmIOU\tmIOU_std\tNLL\tNLL_std\n");
        for r in &self.rows {
            let _ = write!(s, "{}", r.variant.table_label());
            for (m, sd) in r.cells() {
                let _ = write!(s, "\t{m:.6}\t{sd:.6}");
            }
            s.push('\n');
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<10} {:>18} {:>18} {:>18} {:>18}\n",
            "model", FD_LABEL, "SSIM", "mIOU", "NLL"
        );
        for r in &self.rows {
            let _ = write!(s, "{:<10}", r.variant.table_label());
            for (m, sd) in r.cells() {
                let _ = write!(s, " {:>18}", format!("{m:.4} ± {sd:.4}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Runs every variant for every seed on the same dataset split: stage 1,
/// stage 2, synthesis on the held-out split.
pub fn compare(config: &RunConfig, data: &[PairedSample], seeds: &[u64], out: Option<&Path>) -> Result<Comparison> {
    if seeds.is_empty() {
        return Err(Error::config("compare needs at least one seed"));
    }
    let (train, held) = split_holdout(data, config.n_eval)?;
    let mut runs = Vec::new();
    for &variant in &Variant::ALL {
        for &seed in seeds {
            let cfg = RunConfig {
                variant,
                seed,
                ..config.clone()
            };
            let dir = out.map(|d| d.join(format!("{}_seed{seed}", variant.name())));
            let (s1, _) = train_stage1(&cfg, train, dir.as_deref())?;
            let (s2, _) = train_stage2(&cfg, &s1, train)?;
            let nll = s2.model.mean_nll(&encode_sequences(&s1, held)?.iter().collect::<Vec<_>>())?;
            let syn = synthesize(&s1, &s2, held, SynthParams::from_config(&cfg), dir.as_deref())?;
            info!(
                "compare {} seed {seed}: {FD_LABEL}={:.4} SSIM={:.4} mIOU={:.2} NLL={nll:.4}",
                variant.table_label(),
                syn.report.frechet_distance,
                syn.report.ssim_mean,
                syn.report.miou_percent
            );
            runs.push(RunResult {
                variant,
                seed,
                report: syn.report,
                nll,
            });
        }
    }
    let rows: Vec<CompareRow> = Variant::ALL
        .iter()
        .map(|&v| {
            let sel: Vec<&RunResult> = runs.iter().filter(|r| r.variant == v).collect();
            let col = |f: &dyn Fn(&RunResult) -> f64| mean_std(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
            CompareRow {
                variant: v,
                fd: col(&|r| r.report.frechet_distance),
                ssim: col(&|r| r.report.ssim_mean),
                miou: col(&|r| r.report.miou_percent),
                nll: col(&|r| r.nll),
            }
        })
        .collect();
    let mut cmp = Comparison {
        runs,
        rows,
        directional: Vec::new(),
        nll_within_baseline: true,
    };
    for (coupled, base) in [(Variant::Svqvae, Variant::BaselineVqvae), (Variant::Svqgan, Variant::BaselineVqgan)] {
        let (c, b) = (cmp.row(coupled).clone(), cmp.row(base).clone());
        let verdict = |name: &str, cv: f64, bv: f64, lower_better: bool| {
            let better = if lower_better { cv < bv } else { cv > bv };
            format!(
                "{} vs {}: {name} {:.4} vs {:.4} -> {}",
                coupled.table_label(),
                base.table_label(),
                cv,
                bv,
                if better { "coupled better" } else { "coupled not better" }
            )
        };
        cmp.directional.push(verdict(FD_LABEL, c.fd.0, b.fd.0, true));
        cmp.directional.push(verdict("SSIM", c.ssim.0, b.ssim.0, false));
        cmp.directional.push(verdict("mIOU", c.miou.0, b.miou.0, false));
        cmp.directional.push(verdict("NLL", c.nll.0, b.nll.0, true));
        cmp.nll_within_baseline &= c.nll.0 <= b.nll.0 + b.nll.1;
    }
    for line in &cmp.directional {
        info!("{line}");
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("compare.tsv"), cmp.to_tsv().as_bytes())?;
        write_file(&dir.join("compare.txt"), cmp.to_table().as_bytes())?;
    }
    Ok(cmp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;

    pub(crate) fn tiny(variant: Variant) -> RunConfig {
        RunConfig {
            variant,
            image_size: 8,
            latent_size: 2,
            channels: 4,
            code_dim: 4,
            k_image: 8,
            k_semantic: 4,
            disc_channels: 4,
            ar_width: 8,
            ar_layers: 1,
            ar_heads: 2,
            ae_steps: 6,
            ar_steps: 4,
            batch_size: 2,
            n_samples: 6,
            n_eval: 2,
            log_every: 1000,
            grid_every: 1000,
            gan_warmup: 0.5,
            ..RunConfig::default()
        }
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut s = BatchSampler::new(5, 2, rng(1, 2));
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next()).collect();
        seen.truncate(10);
        let mut first = seen[..5].to_vec();
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn checkpoints_round_trip_for_every_variant() {
        let data = generate_dataset(6, 3, 8).unwrap();
        for v in Variant::ALL {
            let cfg = tiny(v);
            let (s1, hist) = train_stage1(&cfg, &data[..4], None).unwrap();
            assert_eq!(hist.len(), 6);
            let cks = s1.checkpoints().unwrap();
            assert_eq!(cks.len(), if v.is_coupled() { 1 } else { 2 });
            let bytes: Vec<Vec<u8>> = cks.iter().map(|c| c.to_bytes().unwrap()).collect();
            let back = Stage1::from_checkpoints(
                &bytes.iter().map(|b| Checkpoint::from_bytes(b).unwrap()).collect::<Vec<_>>(),
            )
            .unwrap();
            assert_eq!(back, s1);
            let again: Vec<Vec<u8>> = back.checkpoints().unwrap().iter().map(|c| c.to_bytes().unwrap()).collect();
            assert_eq!(again, bytes);

            let (s2, _) = train_stage2(&cfg, &s1, &data[..4]).unwrap();
            let back2 = Stage2::from_checkpoint(&Checkpoint::from_bytes(&s2.checkpoint().unwrap().to_bytes().unwrap()).unwrap()).unwrap();
            assert_eq!(back2, s2);
            let syn = synthesize(&s1, &s2, &data[4..], SynthParams::from_config(&cfg), None).unwrap();
            assert_eq!(syn.generations.len(), 2);
            assert_eq!(syn.generations[0].len(), 3);
            assert!(syn.report.is_finite(), "{v}: {:?}", syn.report);
        }
    }

    #[test]
    fn stage2_rejects_foreign_stage1() {
        let data = generate_dataset(6, 3, 8).unwrap();
        let cfg = tiny(Variant::Svqvae);
        let (a, _) = train_stage1(&cfg, &data[..4], None).unwrap();
        let (s2, _) = train_stage2(&cfg, &a, &data[..4]).unwrap();
        let (b, _) = train_stage1(&RunConfig { seed: 9, ..cfg.clone() }, &data[..4], None).unwrap();
        assert!(synthesize(&b, &s2, &data[4..], SynthParams::from_config(&cfg), None).is_err());
        let other = RunConfig {
            variant: Variant::BaselineVqvae,
            ..cfg
        };
        assert!(Stage2::init(&other, &a).is_err());
    }

    #[test]
    fn mean_std_matches_hand_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
    }
}
