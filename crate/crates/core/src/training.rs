//! Two-phase optimization: painter-only pre-training, then joint training
//! with the WGAN-GP critic.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use candle_nn::VarMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, Manifest};
use crate::critic::{Critic, CriticConfig};
use crate::error::{Error, Result};
use crate::losses::{self, scalar, LossReport, LossWeights};
use crate::model::{Painter, PainterConfig};
use crate::render::{diff, Brush};
use crate::synthesis::{mix_seed, SampleBatch, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub preset: Preset,
    pub patch_size: usize,
    pub max_strokes: usize,
    pub batch_size: usize,
    pub total_steps: usize,
    pub pretrain_steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda_p: f64,
    pub lambda_w: f64,
    pub lambda_c: f64,
    pub lambda_dis: f64,
    pub seed: u64,
    pub n_critic: usize,
    pub width: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub critic_width: usize,
    pub no_differential: bool,
    pub no_coord: bool,
    pub no_discriminator: bool,
    pub no_conf_reg: bool,
    pub checkpoint_every: usize,
    pub keep_checkpoints: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            patch_size: 32,
            max_strokes: 8,
            batch_size: 16,
            total_steps: 2000,
            pretrain_steps: 1000,
            lr: 1e-4,
            weight_decay: 1e-2,
            lambda_p: losses::LAMBDA_P,
            lambda_w: losses::LAMBDA_W,
            lambda_c: losses::LAMBDA_C,
            lambda_dis: losses::LAMBDA_DIS,
            seed: 0,
            n_critic: 5,
            width: 64,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            critic_width: 32,
            no_differential: false,
            no_coord: false,
            no_discriminator: false,
            no_conf_reg: false,
            checkpoint_every: 500,
            keep_checkpoints: 2,
        }
    }

    pub fn full() -> Self {
        Self {
            preset: Preset::Full,
            batch_size: 64,
            total_steps: 100_000,
            pretrain_steps: 50_000,
            width: 128,
            enc_layers: 3,
            dec_layers: 3,
            heads: 8,
            critic_width: 64,
            ..Self::desk()
        }
    }

    pub fn painter_config(&self) -> PainterConfig {
        PainterConfig {
            patch_size: self.patch_size,
            max_strokes: self.max_strokes,
            width: self.width,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            heads: self.heads,
            ffn_mult: 4,
            use_differential: !self.no_differential,
            use_coord: !self.no_coord,
        }
    }

    pub fn critic_config(&self) -> CriticConfig {
        CriticConfig {
            patch_size: self.patch_size,
            base_width: self.critic_width,
            blocks: 5,
            use_coord: !self.no_coord,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            patch_size: self.patch_size,
            max_strokes: self.max_strokes,
            ..SynthConfig::default()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            pixel: self.lambda_p,
            wasserstein: self.lambda_w,
            confidence: if self.no_conf_reg { 0.0 } else { self.lambda_c },
            gradient_penalty: self.lambda_dis,
        }
    }

    pub fn adversarial_at(&self, step: usize) -> bool {
        !self.no_discriminator && step >= self.pretrain_steps
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.pretrain_steps > self.total_steps {
            return bad(format!(
                "pretrain_steps {} exceeds total_steps {}",
                self.pretrain_steps, self.total_steps
            ));
        }
        if self.patch_size % 4 != 0 {
            return bad(format!("patch_size {} is not divisible by 4", self.patch_size));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, v) in [
            ("lambda_p", self.lambda_p),
            ("lambda_w", self.lambda_w),
            ("lambda_c", self.lambda_c),
            ("lambda_dis", self.lambda_dis),
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if self.n_critic == 0 && !self.no_discriminator {
            return bad("n_critic must be positive unless no_discriminator is set".into());
        }
        self.painter_config().validate()
    }

    /// Sets one field from its textual key and value. `preset` resets every
    /// field to the preset's values.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
        }
        match key {
            "preset" => {
                *self = match value {
                    "desk" => Self::desk(),
                    "full" => Self::full(),
                    _ => return Err(Error::Config(format!("unknown preset {value:?}"))),
                }
            }
            "patch_size" => self.patch_size = parse(key, value)?,
            "max_strokes" => self.max_strokes = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "total_steps" => self.total_steps = parse(key, value)?,
            "pretrain_steps" => self.pretrain_steps = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "lambda_p" => self.lambda_p = parse(key, value)?,
            "lambda_w" => self.lambda_w = parse(key, value)?,
            "lambda_c" => self.lambda_c = parse(key, value)?,
            "lambda_dis" => self.lambda_dis = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "n_critic" => self.n_critic = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "enc_layers" => self.enc_layers = parse(key, value)?,
            "dec_layers" => self.dec_layers = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "critic_width" => self.critic_width = parse(key, value)?,
            "no_differential" => self.no_differential = parse(key, value)?,
            "no_coord" => self.no_coord = parse(key, value)?,
            "no_discriminator" => self.no_discriminator = parse(key, value)?,
            "no_conf_reg" => self.no_conf_reg = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "keep_checkpoints" => self.keep_checkpoints = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses the flat `key = value` format (`#` starts a comment). A
    /// `preset` line is applied first wherever it appears.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            entries.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        entries.sort_by_key(|(_, k, _)| k != "preset");
        let mut cfg = Self::desk();
        for (line, k, v) in entries {
            cfg.set(&k, &v).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line,
                msg: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, path)
    }

    pub fn to_text(&self) -> String {
        let preset = match self.preset {
            Preset::Desk => "desk",
            Preset::Full => "full",
        };
        format!(
            "preset = {preset}\npatch_size = {}\nmax_strokes = {}\nbatch_size = {}\ntotal_steps = {}\n\
             pretrain_steps = {}\nlr = {}\nweight_decay = {}\nlambda_p = {}\nlambda_w = {}\nlambda_c = {}\n\
             lambda_dis = {}\nseed = {}\nn_critic = {}\nwidth = {}\nenc_layers = {}\ndec_layers = {}\nheads = {}\n\
             critic_width = {}\nno_differential = {}\nno_coord = {}\nno_discriminator = {}\nno_conf_reg = {}\n\
             checkpoint_every = {}\nkeep_checkpoints = {}\n",
            self.patch_size,
            self.max_strokes,
            self.batch_size,
            self.total_steps,
            self.pretrain_steps,
            self.lr,
            self.weight_decay,
            self.lambda_p,
            self.lambda_w,
            self.lambda_c,
            self.lambda_dis,
            self.seed,
            self.n_critic,
            self.width,
            self.enc_layers,
            self.dec_layers,
            self.heads,
            self.critic_width,
            self.no_differential,
            self.no_coord,
            self.no_discriminator,
            self.no_conf_reg,
            self.checkpoint_every,
            self.keep_checkpoints,
        )
    }
}

/// Outcome of one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub batch_seed: u64,
    pub critic_steps: usize,
    pub report: LossReport,
}

impl StepRecord {
    pub fn to_log_line(&self) -> String {
        let mut line = format!(
            "step={}\tbatch_seed={}\tcritic_steps={}",
            self.step, self.batch_seed, self.critic_steps
        );
        for (name, v) in LossReport::FIELDS.iter().zip(self.report.values()) {
            line.push_str(&format!("\t{name}={v}"));
        }
        line
    }

    pub fn parse_log_line(line: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed log line {line:?}"));
        let mut fields = std::collections::HashMap::new();
        for part in line.split('\t') {
            let (k, v) = part.split_once('=').ok_or_else(bad)?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(bad);
        let f = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad()) };
        Ok(Self {
            step: get("step")?.parse().map_err(|_| bad())?,
            batch_seed: get("batch_seed")?.parse().map_err(|_| bad())?,
            critic_steps: get("critic_steps")?.parse().map_err(|_| bad())?,
            report: LossReport {
                pixel: f("pixel")?,
                stroke_match: f("stroke_match")?,
                confidence_reg: f("confidence_reg")?,
                adv_generator: f("adv_generator")?,
                adv_critic: f("adv_critic")?,
                total: f("total")?,
                gamma: f("gamma")?,
            },
        })
    }
}

/// Reads a training log written by [`train`].
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(StepRecord::parse_log_line)
        .collect()
}

/// Forward value is the hard draw decision `1[logit >= 0]`; the gradient is
/// that of `sigmoid(logit)`.
pub fn straight_through_confidence(logits: &Tensor) -> Result<Tensor> {
    let soft = candle_nn::ops::sigmoid(logits)?;
    let hard = logits.ge(0.0)?.to_dtype(logits.dtype())?;
    Ok((hard + (&soft - soft.detach())?)?)
}

fn all_vars(vars: &VarMap) -> Vec<Var> {
    let data = vars.data().lock().expect("varmap lock");
    let mut named: Vec<_> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    named.sort_by(|a, b| a.0.cmp(&b.0));
    named.into_iter().map(|(_, v)| v).collect()
}

/// Painter, critic and their optimizers.
pub struct Trainer {
    cfg: TrainConfig,
    synth: SynthConfig,
    weights: LossWeights,
    painter: Painter,
    critic: Option<Critic>,
    painter_opt: AdamW,
    critic_opt: Option<AdamW>,
    device: Device,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let painter = Painter::new(cfg.painter_config(), mix_seed(cfg.seed, 1), device, DType::F32)?;
        let params = ParamsAdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..ParamsAdamW::default()
        };
        let painter_opt = AdamW::new(all_vars(painter.varmap()), params.clone())?;
        let (critic, critic_opt) = if cfg.no_discriminator {
            (None, None)
        } else {
            // The critic mirrors the painter's optimizer settings.
            let critic = Critic::new(cfg.critic_config(), mix_seed(cfg.seed, 2), device, DType::F32)?;
            let opt = AdamW::new(all_vars(critic.varmap()), params)?;
            (Some(critic), Some(opt))
        };
        Ok(Self {
            synth: cfg.synth_config(),
            weights: cfg.loss_weights(),
            cfg,
            painter,
            critic,
            painter_opt,
            critic_opt,
            device: device.clone(),
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn painter(&self) -> &Painter {
        &self.painter
    }

    pub fn critic(&self) -> Option<&Critic> {
        self.critic.as_ref()
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Seed of the synthetic batch used at `step`.
    pub fn batch_seed(&self, step: usize) -> u64 {
        mix_seed(self.cfg.seed ^ 0x5EED_BA7C, step as u64)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            painter: *self.painter.config(),
            critic: self.critic.as_ref().map(|c| *c.config()),
            step: self.step,
            seed: self.cfg.seed,
        }
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        checkpoint::save(dir, &self.manifest(), &self.painter, self.critic.as_ref())
    }

    /// Renders the painter's prediction for `batch` over its canvases.
    fn predict_render(&self, batch: &SampleBatch) -> Result<(crate::model::PainterOutput, Tensor)> {
        let out = self
            .painter
            .forward(&batch.canvas, &batch.target, &batch.differential)?;
        let conf = straight_through_confidence(&out.logits)?;
        let rendered = diff::render_strokes(&batch.canvas, &out.strokes, &conf, &Brush::Plain)?;
        Ok((out, rendered))
    }

    /// `n_critic` critic updates on one batch, then a single painter update.
    /// Outside the adversarial phase only the painter update runs.
    pub fn step_on(&mut self, batch: &SampleBatch, batch_seed: u64) -> Result<StepRecord> {
        let step = self.step;
        let adversarial = self.cfg.adversarial_at(step);
        let mut critic_steps = 0;
        let mut critic_value = 0.0;
        // Painter weights do not move during critic updates, so one forward
        // pass serves both the critic's fakes and the painter's objective.
        let (out, rendered) = self.predict_render(batch)?;
        if adversarial {
            let fake = rendered.detach();
            let critic = self.critic.as_ref().expect("critic exists when adversarial");
            let opt = self.critic_opt.as_mut().expect("critic optimizer");
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(batch_seed, 0xC717));
            let b = batch.len();
            for _ in 0..self.cfg.n_critic {
                let eps: Vec<f32> = (0..b).map(|_| rng.random::<f32>()).collect();
                let eps = Tensor::from_vec(eps, b, &self.device)?;
                let loss = losses::critic_loss(critic, &batch.target, &fake, &eps, self.weights.gradient_penalty)?;
                critic_value = scalar(&loss.loss)?;
                if !critic_value.is_finite() {
                    return Err(Error::NonFinite { step, batch_seed });
                }
                opt.step(&loss.loss.backward()?)?;
                critic_steps += 1;
            }
        }

        let pixel = losses::pixel_loss(&batch.target, &rendered, self.weights.pixel)?;
        let stroke = losses::stroke_loss(
            &batch.strokes,
            &batch.confidences,
            &out.strokes,
            &out.logits,
            &self.weights,
        )?;
        let adv = match (&self.critic, adversarial) {
            (Some(critic), true) => Some(losses::generator_adv_loss(critic, &rendered)?),
            _ => None,
        };
        let (total, _) = losses::total_loss(&pixel, &stroke.total()?, adv.as_ref())?;
        let adv_values = match &adv {
            Some(a) => Some((scalar(a)?, critic_value)),
            None => None,
        };
        let report = LossReport::assemble(
            scalar(&pixel)?,
            scalar(&stroke.matched)?,
            scalar(&stroke.regularizer)?,
            adv_values,
        );
        if !report.is_finite() || !scalar(&total)?.is_finite() {
            return Err(Error::NonFinite { step, batch_seed });
        }
        self.painter_opt.step(&total.backward()?)?;
        self.step += 1;
        Ok(StepRecord {
            step,
            batch_seed,
            critic_steps,
            report,
        })
    }

    /// Synthesizes the step's batch and trains on it.
    pub fn step_once(&mut self) -> Result<StepRecord> {
        let seed = self.batch_seed(self.step);
        let batch = SampleBatch::synthesize(&self.synth, seed, self.cfg.batch_size, &self.device, DType::F32)?;
        self.step_on(&batch, seed)
    }
}

/// Summary of a finished run.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub log_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub records: Vec<StepRecord>,
}

pub const LOG_FILE: &str = "train_log.tsv";
pub const FINAL_DIR: &str = "final";

fn periodic_dir(out: &Path, step: usize) -> PathBuf {
    out.join(format!("ckpt-{step:07}"))
}

/// Runs the full schedule, writing `out/train_log.tsv`, periodic
/// checkpoints `out/ckpt-NNNNNNN` (latest ones kept) and `out/final`.
pub fn train(cfg: TrainConfig, out: &Path, device: &Device) -> Result<TrainSummary> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let mut trainer = Trainer::new(cfg.clone(), device)?;
    let log_path = out.join(LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path)?);
    let mut records = Vec::with_capacity(cfg.total_steps);
    let mut kept: Vec<PathBuf> = Vec::new();
    for _ in 0..cfg.total_steps {
        let record = match trainer.step_once() {
            Ok(r) => r,
            Err(e) => {
                if let Error::NonFinite { step, batch_seed } = &e {
                    writeln!(log, "aborted\tstep={step}\tbatch_seed={batch_seed}")?;
                    log.flush()?;
                }
                return Err(e);
            }
        };
        writeln!(log, "{}", record.to_log_line())?;
        records.push(record);
        let done = record.step + 1;
        if done % 100 == 0 {
            log::info!(
                "step {done}/{} pixel {:.4} total {:.4}",
                cfg.total_steps,
                record.report.pixel,
                record.report.total
            );
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.total_steps {
            log.flush()?;
            kept.push(trainer.save_checkpoint(&periodic_dir(out, done))?);
            while kept.len() > cfg.keep_checkpoints {
                let old = kept.remove(0);
                fs::remove_dir_all(&old)?;
            }
        }
    }
    log.flush()?;
    let final_checkpoint = trainer.save_checkpoint(&out.join(FINAL_DIR))?;
    Ok(TrainSummary {
        log_path,
        final_checkpoint,
        records,
    })
}
