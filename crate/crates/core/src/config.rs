//! Flat key-value run configuration: one `key = value` per line, `#`
//! comments. Every key has a default; unknown keys are errors. The
//! architecture-relevant subset is digested into checkpoints so a model can
//! be rebuilt from (and verified against) its own file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mqvae::VaeConfig;
use crate::sampler::SamplerConfig;
use crate::stackformer::TransformerConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // run
    pub seed: u64,
    pub out_dir: PathBuf,
    // data
    pub data: String,
    pub data_count: usize,
    pub split: f64,
    pub resolution: usize,
    pub channels: usize,
    // stage-1 architecture
    pub f: usize,
    pub widths: Vec<usize>,
    pub n_z: usize,
    pub codebook_size: usize,
    pub mask_ratio: f64,
    pub h_sub: usize,
    pub epsilon_mask: f64,
    pub beta: f64,
    // stage-2 architecture
    pub d_model: usize,
    pub heads: usize,
    pub code_blocks: usize,
    pub pos_blocks: usize,
    pub ff_mult: usize,
    pub num_classes: usize,
    // training
    pub steps_vae: usize,
    pub steps_ar: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_vae: f64,
    pub lr_ar: f64,
    pub warmup_ar: usize,
    pub weight_decay_ar: f64,
    pub log_every: usize,
    pub eval_every: usize,
    pub dump_every: usize,
    pub target_mse: f64,
    pub target_nll: f64,
    pub resume: String,
    // checkpoints
    pub vae_checkpoint: String,
    pub ar_checkpoint: String,
    // sampler
    pub sample_steps: usize,
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
    pub greedy: bool,
    pub count: usize,
    pub class_id: i64,
    pub dump_sequences: bool,
    // eval
    pub eval_split: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_dir: PathBuf::from("out"),
            data: "synthetic".into(),
            data_count: 64,
            split: 1.0,
            resolution: 32,
            channels: 1,
            f: 8,
            widths: vec![8, 16, 32],
            n_z: 8,
            codebook_size: 64,
            mask_ratio: 0.25,
            h_sub: 8,
            epsilon_mask: 0.02,
            beta: 0.25,
            d_model: 128,
            heads: 4,
            code_blocks: 4,
            pos_blocks: 2,
            ff_mult: 4,
            num_classes: 0,
            steps_vae: 5000,
            steps_ar: 3000,
            epochs: 0,
            batch_size: 4,
            lr_vae: 2e-3,
            lr_ar: 1e-3,
            warmup_ar: 100,
            weight_decay_ar: 0.01,
            log_every: 50,
            eval_every: 200,
            dump_every: 1000,
            target_mse: 0.0,
            target_nll: 0.0,
            resume: String::new(),
            vae_checkpoint: String::new(),
            ar_checkpoint: String::new(),
            sample_steps: 0,
            top_k: 0,
            top_p: 1.0,
            temperature: 1.0,
            greedy: false,
            count: 1,
            class_id: -1,
            dump_sequences: false,
            eval_split: "train".into(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value.parse::<T>().map_err(|_| Error::InvalidConfigValue {
        key: key.into(),
        value: value.into(),
        reason: format!("expected {what}"),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidConfigValue {
            key: key.into(),
            value: value.into(),
            reason: "expected a boolean (true/false)".into(),
        }),
    }
}

impl RunConfig {
    /// Set one key. Unknown keys are rejected by name.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value, "an unsigned integer")?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "data" => self.data = value.into(),
            "data_count" => self.data_count = parse(key, value, "an unsigned integer")?,
            "split" => self.split = parse(key, value, "a fraction")?,
            "resolution" => self.resolution = parse(key, value, "an unsigned integer")?,
            "channels" => self.channels = parse(key, value, "1 or 3")?,
            "f" => self.f = parse(key, value, "4, 8 or 16")?,
            "widths" => {
                let mut widths = Vec::new();
                for part in value.split(',') {
                    widths.push(parse(key, part.trim(), "a comma-separated integer list")?);
                }
                self.widths = widths;
            }
            "n_z" => self.n_z = parse(key, value, "an unsigned integer")?,
            "codebook_size" => self.codebook_size = parse(key, value, "an unsigned integer")?,
            "mask_ratio" => self.mask_ratio = parse(key, value, "a fraction in [0, 1)")?,
            "h_sub" => self.h_sub = parse(key, value, "an unsigned integer")?,
            "epsilon_mask" => self.epsilon_mask = parse(key, value, "a number in [0, 1)")?,
            "beta" => self.beta = parse(key, value, "a number")?,
            "d_model" => self.d_model = parse(key, value, "an unsigned integer")?,
            "heads" => self.heads = parse(key, value, "an unsigned integer")?,
            "code_blocks" => self.code_blocks = parse(key, value, "an unsigned integer")?,
            "pos_blocks" => self.pos_blocks = parse(key, value, "an unsigned integer")?,
            "ff_mult" => self.ff_mult = parse(key, value, "an unsigned integer")?,
            "num_classes" => self.num_classes = parse(key, value, "an unsigned integer")?,
            "steps_vae" => self.steps_vae = parse(key, value, "an unsigned integer")?,
            "steps_ar" => self.steps_ar = parse(key, value, "an unsigned integer")?,
            "epochs" => self.epochs = parse(key, value, "an unsigned integer")?,
            "batch_size" => self.batch_size = parse(key, value, "an unsigned integer")?,
            "lr_vae" => self.lr_vae = parse(key, value, "a number")?,
            "lr_ar" => self.lr_ar = parse(key, value, "a number")?,
            "warmup_ar" => self.warmup_ar = parse(key, value, "an unsigned integer")?,
            "weight_decay_ar" => self.weight_decay_ar = parse(key, value, "a number")?,
            "log_every" => self.log_every = parse(key, value, "an unsigned integer")?,
            "eval_every" => self.eval_every = parse(key, value, "an unsigned integer")?,
            "dump_every" => self.dump_every = parse(key, value, "an unsigned integer")?,
            "target_mse" => self.target_mse = parse(key, value, "a number")?,
            "target_nll" => self.target_nll = parse(key, value, "a number")?,
            "resume" => self.resume = value.into(),
            "vae_checkpoint" => self.vae_checkpoint = value.into(),
            "ar_checkpoint" => self.ar_checkpoint = value.into(),
            "sample_steps" => self.sample_steps = parse(key, value, "an unsigned integer")?,
            "top_k" => self.top_k = parse(key, value, "an unsigned integer")?,
            "top_p" => self.top_p = parse(key, value, "a fraction in (0, 1]")?,
            "temperature" => self.temperature = parse(key, value, "a positive number")?,
            "greedy" => self.greedy = parse_bool(key, value)?,
            "count" => self.count = parse(key, value, "an unsigned integer")?,
            "class_id" => self.class_id = parse(key, value, "an integer (-1 = unconditional)")?,
            "dump_sequences" => self.dump_sequences = parse_bool(key, value)?,
            "eval_split" => {
                if value != "train" && value != "val" {
                    return Err(Error::InvalidConfigValue {
                        key: key.into(),
                        value: value.into(),
                        reason: "expected train or val".into(),
                    });
                }
                self.eval_split = value.into();
            }
            _ => {
                return Err(Error::UnknownConfigKey { key: key.into() });
            }
        }
        Ok(())
    }

    /// Apply one `key = value` line (comments already stripped).
    pub fn apply_line(&mut self, line: &str) -> Result<()> {
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::InvalidConfigValue {
                key: line.trim().into(),
                value: String::new(),
                reason: "expected key = value".into(),
            });
        };
        self.apply(key.trim(), value.trim())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for raw in text.lines() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            };
            if line.trim().is_empty() {
                continue;
            }
            self.apply_line(line)?;
        }
        Ok(())
    }

    /// Build a config from an optional file plus `--set key=value` overrides.
    pub fn from_sources(file: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            cfg.load_file(path)?;
        }
        for s in sets {
            cfg.apply_line(s)?;
        }
        Ok(cfg)
    }

    fn widths_str(&self) -> String {
        self.widths
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Full config as canonical `key = value` text (fixed key order);
    /// parseable back via `apply_text`.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "data = {}", self.data);
        let _ = writeln!(s, "data_count = {}", self.data_count);
        let _ = writeln!(s, "split = {}", self.split);
        let _ = writeln!(s, "resolution = {}", self.resolution);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "f = {}", self.f);
        let _ = writeln!(s, "widths = {}", self.widths_str());
        let _ = writeln!(s, "n_z = {}", self.n_z);
        let _ = writeln!(s, "codebook_size = {}", self.codebook_size);
        let _ = writeln!(s, "mask_ratio = {}", self.mask_ratio);
        let _ = writeln!(s, "h_sub = {}", self.h_sub);
        let _ = writeln!(s, "epsilon_mask = {}", self.epsilon_mask);
        let _ = writeln!(s, "beta = {}", self.beta);
        let _ = writeln!(s, "d_model = {}", self.d_model);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "code_blocks = {}", self.code_blocks);
        let _ = writeln!(s, "pos_blocks = {}", self.pos_blocks);
        let _ = writeln!(s, "ff_mult = {}", self.ff_mult);
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "steps_vae = {}", self.steps_vae);
        let _ = writeln!(s, "steps_ar = {}", self.steps_ar);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lr_vae = {}", self.lr_vae);
        let _ = writeln!(s, "lr_ar = {}", self.lr_ar);
        let _ = writeln!(s, "warmup_ar = {}", self.warmup_ar);
        let _ = writeln!(s, "weight_decay_ar = {}", self.weight_decay_ar);
        let _ = writeln!(s, "log_every = {}", self.log_every);
        let _ = writeln!(s, "eval_every = {}", self.eval_every);
        let _ = writeln!(s, "dump_every = {}", self.dump_every);
        let _ = writeln!(s, "target_mse = {}", self.target_mse);
        let _ = writeln!(s, "target_nll = {}", self.target_nll);
        let _ = writeln!(s, "resume = {}", self.resume);
        let _ = writeln!(s, "vae_checkpoint = {}", self.vae_checkpoint);
        let _ = writeln!(s, "ar_checkpoint = {}", self.ar_checkpoint);
        let _ = writeln!(s, "sample_steps = {}", self.sample_steps);
        let _ = writeln!(s, "top_k = {}", self.top_k);
        let _ = writeln!(s, "top_p = {}", self.top_p);
        let _ = writeln!(s, "temperature = {}", self.temperature);
        let _ = writeln!(s, "greedy = {}", self.greedy);
        let _ = writeln!(s, "count = {}", self.count);
        let _ = writeln!(s, "class_id = {}", self.class_id);
        let _ = writeln!(s, "dump_sequences = {}", self.dump_sequences);
        let _ = writeln!(s, "eval_split = {}", self.eval_split);
        s
    }

    pub fn from_canonical(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Digest of the architecture-determining keys. Checkpoints store it;
    /// loading into a differently shaped model is an error.
    pub fn arch_digest(&self) -> String {
        let arch = format!(
            "resolution={};channels={};f={};widths={};n_z={};codebook_size={};mask_ratio={};h_sub={};epsilon_mask={};beta={};d_model={};heads={};code_blocks={};pos_blocks={};ff_mult={};num_classes={}",
            self.resolution,
            self.channels,
            self.f,
            self.widths_str(),
            self.n_z,
            self.codebook_size,
            self.mask_ratio,
            self.h_sub,
            self.epsilon_mask,
            self.beta,
            self.d_model,
            self.heads,
            self.code_blocks,
            self.pos_blocks,
            self.ff_mult,
            self.num_classes
        );
        let digest = Sha256::digest(arch.as_bytes());
        digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn vae_config(&self) -> VaeConfig {
        VaeConfig {
            in_channels: self.channels,
            resolution: self.resolution,
            f: self.f,
            widths: self.widths.clone(),
            n_z: self.n_z,
            codebook_size: self.codebook_size,
            mask_ratio: self.mask_ratio,
            h_sub: self.h_sub,
            epsilon_mask: self.epsilon_mask,
            beta: self.beta,
        }
    }

    pub fn transformer_config(&self) -> TransformerConfig {
        TransformerConfig {
            code_blocks: self.code_blocks,
            pos_blocks: self.pos_blocks,
            d_model: self.d_model,
            heads: self.heads,
            ff_mult: self.ff_mult,
            codebook_size: self.codebook_size,
            grid_len: self.vae_config().grid_len(),
            num_classes: self.num_classes,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.sample_steps,
            top_k: self.top_k,
            top_p: self.top_p,
            temperature: self.temperature,
            seed: self.seed,
            greedy: self.greedy,
        }
    }

    pub fn vae_checkpoint_path(&self) -> PathBuf {
        if self.vae_checkpoint.is_empty() {
            self.out_dir.join("vae.ckpt")
        } else {
            PathBuf::from(&self.vae_checkpoint)
        }
    }

    pub fn ar_checkpoint_path(&self) -> PathBuf {
        if self.ar_checkpoint.is_empty() {
            self.out_dir.join("ar.ckpt")
        } else {
            PathBuf::from(&self.ar_checkpoint)
        }
    }

    pub fn condition(&self) -> Option<usize> {
        if self.class_id >= 0 {
            Some(self.class_id as usize)
        } else {
            None
        }
    }
}
