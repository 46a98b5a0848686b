//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; unknown keys and malformed values are rejected with their line
//! number. [`RunConfig::effective`] prints every resolved value.

use std::fs;
use std::path::{Path, PathBuf};

use crate::autograd::ParamGroup;
use crate::data::{MotionProgram, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::model::pathways::{Conv2dStage, ConvStage, EARLY_POOL};
use crate::model::{Append, ExtractorConfig, FusionConfig, FusionMethod, HolisticConfig, ModelConfig};
use crate::tensor::Precision;
use crate::training::{phase_seed, PhaseKind, PhasePlan, TrainPlan};

/// (key, default, description)
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "42", "run seed; phase, init and data seeds derive from it"),
    ("deterministic", "true", "run kernels on a single thread"),
    ("threads", "0", "worker threads when not deterministic (0 = all cores)"),
    ("precision", "f32", "f32 or f64 storage rounding"),
    ("model.channels", "1", "input channels"),
    ("model.frames", "16", "frames per clip (N)"),
    ("model.height", "32", "frame height"),
    ("model.width", "32", "frame width"),
    ("model.classes", "4", "class count"),
    ("model.holistic_widths", "8,16", "channels of the holistic conv blocks before the last"),
    ("model.d_g", "64", "holistic feature width (channels of the last block)"),
    ("model.extractor_widths", "8,16,16", "channels of the per-frame conv blocks"),
    ("model.d_f", "32", "per-frame feature width"),
    ("model.d_r", "64", "relation MLP width"),
    ("model.tuples_per_scale", "1", "random tuples averaged per scale while training"),
    ("fusion.method", "conditional", "conditional, max, average, concat, bilinear, sum, conv2d or conv3d"),
    ("fusion.append", "holistic", "feature appended after modulation: holistic, relation or none"),
    ("fusion.dropout", "0.5", "dropout rate on the relation bank inside fusion"),
    ("fusion.bilinear_rank", "8", "rank of the factorized bilinear fusion"),
    ("phase.holistic.epochs", "20", "epochs of the holistic phase"),
    ("phase.relation.epochs", "20", "epochs of the relation phase"),
    ("phase.fusion.epochs", "30", "epochs of the fusion phase"),
    ("phase.holistic.lr", "0.001", "learning rate of the holistic phase"),
    ("phase.relation.lr", "0.0001", "learning rate of the relation phase"),
    ("phase.fusion.lr", "0.0001", "learning rate of the fusion phase"),
    ("phase.relation.train_extractor", "true", "update the frame extractor in the relation phase"),
    ("train.batch_size", "6", "clips per step"),
    ("train.momentum", "0.9", "SGD momentum"),
    ("train.weight_decay", "0.0005", "SGD weight decay"),
    ("train.checkpoint_every", "0", "also checkpoint every this many epochs (0 = phase ends only)"),
    ("baseline.epochs", "20", "epochs of the single-frame appearance baseline (0 = skip)"),
    ("data.train_manifest", "", "training manifest path"),
    ("data.test_manifest", "", "test manifest path"),
    ("synth.train_per_class", "50", "generated training clips per class"),
    ("synth.test_per_class", "25", "generated test clips per class"),
    ("synth.motions", "up:1,down:1,left:1,right:1", "class motion programs direction:speed[:period]"),
    ("synth.patch", "8", "moving patch size"),
    ("synth.noise", "0.05", "Gaussian noise level"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: Vec<String>,
    /// Line each value came from, when it came from a file.
    lines: Vec<Option<usize>>,
    /// Directory relative paths resolve against.
    base: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(_, d, _)| d.to_string()).collect(),
            lines: vec![None; KEYS.len()],
            base: PathBuf::from("."),
        }
    }
}

fn key_index(key: &str) -> Option<usize> {
    KEYS.iter().position(|(k, _, _)| *k == key)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", no + 1)))?;
            let key = key.trim();
            let i = key_index(key).ok_or_else(|| Error::config(format!("line {}: unknown key {key:?}", no + 1)))?;
            cfg.values[i] = value.trim().to_string();
            cfg.lines[i] = Some(no + 1);
        }
        cfg.model_config()?;
        cfg.train_plan()?;
        cfg.synth_spec()?;
        cfg.get_bool("deterministic")?;
        cfg.get::<usize>("threads")?;
        cfg.get::<usize>("baseline.epochs")?;
        Ok(cfg)
    }

    /// Reads a file; relative data paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        let i = key_index(key).ok_or_else(|| Error::config(format!("unknown key {key:?}")))?;
        self.values[i] = value.into();
        self.lines[i] = None;
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        &self.values[key_index(key).unwrap_or_else(|| panic!("undeclared config key {key}"))]
    }

    fn bad(&self, key: &str, why: impl std::fmt::Display) -> Error {
        let i = key_index(key).expect("declared key");
        match self.lines[i] {
            Some(line) => Error::config(format!("line {line}: {key}: {why}")),
            None => Error::config(format!("{key}: {why}")),
        }
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse().map_err(|_| self.bad(key, format!("cannot parse {v:?}")))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.raw(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            v => Err(self.bad(key, format!("expected true or false, got {v:?}"))),
        }
    }

    fn get_list(&self, key: &str) -> Result<Vec<usize>> {
        let v = self.raw(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|p| p.trim().parse().map_err(|_| self.bad(key, format!("bad list entry {p:?}"))))
            .collect()
    }

    fn positive(&self, key: &str) -> Result<usize> {
        let v: usize = self.get(key)?;
        if v == 0 {
            return Err(self.bad(key, "must be positive"));
        }
        Ok(v)
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                self.base.join(p)
            }
        })
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn precision(&self) -> Result<Precision> {
        match self.raw("precision") {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            v => Err(self.bad("precision", format!("expected f32 or f64, got {v:?}"))),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut holistic: Vec<ConvStage> = self
            .get_list("model.holistic_widths")?
            .into_iter()
            .enumerate()
            .map(|(i, w)| ConvStage::cube(w, (i < 2).then_some(EARLY_POOL)))
            .collect();
        holistic.push(ConvStage::cube(self.positive("model.d_g")?, None));
        let extractor = ExtractorConfig {
            stages: self
                .get_list("model.extractor_widths")?
                .into_iter()
                .map(Conv2dStage::square)
                .collect(),
            d_f: self.positive("model.d_f")?,
        };
        let fusion = FusionConfig {
            method: self.get::<FusionMethod>("fusion.method").map_err(|_| {
                self.bad("fusion.method", format!("unknown method {:?}", self.raw("fusion.method")))
            })?,
            append: self.get::<Append>("fusion.append").map_err(|_| {
                self.bad("fusion.append", format!("unknown choice {:?}", self.raw("fusion.append")))
            })?,
            dropout: self.get("fusion.dropout")?,
            bilinear_rank: self.positive("fusion.bilinear_rank")?,
        };
        if !(0.0..1.0).contains(&fusion.dropout) {
            return Err(self.bad("fusion.dropout", "must lie in [0, 1)"));
        }
        let config = ModelConfig {
            channels: self.positive("model.channels")?,
            frames: self.positive("model.frames")?,
            height: self.positive("model.height")?,
            width: self.positive("model.width")?,
            classes: self.positive("model.classes")?,
            holistic: HolisticConfig { stages: holistic },
            extractor,
            d_r: self.positive("model.d_r")?,
            tuples_per_scale: self.positive("model.tuples_per_scale")?,
            fusion,
            precision: self.precision()?,
            init_seed: self.seed()?,
        };
        if config.frames < 2 {
            return Err(self.bad("model.frames", "the relation pathway needs at least 2 frames"));
        }
        config
            .holistic
            .output_volume([config.frames, config.height, config.width])?;
        Ok(config)
    }

    /// All three phases with the configured hyper-parameters.
    pub fn train_plan(&self) -> Result<TrainPlan> {
        let seed = self.seed()?;
        let batch_size = self.positive("train.batch_size")?;
        let momentum: f64 = self.get("train.momentum")?;
        let weight_decay: f64 = self.get("train.weight_decay")?;
        let mut phases = Vec::new();
        for kind in PhaseKind::ALL {
            let lr_key = format!("phase.{kind}.lr");
            let lr: f64 = self.get(&lr_key)?;
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(self.bad(&lr_key, "must be positive"));
            }
            let mut p = PhasePlan::new(kind, self.get(&format!("phase.{kind}.epochs"))?, lr, phase_seed(seed, kind));
            p.batch_size = batch_size;
            p.momentum = momentum;
            p.weight_decay = weight_decay;
            if kind == PhaseKind::Relation && !self.get_bool("phase.relation.train_extractor")? {
                p.trainable.retain(|g| *g != ParamGroup::FrameExtractor);
            }
            phases.push(p);
        }
        let plan = TrainPlan { phases };
        plan.validate()?;
        Ok(plan)
    }

    pub fn synth_spec(&self) -> Result<SyntheticTaskSpec> {
        let classes = self
            .raw("synth.motions")
            .split(',')
            .map(|m| MotionProgram::parse(m).map_err(|e| self.bad("synth.motions", e)))
            .collect::<Result<Vec<_>>>()?;
        Ok(SyntheticTaskSpec {
            classes,
            frames: self.positive("model.frames")?,
            channels: self.positive("model.channels")?,
            height: self.positive("model.height")?,
            width: self.positive("model.width")?,
            patch: self.positive("synth.patch")?,
            noise: self.get("synth.noise")?,
        })
    }

    /// Every key with its resolved value, one `key = value` line each.
    pub fn effective(&self) -> String {
        KEYS.iter()
            .zip(&self.values)
            .map(|((k, _, _), v)| format!("{k} = {v}\n"))
            .collect()
    }
}
