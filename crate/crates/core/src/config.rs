//! Flat `key = value` run configuration.
//!
//! Every tunable of every stage lives under one dotted key. A config file
//! holds one `key = value` per line (`#` starts a comment); later
//! assignments win, so command-line overrides are simply applied after the
//! file. Unknown keys and unparsable values are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::msg::MsgConfig;
use crate::spm::SpmConfig;
use crate::synth::SynthConfig;

/// Where the pipeline gets its images from.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Generate synthetic train/test sets instead of reading existing ones.
    pub synth: bool,
    pub train_count: usize,
    pub test_count: usize,
    pub train_seed: u64,
    pub test_seed: u64,
    /// Dataset roots (`images/`, `gt/`), relative to the working directory.
    pub train_dir: PathBuf,
    pub test_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synth: true,
            train_count: 20,
            test_count: 10,
            train_seed: 1000,
            test_seed: 2000,
            train_dir: PathBuf::from("data/train"),
            test_dir: PathBuf::from("data/test"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub spm: SpmConfig,
    /// Rank darker pixels higher when picking the border region.
    pub gray_invert: bool,
    pub msg: MsgConfig,
    /// Window stride at prediction time; 0 reuses `msg.stride`.
    pub predict_stride: usize,
    /// Training seeds of the ablation study.
    pub ablate_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            spm: SpmConfig::default(),
            gray_invert: true,
            msg: MsgConfig::default(),
            predict_stride: 0,
            ablate_seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

/// Named starting points a config file is layered on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// The published training constants (128-pixel patches, batch 16,
    /// learning rate 5e-3, 20 epochs).
    Reference,
    /// Settings that fit the small network to 20 synthetic 128×128 images
    /// in about a minute of single-core time. With the reference constants
    /// the network sees only 20 batches per run and underfits.
    Desk,
}

const DESK: &str = "\
msg.patch = 64
msg.stride = 64
msg.batch = 4
msg.lr0 = 0.2
msg.epochs = 30
msg.lambda_v = 0.015625
msg.beta = 0.9
predict.stride = 16
";

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "reference" => Ok(Preset::Reference),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!(
                "unknown preset `{name}` (expected reference or desk)"
            ))),
        }
    }

    pub fn config(self) -> RunConfig {
        let mut cfg = RunConfig::default();
        if self == Preset::Desk {
            cfg.apply_text(DESK).expect("desk preset parses");
        }
        cfg
    }
}

trait Value: Sized {
    fn parse(raw: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(raw: &str) -> Option<Self> {
                raw.parse().ok()
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_value!(usize, u64, bool);

impl Value for f64 {
    fn parse(raw: &str) -> Option<Self> {
        raw.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn render(&self) -> String {
        // shortest representation that parses back to the same bits
        format!("{self:?}")
    }
}

impl Value for [f64; 2] {
    fn parse(raw: &str) -> Option<Self> {
        let (a, b) = raw.split_once(',')?;
        Some([f64::parse(a.trim())?, f64::parse(b.trim())?])
    }
    fn render(&self) -> String {
        format!("{},{}", self[0].render(), self[1].render())
    }
}

impl Value for Vec<u64> {
    fn parse(raw: &str) -> Option<Self> {
        raw.split(',').map(|s| s.trim().parse().ok()).collect()
    }
    fn render(&self) -> String {
        self.iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl Value for PathBuf {
    fn parse(raw: &str) -> Option<Self> {
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+ : $doc:literal;)*) => {
        /// Every config key with a one-line description, in file order.
        pub const KEYS: &[(&str, &str)] = &[$(($key, $doc)),*];

        impl RunConfig {
            /// Assign one key from its textual value.
            pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
                let raw = raw.trim();
                match key {
                    $($key => {
                        self.$($field).+ = Value::parse(raw).ok_or_else(|| {
                            Error::Config(format!("cannot parse `{raw}` for {key}"))
                        })?;
                    })*
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            /// Current value of a key in config-file syntax.
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(Value::render(&self.$($field).+)),)*
                    _ => None,
                }
            }
        }
    };
}

keys! {
    "data.synth" => data.synth: "generate synthetic train/test sets before mining";
    "data.train_count" => data.train_count: "number of synthetic training images";
    "data.test_count" => data.test_count: "number of synthetic held-out images";
    "data.train_seed" => data.train_seed: "seed of the first training image (item i uses seed+i)";
    "data.test_seed" => data.test_seed: "seed of the first held-out image";
    "data.train_dir" => data.train_dir: "training set root with images/ and gt/";
    "data.test_dir" => data.test_dir: "held-out set root with images/ and gt/";
    "synth.height" => synth.height: "image height in pixels";
    "synth.width" => synth.width: "image width in pixels";
    "synth.glands_min" => synth.glands_min: "fewest glands per image";
    "synth.glands_max" => synth.glands_max: "most glands per image";
    "synth.radius_min" => synth.radius_min: "smallest inner semi-axis";
    "synth.radius_max" => synth.radius_max: "largest inner semi-axis";
    "synth.border_min" => synth.border_min: "thinnest border annulus";
    "synth.border_max" => synth.border_max: "thickest border annulus";
    "synth.border_lum" => synth.border_lum: "border luminance range lo,hi";
    "synth.interior_lum" => synth.interior_lum: "interior luminance range lo,hi";
    "synth.background_lum" => synth.background_lum: "background luminance range lo,hi";
    "synth.hue_jitter" => synth.hue_jitter: "per-gland colour shift amplitude";
    "synth.texture" => synth.texture: "per-pixel texture half-width inside glands";
    "synth.speckle" => synth.speckle: "per-pixel speckle half-width in the background";
    "synth.noise_sigma" => synth.noise_sigma: "additive Gaussian noise sigma";
    "synth.gap" => synth.gap: "minimum spacing between glands";
    "synth.placement_attempts" => synth.placement_attempts: "placement retries per gland";
    "gray.invert" => gray_invert: "darker pixels get higher gray levels";
    "spm.iterations" => spm.iterations: "encoder SGD iterations per image";
    "spm.lr0" => spm.lr0: "initial encoder learning rate";
    "spm.power" => spm.power: "poly learning-rate decay power";
    "spm.feature_channels" => spm.feature_channels: "encoder width";
    "spm.sc_shift_range" => spm.sc_shift_range: "largest offset in the continuity loss";
    "spm.sc_weight" => spm.sc_weight: "weight of the continuity loss";
    "spm.kmeans_k" => spm.kmeans_k: "candidate regions";
    "spm.kmeans_seed" => spm.kmeans_seed: "k-means seed";
    "spm.kmeans_max_iters" => spm.kmeans_max_iters: "Lloyd iterations per restart";
    "spm.kmeans_restarts" => spm.kmeans_restarts: "k-means restarts (best WCSS kept)";
    "spm.seed" => spm.seed: "encoder initialization seed";
    "msg.beta" => msg.beta: "similarity threshold for relabelling background";
    "msg.lambda_v" => msg.lambda_v: "weight of the variation loss";
    "msg.epochs" => msg.epochs: "training epochs";
    "msg.lr0" => msg.lr0: "initial learning rate";
    "msg.power" => msg.power: "poly learning-rate decay power";
    "msg.batch" => msg.batch: "patches per SGD step";
    "msg.patch" => msg.patch: "training patch size (multiple of 4)";
    "msg.stride" => msg.stride: "training patch stride";
    "msg.refine_every" => msg.refine_every: "epochs between proposal refreshes";
    "msg.refine_start" => msg.refine_start: "first epoch with a proposal refresh";
    "msg.embed_dim" => msg.embed_dim: "embedding channels";
    "msg.width" => msg.width: "stem width of the network";
    "msg.use_variation" => msg.use_variation: "enable the variation loss";
    "msg.use_omission" => msg.use_omission: "enable background relabelling";
    "msgv.symmetric" => msg.symmetric: "let the variation gradient reach the border anchor";
    "msg.seed" => msg.seed: "network init and shuffling seed";
    "predict.stride" => predict_stride: "prediction window stride (0 = msg.stride)";
    "ablate.seeds" => ablate_seeds: "comma-separated training seeds of the ablation";
}

impl RunConfig {
    /// Apply `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        self.apply_text(&text)
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(key.trim(), value)
    }

    /// Every key in file syntax; parsing this back yields the same config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, _) in KEYS {
            let value = self.get(key).expect("listed key");
            writeln!(out, "{key} = {value}").expect("write to String");
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of [`RunConfig::to_text`].
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn effective_predict_stride(&self) -> usize {
        if self.predict_stride == 0 {
            self.msg.stride
        } else {
            self.predict_stride
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.spm.validate()?;
        self.msg.validate()?;
        crate::imaging::check_patch_geometry(self.msg.patch, self.effective_predict_stride())
            .map_err(|e| Error::Config(format!("predict.stride: {e}")))?;
        if self.ablate_seeds.is_empty() {
            return Err(Error::Config("ablate.seeds must not be empty".into()));
        }
        Ok(())
    }

    /// Table of every key, its default under `preset` and its meaning.
    pub fn help_table(preset: Preset) -> String {
        let cfg = preset.config();
        let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (key, doc) in KEYS {
            let value = cfg.get(key).expect("listed key");
            writeln!(out, "  {key:<width$}  {value:<12} {doc}").expect("write to String");
        }
        out
    }
}
