//! Synthetic gland images with exact ground truth.
//!
//! Each gland is an ellipse whose interior is wrapped in a dark annulus (a
//! homothetic copy of the ellipse, scaled so the annulus is at least the
//! border thickness wide everywhere). Glands never overlap and never touch
//! the frame, so every interior is enclosed by its border.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{save_image, save_label_map, save_mask, Image, Mask, ProposalMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub glands_min: usize,
    pub glands_max: usize,
    /// Semi-axis range of the inner ellipse, in pixels.
    pub radius_min: f64,
    pub radius_max: f64,
    pub border_min: f64,
    pub border_max: f64,
    /// Luminance ranges, each `[lo, hi]`.
    pub border_lum: [f64; 2],
    pub interior_lum: [f64; 2],
    pub background_lum: [f64; 2],
    /// Amplitude of the luminance-neutral per-gland colour shift.
    pub hue_jitter: f64,
    /// Half-width of the uniform per-pixel texture inside glands.
    pub texture: f64,
    /// Half-width of the uniform per-pixel background speckle.
    pub speckle: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_sigma: f64,
    /// Minimum free space between the outer borders of two glands.
    pub gap: f64,
    pub placement_attempts: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            glands_min: 1,
            glands_max: 4,
            radius_min: 12.0,
            radius_max: 36.0,
            border_min: 2.0,
            border_max: 5.0,
            border_lum: [0.15, 0.35],
            interior_lum: [0.45, 0.85],
            background_lum: [0.75, 0.95],
            hue_jitter: 0.06,
            texture: 0.04,
            speckle: 0.04,
            noise_sigma: 0.03,
            gap: 3.0,
            placement_attempts: 200,
        }
    }
}

fn check_range(name: &str, [lo, hi]: [f64; 2]) -> Result<()> {
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(Error::Config(format!(
            "{name} must satisfy 0 <= lo <= hi <= 1"
        )));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("synth image size must be positive".into()));
        }
        if self.glands_min == 0 || self.glands_min > self.glands_max {
            return Err(Error::Config("synth gland count range is empty".into()));
        }
        if !(self.radius_min >= 1.0 && self.radius_min <= self.radius_max) {
            return Err(Error::Config(
                "synth radius range must satisfy 1 <= min <= max".into(),
            ));
        }
        if !(self.border_min >= 1.0 && self.border_min <= self.border_max) {
            return Err(Error::Config(
                "synth border range must satisfy 1 <= min <= max".into(),
            ));
        }
        check_range("synth.border_lum", self.border_lum)?;
        check_range("synth.interior_lum", self.interior_lum)?;
        check_range("synth.background_lum", self.background_lum)?;
        if self.border_lum[1] >= self.interior_lum[0]
            || self.border_lum[1] >= self.background_lum[0]
        {
            return Err(Error::Config(
                "synth border luminance must be strictly darker than interior and background"
                    .into(),
            ));
        }
        for (name, v) in [
            ("hue_jitter", self.hue_jitter),
            ("texture", self.texture),
            ("speckle", self.speckle),
            ("noise_sigma", self.noise_sigma),
            ("gap", self.gap),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "synth.{name} must be finite and >= 0"
                )));
            }
        }
        if self.placement_attempts == 0 {
            return Err(Error::Config(
                "synth.placement_attempts must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Geometry and colour of one rendered gland.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlandSpec {
    pub center: (f64, f64),
    /// Inner semi-axes `(a, b)`.
    pub axes: (f64, f64),
    pub angle: f64,
    pub thickness: f64,
    pub border_rgb: [f64; 3],
    pub interior_rgb: [f64; 3],
}

impl GlandSpec {
    /// Outer/inner scale ratio of the annulus.
    fn scale(&self) -> f64 {
        1.0 + self.thickness / self.axes.0.min(self.axes.1)
    }

    fn bounding_radius(&self) -> f64 {
        self.axes.0.max(self.axes.1) * self.scale()
    }

    /// Normalized elliptical radius of pixel centre `(r, c)`.
    fn rho(&self, r: usize, c: usize) -> f64 {
        let (dy, dx) = (r as f64 - self.center.0, c as f64 - self.center.1);
        let (s, co) = self.angle.sin_cos();
        let u = co * dx + s * dy;
        let v = -s * dx + co * dy;
        ((u / self.axes.0).powi(2) + (v / self.axes.1).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image: Image,
    pub gt_mask: Mask,
    pub gt_3class: ProposalMap,
    pub glands: Vec<GlandSpec>,
}

/// A colour of the given luminance shifted along a random luminance-neutral
/// direction.
fn tinted<R: Rng>(lum: f64, jitter: f64, rng: &mut R) -> [f64; 3] {
    let (x, y): (f64, f64) = (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
    // direction orthogonal to the luma weights in the (r, g, b) space
    let d = [x, y, -(0.299 * x + 0.587 * y) / 0.114];
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    d.map(|v| lum + jitter * v / norm)
}

fn place<R: Rng>(cfg: &SynthConfig, placed: &[GlandSpec], rng: &mut R) -> Option<GlandSpec> {
    for _ in 0..cfg.placement_attempts {
        let a = rng.random_range(cfg.radius_min..=cfg.radius_max);
        let b = rng.random_range(cfg.radius_min..=cfg.radius_max);
        let mut g = GlandSpec {
            center: (0.0, 0.0),
            axes: (a, b),
            angle: rng.random_range(0.0..PI),
            thickness: rng.random_range(cfg.border_min..=cfg.border_max),
            border_rgb: [0.0; 3],
            interior_rgb: [0.0; 3],
        };
        let reach = g.bounding_radius() + 1.0;
        let (h, w) = (cfg.height as f64, cfg.width as f64);
        if 2.0 * reach > h - 1.0 || 2.0 * reach > w - 1.0 {
            continue;
        }
        g.center = (
            rng.random_range(reach..=h - 1.0 - reach),
            rng.random_range(reach..=w - 1.0 - reach),
        );
        let clear = placed.iter().all(|p| {
            let d = ((p.center.0 - g.center.0).powi(2) + (p.center.1 - g.center.1).powi(2)).sqrt();
            d >= p.bounding_radius() + g.bounding_radius() + cfg.gap
        });
        if clear {
            return Some(g);
        }
    }
    None
}

pub fn generate_gland_image(cfg: &SynthConfig, seed: u64) -> Result<SynthSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wanted = rng.random_range(cfg.glands_min..=cfg.glands_max);
    let mut glands: Vec<GlandSpec> = Vec::with_capacity(wanted);
    while glands.len() < wanted {
        match place(cfg, &glands, &mut rng) {
            Some(mut g) => {
                let lb = rng.random_range(cfg.border_lum[0]..=cfg.border_lum[1]);
                let li = rng.random_range(cfg.interior_lum[0]..=cfg.interior_lum[1]);
                g.border_rgb = tinted(lb, cfg.hue_jitter * 0.5, &mut rng);
                g.interior_rgb = tinted(li, cfg.hue_jitter, &mut rng);
                glands.push(g);
            }
            None => break,
        }
    }
    if glands.is_empty() {
        return Err(Error::SynthFit(format!(
            "no gland fits a {}x{} frame after {} attempts",
            cfg.height, cfg.width, cfg.placement_attempts
        )));
    }
    if glands.len() < wanted {
        log::debug!("placed {} of {wanted} glands", glands.len());
    }

    let (h, w) = (cfg.height, cfg.width);
    let lbg = rng.random_range(cfg.background_lum[0]..=cfg.background_lum[1]);
    let background = tinted(lbg, cfg.hue_jitter * 0.5, &mut rng);
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
    let mut data = vec![0.0; 3 * h * w];
    let mut classes = vec![ProposalMap::BACKGROUND; h * w];
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            let mut rgb = background;
            let mut amp = cfg.speckle;
            for g in &glands {
                let rho = g.rho(r, c);
                if rho <= 1.0 {
                    classes[p] = ProposalMap::INTERIOR;
                    rgb = g.interior_rgb;
                    amp = cfg.texture;
                    break;
                }
                if rho <= g.scale() {
                    classes[p] = ProposalMap::BORDER;
                    rgb = g.border_rgb;
                    amp = cfg.texture;
                    break;
                }
            }
            let t = if amp > 0.0 {
                rng.random_range(-amp..=amp)
            } else {
                0.0
            };
            for (ch, base) in rgb.iter().enumerate() {
                let n = if cfg.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                data[ch * h * w + p] = (base + t + n).clamp(0.0, 1.0);
            }
        }
    }
    let gt_3class = ProposalMap::new(h, w, classes)?;
    Ok(SynthSample {
        image: Image::new(h, w, data)?,
        gt_mask: gt_3class.gland_mask(),
        gt_3class,
        glands,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub name: String,
    pub image: String,
    pub gt: String,
    pub gt3: String,
    pub seed: u64,
    pub glands: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub config: SynthConfig,
    pub items: Vec<ManifestItem>,
}

/// Write `n` samples under `dir` (`images/`, `gt/`, `gt3/`, `manifest.json`).
/// Item `i` uses seed `seed + i`.
pub fn generate_dataset(
    dir: &Path,
    n: usize,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<SynthManifest> {
    cfg.validate()?;
    for sub in ["images", "gt", "gt3"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let item_seed = seed.wrapping_add(i as u64);
        let sample = generate_gland_image(cfg, item_seed)?;
        let name = format!("{i:03}.png");
        save_image(&sample.image, dir.join("images").join(&name))?;
        save_mask(&sample.gt_mask, dir.join("gt").join(&name))?;
        save_label_map(sample.gt_3class.as_label_map(), dir.join("gt3").join(&name))?;
        items.push(ManifestItem {
            image: format!("images/{name}"),
            gt: format!("gt/{name}"),
            gt3: format!("gt3/{name}"),
            name,
            seed: item_seed,
            glands: sample.glands.len(),
        });
    }
    let manifest = SynthManifest {
        seed,
        config: cfg.clone(),
        items,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
