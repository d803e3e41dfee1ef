//! Stage drivers shared by the command-line tool and the test suites.
//!
//! Each stage reads and writes plain files and leaves a `config.txt`
//! snapshot of the [`RunConfig`] next to its artifacts. [`run_pipeline`]
//! chains the stages under one working directory and keeps a
//! `manifest.json` with per-stage timings, seeds and artifact checksums,
//! rewritten after every stage so a failed run still says where it stopped.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::imaging::{
    load_image, load_label_map, load_mask, save_label_map, save_mask, slice_patches, Image, Mask,
    Patch, ProposalMap,
};
use crate::metrics::{evaluate_dataset, miou, EvalReport};
use crate::msg::{
    predict, train_segmentation, EpochLog, Prediction, SegmentationModel, TrainOutcome,
};
use crate::spm::{mine_proposal, MinedProposal};
use crate::synth::generate_dataset;

pub const CONFIG_SNAPSHOT: &str = "config.txt";
pub const MANIFEST: &str = "manifest.json";
pub const REPORT: &str = "report.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)? + "\n")
}

/// Store the exact configuration next to the artifacts it produced.
pub fn write_snapshot(dir: &Path, cfg: &RunConfig) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join(CONFIG_SNAPSHOT), cfg.to_text())
}

fn stem(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(s, _)| s)
}

/// Raster file names (`.png`, `.ppm`) in `dir`, sorted.
pub fn list_images(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let lower = name.to_ascii_lowercase();
        if lower.ends_with(".png") || lower.ends_with(".ppm") {
            names.push(name);
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no .png or .ppm images in {}",
            dir.display()
        )));
    }
    Ok(names)
}

/// Named images in file-name order.
pub fn load_images(dir: &Path) -> Result<Vec<(String, Image)>> {
    list_images(dir)?
        .into_iter()
        .map(|name| {
            let img = load_image(dir.join(&name))?;
            Ok((name, img))
        })
        .collect()
}

/// `<stem>.png` masks for each image name.
pub fn load_masks(dir: &Path, names: &[String]) -> Result<Vec<Mask>> {
    names
        .iter()
        .map(|n| load_mask(dir.join(format!("{}.png", stem(n)))))
        .collect()
}

/// `<stem>.png` proposal maps for each image name.
pub fn load_proposals(dir: &Path, names: &[String]) -> Result<Vec<ProposalMap>> {
    names
        .iter()
        .map(|n| {
            let map = load_label_map(dir.join(format!("{}.png", stem(n))), ProposalMap::CLASSES)?;
            ProposalMap::from_label_map(map)
        })
        .collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// What the proposal miner decided for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpmSidecar {
    pub image: String,
    pub seed: u64,
    pub kmeans_seed: u64,
    pub loss_curve: Vec<f64>,
    pub border_region: usize,
    /// Mean gray level of each region, `null` for empty regions.
    pub mean_gray: Vec<Option<f64>>,
    pub region_pixels: Vec<usize>,
    pub degenerate: bool,
}

/// Mine proposals for every image, images in parallel.
pub fn mine_images(images: &[(String, Image)], cfg: &RunConfig) -> Result<Vec<MinedProposal>> {
    cfg.spm.validate()?;
    images
        .par_iter()
        .map(|(name, img)| {
            let mined = mine_proposal(img, &cfg.spm, cfg.gray_invert)?;
            info!("spm {name}: border region {}", mined.border_region);
            Ok(mined)
        })
        .collect()
}

/// Mine every image in `in_dir` and write `<stem>.png` proposal maps and
/// `<stem>.json` sidecars to `out_dir`.
pub fn spm_stage(
    in_dir: &Path,
    out_dir: &Path,
    cfg: &RunConfig,
) -> Result<Vec<(String, ProposalMap)>> {
    let images = load_images(in_dir)?;
    let mined = mine_images(&images, cfg)?;
    write_snapshot(out_dir, cfg)?;
    let mut out = Vec::with_capacity(images.len());
    for ((name, _), m) in images.iter().zip(mined) {
        let s = stem(name);
        save_label_map(m.proposal.as_label_map(), out_dir.join(format!("{s}.png")))?;
        let sidecar = SpmSidecar {
            image: name.clone(),
            seed: cfg.spm.seed,
            kmeans_seed: cfg.spm.kmeans_seed,
            loss_curve: m.loss_curve,
            border_region: m.border_region,
            mean_gray: m.mean_gray,
            region_pixels: m.regions.counts,
            degenerate: m.regions.degenerate,
        };
        write_json(&out_dir.join(format!("{s}.json")), &sidecar)?;
        out.push((name.clone(), m.proposal));
    }
    Ok(out)
}

/// Slice every image and its proposal into training patches.
pub fn training_patches(
    images: &[(String, Image)],
    proposals: &[ProposalMap],
    cfg: &RunConfig,
) -> Result<Vec<Patch>> {
    if images.len() != proposals.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images but {} proposals",
            images.len(),
            proposals.len()
        )));
    }
    let mut patches = Vec::new();
    for ((_, img), p) in images.iter().zip(proposals) {
        patches.extend(slice_patches(img, p, cfg.msg.patch, cfg.msg.stride)?);
    }
    Ok(patches)
}

fn write_train_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut text = String::new();
    for e in log {
        text += &serde_json::to_string(e)?;
        text.push('\n');
    }
    write_file(path, text)
}

/// Train on `<images_dir>` with same-stem proposals from `proposals_dir`.
/// The checkpoint goes to `model_path`; the JSON-lines epoch log and the
/// config snapshot go next to it.
pub fn train_stage(
    images_dir: &Path,
    proposals_dir: &Path,
    model_path: &Path,
    cfg: &RunConfig,
) -> Result<TrainOutcome> {
    cfg.msg.validate()?;
    let images = load_images(images_dir)?;
    let names: Vec<String> = images.iter().map(|(n, _)| n.clone()).collect();
    let proposals = load_proposals(proposals_dir, &names)?;
    let patches = training_patches(&images, &proposals, cfg)?;
    info!("training on {} patches", patches.len());
    let outcome = train_segmentation(&patches, &cfg.msg)?;
    let dir = model_path.parent().unwrap_or(Path::new("."));
    write_snapshot(dir, cfg)?;
    outcome.model.save(model_path)?;
    write_train_log(&dir.join(TRAIN_LOG), &outcome.log)?;
    Ok(outcome)
}

/// Predict every image with the configured window geometry.
pub fn predict_images(
    model: &SegmentationModel,
    images: &[(String, Image)],
    cfg: &RunConfig,
) -> Result<Vec<Prediction>> {
    let stride = cfg.effective_predict_stride();
    images
        .par_iter()
        .map(|(_, img)| predict(img, model, cfg.msg.patch, stride))
        .collect()
}

fn write_predictions(
    out_dir: &Path,
    names: &[String],
    preds: &[Prediction],
    cfg: &RunConfig,
) -> Result<()> {
    write_snapshot(out_dir, cfg)?;
    let (labels, masks) = (out_dir.join("labels"), out_dir.join("masks"));
    create_dir(&labels)?;
    create_dir(&masks)?;
    for (name, p) in names.iter().zip(preds) {
        let file = format!("{}.png", stem(name));
        save_label_map(p.labels.as_label_map(), labels.join(&file))?;
        save_mask(&p.mask, masks.join(&file))?;
    }
    Ok(())
}

/// Predict every image in `in_dir`, writing `labels/` (3-class indexed
/// PNG) and `masks/` (binary gland masks) under `out_dir`.
pub fn predict_stage(
    model_path: &Path,
    in_dir: &Path,
    out_dir: &Path,
    cfg: &RunConfig,
) -> Result<Vec<Prediction>> {
    if !model_path.is_file() {
        return Err(Error::MissingFile(model_path.to_path_buf()));
    }
    let model = SegmentationModel::load(model_path)?;
    let images = load_images(in_dir)?;
    let preds = predict_images(&model, &images, cfg)?;
    let names: Vec<String> = images.into_iter().map(|(n, _)| n).collect();
    write_predictions(out_dir, &names, &preds, cfg)?;
    Ok(preds)
}

/// Score predicted masks against same-named ground truth. A prediction
/// directory written by [`predict_stage`] may be passed directly.
pub fn eval_stage(
    pred_dir: &Path,
    gt_dir: &Path,
    out_json: &Path,
    out_csv: Option<&Path>,
    cfg: &RunConfig,
) -> Result<EvalReport> {
    let masks = pred_dir.join("masks");
    let pred_dir = if masks.is_dir() {
        masks.as_path()
    } else {
        pred_dir
    };
    let report = crate::metrics::evaluate_dirs(pred_dir, gt_dir, cfg.fingerprint())?;
    let dir = out_json.parent().unwrap_or(Path::new("."));
    write_snapshot(dir, cfg)?;
    report.write_json(out_json)?;
    if let Some(csv) = out_csv {
        report.write_csv(csv)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the working directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_fingerprint: String,
    pub seeds: BTreeMap<String, u64>,
    pub stages: Vec<StageRecord>,
    pub failed_stage: Option<String>,
    pub artifacts: Vec<Artifact>,
}

/// Every file under `root` except the manifest itself, sorted by path.
fn checksums(root: &Path) -> Result<Vec<Artifact>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(root).unwrap_or(&path);
            let rel = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            if rel == MANIFEST {
                continue;
            }
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            out.push(Artifact {
                path: rel,
                sha256: sha256_hex(&bytes),
            });
        }
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

/// Times stages and keeps the run manifest current on disk.
struct Recorder {
    root: PathBuf,
    manifest: RunManifest,
}

impl Recorder {
    fn new(root: &Path, command: &str, cfg: &RunConfig) -> Result<Self> {
        create_dir(root)?;
        write_snapshot(root, cfg)?;
        let seeds = [
            ("data.train_seed", cfg.data.train_seed),
            ("data.test_seed", cfg.data.test_seed),
            ("spm.seed", cfg.spm.seed),
            ("spm.kmeans_seed", cfg.spm.kmeans_seed),
            ("msg.seed", cfg.msg.seed),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let rec = Self {
            root: root.to_path_buf(),
            manifest: RunManifest {
                command: command.into(),
                config_fingerprint: cfg.fingerprint(),
                seeds,
                stages: Vec::new(),
                failed_stage: None,
                artifacts: Vec::new(),
            },
        };
        rec.flush()?;
        Ok(rec)
    }

    fn flush(&self) -> Result<()> {
        write_json(&self.root.join(MANIFEST), &self.manifest)
    }

    fn stage<T>(&mut self, name: &str, run: impl FnOnce() -> Result<T>) -> Result<T> {
        info!("stage {name}");
        let start = Instant::now();
        let result = run();
        let seconds = start.elapsed().as_secs_f64();
        let error = result.as_ref().err().map(ToString::to_string);
        let status = if error.is_some() {
            self.manifest.failed_stage = Some(name.into());
            StageStatus::Failed
        } else {
            StageStatus::Ok
        };
        self.manifest.stages.push(StageRecord {
            name: name.into(),
            status,
            seconds,
            error,
        });
        self.manifest.artifacts = checksums(&self.root)?;
        self.flush()?;
        result.map_err(|source| Error::Stage {
            stage: name.into(),
            source: Box::new(source),
        })
    }
}

/// Metrics of the trained model and of the two reference predictors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config_fingerprint: String,
    pub msg: EvalReport,
    /// Raw proposals used as predictions.
    pub spm: EvalReport,
    /// The untrained network.
    pub random_init: EvalReport,
}

/// Images, proposals and ground truth of one split.
#[derive(Debug, Clone)]
pub struct Split {
    pub images: Vec<(String, Image)>,
    pub proposals: Vec<ProposalMap>,
    pub gt: Vec<Mask>,
}

impl Split {
    pub fn names(&self) -> Vec<String> {
        self.images.iter().map(|(n, _)| n.clone()).collect()
    }
}

fn prepare(rec: &mut Recorder, workdir: &Path, cfg: &RunConfig) -> Result<(Split, Split)> {
    let train_dir = workdir.join(&cfg.data.train_dir);
    let test_dir = workdir.join(&cfg.data.test_dir);
    if cfg.data.synth {
        rec.stage("synth", || {
            for (dir, n, seed) in [
                (&train_dir, cfg.data.train_count, cfg.data.train_seed),
                (&test_dir, cfg.data.test_count, cfg.data.test_seed),
            ] {
                generate_dataset(dir, n, &cfg.synth, seed)?;
                write_snapshot(dir, cfg)?;
            }
            Ok(())
        })?;
    }
    rec.stage("spm", || {
        let mut splits = Vec::new();
        for (data, name) in [(&train_dir, "train"), (&test_dir, "test")] {
            let mined = spm_stage(
                &data.join("images"),
                &workdir.join("proposals").join(name),
                cfg,
            )?;
            let names: Vec<String> = mined.iter().map(|(n, _)| n.clone()).collect();
            let gt = load_masks(&data.join("gt"), &names)?;
            let images = load_images(&data.join("images"))?;
            splits.push(Split {
                images,
                proposals: mined.into_iter().map(|(_, p)| p).collect(),
                gt,
            });
        }
        let test = splits.pop().expect("two splits");
        let train = splits.pop().expect("two splits");
        Ok((train, test))
    })
}

fn report_of(split: &Split, masks: impl IntoIterator<Item = Mask>, fp: &str) -> Result<EvalReport> {
    let items = split
        .names()
        .into_iter()
        .zip(masks)
        .zip(split.gt.iter().cloned())
        .map(|((n, p), g)| (format!("{}.png", stem(&n)), p, g));
    evaluate_dataset(items, fp)
}

/// Synthesize (optionally), mine, train, predict and evaluate under
/// `workdir`. On failure the manifest names the stage and everything
/// written so far is kept.
pub fn run_pipeline(workdir: &Path, cfg: &RunConfig) -> Result<PipelineReport> {
    cfg.validate()?;
    let mut rec = Recorder::new(workdir, "pipeline", cfg)?;
    let (train, test) = prepare(&mut rec, workdir, cfg)?;
    let model_path = workdir.join("model").join("model.mssg");
    let outcome = rec.stage("train", || {
        let patches = training_patches(&train.images, &train.proposals, cfg)?;
        let outcome = train_segmentation(&patches, &cfg.msg)?;
        let dir = model_path.parent().expect("model dir");
        write_snapshot(dir, cfg)?;
        outcome.model.save(&model_path)?;
        write_train_log(&dir.join(TRAIN_LOG), &outcome.log)?;
        Ok(outcome)
    })?;
    let (trained, untrained) = rec.stage("predict", || {
        let names = test.names();
        let trained = predict_images(&outcome.model, &test.images, cfg)?;
        write_predictions(
            &workdir.join("predictions").join("msg"),
            &names,
            &trained,
            cfg,
        )?;
        let untrained = predict_images(&cfg.msg.new_model(), &test.images, cfg)?;
        write_predictions(
            &workdir.join("predictions").join("random_init"),
            &names,
            &untrained,
            cfg,
        )?;
        Ok((trained, untrained))
    })?;
    rec.stage("eval", || {
        let fp = cfg.fingerprint();
        let report = PipelineReport {
            msg: report_of(&test, trained.into_iter().map(|p| p.mask), &fp)?,
            spm: report_of(
                &test,
                test.proposals.iter().map(ProposalMap::gland_mask),
                &fp,
            )?,
            random_init: report_of(&test, untrained.into_iter().map(|p| p.mask), &fp)?,
            config_fingerprint: fp,
        };
        let dir = workdir.join("eval");
        write_snapshot(&dir, cfg)?;
        for (name, r) in [
            ("msg", &report.msg),
            ("spm", &report.spm),
            ("random_init", &report.random_init),
        ] {
            r.write_json(&dir.join(format!("{name}.json")))?;
            r.write_csv(&dir.join(format!("{name}.csv")))?;
        }
        write_json(&workdir.join(REPORT), &report)?;
        info!(
            "held-out mIOU: msg {:.4}, spm {:.4}, random init {:.4}",
            report.msg.mean_miou, report.spm.mean_miou, report.random_init.mean_miou
        );
        Ok(report)
    })
}

/// One training variant of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub use_variation: bool,
    pub use_omission: bool,
}

impl Variant {
    /// Baseline first, then variation only, omission only, both.
    pub const ALL: [Variant; 4] = [
        Variant {
            use_variation: false,
            use_omission: false,
        },
        Variant {
            use_variation: true,
            use_omission: false,
        },
        Variant {
            use_variation: false,
            use_omission: true,
        },
        Variant {
            use_variation: true,
            use_omission: true,
        },
    ];

    pub fn label(self) -> &'static str {
        match (self.use_variation, self.use_omission) {
            (false, false) => "none",
            (true, false) => "V",
            (false, true) => "O",
            (true, true) => "V+O",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub use_variation: bool,
    pub use_omission: bool,
    /// Held-out mean mIOU for each seed, in seed order.
    pub miou_per_seed: Vec<f64>,
    pub miou: f64,
    /// `miou` minus the baseline row's `miou`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub config_fingerprint: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == label)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["variant", "use_variation", "use_omission", "miou", "delta"])?;
        for r in &self.rows {
            w.write_record([
                r.variant.clone(),
                r.use_variation.to_string(),
                r.use_omission.to_string(),
                r.miou.to_string(),
                r.delta.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Train every variant for every seed on the same proposals and score the
/// held-out split.
pub fn ablation_table(train: &Split, test: &Split, cfg: &RunConfig) -> Result<AblationTable> {
    let patches = training_patches(&train.images, &train.proposals, cfg)?;
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let mut per_seed = Vec::with_capacity(cfg.ablate_seeds.len());
        for &seed in &cfg.ablate_seeds {
            let mut msg = cfg.msg.clone();
            msg.use_variation = variant.use_variation;
            msg.use_omission = variant.use_omission;
            msg.seed = seed;
            let model = train_segmentation(&patches, &msg)?.model;
            let preds = predict_images(&model, &test.images, cfg)?;
            let mut total = 0.0;
            for (p, g) in preds.iter().zip(&test.gt) {
                total += miou(&p.mask, g)?;
            }
            let score = total / test.gt.len() as f64;
            info!("ablation {} seed {seed}: mIOU {score:.4}", variant.label());
            per_seed.push(score);
        }
        let miou = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        rows.push(AblationRow {
            variant: variant.label().into(),
            use_variation: variant.use_variation,
            use_omission: variant.use_omission,
            miou_per_seed: per_seed,
            miou,
            delta: 0.0,
        });
    }
    let base = rows[0].miou;
    for r in &mut rows {
        r.delta = r.miou - base;
    }
    Ok(AblationTable {
        config_fingerprint: cfg.fingerprint(),
        seeds: cfg.ablate_seeds.clone(),
        rows,
    })
}

/// Mine proposals once, then run [`ablation_table`]; writes
/// `ablation/ablation.json` and `ablation/ablation.csv`.
pub fn run_ablation(workdir: &Path, cfg: &RunConfig) -> Result<AblationTable> {
    cfg.validate()?;
    let mut rec = Recorder::new(workdir, "ablate", cfg)?;
    let (train, test) = prepare(&mut rec, workdir, cfg)?;
    rec.stage("ablate", || {
        let table = ablation_table(&train, &test, cfg)?;
        let dir = workdir.join("ablation");
        write_snapshot(&dir, cfg)?;
        write_json(&dir.join("ablation.json"), &table)?;
        table.write_csv(&dir.join("ablation.csv"))?;
        Ok(table)
    })
}
