//! Pixel DICE, two-class mIOU and object-level F1 for binary gland masks.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{check_dims, load_mask, Mask};

/// Default IoU a predicted object must exceed to count as a detection.
pub const OBJECT_IOU: f64 = 0.5;

/// Pixel counts of a prediction against ground truth, gland = positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<Confusion> {
    check_dims(gt.dims(), pred.dims())?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `num / den`, or 1 when the class is absent from both masks.
fn ratio_or_one(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn dice(&self) -> f64 {
        ratio_or_one(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn iou_gland(&self) -> f64 {
        ratio_or_one(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn iou_background(&self) -> f64 {
        ratio_or_one(self.tn, self.tn + self.fp + self.fn_)
    }

    pub fn miou(&self) -> f64 {
        (self.iou_gland() + self.iou_background()) / 2.0
    }
}

/// `2·TP / (2·TP + FP + FN)`, 1 for two empty masks.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(confusion(pred, gt)?.dice())
}

/// Mean of gland and background IoU.
pub fn miou(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(confusion(pred, gt)?.miou())
}

/// 4-connected components in raster order of their first pixel. Returns a
/// per-pixel component id (`u32::MAX` off the mask) and the count.
pub fn components(mask: &Mask) -> (Vec<u32>, usize) {
    let (h, w) = mask.dims();
    let mut ids = vec![u32::MAX; h * w];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask.data()[start] || ids[start] != u32::MAX {
            continue;
        }
        ids[start] = count;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if mask.data()[j] && ids[j] == u32::MAX {
                    ids[j] = count;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        count += 1;
    }
    (ids, count as usize)
}

/// Detection F1 over 4-connected objects. Candidate pairs are taken in
/// descending IoU order (ties by predicted then ground-truth index), each
/// object is used at most once, and a pair counts when its IoU exceeds
/// `iou_threshold`.
pub fn object_f1(pred: &Mask, gt: &Mask, iou_threshold: f64) -> Result<f64> {
    check_dims(gt.dims(), pred.dims())?;
    if !(0.0..1.0).contains(&iou_threshold) {
        return Err(Error::InvalidArgument(format!(
            "IoU threshold {iou_threshold} outside [0, 1)"
        )));
    }
    let (pred_ids, n_pred) = components(pred);
    let (gt_ids, n_gt) = components(gt);
    match (n_pred, n_gt) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let mut pred_area = vec![0usize; n_pred];
    let mut gt_area = vec![0usize; n_gt];
    let mut overlap: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (&p, &g) in pred_ids.iter().zip(&gt_ids) {
        if p != u32::MAX {
            pred_area[p as usize] += 1;
        }
        if g != u32::MAX {
            gt_area[g as usize] += 1;
        }
        if p != u32::MAX && g != u32::MAX {
            *overlap.entry((p, g)).or_default() += 1;
        }
    }
    let mut pairs: Vec<(f64, u32, u32)> = overlap
        .into_iter()
        .map(|((p, g), inter)| {
            let union = pred_area[p as usize] + gt_area[g as usize] - inter;
            (inter as f64 / union as f64, p, g)
        })
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_used = vec![false; n_pred];
    let mut gt_used = vec![false; n_gt];
    let mut matches = 0usize;
    for (iou, p, g) in pairs {
        if iou <= iou_threshold {
            break;
        }
        if pred_used[p as usize] || gt_used[g as usize] {
            continue;
        }
        pred_used[p as usize] = true;
        gt_used[g as usize] = true;
        matches += 1;
    }
    if matches == 0 {
        return Ok(0.0);
    }
    let precision = matches as f64 / n_pred as f64;
    let recall = matches as f64 / n_gt as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image: String,
    pub f1: f64,
    pub dice: f64,
    pub miou: f64,
}

impl ImageMetrics {
    pub fn compute(image: impl Into<String>, pred: &Mask, gt: &Mask) -> Result<Self> {
        let c = confusion(pred, gt)?;
        Ok(Self {
            image: image.into(),
            f1: object_f1(pred, gt, OBJECT_IOU)?,
            dice: c.dice(),
            miou: c.miou(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Sorted by image name.
    pub images: Vec<ImageMetrics>,
    pub mean_f1: f64,
    pub mean_dice: f64,
    pub mean_miou: f64,
    pub count: usize,
    /// Identifies the configuration that produced the predictions.
    pub config_fingerprint: String,
}

/// Per-image metrics and their arithmetic means, ordered by image name.
pub fn evaluate_dataset(
    items: impl IntoIterator<Item = (String, Mask, Mask)>,
    config_fingerprint: impl Into<String>,
) -> Result<EvalReport> {
    let mut images = items
        .into_iter()
        .map(|(name, pred, gt)| ImageMetrics::compute(name, &pred, &gt))
        .collect::<Result<Vec<_>>>()?;
    images.sort_by(|a, b| a.image.cmp(&b.image));
    if images.is_empty() {
        return Err(Error::InvalidArgument("no images to evaluate".into()));
    }
    if let Some(dup) = images.windows(2).find(|w| w[0].image == w[1].image) {
        return Err(Error::InvalidArgument(format!(
            "duplicate image {}",
            dup[0].image
        )));
    }
    let n = images.len() as f64;
    let mean = |f: fn(&ImageMetrics) -> f64| images.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        mean_f1: mean(|m| m.f1),
        mean_dice: mean(|m| m.dice),
        mean_miou: mean(|m| m.miou),
        count: images.len(),
        config_fingerprint: config_fingerprint.into(),
        images,
    })
}

/// PNG file names in `dir`, sorted.
pub(crate) fn png_names(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Evaluate every ground-truth mask in `gt_dir` against the same-named
/// prediction in `pred_dir`.
pub fn evaluate_dirs(
    pred_dir: &Path,
    gt_dir: &Path,
    config_fingerprint: impl Into<String>,
) -> Result<EvalReport> {
    let names = png_names(gt_dir)?;
    if !pred_dir.is_dir() {
        return Err(Error::MissingFile(pred_dir.to_path_buf()));
    }
    let items = names
        .into_iter()
        .map(|name| {
            let pred = load_mask(pred_dir.join(&name))?;
            let gt = load_mask(gt_dir.join(&name))?;
            Ok((name, pred, gt))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_dataset(items, config_fingerprint)
}

impl EvalReport {
    /// Columns `image, f1, dice, miou`, closed by a `MEAN` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["image", "f1", "dice", "miou"])?;
        let rows = self
            .images
            .iter()
            .map(|m| (m.image.as_str(), m.f1, m.dice, m.miou))
            .chain([("MEAN", self.mean_f1, self.mean_dice, self.mean_miou)]);
        for (name, f1, dice, miou) in rows {
            w.write_record([name, &f1.to_string(), &dice.to_string(), &miou.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> Mask {
        let w = rows[0].len();
        let data = rows
            .iter()
            .flat_map(|r| r.chars().map(|c| c == '#'))
            .collect();
        Mask::new(rows.len(), w, data).unwrap()
    }

    #[test]
    fn confusion_examples() {
        let ones = mask(&["##", "##"]);
        let zeros = mask(&["..", ".."]);
        let c = confusion(&ones, &ones).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (4, 0, 0, 0));
        let c = confusion(&ones, &zeros).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (0, 4, 0, 0));
        let c = confusion(&mask(&["##", ".."]), &mask(&["#.", "#."])).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (1, 1, 1, 1));
        assert!(confusion(&ones, &mask(&["###"])).is_err());
    }

    #[test]
    fn dice_and_miou_examples() {
        let top = mask(&["##", ".."]);
        let left = mask(&["#.", "#."]);
        assert_eq!(dice(&top, &top).unwrap(), 1.0);
        assert_eq!(dice(&top, &mask(&["..", "##"])).unwrap(), 0.0);
        assert_eq!(dice(&top, &left).unwrap(), 0.5);
        let empty = mask(&["..", ".."]);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(miou(&top, &top).unwrap(), 1.0);
        assert_eq!(miou(&mask(&["##", "##"]), &top).unwrap(), 0.25);
        assert_eq!(miou(&mask(&["..", "##"]), &top).unwrap(), 0.0);
    }

    #[test]
    fn object_f1_examples() {
        let one = mask(&["##..", "##..", "....", "...."]);
        assert_eq!(object_f1(&one, &one, OBJECT_IOU).unwrap(), 1.0);
        let empty = Mask::empty(4, 4);
        assert_eq!(object_f1(&empty, &one, OBJECT_IOU).unwrap(), 0.0);
        assert_eq!(object_f1(&empty, &empty, OBJECT_IOU).unwrap(), 1.0);
        let two = mask(&["##..", "##..", "....", "...#"]);
        assert!((object_f1(&one, &two, OBJECT_IOU).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn object_match_needs_iou_above_threshold() {
        // IoU exactly 0.5 does not match
        let pred = mask(&["##.."]);
        let gt = mask(&["#..."]);
        assert_eq!(object_f1(&pred, &gt, OBJECT_IOU).unwrap(), 0.0);
        assert_eq!(object_f1(&pred, &gt, 0.4).unwrap(), 1.0);
        assert!(object_f1(&pred, &gt, 1.0).is_err());
    }

    #[test]
    fn greedy_matching_takes_best_pair_first() {
        // the wide prediction overlaps both gt objects; the better pair wins
        let pred = mask(&["#####."]);
        let gt = mask(&["###.##"]);
        // IoUs: 3/5 with the left object, 1/6 with the right one
        let f1 = object_f1(&pred, &gt, OBJECT_IOU).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn components_are_four_connected() {
        let (ids, n) = components(&mask(&["#.", ".#"]));
        assert_eq!(n, 2);
        assert_eq!(ids, vec![0, u32::MAX, u32::MAX, 1]);
    }

    #[test]
    fn dataset_means_and_ordering() {
        let a = mask(&["##", ".."]);
        let b = mask(&["#.", "#."]);
        let items = vec![
            ("b.png".to_string(), a.clone(), b.clone()),
            ("a.png".to_string(), a.clone(), a.clone()),
        ];
        let r = evaluate_dataset(items.clone(), "fp").unwrap();
        assert_eq!(r.images[0].image, "a.png");
        assert_eq!(r.count, 2);
        assert_eq!(r.mean_dice, (1.0 + 0.5) / 2.0);
        let reversed = evaluate_dataset(items.into_iter().rev(), "fp").unwrap();
        assert_eq!(r, reversed);
        assert!(evaluate_dataset(Vec::new(), "fp").is_err());
    }

    #[test]
    fn csv_has_mean_row() {
        let a = mask(&["##", ".."]);
        let r = evaluate_dataset(vec![("x.png".into(), a.clone(), a)], "").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        r.write_csv(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines, ["image,f1,dice,miou", "x.png,1,1,1", "MEAN,1,1,1"]);
    }
}
