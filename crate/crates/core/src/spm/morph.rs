//! Cue-based region selection and interior filling.

use std::collections::VecDeque;

use super::RegionMap;
use crate::error::{Error, Result};
use crate::imaging::{check_dims, GrayMap, Mask, ProposalMap};

/// The region picked as gland border.
#[derive(Debug, Clone, PartialEq)]
pub struct BorderSelection {
    pub region: usize,
    pub mask: Mask,
    /// Mean gray level per region, `None` for empty regions.
    pub mean_gray: Vec<Option<f64>>,
}

/// Pick the non-empty region with the highest mean gray level (lowest index
/// on exact ties).
pub fn select_border_region(regions: &RegionMap, gray: &GrayMap) -> Result<BorderSelection> {
    let labels = &regions.labels;
    check_dims(labels.dims(), (gray.height(), gray.width()))?;
    let k = labels.classes();
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (&id, &g) in labels.data().iter().zip(gray.data()) {
        sums[id as usize] += g;
        counts[id as usize] += 1;
    }
    let mean_gray: Vec<Option<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (r, m) in mean_gray.iter().enumerate() {
        if let Some(m) = *m {
            if best.is_none_or(|(_, b)| m > b) {
                best = Some((r, m));
            }
        }
    }
    let (region, _) = best.ok_or_else(|| Error::InvalidArgument("every region is empty".into()))?;
    Ok(BorderSelection {
        region,
        mask: labels.mask_of(&[region as u16]),
        mean_gray,
    })
}

/// Non-border pixels that cannot be reached from the image edge through
/// 4-connected non-border pixels.
pub fn fill_interior(border: &Mask) -> Mask {
    let (h, w) = border.dims();
    let mut reached = vec![false; h * w];
    let mut queue = VecDeque::new();
    let seed =
        |r: usize, c: usize, reached: &mut Vec<bool>, queue: &mut VecDeque<(usize, usize)>| {
            let i = r * w + c;
            if !border.get(r, c) && !reached[i] {
                reached[i] = true;
                queue.push_back((r, c));
            }
        };
    for c in 0..w {
        seed(0, c, &mut reached, &mut queue);
        seed(h - 1, c, &mut reached, &mut queue);
    }
    for r in 0..h {
        seed(r, 0, &mut reached, &mut queue);
        seed(r, w - 1, &mut reached, &mut queue);
    }
    while let Some((r, c)) = queue.pop_front() {
        if r > 0 {
            seed(r - 1, c, &mut reached, &mut queue);
        }
        if r + 1 < h {
            seed(r + 1, c, &mut reached, &mut queue);
        }
        if c > 0 {
            seed(r, c - 1, &mut reached, &mut queue);
        }
        if c + 1 < w {
            seed(r, c + 1, &mut reached, &mut queue);
        }
    }
    let data = border
        .data()
        .iter()
        .zip(&reached)
        .map(|(&b, &r)| !b && !r)
        .collect();
    Mask::new(h, w, data).expect("same extent as the border mask")
}

/// Border → 1, interior → 2, everything else → 0.
pub fn assemble_proposal(border: &Mask, interior: &Mask) -> Result<ProposalMap> {
    check_dims(border.dims(), interior.dims())?;
    let overlap = border
        .data()
        .iter()
        .zip(interior.data())
        .filter(|(b, i)| **b && **i)
        .count();
    if overlap > 0 {
        return Err(Error::MaskOverlap(overlap));
    }
    let data = border
        .data()
        .iter()
        .zip(interior.data())
        .map(|(&b, &i)| {
            if b {
                ProposalMap::BORDER
            } else if i {
                ProposalMap::INTERIOR
            } else {
                ProposalMap::BACKGROUND
            }
        })
        .collect();
    ProposalMap::new(border.height(), border.width(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::LabelMap;

    fn ring(n: usize, lo: usize, hi: usize) -> Mask {
        let mut m = Mask::empty(n, n);
        for r in lo..=hi {
            for c in lo..=hi {
                if r == lo || r == hi || c == lo || c == hi {
                    m.set(r, c, true);
                }
            }
        }
        m
    }

    fn regions(h: usize, w: usize, k: usize, ids: Vec<u16>) -> RegionMap {
        RegionMap::from_labels(LabelMap::new(h, w, k, ids).unwrap())
    }

    fn gray(h: usize, w: usize, v: Vec<f64>) -> GrayMap {
        // build through an image: gray = 1 - luma with r = g = b = 1 - v
        let mut data = Vec::new();
        for _ in 0..3 {
            data.extend(v.iter().map(|g| 1.0 - g));
        }
        let img = crate::imaging::Image::new(h, w, data).unwrap();
        crate::imaging::to_gray_level(&img, true)
    }

    #[test]
    fn darker_region_wins() {
        let reg = regions(2, 2, 2, vec![0, 1, 0, 1]);
        let g = gray(2, 2, vec![0.2, 0.7, 0.4, 0.9]);
        let sel = select_border_region(&reg, &g).unwrap();
        assert_eq!(sel.region, 1);
        assert!((sel.mean_gray[1].unwrap() - 0.8).abs() < 1e-12);
        assert!((sel.mean_gray[0].unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(sel.mask.count(), 2);
    }

    #[test]
    fn single_nonempty_region_and_ties() {
        let reg = regions(1, 3, 5, vec![3, 3, 3]);
        let sel = select_border_region(&reg, &gray(1, 3, vec![0.1, 0.2, 0.3])).unwrap();
        assert_eq!(sel.region, 3);
        assert_eq!(sel.mean_gray[0], None);

        let reg = regions(1, 4, 5, vec![2, 4, 0, 1]);
        let sel = select_border_region(&reg, &gray(1, 4, vec![0.5, 0.5, 0.1, 0.2])).unwrap();
        assert_eq!(sel.region, 2);
    }

    #[test]
    fn ring_encloses_interior() {
        let border = ring(7, 1, 5);
        let interior = fill_interior(&border);
        assert_eq!(interior.count(), 9);
        for r in 2..=4 {
            for c in 2..=4 {
                assert!(interior.get(r, c));
            }
        }
    }

    #[test]
    fn open_shapes_have_no_interior() {
        let mut line = Mask::empty(6, 6);
        for c in 0..6 {
            line.set(3, c, true);
        }
        assert_eq!(fill_interior(&line).count(), 0);
        let all = Mask::new(3, 3, vec![true; 9]).unwrap();
        assert_eq!(fill_interior(&all).count(), 0);
    }

    #[test]
    fn diagonal_ring_seals_four_connected_flood() {
        // 8-connected diamond around the centre pixel
        let mut m = Mask::empty(5, 5);
        for (r, c) in [(1, 2), (2, 1), (2, 3), (3, 2)] {
            m.set(r, c, true);
        }
        let interior = fill_interior(&m);
        assert_eq!(interior.count(), 1);
        assert!(interior.get(2, 2));
    }

    #[test]
    fn assemble_classes() {
        let border = ring(7, 1, 5);
        let interior = fill_interior(&border);
        let p = assemble_proposal(&border, &interior).unwrap();
        assert_eq!(p.get(0, 0), ProposalMap::BACKGROUND);
        assert_eq!(p.get(1, 1), ProposalMap::BORDER);
        assert_eq!(p.get(3, 3), ProposalMap::INTERIOR);
        let [n, g, i] = p.histogram();
        assert_eq!((n, g, i), (49 - 25, 16, 9));

        let empty = Mask::empty(4, 4);
        let p = assemble_proposal(&empty, &fill_interior(&empty)).unwrap();
        assert_eq!(p, ProposalMap::background(4, 4));

        assert!(matches!(
            assemble_proposal(&border, &border),
            Err(Error::MaskOverlap(16))
        ));
    }
}
