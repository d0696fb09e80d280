use serde::{Deserialize, Serialize};

use super::query::resolve;
use super::scene::Scene;
use crate::geometry::{iou, BinaryMask, Bbox};

/// Local stand-in for a promptable segmenter: turns boxes (or, without
/// boxes, a phrase) into a mask on the scene grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskOracle {
    /// Probability of flipping each cell.
    pub noise: f64,
    pub seed: u64,
}

impl Default for MaskOracle {
    fn default() -> Self {
        Self { noise: 0.0, seed: 0 }
    }
}

/// Boxes this close to an object's box snap to its exact mask.
const SNAP_IOU: f64 = 0.5;

impl MaskOracle {
    pub fn new(noise: f64, seed: u64) -> Self {
        Self { noise, seed }
    }

    pub fn mask_from(&self, scene: &Scene, boxes: &[Bbox], phrase: &str) -> BinaryMask {
        let (gw, gh) = scene.grid();
        let mut mask = BinaryMask::empty(gw, gh);
        let mut or_into = |m: &BinaryMask| {
            for y in 0..gh {
                for x in 0..gw {
                    if m.get(x, y) {
                        mask.set(x, y, true);
                    }
                }
            }
        };
        if boxes.is_empty() {
            for id in resolve(scene, phrase).unwrap_or_default() {
                if let Some(o) = scene.object(id) {
                    or_into(&o.mask);
                }
            }
        } else {
            for b in boxes {
                let snapped = scene
                    .objects
                    .iter()
                    .map(|o| (iou(&o.answer.bbox, b), o))
                    .filter(|(v, _)| *v >= SNAP_IOU)
                    .max_by(|a, b| a.0.total_cmp(&b.0));
                match snapped {
                    Some((_, o)) => or_into(&o.mask),
                    None => {
                        let mut m = BinaryMask::empty(gw, gh);
                        m.fill_ellipse(b, scene.image_w, scene.image_h);
                        or_into(&m);
                    }
                }
            }
        }
        if self.noise > 0.0 {
            let key = fnv1a(scene.seed, boxes, phrase) ^ self.seed;
            for y in 0..gh {
                for x in 0..gw {
                    let h = fnv_mix(key, (y * gw + x) as u64);
                    let u = (h >> 11) as f64 / (1u64 << 53) as f64;
                    if u < self.noise {
                        let v = mask.get(x, y);
                        mask.set(x, y, !v);
                    }
                }
            }
        }
        mask
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

fn fnv_bytes(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn fnv1a(scene_seed: u64, boxes: &[Bbox], phrase: &str) -> u64 {
    let mut h = fnv_bytes(FNV_OFFSET, &scene_seed.to_le_bytes());
    for b in boxes {
        for c in b.coords() {
            h = fnv_bytes(h, &c.to_bits().to_le_bytes());
        }
    }
    fnv_bytes(h, phrase.as_bytes())
}

fn fnv_mix(key: u64, i: u64) -> u64 {
    let h = fnv_bytes(key, &i.to_le_bytes());
    // Final avalanche so neighbouring cells decorrelate.
    let h = (h ^ (h >> 33)).wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^ (h >> 33)
}
