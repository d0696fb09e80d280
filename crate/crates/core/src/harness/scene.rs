use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::geometry::{mask_or, BinaryMask, Bbox, Point};
use crate::structured_output::ObjectAnswer;

pub const CLASSES: [&str; 8] = ["person", "cup", "dog", "car", "chair", "bottle", "boat", "flower"];
pub const COLORS: [&str; 6] = ["red", "blue", "green", "yellow", "white", "black"];
/// Only people carry a pose.
pub const POSES: [&str; 2] = ["holding hand", "standing"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: usize,
    pub class: String,
    pub color: String,
    pub pose: Option<String>,
    pub answer: ObjectAnswer,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub image_w: f64,
    pub image_h: f64,
    pub objects: Vec<SceneObject>,
    /// Objects sharing their class with at least one other object.
    pub distractors: usize,
}

impl Scene {
    pub fn side(&self, obj: &SceneObject) -> Side {
        let b = obj.answer.bbox;
        if (b.x1 + b.x2) / 2.0 < self.image_w / 2.0 {
            Side::Left
        } else {
            Side::Right
        }
    }

    pub fn object(&self, id: usize) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn answers(&self, ids: &[usize]) -> Vec<ObjectAnswer> {
        ids.iter().filter_map(|&id| self.object(id)).map(|o| o.answer).collect()
    }

    pub fn grid(&self) -> (usize, usize) {
        self.objects
            .first()
            .map_or((0, 0), |o| (o.mask.width(), o.mask.height()))
    }

    /// Union of the given objects' masks; all-empty for no ids.
    pub fn union_mask(&self, ids: &[usize]) -> BinaryMask {
        let (w, h) = self.grid();
        let masks: Vec<BinaryMask> = ids
            .iter()
            .filter_map(|&id| self.object(id))
            .map(|o| o.mask.clone())
            .collect();
        mask_or(&masks).unwrap_or_else(|_| BinaryMask::empty(w, h))
    }

    pub fn of_class<'a>(&'a self, class: &'a str) -> impl Iterator<Item = &'a SceneObject> + 'a {
        self.objects.iter().filter(move |o| o.class == class)
    }

    /// Checks the scene invariants; returns a description of the first
    /// violation.
    pub fn check(&self) -> Result<(), String> {
        let mut ids: Vec<usize> = self.objects.iter().map(|o| o.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.objects.len() {
            return Err("duplicate object ids".into());
        }
        for o in &self.objects {
            let b = o.answer.bbox;
            if !(b.x1 < b.x2 && b.y1 < b.y2) || !b.within_image(self.image_w, self.image_h) {
                return Err(format!("object {} has an invalid box", o.id));
            }
            if !b.contains(o.answer.point) {
                return Err(format!("object {} point lies outside its box", o.id));
            }
            if o.mask.is_empty() {
                return Err(format!("object {} has an empty mask", o.id));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image_w: f64,
    pub image_h: f64,
    pub grid_w: usize,
    pub grid_h: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Probability that a scene contains several objects of one class.
    pub duplicate_prob: f64,
    pub min_size: f64,
    pub max_size: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_w: 640.0,
            image_h: 480.0,
            grid_w: 64,
            grid_h: 48,
            min_objects: 2,
            max_objects: 5,
            duplicate_prob: 0.8,
            min_size: 40.0,
            max_size: 200.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidConfig(m));
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad(format!("object count range [{}, {}] is empty or starts at 0", self.min_objects, self.max_objects));
        }
        if self.grid_w == 0 || self.grid_h == 0 {
            return bad("mask grid must be non-empty".into());
        }
        if !(0.0..=1.0).contains(&self.duplicate_prob) {
            return bad(format!("duplicate_prob {} outside [0, 1]", self.duplicate_prob));
        }
        if !(self.min_size >= 8.0 && self.min_size <= self.max_size) {
            return bad(format!("object size range [{}, {}] is invalid", self.min_size, self.max_size));
        }
        if self.max_size > self.image_w || self.max_size > self.image_h {
            return bad("objects must fit inside the image".into());
        }
        Ok(())
    }
}

/// Reproducible random scene.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene, HarnessError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut classes: Vec<&str> = Vec::with_capacity(n);
    if n >= 2 && rng.gen_bool(cfg.duplicate_prob) {
        let dup = *CLASSES.choose(&mut rng).expect("non-empty");
        let copies = rng.gen_range(2..=3.min(n));
        classes.extend(std::iter::repeat_n(dup, copies));
    }
    while classes.len() < n {
        classes.push(CLASSES.choose(&mut rng).expect("non-empty"));
    }
    classes.shuffle(&mut rng);

    let objects: Vec<SceneObject> = classes
        .into_iter()
        .enumerate()
        .map(|(id, class)| {
            let w = rng.gen_range(cfg.min_size..=cfg.max_size).round();
            let h = rng.gen_range(cfg.min_size..=cfg.max_size).round();
            let x1 = rng.gen_range(0.0..=cfg.image_w - w).round();
            let y1 = rng.gen_range(0.0..=cfg.image_h - h).round();
            let bbox = Bbox::new(x1, y1, x1 + w, y1 + h).expect("positive size inside the image");
            let jx = rng.gen_range(-w / 6.0..=w / 6.0);
            let jy = rng.gen_range(-h / 6.0..=h / 6.0);
            let point = Point::new((x1 + w / 2.0 + jx).round(), (y1 + h / 2.0 + jy).round());
            let color = COLORS.choose(&mut rng).expect("non-empty").to_string();
            let pose = (class == "person").then(|| POSES.choose(&mut rng).expect("non-empty").to_string());
            let mut mask = BinaryMask::empty(cfg.grid_w, cfg.grid_h);
            mask.fill_ellipse(&bbox, cfg.image_w, cfg.image_h);
            if mask.is_empty() {
                // Tiny objects on a coarse grid still own their center cell.
                let cx = (((x1 + w / 2.0) / cfg.image_w * cfg.grid_w as f64) as usize).min(cfg.grid_w - 1);
                let cy = (((y1 + h / 2.0) / cfg.image_h * cfg.grid_h as f64) as usize).min(cfg.grid_h - 1);
                mask.set(cx, cy, true);
            }
            SceneObject {
                id,
                class: class.to_string(),
                color,
                pose,
                answer: ObjectAnswer::new(bbox, point),
                mask,
            }
        })
        .collect();
    let distractors = objects
        .iter()
        .filter(|o| objects.iter().filter(|p| p.class == o.class).count() > 1)
        .count();
    Ok(Scene {
        seed,
        image_w: cfg.image_w,
        image_h: cfg.image_h,
        objects,
        distractors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(7, &cfg).unwrap(), generate_scene(7, &cfg).unwrap());
        assert_ne!(generate_scene(7, &cfg).unwrap(), generate_scene(8, &cfg).unwrap());
    }

    #[test]
    fn single_object_range() {
        let cfg = SceneConfig {
            min_objects: 1,
            max_objects: 1,
            ..SceneConfig::default()
        };
        for seed in 0..20 {
            let s = generate_scene(seed, &cfg).unwrap();
            assert_eq!(s.objects.len(), 1);
            assert_eq!(s.distractors, 0);
        }
    }

    #[test]
    fn thousand_seeds_hold_invariants() {
        let cfg = SceneConfig::default();
        let violations = (0..1000)
            .filter(|&seed| generate_scene(seed, &cfg).unwrap().check().is_err())
            .count();
        assert_eq!(violations, 0);
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = SceneConfig::default();
        for cfg in [
            SceneConfig { min_objects: 0, ..base },
            SceneConfig { min_objects: 4, max_objects: 3, ..base },
            SceneConfig { duplicate_prob: 1.5, ..base },
            SceneConfig { max_size: 900.0, ..base },
        ] {
            assert!(matches!(generate_scene(0, &cfg), Err(HarnessError::InvalidConfig(_))));
        }
    }
}
