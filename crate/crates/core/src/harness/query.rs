use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{Scene, SceneObject, CLASSES, COLORS, POSES};
use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    /// The query is the class name.
    Easy,
    /// The query names an attribute through an indirect class clue.
    Hard,
}

impl Difficulty {
    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryCase {
    pub query: String,
    pub targets: Vec<usize>,
    pub difficulty: Difficulty,
}

/// Indirect phrase for a class; never contains the class name itself.
pub fn class_clue(class: &str) -> &'static str {
    match class {
        "person" => "individual",
        "cup" => "drinking vessel",
        "dog" => "pet animal",
        "car" => "vehicle",
        "chair" => "seat",
        "bottle" => "liquid container",
        "boat" => "watercraft",
        "flower" => "blossom",
        _ => "thing",
    }
}

fn words(phrase: &str) -> Vec<String> {
    phrase
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_owned)
        .collect()
}

fn contains_run(words: &[String], run: &str) -> bool {
    let run: Vec<&str> = run.split(' ').collect();
    words.windows(run.len()).any(|w| w.iter().zip(&run).all(|(a, b)| a == b))
}

/// Ids of the scene objects a phrase refers to, or `None` when the phrase
/// names no known class.
///
/// The phrase must name a class (directly or by its clue); color words, a
/// pose and "left"/"right" narrow the selection.
pub fn resolve(scene: &Scene, phrase: &str) -> Option<Vec<usize>> {
    let w = words(phrase);
    let class = CLASSES
        .iter()
        .find(|c| contains_run(&w, c) || contains_run(&w, class_clue(c)))?;
    let color = COLORS.iter().find(|c| contains_run(&w, c));
    let pose = POSES.iter().find(|p| contains_run(&w, p));
    let side = ["left", "right"].into_iter().find(|s| contains_run(&w, s));
    Some(
        scene
            .of_class(class)
            .filter(|o| color.is_none_or(|c| o.color == *c))
            .filter(|o| pose.is_none_or(|p| o.pose.as_deref() == Some(*p)))
            .filter(|o| side.is_none_or(|s| scene.side(o).as_str() == s))
            .map(|o| o.id)
            .collect(),
    )
}

/// Attribute phrases that single out `obj` among objects of its class.
fn unique_attributes(scene: &Scene, obj: &SceneObject) -> Vec<String> {
    let others: Vec<&SceneObject> = scene.of_class(&obj.class).filter(|o| o.id != obj.id).collect();
    let mut attrs = Vec::new();
    if others.iter().all(|o| o.color != obj.color) {
        attrs.push(obj.color.clone());
    }
    if let Some(p) = &obj.pose {
        if others.iter().all(|o| o.pose.as_ref() != Some(p)) {
            attrs.push(p.clone());
        }
    }
    let side = scene.side(obj);
    if others.iter().all(|o| scene.side(o) != side) {
        attrs.push(format!("on the {}", side.as_str()));
    }
    attrs
}

/// Shortest explicit phrase resolving to exactly this object.
pub fn describe_unique(scene: &Scene, id: usize) -> Option<String> {
    let obj = scene.object(id)?;
    let class = &obj.class;
    let side = scene.side(obj).as_str();
    let mut candidates = vec![class.clone(), format!("{} {class}", obj.color)];
    if let Some(p) = &obj.pose {
        candidates.push(format!("{class} {p}"));
    }
    candidates.push(format!("{class} on the {side}"));
    candidates.push(format!("{} {class} on the {side}", obj.color));
    if let Some(p) = &obj.pose {
        candidates.push(format!("{} {class} {p} on the {side}", obj.color));
    }
    candidates
        .into_iter()
        .find(|c| resolve(scene, c).as_deref() == Some(&[id][..]))
}

/// Draws a query of the given difficulty.
///
/// Easy queries name a class and target every object of it. Hard queries
/// pick an object that shares its class with a distractor and refer to it
/// through the class clue plus an attribute unique within that class.
pub fn generate_query(scene: &Scene, difficulty: Difficulty, seed: u64) -> Result<QueryCase, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match difficulty {
        Difficulty::Easy => {
            let obj = scene
                .objects
                .choose(&mut rng)
                .ok_or(HarnessError::Unresolvable("easy"))?;
            let targets: Vec<usize> = scene.of_class(&obj.class).map(|o| o.id).collect();
            Ok(QueryCase {
                query: obj.class.clone(),
                targets,
                difficulty,
            })
        }
        Difficulty::Hard => {
            let candidates: Vec<(&SceneObject, Vec<String>)> = scene
                .objects
                .iter()
                .filter(|o| scene.of_class(&o.class).count() >= 2)
                .map(|o| (o, unique_attributes(scene, o)))
                .filter(|(_, a)| !a.is_empty())
                .collect();
            let (obj, attrs) = candidates.choose(&mut rng).ok_or(HarnessError::Unresolvable("hard"))?;
            let attr = attrs.choose(&mut rng).expect("filtered non-empty");
            let query = format!("the {} that is {attr}", class_clue(&obj.class));
            debug_assert_eq!(resolve(scene, &query), Some(vec![obj.id]));
            Ok(QueryCase {
                query,
                targets: vec![obj.id],
                difficulty,
            })
        }
    }
}
