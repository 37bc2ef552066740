//! Deterministic stand-in for visual features: each label hashes to a fixed
//! random direction and a sector's feature is the normalized sum of the
//! directions of what is visible in it.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Node, SECTORS};
use crate::util::{fnv1a, rng};

const ROOM_WEIGHT: f64 = 1.0;
const OBJECT_WEIGHT: f64 = 1.0;
const SECTOR_WEIGHT: f64 = 0.5;

/// Unit-norm random direction keyed by `token`.
pub fn label_embedding(token: &str, dim: usize) -> Vec<f64> {
    let mut r = rng(fnv1a(token.as_bytes()));
    let mut v: Vec<f64> = (0..dim).map(|_| r.sample(StandardNormal)).collect();
    let n = crate::util::norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// The three adjacent sectors in which an object is visible. Depends only on
/// the object label.
pub fn object_sectors(object: &str) -> [usize; 3] {
    let centre = (fnv1a(object.as_bytes()) % SECTORS as u64) as usize;
    [(centre + SECTORS - 1) % SECTORS, centre, (centre + 1) % SECTORS]
}

pub(crate) fn room_token(room: &str) -> String {
    format!("room:{room}")
}

pub(crate) fn object_token(object: &str) -> String {
    format!("object:{object}")
}

/// L2-normalized feature of `node` seen through heading sector `sector`.
///
/// # Panics
/// If `sector >= 6`.
pub fn featurize_observation(node: &Node, sector: usize, dim: usize) -> Vec<f32> {
    assert!(sector < SECTORS, "sector index {sector} out of range");
    let mut acc = vec![0.0f64; dim];
    let mut add = |token: &str, weight: f64| {
        for (a, e) in acc.iter_mut().zip(label_embedding(token, dim)) {
            *a += weight * e;
        }
    };
    add(&room_token(&node.room), ROOM_WEIGHT);
    for object in &node.objects {
        if object_sectors(object).contains(&sector) {
            add(&object_token(object), OBJECT_WEIGHT);
        }
    }
    add(&format!("sector:{sector}"), SECTOR_WEIGHT);
    let n = crate::util::norm(&acc);
    acc.into_iter().map(|x| (x / n) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::navgraph::{NodeId, OBJECT_LABELS, ROOM_LABELS};
    use crate::util::cosine;
    use rand::seq::IndexedRandom;

    fn node(room: &str, objects: &[&str]) -> Node {
        Node {
            id: NodeId::from("n"),
            position: [0.0; 3],
            room: room.into(),
            objects: objects.iter().map(|s| s.to_string()).collect(),
            panorama: vec![],
        }
    }

    #[test]
    fn deterministic_and_normalized() {
        let a = node("kitchen", &["fridge", "oven"]);
        for s in 0..SECTORS {
            let f = featurize_observation(&a, s, 64);
            assert_eq!(f, featurize_observation(&a, s, 64));
            let n: f64 = f.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_labels_identical_features() {
        let mut a = node("bedroom", &["bed"]);
        let b = node("bedroom", &["bed"]);
        a.id = NodeId::from("other");
        a.position = [4.0, 1.0, 0.0];
        assert_eq!(featurize_observation(&a, 2, 32), featurize_observation(&b, 2, 32));
    }

    // Monte-Carlo: nodes with disjoint room and object labels have low
    // average cosine similarity in the same sector.
    #[test]
    fn disjoint_labels_are_dissimilar_on_average() {
        let mut r = rng(11);
        let mut total = 0.0;
        let trials = 100;
        for _ in 0..trials {
            let rooms: Vec<&str> = ROOM_LABELS.choose_multiple(&mut r, 2).copied().collect();
            let objs: Vec<&str> = OBJECT_LABELS.choose_multiple(&mut r, 4).copied().collect();
            let a = node(rooms[0], &objs[..2]);
            let b = node(rooms[1], &objs[2..]);
            let s = r.random_range(0..SECTORS);
            let fa: Vec<f64> = featurize_observation(&a, s, 64).iter().map(|x| f64::from(*x)).collect();
            let fb: Vec<f64> = featurize_observation(&b, s, 64).iter().map(|x| f64::from(*x)).collect();
            total += cosine(&fa, &fb);
        }
        assert!(total / (trials as f64) < 0.5, "mean cosine {}", total / trials as f64);
    }

    #[test]
    fn objects_visible_in_three_sectors() {
        for o in OBJECT_LABELS {
            let s = object_sectors(o);
            assert!(s.iter().all(|x| *x < SECTORS));
            assert_eq!((s[1] + 1) % SECTORS, s[2]);
        }
    }
}
