//! Synthetic micro-captioning task. Each scene is an (object, color,
//! relation, ground) tuple; features are one-hot attribute blocks plus
//! Gaussian noise and references are template instantiations.

use super::{FeatureGrid, RawCaptions, Split};
use crate::error::{Error, Result};
use crate::rng::stream;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const OBJECTS: &[&str] = &[
    "cat", "dog", "car", "bird", "boat", "book", "ball", "box", "cup", "hat", "fish", "frog",
    "duck", "bear", "lamp", "shoe", "tree", "star", "drum", "cake", "kite", "ring", "sock", "fork",
    "bell", "coin", "leaf", "rope", "vase", "clock", "chair", "phone", "plane", "train", "truck",
    "mouse", "horse", "sheep", "spoon", "crab",
];
const COLORS: &[&str] = &[
    "red", "blue", "green", "yellow", "black", "white", "brown", "orange", "purple", "pink",
    "gray", "teal",
];
const RELATIONS: &[&str] = &["on", "near", "under", "beside", "above", "behind"];
const GROUNDS: &[&str] = &[
    "mat", "rug", "floor", "desk", "shelf", "bench", "couch", "bed", "road", "grass", "field",
    "wall", "roof", "hill", "sand", "dock", "pier", "lawn", "porch", "deck", "stage", "track",
    "ramp", "path", "stone", "brick", "tile", "board", "plate", "tray", "towel", "quilt", "carpet",
    "counter", "stool", "crate", "barrel", "basket", "ledge", "step",
];

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub n_objects: usize,
    pub n_colors: usize,
    pub n_relations: usize,
    pub n_grounds: usize,
    pub noise_std: f64,
    /// 1 for a single concatenated vector, >1 spreads the attribute blocks
    /// over separate locations for the attention variant.
    pub locations: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_objects: 40,
            n_colors: 12,
            n_relations: 6,
            n_grounds: 40,
            noise_std: 0.05,
            locations: 1,
        }
    }
}

impl SynthConfig {
    pub fn feature_dim(&self) -> usize {
        self.n_objects + self.n_colors + self.n_relations + self.n_grounds
    }

    fn validate(&self) -> Result<()> {
        if self.n_objects == 0 || self.n_colors == 0 || self.n_relations == 0 || self.n_grounds == 0
        {
            return Err(Error::Config("attribute sets must be non-empty".into()));
        }
        if self.n_objects > OBJECTS.len()
            || self.n_colors > COLORS.len()
            || self.n_relations > RELATIONS.len()
            || self.n_grounds > GROUNDS.len()
        {
            return Err(Error::Config(format!(
                "attribute set sizes exceed the built-in word lists ({}/{}/{}/{})",
                OBJECTS.len(),
                COLORS.len(),
                RELATIONS.len(),
                GROUNDS.len()
            )));
        }
        if self.locations != 1 && self.locations != 4 {
            return Err(Error::Config("locations must be 1 or 4".into()));
        }
        Ok(())
    }
}

/// Attribute indices of one scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scene {
    pub object: usize,
    pub color: usize,
    pub relation: usize,
    pub ground: usize,
}

pub fn sample_scene(rng: &mut ChaCha8Rng, config: &SynthConfig) -> Scene {
    Scene {
        object: rng.gen_range(0..config.n_objects),
        color: rng.gen_range(0..config.n_colors),
        relation: rng.gen_range(0..config.n_relations),
        ground: rng.gen_range(0..config.n_grounds),
    }
}

fn captions_for(scene: &Scene, rng: &mut ChaCha8Rng) -> Vec<String> {
    let o = OBJECTS[scene.object];
    let c = COLORS[scene.color];
    let r = RELATIONS[scene.relation];
    let g = GROUNDS[scene.ground];
    let templates = [
        format!("a {c} {o} {r} a {g}"),
        format!("the {c} {o} is {r} a {g}"),
        format!("there is a {c} {o} {r} the {g}"),
        format!("a {o} that is {c} {r} a {g}"),
        format!("one {c} {o} sits {r} the {g}"),
    ];
    let k = rng.gen_range(2..=5usize);
    let mut order: Vec<usize> = (0..templates.len()).collect();
    order.shuffle(rng);
    order
        .into_iter()
        .take(k)
        .map(|i| templates[i].clone())
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn features_for(scene: &Scene, config: &SynthConfig, rng: &mut ChaCha8Rng, id: &str) -> FeatureGrid {
    let d = config.feature_dim();
    let hot = [
        scene.object,
        config.n_objects + scene.color,
        config.n_objects + config.n_colors + scene.relation,
        config.n_objects + config.n_colors + config.n_relations + scene.ground,
    ];
    let mut data = vec![0.0; config.locations * d];
    if config.locations == 1 {
        for &h in &hot {
            data[h] = 1.0;
        }
    } else {
        // One attribute block per location.
        for (loc, &h) in hot.iter().enumerate() {
            data[loc * d + h] = 1.0;
        }
    }
    for v in data.iter_mut() {
        *v += config.noise_std * gaussian(rng);
    }
    FeatureGrid::new(id.to_string(), config.locations, d, data)
        .expect("generated grid has consistent dimensions")
}

fn split_for(idx: usize, n_items: usize) -> Split {
    let train_end = (n_items * 8) / 10;
    let val_end = train_end + (n_items - train_end).div_ceil(2);
    if idx < train_end {
        Split::Train
    } else if idx < val_end {
        Split::Val
    } else {
        Split::Test
    }
}

/// Deterministic given (seed, n_items, config). Returns raw captions and
/// feature grids with an 80/10/10 split.
pub fn generate_synthetic_task(
    seed: u64,
    n_items: usize,
    config: &SynthConfig,
) -> Result<(Vec<RawCaptions>, Vec<FeatureGrid>)> {
    config.validate()?;
    if n_items == 0 {
        return Err(Error::Config("n_items must be >= 1".into()));
    }
    let mut rng = stream(seed, "taskgen");
    let mut captions = Vec::with_capacity(n_items);
    let mut grids = Vec::with_capacity(n_items);
    for idx in 0..n_items {
        let id = format!("synth-{idx:05}");
        let scene = sample_scene(&mut rng, config);
        let refs = captions_for(&scene, &mut rng);
        captions.push(RawCaptions {
            id: id.clone(),
            split: split_for(idx, n_items),
            refs,
        });
        grids.push(features_for(&scene, config, &mut rng, &id));
    }
    Ok((captions, grids))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_identical() {
        let cfg = SynthConfig::default();
        let (a_caps, a_feats) = generate_synthetic_task(42, 20, &cfg).unwrap();
        let (b_caps, b_feats) = generate_synthetic_task(42, 20, &cfg).unwrap();
        for (a, b) in a_caps.iter().zip(&b_caps) {
            assert_eq!(a.refs, b.refs);
        }
        for (a, b) in a_feats.iter().zip(&b_feats) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn split_is_80_10_10() {
        let cfg = SynthConfig::default();
        let (caps, _) = generate_synthetic_task(1, 100, &cfg).unwrap();
        let count = |s: Split| caps.iter().filter(|c| c.split == s).count();
        assert_eq!(count(Split::Train), 80);
        assert_eq!(count(Split::Val), 10);
        assert_eq!(count(Split::Test), 10);
    }

    #[test]
    fn captions_name_the_scene_attributes() {
        let scene = Scene {
            object: 0,  // cat
            color: 0,   // red
            relation: 0, // on
            ground: 0,  // mat
        };
        let mut rng = stream(5, "taskgen");
        let caps = captions_for(&scene, &mut rng);
        assert!(caps.len() >= 2);
        for c in &caps {
            assert!(c.contains("red") && c.contains("cat") && c.contains("mat"), "{c}");
        }
    }

    #[test]
    fn empty_attribute_set_is_an_error() {
        let cfg = SynthConfig {
            n_colors: 0,
            ..Default::default()
        };
        assert!(generate_synthetic_task(1, 10, &cfg).is_err());
    }

    #[test]
    fn four_location_grid_has_one_hot_per_block() {
        let cfg = SynthConfig {
            locations: 4,
            noise_std: 0.0,
            ..Default::default()
        };
        let (_, feats) = generate_synthetic_task(9, 3, &cfg).unwrap();
        for g in &feats {
            assert_eq!(g.locations, 4);
            for loc in 0..4 {
                let ones = g.location(loc).iter().filter(|&&v| v == 1.0).count();
                assert_eq!(ones, 1);
            }
        }
    }

    #[test]
    fn scene_attributes_are_uniform_chi_squared() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let cfg = SynthConfig::default();
        let n = 10_000usize;
        let mut rng = stream(77, "taskgen");
        let mut obj = vec![0u32; cfg.n_objects];
        let mut col = vec![0u32; cfg.n_colors];
        let mut rel = vec![0u32; cfg.n_relations];
        let mut gnd = vec![0u32; cfg.n_grounds];
        for _ in 0..n {
            let s = sample_scene(&mut rng, &cfg);
            obj[s.object] += 1;
            col[s.color] += 1;
            rel[s.relation] += 1;
            gnd[s.ground] += 1;
        }
        for counts in [&obj, &col, &rel, &gnd] {
            let k = counts.len() as f64;
            let expected = n as f64 / k;
            let stat: f64 = counts
                .iter()
                .map(|&c| {
                    let d = c as f64 - expected;
                    d * d / expected
                })
                .sum();
            let dist = ChiSquared::new(k - 1.0).unwrap();
            let p = 1.0 - dist.cdf(stat);
            assert!(p > 0.01, "chi-squared p = {p} for {} bins", counts.len());
        }
    }
}
