//! Synthetic labeled scenes — axis-aligned boxes and plane slabs — for tests,
//! benchmarks, and toy training.
//!
//! Spec files are plain `key=value` lines:
//!
//! ```text
//! dims=8x8x8
//! classes=3
//! seed=1
//! box=1,0,0,0,3,3,3        # class, x0,y0,z0, x1,y1,z1 (inclusive)
//! slab=2,2,5,6             # class, axis (0=x,1=y,2=z), start, end (inclusive)
//! ```
//!
//! Later primitives overwrite earlier ones. Features are one-hot over the
//! semantic classes plus seeded Gaussian noise (sigma 0.01).

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::VoxelGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    /// Inclusive corner-to-corner box.
    Box { class: u8, min: (u32, u32, u32), max: (u32, u32, u32) },
    /// Full-cross-section slab along one axis, inclusive index range.
    Slab { class: u8, axis: u8, start: u32, end: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneSpec {
    pub dims: (usize, usize, usize),
    pub classes: u16,
    pub seed: u64,
    pub primitives: Vec<Primitive>,
}

impl SceneSpec {
    /// Parse the `key=value` format above. Unknown keys are rejected.
    pub fn parse(text: &str) -> Result<SceneSpec> {
        let mut dims = None;
        let mut classes = None;
        let mut seed = 0u64;
        let mut primitives = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| {
                Error::BadFormat(format!("line {}: {what}: {line}", lineno + 1))
            };
            let (key, value) =
                line.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            match key.trim() {
                "dims" => {
                    let parts: Vec<usize> = value
                        .split('x')
                        .map(|p| p.trim().parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad("bad dims"))?;
                    if parts.len() != 3 || parts.contains(&0) {
                        return Err(bad("dims must be DxHxW, all positive"));
                    }
                    dims = Some((parts[0], parts[1], parts[2]));
                }
                "classes" => {
                    classes = Some(value.trim().parse().map_err(|_| bad("bad class count"))?);
                }
                "seed" => {
                    seed = value.trim().parse().map_err(|_| bad("bad seed"))?;
                }
                "box" => {
                    let v = parse_ints(value).map_err(|_| bad("bad box"))?;
                    if v.len() != 7 {
                        return Err(bad("box needs class,x0,y0,z0,x1,y1,z1"));
                    }
                    primitives.push(Primitive::Box {
                        class: v[0] as u8,
                        min: (v[1], v[2], v[3]),
                        max: (v[4], v[5], v[6]),
                    });
                }
                "slab" => {
                    let v = parse_ints(value).map_err(|_| bad("bad slab"))?;
                    if v.len() != 4 || v[1] > 2 {
                        return Err(bad("slab needs class,axis(0-2),start,end"));
                    }
                    primitives.push(Primitive::Slab {
                        class: v[0] as u8,
                        axis: v[1] as u8,
                        start: v[2],
                        end: v[3],
                    });
                }
                other => return Err(Error::BadFormat(format!("unknown key {other:?}"))),
            }
        }
        Ok(SceneSpec {
            dims: dims.ok_or_else(|| Error::BadFormat("missing dims".into()))?,
            classes: classes.ok_or_else(|| Error::BadFormat("missing classes".into()))?,
            seed,
            primitives,
        })
    }
}

fn parse_ints(s: &str) -> std::result::Result<Vec<u32>, std::num::ParseIntError> {
    s.split(',').map(|p| p.trim().parse()).collect()
}

pub const FEATURE_NOISE_SIGMA: f64 = 0.01;

/// Rasterize the primitives (later ones overwrite) and attach one-hot-plus-
/// noise features of width `classes` to every occupied voxel.
pub fn generate(spec: &SceneSpec) -> Result<VoxelGrid> {
    let (d, h, w) = spec.dims;
    let volume = d * h * w;
    let mut labels = vec![0u8; volume];
    let in_bounds = |p: (u32, u32, u32)| {
        (p.0 as usize) < d && (p.1 as usize) < h && (p.2 as usize) < w
    };
    for prim in &spec.primitives {
        match *prim {
            Primitive::Box { class, min, max } => {
                if class == 0 || u16::from(class) > spec.classes {
                    return Err(Error::LabelOutOfRange { label: class, classes: spec.classes });
                }
                if !in_bounds(min) || !in_bounds(max) || min.0 > max.0 || min.1 > max.1 || min.2 > max.2 {
                    return Err(Error::PrimitiveOutOfBounds(format!(
                        "box {min:?}..={max:?} in {:?}",
                        spec.dims
                    )));
                }
                for z in min.2..=max.2 {
                    for y in min.1..=max.1 {
                        for x in min.0..=max.0 {
                            labels[x as usize + d * (y as usize + h * z as usize)] = class;
                        }
                    }
                }
            }
            Primitive::Slab { class, axis, start, end } => {
                if class == 0 || u16::from(class) > spec.classes {
                    return Err(Error::LabelOutOfRange { label: class, classes: spec.classes });
                }
                let extent = [d, h, w][axis as usize];
                if start > end || end as usize >= extent {
                    return Err(Error::PrimitiveOutOfBounds(format!(
                        "slab {start}..={end} on axis {axis} of extent {extent}"
                    )));
                }
                for z in 0..w {
                    for y in 0..h {
                        for x in 0..d {
                            let along = [x, y, z][axis as usize] as u32;
                            if along >= start && along <= end {
                                labels[x + d * (y + h * z)] = class;
                            }
                        }
                    }
                }
            }
        }
    }
    if labels.iter().all(|&l| l == 0) {
        return Err(Error::EmptyScene);
    }
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, FEATURE_NOISE_SIGMA).expect("valid sigma");
    let feature_dim = usize::from(spec.classes);
    let mut features = Vec::new();
    for &label in labels.iter().filter(|&&l| l > 0) {
        for c in 0..feature_dim {
            let hot = if usize::from(label) == c + 1 { 1.0 } else { 0.0 };
            features.push(hot + noise.sample(&mut rng));
        }
    }
    VoxelGrid::new(spec.dims, spec.classes, feature_dim, labels, features)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_roundtrip_fields() {
        let spec = SceneSpec::parse(
            "# toy scene\ndims=8x8x8\nclasses=3\nseed=42\nbox=1,0,0,0,3,3,3\nslab=2,2,5,6\n",
        )
        .unwrap();
        assert_eq!(spec.dims, (8, 8, 8));
        assert_eq!(spec.classes, 3);
        assert_eq!(spec.seed, 42);
        assert_eq!(spec.primitives.len(), 2);
        assert!(SceneSpec::parse("dims=8x8\nclasses=1").is_err());
        assert!(SceneSpec::parse("classes=1").is_err());
        assert!(SceneSpec::parse("dims=4x4x4\nclasses=1\nwhat=1").is_err());
    }

    #[test]
    fn empty_primitive_list_is_an_empty_scene() {
        let spec = SceneSpec::parse("dims=4x4x4\nclasses=1\n").unwrap();
        assert!(matches!(generate(&spec), Err(Error::EmptyScene)));
    }

    #[test]
    fn full_volume_box_occupies_everything() {
        let spec = SceneSpec::parse("dims=4x3x2\nclasses=1\nbox=1,0,0,0,3,2,1\n").unwrap();
        let grid = generate(&spec).unwrap();
        assert_eq!(grid.num_occupied(), 24);
        assert!(grid.labels().iter().all(|&l| l == 1));
    }

    #[test]
    fn later_primitives_overwrite_and_histogram_is_analytic() {
        // 4x4x4 volume: class-1 box over x,y,z in [0,1] (8 voxels), then a
        // class-2 slab z in [1,1] (16 voxels) overwriting the box's z=1 layer
        // (4 voxels). Expect 8-4=4 of class 1 and 16 of class 2.
        let spec = SceneSpec::parse(
            "dims=4x4x4\nclasses=2\nbox=1,0,0,0,1,1,1\nslab=2,2,1,1\n",
        )
        .unwrap();
        let grid = generate(&spec).unwrap();
        let count = |c: u8| grid.labels().iter().filter(|&&l| l == c).count();
        assert_eq!(count(1), 4);
        assert_eq!(count(2), 16);
        assert_eq!(grid.num_occupied(), 20);
    }

    #[test]
    fn deterministic_per_seed_and_features_near_one_hot() {
        let text = "dims=5x5x5\nclasses=3\nseed=9\nbox=2,1,1,1,3,3,3\n";
        let a = generate(&SceneSpec::parse(text).unwrap()).unwrap();
        let b = generate(&SceneSpec::parse(text).unwrap()).unwrap();
        assert_eq!(a.labels(), b.labels());
        for row in 0..a.num_occupied() {
            assert_eq!(a.feature(row), b.feature(row));
            // one-hot at class 2 (index 1) plus small noise
            let f = a.feature(row);
            assert!((f[1] - 1.0).abs() < 0.1);
            assert!(f[0].abs() < 0.1 && f[2].abs() < 0.1);
        }
        let c = generate(&SceneSpec::parse("dims=5x5x5\nclasses=3\nseed=10\nbox=2,1,1,1,3,3,3\n").unwrap())
            .unwrap();
        assert_ne!(a.feature(0), c.feature(0));
    }

    #[test]
    fn out_of_bounds_primitives_rejected() {
        let spec = SceneSpec::parse("dims=4x4x4\nclasses=1\nbox=1,0,0,0,4,3,3\n").unwrap();
        assert!(matches!(generate(&spec), Err(Error::PrimitiveOutOfBounds(_))));
        let spec = SceneSpec::parse("dims=4x4x4\nclasses=1\nslab=1,0,2,4\n").unwrap();
        assert!(matches!(generate(&spec), Err(Error::PrimitiveOutOfBounds(_))));
        let spec = SceneSpec::parse("dims=4x4x4\nclasses=1\nbox=2,0,0,0,1,1,1\n").unwrap();
        assert!(matches!(generate(&spec), Err(Error::LabelOutOfRange { .. })));
    }
}
