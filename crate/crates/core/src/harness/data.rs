//! Seeded synthetic images and referring-classification samples.
//!
//! An image is a `g × g` grid of cell feature vectors. Each cell encodes
//! `[one-hot color | one-hot shape | objectness]` plus Gaussian noise;
//! background cells carry noise only. Objects are axis-aligned rectangular
//! blocks with at least one empty cell between any two of them, and all
//! objects in one image have distinct shapes.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::vocab::{self, N_COLORS, N_SHAPES, REGION_SIDE};
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::visprompt::{PromptKind, VisualPrompt};

pub const FEAT_DIM: usize = N_COLORS + N_SHAPES + 1;
pub const FEATURE_NOISE: f64 = 0.05;
pub const MIN_OBJECTS: usize = 2;
pub const MAX_OBJECTS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Object {
    pub color: usize,
    pub shape: usize,
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Object {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row..self.row + self.height).contains(&row) && (self.col..self.col + self.width).contains(&col)
    }

    /// Flat indices of covered cells.
    pub fn cells(&self, grid: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.height * self.width);
        for r in self.row..self.row + self.height {
            for c in self.col..self.col + self.width {
                out.push(r * grid + c);
            }
        }
        out
    }

    /// Coarse location token index of the block's center.
    pub fn region(&self, grid: usize) -> usize {
        let cr = self.row + self.height / 2;
        let cc = self.col + self.width / 2;
        (cr * REGION_SIDE / grid) * REGION_SIDE + cc * REGION_SIDE / grid
    }

    fn separated_from(&self, other: &Object) -> bool {
        // a one-cell margin in every direction
        self.row + self.height < other.row
            || other.row + other.height < self.row
            || self.col + self.width < other.col
            || other.col + other.width < self.col
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticImage {
    pub grid: usize,
    pub objects: Vec<Object>,
    /// `[g², FEAT_DIM]`, row-major over cells.
    pub features: Tensor,
}

impl SyntheticImage {
    /// Index of the object covering a cell, if any.
    pub fn object_at(&self, row: usize, col: usize) -> Option<usize> {
        self.objects.iter().position(|o| o.contains(row, col))
    }

    fn render(grid: usize, objects: Vec<Object>, rng: &mut ChaCha8Rng) -> Self {
        let noise = Normal::new(0.0, FEATURE_NOISE).expect("valid std");
        let mut data = vec![0.0; grid * grid * FEAT_DIM];
        for o in &objects {
            for cell in o.cells(grid) {
                let f = &mut data[cell * FEAT_DIM..(cell + 1) * FEAT_DIM];
                f[o.color] = 1.0;
                f[N_COLORS + o.shape] = 1.0;
                f[FEAT_DIM - 1] = 1.0;
            }
        }
        for v in data.iter_mut() {
            *v += noise.sample(rng);
        }
        Self {
            grid,
            objects,
            features: Tensor::new(vec![grid * grid, FEAT_DIM], data).expect("shape"),
        }
    }
}

/// One referring-object-classification question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocSample {
    pub id: usize,
    pub image: SyntheticImage,
    pub prompt: VisualPrompt,
    /// Index into `image.objects` of the referred object.
    pub target: usize,
    pub question: Vec<usize>,
    pub answer_a: usize,
    pub answer_b: usize,
    pub truth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub seed: u64,
    pub grid: usize,
    pub samples: Vec<RocSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("dataset serializes")
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        crate::model::hex(&Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let d: Dataset = serde_json::from_str(&s).map_err(|e| Error::parse("dataset", e))?;
        for s in &d.samples {
            if s.image.grid != d.grid || s.image.features.shape() != [d.grid * d.grid, FEAT_DIM] {
                return Err(Error::parse("dataset", format!("sample {} has inconsistent grid", s.id)));
            }
            s.prompt.validate()?;
        }
        Ok(d)
    }
}

fn object_side_range(grid: usize) -> (usize, usize) {
    let lo = (grid / 4).max(1);
    let hi = (grid * 3 / 8).max(lo);
    (lo, hi)
}

fn place_objects(grid: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Object>> {
    let (lo, hi) = object_side_range(grid);
    'restart: for _ in 0..64 {
        let mut shapes: Vec<usize> = (0..N_SHAPES).collect();
        let mut placed: Vec<Object> = Vec::with_capacity(n);
        for _ in 0..n {
            let shape = shapes.swap_remove(rng.random_range(0..shapes.len()));
            let color = rng.random_range(0..N_COLORS);
            let mut ok = None;
            for _ in 0..128 {
                let height = rng.random_range(lo..=hi).min(grid);
                let width = rng.random_range(lo..=hi).min(grid);
                let o = Object {
                    color,
                    shape,
                    row: rng.random_range(0..=grid - height),
                    col: rng.random_range(0..=grid - width),
                    height,
                    width,
                };
                if placed.iter().all(|p| p.separated_from(&o)) {
                    ok = Some(o);
                    break;
                }
            }
            match ok {
                Some(o) => placed.push(o),
                None => continue 'restart,
            }
        }
        return Ok(placed);
    }
    Err(Error::GridTooSmall { grid, objects: n })
}

/// Draws one image with `MIN_OBJECTS..=MAX_OBJECTS` objects.
pub fn gen_image(grid: usize, rng: &mut ChaCha8Rng) -> Result<SyntheticImage> {
    if grid < 4 {
        return Err(Error::GridTooSmall {
            grid,
            objects: MIN_OBJECTS,
        });
    }
    let n = rng.random_range(MIN_OBJECTS..=MAX_OBJECTS);
    let objects = place_objects(grid, n, rng)?;
    Ok(SyntheticImage::render(grid, objects, rng))
}

fn point_inside(o: &Object, grid: usize, rng: &mut ChaCha8Rng) -> [f64; 2] {
    // stay a fifth of a cell away from the block's border
    let g = grid as f64;
    let x = o.col as f64 + 0.2 + rng.random::<f64>() * (o.width as f64 - 0.4);
    let y = o.row as f64 + 0.2 + rng.random::<f64>() * (o.height as f64 - 0.4);
    [x / g, y / g]
}

fn make_prompt(kind: PromptKind, o: &Object, grid: usize, rng: &mut ChaCha8Rng) -> VisualPrompt {
    let g = grid as f64;
    match kind {
        PromptKind::Box => VisualPrompt::Box {
            coords: [
                o.col as f64 / g,
                o.row as f64 / g,
                (o.col + o.width) as f64 / g,
                (o.row + o.height) as f64 / g,
            ],
        },
        PromptKind::Mask => {
            let mut m = vec![vec![0u8; grid]; grid];
            for (r, row) in m.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = o.contains(r, c) as u8;
                }
            }
            VisualPrompt::Mask { grid: m }
        }
        PromptKind::Scribble => {
            let mut points: Vec<[f64; 2]> = (0..3).map(|_| point_inside(o, grid, rng)).collect();
            points.sort_by(|a, b| a[0].total_cmp(&b[0]));
            VisualPrompt::Scribble { points }
        }
        PromptKind::Point => VisualPrompt::Point {
            point: point_inside(o, grid, rng),
        },
    }
}

pub fn answer_is_a(id: usize) -> bool {
    (id + id / 4) % 2 == 0
}

/// Deterministic dataset of `n` samples. Prompt kinds cycle box, mask,
/// scribble, point. The correct answer is option A on exactly one id of
/// every pair `(2k, 2k+1)`, alternating within each prompt kind.
/// The distractor is always another object in the same image.
pub fn gen_dataset(n: usize, seed: u64, grid: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidConfig("dataset needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    for id in 0..n {
        let image = gen_image(grid, &mut rng)?;
        let target = rng.random_range(0..image.objects.len());
        let mut distractor = rng.random_range(0..image.objects.len() - 1);
        if distractor >= target {
            distractor += 1;
        }
        let kind = PromptKind::ALL[id % 4];
        let prompt = make_prompt(kind, &image.objects[target], grid, &mut rng);
        let (ts, ds) = (image.objects[target].shape, image.objects[distractor].shape);
        let (a, b) = if answer_is_a(id) { (ts, ds) } else { (ds, ts) };
        samples.push(RocSample {
            id,
            question: vocab::question(a, b),
            answer_a: vocab::shape_token(a),
            answer_b: vocab::shape_token(b),
            truth: vocab::shape_token(ts),
            image,
            prompt,
            target,
        });
    }
    Ok(Dataset { seed, grid, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_digest() {
        let a = gen_dataset(12, 3, 8).unwrap();
        let b = gen_dataset(12, 3, 8).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), gen_dataset(12, 4, 8).unwrap().digest());
    }

    #[test]
    fn prompt_kinds_round_robin() {
        let d = gen_dataset(200, 1, 8).unwrap();
        for kind in PromptKind::ALL {
            assert_eq!(d.samples.iter().filter(|s| s.prompt.kind() == kind).count(), 50);
        }
    }

    #[test]
    fn answers_balanced_and_distinct() {
        let d = gen_dataset(200, 2, 8).unwrap();
        let a_correct = d.samples.iter().filter(|s| s.answer_a == s.truth).count();
        assert_eq!(a_correct, 100);
        for kind in PromptKind::ALL {
            let n = d.samples.iter().filter(|s| s.prompt.kind() == kind && s.answer_a == s.truth).count();
            assert_eq!(n, 25, "{kind:?}");
        }
        for s in &d.samples {
            assert_ne!(s.answer_a, s.answer_b);
            assert!(s.truth == s.answer_a || s.truth == s.answer_b);
        }
    }

    #[test]
    fn objects_are_separated_and_distinct() {
        let d = gen_dataset(100, 5, 8).unwrap();
        for s in &d.samples {
            let objs = &s.image.objects;
            assert!((MIN_OBJECTS..=MAX_OBJECTS).contains(&objs.len()));
            for i in 0..objs.len() {
                for j in i + 1..objs.len() {
                    assert!(objs[i].separated_from(&objs[j]));
                    assert_ne!(objs[i].shape, objs[j].shape);
                }
            }
        }
    }

    #[test]
    fn region_tokens_in_range() {
        let d = gen_dataset(50, 9, 8).unwrap();
        for s in &d.samples {
            for o in &s.image.objects {
                assert!(o.region(8) < vocab::N_REGIONS);
            }
        }
    }

    #[test]
    fn tiny_grid_rejected() {
        assert!(matches!(gen_dataset(1, 0, 3), Err(Error::GridTooSmall { .. })));
        assert!(gen_dataset(0, 0, 8).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let d = gen_dataset(6, 11, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.json");
        d.save(&p).unwrap();
        assert_eq!(Dataset::load(&p).unwrap(), d);
    }
}
