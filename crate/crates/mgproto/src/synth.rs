//! Synthetic part-based datasets.
//!
//! Each sample is a feature grid of background noise with a few "parts"
//! planted at random distinct positions: a part is a class-specific center
//! vector plus noise. Classes differ only through their part centers, so a
//! model must find the parts to classify — mirroring, at desk scale, images
//! whose objects occupy a few patches of a feature map.
//!
//! Out-of-distribution samples are built the same way from *shifted* centers
//! (`center + ood_shift` in every coordinate), which belong to no class.
//!
//! Centers are laid out on coordinate axes so that any two distinct centers
//! are provably far apart; the builder enforces a separation of at least
//! `4 * noise_sigma` between distinct centers, keeping classification
//! information-theoretically easy unless a construction deliberately shares
//! a center across classes (see `shared_strong_part`).

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedStream;

/// Full description of a synthetic dataset family.
///
/// `part_centers[c][k]` is the center of part `k` of class `c`, a
/// `raw_dim`-vector. The struct serializes into dataset sidecars, so a file
/// on disk always carries the exact recipe that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub parts_per_class: usize,
    pub raw_dim: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub noise_sigma: f64,
    pub ood_shift: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub ood_per_class: usize,
    pub part_centers: Vec<Vec<Vec<f64>>>,
}

/// Minimum separation between distinct part centers, in units of
/// `noise_sigma`.
pub const MIN_SEPARATION_SIGMAS: f64 = 4.0;

impl SyntheticSpec {
    /// Builds a spec with axis-aligned part centers.
    ///
    /// Part `k` of class `c` gets magnitude `part_magnitudes[k]` on its own
    /// coordinate axis. With `shared_strong_part`, part 0 of *every* class
    /// shares one axis and magnitude (a salient but non-discriminative
    /// feature), and only parts `1..` discriminate — the construction that
    /// makes sub-salient evidence matter.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        num_classes: usize,
        parts_per_class: usize,
        raw_dim: usize,
        grid_height: usize,
        grid_width: usize,
        noise_sigma: f64,
        ood_shift: f64,
        train_per_class: usize,
        test_per_class: usize,
        ood_per_class: usize,
        part_magnitudes: &[f64],
        shared_strong_part: bool,
    ) -> Result<Self> {
        if part_magnitudes.len() != parts_per_class {
            return Err(Error::Config(format!(
                "part_magnitudes has {} entries for {} parts",
                part_magnitudes.len(),
                parts_per_class
            )));
        }
        let axes_needed = if shared_strong_part {
            if parts_per_class < 2 {
                return Err(Error::Config(
                    "shared_strong_part needs at least 2 parts per class".into(),
                ));
            }
            1 + num_classes * (parts_per_class - 1)
        } else {
            num_classes * parts_per_class
        };
        if axes_needed > raw_dim {
            return Err(Error::Config(format!(
                "center layout needs {axes_needed} axes but raw_dim is {raw_dim}"
            )));
        }
        let mut part_centers = vec![vec![vec![0.0; raw_dim]; parts_per_class]; num_classes];
        for (c, class_centers) in part_centers.iter_mut().enumerate() {
            for (k, center) in class_centers.iter_mut().enumerate() {
                let axis = if shared_strong_part {
                    if k == 0 {
                        0
                    } else {
                        1 + c * (parts_per_class - 1) + (k - 1)
                    }
                } else {
                    c * parts_per_class + k
                };
                center[axis] = part_magnitudes[k];
            }
        }
        let spec = SyntheticSpec {
            num_classes,
            parts_per_class,
            raw_dim,
            grid_height,
            grid_width,
            noise_sigma,
            ood_shift,
            train_per_class,
            test_per_class,
            ood_per_class,
            part_centers,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks every structural invariant, including the separation rule:
    /// any two centers that differ at all must be at least
    /// `4 * noise_sigma` apart, and every class must own at least one center
    /// distinct from all centers of every other class.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.parts_per_class == 0 {
            return Err(Error::Config("need at least 1 part per class".into()));
        }
        if self.raw_dim == 0 || self.grid_height == 0 || self.grid_width == 0 {
            return Err(Error::Config("grid and feature dims must be positive".into()));
        }
        if self.parts_per_class > self.grid_height * self.grid_width {
            return Err(Error::Config(format!(
                "grid too small: {} parts need distinct positions on a {}x{} grid",
                self.parts_per_class, self.grid_height, self.grid_width
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if !self.ood_shift.is_finite() {
            return Err(Error::Config("ood_shift must be finite".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("train and test need >= 1 sample per class".into()));
        }
        if self.part_centers.len() != self.num_classes
            || self
                .part_centers
                .iter()
                .any(|c| c.len() != self.parts_per_class)
            || self
                .part_centers
                .iter()
                .flatten()
                .any(|v| v.len() != self.raw_dim)
        {
            return Err(Error::Config("part_centers shape mismatch".into()));
        }
        if self
            .part_centers
            .iter()
            .flatten()
            .flatten()
            .any(|v| !v.is_finite())
        {
            return Err(Error::Config("part_centers must be finite".into()));
        }
        // Separation between all pairs of distinct centers, across classes
        // and within them.
        let min_sep = MIN_SEPARATION_SIGMAS * self.noise_sigma;
        let all: Vec<(usize, &Vec<f64>)> = self
            .part_centers
            .iter()
            .enumerate()
            .flat_map(|(c, parts)| parts.iter().map(move |p| (c, p)))
            .collect();
        for (i, (_, a)) in all.iter().enumerate() {
            for (_, b) in all.iter().skip(i + 1) {
                if a == b {
                    continue; // deliberately shared center
                }
                let dist = a
                    .iter()
                    .zip(b.iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                if dist < min_sep {
                    return Err(Error::Config(format!(
                        "distinct part centers only {dist:.4} apart; need {min_sep:.4}"
                    )));
                }
            }
        }
        // Every class distinguishable: at least one center not shared with
        // each other class.
        for c1 in 0..self.num_classes {
            for c2 in (c1 + 1)..self.num_classes {
                let distinguishable = self.part_centers[c1]
                    .iter()
                    .any(|p| !self.part_centers[c2].contains(p))
                    || self.part_centers[c2]
                        .iter()
                        .any(|p| !self.part_centers[c1].contains(p));
                if !distinguishable {
                    return Err(Error::Config(format!(
                        "classes {c1} and {c2} have identical part-center sets"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Samples per split.
    pub fn split_size(&self, split: Split) -> usize {
        let per_class = match split {
            Split::Train => self.train_per_class,
            Split::Test => self.test_per_class,
            Split::Ood => self.ood_per_class,
        };
        per_class * self.num_classes
    }
}

/// Which split of a [`SyntheticSpec`] a dataset holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Ood,
}

impl Split {
    /// Lowercase name used in filenames and sidecars.
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Ood => "ood",
        }
    }
}

/// A generated dataset: raw grids plus labels.
///
/// For the OoD split, `labels` records which class's shifted centers were
/// planted — useful for debugging, meaningless for classification.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub split: Split,
    pub seed: u64,
    pub grids: Vec<Array3<f64>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    /// Number of samples.
    pub fn len(&self) -> usize {
        self.grids.len()
    }

    /// Whether the dataset is empty.
    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }
}

/// Generates one split of `spec` deterministically from the seed stream.
///
/// Samples are emitted class-major (all of class 0 first); each sample is
/// background noise `N(0, sigma^2)` everywhere, with the class's part
/// centers (shifted for the OoD split) planted at `parts_per_class` distinct
/// random positions, noise included.
pub fn generate_dataset(spec: &SyntheticSpec, seeds: &SeedStream, split: Split) -> Result<Dataset> {
    use rand_distr::{Distribution, Normal};
    spec.validate()?;
    let mut rng = seeds.derive(&format!("data/{}", split.name()));
    let per_class = match split {
        Split::Train => spec.train_per_class,
        Split::Test => spec.test_per_class,
        Split::Ood => spec.ood_per_class,
    };
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .expect("validated sigma");
    let exact = spec.noise_sigma == 0.0;
    let (h, w, d) = (spec.grid_height, spec.grid_width, spec.raw_dim);
    let mut grids = Vec::with_capacity(per_class * spec.num_classes);
    let mut labels = Vec::with_capacity(per_class * spec.num_classes);
    for c in 0..spec.num_classes {
        for _ in 0..per_class {
            let mut grid = Array3::zeros((h, w, d));
            if !exact {
                for v in grid.iter_mut() {
                    *v = noise.sample(&mut rng);
                }
            }
            let positions = rand::seq::index::sample(&mut rng, h * w, spec.parts_per_class);
            for (k, flat) in positions.iter().enumerate() {
                let (i, j) = (flat / w, flat % w);
                let center = &spec.part_centers[c][k];
                for (dd, &cv) in center.iter().enumerate() {
                    let shift = if split == Split::Ood { spec.ood_shift } else { 0.0 };
                    let n = if exact { 0.0 } else { noise.sample(&mut rng) };
                    grid[[i, j, dd]] = cv + shift + n;
                }
            }
            grids.push(grid);
            labels.push(c);
        }
    }
    Ok(Dataset {
        split,
        seed: seeds.root(),
        grids,
        labels,
    })
}

/// Sidecar schema stored next to every dataset tensor.
#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    format: String,
    format_version: u32,
    tensor_shape: [usize; 4],
    split: Split,
    seed: u64,
    rng_algorithm: String,
    labels: Vec<usize>,
    spec: SyntheticSpec,
}

/// Writes `dataset` as `<stem>.bin` (raw little-endian f64, sample-major,
/// row-major grids) plus `<stem>.json` (shapes, split, seed, labels, and the
/// full generating spec).
pub fn save_dataset(stem: &std::path::Path, dataset: &Dataset, spec: &SyntheticSpec) -> Result<()> {
    use std::io::Write;
    let n = dataset.len();
    let shape = [n, spec.grid_height, spec.grid_width, spec.raw_dim];
    let bin_path = stem.with_extension("bin");
    let mut out = std::io::BufWriter::new(std::fs::File::create(&bin_path)?);
    for grid in &dataset.grids {
        for &v in grid.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    let sidecar = Sidecar {
        format: "mgproto-dataset".into(),
        format_version: 1,
        tensor_shape: shape,
        split: dataset.split,
        seed: dataset.seed,
        rng_algorithm: crate::rng::RNG_ALGORITHM.into(),
        labels: dataset.labels.clone(),
        spec: spec.clone(),
    };
    std::fs::write(
        stem.with_extension("json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

/// Loads a dataset written by [`save_dataset`]. `path` may point at either
/// the `.bin` or the `.json` file. Returns the dataset and its spec.
pub fn load_dataset(path: &std::path::Path) -> Result<(Dataset, SyntheticSpec)> {
    let stem = path.with_extension("");
    let bin_path = stem.with_extension("bin");
    let json_path = stem.with_extension("json");
    for p in [&bin_path, &json_path] {
        if !p.exists() {
            return Err(Error::MissingFile(p.display().to_string()));
        }
    }
    let derr = |reason: String| Error::Dataset {
        path: bin_path.display().to_string(),
        reason,
    };
    let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(&json_path)?)
        .map_err(|e| derr(format!("sidecar: {e}")))?;
    if sidecar.format != "mgproto-dataset" || sidecar.format_version != 1 {
        return Err(derr(format!(
            "unsupported sidecar format {}/{}",
            sidecar.format, sidecar.format_version
        )));
    }
    let [n, h, w, d] = sidecar.tensor_shape;
    let bytes = std::fs::read(&bin_path)?;
    let expect = n * h * w * d * 8;
    if bytes.len() != expect {
        return Err(derr(format!(
            "tensor holds {} bytes, sidecar shape needs {expect}",
            bytes.len()
        )));
    }
    if sidecar.labels.len() != n {
        return Err(derr(format!(
            "{} labels for {n} samples",
            sidecar.labels.len()
        )));
    }
    sidecar.spec.validate().map_err(|e| derr(e.to_string()))?;
    if sidecar
        .labels
        .iter()
        .any(|&l| l >= sidecar.spec.num_classes)
    {
        return Err(derr("label out of class range".into()));
    }
    let mut grids = Vec::with_capacity(n);
    let mut at = 0;
    for _ in 0..n {
        let mut grid = Array3::zeros((h, w, d));
        for v in grid.iter_mut() {
            let mut buf = [0u8; 8];
            buf.copy_from_slice(&bytes[at..at + 8]);
            at += 8;
            let x = f64::from_le_bytes(buf);
            if !x.is_finite() {
                return Err(derr("non-finite tensor value".into()));
            }
            *v = x;
        }
        grids.push(grid);
    }
    Ok((
        Dataset {
            split: sidecar.split,
            seed: sidecar.seed,
            grids,
            labels: sidecar.labels,
        },
        sidecar.spec,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec::build(2, 2, 8, 4, 4, 0.05, 1.0, 6, 4, 4, &[1.5, 1.5], false).unwrap()
    }

    #[test]
    fn build_places_centers_on_distinct_axes() {
        let spec = small_spec();
        assert_eq!(spec.part_centers[0][0][0], 1.5);
        assert_eq!(spec.part_centers[0][1][1], 1.5);
        assert_eq!(spec.part_centers[1][0][2], 1.5);
        assert_eq!(spec.part_centers[1][1][3], 1.5);
        // Each center has exactly one nonzero coordinate.
        for parts in &spec.part_centers {
            for center in parts {
                assert_eq!(center.iter().filter(|&&v| v != 0.0).count(), 1);
            }
        }
    }

    #[test]
    fn shared_strong_part_shares_exactly_part_zero() {
        let spec =
            SyntheticSpec::build(3, 2, 8, 4, 4, 0.05, 1.0, 6, 4, 4, &[1.5, 0.5], true).unwrap();
        assert_eq!(spec.part_centers[0][0], spec.part_centers[1][0]);
        assert_eq!(spec.part_centers[1][0], spec.part_centers[2][0]);
        assert_ne!(spec.part_centers[0][1], spec.part_centers[1][1]);
        spec.validate().unwrap();
    }

    #[test]
    fn separation_invariant_is_enforced() {
        // Magnitudes so small the distinct centers sit closer than 4 sigma.
        let err = SyntheticSpec::build(2, 1, 8, 4, 4, 0.5, 1.0, 6, 4, 4, &[0.1], false)
            .unwrap_err();
        assert!(err.to_string().contains("apart"), "{err}");
    }

    #[test]
    fn too_many_parts_for_grid_is_rejected() {
        let err = SyntheticSpec::build(2, 5, 32, 2, 2, 0.05, 1.0, 6, 4, 4, &[1.5; 5], false)
            .unwrap_err();
        assert!(err.to_string().contains("grid too small"), "{err}");
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let spec = small_spec();
        let seeds = SeedStream::new(9);
        let a = generate_dataset(&spec, &seeds, Split::Train).unwrap();
        let b = generate_dataset(&spec, &seeds, Split::Train).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a.labels, b.labels);
        for (ga, gb) in a.grids.iter().zip(b.grids.iter()) {
            assert_eq!(ga, gb);
        }
        // Balanced, class-major.
        assert_eq!(a.labels[..6], [0; 6]);
        assert_eq!(a.labels[6..], [1; 6]);
        // Different splits differ.
        let t = generate_dataset(&spec, &seeds, Split::Test).unwrap();
        assert_ne!(t.grids[0], a.grids[0]);
    }

    #[test]
    fn zero_noise_plants_exact_centers() {
        let spec =
            SyntheticSpec::build(2, 2, 8, 3, 3, 0.0, 1.0, 2, 1, 1, &[1.5, 1.5], false).unwrap();
        let data = generate_dataset(&spec, &SeedStream::new(3), Split::Train).unwrap();
        for (grid, &label) in data.grids.iter().zip(data.labels.iter()) {
            // Exactly parts_per_class nonzero positions, each equal to a
            // center of the labeled class.
            let mut found = 0;
            for i in 0..3 {
                for j in 0..3 {
                    let v: Vec<f64> = (0..8).map(|d| grid[[i, j, d]]).collect();
                    if v.iter().any(|&x| x != 0.0) {
                        assert!(
                            spec.part_centers[label].contains(&v),
                            "unexpected planted vector {v:?}"
                        );
                        found += 1;
                    }
                }
            }
            assert_eq!(found, 2);
        }
    }

    #[test]
    fn ood_split_shifts_every_coordinate() {
        let spec =
            SyntheticSpec::build(2, 1, 4, 3, 3, 0.0, 0.75, 2, 1, 2, &[1.5], false).unwrap();
        let data = generate_dataset(&spec, &SeedStream::new(3), Split::Ood).unwrap();
        for (grid, &label) in data.grids.iter().zip(data.labels.iter()) {
            let mut found = 0;
            for i in 0..3 {
                for j in 0..3 {
                    let v: Vec<f64> = (0..4).map(|d| grid[[i, j, d]]).collect();
                    if v.iter().any(|&x| x != 0.0) {
                        let expect: Vec<f64> = spec.part_centers[label][0]
                            .iter()
                            .map(|&c| c + 0.75)
                            .collect();
                        assert_eq!(v, expect);
                        found += 1;
                    }
                }
            }
            assert_eq!(found, 1);
        }
    }

    #[test]
    fn part_positions_are_distinct_and_vary() {
        let spec = small_spec();
        let data = generate_dataset(&spec, &SeedStream::new(1), Split::Train).unwrap();
        // With sigma=0.05 and magnitude 1.5, planted positions are exactly
        // those whose max |coordinate| is large.
        let mut position_sets = std::collections::BTreeSet::new();
        for grid in &data.grids {
            let mut planted = Vec::new();
            for i in 0..4 {
                for j in 0..4 {
                    let maxabs = (0..8)
                        .map(|d| grid[[i, j, d]].abs())
                        .fold(0.0f64, f64::max);
                    if maxabs > 0.75 {
                        planted.push((i, j));
                    }
                }
            }
            assert_eq!(planted.len(), 2, "expected exactly two planted parts");
            position_sets.insert(planted);
        }
        // Positions are random: across 12 samples we must see variety.
        assert!(position_sets.len() > 1);
    }

    #[test]
    fn dataset_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let data = generate_dataset(&spec, &SeedStream::new(5), Split::Test).unwrap();
        let stem = dir.path().join("test");
        save_dataset(&stem, &data, &spec).unwrap();
        let (loaded, loaded_spec) = load_dataset(&stem.with_extension("bin")).unwrap();
        assert_eq!(loaded_spec, spec);
        assert_eq!(loaded.labels, data.labels);
        assert_eq!(loaded.split, Split::Test);
        for (a, b) in loaded.grids.iter().zip(data.grids.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn truncated_tensor_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let data = generate_dataset(&spec, &SeedStream::new(5), Split::Test).unwrap();
        let stem = dir.path().join("test");
        save_dataset(&stem, &data, &spec).unwrap();
        let bin = stem.with_extension("bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        let err = load_dataset(&bin).unwrap_err();
        assert!(err.to_string().contains("bytes"), "{err}");
    }

    #[test]
    fn missing_sidecar_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("x.bin");
        std::fs::write(&bin, b"").unwrap();
        let err = load_dataset(&bin).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
    }
}
