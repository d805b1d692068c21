//! Construction of (composite, real, mask) triplets by transferring
//! foreground illumination through the standard state.
//!
//! For a source image `a` with recorded patch colors, the foreground is
//! first converted to the standard illumination with the forward matching
//! matrix, then into a reference image's illumination with that image's
//! inverse matrix, and finally recomposed over the untouched background.
//! The builder persists composites, normalized reals, masks, and a JSON
//! manifest with a train/test split by source image.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::{fit_transform, PatchColors, PolyTransform};
use crate::error::{Error, Result};
use crate::raster::{BinaryMask, LinearImage};
use crate::util::fnv1a64;

pub const MANIFEST_VERSION: &str = "ccharmony-manifest/1";

/// One catalog record: a real image, its foreground masks, and the patch
/// colors read from the color checker in the scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotatedImage {
    pub image_path: PathBuf,
    pub mask_paths: Vec<PathBuf>,
    pub patch_colors: PatchColors,
}

impl AnnotatedImage {
    /// Identifier derived from the image file stem; used for naming and
    /// reference exclusion.
    pub fn source_id(&self) -> String {
        self.image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

/// An ordered catalog of annotated images with unique source ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "Vec<AnnotatedImage>", into = "Vec<AnnotatedImage>")]
pub struct Catalog {
    images: Vec<AnnotatedImage>,
}

impl Catalog {
    pub fn new(images: Vec<AnnotatedImage>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Precondition("catalog is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for img in &images {
            let id = img.source_id();
            if id.is_empty() {
                return Err(Error::Data(format!(
                    "image path {:?} has no usable file stem",
                    img.image_path
                )));
            }
            if !seen.insert(id.clone()) {
                return Err(Error::Data(format!("duplicate source id {id:?} in catalog")));
            }
            if img.mask_paths.is_empty() || img.mask_paths.len() > 2 {
                return Err(Error::Data(format!(
                    "image {id:?} lists {} masks; each image carries 1 or 2 foregrounds",
                    img.mask_paths.len()
                )));
            }
        }
        Ok(Self { images })
    }

    pub fn images(&self) -> &[AnnotatedImage] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn foreground_count(&self) -> usize {
        self.images.iter().map(|i| i.mask_paths.len()).sum()
    }

    /// Loads a catalog JSON; relative file paths are resolved against the
    /// catalog file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut catalog: Catalog = serde_json::from_str(&text)?;
        if let Some(dir) = path.parent() {
            for img in &mut catalog.images {
                if img.image_path.is_relative() {
                    img.image_path = dir.join(&img.image_path);
                }
                for m in &mut img.mask_paths {
                    if m.is_relative() {
                        *m = dir.join(&*m);
                    }
                }
            }
        }
        Ok(catalog)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

impl TryFrom<Vec<AnnotatedImage>> for Catalog {
    type Error = Error;

    fn try_from(v: Vec<AnnotatedImage>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Catalog> for Vec<AnnotatedImage> {
    fn from(c: Catalog) -> Self {
        c.images
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// How source images are assigned to splits. All foregrounds and
/// composites of one image land in one split.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSpec {
    /// Seeded shuffle of source ids; the first `train` fraction trains.
    Fraction { train: f64 },
    /// Exact test membership by source id.
    Explicit { test_sources: BTreeSet<String> },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Fraction { train: 0.8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuilderConfig {
    pub degree: u32,
    pub ridge: f64,
    pub seed: u64,
    pub references_per_foreground: usize,
    pub split: SplitSpec,
    /// Fitting happens on sRGB-encoded values; recorded for provenance.
    pub color_space: String,
}

impl BuilderConfig {
    pub fn new(references_per_foreground: usize, seed: u64) -> Self {
        Self {
            degree: 2,
            ridge: 0.0,
            seed,
            references_per_foreground,
            split: SplitSpec::default(),
            color_space: "srgb".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub composite_path: PathBuf,
    pub real_path: PathBuf,
    pub mask_path: PathBuf,
    pub source_id: String,
    pub reference_id: String,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub config: BuilderConfig,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "manifest version {:?} is not {MANIFEST_VERSION:?}",
                manifest.version
            )));
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// One planned triplet before any pixel work.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlannedEntry {
    pub source: usize,
    pub mask_idx: usize,
    pub reference: usize,
    pub split: Split,
}

/// Assigns splits and samples references for every foreground.
///
/// References are drawn uniformly without replacement from the catalog
/// excluding the source itself, from a stream keyed by (seed, source id,
/// mask index) so the plan does not depend on traversal order. This is
/// where the entry-count contract lives: `sum(masks) * refs` entries.
pub fn plan_entries(catalog: &Catalog, config: &BuilderConfig) -> Result<Vec<PlannedEntry>> {
    let n = catalog.len();
    let refs = config.references_per_foreground;
    if refs < 1 || refs > n.saturating_sub(1) {
        return Err(Error::Precondition(format!(
            "references_per_foreground = {refs} must be in 1..={} for a catalog of {n}",
            n.saturating_sub(1)
        )));
    }

    let split_of = assign_splits(catalog, config)?;
    let mut plan = Vec::new();
    for (src_idx, img) in catalog.images().iter().enumerate() {
        let source_id = img.source_id();
        for mask_idx in 0..img.mask_paths.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(fnv1a64(format!("ref/{source_id}/{mask_idx}").as_bytes()));
            let picks = rand::seq::index::sample(&mut rng, n - 1, refs);
            for pick in picks.iter() {
                let reference = if pick < src_idx { pick } else { pick + 1 };
                plan.push(PlannedEntry {
                    source: src_idx,
                    mask_idx,
                    reference,
                    split: split_of[src_idx],
                });
            }
        }
    }
    Ok(plan)
}

fn assign_splits(catalog: &Catalog, config: &BuilderConfig) -> Result<Vec<Split>> {
    match &config.split {
        SplitSpec::Explicit { test_sources } => Ok(catalog
            .images()
            .iter()
            .map(|img| {
                if test_sources.contains(&img.source_id()) {
                    Split::Test
                } else {
                    Split::Train
                }
            })
            .collect()),
        SplitSpec::Fraction { train } => {
            if !(0.0..=1.0).contains(train) {
                return Err(Error::Config(format!(
                    "train fraction {train} outside [0, 1]"
                )));
            }
            let n = catalog.len();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by_key(|&i| catalog.images()[i].source_id());
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(fnv1a64(b"split"));
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            let n_train = ((*train * n as f64).round() as usize).min(n);
            let mut splits = vec![Split::Test; n];
            for &i in order.iter().take(n_train) {
                splits[i] = Split::Train;
            }
            Ok(splits)
        }
    }
}

/// Converts the foreground of `source` into `reference`'s illumination
/// via the standard state. Background pixels are bit-identical to the
/// source; foreground pixels go through both transforms, clamped after
/// each application.
pub fn transfer_foreground(
    source: &LinearImage,
    source_patches: &PatchColors,
    mask: &BinaryMask,
    reference_patches: &PatchColors,
    standard: &PatchColors,
    degree: u32,
    ridge: f64,
) -> Result<LinearImage> {
    let forward = fit_transform(source_patches, standard, degree, ridge)?;
    let inverse = fit_transform(standard, reference_patches, degree, ridge)?;
    transfer_with_transforms(source, mask, &forward, &inverse)
}

/// Transfer with already-fitted transforms; the builder caches per-image
/// fits and funnels every entry through this.
pub fn transfer_with_transforms(
    source: &LinearImage,
    mask: &BinaryMask,
    forward: &PolyTransform,
    inverse: &PolyTransform,
) -> Result<LinearImage> {
    if !mask.matches_image(source) {
        return Err(Error::Shape(format!(
            "mask is {}x{} but image is {}x{}",
            mask.width(),
            mask.height(),
            source.width(),
            source.height()
        )));
    }
    if mask.count_true() == 0 {
        return Err(Error::Precondition(
            "foreground mask has no true pixels".into(),
        ));
    }
    let mut out = source.clone();
    for y in 0..source.height() {
        for x in 0..source.width() {
            if mask.get(x, y) {
                let standard_state = forward.apply_color(source.get(x, y).into())?;
                let transferred = inverse.apply_color(standard_state)?;
                out.set(x, y, transferred.to_array());
            }
        }
    }
    Ok(out)
}

struct LoadedSource {
    id: String,
    image: LinearImage,
    masks: Vec<BinaryMask>,
    forward: PolyTransform,
    inverse: PolyTransform,
}

/// Builds all composites and the manifest under `out_dir`.
///
/// Layout: `composites/{source}_{mask_idx}_{reference}.png`,
/// `reals/{source}.png`, `masks/{source}_{mask_idx}.png`, and
/// `manifest.json` with paths relative to `out_dir`. Reals are re-encoded
/// once so composite backgrounds are bit-identical to them. All failures
/// (unreadable files, size mismatches, empty masks, degenerate fits) are
/// listed together at the end of the run.
pub fn build_dataset(
    catalog: &Catalog,
    standard: &PatchColors,
    config: &BuilderConfig,
    out_dir: &Path,
    jobs: usize,
) -> Result<DatasetManifest> {
    let plan = plan_entries(catalog, config)?;

    let mut failures: Vec<String> = Vec::new();
    let mut sources: Vec<Option<LoadedSource>> = Vec::new();
    for img in catalog.images() {
        let id = img.source_id();
        match load_source(img, standard, config) {
            Ok(loaded) => sources.push(Some(loaded)),
            Err(e) => {
                failures.push(format!("{id}: {e}"));
                sources.push(None);
            }
        }
    }
    if !failures.is_empty() {
        return Err(Error::Build(format!(
            "{} source(s) failed to load:\n  {}",
            failures.len(),
            failures.join("\n  ")
        )));
    }
    let sources: Vec<LoadedSource> = sources.into_iter().map(|s| s.unwrap()).collect();

    for sub in ["composites", "reals", "masks"] {
        let dir = out_dir.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }

    // Reals and masks once per source.
    for src in &sources {
        src.image
            .save_png(&out_dir.join("reals").join(format!("{}.png", src.id)))?;
        for (mask_idx, mask) in src.masks.iter().enumerate() {
            mask.save_png(&out_dir.join("masks").join(format!("{}_{}.png", src.id, mask_idx)))?;
        }
    }

    let build_one = |entry: &PlannedEntry| -> Result<ManifestEntry> {
        let src = &sources[entry.source];
        let reference = &sources[entry.reference];
        let composite = transfer_with_transforms(
            &src.image,
            &src.masks[entry.mask_idx],
            &src.forward,
            &reference.inverse,
        )
        .map_err(|e| Error::Build(format!("{} -> {}: {e}", src.id, reference.id)))?;
        let name = format!("{}_{}_{}.png", src.id, entry.mask_idx, reference.id);
        composite.save_png(&out_dir.join("composites").join(&name))?;
        Ok(ManifestEntry {
            composite_path: PathBuf::from("composites").join(&name),
            real_path: PathBuf::from("reals").join(format!("{}.png", src.id)),
            mask_path: PathBuf::from("masks").join(format!("{}_{}.png", src.id, entry.mask_idx)),
            source_id: src.id.clone(),
            reference_id: reference.id.clone(),
            split: entry.split,
        })
    };

    let results: Vec<Result<ManifestEntry>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            plan.par_iter().map(build_one).collect()
        })
    } else {
        plan.iter().map(build_one).collect()
    };

    let mut entries = Vec::with_capacity(results.len());
    let mut entry_failures = Vec::new();
    for r in results {
        match r {
            Ok(e) => entries.push(e),
            Err(e) => entry_failures.push(e.to_string()),
        }
    }
    if !entry_failures.is_empty() {
        return Err(Error::Build(format!(
            "{} entr(ies) failed:\n  {}",
            entry_failures.len(),
            entry_failures.join("\n  ")
        )));
    }

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION.to_string(),
        config: config.clone(),
        entries,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

fn load_source(
    img: &AnnotatedImage,
    standard: &PatchColors,
    config: &BuilderConfig,
) -> Result<LoadedSource> {
    let image = LinearImage::load_png(&img.image_path)?;
    let mut masks = Vec::new();
    for path in &img.mask_paths {
        let mask = BinaryMask::load_png(path)?;
        if !mask.matches_image(&image) {
            return Err(Error::Shape(format!(
                "mask {:?} is {}x{} but image is {}x{}",
                path,
                mask.width(),
                mask.height(),
                image.width(),
                image.height()
            )));
        }
        if mask.count_true() == 0 {
            return Err(Error::Precondition(format!(
                "mask {path:?} has no foreground pixels"
            )));
        }
        masks.push(mask);
    }
    let forward = fit_transform(&img.patch_colors, standard, config.degree, config.ridge)
        .map_err(|e| Error::Build(format!("forward fit for {:?}: {e}", img.image_path)))?;
    let inverse = fit_transform(standard, &img.patch_colors, config.degree, config.ridge)
        .map_err(|e| Error::Build(format!("inverse fit for {:?}: {e}", img.image_path)))?;
    Ok(LoadedSource {
        id: img.source_id(),
        image,
        masks,
        forward,
        inverse,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Violation {
    MissingPath { entry: usize, path: PathBuf },
    SizeMismatch { entry: usize, detail: String },
    BackgroundMismatch { entry: usize, pixels: usize },
    SplitOverlap { source_id: String },
    DuplicateTriplet { entry: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::MissingPath { entry, path } => {
                write!(f, "entry {entry}: missing file {path:?}")
            }
            Violation::SizeMismatch { entry, detail } => {
                write!(f, "entry {entry}: size mismatch ({detail})")
            }
            Violation::BackgroundMismatch { entry, pixels } => {
                write!(f, "entry {entry}: {pixels} background pixel(s) differ from real image")
            }
            Violation::SplitOverlap { source_id } => {
                write!(f, "source {source_id:?} appears in both splits")
            }
            Violation::DuplicateTriplet { entry } => {
                write!(f, "entry {entry}: duplicate (source, reference, mask) triplet")
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub entries_checked: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks a built dataset: file existence, size agreement, background
/// bit-equality outside the mask, split disjointness per source, and
/// triplet uniqueness. Violations are report items, not errors.
pub fn validate_manifest(manifest: &DatasetManifest, manifest_dir: &Path) -> ValidationReport {
    let mut violations = Vec::new();

    let mut split_by_source: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    let mut triplets = BTreeSet::new();
    for (idx, entry) in manifest.entries.iter().enumerate() {
        split_by_source
            .entry(&entry.source_id)
            .or_default()
            .insert(entry.split);
        if !triplets.insert((
            entry.source_id.clone(),
            entry.reference_id.clone(),
            entry.mask_path.clone(),
        )) {
            violations.push(Violation::DuplicateTriplet { entry: idx });
        }

        let mut all_present = true;
        for rel in [&entry.composite_path, &entry.real_path, &entry.mask_path] {
            let path = manifest_dir.join(rel);
            if !path.is_file() {
                violations.push(Violation::MissingPath {
                    entry: idx,
                    path: rel.clone(),
                });
                all_present = false;
            }
        }
        if !all_present {
            continue;
        }

        let composite = LinearImage::load_png(&manifest_dir.join(&entry.composite_path));
        let real = LinearImage::load_png(&manifest_dir.join(&entry.real_path));
        let mask = BinaryMask::load_png(&manifest_dir.join(&entry.mask_path));
        let (composite, real, mask) = match (composite, real, mask) {
            (Ok(c), Ok(r), Ok(m)) => (c, r, m),
            _ => {
                violations.push(Violation::SizeMismatch {
                    entry: idx,
                    detail: "unreadable file".into(),
                });
                continue;
            }
        };

        if !composite.same_size(&real) || !mask.matches_image(&real) {
            violations.push(Violation::SizeMismatch {
                entry: idx,
                detail: format!(
                    "composite {}x{}, real {}x{}, mask {}x{}",
                    composite.width(),
                    composite.height(),
                    real.width(),
                    real.height(),
                    mask.width(),
                    mask.height()
                ),
            });
            continue;
        }

        let mut bad_pixels = 0usize;
        for y in 0..real.height() {
            for x in 0..real.width() {
                if !mask.get(x, y) && composite.get(x, y) != real.get(x, y) {
                    bad_pixels += 1;
                }
            }
        }
        if bad_pixels > 0 {
            violations.push(Violation::BackgroundMismatch {
                entry: idx,
                pixels: bad_pixels,
            });
        }
    }

    for (source_id, splits) in split_by_source {
        if splits.len() > 1 {
            violations.push(Violation::SplitOverlap {
                source_id: source_id.to_string(),
            });
        }
    }

    ValidationReport {
        entries_checked: manifest.entries.len(),
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn synthetic_standard(rng: &mut ChaCha8Rng) -> PatchColors {
        let colors: Vec<crate::color::Rgb> = (0..24)
            .map(|_| {
                crate::color::Rgb::new(
                    rng.gen_range(0.25..0.75),
                    rng.gen_range(0.25..0.75),
                    rng.gen_range(0.25..0.75),
                )
            })
            .collect();
        PatchColors::from_slice(&colors).unwrap()
    }

    /// Invertible affine map, gentle enough to keep patches in [0, 1];
    /// affine maps fit exactly in the degree-2 class in both directions.
    fn gentle_affine(rng: &mut ChaCha8Rng) -> ([[f64; 3]; 3], [f64; 3]) {
        let mut linear = [[0.0; 3]; 3];
        for (i, row) in linear.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if i == j { 1.0 } else { 0.0 } + rng.gen_range(-0.05..0.05);
            }
        }
        let offset = [
            rng.gen_range(-0.03..0.03),
            rng.gen_range(-0.03..0.03),
            rng.gen_range(-0.03..0.03),
        ];
        (linear, offset)
    }

    fn apply_affine(
        map: &([[f64; 3]; 3], [f64; 3]),
        c: crate::color::Rgb,
    ) -> crate::color::Rgb {
        let x = c.to_array();
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] = map.1[i];
            for j in 0..3 {
                out[i] += map.0[i][j] * x[j];
            }
        }
        crate::color::Rgb::new(out[0], out[1], out[2])
    }

    fn patches_under(map: &([[f64; 3]; 3], [f64; 3]), base: &PatchColors) -> PatchColors {
        let colors: Vec<crate::color::Rgb> =
            base.colors().iter().map(|c| apply_affine(map, *c)).collect();
        PatchColors::from_slice(&colors).unwrap()
    }

    fn smooth_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> LinearImage {
        let base = [
            rng.gen_range(0.3..0.6),
            rng.gen_range(0.3..0.6),
            rng.gen_range(0.3..0.6),
        ];
        let mut img = LinearImage::new(w, h).unwrap();
        for y in 0..h {
            for x in 0..w {
                let fx = x as f64 / w as f64;
                let fy = y as f64 / h as f64;
                img.set(
                    x,
                    y,
                    [
                        (base[0] + 0.2 * fx).clamp(0.0, 1.0),
                        (base[1] + 0.2 * fy).clamp(0.0, 1.0),
                        (base[2] + 0.1 * fx * fy).clamp(0.0, 1.0),
                    ],
                );
            }
        }
        img
    }

    fn rect_mask(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
        let mut m = BinaryMask::filled(w, h, false).unwrap();
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(x, y, true);
            }
        }
        m
    }

    /// Writes a toy catalog of `n` images (the first carries two masks)
    /// to disk and returns it with the synthetic standard patches.
    fn toy_catalog(dir: &Path, n: usize, seed: u64) -> (Catalog, PatchColors) {
        std::fs::create_dir_all(dir).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let standard = synthetic_standard(&mut rng);
        let mut images = Vec::new();
        for i in 0..n {
            let img = smooth_image(&mut rng, 16, 16);
            let map = gentle_affine(&mut rng);
            let patches = patches_under(&map, &standard);
            let image_path = dir.join(format!("img{i}.png"));
            img.save_png(&image_path).unwrap();
            let mut mask_paths = vec![dir.join(format!("img{i}_m0.png"))];
            rect_mask(16, 16, 2, 2, 9, 9).save_png(&mask_paths[0]).unwrap();
            if i == 0 {
                let second = dir.join("img0_m1.png");
                rect_mask(16, 16, 10, 10, 15, 15).save_png(&second).unwrap();
                mask_paths.push(second);
            }
            images.push(AnnotatedImage {
                image_path,
                mask_paths,
                patch_colors: patches,
            });
        }
        (Catalog::new(images).unwrap(), standard)
    }

    #[test]
    fn self_transfer_is_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let standard = synthetic_standard(&mut rng);
        let map = gentle_affine(&mut rng);
        let patches = patches_under(&map, &standard);
        let img = smooth_image(&mut rng, 12, 12);
        let mask = rect_mask(12, 12, 3, 3, 9, 9);
        let out =
            transfer_foreground(&img, &patches, &mask, &patches, &standard, 2, 0.0).unwrap();
        for y in 0..12 {
            for x in 0..12 {
                let a = img.get(x, y);
                let b = out.get(x, y);
                if mask.get(x, y) {
                    for c in 0..3 {
                        assert!(
                            (a[c] - b[c]).abs() <= 1e-5,
                            "({x},{y})[{c}]: {} vs {}",
                            a[c],
                            b[c]
                        );
                    }
                } else {
                    assert_eq!(a, b, "background changed at ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn transfer_matches_composed_known_maps() {
        // Source patches arbitrary; standard and reference patches exact
        // quadratic images of them, so both fits recover the known maps.
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let source_patches = synthetic_standard(&mut rng);
        let known_fwd = crate::color::tests::random_gentle_quadratic(&mut rng);
        let standard_colors: Vec<crate::color::Rgb> = source_patches
            .colors()
            .iter()
            .map(|c| crate::color::tests::eval_matrix(&known_fwd, *c))
            .collect();
        let standard = PatchColors::from_slice(&standard_colors).unwrap();
        let known_inv = crate::color::tests::random_gentle_quadratic(&mut rng);
        let ref_colors: Vec<crate::color::Rgb> = standard
            .colors()
            .iter()
            .map(|c| crate::color::tests::eval_matrix(&known_inv, *c))
            .collect();
        let reference = PatchColors::from_slice(&ref_colors).unwrap();

        let img = smooth_image(&mut rng, 8, 8);
        let mask = rect_mask(8, 8, 1, 1, 7, 7);
        let out =
            transfer_foreground(&img, &source_patches, &mask, &reference, &standard, 2, 0.0)
                .unwrap();

        let clamp3 = |c: crate::color::Rgb| {
            crate::color::Rgb::new(
                c.r.clamp(0.0, 1.0),
                c.g.clamp(0.0, 1.0),
                c.b.clamp(0.0, 1.0),
            )
        };
        for y in 0..8 {
            for x in 0..8 {
                if mask.get(x, y) {
                    let mid = clamp3(crate::color::tests::eval_matrix(
                        &known_fwd,
                        img.get(x, y).into(),
                    ));
                    let expect = clamp3(crate::color::tests::eval_matrix(&known_inv, mid));
                    let got = out.get(x, y);
                    for c in 0..3 {
                        assert!(
                            (got[c] - expect.to_array()[c]).abs() <= 1e-5,
                            "({x},{y})[{c}]"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn empty_mask_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let standard = synthetic_standard(&mut rng);
        let img = smooth_image(&mut rng, 8, 8);
        let mask = BinaryMask::filled(8, 8, false).unwrap();
        assert!(matches!(
            transfer_foreground(&img, &standard, &mask, &standard, &standard, 2, 0.0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn plan_counts_and_reference_exclusion() {
        let dir = tempfile::tempdir().unwrap();
        let (catalog, _) = toy_catalog(dir.path(), 3, 7);
        // 3 images, image 0 has 2 masks: 4 foregrounds x 2 refs = 8.
        let config = BuilderConfig::new(2, 0);
        let plan = plan_entries(&catalog, &config).unwrap();
        assert_eq!(plan.len(), 8);
        for e in &plan {
            assert_ne!(e.source, e.reference);
        }
        // Distinct references per foreground.
        let mut seen = BTreeSet::new();
        for e in &plan {
            assert!(seen.insert((e.source, e.mask_idx, e.reference)));
        }
    }

    #[test]
    fn plan_scales_linearly_with_refs() {
        let dir = tempfile::tempdir().unwrap();
        let (catalog, _) = toy_catalog(dir.path(), 4, 11);
        let one = plan_entries(&catalog, &BuilderConfig::new(1, 5)).unwrap();
        let two = plan_entries(&catalog, &BuilderConfig::new(2, 5)).unwrap();
        assert_eq!(two.len(), 2 * one.len());
    }

    #[test]
    fn paper_scale_counts() {
        // 250 train images with 308 foregrounds, 100 test with 118;
        // 10 references each: 3080 and 1180 pairs.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let standard = synthetic_standard(&mut rng);
        let mut images = Vec::new();
        let mut test_sources = BTreeSet::new();
        for i in 0..350 {
            let (two_masks, test) = if i < 250 {
                (i < 58, false) // 58 doubles + 192 singles = 308
            } else {
                (i < 250 + 18, true) // 18 doubles + 82 singles = 118
            };
            let id = format!("img{i:03}");
            if test {
                test_sources.insert(id.clone());
            }
            let mut mask_paths = vec![PathBuf::from(format!("{id}_m0.png"))];
            if two_masks {
                mask_paths.push(PathBuf::from(format!("{id}_m1.png")));
            }
            images.push(AnnotatedImage {
                image_path: PathBuf::from(format!("{id}.png")),
                mask_paths,
                patch_colors: standard.clone(),
            });
        }
        let catalog = Catalog::new(images).unwrap();
        assert_eq!(catalog.foreground_count(), 426);
        let mut config = BuilderConfig::new(10, 0);
        config.split = SplitSpec::Explicit { test_sources };
        let plan = plan_entries(&catalog, &config).unwrap();
        let train = plan.iter().filter(|e| e.split == Split::Train).count();
        let test = plan.iter().filter(|e| e.split == Split::Test).count();
        assert_eq!(train, 3080);
        assert_eq!(test, 1180);
    }

    #[test]
    fn refs_out_of_range_is_precondition_error() {
        let dir = tempfile::tempdir().unwrap();
        let (catalog, _) = toy_catalog(dir.path(), 3, 13);
        assert!(matches!(
            plan_entries(&catalog, &BuilderConfig::new(3, 0)),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            plan_entries(&catalog, &BuilderConfig::new(0, 0)),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn build_validate_and_rerun_identically() {
        let dir = tempfile::tempdir().unwrap();
        let (catalog, standard) = toy_catalog(&dir.path().join("src"), 3, 17);

        let config = BuilderConfig::new(2, 9);
        let out_a = dir.path().join("out_a");
        let out_b = dir.path().join("out_b");
        let manifest_a = build_dataset(&catalog, &standard, &config, &out_a, 1).unwrap();
        let manifest_b = build_dataset(&catalog, &standard, &config, &out_b, 2).unwrap();
        assert_eq!(manifest_a.entries.len(), 8);
        assert_eq!(manifest_a.entries, manifest_b.entries);

        let report = validate_manifest(&manifest_a, &out_a);
        assert!(report.is_clean(), "violations: {:?}", report.violations);

        // Byte-identical outputs across runs (including the parallel one).
        for entry in &manifest_a.entries {
            let a = std::fs::read(out_a.join(&entry.composite_path)).unwrap();
            let b = std::fs::read(out_b.join(&entry.composite_path)).unwrap();
            assert_eq!(a, b, "composite bytes differ for {:?}", entry.composite_path);
        }
        let ma = std::fs::read(out_a.join("manifest.json")).unwrap();
        let mb = std::fs::read(out_b.join("manifest.json")).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn validation_flags_injected_faults() {
        let dir = tempfile::tempdir().unwrap();
        let (catalog, standard) = toy_catalog(&dir.path().join("src"), 3, 19);
        let out = dir.path().join("out");
        let manifest = build_dataset(&catalog, &standard, &BuilderConfig::new(1, 1), &out, 1)
            .unwrap();

        // Perturb one background pixel of the first composite.
        let comp_path = out.join(&manifest.entries[0].composite_path);
        let mask = BinaryMask::load_png(&out.join(&manifest.entries[0].mask_path)).unwrap();
        let mut composite = LinearImage::load_png(&comp_path).unwrap();
        let (mut bx, mut by) = (usize::MAX, 0);
        'outer: for y in 0..mask.height() {
            for x in 0..mask.width() {
                if !mask.get(x, y) {
                    (bx, by) = (x, y);
                    break 'outer;
                }
            }
        }
        let old = composite.get(bx, by);
        composite.set(bx, by, [(old[0] + 0.5) % 1.0, old[1], old[2]]);
        composite.save_png(&comp_path).unwrap();

        let report = validate_manifest(&manifest, &out);
        let bg: Vec<_> = report
            .violations
            .iter()
            .filter(|v| matches!(v, Violation::BackgroundMismatch { .. }))
            .collect();
        assert_eq!(bg.len(), 1);
        assert!(matches!(
            bg[0],
            Violation::BackgroundMismatch { entry: 0, pixels: 1 }
        ));

        // Delete a referenced file.
        std::fs::remove_file(out.join(&manifest.entries[1].composite_path)).unwrap();
        let report = validate_manifest(&manifest, &out);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::MissingPath { entry: 1, .. })));
    }

    #[test]
    fn catalog_rejects_bad_mask_counts() {
        let img = AnnotatedImage {
            image_path: PathBuf::from("a.png"),
            mask_paths: vec![],
            patch_colors: PatchColors::colorchecker_srgb(),
        };
        assert!(matches!(Catalog::new(vec![img]), Err(Error::Data(_))));
    }

    #[test]
    fn catalog_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let (catalog, _) = toy_catalog(dir.path(), 3, 29);
        let path = dir.path().join("catalog.json");
        catalog.save(&path).unwrap();
        let loaded = Catalog::load(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded.images()[0].source_id(), "img0");
        assert_eq!(loaded.images()[0].mask_paths.len(), 2);
    }

    #[test]
    fn fraction_split_is_by_source() {
        let dir = tempfile::tempdir().unwrap();
        let (catalog, _) = toy_catalog(dir.path(), 5, 31);
        let mut config = BuilderConfig::new(2, 23);
        config.split = SplitSpec::Fraction { train: 0.6 };
        let plan = plan_entries(&catalog, &config).unwrap();
        let mut by_source: BTreeMap<usize, BTreeSet<Split>> = BTreeMap::new();
        for e in &plan {
            by_source.entry(e.source).or_default().insert(e.split);
        }
        for (_, splits) in by_source {
            assert_eq!(splits.len(), 1);
        }
        let train_sources: BTreeSet<usize> = plan
            .iter()
            .filter(|e| e.split == Split::Train)
            .map(|e| e.source)
            .collect();
        assert_eq!(train_sources.len(), 3); // round(0.6 * 5)
    }
}
