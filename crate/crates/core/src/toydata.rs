//! Procedural multimodal corpus: a flat-shaded cartoon "face" per sample with
//! its semantic mask, edge sketch, and symbolic caption.
//!
//! Every pixel is painted from a fixed palette, so nearest-palette-color
//! classification of a rendered image recovers its mask exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::par::{self, Exec};
use crate::raster::{LabelRaster, RgbImage};
use crate::rng::{self, Stream};
use crate::{Error, Result};

/// Number of semantic mask classes.
pub const NUM_CLASSES: usize = 5;

pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_SKIN: u8 = 1;
pub const CLASS_HAIR: u8 = 2;
pub const CLASS_EYES: u8 = 3;
pub const CLASS_ACCESSORY: u8 = 4;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "skin", "hair", "eyes", "accessory"];

/// Colors used to rasterize a label mask into a condition image.
pub const MASK_PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [0, 0, 0],
    [255, 0, 0],
    [0, 255, 0],
    [0, 0, 255],
    [255, 255, 0],
];

pub const NULL_TOKEN: u32 = 0;

/// Caption vocabulary in canonical order; index is the token id.
pub const VOCAB: [&str; 16] = [
    "NULL",
    "BG_SLATE",
    "BG_OLIVE",
    "BG_LAVENDER",
    "FACE_ROUND",
    "FACE_OVAL",
    "FACE_WIDE",
    "HAIR_BLACK",
    "HAIR_BROWN",
    "HAIR_RED",
    "HAIR_BLOND",
    "EYES_BLUE",
    "EYES_GREEN",
    "EYES_AMBER",
    "ACC_NONE",
    "ACC_EARRINGS",
];

pub const VOCAB_SIZE: usize = VOCAB.len();

/// One attribute slot of the caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Background,
    Face,
    Hair,
    Eyes,
    Accessory,
}

impl Attribute {
    pub const ALL: [Attribute; 5] = [
        Attribute::Background,
        Attribute::Face,
        Attribute::Hair,
        Attribute::Eyes,
        Attribute::Accessory,
    ];

    /// Number of values this attribute takes.
    pub fn cardinality(self) -> usize {
        match self {
            Attribute::Background => 3,
            Attribute::Face => 3,
            Attribute::Hair => 4,
            Attribute::Eyes => 3,
            Attribute::Accessory => 2,
        }
    }

    /// Token id of value 0 of this attribute.
    pub fn first_token(self) -> u32 {
        match self {
            Attribute::Background => 1,
            Attribute::Face => 4,
            Attribute::Hair => 7,
            Attribute::Eyes => 11,
            Attribute::Accessory => 14,
        }
    }

    pub fn token(self, value: usize) -> u32 {
        debug_assert!(value < self.cardinality());
        self.first_token() + value as u32
    }

    /// The attribute and value a (non-null) token names.
    pub fn of_token(token: u32) -> Option<(Attribute, usize)> {
        Attribute::ALL.into_iter().find_map(|a| {
            let first = a.first_token();
            (token >= first && token < first + a.cardinality() as u32).then(|| (a, (token - first) as usize))
        })
    }

    /// Mask class whose color this attribute controls, if any.
    pub fn class(self) -> Option<u8> {
        match self {
            Attribute::Background => Some(CLASS_BACKGROUND),
            Attribute::Face => None,
            Attribute::Hair => Some(CLASS_HAIR),
            Attribute::Eyes => Some(CLASS_EYES),
            Attribute::Accessory => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ToyAttributes {
    pub background_class: u8,
    pub face_shape: u8,
    pub hair_class: u8,
    pub eye_class: u8,
    pub accessory_flag: bool,
}

impl ToyAttributes {
    pub fn value(&self, a: Attribute) -> usize {
        match a {
            Attribute::Background => self.background_class as usize,
            Attribute::Face => self.face_shape as usize,
            Attribute::Hair => self.hair_class as usize,
            Attribute::Eyes => self.eye_class as usize,
            Attribute::Accessory => usize::from(self.accessory_flag),
        }
    }

    pub fn with_value(mut self, a: Attribute, v: usize) -> Self {
        let v8 = v as u8;
        match a {
            Attribute::Background => self.background_class = v8,
            Attribute::Face => self.face_shape = v8,
            Attribute::Hair => self.hair_class = v8,
            Attribute::Eyes => self.eye_class = v8,
            Attribute::Accessory => self.accessory_flag = v != 0,
        }
        self
    }

    pub fn is_valid(&self) -> bool {
        Attribute::ALL.iter().all(|&a| self.value(a) < a.cardinality())
    }

    /// Caption tokens in canonical order background, face, hair, eyes, accessory.
    pub fn caption(&self) -> Vec<u32> {
        Attribute::ALL.iter().map(|&a| a.token(self.value(a))).collect()
    }

    /// Inverse of [`ToyAttributes::caption`]; requires every slot exactly once.
    pub fn from_caption(tokens: &[u32]) -> Result<Self> {
        let mut values: BTreeMap<Attribute, usize> = BTreeMap::new();
        for &t in tokens {
            let (a, v) = Attribute::of_token(t).ok_or_else(|| Error::Input(format!("token {t} is not an attribute")))?;
            if values.insert(a, v).is_some() {
                return Err(Error::Input(format!("attribute {a:?} repeated")));
            }
        }
        let mut attrs = ToyAttributes {
            background_class: 0,
            face_shape: 0,
            hair_class: 0,
            eye_class: 0,
            accessory_flag: false,
        };
        for a in Attribute::ALL {
            let v = values.get(&a).ok_or_else(|| Error::Input(format!("caption lacks {a:?}")))?;
            attrs = attrs.with_value(a, *v);
        }
        Ok(attrs)
    }
}

/// Parses space-separated token names into canonically ordered ids.
pub fn parse_caption(text: &str) -> Result<Vec<u32>> {
    let mut ids = Vec::new();
    for word in text.split_whitespace() {
        let id = VOCAB
            .iter()
            .position(|v| v.eq_ignore_ascii_case(word))
            .ok_or_else(|| Error::Input(format!("unknown caption token {word:?}")))?;
        if id as u32 != NULL_TOKEN {
            ids.push(id as u32);
        }
    }
    ids.sort_unstable();
    ids.dedup();
    let mut seen = std::collections::HashSet::new();
    for &id in &ids {
        let (a, _) = Attribute::of_token(id).expect("vocabulary token");
        if !seen.insert(a) {
            return Err(Error::Input(format!("caption names {a:?} twice")));
        }
    }
    if ids.is_empty() {
        ids.push(NULL_TOKEN);
    }
    Ok(ids)
}

pub fn caption_text(tokens: &[u32]) -> String {
    tokens
        .iter()
        .map(|&t| VOCAB.get(t as usize).copied().unwrap_or("?"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// One entry of the rendering palette.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PaletteEntry {
    pub class: u8,
    /// Attribute value selecting this color (0 for classes with a single color).
    pub variant: u8,
    pub rgb: [u8; 3],
}

/// Image palette, sorted by class so ties resolve to the lowest class.
pub const PALETTE: [PaletteEntry; 12] = [
    PaletteEntry { class: CLASS_BACKGROUND, variant: 0, rgb: [60, 80, 160] },
    PaletteEntry { class: CLASS_BACKGROUND, variant: 1, rgb: [110, 150, 60] },
    PaletteEntry { class: CLASS_BACKGROUND, variant: 2, rgb: [170, 120, 200] },
    PaletteEntry { class: CLASS_SKIN, variant: 0, rgb: [235, 190, 150] },
    PaletteEntry { class: CLASS_HAIR, variant: 0, rgb: [20, 20, 20] },
    PaletteEntry { class: CLASS_HAIR, variant: 1, rgb: [120, 70, 30] },
    PaletteEntry { class: CLASS_HAIR, variant: 2, rgb: [210, 40, 30] },
    PaletteEntry { class: CLASS_HAIR, variant: 3, rgb: [240, 220, 80] },
    PaletteEntry { class: CLASS_EYES, variant: 0, rgb: [30, 120, 255] },
    PaletteEntry { class: CLASS_EYES, variant: 1, rgb: [20, 200, 120] },
    PaletteEntry { class: CLASS_EYES, variant: 2, rgb: [200, 120, 0] },
    PaletteEntry { class: CLASS_ACCESSORY, variant: 0, rgb: [255, 0, 255] },
];

fn palette_color(class: u8, variant: u8) -> [u8; 3] {
    PALETTE
        .iter()
        .find(|e| e.class == class && e.variant == variant)
        .map(|e| e.rgb)
        .expect("palette covers every (class, variant)")
}

/// Index into [`PALETTE`] of the color nearest to `rgb` (squared distance, first wins ties).
pub fn nearest_palette_entry(rgb: [u8; 3]) -> usize {
    let mut best = 0;
    let mut best_d = u32::MAX;
    for (i, e) in PALETTE.iter().enumerate() {
        let d: u32 = (0..3)
            .map(|c| {
                let diff = rgb[c] as i32 - e.rgb[c] as i32;
                (diff * diff) as u32
            })
            .sum();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToySample {
    pub sample_id: u64,
    pub image: RgbImage,
    pub mask: LabelRaster,
    pub sketch: LabelRaster,
    pub caption: Vec<u32>,
    pub attributes: ToyAttributes,
}

pub fn check_size(size: usize) -> Result<()> {
    if size == 32 || size == 64 {
        Ok(())
    } else {
        Err(Error::Config(format!("image size must be 32 or 64, got {size}")))
    }
}

/// Renders sample `sample_id` of the corpus keyed by `seed`.
pub fn synthesize_scene(seed: u64, sample_id: u64, size: usize) -> Result<ToySample> {
    check_size(size)?;
    let mut rng = rng::keyed(seed, Stream::Scene, sample_id, 0);
    let attributes = ToyAttributes {
        background_class: rng.random_range(0..Attribute::Background.cardinality()) as u8,
        face_shape: rng.random_range(0..Attribute::Face.cardinality()) as u8,
        hair_class: rng.random_range(0..Attribute::Hair.cardinality()) as u8,
        eye_class: rng.random_range(0..Attribute::Eyes.cardinality()) as u8,
        accessory_flag: rng.random_bool(0.5),
    };
    let u = size as f64 / 32.0;
    let cx = size as f64 / 2.0 + rng.random_range(-4.0..4.0) * u;
    let cy = size as f64 / 2.0 + 1.0 + rng.random_range(-3.0..3.0) * u;
    let scale = rng.random_range(0.85..1.1) * u;
    let (rx, ry) = match attributes.face_shape {
        0 => (8.5, 8.5),
        1 => (7.0, 10.0),
        _ => (10.5, 8.0),
    };
    let (rx, ry) = (rx * scale, ry * scale);
    let hair_pad = rng.random_range(2.0..3.5) * u;
    let hair_line = cy - ry * rng.random_range(0.05..0.35);
    let eye_r = 1.7 * u;
    let eye_dx = 0.42 * rx;
    let eye_y = cy - 0.12 * ry;
    let ring_r = 1.6 * u;
    let ring_y = cy + 0.25 * ry;

    let label_at = |px: f64, py: f64| -> u8 {
        let inside = |ex: f64, ey: f64, ax: f64, ay: f64| {
            let (dx, dy) = ((px - ex) / ax, (py - ey) / ay);
            dx * dx + dy * dy <= 1.0
        };
        let mut label = CLASS_BACKGROUND;
        if py < hair_line && inside(cx, cy, rx + hair_pad, ry + hair_pad) {
            label = CLASS_HAIR;
        }
        if inside(cx, cy, rx, ry) {
            label = CLASS_SKIN;
        }
        if inside(cx - eye_dx, eye_y, eye_r, eye_r) || inside(cx + eye_dx, eye_y, eye_r, eye_r) {
            label = CLASS_EYES;
        }
        if attributes.accessory_flag
            && (inside(cx - rx - 0.3 * u, ring_y, ring_r, ring_r) || inside(cx + rx + 0.3 * u, ring_y, ring_r, ring_r))
        {
            label = CLASS_ACCESSORY;
        }
        label
    };

    let mut mask = LabelRaster::new(size, size);
    let mut image = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let label = label_at(x as f64 + 0.5, y as f64 + 0.5);
            mask.set(x, y, label);
            let variant = match label {
                CLASS_BACKGROUND => attributes.background_class,
                CLASS_HAIR => attributes.hair_class,
                CLASS_EYES => attributes.eye_class,
                _ => 0,
            };
            image.put(x, y, palette_color(label, variant));
        }
    }
    let sketch = sketch_of(&mask);
    Ok(ToySample {
        sample_id,
        caption: attributes.caption(),
        image,
        mask,
        sketch,
        attributes,
    })
}

/// Marks both pixels of every 4-neighbor pair whose labels differ.
pub fn sketch_of(mask: &LabelRaster) -> LabelRaster {
    let (w, h) = (mask.width, mask.height);
    let mut out = LabelRaster::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let l = mask.get(x, y);
            if x + 1 < w && mask.get(x + 1, y) != l {
                out.set(x, y, 1);
                out.set(x + 1, y, 1);
            }
            if y + 1 < h && mask.get(x, y + 1) != l {
                out.set(x, y, 1);
                out.set(x, y + 1, 1);
            }
        }
    }
    out
}

/// Condition image of a mask: each class painted in its [`MASK_PALETTE`] color.
pub fn mask_to_rgb(mask: &LabelRaster) -> RgbImage {
    let mut img = RgbImage::new(mask.width, mask.height);
    for y in 0..mask.height {
        for x in 0..mask.width {
            img.put(x, y, MASK_PALETTE[mask.get(x, y) as usize % NUM_CLASSES]);
        }
    }
    img
}

/// Condition image of a sketch: edges white on black.
pub fn sketch_to_rgb(sketch: &LabelRaster) -> RgbImage {
    let mut img = RgbImage::new(sketch.width, sketch.height);
    for y in 0..sketch.height {
        for x in 0..sketch.width {
            let v = if sketch.get(x, y) != 0 { 255 } else { 0 };
            img.put(x, y, [v, v, v]);
        }
    }
    img
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: u64,
    pub caption_tokens: Vec<u32>,
    pub attributes: ToyAttributes,
}

/// Dataset-level metadata written next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub seed: u64,
    pub n: u64,
    pub size: usize,
    pub id_width: usize,
    pub vocab: Vec<String>,
    pub null_token: u32,
}

/// Per-attribute value counts of a written dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestSummary {
    pub n: u64,
    pub counts: BTreeMap<Attribute, Vec<u64>>,
}

impl ManifestSummary {
    pub fn of(attrs: impl IntoIterator<Item = ToyAttributes>) -> Self {
        let mut counts: BTreeMap<Attribute, Vec<u64>> =
            Attribute::ALL.iter().map(|&a| (a, vec![0; a.cardinality()])).collect();
        let mut n = 0;
        for at in attrs {
            n += 1;
            for a in Attribute::ALL {
                counts.get_mut(&a).expect("all attributes")[at.value(a)] += 1;
            }
        }
        ManifestSummary { n, counts }
    }
}

pub fn id_width(n: u64) -> usize {
    let digits = n.saturating_sub(1).max(1).to_string().len();
    digits.max(4)
}

pub fn sample_stem(id: u64, width: usize) -> String {
    format!("{id:0width$}")
}

/// Writes `n` samples under `dir` with the layout
/// `images/`, `masks/`, `sketches/`, `manifest.jsonl`, `dataset.json`.
pub fn write_dataset(n: u64, seed: u64, size: usize, dir: &Path) -> Result<ManifestSummary> {
    if n == 0 {
        return Err(Error::Input("dataset must contain at least one sample".into()));
    }
    check_size(size)?;
    for sub in ["images", "masks", "sketches"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let width = id_width(n);
    let ids: Vec<u64> = (0..n).collect();
    let written = par::map_chunks(Exec::Parallel, &ids, 16, |_, chunk| -> Result<Vec<ManifestRecord>> {
        chunk
            .iter()
            .map(|&id| {
                let s = synthesize_scene(seed, id, size)?;
                let stem = sample_stem(id, width);
                s.image.write_png(&dir.join("images").join(format!("{stem}.png")))?;
                s.mask
                    .write_paletted_png(&dir.join("masks").join(format!("{stem}.png")), &MASK_PALETTE)?;
                s.sketch
                    .write_bilevel_png(&dir.join("sketches").join(format!("{stem}.png")))?;
                Ok(ManifestRecord {
                    id,
                    caption_tokens: s.caption,
                    attributes: s.attributes,
                })
            })
            .collect()
    });
    let manifest_path = dir.join("manifest.jsonl");
    let mut out = std::io::BufWriter::new(fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?);
    let mut attrs = Vec::with_capacity(n as usize);
    for chunk in written {
        for rec in chunk? {
            let line = serde_json::to_string(&rec).expect("manifest record serializes");
            writeln!(out, "{line}").map_err(|e| Error::io(&manifest_path, e))?;
            attrs.push(rec.attributes);
        }
    }
    out.flush().map_err(|e| Error::io(&manifest_path, e))?;

    let info = DatasetInfo {
        seed,
        n,
        size,
        id_width: width,
        vocab: VOCAB.iter().map(|s| s.to_string()).collect(),
        null_token: NULL_TOKEN,
    };
    let info_path = dir.join("dataset.json");
    fs::write(&info_path, serde_json::to_string_pretty(&info).expect("info serializes"))
        .map_err(|e| Error::io(&info_path, e))?;
    Ok(ManifestSummary::of(attrs))
}

/// A dataset read back from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub info: DatasetInfo,
    pub records: Vec<ManifestRecord>,
}

/// Loaded rasters of one stored sample.
#[derive(Debug, Clone)]
pub struct StoredSample {
    pub record: ManifestRecord,
    pub image: RgbImage,
    pub mask: LabelRaster,
    pub sketch: LabelRaster,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let info_path = dir.join("dataset.json");
        let text = fs::read_to_string(&info_path).map_err(|e| Error::io(&info_path, e))?;
        let info: DatasetInfo = serde_json::from_str(&text).map_err(|e| Error::format(&info_path, e.to_string()))?;
        let manifest_path = dir.join("manifest.jsonl");
        let file = fs::File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&manifest_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| Error::format(&manifest_path, format!("line {}: {e}", i + 1)))?;
            records.push(rec);
        }
        if records.len() as u64 != info.n {
            return Err(Error::format(
                &manifest_path,
                format!("{} records, dataset.json declares {}", records.len(), info.n),
            ));
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            info,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of samples held out for evaluation: the last 10% of ids.
    pub fn held_out_len(&self) -> usize {
        held_out_len(self.records.len())
    }

    pub fn train_range(&self) -> std::ops::Range<usize> {
        0..self.records.len() - self.held_out_len()
    }

    pub fn held_out_range(&self) -> std::ops::Range<usize> {
        self.records.len() - self.held_out_len()..self.records.len()
    }

    pub fn path_of(&self, kind: &str, index: usize) -> PathBuf {
        let stem = sample_stem(self.records[index].id, self.info.id_width);
        self.dir.join(kind).join(format!("{stem}.png"))
    }

    pub fn load(&self, index: usize) -> Result<StoredSample> {
        let record = self
            .records
            .get(index)
            .cloned()
            .ok_or_else(|| Error::Input(format!("sample index {index} out of range")))?;
        Ok(StoredSample {
            image: RgbImage::read_png(&self.path_of("images", index))?,
            mask: LabelRaster::read_paletted_png(&self.path_of("masks", index))?,
            sketch: LabelRaster::read_bilevel_png(&self.path_of("sketches", index))?,
            record,
        })
    }
}

pub fn held_out_len(n: usize) -> usize {
    if n < 2 {
        0
    } else {
        (n / 10).max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_bytes() {
        let a = synthesize_scene(7, 0, 32).unwrap();
        let b = synthesize_scene(7, 0, 32).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synthesize_scene(7, 1, 32).unwrap());
    }

    #[test]
    fn rejects_unsupported_sizes() {
        assert!(matches!(synthesize_scene(1, 0, 48), Err(Error::Config(_))));
    }

    #[test]
    fn mask_labels_carry_their_palette_colors() {
        for id in 0..32 {
            let s = synthesize_scene(3, id, 32).unwrap();
            let eye = palette_color(CLASS_EYES, s.attributes.eye_class);
            for y in 0..32 {
                for x in 0..32 {
                    if s.mask.get(x, y) == CLASS_EYES {
                        assert_eq!(s.image.pixel(x, y), eye);
                    }
                    let entry = PALETTE[nearest_palette_entry(s.image.pixel(x, y))];
                    assert_eq!(entry.class, s.mask.get(x, y));
                }
            }
        }
    }

    #[test]
    fn every_attribute_value_occurs_in_first_256() {
        let summary = ManifestSummary::of((0..256).map(|id| synthesize_scene(7, id, 32).unwrap().attributes));
        for (a, counts) in &summary.counts {
            assert!(counts.iter().all(|&c| c > 0), "{a:?}: {counts:?}");
        }
    }

    #[test]
    fn caption_decodes_to_attributes() {
        for id in 0..64 {
            let s = synthesize_scene(11, id, 64).unwrap();
            assert_eq!(ToyAttributes::from_caption(&s.caption).unwrap(), s.attributes);
            assert!(s.caption.iter().all(|&t| (t as usize) < VOCAB_SIZE && t != NULL_TOKEN));
        }
    }

    #[test]
    fn sketch_marks_label_boundaries() {
        let mut m = LabelRaster::new(4, 1);
        m.data = vec![0, 0, 1, 1];
        assert_eq!(sketch_of(&m).data, vec![0, 1, 1, 0]);
    }

    #[test]
    fn caption_parsing() {
        assert_eq!(parse_caption("EYES_BLUE hair_red").unwrap(), vec![9, 11]);
        assert_eq!(parse_caption("").unwrap(), vec![NULL_TOKEN]);
        assert!(parse_caption("HAIR_RED HAIR_BLACK").is_err());
        assert!(parse_caption("HAT").is_err());
    }

    #[test]
    fn write_dataset_layout() {
        let dir = tempfile::tempdir().unwrap();
        let summary = write_dataset(4, 1, 32, dir.path()).unwrap();
        assert_eq!(summary.n, 4);
        let manifest = fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(manifest.lines().count(), 4);
        let files: usize = ["images", "masks", "sketches"]
            .iter()
            .map(|d| fs::read_dir(dir.path().join(d)).unwrap().count())
            .sum();
        assert_eq!(files, 12);
        assert!(dir.path().join("masks/0003.png").exists());

        let ds = Dataset::open(dir.path()).unwrap();
        let stored = ds.load(2).unwrap();
        let fresh = synthesize_scene(1, 2, 32).unwrap();
        assert_eq!(stored.image, fresh.image);
        assert_eq!(stored.mask, fresh.mask);
        assert_eq!(stored.sketch, fresh.sketch);
        assert!(matches!(write_dataset(0, 1, 32, dir.path()), Err(Error::Input(_))));
    }
}
