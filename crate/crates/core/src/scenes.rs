//! Synthetic high-resolution visual search scenes.
//!
//! A square canvas is split into a `grid x grid` board of cells. One cell (the
//! target) carries a coarse red tint that survives heavy downsampling, and a
//! small binary glyph whose class is the answer. Other cells may carry
//! distractor glyphs. Glyphs are built from 4x4 pixel super-blocks in which
//! exactly two of the four 2x2 sub-blocks are inked, so every glyph averages
//! to the same flat gray once a view falls below half of native resolution.
//!
//! The layout (grid geometry, glyph placement, glyph codebook) is public world
//! knowledge shared with the policy's perception; only the per-scene draw
//! (target cell, classes, tints) is hidden.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::budget::{BBox, ImageBuffer};
use crate::rng::{derive_seed, rng_for};

pub const INK: f32 = 0.05;
pub const BACKGROUND: f32 = 0.95;
/// Red-minus-cyan offset applied to the target cell background.
pub const MARKER_TINT: [f32; 3] = [0.28, -0.14, -0.14];
/// Per-channel amplitude of background jitter on every cell.
pub const BACKGROUND_JITTER: f32 = 0.06;
/// Mean tint above which a cell counts as marked.
pub const MARKER_THRESHOLD: f32 = 0.15;
/// Minimum effective resolution (view pixels per source pixel) for legibility.
pub const LEGIBILITY_SCALE: f64 = 0.5;
/// Decoder acceptance: best mean sub-block error and best-vs-runner-up gap.
pub const DECODE_MAX_ERROR: f64 = 0.2;
pub const DECODE_MIN_MARGIN: f64 = 0.15;

const SUPER_BLOCK: usize = 4;
const SUB_BLOCK: usize = 2;
/// Inked sub-block pairs (0=TL, 1=TR, 2=BL, 3=BR); exactly two per super-block.
const SYMBOLS: [[usize; 2]; 6] = [[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]];
const CODEBOOK_SEED: u64 = 0x6c79_7068_5f63_6f64;
const CODEBOOK_ATTEMPTS_PER_CLASS: usize = 4096;

const CLASS_NAMES: [&str; 26] = [
    "alfa", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliett",
    "kilo", "lima", "mike", "november", "oscar", "papa", "quebec", "romeo", "sierra", "tango",
    "uniform", "victor", "whiskey", "xray", "yankee", "zulu",
];

pub fn class_label(class: usize) -> String {
    CLASS_NAMES
        .get(class)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("glyph{class}"))
}

pub fn class_index(label: &str, num_classes: usize) -> Option<usize> {
    (0..num_classes).find(|&k| class_label(k) == label)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SceneError {
    #[error("scene spec is infeasible: {0}")]
    SpecInfeasible(String),
    #[error("manifest record does not match regenerated scene: {0}")]
    ManifestMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Canvas side in pixels.
    pub canvas: usize,
    /// Cells per side.
    pub grid: usize,
    /// Glyph side in pixels, a multiple of 4.
    pub glyph_size: usize,
    pub num_classes: usize,
    /// Probability that a non-target cell carries a distractor glyph.
    pub distractor_density: f64,
    /// Base seed for scene sets drawn from this spec.
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            canvas: 1792,
            grid: 8,
            glyph_size: 16,
            num_classes: 8,
            distractor_density: 0.3,
            seed: 7,
        }
    }
}

impl SceneSpec {
    pub fn cell_size(&self) -> usize {
        self.canvas / self.grid.max(1)
    }

    pub fn num_cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::SpecInfeasible(m));
        if self.grid == 0 || self.canvas == 0 || self.canvas % self.grid != 0 {
            return bad(format!(
                "canvas {} must be a positive multiple of grid {}",
                self.canvas, self.grid
            ));
        }
        if self.glyph_size == 0 || self.glyph_size % SUPER_BLOCK != 0 {
            return bad(format!(
                "glyph size {} must be a positive multiple of {SUPER_BLOCK}",
                self.glyph_size
            ));
        }
        if self.glyph_size > self.cell_size() {
            return bad(format!(
                "glyph size {} exceeds cell size {}",
                self.glyph_size,
                self.cell_size()
            ));
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.num_classes as f64 > Codebook::capacity_bound(self.glyph_size) {
            return bad(format!(
                "{} classes exceed the codebook capacity of a {}px glyph",
                self.num_classes, self.glyph_size
            ));
        }
        if !(0.0..=1.0).contains(&self.distractor_density) {
            return bad(format!(
                "distractor density {} outside [0, 1]",
                self.distractor_density
            ));
        }
        Ok(())
    }
}

/// Class patterns as super-block symbol strings.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    glyph_size: usize,
    words: Vec<Vec<u8>>,
}

impl Codebook {
    /// Minimum number of differing super-blocks between any two classes.
    pub fn min_distance(glyph_size: usize) -> usize {
        let n = (glyph_size / SUPER_BLOCK).pow(2);
        n.div_ceil(2).max(1)
    }

    /// Singleton bound on how many classes fit at the required distance.
    pub fn capacity_bound(glyph_size: usize) -> f64 {
        let n = (glyph_size / SUPER_BLOCK).pow(2);
        let d = Self::min_distance(glyph_size);
        (SYMBOLS.len() as f64).powi((n + 1 - d) as i32)
    }

    pub fn build(glyph_size: usize, num_classes: usize) -> Result<Self, SceneError> {
        if glyph_size == 0 || glyph_size % SUPER_BLOCK != 0 {
            return Err(SceneError::SpecInfeasible(format!(
                "glyph size {glyph_size} must be a positive multiple of {SUPER_BLOCK}"
            )));
        }
        let n = (glyph_size / SUPER_BLOCK).pow(2);
        let d = Self::min_distance(glyph_size);
        if num_classes as f64 > Self::capacity_bound(glyph_size) {
            return Err(SceneError::SpecInfeasible(format!(
                "{num_classes} classes cannot be {d}-distinct with {n} super-blocks"
            )));
        }
        let mut rng = rng_for(CODEBOOK_SEED, &[glyph_size as u64, num_classes as u64]);
        let mut words: Vec<Vec<u8>> = Vec::with_capacity(num_classes);
        let mut attempts = 0;
        while words.len() < num_classes {
            if attempts >= CODEBOOK_ATTEMPTS_PER_CLASS * num_classes {
                return Err(SceneError::SpecInfeasible(format!(
                    "could only place {} of {num_classes} glyphs at distance {d}",
                    words.len()
                )));
            }
            attempts += 1;
            let cand: Vec<u8> = (0..n).map(|_| rng.gen_range(0..SYMBOLS.len()) as u8).collect();
            if words.iter().all(|w| symbol_distance(w, &cand) >= d) {
                words.push(cand);
            }
        }
        Ok(Self { glyph_size, words })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn glyph_size(&self) -> usize {
        self.glyph_size
    }

    /// Sub-blocks per glyph side.
    pub fn sub_side(&self) -> usize {
        self.glyph_size / SUB_BLOCK
    }

    /// Ink map of a class on the sub-block grid, row-major.
    pub fn sub_bits(&self, class: usize) -> Vec<bool> {
        let side = self.sub_side();
        let sb_side = self.glyph_size / SUPER_BLOCK;
        let mut bits = vec![false; side * side];
        for (i, &sym) in self.words[class].iter().enumerate() {
            let (sr, sc) = (i / sb_side, i % sb_side);
            for &q in &SYMBOLS[sym as usize] {
                let (qr, qc) = (q / 2, q % 2);
                bits[(sr * 2 + qr) * side + sc * 2 + qc] = true;
            }
        }
        bits
    }

    /// Pixel-level binary pattern of a class, row-major `glyph_size^2`.
    pub fn pixels(&self, class: usize) -> Vec<bool> {
        let side = self.sub_side();
        let bits = self.sub_bits(class);
        let g = self.glyph_size;
        (0..g * g)
            .map(|i| bits[(i / g / SUB_BLOCK) * side + (i % g) / SUB_BLOCK])
            .collect()
    }
}

fn symbol_distance(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Geometry and codebook shared by the generator, the decoder and the policy.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLayout {
    pub canvas: usize,
    pub grid: usize,
    pub cell_size: usize,
    pub glyph_size: usize,
    pub glyph_offset: usize,
    pub codebook: Codebook,
}

impl SceneLayout {
    pub fn new(spec: &SceneSpec) -> Result<Self, SceneError> {
        spec.validate()?;
        let cell = spec.cell_size();
        let codebook = Codebook::build(spec.glyph_size, spec.num_classes)?;
        // keep glyphs on the super-block lattice of the canvas
        let glyph_offset = ((cell - spec.glyph_size) / 2) / SUPER_BLOCK * SUPER_BLOCK;
        Ok(Self {
            canvas: spec.canvas,
            grid: spec.grid,
            cell_size: cell,
            glyph_size: spec.glyph_size,
            glyph_offset,
            codebook,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn num_classes(&self) -> usize {
        self.codebook.len()
    }

    pub fn cell_of(&self, row: usize, col: usize) -> usize {
        row * self.grid + col
    }

    pub fn cell_rc(&self, cell: usize) -> (usize, usize) {
        (cell / self.grid, cell % self.grid)
    }

    pub fn cell_bbox(&self, cell: usize) -> BBox {
        let (r, c) = self.cell_rc(cell);
        let s = self.cell_size as i64;
        BBox::new(c as i64 * s, r as i64 * s, (c as i64 + 1) * s, (r as i64 + 1) * s)
    }

    pub fn glyph_bbox(&self, cell: usize) -> BBox {
        let b = self.cell_bbox(cell);
        let o = self.glyph_offset as i64;
        let g = self.glyph_size as i64;
        BBox::new(b.x1 + o, b.y1 + o, b.x1 + o + g, b.y1 + o + g)
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub seed: u64,
    pub image: Arc<ImageBuffer>,
    pub target_cell: (usize, usize),
    pub gold_class: usize,
    pub gold: String,
    pub query: String,
    pub marker_bbox: BBox,
    /// Glyph class drawn in each cell, if any. Hidden from the policy.
    pub cell_classes: Vec<Option<usize>>,
}

impl Scene {
    pub fn target_index(&self) -> usize {
        self.target_cell.0 * self.spec.grid + self.target_cell.1
    }
}

pub const DEFAULT_QUERY: &str =
    "Which glyph is drawn inside the highlighted cell? Answer with the glyph name.";

/// Scene with a random gold class.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene, SceneError> {
    generate(spec, seed, None)
}

/// Scene whose gold class is fixed; used for class-balanced scene sets.
pub fn generate_scene_with_class(
    spec: &SceneSpec,
    seed: u64,
    class: usize,
) -> Result<Scene, SceneError> {
    if class >= spec.num_classes {
        return Err(SceneError::SpecInfeasible(format!(
            "class {class} out of range for {} classes",
            spec.num_classes
        )));
    }
    generate(spec, seed, Some(class))
}

fn generate(spec: &SceneSpec, seed: u64, forced: Option<usize>) -> Result<Scene, SceneError> {
    let layout = SceneLayout::new(spec)?;
    let mut rng = rng_for(seed, &[0x5ce7e]);
    let target = rng.gen_range(0..layout.num_cells());
    let drawn_class = rng.gen_range(0..spec.num_classes);
    let gold_class = forced.unwrap_or(drawn_class);

    let mut image = ImageBuffer::filled(spec.canvas, spec.canvas, 3, 0.5);
    let mut cell_classes = vec![None; layout.num_cells()];
    for cell in 0..layout.num_cells() {
        let mut bg = [0f32; 3];
        for v in bg.iter_mut() {
            *v = 0.5 + rng.gen_range(-BACKGROUND_JITTER..=BACKGROUND_JITTER);
        }
        let glyph = if cell == target {
            for (v, t) in bg.iter_mut().zip(MARKER_TINT) {
                *v += t;
            }
            Some(gold_class)
        } else if rng.gen_bool(spec.distractor_density) {
            Some(rng.gen_range(0..spec.num_classes))
        } else {
            None
        };
        let b = layout.cell_bbox(cell);
        image.fill_rect(b.x1 as usize, b.y1 as usize, b.x2 as usize, b.y2 as usize, &bg);
        if let Some(class) = glyph {
            paint_glyph(&mut image, &layout, cell, class);
        }
        cell_classes[cell] = glyph;
    }
    let (row, col) = layout.cell_rc(target);
    Ok(Scene {
        spec: spec.clone(),
        seed,
        image: Arc::new(image),
        target_cell: (row, col),
        gold_class,
        gold: class_label(gold_class),
        query: DEFAULT_QUERY.to_string(),
        marker_bbox: layout.cell_bbox(target),
        cell_classes,
    })
}

fn paint_glyph(image: &mut ImageBuffer, layout: &SceneLayout, cell: usize, class: usize) {
    let g = layout.glyph_bbox(cell);
    let pix = layout.codebook.pixels(class);
    let side = layout.glyph_size;
    for dy in 0..side {
        for dx in 0..side {
            let v = if pix[dy * side + dx] { INK } else { BACKGROUND };
            for c in 0..3 {
                image.set(g.x1 as usize + dx, g.y1 as usize + dy, c, v);
            }
        }
    }
}

/// One manifest line: enough to regenerate a scene bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub spec: SceneSpec,
    pub seed: u64,
    pub gold: String,
    pub gold_class: usize,
    pub target_cell: (usize, usize),
}

impl SceneRecord {
    pub fn regenerate(&self) -> Result<Scene, SceneError> {
        let scene = generate_scene_with_class(&self.spec, self.seed, self.gold_class)?;
        if scene.target_cell != self.target_cell || scene.gold != self.gold {
            return Err(SceneError::ManifestMismatch(format!(
                "seed {} expected target {:?}/{}, got {:?}/{}",
                self.seed, self.target_cell, self.gold, scene.target_cell, scene.gold
            )));
        }
        Ok(scene)
    }
}

/// Entry `index` of the class-balanced stream `stream`: gold class
/// `index mod K`, seed derived from `(spec.seed, stream, index)`.
pub fn manifest_entry(spec: &SceneSpec, stream: u64, index: u64) -> SceneRecord {
    let seed = derive_seed(spec.seed, &[stream, index]);
    let class = (index % spec.num_classes as u64) as usize;
    SceneRecord {
        spec: spec.clone(),
        seed,
        gold: class_label(class),
        gold_class: class,
        target_cell: target_for_seed(spec, seed),
    }
}

/// First `count` entries of a class-balanced stream.
pub fn scene_manifest(
    spec: &SceneSpec,
    stream: u64,
    count: usize,
) -> Result<Vec<SceneRecord>, SceneError> {
    SceneLayout::new(spec)?;
    Ok((0..count as u64).map(|i| manifest_entry(spec, stream, i)).collect())
}

/// Target cell a seed will produce, without rendering pixels.
pub fn target_for_seed(spec: &SceneSpec, seed: u64) -> (usize, usize) {
    let mut rng = rng_for(seed, &[0x5ce7e]);
    let target = rng.gen_range(0..spec.num_cells());
    (target / spec.grid, target % spec.grid)
}

// --- perception over views -------------------------------------------------

/// Luminance and tint statistics over a fractional rectangle of a view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionStats {
    pub mean_luma: f64,
    pub std_luma: f64,
    pub mean_tint: f64,
}

fn luma(px: &[f32]) -> f64 {
    px.iter().map(|&v| v as f64).sum::<f64>() / px.len() as f64
}

fn tint(px: &[f32]) -> f64 {
    if px.len() < 3 {
        return 0.0;
    }
    px[0] as f64 - 0.5 * (px[1] as f64 + px[2] as f64)
}

/// Area-weighted statistics of `view` over `[x0, x1) x [y0, y1)` in view
/// pixel units (fractional bounds allowed).
pub fn region_stats(view: &ImageBuffer, x0: f64, y0: f64, x1: f64, y1: f64) -> Option<RegionStats> {
    let x0 = x0.max(0.0);
    let y0 = y0.max(0.0);
    let x1 = x1.min(view.width() as f64);
    let y1 = y1.min(view.height() as f64);
    if x1 <= x0 || y1 <= y0 {
        return None;
    }
    let ch = view.channels();
    let (xa, xb) = (x0.floor() as usize, (x1.ceil() as usize).min(view.width()));
    let wx: Vec<f64> = (xa..xb)
        .map(|x| (x1.min(x as f64 + 1.0) - x0.max(x as f64)).max(0.0))
        .collect();
    let (mut wsum, mut l1, mut l2, mut t1) = (0.0, 0.0, 0.0, 0.0);
    for y in y0.floor() as usize..(y1.ceil() as usize).min(view.height()) {
        let wy = (y1.min(y as f64 + 1.0) - y0.max(y as f64)).max(0.0);
        if wy == 0.0 {
            continue;
        }
        let row = &view.data()[(y * view.width() + xa) * ch..(y * view.width() + xb) * ch];
        let (mut rs, mut r1, mut r2, mut rt) = (0.0, 0.0, 0.0, 0.0);
        for (px, &w) in row.chunks_exact(ch).zip(&wx) {
            let l = luma(px);
            rs += w;
            r1 += w * l;
            r2 += w * l * l;
            rt += w * tint(px);
        }
        wsum += wy * rs;
        l1 += wy * r1;
        l2 += wy * r2;
        t1 += wy * rt;
    }
    if wsum == 0.0 {
        return None;
    }
    let mean = l1 / wsum;
    Some(RegionStats {
        mean_luma: mean,
        std_luma: (l2 / wsum - mean * mean).max(0.0).sqrt(),
        mean_tint: t1 / wsum,
    })
}

/// Maps source-frame coordinates into a view that was produced from
/// `source` (a box in the original frame) by cropping and resizing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewFrame {
    pub source: BBox,
    pub sx: f64,
    pub sy: f64,
}

impl ViewFrame {
    pub fn new(view: &ImageBuffer, source: &BBox) -> Self {
        Self {
            source: *source,
            sx: view.width() as f64 / source.width().max(1) as f64,
            sy: view.height() as f64 / source.height().max(1) as f64,
        }
    }

    /// Effective resolution relative to the source pixels.
    pub fn scale(&self) -> f64 {
        self.sx.min(self.sy)
    }

    pub fn map(&self, b: &BBox) -> (f64, f64, f64, f64) {
        (
            (b.x1 - self.source.x1) as f64 * self.sx,
            (b.y1 - self.source.y1) as f64 * self.sy,
            (b.x2 - self.source.x1) as f64 * self.sx,
            (b.y2 - self.source.y1) as f64 * self.sy,
        )
    }

    pub fn stats(&self, view: &ImageBuffer, b: &BBox) -> Option<RegionStats> {
        let clipped = b.intersection(&self.source);
        if clipped.is_empty() {
            return None;
        }
        let (x0, y0, x1, y1) = self.map(&clipped);
        region_stats(view, x0, y0, x1, y1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Legibility {
    Legible,
    Illegible,
}

pub fn legibility_of(view: &ImageBuffer, source: &BBox) -> Legibility {
    if ViewFrame::new(view, source).scale() + 1e-12 >= LEGIBILITY_SCALE {
        Legibility::Legible
    } else {
        Legibility::Illegible
    }
}

/// Whether the glyphs in `view` (produced from `source` of the scene image)
/// are rendered at or above half of native resolution.
pub fn legibility(scene: &Scene, view: &ImageBuffer, source: &BBox) -> Legibility {
    let canvas = scene.image.bounds();
    legibility_of(view, &source.intersection(&canvas))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoding {
    pub cell: usize,
    pub class: usize,
    /// Runner-up error minus best error, in `[0, 1]`.
    pub margin: f64,
}

/// Read the glyph of the marked cell from a view, if the view shows it
/// legibly. Uses only the view, its source box and public layout.
pub fn decode_view(layout: &SceneLayout, view: &ImageBuffer, source: &BBox) -> Option<Decoding> {
    let source = source.clamp_to(layout.canvas, layout.canvas);
    if source.is_empty() || legibility_of(view, &source) == Legibility::Illegible {
        return None;
    }
    let frame = ViewFrame::new(view, &source);
    for cell in 0..layout.num_cells() {
        let glyph = layout.glyph_bbox(cell);
        if !source.contains(&glyph) {
            continue;
        }
        let marked = frame
            .stats(view, &layout.cell_bbox(cell))
            .is_some_and(|s| s.mean_tint as f32 > MARKER_THRESHOLD);
        if !marked {
            continue;
        }
        return read_glyph(layout, view, &frame, &glyph).map(|(class, margin)| Decoding {
            cell,
            class,
            margin,
        });
    }
    None
}

fn read_glyph(
    layout: &SceneLayout,
    view: &ImageBuffer,
    frame: &ViewFrame,
    glyph: &BBox,
) -> Option<(usize, f64)> {
    let side = layout.codebook.sub_side();
    let mut ink = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let sb = BBox::new(
                glyph.x1 + (c * SUB_BLOCK) as i64,
                glyph.y1 + (r * SUB_BLOCK) as i64,
                glyph.x1 + ((c + 1) * SUB_BLOCK) as i64,
                glyph.y1 + ((r + 1) * SUB_BLOCK) as i64,
            );
            let s = frame.stats(view, &sb)?;
            let e = (BACKGROUND as f64 - s.mean_luma) / (BACKGROUND - INK) as f64;
            ink.push(e.clamp(0.0, 1.0));
        }
    }
    let mut errs: Vec<(f64, usize)> = (0..layout.codebook.len())
        .map(|k| {
            let bits = layout.codebook.sub_bits(k);
            let err = ink
                .iter()
                .zip(&bits)
                .map(|(&e, &b)| (e - if b { 1.0 } else { 0.0 }).abs())
                .sum::<f64>()
                / ink.len() as f64;
            (err, k)
        })
        .collect();
    errs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (best, class) = errs[0];
    let margin = errs.get(1).map_or(1.0, |e| e.0) - best;
    (best <= DECODE_MAX_ERROR && margin >= DECODE_MIN_MARGIN).then_some((class, margin))
}

/// Gold label if the view resolves the target glyph, else `None`.
pub fn decode_answer(scene: &Scene, view: &ImageBuffer, source: &BBox) -> Option<String> {
    let layout = SceneLayout::new(&scene.spec).ok()?;
    decode_view(&layout, view, source).map(|d| class_label(d.class))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::{crop, downsample, resize_area};

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec::default();
        let a = generate_scene(&spec, 7).unwrap();
        let b = generate_scene(&spec, 7).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.target_cell, b.target_cell);
        assert_eq!(a.gold, b.gold);
    }

    #[test]
    fn seeds_move_the_target() {
        let spec = SceneSpec::default();
        let differing = (0..100u64)
            .filter(|&i| target_for_seed(&spec, 2 * i) != target_for_seed(&spec, 2 * i + 1))
            .count();
        assert!(differing > 80, "{differing}");
    }

    #[test]
    fn infeasible_specs() {
        let spec = SceneSpec {
            glyph_size: 4,
            num_classes: 300,
            ..Default::default()
        };
        assert!(matches!(generate_scene(&spec, 1), Err(SceneError::SpecInfeasible(_))));
        let odd = SceneSpec {
            glyph_size: 10,
            ..Default::default()
        };
        assert!(SceneLayout::new(&odd).is_err());
        let huge = SceneSpec {
            glyph_size: 256,
            ..Default::default()
        };
        assert!(SceneLayout::new(&huge).is_err());
    }

    #[test]
    fn codebook_is_distant_and_balanced() {
        let cb = Codebook::build(16, 8).unwrap();
        let d = Codebook::min_distance(16);
        for i in 0..8 {
            let pi = cb.pixels(i);
            assert_eq!(pi.iter().filter(|&&b| b).count(), 16 * 16 / 2);
            for j in 0..i {
                let pj = cb.pixels(j);
                let ham = pi.iter().zip(&pj).filter(|(a, b)| a != b).count();
                // each differing super-block flips 8 or 16 pixels
                assert!(ham >= 8 * d, "{i} vs {j}: {ham}");
            }
        }
    }

    #[test]
    fn glyphs_average_flat_at_quarter_scale() {
        let cb = Codebook::build(16, 8).unwrap();
        let mut means = Vec::new();
        for k in 0..8 {
            let p = cb.pixels(k);
            let img = ImageBuffer::from_vec(
                16,
                16,
                1,
                p.iter().map(|&b| if b { INK } else { BACKGROUND }).collect(),
            )
            .unwrap();
            means.push(resize_area(&img, 4, 4).data().to_vec());
        }
        for m in &means[1..] {
            for (a, b) in m.iter().zip(&means[0]) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn decoding_native_overview_and_distractor() {
        let spec = SceneSpec::default();
        let scene = generate_scene(&spec, 11).unwrap();
        let layout = SceneLayout::new(&spec).unwrap();

        let cell = layout.cell_bbox(scene.target_index());
        let native = crop(&scene.image, &cell).unwrap();
        assert_eq!(decode_answer(&scene, &native, &cell), Some(scene.gold.clone()));
        assert_eq!(legibility(&scene, &native, &cell), Legibility::Legible);

        let full = scene.image.bounds();
        let overview = downsample(&scene.image, 256, 28);
        assert_eq!(overview.width(), 448);
        assert_eq!(legibility(&scene, &overview, &full), Legibility::Illegible);
        assert_eq!(decode_answer(&scene, &overview, &full), None);

        let half = resize_area(&scene.image, 896, 896);
        assert_eq!(legibility(&scene, &half, &full), Legibility::Legible);
        assert_eq!(decode_answer(&scene, &half, &full), Some(scene.gold.clone()));

        let other = (scene.target_index() + 1) % layout.num_cells();
        let ob = layout.cell_bbox(other);
        let oview = crop(&scene.image, &ob).unwrap();
        assert_eq!(decode_answer(&scene, &oview, &ob), None);
    }

    #[test]
    fn manifest_regenerates() {
        let spec = SceneSpec::default();
        let recs = scene_manifest(&spec, 0, 16).unwrap();
        let golds: Vec<usize> = recs.iter().map(|r| r.gold_class).collect();
        assert_eq!(golds, (0..16).map(|i| i % 8).collect::<Vec<_>>());
        let scene = recs[3].regenerate().unwrap();
        assert_eq!(scene.gold_class, 3);
        assert_eq!(scene.target_cell, recs[3].target_cell);
    }

    #[test]
    fn region_stats_fractional_weights() {
        let mut img = ImageBuffer::filled(4, 1, 3, 0.0);
        img.set(1, 0, 0, 1.0);
        img.set(1, 0, 1, 1.0);
        img.set(1, 0, 2, 1.0);
        let s = region_stats(&img, 0.5, 0.0, 1.5, 1.0).unwrap();
        assert!((s.mean_luma - 0.5).abs() < 1e-12);
        assert!((s.std_luma - 0.5).abs() < 1e-12);
    }
}
