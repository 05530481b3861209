//! Symbolic grid world: scenes, the oracle editor, rendering, detection and
//! scene graphs.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::instructions::{ParsedEdit, Relation};

/// Cells per side.
pub const GRID: usize = 8;
/// Pixels per cell side.
pub const CELL_PX: usize = 4;
/// Pixels per image side.
pub const IMAGE_PX: usize = GRID * CELL_PX;
pub const CHANNELS: usize = 3;
/// Values in one cell patch (`CELL_PX * CELL_PX * CHANNELS`).
pub const PATCH: usize = CELL_PX * CELL_PX * CHANNELS;
pub const CELLS: usize = GRID * GRID;

pub const BACKGROUND: [f64; 3] = [0.0, 0.0, 0.0];

/// Largest per-value RMS distance at which a cell still counts as a glyph.
pub const DETECT_RMS_THRESHOLD: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Gray,
    Red,
    Blue,
    Green,
    Brown,
    Purple,
    Cyan,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Gray,
        Color::Red,
        Color::Blue,
        Color::Green,
        Color::Brown,
        Color::Purple,
        Color::Cyan,
        Color::Yellow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Gray => "gray",
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Green => "green",
            Color::Brown => "brown",
            Color::Purple => "purple",
            Color::Cyan => "cyan",
            Color::Yellow => "yellow",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Gray => [0.5, 0.5, 0.5],
            Color::Red => [0.9, 0.1, 0.1],
            Color::Blue => [0.1, 0.2, 0.9],
            Color::Green => [0.1, 0.7, 0.2],
            Color::Brown => [0.55, 0.3, 0.1],
            Color::Purple => [0.55, 0.1, 0.75],
            Color::Cyan => [0.1, 0.85, 0.85],
            Color::Yellow => [0.95, 0.9, 0.1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Cube,
    Sphere,
    Cylinder,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Cube, Shape::Sphere, Shape::Cylinder];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Cube => "cube",
            Shape::Sphere => "sphere",
            Shape::Cylinder => "cylinder",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Whether pixel `(px, py)` of a cell is covered by this glyph.
    pub fn covers(self, px: usize, py: usize) -> bool {
        let edge = |v: usize| v == 0 || v == CELL_PX - 1;
        match self {
            Shape::Cube => true,
            Shape::Sphere => !(edge(px) && edge(py)),
            Shape::Cylinder => !edge(px),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub color: Color,
    pub shape: Shape,
}

impl ObjectSpec {
    pub const COUNT: usize = 24;

    pub fn new(color: Color, shape: Shape) -> Self {
        Self { color, shape }
    }

    /// All 24 specs, colour-major.
    pub fn all() -> impl Iterator<Item = ObjectSpec> {
        Color::ALL
            .into_iter()
            .flat_map(|c| Shape::ALL.into_iter().map(move |s| ObjectSpec::new(c, s)))
    }

    pub fn index(self) -> usize {
        self.color as usize * Shape::ALL.len() + self.shape as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        (i < Self::COUNT).then(|| {
            ObjectSpec::new(
                Color::ALL[i / Shape::ALL.len()],
                Shape::ALL[i % Shape::ALL.len()],
            )
        })
    }
}

impl fmt::Display for ObjectSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.color.name(), self.shape.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Placement {
    pub spec: ObjectSpec,
    pub x: usize,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SceneError {
    #[error("cell ({x}, {y}) is outside the {GRID}x{GRID} grid")]
    OutOfBounds { x: usize, y: usize },
    #[error("cell ({x}, {y}) already holds an object")]
    CellTaken { x: usize, y: usize },
    #[error("{0} is already in the scene")]
    DuplicateSpec(ObjectSpec),
    #[error("infeasible edit: anchor {0} is not in the scene")]
    AnchorMissing(ObjectSpec),
    #[error("no free cell satisfies `{relation}` relative to {anchor}")]
    NoFreeCell { relation: Relation, anchor: String },
}

/// Placed objects, kept sorted by `(y, x)`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Scene {
    placements: Vec<Placement>,
}

impl Scene {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_placements(
        placements: impl IntoIterator<Item = Placement>,
    ) -> Result<Self, SceneError> {
        let mut scene = Self::empty();
        for p in placements {
            scene.insert(p)?;
        }
        Ok(scene)
    }

    fn insert(&mut self, p: Placement) -> Result<(), SceneError> {
        if p.x >= GRID || p.y >= GRID {
            return Err(SceneError::OutOfBounds { x: p.x, y: p.y });
        }
        if self.at(p.x, p.y).is_some() {
            return Err(SceneError::CellTaken { x: p.x, y: p.y });
        }
        if self.find(p.spec).is_some() {
            return Err(SceneError::DuplicateSpec(p.spec));
        }
        let pos = self
            .placements
            .partition_point(|q| (q.y, q.x) < (p.y, p.x));
        self.placements.insert(pos, p);
        Ok(())
    }

    pub fn placements(&self) -> &[Placement] {
        &self.placements
    }

    pub fn len(&self) -> usize {
        self.placements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.placements.is_empty()
    }

    pub fn at(&self, x: usize, y: usize) -> Option<&Placement> {
        self.placements.iter().find(|p| p.x == x && p.y == y)
    }

    pub fn find(&self, spec: ObjectSpec) -> Option<&Placement> {
        self.placements.iter().find(|p| p.spec == spec)
    }

    pub fn specs(&self) -> BTreeSet<ObjectSpec> {
        self.placements.iter().map(|p| p.spec).collect()
    }

    /// Cell chosen for `edit` under the placement policy, without mutating.
    ///
    /// Centre edits go to `(GRID/2, GRID/2)`. Relative edits consider every
    /// free cell strictly on the requested side of the anchor and take the
    /// one closest to it (Euclidean), breaking ties by row then column.
    pub fn placement_for(&self, edit: &ParsedEdit) -> Result<(usize, usize), SceneError> {
        if self.find(edit.target()).is_some() {
            return Err(SceneError::DuplicateSpec(edit.target()));
        }
        let Some(anchor) = edit.anchor() else {
            let c = GRID / 2;
            return if self.at(c, c).is_some() {
                Err(SceneError::NoFreeCell {
                    relation: Relation::Center,
                    anchor: "grid centre".into(),
                })
            } else {
                Ok((c, c))
            };
        };
        let a = *self.find(anchor).ok_or(SceneError::AnchorMissing(anchor))?;
        let relation = edit.relation();
        let mut best: Option<(usize, usize, usize)> = None;
        for y in 0..GRID {
            for x in 0..GRID {
                if !relation.holds(x, y, a.x, a.y) || self.at(x, y).is_some() {
                    continue;
                }
                let d2 = x.abs_diff(a.x).pow(2) + y.abs_diff(a.y).pow(2);
                // Row-major scan keeps the first (row, column) among ties.
                if best.is_none_or(|(bd, _, _)| d2 < bd) {
                    best = Some((d2, x, y));
                }
            }
        }
        best.map(|(_, x, y)| (x, y)).ok_or(SceneError::NoFreeCell {
            relation,
            anchor: anchor.to_string(),
        })
    }

    /// Executes `edit`, returning the scene with exactly one object added.
    pub fn apply_edit(&self, edit: &ParsedEdit) -> Result<Scene, SceneError> {
        let (x, y) = self.placement_for(edit)?;
        let mut next = self.clone();
        next.insert(Placement {
            spec: edit.target(),
            x,
            y,
        })?;
        Ok(next)
    }

    pub fn render(&self) -> Image {
        let mut img = Image::background();
        for p in &self.placements {
            img.draw_glyph(p.x, p.y, p.spec);
        }
        img
    }

    pub fn scene_graph(&self) -> SceneGraph {
        SceneGraph::build(self)
    }
}

/// `IMAGE_PX x IMAGE_PX x 3` image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    data: Vec<f64>,
}

impl Image {
    pub const LEN: usize = IMAGE_PX * IMAGE_PX * CHANNELS;

    pub fn background() -> Self {
        let data = (0..IMAGE_PX * IMAGE_PX)
            .flat_map(|_| BACKGROUND)
            .collect();
        Self { data }
    }

    pub fn from_data(data: Vec<f64>) -> Option<Self> {
        (data.len() == Self::LEN).then_some(Self { data })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * IMAGE_PX + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn draw_glyph(&mut self, cx: usize, cy: usize, spec: ObjectSpec) {
        let rgb = spec.color.rgb();
        for py in 0..CELL_PX {
            for px in 0..CELL_PX {
                if spec.shape.covers(px, py) {
                    let i = ((cy * CELL_PX + py) * IMAGE_PX + cx * CELL_PX + px) * CHANNELS;
                    self.data[i..i + 3].copy_from_slice(&rgb);
                }
            }
        }
    }

    /// Patch of cell `(cx, cy)` as `PATCH` values ordered `(py, px, channel)`.
    pub fn cell_patch(&self, cx: usize, cy: usize) -> [f64; PATCH] {
        let mut out = [0.0; PATCH];
        for py in 0..CELL_PX {
            let row = ((cy * CELL_PX + py) * IMAGE_PX + cx * CELL_PX) * CHANNELS;
            out[py * CELL_PX * CHANNELS..(py + 1) * CELL_PX * CHANNELS]
                .copy_from_slice(&self.data[row..row + CELL_PX * CHANNELS]);
        }
        out
    }

    /// All cell patches, cell-major (`y * GRID + x`): `CELLS * PATCH` values.
    pub fn to_patches(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(CELLS * PATCH);
        for cy in 0..GRID {
            for cx in 0..GRID {
                out.extend_from_slice(&self.cell_patch(cx, cy));
            }
        }
        out
    }

    /// Inverse of [`Image::to_patches`].
    pub fn from_patches(patches: &[f64]) -> Option<Self> {
        if patches.len() != CELLS * PATCH {
            return None;
        }
        let mut data = vec![0.0; Self::LEN];
        for cy in 0..GRID {
            for cx in 0..GRID {
                let src = &patches[(cy * GRID + cx) * PATCH..(cy * GRID + cx + 1) * PATCH];
                for py in 0..CELL_PX {
                    let row = ((cy * CELL_PX + py) * IMAGE_PX + cx * CELL_PX) * CHANNELS;
                    data[row..row + CELL_PX * CHANNELS]
                        .copy_from_slice(&src[py * CELL_PX * CHANNELS..(py + 1) * CELL_PX * CHANNELS]);
                }
            }
        }
        Some(Self { data })
    }

    /// Nearest-template detection per cell. A cell yields an object when its
    /// closest template is a glyph (not background) within
    /// [`DETECT_RMS_THRESHOLD`]. Repeated specs keep the closest match.
    pub fn detect(&self) -> Scene {
        let templates = glyph_templates();
        let mut found: Vec<(f64, Placement)> = Vec::new();
        for cy in 0..GRID {
            for cx in 0..GRID {
                let patch = self.cell_patch(cx, cy);
                let dist = |t: &[f64; PATCH]| -> f64 {
                    patch.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum()
                };
                let empty = dist(&templates.empty);
                let (best, d) = templates
                    .glyphs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| (i, dist(t)))
                    .fold((usize::MAX, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
                let rms = (d / PATCH as f64).sqrt();
                if d < empty && rms <= DETECT_RMS_THRESHOLD {
                    let spec = ObjectSpec::from_index(best).expect("template index");
                    found.push((d, Placement { spec, x: cx, y: cy }));
                }
            }
        }
        let mut scene = Scene::empty();
        let mut order: Vec<usize> = (0..found.len()).collect();
        order.sort_by(|&a, &b| found[a].0.total_cmp(&found[b].0).then(a.cmp(&b)));
        for i in order {
            // duplicates of an already kept spec are dropped
            let _ = scene.insert(found[i].1);
        }
        scene
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn write_ppm(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P6\n{IMAGE_PX} {IMAGE_PX}\n255\n")?;
        f.write_all(&self.to_rgb8())?;
        f.flush()
    }

    pub fn write_png(&self, path: &Path) -> std::io::Result<()> {
        write_png(path, IMAGE_PX, IMAGE_PX, &self.to_rgb8())
    }
}

/// Writes an 8-bit RGB buffer as PNG.
pub fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> std::io::Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut enc = png::Encoder::new(f, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(std::io::Error::other)?;
    w.write_image_data(rgb).map_err(std::io::Error::other)?;
    w.finish().map_err(std::io::Error::other)
}

struct Templates {
    empty: [f64; PATCH],
    glyphs: Vec<[f64; PATCH]>,
}

fn glyph_templates() -> &'static Templates {
    static T: std::sync::OnceLock<Templates> = std::sync::OnceLock::new();
    T.get_or_init(|| {
        let empty = Image::background().cell_patch(0, 0);
        let glyphs = ObjectSpec::all()
            .map(|spec| {
                let mut img = Image::background();
                img.draw_glyph(0, 0, spec);
                img.cell_patch(0, 0)
            })
            .collect();
        Templates { empty, glyphs }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub src: ObjectSpec,
    pub dst: ObjectSpec,
    pub relation: Relation,
}

/// Directed left/right and front/behind relations between placed objects.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SceneGraph {
    pub vertices: BTreeSet<ObjectSpec>,
    pub edges: BTreeSet<Edge>,
}

impl SceneGraph {
    pub fn build(scene: &Scene) -> Self {
        let vertices = scene.specs();
        let mut edges = BTreeSet::new();
        for a in scene.placements() {
            for b in scene.placements() {
                if a.spec == b.spec {
                    continue;
                }
                let mut add = |relation| {
                    edges.insert(Edge {
                        src: a.spec,
                        dst: b.spec,
                        relation,
                    });
                };
                if a.x < b.x {
                    add(Relation::LeftOf);
                } else if a.x > b.x {
                    add(Relation::RightOf);
                }
                if a.y < b.y {
                    add(Relation::Behind);
                } else if a.y > b.y {
                    add(Relation::InFrontOf);
                }
            }
        }
        Self { vertices, edges }
    }
}
