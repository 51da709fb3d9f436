//! Visual PVR datasets composed from 28x28 digit-image banks.
//!
//! Every digit is pasted into a 40x40 cell at an integer jitter offset drawn
//! uniformly from `[0, 12]` on each axis. Block style arranges four cells in a
//! 2x2 grid (pointer top left); sequential style places eleven cells in a row
//! (pointer leftmost). For each cell a class is drawn uniformly from the
//! cell's allowed set, then an image uniformly from that class's pool.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dshift::SamplingPlan;
use crate::error::{Error, Result};
use crate::idx::{self, IdxTensor, IMAGES_MAGIC, LABELS_MAGIC};
use crate::par::map_indexed;
use crate::rng::{RngStream, GENERATOR_ID};
use crate::task::{block_position_of, SEQ_LEN};

pub const DIGIT_SIDE: usize = 28;
pub const CELL_SIDE: usize = 40;
pub const MAX_JITTER: u32 = (CELL_SIDE - DIGIT_SIDE) as u32;
const DIGIT_PIXELS: usize = DIGIT_SIDE * DIGIT_SIDE;
const PLACEMENTS_MAGIC: u32 = 0x0000_0803;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBank {
    images: Vec<u8>,
    labels: Vec<u8>,
    pools: Vec<Vec<u32>>,
    digest: String,
}

impl ImageBank {
    pub fn new(images: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if !images.len().is_multiple_of(DIGIT_PIXELS) {
            return Err(Error::InvalidHeader(format!(
                "{} image bytes is not a whole number of 28x28 images",
                images.len()
            )));
        }
        let n = images.len() / DIGIT_PIXELS;
        if n != labels.len() {
            return Err(Error::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        let mut pools = vec![Vec::new(); 10];
        for (i, &l) in labels.iter().enumerate() {
            pools
                .get_mut(l as usize)
                .ok_or(Error::InvalidLabel { label: l })?
                .push(i as u32);
        }
        if let Some(c) = pools.iter().position(Vec::is_empty) {
            return Err(Error::EmptyClassPool(c as u8));
        }
        let mut hasher = Sha256::new();
        hasher.update(idx::encode(&image_tensor(n, images.clone())));
        hasher.update(idx::encode(&IdxTensor {
            dims: vec![n],
            data: labels.clone(),
        }));
        let digest = hex_string(&hasher.finalize());
        Ok(Self {
            images,
            labels,
            pools,
            digest,
        })
    }

    pub fn from_tensors(images: IdxTensor, labels: IdxTensor) -> Result<Self> {
        if images.dims.len() != 3 {
            return Err(Error::InvalidHeader(format!("image tensor rank {}", images.dims.len())));
        }
        if images.dims[1] != DIGIT_SIDE || images.dims[2] != DIGIT_SIDE {
            return Err(Error::InvalidShape {
                rows: images.dims[1],
                cols: images.dims[2],
            });
        }
        if images.dims[0] != labels.dims[0] {
            return Err(Error::CountMismatch {
                images: images.dims[0],
                labels: labels.dims[0],
            });
        }
        Self::new(images.data, labels.data)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * DIGIT_PIXELS..(i + 1) * DIGIT_PIXELS]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn pool(&self, class: u8) -> &[u32] {
        &self.pools[class as usize]
    }

    /// SHA-256 of the canonical IDX encoding of images and labels.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn to_tensors(&self) -> (IdxTensor, IdxTensor) {
        (
            image_tensor(self.len(), self.images.clone()),
            IdxTensor {
                dims: vec![self.len()],
                data: self.labels.clone(),
            },
        )
    }
}

fn image_tensor(n: usize, data: Vec<u8>) -> IdxTensor {
    IdxTensor {
        dims: vec![n, DIGIT_SIDE, DIGIT_SIDE],
        data,
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn read_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<ImageBank> {
    let images = idx::read(images, IMAGES_MAGIC)?;
    let labels = idx::read(labels, LABELS_MAGIC)?;
    ImageBank::from_tensors(images, labels)
}

pub fn write_idx_bank(bank: &ImageBank, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let (i, l) = bank.to_tensors();
    idx::write(&i, images)?;
    idx::write(&l, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Block,
    Sequential,
}

impl Style {
    pub fn grid(self) -> (usize, usize) {
        match self {
            Style::Block => (2, 2),
            Style::Sequential => (1, SEQ_LEN),
        }
    }

    pub fn cells(self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn height(self) -> usize {
        self.grid().0 * CELL_SIDE
    }

    pub fn width(self) -> usize {
        self.grid().1 * CELL_SIDE
    }
}

impl std::str::FromStr for Style {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block" => Ok(Style::Block),
            "sequential" => Ok(Style::Sequential),
            _ => Err(Error::InvalidArgument(format!("unknown style `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellPlacement {
    pub class: u8,
    pub source: u32,
    pub dx: u8,
    pub dy: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposeManifest {
    pub style: Style,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub cell_side: usize,
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub seed: u64,
    pub bank_digest: String,
    pub plan: SamplingPlan,
    pub generator: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComposedDataset {
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    /// `count x cells` placements, row-major.
    pub placements: Vec<CellPlacement>,
    pub manifest: ComposeManifest,
}

impl ComposedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let px = self.manifest.height * self.manifest.width;
        &self.images[i * px..(i + 1) * px]
    }

    pub fn cells(&self, i: usize) -> &[CellPlacement] {
        let c = self.manifest.style.cells();
        &self.placements[i * c..(i + 1) * c]
    }
}

/// Cell index holding the label for a given pointer class.
pub fn target_cell(style: Style, pointer: u8) -> Result<usize> {
    match style {
        Style::Block => Ok(block_position_of(pointer)?.cell()),
        Style::Sequential => Ok(pointer as usize + 1),
    }
}

pub fn compose_block(
    bank: &ImageBank,
    plan: &SamplingPlan,
    n: usize,
    seed: u64,
    workers: usize,
) -> Result<ComposedDataset> {
    compose(bank, Style::Block, plan, n, seed, workers)
}

pub fn compose_sequential(bank: &ImageBank, n: usize, seed: u64, workers: usize) -> Result<ComposedDataset> {
    compose(bank, Style::Sequential, &SamplingPlan::iid(SEQ_LEN), n, seed, workers)
}

pub fn compose(
    bank: &ImageBank,
    style: Style,
    plan: &SamplingPlan,
    n: usize,
    seed: u64,
    workers: usize,
) -> Result<ComposedDataset> {
    let cells = style.cells();
    if plan.cells.len() != cells {
        return Err(Error::InvalidArgument(format!(
            "plan has {} cells, {style:?} style needs {cells}",
            plan.cells.len()
        )));
    }
    if let Some(c) = plan.cells.iter().position(Vec::is_empty) {
        return Err(Error::EmptyAllowedSet(c));
    }
    if let Some(d) = plan.cells.iter().flatten().find(|&&d| d >= 10) {
        return Err(Error::InvalidLabel { label: *d });
    }
    let (h, w) = (style.height(), style.width());
    let examples = map_indexed(n, workers, |i| -> Result<(Vec<u8>, u8, Vec<CellPlacement>)> {
        let mut stream = RngStream::new(seed, i as u64);
        let placements: Vec<CellPlacement> = plan
            .cells
            .iter()
            .map(|allowed| {
                let class = allowed[stream.below(allowed.len() as u32) as usize];
                let pool = bank.pool(class);
                let source = pool[stream.below(pool.len() as u32) as usize];
                let dx = stream.below(MAX_JITTER + 1) as u8;
                let dy = stream.below(MAX_JITTER + 1) as u8;
                CellPlacement { class, source, dx, dy }
            })
            .collect();
        let label = placements[target_cell(style, placements[0].class)?].class;
        let mut canvas = vec![0u8; h * w];
        for (c, p) in placements.iter().enumerate() {
            debug_assert_eq!(bank.label(p.source as usize), p.class);
            let (cr, cc) = (c / style.grid().1, c % style.grid().1);
            let top = cr * CELL_SIDE + p.dy as usize;
            let left = cc * CELL_SIDE + p.dx as usize;
            let src = bank.image(p.source as usize);
            for r in 0..DIGIT_SIDE {
                let row = (top + r) * w + left;
                canvas[row..row + DIGIT_SIDE].copy_from_slice(&src[r * DIGIT_SIDE..(r + 1) * DIGIT_SIDE]);
            }
        }
        Ok((canvas, label, placements))
    });
    let mut images = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n);
    let mut all_placements = Vec::with_capacity(n * cells);
    for e in examples {
        let (canvas, label, placements) = e?;
        images.extend_from_slice(&canvas);
        labels.push(label);
        all_placements.extend(placements);
    }
    let (grid_rows, grid_cols) = style.grid();
    Ok(ComposedDataset {
        images,
        labels,
        placements: all_placements,
        manifest: ComposeManifest {
            style,
            grid_rows,
            grid_cols,
            cell_side: CELL_SIDE,
            height: h,
            width: w,
            count: n,
            seed,
            bank_digest: bank.digest().to_string(),
            plan: plan.clone(),
            generator: GENERATOR_ID.to_string(),
        },
    })
}

const IMAGES_FILE: &str = "images.idx";
const LABELS_FILE: &str = "labels.idx";
const PLACEMENTS_FILE: &str = "placements.idx";
const MANIFEST_FILE: &str = "manifest.json";

/// Writes `images.idx`, `labels.idx`, `placements.idx` and `manifest.json`.
/// Placements are stored as 7 bytes per cell: class, dx, dy and the
/// big-endian `u32` source index.
pub fn write_composed(ds: &ComposedDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let m = &ds.manifest;
    idx::write(
        &IdxTensor {
            dims: vec![ds.len(), m.height, m.width],
            data: ds.images.clone(),
        },
        dir.join(IMAGES_FILE),
    )?;
    idx::write(
        &IdxTensor {
            dims: vec![ds.len()],
            data: ds.labels.clone(),
        },
        dir.join(LABELS_FILE),
    )?;
    let mut packed = Vec::with_capacity(ds.placements.len() * 7);
    for p in &ds.placements {
        packed.extend_from_slice(&[p.class, p.dx, p.dy]);
        packed.extend_from_slice(&p.source.to_be_bytes());
    }
    idx::write(
        &IdxTensor {
            dims: vec![ds.len(), m.style.cells(), 7],
            data: packed,
        },
        dir.join(PLACEMENTS_FILE),
    )?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(m)? + "\n")?;
    Ok(())
}

pub fn read_composed(dir: impl AsRef<Path>) -> Result<ComposedDataset> {
    let dir = dir.as_ref();
    let manifest: ComposeManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let images = idx::read(dir.join(IMAGES_FILE), IMAGES_MAGIC)?;
    let labels = idx::read(dir.join(LABELS_FILE), LABELS_MAGIC)?;
    let placements = idx::read(dir.join(PLACEMENTS_FILE), PLACEMENTS_MAGIC)?;
    let n = manifest.count;
    if images.dims != [n, manifest.height, manifest.width] || labels.dims != [n] {
        return Err(Error::InvalidHeader(format!(
            "tensor dims {:?}/{:?} disagree with manifest",
            images.dims, labels.dims
        )));
    }
    if placements.dims != [n, manifest.style.cells(), 7] {
        return Err(Error::InvalidHeader(format!("placement dims {:?}", placements.dims)));
    }
    let placements = placements
        .data
        .chunks_exact(7)
        .map(|c| CellPlacement {
            class: c[0],
            dx: c[1],
            dy: c[2],
            source: u32::from_be_bytes(c[3..7].try_into().expect("4 bytes")),
        })
        .collect();
    Ok(ComposedDataset {
        images: images.data,
        labels: labels.data,
        placements,
        manifest,
    })
}

/// A procedurally drawn stand-in for a handwritten-digit bank: seven-segment
/// glyphs with per-image stroke width, shear, shift and intensity noise.
/// Class `i % 10` for image `i`, so every class pool is populated.
pub fn synthetic_bank(n: usize, seed: u64) -> Result<ImageBank> {
    const SEGMENTS: [[bool; 7]; 10] = [
        // top, upper-left, upper-right, middle, lower-left, lower-right, bottom
        [true, true, true, false, true, true, true],
        [false, false, true, false, false, true, false],
        [true, false, true, true, true, false, true],
        [true, false, true, true, false, true, true],
        [false, true, true, true, false, true, false],
        [true, true, false, true, false, true, true],
        [true, true, false, true, true, true, true],
        [true, false, true, false, false, true, false],
        [true, true, true, true, true, true, true],
        [true, true, true, true, false, true, true],
    ];
    if n < 10 {
        return Err(Error::InvalidArgument("a bank needs at least 10 images".into()));
    }
    let images: Vec<Vec<u8>> = map_indexed(n, 1, |i| {
        let mut s = RngStream::new(seed, i as u64);
        let class = i % 10;
        let thick = 2 + s.below(2) as i32;
        let shear = s.uniform(-0.2, 0.2);
        let ox = s.below(5) as i32 - 2;
        let oy = s.below(5) as i32 - 2;
        let ink = 180 + s.below(76) as i32;
        let (l, r, t, m, b) = (8 + ox, 19 + ox, 5 + oy, 13 + oy, 22 + oy);
        let mut img = vec![0u8; DIGIT_PIXELS];
        let mut stroke = |x0: i32, y0: i32, x1: i32, y1: i32| {
            for y in y0..=y1 + thick - 1 {
                for x in x0..=x1 + thick - 1 {
                    let xs = x + (shear * (14 - y) as f64).round() as i32;
                    if (0..DIGIT_SIDE as i32).contains(&xs) && (0..DIGIT_SIDE as i32).contains(&y) {
                        img[y as usize * DIGIT_SIDE + xs as usize] = ink as u8;
                    }
                }
            }
        };
        let seg = SEGMENTS[class];
        if seg[0] {
            stroke(l, t, r, t);
        }
        if seg[1] {
            stroke(l, t, l, m);
        }
        if seg[2] {
            stroke(r, t, r, m);
        }
        if seg[3] {
            stroke(l, m, r, m);
        }
        if seg[4] {
            stroke(l, m, l, b);
        }
        if seg[5] {
            stroke(r, m, r, b);
        }
        if seg[6] {
            stroke(l, b, r, b);
        }
        for px in img.iter_mut() {
            if *px > 0 {
                *px = px.saturating_sub(s.below(40) as u8);
            }
        }
        img
    });
    let labels = (0..n).map(|i| (i % 10) as u8).collect();
    ImageBank::new(images.concat(), labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dshift::{visual_split_plan, PositionalHoldoutRule, SplitPhase};
    use crate::task::BlockPosition;

    fn bank() -> ImageBank {
        synthetic_bank(200, 1).unwrap()
    }

    fn assert_pixels_match(bank: &ImageBank, ds: &ComposedDataset) {
        let style = ds.manifest.style;
        let w = ds.manifest.width;
        for i in 0..ds.len() {
            let img = ds.image(i);
            for (c, p) in ds.cells(i).iter().enumerate() {
                assert!(p.dx as u32 <= MAX_JITTER && p.dy as u32 <= MAX_JITTER);
                let (cr, cc) = (c / style.grid().1, c % style.grid().1);
                let src = bank.image(p.source as usize);
                for y in 0..CELL_SIDE {
                    for x in 0..CELL_SIDE {
                        let got = img[(cr * CELL_SIDE + y) * w + cc * CELL_SIDE + x];
                        let (ry, rx) = (y as i64 - p.dy as i64, x as i64 - p.dx as i64);
                        let inside = (0..28).contains(&ry) && (0..28).contains(&rx);
                        let want = if inside { src[ry as usize * 28 + rx as usize] } else { 0 };
                        assert_eq!(got, want);
                    }
                }
            }
        }
    }

    #[test]
    fn block_composition_rules() {
        let b = bank();
        let plan = SamplingPlan::iid(4);
        let ds = compose_block(&b, &plan, 50, 3, 1).unwrap();
        assert_eq!((ds.manifest.height, ds.manifest.width), (80, 80));
        assert_eq!(ds.images.len(), 50 * 80 * 80);
        for i in 0..ds.len() {
            let cells = ds.cells(i);
            let pos = block_position_of(cells[0].class).unwrap();
            assert_eq!(ds.labels[i], cells[pos.cell()].class);
            for p in cells {
                assert_eq!(b.label(p.source as usize), p.class);
            }
        }
        assert_pixels_match(&b, &ds);
    }

    #[test]
    fn lower_left_for_pointer_five() {
        let b = bank();
        let mut plan = SamplingPlan::iid(4);
        plan.cells[0] = vec![5];
        let ds = compose_block(&b, &plan, 20, 9, 1).unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.labels[i], ds.cells(i)[BlockPosition::LowerLeft.cell()].class);
        }
    }

    #[test]
    fn train_plan_excludes_heldout_classes() {
        let b = bank();
        let rule = PositionalHoldoutRule::default();
        let plan = visual_split_plan(&rule, SplitPhase::Train).unwrap();
        let ds = compose_block(&b, &plan, 500, 4, 1).unwrap();
        for i in 0..ds.len() {
            for pos in BlockPosition::ALL {
                assert!(!rule.excluded[&pos].contains(&ds.cells(i)[pos.cell()].class));
            }
        }
    }

    #[test]
    fn sequential_geometry_and_label() {
        let b = bank();
        let ds = compose_sequential(&b, 30, 5, 1).unwrap();
        assert_eq!((ds.manifest.height, ds.manifest.width), (40, 440));
        for i in 0..ds.len() {
            let cells = ds.cells(i);
            assert_eq!(ds.labels[i], cells[cells[0].class as usize + 1].class);
        }
        assert_pixels_match(&b, &ds);
        assert_eq!(ds, compose_sequential(&b, 30, 5, 4).unwrap());
    }

    #[test]
    fn empty_allowed_set_rejected() {
        let mut plan = SamplingPlan::iid(4);
        plan.cells[2].clear();
        assert!(matches!(
            compose_block(&bank(), &plan, 1, 0, 1),
            Err(Error::EmptyAllowedSet(2))
        ));
    }

    #[test]
    fn bank_validation() {
        let img = vec![0u8; DIGIT_PIXELS * 10];
        let mut labels: Vec<u8> = (0..10).collect();
        ImageBank::new(img.clone(), labels.clone()).unwrap();
        labels[3] = 10;
        assert!(matches!(
            ImageBank::new(img.clone(), labels),
            Err(Error::InvalidLabel { label: 10 })
        ));
        assert!(matches!(
            ImageBank::new(img.clone(), (0..9).collect()),
            Err(Error::CountMismatch { .. })
        ));
        assert!(matches!(
            ImageBank::new(img, vec![0; 10]),
            Err(Error::EmptyClassPool(1))
        ));
    }

    #[test]
    fn idx_bank_round_trip_and_digest() {
        let dir = tempfile::tempdir().unwrap();
        let b = bank();
        let (ip, lp) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
        write_idx_bank(&b, &ip, &lp).unwrap();
        let back = read_idx(&ip, &lp).unwrap();
        assert_eq!(back, b);
        let mut raw = fs::read(&ip).unwrap();
        let last = raw.len() - 1;
        raw[last] ^= 1;
        fs::write(&ip, &raw).unwrap();
        assert_ne!(read_idx(&ip, &lp).unwrap().digest(), b.digest());
        assert!(matches!(read_idx(&lp, &ip), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn composed_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = bank();
        let plan = visual_split_plan(&PositionalHoldoutRule::default(), SplitPhase::HoldoutTest).unwrap();
        let ds = compose_block(&b, &plan, 10, 2, 1).unwrap();
        write_composed(&ds, dir.path()).unwrap();
        let back = read_composed(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.manifest.plan, plan);
    }
}
