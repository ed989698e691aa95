//! Keyframe augmentation: quadrant grid tokens, fine-grained tokens, box
//! tokens, and the prompt template that wraps them. Nothing here is trained.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::SlowPathConfig;
use crate::encoders::encode::{block_cells, mean_rows, N_PATCHES};
use crate::encoders::scene::{PrimitiveKind, SyntheticFrame, SIDE};
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::sequence::SequenceElement;
use crate::tensor::Tensor;
use crate::vocab::{self, TokenId};

pub const GRID_SUBFRAMES: usize = 4;
pub const GRID_PER_SUBFRAME: usize = 9;
pub const GRID_TOKENS: usize = GRID_SUBFRAMES * GRID_PER_SUBFRAME;
pub const FINE_TOKENS: usize = 36;
pub const BOX_TOKENS: usize = 3;
const BOX_ORDER: [PrimitiveKind; BOX_TOKENS] = [PrimitiveKind::HandLeft, PrimitiveKind::HandRight, PrimitiveKind::Object];

/// Inclusive patch-coordinate rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRegion {
    pub kind: PrimitiveKind,
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl BoxRegion {
    pub fn validate(&self) -> Result<()> {
        if self.r0 > self.r1 || self.c0 > self.c1 || self.r1 >= SIDE || self.c1 >= SIDE {
            return Err(Error::Box(format!("malformed box {self:?}")));
        }
        Ok(())
    }

    pub fn full_frame(kind: PrimitiveKind) -> Self {
        Self { kind, r0: 0, c0: 0, r1: SIDE - 1, c1: SIDE - 1 }
    }

    /// Cells whose area intersects the box, row-major.
    pub fn cells(&self) -> impl Iterator<Item = usize> + '_ {
        (self.r0..=self.r1).flat_map(move |r| (self.c0..=self.c1).map(move |c| r * SIDE + c))
    }
}

/// 36 quadrant-pooled tokens: four 3x3 sub-frames ordered top-left,
/// top-right, bottom-left, bottom-right.
#[derive(Clone, Debug, PartialEq)]
pub struct GridTokens {
    pub tokens: Tensor,
}

impl GridTokens {
    pub fn subframe(&self, q: usize) -> Vec<&[f64]> {
        (q * GRID_PER_SUBFRAME..(q + 1) * GRID_PER_SUBFRAME).map(|i| self.tokens.row(i)).collect()
    }
}

/// Left hand, right hand, object; absent kinds hold the global-pool token.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxTokens {
    pub tokens: Tensor,
    pub fallback: [bool; BOX_TOKENS],
}

fn check_grid(grid: &Tensor) -> Result<usize> {
    if grid.shape().len() != 2 || grid.rows() != N_PATCHES {
        return Err(Error::Shape(format!("patch grid must be [{N_PATCHES} x w], got {:?}", grid.shape())));
    }
    Ok(grid.cols())
}

pub fn make_grid_tokens(grid: &Tensor) -> Result<GridTokens> {
    let w = check_grid(grid)?;
    let half = SIDE / 2;
    let cell = half / 3;
    let mut rows = Vec::with_capacity(GRID_TOKENS);
    for (qr, qc) in [(0, 0), (0, half), (half, 0), (half, half)] {
        for br in 0..3 {
            for bc in 0..3 {
                rows.push(mean_rows(grid.data(), w, block_cells(SIDE, qr + br * cell, qc + bc * cell, cell)));
            }
        }
    }
    Ok(GridTokens { tokens: Tensor::from_rows(&rows)? })
}

/// One 6x6 pooling of the whole grid, row-major, without separators.
pub fn make_fine_grained_tokens(grid: &Tensor) -> Result<Tensor> {
    let w = check_grid(grid)?;
    let cell = SIDE / 6;
    let mut rows = Vec::with_capacity(FINE_TOKENS);
    for br in 0..6 {
        for bc in 0..6 {
            rows.push(mean_rows(grid.data(), w, block_cells(SIDE, br * cell, bc * cell, cell)));
        }
    }
    Tensor::from_rows(&rows)
}

pub fn global_pool(grid: &Tensor) -> Result<Vec<f64>> {
    let w = check_grid(grid)?;
    Ok(mean_rows(grid.data(), w, 0..N_PATCHES))
}

pub fn make_box_tokens(grid: &Tensor, boxes: &[BoxRegion]) -> Result<BoxTokens> {
    let w = check_grid(grid)?;
    if boxes.len() > BOX_TOKENS {
        return Err(Error::Box(format!("{} boxes, at most {BOX_TOKENS} allowed", boxes.len())));
    }
    for b in boxes {
        b.validate()?;
    }
    let global = mean_rows(grid.data(), w, 0..N_PATCHES);
    let mut rows = Vec::with_capacity(BOX_TOKENS);
    let mut fallback = [false; BOX_TOKENS];
    for (slot, kind) in BOX_ORDER.iter().enumerate() {
        let mut found = boxes.iter().filter(|b| b.kind == *kind);
        match (found.next(), found.next()) {
            (Some(_), Some(_)) => return Err(Error::Box(format!("two boxes of kind {kind:?}"))),
            (Some(b), None) => rows.push(mean_rows(grid.data(), w, b.cells())),
            (None, _) => {
                rows.push(global.clone());
                fallback[slot] = true;
            }
        }
    }
    Ok(BoxTokens { tokens: Tensor::from_rows(&rows)?, fallback })
}

/// Boxes read straight from the scene description. With a jitter seed each
/// box is shifted by up to one patch per axis.
pub fn detect_boxes_synthetic(frame: &SyntheticFrame, jitter_seed: Option<u64>) -> Vec<BoxRegion> {
    let mut rng = jitter_seed.map(|s| seeded(s, crate::rng::streams::JITTER));
    let max = SIDE as i64 - 1;
    frame
        .scene
        .iter()
        .filter(|p| p.intensity > 0.0)
        .map(|p| {
            let mut b = p.rect();
            if let Some(rng) = rng.as_mut() {
                let dr: i64 = rng.random_range(-1..=1);
                let dc: i64 = rng.random_range(-1..=1);
                let mv = |v: usize, d: i64| (v as i64 + d).clamp(0, max) as usize;
                b = BoxRegion { kind: b.kind, r0: mv(b.r0, dr), r1: mv(b.r1, dr), c0: mv(b.c0, dc), c1: mv(b.c1, dc) };
            }
            b
        })
        .collect()
}

/// Position of one element inside the keyframe template.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemplateItem {
    Token(TokenId),
    /// Row of the keyframe's own frame tokens.
    Frame(usize),
    /// Grid token `row` of sub-frame `q` (row counts within the 36).
    Grid { q: usize, row: usize },
    Fine(usize),
    Box(usize),
}

impl TemplateItem {
    /// Visual items sharing a key form one dropping group.
    pub fn group_key(self) -> Option<usize> {
        match self {
            TemplateItem::Token(_) => None,
            TemplateItem::Frame(_) => Some(0),
            TemplateItem::Grid { q, .. } => Some(1 + q),
            TemplateItem::Fine(_) => Some(5),
            TemplateItem::Box(_) => Some(6),
        }
    }
}

/// `STREAM_TAG, frame, grid-or-fine, USER_TAG, FOCUS_PHRASE, boxes, RESPOND`.
pub fn template_layout(cfg: &SlowPathConfig, frame_tokens: usize) -> Vec<TemplateItem> {
    let mut items = vec![TemplateItem::Token(vocab::STREAM_TAG)];
    items.extend((0..frame_tokens).map(TemplateItem::Frame));
    if cfg.fine_grained {
        items.extend((0..FINE_TOKENS).map(TemplateItem::Fine));
    } else if cfg.grid {
        for q in 0..GRID_SUBFRAMES {
            items.extend((0..GRID_PER_SUBFRAME).map(|i| TemplateItem::Grid { q, row: q * GRID_PER_SUBFRAME + i }));
            items.push(TemplateItem::Token(vocab::FRAME_SEP));
        }
    }
    items.push(TemplateItem::Token(vocab::USER_TAG));
    items.push(TemplateItem::Token(vocab::FOCUS_PHRASE));
    if cfg.boxes {
        items.extend((0..BOX_TOKENS).map(TemplateItem::Box));
    }
    items.push(TemplateItem::Token(vocab::RESPOND));
    items
}

/// Concrete template elements for one keyframe. Replaces the bare RESPOND
/// token that would otherwise follow the frame.
pub fn assemble_thinking_template(
    cfg: &SlowPathConfig,
    frame_tokens: &Tensor,
    grid: Option<&GridTokens>,
    fine: Option<&Tensor>,
    boxes: Option<&BoxTokens>,
) -> Result<Vec<SequenceElement>> {
    let missing = |what: &str| Error::Template(format!("template needs {what} tokens"));
    if frame_tokens.rows() == 0 {
        return Err(missing("frame"));
    }
    let mut out = Vec::new();
    for item in template_layout(cfg, frame_tokens.rows()) {
        out.push(match item {
            TemplateItem::Token(t) => SequenceElement::Token(t),
            TemplateItem::Frame(i) => SequenceElement::Visual(frame_tokens.row(i).to_vec()),
            TemplateItem::Grid { row, .. } => {
                SequenceElement::Visual(grid.ok_or_else(|| missing("grid"))?.tokens.row(row).to_vec())
            }
            TemplateItem::Fine(i) => SequenceElement::Visual(fine.ok_or_else(|| missing("fine-grained"))?.row(i).to_vec()),
            TemplateItem::Box(i) => SequenceElement::Visual(boxes.ok_or_else(|| missing("box"))?.tokens.row(i).to_vec()),
        });
    }
    Ok(out)
}
