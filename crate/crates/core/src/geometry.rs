//! Exact geometric relations between axis-aligned text-segment boxes.
//!
//! Everything here is pure and deterministic: 9-way direction between two
//! boxes, minimum rectangle distance, nearest-segment-per-direction, and
//! triplet collinearity. Coordinates live in the image frame (x grows right,
//! y grows down), so `BottomRight` means "towards the lower right corner of
//! the page".

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in image coordinates. Construction enforces positive
/// width and height and finite, non-negative coordinates, so downstream
/// geometry never has to re-validate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBBox", into = "RawBBox")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBBox(f64, f64, f64, f64);

impl TryFrom<RawBBox> for BBox {
    type Error = Error;
    fn try_from(raw: RawBBox) -> Result<Self> {
        BBox::new(raw.0, raw.1, raw.2, raw.3)
    }
}

impl From<BBox> for RawBBox {
    fn from(b: BBox) -> Self {
        RawBBox(b.x1, b.y1, b.x2, b.y2)
    }
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let invalid = |reason| Error::InvalidBox {
            x1,
            y1,
            x2,
            y2,
            reason,
        };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(invalid("coordinates must be finite"));
        }
        if x1 < 0.0 || y1 < 0.0 {
            return Err(invalid("coordinates must be non-negative"));
        }
        if x1 >= x2 {
            return Err(invalid("zero or negative width"));
        }
        if y1 >= y2 {
            return Err(invalid("zero or negative height"));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Smallest box containing all inputs. `None` for an empty iterator.
    pub fn hull<'a>(boxes: impl IntoIterator<Item = &'a BBox>) -> Option<BBox> {
        let mut it = boxes.into_iter();
        let first = *it.next()?;
        let mut h = first;
        for b in it {
            h.x1 = h.x1.min(b.x1);
            h.y1 = h.y1.min(b.y1);
            h.x2 = h.x2.max(b.x2);
            h.y2 = h.y2.max(b.y2);
        }
        Some(h)
    }

    /// True iff the intersection has positive area. Shared edges or corners
    /// do not count.
    pub fn overlaps(&self, other: &BBox) -> bool {
        let x_overlap = self.x2.min(other.x2) - self.x1.max(other.x1);
        let y_overlap = self.y2.min(other.y2) - self.y1.max(other.y1);
        x_overlap > 0.0 && y_overlap > 0.0
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<BBox> {
        BBox::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    pub fn scale(&self, s: f64) -> Result<BBox> {
        BBox::new(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)
    }
}

/// 9-way relation between two boxes: the 8 compass sectors around the first
/// box plus `Overlap`. Sector order matches the label indices used by the
/// direction head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    Right,
    BottomRight,
    Bottom,
    BottomLeft,
    Left,
    TopLeft,
    Top,
    TopRight,
    Overlap,
}

impl Direction {
    pub const COMPASS: [Direction; 8] = [
        Direction::Right,
        Direction::BottomRight,
        Direction::Bottom,
        Direction::BottomLeft,
        Direction::Left,
        Direction::TopLeft,
        Direction::Top,
        Direction::TopRight,
    ];

    /// Class index in 0..=8; `Overlap` is 8.
    pub fn index(self) -> usize {
        match self {
            Direction::Right => 0,
            Direction::BottomRight => 1,
            Direction::Bottom => 2,
            Direction::BottomLeft => 3,
            Direction::Left => 4,
            Direction::TopLeft => 5,
            Direction::Top => 6,
            Direction::TopRight => 7,
            Direction::Overlap => 8,
        }
    }

    pub fn from_index(idx: usize) -> Option<Direction> {
        [
            Direction::Right,
            Direction::BottomRight,
            Direction::Bottom,
            Direction::BottomLeft,
            Direction::Left,
            Direction::TopLeft,
            Direction::Top,
            Direction::TopRight,
            Direction::Overlap,
        ]
        .get(idx)
        .copied()
    }

    /// Opposite compass direction; `None` for `Overlap`.
    pub fn antiphase(self) -> Option<Direction> {
        match self {
            Direction::Overlap => None,
            d => Direction::from_index((d.index() + 4) % 8),
        }
    }
}

/// Alignment class of a box triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CollinearClass {
    Horizontal,
    Vertical,
    /// Bottom-left to top-right alignment ("/" in image coordinates).
    ForwardSlash,
    /// Top-left to bottom-right alignment ("\" in image coordinates).
    Backslash,
    None,
}

impl CollinearClass {
    pub fn index(self) -> usize {
        match self {
            CollinearClass::Horizontal => 0,
            CollinearClass::Vertical => 1,
            CollinearClass::ForwardSlash => 2,
            CollinearClass::Backslash => 3,
            CollinearClass::None => 4,
        }
    }

    pub fn from_index(idx: usize) -> Option<CollinearClass> {
        [
            CollinearClass::Horizontal,
            CollinearClass::Vertical,
            CollinearClass::ForwardSlash,
            CollinearClass::Backslash,
            CollinearClass::None,
        ]
        .get(idx)
        .copied()
    }

    /// Axis class a compass direction belongs to; `None` for `Overlap`.
    pub fn of_direction(d: Direction) -> Option<CollinearClass> {
        match d {
            Direction::Right | Direction::Left => Some(CollinearClass::Horizontal),
            Direction::Top | Direction::Bottom => Some(CollinearClass::Vertical),
            Direction::TopRight | Direction::BottomLeft => Some(CollinearClass::ForwardSlash),
            Direction::TopLeft | Direction::BottomRight => Some(CollinearClass::Backslash),
            Direction::Overlap => None,
        }
    }
}

/// Direction from `a` to `b`: `Overlap` when the boxes share positive area,
/// otherwise the center-to-center angle quantized into eight 45-degree
/// sectors. Sector centers sit on the compass directions and the lower
/// boundary of each sector is inclusive, so `Right` covers angles in
/// `[-22.5, 22.5)` degrees.
pub fn direction(a: &BBox, b: &BBox) -> Direction {
    if a.overlaps(b) {
        return Direction::Overlap;
    }
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    let theta = (by - ay).atan2(bx - ax).to_degrees();
    let theta = if theta < 0.0 { theta + 360.0 } else { theta };
    let sector = ((theta + 22.5) / 45.0).floor() as usize % 8;
    Direction::from_index(sector).expect("sector in 0..8")
}

/// Euclidean distance between the closest points of two rectangles; zero
/// when they touch or overlap.
pub fn min_distance(a: &BBox, b: &BBox) -> f64 {
    let dx = (a.x1.max(b.x1) - a.x2.min(b.x2)).max(0.0);
    let dy = (a.y1.max(b.y1) - a.y2.min(b.y2)).max(0.0);
    (dx * dx + dy * dy).sqrt()
}

/// For each compass direction, the segment closest to the anchor among those
/// lying in that direction. Distance ties go to the smaller index; `Overlap`
/// pairs are never nearest in any direction.
pub fn nearest_in_direction(
    anchor_index: usize,
    segments: &[BBox],
) -> BTreeMap<Direction, usize> {
    let anchor = &segments[anchor_index];
    let mut best: BTreeMap<Direction, (f64, usize)> = BTreeMap::new();
    for (j, other) in segments.iter().enumerate() {
        if j == anchor_index {
            continue;
        }
        let dir = direction(anchor, other);
        if dir == Direction::Overlap {
            continue;
        }
        let dist = min_distance(anchor, other);
        match best.get(&dir) {
            Some(&(d, _)) if d <= dist => {}
            _ => {
                best.insert(dir, (dist, j));
            }
        }
    }
    best.into_iter().map(|(d, (_, j))| (d, j)).collect()
}

/// Collinearity of three boxes: the three pairwise directions must all fall
/// in one antiphase pair (Right/Left, Top/Bottom, TopRight/BottomLeft,
/// TopLeft/BottomRight). Any overlapping pair makes the triple `None`.
/// The result is invariant under permutations of the arguments.
pub fn collinearity(a: &BBox, b: &BBox, c: &BBox) -> CollinearClass {
    let dirs = [direction(a, b), direction(b, c), direction(a, c)];
    let mut class = None;
    for d in dirs {
        match CollinearClass::of_direction(d) {
            None => return CollinearClass::None,
            Some(axis) => match class {
                None => class = Some(axis),
                Some(prev) if prev == axis => {}
                Some(_) => return CollinearClass::None,
            },
        }
    }
    class.unwrap_or(CollinearClass::None)
}
