//! Patch visit orders.
//!
//! Two orders are produced over an `r × c` patch grid:
//!
//! * the horizontal Z-scan (plain row-major order), and
//! * the mask-aware adaptive order: the shadow rectangle `B` is walked as a
//!   reversed inward spiral ending next to the non-shadow start point, then
//!   the remaining cells are visited by a greedy boundary-contact search
//!   (GBS) that always steps to the unvisited neighbour touching the most
//!   visited cells.
//!
//! All ties are broken by fixed orders so the output is a pure function of
//! the patch labels: edges `top < bottom < left < right`, neighbours in
//! [`DIRECTIONS`] order, equal-distance jump targets in row-major order.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::mask::{shadow_rect, PatchGrid, RegionRect};
use crate::tensor::{check_permutation, invert_permutation};
use crate::{Error, Result};

/// Neighbour offsets `(d_row, d_col)`: up, down, left, right.
pub const DIRECTIONS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// Patch coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Coord {
    pub row: usize,
    pub col: usize,
}

impl Coord {
    pub const fn new(row: usize, col: usize) -> Self {
        Coord { row, col }
    }

    pub fn manhattan(self, other: Coord) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }

    fn offset(self, (dr, dc): (isize, isize), rows: usize, cols: usize) -> Option<Coord> {
        let r = self.row.checked_add_signed(dr)?;
        let c = self.col.checked_add_signed(dc)?;
        (r < rows && c < cols).then_some(Coord::new(r, c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanKind {
    Horizontal,
    Mas,
}

impl ScanKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScanKind::Horizontal => "horizontal",
            ScanKind::Mas => "MAS",
        }
    }
}

impl core::str::FromStr for ScanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "horizontal" => Ok(ScanKind::Horizontal),
            "MAS" => Ok(ScanKind::Mas),
            other => Err(Error::Validation(format!("unknown scan kind {other:?}"))),
        }
    }
}

/// A visit order over every cell of a `rows × cols` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanPath {
    rows: usize,
    cols: usize,
    coords: Vec<Coord>,
    flat: Vec<usize>,
    kind: ScanKind,
    start_a: Option<Coord>,
    start_b: Option<Coord>,
}

impl ScanPath {
    /// Validates that `coords` visits every cell of the grid exactly once.
    pub fn new(rows: usize, cols: usize, coords: Vec<Coord>, kind: ScanKind) -> Result<Self> {
        if coords.iter().any(|p| p.row >= rows || p.col >= cols) {
            return Err(Error::Validation(format!("path leaves the {rows}×{cols} grid")));
        }
        let flat: Vec<usize> = coords.iter().map(|p| p.row * cols + p.col).collect();
        check_permutation(&flat, rows * cols)?;
        Ok(ScanPath { rows, cols, coords, flat, kind, start_a: None, start_b: None })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    /// The order as flattened indices `row · cols + col`.
    pub fn flat(&self) -> &[usize] {
        &self.flat
    }

    pub fn kind(&self) -> ScanKind {
        self.kind
    }

    pub fn start_a(&self) -> Option<Coord> {
        self.start_a
    }

    pub fn start_b(&self) -> Option<Coord> {
        self.start_b
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Position of every cell in the order, indexed by flat cell index.
    pub fn positions(&self) -> Vec<usize> {
        invert_permutation(&self.flat)
    }

    /// Expands the patch order into a pixel-token order for a map of width
    /// `cols · patch_size`: patches in path order, pixels row-major inside each.
    pub fn token_order(&self, patch_size: usize) -> Vec<usize> {
        let width = self.cols * patch_size;
        let mut order = Vec::with_capacity(self.len() * patch_size * patch_size);
        for p in &self.coords {
            for dy in 0..patch_size {
                let row = (p.row * patch_size + dy) * width + p.col * patch_size;
                order.extend(row..row + patch_size);
            }
        }
        order
    }
}

/// Row-major order `(0,0), (0,1), …, (r−1, c−1)`.
pub fn horizontal_order(rows: usize, cols: usize) -> Result<ScanPath> {
    if rows == 0 || cols == 0 {
        return Err(Error::Dimension(format!("scan grid must be non-empty, got {rows}×{cols}")));
    }
    let coords = (0..rows).flat_map(|r| (0..cols).map(move |c| Coord::new(r, c))).collect();
    ScanPath::new(rows, cols, coords, ScanKind::Horizontal)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Edge {
    Top,
    Bottom,
    Left,
    Right,
}

/// Grid corner where the non-shadow traversal starts.
///
/// The rectangle's distances to the four grid edges are compared; the closest
/// edge is picked first, then the closer of the two edges orthogonal to it,
/// and their shared grid corner is returned.
pub fn select_start_a(rect: &RegionRect, rows: usize, cols: usize) -> Coord {
    let dist = [
        (Edge::Top, rect.top),
        (Edge::Bottom, rows - 1 - rect.bottom),
        (Edge::Left, rect.left),
        (Edge::Right, cols - 1 - rect.right),
    ];
    // min_by_key keeps the first minimum, which is the fixed tie order
    let edge1 = dist.iter().min_by_key(|(_, d)| *d).unwrap().0;
    let edge2 = match edge1 {
        Edge::Top | Edge::Bottom => {
            if dist[2].1 <= dist[3].1 {
                Edge::Left
            } else {
                Edge::Right
            }
        }
        Edge::Left | Edge::Right => {
            if dist[0].1 <= dist[1].1 {
                Edge::Top
            } else {
                Edge::Bottom
            }
        }
    };
    let on = |e: Edge| edge1 == e || edge2 == e;
    let row = if on(Edge::Top) { 0 } else { rows - 1 };
    let col = if on(Edge::Left) { 0 } else { cols - 1 };
    Coord::new(row, col)
}

// Clockwise boundary walk of a ring, starting at its top-left corner. For a
// one-row or one-column ring the walk doubles back over the same cells.
fn ring_walk(rect: &RegionRect) -> Vec<Coord> {
    let RegionRect { top, bottom, left, right } = *rect;
    let mut walk = Vec::with_capacity(2 * (rect.sub_r() + rect.sub_c()));
    walk.extend((left..=right).map(|c| Coord::new(top, c)));
    walk.extend((top + 1..=bottom).map(|r| Coord::new(r, right)));
    walk.extend((left..right).rev().map(|c| Coord::new(bottom, c)));
    walk.extend((top + 1..bottom).rev().map(|r| Coord::new(r, left)));
    walk
}

/// Inward clockwise spiral over `rect` starting at the perimeter cell `start`.
///
/// Each ring is walked clockwise (interior on the right) from the current
/// start; the next ring starts at its cell nearest the last visited one.
/// Starting from a corner, consecutive cells are always 4-adjacent.
pub fn spiral_in(rect: &RegionRect, start: Coord) -> Result<Vec<Coord>> {
    if !rect.on_perimeter(start) {
        return Err(Error::Contract(format!(
            "spiral start ({}, {}) is not on the rectangle perimeter",
            start.row, start.col
        )));
    }
    let mut out = Vec::with_capacity(rect.area());
    let mut ring = Some(*rect);
    let mut cur = start;
    while let Some(r) = ring {
        let walk = ring_walk(&r);
        let k = walk.iter().position(|&p| p == cur).expect("start lies on the ring");
        let first_new = out.len();
        for &p in walk[k..].iter().chain(&walk[..k]) {
            if !out[first_new..].contains(&p) {
                out.push(p);
            }
        }
        ring = (r.bottom - r.top >= 2 && r.right - r.left >= 2)
            .then(|| RegionRect::new(r.top + 1, r.bottom - 1, r.left + 1, r.right - 1));
        if let Some(inner) = ring {
            let last = *out.last().unwrap();
            cur = ring_walk(&inner)
                .into_iter()
                .min_by_key(|p| (p.manhattan(last), *p))
                .unwrap();
        }
    }
    Ok(out)
}

/// Greedy boundary-contact traversal of every cell outside `rect`.
///
/// The rectangle counts as visited from the start. From the current cell the
/// walk moves to the unvisited 4-neighbour with the most visited 4-neighbours
/// of its own; with no unvisited neighbour it jumps to the nearest unvisited
/// cell. `start_a` itself is the first cell when it lies outside `rect`.
pub fn gbs_traverse(grid: &PatchGrid, rect: &RegionRect, start_a: Coord) -> Vec<Coord> {
    let (rows, cols) = (grid.rows(), grid.cols());
    let mut visited = vec![false; rows * cols];
    let mut remaining = rows * cols;
    for p in rect.cells() {
        visited[p.row * cols + p.col] = true;
        remaining -= 1;
    }
    let mut path = Vec::with_capacity(remaining);
    let mut cur = start_a;
    if !visited[cur.row * cols + cur.col] {
        visited[cur.row * cols + cur.col] = true;
        remaining -= 1;
        path.push(cur);
    }
    let touch = |visited: &[bool], p: Coord| {
        DIRECTIONS
            .iter()
            .filter_map(|&d| p.offset(d, rows, cols))
            .filter(|q| visited[q.row * cols + q.col])
            .count()
    };
    while remaining > 0 {
        let mut best: Option<(Coord, usize)> = None;
        for &d in &DIRECTIONS {
            let Some(n) = cur.offset(d, rows, cols) else { continue };
            if visited[n.row * cols + n.col] {
                continue;
            }
            let t = touch(&visited, n);
            if best.map_or(true, |(_, bt)| t > bt) {
                best = Some((n, t));
            }
        }
        let next = match best {
            Some((n, _)) => n,
            None => (0..rows * cols)
                .filter(|&i| !visited[i])
                .map(|i| Coord::new(i / cols, i % cols))
                .min_by_key(|p| (p.manhattan(cur), *p))
                .expect("unvisited cell remains"),
        };
        visited[next.row * cols + next.col] = true;
        remaining -= 1;
        path.push(next);
        cur = next;
    }
    path
}

/// Mask-aware adaptive order: reversed spiral over the shadow rectangle,
/// then the greedy traversal of the rest. Falls back to
/// [`horizontal_order`] when the grid has no shadow patch.
pub fn mas_order(grid: &PatchGrid) -> Result<ScanPath> {
    let (rows, cols) = (grid.rows(), grid.cols());
    let rect = match shadow_rect(grid) {
        Ok(r) => r,
        Err(Error::NoShadowRegion) => return horizontal_order(rows, cols),
        Err(e) => return Err(e),
    };
    let start_a = select_start_a(&rect, rows, cols);
    let path_a = gbs_traverse(grid, &rect, start_a);
    // nearest perimeter cell of B to start_A
    let start_b = rect
        .cells()
        .filter(|p| rect.on_perimeter(*p))
        .min_by_key(|p| (p.manhattan(start_a), *p))
        .unwrap();
    let mut coords = spiral_in(&rect, start_b)?;
    coords.reverse();
    coords.extend(path_a);
    let mut path = ScanPath::new(rows, cols, coords, ScanKind::Mas)?;
    path.start_a = Some(start_a);
    path.start_b = Some(start_b);
    Ok(path)
}

/// Inverse permutation over flat indices: `inv[path[i]] = i`.
pub fn invert_path(path: &ScanPath) -> ScanPath {
    let inv = invert_permutation(&path.flat);
    let coords = inv.iter().map(|&i| Coord::new(i / path.cols, i % path.cols)).collect();
    ScanPath { rows: path.rows, cols: path.cols, coords, flat: inv, kind: path.kind, start_a: None, start_b: None }
}

/// Mean `|pos(p) − pos(q)|` over 4-adjacent pairs of cells that both satisfy
/// `selected`; `None` when there is no such pair.
pub fn mean_adjacent_gap(path: &ScanPath, selected: impl Fn(Coord) -> bool) -> Option<f64> {
    let pos = path.positions();
    let cols = path.cols;
    let (mut total, mut pairs) = (0usize, 0usize);
    for r in 0..path.rows {
        for c in 0..cols {
            let p = Coord::new(r, c);
            if !selected(p) {
                continue;
            }
            for q in [Coord::new(r + 1, c), Coord::new(r, c + 1)] {
                if q.row < path.rows && q.col < cols && selected(q) {
                    total += pos[p.row * cols + p.col].abs_diff(pos[q.row * cols + q.col]);
                    pairs += 1;
                }
            }
        }
    }
    (pairs > 0).then(|| total as f64 / pairs as f64)
}
