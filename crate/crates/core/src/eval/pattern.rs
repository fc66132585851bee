//! Translational pattern discovery over (onset, pitch) point sets.

use std::collections::{HashMap, HashSet};
use std::ops::{Add, Sub};

use crate::midi::NoteList;
use crate::remi::tick_to_grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Point {
    pub onset: i64,
    pub pitch: i64,
}

impl Point {
    pub const ZERO: Point = Point { onset: 0, pitch: 0 };

    pub fn new(onset: i64, pitch: i64) -> Self {
        Self { onset, pitch }
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.onset + o.onset, self.pitch + o.pitch)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.onset - o.onset, self.pitch - o.pitch)
    }
}

/// Deduplicated, lexicographically sorted points.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PointSet {
    points: Vec<Point>,
}

impl PointSet {
    pub fn new(mut points: Vec<Point>) -> Self {
        points.sort_unstable();
        points.dedup();
        Self { points }
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn contains(&self, p: &Point) -> bool {
        self.points.binary_search(p).is_ok()
    }

    pub fn translated(&self, v: Point) -> PointSet {
        PointSet {
            points: self.points.iter().map(|&p| p + v).collect(),
        }
    }
}

/// One point per non-drum note at (onset grid position, pitch).
pub fn to_point_set(notes: &NoteList, resolution: u32) -> PointSet {
    PointSet::new(
        notes
            .notes
            .iter()
            .filter(|n| !n.is_drum)
            .map(|n| {
                Point::new(
                    tick_to_grid(n.onset, notes.ticks_per_quarter, resolution) as i64,
                    n.pitch as i64,
                )
            })
            .collect(),
    )
}

/// Translational equivalence class: a pattern and every vector that maps it
/// into the point set (the zero vector included).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tec {
    pub pattern: Vec<Point>,
    pub translators: Vec<Point>,
}

impl Tec {
    /// Points covered by the pattern under all translators.
    pub fn covered(&self) -> Vec<Point> {
        let mut out: Vec<Point> = self
            .translators
            .iter()
            .flat_map(|&t| self.pattern.iter().map(move |&p| p + t))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Size of the (pattern, translators) encoding.
    pub fn encoded_size(&self) -> usize {
        self.pattern.len() + self.translators.len() - 1
    }

    fn bounding_box_area(&self) -> i64 {
        let min_o = self.pattern.iter().map(|p| p.onset).min().unwrap_or(0);
        let max_o = self.pattern.iter().map(|p| p.onset).max().unwrap_or(0);
        let min_p = self.pattern.iter().map(|p| p.pitch).min().unwrap_or(0);
        let max_p = self.pattern.iter().map(|p| p.pitch).max().unwrap_or(0);
        (max_o - min_o + 1) * (max_p - min_p + 1)
    }
}

fn translators_of(pattern: &[Point], members: &HashSet<Point>, all: &[Point]) -> Vec<Point> {
    let anchor = pattern[0];
    let mut out: Vec<Point> = all
        .iter()
        .map(|&q| q - anchor)
        .filter(|&t| pattern.iter().all(|&p| members.contains(&(p + t))))
        .collect();
    out.sort_unstable();
    out
}

/// For every distinct difference vector `v` between two points, the maximal
/// translatable pattern `{p : p + v in P}` expanded to its TEC. Identical
/// patterns reached from different vectors are reported once; the output is
/// sorted by pattern.
pub fn siatec(points: &PointSet) -> Vec<Tec> {
    let pts = points.points();
    let n = pts.len();
    let mut table: Vec<(Point, u32)> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            table.push((pts[j] - pts[i], i as u32));
        }
    }
    table.sort_unstable();

    let mut patterns: Vec<Vec<Point>> = Vec::new();
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    let mut start = 0;
    while start < table.len() {
        let v = table[start].0;
        let mut end = start;
        while end < table.len() && table[end].0 == v {
            end += 1;
        }
        let idx: Vec<u32> = table[start..end].iter().map(|e| e.1).collect();
        if seen.insert(idx.clone()) {
            patterns.push(idx.into_iter().map(|i| pts[i as usize]).collect());
        }
        start = end;
    }

    let members: HashSet<Point> = pts.iter().copied().collect();
    let mut tecs: Vec<Tec> = patterns
        .into_iter()
        .map(|pattern| {
            let translators = translators_of(&pattern, &members, pts);
            Tec {
                pattern,
                translators,
            }
        })
        .collect();
    tecs.sort_by(|a, b| a.pattern.cmp(&b.pattern));
    tecs
}

#[derive(Debug, Clone)]
struct Candidate {
    tec: Tec,
    coverage: usize,
}

impl Candidate {
    /// Ordering key: higher compression, then more coverage, then a tighter
    /// bounding box, then the lexicographically smaller pattern.
    fn better_than(&self, other: &Candidate) -> bool {
        use std::cmp::Ordering::*;
        let lhs = self.coverage as u128 * other.tec.encoded_size() as u128;
        let rhs = other.coverage as u128 * self.tec.encoded_size() as u128;
        match lhs.cmp(&rhs) {
            Greater => return true,
            Less => return false,
            Equal => {}
        }
        match self.coverage.cmp(&other.coverage) {
            Greater => return true,
            Less => return false,
            Equal => {}
        }
        match self
            .tec
            .bounding_box_area()
            .cmp(&other.tec.bounding_box_area())
        {
            Less => return true,
            Greater => return false,
            Equal => {}
        }
        self.tec.pattern < other.tec.pattern
    }
}

/// Greedy cover: repeatedly run SIATEC on the uncovered points, keep the
/// best TEC and remove what it covers. A lone leftover point becomes a
/// one-point TEC.
pub fn cosiatec(points: &PointSet) -> Vec<Tec> {
    let mut remaining = points.clone();
    let mut cover = Vec::new();
    while !remaining.is_empty() {
        let mut best: Option<Candidate> = None;
        for tec in siatec(&remaining) {
            let coverage = tec.covered().len();
            let cand = Candidate { tec, coverage };
            if best.as_ref().is_none_or(|b| cand.better_than(b)) {
                best = Some(cand);
            }
        }
        let tec = match best {
            Some(c) => c.tec,
            None => Tec {
                pattern: vec![remaining.points()[0]],
                translators: vec![Point::ZERO],
            },
        };
        let covered: HashSet<Point> = tec.covered().into_iter().collect();
        remaining = PointSet {
            points: remaining
                .points
                .into_iter()
                .filter(|p| !covered.contains(p))
                .collect(),
        };
        cover.push(tec);
    }
    cover
}

/// Encoded size of a COSIATEC cover.
pub fn encoded_size(cover: &[Tec]) -> usize {
    cover.iter().map(Tec::encoded_size).sum()
}

/// `|P|` divided by the encoded size of its COSIATEC cover. Returns `None`
/// for an empty set.
pub fn compression_ratio(points: &PointSet) -> Option<f64> {
    if points.is_empty() {
        return None;
    }
    let cover = cosiatec(points);
    Some(points.len() as f64 / encoded_size(&cover) as f64)
}

/// Count of each difference vector; used to check whether a set has any
/// repeated translation at all.
pub fn difference_histogram(points: &PointSet) -> HashMap<Point, usize> {
    let pts = points.points();
    let mut hist = HashMap::new();
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            *hist.entry(pts[j] - pts[i]).or_insert(0) += 1;
        }
    }
    hist
}
