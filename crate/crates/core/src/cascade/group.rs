use std::cmp::Ordering;

use crate::imaging::Rect;

/// Two rects are similar when every edge lies within
/// `eps * (w1 + w2) / 2` of its counterpart.
pub fn rects_similar(a: &Rect, b: &Rect, eps: f64) -> bool {
    let delta = eps * 0.5 * (a.w as f64 + b.w as f64);
    let close = |p: u64, q: u64| (p as f64 - q as f64).abs() <= delta;
    close(a.x as u64, b.x as u64)
        && close(a.y as u64, b.y as u64)
        && close(a.right(), b.right())
        && close(a.bottom(), b.bottom())
}

/// Descending area, then top-to-bottom, left-to-right.
pub(crate) fn detection_order(a: &Rect, b: &Rect) -> Ordering {
    b.area()
        .cmp(&a.area())
        .then((a.y, a.x, a.w, a.h).cmp(&(b.y, b.x, b.w, b.h)))
}

/// Clusters rects into connected components of the similarity relation and
/// returns the rounded mean rect of each component with at least
/// `max(1, min_neighbors)` members.
pub fn group_rectangles(rects: &[Rect], min_neighbors: u32, eps: f64) -> Vec<Rect> {
    let mut out: Vec<Rect> = group_with_counts(rects, min_neighbors, eps)
        .into_iter()
        .map(|(r, _)| r)
        .collect();
    out.sort_by(detection_order);
    out
}

pub(crate) fn group_with_counts(rects: &[Rect], min_neighbors: u32, eps: f64) -> Vec<(Rect, u32)> {
    let mut sets = DisjointSets::new(rects.len());
    for i in 0..rects.len() {
        for j in i + 1..rects.len() {
            if rects_similar(&rects[i], &rects[j], eps) {
                sets.union(i, j);
            }
        }
    }

    // Accumulate per root in first-seen order.
    let mut slot = vec![usize::MAX; rects.len()];
    let mut acc: Vec<([u64; 4], u32)> = Vec::new();
    for (i, r) in rects.iter().enumerate() {
        let root = sets.find(i);
        if slot[root] == usize::MAX {
            slot[root] = acc.len();
            acc.push(([0; 4], 0));
        }
        let (sum, count) = &mut acc[slot[root]];
        sum[0] += r.x as u64;
        sum[1] += r.y as u64;
        sum[2] += r.w as u64;
        sum[3] += r.h as u64;
        *count += 1;
    }

    let min_count = min_neighbors.max(1);
    acc.into_iter()
        .filter(|(_, count)| *count >= min_count)
        .map(|(sum, count)| {
            let mean = |s: u64| (s as f64 / count as f64).round() as u32;
            (
                Rect::new(mean(sum[0]), mean(sum[1]), mean(sum[2]), mean(sum[3])),
                count,
            )
        })
        .collect()
}

struct DisjointSets {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        DisjointSets {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            Ordering::Less => self.parent[ra] = rb,
            Ordering::Greater => self.parent[rb] = ra,
            Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}
