//! Shortest-edge collapse simplification.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::Vec3;

use super::SurfaceMesh;

#[derive(Clone, Debug)]
pub struct Decimation {
    pub mesh: SurfaceMesh,
    /// False when no further collapse could keep the surface manifold and
    /// unflipped before the target was reached.
    pub reached_target: bool,
    pub collapses: usize,
}

struct State {
    pos: Vec<Vec3>,
    tris: Vec<[usize; 3]>,
    tri_alive: Vec<bool>,
    vert_alive: Vec<bool>,
    incident: Vec<Vec<usize>>,
    version: Vec<u32>,
}

impl State {
    fn faces(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.incident[v].iter().copied().filter(|&t| self.tri_alive[t])
    }

    fn ring(&self, v: usize) -> Vec<usize> {
        let mut r: Vec<usize> = self.faces(v).flat_map(|t| self.tris[t]).filter(|&w| w != v).collect();
        r.sort_unstable();
        r.dedup();
        r
    }

    fn normal(&self, t: &[usize; 3], moved: &[usize], to: &Vec3) -> Vec3 {
        let p = |i: usize| if moved.contains(&i) { *to } else { self.pos[i] };
        let (a, b, c) = (p(t[0]), p(t[1]), p(t[2]));
        (b - a).cross(&(c - a))
    }

    /// Collapse `v` into `u` at the edge midpoint if it keeps the surface a
    /// manifold and flips no triangle.
    fn try_collapse(&mut self, u: usize, v: usize) -> bool {
        let shared: Vec<usize> = self.faces(u).filter(|&t| self.tris[t].contains(&v)).collect();
        if shared.len() != 2 {
            return false;
        }
        let (ru, rv) = (self.ring(u), self.ring(v));
        let common: Vec<usize> = ru.iter().copied().filter(|w| rv.contains(w)).collect();
        // Link condition, and every vertex keeps at least three neighbours.
        if common.len() != 2 || ru.len() + rv.len() < 7 || common.iter().any(|&w| self.ring(w).len() <= 3) {
            return false;
        }
        let mid = (self.pos[u] + self.pos[v]) / 2.0;
        for w in [u, v] {
            for t in self.faces(w) {
                if shared.contains(&t) {
                    continue;
                }
                let before = self.normal(&self.tris[t], &[], &mid);
                let after = self.normal(&self.tris[t], &[u, v], &mid);
                if after.norm_squared() <= 1e-12 * before.norm_squared() || before.dot(&after) <= 0.0 {
                    return false;
                }
            }
        }
        for &t in &shared {
            self.tri_alive[t] = false;
        }
        let moved: Vec<usize> = self.faces(v).collect();
        for t in moved {
            for slot in self.tris[t].iter_mut() {
                if *slot == v {
                    *slot = u;
                }
            }
            self.incident[u].push(t);
        }
        self.incident[v].clear();
        self.incident[u].retain(|&t| self.tri_alive[t]);
        self.vert_alive[v] = false;
        self.pos[u] = mid;
        self.version[u] += 1;
        self.version[v] += 1;
        true
    }
}

type Entry = Reverse<(u64, usize, usize, u32, u32)>;

fn push(heap: &mut BinaryHeap<Entry>, s: &State, a: usize, b: usize) {
    let (a, b) = (a.min(b), a.max(b));
    // Non-negative f64 bit patterns sort like the values.
    let len = (s.pos[a] - s.pos[b]).norm().to_bits();
    heap.push(Reverse((len, a, b, s.version[a], s.version[b])));
}

/// Collapse shortest edges first until `target_vertex_count` vertices remain.
pub fn decimate(m: &SurfaceMesh, target_vertex_count: usize) -> Result<Decimation> {
    if target_vertex_count < 4 {
        return Err(Error::InvalidArgument("decimation target must be at least 4 vertices".into()));
    }
    if target_vertex_count >= m.vertex_count() {
        return Ok(Decimation {
            mesh: m.clone(),
            reached_target: true,
            collapses: 0,
        });
    }
    let n = m.vertex_count();
    let mut incident = vec![Vec::new(); n];
    for (t, tri) in m.triangles.iter().enumerate() {
        for &v in tri {
            incident[v].push(t);
        }
    }
    let mut s = State {
        pos: m.vertices.clone(),
        tris: m.triangles.clone(),
        tri_alive: vec![true; m.triangles.len()],
        vert_alive: incident.iter().map(|l| !l.is_empty()).collect(),
        incident,
        version: vec![0; n],
    };
    let mut alive = s.vert_alive.iter().filter(|&&a| a).count();
    let mut heap = BinaryHeap::new();
    for (a, b) in m.edges() {
        push(&mut heap, &s, a, b);
    }
    let mut collapses = 0;
    while alive > target_vertex_count {
        let Some(Reverse((_, a, b, va, vb))) = heap.pop() else {
            break;
        };
        if !s.vert_alive[a] || !s.vert_alive[b] || s.version[a] != va || s.version[b] != vb {
            continue;
        }
        if s.try_collapse(a, b) {
            alive -= 1;
            collapses += 1;
            for w in s.ring(a) {
                push(&mut heap, &s, a, w);
            }
        }
    }
    let tris: Vec<[usize; 3]> = s.tris.iter().zip(&s.tri_alive).filter(|(_, &ok)| ok).map(|(t, _)| *t).collect();
    let mut out = SurfaceMesh {
        vertices: s.pos,
        triangles: tris,
        normals: Vec::new(),
        displacement: vec![0.0; n],
    }
    .compacted();
    out.recompute_normals();
    Ok(Decimation {
        reached_target: out.vertex_count() == target_vertex_count,
        mesh: out,
        collapses,
    })
}
