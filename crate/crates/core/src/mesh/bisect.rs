//! Newest-vertex bisection with conformity closure.

use std::collections::HashMap;

use super::base::{edge_key, BaseMesh};

impl BaseMesh {
    /// Bisects every marked element and as many neighbours as conformity
    /// requires. Vertex ids of the input are preserved; new vertices are
    /// appended in a deterministic order.
    pub fn bisect(&self, marked: &[usize]) -> BaseMesh {
        if marked.is_empty() {
            return self.clone();
        }
        match self.dim() {
            1 => self.bisect_1d(marked),
            _ => self.bisect_2d(marked),
        }
    }

    /// `times` rounds of bisection of every element.
    pub fn refine_uniform(&self, times: usize) -> BaseMesh {
        let mut m = self.clone();
        for _ in 0..times {
            let all: Vec<usize> = (0..m.num_elements()).collect();
            m = m.bisect(&all);
        }
        m
    }

    fn bisect_1d(&self, marked: &[usize]) -> BaseMesh {
        let mut flag = vec![false; self.num_elements()];
        for &k in marked {
            flag[k] = true;
        }
        let mut coords = self.coords().to_vec();
        let mut parents = self.parents().to_vec();
        let mut cells = Vec::with_capacity(self.num_elements() + marked.len());
        for (k, c) in self.cells().iter().enumerate() {
            if flag[k] {
                let (a, b) = (c[0], c[1]);
                let m = coords.len();
                coords.push([0.5 * (coords[a][0] + coords[b][0]), 0.0]);
                parents.push(Some((a, b)));
                cells.push([a, m, usize::MAX]);
                cells.push([m, b, usize::MAX]);
            } else {
                cells.push(*c);
            }
        }
        BaseMesh::assemble(1, coords, cells, parents).expect("bisection preserves validity")
    }

    fn bisect_2d(&self, marked: &[usize]) -> BaseMesh {
        let cells = self.cells();
        // edge -> adjacent elements
        let mut adjacency: HashMap<(usize, usize), [usize; 2]> = HashMap::new();
        for (k, c) in cells.iter().enumerate() {
            for i in 0..3 {
                let e = edge_key(c[(i + 1) % 3], c[(i + 2) % 3]);
                adjacency
                    .entry(e)
                    .and_modify(|s| s[1] = k)
                    .or_insert([k, usize::MAX]);
            }
        }
        let ref_edge = |k: usize| edge_key(cells[k][1], cells[k][2]);

        // closure: every marked edge forces the refinement edge of each
        // element containing it to be marked as well
        let mut is_marked: HashMap<(usize, usize), bool> = HashMap::new();
        let mut stack: Vec<(usize, usize)> = Vec::new();
        for &k in marked {
            let e = ref_edge(k);
            if is_marked.insert(e, true).is_none() {
                stack.push(e);
            }
        }
        while let Some(e) = stack.pop() {
            for &k in adjacency[&e].iter().filter(|&&k| k != usize::MAX) {
                let r = ref_edge(k);
                if let std::collections::hash_map::Entry::Vacant(slot) = is_marked.entry(r) {
                    slot.insert(true);
                    stack.push(r);
                }
            }
        }

        // midpoints, numbered in element order for determinism
        let mut coords = self.coords().to_vec();
        let mut parents = self.parents().to_vec();
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        for c in cells {
            for i in [0, 1, 2] {
                let e = edge_key(c[(i + 1) % 3], c[(i + 2) % 3]);
                if is_marked.contains_key(&e) && !mid.contains_key(&e) {
                    let (a, b) = e;
                    let id = coords.len();
                    coords.push([
                        0.5 * (coords[a][0] + coords[b][0]),
                        0.5 * (coords[a][1] + coords[b][1]),
                    ]);
                    parents.push(Some((a, b)));
                    mid.insert(e, id);
                }
            }
        }

        let mut out = Vec::with_capacity(cells.len() + 2 * mid.len());
        for c in cells {
            split(*c, &mid, &mut out);
        }
        BaseMesh::assemble(2, coords, out, parents).expect("bisection preserves validity")
    }
}

/// Recursively bisects `[a, b, c]` (refinement edge `b-c`) while its
/// refinement edge carries a midpoint.
fn split(c: [usize; 3], mid: &HashMap<(usize, usize), usize>, out: &mut Vec<[usize; 3]>) {
    let [a, b, d] = c;
    match mid.get(&edge_key(b, d)) {
        Some(&m) => {
            split([m, a, b], mid, out);
            split([m, d, a], mid, out);
        }
        None => out.push(c),
    }
}
