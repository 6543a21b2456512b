use super::base::BaseMesh;
use super::partition::YPartition;

/// Elements of the base mesh sharing vertex `center`.
#[derive(Debug, Clone, PartialEq)]
pub struct Star {
    pub center: usize,
    pub elements: Vec<usize>,
    /// Smallest diameter over the star.
    pub h: f64,
}

impl Star {
    pub fn new(base: &BaseMesh, center: usize) -> Self {
        let elements = base.vertex_elements(center).to_vec();
        let h = elements
            .iter()
            .map(|&k| base.diameter(k))
            .fold(f64::INFINITY, f64::min);
        Self { center, elements, h }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
}

/// Tensor product of a base mesh and a y-partition. Cell `(k, i)` is
/// `K_k x I_i` with id `k * M + i`; tensor node `(v, l)` has id `v * (M+1) + l`.
#[derive(Debug, Clone)]
pub struct CylinderMesh {
    pub base: BaseMesh,
    pub ypart: YPartition,
}

/// Outcome of checking `h_Y <= C_T h_z'` over interior base vertices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshConditionReport {
    pub satisfied: bool,
    pub worst_node: Option<usize>,
    /// Largest `h_Y / h_z'`; zero when there are no interior vertices.
    pub worst_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AspectStats {
    /// Mean of `h_K / (y_1 - y_0)` over base elements.
    pub bottom_layer_mean: f64,
    /// Largest `h_K / h_I` over all cells.
    pub max: f64,
}

impl CylinderMesh {
    pub fn new(base: BaseMesh, ypart: YPartition) -> Self {
        Self { base, ypart }
    }

    pub fn m(&self) -> usize {
        self.ypart.num_intervals()
    }

    pub fn num_cells(&self) -> usize {
        self.base.num_elements() * self.m()
    }

    pub fn num_nodes(&self) -> usize {
        self.base.num_vertices() * (self.m() + 1)
    }

    pub fn cell(&self, id: usize) -> (usize, usize) {
        (id / self.m(), id % self.m())
    }

    pub fn cell_id(&self, element: usize, interval: usize) -> usize {
        element * self.m() + interval
    }

    pub fn node_id(&self, vertex: usize, level: usize) -> usize {
        vertex * (self.m() + 1) + level
    }

    pub fn node(&self, id: usize) -> (usize, usize) {
        (id / (self.m() + 1), id % (self.m() + 1))
    }

    /// Dirichlet nodes: lateral boundary and top layer.
    pub fn is_dirichlet(&self, id: usize) -> bool {
        let (v, l) = self.node(id);
        self.base.is_boundary(v) || l == self.m()
    }

    /// Cells of the cylindrical star over `star`.
    pub fn star_cells(&self, star: &Star) -> Vec<usize> {
        let mut cells: Vec<usize> = star
            .elements
            .iter()
            .flat_map(|&k| (0..self.m()).map(move |i| (k, i)))
            .map(|(k, i)| self.cell_id(k, i))
            .collect();
        cells.sort_unstable();
        cells
    }

    pub fn check_mesh_condition(&self, c_t: f64) -> MeshConditionReport {
        let h_y = self.ypart.top_length();
        let mut worst_node = None;
        let mut worst_ratio = 0.0;
        for v in self.base.interior_vertices() {
            let ratio = h_y / Star::new(&self.base, v).h;
            if ratio > worst_ratio {
                worst_ratio = ratio;
                worst_node = Some(v);
            }
        }
        MeshConditionReport { satisfied: worst_ratio <= c_t, worst_node, worst_ratio }
    }

    pub fn aspect_ratio_stats(&self) -> AspectStats {
        let ne = self.base.num_elements();
        let h0 = self.ypart.length(0);
        let bottom_layer_mean =
            (0..ne).map(|k| self.base.diameter(k) / h0).sum::<f64>() / ne as f64;
        let max = self.base.max_diameter() / self.ypart.min_length();
        AspectStats { bottom_layer_mean, max }
    }

    /// Weak shape-regularity constant of the y-direction.
    pub fn sigma_y(&self) -> f64 {
        self.ypart.sigma()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Domain;
    use std::collections::HashSet;

    fn criss_cross() -> BaseMesh {
        BaseMesh::from_raw(
            2,
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.5, 0.5]],
            vec![vec![0, 1, 4], vec![1, 2, 4], vec![2, 3, 4], vec![3, 0, 4]],
            None,
        )
        .unwrap()
    }

    #[test]
    fn extrude_counts() {
        let line = BaseMesh::build(Domain::UnitInterval, 0.5).unwrap();
        let c = CylinderMesh::new(line, YPartition::graded(3, 1.0, 1.0).unwrap());
        assert_eq!(c.num_cells(), 6);
        let sq = BaseMesh::build(Domain::UnitSquare, 1.0).unwrap();
        let c = CylinderMesh::new(sq, YPartition::graded(8, 1.0, 2.0).unwrap());
        assert_eq!(c.num_cells(), 16);
        // a 49-element base mesh (7 x 7 intervals) with M = 8
        let line = BaseMesh::build(Domain::UnitInterval, 1.0 / 49.0).unwrap();
        assert_eq!(line.num_elements(), 49);
        let c = CylinderMesh::new(line, YPartition::graded(8, 1.0, 2.0).unwrap());
        assert_eq!(c.num_cells(), 392);
    }

    #[test]
    fn node_indexing_bijective() {
        let sq = BaseMesh::build(Domain::LShape, 0.5).unwrap();
        let c = CylinderMesh::new(sq, YPartition::graded(5, 2.0, 3.0).unwrap());
        let mut seen = HashSet::new();
        for v in 0..c.base.num_vertices() {
            for l in 0..=c.m() {
                let id = c.node_id(v, l);
                assert_eq!(c.node(id), (v, l));
                assert!(seen.insert(id));
            }
        }
        assert_eq!(seen.len(), c.num_nodes());
        assert!(seen.iter().all(|&i| i < c.num_nodes()));
    }

    #[test]
    fn star_examples() {
        let line = BaseMesh::build(Domain::UnitInterval, 0.25).unwrap();
        let s = Star::new(&line, 2);
        assert_eq!(s.len(), 2);
        assert!((s.h - 0.25).abs() < 1e-15);

        let sq = BaseMesh::build(Domain::UnitSquare, 1.0).unwrap();
        let corners: Vec<usize> = (0..4).map(|v| Star::new(&sq, v).len()).collect();
        assert!(corners.contains(&1));

        let cc = criss_cross();
        let s = Star::new(&cc, 4);
        assert_eq!(s.elements, vec![0, 1, 2, 3]);
        for &k in &s.elements {
            assert!(cc.element(k).contains(&4));
            assert!(s.h <= cc.diameter(k));
        }
    }

    #[test]
    fn star_cells_are_prisms_over_star() {
        let base = BaseMesh::build(Domain::LShape, 0.5).unwrap().bisect(&[0, 5]);
        let c = CylinderMesh::new(base, YPartition::graded(4, 1.5, 2.0).unwrap());
        for v in 0..c.base.num_vertices() {
            let star = Star::new(&c.base, v);
            let got: HashSet<usize> = c.star_cells(&star).into_iter().collect();
            let expect: HashSet<usize> = (0..c.num_cells())
                .filter(|&id| c.base.element(c.cell(id).0).contains(&v))
                .collect();
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn mesh_condition_examples() {
        let line = BaseMesh::build(Domain::UnitInterval, 0.25).unwrap();
        let ok = CylinderMesh::new(line.clone(), YPartition::from_nodes(vec![0.0, 0.8, 1.0]).unwrap());
        assert!(ok.check_mesh_condition(1.0).satisfied);
        let bad = CylinderMesh::new(line, YPartition::from_nodes(vec![0.0, 0.5, 1.0]).unwrap());
        let r = bad.check_mesh_condition(1.0);
        assert!(!r.satisfied);
        assert!((r.worst_ratio - 2.0).abs() < 1e-14);
        for v in bad.base.interior_vertices() {
            assert!(bad.ypart.top_length() > Star::new(&bad.base, v).h);
        }
    }

    #[test]
    fn aspect_examples() {
        let sq = BaseMesh::build(Domain::UnitInterval, 0.5).unwrap();
        let c = CylinderMesh::new(sq.clone(), YPartition::graded(2, 1.0, 1.0).unwrap());
        assert!((c.aspect_ratio_stats().bottom_layer_mean - 1.0).abs() < 1e-15);
        let c = CylinderMesh::new(sq, YPartition::from_nodes(vec![0.0, 0.001, 1.0]).unwrap());
        let a = c.aspect_ratio_stats();
        assert!((a.bottom_layer_mean - 500.0).abs() < 1e-9);
        assert!((a.max - 500.0).abs() < 1e-9);
        assert!(c.sigma_y() > 900.0);
    }
}
