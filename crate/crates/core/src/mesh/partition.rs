use crate::error::{invalid, Result};

/// Partition `0 = y_0 < ... < y_M = Y` of the extended direction.
#[derive(Debug, Clone, PartialEq)]
pub struct YPartition {
    gamma: f64,
    nodes: Vec<f64>,
}

impl YPartition {
    /// `y_k = (k / M)^gamma * Y`.
    pub fn graded(m: usize, y: f64, gamma: f64) -> Result<Self> {
        if m == 0 {
            return Err(invalid("the partition needs at least one interval"));
        }
        if !(y > 0.0) || !y.is_finite() {
            return Err(invalid(format!("truncation height {y} must be positive")));
        }
        if !(gamma >= 1.0) || !gamma.is_finite() {
            return Err(invalid(format!("grading exponent {gamma} must be at least 1")));
        }
        let mut nodes: Vec<f64> =
            (0..=m).map(|k| (k as f64 / m as f64).powf(gamma) * y).collect();
        nodes[m] = y;
        Ok(Self { gamma, nodes })
    }

    /// Arbitrary strictly increasing nodes starting at 0.
    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 || nodes[0] != 0.0 {
            return Err(invalid("nodes must start at 0 and contain an interval"));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) || !nodes[nodes.len() - 1].is_finite() {
            return Err(invalid("nodes must be strictly increasing and finite"));
        }
        Ok(Self { gamma: f64::NAN, nodes })
    }

    pub fn num_intervals(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn height(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    /// Grading exponent, NaN for partitions built from explicit nodes.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn interval(&self, i: usize) -> (f64, f64) {
        (self.nodes[i], self.nodes[i + 1])
    }

    pub fn length(&self, i: usize) -> f64 {
        self.nodes[i + 1] - self.nodes[i]
    }

    /// Length of the top interval, `h_Y`.
    pub fn top_length(&self) -> f64 {
        self.length(self.num_intervals() - 1)
    }

    pub fn max_length(&self) -> f64 {
        (0..self.num_intervals()).map(|i| self.length(i)).fold(0.0, f64::max)
    }

    pub fn min_length(&self) -> f64 {
        (0..self.num_intervals()).map(|i| self.length(i)).fold(f64::INFINITY, f64::min)
    }

    /// Largest ratio of adjacent interval lengths.
    pub fn sigma(&self) -> f64 {
        (1..self.num_intervals())
            .map(|i| {
                let (a, b) = (self.length(i - 1), self.length(i));
                (a / b).max(b / a)
            })
            .fold(1.0, f64::max)
    }
}
