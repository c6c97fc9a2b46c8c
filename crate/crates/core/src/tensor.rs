//! Dense cubic and quartic arrays over a small index range.

use std::ops::{Index, IndexMut};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    dim: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, data: vec![0.0; dim * dim * dim] }
    }

    pub fn from_fn(dim: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                for k in 0..dim {
                    t[[i, j, k]] = f(i, j, k);
                }
            }
        }
        t
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Average over all permutations of the three indices.
    pub fn symmetrized(&self) -> Self {
        Self::from_fn(self.dim, |i, j, k| {
            (self[[i, j, k]] + self[[i, k, j]] + self[[j, i, k]] + self[[j, k, i]] + self[[k, i, j]] + self[[k, j, i]])
                / 6.0
        })
    }

    /// Average over swaps of the last two indices.
    pub fn symmetrized_tail(&self) -> Self {
        Self::from_fn(self.dim, |i, j, k| 0.5 * (self[[i, j, k]] + self[[i, k, j]]))
    }

    /// Average over swaps of the first two indices.
    pub fn symmetrized_head(&self) -> Self {
        Self::from_fn(self.dim, |i, j, k| 0.5 * (self[[i, j, k]] + self[[j, i, k]]))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        max_abs_diff(&self.data, &other.data)
    }
}

impl Index<[usize; 3]> for Tensor3 {
    type Output = f64;
    fn index(&self, [i, j, k]: [usize; 3]) -> &f64 {
        &self.data[(i * self.dim + j) * self.dim + k]
    }
}

impl IndexMut<[usize; 3]> for Tensor3 {
    fn index_mut(&mut self, [i, j, k]: [usize; 3]) -> &mut f64 {
        &mut self.data[(i * self.dim + j) * self.dim + k]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    dim: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, data: vec![0.0; dim.pow(4)] }
    }

    pub fn from_fn(dim: usize, f: impl Fn(usize, usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                for k in 0..dim {
                    for l in 0..dim {
                        t[[i, j, k, l]] = f(i, j, k, l);
                    }
                }
            }
        }
        t
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Average over all 24 index permutations.
    pub fn symmetrized(&self) -> Self {
        const PERMS: [[usize; 4]; 24] = [
            [0, 1, 2, 3], [0, 1, 3, 2], [0, 2, 1, 3], [0, 2, 3, 1], [0, 3, 1, 2], [0, 3, 2, 1],
            [1, 0, 2, 3], [1, 0, 3, 2], [1, 2, 0, 3], [1, 2, 3, 0], [1, 3, 0, 2], [1, 3, 2, 0],
            [2, 0, 1, 3], [2, 0, 3, 1], [2, 1, 0, 3], [2, 1, 3, 0], [2, 3, 0, 1], [2, 3, 1, 0],
            [3, 0, 1, 2], [3, 0, 2, 1], [3, 1, 0, 2], [3, 1, 2, 0], [3, 2, 0, 1], [3, 2, 1, 0],
        ];
        Self::from_fn(self.dim, |i, j, k, l| {
            let idx = [i, j, k, l];
            PERMS
                .iter()
                .map(|p| self[[idx[p[0]], idx[p[1]], idx[p[2]], idx[p[3]]]])
                .sum::<f64>()
                / 24.0
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        max_abs_diff(&self.data, &other.data)
    }
}

impl Index<[usize; 4]> for Tensor4 {
    type Output = f64;
    fn index(&self, [i, j, k, l]: [usize; 4]) -> &f64 {
        &self.data[((i * self.dim + j) * self.dim + k) * self.dim + l]
    }
}

impl IndexMut<[usize; 4]> for Tensor4 {
    fn index_mut(&mut self, [i, j, k, l]: [usize; 4]) -> &mut f64 {
        &mut self.data[((i * self.dim + j) * self.dim + k) * self.dim + l]
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
