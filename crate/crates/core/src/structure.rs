use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Per-residue 3D coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Structure {
    coords: Vec<Vec3>,
}

impl Structure {
    pub fn new(coords: Vec<Vec3>) -> Self {
        Structure { coords }
    }

    pub fn zeros(n: usize) -> Self {
        Structure {
            coords: vec![[0.0; 3]; n],
        }
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        assert_eq!(flat.len() % 3, 0);
        Structure {
            coords: flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Vec3] {
        &self.coords
    }

    pub fn coords_mut(&mut self) -> &mut [Vec3] {
        &mut self.coords
    }

    pub fn flat(&self) -> Vec<f64> {
        self.coords.iter().flatten().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().flatten().all(|v| v.is_finite())
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.coords.len().max(1) as f64;
        let s = self.coords.iter().fold([0.0; 3], |acc, &c| add(acc, c));
        scale(s, 1.0 / n)
    }

    pub fn translated(&self, shift: Vec3) -> Structure {
        Structure {
            coords: self.coords.iter().map(|&c| add(c, shift)).collect(),
        }
    }

    pub fn centered(&self) -> Structure {
        self.translated(scale(self.centroid(), -1.0))
    }

    pub fn check_len(&self, expected: usize) -> Result<()> {
        if self.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: self.len(),
            });
        }
        Ok(())
    }

    /// `self + s * other`, elementwise.
    pub fn axpy(&self, s: f64, other: &Structure) -> Structure {
        assert_eq!(self.len(), other.len());
        Structure {
            coords: self
                .coords
                .iter()
                .zip(&other.coords)
                .map(|(&a, &b)| add(a, scale(b, s)))
                .collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> Structure {
        Structure::new(self.coords.iter().map(|&c| scale(c, s)).collect())
    }

    pub fn max_abs_diff(&self, other: &Structure) -> f64 {
        assert_eq!(self.len(), other.len());
        self.coords
            .iter()
            .flatten()
            .zip(other.coords.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        norm(sub(self.coords[i], self.coords[j]))
    }
}

impl std::ops::Index<usize> for Structure {
    type Output = Vec3;

    fn index(&self, i: usize) -> &Vec3 {
        &self.coords[i]
    }
}

impl std::ops::IndexMut<usize> for Structure {
    fn index_mut(&mut self, i: usize) -> &mut Vec3 {
        &mut self.coords[i]
    }
}
