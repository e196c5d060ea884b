//! Dense containers shared by every stage of the pipeline.
//!
//! Volumes are stored surface-major, then column-major, so each depth
//! column `(i, x)` is a contiguous slice. That is the access pattern of the
//! column softmax and of every dynamic programming sweep.

use crate::error::{Error, Result};

/// An `surfaces × width × depth` grid of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid3 {
    surfaces: usize,
    width: usize,
    depth: usize,
    data: Vec<f64>,
}

impl Grid3 {
    pub fn zeros(surfaces: usize, width: usize, depth: usize) -> Self {
        Self::filled(surfaces, width, depth, 0.0)
    }

    pub fn filled(surfaces: usize, width: usize, depth: usize, value: f64) -> Self {
        Grid3 {
            surfaces,
            width,
            depth,
            data: vec![value; surfaces * width * depth],
        }
    }

    pub fn from_vec(surfaces: usize, width: usize, depth: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != surfaces * width * depth {
            return Err(Error::Dimension(format!(
                "{} values cannot fill a {surfaces}x{width}x{depth} grid",
                data.len()
            )));
        }
        Ok(Grid3 {
            surfaces,
            width,
            depth,
            data,
        })
    }

    pub fn from_fn(
        surfaces: usize,
        width: usize,
        depth: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(surfaces * width * depth);
        for i in 0..surfaces {
            for x in 0..width {
                for z in 0..depth {
                    data.push(f(i, x, z));
                }
            }
        }
        Grid3 {
            surfaces,
            width,
            depth,
            data,
        }
    }

    /// Builds a grid from nested `[surface][column][row]` vectors.
    pub fn from_nested(nested: &[Vec<Vec<f64>>]) -> Result<Self> {
        let surfaces = nested.len();
        let width = nested.first().map_or(0, Vec::len);
        let depth = nested
            .first()
            .and_then(|s| s.first())
            .map_or(0, Vec::len);
        let mut data = Vec::with_capacity(surfaces * width * depth);
        for (i, surface) in nested.iter().enumerate() {
            if surface.len() != width {
                return Err(Error::Dimension(format!(
                    "surface {i} has {} columns, expected {width}",
                    surface.len()
                )));
            }
            for (x, column) in surface.iter().enumerate() {
                if column.len() != depth {
                    return Err(Error::Dimension(format!(
                        "column ({i}, {x}) has {} rows, expected {depth}",
                        column.len()
                    )));
                }
                data.extend_from_slice(column);
            }
        }
        Ok(Grid3 {
            surfaces,
            width,
            depth,
            data,
        })
    }

    pub fn surfaces(&self) -> usize {
        self.surfaces
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.surfaces, self.width, self.depth)
    }

    #[inline]
    fn offset(&self, i: usize, x: usize) -> usize {
        debug_assert!(i < self.surfaces && x < self.width);
        (i * self.width + x) * self.depth
    }

    #[inline]
    pub fn get(&self, i: usize, x: usize, z: usize) -> f64 {
        self.data[self.offset(i, x) + z]
    }

    #[inline]
    pub fn set(&mut self, i: usize, x: usize, z: usize, value: f64) {
        let o = self.offset(i, x);
        self.data[o + z] = value;
    }

    pub fn column(&self, i: usize, x: usize) -> &[f64] {
        let o = self.offset(i, x);
        &self.data[o..o + self.depth]
    }

    pub fn column_mut(&mut self, i: usize, x: usize) -> &mut [f64] {
        let o = self.offset(i, x);
        &mut self.data[o..o + self.depth]
    }

    /// All columns of surface `i`, as one `width × depth` slice.
    pub fn surface(&self, i: usize) -> &[f64] {
        let o = i * self.width * self.depth;
        &self.data[o..o + self.width * self.depth]
    }

    /// Copies surface `i` out into a single-surface grid.
    pub fn extract_surface(&self, i: usize) -> Grid3 {
        Grid3 {
            surfaces: 1,
            width: self.width,
            depth: self.depth,
            data: self.surface(i).to_vec(),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A `surfaces × width` grid of fractional row positions, one per column
/// of every surface. Used for solver output, soft-argmax estimates and
/// ground-truth tracings alike.
#[derive(Clone, Debug, PartialEq)]
pub struct Surfaces {
    surfaces: usize,
    width: usize,
    data: Vec<f64>,
}

/// Fractional surface positions produced by a solver.
pub type SurfaceSet = Surfaces;

impl Surfaces {
    pub fn zeros(surfaces: usize, width: usize) -> Self {
        Surfaces {
            surfaces,
            width,
            data: vec![0.0; surfaces * width],
        }
    }

    pub fn from_vec(surfaces: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != surfaces * width {
            return Err(Error::Dimension(format!(
                "{} positions cannot fill {surfaces} surfaces of width {width}",
                data.len()
            )));
        }
        Ok(Surfaces {
            surfaces,
            width,
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != width) {
            return Err(Error::Dimension(format!(
                "surface {i} has {} columns, expected {width}",
                r.len()
            )));
        }
        Ok(Surfaces {
            surfaces: rows.len(),
            width,
            data: rows.concat(),
        })
    }

    pub fn surfaces(&self) -> usize {
        self.surfaces
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, i: usize, x: usize) -> f64 {
        self.data[i * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, i: usize, x: usize, value: f64) {
        self.data[i * self.width + x] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.width.max(1)).take(self.surfaces)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn rounded(&self) -> Surfaces {
        Surfaces {
            surfaces: self.surfaces,
            width: self.width,
            data: self.data.iter().map(|v| v.round()).collect(),
        }
    }

    pub(crate) fn same_dims(&self, other: &Surfaces, what: &str) -> Result<()> {
        if (self.surfaces, self.width) != (other.surfaces, other.width) {
            return Err(Error::Dimension(format!(
                "{what}: {}x{} vs {}x{}",
                self.surfaces, self.width, other.surfaces, other.width
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_are_contiguous() {
        let g = Grid3::from_fn(2, 3, 4, |i, x, z| (i * 100 + x * 10 + z) as f64);
        assert_eq!(g.column(1, 2), &[120.0, 121.0, 122.0, 123.0]);
        assert_eq!(g.get(0, 1, 3), 13.0);
        assert_eq!(g.extract_surface(1).column(0, 0), g.column(1, 0));
    }

    #[test]
    fn nested_rejects_ragged_input() {
        let ragged = vec![vec![vec![0.0, 1.0], vec![0.0]]];
        assert!(matches!(Grid3::from_nested(&ragged), Err(Error::Dimension(_))));
        assert!(Surfaces::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }
}
