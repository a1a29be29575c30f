use std::fs;
use std::path::Path;

use super::{EvalError, Interpolation, Result};
use crate::data::FactorSpec;
use crate::disentangle::{swap_blocks, ProseModel};
use crate::linalg::Matrix;

/// Gray level of the 1-pixel lines between grid cells.
pub const GRID_SEPARATOR: f64 = 0.5;

/// Row-major, channel-interleaved image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    /// Binary PPM (`P6`, 3 channels) or PGM (`P5`, 1 channel).
    pub fn to_pnm(&self) -> Result<Vec<u8>> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            c => return Err(EvalError::Shape(format!("cannot write {c}-channel image"))),
        };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pnm()?).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Channel with the largest summed intensity; ties go to the lowest index.
pub fn dominant_channel(pixels: &[f64], channels: usize) -> usize {
    let mut sums = vec![0.0; channels];
    for px in pixels.chunks_exact(channels) {
        sums.iter_mut().zip(px).for_each(|(s, v)| *s += v);
    }
    (0..channels).fold(0, |b, c| if sums[c] > sums[b] { c } else { b })
}

/// Table of equally sized image cells; empty cells render as background.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub rows: usize,
    pub cols: usize,
    pub cell_height: usize,
    pub cell_width: usize,
    pub channels: usize,
    cells: Vec<Option<Vec<f64>>>,
}

impl ImageGrid {
    fn new(rows: usize, cols: usize, spec: &FactorSpec) -> Self {
        Self {
            rows,
            cols,
            cell_height: spec.height,
            cell_width: spec.width,
            channels: spec.channels,
            cells: vec![None; rows * cols],
        }
    }

    pub fn cell(&self, r: usize, c: usize) -> Option<&[f64]> {
        self.cells[r * self.cols + c].as_deref()
    }

    fn put(&mut self, r: usize, c: usize, pixels: &[f64]) {
        self.cells[r * self.cols + c] = Some(pixels.to_vec());
    }

    /// One composite image with separator lines between cells.
    pub fn compose(&self) -> Image {
        let (h, w, ch) = (self.cell_height, self.cell_width, self.channels);
        let width = self.cols * (w + 1) - 1;
        let height = self.rows * (h + 1) - 1;
        let mut img = Image::filled(width, height, ch, GRID_SEPARATOR);
        for r in 0..self.rows {
            for c in 0..self.cols {
                for y in 0..h {
                    for x in 0..w {
                        let dst = ((r * (h + 1) + y) * width + c * (w + 1) + x) * ch;
                        for k in 0..ch {
                            img.data[dst + k] = self.cell(r, c).map_or(0.0, |p| p[(y * w + x) * ch + k]);
                        }
                    }
                }
            }
        }
        img
    }
}

fn check_width(model: &ProseModel, spec: &FactorSpec, x: &Matrix) -> Result<()> {
    if spec.pixels() != model.input_dim || x.cols() != model.input_dim {
        return Err(EvalError::Shape(format!(
            "images of width {} / spec {} for a model of input {}",
            x.cols(),
            spec.pixels(),
            model.input_dim
        )));
    }
    Ok(())
}

/// Source images along the top row and left column; cell `(r + 1, c + 1)`
/// decodes the codes of `rows[r]` with block `block` taken from `cols[c]`.
pub fn attribute_transfer_grid(
    model: &ProseModel,
    spec: &FactorSpec,
    rows: &Matrix,
    cols: &Matrix,
    block: usize,
) -> Result<ImageGrid> {
    check_width(model, spec, rows)?;
    check_width(model, spec, cols)?;
    if block >= model.config.k {
        return Err(EvalError::Shape(format!("block {block} >= k = {}", model.config.k)));
    }
    let zr = model.encode(rows)?;
    let zc = model.encode(cols)?;
    let mut grid = ImageGrid::new(rows.rows() + 1, cols.rows() + 1, spec);
    for c in 0..cols.rows() {
        grid.put(0, c + 1, cols.row(c));
    }
    for (r, z_row) in zr.iter().enumerate() {
        grid.put(r + 1, 0, rows.row(r));
        let swapped = zc
            .iter()
            .map(|z_col| swap_blocks(z_col, z_row, block))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let out = model.decode(&swapped)?;
        for c in 0..cols.rows() {
            grid.put(r + 1, c + 1, out.row(c));
        }
    }
    Ok(grid)
}

/// `[a, steps interpolated decodes, b]`: block `block` of the codes moves
/// from `a`'s to `b`'s while the other blocks stay at `a`'s.
pub fn interpolation_strip(
    model: &ProseModel,
    spec: &FactorSpec,
    a: &[f64],
    b: &[f64],
    block: usize,
    steps: usize,
    mode: Interpolation,
) -> Result<ImageGrid> {
    let x = Matrix::from_vec(2, a.len(), [a, b].concat())
        .map_err(|_| EvalError::Shape("source images differ in size".into()))?;
    check_width(model, spec, &x)?;
    let (d, k) = (model.config.d, model.config.k);
    if block >= k || steps < 2 {
        return Err(EvalError::Shape(format!("block {block} of {k} with {steps} steps")));
    }
    let codes = model.codes(&x)?;
    let (za, zb) = (codes.row(0), codes.row(1));
    let span = block * d..(block + 1) * d;
    let mut z = Matrix::zeros(steps, d * k);
    for s in 0..steps {
        let t = s as f64 / (steps - 1) as f64;
        let mid = mode.apply(&za[span.clone()], &zb[span.clone()], t)?;
        let row = z.row_mut(s);
        row.copy_from_slice(za);
        row[span.clone()].copy_from_slice(&mid);
    }
    let frames = model.decode_flat(&z)?;
    let mut grid = ImageGrid::new(1, steps + 2, spec);
    grid.put(0, 0, a);
    for s in 0..steps {
        grid.put(0, s + 1, frames.row(s));
    }
    grid.put(0, steps + 1, b);
    Ok(grid)
}
