//! ESRI ASCII grid raster: parse, write, and cell addressing.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Single-band raster in row-major order (row 0 is the top of the map).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterGrid {
    pub rows: usize,
    pub cols: usize,
    /// Cell size in map units; square cells.
    pub cellsize: f64,
    /// Lower-left corner of the grid.
    pub xll: f64,
    pub yll: f64,
    /// Sentinel marking missing cells.
    pub nodata: f64,
    pub values: Vec<f64>,
}

impl RasterGrid {
    pub fn new(rows: usize, cols: usize, cellsize: f64, xll: f64, yll: f64) -> RasterGrid {
        RasterGrid {
            rows,
            cols,
            cellsize,
            xll,
            yll,
            nodata: -9999.0,
            values: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.values[row * self.cols + col] = v;
    }

    #[inline]
    pub fn is_nodata(&self, row: usize, col: usize) -> bool {
        self.at(row, col) == self.nodata
    }

    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }

    /// World coordinates -> (row, col). Cells are addressed by
    /// floor((x - xll) / cellsize); a point exactly on a cell corner goes
    /// to the higher index. Row 0 is the top row.
    pub fn cell_of(&self, x: f64, y: f64) -> Result<(usize, usize)> {
        let fx = (x - self.xll) / self.cellsize;
        let fy = (y - self.yll) / self.cellsize;
        if fx < 0.0 || fy < 0.0 || fx > self.cols as f64 || fy > self.rows as f64 {
            return Err(Error::OutOfBounds { x, y });
        }
        let col = (fx.floor() as usize).min(self.cols - 1);
        let row_from_bottom = (fy.floor() as usize).min(self.rows - 1);
        // Points on the far edge clamp into the last cell; interior corner
        // points already floor to the higher-index cell.
        let row = self.rows - 1 - row_from_bottom;
        Ok((row, col))
    }

    /// World coordinates of a cell's center.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let x = self.xll + (col as f64 + 0.5) * self.cellsize;
        let y = self.yll + ((self.rows - 1 - row) as f64 + 0.5) * self.cellsize;
        (x, y)
    }
}

/// Parses an ESRI ASCII grid: six header lines (ncols, nrows, xllcorner,
/// yllcorner, cellsize, NODATA_value — the last optional) followed by
/// row-major values.
pub fn load_ascii_grid(path: &Path) -> Result<RasterGrid> {
    let text = fs::read_to_string(path)?;
    parse_ascii_grid(&text)
}

pub fn parse_ascii_grid(text: &str) -> Result<RasterGrid> {
    let mut ncols: Option<usize> = None;
    let mut nrows: Option<usize> = None;
    let mut xll: Option<f64> = None;
    let mut yll: Option<f64> = None;
    let mut cellsize: Option<f64> = None;
    let mut nodata: f64 = -9999.0;
    let mut values: Vec<f64> = Vec::new();
    let mut in_header = true;

    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let mut toks = line.split_whitespace();
        let first = match toks.next() {
            Some(t) => t,
            None => continue,
        };
        if in_header && first.chars().next().is_some_and(|c| c.is_alphabetic()) {
            let key = first.to_ascii_lowercase();
            let val = toks.next().ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("header key '{first}' has no value"),
            })?;
            if toks.next().is_some() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("trailing tokens after header value on '{first}'"),
                });
            }
            let fval: f64 = val.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("unparseable number '{val}'"),
            })?;
            match key.as_str() {
                "ncols" => ncols = Some(fval as usize),
                "nrows" => nrows = Some(fval as usize),
                "xllcorner" => xll = Some(fval),
                "yllcorner" => yll = Some(fval),
                "cellsize" => cellsize = Some(fval),
                "nodata_value" => nodata = fval,
                other => {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("unknown header key '{other}'"),
                    })
                }
            }
        } else {
            in_header = false;
            for tok in std::iter::once(first).chain(toks) {
                let v: f64 = tok.parse().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("unparseable number '{tok}'"),
                })?;
                values.push(v);
            }
        }
    }

    let missing = |what: &str| Error::Parse {
        line: 1,
        msg: format!("missing header key '{what}'"),
    };
    let rows = nrows.ok_or_else(|| missing("nrows"))?;
    let cols = ncols.ok_or_else(|| missing("ncols"))?;
    let cellsize = cellsize.ok_or_else(|| missing("cellsize"))?;
    if cellsize <= 0.0 {
        return Err(Error::Parse {
            line: 1,
            msg: format!("cellsize must be positive, got {cellsize}"),
        });
    }
    if values.len() != rows * cols {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected {} values, got {}", rows * cols, values.len()),
        });
    }
    Ok(RasterGrid {
        rows,
        cols,
        cellsize,
        xll: xll.ok_or_else(|| missing("xllcorner"))?,
        yll: yll.ok_or_else(|| missing("yllcorner"))?,
        nodata,
        values,
    })
}

/// Writes the grid back out; numbers use the shortest representation that
/// re-parses to the same f64 bits.
pub fn write_ascii_grid(path: &Path, grid: &RasterGrid) -> Result<()> {
    fs::write(path, format_ascii_grid(grid))?;
    Ok(())
}

pub fn format_ascii_grid(grid: &RasterGrid) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "ncols {}", grid.cols);
    let _ = writeln!(out, "nrows {}", grid.rows);
    let _ = writeln!(out, "xllcorner {}", grid.xll);
    let _ = writeln!(out, "yllcorner {}", grid.yll);
    let _ = writeln!(out, "cellsize {}", grid.cellsize);
    let _ = writeln!(out, "NODATA_value {}", grid.nodata);
    for r in 0..grid.rows {
        let row = &grid.values[r * grid.cols..(r + 1) * grid.cols];
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}
