//! Block-Hankel data matrices and the past/future split used by DeePC.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{numerical_rank, vstack};

/// `H_M(w)`: `q*M` rows, `N - M + 1` columns, block `(i, j)` holds `w_{i+j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockHankel {
    pub data: DMatrix<f64>,
    pub q: usize,
    pub block_rows: usize,
}

pub fn build_block_hankel(w: &[DVector<f64>], block_rows: usize) -> Result<BlockHankel> {
    if block_rows == 0 {
        return Err(Error::InvalidArgument("block-row count must be at least 1".into()));
    }
    if block_rows > w.len() {
        return Err(Error::InvalidArgument(format!(
            "block-row count {block_rows} exceeds sequence length {}",
            w.len()
        )));
    }
    let q = w[0].len();
    if w.iter().any(|s| s.len() != q) {
        return Err(Error::dim("Hankel samples", q, "ragged"));
    }
    let cols = w.len() - block_rows + 1;
    let data = DMatrix::from_fn(q * block_rows, cols, |r, c| w[r / q + c][r % q]);
    Ok(BlockHankel {
        data,
        q,
        block_rows,
    })
}

/// Full row rank `q*M` with singular values above `rank_tol * sigma_max`.
pub fn is_persistently_exciting(h: &BlockHankel, rank_tol: f64) -> bool {
    let rows = h.q * h.block_rows;
    rows <= h.data.ncols() && numerical_rank(&h.data, rank_tol) == rows
}

/// Largest order `M` for which `w` is persistently exciting (0 if none).
pub fn pe_order(w: &[DVector<f64>], rank_tol: f64) -> usize {
    let mut order = 0;
    for m in 1..=w.len() {
        match build_block_hankel(w, m) {
            Ok(h) if is_persistently_exciting(&h, rank_tol) => order = m,
            _ => break,
        }
    }
    order
}

/// The four data blocks sharing the column count `L = T - Np - Nf + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataBlocks {
    pub up: DMatrix<f64>,
    pub uf: DMatrix<f64>,
    pub yp: DMatrix<f64>,
    pub yf: DMatrix<f64>,
    pub m: usize,
    pub p: usize,
    pub np: usize,
    pub nf: usize,
}

impl DataBlocks {
    pub fn cols(&self) -> usize {
        self.up.ncols()
    }

    /// `col(Up, Uf, Yp, Yf)`.
    pub fn stacked(&self) -> DMatrix<f64> {
        vstack(&[&self.up, &self.uf, &self.yp, &self.yf])
    }

    fn same_shape(&self, other: &DataBlocks) -> bool {
        (self.m, self.p, self.np, self.nf, self.cols())
            == (other.m, other.p, other.np, other.nf, other.cols())
    }

    /// Text container: a `m,p,np,nf,l` header line, its values, then the rows
    /// of `Up`, `Uf`, `Yp`, `Yf` in that order as comma-separated floats.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "m,p,np,nf,l")?;
        writeln!(out, "{},{},{},{},{}", self.m, self.p, self.np, self.nf, self.cols())?;
        for block in [&self.up, &self.uf, &self.yp, &self.yf] {
            for row in block.row_iter() {
                let fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(out, "{}", fields.join(","))?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let mut next = |what: &str| -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Parse(format!("data blocks: missing {what}")))?
                .map_err(Error::from)
        };
        let header = next("header")?;
        if header.trim() != "m,p,np,nf,l" {
            return Err(Error::Parse(format!("data blocks: bad header `{header}`")));
        }
        let dims = next("dimensions")?
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("data blocks: {e}")))?;
        let [m, p, np, nf, l] = dims[..] else {
            return Err(Error::Parse("data blocks: expected 5 dimensions".into()));
        };
        let mut read_block = |rows: usize| -> Result<DMatrix<f64>> {
            let mut data = Vec::with_capacity(rows * l);
            for _ in 0..rows {
                let line = next("matrix row")?;
                let vals = line
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Parse(format!("data blocks: {e}")))?;
                if vals.len() != l {
                    return Err(Error::Parse(format!(
                        "data blocks: expected {l} columns, got {}",
                        vals.len()
                    )));
                }
                data.extend(vals);
            }
            Ok(DMatrix::from_row_slice(rows, l, &data))
        };
        let up = read_block(m * np)?;
        let uf = read_block(m * nf)?;
        let yp = read_block(p * np)?;
        let yf = read_block(p * nf)?;
        Ok(DataBlocks {
            up,
            uf,
            yp,
            yf,
            m,
            p,
            np,
            nf,
        })
    }
}

pub fn split_past_future(
    u: &[DVector<f64>],
    y: &[DVector<f64>],
    np: usize,
    nf: usize,
) -> Result<DataBlocks> {
    if np == 0 || nf == 0 {
        return Err(Error::InvalidArgument("horizons must be positive".into()));
    }
    if u.len() != y.len() {
        return Err(Error::dim("trajectory length", u.len(), y.len()));
    }
    if u.len() < np + nf {
        return Err(Error::InvalidArgument(format!(
            "trajectory length {} is shorter than Np + Nf = {}",
            u.len(),
            np + nf
        )));
    }
    let hu = build_block_hankel(u, np + nf)?;
    let hy = build_block_hankel(y, np + nf)?;
    let (m, p) = (hu.q, hy.q);
    Ok(DataBlocks {
        up: hu.data.rows(0, m * np).into_owned(),
        uf: hu.data.rows(m * np, m * nf).into_owned(),
        yp: hy.data.rows(0, p * np).into_owned(),
        yf: hy.data.rows(p * np, p * nf).into_owned(),
        m,
        p,
        np,
        nf,
    })
}

/// Elementwise mean of the members. All members must share the exact same
/// input blocks: averaging is only meaningful for a common excitation.
pub fn average_data_blocks(blocks: &[DataBlocks]) -> Result<DataBlocks> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to average".into()))?;
    for (i, b) in blocks.iter().enumerate().skip(1) {
        if !first.same_shape(b) {
            return Err(Error::dim(
                "averaged data blocks",
                format!("{}x{} horizons {}/{}", first.m, first.cols(), first.np, first.nf),
                format!("member {i}: {}x{} horizons {}/{}", b.m, b.cols(), b.np, b.nf),
            ));
        }
        if b.up != first.up || b.uf != first.uf {
            return Err(Error::InvalidArgument(format!(
                "member {i} was generated from a different input sequence"
            )));
        }
    }
    let n = blocks.len() as f64;
    let mean = |pick: fn(&DataBlocks) -> &DMatrix<f64>| -> DMatrix<f64> {
        let mut acc = pick(first).clone();
        for b in &blocks[1..] {
            acc += pick(b);
        }
        acc / n
    };
    Ok(DataBlocks {
        // Inputs are identical across members; keep them bit-exact.
        up: first.up.clone(),
        uf: first.uf.clone(),
        yp: mean(|b| &b.yp),
        yf: mean(|b| &b.yf),
        ..first.clone()
    })
}
