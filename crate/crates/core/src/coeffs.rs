//! T-step effective coefficients obtained by unrolling the stencil in double-double
//! precision, with a binary file format for persistence.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::dd::ExtendedFloat;
use crate::error::{Error, Result};
use crate::stencil::StencilSpec;

const MAGIC: &[u8; 4] = b"FPDC";
const VERSION: u32 = 1;

/// Coefficients of one unroll depth `k`: a dense block per `(target, source)` pair over the
/// offsets `[-k w, k w]`. Pairs that are identically zero are stored as `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoeffRow {
    pub k: usize,
    pub arrays: usize,
    pub radius: Vec<i32>,
    blocks: Vec<Option<Vec<ExtendedFloat>>>,
}

impl CoeffRow {
    /// The identity map at depth zero.
    pub fn identity(dims: usize, arrays: usize) -> Self {
        let blocks = (0..arrays * arrays).map(|i| if i / arrays == i % arrays { Some(vec![ExtendedFloat::ONE]) } else { None }).collect();
        Self { k: 0, arrays, radius: vec![0; dims], blocks }
    }

    pub fn dims(&self) -> usize {
        self.radius.len()
    }

    /// Per-dimension block extent `2 k w + 1`.
    pub fn extent(&self) -> Vec<usize> {
        self.radius.iter().map(|&r| 2 * r as usize + 1).collect()
    }

    pub fn block_len(&self) -> usize {
        self.extent().iter().product()
    }

    pub fn block(&self, u: usize, v: usize) -> Option<&[ExtendedFloat]> {
        self.blocks[u * self.arrays + v].as_deref()
    }

    /// Linear position of `offset` in a block, or `None` outside the radius.
    pub fn position(&self, offset: &[i32]) -> Option<usize> {
        let mut idx = 0usize;
        for (&o, &r) in offset.iter().zip(&self.radius) {
            if o.abs() > r {
                return None;
            }
            idx = idx * (2 * r as usize + 1) + (o + r) as usize;
        }
        Some(idx)
    }

    pub fn offset_of(&self, mut idx: usize) -> Vec<i32> {
        let mut o = vec![0; self.dims()];
        for j in (0..self.dims()).rev() {
            let e = 2 * self.radius[j] as usize + 1;
            o[j] = (idx % e) as i32 - self.radius[j];
            idx /= e;
        }
        o
    }

    pub fn get(&self, u: usize, v: usize, offset: &[i32]) -> ExtendedFloat {
        match (self.block(u, v), self.position(offset)) {
            (Some(b), Some(i)) => b[i],
            _ => ExtendedFloat::ZERO,
        }
    }

    /// Nonzero entries of one block as `(offset, coefficient)`.
    pub fn nonzero(&self, u: usize, v: usize) -> Vec<(Vec<i32>, ExtendedFloat)> {
        match self.block(u, v) {
            None => Vec::new(),
            Some(b) => b.iter().enumerate().filter(|(_, c)| !c.is_zero()).map(|(i, &c)| (self.offset_of(i), c)).collect(),
        }
    }

    /// `sum_i |c_i|` of one block, rounded to a double.
    pub fn abs_sum(&self, u: usize, v: usize) -> f64 {
        self.block(u, v).map(|b| b.iter().fold(ExtendedFloat::ZERO, |a, &c| a + c.abs()).to_f64()).unwrap_or(0.0)
    }

    fn signed_sum(&self, u: usize) -> ExtendedFloat {
        let mut s = ExtendedFloat::ZERO;
        for v in 0..self.arrays {
            if let Some(b) = self.block(u, v) {
                for &c in b {
                    s += c;
                }
            }
        }
        s
    }
}

/// A single-step term grouped with its mirror image so that symmetric stencils unroll to
/// exactly symmetric rows.
#[derive(Clone, Debug)]
struct Group {
    from: usize,
    terms: Vec<(Vec<i32>, f64)>,
}

fn groups(spec: &StencilSpec, u: usize) -> Vec<Group> {
    let terms = spec.terms(u);
    let mut used = vec![false; terms.len()];
    let mut out = Vec::new();
    for i in 0..terms.len() {
        if used[i] {
            continue;
        }
        used[i] = true;
        let mut g = Group { from: terms[i].from, terms: vec![(terms[i].offset.clone(), terms[i].coeff)] };
        if terms[i].offset.iter().any(|&o| o != 0) {
            let neg: Vec<i32> = terms[i].offset.iter().map(|&o| -o).collect();
            if let Some(j) = (i + 1..terms.len()).find(|&j| !used[j] && terms[j].from == terms[i].from && terms[j].offset == neg) {
                used[j] = true;
                g.terms.push((terms[j].offset.clone(), terms[j].coeff));
            }
        }
        out.push(g);
    }
    out
}

/// Generates rows `k = 1, 2, ...` one at a time, keeping only the previous row in memory.
pub struct RowStream {
    arrays: usize,
    width: Vec<i32>,
    groups: Vec<Vec<Group>>,
    current: CoeffRow,
}

impl RowStream {
    pub fn new(spec: &StencilSpec) -> Self {
        Self {
            arrays: spec.arrays,
            width: spec.width(),
            groups: (0..spec.arrays).map(|u| groups(spec, u)).collect(),
            current: CoeffRow::identity(spec.dims, spec.arrays),
        }
    }

    pub fn current(&self) -> &CoeffRow {
        &self.current
    }

    /// Advances to the next depth and returns it.
    pub fn advance(&mut self) -> &CoeffRow {
        let prev = &self.current;
        let k = prev.k + 1;
        let radius: Vec<i32> = self.width.iter().map(|&w| w * k as i32).collect();
        let mut next = CoeffRow { k, arrays: self.arrays, radius, blocks: vec![None; self.arrays * self.arrays] };
        let len = next.block_len();
        let n = self.arrays;
        let blocks: Vec<Option<Vec<ExtendedFloat>>> = (0..n * n)
            .into_par_iter()
            .map(|uv| {
                let (u, v) = (uv / n, uv % n);
                let feeds = self.groups[u].iter().any(|g| prev.block(g.from, v).is_some());
                if !feeds {
                    return None;
                }
                let mut data = vec![ExtendedFloat::ZERO; len];
                let fill = |(idx, out): (usize, &mut ExtendedFloat)| {
                    let j = next.offset_of(idx);
                    let mut acc = ExtendedFloat::ZERO;
                    let mut q = j.clone();
                    for g in &self.groups[u] {
                        let Some(src) = prev.block(g.from, v) else { continue };
                        let mut part = ExtendedFloat::ZERO;
                        for (s, c) in &g.terms {
                            for d in 0..q.len() {
                                q[d] = j[d] - s[d];
                            }
                            if let Some(p) = prev.position(&q) {
                                part += src[p].mul_f64(*c);
                            }
                        }
                        acc += part;
                    }
                    *out = acc;
                };
                if len >= 4096 {
                    data.par_iter_mut().enumerate().for_each(fill);
                } else {
                    data.iter_mut().enumerate().for_each(fill);
                }
                if data.iter().all(|c| c.is_zero()) {
                    None
                } else {
                    Some(data)
                }
            })
            .collect();
        next.blocks = blocks;
        self.current = next;
        &self.current
    }
}

/// Rows `0..=tmax` of the unrolled stencil, tied to a spec by its structure hash.
#[derive(Clone, Debug, PartialEq)]
pub struct CoeffTable {
    pub spec_hash: [u8; 32],
    pub dims: usize,
    pub arrays: usize,
    pub tmax: usize,
    pub width: Vec<i32>,
    rows: Vec<CoeffRow>,
}

impl CoeffTable {
    pub fn row(&self, k: usize) -> Result<&CoeffRow> {
        self.rows.get(k).ok_or(Error::TstepRowMissing(k))
    }

    pub fn rows(&self) -> &[CoeffRow] {
        &self.rows
    }
}

pub fn unroll_coefficients(spec: &StencilSpec, tmax: usize) -> Result<CoeffTable> {
    if tmax == 0 {
        return Err(Error::InvalidSpec("Tmax must be at least 1".into()));
    }
    spec.validate()?;
    let mut stream = RowStream::new(spec);
    let mut rows = vec![stream.current().clone()];
    for _ in 0..tmax {
        rows.push(stream.advance().clone());
    }
    Ok(CoeffTable { spec_hash: spec.structure_hash(), dims: spec.dims, arrays: spec.arrays, tmax, width: spec.width(), rows })
}

/// Largest signed row sum over target arrays at depth `k`.
pub fn coeff_checksum(table: &CoeffTable, k: usize) -> Result<f64> {
    let row = table.row(k)?;
    Ok((0..row.arrays).map(|u| row.signed_sum(u).to_f64()).fold(f64::NEG_INFINITY, f64::max))
}

/// Writes rows incrementally so that large tables never need to be held in memory.
pub struct TableWriter {
    out: BufWriter<File>,
    arrays: usize,
    written: usize,
    tmax: usize,
}

impl TableWriter {
    pub fn create(path: &Path, spec: &StencilSpec, tmax: usize) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&spec.structure_hash())?;
        out.write_all(&(spec.dims as u32).to_le_bytes())?;
        out.write_all(&(spec.arrays as u32).to_le_bytes())?;
        out.write_all(&(tmax as u32).to_le_bytes())?;
        for w in spec.width() {
            out.write_all(&w.to_le_bytes())?;
        }
        Ok(Self { out, arrays: spec.arrays, written: 0, tmax })
    }

    pub fn write_row(&mut self, row: &CoeffRow) -> Result<()> {
        for e in row.extent() {
            self.out.write_all(&(e as u32).to_le_bytes())?;
        }
        for uv in 0..self.arrays * self.arrays {
            match row.block(uv / self.arrays, uv % self.arrays) {
                None => self.out.write_all(&[0u8])?,
                Some(b) => {
                    self.out.write_all(&[1u8])?;
                    for c in b {
                        self.out.write_all(&c.hi.to_le_bytes())?;
                        self.out.write_all(&c.lo.to_le_bytes())?;
                    }
                }
            }
        }
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.written != self.tmax {
            return Err(Error::FormatVersionMismatch(format!("wrote {} rows, header promised {}", self.written, self.tmax)));
        }
        self.out.flush()?;
        Ok(())
    }
}

pub fn save_table(table: &CoeffTable, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&table.spec_hash)?;
    out.write_all(&(table.dims as u32).to_le_bytes())?;
    out.write_all(&(table.arrays as u32).to_le_bytes())?;
    out.write_all(&(table.tmax as u32).to_le_bytes())?;
    for w in &table.width {
        out.write_all(&w.to_le_bytes())?;
    }
    let mut w = TableWriter { out, arrays: table.arrays, written: 0, tmax: table.tmax };
    for row in &table.rows[1..] {
        w.write_row(row)?;
    }
    w.finish()
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Loads a table, checking it against `spec` when one is given.
pub fn load_table(path: &Path, spec: Option<&StencilSpec>) -> Result<CoeffTable> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::FormatVersionMismatch("file too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::FormatVersionMismatch("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::FormatVersionMismatch(format!("version {version}, expected {VERSION}")));
    }
    let mut spec_hash = [0u8; 32];
    r.read_exact(&mut spec_hash)?;
    if let Some(s) = spec {
        if s.structure_hash() != spec_hash {
            return Err(Error::SpecHashMismatch);
        }
    }
    let dims = read_u32(&mut r)? as usize;
    let arrays = read_u32(&mut r)? as usize;
    let tmax = read_u32(&mut r)? as usize;
    if dims == 0 || dims > 8 || arrays == 0 || arrays > 64 {
        return Err(Error::FormatVersionMismatch(format!("implausible header: dims {dims}, arrays {arrays}")));
    }
    let mut width = Vec::with_capacity(dims);
    for _ in 0..dims {
        width.push(read_u32(&mut r)? as i32);
    }
    let mut rows = vec![CoeffRow::identity(dims, arrays)];
    for k in 1..=tmax {
        let mut radius = Vec::with_capacity(dims);
        for &w in &width {
            let e = read_u32(&mut r)? as i32;
            if e != 2 * w * k as i32 + 1 {
                return Err(Error::FormatVersionMismatch(format!("row {k} has inconsistent extent {e}")));
            }
            radius.push(w * k as i32);
        }
        let mut row = CoeffRow { k, arrays, radius, blocks: Vec::with_capacity(arrays * arrays) };
        let len = row.block_len();
        for _ in 0..arrays * arrays {
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            match flag[0] {
                0 => row.blocks.push(None),
                1 => {
                    let mut b = Vec::with_capacity(len);
                    for _ in 0..len {
                        let hi = read_f64(&mut r)?;
                        let lo = read_f64(&mut r)?;
                        b.push(ExtendedFloat { hi, lo });
                    }
                    row.blocks.push(Some(b));
                }
                f => return Err(Error::FormatVersionMismatch(format!("bad block flag {f}"))),
            }
        }
        rows.push(row);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::FormatVersionMismatch("trailing bytes".into()));
    }
    Ok(CoeffTable { spec_hash, dims, arrays, tmax, width, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stencil::{BoundaryCondition, PairTerms};

    fn heat1d() -> StencilSpec {
        StencilSpec {
            dims: 1,
            arrays: 1,
            lower: vec![0],
            upper: vec![63],
            pairs: vec![PairTerms { to: 0, from: 0, offsets: vec![vec![-1], vec![0], vec![1]], coeffs: vec![0.25, 0.5, 0.25] }],
            boundary: BoundaryCondition::constant(vec![0.0]),
        }
    }

    fn row_f64(t: &CoeffTable, k: usize) -> Vec<f64> {
        t.row(k).unwrap().block(0, 0).unwrap().iter().map(|c| c.to_f64()).collect()
    }

    #[test]
    fn first_three_rows() {
        let t = unroll_coefficients(&heat1d(), 3).unwrap();
        assert_eq!(row_f64(&t, 1), vec![0.25, 0.5, 0.25]);
        assert_eq!(row_f64(&t, 2), vec![0.0625, 0.25, 0.375, 0.25, 0.0625]);
        assert_eq!(row_f64(&t, 3), vec![0.015625, 0.09375, 0.234375, 0.3125, 0.234375, 0.09375, 0.015625]);
    }

    #[test]
    fn checksum_of_damped_kernel() {
        let mut s = heat1d();
        s.pairs[0].coeffs = vec![0.25, 0.49, 0.25];
        let t = unroll_coefficients(&s, 5).unwrap();
        for k in 1..=5 {
            let expect = 0.99f64.powi(k as i32);
            assert!((coeff_checksum(&t, k).unwrap() - expect).abs() < 1e-15);
        }
        assert_eq!(coeff_checksum(&t, 1).unwrap(), 0.25 + 0.49 + 0.25);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.fpdc");
        let s = heat1d();
        let t = unroll_coefficients(&s, 8).unwrap();
        save_table(&t, &p).unwrap();
        let back = load_table(&p, Some(&s)).unwrap();
        assert_eq!(back, t);

        let mut other = s.clone();
        other.pairs[0].coeffs[1] = 0.4;
        assert!(matches!(load_table(&p, Some(&other)), Err(Error::SpecHashMismatch)));

        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_table(&p, None), Err(Error::Io(_)) | Err(Error::FormatVersionMismatch(_))));
        std::fs::write(&p, &bytes[..3]).unwrap();
        assert!(matches!(load_table(&p, None), Err(Error::FormatVersionMismatch(_))));
    }

    #[test]
    fn zero_tmax_is_rejected() {
        assert!(unroll_coefficients(&heat1d(), 0).is_err());
    }
}
