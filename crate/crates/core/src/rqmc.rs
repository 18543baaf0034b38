//! Scrambled Sobol' point sets and the inverse-normal transform.
//!
//! Points are generated in natural (non-Gray-code) order from the Joe-Kuo
//! `new-joe-kuo-6` direction numbers at 32-bit resolution. Scrambling is a
//! random lower-triangular linear matrix scramble followed by a digital shift,
//! plus a uniform offset below the last digit so no coordinate is 0 or 1.

use std::sync::OnceLock;

use rand::Rng;

use statrs::function::erf::erfc_inv;

use crate::error::{Result, VbillError};
use crate::stream::StreamKey;

const BITS: usize = 32;
const TABLE: &str = include_str!("../data/new-joe-kuo-6.1000");

/// Largest supported point dimension.
pub fn max_dim() -> usize {
    directions().len()
}

fn directions() -> &'static [[u32; BITS]] {
    static DIRS: OnceLock<Vec<[u32; BITS]>> = OnceLock::new();
    DIRS.get_or_init(|| parse_table(TABLE).expect("bundled direction-number table is valid"))
}

/// Parses a table in the standard format (header line, then `d s a m_1..m_s`).
pub fn parse_table(text: &str) -> Result<Vec<[u32; BITS]>> {
    let mut out = Vec::new();
    let mut first = [0u32; BITS];
    for (k, v) in first.iter_mut().enumerate() {
        *v = 1u32 << (BITS - 1 - k);
    }
    out.push(first);
    for (lineno, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<u64> = line
            .split_whitespace()
            .map(|f| f.parse::<u64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| VbillError::Schema(format!("direction table line {}: {e}", lineno + 1)))?;
        if fields.is_empty() {
            continue;
        }
        if fields.len() < 3 || fields.len() != 3 + fields[1] as usize {
            return Err(VbillError::Schema(format!(
                "direction table line {} is malformed",
                lineno + 1
            )));
        }
        let s = fields[1] as usize;
        let a = fields[2] as u32;
        let m = &fields[3..];
        let mut v = [0u32; BITS];
        for k in 0..s.min(BITS) {
            v[k] = (m[k] as u32) << (BITS - 1 - k);
        }
        for k in s..BITS {
            let mut x = v[k - s] ^ (v[k - s] >> s);
            for j in 1..s {
                if (a >> (s - 1 - j)) & 1 == 1 {
                    x ^= v[k - j];
                }
            }
            v[k] = x;
        }
        out.push(v);
    }
    Ok(out)
}

/// `count x dim` points in `(0,1)`, row-major.
#[derive(Debug, Clone)]
pub struct PointBatch {
    pub count: usize,
    pub dim: usize,
    pub points: Vec<f64>,
    /// Scramble seed, `None` for the raw sequence.
    pub seed: Option<u64>,
}

impl PointBatch {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }
}

struct Scramble {
    /// Row masks of the lower-triangular matrix, indexed by output digit
    /// (digit 0 is the most significant bit).
    rows: [u32; BITS],
    shift: u32,
    offset: f64,
}

impl Scramble {
    fn draw<R: Rng>(rng: &mut R) -> Self {
        let mut rows = [0u32; BITS];
        for (r, row) in rows.iter_mut().enumerate() {
            let diag = 1u32 << (BITS - 1 - r);
            // random bits on digits more significant than r
            let above = if r == 0 { 0 } else { !((1u32 << (BITS - r)) - 1) };
            *row = diag | (rng.random::<u32>() & above);
        }
        Scramble {
            rows,
            shift: rng.random(),
            offset: (f64::from(rng.random::<u32>()) + 0.5) / 4_294_967_296.0,
        }
    }

    fn apply(&self, v: u32) -> u32 {
        let mut out = 0u32;
        for (r, row) in self.rows.iter().enumerate() {
            if (v & row).count_ones() & 1 == 1 {
                out |= 1u32 << (BITS - 1 - r);
            }
        }
        out
    }
}

fn check_request(dim: usize, count: usize) -> Result<()> {
    if dim == 0 || dim > max_dim() {
        return Err(VbillError::InvalidParameter(format!(
            "point dimension {dim} outside supported range 1..={}",
            max_dim()
        )));
    }
    if !count.is_power_of_two() {
        return Err(VbillError::InvalidParameter(format!(
            "point count {count} is not a power of two"
        )));
    }
    if count.trailing_zeros() as usize > BITS {
        return Err(VbillError::InvalidParameter("point count too large".into()));
    }
    Ok(())
}

/// First `count` Sobol' points in `dim` dimensions.
///
/// Unscrambled batches use indices `1..=count` (the origin is skipped);
/// scrambled batches use `0..count`, which keeps the full net structure.
pub fn sobol_batch(dim: usize, count: usize, seed: u64, scrambled: bool) -> Result<PointBatch> {
    check_request(dim, count)?;
    let dirs = &directions()[..dim];
    let scale = 1.0 / 4_294_967_296.0;
    let mut points = vec![0.0; count * dim];
    if scrambled {
        let mut rng = StreamKey::new(seed).rng();
        let scrambles: Vec<Scramble> = (0..dim).map(|_| Scramble::draw(&mut rng)).collect();
        for (j, (v, sc)) in dirs.iter().zip(&scrambles).enumerate() {
            let mut sv = [0u32; BITS];
            for k in 0..BITS {
                sv[k] = sc.apply(v[k]);
            }
            for i in 0..count {
                let x = gray_free_point(&sv, i as u64) ^ sc.shift;
                points[i * dim + j] = (f64::from(x) + sc.offset) * scale;
            }
        }
    } else {
        for (j, v) in dirs.iter().enumerate() {
            for i in 0..count {
                let x = gray_free_point(v, i as u64 + 1);
                points[i * dim + j] = f64::from(x) * scale;
            }
        }
    }
    Ok(PointBatch {
        count,
        dim,
        points,
        seed: scrambled.then_some(seed),
    })
}

/// Pseudo-random uniforms in `(0,1)` with the same layout as [`sobol_batch`].
pub fn mc_batch(dim: usize, count: usize, key: StreamKey) -> PointBatch {
    let mut rng = key.rng();
    let points = (0..dim * count)
        .map(|_| (f64::from(rng.random::<u32>()) + 0.5) / 4_294_967_296.0)
        .collect();
    PointBatch {
        count,
        dim,
        points,
        seed: None,
    }
}

#[inline]
fn gray_free_point(v: &[u32; BITS], mut index: u64) -> u32 {
    let mut x = 0u32;
    let mut k = 0;
    while index != 0 {
        if index & 1 == 1 {
            x ^= v[k];
        }
        index >>= 1;
        k += 1;
    }
    x
}

/// Coordinate-wise inverse standard-normal transform of a batch.
pub fn to_normal(batch: &PointBatch) -> Result<Vec<f64>> {
    batch.points.iter().map(|&u| inverse_normal_cdf(u)).collect()
}

/// Inverse of the standard normal CDF, via the rational approximations of
/// the inverse complementary error function.
pub fn inverse_normal_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(VbillError::InvalidParameter(format!(
            "inverse normal CDF requires 0 < u < 1, got {p}"
        )));
    }
    Ok(-std::f64::consts::SQRT_2 * erfc_inv(2.0 * p))
}
