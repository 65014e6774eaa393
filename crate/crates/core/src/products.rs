//! Two-factor products: tensor eigenbases, Marcinkiewicz symbols, product
//! kernels (in memory or streamed to disk), gap cones and the
//! quasielliptic-to-elliptic extension.

use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fit::geomspace;
use crate::psido::{default_exclusion_radius, dyadic_grid};
use crate::spectral::{distinct_positive, EigenBasis};
use crate::symbol::{smooth_step, Symbol2};

pub const PAIR_CAP: usize = 250_000;

/// Tensor eigenbasis of two factors over their active modes.
#[derive(Clone, Debug)]
pub struct ProductBasis {
    pub b1: Arc<EigenBasis>,
    pub b2: Arc<EigenBasis>,
    /// Active eigenvalues of each factor.
    pub l1: Vec<f64>,
    pub l2: Vec<f64>,
    /// Local index pairs (into l1, l2), sorted by λ1+λ2 then index.
    pub pairs: Vec<(usize, usize)>,
    a1: DMatrix<f64>,
    a2: DMatrix<f64>,
}

pub fn product_basis(b1: Arc<EigenBasis>, b2: Arc<EigenBasis>) -> Result<ProductBasis> {
    product_basis_capped(b1, b2, PAIR_CAP)
}

pub fn product_basis_capped(b1: Arc<EigenBasis>, b2: Arc<EigenBasis>, cap: usize) -> Result<ProductBasis> {
    let l1 = b1.active_eigenvalues().to_vec();
    let l2 = b2.active_eigenvalues().to_vec();
    let count = l1.len() * l2.len();
    if count > cap {
        return invalid(format!("{count} product pairs exceed the cap of {cap}"));
    }
    let mut pairs: Vec<(usize, usize)> = (0..l1.len()).flat_map(|i| (0..l2.len()).map(move |j| (i, j))).collect();
    pairs.sort_by(|&(a, b), &(c, d)| (l1[a] + l2[b]).total_cmp(&(l1[c] + l2[d])).then((a, b).cmp(&(c, d))));
    let r1 = b1.active();
    let r2 = b2.active();
    let a1 = b1.vectors.columns(r1.start, r1.len()).into_owned();
    let a2 = b2.vectors.columns(r2.start, r2.len()).into_owned();
    Ok(ProductBasis { b1, b2, l1, l2, pairs, a1, a2 })
}

impl ProductBasis {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.b1.n_vertices(), self.b2.n_vertices())
    }

    pub fn lambda(&self, pair: (usize, usize)) -> (f64, f64) {
        (self.l1[pair.0], self.l2[pair.1])
    }

    /// φ_i ⊗ φ_j as a matrix over (x1, x2).
    pub fn phi(&self, pair: (usize, usize)) -> DMatrix<f64> {
        self.a1.column(pair.0) * self.a2.column(pair.1).transpose()
    }

    pub fn inner(&self, u: &DMatrix<f64>, v: &DMatrix<f64>) -> f64 {
        let (m1, m2) = (self.b1.mass(), self.b2.mass());
        let mut s = 0.0;
        for i in 0..u.nrows() {
            for j in 0..u.ncols() {
                s += u[(i, j)] * v[(i, j)] * m1[i] * m2[j];
            }
        }
        s
    }

    pub fn norm(&self, u: &DMatrix<f64>) -> f64 {
        self.inner(u, u).sqrt()
    }

    /// c_{ij} = ⟨u, φ_i ⊗ φ_j⟩ as a k1 × k2 matrix.
    pub fn coefficients(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        let mut w = u.clone();
        for (i, m) in self.b1.mass().iter().enumerate() {
            w.row_mut(i).scale_mut(*m);
        }
        for (j, m) in self.b2.mass().iter().enumerate() {
            w.column_mut(j).scale_mut(*m);
        }
        self.a1.transpose() * w * &self.a2
    }

    pub fn synthesize(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a1 * c * self.a2.transpose()
    }

    /// Symbol values on the k1 × k2 eigenvalue lattice.
    pub fn symbol_matrix(&self, p: &Symbol2) -> Result<DMatrix<Complex64>> {
        let m = DMatrix::from_fn(self.l1.len(), self.l2.len(), |i, j| p.eval(self.l1[i], self.l2[j]));
        let bad: Vec<f64> = m.iter().filter(|z| !(z.re.is_finite() && z.im.is_finite())).map(|_| f64::NAN).collect();
        if !bad.is_empty() {
            return Err(Error::SymbolUndefined(
                self.pairs
                    .iter()
                    .filter(|&&(i, j)| !m[(i, j)].norm().is_finite())
                    .flat_map(|&(i, j)| [self.l1[i], self.l2[j]])
                    .collect(),
            ));
        }
        Ok(m)
    }
}

/// Real and imaginary parts of a function on the product vertex set.
#[derive(Clone, Debug, PartialEq)]
pub struct Field2 {
    pub re: DMatrix<f64>,
    pub im: DMatrix<f64>,
}

impl Field2 {
    pub fn real(re: DMatrix<f64>) -> Self {
        let im = DMatrix::zeros(re.nrows(), re.ncols());
        Field2 { re, im }
    }

    pub fn max_diff(&self, other: &Field2) -> f64 {
        (&self.re - &other.re).amax().max((&self.im - &other.im).amax())
    }

    pub fn amax(&self) -> f64 {
        self.re.amax().max(self.im.amax())
    }
}

/// Σ p(λ1,λ2) c_{ij} φ_i ⊗ φ_j.
pub fn apply2(p: &Symbol2, pb: &ProductBasis, u: &DMatrix<f64>) -> Result<Field2> {
    if u.shape() != pb.shape() {
        return invalid("u has the wrong shape");
    }
    let s = pb.symbol_matrix(p)?;
    let c = pb.coefficients(u);
    let re = c.zip_map(&s, |c, s| c * s.re);
    let im = c.zip_map(&s, |c, s| c * s.im);
    Ok(Field2 { re: pb.synthesize(&re), im: pb.synthesize(&im) })
}

pub fn apply2_complex(p: &Symbol2, pb: &ProductBasis, u: &Field2) -> Result<Field2> {
    let a = apply2(p, pb, &u.re)?;
    let b = apply2(p, pb, &u.im)?;
    Ok(Field2 { re: a.re - b.im, im: a.im + b.re })
}

#[derive(Clone, Debug, Serialize)]
pub struct MarcinkiewiczReport {
    pub symbol: String,
    pub order: f64,
    pub d: f64,
    pub alpha_max: usize,
    /// (a, b, C) with C = sup |λ1^a λ2^b ∂1^a ∂2^b p| (1+λ1+λ2)^{−m/(d+1)}.
    pub constants: Vec<(usize, usize, f64)>,
    pub extended_constants: Vec<(usize, usize, f64)>,
    pub saturated: bool,
    pub bad_points: Vec<(f64, f64)>,
    pub passes: bool,
}

fn marcinkiewicz_constants(p: &Symbol2, m: f64, alpha_max: usize, g1: &[f64], g2: &[f64], d: f64, bad: &mut Vec<(f64, f64)>) -> Vec<(usize, usize, f64)> {
    let mut c = vec![vec![0.0f64; alpha_max + 1]; alpha_max + 1];
    for &x in g1 {
        for &y in g2 {
            let w = (1.0 + x + y).powf(-m / (d + 1.0));
            let s = p.scaled_derivatives(x, y, alpha_max);
            for a in 0..=alpha_max {
                for b in 0..=alpha_max {
                    let v = s[a][b].norm() * w;
                    if v.is_finite() {
                        c[a][b] = c[a][b].max(v);
                    } else {
                        bad.push((x, y));
                    }
                }
            }
        }
    }
    (0..=alpha_max).flat_map(|a| (0..=alpha_max).map(move |b| (a, b))).map(|(a, b)| (a, b, c[a][b])).collect()
}

/// Mixed-derivative symbol check on a product grid, with the same upward
/// saturation test as the one-variable check.
pub fn verify_marcinkiewicz(p: &Symbol2, m: f64, alpha_max: usize, g1: &[f64], g2: &[f64], d: f64) -> Result<MarcinkiewiczReport> {
    if alpha_max > 3 {
        return invalid("α_max ≤ 3 per variable for mixed finite differences");
    }
    if g1.is_empty() || g2.is_empty() || g1.iter().chain(g2).any(|x| !(*x > 0.0)) {
        return invalid("grids must be non-empty and positive");
    }
    let mut bad = Vec::new();
    let constants = marcinkiewicz_constants(p, m, alpha_max, g1, g2, d, &mut bad);
    let extend = |g: &[f64]| {
        let hi = g.iter().copied().fold(0.0, f64::max);
        g.iter().copied().chain(dyadic_grid(hi, hi * 1024.0, 2).into_iter().skip(1)).collect::<Vec<f64>>()
    };
    let extended = marcinkiewicz_constants(p, m, alpha_max, &extend(g1), &extend(g2), d, &mut bad);
    bad.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    bad.dedup();
    let floor = 1e-8 * (1.0 + constants[0].2);
    let saturated = constants.iter().zip(&extended).all(|(c, e)| e.2 <= 1.5 * c.2 + floor);
    Ok(MarcinkiewiczReport {
        symbol: p.name.clone(),
        order: m,
        d,
        alpha_max,
        passes: bad.is_empty() && saturated,
        constants,
        extended_constants: extended,
        saturated,
        bad_points: bad,
    })
}

/// Symbol values with the spectral weights λ1^{β1} λ2^{β2} that discrete
/// Laplacians in each factor contribute (β_i counts x and y applications).
fn weighted_symbol(pb: &ProductBasis, p: &Symbol2, powers: [usize; 2]) -> Result<DMatrix<Complex64>> {
    let mut s = pb.symbol_matrix(p)?;
    for i in 0..pb.l1.len() {
        for j in 0..pb.l2.len() {
            s[(i, j)] *= pb.l1[i].powi(powers[0] as i32) * pb.l2[j].powi(powers[1] as i32);
        }
    }
    Ok(s)
}

/// The n2 × n2 block K((x1,·),(y1,·)).
fn kernel_block(pb: &ProductBasis, s: &DMatrix<Complex64>, x1: usize, y1: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let k1 = pb.l1.len();
    let k2 = pb.l2.len();
    let mut qre = vec![0.0; k2];
    let mut qim = vec![0.0; k2];
    for i in 0..k1 {
        let w = pb.a1[(x1, i)] * pb.a1[(y1, i)];
        if w == 0.0 {
            continue;
        }
        for j in 0..k2 {
            qre[j] += w * s[(i, j)].re;
            qim[j] += w * s[(i, j)].im;
        }
    }
    let n2 = pb.a2.nrows();
    let mut re = DMatrix::zeros(n2, n2);
    let mut im = DMatrix::zeros(n2, n2);
    for x2 in 0..n2 {
        for y2 in x2..n2 {
            let (mut a, mut b) = (0.0, 0.0);
            for j in 0..k2 {
                let f = pb.a2[(x2, j)] * pb.a2[(y2, j)];
                a += qre[j] * f;
                b += qim[j] * f;
            }
            re[(x2, y2)] = a;
            re[(y2, x2)] = a;
            im[(x2, y2)] = b;
            im[(y2, x2)] = b;
        }
    }
    (re, im)
}

/// Dense product kernel over flattened vertices x1·n2 + x2.
#[derive(Clone, Debug)]
pub struct ProductKernel {
    pub symbol: String,
    pub n1: usize,
    pub n2: usize,
    pub re: DMatrix<f64>,
    pub im: DMatrix<f64>,
}

pub fn kernel2(p: &Symbol2, pb: &ProductBasis) -> Result<ProductKernel> {
    let (n1, n2) = pb.shape();
    if (n1 * n2).pow(2) > 50_000_000 {
        return invalid("product kernel too large for memory; stream it with write_kernel2");
    }
    let s = pb.symbol_matrix(p)?;
    let n = n1 * n2;
    let blocks: Vec<((usize, usize), (DMatrix<f64>, DMatrix<f64>))> = (0..n1 * n1)
        .into_par_iter()
        .map(|b| {
            let (x1, y1) = (b / n1, b % n1);
            ((x1, y1), kernel_block(pb, &s, x1, y1))
        })
        .collect();
    let mut re = DMatrix::zeros(n, n);
    let mut im = DMatrix::zeros(n, n);
    for ((x1, y1), (br, bi)) in blocks {
        for x2 in 0..n2 {
            for y2 in 0..n2 {
                re[(x1 * n2 + x2, y1 * n2 + y2)] = br[(x2, y2)];
                im[(x1 * n2 + x2, y1 * n2 + y2)] = bi[(x2, y2)];
            }
        }
    }
    Ok(ProductKernel { symbol: p.name.clone(), n1, n2, re, im })
}

impl ProductKernel {
    /// (x1,x2) ↦ Σ K((x1,x2),(y1,y2)) u(y1,y2) μ1(y1) μ2(y2).
    pub fn integrate(&self, u: &DMatrix<f64>, m1: &[f64], m2: &[f64]) -> Field2 {
        let n = self.n1 * self.n2;
        let flat = nalgebra::DVector::from_fn(n, |k, _| u[(k / self.n2, k % self.n2)] * m1[k / self.n2] * m2[k % self.n2]);
        let a = &self.re * &flat;
        let b = &self.im * &flat;
        Field2 {
            re: DMatrix::from_fn(self.n1, self.n2, |i, j| a[i * self.n2 + j]),
            im: DMatrix::from_fn(self.n1, self.n2, |i, j| b[i * self.n2 + j]),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ProductDecayReport {
    pub symbol: String,
    pub levels: (usize, usize),
    /// Laplacian applications per factor (x and y together).
    pub powers: [usize; 2],
    pub alphas: [f64; 2],
    pub sup: f64,
    pub argmax: ((usize, usize), (usize, usize)),
    pub radii: [f64; 2],
    pub admissible_pairs: usize,
}

/// Exclusion radius used per factor in product sweeps: one finest cell
/// diameter. Twice that leaves no interior pair at factor level 2.
pub fn product_exclusion_radius(b: &EigenBasis) -> f64 {
    0.5 * default_exclusion_radius(b)
}

/// sup |Δ^β K| R1^{α1} R2^{α2} over pairs admissible in both factors, where
/// α_i = d_i + β_i (d_i + 1). Computed block by block without storing K.
pub fn product_decay(p: &Symbol2, pb: &ProductBasis, powers: [usize; 2]) -> Result<ProductDecayReport> {
    product_decay_with_radii(p, pb, powers, [product_exclusion_radius(&pb.b1), product_exclusion_radius(&pb.b2)])
}

pub fn product_decay_with_radii(p: &Symbol2, pb: &ProductBasis, powers: [usize; 2], radii: [f64; 2]) -> Result<ProductDecayReport> {
    let s = weighted_symbol(pb, p, powers)?;
    let (n1, n2) = pb.shape();
    let (d1, d2) = (pb.b1.d, pb.b2.d);
    let alphas = [d1 + powers[0] as f64 * (d1 + 1.0), d2 + powers[1] as f64 * (d2 + 1.0)];
    let (m1, m2) = (&pb.b1.metric, &pb.b2.metric);
    let rows: Vec<(f64, ((usize, usize), (usize, usize)), usize)> = (0..n1)
        .into_par_iter()
        .map(|x1| {
            let mut best = (f64::NEG_INFINITY, ((0, 0), (0, 0)), 0usize);
            for y1 in 0..n1 {
                let r1 = m1.get(x1, y1);
                if x1 == y1 || r1 < radii[0] {
                    continue;
                }
                let (br, bi) = kernel_block(pb, &s, x1, y1);
                for x2 in 0..n2 {
                    for y2 in 0..n2 {
                        let r2 = m2.get(x2, y2);
                        if x2 == y2 || r2 < radii[1] {
                            continue;
                        }
                        best.2 += 1;
                        let v = Complex64::new(br[(x2, y2)], bi[(x2, y2)]).norm() * r1.powf(alphas[0]) * r2.powf(alphas[1]);
                        if v > best.0 {
                            best.0 = v;
                            best.1 = ((x1, x2), (y1, y2));
                        }
                    }
                }
            }
            best
        })
        .collect();
    let mut best = (f64::NEG_INFINITY, ((0, 0), (0, 0)));
    let mut count = 0;
    for (v, arg, c) in rows {
        count += c;
        if v > best.0 {
            best = (v, arg);
        }
    }
    if count == 0 {
        return Err(Error::NoAdmissiblePairs(format!(
            "no product pair admissible in both factors (levels {}, {})",
            pb.b1.graph.level, pb.b2.graph.level
        )));
    }
    Ok(ProductDecayReport {
        symbol: p.name.clone(),
        levels: (pb.b1.graph.level, pb.b2.graph.level),
        powers,
        alphas,
        sup: best.0,
        argmax: best.1,
        radii,
        admissible_pairs: count,
    })
}

pub const KERNEL_MAGIC: &[u8; 8] = b"FFKER001";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelFileHeader {
    pub symbol: String,
    /// [rows, cols] of the flattened kernel; row index x1·n2 + x2.
    pub shape: [usize; 2],
    pub factors: [usize; 2],
    pub basis_hashes: [String; 2],
    pub config_hash: String,
    pub dtype: String,
    pub complex: bool,
    pub rows_per_chunk: usize,
    pub chunks: usize,
}

/// Streams a product kernel to `w`: magic, u64 header length, JSON header,
/// then one chunk per x1 (u64 chunk index, u64 first row, u64 row count,
/// row-major little-endian f64 values, re/im interleaved when complex).
pub fn write_kernel2(p: &Symbol2, pb: &ProductBasis, config_hash: &str, w: &mut impl Write) -> Result<KernelFileHeader> {
    let s = pb.symbol_matrix(p)?;
    let complex = s.iter().any(|z| z.im != 0.0);
    let (n1, n2) = pb.shape();
    let n = n1 * n2;
    let header = KernelFileHeader {
        symbol: p.name.clone(),
        shape: [n, n],
        factors: [n1, n2],
        basis_hashes: [pb.b1.hash(), pb.b2.hash()],
        config_hash: config_hash.to_string(),
        dtype: "f64le".into(),
        complex,
        rows_per_chunk: n2,
        chunks: n1,
    };
    let hj = serde_json::to_vec(&header)?;
    w.write_all(KERNEL_MAGIC)?;
    w.write_all(&(hj.len() as u64).to_le_bytes())?;
    w.write_all(&hj)?;
    for x1 in 0..n1 {
        let blocks: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..n1).into_par_iter().map(|y1| kernel_block(pb, &s, x1, y1)).collect();
        let mut buf = Vec::with_capacity(24 + n2 * n * 8 * if complex { 2 } else { 1 });
        buf.extend_from_slice(&(x1 as u64).to_le_bytes());
        buf.extend_from_slice(&((x1 * n2) as u64).to_le_bytes());
        buf.extend_from_slice(&(n2 as u64).to_le_bytes());
        for x2 in 0..n2 {
            for (br, bi) in &blocks {
                for y2 in 0..n2 {
                    buf.extend_from_slice(&br[(x2, y2)].to_le_bytes());
                    if complex {
                        buf.extend_from_slice(&bi[(x2, y2)].to_le_bytes());
                    }
                }
            }
        }
        w.write_all(&buf)?;
    }
    Ok(header)
}

/// Reads a streamed kernel back as (header, real part, imaginary part).
pub fn read_kernel2(r: &mut impl Read) -> Result<(KernelFileHeader, DMatrix<f64>, DMatrix<f64>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != KERNEL_MAGIC {
        return Err(Error::Parse("not a product kernel file".into()));
    }
    let mut u = [0u8; 8];
    r.read_exact(&mut u)?;
    let mut hj = vec![0u8; u64::from_le_bytes(u) as usize];
    r.read_exact(&mut hj)?;
    let header: KernelFileHeader = serde_json::from_slice(&hj)?;
    let [rows, cols] = header.shape;
    let mut re = DMatrix::zeros(rows, cols);
    let mut im = DMatrix::zeros(rows, cols);
    let mut f = [0u8; 8];
    for _ in 0..header.chunks {
        let mut h = [0u64; 3];
        for v in &mut h {
            r.read_exact(&mut u)?;
            *v = u64::from_le_bytes(u);
        }
        for row in h[1] as usize..(h[1] + h[2]) as usize {
            for col in 0..cols {
                r.read_exact(&mut f)?;
                re[(row, col)] = f64::from_le_bytes(f);
                if header.complex {
                    r.read_exact(&mut f)?;
                    im[(row, col)] = f64::from_le_bytes(f);
                }
            }
        }
    }
    Ok((header, re, im))
}

/// Γ_{a,ε} = {(λ1,λ2): |λ1 − aλ2| < ελ2}, i.e. ratios λ1/λ2 in (a−ε, a+ε).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeSpec {
    pub a: f64,
    pub eps: f64,
}

impl ConeSpec {
    pub fn new(a: f64, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps < a) {
            return invalid(format!("cone needs 0 < ε < a (a = {a}, ε = {eps})"));
        }
        Ok(ConeSpec { a, eps })
    }

    pub fn from_ratios(lo: f64, hi: f64) -> Result<Self> {
        ConeSpec::new(0.5 * (lo + hi), 0.5 * (hi - lo))
    }

    pub fn lo(&self) -> f64 {
        self.a - self.eps
    }

    pub fn hi(&self) -> f64 {
        self.a + self.eps
    }

    /// Open membership; edges within 1e-12 relative count as outside so
    /// that the realized ratios bounding a gap stay out after rounding.
    pub fn contains(&self, l1: f64, l2: f64) -> bool {
        (l1 - self.a * l2).abs() < self.eps * l2 * (1.0 - 1e-12)
    }
}

/// Ratio range (lo, hi) that a truncated pair of spectra resolves: centred
/// on the geometric middle of all realized ratios with half its log-span.
/// Gaps near the extreme ratios only reflect where the spectra were cut off.
pub fn resolved_ratio_window(v1: &[f64], v2: &[f64]) -> Option<(f64, f64)> {
    let d1 = distinct_positive(v1);
    let d2 = distinct_positive(v2);
    let (a0, a1, b0, b1) = (*d1.first()?, *d1.last()?, *d2.first()?, *d2.last()?);
    let centre = (a0 * a1 / (b0 * b1)).sqrt();
    let w = ((a1 / a0) * (b1 / b0)).powf(0.25);
    Some((centre / w, centre * w))
}

/// Maximal open ratio intervals between consecutive realized ratios λ1/λ2
/// (distinct positive values of each factor) with hi/lo − 1 ≥ min_width,
/// optionally keeping only those inside a ratio window.
pub fn gap_cones_from_spectra(v1: &[f64], v2: &[f64], min_width: f64, window: Option<(f64, f64)>) -> Vec<ConeSpec> {
    let d1 = distinct_positive(v1);
    let d2 = distinct_positive(v2);
    let mut ratios: Vec<f64> = d1.iter().flat_map(|a| d2.iter().map(move |b| a / b)).collect();
    ratios.sort_by(|a, b| a.total_cmp(b));
    let (wlo, whi) = window.unwrap_or((0.0, f64::INFINITY));
    let mut out = Vec::new();
    for w in ratios.windows(2) {
        if w[0] < wlo || w[1] > whi {
            continue;
        }
        if w[1] > w[0] * (1.0 + 1e-12) && w[1] / w[0] - 1.0 >= min_width {
            if let Ok(c) = ConeSpec::from_ratios(w[0], w[1]) {
                out.push(c);
            }
        }
    }
    out
}

pub fn gap_cones(pb: &ProductBasis, min_width: f64) -> Result<Vec<ConeSpec>> {
    if pb.len() < 100 {
        return invalid("gap cone scan needs at least 100 pairs");
    }
    Ok(gap_cones_from_spectra(&pb.l1, &pb.l2, min_width, resolved_ratio_window(&pb.l1, &pb.l2)))
}

/// The cone with the largest relative width hi/lo.
pub fn widest_cone(cones: &[ConeSpec]) -> Option<ConeSpec> {
    cones.iter().copied().max_by(|a, b| (a.hi() / a.lo()).total_cmp(&(b.hi() / b.lo())))
}

/// Polar evaluation grid on the closed quadrant with |λ| ∈ [A, r_max].
#[derive(Clone, Debug)]
pub struct EllipticGrid {
    pub radii: Vec<f64>,
    /// Directions (λ1, λ2)/|λ|; rays through given ratios are exact.
    pub directions: Vec<(f64, f64)>,
}

impl EllipticGrid {
    pub fn new(a: f64, r_max: f64, extra_ratios: &[f64]) -> Result<Self> {
        if !(a > 0.0 && r_max > a) {
            return invalid("elliptic grid needs 0 < A < r_max");
        }
        let n = (10.0 * (r_max / a).log10()).ceil().max(2.0) as usize + 1;
        let radii = geomspace(a, r_max, n);
        let mut directions: Vec<(f64, f64)> = (0..=40)
            .map(|j| {
                let t = std::f64::consts::FRAC_PI_2 * j as f64 / 40.0;
                (t.sin(), t.cos())
            })
            .collect();
        for &q in extra_ratios {
            let l2 = 1.0 / (1.0 + q * q).sqrt();
            directions.push((q * l2, l2));
        }
        Ok(EllipticGrid { radii, directions })
    }

    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.radii.iter().flat_map(move |&r| self.directions.iter().map(move |&(s, c)| (r * s, r * c)))
    }
}

pub const ELLIPTIC_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, Serialize)]
pub struct EllipticReport {
    pub symbol: String,
    pub m: f64,
    /// inf |p(λ)| |λ|^{−m/(d+1)} over the points checked.
    pub c: f64,
    pub witness: (f64, f64),
    pub points: usize,
    pub passes: bool,
}

fn elliptic_scan(p: &Symbol2, m: f64, d: f64, pts: impl Iterator<Item = (f64, f64)>) -> EllipticReport {
    let mut best = (f64::INFINITY, (f64::NAN, f64::NAN));
    let mut count = 0;
    for (x, y) in pts {
        count += 1;
        let r = (x * x + y * y).sqrt();
        let v = p.eval(x, y).norm() * r.powf(-m / (d + 1.0));
        let v = if v.is_nan() { 0.0 } else { v };
        if v < best.0 {
            best = (v, (x, y));
        }
    }
    EllipticReport { symbol: p.name.clone(), m, c: best.0, witness: best.1, points: count, passes: count > 0 && best.0 > ELLIPTIC_FLOOR }
}

/// |p(λ)| ≥ c |λ|^{m/(d+1)} on the grid; passes when c > ELLIPTIC_FLOOR.
pub fn elliptic_check(p: &Symbol2, m: f64, grid: &EllipticGrid, d: f64) -> EllipticReport {
    elliptic_scan(p, m, d, grid.points())
}

/// Same bound restricted to grid points outside a cone (quasiellipticity).
pub fn elliptic_check_outside(p: &Symbol2, m: f64, grid: &EllipticGrid, cone: &ConeSpec, d: f64) -> EllipticReport {
    elliptic_scan(p, m, d, grid.points().filter(|&(x, y)| !cone.contains(x, y)))
}

/// Same bound over the spectrum pairs with |λ| ≥ A.
pub fn elliptic_check_spectrum(p: &Symbol2, m: f64, a: f64, pb: &ProductBasis) -> EllipticReport {
    let d = 0.5 * (pb.b1.d + pb.b2.d);
    elliptic_scan(p, m, d, pb.pairs.iter().map(|&q| pb.lambda(q)).filter(|&(x, y)| (x * x + y * y).sqrt() >= a))
}

/// Width of each transition zone at the cone's edges, as a fraction of its angular width.
pub const BLEND_TAU: f64 = 0.25;

fn angle(l1: f64, l2: f64) -> f64 {
    l1.atan2(l2)
}

/// p̃ = p outside the cone. Inside, ln p̃ = (1−b)·ln p + b·L, where L
/// interpolates ln|p| linearly in θ = atan(λ1/λ2) between the cone edges at
/// the same radius (phase along the shortest path) and b is a smooth plateau
/// equal to 1 away from transition zones of relative width BLEND_TAU.
pub fn elliptic_extension(p: &Symbol2, m: f64, cone: ConeSpec, a: f64, grid: &EllipticGrid, d: f64) -> Result<Symbol2> {
    let outside = elliptic_check_outside(p, m, grid, &cone, d);
    if !outside.passes {
        return Err(Error::InvalidInput(format!(
            "not quasielliptic: |p| |λ|^(-m/(d+1)) = {:.3e} at ({:.4e}, {:.4e}) outside the cone",
            outside.c, outside.witness.0, outside.witness.1
        )));
    }
    let (t_lo, t_hi) = (cone.lo().atan(), cone.hi().atan());
    // ln p must be available in the transition zones
    for &r in &grid.radii {
        for j in 0..=20 {
            let f = BLEND_TAU * j as f64 / 20.0;
            for t in [t_lo + f * (t_hi - t_lo), t_hi - f * (t_hi - t_lo)] {
                let (x, y) = (r * t.sin(), r * t.cos());
                let v = p.eval(x, y).norm() * r.powf(-m / (d + 1.0));
                if !(v > ELLIPTIC_FLOOR) {
                    return Err(Error::InvalidInput(format!("p vanishes in the blend zone near ({x:.4e}, {y:.4e})")));
                }
            }
        }
    }
    let q = p.clone();
    let name = format!("ext[{}; a={}, ε={}]", p.name, cone.a, cone.eps);
    let _ = a;
    Ok(Symbol2::new(name, m, move |l1, l2| {
        if !cone.contains(l1, l2) {
            return q.eval(l1, l2);
        }
        let r = (l1 * l1 + l2 * l2).sqrt();
        let th = angle(l1, l2);
        let t = ((th - t_lo) / (t_hi - t_lo)).clamp(0.0, 1.0);
        let edge = |a: f64| q.eval(r * a.sin(), r * a.cos()).ln();
        let (e0, e1) = (edge(t_lo), edge(t_hi));
        let mut dphi = e1.im - e0.im;
        dphi -= (dphi / std::f64::consts::TAU).round() * std::f64::consts::TAU;
        let lin = Complex64::new((1.0 - t) * e0.re + t * e1.re, e0.im + t * dphi);
        let b = smooth_step(t / BLEND_TAU) * smooth_step((1.0 - t) / BLEND_TAU);
        if b == 1.0 {
            return lin.exp();
        }
        let mut own = q.eval(l1, l2).ln();
        own.im += ((lin.im - own.im) / std::f64::consts::TAU).round() * std::f64::consts::TAU;
        ((1.0 - b) * own + b * lin).exp()
    }))
}

#[derive(Clone, Debug, Serialize)]
pub struct QuasiInverseReport {
    pub a: f64,
    /// inf over spectrum pairs of |λ1 − aλ2| / (λ1 + λ2).
    pub inf_ratio: f64,
    pub witness: (f64, f64),
    /// ‖(Δ1 − aΔ2)^{−1}‖ = 1 / min |λ1 − aλ2|.
    pub inverse_norm: f64,
    pub min_abs: f64,
}

pub fn quasi_inverse_check(a: f64, pb: &ProductBasis) -> QuasiInverseReport {
    let mut inf = (f64::INFINITY, (f64::NAN, f64::NAN));
    let mut min_abs = f64::INFINITY;
    for &q in &pb.pairs {
        let (x, y) = pb.lambda(q);
        let v = (x - a * y).abs();
        min_abs = min_abs.min(v);
        let r = v / (x + y);
        if r < inf.0 {
            inf = (r, (x, y));
        }
    }
    QuasiInverseReport { a, inf_ratio: inf.0, witness: inf.1, inverse_norm: 1.0 / min_abs, min_abs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build, FractalKind};
    use crate::psido::apply;
    use crate::spectral::{eigensolve, ratio_gaps, BoundaryCondition};
    use crate::symbol::{ratio, riesz_i, Symbol};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn factor(level: usize) -> Arc<EigenBasis> {
        Arc::new(eigensolve(&build(FractalKind::Gasket, level).unwrap(), BoundaryCondition::Dirichlet).unwrap())
    }

    fn random_u(pb: &ProductBasis, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = DMatrix::from_fn(pb.l1.len(), pb.l2.len(), |_, _| rng.gen_range(-1.0..1.0));
        pb.synthesize(&c)
    }

    #[test]
    fn counts_order_and_orthonormality() {
        let (b1, b2) = (factor(2), factor(3));
        let pb = product_basis(b1.clone(), b2.clone()).unwrap();
        assert_eq!(pb.len(), b1.len() * b2.len());
        assert!(pb.pairs.windows(2).all(|w| {
            let (a, b) = (pb.lambda(w[0]), pb.lambda(w[1]));
            a.0 + a.1 <= b.0 + b.1
        }));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let p = pb.pairs[rng.gen_range(0..pb.len())];
            let q = pb.pairs[rng.gen_range(0..pb.len())];
            let ip = pb.inner(&pb.phi(p), &pb.phi(q));
            assert!((ip - if p == q { 1.0 } else { 0.0 }).abs() < 1e-10);
        }
        assert!(product_basis_capped(b1, b2, 10).is_err());
    }

    #[test]
    fn parseval() {
        let pb = product_basis(factor(2), factor(2)).unwrap();
        let u = random_u(&pb, 1);
        let c = pb.coefficients(&u);
        assert!((c.norm_squared() - pb.inner(&u, &u)).abs() < 1e-10);
        assert!((&pb.synthesize(&c) - &u).amax() < 1e-12);
    }

    #[test]
    fn separable_and_riesz_identity() {
        let pb = product_basis(factor(2), factor(3)).unwrap();
        let u = random_u(&pb, 2);
        let f = ratio();
        let g = Symbol::real("1/(1+l)", 0.0, |l| 1.0 / (1.0 + l));
        let sep = apply2(&Symbol2::separable(&f, &g), &pb, &u).unwrap();
        // factorwise: apply f along x1 columns then g along x2 rows
        let mut step = u.clone();
        for j in 0..u.ncols() {
            let col: Vec<f64> = u.column(j).iter().copied().collect();
            let out = apply(&f, &pb.b1, &col).unwrap();
            for i in 0..u.nrows() {
                step[(i, j)] = out[i].re;
            }
        }
        let mut both = step.clone();
        for i in 0..u.nrows() {
            let row: Vec<f64> = step.row(i).iter().copied().collect();
            let out = apply(&g, &pb.b2, &row).unwrap();
            for j in 0..u.ncols() {
                both[(i, j)] = out[j].re;
            }
        }
        assert!((&sep.re - &both).amax() < 1e-11);
        let s = apply2(&riesz_i(1), &pb, &u).unwrap().re + apply2(&riesz_i(2), &pb, &u).unwrap().re;
        assert!((&s - &u).amax() < 1e-12);
    }

    #[test]
    fn two_variable_calculus_and_kernel() {
        let pb = product_basis(factor(2), factor(2)).unwrap();
        let u = random_u(&pb, 3);
        let p = riesz_i(1);
        let q = Symbol2::new("phase", 0.0, |a, b| Complex64::new(0.0, (1.0 + a + b).ln()).exp());
        let lhs = apply2_complex(&p, &pb, &apply2(&q, &pb, &u).unwrap()).unwrap();
        let rhs = apply2(&p.product(&q), &pb, &u).unwrap();
        assert!(lhs.max_diff(&rhs) < 1e-12 * rhs.amax());
        let k = kernel2(&q, &pb).unwrap();
        let via = k.integrate(&u, pb.b1.mass(), pb.b2.mass());
        assert!(via.max_diff(&apply2(&q, &pb, &u).unwrap()) < 1e-9);
    }

    #[test]
    fn streamed_kernel_matches_dense() {
        let pb = product_basis(factor(1), factor(2)).unwrap();
        let q = Symbol2::new("phase", 0.0, |a, b| Complex64::new(0.0, (1.0 + a * b).ln()).exp());
        let k = kernel2(&q, &pb).unwrap();
        let mut buf = Vec::new();
        let h = write_kernel2(&q, &pb, "cfg", &mut buf).unwrap();
        assert!(h.complex && h.chunks == pb.shape().0);
        let (h2, re, im) = read_kernel2(&mut buf.as_slice()).unwrap();
        assert_eq!(h, h2);
        assert_eq!(re, k.re);
        assert_eq!(im, k.im);
    }

    #[test]
    fn marcinkiewicz_examples() {
        let g = dyadic_grid(0.5, 2e3, 2);
        let r = verify_marcinkiewicz(&riesz_i(1), 0.0, 2, &g, &g, 1.5).unwrap();
        assert!(r.passes, "{r:?}");
        let one = verify_marcinkiewicz(&Symbol2::real("1", 0.0, |_, _| 1.0), 0.0, 2, &g, &g, 1.5).unwrap();
        assert!(one.constants.iter().filter(|c| c.0 + c.1 > 0).all(|c| c.2 < 1e-9));
        let mixed = Symbol2::real("l1l2", 0.0, |a, b| a * b / (1.0 + a + b).powi(2));
        let r = verify_marcinkiewicz(&mixed, 0.0, 2, &g, &g, 1.5).unwrap();
        assert!(r.passes);
        // closed form: (λ1 ∂1)(λ2 ∂2) p at λ1 = λ2 = 1 where p = ab/(1+a+b)^2
        let s = mixed.scaled_derivatives(1.0, 1.0, 1);
        // ∂a∂b [ab(1+a+b)^-2] = (1+a+b)^-2 - 2(a+b)(1+a+b)^-3 + 6ab(1+a+b)^-4
        let want = 1.0 / 9.0 - 4.0 / 27.0 + 6.0 / 81.0;
        assert!((s[1][1].re - want).abs() < 1e-8);
        assert!(!verify_marcinkiewicz(&Symbol2::real("sum", 0.0, |a, b| a + b), 0.0, 1, &g, &g, 1.5).unwrap().passes);
    }

    #[test]
    fn gap_cone_examples() {
        let cones = gap_cones_from_spectra(&[1.0, 10.0], &[1.0, 10.0], 0.0, None);
        assert_eq!(cones.len(), 2);
        assert_eq!(cones[1], ConeSpec::from_ratios(1.0, 10.0).unwrap());
        let dense: Vec<f64> = (1..=20).map(|i| i as f64).collect();
        assert!(gap_cones_from_spectra(&dense, &dense, 0.11, None).is_empty());

        let b = factor(3);
        let pb = product_basis(b.clone(), b.clone()).unwrap();
        let cones = gap_cones(&pb, 0.05).unwrap();
        let above: Vec<(f64, f64)> = cones.iter().filter(|c| c.lo() >= 1.0 - 1e-12).map(|c| (c.lo(), c.hi())).collect();
        let (_, whi) = resolved_ratio_window(&pb.l1, &pb.l2).unwrap();
        let spectral: Vec<(f64, f64)> =
            ratio_gaps(b.active_eigenvalues(), 0.05).gaps.iter().filter(|g| g.beta <= whi).map(|g| (g.alpha, g.beta)).collect();
        assert!(!spectral.is_empty());
        // mirrored below 1
        let below = cones.iter().filter(|c| c.hi() <= 1.0 + 1e-12).count();
        assert_eq!(below, above.len());
        assert_eq!(above.len(), spectral.len());
        for (x, y) in above.iter().zip(&spectral) {
            assert!((x.0 - y.0).abs() < 1e-9 * y.0 && (x.1 - y.1).abs() < 1e-9 * y.1);
        }
        for c in &cones {
            for &q in &pb.pairs {
                let (x, y) = pb.lambda(q);
                assert!(!c.contains(x, y), "{c:?} contains ratio {}", x / y);
            }
        }
    }

    #[test]
    fn elliptic_examples() {
        let d = 1.5;
        let grid = EllipticGrid::new(1.0, 1e4, &[]).unwrap();
        let sum = Symbol2::real("l1+l2", d + 1.0, |a, b| a + b);
        let r = elliptic_check(&sum, d + 1.0, &grid, d);
        assert!(r.passes && r.c >= 1.0 - 1e-12);
        let diff = Symbol2::real("l1-l2", d + 1.0, |a, b| a - b);
        assert!(!elliptic_check(&diff, d + 1.0, &grid, d).passes);
    }

    #[test]
    fn extension_of_elliptic_symbol_is_identity_outside() {
        let d = 1.5;
        let cone = ConeSpec::new(2.0, 0.5).unwrap();
        let grid = EllipticGrid::new(1.0, 1e3, &[cone.a]).unwrap();
        let sum = Symbol2::real("l1+l2", d + 1.0, |a, b| a + b);
        let ext = elliptic_extension(&sum, d + 1.0, cone, 1.0, &grid, d).unwrap();
        for (x, y) in grid.points().filter(|&(x, y)| !cone.contains(x, y)) {
            let (a, b) = (ext.eval(x, y), sum.eval(x, y));
            assert!((a - b).norm() <= 1e-12 * b.norm(), "({x}, {y})");
        }
        assert!(elliptic_check(&ext, d + 1.0, &grid, d).passes);
    }

    #[test]
    fn extension_fills_a_cone_where_the_symbol_vanishes() {
        let d = 1.5;
        let cone = ConeSpec::new(1.0, 0.4).unwrap();
        let grid = EllipticGrid::new(1.0, 1e3, &[cone.a, cone.lo(), cone.hi()]).unwrap();
        let diff = Symbol2::real("l1-l2", d + 1.0, |a, b| a - b);
        assert!(!elliptic_check(&diff, d + 1.0, &grid, d).passes);
        assert!(elliptic_check_outside(&diff, d + 1.0, &grid, &cone, d).passes);
        let ext = elliptic_extension(&diff, d + 1.0, cone, 1.0, &grid, d).unwrap();
        let r = elliptic_check(&ext, d + 1.0, &grid, d);
        assert!(r.passes, "{r:?}");
        assert!(ext.eval(3.0, 3.0).norm() > 0.0);
    }

    #[test]
    fn quasielliptic_pipeline_on_neumann_factors() {
        let b = Arc::new(eigensolve(&build(FractalKind::Gasket, 3).unwrap(), BoundaryCondition::Neumann).unwrap());
        let pb = product_basis(b.clone(), b.clone()).unwrap();
        let u = random_u(&pb, 4);
        let s = apply2(&riesz_i(1), &pb, &u).unwrap().re + apply2(&riesz_i(2), &pb, &u).unwrap().re;
        assert!((&s - &u).amax() < 1e-12);

        let w = widest_cone(&gap_cones(&pb, 0.0).unwrap()).unwrap();
        let q = quasi_inverse_check(w.a, &pb);
        assert!(q.inf_ratio > 0.0 && (q.inverse_norm * q.min_abs - 1.0).abs() < 1e-15);
        let (x, y) = pb.lambda(pb.pairs[7]);
        let hit = quasi_inverse_check(x / y, &pb);
        assert!(hit.inf_ratio < 1e-14);

        let d = b.d;
        let a = w.a;
        let p = Symbol2::real("l1-a*l2", d + 1.0, move |x, y| x - a * y);
        let grid = EllipticGrid::new(pb.l1[0], 2f64.sqrt() * pb.l1[pb.l1.len() - 1], &[w.a, w.lo(), w.hi()]).unwrap();
        assert!(!elliptic_check(&p, d + 1.0, &grid, d).passes);
        assert!(elliptic_check_spectrum(&p, d + 1.0, pb.l1[0], &pb).passes);
        let ext = elliptic_extension(&p, d + 1.0, w, pb.l1[0], &grid, d).unwrap();
        assert!(elliptic_check(&ext, d + 1.0, &grid, d).passes);
        let (e1, e2) = (apply2(&ext, &pb, &u).unwrap(), apply2(&p, &pb, &u).unwrap());
        assert!(e1.max_diff(&e2) <= 1e-12 * e2.amax());
    }
}
