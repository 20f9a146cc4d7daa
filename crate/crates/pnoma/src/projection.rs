//! User-specific projection codebooks over the shared channel.
//!
//! Each of the `n` users owns a pair of matrices: an encoder-side projection
//! `m x nm` that spreads its latent filters across the full channel, and the
//! matching decoder-side back-projection `nm x m`. Pairs are initialized
//! complex (identity for a single user) but stored and trained as real
//! block matrices, so the optimizer sees plain unconstrained parameters.
//!
//! Growing from `n/2` to `n` users samples one Haar-random unitary, splits
//! its rows into two orthonormal halves, and composes every existing pair
//! with one half. Row orthonormality preserves transmit power, and the two
//! halves annihilate each other, so at handoff the two user groups do not
//! interfere at all — fine-tuning starts from exact time-sharing behavior.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::numcore::{RngStream, Tape, Tensor, Var};

/// Diagonal magnitudes below this trigger a fresh QR draw.
const QR_BREAKDOWN: f64 = 1e-12;

/// Dense row-major complex matrix (plain values, not graph-resident).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ComplexMatrix { rows, cols, data: vec![Complex64::new(0.0, 0.0); rows * cols] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = ComplexMatrix::zeros(dim, dim);
        for i in 0..dim {
            m.data[i * dim + i] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: Complex64) {
        self.data[r * self.cols + c] = v;
    }

    /// Matrix product.
    pub fn matmul(&self, other: &ComplexMatrix) -> Result<ComplexMatrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "complex_matmul",
                format!("{}x{} times {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = ComplexMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for p in 0..self.cols {
                let a = self.data[i * self.cols + p];
                if a == Complex64::new(0.0, 0.0) {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.data[p * other.cols + j];
                }
            }
        }
        Ok(out)
    }

    /// Conjugate transpose.
    pub fn dagger(&self) -> ComplexMatrix {
        let mut out = ComplexMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j].conj();
            }
        }
        out
    }

    /// Copy of a half-open row range.
    pub fn row_block(&self, from: usize, to: usize) -> ComplexMatrix {
        assert!(from < to && to <= self.rows, "row block [{from}, {to}) of {}", self.rows);
        ComplexMatrix {
            rows: to - from,
            cols: self.cols,
            data: self.data[from * self.cols..to * self.cols].to_vec(),
        }
    }

    /// Largest entry magnitude of `self * self^H - I` (0 for unitary rows).
    pub fn row_orthonormality_defect(&self) -> f64 {
        let gram = self.matmul(&self.dagger()).expect("dimensions match");
        let mut worst = 0.0_f64;
        for i in 0..gram.rows {
            for j in 0..gram.cols {
                let expect = if i == j { Complex64::new(1.0, 0.0) } else { Complex64::new(0.0, 0.0) };
                worst = worst.max((gram.at(i, j) - expect).norm());
            }
        }
        worst
    }

    /// Largest entry magnitude.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

// ---------------------------------------------------------------------
// Haar-random unitaries
// ---------------------------------------------------------------------

/// Householder QR of a square complex matrix, returning `(Q, R)`.
pub(crate) fn householder_qr(m: &ComplexMatrix) -> (ComplexMatrix, ComplexMatrix) {
    assert_eq!(m.rows, m.cols, "QR restricted to square inputs here");
    let d = m.rows;
    let mut a = m.clone();
    let mut q = ComplexMatrix::identity(d);

    for k in 0..d {
        // Column segment x = A[k.., k].
        let mut norm_sq = 0.0;
        for i in k..d {
            norm_sq += a.at(i, k).norm_sqr();
        }
        let norm_x = norm_sq.sqrt();
        if norm_x == 0.0 {
            continue; // column already zero; diagonal stays 0 (breakdown upstream)
        }
        let x0 = a.at(k, k);
        let beta = if x0.norm() > 0.0 { x0 / x0.norm() } else { Complex64::new(1.0, 0.0) };
        let alpha = beta * norm_x;

        // v = x + alpha e1, reflector P = I - tau v v^H with tau = 2/||v||^2.
        let mut v = vec![Complex64::new(0.0, 0.0); d - k];
        for i in k..d {
            v[i - k] = a.at(i, k);
        }
        v[0] += alpha;
        let vnorm_sq: f64 = v.iter().map(|c| c.norm_sqr()).sum();
        if vnorm_sq == 0.0 {
            continue;
        }
        let tau = 2.0 / vnorm_sq;

        // A[k.., j] -= tau * (v^H A[k.., j]) * v for all columns j >= k.
        for j in k..d {
            let mut w = Complex64::new(0.0, 0.0);
            for i in k..d {
                w += v[i - k].conj() * a.at(i, j);
            }
            let wt = w * tau;
            for i in k..d {
                let updated = a.at(i, j) - wt * v[i - k];
                a.set(i, j, updated);
            }
        }
        // Q[:, k..] -= tau * (Q[:, k..] v) * v^H (accumulate Q <- Q P).
        for i in 0..d {
            let mut w = Complex64::new(0.0, 0.0);
            for j in k..d {
                w += q.at(i, j) * v[j - k];
            }
            let wt = w * tau;
            for j in k..d {
                let updated = q.at(i, j) - wt * v[j - k].conj();
                q.set(i, j, updated);
            }
        }
        // The reflector maps x to -alpha e1; pin the column exactly.
        a.set(k, k, -alpha);
        for i in (k + 1)..d {
            a.set(i, k, Complex64::new(0.0, 0.0));
        }
    }
    (q, a)
}

/// Samples a `dim x dim` unitary from the Haar (rotation-invariant) measure.
///
/// Draws a complex Gaussian matrix (each real component `N(0, 1/(2 dim))`),
/// takes its QR factorization, and applies the diagonal phase correction
/// `Q <- Q diag(r_ii / |r_ii|)` that makes the factorization unique — plain
/// QR alone is biased. A (vanishingly unlikely) near-zero diagonal entry
/// triggers a fresh draw.
pub fn sample_haar_unitary(dim: usize, stream: &mut RngStream) -> Result<ComplexMatrix> {
    assert!(dim > 0, "unitary dimension must be positive");
    let comp_std = (1.0 / (2.0 * dim as f64)).sqrt();
    for _attempt in 0..16 {
        let mut m = ComplexMatrix::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                m.set(
                    i,
                    j,
                    Complex64::new(stream.normal(0.0, comp_std), stream.normal(0.0, comp_std)),
                );
            }
        }
        let (mut q, r) = householder_qr(&m);
        if (0..dim).any(|i| r.at(i, i).norm() < QR_BREAKDOWN) {
            continue; // rank-deficient draw; resample
        }
        for j in 0..dim {
            let phase = r.at(j, j) / r.at(j, j).norm();
            for i in 0..dim {
                let v = q.at(i, j) * phase;
                q.set(i, j, v);
            }
        }
        return Ok(q);
    }
    Err(Error::numeric("sample_haar_unitary", "repeated QR breakdown; RNG stream suspect"))
}

// ---------------------------------------------------------------------
// realification
// ---------------------------------------------------------------------

/// Real block form of a complex matrix: `P = A + iB` becomes
/// `[[A, B], [-B, A]]`, so row-vector complex multiplication `z P` matches
/// `(Re z | Im z) . realify(P)`.
pub fn realify(p: &ComplexMatrix) -> Tensor {
    let (r, c) = (p.rows, p.cols);
    let mut out = Tensor::zeros(&[2 * r, 2 * c]);
    for i in 0..r {
        for j in 0..c {
            let v = p.at(i, j);
            out.set2(i, j, v.re);
            out.set2(i, c + j, v.im);
            out.set2(r + i, j, -v.im);
            out.set2(r + i, c + j, v.re);
        }
    }
    out
}

/// Inverse of [`realify`]; rejects tensors that lack the block structure.
pub fn complexify(t: &Tensor) -> Result<ComplexMatrix> {
    let s = t.shape();
    if s.len() != 2 || s[0] % 2 != 0 || s[1] % 2 != 0 {
        return Err(Error::shape("complexify", format!("shape {s:?} is not 2r x 2c")));
    }
    let (r, c) = (s[0] / 2, s[1] / 2);
    let mut out = ComplexMatrix::zeros(r, c);
    for i in 0..r {
        for j in 0..c {
            let a = t.at2(i, j);
            let b = t.at2(i, c + j);
            if (t.at2(r + i, c + j) - a).abs() > 1e-9 || (t.at2(r + i, j) + b).abs() > 1e-9 {
                return Err(Error::numeric(
                    "complexify",
                    format!("block structure broken at ({i}, {j}); matrix is not a realified complex matrix"),
                ));
            }
            out.set(i, j, Complex64::new(a, b));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// codebook
// ---------------------------------------------------------------------

/// One user's encoder/decoder projection pair in trained (real) form.
#[derive(Debug, Clone)]
pub struct ProjectionPair {
    /// `[2m, 2nm]`: right-multiplies each spatial position's latent vector.
    pub enc: Tensor,
    /// `[2nm, 2m]`: right-multiplies each received position's vector.
    pub dec: Tensor,
    /// Single-user identity pairs stay frozen; composed pairs train.
    pub trainable: bool,
}

/// Projection pairs for all current users plus the doubling history.
#[derive(Debug, Clone)]
pub struct CodebookState {
    pub n: usize,
    pub m: usize,
    pub pairs: Vec<ProjectionPair>,
    /// One `nm x nm` unitary per doubling, in growth order; their row halves
    /// are the per-group bases used for matched validation noise.
    pub stage_bases: Vec<ComplexMatrix>,
}

impl CodebookState {
    /// Sanity-checks counts and dimensions.
    pub fn validate(&self) -> Result<()> {
        if self.pairs.len() != self.n {
            return Err(Error::Config(format!(
                "{} pairs for {} users",
                self.pairs.len(),
                self.n
            )));
        }
        let (rows, cols) = (2 * self.m, 2 * self.n * self.m);
        for (i, p) in self.pairs.iter().enumerate() {
            if p.enc.shape() != [rows, cols] || p.dec.shape() != [cols, rows] {
                return Err(Error::shape(
                    "codebook",
                    format!(
                        "user {i}: enc {:?} dec {:?}, expected [{rows}, {cols}] / [{cols}, {rows}]",
                        p.enc.shape(),
                        p.dec.shape()
                    ),
                ));
            }
        }
        if self.n.count_ones() != 1 {
            return Err(Error::Config(format!("user count {} is not a power of two", self.n)));
        }
        if self.stage_bases.len() != self.n.trailing_zeros() as usize {
            return Err(Error::Config(format!(
                "{} stage bases for n = {}",
                self.stage_bases.len(),
                self.n
            )));
        }
        Ok(())
    }
}

/// Trainable real parameters contributed by the projections.
///
/// A single user keeps frozen identity pairs (nothing to train); `n > 1`
/// contributes `n` pairs of `2m x 2nm` plus `2nm x 2m` real matrices, i.e.
/// `8 n^2 m^2` scalars.
pub fn projection_param_count(n: usize, m: usize) -> usize {
    if n <= 1 {
        0
    } else {
        8 * n * n * m * m
    }
}

/// Single-user codebook: frozen identity projections.
pub fn init_single_user(m: usize) -> CodebookState {
    assert!(m > 0, "latent filter count must be positive");
    let ident = realify(&ComplexMatrix::identity(m));
    CodebookState {
        n: 1,
        m,
        pairs: vec![ProjectionPair { enc: ident.clone(), dec: ident, trainable: false }],
        stage_bases: Vec::new(),
    }
}

/// Doubles the user count by composing every pair with the two orthonormal
/// row halves of a fresh Haar unitary.
///
/// Users `0..n` inherit pair `i` composed with the first half, users
/// `n..2n` inherit pair `i` composed with the second; the halves satisfy
/// `K1 K2^H = 0`, so the two groups start with exactly zero cross-talk.
pub fn double(state: &CodebookState, stream: &mut RngStream) -> Result<CodebookState> {
    state.validate()?;
    let n_new = state.n * 2;
    let dim = n_new * state.m;
    let q = sample_haar_unitary(dim, stream)?;
    let half = state.n * state.m;
    let k1 = q.row_block(0, half);
    let k2 = q.row_block(half, dim);

    let rk1 = realify(&k1);
    let rk2 = realify(&k2);
    let rk1_t = rk1.transposed2()?; // realify(K1^H)
    let rk2_t = rk2.transposed2()?;

    let mut pairs = Vec::with_capacity(n_new);
    for pair in &state.pairs {
        pairs.push(ProjectionPair {
            enc: pair.enc.matmul2(&rk1)?,
            dec: rk1_t.matmul2(&pair.dec)?,
            trainable: true,
        });
    }
    for pair in &state.pairs {
        pairs.push(ProjectionPair {
            enc: pair.enc.matmul2(&rk2)?,
            dec: rk2_t.matmul2(&pair.dec)?,
            trainable: true,
        });
    }

    let mut stage_bases = state.stage_bases.clone();
    stage_bases.push(q);
    Ok(CodebookState { n: n_new, m: state.m, pairs, stage_bases })
}

// ---------------------------------------------------------------------
// graph application
// ---------------------------------------------------------------------

/// Applies an encoder-side projection to a `[2m, h, w]` latent block:
/// every spatial position's `2m`-vector is right-multiplied by `enc`.
pub fn apply_enc(tape: &mut Tape, enc: Var, latent: Var) -> Result<Var> {
    let ls = tape.value(latent).shape().to_vec();
    let es = tape.value(enc).shape().to_vec();
    if ls.len() != 3 || es.len() != 2 || es[0] != ls[0] {
        return Err(Error::shape(
            "apply_enc",
            format!("latent {ls:?} vs projection {es:?}"),
        ));
    }
    let (h, w) = (ls[1], ls[2]);
    let flat = tape.reshape(latent, &[ls[0], h * w])?;
    let projected = tape.matmul_tn(enc, flat)?; // enc^T . columns == rows . enc
    tape.reshape(projected, &[es[1], h, w])
}

/// Applies a decoder-side back-projection to a `[2nm, h, w]` received block.
pub fn apply_dec(tape: &mut Tape, dec: Var, received: Var) -> Result<Var> {
    apply_enc(tape, dec, received)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::RngStream;

    fn random_complex(rows: usize, cols: usize, stream: &mut RngStream) -> ComplexMatrix {
        let mut m = ComplexMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, Complex64::new(stream.normal(0.0, 1.0), stream.normal(0.0, 1.0)));
            }
        }
        m
    }

    #[test]
    fn test_qr_reconstructs_and_triangularizes() {
        let mut stream = RngStream::new(21, 1);
        let m = random_complex(6, 6, &mut stream);
        let (q, r) = householder_qr(&m);
        assert!(q.row_orthonormality_defect() < 1e-12, "Q not unitary");
        // R strictly upper triangular below the diagonal.
        for i in 0..6 {
            for j in 0..i {
                assert!(r.at(i, j).norm() < 1e-12, "R({i},{j}) = {:?}", r.at(i, j));
            }
        }
        // Q R == M.
        let qr = q.matmul(&r).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert!((qr.at(i, j) - m.at(i, j)).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn test_qr_flags_rank_deficiency_on_diagonal() {
        // Two identical columns force a ~zero diagonal entry.
        let mut stream = RngStream::new(22, 1);
        let mut m = random_complex(4, 4, &mut stream);
        for i in 0..4 {
            let v = m.at(i, 0);
            m.set(i, 2, v);
        }
        let (_q, r) = householder_qr(&m);
        let min_diag = (0..4).map(|i| r.at(i, i).norm()).fold(f64::INFINITY, f64::min);
        assert!(min_diag < 1e-12, "expected a collapsed diagonal, min {min_diag}");
    }

    #[test]
    fn test_haar_unitary_is_unitary() {
        let mut stream = RngStream::new(23, 1);
        for dim in [2, 3, 8, 16] {
            let q = sample_haar_unitary(dim, &mut stream).unwrap();
            assert!(
                q.row_orthonormality_defect() < 1e-10,
                "dim {dim}: defect {}",
                q.row_orthonormality_defect()
            );
        }
    }

    #[test]
    fn test_haar_entry_means_vanish() {
        // Rotation invariance forces zero-mean entries; 1e4 draws at dim 2
        // pin each component mean within 0.02.
        let mut stream = RngStream::new(24, 1);
        let dim = 2;
        let reps = 10_000;
        let mut sums = vec![0.0; dim * dim * 2];
        for _ in 0..reps {
            let q = sample_haar_unitary(dim, &mut stream).unwrap();
            for i in 0..dim {
                for j in 0..dim {
                    sums[2 * (i * dim + j)] += q.at(i, j).re;
                    sums[2 * (i * dim + j) + 1] += q.at(i, j).im;
                }
            }
        }
        for (idx, s) in sums.iter().enumerate() {
            let mean = s / reps as f64;
            assert!(mean.abs() < 0.02, "component {idx} mean {mean}");
        }
    }

    #[test]
    fn test_realify_matches_complex_product() {
        // (Re z | Im z) . realify(P) == realified z P for random z, P.
        let mut stream = RngStream::new(25, 1);
        let p = random_complex(3, 5, &mut stream);
        let rp = realify(&p);
        let z: Vec<Complex64> = (0..3)
            .map(|_| Complex64::new(stream.normal(0.0, 1.0), stream.normal(0.0, 1.0)))
            .collect();

        // complex product
        let mut zp = vec![Complex64::new(0.0, 0.0); 5];
        for (i, zi) in z.iter().enumerate() {
            for j in 0..5 {
                zp[j] += zi * p.at(i, j);
            }
        }
        // realified product
        let mut zr = Tensor::zeros(&[1, 6]);
        for i in 0..3 {
            zr.set2(0, i, z[i].re);
            zr.set2(0, 3 + i, z[i].im);
        }
        let out = zr.matmul2(&rp).unwrap();
        for j in 0..5 {
            assert!((out.at2(0, j) - zp[j].re).abs() < 1e-12);
            assert!((out.at2(0, 5 + j) - zp[j].im).abs() < 1e-12);
        }
    }

    #[test]
    fn test_realify_complexify_roundtrip() {
        let mut stream = RngStream::new(26, 1);
        let p = random_complex(4, 6, &mut stream);
        let back = complexify(&realify(&p)).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                assert!((back.at(i, j) - p.at(i, j)).norm() < 1e-15);
            }
        }
        // A generic real matrix is rejected.
        let mut broken = realify(&p);
        broken.set2(0, 0, broken.at2(0, 0) + 0.5);
        assert!(complexify(&broken).is_err());
    }

    #[test]
    fn test_realified_dagger_is_transpose() {
        let mut stream = RngStream::new(27, 1);
        let p = random_complex(3, 4, &mut stream);
        let lhs = realify(&p.dagger());
        let rhs = realify(&p).transposed2().unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-15);
    }

    #[test]
    fn test_single_user_codebook_is_frozen_identity() {
        let cb = init_single_user(4);
        cb.validate().unwrap();
        assert_eq!(cb.n, 1);
        assert!(!cb.pairs[0].trainable);
        let ident = realify(&ComplexMatrix::identity(4));
        assert!(cb.pairs[0].enc.max_abs_diff(&ident) == 0.0);
        assert!(cb.pairs[0].dec.max_abs_diff(&ident) == 0.0);
        assert_eq!(projection_param_count(1, 4), 0);
    }

    #[test]
    fn test_double_shapes_counts_and_trainability() {
        let mut stream = RngStream::new(28, 1);
        let cb1 = init_single_user(4);
        let cb2 = double(&cb1, &mut stream).unwrap();
        cb2.validate().unwrap();
        assert_eq!(cb2.n, 2);
        assert_eq!(cb2.pairs.len(), 2);
        assert!(cb2.pairs.iter().all(|p| p.trainable));
        assert_eq!(cb2.pairs[0].enc.shape(), &[8, 16]);
        assert_eq!(cb2.pairs[0].dec.shape(), &[16, 8]);
        let total: usize =
            cb2.pairs.iter().map(|p| p.enc.len() + p.dec.len()).sum();
        assert_eq!(total, projection_param_count(2, 4));
    }

    #[test]
    fn test_param_count_table() {
        // m = 8 and m = 4 at n = 2, 4, 8, 16.
        let expect_m8 = [2048, 8192, 32768, 131072];
        let expect_m4 = [512, 2048, 8192, 32768];
        for (i, n) in [2usize, 4, 8, 16].iter().enumerate() {
            assert_eq!(projection_param_count(*n, 8), expect_m8[i]);
            assert_eq!(projection_param_count(*n, 4), expect_m4[i]);
        }
    }

    #[test]
    fn test_doubling_halves_annihilate() {
        // K1 K2^H = 0 and the realified version likewise.
        let mut stream = RngStream::new(29, 1);
        let q = sample_haar_unitary(8, &mut stream).unwrap();
        let k1 = q.row_block(0, 4);
        let k2 = q.row_block(4, 8);
        let cross = k1.matmul(&k2.dagger()).unwrap();
        assert!(cross.max_abs() < 1e-12, "complex cross-talk {}", cross.max_abs());
        let rcross = realify(&k1).matmul2(&realify(&k2).transposed2().unwrap()).unwrap();
        let zero = Tensor::zeros(&[8, 8]);
        assert!(rcross.max_abs_diff(&zero) < 1e-12);
    }

    #[test]
    fn test_composed_pairs_keep_row_orthonormality() {
        // After two doublings every init pair still has P P^H = I.
        let mut stream = RngStream::new(30, 1);
        let cb = double(&double(&init_single_user(4), &mut stream).unwrap(), &mut stream).unwrap();
        for (i, pair) in cb.pairs.iter().enumerate() {
            let p = complexify(&pair.enc).unwrap();
            let defect = p.row_orthonormality_defect();
            assert!(defect < 1e-10, "user {i}: defect {defect}");
        }
    }

    #[test]
    fn test_cross_group_products_vanish_after_two_doublings() {
        let mut stream = RngStream::new(31, 1);
        let cb = double(&double(&init_single_user(2), &mut stream).unwrap(), &mut stream).unwrap();
        assert_eq!(cb.n, 4);
        // Groups {0,1} vs {2,3} split on the last doubling.
        for i in 0..2 {
            for j in 2..4 {
                let pi = complexify(&cb.pairs[i].enc).unwrap();
                let pj = complexify(&cb.pairs[j].enc).unwrap();
                let cross = pi.matmul(&pj.dagger()).unwrap();
                assert!(
                    cross.max_abs() < 1e-12,
                    "users {i},{j}: cross magnitude {}",
                    cross.max_abs()
                );
            }
        }
    }

    #[test]
    fn test_dec_is_enc_adjoint_at_init() {
        let mut stream = RngStream::new(32, 1);
        let cb = double(&init_single_user(3), &mut stream).unwrap();
        for pair in &cb.pairs {
            let diff = pair.dec.max_abs_diff(&pair.enc.transposed2().unwrap());
            assert!(diff < 1e-12, "dec != enc^T at init: {diff}");
        }
    }

    #[test]
    fn test_power_preserved_under_init_projection() {
        // Row-orthonormal projections preserve vector norms.
        let mut stream = RngStream::new(33, 1);
        let cb = double(&init_single_user(4), &mut stream).unwrap();
        let mut z = Tensor::zeros(&[1, 8]);
        for j in 0..8 {
            z.set2(0, j, stream.normal(0.0, 1.0));
        }
        let zp = z.matmul2(&cb.pairs[0].enc).unwrap();
        let n0: f64 = z.data().iter().map(|v| v * v).sum();
        let n1: f64 = zp.data().iter().map(|v| v * v).sum();
        assert!((n0 - n1).abs() / n0 < 1e-12, "norm changed: {n0} -> {n1}");
    }

    #[test]
    fn test_apply_enc_matches_per_pixel_product() {
        // Brute-force per-position complex multiply is the oracle.
        let mut stream = RngStream::new(34, 1);
        let m = 2;
        let nm = 4;
        let p = random_complex(m, nm, &mut stream);
        let rp = realify(&p);
        let (h, w) = (3, 2);
        let mut latent = Tensor::zeros(&[2 * m, h, w]);
        for idx in 0..latent.len() {
            latent.data_mut()[idx] = stream.normal(0.0, 1.0);
        }

        let mut tape = Tape::new();
        let enc = tape.leaf(rp, false).unwrap();
        let lv = tape.leaf(latent.clone(), false).unwrap();
        let out = apply_enc(&mut tape, enc, lv).unwrap();
        assert_eq!(tape.value(out).shape(), &[2 * nm, h, w]);

        let plane = h * w;
        for px in 0..plane {
            // Complex latent vector at this position: channel c pairs with c+m.
            let zc: Vec<Complex64> = (0..m)
                .map(|c| {
                    Complex64::new(latent.data()[c * plane + px], latent.data()[(c + m) * plane + px])
                })
                .collect();
            for f in 0..nm {
                let mut expect = Complex64::new(0.0, 0.0);
                for c in 0..m {
                    expect += zc[c] * p.at(c, f);
                }
                let got_re = tape.value(out).data()[f * plane + px];
                let got_im = tape.value(out).data()[(f + nm) * plane + px];
                assert!((got_re - expect.re).abs() < 1e-12, "px {px} f {f} re");
                assert!((got_im - expect.im).abs() < 1e-12, "px {px} f {f} im");
            }
        }
    }

    #[test]
    fn test_apply_dec_then_enc_identity_at_single_user() {
        let cb = init_single_user(3);
        let mut stream = RngStream::new(35, 1);
        let mut latent = Tensor::zeros(&[6, 2, 2]);
        for idx in 0..latent.len() {
            latent.data_mut()[idx] = stream.normal(0.0, 1.0);
        }
        let mut tape = Tape::new();
        let enc = tape.leaf(cb.pairs[0].enc.clone(), false).unwrap();
        let dec = tape.leaf(cb.pairs[0].dec.clone(), false).unwrap();
        let lv = tape.leaf(latent.clone(), false).unwrap();
        let fwd = apply_enc(&mut tape, enc, lv).unwrap();
        let back = apply_dec(&mut tape, dec, fwd).unwrap();
        assert!(tape.value(back).max_abs_diff(&latent) < 1e-14);
    }

    #[test]
    fn test_stage_bases_accumulate() {
        let mut stream = RngStream::new(36, 1);
        let cb1 = init_single_user(2);
        assert!(cb1.stage_bases.is_empty());
        let cb2 = double(&cb1, &mut stream).unwrap();
        assert_eq!(cb2.stage_bases.len(), 1);
        assert_eq!(cb2.stage_bases[0].rows(), 4);
        let cb4 = double(&cb2, &mut stream).unwrap();
        assert_eq!(cb4.stage_bases.len(), 2);
        assert_eq!(cb4.stage_bases[1].rows(), 8);
    }
}
