//! Eigen-analysis of the linear structural model.
//!
//! `K φ = λ M φ` is reduced to a standard symmetric problem through the
//! Cholesky factor of `M` and solved with cyclic Jacobi rotations. The
//! retained modes define the latent stiffness `Λ = diag(ω²)`, the latent
//! damping `Γ = diag(2ξω)`, and the decoder `Φ_p`.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::math::RealArray;

const SYMMETRY_TOL: f64 = 1e-10;
const JACOBI_TOL: f64 = 1e-14;
const JACOBI_MAX_SWEEPS: usize = 100;

/// `M ẍ + C ẋ + K x + n(x) = 0`, where the only nonlinear term is a cubic
/// spring force `k_n·x₁³` entering equation `cubic_row` (zero-based).
#[derive(Clone, Debug, PartialEq)]
pub struct StructuralSystem {
    pub mass: RealArray,
    pub damping: RealArray,
    pub stiffness: RealArray,
    pub cubic: f64,
    pub cubic_row: usize,
}

impl StructuralSystem {
    pub fn new(mass: RealArray, damping: RealArray, stiffness: RealArray, cubic: f64) -> Result<Self> {
        let g = mass.rows();
        for (name, m) in [("mass", &mass), ("damping", &damping), ("stiffness", &stiffness)] {
            if !m.is_matrix() || m.rows() != g || m.cols() != g {
                return Err(Error::Input(format!(
                    "{name} matrix has shape {:?}, expected [{g}, {g}]",
                    m.shape()
                )));
            }
            check_symmetric(m)?;
        }
        if !cubic.is_finite() {
            return Err(Error::Input("cubic coefficient must be finite".into()));
        }
        cholesky(&mass)?;
        Ok(Self {
            mass,
            damping,
            stiffness,
            cubic,
            cubic_row: 0,
        })
    }

    /// Moves the cubic force to another equation.
    pub fn with_cubic_row(mut self, row: usize) -> Result<Self> {
        if row >= self.dof() {
            return Err(Error::Input(format!(
                "cubic term row {row} outside a {}-DOF system",
                self.dof()
            )));
        }
        self.cubic_row = row;
        Ok(self)
    }

    /// The four-storey chain: masses 1..4, dampers 0.1, springs 1..4.
    pub fn frame_4dof(cubic: f64) -> Self {
        let m = [1.0, 2.0, 3.0, 4.0];
        let k = [1.0, 2.0, 3.0, 4.0];
        Self::chain(&m, &[0.1; 4], &k, cubic)
    }

    /// Fixed-free spring-mass chain with diagonal (grounded) dampers.
    pub fn chain(masses: &[f64], dampers: &[f64], springs: &[f64], cubic: f64) -> Self {
        let g = masses.len();
        assert!(dampers.len() == g && springs.len() == g && g > 0);
        let mut k = RealArray::zeros(&[g, g]);
        for i in 0..g {
            let below = springs[i];
            let above = if i + 1 < g { springs[i + 1] } else { 0.0 };
            k.set(i, i, below + above);
            if i + 1 < g {
                k.set(i, i + 1, -above);
                k.set(i + 1, i, -above);
            }
        }
        Self {
            mass: RealArray::diag(masses),
            damping: RealArray::diag(dampers),
            stiffness: k,
            cubic,
            cubic_row: 0,
        }
    }

    pub fn from_files(mass: &Path, damping: &Path, stiffness: &Path, cubic: f64) -> Result<Self> {
        Self::new(
            load_matrix_file(mass)?,
            load_matrix_file(damping)?,
            load_matrix_file(stiffness)?,
            cubic,
        )
    }

    pub fn dof(&self) -> usize {
        self.mass.rows()
    }

    /// Linear part only (the cubic term vanishes under linearization at 0).
    pub fn linearized(&self) -> Self {
        Self {
            cubic: 0.0,
            ..self.clone()
        }
    }
}

/// Whitespace-separated plain-text matrix, one row per line. Blank lines and
/// lines starting with `#` are ignored.
pub fn load_matrix_file(path: &Path) -> Result<RealArray> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix(&text, &path.display().to_string())
}

pub fn parse_matrix(text: &str, entry: &str) -> Result<RealArray> {
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| Error::Parse {
                    entry: format!("{entry}:{}", ln + 1),
                    reason: format!("not a number: {tok}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    RealArray::from_rows(&rows).map_err(|e| Error::Parse {
        entry: entry.to_string(),
        reason: e.to_string(),
    })
}

pub fn format_matrix(m: &RealArray) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

fn check_symmetric(a: &RealArray) -> Result<()> {
    let n = a.rows();
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            worst = worst.max((a.get(i, j) - a.get(j, i)).abs());
        }
    }
    let rel = worst / scale;
    if rel > SYMMETRY_TOL {
        return Err(Error::Asymmetric { asymmetry: rel });
    }
    Ok(())
}

/// Lower-triangular `L` with `A = L Lᵀ`.
pub fn cholesky(a: &RealArray) -> Result<RealArray> {
    let n = a.rows();
    if !a.is_matrix() || a.cols() != n {
        return Err(Error::dim("cholesky", a.shape(), a.shape()));
    }
    let mut l = RealArray::zeros(&[n, n]);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if !(d > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l.set(j, j, djj);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / djj);
        }
    }
    Ok(l)
}

/// Solves `L X = B` for lower-triangular `L`.
fn forward_substitute(l: &RealArray, b: &RealArray) -> RealArray {
    let (n, m) = (l.rows(), b.cols());
    let mut x = b.clone();
    for c in 0..m {
        for i in 0..n {
            let mut s = x.get(i, c);
            for k in 0..i {
                s -= l.get(i, k) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    x
}

/// Solves `Lᵀ X = B` for lower-triangular `L`.
fn backward_substitute_transposed(l: &RealArray, b: &RealArray) -> RealArray {
    let (n, m) = (l.rows(), b.cols());
    let mut x = b.clone();
    for c in 0..m {
        for i in (0..n).rev() {
            let mut s = x.get(i, c);
            for k in i + 1..n {
                s -= l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    x
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns unsorted eigenvalues and the orthogonal matrix of eigenvectors
/// (as columns).
pub fn jacobi_eigen(a: &RealArray) -> (Vec<f64>, RealArray) {
    let n = a.rows();
    let mut s = a.clone();
    let mut v = RealArray::identity(n);
    let frob = s.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| s.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= JACOBI_TOL * frob {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = s.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (s.get(q, q) - s.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let skp = s.get(k, p);
                    let skq = s.get(k, q);
                    s.set(k, p, c * skp - sn * skq);
                    s.set(k, q, sn * skp + c * skq);
                }
                for k in 0..n {
                    let spk = s.get(p, k);
                    let sqk = s.get(q, k);
                    s.set(p, k, c * spk - sn * sqk);
                    s.set(q, k, sn * spk + c * sqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - sn * vkq);
                    v.set(k, q, sn * vkp + c * vkq);
                }
            }
        }
    }
    ((0..n).map(|i| s.get(i, i)).collect(), v)
}

/// Ascending eigenvalues `λ` and mass-normalized eigenvectors (columns) of
/// `K φ = λ M φ`. In every column the entry of largest magnitude is positive.
pub fn solve_generalized_eigen(mass: &RealArray, stiffness: &RealArray) -> Result<(Vec<f64>, RealArray)> {
    let n = mass.rows();
    if !mass.is_matrix() || mass.cols() != n || stiffness.shape() != mass.shape() {
        return Err(Error::dim("generalized eigenproblem", mass.shape(), stiffness.shape()));
    }
    check_symmetric(mass)?;
    check_symmetric(stiffness)?;
    let l = cholesky(mass)?;
    // A = L⁻¹ K L⁻ᵀ
    let y = forward_substitute(&l, stiffness);
    let a = forward_substitute(&l, &y.transpose());
    let mut a_sym = a.clone();
    for i in 0..n {
        for j in 0..n {
            a_sym.set(i, j, 0.5 * (a.get(i, j) + a.get(j, i)));
        }
    }
    let (vals, vecs) = jacobi_eigen(&a_sym);
    let phi_all = backward_substitute_transposed(&l, &vecs);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| vals[i].total_cmp(&vals[j]).then(i.cmp(&j)));
    let mut phi = RealArray::zeros(&[n, n]);
    let mut lambdas = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        lambdas.push(vals[src]);
        let col = phi_all.column(src);
        let mut pivot = 0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for (i, v) in col.iter().enumerate() {
            phi.set(i, dst, sign * v);
        }
    }
    Ok((lambdas, phi))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalBasis {
    pub omegas: Vec<f64>,
    pub xis: Vec<f64>,
    /// `g × p`, mass-normalized mode shapes as columns.
    pub phi: RealArray,
    /// `diag(ω²)`
    pub lambda: RealArray,
    /// `diag(2ξω)`
    pub gamma: RealArray,
}

impl ModalBasis {
    pub fn modes(&self) -> usize {
        self.omegas.len()
    }

    pub fn dof(&self) -> usize {
        self.phi.rows()
    }

    pub fn lambda_diag(&self) -> Vec<f64> {
        (0..self.modes()).map(|i| self.lambda.get(i, i)).collect()
    }

    pub fn gamma_diag(&self) -> Vec<f64> {
        (0..self.modes()).map(|i| self.gamma.get(i, i)).collect()
    }

    /// Hex SHA-256 over the bit patterns of `Φ_p`.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in self.phi.shape() {
            h.update((*s as u64).to_le_bytes());
        }
        for v in self.phi.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Mass-weighted projection `q = Φᵀ M x`. Exact when all modes are kept.
    pub fn project(&self, mass: &RealArray, x: &[f64]) -> Result<Vec<f64>> {
        let mx = mass.matvec(&RealArray::from_vec(x))?;
        Ok(self.phi.transpose().matvec(&mx)?.into_data())
    }

    /// `Φ_p q`
    pub fn expand(&self, q: &[f64]) -> Result<Vec<f64>> {
        Ok(self.phi.matvec(&RealArray::from_vec(q))?.into_data())
    }
}

/// Retains the `p` lowest modes. `ξᵢ = (ΦᵀCΦ)ᵢᵢ / 2ωᵢ`; off-diagonal modal
/// damping terms are discarded.
pub fn build_modal_basis(sys: &StructuralSystem, p: usize) -> Result<ModalBasis> {
    let g = sys.dof();
    if p == 0 || p > g {
        return Err(Error::Input(format!("mode count {p} outside 1..={g}")));
    }
    let lin = sys.linearized();
    let (lambdas, phi_full) = solve_generalized_eigen(&lin.mass, &lin.stiffness)?;
    let scale = lambdas.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let phi = phi_full.slice_cols(0, p)?;
    let modal_c = phi.transpose().matmul(&lin.damping)?.matmul(&phi)?;

    let mut omegas = Vec::with_capacity(p);
    let mut xis = Vec::with_capacity(p);
    for i in 0..p {
        let lam = lambdas[i];
        if lam <= 1e-12 * scale.max(1.0) {
            return Err(Error::RigidBodyMode {
                mode: i,
                omega: lam.max(0.0).sqrt(),
            });
        }
        let w = lam.sqrt();
        omegas.push(w);
        xis.push(modal_c.get(i, i) / (2.0 * w));
    }
    let lambda = RealArray::diag(&lambdas[..p]);
    let gamma = RealArray::diag(&(0..p).map(|i| modal_c.get(i, i)).collect::<Vec<_>>());
    Ok(ModalBasis {
        omegas,
        xis,
        phi,
        lambda,
        gamma,
    })
}

/// Damping matrix whose modal projection is exactly `diag((ΦᵀCΦ)ᵢᵢ)`:
/// `M Φ diag(2ξω) Φᵀ M`. Requires a complete basis.
pub fn modal_damping_matrix(sys: &StructuralSystem, basis: &ModalBasis) -> Result<RealArray> {
    if basis.modes() != sys.dof() {
        return Err(Error::Input("modal damping matrix needs all modes".into()));
    }
    let mphi = sys.mass.matmul(&basis.phi)?;
    mphi.matmul(&basis.gamma)?.matmul(&mphi.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn diagonal_problem_is_trivial() {
        let (l, phi) = solve_generalized_eigen(&RealArray::identity(2), &RealArray::diag(&[1.0, 4.0])).unwrap();
        assert_eq!(l, vec![1.0, 4.0]);
        assert_eq!(phi, RealArray::identity(2));
    }

    #[test]
    fn two_by_two_golden_ratio_case() {
        let k = RealArray::from_rows(&[vec![2.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let (l, _) = solve_generalized_eigen(&RealArray::identity(2), &k).unwrap();
        let s5 = 5f64.sqrt();
        assert!((l[0] - (3.0 - s5) / 2.0).abs() < 1e-12);
        assert!((l[1] - (3.0 + s5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn asymmetric_input_rejected() {
        let k = RealArray::from_rows(&[vec![2.0, -1.0], vec![-1.1, 1.0]]).unwrap();
        assert!(matches!(
            solve_generalized_eigen(&RealArray::identity(2), &k),
            Err(Error::Asymmetric { .. })
        ));
    }

    #[test]
    fn indefinite_mass_rejected() {
        let m = RealArray::diag(&[1.0, -1.0]);
        assert!(matches!(
            solve_generalized_eigen(&m, &RealArray::identity(2)),
            Err(Error::NotPositiveDefinite { pivot: 1, .. })
        ));
    }

    #[test]
    fn unit_mass_uniform_damping() {
        let k = RealArray::from_rows(&[vec![2.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let sys = StructuralSystem::new(RealArray::identity(2), RealArray::diag(&[0.1, 0.1]), k, 0.0).unwrap();
        let b = build_modal_basis(&sys, 2).unwrap();
        for (x, w) in b.xis.iter().zip(&b.omegas) {
            assert!(close(*x, 0.05 / w, 1e-12));
        }
    }

    #[test]
    fn rayleigh_damping_identity() {
        let base = StructuralSystem::frame_4dof(0.0);
        let (alpha, beta) = (0.03, 0.02);
        let c = base.mass.scale(alpha).add(&base.stiffness.scale(beta)).unwrap();
        let sys = StructuralSystem { damping: c, ..base };
        let b = build_modal_basis(&sys, 4).unwrap();
        for (x, w) in b.xis.iter().zip(&b.omegas) {
            assert!(close(*x, 0.5 * (alpha / w + beta * w), 1e-12));
        }
    }

    #[test]
    fn rigid_body_mode_is_an_error() {
        let k = RealArray::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let sys = StructuralSystem::new(RealArray::identity(2), RealArray::identity(2), k, 0.0).unwrap();
        assert!(matches!(build_modal_basis(&sys, 1), Err(Error::RigidBodyMode { mode: 0, .. })));
    }

    #[test]
    fn mode_count_bounds() {
        let sys = StructuralSystem::frame_4dof(0.0);
        assert!(build_modal_basis(&sys, 0).is_err());
        assert!(build_modal_basis(&sys, 5).is_err());
    }

    #[test]
    fn truncation_matches_leading_columns() {
        let sys = StructuralSystem::frame_4dof(0.0);
        let full = build_modal_basis(&sys, 4).unwrap();
        for p in 1..=4 {
            let b = build_modal_basis(&sys, p).unwrap();
            assert_eq!(b.phi, full.phi.slice_cols(0, p).unwrap());
            assert_eq!(b.omegas[..], full.omegas[..p]);
        }
    }

    #[test]
    fn matrix_text_roundtrip() {
        let m = StructuralSystem::frame_4dof(0.0).stiffness;
        let parsed = parse_matrix(&format_matrix(&m), "k").unwrap();
        assert_eq!(parsed, m);
        assert!(matches!(parse_matrix("1 2\n3 x\n", "k"), Err(Error::Parse { .. })));
        assert!(parse_matrix("1 2\n3\n", "k").is_err());
    }

    #[test]
    fn modal_damping_matrix_diagonalizes() {
        let sys = StructuralSystem::frame_4dof(0.0);
        let b = build_modal_basis(&sys, 4).unwrap();
        let cd = modal_damping_matrix(&sys, &b).unwrap();
        let proj = b.phi.transpose().matmul(&cd).unwrap().matmul(&b.phi).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { b.gamma.get(i, i) } else { 0.0 };
                assert!((proj.get(i, j) - want).abs() < 1e-12);
            }
        }
    }
}
