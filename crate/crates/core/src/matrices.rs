//! Compact matrix form of the branch flow equations.
//!
//! With `C = (I - A)^-1` aggregating downstream injections, the flows and
//! squared voltages are
//!
//! ```text
//! P = C p - D_R l
//! Q = C q - D_X l
//! V = V0 + M_p p + M_q q - H l
//! ```

use nalgebra::{DMatrix, DVector};

use crate::network::{Network, NetworkError};

#[derive(Debug, Clone, PartialEq)]
pub struct CompactMatrices {
    /// Bus-branch incidence, `(N+1) x N`.
    pub incidence: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d_r: DMatrix<f64>,
    pub d_x: DMatrix<f64>,
    pub d_x_pos: DMatrix<f64>,
    pub d_x_neg: DMatrix<f64>,
    pub m_p: DMatrix<f64>,
    pub m_q: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub h_pos: DMatrix<f64>,
    pub h_neg: DMatrix<f64>,
    /// Diagonals of `R`, `X` and `Z^2`.
    pub r: DVector<f64>,
    pub x: DVector<f64>,
    pub z2: DVector<f64>,
}

/// Elementwise split into nonnegative and nonpositive parts.
pub fn sign_split(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    (m.map(|v| v.max(0.0)), m.map(|v| v.min(0.0)))
}

pub fn compact_matrices(net: &Network) -> Result<CompactMatrices, NetworkError> {
    let n = net.n();
    let mut incidence = DMatrix::zeros(n + 1, n);
    for (k, br) in net.branches().iter().enumerate() {
        incidence[(k + 1, k)] = 1.0;
        incidence[(br.parent, k)] = 1.0;
    }
    // A = [0 I] E - I: A[i][k] = 1 when branch k hangs below bus slot i.
    let a = incidence.rows(1, n).into_owned() - DMatrix::identity(n, n);

    // Topological order makes I - A unit upper triangular.
    let i_minus_a = DMatrix::identity(n, n) - &a;
    let c = i_minus_a
        .solve_upper_triangular(&DMatrix::identity(n, n))
        .ok_or(NetworkError::SingularTopology)?;
    if c.iter().any(|v: &f64| !v.is_finite()) {
        return Err(NetworkError::SingularTopology);
    }

    let r = DVector::from_iterator(n, net.branches().iter().map(|b| b.r));
    let x = DVector::from_iterator(n, net.branches().iter().map(|b| b.x));
    let z2 = DVector::from_iterator(n, net.branches().iter().map(|b| b.z2()));
    let rd = DMatrix::from_diagonal(&r);
    let xd = DMatrix::from_diagonal(&x);

    let ca = &c * &a;
    let d_r = &ca * &rd;
    let d_x = &ca * &xd;
    let m_p = 2.0 * c.transpose() * &rd * &c;
    let m_q = 2.0 * c.transpose() * &xd * &c;
    let h = c.transpose() * (2.0 * (&rd * &d_r + &xd * &d_x) + DMatrix::from_diagonal(&z2));
    let (d_x_pos, d_x_neg) = sign_split(&d_x);
    let (h_pos, h_neg) = sign_split(&h);

    Ok(CompactMatrices {
        incidence,
        a,
        c,
        d_r,
        d_x,
        d_x_pos,
        d_x_neg,
        m_p,
        m_q,
        h,
        h_pos,
        h_neg,
        r,
        x,
        z2,
    })
}

impl CompactMatrices {
    pub fn n(&self) -> usize {
        self.c.nrows()
    }

    /// Active and reactive flows for net injections `p`, `q` and squared currents `l`.
    pub fn flows(
        &self,
        p: &DVector<f64>,
        q: &DVector<f64>,
        l: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        (&self.c * p - &self.d_r * l, &self.c * q - &self.d_x * l)
    }

    /// Squared voltages for net injections and squared currents.
    pub fn voltages(
        &self,
        v0: f64,
        p: &DVector<f64>,
        q: &DVector<f64>,
        l: &DVector<f64>,
    ) -> DVector<f64> {
        DVector::from_element(self.n(), v0) + &self.m_p * p + &self.m_q * q - &self.h * l
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::tests::four_bus_spec;
    use crate::network::{build_network, BranchSpec, BusSpec, NetworkSpec, VoltageLimitsSpec};

    fn path(impedances: &[(f64, f64)]) -> Network {
        let buses = (0..=impedances.len() as u32)
            .map(|id| BusSpec {
                id,
                name: None,
                p_demand_kw: 0.0,
                q_demand_kvar: 0.0,
                is_generator: id > 0,
            })
            .collect();
        let branches = impedances
            .iter()
            .enumerate()
            .map(|(k, &(r, x))| BranchSpec {
                from: k as u32,
                to: k as u32 + 1,
                r_pu: r,
                x_pu: x,
                l_max_pu: None,
                p_max_pu: None,
                q_max_pu: None,
            })
            .collect();
        build_network(&NetworkSpec {
            s_base_mva: 1.0,
            v_base_kv: 1.0,
            v0_pu: 1.0,
            substation: None,
            buses,
            branches,
            limits: VoltageLimitsSpec::default(),
        })
        .unwrap()
    }

    #[test]
    fn single_line_feeder() {
        let (r, x) = (0.3, 0.7);
        let m = compact_matrices(&path(&[(r, x)])).unwrap();
        assert_eq!(m.a[(0, 0)], 0.0);
        assert_eq!(m.c[(0, 0)], 1.0);
        assert_eq!(m.d_r[(0, 0)], 0.0);
        assert!((m.m_p[(0, 0)] - 2.0 * r).abs() < 1e-15);
        assert!((m.m_q[(0, 0)] - 2.0 * x).abs() < 1e-15);
        assert!((m.h[(0, 0)] - (r * r + x * x)).abs() < 1e-15);
    }

    #[test]
    fn two_branch_path_aggregates_downstream() {
        let m = compact_matrices(&path(&[(0.1, 0.2), (0.3, 0.4)])).unwrap();
        assert_eq!(m.a, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]));
        assert_eq!(m.c, DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]));
        // D_R = C A R: the head branch carries the downstream branch's losses.
        assert!((m.d_r[(0, 1)] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn inverse_identity_and_sign_split() {
        let net = build_network(&four_bus_spec()).unwrap();
        let m = compact_matrices(&net).unwrap();
        let n = net.n();
        let id = &m.c * (DMatrix::identity(n, n) - &m.a);
        assert!((id - DMatrix::<f64>::identity(n, n)).amax() < 1e-12);
        assert_eq!(&m.d_x_pos + &m.d_x_neg, m.d_x);
        assert_eq!(&m.h_pos + &m.h_neg, m.h);
        assert!(m.d_x_pos.iter().all(|&v| v >= 0.0));
        assert!(m.h_neg.iter().all(|&v| v <= 0.0));
    }

    #[test]
    fn lossless_voltage_matches_path_sum() {
        let net = build_network(&four_bus_spec()).unwrap();
        let m = compact_matrices(&net).unwrap();
        let p = DVector::from_vec(vec![0.01, -0.02, 0.03]);
        let q = DVector::from_vec(vec![-0.004, 0.002, 0.001]);
        let l = DVector::zeros(3);
        let v = m.voltages(net.v0, &p, &q, &l);
        let (pf, qf) = m.flows(&p, &q, &l);
        for k in 0..3 {
            let drop: f64 = net
                .path_to(k)
                .iter()
                .map(|&b| 2.0 * (m.r[b] * pf[b] + m.x[b] * qf[b]))
                .sum();
            assert!((v[k] - net.v0 - drop).abs() < 1e-14);
        }
    }
}
