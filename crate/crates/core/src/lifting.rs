//! Recorded trajectories, lifted states, Hankel matrices and persistency of
//! excitation.

use std::io::{Read, Write};
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dictionary::Dictionary;
use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::seed;

/// Input/output record of one plant run.
///
/// Inputs hold `N` samples of dimension `m`; output channel `i` holds
/// exactly `N + d_i` samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    inputs: Vec<DVector<f64>>,
    outputs: Vec<Vec<f64>>,
    relative_degrees: Vec<usize>,
    noisy: bool,
    w_star_used: f64,
    seed: Option<u64>,
}

impl Trajectory {
    pub fn new(
        inputs: Vec<DVector<f64>>,
        outputs: Vec<Vec<f64>>,
        relative_degrees: Vec<usize>,
    ) -> Result<Self> {
        let m = relative_degrees.len();
        check_dim("output channels", m, outputs.len())?;
        if relative_degrees.contains(&0) {
            return Err(Error::Argument("relative degrees must be >= 1".into()));
        }
        let n_inputs = inputs.len();
        for u in &inputs {
            check_dim("trajectory input", m, u.len())?;
        }
        for (i, channel) in outputs.iter().enumerate() {
            check_dim("output channel length", n_inputs + relative_degrees[i], channel.len())?;
        }
        Ok(Self {
            inputs,
            outputs,
            relative_degrees,
            noisy: false,
            w_star_used: 0.0,
            seed: None,
        })
    }

    /// Number of input samples `N`.
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn m(&self) -> usize {
        self.relative_degrees.len()
    }

    /// Lifted state dimension `n = sum d_i`.
    pub fn n(&self) -> usize {
        self.relative_degrees.iter().sum()
    }

    pub fn d_max(&self) -> usize {
        self.relative_degrees.iter().copied().max().unwrap_or(0)
    }

    pub fn relative_degrees(&self) -> &[usize] {
        &self.relative_degrees
    }

    pub fn inputs(&self) -> &[DVector<f64>] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[Vec<f64>] {
        &self.outputs
    }

    pub fn output(&self, channel: usize, k: usize) -> f64 {
        self.outputs[channel][k]
    }

    pub fn is_noisy(&self) -> bool {
        self.noisy
    }

    pub fn w_star_used(&self) -> f64 {
        self.w_star_used
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn is_finite(&self) -> bool {
        self.inputs.iter().all(|u| u.iter().all(|v| v.is_finite()))
            && self.outputs.iter().flatten().all(|v| v.is_finite())
    }

    /// Lifted state `Xi_k`; valid for `k` in `[0, N]`.
    pub fn lifted(&self, k: usize) -> Result<LiftedState> {
        if k > self.len() {
            return Err(Error::Index(format!(
                "lifted state {k} needs outputs past the stored range (N = {})",
                self.len()
            )));
        }
        let n = self.n();
        let values = self
            .relative_degrees
            .iter()
            .zip(&self.outputs)
            .flat_map(|(&d, channel)| channel[k..k + d].iter().copied());
        Ok(LiftedState(DVector::from_iterator(n, values)))
    }

    /// Writes the trajectory as CSV with header `k,u_1..u_m,y_1..y_m`; the
    /// trailing output-only rows leave the input cells empty.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let m = self.m();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["k".to_string()];
        header.extend((1..=m).map(|i| format!("u_{i}")));
        header.extend((1..=m).map(|i| format!("y_{i}")));
        w.write_record(&header)?;
        let rows = self.len() + self.d_max();
        for k in 0..rows {
            let mut record = vec![k.to_string()];
            for j in 0..m {
                record.push(self.inputs.get(k).map(|u| u[j].to_string()).unwrap_or_default());
            }
            for channel in &self.outputs {
                record.push(channel.get(k).map(f64::to_string).unwrap_or_default());
            }
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV layout produced by [`Trajectory::write_csv`]. Relative
    /// degrees are recovered from the channel lengths.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.len() < 3 || (header.len() - 1) % 2 != 0 || &header[0] != "k" {
            return Err(Error::Parse(format!("unexpected trajectory header {header:?}")));
        }
        let m = (header.len() - 1) / 2;
        let mut inputs: Vec<DVector<f64>> = Vec::new();
        let mut outputs: Vec<Vec<f64>> = vec![Vec::new(); m];
        let parse = |s: &str| -> Result<Option<f64>> {
            if s.trim().is_empty() {
                Ok(None)
            } else {
                s.trim()
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|e| Error::Parse(format!("bad number `{s}`: {e}")))
            }
        };
        for (row, record) in r.records().enumerate() {
            let record = record?;
            let k: usize = record[0]
                .trim()
                .parse()
                .map_err(|e| Error::Parse(format!("bad index `{}`: {e}", &record[0])))?;
            if k != row {
                return Err(Error::Parse(format!("row {row} carries index {k}")));
            }
            let us: Vec<Option<f64>> = (0..m).map(|j| parse(&record[1 + j])).collect::<Result<_>>()?;
            match (us.iter().all(Option::is_some), us.iter().all(Option::is_none)) {
                (true, _) => {
                    if inputs.len() != row {
                        return Err(Error::Parse(format!("input row {row} after a gap")));
                    }
                    inputs.push(DVector::from_iterator(m, us.into_iter().flatten()));
                }
                (false, true) => {}
                _ => return Err(Error::Parse(format!("partial input row {row}"))),
            }
            for (i, channel) in outputs.iter_mut().enumerate() {
                if let Some(y) = parse(&record[1 + m + i])? {
                    if channel.len() != row {
                        return Err(Error::Parse(format!("output {i} has a gap before row {row}")));
                    }
                    channel.push(y);
                }
            }
        }
        let n_inputs = inputs.len();
        let relative_degrees = outputs
            .iter()
            .map(|c| c.len().checked_sub(n_inputs).filter(|d| *d >= 1))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Parse("every output channel needs more samples than inputs".into()))?;
        Trajectory::new(inputs, outputs, relative_degrees)
    }
}

/// Stacked output windows `[y_{1,[k,k+d_1-1]}; ...; y_{m,[k,k+d_m-1]}]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftedState(pub DVector<f64>);

impl LiftedState {
    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

pub fn lift_sequence(traj: &Trajectory, range: Range<usize>) -> Result<Vec<LiftedState>> {
    range.map(|k| traj.lifted(k)).collect()
}

/// Block Hankel matrix of depth `L`: block row `j`, column `c` holds
/// `z_{j+c}`.
#[derive(Clone, Debug, PartialEq)]
pub struct HankelMatrix {
    depth: usize,
    block_height: usize,
    matrix: DMatrix<f64>,
}

impl HankelMatrix {
    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Dimension `eta` of one sequence element.
    pub fn block_height(&self) -> usize {
        self.block_height
    }

    pub fn width(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Rows of block `j`, i.e. the data windows at offset `j`.
    pub fn block(&self, j: usize) -> nalgebra::DMatrixView<'_, f64> {
        self.matrix
            .rows(j * self.block_height, self.block_height)
    }
}

pub fn build_hankel(seq: &[DVector<f64>], depth: usize) -> Result<HankelMatrix> {
    let n = seq.len();
    if depth == 0 || depth > n {
        return Err(Error::Argument(format!(
            "Hankel depth {depth} must lie in [1, {n}]"
        )));
    }
    let eta = seq[0].len();
    for z in seq {
        check_dim("Hankel sequence element", eta, z.len())?;
    }
    let width = n - depth + 1;
    let matrix = DMatrix::from_fn(eta * depth, width, |row, col| {
        seq[row / eta + col][row % eta]
    });
    Ok(HankelMatrix {
        depth,
        block_height: eta,
        matrix,
    })
}

/// Columns of an `eta x N` matrix as a sequence.
pub fn columns(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    m.column_iter().map(|c| c.into_owned()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeCertificate {
    pub satisfied: bool,
    pub order: usize,
    pub rank: usize,
    pub rows: usize,
    /// `rows`-th singular value of the Hankel matrix (0 when the matrix has
    /// fewer columns than rows).
    pub sigma_min: f64,
}

/// Persistency of excitation of order `depth`: `rank(H_L) = eta L`, with the
/// rank taken at the relative singular-value threshold `1e-9`.
pub fn is_persistently_exciting(seq: &[DVector<f64>], depth: usize) -> Result<PeCertificate> {
    let h = build_hankel(seq, depth)?;
    let s = linalg::singular_values(h.matrix());
    let rank = linalg::rank_from_singular_values(&s);
    let rows = h.matrix().nrows();
    Ok(PeCertificate {
        satisfied: rank == rows,
        order: depth,
        rank,
        rows,
        sigma_min: s.get(rows - 1).copied().unwrap_or(0.0),
    })
}

/// Adds i.i.d. uniform noise on `[-w_star, w_star]` to every output sample.
pub fn add_noise(traj: &Trajectory, w_star: f64, seed: u64) -> Result<Trajectory> {
    if !(w_star >= 0.0) || !w_star.is_finite() {
        return Err(Error::Argument(format!("noise bound must be >= 0, got {w_star}")));
    }
    if traj.noisy {
        return Err(Error::Argument("trajectory already carries noise".into()));
    }
    if w_star == 0.0 {
        return Ok(traj.clone());
    }
    let mut rng = seed::rng(seed);
    let mut noisy = traj.clone();
    for channel in noisy.outputs.iter_mut() {
        for y in channel.iter_mut() {
            *y += rng.gen_range(-w_star..=w_star);
        }
    }
    noisy.noisy = true;
    noisy.w_star_used = w_star;
    noisy.seed = Some(seed);
    Ok(noisy)
}

/// Observable synthetic inputs `v_k = (y_{1,k+d_1}, ..., y_{m,k+d_m})`,
/// `k < N`: the input of the linear chain-of-integrators dynamics of the
/// lifted state, `Xi_{k+1} = A Xi_k + B v_k`.
pub fn synthetic_inputs(traj: &Trajectory) -> Vec<DVector<f64>> {
    let d = traj.relative_degrees();
    (0..traj.len())
        .map(|k| DVector::from_fn(traj.m(), |i, _| traj.output(i, k + d[i])))
        .collect()
}

/// Least-squares residual of the data-based trajectory representation: the
/// test window `(u_bar, y_bar)` of length `depth` is a plant trajectory iff
/// `[H_L(Psi(u,Xi)); H_{L+1}(Xi)] alpha = [Psi(u_bar, Xi_bar); Xi_bar]` has a
/// solution. Returns `||M alpha - b||_2` at the minimum-norm least-squares
/// `alpha`.
///
/// The data must make the synthetic input persistently exciting of order
/// `L + n`, which by the fundamental lemma for the lifted linear dynamics
/// makes the Hankel columns span every length-`L` trajectory. Persistency of
/// the dictionary sequence itself is not required: dictionaries that contain
/// lifted-state coordinates obey exact shift relations (e.g. `xi_2` at `k+1`
/// equals `G Psi_k`) and can never have full-row-rank Hankel matrices.
pub fn nominal_representation_residual(
    data: &Trajectory,
    dict: &Dictionary,
    test: &Trajectory,
    depth: usize,
) -> Result<f64> {
    check_dim("test window length", depth, test.len())?;
    if data.relative_degrees() != test.relative_degrees() {
        return Err(Error::Argument(
            "data and test trajectories have different relative degrees".into(),
        ));
    }
    let n = data.n();
    let n_data = data.len();
    let pe = is_persistently_exciting(&synthetic_inputs(data), depth + n).map_err(|e| {
        Error::Precondition(format!("data too short for order {}: {e}", depth + n))
    })?;
    if !pe.satisfied {
        return Err(Error::Precondition(format!(
            "synthetic input not persistently exciting of order {} (rank {} of {})",
            depth + n,
            pe.rank,
            pe.rows
        )));
    }
    let psi_seq = columns(&dict.evaluate_sequence(data, 0..n_data)?);
    let xi_seq: Vec<DVector<f64>> = lift_sequence(data, 0..n_data + 1)?
        .into_iter()
        .map(|x| x.0)
        .collect();
    let h_psi = build_hankel(&psi_seq, depth)?;
    let h_xi = build_hankel(&xi_seq, depth + 1)?;
    let stacked = stack_rows(h_psi.matrix(), h_xi.matrix());

    let psi_test = dict.evaluate_sequence(test, 0..depth)?;
    let xi_test = lift_sequence(test, 0..depth + 1)?;
    let rhs = DVector::from_iterator(
        stacked.nrows(),
        psi_test
            .iter()
            .copied()
            .chain(xi_test.iter().flat_map(|x| x.0.iter().copied())),
    );
    let alpha = linalg::lstsq_min_norm(&stacked, &rhs);
    Ok((&stacked * alpha - rhs).norm())
}

pub(crate) fn stack_rows(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(top.ncols(), bottom.ncols());
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.rows_mut(0, top.nrows()).copy_from(top);
    out.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalars(v: &[f64]) -> Vec<DVector<f64>> {
        v.iter().map(|x| DVector::from_element(1, *x)).collect()
    }

    #[test]
    fn lift_unrolls_windows() {
        let traj = Trajectory::new(
            vec![DVector::from_vec(vec![0.0, 0.0])],
            vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0]],
            vec![2, 1],
        )
        .unwrap();
        let xi = traj.lifted(0).unwrap();
        assert_eq!(xi.0.as_slice(), &[1.0, 2.0, 4.0]);
        assert!(matches!(traj.lifted(2), Err(Error::Index(_))));
        assert!(lift_sequence(&traj, 0..3).is_err());
    }

    #[test]
    fn hankel_definition() {
        let h = build_hankel(&scalars(&[1.0, 2.0, 3.0, 4.0]), 2).unwrap();
        assert_eq!(h.matrix(), &DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 3.0, 4.0]));

        let h = build_hankel(&scalars(&[1.0, 2.0, 3.0]), 3).unwrap();
        assert_eq!(h.width(), 1);
        assert_eq!(h.matrix().column(0).as_slice(), &[1.0, 2.0, 3.0]);

        let seq = vec![
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.0, 1.0]),
            DVector::from_vec(vec![1.0, 1.0]),
        ];
        let h = build_hankel(&seq, 2).unwrap();
        assert_eq!(
            h.matrix(),
            &DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0])
        );
        assert!(build_hankel(&seq, 4).is_err());
        assert!(build_hankel(&seq, 0).is_err());
    }

    #[test]
    fn pe_examples() {
        let c = is_persistently_exciting(&scalars(&[1.0, 1.0, 1.0, 1.0]), 2).unwrap();
        assert!(!c.satisfied);
        assert_eq!(c.rank, 1);
        let c = is_persistently_exciting(&scalars(&[1.0, 0.0, 0.0, 1.0]), 2).unwrap();
        assert!(c.satisfied);
        assert_eq!(c.rank, 2);
        assert!(c.sigma_min > 0.0);
    }

    #[test]
    fn noise_examples() {
        let traj = Trajectory::new(
            scalars(&[0.5, -0.5, 0.2]),
            vec![vec![0.0, 0.1, 0.2, 0.3, 0.4]],
            vec![2],
        )
        .unwrap();
        assert_eq!(add_noise(&traj, 0.0, 3).unwrap(), traj);
        let a = add_noise(&traj, 0.05, 7).unwrap();
        let b = add_noise(&traj, 0.05, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.is_noisy());
        assert_eq!(a.inputs(), traj.inputs());
        for (x, y) in a.outputs()[0].iter().zip(&traj.outputs()[0]) {
            assert!((x - y).abs() <= 0.05);
        }
        assert!(add_noise(&traj, -1.0, 0).is_err());
        assert!(add_noise(&a, 0.1, 0).is_err());
    }

    #[test]
    fn csv_layout_and_round_trip() {
        let traj = Trajectory::new(
            vec![DVector::from_vec(vec![0.25, -1.0]), DVector::from_vec(vec![1e-17, 3.0])],
            vec![vec![1.0, 2.0, 3.0, 4.0], vec![0.5, 0.1 + 0.2, 7.0]],
            vec![2, 1],
        )
        .unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "k,u_1,u_2,y_1,y_2");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[3], "2,,,3,7");
        assert_eq!(lines[4], "3,,,4,");
        let back = Trajectory::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, traj);
    }

    #[test]
    fn csv_rejects_gaps() {
        let text = "k,u_1,y_1\n0,1,0\n1,,0\n2,1,0\n";
        assert!(Trajectory::read_csv(text.as_bytes()).is_err());
    }
}
