//! Discrete-time MIMO test plants with globally well-defined relative degrees.
//!
//! Plants are ground truth for validation only. The controller touches them
//! exclusively through recorded trajectories; `true_phi` is a test oracle.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::lifting::{LiftedState, Trajectory};

/// State transition `x_{k+1} = f(x_k, u_k)`.
pub type TransitionFn = fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>;
/// Output map `y_k = h(x_k)`.
pub type OutputFn = fn(&DVector<f64>) -> DVector<f64>;
/// Synthetic input `v = Phi(u, Xi)` of the linearized dynamics.
pub type PhiFn = fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>;

/// Component-wise input bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl InputBox {
    pub fn symmetric(m: usize, bound: f64) -> Self {
        Self {
            lower: vec![-bound; m],
            upper: vec![bound; m],
        }
    }

    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_dim("input box", lower.len(), upper.len())?;
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::Argument(format!(
                "input box lower {lower:?} exceeds upper {upper:?}"
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, u: &DVector<f64>) -> bool {
        u.len() == self.dim()
            && u
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, h))| *l <= *v && *v <= *h)
    }

    /// Strict interior membership.
    pub fn interior_contains(&self, u: &DVector<f64>) -> bool {
        u.len() == self.dim()
            && u
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, h))| *l < *v && *v < *h)
    }
}

/// Plant state `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantState(pub DVector<f64>);

impl PlantState {
    pub fn zeros(n: usize) -> Self {
        Self(DVector::zeros(n))
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self(DVector::from_column_slice(x))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone)]
pub struct PlantModel {
    id: String,
    n: usize,
    m: usize,
    relative_degrees: Vec<usize>,
    f: TransitionFn,
    h: OutputFn,
    phi: Option<PhiFn>,
    input_box: InputBox,
    excitation_amplitude: f64,
}

impl fmt::Debug for PlantModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PlantModel")
            .field("id", &self.id)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("relative_degrees", &self.relative_degrees)
            .field("has_phi_oracle", &self.phi.is_some())
            .field("input_box", &self.input_box)
            .finish()
    }
}

impl PlantModel {
    /// Builds a plant and checks the structural invariants: the relative
    /// degrees sum to the state dimension and the origin is an equilibrium.
    pub fn new(
        id: impl Into<String>,
        n: usize,
        relative_degrees: Vec<usize>,
        f: TransitionFn,
        h: OutputFn,
    ) -> Result<Self> {
        let m = relative_degrees.len();
        if m == 0 {
            return Err(Error::Argument("plant needs at least one output".into()));
        }
        if relative_degrees.contains(&0) {
            return Err(Error::Argument("relative degrees must be >= 1".into()));
        }
        let total: usize = relative_degrees.iter().sum();
        if total != n {
            return Err(Error::Argument(format!(
                "relative degrees {relative_degrees:?} sum to {total}, state dimension is {n}"
            )));
        }
        let x0 = DVector::zeros(n);
        let u0 = DVector::zeros(m);
        let fx = f(&x0, &u0);
        let hx = h(&x0);
        check_dim("transition output", n, fx.len())?;
        check_dim("output map", m, hx.len())?;
        if fx.iter().chain(hx.iter()).any(|v| *v != 0.0) {
            return Err(Error::Argument(
                "origin must be an equilibrium: f(0,0) = 0 and h(0) = 0".into(),
            ));
        }
        Ok(Self {
            id: id.into(),
            n,
            m,
            relative_degrees,
            f,
            h,
            phi: None,
            input_box: InputBox::symmetric(m, 5.0),
            excitation_amplitude: 1.0,
        })
    }

    pub fn with_phi(mut self, phi: PhiFn) -> Self {
        self.phi = Some(phi);
        self
    }

    pub fn with_input_box(mut self, input_box: InputBox) -> Result<Self> {
        check_dim("input box", self.m, input_box.dim())?;
        self.input_box = input_box;
        Ok(self)
    }

    pub fn with_excitation_amplitude(mut self, amplitude: f64) -> Self {
        self.excitation_amplitude = amplitude;
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn relative_degrees(&self) -> &[usize] {
        &self.relative_degrees
    }

    pub fn d_max(&self) -> usize {
        *self.relative_degrees.iter().max().expect("m >= 1")
    }

    pub fn input_box(&self) -> &InputBox {
        &self.input_box
    }

    /// Input amplitude under which i.i.d. uniform excitation keeps the plant
    /// bounded.
    pub fn excitation_amplitude(&self) -> f64 {
        self.excitation_amplitude
    }

    /// I.i.d. uniform inputs on `[-amplitude, amplitude]^m`, clipped to the
    /// input box.
    pub fn excitation(&self, len: usize, amplitude: f64, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = crate::seed::rng(seed);
        (0..len)
            .map(|_| {
                DVector::from_fn(self.m, |j, _| {
                    let v = if amplitude > 0.0 {
                        rng.gen_range(-amplitude..=amplitude)
                    } else {
                        0.0
                    };
                    v.clamp(self.input_box.lower[j], self.input_box.upper[j])
                })
            })
            .collect()
    }

    /// Data-collection run from the origin under [`PlantModel::excitation`]
    /// at the plant's default amplitude.
    pub fn collect(&self, len: usize, seed: u64) -> Result<Trajectory> {
        let inputs = self.excitation(len, self.excitation_amplitude, seed);
        self.simulate(&PlantState::zeros(self.n), &inputs)
    }

    pub fn phi_oracle(&self) -> Option<PhiFn> {
        self.phi
    }

    pub fn step(&self, x: &PlantState, u: &DVector<f64>) -> Result<PlantState> {
        check_dim("plant state", self.n, x.0.len())?;
        check_dim("plant input", self.m, u.len())?;
        Ok(PlantState((self.f)(&x.0, u)))
    }

    pub fn output(&self, x: &PlantState) -> Result<DVector<f64>> {
        check_dim("plant state", self.n, x.0.len())?;
        Ok((self.h)(&x.0))
    }

    /// Simulates `inputs.len()` steps from `x0`.
    ///
    /// Channel `i` of the result holds `N + d_i` samples: a length-`N` input
    /// sequence determines output `i` exactly up to index `N + d_i - 1`. The
    /// trailing transitions reuse the last input, which cannot reach any of
    /// the returned samples.
    pub fn simulate(&self, x0: &PlantState, inputs: &[DVector<f64>]) -> Result<Trajectory> {
        if inputs.is_empty() {
            return Err(Error::Argument("simulate needs at least one input".into()));
        }
        for u in inputs {
            check_dim("plant input", self.m, u.len())?;
        }
        check_dim("plant state", self.n, x0.0.len())?;
        let n_inputs = inputs.len();
        let horizon = n_inputs + self.d_max();
        let mut outputs: Vec<Vec<f64>> = self
            .relative_degrees
            .iter()
            .map(|d| Vec::with_capacity(n_inputs + d))
            .collect();
        let mut x = x0.0.clone();
        for k in 0..horizon {
            let y = (self.h)(&x);
            for (i, channel) in outputs.iter_mut().enumerate() {
                if k < n_inputs + self.relative_degrees[i] {
                    channel.push(y[i]);
                }
            }
            if k + 1 < horizon {
                let u = &inputs[k.min(n_inputs - 1)];
                x = (self.f)(&x, u);
            }
        }
        Trajectory::new(inputs.to_vec(), outputs, self.relative_degrees.clone())
    }

    /// Clean lifted state at the current plant state: outputs
    /// `y_{i,[t, t+d_i-1]}` do not depend on the inputs applied from `t` on,
    /// so they follow from `x_t` alone.
    pub fn lifted_state(&self, x: &PlantState) -> Result<LiftedState> {
        check_dim("plant state", self.n, x.0.len())?;
        let zero = DVector::zeros(self.m);
        let mut windows: Vec<Vec<f64>> = vec![Vec::new(); self.m];
        let mut state = x.0.clone();
        for k in 0..self.d_max() {
            let y = (self.h)(&state);
            for (i, w) in windows.iter_mut().enumerate() {
                if k < self.relative_degrees[i] {
                    w.push(y[i]);
                }
            }
            state = (self.f)(&state, &zero);
        }
        Ok(LiftedState(DVector::from_iterator(
            self.n,
            windows.into_iter().flatten(),
        )))
    }

    pub fn true_phi(&self, u: &DVector<f64>, xi: &LiftedState) -> Result<DVector<f64>> {
        let phi = self.phi.ok_or_else(|| {
            Error::Unsupported(format!("plant `{}` has no synthetic-input oracle", self.id))
        })?;
        check_dim("plant input", self.m, u.len())?;
        check_dim("lifted state", self.n, xi.0.len())?;
        Ok(phi(u, &xi.0))
    }

    /// Finite-difference relative-degree test at `(x, u)`.
    ///
    /// Perturbing each input component by `step` must leave every output
    /// sample `y_{i,k}` with `k < d_i` bit-identical and move `y_{i,d_i}` for
    /// at least one input component.
    pub fn check_relative_degree(&self, x: &PlantState, u: &DVector<f64>, step: f64) -> Result<()> {
        check_dim("plant state", self.n, x.0.len())?;
        check_dim("plant input", self.m, u.len())?;
        let base = self.simulate(x, std::slice::from_ref(u))?;
        let mut moved = vec![false; self.m];
        for j in 0..self.m {
            let mut up = u.clone();
            up[j] += step;
            let pert = self.simulate(x, std::slice::from_ref(&up))?;
            for i in 0..self.m {
                let d = self.relative_degrees[i];
                for k in 0..d {
                    if base.output(i, k) != pert.output(i, k) {
                        return Err(Error::Precondition(format!(
                            "output {i} sample {k} reacts to input {j}, relative degree {d} violated"
                        )));
                    }
                }
                if (base.output(i, d) - pert.output(i, d)).abs() > 1e-6 * step.abs() {
                    moved[i] = true;
                }
            }
        }
        if let Some(i) = moved.iter().position(|m| !m) {
            return Err(Error::Precondition(format!(
                "output {i} does not react to any input after {} steps",
                self.relative_degrees[i]
            )));
        }
        Ok(())
    }
}

fn p1_f(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(vec![x[1], 0.8 * x[1] + 0.2 * x[0] * x[0] + u[0]])
}

fn p1_phi(u: &DVector<f64>, xi: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(vec![0.2 * xi[0] * xi[0] + 0.8 * xi[1] + u[0]])
}

fn p2_f(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(vec![
        x[1],
        0.8 * x[1] + 0.2 * x[0] * x[0] - 0.1 * x[0].sin() + u[0],
    ])
}

fn p2_phi(u: &DVector<f64>, xi: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(vec![
        0.2 * xi[0] * xi[0] + 0.8 * xi[1] - 0.1 * xi[0].sin() + u[0],
    ])
}

fn first_state(x: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(vec![x[0]])
}

// y1 = x1 has relative degree 2, y2 = x3 relative degree 1; Xi = x.
fn p3_f(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(vec![
        x[1],
        0.5 * x[1] + 0.1 * x[0] * x[2] + u[0] + 0.2 * u[1],
        0.6 * x[2] + 0.1 * x[0] * x[0] + 0.3 * u[1],
    ])
}

fn p3_h(x: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(vec![x[0], x[2]])
}

fn p3_phi(u: &DVector<f64>, xi: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(vec![
        0.5 * xi[1] + 0.1 * xi[0] * xi[2] + u[0] + 0.2 * u[1],
        0.6 * xi[2] + 0.1 * xi[0] * xi[0] + 0.3 * u[1],
    ])
}

fn l1_f(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(vec![x[1], 0.5 * x[0] + 0.3 * x[1] + u[0]])
}

fn l1_phi(u: &DVector<f64>, xi: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(vec![0.5 * xi[0] + 0.3 * xi[1] + u[0]])
}

/// Registry of the builtin plants.
///
/// * `P1` SISO, `d = (2)`, nonlinearity `0.2 x1^2` captured exactly by the
///   default dictionary.
/// * `P2` as `P1` plus `-0.1 sin(x1)`, outside the default dictionary.
/// * `P3` two outputs with `d = (2, 1)`.
/// * `L1` linear SISO plant, `d = (2)`, used with the input-only dictionary.
pub fn builtin_plants() -> BTreeMap<String, PlantModel> {
    let plants = [
        PlantModel::new("P1", 2, vec![2], p1_f, first_state)
            .map(|p| p.with_phi(p1_phi).with_excitation_amplitude(0.15)),
        PlantModel::new("P2", 2, vec![2], p2_f, first_state)
            .map(|p| p.with_phi(p2_phi).with_excitation_amplitude(0.2)),
        PlantModel::new("P3", 3, vec![2, 1], p3_f, p3_h)
            .map(|p| p.with_phi(p3_phi).with_excitation_amplitude(0.5)),
        PlantModel::new("L1", 2, vec![2], l1_f, first_state)
            .map(|p| p.with_phi(l1_phi).with_excitation_amplitude(1.0)),
    ];
    plants
        .into_iter()
        .map(|p| {
            let p = p.expect("builtin plants satisfy the model invariants");
            (p.id().to_string(), p)
        })
        .collect()
}

pub fn builtin_plant(id: &str) -> Result<PlantModel> {
    builtin_plants()
        .remove(id)
        .ok_or_else(|| Error::UnknownPlant(id.to_string()))
}
