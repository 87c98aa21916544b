//! Explicit time-marching of the network in characteristic variables.
//!
//! First-order upwind transport split by characteristic sign, with the
//! lower-order coupling and the quadratic source applied pointwise and the
//! nodal reflection conditions imposed after every stage of a two-stage
//! explicit trapezoidal (Heun) update. The energy, a discrete H1 norm, the
//! per-node dissipation rates and (with an attached certificate ansatz) the
//! Lyapunov value are tracked along the run.

use crate::beam::{self, PhysState};
use crate::certify::{AnsatzConfig, CertifyError};
use crate::diag::{
    apply_reflection, build_diagonalization, build_nodal_coupling, riemann_inverse,
    BeamDiagonalization, DiagError, DiagState, NodeCoupling,
};
use crate::grid::{fd_derivative, trapezoid, uniform_grid};
use crate::linalg::{Mat12, Vec12};
use crate::network::{InitialDatum, NetworkError, NetworkScenario};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Diag(#[from] DiagError),
    #[error(transparent)]
    Beam(#[from] beam::BeamError),
    #[error(transparent)]
    Certify(#[from] CertifyError),
    #[error("time step {dt} exceeds the stability limit {limit}")]
    CflViolation { dt: f64, limit: f64 },
    #[error("state blew up at t = {t}: amplitude {amplitude:.3e} exceeds {bound:.3e}")]
    BlowUp { t: f64, amplitude: f64, bound: f64 },
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error("decay fit needs positive values on the window")]
    NonPositiveValues,
    #[error("{0}")]
    Invalid(String),
}

/// Discretization parameters.
#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Cells per beam (points = cells + 1), at least 8.
    pub cells: usize,
    /// Courant factor in (0, 1].
    pub cfl: f64,
    pub t_end: f64,
    /// Record every this many steps (plus the initial and final states).
    pub record_stride: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { cells: 128, cfl: 0.9, t_end: 10.0, record_stride: 1 }
    }
}

impl SimConfig {
    fn validate(&self) -> Result<(), SimError> {
        if self.cells < 8 {
            return Err(SimError::Invalid("at least 8 cells per beam required".into()));
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(SimError::Invalid("Courant factor must lie in (0, 1]".into()));
        }
        if !(self.t_end > 0.0) {
            return Err(SimError::Invalid("end time must be positive".into()));
        }
        if self.record_stride == 0 {
            return Err(SimError::Invalid("record stride must be positive".into()));
        }
        Ok(())
    }
}

/// Recorded scalars along a run.
#[derive(Debug, Clone)]
pub struct TimeSeries {
    pub times: Vec<f64>,
    pub energy_phys: Vec<f64>,
    pub energy_diag: Vec<f64>,
    pub h1: Vec<f64>,
    pub lyapunov: Option<Vec<f64>>,
    /// Energy outflow rate per node at each record time.
    pub node_dissipation: Vec<Vec<f64>>,
}

/// Result of a completed run.
#[derive(Debug)]
pub struct SimOutput {
    pub series: TimeSeries,
    pub final_physical: PhysState,
    pub final_diagonal: DiagState,
    pub grids: Vec<Vec<f64>>,
    pub dt: f64,
    pub steps: usize,
    /// Largest single-step energy increase relative to the initial energy
    /// (zero for a monotone run).
    pub max_step_energy_increase: f64,
}

struct SlotRef {
    beam: usize,
    point: usize,
    at_end: bool,
}

/// Time-marching engine for one scenario on fixed grids.
pub struct NetworkSimulator {
    grids: Vec<Vec<f64>>,
    dxs: Vec<f64>,
    diags: Vec<BeamDiagonalization>,
    couplings: Vec<NodeCoupling>,
    slot_maps: Vec<Vec<SlotRef>>,
    state: DiagState,
    time: f64,
    cfl_limit: f64,
    blowup_bound: f64,
    q_bar_grids: Option<Vec<Vec<Mat12>>>,
    scratch: Vec<Vec<Vec12>>,
}

impl NetworkSimulator {
    /// Builds grids, diagonalizations and couplings for a scenario and
    /// samples its initial datum.
    pub fn new(
        scenario: &NetworkScenario,
        config: &SimConfig,
        lyapunov: Option<&AnsatzConfig>,
    ) -> Result<Self, SimError> {
        scenario.validate()?;
        config.validate()?;
        let grids: Vec<Vec<f64>> =
            scenario.beams.iter().map(|b| uniform_grid(b.length, config.cells)).collect();
        let mut diags = Vec::with_capacity(scenario.beams.len());
        for (params, grid) in scenario.beams.iter().zip(&grids) {
            diags.push(build_diagonalization(params, grid)?);
        }
        let couplings = build_nodal_coupling(scenario, &diags)?;
        let physical = sample_initial_physical(scenario, &grids, &diags)?;
        let state = crate::diag::riemann_forward(&diags, &physical)?;
        let q_bar_grids = match lyapunov {
            Some(ansatz) => {
                let mut per_beam = Vec::with_capacity(scenario.beams.len());
                for (idx, params) in scenario.beams.iter().enumerate() {
                    let mut qs = Vec::with_capacity(grids[idx].len());
                    for &x in &grids[idx] {
                        qs.push(ansatz.q_bar(params, idx, x)?);
                    }
                    per_beam.push(qs);
                }
                Some(per_beam)
            }
            None => None,
        };
        Ok(Self::from_parts(grids, diags, couplings, state, q_bar_grids))
    }

    /// Assembles a simulator from prebuilt parts; the entry point for
    /// synthetic setups in tests and custom pipelines.
    pub fn from_parts(
        grids: Vec<Vec<f64>>,
        diags: Vec<BeamDiagonalization>,
        couplings: Vec<NodeCoupling>,
        state: DiagState,
        q_bar_grids: Option<Vec<Vec<Mat12>>>,
    ) -> Self {
        let dxs: Vec<f64> = grids.iter().map(|g| g[1] - g[0]).collect();
        let mut cfl_limit = f64::INFINITY;
        for (diag, dx) in diags.iter().zip(&dxs) {
            let max_speed = diag
                .points
                .iter()
                .map(|p| p.d[5])
                .fold(0.0f64, f64::max);
            cfl_limit = cfl_limit.min(dx / max_speed);
        }
        let slot_maps = couplings
            .iter()
            .map(|c| {
                c.edges
                    .iter()
                    .enumerate()
                    .map(|(s, &edge)| {
                        let at_end = s == 0 && c.node != 0;
                        SlotRef {
                            beam: edge - 1,
                            point: if at_end { grids[edge - 1].len() - 1 } else { 0 },
                            at_end,
                        }
                    })
                    .collect()
            })
            .collect();
        let blowup_bound = 1e3 * state.max_abs();
        let scratch = state.per_beam.clone();
        let mut sim = NetworkSimulator {
            grids,
            dxs,
            diags,
            couplings,
            slot_maps,
            state,
            time: 0.0,
            cfl_limit,
            blowup_bound,
            q_bar_grids,
            scratch,
        };
        sim.apply_couplings();
        sim
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn state(&self) -> &DiagState {
        &self.state
    }

    /// Replaces the current state, re-imposes the nodal conditions and
    /// refreshes the blow-up bound.
    pub fn set_state(&mut self, state: DiagState) {
        self.state = state;
        self.blowup_bound = 1e3 * self.state.max_abs();
        self.apply_couplings();
    }

    /// Largest admissible time step.
    pub fn cfl_limit(&self) -> f64 {
        self.cfl_limit
    }

    fn apply_couplings(&mut self) {
        for (coupling, slots) in self.couplings.iter().zip(&self.slot_maps) {
            let k = slots.len();
            let mut r_in = DVector::zeros(6 * k);
            for (s, slot) in slots.iter().enumerate() {
                let r = &self.state.per_beam[slot.beam][slot.point];
                let offset = if slot.at_end { 6 } else { 0 };
                for i in 0..6 {
                    r_in[6 * s + i] = r[offset + i];
                }
            }
            let r_out = apply_reflection(coupling, &r_in);
            for (s, slot) in slots.iter().enumerate() {
                let r = &mut self.state.per_beam[slot.beam][slot.point];
                let offset = if slot.at_end { 0 } else { 6 };
                for i in 0..6 {
                    r[offset + i] = r_out[6 * s + i];
                }
            }
        }
    }

    /// Upwind transport plus lower-order and quadratic source terms; rows
    /// whose boundary value is prescribed by the coupling get a zero rate.
    fn semidiscrete_rhs(&self, state: &DiagState, rates: &mut [Vec<Vec12>]) {
        for (b, diag) in self.diags.iter().enumerate() {
            let dx = self.dxs[b];
            let rs = &state.per_beam[b];
            let out = &mut rates[b];
            let last = rs.len() - 1;
            for j in 0..=last {
                let p = &diag.points[j];
                let r = &rs[j];
                // source: -B r + L g_phys(L^-1 r)
                let y = p.l_inv * r;
                let g_phys =
                    beam::quadratic_source_raw(&p.mass, &p.flex, &p.mass_inv, &p.flex_inv, &y);
                let mut rate = -(p.b * r) + p.l * g_phys;
                for c in 0..6 {
                    // leftward family: forward difference, endpoint value at
                    // x = l prescribed
                    if j < last {
                        rate[c] += p.d[c] * (rs[j + 1][c] - r[c]) / dx;
                    } else {
                        rate[c] = 0.0;
                    }
                    // rightward family: backward difference, endpoint value
                    // at x = 0 prescribed
                    if j > 0 {
                        rate[6 + c] -= p.d[c] * (r[6 + c] - rs[j - 1][6 + c]) / dx;
                    } else {
                        rate[6 + c] = 0.0;
                    }
                }
                out[j] = rate;
            }
        }
    }

    /// One explicit trapezoidal step with the nodal conditions applied after
    /// each stage.
    pub fn step(&mut self, dt: f64) -> Result<(), SimError> {
        if dt > self.cfl_limit * (1.0 + 1e-12) {
            return Err(SimError::CflViolation { dt, limit: self.cfl_limit });
        }
        let mut stage1 = self.scratch.clone();
        self.semidiscrete_rhs(&self.state, &mut stage1);
        let saved = self.state.per_beam.clone();
        for (b, rs) in self.state.per_beam.iter_mut().enumerate() {
            for (j, r) in rs.iter_mut().enumerate() {
                *r += dt * stage1[b][j];
            }
        }
        self.apply_couplings();
        let mut stage2 = self.scratch.clone();
        self.semidiscrete_rhs(&self.state, &mut stage2);
        for (b, rs) in self.state.per_beam.iter_mut().enumerate() {
            for (j, r) in rs.iter_mut().enumerate() {
                *r = saved[b][j] + 0.5 * dt * (stage1[b][j] + stage2[b][j]);
            }
        }
        self.apply_couplings();
        self.time += dt;
        if !self.state.is_finite() {
            return Err(SimError::NonFinite { t: self.time });
        }
        let amplitude = self.state.max_abs();
        if amplitude > self.blowup_bound {
            return Err(SimError::BlowUp { t: self.time, amplitude, bound: self.blowup_bound });
        }
        Ok(())
    }

    /// Energy in the diagonal frame, `sum_i int <r, Qd r>` with
    /// `Qd = diag(D^-2, D^-2)/2`.
    pub fn diagonal_energy(&self, state: &DiagState) -> f64 {
        let mut total = 0.0;
        for (b, diag) in self.diags.iter().enumerate() {
            let vals: Vec<f64> = state.per_beam[b]
                .iter()
                .zip(&diag.points)
                .map(|(r, p)| {
                    let mut q = 0.0;
                    for i in 0..6 {
                        let w = 0.5 / (p.d[i] * p.d[i]);
                        q += w * (r[i] * r[i] + r[6 + i] * r[6 + i]);
                    }
                    q
                })
                .collect();
            total += trapezoid(&self.grids[b], &vals);
        }
        total
    }

    /// Energy in physical variables, mapping the state back pointwise.
    pub fn physical_energy(&self, state: &DiagState) -> f64 {
        let mut total = 0.0;
        for (b, diag) in self.diags.iter().enumerate() {
            let vals: Vec<f64> = state.per_beam[b]
                .iter()
                .zip(&diag.points)
                .map(|(r, p)| {
                    let y = p.l_inv * r;
                    let v = y.fixed_rows::<6>(0);
                    let z = y.fixed_rows::<6>(6);
                    (v.transpose() * p.mass * v)[(0, 0)] + (z.transpose() * p.flex * z)[(0, 0)]
                })
                .collect();
            total += trapezoid(&self.grids[b], &vals);
        }
        total
    }

    fn physical_state(&self, state: &DiagState) -> PhysState {
        riemann_inverse(&self.diags, state).expect("matching grids")
    }

    /// Time derivative through the governing equation with centered space
    /// differences, on cached coefficients.
    fn physical_rate(&self, phys: &PhysState) -> Vec<Vec<Vec12>> {
        let mut rates = Vec::with_capacity(phys.per_beam.len());
        for (b, diag) in self.diags.iter().enumerate() {
            let ys = &phys.per_beam[b];
            let dy = fd_derivative(&self.grids[b], ys);
            let mut out = Vec::with_capacity(ys.len());
            for (j, p) in diag.points.iter().enumerate() {
                let g = beam::quadratic_source_raw(&p.mass, &p.flex, &p.mass_inv, &p.flex_inv, &ys[j]);
                out.push(-(p.a_phys * dy[j]) - p.b_phys * ys[j] + g);
            }
            rates.push(out);
        }
        rates
    }

    fn h1_norm(&self, phys: &PhysState) -> f64 {
        let mut total = 0.0;
        for (b, grid) in self.grids.iter().enumerate() {
            let ys = &phys.per_beam[b];
            let dy = fd_derivative(grid, ys);
            let vals: Vec<f64> =
                ys.iter().zip(&dy).map(|(y, d)| y.norm_squared() + d.norm_squared()).collect();
            total += trapezoid(grid, &vals);
        }
        total.sqrt()
    }

    fn lyapunov(&self, phys: &PhysState, rates: &[Vec<Vec12>]) -> Option<f64> {
        let q_bars = self.q_bar_grids.as_ref()?;
        let mut total = 0.0;
        for (b, grid) in self.grids.iter().enumerate() {
            let vals: Vec<f64> = phys.per_beam[b]
                .iter()
                .zip(&rates[b])
                .zip(&q_bars[b])
                .map(|((y, rate), q)| y.dot(&(q * y)) + rate.dot(&(q * rate)))
                .collect();
            total += trapezoid(grid, &vals);
        }
        Some(total)
    }

    /// Energy outflow rate per node: the boundary terms of the energy
    /// identity grouped by node, nonnegative under dissipative conditions.
    fn node_dissipation(&self, phys: &PhysState) -> Vec<f64> {
        let flux = |b: usize, point: usize| {
            let y = &phys.per_beam[b][point];
            let v = y.fixed_rows::<6>(0);
            let z = y.fixed_rows::<6>(6);
            -2.0 * v.dot(&z)
        };
        self.couplings
            .iter()
            .zip(&self.slot_maps)
            .map(|(_, slots)| {
                let mut rate = 0.0;
                for slot in slots {
                    if slot.at_end {
                        rate += flux(slot.beam, slot.point);
                    } else {
                        rate -= flux(slot.beam, slot.point);
                    }
                }
                rate
            })
            .collect()
    }

    fn record(&self, series: &mut TimeSeries) {
        let phys = self.physical_state(&self.state);
        series.times.push(self.time);
        series.energy_phys.push(self.physical_energy(&self.state));
        series.energy_diag.push(self.diagonal_energy(&self.state));
        series.h1.push(self.h1_norm(&phys));
        series.node_dissipation.push(self.node_dissipation(&phys));
        if let Some(lyap) = &mut series.lyapunov {
            let rates = self.physical_rate(&phys);
            lyap.push(self.lyapunov(&phys, &rates).expect("lyapunov grids present"));
        }
    }

    /// Marches to the configured end time, recording at the configured
    /// stride and tracking per-step energy monotonicity.
    pub fn run(&mut self, config: &SimConfig) -> Result<SimOutput, SimError> {
        config.validate()?;
        let dt_target = config.cfl * self.cfl_limit;
        let steps = (config.t_end / dt_target).ceil().max(1.0) as usize;
        let dt = config.t_end / steps as f64;
        let mut series = TimeSeries {
            times: Vec::new(),
            energy_phys: Vec::new(),
            energy_diag: Vec::new(),
            h1: Vec::new(),
            lyapunov: self.q_bar_grids.as_ref().map(|_| Vec::new()),
            node_dissipation: Vec::new(),
        };
        self.record(&mut series);
        let e0 = series.energy_phys[0];
        let mut prev_energy = e0;
        let mut max_increase = 0.0f64;
        for m in 1..=steps {
            self.step(dt)?;
            let energy = self.physical_energy(&self.state);
            if e0 > 0.0 {
                max_increase = max_increase.max((energy - prev_energy) / e0);
            }
            prev_energy = energy;
            if m % config.record_stride == 0 || m == steps {
                self.record(&mut series);
            }
        }
        Ok(SimOutput {
            series,
            final_physical: self.physical_state(&self.state),
            final_diagonal: self.state.clone(),
            grids: self.grids.clone(),
            dt,
            steps,
            max_step_energy_increase: max_increase,
        })
    }
}

/// Builds a simulator and runs it.
pub fn simulate(
    scenario: &NetworkScenario,
    config: &SimConfig,
    lyapunov: Option<&AnsatzConfig>,
) -> Result<SimOutput, SimError> {
    let mut sim = NetworkSimulator::new(scenario, config, lyapunov)?;
    sim.run(config)
}

/// Interior bump vanishing with its derivative at both endpoints, peaking at
/// one mid-beam.
fn bump(s: f64) -> f64 {
    16.0 * s * s * (1.0 - s) * (1.0 - s)
}

/// Samples the scenario's initial datum in physical variables on the given
/// grids. Characteristic pulses are mapped back through the diagonalization.
pub fn sample_initial_physical(
    scenario: &NetworkScenario,
    grids: &[Vec<f64>],
    diags: &[BeamDiagonalization],
) -> Result<PhysState, SimError> {
    let points: Vec<usize> = grids.iter().map(|g| g.len()).collect();
    let mut state = PhysState::zeros(&points);
    match &scenario.initial {
        InitialDatum::Zero => {}
        InitialDatum::Bump { amplitude } => {
            for (b, grid) in grids.iter().enumerate() {
                let l = scenario.beams[b].length;
                for (j, &x) in grid.iter().enumerate() {
                    let value = amplitude * bump(x / l);
                    state.per_beam[b][j] = Vec12::repeat(value);
                }
            }
        }
        InitialDatum::RandomCompatible { seed, amplitude } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            for (b, grid) in grids.iter().enumerate() {
                let l = scenario.beams[b].length;
                let coeffs: Vec<[f64; 3]> = (0..12)
                    .map(|_| {
                        [
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                        ]
                    })
                    .collect();
                for (j, &x) in grid.iter().enumerate() {
                    let s = x / l;
                    let shape = bump(s);
                    for c in 0..12 {
                        let poly = coeffs[c][0] + coeffs[c][1] * s + coeffs[c][2] * s * s;
                        state.per_beam[b][j][c] = shape * poly;
                    }
                }
            }
            let max = state.max_abs();
            if max > 0.0 {
                let scale = amplitude / max;
                for ys in &mut state.per_beam {
                    for y in ys.iter_mut() {
                        *y *= scale;
                    }
                }
            }
        }
        InitialDatum::RiemannPulse { edge, rightward, center, width, amplitude } => {
            let b = edge - 1;
            if b >= grids.len() {
                return Err(SimError::Invalid(format!("pulse edge {edge} out of range")));
            }
            let half = std::f64::consts::FRAC_PI_2;
            for (j, &x) in grids[b].iter().enumerate() {
                let u = (x - center) / width;
                if u.abs() < 1.0 {
                    let profile = amplitude * (half * u).cos().powi(2);
                    let mut r = Vec12::zeros();
                    let offset = if *rightward { 6 } else { 0 };
                    for i in 0..6 {
                        r[offset + i] = profile;
                    }
                    state.per_beam[b][j] = diags[b].points[j].l_inv * r;
                }
            }
        }
        InitialDatum::Samples(samples) => {
            for (b, (xs, ys)) in samples.iter().enumerate() {
                for (j, &x) in grids[b].iter().enumerate() {
                    let (k, t) = crate::grid::bracket(xs, x);
                    state.per_beam[b][j] = ys[k] * (1.0 - t) + ys[k + 1] * t;
                }
            }
        }
    }
    Ok(state)
}

/// Least-squares slope of `log(values)` against time over `[t0, t1]`;
/// returns the exponential rate `-slope/2` and the fit quality `r^2`.
pub fn fit_decay_rate(
    times: &[f64],
    values: &[f64],
    window: (f64, f64),
) -> Result<(f64, f64), SimError> {
    let pairs: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(t, _)| **t >= window.0 && **t <= window.1)
        .map(|(t, v)| (*t, *v))
        .collect();
    if pairs.len() < 2 || pairs.iter().any(|(_, v)| *v <= 0.0) {
        return Err(SimError::NonPositiveValues);
    }
    let n = pairs.len() as f64;
    let (mut st, mut sl) = (0.0, 0.0);
    for (t, v) in &pairs {
        st += t;
        sl += v.ln();
    }
    let (tbar, lbar) = (st / n, sl / n);
    let (mut stt, mut stl, mut sll) = (0.0, 0.0, 0.0);
    for (t, v) in &pairs {
        let dt = t - tbar;
        let dl = v.ln() - lbar;
        stt += dt * dt;
        stl += dt * dl;
        sll += dl * dl;
    }
    if stt == 0.0 {
        return Err(SimError::NonPositiveValues);
    }
    let slope = stl / stt;
    let r2 = if sll == 0.0 { 1.0 } else { (stl * stl) / (stt * sll) };
    Ok((-slope / 2.0, r2))
}
