use std::sync::Arc;

use rand::Rng;

use super::{LevelGrid, LevelSequence, SolverConfig, VectorFieldParams};
use crate::error::{Result, UfoError};
use crate::interp::{smoothing_weights, KernelConfig};
use crate::tensorops::{Bound, DenseArray, ParamId, ParamStore, RowMixPlan, Tape, Var};

/// Independent equal-length patches stacked for lockstep integration.
///
/// Row `p * patch_len + k` of any per-position quantity belongs to fine
/// position `k` of patch `p`. The covariates are the known cyclic time
/// features at the fine positions; they are smoothed into the `τ̂` control.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    patch_len: usize,
    times: Vec<f64>,
    covariates: DenseArray,
}

impl PatchSet {
    pub fn new(patch_len: usize, times: Vec<f64>, covariates: DenseArray) -> Result<Self> {
        if patch_len == 0 {
            return Err(UfoError::InvalidGrid("empty patch".into()));
        }
        if times.is_empty() || times.len() % patch_len != 0 {
            return Err(UfoError::InvalidGrid(format!(
                "{} times do not split into patches of {patch_len}",
                times.len()
            )));
        }
        if covariates.rows() != times.len() {
            return Err(UfoError::invalid(format!(
                "{} covariate rows for {} times",
                covariates.rows(),
                times.len()
            )));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(UfoError::InvalidGrid("non-finite timestamp".into()));
        }
        for p in times.chunks(patch_len) {
            if p.windows(2).any(|w| w[1] <= w[0]) {
                return Err(UfoError::InvalidGrid(
                    "times within a patch must be strictly increasing".into(),
                ));
            }
        }
        Ok(Self {
            patch_len,
            times,
            covariates,
        })
    }

    pub fn from_grid(grid: &LevelGrid, covariates: &DenseArray) -> Result<Self> {
        Self::new(grid.patch_len(), grid.fine_times().to_vec(), covariates.clone())
    }

    /// Stacks several sets with the same patch length (for example one per
    /// window of a batch).
    pub fn concat(sets: &[PatchSet]) -> Result<Self> {
        let first = sets
            .first()
            .ok_or_else(|| UfoError::invalid("no patch sets to concatenate"))?;
        let c = first.covariates.cols();
        let mut times = Vec::new();
        let mut cov = Vec::new();
        for s in sets {
            if s.patch_len != first.patch_len || s.covariates.cols() != c {
                return Err(UfoError::invalid("patch sets differ in patch length or width"));
            }
            times.extend_from_slice(&s.times);
            cov.extend_from_slice(s.covariates.data());
        }
        let rows = times.len();
        Self::new(first.patch_len, times, DenseArray::from_vec(rows, c, cov)?)
    }

    /// The same patches repeated `n` times (one copy per sample path).
    pub fn repeat(&self, n: usize) -> Result<Self> {
        Self::concat(&vec![self.clone(); n])
    }

    pub fn patch_len(&self) -> usize {
        self.patch_len
    }

    pub fn num_patches(&self) -> usize {
        self.times.len() / self.patch_len
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn covariates(&self) -> &DenseArray {
        &self.covariates
    }

    fn patch_times(&self, p: usize) -> &[f64] {
        &self.times[p * self.patch_len..(p + 1) * self.patch_len]
    }

    /// Smoothing plan evaluating each patch's own rows at its query time.
    fn plan_at(&self, queries: &[f64], kernel: &KernelConfig) -> RowMixPlan {
        let mut plan = RowMixPlan::new();
        for (p, &q) in queries.iter().enumerate() {
            let w = smoothing_weights(self.patch_times(p), q, kernel);
            let base = p * self.patch_len;
            plan.push_row(w.into_iter().enumerate().map(|(i, wi)| (base + i, wi)));
        }
        plan
    }

    /// `τ̂` at one query time per patch.
    fn tau_at(&self, queries: &[f64], kernel: &KernelConfig) -> DenseArray {
        let c = self.covariates.cols();
        let mut out = DenseArray::zeros(queries.len(), c);
        for (p, &q) in queries.iter().enumerate() {
            let w = smoothing_weights(self.patch_times(p), q, kernel);
            let row = out.row_mut(p);
            for (i, wi) in w.iter().enumerate() {
                for (o, x) in row.iter_mut().zip(self.covariates.row(p * self.patch_len + i)) {
                    *o += wi * x;
                }
            }
        }
        out
    }
}

/// Parameter handles of a SwiGLU vector field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FieldIds {
    pub gate: ParamId,
    pub value: ParamId,
    pub output: ParamId,
}

impl FieldIds {
    fn init(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        d: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            gate: store.add_uniform(format!("{prefix}.gate"), input, hidden, 1.0, rng),
            value: store.add_uniform(format!("{prefix}.value"), input, hidden, 1.0, rng),
            output: store.add_uniform(format!("{prefix}.output"), hidden, d, 0.5, rng),
        }
    }

    pub fn values(&self, store: &ParamStore) -> VectorFieldParams {
        VectorFieldParams {
            gate: store.get(self.gate).clone(),
            value: store.get(self.value).clone(),
            output: store.get(self.output).clone(),
        }
    }

    fn apply(&self, tape: &mut Tape, bound: &Bound, u: Var) -> Var {
        let g = tape.matmul(u, bound.var(self.gate));
        let g = tape.swish(g);
        let v = tape.matmul(u, bound.var(self.value));
        let h = tape.mul(g, v);
        tape.matmul(h, bound.var(self.output))
    }
}

/// Downsampling CDE: `NN_0` (linear + swish) for the initial state and a
/// field over `τ̂ ⊕ x̂ ⊕ z`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NcdeDownParams {
    pub init_weight: ParamId,
    pub init_bias: ParamId,
    pub field: FieldIds,
}

impl NcdeDownParams {
    /// `d_in` is the width of the level below, `d` the state width and `c`
    /// the covariate width.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d: usize,
        c: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            init_weight: store.add_uniform(format!("{prefix}.init.weight"), d_in, d, 1.0, rng),
            init_bias: store.add(format!("{prefix}.init.bias"), DenseArray::zeros(1, d)),
            field: FieldIds::init(store, &format!("{prefix}.field"), c + d_in + d, hidden, d, rng),
        }
    }
}

/// Upsampling CDE: a field over `τ̂ ⊕ z` only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NcdeUpParams {
    pub field: FieldIds,
}

impl NcdeUpParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        c: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            field: FieldIds::init(store, &format!("{prefix}.field"), c + d, hidden, d, rng),
        }
    }
}

/// Integrates every patch of `set` in lockstep with classical RK4 and returns
/// the state at each fine position (`patch_len` entries, the first being
/// `z0`). `field(tape, z, queries)` evaluates the vector field for all
/// patches, patch `p` at time `queries[p]`.
pub fn rk4_patches<F>(
    tape: &mut Tape,
    z0: Var,
    set: &PatchSet,
    steps_per_interval: usize,
    mut field: F,
) -> Result<Vec<Var>>
where
    F: FnMut(&mut Tape, Var, &[f64]) -> Result<Var>,
{
    if steps_per_interval == 0 {
        return Err(UfoError::invalid("steps_per_interval must be >= 1"));
    }
    let n = set.num_patches();
    if tape.shape(z0).0 != n {
        return Err(UfoError::invalid(format!(
            "{} initial states for {n} patches",
            tape.shape(z0).0
        )));
    }
    let w = set.patch_len;
    let spi = steps_per_interval as f64;
    let mut z = z0;
    let mut states = vec![z0];
    for k in 0..w.saturating_sub(1) {
        let h: Vec<f64> = (0..n)
            .map(|p| (set.times[p * w + k + 1] - set.times[p * w + k]) / spi)
            .collect();
        let half = Arc::new(h.iter().map(|x| 0.5 * x).collect::<Vec<_>>());
        let full = Arc::new(h.clone());
        let sixth = Arc::new(h.iter().map(|x| x / 6.0).collect::<Vec<_>>());
        for s in 0..steps_per_interval {
            let t0: Vec<f64> = (0..n)
                .map(|p| set.times[p * w + k] + s as f64 * h[p])
                .collect();
            let tm: Vec<f64> = t0.iter().zip(&h).map(|(t, h)| t + 0.5 * h).collect();
            let t1: Vec<f64> = t0.iter().zip(&h).map(|(t, h)| t + h).collect();
            let k1 = field(tape, z, &t0)?;
            let a = tape.row_scale(k1, half.clone());
            let z2 = tape.add(z, a);
            let k2 = field(tape, z2, &tm)?;
            let a = tape.row_scale(k2, half.clone());
            let z3 = tape.add(z, a);
            let k3 = field(tape, z3, &tm)?;
            let a = tape.row_scale(k3, full.clone());
            let z4 = tape.add(z, a);
            let k4 = field(tape, z4, &t1)?;
            let mid = tape.add(k2, k3);
            let mid = tape.scale(mid, 2.0);
            let ends = tape.add(k1, k4);
            let total = tape.add(ends, mid);
            let incr = tape.row_scale(total, sixth.clone());
            z = tape.add(z, incr);
            let value = tape.value(z);
            if let Some(bad) = (0..n).find(|&p| value.row(p).iter().any(|x| !x.is_finite())) {
                return Err(UfoError::IntegrationDiverged { time: t1[bad] });
            }
        }
        states.push(z);
    }
    Ok(states)
}

fn check_solver(solver: &SolverConfig) -> Result<()> {
    solver.kernel.validate()?;
    if solver.steps_per_interval == 0 {
        return Err(UfoError::invalid("steps_per_interval must be >= 1"));
    }
    Ok(())
}

/// Downsamples the stacked fine sequence `prev` (`patches · w × d_in`) to one
/// terminal state per patch (`patches × d`).
pub fn downsample_tape(
    tape: &mut Tape,
    prev: Var,
    set: &PatchSet,
    params: &NcdeDownParams,
    bound: &Bound,
    solver: &SolverConfig,
) -> Result<Var> {
    check_solver(solver)?;
    if tape.shape(prev).0 != set.times.len() {
        return Err(UfoError::invalid(format!(
            "{} fine rows for {} fine times",
            tape.shape(prev).0,
            set.times.len()
        )));
    }
    let kernel = solver.kernel;
    let w = set.patch_len;
    let starts: Vec<f64> = set.times.iter().step_by(w).copied().collect();
    let x0 = tape.row_mix(prev, Arc::new(set.plan_at(&starts, &kernel)));
    let lin = tape.matmul(x0, bound.var(params.init_weight));
    let lin = tape.add_row(lin, bound.var(params.init_bias));
    let z0 = tape.swish(lin);
    let field = params.field;
    let states = rk4_patches(tape, z0, set, solver.steps_per_interval, |tape, z, q| {
        let tau = tape.constant(set.tau_at(q, &kernel));
        let xh = tape.row_mix(prev, Arc::new(set.plan_at(q, &kernel)));
        let u = tape.concat_cols(&[tau, xh, z]);
        Ok(field.apply(tape, bound, u))
    })?;
    Ok(*states.last().expect("at least the initial state"))
}

/// Unrolls one seed per patch (`patches × d`) along the fine times and
/// returns the stacked fine states (`patches · w × d`).
pub fn upsample_tape(
    tape: &mut Tape,
    seeds: Var,
    set: &PatchSet,
    params: &NcdeUpParams,
    bound: &Bound,
    solver: &SolverConfig,
) -> Result<Var> {
    check_solver(solver)?;
    let kernel = solver.kernel;
    let field = params.field;
    let states = rk4_patches(tape, seeds, set, solver.steps_per_interval, |tape, z, q| {
        let tau = tape.constant(set.tau_at(q, &kernel));
        let u = tape.concat_cols(&[tau, z]);
        Ok(field.apply(tape, bound, u))
    })?;
    let d = tape.shape(seeds).1;
    let wide = tape.concat_cols(&states);
    Ok(tape.reshape(wide, set.num_patches() * set.patch_len, d))
}

fn last_rows(a: &DenseArray, w: usize) -> DenseArray {
    let rows: Vec<Vec<f64>> = (0..a.rows() / w).map(|p| a.row(p * w + w - 1).to_vec()).collect();
    if rows.is_empty() {
        return DenseArray::zeros(0, a.cols());
    }
    DenseArray::from_rows(&rows).expect("equal widths")
}

/// One level of downsampling outside of training. The coarse covariates
/// are those of each patch's last fine position.
pub fn ncde_downsample(
    prev: &LevelSequence,
    grid: &LevelGrid,
    store: &ParamStore,
    params: &NcdeDownParams,
    solver: &SolverConfig,
) -> Result<LevelSequence> {
    check_aligned(&prev.times, grid)?;
    let set = PatchSet::from_grid(grid, &prev.covariates)?;
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let x = tape.constant(prev.values.clone());
    let out = downsample_tape(&mut tape, x, &set, params, &bound, solver)?;
    LevelSequence::new(
        grid.coarse_times().to_vec(),
        tape.value(out).clone(),
        last_rows(&prev.covariates, grid.patch_len()),
    )
}

/// One level of upsampling outside of training; `fine_covariates` are the
/// known time features at `grid.fine_times()`.
pub fn ncde_upsample(
    coarse: &LevelSequence,
    grid: &LevelGrid,
    fine_covariates: &DenseArray,
    store: &ParamStore,
    params: &NcdeUpParams,
    solver: &SolverConfig,
) -> Result<LevelSequence> {
    if coarse.len() != grid.num_patches() {
        return Err(UfoError::invalid(format!(
            "{} coarse positions for {} patches",
            coarse.len(),
            grid.num_patches()
        )));
    }
    let set = PatchSet::from_grid(grid, fine_covariates)?;
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let seeds = tape.constant(coarse.values.clone());
    let out = upsample_tape(&mut tape, seeds, &set, params, &bound, solver)?;
    LevelSequence::new(
        grid.fine_times().to_vec(),
        tape.value(out).clone(),
        fine_covariates.clone(),
    )
}

fn check_aligned(times: &[f64], grid: &LevelGrid) -> Result<()> {
    let fine = grid.fine_times();
    let aligned = times.len() == fine.len()
        && times
            .iter()
            .zip(fine)
            .all(|(a, b)| (a - b).abs() <= 1e-9 * (1.0 + b.abs()));
    if !aligned {
        return Err(UfoError::invalid(format!(
            "sequence of {} positions is not aligned with the grid's {} fine times",
            times.len(),
            fine.len()
        )));
    }
    Ok(())
}
