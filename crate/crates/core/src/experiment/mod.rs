//! End-to-end experiment pipeline: field, cell problems, tensors, splitting, coarse
//! block forms, time integration, fine reference and error curves.

mod config;

pub use config::*;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;

use crate::analysis::{blowup_detect, relative_error, ErrorSeries};
use crate::cell_problems::{CacheKey, CellBasis, CellSolver};
use crate::coarse::{integrate, BlockSystem, DownscaledBasis, Scheme, Stepper};
use crate::effective::{compute_all, median_tensors, reduce_tensor, tensors_csv, EffectiveTensors};
use crate::error::{Error, Result};
use crate::fem::fine_wave_reference;
use crate::field::{indicators_from_values, layered_field, load_field, point_field, CoefficientField, Inclusion, IndicatorSet, ValueClass};
use crate::grid::{build_meshes, default_layers, CoarsePartition, FineMesh};
use crate::splitting::{
    closed_form_estimates, gamma_constant, inverse_constant, stability_bounds, SplittingPlan, StabilityReport,
};

/// `1000 exp(-40 ((x - 0.5)² + (y - 0.5)²)) exp(-40 t)`.
pub fn default_source(x: f64, y: f64, t: f64) -> f64 {
    1000.0 * (-40.0 * ((x - 0.5).powi(2) + (y - 0.5).powi(2))).exp() * (-40.0 * t).exp()
}

fn zero_source(_: f64, _: f64, _: f64) -> f64 {
    0.0
}

pub fn build_field(spec: &FieldSpec, mesh: &FineMesh) -> Result<CoefficientField> {
    match spec {
        FieldSpec::Uniform { value } => CoefficientField::uniform(mesh, *value),
        FieldSpec::Layered { layers, values } => layered_field(mesh, *layers, values),
        FieldSpec::Inclusions { background, inclusions, lattices } => {
            let mut all = inclusions.clone();
            for l in lattices {
                all.extend(Inclusion::square_lattice(l.period, (l.offset[0], l.offset[1]), l.half, l.value));
            }
            point_field(mesh, *background, &all)
        }
        FieldSpec::File { path } => load_field(path, mesh),
    }
}

pub fn build_indicators(
    spec: &ContinuaSpec,
    field: &CoefficientField,
    mesh: &FineMesh,
    part: &CoarsePartition,
) -> Result<IndicatorSet> {
    let values = match &spec.values {
        Some(v) => v.clone(),
        None => {
            let mut v = field.values().to_vec();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v
        }
    };
    let classes: Vec<ValueClass> = values.iter().map(|&v| ValueClass::exact(v)).collect();
    let mixing: Option<Vec<Vec<usize>>> =
        spec.mixing.as_ref().map(|m| m.iter().map(|c| c.iter().map(|k| k - 1).collect()).collect());
    indicators_from_values(field, mesh, part, &classes, mixing.as_deref())
}

fn indicator_hash(ind: &IndicatorSet) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for k in 0..ind.num_continua() {
        for &b in ind.mask(k) {
            h ^= b as u64 + 1;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Everything up to and including the coarse block forms.
pub struct Model {
    pub config: ExperimentConfig,
    pub mesh: FineMesh,
    pub part: CoarsePartition,
    pub field: CoefficientField,
    pub indicators: IndicatorSet,
    pub layers: usize,
    pub basis: CellBasis,
    pub tensors: Vec<EffectiveTensors>,
    /// Tensors the plan was computed from.
    pub reference: EffectiveTensors,
    pub a_tilde: DMatrix<f64>,
    pub plan: SplittingPlan,
    pub down: DownscaledBasis,
    pub system: BlockSystem,
    pub stability: StabilityReport,
    pub b_antisymmetry: f64,
    /// Wall seconds per stage.
    pub timings: Vec<(String, f64)>,
}

impl Model {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        Self::build_with_cache(config, None)
    }

    /// Builds the model, reusing (and refreshing) the cell basis stored at `cache`.
    pub fn build_with_cache(config: &ExperimentConfig, cache: Option<&Path>) -> Result<Self> {
        let mut timings = Vec::new();
        let mut clock = Instant::now();
        let mut lap = |name: &str, timings: &mut Vec<(String, f64)>| {
            timings.push((name.to_string(), clock.elapsed().as_secs_f64()));
            clock = Instant::now();
        };
        let (mesh, part) = build_meshes(config.mesh.nx, config.mesh.n_h)?;
        let field = build_field(&config.field, &mesh)?;
        let indicators = build_indicators(&config.continua, &field, &mesh, &part)?;
        let layers = config.cell.layers.unwrap_or_else(|| default_layers(part.coarse_h()));
        lap("field", &mut timings);

        let key = CacheKey {
            field_hash: field.fingerprint(),
            indicator_hash: indicator_hash(&indicators),
            nx: mesh.n() as u64,
            n_blocks: part.n_blocks() as u64,
            layers: layers as u64,
            bc: config.cell.bc,
        };
        let cached = match cache.filter(|p| p.exists()) {
            Some(p) => CellBasis::load_cache(p, &key)?,
            None => None,
        };
        let basis = match cached {
            Some(b) => b,
            None => {
                let solver = CellSolver::new(&mesh, &part, &field, &indicators, config.cell.bc)?;
                let b = CellBasis::compute(&solver, layers)?;
                if let Some(p) = cache {
                    b.save_cache(p, &key)?;
                }
                b
            }
        };
        lap("cell_problems", &mut timings);

        let tensors = compute_all(&mesh, &part, &field, &basis)?;
        let reference = match config.split.reference {
            PlanReference::Central => tensors[part.central_block()].clone(),
            PlanReference::Median => median_tensors(&tensors)?,
        };
        let a_tilde = reduce_tensor(&reference.a)?;
        lap("tensors", &mut timings);

        let n = indicators.num_continua();
        let block = reference.block;
        let plan = match config.split.mode {
            SplitKind::Eigen => SplittingPlan::from_eigen(&a_tilde, reference.mass(), config.split.threshold, block)?,
            SplitKind::Index => {
                let explicit: Vec<usize> = config.split.explicit.iter().map(|k| k - 1).collect();
                SplittingPlan::index_partition(n, &explicit, block)?
            }
            SplitKind::None => SplittingPlan::all_implicit(n, block),
        };
        lap("splitting", &mut timings);

        let recombined = basis.recombine(&plan.v)?;
        let down = DownscaledBasis::build(&part, &recombined)?;
        let system = BlockSystem::assemble(&mesh, &part, &field, &down, plan.i0)?;
        lap("block_forms", &mut timings);

        let (m11, m12, m22) = (system.sub(&system.m, 1, 1), system.sub(&system.m, 1, 2), system.sub(&system.m, 2, 2));
        let gamma = gamma_constant(&m11, &m12, &m22)?;
        let (tau_max1, tau_max2) =
            stability_bounds(&m22, &system.sub(&system.a, 2, 2), &system.sub(&system.c, 2, 2), gamma)?;
        let c1 = inverse_constant(&part)?;
        let (estimate1, estimate2) = closed_form_estimates(&plan, reference.mass(), reference.reaction(), c1, part.coarse_h())?;
        let stability = StabilityReport { gamma, tau_max1, tau_max2, estimate1, estimate2, c1 };
        let b_antisymmetry = system.b_antisymmetry(8, config.seed);
        lap("stability", &mut timings);

        Ok(Self {
            config: config.clone(),
            mesh,
            part,
            field,
            indicators,
            layers,
            basis,
            tensors,
            reference,
            a_tilde,
            plan,
            down,
            system,
            stability,
            b_antisymmetry,
            timings,
        })
    }

    pub fn source(&self) -> fn(f64, f64, f64) -> f64 {
        match self.config.time.source {
            SourceKind::Default => default_source,
            SourceKind::Zero => zero_source,
        }
    }

    /// Integrates the coarse system from zero initial data up to `T`.
    pub fn simulate(&self, scheme: Scheme) -> Result<CoarseRun> {
        let start = Instant::now();
        let tau = self.config.time.tau;
        let stepper = Stepper::new(&self.system, scheme, tau)?;
        let steps = self.config.time.steps();
        let source = self.source();
        let n1 = self.system.n1();
        let group_norms = |u: &[f64]| {
            let sq = |s: &[f64]| s.iter().map(|x| x * x).sum::<f64>().sqrt();
            [sq(&u[..n1]), sq(&u[n1..])]
        };
        let mut layers = Vec::with_capacity(steps + 1);
        let mut energy = Vec::with_capacity(steps);
        let mut norms = Vec::with_capacity(steps + 1);
        let stopped = integrate(&stepper, &self.system, &source, None, steps, &mut |n, curr, next| {
            if n == 0 {
                layers.push(curr.to_vec());
                norms.push(group_norms(curr));
            }
            layers.push(next.to_vec());
            norms.push(group_norms(next));
            energy.push(stepper.energy(curr, next));
        });
        let totals: Vec<f64> = norms.iter().map(|[a, b]| a.hypot(*b)).collect();
        let blowup = stopped.or_else(|| blowup_detect(&totals));
        Ok(CoarseRun { scheme, tau, layers, energy, norms, blowup, wall: start.elapsed().as_secs_f64() })
    }

    /// Fine-grid reference layers (full nodal vectors) on the coarse time grid.
    pub fn reference_solution(&self) -> Result<Vec<Vec<f64>>> {
        let zero = |_: f64, _: f64| 0.0;
        let source = self.source();
        fine_wave_reference(&self.mesh, &self.field, &source, &zero, &zero, self.config.time.tau, self.config.time.steps())
    }

    /// Original coarse variables `[k][node]` of a recombined coarse vector.
    pub fn original_variables(&self, u: &[f64]) -> Vec<Vec<f64>> {
        let per = self.system.dofs.split(u);
        let nn = self.system.dofs.num_nodes();
        let n = per.len();
        let mut out = vec![vec![0.0; nn]; n];
        for node in 0..nn {
            let hat: Vec<f64> = per.iter().map(|p| p[node]).collect();
            for (j, v) in self.plan.to_original(&hat).into_iter().enumerate() {
                out[j][node] = v;
            }
        }
        out
    }

    pub fn errors(&self, run: &CoarseRun, fine: &[Vec<f64>]) -> Result<ErrorSeries> {
        let coarse: Vec<Vec<Vec<f64>>> = run.layers.iter().map(|u| self.original_variables(u)).collect();
        let fine = &fine[..coarse.len().min(fine.len())];
        relative_error(
            &self.system.dofs,
            &coarse,
            fine,
            &self.mesh,
            &self.part,
            &self.indicators,
            run.tau,
            run.scheme.name(),
            self.layers,
        )
    }

    /// `index,lambda,group,v_1..v_N`; group is `explicit` for the first `i₀` rows.
    pub fn plan_csv(&self) -> String {
        let n = self.plan.n();
        let mut s = String::from("index,lambda,group");
        for j in 1..=n {
            let _ = write!(s, ",v_{j}");
        }
        s.push('\n');
        for i in 0..n {
            let lam = self.plan.lambda.get(i).copied().unwrap_or(f64::NAN);
            let group = if i < self.plan.i0 { "explicit" } else { "implicit" };
            let _ = write!(s, "{},{lam:e},{group}", i + 1);
            for j in 0..n {
                let _ = write!(s, ",{:e}", self.plan.v[(i, j)]);
            }
            s.push('\n');
        }
        s
    }

    /// `gamma,tau_max1,tau_max2,estimate1,estimate2,c1,tau,i0`.
    pub fn stability_csv(&self) -> String {
        let st = &self.stability;
        format!(
            "gamma,tau_max1,tau_max2,estimate1,estimate2,c1,tau,i0\n{:e},{:e},{:e},{:e},{:e},{:e},{:e},{}\n",
            st.gamma, st.tau_max1, st.tau_max2, st.estimate1, st.estimate2, st.c1, self.config.time.tau, self.plan.i0
        )
    }
}

/// Coarse trajectory of one scheme.
#[derive(Debug, Clone)]
pub struct CoarseRun {
    pub scheme: Scheme,
    pub tau: f64,
    /// Recombined coarse vectors `U⁰, U¹, …` (stops early at non-finite values).
    pub layers: Vec<Vec<f64>>,
    /// `energy[n]` between layers `n` and `n + 1`.
    pub energy: Vec<f64>,
    /// Euclidean norms of the implicit and explicit groups per layer.
    pub norms: Vec<[f64; 2]>,
    pub blowup: Option<usize>,
    pub wall: f64,
}

impl CoarseRun {
    /// `t,norm_implicit,norm_explicit,energy`; row `n` holds layer `n + 1` and the energy
    /// between `t - τ` and `t`.
    pub fn energy_csv(&self) -> String {
        let mut s = String::from("t,norm_implicit,norm_explicit,energy\n");
        for (n, e) in self.energy.iter().enumerate() {
            let [a, b] = self.norms[n + 1];
            let _ = writeln!(s, "{},{a:e},{b:e},{e:e}", (n + 1) as f64 * self.tau);
        }
        s
    }
}

/// Outcome of [`run`].
#[derive(Debug, Clone)]
pub struct RunReport {
    pub dir: PathBuf,
    pub blowups: Vec<(Scheme, Option<usize>)>,
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn finite_or_null(x: f64) -> serde_json::Value {
    if x.is_finite() {
        serde_json::json!(x)
    } else {
        serde_json::Value::Null
    }
}

/// Runs the full protocol and writes all artifacts into `dir` (or `output.dir`, or
/// `out/<name>`).
pub fn run(config: &ExperimentConfig) -> Result<RunReport> {
    let dir = config.output.dir.clone().unwrap_or_else(|| PathBuf::from("out").join(&config.name));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let work = || -> Result<RunReport> {
        let total = Instant::now();
        let cache = config.output.cache.then(|| dir.join("cell_basis.bin"));
        let model = Model::build_with_cache(config, cache.as_deref())?;
        write(&dir, "field.txt", &model.field.to_text())?;
        write(&dir, "tensors.csv", &tensors_csv(&model.tensors))?;
        write(&dir, "plan.csv", &model.plan_csv())?;
        write(&dir, "stability.csv", &model.stability_csv())?;

        let clock = Instant::now();
        let fine = model.reference_solution()?;
        let fine_wall = clock.elapsed().as_secs_f64();

        let mut blowups = Vec::new();
        let mut scheme_info = Vec::new();
        for &scheme in &config.time.schemes {
            let run = model.simulate(scheme)?;
            write(&dir, &format!("energy_{scheme}.csv"), &run.energy_csv())?;
            let errors = model.errors(&run, &fine)?;
            write(&dir, &format!("errors_{scheme}.csv"), &errors.to_csv())?;
            let last: Vec<serde_json::Value> =
                errors.last().unwrap_or(&[]).iter().map(|e| e.map_or(serde_json::Value::Null, finite_or_null)).collect();
            scheme_info.push(serde_json::json!({
                "scheme": scheme.name(),
                "blowup_step": run.blowup,
                "final_errors": last,
                "wall_seconds": run.wall,
            }));
            blowups.push((scheme, run.blowup));
        }

        let mut timings: serde_json::Map<String, serde_json::Value> =
            model.timings.iter().map(|(k, v)| (k.clone(), serde_json::json!(v))).collect();
        timings.insert("fine_reference".into(), serde_json::json!(fine_wall));
        timings.insert("total".into(), serde_json::json!(total.elapsed().as_secs_f64()));
        let st = &model.stability;
        let manifest = serde_json::json!({
            "config": config,
            "H": model.part.coarse_h(),
            "l": model.layers,
            "tau": config.time.tau,
            "steps": config.time.steps(),
            "n_continua": model.indicators.num_continua(),
            "gamma": st.gamma,
            "tau_max1": finite_or_null(st.tau_max1),
            "tau_max2": finite_or_null(st.tau_max2),
            "estimate1": finite_or_null(st.estimate1),
            "estimate2": finite_or_null(st.estimate2),
            "lambda": model.plan.lambda,
            "i0": model.plan.i0,
            "plan_block": model.plan.block,
            "b_antisymmetry": finite_or_null(model.b_antisymmetry),
            "dropped_term_ratio": finite_or_null(model.reference.dropped_term_ratio(model.part.coarse_h())),
            "schemes": scheme_info,
            "wall_seconds": timings,
        });
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Invariant(e.to_string()))?;
        write(&dir, "manifest.json", &text)?;
        Ok(RunReport { dir: dir.clone(), blowups })
    };
    match config.threads {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {k} threads: {e}")))?
            .install(work),
        None => work(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn source_values() {
        assert_eq!(default_source(0.5, 0.5, 0.0), 1000.0);
        assert!((default_source(0.75, 0.5, 0.0) - 1000.0 * (-2.5f64).exp()).abs() < 1e-10);
        let ts: Vec<f64> = (0..20).map(|k| default_source(0.3, 0.6, k as f64 * 0.1)).collect();
        assert!(ts.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn small_uniform_run_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = builtin("uniform").unwrap();
        cfg.mesh = MeshSpec { nx: 40, n_h: 4 };
        cfg.cell.layers = Some(1);
        cfg.time.t_final = 0.01;
        cfg.output.dir = Some(dir.path().to_path_buf());
        let report = run(&cfg).unwrap();
        assert!(report.blowups.iter().all(|(_, b)| b.is_none()));
        for f in ["plan.csv", "stability.csv", "field.txt", "tensors.csv", "manifest.json", "errors_scheme1.csv", "energy_implicit.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let errors = std::fs::read_to_string(dir.path().join("errors_implicit.csv")).unwrap();
        assert!(errors.starts_with("t,e_1,scheme,H,l\n"));
        assert_eq!(errors.lines().count(), 12);
    }
}
