use std::fs;
use std::path::{Path, PathBuf};

use deq_core::condition::{self, InitBounds};
use deq_core::data::{self, Dataset, Provenance};
use deq_core::gradcheck::{self, FdConfig, Orientation};
use deq_core::kernel;
use deq_core::lab::{self, ConcentrationReport};
use deq_core::linalg;
use deq_core::model::{self, Checkpoint, DeqParams, SolverConfig};
use deq_core::rng;
use deq_core::train::{self, ResumeState, TrainTrace};
use deq_core::DeqError;

use crate::config::{DataKind, ExperimentConfig};
use crate::error::{CliError, Context};
use crate::svg::{Plot, Series};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Threshold of the dense Kronecker comparison in `grad-check`.
pub const KRONECKER_TOL: f64 = 1e-8;

/// What a command printed and wrote.
#[derive(Debug, Default)]
pub struct Report {
    pub lines: Vec<String>,
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

impl Report {
    fn say(&mut self, line: impl Into<String>) {
        self.lines.push(line.into());
    }
}

/// Writes files into the output directory, stamping each with provenance.
struct Outputs {
    dir: PathBuf,
    meta: String,
}

impl Outputs {
    fn new(cfg: &ExperimentConfig, seeds: &str) -> Result<Self, CliError> {
        let dir = cfg.output.directory.clone();
        fs::create_dir_all(&dir).map_err(|source| CliError::Io { path: dir.clone(), source })?;
        Ok(Self {
            dir,
            meta: format!("deq version={VERSION} config_hash={} {seeds}", cfg.hash()),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn raw(&self, report: &mut Report, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|source| CliError::Io { path: path.clone(), source })?;
        report.files.push(path.clone());
        Ok(path)
    }

    /// CSV and TOML files get a leading `#` comment with the provenance.
    fn text(&self, report: &mut Report, name: &str, body: &str) -> Result<PathBuf, CliError> {
        self.raw(report, name, format!("# {}\n{body}", self.meta).as_bytes())
    }

    #[allow(clippy::too_many_arguments)]
    fn plot(&self, report: &mut Report, name: &str, title: &str, x_label: &str, y_label: &str, log_y: bool, series: &[Series]) -> Result<PathBuf, CliError> {
        let svg = Plot {
            title,
            x_label,
            y_label,
            log_y,
            meta: &self.meta,
        }
        .render(series);
        self.raw(report, name, svg.as_bytes())
    }
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    let d = &cfg.data;
    let path = |p: &Option<PathBuf>| p.clone().expect("validated");
    match d.kind {
        DataKind::Synthetic => data::gen_sphere_data(d.n, d.d, d.seed).context("data_pipeline: synthetic data"),
        DataKind::Csv => data::load_dataset_csv(path(&d.x_path), path(&d.y_path)).context("data_pipeline: csv"),
        DataKind::Mnist => {
            let raw = data::load_idx(path(&d.images_path), path(&d.labels_path)).context("data_pipeline: mnist")?;
            data::subset_binary(&raw, d.classes[0], d.classes[1], d.per_class, d.seed, Provenance::Mnist).context("data_pipeline: mnist subset")
        }
        DataKind::Cifar10 => {
            let raw = data::load_cifar_bin(path(&d.batch_path)).context("data_pipeline: cifar10")?;
            data::subset_binary(&raw, d.classes[0], d.classes[1], d.per_class, d.seed, Provenance::Cifar10).context("data_pipeline: cifar10 subset")
        }
    }
}

fn init_model(cfg: &ExperimentConfig, d: usize) -> Result<DeqParams, CliError> {
    model::init_params(cfg.model.m, d, cfg.model.sigma_w2, cfg.model.seed).context("deq_model: init")
}

fn toml_f64(v: f64) -> String {
    // TOML spells non-finite values as nan / inf
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:?}")
    }
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let mut report = Report::default();
    let ds = load_dataset(cfg)?;
    if ds.n() == 1 {
        report
            .warnings
            .push("n = 1: the pairwise non-parallel condition is vacuous".into());
    }
    let out = Outputs::new(cfg, &format!("seed={}", cfg.data.seed))?;
    out.text(&mut report, "x.csv", &data::matrix_to_csv(ds.x()))?;
    out.text(&mut report, "y.csv", &data::labels_to_csv(ds.y()))?;
    let sidecar = format!(
        "seed = {}\nprovenance = \"{}\"\nn = {}\nd = {}\nconfig_hash = \"{}\"\nversion = \"{VERSION}\"\n",
        cfg.data.seed,
        ds.provenance().as_str(),
        ds.n(),
        ds.d(),
        cfg.hash()
    );
    out.raw(&mut report, "dataset.meta.toml", sidecar.as_bytes())?;
    report.say(format!("wrote {} points in d = {} ({})", ds.n(), ds.d(), ds.provenance().as_str()));
    Ok(report)
}

pub fn kernel_cmd(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let mut report = Report::default();
    let ds = load_dataset(cfg)?;
    let (s2, k) = (cfg.model.sigma_w2, &cfg.kernel);
    let inf = kernel::kernel_fixed_point(ds.x(), s2, k.tol).context("population_kernel: fixed point")?;
    let decay = lab::kernel_depth_decay(ds.x(), s2, k.l_max).context("population_kernel: depth decay")?;
    let out = Outputs::new(cfg, &format!("data_seed={}", cfg.data.seed))?;
    out.text(&mut report, "kernel_K.csv", &data::matrix_to_csv(&inf.k))?;
    out.text(&mut report, "kernel_cos.csv", &data::matrix_to_csv(&inf.cos_theta))?;
    out.text(&mut report, "kernel_depth_decay.csv", &lab::series_csv("kernel_depth_decay", 0, &decay))?;
    let pts = decay.iter().enumerate().map(|(i, &v)| ((i + 1) as f64, v)).collect();
    out.plot(&mut report, "kernel_depth_decay.svg", "||K - K^(l)||_F", "l", "error", true, &[Series::new("population", pts)])?;

    let n = ds.n();
    let mut body = format!(
        "n = {n}\nsigma_w2 = {}\nlambda_star = {}\npositive_definite = {}\nmax_offdiag_cos = {}\n",
        toml_f64(s2),
        toml_f64(inf.lambda_star),
        inf.is_positive_definite(),
        toml_f64(inf.max_offdiag_cos())
    );
    report.say(format!("lambda_star = {:e}", inf.lambda_star));
    if inf.is_positive_definite() {
        let width = kernel::suggested_width(n, inf.lambda_star, k.failure_prob, k.width_constant).context("population_kernel: width")?;
        let depth = kernel::suggested_depth(n, inf.lambda_star, s2, k.depth_constant).context("population_kernel: depth")?;
        body.push_str(&format!("suggested_width = {width}\nsuggested_depth = {depth}\n"));
        report.say(format!("suggested width (C = {}) = {width}", k.width_constant));
        report.say(format!("suggested depth (C = {}) = {depth}", k.depth_constant));
    }
    out.text(&mut report, "kernel_report.toml", &body)?;
    if !inf.is_positive_definite() {
        return Err(CliError::Core {
            context: "population_kernel".into(),
            source: DeqError::Assumption(format!("kernel is not positive definite (lambda* = {:e}); the data has (near-)parallel points", inf.lambda_star)),
        });
    }
    Ok(report)
}

fn bounds_lines(b: &InitBounds) -> String {
    format!(
        "delta,{:?}\nrho_w,{:?}\nrho_u,{:?}\nrho_a,{:?}\nc_w,{:?}\nc_u,{:?}\nc_a,{:?}\n",
        b.delta, b.rho_w, b.rho_u, b.rho_a, b.c_w, b.c_u, b.c_a
    )
}

pub fn check(cfg: &ExperimentConfig, zero_residual: bool) -> Result<Report, CliError> {
    let mut report = Report::default();
    let mut ds = load_dataset(cfg)?;
    let p = init_model(cfg, ds.d())?;
    let bounds = condition::init_bounds(&p, None).context("condition_checker: init bounds")?;
    let sol = model::solve_equilibrium(&p, ds.x(), &cfg.solver.to_solver()).context("deq_model: equilibrium")?;
    let yhat = model::predict(&p, &sol.z).context("deq_model: predict")?;
    if zero_residual {
        ds = ds.with_labels(yhat.clone()).context("data_pipeline: labels")?;
    }
    let lambda_0 = linalg::min_eig_sym(&linalg::gram(&sol.z), 1e-12).context("tensor_core: least eigenvalue")?;
    let residual = (&yhat - ds.y()).norm();
    let rep = condition::check_condition(&bounds, lambda_0.max(0.0), ds.x(), residual).context("condition_checker")?;

    let out = Outputs::new(cfg, &format!("data_seed={} model_seed={}", cfg.data.seed, cfg.model.seed))?;
    out.text(&mut report, "condition_report.csv", &format!("{}{}", rep.to_csv(), bounds_lines(&bounds)))?;
    report.say(format!("lambda_0 = {:e}", rep.lambda_0));
    for k in 0..3 {
        report.say(format!("inequality {}: margin {:e} ({})", k + 1, rep.margins[k], if rep.satisfied[k] { "holds" } else { "fails" }));
    }
    report.say(format!("eta_max = {:e}", rep.eta_max));
    Ok(report)
}

fn trace_plots(out: &Outputs, report: &mut Report, trace: &TrainTrace) -> Result<(), CliError> {
    let pick = |f: fn(&train::TrainRecord) -> f64| trace.records.iter().map(|r| (r.step as f64, f(r))).collect::<Vec<_>>();
    out.plot(report, "loss.svg", "training loss", "step", "loss", true, &[Series::new("loss", pick(|r| r.loss)), Series::new("envelope", pick(|r| r.rate_envelope))])?;
    out.plot(report, "lambda.svg", "least eigenvalue of the Gram matrix", "step", "lambda_tau", false, &[Series::new("lambda_tau", pick(|r| r.lambda_tau))])?;
    out.plot(report, "w_norm.svg", "spectral norm of W", "step", "||W||_2", false, &[Series::new("||W||_2", pick(|r| r.w_spec_norm))])?;
    Ok(())
}

fn train_summary(trace: &TrainTrace) -> String {
    let mut s = format!(
        "start_step = {}\nend_step = {}\neta = {}\neta_sanctioned = {}\nlambda_0 = {}\nphi_0 = {}\nfinal_loss = {}\nviolations = {}\n",
        trace.start_step,
        trace.end_step,
        toml_f64(trace.eta),
        trace.eta_sanctioned,
        toml_f64(trace.lambda_0),
        toml_f64(trace.phi_0),
        toml_f64(trace.final_loss()),
        trace.violations.len()
    );
    if let Some(c) = &trace.condition {
        s.push_str(&format!(
            "eta_max = {}\ncondition_margins = [{}, {}, {}]\ncondition_satisfied = [{}, {}, {}]\n",
            toml_f64(c.eta_max),
            toml_f64(c.margins[0]),
            toml_f64(c.margins[1]),
            toml_f64(c.margins[2]),
            c.satisfied[0],
            c.satisfied[1],
            c.satisfied[2]
        ));
    }
    s
}

pub fn train_cmd(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let mut report = Report::default();
    let ds = load_dataset(cfg)?;
    let tcfg = cfg.train_config()?;
    let (p0, resume) = match &cfg.train.resume_from {
        Some(path) => {
            let ck = Checkpoint::load(path).context("deq_model: checkpoint")?;
            let state = ResumeState::from_checkpoint(&ck).context("trainer: resume")?;
            (ck.params, Some(state))
        }
        None => (init_model(cfg, ds.d())?, None),
    };
    let out = Outputs::new(cfg, &format!("data_seed={} model_seed={}", cfg.data.seed, cfg.model.seed))?;
    let every = cfg.train.checkpoint_every;
    let start = resume.map_or(0, |r| r.step);
    let mut saved = Vec::new();
    let mut last: Option<Checkpoint> = None;
    let result = train::train_with(&p0, &ds, &tcfg, resume.as_ref(), |view| {
        if let Some(e) = every {
            if view.step % e == 0 && !(resume.is_some() && view.step == start) {
                let path = out.path(&format!("ckpt_{:06}.bin", view.step));
                view.checkpoint().save(&path)?;
                saved.push(path);
            }
        }
        last = Some(view.checkpoint());
        Ok(())
    });
    report.files.extend(saved);
    let (_, trace) = result.context("trainer")?;
    if let Some(ck) = last {
        out.raw(&mut report, "ckpt_final.bin", &ck.to_bytes())?;
    }

    // a resumed run extends an existing metrics file that ends at its start step
    let metrics = out.path("metrics.csv");
    let rows: String = trace.records.iter().map(|r| r.csv_row() + "\n").collect();
    let continues = resume.is_some()
        && fs::read_to_string(&metrics)
            .ok()
            .and_then(|t| t.lines().last().map(|l| l.split(',').next() == Some(&start.to_string())))
            .unwrap_or(false);
    if continues {
        let mut text = fs::read_to_string(&metrics).map_err(|source| CliError::Io { path: metrics.clone(), source })?;
        text.push_str(&rows);
        out.raw(&mut report, "metrics.csv", text.as_bytes())?;
    } else {
        out.text(&mut report, "metrics.csv", &trace.to_csv())?;
    }
    trace_plots(&out, &mut report, &trace)?;
    out.text(&mut report, "train_summary.toml", &train_summary(&trace))?;

    report.say(format!("eta = {:e} ({})", trace.eta, if trace.eta_sanctioned { "within the theoretical ceiling" } else { "above the theoretical ceiling" }));
    report.say(format!("loss {:e} -> {:e} over steps {}..{}", trace.phi_0, trace.final_loss(), trace.start_step, trace.end_step));
    let max_w = trace.records.iter().map(|r| r.w_spec_norm).fold(0.0, f64::max);
    report.say(format!("max ||W||_2 = {max_w:.6}"));
    if !trace.violations.is_empty() {
        report.say(format!("{} monitor violations recorded (see train_summary.toml)", trace.violations.len()));
        for v in trace.violations.iter().take(5) {
            report.warnings.push(format!("step {}: {:?}: {}", v.step, v.kind, v.detail));
        }
    }
    Ok(report)
}

fn report_outputs(out: &Outputs, report: &mut Report, rep: &ConcentrationReport, y_label: &str) -> Result<(), CliError> {
    let name = &rep.experiment;
    out.text(report, &format!("{name}.csv"), &rep.to_csv())?;
    out.text(report, &format!("{name}_summary.csv"), &rep.summary_csv())?;
    let quart = |k: usize| rep.cells.iter().map(|c| (c.m as f64, c.quartiles()[k])).collect::<Vec<_>>();
    out.plot(report, &format!("{name}.svg"), name, "m", y_label, true, &[Series::new("median", quart(1)), Series::new("q1", quart(0)), Series::new("q3", quart(2))])?;
    Ok(())
}

pub fn concentration(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let mut report = Report::default();
    let ds = load_dataset(cfg)?;
    let c = &cfg.concentration;
    let s2 = cfg.model.sigma_w2;
    let out = Outputs::new(cfg, &format!("data_seed={} model_seed={} base_seed={}", cfg.data.seed, cfg.model.seed, c.base_seed))?;
    for exp in &c.experiments {
        match exp.as_str() {
            "kernel_depth_decay" => {
                let s = lab::kernel_depth_decay(ds.x(), s2, c.l_max).context("concentration_lab: kernel depth decay")?;
                out.text(&mut report, "kernel_depth_decay.csv", &lab::series_csv(exp, 0, &s))?;
                let pts = s.iter().enumerate().map(|(i, &v)| ((i + 1) as f64, v)).collect();
                out.plot(&mut report, "kernel_depth_decay.svg", exp, "l", "||K - K^(l)||_F", true, &[Series::new("population", pts)])?;
                report.say(format!("kernel_depth_decay: l = {} error {:e}", c.l_max, s[c.l_max - 1]));
            }
            "equilibrium_depth_decay" => {
                let p = init_model(cfg, ds.d())?;
                let s = lab::equilibrium_depth_decay(&p, ds.x(), c.l_max, &cfg.solver.to_solver()).context("concentration_lab: equilibrium depth decay")?;
                out.text(&mut report, "equilibrium_depth_decay.csv", &lab::series_csv(exp, p.m(), &s))?;
                let pts = s.iter().enumerate().map(|(i, &v)| ((i + 1) as f64, v)).collect();
                out.plot(&mut report, "equilibrium_depth_decay.svg", exp, "l", "(1/m)||G - G^(l)||_F", true, &[Series::new(format!("m={}", p.m()), pts)])?;
                report.say(format!("equilibrium_depth_decay: l = {} error {:e}", c.l_max, s[c.l_max - 1]));
            }
            "tied_vs_population" => {
                let rep = lab::tied_vs_population(ds.x(), s2, &c.m_list, c.l, c.trials, c.base_seed).context("concentration_lab: tied vs population")?;
                report_outputs(&out, &mut report, &rep, "||G^(l)/m - K^(l)||_F")?;
                for cell in &rep.cells {
                    report.say(format!("tied_vs_population: m = {} median {:e}", cell.m, cell.median()));
                }
            }
            "lambda0_vs_width" => {
                let rep = lab::lambda0_vs_width(ds.x(), s2, &c.m_list, c.trials, c.base_seed, &cfg.solver.to_solver()).context("concentration_lab: lambda0 vs width")?;
                report_outputs(&out, &mut report, &rep, "lambda_0 / (m lambda*)")?;
                let mut frac = String::from("m,fraction_at_least_half\n");
                for cell in &rep.cells {
                    let f = cell.fraction_at_least(0.5);
                    frac.push_str(&format!("{},{f:?}\n", cell.m));
                    report.say(format!("lambda0_vs_width: m = {} median ratio {:.4}, fraction >= 1/2: {f}", cell.m, cell.median()));
                }
                out.text(&mut report, "lambda0_fractions.csv", &frac)?;
            }
            other => return Err(CliError::Config(format!("unknown experiment {other:?}"))),
        }
    }
    Ok(report)
}

pub fn reconstruct(cfg: &ExperimentConfig, i: usize, j: usize, l: usize) -> Result<Report, CliError> {
    let mut report = Report::default();
    let ds = load_dataset(cfg)?;
    let p = init_model(cfg, ds.d())?;
    let r = lab::fresh_randomness_reconstruct(&p, ds.x(), i, j, l).context("concentration_lab: reconstruction")?;
    let out = Outputs::new(cfg, &format!("data_seed={} model_seed={}", cfg.data.seed, cfg.model.seed))?;
    out.text(
        &mut report,
        "reconstruct.csv",
        &format!("i,j,l,identity_error,inner_product_error\n{i},{j},{l},{:?},{:?}\n", r.identity_error, r.inner_product_error),
    )?;
    report.say(format!("identity error      = {:e}", r.identity_error));
    report.say(format!("inner-product error = {:e}", r.inner_product_error));
    Ok(report)
}

pub fn grad_check(cfg: &ExperimentConfig, corrupt: bool) -> Result<Report, CliError> {
    let mut report = Report::default();
    let g = &cfg.grad_check;
    let ds = data::gen_sphere_data(g.n, g.d, g.seed).context("grad-check: data_pipeline")?;
    let mut p = model::init_params(g.m, g.d, g.sigma_w2, rng::splitmix64(g.seed)).context("grad-check: deq_model init")?;
    p.w *= g.w_scale;
    let (w_norm, ok) = model::well_posedness(&p, 0.0).context("grad-check: deq_model")?;
    if !ok {
        return Err(CliError::Core {
            context: "grad-check: deq_model well-posedness at step 0".into(),
            source: DeqError::WellPosedness { spec_norm: w_norm, bound: 1.0 },
        });
    }
    let solver = SolverConfig {
        tol: g.solver_tol,
        max_iter: 100_000,
    };
    let z = model::solve_equilibrium(&p, ds.x(), &solver).context("grad-check: deq_model equilibrium")?.z;
    let mut analytic = deq_core::grad::gradients(&p, &z, ds.x(), ds.y(), &solver).context("grad-check: implicit_grad")?;
    if corrupt {
        let v = analytic.gw[(0, 0)];
        analytic.gw[(0, 0)] = v + 0.1 * (v.abs() + 1e-3);
    }
    let fd_cfg = FdConfig {
        step: g.step,
        solver_tol: g.solver_tol,
        kink_tol: g.kink_tol,
        rel_tol: g.rel_tol,
        ..FdConfig::default()
    };
    let fd = gradcheck::finite_difference_check(&p, ds.x(), ds.y(), &analytic, &fd_cfg).context("grad-check: finite differences")?;
    let mut rows = format!(
        "check,value,threshold,passed\nfd_max_rel_err,{:?},{:?},{}\nfd_checked,{},,\nfd_skipped,{},,\n",
        fd.max_rel_err,
        g.rel_tol,
        fd.passed(),
        fd.checked,
        fd.skipped
    );
    report.say(format!("finite differences: {} entries checked, {} skipped near kinks, max rel err {:e}", fd.checked, fd.skipped, fd.max_rel_err));
    let mut passed = fd.passed();
    if g.m * g.n <= 2500 {
        let dense = gradcheck::kronecker_gradients(&p, &z, ds.x(), ds.y(), Orientation::IdentityKronAT).context("grad-check: kronecker form")?;
        let diff = gradcheck::max_relative_difference(&analytic, &dense);
        rows.push_str(&format!("kronecker_rel_diff,{diff:?},{KRONECKER_TOL:?},{}\n", diff <= KRONECKER_TOL));
        report.say(format!("dense Kronecker form: max rel diff {diff:e}"));
        passed &= diff <= KRONECKER_TOL;
    }
    let out = Outputs::new(cfg, &format!("seed={}", g.seed))?;
    out.text(&mut report, "grad_check.csv", &rows)?;
    if !passed {
        let first = fd.failures.first().map(|f| format!(" (first mismatch {:?}[{},{}]: analytic {:e}, numeric {:e})", f.group, f.row, f.col, f.analytic, f.numeric));
        return Err(CliError::CheckFailed(format!("gradient check failed{}", first.unwrap_or_default())));
    }
    report.say("PASS");
    Ok(report)
}

/// Reads a checkpoint path relative to the output directory if it is not found as given.
pub fn resolve(cfg: &ExperimentConfig, p: &Path) -> PathBuf {
    if p.exists() {
        p.to_path_buf()
    } else {
        cfg.output.directory.join(p)
    }
}
