//! Subcommand implementations. Each returns `Ok(())` or an error whose type
//! decides the exit code.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use log::{info, warn};
use ndarray::Array1;
use serde::Serialize;
use stein_encoder::data::{load_table, variance_prescreen};
use stein_encoder::experiments::{
    cross_validate, render_tables, run_comparison, synthetic_cohort, table_grid, CohortShape, ComparisonTable,
    CvReport, Model, Pc1, Setting, SimConfig,
};
use stein_encoder::pipeline::{encode, RegimeChoice};
use stein_encoder::regressor::{fit_with_safeguard, hstack, SafeguardedModel};
use stein_encoder::{fit, ColumnManifest, Dataset, MlpModel, Role};

use crate::artifacts::{
    create_dir, read_complete, read_json, read_vector, top_features, write_file, write_vector, FitArtifact,
    ModelKind, ModelSidecar, Prescreen, TopFeature,
};
use crate::config::RunConfig;
use crate::UsageError;

const TOP_FEATURES: usize = 20;

fn to_json<T: Serialize>(v: &T) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_file() {
        return Err(UsageError(format!("{what} {} does not exist", path.display())).into());
    }
    Ok(())
}

/// Loads a table and keeps the `top_genes` highest-variance features.
fn load_dataset(
    run: &mut RunConfig,
    data: &Path,
    manifest: &Path,
    top_genes: Option<usize>,
) -> anyhow::Result<(ColumnManifest, Dataset, Option<Prescreen>)> {
    require_file(data, "data file")?;
    require_file(manifest, "manifest")?;
    run.input("data", data);
    run.input("manifest", manifest);
    let m = ColumnManifest::from_path(manifest)?;
    let d = load_table(data, &m)?;
    info!("loaded n={} p={} q={}", d.n(), d.p(), d.q());
    match top_genes {
        None => Ok((m, d, None)),
        Some(k) => {
            let keep = variance_prescreen(d.z(), k)?;
            let available = d.q();
            let d = d.select_features(&keep)?;
            Ok((m, d, Some(Prescreen { kept: k, available })))
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SimulateOpts {
    pub model: Option<Model>,
    pub setting: Option<Setting>,
    pub p: Option<usize>,
    pub q: Option<usize>,
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
    pub reps: Option<usize>,
    pub snr: Option<f64>,
    pub grid: bool,
    pub high_dim_n: Option<usize>,
    pub no_mlp: bool,
    pub out: PathBuf,
}

#[derive(Serialize)]
struct SimulateReport<'a> {
    run: &'a RunConfig,
    tables: &'a [ComparisonTable],
}

pub fn simulate(mut run: RunConfig, file_sim: Option<SimConfig>, o: &SimulateOpts) -> anyhow::Result<()> {
    let mut sim = file_sim.unwrap_or_default();
    sim.base_seed = run.seed;
    macro_rules! set {
        ($field:ident, $value:expr) => {
            if let Some(v) = $value {
                sim.$field = v;
            }
        };
    }
    set!(model, o.model);
    set!(setting, o.setting);
    set!(p, o.p);
    set!(q, o.q);
    set!(n_train, o.n_train);
    set!(n_test, o.n_test);
    set!(replications, o.reps);
    set!(snr, o.snr);
    if o.grid && (o.model.is_some() || o.setting.is_some() || o.p.is_some() || o.q.is_some()) {
        return Err(UsageError("--grid fixes model, setting, p and q".into()).into());
    }
    if o.high_dim_n.is_some() && !o.grid {
        return Err(UsageError("--high-dim-n only applies with --grid".into()).into());
    }
    run.sim = Some(sim.clone());
    run.validate()?;
    let configs = if o.grid { table_grid(&sim, o.high_dim_n) } else { vec![sim] };
    for c in &configs {
        c.validate()?;
    }
    create_dir(&o.out)?;
    let mlp = (!o.no_mlp).then_some(&run.mlp);
    let mut tables = Vec::with_capacity(configs.len());
    for c in &configs {
        let t = run_comparison(c, &run.pipeline, mlp)?;
        if t.summary.completed == 0 {
            bail!("{}: every replication failed ({})", c.label(), t.failures[0].error);
        }
        for f in &t.failures {
            warn!("{} rep {}: {}", c.label(), f.rep, f.error);
        }
        tables.push(t);
    }
    write_file(&o.out.join("report.json"), &to_json(&SimulateReport { run: &run, tables: &tables })?)?;
    write_file(&o.out.join("report.txt"), &render_tables(&tables))?;
    let mut csv = String::new();
    for (i, t) in tables.iter().enumerate() {
        let body = t.to_csv();
        let skip = if i == 0 { 0 } else { body.find('\n').map_or(body.len(), |k| k + 1) };
        csv.push_str(&body[skip..]);
    }
    write_file(&o.out.join("replications.csv"), &csv)?;
    print!("{}", render_tables(&tables));
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum RegimeArg {
    Auto,
    Low,
    High,
}

impl From<RegimeArg> for RegimeChoice {
    fn from(r: RegimeArg) -> RegimeChoice {
        match r {
            RegimeArg::Auto => RegimeChoice::Auto,
            RegimeArg::Low => RegimeChoice::Low,
            RegimeArg::High => RegimeChoice::High,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOpts {
    pub data: PathBuf,
    pub manifest: PathBuf,
    pub top_genes: Option<usize>,
    pub regime: Option<RegimeArg>,
    pub emit_plot_data: bool,
    pub out: PathBuf,
}

fn render_fit(a: &FitArtifact) -> String {
    let r = &a.report;
    let e = &r.encoder;
    let mut s = String::new();
    let _ = writeln!(s, "response: {}  n={} p={} q={}", a.response, r.n, r.p, r.q);
    if let Some(ps) = &a.prescreen {
        let _ = writeln!(s, "prescreen: kept {} of {} features by variance", ps.kept, ps.available);
    }
    let nu = &r.nuisance;
    let _ = write!(s, "regime: {}", e.regime);
    if let (Some(l), Some(rho)) = (nu.lambda_a, nu.rho) {
        let _ = write!(s, "  lambda_A {l:.4}  rho {rho:.4}");
    }
    let _ = writeln!(s, "  nonzeros: A {}  Omega off-diagonal {}", nu.a_nonzeros, nu.omega_offdiag_nonzeros);
    let _ = writeln!(
        s,
        "selected: {} order {}  strength {:.4}{}",
        e.probe,
        u8::from(e.order),
        e.strength,
        if e.fallback_used { "  (fallback, nothing passed its threshold)" } else { "" }
    );
    let _ = writeln!(s, "\n{:<8} {:>6} {:>12} {:>12}  accepted", "probe", "order", "strength", "threshold");
    for d in &e.diagnostics {
        let _ = writeln!(
            s,
            "{:<10} {:>6} {:>12.4} {:>12.4}  {}",
            d.probe.to_string(),
            u8::from(d.order),
            d.strength,
            d.threshold,
            d.accepted
        );
    }
    let _ = writeln!(s, "\ntop features by |coefficient|:");
    for (i, f) in a.top_features.iter().enumerate() {
        let _ = writeln!(s, "{:>3}  {:<24} {:>10.5}", i + 1, f.name, f.coef);
    }
    for n in &r.notes {
        let _ = writeln!(s, "note: {n}");
    }
    s
}

pub fn fit_cmd(mut run: RunConfig, o: &FitOpts) -> anyhow::Result<()> {
    if let Some(r) = o.regime {
        run.pipeline.regime = r.into();
    }
    run.validate()?;
    let (m, d, prescreen) = load_dataset(&mut run, &o.data, &o.manifest, o.top_genes)?;
    create_dir(&o.out)?;
    let report = fit(&d, &run.pipeline)?;
    let top: Vec<TopFeature> = top_features(d.names_z(), report.encoder.gamma.view(), TOP_FEATURES);
    let artifact = FitArtifact {
        response: m.response().to_string(),
        nuisance_names: d.names_x().to_vec(),
        feature_names: d.names_z().to_vec(),
        categories: d.categories().clone(),
        prescreen,
        top_features: top,
        report,
        run,
    };
    write_file(&o.out.join("encoder.json"), &to_json(&artifact)?)?;
    let text = render_fit(&artifact);
    write_file(&o.out.join("report.txt"), &text)?;
    if o.emit_plot_data {
        let t = encode(artifact.encoder(), d.z())?;
        let pc = Pc1::fit(d.z())?.apply(d.z())?;
        let mut s = String::from("y,t_hat,pc1\n");
        for i in 0..d.n() {
            let _ = writeln!(s, "{},{},{}", d.y()[i], t[i], pc[i]);
        }
        write_file(&o.out.join("plot_data.csv"), &s)?;
    }
    print!("{text}");
    Ok(())
}

pub fn encode_cmd(encoder: &Path, data: &Path, out: &Path) -> anyhow::Result<()> {
    require_file(encoder, "encoder")?;
    require_file(data, "data file")?;
    let a = FitArtifact::load(encoder)?;
    let z = read_complete(data, &a.feature_names, &Default::default())?;
    let t = encode(a.encoder(), z.view())?;
    write_vector(out, "t_hat", t.view())
}

#[derive(Debug, Clone)]
pub struct TrainOpts {
    pub data: PathBuf,
    pub manifest: PathBuf,
    pub encoder: Option<PathBuf>,
    pub top_genes: Option<usize>,
    pub out: PathBuf,
}

pub fn train_cmd(mut run: RunConfig, o: &TrainOpts) -> anyhow::Result<()> {
    run.validate()?;
    let enc = match &o.encoder {
        Some(p) => {
            require_file(p, "encoder")?;
            run.input("encoder", p);
            Some(FitArtifact::load(p)?)
        }
        None => None,
    };
    if enc.is_some() && o.top_genes.is_some() {
        return Err(UsageError("--top-genes conflicts with --encoder, which fixes the features".into()).into());
    }
    let (m, mut d, _) = load_dataset(&mut run, &o.data, &o.manifest, o.top_genes)?;
    if let Some(a) = &enc {
        let idx = a
            .feature_names
            .iter()
            .map(|name| {
                d.names_z()
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| UsageError(format!("encoder feature `{name}` not among the data features")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        d = d.select_features(&idx)?;
    }
    create_dir(&o.out)?;
    let spec = &run.mlp;
    let (kind, safeguard, gamma) = match &enc {
        None => {
            let input = hstack(&[d.x(), d.z()])?;
            let model = MlpModel::train(input.view(), d.y(), &spec.with_input_dim(input.ncols()))?;
            model.save(&o.out.join(ModelSidecar::MAIN))?;
            (ModelKind::Raw, None, None)
        }
        Some(a) => {
            let t = encode(a.encoder(), d.z())?;
            let sg = fit_with_safeguard(d.x(), d.z(), t.view(), d.y(), spec, spec)?;
            sg.main.save(&o.out.join(ModelSidecar::MAIN))?;
            sg.residual.save(&o.out.join(ModelSidecar::RESIDUAL))?;
            info!("safeguard alpha = {}", sg.alpha);
            (ModelKind::Stein, Some(sg.report()), Some(a.encoder().gamma.clone()))
        }
    };
    let sidecar = ModelSidecar {
        kind,
        response: m.response().to_string(),
        nuisance_names: d.names_x().to_vec(),
        feature_names: d.names_z().to_vec(),
        categories: d.categories().clone(),
        safeguard,
        gamma,
        run,
    };
    write_file(&o.out.join(ModelSidecar::FILE), &to_json(&sidecar)?)
}

#[derive(Debug, Clone)]
pub struct PredictOpts {
    pub model: PathBuf,
    pub data: PathBuf,
    pub encoder: Option<PathBuf>,
    pub t_hat: Option<PathBuf>,
    pub out: PathBuf,
}

fn load_model(path: &Path) -> anyhow::Result<MlpModel> {
    require_file(path, "checkpoint")?;
    Ok(MlpModel::load(path)?)
}

pub fn predict_cmd(o: &PredictOpts) -> anyhow::Result<()> {
    let side_path = o.model.join(ModelSidecar::FILE);
    require_file(&side_path, "model description")?;
    require_file(&o.data, "data file")?;
    let side: ModelSidecar = read_json(&side_path, "model description")?;
    let x = read_complete(&o.data, &side.nuisance_names, &side.categories)?;
    let z = read_complete(&o.data, &side.feature_names, &Default::default())?;
    let n = x.nrows();
    let main = load_model(&o.model.join(ModelSidecar::MAIN))?;
    let pred: Array1<f64> = match side.kind {
        ModelKind::Raw => {
            if o.encoder.is_some() || o.t_hat.is_some() {
                return Err(UsageError("this model uses raw features; drop --encoder / --t-hat".into()).into());
            }
            if n == 0 {
                Array1::zeros(0)
            } else {
                main.predict(hstack(&[x.view(), z.view()])?.view())?
            }
        }
        ModelKind::Stein => {
            let t = match (&o.encoder, &o.t_hat) {
                (Some(e), None) => {
                    require_file(e, "encoder")?;
                    let a = FitArtifact::load(e)?;
                    if a.feature_names != side.feature_names {
                        return Err(UsageError("encoder features differ from the model's features".into()).into());
                    }
                    encode(a.encoder(), z.view())?
                }
                (None, Some(f)) => {
                    require_file(f, "t_hat file")?;
                    read_vector(f, "t_hat")?
                }
                _ => return Err(UsageError("a Stein model needs exactly one of --encoder or --t-hat".into()).into()),
            };
            if t.len() != n {
                return Err(UsageError(format!("t_hat has {} rows, data has {n}", t.len())).into());
            }
            let safeguard = side.safeguard.as_ref().ok_or_else(|| anyhow!("model description lacks the safeguard"))?;
            let sg = SafeguardedModel {
                main,
                residual: load_model(&o.model.join(ModelSidecar::RESIDUAL))?,
                alpha: safeguard.alpha,
                val_mse_main: safeguard.val_mse_main,
                val_mse_combined: safeguard.val_mse_combined,
            };
            if n == 0 {
                Array1::zeros(0)
            } else {
                sg.predict(x.view(), z.view(), t.view())?
            }
        }
    };
    write_vector(&o.out, "prediction", pred.view())
}

#[derive(Debug, Clone)]
pub struct BenchmarkOpts {
    pub data: PathBuf,
    pub manifest: PathBuf,
    pub top_genes: Option<usize>,
    pub folds: usize,
    pub out: PathBuf,
}

#[derive(Serialize)]
struct BenchmarkReport<'a> {
    run: &'a RunConfig,
    prescreen: Option<Prescreen>,
    cv: &'a CvReport,
}

pub fn benchmark_cmd(mut run: RunConfig, o: &BenchmarkOpts) -> anyhow::Result<()> {
    run.validate()?;
    let (_, d, prescreen) = load_dataset(&mut run, &o.data, &o.manifest, o.top_genes)?;
    create_dir(&o.out)?;
    let cv = cross_validate(&d, o.folds, &run.pipeline, &run.mlp, run.seed)?;
    write_file(&o.out.join("cv.json"), &to_json(&BenchmarkReport { run: &run, prescreen, cv: &cv })?)?;
    let text = cv.render();
    write_file(&o.out.join("cv.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn cohort_cmd(shape: &CohortShape, out: &Path) -> anyhow::Result<()> {
    create_dir(out)?;
    let c = synthetic_cohort(shape)?;
    let d = &c.data;
    d.write_csv(&out.join("cohort.csv"), "response")
        .context("writing cohort table")?;
    let mut m = ColumnManifest::new(Default::default());
    m.columns.insert("response".into(), Role::Response);
    for name in d.names_x().iter().filter(|n| !n.starts_with("cn_")) {
        m.columns.insert(name.clone(), Role::Nuisance);
    }
    m.prefixes.insert("cn_".into(), Role::Nuisance);
    m.prefixes.insert("gene_".into(), Role::Feature);
    write_file(&out.join("manifest.toml"), &toml::to_string(&m)?)?;
    let truth: Vec<TopFeature> = d
        .names_z()
        .iter()
        .zip(c.gamma.iter())
        .filter(|(_, g)| **g != 0.0)
        .map(|(name, g)| TopFeature { name: name.clone(), coef: *g })
        .collect();
    write_file(&out.join("truth.json"), &to_json(&serde_json::json!({ "shape": shape, "direction": truth }))?)?;
    println!("wrote {} rows to {}", d.n(), out.join("cohort.csv").display());
    Ok(())
}
