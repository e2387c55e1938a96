//! Synthetic scenarios, method comparisons and cross-validation.
//!
//! Methods: A is an MLP on `[X, Z]`, B an MLP on `[X, t_hat]` with the
//! residual safeguard, C an MLP on `[X, PC1(Z)]`. All three share one
//! `MlpSpec` apart from the input width.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{kfold_split, Dataset};
use crate::linalg::{cholesky_lower, sym_eigh};
use crate::nuisance::Regime;
use crate::pipeline::{self, align_sign, PipelineConfig};
use crate::regressor::{fit_with_safeguard, hstack, MlpModel, MlpSpec};
use crate::stein::{sign_fix, Order};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Model {
    I,
    II,
    III,
}

impl FromStr for Model {
    type Err = Error;
    fn from_str(s: &str) -> Result<Model> {
        match s.trim() {
            "I" | "i" | "1" => Ok(Model::I),
            "II" | "ii" | "2" => Ok(Model::II),
            "III" | "iii" | "3" => Ok(Model::III),
            other => Err(Error::InvalidArgument(format!("unknown model `{other}` (expected I, II or III)"))),
        }
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Model::I => "I",
            Model::II => "II",
            Model::III => "III",
        })
    }
}

/// Whether the features depend on the nuisance block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    /// `Z ~ N(0, Sigma_Z)` independent of `X`.
    Independent,
    /// `Z = A X + E`.
    Correlated,
}

impl FromStr for Setting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Setting> {
        match s.trim().to_ascii_lowercase().as_str() {
            "indep" | "independent" | "1" => Ok(Setting::Independent),
            "corr" | "correlated" | "2" => Ok(Setting::Correlated),
            other => Err(Error::InvalidArgument(format!("unknown setting `{other}` (expected indep or corr)"))),
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Independent => "indep",
            Setting::Correlated => "corr",
        })
    }
}

/// Recipe for `A` in the correlated setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoefDesign {
    /// Sparse when the training size puts `(n, p, q)` in the high-dimensional regime.
    Auto,
    /// Every entry `Unif(-0.5, 0.5) / sqrt(p)`.
    Dense,
    /// `s_a` entries per row, `Unif(-0.5, 0.5) / sqrt(s_a)`.
    Sparse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub model: Model,
    pub setting: Setting,
    pub p: usize,
    pub q: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub rho_x: f64,
    pub rho_z: f64,
    pub snr: f64,
    pub s_a: usize,
    pub coef_design: CoefDesign,
    pub replications: usize,
    pub base_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            model: Model::I,
            setting: Setting::Independent,
            p: 20,
            q: 20,
            n_train: 2000,
            n_test: 2000,
            rho_x: 0.5,
            rho_z: 0.3,
            snr: 5.0,
            s_a: 10,
            coef_design: CoefDesign::Auto,
            replications: 20,
            base_seed: 2024,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let min_p = if self.model == Model::I { 4 } else { 3 };
        if self.p < min_p {
            return bad(format!("model {} needs p >= {min_p}", self.model));
        }
        if self.q < 9 {
            return bad("q must be at least 9".into());
        }
        if self.n_train < 10 || self.n_test < 2 {
            return bad("need n_train >= 10 and n_test >= 2".into());
        }
        if !(self.snr > 0.0 && self.snr.is_finite()) {
            return bad("snr must be positive".into());
        }
        if !(self.rho_x.abs() < 1.0 && self.rho_z.abs() < 1.0) {
            return bad("rho values must lie in (-1, 1)".into());
        }
        if self.sparse_a() && (self.s_a == 0 || self.s_a > self.p) {
            return bad(format!("s_a = {} not in 1..={}", self.s_a, self.p));
        }
        if self.replications == 0 {
            return bad("at least one replication required".into());
        }
        Ok(())
    }

    pub fn sparse_a(&self) -> bool {
        match self.coef_design {
            CoefDesign::Auto => Regime::auto(self.n_train, self.p, self.q) == Regime::High,
            CoefDesign::Dense => false,
            CoefDesign::Sparse => true,
        }
    }

    pub fn rep_seed(&self, rep: usize) -> u64 {
        self.base_seed ^ rep as u64
    }

    pub fn label(&self) -> String {
        format!("{} {} p={} q={} n={}", self.model, self.setting, self.p, self.q, self.n_train)
    }
}

/// The twelve simulation configurations: three models, two settings, and
/// `(p, q)` in `{(20, 20), (400, 100)}`. `high_dim_n` overrides the sizes
/// of the `(400, 100)` rows.
pub fn table_grid(base: &SimConfig, high_dim_n: Option<usize>) -> Vec<SimConfig> {
    let mut out = Vec::new();
    for model in [Model::I, Model::II, Model::III] {
        for setting in [Setting::Independent, Setting::Correlated] {
            for (p, q) in [(20, 20), (400, 100)] {
                let mut c = SimConfig { model, setting, p, q, ..base.clone() };
                if p == 400 {
                    if let Some(n) = high_dim_n {
                        c.n_train = n;
                        c.n_test = n;
                    }
                }
                out.push(c);
            }
        }
    }
    out
}

/// `rho^|i-j|`.
pub fn ar1_covariance(d: usize, rho: f64) -> Result<Array2<f64>> {
    if d == 0 || !(rho.abs() < 1.0) {
        return Err(Error::InvalidArgument(format!("ar1 covariance needs d >= 1 and |rho| < 1, got d={d} rho={rho}")));
    }
    Ok(Array2::from_shape_fn((d, d), |(i, j)| rho.powi(i.abs_diff(j) as i32)))
}

/// Unit vector with `+1/sqrt(5)` at 1-based positions 1, 3, 7 and `-1/sqrt(5)` at 5, 9.
pub fn true_direction(q: usize) -> Result<Array1<f64>> {
    if q < 9 {
        return Err(Error::InvalidArgument(format!("true direction needs q >= 9, got {q}")));
    }
    let c = 1.0 / 5f64.sqrt();
    let mut g = Array1::zeros(q);
    for i in [0, 2, 6] {
        g[i] = c;
    }
    for i in [4, 8] {
        g[i] = -c;
    }
    Ok(g)
}

/// Link functions; `x[0]` is `x_1`.
pub fn link_eval(model: Model, x: ArrayView1<f64>, t: f64) -> f64 {
    match model {
        Model::I => 2.0 * t.sin() + 0.3 * t * t + 1.3 * x[0] - 1.1 * x[1] + t * x[3],
        Model::II => t * t * (x[0] / 2.0).exp() + 0.5 * (x[1] * x[1] - 1.0) + x[2].sin(),
        Model::III => {
            2.0 * t / (1.0 + (-x[0]).exp()) + x[1].abs().sqrt() * (t + 2.0).abs() + t.powi(3) / 2.0 + x[2] / 2.0
        }
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || StandardNormal.sample(rng))
}

/// Rows of `N(0, sigma)` via the lower Cholesky factor.
pub fn sample_gaussian(rng: &mut ChaCha8Rng, n: usize, sigma: ArrayView2<f64>) -> Result<Array2<f64>> {
    let l = cholesky_lower(sigma)?;
    Ok(normal_matrix(rng, n, sigma.nrows()).dot(&l.t()))
}

/// Sample variance (divisor `n - 1`).
pub fn sample_variance(v: ArrayView1<f64>) -> f64 {
    let n = v.len() as f64;
    let m = v.sum() / n;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
}

#[derive(Debug, Clone)]
pub struct ScenarioData {
    pub train: Dataset,
    pub test: Dataset,
    pub gamma: Array1<f64>,
    pub t_train: Array1<f64>,
    pub t_test: Array1<f64>,
    pub sigma_eps: f64,
    /// `Var(f) / sigma_eps^2` on the training rows.
    pub snr_empirical: f64,
    pub seed: u64,
}

/// One seeded draw of a scenario (seed `base_seed ^ rep`).
pub fn generate(cfg: &SimConfig, rep: usize) -> Result<ScenarioData> {
    cfg.validate()?;
    let seed = cfg.rep_seed(rep);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.n_train + cfg.n_test;
    let x = sample_gaussian(&mut rng, n, ar1_covariance(cfg.p, cfg.rho_x)?.view())?;
    let e = sample_gaussian(&mut rng, n, ar1_covariance(cfg.q, cfg.rho_z)?.view())?;
    let z = match cfg.setting {
        Setting::Independent => e,
        Setting::Correlated => {
            let mut a = Array2::zeros((cfg.q, cfg.p));
            if cfg.sparse_a() {
                let scale = 1.0 / (cfg.s_a as f64).sqrt();
                for mut row in a.rows_mut() {
                    for j in sample(&mut rng, cfg.p, cfg.s_a) {
                        row[j] = rng.random_range(-0.5..0.5) * scale;
                    }
                }
            } else {
                let scale = 1.0 / (cfg.p as f64).sqrt();
                a.mapv_inplace(|_| rng.random_range(-0.5..0.5) * scale);
            }
            x.dot(&a.t()) + e
        }
    };
    let gamma = true_direction(cfg.q)?;
    let t = z.dot(&gamma);
    let f = Array1::from_shape_fn(n, |i| link_eval(cfg.model, x.row(i), t[i]));
    let var_f = sample_variance(f.slice(ndarray::s![..cfg.n_train]));
    let sigma_eps = (var_f / cfg.snr).sqrt();
    let eps: Array1<f64> = Array1::from_shape_simple_fn(n, || StandardNormal.sample(&mut rng));
    let y = &f + &(eps * sigma_eps);

    let all = Dataset::from_arrays(y, x, z)?;
    let tr: Vec<usize> = (0..cfg.n_train).collect();
    let te: Vec<usize> = (cfg.n_train..n).collect();
    Ok(ScenarioData {
        train: all.select_rows(&tr),
        test: all.select_rows(&te),
        gamma,
        t_train: t.select(Axis(0), &tr),
        t_test: t.select(Axis(0), &te),
        sigma_eps,
        snr_empirical: var_f / (sigma_eps * sigma_eps),
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub r2: f64,
}

/// MSE, MAE and `R^2 = 1 - SSE / SST` with SST about the mean of `y_true`.
pub fn metrics(y_true: ArrayView1<f64>, y_pred: ArrayView1<f64>) -> Result<Metrics> {
    let n = y_true.len();
    if n != y_pred.len() || n < 2 {
        return Err(Error::Shape("metrics need equal lengths >= 2".into()));
    }
    let mean = y_true.sum() / n as f64;
    let sst: f64 = y_true.iter().map(|v| (v - mean).powi(2)).sum();
    if sst == 0.0 {
        return Err(Error::Degenerate("zero total sum of squares".into()));
    }
    let sse: f64 = y_true.iter().zip(y_pred).map(|(a, b)| (a - b).powi(2)).sum();
    let sae: f64 = y_true.iter().zip(y_pred).map(|(a, b)| (a - b).abs()).sum();
    Ok(Metrics { mse: sse / n as f64, mae: sae / n as f64, r2: 1.0 - sse / sst })
}

/// Leading principal component fitted on training features only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pc1 {
    pub mean: Array1<f64>,
    pub loading: Array1<f64>,
}

impl Pc1 {
    pub fn fit(z: ArrayView2<f64>) -> Result<Pc1> {
        let n = z.nrows();
        if n < 2 {
            return Err(Error::InvalidArgument("PC1 needs at least 2 rows".into()));
        }
        let mean = z.mean_axis(Axis(0)).unwrap();
        let c = &z - &mean;
        let cov = c.t().dot(&c) / n as f64;
        let (_, vecs) = sym_eigh(cov.view())?;
        let loading = sign_fix(vecs.column(vecs.ncols() - 1).to_owned());
        Ok(Pc1 { mean, loading })
    }

    pub fn apply(&self, z: ArrayView2<f64>) -> Result<Array1<f64>> {
        if z.ncols() != self.loading.len() {
            return Err(Error::Shape("PC1 feature count mismatch".into()));
        }
        Ok((&z - &self.mean).dot(&self.loading))
    }
}

/// Test metrics of methods A, B and C for one train/test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub a: Metrics,
    pub b: Metrics,
    pub c: Metrics,
    /// Safeguard gate of method B.
    pub alpha: f64,
}

/// Trains the three methods on `train` and scores them on `test`.
pub fn compare_methods(
    train: &Dataset,
    test: &Dataset,
    t_train: ArrayView1<f64>,
    t_test: ArrayView1<f64>,
    mlp: &MlpSpec,
) -> Result<MethodScores> {
    let in_a = hstack(&[train.x(), train.z()])?;
    let model_a = MlpModel::train(in_a.view(), train.y(), &mlp.with_input_dim(in_a.ncols()))?;
    let pred_a = model_a.predict(hstack(&[test.x(), test.z()])?.view())?;

    let sg = fit_with_safeguard(train.x(), train.z(), t_train, train.y(), mlp, mlp)?;
    let pred_b = sg.predict(test.x(), test.z(), t_test)?;

    let pc = Pc1::fit(train.z())?;
    let pc_tr = pc.apply(train.z())?;
    let pc_te = pc.apply(test.z())?;
    let in_c = hstack(&[train.x(), pc_tr.view().insert_axis(Axis(1))])?;
    let model_c = MlpModel::train(in_c.view(), train.y(), &mlp.with_input_dim(in_c.ncols()))?;
    let pred_c = model_c.predict(hstack(&[test.x(), pc_te.view().insert_axis(Axis(1))])?.view())?;

    Ok(MethodScores {
        a: metrics(test.y(), pred_a.view())?,
        b: metrics(test.y(), pred_b.view())?,
        c: metrics(test.y(), pred_c.view())?,
        alpha: sg.alpha,
    })
}

/// Direction-recovery outcome of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub rep: usize,
    pub seed: u64,
    pub angle_deg: f64,
    pub proj_loss: f64,
    pub aligned_error: f64,
    pub order: Order,
    pub probe: String,
    pub fallback_used: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub recovery: RecoveryRow,
    pub scores: Option<MethodScores>,
}

fn recovery_row(sc: &ScenarioData, rep: usize, pipe: &PipelineConfig) -> Result<(RecoveryRow, Array1<f64>)> {
    let cfg = PipelineConfig { seed: sc.seed, ..pipe.clone() };
    let rep_fit = pipeline::fit(&sc.train, &cfg)?;
    let al = align_sign(rep_fit.encoder.gamma.view(), sc.gamma.view())?;
    let row = RecoveryRow {
        rep,
        seed: sc.seed,
        angle_deg: al.angle_deg,
        proj_loss: al.proj_loss,
        aligned_error: al.error,
        order: rep_fit.encoder.order,
        probe: rep_fit.encoder.probe.to_string(),
        fallback_used: rep_fit.encoder.fallback_used,
    };
    Ok((row, rep_fit.encoder.gamma))
}

/// Generates replication `rep`, fits the encoder and, when `mlp` is given,
/// scores methods A, B and C on the test rows.
pub fn run_replication(
    cfg: &SimConfig,
    rep: usize,
    pipe: &PipelineConfig,
    mlp: Option<&MlpSpec>,
) -> Result<ReplicationResult> {
    let sc = generate(cfg, rep)?;
    let (recovery, gamma) = recovery_row(&sc, rep, pipe)?;
    let scores = match mlp {
        Some(spec) => {
            let t_tr = sc.train.z().dot(&gamma);
            let t_te = sc.test.z().dot(&gamma);
            Some(compare_methods(&sc.train, &sc.test, t_tr.view(), t_te.view(), &spec.with_seed(sc.seed))?)
        }
        None => None,
    };
    Ok(ReplicationResult { recovery, scores })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(v: &[f64]) -> MeanSd {
        if v.is_empty() {
            return MeanSd { mean: f64::NAN, sd: f64::NAN };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanSd { mean, sd }
    }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub mse: MeanSd,
    pub mae: MeanSd,
    pub r2: MeanSd,
}

impl MethodSummary {
    fn of(m: &[Metrics]) -> MethodSummary {
        let col = |f: fn(&Metrics) -> f64| MeanSd::of(&m.iter().map(f).collect::<Vec<_>>());
        MethodSummary { mse: col(|m| m.mse), mae: col(|m| m.mae), r2: col(|m| m.r2) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub completed: usize,
    pub failed: usize,
    pub angle_deg: MeanSd,
    pub proj_loss: MeanSd,
    pub median_aligned_error: f64,
    pub fallback_rate: f64,
    pub a: Option<MethodSummary>,
    pub b: Option<MethodSummary>,
    pub c: Option<MethodSummary>,
    pub alpha_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub rep: usize,
    pub error: String,
}

/// Per-replication results of one configuration plus their aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub sim: SimConfig,
    pub pipeline: PipelineConfig,
    pub mlp: Option<MlpSpec>,
    pub rows: Vec<ReplicationResult>,
    pub failures: Vec<Failure>,
    pub summary: Summary,
}

fn summarize(rows: &[ReplicationResult], failed: usize) -> Summary {
    let rec: Vec<&RecoveryRow> = rows.iter().map(|r| &r.recovery).collect();
    let scores: Vec<&MethodScores> = rows.iter().filter_map(|r| r.scores.as_ref()).collect();
    let per = |f: fn(&MethodScores) -> Metrics| {
        (!scores.is_empty()).then(|| MethodSummary::of(&scores.iter().map(|s| f(s)).collect::<Vec<_>>()))
    };
    Summary {
        completed: rows.len(),
        failed,
        angle_deg: MeanSd::of(&rec.iter().map(|r| r.angle_deg).collect::<Vec<_>>()),
        proj_loss: MeanSd::of(&rec.iter().map(|r| r.proj_loss).collect::<Vec<_>>()),
        median_aligned_error: median(&rec.iter().map(|r| r.aligned_error).collect::<Vec<_>>()),
        fallback_rate: rec.iter().filter(|r| r.fallback_used).count() as f64 / rec.len().max(1) as f64,
        a: per(|s| s.a),
        b: per(|s| s.b),
        c: per(|s| s.c),
        alpha_rate: (!scores.is_empty())
            .then(|| scores.iter().filter(|s| s.alpha > 0.0).count() as f64 / scores.len() as f64),
    }
}

/// Runs all replications of `cfg` in parallel. A failing replication is
/// recorded and skipped; the rest still run.
pub fn run_comparison(cfg: &SimConfig, pipe: &PipelineConfig, mlp: Option<&MlpSpec>) -> Result<ComparisonTable> {
    cfg.validate()?;
    pipe.validate()?;
    if let Some(m) = mlp {
        m.validate()?;
    }
    let started = Instant::now();
    let outcomes: Vec<(usize, Result<ReplicationResult>)> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| (r, run_replication(cfg, r, pipe, mlp)))
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (rep, out) in outcomes {
        match out {
            Ok(r) => rows.push(r),
            Err(e) => {
                warn!("{} rep {rep} failed: {e}", cfg.label());
                failures.push(Failure { rep, error: e.to_string() });
            }
        }
    }
    info!("{}: {} reps in {:.1}s", cfg.label(), rows.len(), started.elapsed().as_secs_f64());
    let summary = summarize(&rows, failures.len());
    Ok(ComparisonTable { sim: cfg.clone(), pipeline: pipe.clone(), mlp: mlp.cloned(), rows, failures, summary })
}

impl ComparisonTable {
    /// One line per replication.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "model,setting,p,q,n_train,rep,seed,angle_deg,proj_loss,aligned_error,order,probe,fallback,\
             mse_a,mae_a,r2_a,mse_b,mae_b,r2_b,mse_c,mae_c,r2_c,alpha\n",
        );
        for r in &self.rows {
            let v = &r.recovery;
            let _ = write!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                self.sim.model,
                self.sim.setting,
                self.sim.p,
                self.sim.q,
                self.sim.n_train,
                v.rep,
                v.seed,
                v.angle_deg,
                v.proj_loss,
                v.aligned_error,
                u8::from(v.order),
                v.probe,
                v.fallback_used
            );
            match &r.scores {
                Some(m) => {
                    for x in [m.a, m.b, m.c] {
                        let _ = write!(s, ",{},{},{}", x.mse, x.mae, x.r2);
                    }
                    let _ = writeln!(s, ",{}", m.alpha);
                }
                None => s.push_str(",,,,,,,,,,\n"),
            }
        }
        s
    }

    /// Aggregate row: `Angle(Proj)` then MSE and R^2 per method.
    pub fn summary_line(&self) -> String {
        let sm = &self.summary;
        let mut s = format!(
            "{:<4} {:<6} {:>4} {:>4} {:>5}  {:>7.3}({:.3})",
            self.sim.model,
            self.sim.setting,
            self.sim.p,
            self.sim.q,
            self.sim.n_train,
            sm.angle_deg.mean,
            sm.proj_loss.mean
        );
        for m in [&sm.a, &sm.b, &sm.c] {
            match m {
                Some(m) => {
                    let _ = write!(s, "  {:>8.3} {:>7.3}", m.mse.mean, m.r2.mean);
                }
                None => s.push_str("         -       -"),
            }
        }
        let _ = write!(s, "  ({} ok, {} failed)", sm.completed, sm.failed);
        s
    }

    pub fn summary_header() -> String {
        format!(
            "{:<4} {:<6} {:>4} {:>4} {:>5}  {:>14}  {:>8} {:>7}  {:>8} {:>7}  {:>8} {:>7}",
            "model", "set", "p", "q", "n", "Angle(Proj)", "MSE_A", "R2_A", "MSE_B", "R2_B", "MSE_C", "R2_C"
        )
    }
}

/// Text table over several configurations.
pub fn render_tables(tables: &[ComparisonTable]) -> String {
    let mut s = ComparisonTable::summary_header();
    s.push('\n');
    for t in tables {
        s.push_str(&t.summary_line());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub order: Order,
    pub probe: String,
    pub scores: MethodScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<FoldResult>,
    pub a: MethodSummary,
    pub b: MethodSummary,
    pub c: MethodSummary,
}

impl CvReport {
    pub fn render(&self) -> String {
        let mut s = format!("{}-fold cross-validation (seed {})\n", self.k, self.seed);
        let _ = writeln!(s, "{:<22} {:>9} {:>9} {:>9}", "method", "MSE", "MAE", "R2");
        for (name, m) in [("A raw [X,Z]", &self.a), ("B Stein [X,t]", &self.b), ("C PCA [X,PC1]", &self.c)] {
            let _ = writeln!(s, "{:<22} {:>9.4} {:>9.4} {:>9.4}", name, m.mse.mean, m.mae.mean, m.r2.mean);
        }
        s
    }
}

/// `k`-fold comparison of methods A, B and C on a dataset. The encoder and
/// PC1 are refitted inside each training fold.
pub fn cross_validate(d: &Dataset, k: usize, pipe: &PipelineConfig, mlp: &MlpSpec, seed: u64) -> Result<CvReport> {
    let folds = kfold_split(d.n(), k, seed)?;
    let results: Vec<Result<FoldResult>> = folds
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let train = d.select_rows(&f.train);
            let test = d.select_rows(&f.test);
            let fold_seed = seed ^ (i as u64 + 1);
            let rep = pipeline::fit(&train, &PipelineConfig { seed: fold_seed, ..pipe.clone() })?;
            let g = &rep.encoder.gamma;
            let scores = compare_methods(
                &train,
                &test,
                train.z().dot(g).view(),
                test.z().dot(g).view(),
                &mlp.with_seed(fold_seed),
            )?;
            Ok(FoldResult {
                fold: i,
                n_train: f.train.len(),
                n_test: f.test.len(),
                order: rep.encoder.order,
                probe: rep.encoder.probe.to_string(),
                scores,
            })
        })
        .collect();
    let folds: Vec<FoldResult> = results.into_iter().collect::<Result<_>>()?;
    let pick = |f: fn(&MethodScores) -> Metrics| MethodSummary::of(&folds.iter().map(|r| f(&r.scores)).collect::<Vec<_>>());
    Ok(CvReport { k, seed, a: pick(|s| s.a), b: pick(|s| s.b), c: pick(|s| s.c), folds })
}

/// Shape of a synthetic cohort resembling a clinical + copy-number +
/// expression study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortShape {
    pub n: usize,
    /// Total nuisance columns: six clinical variables plus copy-number calls.
    pub p: usize,
    /// Expression columns generated (before any prescreen).
    pub q: usize,
    /// Genes carrying the index signal.
    pub signal_genes: usize,
    pub snr: f64,
    pub seed: u64,
}

impl Default for CohortShape {
    fn default() -> Self {
        CohortShape { n: 1900, p: 400, q: 500, signal_genes: 10, snr: 1.5, seed: 7 }
    }
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub data: Dataset,
    /// Unit direction over all generated genes.
    pub gamma: Array1<f64>,
}

const CLINICAL: usize = 6;

/// Mixed-type nuisance (continuous, binary and ordinal clinical variables
/// plus copy-number calls in `{-2, ..., 2}`), expression driven by copy
/// number and a three-factor background, and a single-index response.
/// Signal genes are drawn among the high-variance ones.
pub fn synthetic_cohort(shape: &CohortShape) -> Result<Cohort> {
    let CohortShape { n, p, q, signal_genes, snr, seed } = *shape;
    if p <= CLINICAL || q < 2 * signal_genes || signal_genes == 0 || n < 20 || !(snr > 0.0) {
        return Err(Error::InvalidArgument("cohort shape out of range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_cn = p - CLINICAL;
    let mut x = Array2::<f64>::zeros((n, p));
    let mut categories = BTreeMap::new();
    let levels = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    categories.insert("grade".to_string(), levels(&["1", "2", "3"]));
    categories.insert("er_status".to_string(), levels(&["negative", "positive"]));
    categories.insert("her2_status".to_string(), levels(&["negative", "positive"]));
    categories.insert("stage".to_string(), levels(&["0", "I", "II", "III"]));
    let latent = sample_gaussian(&mut rng, n, ar1_covariance(n_cn, 0.6)?.view())?;
    for i in 0..n {
        let u: f64 = StandardNormal.sample(&mut rng);
        x[[i, 0]] = (61.0 + 13.0 * u).clamp(21.0, 96.0);
        let size: f64 = StandardNormal.sample(&mut rng);
        x[[i, 1]] = (3.0 + 0.5 * size).exp().round();
        x[[i, 2]] = rng.random_range(0..3) as f64;
        x[[i, 3]] = f64::from(rng.random::<f64>() < 0.76);
        x[[i, 4]] = f64::from(rng.random::<f64>() < 0.12);
        x[[i, 5]] = rng.random_range(0..4) as f64;
        for j in 0..n_cn {
            let v = latent[[i, j]];
            x[[i, CLINICAL + j]] = if v < -1.6 {
                -2.0
            } else if v < -0.7 {
                -1.0
            } else if v < 0.7 {
                0.0
            } else if v < 1.6 {
                1.0
            } else {
                2.0
            };
        }
    }

    let sd: Vec<f64> = (0..q).map(|_| rng.random_range(0.5..1.5)).collect();
    let factors = normal_matrix(&mut rng, n, 3);
    let loadings = normal_matrix(&mut rng, 3, q) * 0.4;
    let mut z = factors.dot(&loadings) + normal_matrix(&mut rng, n, q);
    for j in 0..q {
        let mut col = z.column_mut(j);
        col *= sd[j];
        if j < n_cn {
            col.scaled_add(0.5, &x.column(CLINICAL + j));
        }
        if j % 7 == 0 {
            col.scaled_add(0.8, &x.column(3));
        }
    }

    let mut strong: Vec<usize> = (0..q).filter(|&j| sd[j] > 1.1).collect();
    if strong.len() < signal_genes {
        strong = (0..q).collect();
    }
    let picks = sample(&mut rng, strong.len(), signal_genes);
    let mut gamma = Array1::zeros(q);
    for (k, idx) in picks.iter().enumerate() {
        gamma[strong[idx]] = if k % 2 == 0 { 1.0 } else { -1.0 };
    }
    gamma /= (signal_genes as f64).sqrt();
    let t = z.dot(&gamma);
    let ts = &t / sample_variance(t.view()).sqrt();
    let age = x.column(0).mapv(|a| (a - 61.0) / 13.0);
    let f = Array1::from_shape_fn(n, |i| {
        let v = ts[i];
        1.5 * v + 0.5 * (v * v - 1.0) + 0.6 * age[i] - 0.4 * x[[i, 2]] + 0.5 * x[[i, 3]]
    });
    let sigma = (sample_variance(f.view()) / snr).sqrt();
    let eps: Array1<f64> = Array1::from_shape_simple_fn(n, || StandardNormal.sample(&mut rng));
    let y = f + eps * sigma;

    let mut names_x: Vec<String> =
        ["age", "tumor_size", "grade", "er_status", "her2_status", "stage"].iter().map(|s| s.to_string()).collect();
    names_x.extend((1..=n_cn).map(|j| format!("cn_{j}")));
    let names_z = (1..=q).map(|j| format!("gene_{j}")).collect();
    let data = Dataset::new(y, x, z, names_x, names_z)?.with_categories(categories);
    Ok(Cohort { data, gamma })
}
