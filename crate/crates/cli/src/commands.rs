use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use log::info;
use nalgebra::DMatrix;

use fedcov::config::FlatConfig;
use fedcov::federation::agent::{CenterAgent, CoordinatorAgent, PollPolicy};
use fedcov::federation::message::Message;
use fedcov::federation::{
    audit_privacy, AnalysisResult, AuditContext, AuditReport, CovariateSpec, FileExchangeTransport,
    InProcessTransport, Pipeline, PipelineConfig, PipelineRun, Transcript,
};
use fedcov::oracle::{centralized_pipeline, compare};
use fedcov::stats::CenterData;
use fedcov::synth::{fold_runner, generate, SynthSpec};
use fedcov::CenterId;

use crate::io::{center_dir, provenance, read_flat, write_matrix, write_text, Dataset};
use crate::settings::{config_hash, spec_flat, Settings, TransportKind};

/// The transcript audit found a violation; results were still written.
#[derive(Debug)]
pub struct AuditFailed(pub PathBuf);

impl std::fmt::Display for AuditFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "privacy audit failed, see {}", self.0.display())
    }
}

impl std::error::Error for AuditFailed {}

pub fn synth(settings: &Settings, out: &Path) -> Result<()> {
    let spec = settings.synth_spec()?;
    let data = generate(&spec)?;
    fs::create_dir_all(out)?;
    let names: Vec<String> = (0..spec.q)
        .map(|j| if j == 0 && spec.intercept { "intercept".into() } else { format!("y{j}") })
        .collect();
    for (i, c) in data.centers.iter().enumerate() {
        let dir = center_dir(out, CenterId(i as u32));
        write_matrix(&dir.join("x.mat"), c.x())?;
        write_matrix(&dir.join("y.mat"), c.y())?;
        write_text(&dir.join("labels.txt"), &group_labels(c))?;
    }
    write_matrix(&out.join("truth").join("w_true.mat"), &data.w_true)?;
    let mut manifest = spec_flat(&spec);
    manifest.set("kind", "dataset");
    manifest.set("covariate_names", names.join(", "));
    manifest.set(
        "center_sizes",
        data.centers.iter().map(|c| c.n_subjects().to_string()).collect::<Vec<_>>().join(","),
    );
    manifest.set("noise_sd", format!("{:e}", data.noise_sd));
    manifest.set("x_norm", format!("{:e}", data.x_norm));
    write_text(&out.join("manifest.txt"), &manifest.render())?;
    info!("wrote {} centers to {}", data.n_centers(), out.display());
    Ok(())
}

/// Synthetic group tags: the sign of the first non-intercept covariate.
fn group_labels(c: &CenterData) -> String {
    let col = usize::from(c.n_covariates() > 1);
    (0..c.n_subjects())
        .map(|i| if c.y()[(i, col)] >= 0.0 { "high\n" } else { "low\n" })
        .collect()
}

fn poll_policy(poll_ms: u64, idle_timeout_ms: u64) -> PollPolicy {
    PollPolicy {
        interval: Duration::from_millis(poll_ms),
        idle_timeout: Duration::from_millis(idle_timeout_ms),
    }
}

fn fresh_exchange(dir: &Path) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        bail!("exchange directory {} is not empty", dir.display());
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn run(settings: &Settings, data: &Path, out: &Path, exchange: Option<&Path>) -> Result<()> {
    let cfg = settings.pipeline()?;
    let kind = settings.transport()?;
    let dataset = Dataset::open(data)?;
    let sites = dataset.load_all(&cfg.covariates)?;
    let ids = dataset.ids()?;
    let mut pipeline = Pipeline::new(cfg.clone());
    if let Some(t) = dataset.truth(&cfg.covariates)? {
        pipeline = pipeline.with_truth(t);
    }
    let sizes: Vec<usize> = sites.iter().map(|s| s.data.n_subjects()).collect();
    let run = match kind {
        TransportKind::Inproc => pipeline.run(sites, &mut InProcessTransport::new(&ids))?,
        TransportKind::File => {
            let dir = exchange.map(Path::to_path_buf).unwrap_or_else(|| out.join("exchange"));
            fresh_exchange(&dir)?;
            pipeline.run(sites, &mut FileExchangeTransport::new(&dir)?)?
        }
    };
    write_results(out, &run, &cfg, Some(&dataset), kind.as_str(), &sizes)
}

pub fn center_agent(
    settings: &Settings,
    data: &Path,
    center: u32,
    exchange: &Path,
    poll: (u64, u64),
) -> Result<()> {
    let cfg = settings.pipeline()?;
    let dataset = Dataset::open(data)?;
    let n = dataset.n_centers()?;
    // Only this center's files are read.
    let site = dataset.load_center(CenterId(center), &cfg.covariates)?;
    let transport = FileExchangeTransport::new(exchange)?;
    CenterAgent::new(site, cfg, n, transport)?
        .with_poll(poll_policy(poll.0, poll.1))
        .run()?;
    Ok(())
}

pub fn coordinator(
    settings: &Settings,
    data: Option<&Path>,
    exchange: &Path,
    out: &Path,
    poll: (u64, u64),
) -> Result<()> {
    let cfg = settings.pipeline()?;
    let dataset = data.map(Dataset::open).transpose()?;
    let n = match (settings.flat()?.parsed::<usize>("centers")?, &dataset) {
        (Some(n), _) => n,
        (None, Some(d)) => d.n_centers()?,
        (None, None) => bail!("the coordinator needs --centers or --data"),
    };
    let ids: Vec<CenterId> = (0..n as u32).map(CenterId).collect();
    let mut agent = CoordinatorAgent::new(&ids, cfg.clone(), FileExchangeTransport::new(exchange)?)?
        .with_poll(poll_policy(poll.0, poll.1));
    if let Some(t) = dataset.as_ref().map(|d| d.truth(&cfg.covariates)).transpose()?.flatten() {
        agent = agent.with_truth(t);
    }
    let run = agent.run()?;
    let sizes = declared_sizes(dataset.as_ref(), &run.transcript)?;
    write_results(out, &run, &cfg, dataset.as_ref(), "file", &sizes)
}

/// Center sizes from the dataset manifest, else the counts centers reported.
fn declared_sizes(dataset: Option<&Dataset>, transcript: &Transcript) -> Result<Vec<usize>> {
    if let Some(list) = dataset.and_then(|d| d.manifest.get("center_sizes")) {
        return list
            .split(',')
            .map(|s| s.trim().parse::<usize>().context("bad center_sizes entry"))
            .collect();
    }
    Ok(transcript
        .entries
        .iter()
        .filter_map(|e| match Message::decode(&e.frame) {
            Ok(Message::StatsShare { moments, .. }) => Some(moments.count() as usize),
            _ => None,
        })
        .collect())
}

fn row_matrix(v: &nalgebra::DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(1, v.len(), v.as_slice())
}

fn write_results(
    out: &Path,
    run: &PipelineRun,
    cfg: &PipelineConfig,
    dataset: Option<&Dataset>,
    transport: &str,
    sizes: &[usize],
) -> Result<()> {
    fs::create_dir_all(out)?;
    let r = &run.result;
    let hash = config_hash(cfg);
    let seed = dataset.and_then(Dataset::seed);
    let prov = provenance(&hash, seed);

    write_matrix(&out.join("global_mean.mat"), &row_matrix(&r.global_stats.mean))?;
    write_matrix(&out.join("global_std.mat"), &row_matrix(&r.global_stats.std))?;
    write_matrix(&out.join("w_tilde.mat"), &r.w_tilde)?;
    write_matrix(&out.join("basis.mat"), &r.basis.components)?;
    write_text(&out.join("admm_trace.csv"), &format!("{prov}{}", r.trace.to_csv()))?;

    let mut eig = format!("{prov}component,eigenvalue,explained_fraction\n");
    for j in 0..r.basis.n_components() {
        let _ = writeln!(eig, "{},{:e},{:e}", j + 1, r.basis.eigenvalues[j], r.basis.explained_fraction[j]);
    }
    write_text(&out.join("eigenvalues.csv"), &eig)?;
    if !r.scores.is_empty() {
        write_text(&out.join("scores.csv"), &format!("{prov}{}", scores_csv(r, None)))?;
    }

    crate::io::write_atomic(&out.join("result.bin"), &r.to_bytes())?;
    crate::io::write_atomic(&out.join("transcript.bin"), &run.transcript.to_bytes())?;
    write_text(&out.join("transcript.csv"), &format!("{prov}{}", run.transcript.to_csv()))?;
    let sha = r.sha256();
    write_text(&out.join("result.sha256"), &format!("{sha}\n"))?;

    let ctx = AuditContext {
        center_sizes: sizes.to_vec(),
        n_features: r.global_stats.n_features(),
        n_covariates: r.w_tilde.nrows(),
        score_cap: cfg.score_cap,
    };
    let audit: AuditReport = audit_privacy(&run.transcript, &ctx);
    write_text(&out.join("audit.txt"), &audit.render())?;

    let mut manifest = cfg.to_flat();
    manifest.set("kind", "results");
    manifest.set("config_hash", hash);
    manifest.set("seed", seed.map_or_else(|| "none".into(), |s| s.to_string()));
    manifest.set("transport", transport);
    manifest.set("centers", sizes.len().to_string());
    manifest.set("admm_rounds", r.admm_rounds().to_string());
    manifest.set("components", r.basis.n_components().to_string());
    manifest.set("messages", run.transcript.len().to_string());
    manifest.set("result_sha256", sha);
    manifest.set("transcript_sha256", run.transcript.sha256());
    manifest.set("audit", if audit.passed() { "pass" } else { "fail" });
    if let Some(d) = dataset {
        let abs = fs::canonicalize(&d.root).unwrap_or_else(|_| d.root.clone());
        manifest.set("data", abs.display().to_string());
    }
    write_text(&out.join("manifest.txt"), &manifest.render())?;
    info!("results in {} (audit {})", out.display(), if audit.passed() { "pass" } else { "fail" });
    if !audit.passed() {
        return Err(AuditFailed(out.join("audit.txt")).into());
    }
    Ok(())
}

fn scores_csv(r: &AnalysisResult, c: Option<usize>) -> String {
    let m = r.scores.first().map_or(0, |s| s.scores.0.ncols());
    let mut s = String::new();
    if c.is_some() {
        s.push_str("C,");
    }
    s.push_str("center,subject,label");
    for j in 1..=m {
        let _ = write!(s, ",pc{j}");
    }
    s.push('\n');
    for cs in &r.scores {
        for i in 0..cs.scores.0.nrows() {
            if let Some(c) = c {
                let _ = write!(s, "{c},");
            }
            let label = cs.labels.as_ref().map_or("", |l| l[i].as_str());
            let _ = write!(s, "{},{i},{label}", cs.center);
            for j in 0..m {
                let _ = write!(s, ",{:e}", cs.scores.0[(i, j)]);
            }
            s.push('\n');
        }
    }
    s
}

struct Loaded {
    dir: PathBuf,
    manifest: FlatConfig,
    result: AnalysisResult,
}

fn load_results(dir: &Path) -> Result<Loaded> {
    let manifest = read_flat(&dir.join("manifest.txt"))?;
    if manifest.get("kind") != Some("results") {
        bail!("{} is not a results directory", dir.display());
    }
    let bytes = fs::read(dir.join("result.bin")).with_context(|| format!("reading results in {}", dir.display()))?;
    Ok(Loaded {
        dir: dir.to_path_buf(),
        manifest,
        result: AnalysisResult::from_bytes(&bytes)?,
    })
}

fn pooled_from(l: &Loaded, data_override: Option<&Path>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let data = match data_override {
        Some(d) => d.to_path_buf(),
        None => PathBuf::from(l.manifest.get("data").context("results do not record a dataset; pass --data")?),
    };
    let dataset = Dataset::open(&data)?;
    let spec = CovariateSpec::parse(l.manifest.get("covariate_spec").unwrap_or(""))?;
    let sites = dataset.load_all(&spec)?;
    let n: usize = sites.iter().map(|s| s.data.n_subjects()).sum();
    let (f, q) = (sites[0].data.n_features(), sites[0].data.n_covariates());
    let mut x = DMatrix::zeros(n, f);
    let mut y = DMatrix::zeros(n, q);
    let mut row = 0;
    for s in &sites {
        let k = s.data.n_subjects();
        x.rows_mut(row, k).copy_from(s.data.x());
        y.rows_mut(row, k).copy_from(s.data.y());
        row += k;
    }
    Ok((x, y))
}

pub fn compare_cmd(results: &Path, data: Option<&Path>, m: usize) -> Result<()> {
    let l = load_results(results)?;
    let (x, y) = pooled_from(&l, data)?;
    let central = centralized_pipeline(&x, &y)?;
    let r = &l.result;
    let report = compare(&r.global_stats, &r.w_tilde, &r.basis, &central, m)?;
    let prov = provenance(
        l.manifest.get("config_hash").unwrap_or("unknown"),
        l.manifest.parsed("seed").ok().flatten(),
    );
    write_text(&l.dir.join("comparison.txt"), &report.to_kv())?;
    write_text(&l.dir.join("comparison.csv"), &format!("{prov}{}", report.to_csv()))?;
    print!("{}", report.to_kv());
    Ok(())
}

pub fn report(results: &[PathBuf], out: &Path, m: usize, data: Option<&Path>) -> Result<()> {
    if results.is_empty() {
        bail!("report needs at least one results directory");
    }
    let mut loaded = results.iter().map(|d| load_results(d)).collect::<Result<Vec<_>>>()?;
    loaded.sort_by_key(|l| l.manifest.parsed::<usize>("centers").ok().flatten().unwrap_or(0));
    let hash = loaded[0].manifest.get("config_hash").unwrap_or("unknown").to_string();
    let seed = loaded[0].manifest.parsed("seed").ok().flatten();
    let prov = provenance(&hash, seed);

    let mut mse = format!("{prov}C,iteration,mse_w,max_primal_residual\n");
    let mut scatter = format!("{prov}C,pc_index,feature,pc_centralized,pc_federated\n");
    let mut proj = prov.clone();
    let mut proj_header = false;
    for l in &loaded {
        let c: usize = l.manifest.parsed("centers")?.unwrap_or(0);
        for row in &l.result.trace.rows {
            let v = row.mse_vs_truth.map_or_else(String::new, |v| format!("{v:e}"));
            let _ = writeln!(mse, "{c},{},{v},{:e}", row.iteration, row.max_primal_residual);
        }
        let (x, y) = pooled_from(l, data)?;
        let central = centralized_pipeline(&x, &y)?;
        let basis = &l.result.basis;
        let k = m.min(basis.n_components());
        for j in 0..k {
            let fed = basis.components.column(j);
            let cen = central.basis.components.column(j);
            // Align signs so matching components sit on the diagonal.
            let sign = if fed.dot(&cen) < 0.0 { -1.0 } else { 1.0 };
            for i in 0..fed.len() {
                let _ = writeln!(scatter, "{c},{},{i},{:e},{:e}", j + 1, cen[i], sign * fed[i]);
            }
        }
        if !l.result.scores.is_empty() {
            let body = scores_csv(&l.result, Some(c));
            let mut lines = body.lines();
            let header = lines.next().unwrap_or_default();
            if !proj_header {
                proj.push_str(header);
                proj.push('\n');
                proj_header = true;
            }
            for line in lines {
                proj.push_str(line);
                proj.push('\n');
            }
        }
    }
    if !proj_header {
        proj.push_str("C,center,subject,label\n");
    }
    fs::create_dir_all(out)?;
    write_text(&out.join("mse_vs_iteration.csv"), &mse)?;
    write_text(&out.join("pc_scatter.csv"), &scatter)?;
    write_text(&out.join("projections.csv"), &proj)?;
    Ok(())
}

pub fn experiment(settings: &Settings, out: &Path, center_counts: &[usize]) -> Result<()> {
    let base = settings.synth_spec()?;
    let cfg = settings.pipeline()?;
    let prov = provenance(&config_hash(&cfg), Some(base.seed));
    let counts: Vec<usize> = if center_counts.is_empty() { vec![base.n_centers] } else { center_counts.to_vec() };
    let mut folds = prov.clone();
    let mut summary = format!("{prov}C,iteration,mse_mean,mse_sd\n");
    let mut cosines = format!("{prov}C,pc_index,cosine_mean,cosine_sd\n");
    let mut header = true;
    for &c in &counts {
        let spec = SynthSpec { n_centers: c, ..base.clone() };
        info!("running {} folds with {c} centers", spec.folds);
        let s = fold_runner(&spec, &cfg)?;
        let csv = s.to_csv();
        let body = if header { csv.as_str() } else { csv.split_once('\n').map_or("", |x| x.1) };
        folds.push_str(body);
        header = false;
        for (it, mean, sd) in s.mse_by_iteration(c) {
            let _ = writeln!(summary, "{c},{it},{mean:e},{sd:e}");
        }
        for (k, mean, sd) in s.cosines(c) {
            let _ = writeln!(cosines, "{c},{k},{mean:.12},{sd:e}");
        }
    }
    fs::create_dir_all(out)?;
    write_text(&out.join("folds.csv"), &folds)?;
    write_text(&out.join("mse_vs_iteration.csv"), &summary)?;
    write_text(&out.join("pc_cosines.csv"), &cosines)?;
    Ok(())
}
