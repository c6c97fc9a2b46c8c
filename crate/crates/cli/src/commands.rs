use std::fmt::Write as _;
use std::path::PathBuf;

use crel::cressie_read::{profile_curve, solve_lambda, weights_from_lambda};
use crel::data::{Dataset, ExponentialFamilyModel, Prior};
use crel::estimating::EstimatingFunction;
use crel::experiments::{
    analytic_bias_table, coverage_simulation, glm_accuracy_simulation, theorem5_variance_study, CoverageResult,
    PosteriorMethod, ReferenceMode, Table1Config, Table3Config,
};
use crel::posterior::{posterior_quantile, sample_posterior, GridPosterior, PosteriorConfig};
use nalgebra::DVector;

use crate::config::{parse_list, RunConfig};
use crate::CliError;

fn load(cfg: &RunConfig) -> Result<(Dataset, EstimatingFunction), CliError> {
    let path = PathBuf::from(cfg.require("data")?);
    let data = Dataset::from_csv_path(&path)
        .map_err(|e| CliError::Usage(format!("cannot load {}: {e}", path.display())))?;
    let psi = EstimatingFunction::parse(cfg.require("psi")?)?;
    Ok((data, psi))
}

/// Write named outputs plus the manifest into the output directory.
fn emit(cfg: &RunConfig, files: &[(String, String)]) -> Result<(), CliError> {
    let mut names: Vec<String> = files.iter().map(|(n, _)| n.clone()).collect();
    for (name, body) in files {
        std::fs::write(cfg.out_dir.join(name), body)?;
    }
    let manifest = format!("{}.manifest", cfg.command);
    names.push(manifest.clone());
    std::fs::write(cfg.out_dir.join(manifest), cfg.manifest(&names))?;
    Ok(())
}

fn obs_header(data: &Dataset) -> Vec<String> {
    if data.response().is_some() {
        std::iter::once("y".to_string()).chain((1..data.p()).map(|j| format!("x{j}"))).collect()
    } else if data.p() == 1 {
        vec!["x".into()]
    } else {
        (1..=data.p()).map(|j| format!("x{j}")).collect()
    }
}

pub fn weights(cfg: &mut RunConfig) -> Result<(), CliError> {
    let (data, psi) = load(cfg)?;
    let gamma: f64 = cfg.parsed("gamma", 0.0)?;
    let theta = parse_list(cfg.require("theta")?)?;
    let d = psi.dim(&data);
    if theta.len() != d {
        return Err(CliError::Usage(format!("theta has {} components, the estimating function needs {d}", theta.len())));
    }
    let values = psi.evaluate_all(&data, &DVector::from_vec(theta))?;
    let sol = solve_lambda(&values, gamma)?;
    let w = weights_from_lambda(&values, &sol);
    let mut csv = String::from("i,");
    csv += &obs_header(&data).join(",");
    if d == 1 {
        csv += ",psi";
    } else {
        for j in 1..=d {
            let _ = write!(csv, ",psi{j}");
        }
    }
    csv += ",weight\n";
    for i in 0..data.n() {
        let _ = write!(csv, "{}", i + 1);
        for v in data.obs().row(i).iter().chain(values.row(i).iter()) {
            let _ = write!(csv, ",{v}");
        }
        let _ = writeln!(csv, ",{}", w.weights[i]);
    }
    print!("{csv}");
    emit(cfg, &[("weights.csv".into(), csv)])
}

fn parse_grid(s: &str) -> Result<Vec<f64>, CliError> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || CliError::Usage(format!("grid must be lo:hi:m, got `{s}`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let m: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if m == 0 || !lo.is_finite() || !hi.is_finite() || (m > 1 && hi <= lo) {
        return Err(bad());
    }
    if m == 1 {
        return Ok(vec![lo]);
    }
    Ok((0..m).map(|k| lo + (hi - lo) * k as f64 / (m - 1) as f64).collect())
}

pub fn profile(cfg: &mut RunConfig) -> Result<(), CliError> {
    let (data, psi) = load(cfg)?;
    let gamma: f64 = cfg.parsed("gamma", 0.0)?;
    let grid = parse_grid(cfg.require("grid")?)?;
    let overlay = match cfg.get("parametric") {
        None | Some("none") => false,
        Some("laplace") => true,
        Some(o) => return Err(CliError::Usage(format!("unsupported parametric overlay `{o}` (only `laplace`)"))),
    };
    let curve = profile_curve(&data, &psi, &grid, gamma, overlay)?;
    let mut csv = String::from(if overlay { "theta,gelr,parametric\n" } else { "theta,gelr\n" });
    for p in &curve {
        let _ = write!(csv, "{},{}", p.theta, p.gelr);
        if let Some(l) = p.parametric {
            let _ = write!(csv, ",{l}");
        }
        csv.push('\n');
    }
    print!("{csv}");
    emit(cfg, &[("profile.csv".into(), csv)])
}

/// `flat` or `normal:mean,sd` with `/`-separated per-component lists.
fn parse_prior(s: &str, d: usize) -> Result<Prior, CliError> {
    if s == "flat" {
        return Ok(Prior::Flat { dim: d });
    }
    let bad = || CliError::Usage(format!("prior must be `flat` or `normal:mean,sd`, got `{s}`"));
    let rest = s.strip_prefix("normal:").ok_or_else(bad)?;
    let (m, sd) = rest.split_once(',').ok_or_else(bad)?;
    let expand = |t: &str| -> Result<Vec<f64>, CliError> {
        let v = t.split('/').map(|x| x.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<_>, _>>()?;
        match v.len() {
            1 => Ok(vec![v[0]; d]),
            k if k == d => Ok(v),
            _ => Err(CliError::Usage(format!("prior `{s}` needs 1 or {d} components"))),
        }
    };
    Ok(Prior::normal(expand(m)?, expand(sd)?)?)
}

pub fn posterior(cfg: &mut RunConfig) -> Result<(), CliError> {
    let (data, psi) = load(cfg)?;
    let gamma: f64 = cfg.parsed("gamma", 0.0)?;
    let d = psi.dim(&data);
    let prior = parse_prior(&cfg.string("prior", "flat"), d)?;
    let alphas = parse_list(&cfg.string("alpha", "0.025,0.5,0.975"))?;
    if alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
        return Err(CliError::Usage("quantile levels must lie in (0, 1)".into()));
    }
    let method = cfg.string("method", "mcmc");
    let mut out = String::from("component,alpha,quantile,mc_se\n");
    let mut files = Vec::new();
    match method.as_str() {
        "mcmc" => {
            let pc = PosteriorConfig {
                chain_length: cfg.parsed("chain_length", 50_000)?,
                burn_in: cfg.parsed("burn_in", 5_000)?,
                thin: cfg.parsed("thin", 1)?,
                seed: cfg.seed,
                ..Default::default()
            };
            let sample = sample_posterior(&data, &psi, &prior, &pc, gamma)?;
            for j in 0..d {
                for &a in &alphas {
                    let q = posterior_quantile(&sample, j, a)?;
                    let _ = writeln!(out, "{},{a},{},{}", j + 1, q.value, q.mc_se);
                }
            }
            let ess: Vec<String> = sample.ess.iter().map(|e| format!("{e:.0}")).collect();
            eprintln!(
                "acceptance {:.3}, ess {}, failed evaluations {}",
                sample.acceptance_rate,
                ess.join("/"),
                sample.failures
            );
            if cfg.parsed("chain", false)? {
                let mut buf = Vec::new();
                sample.write_csv(&mut buf)?;
                files.push(("chain.csv".to_string(), String::from_utf8_lossy(&buf).into_owned()));
            }
        }
        "grid" => {
            if d != 1 {
                return Err(CliError::Usage("--method grid needs a scalar parameter".into()));
            }
            let g = GridPosterior::gel(&data, &psi, &prior, gamma, cfg.parsed("nodes", 2001)?)?;
            for &a in &alphas {
                let _ = writeln!(out, "1,{a},{},0", g.quantile(a)?);
            }
        }
        m => return Err(CliError::Usage(format!("method must be mcmc or grid, got `{m}`"))),
    }
    print!("{out}");
    files.insert(0, ("posterior.csv".to_string(), out));
    emit(cfg, &files)
}

/// Desk scale: Table 1 keeps M = 80 and shortens chains to 11000 (1000
/// burn-in); Table 3 uses M = 40 with 6000 (1000); the thm5 study uses
/// M = 500 on a 2001-node grid. The `paper` scale: chains 50000 (5000), Table 3
/// M = 120, thm5 M = 2000 on 4001 nodes.
struct Scale {
    chain: PosteriorConfig,
    table3_chain: PosteriorConfig,
    table3_m: usize,
    thm5_m: usize,
    thm5_nodes: usize,
}

fn scale(name: &str) -> Result<Scale, CliError> {
    let chain = |l, b| PosteriorConfig { chain_length: l, burn_in: b, ..Default::default() };
    match name {
        "desk" => Ok(Scale {
            chain: chain(11_000, 1_000),
            table3_chain: chain(6_000, 1_000),
            table3_m: 40,
            thm5_m: 500,
            thm5_nodes: 2001,
        }),
        "paper" => Ok(Scale {
            chain: chain(50_000, 5_000),
            table3_chain: chain(50_000, 5_000),
            table3_m: 120,
            thm5_m: 2000,
            thm5_nodes: 4001,
        }),
        s => Err(CliError::Usage(format!("scale must be desk or paper, got `{s}`"))),
    }
}

fn coverage_outputs(stem: &str, r: &CoverageResult, text_scale: f64) -> Result<Vec<(String, String)>, CliError> {
    let mut buf = Vec::new();
    r.write_csv(&mut buf)?;
    let mut text = r.to_text(text_scale);
    if r.failed_replications > 0 {
        let _ = writeln!(text, "# failed replications: {}", r.failed_replications);
    }
    for c in r.cells.iter().filter(|c| c.failures > 0) {
        let _ = writeln!(text, "# cell {}/{}/{}/{}: {} failures", c.psi, c.gamma, c.parameter, c.alpha, c.failures);
    }
    Ok(vec![(format!("{stem}.csv"), String::from_utf8_lossy(&buf).into_owned()), (format!("{stem}.txt"), text)])
}

fn check_failures(r: &CoverageResult) -> Result<(), CliError> {
    let f = r.failed_cell_fraction();
    if f > 0.1 {
        return Err(CliError::TooManyFailures(format!("{:.0}% of cells lost more than 10% of replications", 100.0 * f)));
    }
    Ok(())
}

pub fn reproduce(cfg: &mut RunConfig) -> Result<(), CliError> {
    let table = cfg.require("table")?.to_string();
    let sc = scale(&cfg.string("scale", "desk"))?;
    let seed = cfg.seed;
    let (files, status) = match table.as_str() {
        "1" => {
            let r = coverage_simulation(&Table1Config::published_layout(80, seed, PosteriorMethod::Mcmc(sc.chain)))?;
            (coverage_outputs("table1", &r, 100.0)?, check_failures(&r))
        }
        "2" => {
            let t = analytic_bias_table()?;
            let mut buf = Vec::new();
            t.write_csv(&mut buf)?;
            (vec![("table2.csv".into(), String::from_utf8_lossy(&buf).into_owned()), ("table2.txt".into(), t.to_text())], Ok(()))
        }
        "3" => {
            let mut c = Table3Config::published(sc.table3_m, seed, sc.table3_chain);
            c.reference = match cfg.string("reference", "clean").as_str() {
                "clean" => ReferenceMode::Clean,
                "contaminated" => ReferenceMode::Contaminated,
                o => return Err(CliError::Usage(format!("reference must be clean or contaminated, got `{o}`"))),
            };
            let r = glm_accuracy_simulation(&c)?;
            (coverage_outputs("table3", &r, 1.0)?, check_failures(&r))
        }
        "thm5" => {
            let alpha: f64 = cfg.parsed("alpha", 0.9)?;
            let gammas = [-2.0, -1.0, -0.5, -2.0 / 3.0, 0.0];
            let s = theorem5_variance_study(
                ExponentialFamilyModel::Exponential,
                30,
                sc.thm5_m,
                &gammas,
                alpha,
                seed,
                &PosteriorMethod::Grid { nodes: sc.thm5_nodes },
            )?;
            let mut buf = Vec::new();
            s.write_csv(&mut buf)?;
            let mut text = format!(
                "# variance of the posterior {alpha}-quantile, Exponential data, n=30, M={}, seed={seed}\n{:>10}{:>14}{:>16}{:>12}\n",
                s.m, "gamma", "variance", "diff vs 0", "se"
            );
            let zero = gammas.len() - 1;
            for (i, g) in gammas.iter().enumerate() {
                let (diff, se) = s.variance_difference(i, zero);
                let _ = writeln!(text, "{:>10.4}{:>14.6}{:>16.3e}{:>12.3e}", g, s.variances[i], diff, se);
            }
            if s.failures > 0 {
                let _ = writeln!(text, "# failed replications: {}", s.failures);
            }
            let status = if s.failures * 10 > s.m {
                Err(CliError::TooManyFailures(format!("{} of {} replications failed", s.failures, s.m)))
            } else {
                Ok(())
            };
            (vec![("thm5.csv".into(), String::from_utf8_lossy(&buf).into_owned()), ("thm5.txt".into(), text)], status)
        }
        t => return Err(CliError::Usage(format!("table must be 1, 2, 3 or thm5, got `{t}`"))),
    };
    print!("{}", files[1].1);
    emit(cfg, &files)?;
    status
}
