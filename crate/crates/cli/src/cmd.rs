use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use realmerge_core::toy::{probe_similarity, render_similarity};
use realmerge_core::{
    auc, evaluate_in_dir, incremental_remerge, load_archive, merge_archives, render_table,
    run_protocol, run_theory, save_archive, with_threads, write_protocol_outputs, Error,
    MergeConfig, Method, ProtocolConfig, ScoreSet, TensorArchive, TheoryConfig,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::MergeFlags;

const CONFIG: u8 = 2;
const DATA: u8 = 3;
const VERDICT: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: CONFIG,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidArgument(_) | Error::EmptyInput(_) | Error::RankDeficient { .. } => {
                CONFIG
            }
            _ => DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

pub struct Context {
    pub threads: Option<usize>,
    pub deterministic: bool,
}

impl Context {
    fn run<T: Send>(
        &self,
        f: impl FnOnce() -> realmerge_core::Result<T> + Send,
    ) -> Result<T, Failure> {
        Ok(with_threads(self.threads, f)??)
    }

    fn timing(&self, start: Instant) {
        if !self.deterministic {
            println!("elapsed: {:.3}s", start.elapsed().as_secs_f64());
        }
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::config(format!("bad config {}: {e}", path.display())))
}

fn echo(value: &impl Serialize) -> Outcome {
    let text = serde_json::to_string(value).map_err(|e| Failure::config(e.to_string()))?;
    println!("config: {text}");
    Ok(())
}

fn write_out(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).map_err(|e| Failure {
        code: DATA,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

impl MergeFlags {
    fn apply(&self, cfg: &mut MergeConfig) {
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(r) = self.rank_frac {
            cfg.rank_frac = r;
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(p) = self.sparsity {
            cfg.sparsity_p = p;
        }
        if let Some(v) = self.eta_variant {
            cfg.eta_variant = v;
        }
        if let Some(e) = self.eps {
            cfg.eps = e;
        }
        if self.average_anchor {
            cfg.average_anchor = true;
        }
    }
}

pub fn merge(
    ctx: &Context,
    base: &Path,
    specialists: &[std::path::PathBuf],
    out: &Path,
    config: Option<&Path>,
    flags: &MergeFlags,
) -> Outcome {
    let mut cfg: MergeConfig = read_config(config)?;
    flags.apply(&mut cfg);
    echo(&cfg)?;
    cfg.validate()?;
    let start = Instant::now();
    let base = load_archive(base)?;
    let specs = specialists
        .iter()
        .map(load_archive)
        .collect::<realmerge_core::Result<Vec<_>>>()?;
    let outcome = ctx.run(|| merge_archives(&base, &specs, &cfg))?;
    for note in &outcome.notes {
        println!("note: {note}");
    }
    if let Some(d) = &outcome.decomposition {
        let s = d.summary();
        println!(
            "r2m: core_norm={:.6e} tau_bar_norm={:.6e} m_mean={:.6e} eta={:.6e} degenerate={}",
            s.core_norm, s.tau_bar_norm, s.m_mean, s.eta, s.degenerate
        );
        for r in &s.ranks {
            println!(
                "r2m: rank {:>3} of {}x{} for {}",
                r.rank, r.rows, r.cols, r.name
            );
        }
    }
    save_archive(&outcome.archive, out)?;
    println!("wrote {}", out.display());
    ctx.timing(start);
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScoreFile {
    One(ScoreSet),
    Many(Vec<ScoreSet>),
}

pub fn eval(
    ctx: &Context,
    scores: Option<&Path>,
    model: Option<&Path>,
    data: Option<&Path>,
    out: Option<&Path>,
) -> Outcome {
    let start = Instant::now();
    if let Some(path) = scores {
        echo(&serde_json::json!({ "scores": path }))?;
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let sets = match serde_json::from_str(&text).map_err(|e| Failure {
            code: DATA,
            message: format!("bad score file {}: {e}", path.display()),
        })? {
            ScoreFile::One(s) => vec![s],
            ScoreFile::Many(v) => v,
        };
        let mut report = serde_json::Map::new();
        let mut text = String::new();
        for s in &sets {
            s.validate()?;
            let a = auc(s)?;
            writeln!(text, "{}\t{a:.4}", s.task_id).expect("string write");
            report.insert(s.task_id.clone(), a.into());
        }
        print!("{text}");
        if let Some(o) = out {
            write_out(
                o,
                &serde_json::to_string_pretty(&report).expect("finite values"),
            )?;
        }
    } else {
        let (model, dir) = (
            model.expect("clap requires --model"),
            data.expect("clap requires --data"),
        );
        echo(&serde_json::json!({ "model": model, "data": dir }))?;
        let archive = load_archive(model)?;
        let report = ctx.run(|| evaluate_in_dir(dir, &archive))?;
        print!("{}", render_table(std::slice::from_ref(&report)));
        if let Some(o) = out {
            write_out(o, &report.to_json()?)?;
        }
    }
    ctx.timing(start);
    Ok(())
}

fn protocol_config(config: Option<&Path>, seed: Option<u64>) -> Result<ProtocolConfig, Failure> {
    let mut cfg: ProtocolConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn probe_sim(
    ctx: &Context,
    config: Option<&Path>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Outcome {
    let cfg = protocol_config(config, seed)?;
    echo(&cfg)?;
    cfg.validate()?;
    let start = Instant::now();
    let rows = ctx.run(|| probe_similarity(&cfg))?;
    let table = render_similarity(&rows);
    print!("{table}");
    if let Some(o) = out {
        write_out(o, &table)?;
    }
    ctx.timing(start);
    Ok(())
}

pub fn verify_theory(
    ctx: &Context,
    config: Option<&Path>,
    seed: Option<u64>,
    sigma_a: Option<f64>,
    sigma_z: Option<f64>,
    flags: &MergeFlags,
    out: Option<&Path>,
) -> Outcome {
    let mut cfg: TheoryConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.noise_seed = s;
    }
    if let Some(a) = sigma_a {
        cfg.sigma_a = a;
    }
    if let Some(z) = sigma_z {
        cfg.sigma_z = z;
    }
    flags.apply(&mut cfg.merge);
    echo(&cfg)?;
    if cfg.merge.method != Method::R2m {
        return Err(Failure::config("the theory checks always merge with r2m"));
    }
    let start = Instant::now();
    let run = ctx.run(|| run_theory(&cfg))?;
    print!("{}", run.report.render());
    if let Some(o) = out {
        write_out(
            o,
            &serde_json::to_string_pretty(&run.report).map_err(Error::from)?,
        )?;
    }
    ctx.timing(start);
    if run.report.verdicts.all() {
        Ok(())
    } else {
        Err(Failure {
            code: VERDICT,
            message: "at least one theory check failed".into(),
        })
    }
}

pub fn protocol(
    ctx: &Context,
    config: Option<&Path>,
    seed: Option<u64>,
    incremental: bool,
    remerge: bool,
    out: &Path,
) -> Outcome {
    let start = Instant::now();
    if remerge {
        echo(&serde_json::json!({ "remerge": out }))?;
        let (outcome, written) = ctx.run(|| incremental_remerge(out))?;
        print!("{}", outcome.table);
        for p in written {
            println!("wrote {}", p.display());
        }
        ctx.timing(start);
        return Ok(());
    }
    let mut cfg = protocol_config(config, seed)?;
    cfg.incremental |= incremental;
    echo(&cfg)?;
    cfg.validate()?;
    let result = ctx.run(|| run_protocol(&cfg))?;
    for m in &result.merged {
        for note in &m.notes {
            println!("note: {}: {note}", m.label);
        }
    }
    print!("{}", result.table);
    println!();
    print!("{}", render_similarity(&result.similarity));
    if let Some(inc) = &result.incremental {
        println!();
        print!("{}", inc.table);
    }
    for p in write_protocol_outputs(&result, out)? {
        println!("wrote {}", p.display());
    }
    ctx.timing(start);
    Ok(())
}

fn describe(archive: &TensorArchive) -> String {
    let mut out = String::new();
    let id = if archive.id().is_empty() {
        "-"
    } else {
        archive.id()
    };
    writeln!(out, "id: {id}").expect("string write");
    for (k, v) in archive.meta() {
        writeln!(out, "meta {k}: {v}").expect("string write");
    }
    writeln!(out, "tensors: {}", archive.len()).expect("string write");
    for (name, t) in archive.iter() {
        let norm = t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        writeln!(
            out,
            "{name}\t{:?}\t{}\t{}\tnorm={norm:.6e}",
            t.shape(),
            serde_json::to_value(t.role())
                .expect("role")
                .as_str()
                .unwrap_or("?"),
            t.numel()
        )
        .expect("string write");
    }
    out
}

pub fn inspect(path: &Path) -> Outcome {
    echo(&serde_json::json!({ "path": path }))?;
    print!("{}", describe(&load_archive(path)?));
    Ok(())
}
