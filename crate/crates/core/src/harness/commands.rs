//! The pipeline stages behind the CLI subcommands.
//!
//! Artifacts live under the configured output directory:
//!
//! ```text
//! maps/<task>.map                 gen
//! qtables/<task>.q                solve
//! priors/transitions.txt, qp.q    priors
//! encoder/encoder.ckpt            train-encoder
//! encoder/loss.csv
//! encoder/embeddings.tsv
//! runs/<mode>-seed<k>/metrics.csv run
//! runs/<mode>-seed<k>/heatmap.csv
//! runs/<mode>-seed<k>/interventions.csv
//! runs/<mode>-seed<k>/buffer.tsv
//! report.csv                      report
//! ```
//!
//! Every text artifact starts with the resolved config as `# key = value`
//! lines; the checkpoint carries it in its header.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{ExperimentConfig, PriorFit, TaskSpec};
use crate::agent::{train_agent, EmbeddingTable, Mode, RunResult, ShieldState, FINAL_WINDOW};
use crate::error::{Error, Result};
use crate::gridworld::{CellKind, GridSpec};
use crate::latent::{class_separation, enumerate_labeled, EncoderModel, EncoderTrainer, LabeledReplayBuffer, Separation};
use crate::priors::{
    fit_prior_network, select_prior_transitions, tabulate_prior, train_prior_q, transitions_to_text, PriorTask, PriorTransition,
};
use crate::shield::{gate_accuracy, UnsafeEmbeddingBuffer};
use crate::solver::{bellman_residual, value_iteration, QFunction};

/// Sweep cap for the tabular prior fit.
const PRIOR_SWEEPS: usize = 100_000;

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Resolved config plus command-specific entries.
pub fn provenance(cfg: &ExperimentConfig, command: &str, extra: &[(&str, String)]) -> Vec<(String, String)> {
    let mut p = vec![("command".to_string(), command.to_string())];
    p.extend(cfg.pairs());
    p.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
    p
}

fn header(prov: &[(String, String)]) -> String {
    prov.iter().map(|(k, v)| format!("# {k} = {v}\n")).collect()
}

pub fn map_path(cfg: &ExperimentConfig, task: &TaskSpec) -> PathBuf {
    cfg.out_dir.join("maps").join(format!("{}.map", task.name()))
}

pub fn qtable_path(cfg: &ExperimentConfig, task: &TaskSpec) -> PathBuf {
    cfg.out_dir.join("qtables").join(format!("{}.q", task.name()))
}

pub fn prior_q_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("priors").join("qp.q")
}

pub fn transitions_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("priors").join("transitions.txt")
}

pub fn checkpoint_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("encoder").join("encoder.ckpt")
}

pub fn run_dir(cfg: &ExperimentConfig, mode: Mode, seed: u64) -> PathBuf {
    cfg.out_dir.join("runs").join(format!("{}-seed{seed}", mode.name()))
}

pub fn report_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("report.csv")
}

pub fn load_map(cfg: &ExperimentConfig, task: &TaskSpec) -> Result<GridSpec> {
    GridSpec::parse_map(&read_text(&map_path(cfg, task))?)
}

/// The env, prior, encoder and holdout tasks, without duplicates, in config
/// order.
pub fn all_tasks(cfg: &ExperimentConfig) -> Vec<TaskSpec> {
    let mut out = vec![cfg.env];
    for t in cfg.prior_tasks.iter().chain(&cfg.encoder_tasks).chain([&cfg.holdout]) {
        if !out.contains(t) {
            out.push(*t);
        }
    }
    out
}

pub fn cmd_gen(cfg: &ExperimentConfig, tasks: &[TaskSpec]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for task in tasks {
        let spec = task.generate()?;
        let path = map_path(cfg, task);
        let prov = provenance(cfg, "gen", &[("task", task.to_string())]);
        write_file(&path, format!("{}{}", header(&prov), spec.to_map_string()).as_bytes())?;
        info!("wrote {}", path.display());
        written.push(path);
    }
    Ok(written)
}

pub fn cmd_solve(cfg: &ExperimentConfig, tasks: &[TaskSpec]) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let mut written = Vec::new();
    for task in tasks {
        let spec = load_map(cfg, task)?;
        let q = value_iteration(&spec, cfg.prior.gamma, cfg.vi_tolerance)?;
        let residual = bellman_residual(&spec, &q);
        let prov = provenance(cfg, "solve", &[("task", task.to_string()), ("residual", format!("{residual:e}"))]);
        let path = qtable_path(cfg, task);
        write_file(&path, q.to_text(&spec.content_hash(), &prov).as_bytes())?;
        info!("solved {task}: residual {residual:e}");
        written.push(path);
    }
    Ok(written)
}

/// Result of the prior stage, kept in memory for callers that skip the files.
#[derive(Debug, Clone)]
pub struct PriorArtifacts {
    pub q_p: QFunction,
    pub transitions: Vec<PriorTransition>,
}

pub fn build_prior(cfg: &ExperimentConfig) -> Result<PriorArtifacts> {
    cfg.validate()?;
    let target = load_map(cfg, &cfg.env)?;
    let tasks = cfg
        .prior_tasks
        .iter()
        .map(|t| {
            let spec = load_map(cfg, t)?;
            let q = value_iteration(&spec, cfg.prior.gamma, cfg.vi_tolerance)?;
            Ok(PriorTask { spec, q })
        })
        .collect::<Result<Vec<_>>>()?;
    let transitions = select_prior_transitions(&tasks, &cfg.prior)?;
    let q_p = match cfg.prior_fit {
        PriorFit::Table => train_prior_q(&transitions, target.state_count(), cfg.prior.gamma, PRIOR_SWEEPS)
            .or_else(|e| if transitions.is_empty() { Ok(QFunction::zeros(target.state_count(), cfg.prior.gamma)) } else { Err(e) })?,
        PriorFit::Network => {
            let net = fit_prior_network(&tasks, &transitions, cfg.prior.gamma, &cfg.prior_net)?;
            tabulate_prior(&net, &target, cfg.prior.gamma)?
        }
    };
    if !q_p.is_finite() {
        return Err(Error::NonFinite("prior Q-table".into()));
    }
    Ok(PriorArtifacts { q_p, transitions })
}

pub fn cmd_priors(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let art = build_prior(cfg)?;
    let target = load_map(cfg, &cfg.env)?;
    let prov = provenance(cfg, "priors", &[("selected", art.transitions.len().to_string())]);
    let tpath = transitions_path(cfg);
    write_file(&tpath, transitions_to_text(&art.transitions, &prov).as_bytes())?;
    let qpath = prior_q_path(cfg);
    write_file(&qpath, art.q_p.to_text(&target.content_hash(), &prov).as_bytes())?;
    info!("selected {} prior transitions", art.transitions.len());
    Ok(vec![tpath, qpath])
}

/// Trains the encoder on the enumerated states of the encoder tasks. Returns
/// the model and the per-step loss curve.
pub fn train_encoder(cfg: &ExperimentConfig) -> Result<(EncoderModel, Vec<f64>)> {
    cfg.validate()?;
    let mut buffer = LabeledReplayBuffer::new(cfg.encoder.replay_capacity);
    let mut first: Option<GridSpec> = None;
    for t in &cfg.encoder_tasks {
        let spec = load_map(cfg, t)?;
        buffer.extend(enumerate_labeled(&spec));
        first.get_or_insert(spec);
    }
    let spec = first.expect("validated non-empty task list");
    if cfg.encoder_tasks.contains(&cfg.holdout) {
        warn!("holdout task {} is also an encoder task", cfg.holdout);
    }
    let model = EncoderModel::for_grid(&spec, &cfg.encoder, cfg.encoder_seed);
    let mut trainer = EncoderTrainer::new(model, cfg.encoder, cfg.encoder_seed);
    let mut curve = Vec::with_capacity(cfg.encoder_steps);
    for step in 0..cfg.encoder_steps {
        let loss = trainer.train_step(&buffer)?;
        if step % 500 == 0 {
            info!("encoder step {step}: loss {loss:.4}");
        }
        curve.push(loss);
    }
    Ok((trainer.model, curve))
}

/// `state_index safe z_1 … z_k` for every reachable state of `spec`.
pub fn embeddings_tsv(spec: &GridSpec, model: &EncoderModel, prov: &[(String, String)]) -> Result<String> {
    let mut out = header(prov);
    for lo in enumerate_with_index(spec) {
        let (idx, safe, obs) = lo;
        let z = model.encode(&obs)?;
        let _ = write!(out, "{idx}\t{}", u8::from(safe));
        for v in z {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

fn enumerate_with_index(spec: &GridSpec) -> Vec<(usize, bool, crate::gridworld::Observation)> {
    let states = spec.reachable_states();
    let labels = enumerate_labeled(spec);
    states.iter().zip(labels).map(|(s, l)| (spec.index_of(s), l.safe, l.obs)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderEval {
    pub separation: Separation,
    /// Gate accuracy on states not used to fill the unsafe buffer.
    pub accuracy: f64,
    pub buffered: usize,
    pub tested: usize,
}

fn embed_labeled(model: &EncoderModel, spec: &GridSpec) -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
    let labeled = enumerate_labeled(spec);
    let z = labeled.iter().map(|l| model.encode(&l.obs)).collect::<Result<Vec<_>>>()?;
    Ok((z, labeled.iter().map(|l| l.safe).collect()))
}

/// Fills an unsafe buffer with a random half of `buffer_grid`'s unsafe states
/// and scores the distance gate on every reachable state of `query_grid` that
/// is not in the buffer. Separation is measured on `query_grid`.
pub fn evaluate_encoder(cfg: &ExperimentConfig, model: &EncoderModel, buffer_grid: &GridSpec, query_grid: &GridSpec, seed: u64) -> Result<EncoderEval> {
    let (bz, bsafe) = embed_labeled(model, buffer_grid)?;
    let (qz, qsafe) = embed_labeled(model, query_grid)?;
    let separation = class_separation(&qz, &qsafe);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unsafe_idx: Vec<usize> = (0..bz.len()).filter(|&i| !bsafe[i]).collect();
    unsafe_idx.shuffle(&mut rng);
    let take = unsafe_idx.len().div_ceil(2).min(cfg.shield.capacity);
    let mut buffer = UnsafeEmbeddingBuffer::new(cfg.shield.capacity);
    let same = buffer_grid == query_grid;
    let mut excluded = vec![false; qz.len()];
    for (k, &i) in unsafe_idx[..take].iter().enumerate() {
        buffer.push(k as u64, bz[i].clone());
        if same {
            excluded[i] = true;
        }
    }
    let queries: Vec<(Vec<f64>, bool)> = (0..qz.len()).filter(|&i| !excluded[i]).map(|i| (qz[i].clone(), qsafe[i])).collect();
    Ok(EncoderEval {
        separation,
        accuracy: gate_accuracy(&buffer, &queries, &cfg.shield, &mut rng),
        buffered: take,
        tested: queries.len(),
    })
}

pub fn cmd_train_encoder(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let (model, curve) = train_encoder(cfg)?;
    let prov = provenance(cfg, "train-encoder", &[]);
    let ckpt = checkpoint_path(cfg);
    write_file(&ckpt, &model.to_checkpoint(&cfg.encoder, &prov))?;
    let mut loss = header(&prov);
    loss.push_str("step,loss\n");
    for (i, l) in curve.iter().enumerate() {
        let _ = writeln!(loss, "{i},{l}");
    }
    let lpath = cfg.out_dir.join("encoder").join("loss.csv");
    write_file(&lpath, loss.as_bytes())?;
    let target = load_map(cfg, &cfg.env)?;
    let epath = cfg.out_dir.join("encoder").join("embeddings.tsv");
    write_file(&epath, embeddings_tsv(&target, &model, &prov)?.as_bytes())?;
    let mut eval = header(&prov);
    eval.push_str("buffer_grid,query_grid,intra,inter,ratio,accuracy,buffered,tested\n");
    let holdout = load_map(cfg, &cfg.holdout)?;
    for (bt, bspec, qt, qspec) in [
        (cfg.env, &target, cfg.env, &target),
        (cfg.env, &target, cfg.holdout, &holdout),
        (cfg.holdout, &holdout, cfg.holdout, &holdout),
    ] {
        let e = evaluate_encoder(cfg, &model, bspec, qspec, cfg.encoder_seed)?;
        info!("buffer {bt}, queries {qt}: separation ratio {:.3}, gate accuracy {:.3}", e.separation.ratio(), e.accuracy);
        let _ = writeln!(
            eval,
            "{bt},{qt},{},{},{},{},{},{}",
            e.separation.intra,
            e.separation.inter,
            e.separation.ratio(),
            e.accuracy,
            e.buffered,
            e.tested
        );
    }
    let vpath = cfg.out_dir.join("encoder").join("eval.csv");
    write_file(&vpath, eval.as_bytes())?;
    Ok(vec![ckpt, lpath, epath, vpath])
}

pub fn load_checkpoint(cfg: &ExperimentConfig) -> Result<EncoderModel> {
    let path = checkpoint_path(cfg);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    EncoderModel::from_checkpoint(&bytes)
}

pub fn load_prior_q(cfg: &ExperimentConfig, target: &GridSpec) -> Result<QFunction> {
    let path = prior_q_path(cfg);
    let (q, hash) = QFunction::from_text(&read_text(&path)?)?;
    if hash != target.content_hash() {
        return Err(Error::IncompatibleTasks(format!("{} was built for another layout", path.display())));
    }
    Ok(q)
}

/// Runs every configured (mode, seed) pair in parallel. Shielded modes need
/// `q_p`; the state-checked mode also needs `encoder`.
pub fn run_matrix(cfg: &ExperimentConfig, target: &GridSpec, q_p: Option<&QFunction>, encoder: Option<&EncoderModel>) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let table = encoder.map(|e| EmbeddingTable::build(target, e)).transpose()?;
    let jobs: Vec<(Mode, u64)> = cfg.modes.iter().flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s))).collect();
    jobs.par_iter()
        .map(|&(mode, seed)| {
            let agent = cfg.agent_for(mode, seed);
            let shield = match mode.gate() {
                None => None,
                Some(gate) => {
                    let q = q_p.ok_or_else(|| Error::Config(format!("mode {mode} needs a prior Q-table")))?;
                    let emb = if mode == Mode::StateCheckedPriors {
                        Some(table.clone().ok_or_else(|| Error::Config("state-checked mode needs an encoder".into()))?)
                    } else {
                        None
                    };
                    Some(ShieldState::new(q.clone(), emb, cfg.shield, gate))
                }
            };
            train_agent(target, &agent, shield)
        })
        .collect()
}

pub fn metrics_csv(run: &RunResult, prov: &[(String, String)]) -> String {
    let mut out = header(prov);
    out.push_str("episode,steps,return,violated,cumulative_violations\n");
    let mut cumulative = 0;
    for e in &run.episodes {
        cumulative += usize::from(e.violated);
        let _ = writeln!(out, "{},{},{},{},{}", e.episode, e.steps, e.ret, u8::from(e.violated), cumulative);
    }
    out
}

pub fn heatmap_csv(run: &RunResult, width: usize, prov: &[(String, String)]) -> String {
    let mut out = header(prov);
    for row in run.heatmap.chunks(width) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn interventions_csv(run: &RunResult, prov: &[(String, String)]) -> String {
    let mut out = header(prov);
    out.push_str("step,state,proposed,executed,distance,armed,loop_draws\n");
    for i in &run.interventions {
        let d = i.distance.map(|d| d.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{},{},{}", i.step, i.state, i.proposed, i.executed, d, u8::from(i.armed), i.loop_draws);
    }
    out
}

pub fn cmd_run(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let target = load_map(cfg, &cfg.env)?;
    let shielded = cfg.modes.iter().any(|m| m.gate().is_some());
    let q_p = if shielded { Some(load_prior_q(cfg, &target)?) } else { None };
    let encoder = if cfg.modes.contains(&Mode::StateCheckedPriors) {
        let e = load_checkpoint(cfg)?;
        if e.obs_shape != (crate::gridworld::OBS_CHANNELS, target.height, target.width) {
            return Err(Error::IncompatibleTasks("encoder was trained on another grid size".into()));
        }
        Some(e)
    } else {
        None
    };
    let runs = run_matrix(cfg, &target, q_p.as_ref(), encoder.as_ref())?;
    let mut written = Vec::new();
    for run in &runs {
        let dir = run_dir(cfg, run.mode, run.seed);
        let prov = provenance(cfg, "run", &[("mode", run.mode.to_string()), ("seed", run.seed.to_string())]);
        let files = [
            ("metrics.csv", metrics_csv(run, &prov)),
            ("heatmap.csv", heatmap_csv(run, target.width, &prov)),
            ("interventions.csv", interventions_csv(run, &prov)),
            ("buffer.tsv", run.buffer.as_ref().map(|b| b.to_tsv(&prov)).unwrap_or_else(|| header(&prov))),
        ];
        for (name, body) in files {
            let path = dir.join(name);
            write_file(&path, body.as_bytes())?;
            written.push(path);
        }
        info!(
            "{} seed {}: {} episodes, final return {:.3}, violations {}",
            run.mode,
            run.seed,
            run.episodes.len(),
            run.final_return(FINAL_WINDOW),
            run.violations()
        );
    }
    Ok(written)
}

/// One parsed metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRow {
    pub episode: usize,
    pub steps: usize,
    pub ret: f64,
    pub violated: bool,
    pub cumulative: usize,
}

pub fn parse_metrics(text: &str) -> Result<Vec<EpisodeRow>> {
    let ctx = "metrics";
    let mut rows = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()).skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(Error::parse(ctx, format!("expected 5 fields in `{line}`")));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::parse(ctx, format!("bad integer `{s}`")));
        rows.push(EpisodeRow {
            episode: num(f[0])?,
            steps: num(f[1])?,
            ret: f[2].parse().map_err(|_| Error::parse(ctx, format!("bad return `{}`", f[2])))?,
            violated: num(f[3])? == 1,
            cumulative: num(f[4])?,
        });
    }
    Ok(rows)
}

pub fn parse_heatmap(text: &str) -> Result<Vec<Vec<u64>>> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.trim().parse().map_err(|_| Error::parse("heatmap", format!("bad count `{v}`"))))
                .collect()
        })
        .collect()
}

/// Mean return of episodes ending in the last `fraction` of `budget` steps.
pub fn final_return(rows: &[EpisodeRow], budget: u64, fraction: f64) -> f64 {
    let cutoff = budget as f64 * (1.0 - fraction);
    let mut end = 0u64;
    let mut tail = Vec::new();
    for r in rows {
        end += r.steps as u64;
        if end as f64 > cutoff {
            tail.push(r.ret);
        }
    }
    if tail.is_empty() {
        0.0
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

/// Share of visits landing on cells within `radius` moves of the start cell,
/// moving between non-wall, non-lava cells.
pub fn near_start_share(spec: &GridSpec, heatmap: &[Vec<u64>], radius: usize) -> f64 {
    let (w, h) = (spec.width, spec.height);
    let mut dist = vec![usize::MAX; w * h];
    let start = spec.start.0 * w + spec.start.1;
    dist[start] = 0;
    let mut queue = VecDeque::from([start]);
    while let Some(c) = queue.pop_front() {
        let (r, col) = (c / w, c % w);
        let next = [(r.wrapping_sub(1), col), (r + 1, col), (r, col.wrapping_sub(1)), (r, col + 1)];
        for (nr, nc) in next {
            if nr >= h || nc >= w {
                continue;
            }
            let n = nr * w + nc;
            if dist[n] == usize::MAX && matches!(spec.cell(nr, nc), CellKind::Empty | CellKind::Goal) {
                dist[n] = dist[c] + 1;
                queue.push_back(n);
            }
        }
    }
    let mut near = 0u64;
    let mut total = 0u64;
    for (r, row) in heatmap.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            total += v;
            if dist[r * w + c] <= radius {
                near += v;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        near as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeSummary {
    pub mode: Mode,
    pub seeds: usize,
    pub final_return: f64,
    pub mean_return: f64,
    pub violations: f64,
    pub near_start: f64,
}

pub fn summarize(cfg: &ExperimentConfig) -> Result<Vec<ModeSummary>> {
    let target = load_map(cfg, &cfg.env)?;
    let mut out = Vec::new();
    for &mode in &cfg.modes {
        let (mut fin, mut mean, mut viol, mut near) = (0.0, 0.0, 0.0, 0.0);
        for &seed in &cfg.seeds {
            let dir = run_dir(cfg, mode, seed);
            let rows = parse_metrics(&read_text(&dir.join("metrics.csv"))?)?;
            let heat = parse_heatmap(&read_text(&dir.join("heatmap.csv"))?)?;
            fin += final_return(&rows, cfg.agent.total_steps, FINAL_WINDOW);
            mean += if rows.is_empty() { 0.0 } else { rows.iter().map(|r| r.ret).sum::<f64>() / rows.len() as f64 };
            viol += rows.last().map_or(0, |r| r.cumulative) as f64;
            near += near_start_share(&target, &heat, 3);
        }
        let n = cfg.seeds.len() as f64;
        out.push(ModeSummary {
            mode,
            seeds: cfg.seeds.len(),
            final_return: fin / n,
            mean_return: mean / n,
            violations: viol / n,
            near_start: near / n,
        });
    }
    Ok(out)
}

pub fn report_text(summary: &[ModeSummary], prov: &[(String, String)]) -> String {
    let mut out = header(prov);
    out.push_str("mode,seeds,final_return,mean_return,cumulative_violations,near_start_share\n");
    for s in summary {
        let _ = writeln!(
            out,
            "{},{},{:.4},{:.4},{:.2},{:.4}",
            s.mode, s.seeds, s.final_return, s.mean_return, s.violations, s.near_start
        );
    }
    out
}

pub fn cmd_report(cfg: &ExperimentConfig) -> Result<(PathBuf, String)> {
    cfg.validate()?;
    let summary = summarize(cfg)?;
    for s in &summary {
        if s.mode != Mode::Vanilla && s.violations == 0.0 && s.final_return == 0.0 {
            warn!("{} never reached the goal or a violation", s.mode);
        }
    }
    let text = report_text(&summary, &provenance(cfg, "report", &[]));
    let path = report_path(cfg);
    write_file(&path, text.as_bytes())?;
    Ok((path, text))
}

/// gen, priors, train-encoder, run and report in sequence.
pub fn pipeline(cfg: &ExperimentConfig) -> Result<Vec<ModeSummary>> {
    cmd_gen(cfg, &all_tasks(cfg))?;
    if cfg.modes.iter().any(|m| m.gate().is_some()) {
        cmd_priors(cfg)?;
    }
    if cfg.modes.contains(&Mode::StateCheckedPriors) {
        cmd_train_encoder(cfg)?;
    }
    cmd_run(cfg)?;
    cmd_report(cfg)?;
    summarize(cfg)
}
