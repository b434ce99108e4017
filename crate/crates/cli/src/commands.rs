use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use crowdfm_core::config::RunConfig;
use crowdfm_core::eval::{
    episode_seed, episodes_csv, fingerprint, hlp_csv, hlp_suite, hlp_svg, report_csv, run_benchmark,
    suite_worlds, write_text, BaselineFactory, LatencyPlanner, LearnedPlanner, PlannerFactory, PlannerKit, Variant,
    VariantFactory,
};
use crowdfm_core::flow::{train_flow_until, FlowModel, FlowNetConfig};
use crowdfm_core::guidance::{audit, Obstacles};
use crowdfm_core::oracle::generate_records;
use crowdfm_core::render::frame_svg;
use crowdfm_core::scene::{read_dataset, sample_world, write_dataset, DatasetRecord, Difficulty};
use crowdfm_core::scorer::{evaluate_scorer, train_scorer as fit_scorer, Scorer};
use crowdfm_core::sim::{run_episode_observed, write_episode_csv, Frame};

use crate::{BenchArgs, Failure, GenDataArgs, RolloutArgs, TrainArgs, TrainScorerArgs};

pub const FLOW_FILE: &str = "flow.jsonl";
pub const SCORER_FILE: &str = "scorer.jsonl";

/// Salt separating the HLP scenes from every other seeded stream.
const HLP_SALT: u64 = 0x41c9_e11d;
const HOLDOUT_SALT: u64 = 0x401d_0a7;

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn dataset_path(p: PathBuf, file: &str) -> PathBuf {
    if p.is_dir() {
        p.join(file)
    } else {
        p
    }
}

fn default_log(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("log.csv")
}

fn ensure_parent(p: &Path) -> anyhow::Result<()> {
    if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).with_context(|| format!("cannot create {}", d.display()))?;
    }
    Ok(())
}

/// Architecture fields must match; sampling settings may differ.
fn same_architecture(ckpt: &FlowNetConfig, run: &FlowNetConfig) -> bool {
    let mut r = run.clone();
    r.euler_steps = ckpt.euler_steps;
    r.guidance_scale = ckpt.guidance_scale;
    r.num_candidates = ckpt.num_candidates;
    r == *ckpt
}

fn load_flow(path: &Path, cfg: &RunConfig) -> anyhow::Result<FlowModel> {
    let m = FlowModel::load(path).with_context(|| format!("loading flow checkpoint {}", path.display()))?;
    if m.cfg.order != cfg.trajectory.order {
        return Err(anyhow!(
            "flow checkpoint {} has order {}, config wants {}",
            path.display(),
            m.cfg.order,
            cfg.trajectory.order
        ));
    }
    if m.cfg.max_obstacles < cfg.scene.n_obs {
        return Err(anyhow!(
            "flow checkpoint {} holds {} obstacles, scene has {}",
            path.display(),
            m.cfg.max_obstacles,
            cfg.scene.n_obs
        ));
    }
    Ok(m)
}

fn load_scorer(path: &Path, cfg: &RunConfig) -> anyhow::Result<Scorer> {
    let s = Scorer::load(path).with_context(|| format!("loading scorer checkpoint {}", path.display()))?;
    if s.cfg.max_obstacles < cfg.scene.n_obs {
        return Err(anyhow!(
            "scorer checkpoint {} holds {} obstacles, scene has {}",
            path.display(),
            s.cfg.max_obstacles,
            cfg.scene.n_obs
        ));
    }
    Ok(s)
}

/// `step,...` CSV that survives resumption: rows at or past the resume step
/// are dropped before appending.
struct TrainLog {
    w: BufWriter<fs::File>,
}

impl TrainLog {
    fn open(path: &Path, header: &str, resume_from: u64) -> anyhow::Result<Self> {
        ensure_parent(path)?;
        let mut keep = Vec::new();
        if resume_from > 0 {
            if let Ok(f) = fs::File::open(path) {
                for line in BufReader::new(f).lines().skip(1) {
                    let line = line?;
                    let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
                    if step.is_some_and(|s| s < resume_from) {
                        keep.push(line);
                    }
                }
            }
        }
        let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("cannot write {}", path.display()))?);
        writeln!(w, "{header}")?;
        for l in keep {
            writeln!(w, "{l}")?;
        }
        Ok(Self { w })
    }

    fn row(&mut self, line: std::fmt::Arguments) -> std::io::Result<()> {
        self.w.write_fmt(line)?;
        self.w.write_all(b"\n")
    }

    fn finish(mut self) -> std::io::Result<()> {
        self.w.flush()
    }
}

pub fn gen_data(mut cfg: RunConfig, a: GenDataArgs) -> CmdResult {
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(c) = a.count {
        cfg.data.count = c;
    }
    let n_scorer = a.scorer_count.unwrap_or_else(|| cfg.scorer_count());
    let out = a.out.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
    let basis = cfg.basis()?;
    let gen = cfg.gen_config();
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;

    let t = Instant::now();
    let (flow, fstats) = generate_records(cfg.seed, cfg.data.count, false, &basis, &gen)?;
    let (scorer, sstats) = generate_records(cfg.seed, n_scorer, true, &basis, &gen)?;
    write_dataset(&flow, &out.join(FLOW_FILE))?;
    write_dataset(&scorer, &out.join(SCORER_FILE))?;
    write_text(&out.join("config.toml"), &cfg.to_toml()?)?;

    let refine = &cfg.refine;
    let audited = |rs: &[DatasetRecord]| {
        rs.iter()
            .filter(|r| {
                let obs = Obstacles::from_scenario(&r.scenario, refine.include_dynamic);
                audit(&r.target_coeffs, &basis, &obs, refine).feasible
            })
            .count()
    };
    let mut tags: BTreeMap<&str, usize> = BTreeMap::new();
    for r in flow.iter().chain(&scorer) {
        *tags.entry(r.tag.as_str()).or_default() += 1;
    }
    println!("wrote {} flow and {} scorer records to {}", flow.len(), scorer.len(), out.display());
    println!(
        "scenes: flow {} used / {} tried, scorer {} used / {} tried",
        fstats.scenes_used, fstats.scenes_tried, sstats.scenes_used, sstats.scenes_tried
    );
    println!(
        "clearance audit: flow {}/{}, scorer {}/{}",
        audited(&flow),
        flow.len(),
        audited(&scorer),
        scorer.len()
    );
    for (tag, n) in &tags {
        println!("  {tag:<28} {n}");
    }
    println!("generation took {:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}

pub fn train_flow(cfg: RunConfig, a: TrainArgs) -> CmdResult {
    let data = dataset_path(a.data.clone().unwrap_or_else(|| cfg.paths.data_dir.clone()), FLOW_FILE);
    let records = read_dataset(&data).with_context(|| format!("reading {}", data.display()))?;
    if records.is_empty() {
        return Err(Failure::Runtime(anyhow!("{} holds no records", data.display())));
    }
    let out = a.out.clone().unwrap_or_else(|| cfg.paths.flow_checkpoint.clone());
    let until = a.steps.unwrap_or(cfg.flow_train.steps);
    let mut model = if a.resume {
        let m = load_flow(&out, &cfg)?;
        if !same_architecture(&m.cfg, &cfg.flow) {
            return Err(usage(format!("checkpoint {} was trained with a different flow config", out.display())));
        }
        m
    } else {
        FlowModel::for_dataset(cfg.flow.clone(), &records, cfg.seed)?
    };
    ensure_parent(&out)?;
    let start = model.store.step();
    let log_path = a.log.clone().unwrap_or_else(|| default_log(&out));
    let mut log = TrainLog::open(&log_path, "step,loss", start)?;
    let save_every = a.save_every.max(1);
    let t = Instant::now();
    let losses = train_flow_until(&mut model, &records, &cfg.flow_train, until, |step, loss, m| {
        log.row(format_args!("{step},{loss}"))?;
        if (step + 1) % save_every == 0 {
            m.save(&out)?;
        }
        Ok(())
    })?;
    model.save(&out)?;
    log.finish()?;
    let tail = &losses[losses.len().saturating_sub(20)..];
    let mean = |xs: &[(u64, f64)]| xs.iter().map(|x| x.1).sum::<f64>() / xs.len().max(1) as f64;
    println!(
        "flow: steps {start}..{} on {} records in {:.1}s; mean loss of last {} steps {:.4}",
        model.store.step(),
        records.len(),
        t.elapsed().as_secs_f64(),
        tail.len(),
        mean(tail)
    );
    println!("checkpoint {}, log {}", out.display(), log_path.display());
    Ok(())
}

pub fn train_scorer(cfg: RunConfig, a: TrainScorerArgs) -> CmdResult {
    let ta = &a.train;
    let data = dataset_path(ta.data.clone().unwrap_or_else(|| cfg.paths.data_dir.clone()), SCORER_FILE);
    let records = read_dataset(&data).with_context(|| format!("reading {}", data.display()))?;
    let (train, held) = cfg.split_scorer(records);
    if train.is_empty() {
        return Err(Failure::Runtime(anyhow!("{} leaves no training records", data.display())));
    }
    let flow_path = a.flow.clone().unwrap_or_else(|| cfg.paths.flow_checkpoint.clone());
    let flow = load_flow(&flow_path, &cfg)?;
    let basis = cfg.basis()?;
    let gen = cfg.candidate_gen();
    let out = ta.out.clone().unwrap_or_else(|| cfg.paths.scorer_checkpoint.clone());
    let mut tcfg = cfg.scorer_train.clone();
    tcfg.steps = ta.steps.unwrap_or(tcfg.steps);
    let mut scorer = if ta.resume {
        let s = load_scorer(&out, &cfg)?;
        if s.cfg != cfg.scorer {
            return Err(usage(format!("checkpoint {} was trained with a different scorer config", out.display())));
        }
        s
    } else {
        Scorer::new(cfg.scorer.clone(), gen.k, cfg.seed)?
    };
    ensure_parent(&out)?;
    let start = scorer.store.step();
    let log_path = ta.log.clone().unwrap_or_else(|| default_log(&out));
    let mut log = TrainLog::open(&log_path, "step,loss,ce,accuracy,skipped", start)?;
    let save_every = ta.save_every.max(1);
    let t = Instant::now();
    fit_scorer(&mut scorer, &flow, &train, &gen, &basis, &tcfg, |s, m| {
        log.row(format_args!("{},{},{},{},{}", s.step, s.loss, s.ce, s.accuracy, s.skipped))?;
        if (s.step + 1) % save_every == 0 {
            m.save(&out)?;
        }
        Ok(())
    })?;
    scorer.save(&out)?;
    log.finish()?;
    println!(
        "scorer: steps {start}..{} on {} records in {:.1}s",
        scorer.store.step(),
        train.len(),
        t.elapsed().as_secs_f64()
    );
    if held.is_empty() {
        println!("no held-out records; set data.scorer_holdout above 0 to measure accuracy");
    } else {
        let ev = evaluate_scorer(&scorer, &flow, &held, &gen, &basis, cfg.seed ^ HOLDOUT_SALT)?;
        println!(
            "held-out top-1 accuracy {:.3} over {} scenes (chance {:.3})",
            ev.accuracy, ev.n, ev.chance
        );
    }
    println!("checkpoint {}, log {}", out.display(), log_path.display());
    Ok(())
}

pub fn rollout(cfg: RunConfig, a: RolloutArgs) -> CmdResult {
    let difficulty: Difficulty = a.difficulty.parse()?;
    let variant = match &a.variant {
        Some(v) => v.parse::<Variant>()?,
        None if a.scorer.is_some() => Variant::RefineScorer,
        None => {
            println!("no scorer checkpoint given; selecting candidates with the cost function");
            Variant::RefineCost
        }
    };
    if variant.needs_scorer() && a.scorer.is_none() {
        return Err(usage(format!("variant `{}` needs --scorer", variant.as_str())));
    }
    let world = sample_world(a.world_seed, difficulty)?;
    let basis = cfg.basis()?;
    let sim = cfg.sim_config();
    let seed = episode_seed(cfg.seed, a.world_seed as usize, 0, 0);

    let flow = if variant.is_baseline() {
        None
    } else {
        Some(load_flow(&a.flow.clone().unwrap_or_else(|| cfg.paths.flow_checkpoint.clone()), &cfg)?)
    };
    let scorer = match &a.scorer {
        Some(p) if variant.needs_scorer() => Some(load_scorer(p, &cfg)?),
        _ => None,
    };
    let kit = flow.as_ref().map(|f| PlannerKit {
        flow: f,
        scorer: scorer.as_ref(),
        gen: cfg.candidate_gen(),
        weights: cfg.eval.weights,
        basis: &basis,
    });
    let baseline = BaselineFactory {
        variant,
        basis: basis.clone(),
        speed: cfg.data.oracle.speed,
    };
    let mut planner: Box<dyn LatencyPlanner + '_> = match &kit {
        Some(k) => Box::new(LearnedPlanner::new(k, variant, seed)?),
        None => baseline.make(seed)?,
    };

    let frames_dir = a
        .render
        .clone()
        .map(|d| d.unwrap_or_else(|| cfg.paths.out_dir.join(format!("frames_{}", a.world_seed))));
    if let Some(d) = &frames_dir {
        fs::create_dir_all(d).with_context(|| format!("cannot create {}", d.display()))?;
    }
    let mut frames = 0usize;
    let mut frame_err: Option<std::io::Error> = None;
    let mut observer = |f: &Frame| {
        let Some(d) = &frames_dir else { return };
        if frame_err.is_none() {
            match fs::write(d.join(format!("frame_{:04}.svg", f.step)), frame_svg(&world, f)) {
                Ok(()) => frames += 1,
                Err(e) => frame_err = Some(e),
            }
        }
    };
    let res = run_episode_observed(&world, planner.as_mut(), &sim, &mut observer);
    if let Some(e) = frame_err {
        return Err(Failure::Runtime(anyhow!("writing frames: {e}")));
    }
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| cfg.paths.out_dir.join(format!("episode_{}.csv", a.world_seed)));
    ensure_parent(&out)?;
    write_episode_csv(&res, &out)?;

    println!(
        "{} world {} with {}: {} after {:.1}s, path {:.2} m, mean speed {:.2} m/s, {} replan steps",
        difficulty.as_str(),
        a.world_seed,
        variant.as_str(),
        res.outcome.as_str(),
        res.duration,
        res.path_length,
        res.mean_speed,
        res.step_log.len()
    );
    if let Some(msg) = &res.diagnostic {
        println!("planner error: {msg}");
    }
    if let Some(d) = &frames_dir {
        println!("wrote {frames} frames to {}", d.display());
    }
    println!("episode log {}", out.display());
    Ok(())
}

pub fn bench(cfg: RunConfig, a: BenchArgs) -> CmdResult {
    let n_worlds = a.worlds.unwrap_or(cfg.eval.suite_size);
    let runs = a.runs.unwrap_or(cfg.eval.runs);
    if runs == 0 {
        return Err(usage("--runs must be at least 1"));
    }
    let worlds = suite_worlds(&a.suite, n_worlds, cfg.seed)?;
    let variants: Vec<Variant> = match &a.variants {
        Some(list) => list
            .split(',')
            .map(|s| s.trim().parse::<Variant>())
            .collect::<Result<_, _>>()?,
        None => Variant::ALL
            .into_iter()
            .filter(|v| !v.needs_scorer() || a.scorer.is_some())
            .collect(),
    };
    if variants.is_empty() {
        return Err(usage("no planner variants selected"));
    }
    if let Some(v) = variants.iter().find(|v| v.needs_scorer() && a.scorer.is_none()) {
        return Err(usage(format!("variant `{}` needs --scorer", v.as_str())));
    }
    let basis = cfg.basis()?;
    let needs_flow = variants.iter().any(|v| !v.is_baseline());
    let flow = if needs_flow {
        Some(load_flow(&a.flow.clone().unwrap_or_else(|| cfg.paths.flow_checkpoint.clone()), &cfg)?)
    } else {
        None
    };
    let scorer = match &a.scorer {
        Some(p) if flow.is_some() => Some(load_scorer(p, &cfg)?),
        _ => None,
    };
    let kit = flow.as_ref().map(|f| PlannerKit {
        flow: f,
        scorer: scorer.as_ref(),
        gen: cfg.candidate_gen(),
        weights: cfg.eval.weights,
        basis: &basis,
    });

    let learned: Vec<VariantFactory> = variants
        .iter()
        .filter(|v| !v.is_baseline())
        .map(|&variant| VariantFactory {
            kit: kit.as_ref().expect("flow loaded for learned variants"),
            variant,
        })
        .collect();
    let baselines: Vec<BaselineFactory> = variants
        .iter()
        .filter(|v| v.is_baseline())
        .map(|&variant| BaselineFactory {
            variant,
            basis: basis.clone(),
            speed: cfg.data.oracle.speed,
        })
        .collect();
    let mut li = learned.iter();
    let mut bi = baselines.iter();
    let factories: Vec<(Variant, &dyn PlannerFactory)> = variants
        .iter()
        .map(|&v| {
            let f: &dyn PlannerFactory = if v.is_baseline() {
                bi.next().expect("one factory per baseline")
            } else {
                li.next().expect("one factory per learned variant")
            };
            (v, f)
        })
        .collect();

    let names: Vec<&str> = variants.iter().map(|v| v.as_str()).collect();
    let fp = fingerprint(&format!(
        "{}\nsuite={} worlds={n_worlds} runs={runs} variants={}",
        cfg.to_toml()?,
        a.suite,
        names.join(",")
    ));
    let sim = cfg.sim_config();
    let t = Instant::now();
    let mut out = run_benchmark(&worlds, &factories, runs, cfg.seed, &sim, &fp)?;
    let bench_secs = t.elapsed().as_secs_f64();

    if let (Some(k), Some(_)) = (&kit, &scorer) {
        let recs = match &a.data {
            Some(d) => {
                let path = dataset_path(d.clone(), SCORER_FILE);
                let all = read_dataset(&path).with_context(|| format!("reading {}", path.display()))?;
                let (_, mut held) = cfg.split_scorer(all);
                held.truncate(cfg.eval.hlp_scenes);
                held
            }
            None => generate_records(cfg.seed ^ HLP_SALT, cfg.eval.hlp_scenes, true, &basis, &cfg.gen_config())?.0,
        };
        out.report.hlp = hlp_suite(&recs, k, cfg.seed)?;
    }

    let dir = a.out.clone().unwrap_or_else(|| cfg.paths.out_dir.join("bench"));
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    write_text(&dir.join("report.csv"), &report_csv(&out.report))?;
    write_text(&dir.join("episodes.csv"), &episodes_csv(&out.report))?;
    write_text(&dir.join("hlp.csv"), &hlp_csv(&out.report.hlp))?;
    if !out.report.hlp.is_empty() {
        write_text(&dir.join("hlp.svg"), &hlp_svg(&out.report.hlp))?;
    }

    println!(
        "{} suite: {} worlds x {runs} runs, {} variants in {bench_secs:.1}s (fingerprint {fp})",
        a.suite,
        worlds.len(),
        variants.len()
    );
    println!("{:<14} {:<9} {:>5} {:>5} {:>6}", "variant", "world", "runs", "ok", "rate");
    for r in &out.report.rows {
        println!(
            "{:<14} {:<9} {:>5} {:>5} {:>6.3}",
            r.variant, r.world, r.runs, r.successes, r.rate
        );
    }
    for (name, stats) in &out.latencies {
        match stats {
            Some(s) => println!(
                "latency {name}: mean {:.1} ms, p95 {:.1} ms over {} plans",
                s.mean_ms, s.p95_ms, s.n
            ),
            None => println!("latency {name}: not measured"),
        }
    }
    let hlp = &out.report.hlp;
    if !hlp.is_empty() {
        let better = hlp.iter().filter(|p| p.hlp_scorer <= p.hlp_cost).count();
        let mean = |f: fn(&crowdfm_core::eval::HlpPair) -> f64| hlp.iter().map(f).sum::<f64>() / hlp.len() as f64;
        println!(
            "HLP over {} scenes: scorer {:.3} m, cost {:.3} m; scorer at least as close in {better}",
            hlp.len(),
            mean(|p| p.hlp_scorer),
            mean(|p| p.hlp_cost)
        );
    }
    println!("reports in {}", dir.display());
    Ok(())
}
