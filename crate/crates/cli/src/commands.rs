use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use log::{info, warn};
use serde_json::json;
use tokenfuse::analysis::{
    average_weights, heatmap_csv, heatmap_svg, record_weights, render_token_case, sample_means, token_case,
};
use tokenfuse::checkpoint::Checkpoint;
use tokenfuse::data::{synth_corpus, write_atomic, Domain, DomainCorpus, TrainingExample};
use tokenfuse::fuser::{FusedModel, Routing};
use tokenfuse::infer::orchestrate_model;
use tokenfuse::lm::{perplexity, PretrainRun, Specialist};
use tokenfuse::train::{train_stage1, train_stage2, StepRecord};
use tokenfuse::Error;

use crate::config::RunConfig;

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path).map_err(|e| io(path, e))
}

fn require(path: &Path, hint: &str) -> Result<(), Error> {
    if path.exists() {
        Ok(())
    } else {
        Err(io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("missing; run `{hint}` first")),
        ))
    }
}

/// JSON-lines metrics sink; every record carries the config hash.
struct Metrics {
    out: BufWriter<File>,
    hash: String,
    path: std::path::PathBuf,
}

impl Metrics {
    fn open(path: &Path, hash: &str, append: bool) -> Result<Self, Error> {
        create_dir(path.parent().expect("metrics file has a parent"))?;
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| io(path, e))?;
        Ok(Metrics {
            out: BufWriter::new(file),
            hash: hash.into(),
            path: path.into(),
        })
    }

    fn write(&mut self, mut record: serde_json::Value) -> Result<(), Error> {
        record["config_hash"] = json!(self.hash);
        serde_json::to_writer(&mut self.out, &record).expect("metrics serialize");
        self.out.write_all(b"\n").map_err(|e| io(&self.path, e))
    }

    fn flush(&mut self) -> Result<(), Error> {
        self.out.flush().map_err(|e| io(&self.path, e))
    }
}

fn load_corpora(cfg: &RunConfig) -> Result<Vec<DomainCorpus>, Error> {
    let dir = cfg.data_dir();
    Domain::ALL
        .iter()
        .map(|&d| {
            require(&dir.join(format!("{d}.manifest.json")), "tokenfuse prepare-data")?;
            DomainCorpus::read(&dir, d)
        })
        .collect()
}

fn eval_split(cfg: &RunConfig, corpus: &DomainCorpus) -> Vec<TrainingExample> {
    let n = match cfg.eval_examples {
        0 => corpus.held_out.len(),
        n => n.min(corpus.held_out.len()),
    };
    corpus.held_out[..n].to_vec()
}

fn save(ck: &mut Checkpoint, cfg: &RunConfig, path: &Path) -> Result<(), Error> {
    ck.meta["config_hash"] = json!(cfg.hash());
    create_dir(path.parent().expect("checkpoint path has a parent"))?;
    ck.save(path)
}

fn load_fused(cfg: &RunConfig) -> Result<FusedModel, Error> {
    let path = cfg.fused_path();
    require(&path, "tokenfuse train-fused")?;
    FusedModel::from_checkpoint(&Checkpoint::load(&path)?)
}

/// Text artifacts get a leading comment line naming the config hash.
fn write_tagged(path: &Path, cfg: &RunConfig, body: &str) -> Result<(), Error> {
    let tag = match path.extension().and_then(|e| e.to_str()) {
        Some("svg") => format!("<!-- config_hash {} -->\n", cfg.hash()),
        _ => format!("# config_hash {}\n", cfg.hash()),
    };
    write_atomic(path, format!("{tag}{body}").as_bytes())
}

pub fn prepare_data(cfg: &RunConfig, force: bool) -> anyhow::Result<()> {
    let dir = cfg.data_dir();
    if !force {
        for d in Domain::ALL {
            let path = dir.join(format!("{d}.jsonl"));
            if path.exists() {
                return Err(io(
                    &path,
                    std::io::Error::new(std::io::ErrorKind::AlreadyExists, "exists; pass --force to overwrite"),
                )
                .into());
            }
        }
    }
    for d in Domain::ALL {
        let corpus = synth_corpus(d, cfg.train_examples, cfg.held_out_examples, cfg.seed)?;
        corpus.write(&dir, cfg.seed, &cfg.hash())?;
        info!("{d}: {} train, {} held-out -> {}", corpus.train.len(), corpus.held_out.len(), dir.display());
    }
    Ok(())
}

pub fn train_specialist(cfg: &RunConfig, domain: Domain, resume: bool, stop_after: Option<usize>) -> anyhow::Result<()> {
    let corpora = load_corpora(cfg)?;
    let corpus = &corpora[domain.index()];
    let path = cfg.specialist_path(domain);
    let mut run = if resume {
        require(&path, "tokenfuse train-specialist")?;
        let ck = Checkpoint::load(&path)?;
        if ck.meta["config_hash"] != json!(cfg.hash()) {
            warn!("checkpoint was written under config {}, resuming under {}", ck.meta["config_hash"], cfg.hash());
        }
        let run = PretrainRun::resume(&ck, corpus)?;
        info!("resuming {domain} specialist at step {}", run.step());
        run
    } else {
        PretrainRun::new(corpus, &cfg.lm(), &cfg.pretrain(), cfg.seed.wrapping_add(100 + domain.index() as u64))?
    };
    let mut metrics = Metrics::open(&cfg.metrics_dir().join(format!("pretrain-{domain}.jsonl")), &cfg.hash(), resume)?;
    let until = stop_after.unwrap_or(usize::MAX).min(cfg.pretrain_steps);
    while run.step() < until {
        let next = (run.step() / cfg.checkpoint_every + 1) * cfg.checkpoint_every;
        let mut failed = None;
        run.run_until(next.min(until), |step, loss| {
            if let Err(e) = metrics.write(json!({"stage": "pretrain", "domain": domain, "step": step, "loss": loss})) {
                failed.get_or_insert(e);
            }
            if step % 50 == 0 {
                info!("{domain} step {step}: loss {loss:.4}");
            }
        })?;
        if let Some(e) = failed {
            return Err(e.into());
        }
        save(&mut run.checkpoint(), cfg, &path)?;
        metrics.flush()?;
    }
    if !run.is_done() {
        info!("stopped at step {} of {}; checkpoint at {}", run.step(), cfg.pretrain_steps, path.display());
        return Ok(());
    }
    let spec = run.finish();
    let mut ce = serde_json::Map::new();
    for c in &corpora {
        let v = perplexity(&spec, &eval_split(cfg, c))?.ln();
        info!("{domain} specialist held-out CE on {}: {v:.4}", c.domain);
        ce.insert(c.domain.to_string(), json!(v));
    }
    metrics.write(json!({"stage": "pretrain", "domain": domain, "held_out_ce": ce}))?;
    metrics.flush()?;
    info!("{domain} specialist -> {}", path.display());
    Ok(())
}

pub fn train_fused(cfg: &RunConfig) -> anyhow::Result<()> {
    let corpora = load_corpora(cfg)?;
    let paths: Vec<_> = Domain::ALL.iter().map(|&d| cfg.specialist_path(d)).collect();
    for p in &paths {
        require(p, "tokenfuse train-specialist")?;
    }
    let specs = paths
        .iter()
        .map(|p| Specialist::from_checkpoint(&Checkpoint::load(p)?))
        .collect::<Result<Vec<_>, Error>>()?;
    let tc = cfg.train();
    let mut model = FusedModel::with_new_gate(specs, cfg.seed)?;
    let checksums = |m: &FusedModel| m.specialists.iter().map(|s| s.params.checksum()).collect::<Vec<_>>();
    let mut metrics = Metrics::open(&cfg.metrics_dir().join("fused.jsonl"), &cfg.hash(), false)?;
    let mut sink_err = None;
    let mut observe = |r: &StepRecord, _: &FusedModel| -> tokenfuse::Result<()> {
        if let Err(e) = metrics.write(serde_json::to_value(r).expect("records serialize")) {
            sink_err.get_or_insert(e);
        }
        if r.step % 50 == 0 {
            info!("stage {} step {}: loss {:.4} lr {:.2e}", r.stage, r.step, r.loss, r.lr);
        }
        Ok(())
    };

    let before = checksums(&model);
    info!("specialist checksums before stage 1: {}", before.join(" "));
    train_stage1(&mut model, &corpora, &tc, &mut observe)?;
    let after = checksums(&model);
    info!("specialist checksums after stage 1: {}", after.join(" "));
    if before != after {
        anyhow::bail!("specialists changed during stage 1");
    }
    info!("stage boundary at step {}: unfreezing specialists", tc.n1_steps);
    train_stage2(&mut model, &corpora, &tc, &mut observe)?;
    if let Some(e) = sink_err {
        return Err(e.into());
    }
    metrics.flush()?;
    save(&mut model.to_checkpoint(), cfg, &cfg.fused_path())?;
    info!("fused model -> {}", cfg.fused_path().display());
    Ok(())
}

pub fn generate(cfg: &RunConfig, prompt: &str, domain: Option<Domain>, trace: bool) -> anyhow::Result<()> {
    let model = load_fused(cfg)?;
    let routing = match domain {
        Some(d) => Routing::Forced(
            model
                .specialists
                .iter()
                .position(|s| s.domain == d)
                .ok_or_else(|| Error::Config(format!("no {d} specialist in the fused model")))?,
        ),
        None => Routing::Gate,
    };
    let gen_cfg = cfg.generation(routing);
    let stdout = std::io::stdout();
    let mut step = 0;
    let out = orchestrate_model(&model, prompt, &gen_cfg, |t| {
        let mut lock = stdout.lock();
        let res = if trace {
            let rec = json!({
                "step": step,
                "token": t.token,
                "text": tokenfuse::data::Tokenizer.display(t.token),
                "weights": t.weights,
                "top_specialist": t.top_specialist,
                "config_hash": cfg.hash(),
            });
            writeln!(lock, "{rec}")
        } else if t.token == gen_cfg.stop_token {
            Ok(())
        } else {
            write!(lock, "{}", tokenfuse::data::Tokenizer.decode(&[t.token]))
        };
        step += 1;
        res.and_then(|_| lock.flush()).map_err(|e| io(Path::new("<stdout>"), e))
    })
    .context("generation failed")?;
    if !trace {
        println!();
    }
    info!(
        "{} tokens, {:.1} tokens/s with {} specialists{}",
        out.tokens.len(),
        out.tokens_per_sec(),
        model.num_specialists(),
        if out.stopped { "" } else { " (hit max_new_tokens)" }
    );
    Ok(())
}

pub fn analyze(cfg: &RunConfig) -> anyhow::Result<()> {
    let corpora = load_corpora(cfg)?;
    let model = load_fused(cfg)?;
    let specialists: Vec<Domain> = model.specialists.iter().map(|s| s.domain).collect();
    let examples: Vec<TrainingExample> = corpora.iter().flat_map(|c| eval_split(cfg, c)).collect();
    let records = record_weights(&model, &examples)?;
    let wm = average_weights(&records, &specialists, &Domain::ALL)?;
    let dir = cfg.analysis_dir();
    create_dir(&dir)?;
    write_tagged(&dir.join("weights.csv"), cfg, &wm.to_csv())?;
    let means = sample_means(&records);
    write_tagged(&dir.join("heatmap.csv"), cfg, &heatmap_csv(&means, &specialists))?;
    write_tagged(&dir.join("heatmap.svg"), cfg, &heatmap_svg(&means, &specialists))?;
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&serde_json::to_string(r).expect("records serialize"));
        lines.push('\n');
    }
    write_tagged(&dir.join("records.jsonl"), cfg, &lines)?;
    if let Some(ex) = corpora[Domain::Math.index()].held_out.first() {
        let case = token_case(&model, ex)?;
        let body = format!("prompt: {}\n{}", ex.prompt, render_token_case(&case, &specialists));
        write_tagged(&dir.join("token_case.txt"), cfg, &body)?;
    }
    print!("{}", wm.to_csv());
    for (d, dominant) in wm.diagonal_dominance() {
        let verdict = match dominant {
            Some(true) => "own specialist holds the largest weight",
            Some(false) => "own specialist is not the largest",
            None => "no specialist for this domain",
        };
        println!("{d}: {verdict}");
    }
    info!("analysis written to {}", dir.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> anyhow::Result<()> {
    let corpora = load_corpora(cfg)?;
    let model = load_fused(cfg)?;
    let splits: Vec<Vec<TrainingExample>> = corpora.iter().map(|c| eval_split(cfg, c)).collect();
    let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
    for s in &model.specialists {
        let ppl = splits.iter().map(|h| perplexity(s, h)).collect::<Result<Vec<_>, _>>()?;
        rows.push((s.domain.to_string(), ppl));
    }
    let fused = splits.iter().map(|h| perplexity(&model, h)).collect::<Result<Vec<_>, _>>()?;
    rows.push(("fused".into(), fused));

    let mut csv = String::from("model");
    for d in Domain::ALL {
        csv.push_str(&format!(",{d}"));
    }
    csv.push('\n');
    println!("{:<8}{:>10}{:>10}{:>10}", "ppl", "text", "code", "math");
    for (name, ppl) in &rows {
        csv.push_str(name);
        ppl.iter().for_each(|p| csv.push_str(&format!(",{p}")));
        csv.push('\n');
        println!("{name:<8}{:>10.4}{:>10.4}{:>10.4}", ppl[0], ppl[1], ppl[2]);
    }
    create_dir(&cfg.analysis_dir())?;
    write_tagged(&cfg.analysis_dir().join("eval.csv"), cfg, &csv)?;
    Ok(())
}
