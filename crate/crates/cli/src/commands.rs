use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Duration;

use anyhow::Context;
use mesa_core::eval::passkey::{gen_corpus, write_jsonl};
use mesa_core::eval::{bench_run, score_retrieval, write_bench_csv, BenchOptions, CellCountReport, CellParams, Method};
use mesa_core::masks::approx_alibi_bias;
use mesa_core::model::{ModelConfig, ModelWeights, PeKind, WhitespaceTokenizer};
use mesa_core::pe::{format_number, position_matrix};
use mesa_core::theory::{threshold_scan, Construction, TheoryConfig, MAX_POSITION};
use mesa_core::splitter::dynamic_split_with;
use mesa_core::{chunk_spans, generate, ChunkPlan, MesaConfig, Scheme, SplitParams, WeaveParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::alloc::PeakProbe;
use crate::config::{pick, FileConfig};
use crate::{Cli, Command, ExecMode, Format, ModelArgs, SplitArgs, UsageError, WeaveArgs};

type Result<T> = anyhow::Result<T>;

struct Ctx {
    file: FileConfig,
    out: PathBuf,
    seed: u64,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn create(&self, name: &str) -> Result<(PathBuf, BufWriter<File>)> {
        let path = self.path(name);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok((path, BufWriter::new(file)))
    }
}

fn usage(kind: &'static str, message: impl Into<String>) -> anyhow::Error {
    UsageError::new(kind, message).into()
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| usage("usage", format!("missing required value for --{flag}")))
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let out = pick(cli.out.clone(), file.out.clone(), PathBuf::from("out"));
    let seed = pick(cli.seed, file.seed, 0);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let ctx = Ctx { file, out, seed };
    match &cli.command {
        Command::GenPositions(a) => gen_positions(&ctx, a),
        Command::Plan(a) => plan(&ctx, a),
        Command::VerifyTheory(a) => verify_theory(&ctx, a),
        Command::Run(a) => run(&ctx, a),
        Command::Passkey(a) => passkey(&ctx, a),
        Command::Bench(a) => bench(&ctx, a),
    }
}

fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    emit(&serde_json::to_string_pretty(value)?)
}

fn weave_params(args: &WeaveArgs, file: &FileConfig) -> Result<WeaveParams> {
    let scheme: Scheme = pick(args.scheme.clone(), file.scheme.clone(), "stair".to_string()).parse()?;
    let checks = [
        (args.e.or(file.e).is_some(), "E", Scheme::StairPE),
        (args.k_inv.or(file.k_inv).is_some(), "k_inv", Scheme::LeakyReRoPE),
        (args.w.or(file.w).is_some(), "W", Scheme::SelfExtend),
        (args.g.or(file.g).is_some(), "G", Scheme::SelfExtend),
    ];
    for (given, name, owner) in checks {
        if given && scheme != owner {
            return Err(usage(
                "invalid_combination",
                format!("{name} only applies to the {owner} scheme, not {scheme}"),
            ));
        }
    }
    let d = WeaveParams::default();
    let params = WeaveParams {
        scheme,
        n: pick(args.big_n, file.big_n, d.n),
        e: pick(args.e, file.e, d.e),
        k_inv: pick(args.k_inv, file.k_inv, d.k_inv),
        w_group: pick(args.w, file.w, d.w_group),
        g_group: pick(args.g, file.g, d.g_group),
        theta_base: pick(args.theta_base, file.theta_base, d.theta_base),
        num_heads: d.num_heads,
    };
    params.validate()?;
    Ok(params)
}

fn split_params(args: &SplitArgs, file: &FileConfig) -> (SplitParams, usize) {
    let d = SplitParams::default();
    let split = SplitParams {
        first: pick(args.f, file.f, d.first),
        last_min: pick(args.l, file.l, d.last_min),
        m_max: pick(args.m_max, file.m_max, d.m_max),
    };
    (split, pick(args.t, file.t, MesaConfig::default().t_train))
}

fn pe_kind(args: &ModelArgs, file: &FileConfig, theta_base: f64) -> Result<PeKind> {
    let name = pick(args.pe.clone(), file.pe.clone(), "rope".to_string());
    Ok(match name.to_ascii_lowercase().as_str() {
        "nope" => PeKind::NoPe,
        "rope" => PeKind::Rope { theta_base },
        "alibi" => PeKind::Alibi,
        "linear" => PeKind::Linear,
        other => return Err(usage("usage", format!("unknown positional encoding `{other}`"))),
    })
}

fn model_config(args: &ModelArgs, file: &FileConfig) -> ModelConfig {
    let d = ModelConfig::default();
    ModelConfig {
        d: pick(args.d, file.d, d.d),
        num_heads: pick(args.h, file.h, d.num_heads),
        head_dim: pick(args.head_dim, file.head_dim, d.head_dim),
        num_layers: pick(args.layers, file.layers, d.num_layers),
        vocab: pick(args.vocab, file.vocab, d.vocab),
        ..d
    }
}

fn load_model(args: &ModelArgs, ctx: &Ctx) -> Result<(ModelWeights, ModelSource)> {
    match args.weights.clone().or(ctx.file.weights.clone()) {
        Some(path) => {
            let weights = ModelWeights::load(&path).with_context(|| format!("loading {}", path.display()))?;
            Ok((weights, ModelSource::File(path)))
        }
        None => {
            let cfg = model_config(args, &ctx.file);
            Ok((ModelWeights::random(&cfg, ctx.seed)?, ModelSource::Random(cfg)))
        }
    }
}

#[derive(Serialize)]
#[serde(rename_all = "lowercase")]
enum ModelSource {
    Random(ModelConfig),
    File(PathBuf),
}

fn mesa_config(weave: &WeaveArgs, split: &SplitArgs, model: &ModelArgs, exec: Option<ExecMode>, ctx: &Ctx) -> Result<MesaConfig> {
    let weave = weave_params(weave, &ctx.file)?;
    let (split, t_train) = split_params(split, &ctx.file);
    let cfg = MesaConfig {
        weave,
        split,
        t_train,
        pe: pe_kind(model, &ctx.file, weave.theta_base)?,
        exec: exec.or(ctx.file.exec).unwrap_or(ExecMode::Parallel).into(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn gen_positions(ctx: &Ctx, args: &crate::GenPositionsArgs) -> Result<()> {
    let params = weave_params(&args.weave, &ctx.file)?;
    let n = required(args.n.or(ctx.file.n), "n")?;
    let format = pick(args.format, ctx.file.format, Format::Csv);
    let ext = match format {
        Format::Csv => "csv",
        Format::Json => "json",
    };
    let (path, mut w) = ctx.create(&format!("positions_{}_n{n}.{ext}", params.scheme))?;
    if params.scheme == Scheme::ApproxALiBi {
        // the bias itself, since the woven distance is plain `t - i`
        let rows = approx_alibi_bias(n)?;
        match format {
            Format::Csv => {
                for row in &rows {
                    let mut cells: Vec<String> = row.iter().map(|v| format_number(*v)).collect();
                    cells.resize(n, String::new());
                    writeln!(w, "{}", cells.join(","))?;
                }
            }
            Format::Json => {
                let doc = serde_json::json!({ "n": n, "scheme": params.scheme, "kind": "bias", "rows": rows });
                serde_json::to_writer_pretty(&mut w, &doc)?;
                writeln!(w)?;
            }
        }
    } else {
        let matrix = position_matrix(&params, n)?;
        match format {
            Format::Csv => matrix.write_csv(&mut w)?,
            Format::Json => writeln!(w, "{}", matrix.to_json()?)?,
        }
    }
    w.flush()?;
    print_json(&serde_json::json!({ "scheme": params.scheme, "n": n, "wrote": path }))
}

#[derive(Serialize)]
struct PlanDoc<'a> {
    #[serde(flatten)]
    plan: &'a ChunkPlan,
    spans: Vec<(usize, usize)>,
}

fn plan(ctx: &Ctx, args: &crate::PlanArgs) -> Result<()> {
    let input = required(args.i.or(ctx.file.i), "I")?;
    let (split, t_train) = split_params(&args.split, &ctx.file);
    let plan = dynamic_split_with(input, t_train, &split)?;
    let doc = serde_json::to_string_pretty(&PlanDoc {
        plan: &plan,
        spans: chunk_spans(&plan),
    })?;
    fs::write(ctx.path("plan.json"), format!("{doc}\n"))?;
    emit(&doc)
}

fn verify_theory(ctx: &Ctx, args: &crate::VerifyTheoryArgs) -> Result<()> {
    let f = &ctx.file;
    let name = pick(args.theorem.clone(), f.theorem.clone(), "1".to_string());
    let construction: Construction = name.parse()?;
    if args.e.or(f.e).is_some() && construction != Construction::Corollary {
        return Err(usage(
            "invalid_combination",
            format!("E only applies to the stair construction (c), not {}", construction.name()),
        ));
    }
    let d = TheoryConfig::default();
    let mut cfg = TheoryConfig::new(pick(args.m, f.m, d.m), pick(args.h, f.h_threshold, d.threshold))
        .with_weave(pick(args.big_n, f.big_n, d.n), pick(args.e, f.e, d.e));
    cfg.tau = pick(args.tau, f.tau, d.tau);
    cfg.seed = ctx.seed;
    let default_t_max = match construction {
        Construction::Theorem3 | Construction::Corollary => cfg.scan_limit(),
        _ => MAX_POSITION,
    };
    cfg = cfg.with_t_max(pick(args.t_max, f.t_max, default_t_max));
    let weights = construction.build(&cfg)?;
    let report = threshold_scan(&weights, construction, &cfg)?;
    let (path, w) = ctx.create(&format!(
        "{}_M{}_H{}.csv",
        construction.name(),
        cfg.m,
        format_number(cfg.threshold)
    ))?;
    report.write_csv(w)?;
    print_json(&serde_json::json!({
        "construction": construction.name(),
        "M": cfg.m,
        "H": cfg.threshold,
        "N": cfg.n,
        "E": cfg.e,
        "t_max": cfg.t_max,
        "crossing": report.crossing,
        "max_error": report.max_error(),
        "wrote": path,
    }))
}

fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(1..vocab)).collect()
}

#[derive(Serialize)]
struct TimingsDoc {
    first_ms: f64,
    middle_ms: f64,
    last_ms: f64,
    decode_ms: f64,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn run(ctx: &Ctx, args: &crate::RunArgs) -> Result<()> {
    let cfg = mesa_config(&args.weave, &args.split, &args.model, args.exec, ctx)?;
    let (weights, source) = load_model(&args.model, ctx)?;
    let max_new = pick(args.max_new, ctx.file.max_new, 16);
    let mut tokenizer = None;
    let tokens = match args.input.clone().or(ctx.file.input.clone()) {
        Some(path) if args.i.is_none() => {
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let mut tok = WhitespaceTokenizer::new(weights.vocab);
            let ids = tok.encode(&text);
            tokenizer = Some(tok);
            ids
        }
        _ => {
            let n = required(args.i.or(ctx.file.i), "I")?;
            random_tokens(n, weights.vocab, ctx.seed)
        }
    };
    let generation = generate(&tokens, &weights, &cfg, max_new, None)?;
    let doc = serde_json::json!({
        "config": cfg,
        "seed": ctx.seed,
        "model": source,
        "report": generation.report,
        "text": tokenizer.map(|t| t.decode(&generation.report.generated)),
    });
    fs::write(ctx.path("run.json"), format!("{}\n", serde_json::to_string_pretty(&doc)?))?;
    let t = generation.timings;
    let timings = TimingsDoc {
        first_ms: ms(t.first),
        middle_ms: ms(t.middle),
        last_ms: ms(t.last),
        decode_ms: ms(t.decode),
    };
    fs::write(ctx.path("timings.json"), format!("{}\n", serde_json::to_string_pretty(&timings)?))?;
    print_json(&serde_json::json!({
        "mode": generation.report.mode,
        "plan": generation.report.plan,
        "generated": generation.report.generated,
        "prefill_cells": generation.report.prefill_cells,
        "timings": timings,
    }))
}

#[derive(Serialize)]
struct ScoreRow<'a> {
    target_length: usize,
    key: &'a str,
    key_position: usize,
    generated: String,
    retrieved: bool,
}

fn passkey(ctx: &Ctx, args: &crate::PasskeyArgs) -> Result<()> {
    let f = &ctx.file;
    let targets = pick(args.targets.clone(), f.targets.clone(), vec![1024, 2048, 4096]);
    let samples = pick(args.samples, f.samples, 5);
    let digits = pick(args.digits, f.digits, 5);
    let corpus = gen_corpus(&targets, samples, digits, ctx.seed)?;
    let (path, mut w) = ctx.create("passkey.jsonl")?;
    write_jsonl(&corpus, &mut w)?;
    w.flush()?;
    let mut summary = serde_json::json!({ "samples": corpus.len(), "wrote": [path] });
    if args.evaluate {
        let cfg = mesa_config(&args.weave, &args.split, &args.model, args.exec, ctx)?;
        let (weights, _) = load_model(&args.model, ctx)?;
        let max_new = pick(args.max_new, f.max_new, 8);
        let mut rows = Vec::with_capacity(corpus.len());
        for sample in &corpus {
            let mut tok = WhitespaceTokenizer::new(weights.vocab);
            let ids = tok.encode(&sample.text);
            let gen = generate(&ids, &weights, &cfg, max_new, None)?;
            let generated = tok.decode(&gen.report.generated);
            rows.push(ScoreRow {
                target_length: sample.target_length,
                key: &sample.key,
                key_position: sample.key_position,
                retrieved: score_retrieval(&generated, &sample.key),
                generated,
            });
        }
        let (scores, w) = ctx.create("passkey_scores.csv")?;
        let mut csv = csv::Writer::from_writer(w);
        for row in &rows {
            csv.serialize(row)?;
        }
        csv.flush()?;
        let hits = rows.iter().filter(|r| r.retrieved).count();
        summary["retrieved"] = hits.into();
        summary["wrote"].as_array_mut().expect("array").push(serde_json::to_value(scores)?);
    }
    print_json(&summary)
}

fn bench(ctx: &Ctx, args: &crate::BenchArgs) -> Result<()> {
    let f = &ctx.file;
    let names = pick(args.methods.clone(), f.methods.clone(), Method::ALL.iter().map(|m| m.name().to_string()).collect());
    let methods = names.iter().map(|s| s.parse::<Method>()).collect::<mesa_core::Result<Vec<_>>>()?;
    let lengths = pick(args.lengths.clone(), f.lengths.clone(), vec![1024, 2048, 4096]);
    let cfg = mesa_config(&args.weave, &args.split, &args.model, args.exec, ctx)?;
    let params = CellParams::new(cfg.t_train, cfg.split);
    let cells = CellCountReport::build(&methods, &lengths, &params)?;
    let (cells_path, w) = ctx.create("cells.csv")?;
    cells.write_csv(w)?;
    let mut wrote = vec![cells_path];

    if !args.cells_only {
        let opts = BenchOptions {
            model: model_config(&args.model, f),
            seed: ctx.seed,
            mesa: cfg,
            decode_tokens: pick(args.decode_tokens, f.decode_tokens, 4),
            repeats: pick(args.repeats, f.repeats, 1),
            exec: cfg.exec,
        };
        let mut rows = Vec::new();
        for &method in &methods {
            // two full passes by construction; counted above, not timed
            if method == Method::ReropeDual {
                continue;
            }
            rows.extend(bench_run(method, &lengths, &opts, Some(&PeakProbe))?);
        }
        let (timings_path, w) = ctx.create("timings.csv")?;
        write_bench_csv(&rows, w)?;
        wrote.push(timings_path);
    }
    print_json(&serde_json::json!({ "methods": names, "lengths": lengths, "wrote": wrote }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mesa_core::pe::DEFAULT_THETA_BASE;

    #[test]
    fn e_without_stair_is_rejected() {
        let args = WeaveArgs {
            scheme: Some("rerope".into()),
            e: Some(3),
            ..Default::default()
        };
        let err = weave_params(&args, &FileConfig::default()).unwrap_err();
        assert_eq!(err.downcast_ref::<UsageError>().unwrap().kind, "invalid_combination");
    }

    #[test]
    fn flags_override_file_values() {
        let file = FileConfig {
            big_n: Some(7),
            e: Some(3),
            ..Default::default()
        };
        let args = WeaveArgs {
            big_n: Some(9),
            ..Default::default()
        };
        let p = weave_params(&args, &file).unwrap();
        assert_eq!((p.n, p.e), (9, 3));
        assert_eq!(p.theta_base, DEFAULT_THETA_BASE);
    }

    #[test]
    fn unknown_pe_is_a_usage_error() {
        let args = ModelArgs {
            pe: Some("xpos".into()),
            ..Default::default()
        };
        assert!(pe_kind(&args, &FileConfig::default(), 1e4).is_err());
    }

    #[test]
    fn random_tokens_skip_bos() {
        let t = random_tokens(500, 4, 1);
        assert!(t.iter().all(|&x| (1..4).contains(&x)));
        assert_eq!(t, random_tokens(500, 4, 1));
    }
}
