use std::fs;
use std::io::Write as _;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context as _;
use log::info;

use super::{invalid, BackendKind, CliError, DecoderKind, Settings};
use crate::distill::{toy_recipe, ToyRecipe};
use crate::fixtures::{five_token_table, sweep_prompts, sweep_table, synthetic_labels};
use crate::mechanism::{derive_seed, verify_dp_bound, Allocation, IdfScorer, ImportanceScorer, PerturbationConfig};
use crate::metrics::{epsilon_sweep, SweepSettings};
use crate::pipeline::io::{read_jsonl, read_token_lines, write_jsonl, InputRecord, Manifest, OutputRecord};
use crate::pipeline::{
    build_decoder_dataset, build_encoder_dataset, perturb_prompts, run_fedcot, DecoderExample, DistillExample,
    IclDecoder, IdentityDecoder, RationaleDecoder, RepairDecoder,
};
use crate::protocol::{
    serve, FrameLog, GeneratorBackend, HttpGenerator, HttpGeneratorConfig, LoopbackTransport, MockGenerator,
    PromptRequest, RationaleClient, ServerHandle, TcpTransport, TextCompletion,
};
use crate::vocab::{join_tokens, load_embeddings, EmbeddingTable, Token};

type CmdResult = Result<(), CliError>;

const DEFAULT_SWEEP: [f64; 5] = [0.5, 1.0, 2.0, 4.0, 8.0];
const DEFAULT_SERVE_ADDR: &str = "127.0.0.1:7878";
const DEFAULT_DEADLINE_MS: u64 = 30_000;
const DEFAULT_API_KEY_ENV: &str = "FEDCOT_API_KEY";
const SWEEP_PROMPTS: usize = 50;

pub(super) fn dispatch(name: &str, s: Settings) -> CmdResult {
    match name {
        "perturb" => perturb(s),
        "verify-dp" => verify_dp(s),
        "serve" => serve_cmd(s),
        "build-datasets" => build_datasets(s),
        "run" => run(s),
        "sweep" => sweep(s),
        "distill-toy" => distill_toy(s),
        "fixture" => fixture(s),
        other => Err(invalid(format!("unknown command `{other}`"))),
    }
}

fn required<T: Clone>(value: &Option<T>, flag: &str) -> Result<T, CliError> {
    value.clone().ok_or_else(|| invalid(format!("{flag} is required")))
}

fn out_dir(s: &Settings) -> Result<PathBuf, CliError> {
    let dir = required(&s.out, "--out")?;
    fs::create_dir_all(&dir).map_err(|e| invalid(format!("--out: cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn check_epsilon(eps: f64, flag: &str) -> Result<f64, CliError> {
    if eps.is_finite() && eps > 0.0 {
        Ok(eps)
    } else {
        Err(invalid(format!("{flag} must be a positive finite number, got {eps}")))
    }
}

fn load_table(s: &Settings) -> Result<EmbeddingTable, CliError> {
    let path = required(&s.embeddings, "--embeddings")?;
    load_embeddings(&path, None)
        .with_context(|| format!("loading {}", path.display()))
        .map_err(Into::into)
}

fn load_prompts(path: &Path) -> Result<Vec<Vec<Token>>, CliError> {
    let prompts = read_token_lines(path)?;
    if prompts.is_empty() {
        return Err(invalid(format!("--prompts: {} has no prompts", path.display())));
    }
    Ok(prompts)
}

fn perturbation(s: &Settings, prompts: &[Vec<Token>]) -> Result<(PerturbationConfig, Option<IdfScorer>), CliError> {
    let eps = check_epsilon(required(&s.epsilon, "--epsilon")?, "--epsilon")?;
    let seed = required(&s.seed, "--seed")?;
    let mut config = PerturbationConfig::uniform(eps, seed);
    let scorer = match s.adaptive_cap {
        Some(cap) => {
            if !(cap.is_finite() && cap >= eps) {
                return Err(invalid(format!(
                    "--adaptive-cap must be at least --epsilon ({eps}), got {cap}"
                )));
            }
            config.allocation = Allocation::Adaptive { epsilon_cap: cap };
            Some(IdfScorer::fit(prompts.iter().map(Vec::as_slice)))
        }
        None => None,
    };
    Ok((config, scorer))
}

fn as_scorer(s: &Option<IdfScorer>) -> Option<&dyn ImportanceScorer> {
    s.as_ref().map(|s| s as &dyn ImportanceScorer)
}

struct Backends {
    generator: Arc<dyn GeneratorBackend>,
    completion: Arc<dyn TextCompletion>,
}

fn backends(s: &Settings) -> Result<Backends, CliError> {
    match s.backend.unwrap_or(BackendKind::Mock) {
        BackendKind::Mock | BackendKind::Loopback => {
            let mock = Arc::new(MockGenerator::new(s.seed.unwrap_or(0)));
            Ok(Backends {
                generator: mock.clone(),
                completion: mock,
            })
        }
        BackendKind::Http => {
            let endpoint = required(&s.endpoint, "--endpoint")?;
            let mut config = HttpGeneratorConfig::new(
                endpoint,
                s.api_key_env.clone().unwrap_or_else(|| DEFAULT_API_KEY_ENV.into()),
            );
            if let Some(model) = &s.model {
                config.model = model.clone();
            }
            if let Some(ms) = s.deadline_ms {
                config.timeout = Duration::from_millis(ms);
            }
            let http = Arc::new(HttpGenerator::new(config).map_err(|e| invalid(format!("--backend http: {e}")))?);
            Ok(Backends {
                generator: http.clone(),
                completion: http,
            })
        }
    }
}

fn resolve_addr(addr: &str) -> Result<SocketAddr, CliError> {
    addr.to_socket_addrs()
        .ok()
        .and_then(|mut a| a.next())
        .ok_or_else(|| invalid(format!("--addr: cannot resolve `{addr}`")))
}

/// Client side of the protocol plus whatever must stay alive while it is used.
struct Session {
    client: RationaleClient,
    log: FrameLog,
    backend_id: String,
    _server: Option<ServerHandle>,
}

impl Session {
    fn open(s: &Settings, generator: &Arc<dyn GeneratorBackend>) -> Result<Session, CliError> {
        let name = format!("fedcot-{}", s.seed.unwrap_or(0));
        let deadline = Duration::from_millis(s.deadline_ms.unwrap_or(DEFAULT_DEADLINE_MS));
        if let Some(addr) = &s.addr {
            let addr = resolve_addr(addr)?;
            let log = FrameLog::new();
            let transport = TcpTransport::new(addr, deadline).with_log(log.clone());
            return Ok(Session {
                client: RationaleClient::new(transport, name),
                log,
                backend_id: format!("tcp:{addr}"),
                _server: None,
            });
        }
        if s.backend == Some(BackendKind::Loopback) {
            let server = serve("127.0.0.1:0", Arc::clone(generator))?;
            let log = FrameLog::new();
            let transport = TcpTransport::new(server.local_addr(), deadline).with_log(log.clone());
            return Ok(Session {
                client: RationaleClient::new(transport, name),
                log,
                backend_id: format!("loopback:{}", generator.id()),
                _server: Some(server),
            });
        }
        let transport = LoopbackTransport::new(Arc::clone(generator));
        let log = transport.log();
        Ok(Session {
            client: RationaleClient::new(transport, name),
            log,
            backend_id: generator.id().to_string(),
            _server: None,
        })
    }

    /// Outgoing request frames only. Responses carry timings and are left out
    /// so the file is reproducible.
    fn write_requests(&self, dir: &Path) -> Result<OutputRecord, CliError> {
        let requests: Vec<PromptRequest> = self
            .log
            .frames()
            .iter()
            .filter_map(|f| serde_json::from_str::<PromptRequest>(f.trim()).ok())
            .collect();
        Ok(write_jsonl(&dir.join("requests.jsonl"), &requests)?)
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        if let Some(server) = self._server.take() {
            server.shutdown();
        }
    }
}

fn settings_json(s: &Settings) -> Result<serde_json::Value, CliError> {
    Ok(serde_json::to_value(s)?)
}

fn start_manifest(
    dir: &Path,
    command: &str,
    backend: &str,
    s: &Settings,
    inputs: &[(&str, &Option<PathBuf>)],
) -> Result<Manifest, CliError> {
    let mut m = Manifest::new(command, backend, settings_json(s)?);
    m.seed = s.seed;
    for (key, path) in inputs {
        if let Some(p) = path {
            m.inputs.insert((*key).into(), InputRecord::of(p)?);
        }
    }
    m.write(dir)?;
    Ok(m)
}

fn finish_manifest(dir: &Path, mut m: Manifest, outputs: Vec<(&str, OutputRecord)>) -> CmdResult {
    for (k, o) in outputs {
        m.outputs.insert(k.into(), o);
    }
    m.complete = true;
    let path = m.write(dir)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<OutputRecord, CliError> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(OutputRecord {
        file: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
        records: text.lines().count(),
        sha256: crate::pipeline::io::sha256_hex(text.as_bytes()),
    })
}

fn perturb(s: Settings) -> CmdResult {
    let dir = out_dir(&s)?;
    let prompts = load_prompts(&required(&s.prompts, "--prompts")?)?;
    let (config, scorer) = perturbation(&s, &prompts)?;
    let table = load_table(&s)?;

    let mut m = start_manifest(
        &dir,
        "perturb",
        "none",
        &s,
        &[("embeddings", &s.embeddings), ("prompts", &s.prompts)],
    )?;
    m.epsilon = Some(config.epsilon);
    let rows = perturb_prompts(&prompts, &table, &config, as_scorer(&scorer))
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.with_context(|| format!("prompt {i}")))
        .collect::<Result<Vec<_>, _>>()?;
    let out = write_jsonl(&dir.join("perturbed.jsonl"), &rows)?;
    println!("perturbed {} prompts at epsilon {}", rows.len(), config.epsilon);
    finish_manifest(&dir, m, vec![("perturbed", out)])
}

fn verify_dp(s: Settings) -> CmdResult {
    let eps = required(&s.epsilon, "--epsilon")?;
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(invalid(format!(
            "--epsilon must be a nonnegative finite number, got {eps}"
        )));
    }
    let table = match &s.embeddings {
        Some(_) => load_table(&s)?,
        None => five_token_table(),
    };
    let report = verify_dp_bound(&table, eps, table.tokens())?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(dir) = &s.out {
        let dir = dir.clone();
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut m = start_manifest(&dir, "verify-dp", "none", &s, &[("embeddings", &s.embeddings)])?;
        m.epsilon = Some(eps);
        let out = write_text(&dir.join("dp_report.json"), &(json + "\n"))?;
        finish_manifest(&dir, m, vec![("report", out)])?;
    }
    if report.pass {
        println!("PASS max ratio {} <= bound {}", report.max_ratio, report.bound);
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow::anyhow!(
            "FAIL max ratio {} exceeds bound {}",
            report.max_ratio,
            report.bound
        )))
    }
}

fn serve_cmd(s: Settings) -> CmdResult {
    let b = backends(&s)?;
    let addr = s.addr.clone().unwrap_or_else(|| DEFAULT_SERVE_ADDR.into());
    let handle = serve(addr.as_str(), b.generator.clone())?;
    println!("serving {} on {}", b.generator.id(), handle.local_addr());
    let _ = std::io::stdout().flush();
    handle.join();
    Ok(())
}

fn build_datasets(s: Settings) -> CmdResult {
    let dir = out_dir(&s)?;
    let prompts = load_prompts(&required(&s.prompts, "--prompts")?)?;
    let (config, scorer) = perturbation(&s, &prompts)?;
    let table = load_table(&s)?;
    let b = backends(&s)?;
    let mut session = Session::open(&s, &b.generator)?;
    let task = s.task.clone().unwrap_or_else(|| "qa".into());

    let mut m = start_manifest(
        &dir,
        "build-datasets",
        &session.backend_id,
        &s,
        &[("embeddings", &s.embeddings), ("prompts", &s.prompts)],
    )?;
    m.epsilon = Some(config.epsilon);
    let encoder = build_encoder_dataset(&prompts, &table, &config, as_scorer(&scorer))?;
    let decoder = build_decoder_dataset(
        &prompts,
        &table,
        &config,
        as_scorer(&scorer),
        &mut session.client,
        b.generator.as_ref(),
        &task,
    )?;
    let outputs = vec![
        ("encoder", write_jsonl(&dir.join("encoder.jsonl"), &encoder)?),
        ("decoder", write_jsonl(&dir.join("decoder.jsonl"), &decoder.examples)?),
        ("skips", write_jsonl(&dir.join("skips.jsonl"), &decoder.skips)?),
        ("requests", session.write_requests(&dir)?),
    ];
    println!(
        "{} encoder pairs, {} decoder examples, {} skipped",
        encoder.len(),
        decoder.examples.len(),
        decoder.skips.len()
    );
    finish_manifest(&dir, m, outputs)
}

fn make_decoder(
    s: &Settings,
    table: &Arc<EmbeddingTable>,
    b: &Backends,
) -> Result<Box<dyn RationaleDecoder>, CliError> {
    Ok(match s.decoder.unwrap_or(DecoderKind::Repair) {
        DecoderKind::Identity => Box::new(IdentityDecoder),
        DecoderKind::Repair => Box::new(RepairDecoder),
        DecoderKind::Icl => {
            let path = required(&s.demos, "--demos")?;
            let demos: Vec<DecoderExample> = read_jsonl(&path)?;
            let k = s.k_demos.unwrap_or(4);
            let decoder = IclDecoder::new(demos, k, Arc::clone(table), b.completion.clone())
                .map_err(|e| invalid(format!("--k-demos/--demos: {e}")))?;
            Box::new(decoder)
        }
    })
}

fn run(s: Settings) -> CmdResult {
    let dir = out_dir(&s)?;
    let prompts = load_prompts(&required(&s.prompts, "--prompts")?)?;
    let labels = read_token_lines(&required(&s.labels, "--labels")?)?;
    if labels.len() != prompts.len() {
        return Err(invalid(format!(
            "--labels has {} lines but --prompts has {}",
            labels.len(),
            prompts.len()
        )));
    }
    let (config, scorer) = perturbation(&s, &prompts)?;
    let table = Arc::new(load_table(&s)?);
    let b = backends(&s)?;
    let decoder = make_decoder(&s, &table, &b)?;
    let mut session = Session::open(&s, &b.generator)?;
    let task = s.task.clone().unwrap_or_else(|| "qa".into());

    let mut m = start_manifest(
        &dir,
        "run",
        &session.backend_id,
        &s,
        &[
            ("embeddings", &s.embeddings),
            ("prompts", &s.prompts),
            ("labels", &s.labels),
            ("demos", &s.demos),
        ],
    )?;
    m.epsilon = Some(config.epsilon);
    let result = run_fedcot(
        &prompts,
        &labels,
        &table,
        &config,
        as_scorer(&scorer),
        &mut session.client,
        decoder.as_ref(),
        &task,
    )?;
    let outputs = vec![
        ("distill", write_jsonl(&dir.join("distill.jsonl"), &result.examples)?),
        ("requests", session.write_requests(&dir)?),
    ];
    println!("{} examples, {} label-only", result.examples.len(), result.label_only);
    finish_manifest(&dir, m, outputs)
}

fn sweep(s: Settings) -> CmdResult {
    let dir = out_dir(&s)?;
    let seed = required(&s.seed, "--seed")?;
    let epsilons = s.epsilons.clone().unwrap_or_else(|| DEFAULT_SWEEP.to_vec());
    for &e in &epsilons {
        check_epsilon(e, "--epsilons")?;
    }
    if epsilons.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("--epsilons must be strictly increasing"));
    }
    if s.addr.is_some() {
        return Err(invalid("--addr is not used by sweep; the generator runs in process"));
    }
    let decoder: Box<dyn RationaleDecoder> = match s.decoder.unwrap_or(DecoderKind::Repair) {
        DecoderKind::Identity => Box::new(IdentityDecoder),
        DecoderKind::Repair => Box::new(RepairDecoder),
        DecoderKind::Icl => return Err(invalid("--decoder icl is not supported by sweep")),
    };
    let table = match &s.embeddings {
        Some(_) => load_table(&s)?,
        None => sweep_table(),
    };
    let prompts = match &s.prompts {
        Some(p) => load_prompts(p)?,
        None => sweep_prompts(SWEEP_PROMPTS, seed),
    };
    let b = backends(&s)?;

    let mut m = start_manifest(
        &dir,
        "sweep",
        b.generator.id(),
        &s,
        &[("embeddings", &s.embeddings), ("prompts", &s.prompts)],
    )?;
    m.epsilons = Some(epsilons.clone());
    let settings = SweepSettings {
        seed,
        ..Default::default()
    };
    let report = epsilon_sweep(
        &prompts,
        &table,
        &epsilons,
        b.generator.as_ref(),
        decoder.as_ref(),
        &settings,
    )?;
    let csv = report.to_csv();
    print!("{csv}");
    let csv_out = write_text(&dir.join("sweep.csv"), &csv)?;
    let rows_out = write_jsonl(&dir.join("sweep_rows.jsonl"), &report.rows)?;
    if let Some(rho) = report.perturbed_trend() {
        println!("spearman rho (epsilon vs perturbed ratio): {rho:.4}");
    }
    finish_manifest(&dir, m, vec![("sweep", csv_out), ("rows", rows_out)])
}

fn distill_toy(s: Settings) -> CmdResult {
    let dir = out_dir(&s)?;
    let seed = required(&s.seed, "--seed")?;
    let mut recipe: ToyRecipe = toy_recipe(seed);
    if let Some(path) = &s.dataset {
        let examples: Vec<DistillExample> = read_jsonl(path)?;
        if examples.is_empty() {
            return Err(invalid(format!("--dataset: {} has no examples", path.display())));
        }
        recipe.examples = examples;
    }
    if let Some(e) = s.epochs {
        if e == 0 {
            return Err(invalid("--epochs must be at least 1"));
        }
        recipe.config.epochs = e;
    }
    if let Some(lr) = s.learning_rate {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(invalid(format!(
                "--learning-rate must be finite and nonnegative, got {lr}"
            )));
        }
        recipe.config.learning_rate = lr;
    }

    let m = start_manifest(&dir, "distill-toy", "none", &s, &[("dataset", &s.dataset)])?;
    let trained = recipe.run()?;
    let trace = write_text(&dir.join("trace.csv"), &trained.trace.to_csv())?;
    let model_path = dir.join("model.json");
    trained.model.save(&model_path)?;
    let model = OutputRecord {
        file: "model.json".into(),
        records: 1,
        sha256: crate::pipeline::io::sha256_file(&model_path)?,
    };
    println!(
        "loss {:.6} -> {:.6} over {} epochs",
        trained.trace.initial(),
        trained.trace.last(),
        recipe.config.epochs
    );
    finish_manifest(&dir, m, vec![("trace", trace), ("model", model)])
}

/// A ready-to-use corpus: the clustered sweep vocabulary, public and private
/// prompts drawn from it, labels, and the five-word table.
fn fixture(s: Settings) -> CmdResult {
    let dir = out_dir(&s)?;
    let seed = s.seed.unwrap_or(0);
    let lines = |ps: &[Vec<Token>]| ps.iter().map(|p| join_tokens(p) + "\n").collect::<String>();

    let mut m = Manifest::new("fixture", "none", settings_json(&s)?);
    m.seed = Some(seed);
    m.write(&dir)?;
    let mut emb = Vec::new();
    sweep_table().write(&mut emb)?;
    let mut five = Vec::new();
    five_token_table().write(&mut five)?;
    let private = sweep_prompts(10, derive_seed(seed, 2));
    let outputs = vec![
        (
            "embeddings",
            write_text(&dir.join("embeddings.txt"), &String::from_utf8(emb)?)?,
        ),
        (
            "five_token",
            write_text(&dir.join("five_token.txt"), &String::from_utf8(five)?)?,
        ),
        (
            "public",
            write_text(
                &dir.join("public.txt"),
                &lines(&sweep_prompts(20, derive_seed(seed, 1))),
            )?,
        ),
        ("prompts", write_text(&dir.join("prompts.txt"), &lines(&private))?),
        (
            "labels",
            write_text(&dir.join("labels.txt"), &lines(&synthetic_labels(private.len())))?,
        ),
    ];
    println!("wrote fixture corpus to {}", dir.display());
    finish_manifest(&dir, m, outputs)
}
