//! `alertpilot` — alert-scoped log diagnosis from the command line.
//!
//! Exit codes: 0 success, 2 scoping gave up after its iteration budget,
//! 3 an LLM response stayed unparseable after the retry, 4 input errors.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use alertpilot_core::chains::build_chain;
use alertpilot_core::clustering::{embed_request, hac_cluster, EventVocabulary, Linkage};
use alertpilot_core::diagnosis::{load_sop_dir, DiagnosisError, SOPDocument};
use alertpilot_core::llm::{HttpLlm, LlmClient, ScriptedLlm};
use alertpilot_core::parsing::{parse_all, DrainParams};
use alertpilot_core::pipeline::{
    diagnose, report_metrics, write_outputs, PipelineConfig, PipelineError, PipelineMetrics,
};
use alertpilot_core::promql::AlertDefinition;
use alertpilot_core::scoping::{scope_logs, AliasMap, ScopingError, ToolCache};
use alertpilot_core::store::LogStore;
use alertpilot_core::synth::{gen_synth, SynthSpec};

#[derive(Parser)]
#[command(name = "alertpilot", version, about = "Alert-scoped log diagnosis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Scenario file for the scripted LLM backend; omit to use the HTTP
    /// backend configured via ALERTPILOT_LLM_* environment variables.
    #[arg(long)]
    mock_scenarios: Option<PathBuf>,
    /// Alias map JSON: alert label key -> log field name.
    #[arg(long)]
    alias_map: Option<PathBuf>,
}

#[derive(Args)]
struct DrainOpts {
    /// Parse-tree depth.
    #[arg(long, default_value_t = 4)]
    drain_depth: usize,
    /// Leaf similarity threshold.
    #[arg(long, default_value_t = 0.5)]
    drain_sim: f64,
}

impl DrainOpts {
    fn params(&self) -> DrainParams {
        DrainParams {
            tree_depth: self.drain_depth,
            sim_threshold: self.drain_sim,
            ..DrainParams::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate and count a JSONL log file.
    Ingest {
        /// JSONL log file.
        logs: PathBuf,
    },
    /// Generate (or reuse) the alert's filter tool and list scoped requests.
    Scope {
        /// Alert definition JSON.
        alert: PathBuf,
        /// JSONL log file.
        logs: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Extract log templates and print the event catalog.
    Parse {
        logs: PathBuf,
        #[command(flatten)]
        drain: DrainOpts,
    },
    /// Build per-request event chains.
    Chains {
        logs: PathBuf,
        /// Only render this request.
        #[arg(long)]
        request: Option<String>,
        #[command(flatten)]
        drain: DrainOpts,
    },
    /// Cluster requests by event-count similarity.
    Cluster {
        logs: PathBuf,
        /// Clustering similarity threshold θ.
        #[arg(long, default_value_t = 0.7)]
        threshold: f64,
        #[command(flatten)]
        drain: DrainOpts,
    },
    /// Run the full diagnosis pipeline for one alert.
    Diagnose {
        alert: PathBuf,
        logs: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        drain: DrainOpts,
        #[arg(long, default_value_t = 0.7)]
        threshold: f64,
        /// Directory of SOP documents.
        #[arg(long)]
        sop_dir: Option<PathBuf>,
        /// Byte budget for rendered chains in RCA prompts.
        #[arg(long, default_value_t = 16384)]
        render_budget: usize,
        /// Worker-pool size for chains and per-cluster RCA (0 = auto).
        #[arg(long, default_value_t = 0)]
        concurrency: usize,
    },
    /// Generate a seeded synthetic workload (logs, alert, ground truth).
    GenSynth {
        /// Spec JSON file; omit to use a uniform spec from the flags below.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 40)]
        requests: usize,
        #[arg(long, default_value_t = 2)]
        patterns: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Print the metrics table from a previous run.
    Metrics {
        /// Directory containing metrics.json.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

enum CliError {
    Input(String),
    Scoping(ScopingError),
    Pipeline(PipelineError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 4,
            CliError::Scoping(ScopingError::ScopingFailed { .. })
            | CliError::Pipeline(PipelineError::Scoping(ScopingError::ScopingFailed {
                ..
            })) => 2,
            CliError::Scoping(ScopingError::LlmResponseUnparseable(_))
            | CliError::Pipeline(PipelineError::Diagnosis(
                DiagnosisError::LlmResponseUnparseable { .. },
            ))
            | CliError::Pipeline(PipelineError::Scoping(
                ScopingError::LlmResponseUnparseable(_),
            )) => 3,
            _ => 1,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Input(m) => m.clone(),
            CliError::Scoping(e) => e.to_string(),
            CliError::Pipeline(e) => e.to_string(),
        }
    }
}

fn input_err<E: std::fmt::Display>(context: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Input(format!("{context}: {e}"))
}

fn load_store(path: &PathBuf) -> Result<LogStore, CliError> {
    let mut store = LogStore::new();
    let report = store
        .ingest_jsonl(path)
        .map_err(input_err(&format!("ingest {}", path.display())))?;
    if report.malformed > 0 {
        eprintln!("warning: {} malformed lines skipped", report.malformed);
    }
    Ok(store)
}

fn load_alert(path: &PathBuf) -> Result<AlertDefinition, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(input_err(&format!("read {}", path.display())))?;
    serde_json::from_str(&text).map_err(input_err(&format!("parse {}", path.display())))
}

fn make_llm(common: &CommonOpts) -> Result<Box<dyn LlmClient>, CliError> {
    match &common.mock_scenarios {
        Some(path) => Ok(Box::new(
            ScriptedLlm::from_file(path).map_err(input_err("mock scenarios"))?,
        )),
        None => Ok(Box::new(
            HttpLlm::from_env().map_err(input_err("LLM backend"))?,
        )),
    }
}

fn load_aliases(common: &CommonOpts) -> Result<AliasMap, CliError> {
    match &common.alias_map {
        Some(path) => AliasMap::from_json_file(path).map_err(input_err("alias map")),
        None => Ok(AliasMap::default()),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest { logs } => {
            let store = load_store(&logs)?;
            println!("ingested {} records", store.len());
            Ok(())
        }
        Command::Scope { alert, logs, common } => {
            let store = load_store(&logs)?;
            let alert = load_alert(&alert)?;
            let llm = make_llm(&common)?;
            let aliases = load_aliases(&common)?;
            std::fs::create_dir_all(&common.out).map_err(input_err("create out dir"))?;
            let cache = ToolCache::open(&common.out.join("tool_cache.json"))
                .map_err(CliError::Scoping)?;
            let scoped = scope_logs(&alert, &store, &cache, llm.as_ref(), &aliases)
                .map_err(CliError::Scoping)?;
            println!(
                "scoped {} records across {} requests (cache_hit={})",
                scoped.records.len(),
                scoped.request_ids.len(),
                scoped.cache_hit
            );
            for rid in &scoped.request_ids {
                println!("{rid}");
            }
            Ok(())
        }
        Command::Parse { logs, drain } => {
            let store = load_store(&logs)?;
            let result = parse_all(store.records(), &drain.params());
            for event in &result.events {
                println!("{}\t{}\t{}", event.event_id, event.component, event.template());
            }
            Ok(())
        }
        Command::Chains { logs, request, drain } => {
            let store = load_store(&logs)?;
            let result = parse_all(store.records(), &drain.params());
            let seq_index = result.seq_index();
            let event_of_seq =
                |seq: u64| seq_index.get(&seq).map(|&i| result.events[i].clone());
            let ids: Vec<String> = match request {
                Some(rid) => vec![rid],
                None => {
                    alertpilot_core::store::extract_request_ids(store.records())
                }
            };
            let per_request = store.fetch_by_request_ids(&ids);
            for (rid, records) in &per_request {
                let chain = build_chain(rid, records, &event_of_seq)
                    .map_err(input_err(&format!("chain for {rid}")))?;
                let segments: Vec<String> = chain
                    .segments
                    .iter()
                    .map(|s| format!("{}({})", s.component, s.events.len()))
                    .collect();
                println!("{rid}\t{}", segments.join(" -> "));
            }
            Ok(())
        }
        Command::Cluster { logs, threshold, drain } => {
            let store = load_store(&logs)?;
            let result = parse_all(store.records(), &drain.params());
            let seq_index = result.seq_index();
            let ids = alertpilot_core::store::extract_request_ids(store.records());
            let per_request = store.fetch_by_request_ids(&ids);
            let vocab =
                EventVocabulary::build(result.events.iter().map(|e| e.event_id.as_str()))
                    .map_err(input_err("vocabulary"))?;
            let embeddings: Vec<_> = per_request
                .iter()
                .map(|(rid, records)| {
                    embed_request(
                        rid,
                        records
                            .iter()
                            .filter_map(|r| seq_index.get(&r.seq))
                            .map(|&i| result.events[i].event_id.as_str()),
                        &vocab,
                    )
                })
                .collect::<Result<_, _>>()
                .map_err(input_err("embedding"))?;
            let set = hac_cluster(&embeddings, threshold, Linkage::Average)
                .map_err(input_err("clustering"))?;
            println!("{} clusters at θ={threshold}", set.clusters.len());
            for (idx, cluster) in set.clusters.iter().enumerate() {
                println!(
                    "c{idx:03}\trep={}\tmembers={}",
                    cluster.representative,
                    cluster.members.join(",")
                );
            }
            Ok(())
        }
        Command::Diagnose {
            alert,
            logs,
            common,
            drain,
            threshold,
            sop_dir,
            render_budget,
            concurrency,
        } => {
            let store = load_store(&logs)?;
            let alert = load_alert(&alert)?;
            let llm = make_llm(&common)?;
            let aliases = load_aliases(&common)?;
            std::fs::create_dir_all(&common.out).map_err(input_err("create out dir"))?;
            let cache = ToolCache::open(&common.out.join("tool_cache.json"))
                .map_err(CliError::Scoping)?;
            let sops: Vec<SOPDocument> = match &sop_dir {
                Some(dir) => load_sop_dir(dir).map_err(input_err("sop dir"))?,
                None => Vec::new(),
            };
            let config = PipelineConfig {
                theta: threshold,
                drain: drain.params(),
                render_budget,
                concurrency,
                component_info: BTreeMap::new(),
                ..PipelineConfig::default()
            };
            let output = diagnose(
                &alert,
                &store,
                &cache,
                llm.as_ref(),
                &aliases,
                &sops,
                &config,
            )
            .map_err(CliError::Pipeline)?;
            write_outputs(&common.out, &output, &cache).map_err(CliError::Pipeline)?;
            println!(
                "report written to {} ({} clusters from {} requests)",
                common.out.display(),
                output.metrics.clusters,
                output.metrics.scoped_requests
            );
            Ok(())
        }
        Command::GenSynth { spec, requests, patterns, seed, out } => {
            let spec = match spec {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(input_err(&format!("read {}", path.display())))?;
                    serde_json::from_str::<SynthSpec>(&text)
                        .map_err(input_err(&format!("parse {}", path.display())))?
                }
                None => SynthSpec::uniform(requests, patterns, seed),
            };
            let (log_file, alert_file, truth_file) =
                gen_synth(&spec, &out).map_err(input_err("gen-synth"))?;
            println!("{}", log_file.display());
            println!("{}", alert_file.display());
            println!("{}", truth_file.display());
            Ok(())
        }
        Command::Metrics { out } => {
            let path = out.join("metrics.json");
            let text = std::fs::read_to_string(&path)
                .map_err(input_err(&format!("read {}", path.display())))?;
            let metrics: PipelineMetrics = serde_json::from_str(&text)
                .map_err(input_err(&format!("parse {}", path.display())))?;
            print!("{}", report_metrics(&metrics));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.exit_code())
        }
    }
}
