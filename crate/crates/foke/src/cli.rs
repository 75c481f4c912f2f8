//! Command-line front end. `run` executes every command except `serve`
//! and writes to the given sink, so tests can drive it in-process.

use std::fmt;
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use foke_core::embedding::format_significant;
use foke_core::engine::RetrieveQuery;
use foke_core::profile::ProfileRecord;
use foke_core::prompt::TaskSpec;
use foke_core::simulate::trajectory_lines;
use foke_core::store::{self, load_forest, parse_forest_document, parse_profiles, parse_templates};
use foke_core::{EngineState, Error, SimConfig, TrainConfig};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "foke", version, about = "Knowledge-forest learning engine")]
pub struct Cli {
    /// Output format for read commands.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a forest document against the schema and tree invariants.
    Validate { forest: PathBuf },
    /// Train embeddings and write a snapshot; prints one loss line per epoch.
    Train {
        forest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        profiles: Option<PathBuf>,
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Tree-link threshold stored in the snapshot.
        #[arg(long)]
        tau: Option<f64>,
        /// Concept-link threshold stored in the snapshot.
        #[arg(long)]
        tau_c: Option<f64>,
        /// Add within-tree "related" edges after training.
        #[arg(long)]
        infer: bool,
    },
    /// Recommend the next tree for a user (`profiles.json#id`, or an id
    /// stored in the snapshot).
    Recommend {
        snapshot: PathBuf,
        #[arg(long)]
        user: String,
    },
    /// Find the tree closest to a concept.
    Retrieve {
        snapshot: PathBuf,
        #[arg(long)]
        concept: String,
    },
    /// Simulate a learner following the recommendations.
    Simulate {
        snapshot: PathBuf,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long, default_value_t = 50)]
        max_steps: usize,
        #[arg(long, default_value_t = 1.0)]
        mastery_goal: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Start from this user's mastery instead of zero.
        #[arg(long)]
        user: Option<String>,
    },
    /// Render the best prompt for a task.
    Prompt {
        snapshot: PathBuf,
        #[arg(long)]
        task: PathBuf,
        /// Template library; defaults to the templates in the snapshot.
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long)]
        user: Option<String>,
    },
    /// Serve the HTTP API.
    Serve {
        snapshot: PathBuf,
        #[arg(long, env = "FOKE_LISTEN", default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        /// Seconds between autosaves to the snapshot path (0 disables).
        #[arg(long, env = "FOKE_AUTOSAVE_SECS", default_value_t = 30)]
        autosave_secs: u64,
    },
}

/// A failed command and its exit code.
#[derive(Debug)]
pub enum CliError {
    /// Invalid input or a library error (exit 1).
    Validation(String),
    /// I/O or other environment failure (exit 2).
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))
}

/// Library error with the offending file named.
fn in_file(path: &Path) -> impl Fn(Error) -> CliError + '_ {
    move |e| CliError::Validation(format!("{}: {e}", path.display()))
}

pub fn load_state(path: &Path) -> Result<EngineState, CliError> {
    store::load_snapshot(&read(path)?).map_err(in_file(path))
}

/// `file.json#id` loads a profile from a profiles document; a bare id is
/// looked up in the snapshot.
fn resolve_user(state: &mut EngineState, spec: &str) -> Result<String, CliError> {
    let Some((file, id)) = spec.rsplit_once('#') else {
        state.profile(spec)?;
        return Ok(spec.to_owned());
    };
    let path = Path::new(file);
    let doc = parse_profiles(&read(path)?).map_err(in_file(path))?;
    let record: ProfileRecord = doc
        .profiles
        .into_iter()
        .find(|p| p.user_id == id)
        .ok_or_else(|| Error::UserNotFound(id.to_owned()))?;
    state.profiles.insert(id.to_owned(), record);
    Ok(id.to_owned())
}

fn json_line(out: &mut dyn Write, value: &impl Serialize) -> Result<(), CliError> {
    serde_json::to_writer_pretty(&mut *out, value).map_err(|e| CliError::Internal(e.to_string()))?;
    writeln!(out)?;
    Ok(())
}

fn g(x: f64) -> String {
    format_significant(x, 6)
}

/// Runs a non-`serve` command.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Validate { forest } => {
            let doc = parse_forest_document(&read(forest)?).map_err(in_file(forest))?;
            let (f, triples) = doc.to_forest()?;
            match cli.format {
                Format::Json => json_line(
                    out,
                    &serde_json::json!({
                        "valid": true,
                        "trees": f.len(),
                        "concepts": f.concept_count(),
                        "triples": triples.len(),
                    }),
                )?,
                Format::Text => writeln!(
                    out,
                    "ok: {} trees, {} concepts, {} triples",
                    f.len(),
                    f.concept_count(),
                    triples.len()
                )?,
            }
        }
        Command::Train {
            forest,
            config,
            out: snapshot,
            seed,
            profiles,
            templates,
            tau,
            tau_c,
            infer,
        } => {
            let (f, triples) = load_forest(&read(forest)?).map_err(in_file(forest))?;
            let mut train_config: TrainConfig = match config {
                Some(p) => serde_json::from_slice(&read(p)?)
                    .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                train_config.seed = *s;
            }
            let mut state = EngineState::new(f, triples);
            if let Some(t) = tau {
                state.config.inference.tau = *t;
            }
            if let Some(t) = tau_c {
                state.config.inference.tau_c = *t;
            }
            state.config.inference.validate()?;
            if let Some(p) = profiles {
                let doc = parse_profiles(&read(p)?).map_err(in_file(p))?;
                state.profiles = doc.profiles.into_iter().map(|r| (r.user_id.clone(), r)).collect();
            }
            if let Some(p) = templates {
                state.templates = parse_templates(&read(p)?).map_err(in_file(p))?.templates;
            }
            let mut write_err = None;
            let outcome = state.train(&train_config, |e| {
                if write_err.is_none() {
                    if let Err(err) = writeln!(out, "{}", e.to_line()) {
                        write_err = Some(err);
                    }
                }
            })?;
            if let Some(err) = write_err {
                return Err(err.into());
            }
            state.apply_training(train_config, outcome);
            if *infer {
                let table = state.table()?.clone();
                state.forest.infer_all_relations(&table, state.config.inference.tau_c)?;
            }
            store::write_atomic(snapshot, &store::save_snapshot(&state))
                .map_err(|e| CliError::Internal(format!("{}: {e}", snapshot.display())))?;
        }
        Command::Recommend { snapshot, user } => {
            let mut state = load_state(snapshot)?;
            let id = resolve_user(&mut state, user)?;
            let rec = state.recommend(&id)?;
            match cli.format {
                Format::Json => json_line(out, &rec)?,
                Format::Text => {
                    let trees = state.forest.trees();
                    match rec.next {
                        Some(k) => writeln!(out, "next: {k} ({})", trees[k].tree_id())?,
                        None => writeln!(out, "next: none (all trees mastered)")?,
                    }
                    let width = trees
                        .iter()
                        .map(|t| t.tree_id().as_str().len())
                        .max()
                        .unwrap_or(4)
                        .max(4);
                    writeln!(
                        out,
                        "{:>3}  {:<width$}  {:>10}  {:>10}  {:>10}  eligible",
                        "k", "tree", "relevance", "unexplored", "score"
                    )?;
                    for (k, (t, s)) in trees.iter().zip(&rec.scores).enumerate() {
                        writeln!(
                            out,
                            "{k:>3}  {:<width$}  {:>10}  {:>10}  {:>10}  {}",
                            t.tree_id().as_str(),
                            g(s.relevance),
                            g(s.unexplored),
                            g(s.score),
                            if s.eligible { "yes" } else { "no" }
                        )?;
                    }
                }
            }
        }
        Command::Retrieve { snapshot, concept } => {
            let state = load_state(snapshot)?;
            let r = state.retrieve(&RetrieveQuery::Concept(concept.as_str().into()))?;
            match cli.format {
                Format::Json => json_line(out, &r)?,
                Format::Text => writeln!(out, "{} {}", r.tree_id, g(r.similarity))?,
            }
        }
        Command::Simulate {
            snapshot,
            delta,
            max_steps,
            mastery_goal,
            seed,
            user,
        } => {
            let mut state = load_state(snapshot)?;
            let user = user.as_deref().map(|u| resolve_user(&mut state, u)).transpose()?;
            let config = SimConfig {
                delta: delta.unwrap_or(state.config.default_delta),
                max_steps: *max_steps,
                mastery_goal: *mastery_goal,
                seed: *seed,
            };
            let sim = state.simulate(&config, user.as_deref())?;
            match cli.format {
                Format::Json => json_line(out, &sim)?,
                Format::Text => out.write_all(trajectory_lines(&sim.trajectory).as_bytes())?,
            }
        }
        Command::Prompt {
            snapshot,
            task,
            templates,
            user,
        } => {
            let mut state = load_state(snapshot)?;
            if let Some(p) = templates {
                state.templates = parse_templates(&read(p)?).map_err(in_file(p))?.templates;
            }
            let task: TaskSpec = serde_json::from_slice(&read(task)?)
                .map_err(|e| CliError::Validation(format!("{}: {e}", task.display())))?;
            let user = user.as_deref().map(|u| resolve_user(&mut state, u)).transpose()?;
            let sel = state.prompt(&task, &[], user.as_deref())?;
            match cli.format {
                Format::Json => json_line(out, &sel)?,
                Format::Text => {
                    writeln!(out, "template: {} (score {})", sel.template_id, g(sel.score))?;
                    writeln!(out, "goal: {}", sel.prompt.goal)?;
                    writeln!(out, "explanation: {}", sel.prompt.explanation)?;
                    writeln!(out, "feedback: {}", sel.prompt.feedback)?;
                    for (slot, p) in &sel.prompt.provenance {
                        writeln!(out, "  [{slot}] = {} ({})", p.value, p.source)?;
                    }
                }
            }
        }
        Command::Serve { .. } => {
            return Err(CliError::Internal("`serve` runs through `serve()`".into()));
        }
    }
    Ok(())
}
