use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use promptpack::abbreviation::{expand_text, AbbrevDictionary};
use promptpack::pipeline::{
    ablation_grid, Attachment, AttachmentKind, ExemplarMode, FailureKind, Pipeline, PipelineConfig, PipelineError,
    PipelineInput, PipelineOutput,
};
use promptpack::pruning::Budget;
use promptpack::table::{reconstruct_table, QuantMode, RenderMode, TableSidecar};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::args::{CompressArgs, ConfigArgs, ExemplarModeArg, ExpandArgs, GridArgs, InputArgs, QuantArg, RenderArg};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Provider(String),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e.kind {
            FailureKind::Config => CliError::Usage(e.to_string()),
            FailureKind::Data => CliError::Data(e.to_string()),
            FailureKind::Provider => CliError::Provider(e.to_string()),
        }
    }
}

/// Layout of a bundle directory, written as `manifest.json`.
#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    attachments: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    kind: AttachmentKind,
    content: String,
    dictionary: Option<String>,
    quant: Option<String>,
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::Data(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn to_pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("bundle types serialize")
}

pub fn build_config(args: &ConfigArgs) -> Result<PipelineConfig, CliError> {
    let mut c = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(r) = args.budget {
        c.budget = Budget::Ratio(r);
    }
    if let Some(n) = args.max_tokens {
        c.budget = Budget::MaxTokens(n);
    }
    if let Some(g) = args.ngram {
        c.ngram.n = g;
    }
    if let Some(t) = args.topk {
        c.ngram.top_k = t;
    }
    if let Some(f) = args.min_freq {
        c.ngram.min_freq = f;
    }
    if args.no_abbrev {
        c.abbreviation = false;
    }
    if let Some(q) = args.quant {
        c.quant.mode = match q {
            QuantArg::Uniform => QuantMode::Uniform,
            QuantArg::Kmeans => QuantMode::Kmeans,
            QuantArg::Off => QuantMode::Off,
        };
    }
    if let Some(b) = args.bits {
        c.quant.bits = b;
    }
    if let Some(k) = args.k {
        c.quant.k = k;
    }
    if let Some(t) = args.tolerance {
        c.quant.tolerance = Some(t);
    }
    if let Some(r) = args.render {
        c.quant.render = match r {
            RenderArg::Reconstructed => RenderMode::Reconstructed,
            RenderArg::Codes => RenderMode::Codes,
        };
    }
    if let Some(m) = args.exemplar_mode {
        c.exemplar.mode = match m {
            ExemplarModeArg::Off => ExemplarMode::Off,
            ExemplarModeArg::Random => ExemplarMode::Random,
            ExemplarModeArg::Representative => ExemplarMode::Representative,
        };
    }
    if let Some(n) = args.exemplar_count {
        c.exemplar.count = n;
    }
    if let Some(s) = args.seed {
        c.exemplar.seed = s;
        c.quant.seed = s;
    }
    if let Some(m) = &args.model {
        c.model = m.clone();
    }
    if args.append_dictionary {
        c.append_dictionary_as_context = true;
    }
    if let Some(p) = &args.corpus {
        c.providers.corpus_path = Some(p.clone());
    }
    c.providers.apply_env();
    c.validate()?;
    Ok(c)
}

pub fn load_input(args: &InputArgs) -> Result<PipelineInput, CliError> {
    let prompt = read(&args.prompt)?;
    let mut seen = HashSet::new();
    let mut attachments = Vec::with_capacity(args.attachments.len());
    for path in &args.attachments {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| CliError::Usage(format!("{}: not a file name", path.display())))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(CliError::Usage(format!("two attachments are named {name:?}")));
        }
        let content = read(path)?;
        let is_table = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
        attachments.push(if is_table {
            Attachment::table(name, content)
        } else {
            Attachment::text(name, content)
        });
    }
    let exemplar_pool = match &args.exemplars {
        Some(p) => read(p)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect(),
        None => Vec::new(),
    };
    Ok(PipelineInput {
        prompt,
        attachments,
        exemplar_pool,
    })
}

fn write_bundle(dir: &Path, out: &PipelineOutput) -> Result<(), CliError> {
    let bundle = &out.bundle;
    write(&dir.join("prompt.txt"), &bundle.compressed_prompt)?;
    let mut entries = Vec::new();
    for att in &bundle.attachments {
        let content = format!("attachments/{}", att.name);
        write(&dir.join(&content), &att.content)?;
        let dictionary = match bundle.dictionary.iter().find(|d| d.attachment == att.name) {
            Some(d) => {
                let rel = format!("dictionaries/{}.json", att.name);
                write(&dir.join(&rel), &to_pretty(&d.dictionary))?;
                Some(rel)
            }
            None => None,
        };
        let quant = match bundle.quant_params.iter().find(|q| q.attachment == att.name) {
            Some(q) => {
                let rel = format!("quant/{}.json", att.name);
                write(&dir.join(&rel), &to_pretty(&q.sidecar))?;
                Some(rel)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            name: att.name.clone(),
            kind: att.kind,
            content,
            dictionary,
            quant,
        });
    }
    write(&dir.join("manifest.json"), &to_pretty(&Manifest { attachments: entries }))?;
    write(&dir.join("report.json"), &to_pretty(&bundle.report))?;
    write(&dir.join("bundle.json"), &to_pretty(bundle))?;
    write(&dir.join("tokens.json"), &to_pretty(&out.token_detail))?;
    Ok(())
}

pub fn compress(args: &CompressArgs) -> Result<(), CliError> {
    let config = build_config(&args.config)?;
    let input = load_input(&args.input)?;
    let out = Pipeline::new(config)?.run(&input)?;
    let report = &out.bundle.report;
    if report.fidelity_warning {
        eprintln!(
            "warning: semantic similarity p5 {:.3} is below the warning threshold",
            report.fidelity.as_ref().map_or(f64::NAN, |f| f.p5)
        );
    }
    let mut summary = json!({
        "ratio": report.ratio,
        "estSavings": report.est_savings,
        "originalTokens": report.original_tokens,
        "compressedTokens": report.compressed_tokens,
        "fidelity": report.fidelity.as_ref().map(|f| json!({"mean": f.mean, "p5": f.p5})),
        "fidelityWarning": report.fidelity_warning,
    });
    match &args.out {
        Some(dir) => {
            write_bundle(dir, &out)?;
            summary["out"] = json!(dir);
        }
        None => summary["bundle"] = serde_json::to_value(&out.bundle).expect("bundle serializes"),
    }
    println!("{summary}");
    Ok(())
}

fn restore(dir: &Path, entry: &ManifestEntry) -> Result<String, CliError> {
    let content = read(&dir.join(&entry.content))?;
    match entry.kind {
        AttachmentKind::TextDocument => match &entry.dictionary {
            Some(rel) => {
                let dict = AbbrevDictionary::from_json(&read(&dir.join(rel))?)
                    .map_err(|e| CliError::Data(format!("{rel}: {e}")))?;
                expand_text(&content, &dict).map_err(|e| CliError::Data(format!("{}: {e}", entry.name)))
            }
            None => Ok(content),
        },
        AttachmentKind::Table => match &entry.quant {
            Some(rel) => {
                let sidecar: TableSidecar =
                    serde_json::from_str(&read(&dir.join(rel))?).map_err(|e| CliError::Data(format!("{rel}: {e}")))?;
                Ok(reconstruct_table(&content, &sidecar)
                    .map_err(|e| CliError::Data(format!("{}: {e}", entry.name)))?
                    .to_csv())
            }
            None => Ok(content),
        },
    }
}

pub fn expand(args: &ExpandArgs) -> Result<(), CliError> {
    let manifest_path = args.input.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&read(&manifest_path)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", manifest_path.display())))?;
    let entry = match &args.attachment {
        Some(name) => manifest
            .attachments
            .iter()
            .find(|a| &a.name == name)
            .ok_or_else(|| CliError::Usage(format!("bundle has no attachment {name:?}")))?,
        None => match manifest.attachments.as_slice() {
            [only] => only,
            [] => return Err(CliError::Data("bundle has no attachments".into())),
            _ => {
                let names: Vec<&str> = manifest.attachments.iter().map(|a| a.name.as_str()).collect();
                return Err(CliError::Usage(format!(
                    "bundle holds several attachments, pick one with --attachment: {}",
                    names.join(", ")
                )));
            }
        },
    };
    let restored = restore(&args.input, entry)?;
    write(&args.out, &restored)?;
    println!(
        "{}",
        json!({"attachment": entry.name, "out": PathBuf::from(&args.out), "bytes": restored.len()})
    );
    Ok(())
}

pub fn grid(args: &GridArgs) -> Result<(), CliError> {
    if args.t_grid.is_empty() || args.g_grid.is_empty() {
        return Err(CliError::Usage("grid axes must be non-empty".into()));
    }
    let config = build_config(&args.config)?;
    let input = load_input(&args.input)?;
    let pipeline = Pipeline::new(config)?;
    for cell in ablation_grid(&pipeline, &input, &args.t_grid, &args.g_grid)? {
        println!(
            "{}",
            json!({"t": cell.t, "g": cell.g, "report": cell.report.without_timings()})
        );
    }
    Ok(())
}
