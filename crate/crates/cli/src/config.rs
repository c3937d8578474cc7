//! Config-file schemas and JSON loading with located diagnostics.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use cbd::data::{self, Corpus, DEFAULT_VAL_RATIO};
use cbd::distill::{BridgeStage, ChainSpec, DistillConfig, SourceSpec};
use cbd::tensor::DType;
use cbd::transformer::ModelConfig;
use serde::de::DeserializeOwned;
use serde::Deserialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    Markov,
    Arithmetic,
    File,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusParams {
    pub n_docs: Option<usize>,
    pub doc_len: Option<usize>,
    pub order: Option<usize>,
    pub alphabet: Option<String>,
    pub max_operand: Option<u64>,
}

/// `{kind, seed, params | path, val_ratio?}`.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub kind: CorpusKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub params: Option<CorpusParams>,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub val_ratio: Option<f64>,
}

impl CorpusSpec {
    /// Builds the corpus; relative file paths resolve against `base`.
    pub fn build(&self, base: &Path) -> anyhow::Result<Corpus> {
        let p = self.params.clone().unwrap_or_default();
        let ratio = self.val_ratio.unwrap_or(DEFAULT_VAL_RATIO);
        let corpus = match self.kind {
            CorpusKind::Markov => {
                if self.path.is_some() {
                    bail!("corpus.path: only valid for kind \"file\"");
                }
                data::gen_markov(
                    self.seed,
                    p.n_docs.unwrap_or(200),
                    p.doc_len.unwrap_or(128),
                    p.order.unwrap_or(1),
                    p.alphabet.as_deref().unwrap_or("abcdefghijklmnop"),
                )?
            }
            CorpusKind::Arithmetic => {
                if self.path.is_some() {
                    bail!("corpus.path: only valid for kind \"file\"");
                }
                data::gen_arithmetic(
                    self.seed,
                    p.n_docs.unwrap_or(500),
                    p.max_operand.unwrap_or(99),
                )?
            }
            CorpusKind::File => {
                let path = self
                    .path
                    .as_ref()
                    .ok_or_else(|| anyhow!("corpus.path: required for kind \"file\""))?;
                if self.params.is_some() {
                    bail!("corpus.params: not valid for kind \"file\"");
                }
                let full = base.join(path);
                return Corpus::from_file(&full, ratio, self.seed)
                    .with_context(|| format!("corpus file {}", full.display()));
            }
        };
        Ok(corpus.resplit(ratio, self.seed)?)
    }
}

/// The chain config file.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfigFile {
    pub source: SourceSpec,
    pub anchors: Vec<ModelConfig>,
    pub edges: Vec<DistillConfig>,
    #[serde(default)]
    pub bridge: Option<BridgeStage>,
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub precision: Option<DType>,
}

impl ChainConfigFile {
    pub fn chain_spec(&self) -> ChainSpec {
        ChainSpec {
            source: self.source.clone(),
            anchors: self.anchors.clone(),
            edges: self.edges.clone(),
            bridge: self.bridge.clone(),
        }
    }

    /// Replaces every seed in the file with `seed`.
    pub fn override_seeds(&mut self, seed: u64) {
        self.corpus.seed = seed;
        for e in &mut self.edges {
            e.seed = seed;
        }
        if let SourceSpec::Recipe(r) = &mut self.source {
            r.init_seed = seed;
            r.train.seed = seed;
        }
        if let Some(b) = &mut self.bridge {
            b.spec.seed = seed;
            b.train.seed = seed;
        }
    }
}

/// JSON text from either an inline document (starting with `{`) or a file.
pub fn json_text(arg: &str) -> anyhow::Result<(String, String)> {
    if arg.trim_start().starts_with('{') {
        Ok((arg.to_string(), "inline JSON".to_string()))
    } else {
        let text = std::fs::read_to_string(arg).with_context(|| format!("cannot read {arg}"))?;
        Ok((text, arg.to_string()))
    }
}

/// Parses JSON, reporting the line, column and offending field on failure.
pub fn parse_json<T: DeserializeOwned>(text: &str, origin: &str) -> anyhow::Result<T> {
    serde_json::from_str(text)
        .map_err(|e| anyhow!("{origin}: line {}, column {}: {e}", e.line(), e.column()))
}

pub fn load_json<T: DeserializeOwned>(arg: &str) -> anyhow::Result<T> {
    let (text, origin) = json_text(arg)?;
    parse_json(&text, &origin)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_field_is_located() {
        let text = "{\n  \"kind\": \"markov\",\n  \"sede\": 3\n}";
        let err = parse_json::<CorpusSpec>(text, "c.json")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 3"), "{err}");
        assert!(err.contains("sede"), "{err}");
    }

    #[test]
    fn corpus_kinds_build() {
        let spec: CorpusSpec = parse_json(
            r#"{"kind": "markov", "seed": 2, "params": {"n_docs": 10, "doc_len": 20}}"#,
            "x",
        )
        .unwrap();
        let c = spec.build(Path::new(".")).unwrap();
        assert_eq!(c.documents().len(), 10);
        let spec: CorpusSpec = parse_json(r#"{"kind": "file"}"#, "x").unwrap();
        assert!(spec.build(Path::new(".")).is_err());
    }
}
