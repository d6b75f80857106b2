//! Task instances, dataset loading and the demo-pool inverted index.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::tokenization::{TokenId, TokenizerError, TokenizerSpec};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: malformed JSON: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: {msg}")]
    Schema { line: usize, msg: String },
    #[error("rating {0} outside 1..=5")]
    Range(i64),
    #[error("duplicate instance id {0:?}")]
    DuplicateId(String),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    MultipleChoice,
}

/// On-disk dataset layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Classification,
    MultipleChoice,
    /// Raw `{"text", "rating"}` rows, converted with [`amazon_rating_to_label`].
    AmazonRatings,
}

impl DatasetFormat {
    pub fn kind(self) -> TaskKind {
        match self {
            DatasetFormat::MultipleChoice => TaskKind::MultipleChoice,
            _ => TaskKind::Classification,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InstanceBody {
    Classification {
        input: String,
        label: String,
    },
    MultipleChoice {
        question: String,
        options: Vec<String>,
        /// 1-based.
        answer: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    #[serde(flatten)]
    pub body: InstanceBody,
}

impl Instance {
    pub fn classification(
        id: impl Into<String>,
        input: impl Into<String>,
        label: impl Into<String>,
    ) -> Self {
        Instance {
            id: id.into(),
            body: InstanceBody::Classification {
                input: input.into(),
                label: label.into(),
            },
        }
    }

    pub fn multiple_choice(
        id: impl Into<String>,
        question: impl Into<String>,
        options: Vec<String>,
        answer: usize,
    ) -> Self {
        Instance {
            id: id.into(),
            body: InstanceBody::MultipleChoice {
                question: question.into(),
                options,
                answer,
            },
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self.body {
            InstanceBody::Classification { .. } => TaskKind::Classification,
            InstanceBody::MultipleChoice { .. } => TaskKind::MultipleChoice,
        }
    }

    /// Input-side text fields, the only fields a cipher touches.
    pub fn input_fields(&self) -> Vec<&str> {
        match &self.body {
            InstanceBody::Classification { input, .. } => vec![input.as_str()],
            InstanceBody::MultipleChoice {
                question, options, ..
            } => std::iter::once(question.as_str())
                .chain(options.iter().map(String::as_str))
                .collect(),
        }
    }

    /// Gold answer as rendered in a prompt: the label, or `(k)`.
    pub fn gold(&self) -> String {
        match &self.body {
            InstanceBody::Classification { label, .. } => label.clone(),
            InstanceBody::MultipleChoice { answer, .. } => format!("({answer})"),
        }
    }

    pub fn label(&self) -> Option<&str> {
        match &self.body {
            InstanceBody::Classification { label, .. } => Some(label),
            InstanceBody::MultipleChoice { .. } => None,
        }
    }

    /// Token ids of every input field, concatenated in field order.
    pub fn input_tokens(&self, tokenizer: &TokenizerSpec) -> Result<Vec<TokenId>, TokenizerError> {
        let mut out = Vec::new();
        for f in self.input_fields() {
            out.extend(tokenizer.encode(f)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RatingLabel {
    Label(&'static str),
    Discard,
}

/// 4–5 stars are positive, 1–2 negative, 3 is dropped.
pub fn amazon_rating_to_label(rating: i64) -> Result<RatingLabel, CorpusError> {
    match rating {
        4 | 5 => Ok(RatingLabel::Label("positive")),
        1 | 2 => Ok(RatingLabel::Label("negative")),
        3 => Ok(RatingLabel::Discard),
        other => Err(CorpusError::Range(other)),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub instances: Vec<Instance>,
    pub discarded: usize,
}

pub fn load_jsonl(path: &Path, format: DatasetFormat) -> Result<LoadReport, CorpusError> {
    parse_jsonl(&fs::read_to_string(path)?, format)
}

/// Parses one JSON object per line; blank lines are skipped. Instances
/// without an `id` get their 1-based line number.
pub fn parse_jsonl(text: &str, format: DatasetFormat) -> Result<LoadReport, CorpusError> {
    let mut report = LoadReport::default();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let schema = |msg: String| CorpusError::Schema { line: lineno, msg };
        let obj = value
            .as_object()
            .ok_or_else(|| schema("expected a JSON object".into()))?;
        let id = match obj.get("id") {
            None | Some(Value::Null) => lineno.to_string(),
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            Some(_) => return Err(schema("`id` must be a string".into())),
        };
        let str_field = |name: &str| -> Result<String, CorpusError> {
            obj.get(name)
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| schema(format!("missing string field `{name}`")))
        };
        let int_field = |name: &str| -> Result<i64, CorpusError> {
            obj.get(name)
                .and_then(Value::as_i64)
                .ok_or_else(|| schema(format!("missing integer field `{name}`")))
        };
        let instance = match format {
            DatasetFormat::Classification => {
                Instance::classification(id, str_field("input")?, str_field("label")?)
            }
            DatasetFormat::AmazonRatings => {
                let rating = int_field("rating")?;
                match amazon_rating_to_label(rating).map_err(|e| schema(e.to_string()))? {
                    RatingLabel::Label(label) => {
                        Instance::classification(id, str_field("text")?, label)
                    }
                    RatingLabel::Discard => {
                        report.discarded += 1;
                        continue;
                    }
                }
            }
            DatasetFormat::MultipleChoice => {
                let question = str_field("question")?;
                let options: Vec<String> = obj
                    .get("options")
                    .and_then(Value::as_array)
                    .ok_or_else(|| schema("missing array field `options`".into()))?
                    .iter()
                    .map(|o| o.as_str().map(str::to_string))
                    .collect::<Option<_>>()
                    .ok_or_else(|| schema("`options` must hold strings".into()))?;
                if !(2..=4).contains(&options.len()) {
                    return Err(schema(format!(
                        "expected 2-4 options, found {}",
                        options.len()
                    )));
                }
                let answer = int_field("answer")?;
                if answer < 1 || answer as usize > options.len() {
                    return Err(schema(format!(
                        "answer {answer} outside 1..={}",
                        options.len()
                    )));
                }
                Instance::multiple_choice(id, question, options, answer as usize)
            }
        };
        report.instances.push(instance);
    }
    Ok(report)
}

/// Checks every classification label against `labels`.
pub fn validate_labels(instances: &[Instance], labels: &[String]) -> Result<(), CorpusError> {
    for (i, inst) in instances.iter().enumerate() {
        if let Some(label) = inst.label() {
            if !labels.iter().any(|l| l == label) {
                return Err(CorpusError::Schema {
                    line: i + 1,
                    msg: format!("label {label:?} not in task label set {labels:?}"),
                });
            }
        }
    }
    Ok(())
}

/// Candidate demonstrations plus an inverted index from original-text token
/// ids to the instances containing them.
#[derive(Clone, Debug)]
pub struct DemoPool {
    instances: Vec<Instance>,
    index: HashMap<TokenId, Vec<usize>>,
    by_id: HashMap<String, usize>,
}

impl DemoPool {
    pub fn build(instances: Vec<Instance>, tokenizer: &TokenizerSpec) -> Result<Self, CorpusError> {
        let mut index: HashMap<TokenId, Vec<usize>> = HashMap::new();
        let mut by_id = HashMap::with_capacity(instances.len());
        for (i, inst) in instances.iter().enumerate() {
            if by_id.insert(inst.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId(inst.id.clone()));
            }
            let unique: BTreeSet<TokenId> = inst.input_tokens(tokenizer)?.into_iter().collect();
            for t in unique {
                index.entry(t).or_default().push(i);
            }
        }
        Ok(DemoPool {
            instances,
            index,
            by_id,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn get(&self, pos: usize) -> &Instance {
        &self.instances[pos]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    /// Positions of instances whose input fields contain `token`, ascending.
    pub fn containing(&self, token: TokenId) -> &[usize] {
        self.index.get(&token).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn containing_ids(&self, token: TokenId) -> BTreeSet<&str> {
        self.containing(token)
            .iter()
            .map(|&i| self.instances[i].id.as_str())
            .collect()
    }

    pub fn indexed_tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.index.keys().copied()
    }
}
