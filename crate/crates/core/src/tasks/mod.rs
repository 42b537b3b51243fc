//! Classification tasks: prompt templates with placeholder rendering,
//! datasets with disjoint shot-pool/eval splits, few-shot prompt assembly,
//! and JSON-lines loaders for externally supplied items.

pub mod synth;

use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("template {id}: body must end with the {{answer}} placeholder")]
    BodyMissingAnswer { id: String },
    #[error("item {id}: no options")]
    EmptyOptions { id: usize },
    #[error("item {id}: gold index {gold} out of range for {count} options")]
    BadGold { id: usize, gold: usize, count: usize },
    #[error("duplicate item id {0}")]
    DuplicateId(usize),
    #[error("item {0} appears in both the train pool and the eval split")]
    OverlappingSplits(usize),
    #[error("query item {id} appears among the shots")]
    QueryAmongShots { id: usize },
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A prompt layout: fixed instruction, a per-item body with `{context}`,
/// `{question}`, `{options}` and a trailing `{answer}` slot, and the
/// separator placed between blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub instruction: String,
    pub body: String,
    pub separator: String,
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<(), TaskError> {
        if !self.body.ends_with("{answer}") {
            return Err(TaskError::BodyMissingAnswer {
                id: self.id.clone(),
            });
        }
        Ok(())
    }

    fn fill(&self, question: &str, item: &ClassItem, answer: Option<&str>) -> String {
        let options = item.options.join(" / ");
        self.body
            .replace("{context}", &item.context)
            .replace("{question}", question)
            .replace("{options}", &options)
            .replace("{answer}", answer.unwrap_or(""))
    }

    /// A solved block: the answer slot carries the gold option text.
    pub fn render_solved(&self, question: &str, item: &ClassItem) -> String {
        self.fill(question, item, Some(&item.options[item.gold]))
    }

    /// The query form: everything up to and including the answer label, with
    /// the slot left empty for the model to continue.
    pub fn render_query(&self, question: &str, item: &ClassItem) -> String {
        self.fill(question, item, None)
    }
}

/// One multiple-choice item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassItem {
    pub id: usize,
    pub context: String,
    pub options: Vec<String>,
    pub gold: usize,
}

impl ClassItem {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.options.is_empty() {
            return Err(TaskError::EmptyOptions { id: self.id });
        }
        if self.gold >= self.options.len() {
            return Err(TaskError::BadGold {
                id: self.id,
                gold: self.gold,
                count: self.options.len(),
            });
        }
        Ok(())
    }

    pub fn gold_text(&self) -> &str {
        &self.options[self.gold]
    }
}

/// A task: a fixed question line shared by all items, a train pool that
/// few-shot examples are drawn from, and a held-out eval split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub id: String,
    pub question: String,
    pub train: Vec<ClassItem>,
    pub eval: Vec<ClassItem>,
}

impl TaskDataset {
    pub fn validate(&self) -> Result<(), TaskError> {
        let mut seen = std::collections::BTreeSet::new();
        for item in self.train.iter().chain(&self.eval) {
            item.validate()?;
            if !seen.insert(item.id) {
                return Err(TaskError::DuplicateId(item.id));
            }
        }
        let train_ids: std::collections::BTreeSet<_> =
            self.train.iter().map(|i| i.id).collect();
        if let Some(overlap) = self.eval.iter().find(|i| train_ids.contains(&i.id)) {
            return Err(TaskError::OverlappingSplits(overlap.id));
        }
        Ok(())
    }
}

/// Instruction, then each solved shot, then the open query, all joined by the
/// template separator.
pub fn assemble_few_shot(
    template: &PromptTemplate,
    question: &str,
    shots: &[&ClassItem],
    query: &ClassItem,
) -> Result<String, TaskError> {
    if shots.iter().any(|s| s.id == query.id) {
        return Err(TaskError::QueryAmongShots { id: query.id });
    }
    let mut parts = Vec::with_capacity(shots.len() + 2);
    parts.push(template.instruction.clone());
    parts.extend(shots.iter().map(|s| template.render_solved(question, s)));
    parts.push(template.render_query(question, query));
    Ok(parts.join(&template.separator))
}

#[derive(Deserialize)]
struct RawClassItem {
    context: String,
    options: Vec<String>,
    gold: usize,
}

/// JSON-lines classification items `{context, options[], gold}`; ids are
/// assigned from line numbers, blank lines skipped.
pub fn load_class_items(reader: impl BufRead) -> Result<Vec<ClassItem>, TaskError> {
    let mut items = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawClassItem = serde_json::from_str(&line).map_err(|source| TaskError::Json {
            line: lineno + 1,
            source,
        })?;
        let item = ClassItem {
            id: lineno,
            context: raw.context,
            options: raw.options,
            gold: raw.gold,
        };
        item.validate()?;
        items.push(item);
    }
    Ok(items)
}

#[derive(Deserialize)]
struct RawTextItem {
    text: String,
}

/// JSON-lines language-model corpus `{text}`; lines are joined with newlines.
pub fn load_corpus(reader: impl BufRead) -> Result<String, TaskError> {
    let mut texts = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawTextItem = serde_json::from_str(&line).map_err(|source| TaskError::Json {
            line: lineno + 1,
            source,
        })?;
        texts.push(raw.text);
    }
    Ok(texts.join("\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn template() -> PromptTemplate {
        PromptTemplate {
            id: "t".into(),
            instruction: "Answer each one.".into(),
            body: "In: {context}\nOut: {answer}".into(),
            separator: "\n\n".into(),
        }
    }

    fn item(id: usize, context: &str, gold: usize) -> ClassItem {
        ClassItem {
            id,
            context: context.into(),
            options: vec!["aa".into(), "bb".into()],
            gold,
        }
    }

    #[test]
    fn zero_shots_is_instruction_plus_query() {
        let got = assemble_few_shot(&template(), "", &[], &item(0, "x", 0)).unwrap();
        assert_eq!(got, "Answer each one.\n\nIn: x\nOut: ");
    }

    #[test]
    fn two_shots_give_two_solved_blocks_before_the_query() {
        let shots = [item(1, "p", 0), item(2, "q", 1)];
        let refs: Vec<&ClassItem> = shots.iter().collect();
        let got = assemble_few_shot(&template(), "", &refs, &item(3, "r", 0)).unwrap();
        let blocks: Vec<&str> = got.split("\n\n").collect();
        assert_eq!(blocks.len(), 4);
        assert_eq!(blocks[1], "In: p\nOut: aa");
        assert_eq!(blocks[2], "In: q\nOut: bb");
        assert_eq!(blocks[3], "In: r\nOut: ");
    }

    #[test]
    fn assembly_is_byte_stable() {
        let shots = [item(1, "left", 1)];
        let refs: Vec<&ClassItem> = shots.iter().collect();
        let a = assemble_few_shot(&template(), "q?", &refs, &item(2, "right", 0)).unwrap();
        let b = assemble_few_shot(&template(), "q?", &refs, &item(2, "right", 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, "Answer each one.\n\nIn: left\nOut: bb\n\nIn: right\nOut: ");
    }

    #[test]
    fn query_among_shots_is_rejected() {
        let shots = [item(7, "x", 0)];
        let refs: Vec<&ClassItem> = shots.iter().collect();
        assert!(matches!(
            assemble_few_shot(&template(), "", &refs, &item(7, "x", 0)),
            Err(TaskError::QueryAmongShots { id: 7 })
        ));
    }

    #[test]
    fn question_and_options_placeholders_render() {
        let t = PromptTemplate {
            id: "q".into(),
            instruction: "i".into(),
            body: "C: {context} Q: {question} O: {options} A: {answer}".into(),
            separator: "\n".into(),
        };
        let got = t.render_solved("why?", &item(0, "ctx", 1));
        assert_eq!(got, "C: ctx Q: why? O: aa / bb A: bb");
        assert_eq!(
            t.render_query("why?", &item(0, "ctx", 1)),
            "C: ctx Q: why? O: aa / bb A: "
        );
    }

    #[test]
    fn template_and_item_validation() {
        let mut t = template();
        t.body = "{answer} then {context}".into();
        assert!(matches!(
            t.validate(),
            Err(TaskError::BodyMissingAnswer { .. })
        ));
        assert!(template().validate().is_ok());

        let bad = ClassItem {
            id: 0,
            context: String::new(),
            options: vec![],
            gold: 0,
        };
        assert!(matches!(bad.validate(), Err(TaskError::EmptyOptions { .. })));
        let bad = item(0, "x", 2);
        assert!(matches!(
            bad.validate(),
            Err(TaskError::BadGold { gold: 2, count: 2, .. })
        ));
    }

    #[test]
    fn dataset_split_validation() {
        let ok = TaskDataset {
            id: "d".into(),
            question: String::new(),
            train: vec![item(0, "a", 0)],
            eval: vec![item(1, "b", 1)],
        };
        ok.validate().unwrap();
        let overlapping = TaskDataset {
            eval: vec![item(0, "b", 1)],
            ..ok.clone()
        };
        assert!(matches!(
            overlapping.validate(),
            Err(TaskError::DuplicateId(0))
        ));
    }

    #[test]
    fn jsonl_items_parse_and_validate() {
        let src = "\
{\"context\": \"c1\", \"options\": [\"x\", \"y\"], \"gold\": 1}\n\
\n\
{\"context\": \"c2\", \"options\": [\"x\"], \"gold\": 0}\n";
        let items = load_class_items(src.as_bytes()).unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].id, 0);
        assert_eq!(items[0].gold_text(), "y");
        assert_eq!(items[1].id, 2); // blank line keeps line numbering

        let bad = "{\"context\": \"c\", \"options\": [\"x\"], \"gold\": 3}\n";
        assert!(matches!(
            load_class_items(bad.as_bytes()),
            Err(TaskError::BadGold { .. })
        ));
        let mangled = "not json\n";
        assert!(matches!(
            load_class_items(mangled.as_bytes()),
            Err(TaskError::Json { line: 1, .. })
        ));
    }

    #[test]
    fn jsonl_corpus_joins_lines() {
        let src = "{\"text\": \"first\"}\n{\"text\": \"second\"}\n";
        assert_eq!(load_corpus(src.as_bytes()).unwrap(), "first\nsecond");
    }
}
