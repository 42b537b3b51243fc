//! Four generated classification tasks of graded difficulty, each paired
//! with a prompt template whose field labels match the task. They stand in
//! for downloaded benchmarks so the whole pipeline runs offline.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{ClassItem, PromptTemplate, TaskDataset};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthTask {
    /// Continue an alternating two-letter pattern.
    Pattern,
    /// Copy the relevant field, ignoring a labelled distractor.
    CopyField,
    /// Say whether the number of stars is even or odd.
    ParityMark,
    /// Name the word following the bracketed word.
    KeyQa,
}

impl SynthTask {
    pub const ALL: [SynthTask; 4] = [
        SynthTask::Pattern,
        SynthTask::CopyField,
        SynthTask::ParityMark,
        SynthTask::KeyQa,
    ];

    pub fn id(self) -> &'static str {
        match self {
            SynthTask::Pattern => "pattern",
            SynthTask::CopyField => "copyfield",
            SynthTask::ParityMark => "paritymark",
            SynthTask::KeyQa => "keyqa",
        }
    }

    pub fn from_id(id: &str) -> Option<SynthTask> {
        SynthTask::ALL.iter().copied().find(|t| t.id() == id)
    }

    fn stream(self) -> u64 {
        match self {
            SynthTask::Pattern => 1,
            SynthTask::CopyField => 2,
            SynthTask::ParityMark => 3,
            SynthTask::KeyQa => 4,
        }
    }
}

/// The template whose labels the task's items were written for.
pub fn template(task: SynthTask) -> PromptTemplate {
    let (instruction, body) = match task {
        SynthTask::Pattern => (
            "Each line shows an alternating letter pattern. Give the next letter.",
            "P: {context}\nN: {answer}",
        ),
        SynthTask::CopyField => (
            "Each record has a relevant field R and a distractor field C. Give the value of R.",
            "{context}\nV: {answer}",
        ),
        SynthTask::ParityMark => (
            "Count the stars in each sequence and say whether the count is even or odd.",
            "S: {context}\nY: {answer}",
        ),
        SynthTask::KeyQa => (
            "Read each word list and answer the question.",
            "T: {context}\nQ: {question}\nW: {answer}",
        ),
    };
    PromptTemplate {
        id: task.id().to_string(),
        instruction: instruction.to_string(),
        body: body.to_string(),
        separator: "\n\n".to_string(),
    }
}

pub fn build(task: SynthTask, seed: u64) -> TaskDataset {
    let items = match task {
        SynthTask::Pattern => pattern_items(),
        SynthTask::CopyField => copyfield_items(),
        SynthTask::ParityMark => paritymark_items(seed),
        SynthTask::KeyQa => keyqa_items(seed),
    };
    let question = match task {
        SynthTask::KeyQa => "Which word follows the bracketed word?",
        _ => "",
    };
    // Every fifth item is held out, so both splits cover the combinatorial
    // range evenly and the ids stay disjoint by construction.
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (i, item) in items.into_iter().enumerate() {
        if i % 5 == 0 {
            eval.push(item);
        } else {
            train.push(item);
        }
    }
    TaskDataset {
        id: task.id().to_string(),
        question: question.to_string(),
        train,
        eval,
    }
}

/// All four tasks with their matched templates.
pub fn suite(seed: u64) -> Vec<(TaskDataset, PromptTemplate)> {
    SynthTask::ALL
        .iter()
        .map(|&t| (build(t, rng::mix(seed, t.stream())), template(t)))
        .collect()
}

/// Deterministic held-out text for perplexity and calibration: solved
/// renderings drawn across the whole suite, one per line.
pub fn corpus(seed: u64, lines: usize) -> String {
    let suite = suite(seed);
    let mut rng = rng::seeded(rng::mix(seed, 0x63_6f_72));
    let mut out = Vec::with_capacity(lines);
    for _ in 0..lines {
        let (task, template) = &suite[rng.gen_range(0..suite.len())];
        let item = &task.train[rng.gen_range(0..task.train.len())];
        out.push(template.render_solved(&task.question, item));
    }
    out.join("\n")
}

/// Sorted two-option list plus the gold index of `answer` within it.
fn two_options(answer: &str, other: &str) -> (Vec<String>, usize) {
    let mut options = vec![answer.to_string(), other.to_string()];
    options.sort();
    let gold = options.iter().position(|o| o == answer).expect("answer present");
    (options, gold)
}

fn letters(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| char::from(b'a' + i as u8).to_string())
        .collect()
}

/// One item per ordered letter pair: "x y x y" continues with the letter two
/// places back. Purely combinatorial, so the seed plays no role.
fn pattern_items() -> Vec<ClassItem> {
    let alphabet = letters(16);
    let mut items = Vec::new();
    for x in &alphabet {
        for y in &alphabet {
            if x == y {
                continue;
            }
            let len = 4 + items.len() % 4;
            let seq: Vec<&str> = (0..len)
                .map(|i| if i % 2 == 0 { x.as_str() } else { y.as_str() })
                .collect();
            let next = if len % 2 == 0 { x } else { y };
            let (options, gold) = two_options(next, if next == x { y } else { x });
            items.push(ClassItem {
                id: items.len(),
                context: seq.join(" "),
                options,
                gold,
            });
        }
    }
    items
}

/// "R: r C: c" answers with r; every ordered pair of distinct letters.
fn copyfield_items() -> Vec<ClassItem> {
    let alphabet = letters(20);
    let mut items = Vec::new();
    for r in &alphabet {
        for c in &alphabet {
            if r == c {
                continue;
            }
            let (options, gold) = two_options(r, c);
            items.push(ClassItem {
                id: items.len(),
                context: format!("R: {r} C: {c}"),
                options,
                gold,
            });
        }
    }
    items
}

/// Star/dot sequences with 1..=9 stars, 18 distinct layouts each.
fn paritymark_items(seed: u64) -> Vec<ClassItem> {
    let mut rng = rng::seeded(rng::mix(seed, 0x70_61_72));
    let mut items = Vec::new();
    for stars in 1..=9usize {
        let mut seen = BTreeSet::new();
        while seen.len() < 18 {
            let dots = rng.gen_range(0..=5);
            let mut marks = vec!["*"; stars];
            marks.extend(std::iter::repeat(".").take(dots));
            marks.shuffle(&mut rng);
            let context = marks.join(" ");
            if !seen.insert(context.clone()) {
                continue;
            }
            let (answer, other) = if stars % 2 == 0 {
                ("even", "odd")
            } else {
                ("odd", "even")
            };
            let (options, gold) = two_options(answer, other);
            items.push(ClassItem {
                id: items.len(),
                context,
                options,
                gold,
            });
        }
    }
    items
}

/// Five-word lists with one bracketed word; the answer is its successor.
fn keyqa_items(seed: u64) -> Vec<ClassItem> {
    const WORDS: [&str; 10] = [
        "ash", "bay", "cod", "dew", "elm", "fig", "gum", "hay", "ivy", "jet",
    ];
    let mut rng = rng::seeded(rng::mix(seed, 0x6b_65_79));
    let mut items = Vec::new();
    let mut seen = BTreeSet::new();
    while items.len() < 200 {
        let mut words: Vec<&str> = WORDS.to_vec();
        words.shuffle(&mut rng);
        words.truncate(5);
        let key = rng.gen_range(0..4);
        let answer = words[key + 1];
        let distractor = loop {
            let w = words[rng.gen_range(0..5)];
            if w != answer {
                break w;
            }
        };
        let context = words
            .iter()
            .enumerate()
            .map(|(i, w)| {
                if i == key {
                    format!("[{w}]")
                } else {
                    (*w).to_string()
                }
            })
            .collect::<Vec<_>>()
            .join(" ");
        if !seen.insert(context.clone()) {
            continue;
        }
        let (options, gold) = two_options(answer, distractor);
        items.push(ClassItem {
            id: items.len(),
            context,
            options,
            gold,
        });
    }
    items
}
