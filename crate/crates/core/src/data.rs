//! Synthetic shortcut benchmarks: feature generation, rule labels, the fixed
//! token templates and JSON-lines persistence.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numeric::Rng;

pub const TRAIN_SIZE: usize = 2000;
pub const VAL_SIZE: usize = 500;
pub const TEST_SIZE: usize = 500;
/// Share of train samples that follow the shortcut.
pub const SHORTCUT_SHARE: f64 = 0.70;
/// Share of distinct feature points per group reserved for the test pool.
pub const TEST_POOL_SHARE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    MathArithmetic,
    FinancialAnalysis,
    CausalReasoning,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::MathArithmetic, Task::FinancialAnalysis, Task::CausalReasoning];

    pub fn name(self) -> &'static str {
        match self {
            Task::MathArithmetic => "math_arithmetic",
            Task::FinancialAnalysis => "financial_analysis",
            Task::CausalReasoning => "causal_reasoning",
        }
    }

    pub fn feature_names(self) -> &'static [&'static str] {
        match self {
            Task::MathArithmetic => &["a", "b"],
            Task::FinancialAnalysis => &["revenue", "margin", "debt", "growth"],
            Task::CausalReasoning => &["x", "z", "corr"],
        }
    }

    fn index(self) -> u64 {
        match self {
            Task::MathArithmetic => 0,
            Task::FinancialAnalysis => 1,
            Task::CausalReasoning => 2,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "math" | "math_arithmetic" => Ok(Task::MathArithmetic),
            "financial" | "financial_analysis" => Ok(Task::FinancialAnalysis),
            "causal" | "causal_reasoning" => Ok(Task::CausalReasoning),
            other => Err(invalid(format!("unknown task `{other}`"))),
        }
    }
}

/// How the shortcut-following share of the train set is labelled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Every label comes from the true rule; the shortcut share is drawn from
    /// the region where both rules agree.
    #[default]
    TrueRule,
    /// The shortcut share is labelled by the shortcut rule, the rest by the
    /// true rule; features are uniform over the train pool.
    ShortcutLabels,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    TestClean,
    TestPerturbed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: Task,
    pub feature_names: Vec<String>,
    /// Inclusive integer range of every feature.
    pub feature_range: (u8, u8),
    pub label_mode: LabelMode,
}

impl TaskSpec {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            feature_names: task.feature_names().iter().map(|s| s.to_string()).collect(),
            feature_range: (0, 9),
            label_mode: LabelMode::TrueRule,
        }
    }

    pub fn with_label_mode(mut self, mode: LabelMode) -> Self {
        self.label_mode = mode;
        self
    }

    pub fn true_rule(&self, f: &[u8]) -> bool {
        match self.task {
            Task::MathArithmetic => f[0] as u32 + f[1] as u32 >= 10,
            Task::FinancialAnalysis => f[1] >= 5 && f[2] < 5,
            Task::CausalReasoning => f[0] >= 5 && f[1] < 3,
        }
    }

    pub fn shortcut_rule(&self, f: &[u8]) -> bool {
        match self.task {
            Task::MathArithmetic => f[0] >= 5,
            Task::FinancialAnalysis => f[0] >= 5,
            Task::CausalReasoning => f[2] >= 5,
        }
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.feature_range;
        if lo > hi || hi > 9 {
            return Err(invalid(format!("feature range {lo}..={hi} must lie in 0..=9")));
        }
        if self.feature_names.len() != self.task.feature_names().len() {
            return Err(invalid("feature name count does not match the task"));
        }
        Ok(())
    }

    /// Every feature vector in the range, in lexicographic order.
    pub fn feature_space(&self) -> Vec<Vec<u8>> {
        let (lo, hi) = self.feature_range;
        let mut out = vec![vec![]];
        for _ in 0..self.feature_names.len() {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (lo..=hi).map(move |v| {
                        let mut q = p.clone();
                        q.push(v);
                        q
                    })
                })
                .collect();
        }
        out
    }
}

/// Half-open token index interval, serialized as `[start, end]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span(pub usize, pub usize);

impl Span {
    pub fn len(self) -> usize {
        self.1.saturating_sub(self.0)
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    pub fn range(self) -> std::ops::Range<usize> {
        self.0..self.1
    }

    pub fn contains(self, i: usize) -> bool {
        self.0 <= i && i < self.1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub task: Task,
    pub split: Split,
    pub features: Vec<u8>,
    pub true_label: u8,
    /// Label the model is trained on. Equals `true_label` except for the
    /// shortcut-labelled share under [`LabelMode::ShortcutLabels`].
    pub target_label: u8,
    pub shortcut_consistent: bool,
    /// `(shortcut rule output, target label)`
    pub group: (u8, u8),
    pub token_ids: Vec<usize>,
    pub input_span: Span,
    pub reasoning_span: Span,
    pub answer_span: Span,
}

impl Sample {
    /// Index of the answer token.
    pub fn answer_position(&self) -> usize {
        self.answer_span.0
    }

    pub fn answer_token(&self) -> usize {
        self.token_ids[self.answer_span.0]
    }

    /// Group index in `0..4`: `2 * shortcut + target`.
    pub fn group_index(&self) -> usize {
        2 * self.group.0 as usize + self.group.1 as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub spec: TaskSpec,
    pub seed: u64,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test_clean: Vec<Sample>,
    pub test_perturbed: Vec<Sample>,
}

impl DatasetSplit {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::TestClean => &self.test_clean,
            Split::TestPerturbed => &self.test_perturbed,
        }
    }
}

/// Fixed vocabulary shared by the three tasks. Digits come first so that the
/// token for `"0"` has id 0.
pub struct Vocab;

const TOKENS: [&str; 29] = [
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "<SEP>", "<EOS>", "=", ";", "answer", "sum", "a", "b",
    "revenue", "margin", "debt", "growth", "margin_ok", "debt_ok", "x", "z", "corr", "x_ok", "z_ok",
];

impl Vocab {
    pub const SIZE: usize = TOKENS.len();
    pub const SEP: usize = 10;
    pub const EOS: usize = 11;
    pub const EQ: usize = 12;
    pub const SEMI: usize = 13;
    pub const ANSWER: usize = 14;
    /// Longest rendered sequence over all tasks.
    pub const MAX_LEN: usize = 32;

    pub fn tokens() -> &'static [&'static str] {
        &TOKENS
    }

    pub fn id(token: &str) -> Option<usize> {
        TOKENS.iter().position(|t| *t == token)
    }

    pub fn token(id: usize) -> Option<&'static str> {
        TOKENS.get(id).copied()
    }

    pub fn digit(d: u8) -> usize {
        d as usize
    }

    pub fn decode(ids: &[usize]) -> String {
        ids.iter().map(|&i| Vocab::token(i).unwrap_or("<UNK>")).collect::<Vec<_>>().join(" ")
    }
}

fn tok(s: &str) -> usize {
    Vocab::id(s).expect("template token in vocabulary")
}

/// Rendered token sequence with its spans.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rendered {
    pub token_ids: Vec<usize>,
    pub input_span: Span,
    pub reasoning_span: Span,
    pub answer_span: Span,
}

fn push_digits(out: &mut Vec<usize>, v: u32) {
    if v >= 10 {
        out.push(Vocab::digit((v / 10) as u8));
    }
    out.push(Vocab::digit((v % 10) as u8));
}

fn intermediate_steps(task: Task, f: &[u8]) -> Vec<(&'static str, u32)> {
    match task {
        Task::MathArithmetic => vec![("sum", f[0] as u32 + f[1] as u32)],
        Task::FinancialAnalysis => vec![("margin_ok", (f[1] >= 5) as u32), ("debt_ok", (f[2] < 5) as u32)],
        Task::CausalReasoning => vec![("x_ok", (f[0] >= 5) as u32), ("z_ok", (f[1] < 3) as u32)],
    }
}

/// `name = v ; ... <SEP> step = v ; ... answer = label <EOS>`
pub fn render_sample(spec: &TaskSpec, features: &[u8], label: u8) -> Result<Rendered> {
    let (lo, hi) = spec.feature_range;
    if features.len() != spec.feature_names.len() || features.iter().any(|&v| v < lo || v > hi) {
        return Err(invalid(format!("features {features:?} out of range for {}", spec.task)));
    }
    if label > 1 {
        return Err(invalid(format!("label {label} is not binary")));
    }
    let mut ids = Vec::with_capacity(Vocab::MAX_LEN);
    for (name, &v) in spec.feature_names.iter().zip(features) {
        ids.extend([tok(name), Vocab::EQ, Vocab::digit(v), Vocab::SEMI]);
    }
    ids.push(Vocab::SEP);
    let input_span = Span(0, ids.len());
    let r0 = ids.len();
    for (name, v) in intermediate_steps(spec.task, features) {
        ids.extend([tok(name), Vocab::EQ]);
        push_digits(&mut ids, v);
        ids.push(Vocab::SEMI);
    }
    let reasoning_span = Span(r0, ids.len());
    ids.extend([Vocab::ANSWER, Vocab::EQ]);
    let answer_span = Span(ids.len(), ids.len() + 1);
    ids.push(Vocab::digit(label));
    ids.push(Vocab::EOS);
    Ok(Rendered { token_ids: ids, input_span, reasoning_span, answer_span })
}

/// Inverse of [`render_sample`]: recovers the task, features and label.
pub fn parse_sample(ids: &[usize]) -> Result<(Task, Vec<u8>, u8)> {
    let bad = |why: &str| Error::Invalid(format!("unparseable sequence ({why}): {}", Vocab::decode(ids)));
    let sep = ids.iter().position(|&t| t == Vocab::SEP).ok_or_else(|| bad("no <SEP>"))?;
    let (head, tail) = (&ids[..sep], &ids[sep + 1..]);
    if head.len() % 4 != 0 {
        return Err(bad("input length"));
    }
    let mut names = Vec::new();
    let mut features = Vec::new();
    for chunk in head.chunks(4) {
        let d = chunk[2];
        if chunk[1] != Vocab::EQ || chunk[3] != Vocab::SEMI || d > 9 {
            return Err(bad("input clause"));
        }
        names.push(Vocab::token(chunk[0]).ok_or_else(|| bad("token id"))?);
        features.push(d as u8);
    }
    let task = Task::ALL
        .into_iter()
        .find(|t| t.feature_names() == names.as_slice())
        .ok_or_else(|| bad("feature names"))?;
    let n = tail.len();
    if n < 4 || tail[n - 1] != Vocab::EOS || tail[n - 4] != Vocab::ANSWER || tail[n - 3] != Vocab::EQ || tail[n - 2] > 1 {
        return Err(bad("answer clause"));
    }
    let label = tail[n - 2] as u8;
    let spec = TaskSpec::new(task);
    let rendered = render_sample(&spec, &features, label)?;
    if rendered.token_ids != ids {
        return Err(bad("reasoning does not match features"));
    }
    Ok((task, features, label))
}

/// Answer implied by the intermediate values in a reasoning span under the
/// task's true rule, or `None` when the tokens do not form valid steps.
pub fn answer_from_reasoning(task: Task, reasoning: &[usize]) -> Option<u8> {
    let mut values = Vec::new();
    let mut rest = reasoning;
    for (name, _) in intermediate_steps(task, &vec![0; task.feature_names().len()]) {
        if rest.len() < 4 || rest[0] != tok(name) || rest[1] != Vocab::EQ {
            return None;
        }
        rest = &rest[2..];
        let end = rest.iter().position(|&t| t == Vocab::SEMI)?;
        if end == 0 || end > 2 || rest[..end].iter().any(|&d| d > 9) {
            return None;
        }
        values.push(rest[..end].iter().fold(0u32, |acc, &d| acc * 10 + d as u32));
        rest = &rest[end + 1..];
    }
    if !rest.is_empty() {
        return None;
    }
    let yes = match task {
        Task::MathArithmetic => values[0] >= 10,
        _ => values.iter().all(|&v| v == 1),
    };
    Some(yes as u8)
}

fn make_sample(spec: &TaskSpec, split: Split, features: &[u8], target: bool, consistent: bool) -> Result<Sample> {
    let true_label = spec.true_rule(features) as u8;
    let shortcut = spec.shortcut_rule(features) as u8;
    let target_label = target as u8;
    let r = render_sample(spec, features, target_label)?;
    Ok(Sample {
        task: spec.task,
        split,
        features: features.to_vec(),
        true_label,
        target_label,
        shortcut_consistent: consistent,
        group: (shortcut, target_label),
        token_ids: r.token_ids,
        input_span: r.input_span,
        reasoning_span: r.reasoning_span,
        answer_span: r.answer_span,
    })
}

fn draw<'a>(rng: &mut Rng, pool: &'a [Vec<u8>], what: &'static str) -> Result<&'a [u8]> {
    if pool.is_empty() {
        return Err(Error::Empty(what));
    }
    Ok(&pool[rng.below(pool.len())])
}

/// Generates the four splits for one task. Deterministic per `(task, seed)`.
///
/// Distinct feature points are grouped by `(shortcut, true)` rule outputs and
/// a quarter of each group is reserved for the test splits, so no feature
/// vector is shared between test and train/val.
pub fn generate_dataset(spec: &TaskSpec, seed: u64) -> Result<DatasetSplit> {
    spec.validate()?;
    let mut rng = Rng::with_stream_id(seed, 0x100 + spec.task.index());
    let mut buckets: [Vec<Vec<u8>>; 4] = Default::default();
    for f in spec.feature_space() {
        let g = 2 * spec.shortcut_rule(&f) as usize + spec.true_rule(&f) as usize;
        buckets[g].push(f);
    }
    let mut test_agree = Vec::new();
    let mut test_disagree = Vec::new();
    let mut pool_agree = Vec::new();
    let mut pool_disagree = Vec::new();
    for (g, bucket) in buckets.iter_mut().enumerate() {
        rng.shuffle(bucket);
        let n = bucket.len();
        let k = if n < 2 { n } else { ((n as f64 * TEST_POOL_SHARE).round() as usize).clamp(1, n - 1) };
        let agree = g == 0 || g == 3;
        let (test, pool) = if agree { (&mut test_agree, &mut pool_agree) } else { (&mut test_disagree, &mut pool_disagree) };
        test.extend_from_slice(&bucket[..k]);
        pool.extend_from_slice(&bucket[k..]);
    }
    let pool_all: Vec<Vec<u8>> = pool_agree.iter().chain(&pool_disagree).cloned().collect();

    let n_short = (TRAIN_SIZE as f64 * SHORTCUT_SHARE).round() as usize;
    let mut train = Vec::with_capacity(TRAIN_SIZE);
    match spec.label_mode {
        LabelMode::TrueRule => {
            for i in 0..TRAIN_SIZE {
                let shortcut_slice = i < n_short;
                let pool = if shortcut_slice { &pool_agree } else { &pool_disagree };
                let f = draw(&mut rng, pool, if shortcut_slice { "agreement region" } else { "disagreement region" })?;
                train.push(make_sample(spec, Split::Train, f, spec.true_rule(f), shortcut_slice)?);
            }
        }
        LabelMode::ShortcutLabels => {
            for i in 0..TRAIN_SIZE {
                let shortcut_slice = i < n_short;
                let f = draw(&mut rng, &pool_all, "train pool")?;
                let target = if shortcut_slice { spec.shortcut_rule(f) } else { spec.true_rule(f) };
                train.push(make_sample(spec, Split::Train, f, target, shortcut_slice)?);
            }
        }
    }
    rng.shuffle(&mut train);

    let mut true_split = |split: Split, pool: &[Vec<u8>], n: usize, what: &'static str| -> Result<Vec<Sample>> {
        (0..n)
            .map(|_| {
                let f = draw(&mut rng, pool, what)?;
                let consistent = spec.shortcut_rule(f) == spec.true_rule(f);
                make_sample(spec, split, f, spec.true_rule(f), consistent)
            })
            .collect()
    };
    let val = true_split(Split::Val, &pool_all, VAL_SIZE, "train pool")?;
    let test_clean = true_split(Split::TestClean, &test_agree, TEST_SIZE, "agreement region")?;
    let test_perturbed = true_split(Split::TestPerturbed, &test_disagree, TEST_SIZE, "disagreement region")?;
    Ok(DatasetSplit { spec: spec.clone(), seed, train, val, test_clean, test_perturbed })
}

/// Ground-truth shortcut flags over the train set.
pub fn shortcut_ground_truth(split: &DatasetSplit) -> Result<Vec<bool>> {
    if split.train.is_empty() {
        return Err(Error::Empty("train split"));
    }
    Ok(split.train.iter().map(|s| s.shortcut_consistent).collect())
}

const SPLIT_FILES: [(Split, &str); 4] = [
    (Split::Train, "train.jsonl"),
    (Split::Val, "val.jsonl"),
    (Split::TestClean, "test_clean.jsonl"),
    (Split::TestPerturbed, "test_perturbed.jsonl"),
];

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: TaskSpec,
    seed: u64,
}

/// Writes one JSON-lines file per split, `vocab.json` and `dataset.json`.
pub fn write_dataset(split: &DatasetSplit, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (s, name) in SPLIT_FILES {
        let mut w = BufWriter::new(fs::File::create(dir.join(name))?);
        for sample in split.split(s) {
            serde_json::to_writer(&mut w, sample)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    let vocab: serde_json::Map<String, serde_json::Value> =
        TOKENS.iter().enumerate().map(|(i, t)| (t.to_string(), serde_json::Value::from(i))).collect();
    fs::write(dir.join("vocab.json"), serde_json::to_string_pretty(&vocab)? + "\n")?;
    let manifest = Manifest { spec: split.spec.clone(), seed: split.seed };
    fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<DatasetSplit> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("dataset.json"))?)?;
    let vocab: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(dir.join("vocab.json"))?)?;
    for (i, t) in TOKENS.iter().enumerate() {
        if vocab.get(*t).and_then(|v| v.as_u64()) != Some(i as u64) {
            return Err(invalid(format!("vocabulary mismatch at token `{t}`")));
        }
    }
    let mut parts: Vec<Vec<Sample>> = Vec::new();
    for (_, name) in SPLIT_FILES {
        let f = BufReader::new(fs::File::open(dir.join(name))?);
        let mut v = Vec::new();
        for line in f.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                v.push(serde_json::from_str(&line)?);
            }
        }
        parts.push(v);
    }
    let test_perturbed = parts.pop().unwrap_or_default();
    let test_clean = parts.pop().unwrap_or_default();
    let val = parts.pop().unwrap_or_default();
    let train = parts.pop().unwrap_or_default();
    Ok(DatasetSplit { spec: manifest.spec, seed: manifest.seed, train, val, test_clean, test_perturbed })
}
