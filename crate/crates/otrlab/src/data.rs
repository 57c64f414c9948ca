//! Vocabularies, examples, synthetic tasks, and corpus loading.
//!
//! Token ids 0..2 are reserved (`PAD`, `BOS`, `EOS`); ids 3.. map one
//! printable character each. An [`Example`] stores a prompt that begins
//! with `BOS` and a response that ends with `EOS`, with the combined length
//! capped by the model context.
//!
//! Three synthetic tasks are built in: modular addition (`"12+7=" ->
//! "19"`), copy, and reverse (`"abc|" -> "abc"` / `"cba"`). Each task draws
//! distinct instances from a counter-keyed stream, so a `(task,
//! split_seed)` pair always reproduces the same train/eval split, and
//! out-of-distribution evaluation uses strictly longer operands or strings
//! than training ever sees.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::rng;
use crate::Result;

/// Padding id (never appears inside encoded examples; exists for fixed-size
/// consumers of the vocabulary).
pub const PAD: usize = 0;
/// Beginning-of-sequence id; every prompt starts with it.
pub const BOS: usize = 1;
/// End-of-sequence id; every response ends with it.
pub const EOS: usize = 2;
/// Number of reserved ids before the first printable symbol.
pub const RESERVED: usize = 3;

/// Character vocabulary with three reserved control ids.
#[derive(Debug, Clone)]
pub struct Vocab {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocab {
    /// Builds a vocabulary from one symbol per character of `symbols`.
    pub fn new(symbols: &str) -> Result<Vocab> {
        let chars: Vec<char> = symbols.chars().collect();
        let mut index = HashMap::new();
        for (i, &c) in chars.iter().enumerate() {
            if c == '\n' || c == '\r' {
                return Err(Error::InvalidInput(
                    "vocabulary symbols may not be line breaks".into(),
                ));
            }
            if index.insert(c, RESERVED + i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate vocabulary symbol {c:?}")));
            }
        }
        Ok(Vocab { symbols: chars, index })
    }

    /// The default vocabulary serving all built-in tasks: digits, the
    /// arithmetic markers, the copy separator, and four letters.
    pub fn default_task() -> Vocab {
        Vocab::new("0123456789+=|abcd").expect("default symbols are distinct")
    }

    /// Total id count, reserved ids included.
    pub fn size(&self) -> usize {
        RESERVED + self.symbols.len()
    }

    /// Encodes text to symbol ids. Control ids are never produced.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .enumerate()
            .map(|(i, c)| {
                self.index
                    .get(&c)
                    .copied()
                    .ok_or(Error::UnknownSymbol { symbol: c, index: i })
            })
            .collect()
    }

    /// Decodes symbol ids back to text. Reserved or out-of-range ids are an
    /// error; `decode(encode(s)) == s` for any encodable `s`.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&id| {
                if id < RESERVED {
                    Err(Error::InvalidInput(format!("cannot decode reserved id {id}")))
                } else {
                    self.symbols
                        .get(id - RESERVED)
                        .copied()
                        .ok_or_else(|| {
                            Error::InvalidInput(format!(
                                "id {id} out of range for vocabulary of {}",
                                self.size()
                            ))
                        })
                }
            })
            .collect()
    }

    /// Decodes for display and comparison: any id without a printable
    /// symbol becomes U+FFFD, so malformed model output never aborts
    /// evaluation (and never matches a well-formed reference).
    pub fn decode_lossy(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| {
                if id >= RESERVED {
                    self.symbols.get(id - RESERVED).copied().unwrap_or('\u{FFFD}')
                } else {
                    '\u{FFFD}'
                }
            })
            .collect()
    }

    /// Writes the vocabulary file: one symbol per line; the line number
    /// (0-based) plus the three reserved ids gives the symbol's id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for &c in &self.symbols {
            let _ = writeln!(out, "{c}");
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Reads a vocabulary file written by [`Vocab::save`].
    pub fn load(path: &Path) -> Result<Vocab> {
        let text = fs::read_to_string(path)?;
        let mut symbols = String::new();
        for (i, line) in text.lines().enumerate() {
            let mut chars = line.chars();
            let c = chars.next().ok_or_else(|| Error::Corpus {
                line: i + 1,
                message: "empty vocabulary line".into(),
            })?;
            if chars.next().is_some() {
                return Err(Error::Corpus {
                    line: i + 1,
                    message: format!("vocabulary line holds more than one symbol: {line:?}"),
                });
            }
            symbols.push(c);
        }
        Vocab::new(&symbols)
    }
}

/// One prompt/response pair in token space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    prompt_ids: Vec<usize>,
    response_ids: Vec<usize>,
}

impl Example {
    /// Builds an example from raw id vectors, enforcing the structural
    /// invariants: the prompt starts with `BOS`, the response ends with
    /// `EOS`, all ids are in range, and the total fits the context.
    pub fn from_ids(
        prompt_ids: Vec<usize>,
        response_ids: Vec<usize>,
        vocab_size: usize,
        context_len: usize,
    ) -> Result<Example> {
        if prompt_ids.first() != Some(&BOS) {
            return Err(Error::InvalidInput("prompt must start with BOS".into()));
        }
        if response_ids.last() != Some(&EOS) {
            return Err(Error::InvalidInput("response must end with EOS".into()));
        }
        let total = prompt_ids.len() + response_ids.len();
        if total > context_len {
            return Err(Error::InvalidInput(format!(
                "example length {total} exceeds context length {context_len}"
            )));
        }
        for &id in prompt_ids.iter().chain(&response_ids) {
            if id >= vocab_size {
                return Err(Error::InvalidInput(format!(
                    "token id {id} out of range for vocabulary of {vocab_size}"
                )));
            }
        }
        Ok(Example { prompt_ids, response_ids })
    }

    /// Encodes a text pair: `BOS` + prompt symbols, response symbols +
    /// `EOS`.
    pub fn from_text(
        vocab: &Vocab,
        prompt: &str,
        response: &str,
        context_len: usize,
    ) -> Result<Example> {
        let mut prompt_ids = vec![BOS];
        prompt_ids.extend(vocab.encode(prompt)?);
        let mut response_ids = vocab.encode(response)?;
        response_ids.push(EOS);
        Example::from_ids(prompt_ids, response_ids, vocab.size(), context_len)
    }

    pub fn prompt_ids(&self) -> &[usize] {
        &self.prompt_ids
    }

    pub fn response_ids(&self) -> &[usize] {
        &self.response_ids
    }

    /// Prompt length plus response length.
    pub fn total_len(&self) -> usize {
        self.prompt_ids.len() + self.response_ids.len()
    }

    /// Number of supervised positions (response tokens, `EOS` included).
    pub fn response_len(&self) -> usize {
        self.response_ids.len()
    }

    /// The tokens fed to the model: the full sequence minus its final
    /// token (nothing is predicted after `EOS`).
    pub fn model_input(&self) -> Vec<usize> {
        let mut full = self.prompt_ids.clone();
        full.extend_from_slice(&self.response_ids);
        full.pop();
        full
    }

    /// Logit-row index predicting each response token: response token `j`
    /// sits at absolute position `P + j`, so it is predicted by row
    /// `P + j - 1` of the logits for [`Example::model_input`].
    pub fn response_rows(&self) -> Vec<usize> {
        let p = self.prompt_ids.len();
        (0..self.response_ids.len()).map(|j| p + j - 1).collect()
    }

    /// The reference response text (without `EOS`).
    pub fn reference_text(&self, vocab: &Vocab) -> Result<String> {
        let body = &self.response_ids[..self.response_ids.len() - 1];
        vocab.decode(body)
    }
}

/// A generated or loaded dataset split.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Vec<Example>,
    pub eval_in: Vec<Example>,
    pub eval_ood: Vec<Example>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    AddMod,
    Copy,
    Reverse,
}

/// Synthetic task description.
///
/// `add_mod` prompts are `"{a}+{b}="` with response `(a+b) % modulus`;
/// training operands lie in `0..=operand_max`, out-of-distribution ones in
/// `operand_max+1..=ood_operand_max`. With `pad_operands`, operands are
/// zero-padded to the width of the largest value their split can draw, so
/// every prompt in a split has the same shape and digits keep fixed
/// positions relative to the operators. `copy`/`reverse` prompts are
/// `"{s}|"` over the letters `a..d` with response `s` (or `s` reversed);
/// training strings have length `min_len..=max_len`, OOD strings
/// `max_len+1..=ood_max_len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub train_size: usize,
    pub eval_size: usize,
    pub split_seed: u64,
    pub operand_max: u64,
    pub ood_operand_max: u64,
    pub modulus: u64,
    pub pad_operands: bool,
    pub min_len: usize,
    pub max_len: usize,
    pub ood_max_len: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::AddMod,
            train_size: 2000,
            eval_size: 200,
            split_seed: 7,
            operand_max: 99,
            ood_operand_max: 999,
            modulus: 100,
            pad_operands: false,
            min_len: 1,
            max_len: 6,
            ood_max_len: 10,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 || self.eval_size == 0 {
            return Err(Error::Config("task sizes must be positive".into()));
        }
        match self.kind {
            TaskKind::AddMod => {
                if self.modulus < 2 {
                    return Err(Error::Config(format!(
                        "task.modulus must be at least 2, got {}",
                        self.modulus
                    )));
                }
                if self.ood_operand_max <= self.operand_max {
                    return Err(Error::Config(
                        "task.ood_operand_max must exceed task.operand_max".into(),
                    ));
                }
                let pool = (self.operand_max + 1).saturating_mul(self.operand_max + 1);
                if (self.train_size + self.eval_size) as u64 > pool {
                    return Err(Error::Config(format!(
                        "task needs {} distinct instances but only {pool} exist",
                        self.train_size + self.eval_size
                    )));
                }
            }
            TaskKind::Copy | TaskKind::Reverse => {
                if self.min_len == 0 || self.min_len > self.max_len {
                    return Err(Error::Config(
                        "task.min_len must be in 1..=task.max_len".into(),
                    ));
                }
                if self.ood_max_len <= self.max_len {
                    return Err(Error::Config(
                        "task.ood_max_len must exceed task.max_len".into(),
                    ));
                }
                let mut pool: u64 = 0;
                for l in self.min_len..=self.max_len {
                    pool = pool.saturating_add(4u64.saturating_pow(l as u32));
                }
                if (self.train_size + self.eval_size) as u64 > pool {
                    return Err(Error::Config(format!(
                        "task needs {} distinct instances but only {pool} exist",
                        self.train_size + self.eval_size
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Generates the train / in-distribution eval / out-of-distribution eval
/// splits for a task. Deterministic in `(spec, vocab, context_len)`; the
/// three splits share no prompt.
pub fn gen_task(spec: &TaskSpec, vocab: &Vocab, context_len: usize) -> Result<TaskData> {
    spec.validate()?;
    let mut stream = rng::task_stream(spec.split_seed);

    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut in_dist: Vec<(String, String)> = Vec::new();
    while in_dist.len() < spec.train_size + spec.eval_size {
        let pair = match spec.kind {
            TaskKind::AddMod => {
                let a = stream.gen_range(0..=spec.operand_max);
                let b = stream.gen_range(0..=spec.operand_max);
                add_mod_pair(a, b, spec.modulus, pad_width(spec, spec.operand_max))
            }
            TaskKind::Copy | TaskKind::Reverse => {
                let len = stream.gen_range(spec.min_len..=spec.max_len);
                string_pair(&mut stream, len, spec.kind)
            }
        };
        if seen.insert(pair.0.clone()) {
            in_dist.push(pair);
        }
    }

    let mut ood: Vec<(String, String)> = Vec::new();
    while ood.len() < spec.eval_size {
        let pair = match spec.kind {
            TaskKind::AddMod => {
                let a = stream.gen_range(spec.operand_max + 1..=spec.ood_operand_max);
                let b = stream.gen_range(spec.operand_max + 1..=spec.ood_operand_max);
                add_mod_pair(a, b, spec.modulus, pad_width(spec, spec.ood_operand_max))
            }
            TaskKind::Copy | TaskKind::Reverse => {
                let len = stream.gen_range(spec.max_len + 1..=spec.ood_max_len);
                string_pair(&mut stream, len, spec.kind)
            }
        };
        if seen.insert(pair.0.clone()) {
            ood.push(pair);
        }
    }

    let encode = |pairs: &[(String, String)]| -> Result<Vec<Example>> {
        pairs
            .iter()
            .map(|(p, r)| Example::from_text(vocab, p, r, context_len))
            .collect()
    };
    let eval_in = encode(&in_dist[spec.train_size..])?;
    let train = encode(&in_dist[..spec.train_size])?;
    let eval_ood = encode(&ood)?;
    Ok(TaskData { train, eval_in, eval_ood })
}

fn add_mod_pair(a: u64, b: u64, modulus: u64, width: usize) -> (String, String) {
    (format!("{a:0width$}+{b:0width$}="), format!("{}", (a + b) % modulus))
}

fn pad_width(spec: &TaskSpec, split_max: u64) -> usize {
    if spec.pad_operands { split_max.to_string().len() } else { 0 }
}

fn string_pair(stream: &mut impl Rng, len: usize, kind: TaskKind) -> (String, String) {
    const LETTERS: [char; 4] = ['a', 'b', 'c', 'd'];
    let s: String = (0..len).map(|_| LETTERS[stream.gen_range(0..4)]).collect();
    let response = match kind {
        TaskKind::Reverse => s.chars().rev().collect(),
        _ => s.clone(),
    };
    (format!("{s}|"), response)
}

#[derive(Deserialize)]
struct CorpusLine {
    prompt: String,
    response: String,
}

/// Loads a JSONL corpus: one `{"prompt": ..., "response": ...}` object per
/// line. Malformed lines and unknown symbols fail with their line number;
/// well-formed examples that exceed the context are skipped and counted.
/// Returns the examples and the skip count.
pub fn load_jsonl(path: &Path, vocab: &Vocab, context_len: usize) -> Result<(Vec<Example>, usize)> {
    let text = fs::read_to_string(path)?;
    let mut examples = Vec::new();
    let mut skipped = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CorpusLine = serde_json::from_str(line).map_err(|e| Error::Corpus {
            line: i + 1,
            message: e.to_string(),
        })?;
        let encoded_len = |s: &str| -> Result<usize> { Ok(vocab.encode(s)?.len()) };
        let total = 2 + encoded_len(&parsed.prompt).map_err(|e| at_line(e, i + 1))?
            + encoded_len(&parsed.response).map_err(|e| at_line(e, i + 1))?;
        if total > context_len {
            skipped += 1;
            continue;
        }
        let ex = Example::from_text(vocab, &parsed.prompt, &parsed.response, context_len)
            .map_err(|e| at_line(e, i + 1))?;
        examples.push(ex);
    }
    Ok((examples, skipped))
}

fn at_line(err: Error, line: usize) -> Error {
    Error::Corpus { line, message: err.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    #[test]
    fn reserved_ids_are_stable() {
        assert_eq!((PAD, BOS, EOS, RESERVED), (0, 1, 2, 3));
    }

    #[test]
    fn default_vocab_has_twenty_ids() {
        assert_eq!(Vocab::default_task().size(), 20);
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = Vocab::default_task();
        let ids = v.encode("12+7=ab|").unwrap();
        assert_eq!(v.decode(&ids).unwrap(), "12+7=ab|");
    }

    #[test]
    fn unknown_symbol_names_symbol_and_index() {
        let v = Vocab::default_task();
        let err = v.encode("12@4").unwrap_err();
        match err {
            Error::UnknownSymbol { symbol, index } => {
                assert_eq!(symbol, '@');
                assert_eq!(index, 2);
            }
            other => panic!("expected UnknownSymbol, got {other:?}"),
        }
    }

    #[test]
    fn decode_rejects_reserved_ids() {
        let v = Vocab::default_task();
        assert!(v.decode(&[BOS]).is_err());
        assert_eq!(v.decode_lossy(&[BOS]), "\u{FFFD}");
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::default_task();
        v.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(loaded.size(), v.size());
        assert_eq!(loaded.encode("9=d").unwrap(), v.encode("9=d").unwrap());
    }

    #[test]
    fn example_encodes_bos_and_eos() {
        let v = Vocab::default_task();
        let ex = Example::from_text(&v, "1+2=", "3", 32).unwrap();
        assert_eq!(ex.prompt_ids()[0], BOS);
        assert_eq!(*ex.response_ids().last().unwrap(), EOS);
        assert_eq!(ex.total_len(), 1 + 4 + 1 + 1);
    }

    #[test]
    fn model_input_drops_final_token() {
        let v = Vocab::default_task();
        let ex = Example::from_text(&v, "1+2=", "3", 32).unwrap();
        let input = ex.model_input();
        assert_eq!(input.len(), ex.total_len() - 1);
        assert_eq!(input[0], BOS);
        // Rows: one per response token, last row is the final input index.
        let rows = ex.response_rows();
        assert_eq!(rows.len(), ex.response_len());
        assert_eq!(*rows.last().unwrap(), input.len() - 1);
        // Row r predicts full[r + 1]: check alignment against the response.
        let p = ex.prompt_ids().len();
        assert_eq!(rows[0], p - 1);
    }

    #[test]
    fn example_rejects_context_overflow() {
        let v = Vocab::default_task();
        let err = Example::from_text(&v, "123+456=", "79", 8).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)), "got {err:?}");
    }

    #[test]
    fn add_mod_task_is_deterministic_and_correct() {
        let v = Vocab::default_task();
        let spec = TaskSpec { train_size: 50, eval_size: 10, ..TaskSpec::default() };
        let a = gen_task(&spec, &v, 32).unwrap();
        let b = gen_task(&spec, &v, 32).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.eval_ood, b.eval_ood);
        for ex in a.train.iter().chain(&a.eval_in).chain(&a.eval_ood) {
            let prompt = v.decode(&ex.prompt_ids()[1..]).unwrap();
            let response = ex.reference_text(&v).unwrap();
            let (terms, _) = prompt.split_once('=').unwrap();
            let (x, y) = terms.split_once('+').unwrap();
            let want = (x.parse::<u64>().unwrap() + y.parse::<u64>().unwrap()) % spec.modulus;
            assert_eq!(response, want.to_string(), "prompt {prompt}");
        }
    }

    #[test]
    fn padded_operands_share_one_shape_per_split() {
        let v = Vocab::default_task();
        let spec = TaskSpec {
            train_size: 50,
            eval_size: 10,
            pad_operands: true,
            ..TaskSpec::default()
        };
        let data = gen_task(&spec, &v, 32).unwrap();
        let shape = |ex: &Example| -> String {
            let prompt = v.decode(&ex.prompt_ids()[1..]).unwrap();
            prompt
                .chars()
                .map(|c| if c.is_ascii_digit() { 'd' } else { c })
                .collect()
        };
        for ex in data.train.iter().chain(&data.eval_in) {
            assert_eq!(shape(ex), "dd+dd=");
        }
        for ex in &data.eval_ood {
            assert_eq!(shape(ex), "ddd+ddd=");
        }
        for ex in data.train.iter().chain(&data.eval_in).chain(&data.eval_ood) {
            let prompt = v.decode(&ex.prompt_ids()[1..]).unwrap();
            let (terms, _) = prompt.split_once('=').unwrap();
            let (x, y) = terms.split_once('+').unwrap();
            let want = (x.parse::<u64>().unwrap() + y.parse::<u64>().unwrap()) % spec.modulus;
            assert_eq!(ex.reference_text(&v).unwrap(), want.to_string(), "prompt {prompt}");
        }
    }

    #[test]
    fn task_splits_share_no_prompt() {
        let v = Vocab::default_task();
        let spec = TaskSpec { train_size: 300, eval_size: 60, ..TaskSpec::default() };
        let data = gen_task(&spec, &v, 32).unwrap();
        let prompts = |xs: &[Example]| -> BTreeSet<Vec<usize>> {
            xs.iter().map(|e| e.prompt_ids().to_vec()).collect()
        };
        let (tr, ei, eo) = (prompts(&data.train), prompts(&data.eval_in), prompts(&data.eval_ood));
        assert_eq!(tr.len(), 300);
        assert!(tr.is_disjoint(&ei));
        assert!(tr.is_disjoint(&eo));
        assert!(ei.is_disjoint(&eo));
    }

    #[test]
    fn ood_operands_are_longer_than_training() {
        let v = Vocab::default_task();
        let spec = TaskSpec { train_size: 20, eval_size: 10, ..TaskSpec::default() };
        let data = gen_task(&spec, &v, 32).unwrap();
        let max_train = data.train.iter().map(|e| e.prompt_ids().len()).max().unwrap();
        let min_ood = data.eval_ood.iter().map(|e| e.prompt_ids().len()).min().unwrap();
        assert!(min_ood > max_train, "ood prompts ({min_ood}) not longer than train ({max_train})");
    }

    #[test]
    fn reverse_task_reverses() {
        let v = Vocab::default_task();
        let spec = TaskSpec {
            kind: TaskKind::Reverse,
            train_size: 30,
            eval_size: 10,
            ..TaskSpec::default()
        };
        let data = gen_task(&spec, &v, 32).unwrap();
        for ex in &data.train {
            let prompt = v.decode(&ex.prompt_ids()[1..]).unwrap();
            let body = prompt.strip_suffix('|').unwrap();
            let response = ex.reference_text(&v).unwrap();
            assert_eq!(response, body.chars().rev().collect::<String>());
        }
    }

    #[test]
    fn oversized_task_pool_is_rejected() {
        let spec = TaskSpec {
            train_size: 200,
            eval_size: 50,
            operand_max: 9,
            ..TaskSpec::default()
        };
        let err = gen_task(&spec, &Vocab::default_task(), 32).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
    }

    #[test]
    fn jsonl_load_counts_skips_and_reports_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, r#"{{"prompt": "1+1=", "response": "2"}}"#).unwrap();
        writeln!(f, r#"{{"prompt": "123456789+1=", "response": "90"}}"#).unwrap();
        writeln!(f, r#"{{"prompt": "2+2=", "response": "4"}}"#).unwrap();
        drop(f);
        let v = Vocab::default_task();
        let (examples, skipped) = load_jsonl(&path, &v, 12).unwrap();
        assert_eq!(examples.len(), 2);
        assert_eq!(skipped, 1);
    }

    #[test]
    fn jsonl_malformed_line_is_an_error_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        std::fs::write(&path, "{\"prompt\": \"1+1=\", \"response\": \"2\"}\nnot json\n").unwrap();
        let err = load_jsonl(&path, &Vocab::default_task(), 32).unwrap_err();
        match err {
            Error::Corpus { line, .. } => assert_eq!(line, 2),
            other => panic!("expected Corpus error, got {other:?}"),
        }
    }

    #[test]
    fn jsonl_unknown_symbol_is_an_error_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        std::fs::write(&path, "{\"prompt\": \"x+1=\", \"response\": \"2\"}\n").unwrap();
        let err = load_jsonl(&path, &Vocab::default_task(), 32).unwrap_err();
        match err {
            Error::Corpus { line, message } => {
                assert_eq!(line, 1);
                assert!(message.contains("'x'"), "message: {message}");
            }
            other => panic!("expected Corpus error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn prop_encode_decode_round_trips(s in "[0-9+=|abcd]{0,24}") {
            let v = Vocab::default_task();
            let ids = v.encode(&s).unwrap();
            prop_assert_eq!(v.decode(&ids).unwrap(), s);
        }

        #[test]
        fn prop_examples_fit_context(a in 0u64..=99, b in 0u64..=99, width in 0usize..=2) {
            let v = Vocab::default_task();
            let (p, r) = add_mod_pair(a, b, 100, width);
            let ex = Example::from_text(&v, &p, &r, 32).unwrap();
            prop_assert!(ex.total_len() <= 32);
            prop_assert_eq!(ex.response_rows().len(), ex.response_len());
        }
    }
}
