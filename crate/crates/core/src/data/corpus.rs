use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Domain;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrainingExample {
    pub domain: Domain,
    pub prompt: String,
    pub response: String,
}

/// One domain's examples, split into disjoint train and held-out sets.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainCorpus {
    pub domain: Domain,
    pub train: Vec<TrainingExample>,
    pub held_out: Vec<TrainingExample>,
}

impl DomainCorpus {
    pub fn split(&self, split: Split) -> &[TrainingExample] {
        match split {
            Split::Train => &self.train,
            Split::HeldOut => &self.held_out,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    HeldOut,
}

/// Generates a deterministic corpus of `train + held_out` distinct examples.
///
/// * text: template-grammar sentences over a fixed word list
/// * code: small brace-and-keyword functions with indentation
/// * math: integer arithmetic whose responses carry the evaluated result
pub fn synth_corpus(domain: Domain, train: usize, held_out: usize, seed: u64) -> Result<DomainCorpus> {
    if train == 0 {
        return Err(Error::Config("corpus needs at least one training example".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(domain.index() as u64 + 1);
    let want = train + held_out;
    let mut seen = HashSet::with_capacity(want);
    let mut examples = Vec::with_capacity(want);
    let mut attempts = 0usize;
    while examples.len() < want {
        attempts += 1;
        if attempts > want * 50 + 1000 {
            return Err(Error::Config(format!(
                "{domain} generator exhausted after {} distinct examples",
                examples.len()
            )));
        }
        let (prompt, response) = match domain {
            Domain::Text => text_example(&mut rng),
            Domain::Code => code_example(&mut rng),
            Domain::Math => math_example(&mut rng),
        };
        if seen.insert((prompt.clone(), response.clone())) {
            examples.push(TrainingExample { domain, prompt, response });
        }
    }
    let held = examples.split_off(train);
    Ok(DomainCorpus {
        domain,
        train: examples,
        held_out: held,
    })
}

const NOUNS: &[&str] = &[
    "cat", "dog", "bird", "river", "garden", "house", "child", "teacher", "friend", "forest", "mountain", "window",
    "village", "storm", "flower", "sailor", "painter", "meadow", "castle", "lamp",
];
const ADJECTIVES: &[&str] = &[
    "small", "quiet", "bright", "old", "gentle", "green", "happy", "warm", "dark", "tall", "lonely", "golden",
];
const VERBS: &[&str] = &[
    "sleeps near", "walks to", "looks at", "sings to", "waits by", "runs past", "dreams of", "rests under",
    "smiles at", "hides behind",
];
const FEELINGS: &[&str] = &["calm", "glad", "tired", "proud", "curious", "sleepy"];

fn pick<'a>(rng: &mut impl Rng, words: &[&'a str]) -> &'a str {
    words.choose(rng).copied().unwrap()
}

fn text_example(rng: &mut impl Rng) -> (String, String) {
    let noun = pick(rng, NOUNS);
    let other = pick(rng, NOUNS);
    let adj = pick(rng, ADJECTIVES);
    let verb = pick(rng, VERBS);
    match rng.gen_range(0..3) {
        0 => (
            format!("Describe the {noun}."),
            format!("The {adj} {noun} {verb} the {other}."),
        ),
        1 => {
            let feeling = pick(rng, FEELINGS);
            (
                format!("How does the {noun} feel?"),
                format!("The {noun} feels {feeling} today."),
            )
        }
        _ => {
            let adj2 = pick(rng, ADJECTIVES);
            (
                format!("Tell a story about a {adj} {noun}."),
                format!("A {adj} {noun} {verb} a {adj2} {other}."),
            )
        }
    }
}

const FUNCS: &[&str] = &["sum", "diff", "prod", "clamp", "pick", "step", "acc", "mix", "scale", "fold", "bump", "cap"];
const ARGS: &[&str] = &["x", "y", "z", "n", "m", "k", "a", "b"];
const OPS: &[(&str, &str)] = &[("+", "plus"), ("-", "minus"), ("*", "times")];

fn code_example(rng: &mut impl Rng) -> (String, String) {
    let name = pick(rng, FUNCS);
    let a = pick(rng, ARGS);
    let mut b = pick(rng, ARGS);
    while b == a {
        b = pick(rng, ARGS);
    }
    let (op, word) = *OPS.choose(rng).unwrap();
    let k = rng.gen_range(0..10);
    match rng.gen_range(0..3) {
        0 => (
            format!("Write fn {name} of {a}, {b} using {word}."),
            format!("fn {name}({a}, {b}) {{\n  return {a} {op} {b};\n}}"),
        ),
        1 => (
            format!("Write fn {name} of {a}, {b} with a guard at {k}."),
            format!("fn {name}({a}, {b}) {{\n  if {a} > {k} {{\n    return {a} {op} {b};\n  }}\n  return {b};\n}}"),
        ),
        _ => (
            format!("Write fn {name} looping {a} down from {k}."),
            format!("fn {name}({a}) {{\n  let t = {k};\n  while {a} > 0 {{\n    t = t {op} {a};\n    {a} = {a} - 1;\n  }}\n  return t;\n}}"),
        ),
    }
}

const NAMES: &[&str] = &["Tom", "Ana", "Lee", "Sam", "Mia", "Raj", "Eva"];
const ITEMS: &[&str] = &["apples", "coins", "books", "cards", "pens", "shells"];

fn math_example(rng: &mut impl Rng) -> (String, String) {
    match rng.gen_range(0..3) {
        0 => {
            let (op, _) = *OPS.choose(rng).unwrap();
            let hi = if op == "*" { 12 } else { 20 };
            let a: i64 = rng.gen_range(0..=hi);
            let b: i64 = rng.gen_range(0..=hi);
            let expr = format!("{a}{op}{b}");
            let value = eval_binary(a, op, b);
            (format!("Compute: {expr}"), format!("{expr}={value}"))
        }
        1 => {
            let a: i64 = rng.gen_range(1..10);
            let b: i64 = rng.gen_range(1..10);
            let c: i64 = rng.gen_range(1..10);
            let (op1, _) = *OPS.choose(rng).unwrap();
            let (op2, _) = *OPS.choose(rng).unwrap();
            let expr = format!("{a}{op1}{b}{op2}{c}");
            let value = if op2 == "*" && op1 != "*" {
                eval_binary(a, op1, b * c)
            } else {
                eval_binary(eval_binary(a, op1, b), op2, c)
            };
            (format!("Compute: {expr}"), format!("{expr}={value}"))
        }
        _ => {
            let name = pick(rng, NAMES);
            let item = pick(rng, ITEMS);
            let a: i64 = rng.gen_range(2..20);
            let b: i64 = rng.gen_range(1..10);
            if rng.gen_bool(0.5) {
                (
                    format!("{name} has {a} {item} and gets {b} more. How many {item}?"),
                    format!("{a}+{b}={}. The answer is {}.", a + b, a + b),
                )
            } else {
                let b = b.min(a);
                (
                    format!("{name} has {a} {item} and gives away {b}. How many {item}?"),
                    format!("{a}-{b}={}. The answer is {}.", a - b, a - b),
                )
            }
        }
    }
}

fn eval_binary(a: i64, op: &str, b: i64) -> i64 {
    match op {
        "+" => a + b,
        "-" => a - b,
        "*" => a * b,
        _ => unreachable!("operator table only holds + - *"),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SplitManifest {
    pub domain: Domain,
    pub records: usize,
    pub train: Vec<usize>,
    pub held_out: Vec<usize>,
    pub seed: u64,
    pub config_hash: String,
}

impl DomainCorpus {
    /// Writes `<domain>.jsonl` (train records then held-out records) and
    /// `<domain>.manifest.json` listing the record indices of each split.
    pub fn write(&self, dir: &Path, seed: u64, config_hash: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("{}.jsonl", self.domain));
        let mut buf = Vec::new();
        for ex in self.train.iter().chain(&self.held_out) {
            serde_json::to_writer(&mut buf, ex).expect("examples serialize");
            buf.push(b'\n');
        }
        write_atomic(&path, &buf)?;

        let n = self.train.len();
        let manifest = SplitManifest {
            domain: self.domain,
            records: n + self.held_out.len(),
            train: (0..n).collect(),
            held_out: (n..n + self.held_out.len()).collect(),
            seed,
            config_hash: config_hash.into(),
        };
        let path = dir.join(format!("{}.manifest.json", self.domain));
        write_atomic(&path, &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"))
    }

    pub fn read(dir: &Path, domain: Domain) -> Result<DomainCorpus> {
        let mpath = dir.join(format!("{domain}.manifest.json"));
        let manifest: SplitManifest = serde_json::from_slice(&fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?)
            .map_err(|e| Error::Config(format!("{}: {e}", mpath.display())))?;
        let path = dir.join(format!("{domain}.jsonl"));
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut records = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let ex: TrainingExample =
                serde_json::from_str(&line).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if ex.domain != domain {
                return Err(Error::Domain(format!("{} record in {} file", ex.domain, domain)));
            }
            records.push(ex);
        }
        let fetch = |idx: &[usize]| -> Result<Vec<TrainingExample>> {
            idx.iter()
                .map(|&i| {
                    records
                        .get(i)
                        .cloned()
                        .ok_or_else(|| Error::Config(format!("manifest index {i} beyond {} records", records.len())))
                })
                .collect()
        };
        Ok(DomainCorpus {
            domain,
            train: fetch(&manifest.train)?,
            held_out: fetch(&manifest.held_out)?,
        })
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".into(),
    });
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
