//! Token-id corpora: a synthetic generator with analogous class pairs,
//! JSONL loading and saving, and class-incremental task splits.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labeled token sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub tokens: Vec<u32>,
    pub label: usize,
}

/// Train and test examples plus the metadata the split and the model need.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab_size: usize,
    pub analogous_pairs: Vec<(usize, usize)>,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    /// Sorted distinct labels over train and test.
    pub fn classes(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.train.iter().chain(&self.test).map(|e| e.label).collect();
        set.into_iter().collect()
    }

    pub fn analogous_classes(&self) -> BTreeSet<usize> {
        self.analogous_pairs.iter().flat_map(|&(a, b)| [a, b]).collect()
    }
}

/// Parameters of the synthetic analogous-class corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub analogous_pairs: usize,
    pub vocab: usize,
    pub tokens_per_example: usize,
    /// Probability that a token of an analogous class comes from the pool
    /// shared with its partner rather than its own discriminative pool.
    pub shared_fraction: f64,
    /// Probability that any token comes from the background pool shared by
    /// every class.
    pub background_fraction: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 40,
            analogous_pairs: 5,
            vocab: 200,
            tokens_per_example: 20,
            shared_fraction: 0.8,
            background_fraction: 0.7,
            train_per_class: 100,
            test_per_class: 40,
            seed: 0,
        }
    }
}

/// Token pools of one class.
#[derive(Clone, Debug)]
struct ClassPools {
    own: Vec<u32>,
    shared: Option<Vec<u32>>,
}

/// How the vocabulary is carved up.
#[derive(Clone, Debug)]
struct Layout {
    classes: Vec<ClassPools>,
    background: Vec<u32>,
    pairs: Vec<(usize, usize)>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.tokens_per_example == 0 {
            return Err(Error::config("need at least one class and one token per example"));
        }
        if 2 * self.analogous_pairs > self.classes {
            return Err(Error::config("more analogous pairs than classes allow"));
        }
        if self.analogous_pairs > 0 && !(self.shared_fraction > 0.0 && self.shared_fraction < 1.0) {
            return Err(Error::config("shared fraction must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.background_fraction) {
            return Err(Error::config("background fraction must lie in [0, 1)"));
        }
        self.layout().map(|_| ())
    }

    /// Pool sizes: every plain class and every shared pool get `p` tokens,
    /// each discriminative pool `max(1, p / 2)`, the background takes 10% of
    /// the vocabulary when used.
    fn layout(&self) -> Result<Layout> {
        let background = if self.background_fraction > 0.0 {
            (self.vocab / 10).max(1)
        } else {
            0
        };
        let plain = self.classes - 2 * self.analogous_pairs;
        let slots = plain + 2 * self.analogous_pairs;
        let p = (self.vocab - background.min(self.vocab)) / slots.max(1);
        let d = (p / 2).max(1);
        let needed = plain * p + self.analogous_pairs * (p + 2 * d) + background;
        if p < 2 || needed > self.vocab {
            return Err(Error::config(format!(
                "vocabulary of {} is too small for {} classes",
                self.vocab, self.classes
            )));
        }
        let mut next = 0u32;
        let mut take = |n: usize| -> Vec<u32> {
            let pool = (next..next + n as u32).collect();
            next += n as u32;
            pool
        };
        let background = take(background);
        let mut classes = Vec::with_capacity(self.classes);
        let mut pairs = Vec::new();
        for k in 0..self.analogous_pairs {
            let shared = take(p);
            classes.push(ClassPools {
                own: take(d),
                shared: Some(shared.clone()),
            });
            classes.push(ClassPools {
                own: take(d),
                shared: Some(shared),
            });
            pairs.push((2 * k, 2 * k + 1));
        }
        for _ in 0..plain {
            classes.push(ClassPools {
                own: take(p),
                shared: None,
            });
        }
        Ok(Layout {
            classes,
            background,
            pairs,
        })
    }
}

fn draw_tokens<R: Rng>(spec: &SyntheticSpec, pools: &ClassPools, background: &[u32], rng: &mut R) -> Vec<u32> {
    (0..spec.tokens_per_example)
        .map(|_| {
            if !background.is_empty() && rng.random::<f64>() < spec.background_fraction {
                return *background.choose(rng).expect("non-empty");
            }
            match &pools.shared {
                Some(shared) if rng.random::<f64>() < spec.shared_fraction => {
                    *shared.choose(rng).expect("non-empty")
                }
                _ => *pools.own.choose(rng).expect("non-empty"),
            }
        })
        .collect()
}

/// Deterministic synthetic corpus. Classes `2k` and `2k + 1` for
/// `k < analogous_pairs` form the analogous pairs. Examples are ordered by
/// class; train ids come first, then test ids.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let layout = spec.layout()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::with_capacity(spec.classes * spec.train_per_class);
    let mut test = Vec::with_capacity(spec.classes * spec.test_per_class);
    let mut id = 0u64;
    for (label, pools) in layout.classes.iter().enumerate() {
        for _ in 0..spec.train_per_class {
            train.push(Example {
                id,
                tokens: draw_tokens(spec, pools, &layout.background, &mut rng),
                label,
            });
            id += 1;
        }
    }
    for (label, pools) in layout.classes.iter().enumerate() {
        for _ in 0..spec.test_per_class {
            test.push(Example {
                id,
                tokens: draw_tokens(spec, pools, &layout.background, &mut rng),
                label,
            });
            id += 1;
        }
    }
    Ok(Dataset {
        vocab_size: spec.vocab,
        analogous_pairs: layout.pairs,
        train,
        test,
    })
}

/// Token pool membership of the synthetic layout, for inspection and tests.
pub fn synthetic_pools(spec: &SyntheticSpec) -> Result<Vec<(Vec<u32>, Option<Vec<u32>>)>> {
    Ok(spec
        .layout()?
        .classes
        .into_iter()
        .map(|c| (c.own, c.shared))
        .collect())
}

/// Parses one JSON object per line. Blank lines are skipped.
pub fn parse_jsonl(reader: impl BufRead) -> Result<Vec<Example>> {
    #[derive(Deserialize)]
    struct Line {
        id: u64,
        tokens: Vec<u32>,
        label: usize,
    }
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if parsed.tokens.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty token list".into(),
            });
        }
        if !seen.insert(parsed.id) {
            return Err(Error::input(format!(
                "duplicate instance id {} at line {line_no}",
                parsed.id
            )));
        }
        out.push(Example {
            id: parsed.id,
            tokens: parsed.tokens,
            label: parsed.label,
        });
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Example>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(BufReader::new(file))
}

pub fn to_jsonl(examples: &[Example]) -> Result<String> {
    let mut out = String::new();
    for e in examples {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    std::fs::write(path, to_jsonl(examples)?).map_err(|e| Error::io(path, e))
}

/// Sidecar metadata written next to a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub vocab_size: usize,
    pub analogous_pairs: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SyntheticSpec>,
}

/// `corpus.jsonl` -> (`corpus.test.jsonl`, `corpus.meta.json`).
pub fn sibling_paths(train: &Path) -> (PathBuf, PathBuf) {
    let stem = train
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into());
    let dir = train.parent().unwrap_or_else(|| Path::new(""));
    (
        dir.join(format!("{stem}.test.jsonl")),
        dir.join(format!("{stem}.meta.json")),
    )
}

/// Writes the train file at `path` plus its test and metadata siblings.
pub fn write_corpus(path: &Path, data: &Dataset, spec: Option<&SyntheticSpec>) -> Result<()> {
    let (test, meta) = sibling_paths(path);
    write_jsonl(path, &data.train)?;
    write_jsonl(&test, &data.test)?;
    let meta_value = CorpusMeta {
        vocab_size: data.vocab_size,
        analogous_pairs: data.analogous_pairs.clone(),
        spec: spec.cloned(),
    };
    std::fs::write(&meta, serde_json::to_string_pretty(&meta_value)?).map_err(|e| Error::io(&meta, e))
}

/// Reads a corpus written by [`write_corpus`]. Without metadata the
/// vocabulary is inferred from the largest token id and no pairs are known.
pub fn load_corpus(path: &Path) -> Result<Dataset> {
    let (test_path, meta_path) = sibling_paths(path);
    let train = load_jsonl(path)?;
    let test = if test_path.exists() {
        load_jsonl(&test_path)?
    } else {
        Vec::new()
    };
    let ids: HashSet<u64> = train.iter().map(|e| e.id).collect();
    if let Some(e) = test.iter().find(|e| ids.contains(&e.id)) {
        return Err(Error::input(format!("instance id {} appears in train and test", e.id)));
    }
    let inferred = train
        .iter()
        .chain(&test)
        .flat_map(|e| e.tokens.iter())
        .max()
        .map_or(0, |&t| t as usize + 1);
    let (vocab_size, analogous_pairs) = if meta_path.exists() {
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CorpusMeta = serde_json::from_str(&text)?;
        if meta.vocab_size < inferred {
            return Err(Error::input(format!(
                "token id {} exceeds the declared vocabulary {}",
                inferred - 1,
                meta.vocab_size
            )));
        }
        (meta.vocab_size, meta.analogous_pairs)
    } else {
        (inferred, Vec::new())
    };
    Ok(Dataset {
        vocab_size,
        analogous_pairs,
        train,
        test,
    })
}

/// Ordered, pairwise disjoint class sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSequence {
    pub tasks: Vec<Vec<usize>>,
}

impl TaskSequence {
    pub fn new(tasks: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = HashSet::new();
        for t in &tasks {
            for &c in t {
                if !seen.insert(c) {
                    return Err(Error::input(format!("class {c} appears in two tasks")));
                }
            }
        }
        Ok(Self { tasks })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task_of(&self, class: usize) -> Option<usize> {
        self.tasks.iter().position(|t| t.contains(&class))
    }

    pub fn classes(&self) -> BTreeSet<usize> {
        self.tasks.iter().flatten().copied().collect()
    }

    /// Every class of the dataset must belong to exactly one task.
    pub fn check_covers(&self, data: &Dataset) -> Result<()> {
        let mine = self.classes();
        for c in data.classes() {
            if !mine.contains(&c) {
                return Err(Error::input(format!("class {c} is not assigned to any task")));
            }
        }
        Ok(())
    }

    pub fn train_examples<'a>(&self, data: &'a Dataset, task: usize) -> Vec<&'a Example> {
        let classes = &self.tasks[task];
        data.train.iter().filter(|e| classes.contains(&e.label)).collect()
    }

    pub fn test_examples<'a>(&self, data: &'a Dataset, task: usize) -> Vec<&'a Example> {
        let classes = &self.tasks[task];
        data.test.iter().filter(|e| classes.contains(&e.label)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let seq: TaskSequence = serde_json::from_str(&text)?;
        Self::new(seq.tasks)
    }
}

/// Seeded shuffle of `classes` into `k` nearly equal chunks; members of an
/// analogous pair are then swapped apart so they land in different tasks.
pub fn split_tasks(classes: &[usize], k: usize, seed: u64, pairs: &[(usize, usize)]) -> Result<TaskSequence> {
    if k == 0 || k > classes.len() {
        return Err(Error::config(format!(
            "cannot split {} classes into {k} tasks",
            classes.len()
        )));
    }
    let mut shuffled = classes.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = shuffled.len() / k;
    let extra = shuffled.len() % k;
    let mut tasks = Vec::with_capacity(k);
    let mut it = shuffled.into_iter();
    for t in 0..k {
        let size = base + usize::from(t < extra);
        tasks.push(it.by_ref().take(size).collect::<Vec<_>>());
    }
    if k > 1 {
        separate_pairs(&mut tasks, pairs)?;
    }
    TaskSequence::new(tasks)
}

fn separate_pairs(tasks: &mut [Vec<usize>], pairs: &[(usize, usize)]) -> Result<()> {
    let partners: BTreeMap<usize, Vec<usize>> = pairs.iter().fold(BTreeMap::new(), |mut m, &(a, b)| {
        m.entry(a).or_insert_with(Vec::new).push(b);
        m.entry(b).or_insert_with(Vec::new).push(a);
        m
    });
    let conflicts = |task: &[usize], class: usize, ignore: usize| -> bool {
        partners
            .get(&class)
            .is_some_and(|ps| ps.iter().any(|p| *p != ignore && task.contains(p)))
    };
    for &(a, b) in pairs {
        let Some(t1) = tasks.iter().position(|t| t.contains(&a)) else { continue };
        if !tasks[t1].contains(&b) {
            continue;
        }
        let mut fixed = false;
        'search: for t2 in (0..tasks.len()).filter(|&t| t != t1) {
            for i in 0..tasks[t2].len() {
                let c = tasks[t2][i];
                // b moves to t2 and c moves to t1
                if conflicts(&tasks[t2], b, c) || conflicts(&tasks[t1], c, b) {
                    continue;
                }
                let bi = tasks[t1].iter().position(|&x| x == b).expect("b in t1");
                tasks[t1][bi] = c;
                tasks[t2][i] = b;
                fixed = true;
                break 'search;
            }
        }
        if !fixed {
            return Err(Error::config(format!(
                "cannot place analogous classes {a} and {b} in different tasks"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_pools_are_disjoint() {
        let spec = SyntheticSpec {
            analogous_pairs: 0,
            background_fraction: 0.0,
            ..SyntheticSpec::default()
        };
        let pools = synthetic_pools(&spec).unwrap();
        let mut seen = HashSet::new();
        for (own, shared) in &pools {
            assert!(shared.is_none());
            for t in own {
                assert!(seen.insert(*t));
            }
        }
        let data = generate_synthetic(&spec).unwrap();
        for e in &data.train {
            assert!(e.tokens.iter().all(|t| pools[e.label].0.contains(t)));
        }
    }

    #[test]
    fn shared_fraction_matches_sampling_law() {
        let spec = SyntheticSpec {
            shared_fraction: 0.9,
            background_fraction: 0.0,
            train_per_class: 500,
            test_per_class: 1,
            ..SyntheticSpec::default()
        };
        let pools = synthetic_pools(&spec).unwrap();
        let data = generate_synthetic(&spec).unwrap();
        for class in [0usize, 1] {
            let shared = pools[class].1.as_ref().unwrap();
            let tokens: Vec<u32> = data
                .train
                .iter()
                .filter(|e| e.label == class)
                .flat_map(|e| e.tokens.clone())
                .collect();
            assert!(tokens.len() >= 10_000);
            let frac = tokens.iter().filter(|t| shared.contains(t)).count() as f64 / tokens.len() as f64;
            assert!((frac - 0.9).abs() < 0.02, "{frac}");
        }
    }

    #[test]
    fn generator_is_deterministic_and_balanced() {
        let spec = SyntheticSpec::default();
        let a = generate_synthetic(&spec).unwrap();
        assert_eq!(a, generate_synthetic(&spec).unwrap());
        let mut counts = BTreeMap::new();
        for e in &a.train {
            *counts.entry(e.label).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 40);
        assert!(counts.values().all(|&c| c == 100));
        assert_eq!(a.test.len(), 40 * 40);
        assert_eq!(a.analogous_pairs.len(), 5);
    }

    #[test]
    fn infeasible_vocab() {
        let spec = SyntheticSpec {
            vocab: 30,
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn split_shapes() {
        let classes: Vec<usize> = (0..80).collect();
        let seq = split_tasks(&classes, 10, 3, &[]).unwrap();
        assert!(seq.tasks.iter().all(|t| t.len() == 8));
        let one = split_tasks(&classes, 1, 3, &[(0, 1)]).unwrap();
        assert_eq!(one.len(), 1);
        assert!(matches!(split_tasks(&classes, 81, 0, &[]), Err(Error::Config(_))));
        let uneven = split_tasks(&(0..10).collect::<Vec<_>>(), 3, 0, &[]).unwrap();
        let sizes: Vec<usize> = uneven.tasks.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
    }

    #[test]
    fn split_separates_pairs() {
        let classes: Vec<usize> = (0..40).collect();
        let pairs: Vec<(usize, usize)> = (0..5).map(|k| (2 * k, 2 * k + 1)).collect();
        for seed in 0..50 {
            let seq = split_tasks(&classes, 10, seed, &pairs).unwrap();
            for &(a, b) in &pairs {
                assert_ne!(seq.task_of(a), seq.task_of(b), "seed {seed}");
            }
            let all: BTreeSet<usize> = seq.classes();
            assert_eq!(all.len(), 40);
            assert_eq!(seq.tasks.iter().map(Vec::len).sum::<usize>(), 40);
        }
    }

    #[test]
    fn jsonl_cases() {
        assert!(parse_jsonl("".as_bytes()).unwrap().is_empty());
        let one = parse_jsonl(r#"{"id": 3, "tokens": [1, 2], "label": 0}"#.as_bytes()).unwrap();
        assert_eq!(one, vec![Example { id: 3, tokens: vec![1, 2], label: 0 }]);
        let text = "{\"id\": 1, \"tokens\": [1], \"label\": 0}\n{\"id\": 2, \"tokens\": [1]}\n";
        match parse_jsonl(text.as_bytes()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("label"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let dup = "{\"id\": 1, \"tokens\": [1], \"label\": 0}\n{\"id\": 1, \"tokens\": [2], \"label\": 0}\n";
        assert!(matches!(parse_jsonl(dup.as_bytes()), Err(Error::Input(_))));
    }

    #[test]
    fn corpus_roundtrip() {
        let spec = SyntheticSpec {
            classes: 6,
            analogous_pairs: 1,
            vocab: 60,
            train_per_class: 5,
            test_per_class: 2,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        write_corpus(&path, &data, Some(&spec)).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), data);
    }
}
