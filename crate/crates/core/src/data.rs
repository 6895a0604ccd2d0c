//! Corpus ingestion, tokenisation, synthetic task generation, splits and
//! episode sampling.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use smp_numerics::RngStream;

use crate::error::{io_err, Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
pub const NUM_RESERVED: usize = 5;

const RESERVED: [&str; NUM_RESERVED] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

/// Lowercases and splits on whitespace; ASCII punctuation becomes its own
/// token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_ascii_punctuation() {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Keeps the `max_size - 5` most frequent tokens after the reserved
    /// ones; frequency ties go to the lexicographically smaller token.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocab> {
        if max_size < NUM_RESERVED {
            return Err(Error::Config(format!("vocabulary size {max_size} is below {NUM_RESERVED}")));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for tok in tokenize(line.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Input("empty corpus".into()));
        }
        let mut ranked: Vec<(String, usize)> =
            counts.into_iter().filter(|(t, _)| !RESERVED.contains(&t.as_str())).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(max_size - NUM_RESERVED).map(|(t, _)| t))
            .collect();
        Ok(Vocab::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// `[CLS] a [SEP]` or `[CLS] a [SEP] b [SEP]`, truncated to `max_len`.
    pub fn encode(&self, inst: &Instance, max_len: usize) -> Vec<usize> {
        let a = self.ids(&inst.a);
        let b = inst.b.as_ref().map(|b| self.ids(b));
        encode_ids(&a, b.as_deref(), max_len)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for t in &self.tokens {
            text.push_str(t);
            text.push('\n');
        }
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < NUM_RESERVED || tokens[..NUM_RESERVED] != RESERVED.map(String::from) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                reason: "vocabulary must start with the reserved tokens".into(),
            });
        }
        Ok(Vocab::from_tokens(tokens))
    }
}

/// Truncation keeps the left prefix of each segment; for pairs the longer
/// segment is trimmed first.
pub fn encode_ids(a: &[usize], b: Option<&[usize]>, max_len: usize) -> Vec<usize> {
    match b {
        None => {
            let keep = a.len().min(max_len.saturating_sub(2));
            let mut out = Vec::with_capacity(keep + 2);
            out.push(CLS);
            out.extend_from_slice(&a[..keep]);
            out.push(SEP);
            out
        }
        Some(b) => {
            let budget = max_len.saturating_sub(3);
            let (mut la, mut lb) = (a.len(), b.len());
            while la + lb > budget {
                if la >= lb {
                    la -= 1;
                } else {
                    lb -= 1;
                }
            }
            let mut out = Vec::with_capacity(la + lb + 3);
            out.push(CLS);
            out.extend_from_slice(&a[..la]);
            out.push(SEP);
            out.extend_from_slice(&b[..lb]);
            out.push(SEP);
            out
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceKind {
    Single,
    Pair,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Similarity(f64),
}

impl Label {
    pub fn class(&self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(*c),
            Label::Similarity(_) => None,
        }
    }

    pub fn similarity(&self) -> Option<f64> {
        match self {
            Label::Similarity(s) => Some(*s),
            Label::Class(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub kind: InstanceKind,
    pub a: Vec<String>,
    pub b: Option<Vec<String>>,
    pub label: Option<Label>,
    pub source: String,
}

impl Instance {
    pub fn single(a: &str, label: Option<Label>, source: &str) -> Instance {
        Instance { kind: InstanceKind::Single, a: tokenize(a), b: None, label, source: source.into() }
    }

    pub fn pair(a: &str, b: &str, label: Option<Label>, source: &str) -> Instance {
        Instance {
            kind: InstanceKind::Pair,
            a: tokenize(a),
            b: Some(tokenize(b)),
            label,
            source: source.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Single,
    PairClass,
    PairSim,
}

impl TaskKind {
    pub fn instance_kind(self) -> InstanceKind {
        match self {
            TaskKind::Single => InstanceKind::Single,
            TaskKind::PairClass | TaskKind::PairSim => InstanceKind::Pair,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub name: String,
    pub kind: TaskKind,
    pub train: Vec<Instance>,
    pub valid: Vec<Instance>,
    pub test: Vec<Instance>,
}

impl TaskDataset {
    pub fn num_classes(&self) -> usize {
        self.train
            .iter()
            .chain(&self.valid)
            .chain(&self.test)
            .filter_map(|i| i.label.and_then(|l| l.class()))
            .max()
            .map_or(0, |m| m + 1)
    }
}

// ---- synthetic tasks ----------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDef {
    pub name: String,
    pub kind: TaskKind,
    /// Instances before the train/valid split.
    pub size: usize,
    pub test_size: usize,
    /// Topic prior; uniform when empty.
    #[serde(default)]
    pub topic_priors: Vec<f64>,
    /// Probability that a classification pair shares its topic.
    #[serde(default = "default_same_rate")]
    pub same_topic_rate: f64,
    /// Share of a classification sentence's content words drawn from its
    /// labelled topic; the rest come from one random distractor topic.
    #[serde(default = "default_purity")]
    pub purity: f64,
}

fn default_same_rate() -> f64 {
    0.5
}

fn default_purity() -> f64 {
    1.0
}

/// Parameters of the latent-topic unigram language behind all tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub topics: usize,
    pub words_per_topic: usize,
    pub function_words: usize,
    /// Probability that a position holds a function word.
    pub function_rate: f64,
    /// Word frequencies within the function words and within each topic
    /// fall off as `rank^-zipf_exponent`.
    pub zipf_exponent: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub corpus_lines: usize,
    pub valid_ratio: f64,
    pub tasks: Vec<TaskDef>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let task = |name: &str, kind, size, test_size, priors: Vec<f64>| TaskDef {
            name: name.into(),
            kind,
            size,
            test_size,
            topic_priors: priors,
            same_topic_rate: 0.5,
            purity: if kind == TaskKind::PairClass { 0.65 } else { 1.0 },
        };
        SyntheticSpec {
            topics: 6,
            words_per_topic: 30,
            function_words: 24,
            function_rate: 0.25,
            zipf_exponent: 1.2,
            min_len: 3,
            max_len: 10,
            corpus_lines: 20_000,
            valid_ratio: 0.9,
            tasks: vec![
                task("topic", TaskKind::Single, 1500, 400, vec![]),
                task("topic-skewed", TaskKind::Single, 1500, 400, vec![0.3, 0.25, 0.15, 0.1, 0.1, 0.1]),
                task("same-topic", TaskKind::PairClass, 1500, 1000, vec![]),
                task("same-topic-b", TaskKind::PairClass, 1500, 1000, vec![0.25, 0.25, 0.2, 0.1, 0.1, 0.1]),
                task("relatedness", TaskKind::PairSim, 1500, 400, vec![]),
            ],
        }
    }
}

/// The generated word inventory plus sampling routines.
pub struct TopicLanguage {
    spec: SyntheticSpec,
    topic_words: Vec<Vec<String>>,
    function_words: Vec<String>,
    zipf: Vec<f64>,
    function_zipf: Vec<f64>,
}

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

impl TopicLanguage {
    pub fn new(spec: &SyntheticSpec, seed: u64) -> Result<TopicLanguage> {
        validate_spec(spec)?;
        let mut rng = RngStream::new(seed).fork(0x77);
        let total = spec.topics * spec.words_per_topic + spec.function_words;
        let mut seen = std::collections::HashSet::new();
        let mut words = Vec::with_capacity(total);
        while words.len() < total {
            let syllables = if words.len() < spec.function_words { 1 + rng.below(2) } else { 2 + rng.below(2) };
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS[rng.below(ONSETS.len())]);
                w.push_str(VOWELS[rng.below(VOWELS.len())]);
            }
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        let function_words = words[..spec.function_words].to_vec();
        let topic_words = words[spec.function_words..]
            .chunks(spec.words_per_topic)
            .map(|c| c.to_vec())
            .collect();
        let ranks = |n: usize| (0..n).map(|j| (j as f64 + 1.0).powf(-spec.zipf_exponent)).collect();
        Ok(TopicLanguage {
            spec: spec.clone(),
            topic_words,
            function_words,
            zipf: ranks(spec.words_per_topic),
            function_zipf: ranks(spec.function_words),
        })
    }

    /// One sentence whose content words follow the topic mixture `theta`.
    pub fn sentence(&self, theta: &[f64], rng: &mut RngStream) -> String {
        let len = self.spec.min_len + rng.below(self.spec.max_len - self.spec.min_len + 1);
        let mut words = Vec::with_capacity(len);
        for _ in 0..len {
            if rng.uniform() < self.spec.function_rate {
                words.push(self.function_words[rng.categorical(&self.function_zipf)].as_str());
            } else {
                let topic = rng.categorical(theta);
                words.push(self.topic_words[topic][rng.categorical(&self.zipf)].as_str());
            }
        }
        words.join(" ")
    }

    fn pure(&self, topic: usize) -> Vec<f64> {
        let mut theta = vec![0.0; self.spec.topics];
        theta[topic] = 1.0;
        theta
    }

    fn other_topic(&self, topic: usize, rng: &mut RngStream) -> usize {
        let other = rng.below(self.spec.topics - 1);
        if other >= topic {
            other + 1
        } else {
            other
        }
    }

    /// `purity` on `topic`, the rest on a random other topic.
    fn blurred(&self, topic: usize, purity: f64, rng: &mut RngStream) -> Vec<f64> {
        let mut theta = self.pure(topic);
        if purity < 1.0 {
            theta[topic] = purity;
            theta[self.other_topic(topic, rng)] = 1.0 - purity;
        }
        theta
    }

    fn priors(&self, def: &TaskDef) -> Vec<f64> {
        if def.topic_priors.is_empty() {
            vec![1.0; self.spec.topics]
        } else {
            def.topic_priors.clone()
        }
    }

    /// One labelled instance of the given task.
    pub fn instance(&self, def: &TaskDef, rng: &mut RngStream) -> Instance {
        let priors = self.priors(def);
        match def.kind {
            TaskKind::Single => {
                let t = rng.categorical(&priors);
                let theta = self.blurred(t, def.purity, rng);
                Instance::single(&self.sentence(&theta, rng), Some(Label::Class(t)), &def.name)
            }
            TaskKind::PairClass => {
                let t1 = rng.categorical(&priors);
                let same = rng.uniform() < def.same_topic_rate;
                let t2 = if same { t1 } else { self.other_topic(t1, rng) };
                let ta = self.blurred(t1, def.purity, rng);
                let tb = self.blurred(t2, def.purity, rng);
                let a = self.sentence(&ta, rng);
                let b = self.sentence(&tb, rng);
                Instance::pair(&a, &b, Some(Label::Class(usize::from(t1 == t2))), &def.name)
            }
            TaskKind::PairSim => {
                let ta = self.mixture(&priors, None, rng);
                let share = rng.uniform() < 0.5;
                let tb = self.mixture(&priors, if share { Some(&ta) } else { None }, rng);
                let a = self.sentence(&ta, rng);
                let b = self.sentence(&tb, rng);
                let label = Label::Similarity(mixture_cosine(&ta, &tb));
                Instance::pair(&a, &b, Some(label), &def.name)
            }
        }
    }

    /// Two-topic mixture; with `anchor` it reuses the anchor's dominant
    /// topic.
    fn mixture(&self, priors: &[f64], anchor: Option<&Vec<f64>>, rng: &mut RngStream) -> Vec<f64> {
        let first = match anchor {
            Some(theta) => theta
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap(),
            None => rng.categorical(priors),
        };
        let second = rng.categorical(priors);
        let w = rng.uniform_range(0.5, 1.0);
        let mut theta = vec![0.0; self.spec.topics];
        theta[first] += w;
        theta[second] += 1.0 - w;
        theta
    }
}

/// Cosine of two topic mixtures; non-negative mixtures give values in `[0, 1]`.
pub fn mixture_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(0.0, 1.0)
}

fn validate_spec(spec: &SyntheticSpec) -> Result<()> {
    if spec.topics < 2 {
        return Err(Error::Config("at least two topics are needed for non-constant labels".into()));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::Config(format!("bad length range {}..={}", spec.min_len, spec.max_len)));
    }
    if spec.words_per_topic == 0 || spec.function_words == 0 {
        return Err(Error::Config("word inventories must be non-empty".into()));
    }
    if !(spec.zipf_exponent >= 0.0 && spec.zipf_exponent.is_finite()) {
        return Err(Error::Config("Zipf exponent must be finite and non-negative".into()));
    }
    for kind in [TaskKind::Single, TaskKind::PairClass, TaskKind::PairSim] {
        if !spec.tasks.iter().any(|t| t.kind == kind) {
            return Err(Error::Config(format!("task list needs at least one {kind:?} task")));
        }
    }
    for t in &spec.tasks {
        if !t.topic_priors.is_empty() && t.topic_priors.len() != spec.topics {
            return Err(Error::Config(format!("task {}: priors need {} entries", t.name, spec.topics)));
        }
        if t.size < 2 {
            return Err(Error::Config(format!("task {} is too small", t.name)));
        }
        if !(t.purity > 0.0 && t.purity <= 1.0) || !(0.0..=1.0).contains(&t.same_topic_rate) {
            return Err(Error::Config(format!("task {}: purity and same-topic rate must be probabilities", t.name)));
        }
    }
    Ok(())
}

/// Corpus lines for pre-training, drawn from random topic mixtures.
pub fn generate_corpus(spec: &SyntheticSpec, seed: u64) -> Result<Vec<String>> {
    let lang = TopicLanguage::new(spec, seed)?;
    let mut rng = RngStream::new(seed).fork(0xc0);
    let uniform = vec![1.0; spec.topics];
    Ok((0..spec.corpus_lines)
        .map(|_| {
            let theta = if rng.uniform() < 0.7 {
                lang.pure(rng.categorical(&uniform))
            } else {
                lang.mixture(&uniform, None, &mut rng)
            };
            lang.sentence(&theta, &mut rng)
        })
        .collect())
}

pub fn generate_synthetic_tasks(spec: &SyntheticSpec, seed: u64) -> Result<Vec<TaskDataset>> {
    let lang = TopicLanguage::new(spec, seed)?;
    spec.tasks
        .iter()
        .enumerate()
        .map(|(i, def)| {
            let mut rng = RngStream::new(seed).fork(0x100 + i as u64);
            let pool: Vec<Instance> = (0..def.size).map(|_| lang.instance(def, &mut rng)).collect();
            let test = (0..def.test_size).map(|_| lang.instance(def, &mut rng)).collect();
            let (train, valid) = split_train_valid(&pool, spec.valid_ratio, seed.wrapping_add(i as u64))?;
            Ok(TaskDataset { name: def.name.clone(), kind: def.kind, train, valid, test })
        })
        .collect()
}

/// Deterministic shuffled split; the train part gets `round(ratio · n)`
/// instances.
pub fn split_train_valid<I: Clone>(items: &[I], ratio: f64, seed: u64) -> Result<(Vec<I>, Vec<I>)> {
    if items.is_empty() {
        return Err(Error::Input("cannot split an empty dataset".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    RngStream::new(seed).shuffle(&mut order);
    let n_train = (ratio * items.len() as f64).round() as usize;
    let train = order[..n_train].iter().map(|&i| items[i].clone()).collect();
    let valid = order[n_train..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, valid))
}

// ---- episodes -------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct EpisodeSample {
    pub kind: InstanceKind,
    pub source: String,
    pub instances: Vec<Instance>,
}

/// Which split of a dataset an episode draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl TaskDataset {
    pub fn split(&self, split: Split) -> &[Instance] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// Picks a dataset uniformly among those with at least `k` instances in
/// `split`, then `k` of its instances without replacement.
pub fn sample_episode(
    datasets: &[TaskDataset],
    split: Split,
    k: usize,
    rng: &mut RngStream,
) -> Result<EpisodeSample> {
    let eligible: Vec<&TaskDataset> = datasets.iter().filter(|d| d.split(split).len() >= k).collect();
    if eligible.is_empty() || k == 0 {
        return Err(Error::Input(format!("no dataset has at least {k} instances")));
    }
    let ds = eligible[rng.below(eligible.len())];
    let pool = ds.split(split);
    let instances = rng.sample_indices(pool.len(), k).into_iter().map(|i| pool[i].clone()).collect();
    Ok(EpisodeSample { kind: ds.kind.instance_kind(), source: ds.name.clone(), instances })
}

// ---- files ----------------------------------------------------------------

pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}

pub fn write_corpus(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

fn format_label(label: &Option<Label>) -> String {
    match label {
        None => String::new(),
        Some(Label::Class(c)) => c.to_string(),
        Some(Label::Similarity(s)) => format!("{s:.6}"),
    }
}

fn parse_label(field: &str) -> std::result::Result<Option<Label>, String> {
    let f = field.trim();
    if f.is_empty() {
        return Ok(None);
    }
    if f.contains(['.', 'e', 'E']) {
        f.parse::<f64>().map(|s| Some(Label::Similarity(s))).map_err(|e| e.to_string())
    } else {
        f.parse::<usize>().map(|c| Some(Label::Class(c))).map_err(|e| e.to_string())
    }
}

/// One instance per line: `single<TAB>text<TAB>label` or
/// `pair<TAB>text-a<TAB>text-b<TAB>label`.
pub fn write_instances(path: &Path, instances: &[Instance]) -> Result<()> {
    let mut text = String::new();
    for inst in instances {
        match (&inst.kind, &inst.b) {
            (InstanceKind::Pair, Some(b)) => {
                let _ = writeln!(
                    text,
                    "pair\t{}\t{}\t{}",
                    inst.a.join(" "),
                    b.join(" "),
                    format_label(&inst.label)
                );
            }
            _ => {
                let _ = writeln!(text, "single\t{}\t{}", inst.a.join(" "), format_label(&inst.label));
            }
        }
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_instances(path: &Path, source: &str) -> Result<Vec<Instance>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Parse { path: path.to_path_buf(), line: n + 1, reason };
        let fields: Vec<&str> = line.split('\t').collect();
        let inst = match fields[0] {
            "single" if fields.len() == 3 => {
                Instance::single(fields[1], parse_label(fields[2]).map_err(bad)?, source)
            }
            "pair" if fields.len() == 4 => {
                Instance::pair(fields[1], fields[2], parse_label(fields[3]).map_err(bad)?, source)
            }
            other => return Err(bad(format!("unexpected record kind `{other}` with {} fields", fields.len()))),
        };
        out.push(inst);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TaskIndexEntry {
    name: String,
    kind: TaskKind,
}

/// Writes `<dir>/tasks.json` and `<dir>/<name>.{train,valid,test}.tsv`.
pub fn write_tasks(dir: &Path, tasks: &[TaskDataset]) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let index: Vec<TaskIndexEntry> =
        tasks.iter().map(|t| TaskIndexEntry { name: t.name.clone(), kind: t.kind }).collect();
    let idx_path = dir.join("tasks.json");
    let json = serde_json::to_string_pretty(&index).expect("plain data");
    fs::write(&idx_path, json + "\n").map_err(io_err(&idx_path))?;
    for t in tasks {
        for (split, items) in [("train", &t.train), ("valid", &t.valid), ("test", &t.test)] {
            write_instances(&task_file(dir, &t.name, split), items)?;
        }
    }
    Ok(())
}

fn task_file(dir: &Path, name: &str, split: &str) -> PathBuf {
    dir.join(format!("{name}.{split}.tsv"))
}

pub fn read_tasks(dir: &Path) -> Result<Vec<TaskDataset>> {
    let idx_path = dir.join("tasks.json");
    let text = fs::read_to_string(&idx_path).map_err(io_err(&idx_path))?;
    let index: Vec<TaskIndexEntry> =
        serde_json::from_str(&text).map_err(|source| Error::Json { path: idx_path.clone(), source })?;
    index
        .into_iter()
        .map(|e| {
            Ok(TaskDataset {
                train: read_instances(&task_file(dir, &e.name, "train"), &e.name)?,
                valid: read_instances(&task_file(dir, &e.name, "valid"), &e.name)?,
                test: read_instances(&task_file(dir, &e.name, "test"), &e.name)?,
                name: e.name,
                kind: e.kind,
            })
        })
        .collect()
}
