//! Synthetic multi-domain corpus generation with controllable inter-task
//! unrelatedness, plus JSONL ingestion and deterministic splits.
//!
//! Each domain owns a disjoint content-token band and a distinct
//! deterministic grammar; sequences share only a small function-token band
//! (BOS/SEP). A sequence is a 4-token header (the instance key, sampled
//! without replacement) followed by a body that is a pure function of the
//! header, so every supervised position has exactly one correct
//! continuation.

use crate::error::{Error, Result};
use crate::numcore::RngStream;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::BufRead;
use std::path::{Path, PathBuf};

/// Beginning-of-sequence marker (function band).
pub const BOS: usize = 0;
/// Segment separator, inserted every eighth body slot (function band).
pub const SEP: usize = 1;
/// Header tokens drawn from the domain band after BOS.
pub const HEADER_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainRole {
    Forget,
    Retain,
    Downstream,
}

/// Deterministic body grammars; one per domain so fine-tuning directions on
/// distinct domains stay close to orthogonal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrammarKind {
    /// x_{k+1} = x_k + stride (mod band), stride declared in the header.
    StrideChain,
    /// Ascending runs of declared length, restarting at the anchor token.
    SortedRuns,
    /// The 4-token header repeated verbatim.
    PeriodicRepeat,
    /// The header followed by its reflection, cycled with period 8.
    MirrorCycle,
    /// Two interleaved chains with strides 1 and 3.
    InterleavedStrides,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub role: DomainRole,
    /// Content band `[token_lo, token_hi)`, disjoint from every other domain.
    pub token_lo: usize,
    pub token_hi: usize,
    pub grammar: GrammarKind,
}

impl DomainSpec {
    pub fn band_size(&self) -> usize {
        self.token_hi - self.token_lo
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub name: String,
    pub examples: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSuiteConfig {
    pub vocab: usize,
    pub seq_len: usize,
    /// Size of the shared function-token band `[0, function_tokens)`.
    pub function_tokens: usize,
    pub domains: Vec<DomainSpec>,
    pub splits: Vec<SplitSpec>,
    pub seed: u64,
}

impl Default for SyntheticSuiteConfig {
    fn default() -> Self {
        let domains = vec![
            ("forget", DomainRole::Forget, GrammarKind::StrideChain),
            ("retain", DomainRole::Retain, GrammarKind::SortedRuns),
            ("t1", DomainRole::Downstream, GrammarKind::PeriodicRepeat),
            ("t2", DomainRole::Downstream, GrammarKind::MirrorCycle),
            ("t3", DomainRole::Downstream, GrammarKind::InterleavedStrides),
        ];
        let band = 11;
        let domains = domains
            .into_iter()
            .enumerate()
            .map(|(i, (name, role, grammar))| DomainSpec {
                name: name.to_string(),
                role,
                token_lo: 8 + i * band,
                token_hi: 8 + (i + 1) * band,
                grammar,
            })
            .collect();
        SyntheticSuiteConfig {
            vocab: 64,
            seq_len: 32,
            function_tokens: 8,
            domains,
            splits: vec![
                SplitSpec { name: "train".to_string(), examples: 2000 },
                SplitSpec { name: "eval".to_string(), examples: 500 },
                SplitSpec { name: "test".to_string(), examples: 500 },
            ],
            seed: 0,
        }
    }
}

impl SyntheticSuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.function_tokens < 2 {
            return Err(Error::argument("function band needs at least BOS and SEP".to_string()));
        }
        if self.seq_len < HEADER_LEN + 4 {
            return Err(Error::argument(format!(
                "seq_len {} too short for header plus body",
                self.seq_len
            )));
        }
        if self.splits.iter().any(|s| s.examples == 0) {
            return Err(Error::argument("every split needs at least one example".to_string()));
        }
        let mut names: Vec<&str> = self.domains.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.domains.len() {
            return Err(Error::argument("duplicate domain names".to_string()));
        }
        for d in &self.domains {
            if d.token_lo < self.function_tokens || d.token_hi > self.vocab || d.band_size() < 5 {
                return Err(Error::argument(format!(
                    "domain `{}` band [{}, {}) invalid for vocab {} with function band {}",
                    d.name, d.token_lo, d.token_hi, self.vocab, self.function_tokens
                )));
            }
        }
        for (i, a) in self.domains.iter().enumerate() {
            for b in &self.domains[i + 1..] {
                if a.token_lo < b.token_hi && b.token_lo < a.token_hi {
                    return Err(Error::argument(format!(
                        "domains `{}` and `{}` have overlapping token ranges",
                        a.name, b.name
                    )));
                }
            }
        }
        let total: usize = self.splits.iter().map(|s| s.examples).sum();
        for d in &self.domains {
            let headers = d.band_size().pow(HEADER_LEN as u32);
            if total > headers {
                return Err(Error::argument(format!(
                    "domain `{}` has only {headers} distinct headers but {total} examples requested",
                    d.name
                )));
            }
        }
        Ok(())
    }

    pub fn domain(&self, name: &str) -> Result<&DomainSpec> {
        self.domains
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::argument(format!("no domain named `{name}`")))
    }
}

/// One supervised example. `target` supervises the final `target.len()`
/// input positions: `target[j]` is the token following input position
/// `input.len() - target.len() + j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSequence {
    pub task: String,
    pub input: Vec<usize>,
    pub target: TargetSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetSpec {
    NextTokens(Vec<usize>),
    Class(usize),
}

impl LabeledSequence {
    pub fn next_tokens(&self) -> &[usize] {
        match &self.target {
            TargetSpec::NextTokens(t) => t,
            TargetSpec::Class(_) => panic!("class-labeled sequence used as next-token data"),
        }
    }

    /// Index of the first supervised input position.
    pub fn supervised_from(&self) -> usize {
        self.input.len() - self.next_tokens().len()
    }
}

/// Emits the grammar body token (a band value in `[0, band)`) for body
/// index `k`, given header values and the number of separators seen.
fn body_value(grammar: GrammarKind, h: &[usize; HEADER_LEN], k: usize, seps: usize, n: usize) -> usize {
    let (a, b, c, d) = (h[0], h[1], h[2], h[3]);
    match grammar {
        GrammarKind::StrideChain => {
            let stride = 1 + b % 4;
            (a + (k + 1) * stride + seps * c) % n
        }
        GrammarKind::SortedRuns => {
            let run = 2 + b % 3;
            (a + seps * c + k % run) % n
        }
        GrammarKind::PeriodicRepeat => [a, b, c, d][k % 4],
        GrammarKind::MirrorCycle => [a, b, c, d, d, c, b, a][k % 8],
        GrammarKind::InterleavedStrides => {
            if k % 2 == 0 {
                (a + k / 2) % n
            } else {
                (b + 3 * (k / 2)) % n
            }
        }
    }
}

/// Builds the full token sequence (length `seq_len + 1`) for one header.
fn build_sequence(cfg: &SyntheticSuiteConfig, domain: &DomainSpec, header: &[usize; HEADER_LEN]) -> Vec<usize> {
    let n = domain.band_size();
    let mut s = Vec::with_capacity(cfg.seq_len + 1);
    s.push(BOS);
    for &h in header {
        s.push(domain.token_lo + h);
    }
    let mut k = 0;
    let mut seps = 0;
    for p in (1 + HEADER_LEN)..=cfg.seq_len {
        if (p - 1 - HEADER_LEN) % 8 == 7 {
            s.push(SEP);
            seps += 1;
        } else {
            s.push(domain.token_lo + body_value(domain.grammar, header, k, seps, n));
            k += 1;
        }
    }
    s
}

fn sequence_to_example(cfg: &SyntheticSuiteConfig, domain: &DomainSpec, header: &[usize; HEADER_LEN]) -> LabeledSequence {
    let s = build_sequence(cfg, domain, header);
    let input = s[..cfg.seq_len].to_vec();
    let target = s[1 + HEADER_LEN..].to_vec();
    LabeledSequence {
        task: domain.name.clone(),
        input,
        target: TargetSpec::NextTokens(target),
    }
}

/// Suite manifest written next to the data files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub config: SyntheticSuiteConfig,
    pub files: Vec<SuiteFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteFile {
    pub domain: String,
    pub split: String,
    pub path: String,
    pub lines: usize,
    pub sha256: String,
}

pub const SUITE_MANIFEST: &str = "suite.json";

/// Generates every `(domain, split)` JSONL file plus `suite.json`.
/// Byte-identical output for identical config.
pub fn generate_suite(cfg: &SyntheticSuiteConfig, out_dir: &Path) -> Result<SuiteManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let total: usize = cfg.splits.iter().map(|s| s.examples).sum();
    let mut files = Vec::new();

    for (di, domain) in cfg.domains.iter().enumerate() {
        let n = domain.band_size();
        // Enumerate the header space and shuffle it once per domain; splits
        // are then disjoint prefixes, so train/eval leakage is impossible.
        let header_count = n.pow(HEADER_LEN as u32);
        let mut indices: Vec<usize> = (0..header_count).collect();
        let mut rng = RngStream::new(cfg.seed, 0x0da7a_0000 + di as u64);
        rng.shuffle(&mut indices);

        let mut at = 0;
        for split in &cfg.splits {
            let path = out_dir.join(format!("{}_{}.jsonl", domain.name, split.name));
            let mut buf = Vec::new();
            for &hidx in &indices[at..at + split.examples] {
                let header = [
                    hidx % n,
                    (hidx / n) % n,
                    (hidx / (n * n)) % n,
                    (hidx / (n * n * n)) % n,
                ];
                let ex = sequence_to_example(cfg, domain, &header);
                serde_json::to_writer(&mut buf, &ex)?;
                buf.push(b'\n');
            }
            at += split.examples;
            std::fs::write(&path, &buf)?;
            files.push(SuiteFile {
                domain: domain.name.clone(),
                split: split.name.clone(),
                path: path.file_name().unwrap().to_string_lossy().into_owned(),
                lines: split.examples,
                sha256: hex_digest(&buf),
            });
        }
        debug_assert_eq!(at, total);
    }

    let manifest = SuiteManifest {
        config: cfg.clone(),
        files,
    };
    let mut buf = serde_json::to_vec_pretty(&manifest)?;
    buf.push(b'\n');
    std::fs::write(out_dir.join(SUITE_MANIFEST), buf)?;
    Ok(manifest)
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn read_manifest(dir: &Path) -> Result<SuiteManifest> {
    let path = dir.join(SUITE_MANIFEST);
    let bytes = std::fs::read(&path)
        .map_err(|e| Error::argument(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Order-preserving load of one `(domain, split)` file with full record
/// validation against the suite manifest.
pub fn load_split(dir: &Path, domain: &str, split: &str) -> Result<Vec<LabeledSequence>> {
    let manifest = read_manifest(dir)?;
    let vocab = manifest.config.vocab;
    let path = dir.join(format!("{domain}_{split}.jsonl"));
    let file = std::fs::File::open(&path)
        .map_err(|e| Error::argument(format!("cannot open {}: {e}", path.display())))?;
    let reader = std::io::BufReader::new(file);

    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabeledSequence = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        validate_record(&rec, vocab, lineno)?;
        out.push(rec);
    }
    Ok(out)
}

fn validate_record(rec: &LabeledSequence, vocab: usize, line: usize) -> Result<()> {
    if rec.input.is_empty() {
        return Err(Error::Validation {
            line,
            field: "input".to_string(),
            message: "empty input sequence".to_string(),
        });
    }
    if let Some(&tok) = rec.input.iter().find(|&&t| t >= vocab) {
        return Err(Error::Validation {
            line,
            field: "input".to_string(),
            message: format!("token id {tok} >= vocab {vocab}"),
        });
    }
    match &rec.target {
        TargetSpec::NextTokens(ts) => {
            if ts.is_empty() || ts.len() > rec.input.len() {
                return Err(Error::Validation {
                    line,
                    field: "target".to_string(),
                    message: format!(
                        "target length {} inconsistent with input length {}",
                        ts.len(),
                        rec.input.len()
                    ),
                });
            }
            if let Some(&tok) = ts.iter().find(|&&t| t >= vocab) {
                return Err(Error::Validation {
                    line,
                    field: "target".to_string(),
                    message: format!("token id {tok} >= vocab {vocab}"),
                });
            }
        }
        TargetSpec::Class(c) => {
            if *c >= vocab {
                return Err(Error::Validation {
                    line,
                    field: "target".to_string(),
                    message: format!("class label {c} >= vocab {vocab}"),
                });
            }
        }
    }
    Ok(())
}

/// All splits of all domains, loaded once and shared read-only.
#[derive(Debug, Clone)]
pub struct SuiteData {
    pub config: SyntheticSuiteConfig,
    pub dir: PathBuf,
    splits: Vec<((String, String), Vec<LabeledSequence>)>,
}

impl SuiteData {
    pub fn load(dir: &Path) -> Result<SuiteData> {
        let manifest = read_manifest(dir)?;
        let mut splits = Vec::new();
        for f in &manifest.files {
            let data = load_split(dir, &f.domain, &f.split)?;
            splits.push(((f.domain.clone(), f.split.clone()), data));
        }
        Ok(SuiteData {
            config: manifest.config,
            dir: dir.to_path_buf(),
            splits,
        })
    }

    pub fn split(&self, domain: &str, split: &str) -> Result<&[LabeledSequence]> {
        self.splits
            .iter()
            .find(|((d, s), _)| d == domain && s == split)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::argument(format!("no split `{split}` for domain `{domain}`")))
    }

    pub fn forget_domain(&self) -> &DomainSpec {
        self.config
            .domains
            .iter()
            .find(|d| d.role == DomainRole::Forget)
            .expect("suite has no forget domain")
    }

    pub fn retain_domain(&self) -> &DomainSpec {
        self.config
            .domains
            .iter()
            .find(|d| d.role == DomainRole::Retain)
            .expect("suite has no retain domain")
    }

    pub fn downstream_domains(&self) -> Vec<&DomainSpec> {
        self.config
            .domains
            .iter()
            .filter(|d| d.role == DomainRole::Downstream)
            .collect()
    }
}
