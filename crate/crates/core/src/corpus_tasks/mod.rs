//! Deterministic synthetic corpora: captioned color grids, text-only
//! sentences with extra styles, and RL task sets.

mod jsonl;

pub use jsonl::{load_jsonl, read_manifest, save_jsonl, write_manifest};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{ImageGrid, Sample, TokenId, Vocabulary, BOS, EOS};
use crate::config::ModelConfig;
use crate::error::{ensure, Error, Result};
use crate::rl_engine::reward::{RewardSpec, RlTask};
use crate::seed;

pub const GENERATOR_VERSION: &str = "grid-captions/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub name: String,
    pub tag: String,
    pub markers: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrammarSpec {
    pub colors: Vec<String>,
    pub styles: Vec<StyleSpec>,
    pub paired_styles: Vec<String>,
    pub text_only_styles: Vec<String>,
    pub openers: Vec<Vec<String>>,
    pub grid_height: usize,
    pub grid_width: usize,
    /// Probability that each marker slot is filled.
    pub marker_prob: f64,
    /// Probability that the position clause is included.
    pub position_prob: f64,
    /// Share of text-only samples drawn from `text_only_styles`.
    pub text_only_style_fraction: f64,
    pub len_min: usize,
    pub len_max: usize,
}

const COLORS: [&str; 12] =
    ["red", "blue", "green", "yellow", "purple", "orange", "black", "white", "pink", "brown", "gray", "cyan"];

const STYLES: [(&str, [&str; 3]); 6] = [
    ("plain", ["simply", "just", "basically"]),
    ("formal", ["indeed", "hence", "notably"]),
    ("cheerful", ["wow", "yay", "lovely"]),
    ("pirate", ["arr", "matey", "ahoy"]),
    ("poetic", ["behold", "lo", "thus"]),
    ("royal", ["verily", "hark", "alas"]),
];

const OPENERS: [&[&str]; 3] = [&["the", "grid", "is", "mostly"], &["the", "picture", "shows", "mostly"], &["this", "image", "has", "mostly"]];

const FILLER: [&str; 5] = ["with", "some", "near", "top", "bottom"];

impl GrammarSpec {
    /// The default grammar sized to a model configuration.
    pub fn for_model(cfg: &ModelConfig) -> Result<Self> {
        ensure(cfg.num_colors >= 3 && cfg.num_colors <= COLORS.len(), || {
            format!("grammar supports 3..={} colors, got {}", COLORS.len(), cfg.num_colors)
        })?;
        let styles = STYLES
            .iter()
            .map(|(n, m)| StyleSpec {
                name: n.to_string(),
                tag: format!("<{n}>"),
                markers: m.iter().map(|s| s.to_string()).collect(),
            })
            .collect();
        let spec = Self {
            colors: COLORS[..cfg.num_colors].iter().map(|s| s.to_string()).collect(),
            styles,
            paired_styles: vec!["plain".into(), "formal".into(), "cheerful".into()],
            text_only_styles: vec!["pirate".into(), "poetic".into(), "royal".into()],
            openers: OPENERS.iter().map(|o| o.iter().map(|s| s.to_string()).collect()).collect(),
            grid_height: cfg.grid_height,
            grid_width: cfg.grid_width,
            marker_prob: 1.0 / 3.0,
            position_prob: 0.5,
            text_only_style_fraction: 0.5,
            len_min: 4,
            len_max: 24,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.colors.len() >= 3, || "grammar needs at least 3 colors".into())?;
        ensure(self.grid_height >= 2 && self.grid_height % 2 == 0, || {
            "grid height must be even (top/bottom halves)".into()
        })?;
        ensure(self.grid_height * self.grid_width >= 4, || "grid too small".into())?;
        for s in self.paired_styles.iter().chain(&self.text_only_styles) {
            self.style(s)?;
        }
        ensure((0.0..=1.0).contains(&self.marker_prob), || "marker_prob outside [0,1]".into())?;
        ensure((0.0..=1.0).contains(&self.position_prob), || "position_prob outside [0,1]".into())?;
        ensure((0.0..=1.0).contains(&self.text_only_style_fraction), || "style fraction outside [0,1]".into())?;
        ensure(!self.openers.is_empty(), || "grammar needs an opener".into())
    }

    pub fn style(&self, name: &str) -> Result<&StyleSpec> {
        self.styles
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::validation(format!("unknown style `{name}`")))
    }

    pub fn style_of_tag(&self, tag: &str) -> Option<&StyleSpec> {
        self.styles.iter().find(|s| s.tag == tag)
    }

    /// Every word the grammar can emit, in a fixed order.
    pub fn words(&self) -> Vec<String> {
        let mut w: Vec<String> = self.colors.clone();
        for s in &self.styles {
            w.push(s.tag.clone());
        }
        for s in &self.styles {
            w.extend(s.markers.iter().cloned());
        }
        for o in &self.openers {
            w.extend(o.iter().cloned());
        }
        w.extend(FILLER.iter().map(|s| s.to_string()));
        let mut seen = std::collections::HashSet::new();
        w.retain(|x| seen.insert(x.clone()));
        w
    }

    pub fn vocabulary(&self, size: usize) -> Result<Vocabulary> {
        Vocabulary::new(&self.words(), size)
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("grammar serializes");
        format!("{:x}", Sha256::digest(bytes))
    }
}

/// Ground-truth facts a caption can state about a grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridFacts {
    pub modal: u8,
    pub second: u8,
    /// True when the modal color has more cells in the top half.
    pub top: bool,
}

/// Counts cells; `None` unless the modal and second colors are strict and
/// the halves are not tied.
pub fn grid_facts(grid: &ImageGrid, num_colors: usize) -> Option<GridFacts> {
    let mut counts = vec![0usize; num_colors];
    for &c in grid.cells() {
        *counts.get_mut(c as usize)? += 1;
    }
    let mut order: Vec<usize> = (0..num_colors).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let (m, s) = (order[0], order[1]);
    if counts[m] == counts[s] || (order.len() > 2 && counts[s] == counts[order[2]]) || counts[s] == 0 {
        return None;
    }
    let half = grid.height() / 2;
    let (mut top, mut bottom) = (0, 0);
    for r in 0..grid.height() {
        for c in 0..grid.width() {
            if grid.get(r, c) as usize == m {
                if r < half {
                    top += 1;
                } else {
                    bottom += 1;
                }
            }
        }
    }
    (top != bottom).then_some(GridFacts { modal: m as u8, second: s as u8, top: top > bottom })
}

/// A random grid with a strict modal color, strict runner-up and untied halves.
pub fn random_grid(spec: &GrammarSpec, rng: &mut impl Rng) -> ImageGrid {
    let (h, w) = (spec.grid_height, spec.grid_width);
    let n = h * w;
    let k = spec.colors.len();
    for attempt in 0.. {
        let modal = rng.gen_range(0..k);
        let mut second = rng.gen_range(0..k - 1);
        if second >= modal {
            second += 1;
        }
        let lo = (n as f64 * 0.39).ceil() as usize;
        let hi = if attempt < 64 { ((n as f64 * 0.56).floor() as usize).max(lo) } else { n - 1 };
        let cm = rng.gen_range(lo..=hi);
        let rest = n - cm;
        let c2 = if rest == 0 { 0 } else { rng.gen_range((rest / 2).max(1)..=rest.min(cm - 1).max(1)) };
        let mut cells: Vec<u8> = Vec::with_capacity(n);
        cells.extend(std::iter::repeat(modal as u8).take(cm));
        cells.extend(std::iter::repeat(second as u8).take(c2.min(rest)));
        let others: Vec<usize> = (0..k).filter(|&c| c != modal && c != second).collect();
        while cells.len() < n {
            cells.push(*others.choose(rng).unwrap_or(&second) as u8);
        }
        cells.shuffle(rng);
        let grid = ImageGrid::new(h, w, cells).expect("sized grid");
        if let Some(f) = grid_facts(&grid, k) {
            if f.modal as usize == modal && f.second as usize == second {
                return grid;
            }
        }
    }
    unreachable!("grid search is unbounded")
}

/// Caption words after the style tag, describing `facts` in `style`.
pub fn caption_words(spec: &GrammarSpec, style: &StyleSpec, facts: GridFacts, rng: &mut impl Rng) -> Vec<String> {
    let mut out = Vec::new();
    let marker = |out: &mut Vec<String>, i: usize, rng: &mut dyn rand::RngCore| {
        if rng.gen_bool(spec.marker_prob) {
            out.push(style.markers[i % style.markers.len()].clone());
        }
    };
    marker(&mut out, 0, rng);
    out.extend(spec.openers.choose(rng).expect("opener").iter().cloned());
    out.push(spec.colors[facts.modal as usize].clone());
    marker(&mut out, 1, rng);
    out.push("with".into());
    out.push("some".into());
    out.push(spec.colors[facts.second as usize].clone());
    if rng.gen_bool(spec.position_prob) {
        out.push("near".into());
        out.push("the".into());
        out.push(if facts.top { "top" } else { "bottom" }.into());
    }
    marker(&mut out, 2, rng);
    out
}

fn encode(vocab: &Vocabulary, words: &[String]) -> Result<Vec<TokenId>> {
    words.iter().map(|w| vocab.expect_id(w)).collect()
}

/// `[BOS, tag, caption.., EOS]`.
pub fn caption_tokens(
    spec: &GrammarSpec,
    vocab: &Vocabulary,
    style: &StyleSpec,
    facts: GridFacts,
    rng: &mut impl Rng,
) -> Result<Vec<TokenId>> {
    let mut t = vec![BOS, vocab.expect_id(&style.tag)?];
    t.extend(encode(vocab, &caption_words(spec, style, facts, rng))?);
    t.push(EOS);
    Ok(t)
}

fn check_n(n: usize) -> Result<()> {
    ensure(n >= 1, || "corpus size must be at least 1".into())
}

/// Captioned grids in paired styles; captions are true of their grid.
pub fn gen_paired(spec: &GrammarSpec, vocab: &Vocabulary, n: usize, seed: u64) -> Result<Vec<Sample>> {
    check_n(n)?;
    spec.validate()?;
    let styles: Vec<&StyleSpec> = spec.paired_styles.iter().map(|s| spec.style(s)).collect::<Result<_>>()?;
    ensure(!styles.is_empty(), || "no paired styles".into())?;
    let k = spec.colors.len();
    (0..n)
        .map(|i| {
            let mut rng = seed::rng(seed, &[1, i as u64]);
            let grid = random_grid(spec, &mut rng);
            let facts = grid_facts(&grid, k).expect("generated grids have facts");
            let style = styles[rng.gen_range(0..styles.len())];
            Ok(Sample::paired(grid, caption_tokens(spec, vocab, style, facts, &mut rng)?))
        })
        .collect()
}

/// Image-free sentences with random facts; text-only styles appear with
/// probability `text_only_style_fraction`.
pub fn gen_text_only(spec: &GrammarSpec, vocab: &Vocabulary, n: usize, seed: u64) -> Result<Vec<Sample>> {
    check_n(n)?;
    spec.validate()?;
    let paired: Vec<&StyleSpec> = spec.paired_styles.iter().map(|s| spec.style(s)).collect::<Result<_>>()?;
    let extra: Vec<&StyleSpec> = spec.text_only_styles.iter().map(|s| spec.style(s)).collect::<Result<_>>()?;
    ensure(!paired.is_empty() || !extra.is_empty(), || "no styles".into())?;
    let k = spec.colors.len();
    (0..n)
        .map(|i| {
            let mut rng = seed::rng(seed, &[2, i as u64]);
            let pool = if !extra.is_empty() && (paired.is_empty() || rng.gen_bool(spec.text_only_style_fraction)) {
                &extra
            } else {
                &paired
            };
            let style = pool[rng.gen_range(0..pool.len())];
            let modal = rng.gen_range(0..k);
            let mut second = rng.gen_range(0..k - 1);
            if second >= modal {
                second += 1;
            }
            let facts = GridFacts { modal: modal as u8, second: second as u8, top: rng.gen_bool(0.5) };
            Ok(Sample::text(caption_tokens(spec, vocab, style, facts, &mut rng)?))
        })
        .collect()
}

/// The checklist for a grid described in `style`.
pub fn reward_spec(spec: &GrammarSpec, vocab: &Vocabulary, style: &StyleSpec, facts: GridFacts) -> Result<RewardSpec> {
    let required = vec![
        vocab.expect_id(&spec.colors[facts.modal as usize])?,
        vocab.expect_id(if facts.top { "top" } else { "bottom" })?,
    ];
    let markers = encode(vocab, &style.markers)?;
    let mut forbidden = Vec::new();
    for s in spec.styles.iter().filter(|s| s.name != style.name) {
        forbidden.extend(encode(vocab, &s.markers)?);
    }
    Ok(RewardSpec { required, forbidden, markers, len_min: spec.len_min, len_max: spec.len_max, weights: vec![0.25; 4] })
}

pub fn gen_rl_tasks(
    spec: &GrammarSpec,
    vocab: &Vocabulary,
    n: usize,
    seed: u64,
    target_styles: &[String],
) -> Result<Vec<RlTask>> {
    check_n(n)?;
    spec.validate()?;
    ensure(!target_styles.is_empty(), || "no target styles".into())?;
    let styles: Vec<&StyleSpec> = target_styles.iter().map(|s| spec.style(s)).collect::<Result<_>>()?;
    let k = spec.colors.len();
    (0..n)
        .map(|i| {
            let mut rng = seed::rng(seed, &[3, i as u64]);
            let grid = random_grid(spec, &mut rng);
            let facts = grid_facts(&grid, k).expect("generated grids have facts");
            let style = styles[rng.gen_range(0..styles.len())];
            let reward = reward_spec(spec, vocab, style, facts)?;
            Ok(RlTask { image: grid, prompt: vec![BOS, vocab.expect_id(&style.tag)?], reward })
        })
        .collect()
}

/// A reference response (caption words after the prompt, then EOS) for a task.
pub fn reference_response(
    spec: &GrammarSpec,
    vocab: &Vocabulary,
    task: &RlTask,
    rng: &mut impl Rng,
) -> Result<Vec<TokenId>> {
    let tag = task.prompt.last().map(|&t| vocab.token(t)).unwrap_or("");
    let style = spec.style_of_tag(tag).ok_or_else(|| Error::validation(format!("prompt has no style tag (`{tag}`)")))?;
    let facts = grid_facts(&task.image, spec.colors.len())
        .ok_or_else(|| Error::validation("task grid has ambiguous facts"))?;
    let mut t = encode(vocab, &caption_words(spec, style, facts, rng))?;
    t.push(EOS);
    Ok(t)
}

/// Supervised `(prompt ++ response)` samples for SFT.
pub fn sft_samples(spec: &GrammarSpec, vocab: &Vocabulary, tasks: &[RlTask], seed: u64) -> Result<Vec<Sample>> {
    tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut rng = seed::rng(seed, &[4, i as u64]);
            let mut tokens = t.prompt.clone();
            tokens.extend(reference_response(spec, vocab, t, &mut rng)?);
            Ok(Sample::paired(t.image.clone(), tokens))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub counts: std::collections::BTreeMap<String, usize>,
    pub grammar_hash: String,
    pub generator_version: String,
}

/// All splits of one generated corpus.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub paired: Vec<Sample>,
    pub text: Vec<Sample>,
    pub paired_heldout: Vec<Sample>,
    pub text_heldout: Vec<Sample>,
    pub train_tasks: Vec<RlTask>,
    pub id_tasks: Vec<RlTask>,
    pub ood_tasks: Vec<RlTask>,
}

impl Corpus {
    /// Held-out splits hold `heldout` samples each; task splits hold `n_tasks`.
    pub fn generate(
        spec: &GrammarSpec,
        vocab: &Vocabulary,
        n_paired: usize,
        n_text: usize,
        n_tasks: usize,
        heldout: usize,
        seed: u64,
    ) -> Result<Self> {
        let s = |k: u64| seed::derive(seed, &[k]);
        Ok(Self {
            paired: gen_paired(spec, vocab, n_paired, s(10))?,
            text: gen_text_only(spec, vocab, n_text, s(11))?,
            paired_heldout: gen_paired(spec, vocab, heldout, s(12))?,
            text_heldout: gen_text_only(spec, vocab, heldout, s(13))?,
            train_tasks: gen_rl_tasks(spec, vocab, n_tasks, s(14), &spec.paired_styles)?,
            id_tasks: gen_rl_tasks(spec, vocab, n_tasks, s(15), &spec.paired_styles)?,
            ood_tasks: gen_rl_tasks(spec, vocab, n_tasks, s(16), &spec.text_only_styles)?,
        })
    }

    pub fn manifest(&self, spec: &GrammarSpec, seed: u64) -> CorpusManifest {
        let counts = [
            ("paired", self.paired.len()),
            ("text", self.text.len()),
            ("paired_heldout", self.paired_heldout.len()),
            ("text_heldout", self.text_heldout.len()),
            ("train_tasks", self.train_tasks.len()),
            ("id_tasks", self.id_tasks.len()),
            ("ood_tasks", self.ood_tasks.len()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        CorpusManifest { seed, counts, grammar_hash: spec.hash(), generator_version: GENERATOR_VERSION.into() }
    }

    /// Writes every split as `<name>.jsonl` plus `manifest.json` into `dir`.
    pub fn save(&self, dir: &std::path::Path, manifest: &CorpusManifest) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_jsonl(&self.paired, &dir.join("paired.jsonl"))?;
        save_jsonl(&self.text, &dir.join("text.jsonl"))?;
        save_jsonl(&self.paired_heldout, &dir.join("paired_heldout.jsonl"))?;
        save_jsonl(&self.text_heldout, &dir.join("text_heldout.jsonl"))?;
        save_jsonl(&self.train_tasks, &dir.join("train_tasks.jsonl"))?;
        save_jsonl(&self.id_tasks, &dir.join("id_tasks.jsonl"))?;
        save_jsonl(&self.ood_tasks, &dir.join("ood_tasks.jsonl"))?;
        write_manifest(manifest, &dir.join("manifest.json"))
    }

    pub fn load(dir: &std::path::Path) -> Result<Self> {
        Ok(Self {
            paired: load_jsonl(&dir.join("paired.jsonl"))?,
            text: load_jsonl(&dir.join("text.jsonl"))?,
            paired_heldout: load_jsonl(&dir.join("paired_heldout.jsonl"))?,
            text_heldout: load_jsonl(&dir.join("text_heldout.jsonl"))?,
            train_tasks: load_jsonl(&dir.join("train_tasks.jsonl"))?,
            id_tasks: load_jsonl(&dir.join("id_tasks.jsonl"))?,
            ood_tasks: load_jsonl(&dir.join("ood_tasks.jsonl"))?,
        })
    }
}
