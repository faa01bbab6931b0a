//! Synthetic ultrasound world: scenes with ground-truth labels rendered to
//! image pairs and templated reports, rule-based derivation of coarse /
//! medium / fine question-answer pairs with `[size]` masking, and the
//! closed word-level vocabulary.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{load_tensor, save_tensor, Tensor, S};

pub const IMAGE_SIZE: usize = 64;
/// Gaussian noise levels and speckle grain (pixels per noise cell) per echo
/// texture; tests derive statistical bounds from these.
pub const NOISE_SMOOTH: S = 0.015;
pub const NOISE_COARSE: S = 0.04;
pub const GRAIN_SMOOTH: usize = 1;
pub const GRAIN_COARSE: usize = 4;
/// Coarse texture additionally carries a deterministic grain-sized
/// checkerboard. It is zero-mean over any quadrant, so region statistics
/// stay noise-bounded, but it gives the texture a stable spatial signature.
pub const PATTERN_COARSE: S = 0.05;
/// Background intensity per organ (the organ signal in the image).
pub const BASE_BREAST: S = 0.45;
pub const BASE_THYROID: S = 0.62;
/// Nodule geometry: x-radius affine in size units, darkening factor inside.
pub const NODULE_RX_BASE: S = 4.5;
pub const NODULE_RX_PER_UNIT: S = 0.55;
pub const NODULE_DARKEN: S = 0.2;

pub const SIZE_MIN: u32 = 2;
pub const SIZE_MAX: u32 = 20;
/// Sizes are quantized to this step, so adjacent size classes stay visually
/// separable in the rendered radius.
pub const SIZE_STEP: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Organ {
    Breast,
    Thyroid,
}

impl Organ {
    pub fn as_str(&self) -> &'static str {
        match self {
            Organ::Breast => "breast",
            Organ::Thyroid => "thyroid",
        }
    }

    /// Second anatomical region named in the report, after the gland
    /// parenchyma.
    pub fn second_region(&self) -> &'static str {
        match self {
            Organ::Breast => "duct system",
            Organ::Thyroid => "isthmus",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Echo {
    Smooth,
    Coarse,
}

impl Echo {
    pub fn as_str(&self) -> &'static str {
        match self {
            Echo::Smooth => "smooth",
            Echo::Coarse => "coarse",
        }
    }

    pub fn noise_sigma(&self) -> S {
        match self {
            Echo::Smooth => NOISE_SMOOTH,
            Echo::Coarse => NOISE_COARSE,
        }
    }

    /// Side length of the square cells sharing one noise sample. Coarse
    /// texture has visibly larger speckle grains, not just higher amplitude.
    pub fn grain(&self) -> usize {
        match self {
            Echo::Smooth => GRAIN_SMOOTH,
            Echo::Coarse => GRAIN_COARSE,
        }
    }

    /// Amplitude of the deterministic grain-sized checkerboard.
    pub fn pattern_amp(&self) -> S {
        match self {
            Echo::Smooth => 0.0,
            Echo::Coarse => PATTERN_COARSE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quadrant {
    #[serde(rename = "upper-outer")]
    UpperOuter,
    #[serde(rename = "upper-inner")]
    UpperInner,
    #[serde(rename = "lower-outer")]
    LowerOuter,
    #[serde(rename = "lower-inner")]
    LowerInner,
}

pub const QUADRANTS: [Quadrant; 4] =
    [Quadrant::UpperOuter, Quadrant::UpperInner, Quadrant::LowerOuter, Quadrant::LowerInner];

impl Quadrant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Quadrant::UpperOuter => "upper-outer",
            Quadrant::UpperInner => "upper-inner",
            Quadrant::LowerOuter => "lower-outer",
            Quadrant::LowerInner => "lower-inner",
        }
    }

    /// Pixel center of this quadrant (outer = left half).
    pub fn center(&self) -> (S, S) {
        let q = IMAGE_SIZE as S / 4.0;
        match self {
            Quadrant::UpperOuter => (q, q),
            Quadrant::UpperInner => (3.0 * q, q),
            Quadrant::LowerOuter => (q, 3.0 * q),
            Quadrant::LowerInner => (3.0 * q, 3.0 * q),
        }
    }

    /// Pixel bounds `(x0, y0, x1, y1)`, half-open.
    pub fn bounds(&self) -> (usize, usize, usize, usize) {
        let h = IMAGE_SIZE / 2;
        match self {
            Quadrant::UpperOuter => (0, 0, h, h),
            Quadrant::UpperInner => (h, 0, IMAGE_SIZE, h),
            Quadrant::LowerOuter => (0, h, h, IMAGE_SIZE),
            Quadrant::LowerInner => (h, h, IMAGE_SIZE, IMAGE_SIZE),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Nodule {
    pub quadrant: Quadrant,
    pub size_units: u32,
}

/// Ground-truth record from which both images, the report, and all QA pairs
/// are rendered. Quadrant and size exist iff a nodule is present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub id: usize,
    pub organ: Organ,
    pub echo_texture: Echo,
    pub nodule: Option<Nodule>,
}

impl Scene {
    pub fn nodule_present(&self) -> bool {
        self.nodule.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Coarse,
    Medium,
    Fine,
}

/// One pre-training supervision unit. Question and answer are
/// space-separated token strings; numeric measurements in answers are
/// always replaced with the `[size]` token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub granularity: Granularity,
    pub question: String,
    pub answer: String,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Per-scene, per-stream RNG so generation is deterministic and
/// embarrassingly parallel.
pub fn scene_rng(seed: u64, scene_id: usize, stream: u64) -> ChaCha8Rng {
    let s = splitmix64(seed ^ splitmix64(scene_id as u64 ^ splitmix64(stream)));
    ChaCha8Rng::seed_from_u64(s)
}

pub(crate) fn gauss(rng: &mut ChaCha8Rng) -> S {
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        if u1 > 1e-300 {
            return ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as S;
        }
    }
}

/// Deterministic scene sampling: presence is a fair coin, quadrants uniform
/// and sizes uniform over the quantized grid among positives.
pub fn generate_world(seed: u64, count: usize) -> Result<Vec<Scene>> {
    if count == 0 {
        return Err(Error::Invalid("scene count must be ≥ 1".into()));
    }
    let mut rng = scene_rng(seed, usize::MAX, 0);
    let mut scenes = Vec::with_capacity(count);
    for id in 0..count {
        let organ = if rng.random::<bool>() { Organ::Breast } else { Organ::Thyroid };
        let echo = if rng.random::<bool>() { Echo::Smooth } else { Echo::Coarse };
        let nodule = if rng.random::<bool>() {
            Some(Nodule {
                quadrant: QUADRANTS[rng.random_range(0..4)],
                size_units: SIZE_MIN + SIZE_STEP * rng.random_range(0..=(SIZE_MAX - SIZE_MIN) / SIZE_STEP),
            })
        } else {
            None
        };
        scenes.push(Scene { id, organ, echo_texture: echo, nodule });
    }
    Ok(scenes)
}

/// Renders the scene's two noisy views. Deterministic for `(scene, seed)`.
pub fn render_images(scene: &Scene, seed: u64) -> (Tensor, Tensor) {
    let mut rng_a = scene_rng(seed, scene.id, 1);
    let mut rng_b = scene_rng(seed, scene.id, 2);
    (render_view(scene, &mut rng_a), render_view(scene, &mut rng_b))
}

/// One noisy view: organ-level base intensity, echo-dependent speckle, and a
/// dark soft-edged ellipse in the nodule quadrant with radius affine in the
/// size units. Per-view center jitter keeps the two views distinct. Speckle
/// is constant within grain-sized cells, so coarse texture shows as larger
/// grains rather than only higher pixel variance.
fn render_view(scene: &Scene, rng: &mut ChaCha8Rng) -> Tensor {
    let base = match scene.organ {
        Organ::Breast => BASE_BREAST,
        Organ::Thyroid => BASE_THYROID,
    };
    let sigma = scene.echo_texture.noise_sigma();
    let grain = scene.echo_texture.grain();
    let n = IMAGE_SIZE;
    let mut data = vec![0.0; n * n];
    let jx = (rng.random::<f64>() as S - 0.5) * 2.0;
    let jy = (rng.random::<f64>() as S - 0.5) * 2.0;
    let cells = n / grain;
    let field: Vec<S> = (0..cells * cells).map(|_| gauss(rng) * sigma).collect();
    for y in 0..n {
        for x in 0..n {
            let mut v = base;
            if let Some(nod) = &scene.nodule {
                let (cx, cy) = nod.quadrant.center();
                let rx = NODULE_RX_BASE + NODULE_RX_PER_UNIT * nod.size_units as S;
                let ry = 0.75 * rx;
                let dx = (x as S + 0.5 - (cx + jx)) / rx;
                let dy = (y as S + 0.5 - (cy + jy)) / ry;
                let r = (dx * dx + dy * dy).sqrt();
                let edge = 1.0 / ry;
                let inside = ((1.0 - r) / edge).clamp(0.0, 1.0);
                v *= 1.0 - (1.0 - NODULE_DARKEN) * inside;
            }
            v += field[(y / grain) * cells + (x / grain)];
            let sign = if (x / GRAIN_COARSE + y / GRAIN_COARSE) % 2 == 0 { 1.0 } else { -1.0 };
            v += sign * scene.echo_texture.pattern_amp();
            data[y * n + x] = v.clamp(0.0, 1.0);
        }
    }
    Tensor::matrix(n, n, data).unwrap()
}

/// Fixed-template report. Fully deterministic in the scene.
pub fn render_report(scene: &Scene) -> String {
    let organ = scene.organ.as_str();
    let echo = scene.echo_texture.as_str();
    let gland = format!("the {organ} gland parenchyma shows {echo} echo texture .");
    let second = match scene.organ {
        Organ::Breast => "the duct system is not dilated .".to_string(),
        Organ::Thyroid => "the isthmus thickness is normal .".to_string(),
    };
    let nodule = match &scene.nodule {
        Some(n) => format!(
            "a hypoechoic nodule of {} units in the {} region .",
            n.size_units,
            n.quadrant.as_str()
        ),
        None => "no obvious nodule is seen .".to_string(),
    };
    format!("{gland} {second} {nodule}")
}

fn is_numeral(tok: &str) -> bool {
    !tok.is_empty() && tok.chars().all(|c| c.is_ascii_digit())
}

/// Replaces numeral tokens with the `[size]` special.
pub fn mask_sizes(text: &str) -> String {
    text.split_whitespace()
        .map(|t| if is_numeral(t) { "[size]" } else { t })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Splits a report into period-terminated sentences (period excluded).
fn sentences(report: &str) -> Result<Vec<Vec<&str>>> {
    let toks: Vec<&str> = report.split_whitespace().collect();
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for t in toks {
        if t == "." {
            if cur.is_empty() {
                return Err(Error::Parse("empty sentence".into()));
            }
            out.push(std::mem::take(&mut cur));
        } else {
            cur.push(t);
        }
    }
    if !cur.is_empty() {
        return Err(Error::Parse(format!("unterminated sentence: {}", cur.join(" "))));
    }
    Ok(out)
}

/// Derives the full multi-granular QA set from a report under the template
/// grammar. Location and size questions are omitted for negative scenes
/// rather than paired with empty answers.
pub fn derive_qa(scene: &Scene, report: &str) -> Result<Vec<QAPair>> {
    let sents = sentences(report)?;
    if sents.len() != 3 {
        return Err(Error::Parse(format!(
            "expected 3 sentences, found {}: {report:?}",
            sents.len()
        )));
    }
    let organ = scene.organ.as_str();
    let gland = &sents[0];
    if gland.len() < 3 || gland[0] != "the" || gland[1] != organ || gland[2] != "gland" {
        return Err(Error::Parse(format!(
            "unrecognized gland sentence: {:?}",
            gland.join(" ")
        )));
    }
    let second = &sents[1];
    let second_region = scene.organ.second_region();
    let nodule_sent = &sents[2];

    let mut qa = Vec::new();
    // Coarse: the complete report, size-masked.
    qa.push(QAPair {
        granularity: Granularity::Coarse,
        question: format!("describe the {organ} ultrasound image ."),
        answer: mask_sizes(report),
    });
    // Medium: one pair per anatomical region.
    qa.push(QAPair {
        granularity: Granularity::Medium,
        question: "describe the gland parenchyma region .".to_string(),
        answer: format!("{} .", mask_sizes(&gland.join(" "))),
    });
    qa.push(QAPair {
        granularity: Granularity::Medium,
        question: format!("describe the {second_region} region ."),
        answer: format!("{} .", mask_sizes(&second.join(" "))),
    });
    // Fine: presence always; location and size only when present.
    let present = nodule_sent.first() == Some(&"a");
    if !present && nodule_sent.first() != Some(&"no") {
        return Err(Error::Parse(format!(
            "unrecognized nodule sentence: {:?}",
            nodule_sent.join(" ")
        )));
    }
    qa.push(QAPair {
        granularity: Granularity::Fine,
        question: "is there a nodule ?".to_string(),
        answer: if present { "yes" } else { "no" }.to_string(),
    });
    if present {
        let region_pos = nodule_sent
            .iter()
            .position(|&t| t == "region")
            .ok_or_else(|| Error::Parse(format!("no region in: {:?}", nodule_sent.join(" "))))?;
        let quadrant = nodule_sent[region_pos - 1];
        qa.push(QAPair {
            granularity: Granularity::Fine,
            question: "where is the nodule ?".to_string(),
            answer: format!("in the {quadrant} region"),
        });
        qa.push(QAPair {
            granularity: Granularity::Fine,
            question: "what is the size of the nodule ?".to_string(),
            answer: "[size]".to_string(),
        });
    }
    Ok(qa)
}

// ── vocabulary ───────────────────────────────────────────────────────

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const EOS: usize = 3;
pub const SIZE_TOK: usize = 4;
pub const SPECIALS: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[EOS]", "[size]"];

/// Closed word-level vocabulary with the five reserved specials at fixed
/// ids 0–4. Built deterministically (sorted) from the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    pub fn build<'a>(corpus: impl Iterator<Item = &'a str>) -> Result<Self> {
        let mut words: Vec<String> = corpus
            .flat_map(|text| text.split_whitespace())
            .filter(|t| !SPECIALS.contains(t))
            .map(|t| t.to_string())
            .collect();
        if words.is_empty() {
            return Err(Error::Vocab("empty corpus".into()));
        }
        words.sort();
        words.dedup();
        let mut id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(words);
        let token_to_id =
            id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocabulary { token_to_id, id_to_token })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|t| {
                self.token_to_id
                    .get(t)
                    .copied()
                    .ok_or_else(|| Error::Vocab(format!("unknown token {t:?}")))
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let toks: Result<Vec<&str>> = ids
            .iter()
            .map(|&id| {
                self.id_to_token
                    .get(id)
                    .map(|s| s.as_str())
                    .ok_or_else(|| Error::Vocab(format!("id {id} out of range")))
            })
            .collect();
        Ok(toks?.join(" "))
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    /// Report ids for the text encoder: `[CLS] tokens [SEP]`.
    pub fn encode_report(&self, report: &str) -> Result<Vec<usize>> {
        let mut ids = vec![CLS];
        ids.extend(self.tokenize(report)?);
        ids.push(SEP);
        Ok(ids)
    }

    /// Question ids for the generator prompt.
    pub fn encode_question(&self, question: &str) -> Result<Vec<usize>> {
        self.tokenize(question)
    }

    /// Answer target ids: tokens followed by `[EOS]`.
    pub fn encode_answer(&self, answer: &str) -> Result<Vec<usize>> {
        let mut ids = self.tokenize(answer)?;
        ids.push(EOS);
        Ok(ids)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.token_to_id)?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let token_to_id: BTreeMap<String, usize> = serde_json::from_str(&text)?;
        let mut id_to_token = vec![String::new(); token_to_id.len()];
        for (tok, &id) in &token_to_id {
            if id >= id_to_token.len() || !id_to_token[id].is_empty() {
                return Err(Error::Vocab(format!("non-bijective vocab entry {tok:?} -> {id}")));
            }
            id_to_token[id] = tok.clone();
        }
        for (i, special) in SPECIALS.iter().enumerate() {
            if id_to_token.get(i).map(|s| s.as_str()) != Some(*special) {
                return Err(Error::Vocab(format!("special {special} not at id {i}")));
            }
        }
        Ok(Vocabulary { token_to_id, id_to_token })
    }
}

// ── dataset assembly and persistence ─────────────────────────────────

/// One fully rendered scene.
#[derive(Debug, Clone)]
pub struct Entry {
    pub scene: Scene,
    pub report: String,
    pub qa: Vec<QAPair>,
    pub images: [Tensor; 2],
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub entries: Vec<Entry>,
    pub vocab: Vocabulary,
    pub seed: u64,
}

/// Renders a complete dataset in memory.
pub fn build_dataset(seed: u64, count: usize) -> Result<Dataset> {
    let scenes = generate_world(seed, count)?;
    let mut entries = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let report = render_report(&scene);
        let qa = derive_qa(&scene, &report)?;
        let (a, b) = render_images(&scene, seed);
        entries.push(Entry { scene, report, qa, images: [a, b] });
    }
    let mut corpus: Vec<String> = Vec::new();
    for e in &entries {
        corpus.push(e.report.clone());
        for p in &e.qa {
            corpus.push(p.question.clone());
            corpus.push(p.answer.clone());
        }
    }
    let vocab = Vocabulary::build(corpus.iter().map(|s| s.as_str()))?;
    Ok(Dataset { entries, vocab, seed })
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelsJson {
    nodule_present: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    quadrant: Option<Quadrant>,
    #[serde(skip_serializing_if = "Option::is_none")]
    size_units: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordJson {
    id: usize,
    organ: Organ,
    echo_texture: Echo,
    report: String,
    labels: LabelsJson,
    qa: Vec<QAPair>,
    images: [String; 2],
}

/// Writes `dataset.jsonl`, `vocab.json`, and one QVT1 file per image into
/// `dir`.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut lines = String::new();
    for e in &ds.entries {
        let files = [format!("{}_a.qvt", e.scene.id), format!("{}_b.qvt", e.scene.id)];
        save_tensor(&dir.join(&files[0]), &e.images[0])?;
        save_tensor(&dir.join(&files[1]), &e.images[1])?;
        let rec = RecordJson {
            id: e.scene.id,
            organ: e.scene.organ,
            echo_texture: e.scene.echo_texture,
            report: e.report.clone(),
            labels: LabelsJson {
                nodule_present: e.scene.nodule_present(),
                quadrant: e.scene.nodule.map(|n| n.quadrant),
                size_units: e.scene.nodule.map(|n| n.size_units),
            },
            qa: e.qa.clone(),
            images: files,
        };
        lines.push_str(&serde_json::to_string(&rec)?);
        lines.push('\n');
    }
    fs::write(dir.join("dataset.jsonl"), lines)?;
    ds.vocab.save(&dir.join("vocab.json"))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join("dataset.jsonl"))?;
    let vocab = Vocabulary::load(&dir.join("vocab.json"))?;
    let mut entries = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: RecordJson = serde_json::from_str(line)?;
        let nodule = if rec.labels.nodule_present {
            Some(Nodule {
                quadrant: rec
                    .labels
                    .quadrant
                    .ok_or_else(|| Error::Invalid(format!("scene {}: missing quadrant", rec.id)))?,
                size_units: rec
                    .labels
                    .size_units
                    .ok_or_else(|| Error::Invalid(format!("scene {}: missing size", rec.id)))?,
            })
        } else {
            None
        };
        let scene =
            Scene { id: rec.id, organ: rec.organ, echo_texture: rec.echo_texture, nodule };
        let images = [
            load_tensor(&dir.join(&rec.images[0]))?,
            load_tensor(&dir.join(&rec.images[1]))?,
        ];
        entries.push(Entry { scene, report: rec.report, qa: rec.qa, images });
    }
    if entries.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    Ok(Dataset { entries, vocab, seed: 0 })
}
