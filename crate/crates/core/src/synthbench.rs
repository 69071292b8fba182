//! Seeded synthetic few-shot tasks with planted semantics and a spurious
//! channel.
//!
//! Image features are `[core block | signature block | noise block]`. Class
//! identity lives in the core block as the sum of the class's attribute
//! directions; each class also owns a signature (its "background colour")
//! that co-occurs with the label with probability `rho` during training and
//! is shuffled at OOD test time.
//!
//! Token embeddings are split into five coordinate blocks (core, signature,
//! gate, background, text) and the frozen text encoder is built from units
//! that read those blocks:
//! - core units pass the core block unless background coordinates are active;
//! - signature units pass the signature block once the shared gate opens;
//! - one background unit adds a fixed offset whenever background coordinates
//!   are present, which dilutes class information in negative prompts;
//! - text units map the text block onto directions no image can reach.
//!
//! Base-class name tokens carry a trace of their class signature, so a soft
//! prompt tuned on base classes can exploit the spurious channel by opening
//! the gate. New-class names carry no signature and a noisier core component.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribute::{AttributePool, PoolAttribute, PoolClass, POOL_VERSION};
use crate::encoder::{check_version, DualEncoder, ImageEncoder, TextEncoder, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{
    gaussian_vec, l2_normalize, random_orthogonal, random_unit, seeded_rng, Matrix,
};

pub const TASK_VERSION: u32 = 1;
pub const TEMPLATE: &str = "a photo of a";
pub const GENERAL_NEGATIVE: &str = "background";
/// Names of the OOD variants, in the order they are stored on a task.
pub const OOD_KINDS: [&str; 3] = ["shuffled_signature", "zeroed_signature", "noise_boost"];
/// Non-visual and wrong-signature distractors per class.
const NON_VISUAL_PER_CLASS: usize = 2;
const WRONG_SIGNATURE_PER_CLASS: usize = 2;

const CLASS_NAMES: [&str; 20] = [
    "cat", "dog", "fox", "owl", "bat", "eel", "yak", "ape", "elk", "emu", "hen", "ram", "cod",
    "ant", "bee", "gnu", "jay", "koi", "pug", "asp",
];
const COLORS: [&str; 20] = [
    "red", "green", "blue", "yellow", "purple", "orange", "pink", "teal", "brown", "grey", "cyan",
    "olive", "navy", "maroon", "lime", "amber", "coral", "ivory", "plum", "tan",
];
const ADJECTIVES: [&str; 11] = [
    "striped",
    "spotted",
    "long",
    "short",
    "curved",
    "pointed",
    "round",
    "webbed",
    "feathered",
    "scaly",
    "furry",
];
const PARTS: [&str; 11] = [
    "tail", "ears", "beak", "legs", "wings", "snout", "fur", "eyes", "paws", "neck", "horns",
];
const VERBS: [&str; 10] = [
    "sold", "found", "loved", "kept", "known", "bred", "raised", "named", "seen", "feared",
];
const PLACES: [&str; 6] = ["online", "locally", "abroad", "indoors", "rarely", "often"];

/// Geometry and gains of the planted encoder and vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldParams {
    pub d_out: usize,
    pub max_len: usize,
    pub gate_dims: usize,
    pub background_dims: usize,
    /// Token vectors are stored multiplied by this and divided by it again on
    /// entry to the text encoder.
    pub token_scale: f64,
    pub position_amp: f64,
    pub core_gain: f64,
    pub signature_gain: f64,
    pub text_gain: f64,
    pub signature_units: usize,
    pub signature_bias: f64,
    pub gate_gain: f64,
    pub background_block: f64,
    pub background_unit_gain: f64,
    pub background_unit_out: f64,
    pub output_bias: f64,
    pub image_bias: f64,
    pub core_magnitude: f64,
    pub signature_magnitude: f64,
    pub name_core: f64,
    pub name_noise: f64,
    pub name_signature: f64,
    pub attribute_scale: f64,
    pub color_scale: f64,
    pub background_scale: f64,
    pub class_background_scale: f64,
    pub background_gate: f64,
    pub non_visual_scale: f64,
    pub template_scale: f64,
    pub perturbation: f64,
    pub noise_boost: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            d_out: 32,
            max_len: 16,
            gate_dims: 8,
            background_dims: 8,
            token_scale: 5.692,
            position_amp: 0.1,
            core_gain: 4.0,
            signature_gain: 4.0,
            text_gain: 2.0,
            signature_units: 8,
            signature_bias: -0.562,
            gate_gain: 2.976,
            background_block: 2.975,
            background_unit_gain: 4.0,
            background_unit_out: 2.726,
            output_bias: 0.5,
            image_bias: 0.05,
            core_magnitude: 1.173,
            signature_magnitude: 2.459,
            name_core: 1.858,
            name_noise: 1.326,
            name_signature: 0.92,
            attribute_scale: 1.5,
            color_scale: 0.907,
            background_scale: 1.52,
            class_background_scale: 1.508,
            background_gate: 1.371,
            non_visual_scale: 0.15,
            template_scale: 1.0,
            perturbation: 0.05,
            noise_boost: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub classes: usize,
    pub base_fraction: f64,
    pub shots: usize,
    pub rho: f64,
    pub core_dim: usize,
    pub signature_dim: usize,
    pub noise_dim: usize,
    pub sigma: f64,
    pub attributes_per_class: usize,
    pub sharing: usize,
    pub test_per_class: usize,
    pub seed: u64,
    pub world: WorldParams,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            base_fraction: 0.5,
            shots: 16,
            rho: 0.95,
            core_dim: 12,
            signature_dim: 8,
            noise_dim: 4,
            sigma: 0.5,
            attributes_per_class: 15,
            sharing: 2,
            test_per_class: 200,
            seed: 0,
            world: WorldParams::default(),
        }
    }
}

impl TaskSpec {
    pub fn feature_dim(&self) -> usize {
        self.core_dim + self.signature_dim + self.noise_dim
    }

    pub fn text_dims(&self) -> usize {
        self.world.d_out - self.feature_dim()
    }

    pub fn token_dim(&self) -> usize {
        self.core_dim
            + self.signature_dim
            + self.world.gate_dims
            + self.world.background_dims
            + self.text_dims()
    }

    pub fn num_base(&self) -> usize {
        ((self.classes as f64 * self.base_fraction).round() as usize).min(self.classes)
    }

    fn true_attributes(&self) -> usize {
        self.attributes_per_class - NON_VISUAL_PER_CLASS - WRONG_SIGNATURE_PER_CLASS
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho {} outside [0, 1]", self.rho));
        }
        if !(self.sigma >= 0.0) {
            return bad(format!("sigma {}", self.sigma));
        }
        if self.num_base() == 0 {
            return bad("base split is empty".into());
        }
        if self.shots == 0 || self.test_per_class == 0 {
            return bad("shots and test_per_class must be positive".into());
        }
        if self.attributes_per_class <= NON_VISUAL_PER_CLASS + WRONG_SIGNATURE_PER_CLASS {
            return bad(format!(
                "attributes_per_class must exceed {} distractors",
                NON_VISUAL_PER_CLASS + WRONG_SIGNATURE_PER_CLASS
            ));
        }
        if WRONG_SIGNATURE_PER_CLASS >= self.classes {
            return bad("too few classes for wrong-signature distractors".into());
        }
        if self.sharing == 0 || self.sharing > self.classes {
            return bad(format!("sharing {} outside [1, classes]", self.sharing));
        }
        if self.core_dim == 0 || self.signature_dim == 0 {
            return bad("core and signature blocks must be non-empty".into());
        }
        if self.world.d_out <= self.feature_dim() {
            return bad(format!(
                "output dim {} must exceed feature dim {}",
                self.world.d_out,
                self.feature_dim()
            ));
        }
        if self.world.gate_dims == 0 || self.world.background_dims == 0 {
            return bad("gate and background blocks must be non-empty".into());
        }
        if !(self.world.token_scale > 0.0) {
            return bad("token_scale must be positive".into());
        }
        if self.world.max_len < 3 {
            return bad("max_len too small".into());
        }
        Ok(())
    }
}

/// Feature vectors with global class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSplit {
    pub name: String,
    /// Classes competing in this split, as global ids.
    pub classes: Vec<usize>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl LabeledSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorKind {
    True,
    NonVisual,
    WrongSignature,
}

/// Generator-side facts. Only oracle tests read these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub core: Vec<Vec<f64>>,
    pub signatures: Vec<Vec<f64>>,
    pub attribute_directions: Vec<Vec<f64>>,
    pub class_attributes: Vec<Vec<usize>>,
    /// Kind of every pool attribute, parallel to the pool.
    pub pool_kinds: Vec<Vec<DistractorKind>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotTask {
    pub spec: TaskSpec,
    pub class_names: Vec<String>,
    pub base_classes: Vec<usize>,
    pub new_classes: Vec<usize>,
    /// Training shots of every class; only base classes are used for tuning,
    /// new-class shots only feed attribute sampling.
    pub train: Vec<Vec<Vec<f64>>>,
    pub base_test: LabeledSplit,
    pub new_test: LabeledSplit,
    pub id_test: LabeledSplit,
    pub ood: Vec<LabeledSplit>,
    pub negatives: Vec<String>,
    pub template: String,
    pub truth: GroundTruth,
}

impl FewShotTask {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `base_test`, `new_test`, `id_test` or `ood_<kind>`.
    pub fn split(&self, name: &str) -> Result<&LabeledSplit> {
        match name {
            "base_test" => Ok(&self.base_test),
            "new_test" => Ok(&self.new_test),
            "id_test" => Ok(&self.id_test),
            _ => self
                .ood
                .iter()
                .find(|s| s.name == name)
                .ok_or_else(|| Error::UnknownSplit(name.to_string())),
        }
    }

    pub fn split_names(&self) -> Vec<String> {
        let mut names = vec!["base_test".to_string(), "new_test".into(), "id_test".into()];
        names.extend(self.ood.iter().map(|s| s.name.clone()));
        names
    }

    pub fn class_negative(&self, class_id: usize) -> String {
        class_negative_name(&self.class_names[class_id])
    }

    pub fn to_json(&self, vocab_hash: &str) -> String {
        let dump = TaskDump {
            version: TASK_VERSION,
            vocab_hash: vocab_hash.to_string(),
            task: self.clone(),
        };
        serde_json::to_string(&dump).expect("task serializes")
    }

    /// Parses a task dump and returns it with the vocabulary hash it references.
    pub fn from_json(s: &str) -> Result<(Self, String)> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        check_version(&v, TASK_VERSION)?;
        let dump: TaskDump =
            serde_json::from_value(v).map_err(|e| Error::SchemaViolation(e.to_string()))?;
        Ok((dump.task, dump.vocab_hash))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[derive(Serialize, Deserialize)]
struct TaskDump {
    version: u32,
    vocab_hash: String,
    task: FewShotTask,
}

pub fn class_negative_name(class: &str) -> String {
    format!("{GENERAL_NEGATIVE}_{class}")
}

/// Everything generated from one spec.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub task: FewShotTask,
    pub vocab: Vocabulary,
    pub pool: AttributePool,
    pub encoders: DualEncoder,
}

fn class_name(c: usize) -> String {
    CLASS_NAMES
        .get(c)
        .map_or_else(|| format!("class{c}"), |s| s.to_string())
}

fn color_name(c: usize) -> String {
    COLORS
        .get(c)
        .map_or_else(|| format!("hue{c}"), |s| s.to_string())
}

fn attribute_phrase(i: usize) -> String {
    let n = ADJECTIVES.len() * PARTS.len();
    if i < n {
        format!(
            "{} {}",
            ADJECTIVES[i % ADJECTIVES.len()],
            PARTS[(i / ADJECTIVES.len() + i) % PARTS.len()]
        )
    } else {
        format!("trait {i}")
    }
}

fn non_visual_phrase(i: usize) -> String {
    let n = VERBS.len() * PLACES.len();
    if i < n {
        format!(
            "{} {}",
            VERBS[i % VERBS.len()],
            PLACES[(i / VERBS.len() + i) % PLACES.len()]
        )
    } else {
        format!("rumoured {i}")
    }
}

/// Coordinate ranges of the token blocks.
struct Blocks {
    core: std::ops::Range<usize>,
    sig: std::ops::Range<usize>,
    gate: std::ops::Range<usize>,
    bg: std::ops::Range<usize>,
    text: std::ops::Range<usize>,
    d_tok: usize,
}

impl Blocks {
    fn new(spec: &TaskSpec) -> Self {
        let mut o = 0;
        let mut take = |n: usize| {
            let r = o..o + n;
            o += n;
            r
        };
        let core = take(spec.core_dim);
        let sig = take(spec.signature_dim);
        let gate = take(spec.world.gate_dims);
        let bg = take(spec.world.background_dims);
        let text = take(spec.text_dims());
        Self {
            core,
            sig,
            gate,
            bg,
            text,
            d_tok: o,
        }
    }
}

/// `Σ_i q_i basis_i` over rows of `basis` starting at `offset`.
fn combine(basis: &Matrix, offset: usize, q: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; basis.cols()];
    for (i, qi) in q.iter().enumerate() {
        for (o, b) in out.iter_mut().zip(basis.row(offset + i)) {
            *o += qi * b;
        }
    }
    out
}

fn unit(v: &[f64]) -> Vec<f64> {
    l2_normalize(v).expect("generator vectors are non-degenerate")
}

fn scaled(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

struct EncoderParts {
    text: TextEncoder,
    image: ImageEncoder,
}

fn build_encoders(spec: &TaskSpec, blocks: &Blocks, rng: &mut ChaCha8Rng) -> Result<EncoderParts> {
    let w = &spec.world;
    let (k, s, nz, d) = (spec.core_dim, spec.signature_dim, spec.noise_dim, w.d_out);
    let t = spec.text_dims();
    let sig_off = k;
    let text_off = k + s + nz;
    // Rows of `basis` are the output-space directions of each feature block.
    let basis = random_orthogonal(rng, d);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut bias: Vec<f64> = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let zero = || vec![0.0; blocks.d_tok];

    let qc = random_orthogonal(rng, k);
    for i in 0..k {
        for sign in [1.0, -1.0] {
            let mut r = zero();
            for (j, c) in blocks.core.clone().enumerate() {
                r[c] = sign * w.core_gain * qc.get(i, j);
            }
            for b in blocks.bg.clone() {
                r[b] = -w.background_block;
            }
            rows.push(r);
            bias.push(0.0);
            cols.push(scaled(
                &combine(&basis, 0, qc.row(i)),
                sign * 0.5 / w.core_gain,
            ));
        }
    }

    let shared_gate = random_unit(rng, w.gate_dims);
    let qs = random_orthogonal(rng, s);
    for i in 0..w.signature_units {
        for sign in [1.0, -1.0] {
            let mut r = zero();
            for (j, c) in blocks.sig.clone().enumerate() {
                r[c] = sign * w.signature_gain * qs.get(i % s, j);
            }
            for (j, g) in blocks.gate.clone().enumerate() {
                r[g] = w.gate_gain * shared_gate[j];
            }
            rows.push(r);
            bias.push(w.signature_bias);
            cols.push(scaled(
                &combine(&basis, sig_off, qs.row(i % s)),
                sign * 0.5 / w.signature_gain,
            ));
        }
    }

    if w.background_unit_out > 0.0 {
        let mut r = zero();
        let bd = w.background_dims as f64;
        for b in blocks.bg.clone() {
            r[b] = w.background_unit_gain / bd.sqrt();
        }
        rows.push(r);
        bias.push(0.0);
        cols.push(scaled(&random_unit(rng, d), w.background_unit_out));
    }

    let qt = random_orthogonal(rng, t);
    let pt: Vec<Vec<f64>> = (0..t)
        .map(|_| gaussian_vec(rng, t, 1.0 / (t as f64).sqrt()))
        .collect();
    // Column `i` of `pt` feeds output row `i`.
    #[allow(clippy::needless_range_loop)]
    for i in 0..t {
        let mut r = zero();
        for (j, c) in blocks.text.clone().enumerate() {
            r[c] = w.text_gain * qt.get(i, j);
        }
        rows.push(r);
        bias.push(0.0);
        let mix: Vec<f64> = (0..t).map(|a| pt[a][i]).collect();
        cols.push(scaled(&combine(&basis, text_off, &mix), 1.0 / w.text_gain));
    }

    let text_dir = unit(&combine(&basis, text_off, &gaussian_vec(rng, t, 1.0)));
    let b2: Vec<f64> = gaussian_vec(rng, d, 0.02)
        .iter()
        .zip(&text_dir)
        .map(|(a, b)| a + w.output_bias * b)
        .collect();

    let hidden = rows.len();
    let w1 = Matrix::from_rows(&rows)?;
    let mut w2 = Matrix::zeros(d, hidden);
    for (h, col) in cols.iter().enumerate() {
        for (o, v) in col.iter().enumerate() {
            w2.set(o, h, *v);
        }
    }
    let text = TextEncoder::from_parts(
        spec.seed,
        w1,
        bias,
        w2,
        b2,
        w.max_len,
        w.position_amp,
        w.token_scale,
    )?;

    let f = spec.feature_dim();
    let mut a = Matrix::zeros(d, f);
    for i in 0..f {
        for o in 0..d {
            a.set(o, i, basis.get(i, o));
        }
    }
    let image = ImageEncoder::from_parts(spec.seed, a, gaussian_vec(rng, d, w.image_bias))?;
    Ok(EncoderParts { text, image })
}

/// Picks `per_class` distinct attribute directions per class so that each
/// direction is used by about `sharing` classes.
fn assign_attributes(
    classes: usize,
    per_class: usize,
    sharing: usize,
    n_dirs: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut slots: Vec<usize> = (0..n_dirs * sharing).map(|i| i % n_dirs).collect();
    slots.shuffle(rng);
    (0..classes)
        .map(|c| {
            let mut seen: Vec<usize> = Vec::with_capacity(per_class);
            for a in slots.iter().skip(c * per_class).take(per_class) {
                if !seen.contains(a) {
                    seen.push(*a);
                }
            }
            while seen.len() < per_class {
                let a = rng.random_range(0..n_dirs);
                if !seen.contains(&a) {
                    seen.push(a);
                }
            }
            seen
        })
        .collect()
}

fn draw_images(
    spec: &TaskSpec,
    core: &[Vec<f64>],
    sigs: &[Vec<f64>],
    class: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let w = &spec.world;
    (0..n)
        .map(|_| {
            let sc = if rng.random::<f64>() < spec.rho {
                class
            } else {
                rng.random_range(0..spec.classes)
            };
            let mut x: Vec<f64> = core[class]
                .iter()
                .map(|v| w.core_magnitude * v)
                .chain(sigs[sc].iter().map(|v| w.signature_magnitude * v))
                .chain(std::iter::repeat_n(0.0, spec.noise_dim))
                .collect();
            for v in x.iter_mut() {
                *v += spec.sigma * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
            x
        })
        .collect()
}

fn labeled(
    name: &str,
    classes: &[usize],
    per_class: usize,
    mut draw: impl FnMut(usize, usize) -> Vec<Vec<f64>>,
) -> LabeledSplit {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for &c in classes {
        features.extend(draw(c, per_class));
        labels.extend(std::iter::repeat_n(c, per_class));
    }
    LabeledSplit {
        name: name.to_string(),
        classes: classes.to_vec(),
        features,
        labels,
    }
}

/// Generates the task, its planted vocabulary, the attribute pool and the
/// frozen encoders, all from `spec.seed`.
pub fn generate_task(spec: &TaskSpec) -> Result<SynthWorld> {
    spec.validate()?;
    let w = &spec.world;
    let mut rng = seeded_rng(spec.seed);
    let blocks = Blocks::new(spec);
    let parts = build_encoders(spec, &blocks, &mut rng)?;
    let c_total = spec.classes;
    let (k, s) = (spec.core_dim, spec.signature_dim);
    let t = spec.text_dims();

    let nt = spec.true_attributes();
    let n_dirs = nt.max(c_total * nt / spec.sharing);
    let dirs: Vec<Vec<f64>> = (0..n_dirs).map(|_| random_unit(&mut rng, k)).collect();
    let class_attrs = assign_attributes(c_total, nt, spec.sharing, n_dirs, &mut rng);
    let core: Vec<Vec<f64>> = class_attrs
        .iter()
        .map(|attrs| {
            let mut sum = vec![0.0; k];
            for a in attrs {
                for (x, d) in sum.iter_mut().zip(&dirs[*a]) {
                    *x += d;
                }
            }
            unit(&sum)
        })
        .collect();
    let sigs: Vec<Vec<f64>> = (0..c_total).map(|_| random_unit(&mut rng, s)).collect();
    let mut mean_sig = vec![0.0; s];
    for sg in &sigs {
        for (m, v) in mean_sig.iter_mut().zip(sg) {
            *m += v / c_total as f64;
        }
    }
    let mean_sig = unit(&mean_sig);

    struct Parts<'a> {
        core: Option<&'a [f64]>,
        sig: Option<&'a [f64]>,
        text: Option<&'a [f64]>,
        bg: f64,
    }
    let token = |rng: &mut ChaCha8Rng, p: Parts| -> Vec<f64> {
        let mut v = vec![0.0; blocks.d_tok];
        if let Some(c) = p.core {
            v[blocks.core.clone()].copy_from_slice(c);
        }
        if let Some(sg) = p.sig {
            v[blocks.sig.clone()].copy_from_slice(sg);
        }
        if let Some(tx) = p.text {
            v[blocks.text.clone()].copy_from_slice(tx);
        }
        for b in blocks.bg.clone() {
            v[b] = p.bg;
        }
        let noise = gaussian_vec(rng, blocks.d_tok, w.perturbation);
        v.iter()
            .zip(noise)
            .map(|(a, n)| (a + n) * w.token_scale)
            .collect()
    };
    let none = Parts {
        core: None,
        sig: None,
        text: None,
        bg: 0.0,
    };

    let mut vocab = Vocabulary::new(spec.seed, blocks.d_tok);
    for word in ["a", "photo", "of"] {
        let dir = scaled(&random_unit(&mut rng, t), w.template_scale);
        let e = token(
            &mut rng,
            Parts {
                text: Some(&dir),
                ..none
            },
        );
        vocab.insert(word, e)?;
    }
    let n_base = spec.num_base();
    let class_names: Vec<String> = (0..c_total).map(class_name).collect();
    for (c, name) in class_names.iter().enumerate() {
        let jitter = random_unit(&mut rng, k);
        let mixed: Vec<f64> = core[c]
            .iter()
            .zip(&jitter)
            .map(|(a, b)| a + w.name_noise * b)
            .collect();
        let core_part = scaled(&unit(&mixed), w.name_core);
        let sig_scale = if c < n_base { w.name_signature } else { 0.0 };
        let sig_part = scaled(&sigs[c], sig_scale);
        let e = token(
            &mut rng,
            Parts {
                core: Some(&core_part),
                sig: Some(&sig_part),
                ..none
            },
        );
        vocab.insert(name, e)?;
    }
    let attr_texts: Vec<String> = (0..n_dirs).map(attribute_phrase).collect();
    for (a, text) in attr_texts.iter().enumerate() {
        let dir = scaled(&dirs[a], w.attribute_scale);
        let e = token(
            &mut rng,
            Parts {
                core: Some(&dir),
                ..none
            },
        );
        vocab.insert(text, e)?;
    }
    let color_texts: Vec<String> = (0..c_total)
        .map(|c| format!("{} color", color_name(c)))
        .collect();
    for (c, text) in color_texts.iter().enumerate() {
        let dir = scaled(&sigs[c], w.color_scale);
        let e = token(
            &mut rng,
            Parts {
                sig: Some(&dir),
                ..none
            },
        );
        vocab.insert(text, e)?;
    }
    let general = scaled(&mean_sig, w.background_scale);
    let e = token(
        &mut rng,
        Parts {
            sig: Some(&general),
            bg: w.background_gate,
            ..none
        },
    );
    vocab.insert(GENERAL_NEGATIVE, e)?;
    let mut negatives = vec![GENERAL_NEGATIVE.to_string()];
    for (c, name) in class_names.iter().enumerate() {
        let dir = scaled(&sigs[c], w.class_background_scale);
        let e = token(
            &mut rng,
            Parts {
                sig: Some(&dir),
                bg: w.background_gate,
                ..none
            },
        );
        let text = class_negative_name(name);
        vocab.insert(&text, e)?;
        negatives.push(text);
    }
    let nv_texts: Vec<String> = (0..NON_VISUAL_PER_CLASS * c_total)
        .map(non_visual_phrase)
        .collect();
    for text in &nv_texts {
        let dir = scaled(&random_unit(&mut rng, t), w.non_visual_scale);
        let e = token(
            &mut rng,
            Parts {
                text: Some(&dir),
                ..none
            },
        );
        vocab.insert(text, e)?;
    }

    let mut pool_classes = Vec::with_capacity(c_total);
    let mut pool_kinds = Vec::with_capacity(c_total);
    for c in 0..c_total {
        let mut items: Vec<(String, DistractorKind)> = class_attrs[c]
            .iter()
            .map(|a| (attr_texts[*a].clone(), DistractorKind::True))
            .collect();
        for i in 0..NON_VISUAL_PER_CLASS {
            items.push((
                nv_texts[NON_VISUAL_PER_CLASS * c + i].clone(),
                DistractorKind::NonVisual,
            ));
        }
        let mut others: Vec<usize> = (0..c_total).filter(|o| *o != c).collect();
        others.shuffle(&mut rng);
        for o in others.iter().take(WRONG_SIGNATURE_PER_CLASS) {
            items.push((color_texts[*o].clone(), DistractorKind::WrongSignature));
        }
        items.shuffle(&mut rng);
        pool_classes.push(PoolClass {
            name: class_names[c].clone(),
            class_type: "animal".into(),
            attributes: items
                .iter()
                .map(|(text, _)| PoolAttribute {
                    text: text.clone(),
                    planted: true,
                })
                .collect(),
            source_template: 0,
        });
        pool_kinds.push(items.iter().map(|(_, kind)| *kind).collect());
    }

    let all: Vec<usize> = (0..c_total).collect();
    let base_classes: Vec<usize> = (0..n_base).collect();
    let new_classes: Vec<usize> = (n_base..c_total).collect();
    let train: Vec<Vec<Vec<f64>>> = all
        .iter()
        .map(|c| draw_images(spec, &core, &sigs, *c, spec.shots, &mut rng))
        .collect();
    let per = spec.test_per_class;
    let base_test = labeled("base_test", &base_classes, per, |c, n| {
        draw_images(spec, &core, &sigs, c, n, &mut rng)
    });
    let new_test = labeled("new_test", &new_classes, per, |c, n| {
        draw_images(spec, &core, &sigs, c, n, &mut rng)
    });
    let id_test = labeled("id_test", &base_classes, per, |c, n| {
        draw_images(spec, &core, &sigs, c, n, &mut rng)
    });

    let mut task = FewShotTask {
        spec: spec.clone(),
        class_names,
        base_classes,
        new_classes,
        train,
        base_test,
        new_test,
        id_test,
        ood: Vec::new(),
        negatives,
        template: TEMPLATE.to_string(),
        truth: GroundTruth {
            core,
            signatures: sigs,
            attribute_directions: dirs,
            class_attributes: class_attrs,
            pool_kinds,
        },
    };
    task.ood = OOD_KINDS
        .iter()
        .map(|kind| make_ood_variant(&task, kind, spec.seed))
        .collect::<Result<_>>()?;
    Ok(SynthWorld {
        task,
        vocab,
        pool: AttributePool {
            version: POOL_VERSION,
            dataset: format!("synthetic-{}", spec.seed),
            classes: pool_classes,
        },
        encoders: DualEncoder {
            text: parts.text,
            image: parts.image,
        },
    })
}

fn ood_stream(seed: u64, kind: &str) -> ChaCha8Rng {
    let tag = OOD_KINDS.iter().position(|k| *k == kind).unwrap_or(0) as u64;
    seeded_rng(seed ^ (0x00d5_eed0_0000_0000 + tag))
}

/// Transforms the nuisance part of `id_test`; labels and core blocks are kept.
///
/// - `shuffled_signature`: the signature block is redrawn from a uniformly
///   random class signature plus noise;
/// - `zeroed_signature`: the signature block keeps only its noise;
/// - `noise_boost`: extra Gaussian noise on every coordinate.
pub fn make_ood_variant(task: &FewShotTask, kind: &str, seed: u64) -> Result<LabeledSplit> {
    if !OOD_KINDS.contains(&kind) {
        return Err(Error::UnknownKind(kind.to_string()));
    }
    let spec = &task.spec;
    let (k, s) = (spec.core_dim, spec.signature_dim);
    let sig_mag = spec.world.signature_magnitude;
    let mut rng = ood_stream(seed, kind);
    let normal = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(rand_distr::StandardNormal);
    let features = task
        .id_test
        .features
        .iter()
        .map(|x| {
            let mut x = x.clone();
            match kind {
                "shuffled_signature" => {
                    let sc = rng.random_range(0..task.num_classes());
                    for i in 0..s {
                        x[k + i] =
                            sig_mag * task.truth.signatures[sc][i] + spec.sigma * normal(&mut rng);
                    }
                }
                "zeroed_signature" => {
                    for v in &mut x[k..k + s] {
                        *v = spec.sigma * normal(&mut rng);
                    }
                }
                _ => {
                    for v in x.iter_mut() {
                        *v += spec.world.noise_boost * spec.sigma * normal(&mut rng);
                    }
                }
            }
            x
        })
        .collect();
    Ok(LabeledSplit {
        name: format!("ood_{kind}"),
        classes: task.id_test.classes.clone(),
        features,
        labels: task.id_test.labels.clone(),
    })
}
