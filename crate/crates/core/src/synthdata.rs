//! Synthetic scenes of solid rectangles moving in straight lines, with
//! expressions from a closed grammar and an exact per-frame oracle.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use autograd::par;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{BoundingBox, Expression, MatchingRelation, Trajectory, TrajectorySet, VideoClip, IMAGE_SIZE};
use crate::ingest::{
    build_expressions, parse_tracker_file, read_expression_records, words, write_expression_records, write_tracker_file,
    ExpressionRecord, IngestError, TargetRange, Vocab,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scene generation failed: {0}")]
    GenerationFailed(String),
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
}

impl Color {
    pub const ALL: [Color; 6] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Cyan, Color::Magenta];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [230, 40, 40],
            Color::Green => [40, 200, 60],
            Color::Blue => [50, 80, 230],
            Color::Yellow => [230, 220, 40],
            Color::Cyan => [40, 210, 220],
            Color::Magenta => [220, 50, 210],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Static,
    Left,
    Right,
    Up,
    Down,
}

impl Motion {
    pub const ALL: [Motion; 5] = [Motion::Static, Motion::Left, Motion::Right, Motion::Up, Motion::Down];

    /// Unit direction in image coordinates (y grows downwards).
    pub fn direction(self) -> (i64, i64) {
        match self {
            Motion::Static => (0, 0),
            Motion::Left => (-1, 0),
            Motion::Right => (1, 0),
            Motion::Up => (0, -1),
            Motion::Down => (0, 1),
        }
    }

    pub fn phrase(self) -> &'static str {
        match self {
            Motion::Static => "standing still",
            Motion::Left => "moving left",
            Motion::Right => "moving right",
            Motion::Up => "moving up",
            Motion::Down => "moving down",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Left,
    Right,
}

impl Region {
    pub fn phrase(self) -> &'static str {
        match self {
            Region::Left => "on the left",
            Region::Right => "on the right",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Large,
}

impl SizeClass {
    /// Inclusive side-length range in pixels.
    pub fn sides(self) -> (i64, i64) {
        match self {
            SizeClass::Small => (20, 32),
            SizeClass::Large => (40, 56),
        }
    }
}

/// Atomic predicate of the expression grammar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Atom {
    Color(Color),
    Motion(Motion),
    Region(Region),
}

impl Atom {
    fn phrase(self) -> &'static str {
        match self {
            Atom::Color(c) => c.name(),
            Atom::Motion(m) => m.phrase(),
            Atom::Region(r) => r.phrase(),
        }
    }
}

/// An expression predicate: one atom or the conjunction of two.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Predicate {
    Atom(Atom),
    And(Atom, Atom),
}

/// Predicate with its rendered text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpressionTemplate {
    pub predicate: Predicate,
    pub text: String,
}

impl ExpressionTemplate {
    pub fn new(predicate: Predicate) -> Self {
        let text = match predicate {
            Predicate::Atom(a) => a.phrase().to_string(),
            Predicate::And(a, b) => format!("{} {}", a.phrase(), b.phrase()),
        };
        Self { predicate, text }
    }
}

impl fmt::Display for ExpressionTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// Every template of the grammar, in a fixed order: colors, motions,
/// regions, then color+motion, color+region and motion+region conjunctions.
pub fn grammar() -> Vec<ExpressionTemplate> {
    let colors: Vec<Atom> = Color::ALL.iter().map(|&c| Atom::Color(c)).collect();
    let motions: Vec<Atom> = Motion::ALL.iter().map(|&m| Atom::Motion(m)).collect();
    let regions = [Atom::Region(Region::Left), Atom::Region(Region::Right)];
    let mut preds: Vec<Predicate> = colors.iter().chain(&motions).chain(&regions).map(|&a| Predicate::Atom(a)).collect();
    for (first, second) in [(&colors[..], &motions[..]), (&colors[..], &regions[..]), (&motions[..], &regions[..])] {
        for &a in first {
            for &b in second {
                preds.push(Predicate::And(a, b));
            }
        }
    }
    preds.into_iter().map(ExpressionTemplate::new).collect()
}

/// Vocabulary of the closed grammar.
pub fn grammar_vocab() -> Vocab {
    let texts: Vec<String> = grammar().into_iter().map(|t| t.text).collect();
    Vocab::build(texts.iter().map(String::as_str))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub n_objects: usize,
    pub n_frames: usize,
    pub image_size: (usize, usize),
    pub palette: Vec<Color>,
    pub motion_kinds: Vec<Motion>,
    pub size_classes: Vec<SizeClass>,
    /// Inclusive speed range in px/frame for moving objects.
    pub speed: (i64, i64),
    /// Expressions per scene.
    pub n_expressions: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_objects: 3,
            n_frames: 4,
            image_size: IMAGE_SIZE,
            palette: Color::ALL.to_vec(),
            motion_kinds: Motion::ALL.to_vec(),
            size_classes: vec![SizeClass::Small, SizeClass::Large],
            speed: (3, 8),
            n_expressions: 12,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.n_objects == 0 {
            return bad("n_objects must be at least 1");
        }
        if self.n_frames == 0 {
            return bad("n_frames must be at least 1");
        }
        if self.palette.is_empty() || self.motion_kinds.is_empty() || self.size_classes.is_empty() {
            return bad("palette, motion_kinds and size_classes must be non-empty");
        }
        if self.speed.0 < 1 || self.speed.0 > self.speed.1 {
            return bad("speed range must satisfy 1 <= min <= max");
        }
        if self.n_expressions < 2 {
            return bad("n_expressions must be at least 2");
        }
        Ok(())
    }
}

/// Ground-truth attributes of one rendered object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub target_id: u32,
    pub color: Color,
    pub motion: Motion,
    pub size_class: SizeClass,
    pub speed: i64,
    /// Top-left corner at frame 0.
    pub start: (i64, i64),
    pub size: (i64, i64),
}

impl ObjectSpec {
    /// Unclipped integer box `(x0, y0, w, h)` at frame `t`.
    pub fn raw_box(&self, t: usize) -> (i64, i64, i64, i64) {
        let (dx, dy) = self.motion.direction();
        let s = self.speed * t as i64;
        (self.start.0 + dx * s, self.start.1 + dy * s, self.size.0, self.size.1)
    }
}

/// What the oracle needs besides the boxes themselves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneTruth {
    pub image_size: (usize, usize),
    pub colors: BTreeMap<u32, Color>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub video_id: String,
    pub config: SceneConfig,
    pub objects: Vec<ObjectSpec>,
    pub templates: Vec<ExpressionTemplate>,
}

/// A generated or loaded scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub clip: VideoClip,
    pub tracks: TrajectorySet,
    pub expressions: Vec<Expression>,
    pub relation: MatchingRelation,
    pub records: Vec<ExpressionRecord>,
    pub meta: SceneMeta,
}

impl Scene {
    pub fn truth(&self) -> SceneTruth {
        SceneTruth {
            image_size: self.meta.config.image_size,
            colors: self.meta.objects.iter().map(|o| (o.target_id, o.color)).collect(),
        }
    }
}

/// Dead zone for motion predicates, px/frame.
pub const MOTION_DEAD_ZONE: f64 = 0.5;

fn displacement(traj: &Trajectory, frame: u32) -> Option<(f64, f64)> {
    let here = traj.boxes.get(&frame)?.center();
    let (a, b) = if frame == 0 || !traj.boxes.contains_key(&(frame - 1)) {
        (here, traj.boxes.get(&(frame + 1))?.center())
    } else {
        (traj.boxes[&(frame - 1)].center(), here)
    };
    Some((b.0 - a.0, b.1 - a.1))
}

fn atom_holds(atom: Atom, traj: &Trajectory, frame: u32, truth: &SceneTruth) -> bool {
    let Some(b) = traj.boxes.get(&frame) else {
        return false;
    };
    match atom {
        Atom::Color(c) => truth.colors.get(&traj.target_id) == Some(&c),
        Atom::Region(r) => {
            let mid = truth.image_size.1 as f64 / 2.0;
            match r {
                Region::Left => b.center().0 < mid,
                Region::Right => b.center().0 >= mid,
            }
        }
        Atom::Motion(m) => {
            let Some((dx, dy)) = displacement(traj, frame) else {
                return false;
            };
            let z = MOTION_DEAD_ZONE;
            match m {
                Motion::Static => dx.abs() <= z && dy.abs() <= z,
                Motion::Left => dx < -z,
                Motion::Right => dx > z,
                Motion::Up => dy < -z,
                Motion::Down => dy > z,
            }
        }
    }
}

/// Whether `predicate` holds for `traj` at `frame`. Motion at frame `t` uses
/// the displacement from `t-1` to `t`, or from `t` to `t+1` when `t-1` has no box.
pub fn predicate_holds(predicate: Predicate, traj: &Trajectory, frame: u32, truth: &SceneTruth) -> bool {
    match predicate {
        Predicate::Atom(a) => atom_holds(a, traj, frame, truth),
        Predicate::And(a, b) => atom_holds(a, traj, frame, truth) && atom_holds(b, traj, frame, truth),
    }
}

/// Maximal inclusive frame ranges over which the predicate holds.
pub fn evaluate_oracle(template: &ExpressionTemplate, traj: &Trajectory, truth: &SceneTruth) -> Vec<(u32, u32)> {
    let mut ranges: Vec<(u32, u32)> = Vec::new();
    for &f in traj.boxes.keys() {
        if !predicate_holds(template.predicate, traj, f, truth) {
            continue;
        }
        match ranges.last_mut() {
            Some(last) if last.1 + 1 == f => last.1 = f,
            _ => ranges.push((f, f)),
        }
    }
    ranges
}

const BACKGROUND: [u8; 3] = [30, 30, 30];
const PLACEMENT_ATTEMPTS: usize = 500;
/// Minimum gap kept between objects at every frame.
const OBJECT_GAP: i64 = 4;

fn clip_box(raw: (i64, i64, i64, i64), (h, w): (usize, usize)) -> Option<BoundingBox> {
    BoundingBox { x0: raw.0 as f64, y0: raw.1 as f64, w: raw.2 as f64, h: raw.3 as f64 }.clip(w as f64, h as f64)
}

fn separated(a: (i64, i64, i64, i64), b: (i64, i64, i64, i64)) -> bool {
    a.0 + a.2 + OBJECT_GAP <= b.0 || b.0 + b.2 + OBJECT_GAP <= a.0 || a.1 + a.3 + OBJECT_GAP <= b.1 || b.1 + b.3 + OBJECT_GAP <= a.1
}

fn place_objects(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Vec<ObjectSpec>, SynthError> {
    let (ih, iw) = (cfg.image_size.0 as i64, cfg.image_size.1 as i64);
    let span = (cfg.n_frames - 1) as i64;
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(cfg.n_objects);
    for k in 0..cfg.n_objects {
        let color = *cfg.palette.choose(rng).expect("non-empty palette");
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let motion = *cfg.motion_kinds.choose(rng).expect("non-empty motions");
            let size_class = *cfg.size_classes.choose(rng).expect("non-empty sizes");
            let (lo, hi) = size_class.sides();
            let size = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
            if size.0 > iw || size.1 > ih {
                continue;
            }
            let speed = if motion == Motion::Static { 0 } else { rng.random_range(cfg.speed.0..=cfg.speed.1) };
            let (dx, dy) = motion.direction();
            let travel = (dx * speed * span, dy * speed * span);
            // Keep the whole path inside the image when it fits.
            let range = |extent: i64, side: i64, t: i64| {
                let (lo, hi) = (0.max(-t), (extent - side).min(extent - side - t));
                if lo <= hi { (lo, hi) } else { (0, extent - side) }
            };
            let (xl, xh) = range(iw, size.0, travel.0);
            let (yl, yh) = range(ih, size.1, travel.1);
            let spec = ObjectSpec {
                target_id: k as u32 + 1,
                color,
                motion,
                size_class,
                speed,
                start: (rng.random_range(xl..=xh), rng.random_range(yl..=yh)),
                size,
            };
            let clear = (0..cfg.n_frames).all(|t| objects.iter().all(|o| separated(o.raw_box(t), spec.raw_box(t))));
            if clear {
                placed = Some(spec);
                break;
            }
        }
        match placed {
            Some(s) => objects.push(s),
            None => {
                return Err(SynthError::GenerationFailed(format!(
                    "could not place object {} of {} without overlap",
                    k + 1,
                    cfg.n_objects
                )))
            }
        }
    }
    Ok(objects)
}

/// Render one frame as `[H, W, 3]` bytes.
pub fn render_frame(objects: &[ObjectSpec], t: usize, (h, w): (usize, usize)) -> Vec<u8> {
    let mut img: Vec<u8> = BACKGROUND.iter().copied().cycle().take(h * w * 3).collect();
    for o in objects {
        let (x0, y0, bw, bh) = o.raw_box(t);
        let rgb = o.color.rgb();
        for y in y0.max(0)..(y0 + bh).min(h as i64) {
            for x in x0.max(0)..(x0 + bw).min(w as i64) {
                let i = (y as usize * w + x as usize) * 3;
                img[i..i + 3].copy_from_slice(&rgb);
            }
        }
    }
    img
}

fn trajectories(objects: &[ObjectSpec], cfg: &SceneConfig) -> Vec<Trajectory> {
    objects
        .iter()
        .map(|o| {
            let mut tr = Trajectory::new(o.target_id);
            for t in 0..cfg.n_frames {
                if let Some(b) = clip_box(o.raw_box(t), cfg.image_size) {
                    tr.boxes.insert(t as u32, b);
                }
            }
            tr
        })
        .filter(|t| !t.boxes.is_empty())
        .collect()
}

/// Oracle records of `template` over all trajectories.
pub fn oracle_targets(template: &ExpressionTemplate, tracks: &TrajectorySet, truth: &SceneTruth) -> Vec<TargetRange> {
    tracks
        .trajectories
        .iter()
        .flat_map(|tr| {
            evaluate_oracle(template, tr, truth)
                .into_iter()
                .map(|(s, e)| TargetRange { target_id: tr.target_id, frame_start: s, frame_end: e })
        })
        .collect()
}

/// Generate one scene. Half of the expressions (when available) refer to at
/// least one object and the rest refer to none; the scene must contain both kinds.
pub fn generate_scene(cfg: &SceneConfig, vocab: &Vocab, max_tokens: usize) -> Result<Scene, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let objects = place_objects(cfg, &mut rng)?;
    let video_id = format!("scene_{:04}", cfg.seed);
    let tracks = TrajectorySet::new(video_id.clone(), trajectories(&objects, cfg)).expect("unique target ids");
    let truth = SceneTruth { image_size: cfg.image_size, colors: objects.iter().map(|o| (o.target_id, o.color)).collect() };

    let mut positive = Vec::new();
    let mut negative = Vec::new();
    for t in grammar() {
        let targets = oracle_targets(&t, &tracks, &truth);
        if targets.is_empty() {
            negative.push((t, targets));
        } else {
            positive.push((t, targets));
        }
    }
    if positive.is_empty() || negative.is_empty() {
        return Err(SynthError::GenerationFailed(format!(
            "{} referring and {} non-referring expressions available; need at least one of each",
            positive.len(),
            negative.len()
        )));
    }
    positive.shuffle(&mut rng);
    negative.shuffle(&mut rng);
    let n_pos = (cfg.n_expressions / 2).min(positive.len()).max(1);
    let n_neg = (cfg.n_expressions - n_pos).min(negative.len()).max(1);
    let mut chosen: Vec<_> = positive.into_iter().take(n_pos).chain(negative.into_iter().take(n_neg)).collect();
    chosen.shuffle(&mut rng);

    let records: Vec<ExpressionRecord> = chosen
        .iter()
        .enumerate()
        .map(|(i, (t, targets))| ExpressionRecord { expr_id: i as u32, text: t.text.clone(), targets: targets.clone() })
        .collect();
    let (expressions, relation, _) =
        build_expressions(&records, vocab, max_tokens, tracks.trajectories.iter().map(|t| t.target_id));
    let frames = (0..cfg.n_frames).map(|t| render_frame(&objects, t, cfg.image_size)).collect();
    let clip = VideoClip { video_id: video_id.clone(), height: cfg.image_size.0, width: cfg.image_size.1, frames };
    let meta = SceneMeta { video_id, config: cfg.clone(), objects, templates: chosen.into_iter().map(|(t, _)| t).collect() };
    Ok(Scene { clip, tracks, expressions, relation, records, meta })
}

/// Scenes for seeds `first_seed..first_seed+count`, generated in parallel.
pub fn generate_scenes(
    base: &SceneConfig,
    first_seed: u64,
    count: usize,
    vocab: &Vocab,
    max_tokens: usize,
) -> Result<Vec<Scene>, SynthError> {
    par::map_range(count, |i| {
        let cfg = SceneConfig { seed: first_seed + i as u64, ..base.clone() };
        generate_scene(&cfg, vocab, max_tokens)
    })
    .into_iter()
    .collect()
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io { path: path.to_path_buf(), source }
}

pub const FRAMES_DIR: &str = "frames";
pub const TRACKS_FILE: &str = "tracks.txt";
pub const EXPRESSIONS_FILE: &str = "expressions.json";
pub const META_FILE: &str = "meta.json";

pub fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(FRAMES_DIR).join(format!("{:06}.png", t + 1))
}

/// Write a scene as `frames/*.png`, `tracks.txt`, `expressions.json` and `meta.json`.
pub fn write_scene(scene: &Scene, dir: &Path) -> Result<(), SynthError> {
    let frames = dir.join(FRAMES_DIR);
    fs::create_dir_all(&frames).map_err(io(&frames))?;
    for (t, f) in scene.clip.frames.iter().enumerate() {
        let p = frame_path(dir, t);
        image::save_buffer_with_format(
            &p,
            f,
            scene.clip.width as u32,
            scene.clip.height as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|source| SynthError::Image { path: p.clone(), source })?;
    }
    write_tracker_file(&dir.join(TRACKS_FILE), &scene.tracks)?;
    write_expression_records(&dir.join(EXPRESSIONS_FILE), &scene.records)?;
    let meta_path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(&scene.meta).map_err(|source| SynthError::Json { path: meta_path.clone(), source })?;
    fs::write(&meta_path, text).map_err(io(&meta_path))
}

/// Read every `*.png` of a directory in name order as `[H, W, 3]` bytes.
pub fn read_frames(dir: &Path) -> Result<(Vec<Vec<u8>>, usize, usize), SynthError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    let mut frames = Vec::with_capacity(paths.len());
    let (mut h, mut w) = (0, 0);
    for p in &paths {
        let img = image::open(p).map_err(|source| SynthError::Image { path: p.clone(), source })?.to_rgb8();
        let (fw, fh) = (img.width() as usize, img.height() as usize);
        if frames.is_empty() {
            (h, w) = (fh, fw);
        } else if (fh, fw) != (h, w) {
            return Err(SynthError::Config(format!("{}: frame size {fh}x{fw} differs from {h}x{w}", p.display())));
        }
        frames.push(img.into_raw());
    }
    Ok((frames, h, w))
}

/// Load a scene written by [`write_scene`].
pub fn load_scene(dir: &Path, vocab: &Vocab, max_tokens: usize) -> Result<Scene, SynthError> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(io(&meta_path))?;
    let meta: SceneMeta = serde_json::from_str(&text).map_err(|source| SynthError::Json { path: meta_path.clone(), source })?;
    let (frames, height, width) = read_frames(&dir.join(FRAMES_DIR))?;
    let (tracks, _) = parse_tracker_file(&dir.join(TRACKS_FILE), (height, width))?;
    let tracks = TrajectorySet { video_id: meta.video_id.clone(), ..tracks };
    let records = read_expression_records(&dir.join(EXPRESSIONS_FILE))?;
    let (expressions, relation, _) =
        build_expressions(&records, vocab, max_tokens, tracks.trajectories.iter().map(|t| t.target_id));
    let clip = VideoClip { video_id: meta.video_id.clone(), height, width, frames };
    Ok(Scene { clip, tracks, expressions, relation, records, meta })
}

/// Scene directories under `root`, sorted by name.
pub fn scene_dirs(root: &Path) -> Result<Vec<PathBuf>, SynthError> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(META_FILE).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn load_scenes(root: &Path, vocab: &Vocab, max_tokens: usize) -> Result<Vec<Scene>, SynthError> {
    scene_dirs(root)?.iter().map(|d| load_scene(d, vocab, max_tokens)).collect()
}

/// Vocabulary of all words used by the given scenes' expressions.
pub fn scenes_vocab(scenes: &[Scene]) -> Vocab {
    let texts: Vec<&str> = scenes.iter().flat_map(|s| s.records.iter().map(|r| r.text.as_str())).collect();
    Vocab::build(texts)
}

/// Words of the grammar not present in `vocab`.
pub fn missing_words(vocab: &Vocab) -> Vec<String> {
    let mut out: Vec<String> = grammar()
        .iter()
        .flat_map(|t| words(&t.text))
        .filter(|w| vocab.id(w) == crate::ingest::UNK_ID)
        .collect();
    out.sort();
    out.dedup();
    out
}
