//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails. Criteria 4 to 6 train full-size
//! models and share their runs.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::time::{Duration, Instant};

use autograd::gradcheck::relative_error;
use autograd::{ParamStore, Tape, Tensor};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use refertrack::chook::{build_grid, bilinear_sample, normalize_grid, SegmentGrids, GRID_SHAPES};
use refertrack::config::Config;
use refertrack::domain::{BoundingBox, Expression, TrajectorySet, Trajectory};
use refertrack::encoders::BackboneConfig;
use refertrack::evalkit::{evaluate_scenes, hota, label_scores, pair_metrics, roc_auc, score_all, VariantReport};
use refertrack::ingest::{make_expression, Vocab};
use refertrack::model::{Model, ModelConfig, Scorer, SegmentInput, TemporalMode};
use refertrack::objective::{boundary_penalty, focal_loss, total_loss, ObjectiveConfig};
use refertrack::pcd::build_mask;
use refertrack::synthdata::{generate_scenes, grammar_vocab, Scene, SceneConfig};
use refertrack::trainer::{build_windows, train, train_windows, LogRow, TrainConfig, TrainOptions};

type Outcome = Result<String, String>;

fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
}

fn check(ok: bool, what: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed <= limit, format!("took {:.1}s, limit {}s", elapsed.as_secs_f64(), limit.as_secs()))
}

// ---------------------------------------------------------------------------
// Small model fixtures

const WORDS: [&str; 12] = ["red", "blue", "green", "car", "moving", "left", "right", "standing", "still", "on", "the", "object"];

fn tiny_vocab() -> Vocab {
    Vocab::build([WORDS.join(" ").as_str()])
}

/// `C`, `N`, `p`, `M` as given; a 64x192 input gives the default level shapes.
fn tiny_config(channels: usize, slots: usize, p: usize, refs: usize, vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        channels,
        p,
        slots,
        ref_points: refs,
        max_tokens: 6,
        vocab_size: vocab.size(),
        image_size: (64, 192),
        backbone: BackboneConfig { widths: [4, 4, 8, 8], ..Default::default() },
        text_layers: 1,
        ..Default::default()
    }
}

fn random_frames(rng: &mut StdRng, cfg: &ModelConfig) -> Vec<Vec<u8>> {
    let (h, w) = cfg.image_size;
    (0..cfg.p).map(|_| (0..h * w * 3).map(|_| rng.random()).collect()).collect()
}

fn random_expression(rng: &mut StdRng, id: u32, vocab: &Vocab, len: usize) -> Expression {
    let n = rng.random_range(1..=len);
    let text: Vec<&str> = (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
    make_expression(id, &text.join(" "), vocab, len).0
}

/// Boxes well inside the image, non-integer corners.
fn random_boxes(rng: &mut StdRng, cfg: &ModelConfig) -> Vec<BoundingBox> {
    let (h, w) = (cfg.image_size.0 as f64, cfg.image_size.1 as f64);
    let bw = rng.random_range(0.2 * w..0.35 * w);
    let bh = rng.random_range(0.3 * h..0.5 * h);
    let (x0, y0) = (rng.random_range(4.3..w - bw - 12.0), rng.random_range(4.3..h - bh - 12.0));
    (0..cfg.p)
        .map(|k| BoundingBox::new(x0 + 2.7 * k as f64, y0 + 1.3 * k as f64, bw + 0.9 * k as f64, bh + 0.4 * k as f64).unwrap())
        .collect()
}

/// Averaged logits `[N, 2]` and per-level logits for one segment.
fn segment_logits(
    model: &Model,
    params: &ParamStore<f32>,
    frames: &[Vec<u8>],
    exprs: &[&Expression],
    grids: &SegmentGrids,
    slots: Vec<usize>,
) -> (Tensor<f32>, Vec<Tensor<f32>>) {
    let tape = Tape::no_grad(params);
    let refs: Vec<&[u8]> = frames.iter().map(Vec::as_slice).collect();
    let input = model.visual.prepare_input::<f32>(&refs).unwrap();
    let ctx = model.window(&tape, &input, exprs).unwrap();
    let out = model.score_segment(&tape, &ctx, &model.segment_input(&tape, grids, slots)).unwrap();
    let per = out.scores.per_level.iter().map(|v| (*v.value()).clone()).collect();
    ((*out.scores.averaged.value()).clone(), per)
}

fn rows_equal(a: &Tensor<f32>, i: usize, b: &Tensor<f32>, j: usize) -> bool {
    let (ra, rb) = (&a.data()[i * 2..i * 2 + 2], &b.data()[j * 2..j * 2 + 2]);
    ra.iter().zip(rb).all(|(x, y)| x.to_bits() == y.to_bits())
}

// ---------------------------------------------------------------------------
// Criterion 1

fn grid_corners(rng: &mut StdRng) -> Result<(), String> {
    for _ in 0..1000 {
        let b = BoundingBox::new(rng.random_range(0.0..600.0), rng.random_range(0.0..200.0), rng.random_range(0.5..300.0), rng.random_range(0.5..150.0))
            .unwrap();
        for &(h, w) in &GRID_SHAPES {
            let g = build_grid(&b, h, w).unwrap();
            let at = |y: usize, x: usize| (g.data()[(y * w + x) * 2], g.data()[(y * w + x) * 2 + 1]);
            let want = [(0, 0, b.x0, b.y0), (0, w - 1, b.x0 + b.w, b.y0), (h - 1, 0, b.x0, b.y0 + b.h), (h - 1, w - 1, b.x0 + b.w, b.y0 + b.h)];
            for (y, x, ex, ey) in want {
                check(at(y, x) == (ex, ey), format!("corner ({y},{x}) of {b:?} at {h}x{w}: {:?}", at(y, x)))?;
            }
        }
    }
    Ok(())
}

/// Affine field over level pixels, sampled through image-pixel grids. A
/// pixel-centre aligned point `x` of a `W`-wide image sits at level pixel
/// `(x + 0.5) W_l / W - 0.5`.
fn bilinear_affine(rng: &mut StdRng) -> Result<f64, String> {
    let (ih, iw) = (224usize, 672usize);
    let mut worst: f64 = 0.0;
    for trial in 0..200 {
        let (lh, lw) = [(56, 168), (28, 84), (14, 42), (7, 21)][trial % 4];
        let c = 3;
        let coef: Vec<[f64; 3]> = (0..c).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let map = Tensor::from_fn(&[1, lh, lw, c], |i| {
            let (y, x, ch) = (i / (lw * c), (i / c) % lw, i % c);
            coef[ch][0] + coef[ch][1] * x as f64 + coef[ch][2] * y as f64
        });
        let to_img = |l: f64, lsize: usize, isize: usize| (l + 0.5) * isize as f64 / lsize as f64 - 0.5;
        let (xmin, xmax) = (to_img(0.0, lw, iw), to_img((lw - 1) as f64, lw, iw));
        let (ymin, ymax) = (to_img(0.0, lh, ih), to_img((lh - 1) as f64, lh, ih));
        let x0 = rng.random_range(xmin..xmax - 1.0);
        let y0 = rng.random_range(ymin..ymax - 1.0);
        let b = BoundingBox::new(x0, y0, rng.random_range(0.5..xmax - x0), rng.random_range(0.5..ymax - y0)).unwrap();
        let (gh, gw) = GRID_SHAPES[trial % 4];
        let grid = build_grid(&b, gh, gw).unwrap();
        let tape = Tape::<f64>::detached(false);
        let g = tape.constant(Tensor::new(&[1, gh, gw, 2], grid.data().to_vec()));
        let out = bilinear_sample(tape.constant(map), normalize_grid(g, (ih, iw))).value();
        for (k, pt) in grid.data().chunks(2).enumerate() {
            let lx = (pt[0] + 0.5) * lw as f64 / iw as f64 - 0.5;
            let ly = (pt[1] + 0.5) * lh as f64 / ih as f64 - 0.5;
            for (ch, co) in coef.iter().enumerate() {
                let want = co[0] + co[1] * lx + co[2] * ly;
                worst = worst.max((out.data()[k * c + ch] - want).abs());
            }
        }
    }
    check(worst < 1e-6, format!("max affine error {worst:e}"))?;
    Ok(worst)
}

fn mask_cardinality(rng: &mut StdRng) -> Result<(), String> {
    for _ in 0..100 {
        let hw = [768, 192, 48, 12][rng.random_range(0..4)];
        let (n, m, l) = (rng.random_range(1..=36), rng.random_range(0..=10), rng.random_range(1..=25));
        let pad: Vec<bool> = (0..n * l).map(|_| rng.random_bool(0.4)).collect();
        let mask = build_mask(hw, n, m, l, &pad);
        for i in 0..n {
            let pads = pad[i * l..(i + 1) * l].iter().filter(|&&p| p).count();
            let open = mask.row(i).iter().filter(|&&a| a).count();
            check(open == hw + m + (l - pads), format!("row {i}: {open} open keys, expected {}", hw + m + l - pads))?;
        }
    }
    Ok(())
}

fn isolation_and_equivariance(rng: &mut StdRng) -> Result<(), String> {
    let vocab = tiny_vocab();
    let cfg = tiny_config(16, 5, 3, 3, &vocab);
    let (model, params) = Model::new(cfg.clone(), 11).unwrap();
    let n = cfg.slots;
    for trial in 0..100 {
        let frames = random_frames(rng, &cfg);
        let boxes = random_boxes(rng, &cfg);
        let grids = SegmentGrids::new(&boxes, &vec![true; cfg.p], &cfg.grid_shapes).unwrap();
        let exprs: Vec<Expression> = (0..n as u32).map(|i| random_expression(rng, i, &vocab, cfg.max_tokens)).collect();
        let refs: Vec<&Expression> = exprs.iter().collect();
        let slots: Vec<usize> = (0..n).collect();
        let (base, base_levels) = segment_logits(&model, &params, &frames, &refs, &grids, slots.clone());

        let j = rng.random_range(0..n);
        let mut perturbed = exprs.clone();
        perturbed[j] = random_expression(rng, j as u32, &vocab, cfg.max_tokens);
        while perturbed[j].tokens == exprs[j].tokens {
            perturbed[j] = random_expression(rng, j as u32, &vocab, cfg.max_tokens);
        }
        let prefs: Vec<&Expression> = perturbed.iter().collect();
        let (other, other_levels) = segment_logits(&model, &params, &frames, &prefs, &grids, slots.clone());
        for i in (0..n).filter(|&i| i != j) {
            check(rows_equal(&base, i, &other, i), format!("trial {trial}: perturbing pair {j} changed pair {i}"))?;
            for (a, b) in base_levels.iter().zip(&other_levels) {
                check(rows_equal(a, i, b, i), format!("trial {trial}: level logits of pair {i} changed"))?;
            }
        }

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        let permuted: Vec<&Expression> = perm.iter().map(|&k| &exprs[k]).collect();
        let (shuffled, _) = segment_logits(&model, &params, &frames, &permuted, &grids, slots.clone());
        for (row, &k) in perm.iter().enumerate() {
            check(rows_equal(&shuffled, row, &base, k), format!("trial {trial}: row {row} is not row {k} of the unpermuted scores"))?;
        }
        let (by_slots, _) = segment_logits(&model, &params, &frames, &refs, &grids, perm.clone());
        for (row, &k) in perm.iter().enumerate() {
            check(rows_equal(&by_slots, row, &base, k), format!("trial {trial}: slot permutation row {row}"))?;
        }
    }
    Ok(())
}

fn barrier_checks(rng: &mut StdRng) -> Result<f64, String> {
    let cfg = ObjectiveConfig::default();
    let tape = Tape::<f64>::detached(false);
    let pen = |u: f64, v: f64| boundary_penalty(tape.constant(Tensor::new(&[1, 2], vec![u, v])), &cfg).value().item();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        // d = min(1-|u|, 1-|v|) = delta with the other coordinate farther in.
        let other = rng.random_range(-(1.0 - cfg.delta)..(1.0 - cfg.delta));
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let edge = sign * (1.0 - cfg.delta);
        let (u, v) = if rng.random_bool(0.5) { (edge, other) } else { (other, edge) };
        worst = worst.max((pen(u, v) - std::f64::consts::LN_2).abs());
    }
    check(worst <= 1e-9, format!("penalty at d=delta off ln 2 by {worst:e}"))?;
    for _ in 0..10_000 {
        let a = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let b = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let d = |(u, v): (f64, f64)| (1.0f64 - u.abs()).min(1.0 - v.abs());
        let (near, far) = if d(a) <= d(b) { (a, b) } else { (b, a) };
        check(pen(far.0, far.1) <= pen(near.0, near.1), format!("penalty increased from {near:?} to {far:?}"))?;
    }
    Ok(worst)
}

fn focal_vs_cross_entropy(rng: &mut StdRng) -> Result<f64, String> {
    let cfg = ObjectiveConfig { gamma_focal: 0.0, ..Default::default() };
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(1..40);
        let logits: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-8.0..8.0)).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let tape = Tape::<f64>::detached(false);
        let got = focal_loss(tape.constant(Tensor::new(&[n, 2], logits.clone())), &labels, &cfg).value().item();
        let want = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let (a, b) = (logits[2 * i], logits[2 * i + 1]);
                let m = a.max(b);
                let lse = m + ((a - m).exp() + (b - m).exp()).ln();
                let weight = if l == 1 { cfg.alpha_focal } else { 1.0 - cfg.alpha_focal };
                weight * (lse - if l == 1 { b } else { a })
            })
            .sum::<f64>()
            / n as f64;
        worst = worst.max((got - want).abs());
    }
    check(worst < 1e-7, format!("focal(gamma=0) differs from weighted CE by {worst:e}"))?;
    Ok(worst)
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut rng = StdRng::seed_from_u64(1);
    grid_corners(&mut rng).map_err(|e| format!("grid corners: {e}"))?;
    let affine = bilinear_affine(&mut rng).map_err(|e| format!("bilinear: {e}"))?;
    mask_cardinality(&mut rng).map_err(|e| format!("mask: {e}"))?;
    isolation_and_equivariance(&mut rng)?;
    let ln2 = barrier_checks(&mut rng)?;
    let focal = focal_vs_cross_entropy(&mut rng)?;
    within(t0.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "corners exact on 1000 boxes; affine error {affine:.1e}; 100 masks; 100 isolation and equivariance trials bitwise; ln2 error {ln2:.1e}; focal/CE gap {focal:.1e}; {:.1}s",
        t0.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// Criterion 2

struct GradCase {
    model: Model,
    params: ParamStore<f64>,
    frames: Tensor<f64>,
    exprs: Vec<Expression>,
    grids: Vec<Tensor<f64>>,
    scale: f64,
    labels: Vec<u8>,
    objective: ObjectiveConfig,
}

impl GradCase {
    fn loss(&self, params: &ParamStore<f64>, grids: &[Tensor<f64>]) -> f64 {
        let tape = Tape::no_grad(params);
        let refs: Vec<&Expression> = self.exprs.iter().collect();
        let ctx = self.model.window(&tape, &self.frames, &refs).unwrap();
        let seg = SegmentInput { grids: grids.iter().map(|g| tape.constant(g.clone())).collect(), displacement_scale: self.scale, slots: vec![0, 1] };
        let out = self.model.score_segment(&tape, &ctx, &seg).unwrap();
        total_loss(out.scores.averaged, &self.labels, out.ref_points, &self.objective).total.value().item()
    }
}

const HOOK_PREFIX: &str = "hook.";

/// Group name of a parameter: its first two dotted components.
fn group_of(name: &str) -> String {
    name.split('.').take(2).collect::<Vec<_>>().join(".")
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let mut rng = StdRng::seed_from_u64(2);
    let vocab = tiny_vocab();
    let cfg = tiny_config(8, 2, 2, 3, &vocab);
    let (model, params32) = Model::new(cfg.clone(), 5).unwrap();
    let params: ParamStore<f64> = params32.cast();
    let frames8 = random_frames(&mut rng, &cfg);
    let refs: Vec<&[u8]> = frames8.iter().map(Vec::as_slice).collect();
    let boxes = random_boxes(&mut rng, &cfg);
    let grids = SegmentGrids::new(&boxes, &[true, true], &cfg.grid_shapes).unwrap();
    // Positive label on the first pair keeps both classes in the loss.
    let case = GradCase {
        frames: model.visual.prepare_input::<f64>(&refs).unwrap(),
        exprs: (0..2).map(|i| random_expression(&mut rng, i, &vocab, cfg.max_tokens)).collect(),
        grids: grids.levels.clone(),
        scale: model.displacement_scale(&boxes[0]),
        labels: vec![1, 0],
        objective: ObjectiveConfig { lambda: 1.0, ..Default::default() },
        model,
        params,
    };

    let tape = Tape::new(&case.params);
    let exprs: Vec<&Expression> = case.exprs.iter().collect();
    let ctx = case.model.window(&tape, &case.frames, &exprs).unwrap();
    let grid_vars: Vec<_> = case.grids.iter().map(|g| tape.leaf(g.clone())).collect();
    let seg = SegmentInput { grids: grid_vars.clone(), displacement_scale: case.scale, slots: vec![0, 1] };
    let out = case.model.score_segment(&tape, &ctx, &seg).unwrap();
    let parts = total_loss(out.scores.averaged, &case.labels, out.ref_points, &case.objective);
    let grads = tape.backward(parts.total);
    let grid_grads: Vec<Tensor<f64>> = grid_vars.iter().map(|v| grads.wrt(*v).cloned().expect("grid gradient")).collect();
    let param_grads = grads.into_param_grads();

    let step = 1e-5;
    let per_tensor = 6;
    let mut groups: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut backbone_norm = 0.0;
    // The reference decoder reaches the loss only through the reference points.
    let mut hook_norm = 0.0;
    let names: Vec<(String, Vec<usize>)> = case.params.entries().map(|e| (e.name.clone(), e.value.shape().to_vec())).collect();
    for (id, (name, _)) in names.iter().enumerate() {
        let id = autograd::ParamId(id);
        let g = param_grads[id.0].clone().unwrap_or_else(|| Tensor::zeros(case.params.get(id).shape()));
        if name.starts_with("visual.") {
            backbone_norm += g.data().iter().map(|x| x * x).sum::<f64>();
        }
        if name.starts_with(HOOK_PREFIX) {
            hook_norm += g.data().iter().map(|x| x * x).sum::<f64>();
        }
        let len = g.len();
        let picks: BTreeSet<usize> = (0..per_tensor.min(len)).map(|_| rng.random_range(0..len)).collect();
        for k in picks {
            let mut store = case.params.clone();
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + step;
            let plus = case.loss(&store, &case.grids);
            store.get_mut(id).data_mut()[k] = orig - step;
            let minus = case.loss(&store, &case.grids);
            let e = groups.entry(group_of(name)).or_default();
            e.0.push(g.data()[k]);
            e.1.push((plus - minus) / (2.0 * step));
        }
    }
    for (l, g) in grid_grads.iter().enumerate() {
        for _ in 0..8 {
            let k = rng.random_range(0..g.len());
            let mut moved = case.grids.clone();
            let orig = moved[l].data()[k];
            moved[l].data_mut()[k] = orig + step;
            let plus = case.loss(&case.params, &moved);
            moved[l].data_mut()[k] = orig - step;
            let minus = case.loss(&case.params, &moved);
            let e = groups.entry(format!("grid coordinates level {l}")).or_default();
            e.0.push(g.data()[k]);
            e.1.push((plus - minus) / (2.0 * step));
        }
    }
    let mut worst = (String::new(), 0.0);
    for (name, (analytic, numeric)) in &groups {
        let err = relative_error(analytic, numeric, 1e-8);
        if err > worst.1 {
            worst = (name.clone(), err);
        }
    }
    eprintln!("  gradient groups: {:?}", groups.iter().map(|(k, v)| (k.as_str(), relative_error(&v.0, &v.1, 1e-8))).collect::<Vec<_>>());
    check(worst.1 < 1e-3, format!("group {} relative error {:.2e}", worst.0, worst.1))?;
    check(backbone_norm.sqrt() > 0.0, "no gradient reached the backbone")?;
    check(groups.keys().any(|k| k.starts_with(HOOK_PREFIX)), format!("no reference decoder parameters among {:?}", groups.keys()))?;
    check(hook_norm.sqrt() > 0.0, "no gradient reached the reference points")?;
    within(t0.elapsed(), Duration::from_secs(300))?;
    Ok(format!(
        "{} groups incl. grid coordinates, worst {} at {:.2e}; backbone grad norm {:.2e}; reference decoder grad norm {:.2e}; {:.1}s",
        groups.len(),
        worst.0,
        worst.1,
        backbone_norm.sqrt(),
        hook_norm.sqrt(),
        t0.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// Criterion 3

fn brute_auc(scored: &[(f64, u8)]) -> Option<f64> {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for &(sp, lp) in scored {
        for &(sn, ln) in scored {
            if lp == 1 && ln == 0 {
                pairs += 1;
                twice += if sp > sn { 2 } else if sp == sn { 1 } else { 0 };
            }
        }
    }
    (pairs > 0).then(|| twice as f64 / 2.0 / pairs as f64)
}

fn track(id: u32, frames: &[u32], b: BoundingBox) -> Trajectory {
    Trajectory { target_id: id, boxes: frames.iter().map(|&f| (f, b)).collect() }
}

fn criterion_3() -> Outcome {
    let t0 = Instant::now();
    let mut rng = StdRng::seed_from_u64(3);
    let mut checked = 0;
    for n in 0..=20 {
        for _ in 0..500 {
            let levels = rng.random_range(1..8);
            let scored: Vec<(f64, u8)> = (0..n).map(|_| (rng.random_range(0..levels) as f64 / levels as f64, rng.random_range(0..2))).collect();
            let want = brute_auc(&scored);
            check(roc_auc(&scored) == want, format!("roc_auc {:?} vs brute force {want:?} on {scored:?}", roc_auc(&scored)))?;
            check(pair_metrics(&scored).auc == want, "pair_metrics AUC differs from brute force")?;
            checked += 1;
        }
    }
    check(pair_metrics(&[(0.9, 1), (0.6, 0), (0.2, 1)]).auc == Some(0.5), "three-pair example")?;

    let b = BoundingBox::new(10.0, 10.0, 20.0, 20.0).unwrap();
    let far = BoundingBox::new(300.0, 100.0, 20.0, 20.0).unwrap();
    let set = |ts: Vec<Trajectory>| TrajectorySet { video_id: "v".into(), trajectories: ts };
    let gt = set(vec![track(1, &[0, 1, 2, 3], b)]);
    let cases = [
        ("identical", set(vec![track(7, &[0, 1, 2, 3], b)]), 1.0, 1.0, 1.0),
        ("disjoint", set(vec![track(7, &[0, 1, 2, 3], far)]), 0.0, 0.0, 0.0),
        ("half coverage", set(vec![track(7, &[0, 1], b)]), 0.5, 0.5, 0.5),
    ];
    for (name, pred, h, d, a) in cases {
        let s = hota(&pred, &gt);
        check((s.hota, s.deta, s.assa) == (h, d, a), format!("{name}: got {s:?}, expected HOTA {h} DetA {d} AssA {a}"))?;
    }
    within(t0.elapsed(), Duration::from_secs(120))?;
    Ok(format!("{checked} random datasets of up to 20 segments match brute force; 3 HOTA micro-cases exact; {:.1}s", t0.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------------------
// Criteria 4 to 6: desk-scale training

const TRAIN_SCENES: usize = 200;
const HELD_OUT_SCENES: usize = 50;
const HELD_OUT_FIRST_SEED: u64 = 100_000;

struct Data {
    vocab: Vocab,
    train: Vec<Scene>,
    held_out: Vec<Scene>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Variant {
    Full,
    NoTi,
    Cosine,
    NoConditioning,
}

impl Variant {
    fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTi => "no-TI",
            Variant::Cosine => "cosine (no PCD)",
            Variant::NoConditioning => "M=0",
        }
    }
}

struct Run {
    log: Vec<LogRow>,
    report: VariantReport,
    seconds: f64,
}

fn default_setup(variant: Variant, vocab: &Vocab, seed: u64) -> (ModelConfig, TrainConfig, Config) {
    let base = Config::default();
    let mut mc = base.model_config(vocab.size());
    let mut tc = TrainConfig { seed, ..base.train.clone() };
    match variant {
        Variant::Full => {}
        Variant::NoTi => mc.temporal = TemporalMode::MeanPool,
        Variant::Cosine => mc.scorer = Scorer::Cosine,
        Variant::NoConditioning => {
            mc.ref_points = 0;
            tc.ref_points = 0;
        }
    }
    (mc, tc, base)
}

fn train_and_evaluate(data: &Data, variant: Variant, seed: u64) -> Result<Run, String> {
    let t0 = Instant::now();
    let (mc, tc, base) = default_setup(variant, &data.vocab, seed);
    let (model, mut params) = Model::new(mc, seed).map_err(|e| e.to_string())?;
    let rep = train(&data.train, &model, &mut params, &data.vocab, &tc, &base.augment, &base.objective, &TrainOptions::default())
        .map_err(|e| e.to_string())?;
    let report = evaluate_scenes(&model, &params, &data.held_out, &base.eval).map_err(|e| e.to_string())?;
    let run = Run { log: rep.log, report, seconds: t0.elapsed().as_secs_f64() };
    eprintln!(
        "  trained {} seed {seed}: {} steps in {:.0}s, held-out AUC {}",
        variant.name(),
        run.log.len(),
        run.seconds,
        fmt_opt(run.report.pairs.auc)
    );
    Ok(run)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("undefined".into(), |x| format!("{x:.4}"))
}

struct Runs {
    data: Data,
    done: BTreeMap<(Variant, u64), Run>,
}

impl Runs {
    fn get(&mut self, variant: Variant, seed: u64) -> Result<&Run, String> {
        if !self.done.contains_key(&(variant, seed)) {
            let run = train_and_evaluate(&self.data, variant, seed)?;
            self.done.insert((variant, seed), run);
        }
        Ok(&self.done[&(variant, seed)])
    }
}

fn overfit(data: &Data) -> Result<String, String> {
    let (mc, tc, base) = default_setup(Variant::Full, &data.vocab, 0);
    let scenes = &data.train[..3];
    let mut windows = build_windows(scenes, tc.p, tc.window_stride).map_err(|e| e.to_string())?;
    let mut keep = 8;
    for w in &mut windows {
        w.segments.truncate(keep);
        keep -= w.segments.len();
    }
    windows.retain(|w| !w.segments.is_empty());
    let chosen: BTreeSet<(String, u32, u32)> = windows
        .iter()
        .flat_map(|w| w.segments.iter().map(move |s| (scenes[w.scene].clip.video_id.clone(), s.target_id, s.start_frame)))
        .collect();
    check(chosen.len() == 8, format!("only {} segments available", chosen.len()))?;
    let (model, mut params) = Model::new(mc, 0).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { epochs: 200, ..tc };
    let opts = TrainOptions { max_steps: Some(200), ..Default::default() };
    let rep = train_windows(scenes, &windows, &model, &mut params, &data.vocab, &cfg, &base.augment, &base.objective, &opts)
        .map_err(|e| e.to_string())?;
    let mut correct = 0;
    let mut total = 0;
    for scene in scenes {
        let scores = score_all(&model, &params, &scene.clip, &scene.tracks, &scene.expressions, base.eval.window_stride).map_err(|e| e.to_string())?;
        let pairs = label_scores(&scores, &scene.tracks, &scene.expressions, &scene.relation, cfg.p).map_err(|e| e.to_string())?;
        for p in pairs.iter().filter(|p| chosen.contains(&(p.video_id.clone(), p.target_id, p.start))) {
            total += 1;
            correct += ((p.score >= 0.5) == (p.label == 1)) as usize;
        }
    }
    let acc = correct as f64 / total.max(1) as f64;
    let msg = format!("overfit: {} steps, pair accuracy {acc:.4} ({correct}/{total}) on the 8 segments", rep.log.len());
    check(rep.log.len() <= 200 && acc == 1.0, msg.clone())?;
    Ok(msg)
}

fn criterion_4(runs: &mut Runs) -> Outcome {
    let t0 = Instant::now();
    let over = overfit(&runs.data);
    let run = runs.get(Variant::Full, 0)?;
    let auc = run.report.pairs.auc;
    let f1 = run.report.macro_pair_f1;
    let last = run.log.last().map(|r| r.total).unwrap_or(f64::NAN);
    let learn = format!(
        "held-out AUC {} (need >= 0.90), macro pair-F1 {} (need >= 0.80), HOTA {:.4}, final train loss {last:.5}, {:.0}s",
        fmt_opt(auc),
        fmt_opt(f1),
        run.report.macro_hota,
        run.seconds
    );
    let learned = auc.is_some_and(|a| a >= 0.90) && f1.is_some_and(|f| f >= 0.80);
    let within_budget = t0.elapsed() <= Duration::from_secs(4 * 3600);
    match (learned && within_budget, over) {
        (true, Ok(o)) => Ok(format!("{learn}; {o}")),
        (_, Ok(o)) => Err(format!("{learn}; {o}")),
        (_, Err(o)) => Err(format!("{learn}; {o}")),
    }
}

fn criterion_5(runs: &mut Runs) -> Outcome {
    let seeds = [0u64, 1, 2];
    let mut mean = BTreeMap::new();
    for v in [Variant::Full, Variant::NoTi, Variant::Cosine] {
        let mut sum = 0.0;
        for &s in &seeds {
            sum += runs.get(v, s)?.report.pairs.auc.ok_or("undefined AUC")?;
        }
        mean.insert(v, sum / seeds.len() as f64);
    }
    let m0 = runs.get(Variant::NoConditioning, 0)?.report.pairs.auc;
    let full0 = runs.get(Variant::Full, 0)?.report.pairs.auc;
    let (full, no_ti, cos) = (mean[&Variant::Full], mean[&Variant::NoTi], mean[&Variant::Cosine]);
    let line = format!(
        "mean AUC over seeds 0-2: full {full:.4}, no-TI {no_ti:.4}, cosine {cos:.4} (gaps {:.4}, {:.4}; need > 0.01); informational M=10 vs M=0 at seed 0: {} vs {}",
        full - no_ti,
        no_ti - cos,
        fmt_opt(full0),
        fmt_opt(m0)
    );
    if full - no_ti > 0.01 && no_ti - cos > 0.01 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn criterion_6(runs: &mut Runs) -> Outcome {
    let again = train_and_evaluate(&runs.data, Variant::Full, 0)?;
    let first = runs.get(Variant::Full, 0)?;
    check(first.log.len() == again.log.len(), format!("{} vs {} logged steps", first.log.len(), again.log.len()))?;
    let worst = first.log.iter().zip(&again.log).map(|(a, b)| (a.total - b.total).abs()).fold(0.0, f64::max);
    check(worst <= 1e-6, format!("loss curves differ by up to {worst:e}"))?;
    let (a, b) = (serde_json::to_string(&first.report).unwrap(), serde_json::to_string(&again.report).unwrap());
    check(a == b, "final metric reports differ")?;
    Ok(format!("{} steps, max loss difference {worst:e}, reports identical", first.log.len()))
}

fn main() {
    // Positional arguments select criteria by number; none runs all.
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: &str| only.is_empty() || only.iter().any(|o| o == n);
    let mut failed = 0;
    let mut report = |name: &str, outcome: Outcome| match outcome {
        Ok(d) => emit(&format!("PASS criterion {name}: {d}")),
        Err(d) => {
            failed += 1;
            emit(&format!("FAIL criterion {name}: {d}"))
        }
    };
    if wanted("1") {
        report("1 (exactness)", criterion_1());
    }
    if wanted("2") {
        report("2 (gradients)", criterion_2());
    }
    if wanted("3") {
        report("3 (oracle equivalence)", criterion_3());
    }
    if !(wanted("4") || wanted("5") || wanted("6")) {
        return finish(failed);
    }

    let vocab = grammar_vocab();
    let l = Config::default().train.max_tokens;
    let data = Data {
        train: generate_scenes(&SceneConfig::default(), 0, TRAIN_SCENES, &vocab, l).expect("training scenes"),
        held_out: generate_scenes(&SceneConfig::default(), HELD_OUT_FIRST_SEED, HELD_OUT_SCENES, &vocab, l).expect("held-out scenes"),
        vocab,
    };
    let mut runs = Runs { data, done: BTreeMap::new() };
    if wanted("4") {
        report("4 (desk-scale learning)", criterion_4(&mut runs));
    }
    if wanted("5") {
        report("5 (ablation ordering)", criterion_5(&mut runs));
    }
    if wanted("6") {
        report("6 (determinism)", criterion_6(&mut runs));
    }
    finish(failed)
}

fn finish(failed: usize) {
    if failed > 0 {
        emit(&format!("{failed} acceptance criteria failed"));
        std::process::exit(1);
    }
}
