//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! `ARALIGN_ACCEPT_WORKSPACE` reuses a workspace between invocations;
//! `ARALIGN_ACCEPT_ONLY=1,4,7` runs a subset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use aralign::alignment::{
    composite_loss, gva_loss, select_alignment_positions, Mechanism, Objective, Projection, ProjectionHead,
};
use aralign::armodel::{ar_loss, build_sequence, loss_weights, z_loss, ArConfig, ArModel, Decoder, ModeTag, TokenSequence};
use aralign::corpus::{generate_scene, render, CorpusConfig, Palette, SceneSpec};
use aralign::foundation::EncoderKind;
use aralign::image::Image;
use aralign::metrics::{detect_attributes, frechet_distance, FeatureSet};
use aralign::numerics::{finite_difference_check, Container, Graph, NumericsError, ParamStore, Tensor};
use aralign::sampler::cfg_logits;
use aralign::tokenizers::{pad_to, uncond_ids, TextVocab, Vocabulary, BOI, REP};
use aralign::tokenizers::{VqConfig, VqTokenizer};
use aralign::trainer::{ModelShape, Regime};
use aralign_cli::ablate::{ablate, AblationGrid};
use aralign_cli::config::PipelineConfig;
use aralign_cli::stages::{self, Options, SampleRecord, CHECKPOINT_FILE, METRICS_FILE};
use aralign_cli::workspace::{Keys, Kind, Workspace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Verdict = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn num<E: std::fmt::Display>(e: E) -> NumericsError {
    NumericsError::InvalidArgument { op: "acceptance", msg: e.to_string() }
}

fn reference_vocab() -> Vocabulary {
    Vocabulary { text_size: TextVocab::grammar().len(), codebook_size: VqConfig::default().codebook_size }
}

fn random_model(seed: u64) -> ArModel<f32> {
    let c = PipelineConfig::default();
    let cfg = ModelShape::default().ar_config(reference_vocab(), c.train.max_text_len, c.sample.image_tokens());
    ArModel::new(cfg, &mut rng(seed)).unwrap()
}

/// Caption of a random scene, padded to the training text length.
fn random_text(seed: u64) -> Vec<u32> {
    let s = generate_scene(seed, &CorpusConfig::default()).unwrap();
    TextVocab::grammar().encode_padded(&s.caption, PipelineConfig::default().train.max_text_len).unwrap().0
}

fn random_image_ids(r: &mut ChaCha8Rng, vocab: &Vocabulary, n: usize) -> Vec<u32> {
    (0..n).map(|_| vocab.image_id(r.random_range(0..vocab.codebook_size))).collect()
}

// ---------------------------------------------------------------- 1

fn roughen(p: &mut ParamStore<f64>, std: f64, seed: u64) {
    let mut r = rng(seed);
    for (_, t) in p.iter_mut() {
        let noise: Tensor<f64> = Tensor::randn(t.shape(), std, &mut r);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(w, n)| *w += n);
    }
}

fn c1_gradients() -> Verdict {
    let start = Instant::now();
    let vocab = Vocabulary { text_size: TextVocab::grammar().len(), codebook_size: 8 };
    let cfg = ArConfig { vocab, dim: 16, depth: 2, heads: 2, mlp_ratio: 2, max_len: 32 };
    let mut model = ArModel::<f64>::new(cfg, &mut rng(1)).unwrap();
    roughen(&mut model.params, 0.3, 2);
    let mut head = ProjectionHead::<f64>::new(Projection::Mlp2, 16, 8, &mut rng(3)).unwrap();
    roughen(&mut head.params, 0.3, 4);
    let joint: ParamStore<f64> =
        model.params.iter().chain(head.params.iter()).map(|(n, t)| (n.to_string(), t.clone())).collect();

    let text = TextVocab::grammar().encode("a red square in the top left").unwrap();
    let mut r = rng(5);
    let seqs: Vec<(Mechanism, TokenSequence)> = [Mechanism::HybNext, Mechanism::Rep]
        .into_iter()
        .map(|m| (m, build_sequence(&text, &random_image_ids(&mut r, &vocab, 16), m, &vocab, 16).unwrap()))
        .collect();
    let targets: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();

    #[derive(Clone, Copy)]
    enum Term {
        Ar,
        Z,
        Gva(Objective),
        Composite(Objective, f64),
    }
    let cases = [
        ("ar", 0, Term::Ar),
        ("z", 0, Term::Z),
        ("gva_cosine", 0, Term::Gva(Objective::Cosine)),
        ("gva_mse", 0, Term::Gva(Objective::Mse)),
        ("composite_hybnext_cosine", 0, Term::Composite(Objective::Cosine, 1.0)),
        ("composite_rep_mse", 1, Term::Composite(Objective::Mse, 0.5)),
    ];
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for (name, which, term) in cases {
        let (mech, seq) = &seqs[which];
        let w = loss_weights::<f64>(seq, false);
        let positions = vec![select_alignment_positions(seq, *mech).unwrap()];
        let f_gf = vec![targets.clone()];
        let report = finite_difference_check(
            |g, p| {
                let out = model.forward_graph(g, p, &seq.ids, &seq.pad_mask(), 1).map_err(num)?;
                let gva = |g: &mut Graph<f64>, obj: Objective| {
                    gva_loss(g, p, &head, out.hidden[1], seq.len(), &positions, &f_gf, obj).map(|v| v.loss).map_err(num)
                };
                match term {
                    Term::Ar => ar_loss(g, out.logits, &seq.targets, &w).map_err(num),
                    Term::Z => z_loss(g, out.logits, &w).map_err(num),
                    Term::Gva(obj) => gva(g, obj),
                    Term::Composite(obj, lambda) => {
                        let ar = ar_loss(g, out.logits, &seq.targets, &w).map_err(num)?;
                        let z = z_loss(g, out.logits, &w).map_err(num)?;
                        let a = gva(g, obj)?;
                        composite_loss(g, ar, Some(a), z, lambda).map_err(num)
                    }
                }
            },
            &joint,
            1e-5,
            0,
        )
        .map_err(|e| format!("{name}: {e}"))?;
        worst = worst.max(report.max_rel_err);
        lines.push(format!("{name} {:.1e}", report.max_rel_err));
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst < 1e-4 && secs < 60.0, format!("max rel err {worst:.2e} ({}), {secs:.1}s", lines.join(", ")))
}

// ---------------------------------------------------------------- 2

/// First index with the smallest squared distance, in f64.
fn brute_nearest(v: &[f64], book: &[f64], d: usize) -> usize {
    let dist: Vec<f64> = book.chunks(d).map(|c| c.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()).collect();
    let min = dist.iter().cloned().fold(f64::INFINITY, f64::min);
    dist.iter().position(|&x| x == min).unwrap()
}

fn c2_quantizer() -> Verdict {
    let start = Instant::now();
    let cfg = VqConfig::default();
    let d = cfg.code_dim;
    let mut t = VqTokenizer::<f64>::new(cfg, &mut rng(20)).unwrap();
    // duplicate rows force exact ties
    {
        let book = t.params.get_mut("codebook").unwrap().data_mut();
        for (src, dst) in [(3, 10), (3, 40), (7, 8), (60, 61)] {
            let row = book[src * d..(src + 1) * d].to_vec();
            book[dst * d..(dst + 1) * d].copy_from_slice(&row);
        }
    }
    let book = t.codebook().data().to_vec();
    let k = cfg.codebook_size;
    let mut r = rng(21);
    let n = 10_000;
    let mut data = Vec::with_capacity(n * d);
    let mut exact = 0;
    for i in 0..n {
        match i % 4 {
            0 => {
                let c = r.random_range(0..k);
                data.extend_from_slice(&book[c * d..(c + 1) * d]);
                exact += 1;
            }
            1 => {
                let c = [3, 7, 60, 10, 40, 8, 61][r.random_range(0..7)];
                data.extend(book[c * d..(c + 1) * d].iter().map(|x| x + r.random_range(-0.05..0.05)));
            }
            _ => data.extend((0..d).map(|_| r.random_range(-2.5..2.5))),
        }
    }
    let (grid, zq) = t.quantize(&Tensor::new(&[100, 100, d], data.clone()).unwrap()).unwrap();
    let codes: Vec<usize> = grid.concat();
    let mut wrong = 0;
    let mut ties = 0;
    for (i, v) in data.chunks(d).enumerate() {
        let want = brute_nearest(v, &book, d);
        if [8, 10, 40, 61].contains(&codes[i]) {
            ties += 1;
        }
        if codes[i] != want || zq.data()[i * d..(i + 1) * d] != book[want * d..(want + 1) * d] {
            wrong += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        wrong == 0 && ties == 0 && secs < 10.0,
        format!("{wrong}/{n} mismatches, {exact} exact codes, {ties} duplicate-row picks, {secs:.2}s"),
    )
}

// ---------------------------------------------------------------- 5

fn c5_positions() -> Verdict {
    let vocab = reference_vocab();
    let n_img = PipelineConfig::default().sample.image_tokens();
    let mut r = rng(50);
    let mut bad = Vec::new();
    let mut counts = BTreeMap::new();
    for trial in 0..100u64 {
        let mech = [Mechanism::HybNext, Mechanism::Rep, Mechanism::None][r.random_range(0..3)];
        *counts.entry(format!("{mech:?}")).or_insert(0) += 1;
        let seq = build_sequence(&random_text(500 + trial), &random_image_ids(&mut r, &vocab, n_img), mech, &vocab, n_img)
            .unwrap();
        let got = select_alignment_positions(&seq, mech).unwrap();
        let boi = seq.ids.iter().position(|&i| i == BOI).unwrap();
        let want: Vec<usize> = match mech {
            // the input at BOI (or REP) predicts the first image token, the last image token predicts EOI
            Mechanism::HybNext => {
                let first = if seq.ids.contains(&REP) { boi + 1 } else { boi };
                (first..first + n_img).collect()
            }
            Mechanism::Rep => vec![seq.ids.iter().position(|&i| i == REP).unwrap()],
            Mechanism::None => vec![],
        };
        let img_targets = got.iter().all(|&t| vocab.is_image_token(seq.targets[t]));
        if got != want || !img_targets {
            bad.push(trial);
        }
    }
    check(bad.is_empty(), format!("100 layouts {counts:?}, mismatched trials {bad:?}"))
}

// ---------------------------------------------------------------- 6

fn c6_guidance() -> Verdict {
    let model = random_model(60);
    let vocab = model.vocab();
    let mut r = rng(61);
    let mut bad = 0;
    for state in 0..20u64 {
        let text = random_text(600 + state);
        let uncond = pad_to(uncond_ids(), text.len()).unwrap().0;
        let mech = if state % 2 == 0 { Mechanism::HybNext } else { Mechanism::Rep };
        let (c_ids, c_roles) = aralign::armodel::build_prompt(&text, mech).unwrap();
        let (u_ids, u_roles) = aralign::armodel::build_prompt(&uncond, mech).unwrap();
        let len = r.random_range(0..16);
        let prefix = random_image_ids(&mut r, &vocab, len);
        let mut dec = Decoder::new(&model, 2);
        let mut logits = None;
        for t in 0..c_ids.len() + prefix.len() {
            let (ids, pads) = if t < c_ids.len() {
                ([c_ids[t], u_ids[t]], [c_roles[t] == aralign::armodel::Role::Pad, u_roles[t] == aralign::armodel::Role::Pad])
            } else {
                let id = prefix[t - c_ids.len()];
                ([id, id], [false, false])
            };
            logits = Some(dec.step(&ids, &pads).unwrap());
        }
        let l = logits.unwrap();
        let cond: Vec<f64> = l.row(0).iter().map(|&v| v as f64).collect();
        let unc: Vec<f64> = l.row(1).iter().map(|&v| v as f64).collect();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if bits(&cfg_logits(&cond, &unc, 1.0)) != bits(&cond) || bits(&cfg_logits(&cond, &unc, 0.0)) != bits(&unc) {
            bad += 1;
        }
        if cond == unc {
            return Err(format!("state {state}: conditional and unconditional rows coincide"));
        }
    }
    check(bad == 0, format!("{bad}/20 decoder states differ from the pure rows"))
}

// ---------------------------------------------------------------- 7

fn gaussian(seed: u64, n: usize, mean: &[f64], sd: &[f64], rotation: Option<&[Vec<f64>]>) -> FeatureSet {
    let mut r = rng(seed);
    let rows = (0..n)
        .map(|_| {
            let x: Vec<f64> = mean.iter().zip(sd).map(|(&m, &s)| Normal::new(m, s).unwrap().sample(&mut r)).collect();
            match rotation {
                Some(q) => q.iter().map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum()).collect(),
                None => x,
            }
        })
        .collect();
    FeatureSet::new(rows, "gaussian").unwrap()
}

/// Closed form for axis-aligned Gaussians: |mu_a - mu_b|^2 + sum (sd_a - sd_b)^2.
fn diagonal_distance(ma: &[f64], sa: &[f64], mb: &[f64], sb: &[f64]) -> f64 {
    let mean: f64 = ma.iter().zip(mb).map(|(a, b)| (a - b).powi(2)).sum();
    let cov: f64 = sa.iter().zip(sb).map(|(a, b)| (a - b).powi(2)).sum();
    mean + cov
}

fn c7_frechet() -> Verdict {
    let n = 10_000;
    // rotation by 30 degrees in two planes; the distance is invariant under it
    let (c, s) = (30f64.to_radians().cos(), 30f64.to_radians().sin());
    let q = vec![vec![c, -s, 0.0, 0.0], vec![s, c, 0.0, 0.0], vec![0.0, 0.0, c, -s], vec![0.0, 0.0, s, c]];
    type Setting<'a> = (&'a str, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Option<&'a [Vec<f64>]>);
    let settings: Vec<Setting> = vec![
        ("1d", vec![0.0], vec![1.0], vec![3.0], vec![1.0], None),
        ("2d", vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0], vec![2.0, 0.5], None),
        ("4d_rotated", vec![0.0; 4], vec![1.0, 2.0, 3.0, 4.0], vec![1.0, -1.0, 2.0, 0.0], vec![2.0, 2.0, 1.0, 5.0], Some(&q)),
    ];
    let mut ok = true;
    let mut lines = Vec::new();
    for (i, (name, ma, sa, mb, sb, rot)) in settings.iter().enumerate() {
        let a = gaussian(70 + 2 * i as u64, n, ma, sa, *rot);
        let b = gaussian(71 + 2 * i as u64, n, mb, sb, *rot);
        let want = diagonal_distance(ma, sa, mb, sb);
        let got = frechet_distance(&a, &b).map_err(|e| e.to_string())?;
        let rel = (got - want).abs() / want;
        let same = frechet_distance(&a, &a).map_err(|e| e.to_string())?;
        ok &= rel < 0.02 && same.abs() < 1e-6;
        lines.push(format!("{name}: {got:.4} vs {want} ({:.2}%), self {same:.1e}", 100.0 * rel));
    }
    check(ok, lines.join("; "))
}

// ---------------------------------------------------------------- 8

fn c8_detector() -> Verdict {
    let mut single_bad = 0;
    for palette in [Palette::Standard, Palette::Alternate] {
        for spec in SceneSpec::all_single_object() {
            let img = render(&spec, 32, palette).map_err(|e| e.to_string())?;
            single_bad += usize::from(detect_attributes(&img, palette) != spec);
        }
    }
    // uniform noise with standard deviation 0.05
    let half = 0.05 * 3f32.sqrt();
    let mut r = rng(80);
    let cfg = CorpusConfig { min_objects: 2, max_objects: 3, ..Default::default() };
    let mut ok = 0;
    for seed in 0..1000 {
        let s = generate_scene(20_000_000 + seed, &cfg).map_err(|e| e.to_string())?;
        let noisy = Image { data: s.image.data.iter().map(|v| v + r.random_range(-half..half)).collect(), ..s.image };
        ok += usize::from(detect_attributes(&noisy, cfg.palette) == s.spec.unwrap());
    }
    check(
        single_bad == 0 && ok >= 990,
        format!("single-object mismatches {single_bad}/432, noisy multi-object {ok}/1000"),
    )
}

// ---------------------------------------------------------------- 12

fn c12_causality() -> Verdict {
    let models: Vec<ArModel<f32>> = (0..4).map(|s| random_model(120 + s)).collect();
    let vocab = reference_vocab();
    let n_img = PipelineConfig::default().sample.image_tokens();
    let mut r = rng(121);
    let mut bad = Vec::new();
    for trial in 0..100u64 {
        let m = &models[trial as usize % models.len()];
        let mech = [Mechanism::HybNext, Mechanism::Rep][r.random_range(0..2)];
        let seq = build_sequence(&random_text(1200 + trial), &random_image_ids(&mut r, &vocab, n_img), mech, &vocab, n_img)
            .unwrap();
        let pos = r.random_range(1..seq.len());
        let new_id = loop {
            let id = r.random_range(0..vocab.len() as u32);
            if id != seq.ids[pos] {
                break id;
            }
        };
        let before = m.forward(&seq).unwrap();
        let mut s2 = seq.clone();
        s2.ids[pos] = new_id;
        let after = m.forward(&s2).unwrap();
        let v = vocab.len();
        let prefix_same = before.logits.data()[..pos * v] == after.logits.data()[..pos * v]
            && before.hidden.iter().zip(&after.hidden).all(|(a, b)| a.data()[..pos * m.config.dim] == b.data()[..pos * m.config.dim]);
        let changed = before.logits.row(pos) != after.logits.row(pos);
        if !(prefix_same && changed) {
            bad.push(trial);
        }
    }
    check(bad.is_empty(), format!("100 perturbations, violations {bad:?}"))
}

// ---------------------------------------------------------------- pipeline criteria

struct Pipeline {
    ws: Workspace,
    base: PipelineConfig,
    o: Options,
    _tmp: Option<tempfile::TempDir>,
}

impl Pipeline {
    fn new() -> Self {
        let (root, tmp) = match std::env::var_os("ARALIGN_ACCEPT_WORKSPACE") {
            Some(p) => (PathBuf::from(p), None),
            None => {
                let t = tempfile::tempdir().unwrap();
                (t.path().to_path_buf(), Some(t))
            }
        };
        let o = Options { deterministic: true, quiet: true, checkpoint_every: 500, halt_at: None };
        Pipeline { ws: Workspace::new(root), base: PipelineConfig::default(), o, _tmp: tmp }
    }

    fn with(&self, f: impl FnOnce(&mut PipelineConfig)) -> PipelineConfig {
        let mut c = self.base.clone();
        f(&mut c);
        c
    }

    /// Fresh workspace sharing data, tokenizer and encoder with the main one.
    fn scratch(&self, dir: &Path) -> std::io::Result<Workspace> {
        let keys = Keys::new(&self.base);
        for kind in [Kind::Data, Kind::Tokenizer, Kind::Encoder(EncoderKind::CrossModal)] {
            let dst = dir.join(kind.dir_name());
            std::fs::create_dir_all(&dst)?;
            let src = self.ws.dir(kind, keys.get(kind)).canonicalize()?;
            std::os::unix::fs::symlink(src, dst.join(keys.get(kind)))?;
        }
        Ok(Workspace::new(dir))
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn c9_pipeline(p: &Pipeline) -> Verdict {
    let start = Instant::now();
    let mut lines = Vec::new();
    let (mut wins, mut rising) = (0, 0);
    for seed in 0..3u64 {
        let arra = p.with(|c| c.train.seed = seed);
        let base = p.with(|c| {
            c.train.seed = seed;
            c.train.regime = Regime::Baseline;
        });
        for c in [&arra, &base] {
            for kind in stages::eval_dependencies(c) {
                stages::produce(&p.ws, c, kind, &p.o).map_err(e)?;
            }
        }
        let ra = stages::eval(&p.ws, &arra, &p.o).map_err(e)?;
        let rb = stages::eval(&p.ws, &base, &p.o).map_err(e)?;
        let (xa, xb) = (ra.metrics.attributes.unwrap().exact_match, rb.metrics.attributes.unwrap().exact_match);
        let (c0, c1) = (ra.heldout_cos.first().map(|x| x.1), ra.heldout_cos.last().map(|x| x.1));
        wins += usize::from(xa >= xb);
        let up = matches!((c0, c1), (Some(a), Some(b)) if b > a);
        rising += usize::from(up);
        lines.push(format!(
            "seed {seed}: exact {xa:.3} vs {xb:.3}, cos {:.3}->{:.3}",
            c0.unwrap_or(f64::NAN),
            c1.unwrap_or(f64::NAN)
        ));
    }
    let mins = start.elapsed().as_secs_f64() / 60.0;
    check(
        wins >= 2 && rising == 3 && mins < 60.0,
        format!("{}; wins {wins}/3, cos rising {rising}/3, {mins:.1} min", lines.join("; ")),
    )
}

fn c4_lambda_zero(p: &Pipeline) -> Verdict {
    let dir = tempfile::tempdir().map_err(e)?;
    let ws = p.scratch(dir.path()).map_err(e)?;
    let arra = p.with(|c| {
        c.train.steps = 20;
        c.train.alignment.lambda = 0.0;
    });
    let base = p.with(|c| {
        c.train.steps = 20;
        c.train.regime = Regime::Baseline;
    });
    let ra = stages::train(&ws, &arra, &p.o).map_err(e)?;
    let rb = stages::train(&ws, &base, &p.o).map_err(e)?;
    let load = |d: &Path| -> Result<ArModel<f32>, String> {
        ArModel::read_tagged(&Container::load(&d.join(CHECKPOINT_FILE)).map_err(e)?, ModeTag::T2i).map_err(e)
    };
    let (ma, mb) = (load(&ra.dir)?, load(&rb.dir)?);
    let diff = ma.params.max_abs_diff(&mb.params).ok_or("parameter sets differ in layout")?;
    let same_loss = ra.manifest.records.iter().zip(&rb.manifest.records).all(|(a, b)| a.l_ar.to_bits() == b.l_ar.to_bits());
    check(
        diff == 0.0 && same_loss && ra.manifest.records.len() == 20,
        format!("max |theta_arra - theta_baseline| = {diff} after 20 steps, l_ar identical: {same_loss}"),
    )
}

fn c11_determinism(p: &Pipeline) -> Verdict {
    let c = p.with(|c| c.train.steps = 100);
    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir()).collect::<Result<_, _>>().map_err(e)?;
    let ws: Vec<Workspace> = dirs.iter().map(|d| p.scratch(d.path())).collect::<Result<_, _>>().map_err(e)?;
    let o = Options { checkpoint_every: 50, ..p.o };
    let r0 = stages::train(&ws[0], &c, &o).map_err(e)?;
    let r1 = stages::train(&ws[1], &c, &o).map_err(e)?;
    if stages::train(&ws[2], &c, &Options { halt_at: Some(50), ..o }).is_ok() {
        return Err("halted run reported success".into());
    }
    let r2 = stages::train(&ws[2], &c, &o).map_err(e)?;
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).map_err(e);
    let logs_same = read(&r0.dir, METRICS_FILE)? == read(&r1.dir, METRICS_FILE)?;
    let weights_same = read(&r0.dir, CHECKPOINT_FILE)? == read(&r1.dir, CHECKPOINT_FILE)?;
    let resumed_same = read(&r0.dir, CHECKPOINT_FILE)? == read(&r2.dir, CHECKPOINT_FILE)?
        && read(&r0.dir, METRICS_FILE)? == read(&r2.dir, METRICS_FILE)?;
    check(
        logs_same && weights_same && resumed_same,
        format!("repeat logs identical: {logs_same}, repeat weights identical: {weights_same}, resumed at 50/100 identical: {resumed_same}"),
    )
}

fn c3_head_unused(p: &Pipeline) -> Verdict {
    let c = p.base.clone();
    let keys = Keys::new(&c);
    let run = p.ws.require(Kind::Run, &keys.run).map_err(e)?;
    let original = Container::<f32>::load(&run.join(CHECKPOINT_FILE)).map_err(e)?;
    let heldout = stages::load_split(&p.ws.dir(Kind::Data, &keys.data).join("heldout"), c.train.corpus.canvas).map_err(e)?;
    let captions: Vec<String> = heldout.iter().take(50).map(|s| s.caption.clone()).collect();
    if captions.len() < 50 {
        return Err(format!("only {} held-out captions", captions.len()));
    }
    if !original.entries.iter().any(|(n, _)| n.starts_with("align/")) {
        return Err("checkpoint holds no projection head".into());
    }

    let variants: [(&str, fn(&str, &mut Tensor<f32>, &mut ChaCha8Rng) -> bool); 3] = [
        ("original", |_, _, _| true),
        ("zeroed", |n, t, _| {
            if n.starts_with("align/") {
                t.data_mut().fill(0.0);
            }
            true
        }),
        ("perturbed", |n, t, r| {
            if n.starts_with("align/") {
                t.data_mut().iter_mut().for_each(|v| *v += r.random_range(-1.0f32..1.0));
            }
            true
        }),
    ];
    let mut tokens: Vec<Vec<Vec<u32>>> = Vec::new();
    for (i, (name, edit)) in variants.iter().enumerate() {
        let dir = tempfile::tempdir().map_err(e)?;
        let ws = p.scratch(dir.path()).map_err(e)?;
        let dst = ws.dir(Kind::Run, &keys.run);
        std::fs::create_dir_all(&dst).map_err(e)?;
        for f in std::fs::read_dir(&run).map_err(e)? {
            let f = f.map_err(e)?;
            std::fs::copy(f.path(), dst.join(f.file_name())).map_err(e)?;
        }
        let mut cont = original.clone();
        let mut r = rng(30 + i as u64);
        for (n, t) in cont.entries.iter_mut() {
            edit(n, t, &mut r);
        }
        cont.save(&dst.join(CHECKPOINT_FILE)).map_err(e)?;
        let out = dir.path().join("samples");
        let files = stages::sample(&ws, &c, &captions, &out, &p.o).map_err(|err| format!("{name}: {err}"))?;
        let toks = files
            .iter()
            .map(|f| {
                let rec: SampleRecord = serde_json::from_slice(&std::fs::read(f.with_extension("json")).map_err(e)?).map_err(e)?;
                Ok(rec.tokens)
            })
            .collect::<Result<Vec<_>, String>>()?;
        tokens.push(toks);
    }
    let same = tokens[1..].iter().all(|t| t == &tokens[0]);
    check(same, format!("50 prompts, zeroed and perturbed heads give identical tokens: {same}"))
}

fn c10_ablation(p: &Pipeline) -> Verdict {
    let start = Instant::now();
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/ablation.json");
    let grid = AblationGrid::load(&path).map_err(e)?;
    let expected = grid.size().map_err(e)?;
    let out = p.ws.root.join("acceptance-ablation");
    let outcome = ablate(&p.ws, &p.base, &grid, Some(&out), 1, &p.o).map_err(e)?;
    let metric_cols = [
        "fid",
        "clip_score",
        "ms_ssim",
        "object_recall",
        "position_accuracy",
        "color_accuracy",
        "exact_match",
    ];
    let mut rdr = csv::Reader::from_path(outcome.out_dir.join("ablation.csv")).map_err(e)?;
    let header = rdr.headers().map_err(e)?.clone();
    let idx: Vec<usize> = metric_cols
        .iter()
        .map(|c| header.iter().position(|h| h == *c).ok_or(format!("csv lacks column {c}")))
        .collect::<Result<_, _>>()?;
    let status = header.iter().position(|h| h == "status").ok_or("csv lacks status")?;
    let mut rows = 0;
    let mut incomplete = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(e)?;
        rows += 1;
        let filled = idx.iter().all(|&i| rec.get(i).and_then(|v| v.parse::<f64>().ok()).is_some_and(f64::is_finite));
        if &rec[status] != "ok" || !filled {
            incomplete += 1;
        }
    }
    let hours = start.elapsed().as_secs_f64() / 3600.0;
    check(
        rows == expected && incomplete == 0 && outcome.failed() == 0 && hours < 4.0,
        format!(
            "{rows}/{expected} rows, {} unique runs, {incomplete} incomplete, {:.1} min",
            outcome.unique_runs,
            hours * 60.0
        ),
    )
}

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("ARALIGN_ACCEPT_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |k: usize| only.as_ref().is_none_or(|v| v.contains(&k));
    let mut results: BTreeMap<usize, (&str, Verdict)> = BTreeMap::new();
    let mut run = |k: usize, name: &'static str, f: &dyn Fn() -> Verdict| {
        if !wanted(k) {
            return;
        }
        let t = Instant::now();
        let v = f();
        let tag = if v.is_ok() { "PASS" } else { "FAIL" };
        let detail = v.as_ref().unwrap_or_else(|d| d);
        println!("[{tag}] {k:>2} {name}: {detail} [{:.1}s]", t.elapsed().as_secs_f64());
        results.insert(k, (name, v));
    };

    run(1, "gradients", &c1_gradients);
    run(2, "nearest_code", &c2_quantizer);
    run(5, "alignment_positions", &c5_positions);
    run(6, "guidance_identities", &c6_guidance);
    run(7, "frechet_distance", &c7_frechet);
    run(8, "attribute_detector", &c8_detector);
    run(12, "causality", &c12_causality);

    if [3, 4, 9, 10, 11].iter().any(|&k| wanted(k)) {
        let p = Pipeline::new();
        println!("workspace {}", p.ws.root.display());
        // criterion 9 owns the upstream artifacts and the reference runs the others reuse
        let needs_runs = [3, 9].iter().any(|&k| wanted(k));
        if !needs_runs {
            for kind in stages::train_dependencies(&p.base) {
                if let Err(err) = stages::produce(&p.ws, &p.base, kind, &p.o) {
                    println!("upstream {}: {err}", kind.dir_name());
                }
            }
        }
        run(9, "reference_pipeline", &|| c9_pipeline(&p));
        if !wanted(9) && wanted(3) {
            for kind in stages::eval_dependencies(&p.base) {
                let _ = stages::produce(&p.ws, &p.base, kind, &p.o);
            }
        }
        run(4, "lambda_zero_equivalence", &|| c4_lambda_zero(&p));
        run(11, "determinism_and_resume", &|| c11_determinism(&p));
        run(3, "projection_head_unused", &|| c3_head_unused(&p));
        run(10, "ablation_grid", &|| c10_ablation(&p));
    }

    println!("\nsummary");
    let mut failed = 0;
    for (k, (name, v)) in &results {
        println!("  {k:>2} {name}: {}", if v.is_ok() { "PASS" } else { "FAIL" });
        failed += usize::from(v.is_err());
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
