//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Tolerances and time budgets are fixed here.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;
use vdn_core::askpolicy::{
    bce_loss_and_gradient, train_threshold, trigger_accuracy, trigger_probability, AskPolicy, ThresholdConfig,
};
use vdn_core::dialogue::decoder::{forward, loss, loss_and_grad, masked_cross_entropy};
use vdn_core::dialogue::{
    build_sequence, generate_qa, template_generate, train_dialogue_model, DecoderConfig, DecoderParams,
    DialogueContext, DialogueModel, Element, QaPair, TemplateBackend, TemplateSet, TrainOptions, Vocabulary,
};
use vdn_core::episodes::{
    augment_with_generated_dialogue, inter_turn_distances, mode, split_ndh, synthesize_dataset, EnvSet, Episode,
    EpisodeConfig, Supervision,
};
use vdn_core::harness::pipeline::train_threshold_stage;
use vdn_core::harness::{
    read_run_log, replay, run_episode, run_experiment, write_run_log, EpisodeSpec, Oracle, Resources, RunConfig,
};
use vdn_core::metrics::{bleu, cider, goal_progress, ndtw, rouge_l, spl, success, DistanceMode};
use vdn_core::navgraph::{generate_environment, EnvConfig, NavGraph, Node, NodeId, OBJECT_LABELS, ROOM_LABELS, SECTORS};
use vdn_core::navigator::{execute, train_teacher_forcing, Action, AgentState, NavigatorPolicy, TeacherForcingConfig};
use vdn_core::util::rng;

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: [(&str, u64, fn() -> Outcome); 9] = [
        ("shortest paths equal exhaustive enumeration", 10, c1_dijkstra),
        ("ask-trigger probability, gradient and threshold fit", 30, c2_trigger),
        ("dialogue sequence layout, masking and decoder gradients", 120, c3_layout),
        ("toy dialogue training", 300, c4_dialogue_training),
        ("navigation and text metrics", 60, c5_metrics),
        ("episode-loop protocol", 60, c6_episode_loop),
        ("end-to-end toy benchmark", 600, c7_benchmark),
        ("dataset operations", 60, c8_dataset),
        ("determinism and replay", 60, c9_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, budget, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|x| x == &n.to_string()) {
            continue;
        }
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = t0.elapsed();
        let result = match result {
            Ok(detail) if took > Duration::from_secs(*budget) => {
                Err(format!("{detail}; took {:.1}s, budget {budget}s", took.as_secs_f64()))
            }
            r => r,
        };
        match result {
            Ok(detail) => println!("criterion {n} PASS  {name}: {detail} [{:.1}s]", took.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("criterion {n} FAIL  {name}: {why} [{:.1}s]", took.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// 1

fn node(id: &str, position: [f64; 3]) -> Node {
    Node {
        id: NodeId::from(id),
        position,
        room: "kitchen".into(),
        objects: vec![],
        panorama: vec![vec![0.0f32; 2]; SECTORS],
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Cheapest simple path by depth-first enumeration, summing in walk order.
fn enumerate_min(adj: &[Vec<usize>], pos: &[[f64; 3]], s: usize, t: usize) -> f64 {
    fn go(adj: &[Vec<usize>], pos: &[[f64; 3]], cur: usize, t: usize, acc: f64, seen: &mut Vec<bool>, best: &mut f64) {
        if cur == t {
            *best = best.min(acc);
            return;
        }
        for &n in &adj[cur] {
            if !seen[n] {
                seen[n] = true;
                go(adj, pos, n, t, acc + dist(pos[cur], pos[n]), seen, best);
                seen[n] = false;
            }
        }
    }
    let mut seen = vec![false; adj.len()];
    seen[s] = true;
    let mut best = f64::INFINITY;
    go(adj, pos, s, t, 0.0, &mut seen, &mut best);
    best
}

fn c1_dijkstra() -> Outcome {
    let mut r = rng(2024);
    let mut pairs = 0;
    for g in 0..200 {
        let n = r.random_range(1..=8);
        let pos: Vec<[f64; 3]> = (0..n)
            .map(|_| [r.random_range(0.0..10.0), r.random_range(0.0..10.0), r.random_range(0.0..1.0)])
            .collect();
        let mut adj = vec![Vec::new(); n];
        let mut edges = Vec::new();
        // Random spanning tree, then extra edges.
        for i in 1..n {
            let j = r.random_range(0..i);
            adj[i].push(j);
            adj[j].push(i);
            edges.push((i, j));
        }
        for i in 0..n {
            for j in i + 1..n {
                if !adj[i].contains(&j) && r.random_bool(0.3) {
                    adj[i].push(j);
                    adj[j].push(i);
                    edges.push((i, j));
                }
            }
        }
        let ids: Vec<NodeId> = (0..n).map(|i| NodeId::from(format!("n{i}").as_str())).collect();
        let nodes = (0..n).map(|i| node(ids[i].as_str(), pos[i])).collect();
        let e: Vec<(NodeId, NodeId)> = edges.iter().map(|(a, b)| (ids[*a].clone(), ids[*b].clone())).collect();
        let graph = NavGraph::new(2, nodes, &e).map_err(|e| format!("graph {g}: {e}"))?;
        for s in 0..n {
            for t in 0..n {
                let want = enumerate_min(&adj, &pos, s, t);
                let path = graph.dijkstra(&ids[s], &ids[t]).unwrap();
                let got = graph.geodesic_distance(&ids[s], &ids[t]).unwrap();
                let walked: f64 = path
                    .nodes
                    .windows(2)
                    .map(|w| {
                        let (a, b) = (ids.iter().position(|x| *x == w[0]).unwrap(), ids.iter().position(|x| *x == w[1]).unwrap());
                        assert!(adj[a].contains(&b), "path uses a non-edge");
                        dist(pos[a], pos[b])
                    })
                    .fold(0.0, |acc, w| acc + w);
                check!(got == want, "graph {g} {s}->{t}: dijkstra {got} vs enumeration {want}");
                check!(path.length == want && walked == want, "graph {g} {s}->{t}: path length {} / walked {walked} vs {want}", path.length);
                check!(path.start() == &ids[s] && path.end() == &ids[t], "graph {g}: endpoints");
                pairs += 1;
            }
        }
    }
    Ok(format!("200 graphs, {pairs} ordered pairs exact"))
}

// ---------------------------------------------------------------------------
// 2

fn c2_trigger() -> Outcome {
    let mut r = rng(7);
    for _ in 0..100 {
        let a: f64 = r.random_range(-3.0..3.0);
        let q = trigger_probability(a, a);
        check!((q - 0.5).abs() <= 1e-12, "q at H = alpha_hat is {q}");
    }
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let a: f64 = r.random_range(-3.0..3.0);
        let h: f64 = r.random_range(0.0..3.0);
        let y = r.random_bool(0.5);
        let (_, g) = bce_loss_and_gradient(a, h, y);
        let q = 1.0 / (1.0 + (a - h).exp());
        let label = if y { 1.0 } else { 0.0 };
        check!((g - (label - q)).abs() <= 1e-12, "triple {i}: gradient {g} vs q_bar - q {}", label - q);
        let step = 1e-5;
        let l = |x: f64| bce_loss_and_gradient(x, h, y).0;
        let fd = (l(a + step) - l(a - step)) / (2.0 * step);
        let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8);
        worst = worst.max(rel);
        check!(rel <= 1e-6, "triple {i} (a {a}, h {h}, y {y}): analytic {g} vs numeric {fd}, rel {rel:e}");
    }
    // Separable logs: asked exactly when H lies above a gap, about a third
    // of the time.
    let sample = |r: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<(f64, bool)> {
        (0..n)
            .map(|_| {
                if r.random_bool(0.3) {
                    (r.random_range(1.3..2.0), true)
                } else {
                    (r.random_range(0.1..1.1), false)
                }
            })
            .collect()
    };
    let train = sample(&mut r, 400);
    let held_out = sample(&mut r, 400);
    let report = train_threshold(&train, &ThresholdConfig::default()).map_err(|e| e.to_string())?;
    let acc = trigger_accuracy(report.alpha_hat, &held_out);
    check!(acc >= 0.95, "held-out accuracy {acc} < 0.95 (alpha_hat {})", report.alpha_hat);
    Ok(format!(
        "1000 gradients, worst rel err {worst:.1e}; alpha_hat {:.3}, held-out accuracy {acc:.3}",
        report.alpha_hat
    ))
}

// ---------------------------------------------------------------------------
// 3, 4

fn env_small() -> NavGraph {
    generate_environment(7, &EnvConfig::new(3, 3)).unwrap()
}

fn vocab() -> Vocabulary {
    let words = TemplateSet::bundled().vocabulary_words(ROOM_LABELS.iter().chain(OBJECT_LABELS.iter()).copied());
    Vocabulary::from_tokens(words.iter().map(String::as_str))
}

fn contexts(graph: &NavGraph, count: usize, max_future: usize) -> Vec<DialogueContext> {
    let ids: Vec<NodeId> = graph.nodes().iter().map(|n| n.id.clone()).collect();
    let mut out = Vec::new();
    for (i, a) in ids.iter().enumerate() {
        for b in ids.iter().skip(i + 1) {
            if out.len() == count {
                return out;
            }
            let object = graph.node(b).unwrap().objects.first().cloned().unwrap_or_else(|| "lamp".into());
            out.push(DialogueContext::from_graph(graph, a, out.len() % 6, b, &object, max_future).unwrap());
        }
    }
    out
}

fn c3_layout() -> Outcome {
    let graph = env_small();
    let vocab = vocab();
    let mut checked = 0;
    for (i, ctx) in contexts(&graph, 30, 4).iter().enumerate() {
        let qa = template_generate(ctx, i as u64).unwrap();
        let seq = build_sequence(ctx, &vocab, &qa.question, &qa.answer, 512).unwrap();
        let (q, a, k) = (qa.question.len(), qa.answer.len(), ctx.future_obs.len() - 1);
        // BOS target EOS, v_t, BOS q EOS, v_t..v_{t+k}, BOS a EOS
        let expected = 3 + 1 + (q + 2) + (k + 1) + (a + 2);
        check!(seq.len() == expected, "context {i}: length {} vs {expected}", seq.len());
        check!(seq.mask_count() == q + a + 2, "context {i}: mask sum {} vs {}", seq.mask_count(), q + a + 2);
        let images = seq.elements.iter().filter(|e| matches!(e, Element::Image(_))).count();
        check!(images == k + 2, "context {i}: {images} images");
        checked += 1;
    }

    let ctx = &contexts(&graph, 1, 2)[0];
    let qa = template_generate(ctx, 0).unwrap();
    let config = DecoderConfig {
        layers: 2,
        d_model: 8,
        heads: 2,
        vocab_size: vocab.len(),
        max_len: 64,
        feature_dim: graph.feature_dim(),
    };
    let seq = build_sequence(ctx, &vocab, &qa.question[..3.min(qa.question.len())], &qa.answer[..3.min(qa.answer.len())], 64).unwrap();
    let mut r = rng(11);
    let mut params = DecoderParams::init(&config, 5);
    for x in params.data.iter_mut() {
        *x += 0.3 * r.sample::<f64, _>(StandardNormal);
    }

    let cache = forward(&config, &params, &seq).unwrap();
    let v = config.vocab_size;
    let (_, dl) = masked_cross_entropy(&cache.logits, v, &seq);
    for i in 0..seq.len() {
        let row = &dl[i * v..(i + 1) * v];
        if !seq.loss_mask[i] {
            check!(row.iter().all(|g| *g == 0.0), "masked position {i} has a non-zero logit gradient");
        }
    }

    // Changing element j leaves every earlier logit bit-identical.
    for j in [5, seq.len() / 2, seq.len() - 1] {
        let mut b = seq.clone();
        match &mut b.elements[j] {
            Element::Token(t) => *t = (*t + 1) % v,
            Element::Image(ix) => b.images[*ix].iter_mut().for_each(|x| *x += 1.0),
        }
        let lb = forward(&config, &params, &b).unwrap().logits;
        check!(cache.logits[..j * v] == lb[..j * v], "logits before position {j} changed");
        check!(cache.logits[j * v..(j + 1) * v] != lb[j * v..(j + 1) * v], "position {j} did not see its own input");
    }

    let (_, grad) = loss_and_grad(&config, &params, &seq).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..params.data.len() {
        let orig = params.data[i];
        params.data[i] = orig + h;
        let up = loss(&config, &params, &seq).unwrap();
        params.data[i] = orig - h;
        let down = loss(&config, &params, &seq).unwrap();
        params.data[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
        worst = worst.max(rel);
        check!(rel <= 1e-4, "parameter {i}: analytic {} vs numeric {fd}", grad[i]);
    }
    Ok(format!(
        "{checked} layouts; {} parameters, worst gradient rel err {worst:.1e}",
        params.data.len()
    ))
}

fn c4_dialogue_training() -> Outcome {
    let graph = generate_environment(7, &EnvConfig::new(3, 4)).unwrap();
    let vocab = vocab();
    let ctxs = contexts(&graph, 50, 4);
    check!(ctxs.len() == 50, "only {} contexts", ctxs.len());
    let pairs: Vec<QaPair> = ctxs.iter().enumerate().map(|(i, c)| template_generate(c, i as u64).unwrap()).collect();
    let config = DecoderConfig {
        max_len: 128,
        ..DecoderConfig::toy(vocab.len(), graph.feature_dim())
    };
    let corpus = DialogueModel::encode_corpus(&vocab, config.max_len, ctxs.iter().zip(&pairs)).unwrap();
    let opts = TrainOptions {
        epochs: 80,
        lr: 1e-3,
        batch_size: 10,
        ..TrainOptions::default()
    };
    let (params, report) = train_dialogue_model(&config, &corpus, &opts).unwrap();
    let (first, last) = (report.initial().unwrap(), report.last().unwrap());
    check!(last < 0.25 * first, "loss {first:.3} -> {last:.3} is not below a quarter");

    // Question generation cannot see future observations.
    let model = DialogueModel::new(config, params, vocab.clone()).unwrap();
    for ctx in &ctxs[..10] {
        let mut ablated = ctx.clone();
        for f in ablated.future_obs.iter_mut().skip(1) {
            f.iter_mut().for_each(|x| *x = 0.5 - *x);
        }
        ablated.future_obs.push(vec![1.0; ctx.current_obs.len()]);
        let a = generate_qa(&model, ctx).unwrap();
        let b = generate_qa(&model, &ablated).unwrap();
        check!(a.question == b.question, "question changed under future-image ablation");
    }

    let ctx = &ctxs[0];
    let qa = &pairs[0];
    let single = DecoderConfig {
        layers: 1,
        d_model: 32,
        heads: 2,
        vocab_size: vocab.len(),
        max_len: 96,
        feature_dim: graph.feature_dim(),
    };
    let seq = build_sequence(ctx, &vocab, &qa.question, &qa.answer, single.max_len).unwrap();
    let opts = TrainOptions {
        epochs: 150,
        lr: 3e-3,
        batch_size: 1,
        ..TrainOptions::default()
    };
    let (p1, _) = train_dialogue_model(&single, &[seq], &opts).unwrap();
    let out = generate_qa(&DialogueModel::new(single, p1, vocab).unwrap(), ctx).unwrap();
    check!(out.question == qa.question && out.answer == qa.answer, "overfit pair not reproduced: {:?}", out);
    Ok(format!("corpus loss {first:.3} -> {last:.3} ({:.1}%), single pair reproduced", 100.0 * last / first))
}

// ---------------------------------------------------------------------------
// 5

fn brute_dtw(r: &[[f64; 3]], q: &[[f64; 3]]) -> f64 {
    // Every monotone alignment from (0,0) to the far corner.
    fn go(r: &[[f64; 3]], q: &[[f64; 3]], i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = acc + dist(r[i], q[j]);
        if i + 1 == r.len() && j + 1 == q.len() {
            *best = best.min(acc);
            return;
        }
        if i + 1 < r.len() {
            go(r, q, i + 1, j, acc, best);
        }
        if j + 1 < q.len() {
            go(r, q, i, j + 1, acc, best);
        }
        if i + 1 < r.len() && j + 1 < q.len() {
            go(r, q, i + 1, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    go(r, q, 0, 0, 0.0, &mut best);
    best
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn c5_metrics() -> Outcome {
    let mut r = rng(5);
    let mut compared = 0;
    for n in 1..=5 {
        for m in 1..=5 {
            for _ in 0..40 {
                let pts = |k: usize, r: &mut rand_chacha::ChaCha8Rng| -> Vec<[f64; 3]> {
                    (0..k).map(|_| [r.random_range(-6.0..6.0), r.random_range(-6.0..6.0), 0.0]).collect()
                };
                let (a, b) = (pts(n, &mut r), pts(m, &mut r));
                let want = (-brute_dtw(&a, &b) / (n as f64 * 3.0)).exp();
                let got = ndtw(&a, &b, 3.0).unwrap();
                check!((got - want).abs() <= 1e-12, "nDTW {got} vs brute force {want} ({n}x{m})");
                compared += 1;
            }
        }
    }
    let worked = ndtw(&[[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]], &[[0.0, 0.0, 0.0], [0.0, 3.0, 0.0]], 3.0).unwrap();
    check!((worked - 0.4931).abs() <= 1e-3, "worked nDTW {worked}");

    check!(spl(true, 5.0, 5.0).unwrap() == 1.0, "SPL on the shortest path");
    check!(spl(true, 4.0, 8.0).unwrap() == 0.5, "SPL at twice the length");
    check!(spl(false, 4.0, 4.0).unwrap() == 0.0, "SPL on failure");
    let g = generate_environment(3, &EnvConfig::new(3, 3)).unwrap();
    let ids: Vec<NodeId> = g.nodes().iter().map(|n| n.id.clone()).collect();
    let (s, t) = (&ids[0], &ids[ids.len() - 1]);
    let straight = dist(g.node(s).unwrap().position, g.node(t).unwrap().position);
    check!(goal_progress(&g, s, t, t, DistanceMode::Euclidean).unwrap() == straight, "GP at the target");
    check!(goal_progress(&g, s, s, t, DistanceMode::Euclidean).unwrap() == 0.0, "GP without moving");
    check!(
        goal_progress(&g, s, t, t, DistanceMode::Geodesic).unwrap() == g.geodesic_distance(s, t).unwrap(),
        "geodesic GP at the target"
    );
    check!(success(&g, t, t).unwrap(), "SR at the target");
    let far = ids.iter().find(|n| dist(g.node(n).unwrap().position, g.node(t).unwrap().position) > 3.0).unwrap();
    check!(!success(&g, far, t).unwrap(), "SR beyond 3 m");

    // BLEU-1 "go left now" vs "go right now": 2 of 3 unigrams match, no brevity penalty.
    let b1 = bleu(&toks("go left now"), &toks("go right now"), 1).unwrap();
    check!((b1 - 2.0 / 3.0).abs() <= 1e-6, "BLEU-1 {b1}");
    // BLEU-2 "the cat sat" vs "the cat sat down": p1 = 1, p2 = 1, BP = exp(1 - 4/3).
    let b2 = bleu(&toks("the cat sat"), &toks("the cat sat down"), 2).unwrap();
    check!((b2 - (1.0f64 - 4.0 / 3.0).exp()).abs() <= 1e-6, "BLEU-2 {b2}");
    // ROUGE-L "a b c d" vs "a c d": LCS 3, P = 3/4, R = 1, beta = 1.2.
    let rl = rouge_l(&toks("a b c d"), &toks("a c d"));
    let expect = (1.0 + 1.44) * 0.75 * 1.0 / (1.0 + 1.44 * 0.75);
    check!((rl - expect).abs() <= 1e-6, "ROUGE-L {rl} vs {expect}");
    // CIDEr over references {"go left", "stop here"}: the candidate equal to
    // its reference scores 10 on 1- and 2-grams and 0 on 3-, 4-grams.
    let scores = cider(&[toks("go left"), toks("turn around")], &[toks("go left"), toks("stop here")]).unwrap();
    check!((scores[0] - 5.0).abs() <= 1e-6 && scores[1].abs() <= 1e-6, "CIDEr {scores:?}");
    Ok(format!("{compared} nDTW pairs exact, worked example {worked:.4}, hand cases match"))
}

// ---------------------------------------------------------------------------
// 6, 8, 9

fn small_envs(base: u64, n: u64) -> EnvSet {
    (0..n)
        .map(|i| (format!("env{i}"), generate_environment(base + i, &EnvConfig::new(4, 3)).unwrap()))
        .collect()
}

fn template() -> Oracle {
    Oracle::Backend(Arc::new(TemplateBackend))
}

fn specs(eps: &[Episode]) -> Vec<EpisodeSpec> {
    eps.iter().map(EpisodeSpec::from).collect()
}

fn c6_episode_loop() -> Outcome {
    let envs = small_envs(40, 3);
    let eps = synthesize_dataset(&envs, 6, 9, &EpisodeConfig::default()).unwrap();
    let graph = |s: &EpisodeSpec| Arc::new(envs[&s.env].clone());

    let periodic = RunConfig {
        ask: AskPolicy::Periodic { k: 5 },
        max_actions: 12,
        ..RunConfig::default()
    };
    for s in specs(&eps) {
        let log = run_episode(&periodic, &s, graph(&s), Arc::new(NavigatorPolicy::linear(1.0)), template()).unwrap();
        check!(log.steps.len() == 12, "{}: {} steps", s.id, log.steps.len());
        check!(log.questions() == 2, "{}: {} exchanges in 12 steps", s.id, log.questions());
    }

    let mut triggers = 0;
    for rounds in 1..=3 {
        for ask in [AskPolicy::Fixed { alpha: 0.5 }, AskPolicy::Periodic { k: 2 }] {
            let config = RunConfig {
                ask,
                max_rounds: rounds,
                ..RunConfig::default()
            };
            for s in specs(&eps) {
                let log = run_episode(&config, &s, graph(&s), Arc::new(NavigatorPolicy::keyword_match()), template()).unwrap();
                for st in &log.steps {
                    check!(st.exchanges.len() <= rounds, "{}: {} rounds", s.id, st.exchanges.len());
                    check!(st.triggered == st.entropy_post.is_some(), "{} t={}: post entropy", s.id, st.t);
                    let mut len = st.instruction_len;
                    for x in &st.exchanges {
                        check!(x.instruction_len > len, "{} t={}: instruction did not grow", s.id, st.t);
                        len = x.instruction_len;
                        triggers += 1;
                    }
                }
            }
        }
    }

    let mut backtracks = 0;
    for ep in &eps {
        let g = &envs[&ep.env];
        let mut state = AgentState::new(g, &ep.start, ep.heading).unwrap();
        for next in &ep.player_path.nodes[1..] {
            state = execute(&state, g, &Action::Node(next.clone()))
                .map_err(|e| format!("{}: {e}", ep.id))?
                .state;
        }
        check!(state.visited == ep.player_path.nodes, "{}: replayed walk differs", ep.id);
        if ep.player_path.nodes.len() > ep.planner_path.nodes.len() {
            backtracks += 1;
        }
    }
    check!(backtracks > 0, "no episode with a backtracking player path");
    Ok(format!("{triggers} exchanges checked, {backtracks} backtracking player paths replayed"))
}

fn c8_dataset() -> Outcome {
    let envs: EnvSet = (0..8)
        .map(|i| (format!("env{i:02}"), generate_environment(i, &EnvConfig::default()).unwrap()))
        .collect();
    let eps = synthesize_dataset(&envs, 25, 7, &EpisodeConfig::default()).unwrap();
    let turns: usize = eps.iter().map(|e| e.dialogue.len()).sum();
    let ndh = split_ndh(&eps, &envs, Supervision::Planner).unwrap();
    check!(ndh.len() == turns, "{} instances for {turns} turns", ndh.len());
    let aug = augment_with_generated_dialogue(&ndh, &envs, &TemplateBackend, 1).unwrap();
    check!(aug.len() == 2 * ndh.len(), "augmented {} from {}", aug.len(), ndh.len());
    let gaps = inter_turn_distances(&eps);
    let m = mode(&gaps).ok_or("no gaps")?;
    check!((5..=6).contains(&m), "gap mode {m}");
    let mut hist = BTreeMap::new();
    for g in &gaps {
        *hist.entry(*g).or_insert(0) += 1;
    }
    Ok(format!("{} episodes, {turns} turns, {} augmented, gap mode {m} {hist:?}", eps.len(), aug.len()))
}

fn c9_determinism() -> Outcome {
    let envs = small_envs(60, 3);
    let eps = specs(&synthesize_dataset(&envs, 8, 4, &EpisodeConfig::default()).unwrap());
    let res = Resources::new(envs.clone(), NavigatorPolicy::keyword_match(), template()).unwrap();
    let config = RunConfig {
        ask: AskPolicy::Learnable {
            alpha_hat: 0.9,
            stochastic: true,
        },
        seed: 17,
        ..RunConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for name in ["a.jsonl", "b.jsonl"] {
        let out = run_experiment(&config, &res, &eps).unwrap();
        let path = dir.path().join(name);
        write_run_log(&path, &out.logs).unwrap();
        bytes.push(std::fs::read(&path).unwrap());
    }
    check!(bytes[0] == bytes[1], "run logs differ between identical runs");
    let logs = read_run_log(dir.path().join("a.jsonl")).unwrap();
    for log in &logs {
        let m = replay(log, &envs[&log.episode.env]).map_err(|e| e.to_string())?;
        check!(m == log.metrics, "{}: replayed metrics differ", log.episode.id);
        for (a, b) in [
            (m.goal_progress, log.metrics.goal_progress),
            (m.spl, log.metrics.spl),
            (m.ndtw, log.metrics.ndtw),
            (m.path_length, log.metrics.path_length),
        ] {
            check!(a.to_bits() == b.to_bits(), "{}: metric bits differ", log.episode.id);
        }
    }
    Ok(format!("{} bytes identical, {} logs replayed bit-for-bit", bytes[0].len(), logs.len()))
}

// ---------------------------------------------------------------------------
// 7

fn default_envs(base: u64, n: u64) -> EnvSet {
    (0..n)
        .map(|i| (format!("env{:02}", base + i), generate_environment(base + i, &EnvConfig::default()).unwrap()))
        .collect()
}

/// Frozen after the first calibration run.
const MIN_GP_GAIN: f64 = 0.5;

fn c7_benchmark() -> Outcome {
    let eval_envs = default_envs(0, 8);
    let eval = synthesize_dataset(&eval_envs, 25, 7, &EpisodeConfig::default()).unwrap();
    check!(eval.len() == 200, "{} evaluation episodes", eval.len());
    let short: Vec<EpisodeSpec> = eval.iter().filter(|e| e.planner_path.hops() <= 15).map(EpisodeSpec::from).collect();
    let all = specs(&eval);

    let greedy = Resources::new(eval_envs.clone(), NavigatorPolicy::greedy_geodesic(), template()).unwrap();
    let g = run_experiment(&RunConfig::default(), &greedy, &short).unwrap().report.metrics;
    check!(g.sr == 1.0, "greedy-geodesic SR {} on {} episodes", g.sr, short.len());

    // Training uses separate environments.
    let train_envs = default_envs(100, 8);
    let train = synthesize_dataset(&train_envs, 25, 11, &EpisodeConfig::default()).unwrap();
    let ndh = split_ndh(&train, &train_envs, Supervision::Player).unwrap();
    let ndh = augment_with_generated_dialogue(&ndh, &train_envs, &TemplateBackend, 3).unwrap();
    let (policy, report) =
        train_teacher_forcing(&NavigatorPolicy::linear(1.0), &ndh, &train_envs, &TeacherForcingConfig::default()).unwrap();
    let (ask, _) = train_threshold_stage(&report.entropy_log, &ThresholdConfig::default()).unwrap();

    let res = Resources::new(eval_envs, policy, template()).unwrap();
    let run = |ask: AskPolicy| {
        let config = RunConfig {
            ask,
            ..RunConfig::default()
        };
        run_experiment(&config, &res, &all).unwrap().report.metrics
    };
    let never = run(AskPolicy::Never);
    let learned = run(ask.clone());
    let gain = learned.gp - never.gp;
    let detail = format!(
        "greedy SR {} on {}; {}: GP {:.3} SR {:.3} q/ep {:.2}; never: GP {:.3} SR {:.3}; gain {gain:.3} m",
        g.sr,
        short.len(),
        ask.label(),
        learned.gp,
        learned.sr,
        learned.mean_questions,
        never.gp,
        never.sr
    );
    check!(gain >= MIN_GP_GAIN, "{detail} < {MIN_GP_GAIN}");
    Ok(detail)
}
