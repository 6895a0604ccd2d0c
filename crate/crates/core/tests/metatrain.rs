use smp_core::data::*;
use smp_core::encoder::*;
use smp_core::metatrain::*;
use smp_core::objective::smp_loss;
use smp_core::pruner::*;
use smp_numerics::{sigmoid, RngStream, Tensor};

struct Fixture {
    encoder: EncoderWeights<f64>,
    scorer: ScorerWeights<f64>,
    tasks: Vec<TaskDataset>,
    vocab: Vocab,
}

fn fixture() -> Fixture {
    let mut spec = SyntheticSpec { corpus_lines: 300, ..Default::default() };
    for t in &mut spec.tasks {
        t.size = 60;
        t.test_size = 20;
    }
    let corpus = generate_corpus(&spec, 4).unwrap();
    let vocab = Vocab::build(&corpus, 4096).unwrap();
    let tasks = generate_synthetic_tasks(&spec, 4).unwrap();
    let config = EncoderConfig {
        layers: 2,
        heads: 4,
        d_model: 16,
        d_ff: 24,
        max_len: 32,
        vocab_size: vocab.len(),
        ..Default::default()
    };
    Fixture {
        encoder: EncoderWeights::init(&config, 5).unwrap(),
        scorer: ScorerWeights::init(&ScorerConfig::default(), 6).unwrap(),
        tasks,
        vocab,
    }
}

fn episode(f: &Fixture, k: usize, seed: u64) -> EncodedEpisode {
    let s = sample_episode(&f.tasks, Split::Train, k, &mut RngStream::new(seed)).unwrap();
    EncodedEpisode::new(s.kind, &s.instances, &f.vocab, 32)
}

fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = RngStream::new(seed);
    (0..n).map(|_| logistic_noise(rng.uniform_open())).collect()
}

fn config(episodes: usize) -> EpisodeConfig {
    EpisodeConfig { k: 6, episodes, valid_interval: 4, valid_batches: 2, ..Default::default() }
}

#[test]
fn gate_mean_matches_quadrature_at_unit_temperature() {
    let score: f64 = 0.7;
    let logit = (score / (1.0 - score)).ln();
    // E[σ(ℓ + g)] = ∫₀¹ σ(ℓ + ln(u/(1−u))) du by the midpoint rule.
    let m = 1_000_000;
    let exact: f64 = (0..m)
        .map(|i| {
            let u = (i as f64 + 0.5) / m as f64;
            sigmoid(logit + (u / (1.0 - u)).ln())
        })
        .sum::<f64>()
        / m as f64;
    let n = 100_000;
    let mut rng = RngStream::new(17);
    let draws: Vec<f64> = (0..n).map(|_| gumbel_binary_gate(score, 1.0, &mut rng)).collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!((mean - exact).abs() < 3.0 * se, "mean {mean} vs {exact} (se {se})");
    assert!(draws.iter().all(|&g| g > 0.0 && g < 1.0));
}

/// `P(g ∉ (a, 1−a))` for a gate at logit `ℓ`: the gate is inside exactly
/// when `|ℓ + noise| < τ·ln((1−a)/a)`.
fn outside_probability(score: f64, tau: f64, a: f64) -> f64 {
    let logit = (score / (1.0 - score)).ln();
    let w = tau * ((1.0 - a) / a).ln();
    1.0 - (sigmoid(w - logit) - sigmoid(-w - logit))
}

#[test]
fn low_temperature_gates_follow_the_analytic_tail() {
    let mut rng = RngStream::new(3);
    let n = 100_000;
    for score in [0.1, 0.3, 0.5, 0.7, 0.95] {
        for tau in [1.0, 0.2, 0.05] {
            let outside = (0..n)
                .map(|_| gumbel_binary_gate(score, tau, &mut rng))
                .filter(|g| !(0.05..=0.95).contains(g))
                .count() as f64
                / n as f64;
            let p = outside_probability(score, tau, 0.05);
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((outside - p).abs() < 4.0 * se, "score {score} tau {tau}: {outside} vs {p}");
        }
    }
    // Lower temperatures push mass to the ends.
    assert!(outside_probability(0.7, 0.05, 0.05) > outside_probability(0.7, 0.2, 0.05));
    assert!(outside_probability(0.7, 0.01, 0.05) > 0.98);
}

/// Manual composition of the episode pipeline in scalar code.
fn composed_loss(f: &Fixture, ep: &EncodedEpisode, relax: &GateRelax, noise: &[f64]) -> f64 {
    let c = &f.encoder.config;
    let pooling = c.pooling(ep.kind);
    let (full, att) = represent(&f.encoder, &ep.seqs, Gates::None, pooling, true).unwrap();
    let table = aggregate_head_scores(&f.scorer, &att.unwrap()).unwrap();
    let scores = table.for_kind(ep.kind);
    let mut values = Vec::new();
    for (l, row) in scores.iter().enumerate() {
        let mut logits: Vec<f64> = row.iter().map(|s| (s / (1.0 - s)).ln()).collect();
        if relax.mode == Relaxation::LayerStandardized {
            let mean = logits.iter().sum::<f64>() / logits.len() as f64;
            let var = logits.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / logits.len() as f64;
            let sd = (var + STD_EPS).sqrt();
            let shift = ((1.0 - relax.ratio) / relax.ratio).ln();
            logits = logits.iter().map(|z| (z - mean) / sd + shift).collect();
        }
        values.push(
            logits.iter().enumerate().map(|(h, z)| sigmoid((z + noise[l * c.heads + h]) / relax.tau)).collect(),
        );
    }
    let gates = GateAssignment::new(values).unwrap();
    let (pruned, _) = represent(&f.encoder, &ep.seqs, Gates::Values(&gates), pooling, false).unwrap();
    smp_loss(&full, &pruned).unwrap()
}

#[test]
fn episode_loss_matches_manual_composition() {
    let f = fixture();
    for seed in 0..6 {
        let ep = episode(&f, 8, seed);
        let z = noise(8, 100 + seed);
        for relax in [
            GateRelax::independent(1.0),
            GateRelax::independent(0.5),
            GateRelax { tau: 1.0, mode: Relaxation::LayerStandardized, ratio: 0.5 },
            GateRelax { tau: 0.7, mode: Relaxation::LayerStandardized, ratio: 0.25 },
        ] {
            let out = episode_with_noise(&f.encoder, &f.scorer, &ep, &relax, &z, true).unwrap();
            let want = composed_loss(&f, &ep, &relax, &z);
            assert!((out.loss - want).abs() <= 1e-10 * want.abs().max(1.0), "{} vs {want}", out.loss);
        }
    }
}

/// Zero biases on zero-padded canvases put pre-activations exactly on the
/// ReLU kink, where central differences are one-sided.
fn jitter_biases(scorer: &mut ScorerWeights<f64>, seed: u64) {
    let mut rng = RngStream::new(seed);
    for (_, b) in &mut scorer.convs {
        b.data_mut().iter_mut().for_each(|v| *v = 0.1 * rng.normal());
    }
}

#[test]
fn scorer_gradient_matches_finite_differences() {
    let mut f = fixture();
    jitter_biases(&mut f.scorer, 8);
    let standardized = GateRelax { tau: 1.0, mode: Relaxation::LayerStandardized, ratio: 0.5 };
    let mut wide = f.scorer.clone();
    // A wider output layer lifts the unconstrained gradients above the
    // differencing noise floor.
    wide.fc_w.data_mut().iter_mut().for_each(|v| *v *= 50.0);
    for seed in 0..4 {
        let ep = episode(&f, 6, 20 + seed);
        let z = noise(8, 200 + seed);
        for (scorer, relax) in [(&wide, GateRelax::independent(1.0)), (&f.scorer, standardized)] {
            let err = scorer_gradient_check(&f.encoder, scorer, &ep, &relax, &z, 12, 1e-5, seed).unwrap();
            assert!(err < 1e-3, "{relax:?}: {err}");
        }
    }
}

#[test]
fn open_gates_give_zero_loss_and_zero_gradient() {
    let mut f = fixture();
    let n = f.scorer.fc_b.len();
    f.scorer.fc_b = Tensor::new(vec![n], vec![30.0; n]).unwrap();
    let ep = episode(&f, 6, 1);
    let out = episode_with_noise(&f.encoder, &f.scorer, &ep, &GateRelax::independent(1.0), &[20.0; 8], true).unwrap();
    assert!(out.gates.iter().all(|&g| g > 1.0 - 1e-12));
    assert!(out.loss.abs() < 1e-10, "{}", out.loss);
    let norm: f64 = out.grads.iter().flatten().flat_map(|g| g.data().iter().map(|v| v * v)).sum::<f64>().sqrt();
    assert!(norm < 1e-9, "{norm}");
}

#[test]
fn encoder_receives_no_gradient_and_is_untouched() {
    let f = fixture();
    let before = f.encoder.clone();
    let ep = episode(&f, 6, 2);
    let out =
        run_episode(&f.encoder, &f.scorer, &ep, &EpisodeConfig::default().gate_relax(), &mut RngStream::new(1)).unwrap();
    assert_eq!(out.grads.len(), f.scorer.named().len());
    assert!(out.grads.iter().any(|g| g.is_some()));
    let r = train_meta(&f.encoder, &f.tasks, &f.vocab, &config(4), &f.scorer, 3).unwrap();
    assert!(r.diverged_at.is_none());
    assert_eq!(f.encoder, before);
}

#[test]
fn zero_episodes_return_the_initial_scorer() {
    let f = fixture();
    let r = train_meta(&f.encoder, &f.tasks, &f.vocab, &config(0), &f.scorer, 1).unwrap();
    assert_eq!(r.best, f.scorer);
    assert_eq!(r.last, f.scorer);
    assert_eq!(r.best_episode, 0);
    assert_eq!(r.best_valid, r.initial_valid);
    assert!(r.log.is_empty());
}

#[test]
fn one_update_applies_the_sum_of_episode_gradients() {
    let f = fixture();
    let cfg = EpisodeConfig { episodes: 8, update_every: 8, valid_interval: 100, ..config(8) };
    let seed = 9;
    let r = train_meta(&f.encoder, &f.tasks, &f.vocab, &cfg, &f.scorer, seed).unwrap();

    // Replays the loop's random stream and sums gradients by hand.
    let mut rng = RngStream::new(seed).fork(0xe9);
    let mut sum: Vec<Vec<f64>> = f.scorer.named().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    for _ in 0..8 {
        let s = sample_episode(&f.tasks, Split::Train, cfg.k, &mut rng).unwrap();
        let ep = EncodedEpisode::new(s.kind, &s.instances, &f.vocab, 32);
        let out = run_episode(&f.encoder, &f.scorer, &ep, &cfg.gate_relax(), &mut rng).unwrap();
        for (acc, g) in sum.iter_mut().zip(&out.grads) {
            if let Some(g) = g {
                acc.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
        }
    }
    for (((_, w0), (_, w1)), g) in f.scorer.named().iter().zip(r.last.named()).zip(&sum) {
        for ((a, b), d) in w0.data().iter().zip(w1.data()).zip(g) {
            let want = a - cfg.lr * d;
            assert!((b - want).abs() <= 1e-12 * want.abs().max(1.0), "{b} vs {want}");
        }
    }
}

#[test]
fn validation_is_deterministic_and_uses_hard_gates() {
    let f = fixture();
    let valid = validation_episodes(&f.tasks, &f.vocab, 32, 6, 3, 1).unwrap();
    let a = validation_loss(&f.encoder, &f.scorer, &valid, 0.5).unwrap();
    let b = validation_loss(&f.encoder, &f.scorer, &valid, 0.5).unwrap();
    assert_eq!(a, b);
    let mut manual = 0.0;
    for ep in &valid {
        let (_, att) = represent(&f.encoder, &ep.seqs, Gates::None, f.encoder.config.pooling(ep.kind), true).unwrap();
        let table = aggregate_head_scores(&f.scorer, &att.unwrap()).unwrap();
        let gates = select_prune_set(&table.for_kind(ep.kind), 0.5).unwrap();
        assert!(gates.is_discrete());
        manual += gates_loss(&f.encoder, ep, &gates, None).unwrap();
    }
    assert!((a - manual / 3.0).abs() < 1e-12);
}

#[test]
fn same_seed_gives_the_same_checkpoint() {
    let f = fixture();
    let a = train_meta(&f.encoder, &f.tasks, &f.vocab, &config(8), &f.scorer, 11).unwrap();
    let b = train_meta(&f.encoder, &f.tasks, &f.vocab, &config(8), &f.scorer, 11).unwrap();
    assert_eq!(a.best, b.best);
    assert_eq!(a.last, b.last);
    assert_eq!(a.log, b.log);
    let c = train_meta(&f.encoder, &f.tasks, &f.vocab, &config(8), &f.scorer, 12).unwrap();
    assert_ne!(a.last, c.last);
}

#[test]
fn learning_rate_grid_keeps_the_best_run() {
    let f = fixture();
    let grid = EpisodeConfig { lr_grid: vec![0.01, 0.05], ..config(8) };
    let r = train_meta(&f.encoder, &f.tasks, &f.vocab, &grid, &f.scorer, 2).unwrap();
    let runs: Vec<f64> = [0.01, 0.05]
        .iter()
        .map(|&lr| train_meta(&f.encoder, &f.tasks, &f.vocab, &EpisodeConfig { lr, ..config(8) }, &f.scorer, 2).unwrap().best_valid)
        .collect();
    assert_eq!(r.best_valid, runs[0].min(runs[1]));
}

#[test]
fn log_is_written_as_csv() {
    let f = fixture();
    let r = train_meta(&f.encoder, &f.tasks, &f.vocab, &config(8), &f.scorer, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    write_log(&path, &r.log).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "episode,train_loss,valid_loss,lr,tau");
    assert_eq!(lines.len(), 9);
    assert!(lines[4].split(',').nth(2).unwrap().parse::<f64>().is_ok());
    assert_eq!(lines[1].split(',').nth(2).unwrap(), "");
}

#[test]
fn config_rejects_bad_values() {
    assert!(EpisodeConfig { tau: -1.0, ..Default::default() }.validate().is_err());
    assert!(EpisodeConfig { update_every: 0, ..Default::default() }.validate().is_err());
    assert!(EpisodeConfig { ratio: 1.0, ..Default::default() }.validate().is_err());
    assert!(EpisodeConfig { ratio: 0.0, ..Default::default() }.validate().is_err());
    assert!(EpisodeConfig { ratio: 0.0, relaxation: Relaxation::Independent, ..Default::default() }.validate().is_ok());
    assert!(EpisodeConfig { clip_norm: Some(0.0), ..Default::default() }.validate().is_err());
    let full = EpisodeConfig::full_scale();
    assert_eq!((full.k, full.update_every, full.episodes), (60, 8, 48_000));
}
