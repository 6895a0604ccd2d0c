use smp_core::data::InstanceKind;
use smp_core::encoder::*;
use smp_core::pruner::*;
use smp_numerics::RngStream;

fn rank_oracle(row: &[f64], keep: usize) -> Vec<f64> {
    (0..row.len())
        .map(|h| {
            let ahead = (0..row.len()).filter(|&j| row[j] > row[h] || (row[j] == row[h] && j < h)).count();
            if ahead < keep {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

#[test]
fn keep_counts_follow_the_ceiling_rule() {
    for heads in 1..=16 {
        for ratio in [0.0, 0.25, 0.5, 0.75] {
            let expect = ((1.0 - ratio) * heads as f64 - 1e-9).ceil() as usize;
            let mut rng = RngStream::new(heads as u64);
            let scores: Vec<Vec<f64>> = (0..3).map(|_| (0..heads).map(|_| rng.uniform()).collect()).collect();
            let g = select_prune_set(&scores, ratio).unwrap();
            assert!(g.kept_per_layer().iter().all(|&k| k == expect));
        }
    }
    assert_eq!(keep_count(12, 0.5), 6);
    assert_eq!(select_prune_set(&[vec![0.3; 5]], 0.0).unwrap(), GateAssignment::ones(1, 5));
}

#[test]
fn selection_is_invariant_under_monotone_transforms() {
    let mut rng = RngStream::new(99);
    let transforms: [fn(f64) -> f64; 3] = [|x| x.exp(), |x| x * x * x + x, |x| 2.0 * x + 5.0];
    for _ in 0..200 {
        let heads = 1 + rng.below(12);
        let scores: Vec<Vec<f64>> = (0..4).map(|_| (0..heads).map(|_| rng.normal()).collect()).collect();
        for ratio in [0.0, 0.25, 0.5, 0.75] {
            let base = select_prune_set(&scores, ratio).unwrap();
            for f in transforms {
                let t: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|&x| f(x)).collect()).collect();
                assert_eq!(select_prune_set(&t, ratio).unwrap(), base);
            }
        }
    }
}

#[test]
fn tie_rule_exhaustive_up_to_six_heads() {
    for heads in 1..=6usize {
        for code in 0..3usize.pow(heads as u32) {
            let row: Vec<f64> = (0..heads).map(|h| ((code / 3usize.pow(h as u32)) % 3) as f64).collect();
            for ratio in [0.0, 0.25, 0.5, 0.75] {
                let g = select_prune_set(std::slice::from_ref(&row), ratio).unwrap();
                assert_eq!(g.values[0], rank_oracle(&row, keep_count(heads, ratio)), "{row:?} @ {ratio}");
            }
        }
    }
    let g = select_prune_set(&[vec![0.9, 0.1, 0.5, 0.5]], 0.5).unwrap();
    assert_eq!(g.kept_heads(0), vec![0, 2]);
}

#[test]
fn pad_oracle_for_short_matrices() {
    let mut rng = RngStream::new(5);
    let n = 3;
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let z: f64 = row.iter().sum();
        for j in 0..n {
            m[i * n + j] = row[j] / z;
        }
    }
    let canvas = normalize_matrix(&m, None, 32).unwrap();
    for i in 0..32 {
        for j in 0..32 {
            let want = if i < n && j < n { m[i * n + j] } else { 0.0 };
            assert_eq!(canvas[i * 32 + j], want);
        }
    }
}

#[test]
fn uniform_long_matrix_pools_to_constant() {
    let n = 64;
    let m = vec![1.0 / n as f64; n * n];
    let canvas = normalize_matrix(&m, None, 32).unwrap();
    assert!(canvas.iter().all(|&v| (v - 1.0 / 64.0).abs() < 1e-15));
}

fn setup() -> (EncoderWeights<f64>, ScorerWeights<f64>, Vec<Vec<usize>>) {
    let config = EncoderConfig { layers: 2, heads: 4, d_model: 16, d_ff: 16, max_len: 40, vocab_size: 40, ..Default::default() };
    let encoder = EncoderWeights::<f64>::init(&config, 1).unwrap();
    let scorer = ScorerWeights::<f64>::init(&ScorerConfig::default(), 2).unwrap();
    let mut rng = RngStream::new(3);
    let seqs = (0..16).map(|_| (0..2 + rng.below(38)).map(|_| 1 + rng.below(39)).collect()).collect();
    (encoder, scorer, seqs)
}

#[test]
fn scores_lie_strictly_inside_the_unit_interval() {
    let (_, scorer, _) = setup();
    let mut rng = RngStream::new(10);
    for _ in 0..20 {
        let canvas: Vec<f64> = (0..32 * 32).map(|_| rng.uniform()).collect();
        let (a, b) = score_matrix(&scorer, &canvas).unwrap();
        assert!(a > 0.0 && a < 1.0 && b > 0.0 && b < 1.0);
    }
}

#[test]
fn aggregation_matches_loop_and_average() {
    let (encoder, scorer, seqs) = setup();
    let (_, att) = represent(&encoder, &seqs, Gates::None, Pooling::Mean, true).unwrap();
    let att = att.unwrap();
    let table = aggregate_head_scores(&scorer, &att).unwrap();
    assert_eq!(table.instances, 16);
    for l in 0..2 {
        for h in 0..4 {
            let mut sum = [0.0, 0.0];
            for b in 0..16 {
                let c = normalize_matrix(att.matrix(l, h, b), None, 32).unwrap();
                let (s0, s1) = score_matrix(&scorer, &c).unwrap();
                sum[0] += s0;
                sum[1] += s1;
            }
            let got = table.scores[l * 4 + h];
            assert!((got[0] - sum[0] / 16.0).abs() < 1e-7 && (got[1] - sum[1] / 16.0).abs() < 1e-7);
        }
    }

    let single = aggregate_head_scores(&scorer, &represent(&encoder, &seqs[..1], Gates::None, Pooling::Mean, true).unwrap().1.unwrap())
        .unwrap();
    let c = normalize_matrix(att.matrix(1, 2, 0), None, 32).unwrap();
    let (s0, _) = score_matrix(&scorer, &c).unwrap();
    assert!((single.scores[6][0] - s0).abs() < 1e-12);
}

#[test]
fn smp_prune_is_the_composition_of_its_parts() {
    let (encoder, scorer, seqs) = setup();
    for kind in [InstanceKind::Single, InstanceKind::Pair] {
        let (gates, table) = smp_prune(&encoder, &scorer, &seqs, kind, 0.5).unwrap();
        let (_, att) = represent(&encoder, &seqs, Gates::None, encoder.config.pooling(kind), true).unwrap();
        let manual = aggregate_head_scores(&scorer, &att.unwrap()).unwrap();
        assert_eq!(table, manual);
        assert_eq!(gates, select_prune_set(&manual.for_kind(kind), 0.5).unwrap());
        assert_eq!(gates.kept_per_layer(), vec![2, 2]);
        let again = smp_prune(&encoder, &scorer, &seqs, kind, 0.5).unwrap();
        assert_eq!(again.0, gates);
    }
    let (ones, _) = smp_prune(&encoder, &scorer, &seqs, InstanceKind::Single, 0.0).unwrap();
    let (a, _) = represent(&encoder, &seqs, Gates::Values(&ones), Pooling::Mean, false).unwrap();
    let (b, _) = represent(&encoder, &seqs, Gates::None, Pooling::Mean, false).unwrap();
    assert_eq!(a, b);
}
