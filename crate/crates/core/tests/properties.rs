use proptest::prelude::*;

use temporal_range::grad::ParamGradient;
use temporal_range::metric::{check_output_scaling, sequence_profile, temporal_range as range_of};
use temporal_range::model::{checkpoint, Init};
use temporal_range::oracles::{linear_map_range, random_map, LinearTemporalMap};
use temporal_range::tasks::{gen_copyk, CopyTaskSpec, Dataset, ImitationSpec, ObsVariant, TaskSpec};
use temporal_range::trainer::{clip_global_norm, evaluate, Metric};
use temporal_range::{
    analyze, Aggregation, CellKind, CellSpec, EncoderSpec, JacobianMode, Matrix, ModelSpec, NormKind,
    ObservationSequence, Rng, SequenceModel, TrConfig,
};

fn kind_of(i: usize) -> CellKind {
    [CellKind::Gru, CellKind::Lstm, CellKind::Lem, CellKind::LinearRec][i % 4]
}

fn random_model(seed: u64, kind: CellKind, d: usize, p: usize, c: usize) -> SequenceModel {
    let spec = ModelSpec {
        cell: CellSpec::new(kind, d, p),
        encoder: EncoderSpec::Identity,
        output_dim: c,
    };
    SequenceModel::init(&spec, Init::Glorot, &mut Rng::new(seed)).unwrap()
}

fn random_seq(seed: u64, len: usize, d: usize) -> ObservationSequence {
    let mut rng = Rng::new(seed);
    let data = (0..len * d).map(|_| rng.gaussian()).collect();
    ObservationSequence::new(Matrix::from_vec(len, d, data).unwrap()).unwrap()
}

fn tr(mode: JacobianMode, aggregation: Aggregation, window: usize) -> TrConfig {
    TrConfig {
        norm: NormKind::Frobenius,
        aggregation,
        mode,
        window,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rho_hat_stays_in_lag_range(seed in 0u64..1000, kind in 0usize..4, len in 3usize..14, max in any::<bool>()) {
        let model = random_model(seed, kind_of(kind), 2, 4, 3);
        let x = random_seq(seed + 1, len, 2);
        let agg = if max { Aggregation::Max } else { Aggregation::Mean };
        let multi = range_of(&sequence_profile(&model, &x, &tr(JacobianMode::MultiOutput, agg, len)).unwrap());
        let v = multi.rho_hat.value().unwrap();
        prop_assert!((1.0..=(len - 1) as f64).contains(&v), "multi {v}");
        let fin = range_of(&sequence_profile(&model, &x, &tr(JacobianMode::FinalOutput, agg, len)).unwrap());
        let v = fin.rho_hat.value().unwrap();
        prop_assert!((0.0..=(len - 1) as f64).contains(&v), "final {v}");
    }

    #[test]
    fn shift_copy_range_is_delay(k in 1usize..12, extra in 1usize..8, d in 1usize..4, c in 1usize..4, seed in 0u64..100) {
        let len = k + extra;
        let mut rng = Rng::new(seed);
        let readout = Matrix::from_vec(c, d, (0..c * d).map(|_| rng.gaussian()).collect()).unwrap();
        let model = SequenceModel::shift_copy(k, &readout).unwrap();
        let x = random_seq(seed, len, d);
        for agg in [Aggregation::Mean, Aggregation::Max] {
            let r = range_of(&sequence_profile(&model, &x, &tr(JacobianMode::FinalOutput, agg, len)).unwrap());
            prop_assert!((r.rho_hat.value().unwrap() - k as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn output_scaling_is_invariant(seed in 0u64..1000, kind in 0usize..4, alpha in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0]) {
        let model = random_model(seed, kind_of(kind), 3, 5, 2);
        let x = random_seq(seed + 7, 10, 3);
        let rep = check_output_scaling(&model, &x, alpha, &tr(JacobianMode::MultiOutput, Aggregation::Mean, 10)).unwrap();
        prop_assert!(rep.passes(1e-9), "{rep:?}");
    }

    #[test]
    fn disjoint_maps_add(seed in 0u64..1000, len in 2usize..20) {
        let mut rng = Rng::new(seed);
        let map = random_map(&mut rng, len, 2, 2);
        let cut = 1 + rng.below(len - 1);
        let (a, b): (Vec<usize>, Vec<usize>) = (0..len).partition(|&t| t < cut);
        let whole = linear_map_range(&map, NormKind::Spectral).unwrap();
        let left = linear_map_range(&map.restricted(&a), NormKind::Spectral).unwrap();
        let right = linear_map_range(&map.restricted(&b), NormKind::Spectral).unwrap();
        prop_assert!((whole.rho - left.rho - right.rho).abs() <= 1e-9 * whole.rho.max(1.0));
    }

    #[test]
    fn clipping_bounds_global_norm(entries in proptest::collection::vec(-1e3f64..1e3, 1..64), max_norm in 0.01f64..5.0) {
        let n = entries.len();
        let mut g = ParamGradient { tensors: vec![Matrix::from_vec(1, n, entries).unwrap()] };
        let before = g.global_norm();
        let reported = clip_global_norm(&mut g, max_norm);
        prop_assert_eq!(reported, before);
        prop_assert!(g.global_norm() <= max_norm + 1e-12);
        if before <= max_norm {
            prop_assert_eq!(g.global_norm(), before);
        }
    }
}

#[test]
fn checkpoint_round_trip_preserves_report() {
    let mut rng = Rng::new(3);
    let model = random_model(3, CellKind::Lstm, 4, 6, 4);
    let data = gen_copyk(&CopyTaskSpec::new(2, 12), 6, &mut rng).unwrap();
    let xs: Vec<_> = data.iter().map(|s| s.x.clone()).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&model, &path).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    let cfg = tr(JacobianMode::MultiOutput, Aggregation::Max, 12);
    let a = analyze(&model, &xs, &cfg).unwrap().to_json().unwrap();
    let b = analyze(&loaded, &xs, &cfg).unwrap().to_json().unwrap();
    assert_eq!(a, b);
    assert_eq!(checkpoint::to_string(&loaded), checkpoint::to_string(&model));
}

#[test]
fn dataset_file_round_trip_preserves_evaluation() {
    let model = random_model(9, CellKind::Gru, 2, 5, 2);
    let task = TaskSpec::Cartpole(ImitationSpec::new(ObsVariant::noisy(), 16));
    let data = Dataset::generate(task, 5, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.json");
    data.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    assert_eq!(back, data);
    let a = evaluate(&model, &data.sequences, Metric::Accuracy).unwrap();
    let b = evaluate(&model, &back.sequences, Metric::Accuracy).unwrap();
    assert_eq!(a, b);
}

#[test]
fn map_models_reproduce_closed_form() {
    let mut rng = Rng::new(21);
    for _ in 0..10 {
        let map: LinearTemporalMap = random_map(&mut rng, 9, 2, 3);
        let model = map.to_model().unwrap();
        let x = random_seq(rng.next_u64(), 9, 3);
        let via =
            range_of(&sequence_profile(&model, &x, &tr(JacobianMode::FinalOutput, Aggregation::Mean, 9)).unwrap());
        let direct = linear_map_range(&map, NormKind::Frobenius).unwrap();
        assert!((via.rho - direct.rho).abs() < 1e-10 * direct.rho.max(1.0));
    }
}
