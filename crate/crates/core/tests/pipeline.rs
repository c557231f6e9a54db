use dhpf::evaluation::{evaluate, pck, predict_pair, selection_stats, EvalConfig, PckBasis};
use dhpf::matching::{
    appearance_confidence, compose_hyperimage, dense_match, mutual_nn_filter, phm, transfer_keypoint, Grid,
    HoughConfig,
};
use dhpf::pyramid::{synth_dataset, FeatureBlock, SynthDatasetConfig, WarpKind};
use dhpf::tensor::Tensor;
use dhpf::training::{ModelParams, PairDataset, PipelineConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dataset(warp: WarpKind, seed: u64) -> PairDataset {
    let d = synth_dataset(&SynthDatasetConfig {
        categories: 2,
        images_per_category: 2,
        pairs_per_image: 2,
        keypoints: 6,
        warp,
        seed,
        ..Default::default()
    })
    .unwrap();
    PairDataset::new(d.pyramids, d.pairs).unwrap()
}

#[test]
fn identity_pairs_are_matched_exactly() {
    let ds = dataset(WarpKind::Identity, 3);
    let params = ModelParams::identity_friendly(&ds.channels().unwrap(), PipelineConfig::default(), 0).unwrap();
    let report = evaluate(&params, &ds, &EvalConfig::default()).unwrap();
    for v in report.pck_per_alpha.values() {
        assert_eq!(*v, 1.0);
    }
    assert_eq!(report.selection_frequency, vec![1.0; 4]);
    assert_eq!(report.selected_count_histogram, vec![0, 0, 0, 0, report.pairs]);
}

#[test]
fn evaluation_is_idempotent() {
    let ds = dataset(WarpKind::Affine, 4);
    let params = ModelParams::new(&ds.channels().unwrap(), PipelineConfig::default(), 9).unwrap();
    let cfg = EvalConfig::default();
    let mut a = evaluate(&params, &ds, &cfg).unwrap();
    let mut b = evaluate(&params, &ds, &cfg).unwrap();
    assert!(a.mean_pair_ms > 0.0 && b.mean_pair_ms > 0.0);
    a.mean_pair_ms = 0.0;
    b.mean_pair_ms = 0.0;
    assert_eq!(a, b);
    for v in a.pck_per_alpha.values().chain(a.selection_frequency.iter()) {
        assert!((0.0..=1.0).contains(v));
    }
    let records: Vec<_> = ds
        .pairs
        .iter()
        .map(|p| {
            let kps: Vec<[f64; 2]> = p.keypoints.iter().map(|k| k.src).collect();
            let pred = predict_pair(&params, ds.pyramid(&p.src_id).unwrap(), ds.pyramid(&p.trg_id).unwrap(), &kps).unwrap();
            (p.category.clone(), pred.gates_on)
        })
        .collect();
    let stats = selection_stats(&records);
    assert_eq!(stats.frequency, a.selection_frequency);
    assert_eq!(stats.count_histogram, a.selected_count_histogram);
}

#[test]
fn eval_results_do_not_depend_on_thread_count() {
    let ds = dataset(WarpKind::Affine, 5);
    let params = ModelParams::new(&ds.channels().unwrap(), PipelineConfig::default(), 2).unwrap();
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let mut r = pool.install(|| evaluate(&params, &ds, &EvalConfig::default()).unwrap());
        r.mean_pair_ms = 0.0;
        r
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn bbox_basis_falls_back_to_keypoint_box() {
    let ds = dataset(WarpKind::Affine, 6);
    let params = ModelParams::new(&ds.channels().unwrap(), PipelineConfig::default(), 1).unwrap();
    let img = evaluate(&params, &ds, &EvalConfig::default()).unwrap();
    let bbox = evaluate(
        &params,
        &ds,
        &EvalConfig {
            basis: PckBasis::Bbox,
            ..Default::default()
        },
    )
    .unwrap();
    // the keypoint box is never larger than the image
    for (k, v) in &bbox.pck_per_alpha {
        assert!(*v <= img.pck_per_alpha[k]);
    }
}

#[test]
fn boundary_displacement_counts_as_correct() {
    let truth = [[10.0, 10.0], [30.0, 40.0]];
    let moved = [[18.0, 10.0], [30.0, 32.0]];
    assert_eq!(pck(&moved, &truth, 0.125, 64.0).unwrap(), 1.0);
    assert_eq!(pck(&moved, &truth, 0.124, 64.0).unwrap(), 0.0);
}

fn random_block(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureBlock {
    let v = (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    FeatureBlock::new(0, Tensor::new(vec![h, w, c], v).unwrap()).unwrap()
}

#[test]
fn shifted_features_give_shifted_matches() {
    // the target is the source moved one cell right; interior keypoints follow
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (h, w, c) = (6, 8, 8);
    let src = random_block(&mut rng, h, w, c);
    let mut shifted = vec![0.0; h * w * c];
    for r in 0..h {
        for col in 1..w {
            shifted[(r * w + col) * c..][..c].copy_from_slice(src.at(r, col - 1));
        }
    }
    let trg = FeatureBlock::new(0, Tensor::new(vec![h, w, c], shifted).unwrap()).unwrap();
    let g = Grid::new(h, w, 64.0, 48.0);
    let a = appearance_confidence(
        &compose_hyperimage(g, &[(&src, 1.0)], vec![0]).unwrap(),
        &compose_hyperimage(g, &[(&trg, 1.0)], vec![0]).unwrap(),
    )
    .unwrap();
    let c = mutual_nn_filter(&phm(&a, &g, &g, &HoughConfig::default()).unwrap()).unwrap();
    let m = dense_match(&c);
    for r in 1..h - 1 {
        for col in 1..w - 2 {
            assert_eq!(m[r * w + col], r * w + col + 1);
        }
    }
    let p = [3.0 * 8.0 + 4.0, 3.0 * 8.0 + 4.0];
    let q = transfer_keypoint(p, &m, &g, &g).unwrap();
    assert!((q[0] - (p[0] + 8.0)).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pck_is_monotone_in_alpha(
        pts in prop::collection::vec((0.0..64.0f64, 0.0..64.0f64, -20.0..20.0f64, -20.0..20.0f64), 1..20),
        a1 in 0.0..0.5f64,
        a2 in 0.0..0.5f64,
    ) {
        let truth: Vec<[f64; 2]> = pts.iter().map(|p| [p.0, p.1]).collect();
        let pred: Vec<[f64; 2]> = pts.iter().map(|p| [p.0 + p.2, p.1 + p.3]).collect();
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        prop_assert!(pck(&pred, &truth, lo, 64.0).unwrap() <= pck(&pred, &truth, hi, 64.0).unwrap());
    }

    #[test]
    fn pck_is_scale_invariant(
        pts in prop::collection::vec((0.0..64.0f64, 0.0..48.0f64, -10.0..10.0f64, -10.0..10.0f64), 1..20),
        s in prop::sample::select(vec![0.5, 2.0, 4.0, 0.25]),
        alpha in 0.01..0.3f64,
    ) {
        // powers of two keep the scaled comparison exact
        let truth: Vec<[f64; 2]> = pts.iter().map(|p| [p.0, p.1]).collect();
        let pred: Vec<[f64; 2]> = pts.iter().map(|p| [p.0 + p.2, p.1 + p.3]).collect();
        let scale = |v: &[[f64; 2]]| v.iter().map(|p| [p[0] * s, p[1] * s]).collect::<Vec<_>>();
        let reference = dhpf::evaluation::pck_reference_size((64.0, 48.0), None, PckBasis::Img).unwrap();
        let scaled_ref = dhpf::evaluation::pck_reference_size((64.0 * s, 48.0 * s), None, PckBasis::Img).unwrap();
        prop_assert_eq!(
            pck(&pred, &truth, alpha, reference).unwrap(),
            pck(&scale(&pred), &scale(&truth), alpha, scaled_ref).unwrap()
        );
    }
}
