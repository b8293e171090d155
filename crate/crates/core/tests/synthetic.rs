use fracbnn::encoding::{RgbImage, ThermometerConfig};
use fracbnn::kernels::argmax;
use fracbnn::model::{build_fracbnn_resnet20, count_ops, generate_synthetic, GateMode};
use fracbnn::modelfile::save;
use fracbnn::oracle::{self, Activations};
use fracbnn::verify::random_network;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn same_seed_gives_identical_files() {
    let spec = build_fracbnn_resnet20(ThermometerConfig::new(32).unwrap(), 10);
    let a = save(&generate_synthetic(4, &spec).unwrap()).unwrap();
    let b = save(&generate_synthetic(4, &spec).unwrap()).unwrap();
    let c = save(&generate_synthetic(5, &spec).unwrap()).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn calibrated_sparsity_lands_mid_range() {
    let spec = build_fracbnn_resnet20(ThermometerConfig::default(), 10);
    let model = generate_synthetic(0, &spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..3 {
        let img = RgbImage::random(32, 32, &mut rng);
        let st = model.forward(&img).unwrap().stats;
        assert!(
            (0.3..=0.7).contains(&st.mean_sparsity),
            "{}",
            st.mean_sparsity
        );
        for l in st.layers.iter().filter(|l| l.sparsity.is_some()) {
            assert!(
                (0.3..=0.7).contains(&l.sparsity.unwrap()),
                "layer {}",
                l.layer
            );
        }
    }
}

#[test]
fn closed_gates_match_the_one_bit_network() {
    let spec = build_fracbnn_resnet20(ThermometerConfig::new(32).unwrap(), 10);
    let mut model = generate_synthetic(2, &spec).unwrap();
    model.set_gates(GateMode::Closed);
    let img = RgbImage::random(32, 32, &mut ChaCha8Rng::seed_from_u64(3));
    let out = model.forward(&img).unwrap();
    assert_eq!(out.stats.effective_bitwidth, 1.0);
    assert_eq!(out.stats.update_bmacs, 0);
    let one_bit = oracle::forward_with(&model, &img, Activations::OneBit);
    let logits: Vec<i64> = out.logits.iter().map(|&v| v as i64).collect();
    assert_eq!(logits, one_bit.logits);
}

#[test]
fn open_gates_report_two_bits() {
    let spec = build_fracbnn_resnet20(ThermometerConfig::new(32).unwrap(), 10);
    let mut model = generate_synthetic(2, &spec).unwrap();
    model.set_gates(GateMode::Open);
    let img = RgbImage::random(32, 32, &mut ChaCha8Rng::seed_from_u64(3));
    let st = model.forward(&img).unwrap().stats;
    assert_eq!(st.effective_bitwidth, 2.0);
    assert_eq!(st.update_bmacs, count_ops(&spec).bmacs_update_max);
}

#[test]
fn random_networks_match_the_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for seed in 0..12 {
        let spec = random_network(&mut rng);
        let model = generate_synthetic(seed, &spec).unwrap();
        for _ in 0..3 {
            let img = RgbImage::random(spec.image_width, spec.image_height, &mut rng);
            let out = model.forward(&img).unwrap();
            let run = oracle::forward(&model, &img);
            let logits: Vec<i64> = out.logits.iter().map(|&v| v as i64).collect();
            assert_eq!(logits, run.logits, "seed {seed}");
            assert_eq!(out.stats.saturations, run.saturations);
            let sparsity: Vec<Option<f64>> = out.stats.layers.iter().map(|l| l.sparsity).collect();
            assert_eq!(sparsity, run.sparsity);
            let o = run.logits.iter().map(|&v| v as i32).collect::<Vec<_>>();
            assert_eq!(argmax(&out.logits), argmax(&o));
        }
    }
}
