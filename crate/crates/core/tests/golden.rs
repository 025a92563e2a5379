use aaclite_core::model::{AacLiteNet, ModelConfig, ModelOutput, NUM_CLASSES, NUM_GROUPS};
use aaclite_core::Tensor;

const GOLDEN: &str = include_str!("golden/shrunken_forward.txt");

fn fixture() -> Vec<ModelOutput> {
    let cfg = ModelConfig::shrunken();
    let mut net = AacLiteNet::build(&cfg).unwrap();
    for name in ["fc.weight", "fc.bias"] {
        let id = net.store().find(name).unwrap();
        let n = net.store().get(id).numel();
        net.store_mut()
            .set(id, (0..n).map(|i| (i as f64 * 0.731).sin() * 0.2).collect())
            .unwrap();
    }
    let x = Tensor::from_fn(&[2, 3, cfg.input_h, cfg.input_w], |i| {
        ((i * 31 % 97) as f64 / 97.0).powi(2)
    })
    .unwrap();
    net.forward_batch(&x, false).unwrap()
}

fn flatten(o: &ModelOutput) -> Vec<f64> {
    let mut v = vec![o.regression];
    v.extend(o.granular_probs.iter().flatten());
    assert_eq!(v.len(), 1 + NUM_GROUPS * NUM_CLASSES);
    v
}

#[test]
fn shrunken_forward_matches_recorded_outputs() {
    let got: Vec<f64> = fixture().iter().flat_map(flatten).collect();
    if std::env::var_os("AACLITE_BLESS").is_some() {
        let text: String = got.iter().map(|v| format!("{v:.17e}\n")).collect();
        std::fs::write(
            concat!(
                env!("CARGO_MANIFEST_DIR"),
                "/tests/golden/shrunken_forward.txt"
            ),
            text,
        )
        .unwrap();
        return;
    }
    let want: Vec<f64> = GOLDEN.lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(got.len(), want.len());
    for (i, (g, w)) in got.iter().zip(&want).enumerate() {
        assert!(
            (g - w).abs() <= 1e-10 * w.abs().max(1.0),
            "output {i}: {g} vs {w}"
        );
    }
}

#[test]
fn batch_rows_are_independent_in_inference() {
    let cfg = ModelConfig::shrunken();
    let net = AacLiteNet::build(&cfg).unwrap();
    let x = Tensor::from_fn(&[3, 3, cfg.input_h, cfg.input_w], |i| {
        (i as f64 * 0.013).cos()
    })
    .unwrap();
    let all = net.forward_batch(&x, false).unwrap();
    let per = 3 * cfg.input_h * cfg.input_w;
    for (k, o) in all.iter().enumerate() {
        let one = Tensor::from_vec(
            &[1, 3, cfg.input_h, cfg.input_w],
            x.data()[k * per..(k + 1) * per].to_vec(),
        )
        .unwrap();
        let single = net.forward_batch(&one, false).unwrap();
        assert_eq!(flatten(&single[0]), flatten(o));
    }
}
