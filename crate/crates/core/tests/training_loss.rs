use masnn::attention::AttentionConfig;
use masnn::event_ingest::{synth_events, SyntheticDatasetSpec, Window};
use masnn::network::{PlainNet, PlainSpec};
use masnn::snn_core::LifParams;
use masnn::training::{bptt_train, examples_from_streams, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Number of epochs whose loss may fail to improve on the best so far.
const ALLOWED_STALLS: usize = 1;

#[test]
fn loss_falls_over_the_first_five_epochs() {
    let steps = 8;
    let spec = SyntheticDatasetSpec {
        samples_per_class: 8,
        seed: 3,
        ..Default::default()
    };
    let window = Window::from_ms(spec.duration_us as f64 / 1000.0 / steps as f64).unwrap();
    let data = examples_from_streams(&synth_events(&spec).unwrap(), window, steps).unwrap();
    for attention in ["none", "TCSA"] {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg_att = AttentionConfig::from_combo(attention).unwrap();
        let mut net = PlainNet::new(PlainSpec::default(), steps, LifParams::default(), cfg_att, &mut rng).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            ..Default::default()
        };
        let report = bptt_train(&mut net, &data, &cfg, |_| {}).unwrap();
        let losses: Vec<f64> = report.epochs.iter().map(|e| e.loss).collect();
        let mut best = losses[0];
        let mut stalls = 0;
        for &l in &losses[1..] {
            if l < best {
                best = l;
            } else {
                stalls += 1;
            }
        }
        assert!(stalls <= ALLOWED_STALLS, "{}: {:?}", attention, losses);
        assert!(losses[4] < losses[0], "{}: {:?}", attention, losses);
    }
}
