use std::path::PathBuf;

use capsgraph::config::RunConfig;
use capsgraph::core::consistency::semantic_consistency;
use capsgraph::core::Model;
use capsgraph::trainer::Prepared;

/// Untrained n-gram and primary-capsule rows land on the predicted class by
/// chance. The routed rows do not: they are built from the same couplings and
/// votes as the class capsules, so they lean toward the prediction even
/// before training.
#[test]
fn untrained_layers_sit_near_chance() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.json");
    let mut cfg = RunConfig::load(&path).unwrap();
    cfg.data.synthetic.as_mut().unwrap().test = 200;
    let data = Prepared::from_config(&cfg).unwrap();
    for seed in 1..=5 {
        let mut mc = cfg.model_config(data.labels.len(), data.vocab.len());
        mc.seed = seed;
        let model = Model::<f32>::new(mc).unwrap();
        let r = semantic_consistency(&model, data.test.token_rows()).unwrap();
        eprintln!("seed {seed}: NCL {:.1} PCL {:.1} RL {:.1}", r.ncl, r.pcl, r.rl);
        assert!((r.ncl - 25.0).abs() <= 10.0, "NCL {}", r.ncl);
        assert!((r.pcl - 25.0).abs() <= 10.0, "PCL {}", r.pcl);
        assert!(r.rl > 25.0 && r.rl <= 100.0, "RL {}", r.rl);
    }
}
