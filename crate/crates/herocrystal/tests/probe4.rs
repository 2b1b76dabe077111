//! Per-client loss trajectories.

use herocrystal::federation::{client_update, ClientState, LambdaSchedule, RoundConfig};
use herocrystal::federation::fedavg;
use herocrystal::pipeline::ScenarioConfig;
use herocrystal::rngutil;
use herocrystal::scenesim;
use herocrystal::tinynet::{DetectorConfig, GridDetector};
use herocrystal::types::{CategorySet, DomainTag};

#[test]
#[ignore]
fn per_client_traces() {
    let cfg = ScenarioConfig::ck2b_analog(1);
    let sources: Vec<Vec<_>> = cfg
        .sources
        .iter()
        .enumerate()
        .map(|(i, s)| scenesim::make_dataset(s, cfg.train_scenes_per_source, DomainTag::Source(i)).unwrap())
        .collect();
    let mut clients = Vec::new();
    for (i, spec) in cfg.sources.iter().enumerate() {
        let mut rng = rngutil::stream(cfg.master_seed, &["detector", "init", &i.to_string()]);
        let det = GridDetector::init(DetectorConfig::desk_default(spec.categories), &mut rng).unwrap();
        clients.push(ClientState::new(i, det, sources[i].clone(), vec![], cfg.master_seed).unwrap());
    }
    let mut global = {
        let mut rng = rngutil::stream(cfg.master_seed, &["server", "init"]);
        GridDetector::init(DetectorConfig::desk_default(CategorySet::full()), &mut rng)
            .unwrap()
            .params
            .backbone()
    };
    let round_cfg = RoundConfig {
        rounds: 3,
        local_iters: 400,
        lr: 0.01,
        momentum: 0.9,
        tau: 0.5,
        lambda: LambdaSchedule::InverseRound,
        fedprox_mu: None,
        batch_size: 8,
        synthetic_ratio: 0.2,
    };
    for round in 1..=3 {
        let mut ups = Vec::new();
        for client in clients.iter_mut() {
            let out = client_update(client, &global, round, &round_cfg).unwrap();
            let l = &out.losses;
            println!(
                "round {round} client {}: first {:.2} mid {:.2} last {:.2} min {:.2} max {:.2}",
                client.id,
                l[0],
                l[l.len() / 2],
                l[l.len() - 1],
                l.iter().cloned().fold(f64::INFINITY, f64::min),
                l.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            );
            ups.push(client.upload_backbone());
        }
        global = fedavg(&ups).unwrap();
    }
}
