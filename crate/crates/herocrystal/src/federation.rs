//! Stage 2: the server/client round protocol with backbone-only FedAvg
//! fusion, dynamic contrastive weighting and communication accounting.
//!
//! The "network" is an in-process channel: the only values that cross the
//! client/server boundary are [`ParameterMap`] snapshots, and every crossing
//! is recorded as a wire frame whose byte size is the serialized checkpoint
//! size. Client datasets never leave [`ClientState`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses;
use crate::rngutil;
use crate::tinynet::{
    clip_grad_norm, embed_with_backbone, sgd_step, GridDetector, ParameterMap, SgdState, Tape,
    BACKBONE_PREFIX,
};
use crate::tinynet::{Assignment, DetectorConfig};
use crate::types::LabeledScene;

/// Global gradient-norm clip applied before every optimizer step; tames the
/// curvature spikes the likelihood term produces while variances anneal.
pub const GRAD_CLIP_NORM: f64 = 50.0;

/// Dynamic weighting of the contrastive interpolation per round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum LambdaSchedule {
    /// `lambda_r = 1/r` (rounds are 1-based).
    InverseRound,
    Constant(f64),
}

impl LambdaSchedule {
    pub fn value(&self, round: usize) -> f64 {
        match self {
            LambdaSchedule::InverseRound => 1.0 / round as f64,
            LambdaSchedule::Constant(v) => *v,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundConfig {
    pub rounds: usize,
    pub local_iters: usize,
    pub lr: f64,
    pub momentum: f64,
    pub tau: f64,
    pub lambda: LambdaSchedule,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fedprox_mu: Option<f64>,
    pub batch_size: usize,
    /// Probability that a batch slot draws a synthetic target-style scene
    /// instead of a source scene (when synthetic data is present).
    pub synthetic_ratio: f64,
}

impl RoundConfig {
    pub fn desk_default() -> RoundConfig {
        RoundConfig {
            rounds: 3,
            local_iters: 200,
            lr: 0.007,
            momentum: 0.9,
            tau: 0.5,
            lambda: LambdaSchedule::InverseRound,
            fedprox_mu: None,
            batch_size: 8,
            synthetic_ratio: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if !(self.tau >= 0.05) {
            return Err(Error::config(format!("temperature {} must be >= 0.05", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.synthetic_ratio) {
            return Err(Error::config("synthetic ratio must lie in [0,1]"));
        }
        for r in 1..=self.rounds {
            let l = self.lambda.value(r);
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::config(format!("lambda_{r} = {l} outside [0,1]")));
            }
        }
        if let Some(mu) = self.fedprox_mu {
            if mu < 0.0 {
                return Err(Error::config("fedprox mu must be >= 0"));
            }
        }
        Ok(())
    }
}

/// One client: its private data, detector, previous-round backbone snapshot
/// and an independent seeded stream.
pub struct ClientState {
    pub id: usize,
    pub detector: GridDetector,
    pub prev_backbone: ParameterMap,
    pub failed: bool,
    source_scenes: Vec<LabeledScene>,
    synthetic_scenes: Vec<LabeledScene>,
    source_cache: Vec<SceneCache>,
    synthetic_cache: Vec<SceneCache>,
    rng: ChaCha8Rng,
}

struct SceneCache {
    patches: Vec<Vec<f64>>,
    assignment: Assignment,
}

fn build_cache(cfg: &DetectorConfig, scenes: &[LabeledScene]) -> Result<Vec<SceneCache>> {
    scenes
        .iter()
        .map(|scene| {
            Ok(SceneCache {
                patches: GridDetector::patches(cfg, &scene.image)?,
                assignment: Assignment::from_objects(cfg, &scene.objects),
            })
        })
        .collect()
}

impl ClientState {
    pub fn new(
        id: usize,
        detector: GridDetector,
        source_scenes: Vec<LabeledScene>,
        synthetic_scenes: Vec<LabeledScene>,
        master_seed: u64,
    ) -> Result<ClientState> {
        if source_scenes.is_empty() {
            return Err(Error::config(format!("client {id} has no source scenes")));
        }
        for scene in source_scenes.iter().chain(&synthetic_scenes) {
            for (cat, _) in &scene.objects {
                if !detector.cfg.categories.contains(*cat) {
                    return Err(Error::config(format!(
                        "client {id} holds an object of class `{cat}` outside its head's category set"
                    )));
                }
            }
        }
        let source_cache = build_cache(&detector.cfg, &source_scenes)?;
        let synthetic_cache = build_cache(&detector.cfg, &synthetic_scenes)?;
        let prev_backbone = detector.params.backbone();
        let id_str = id.to_string();
        let rng = rngutil::stream(master_seed, &["federation", "client", &id_str]);
        Ok(ClientState {
            id,
            detector,
            prev_backbone,
            failed: false,
            source_scenes,
            synthetic_scenes,
            source_cache,
            synthetic_cache,
            rng,
        })
    }

    pub fn source_scene_count(&self) -> usize {
        self.source_scenes.len()
    }

    /// The only client-to-server payload: a backbone snapshot.
    pub fn upload_backbone(&self) -> ParameterMap {
        self.detector.params.backbone()
    }
}

/// Direction of a wire frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WireDirection {
    Down,
    Up,
}

/// One parameter-map transfer over the simulated network.
#[derive(Debug, Clone, Serialize)]
pub struct WireFrame {
    pub round: usize,
    pub direction: WireDirection,
    pub client: usize,
    pub bytes: u64,
}

/// Per-round protocol record.
#[derive(Debug, Clone, Serialize)]
pub struct RoundRow {
    pub round: usize,
    pub bytes_down: u64,
    pub bytes_up: u64,
    pub mean_client_loss: f64,
    pub checksum: String,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RoundLedger {
    pub rows: Vec<RoundRow>,
    pub frames: Vec<WireFrame>,
}

impl RoundLedger {
    pub fn total_bytes(&self) -> u64 {
        self.rows.iter().map(|r| r.bytes_down + r.bytes_up).sum()
    }

    /// CSV with the columns round, bytes_down, bytes_up, mean_client_loss,
    /// map_checksum.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(e.to_string()))?;
        w.write_record(["round", "bytes_down", "bytes_up", "mean_client_loss", "map_checksum"])
            .map_err(|e| Error::Config(e.to_string()))?;
        for row in &self.rows {
            w.write_record([
                row.round.to_string(),
                row.bytes_down.to_string(),
                row.bytes_up.to_string(),
                format!("{:.12}", row.mean_client_loss),
                row.checksum.clone(),
            ])
            .map_err(|e| Error::Config(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Elementwise arithmetic mean of backbone maps.
///
/// All maps must contain exactly the same names and shapes, and only
/// backbone-namespace entries are accepted: heads are never averaged.
pub fn fedavg(backbones: &[ParameterMap]) -> Result<ParameterMap> {
    let first = backbones
        .first()
        .ok_or_else(|| Error::protocol("fedavg over an empty update set"))?;
    for map in backbones {
        for (name, tensor) in map.iter() {
            if !name.starts_with(BACKBONE_PREFIX) {
                return Err(Error::protocol(format!("non-backbone entry `{name}` in fusion")));
            }
            let reference = first
                .get(name)
                .ok_or_else(|| Error::protocol(format!("entry `{name}` missing from first update")))?;
            if reference.shape() != tensor.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    expected: reference.shape().to_vec(),
                    got: tensor.shape().to_vec(),
                });
            }
        }
        if map.len() != first.len() {
            return Err(Error::protocol("update maps disagree on entry count"));
        }
    }
    let mut out = ParameterMap::new();
    let n = backbones.len() as f64;
    for (name, tensor) in first.iter() {
        let mut acc = vec![0.0; tensor.len()];
        for map in backbones {
            for (a, v) in acc.iter_mut().zip(map.get(name).expect("validated").data()) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a /= n;
        }
        out.insert(name, tensor.shape().to_vec(), acc)?;
    }
    out.set_version(first.version() + 1);
    Ok(out)
}

/// Per-client loss trace for one round.
#[derive(Debug, Clone)]
pub struct ClientRound {
    pub client: usize,
    pub losses: Vec<f64>,
    pub failed: bool,
}

/// Run `E` local iterations against the freshly received global backbone.
///
/// The embeddings contrasted against are recomputed per scene from the frozen
/// global backbone (`z_glob`) and the previous-round snapshot (`z_prev`); the
/// final backbone becomes the next round's snapshot.
pub fn client_update(
    state: &mut ClientState,
    global_backbone: &ParameterMap,
    round: usize,
    cfg: &RoundConfig,
) -> Result<ClientRound> {
    state.detector.params.load_values(global_backbone)?;
    let lambda = cfg.lambda.value(round);
    let det_cfg = state.detector.cfg.clone();
    let mut sgd = SgdState::new();
    let mut losses_out = Vec::with_capacity(cfg.local_iters);

    // frozen embeddings for every scene under the received global backbone
    // and the previous-round snapshot
    let embed_all = |backbone: &ParameterMap, caches: &[SceneCache]| -> Vec<Vec<f64>> {
        caches
            .iter()
            .map(|c| embed_with_backbone(&det_cfg, backbone, &c.patches))
            .collect()
    };
    let z_glob_source = embed_all(global_backbone, &state.source_cache);
    let z_glob_synth = embed_all(global_backbone, &state.synthetic_cache);
    let z_prev_source = embed_all(&state.prev_backbone, &state.source_cache);
    let z_prev_synth = embed_all(&state.prev_backbone, &state.synthetic_cache);

    for _ in 0..cfg.local_iters {
        // mini-batch with the configured synthetic : source mixing ratio
        let mut batch: Vec<(bool, usize)> = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let synth = !state.synthetic_scenes.is_empty() && state.rng.gen_bool(cfg.synthetic_ratio);
            let idx = if synth {
                state.rng.gen_range(0..state.synthetic_scenes.len())
            } else {
                state.rng.gen_range(0..state.source_scenes.len())
            };
            batch.push((synth, idx));
        }

        let mut tape = Tape::new();
        let mut det_terms = Vec::with_capacity(batch.len());
        let mut con_terms = Vec::with_capacity(batch.len());
        for (synth, idx) in &batch {
            let (cache, z_glob, z_prev) = if *synth {
                (&state.synthetic_cache[*idx], &z_glob_synth[*idx], &z_prev_synth[*idx])
            } else {
                (&state.source_cache[*idx], &z_glob_source[*idx], &z_prev_source[*idx])
            };
            let forward = state.detector.forward_tape(&mut tape, &cache.patches);
            det_terms.push(losses::tape_detection_loss(&mut tape, &forward, &cache.assignment, &det_cfg));
            con_terms.push(losses::tape_contrastive_loss(
                &mut tape,
                forward.embedding,
                z_glob,
                z_prev,
                cfg.tau,
                lambda,
            )?);
        }
        let det_mean = tape.mean_nodes(&det_terms);
        let con_mean = tape.mean_nodes(&con_terms);
        let mut total = tape.add(det_mean, con_mean);
        if let Some(mu) = cfg.fedprox_mu {
            let prox = losses::tape_fedprox_term(&mut tape, &state.detector.params, global_backbone, mu, BACKBONE_PREFIX)?;
            total = tape.add(total, prox);
        }

        let value = tape.scalar(total);
        if !value.is_finite() {
            state.failed = true;
            return Ok(ClientRound { client: state.id, losses: losses_out, failed: true });
        }
        losses_out.push(value);
        let mut grads = tape.backward(total);
        clip_grad_norm(&mut grads, GRAD_CLIP_NORM);
        sgd_step(&mut state.detector.params, &grads, cfg.lr, cfg.momentum, &mut sgd)?;
    }

    let mut snapshot = state.detector.params.backbone();
    snapshot.set_version(round as u64);
    state.prev_backbone = snapshot;
    Ok(ClientRound { client: state.id, losses: losses_out, failed: false })
}

/// Outcome of a full federation run.
pub struct FederationRun {
    pub global_backbone: ParameterMap,
    /// Fused backbone after each round, in order.
    pub round_backbones: Vec<ParameterMap>,
    pub ledger: RoundLedger,
}

/// Drive R rounds: dispatch the global backbone, run client updates (in
/// parallel when asked — results are identical either way because every
/// client owns an independent stream), collect and fuse.
pub fn run_federation(
    clients: &mut [ClientState],
    init_backbone: &ParameterMap,
    cfg: &RoundConfig,
    parallel: bool,
) -> Result<FederationRun> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::protocol("no clients"));
    }
    for client in clients.iter() {
        // architectural identity of backbones across clients
        let own = client.detector.params.backbone();
        for (name, tensor) in init_backbone.iter() {
            let peer = own.get(name).ok_or_else(|| {
                Error::protocol(format!("client {} lacks backbone entry `{name}`", client.id))
            })?;
            if peer.shape() != tensor.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    expected: tensor.shape().to_vec(),
                    got: peer.shape().to_vec(),
                });
            }
        }
    }

    let backbone_bytes = init_backbone.byte_size()? as u64;
    let mut ledger = RoundLedger::default();
    let mut current = init_backbone.clone();
    let mut round_backbones = Vec::with_capacity(cfg.rounds);

    for round in 1..=cfg.rounds {
        let started = std::time::Instant::now();
        // dispatch: one backbone copy to every client
        for client in clients.iter() {
            ledger.frames.push(WireFrame {
                round,
                direction: WireDirection::Down,
                client: client.id,
                bytes: backbone_bytes,
            });
        }
        let bytes_down = backbone_bytes * clients.len() as u64;

        let outcomes: Vec<Result<ClientRound>> = if parallel {
            clients
                .par_iter_mut()
                .map(|client| client_update(client, &current, round, cfg))
                .collect()
        } else {
            clients
                .iter_mut()
                .map(|client| client_update(client, &current, round, cfg))
                .collect()
        };

        let mut updates: Vec<ParameterMap> = Vec::with_capacity(clients.len());
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for (client, outcome) in clients.iter().zip(outcomes) {
            let outcome = outcome?;
            if outcome.failed {
                continue;
            }
            ledger.frames.push(WireFrame {
                round,
                direction: WireDirection::Up,
                client: client.id,
                bytes: backbone_bytes,
            });
            updates.push(client.upload_backbone());
            loss_sum += outcome.losses.iter().sum::<f64>();
            loss_count += outcome.losses.len();
        }
        if updates.is_empty() {
            return Err(Error::stage("federation", format!("all clients failed in round {round}")));
        }
        let bytes_up = backbone_bytes * updates.len() as u64;
        let fused = fedavg(&updates)?;
        ledger.rows.push(RoundRow {
            round,
            bytes_down,
            bytes_up,
            mean_client_loss: if loss_count == 0 { 0.0 } else { loss_sum / loss_count as f64 },
            checksum: fused.checksum()?,
            wall_ms: started.elapsed().as_millis() as u64,
        });
        round_backbones.push(fused.clone());
        current = fused;
    }

    Ok(FederationRun { global_backbone: current, round_backbones, ledger })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_with(value: f64) -> ParameterMap {
        let mut m = ParameterMap::new();
        m.insert("backbone.w", vec![2], vec![value, value * 2.0]).unwrap();
        m
    }

    #[test]
    fn lambda_schedule_default_values() {
        let s = LambdaSchedule::InverseRound;
        assert_eq!(s.value(1), 1.0);
        assert_eq!(s.value(2), 0.5);
        assert!((s.value(3) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn fedavg_idempotent_on_identical_maps() {
        let maps = vec![map_with(3.0), map_with(3.0), map_with(3.0)];
        let fused = fedavg(&maps).unwrap();
        assert_eq!(fused.get("backbone.w").unwrap().data(), &[3.0, 6.0]);
        assert_eq!(fused.version(), 1);
    }

    #[test]
    fn fedavg_two_point_mean() {
        let fused = fedavg(&[map_with(0.0), map_with(2.0)]).unwrap();
        assert_eq!(fused.get("backbone.w").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn fedavg_is_permutation_invariant() {
        let a = map_with(1.0);
        let b = map_with(-4.0);
        let c = map_with(7.5);
        let f1 = fedavg(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let f2 = fedavg(&[c, a, b]).unwrap();
        assert_eq!(f1.to_bytes().unwrap(), f2.to_bytes().unwrap());
    }

    #[test]
    fn fedavg_rejects_head_entries() {
        let mut bad = map_with(1.0);
        bad.insert("head.w", vec![1], vec![0.0]).unwrap();
        let err = fedavg(&[bad]).unwrap_err();
        assert!(err.to_string().contains("head.w"), "error must name the entry: {err}");
    }

    #[test]
    fn fedavg_rejects_shape_mismatch() {
        let a = map_with(1.0);
        let mut b = ParameterMap::new();
        b.insert("backbone.w", vec![3], vec![0.0; 3]).unwrap();
        let err = fedavg(&[a, b]).unwrap_err();
        assert!(err.to_string().contains("backbone.w"));
    }

    #[test]
    fn fedavg_rejects_empty() {
        assert!(fedavg(&[]).is_err());
    }
}
