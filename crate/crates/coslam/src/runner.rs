//! Deterministic scenario execution: drives the agents, links and server on
//! a virtual clock, exports run artifacts (trajectories, snapshots, traffic
//! logs, reports), and compares runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Agent, AgentConfig, AgentError};
use crate::eval::{self, FrameLabel, PosePair, Trajectory};
use crate::netsim::Link;
use crate::optim::LMSettings;
use crate::placerec::VocabularyTree;
use crate::scenario::{RunMode, Scenario};
use crate::server::{Server, ServerConfig, ServerEvent};
use crate::worldsim::{self, TrajectorySpec};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Scenario(#[from] crate::scenario::ScenarioError),
    #[error("world simulation failed: {0}")]
    WorldSim(#[from] crate::worldsim::WorldSimError),
    #[error("vocabulary build failed: {0}")]
    PlaceRec(#[from] crate::placerec::PlaceRecError),
    #[error("server error: {0}")]
    Server(#[from] crate::server::ServerError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse report {path}: {source}")]
    BadReport { path: PathBuf, source: serde_json::Error },
    #[error("runs use different seeds ({a} vs {b}); comparison requires matching seeds")]
    SeedMismatch { a: u64, b: u64 },
}

fn write(path: &Path, contents: &str) -> Result<(), RunnerError> {
    fs::write(path, contents).map_err(|e| RunnerError::Io { path: path.to_path_buf(), source: e })
}

/// ATE numbers as exported in reports.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AteSummary {
    pub rmse_m: f64,
    pub rmse_percent: f64,
    pub pairs: usize,
    pub length_m: f64,
}

impl From<&eval::AteReport> for AteSummary {
    fn from(r: &eval::AteReport) -> Self {
        Self {
            rmse_m: r.rmse_m,
            rmse_percent: r.rmse_percent,
            pairs: r.pairs,
            length_m: r.length_m,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentReport {
    pub agent: u32,
    pub frames: usize,
    pub tracked_frames: usize,
    pub keyframes: usize,
    /// Largest optimizable local-map size seen at a mapping-cycle boundary.
    pub max_cycle_kfs: usize,
    pub tracking_lost: bool,
    pub ate: Option<AteSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub mode: RunMode,
    pub agents: Vec<AgentReport>,
    /// Joint-alignment multi-agent error; collaborative runs only.
    pub cumulative: Option<AteSummary>,
    pub live_maps: Option<usize>,
    pub loop_closures: usize,
    pub map_fusions: usize,
}

impl RunReport {
    pub fn load(dir: &Path) -> Result<RunReport, RunnerError> {
        let path = dir.join("report.json");
        let text = fs::read_to_string(&path)
            .map_err(|e| RunnerError::Io { path: path.clone(), source: e })?;
        serde_json::from_str(&text).map_err(|e| RunnerError::BadReport { path, source: e })
    }
}

/// Executes a scenario, honoring its `repeat` count: repetitions land in
/// `rep<N>/` subdirectories with seeds seed, seed+1, ... and the top-level
/// report carries per-agent means.
pub fn run(scenario: &Scenario, out: &Path) -> Result<RunReport, RunnerError> {
    scenario.validate()?;
    fs::create_dir_all(out).map_err(|e| RunnerError::Io { path: out.to_path_buf(), source: e })?;
    if scenario.repeat == 1 {
        let report = run_once(scenario, scenario.seed, out)?;
        write(&out.join("table.txt"), &render_table(&report))?;
        return Ok(report);
    }
    let mut reports = Vec::new();
    for rep in 0..scenario.repeat {
        let dir = out.join(format!("rep{rep}"));
        fs::create_dir_all(&dir)
            .map_err(|e| RunnerError::Io { path: dir.clone(), source: e })?;
        reports.push(run_once(scenario, scenario.seed + rep as u64, &dir)?);
    }
    let mean = mean_report(scenario, &reports);
    write(&out.join("report.json"), &serde_json::to_string_pretty(&mean).unwrap())?;
    write(&out.join("table.txt"), &render_table(&mean))?;
    Ok(mean)
}

/// One deterministic execution with a concrete seed.
pub fn run_once(scenario: &Scenario, seed: u64, out: &Path) -> Result<RunReport, RunnerError> {
    fs::create_dir_all(out).map_err(|e| RunnerError::Io { path: out.to_path_buf(), source: e })?;
    let camera = scenario.camera.intrinsics();
    let world = worldsim::generate_world(seed, &scenario.zones);
    let collaborative = scenario.mode == RunMode::Collaborative;

    // Ground-truth trajectories and the frame schedule.
    let mut gt: Vec<Vec<(f64, crate::geometry::SE3Pose)>> = Vec::new();
    for (i, spec) in scenario.agents.iter().enumerate() {
        let traj = worldsim::generate_trajectory(
            &world,
            &TrajectorySpec {
                zone: spec.zone,
                length: spec.length,
                speed: spec.speed,
                frame_rate: spec.frame_rate,
                closes_loop: spec.closes_loop,
                start_offset: spec.start_offset,
                seed: seed ^ (0x5851_f42d_4c95_7f2d_u64.wrapping_mul(i as u64 + 1)),
            },
        )?;
        gt.push(traj);
    }

    // Vocabulary trained on the world's landmark descriptors.
    let training: Vec<_> = world.landmarks.iter().map(|l| l.descriptor).collect();
    let vocab = VocabularyTree::build(
        &training,
        scenario.algo.vocab_branching,
        scenario.algo.vocab_levels,
        seed,
    )?;

    let agent_ids: Vec<u32> = (0..scenario.agents.len() as u32).collect();
    let mut agents: Vec<Agent> =
        agent_ids.iter().map(|id| Agent::new(*id, camera, agent_config(scenario))).collect();
    let mut uplinks: Vec<Link> = Vec::new();
    let mut downlinks: Vec<Link> = Vec::new();
    for i in 0..agents.len() {
        let mut up = scenario.link;
        up.seed = seed ^ (2 * i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut down = scenario.link;
        down.seed = seed ^ (2 * i as u64 + 2).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        uplinks.push(Link::new(up));
        downlinks.push(Link::new(down));
    }
    let mut server = if collaborative {
        Some(Server::new(camera, vocab, &agent_ids, server_config(scenario, seed)))
    } else {
        None
    };

    // Frame schedule in global timestamp order (agent id breaks ties).
    let mut schedule: Vec<(f64, usize, usize)> = Vec::new();
    for (i, traj) in gt.iter().enumerate() {
        for (j, (t, _)) in traj.iter().enumerate() {
            schedule.push((*t, i, j));
        }
    }
    schedule.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut tracked = vec![0usize; agents.len()];
    let mut lost = vec![false; agents.len()];
    for (t, i, j) in schedule {
        if lost[i] {
            continue;
        }
        let (_, pose) = gt[i][j];
        let frame = worldsim::observe(
            &world,
            t,
            &pose,
            i as u32,
            &camera,
            &scenario.observe,
            ((i as u64) << 32) | j as u64,
        );
        match agents[i].step(&frame) {
            Ok(_) => tracked[i] += 1,
            Err(AgentError::InsufficientParallax | AgentError::TooFewCommonLandmarks(..)) => {}
            Err(AgentError::TrackingLost(_)) => lost[i] = true,
            Err(_) => lost[i] = true,
        }
        if let Some(server) = server.as_mut() {
            agents[i].sync(t, &mut uplinks[i], &mut downlinks[i]);
            for envelope in uplinks[i].poll(t) {
                server.handle_envelope(i as u32, &envelope, t, &mut downlinks[i])?;
            }
        }
    }

    // Drain phase: let in-flight and resent messages land.
    if let Some(server) = server.as_mut() {
        let end = gt
            .iter()
            .filter_map(|t| t.last().map(|(ts, _)| *ts))
            .fold(0.0f64, f64::max);
        let mut t = end;
        for _ in 0..50 {
            t += 0.25;
            for i in 0..agents.len() {
                agents[i].sync(t, &mut uplinks[i], &mut downlinks[i]);
                for envelope in uplinks[i].poll(t) {
                    server.handle_envelope(i as u32, &envelope, t, &mut downlinks[i])?;
                }
            }
        }
    }

    // Artifacts and evaluation.
    let mut agent_reports = Vec::new();
    let mut pair_sets: Vec<Vec<PosePair>> = Vec::new();
    for (i, agent) in agents.iter().enumerate() {
        let gt_traj = Trajectory::new(gt[i].clone(), FrameLabel::World);
        write(&out.join(format!("agent{i}_gt.csv")), &eval::trajectory_to_csv(&gt_traj))?;
        if !agent.trajectory.is_empty() {
            let local = Trajectory::new(agent.trajectory.clone(), FrameLabel::MapLocal);
            write(
                &out.join(format!("agent{i}_trajectory.csv")),
                &eval::trajectory_to_csv(&local),
            )?;
        }

        // Collaborative runs are scored on the server-side keyframe poses
        // (post loop closure and GBA); individual runs on the agent's own
        // frame trajectory.
        let est = if let Some(server) = server.as_ref() {
            server.agent_keyframe_trajectory(i as u32)
        } else {
            agent.trajectory.clone()
        };
        let ate = if est.len() >= 3 {
            let est_traj = Trajectory::new(est.clone(), FrameLabel::MapLocal);
            if let Some(name) = server.as_ref().map(|_| format!("agent{i}_server_keyframes.csv"))
            {
                write(&out.join(name), &eval::trajectory_to_csv(&est_traj))?;
            }
            match eval::associate(&est_traj, &gt_traj, eval::DEFAULT_MAX_DT) {
                Ok(pairs) => {
                    let report = eval::align_sim3(&pairs).map(|a| eval::ate_rmse(&pairs, &a));
                    if server.is_some() {
                        pair_sets.push(pairs.clone());
                    }
                    if let Ok(report) = &report {
                        write(
                            &out.join(format!("agent{i}_ate.json")),
                            &report.to_json(),
                        )?;
                        write(
                            &out.join(format!("agent{i}_residuals.csv")),
                            &eval::residuals_csv(&pairs, &report.alignment),
                        )?;
                    }
                    report.ok().map(|r| AteSummary::from(&r))
                }
                Err(_) => None,
            }
        } else {
            None
        };

        agent_reports.push(AgentReport {
            agent: i as u32,
            frames: gt[i].len(),
            tracked_frames: tracked[i],
            keyframes: agent.keyframes.len(),
            max_cycle_kfs: agent.max_cycle_kfs,
            tracking_lost: lost[i],
            ate,
        });
    }

    let (cumulative, live_maps, loop_closures, map_fusions) =
        if let Some(server) = server.as_ref() {
            write(&out.join("snapshot_keyframes.csv"), &server.keyframes_csv())?;
            write(&out.join("snapshot_map_points.csv"), &server.map_points_csv())?;
            write(&out.join("registry.json"), &server.registry_json())?;
            for i in 0..agents.len() {
                write(
                    &out.join(format!("traffic_agent{i}_up.csv")),
                    &uplinks[i].traffic_log_csv(),
                )?;
                write(
                    &out.join(format!("traffic_agent{i}_down.csv")),
                    &downlinks[i].traffic_log_csv(),
                )?;
            }
            let cumulative = if pair_sets.is_empty() {
                None
            } else {
                eval::cumulative_error(&pair_sets).ok().map(|r| AteSummary::from(&r))
            };
            let loops = server
                .events
                .iter()
                .filter(|e| matches!(e, ServerEvent::LoopClosure { .. }))
                .count();
            let fusions = server
                .events
                .iter()
                .filter(|e| matches!(e, ServerEvent::MapFusion { .. }))
                .count();
            (cumulative, Some(server.live_map_count()), loops, fusions)
        } else {
            (None, None, 0, 0)
        };

    let report = RunReport {
        scenario: scenario.name.clone(),
        seed,
        mode: scenario.mode,
        agents: agent_reports,
        cumulative,
        live_maps,
        loop_closures,
        map_fusions,
    };
    write(&out.join("report.json"), &serde_json::to_string_pretty(&report).unwrap())?;
    Ok(report)
}

fn agent_config(scenario: &Scenario) -> AgentConfig {
    let algo = &scenario.algo;
    AgentConfig {
        n_cap: algo.n_cap,
        theta_covis: algo.theta_covis,
        motion_ba: LMSettings::default().with_max_iterations(algo.motion_iterations),
        local_ba: LMSettings::default().with_max_iterations(algo.local_ba_iterations),
        ..AgentConfig::default()
    }
}

fn server_config(scenario: &Scenario, seed: u64) -> ServerConfig {
    let algo = &scenario.algo;
    ServerConfig {
        min_corr: algo.min_corr,
        accept_inliers: algo.accept_inliers,
        ransac_iterations: algo.ransac_iterations,
        inlier_tau: algo.inlier_tau,
        min_bow_score: algo.min_bow_score,
        covis_strong: algo.covis_strong,
        theta_covis: algo.theta_covis,
        neighborhood_n: algo.neighborhood_n,
        essential: LMSettings::default().with_max_iterations(algo.essential_iterations),
        gba: LMSettings::default().with_max_iterations(algo.gba_iterations),
        seed: seed ^ 0xc0ff_ee00,
        ..ServerConfig::default()
    }
}

/// Mean ATE over repetitions, per agent; counts come from the first rep.
fn mean_report(scenario: &Scenario, reports: &[RunReport]) -> RunReport {
    let mut agents = reports[0].agents.clone();
    for (i, agent) in agents.iter_mut().enumerate() {
        let summaries: Vec<&AteSummary> =
            reports.iter().filter_map(|r| r.agents[i].ate.as_ref()).collect();
        agent.ate = mean_summary(&summaries);
    }
    let cumulative: Vec<&AteSummary> =
        reports.iter().filter_map(|r| r.cumulative.as_ref()).collect();
    RunReport {
        scenario: scenario.name.clone(),
        seed: scenario.seed,
        mode: scenario.mode,
        agents,
        cumulative: mean_summary(&cumulative),
        live_maps: reports.last().and_then(|r| r.live_maps),
        loop_closures: reports.iter().map(|r| r.loop_closures).sum(),
        map_fusions: reports.iter().map(|r| r.map_fusions).sum(),
    }
}

fn mean_summary(summaries: &[&AteSummary]) -> Option<AteSummary> {
    if summaries.is_empty() {
        return None;
    }
    let n = summaries.len() as f64;
    Some(AteSummary {
        rmse_m: summaries.iter().map(|s| s.rmse_m).sum::<f64>() / n,
        rmse_percent: summaries.iter().map(|s| s.rmse_percent).sum::<f64>() / n,
        pairs: summaries.iter().map(|s| s.pairs).sum::<usize>() / summaries.len(),
        length_m: summaries.iter().map(|s| s.length_m).sum::<f64>() / n,
    })
}

/// Human-readable run table in the shape of the reference comparison tables.
pub fn render_table(report: &RunReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "scenario: {}  mode: {}  seed: {}\n",
        report.scenario, report.mode, report.seed
    ));
    out.push_str("agent    KFs  RMSE (m)   Error (%)\n");
    for a in &report.agents {
        match &a.ate {
            Some(ate) => out.push_str(&format!(
                "{:<6} {:>5}  {:>8.4}  {:>9.4}\n",
                a.agent, a.keyframes, ate.rmse_m, ate.rmse_percent
            )),
            None => out.push_str(&format!(
                "{:<6} {:>5}  {:>8}  {:>9}\n",
                a.agent, a.keyframes, "n/a", "n/a"
            )),
        }
    }
    if let Some(c) = &report.cumulative {
        out.push_str(&format!(
            "cumulative: RMSE {:.4} m over {:.1} m ({:.4} %)\n",
            c.rmse_m, c.length_m, c.rmse_percent
        ));
    }
    if let Some(maps) = report.live_maps {
        out.push_str(&format!(
            "server: {} live map(s), {} loop closure(s), {} fusion(s)\n",
            maps, report.loop_closures, report.map_fusions
        ));
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub agent: u32,
    pub rmse_a: Option<f64>,
    pub rmse_b: Option<f64>,
    /// Relative reduction from A to B in percent; positive means B is better.
    pub reduction_percent: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub seed: u64,
    pub mode_a: RunMode,
    pub mode_b: RunMode,
    pub rows: Vec<ComparisonRow>,
    pub cumulative_b: Option<AteSummary>,
}

/// Side-by-side comparison of two run directories sharing seeds.
pub fn compare(dir_a: &Path, dir_b: &Path) -> Result<ComparisonReport, RunnerError> {
    let a = RunReport::load(dir_a)?;
    let b = RunReport::load(dir_b)?;
    if a.seed != b.seed {
        return Err(RunnerError::SeedMismatch { a: a.seed, b: b.seed });
    }
    let mut rows = Vec::new();
    for ra in &a.agents {
        let rb = b.agents.iter().find(|r| r.agent == ra.agent);
        let rmse_a = ra.ate.as_ref().map(|s| s.rmse_m);
        let rmse_b = rb.and_then(|r| r.ate.as_ref()).map(|s| s.rmse_m);
        let reduction = match (rmse_a, rmse_b) {
            (Some(x), Some(y)) if x > 0.0 => Some((x - y) / x * 100.0),
            _ => None,
        };
        rows.push(ComparisonRow {
            agent: ra.agent,
            rmse_a,
            rmse_b,
            reduction_percent: reduction,
        });
    }
    Ok(ComparisonReport {
        seed: a.seed,
        mode_a: a.mode,
        mode_b: b.mode,
        rows,
        cumulative_b: b.cumulative,
    })
}

pub fn render_comparison(report: &ComparisonReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "comparison (seed {}): A = {}, B = {}\n",
        report.seed, report.mode_a, report.mode_b
    ));
    out.push_str("agent  RMSE A (m)  RMSE B (m)  reduction (%)\n");
    let fmt = |v: Option<f64>| match v {
        Some(x) => format!("{x:>10.4}"),
        None => format!("{:>10}", "n/a"),
    };
    for row in &report.rows {
        out.push_str(&format!(
            "{:<6} {}  {}  {}\n",
            row.agent,
            fmt(row.rmse_a),
            fmt(row.rmse_b),
            fmt(row.reduction_percent)
        ));
    }
    if let Some(c) = &report.cumulative_b {
        out.push_str(&format!("cumulative B: {:.4} % ({:.4} m)\n", c.rmse_percent, c.rmse_m));
    }
    out
}

/// Recursively collects relative path -> bytes for determinism checks.
pub fn dir_digest(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, RunnerError> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries =
            fs::read_dir(&d).map_err(|e| RunnerError::Io { path: d.clone(), source: e })?;
        for entry in entries {
            let entry = entry.map_err(|e| RunnerError::Io { path: d.clone(), source: e })?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                let bytes = fs::read(&path)
                    .map_err(|e| RunnerError::Io { path: path.clone(), source: e })?;
                out.insert(rel, bytes);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::preset;

    fn noiseless(mut s: Scenario) -> Scenario {
        s.observe.pixel_sigma = 0.0;
        s.observe.descriptor_flip_rate = 0.0;
        s.link.drop_probability = 0.0;
        s
    }

    #[test]
    fn individual_noiseless_rmse_near_zero() {
        let mut s = noiseless(preset("single-zone").unwrap());
        s.agents[0].length = 80.0;
        let dir = tempfile::tempdir().unwrap();
        let report = run(&s, dir.path()).unwrap();
        let ate = report.agents[0].ate.as_ref().expect("ATE computed");
        assert!(!report.agents[0].tracking_lost);
        assert!(ate.rmse_m < 1e-4, "noiseless RMSE {}", ate.rmse_m);
        assert!(dir.path().join("agent0_trajectory.csv").exists());
        assert!(dir.path().join("table.txt").exists());
    }

    #[test]
    fn run_is_bit_deterministic() {
        let mut s = preset("single-zone").unwrap();
        s.agents[0].length = 60.0;
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        run(&s, da.path()).unwrap();
        run(&s, db.path()).unwrap();
        let a = dir_digest(da.path()).unwrap();
        let b = dir_digest(db.path()).unwrap();
        assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
        for (name, bytes) in &a {
            assert_eq!(bytes, &b[name], "{name} differs between runs");
        }
    }

    #[test]
    fn collaborative_overlap_produces_fusion() {
        let mut s = preset("overlap-pair").unwrap();
        s.agents[0].length = 150.0;
        s.agents[1].length = 120.0;
        let dir = tempfile::tempdir().unwrap();
        let report = run(&s, dir.path()).unwrap();
        assert!(report.map_fusions >= 1, "no fusion event: {report:?}");
        assert_eq!(report.live_maps, Some(1));
        assert!(report.cumulative.is_some());
        for a in &report.agents {
            assert!(a.ate.is_some(), "agent {} has no ATE", a.agent);
        }
        assert!(dir.path().join("registry.json").exists());
        assert!(dir.path().join("snapshot_keyframes.csv").exists());
        assert!(dir.path().join("traffic_agent0_up.csv").exists());
    }

    #[test]
    fn compare_detects_seed_mismatch_and_self_compare() {
        let mut s = preset("single-zone").unwrap();
        s.agents[0].length = 60.0;
        let da = tempfile::tempdir().unwrap();
        run(&s, da.path()).unwrap();
        let self_cmp = compare(da.path(), da.path()).unwrap();
        for row in &self_cmp.rows {
            assert_eq!(row.reduction_percent.unwrap(), 0.0);
        }
        let mut s2 = s.clone();
        s2.seed = 99;
        let db = tempfile::tempdir().unwrap();
        run(&s2, db.path()).unwrap();
        assert!(matches!(
            compare(da.path(), db.path()),
            Err(RunnerError::SeedMismatch { .. })
        ));
    }
}
