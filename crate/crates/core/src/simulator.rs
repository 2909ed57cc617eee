//! Synthetic pedestrian flows with social grouping.
//!
//! Groups enter through the arena boundary as a Poisson process. Members of a
//! group share one velocity and keep a fixed offset from the group centre
//! plus a small bounded jitter. A pedestrian exits for good once it leaves
//! the unit square. Appearance descriptors mix a group anchor with an
//! individual vector:
//!
//! `f = normalize(ρ·anchor + (1 − ρ)·individual + σ_f·ξ)`
//!
//! where `anchor` and `individual` are random unit vectors and `ξ` is fresh
//! per observation with per-coordinate standard deviation `1/√d_in`, so the
//! noise norm is about `σ_f`. Occlusion deletes observations independently
//! with probability `q`; identities persist through occlusion.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Frame, PedestrianObservation, VideoSequence};
use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub num_frames: usize,
    pub fps: f64,
    /// Inclusive bounds on members per group.
    pub group_size_range: [usize; 2],
    /// Expected new groups per second.
    pub group_rate: f64,
    /// Group speed bounds in arena units per second.
    pub speed_range: [f64; 2],
    /// Heading diffusion, radians per √second.
    pub direction_jitter: f64,
    /// Radius of member offsets around the group centre.
    pub member_spread: f64,
    /// Bound on each coordinate of the per-frame member jitter.
    pub member_jitter: f64,
    pub descriptor_dim: usize,
    /// ρ, weight of the shared group anchor in each descriptor.
    pub group_feature_corr: f64,
    /// σ_f, appearance noise magnitude.
    pub appearance_noise: f64,
    /// q, per-observation deletion probability.
    pub occlusion_dropout: f64,
    /// Simulated time before frame 0 so the arena starts populated.
    pub warmup_secs: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            num_frames: 60,
            fps: 1.0,
            group_size_range: [2, 5],
            group_rate: 0.25,
            speed_range: [0.04, 0.08],
            direction_jitter: 0.05,
            member_spread: 0.04,
            member_jitter: 0.003,
            descriptor_dim: 16,
            group_feature_corr: 0.8,
            appearance_noise: 0.1,
            occlusion_dropout: 0.0,
            warmup_secs: 15.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_frames == 0 {
            return bad("num_frames must be positive".into());
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        let [gmin, gmax] = self.group_size_range;
        if gmin == 0 || gmin > gmax {
            return bad(format!("group_size_range {:?} is empty or contains 0", self.group_size_range));
        }
        let [smin, smax] = self.speed_range;
        if !(smin > 0.0 && smin <= smax && smax.is_finite()) {
            return bad(format!("speed_range {:?} is invalid", self.speed_range));
        }
        if !(self.group_rate >= 0.0 && self.group_rate.is_finite()) {
            return bad(format!("group_rate must be non-negative, got {}", self.group_rate));
        }
        if self.descriptor_dim == 0 {
            return bad("descriptor_dim must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.group_feature_corr) {
            return bad(format!("group_feature_corr must lie in [0,1], got {}", self.group_feature_corr));
        }
        if !(0.0..1.0).contains(&self.occlusion_dropout) {
            return bad(format!("occlusion_dropout must lie in [0,1), got {}", self.occlusion_dropout));
        }
        if self.appearance_noise < 0.0
            || self.direction_jitter < 0.0
            || self.member_spread < 0.0
            || self.member_jitter < 0.0
            || self.warmup_secs < 0.0
        {
            return bad("noise, jitter, spread and warmup must be non-negative".into());
        }
        if 2.0 * (self.member_spread + self.member_jitter) >= 1.0 {
            return bad("member_spread + member_jitter must be below 0.5".into());
        }
        Ok(())
    }

    /// Upper bound on one member's displacement between consecutive frames.
    pub fn max_step(&self) -> f64 {
        self.speed_range[1] / self.fps + 2.0 * self.member_jitter * 2f64.sqrt()
    }
}

/// A group entering at a chosen time and place, for scripted scenarios.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedGroup {
    /// Seconds relative to frame 0; negative times spawn during warm-up.
    pub time: f64,
    pub size: usize,
    /// Starting centre; should lie inside the arena.
    pub centre: [f64; 2],
    pub heading: f64,
    pub speed: f64,
}

struct Member {
    identity: u64,
    offset: [f64; 2],
    base: Vec<f64>,
    alive: bool,
}

struct Group {
    centre: [f64; 2],
    heading: f64,
    speed: f64,
    members: Vec<Member>,
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    spawn_rng: ChaCha8Rng,
    motion_rng: ChaCha8Rng,
    look_rng: ChaCha8Rng,
    occl_rng: ChaCha8Rng,
    groups: Vec<Group>,
    membership: BTreeMap<u64, u64>,
    next_identity: u64,
    next_group: u64,
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn inside(p: [f64; 2]) -> bool {
    (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1])
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a SimConfig) -> Self {
        Self {
            cfg,
            spawn_rng: substream(cfg.seed, "sim.spawn"),
            motion_rng: substream(cfg.seed, "sim.motion"),
            look_rng: substream(cfg.seed, "sim.appearance"),
            occl_rng: substream(cfg.seed, "sim.occlusion"),
            groups: Vec::new(),
            membership: BTreeMap::new(),
            next_identity: 0,
            next_group: 0,
        }
    }

    fn add_group(&mut self, size: usize, centre: [f64; 2], heading: f64, speed: f64) {
        let cfg = self.cfg;
        let rho = cfg.group_feature_corr;
        let anchor = unit_vector(&mut self.look_rng, cfg.descriptor_dim);
        let gid = self.next_group;
        self.next_group += 1;
        let mut members = Vec::with_capacity(size);
        for _ in 0..size {
            let offset = loop {
                let dx = self.spawn_rng.random_range(-1.0..=1.0);
                let dy = self.spawn_rng.random_range(-1.0..=1.0);
                if dx * dx + dy * dy <= 1.0 {
                    break [dx * cfg.member_spread, dy * cfg.member_spread];
                }
            };
            let own = unit_vector(&mut self.look_rng, cfg.descriptor_dim);
            let base = anchor
                .iter()
                .zip(&own)
                .map(|(a, e)| rho * a + (1.0 - rho) * e)
                .collect();
            let identity = self.next_identity;
            self.next_identity += 1;
            self.membership.insert(identity, gid);
            members.push(Member {
                identity,
                offset,
                base,
                alive: true,
            });
        }
        self.groups.push(Group {
            centre,
            heading,
            speed,
            members,
        });
    }

    fn spawn_random(&mut self) {
        let cfg = self.cfg;
        let [gmin, gmax] = cfg.group_size_range;
        let size = self.spawn_rng.random_range(gmin..=gmax);
        let margin = cfg.member_spread + cfg.member_jitter + 1e-6;
        let side = self.spawn_rng.random_range(0..4u8);
        let along = self.spawn_rng.random_range(0.1..0.9);
        // inward normal angles: left, right, bottom, top
        let (centre, normal) = match side {
            0 => ([margin, along], 0.0),
            1 => ([1.0 - margin, along], PI),
            2 => ([along, margin], PI / 2.0),
            _ => ([along, 1.0 - margin], -PI / 2.0),
        };
        let heading = normal + self.spawn_rng.random_range(-PI / 3.0..PI / 3.0);
        let speed = self.spawn_rng.random_range(cfg.speed_range[0]..=cfg.speed_range[1]);
        self.add_group(size, centre, heading, speed);
    }

    fn advance(&mut self, dt: f64) {
        let cfg = self.cfg;
        let turn = Normal::new(0.0, cfg.direction_jitter * dt.sqrt()).expect("finite std");
        for g in &mut self.groups {
            g.heading += turn.sample(&mut self.motion_rng);
            g.centre[0] += g.speed * g.heading.cos() * dt;
            g.centre[1] += g.speed * g.heading.sin() * dt;
        }
    }

    /// Current member positions; members outside the arena exit for good.
    fn positions(&mut self) -> Vec<(usize, usize, [f64; 2])> {
        let j = self.cfg.member_jitter;
        let mut out = Vec::new();
        for (gi, g) in self.groups.iter_mut().enumerate() {
            for (mi, m) in g.members.iter_mut().enumerate() {
                if !m.alive {
                    continue;
                }
                let (jx, jy) = if j > 0.0 {
                    (
                        self.motion_rng.random_range(-j..=j),
                        self.motion_rng.random_range(-j..=j),
                    )
                } else {
                    (0.0, 0.0)
                };
                let p = [g.centre[0] + m.offset[0] + jx, g.centre[1] + m.offset[1] + jy];
                if inside(p) {
                    out.push((gi, mi, p));
                } else {
                    m.alive = false;
                }
            }
        }
        out
    }

    fn observe(&mut self, index: usize, timestamp: f64) -> Frame {
        let cfg = self.cfg;
        let noise_std = cfg.appearance_noise / (cfg.descriptor_dim as f64).sqrt();
        let placed = self.positions();
        let mut observations = Vec::with_capacity(placed.len());
        for (gi, mi, p) in placed {
            let occluded = cfg.occlusion_dropout > 0.0
                && self.occl_rng.random::<f64>() < cfg.occlusion_dropout;
            let m = &self.groups[gi].members[mi];
            let mut f: Vec<f64> = m
                .base
                .iter()
                .map(|b| b + noise_std * self.look_rng.sample::<f64, _>(StandardNormal))
                .collect();
            if occluded {
                continue;
            }
            let n = f.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            f.iter_mut().for_each(|x| *x /= n);
            observations.push(PedestrianObservation {
                identity: Some(m.identity),
                position: p,
                descriptor: Some(f),
            });
        }
        self.groups.retain(|g| g.members.iter().any(|m| m.alive));
        Frame {
            index,
            timestamp,
            observations,
        }
    }

    fn run(mut self, id: String, mut scripted: Vec<ScriptedGroup>) -> VideoSequence {
        let cfg = self.cfg;
        let dt = 1.0 / cfg.fps;
        let warm_steps = (cfg.warmup_secs * cfg.fps).ceil() as usize;
        let spawn_count = Poisson::new(cfg.group_rate * dt).ok();
        scripted.sort_by(|a, b| a.time.total_cmp(&b.time));
        let mut scripted = scripted.into_iter().peekable();
        let mut frames = Vec::with_capacity(cfg.num_frames);
        for step in 0..warm_steps + cfg.num_frames {
            let t = (step as f64 - warm_steps as f64) * dt;
            if step > 0 {
                self.advance(dt);
            }
            while let Some(s) = scripted.next_if(|s| s.time <= t + 1e-12) {
                self.add_group(s.size, s.centre, s.heading, s.speed);
            }
            if let Some(dist) = &spawn_count {
                let k = dist.sample(&mut self.spawn_rng) as usize;
                for _ in 0..k {
                    self.spawn_random();
                }
            }
            if step >= warm_steps {
                let k = step - warm_steps;
                frames.push(self.observe(k, k as f64 * dt));
            } else {
                // keep exits consistent during warm-up
                self.positions();
                self.groups.retain(|g| g.members.iter().any(|m| m.alive));
            }
        }
        VideoSequence {
            id,
            frames,
            fps: Some(cfg.fps),
            groups: Some(self.membership),
        }
    }
}

/// Simulates one sequence. Deterministic in `config.seed`.
pub fn generate(config: &SimConfig) -> Result<VideoSequence> {
    generate_with(config, Vec::new(), format!("sim-{}", config.seed))
}

/// Like [`generate`] with additional groups entering at scripted times.
pub fn generate_with(config: &SimConfig, scripted: Vec<ScriptedGroup>, id: String) -> Result<VideoSequence> {
    config.validate()?;
    Ok(Engine::new(config).run(id, scripted))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DescriptorStats {
    pub within_mean: f64,
    pub between_mean: f64,
    pub within_pairs: usize,
    pub between_pairs: usize,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

/// Mean cosine similarity between distinct pedestrians observed in the same
/// frame, split by whether they belong to the same group.
pub fn descriptor_stats(seq: &VideoSequence) -> Result<DescriptorStats> {
    let groups = seq
        .groups
        .as_ref()
        .ok_or_else(|| Error::Validation(format!("sequence {} has no group metadata", seq.id)))?;
    let lookup: HashMap<u64, u64> = groups.iter().map(|(k, v)| (*k, *v)).collect();
    let (mut ws, mut wn, mut bs, mut bn) = (0.0, 0usize, 0.0, 0usize);
    for frame in &seq.frames {
        let obs: Vec<(u64, &Vec<f64>)> = frame
            .observations
            .iter()
            .filter_map(|o| {
                let id = o.identity?;
                let g = *lookup.get(&id)?;
                Some((g, o.descriptor.as_ref()?))
            })
            .collect();
        for a in 0..obs.len() {
            for b in a + 1..obs.len() {
                let c = cosine(obs[a].1, obs[b].1);
                if obs[a].0 == obs[b].0 {
                    ws += c;
                    wn += 1;
                } else {
                    bs += c;
                    bn += 1;
                }
            }
        }
    }
    if wn == 0 || bn == 0 {
        return Err(Error::Validation(format!(
            "sequence {} has no within-group or no between-group pairs",
            seq.id
        )));
    }
    Ok(DescriptorStats {
        within_mean: ws / wn as f64,
        between_mean: bs / bn as f64,
        within_pairs: wn,
        between_pairs: bn,
    })
}
