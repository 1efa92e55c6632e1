//! Mixed-modality batch sampling and evaluation splits.
//!
//! A training batch never holds two frames of one pose group, so the model
//! cannot match an RGB frame against its thermal twin. The thermal fraction
//! `τ` is drawn uniformly per batch and the batch is cut into equal-length
//! sequences whose count is drawn from the divisors of the batch size.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::manifest::{FrameRecord, SceneManifest};
use crate::error::{Error, Result};
use crate::modality::Modality;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub frame_ids: Vec<String>,
    pub modalities: Vec<Modality>,
    pub pose_groups: Vec<String>,
    /// Realized thermal fraction.
    pub tau: f64,
    /// The `τ` drawn before rounding to a frame count.
    pub sampled_tau: f64,
    /// Lengths of the contiguous sequences the batch is cut into.
    pub sequence_lengths: Vec<usize>,
}

impl BatchSpec {
    pub fn len(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }

    pub fn thermal_count(&self) -> usize {
        self.modalities.iter().filter(|&&m| m == Modality::Thermal).count()
    }

    /// Pose groups that occur more than once (always empty for valid batches).
    pub fn shared_pose_groups(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut dup = BTreeSet::new();
        for g in &self.pose_groups {
            if !seen.insert(g) {
                dup.insert(g.clone());
            }
        }
        dup.into_iter().collect()
    }
}

/// Sequence counts allowed for a batch: divisors `d` of the batch size
/// leaving sequences of even length. For 24 this is {1, 2, 3, 4, 6, 12}.
pub fn partition_counts(batch_size: usize) -> Vec<usize> {
    let out: Vec<usize> = (1..=batch_size).filter(|d| batch_size % d == 0 && (batch_size / d) % 2 == 0).collect();
    if out.is_empty() {
        vec![1]
    } else {
        out
    }
}

/// Nearest-integer thermal count for a thermal fraction.
pub fn thermal_count(tau: f64, batch_size: usize) -> usize {
    ((tau * batch_size as f64).round() as usize).min(batch_size)
}

/// How the thermal fraction of a batch is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TauSource {
    Uniform,
    Fixed(f64),
}

pub fn sample_batch(scene: &SceneManifest, batch_size: usize, rng: &mut impl Rng) -> Result<BatchSpec> {
    sample_batch_with(scene, batch_size, TauSource::Uniform, None, rng)
}

/// Samples a batch. `partitions` restricts the allowed sequence counts
/// (default: [`partition_counts`]).
pub fn sample_batch_with(
    scene: &SceneManifest,
    batch_size: usize,
    tau: TauSource,
    partitions: Option<&[usize]>,
    rng: &mut impl Rng,
) -> Result<BatchSpec> {
    if batch_size == 0 {
        return Err(Error::Sampling("batch size must be positive".into()));
    }
    let groups = scene.pose_groups();
    if groups.len() < batch_size {
        return Err(Error::Sampling(format!(
            "scene {} has {} pose groups, batch needs {batch_size}",
            scene.scene,
            groups.len()
        )));
    }
    let sampled_tau = match tau {
        TauSource::Uniform => rng.gen::<f64>(),
        TauSource::Fixed(t) => t.clamp(0.0, 1.0),
    };
    let n_thermal = thermal_count(sampled_tau, batch_size);
    let n_rgb = batch_size - n_thermal;

    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(rng);
    let has = |gi: usize, m: Modality| groups[gi].1.iter().find(|f| f.modality == m).copied();
    // groups offering only one modality are spent on that modality first so
    // the greedy pass does not strand them
    order.sort_by_key(|&gi| {
        let both = has(gi, Modality::Rgb).is_some() && has(gi, Modality::Thermal).is_some();
        both as u8
    });
    let mut picked: Vec<&FrameRecord> = Vec::with_capacity(batch_size);
    let mut used = vec![false; groups.len()];
    for (modality, need) in [(Modality::Thermal, n_thermal), (Modality::Rgb, n_rgb)] {
        let mut got = 0;
        for &gi in &order {
            if got == need {
                break;
            }
            if used[gi] {
                continue;
            }
            if let Some(f) = has(gi, modality) {
                used[gi] = true;
                picked.push(f);
                got += 1;
            }
        }
        if got < need {
            return Err(Error::Sampling(format!(
                "scene {} cannot supply {need} {modality} frames from distinct pose groups",
                scene.scene
            )));
        }
    }
    picked.shuffle(rng);

    let counts = match partitions {
        Some(p) => {
            if p.is_empty() || p.iter().any(|&c| c == 0 || batch_size % c != 0) {
                return Err(Error::Sampling(format!("partition counts {p:?} do not divide {batch_size}")));
            }
            p.to_vec()
        }
        None => partition_counts(batch_size),
    };
    let parts = counts[rng.gen_range(0..counts.len())];
    Ok(BatchSpec {
        frame_ids: picked.iter().map(|f| f.id.clone()).collect(),
        modalities: picked.iter().map(|f| f.modality).collect(),
        pose_groups: picked.iter().map(|f| f.pose_group.clone()).collect(),
        tau: n_thermal as f64 / batch_size as f64,
        sampled_tau,
        sequence_lengths: vec![batch_size / parts; parts],
    })
}

fn spec_from(frames: Vec<&FrameRecord>) -> BatchSpec {
    let n = frames.len();
    let thermal = frames.iter().filter(|f| f.modality == Modality::Thermal).count();
    let tau = if n == 0 { 0.0 } else { thermal as f64 / n as f64 };
    BatchSpec {
        frame_ids: frames.iter().map(|f| f.id.clone()).collect(),
        modalities: frames.iter().map(|f| f.modality).collect(),
        pose_groups: frames.iter().map(|f| f.pose_group.clone()).collect(),
        tau,
        sampled_tau: tau,
        sequence_lengths: vec![n],
    }
}

fn frame_of<'a>(frames: &[&'a FrameRecord], m: Modality) -> Option<&'a FrameRecord> {
    frames.iter().find(|f| f.modality == m).copied()
}

/// The two evaluation runs of a scene, each a single sequence.
///
/// Scenes tagged with exactly two trajectories pair RGB of one trajectory
/// with thermal of the other, then swap. Otherwise every pose group must
/// hold both modalities: groups are split into partitions A and B
/// (`round(τ·N)` groups in B, spread evenly along the capture order), run 1
/// takes RGB from A and thermal from B, run 2 the opposite.
pub fn eval_split(scene: &SceneManifest, tau: f64) -> Result<[BatchSpec; 2]> {
    let groups = scene.pose_groups();
    let trajectories: BTreeSet<&str> = scene.frames.iter().filter_map(|f| f.trajectory.as_deref()).collect();
    let all_tagged = scene.frames.iter().all(|f| f.trajectory.is_some());
    if all_tagged && trajectories.len() == 2 {
        let names: Vec<&str> = trajectories.into_iter().collect();
        let in_traj = |name: &str, m: Modality| -> Vec<&FrameRecord> {
            scene.frames.iter().filter(|f| f.trajectory.as_deref() == Some(name) && f.modality == m).collect()
        };
        fn interleave<'a>(a: Vec<&'a FrameRecord>, b: Vec<&'a FrameRecord>) -> Vec<&'a FrameRecord> {
            let mut out = Vec::with_capacity(a.len() + b.len());
            for i in 0..a.len().max(b.len()) {
                out.extend(a.get(i).copied());
                out.extend(b.get(i).copied());
            }
            out
        }
        let run1 = interleave(in_traj(names[0], Modality::Rgb), in_traj(names[1], Modality::Thermal));
        let run2 = interleave(in_traj(names[0], Modality::Thermal), in_traj(names[1], Modality::Rgb));
        if run1.is_empty() || run2.is_empty() {
            return Err(Error::Split(format!("scene {}: a trajectory lacks one modality", scene.scene)));
        }
        return Ok([spec_from(run1), spec_from(run2)]);
    }
    if !scene.is_paired() {
        return Err(Error::Split(format!(
            "scene {} is neither fully paired nor tagged with two trajectories",
            scene.scene
        )));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Split(format!("tau {tau} outside [0, 1]")));
    }
    let mut run1 = Vec::with_capacity(groups.len());
    let mut run2 = Vec::with_capacity(groups.len());
    for (i, (_, frames)) in groups.iter().enumerate() {
        let in_b = ((i + 1) as f64 * tau).round() > (i as f64 * tau).round();
        let (first, second) = if in_b { (Modality::Thermal, Modality::Rgb) } else { (Modality::Rgb, Modality::Thermal) };
        run1.push(frame_of(frames, first).expect("paired group"));
        run2.push(frame_of(frames, second).expect("paired group"));
    }
    Ok([spec_from(run1), spec_from(run2)])
}

/// One evaluation sequence over every pose group of the scene with a random
/// `round(τ·N)` of them shown in thermal (the τ-sweep protocol). Groups
/// lacking the drawn modality fall back to the other one.
pub fn sweep_split(scene: &SceneManifest, tau: f64, rng: &mut impl Rng) -> Result<BatchSpec> {
    let groups = scene.pose_groups();
    if groups.is_empty() {
        return Err(Error::Split(format!("scene {} has no frames", scene.scene)));
    }
    let n_thermal = thermal_count(tau, groups.len());
    let mut idx: Vec<usize> = (0..groups.len()).collect();
    idx.shuffle(rng);
    let thermal: BTreeSet<usize> = idx.into_iter().take(n_thermal).collect();
    let frames = groups
        .iter()
        .enumerate()
        .map(|(i, (_, fs))| {
            let want = if thermal.contains(&i) { Modality::Thermal } else { Modality::Rgb };
            frame_of(fs, want).or_else(|| frame_of(fs, want.other())).expect("group has a frame")
        })
        .collect();
    Ok(spec_from(frames))
}
