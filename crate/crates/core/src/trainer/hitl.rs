//! Simulated annotator: repeatedly labels a few unannotated misclassified pixels with
//! their reference class and trains a fixed number of steps in between.

use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{AnnotationIndex, AnnotationSet, LossBreakdown};
use crate::scene::SceneDataset;
use crate::trainer::metrics::{MetricsLog, MetricsRecord};
use crate::trainer::{evaluate_segmentation, FrameRender, RenderOptions, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HitlConfig {
    pub pretrain_iterations: u64,
    pub clicks_per_round: usize,
    pub steps_per_round: u64,
    pub rounds: u64,
    /// Frames rendered to find errors; defaults to every third training frame.
    pub eval_frames: Option<Vec<usize>>,
    pub seed: u64,
    /// Ends the run at the first evaluation whose mIoU reaches this value.
    pub stop_at: Option<f64>,
}

impl Default for HitlConfig {
    fn default() -> Self {
        Self {
            pretrain_iterations: 2000,
            clicks_per_round: 5,
            steps_per_round: 250,
            rounds: 20,
            eval_frames: None,
            seed: 0,
            stop_at: None,
        }
    }
}

impl HitlConfig {
    /// Pretraining length for full-scale runs.
    pub const FULL_PRETRAIN_ITERATIONS: u64 = 15_000;

    pub fn validate(&self) -> Result<()> {
        if self.clicks_per_round == 0 {
            return Err(Error::Config("clicks per round must be >= 1".into()));
        }
        Ok(())
    }

    pub fn resolve_eval_frames(&self, dataset: &SceneDataset) -> Vec<usize> {
        match &self.eval_frames {
            Some(f) => f.clone(),
            None => dataset.train_frames().into_iter().step_by(3).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitlOutcome {
    pub log: MetricsLog,
    /// True when the simulator ran out of misclassified pixels.
    pub success: bool,
    /// Labels added in each completed round.
    pub clicks: Vec<usize>,
    /// Optimization steps run in each completed round.
    pub steps: Vec<u64>,
}

impl HitlOutcome {
    /// First logged round whose mIoU reaches `threshold` (round 0 is the
    /// post-pretraining evaluation).
    pub fn rounds_to(&self, threshold: f64) -> Option<u64> {
        self.log
            .records
            .iter()
            .find(|r| r.miou.is_some_and(|m| m >= threshold))
            .and_then(|r| r.round)
    }
}

/// Misclassified pixels that carry no annotation yet.
fn misclassified(
    dataset: &SceneDataset,
    frames: &[usize],
    renders: &[FrameRender],
    index: &AnnotationIndex,
) -> Vec<(usize, u32, u32, u16)> {
    let mut out = Vec::new();
    for (&f, r) in frames.iter().zip(renders) {
        let labels = dataset.frames[f].labels.as_ref().expect("checked by evaluation");
        for (i, (&p, &g)) in r.classes.iter().zip(labels).enumerate() {
            let (x, y) = (i as u32 % r.width, i as u32 / r.width);
            if p != g && index.label(f, x, y).is_none() {
                out.push((f, x, y, g));
            }
        }
    }
    out
}

/// Runs the protocol and returns one log record per round, starting with the
/// evaluation right after pretraining. `on_record` sees each record as it is
/// produced.
pub fn run_hitl<F>(
    dataset: &SceneDataset,
    trainer: &mut Trainer,
    annotations: &mut AnnotationSet,
    config: &HitlConfig,
    mut on_record: F,
) -> Result<HitlOutcome>
where
    F: FnMut(&MetricsRecord),
{
    config.validate()?;
    let frames = config.resolve_eval_frames(dataset);
    if frames.is_empty() {
        return Err(Error::Config("no evaluation frames".into()));
    }
    let start = Instant::now();
    let options = RenderOptions::from_config(trainer.config());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut outcome = HitlOutcome {
        log: MetricsLog::default(),
        success: false,
        clicks: Vec::new(),
        steps: Vec::new(),
    };

    let mut index = annotations.index();
    let mut losses = LossBreakdown::default();
    if config.pretrain_iterations > 0 {
        losses = trainer.train(dataset, &index, config.pretrain_iterations, |_, _| Ok(()))?;
    }
    let mut round = 0u64;
    loop {
        let (iou, renders) = evaluate_segmentation(trainer.field(), dataset, &frames, &options)?;
        let record = MetricsRecord {
            round: Some(round),
            iteration: trainer.iteration(),
            labels: annotations.labeled_pixel_count(),
            per_class_iou: iou.per_class.clone(),
            miou: Some(iou.miou),
            psnr: None,
            losses,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_record(&record);
        outcome.log.push(record);
        let reached = config.stop_at.is_some_and(|t| iou.miou >= t);
        if outcome.success || reached || round >= config.rounds {
            break;
        }
        let errors = misclassified(dataset, &frames, &renders, &index);
        if errors.is_empty() {
            outcome.success = true;
            break;
        }
        let picks: Vec<usize> = if errors.len() < config.clicks_per_round {
            outcome.success = true;
            (0..errors.len()).collect()
        } else {
            let mut v = sample_indices(&mut rng, errors.len(), config.clicks_per_round).into_vec();
            v.sort_unstable();
            v
        };
        for &k in &picks {
            let (f, x, y, class) = errors[k];
            annotations.add_stroke(f, class as u32, vec![[x, y]])?;
        }
        index = annotations.index();
        let before = trainer.iteration();
        losses = trainer.train(dataset, &index, config.steps_per_round, |_, _| Ok(()))?;
        outcome.clicks.push(picks.len());
        outcome.steps.push(trainer.iteration() - before);
        round += 1;
    }
    Ok(outcome)
}
