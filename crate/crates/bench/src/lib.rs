//! Fixtures for the inference benchmarks: default-sized models trained for a
//! single epoch on a small dataset. Weights barely matter for timing.

use vpnpp::syndata::GenConfig;
use vpnpp::trainer::{batch_scores, crop_offsets, train, Checkpoint, ModelPath, Recipe, TrainConfig, TrainingData};
use vpnpp::Result;

pub struct Fixture {
    pub data: TrainingData,
    pub pose_teacher: Checkpoint,
    /// VPN++ run; carries both the student and its VPN* teacher.
    pub vpn_pp: Checkpoint,
}

fn one_epoch(recipe: Recipe) -> TrainConfig {
    let mut c = TrainConfig::for_recipe(recipe);
    c.epochs = 1;
    c
}

impl Fixture {
    pub fn new() -> Result<Self> {
        let gen = GenConfig {
            samples_per_class: 2,
            test_samples_per_class: 1,
            ..Default::default()
        };
        let data = TrainingData::generate(&gen)?;
        let pose_teacher = train(&one_epoch(Recipe::PoseTeacher), &data, None)?.0;
        let vpn_pp = train(&one_epoch(Recipe::VpnPp), &data, Some(&pose_teacher))?.0;
        Ok(Self { data, pose_teacher, vpn_pp })
    }

    fn checkpoint(&self, path: ModelPath) -> &Checkpoint {
        match path {
            ModelPath::PoseTeacher => &self.pose_teacher,
            _ => &self.vpn_pp,
        }
    }

    /// Scores one test clip on `path`, crops included, inputs already cached.
    pub fn score_one(&self, path: ModelPath) -> Result<f64> {
        let ck = self.checkpoint(path);
        let params = &ck.network(path.network())?.params;
        let s = batch_scores(
            &ck.config.model,
            params,
            path,
            &[&self.data.test[0]],
            &self.data.adjacency,
            &self.data.clip_norm,
            &crop_offsets(ck.config.shift),
        )?;
        Ok(s[[0, 0]])
    }
}
