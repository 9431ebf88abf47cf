use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use vpnpp::syndata::{gen_dataset, short_hash, DatasetManifest, MANIFEST_FILE};
use vpnpp::trainer::{
    attention_maps, bench_inference, evaluate, select_path, train, BenchModels, Checkpoint, Recipe, TrainConfig,
    TrainingData,
};

use crate::error::{CliError, CliResult};
use crate::experiment::{ExperimentConfig, Layout};
use crate::heatmap;

pub const ALPHA_GRID: [f64; 6] = [0.0, 1.0, 10.0, 50.0, 75.0, 100.0];
pub const BETA_GRID: [f64; 6] = ALPHA_GRID;
pub const POSE_QUALITY_LEVELS: [f64; 3] = [0.0, 0.5, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Grid {
    Alpha,
    Beta,
}

impl Grid {
    fn name(self) -> &'static str {
        match self {
            Grid::Alpha => "alpha",
            Grid::Beta => "beta",
        }
    }
}

pub struct Context {
    pub exp: ExperimentConfig,
    pub layout: Layout,
    pub force: bool,
    pub threads: usize,
}

fn skip(path: &Path) {
    eprintln!("skip: {} exists (pass --force to rebuild)", path.display());
}

fn write_text(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable report") + "\n"
}

impl Context {
    fn fresh(&self, path: &Path) -> bool {
        if path.exists() && !self.force {
            skip(path);
            return false;
        }
        true
    }

    pub fn gen(&self) -> CliResult {
        let dir = self.layout.data_dir(&self.exp.gen);
        if !self.fresh(&dir.join(MANIFEST_FILE)) {
            return Ok(());
        }
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| CliError::Data(format!("cannot clear {}: {e}", dir.display())))?;
        }
        let m = gen_dataset(&self.exp.gen, &dir)?;
        println!("wrote {} samples to {}", m.samples.len(), dir.display());
        Ok(())
    }

    fn load_data(&self) -> CliResult<TrainingData> {
        let dir = self.layout.data_dir(&self.exp.gen);
        if !dir.join(MANIFEST_FILE).exists() {
            return Err(CliError::MissingDependency(format!(
                "dataset {} not found; run `vpnpp gen` first",
                dir.display()
            )));
        }
        Ok(TrainingData::from_manifest(&DatasetManifest::load(&dir)?)?)
    }

    /// Trains `cfg` into `layout` unless its checkpoint already exists.
    fn ensure_run(
        &self,
        layout: &Layout,
        data: &TrainingData,
        cfg: &TrainConfig,
        teacher: Option<(&TrainConfig, &Checkpoint)>,
    ) -> CliResult<Checkpoint> {
        let id = Layout::run_id(cfg, &self.exp.gen, teacher.map(|t| t.0));
        let path = layout.checkpoint(cfg.recipe, &id);
        if !self.fresh(&path) {
            return Ok(Checkpoint::load(&path)?);
        }
        let (ckpt, report) = train(cfg, data, teacher.map(|t| t.1))?;
        write_text(&layout.artifact(cfg.recipe, &id, "train.csv"), &report.to_csv())?;
        ckpt.save(&path)?;
        println!(
            "trained {} -> {} (test top-1 {})",
            cfg.recipe,
            path.display(),
            report.final_test_acc().map_or("n/a".into(), |a| format!("{a:.4}"))
        );
        Ok(ckpt)
    }

    /// Checkpoint of a run that must already exist.
    fn require(&self, cfg: &TrainConfig, teacher: Option<&TrainConfig>) -> CliResult<(Checkpoint, String)> {
        let id = Layout::run_id(cfg, &self.exp.gen, teacher);
        let path = self.layout.checkpoint(cfg.recipe, &id);
        if !path.exists() {
            return Err(CliError::MissingDependency(format!(
                "{} checkpoint {} not found; run `vpnpp train --recipe {}` first",
                cfg.recipe,
                path.display(),
                cfg.recipe
            )));
        }
        Ok((Checkpoint::load(&path)?, id))
    }

    fn require_recipe(&self, recipe: Recipe) -> CliResult<(Checkpoint, String)> {
        let cfg = self.exp.train_config(recipe)?;
        let teacher = self.teacher_config(&cfg)?;
        self.require(&cfg, teacher.as_ref())
    }

    fn teacher_config(&self, cfg: &TrainConfig) -> CliResult<Option<TrainConfig>> {
        if cfg.recipe.needs_pose_teacher() {
            Ok(Some(self.exp.teacher_config_for(cfg)?))
        } else {
            Ok(None)
        }
    }

    pub fn train(&self, recipe: Recipe) -> CliResult {
        let cfg = self.exp.train_config(recipe)?;
        let teacher_cfg = self.teacher_config(&cfg)?;
        let teacher = match &teacher_cfg {
            Some(t) => Some(self.require(t, None)?.0),
            None => None,
        };
        let data = self.load_data()?;
        let pair = teacher_cfg.as_ref().zip(teacher.as_ref());
        self.ensure_run(&self.layout, &data, &cfg, pair)?;
        Ok(())
    }

    pub fn eval(&self, recipe: Recipe, pose_inputs: bool) -> CliResult {
        let (ckpt, id) = self.require_recipe(recipe)?;
        let pose_inputs = pose_inputs || !recipe.has_student();
        let tag = if pose_inputs { "eval-pose" } else { "eval" };
        let out = self.layout.artifact(recipe, &id, &format!("{tag}.csv"));
        if !self.fresh(&out) {
            return Ok(());
        }
        let path = select_path(&ckpt, pose_inputs)?;
        let data = self.load_data()?;
        let m = evaluate(&ckpt, &data, pose_inputs)?;
        let mut per_class = String::from("class,accuracy\n");
        for (c, a) in m.per_class.iter().enumerate() {
            writeln!(per_class, "{c},{a:.6}").unwrap();
        }
        write_text(&self.layout.artifact(recipe, &id, &format!("{tag}-per-class.csv")), &per_class)?;
        write_text(&self.layout.artifact(recipe, &id, &format!("{tag}-confusion.csv")), &m.confusion_csv())?;
        if self.exp.json_reports() {
            write_text(&self.layout.artifact(recipe, &id, &format!("{tag}.json")), &to_json(&m))?;
        }
        let summary = format!(
            "recipe,path,pose_inputs,top1,mean_latency_s\n{recipe},{},{pose_inputs},{:.6},{:.9}\n",
            path.as_str(),
            m.top1,
            m.mean_latency_s
        );
        write_text(&out, &summary)?;
        println!("{recipe} ({}) top-1 {:.4} -> {}", path.as_str(), m.top1, out.display());
        Ok(())
    }

    pub fn bench(&self, clips: usize, repeats: usize) -> CliResult {
        let (student, sid) = self.require_recipe(Recipe::VpnPp)?;
        let (pose, pid) = self.require_recipe(Recipe::PoseTeacher)?;
        let vpn = self.require_recipe(Recipe::VpnTeacher).ok();
        let vid = vpn.as_ref().map_or("-", |v| v.1.as_str());
        let id = short_hash(format!("{sid}|{pid}|{vid}|{clips}|{repeats}").as_bytes());
        let out = self.layout.root.join(format!("bench-{id}.csv"));
        if !self.fresh(&out) {
            return Ok(());
        }
        let data = self.load_data()?;
        let models = BenchModels {
            student: Some(&student),
            pose_teacher: Some(&pose),
            // Without a separate VPN teacher run, time the VPN* trained alongside the student.
            vpn_teacher: Some(vpn.as_ref().map_or(&student, |v| &v.0)),
        };
        let report = bench_inference(models, &data, clips, repeats, 1)?;
        if self.exp.json_reports() {
            write_text(&self.layout.root.join(format!("bench-{id}.json")), &to_json(&report))?;
        }
        write_text(&out, &report.to_csv())?;
        for e in &report.entries {
            println!(
                "{:<14} {:>10.3} ms ± {:>7.3}  top-1 {:.4}",
                e.path,
                e.mean_latency_s * 1e3,
                e.std_latency_s * 1e3,
                e.accuracy
            );
        }
        println!("-> {}", out.display());
        Ok(())
    }

    /// Runs `f(0..n)` on up to `threads` worker threads; results keep index order.
    fn parallel<T: Send>(&self, n: usize, f: impl Fn(usize) -> CliResult<T> + Sync) -> CliResult<Vec<T>> {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<CliResult<T>>>> = Mutex::new((0..n).map(|_| None).collect());
        std::thread::scope(|s| {
            for _ in 0..self.threads.clamp(1, n.max(1)) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= n {
                        break;
                    }
                    let r = f(i);
                    slots.lock().unwrap()[i] = Some(r);
                });
            }
        });
        slots
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|r| r.expect("every index ran"))
            .collect()
    }

    pub fn ablate_grid(&self, grid: Grid) -> CliResult {
        let recipe = match grid {
            Grid::Alpha => Recipe::VpnF,
            Grid::Beta => Recipe::VpnA,
        };
        let values = match grid {
            Grid::Alpha => ALPHA_GRID,
            Grid::Beta => BETA_GRID,
        };
        let base = self.exp.train_config(recipe)?;
        let teacher_cfg = self.teacher_config(&base)?;
        let teacher = match &teacher_cfg {
            Some(t) => Some(self.require(t, None)?.0),
            None => None,
        };
        let id = short_hash(format!("{}|{}|{}", grid.name(), Layout::run_id(&base, &self.exp.gen, teacher_cfg.as_ref()), values.len()).as_bytes());
        let out = self.layout.root.join(format!("ablate-{}-{id}.csv", grid.name()));
        if !self.fresh(&out) {
            return Ok(());
        }
        let data = self.load_data()?;
        let sub = self.layout.sub(&format!("ablate-{}-{id}", grid.name()));
        let pair = teacher_cfg.as_ref().zip(teacher.as_ref());
        let accs = self.parallel(values.len(), |i| {
            let mut cfg = base.clone();
            match grid {
                Grid::Alpha => cfg.alpha = values[i],
                Grid::Beta => cfg.beta = values[i],
            }
            let ckpt = self.ensure_run(&sub, &data, &cfg, pair)?;
            Ok(evaluate(&ckpt, &data, false)?.top1)
        })?;
        let mut csv = format!("{},top1\n", grid.name());
        for (v, a) in values.iter().zip(&accs) {
            writeln!(csv, "{v},{a:.6}").unwrap();
        }
        write_text(&out, &csv)?;
        print!("{csv}");
        println!("-> {}", out.display());
        Ok(())
    }

    pub fn ablate_pose_quality(&self) -> CliResult {
        let base_t = self.exp.train_config(Recipe::PoseTeacher)?;
        let base_s = self.exp.train_config(Recipe::VpnPp)?;
        let id = short_hash(
            format!(
                "pose-quality|{}|{}|{:?}",
                Layout::run_id(&base_t, &self.exp.gen, None),
                Layout::run_id(&base_s, &self.exp.gen, None),
                POSE_QUALITY_LEVELS
            )
            .as_bytes(),
        );
        let out = self.layout.root.join(format!("ablate-pose-quality-{id}.csv"));
        if !self.fresh(&out) {
            return Ok(());
        }
        let data = self.load_data()?;
        let sub = self.layout.sub(&format!("ablate-pose-quality-{id}"));
        let rows = self.parallel(POSE_QUALITY_LEVELS.len(), |i| {
            let level = POSE_QUALITY_LEVELS[i];
            let mut t = base_t.clone();
            t.pose_corruption = level;
            let mut s = base_s.clone();
            s.pose_corruption = level;
            let teacher = self.ensure_run(&sub, &data, &t, None)?;
            let student = self.ensure_run(&sub, &data, &s, Some((&t, &teacher)))?;
            Ok((
                evaluate(&teacher, &data, true)?.top1,
                evaluate(&student, &data, false)?.top1,
            ))
        })?;
        let mut csv = String::from("level,pose_teacher,vpn_pp\n");
        for (level, (t, s)) in POSE_QUALITY_LEVELS.iter().zip(&rows) {
            writeln!(csv, "{level},{t:.6},{s:.6}").unwrap();
        }
        write_text(&out, &csv)?;
        print!("{csv}");
        println!("-> {}", out.display());
        Ok(())
    }

    pub fn dump_attention(&self, recipe: Recipe, count: usize) -> CliResult {
        let (ckpt, id) = self.require_recipe(recipe)?;
        let dir = self.layout.artifact(recipe, &id, "attention");
        if !self.fresh(&dir) {
            return Ok(());
        }
        let data = self.load_data()?;
        let maps = attention_maps(&ckpt, &data, count)?;
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
        let mut written = 0;
        for m in &maps {
            for (kind, map) in [("teacher", &m.teacher), ("student", &m.student)] {
                if let Some(map) = map {
                    let (w, h, px) = heatmap::grid(map);
                    heatmap::write_pgm(&dir.join(format!("{}-{kind}.pgm", m.sample_id)), w, h, &px)?;
                    written += 1;
                }
            }
        }
        println!("wrote {written} heatmaps to {}", dir.display());
        Ok(())
    }
}
