//! Optimizers, the training loop and the sweep drivers.

mod report;
mod task;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use report::{accuracy, macro_f1, write_csv, write_jsonl, CellReport, MetricsRecord, CSV_HEADER};
pub use task::{Example, SyntheticTask, TaskData, TaskKind};

use crate::adapters::{AdapterSpec, LayerScope, Method, Projection};
use crate::error::{Error, Result};
use crate::model::ops::cross_entropy;
use crate::model::{Gradients, TransformerModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    /// Step size for adapter runs (adapter trainables and head).
    pub learning_rate: f64,
    /// Step size for full fine-tuning and for the warm-up phase.
    pub full_ft_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled decay, applied as `p ← p − lr·wd·p` before each update.
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Only the first `train_cap` training examples are used.
    pub train_cap: usize,
    pub seed: u64,
    /// Full fine-tuning epochs run before the adapters are injected.
    pub warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            full_ft_learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            epochs: 3,
            batch_size: 32,
            train_cap: 10_000,
            seed: 0,
            warmup_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.learning_rate) || !positive(self.full_ft_learning_rate) {
            return bad("learning rates must be positive and finite");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !positive(self.epsilon) {
            return bad("epsilon must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.train_cap < self.batch_size {
            return bad("train_cap must be at least batch_size");
        }
        Ok(())
    }
}

/// SGD or Adam over the model's trainables in canonical order.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: &TrainConfig, lr: f64) -> Self {
        Self {
            kind: config.optimizer,
            lr,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            weight_decay: config.weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut TransformerModel, grads: &Gradients) -> Result<()> {
        let params = model.trainables_mut();
        if params.len() != grads.entries.len() {
            return Err(Error::InvalidDimensions(format!(
                "{} gradient tensors for {} trainables",
                grads.entries.len(),
                params.len()
            )));
        }
        if self.m.is_empty() {
            self.m = grads.entries.iter().map(|(_, g)| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, ((name, p), (gname, g))) in params.into_iter().zip(&grads.entries).enumerate() {
            if &name != gname || p.len() != g.len() {
                return Err(Error::InvalidDimensions(format!("gradient `{gname}` does not match `{name}`")));
            }
            for (i, (w, &gi)) in p.iter_mut().zip(g).enumerate() {
                *w -= self.lr * self.weight_decay * *w;
                match self.kind {
                    OptimizerKind::Sgd => *w -= self.lr * gi,
                    OptimizerKind::Adam => {
                        let m = &mut self.m[k][i];
                        let v = &mut self.v[k][i];
                        *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                        *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                        *w -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

/// A finished run: the adapted model and its evaluation.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: TransformerModel,
    pub record: MetricsRecord,
    pub steps: usize,
}

const EVAL_BATCH: usize = 256;

/// Class predictions for `examples`.
pub fn predict(model: &TransformerModel, examples: &[Example]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_BATCH) {
        let batch: Vec<Vec<usize>> = chunk.iter().map(|e| e.0.clone()).collect();
        let logits = model.predict(&batch)?;
        for i in 0..logits.rows() {
            let row = logits.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            out.push(best);
        }
    }
    Ok(out)
}

fn run_epochs(
    model: &mut TransformerModel,
    data: &[Example],
    epochs: usize,
    config: &TrainConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
    step: &mut usize,
) -> Result<()> {
    let mut opt = Optimizer::new(config, lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| data[i].0.clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data[i].1).collect();
            let out = model.forward(&batch)?;
            let (loss, dlogits) = cross_entropy(&out.logits, &labels);
            if !loss.is_finite() {
                return Err(Error::Divergence { step: *step, loss });
            }
            let grads = model.backward(&out.cache, &dlogits)?;
            if !grads.is_finite() {
                return Err(Error::Divergence { step: *step, loss });
            }
            opt.step(model, &grads)?;
            *step += 1;
            if model.trainables_mut().iter().any(|(_, t)| t.iter().any(|v| !v.is_finite())) {
                return Err(Error::Divergence { step: *step, loss });
            }
        }
    }
    Ok(())
}

fn check_compatible(model: &TransformerModel, task: &SyntheticTask) -> Result<()> {
    let c = model.config();
    if c.n_classes != task.n_classes || c.vocab_size < task.vocab_size || c.max_seq_len < task.seq_len {
        return Err(Error::InvalidConfig(format!(
            "model (vocab {}, max_seq_len {}, classes {}) cannot run task (vocab {}, seq_len {}, classes {})",
            c.vocab_size, c.max_seq_len, c.n_classes, task.vocab_size, task.seq_len, task.n_classes
        )));
    }
    if model.spec().is_some() {
        return Err(Error::InvalidConfig("template model must not carry a spec".into()));
    }
    Ok(())
}

/// Trains a copy of `template` under `spec` on pre-generated `data`.
///
/// With `warmup_epochs > 0` the whole model is first fine-tuned at
/// `full_ft_learning_rate`, then `spec` is injected into the result.
/// Every random choice derives from `config.seed`, `task.seed` and the
/// model seed.
pub fn train_on(
    template: &TransformerModel,
    spec: &AdapterSpec,
    task: &SyntheticTask,
    data: &TaskData,
    config: &TrainConfig,
) -> Result<Trained> {
    config.validate()?;
    check_compatible(template, task)?;
    let start = Instant::now();
    let subset = &data.train[..config.train_cap.min(data.train.len())];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut steps = 0;

    let mut model = template.clone();
    if config.warmup_epochs > 0 {
        model = model.inject_adapters(&AdapterSpec::full_ft())?;
        run_epochs(
            &mut model,
            subset,
            config.warmup_epochs,
            config,
            config.full_ft_learning_rate,
            &mut rng,
            &mut steps,
        )?;
    }
    let mut model = model.inject_adapters(spec)?;
    let lr = match spec.method {
        Method::FullFt => config.full_ft_learning_rate,
        _ => config.learning_rate,
    };
    run_epochs(&mut model, subset, config.epochs, config, lr, &mut rng, &mut steps)?;

    let truth: Vec<usize> = data.eval.iter().map(|e| e.1).collect();
    let pred = predict(&model, &data.eval)?;
    let acc = accuracy(&pred, &truth);
    let (matched, mismatched) = match &data.mismatched {
        Some(mm) => {
            let t: Vec<usize> = mm.iter().map(|e| e.1).collect();
            (Some(acc), Some(accuracy(&predict(&model, mm)?, &t)))
        }
        None => (None, None),
    };
    let record = MetricsRecord {
        task: task.kind.to_string(),
        method: spec.method,
        spec: spec.label(),
        trainable_count: model.adapter_trainable_count(),
        head_count: model.head_count(),
        accuracy: acc,
        f1: macro_f1(&pred, &truth, task.n_classes),
        matched_accuracy: matched,
        mismatched_accuracy: mismatched,
        seed: config.seed,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok(Trained { model, record, steps })
}

/// Generates the task data and trains once.
pub fn train(
    template: &TransformerModel,
    spec: &AdapterSpec,
    task: &SyntheticTask,
    config: &TrainConfig,
) -> Result<MetricsRecord> {
    let data = task.generate()?;
    Ok(train_on(template, spec, task, &data, config)?.record)
}

/// One independent job of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub spec: AdapterSpec,
    pub config: TrainConfig,
}

/// Runs every cell on a pool of at most `threads` workers (`None`: rayon's
/// default). Reports come back in cell order; a failing cell yields an
/// `Err` outcome and does not stop the others.
pub fn run_cells(
    template: &TransformerModel,
    task: &SyntheticTask,
    data: &TaskData,
    cells: &[Cell],
    threads: Option<usize>,
) -> Result<Vec<CellReport>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    Ok(pool.install(|| {
        cells
            .par_iter()
            .map(|cell| CellReport {
                task: task.kind.to_string(),
                spec: cell.spec.clone(),
                seed: cell.config.seed,
                outcome: train_on(template, &cell.spec, task, data, &cell.config)
                    .map(|t| t.record)
                    .map_err(|e| e.to_string()),
            })
            .collect()
    }))
}

/// One cell per `τ`, each a copy of `base` with its policy threshold replaced.
pub fn tau_cells(base: &AdapterSpec, taus: &[f64], config: &TrainConfig) -> Result<Vec<Cell>> {
    if base.method != Method::QrLora {
        return Err(Error::InvalidSpec("a tau sweep needs a qr_lora spec".into()));
    }
    taus.iter()
        .map(|&t| {
            Ok(Cell {
                spec: AdapterSpec {
                    policy: base.policy.with_tau(t)?,
                    ..base.clone()
                },
                config: config.clone(),
            })
        })
        .collect()
}

/// One cell per `(size, spec)`, size-major. `size` replaces `train_cap`, so
/// smaller subsets are prefixes of larger ones.
pub fn size_cells(sizes: &[usize], specs: &[AdapterSpec], config: &TrainConfig, n_train: usize) -> Result<Vec<Cell>> {
    if let Some(&s) = sizes.iter().find(|&&s| s > n_train || s == 0) {
        return Err(Error::InvalidConfig(format!("size {s} outside 1..={n_train}")));
    }
    Ok(sizes
        .iter()
        .flat_map(|&size| {
            specs.iter().map(move |spec| Cell {
                spec: spec.clone(),
                config: TrainConfig {
                    train_cap: size,
                    batch_size: config.batch_size.min(size),
                    ..config.clone()
                },
            })
        })
        .collect())
}

/// The layer × projection grid: `{last:4, all} × {o, q;v, q;v;o}`,
/// scope-major.
pub fn scope_cells(base: &AdapterSpec, config: &TrainConfig) -> Vec<Cell> {
    use Projection::{O, Q, V};
    let projection_sets: [&[Projection]; 3] = [&[O], &[Q, V], &[Q, V, O]];
    [LayerScope::Last(4), LayerScope::All]
        .into_iter()
        .flat_map(|scope| {
            projection_sets.iter().map(move |ps| Cell {
                spec: AdapterSpec {
                    layer_scope: scope.clone(),
                    projections: ps.iter().copied().collect(),
                    ..base.clone()
                },
                config: config.clone(),
            })
        })
        .collect()
}

pub fn sweep_tau(
    template: &TransformerModel,
    task: &SyntheticTask,
    data: &TaskData,
    taus: &[f64],
    base: &AdapterSpec,
    config: &TrainConfig,
    threads: Option<usize>,
) -> Result<Vec<CellReport>> {
    run_cells(template, task, data, &tau_cells(base, taus, config)?, threads)
}

pub fn sweep_size(
    template: &TransformerModel,
    task: &SyntheticTask,
    data: &TaskData,
    sizes: &[usize],
    specs: &[AdapterSpec],
    config: &TrainConfig,
    threads: Option<usize>,
) -> Result<Vec<CellReport>> {
    let cells = size_cells(sizes, specs, config, data.train.len())?;
    run_cells(template, task, data, &cells, threads)
}

pub fn sweep_scope(
    template: &TransformerModel,
    task: &SyntheticTask,
    data: &TaskData,
    base: &AdapterSpec,
    config: &TrainConfig,
    threads: Option<usize>,
) -> Result<Vec<CellReport>> {
    run_cells(template, task, data, &scope_cells(base, config), threads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TinyTransformerConfig;
    use crate::rank::RankPolicy;

    fn setup(seed: u64) -> (TransformerModel, SyntheticTask) {
        let model = TransformerModel::new(TinyTransformerConfig {
            vocab_size: 16,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 16,
            max_seq_len: 8,
            n_classes: 2,
            seed,
        })
        .unwrap();
        let task = SyntheticTask {
            kind: TaskKind::BagSeparable,
            vocab_size: 16,
            seq_len: 8,
            n_classes: 2,
            n_train: 128,
            n_eval: 64,
            seed,
        };
        (model, task)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 16,
            train_cap: 128,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let (model, _) = setup(1);
        let mut model = model;
        let before = model.head().0.clone();
        let names = model.trainable_names();
        let grads = Gradients {
            entries: names
                .iter()
                .zip(model.clone().trainables_mut())
                .map(|(n, (_, t))| (n.clone(), vec![2.5; t.len()]))
                .collect(),
        };
        let mut opt = Optimizer::new(&TrainConfig::default(), 0.01);
        opt.step(&mut model, &grads).unwrap();
        let moved = before.sub(model.head().0).unwrap();
        assert!(moved.as_slice().iter().all(|d| (d - 0.01).abs() < 1e-9));
    }

    #[test]
    fn same_seed_same_record() {
        let (model, task) = setup(3);
        let spec = AdapterSpec::qr_lora(RankPolicy::Energy(0.5), LayerScope::All, &[Projection::O]);
        let a = train(&model, &spec, &task, &quick()).unwrap();
        let b = train(&model, &spec, &task, &quick()).unwrap();
        assert!(a.same_outcome(&b));
        assert_eq!(a.trainable_count, model.clone().inject_adapters(&spec).unwrap().adapter_trainable_count());
    }

    #[test]
    fn zero_epochs_trains_nothing() {
        let (model, task) = setup(4);
        let data = task.generate().unwrap();
        let cfg = TrainConfig { epochs: 0, ..quick() };
        let t = train_on(&model, &AdapterSpec::full_ft(), &task, &data, &cfg).unwrap();
        assert_eq!(t.steps, 0);
        assert_eq!(t.model.embedding(), model.embedding());
    }

    #[test]
    fn divergence_reports_step() {
        let (model, task) = setup(5);
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e300,
            weight_decay: 1e300,
            ..quick()
        };
        let spec = AdapterSpec::lora(2, LayerScope::All, &[Projection::Q]);
        match train(&model, &spec, &task, &cfg) {
            Err(Error::Divergence { step, .. }) => assert!(step >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn cell_grids() {
        let base = AdapterSpec::qr_lora(RankPolicy::Energy(0.5), LayerScope::All, &[Projection::O]);
        let cfg = quick();
        let taus = tau_cells(&base, &[0.5, 0.7, 0.8], &cfg).unwrap();
        assert_eq!(taus[2].spec.policy, RankPolicy::Energy(0.8));
        assert!(tau_cells(&AdapterSpec::full_ft(), &[0.5], &cfg).is_err());

        let sizes = size_cells(&[32, 64, 128], &[AdapterSpec::full_ft(), base.clone()], &cfg, 128).unwrap();
        assert_eq!(sizes.len(), 6);
        assert_eq!(sizes[3].config.train_cap, 64);
        assert!(size_cells(&[256], &[base.clone()], &cfg, 128).is_err());

        let scopes = scope_cells(&base, &cfg);
        let labels: Vec<_> = scopes
            .iter()
            .map(|c| format!("{} {}", c.spec.layer_scope, c.spec.projections_label()))
            .collect();
        assert_eq!(labels, ["last:4 o", "last:4 q;v", "last:4 q;v;o", "all o", "all q;v", "all q;v;o"]);
    }

    #[test]
    fn failed_cells_do_not_stop_the_sweep() {
        let (model, task) = setup(6);
        let data = task.generate().unwrap();
        let good = quick();
        let bad = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e300,
            weight_decay: 1e300,
            ..quick()
        };
        let spec = AdapterSpec::lora(2, LayerScope::All, &[Projection::Q]);
        let cells = [
            Cell { spec: spec.clone(), config: bad },
            Cell { spec, config: good },
        ];
        let out = run_cells(&model, &task, &data, &cells, Some(2)).unwrap();
        assert!(!out[0].is_ok() && out[1].is_ok());
    }

    #[test]
    fn incompatible_task_is_rejected() {
        let (model, mut task) = setup(7);
        task.n_classes = 3;
        assert!(matches!(
            train(&model, &AdapterSpec::full_ft(), &task, &quick()),
            Err(Error::InvalidConfig(_))
        ));
    }
}
