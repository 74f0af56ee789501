//! Leave-one-subject-out evaluation with folds spread over threads.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use painattn_core::model::ModelConfig;
use painattn_core::train::{
    fold_plans, pool_folds, run_fold, FoldResult, LoocvOutcome, TaskDataset, TrainConfig,
};
use painattn_core::Result;

/// Same result as [`painattn_core::train::loocv`] for any `jobs >= 1`.
///
/// Each fold derives its seeds from the subject id alone, and pooling sorts
/// folds by subject, so scheduling order cannot leak into the output.
pub fn loocv_parallel(
    data: &TaskDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<LoocvOutcome> {
    let plans = fold_plans(data)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<FoldResult>>>> = Mutex::new(vec![None; plans.len()]);
    thread::scope(|s| {
        for _ in 0..jobs.clamp(1, plans.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(plan) = plans.get(i) else { break };
                log::info!(
                    "fold subject {}: training on {} subjects",
                    plan.test_subject,
                    plan.train_subjects.len()
                );
                let r = run_fold(data, plan, model_cfg, cfg);
                match &r {
                    Ok(f) => log::info!(
                        "fold subject {}: accuracy {:.4}",
                        plan.test_subject,
                        f.accuracy()
                    ),
                    Err(e) => log::error!("fold subject {}: {e}", plan.test_subject),
                }
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    let folds = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every fold was claimed"))
        .collect::<Result<Vec<_>>>()?;
    pool_folds(folds, data.task.num_classes)
}
