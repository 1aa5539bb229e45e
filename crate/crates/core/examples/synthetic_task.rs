//! Generates a key-match task and shows its oracle usefulness labels.

use genicl::eval::synth::{synth_task_generate, SyntheticTask, SyntheticTaskSpec};

fn main() -> genicl::Result<()> {
    let task = synth_task_generate(&SyntheticTaskSpec {
        pool_size: 32,
        query_count: 4,
        test_count: 4,
        ..SyntheticTaskSpec::default()
    })?;
    println!("pool of {}, {} train / {} test queries", task.pool.len(), task.queries.len(), task.test.len());
    for q in &task.test.examples {
        let useful: Vec<&str> = task
            .pool
            .examples
            .iter()
            .filter(|d| SyntheticTask::is_useful(q, d))
            .map(|d| d.id.as_str())
            .collect();
        println!("{} {:?} -> {:?}: {} useful, e.g. {:?}", q.id, q.input, q.target, useful.len(), &useful[..3.min(useful.len())]);
    }
    Ok(())
}
