use rlplus_core::env::{exact_success, make_prompt_set, TaskKind, TaskSpec};
use rlplus_core::policy::PolicyTable;
use rlplus_core::trainer::{train, DemoSource, StepRecord, TrainerConfig, TrainerState};

fn mean_success(policy: &PolicyTable, prompts: &[TaskSpec]) -> f64 {
    prompts.iter().map(|t| exact_success(t, policy).unwrap()).sum::<f64>() / prompts.len() as f64
}

fn run(prompts: &[TaskSpec], cfg: &TrainerConfig) -> (TrainerState, Vec<StepRecord>) {
    let init = PolicyTable::uniform_for(&prompts[0]);
    let mut state = TrainerState::new(init, prompts.to_vec(), DemoSource::default()).unwrap();
    let recs = train(&mut state, cfg, |_, _| Ok(())).unwrap();
    (state, recs)
}

fn jsonl(recs: &[StepRecord]) -> String {
    recs.iter().map(|r| r.to_json() + "\n").collect()
}

#[test]
fn success_rises_on_mod_chain() {
    for seed in 0..10u64 {
        let prompts = make_prompt_set(TaskKind::ModChain, 5, 3, 4, seed).unwrap();
        let cfg = TrainerConfig { lr: 1.3, batch_prompts: 32, steps: 300, master_seed: seed, ..Default::default() };
        let before = mean_success(&PolicyTable::uniform_for(&prompts[0]), &prompts);
        let (state, recs) = run(&prompts, &cfg);
        let after = mean_success(&state.cur, &prompts);
        assert!(after >= before + 0.5, "seed {seed}: {before} -> {after}");
        assert_eq!(recs.last().unwrap().test_accuracy, after);
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let prompts = make_prompt_set(TaskKind::MultiPath, 4, 3, 3, 9).unwrap();
    let cfg = TrainerConfig { batch_prompts: 12, steps: 15, lr: 0.8, master_seed: 21, ..Default::default() };
    let in_pool = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run(&prompts, &cfg))
    };
    let (s1, r1) = in_pool(1);
    let (s4, r4) = in_pool(4);
    assert_eq!(jsonl(&r1), jsonl(&r4));
    assert_eq!(s1.cur.to_text(), s4.cur.to_text());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let prompts = make_prompt_set(TaskKind::ModChain, 5, 2, 2, 4).unwrap();
    let cfg = TrainerConfig { batch_prompts: 6, steps: 20, lr: 0.5, master_seed: 8, ..Default::default() };
    let (a, ra) = run(&prompts, &cfg);
    let (b, rb) = run(&prompts, &cfg);
    assert_eq!(jsonl(&ra), jsonl(&rb));
    assert_eq!(a.cur, b.cur);
    let (_, rc) = run(&prompts, &TrainerConfig { master_seed: 9, ..cfg });
    assert_ne!(jsonl(&ra), jsonl(&rc));
}

#[test]
fn snapshot_refreshes_only_on_schedule() {
    let prompts = make_prompt_set(TaskKind::ModChain, 4, 2, 2, 1).unwrap();
    let cfg = TrainerConfig { batch_prompts: 4, steps: 7, lr: 0.5, snapshot_every: 3, ..Default::default() };
    let init = PolicyTable::uniform_for(&prompts[0]);
    let mut state = TrainerState::new(init.clone(), prompts, DemoSource::default()).unwrap();
    let mut last_snapshot = init;
    train(&mut state, &cfg, |rec, st| {
        if (rec.step + 1) % 3 == 0 {
            assert_eq!(st.old, st.cur);
            last_snapshot = st.old.clone();
        } else {
            assert_eq!(st.old, last_snapshot);
            assert_ne!(st.old, st.cur);
        }
        assert_eq!(st.reference, PolicyTable::uniform_for(&st.prompts[0]));
        Ok(())
    })
    .unwrap();
}
