use std::sync::Arc;

use latentmem::bank::TextEmbedder;
use latentmem::lm::pretrain::tiny_config;
use latentmem::lm::Backbone;
use latentmem::mas::{
    bootstrap_bank, build_system, compute_reward, generate_task, plan_memory, reference_trajectory, run_episode,
    EpisodeOptions, Mode, Split, TaskFamily, Topology,
};
use proptest::prelude::*;

const FAMILIES: [TaskFamily; 3] = [TaskFamily::KvRecall, TaskFamily::StringTransform, TaskFamily::ModArith];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reference_dialogues_earn_full_reward(f in 0usize..3, world in 0u64..500, index in 0usize..50, three in any::<bool>()) {
        let task = generate_task(FAMILIES[f], world, Split::Train, index);
        let topology = if three { Topology::Chain3 } else { Topology::Chain2 };
        let t = reference_trajectory(topology, &task);
        prop_assert_eq!(t.steps.len(), topology.roles().len());
        prop_assert_eq!(compute_reward(&t, &task), 1.0);
    }

    #[test]
    fn tasks_are_pure_functions_of_their_seed(f in 0usize..3, world in 0u64..500, index in 0usize..50) {
        let a = generate_task(FAMILIES[f], world, Split::Eval, index);
        prop_assert_eq!(&a, &generate_task(FAMILIES[f], world, Split::Eval, index));
        prop_assert!(!a.gold.is_empty());
    }
}

#[test]
fn splits_never_share_a_query() {
    for f in FAMILIES {
        for w in 0..5 {
            let train: Vec<String> = (0..8).map(|i| generate_task(f, w, Split::Train, i).query).collect();
            for i in 0..8 {
                let q = generate_task(f, w, Split::Eval, i).query;
                assert!(!train.contains(&q), "{} world {w}: {q}", f.name());
            }
        }
    }
}

#[test]
fn memory_plans_follow_the_mode() {
    let bb = Backbone::<f32>::init(tiny_config(256), 2).unwrap();
    let emb = TextEmbedder::new(Arc::clone(&bb.params.tok_embed), 16);
    let bank = bootstrap_bank(&[TaskFamily::KvRecall], &[0, 1], 6, Topology::Chain3, emb).unwrap();
    let task = generate_task(TaskFamily::KvRecall, 1, Split::Eval, 0);
    let opts = EpisodeOptions::default();

    let none = plan_memory(&build_system("chain3", Mode::NoMemory).unwrap(), None, Some(&bank), &task.query, &opts).unwrap();
    assert!(none.retrieved.is_empty() && none.raw_context.is_none());
    assert!(none.memories.iter().all(Option::is_none));

    let raw = plan_memory(&build_system("chain3", Mode::RawContext).unwrap(), None, Some(&bank), &task.query, &opts).unwrap();
    assert_eq!(raw.retrieved.len(), 1);
    assert!(raw.raw_context.as_deref().is_some_and(|t| !t.is_empty()));

    let latent = build_system("chain3", Mode::Latentmem).unwrap();
    assert!(plan_memory(&latent, None, Some(&bank), &task.query, &opts).is_err());
}

#[test]
fn raw_context_prompts_carry_the_retrieved_text() {
    let bb = Backbone::<f32>::init(tiny_config(400), 2).unwrap();
    let emb = TextEmbedder::new(Arc::clone(&bb.params.tok_embed), 16);
    let bank = bootstrap_bank(&[TaskFamily::KvRecall], &[0], 6, Topology::Chain2, emb).unwrap();
    let task = generate_task(TaskFamily::KvRecall, 0, Split::Eval, 0);
    let opts = EpisodeOptions {
        max_new_tokens: 2,
        raw_context_chars: 60,
        ..EpisodeOptions::default()
    };
    let plain = run_episode(&build_system("chain2", Mode::NoMemory).unwrap(), &bb, None, Some(&bank), &task, &opts, 0).unwrap();
    let raw = run_episode(&build_system("chain2", Mode::RawContext).unwrap(), &bb, None, Some(&bank), &task, &opts, 0).unwrap();
    assert!(raw.steps[0].prompt_ids.len() > plain.steps[0].prompt_ids.len());
    assert!(raw.steps.iter().all(|s| s.memory_rows == 0));
}

#[test]
fn greedy_episodes_repeat_and_rewards_are_binary() {
    let bb = Backbone::<f32>::init(tiny_config(256), 4).unwrap();
    let sys = build_system("chain3", Mode::NoMemory).unwrap();
    let opts = EpisodeOptions {
        max_new_tokens: 6,
        ..EpisodeOptions::default()
    };
    for i in 0..4 {
        let task = generate_task(TaskFamily::ModArith, 3, Split::Eval, i);
        let a = run_episode(&sys, &bb, None, None, &task, &opts, 1).unwrap();
        let b = run_episode(&sys, &bb, None, None, &task, &opts, 99).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        assert!(a.reward == 0.0 || a.reward == 1.0);
        assert_eq!(a.steps.len(), 3);
        assert!(a.steps.iter().all(|s| s.output_ids.len() <= 6));
    }
}

#[test]
fn ablated_roles_share_one_profile() {
    let sys = build_system("chain3", Mode::Latentmem).unwrap();
    assert!(!sys.roles_ablated());
    let ablated = sys.without_roles();
    assert!(ablated.roles_ablated());
    let first = &ablated.agents[0].profile;
    assert!(ablated.agents.iter().all(|a| &a.profile == first));
    assert_eq!(ablated.horizon(), 3);
}
