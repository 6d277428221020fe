use agentbudget::backend::{
    Backend, BackendRegistry, Behavior, CallContext, CallRequest, GeneratorRule, MockScript, ScriptedBackend,
    Selector, TokenSpec,
};
use agentbudget::catalog::{estimate_cost, ModelSpec};
use agentbudget::dataset::{DatasetHeader, Experience, ExperienceDataset};
use agentbudget::embedder::HashingEmbedder;
use agentbudget::policy::{
    self, evaluate, forward, softmax, PolicyDims, PolicyParams, TrainerConfig, TrainingSet,
};
use agentbudget::reward::RewardConfig;
use agentbudget::topology::{assign_roles, execute, ExecConfig, NumericEvaluator, Pool, Role, TaskSpec, Topology};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn models() -> Vec<ModelSpec> {
    let m = |name: &str, tier, pin, pout| ModelSpec {
        name: name.into(),
        tier,
        price_in_per_mtok: pin,
        price_out_per_mtok: pout,
        backend_id: "mock".into(),
    };
    vec![m("big", 1, 2.0, 8.0), m("mid", 2, 0.4, 1.6), m("small", 3, 0.1, 0.4)]
}

fn generator(texts: &[&str], lo: u64, hi: u64) -> Behavior {
    Behavior::Generator(GeneratorRule {
        texts: texts.iter().map(|s| s.to_string()).collect(),
        completion_tokens: TokenSpec::Range([lo, hi]),
        prompt_tokens: Some(TokenSpec::Range([100, 2000])),
    })
}

fn role(r: Role) -> Selector {
    Selector { role: Some(r), ..Default::default() }
}

// critic and planner texts never look like executor answers
fn script(seed: u64) -> MockScript {
    let mut s = MockScript::new(vec![])
        .rule(role(Role::Planner), generator(&["1. a\n2. b", "thinking", "1. go"], 10, 800))
        .rule(role(Role::Critic), generator(&["ACCEPT", "REJECT: no", "REJECT"], 5, 400))
        .rule(role(Role::Executor), generator(&["#### 1", "#### 2", "#### 3"], 10, 1500));
    s.seed = seed;
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(
        logits in prop::collection::vec(-50.0..50.0f64, 1..8),
        shift in -1e3..1e3f64,
    ) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn execution_respects_ledger_roles_and_determinism(
        seed in 0u64..1_000_000,
        picks in prop::collection::vec(0usize..3, 3..7),
        topo in 0usize..4,
        budget in 20.0..6000.0f64,
    ) {
        let all = models();
        let pool = Pool::from_models(picks.iter().map(|&i| all[i].clone()).collect());
        let topology = Topology::from_index(topo).unwrap();
        let assignment = assign_roles(&pool, topology).unwrap();
        let registry = BackendRegistry::mock(script(seed));
        let task = TaskSpec { id: format!("p{seed}"), text: "1 + 1".into(), answer: Some("2".into()) };
        let cfg = ExecConfig { run_seed: seed, ..ExecConfig::default() };
        let trace = execute(&task, &assignment, budget, &registry, &NumericEvaluator, &cfg);

        let mut shadow = 0.0;
        for c in &trace.calls {
            prop_assert!(c.cost_before <= budget);
            prop_assert_eq!(c.cost_before, shadow);
            let m = all.iter().find(|m| m.name == c.model).unwrap();
            shadow += estimate_cost(m, c.prompt_tokens, c.completion_tokens).unit_cost;
            prop_assert_eq!(assignment.members[c.instance].role, c.role);
        }
        prop_assert_eq!(trace.cumulative_cost, shadow);
        prop_assert_eq!(trace.oob, shadow > budget);
        if let Some(answer) = &trace.final_answer {
            prop_assert!(answer.starts_with("####"), "final answer {:?} not from an executor", answer);
        }
        if let Some(p) = assignment.planner() {
            prop_assert!(trace.calls.iter().filter(|c| c.instance == p).all(|c| c.role == Role::Planner));
        }

        let again = execute(&task, &assignment, budget, &registry, &NumericEvaluator, &cfg);
        prop_assert_eq!(serde_json::to_string(&trace).unwrap(), serde_json::to_string(&again).unwrap());
    }

    #[test]
    fn star_unanimity_wins_regardless_of_weights(
        picks in prop::collection::vec(0usize..3, 2..6),
        answer in 0u32..1000,
    ) {
        let all = models();
        let pool = Pool::from_models(picks.iter().map(|&i| all[i].clone()).collect());
        let assignment = assign_roles(&pool, Topology::Star).unwrap();
        let texts = [format!("so it is {answer}"), format!("#### {answer}"), format!("{answer}.0")];
        let s = MockScript::new(vec![]).rule(role(Role::Executor), Behavior::Generator(GeneratorRule {
            texts: texts.to_vec(),
            completion_tokens: TokenSpec::Fixed(10),
            prompt_tokens: None,
        }));
        let task = TaskSpec { id: "u".into(), text: "q".into(), answer: Some(answer.to_string()) };
        let trace = execute(&task, &assignment, 1e9, &BackendRegistry::mock(s), &NumericEvaluator, &ExecConfig::default());
        prop_assert_eq!(trace.success, Some(true));
    }

    #[test]
    fn mock_backend_is_a_pure_function_of_its_inputs(seed in 0u64..1000, step in 1u32..20, run_seed in 0u64..1000) {
        let a = ScriptedBackend::new(script(seed));
        let b = ScriptedBackend::new(script(seed));
        let req = CallRequest {
            model: "small".into(),
            system: String::new(),
            user: "x".into(),
            max_tokens: 700,
            temperature: 0.0,
            context: CallContext {
                run_seed,
                task_id: "t".into(),
                topology: Topology::Linear,
                role: Role::Executor,
                step,
                attempt: 0,
            },
        };
        let first = a.invoke(&req).unwrap();
        prop_assert_eq!(&first, &b.invoke(&req).unwrap());
        prop_assert_eq!(&first, &a.invoke(&req).unwrap());
        prop_assert!(first.completion_tokens <= 700);
    }

    #[test]
    fn dataset_round_trips_and_rejects_repeated_topologies(
        rows in prop::collection::vec((0usize..5, 0usize..4, any::<bool>(), 0.0..2000.0f64), 1..30),
    ) {
        let mut seen = std::collections::HashSet::new();
        let exps: Vec<Experience> = rows
            .iter()
            .filter(|(t, k, _, _)| seen.insert((*t, *k)))
            .map(|&(t, k, success, cost)| Experience {
                task_id: format!("t{t}"),
                task_text: format!("task {t}"),
                budget: 500.0,
                topology: k,
                success,
                actual_cost: cost,
                error: None,
            })
            .collect();
        let ds = ExperienceDataset::new(DatasetHeader::new("h", 1), exps.clone()).unwrap();
        let text = ds.to_jsonl();
        let back = ExperienceDataset::from_jsonl(&text).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(back.to_jsonl(), text);

        let mut dup = exps;
        dup.push(dup[0].clone());
        prop_assert!(ExperienceDataset::new(DatasetHeader::new("h", 1), dup).is_err());
    }
}

fn dominant_world(n_tasks: usize, dominant: usize) -> ExperienceDataset {
    let mut exps = Vec::new();
    for i in 0..n_tasks {
        for t in 0..4 {
            let win = t == dominant;
            exps.push(Experience {
                task_id: format!("task-{i:03}"),
                task_text: format!("question number {i} about item {} and item {}", i * 7 % 13, i % 5),
                budget: 500.0,
                topology: t,
                success: win,
                actual_cost: if win { 300.0 } else { 450.0 },
                error: None,
            });
        }
    }
    ExperienceDataset::new(DatasetHeader::new("synthetic", 0), exps).unwrap()
}

fn training_set(n_tasks: usize) -> TrainingSet {
    TrainingSet::from_dataset(&dominant_world(n_tasks, 1), &RewardConfig::default(), &HashingEmbedder::default(), None)
        .unwrap()
}

#[test]
fn evaluate_ignores_experience_order() {
    let ds = dominant_world(30, 1);
    let params = PolicyParams::seeded(PolicyDims::default(), 9);
    let embedder = HashingEmbedder::default();
    let base = evaluate(&params, &TrainingSet::from_dataset(&ds, &RewardConfig::default(), &embedder, None).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let mut exps = ds.experiences.clone();
        exps.shuffle(&mut rng);
        let shuffled = ExperienceDataset::new(ds.header.clone(), exps).unwrap();
        let set = TrainingSet::from_dataset(&shuffled, &RewardConfig::default(), &embedder, None).unwrap();
        assert_eq!(evaluate(&params, &set).unwrap(), base);
    }
}

#[test]
fn dominant_probability_rises_each_epoch_without_entropy() {
    let set = training_set(100);
    for seed in [42, 1, 2, 3, 4] {
        let cfg = TrainerConfig { learning_rate: 0.0015, entropy_coeff: 0.0, epochs: 10, seed, ..TrainerConfig::default() };
        let mut trajectory = Vec::new();
        policy::train_with_observer(&set, &cfg, PolicyDims::default(), |_, params| {
            let mean = set.groups.iter().map(|g| forward(params, &g.state).unwrap().probabilities[1]).sum::<f64>()
                / set.groups.len() as f64;
            trajectory.push(mean);
        })
        .unwrap();
        let drops = trajectory.windows(2).filter(|w| w[1] <= w[0]).count();
        assert!(drops <= 1, "seed {seed}: {trajectory:?}");
    }
}

#[test]
fn selected_epoch_has_the_best_score() {
    let set = training_set(40);
    let cfg = TrainerConfig { learning_rate: 0.01, epochs: 6, batch_size: 16, ..TrainerConfig::default() };
    let mut scores = Vec::new();
    let out = policy::train_with_observer(&set, &cfg, PolicyDims::default(), |r, _| scores.push(r.expected_reward)).unwrap();
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.report.best_expected_reward, best);
    assert_eq!(evaluate(&out.params, &set).unwrap(), best);
}
