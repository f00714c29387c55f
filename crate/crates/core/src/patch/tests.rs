use super::*;
use crate::metrics::MetricKind;
use crate::model::ModelConfig;
use crate::tensor::matmul;

fn config(ln: bool) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_head: 4,
        d_mlp: 6,
        vocab_size: 7,
        max_seq: 5,
        use_final_layernorm: ln,
        use_block_layernorm: ln,
    }
}

fn model(ln: bool, seed: u64) -> TinyTransformer {
    TinyTransformer::random(config(ln), seed, 0.6).unwrap()
}

fn pair() -> PromptPair {
    PromptPair {
        clean: vec![1, 2, 3, 4],
        corrupt: vec![5, 2, 6, 4],
        answer: 0,
        foils: vec![3],
        eval_position: None,
    }
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn patching_a_run_with_its_own_cache_is_bitwise_identity() {
    for ln in [false, true] {
        let m = model(ln, 1);
        let tokens = [1, 2, 3, 4];
        let (logits, cache) = m.run_with_cache(&tokens).unwrap();
        let patches: Vec<_> = m
            .list_hooks()
            .into_iter()
            .filter(|h| h.site.is_patchable())
            .map(|h| PatchSpec::new(h, Positions::All, PatchSource::Cache(&cache)))
            .collect();
        let patched = run_with_patches(&m, &tokens, &patches).unwrap();
        assert_eq!(bits(&patched), bits(&logits));
    }
}

#[test]
fn patching_final_resid_post_reproduces_source_logits() {
    for ln in [false, true] {
        let m = model(ln, 2);
        let p = pair();
        let (clean_logits, _) = m.run_with_cache(&p.clean).unwrap();
        let denoised = denoise(&m, &p, &[PatchTarget::all(HookId::resid_post(1))]).unwrap();
        assert_eq!(bits(&denoised), bits(&clean_logits));
    }
}

#[test]
fn duplicate_patch_is_a_conflict() {
    let m = model(false, 3);
    let p = pair();
    let targets = [
        PatchTarget::all(HookId::mlp_out(0)),
        PatchTarget::at(HookId::mlp_out(0), 2),
    ];
    assert!(matches!(denoise(&m, &p, &targets), Err(Error::Conflict(_))));
}

#[test]
fn attention_pattern_is_not_patchable() {
    let m = model(false, 3);
    let err = denoise(&m, &pair(), &[PatchTarget::all(HookId::attn_pattern(0, 0))]).unwrap_err();
    assert!(matches!(err, Error::Input(_)), "{err}");
}

#[test]
fn out_of_range_targets_are_rejected() {
    let m = model(false, 3);
    assert!(denoise(&m, &pair(), &[PatchTarget::at(HookId::embed(), 4)]).is_err());
    assert!(denoise(&m, &pair(), &[PatchTarget::all(HookId::attn_head_out(2, 0))]).is_err());
    assert!(denoise(&m, &pair(), &[PatchTarget::all(HookId::mlp_neuron_act(0, 6))]).is_err());
}

#[test]
fn patching_leaves_earlier_positions_alone() {
    let m = model(true, 4);
    let p = pair();
    let (corrupt_logits, _) = m.run_with_cache(&p.corrupt).unwrap();
    let patched = denoise(&m, &p, &[PatchTarget::at(HookId::resid_pre(0), 2)]).unwrap();
    for i in 0..2 {
        assert_eq!(patched.row(i), corrupt_logits.row(i));
    }
}

#[test]
fn mean_over_one_prompt_is_the_position_average() {
    let m = model(false, 5);
    let tokens = vec![1, 6, 3];
    let (_, cache) = m.run_with_cache(&tokens).unwrap();
    let mean = MeanActivations::from_dataset(&m, std::slice::from_ref(&tokens)).unwrap();
    let head = HookId::attn_head_out(1, 1);
    let act = cache.get(&head).unwrap();
    let expected: Vec<f64> = (0..8)
        .map(|j| (0..3).map(|i| act.get2(i, j)).sum::<f64>() / 3.0)
        .collect();
    for (a, b) in mean.get(&head).unwrap().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(MeanActivations::from_dataset(&m, &[]).is_err());
}

#[test]
fn zero_ablating_final_residual_zeroes_logits() {
    let m = model(false, 6);
    let tokens = [1, 2, 3];
    let targets = [PatchTarget::all(HookId::resid_post(1))];
    let logits = ablate(&m, &tokens, &targets, AblationMode::Zero, None).unwrap();
    assert!(logits.data().iter().all(|v| *v == 0.0));
}

#[test]
fn zero_sigma_noise_is_the_clean_run() {
    let m = model(true, 7);
    let tokens = [1, 2, 3, 4];
    let (clean, _) = m.run_with_cache(&tokens).unwrap();
    let (noisy, _) = gaussian_corrupt(&m, &tokens, 0.0, 99).unwrap();
    assert_eq!(bits(&clean), bits(&noisy));
    assert!(noisy_embeddings(&m, &tokens, -1.0, 0).is_err());
    let a = noisy_embeddings(&m, &tokens, 0.5, 3).unwrap();
    let b = noisy_embeddings(&m, &tokens, 0.5, 3).unwrap();
    let c = noisy_embeddings(&m, &tokens, 0.5, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

/// Patching every edge out of a component is the same as patching the
/// component itself.
#[test]
fn all_edges_from_a_sender_match_component_patching() {
    for ln in [false, true] {
        let m = model(ln, 8);
        let p = pair();
        for sender in [
            HookId::attn_head_out(0, 1),
            HookId::mlp_out(0),
            HookId::embed(),
            HookId::attn_head_out(1, 0),
        ] {
            let receivers = direct_consumers(&m, &sender).unwrap();
            let spec = PathPatchSpec::new(sender, receivers, Positions::All);
            for direction in [Direction::Denoise, Direction::Noise] {
                let via_paths = path_patch(&m, std::slice::from_ref(&spec), &p, direction).unwrap();
                let direct = match direction {
                    Direction::Denoise => denoise(&m, &p, &[PatchTarget::all(sender)]).unwrap(),
                    Direction::Noise => noise(&m, &p, &[PatchTarget::all(sender)]).unwrap(),
                };
                let diff = max_abs_diff(&via_paths, &direct);
                assert!(diff < 1e-9, "{sender} {direction} ln={ln}: {diff}");
            }
        }
    }
}

/// Without layernorm the logits are linear in the residual, so the edge
/// sender -> logits changes them by exactly `(src - base) W_U`.
#[test]
fn direct_path_to_logits_is_the_unembedded_difference() {
    let m = model(false, 9);
    let p = pair();
    let (corrupt_logits, corrupt_cache) = m.run_with_cache(&p.corrupt).unwrap();
    let (_, clean_cache) = m.run_with_cache(&p.clean).unwrap();
    let sender = HookId::attn_head_out(0, 0);
    let spec = PathPatchSpec::edge(sender, HookId::logits(), Positions::All);
    let patched = path_patch(&m, &[spec], &p, Direction::Denoise).unwrap();
    let diff = clean_cache
        .get(&sender)
        .unwrap()
        .sub(corrupt_cache.get(&sender).unwrap())
        .unwrap();
    let expected = corrupt_logits.add(&matmul(&diff, &m.params().w_u).unwrap()).unwrap();
    assert!(max_abs_diff(&patched, &expected) < 1e-12);
}

#[test]
fn neuron_edges_sum_to_the_mlp_edge() {
    let m = model(true, 10);
    let p = pair();
    let whole = PathPatchSpec::edge(HookId::mlp_out(0), HookId::attn_head_out(1, 1), Positions::All);
    let split: Vec<_> = (0..6)
        .map(|n| {
            PathPatchSpec::edge(
                HookId::mlp_neuron_act(0, n),
                HookId::attn_head_out(1, 1),
                Positions::All,
            )
        })
        .collect();
    let a = path_patch(&m, &[whole], &p, Direction::Denoise).unwrap();
    let b = path_patch(&m, &split, &p, Direction::Denoise).unwrap();
    assert!(max_abs_diff(&a, &b) < 1e-9);
}

#[test]
fn path_graph_is_validated() {
    let m = model(false, 11);
    let p = pair();
    let run = |specs: &[PathPatchSpec]| path_patch(&m, specs, &p, Direction::Denoise);

    let upstream = PathPatchSpec::edge(HookId::attn_head_out(1, 0), HookId::attn_head_out(0, 0), Positions::All);
    assert!(matches!(run(&[upstream]), Err(Error::Graph(_))));
    let same_layer = PathPatchSpec::edge(HookId::attn_head_out(0, 0), HookId::attn_head_out(0, 1), Positions::All);
    assert!(matches!(run(&[same_layer]), Err(Error::Graph(_))));
    let bad_sender = PathPatchSpec::edge(HookId::resid_pre(0), HookId::mlp_out(0), Positions::All);
    assert!(matches!(run(&[bad_sender]), Err(Error::Graph(_))));
    let empty = PathPatchSpec::new(HookId::embed(), vec![], Positions::All);
    assert!(matches!(run(&[empty]), Err(Error::Graph(_))));

    let e = PathPatchSpec::edge(HookId::embed(), HookId::mlp_out(1), Positions::All);
    assert!(matches!(run(&[e.clone(), e]), Err(Error::Conflict(_))));
    let both = [
        PathPatchSpec::edge(HookId::mlp_out(0), HookId::logits(), Positions::All),
        PathPatchSpec::edge(HookId::mlp_neuron_act(0, 2), HookId::logits(), Positions::one(1)),
    ];
    assert!(matches!(run(&both), Err(Error::Conflict(_))));
    let disjoint = [
        PathPatchSpec::edge(HookId::embed(), HookId::logits(), Positions::one(0)),
        PathPatchSpec::edge(HookId::embed(), HookId::logits(), Positions::one(1)),
    ];
    assert!(run(&disjoint).is_ok());
}

#[test]
fn empty_path_set_is_the_base_run() {
    let m = model(true, 12);
    let p = pair();
    let (corrupt, _) = m.run_with_cache(&p.corrupt).unwrap();
    let patched = path_patch(&m, &[], &p, Direction::Denoise).unwrap();
    assert_eq!(bits(&patched), bits(&corrupt));
}

#[test]
fn edge_universe_excludes_logits_and_respects_order() {
    let m = model(false, 13);
    let edges = component_edges(&m, 3);
    // senders: 3 embed positions + pos_embed + 4 heads + 12 neurons
    // receivers: 4 heads + 12 neurons
    let c = m.config();
    let later = |l: usize| (c.n_layers - l - 1) * (c.n_heads + c.d_mlp);
    let mut expected = 4 * (c.n_layers * (c.n_heads + c.d_mlp));
    for l in 0..c.n_layers {
        expected += c.n_heads * (c.d_mlp + later(l));
        expected += c.d_mlp * later(l);
    }
    assert_eq!(edges.len(), expected);
    assert!(edges.iter().all(|e| e.receivers[0] != HookId::logits()));
    let covering = PathPatchSpec::new(HookId::embed(), vec![HookId::mlp_out(1)], Positions::All);
    let edge = PathPatchSpec::edge(HookId::embed(), HookId::mlp_neuron_act(1, 3), Positions::one(2));
    assert!(covering.covers(&edge, 3));
    assert!(!PathPatchSpec::edge(HookId::embed(), HookId::mlp_out(1), Positions::one(0)).covers(&edge, 3));
}

fn sweep_spec(technique: Technique, direction: Direction, granularity: Granularity) -> SweepSpec {
    SweepSpec {
        pair: pair(),
        direction,
        technique,
        granularity,
        metrics: vec![MetricKind::LogitDiff, MetricKind::Prob, MetricKind::KlDiv],
    }
}

#[test]
fn targets_follow_granularity_order() {
    let m = model(false, 14);
    let t = targets_for(&m, Granularity::Resid, 4);
    assert_eq!(t.len(), 8);
    assert_eq!(t[0], PatchTarget::at(HookId::resid_pre(0), 0));
    assert_eq!(t[5], PatchTarget::at(HookId::resid_pre(1), 1));
    let comp = targets_for(&m, Granularity::Component, 4);
    assert_eq!(comp[2], PatchTarget::all(HookId::mlp_out(0)));
    assert_eq!(comp.len(), 6);
    assert_eq!(targets_for(&m, Granularity::Neuron, 4).len(), 12);
    assert!("heads".parse::<Granularity>().unwrap_err().to_string().contains("component"));
}

#[test]
fn sweep_matches_single_patches_and_keeps_order() {
    let m = model(false, 15);
    let spec = sweep_spec(Technique::Patch, Direction::Denoise, Granularity::Component);
    let records = sweep(&m, &spec).unwrap();
    let targets = targets_for(&m, Granularity::Component, 4);
    assert_eq!(records.len(), targets.len() * 3);
    for (i, target) in targets.iter().enumerate() {
        let logits = denoise(&m, &spec.pair, std::slice::from_ref(target)).unwrap();
        let row = logits.row(3);
        let rec = &records[i * 3];
        assert_eq!(rec.hook, target.hook);
        assert_eq!(rec.metric, MetricKind::LogitDiff);
        assert_eq!(rec.raw, row[0] - row[3]);
        assert_eq!(records[i * 3 + 2].metric, MetricKind::KlDiv);
    }
}

#[test]
fn final_layer_resid_sweep_restores_fully() {
    let m = model(true, 16);
    let spec = sweep_spec(Technique::Patch, Direction::Denoise, Granularity::Resid);
    let targets = [PatchTarget::all(HookId::resid_post(1))];
    let records = sweep_targets(&m, &spec, &targets).unwrap();
    let ld = &records[0];
    assert_eq!(ld.raw, ld.clean_baseline.unwrap());
    assert_eq!(ld.normalized, Some(1.0));
    assert!(records[2].raw.abs() < 1e-12);
}

#[test]
fn identical_prompts_give_degenerate_scores() {
    let m = model(false, 17);
    let mut spec = sweep_spec(Technique::Patch, Direction::Noise, Granularity::Mlp);
    spec.pair.corrupt = spec.pair.clean.clone();
    let records = sweep(&m, &spec).unwrap();
    assert!(records.iter().all(|r| r.normalized.is_none()));
}

#[test]
fn every_technique_runs_in_both_directions() {
    let m = model(true, 18);
    for technique in [
        Technique::Patch,
        Technique::ZeroAblate,
        Technique::MeanAblate {
            dataset: vec![vec![1, 2, 3, 4], vec![6, 5, 4, 3]],
        },
        Technique::Gaussian { sigma: 0.5, seed: 1 },
    ] {
        for direction in [Direction::Denoise, Direction::Noise] {
            let spec = sweep_spec(technique.clone(), direction, Granularity::Head);
            let records = sweep(&m, &spec).unwrap();
            assert_eq!(records.len(), 4 * 3);
            assert!(records.iter().all(|r| r.raw.is_finite()));
        }
    }
}

#[test]
fn gaussian_denoise_of_every_embedding_restores_the_clean_run() {
    let m = model(true, 19);
    let spec = sweep_spec(
        Technique::Gaussian { sigma: 2.0, seed: 5 },
        Direction::Denoise,
        Granularity::Embed,
    );
    let full = [PatchTarget::all(HookId::embed())];
    let records = sweep_targets(&m, &spec, &full).unwrap();
    assert_eq!(Some(records[0].raw), records[0].clean_baseline);
}

#[test]
fn noising_every_hook_reproduces_the_corrupt_run() {
    for ln in [false, true] {
        let m = model(ln, 21);
        let p = pair();
        let every: Vec<PatchTarget> = m
            .list_hooks()
            .into_iter()
            .filter(|h| h.site.is_patchable())
            .map(PatchTarget::all)
            .collect();
        let noised = noise(&m, &p, &every).unwrap();
        assert_eq!(bits(&noised), bits(&m.forward(&p.corrupt).unwrap()));
    }
}

#[test]
fn resid_sweep_has_one_record_per_layer_and_position() {
    let m = model(false, 4);
    let spec = sweep_spec(Technique::Patch, Direction::Denoise, Granularity::Resid);
    let records = sweep(&m, &spec).unwrap();
    assert_eq!(records.len(), 2 * 4 * spec.metrics.len());
}

#[test]
fn heads_in_an_unused_layer_score_zero() {
    let (m, truth) = crate::circuits::ToyCircuitKind::Nobel.build().unwrap();
    let targets: Vec<PatchTarget> = (0..m.config().n_heads)
        .map(|h| PatchTarget::all(HookId::attn_head_out(2, h)))
        .collect();
    let spec = SweepSpec {
        pair: truth.pair(),
        direction: Direction::Denoise,
        technique: Technique::Patch,
        granularity: Granularity::Head,
        metrics: vec![MetricKind::LogitDiff],
    };
    for r in sweep_targets(&m, &spec, &targets).unwrap() {
        assert!(r.normalized.unwrap().abs() < 1e-12, "{}: {:?}", r.hook, r.normalized);
    }
}
