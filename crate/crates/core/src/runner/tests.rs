use super::*;
use crate::circuits::ToyCircuitKind;
use crate::error::Error;
use crate::patch::{Granularity, Technique};

const MINIMAL: &str = r#"{
    "model": {"builtin": "nobel"},
    "direction": "denoise",
    "technique": {"kind": "patch"},
    "granularity": "head",
    "metrics": ["logit_diff"]
}"#;

fn config_path_of(err: Error) -> String {
    match err {
        Error::Config { path, .. } => path,
        other => panic!("expected a config error, got {other}"),
    }
}

fn with(field: &str, value: &str) -> String {
    let mut v: serde_json::Value = serde_json::from_str(MINIMAL).unwrap();
    v[field] = serde_json::from_str(value).unwrap();
    v.to_string()
}

#[test]
fn minimal_config_parses() {
    let cfg = load_config(MINIMAL).unwrap();
    assert_eq!(cfg.model, ModelSource::Builtin(ToyCircuitKind::Nobel));
    assert_eq!(cfg.granularity, Granularity::Head);
    assert_eq!(cfg.technique, Technique::Patch);
    assert!(cfg.pair.is_none());
}

#[test]
fn config_errors_name_their_json_path() {
    let cases = [
        (with("technique", r#"{"kind": "gaussian", "seed": 1}"#), ".technique.sigma"),
        (with("technique", r#"{"kind": "gaussian", "sigma": 0.1}"#), ".technique.seed"),
        (with("technique", r#"{"kind": "gaussian", "sigma": -1, "seed": 0}"#), ".technique.sigma"),
        (with("technique", r#"{"kind": "mean_ablate"}"#), ".technique.dataset"),
        (with("technique", r#"{"kind": "mean_ablate", "dataset": []}"#), ".technique.dataset"),
        (with("technique", r#"{"kind": "resample"}"#), ".technique.kind"),
        (with("granularity", r#""layer""#), ".granularity"),
        (with("metrics", r#"["logit_diff", "bleu"]"#), ".metrics[1]"),
        (with("metrics", "[]"), ".metrics"),
        (with("direction", r#""sideways""#), ".direction"),
        (with("model", r#"{"builtin": "xor"}"#), ".model.builtin"),
        (with("model", r#"{}"#), ".model"),
        (with("pair", r#"{"clean": [0, 1], "corrupt": [2], "answer": 2, "foils": [3]}"#), ".pair.corrupt"),
        (with("pair", r#"{"clean": [0, 1], "corrupt": [2, 3], "answer": 2, "foils": [2]}"#), ".pair.foils"),
        (with("pair", r#"{"clean": [0, -1], "corrupt": [2, 3], "answer": 2}"#), ".pair.clean[1]"),
        (with("extra", "1"), ".extra"),
    ];
    for (text, path) in cases {
        assert_eq!(config_path_of(load_config(&text).unwrap_err()), path, "{text}");
    }
}

#[test]
fn unknown_builtin_lists_valid_names() {
    let err = load_config(&with("model", r#"{"builtin": "xor"}"#)).unwrap_err();
    let msg = err.to_string();
    for name in ["and", "or", "nobel", "backup", "negative"] {
        assert!(msg.contains(name), "{msg}");
    }
}

#[test]
fn five_metrics_give_five_records_per_target() {
    let text = with("metrics", r#"["logit_diff", "logprob", "prob", "rank", "kl"]"#);
    let records = run_experiment(&load_config(&text).unwrap()).unwrap();
    let (model, _) = ToyCircuitKind::Nobel.build().unwrap();
    let heads = model.config().n_layers * model.config().n_heads;
    assert_eq!(records.len(), heads * 5);
    let metrics: Vec<_> = records[..5].iter().map(|r| r.metric.name()).collect();
    assert_eq!(metrics, ["logit_diff", "logprob", "prob", "rank", "kl"]);
}

#[test]
fn runs_are_byte_identical() {
    let text = with("granularity", r#""neuron""#);
    let cfg = load_config(&text).unwrap();
    let a = records_to_csv(&run_experiment(&cfg).unwrap()).unwrap();
    let b = records_to_csv(&run_experiment(&cfg).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn nobel_neuron_denoise_top_record_is_n42() {
    let cfg = load_config(&with("granularity", r#""neuron""#)).unwrap();
    let records = run_experiment(&cfg).unwrap();
    let top = records
        .iter()
        .max_by(|a, b| a.normalized.unwrap().total_cmp(&b.normalized.unwrap()))
        .unwrap();
    assert_eq!(top.hook.to_string(), "mlp_neuron_act.L1.N42");
}

#[test]
fn and_gate_component_noise_hits_a_b_c() {
    let text = r#"{"model": {"builtin": "and"}, "direction": "noise", "technique": {"kind": "patch"},
                  "granularity": "component", "metrics": ["logit_diff", "prob"]}"#;
    let records = run_experiment(&load_config(text).unwrap()).unwrap();
    let hits: Vec<String> = hit_set(&records, MetricKind::LogitDiff).iter().map(|h| h.to_string()).collect();
    assert_eq!(hits, ["attn_head_out.L0.H0", "attn_head_out.L0.H1", "mlp_out.L1"]);
}

#[test]
fn weight_file_configs_need_a_pair_and_resolve_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let (model, truth) = ToyCircuitKind::AndGate.build().unwrap();
    model.save(dir.path().join("and.json")).unwrap();

    let no_pair = r#"{"model": {"path": "and.json"}, "direction": "denoise", "technique": {"kind": "patch"},
                     "granularity": "mlp", "metrics": ["logit_diff"]}"#;
    let cfg_path = dir.path().join("no_pair.json");
    std::fs::write(&cfg_path, no_pair).unwrap();
    let cfg = load_config_file(&cfg_path).unwrap();
    assert_eq!(config_path_of(run_experiment(&cfg).unwrap_err()), ".pair");

    let mut v: serde_json::Value = serde_json::from_str(no_pair).unwrap();
    v["pair"] = serde_json::to_value(truth.pair()).unwrap();
    std::fs::write(&cfg_path, v.to_string()).unwrap();
    let records = run_experiment(&load_config_file(&cfg_path).unwrap()).unwrap();
    assert_eq!(records.len(), 2);
    assert_eq!(records[1].normalized, Some(1.0));
}

#[test]
fn verification_reports_sufficiency_and_paths() {
    for kind in ToyCircuitKind::ALL {
        let (model, truth) = kind.build().unwrap();
        let report = verify_circuit(&model, &truth, 0.9).unwrap();
        assert!(report.passed(), "{kind}\n{report}");
        assert_eq!(report.checks.len(), 3);
    }
}

#[test]
fn removing_the_output_neuron_breaks_nobel_and_filler_does_not_matter() {
    let (model, truth) = ToyCircuitKind::Nobel.build().unwrap();
    let mut reduced = truth.clone();
    reduced.circuit_hooks.remove(&HookId::mlp_neuron_act(1, 42));
    reduced.circuit_paths.clear();
    let report = verify_circuit(&model, &reduced, 0.9).unwrap();
    let sufficiency = report.checks.iter().find(|c| c.name == "sufficiency").unwrap();
    assert!(sufficiency.score.unwrap() < 0.1);
    assert!(!report.passed());

    let mut padded = truth.clone();
    padded.circuit_hooks.extend([
        HookId::attn_head_out(0, 3),
        HookId::attn_head_out(2, 1),
        HookId::mlp_neuron_act(1, 7),
        HookId::mlp_out(2),
    ]);
    assert!(verify_circuit(&model, &padded, 0.9).unwrap().passed());
}

#[test]
fn non_circuit_targets_respect_mlp_layers() {
    let (model, truth) = ToyCircuitKind::AndGate.build().unwrap();
    let targets = non_circuit_targets(&model, &truth.circuit_hooks);
    assert!(targets.iter().all(|t| t.hook.layer != Some(1) || t.hook.site == Site::AttnHeadOut));
    assert!(targets.iter().any(|t| t.hook == HookId::mlp_neuron_act(0, 3)));
    assert!(targets.iter().any(|t| t.hook == HookId::pos_embed()));
    assert!(!targets.iter().any(|t| t.hook == HookId::embed()));
}

fn sample_records() -> Vec<ExperimentRecord> {
    let text = r#"{"model": {"builtin": "nobel"}, "direction": "denoise", "technique": {"kind": "patch"},
                  "granularity": "resid", "metrics": ["logit_diff", "prob", "rank"]}"#;
    run_experiment(&load_config(text).unwrap()).unwrap()
}

#[test]
fn csv_has_exact_header_and_round_trips() {
    let records = sample_records();
    let bytes = records_to_csv(&records).unwrap();
    let text = String::from_utf8(bytes.clone()).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    assert_eq!(text.lines().count(), records.len() + 1);
    // resid records have no head or neuron
    assert!(lines.next().unwrap().starts_with("resid_pre.L0,0,,,0,denoise,logit_diff,"));
    let parsed = parse_csv(bytes.as_slice()).unwrap();
    assert_eq!(parsed, records);
    assert_eq!(records_to_csv(&parsed).unwrap(), bytes);
    assert!(records_to_csv(&[]).is_err());
}

#[test]
fn two_targets_three_metrics_make_six_rows() {
    let records = sample_records();
    let bytes = records_to_csv(&records[..6]).unwrap();
    assert_eq!(String::from_utf8(bytes).unwrap().lines().count(), 7);
}

#[test]
fn degenerate_scores_are_blank_cells() {
    let mut records = sample_records();
    records.truncate(1);
    records[0].normalized = None;
    let text = String::from_utf8(records_to_csv(&records).unwrap()).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[8], "");
    assert_eq!(parse_csv(text.as_bytes()).unwrap(), records);
}

#[test]
fn csv_rejects_a_foreign_header() {
    assert!(parse_csv("a,b\n1,2\n".as_bytes()).is_err());
}

#[test]
fn color_scale_endpoints() {
    assert_eq!(score_color(1.0), "#b2182b");
    assert_eq!(score_color(0.0), "#ffffff");
    assert_eq!(score_color(-0.2), "#2166ac");
    assert_eq!(score_color(-5.0), score_color(-0.2));
    assert_eq!(score_color(9.0), score_color(1.2));
    assert_ne!(score_color(1.1), score_color(1.0));
}

#[test]
fn residual_heatmap_has_one_cell_per_layer_and_position() {
    let (model, _) = ToyCircuitKind::Nobel.build().unwrap();
    let records = sample_records();
    let svg = render_heatmap_svg(&records, MetricKind::LogitDiff, HeatmapAxes::LayerPosition).unwrap();
    assert_eq!(svg.matches(r#"class="cell""#).count(), model.config().n_layers * 2);
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    for tick in ["-0.2", "1.2", "0.0"] {
        assert!(svg.contains(&format!(">{tick}</text>")), "tick {tick}");
    }
    assert_eq!(svg, render_heatmap_svg(&records, MetricKind::LogitDiff, HeatmapAxes::LayerPosition).unwrap());
}

#[test]
fn nobel_component_heatmap_has_a_single_high_cell_in_the_layer1_mlp() {
    let text = r#"{"model": {"builtin": "nobel"}, "direction": "denoise", "technique": {"kind": "patch"},
                  "granularity": "component", "metrics": ["logit_diff"]}"#;
    let records = run_experiment(&load_config(text).unwrap()).unwrap();
    let svg = render_heatmap_svg(&records, MetricKind::LogitDiff, HeatmapAxes::LayerHead).unwrap();
    let red = format!(r#"fill="{}""#, score_color(1.0));
    let cells: Vec<&str> = svg.lines().filter(|l| l.contains(r#"class="cell""#)).collect();
    assert_eq!(cells.len(), 3 * 5);
    let high: Vec<usize> = (0..cells.len()).filter(|&i| cells[i].contains(&red)).collect();
    // row-major: layer 1, fifth column (MLP)
    assert_eq!(high, [9]);
}

#[test]
fn heatmap_input_errors() {
    let records = sample_records();
    assert!(render_heatmap_svg(&records, MetricKind::KlDiv, HeatmapAxes::LayerPosition).is_err());
    assert!(render_heatmap_svg(&records, MetricKind::LogitDiff, HeatmapAxes::LayerHead).is_err());
    let mut dup = records.clone();
    dup.push(records[0].clone());
    assert!(matches!(
        render_heatmap_svg(&dup, MetricKind::LogitDiff, HeatmapAxes::LayerPosition),
        Err(Error::Input(_))
    ));
}

#[test]
fn degenerate_heatmap_cells_are_gray() {
    let mut records = sample_records();
    records[0].normalized = None;
    let svg = render_heatmap_svg(&records, MetricKind::LogitDiff, HeatmapAxes::LayerPosition).unwrap();
    assert!(svg.contains("n/a"));
    assert!(svg.contains(r##"fill="#bdbdbd""##));
}

#[test]
fn figure2_shapes() {
    let series = figure2_series(12);
    let get = |name: &str| &series.iter().find(|s| s.name == name).unwrap().values;

    let ld = get("logit_diff");
    let steps: Vec<f64> = ld.windows(2).map(|w| w[1] - w[0]).collect();
    assert!(steps.iter().all(|d| (d - 1.0).abs() < 1e-12), "logit diff is linear");

    let rank = get("rank");
    assert!(rank.iter().all(|r| r.fract() == 0.0));
    let jumps = rank.windows(2).filter(|w| w[0] != w[1]).count();
    assert!(jumps >= 2 && jumps < rank.len() / 2, "rank is a step function");
    assert_eq!(*rank.last().unwrap(), 0.0);

    let p = get("prob");
    let n = p.len();
    let inc: Vec<f64> = p.windows(2).map(|w| w[1] - w[0]).collect();
    let steepest = inc.iter().cloned().fold(0.0, f64::max);
    assert!(p[0] < 0.01 && p[n - 1] > 0.95);
    assert!(inc[0] < steepest / 10.0 && inc[n - 2] < steepest / 3.0, "prob is flat at both ends");
    let lp = get("logprob");
    assert!(lp[n - 1] - lp[n - 2] < (lp[1] - lp[0]) / 10.0, "logprob saturates");
}

#[test]
fn line_chart_has_one_polyline_per_series() {
    let series = figure2_series(8);
    let svg = render_lines_svg(&series).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 4);
    assert_eq!(render_lines_svg(&series[..1]).unwrap().matches("<polyline").count(), 1);
    let rank = &series[3].values;
    let hi = rank.iter().cloned().fold(f64::MIN, f64::max);
    let lo = rank.iter().cloned().fold(f64::MAX, f64::min);
    assert!(svg.contains(&format!("rank [{lo:.4}, {hi:.4}]")));
    assert!(render_lines_svg(&[]).is_err());
    let empty = LineSeries {
        name: "x".into(),
        values: vec![],
    };
    assert!(render_lines_svg(&[empty]).is_err());
}

#[test]
fn lines_from_resid_records_use_the_last_position() {
    let records = sample_records();
    let series = lines_from_records(&records, &[MetricKind::LogitDiff, MetricKind::Rank]).unwrap();
    assert_eq!(series.len(), 2);
    assert_eq!(series[0].values.len(), 3);
    let expected: Vec<f64> = records
        .iter()
        .filter(|r| r.metric == MetricKind::LogitDiff && r.position == Some(1))
        .map(|r| r.normalized.unwrap())
        .collect();
    assert_eq!(series[0].values, expected);
    assert!(lines_from_records(&records, &[MetricKind::KlDiv]).is_err());
}
