use std::collections::BTreeMap;

use proptest::prelude::*;

use wmsn_core::model::{LossModel, Position, SensorKind, SensorSlot};
use wmsn_core::power::PmuCommand;
use wmsn_core::scenario::{BatterySpec, LinkOverride, NodeConfig, ScriptAction, ScriptEntry};
use wmsn_core::sensing::{Baseline, FieldEvent};
use wmsn_core::{parse_scenario, CoreState, NodeId, ParseOptions, Scenario};

fn kind() -> impl Strategy<Value = SensorKind> {
    prop::sample::select(SensorKind::ALL.to_vec())
}

fn battery() -> impl Strategy<Value = BatterySpec> {
    prop_oneof![Just(BatterySpec::TwoAA), Just(BatterySpec::Mains), (1.0f64..5000.0).prop_map(BatterySpec::Capacity)]
}

fn node(id: u16, gateway: bool) -> impl Strategy<Value = NodeConfig> {
    (
        (-500.0f64..500.0, -500.0f64..500.0, battery()),
        prop::sample::subsequence(SensorSlot::full_board(), 0..=SensorSlot::full_board().len()),
        (0.01f64..50.0, prop::collection::btree_map(kind(), 0.01f64..50.0, 0..3)),
        (1.0f64..1000.0, any::<bool>(), prop::option::of(60.0f64..10_000.0)),
        (1u64..2_000_000, 0.0f64..10.0, 0.0f64..4.0),
        prop::option::of(0usize..9),
    )
        .prop_map(move |((x, y, battery), sensors, (theta, per_kind), (sp, sampling, mm), (img, linger, boot), init)| {
            let mut n = if gateway { NodeConfig::gateway(id, x, y) } else { NodeConfig::sensor(id, x, y) };
            n.battery = battery;
            n.sensors = sensors;
            n.thresholds.default = theta;
            n.thresholds.per_kind = per_kind;
            n.sample_period_s = sp;
            n.sampling = sampling;
            n.multimedia_period_s = mm;
            n.image_bytes = img;
            n.linger_s = linger;
            n.boot_delay_s = boot;
            n.initial_state = init.and_then(CoreState::from_index);
            n
        })
}

fn scenario() -> impl Strategy<Value = Scenario> {
    (1usize..7, 0usize..7)
        .prop_flat_map(|(count, gw)| {
            let gw = gw % count;
            let nodes: Vec<_> = (0..count).map(|i| node(i as u16 * 3 + 1, i == gw)).collect();
            (nodes, Just(count))
        })
        .prop_flat_map(|(nodes, count)| {
            let ids: Vec<NodeId> = nodes.iter().map(|n| n.id).collect();
            let id = prop::sample::select(ids.clone());
            // Two distinct ids; only drawn when there are at least two nodes.
            let pair = {
                let ids = ids.clone();
                (0..count, 1..count.max(2)).prop_map(move |(i, d)| (ids[i], ids[(i + d) % count]))
            };
            let link = (pair.clone(), 0.0f64..=1.0, any::<bool>())
                .prop_map(|((a, b), loss, directed)| LinkOverride { a, b, loss, directed });
            let single = prop_oneof![
                id.clone().prop_map(|node| ScriptAction::Capture { node }),
                (id.clone(), prop::sample::select(PmuCommand::ALL.to_vec()))
                    .prop_map(|(node, command)| ScriptAction::Pmu { node, command }),
            ];
            let action = if count > 1 {
                prop_oneof![
                    single,
                    pair.clone().prop_map(|(a, b)| ScriptAction::LinkDown { a, b }),
                    pair.prop_map(|(a, b)| ScriptAction::LinkUp { a, b }),
                ]
                .boxed()
            } else {
                single.boxed()
            };
            let links = if count > 1 { prop::collection::vec(link, 0..3).boxed() } else { Just(vec![]).boxed() };
            let script = prop::collection::vec((0.0f64..1.0, action), 0..4);
            (
                Just(nodes),
                links,
                script,
                (1.0f64..1e6, 0u64..i64::MAX as u64),
                (prop_oneof![(0.0f64..=1.0).prop_map(LossModel::Constant), (0.0f64..=1.0).prop_map(|max| LossModel::LinearDistance { max })]),
                (1_000u64..50_000_000, 1.0f64..300.0, 0.0f64..0.01),
                (0.1f64..30.0, 1.0f64..120.0, 1u32..6, 1u8..=255),
                (any::<bool>(), 1.0f64..3600.0, 1u32..4000, 0u32..8, 5.0f64..30.0, any::<bool>()),
                prop::collection::btree_map(kind(), (-100.0f64..100.0, -1.0f64..1.0, -50.0f64..50.0, 100.0f64..1e5), 0..4),
                prop::collection::vec((0.0f64..1e5, 1.0f64..1e4, -100.0f64..100.0, 0.0f64..200.0, kind(), -100.0f64..100.0), 0..3),
                prop::collection::btree_map(kind(), 0.0f64..5.0, 0..3),
                prop::collection::btree_map(0usize..9, 0.001f64..1000.0, 0..3),
            )
        })
        .prop_map(
            |(nodes, links, script, (duration, seed), base, (cbw, crange, over), (hello, update, hold, hop), eng, baselines, events, noise, energy)| {
                let mut sc = Scenario::new(duration);
                sc.seed = seed;
                sc.nodes = nodes;
                sc.link_loss.base = base;
                sc.link_loss.overrides = links;
                sc.script = script.into_iter().map(|(f, action)| ScriptEntry { at_s: f * duration, action }).collect();
                sc.control.bandwidth_bps = cbw;
                sc.control.range_m = crange;
                sc.bulk.per_hop_overhead_s = over;
                sc.routing.hello_interval_s = hello;
                sc.routing.update_interval_s = update;
                sc.routing.hold_multiplier = hold;
                sc.routing.request_hop_limit = hop;
                let (routing, cp, chunk, retries, wake, scalar) = eng;
                sc.engine.routing = routing;
                sc.engine.checkpoint_interval_s = cp;
                sc.engine.chunk_bytes = chunk;
                sc.engine.max_retries = retries;
                sc.engine.wake_timeout_s = wake;
                sc.engine.scalar_during_multimedia = scalar;
                sc.field.baselines = baselines
                    .into_iter()
                    .map(|(k, (value, gradient_x, diurnal_amplitude, diurnal_period_s))| {
                        (k, Baseline { value, gradient_x, gradient_y: -gradient_x, diurnal_amplitude, diurnal_period_s })
                    })
                    .collect();
                sc.field.events = events
                    .into_iter()
                    .map(|(start_s, duration_s, x, radius_m, kind, delta)| FieldEvent {
                        start_s,
                        duration_s,
                        center: Position::new(x, -x),
                        radius_m,
                        kind,
                        delta,
                    })
                    .collect();
                sc.field.noise = noise;
                for (i, ma) in energy {
                    sc.energy = sc.energy.clone().with_current(CoreState::from_index(i).unwrap(), ma).unwrap();
                }
                // Keep the chunk count within a u16 for whatever chunk size was drawn.
                for n in &mut sc.nodes {
                    n.image_bytes = n.image_bytes.min(sc.engine.chunk_bytes as u64 * 60_000);
                }
                sc
            },
        )
}

/// Known-invalid edits and the issue path each must produce.
#[derive(Debug, Clone, Copy)]
enum Mutation {
    NegativeDuration,
    ZeroBandwidth,
    ZeroHold,
    ZeroChunk,
    BadLoss,
    ZeroThreshold,
    DuplicateId,
    SecondGateway,
    ScriptUnknownNode,
    SlowBoot,
    BadSlot,
}

fn apply(sc: &mut Scenario, m: Mutation) -> Vec<String> {
    let last = sc.nodes.len() - 1;
    let sensor = sc.nodes.iter().position(|n| !n.gateway);
    vec![match m {
        Mutation::NegativeDuration => {
            sc.duration_s = -1.0;
            // Every script time now lies outside [0, duration_s].
            let mut paths: Vec<String> = (0..sc.script.len()).map(|i| format!("script[{i}].at_s")).collect();
            paths.push("duration_s".into());
            return paths;
        }
        Mutation::ZeroBandwidth => {
            sc.control.bandwidth_bps = 0;
            "radio.control.bandwidth_bps".into()
        }
        Mutation::ZeroHold => {
            sc.routing.hold_multiplier = 0;
            "routing.hold_multiplier".into()
        }
        Mutation::ZeroChunk => {
            sc.engine.chunk_bytes = 0;
            "engine.chunk_bytes".into()
        }
        Mutation::BadLoss => {
            sc.link_loss.base = LossModel::Constant(1.5);
            "link_loss.value".into()
        }
        Mutation::ZeroThreshold => {
            sc.nodes[0].thresholds.default = 0.0;
            "node[0].threshold".into()
        }
        Mutation::DuplicateId => {
            if last == 0 {
                return vec![];
            }
            let dup = sc.nodes[0].id;
            let old = sc.nodes[last].id;
            sc.nodes[last].id = dup;
            sc.link_loss.overrides.retain(|o| o.a != old && o.b != old);
            sc.script.retain(|s| !mentions(s, old));
            format!("node[{last}].id")
        }
        Mutation::SecondGateway => {
            let Some(i) = sensor else { return vec![] };
            sc.nodes[i].gateway = true;
            "node".into()
        }
        Mutation::ScriptUnknownNode => {
            sc.script.push(ScriptEntry { at_s: 0.0, action: ScriptAction::Capture { node: NodeId(60_000) } });
            format!("script[{}].node", sc.script.len() - 1)
        }
        Mutation::SlowBoot => {
            sc.nodes[0].boot_delay_s = sc.engine.wake_timeout_s + 1.0;
            "node[0].boot_delay_s".into()
        }
        Mutation::BadSlot => {
            sc.nodes[0].sensors = vec![SensorSlot::new(SensorKind::Light, 1)];
            "node[0].sensors".into()
        }
    }]
}

fn mentions(s: &ScriptEntry, id: NodeId) -> bool {
    match s.action {
        ScriptAction::Capture { node } | ScriptAction::Pmu { node, .. } => node == id,
        ScriptAction::LinkDown { a, b } | ScriptAction::LinkUp { a, b } => a == id || b == id,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn generated_scenarios_are_valid(sc in scenario()) {
        prop_assert_eq!(sc.validate(), vec![]);
    }

    #[test]
    fn toml_round_trip(sc in scenario()) {
        let text = sc.to_toml();
        let back = parse_scenario(&text, ParseOptions::default()).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
        prop_assert!(back.warnings.is_empty());
        prop_assert_eq!(&back.scenario, &sc);
        prop_assert_eq!(back.scenario.hash(), sc.hash());
        prop_assert_eq!(back.scenario.to_toml(), text);
    }

    #[test]
    fn mutations_are_reported_exactly(sc in scenario(), ms in prop::collection::btree_set(mutation_index(), 1..5)) {
        let mut sc = sc;
        let mut expected: BTreeMap<String, usize> = BTreeMap::new();
        for i in ms {
            for path in apply(&mut sc, MUTATIONS[i]) {
                *expected.entry(path).or_default() += 1;
            }
        }
        let mut got: BTreeMap<String, usize> = BTreeMap::new();
        for issue in sc.validate() {
            *got.entry(issue.path).or_default() += 1;
        }
        for path in expected.keys() {
            prop_assert!(got.contains_key(path), "missing {} in {:?}", path, got);
        }
        for path in got.keys() {
            prop_assert!(expected.contains_key(path), "unexpected {} (expected {:?})", path, expected);
        }
        if !expected.is_empty() {
            let text = sc.to_toml();
            match parse_scenario(&text, ParseOptions::default()) {
                Ok(_) => prop_assert!(false, "invalid scenario parsed"),
                Err(e) => {
                    let paths: Vec<&str> = e.issues().iter().map(|i| i.path.as_str()).collect();
                    for path in expected.keys() {
                        prop_assert!(paths.contains(&path.as_str()), "parser missed {}: {:?}", path, paths);
                    }
                }
            }
        }
    }
}

/// Draw order; the negative duration goes last because it invalidates every
/// script time, including ones added by earlier mutations.
const MUTATIONS: [Mutation; 11] = [
    Mutation::ZeroBandwidth,
    Mutation::ZeroHold,
    Mutation::ZeroChunk,
    Mutation::BadLoss,
    Mutation::ZeroThreshold,
    Mutation::DuplicateId,
    Mutation::SecondGateway,
    Mutation::ScriptUnknownNode,
    Mutation::SlowBoot,
    Mutation::BadSlot,
    Mutation::NegativeDuration,
];

fn mutation_index() -> impl Strategy<Value = usize> {
    0..MUTATIONS.len()
}
