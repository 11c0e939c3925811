//! The scripted three-peer scenario shared by the golden tests.

use vodsim::config::RunConfig;
use vodsim::domain::SegmentId;
use vodsim::overlay::PeerId;
use vodsim::time::{SimDuration, SimTime};
use vodsim::topology::NetworkTopology;
use vodsim::workload::{TraceEvent, TraceKind, ViewerTrace};
use vodsim::Strategy;

pub const MICRO_TIMELINE: &str = include_str!("../golden/micro_timeline.txt");

const RATE: u64 = 512_000;

fn trace(peer: u32, arrival_s: f64, seeks: &[(f64, u32)]) -> ViewerTrace {
    ViewerTrace {
        peer: PeerId(peer),
        arrival: SimTime::from_secs_f64(arrival_s),
        events: seeks
            .iter()
            .map(|&(t, label)| TraceEvent { time: SimTime::from_secs_f64(t), kind: TraceKind::Seek(SegmentId::from_label(label)) })
            .collect(),
    }
}

pub fn micro_scenario() -> (RunConfig, NetworkTopology, Vec<ViewerTrace>) {
    let mut cfg = RunConfig { strategy: Strategy::Random, duration_s: 200.0, ..RunConfig::default() };
    cfg.params.budget = 0;
    cfg.params.urgent_window_s = 0;
    let ms = SimDuration::from_millis;
    let topo = NetworkTopology::star(ms(5), 20_000_000, &[(ms(6), RATE, RATE), (ms(8), RATE, RATE), (ms(10), RATE, RATE)]);
    let traces = vec![
        trace(0, 0.0, &[(20.5, 5), (185.0, 203)]),
        trace(1, 30.0, &[(40.2, 15), (190.0, 600)]),
        trace(2, 155.0, &[(165.3, 200)]),
    ];
    (cfg, topo, traces)
}
