//! Prints the pairwise outcome matrix of the simulated controllers.

use tcpllm::simnet::{run_scenario, CcaId, FlowConfig, LinkConfig, ScenarioTrace, SimConfig};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return 0.0;
    }
    let m = v.len() / 2;
    if v.len().is_multiple_of(2) { (v[m - 1] + v[m]) / 2.0 } else { v[m] }
}

fn jain(x: &[f64]) -> f64 {
    let s: f64 = x.iter().sum();
    let q: f64 = x.iter().map(|v| v * v).sum();
    s * s / (x.len() as f64 * q)
}

fn summary(t: &ScenarioTrace, from: f64) -> String {
    let mut out = String::new();
    let mut means = Vec::new();
    for f in &t.flows {
        let s: Vec<_> = f.samples.iter().filter(|s| s.time_s > from).collect();
        let thr: Vec<f64> = s.iter().map(|s| s.throughput_mbps).collect();
        let rtt: Vec<f64> = s.iter().map(|s| s.rtt_ms).collect();
        let loss: Vec<f64> = s.iter().map(|s| s.loss_rate).collect();
        let min5 = thr.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).fold(f64::INFINITY, f64::min);
        means.push(thr.iter().sum::<f64>() / thr.len() as f64);
        out += &format!(
            " f{}[{}] med {:6.2} min5 {:6.2} rtt {:5.2} loss {:.4} |",
            f.flow_id,
            f.samples.last().unwrap().cca,
            median(thr.clone()),
            min5,
            median(rtt),
            median(loss)
        );
    }
    if means.len() > 1 {
        out += &format!(" jain {:.3}", jain(&means));
    }
    out
}

fn main() {
    let link = LinkConfig::default();
    let mut cfg = SimConfig::default();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(1);
    // remaining arguments are `key=value` overrides of the controller constants
    let overrides: String = args.iter().skip(1).map(|a| format!("{a}\n")).collect();
    cfg.cca = toml::from_str(&overrides).expect("overrides parse as controller constants");
    for a in CcaId::ALL {
        let t = run_scenario(&link, &[FlowConfig::new(0, a)], &cfg, seed).unwrap();
        println!("solo {a:5}:{}", summary(&t, 10.0));
    }
    for a in CcaId::ALL {
        for b in CcaId::ALL {
            if b < a {
                continue;
            }
            let t = run_scenario(&link, &[FlowConfig::new(0, a), FlowConfig::new(1, b)], &cfg, seed).unwrap();
            println!("{a:5} v {b:5}:{}", summary(&t, 10.0));
        }
    }
    let t = run_scenario(
        &link,
        &[FlowConfig::new(0, CcaId::Bbr), FlowConfig::new(1, CcaId::Pcc).starting_at(10.0)],
        &cfg,
        seed,
    )
    .unwrap();
    println!("bbr then pcc:{}", summary(&t, 10.0));
    let t = run_scenario(
        &link,
        &[FlowConfig::new(0, CcaId::Cubic), FlowConfig::new(1, CcaId::Bbr).switching(50.0, CcaId::Cubic)],
        &cfg,
        seed,
    )
    .unwrap();
    println!("bbr->cubic @50 (post):{}", summary(&t, 50.0));
}
