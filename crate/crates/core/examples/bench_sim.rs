use riskway::sim::*;
use riskway::risk::RiskParams;

fn main() {
    let scene = canonical_scene();
    let mut sim_cfg = SimConfig::default();
    sim_cfg.steps = 300;
    let params = RiskParams::default();
    let seeds: Vec<u64> = (1..=10).collect();

    // Criterion 6 numbers on the fixed canonical episode.
    let mpc = canonical_mpc_config();
    let trace = run_episode(&scene, &sim_cfg, &mpc, &params).unwrap();
    println!("canonical: avg_speed={:.4} long_dist={:.3} mean*30={:.3} min_dist={:.3} collision={}",
        trace.metrics.avg_speed, trace.metrics.long_dist, trace.metrics.avg_speed * 30.0,
        trace.metrics.min_distance, trace.metrics.collision);

    let t0 = std::time::Instant::now();
    for p_s in [0.0, 0.05, 0.15, 0.25] {
        let mut mpc_cfg = canonical_mpc_config();
        mpc_cfg.p_s = p_s;
        let (traces, summary) = run_batch(&scene, &sim_cfg, &mpc_cfg, &params, 10, &seeds).unwrap();
        let per: Vec<String> = traces.iter().map(|t| format!("{:.2}", t.metrics.min_distance)).collect();
        println!("p_s={p_s}: mean_min={:.4} (lo={:.2} hi={:.2}) mean_speed={:.3} collisions={} per-trial=[{}]",
            summary.min_distance.0, summary.min_distance.1, summary.min_distance.2,
            summary.avg_speed.0, summary.collisions, per.join(","));
    }
    println!("batch sweep took {:?}", t0.elapsed());
}
