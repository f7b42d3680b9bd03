//! Explore the design space with both samplers and print the Pareto fronts.

use plena::dse::{comparable_hypervolumes, explore, DseConfig, Evaluator, ExploreOptions, Sampler};

fn main() -> anyhow::Result<()> {
    let mut ev = Evaluator::new(DseConfig::default())?;
    let mut fronts = Vec::new();
    for sampler in [Sampler::Random, Sampler::GreedyLocal] {
        let r = explore(&mut ev, &ExploreOptions::new(50, sampler, 1))?;
        println!("{sampler:?}: {} draws, {} evaluated, {} on the front", r.trace.len(), r.evaluated().count(), r.front.len());
        println!("  {:>4} {:>4} {:>4} {:>10} {:>10} {:>11} {:>10}", "BLEN", "MLEN", "VLEN", "act", "acc", "latency s", "area");
        for t in r.front_points() {
            let (p, o) = (&t.point, t.objectives.unwrap());
            println!(
                "  {:>4} {:>4} {:>4} {:>10} {:>10.3e} {:>11.3e} {:>10.3e}",
                p.blen, p.mlen, p.vlen, p.act_fmt.0.to_string(), o.accuracy_proxy, o.latency_seconds, o.area_proxy
            );
        }
        fronts.push(r.front_points().iter().map(|t| t.objectives.unwrap().as_array()).collect());
    }
    let hv = comparable_hypervolumes(&fronts);
    println!("hypervolume: random {:.4}, greedy-local {:.4}", hv[0], hv[1]);
    Ok(())
}
