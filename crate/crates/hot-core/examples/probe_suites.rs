fn main() {
    let seeds: Vec<u64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().unwrap())
        .collect();
    let seeds = if seeds.is_empty() { vec![0] } else { seeds };
    for seed in seeds {
        println!("== seed {seed} ==");
        for name in hot_core::verify::suite_names() {
            let r = hot_core::verify::run_suite(name, seed).unwrap();
            println!("{}", r.summary_line());
            for ch in &r.checks {
                if !ch.passed {
                    println!("  FAIL {}: {}", ch.name, ch.detail);
                }
            }
        }
    }
}
