//! One line per acceptance criterion; exits 1 when any is red.

use std::collections::BTreeMap;
use std::process::ExitCode;

use shiftcalc_verify::{configs_dir, judge, run_config, CRITERIA};

fn main() -> ExitCode {
    let dir = configs_dir();
    let mut runs = BTreeMap::new();
    for c in &CRITERIA {
        for &stem in c.configs {
            let key = c.run_key(stem);
            if runs.contains_key(&key) {
                continue;
            }
            match run_config(&dir, key) {
                Ok(r) => {
                    runs.insert(key, r);
                }
                Err(e) => {
                    eprintln!("{stem}: {e}");
                    return ExitCode::from(2);
                }
            }
        }
    }
    let outcomes: Vec<_> = CRITERIA.iter().map(|c| judge(c, &runs)).collect();
    for o in &outcomes {
        let budget = if o.budget_s.is_finite() { format!("{:.0} s", o.budget_s) } else { "none".into() };
        println!(
            "{}  {:<42} {:>3}/{:<3} checks pass  {:>7.1} s (budget {budget}){}",
            if o.pass { "PASS" } else { "FAIL" },
            o.label,
            o.checks - o.failed.len(),
            o.checks,
            o.wall_s,
            if o.over_budget() { "  OVER BUDGET" } else { "" },
        );
    }
    let red: Vec<_> = outcomes.iter().filter(|o| !o.pass).collect();
    println!("{} of {} criteria pass", outcomes.len() - red.len(), outcomes.len());
    for o in &red {
        for f in &o.failed {
            eprintln!("  {}: {f}", o.label);
        }
    }
    if red.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
