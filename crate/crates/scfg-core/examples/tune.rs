//! Scratch harness for studying the paired-comparison dynamics under
//! different architecture knobs. Not part of the deliverable surface.

use scfg_core::denoiser::ArchitectureConfig;
use scfg_core::pipeline::{compare_cfg_scfg, dispersion_stat, run_sampling, ModelSpec, RunConfig};

struct Knobs {
    gain: f64,
    gate: f64,
    pos: f64,
    beta_end: f64,
}

fn scenario(k: &Knobs) -> RunConfig {
    let mut config = RunConfig::standard_toy();
    config.schedule.beta_end = k.beta_end;
    if let ModelSpec::Attention(arch) = &mut config.model {
        arch.attention_gain = k.gain;
        arch.gate_strength = k.gate;
        arch.positional_strength = k.pos;
    }
    config
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("sweep");

    match mode {
        "sweep" => {
            println!("gain  gate  pos  b_end | frac_lower mean_cfg mean_scfg");
            for &gain in &[2.0] {
                for &gate in &[0.5, 1.0, 2.0, 4.0] {
                    for &pos in &[1.0] {
                        for &beta_end in &[0.2, 0.08, 0.03] {
                            let k = Knobs { gain, gate, pos, beta_end };
                            let summary = compare_cfg_scfg(&scenario(&k), 6).unwrap();
                            println!(
                                "{gain:4} {gate:5} {pos:4} {beta_end:6} | {:10.3} {:8.4} {:9.4}",
                                summary.fraction_scfg_lower,
                                summary.mean_cv_cfg,
                                summary.mean_cv_scfg
                            );
                        }
                    }
                }
            }
        }
        "grid" => {
            // args: gain feedback pos beta_end seeds
            let k = Knobs {
                gain: args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2.0),
                gate: args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1.0),
                pos: args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1.0),
                beta_end: args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.2),
            };
            let seeds: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(20);
            let summary = compare_cfg_scfg(&scenario(&k), seeds).unwrap();
            println!(
                "frac_lower {:.3}  mean_cfg {:.5}  mean_scfg {:.5}",
                summary.fraction_scfg_lower, summary.mean_cv_cfg, summary.mean_cv_scfg
            );
            for p in summary.per_step.iter().take(10) {
                println!("  t={:3} cfg {:.4} scfg {:.4}", p.t, p.cv_cfg_mean, p.cv_scfg_mean);
            }
        }
        "per-seed" => {
            let k = Knobs {
                gain: args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2.0),
                gate: args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1.0),
                pos: args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1.0),
                beta_end: args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.2),
            };
            println!("seed  frac_lower  mean_cfg  mean_scfg");
            for offset in 0..10u64 {
                let mut config = scenario(&k);
                config.seed = 17 + offset;
                config.guidance.mode = scfg_core::guidance::GuidanceMode::Cfg;
                let cfg_run = run_sampling(&config).unwrap();
                config.guidance.mode = scfg_core::guidance::GuidanceMode::Scfg;
                let scfg_run = run_sampling(&config).unwrap();
                let a = dispersion_stat(&cfg_run.log);
                let b = dispersion_stat(&scfg_run.log);
                let lower = a.iter().zip(b.iter()).filter(|((_, x), (_, y))| y < x).count();
                let mean =
                    |v: &[(usize, f64)]| v.iter().map(|(_, c)| c).sum::<f64>() / v.len() as f64;
                println!(
                    "{:4}  {:10.3}  {:8.4}  {:9.4}",
                    config.seed,
                    lower as f64 / a.len() as f64,
                    mean(&a),
                    mean(&b)
                );
            }
        }
        "trace" => {
            let k = Knobs {
                gain: args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2.0),
                gate: args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1.0),
                pos: args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1.0),
                beta_end: args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.2),
            };
            let mut config = scenario(&k);
            config.seed = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(23);

            config.guidance.mode = scfg_core::guidance::GuidanceMode::Cfg;
            let cfg_run = run_sampling(&config).unwrap();
            config.guidance.mode = scfg_core::guidance::GuidanceMode::Scfg;
            let scfg_run = run_sampling(&config).unwrap();

            let cv_cfg = dispersion_stat(&cfg_run.log);
            let cv_scfg = dispersion_stat(&scfg_run.log);
            for (i, (a, b)) in cfg_run.log.steps.iter().zip(scfg_run.log.steps.iter()).enumerate()
            {
                let fmt = |v: &[f64]| {
                    v.iter().map(|x| format!("{x:7.4}")).collect::<Vec<_>>().join(" ")
                };
                let sizes = |v: &[usize]| {
                    v.iter().map(|x| format!("{x:3}")).collect::<Vec<_>>().join(" ")
                };
                println!(
                    "t={:3} | {} ({}) cv={:.4} | {} ({}) cv={:.4} | g=[{}]",
                    a.t,
                    fmt(&a.classifier_norms),
                    sizes(&a.region_sizes),
                    cv_cfg[i].1,
                    fmt(&b.classifier_norms),
                    sizes(&b.region_sizes),
                    cv_scfg[i].1,
                    fmt(&b.scales),
                );
            }
        }
        other => eprintln!("unknown mode {other}"),
    }
}
