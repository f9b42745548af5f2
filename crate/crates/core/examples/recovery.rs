//! Trains the solver on a synthetic benchmark and prints the checkpoint curve.
//!
//! Environment overrides: SEED, ITERS, BUDGET, HIDDEN, SNR, LAMBDA, LR, GAP.

use std::time::Instant;

use gmcr::metrics::match_components;
use gmcr::synth::{generate, SynthConfig};
use gmcr::{optimizer, HyperParams, ModelConfig};

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> gmcr::Result<()> {
    let seed: u64 = env("SEED", 0);
    let cfg = SynthConfig {
        seed,
        snr_db: Some(env("SNR", 30.0)),
        ..SynthConfig::default()
    };
    let truth = generate(&cfg)?;
    let model_cfg = ModelConfig {
        budget: env("BUDGET", 64),
        hidden: env("HIDDEN", 256),
        gate_init_gap: env("GAP", ModelConfig::default().gate_init_gap),
        ..ModelConfig::default()
    };
    let mut hp = HyperParams::for_dim(cfg.d);
    hp.seed = seed;
    hp.max_iters = env("ITERS", 20_000);
    hp.lambda_prime = env("LAMBDA", hp.lambda_prime);
    hp.adam.learning_rate = env("LR", hp.adam.learning_rate);
    let start = Instant::now();
    let out = optimizer::train(&truth.x_noisy, &model_cfg, &hp)?;
    for c in &out.checkpoints {
        println!(
            "iter {:>6}  total {:>12.1} recon {:>12.1} usage {:>9.1} dyn {:>8.1} static {:>9.1}  R2 {:.5}  EC {}",
            c.iteration,
            c.loss.total,
            c.loss.recon,
            c.loss.usage,
            c.loss.dyn_energy,
            c.loss.static_energy,
            c.r2.unwrap_or(f64::NAN),
            c.ec
        );
    }
    let best = out.best_checkpoint().expect("checkpoint");
    let pruned = best.pruned_model(&truth.x_noisy)?;
    let comps = pruned.dictionary.effective_components();
    let matches = match_components(&comps, &truth.s_true)?;
    let mut leak = 0.0;
    let mut leak_n = 0usize;
    let mut leaky = 0usize;
    for &(t, e) in &matches {
        for j in 0..cfg.d {
            if truth.s_true[[t, j]] == 0.0 {
                leak += comps[[e, j]].abs();
                leak_n += 1;
                if comps[[e, j]] != 0.0 {
                    leaky += 1;
                }
            }
        }
    }
    let usage = pruned.usage(&truth.x_noisy)?;
    for (e, u) in usage.iter().enumerate() {
        let (bt, bc) = (0..truth.s_true.nrows())
            .map(|t| (t, gmcr::metrics::cosine(truth.s_true.row(t), comps.row(e))))
            .fold((0, -1.0), |a, b| if b.1 > a.1 { b } else { a });
        let matched = matches.iter().any(|m| m.1 == e);
        let nnz = comps.row(e).iter().filter(|v| **v != 0.0).count();
        let norm = comps.row(e).dot(&comps.row(e)).sqrt();
        println!(
            "  comp {e:>2} usage {:.3} best-true {bt:>2} cos {bc:.4} nnz {nnz:>3} norm {norm:.3} {}",
            u,
            if matched { "M" } else { "" }
        );
    }
    println!(
        "best iter {} R2 {:?} EC {}  leakage {:e} ({} nonzero of {})  elapsed {:.1}s",
        best.iteration,
        best.r2,
        best.ec,
        leak / leak_n.max(1) as f64,
        leaky,
        leak_n,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
