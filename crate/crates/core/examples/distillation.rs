//! Teacher, mono-modal baseline and distilled student on synthetic data.
//!
//! ```text
//! cargo run --release --example distillation -- [epochs] [seeds] [base_filters] [lr] [size] [subjects] [batch_size]
//! ```

use std::time::Instant;

use kdseg::data::{prepare_sample, split_folds, synth_generate, Dataset, Modality, Preprocess, SYNTH_MODALITIES};
use kdseg::evaluation::evaluate;
use kdseg::network::NetworkConfig;
use kdseg::training::{train_baseline, train_student, train_teacher, EpochMetrics, RunOptions, Stage, TrainConfig};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|a| a.parse().ok()).unwrap_or(default)
}

fn main() -> kdseg::Result<()> {
    let epochs = arg(1, 30);
    let seeds = arg(2, 3u64);
    let base_filters = arg(3, 4);
    let lr = arg(4, 1e-3);
    let size = arg(5, 32);
    let subjects = arg(6, 60);
    let batch_size = arg(7, 2);
    let verbose = std::env::var_os("KDSEG_VERBOSE").is_some();
    let net_cfg = NetworkConfig {
        depth: 2,
        base_filters,
        skip_connections: 2,
        ..NetworkConfig::default()
    };
    for seed in 0..seeds {
        let started = Instant::now();
        let samples = synth_generate(subjects, size, seed)?
            .iter()
            .map(|(s, l)| prepare_sample(s, l, &Preprocess::identity()))
            .collect::<kdseg::Result<Vec<_>>>()?;
        let data = Dataset {
            modalities: SYNTH_MODALITIES.to_vec(),
            samples,
        };
        let split = split_folds(&data.subject_ids(), 3, seed)?;
        let train = data.subset(&split.training(0));
        let val = data.subset(&split.validation(0));
        let cfg = TrainConfig {
            epochs,
            lr,
            batch_size,
            seed,
            student_modality: Modality::Flair,
            ..TrainConfig::default()
        };
        let mono = val.select(&[Modality::Flair])?;
        let mut log = |stage: Stage, m: &EpochMetrics| {
            if verbose {
                eprintln!("{} {m:?}", stage.name());
            }
        };
        let teacher = train_teacher(
            &cfg,
            &net_cfg,
            &train,
            &val,
            RunOptions {
                run_dir: None,
                progress: Some(&mut log),
            },
        )?;
        let t = evaluate(&teacher.best, &val, 0.5)?;
        let baseline = train_baseline(
            &cfg,
            &net_cfg,
            &train,
            &val,
            RunOptions {
                run_dir: None,
                progress: Some(&mut log),
            },
        )?;
        let b = evaluate(&baseline.best, &mono, 0.5)?;
        let frozen = teacher.best.freeze();
        let student = train_student(
            &cfg,
            &net_cfg,
            &frozen,
            &train,
            &val,
            RunOptions {
                run_dir: None,
                progress: Some(&mut log),
            },
        )?;
        let s = evaluate(&student.best, &mono, 0.5)?;
        println!(
            "seed {seed}: teacher {:.2}/{:.2}/{:.2}  baseline {:.2}/{:.2}/{:.2}  student {:.2}/{:.2}/{:.2}  (WT/TC/ET, best epochs {}/{}/{}, {:.0}s)",
            t.wt, t.tc, t.et, b.wt, b.tc, b.et, s.wt, s.tc, s.et,
            teacher.best_epoch, baseline.best_epoch, student.best_epoch,
            started.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
