//! Command-line entry point for the audio-visual idling-vehicle pipeline.
//!
//! One subcommand per pipeline stage; `synth`, `anchors`, `train`, `detect`
//! and `eval` compose end to end on their defaults. Exit codes: 0 success,
//! 1 for bad flags or invalid inputs, 2 for runtime failures.

mod args;
mod commands;

use std::process::ExitCode;

const USAGE: &str = "\
avfusion - joint audio-visual idling-vehicle detection

USAGE:
  avfusion <subcommand> [--flags]

SUBCOMMANDS:
  synth        generate a synthetic dataset
               --out DIR [--n 100] [--seed 0] [--vehicles 1,3] [--noise 0.01]
               [--video-noise 0.1] [--attenuation 0.2]
  anchors      cluster anchor shapes from a manifest
               --manifest FILE --out FILE [--k 5] [--seed 0]
               [--split train|val|all] [--split-frac 0.75]
  melspec      log-mel spectrogram of a WAV file
               --wav FILE --out FILE.tnsr [--dtype f32|f64] [--csv FILE]
               [--pgm PREFIX]
  train        train the detector
               --manifest FILE --out-dir DIR [--anchors FILE] [--epochs 20]
               [--lr 0.0001] [--batch-size 16] [--seed 0] [--grid 7,7]
               [--feat-dim 64] [--split-frac 0.75] [--checkpoint-every 5]
  detect       run detection over a dataset split
               --checkpoint FILE --manifest FILE --out FILE.jsonl
               [--split train|val|all] [--split-frac 0.75]
               [--conf-thresh 0.25] [--nms-iou 0.5] [--zero-audio]
               [--dump-attention DIR]
  eval         average precision report for a detections file
               --detections FILE --manifest FILE --out FILE.json
               [--split train|val|all] [--split-frac 0.75] [--iou 0.5]
               [--pr-csv FILE]
  export-traj  detection centers over time as CSV
               --detections FILE --out FILE.csv [--fps 25]
  gradcheck    verify every analytic gradient against central differences
               [--tolerance 1e-4]

Environment: AVFUSION_THREADS caps the worker count.
";

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    if argv.is_empty() || argv[0] == "--help" || argv[0] == "help" {
        print!("{USAGE}");
        return if argv.is_empty() { ExitCode::from(1) } else { ExitCode::SUCCESS };
    }
    let rest = &argv[1..];
    let result = match argv[0].as_str() {
        "synth" => commands::synth(rest),
        "anchors" => commands::anchors(rest),
        "melspec" => commands::melspec(rest),
        "train" => commands::train_cmd(rest),
        "detect" => commands::detect_cmd(rest),
        "eval" => commands::eval_cmd(rest),
        "export-traj" => commands::export_traj(rest),
        "gradcheck" => commands::gradcheck_cmd(rest),
        other => {
            eprintln!("unknown subcommand {other:?}\n\n{USAGE}");
            return ExitCode::from(1);
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
