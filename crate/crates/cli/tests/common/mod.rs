#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use inclino_core::dataset::write_series_csv;
use inclino_core::BoreholeSeries;
use nalgebra::DMatrix;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_inclino"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn write_csv(path: &Path, series: &[BoreholeSeries]) {
    let mut bytes = Vec::new();
    write_series_csv(&mut bytes, series).unwrap();
    std::fs::write(path, bytes).unwrap();
}

/// Sorted (name, bytes) of every file in `dir`.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p: PathBuf = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

/// Steady-state one-step innovation standard deviation of a single depth
/// (per axis) for the true model, from iterating the Riccati recursion.
pub fn steady_innovation_sd(dt: f64, sigma: f64, eps_m: f64, depth: f64) -> f64 {
    // one axis: state (q, p), F = [[1, dt], [0, 1]], Q = sigma * [[dt^3/3, dt^2/2], [dt^2/2, dt]]
    let f = DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]);
    let q = DMatrix::from_row_slice(2, 2, &[dt.powi(3) / 3.0, dt * dt / 2.0, dt * dt / 2.0, dt])
        * sigma;
    let r = (eps_m * depth).powi(2);
    let mut p = DMatrix::identity(2, 2);
    let mut s = 0.0;
    for _ in 0..10_000 {
        let pred = &f * &p * f.transpose() + &q;
        s = pred[(0, 0)] + r;
        let k0 = pred[(0, 0)] / s;
        let k1 = pred[(1, 0)] / s;
        let mut post = pred.clone();
        for j in 0..2 {
            post[(0, j)] = pred[(0, j)] - k0 * pred[(0, j)];
            post[(1, j)] = pred[(1, j)] - k1 * pred[(0, j)];
        }
        p = (&post + post.transpose()) * 0.5;
    }
    s.sqrt()
}
