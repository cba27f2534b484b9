//! Exact solutions of the parametric 1-D linear advection problem and the
//! snapshot datasets built from them.
//!
//! The transported profile is a narrow Gaussian, so the solution is
//! evaluated directly with no boundary wrapping: away from its center the
//! pulse is numerically zero.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

/// On-disk format version of a dataset directory.
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Uniform space/time discretization of the domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub x0: f64,
    pub x1: f64,
    pub nt: usize,
    pub t_final: f64,
}

impl GridSpec {
    pub fn new(nx: usize, x0: f64, x1: f64, nt: usize, t_final: f64) -> Result<Self> {
        let g = GridSpec {
            nx,
            x0,
            x1,
            nt,
            t_final,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.nt < 2 {
            return Err(Error::invalid(format!(
                "grid needs nx >= 2 and nt >= 2, got nx={}, nt={}",
                self.nx, self.nt
            )));
        }
        if !(self.x1 > self.x0) || !self.t_final.is_finite() || self.t_final <= 0.0 {
            return Err(Error::invalid(format!(
                "grid needs x1 > x0 and t_final > 0, got x0={}, x1={}, t_final={}",
                self.x0, self.x1, self.t_final
            )));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        (self.x1 - self.x0) / (self.nx - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        self.t_final / (self.nt - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x0 + i as f64 * self.dx()
    }

    pub fn t(&self, j: usize) -> f64 {
        j as f64 * self.dt()
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.nx).map(|i| self.x(i)).collect()
    }

    pub fn ts(&self) -> Vec<f64> {
        (0..self.nt).map(|j| self.t(j)).collect()
    }
}

/// Gaussian initial pulse `f(x) = exp(-(x-x_center)²/(2σ)) / sqrt(2πσ)`.
///
/// `sigma_g` enters the formula linearly (not squared); the effective pulse
/// width is `sqrt(sigma_g)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialProfile {
    pub sigma_g: f64,
    pub x_center: f64,
}

impl Default for InitialProfile {
    fn default() -> Self {
        InitialProfile {
            sigma_g: 5e-3,
            x_center: 0.0,
        }
    }
}

impl InitialProfile {
    pub fn new(sigma_g: f64, x_center: f64) -> Result<Self> {
        if !(sigma_g > 0.0) || !sigma_g.is_finite() || !x_center.is_finite() {
            return Err(Error::invalid(format!(
                "profile needs sigma_g > 0, got sigma_g={sigma_g}, x_center={x_center}"
            )));
        }
        Ok(InitialProfile { sigma_g, x_center })
    }

    pub fn evaluate(&self, x: f64) -> f64 {
        let d = x - self.x_center;
        (-d * d / (2.0 * self.sigma_g)).exp() / (2.0 * std::f64::consts::PI * self.sigma_g).sqrt()
    }
}

/// Exact advection solution `U(x,t) = f(x - mu·t)`.
pub fn exact_solution(mu: f64, x: f64, t: f64, profile: &InitialProfile) -> f64 {
    profile.evaluate(x - mu * t)
}

/// Training wave speeds with the interleaved test midpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterGrid {
    pub mu_train: Vec<f64>,
    pub mu_test: Vec<f64>,
}

/// Endpoint-inclusive uniform training grid over `[mu_min, mu_max]` plus the
/// consecutive-midpoint test grid (one fewer entry).
pub fn make_parameter_grid(mu_min: f64, mu_max: f64, n_train: usize) -> Result<ParameterGrid> {
    if n_train < 2 {
        return Err(Error::invalid(format!(
            "parameter grid needs n_train >= 2, got {n_train}"
        )));
    }
    if !(mu_max > mu_min) || !mu_min.is_finite() || !mu_max.is_finite() {
        return Err(Error::invalid(format!(
            "degenerate wave-speed range [{mu_min}, {mu_max}]"
        )));
    }
    let h = (mu_max - mu_min) / (n_train - 1) as f64;
    let mut mu_train: Vec<f64> = (0..n_train).map(|i| mu_min + i as f64 * h).collect();
    mu_train[n_train - 1] = mu_max;
    let mu_test: Vec<f64> = mu_train
        .windows(2)
        .map(|w| 0.5 * (w[0] + w[1]))
        .collect();
    Ok(ParameterGrid { mu_train, mu_test })
}

/// Snapshot tensor of exact solutions over (wave speed, time, space).
#[derive(Clone, Debug, PartialEq)]
pub struct WaveDataset {
    pub grid: GridSpec,
    pub profile: InitialProfile,
    pub mu_values: Vec<f64>,
    /// Shape `[n_mu, nt, nx]`, C-order.
    pub snapshots: Tensor,
}

impl WaveDataset {
    pub fn n_mu(&self) -> usize {
        self.mu_values.len()
    }

    /// Spatial profile at wave-speed index `m`, time index `j`.
    pub fn field(&self, m: usize, j: usize) -> &[f64] {
        let nx = self.grid.nx;
        let base = (m * self.grid.nt + j) * nx;
        &self.snapshots.data()[base..base + nx]
    }

    pub fn max_abs(&self) -> f64 {
        self.snapshots.max_abs()
    }
}

/// Evaluates the exact solution on the full grid for every wave speed.
pub fn generate_dataset(
    grid: &GridSpec,
    profile: &InitialProfile,
    mu_values: &[f64],
) -> Result<WaveDataset> {
    grid.validate()?;
    InitialProfile::new(profile.sigma_g, profile.x_center)?;
    if mu_values.is_empty() {
        return Err(Error::invalid("generate_dataset: empty wave-speed list"));
    }
    if !mu_values.iter().all(|m| m.is_finite() && *m > 0.0) {
        return Err(Error::invalid(
            "generate_dataset: wave speeds must be finite and positive",
        ));
    }
    let (nm, nt, nx) = (mu_values.len(), grid.nt, grid.nx);
    let xs = grid.xs();
    let ts = grid.ts();
    let mut data = Vec::with_capacity(nm * nt * nx);
    for &mu in mu_values {
        for &t in &ts {
            for &x in &xs {
                data.push(exact_solution(mu, x, t, profile));
            }
        }
    }
    let snapshots = Tensor::new(&[nm, nt, nx], data)?;
    if !snapshots.all_finite() {
        return Err(Error::NonFinite("generate_dataset".into()));
    }
    Ok(WaveDataset {
        grid: *grid,
        profile: *profile,
        mu_values: mu_values.to_vec(),
        snapshots,
    })
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    version: u32,
    nx: usize,
    x0: f64,
    x1: f64,
    nt: usize,
    t_final: f64,
    sigma_g: f64,
    x_center: f64,
    mu: Vec<f64>,
    dtype: String,
    layout: String,
}

/// Writes `meta.json` + `snapshots.bin` (raw little-endian f64, C-order
/// `[mu][t][x]`) into `dir`, creating it if needed.
pub fn write_dataset(ds: &WaveDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = DatasetMeta {
        version: DATASET_FORMAT_VERSION,
        nx: ds.grid.nx,
        x0: ds.grid.x0,
        x1: ds.grid.x1,
        nt: ds.grid.nt,
        t_final: ds.grid.t_final,
        sigma_g: ds.profile.sigma_g,
        x_center: ds.profile.x_center,
        mu: ds.mu_values.clone(),
        dtype: "f64le".into(),
        layout: "mu,t,x".into(),
    };
    let meta_json = serde_json::to_string_pretty(&meta)?;
    fs::write(dir.join("meta.json"), meta_json)?;
    let mut bytes = Vec::with_capacity(ds.snapshots.len() * 8);
    for v in ds.snapshots.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(dir.join("snapshots.bin"))?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Reads a dataset directory written by [`write_dataset`]; the round trip is
/// bit-exact.
pub fn read_dataset(dir: &Path) -> Result<WaveDataset> {
    let meta_raw = fs::read_to_string(dir.join("meta.json"))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_raw)?;
    if meta.version != DATASET_FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported dataset format version {} (expected {})",
            meta.version, DATASET_FORMAT_VERSION
        )));
    }
    if meta.dtype != "f64le" || meta.layout != "mu,t,x" {
        return Err(Error::format(format!(
            "unsupported dtype/layout: {}/{}",
            meta.dtype, meta.layout
        )));
    }
    let grid = GridSpec::new(meta.nx, meta.x0, meta.x1, meta.nt, meta.t_final)?;
    let profile = InitialProfile::new(meta.sigma_g, meta.x_center)?;
    if meta.mu.is_empty() {
        return Err(Error::format("dataset has an empty wave-speed list"));
    }
    let expected = meta.mu.len() * meta.nt * meta.nx;
    let mut f = fs::File::open(dir.join("snapshots.bin"))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    if bytes.len() != expected * 8 {
        return Err(Error::format(format!(
            "snapshots.bin holds {} bytes, metadata implies {}",
            bytes.len(),
            expected * 8
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let snapshots = Tensor::new(&[meta.mu.len(), meta.nt, meta.nx], data)?;
    if !snapshots.all_finite() {
        return Err(Error::format("snapshots.bin contains non-finite values"));
    }
    Ok(WaveDataset {
        grid,
        profile,
        mu_values: meta.mu,
        snapshots,
    })
}

/// Writes a bare `[rows, cols]` field in the same binary convention as
/// dataset snapshots (`data.bin` + `meta.json` with a `kind` marker).
pub fn write_field(field: &Tensor, dir: &Path, kind: &str) -> Result<()> {
    if field.rank() != 2 {
        return Err(Error::shape(format!(
            "write_field expects rank 2, got {:?}",
            field.shape()
        )));
    }
    fs::create_dir_all(dir)?;
    let meta = serde_json::json!({
        "version": DATASET_FORMAT_VERSION,
        "kind": kind,
        "rows": field.shape()[0],
        "cols": field.shape()[1],
        "dtype": "f64le",
        "layout": "row,col",
    });
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    let mut bytes = Vec::with_capacity(field.len() * 8);
    for v in field.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join("data.bin"), bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_peak_value() {
        // 1/sqrt(2π·0.005) at the pulse center
        let p = InitialProfile::default();
        let peak = exact_solution(1.0, 0.0, 0.0, &p);
        assert!((peak - 5.6419).abs() < 1e-4);
        assert!((peak - 1.0 / (2.0 * std::f64::consts::PI * 5e-3).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn initial_condition_ignores_mu() {
        let p = InitialProfile::default();
        let a = exact_solution(0.9, 0.3, 0.0, &p);
        let b = exact_solution(1.2, 0.3, 0.0, &p);
        assert_eq!(a, b);
        assert_eq!(a, p.evaluate(0.3));
    }

    #[test]
    fn translation_in_time_equals_shift_in_space() {
        let p = InitialProfile::default();
        assert_eq!(
            exact_solution(1.0, 0.3, 0.1, &p),
            exact_solution(1.0, 0.2, 0.0, &p)
        );
        // general grid-aligned shifts
        for &(mu, x, t, dt) in &[(1.0, 0.41, 0.2, 0.05), (0.85, 0.7, 0.5, 0.125)] {
            let lhs = exact_solution(mu, x, t + dt, &p);
            let rhs = exact_solution(mu, x - mu * dt, t, &p);
            assert!((lhs - rhs).abs() <= 1e-12);
        }
    }

    #[test]
    fn parameter_grid_paper_range() {
        let g = make_parameter_grid(0.775, 1.25, 20).unwrap();
        assert_eq!(g.mu_train.len(), 20);
        assert_eq!(g.mu_test.len(), 19);
        assert_eq!(g.mu_train[0], 0.775);
        assert_eq!(g.mu_train[19], 1.25);
        assert!((g.mu_train[1] - g.mu_train[0] - 0.025).abs() < 1e-12);
        assert!((g.mu_test[0] - 0.7875).abs() < 1e-12);
        // the evaluation wave speed sits exactly on a test midpoint
        assert!(g.mu_test.contains(&1.0125));
        assert_eq!(g.mu_test[9], 1.0125);
    }

    #[test]
    fn parameter_grid_midpoint_property() {
        let g = make_parameter_grid(0.3, 2.1, 13).unwrap();
        for i in 0..g.mu_test.len() {
            let mid = 0.5 * (g.mu_train[i] + g.mu_train[i + 1]);
            assert_eq!(g.mu_test[i], mid);
        }
        assert!(g.mu_train.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn parameter_grid_rejects_degenerate_input() {
        assert!(make_parameter_grid(1.0, 2.0, 1).is_err());
        assert!(make_parameter_grid(2.0, 1.0, 5).is_err());
        assert!(make_parameter_grid(1.0, 1.0, 5).is_err());
    }

    #[test]
    fn dataset_default_shape_and_shared_initial_row() {
        let grid = GridSpec::new(64, 0.0, 1.0, 10, 1.0).unwrap();
        let profile = InitialProfile::default();
        let mu = make_parameter_grid(0.775, 1.25, 4).unwrap().mu_train;
        let ds = generate_dataset(&grid, &profile, &mu).unwrap();
        assert_eq!(ds.snapshots.shape(), &[4, 10, 64]);
        let row0 = ds.field(0, 0).to_vec();
        for m in 1..4 {
            assert_eq!(ds.field(m, 0), &row0[..]);
        }
        assert!(ds.snapshots.all_finite());
    }

    #[test]
    fn dataset_tiny_grid_matches_formula() {
        let grid = GridSpec::new(4, 0.0, 1.0, 2, 0.1).unwrap();
        let profile = InitialProfile::new(5e-3, 0.5).unwrap();
        let ds = generate_dataset(&grid, &profile, &[1.0]).unwrap();
        for i in 0..4 {
            let x = grid.x(i);
            assert_eq!(ds.field(0, 1)[i], profile.evaluate(x - 0.1));
        }
    }

    #[test]
    fn dataset_rejects_bad_input() {
        let grid = GridSpec::new(8, 0.0, 1.0, 4, 1.0).unwrap();
        let profile = InitialProfile::default();
        assert!(generate_dataset(&grid, &profile, &[]).is_err());
        assert!(generate_dataset(&grid, &profile, &[1.0, -0.2]).is_err());
    }

    #[test]
    fn dataset_generation_is_deterministic() {
        let grid = GridSpec::new(32, 0.0, 1.0, 8, 1.0).unwrap();
        let profile = InitialProfile::default();
        let a = generate_dataset(&grid, &profile, &[0.9, 1.1]).unwrap();
        let b = generate_dataset(&grid, &profile, &[0.9, 1.1]).unwrap();
        assert_eq!(a.snapshots, b.snapshots);
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let grid = GridSpec::new(16, 0.0, 1.0, 6, 0.8).unwrap();
        let profile = InitialProfile::default();
        let ds = generate_dataset(&grid, &profile, &[0.8, 1.0, 1.2]).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn truncated_snapshots_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let grid = GridSpec::new(16, 0.0, 1.0, 6, 0.8).unwrap();
        let ds = generate_dataset(&grid, &InitialProfile::default(), &[1.0]).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let bin = dir.path().join("snapshots.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let grid = GridSpec::new(16, 0.0, 1.0, 6, 0.8).unwrap();
        let ds = generate_dataset(&grid, &InitialProfile::default(), &[1.0]).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let meta_path = dir.path().join("meta.json");
        let meta = fs::read_to_string(&meta_path)
            .unwrap()
            .replace("\"version\": 1", "\"version\": 99");
        fs::write(&meta_path, meta).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn snapshots_satisfy_the_advection_equation() {
        // central-difference residual of U_t + mu U_x shrinks at second order
        // as the grid refines; check the measured order, not a fixed bound
        let profile = InitialProfile::new(0.02, 0.35).unwrap();
        let mu = 1.1;
        let residual = |nx: usize, nt: usize| -> (f64, f64) {
            let grid = GridSpec::new(nx, 0.0, 1.0, nt, 0.3).unwrap();
            let ds = generate_dataset(&grid, &profile, &[mu]).unwrap();
            let (dx, dt) = (grid.dx(), grid.dt());
            let mut worst = 0.0f64;
            for j in 1..nt - 1 {
                let prev = ds.field(0, j - 1);
                let cur = ds.field(0, j);
                let next = ds.field(0, j + 1);
                for i in 1..nx - 1 {
                    let ut = (next[i] - prev[i]) / (2.0 * dt);
                    let ux = (cur[i + 1] - cur[i - 1]) / (2.0 * dx);
                    worst = worst.max((ut + mu * ux).abs());
                }
            }
            (worst, dx * dx + dt * dt)
        };
        let (r1, h1) = residual(201, 201);
        let (r2, h2) = residual(401, 401);
        let order = (r1 / r2).log2() / (h1 / h2).log2() * 2.0;
        assert!(order > 1.7, "measured convergence order {order}");
        // the empirical constant stays bounded under refinement
        assert!(r2 / h2 <= 1.5 * (r1 / h1));
    }
}
