//! Run directories: manifest, CSV writers and the density heatmap.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use trajflow::checkpoint::content_hash;
use trajflow::Tensor;

/// File name of the run manifest inside every artifact directory.
pub const MANIFEST: &str = "manifest.txt";
/// Snapshot of the effective configuration.
pub const CONFIG_SNAPSHOT: &str = "config.cfg";

/// An artifact directory being written by one command.
pub struct Run {
    pub dir: PathBuf,
    command: &'static str,
    seed: u64,
    config: String,
    checkpoint: Option<String>,
    files: Vec<String>,
    started_ms: u128,
    clock: Instant,
}

fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

impl Run {
    /// Creates `dir` and records the configuration snapshot.
    pub fn create(dir: &Path, command: &'static str, seed: u64, config: String) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut run = Self {
            dir: dir.to_path_buf(),
            command,
            seed,
            config,
            checkpoint: None,
            files: Vec::new(),
            started_ms: unix_ms(),
            clock: Instant::now(),
        };
        if !run.config.is_empty() {
            let text = run.config.clone();
            run.write(CONFIG_SNAPSHOT, text.as_bytes())?;
        }
        Ok(run)
    }

    pub fn elapsed_ms(&self) -> f64 {
        self.clock.elapsed().as_secs_f64() * 1e3
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.track(name);
        Ok(())
    }

    /// Registers a file written by other means.
    pub fn track(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
    }

    pub fn write_checkpoint(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        self.write(name, bytes)?;
        self.checkpoint = Some(content_hash(bytes));
        Ok(())
    }

    /// Run id derived from the command, configuration and seed, so reruns
    /// of the same request share it.
    pub fn run_id(&self) -> String {
        let key = format!("{}\0{}\0{}", self.command, self.seed, self.config);
        content_hash(key.as_bytes())[..16].to_string()
    }

    pub fn finish(self) -> Result<()> {
        let mut m = String::new();
        let _ = writeln!(m, "run_id = {}", self.run_id());
        let _ = writeln!(m, "command = {}", self.command);
        let _ = writeln!(m, "seed = {}", self.seed);
        let _ = writeln!(m, "config_hash = {}", content_hash(self.config.as_bytes()));
        let _ = writeln!(m, "checkpoint_hash = {}", self.checkpoint.as_deref().unwrap_or("none"));
        let _ = writeln!(m, "files = {}", self.files.join(","));
        let _ = writeln!(m, "started_unix_ms = {}", self.started_ms);
        let _ = writeln!(m, "finished_unix_ms = {}", unix_ms());
        let path = self.path(MANIFEST);
        fs::write(&path, m).with_context(|| format!("writing {}", path.display()))
    }
}

/// Line-buffered CSV writer; values use Rust's shortest round-trip format.
pub struct Csv {
    out: BufWriter<fs::File>,
}

impl Csv {
    pub fn create(run: &mut Run, name: &str, header: &[&str]) -> Result<Self> {
        let path = run.path(name);
        let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        run.track(name);
        let mut out = BufWriter::new(file);
        writeln!(out, "{}", header.join(","))?;
        Ok(Self { out })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        writeln!(self.out, "{}", fields.join(","))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Header `x0,..,x{d-1}`.
pub fn coord_header(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("x{j}")).collect()
}

pub fn fmt(v: f64) -> String {
    format!("{v}")
}

const PPM_SIZE: usize = 128;
const PPM_EXTENT: f64 = 3.0;

/// Binary PPM heatmap of the first two coordinates over `[-3, 3]²`; one
/// coordinate gives a histogram. Cell intensity is log-scaled count.
pub fn density_ppm(x: &Tensor) -> Vec<u8> {
    let n = PPM_SIZE;
    let d = if x.rows() == 0 { 0 } else { x.row_len() };
    let mut counts = vec![0u64; n * n];
    let cell = |v: f64| -> Option<usize> {
        let c = ((v + PPM_EXTENT) / (2.0 * PPM_EXTENT) * n as f64).floor();
        (c >= 0.0 && c < n as f64).then_some(c as usize)
    };
    if d >= 2 {
        for i in 0..x.rows() {
            let r = x.row(i);
            if let (Some(cx), Some(cy)) = (cell(r[0]), cell(r[1])) {
                counts[(n - 1 - cy) * n + cx] += 1;
            }
        }
    } else if d == 1 {
        let mut hist = vec![0u64; n];
        for i in 0..x.rows() {
            if let Some(c) = cell(x.row(i)[0]) {
                hist[c] += 1;
            }
        }
        let top = hist.iter().copied().max().unwrap_or(0).max(1);
        for (c, &h) in hist.iter().enumerate() {
            let height = (h as f64 / top as f64 * n as f64).round() as usize;
            for row in n - height..n {
                counts[row * n + c] = 1;
            }
        }
    }
    let top = counts.iter().copied().max().unwrap_or(0);
    let mut out = format!("P6\n{n} {n}\n255\n").into_bytes();
    for &c in &counts {
        let v = if top == 0 || c == 0 {
            0.0
        } else {
            (1.0 + c as f64).ln() / (1.0 + top as f64).ln()
        };
        // black → orange → white
        let r = (255.0 * (2.0 * v).min(1.0)).round() as u8;
        let g = (255.0 * v).round() as u8;
        let b = (255.0 * (2.0 * v - 1.0).max(0.0)).round() as u8;
        out.extend_from_slice(&[r, g, b]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_has_header_and_pixels() {
        let x = Tensor::new(&[3, 2], vec![0.0, 0.0, 0.1, 0.1, 9.0, 9.0]).unwrap();
        let img = density_ppm(&x);
        let header = format!("P6\n{PPM_SIZE} {PPM_SIZE}\n255\n");
        assert!(img.starts_with(header.as_bytes()));
        assert_eq!(img.len(), header.len() + 3 * PPM_SIZE * PPM_SIZE);
        assert!(img[header.len()..].iter().any(|&b| b > 0));
    }

    #[test]
    fn empty_sample_gives_black_image() {
        let img = density_ppm(&Tensor::zeros(&[0, 2]));
        let header_len = format!("P6\n{PPM_SIZE} {PPM_SIZE}\n255\n").len();
        assert!(img[header_len..].iter().all(|&b| b == 0));
    }
}
