use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::env::maze::{scripted_action, PointMaze, RouteSide};
use crate::env::{Env, EnvSpec};
use crate::error::{QamError, Result};
use crate::nn::SeededRng;

/// One off-policy record.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
}

/// Immutable offline dataset plus its provenance.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub env_name: String,
    pub seed: u64,
    pub state_dim: usize,
    pub action_dim: usize,
    pub transitions: Vec<Transition>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    version: u32,
    #[serde(rename = "S")]
    state_dim: usize,
    #[serde(rename = "A")]
    action_dim: usize,
    n: usize,
    env_name: String,
    seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Binary container: one JSON manifest line, then fixed-width records
    /// `[s f64 x S][a f64 x A][r f64][s' f64 x S][done u8]`, little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let manifest = DatasetManifest {
            version: 1,
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            n: self.transitions.len(),
            env_name: self.env_name.clone(),
            seed: self.seed,
        };
        serde_json::to_writer(&mut w, &manifest)?;
        w.write_all(b"\n")?;
        for t in &self.transitions {
            for v in &t.s {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in &t.a {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&t.r.to_le_bytes())?;
            for v in &t.s_next {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&[u8::from(t.done)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let mut r = BufReader::new(File::open(path)?);
        let mut line = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            r.read_exact(&mut byte)?;
            if byte[0] == b'\n' {
                break;
            }
            line.push(byte[0]);
            if line.len() > 1 << 20 {
                return Err(QamError::Format("dataset manifest exceeds 1 MiB".into()));
            }
        }
        let manifest: DatasetManifest = serde_json::from_slice(&line)?;
        let (s_dim, a_dim) = (manifest.state_dim, manifest.action_dim);
        let rec_len = 8 * (s_dim + a_dim + 1 + s_dim) + 1;
        let mut buf = vec![0u8; rec_len];
        let mut transitions = Vec::with_capacity(manifest.n);
        for _ in 0..manifest.n {
            r.read_exact(&mut buf)?;
            let mut off = 0;
            let mut take = |n: usize| -> Vec<f64> {
                let out = buf[off..off + 8 * n]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                off += 8 * n;
                out
            };
            let s = take(s_dim);
            let a = take(a_dim);
            let r_vec = take(1);
            let s_next = take(s_dim);
            let done = buf[off] != 0;
            transitions.push(Transition { s, a, r: r_vec[0], s_next, done });
        }
        Ok(Dataset {
            env_name: manifest.env_name,
            seed: manifest.seed,
            state_dim: s_dim,
            action_dim: a_dim,
            transitions,
        })
    }

    /// CSV mirror of the binary format for inspection.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let mut header = Vec::new();
        for i in 0..self.state_dim {
            header.push(format!("s{i}"));
        }
        for i in 0..self.action_dim {
            header.push(format!("a{i}"));
        }
        header.push("r".into());
        for i in 0..self.state_dim {
            header.push(format!("s_next{i}"));
        }
        header.push("done".into());
        writeln!(w, "{}", header.join(","))?;
        for t in &self.transitions {
            let mut row: Vec<String> = Vec::with_capacity(header.len());
            row.extend(t.s.iter().map(|v| format!("{v}")));
            row.extend(t.a.iter().map(|v| format!("{v}")));
            row.push(format!("{}", t.r));
            row.extend(t.s_next.iter().map(|v| format!("{v}")));
            row.push(format!("{}", u8::from(t.done)));
            writeln!(w, "{}", row.join(","))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Behavior policy used for offline data generation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BehaviorSpec {
    /// I.i.d. Gaussian actions (bandits).
    Gaussian { mu: Vec<f64>, sigma: Vec<f64> },
    /// Even two-mode mixture at the bimodal bandit's modes.
    Mixture,
    /// Noisy scripted waypoint routes (PointMaze); `routes` alternates the
    /// wall side, `noise` is the std of the Gaussian action perturbation.
    ScriptedRoutes {
        routes: usize,
        noise: f64,
        /// Start episodes from uniformly random free positions instead of the
        /// start disc (coverage for policy-evaluation oracles).
        #[serde(default)]
        uniform_starts: bool,
    },
}

/// Generates `n` transitions from `env` under `behavior`, deterministically
/// in `seed`.
pub fn gen_dataset(
    spec: &EnvSpec,
    behavior: &BehaviorSpec,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(QamError::config("dataset size must be >= 1"));
    }
    let mut env = crate::env::make_env(spec)?;
    let mut rng = SeededRng::named(seed, "data");
    let s_dim = env.state_dim();
    let a_dim = env.action_dim();
    let mut transitions = Vec::with_capacity(n);

    match behavior {
        BehaviorSpec::Gaussian { mu, sigma } => {
            let mu = if mu.is_empty() { vec![0.0; a_dim] } else { mu.clone() };
            let sigma = if sigma.is_empty() { vec![1.0; a_dim] } else { sigma.clone() };
            if mu.len() != a_dim || sigma.len() != a_dim {
                return Err(QamError::config("behavior moments do not match the action dim"));
            }
            while transitions.len() < n {
                let s = env.reset(&mut rng);
                let a: Vec<f64> = (0..a_dim).map(|i| mu[i] + sigma[i] * rng.normal()).collect();
                let out = env.step(&Array1::from_vec(a.clone()));
                transitions.push(Transition {
                    s: s.to_vec(),
                    a,
                    r: out.reward,
                    s_next: out.next.to_vec(),
                    done: out.done,
                });
            }
        }
        BehaviorSpec::Mixture => {
            let bandit = crate::env::BimodalBandit::standard(a_dim);
            while transitions.len() < n {
                let s = env.reset(&mut rng);
                let mode = if rng.uniform() < 0.5 { &bandit.mode1 } else { &bandit.mode2 };
                let a: Vec<f64> =
                    (0..a_dim).map(|i| mode[i] + bandit.std * rng.normal()).collect();
                let out = env.step(&Array1::from_vec(a.clone()));
                transitions.push(Transition {
                    s: s.to_vec(),
                    a,
                    r: out.reward,
                    s_next: out.next.to_vec(),
                    done: out.done,
                });
            }
        }
        BehaviorSpec::ScriptedRoutes { routes, noise, uniform_starts } => {
            if *routes == 0 {
                return Err(QamError::config("need at least one scripted route"));
            }
            if !matches!(spec, EnvSpec::PointMaze) {
                return Err(QamError::config("scripted routes require the point maze"));
            }
            let mut maze = PointMaze::standard();
            let mut episode = 0usize;
            while transitions.len() < n {
                let side = RouteSide::from_index(rng.index(*routes));
                let mut s = if *uniform_starts {
                    maze.reset_to(ndarray::array![rng.uniform(), rng.uniform()])
                } else {
                    maze.reset(&mut rng)
                };
                loop {
                    let mut a = scripted_action(&maze, &s, side);
                    if *noise > 0.0 {
                        for v in a.iter_mut() {
                            *v = (*v + noise * rng.normal()).clamp(-1.0, 1.0);
                        }
                    }
                    let out = maze.step(&a);
                    transitions.push(Transition {
                        s: s.to_vec(),
                        a: a.to_vec(),
                        r: out.reward,
                        s_next: out.next.to_vec(),
                        done: out.done,
                    });
                    s = out.next;
                    if out.done || transitions.len() >= n {
                        break;
                    }
                }
                episode += 1;
                if episode > 100 * n {
                    return Err(QamError::domain("scripted generation failed to make progress"));
                }
            }
        }
    }

    Ok(Dataset {
        env_name: env.name().to_string(),
        seed,
        state_dim: s_dim,
        action_dim: a_dim,
        transitions,
    })
}

/// Sampled minibatch in array form.
#[derive(Debug, Clone)]
pub struct Batch {
    pub s: Array2<f64>,
    pub a: Array2<f64>,
    pub r: Array1<f64>,
    pub s_next: Array2<f64>,
    pub done: Array1<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }
}

/// Offline data plus an online ring buffer, sampled as one uniform pool
/// without reweighting.
#[derive(Debug, Clone)]
pub struct SamplePool {
    offline: Vec<Transition>,
    online: Vec<Transition>,
    capacity: usize,
    cursor: usize,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl SamplePool {
    pub fn from_dataset(ds: &Dataset, online_capacity: usize) -> Self {
        SamplePool {
            offline: ds.transitions.clone(),
            online: Vec::new(),
            capacity: online_capacity,
            cursor: 0,
            state_dim: ds.state_dim,
            action_dim: ds.action_dim,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.capacity == 0 {
            return;
        }
        if self.online.len() < self.capacity {
            self.online.push(t);
        } else {
            self.online[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.offline.len() + self.online.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn online_len(&self) -> usize {
        self.online.len()
    }

    fn get(&self, i: usize) -> &Transition {
        if i < self.offline.len() {
            &self.offline[i]
        } else {
            &self.online[i - self.offline.len()]
        }
    }

    /// Uniform sample with replacement over the combined pool.
    pub fn sample(&self, n: usize, rng: &mut SeededRng) -> Result<Batch> {
        if self.is_empty() {
            return Err(QamError::usage("sampling from an empty pool"));
        }
        let total = self.len();
        let mut s = Array2::zeros((n, self.state_dim));
        let mut a = Array2::zeros((n, self.action_dim));
        let mut r = Array1::zeros(n);
        let mut s_next = Array2::zeros((n, self.state_dim));
        let mut done = Array1::zeros(n);
        for row in 0..n {
            let t = self.get(rng.index(total));
            for j in 0..self.state_dim {
                s[[row, j]] = t.s[j];
                s_next[[row, j]] = t.s_next[j];
            }
            for j in 0..self.action_dim {
                a[[row, j]] = t.a[j];
            }
            r[row] = t.r;
            done[row] = f64::from(t.done);
        }
        Ok(Batch { s, a, r, s_next, done })
    }
}
