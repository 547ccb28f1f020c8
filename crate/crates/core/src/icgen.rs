//! Deterministic initial conditions: a bit-exact splitmix64 generator, a
//! Plummer-sphere sampler built on it, and a plain-text particle file format
//! that round-trips doubles exactly.
//!
//! Reproducibility contract: the RNG is pinned at the bit level (frozen test
//! vectors), the sampler consumes draws in a fixed documented order, and
//! particle files store 17 significant digits, which is lossless for f64.

use crate::math::Vec3;
use crate::octree::Particle;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

/// splitmix64: state advances by the golden-gamma constant; output is the
/// finalized mix of the new state. Passes through every u64 exactly once
/// over its 2^64 period.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

/// 2^-53, exact: scales a 53-bit integer into [0, 1).
const UNIT_SCALE: f64 = 1.0 / 9007199254740992.0;

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform double in [0, 1): the top 53 bits of the next output.
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * UNIT_SCALE
    }
}

/// Parameters of a Plummer-sphere sample.
#[derive(Clone, Copy, Debug)]
pub struct PlummerConfig {
    pub n: usize,
    pub seed: u64,
    pub total_mass: f64,
    pub scale_radius: f64,
    pub g_const: f64,
    /// Radii beyond `rmax_cut * scale_radius` are resampled.
    pub rmax_cut: f64,
}

impl Default for PlummerConfig {
    fn default() -> Self {
        PlummerConfig {
            n: 0,
            seed: 0,
            total_mass: 1.0,
            scale_radius: 1.0,
            g_const: 1.0,
            rmax_cut: 20.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum IcError {
    #[error("particle count must be >= 1")]
    ZeroParticles,
    #[error("Plummer parameter {name} out of range: {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
}

impl IcError {
    /// Line number of a parse error, if this is one (for tests and callers
    /// that report file positions).
    pub fn parse_line(&self) -> Option<usize> {
        match self {
            IcError::Parse { line, .. } => Some(*line),
            _ => None,
        }
    }
}

/// Rejection envelope for the speed-fraction density
/// g(q) = q^2 (1 - q^2)^(7/2); its maximum is ~0.0922 at q = sqrt(2/9).
const Q_ENVELOPE: f64 = 0.1;

fn speed_fraction_density(q: f64) -> f64 {
    q * q * (1.0 - q * q).powf(3.5)
}

/// One uniformly random direction on the unit sphere. Consumes exactly two
/// draws: z uniform in [-1, 1), azimuth uniform in [0, 2*pi).
fn unit_vector(rng: &mut SplitMix64) -> Vec3 {
    let z = 2.0 * rng.next_unit() - 1.0;
    let phi = 2.0 * std::f64::consts::PI * rng.next_unit();
    let s = (1.0 - z * z).sqrt();
    Vec3::new(s * phi.cos(), s * phi.sin(), z)
}

/// Samples `config.n` particles from a Plummer sphere in virial equilibrium.
///
/// Per particle, in order: radius by inverting the cumulative mass profile
/// (redrawn while r exceeds the cut), position direction, speed fraction q by
/// rejection against the envelope, velocity direction. After sampling, the
/// center of mass and total momentum are shifted to zero.
pub fn plummer(config: &PlummerConfig) -> Result<Vec<Particle>, IcError> {
    if config.n == 0 {
        return Err(IcError::ZeroParticles);
    }
    for (name, value) in [
        ("total_mass", config.total_mass),
        ("scale_radius", config.scale_radius),
        ("g_const", config.g_const),
        ("rmax_cut", config.rmax_cut),
    ] {
        if !(value.is_finite() && value > 0.0) {
            return Err(IcError::InvalidParameter { name, value });
        }
    }

    let a = config.scale_radius;
    let m_each = config.total_mass / config.n as f64;
    let v_scale = (config.g_const * config.total_mass / a).sqrt();
    let mut rng = SplitMix64::new(config.seed);
    let mut particles = Vec::with_capacity(config.n);

    for _ in 0..config.n {
        let r = loop {
            let u = rng.next_unit();
            let r = a * (u.powf(-2.0 / 3.0) - 1.0).powf(-0.5);
            if r <= config.rmax_cut * a {
                break r;
            }
        };
        let position = unit_vector(&mut rng) * r;

        let v_esc = std::f64::consts::SQRT_2 * (1.0 + (r / a) * (r / a)).powf(-0.25) * v_scale;
        let q = loop {
            let q = rng.next_unit();
            let y = Q_ENVELOPE * rng.next_unit();
            if y < speed_fraction_density(q) {
                break q;
            }
        };
        let velocity = unit_vector(&mut rng) * (q * v_esc);

        particles.push(Particle::new(m_each, position, velocity));
    }

    // Shift to the center-of-mass frame: zero total momentum, zero centroid.
    let mut mass = 0.0;
    let mut weighted_x = Vec3::zero();
    let mut weighted_v = Vec3::zero();
    for p in &particles {
        mass += p.mass;
        weighted_x += p.position * p.mass;
        weighted_v += p.velocity * p.mass;
    }
    let com = weighted_x * (1.0 / mass);
    let vel = weighted_v * (1.0 / mass);
    for p in &mut particles {
        p.position -= com;
        p.velocity -= vel;
    }

    Ok(particles)
}

const HEADER_PREFIX: &str = "# nbody v1 N=";

fn io_err(path: &Path, source: io::Error) -> IcError {
    IcError::Io { path: path.display().to_string(), source }
}

fn parse_err(path: &Path, line: usize, reason: impl Into<String>) -> IcError {
    IcError::Parse { path: path.display().to_string(), line, reason: reason.into() }
}

/// Writes `# nbody v1 N=<n>` followed by one `mass x y z vx vy vz` line per
/// particle, 17 significant digits each — enough to reproduce every double
/// exactly on read.
pub fn write_particles(particles: &[Particle], path: &Path) -> Result<(), IcError> {
    for p in particles {
        if !(p.mass.is_finite() && p.mass > 0.0) {
            return Err(IcError::InvalidParameter { name: "mass", value: p.mass });
        }
        if !(p.position.is_finite() && p.velocity.is_finite()) {
            return Err(IcError::InvalidParameter { name: "component", value: f64::NAN });
        }
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    (|| -> io::Result<()> {
        writeln!(w, "{HEADER_PREFIX}{}", particles.len())?;
        for p in particles {
            writeln!(
                w,
                "{:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e}",
                p.mass,
                p.position.x,
                p.position.y,
                p.position.z,
                p.velocity.x,
                p.velocity.y,
                p.velocity.z,
            )?;
        }
        w.flush()
    })()
    .map_err(|e| io_err(path, e))
}

/// Reads a particle file written by [`write_particles`]. Errors carry the
/// 1-based line number: malformed header (line 1), wrong field count, an
/// unparsable or non-finite value, a non-positive mass, fewer bodies than the
/// header promises (reported at the last line present), or trailing content.
pub fn read_particles(path: &Path) -> Result<Vec<Particle>, IcError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut lines = BufReader::new(file).lines();

    let header = match lines.next() {
        Some(Ok(line)) => line,
        Some(Err(e)) => return Err(io_err(path, e)),
        None => return Err(parse_err(path, 1, "empty file, expected header")),
    };
    let n: usize = header
        .strip_prefix(HEADER_PREFIX)
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| {
            parse_err(path, 1, format!("malformed header {header:?}, expected {HEADER_PREFIX}<count>"))
        })?;

    let mut particles = Vec::with_capacity(n);
    let mut line_no = 1usize;
    for line in lines {
        line_no += 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if particles.len() == n {
            return Err(parse_err(path, line_no, "unexpected content after last body"));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(parse_err(
                path,
                line_no,
                format!("expected 7 fields, found {}", fields.len()),
            ));
        }
        let mut vals = [0.0f64; 7];
        for (slot, field) in vals.iter_mut().zip(&fields) {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(path, line_no, format!("invalid number {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(path, line_no, format!("non-finite value {field:?}")));
            }
            *slot = v;
        }
        if vals[0] <= 0.0 {
            return Err(parse_err(path, line_no, format!("mass must be positive, got {}", vals[0])));
        }
        particles.push(Particle::new(
            vals[0],
            Vec3::new(vals[1], vals[2], vals[3]),
            Vec3::new(vals[4], vals[5], vals[6]),
        ));
    }
    if particles.len() != n {
        return Err(parse_err(
            path,
            line_no,
            format!("header promised {n} bodies, file ends after {}", particles.len()),
        ));
    }
    Ok(particles)
}
