"""mmWave and RIS channel generation and pilot measurement models.

A uniform linear array at the receiver defines the mmWave gain vector as a
sum of steering vectors over propagation paths; measurements project the
channel through an analog sensing vector and add complex Gaussian noise.
The RIS link carries Rician-faded channels on both sides of the surface and
pairs the cascaded channel with the reflection pattern by a plain transpose
(no conjugation), so phase alignment happens through the reflection design.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from activesense.numerics import ComplexVector, RandomStream

logger = logging.getLogger(__name__)

CONSTRAINT_TOL = 1e-9


@dataclass(frozen=True)
class MmWaveConfig:
    """Receive-array geometry and multipath range for the mmWave link."""

    antennas: int
    paths: int = 1
    phi_min: float = np.deg2rad(-60.0)  # radians
    phi_max: float = np.deg2rad(60.0)
    spacing: float = 0.5  # antenna spacing over wavelength

    def __post_init__(self) -> None:
        if self.antennas < 1:
            raise ValueError(f"antennas must be >= 1, got {self.antennas}")
        if self.paths < 1:
            raise ValueError(f"paths must be >= 1, got {self.paths}")
        if not self.phi_min < self.phi_max:
            raise ValueError("phi_min must be below phi_max")
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")


@dataclass
class MmWaveChannel:
    """One realization: per-path angles/fading and the assembled gain vector."""

    phis: np.ndarray  # (paths,) radians
    alphas: np.ndarray  # (paths,) complex fading
    h: ComplexVector  # (antennas,)


@dataclass(frozen=True)
class RisConfig:
    """Rectangular RIS geometry, Rician fading, and angle ranges per side."""

    rows: int  # N1, horizontal extent
    cols: int  # N2, vertical extent
    rician_factor: float = 10.0
    noise_variance: float = 1.0
    spacing1: float = 0.5  # horizontal spacing over wavelength
    spacing2: float = 0.5  # vertical spacing over wavelength
    # Azimuth ranges differ per side; elevations span the full half circle.
    tx_azimuth: tuple[float, float] = (-np.pi / 2, 0.0)
    rx_azimuth: tuple[float, float] = (0.0, np.pi / 2)
    elevation: tuple[float, float] = (-np.pi / 2, np.pi / 2)

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ValueError("rows and cols must be >= 1")
        if self.rician_factor < 0:
            raise ValueError("rician_factor must be >= 0")
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be >= 0")

    @property
    def elements(self) -> int:
        return self.rows * self.cols


@dataclass
class RisChannelSet:
    """Transmitter-side, receiver-side, and cascaded RIS channels."""

    h_t: ComplexVector
    h_r: ComplexVector
    h_c: ComplexVector  # entrywise h_t * h_r


UNIT_NORM = "unit-2-norm"
CONSTANT_MODULUS = "constant-modulus"
UNIT_MODULUS = "unit-modulus"
CONSTRAINTS = (UNIT_NORM, CONSTANT_MODULUS, UNIT_MODULUS)


@dataclass
class SensingVector:
    """Complex sensing vector tagged with its hardware constraint."""

    v: ComplexVector
    constraint: str

    def __post_init__(self) -> None:
        if self.constraint not in CONSTRAINTS:
            raise ValueError(f"unknown constraint {self.constraint!r}")

    def target_modulus(self) -> float | None:
        if self.constraint == CONSTANT_MODULUS:
            return 1.0 / np.sqrt(len(self.v))
        if self.constraint == UNIT_MODULUS:
            return 1.0
        return None

    def check(self, tol: float = CONSTRAINT_TOL) -> None:
        z = self.v.as_complex()
        if self.constraint == UNIT_NORM:
            err = abs(np.linalg.norm(z) - 1.0)
        else:
            err = float(np.max(np.abs(np.abs(z) - self.target_modulus())))
        if err > tol:
            raise ValueError(
                f"sensing vector violates {self.constraint} by {err:.3e} (tol {tol:.0e})"
            )


# ---------------------------------------------------------------------------
# array responses


def array_response(phi: float, antennas: int, spacing: float = 0.5) -> ComplexVector:
    """ULA steering vector: entry m is exp(j 2 pi spacing m sin(phi))."""
    if antennas < 1:
        raise ValueError(f"antennas must be >= 1, got {antennas}")
    m = np.arange(antennas)
    phase = 2.0 * np.pi * spacing * m * np.sin(phi)
    return ComplexVector(np.cos(phase), np.sin(phase))


def array_response_matrix(phis: np.ndarray, antennas: int, spacing: float = 0.5) -> np.ndarray:
    """Steering vectors for many angles at once, one per column."""
    phis = np.asarray(phis, dtype=np.float64)
    m = np.arange(antennas)[:, None]
    return np.exp(1j * 2.0 * np.pi * spacing * m * np.sin(phis)[None, :])


def ris_array_response(azimuth: float, elevation: float, cfg: RisConfig) -> ComplexVector:
    """Rectangular-RIS steering vector.

    Element ell (0-based) sits at horizontal index ell mod rows and vertical
    index floor(ell / cols); its phase advances with
    spacing1 * sin(azimuth) * cos(elevation) horizontally and
    spacing2 * sin(elevation) vertically.
    """
    ell = np.arange(cfg.elements)
    i1 = np.mod(ell, cfg.rows)
    i2 = np.floor_divide(ell, cfg.cols)
    phase = 2.0 * np.pi * (
        i1 * cfg.spacing1 * np.sin(azimuth) * np.cos(elevation)
        + i2 * cfg.spacing2 * np.sin(elevation)
    )
    return ComplexVector(np.cos(phase), np.sin(phase))


# ---------------------------------------------------------------------------
# sampling


def sample_mmwave(cfg: MmWaveConfig, rng: RandomStream) -> MmWaveChannel:
    """Draw one multipath channel: uniform angles, CN(0,1) fading."""
    g = rng.generator()
    phis = g.uniform(cfg.phi_min, cfg.phi_max, size=cfg.paths)
    alphas = g.normal(0.0, np.sqrt(0.5), size=(2, cfg.paths))
    alphas = alphas[0] + 1j * alphas[1]
    return assemble_mmwave(cfg, phis, alphas)


def assemble_mmwave(cfg: MmWaveConfig, phis, alphas) -> MmWaveChannel:
    """Build the gain vector h = sum_l alpha_l a(phi_l) for given parameters."""
    phis = np.asarray(phis, dtype=np.float64)
    alphas = np.asarray(alphas, dtype=np.complex128)
    A = array_response_matrix(phis, cfg.antennas, cfg.spacing)
    h = A @ alphas
    return MmWaveChannel(phis=phis, alphas=alphas, h=ComplexVector.from_complex(h))


def sample_ris(cfg: RisConfig, rng: RandomStream) -> RisChannelSet:
    """Draw the two Rician-faded RIS channels and their cascade."""

    def one_side(sub: RandomStream, azimuth_range) -> ComplexVector:
        g = sub.generator()
        azimuth = g.uniform(*azimuth_range)
        elevation = g.uniform(*cfg.elevation)
        alpha = (g.normal(0, np.sqrt(0.5)) + 1j * g.normal(0, np.sqrt(0.5)))
        los = alpha * ris_array_response(azimuth, elevation, cfg).as_complex()
        nlos = g.normal(0, np.sqrt(0.5), size=(2, cfg.elements))
        nlos = nlos[0] + 1j * nlos[1]
        eps = cfg.rician_factor
        h = np.sqrt(eps / (1.0 + eps)) * los + np.sqrt(1.0 / (1.0 + eps)) * nlos
        return ComplexVector.from_complex(h)

    h_t = one_side(rng.child(0), cfg.tx_azimuth)
    h_r = one_side(rng.child(1), cfg.rx_azimuth)
    h_c = ComplexVector.from_complex(h_t.as_complex() * h_r.as_complex())
    return RisChannelSet(h_t=h_t, h_r=h_r, h_c=h_c)


def sample_mmwave_batch(
    cfg: MmWaveConfig, rng: RandomStream, count: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized channel draws: (phis (B,L), alphas (B,L), h (B,M))."""
    g = rng.generator()
    phis = g.uniform(cfg.phi_min, cfg.phi_max, size=(count, cfg.paths))
    parts = g.normal(0.0, np.sqrt(0.5), size=(2, count, cfg.paths))
    alphas = parts[0] + 1j * parts[1]
    m = np.arange(cfg.antennas)
    steer = np.exp(1j * 2.0 * np.pi * cfg.spacing * np.sin(phis)[..., None] * m)
    h = np.einsum("blm,bl->bm", steer, alphas)
    return phis, alphas, h


def _ris_steering_batch(azimuth: np.ndarray, elevation: np.ndarray, cfg: RisConfig) -> np.ndarray:
    ell = np.arange(cfg.elements)
    i1 = np.mod(ell, cfg.rows)
    i2 = np.floor_divide(ell, cfg.cols)
    phase = 2.0 * np.pi * (
        i1 * cfg.spacing1 * (np.sin(azimuth) * np.cos(elevation))[:, None]
        + i2 * cfg.spacing2 * np.sin(elevation)[:, None]
    )
    return np.exp(1j * phase)


def sample_ris_batch(
    cfg: RisConfig, rng: RandomStream, count: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized RIS draws: (h_t, h_r, h_c), each (B, elements)."""

    def one_side(sub: RandomStream, azimuth_range) -> np.ndarray:
        g = sub.generator()
        azimuth = g.uniform(*azimuth_range, size=count)
        elevation = g.uniform(*cfg.elevation, size=count)
        alpha = g.normal(0, np.sqrt(0.5), size=(2, count))
        alpha = alpha[0] + 1j * alpha[1]
        los = alpha[:, None] * _ris_steering_batch(azimuth, elevation, cfg)
        nlos = g.normal(0, np.sqrt(0.5), size=(2, count, cfg.elements))
        nlos = nlos[0] + 1j * nlos[1]
        eps = cfg.rician_factor
        return np.sqrt(eps / (1.0 + eps)) * los + np.sqrt(1.0 / (1.0 + eps)) * nlos

    h_t = one_side(rng.child(0), cfg.tx_azimuth)
    h_r = one_side(rng.child(1), cfg.rx_azimuth)
    return h_t, h_r, h_t * h_r


# ---------------------------------------------------------------------------
# measurements


def measure_mmwave(
    ch: MmWaveChannel,
    w: SensingVector,
    power: float,
    rng: RandomStream,
    noise_variance: float = 1.0,
) -> complex:
    """One pilot observation sqrt(P) w^H h + w^H z with z ~ CN(0, I).

    ``noise_variance`` exists as a test hook; 0 suppresses the noise term.
    """
    if power < 0:
        raise ValueError(f"power must be >= 0, got {power}")
    if noise_variance < 0:
        raise ValueError(f"noise_variance must be >= 0, got {noise_variance}")
    if len(w.v) != len(ch.h):
        raise ValueError(f"sensing extent {len(w.v)} != channel extent {len(ch.h)}")
    w.check()
    wz = w.v.as_complex()
    y = np.sqrt(power) * np.vdot(wz, ch.h.as_complex())
    if noise_variance > 0:
        g = rng.generator()
        z = g.normal(0, np.sqrt(noise_variance / 2), size=(2, len(ch.h)))
        y = y + np.vdot(wz, z[0] + 1j * z[1])
    return complex(y)


def measure_ris(
    chs: RisChannelSet,
    w: SensingVector,
    power: float,
    sigma2: float,
    rng: RandomStream,
) -> complex:
    """One uplink pilot sqrt(P) w^T h_c + n with n ~ CN(0, sigma2).

    The pairing is a plain transpose (no conjugation), matching how the
    reflection pattern multiplies the cascaded channel.
    """
    if power < 0:
        raise ValueError(f"power must be >= 0, got {power}")
    if sigma2 < 0:
        raise ValueError(f"sigma2 must be >= 0, got {sigma2}")
    if w.constraint != UNIT_MODULUS:
        raise ValueError("RIS sensing requires a unit-modulus reflection pattern")
    if len(w.v) != len(chs.h_c):
        raise ValueError(f"sensing extent {len(w.v)} != channel extent {len(chs.h_c)}")
    w.check()
    y = np.sqrt(power) * np.dot(w.v.as_complex(), chs.h_c.as_complex())
    if sigma2 > 0:
        g = rng.generator()
        n = g.normal(0, np.sqrt(sigma2 / 2), size=2)
        y = y + (n[0] + 1j * n[1])
    return complex(y)


def beamforming_gain(h: ComplexVector, v, pairing: str) -> float:
    """Squared magnitude of the channel/beamformer pairing.

    'hermitian' computes |h^H v|^2 (downlink precoding); 'transpose'
    computes |h^T v|^2 (RIS reflection).
    """
    vz = v.v.as_complex() if isinstance(v, SensingVector) else v.as_complex()
    hz = h.as_complex()
    if hz.size != vz.size:
        raise ValueError(f"length mismatch: {hz.size} vs {vz.size}")
    if pairing == "hermitian":
        return float(np.abs(np.vdot(hz, vz)) ** 2)
    if pairing == "transpose":
        return float(np.abs(np.dot(hz, vz)) ** 2)
    raise ValueError(f"pairing must be 'hermitian' or 'transpose', got {pairing!r}")


def beam_pattern(w: SensingVector, grid: np.ndarray, spacing: float = 0.5) -> np.ndarray:
    """Gain |w^H a(phi)|^2 of a sensing vector over a grid of angles."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("grid must be non-empty")
    A = array_response_matrix(grid, len(w.v), spacing)
    return np.abs(w.v.as_complex().conj() @ A) ** 2


# ---------------------------------------------------------------------------
# random constraint-satisfying sensing vectors


def random_sensing(constraint: str, extent: int, rng: RandomStream) -> SensingVector:
    """Draw one sensing vector satisfying the given constraint.

    Unit-norm vectors are normalized complex Gaussians; modulus-constrained
    vectors carry uniform phases.
    """
    g = rng.generator()
    if constraint == UNIT_NORM:
        z = g.normal(0, 1, size=(2, extent))
        z = z[0] + 1j * z[1]
        z = z / np.linalg.norm(z)
    else:
        phases = g.uniform(0.0, 2.0 * np.pi, size=extent)
        modulus = 1.0 if constraint == UNIT_MODULUS else 1.0 / np.sqrt(extent)
        z = modulus * np.exp(1j * phases)
    return SensingVector(ComplexVector.from_complex(z), constraint)


# ---------------------------------------------------------------------------
# dataset export


def export_mmwave_csv(path, channels: list[MmWaveChannel]) -> None:
    """Write channel realizations as CSV fixtures.

    Columns: h_re_0..h_re_{M-1}, h_im_0.., then per-path aoa_l and
    alpha_re_l / alpha_im_l.
    """
    if not channels:
        raise ValueError("no channels to export")
    antennas = len(channels[0].h)
    paths = channels[0].phis.size
    header = (
        [f"h_re_{i}" for i in range(antennas)]
        + [f"h_im_{i}" for i in range(antennas)]
        + [f"aoa_{l}" for l in range(paths)]
        + [f"alpha_re_{l}" for l in range(paths)]
        + [f"alpha_im_{l}" for l in range(paths)]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for ch in channels:
            row = (
                list(ch.h.re)
                + list(ch.h.im)
                + list(ch.phis)
                + list(ch.alphas.real)
                + list(ch.alphas.imag)
            )
            writer.writerow([f"{x:.17g}" for x in row])
