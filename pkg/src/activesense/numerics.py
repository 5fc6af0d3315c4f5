"""Deterministic random substreams and split-complex vector primitives.

Everything downstream (channel draws, noise, weight init, test sets) pulls
randomness through :class:`RandomStream` descriptors so that results are a
pure function of (seed, substream label) and never of batch or worker order.
Complex quantities that cross into the real-valued network use the split
[Re; Im] representation held by :class:`ComplexVector`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RandomStream:
    """Immutable descriptor of a reproducible random substream.

    The same ``(seed, stream)`` always reproduces the same draws, and
    distinct stream labels index independent substreams.  ``child`` derives
    nested labels so per-episode or per-worker streams do not depend on the
    order in which work is scheduled.
    """

    seed: int
    stream: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if isinstance(self.stream, int):
            object.__setattr__(self, "stream", (self.stream,))
        else:
            object.__setattr__(self, "stream", tuple(int(s) for s in self.stream))

    def child(self, *labels: int) -> "RandomStream":
        """Derive a labelled substream of this stream."""
        return RandomStream(self.seed, self.stream + tuple(int(x) for x in labels))

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this substream.

        Each call returns an identical, independently seekable generator, so
        functions taking a RandomStream are pure.
        """
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream)
        return np.random.Generator(np.random.PCG64(ss))


@dataclass
class ComplexVector:
    """Complex vector stored as separate real and imaginary float64 arrays."""

    re: np.ndarray
    im: np.ndarray

    def __post_init__(self) -> None:
        self.re = np.asarray(self.re, dtype=np.float64)
        self.im = np.asarray(self.im, dtype=np.float64)
        if self.re.shape != self.im.shape or self.re.ndim != 1:
            raise ValueError(
                f"re/im must be equal-length 1-D arrays, got {self.re.shape} and {self.im.shape}"
            )
        if not (np.all(np.isfinite(self.re)) and np.all(np.isfinite(self.im))):
            raise ValueError("ComplexVector entries must be finite")

    @classmethod
    def from_complex(cls, z: np.ndarray) -> "ComplexVector":
        z = np.asarray(z, dtype=np.complex128)
        return cls(z.real.copy(), z.imag.copy())

    @classmethod
    def from_stacked(cls, x: np.ndarray) -> "ComplexVector":
        """Inverse of :meth:`stacked`: split a length-2n real vector."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1 or x.size % 2:
            raise ValueError(f"stacked vector must have even length, got shape {x.shape}")
        half = x.size // 2
        return cls(x[:half], x[half:])

    def as_complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    def stacked(self) -> np.ndarray:
        """Real representation [Re; Im] used at the network boundary."""
        return np.concatenate([self.re, self.im])

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.re**2 + self.im**2)))

    def __len__(self) -> int:
        return self.re.size


def sample_complex_gaussian(n: int, variance: float, rng: RandomStream) -> ComplexVector:
    """Draw n i.i.d. circularly symmetric complex Gaussians CN(0, variance).

    Real and imaginary parts each carry variance/2.
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    if variance <= 0:
        raise ValueError(f"variance must be positive, got {variance!r}")
    g = rng.generator()
    scale = np.sqrt(variance / 2.0)
    draws = g.normal(0.0, scale, size=(2, n))
    return ComplexVector(draws[0], draws[1])


def hermitian_inner(a: ComplexVector, b: ComplexVector) -> complex:
    """Conjugated inner product sum_i conj(a_i) * b_i."""
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    return complex(np.vdot(a.as_complex(), b.as_complex()))
