"""Chain parameters, the incommensurate on-site potential and disorder realizations.

Energies are in units of the flip-flop coupling ``J`` and times in units of
``1/J``. The lattice constant is fixed to 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np

GOLDEN_RATIO = (1.0 + math.sqrt(5.0)) / 2.0
TWO_PI = 2.0 * math.pi


def normalize_phase(phi: float) -> float:
    """Map an angle into [0, 2*pi)."""
    out = math.fmod(float(phi), TWO_PI)
    if out < 0.0:
        out += TWO_PI
    # fmod can return exactly 2*pi after the shift for tiny negative inputs
    if out >= TWO_PI:
        out = 0.0
    return out


@dataclass(frozen=True)
class ChainSpec:
    """Physical parameters of one disorder realization.

    Attributes
    ----------
    N : int
        Number of sites, indexed ``0..N-1`` from the left end.
    J : float
        Flip-flop coupling; sets the energy unit.
    W : float
        Strength of the incommensurate potential.
    U : float
        Ising (``SzSz``) coupling.
    q : float
        Incommensuration ratio, golden ratio by default.
    phi : float
        Potential phase, normalized into [0, 2*pi).
    """

    N: int
    J: float = 1.0
    W: float = 0.0
    U: float = 0.0
    q: float = GOLDEN_RATIO
    phi: float = 0.0

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 2:
            raise ValueError(f"N must be an integer >= 2, got {self.N!r}")
        if not self.J > 0:
            raise ValueError(f"J must be > 0, got {self.J!r}")
        if not self.W >= 0:
            raise ValueError(f"W must be >= 0, got {self.W!r}")
        if not self.U >= 0:
            raise ValueError(f"U must be >= 0, got {self.U!r}")
        if not math.isfinite(self.q):
            raise ValueError(f"q must be finite, got {self.q!r}")
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "phi", normalize_phase(self.phi))

    def with_(self, **changes) -> "ChainSpec":
        return replace(self, **changes)

    def to_config(self, seed: int | None = None) -> dict[str, str]:
        """Flat key-value form (``n_sites, j, w, u, q, phi, seed``)."""
        out = {
            "n_sites": str(self.N),
            "j": repr(float(self.J)),
            "w": repr(float(self.W)),
            "u": repr(float(self.U)),
            "q": repr(float(self.q)),
            "phi": repr(float(self.phi)),
        }
        if seed is not None:
            out["seed"] = str(int(seed))
        return out

    @classmethod
    def from_config(cls, section: Mapping[str, object]) -> "ChainSpec":
        """Inverse of :meth:`to_config`; a ``seed`` key is ignored here."""
        known = {"n_sites", "j", "w", "u", "q", "phi", "seed"}
        unknown = set(section) - known
        if unknown:
            raise KeyError(f"unknown chain keys: {sorted(unknown)}")
        if "n_sites" not in section:
            raise KeyError("missing key 'n_sites'")
        return cls(
            N=int(section["n_sites"]),
            J=float(section.get("j", 1.0)),
            W=float(section.get("w", 0.0)),
            U=float(section.get("u", 0.0)),
            q=float(section.get("q", GOLDEN_RATIO)),
            phi=float(section.get("phi", 0.0)),
        )

    def as_dict(self) -> dict:
        return {"N": self.N, "J": self.J, "W": self.W, "U": self.U,
                "q": self.q, "phi": self.phi}


def fibonacci_ratio(k: int) -> float:
    """Commensurate approximant F(k+1)/F(k) of the golden ratio (k >= 1).

    Useful as an explicit ``q`` override in convergence studies.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    a, b = 1, 1
    for _ in range(k - 1):
        a, b = b, a + b
    return b / a


def onsite_potential(spec: ChainSpec, n: int) -> float:
    """On-site energy ``-W cos(2 pi q n + phi)`` of site ``n``."""
    if not 0 <= n < spec.N:
        raise IndexError(f"site {n} outside 0..{spec.N - 1}")
    return -spec.W * math.cos(TWO_PI * spec.q * n + spec.phi)


@dataclass(frozen=True)
class SiteFieldTable:
    spec: ChainSpec
    eps: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, spec: ChainSpec) -> "SiteFieldTable":
        eps = site_energies(spec)
        eps.setflags(write=False)
        return cls(spec, eps)


def site_energies(spec: ChainSpec) -> np.ndarray:
    """All on-site energies as a float array of length N."""
    n = np.arange(spec.N, dtype=float)
    return -spec.W * np.cos(TWO_PI * spec.q * n + spec.phi)


@dataclass(frozen=True)
class RealizationSet:
    base: ChainSpec
    phases: tuple[float, ...]
    seed: int | None = None

    def __post_init__(self):
        if len(self.phases) == 0:
            raise ValueError("a realization set needs at least one phase")
        if len(set(self.phases)) != len(self.phases):
            raise ValueError("phases must be distinct")

    def __len__(self):
        return len(self.phases)

    def __iter__(self):
        return iter(self.specs())

    def specs(self) -> list[ChainSpec]:
        return [self.base.with_(phi=p) for p in self.phases]


def make_realizations(spec: ChainSpec, count: int | None = None, seed: int | None = None,
                      phases: Iterable[float] | None = None) -> RealizationSet:
    """Draw ``count`` potential phases uniformly from [0, 2*pi).

    Passing ``phases`` instead selects the deterministic mode, e.g. ``[0, 7*pi/20]``.
    """
    if phases is not None:
        ph = tuple(normalize_phase(p) for p in phases)
        return RealizationSet(spec, ph, seed)
    if count is None or count < 1:
        raise ValueError(f"count must be >= 1, got {count!r}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    ph = rng.uniform(0.0, TWO_PI, size=int(count))
    # duplicates have probability zero but the invariant is cheap to keep
    while len(set(ph.tolist())) != len(ph):
        ph = rng.uniform(0.0, TWO_PI, size=int(count))
    return RealizationSet(spec, tuple(normalize_phase(p) for p in ph.tolist()), seed)


def shift_origin(phi: float, q: float = GOLDEN_RATIO, origin: int = 1) -> float:
    """Phase for which the 0-based potential equals one labelled from ``origin``.

    A potential written as ``cos(2 pi q n + phi)`` with ``n = origin..`` is the
    0-based potential with phase ``phi + 2 pi q origin``. With ``origin=1`` this
    converts phase labels quoted for chains numbered from 1, where ``phi = 0``
    puts the mirror point of the cosine just outside the left end.
    """
    return normalize_phase(phi + TWO_PI * q * origin)
