"""Exact single-excitation (U = 0) dynamics.

In the one-excitation subspace the flip-flop term ``-(J/2)(S+S- + S-S+)`` is a
tight-binding hopping of amplitude ``-J/2`` and the incommensurate field gives
the diagonal ``eps[n]``. With this hopping the self-dual point
``W = 2 |hopping|`` falls at ``W_c = J``; a factor slip here silently moves the
transition.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .model import ChainSpec, site_energies


@dataclass(frozen=True)
class OneBodyHamiltonian:
    diag: np.ndarray
    offdiag: np.ndarray

    @property
    def N(self) -> int:
        return len(self.diag)

    def dense(self) -> np.ndarray:
        return np.diag(self.diag) + np.diag(self.offdiag, 1) + np.diag(self.offdiag, -1)

    def norm(self) -> float:
        # Gershgorin-type bound, cheap and >= spectral norm
        off = np.abs(self.offdiag)
        row = np.abs(self.diag).copy()
        row[:-1] += off
        row[1:] += off
        return float(row.max()) if len(row) else 0.0


@dataclass(frozen=True)
class OneBodySolution:
    """Eigenpairs sorted by energy; ``vectors[k, n]`` is the amplitude of state k on site n."""

    energies: np.ndarray
    vectors: np.ndarray

    @property
    def N(self) -> int:
        return len(self.energies)


@dataclass(frozen=True)
class AmplitudeProfile:
    t: float
    c: np.ndarray
    source: int

    @property
    def probabilities(self) -> np.ndarray:
        return np.abs(self.c) ** 2


@dataclass(frozen=True)
class EdgeState:
    k: int
    energy: float
    ipr: float
    center: float
    edge: bool


def build_onebody_hamiltonian(spec: ChainSpec) -> OneBodyHamiltonian:
    if spec.U != 0:
        warnings.warn(
            f"U={spec.U} ignored by the one-body solver; results describe U=0",
            stacklevel=2,
        )
    diag = site_energies(spec)
    offdiag = np.full(spec.N - 1, -0.5 * spec.J)
    return OneBodyHamiltonian(diag, offdiag)


def diagonalize(h: OneBodyHamiltonian) -> OneBodySolution:
    if h.N == 1:
        return OneBodySolution(np.array(h.diag, dtype=float), np.ones((1, 1)))
    try:
        w, v = eigh_tridiagonal(h.diag, h.offdiag, lapack_driver="stev")
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK stev does not fail here
        raise RuntimeError("tridiagonal eigensolver did not converge") from exc
    return OneBodySolution(w, np.ascontiguousarray(v.T))


def solve(spec: ChainSpec) -> OneBodySolution:
    """Shortcut for ``diagonalize(build_onebody_hamiltonian(spec))``."""
    return diagonalize(build_onebody_hamiltonian(spec))


def _check_site(sol: OneBodySolution, n0: int) -> None:
    if not 0 <= n0 < sol.N:
        raise IndexError(f"site {n0} outside 0..{sol.N - 1}")


def propagate_amplitudes(sol: OneBodySolution, n0: int, t: float) -> AmplitudeProfile:
    """Amplitudes ``c[n] = sum_k exp(-i e_k t) a[k, n] a[k, n0]``."""
    _check_site(sol, n0)
    if t < 0:
        raise ValueError("t must be >= 0")
    c = amplitude_series(sol, n0, np.array([t]))[0]
    return AmplitudeProfile(float(t), c, n0)


def amplitude_series(sol: OneBodySolution, n0: int, times) -> np.ndarray:
    """Amplitudes for many times at once, shape ``(len(times), N)``."""
    _check_site(sol, n0)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    phases = np.exp(-1j * np.outer(times, sol.energies))
    return (phases * sol.vectors[:, n0]) @ sol.vectors


def ipr_t(profile: AmplitudeProfile) -> float:
    """Participation of the dynamical state, ``sum_n |c_n|^4``."""
    return float(np.sum(np.abs(profile.c) ** 4))


def ipr_series(sol: OneBodySolution, n0: int, times) -> np.ndarray:
    p = np.abs(amplitude_series(sol, n0, times)) ** 2
    return np.sum(p * p, axis=1)


def default_equilibrium_times(N: int, J: float = 1.0, samples: int = 200,
                              window_fraction: float = 0.5, span: float = 10.0) -> np.ndarray:
    """Uniform samples in ``[f T, T]`` with ``T = span * N / J``."""
    T = span * N / J
    return np.linspace(window_fraction * T, T, samples)


def equilibrium_ipr(sol: OneBodySolution, n0: int, J: float = 1.0, samples: int = 200,
                    window_fraction: float = 0.5, span: float = 10.0) -> float:
    """Late-time mean of ``ipr_t``, the asymptotic Q0 of a local excitation."""
    times = default_equilibrium_times(sol.N, J, samples, window_fraction, span)
    return float(np.mean(ipr_series(sol, n0, times)))


def ipr_eigenstates(sol: OneBodySolution) -> np.ndarray:
    """``IPR_k = sum_n |a_kn|^4``."""
    return np.sum(np.abs(sol.vectors) ** 4, axis=1)


def ipr_sites(sol: OneBodySolution) -> np.ndarray:
    """``IPR_n = sum_k |a_kn|^4``."""
    return np.sum(np.abs(sol.vectors) ** 4, axis=0)


def default_ldos_grid(spec: ChainSpec, points: int = 2001) -> tuple[np.ndarray, float]:
    """Energy grid and broadening used when none are given."""
    half = spec.J + spec.W
    eta = 4.0 * (2.0 * half) / points
    pad = 5.0 * eta
    return np.linspace(-half - pad, half + pad, points), eta


def ldos_decimation(spec: ChainSpec, site: int, energies=None, eta: float | None = None) -> np.ndarray:
    """Local density of states ``-Im G_ss(E + i eta) / pi`` by decimation.

    The chain to the left and to the right of ``site`` is eliminated one site at
    a time, starting from the free ends, through
    ``Sigma <- v^2 / (E + i eta - eps[m] - Sigma)``.
    """
    if not 0 <= site < spec.N:
        raise IndexError(f"site {site} outside 0..{spec.N - 1}")
    if energies is None or eta is None:
        grid, eta_default = default_ldos_grid(spec)
        energies = grid if energies is None else energies
        eta = eta_default if eta is None else eta
    if not eta > 0:
        raise ValueError(f"eta must be > 0, got {eta!r}")
    z = np.asarray(energies, dtype=float) + 1j * eta
    eps = site_energies(spec)
    v2 = (0.5 * spec.J) ** 2
    sigma_l = np.zeros_like(z)
    for m in range(site):
        sigma_l = v2 / (z - eps[m] - sigma_l)
    sigma_r = np.zeros_like(z)
    for m in range(spec.N - 1, site, -1):
        sigma_r = v2 / (z - eps[m] - sigma_r)
    g = 1.0 / (z - eps[site] - sigma_l - sigma_r)
    return -g.imag / math.pi


def ldos_single_level(energies, level: float, eta: float) -> np.ndarray:
    """Lorentzian LDOS of an isolated level (the one-site limit)."""
    e = np.asarray(energies, dtype=float)
    return (eta / math.pi) / ((e - level) ** 2 + eta ** 2)


def edge_state_report(sol: OneBodySolution, threshold: float | None = None) -> list[EdgeState]:
    """Eigenstates with ``IPR_k`` above ``threshold`` (default 5x the median).

    Each entry carries the probability-weighted center and an edge flag set when
    the center lies within N/10 of either end.
    """
    ipr = ipr_eigenstates(sol)
    med = float(np.median(ipr))
    if threshold is None:
        threshold = 5.0 * med
    elif threshold <= med:
        raise ValueError(f"threshold {threshold} must exceed the median IPR_k {med}")
    N = sol.N
    sites = np.arange(N)
    out = []
    for k in np.nonzero(ipr > threshold)[0]:
        w = sol.vectors[k] ** 2
        center = float(np.dot(sites, w) / w.sum())
        edge = center <= N / 10 or center >= (N - 1) - N / 10
        out.append(EdgeState(int(k), float(sol.energies[k]), float(ipr[k]), center, bool(edge)))
    return out


def edge_sides(report: list[EdgeState], N: int) -> set[str]:
    """Which chain extremes ('left', 'right') host flagged edge states."""
    sides = set()
    for s in report:
        if not s.edge:
            continue
        sides.add("left" if s.center < (N - 1) / 2 else "right")
    return sides
