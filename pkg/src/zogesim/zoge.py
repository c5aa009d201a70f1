"""Gradient-kicked Loschmidt echo, its Fourier spectrum and forward observables.

The echo is the polarization that returns to the excitation site after forward
evolution, a field-gradient kick ``exp(-i phi sum_n n Sz_n)`` and backward
evolution,

    M(t, phi) = 2 <Psi0| Phi^+ Sz_site Phi |Psi0>,    Phi = e^{iHt} e^{-i phi H_g} e^{-iHt},

written here with the background subtraction that keeps ``M(t, 0) = 1`` in any
magnetization sector. Its Fourier coefficients over ``phi`` are the gradient
entanglement amplitudes ``Q_n``; ``Q_0`` is the zeroth-order term.

Local polarizations are normalized as ``p_n = (<Sz_n> - b) / (1/2 - b)`` with
``b`` the mean polarization of the non-excited spins, so ``sum_n p_n = 1`` and,
in the ``(N+1)/2`` sector, ``p_n = 2 <Sz_n>``. The conventional
``S2 = sum <Sz_n>^2`` of that sector is the reported ``S2`` divided by 4.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .manybody import (
    ExactPlan,
    ManyBodyState,
    TrotterPlan,
    _trotter,
    background_polarization,
    evolve,
    gradient_moment,
    raise_spin,
    real_matmul,
    sector_basis,
    sector_propagator,
    spin_values,
)
from .model import ChainSpec

ALIAS_TOL = 1e-3
POSITIVITY_TOL = 1e-6


def default_n_phi(N: int) -> int:
    """Smallest odd integer >= 4N+1."""
    n = 4 * N + 1
    return n if n % 2 else n + 1


def kick_angles(n_phi: int) -> np.ndarray:
    if n_phi < 1 or n_phi % 2 == 0:
        raise ValueError(f"the number of kick angles must be odd, got {n_phi}")
    return 2.0 * math.pi * np.arange(n_phi) / n_phi


def default_echo_times(count: int = 24, t_min: float = 0.5, t_max: float = 500.0) -> np.ndarray:
    return np.geomspace(t_min, t_max, count)


@dataclass
class ZogeRecord:
    """Echo samples at one time and the spectrum ``Q[i]`` at integer ``n[i]``."""

    t: float
    phases: np.ndarray
    M: np.ndarray
    n: np.ndarray
    Q: np.ndarray
    imag_residual: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def Q0(self) -> float:
        return float(self.Q[self.n == 0][0])

    @property
    def total(self) -> float:
        return float(self.Q.sum())

    @property
    def alias_mass(self) -> float:
        return float(abs(self.Q[0]) + abs(self.Q[-1]))

    @property
    def aliased(self) -> bool:
        return self.alias_mass > ALIAS_TOL

    def negative_mass(self) -> float:
        """Most negative coefficient beyond the positivity tolerance, 0 if none."""
        lo = float(self.Q.min())
        return lo if lo < -POSITIVITY_TOL else 0.0


@dataclass
class PolarizationProfile:
    t: float
    p: np.ndarray
    site: int

    @property
    def S2(self) -> float:
        return float(np.dot(self.p, self.p))

    @property
    def P00(self) -> float:
        return float(self.p[self.site])

    def variance(self) -> float:
        n = np.arange(len(self.p))
        mean = np.dot(n, self.p)
        return float(np.dot(n * n, self.p) - mean * mean)


def _site(state: ManyBodyState, site: int | None) -> int:
    site = state.site if site is None else site
    if site is None:
        raise ValueError("excitation site unknown; pass site=")
    return int(site)


def zoge_spectrum(M, t: float = float("nan"), phases=None) -> ZogeRecord:
    """Discrete Fourier coefficients ``Q_n = (1/N_phi) sum_j M_j exp(-i n phi_j)``.

    ``M`` must be sampled at ``phi_j = 2 pi j / N_phi`` with ``N_phi`` odd. ``Q`` is
    the real part; the largest imaginary part is kept as ``imag_residual``.
    """
    M = np.asarray(M)
    n_phi = len(M)
    grid = kick_angles(n_phi)
    if phases is not None and not np.allclose(phases, grid, atol=1e-12):
        raise ValueError("echo must be sampled on the uniform grid 2 pi j / N_phi")
    half = (n_phi - 1) // 2
    n = np.arange(-half, half + 1)
    Qc = np.exp(-1j * np.outer(n, grid)) @ M / n_phi
    return ZogeRecord(float(t), grid, M, n, Qc.real.copy(), float(np.abs(Qc.imag).max()))


def spectrum_variance(record: ZogeRecord) -> float:
    """Second moment ``sum_n n^2 Q_n`` of the spectrum."""
    return float(np.dot(record.n.astype(float) ** 2, record.Q))


def _normalize(sz, b):
    return (sz - b) / (0.5 - b)


def _batched_back(spec: ChainSpec, fwd: ManyBodyState, t: float, phis: np.ndarray, plan,
                  site: int, max_bytes: float = 2 ** 27) -> np.ndarray:
    """``<Sz_site>`` after kick(phi) and backward evolution, for every phi."""
    g = gradient_moment(fwd.masks, fwd.N)
    sz = spin_values(fwd.masks, site)
    out = np.empty(len(phis))
    dim = len(fwd.amp)
    chunk = max(1, int(max_bytes // (16 * dim)))
    if isinstance(plan, ExactPlan):
        prop = sector_propagator(spec, fwd.sector if fwd.sector is not None else _only_sector(fwd))
        idx = None if fwd.packed else prop.basis
    for start in range(0, len(phis), chunk):
        ph = phis[start:start + chunk]
        stack = fwd.amp[:, None] * np.exp(-1j * np.outer(g, ph))
        if isinstance(plan, ExactPlan):
            if idx is None:
                stack = prop.propagate(stack, -t)
            else:
                sub = prop.propagate(stack[idx], -t)
                stack = np.zeros_like(stack)
                stack[idx] = sub
        else:
            stack = np.ascontiguousarray(stack)
            if t > 0:
                _trotter(stack, spec, t, plan, -1.0)
        out[start:start + chunk] = sz @ (np.abs(stack) ** 2)
    return out


def _check_plan(plan):
    plan = TrotterPlan() if plan is None else plan
    if isinstance(plan, TrotterPlan) and plan.dt > plan.dt_cap and not plan.allow_large_dt:
        raise ValueError(f"dt={plan.dt} exceeds the cap {plan.dt_cap}")
    return plan


def echo_values(spec: ChainSpec, t: float, psi0: ManyBodyState, phis, plan=None,
                site: int | None = None) -> np.ndarray:
    """``M(t, phi)`` for every kick angle in ``phis`` from the excited state ``psi0``."""
    plan = _check_plan(plan)
    site = _site(psi0, site)
    b = background_polarization(psi0, site)
    fwd = evolve(psi0.copy(), spec, t, plan, "forward")
    sz = _batched_back(spec, fwd, t, np.atleast_1d(np.asarray(phis, float)), plan, site)
    return _normalize(sz, b)


def loschmidt_echo(spec: ChainSpec, t: float, phi_g: float, psi_eq: ManyBodyState, plan=None,
                   site: int | None = None) -> float:
    """Echo ``M(t, phi_g)`` starting from the pre-excitation state ``psi_eq``.

    The excitation ``S+_site`` is applied to ``psi_eq``, which must have the site
    down in every component.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    site = _site(psi_eq, site)
    psi0 = raise_spin(psi_eq, site)
    return float(echo_values(spec, t, psi0, [phi_g], plan, site)[0])


def echo_spectrum(spec: ChainSpec, t: float, psi0: ManyBodyState, n_phi: int | None = None,
                  plan=None, site: int | None = None) -> ZogeRecord:
    n_phi = default_n_phi(spec.N) if n_phi is None else n_phi
    phis = kick_angles(n_phi)
    rec = zoge_spectrum(echo_values(spec, t, psi0, phis, plan, site), t)
    rec.meta.update(n_phi=n_phi)
    return rec


def echo_series(spec: ChainSpec, psi0: ManyBodyState, times, n_phi: int | None = None,
                plan=None, site: int | None = None) -> list[ZogeRecord]:
    """Echo spectra at every time; the forward branch is advanced incrementally."""
    plan = _check_plan(plan)
    site = _site(psi0, site)
    n_phi = default_n_phi(spec.N) if n_phi is None else n_phi
    phis = kick_angles(n_phi)
    b = background_polarization(psi0, site)
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) < 0) or np.any(times < 0):
        raise ValueError("times must be non-negative and ascending")
    fwd = psi0.copy()
    now = 0.0
    out = []
    for t in times:
        evolve(fwd, spec, float(t - now), plan, "forward")
        now = float(t)
        sz = _batched_back(spec, fwd, now, phis, plan, site)
        rec = zoge_spectrum(_normalize(sz, b), now)
        rec.meta.update(n_phi=n_phi)
        out.append(rec)
    return out


def polarization_of(state: ManyBodyState, site: int, b: float, t: float) -> PolarizationProfile:
    prob = np.abs(state.amp) ** 2
    masks = state.masks
    sz = np.array([np.dot(prob, spin_values(masks, n)) for n in range(state.N)])
    return PolarizationProfile(float(t), _normalize(sz, b), site)


def polarization_trace(spec: ChainSpec, psi0: ManyBodyState, times, plan=None,
                       site: int | None = None) -> list[PolarizationProfile]:
    """Forward-only snapshots of the normalized local polarization."""
    plan = _check_plan(plan)
    site = _site(psi0, site)
    b = background_polarization(psi0, site)
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) < 0) or np.any(times < 0):
        raise ValueError("times must be non-negative and ascending")
    if isinstance(plan, ExactPlan):
        return _exact_trace(spec, psi0, times, site, b)
    state = psi0.copy()
    now = 0.0
    out = []
    for t in times:
        evolve(state, spec, float(t - now), plan, "forward")
        now = float(t)
        out.append(polarization_of(state, site, b, now))
    return out


def _exact_trace(spec, psi0, times, site, b, chunk: int = 256):
    ups = psi0.sector if psi0.sector is not None else _only_sector(psi0)
    prop = sector_propagator(spec, ups)
    packed = psi0.to_sector(ups) if not psi0.packed else psi0
    V = prop.vectors
    coef = V.T @ packed.amp
    zmat = np.stack([spin_values(prop.basis, n) for n in range(spec.N)], axis=1)
    out = []
    for start in range(0, len(times), chunk):
        tt = times[start:start + chunk]
        c = coef[:, None] * np.exp(-1j * np.outer(prop.energies, tt))
        amp = real_matmul(V, c)
        sz = (np.abs(amp) ** 2).T @ zmat
        for t, row in zip(tt, sz):
            out.append(PolarizationProfile(float(t), _normalize(row, b), site))
    return out


def _only_sector(state: ManyBodyState) -> int:
    pops = np.bitwise_count(state.masks[np.abs(state.amp) > 0])
    if len(pops) == 0 or np.any(pops != pops[0]):
        raise ValueError("exact propagation needs a state confined to one sector")
    return int(pops[0])


# --- exact ensemble averages (no random phases) --------------------------------

def _sector_background(N: int, ups: int) -> float:
    return (ups - 1) / (N - 1) - 0.5


def ensemble_polarization(spec: ChainSpec, ups: int, site: int, times) -> list[PolarizationProfile]:
    """Random-phase average of :func:`polarization_trace`, evaluated as a trace.

    Averaging over phases leaves ``Tr[Pi Sz_n(t)] / D`` with ``Pi`` the
    projector on the sector states that have ``site`` up.
    """
    prop = sector_propagator(spec, ups)
    basis = prop.basis
    cols = np.nonzero((basis >> site) & 1)[0]
    D = len(cols)
    V = prop.vectors
    Vc = V.T[:, cols]
    zmat = np.stack([spin_values(basis, n) for n in range(spec.N)], axis=1)
    b = _sector_background(spec.N, ups)
    out = []
    for t in np.atleast_1d(np.asarray(times, dtype=float)):
        ph = np.exp(-1j * prop.energies * t)[:, None]
        cols_t = ph * Vc
        u = real_matmul(V, cols_t)
        occ = (np.abs(u) ** 2).sum(axis=1) / D
        out.append(PolarizationProfile(float(t), _normalize(occ @ zmat, b), site))
    return out


def ensemble_echo_spectrum(spec: ChainSpec, ups: int, site: int, t: float,
                           n_phi: int | None = None) -> ZogeRecord:
    """Random-phase average of the echo spectrum, computed from the trace.

    With ``A = U Pi U^+`` and ``B = U Sz_site U^+`` (``U = exp(-iHt)`` on the
    sector), ``M(phi) ~ sum_ab A_ab B_ba exp(i phi (g_b - g_a))``, so each
    coefficient is a sum over pairs with a fixed gradient-moment difference.
    The result is folded onto ``N_phi`` indices the way a sampled transform is.
    """
    n_phi = default_n_phi(spec.N) if n_phi is None else n_phi
    grid = kick_angles(n_phi)
    prop = sector_propagator(spec, ups)
    basis = prop.basis
    up = ((basis >> site) & 1).astype(float)
    D = up.sum()
    U = prop.unitary(t)
    A = (U * up) @ U.conj().T
    B = (U * spin_values(basis, site)) @ U.conj().T
    C = A * B.T
    # gradient moments can be half-integers; their differences never are
    g2 = np.rint(2 * gradient_moment(basis, spec.N)).astype(np.int64)
    diff = (g2[None, :] - g2[:, None]) // 2
    lo = int(diff.min())
    re = np.bincount((diff - lo).ravel(), weights=C.real.ravel())
    im = np.bincount((diff - lo).ravel(), weights=C.imag.ravel())
    n_all = np.arange(lo, lo + len(re))
    b = _sector_background(spec.N, ups)
    Q_all = (re + 1j * im) / D
    Q_all[n_all == 0] -= b
    Q_all /= (0.5 - b)
    half = (n_phi - 1) // 2
    n = np.arange(-half, half + 1)
    folded = np.zeros(n_phi, dtype=complex)
    np.add.at(folded, (n_all + half) % n_phi, Q_all)
    M = (np.exp(1j * np.outer(grid, n)) @ folded).real
    rec = ZogeRecord(float(t), grid, M, n, folded.real.copy(), float(np.abs(folded.imag).max()))
    rec.meta.update(n_phi=n_phi, exact=True, unfolded_support=(int(n_all[np.abs(Q_all) > 1e-14].min()),
                                                              int(n_all[np.abs(Q_all) > 1e-14].max())))
    return rec
