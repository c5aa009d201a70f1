"""State-vector dynamics of the XXZ chain in the incommensurate field.

Amplitudes are stored over the computational basis indexed by bitmask, bit
``n`` set meaning spin ``n`` up. The Hamiltonian is

    H = -(J/2) sum_n (S+_n S-_{n+1} + h.c.) + sum_n eps_n Sz_n + U sum_n Sz_n Sz_{n+1}

with open ends. The flip-flop sign matches the one-body solver so amplitudes,
not only populations, agree in the one-excitation sector.

Two propagators are provided. :func:`evolve` with a :class:`TrotterPlan` is a
matrix-free second-order split over even and odd bonds acting on the full
``2**N`` vector. With an :class:`ExactPlan` the Hamiltonian is diagonalized
inside each magnetization sector, which is the practical route to long times.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations
from math import comb
from pathlib import Path
from typing import Literal

import numpy as np
from scipy.linalg import eigh, expm

from .model import ChainSpec, site_energies

Direction = Literal["forward", "backward"]

MAX_FULL_SITES = 24
MAX_REFERENCE_SITES = 12


def state_rng(seed: int | None, realization: int = 0, branch: int = 0) -> np.random.Generator:
    """Counter-based generator fixed by ``(seed, realization, branch)``."""
    ss = np.random.SeedSequence(seed, spawn_key=(int(realization), int(branch)))
    return np.random.Generator(np.random.Philox(ss))


@lru_cache(maxsize=8)
def _full_masks(N: int) -> np.ndarray:
    m = np.arange(1 << N, dtype=np.int64)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=64)
def sector_basis(N: int, ups: int) -> np.ndarray:
    """Sorted bitmasks with ``ups`` spins up."""
    if not 0 <= ups <= N:
        raise ValueError(f"no sector with {ups} up spins on {N} sites")
    if N <= MAX_FULL_SITES:
        m = _full_masks(N)
        out = m[np.bitwise_count(m) == ups]
    else:
        # long chains only fit in storage for few (or few missing) up spins
        if N > 62:
            raise ValueError(f"bitmask basis limited to N <= 62, got {N}")
        if comb(N, ups) > 1 << MAX_FULL_SITES:
            raise ValueError(f"sector ({N}, {ups}) too large to enumerate")
        out = np.array(sorted(sum(1 << i for i in c) for c in combinations(range(N), ups)),
                       dtype=np.int64)
    out.setflags(write=False)
    return out


def spin_values(masks: np.ndarray, n: int) -> np.ndarray:
    """``Sz`` eigenvalue (+-1/2) of site ``n`` for each mask."""
    return ((masks >> n) & 1) - 0.5


def gradient_moment(masks: np.ndarray, N: int) -> np.ndarray:
    """``g(mask) = sum_n n m_n`` with ``m_n = +-1/2``."""
    g = np.zeros(len(masks))
    for n in range(1, N):
        g += n * spin_values(masks, n)
    return g


@dataclass
class ManyBodyState:
    """Amplitudes of an ``N``-spin state.

    ``basis`` is ``None`` for full ``2**N`` storage, otherwise the sorted masks of
    the one sector the amplitudes are packed on. ``site`` is the excitation site
    when the state comes from one of the constructors here, and ``lineage``
    records the seeds behind its random phases.
    """

    amp: np.ndarray
    N: int
    sector: int | None = None
    basis: np.ndarray | None = None
    site: int | None = None
    lineage: dict = field(default_factory=dict)

    def __post_init__(self):
        self.amp = np.asarray(self.amp, dtype=complex)
        dim = (1 << self.N) if self.basis is None else len(self.basis)
        if self.amp.shape[0] != dim:
            raise ValueError(f"amplitude length {self.amp.shape[0]} != basis size {dim}")

    @property
    def masks(self) -> np.ndarray:
        return _full_masks(self.N) if self.basis is None else self.basis

    @property
    def packed(self) -> bool:
        return self.basis is not None

    def copy(self) -> "ManyBodyState":
        return ManyBodyState(self.amp.copy(), self.N, self.sector, self.basis, self.site,
                             dict(self.lineage))

    def norm2(self) -> float:
        return float(np.vdot(self.amp, self.amp).real)

    def overlap(self, other: "ManyBodyState") -> complex:
        return complex(np.vdot(self.amp, other.to_basis(self.basis).amp))

    def to_full(self) -> "ManyBodyState":
        if self.basis is None:
            return self
        amp = np.zeros(1 << self.N, dtype=complex)
        amp[self.basis] = self.amp
        return ManyBodyState(amp, self.N, self.sector, None, self.site, dict(self.lineage))

    def to_sector(self, ups: int | None = None) -> "ManyBodyState":
        """Pack onto one sector; weight outside it must be exactly zero."""
        ups = self.sector if ups is None else ups
        if ups is None:
            raise ValueError("state carries no sector label; pass ups")
        basis = sector_basis(self.N, ups)
        if self.basis is not None and self.sector == ups:
            return self
        full = self.to_full()
        outside = np.ones(1 << self.N, dtype=bool)
        outside[basis] = False
        if np.any(full.amp[outside] != 0):
            raise ValueError(f"state has weight outside the {ups}-up sector")
        return ManyBodyState(full.amp[basis].copy(), self.N, ups, basis, self.site,
                             dict(self.lineage))

    def to_basis(self, basis: np.ndarray | None) -> "ManyBodyState":
        if basis is None:
            return self.to_full()
        if self.basis is basis:
            return self
        return self.to_sector(int(np.bitwise_count(basis[0])))


def product_state(N: int, up_sites, packed: bool = False, site: int | None = None) -> ManyBodyState:
    """Basis state with ``up_sites`` up; ``packed`` stores it on its sector only."""
    mask = 0
    for n in up_sites:
        if not 0 <= int(n) < N:
            raise IndexError(f"site {n} outside 0..{N - 1}")
        mask |= 1 << int(n)
    ups = int(bin(mask).count("1"))
    if packed:
        basis = sector_basis(N, ups)
        amp = np.zeros(len(basis), dtype=complex)
        amp[np.searchsorted(basis, mask)] = 1.0
        return ManyBodyState(amp, N, ups, basis, site)
    if N > MAX_FULL_SITES:
        raise ValueError(f"N={N} exceeds full-storage limit {MAX_FULL_SITES}; use packed=True")
    amp = np.zeros(1 << N, dtype=complex)
    amp[mask] = 1.0
    return ManyBodyState(amp, N, ups, None, site)


def _configurations(N: int, ups: int | None, site: int, site_up: bool) -> np.ndarray:
    masks = _full_masks(N)
    bit = (masks >> site) & 1
    sel = bit == (1 if site_up else 0)
    if ups is not None:
        sel &= np.bitwise_count(masks) == ups
    return masks[sel]


def random_sector_state(N: int, ups: int | None, excitation_site: int,
                        rng: np.random.Generator | int | None = None,
                        packed: bool = False) -> ManyBodyState:
    """Excited random-phase state with the excitation site up.

    The other ``N-1`` spins run over every configuration with ``ups-1`` up
    spins, each with modulus ``D**-0.5`` and an independent uniform phase. With
    ``ups=None`` all ``2**(N-1)`` configurations enter (no sector restriction).
    """
    if not 0 <= excitation_site < N:
        raise IndexError(f"excitation site {excitation_site} outside 0..{N - 1}")
    if ups is not None and not 1 <= ups <= N:
        raise ValueError(f"cannot place the excitation in a sector with {ups} up spins on {N} sites")
    if N > MAX_FULL_SITES:
        raise ValueError(f"N={N} exceeds full-storage limit {MAX_FULL_SITES}")
    rng, lineage = _as_rng(rng)
    conf = _configurations(N, ups, excitation_site, site_up=True)
    D = len(conf)
    phases = rng.uniform(0.0, 2.0 * math.pi, size=D)
    vals = np.exp(1j * phases) / math.sqrt(D)
    if packed:
        if ups is None:
            raise ValueError("packed storage needs a sector")
        basis = sector_basis(N, ups)
        amp = np.zeros(len(basis), dtype=complex)
        amp[np.searchsorted(basis, conf)] = vals
        return ManyBodyState(amp, N, ups, basis, excitation_site, lineage)
    amp = np.zeros(1 << N, dtype=complex)
    amp[conf] = vals
    return ManyBodyState(amp, N, ups, None, excitation_site, lineage)


def random_thermal_state(N: int, ups: int | None, excitation_site: int,
                         rng: np.random.Generator | int | None = None,
                         packed: bool = False) -> ManyBodyState:
    """Pre-excitation state: excitation site down, the rest as in :func:`random_sector_state`.

    ``ups`` counts up spins *after* the excitation, so the returned state lies in
    the ``ups-1`` sector.
    """
    psi0 = random_sector_state(N, ups, excitation_site, rng, packed=False)
    amp = np.zeros_like(psi0.amp)
    conf = np.nonzero(psi0.amp)[0]
    amp[conf ^ (1 << excitation_site)] = psi0.amp[conf]
    sector = None if ups is None else ups - 1
    out = ManyBodyState(amp, N, sector, None, excitation_site, psi0.lineage)
    return out.to_sector() if packed else out


def raise_spin(state: ManyBodyState, site: int) -> ManyBodyState:
    """Normalized ``S+_site |psi>``; the site must be down in every component."""
    full = state.to_full()
    masks = full.masks
    up = ((masks >> site) & 1).astype(bool)
    if np.any(np.abs(full.amp[up]) > 0):
        raise ValueError(f"state has components with site {site} already up")
    amp = np.zeros_like(full.amp)
    amp[masks[~up] | (1 << site)] = full.amp[~up]
    nrm = np.linalg.norm(amp)
    if nrm == 0:
        raise ValueError("S+ annihilates the state")
    sector = None if state.sector is None else state.sector + 1
    out = ManyBodyState(amp / nrm, state.N, sector, None, site, dict(state.lineage))
    return out.to_sector() if state.packed else out


def _as_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng, {}
    if rng is None or isinstance(rng, (int, np.integer)):
        return state_rng(rng), {"seed": None if rng is None else int(rng)}
    raise TypeError("rng must be a numpy Generator, an int seed or None")


def local_magnetization(state: ManyBodyState) -> np.ndarray:
    """``<Sz_n>`` for every site."""
    prob = np.abs(state.amp) ** 2
    masks = state.masks
    return np.array([np.dot(prob, spin_values(masks, n)) for n in range(state.N)])


def background_polarization(state: ManyBodyState, site: int) -> float:
    """Mean ``<Sz>`` of the non-excited spins when ``site`` holds the full +1/2.

    For the sector constructors this is ``(ups-1)/(N-1) - 1/2``; it vanishes in
    the ``(N+1)/2`` sector and for the unrestricted ensemble.
    """
    prob = np.abs(state.amp) ** 2
    total = 0.0
    masks = state.masks
    for n in range(state.N):
        total += np.dot(prob, spin_values(masks, n))
    return float((total - 0.5) / (state.N - 1))


def apply_gradient_kick(state: ManyBodyState, phi_g: float) -> ManyBodyState:
    """Multiply amplitudes by ``exp(-i phi_g g(mask))`` in place."""
    if phi_g != 0.0:
        state.amp *= np.exp(-1j * phi_g * _gradient(state))
    return state


def _gradient(state: ManyBodyState) -> np.ndarray:
    if state.basis is None:
        return _full_gradient(state.N)
    return _sector_gradient(state.N, int(np.bitwise_count(state.basis[0])))


@lru_cache(maxsize=8)
def _full_gradient(N: int) -> np.ndarray:
    return gradient_moment(_full_masks(N), N)


@lru_cache(maxsize=32)
def _sector_gradient(N: int, ups: int) -> np.ndarray:
    return gradient_moment(sector_basis(N, ups), N)


# --- Trotter kernel ---------------------------------------------------------

@dataclass(frozen=True)
class TrotterPlan:
    """Second-order symmetric split: half A, full B, half A per step.

    A holds the even bonds and B the odd ones; on-site fields are shared onto
    the adjacent bonds so every gate is an exact two-site unitary.
    """

    dt: float = 0.02
    order: int = 2
    dt_cap: float = 0.05
    allow_large_dt: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt!r}")
        if self.order != 2:
            raise ValueError("only the symmetric second-order split is implemented")

    def steps(self, t: float) -> int:
        return max(1, math.ceil(t / self.dt - 1e-9))


@dataclass(frozen=True)
class ExactPlan:
    """Exact propagation by diagonalizing H inside each magnetization sector."""


def bond_fields(spec: ChainSpec) -> tuple[np.ndarray, np.ndarray]:
    """Field weight each bond carries for its left and right site."""
    eps = site_energies(spec)
    left = 0.5 * eps[:-1].copy()
    right = 0.5 * eps[1:].copy()
    left[0] = eps[0]
    right[-1] = eps[-1]
    return left, right


def bond_hamiltonian(spec: ChainSpec, bond: int) -> np.ndarray:
    """4x4 bond term in the local basis ``|b_{n+1} b_n>`` ordered 00, 01, 10, 11."""
    left, right = bond_fields(spec)
    hl, hr = left[bond], right[bond]
    h = np.zeros((4, 4))
    for idx in range(4):
        bn = idx & 1
        bn1 = (idx >> 1) & 1
        mn, mn1 = bn - 0.5, bn1 - 0.5
        h[idx, idx] = hl * mn + hr * mn1 + spec.U * mn * mn1
    h[1, 2] = h[2, 1] = -0.5 * spec.J
    return h


class _Gate:
    __slots__ = ("bond", "p00", "p11", "m")

    def __init__(self, bond: int, u: np.ndarray):
        self.bond = bond
        self.p00 = u[0, 0]
        self.p11 = u[3, 3]
        self.m = u[1:3, 1:3].copy()

    def apply(self, amp: np.ndarray, N: int) -> None:
        n = self.bond
        v = amp.reshape((1 << (N - n - 2), 2, 2, 1 << n) + amp.shape[1:])
        v[:, 0, 0] *= self.p00
        v[:, 1, 1] *= self.p11
        a = v[:, 0, 1].copy()  # spin n up, n+1 down
        b = v[:, 1, 0]
        m = self.m
        v[:, 0, 1] = m[0, 0] * a + m[0, 1] * b
        v[:, 1, 0] = m[1, 0] * a + m[1, 1] * b


@lru_cache(maxsize=64)
def _gate_layers(spec: ChainSpec, tau: float) -> tuple[tuple[_Gate, ...], tuple[_Gate, ...], tuple[_Gate, ...]]:
    """(A half-step, B full step, A full step) gate layers for time step ``tau``."""
    def layer(bonds, dt):
        return tuple(_Gate(b, expm(-1j * dt * bond_hamiltonian(spec, b))) for b in bonds)
    even = range(0, spec.N - 1, 2)
    odd = range(1, spec.N - 1, 2)
    return layer(even, 0.5 * tau), layer(odd, tau), layer(even, tau)


def _trotter(amp: np.ndarray, spec: ChainSpec, t: float, plan: TrotterPlan, sign: float) -> None:
    nsteps = plan.steps(t)
    tau = t / nsteps
    half_a, full_b, full_a = _gate_layers(spec, sign * tau)
    N = spec.N
    # consecutive A half-steps fuse into full A steps
    for g in half_a:
        g.apply(amp, N)
    for step in range(nsteps):
        for g in full_b:
            g.apply(amp, N)
        for g in (half_a if step == nsteps - 1 else full_a):
            g.apply(amp, N)


def evolve(state: ManyBodyState, spec: ChainSpec, t: float, plan: TrotterPlan | ExactPlan | None = None,
           direction: Direction = "forward") -> ManyBodyState:
    """Apply ``exp(-i H t)`` (forward) or ``exp(+i H t)`` (backward) in place.

    Both directions use the same gate sequence, so a forward sweep followed by a
    backward one of equal length is the identity gate by gate.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    if state.N != spec.N:
        raise ValueError(f"state has {state.N} sites, spec has {spec.N}")
    plan = TrotterPlan() if plan is None else plan
    if t == 0:
        return state
    sign = 1.0 if direction == "forward" else -1.0
    if isinstance(plan, ExactPlan):
        sector_propagator(spec, _sector_of(state)).apply(state, sign * t)
        return state
    if plan.dt > plan.dt_cap and not plan.allow_large_dt:
        raise ValueError(f"dt={plan.dt} exceeds the cap {plan.dt_cap}; set allow_large_dt to override")
    if state.packed:
        raise ValueError("the Trotter kernel needs full 2**N storage; call to_full() first")
    _trotter(state.amp, spec, float(t), plan, sign)
    return state


def _sector_of(state: ManyBodyState) -> int:
    if state.sector is not None:
        return state.sector
    pops = np.bitwise_count(state.masks[np.abs(state.amp) > 0])
    if len(pops) == 0 or np.any(pops != pops[0]):
        raise ValueError("exact sector propagation needs a state confined to one sector")
    return int(pops[0])


# --- exact propagation ------------------------------------------------------

def sector_hamiltonian(spec: ChainSpec, ups: int) -> np.ndarray:
    """Dense real Hamiltonian block on :func:`sector_basis` ``(N, ups)``."""
    N = spec.N
    basis = sector_basis(N, ups)
    D = len(basis)
    eps = site_energies(spec)
    diag = np.zeros(D)
    for n in range(N):
        diag += eps[n] * spin_values(basis, n)
    for n in range(N - 1):
        diag += spec.U * spin_values(basis, n) * spin_values(basis, n + 1)
    H = np.diag(diag)
    for n in range(N - 1):
        differ = (((basis >> n) ^ (basis >> (n + 1))) & 1).astype(bool)
        src = np.nonzero(differ)[0]
        dst = np.searchsorted(basis, basis[src] ^ ((1 << n) | (1 << (n + 1))))
        H[dst, src] += -0.5 * spec.J
    return H


def real_matmul(A: np.ndarray, z: np.ndarray) -> np.ndarray:
    """``A @ z`` for real ``A`` and complex ``z`` as two contiguous real products.

    Strided ``z.real`` views make numpy bypass BLAS, which costs ~30x at D ~ 10^3.
    """
    z = np.asarray(z)
    if not np.iscomplexobj(z):
        return A @ z
    return A @ np.ascontiguousarray(z.real) + 1j * (A @ np.ascontiguousarray(z.imag))


class SectorPropagator:
    """Eigendecomposition of H in one sector; exact ``exp(-i H t)`` for any t."""

    def __init__(self, spec: ChainSpec, ups: int):
        self.spec = spec
        self.ups = ups
        self.basis = sector_basis(spec.N, ups)
        self.energies, self.vectors = eigh(sector_hamiltonian(spec, ups), driver="evd")

    @property
    def dim(self) -> int:
        return len(self.basis)

    def propagate(self, amp: np.ndarray, t: float) -> np.ndarray:
        """``exp(-i H t) amp`` for packed amplitudes, shape ``(D,)`` or ``(D, k)``."""
        V = self.vectors
        coef = real_matmul(V.T, amp)
        ph = np.exp(-1j * self.energies * t)
        coef = coef * (ph if coef.ndim == 1 else ph[:, None])
        return real_matmul(V, coef)

    def unitary(self, t: float) -> np.ndarray:
        return (self.vectors * np.exp(-1j * self.energies * t)) @ self.vectors.T

    def apply(self, state: ManyBodyState, t: float) -> ManyBodyState:
        if state.packed:
            if state.basis is not self.basis and not np.array_equal(state.basis, self.basis):
                raise ValueError("state is packed on a different sector")
            state.amp[...] = self.propagate(state.amp, t)
            return state
        sub = state.amp[self.basis]
        rest = np.abs(state.amp).sum() - np.abs(sub).sum()
        if rest > 1e-12 * max(1.0, np.abs(sub).sum()):
            raise ValueError(f"state has weight outside the {self.ups}-up sector")
        state.amp[self.basis] = self.propagate(sub, t)
        return state


@lru_cache(maxsize=6)
def sector_propagator(spec: ChainSpec, ups: int) -> SectorPropagator:
    return SectorPropagator(spec, ups)


def _site_operator(op: np.ndarray, n: int, N: int) -> np.ndarray:
    # kron runs over sites N-1..0 so the row index equals the bitmask
    out = np.ones((1, 1))
    eye = np.eye(2)
    for k in range(N - 1, -1, -1):
        out = np.kron(out, op if k == n else eye)
    return out


def dense_hamiltonian(spec: ChainSpec) -> np.ndarray:
    """Full ``2**N`` Hamiltonian built from Kronecker products of spin matrices."""
    N = spec.N
    if N > MAX_REFERENCE_SITES:
        raise ValueError(f"dense reference limited to N <= {MAX_REFERENCE_SITES}")
    sz = np.diag([-0.5, 0.5])  # basis order: down, up
    sp = np.array([[0.0, 0.0], [1.0, 0.0]])
    sm = sp.T
    Z = [_site_operator(sz, n, N) for n in range(N)]
    P = [_site_operator(sp, n, N) for n in range(N)]
    M = [_site_operator(sm, n, N) for n in range(N)]
    eps = site_energies(spec)
    H = sum(eps[n] * Z[n] for n in range(N))
    for n in range(N - 1):
        H = H - 0.5 * spec.J * (P[n] @ M[n + 1] + M[n] @ P[n + 1])
        H = H + spec.U * (Z[n] @ Z[n + 1])
    return H


def exact_evolve_reference(spec: ChainSpec, state: ManyBodyState, t: float) -> ManyBodyState:
    """``exp(-i H t)|psi>`` with the dense matrix exponential (test oracle, N <= 12)."""
    if spec.N > MAX_REFERENCE_SITES:
        raise ValueError(f"exact reference refused for N={spec.N} > {MAX_REFERENCE_SITES}")
    full = state.to_full().copy()
    if t != 0:
        full.amp = expm(-1j * t * dense_hamiltonian(spec)) @ full.amp
    return full


# --- checkpoints ------------------------------------------------------------

_MAGIC = b"ZOGEST01"


def save_state(state: ManyBodyState, path) -> None:
    """Binary checkpoint: magic, uint32 header length, JSON header, complex64 LE payload."""
    full = state.to_full()
    header = {"N": state.N, "sector": state.sector, "site": state.site,
              "lineage": state.lineage, "dtype": "<c8", "length": len(full.amp)}
    hb = json.dumps(header, sort_keys=True).encode()
    with open(Path(path), "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        fh.write(full.amp.astype("<c8").tobytes())


def load_state(path) -> ManyBodyState:
    with open(Path(path), "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path} is not a state checkpoint")
        (hl,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hl))
        amp = np.frombuffer(fh.read(), dtype="<c8")
    if len(amp) != header["length"]:
        raise ValueError("truncated checkpoint payload")
    return ManyBodyState(amp.astype(complex), header["N"], header["sector"], None,
                         header["site"], header["lineage"])


def sector_dimension(N: int, ups: int) -> int:
    return comb(N, ups)
