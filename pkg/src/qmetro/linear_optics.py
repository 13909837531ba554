"""Fock-space bookkeeping and photon propagation through linear-optical unitaries.

Conventions
-----------
A creation operator on input mode ``j`` maps to ``sum_k U[k, j] a_k^dagger``,
so the transition amplitude between input occupation ``s`` and output
occupation ``t`` is ``perm(U[t_rows, s_cols]) / sqrt(prod(s!) prod(t!))``,
where ``t_rows`` (``s_cols``) lists each output (input) mode once per photon.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

ModeOccupation = tuple[int, ...]


def as_occupation(occ: Sequence[int]) -> ModeOccupation:
    out = tuple(int(x) for x in occ)
    if any(x < 0 for x in out):
        raise ValueError(f"occupation numbers must be non-negative, got {out}")
    return out


@dataclass(frozen=True)
class FockBasis:
    """All occupations of ``n`` photons over ``m`` modes, lexicographically descending."""

    m: int
    n: int
    states: tuple[ModeOccupation, ...]

    def __len__(self) -> int:
        return len(self.states)

    def __iter__(self):
        return iter(self.states)

    def index(self, state: Sequence[int]) -> int:
        return self._lookup()[as_occupation(state)]

    def _lookup(self) -> dict[ModeOccupation, int]:
        return _basis_lookup(self.m, self.n)

    def labels(self) -> list[str]:
        return ["".join(str(x) for x in s) for s in self.states]


def _compositions(n: int, m: int):
    # descending lexicographic order: largest first-mode occupation first
    if m == 1:
        yield (n,)
        return
    for first in range(n, -1, -1):
        for rest in _compositions(n - first, m - 1):
            yield (first,) + rest


@lru_cache(maxsize=None)
def enumerate_basis(m: int, n: int) -> FockBasis:
    if m < 1 or n < 0:
        raise ValueError(f"need m >= 1 and n >= 0, got m={m}, n={n}")
    return FockBasis(m=m, n=n, states=tuple(_compositions(n, m)))


@lru_cache(maxsize=None)
def _basis_lookup(m: int, n: int) -> dict[ModeOccupation, int]:
    return {s: i for i, s in enumerate(enumerate_basis(m, n).states)}


def permanent(A) -> complex:
    """Permanent of a square matrix by Ryser's formula with Gray-code ordering.

    Runs in O(2^k k) for a k x k matrix.
    """
    A = np.asarray(A, dtype=complex)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"permanent needs a square matrix, got shape {A.shape}")
    k = A.shape[0]
    if k == 0:
        return 1.0 + 0j
    row_sums = np.zeros(k, dtype=complex)
    total = 0j
    in_subset = np.zeros(k, dtype=bool)
    size = 0
    for g in range(1, 1 << k):
        # bit flipped between consecutive Gray codes
        j = (g & -g).bit_length() - 1
        if in_subset[j]:
            row_sums -= A[:, j]
            size -= 1
        else:
            row_sums += A[:, j]
            size += 1
        in_subset[j] = not in_subset[j]
        term = np.prod(row_sums)
        total += -term if size % 2 else term
    return complex(total * (-1) ** k)


def check_unitary(U, atol: float = 1e-10) -> np.ndarray:
    U = np.asarray(U, dtype=complex)
    if U.ndim != 2 or U.shape[0] != U.shape[1]:
        raise ValueError(f"unitary must be square, got shape {U.shape}")
    if not np.allclose(U.conj().T @ U, np.eye(U.shape[0]), atol=atol, rtol=0):
        raise ValueError("matrix is not unitary")
    return U


def random_unitary(m: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed unitary from the QR decomposition of a Ginibre matrix."""
    Z = (rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m))) / np.sqrt(2)
    Q, R = np.linalg.qr(Z)
    d = np.diag(R)
    return Q * (d / np.abs(d))


@dataclass(frozen=True)
class PureState:
    basis: FockBasis
    amplitudes: np.ndarray

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex)
        if amps.shape != (len(self.basis),):
            raise ValueError("amplitude vector does not match the basis")
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)

    def norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.amplitudes) ** 2)))

    def probabilities(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def amplitude(self, state: Sequence[int]) -> complex:
        return complex(self.amplitudes[self.basis.index(state)])

    def occupation_matrix(self) -> np.ndarray:
        """Occupations as a (basis size, m) integer array."""
        return np.array(self.basis.states, dtype=int)


def _mode_list(occ: ModeOccupation) -> list[int]:
    return [mode for mode, count in enumerate(occ) for _ in range(count)]


def _factorial_norm(occ: ModeOccupation) -> float:
    return math.prod(math.factorial(x) for x in occ)


def _check_dims(U: np.ndarray, occ: ModeOccupation) -> None:
    if U.shape[0] != len(occ):
        raise ValueError(f"unitary of dimension {U.shape[0]} applied to {len(occ)} modes")


def evolve(U, input_state: Sequence[int]) -> PureState:
    U = check_unitary(U)
    s = as_occupation(input_state)
    _check_dims(U, s)
    basis = enumerate_basis(len(s), sum(s))
    cols = _mode_list(s)
    ns = _factorial_norm(s)
    amps = np.empty(len(basis), dtype=complex)
    for i, t in enumerate(basis.states):
        rows = _mode_list(t)
        sub = U[np.ix_(rows, cols)]
        amps[i] = permanent(sub) / math.sqrt(ns * _factorial_norm(t))
    return PureState(basis, amps)


def probabilities_indistinguishable(U, input_state: Sequence[int]) -> np.ndarray:
    return evolve(U, input_state).probabilities()


def probabilities_distinguishable(U, input_state: Sequence[int]) -> np.ndarray:
    """Output statistics of two photons that do not interfere.

    Each photon is routed independently with probabilities ``|U[out, in]|**2``;
    every (photon 1 output, photon 2 output) assignment is enumerated and
    binned into its occupation outcome.
    """
    U = check_unitary(U)
    s = as_occupation(input_state)
    _check_dims(U, s)
    if sum(s) != 2:
        raise ValueError(f"distinguishable statistics need exactly 2 photons, got {sum(s)}")
    m = len(s)
    basis = enumerate_basis(m, 2)
    single = np.abs(U) ** 2
    sources = _mode_list(s)
    probs = np.zeros(len(basis))
    for outputs in itertools.product(range(m), repeat=len(sources)):
        weight = 1.0
        for src, dst in zip(sources, outputs):
            weight *= single[dst, src]
        occ = [0] * m
        for dst in outputs:
            occ[dst] += 1
        probs[basis.index(occ)] += weight
    return probs


def mix_visibility(p_ind, p_dist, visibility: float) -> np.ndarray:
    if not 0.0 <= visibility <= 1.0:
        raise ValueError(f"visibility must lie in [0, 1], got {visibility}")
    p_ind = np.asarray(p_ind, dtype=float)
    p_dist = np.asarray(p_dist, dtype=float)
    if p_ind.shape != p_dist.shape:
        raise ValueError("probability vectors are not aligned")
    p = visibility * p_ind + (1.0 - visibility) * p_dist
    return p / p.sum()
