"""Shared fixtures and independent oracles for the test suite."""

import itertools
import math
from collections import defaultdict

import numpy as np
import pytest

from qmetro.device import DeviceModel
from qmetro.linear_optics import enumerate_basis


def permanent_bruteforce(A) -> complex:
    """Permanent as the plain sum over permutations."""
    A = np.asarray(A)
    n = A.shape[0]
    if n == 0:
        return 1.0
    return sum(np.prod([A[i, s[i]] for i in range(n)]) for s in itertools.permutations(range(n)))


def fock_output_oracle(U, occupation) -> np.ndarray:
    """Output amplitudes by expanding the product of creation operators.

    Each input creation operator a_j^dagger becomes sum_k U[k, j] a_k^dagger;
    the product is expanded as a polynomial in the output operators and a
    monomial prod a_k^dagger^(t_k) acting on vacuum gives sqrt(prod t_k!).
    Shares no code with the permanent path.
    """
    U = np.asarray(U)
    m = U.shape[0]
    poly = {(0,) * m: 1.0 + 0j}
    for j, count in enumerate(occupation):
        for _ in range(count):
            nxt = defaultdict(complex)
            for mono, c in poly.items():
                for k in range(m):
                    t = list(mono)
                    t[k] += 1
                    nxt[tuple(t)] += c * U[k, j]
            poly = nxt
    norm_in = math.sqrt(math.prod(math.factorial(c) for c in occupation))
    basis = enumerate_basis(m, sum(occupation))
    out = np.zeros(len(basis.states), dtype=complex)
    for mono, c in poly.items():
        out[basis.index(mono)] += c * math.sqrt(math.prod(math.factorial(t) for t in mono)) / norm_in
    return out


def eq5_quarter(phi1: float, phi2: float) -> np.ndarray:
    """Balanced quarter transcribed entry by entry from the reference matrix."""
    a, b = np.exp(1j * phi2), np.exp(1j * phi1)
    return 0.5 * np.array([
        [a, 1j * a, 1j, -1],
        [1j * a, -a, 1, 1j],
        [1j, 1, -b, 1j * b],
        [-1, 1j, 1j * b, b],
    ])


def eq6_probe(phi1: float) -> np.ndarray:
    """Reference two-photon probe amplitudes in the library's basis order."""
    basis = enumerate_basis(4, 2)
    e = np.exp(-2j * phi1)
    c = 1j / (2 * np.sqrt(2))
    amps = {
        (2, 0, 0, 0): c, (0, 2, 0, 0): -c, (0, 0, 2, 0): c * e, (0, 0, 0, 2): -c * e,
        (1, 1, 0, 0): -0.5, (0, 0, 1, 1): -0.5 * e,
    }
    v = np.zeros(10, dtype=complex)
    for state, a in amps.items():
        v[basis.index(state)] = a
    return v


def equal_up_to_phase(a, b, atol=1e-10) -> bool:
    a, b = np.asarray(a), np.asarray(b)
    overlap = np.vdot(a, b)
    if abs(overlap) < 1e-14:
        return np.allclose(a, 0, atol=atol) and np.allclose(b, 0, atol=atol)
    return np.allclose(a * overlap / abs(overlap), b, atol=atol)


@pytest.fixture(scope="session")
def ideal():
    return DeviceModel.ideal()


@pytest.fixture(scope="session")
def perturbed():
    return DeviceModel.perturbed()
