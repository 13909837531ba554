"""Model of the four-arm integrated interferometer.

Two balanced 4x4 "quarters" sandwich a layer of four phase shifters
(arms D, C, B, A on modes 1-4). Arm C is the reference, so the device is
driven by the three relative phases ``(phi_A, phi_B, phi_D)``. Unknown and
control phases enter the same three arms additively.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .linear_optics import (
    as_occupation,
    evolve,
    mix_visibility,
    probabilities_distinguishable,
    probabilities_indistinguishable,
)

PROBE_INPUT = (0, 0, 1, 1)
N_OUTCOMES = 10
TWO_PI = 2.0 * np.pi
# mode index carrying phi_A, phi_B, phi_D
UNKNOWN_MODES = (3, 2, 0)
DEFAULT_PERTURBED_SEED = 11


def coupler(r: float) -> np.ndarray:
    """Directional coupler with reflectivity ``r``."""
    if not 0.0 < r < 1.0:
        raise ValueError(f"reflectivity must lie strictly inside (0, 1), got {r}")
    t = np.sqrt(1.0 - r)
    return np.array([[np.sqrt(r), 1j * t], [1j * t, np.sqrt(r)]])


def _coupler_layer(r_top: float, r_bottom: float) -> np.ndarray:
    layer = np.zeros((4, 4), dtype=complex)
    layer[:2, :2] = coupler(r_top)
    layer[2:, 2:] = coupler(r_bottom)
    return layer


_SWAP_23 = np.eye(4)[[0, 2, 1, 3]]


@dataclass(frozen=True)
class QuarterParams:
    """Internal phases and coupler reflectivities of one quarter.

    ``reflectivities`` lists the first coupler layer (top, bottom) followed by
    the second layer (top, bottom).
    """

    phase_hi: float = 0.0
    phase_lo: float = 0.0
    reflectivities: tuple[float, float, float, float] = (0.5, 0.5, 0.5, 0.5)

    def __post_init__(self):
        refl = tuple(float(r) for r in self.reflectivities)
        if len(refl) != 4:
            raise ValueError("a quarter has exactly four couplers")
        for r in refl:
            if not 0.0 < r < 1.0:
                raise ValueError(f"reflectivity must lie strictly inside (0, 1), got {r}")
        object.__setattr__(self, "reflectivities", refl)
        object.__setattr__(self, "phase_hi", float(self.phase_hi))
        object.__setattr__(self, "phase_lo", float(self.phase_lo))


def quarter_unitary(q: QuarterParams) -> np.ndarray:
    r1, r2, r3, r4 = q.reflectivities
    phases = np.diag([np.exp(1j * q.phase_hi), 1.0, 1.0, np.exp(1j * q.phase_lo)])
    return _coupler_layer(r3, r4) @ phases @ _SWAP_23 @ _coupler_layer(r1, r2)


@dataclass(frozen=True)
class PhaseLayer:
    phi_a: float = 0.0
    phi_b: float = 0.0
    phi_c: float = 0.0
    phi_d: float = 0.0


def phase_layer_unitary(p: PhaseLayer) -> np.ndarray:
    return np.diag(np.exp(1j * np.array([p.phi_d, p.phi_c, p.phi_b, p.phi_a])))


def _frozen(a, shape=None) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ThermalModel:
    """Power-to-phase response of the three control heaters (R_a, R_b, R_d).

    ``alpha[i, k]`` is the linear response of phase ``i`` to heater ``k``
    (rad/mW, off-diagonals are cross-talk); ``alpha2[i]`` the quadratic
    self-response of heater ``i`` (rad/mW^2); ``r1``, ``r2`` parameterize the
    current-to-power law.
    """

    alpha: np.ndarray
    alpha2: np.ndarray
    phi0: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    power_limit: float = 30.0

    def __post_init__(self):
        object.__setattr__(self, "alpha", _frozen(self.alpha, (3, 3)))
        for name in ("alpha2", "phi0", "r1", "r2"):
            object.__setattr__(self, name, _frozen(getattr(self, name), (3,)))
        object.__setattr__(self, "power_limit", float(self.power_limit))

    @classmethod
    def default(cls) -> "ThermalModel":
        # 2 pi per ~22 mW; 110 Ohm heaters give 0.11 mW/mA^2
        return cls(
            alpha=np.eye(3) * TWO_PI / 22.0,
            alpha2=np.zeros(3),
            phi0=np.zeros(3),
            r1=np.full(3, 0.11),
            r2=np.full(3, 1e-4),
        )


def currents_to_powers(thermal: ThermalModel, currents) -> np.ndarray:
    i2 = np.asarray(currents, dtype=float) ** 2
    denom = 1.0 - thermal.r2 * i2
    if np.any(denom <= 0):
        raise ValueError("current beyond the validity of the resistance model")
    powers = thermal.r1 * i2 / denom
    if np.any(powers > thermal.power_limit):
        raise ValueError(f"dissipated power exceeds the {thermal.power_limit} mW limit")
    return powers


def _check_powers(thermal: ThermalModel, powers: np.ndarray) -> None:
    if np.any(powers < 0):
        raise ValueError("dissipated powers must be non-negative")
    if np.any(powers > thermal.power_limit + 1e-12):
        raise ValueError(f"dissipated power exceeds the {thermal.power_limit} mW limit")


def powers_to_phases(thermal: ThermalModel, powers) -> np.ndarray:
    """Phases for heater powers of shape ``(3,)`` or ``(n, 3)``."""
    w = np.asarray(powers, dtype=float)
    _check_powers(thermal, w)
    return w @ thermal.alpha.T + thermal.alpha2 * w ** 2 + thermal.phi0


def _solve_self(a: float, a2: float, rhs: float) -> float:
    # root of a2 w^2 + a w = rhs on the branch continuous with a2 -> 0
    if abs(a2) < 1e-15:
        return rhs / a
    disc = a * a + 4.0 * a2 * rhs
    if disc < 0:
        return np.nan
    return 2.0 * rhs / (a + np.sqrt(disc))


def phases_to_powers(thermal: ThermalModel, target_deltas, tol: float = 1e-12,
                     max_iter: int = 500) -> np.ndarray:
    """Heater powers that realize ``target_deltas`` modulo 2 pi.

    For each choice of 2 pi offsets the cross-talk system is solved by
    Gauss-Seidel fixed-point iteration; the feasible solution with the least
    total power is returned.
    """
    target = np.asarray(target_deltas, dtype=float)
    base = np.mod(target - thermal.phi0, TWO_PI)
    best = None
    for offsets in itertools.product(range(-1, 3), repeat=3):
        rhs = base + TWO_PI * np.array(offsets)
        w = np.zeros(3)
        for _ in range(max_iter):
            prev = w.copy()
            for i in range(3):
                cross = thermal.alpha[i] @ w - thermal.alpha[i, i] * w[i]
                w[i] = _solve_self(thermal.alpha[i, i], thermal.alpha2[i], rhs[i] - cross)
            if not np.all(np.isfinite(w)) or np.max(np.abs(w - prev)) < tol:
                break
        if not np.all(np.isfinite(w)):
            continue
        if np.any(w < -1e-12) or np.any(w > thermal.power_limit):
            continue
        w = np.clip(w, 0.0, None)
        residual = thermal.alpha @ w + thermal.alpha2 * w ** 2 - rhs
        if np.max(np.abs(residual)) > 1e-6:
            continue
        if best is None or w.sum() < best.sum():
            best = w
    if best is None:
        raise ValueError("target phases not reachable within the power budget")
    return best


def _default_efficiencies():
    return (1.0,) * N_OUTCOMES


@dataclass(frozen=True, eq=False)
class DeviceModel:
    quarter_in: QuarterParams = field(default_factory=QuarterParams)
    quarter_out: QuarterParams = field(default_factory=QuarterParams)
    thermal: ThermalModel = field(default_factory=ThermalModel.default)
    visibility: float = 1.0
    efficiencies: np.ndarray = field(default_factory=_default_efficiencies)

    def __post_init__(self):
        if not 0.0 <= self.visibility <= 1.0:
            raise ValueError(f"visibility must lie in [0, 1], got {self.visibility}")
        eff = _frozen(self.efficiencies, (N_OUTCOMES,))
        if np.any(eff <= 0) or np.any(eff > 1):
            raise ValueError("outcome efficiencies must lie in (0, 1]")
        object.__setattr__(self, "efficiencies", eff)
        object.__setattr__(self, "visibility", float(self.visibility))

    @classmethod
    def ideal(cls) -> "DeviceModel":
        return cls()

    @classmethod
    def perturbed(cls, seed: int = DEFAULT_PERTURBED_SEED) -> "DeviceModel":
        """Synthetic stand-in for a fabricated device with fixed imperfections."""
        rng = np.random.default_rng(seed)
        refl = rng.uniform(0.45, 0.55, size=8)
        diag = TWO_PI / 22.0 * rng.uniform(0.9, 1.1, size=3)
        alpha = np.diag(diag)
        cross = rng.uniform(0.0, 0.2, size=(3, 3)) * diag[:, None]
        alpha = alpha + cross * (1 - np.eye(3))
        thermal = ThermalModel(
            alpha=alpha,
            alpha2=diag * rng.uniform(-0.005, 0.005, size=3),
            phi0=rng.uniform(0.0, TWO_PI, size=3),
            r1=rng.uniform(0.10, 0.12, size=3),
            r2=rng.uniform(0.5e-4, 1.5e-4, size=3),
        )
        return cls(
            quarter_in=QuarterParams(reflectivities=tuple(refl[:4])),
            quarter_out=QuarterParams(reflectivities=tuple(refl[4:])),
            thermal=thermal,
            visibility=0.95,
            efficiencies=rng.uniform(0.8, 1.0, size=N_OUTCOMES),
        )

    def with_visibility(self, visibility: float) -> "DeviceModel":
        return replace(self, visibility=visibility)

    def to_dict(self) -> dict:
        def quarter(q: QuarterParams) -> dict:
            return {
                "phase_hi": q.phase_hi,
                "phase_lo": q.phase_lo,
                "reflectivities": list(q.reflectivities),
            }

        t = self.thermal
        return {
            "quarter_in": quarter(self.quarter_in),
            "quarter_out": quarter(self.quarter_out),
            "thermal": {
                "alpha": t.alpha.tolist(),
                "alpha2": t.alpha2.tolist(),
                "phi0": t.phi0.tolist(),
                "r1": t.r1.tolist(),
                "r2": t.r2.tolist(),
                "power_limit": t.power_limit,
            },
            "visibility": self.visibility,
            "efficiencies": self.efficiencies.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DeviceModel":
        validate_device_document(data)
        return cls(
            quarter_in=QuarterParams(**data["quarter_in"]),
            quarter_out=QuarterParams(**data["quarter_out"]),
            thermal=ThermalModel(**data["thermal"]),
            visibility=data["visibility"],
            efficiencies=data["efficiencies"],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "DeviceModel":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


def device_schema() -> dict:
    text = resources.files("qmetro").joinpath("schemas/device.schema.json").read_text()
    return json.loads(text)


def validate_device_document(data: dict) -> None:
    import jsonschema

    jsonschema.validate(data, device_schema())


def _layer_phases(unknown, control) -> PhaseLayer:
    total = np.asarray(unknown, dtype=float) + np.asarray(control, dtype=float)
    if total.shape != (3,):
        raise ValueError("unknown and control phases are 3-vectors (phi_A, phi_B, phi_D)")
    return PhaseLayer(phi_a=total[0], phi_b=total[1], phi_c=0.0, phi_d=total[2])


def device_unitary(model: DeviceModel, unknown, control=(0.0, 0.0, 0.0)) -> np.ndarray:
    return (
        quarter_unitary(model.quarter_out)
        @ phase_layer_unitary(_layer_phases(unknown, control))
        @ quarter_unitary(model.quarter_in)
    )


def _check_input(input_state) -> tuple[int, ...]:
    occ = as_occupation(input_state)
    if len(occ) != 4 or sum(occ) != 2:
        raise ValueError(f"the device takes two photons in four modes, got {occ}")
    return occ


def apply_efficiencies(model: DeviceModel, probs) -> np.ndarray:
    q = model.efficiencies * np.asarray(probs, dtype=float)
    return q / q.sum()


def likelihood(model: DeviceModel, unknown, control=(0.0, 0.0, 0.0),
               input_state: Sequence[int] = PROBE_INPUT) -> np.ndarray:
    """Post-selected 10-outcome distribution computed through permanents."""
    occ = _check_input(input_state)
    U = device_unitary(model, unknown, control)
    p_ind = probabilities_indistinguishable(U, occ)
    p_dist = probabilities_distinguishable(U, occ)
    return apply_efficiencies(model, mix_visibility(p_ind, p_dist, model.visibility))


def probe_state(model: DeviceModel, input_state: Sequence[int] = PROBE_INPUT):
    """State entering the phase layer."""
    return evolve(quarter_unitary(model.quarter_in), _check_input(input_state))


class DeviceLikelihood:
    """Vectorized likelihood ``(positions, control) -> (N, 10)`` for one device.

    Backed by the compiled kernel when available.
    """

    n_outcomes = N_OUTCOMES

    def __init__(self, model: DeviceModel, input_state: Sequence[int] = PROBE_INPUT):
        occ = _check_input(input_state)
        self.model = model
        self.input_state = occ
        modes = [m for m, c in enumerate(occ) for _ in range(c)]
        qin = quarter_unitary(model.quarter_in)
        self._qout = np.ascontiguousarray(quarter_unitary(model.quarter_out))
        self._va = np.ascontiguousarray(qin[:, modes[0]])
        self._vb = np.ascontiguousarray(qin[:, modes[1]])
        self._same = modes[0] == modes[1]
        self._eff = np.ascontiguousarray(model.efficiencies, dtype=float)

    def __call__(self, positions, control=(0.0, 0.0, 0.0)) -> np.ndarray:
        pos = np.atleast_2d(np.asarray(positions, dtype=float))
        return kernels.two_photon_probs(
            self._qout, self._va, self._vb, pos, np.asarray(control, dtype=float),
            self.model.visibility, self._eff, self._same,
        )

    def single(self, unknown, control=(0.0, 0.0, 0.0)) -> np.ndarray:
        return self(np.asarray(unknown, dtype=float)[None, :], control)[0]

    def outcome_moments(self, positions, weights, control, center):
        return kernels.outcome_moments(
            self._qout, self._va, self._vb,
            np.asarray(positions, dtype=float), np.asarray(control, dtype=float),
            np.asarray(weights, dtype=float), np.asarray(center, dtype=float),
            self.model.visibility, self._eff, self._same,
        )

    def with_visibility(self, visibility: float) -> "DeviceLikelihood":
        return DeviceLikelihood(self.model.with_visibility(visibility), self.input_state)

    def __getstate__(self):
        return {"model": self.model.to_dict(), "input_state": self.input_state}

    def __setstate__(self, state):
        self.__init__(DeviceModel.from_dict(state["model"]), state["input_state"])
