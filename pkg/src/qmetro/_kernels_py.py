"""Pure-numpy implementation of the two-photon likelihood kernels.

Mirrors ``_kernels.pyx`` call for call; used when the compiled extension is
missing or ``QMETRO_PURE_PYTHON=1`` is set.
"""

import numpy as np

# output pairs (j <= k) in lexicographically descending occupation order
PAIRS_J = np.array([0, 0, 0, 0, 1, 1, 1, 2, 2, 3])
PAIRS_K = np.array([0, 1, 2, 3, 1, 2, 3, 2, 3, 3])
_BUNCHED = PAIRS_J == PAIRS_K
_SQRT2 = np.sqrt(2.0)


def _output_columns(qout, va, vb, phases, shift):
    ph = np.asarray(phases, dtype=float) + np.asarray(shift, dtype=float)
    n = ph.shape[0]
    layer = np.empty((n, 4), dtype=complex)
    # phase-layer modes carry (phi_D, ref, phi_B, phi_A)
    layer[:, 0] = np.exp(1j * ph[:, 2])
    layer[:, 1] = 1.0
    layer[:, 2] = np.exp(1j * ph[:, 1])
    layer[:, 3] = np.exp(1j * ph[:, 0])
    ua = (layer * va) @ qout.T
    ub = (layer * vb) @ qout.T
    return ua, ub


def two_photon_probs(qout, va, vb, phases, shift, visibility, eff, same_mode):
    """Post-selected 10-outcome probabilities for each row of ``phases``."""
    qout = np.asarray(qout, dtype=complex)
    ua, ub = _output_columns(qout, np.asarray(va), np.asarray(vb), phases, shift)
    uaj, uak = ua[:, PAIRS_J], ua[:, PAIRS_K]
    ubj, ubk = ub[:, PAIRS_J], ub[:, PAIRS_K]
    amp = uaj * ubk + uak * ubj
    amp[:, _BUNCHED] /= _SQRT2
    if same_mode:
        amp /= _SQRT2
    p_ind = amp.real ** 2 + amp.imag ** 2
    a2 = ua.real ** 2 + ua.imag ** 2
    b2 = ub.real ** 2 + ub.imag ** 2
    p_dist = a2[:, PAIRS_J] * b2[:, PAIRS_K] + a2[:, PAIRS_K] * b2[:, PAIRS_J]
    p_dist[:, _BUNCHED] *= 0.5
    q = np.asarray(eff) * (visibility * p_ind + (1.0 - visibility) * p_dist)
    return q / q.sum(axis=1, keepdims=True)


def outcome_moments(qout, va, vb, phases, shift, weights, center, visibility, eff, same_mode):
    """Predictive outcome weights and first moments of the reweighted cloud.

    Returns ``p`` with ``p[d] = sum_i w_i L[i, d]`` and ``s1`` with
    ``s1[d] = sum_i w_i L[i, d] (phases[i] - center)``.
    """
    L = two_photon_probs(qout, va, vb, phases, shift, visibility, eff, same_mode)
    wl = L * np.asarray(weights)[:, None]
    p = wl.sum(axis=0)
    s1 = wl.T @ (np.asarray(phases) - np.asarray(center))
    return p, s1
