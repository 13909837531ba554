"""Compare the compiled and numpy likelihood kernels.

Usage: python benchmarks/bench_kernels.py [--particles N] [--repeat R]

Checks that both backends agree and prints the best-of-R time per call.
"""

import argparse
import timeit

import numpy as np

from qmetro import _kernels_py
from qmetro.device import DeviceLikelihood, DeviceModel

try:
    from qmetro import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None


def kernel_args(lik: DeviceLikelihood, n: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    positions = rng.uniform(0.0, np.pi, size=(n, 3))
    weights = rng.random(n)
    weights /= weights.sum()
    control = rng.uniform(0.0, 2 * np.pi, size=3)
    center = weights @ positions
    common = (lik._qout, lik._va, lik._vb)
    probs = common + (positions, control, lik.model.visibility, lik._eff, lik._same)
    moments = common + (positions, control, weights, center, lik.model.visibility,
                        lik._eff, lik._same)
    return probs, moments


def best_time(fn, args, repeat: int) -> float:
    number = max(1, int(0.2 / max(timeit.timeit(lambda: fn(*args), number=1), 1e-6)))
    times = timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)
    return min(times) / number


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--particles", type=int, nargs="+", default=[200, 2000, 20000])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    lik = DeviceLikelihood(DeviceModel.perturbed())
    backends = {"numpy": _kernels_py}
    if _kernels_c is not None:
        backends["cython"] = _kernels_c
    else:
        print("compiled extension not available; timing the numpy backend only")

    print(f"{'kernel':<18}{'particles':>10}" + "".join(f"{b:>14}" for b in backends)
          + ("  speedup" if len(backends) == 2 else ""))
    for n in args.particles:
        probs_args, moment_args = kernel_args(lik, n)
        for name, args_ in (("two_photon_probs", probs_args), ("outcome_moments", moment_args)):
            outputs = [getattr(mod, name)(*args_) for mod in backends.values()]
            outputs = [o if isinstance(o, tuple) else (o,) for o in outputs]
            if len(outputs) == 2:
                for a, b in zip(*outputs):
                    np.testing.assert_allclose(a, b, atol=1e-12)
            times = [best_time(getattr(mod, name), args_, args.repeat) for mod in backends.values()]
            line = f"{name:<18}{n:>10}" + "".join(f"{t * 1e3:>12.3f}ms" for t in times)
            if len(times) == 2:
                line += f"  {times[0] / times[1]:6.1f}x"
            print(line)


if __name__ == "__main__":
    main()
