"""Compare the numba and numpy propagation backends.

Usage::

    python3 benchmarks/bench_kernels.py [--cells 200] [--repeat 3]

Prints wall time per backend for a batch of baseline-like sweeps and a
single recorded trajectory, plus the largest amplitude difference.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from odnmr import kernels
from odnmr._accel import HAS_NUMBA
from odnmr.spinpair import ExperimentConditions, HyperfineCoupling
from odnmr.sweepsim import SweepProtocol, _cell_row


def _cells(n, seed=0):
    rng = np.random.default_rng(seed)
    sweep = SweepProtocol()
    rows = []
    for a0, th, b0 in zip(rng.uniform(5e3, 80e3, n), rng.uniform(0, np.pi / 2, n), rng.uniform(3e-3, 20e-3, n)):
        hf = HyperfineCoupling(a0 * (1 + 3 * np.cos(2 * th)) / 2, 1.5 * a0 * np.sin(2 * th))
        rows.append(_cell_row(sweep, ExperimentConditions(b0), hf))
    psi0 = np.zeros((n, 4), complex)
    psi0[:, 0] = 1.0
    return np.array(rows), np.full(n, sweep.n_steps), psi0


def _best(func, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = func()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cells", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    params, nsteps, psi0 = _cells(args.cells)
    print(f"{args.cells} sweeps x {nsteps[0]} steps, best of {args.repeat}")
    results = {}
    backends = [("numpy", False)] + ([("numba", True)] if HAS_NUMBA else [])
    for name, flag in backends:
        if flag:
            kernels.propagate_batch(params[:1], nsteps[:1], psi0[:1], use_numba=True)  # compile
            kernels.trajectory(params[0], int(nsteps[0]), psi0[0], use_numba=True)
        t_batch, out = _best(lambda: kernels.propagate_batch(params, nsteps, psi0, use_numba=flag), args.repeat)
        t_traj, _ = _best(lambda: kernels.trajectory(params[0], int(nsteps[0]), psi0[0], use_numba=flag),
                          args.repeat)
        results[name] = out
        print(f"  {name:6s} batch {t_batch:8.3f} s ({1e3 * t_batch / args.cells:7.3f} ms/sweep)"
              f"   trajectory {1e3 * t_traj:8.2f} ms")
    if len(results) == 2:
        diff = np.max(np.abs(results["numpy"] - results["numba"]))
        print(f"  max |psi_numpy - psi_numba| = {diff:.2e}")
    else:
        print("  numba unavailable; only the numpy backend was timed")


if __name__ == "__main__":
    main()
