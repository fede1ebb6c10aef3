"""Stepped-unitary propagation kernels for the 4-level NV-13C Hamiltonian.

Two interchangeable backends live here:

* numba: per-step exact exponential from a warm-started cyclic Jacobi
  diagonalization (the previous step's eigenvectors rotate the new
  Hamiltonian to near-diagonal form, so one or two sweeps suffice);
* numpy: the same propagator vectorized over a batch of cells, one batched
  ``np.linalg.eigh`` per frequency step.

Both compute ``psi <- V exp(-2 pi i W dt) V^T psi`` with ``H = V W V^T``.
The Hamiltonian is real symmetric in the fixed basis
``|0,up>, |0,down>, |1,up>, |1,down>``, so ``V`` is real orthogonal.

Cell parameters are packed as rows of a float array with columns
``PARAM_COLUMNS``; detuning at step ``k`` is ``det0 + k * ddet``.
"""

import numpy as np

from ._accel import HAS_NUMBA, njit

PARAM_COLUMNS = ("f_n", "rabi", "a_zz", "a_zx", "det0", "ddet", "dt")
N_PARAMS = len(PARAM_COLUMNS)

_TWO_PI = 2.0 * np.pi
_JACOBI_TOL = 1e-14
_JACOBI_MAX_SWEEPS = 30
# steps between exact re-orthonormalization of V and recomputation of V^T H V
_REFRESH_EVERY = 16


def hamiltonian_stack(f_n, rabi, a_zz, a_zx, detuning):
    """Broadcast the 4x4 rotating-frame matrix over array arguments.

    Returns an array of shape ``broadcast_shape + (4, 4)``.
    """
    f_n, rabi, a_zz, a_zx, detuning = np.broadcast_arrays(
        *(np.asarray(x, dtype=float) for x in (f_n, rabi, a_zz, a_zx, detuning)))
    h = np.zeros(f_n.shape + (4, 4))
    h[..., 0, 0] = -0.5 * f_n
    h[..., 1, 1] = 0.5 * f_n
    h[..., 2, 2] = detuning - 0.5 * f_n + 0.5 * a_zz
    h[..., 3, 3] = detuning + 0.5 * f_n - 0.5 * a_zz
    h[..., 0, 2] = h[..., 2, 0] = 0.5 * rabi
    h[..., 1, 3] = h[..., 3, 1] = 0.5 * rabi
    h[..., 2, 3] = h[..., 3, 2] = 0.5 * a_zx
    return h


def eigh_descending(h):
    """``np.linalg.eigh`` with eigenpairs ordered from highest to lowest."""
    w, v = np.linalg.eigh(h)
    return w[..., ::-1], v[..., ::-1]


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _fill_h(h, f_n, rabi, a_zz, a_zx, det):
    for i in range(4):
        for j in range(4):
            h[i, j] = 0.0
    h[0, 0] = -0.5 * f_n
    h[1, 1] = 0.5 * f_n
    h[2, 2] = det - 0.5 * f_n + 0.5 * a_zz
    h[3, 3] = det + 0.5 * f_n - 0.5 * a_zz
    h[0, 2] = 0.5 * rabi
    h[2, 0] = 0.5 * rabi
    h[1, 3] = 0.5 * rabi
    h[3, 1] = 0.5 * rabi
    h[2, 3] = 0.5 * a_zx
    h[3, 2] = 0.5 * a_zx


@njit(cache=True, nogil=True)
def _rotate_into(a, h, v, tmp):
    # a = v^T h v
    for i in range(4):
        for j in range(4):
            s = 0.0
            for k in range(4):
                s += h[i, k] * v[k, j]
            tmp[i, j] = s
    for i in range(4):
        for j in range(4):
            s = 0.0
            for k in range(4):
                s += v[k, i] * tmp[k, j]
            a[i, j] = s
    for i in range(4):
        for j in range(i + 1, 4):
            s = 0.5 * (a[i, j] + a[j, i])
            a[i, j] = s
            a[j, i] = s


@njit(cache=True, nogil=True)
def _shift_detuning(a, v, ddet):
    # a += ddet * v^T diag(0, 0, 1, 1) v
    for i in range(4):
        for j in range(i, 4):
            d = ddet * (v[2, i] * v[2, j] + v[3, i] * v[3, j])
            a[i, j] += d
            if j != i:
                a[j, i] += d


@njit(cache=True, nogil=True)
def _orthonormalize(v):
    # modified Gram-Schmidt on columns, order preserved
    for j in range(4):
        for i in range(j):
            s = 0.0
            for k in range(4):
                s += v[k, i] * v[k, j]
            for k in range(4):
                v[k, j] -= s * v[k, i]
        s = 0.0
        for k in range(4):
            s += v[k, j] * v[k, j]
        s = 1.0 / np.sqrt(s)
        for k in range(4):
            v[k, j] *= s


@njit(cache=True, nogil=True)
def _advance_basis(a, h, v, tmp, prm, k):
    """Bring ``a`` to diagonal form of H at step ``k``; returns Jacobi status."""
    if k % _REFRESH_EVERY == 0:
        _orthonormalize(v)
        _fill_h(h, prm[0], prm[1], prm[2], prm[3], prm[4] + k * prm[5])
        _rotate_into(a, h, v, tmp)
    else:
        _shift_detuning(a, v, prm[5])
    return _jacobi(a, v)


@njit(cache=True, nogil=True)
def _jacobi(a, v):
    """Cyclic Jacobi on symmetric ``a`` in place; rotations accumulate into ``v``.

    Each rotation uses the small-angle root (|t| <= 1), so ``v`` stays as
    close to its input as possible: column identity follows overlap
    continuity.  Returns the number of sweeps, or -1 if not converged.
    """
    for sweep in range(_JACOBI_MAX_SWEEPS):
        off = 0.0
        diag = 0.0
        for p in range(4):
            diag += a[p, p] * a[p, p]
            for q in range(p + 1, 4):
                off += a[p, q] * a[p, q]
        tiny = _JACOBI_TOL * _JACOBI_TOL * (diag + 2.0 * off)
        if off <= tiny:
            return sweep
        tiny = tiny / 36.0
        for p in range(3):
            for q in range(p + 1, 4):
                apq = a[p, q]
                if apq * apq <= tiny:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for k in range(4):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(4):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(4):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
    return -1


@njit(cache=True, nogil=True)
def _initial_basis(h, v):
    w, vecs = np.linalg.eigh(h)
    for i in range(4):
        for j in range(4):
            v[i, j] = vecs[i, 3 - j]


@njit(cache=True, nogil=True)
def _unitary_step(a, v, psi, c, dt):
    # psi <- v exp(-2 pi i diag(a) dt) v^T psi ; c receives dressed amplitudes
    for j in range(4):
        s = 0.0j
        for k in range(4):
            s += v[k, j] * psi[k]
        ph = -_TWO_PI * a[j, j] * dt
        c[j] = s * (np.cos(ph) + 1j * np.sin(ph))
    for i in range(4):
        s = 0.0j
        for j in range(4):
            s += v[i, j] * c[j]
        psi[i] = s


@njit(cache=True, nogil=True)
def _propagate_batch_nb(params, nsteps, psi0, out):
    h = np.empty((4, 4))
    a = np.empty((4, 4))
    tmp = np.empty((4, 4))
    v = np.empty((4, 4))
    c = np.empty(4, dtype=np.complex128)
    psi = np.empty(4, dtype=np.complex128)
    failures = 0
    for b in range(params.shape[0]):
        prm = params[b]
        dt = prm[6]
        for i in range(4):
            psi[i] = psi0[b, i]
        _fill_h(h, prm[0], prm[1], prm[2], prm[3], prm[4])
        _initial_basis(h, v)
        for k in range(nsteps[b]):
            if _advance_basis(a, h, v, tmp, prm, k) < 0:
                failures += 1
            _unitary_step(a, v, psi, c, dt)
        for i in range(4):
            out[b, i] = psi[i]
    return failures


@njit(cache=True, nogil=True)
def _trajectory_nb(prm, n, psi0, dressed_pops, bare_pops, energies):
    h = np.empty((4, 4))
    a = np.empty((4, 4))
    tmp = np.empty((4, 4))
    v = np.empty((4, 4))
    c = np.empty(4, dtype=np.complex128)
    psi = psi0.copy()
    _fill_h(h, prm[0], prm[1], prm[2], prm[3], prm[4])
    _initial_basis(h, v)
    failures = 0
    for k in range(n):
        if _advance_basis(a, h, v, tmp, prm, k) < 0:
            failures += 1
        _unitary_step(a, v, psi, c, prm[6])
        for j in range(4):
            dressed_pops[k, j] = c[j].real ** 2 + c[j].imag ** 2
            bare_pops[k, j] = psi[j].real ** 2 + psi[j].imag ** 2
            energies[k, j] = a[j, j]
    return psi, v, failures


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------

def _propagate_batch_np(params, nsteps, psi0):
    params = np.asarray(params, dtype=float)
    psi = np.array(psi0, dtype=complex)
    f_n, rabi, a_zz, a_zx, det0, ddet, dt = params.T
    for k in range(int(nsteps.max(initial=0))):
        active = k < nsteps
        h = hamiltonian_stack(f_n, rabi, a_zz, a_zx, det0 + k * ddet)
        w, v = np.linalg.eigh(h)
        c = np.einsum("bji,bj->bi", v, psi)
        c *= np.exp(-1j * _TWO_PI * w * dt[:, None])
        new = np.einsum("bij,bj->bi", v, c)
        psi = np.where(active[:, None], new, psi)
    return psi


def _match_columns(v_prev, v):
    """Permutation of ``v``'s columns maximizing overlap with ``v_prev``."""
    overlap = (v_prev.T @ v) ** 2
    perm = np.argmax(overlap, axis=1)
    if len(set(perm.tolist())) != 4:
        from scipy.optimize import linear_sum_assignment
        _, perm = linear_sum_assignment(-overlap)
    return perm


def _trajectory_np(prm, n, psi0):
    f_n, rabi, a_zz, a_zx, det0, ddet, dt = prm
    dets = det0 + ddet * np.arange(n)
    hs = hamiltonian_stack(f_n, rabi, a_zz, a_zx, dets)
    ws, vs = eigh_descending(hs)
    psi = np.array(psi0, dtype=complex)
    dressed = np.empty((n, 4))
    bare = np.empty((n, 4))
    energies = np.empty((n, 4))
    v_prev = vs[0]
    for k in range(n):
        perm = _match_columns(v_prev, vs[k])
        w, v = ws[k][perm], vs[k][:, perm]
        c = (v.T @ psi) * np.exp(-1j * _TWO_PI * w * dt)
        psi = v @ c
        dressed[k] = np.abs(c) ** 2
        bare[k] = np.abs(psi) ** 2
        energies[k] = w
        v_prev = v
    return psi, v_prev, dressed, bare, energies


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def propagate_batch(params, nsteps, psi0, use_numba=None):
    """Propagate every cell of a batch and return final states ``(B, 4)``.

    Parameters
    ----------
    params : array_like, shape (B, 7)
        Rows of ``PARAM_COLUMNS``.
    nsteps : array_like of int, shape (B,)
    psi0 : array_like of complex, shape (B, 4)
    use_numba : bool, optional
        Override the backend chosen by ``ODNMR_DISABLE_NUMBA``.
    """
    params = np.ascontiguousarray(params, dtype=np.float64).reshape(-1, N_PARAMS)
    nsteps = np.ascontiguousarray(nsteps, dtype=np.int64).reshape(-1)
    psi0 = np.ascontiguousarray(psi0, dtype=np.complex128).reshape(-1, 4)
    if use_numba is None:
        use_numba = HAS_NUMBA
    if use_numba and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but unavailable")
    if not np.all(np.isfinite(params)):
        raise FloatingPointError("non-finite sweep parameters")
    if use_numba:
        out = np.empty_like(psi0)
        failures = _propagate_batch_nb(params, nsteps, psi0, out)
        if failures:
            raise FloatingPointError(f"Jacobi diagonalization failed on {failures} steps")
        return out
    return _propagate_batch_np(params, nsteps, psi0)


def trajectory(prm, n, psi0, use_numba=None):
    """Single-cell propagation with per-step recording.

    Returns ``(psi_final, v_final, dressed_pops, bare_pops, energies)``;
    dressed quantities are in continuity-labeled order, anchored to
    descending energy at the first step.
    """
    prm = np.ascontiguousarray(prm, dtype=np.float64)
    psi0 = np.ascontiguousarray(psi0, dtype=np.complex128)
    if not np.all(np.isfinite(prm)):
        raise FloatingPointError("non-finite sweep parameters")
    if use_numba is None:
        use_numba = HAS_NUMBA
    if not use_numba:
        return _trajectory_np(prm, n, psi0)
    dressed = np.empty((n, 4))
    bare = np.empty((n, 4))
    energies = np.empty((n, 4))
    psi, v, failures = _trajectory_nb(prm, n, psi0, dressed, bare, energies)
    if failures:
        raise FloatingPointError(f"Jacobi diagonalization failed on {failures} steps")
    return psi, v, dressed, bare, energies
