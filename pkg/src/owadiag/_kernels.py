"""Hot inner loops for pooling and convolution lowering.

Every kernel has a numba ``@njit`` implementation and a pure-numpy twin with
identical floating-point evaluation order, so both backends return
bit-identical arrays.  Set ``OWADIAG_BACKEND=numpy`` (or ``OWADIAG_NO_NUMBA=1``)
before import to skip numba; :func:`set_backend` switches at runtime.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_env = os.environ.get("OWADIAG_BACKEND", "").strip().lower()
if os.environ.get("OWADIAG_NO_NUMBA", "").strip() not in ("", "0"):
    _env = "numpy"

HAVE_NUMBA = numba is not None
_backend = "numpy" if (_env == "numpy" or not HAVE_NUMBA) else "numba"


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> str:
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not importable")
    prev, _backend = _backend, name
    return prev


# ---------------------------------------------------------------------------
# numpy implementations


def _patches(x, ph, pw):
    B, C, H, W = x.shape
    Ho, Wo = H // ph, W // pw
    v = x[:, :, : Ho * ph, : Wo * pw].reshape(B, C, Ho, ph, Wo, pw)
    return v.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, ph * pw)


def _pool_forward_np(x, w, ph, pw):
    p = _patches(x, ph, pw)
    perm = np.argsort(-p, axis=-1, kind="stable")
    b = np.take_along_axis(p, perm, axis=-1)
    out = w[0] * b[..., 0]
    for j in range(1, w.shape[0]):
        out = out + w[j] * b[..., j]
    return out, perm


def _pool_backward_np(g, perm, w, ph, pw, H, W):
    B, C, Ho, Wo, n = perm.shape
    contrib = g[..., None] * w  # rank-ordered gradient
    gp = np.zeros((B, C, Ho, Wo, n))
    np.put_along_axis(gp, perm, contrib, axis=-1)
    gx = np.zeros((B, C, H, W))
    gx[:, :, : Ho * ph, : Wo * pw] = (
        gp.reshape(B, C, Ho, Wo, ph, pw).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * ph, Wo * pw)
    )
    return gx


def _im2col_np(xp, kh, kw, stride, Ho, Wo):
    B, C = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    # [B, C, Ho, Wo, kh, kw] -> [B, Ho, Wo, C, kh, kw]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)


def _col2im_np(dcols, shape, kh, kw, stride, Ho, Wo):
    B, C, Hp, Wp = shape
    d = dcols.reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    dx = np.zeros(shape)
    for i in reversed(range(kh)):
        for j in reversed(range(kw)):
            dx[:, :, i : i + (Ho - 1) * stride + 1 : stride, j : j + (Wo - 1) * stride + 1 : stride] += d[:, :, i, j]
    return dx


# ---------------------------------------------------------------------------
# numba implementations

if HAVE_NUMBA:

    @njit(cache=True)
    def _pool_forward_nb(x, w, ph, pw):
        B, C, H, W = x.shape
        Ho = H // ph
        Wo = W // pw
        n = ph * pw
        out = np.empty((B, C, Ho, Wo))
        perm = np.empty((B, C, Ho, Wo, n), dtype=np.int64)
        vals = np.empty(n)
        idx = np.empty(n, dtype=np.int64)
        for b in range(B):
            for c in range(C):
                for i in range(Ho):
                    for j in range(Wo):
                        for r in range(ph):
                            for s in range(pw):
                                vals[r * pw + s] = x[b, c, i * ph + r, j * pw + s]
                        # stable insertion sort, descending
                        for k in range(n):
                            idx[k] = k
                        for k in range(1, n):
                            cur = idx[k]
                            v = vals[cur]
                            m = k - 1
                            while m >= 0 and vals[idx[m]] < v:
                                idx[m + 1] = idx[m]
                                m -= 1
                            idx[m + 1] = cur
                        acc = w[0] * vals[idx[0]]
                        for k in range(1, n):
                            acc = acc + w[k] * vals[idx[k]]
                        out[b, c, i, j] = acc
                        for k in range(n):
                            perm[b, c, i, j, k] = idx[k]
        return out, perm

    @njit(cache=True)
    def _pool_backward_nb(g, perm, w, ph, pw, H, W):
        B, C, Ho, Wo, n = perm.shape
        gx = np.zeros((B, C, H, W))
        for b in range(B):
            for c in range(C):
                for i in range(Ho):
                    for j in range(Wo):
                        go = g[b, c, i, j]
                        for k in range(n):
                            f = perm[b, c, i, j, k]
                            gx[b, c, i * ph + f // pw, j * pw + f % pw] = go * w[k]
        return gx

    @njit(cache=True)
    def _im2col_nb(xp, kh, kw, stride, Ho, Wo):
        B, C = xp.shape[0], xp.shape[1]
        cols = np.empty((B * Ho * Wo, C * kh * kw))
        for b in range(B):
            for i in range(Ho):
                for j in range(Wo):
                    row = (b * Ho + i) * Wo + j
                    col = 0
                    for c in range(C):
                        for r in range(kh):
                            for s in range(kw):
                                cols[row, col] = xp[b, c, i * stride + r, j * stride + s]
                                col += 1
        return cols

    @njit(cache=True)
    def _col2im_nb(dcols, B, C, Hp, Wp, kh, kw, stride, Ho, Wo):
        dx = np.zeros((B, C, Hp, Wp))
        # per output cell the kernel offsets arrive in descending order,
        # matching the numpy twin
        for b in range(B):
            for i in range(Ho):
                for j in range(Wo):
                    row = (b * Ho + i) * Wo + j
                    col = 0
                    for c in range(C):
                        for r in range(kh):
                            for s in range(kw):
                                dx[b, c, i * stride + r, j * stride + s] += dcols[row, col]
                                col += 1
        return dx


# ---------------------------------------------------------------------------
# dispatch


def pool_forward(x, w, ph, pw):
    """OWA-pool ``x`` [B, C, H, W]; returns (output, rank->patch-index permutation)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    if _backend == "numba":
        return _pool_forward_nb(x, w, ph, pw)
    return _pool_forward_np(x, w, ph, pw)


def pool_backward(g, perm, w, ph, pw, H, W):
    g = np.ascontiguousarray(g, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    if _backend == "numba":
        return _pool_backward_nb(g, perm, w, ph, pw, H, W)
    return _pool_backward_np(g, perm, w, ph, pw, H, W)


def im2col(xp, kh, kw, stride, Ho, Wo):
    xp = np.ascontiguousarray(xp, dtype=np.float64)
    if _backend == "numba":
        return _im2col_nb(xp, kh, kw, stride, Ho, Wo)
    return _im2col_np(xp, kh, kw, stride, Ho, Wo)


def col2im(dcols, shape, kh, kw, stride, Ho, Wo):
    dcols = np.ascontiguousarray(dcols, dtype=np.float64)
    if _backend == "numba":
        B, C, Hp, Wp = shape
        return _col2im_nb(dcols, B, C, Hp, Wp, kh, kw, stride, Ho, Wo)
    return _col2im_np(dcols, shape, kh, kw, stride, Ho, Wo)
