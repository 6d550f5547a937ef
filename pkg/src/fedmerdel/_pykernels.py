"""Pure numpy/scipy versions of the compiled kernels in ``_ckernels``.

The E and M steps become sparse one-hot matrix products. One-hot matrices are
cached per (read-only) index array so repeated EM cycles do not rebuild them.
"""
from __future__ import annotations

import weakref

import numpy as np
from scipy import sparse

_TINY = 1e-300
_onehot_cache: dict[int, tuple[weakref.ref, sparse.csr_matrix]] = {}


def _onehot(idx: np.ndarray, n_columns: int) -> sparse.csr_matrix:
    key = id(idx)
    hit = _onehot_cache.get(key)
    if hit is not None and hit[0]() is idx and hit[1].shape[1] == n_columns:
        return hit[1]
    n_rows, n_vars = idx.shape
    mat = sparse.csr_matrix(
        (np.ones(n_rows * n_vars), idx.ravel().astype(np.int64), np.arange(0, n_rows * n_vars + 1, n_vars)),
        shape=(n_rows, n_columns),
    )
    if not idx.flags.writeable:
        _onehot_cache[key] = (weakref.ref(idx, lambda _, k=key: _onehot_cache.pop(k, None)), mat)
    return mat


def log_rho(idx, elogpi, elogphi_t):
    onehot = _onehot(idx, elogphi_t.shape[0])
    return np.asarray(onehot @ elogphi_t) + elogpi[None, :]


def estep(idx, elogpi, elogphi_t):
    logits = log_rho(idx, elogpi, elogphi_t)
    logits -= logits.max(axis=1, keepdims=True)
    resp = np.exp(logits)
    resp /= resp.sum(axis=1, keepdims=True)
    resp[resp < _TINY] = 0.0
    positive = resp > 0
    entropy = float(np.sum(resp[positive] * np.log(resp[positive])))
    return resp, entropy


def category_counts(idx, resp, n_columns):
    onehot = _onehot(idx, n_columns)
    return np.asarray(onehot.T @ resp)


def hamming_assign(values, modes):
    n_rows = values.shape[0]
    dists = np.empty((n_rows, modes.shape[0]), dtype=np.int32)
    for k, mode in enumerate(modes):
        dists[:, k] = np.count_nonzero(values != mode[None, :], axis=1)
    labels = np.argmin(dists, axis=1).astype(np.int32)
    return labels, dists[np.arange(n_rows), labels]
