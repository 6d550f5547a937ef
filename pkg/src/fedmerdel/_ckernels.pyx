# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the variational E/M steps and k-modes assignment.

Every routine here has a numpy twin in ``_pykernels`` with the same
signature; ``fedmerdel.kernels`` picks one at import time.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()

cdef double TINY = 1e-300


def estep(const cnp.int32_t[:, ::1] idx,
          const double[::1] elogpi,
          const double[:, ::1] elogphi_t):
    """Responsibilities and assignment entropy for flattened category indices.

    ``idx[n, j]`` is the column of observation n's category for variable j in
    the flattened (sum L_j) layout; ``elogphi_t`` is that layout by cluster.
    """
    cdef Py_ssize_t n_rows = idx.shape[0], n_vars = idx.shape[1]
    cdef Py_ssize_t k_clusters = elogpi.shape[0]
    cdef Py_ssize_t n, j, k
    cdef const double* row
    cdef double mx, total, r, entropy = 0.0
    out = np.empty((n_rows, k_clusters), dtype=np.float64)
    cdef double[:, ::1] resp = out
    cdef double* acc

    for n in range(n_rows):
        acc = &resp[n, 0]
        for k in range(k_clusters):
            acc[k] = elogpi[k]
        for j in range(n_vars):
            row = &elogphi_t[idx[n, j], 0]
            for k in range(k_clusters):
                acc[k] += row[k]
        mx = acc[0]
        for k in range(1, k_clusters):
            if acc[k] > mx:
                mx = acc[k]
        total = 0.0
        for k in range(k_clusters):
            acc[k] = exp(acc[k] - mx)
            total += acc[k]
        for k in range(k_clusters):
            r = acc[k] / total
            if r < TINY:
                r = 0.0
            else:
                entropy += r * log(r)
            acc[k] = r
    return out, entropy


def log_rho(const cnp.int32_t[:, ::1] idx,
            const double[::1] elogpi,
            const double[:, ::1] elogphi_t):
    """Unnormalised log responsibilities (used by oracle-style tests)."""
    cdef Py_ssize_t n_rows = idx.shape[0], n_vars = idx.shape[1]
    cdef Py_ssize_t k_clusters = elogpi.shape[0]
    cdef Py_ssize_t n, j, k
    out = np.empty((n_rows, k_clusters), dtype=np.float64)
    cdef double[:, ::1] acc = out
    for n in range(n_rows):
        for k in range(k_clusters):
            acc[n, k] = elogpi[k]
        for j in range(n_vars):
            for k in range(k_clusters):
                acc[n, k] += elogphi_t[idx[n, j], k]
    return out


def category_counts(const cnp.int32_t[:, ::1] idx,
                    const double[:, ::1] resp,
                    Py_ssize_t n_columns):
    """Expected per-category counts, shape (n_columns, K).

    Rows are processed in blocks, variable by variable, so the destination
    rows of one variable stay in cache while the block is scanned.
    """
    cdef Py_ssize_t n_rows = idx.shape[0], n_vars = idx.shape[1]
    cdef Py_ssize_t k_clusters = resp.shape[1]
    cdef Py_ssize_t n, j, k, start, stop
    cdef Py_ssize_t block = 256
    cdef double* dst
    cdef const double* src
    out = np.zeros((n_columns, k_clusters), dtype=np.float64)
    cdef double[:, ::1] counts = out
    for start in range(0, n_rows, block):
        stop = min(start + block, n_rows)
        for j in range(n_vars):
            for n in range(start, stop):
                src = &resp[n, 0]
                dst = &counts[idx[n, j], 0]
                for k in range(k_clusters):
                    dst[k] += src[k]
    return out


def hamming_assign(const cnp.int32_t[:, ::1] values,
                   const cnp.int32_t[:, ::1] modes):
    """Nearest mode by Hamming distance, lowest index on ties."""
    cdef Py_ssize_t n_rows = values.shape[0], n_vars = values.shape[1]
    cdef Py_ssize_t k_modes = modes.shape[0]
    cdef Py_ssize_t n, j, k
    cdef cnp.int32_t d, best_d
    cdef cnp.int32_t best_k
    labels = np.empty(n_rows, dtype=np.int32)
    dists = np.empty(n_rows, dtype=np.int32)
    cdef cnp.int32_t[::1] lab = labels
    cdef cnp.int32_t[::1] dst = dists
    for n in range(n_rows):
        best_d = n_vars + 1
        best_k = 0
        for k in range(k_modes):
            d = 0
            for j in range(n_vars):
                if values[n, j] != modes[k, j]:
                    d += 1
            if d < best_d:
                best_d = d
                best_k = <cnp.int32_t>k
        lab[n] = best_k
        dst[n] = best_d
    return labels, dists
