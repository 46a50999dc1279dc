"""Backend selection and blocked traversal for the hot scan kernels.

Two interchangeable backends implement the block-level primitives:

* ``landrec._ckern`` -- Cython extension, fixed-order float64 accumulation,
  releases the GIL so query blocks parallelize across threads.
* ``landrec._kern_py`` -- NumPy fallback (BLAS matmul in float64).

The compiled backend is selected at import when present; set
``LANDREC_KERNELS=numpy`` or ``LANDREC_KERNELS=compiled`` to force one.
The blocked traversal here is shared: the index is scanned in contiguous
row chunks, per-chunk best-k candidates are merged by (score desc,
position asc), so results are identical for any chunk size or thread
count.
"""

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import _kern_py

try:
    from . import _ckern
except ImportError:
    _ckern = None

DEFAULT_CHUNK_SIZE = 16384

_env = os.environ.get("LANDREC_KERNELS", "").strip().lower()
if _env == "numpy":
    _default_backend = "numpy"
elif _env == "compiled":
    if _ckern is None:
        raise ImportError(
            "LANDREC_KERNELS=compiled but the landrec._ckern extension is not built"
        )
    _default_backend = "compiled"
elif _env:
    raise ImportError(f"unknown LANDREC_KERNELS value: {_env!r}")
else:
    _default_backend = "compiled" if _ckern is not None else "numpy"


def backend_name() -> str:
    """Name of the backend selected at import."""
    return _default_backend


def available_backends() -> list:
    names = ["numpy"]
    if _ckern is not None:
        names.insert(0, "compiled")
    return names


def _module(backend):
    name = backend or _default_backend
    if name == "compiled":
        if _ckern is None:
            raise RuntimeError("compiled kernel backend is not built")
        return _ckern
    if name == "numpy":
        return _kern_py
    raise ValueError(f"unknown kernel backend: {name!r}")


def _as_f32_matrix(a) -> np.ndarray:
    m = np.ascontiguousarray(a, dtype=np.float32)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def topk_search(queries, matrix, k, *, chunk_size=DEFAULT_CHUNK_SIZE,
                threads=1, backend=None):
    """Exact top-k dot-product search of each query row against ``matrix``.

    Returns (scores, positions): float64 and int64 arrays of shape
    (Q, min(k, N)), each row ordered by score descending with
    position-ascending tie-break. Positions are row indices into ``matrix``.
    """
    mod = _module(backend)
    q = _as_f32_matrix(queries)
    m = _as_f32_matrix(matrix)
    if q.shape[1] != m.shape[1]:
        raise ValueError(f"dim mismatch: queries {q.shape[1]} vs matrix {m.shape[1]}")
    if k < 1:
        raise ValueError("k must be >= 1")
    n_rows = m.shape[0]
    kk = min(k, n_rows)
    out_s = np.empty((q.shape[0], kk), dtype=np.float64)
    out_p = np.empty((q.shape[0], kk), dtype=np.int64)
    if q.shape[0] == 0 or n_rows == 0:
        return out_s, out_p

    def scan(lo, hi):
        part_s, part_p = [], []
        for start in range(0, n_rows, chunk_size):
            s, p = mod.topk_block(q[lo:hi], m[start:start + chunk_size], kk)
            part_s.append(s)
            part_p.append(p + start)
        if len(part_s) == 1:
            out_s[lo:hi] = part_s[0]
            out_p[lo:hi] = part_p[0]
            return
        cand_s = np.concatenate(part_s, axis=1)
        cand_p = np.concatenate(part_p, axis=1)
        for row in range(hi - lo):
            order = np.lexsort((cand_p[row], -cand_s[row]))[:kk]
            out_s[lo + row] = cand_s[row, order]
            out_p[lo + row] = cand_p[row, order]

    _run_spans(scan, q.shape[0], threads)
    return out_s, out_p


def topn_mean(rows, pool, n, *, chunk_size=DEFAULT_CHUNK_SIZE,
              threads=1, backend=None):
    """Mean of each row's top-n dot products against ``pool`` rows.

    Returns a float64 (A,) array. With fewer than n pool vectors the mean
    runs over all of them; an empty pool yields all zeros. The top-n values
    are summed in descending order so the result does not depend on chunk
    size or thread count.
    """
    mod = _module(backend)
    a = _as_f32_matrix(rows)
    p = _as_f32_matrix(pool)
    if a.shape[1] != p.shape[1]:
        raise ValueError(f"dim mismatch: rows {a.shape[1]} vs pool {p.shape[1]}")
    if n < 1:
        raise ValueError("n must be >= 1")
    n_pool = p.shape[0]
    if n_pool == 0 or a.shape[0] == 0:
        return np.zeros(a.shape[0], dtype=np.float64)
    nn = min(n, n_pool)
    out = np.empty(a.shape[0], dtype=np.float64)

    def scan(lo, hi):
        parts = []
        for start in range(0, n_pool, chunk_size):
            parts.append(mod.topn_block(a[lo:hi], p[start:start + chunk_size], nn))
        if len(parts) == 1:
            top = parts[0]
        else:
            merged = np.concatenate(parts, axis=1)
            top = np.sort(merged, axis=1)[:, ::-1][:, :nn]
        out[lo:hi] = np.sum(top, axis=1) / nn

    _run_spans(scan, a.shape[0], threads)
    return out


def _run_spans(fn, total, threads):
    """Apply fn(lo, hi) over contiguous spans of [0, total), possibly threaded.

    Spans are independent (each writes a disjoint output slice), so the
    thread count cannot change results.
    """
    if threads <= 1 or total <= 1:
        fn(0, total)
        return
    n_spans = min(threads, total)
    bounds = np.linspace(0, total, n_spans + 1, dtype=np.int64)
    with ThreadPoolExecutor(max_workers=n_spans) as pool:
        futures = [pool.submit(fn, int(bounds[i]), int(bounds[i + 1]))
                   for i in range(n_spans)]
        for fut in futures:
            fut.result()
