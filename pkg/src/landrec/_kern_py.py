"""NumPy fallback kernels, used when the compiled extension is unavailable.

Both backends share the same block-level contract (see ``kernels``):
float32 storage in, float64 accumulation, candidates ordered by score
descending with position-ascending tie-break. Dot products go through
einsum rather than BLAS matmul: einsum's accumulation order depends only
on the contraction length, so results are bit-identical for any chunk
size or thread count (BLAS reorders partial sums with the matrix shape).
"""

import numpy as np


def _dots(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("nd,qd->nq", a.astype(np.float64), b.astype(np.float64),
                     optimize=False)


def topk_block(queries: np.ndarray, rows: np.ndarray, k: int):
    """Exact top-k dot products of each query against a block of rows.

    Args:
        queries: (Q, d) float32, C-contiguous.
        rows: (N, d) float32, C-contiguous.
        k: number of candidates to keep (capped at N).

    Returns:
        (scores, positions): float64 (Q, k') and int64 (Q, k') arrays with
        k' = min(k, N), each row sorted by score descending, ties broken by
        position ascending.
    """
    n_rows = rows.shape[0]
    kk = min(k, n_rows)
    scores = _dots(rows, queries)  # (N, Q)
    out_s = np.empty((queries.shape[0], kk), dtype=np.float64)
    out_p = np.empty((queries.shape[0], kk), dtype=np.int64)
    for q in range(queries.shape[0]):
        col = scores[:, q]
        # stable sort of -score keeps equal-score rows in position order
        order = np.argsort(-col, kind="stable")[:kk]
        out_s[q] = col[order]
        out_p[q] = order
    return out_s, out_p


def topn_block(rows: np.ndarray, pool: np.ndarray, n: int) -> np.ndarray:
    """Top-n dot products of each row against a block of pool vectors.

    Returns a float64 (A, n') array, n' = min(n, B), each row sorted
    descending. Only the values are kept: the downstream mean does not
    depend on which pool member produced them.
    """
    n_pool = pool.shape[0]
    nn = min(n, n_pool)
    scores = _dots(rows, pool)  # (A, B)
    top = np.partition(scores, n_pool - nn, axis=1)[:, n_pool - nn:]
    top = np.sort(top, axis=1)[:, ::-1]
    return np.ascontiguousarray(top)
