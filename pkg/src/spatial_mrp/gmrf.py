"""Structure matrices for intrinsic GMRF effects (RW1, ICAR) and their
constraints, scaling and conditioning."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .ingest import AdjacencyGraph


class GMRFError(ValueError):
    pass


@dataclass(frozen=True)
class StructureMatrix:
    """Symmetric PSD structure ``Q`` with one linear constraint row per null direction.

    ``constraints`` is an (m, n) array; rows are linear constraints ``a @ x = 0``.
    """

    Q: sp.csr_matrix
    constraints: np.ndarray

    @property
    def dim(self) -> int:
        return self.Q.shape[0]

    @property
    def rank_deficiency(self) -> int:
        return self.constraints.shape[0]

    def dense(self) -> np.ndarray:
        return self.Q.toarray()


@dataclass(frozen=True)
class ScaledStructure:
    base: StructureMatrix
    scale_s: float
    component_scales: np.ndarray
    scaled_Q: sp.csr_matrix

    @property
    def constraints(self) -> np.ndarray:
        return self.base.constraints

    @property
    def dim(self) -> int:
        return self.base.dim

    def as_structure(self) -> StructureMatrix:
        return StructureMatrix(self.scaled_Q, self.base.constraints)

    def nonzero_eigenvalues(self) -> np.ndarray:
        """Eigenvalues of the scaled structure restricted to its constrained subspace."""
        ev = np.linalg.eigvalsh(self.scaled_Q.toarray())
        m = self.base.rank_deficiency
        return np.sort(ev)[m:]


def rw1_precision(K: int) -> StructureMatrix:
    if K < 2:
        raise GMRFError("RW1 needs at least two levels")
    main = np.full(K, 2.0)
    main[[0, -1]] = 1.0
    Q = sp.diags([main, -np.ones(K - 1), -np.ones(K - 1)], [0, 1, -1], format="csr")
    return StructureMatrix(Q, np.ones((1, K)))


def _component_constraints(labels: np.ndarray) -> np.ndarray:
    n_comp = int(labels.max()) + 1
    A = np.zeros((n_comp, labels.size))
    A[labels, np.arange(labels.size)] = 1.0
    return A


def icar_precision(graph: AdjacencyGraph) -> StructureMatrix:
    if graph.n == 0:
        raise GMRFError("empty graph")
    n = graph.n
    rows, cols = [], []
    for a, b in graph.edges:
        rows += [a, b]
        cols += [b, a]
    W = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    Q = (sp.diags(np.asarray(W.sum(axis=1)).ravel()) - W).tocsr()
    return StructureMatrix(Q, _component_constraints(graph.components))


def _components_from_constraints(A: np.ndarray) -> np.ndarray:
    # each column belongs to exactly one constraint row for per-component constraints
    return np.argmax(A != 0, axis=0)


def constrained_inverse_diagonal(S: StructureMatrix) -> np.ndarray:
    """Diagonal of the generalized inverse of ``Q`` on ``{A x = 0}``.

    Uses ``(Q + A'A)^-1 = Q^+ + A^+ (A^+)'`` for constraint rows spanning the
    null space, solved with a sparse LU factorisation.
    """
    A = S.constraints
    M = (S.Q + sp.csr_matrix(A.T @ A)).tocsc()
    lu = spla.splu(M)
    inv = lu.solve(np.eye(S.dim))
    Apinv = np.linalg.pinv(A)
    correction = np.einsum("ij,ij->i", Apinv, Apinv)
    return np.clip(np.diag(inv) - correction, 0.0, None)


def scale_structure(S: StructureMatrix | ScaledStructure) -> ScaledStructure:
    """Rescale each connected block so its typical marginal variance is one.

    The reported ``scale_s`` is the geometric mean of the generalized-inverse
    diagonal over all non-isolated nodes (equal to the single block factor for
    connected graphs).
    """
    if isinstance(S, ScaledStructure):
        S = S.as_structure()
    comp = _components_from_constraints(S.constraints)
    diag = constrained_inverse_diagonal(S)
    degree = np.asarray(abs(S.Q).sum(axis=1)).ravel()
    active = degree > 0
    if not active.any():
        raise GMRFError("no structure to scale")
    n_comp = S.constraints.shape[0]
    scales = np.ones(n_comp)
    for c in range(n_comp):
        m = (comp == c) & active
        if m.any():
            scales[c] = np.exp(np.mean(np.log(diag[m])))
    s_pooled = float(np.exp(np.mean(np.log(diag[active]))))
    node_scale = np.sqrt(scales[comp])
    D = sp.diags(node_scale)
    scaled = (D @ S.Q @ D).tocsr()
    return ScaledStructure(S, s_pooled, scales, scaled)


def bym2_effect(v, u_star, sigma: float, phi: float) -> np.ndarray:
    if not 0.0 <= phi <= 1.0:
        raise GMRFError(f"phi must lie in [0, 1], got {phi}")
    if sigma < 0:
        raise GMRFError("sigma must be nonnegative")
    v = np.asarray(v, dtype=float)
    u_star = np.asarray(u_star, dtype=float)
    if v.shape != u_star.shape:
        raise GMRFError("v and u_star lengths differ")
    return sigma * (np.sqrt(1.0 - phi) * v + np.sqrt(phi) * u_star)


def constrain(x, A, Qinv_At=None, Q=None) -> np.ndarray:
    """Conditioning-by-kriging correction ``x - W (A W)^-1 A x`` with ``W = Q^- A'``.

    Pass either ``Qinv_At`` (precomputed ``Q^- A'``) or a nonsingular ``Q``; with
    neither, ``W = A'`` (orthogonal projection, exchangeable precision).
    ``x`` may be a vector or an (n, S) matrix of columns.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    x = np.asarray(x, dtype=float)
    if Qinv_At is None:
        if Q is None:
            W = A.T
        else:
            Qd = Q.toarray() if sp.issparse(Q) else np.asarray(Q)
            W = sla.cho_solve(sla.cho_factor(Qd), A.T)
    else:
        W = Qinv_At
    AW = A @ W
    try:
        c = sla.cho_factor(AW)
    except np.linalg.LinAlgError:
        raise GMRFError("singular constraint system A Q^- A'") from None
    return x - W @ sla.cho_solve(c, A @ x)


def dump_triplets(Q, dest) -> None:
    """Write ``Q`` as Matrix-Market coordinate text (1-based, full symmetric listing)."""
    C = sp.coo_matrix(Q)
    dest.write("%%MatrixMarket matrix coordinate real general\n")
    dest.write(f"{C.shape[0]} {C.shape[1]} {C.nnz}\n")
    order = np.lexsort((C.col, C.row))
    for r, c, v in zip(C.row[order], C.col[order], C.data[order]):
        dest.write(f"{r + 1} {c + 1} {v:.17g}\n")
