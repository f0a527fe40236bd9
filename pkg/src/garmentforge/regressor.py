"""Row-stochastic sparse regressors: output vertex i = sum_j W_ij M_j over j in N_i."""

from dataclasses import dataclass

import numpy as np
from scipy import sparse


@dataclass(frozen=True, eq=False)
class SparseRegressor:
    neighborhoods: np.ndarray  # (m, k) input-vertex indices, fixed sparsity pattern
    values: np.ndarray         # (m, k) weights on those indices

    def __post_init__(self):
        nb = np.asarray(self.neighborhoods, dtype=np.int64)
        vals = np.asarray(self.values)
        if nb.ndim != 2 or vals.shape != nb.shape:
            raise ValueError(f"values {vals.shape} must match neighborhoods {nb.shape}")
        object.__setattr__(self, "neighborhoods", nb)
        object.__setattr__(self, "values", vals)

    @property
    def n_rows(self):
        return self.neighborhoods.shape[0]

    def apply(self, vertices):
        v = np.asarray(vertices)
        return np.einsum("mk,mkc->mc", self.values, v[self.neighborhoods])

    def to_dense(self, n):
        out = np.zeros((self.n_rows, n), dtype=self.values.dtype)
        np.add.at(out, (np.repeat(np.arange(self.n_rows), self.neighborhoods.shape[1]), self.neighborhoods.ravel()),
                  self.values.ravel())
        return out

    def to_sparse(self, n):
        m, k = self.neighborhoods.shape
        mat = sparse.csr_matrix((self.values.ravel(), (np.repeat(np.arange(m), k), self.neighborhoods.ravel())),
                                shape=(m, n))
        mat.sum_duplicates()
        mat.sort_indices()
        return mat


def softmax_rows(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_vjp(probs, grad_probs):
    """Gradient with respect to the logits of a row softmax."""
    return probs * (grad_probs - (grad_probs * probs).sum(axis=-1, keepdims=True))
