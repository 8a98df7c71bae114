"""Confidence-weighted matrix factorization with content-coupled item priors.

Closed-form block updates: each user (item) vector is the exact maximizer of
the joint objective given everything else, obtained from a symmetric
positive-definite solve.  The confidence decomposition (weight b everywhere
plus a-b on observed entries) keeps a full sweep at
O(K^2 * nnz + K^3 * (num_users + num_items)) without materializing dense
user-item products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .exceptions import NumericError, ShapeError, ValidationError


@dataclass(frozen=True)
class ConfidenceParams:
    """Rating confidences: weight ``a`` on observed entries, ``b`` elsewhere."""

    a: float
    b: float

    def __post_init__(self):
        # b = 0 is allowed: it reduces the updates to regularized least
        # squares over observed entries only.
        if not (self.a > self.b >= 0.0):
            raise ValidationError(f"need a > b >= 0, got a={self.a}, b={self.b}")


@dataclass
class LatentFactors:
    """User matrix U (num_users x K) and item matrix V (num_items x K)."""

    U: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=np.float64)
        self.V = np.asarray(self.V, dtype=np.float64)
        if self.U.ndim != 2 or self.V.ndim != 2 or self.U.shape[1] != self.V.shape[1]:
            raise ShapeError(
                f"factor shapes {self.U.shape} and {self.V.shape} do not share a width"
            )
        if not (np.isfinite(self.U).all() and np.isfinite(self.V).all()):
            raise NumericError("non-finite latent factor")

    @property
    def n_factors(self):
        return self.U.shape[1]


def _solve_spd(A, rhs):
    try:
        c, low = scipy.linalg.cho_factor(A)
        return scipy.linalg.cho_solve((c, low), rhs)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise NumericError(f"SPD solve failed: {exc}") from exc


def _user_system(V, rated_items, conf, lambda_u, gram=None):
    K = V.shape[1]
    if gram is None:
        gram = V.T @ V
    A = lambda_u * np.eye(K) + conf.b * gram
    if len(rated_items):
        Vo = V[rated_items]
        A += (conf.a - conf.b) * (Vo.T @ Vo)
        rhs = conf.a * Vo.sum(axis=0)
    else:
        rhs = np.zeros(K)
    return A, rhs


def _item_system(U, rated_users, conf, lambda_v, encoding, gram=None):
    K = U.shape[1]
    if gram is None:
        gram = U.T @ U
    A = lambda_v * np.eye(K) + conf.b * gram
    rhs = lambda_v * np.asarray(encoding, dtype=np.float64)
    if rhs.shape != (K,):
        raise ShapeError(f"encoding width {rhs.shape} != ({K},)")
    if len(rated_users):
        Uo = U[rated_users]
        A += (conf.a - conf.b) * (Uo.T @ Uo)
        rhs = rhs + conf.a * Uo.sum(axis=0)
    return A, rhs


def update_user(V, rated_items, conf, lambda_u, gram=None):
    """Exact maximizer of the joint objective in one user vector.

    ``rated_items`` are the item ids with an observed rating (value 1);
    ``gram`` may pass a precomputed V.T @ V shared across a sweep.
    """
    A, rhs = _user_system(V, rated_items, conf, lambda_u, gram)
    return _solve_spd(A, rhs)


def update_item(U, rated_users, conf, lambda_v, encoding, gram=None):
    """Exact maximizer in one item vector, pulled toward its content encoding."""
    A, rhs = _item_system(U, rated_users, conf, lambda_v, encoding, gram)
    return _solve_spd(A, rhs)


def user_gradient(u, V, rated_items, conf, lambda_u, gram=None):
    """Gradient of the joint objective w.r.t. one user vector (zero at the
    update_user output, up to solver round-off)."""
    A, rhs = _user_system(V, rated_items, conf, lambda_u, gram)
    return rhs - A @ u


def item_gradient(v, U, rated_users, conf, lambda_v, encoding, gram=None):
    A, rhs = _item_system(U, rated_users, conf, lambda_v, encoding, gram)
    return rhs - A @ v


def sweep_users(V, ratings, conf, lambda_u):
    """One full pass of exact user updates; rows are mutually independent."""
    gram = V.T @ V
    U = np.empty((ratings.num_users, V.shape[1]))
    for i in range(ratings.num_users):
        U[i] = update_user(V, ratings.items_of(i), conf, lambda_u, gram=gram)
    return U


def sweep_items(U, ratings, conf, lambda_v, encodings):
    """One full pass of exact item updates toward the given encodings."""
    encodings = np.asarray(encodings, dtype=np.float64)
    if encodings.shape != (ratings.num_items, U.shape[1]):
        raise ShapeError(
            f"encodings shape {encodings.shape} != {(ratings.num_items, U.shape[1])}"
        )
    gram = U.T @ U
    V = np.empty((ratings.num_items, U.shape[1]))
    for j in range(ratings.num_items):
        V[j] = update_item(U, ratings.users_of(j), conf, lambda_v, encodings[j], gram=gram)
    return V


def predict(u, v):
    """Predicted rating: plain dot product of user and item vectors."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ShapeError(f"factor widths {u.shape} and {v.shape} differ")
    return float(u @ v)


def predict_new_item(u, encoding):
    """Cold-start rating for an unrated item: its offset is zero, so the item
    vector is exactly the content encoding."""
    return predict(u, encoding)


def rating_objective(U, V, ratings, conf):
    """Negative weighted squared rating error over all user-item pairs.

    Computed as the b-weighted sum over every pair plus the (a-b) correction
    on observed entries, so the dense product matrix is never formed.
    """
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if U.shape[0] != ratings.num_users or V.shape[0] != ratings.num_items:
        raise ShapeError("factor row counts do not match the ratings matrix")
    if U.shape[1] != V.shape[1]:
        raise ShapeError("factor widths differ")
    # overflow/nan propagate into the returned value; callers with a
    # divergence policy check finiteness themselves
    with np.errstate(over="ignore", invalid="ignore"):
        gram_v = V.T @ V
        background = conf.b * float(np.sum((U @ gram_v) * U))
        pairs = ratings.pairs
        if len(pairs):
            p = np.sum(U[pairs[:, 0]] * V[pairs[:, 1]], axis=1)
            observed = float(np.sum(conf.a * (1.0 - p) ** 2 - conf.b * p ** 2))
        else:
            observed = 0.0
    return -0.5 * (background + observed)


def save_factors(factors, path):
    """Checkpoint U and V; the round trip through load_factors is bit-exact."""
    np.savez(path, U=factors.U, V=factors.V)


def load_factors(path):
    with np.load(path) as blob:
        return LatentFactors(blob["U"], blob["V"])


def export_factors_text(factors, path):
    """Human-readable factor dump for inspection."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            f"# users={factors.U.shape[0]} items={factors.V.shape[0]} "
            f"n_factors={factors.n_factors}\n"
        )
        fh.write("# U\n")
        for row in factors.U:
            fh.write("\t".join(format(x, ".17g") for x in row) + "\n")
        fh.write("# V\n")
        for row in factors.V:
            fh.write("\t".join(format(x, ".17g") for x in row) + "\n")
