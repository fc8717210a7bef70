"""Order-violation penalty, similarity score, and the in-batch triplet loss.

Both embeddings live in the non-negative orthant and a text-image pair is
scored by how badly the image fails to be dominated by the text:

    penalty(x, y) = || max(0, y - x) ||^2        (0 iff y <= x elementwise)
    score(t, i)   = -penalty(t, i)               (always <= 0)

For a batch of B aligned pairs, every other batch member of the opposite
modality is a negative. Each positive pair pays a hinge against each
negative whose score comes within `alpha` of its own, summed over both
directions (`negative_mode="max"` keeps only the worst negative per
direction instead). An optional variance bonus on negative embeddings is
subtracted with weight `lambda_var`; it is off by default because it makes
the objective unbounded below.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

NEGATIVE_MODES = ("sum", "max")
VARIANCE_SCOPES = ("components", "batch")


@dataclass(frozen=True)
class LossConfig:
    alpha: float
    lambda_var: float = 0.0
    negative_mode: str = "sum"
    variance_scope: str = "components"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.negative_mode not in NEGATIVE_MODES:
            raise ValueError(f"negative_mode must be one of {NEGATIVE_MODES}")
        if self.variance_scope not in VARIANCE_SCOPES:
            raise ValueError(f"variance_scope must be one of {VARIANCE_SCOPES}")


def _as_vector_pair(x, y, what):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"{what}: shapes {x.shape} and {y.shape} differ")
    return x, y


def order_penalty(x, y) -> float:
    """Squared norm of the positive part of y - x."""
    x, y = _as_vector_pair(x, y, "order_penalty")
    return float(np.sum(np.maximum(0.0, y - x) ** 2))


def similarity(v_txt, v_img) -> float:
    """-order_penalty(v_txt, v_img); 0 is the best possible score."""
    return -order_penalty(v_txt, v_img)


def variance_term(v) -> float:
    """Population variance of the vector's components."""
    v = np.asarray(v, dtype=np.float64)
    if v.size < 1:
        raise ShapeError("variance_term: empty vector")
    return float(np.mean((v - np.mean(v)) ** 2))


def pairwise_order_penalty(x_rows: np.ndarray, y_rows: np.ndarray) -> np.ndarray:
    """Penalty matrix: entry (i, k) = order_penalty(x_rows[i], y_rows[k])."""
    x = np.asarray(x_rows, dtype=np.float64)
    y = np.asarray(y_rows, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeError(
            f"pairwise_order_penalty: shapes {x.shape} and {y.shape} incompatible"
        )
    out = np.empty((x.shape[0], y.shape[0]))
    for k in range(y.shape[0]):
        out[:, k] = np.sum(np.maximum(0.0, y[k] - x) ** 2, axis=1)
    return out


def similarity_matrix(v_txt_rows: np.ndarray, v_img_rows: np.ndarray) -> np.ndarray:
    """Entry (i, k) = similarity(text i, image k); all entries <= 0."""
    return -pairwise_order_penalty(v_txt_rows, v_img_rows)


def _row_variance(row: Tensor) -> Tensor:
    """Differentiable population variance of a (1, j) row: E[x^2] - E[x]^2."""
    return ad.sub(ad.reduce_mean(ad.square(row)), ad.square(ad.reduce_mean(row)))


def _batch_variance(rows: Tensor) -> Tensor:
    """Mean over components of the per-component variance across the batch."""
    n = rows.shape[0]
    avg = Tensor.const(np.full((1, n), 1.0 / n))
    col_mean = ad.matmul(avg, rows)                  # (1, j)
    col_mean_sq = ad.matmul(avg, ad.square(rows))    # (1, j)
    return ad.reduce_mean(ad.sub(col_mean_sq, ad.square(col_mean)))


def batch_loss(v_txt: Tensor, v_img: Tensor, cfg: LossConfig) -> Tensor:
    """Scalar triplet loss over a batch of (B, j) embedding rows.

    Index i of both batches is the aligned positive pair. Requires B >= 2
    (a batch with no negatives has no loss).
    """
    if v_txt.shape != v_img.shape or v_txt.data.ndim != 2:
        raise ShapeError(
            f"batch_loss: batches {v_txt.shape} and {v_img.shape} must be equal (B, j)"
        )
    n, j = v_txt.shape
    if n < 2:
        raise ValueError("batch_loss: need B >= 2 to form negatives")

    ones_col = Tensor.const(np.ones((n, 1)))
    ones_j = Tensor.const(np.ones((j, 1)))
    alpha_col = Tensor.const(np.full((n, 1), cfg.alpha))

    use_var = cfg.lambda_var != 0.0
    if use_var and cfg.variance_scope == "components":
        var_txt = [_row_variance(ad.slice_row(v_txt, i)) for i in range(n)]
        var_img = [_row_variance(ad.slice_row(v_img, i)) for i in range(n)]
    elif use_var:
        batch_var_txt = _batch_variance(v_txt)
        batch_var_img = _batch_variance(v_img)

    terms: list[Tensor] = []
    for i in range(n):
        txt_i = ad.slice_row(v_txt, i)
        img_i = ad.slice_row(v_img, i)
        # column i of the similarity matrix: S(T_r, I_i) for every text r
        img_i_rows = ad.matmul(ones_col, img_i)
        col = ad.neg(ad.matmul(ad.square(ad.relu(ad.sub(img_i_rows, v_txt))), ones_j))
        # row i: S(T_i, I_k) for every image k
        txt_i_rows = ad.matmul(ones_col, txt_i)
        row = ad.neg(ad.matmul(ad.square(ad.relu(ad.sub(v_img, txt_i_rows))), ones_j))

        s_ii = ad.slice_row(col, i)                       # (1, 1)
        s_ii_col = ad.matmul(ones_col, s_ii)
        hinge_txt = ad.relu(ad.add(alpha_col, ad.sub(col, s_ii_col)))
        hinge_img = ad.relu(ad.add(alpha_col, ad.sub(row, s_ii_col)))

        mask = np.ones((n, 1)); mask[i] = 0.0
        mask_t = Tensor.const(mask)

        if cfg.negative_mode == "sum":
            terms.append(ad.reduce_sum(ad.mul(hinge_txt, mask_t)))
            terms.append(ad.reduce_sum(ad.mul(hinge_img, mask_t)))
            if use_var:
                lam = Tensor.const(-cfg.lambda_var)
                if cfg.variance_scope == "components":
                    for r in range(n):
                        if r == i:
                            continue
                        terms.append(ad.mul(lam, var_txt[r]))
                        terms.append(ad.mul(lam, var_img[r]))
                else:
                    lam_nm1 = Tensor.const(-cfg.lambda_var * (n - 1))
                    terms.append(ad.mul(lam_nm1, batch_var_txt))
                    terms.append(ad.mul(lam_nm1, batch_var_img))
        else:
            for modality, hinge in (("txt", hinge_txt), ("img", hinge_img)):
                vals = hinge.data[:, 0].copy()
                vals[i] = -1.0  # never pick the positive itself
                pick = int(np.argmax(vals))  # ties: lowest gallery index
                terms.append(ad.reduce_sum(ad.slice_row(hinge, pick)))
                if use_var:
                    lam = Tensor.const(-cfg.lambda_var)
                    if cfg.variance_scope == "components":
                        chosen = var_txt[pick] if modality == "txt" else var_img[pick]
                    else:
                        chosen = batch_var_txt if modality == "txt" else batch_var_img
                    terms.append(ad.mul(lam, chosen))

    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total
