"""Two-branch encoders into the shared non-negative embedding space.

Text: embedding lookup, a single-layer LSTM with forget gate run over all L
positions (padding included, no masking), last hidden state, elementwise
absolute value. The LSTM hidden size equals the joint dimension, so the
text branch needs no projection.

Image: two affine layers on a precomputed feature vector with a zero-floor
rectifier between them (configurable to identity), then absolute value.

All functions accept a batch of row vectors; pass tape=None for inference
(no graph is recorded) or a Tape to make the result differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

GATES = ("i", "f", "g", "o")

PARAM_SHAPES_DOC = """
embedding   (d+1, e)   row 0 is the padding token
lstm.w_*    (e, h)     input weights, gates i f g o
lstm.u_*    (h, h)     recurrent weights
lstm.b_*    (1, h)     biases
image.w1    (f, j)     first affine layer
image.b1    (1, j)
image.w2    (j, j)     second affine layer
image.b2    (1, j)
"""


@dataclass(frozen=True)
class ModelDims:
    vocab_size: int   # d, padding excluded
    embed_dim: int    # e
    hidden_dim: int   # h, equals the joint dimension j
    feature_dim: int  # f

    def __post_init__(self):
        for name in ("embed_dim", "hidden_dim", "feature_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.vocab_size < 0:
            raise ValueError("vocab_size must be >= 0")


def param_shapes(dims: ModelDims) -> dict[str, tuple[int, ...]]:
    d, e, h, f = dims.vocab_size, dims.embed_dim, dims.hidden_dim, dims.feature_dim
    shapes: dict[str, tuple[int, ...]] = {"embedding": (d + 1, e)}
    for g in GATES:
        shapes[f"lstm.w_{g}"] = (e, h)
        shapes[f"lstm.u_{g}"] = (h, h)
        shapes[f"lstm.b_{g}"] = (1, h)
    shapes.update({
        "image.w1": (f, h), "image.b1": (1, h),
        "image.w2": (h, h), "image.b2": (1, h),
    })
    return shapes


class ModelParams:
    """All trainable weights, keyed by name for the optimizer and checkpoints."""

    def __init__(self, dims: ModelDims, tensors: dict[str, np.ndarray]):
        expected = param_shapes(dims)
        if set(tensors) != set(expected):
            missing = set(expected) - set(tensors)
            extra = set(tensors) - set(expected)
            raise ValueError(f"bad parameter set: missing={missing}, extra={extra}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ValueError(
                    f"parameter {name!r} has shape {tensors[name].shape}, want {shape}"
                )
            if not np.isfinite(tensors[name]).all():
                raise ValueError(f"parameter {name!r} has non-finite values")
        self.dims = dims
        self.tensors = {n: np.asarray(tensors[n], dtype=np.float64) for n in expected}

    @classmethod
    def init(cls, dims: ModelDims, rng: np.random.Generator,
             embedding: np.ndarray | None = None, scale: float = 0.08) -> "ModelParams":
        """Uniform [-scale, scale] weights, forget bias 1, zero padding row.

        An embedding matrix (e.g. from word vectors) replaces the random one
        when given; its shape must match (d+1, e).
        """
        shapes = param_shapes(dims)
        tensors = {}
        for name, shape in shapes.items():
            tensors[name] = rng.uniform(-scale, scale, shape)
        if embedding is not None:
            emb = np.asarray(embedding, dtype=np.float64)
            if emb.shape != shapes["embedding"]:
                raise ValueError(
                    f"embedding shape {emb.shape}, want {shapes['embedding']}"
                )
            tensors["embedding"] = emb.copy()
        else:
            tensors["embedding"][0] = 0.0
        tensors["lstm.b_f"] = np.ones(shapes["lstm.b_f"])
        return cls(dims, tensors)

    @classmethod
    def zeros(cls, dims: ModelDims) -> "ModelParams":
        return cls(dims, {n: np.zeros(s) for n, s in param_shapes(dims).items()})

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> "ModelParams":
        return ModelParams(self.dims, tensors)

    def as_tracked(self, tape: Tape | None) -> dict[str, Tensor]:
        """Parameters as leaves of `tape`, or constants when tape is None."""
        if tape is None:
            return {n: Tensor.const(a) for n, a in self.tensors.items()}
        return {n: tape.leaf(a) for n, a in self.tensors.items()}


def _bias_rows(bias: Tensor, n: int) -> Tensor:
    """Broadcast a (1, h) bias to n rows via ones @ bias."""
    return ad.matmul(Tensor.const(np.ones((n, 1))), bias)


def lstm_step(x_t: Tensor, h_prev: Tensor, c_prev: Tensor,
              p: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """One LSTM step on a batch of rows: returns (h_t, c_t).

    i, f, o gates are sigmoids, the candidate g is a tanh;
    c_t = f*c_prev + i*g and h_t = o*tanh(c_t).
    """
    n = x_t.shape[0]
    pre = {}
    for gate in GATES:
        z = ad.add(ad.matmul(x_t, p[f"lstm.w_{gate}"]),
                   ad.matmul(h_prev, p[f"lstm.u_{gate}"]))
        pre[gate] = ad.add(z, _bias_rows(p[f"lstm.b_{gate}"], n))
    gate_i = ad.sigmoid(pre["i"])
    gate_f = ad.sigmoid(pre["f"])
    gate_o = ad.sigmoid(pre["o"])
    cand = ad.tanh(pre["g"])
    c_t = ad.add(ad.mul(gate_f, c_prev), ad.mul(gate_i, cand))
    h_t = ad.mul(gate_o, ad.tanh(c_t))
    return h_t, c_t


def encode_text_batch(token_ids: np.ndarray, p: dict[str, Tensor]) -> Tensor:
    """Encode (B, L) padded index rows to (B, j) non-negative embeddings.

    All L positions run through the LSTM; only the final hidden state is
    kept, projected by elementwise absolute value.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ad.ShapeError(f"encode_text: token ids must be (B, L), got {ids.shape}")
    n, seq_len = ids.shape
    emb = p["embedding"]
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= emb.shape[0]:
        raise ad.ShapeError(
            f"encode_text: token index out of range [0, {emb.shape[0]})"
        )
    h = Tensor.const(np.zeros((n, p["lstm.u_i"].shape[0])))
    c = h
    for t in range(seq_len):
        x_t = ad.gather_rows(emb, ids[:, t])
        h, c = lstm_step(x_t, h, c, p)
    return ad.absolute(h)


def encode_image_batch(feats: np.ndarray | Tensor, p: dict[str, Tensor],
                       activation: str = "relu_zero_floor") -> Tensor:
    """Encode (B, f) feature rows to (B, j) non-negative embeddings."""
    x = feats if isinstance(feats, Tensor) else Tensor.const(feats)
    if x.data.ndim != 2 or x.shape[1] != p["image.w1"].shape[0]:
        raise ad.ShapeError(
            f"encode_image: features {x.shape} do not match w1 {p['image.w1'].shape}"
        )
    n = x.shape[0]
    hidden = ad.add(ad.matmul(x, p["image.w1"]), _bias_rows(p["image.b1"], n))
    if activation == "relu_zero_floor":
        hidden = ad.relu(hidden)
    elif activation != "identity":
        raise ValueError(f"unknown image activation {activation!r}")
    out = ad.add(ad.matmul(hidden, p["image.w2"]), _bias_rows(p["image.b2"], n))
    return ad.absolute(out)


def encode_text(encoded, params: ModelParams) -> np.ndarray:
    """Inference helper: one encoded sequence (or its index array) -> (j,)."""
    ids = encoded.indices if hasattr(encoded, "indices") else np.asarray(encoded)
    out = encode_text_batch(ids.reshape(1, -1), params.as_tracked(None))
    return out.data[0]


def encode_image(feature: np.ndarray, params: ModelParams,
                 activation: str = "relu_zero_floor") -> np.ndarray:
    """Inference helper: one feature vector -> (j,)."""
    feat = np.asarray(feature, dtype=np.float64).reshape(1, -1)
    out = encode_image_batch(feat, params.as_tracked(None), activation)
    return out.data[0]
