"""Multi-head attention retrieval over the prototype memory and the sigmoid
prediction head.

Per head ``h`` and query embedding ``e``::

    relevance_h = softmax((e Wq_h + bq_h) (M Wk_h + bk_h)^T / sqrt(L))
    z_h         = relevance_h (M Wv_h + bv_h)
    probs       = sigmoid([z_1, ..., z_H] W_out + b_out)

In ``relevance_as_prediction`` mode there is a single head and the
pre-softmax scores go straight through a sigmoid, one output per memory row.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .embedding import EmbeddingNet
from .numcore import ParamTape, ShapeError, glorot_uniform, sigmoid, softmax
from .prototype import PrototypeMemory

Mode = Literal["standard", "relevance_as_prediction"]
BCE_CLAMP = 1e-12


class ModeError(RuntimeError):
    """Operation not available in the module's current mode."""


@dataclass
class RetrievalHead:
    wq: np.ndarray  # D x L
    bq: np.ndarray
    wk: np.ndarray  # D x L
    bk: np.ndarray
    wv: np.ndarray  # D x U
    bv: np.ndarray

    @property
    def key_dim(self) -> int:
        return self.wq.shape[1]


@dataclass
class RetrievalModule:
    """H retrieval heads stored as stacked arrays of shape (H, ...).

    ``heads`` returns per-head views into the stacks, so edits through a
    :class:`RetrievalHead` write into the module.
    """

    wq: np.ndarray  # H x D x L
    bq: np.ndarray  # H x L
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray  # H x D x U
    bv: np.ndarray  # H x U
    out_w: np.ndarray | None  # (H*U) x S
    out_b: np.ndarray | None  # S
    mode: Mode = "standard"

    def __post_init__(self):
        h, d, l = self.wq.shape
        if h < 1 or l < 1 or self.wv.shape[2] < 1:
            raise ValueError("need H >= 1, L >= 1, U >= 1")
        if self.wk.shape != (h, d, l) or self.bq.shape != (h, l) or self.bk.shape != (h, l):
            raise ShapeError("query/key projection shapes disagree")
        if self.wv.shape[:2] != (h, d) or self.bv.shape != (h, self.wv.shape[2]):
            raise ShapeError("value projection shapes disagree")
        if self.mode == "relevance_as_prediction":
            if h != 1:
                raise ValueError("relevance_as_prediction mode requires exactly one head")
            if self.out_w is not None or self.out_b is not None:
                raise ValueError("relevance_as_prediction mode has no output layer")
        elif self.mode == "standard":
            if self.out_w is None or self.out_b is None:
                raise ValueError("standard mode needs an output layer")
            if self.out_w.shape[0] != h * self.wv.shape[2] or self.out_b.shape != (self.out_w.shape[1],):
                raise ShapeError("output layer shape disagrees with H*U")
        else:
            raise ValueError(f"unknown mode {self.mode!r}")

    @classmethod
    def create(
        cls,
        embed_dim: int,
        num_scenes: int,
        num_heads: int = 20,
        key_dim: int = 256,
        value_dim: int = 256,
        mode: Mode = "standard",
        rng: np.random.Generator | None = None,
    ) -> "RetrievalModule":
        """Glorot-uniform weights, zero biases."""
        rng = rng if rng is not None else np.random.default_rng(0)
        h, d, l, u = num_heads, embed_dim, key_dim, value_dim
        wq = np.stack([glorot_uniform(rng, d, l) for _ in range(h)])
        wk = np.stack([glorot_uniform(rng, d, l) for _ in range(h)])
        wv = np.stack([glorot_uniform(rng, d, u) for _ in range(h)])
        out_w = out_b = None
        if mode == "standard":
            out_w = glorot_uniform(rng, h * u, num_scenes)
            out_b = np.zeros(num_scenes)
        return cls(wq, np.zeros((h, l)), wk, np.zeros((h, l)), wv, np.zeros((h, u)), out_w, out_b, mode)

    @classmethod
    def from_heads(cls, heads: list[RetrievalHead], out_w=None, out_b=None, mode: Mode = "standard"):
        stack = lambda attr: np.stack([getattr(hd, attr) for hd in heads]).astype(np.float64)
        return cls(stack("wq"), stack("bq"), stack("wk"), stack("bk"), stack("wv"), stack("bv"),
                   None if out_w is None else np.asarray(out_w, dtype=np.float64),
                   None if out_b is None else np.asarray(out_b, dtype=np.float64), mode)

    @property
    def num_heads(self) -> int:
        return self.wq.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.wq.shape[1]

    @property
    def key_dim(self) -> int:
        return self.wq.shape[2]

    @property
    def value_dim(self) -> int:
        return self.wv.shape[2]

    @property
    def heads(self) -> list[RetrievalHead]:
        return [RetrievalHead(self.wq[h], self.bq[h], self.wk[h], self.bk[h], self.wv[h], self.bv[h])
                for h in range(self.num_heads)]

    def tape(self, tape: ParamTape | None = None) -> ParamTape:
        """Register trainable arrays.

        In standard mode the key bias is left out: it shifts every score of
        a query by the same amount, which the softmax cancels, so its
        gradient is identically zero.
        """
        tape = tape if tape is not None else ParamTape()
        tape.add("retr.wq", self.wq)
        tape.add("retr.bq", self.bq)
        tape.add("retr.wk", self.wk)
        if self.mode == "relevance_as_prediction":
            tape.add("retr.bk", self.bk)
        else:
            tape.add("retr.wv", self.wv)
            tape.add("retr.bv", self.bv)
            tape.add("out.W", self.out_w)
            tape.add("out.b", self.out_b)
        return tape

    def copy(self) -> "RetrievalModule":
        return copy.deepcopy(self)


@dataclass(frozen=True)
class MultiSceneSample:
    features: np.ndarray
    labels: np.ndarray  # multi-hot, length S
    sample_id: str = ""


def _check_query(q: np.ndarray, memory: PrototypeMemory, d: int) -> None:
    if q.shape[-1] != d or memory.dim != d:
        raise ShapeError(f"query dim {q.shape[-1]}, memory dim {memory.dim}, head expects {d}")


def relevance(query_embedding, memory: PrototypeMemory, head: RetrievalHead) -> np.ndarray:
    q = np.asarray(query_embedding, dtype=np.float64)
    _check_query(q, memory, head.wq.shape[0])
    return softmax(_scores(q, memory.matrix, head)[None, :])[0]


def _scores(q, m, head: RetrievalHead) -> np.ndarray:
    query = q @ head.wq + head.bq
    keys = m @ head.wk + head.bk
    return keys @ query / np.sqrt(head.key_dim)


def retrieve(query_embedding, memory: PrototypeMemory, head: RetrievalHead) -> np.ndarray:
    r = relevance(query_embedding, memory, head)
    values = memory.matrix @ head.wv + head.bv
    return r @ values


def multi_head_retrieve(query_embedding, memory: PrototypeMemory, module: RetrievalModule) -> np.ndarray:
    if module.mode != "standard":
        raise ModeError("multi_head_retrieve needs a standard-mode module")
    q = np.asarray(query_embedding, dtype=np.float64)
    return retrieval_forward(q[None, :], memory, module)[1][0]


def retrieval_forward(emb: np.ndarray, memory: PrototypeMemory, module: RetrievalModule):
    """Batched forward pass from embeddings (B x D) to probabilities (B x S).

    Returns ``(probs, z_concat, cache)``; ``z_concat`` is None in
    relevance-as-prediction mode.
    """
    m = memory.matrix
    _check_query(emb, memory, module.embed_dim)
    scale = 1.0 / np.sqrt(module.key_dim)
    q = emb @ module.wq + module.bq[:, None, :]  # H x B x L
    k = m @ module.wk + module.bk[:, None, :]  # H x R x L
    scores = (q @ k.transpose(0, 2, 1)) * scale  # H x B x R
    cache = {"emb": emb, "q": q, "k": k, "scale": scale}
    if module.mode == "relevance_as_prediction":
        if memory.num_rows != memory.num_scenes:
            raise ModeError("relevance_as_prediction needs one prototype per scene")
        cache["logits"] = scores[0]
        return sigmoid(scores[0]), None, cache
    rel = softmax(scores)
    v = m @ module.wv + module.bv[:, None, :]  # H x R x U
    z = rel @ v  # H x B x U
    b = emb.shape[0]
    zc = z.transpose(1, 0, 2).reshape(b, -1)
    logits = zc @ module.out_w + module.out_b
    cache.update(rel=rel, v=v, zc=zc, logits=logits)
    return sigmoid(logits), zc, cache


def retrieval_backward(cache, grad_logits: np.ndarray, memory: PrototypeMemory, module: RetrievalModule):
    """Gradients of a loss w.r.t. module parameters and the embeddings.

    ``grad_logits`` is dLoss/d(pre-sigmoid outputs), shape B x S.
    Returns ``(param_grads, grad_emb)``; the memory gets no gradient.
    """
    m = memory.matrix
    emb, q, k, scale = cache["emb"], cache["q"], cache["k"], cache["scale"]
    grads = {}
    if module.mode == "relevance_as_prediction":
        d_scores = grad_logits[None, :, :]
    else:
        rel, v, zc = cache["rel"], cache["v"], cache["zc"]
        h, u = module.num_heads, module.value_dim
        grads["out.W"] = zc.T @ grad_logits
        grads["out.b"] = grad_logits.sum(axis=0)
        dz = (grad_logits @ module.out_w.T).reshape(-1, h, u).transpose(1, 0, 2)
        d_rel = dz @ v.transpose(0, 2, 1)
        dv = rel.transpose(0, 2, 1) @ dz
        grads["retr.wv"] = m.T @ dv
        grads["retr.bv"] = dv.sum(axis=1)
        d_scores = rel * (d_rel - (d_rel * rel).sum(axis=2, keepdims=True))
    d_scores = d_scores * scale
    dq = d_scores @ k
    dk = d_scores.transpose(0, 2, 1) @ q
    grads["retr.wq"] = emb.T @ dq
    grads["retr.bq"] = dq.sum(axis=1)
    grads["retr.wk"] = m.T @ dk
    if module.mode == "relevance_as_prediction":
        grads["retr.bk"] = dk.sum(axis=1)
    grad_emb = (dq @ module.wq.transpose(0, 2, 1)).sum(axis=0)
    return grads, grad_emb


def predict_batch(x: np.ndarray, net: EmbeddingNet, memory: PrototypeMemory, module: RetrievalModule) -> np.ndarray:
    return retrieval_forward(net(np.asarray(x, dtype=np.float64)), memory, module)[0]


def predict(features, net: EmbeddingNet, memory: PrototypeMemory, module: RetrievalModule) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("predict expects one feature vector; use predict_batch for batches")
    return predict_batch(x[None, :], net, memory, module)[0]


def bce_loss(probs, labels):
    """Mean binary cross-entropy over scenes.

    Probabilities are clamped to ``[1e-12, 1 - 1e-12]`` before the logs.
    Returns ``(loss, grad_probs)``; the gradient is taken at the clamped
    probabilities.
    """
    p = np.clip(np.asarray(probs, dtype=np.float64), BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"probs {p.shape} vs labels {y.shape}")
    n = p.shape[-1]
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p)).mean(axis=-1)
    grad = (-(y / p) + (1.0 - y) / (1.0 - p)) / n
    return loss, grad


def bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch-mean of the per-sample scene-mean BCE, and its gradient w.r.t. logits.

    Used in training; it is the composition of :func:`sigmoid` and
    :func:`bce_loss` written in a numerically stable form.
    """
    b, s = logits.shape
    loss = np.maximum(logits, 0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))
    return float(loss.mean()), (sigmoid(logits) - labels) / (b * s)
