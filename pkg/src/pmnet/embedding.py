"""Embedding network, auxiliary classifier head and phase-1 objectives."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .numcore import ParamTape, ShapeError, glorot_uniform, log_softmax, relu, softmax
from .optim import OptimizerState, PlateauDecay, TrainSchedule, nadam_step

log = logging.getLogger(__name__)

Activation = Literal["relu", "none"]


@dataclass
class Dense:
    weights: np.ndarray  # in_dim x out_dim
    bias: np.ndarray  # out_dim
    activation: Activation = "none"

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pre = x @ self.weights + self.bias
        return (relu(pre) if self.activation == "relu" else pre), pre


def _dense_stack_forward(layers: Sequence[Dense], x: np.ndarray):
    cache = []
    h = x
    for layer in layers:
        out, pre = layer.forward(h)
        cache.append((h, pre))
        h = out
    return h, cache


def _dense_stack_backward(layers: Sequence[Dense], cache, grad_out: np.ndarray, prefix: str):
    grads = {}
    g = grad_out
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        h_in, pre = cache[i]
        if layer.activation == "relu":
            g = g * (pre > 0)
        grads[f"{prefix}{i}.W"] = h_in.T @ g
        grads[f"{prefix}{i}.b"] = g.sum(axis=0)
        g = g @ layer.weights.T
    return grads, g


@dataclass
class EmbeddingNet:
    """Multilayer rectifier net mapping F-dimensional features to D-dimensional embeddings."""

    layers: list[Dense]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("EmbeddingNet needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        if self.layers[-1].activation != "none":
            raise ValueError("final embedding layer must be linear")

    @classmethod
    def create(
        cls,
        input_dim: int,
        output_dim: int = 64,
        hidden: Sequence[int] = (256, 256),
        rng: np.random.Generator | None = None,
    ) -> "EmbeddingNet":
        rng = rng if rng is not None else np.random.default_rng(0)
        dims = [input_dim, *hidden, output_dim]
        layers = []
        for i, (a, b) in enumerate(zip(dims, dims[1:])):
            act: Activation = "relu" if i < len(dims) - 2 else "none"
            layers.append(Dense(glorot_uniform(rng, a, b), np.zeros(b), act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"embedding input has shape {x.shape}, expected (*, {self.input_dim})")
        return _dense_stack_forward(self.layers, x)

    def backward(self, cache, grad_out: np.ndarray):
        """Return ``(param_grads, grad_input)`` for a batch gradient ``grad_out``."""
        return _dense_stack_backward(self.layers, cache, grad_out, "embed.")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def tape(self, tape: ParamTape | None = None) -> ParamTape:
        tape = tape if tape is not None else ParamTape()
        for i, layer in enumerate(self.layers):
            tape.add(f"embed.{i}.W", layer.weights)
            tape.add(f"embed.{i}.b", layer.bias)
        return tape

    def copy(self) -> "EmbeddingNet":
        return copy.deepcopy(self)


@dataclass
class ClassifierHead:
    """Auxiliary softmax classifier over embeddings, used only in phase 1.

    ``layers`` is a single affine map by default; extra rectifier layers can be
    requested with ``hidden``.
    """

    layers: list[Dense]

    @classmethod
    def create(
        cls,
        embed_dim: int,
        num_classes: int,
        hidden: Sequence[int] = (),
        rng: np.random.Generator | None = None,
    ) -> "ClassifierHead":
        rng = rng if rng is not None else np.random.default_rng(0)
        dims = [embed_dim, *hidden, num_classes]
        layers = []
        for i, (a, b) in enumerate(zip(dims, dims[1:])):
            act: Activation = "relu" if i < len(dims) - 2 else "none"
            layers.append(Dense(glorot_uniform(rng, a, b), np.zeros(b), act))
        return cls(layers)

    @property
    def weights(self) -> np.ndarray:
        return self.layers[-1].weights

    @property
    def bias(self) -> np.ndarray:
        return self.layers[-1].bias

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, e: np.ndarray):
        return _dense_stack_forward(self.layers, e)

    def backward(self, cache, grad_out):
        return _dense_stack_backward(self.layers, cache, grad_out, "head.")

    def tape(self, tape: ParamTape | None = None) -> ParamTape:
        tape = tape if tape is not None else ParamTape()
        for i, layer in enumerate(self.layers):
            tape.add(f"head.{i}.W", layer.weights)
            tape.add(f"head.{i}.b", layer.bias)
        return tape


@dataclass(frozen=True)
class SingleSceneSample:
    features: np.ndarray
    scene_index: int
    sample_id: str = ""


def embed(net: EmbeddingNet, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("embed expects a single feature vector")
    return net(x[None, :])[0]


def softmax_xent_batch(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over a batch and its gradient w.r.t. logits."""
    n = logits.shape[0]
    lsm = log_softmax(logits)
    loss = -lsm[np.arange(n), targets].mean()
    g = softmax(logits)
    g[np.arange(n), targets] -= 1.0
    return float(loss), g / n


def cross_entropy_loss(head: ClassifierHead, embedding, scene_index: int):
    """Softmax cross-entropy of the head's logits for one embedding.

    Returns ``(loss, head_grads, grad_embedding)``.
    """
    e = np.asarray(embedding, dtype=np.float64)[None, :]
    if not 0 <= scene_index < head.num_classes:
        raise ValueError(f"scene_index {scene_index} out of range")
    logits, cache = head.forward(e)
    loss, g = softmax_xent_batch(logits, np.array([scene_index]))
    grads, ge = head.backward(cache, g)
    return loss, grads, ge[0]


def triplet_loss(anchor, positive, negative, alpha: float = 0.5):
    """Squared-distance triplet hinge.

    Returns ``(loss, grad_anchor, grad_positive, grad_negative)``; gradients
    are exactly zero when the hinge is inactive.
    """
    a = np.asarray(anchor, dtype=np.float64)
    p = np.asarray(positive, dtype=np.float64)
    n = np.asarray(negative, dtype=np.float64)
    if not (a.shape == p.shape == n.shape):
        raise ShapeError("triplet vectors must share a shape")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    dp, dn = a - p, a - n
    margin = dp @ dp - dn @ dn + alpha
    if margin <= 0:
        z = np.zeros_like(a)
        return 0.0, z, z.copy(), z.copy()
    return float(margin), 2 * (n - p), -2 * dp, 2 * dn


def triplet_batch(emb: np.ndarray, labels: np.ndarray, rng: np.random.Generator, alpha: float):
    """Mean triplet loss over anchors of a batch with random in-batch pairing.

    Anchors whose class has no other member in the batch, or that have no
    negative in the batch, are skipped. Returns ``(loss, grad_emb)``.
    """
    b = emb.shape[0]
    grad = np.zeros_like(emb)
    total, used = 0.0, 0
    for i in range(b):
        same = np.flatnonzero((labels == labels[i]) & (np.arange(b) != i))
        diff = np.flatnonzero(labels != labels[i])
        if same.size == 0 or diff.size == 0:
            continue
        j = same[rng.integers(same.size)]
        k = diff[rng.integers(diff.size)]
        loss, ga, gp, gn = triplet_loss(emb[i], emb[j], emb[k], alpha)
        total += loss
        grad[i] += ga
        grad[j] += gp
        grad[k] += gn
        used += 1
    if used == 0:
        return 0.0, grad
    return total / used, grad / used


@dataclass
class EmbeddingTrainResult:
    net: EmbeddingNet
    head: ClassifierHead
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)


def _stratified_holdout(labels: np.ndarray, fraction: float, rng: np.random.Generator):
    val = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        n_val = int(round(fraction * idx.size))
        if idx.size - n_val < 1:
            n_val = idx.size - 1
        if n_val > 0:
            val.extend(rng.permutation(idx)[:n_val].tolist())
    val = np.array(sorted(val), dtype=int)
    train = np.setdiff1d(np.arange(labels.size), val)
    return train, val


def _phase1_loss(net, head, x, y, loss_kind, rng, alpha):
    emb, ecache = net.forward(x)
    if loss_kind == "cross_entropy":
        logits, hcache = head.forward(emb)
        loss, g = softmax_xent_batch(logits, y)
        hgrads, gemb = head.backward(hcache, g)
    else:
        loss, gemb = triplet_batch(emb, y, rng, alpha)
        hgrads = {}
    egrads, _ = net.backward(ecache, gemb)
    return loss, {**egrads, **hgrads}


def train_embedding(
    net: EmbeddingNet,
    head: ClassifierHead,
    samples: Sequence[SingleSceneSample],
    schedule: TrainSchedule,
    loss_kind: Literal["cross_entropy", "triplet"] = "cross_entropy",
    val_fraction: float = 0.1,
    alpha: float = 0.5,
) -> EmbeddingTrainResult:
    """Phase-1 training of the embedding (and, for cross-entropy, the head).

    The inputs are not modified; trained copies are returned. A stratified
    ``val_fraction`` of the samples is held out (chosen by ``schedule.seed``)
    and its loss drives the plateau decay. With ``val_fraction=0`` the
    training loss is used instead.
    """
    if len(samples) == 0:
        raise ValueError("train_embedding: empty dataset")
    if loss_kind not in ("cross_entropy", "triplet"):
        raise ValueError(f"unknown loss_kind {loss_kind!r}")
    net = net.copy()
    head = copy.deepcopy(head)
    rng = np.random.default_rng(schedule.seed)
    x = np.stack([s.features for s in samples]).astype(np.float64)
    y = np.array([s.scene_index for s in samples], dtype=int)
    if loss_kind == "triplet" and np.unique(y).size < 2:
        raise ValueError("triplet loss needs at least two classes")

    if val_fraction > 0:
        tr, va = _stratified_holdout(y, val_fraction, rng)
    else:
        tr, va = np.arange(y.size), np.array([], dtype=int)

    tape = net.tape()
    if loss_kind == "cross_entropy":
        head.tape(tape)
    state = OptimizerState()
    policy = PlateauDecay(schedule.learning_rate, schedule.plateau_patience, schedule.decay_factor)
    result = EmbeddingTrainResult(net, head)
    eval_rng = np.random.default_rng(schedule.seed + 1)

    for epoch in range(schedule.max_epochs):
        order = rng.permutation(tr)
        losses, weights = [], []
        for start in range(0, order.size, schedule.batch_size):
            idx = order[start : start + schedule.batch_size]
            loss, grads = _phase1_loss(net, head, x[idx], y[idx], loss_kind, rng, alpha)
            tape.set_grads(grads)
            nadam_step(tape, state, schedule, lr=policy.lr)
            losses.append(loss)
            weights.append(idx.size)
        train_loss = float(np.average(losses, weights=weights))
        if va.size:
            val_loss, _ = _phase1_loss(net, head, x[va], y[va], loss_kind, eval_rng, alpha)
        else:
            val_loss = train_loss
        result.train_loss.append(train_loss)
        result.val_loss.append(float(val_loss))
        result.lr.append(policy.lr)
        policy.update(val_loss)
        log.debug("phase1 epoch %d train %.5f val %.5f lr %.2e", epoch, train_loss, val_loss, policy.lr)
    return result


def classify(net: EmbeddingNet, head: ClassifierHead, x: np.ndarray) -> np.ndarray:
    logits, _ = head.forward(net(x))
    return logits.argmax(axis=1)
