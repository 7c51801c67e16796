"""Finite-difference verification of every hand-written backward pass.

Each check builds a small random model, computes analytic gradients with the
production backward code and compares them entry by entry against central
differences of the forward loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .embedding import ClassifierHead, EmbeddingNet, softmax_xent_batch, triplet_batch
from .numcore import ParamTape, finite_diff_grad, relative_error
from .prototype import PrototypeMemory
from .retrieval import RetrievalModule, bce_with_logits, retrieval_forward
from .trainer import pmnet_loss_and_grads

TOLERANCE = 1e-4
EPSILON = 1e-5
KINK_MARGIN = 1e-3


@dataclass
class GroupResult:
    check: str
    group: str
    max_rel_error: float
    worst_index: tuple
    passed: bool


@dataclass
class GradcheckReport:
    seed: int
    groups: list[GroupResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups)

    def failures(self) -> list[GroupResult]:
        return [g for g in self.groups if not g.passed]


def _compare(check, tape: ParamTape, analytic: dict, numeric: dict, tol: float) -> list[GroupResult]:
    out = []
    for name in tape.names():
        err = relative_error(analytic[name], numeric[name])
        worst = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else ()
        m = float(err.max()) if err.size else 0.0
        out.append(GroupResult(check, name, m, tuple(int(i) for i in worst), m <= tol))
    return out


def _inputs(net: EmbeddingNet, rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw inputs whose rectifier pre-activations all sit at least
    KINK_MARGIN from zero, so no finite-difference step crosses a kink."""
    for _ in range(1000):
        x = rng.normal(size=(n, net.input_dim))
        _, cache = net.forward(x)
        pre = [c[1] for layer, c in zip(net.layers, cache) if layer.activation == "relu"]
        if all(np.abs(p).min() > KINK_MARGIN for p in pre):
            return x
    raise RuntimeError("could not draw kink-free gradcheck inputs")


def _small_setup(rng: np.random.Generator, mode="standard", k=2):
    f, d, s = 6, 4, 3
    net = EmbeddingNet.create(f, d, (5,), rng)
    for layer in net.layers:
        layer.bias[...] = rng.normal(0, 0.1, layer.bias.shape)
    heads = 1 if mode == "relevance_as_prediction" else 2
    k = 1 if mode == "relevance_as_prediction" else k
    module = RetrievalModule.create(d, s, heads, 3, 3, mode, rng)
    for a in (module.bq, module.bk, module.bv):
        a[...] = rng.normal(0, 0.1, a.shape)
    if module.out_b is not None:
        module.out_b[...] = rng.normal(0, 0.1, module.out_b.shape)
    memory = PrototypeMemory(rng.normal(size=(s * k, d)), [f"s{i}" for i in range(s)], k)
    x = _inputs(net, rng, 4)
    y = (rng.random((4, s)) < 0.5).astype(float)
    return net, memory, module, x, y


def check_retrieval(seed: int, mode="standard", epsilon=EPSILON, tol=TOLERANCE) -> list[GroupResult]:
    """Embedding -> multi-head retrieval -> sigmoid FC -> BCE."""
    rng = np.random.default_rng(seed)
    net, memory, module, x, y = _small_setup(rng, mode)
    tape = module.tape()
    net.tape(tape)
    _, analytic = pmnet_loss_and_grads(net, memory, module, x, y)

    def loss():
        _, _, cache = retrieval_forward(net(x), memory, module)
        return bce_with_logits(cache["logits"], y)[0]

    numeric = finite_diff_grad(loss, tape, epsilon)
    name = "retrieval" if mode == "standard" else "relevance_as_prediction"
    return _compare(name, tape, analytic, numeric, tol)


def check_cross_entropy(seed: int, epsilon=EPSILON, tol=TOLERANCE) -> list[GroupResult]:
    """Embedding -> classifier head -> softmax cross-entropy."""
    rng = np.random.default_rng(seed)
    net = EmbeddingNet.create(6, 4, (5,), rng)
    head = ClassifierHead.create(4, 3, (), rng)
    x = _inputs(net, rng, 5)
    y = rng.integers(0, 3, size=5)
    tape = net.tape()
    head.tape(tape)

    def forward():
        emb, ecache = net.forward(x)
        logits, hcache = head.forward(emb)
        return emb, ecache, logits, hcache

    emb, ecache, logits, hcache = forward()
    _, g = softmax_xent_batch(logits, y)
    hgrads, gemb = head.backward(hcache, g)
    egrads, _ = net.backward(ecache, gemb)
    numeric = finite_diff_grad(lambda: softmax_xent_batch(forward()[2], y)[0], tape, epsilon)
    return _compare("cross_entropy", tape, {**egrads, **hgrads}, numeric, tol)


def check_triplet(seed: int, epsilon=EPSILON, tol=TOLERANCE) -> list[GroupResult]:
    """Embedding -> in-batch triplet hinge, with the pairing held fixed."""
    rng = np.random.default_rng(seed)
    net = EmbeddingNet.create(6, 4, (5,), rng)
    x = _inputs(net, rng, 6)
    y = np.array([0, 0, 1, 1, 2, 2])
    pair_seed = int(rng.integers(2**31))
    # large margin keeps every sampled hinge active, away from its kink
    alpha = 50.0
    # distances ignore a shift of every embedding, so the output bias has a
    # gradient of exactly zero and is left out of the comparison
    full = net.tape()
    tape = ParamTape([e for e in full if e.name != f"embed.{len(net.layers) - 1}.b"])
    emb, cache = net.forward(x)
    _, gemb = triplet_batch(emb, y, np.random.default_rng(pair_seed), alpha)
    analytic, _ = net.backward(cache, gemb)

    def loss():
        return triplet_batch(net(x), y, np.random.default_rng(pair_seed), alpha)[0]

    return _compare("triplet", tape, analytic, finite_diff_grad(loss, tape, epsilon), tol)


CHECKS: dict[str, Callable[[int], list[GroupResult]]] = {
    "retrieval": check_retrieval,
    "relevance_as_prediction": lambda seed: check_retrieval(seed, mode="relevance_as_prediction"),
    "cross_entropy": check_cross_entropy,
    "triplet": check_triplet,
}


def run_gradcheck(seed: int = 0, checks=None) -> GradcheckReport:
    report = GradcheckReport(seed)
    for name in checks or CHECKS:
        report.groups.extend(CHECKS[name](seed))
    return report

