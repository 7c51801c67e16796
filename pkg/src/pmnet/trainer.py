"""Phase-2 retrieval training, the two-phase pipeline and a scratch baseline."""

from __future__ import annotations

import copy
import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Literal, Sequence

import numpy as np

from .embedding import (
    ClassifierHead,
    Dense,
    EmbeddingNet,
    EmbeddingTrainResult,
    SingleSceneSample,
    train_embedding,
)
from .metrics import MetricsReport, evaluate
from .numcore import ParamTape, glorot_uniform, sigmoid
from .optim import OptimizerState, PlateauDecay, TrainSchedule, nadam_step
from .prototype import LabelMergeMap, PrototypeMemory, build_memory
from .retrieval import (
    Mode,
    MultiSceneSample,
    RetrievalModule,
    bce_with_logits,
    retrieval_backward,
    retrieval_forward,
)

log = logging.getLogger(__name__)


@dataclass
class PMNet:
    """A trained prototype-based memory network ready for inference."""

    net: EmbeddingNet
    memory: PrototypeMemory
    module: RetrievalModule
    head: ClassifierHead | None = None

    @property
    def scene_names(self) -> list[str]:
        return self.memory.scene_names

    def predict_proba(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return retrieval_forward(self.net(x), self.memory, self.module)[0]

    def z_concat(self, x) -> np.ndarray:
        return retrieval_forward(self.net(np.asarray(x, dtype=np.float64)), self.memory, self.module)[1]


@dataclass
class FeedforwardBaseline:
    """Embedding net plus a sigmoid output layer, trained on multi-scene data only."""

    net: EmbeddingNet
    out: Dense
    scene_names: list[str] = field(default_factory=list)

    @classmethod
    def create(cls, input_dim, num_scenes, embed_dim=64, hidden=(256, 256), rng=None, scene_names=()):
        rng = rng if rng is not None else np.random.default_rng(0)
        net = EmbeddingNet.create(input_dim, embed_dim, hidden, rng)
        out = Dense(glorot_uniform(rng, embed_dim, num_scenes), np.zeros(num_scenes))
        return cls(net, out, list(scene_names))

    def predict_proba(self, x) -> np.ndarray:
        return sigmoid(self.net(np.asarray(x, dtype=np.float64)) @ self.out.weights + self.out.bias)


@dataclass
class LossRecord:
    epoch: int
    phase: str
    lr: float
    train_loss: float
    val_loss: float


def loss_history_csv(records: Sequence[LossRecord]) -> str:
    lines = ["epoch,phase,lr,train_loss,val_loss"]
    for r in records:
        lines.append(f"{r.epoch},{r.phase},{r.lr:.6e},{r.train_loss:.10f},{r.val_loss:.10f}")
    return "\n".join(lines) + "\n"


def _stack_multi(samples: Sequence[MultiSceneSample]):
    x = np.stack([s.features for s in samples]).astype(np.float64)
    y = np.stack([s.labels for s in samples]).astype(np.float64)
    return x, y


def pmnet_loss_and_grads(net, memory, module, x, y, freeze_embedding=False):
    emb, ecache = net.forward(x)
    _, _, cache = retrieval_forward(emb, memory, module)
    loss, g = bce_with_logits(cache["logits"], y)
    grads, gemb = retrieval_backward(cache, g, memory, module)
    if not freeze_embedding:
        egrads, _ = net.backward(ecache, gemb)
        grads.update(egrads)
    return loss, grads


@dataclass
class RetrievalTrainResult:
    model: PMNet
    history: list[LossRecord] = field(default_factory=list)

    @property
    def train_loss(self) -> list[float]:
        return [r.train_loss for r in self.history]


def _fit(tape: ParamTape, loss_and_grads, x, y, schedule: TrainSchedule, phase: str, val=None):
    """Minibatch Nadam loop shared by phase 2 and the baseline.

    Plateau decay follows ``val`` loss when given, else the training loss.
    """
    rng = np.random.default_rng(schedule.seed)
    state = OptimizerState()
    policy = PlateauDecay(schedule.learning_rate, schedule.plateau_patience, schedule.decay_factor)
    history = []
    n = x.shape[0]
    for epoch in range(schedule.max_epochs):
        order = rng.permutation(n)
        losses, weights = [], []
        for start in range(0, n, schedule.batch_size):
            idx = order[start : start + schedule.batch_size]
            loss, grads = loss_and_grads(x[idx], y[idx])
            tape.set_grads(grads)
            nadam_step(tape, state, schedule, lr=policy.lr)
            losses.append(loss)
            weights.append(idx.size)
        train_loss = float(np.average(losses, weights=weights))
        val_loss = float(loss_and_grads(*val)[0]) if val is not None else train_loss
        history.append(LossRecord(epoch, phase, policy.lr, train_loss, val_loss))
        policy.update(val_loss)
    return history


def train_retrieval(
    net: EmbeddingNet,
    memory: PrototypeMemory,
    module: RetrievalModule,
    samples: Sequence[MultiSceneSample],
    schedule: TrainSchedule,
    freeze_embedding: bool = False,
    val_samples: Sequence[MultiSceneSample] | None = None,
) -> RetrievalTrainResult:
    """Phase 2: fit the retrieval module (and optionally the embedding) with BCE.

    Works on copies; the memory is shared read-only and never updated.
    """
    if len(samples) == 0:
        raise ValueError("train_retrieval: empty dataset")
    net, module = net.copy(), module.copy()
    x, y = _stack_multi(samples)
    if y.shape[1] != memory.num_scenes:
        raise ValueError(f"labels have width {y.shape[1]}, memory has {memory.num_scenes} scenes")
    tape = module.tape()
    if not freeze_embedding:
        net.tape(tape)

    def loss_and_grads(xb, yb):
        return pmnet_loss_and_grads(net, memory, module, xb, yb, freeze_embedding)

    val = _stack_multi(val_samples) if val_samples else None
    history = _fit(tape, loss_and_grads, x, y, schedule, "retrieval", val)
    return RetrievalTrainResult(PMNet(net, memory, module), history)


def train_baseline(
    baseline: FeedforwardBaseline, samples: Sequence[MultiSceneSample], schedule: TrainSchedule
) -> tuple[FeedforwardBaseline, list[LossRecord]]:
    baseline = copy.deepcopy(baseline)
    x, y = _stack_multi(samples)
    tape = baseline.net.tape()
    tape.add("out.W", baseline.out.weights)
    tape.add("out.b", baseline.out.bias)

    def loss_and_grads(xb, yb):
        emb, cache = baseline.net.forward(xb)
        loss, g = bce_with_logits(emb @ baseline.out.weights + baseline.out.bias, yb)
        grads, _ = baseline.net.backward(cache, g @ baseline.out.weights.T)
        grads["out.W"] = emb.T @ g
        grads["out.b"] = g.sum(axis=0)
        return loss, grads

    return baseline, _fit(tape, loss_and_grads, x, y, schedule, "baseline")


@dataclass
class PipelineConfig:
    embed_dim: int = 64
    hidden: tuple[int, ...] = (256, 256)
    head_hidden: tuple[int, ...] = ()
    num_heads: int = 20
    key_dim: int = 256
    value_dim: int = 256
    prototypes_per_scene: int = 1
    cluster_method: str = "mean"
    mode: Mode = "standard"
    loss_kind: Literal["cross_entropy", "triplet"] = "cross_entropy"
    triplet_alpha: float = 0.5
    val_fraction: float = 0.1
    phase1: TrainSchedule = field(default_factory=lambda: TrainSchedule(learning_rate=2e-4))
    phase2: TrainSchedule = field(default_factory=lambda: TrainSchedule(learning_rate=5e-4))
    freeze_embedding: bool = False
    threshold: float = 0.5
    merge: str = ""
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in ("standard", "relevance_as_prediction"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.cluster_method not in ("mean", "kmeans", "agglomerative"):
            raise ValueError(f"unknown cluster method {self.cluster_method!r}")
        if self.loss_kind not in ("cross_entropy", "triplet"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.mode == "relevance_as_prediction":
            if self.num_heads != 1:
                raise ValueError("mode relevance_as_prediction requires heads=1")
            if self.prototypes_per_scene != 1:
                raise ValueError("mode relevance_as_prediction requires k=1")
        if self.cluster_method == "mean" and self.prototypes_per_scene != 1:
            raise ValueError("cluster method 'mean' requires k=1")
        for name in ("embed_dim", "num_heads", "key_dim", "value_dim", "prototypes_per_scene"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")

    def seeds(self) -> dict[str, int]:
        """Independent sub-seeds for each random consumer of a run."""
        names = ("phase1_init", "phase1_train", "cluster", "phase2_init", "phase2_train", "baseline")
        kids = np.random.SeedSequence(self.seed).spawn(len(names))
        return {n: int(k.generate_state(1)[0]) for n, k in zip(names, kids)}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["head_hidden"] = list(self.head_hidden)
        return d


@dataclass
class Phase1Result:
    net: EmbeddingNet
    head: ClassifierHead
    history: list[LossRecord]
    class_names: list[str]


@dataclass
class TwoPhaseResult:
    model: PMNet
    phase1: Phase1Result
    history: list[LossRecord]
    metrics: MetricsReport | None
    config: PipelineConfig
    timings: dict[str, float] = field(default_factory=dict)


def run_phase1(config: PipelineConfig, single: Sequence[SingleSceneSample], class_names: Sequence[str]) -> Phase1Result:
    seeds = config.seeds()
    rng = np.random.default_rng(seeds["phase1_init"])
    f = int(np.asarray(single[0].features).shape[0])
    net = EmbeddingNet.create(f, config.embed_dim, config.hidden, rng)
    head = ClassifierHead.create(config.embed_dim, len(class_names), config.head_hidden, rng)
    res: EmbeddingTrainResult = train_embedding(
        net, head, single, config.phase1.with_(seed=seeds["phase1_train"]),
        config.loss_kind, config.val_fraction, config.triplet_alpha,
    )
    history = [LossRecord(i, "prototype", lr, tl, vl)
               for i, (lr, tl, vl) in enumerate(zip(res.lr, res.train_loss, res.val_loss))]
    return Phase1Result(res.net, res.head, history, list(class_names))


def run_phase2(
    config: PipelineConfig,
    phase1: Phase1Result,
    single: Sequence[SingleSceneSample],
    multi_train: Sequence[MultiSceneSample],
) -> tuple[PMNet, list[LossRecord]]:
    seeds = config.seeds()
    merge = LabelMergeMap.parse(config.merge, phase1.class_names) if config.merge else None
    memory = build_memory(phase1.net, single, phase1.class_names, merge,
                          config.prototypes_per_scene, config.cluster_method, seeds["cluster"])
    rng = np.random.default_rng(seeds["phase2_init"])
    module = RetrievalModule.create(config.embed_dim, memory.num_scenes, config.num_heads,
                                    config.key_dim, config.value_dim, config.mode, rng)
    res = train_retrieval(phase1.net, memory, module, multi_train,
                          config.phase2.with_(seed=seeds["phase2_train"]), config.freeze_embedding)
    res.model.head = phase1.head
    return res.model, res.history


def run_two_phase(
    config: PipelineConfig,
    single: Sequence[SingleSceneSample],
    class_names: Sequence[str],
    multi_train: Sequence[MultiSceneSample],
    multi_test: Sequence[MultiSceneSample] | None = None,
    phase1: Phase1Result | None = None,
) -> TwoPhaseResult:
    """Phase 1 on single-scene data, memory construction, phase 2 on
    multi-scene data, then evaluation on ``multi_test`` if given.

    A precomputed ``phase1`` may be passed to share it between runs that
    differ only in phase-2 settings.
    """
    config.validate()
    if not single or not multi_train:
        raise ValueError("both single-scene and multi-scene training data are required")
    timings = {}
    t0 = time.perf_counter()
    if phase1 is None:
        phase1 = run_phase1(config, single, class_names)
    t1 = time.perf_counter()
    model, hist2 = run_phase2(config, phase1, single, multi_train)
    t2 = time.perf_counter()
    timings.update(phase1=t1 - t0, phase2=t2 - t1)
    metrics = evaluate(model, multi_test, config.threshold) if multi_test else None
    timings["evaluate"] = time.perf_counter() - t2
    log.info("two-phase run seed=%d done in %.1fs", config.seed, sum(timings.values()))
    return TwoPhaseResult(model, phase1, phase1.history + hist2, metrics, config, timings)


def run_baseline(
    config: PipelineConfig,
    multi_train: Sequence[MultiSceneSample],
    multi_test: Sequence[MultiSceneSample],
    scene_names: Sequence[str] = (),
) -> tuple[FeedforwardBaseline, MetricsReport]:
    """Same embedding architecture plus a sigmoid layer, trained from scratch
    on the multi-scene samples with the phase-2 schedule."""
    seeds = config.seeds()
    f = int(np.asarray(multi_train[0].features).shape[0])
    s = int(np.asarray(multi_train[0].labels).shape[0])
    rng = np.random.default_rng(seeds["baseline"])
    base = FeedforwardBaseline.create(f, s, config.embed_dim, config.hidden, rng, scene_names)
    base, _ = train_baseline(base, multi_train, config.phase2.with_(seed=seeds["phase2_train"]))
    return base, evaluate(base, multi_test, config.threshold)


def param_digest(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()


def embedding_digest(net: EmbeddingNet) -> str:
    return param_digest(*[a for layer in net.layers for a in (layer.weights, layer.bias)])
