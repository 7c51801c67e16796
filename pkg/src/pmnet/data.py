"""Feature-table files, the synthetic multi-scene generator, stratified
splitting and binary checkpoints.

Feature tables are UTF-8 CSV with header ``id,f0,...,f{F-1},labels``. The
``labels`` column holds one class name for single-scene tables and a
``;``-joined list of scene names for multi-scene tables.
"""

from __future__ import annotations

import csv
import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .embedding import ClassifierHead, Dense, EmbeddingNet, SingleSceneSample
from .prototype import PrototypeMemory
from .retrieval import MultiSceneSample, RetrievalModule
from .trainer import PMNet


class ParseError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


class ConfigError(ValueError):
    """Generator settings that cannot be satisfied."""


class CheckpointError(ValueError):
    """Checkpoint file is unreadable, truncated or inconsistent."""


# -- feature tables -----------------------------------------------------------


@dataclass
class FeatureTable:
    ids: list[str]
    features: np.ndarray  # N x F
    labels: list[list[str]]
    multi_label: bool = False

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64).reshape(len(self.ids), -1)
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("sample ids must be unique")
        if len(self.labels) != len(self.ids):
            raise ValueError("one label field per row required")

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def columns(self) -> list[str]:
        return ["id", *(f"f{i}" for i in range(self.feature_dim)), "labels"]

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other) -> bool:
        return (isinstance(other, FeatureTable) and self.ids == other.ids
                and self.labels == other.labels and self.multi_label == other.multi_label
                and np.array_equal(self.features, other.features))

    def to_single(self, class_names: Sequence[str]) -> list[SingleSceneSample]:
        index = {n: i for i, n in enumerate(class_names)}
        return [SingleSceneSample(self.features[i], index[lab[0]], self.ids[i]) for i, lab in enumerate(self.labels)]

    def to_multi(self, scene_names: Sequence[str]) -> list[MultiSceneSample]:
        index = {n: i for i, n in enumerate(scene_names)}
        out = []
        for i, labs in enumerate(self.labels):
            y = np.zeros(len(scene_names))
            y[[index[n] for n in labs]] = 1.0
            out.append(MultiSceneSample(self.features[i], y, self.ids[i]))
        return out

    @classmethod
    def from_single(cls, samples: Sequence[SingleSceneSample], class_names: Sequence[str]) -> "FeatureTable":
        ids = [s.sample_id or f"s{i}" for i, s in enumerate(samples)]
        return cls(ids, np.stack([s.features for s in samples]), [[class_names[s.scene_index]] for s in samples])

    @classmethod
    def from_multi(cls, samples: Sequence[MultiSceneSample], scene_names: Sequence[str]) -> "FeatureTable":
        ids = [s.sample_id or f"m{i}" for i, s in enumerate(samples)]
        labels = [[scene_names[j] for j in np.flatnonzero(s.labels)] for s in samples]
        return cls(ids, np.stack([s.features for s in samples]), labels, multi_label=True)


def table_text(table: FeatureTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table.columns)
    for sid, row, labs in zip(table.ids, table.features, table.labels):
        # repr gives the shortest string that round-trips a float64
        w.writerow([sid, *(repr(float(v)) for v in row), ";".join(labs)])
    return buf.getvalue()


def save_feature_table(table: FeatureTable, path) -> None:
    Path(path).write_text(table_text(table), encoding="utf-8", newline="")


def load_feature_table(path, known_labels: Sequence[str] | None = None, multi_label: bool | None = None) -> FeatureTable:
    """Parse and validate a feature table.

    ``multi_label=None`` infers the kind: any ``;`` or empty label field makes
    it multi-label. ``known_labels`` rejects unknown class names.
    """
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(path, 1, "empty file")
    header = rows[0]
    if len(header) < 3 or header[0] != "id" or header[-1] != "labels":
        raise ParseError(path, 1, "header must be id,f0..f{F-1},labels")
    f = len(header) - 2
    if header[1:-1] != [f"f{i}" for i in range(f)]:
        raise ParseError(path, 1, "feature columns must be named f0..f{F-1} in order")
    known = set(known_labels) if known_labels is not None else None
    ids, feats, labels = [], [], []
    seen = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != f + 2:
            raise ParseError(path, lineno, f"expected {f + 2} fields, got {len(row)}")
        sid = row[0]
        if sid in seen:
            raise ParseError(path, lineno, f"duplicate id {sid!r}")
        seen.add(sid)
        try:
            vec = [float(v) for v in row[1:-1]]
        except ValueError as exc:
            raise ParseError(path, lineno, f"non-numeric feature ({exc})") from None
        if not all(np.isfinite(vec)):
            raise ParseError(path, lineno, "non-finite feature value")
        labs = [s.strip() for s in row[-1].split(";") if s.strip()]
        if known is not None:
            for lab in labs:
                if lab not in known:
                    raise ParseError(path, lineno, f"unknown class name {lab!r}")
        ids.append(sid)
        feats.append(vec)
        labels.append(labs)
    if multi_label is None:
        multi_label = any(len(l) != 1 for l in labels)
    if not multi_label:
        for i, labs in enumerate(labels):
            if len(labs) != 1:
                raise ParseError(path, i + 2, "single-scene row needs exactly one class name")
    return FeatureTable(ids, np.array(feats, dtype=np.float64).reshape(len(ids), f), labels, multi_label)


# -- synthetic generator ------------------------------------------------------


@dataclass
class SynthConfig:
    """Settings of the synthetic stand-in for single/multi-scene image features.

    Scene ``s`` has a center ``c_s ~ N(0, center_scale^2 I)``. Single-scene
    samples are ``c_s + noise``; a multi-scene sample combines the centers
    of its scene set (sum or mean) and adds noise. ``multi_shift`` adds one
    fixed random offset to every multi-scene sample to mimic a domain gap
    between the two sources.
    """

    num_scenes: int = 16
    feature_dim: int = 32
    samples_per_scene: int = 100
    num_multiscene: int = 90
    num_multiscene_test: int = 1500
    scenes_per_image: tuple[int, int] = (1, 4)
    noise_sigma: float = 1.0
    center_scale: float = 1.0
    multi_shift: float = 0.0
    combine: Literal["sum", "average"] = "sum"
    seed: int = 0
    max_tries: int = 1000

    def __post_init__(self):
        a, b = self.scenes_per_image
        if not 1 <= a <= b <= self.num_scenes:
            raise ConfigError(f"scenes_per_image {self.scenes_per_image} must satisfy 1 <= a <= b <= S")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.combine not in ("sum", "average"):
            raise ConfigError(f"unknown combine mode {self.combine!r}")
        if self.num_scenes < 1 or self.feature_dim < 1 or self.samples_per_scene < 1:
            raise ConfigError("num_scenes, feature_dim and samples_per_scene must be positive")

    @property
    def scene_names(self) -> list[str]:
        return [f"scene{i:02d}" for i in range(self.num_scenes)]


def benchmark_config(seed: int = 0) -> SynthConfig:
    """The fixed 16-scene benchmark: 1600 single-scene samples, 90 multi-scene
    training samples, 1500 multi-scene test samples.

    128 feature dimensions at noise 2.0 make the 90 multi-scene samples too
    few for a model trained from scratch, while 100 samples per scene are
    plenty to learn the single-scene embedding.
    """
    return SynthConfig(num_scenes=16, feature_dim=128, samples_per_scene=100, num_multiscene=90,
                       num_multiscene_test=1500, noise_sigma=2.0, seed=seed)


@dataclass
class SynthData:
    single: list[SingleSceneSample]
    multi_train: list[MultiSceneSample]
    multi_test: list[MultiSceneSample]
    centers: np.ndarray
    scene_names: list[str]


def _min_pairwise(c: np.ndarray) -> float:
    if c.shape[0] < 2:
        return np.inf
    d = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(axis=2))
    return float(d[np.triu_indices(c.shape[0], 1)].min())


def synth_generate(config: SynthConfig) -> SynthData:
    rng = np.random.default_rng(config.seed)
    s, f = config.num_scenes, config.feature_dim
    need = 6.0 * config.noise_sigma
    for _ in range(config.max_tries):
        centers = rng.normal(0.0, config.center_scale, size=(s, f))
        md = _min_pairwise(centers)
        if md >= need and md > 0:
            break
    else:
        raise ConfigError(f"could not place {s} centers {need:g} apart in {f} dims")
    names = config.scene_names
    single = []
    for c in range(s):
        noise = rng.normal(0.0, config.noise_sigma, size=(config.samples_per_scene, f))
        for i in range(config.samples_per_scene):
            single.append(SingleSceneSample(centers[c] + noise[i], c, f"{names[c]}_{i:04d}"))
    shift = rng.normal(0.0, 1.0, size=f)
    shift *= config.multi_shift / max(np.linalg.norm(shift), 1e-12)

    def multi(n, prefix):
        out = []
        a, b = config.scenes_per_image
        for i in range(n):
            m = int(rng.integers(a, b + 1))
            chosen = np.sort(rng.choice(s, size=m, replace=False))
            x = centers[chosen].sum(axis=0)
            if config.combine == "average":
                x = x / m
            x = x + shift + rng.normal(0.0, config.noise_sigma, size=f)
            y = np.zeros(s)
            y[chosen] = 1.0
            out.append(MultiSceneSample(x, y, f"{prefix}{i:05d}"))
        return out

    train = multi(config.num_multiscene, "mtr")
    test = multi(config.num_multiscene_test, "mte")
    return SynthData(single, train, test, centers, names)


# -- splitting ------------------------------------------------------------------


def _allocate(n: int, fractions: np.ndarray) -> np.ndarray:
    """Largest-remainder apportionment of n items into len(fractions) parts."""
    raw = fractions * n
    counts = np.floor(raw + 1e-9).astype(int)
    rem = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rem]] += 1
    return counts


def split(samples: Sequence, fractions: Sequence[float], seed: int = 0, key=None) -> list[list]:
    """Partition ``samples`` by ``fractions``, stratified by ``key(sample)``.

    ``key`` defaults to ``scene_index`` for single-scene samples; for
    multi-scene samples the default is no stratification.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.ndim != 1 or fr.size == 0 or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError("fractions must be non-negative and sum to 1")
    if key is None:
        key = (lambda s: s.scene_index) if samples and hasattr(samples[0], "scene_index") else (lambda s: 0)
    rng = np.random.default_rng(seed)
    groups: dict = {}
    for i, s in enumerate(samples):
        groups.setdefault(key(s), []).append(i)
    parts: list[list[int]] = [[] for _ in fr]
    nonzero = int((fr > 0).sum())
    for g in sorted(groups, key=repr):
        idx = np.array(groups[g])
        if idx.size < nonzero:
            raise ValueError(f"class {g!r} has {idx.size} samples, fewer than {nonzero} partitions")
        idx = rng.permutation(idx)
        counts = _allocate(idx.size, fr)
        pos = 0
        for p, c in enumerate(counts):
            parts[p].extend(idx[pos : pos + c].tolist())
            pos += c
    return [[samples[i] for i in sorted(p)] for p in parts]


# -- checkpoints ----------------------------------------------------------------

MAGIC = b"PMNETCKPT\x00"
VERSION = 1


def _pack_section(name: str, meta: dict, arrays: Sequence[np.ndarray]) -> bytes:
    meta = dict(meta, arrays=[list(a.shape) for a in arrays])
    mj = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = struct.pack("<I", len(mj)) + mj
    for a in arrays:
        body += np.ascontiguousarray(a, dtype="<f8").tobytes()
    nb = name.encode("utf-8")
    return struct.pack("<I", len(nb)) + nb + struct.pack("<Q", len(body)) + body


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def _unpack_section(payload: bytes):
    r = _Reader(payload)
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad section header: {exc}") from None
    arrays = []
    for shape in meta.pop("arrays"):
        n = int(np.prod(shape)) if shape else 1
        arrays.append(np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape))
    if r.pos != len(payload):
        raise CheckpointError("trailing bytes in section")
    return meta, arrays


@dataclass
class Checkpoint:
    version: int
    model: PMNet
    config: dict = field(default_factory=dict)
    seed: int = 0


def save_checkpoint(model: PMNet, path, config: dict | None = None, seed: int = 0) -> None:
    """Write ``model`` as one self-describing binary file.

    Layout: magic, u32 version, u32 section count, sections
    (u32 name length, name, u64 payload length, payload), u32 CRC32 of
    everything before it. Each payload is a u32-prefixed JSON header
    followed by little-endian float64 arrays.
    """
    net, mem, mod = model.net, model.memory, model.module
    sections = [
        _pack_section("embedding", {"activations": [l.activation for l in net.layers]},
                      [a for l in net.layers for a in (l.weights, l.bias)]),
    ]
    if model.head is not None:
        sections.append(_pack_section("classifier", {"activations": [l.activation for l in model.head.layers]},
                                      [a for l in model.head.layers for a in (l.weights, l.bias)]))
    sections.append(_pack_section(
        "memory",
        {"scene_names": mem.scene_names, "k": mem.prototypes_per_scene, "method": mem.method,
         "row_to_scene": mem.row_to_scene.tolist()},
        [mem.matrix]))
    arrays = [mod.wq, mod.bq, mod.wk, mod.bk, mod.wv, mod.bv]
    if mod.mode == "standard":
        arrays += [mod.out_w, mod.out_b]
    sections.append(_pack_section(
        "retrieval",
        {"mode": mod.mode, "H": mod.num_heads, "L": mod.key_dim, "U": mod.value_dim}, arrays))
    sections.append(_pack_section("config", {"config": config or {}, "seed": int(seed)}, []))
    body = MAGIC + struct.pack("<II", VERSION, len(sections)) + b"".join(sections)
    body += struct.pack("<I", zlib.crc32(body))
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(body)
    tmp.replace(path)


def _layers(meta, arrays) -> list[Dense]:
    acts = meta["activations"]
    if len(arrays) != 2 * len(acts):
        raise CheckpointError("layer array count mismatch")
    return [Dense(arrays[2 * i], arrays[2 * i + 1], a) for i, a in enumerate(acts)]


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < len(MAGIC) + 12 or not buf.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic or truncated)")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise CheckpointError("checkpoint corrupted or truncated (CRC mismatch)")
    r = _Reader(buf[:-4])
    r.take(len(MAGIC))
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    sections = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        sections[name] = _unpack_section(r.take(r.u64()))
    for required in ("embedding", "memory", "retrieval", "config"):
        if required not in sections:
            raise CheckpointError(f"missing section {required!r}")
    try:
        net = EmbeddingNet(_layers(*sections["embedding"]))
        head = None
        if "classifier" in sections:
            head = ClassifierHead(_layers(*sections["classifier"]))
        mmeta, (matrix,) = sections["memory"]
        memory = PrototypeMemory(matrix, mmeta["scene_names"], mmeta["k"],
                                 np.array(mmeta["row_to_scene"], dtype=int), mmeta["method"])
        rmeta, ra = sections["retrieval"]
        if rmeta["mode"] == "standard":
            module = RetrievalModule(*ra, mode="standard")
        else:
            module = RetrievalModule(*ra[:6], None, None, mode=rmeta["mode"])
        if (module.num_heads, module.key_dim, module.value_dim) != (rmeta["H"], rmeta["L"], rmeta["U"]):
            raise CheckpointError("retrieval dimensions disagree with header")
        if module.embed_dim != net.output_dim or memory.dim != net.output_dim:
            raise CheckpointError("embedding, memory and retrieval dimensions disagree")
        if module.mode == "standard" and module.out_w.shape[1] != memory.num_scenes:
            raise CheckpointError("output layer width disagrees with memory scene count")
    except CheckpointError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"inconsistent checkpoint: {exc}") from None
    cmeta, _ = sections["config"]
    return Checkpoint(version, PMNet(net, memory, module, head), cmeta["config"], cmeta["seed"])


def write_manifest(path, config: SynthConfig, files: dict[str, str]) -> None:
    d = asdict(config)
    d["scenes_per_image"] = list(config.scenes_per_image)
    manifest = {"generator": d, "scene_names": config.scene_names, "files": files}
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
