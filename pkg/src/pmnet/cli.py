"""Command-line driver: ``pmnet {synth,train,evaluate,ablate,gradcheck}``.

Every subcommand takes an optional config file as its first positional
argument. The file holds flat ``key = value`` lines whose keys are the long
flag names (dashes or underscores); ``#`` starts a comment. Precedence is
command-line flag, then ``$PMNET_OUTPUT_DIR`` (output directory only), then
the config file, then built-in defaults.

Exit codes: 0 success, 1 validation error, 2 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import ablation, plotting
from .data import (
    CheckpointError,
    ConfigError,
    FeatureTable,
    ParseError,
    SynthConfig,
    load_checkpoint,
    load_feature_table,
    save_checkpoint,
    save_feature_table,
    synth_generate,
    write_manifest,
)
from .gradcheck import CHECKS, TOLERANCE, run_gradcheck
from .metrics import report_from_predictions, threshold_probs
from .numcore import NumericError, ShapeError
from .optim import TrainSchedule
from .trainer import PipelineConfig, loss_history_csv, run_baseline, run_two_phase

log = logging.getLogger("pmnet")

OUTPUT_ENV = "PMNET_OUTPUT_DIR"


class ValidationError(Exception):
    pass


def read_config_file(path) -> list[str]:
    """Turn ``key = value`` lines into argv tokens placed before real flags."""
    tokens = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        flag = "--" + key.replace("_", "-")
        low = value.lower()
        if low in ("true", "yes", "on"):
            tokens.append(flag)
        elif low in ("false", "no", "off"):
            continue
        else:
            tokens += [flag, value]
    return tokens


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split()) if text.strip() else ()


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _add_common(p):
    p.add_argument("config", nargs="?", help="flat key = value config file")
    p.add_argument("--out-dir", default="runs", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fig-format", default="svg", choices=["svg", "png", "pdf", "none"])
    p.add_argument("-v", "--verbose", action="store_true")


def _add_model(p):
    g = p.add_argument_group("model")
    g.add_argument("--embed-dim", type=int, default=64, help="D")
    g.add_argument("--hidden", type=_ints, default=(256, 256), help="embedding hidden widths, e.g. '256,256'")
    g.add_argument("--head-hidden", type=_ints, default=(), help="classifier head hidden widths")
    g.add_argument("--heads", type=int, default=20, help="H")
    g.add_argument("--key-dim", type=int, default=256, help="L")
    g.add_argument("--value-dim", type=int, default=256, help="U")
    g.add_argument("--k", type=int, default=1, help="prototypes per scene")
    g.add_argument("--cluster", default="mean", choices=["mean", "kmeans", "agglomerative"])
    g.add_argument("--mode", default="standard", choices=["standard", "relevance-as-prediction"])
    g.add_argument("--loss", default="cross-entropy", choices=["cross-entropy", "triplet"])
    g.add_argument("--triplet-alpha", type=float, default=0.5)
    g.add_argument("--merge", default="", help="label merge map, e.g. 'residential:dense+medium; sea:beach'")
    g.add_argument("--threshold", type=float, default=0.5)
    g.add_argument("--freeze-embedding", action="store_true")
    s = p.add_argument_group("schedule")
    s.add_argument("--phase1-lr", type=float, default=2e-4)
    s.add_argument("--phase1-epochs", type=int, default=100)
    s.add_argument("--phase2-lr", type=float, default=5e-4)
    s.add_argument("--phase2-epochs", type=int, default=100)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--patience", type=int, default=2)
    s.add_argument("--decay-factor", type=float, default=float(np.sqrt(0.1)))
    s.add_argument("--val-fraction", type=float, default=0.1)


def _add_data(p, test_required=True):
    p.add_argument("--single", help="single-scene feature table")
    p.add_argument("--multi-train", help="multi-scene training table")
    p.add_argument("--multi-test", help="multi-scene test table")
    p.add_argument("--data-dir", help="directory holding single.csv, multi_train.csv, multi_test.csv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic feature tables")
    _add_common(p)
    p.add_argument("--num-scenes", type=int, default=16)
    p.add_argument("--feature-dim", type=int, default=128)
    p.add_argument("--samples-per-scene", type=int, default=100)
    p.add_argument("--num-multiscene", type=int, default=90)
    p.add_argument("--num-multiscene-test", type=int, default=1500)
    p.add_argument("--scenes-min", type=int, default=1)
    p.add_argument("--scenes-max", type=int, default=4)
    p.add_argument("--noise-sigma", type=float, default=2.0)
    p.add_argument("--center-scale", type=float, default=1.0)
    p.add_argument("--multi-shift", type=float, default=0.0)
    p.add_argument("--combine", default="sum", choices=["sum", "average"])

    p = sub.add_parser("train", help="two-phase training, checkpoint and report")
    _add_common(p)
    _add_data(p)
    _add_model(p)
    p.add_argument("--checkpoint", help="checkpoint path (default OUT/model.pmnet)")
    p.add_argument("--baseline", action="store_true", help="also train the scratch feedforward baseline")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a multi-scene table")
    _add_common(p)
    _add_data(p)
    p.add_argument("--checkpoint", help="checkpoint path")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--sweep", type=int, default=0, help="number of evenly spaced thresholds in (0,1) to sweep")
    p.add_argument("--thresholds", type=_floats, default=(), help="explicit threshold list")

    p = sub.add_parser("ablate", help="ablation sweeps over several seeds")
    _add_common(p)
    _add_data(p)
    _add_model(p)
    p.add_argument("--sweep", default="heads", help="comma list of " + ", ".join(ablation.SWEEPS) + ", or 'all'")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds (seed, seed+1, ...)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--head-counts", type=_ints, default=ablation.HEAD_COUNTS)
    p.add_argument("--cluster-counts", type=_ints, default=ablation.CLUSTER_COUNTS)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    _add_common(p)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--checks", default="all", help="comma list of " + ", ".join(CHECKS))
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    first = parser.parse_args(argv)
    if first.config:
        cmd_index = argv.index(first.command)
        rest = argv[cmd_index + 1 :]
        rest.remove(first.config)
        injected = read_config_file(first.config)
        if os.environ.get(OUTPUT_ENV):
            injected += ["--out-dir", os.environ[OUTPUT_ENV]]
        return parser.parse_args([*argv[:cmd_index], first.command, first.config, *injected, *rest])
    if os.environ.get(OUTPUT_ENV) and "--out-dir" not in argv:
        first.out_dir = os.environ[OUTPUT_ENV]
    return first


def pipeline_config(a) -> PipelineConfig:
    common = dict(batch_size=a.batch_size, plateau_patience=a.patience, decay_factor=a.decay_factor)
    try:
        cfg = PipelineConfig(
            embed_dim=a.embed_dim, hidden=tuple(a.hidden), head_hidden=tuple(a.head_hidden),
            num_heads=a.heads, key_dim=a.key_dim, value_dim=a.value_dim,
            prototypes_per_scene=a.k, cluster_method=a.cluster, mode=a.mode.replace("-", "_"),
            loss_kind=a.loss.replace("-", "_"), triplet_alpha=a.triplet_alpha, val_fraction=a.val_fraction,
            phase1=TrainSchedule(learning_rate=a.phase1_lr, max_epochs=a.phase1_epochs, **common),
            phase2=TrainSchedule(learning_rate=a.phase2_lr, max_epochs=a.phase2_epochs, **common),
            freeze_embedding=a.freeze_embedding, threshold=a.threshold, merge=a.merge, seed=a.seed,
        )
        cfg.validate()
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    return cfg


def _paths(a, need_test=True):
    d = Path(a.data_dir) if a.data_dir else None
    single = a.single or (d / "single.csv" if d else None)
    train = a.multi_train or (d / "multi_train.csv" if d else None)
    test = a.multi_test or (d / "multi_test.csv" if d else None)
    return single, train, test


def load_datasets(a, need=("single", "train", "test")):
    single_p, train_p, test_p = _paths(a)
    paths = {"single": single_p, "train": train_p, "test": test_p}
    for k in need:
        if paths[k] is None:
            raise ValidationError(f"missing --{ {'single': 'single', 'train': 'multi-train', 'test': 'multi-test'}[k]} (or --data-dir)")
        if not Path(paths[k]).exists():
            raise ValidationError(f"file not found: {paths[k]}")
    out = {}
    if "single" in need:
        t = load_feature_table(single_p, multi_label=False)
        class_names = sorted({l[0] for l in t.labels})
        out["class_names"] = class_names
        out["single"] = t.to_single(class_names)
    return out, paths


def _scene_names(cfg: PipelineConfig, class_names):
    from .prototype import LabelMergeMap

    if cfg.merge:
        return LabelMergeMap.parse(cfg.merge, class_names).scene_names
    return list(class_names)


def _multi(path, scene_names):
    t = load_feature_table(path, known_labels=scene_names, multi_label=True)
    return t.to_multi(scene_names)


def _fig(a, out: Path, stem: str):
    return None if a.fig_format == "none" else out / f"{stem}.{a.fig_format}"


def cmd_synth(a) -> int:
    a_ = (a.scenes_min, a.scenes_max)
    try:
        cfg = SynthConfig(num_scenes=a.num_scenes, feature_dim=a.feature_dim, samples_per_scene=a.samples_per_scene,
                          num_multiscene=a.num_multiscene, num_multiscene_test=a.num_multiscene_test,
                          scenes_per_image=a_, noise_sigma=a.noise_sigma, center_scale=a.center_scale,
                          multi_shift=a.multi_shift, combine=a.combine, seed=a.seed)
        data = synth_generate(cfg)
    except ConfigError as exc:
        raise ValidationError(str(exc)) from None
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"single": "single.csv", "multi_train": "multi_train.csv", "multi_test": "multi_test.csv"}
    save_feature_table(FeatureTable.from_single(data.single, data.scene_names), out / files["single"])
    save_feature_table(FeatureTable.from_multi(data.multi_train, data.scene_names), out / files["multi_train"])
    save_feature_table(FeatureTable.from_multi(data.multi_test, data.scene_names), out / files["multi_test"])
    write_manifest(out / "manifest.json", cfg, files)
    print(f"wrote {len(data.single)} single-scene, {len(data.multi_train)} + {len(data.multi_test)} "
          f"multi-scene samples to {out}")
    return 0


def cmd_train(a) -> int:
    cfg = pipeline_config(a)
    data, paths = load_datasets(a, need=("single", "train"))
    scenes = _scene_names(cfg, data["class_names"])
    multi_train = _multi(paths["train"], scenes)
    multi_test = _multi(paths["test"], scenes) if paths["test"] and Path(paths["test"]).exists() else None
    res = run_two_phase(cfg, data["single"], data["class_names"], multi_train, multi_test)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(a.checkpoint) if a.checkpoint else out / "model.pmnet"
    save_checkpoint(res.model, ckpt, cfg.to_dict(), cfg.seed)
    (out / "loss_history.csv").write_text(loss_history_csv(res.history), encoding="utf-8")
    fig = _fig(a, out, "loss_curves")
    if fig:
        plotting.plot_loss_curves(res.history, fig)
    print(f"checkpoint: {ckpt}")
    print(f"phase-2 embedding: {'frozen' if cfg.freeze_embedding else 'fine-tuned'}")
    if res.metrics is not None:
        title = (f"# PM-Net  H={cfg.num_heads} L={cfg.key_dim} U={cfg.value_dim} k={cfg.prototypes_per_scene} "
                 f"mode={cfg.mode} embedding={'frozen' if cfg.freeze_embedding else 'fine-tuned'}")
        (out / "metrics.csv").write_text(res.metrics.to_csv(), encoding="utf-8")
        (out / "metrics.txt").write_text(res.metrics.to_text(title), encoding="utf-8")
        print(res.metrics.to_text(title), end="")
        if a.baseline:
            _, bm = run_baseline(cfg, multi_train, multi_test, scenes)
            (out / "baseline_metrics.csv").write_text(bm.to_csv(), encoding="utf-8")
            (out / "baseline_metrics.txt").write_text(bm.to_text("# scratch feedforward baseline"), encoding="utf-8")
            print(bm.to_text("# scratch feedforward baseline"), end="")
    return 0


def cmd_evaluate(a) -> int:
    if not a.checkpoint:
        raise ValidationError("--checkpoint is required")
    if not 0 < a.threshold < 1:
        raise ValidationError("--threshold must lie in (0, 1)")
    ck = load_checkpoint(a.checkpoint)
    model = ck.model
    _, _, test_p = _paths(a)
    if test_p is None or not Path(test_p).exists():
        raise ValidationError("missing or unreadable --multi-test")
    table = load_feature_table(test_p, known_labels=model.scene_names, multi_label=True)
    if table.feature_dim != model.net.input_dim:
        raise CheckpointError(f"table has {table.feature_dim} features, checkpoint expects {model.net.input_dim}")
    samples = table.to_multi(model.scene_names)
    x = np.stack([s.features for s in samples])
    y = np.stack([s.labels for s in samples]).astype(np.int64)
    probs = model.predict_proba(x)
    report = report_from_predictions(threshold_probs(probs, a.threshold), y, model.scene_names, a.threshold)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    title = f"# evaluation of {a.checkpoint}"
    (out / "metrics.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "metrics.txt").write_text(report.to_text(title), encoding="utf-8")
    print(report.to_text(title), end="")
    thresholds = list(a.thresholds)
    if a.sweep:
        thresholds = [i / (a.sweep + 1) for i in range(1, a.sweep + 1)]
    if thresholds:
        lines = ["threshold,mean_f1,mean_f2,mean_example_precision,mean_example_recall"]
        f1s, f2s = [], []
        for t in thresholds:
            r = report_from_predictions(threshold_probs(probs, t), y, model.scene_names, t)
            f1s.append(r.mean_f1)
            f2s.append(r.mean_f2)
            lines.append(f"{t:.4f},{r.mean_f1:.6f},{r.mean_f2:.6f},{r.mean_example_precision:.6f},"
                         f"{r.mean_example_recall:.6f}")
        (out / "threshold_curve.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        fig = _fig(a, out, "threshold_curve")
        if fig:
            plotting.plot_threshold_curve(thresholds, f1s, f2s, fig)
    return 0


def cmd_ablate(a) -> int:
    cfg = pipeline_config(a)
    data, paths = load_datasets(a)
    scenes = _scene_names(cfg, data["class_names"])
    multi_train, multi_test = _multi(paths["train"], scenes), _multi(paths["test"], scenes)
    sweeps = list(ablation.SWEEPS) if a.sweep == "all" else [s.strip() for s in a.sweep.split(",") if s.strip()]
    for s in sweeps:
        if s not in ablation.SWEEPS:
            raise ValidationError(f"unknown sweep {s!r}")
    if a.seeds < 1:
        raise ValidationError("--seeds must be >= 1")
    seeds = list(range(a.seed, a.seed + a.seeds))
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    failed = 0
    for s in sweeps:
        records = ablation.run_sweep(s, cfg, data["single"], data["class_names"], multi_train, multi_test,
                                     seeds, a.workers, a.head_counts, a.cluster_counts)
        summary = ablation.summarize(records)
        (out / f"ablation_{s}_runs.csv").write_text(ablation.runs_csv(records), encoding="utf-8")
        (out / f"ablation_{s}_summary.csv").write_text(ablation.summary_csv(summary), encoding="utf-8")
        (out / f"ablation_{s}.dat").write_text(ablation.plot_data(summary), encoding="utf-8")
        fig = _fig(a, out, f"ablation_{s}")
        if fig:
            if s in ("heads", "clusters"):
                series = {}
                for r in summary:
                    xs, ms, ss = series.setdefault(r.series, ([], [], []))
                    xs.append(r.x)
                    ms.append(r.mean_f1)
                    ss.append(r.std_f1)
                plotting.plot_sweep_lines(series, "number of heads" if s == "heads" else "prototypes per scene",
                                          fig, title=f"{s} sweep")
            else:
                plotting.plot_sweep_bars([r.setting for r in summary], [r.mean_f1 for r in summary],
                                         [r.std_f1 for r in summary], fig, title=f"{s} sweep")
        print(f"# sweep {s}: {len(records)} runs over seeds {seeds}")
        print(f"{'setting':<26}{'mean F1':>10}{'std':>10}{'runs':>6}")
        for r in summary:
            print(f"{r.setting:<26}{r.mean_f1:>10.4f}{r.std_f1:>10.4f}{r.n:>6}")
            failed += r.failures
    if failed:
        print(f"error: {failed} ablation runs hit numeric failures", file=sys.stderr)
        return 2
    return 0


def cmd_gradcheck(a) -> int:
    checks = list(CHECKS) if a.checks == "all" else [c.strip() for c in a.checks.split(",")]
    for c in checks:
        if c not in CHECKS:
            raise ValidationError(f"unknown check {c!r}")
    worst: dict[tuple[str, str], float] = {}
    failures = []
    for seed in range(a.seed, a.seed + a.seeds):
        rep = run_gradcheck(seed, checks)
        for g in rep.groups:
            key = (g.check, g.group)
            worst[key] = max(worst.get(key, 0.0), g.max_rel_error)
            if not g.passed:
                failures.append((seed, g))
    print(f"# gradcheck: {a.seeds} seeds, tolerance {TOLERANCE:g} (max relative error per group)")
    for (check, group), err in worst.items():
        print(f"{check:<26}{group:<14}{err:>12.3e}  {'ok' if err <= TOLERANCE else 'FAIL'}")
    for seed, g in failures:
        print(f"error: gradcheck failed for {g.check}/{g.group} seed={seed} "
              f"index={list(g.worst_index)} rel_err={g.max_rel_error:.3e}", file=sys.stderr)
    return 2 if failures else 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "evaluate": cmd_evaluate, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValidationError, ParseError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, NumericError, ShapeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
