"""``btsctl`` command line front end and experiment harness.

Subcommands: ``gen`` (synthesize the six recording rounds), ``train``,
``predict``, ``drift``, ``indicator``, and ``bench`` (the method comparison
table).  Every command is deterministic under a fixed ``--seed``; every
emitted table is JSON with a ``schema_version`` field.

A ``--config`` file holds flat ``key=value`` lines mirroring the flags;
explicit flags win over the file.  Exit codes: 0 success, 1 usage error,
2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .csi_sim import (CsiDataset, DataFormatError, base_scenario, derive_round,
                      generate_round, read_dataset, write_dataset)
from .indicator import DisarrayParams, MissingCaseError, disarray_windows
from .losses import CenterNotInitializedError, LossWeights
from .nets import CheckpointFormatError, load_bundle, save_bundle
from .preprocess import FrameStore, build_store
from .trainer import (TrainConfig, TrainingDivergedError, _indicators_for,
                      evaluate, monitor_drift, predict, train, write_log)

SCHEMA_VERSION = 1

#: drift profile of each derived recording round; round 1 is the base scenario
ROUND_PROFILES = {2: "none", 3: "none", 4: "mild", 5: "none", 6: "severe"}

BENCH_METHODS = ("bts", "supervised", "primal_ts", "dual_ts", "no_cd")


class UsageError(ValueError):
    """Bad flag or config values (exit code 1)."""


@dataclass
class ExperimentSpec:
    """One full synthetic experiment: generation, assignment, training knobs."""
    seed: int = 0
    packets_per_case: int = 2000
    round_profiles: dict[int, str] = field(
        default_factory=lambda: dict(ROUND_PROFILES))
    labeled_rounds: tuple[int, ...] = (1,)
    unlabeled_rounds: tuple[int, ...] = (2,)
    eval_rounds: tuple[int, ...] = (2, 3, 4, 5, 6)
    train: TrainConfig = field(default_factory=TrainConfig)
    stride: int = 1
    eval_stride: int = 5
    disable_cd: bool = False
    zero_lambdas: tuple[int, ...] = ()       # loss indices 1-4 forced to zero

    def __post_init__(self):
        if self.round_profiles.get(4, "mild") != "mild" or \
                self.round_profiles.get(6, "severe") != "severe":
            raise ValueError("round 4 must use mild and round 6 severe drift")

    def train_config(self, mode: str = "bts") -> TrainConfig:
        weights = self.train.weights
        if self.zero_lambdas:
            values = {f"lambda{i}": (0.0 if i in self.zero_lambdas
                                     else getattr(weights, f"lambda{i}"))
                      for i in (1, 2, 3, 4)}
            weights = LossWeights(**values)
        return dataclasses.replace(self.train, mode=mode, weights=weights,
                                   disable_cd=self.disable_cd, seed=self.seed)

    def make_rounds(self) -> dict[int, CsiDataset]:
        base = base_scenario(seed=self.seed)
        rounds = {1: generate_round(base, self.packets_per_case, 1, "synthetic")}
        for rid, profile in sorted(self.round_profiles.items()):
            scenario = derive_round(base, profile, rid)
            rounds[rid] = generate_round(scenario, self.packets_per_case, rid,
                                         "synthetic")
        return rounds


def _concat_stores(stores: list[FrameStore]) -> FrameStore:
    """Stack stores into one; anchors are re-offset into the joined data."""
    if len(stores) == 1:
        return stores[0]
    data, anchors, labels, segments = [], [], [], []
    offset = seg_base = 0
    for st in stores:
        data.append(st.data)
        anchors.append(st.anchors + offset)
        labels.append(st.labels)
        segments.append(st.segment_ids + seg_base)
        offset += st.data.shape[0]
        seg_base += int(st.segment_ids.max()) + 1
    return FrameStore(dataset_id="+".join(s.dataset_id for s in stores),
                      data=np.concatenate(data), anchors=np.concatenate(anchors),
                      labels=np.concatenate(labels), tau=stores[0].tau,
                      segment_ids=np.concatenate(segments))


def _load_store(path: str, tau: int, stride: int, part: str) -> FrameStore:
    dataset = read_dataset(path)
    return build_store(dataset, tau=tau, stride=stride, part=part)


def _emit(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

def _read_config_file(path: str) -> dict[str, str]:
    values = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="flat key=value file; flags win")
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true", default=None)


def _add_hyper(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tau", type=int, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    for i in (1, 2, 3, 4):
        p.add_argument(f"--lambda{i}", type=float, default=None)
    p.add_argument("--dth", type=float, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--mode", choices=("bts", "supervised", "primal_only",
                                      "dual_only"), default=None)
    p.add_argument("--feedback-scale", type=float, default=None)
    p.add_argument("--disable-cd", action="store_true", default=None)


DEFAULTS = {
    "seed": 0, "force": False, "tau": 50, "eta": 10000.0, "alpha": 1.0,
    "beta": 1.0, "lambda1": 0.1, "lambda2": 2.0, "lambda3": 1.0, "lambda4": 0.5,
    "dth": 50.0, "iters": 300, "batch": 256, "lr": 1e-3, "stride": 1,
    "mode": "bts", "feedback_scale": 1.0, "disable_cd": False,
    "packets": 2000, "rounds": "1,2,3,4,5,6", "window": 100, "part": "holdout",
    "eval_stride": 5,
}

_BOOL_KEYS = {"force", "disable_cd"}


def _coerce(key: str, raw: str):
    if key in _BOOL_KEYS:
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise UsageError(f"config key {key}: expected boolean, got {raw!r}")
    template = DEFAULTS.get(key)
    if isinstance(template, bool):
        return raw
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    return raw


def _resolve(args: argparse.Namespace) -> dict:
    """Layer defaults, then the config file, then explicit flags."""
    opts = dict(DEFAULTS)
    explicit = set()
    if getattr(args, "config", None):
        for key, raw in _read_config_file(args.config).items():
            if key not in opts and key not in vars(args):
                raise UsageError(f"unknown config key {key!r}")
            opts[key] = _coerce(key, raw)
            explicit.add(key)
    for key, value in vars(args).items():
        if key in ("config", "func"):
            continue
        if value is not None:
            opts[key] = value
            explicit.add(key)
        elif key not in opts:
            opts[key] = None
    opts["_explicit"] = explicit
    return opts


def _train_config(opts: dict) -> TrainConfig:
    try:
        return TrainConfig(
            iterations=opts["iters"], batch_size=opts["batch"],
            lr_teacher=opts["lr"], lr_student=opts["lr"],
            weights=LossWeights(lambda1=opts["lambda1"], lambda2=opts["lambda2"],
                                lambda3=opts["lambda3"], lambda4=opts["lambda4"]),
            disarray=DisarrayParams(alpha=opts["alpha"], beta=opts["beta"]),
            tau=opts["tau"], eta=opts["eta"], d_th=opts["dth"], seed=opts["seed"],
            mode=opts["mode"], feedback_scale=opts["feedback_scale"],
            disable_cd=opts["disable_cd"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(opts: dict) -> int:
    if not opts["out"]:
        raise UsageError("gen requires --out DIRECTORY")
    rounds = sorted({int(r) for r in str(opts["rounds"]).split(",") if r.strip()})
    bad = [r for r in rounds if r not in (1, 2, 3, 4, 5, 6)]
    if bad:
        raise UsageError(f"rounds must be within 1..6, got {bad}")
    out = Path(opts["out"])
    if out.exists() and any(out.iterdir()) and not opts["force"]:
        raise DataFormatError(f"output directory {out} exists; pass --force")
    out.mkdir(parents=True, exist_ok=True)
    spec = ExperimentSpec(seed=opts["seed"], packets_per_case=opts["packets"])
    generated = spec.make_rounds()
    written = {}
    for rid in rounds:
        path = out / f"round{rid}"
        write_dataset(generated[rid], path)
        written[str(rid)] = str(path)
    _emit({"schema_version": SCHEMA_VERSION, "command": "gen",
           "seed": opts["seed"], "packets_per_case": opts["packets"],
           "rounds": written}, None)
    return 0


def cmd_train(opts: dict, labeled: str, unlabeled: str | None) -> int:
    if not opts["out"]:
        raise UsageError("train requires --out DIRECTORY")
    cfg = _train_config(opts)
    labeled_store = _load_store(labeled, cfg.tau, opts["stride"], "fit")
    unlabeled_store = None
    if unlabeled:
        unlabeled_store = _load_store(unlabeled, cfg.tau, opts["stride"], "fit")
    bundle, records = train(labeled_store, unlabeled_store, cfg)
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_bundle(bundle, out / "model.ckpt")
    write_log(records, out / "train_log.jsonl")
    last = records[-1]
    _emit({"schema_version": SCHEMA_VERSION, "command": "train",
           "checkpoint": str(out / "model.ckpt"),
           "log": str(out / "train_log.jsonl"),
           "iterations": len(records), "mode": cfg.mode,
           "final_components": last.components}, None)
    return 0


def cmd_predict(opts: dict, model: str, data: str) -> int:
    bundle = load_bundle(model)
    store = _load_store(data, bundle.config.tau, opts["eval_stride"], opts["part"])
    result = evaluate(bundle, store)
    confusion = np.zeros((4, 4), dtype=int)
    for true, pred in zip(store.labels, result["predictions"]):
        confusion[true - 1, pred - 1] += 1
    _emit({"schema_version": SCHEMA_VERSION, "command": "predict",
           "accuracy": result["accuracy"],
           "per_case": {str(c): a for c, a in result["per_case"].items()},
           "confusion": confusion.tolist(), "n_frames": result["n_frames"]},
          opts["out"])
    return 0


def cmd_drift(opts: dict, model: str, data: str) -> int:
    bundle = load_bundle(model)
    store = _load_store(data, bundle.config.tau, opts["eval_stride"], "all")
    d_th = opts["dth"] if "dth" in opts["_explicit"] else bundle.config.d_th
    report = monitor_drift(bundle, store, window=opts["window"], d_th=d_th)
    _emit({"schema_version": SCHEMA_VERSION, "command": "drift",
           "verdict": report.verdict, "threshold": report.threshold,
           "window": report.window,
           "per_origin": {k: list(v) for k, v in report.per_origin.items()},
           "median_tail": float(np.median(report.distances[-report.window:])),
           "n_frames": int(report.distances.size)}, opts["out"])
    return 0


def cmd_indicator(opts: dict, labeled: str, unlabeled: str) -> int:
    params = DisarrayParams(alpha=opts["alpha"], beta=opts["beta"])
    tau = opts["tau"]
    labeled_store = _load_store(labeled, tau, opts["stride"], "fit")
    target = _load_store(unlabeled, tau, opts["stride"], "all")
    rho_l = disarray_windows(labeled_store.data, labeled_store.anchors, tau, params)
    rho_u = disarray_windows(target.data, target.anchors, tau, params)
    indicators = _indicators_for(labeled_store, rho_l, rho_u, params)
    preds = np.argmax(-np.square(rho_u[:, None] - indicators.gamma[None, :]),
                      axis=1) + 1
    _emit({"schema_version": SCHEMA_VERSION, "command": "indicator",
           "alpha": params.alpha, "beta": params.beta,
           "gamma": indicators.gamma.tolist(), "delta": indicators.delta,
           "accuracy": float((preds == target.labels).mean()),
           "n_labeled": indicators.n_labeled,
           "n_unlabeled": indicators.n_unlabeled}, opts["out"])
    return 0


def run_benchmark(spec: ExperimentSpec, methods=BENCH_METHODS) -> dict:
    """Train every method and evaluate on each held-out round."""
    rounds = spec.make_rounds()
    cfg = spec.train_config()
    labeled = _concat_stores([
        build_store(rounds[r], cfg.tau, spec.stride, part="fit")
        for r in spec.labeled_rounds])
    unlabeled = _concat_stores([
        build_store(rounds[r], cfg.tau, spec.stride, part="fit")
        for r in spec.unlabeled_rounds])
    holdouts = {r: build_store(rounds[r], cfg.tau, spec.eval_stride, part="holdout")
                for r in spec.eval_rounds}

    table, per_case = {}, {}
    for method in methods:
        if method == "bts":
            bundle, _ = train(labeled, unlabeled, spec.train_config("bts"))
        elif method == "supervised":
            bundle, _ = train(labeled, unlabeled, spec.train_config("supervised"))
        elif method == "primal_ts":
            bundle, _ = train(labeled, unlabeled, spec.train_config("primal_only"))
        elif method == "dual_ts":
            bundle, _ = train(labeled, unlabeled, spec.train_config("dual_only"))
        elif method == "no_cd":
            cfg_nc = dataclasses.replace(spec.train_config("bts"), disable_cd=True)
            bundle, _ = train(labeled, unlabeled, cfg_nc)
        else:
            raise UsageError(f"unknown bench method {method!r}")
        row, cases = {}, {}
        for rid, store in holdouts.items():
            result = evaluate(bundle, store)
            row[str(rid)] = result["accuracy"]
            cases[str(rid)] = {str(c): a for c, a in result["per_case"].items()}
        table[method] = row
        per_case[method] = cases
    return {"schema_version": SCHEMA_VERSION, "command": "bench",
            "seed": spec.seed, "packets_per_case": spec.packets_per_case,
            "iterations": cfg.iterations, "batch_size": cfg.batch_size,
            "labeled_rounds": list(spec.labeled_rounds),
            "unlabeled_rounds": list(spec.unlabeled_rounds),
            "eval_rounds": [str(r) for r in spec.eval_rounds],
            "methods": list(methods), "accuracy": table, "per_case": per_case}


def cmd_bench(opts: dict) -> int:
    spec = ExperimentSpec(
        seed=opts["seed"], packets_per_case=opts["packets"],
        train=_train_config(opts), stride=opts["stride"],
        eval_stride=opts["eval_stride"], disable_cd=opts["disable_cd"])
    payload = run_benchmark(spec)
    _emit(payload, opts["out"])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="btsctl",
        description="two-room Wi-Fi presence detection: data, training, drift")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="synthesize recording rounds")
    p.add_argument("--rounds", default=None, help="comma list, default 1..6")
    p.add_argument("--packets", type=int, default=None, help="packets per case")
    _add_common(p)
    p.set_defaults(func=lambda a, o: cmd_gen(o))

    p = sub.add_parser("train", help="train a model bundle")
    p.add_argument("--labeled", required=True)
    p.add_argument("--unlabeled", default=None)
    _add_common(p); _add_hyper(p)
    p.set_defaults(func=lambda a, o: cmd_train(o, a.labeled, a.unlabeled))

    p = sub.add_parser("predict", help="evaluate a checkpoint on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--part", choices=("fit", "holdout", "all"), default=None)
    p.add_argument("--eval-stride", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=lambda a, o: cmd_predict(o, a.model, a.data))

    p = sub.add_parser("drift", help="score a dataset against the drift monitor")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--dth", type=float, default=None)
    p.add_argument("--eval-stride", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=lambda a, o: cmd_drift(o, a.model, a.data))

    p = sub.add_parser("indicator", help="training-free indicator statistics")
    p.add_argument("--labeled", required=True)
    p.add_argument("--unlabeled", required=True)
    _add_common(p); _add_hyper(p)
    p.set_defaults(func=lambda a, o: cmd_indicator(o, a.labeled, a.unlabeled))

    p = sub.add_parser("bench", help="method comparison over all rounds")
    p.add_argument("--packets", type=int, default=None)
    p.add_argument("--eval-stride", type=int, default=None)
    _add_common(p); _add_hyper(p)
    p.set_defaults(func=lambda a, o: cmd_bench(o))
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:        # argparse uses 2 for usage errors
        return 0 if exc.code in (0, None) else 1
    try:
        opts = _resolve(args)
        try:
            return args.func(args, opts)
        except (UsageError,):
            raise
        except ValueError as exc:
            if isinstance(exc, (DataFormatError, MissingCaseError)):
                raise
            raise DataFormatError(str(exc)) from exc
    except UsageError as exc:
        print(f"btsctl: usage error: {exc}", file=sys.stderr)
        return 1
    except (DataFormatError, MissingCaseError, CheckpointFormatError,
            FileNotFoundError, NotADirectoryError, IsADirectoryError) as exc:
        print(f"btsctl: data error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDivergedError, CenterNotInitializedError,
            FloatingPointError) as exc:
        print(f"btsctl: numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
