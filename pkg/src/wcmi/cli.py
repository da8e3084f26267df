"""``wcmi`` command line.

Grammar: ``wcmi <subcommand> [--config FILE] [--seed N] [--out DIR] [flags...]``.
A config file is one JSON object whose keys are flag names with dashes
replaced by underscores; explicit flags override it. Every run writes
``manifest.json`` (resolved config, seeds, timestamps) and ``result.json``
to the output directory; ``wcmi replay DIR/manifest.json`` re-executes a
manifest and reproduces ``result.json`` byte for byte.

Exit codes: 0 success, 1 selftest failure, 2 usage/config error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import warnings
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import __version__
from .batch import SampleBatch
from .data import DataFormatError, DatasetSpec, load_dataset
from .diffnet import Network, linear_feature, load_network, save_network
from .downstream import (
    ClassifierHead,
    class_indices,
    evaluate,
    fano_bound,
    label_tv_from_uniform,
    signed_to_index,
    train_head,
)
from .gmm import GaussianMixtureSpec, LinearSignFeature, analyze, mc_verify, theorem32_sandwich
from .mi import (
    AttackConfig,
    EstimationError,
    EstimatorConfig,
    estimate_rv,
    estimate_rv_per_feature,
    estimate_worst_case_mi,
)
from .numerics import RNG_ALGORITHM, PerturbationBudget, derive_seed, seeded_rng
from .robust_repr import TrainPrincipleConfig, saliency, train_encoder
from .selftest import run_selftest


EXIT_OK, EXIT_SELFTEST, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
SEED_RULE = "stage seed = first 8 bytes (little-endian) of blake2b('<master>|<stage>|<index>')"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# flag groups: name -> (default, type, help)
# ---------------------------------------------------------------------------


def _floats(value) -> List[float]:
    if isinstance(value, (list, tuple)):
        return [float(v) for v in value]
    if isinstance(value, (int, float)):
        return [float(value)]
    return [float(v) for v in str(value).split(",") if v.strip()]


def _ints(value) -> List[int]:
    return [int(v) for v in _floats(value)]


COMMON = {
    "seed": (0, int, "master seed"),
    "out": ("wcmi-out", str, "output directory"),
}
GMM = {
    "theta": ("1,0", str, "mixture mean theta* (comma separated)"),
    "sigma": ("1", str, "covariance: one variance, or d*d entries row-major"),
    "w": ("1,0", str, "sign-feature direction w"),
    "p": ("2", str, "perturbation norm: 2 or inf"),
    "eps": (0.5, float, "perturbation radius"),
}
DATASET = {
    "dataset": ("synthetic_gmm", str, "synthetic_gmm | idx_files | csv"),
    "theta": ("1,0", str, "synthetic mixture mean"),
    "sigma": ("1", str, "synthetic covariance (variance or d*d entries)"),
    "n": (6000, int, "synthetic sample count"),
    "images": (None, str, "IDX image file"),
    "labels": (None, str, "IDX label file"),
    "take": (None, int, "rows kept after a seeded shuffle"),
    "downsample": (1, int, "mean-pooling factor for IDX images"),
    "csv": (None, str, "CSV file of numeric rows"),
    "label_column": (None, int, "CSV label column"),
    "normalization": ("none", str, "none | to_unit_box"),
    "train_size": (None, int, "rows used for training (default two thirds)"),
}
ATTACK = {
    "p": ("2", str, "perturbation norm: 2 or inf"),
    "eps": (0.0, float, "perturbation radius"),
    "attack_steps": (10, int, "PGD steps"),
    "attack_step_size": (0.1, float, "PGD step size"),
    "box": (None, str, "domain clamp 'lo,hi'"),
}
ESTIMATOR = {
    "epochs": (1000, int, "critic training epochs"),
    "critic_step_size": (2e-3, float, "critic Adam step size"),
    "batch_size": (128, int, "mini-batch size"),
    "negatives": (32, int, "negative samples per row"),
    "test_batches": (8, int, "test mini-batches"),
    "hidden": ("32,32", str, "critic hidden widths"),
}
ENCODER = {
    "encoder": (None, str, "encoder model file; default is the sign surrogate of --feature-w"),
    "feature_w": ("1,0", str, "sign-feature direction for the default encoder"),
    "feature_gain": (50.0, float, "gain of the tanh sign surrogate"),
}


def _merge(*groups):
    out = {}
    for g in groups:
        out.update(g)
    return out


SUBCOMMANDS: Dict[str, dict] = {
    "gmm analyze": _merge(COMMON, GMM),
    "gmm verify": _merge(COMMON, GMM, {"n": (1_000_000, int, "Monte Carlo samples")}),
    "mi estimate": _merge(COMMON, DATASET, ATTACK, ESTIMATOR, ENCODER),
    "rv estimate": _merge(
        COMMON, DATASET, ATTACK, ESTIMATOR, ENCODER,
        {"per_feature": (False, bool, "one report per encoder output")},
    ),
    "repr train": _merge(
        COMMON, DATASET, ATTACK, ESTIMATOR,
        {
            "objective": ("worst_case", str, "infomax | worst_case"),
            "beta": (1.0, float, "regularization weight (only 1 is supported)"),
            "encoder_sizes": ("2,8,2", str, "encoder layer widths"),
            "critic_steps": (5, int, "critic steps per encoder step"),
            "encoder_steps": (500, int, "encoder steps"),
            "encoder_step_size": (5e-4, float, "encoder Adam step size"),
        },
    ),
    "clf train": _merge(
        COMMON, DATASET, ATTACK,
        {
            "encoder": (None, str, "encoder model file (default identity)"),
            "head": ("linear", str, "linear | mlp"),
            "mode": ("standard", str, "standard | adversarial"),
            "clf_epochs": (50, int, "head training epochs"),
            "clf_step_size": (1e-3, float, "head Adam step size"),
            "batch_size": (128, int, "mini-batch size"),
            "classes": (None, int, "number of classes (default: inferred)"),
            "early_stopping": (False, bool, "keep the epoch with best adversarial accuracy on the test split"),
        },
    ),
    "eval": _merge(
        COMMON, DATASET, ATTACK,
        {
            "encoder": (None, str, "encoder model file (default identity)"),
            "head_file": (None, str, "head model file"),
        },
    ),
    "bound": _merge(COMMON, {
        "mi_worst": (None, float, "worst-case mutual information (nats)"),
        "classes": (None, int, "number of classes"),
    }),
    "saliency": _merge(
        COMMON, DATASET,
        {
            "encoder": (None, str, "encoder model file (default identity)"),
            "head_file": (None, str, "head model file (cross_entropy loss)"),
            "critic_file": (None, str, "critic model file (mi_critic loss)"),
            "loss": ("cross_entropy", str, "cross_entropy | mi_critic"),
            "count": (4, int, "number of samples"),
            "image_shape": (None, str, "rows,cols for PGM output (default square)"),
        },
    ),
    "selftest": dict(COMMON),
}


def _bool(value) -> bool:
    if isinstance(value, bool):
        return value
    key = str(value).strip().lower()
    if key in ("1", "true", "yes"):
        return True
    if key in ("0", "false", "no"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def _coerce(name: str, value, kind):
    if value is None:
        return None
    try:
        if kind is bool:
            return _bool(value)
        if kind is str and isinstance(value, (list, tuple)):
            return ",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in value)
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name}: {value!r}") from exc


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wcmi", description="Worst-case mutual information toolkit")
    parser.add_argument("--version", action="version", version=f"wcmi {__version__}")
    top = parser.add_subparsers(dest="group", required=True)
    groups: Dict[str, argparse._SubParsersAction] = {}
    for key, flags in SUBCOMMANDS.items():
        words = key.split()
        if len(words) == 2:
            if words[0] not in groups:
                gp = top.add_parser(words[0])
                groups[words[0]] = gp.add_subparsers(dest="action", required=True)
            sp = groups[words[0]].add_parser(words[1])
        else:
            sp = top.add_parser(words[0])
        sp.set_defaults(command=key)
        sp.add_argument("--config", default=None, help="JSON config file")
        for name, (default, kind, help_text) in flags.items():
            flag = "--" + name.replace("_", "-")
            if kind is bool:
                sp.add_argument(flag, dest=name, nargs="?", const=True, type=_bool,
                                default=argparse.SUPPRESS, help=help_text)
            else:
                sp.add_argument(flag, dest=name, type=kind, default=argparse.SUPPRESS,
                                help=f"{help_text} (default {default})")
    rp = top.add_parser("replay", help="re-execute a saved manifest")
    rp.add_argument("manifest")
    rp.add_argument("--out", default=None, help="output directory (default: a fresh sibling)")
    rp.set_defaults(command="replay")
    return parser


def resolve_config(command: str, explicit: dict, config_file: Optional[str]) -> dict:
    flags = SUBCOMMANDS[command]
    resolved = {name: spec[0] for name, spec in flags.items()}
    if config_file:
        try:
            doc = json.loads(Path(config_file).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_file}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(doc) - set(flags))
        if unknown:
            raise ConfigError(f"unknown config keys for '{command}': {', '.join(unknown)}")
        resolved.update(doc)
    resolved.update(explicit)
    return {name: _coerce(name, resolved[name], flags[name][1]) for name in flags}


# ---------------------------------------------------------------------------
# builders from resolved config
# ---------------------------------------------------------------------------


def _gmm_spec(cfg) -> GaussianMixtureSpec:
    theta = np.asarray(_floats(cfg["theta"]))
    sig = _floats(cfg["sigma"])
    d = theta.size
    if len(sig) == 1:
        sigma = sig[0] * np.eye(d)
    elif len(sig) == d * d:
        sigma = np.asarray(sig).reshape(d, d)
    else:
        raise ConfigError(f"sigma needs 1 or {d * d} entries, got {len(sig)}")
    return GaussianMixtureSpec(theta, sigma)


def _budget(cfg) -> PerturbationBudget:
    box = tuple(_floats(cfg["box"])) if cfg.get("box") else None
    return PerturbationBudget(p=cfg["p"], epsilon=cfg["eps"], domain_box=box)


def _attack(cfg) -> AttackConfig:
    return AttackConfig(steps=cfg["attack_steps"], step_size=cfg["attack_step_size"], budget=_budget(cfg))


def _estimator(cfg) -> EstimatorConfig:
    return EstimatorConfig(
        epochs=cfg["epochs"],
        step_size=cfg["critic_step_size"],
        batch_size=cfg["batch_size"],
        negatives=cfg["negatives"],
        test_batches=cfg["test_batches"],
        hidden=_ints(cfg["hidden"]),
        seed=derive_seed(cfg["seed"], "estimator"),
    )


def _dataset(cfg):
    source = cfg["dataset"]
    if source == "synthetic_gmm":
        spec = _gmm_spec(cfg)
        ds = DatasetSpec(source=source, theta_star=spec.theta_star.tolist(),
                         sigma_star=spec.sigma_star.tolist(), n=cfg["n"],
                         normalization=cfg["normalization"])
    elif source == "idx_files":
        ds = DatasetSpec(source=source, images=cfg["images"], labels=cfg["labels"], take=cfg["take"],
                         downsample=cfg["downsample"], normalization=cfg["normalization"])
    else:
        ds = DatasetSpec(source=source, path=cfg["csv"], label_column=cfg["label_column"],
                         take=cfg["take"], normalization=cfg["normalization"])
    batch = load_dataset(ds, seeded_rng(derive_seed(cfg["seed"], "dataset")))
    n_train = cfg["train_size"] if cfg["train_size"] is not None else (2 * len(batch)) // 3
    if not 0 < n_train < len(batch):
        raise ConfigError(f"train_size {n_train} must leave rows for both splits of {len(batch)}")
    return ds, batch.split(n_train)


def _encoder(cfg, dim: int) -> Network:
    if cfg.get("encoder"):
        return load_network(cfg["encoder"])
    if "feature_w" in cfg:
        w = _floats(cfg["feature_w"])
        if len(w) != dim:
            raise ConfigError(f"feature_w has {len(w)} entries for {dim}-dimensional data")
        return linear_feature(w, gain=cfg["feature_gain"], squash="tanh")
    from .diffnet import identity_network

    return identity_network(dim)


def _class_labels(batch: SampleBatch, classes: Optional[int]):
    if batch.labels is None:
        raise ConfigError("this subcommand needs labeled data")
    y = batch.labels
    if np.all(np.isin(y, (-1, 1))) and np.any(y == -1):
        y = signed_to_index(y)
    k = classes if classes is not None else int(y.max()) + 1
    return SampleBatch(batch.rows, class_indices(y, max(k, 2))), max(k, 2)


# ---------------------------------------------------------------------------
# subcommands; each returns (result dict, optional history rows)
# ---------------------------------------------------------------------------


def cmd_gmm_analyze(cfg, out: Path):
    spec, feat = _gmm_spec(cfg), LinearSignFeature(_floats(cfg["w"]))
    budget = PerturbationBudget(p=cfg["p"], epsilon=cfg["eps"])
    rep = analyze(spec, feat, budget).to_dict()
    rep["sandwich"] = theorem32_sandwich(spec, feat, budget)
    return rep, None


def cmd_gmm_verify(cfg, out: Path):
    spec, feat = _gmm_spec(cfg), LinearSignFeature(_floats(cfg["w"]))
    budget = PerturbationBudget(p=cfg["p"], epsilon=cfg["eps"])
    return mc_verify(spec, feat, budget, cfg["n"], seeded_rng(derive_seed(cfg["seed"], "gmm-verify"))), None


def cmd_mi_estimate(cfg, out: Path):
    _, (train, test) = _dataset(cfg)
    res = estimate_worst_case_mi(train, test, _encoder(cfg, train.dim), _estimator(cfg), _attack(cfg))
    save_network(res.critic, out / "critic.json", seed=cfg["seed"])
    result = {"value": res.value, "test_values": res.test_values, "best_epoch": res.best_epoch,
              "worst_case": _attack(cfg).active}
    return result, [{"epoch": i, "J": v} for i, v in enumerate(res.history)]


def cmd_rv_estimate(cfg, out: Path):
    _, (train, test) = _dataset(cfg)
    enc = _encoder(cfg, train.dim)
    if cfg["per_feature"]:
        reports = estimate_rv_per_feature(train, test, enc, _estimator(cfg), _attack(cfg))
    else:
        reports = [estimate_rv(train, test, enc, _estimator(cfg), _attack(cfg))]
    history = [
        {"feature": r.feature if r.feature is not None else 0, "epoch": i, "J1": a, "J2": b}
        for r in reports for i, (a, b) in enumerate(zip(r.history_j1, r.history_j2))
    ]
    result = {"reports": [
        {k: v for k, v in r.to_dict().items() if k not in ("history_j1", "history_j2")} for r in reports
    ]}
    return result, history


def cmd_repr_train(cfg, out: Path):
    _, (train, _test) = _dataset(cfg)
    est = _estimator(cfg)
    config = TrainPrincipleConfig(
        objective=cfg["objective"], beta=cfg["beta"], encoder_sizes=_ints(cfg["encoder_sizes"]),
        critic=est, attack=_attack(cfg), critic_steps=cfg["critic_steps"],
        encoder_steps=cfg["encoder_steps"], encoder_step_size=cfg["encoder_step_size"],
        seed=derive_seed(cfg["seed"], "repr-train"),
    )
    enc, entries = train_encoder(train.without_labels(), config)
    save_network(enc, out / "encoder.json", seed=cfg["seed"], config=config.to_dict())
    enc_values = [e.value for e in entries if e.phase == "encoder"]
    result = {"encoder_file": "encoder.json", "final_J": enc_values[-1] if enc_values else None,
              "n_params": enc.n_params, "config": config.to_dict()}
    return result, [{"step": e.step, "J": e.value, "phase": e.phase} for e in entries]


def cmd_clf_train(cfg, out: Path):
    _, (train, test) = _dataset(cfg)
    train, k = _class_labels(train, cfg["classes"])
    test, _ = _class_labels(test, k)
    enc = _encoder({"encoder": cfg["encoder"]}, train.dim)
    attack = _attack(cfg)
    tv = label_tv_from_uniform(train.labels, k)
    head = train_head(
        enc, train, k, kind=cfg["head"], mode=cfg["mode"], attack=attack, epochs=cfg["clf_epochs"],
        step_size=cfg["clf_step_size"], batch_size=cfg["batch_size"],
        seed=derive_seed(cfg["seed"], "clf-train"), early_stopping=cfg["early_stopping"],
        eval_data=test if cfg["early_stopping"] else None,
    )
    save_network(head.net, out / "head.json", seed=cfg["seed"],
                 config={"kind": head.kind, "num_classes": k, "mode": head.meta["mode"]})
    result = {
        "head_file": "head.json",
        "train": evaluate(enc, head, train, attack).to_dict(),
        "test": evaluate(enc, head, test, attack).to_dict(),
        "label_tv_from_uniform": tv,
        "early_stopping": head.meta.get("early_stopping"),
    }
    return result, head.meta["history"]


def _load_head(path, k: Optional[int]) -> ClassifierHead:
    doc = json.loads(Path(path).read_text())
    net = load_network(path)
    meta = doc.get("config") or {}
    return ClassifierHead(net, meta.get("kind", "linear"), meta.get("num_classes", net.output_dim))


def cmd_eval(cfg, out: Path):
    if not cfg["head_file"]:
        raise ConfigError("eval needs --head-file")
    _, (_train, test) = _dataset(cfg)
    head = _load_head(cfg["head_file"], None)
    test, k = _class_labels(test, head.num_classes)
    enc = _encoder({"encoder": cfg["encoder"]}, test.dim)
    rep = evaluate(enc, head, test, _attack(cfg)).to_dict()
    rep["label_tv_from_uniform"] = label_tv_from_uniform(test.labels, k)
    return rep, None


def cmd_bound(cfg, out: Path):
    if cfg["mi_worst"] is None or cfg["classes"] is None:
        raise ConfigError("bound needs --mi-worst and --classes")
    risk, acc = fano_bound(cfg["mi_worst"], cfg["classes"])
    return {"mi_worst": cfg["mi_worst"], "classes": cfg["classes"],
            "min_adv_risk": risk, "max_adv_accuracy": acc}, None


def _write_pgm(path: Path, values: np.ndarray) -> None:
    # ASCII greymap of |gradient| scaled to 0..255
    mag = np.abs(values)
    top = float(mag.max())
    scaled = np.zeros_like(mag, dtype=np.int64) if top == 0 else np.rint(255 * mag / top).astype(np.int64)
    rows, cols = scaled.shape
    lines = ["P2", f"{cols} {rows}", "255"] + [" ".join(str(v) for v in r) for r in scaled]
    path.write_text("\n".join(lines) + "\n")


def cmd_saliency(cfg, out: Path):
    _, (_train, test) = _dataset(cfg)
    enc = _encoder({"encoder": cfg["encoder"]}, test.dim)
    loss = cfg["loss"]
    if loss == "cross_entropy":
        if not cfg["head_file"]:
            raise ConfigError("cross_entropy saliency needs --head-file")
        head = _load_head(cfg["head_file"], None)
        test, _ = _class_labels(test, head.num_classes)
        nets, critic = [enc, head.net], None
    elif loss == "mi_critic":
        if not cfg["critic_file"]:
            raise ConfigError("mi_critic saliency needs --critic-file")
        nets, critic = [enc], load_network(cfg["critic_file"])
    else:
        raise ConfigError(f"unknown saliency loss {loss!r}")
    d = test.dim
    if cfg["image_shape"]:
        shape = tuple(_ints(cfg["image_shape"]))
        if len(shape) != 2 or shape[0] * shape[1] != d:
            raise ConfigError(f"image_shape {shape} does not hold {d} values")
    else:
        side = int(round(math.sqrt(d)))
        shape = (side, side) if side * side == d else (1, d)
    sal_dir = out / "saliency"
    sal_dir.mkdir(exist_ok=True)
    rows = []
    for i in range(min(cfg["count"], len(test))):
        label = None if test.labels is None or loss != "cross_entropy" else int(test.labels[i])
        g = saliency(nets, test.rows[i], loss, label=label, critic=critic)
        _write_pgm(sal_dir / f"sample_{i:04d}.pgm", g.reshape(shape))
        rows.append(g)
    with open(out / "saliency.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample"] + [f"g{j}" for j in range(d)])
        for i, g in enumerate(rows):
            writer.writerow([i] + [repr(float(v)) for v in g])
    return {"loss": loss, "count": len(rows), "image_shape": list(shape),
            "l2_norms": [float(np.linalg.norm(g)) for g in rows]}, None


def cmd_selftest(cfg, out: Path):
    return run_selftest(), None


HANDLERS: Dict[str, Callable] = {
    "gmm analyze": cmd_gmm_analyze,
    "gmm verify": cmd_gmm_verify,
    "mi estimate": cmd_mi_estimate,
    "rv estimate": cmd_rv_estimate,
    "repr train": cmd_repr_train,
    "clf train": cmd_clf_train,
    "eval": cmd_eval,
    "bound": cmd_bound,
    "saliency": cmd_saliency,
    "selftest": cmd_selftest,
}

# Small invocations of every subcommand; replaying each manifest must
# reproduce its result.json exactly. Entries may reference files written
# by earlier entries via "{prev:<name>}/<file>".
SELFTEST_MATRIX: List[dict] = [
    {"name": "gmm_analyze", "argv": ["gmm", "analyze"]},
    {"name": "gmm_verify", "argv": ["gmm", "verify", "--n", "20000"]},
    {"name": "mi_estimate", "argv": ["mi", "estimate", "--n", "600", "--epochs", "20", "--test-batches", "2"]},
    {"name": "rv_estimate", "argv": ["rv", "estimate", "--n", "600", "--epochs", "10", "--test-batches", "2",
                                     "--eps", "0.5", "--attack-steps", "3"]},
    {"name": "repr_train", "argv": ["repr", "train", "--n", "600", "--encoder-steps", "5", "--eps", "0.3",
                                    "--attack-steps", "2"]},
    {"name": "clf_train", "argv": ["clf", "train", "--n", "600", "--encoder", "{prev:repr_train}/encoder.json",
                                   "--mode", "adversarial", "--eps", "0.3", "--p", "inf", "--attack-steps", "3",
                                   "--clf-epochs", "3"]},
    {"name": "eval", "argv": ["eval", "--n", "600", "--encoder", "{prev:repr_train}/encoder.json",
                              "--head-file", "{prev:clf_train}/head.json", "--eps", "0.3", "--p", "inf"]},
    {"name": "bound", "argv": ["bound", "--mi-worst", "1.08", "--classes", "10"]},
    {"name": "saliency", "argv": ["saliency", "--n", "600", "--encoder", "{prev:repr_train}/encoder.json",
                                  "--head-file", "{prev:clf_train}/head.json", "--count", "2"]},
    {"name": "selftest", "argv": ["selftest"]},
]


def matrix_argv(entry: dict, root) -> List[str]:
    """Command line of a SELFTEST_MATRIX entry, writing under ``root``."""
    argv = []
    for arg in entry["argv"]:
        if arg.startswith("{prev:"):
            name, rest = arg[len("{prev:"):].split("}", 1)
            arg = str(Path(root) / name) + rest
        argv.append(arg)
    return argv + ["--out", str(Path(root) / entry["name"])]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        # JSON has no inf/nan; encode them as strings
        return v if math.isfinite(v) else repr(v)
    return obj


def dump_json(obj, path: Path) -> None:
    # float repr is the shortest string that round-trips exactly
    path.write_text(json.dumps(_jsonable(obj), indent=1, sort_keys=True) + "\n")


@contextmanager
def output_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise ConfigError(f"output directory {out} is locked by another run ({lock})") from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _write_history(rows, path: Path) -> None:
    if not rows:
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def execute(command: str, cfg: dict) -> int:
    out = Path(cfg["out"])
    started = datetime.now(timezone.utc).isoformat()
    with output_lock(out):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            result, history = HANDLERS[command](cfg, out)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        doc = {"command": command, "result": result, "warnings": [str(w.message) for w in caught]}
        dump_json(doc, out / "result.json")
        _write_history(history, out / "history.csv")
        manifest = {
            "tool": "wcmi",
            "version": __version__,
            "command": command,
            "config": cfg,
            "master_seed": cfg["seed"],
            "seed_rule": SEED_RULE,
            "rng_algorithm": RNG_ALGORITHM,
            "stage_seeds": {
                s: derive_seed(cfg["seed"], s)
                for s in ("dataset", "estimator", "gmm-verify", "repr-train", "clf-train")
            },
            "started": started,
            "finished": datetime.now(timezone.utc).isoformat(),
        }
        dump_json(manifest, out / "manifest.json")
    if command == "selftest" and not result["passed"]:
        return EXIT_SELFTEST
    return EXIT_OK


def replay(manifest_path: str, out: Optional[str]) -> int:
    manifest = json.loads(Path(manifest_path).read_text())
    command = manifest["command"]
    if command not in HANDLERS:
        raise ConfigError(f"manifest names unknown command {command!r}")
    cfg = resolve_config(command, manifest["config"], None)
    cfg["out"] = out or str(Path(cfg["out"]).with_name(Path(cfg["out"]).name + "-replay"))
    return execute(command, cfg)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.command == "replay":
            return replay(args.manifest, args.out)
        explicit = {k: v for k, v in vars(args).items() if k not in ("group", "action", "command", "config")}
        cfg = resolve_config(args.command, explicit, args.config)
        return execute(args.command, cfg)
    except (ConfigError, DataFormatError, FileNotFoundError) as exc:
        print(f"wcmi: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EstimationError, ArithmeticError, FloatingPointError) as exc:
        print(f"wcmi: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"wcmi: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
