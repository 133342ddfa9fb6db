"""``causal-probe`` command-line entry point.

Usage::

    causal-probe <train|train-ae|ce|attack|cem|gradcheck> --config run.yaml [--out DIR] [--seed N]

Exit codes: 0 success, 2 config error, 3 contract violation, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .attacks import AttackConfig, run_attack
from .causal import PWM, Z0, AttackCondition, CEConfig, Concept, ce_report
from .cem import adversarial_sensitivity, compute_cam, compute_cem, render_heatmap
from .concept_ae import (AETrainConfig, AugmentedNetwork, build_autoencoder, load_autoencoder,
                         save_autoencoder, train_autoencoder)
from .config import parse_config, write_manifest
from .data import load_idx, synthetic_dataset
from .errors import CausalProbeError, ConfigError, ContractError, MissingArtifactError, OutputError
from .gradcheck import TOLERANCE, gradient_suite, summarize
from .nets import (PRESETS, Dense, NetworkSpec, TrainConfig, build_network, evaluate, load_network,
                   save_network, train_classifier)
from .serialize import save_container

log = logging.getLogger("causal_probe")

COMMANDS = ("train", "train-ae", "ce", "attack", "cem", "gradcheck")


# ---------------------------------------------------------------------------
# helpers


def _out_dir(cfg) -> Path:
    return Path(cfg["output"]["dir"])


def _model_path(cfg) -> Path:
    return Path(cfg["model"]["checkpoint"] or _out_dir(cfg) / "model.ckpt")


def _ae_path(cfg) -> Path:
    return Path(cfg["autoencoder"]["checkpoint"] or _out_dir(cfg) / "ae.ckpt")


def _require(path: Path, what: str, producer: str):
    if not path.is_file():
        raise MissingArtifactError(
            f"{what} not found at {path}; run `causal-probe {producer}` with the same config first "
            f"(or set the checkpoint path in the config)")
    return path


def _write_json(path: Path, obj) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc


def load_data(cfg):
    """``(train, test)`` datasets described by the ``data`` section."""
    d, seed = cfg["data"], cfg["seed"]
    if d["source"] == "synthetic":
        kw = {"size": d["size"], "num_classes": d["num_classes"], "width": d["width"]}
        try:
            train = synthetic_dataset(d["kind"], d["n_train"], seed, split="train", **kw)
            test = synthetic_dataset(d["kind"], d["n_test"], seed + 1, split="test", **kw)
        except ContractError as exc:
            raise ConfigError(f"data: {exc}") from exc
        return train, test
    for key in ("train_images", "train_labels", "test_images", "test_labels"):
        _require(Path(d[key]), f"data.{key}", "train")
    train = load_idx(d["train_images"], d["train_labels"], "train", d["num_classes"])
    test = load_idx(d["test_images"], d["test_labels"], "test", d["num_classes"])
    return train, test


def network_spec(cfg, data) -> NetworkSpec:
    preset = cfg["model"]["preset"]
    if preset not in PRESETS:
        raise ConfigError(f"model.preset: unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    spec = PRESETS[preset]() if preset != "bars" else PRESETS[preset](cfg["data"]["size"])
    if spec.num_classes != data.num_classes:
        spec = NetworkSpec(spec.layers[:-1] + (Dense(data.num_classes),), spec.input_shape, data.num_classes, spec.loss)
    if tuple(spec.input_shape) != tuple(data.images.shape[1:]):
        raise ConfigError(f"model.preset {preset!r} expects inputs {spec.input_shape}, "
                          f"data has {tuple(data.images.shape[1:])}")
    return spec


def attack_config(cfg, kind: str | None = None) -> AttackConfig:
    a = cfg["attack"]
    try:
        return AttackConfig(kind or a["kind"], a["epsilon"], a["steps"], a["step_size"], a["theta"], a["gamma"],
                            cfg["seed"])
    except ContractError as exc:
        raise ConfigError(f"attack: {exc}") from exc


def conditions(cfg) -> list:
    out = []
    for name in cfg["causal"]["conditions"]:
        if name == "Z0":
            out.append(Z0)
        elif name == "PWM":
            try:
                out.append(PWM(cfg["causal"]["pwm_fraction"], cfg["seed"]))
            except ContractError as exc:
                raise ConfigError(f"causal.pwm_fraction: {exc}") from exc
        else:
            out.append(AttackCondition(attack_config(cfg, name)))
    return out


def _load_augmented(cfg) -> AugmentedNetwork:
    host = load_network(_require(_model_path(cfg), "model checkpoint", "train"))
    ae = load_autoencoder(_require(_ae_path(cfg), "autoencoder checkpoint", "train-ae"))
    return AugmentedNetwork(host, ae)


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg) -> dict:
    train, test = load_data(cfg)
    m = cfg["model"]
    net = build_network(network_spec(cfg, train), cfg["seed"])
    tcfg = TrainConfig(lr=m["lr"], batch_size=m["batch_size"], epochs=m["epochs"], seed=cfg["seed"])
    if not 1 <= tcfg.batch_size <= len(train):
        raise ConfigError(f"model.batch_size must be in [1, {len(train)}], got {tcfg.batch_size}")
    net, history = train_classifier(net, train, tcfg, test)
    metrics = evaluate(net, test)
    save_network(net, _model_path(cfg), {"test_accuracy": metrics["accuracy"]})
    _write_json(_out_dir(cfg) / "train_metrics.json", {"epochs": history["epochs"], "test": metrics})
    log.info("test accuracy %.4f", metrics["accuracy"])
    return {"model": str(_model_path(cfg)), "test_accuracy": metrics["accuracy"]}


def cmd_train_ae(cfg) -> dict:
    host = load_network(_require(_model_path(cfg), "model checkpoint", "train"))
    train, test = load_data(cfg)
    a = cfg["autoencoder"]
    ae = build_autoencoder(host, a["level"], a["bottleneck_channels"], cfg["seed"], tuple(a["lambdas"]))
    acfg = AETrainConfig(lr=a["lr"], epochs=a["epochs"], batch_size=a["batch_size"], seed=cfg["seed"])
    ae, history = train_autoencoder(AugmentedNetwork(host, ae), train, acfg)
    host_acc = evaluate(host, test)["accuracy"]
    ins_acc = evaluate(AugmentedNetwork(host, ae), test)["accuracy"]
    save_autoencoder(ae, _ae_path(cfg), {"host_accuracy": host_acc, "inserted_accuracy": ins_acc})
    _write_json(_out_dir(cfg) / "ae_metrics.json",
                {"epochs": history["epochs"], "host_accuracy": host_acc, "inserted_accuracy": ins_acc})
    log.info("host accuracy %.4f, with autoencoder %.4f", host_acc, ins_acc)
    return {"autoencoder": str(_ae_path(cfg)), "host_accuracy": host_acc, "inserted_accuracy": ins_acc}


def cmd_ce(cfg) -> dict:
    aug = _load_augmented(cfg)
    _, test = load_data(cfg)
    c = cfg["causal"]
    data = test.head(min(c["n_eval"], len(test)))
    if c["targets"] == "all":
        targets = [Concept(aug.level, k) for k in range(aug.ae.bottleneck_channels)]
    else:
        targets = [Concept(int(lv), int(nd)) for lv, nd in c["targets"]]
    report = ce_report(aug, data, targets, conditions(cfg), CEConfig(c["bins"], c["class_policy"], c["baseline"]))
    report.metadata["seed"] = cfg["seed"]
    path = _out_dir(cfg) / "ce_table.tsv"
    try:
        report.write(path)
    except OSError as exc:
        raise OutputError(f"cannot write CE table {path}: {exc}") from exc
    log.info("wrote %d rows to %s", len(report.rows), path)
    return {"ce_table": str(path), "rows": len(report.rows)}


def cmd_attack(cfg) -> dict:
    net = load_network(_require(_model_path(cfg), "model checkpoint", "train"))
    _, test = load_data(cfg)
    data = test.head(min(cfg["attack"]["n"], len(test)))
    acfg = attack_config(cfg)
    batch = run_attack(net, data.images, data.labels, acfg)
    path = _out_dir(cfg) / "adversarial.ckpt"
    header = {"kind": "adversarial", "seed": cfg["seed"], "metadata": {"attack": batch.config}}
    tensors = {"originals": batch.originals, "adversarials": batch.adversarials,
               "success": batch.success.astype(np.float64), "labels": np.asarray(data.labels, dtype=np.float64)}
    try:
        save_container(path, tensors, header)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc
    rate = float(batch.success.mean()) if len(batch.success) else 0.0
    log.info("%s success rate %.4f, max L-inf %.4f", acfg.label, rate, float(batch.linf().max(initial=0.0)))
    return {"adversarial": str(path), "success_rate": rate}


def cmd_cem(cfg) -> dict:
    aug = _load_augmented(cfg)
    _, test = load_data(cfg)
    c = cfg["cem"]
    data = test.head(min(c["n_images"], len(test)))
    if c["class_policy"] == "predicted":
        classes = aug.probs(data.images).argmax(axis=1)
    else:
        classes = np.full(len(data), int(c["class_policy"]))
    out = _out_dir(cfg)
    written = []
    for i, (img, cls) in enumerate(zip(data.images, classes)):
        cem = compute_cem(aug, img, int(cls), c["patch"], c["stride"], c["fill"])
        cam = compute_cam(aug.host, img, int(cls))
        written.append(str(render_heatmap(cem, img, out / f"cem_{i:03d}.png")))
        written.append(str(render_heatmap(cam, img, out / f"cam_{i:03d}.png")))
    sens = adversarial_sensitivity(aug, data.images, data.labels, classes, cfg["attack"]["epsilon"],
                                   c["patch"], c["stride"])
    _write_json(out / "cem_sensitivity.json", {"epsilon": cfg["attack"]["epsilon"], **sens})
    log.info("clean vs FGSM L1: CEM %.4f, CAM %.4f", sens["cem_l1"], sens["cam_l1"])
    return {"images": written, **sens}


def cmd_gradcheck(cfg) -> dict:
    results = gradient_suite()
    worst = summarize(results)
    _write_json(_out_dir(cfg) / "gradcheck.json", {"tolerance": TOLERANCE, "worst_relative_error": worst})
    failed = sorted(k for k, v in worst.items() if not v < TOLERANCE)
    for k, v in worst.items():
        log.info("%-16s %.2e %s", k, v, "ok" if v < TOLERANCE else "FAIL")
    if failed:
        raise ContractError(f"finite-difference check failed for: {', '.join(failed)}")
    return {"primitives": len(worst), "checks": len(results)}


HANDLERS = {
    "train": cmd_train, "train-ae": cmd_train_ae, "ce": cmd_ce,
    "attack": cmd_attack, "cem": cmd_cem, "gradcheck": cmd_gradcheck,
}


# ---------------------------------------------------------------------------
# entry point


def _thread_limit():
    raw = os.environ.get("CAUSAL_PROBE_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"CAUSAL_PROBE_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="causal-probe", description="Causal probing of trained image classifiers.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="YAML run config")
    p.add_argument("--out", help="output directory (overrides output.dir)")
    p.add_argument("--seed", type=int, help="global seed (overrides seed)")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    return p


def run(command: str, cfg: dict) -> dict:
    """Execute one command against a resolved config; writes the manifest first."""
    if command not in HANDLERS:
        raise ConfigError(f"unknown command {command!r}")
    write_manifest(cfg, _out_dir(cfg), command, {"version": __version__, "kernels": kernels.BACKEND})
    with _thread_limit():
        return HANDLERS[command](cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = parse_config(args.config)
        if args.out is not None:
            cfg["output"]["dir"] = args.out
        if args.seed is not None:
            cfg["seed"] = args.seed
        summary = run(args.command, cfg)
    except CausalProbeError as exc:
        print(f"causal-probe: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"causal-probe: I/O error: {exc}", file=sys.stderr)
        return 4
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
