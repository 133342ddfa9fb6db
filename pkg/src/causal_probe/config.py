"""YAML run configuration with strict schema checking.

Every section is optional except ``data``, whose ``source`` key is required.
Unknown keys and type mismatches raise :class:`ConfigError` naming the key
and its line in the file. The resolved config (all defaults filled in) is
what gets written to the run manifest, and re-parsing that manifest yields
an equal config.
"""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .errors import ConfigError, OutputError

_REQUIRED = object()

# section -> key -> (allowed types, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "data": {
        "source": ((str,), _REQUIRED),
        "kind": ((str,), "bars"),
        "n_train": ((int,), 2000),
        "n_test": ((int,), 500),
        "size": ((int,), 8),
        "width": ((int,), 2),
        "num_classes": ((int,), 2),
        "train_images": ((str, type(None)), None),
        "train_labels": ((str, type(None)), None),
        "test_images": ((str, type(None)), None),
        "test_labels": ((str, type(None)), None),
    },
    "model": {
        "preset": ((str,), "bars"),
        "lr": ((float,), 1e-3),
        "epochs": ((int,), 3),
        "batch_size": ((int,), 50),
        "checkpoint": ((str, type(None)), None),
    },
    "autoencoder": {
        "level": ((int,), 2),
        "bottleneck_channels": ((int,), 4),
        "lambdas": ((list,), [1.0, 1.0, 0.1]),
        "lr": ((float,), 1e-3),
        "epochs": ((int,), 3),
        "batch_size": ((int,), 50),
        "checkpoint": ((str, type(None)), None),
    },
    "causal": {
        "targets": ((list, str), "all"),
        "conditions": ((list,), ["Z0", "PWM", "FGSM"]),
        "bins": ((int,), 8),
        "class_policy": ((str, int), "predicted"),
        "baseline": ((str,), "zero-fill"),
        "pwm_fraction": ((float,), 0.10),
        "n_eval": ((int,), 500),
    },
    "attack": {
        "kind": ((str,), "FGSM"),
        "epsilon": ((float,), 0.3),
        "steps": ((int,), 10),
        "step_size": ((float, type(None)), None),
        "theta": ((float,), 1.0),
        "gamma": ((float,), 0.1),
        "n": ((int,), 100),
    },
    "cem": {
        "patch": ((int,), 4),
        "stride": ((int,), 2),
        "n_images": ((int,), 4),
        "class_policy": ((str, int), "predicted"),
        "fill": ((float,), 0.0),
    },
    "output": {
        "dir": ((str,), "runs/default"),
    },
}
TOP_LEVEL = {"seed": ((int,), 0)}


def _type_ok(value, types) -> bool:
    if isinstance(value, bool):
        return bool in types
    if float in types and isinstance(value, int):
        return True
    return isinstance(value, types)


def _coerce_float(value, types):
    # YAML 1.1 reads "1e-3" (no dot) as a string
    if float in types and isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    return value


def _type_name(types) -> str:
    return " or ".join("null" if t is type(None) else t.__name__ for t in types)


def _line_index(node, path=(), out=None) -> dict:
    """Map key paths to 1-based line numbers using the composed YAML node tree."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = path + (k.value,)
            out[key] = k.start_mark.line + 1
            _line_index(v, key, out)
    return out


def _where(lines, key, source) -> str:
    line = lines.get(key)
    name = ".".join(key)
    return f"{source}:{line}: {name}" if line else f"{source}: {name}"


def resolve(raw: dict | None, lines: dict | None = None, source: str = "<config>") -> dict:
    """Validate ``raw`` against the schema and fill defaults."""
    raw = {} if raw is None else raw
    lines = lines or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    out = {}
    for key, val in raw.items():
        if key not in SCHEMA and key not in TOP_LEVEL:
            raise ConfigError(f"{_where(lines, (key,), source)}: unknown key")
    for key, (types, default) in TOP_LEVEL.items():
        val = raw.get(key, default)
        if not _type_ok(val, types):
            raise ConfigError(f"{_where(lines, (key,), source)}: expected {_type_name(types)}, got {val!r}")
        out[key] = val
    for section, fields in SCHEMA.items():
        given = raw.get(section)
        if given is None:
            given = {}
        if not isinstance(given, dict):
            raise ConfigError(f"{_where(lines, (section,), source)}: section must be a mapping")
        resolved = {}
        for key in given:
            if key not in fields:
                raise ConfigError(f"{_where(lines, (section, key), source)}: unknown key")
        for key, (types, default) in fields.items():
            if key in given:
                val = _coerce_float(given[key], types)
                if not _type_ok(val, types):
                    raise ConfigError(f"{_where(lines, (section, key), source)}: "
                                      f"expected {_type_name(types)}, got {val!r}")
                if float in types and isinstance(val, int) and not isinstance(val, bool):
                    val = float(val)
            elif default is _REQUIRED:
                raise ConfigError(f"{_where(lines, (section,), source)}: missing required key {key!r}")
            else:
                val = copy.deepcopy(default)
            resolved[key] = val
        out[section] = resolved
    _check_semantics(out, lines, source)
    return out


def _check_semantics(cfg: dict, lines: dict, source: str) -> None:
    def fail(key, msg):
        raise ConfigError(f"{_where(lines, key, source)}: {msg}")

    d = cfg["data"]
    if d["source"] not in ("synthetic", "idx"):
        fail(("data", "source"), f"must be 'synthetic' or 'idx', got {d['source']!r}")
    if d["source"] == "idx":
        for k in ("train_images", "train_labels", "test_images", "test_labels"):
            if d[k] is None:
                fail(("data",), f"missing required key {k!r} for idx source")
    lam = cfg["autoencoder"]["lambdas"]
    if len(lam) != 3 or not all(_type_ok(v, (float,)) for v in lam):
        fail(("autoencoder", "lambdas"), f"expected three numbers, got {lam!r}")
    cfg["autoencoder"]["lambdas"] = [float(v) for v in lam]
    targets = cfg["causal"]["targets"]
    if isinstance(targets, str):
        if targets != "all":
            fail(("causal", "targets"), f"expected 'all' or a list of [level, node] pairs, got {targets!r}")
    elif not all(isinstance(t, list) and len(t) == 2 and all(_type_ok(v, (int,)) for v in t) for t in targets):
        fail(("causal", "targets"), f"expected [level, node] pairs, got {targets!r}")
    conds = cfg["causal"]["conditions"]
    allowed = ("Z0", "PWM", "FGSM", "BIM", "PGD", "JSMA")
    bad = [c for c in conds if c not in allowed]
    if bad or not conds:
        fail(("causal", "conditions"), f"expected a nonempty list from {allowed}, got {conds!r}")
    policy = cfg["causal"]["class_policy"]
    if isinstance(policy, str) and policy != "predicted":
        fail(("causal", "class_policy"), f"expected 'predicted' or a class index, got {policy!r}")


def parse_config(path) -> dict:
    """Read, validate and resolve a YAML config file."""
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    lines = _line_index(node) if node is not None else {}
    return resolve(raw, lines, str(path))


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)


def write_manifest(cfg: dict, out_dir, command: str, extra: dict | None = None) -> Path:
    """Write ``manifest.yaml``: the resolved config, with run facts as comments."""
    out_dir = Path(out_dir)
    header = [f"# command: {command}"]
    for k, v in sorted((extra or {}).items()):
        header.append(f"# {k}: {v}")
    path = out_dir / "manifest.yaml"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(header) + "\n" + dump_config(cfg))
    except OSError as exc:
        raise OutputError(f"cannot write manifest {path}: {exc}") from exc
    return path
