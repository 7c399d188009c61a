"""Experiment configuration: YAML/JSON document, schema-checked, defaults filled in."""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import yaml

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "parse_config", "load_section",
           "SCHEMA", "OUTPUT_DIR_ENV"]

OUTPUT_DIR_ENV = "MMDFW_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_int = {"type": "integer"}
_posint = {"type": "integer", "minimum": 1}
_vec = {"type": "array", "items": _num, "minItems": 1}
_mat = {"type": "array", "items": _vec, "minItems": 1}
_box = {"type": "array", "items": {"anyOf": [_num, _vec]}, "minItems": 2, "maxItems": 2}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


KERNEL_SCHEMA = _obj({
    "type": {"enum": ["rbf", "imq", "invlog", "imq-score", "rff"]},
    "bandwidth": {"anyOf": [_pos, {"const": "median"}]},
    "alpha": _pos,
    "beta": _num,
    "num_features": _posint,
    "seed": _int,
    "sampler": {"enum": ["qmc", "mc"]},
}, required=["type"])

TARGET_SCHEMA = _obj({
    "family": {"enum": ["gaussian", "gmm", "logreg", "bnn"]},
    "mean": _vec,
    "cov": _mat,
    "preset": {"enum": ["toy11"]},
    "std": _pos,
    "components": {"type": "array", "minItems": 1, "items": _obj(
        {"weight": _pos, "mean": _vec, "cov": _mat}, required=["weight", "mean", "cov"])},
    "data": _obj({
        "path": {"type": "string"},
        "synthetic": _obj({"n": _posint, "d": _posint, "seed": _int, "bias": {"type": "boolean"},
                           "weight_scale": _pos, "noise": _pos}),
        "test_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "split_seed": _int,
    }),
    "bias": {"type": "boolean"},
    "hidden": {"type": "integer", "minimum": 1, "maximum": 8},
}, required=["family"])

ADAM_PROPS = {"lr": _pos, "beta1": _num, "beta2": _num, "eps": _pos}

HMC_SCHEMA = _obj({
    "step_size": _pos, "leapfrog_steps": _posint, "n_samples": _posint,
    "burn_in": {"type": "integer", "minimum": 0}, "thinning": _posint, "seed": _int,
    "tune": {"type": "boolean"}, "map_steps": _posint,
})

SCHEMA = _obj({
    "seed": _int,
    "target": TARGET_SCHEMA,
    "kernel": KERNEL_SCHEMA,
    "method": _obj({
        "name": {"enum": ["mmd-fw", "cache-mmd-fw", "svgd", "stein-points", "herding"]},
        "n_particles": _posint,
        "step_rule": {"enum": ["empirical-bq", "constant", "line-search"]},
        "lmo": _obj({**ADAM_PROPS, "inner_iterations": _posint, "restarts": _posint,
                     "init_policy": {"enum": ["fitted", "prior", "box"]}, "box": _box}),
        "map_steps": _posint,
        "blocks": {"type": "array", "items": {"type": "array", "items": _int, "minItems": 1}, "minItems": 1},
        "median_log_scaling": {"type": "boolean"},
        "svgd": _obj({**ADAM_PROPS, "iterations": {"type": "integer", "minimum": 0},
                      "n_particles": _posint, "record_every": _posint}),
        "stein_points": _obj({"n_candidates": _posint, "proposal_scale": _pos, "box": _box,
                              "map_iterations": _posint, "max_redraws": _posint}),
        "herding": _obj({"pool_size": _posint, "rule": {"enum": ["printed", "mmd"]}}),
    }, required=["name", "n_particles"]),
    "reference": _obj({
        "source": {"enum": ["hmc", "exact", "file"]},
        "path": {"type": "string"},
        "n_samples": _posint,
        "seed": _int,
        "hmc": HMC_SCHEMA,
    }, required=["source"]),
    "evaluation": _obj({
        "kernel": KERNEL_SCHEMA,
        "ksd": {"type": "boolean"},
        "theorem1": {"type": "boolean"},
        "test_metric": {"enum": ["accuracy", "rmse", "log-likelihood"]},
    }),
    "output": _obj({
        "results": {"type": "string"},
        "particles": {"type": "string"},
        "reference": {"type": "string"},
        "wallclock": {"type": "boolean"},
    }, required=["results"]),
}, required=["target", "kernel", "method", "output"])

# keys each target family may use, beyond "family"
_FAMILY_KEYS = {
    "gaussian": {"mean", "cov"},
    "gmm": {"preset", "std", "components"},
    "logreg": {"data", "bias"},
    "bnn": {"data", "hidden"},
}
_KERNEL_KEYS = {
    "rbf": {"bandwidth"},
    "imq": {"alpha", "beta"},
    "invlog": {"alpha"},
    "imq-score": {"alpha", "beta"},
    "rff": {"bandwidth", "num_features", "seed", "sampler"},
}


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    base_dir: Path

    @property
    def seed(self):
        return int(self.raw.get("seed", 0))

    @property
    def target(self):
        return self.raw["target"]

    @property
    def kernel(self):
        return self.raw["kernel"]

    @property
    def method(self):
        return self.raw["method"]

    @property
    def reference(self):
        return self.raw.get("reference")

    @property
    def evaluation(self):
        return self.raw.get("evaluation", {})

    @property
    def output(self):
        return self.raw["output"]

    def resolve(self, path):
        """Data paths are relative to the config file."""
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def output_path(self, key):
        """Output paths are relative to $MMDFW_OUTPUT_DIR if set, else to the config file."""
        value = self.output.get(key)
        if value is None:
            return None
        p = Path(value)
        if p.is_absolute():
            return p
        root = os.environ.get(OUTPUT_DIR_ENV)
        return (Path(root) if root else self.base_dir) / p


def _check_kernel(k, where):
    allowed = _KERNEL_KEYS[k["type"]]
    extra = set(k) - allowed - {"type"}
    if extra:
        raise ConfigError(f"{where}: keys {sorted(extra)} do not apply to kernel type {k['type']!r}")
    if k["type"] == "rff" and "bandwidth" not in k:
        raise ConfigError(f"{where}: rff kernel needs a bandwidth")
    if k["type"] == "rff" and k.get("bandwidth") == "median":
        raise ConfigError(f"{where}: rff bandwidth must be a number")


def _check_semantics(raw):
    t = raw["target"]
    extra = set(t) - _FAMILY_KEYS[t["family"]] - {"family"}
    if extra:
        raise ConfigError(f"target: keys {sorted(extra)} do not apply to family {t['family']!r}")
    if t["family"] == "gaussian" and "mean" not in t:
        raise ConfigError("target: gaussian needs a mean")
    if t["family"] == "gmm" and ("preset" in t) == ("components" in t):
        raise ConfigError("target: gmm needs exactly one of preset or components")
    if t["family"] in ("logreg", "bnn"):
        data = t.get("data", {})
        if ("path" in data) == ("synthetic" in data):
            raise ConfigError("target.data: give exactly one of path or synthetic")
    _check_kernel(raw["kernel"], "kernel")
    if "kernel" in raw.get("evaluation", {}):
        _check_kernel(raw["evaluation"]["kernel"], "evaluation.kernel")
        if raw["evaluation"]["kernel"].get("bandwidth") == "median":
            raise ConfigError("evaluation.kernel: bandwidth must be a number")
    m = raw["method"]
    if m["name"] in ("svgd", "stein-points", "herding") and "step_rule" in m:
        raise ConfigError(f"method: step_rule does not apply to {m['name']}")
    if m.get("blocks") is not None and m["name"] != "mmd-fw":
        raise ConfigError("method: blocks only apply to mmd-fw")
    if m.get("lmo", {}).get("init_policy") == "box" and "box" not in m["lmo"]:
        raise ConfigError("method.lmo: init_policy box needs a box")
    if raw["kernel"].get("bandwidth") == "median" and m["name"] in ("herding", "stein-points"):
        raise ConfigError(f"method: {m['name']} needs a fixed kernel bandwidth")
    ref = raw.get("reference")
    if ref is not None:
        if ref["source"] == "file" and "path" not in ref:
            raise ConfigError("reference: source file needs a path")
        if ref["source"] == "exact" and t["family"] not in ("gaussian", "gmm"):
            raise ConfigError("reference: exact sampling only exists for gaussian and gmm targets")
        if ref["source"] != "hmc" and "hmc" in ref:
            raise ConfigError("reference: hmc settings given but source is not hmc")
    if m["name"] == "herding" and ref is None:
        raise ConfigError("method: herding draws its pool from the reference section")
    metric = raw.get("evaluation", {}).get("test_metric")
    if metric == "accuracy" and t["family"] != "logreg":
        raise ConfigError("evaluation: accuracy needs a logreg target")
    if metric in ("rmse", "log-likelihood") and t["family"] != "bnn":
        raise ConfigError(f"evaluation: {metric} needs a bnn target")


def _validate(raw, schema, where):
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        loc = ".".join(str(p) for p in e.absolute_path) or where
        raise ConfigError(f"{loc}: {e.message}")


def parse_config(raw, base_dir="."):
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    raw = copy.deepcopy(raw)
    _validate(raw, SCHEMA, "config")
    _check_semantics(raw)
    return ExperimentConfig(raw, Path(base_dir))


def _read(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON ({exc})") from None


def load_config(path):
    path = Path(path)
    return parse_config(_read(path), path.parent)


def load_section(path, name):
    """Read a standalone section (kernel, target, hmc) from its own file.

    The file may hold the section bare or nested under ``name``.
    """
    raw = _read(path)
    if isinstance(raw, dict) and set(raw) == {name}:
        raw = raw[name]
    schema = {"kernel": KERNEL_SCHEMA, "target": TARGET_SCHEMA, "hmc": HMC_SCHEMA}[name]
    _validate(raw, schema, name)
    if name == "kernel":
        _check_kernel(raw, "kernel")
    if name == "target":
        extra = set(raw) - _FAMILY_KEYS[raw["family"]] - {"family"}
        if extra:
            raise ConfigError(f"target: keys {sorted(extra)} do not apply to family {raw['family']!r}")
    return raw, Path(path).parent
