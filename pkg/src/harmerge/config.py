"""Run configuration: one JSON document with data/model/train/merge/eval
sections.  Every field has a default, unknown keys are rejected, and the
resolved document is echoed into every report for provenance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Mapping

from .data import DomainSpec
from .errors import ConfigError
from .merge import STRATEGIES
from .model import EncoderConfig
from .train import HarmonyConfig

SWEEP_PARAMETERS = ("lambda", "r", "beta", "logit_scale")


def _default_domains() -> list[dict]:
    # The fixed 4-domain benchmark: three progressively rotated clean domains
    # and one strongly shifted domain with 30% label noise.
    return [
        {"domain_id": 0, "rotation_angle": 0.0, "scale": 1.0, "offset": 0.0,
         "feature_noise_std": 0.35, "label_noise_rate": 0.0},
        {"domain_id": 1, "rotation_angle": 1.0, "scale": 1.1, "offset": 0.8,
         "feature_noise_std": 0.35, "label_noise_rate": 0.0},
        {"domain_id": 2, "rotation_angle": 2.0, "scale": 0.9, "offset": -0.8,
         "feature_noise_std": 0.35, "label_noise_rate": 0.0},
        {"domain_id": 3, "rotation_angle": 2.9, "scale": 1.25, "offset": 1.0,
         "feature_noise_std": 0.5, "label_noise_rate": 0.3},
    ]


_DATA_DEFAULTS: dict[str, Any] = {
    "n_classes": 5,
    "input_dim": 6,
    "n_per_domain": 500,
    "seed": 123,
    "domains": None,  # filled with _default_domains()
}

_MODEL_DEFAULTS: dict[str, Any] = {
    "hidden_dims": [16, 16],
    "embed_dim": 16,
    "logit_scale": 10.0,
    "init_seed": 7,
    "proto_seed": 11,
}

_TRAIN_DEFAULTS: dict[str, Any] = {
    "lambda": 0.5,
    "sign_mode": "elementwise",
    "beta": 0.5,
    "steps": 500,
    "batch_size": 24,
    "lr": 2e-3,
    "weight_decay": 0.1,
    "trim_ratio": 0.2,
    "sae": True,
    "val_check_every": 10,
    "seed": 42,
}

_MERGE_DEFAULTS: dict[str, Any] = {
    "strategy": "rhm",
    "r": 0.2,
}

_EVAL_DEFAULTS: dict[str, Any] = {
    "seeds": [41, 42, 43],
    "strategies": ["avg", "rhm", "layer_trim", "best_model"],
    "sweep_parameter": "lambda",
    "sweep_values": [0.0, 0.1, 0.5, 1.0],
}

_DOMAIN_KEYS = {
    "domain_id", "rotation_angle", "scale", "offset",
    "feature_noise_std", "label_noise_rate",
}


def _merge_section(name: str, defaults: Mapping[str, Any], given: Mapping[str, Any]) -> dict:
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"{name}: unknown keys {sorted(unknown)}")
    out = dict(defaults)
    out.update(given)
    return out


@dataclass
class DataSection:
    n_classes: int
    input_dim: int
    n_per_domain: int
    seed: int
    domains: list[DomainSpec]

    def to_dict(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "input_dim": self.input_dim,
            "n_per_domain": self.n_per_domain,
            "seed": self.seed,
            "domains": [d.to_dict() for d in self.domains],
        }


@dataclass
class ModelSection:
    hidden_dims: list[int]
    embed_dim: int
    logit_scale: float
    init_seed: int
    proto_seed: int

    def encoder_config(self, input_dim: int) -> EncoderConfig:
        return EncoderConfig(
            input_dim=input_dim,
            embed_dim=self.embed_dim,
            hidden_dims=tuple(self.hidden_dims),
            logit_scale=self.logit_scale,
        )

    def to_dict(self) -> dict:
        return {
            "hidden_dims": list(self.hidden_dims),
            "embed_dim": self.embed_dim,
            "logit_scale": self.logit_scale,
            "init_seed": self.init_seed,
            "proto_seed": self.proto_seed,
        }


@dataclass
class MergeSection:
    strategy: str
    r: float

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "r": self.r}


@dataclass
class EvalSection:
    seeds: list[int]
    strategies: list[str]
    sweep_parameter: str
    sweep_values: list[float]

    def to_dict(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "strategies": list(self.strategies),
            "sweep_parameter": self.sweep_parameter,
            "sweep_values": list(self.sweep_values),
        }


@dataclass
class RunConfig:
    data: DataSection
    model: ModelSection
    train: HarmonyConfig
    merge: MergeSection
    eval: EvalSection

    def to_dict(self) -> dict:
        train = self.train
        return {
            "data": self.data.to_dict(),
            "model": self.model.to_dict(),
            "train": {
                "lambda": train.lam,
                "sign_mode": train.sign_mode,
                "beta": train.beta,
                "steps": train.steps,
                "batch_size": train.batch_size,
                "lr": train.lr,
                "weight_decay": train.weight_decay,
                "trim_ratio": train.trim_ratio,
                "sae": train.sae,
                "val_check_every": train.val_check_every,
                "seed": train.seed,
            },
            "merge": self.merge.to_dict(),
            "eval": self.eval.to_dict(),
        }


def _parse_domains(raw, input_dim: int) -> list[DomainSpec]:
    if raw is None:
        raw = _default_domains()
    if not isinstance(raw, list) or not raw:
        raise ConfigError("data.domains must be a non-empty list")
    specs = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, Mapping):
            raise ConfigError(f"data.domains[{i}] must be an object")
        unknown = set(entry) - _DOMAIN_KEYS
        if unknown:
            raise ConfigError(f"data.domains[{i}]: unknown keys {sorted(unknown)}")
        fields = {
            "domain_id": i,
            "rotation_angle": 0.0,
            "scale": 1.0,
            "offset": 0.0,
            "feature_noise_std": 0.3,
            "label_noise_rate": 0.0,
        }
        fields.update(entry)
        offset = fields["offset"]
        if isinstance(offset, list):
            fields["offset"] = tuple(float(v) for v in offset)
        spec = DomainSpec(**fields)
        spec.offset_vector(input_dim)  # length check happens now, not at use
        specs.append(spec)
    return specs


def resolve_config(doc: Mapping[str, Any] | None = None) -> RunConfig:
    """Apply defaults and validate a raw config mapping."""
    doc = dict(doc or {})
    unknown = set(doc) - {"data", "model", "train", "merge", "eval"}
    if unknown:
        raise ConfigError(f"unknown top-level sections {sorted(unknown)}")
    for section in ("data", "model", "train", "merge", "eval"):
        if section in doc and not isinstance(doc[section], Mapping):
            raise ConfigError(f"{section} section must be an object")

    d = _merge_section("data", _DATA_DEFAULTS, doc.get("data", {}))
    if int(d["n_classes"]) < 2:
        raise ConfigError(f"data.n_classes must be >= 2, got {d['n_classes']}")
    if int(d["input_dim"]) < 2:
        raise ConfigError(f"data.input_dim must be >= 2, got {d['input_dim']}")
    if int(d["n_per_domain"]) < int(d["n_classes"]):
        raise ConfigError("data.n_per_domain must be >= data.n_classes")
    data = DataSection(
        n_classes=int(d["n_classes"]),
        input_dim=int(d["input_dim"]),
        n_per_domain=int(d["n_per_domain"]),
        seed=int(d["seed"]),
        domains=_parse_domains(d["domains"], int(d["input_dim"])),
    )

    m = _merge_section("model", _MODEL_DEFAULTS, doc.get("model", {}))
    model = ModelSection(
        hidden_dims=[int(h) for h in m["hidden_dims"]],
        embed_dim=int(m["embed_dim"]),
        logit_scale=float(m["logit_scale"]),
        init_seed=int(m["init_seed"]),
        proto_seed=int(m["proto_seed"]),
    )
    model.encoder_config(data.input_dim)  # validates dims

    t = _merge_section("train", _TRAIN_DEFAULTS, doc.get("train", {}))
    train = HarmonyConfig(
        lam=float(t["lambda"]),
        sign_mode=str(t["sign_mode"]),
        beta=float(t["beta"]),
        steps=int(t["steps"]),
        batch_size=int(t["batch_size"]),
        lr=float(t["lr"]),
        weight_decay=float(t["weight_decay"]),
        trim_ratio=float(t["trim_ratio"]),
        sae=bool(t["sae"]),
        val_check_every=int(t["val_check_every"]),
        seed=int(t["seed"]),
    )
    train.validate()

    g = _merge_section("merge", _MERGE_DEFAULTS, doc.get("merge", {}))
    if g["strategy"] not in STRATEGIES:
        raise ConfigError(f"merge.strategy must be one of {STRATEGIES}")
    if not 0.0 <= float(g["r"]) < 1.0:
        raise ConfigError(f"merge.r must lie in [0, 1), got {g['r']}")
    merge = MergeSection(strategy=str(g["strategy"]), r=float(g["r"]))

    e = _merge_section("eval", _EVAL_DEFAULTS, doc.get("eval", {}))
    strategies = [str(s) for s in e["strategies"]]
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigError(f"eval.strategies entry {s!r} not in {STRATEGIES}")
    if e["sweep_parameter"] not in SWEEP_PARAMETERS:
        raise ConfigError(f"eval.sweep_parameter must be one of {SWEEP_PARAMETERS}")
    ev = EvalSection(
        seeds=[int(s) for s in e["seeds"]],
        strategies=strategies,
        sweep_parameter=str(e["sweep_parameter"]),
        sweep_values=[float(v) for v in e["sweep_values"]],
    )
    if not ev.seeds:
        raise ConfigError("eval.seeds must be non-empty")

    return RunConfig(data=data, model=model, train=train, merge=merge, eval=ev)


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, Mapping):
        raise ConfigError(f"{path}: top level must be an object")
    return resolve_config(doc)


def default_config() -> RunConfig:
    return resolve_config({})
