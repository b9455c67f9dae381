"""Experiment configuration: a strict key-tree schema over YAML.

Unknown keys are rejected and every violation names the offending field
path, so a config error is always attributable.  The resolved config is
hashed (canonical JSON, sha256) and echoed into the run directory, making
every run self-describing.  The only environment override honored is
RUN_DIR.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .data import SyntheticSpec
from .losses import (GAN_FEATURE_KINDS, GAN_IMAGE_KINDS, LambdaConfig,
                     PRESET_NAMES, RoutingRules, StagePlan, StageSpec, preset)
from .models import ARCH_WIDTHS, CRITIC_NORMS
from .trainer import TrainConfig


class ConfigError(Exception):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class _Section:
    """Typed accessor over one mapping level; tracks consumed keys."""

    def __init__(self, data, path):
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(path, f"expected a mapping, got {type(data).__name__}")
        self.data = data
        self.path = path
        self.seen = set()

    def _key(self, name):
        return f"{self.path}.{name}" if self.path else name

    def get(self, name, kind, default=None, required=False, choices=None, minimum=None):
        self.seen.add(name)
        if name not in self.data or self.data[name] is None:
            if required:
                raise ConfigError(self._key(name), "required field is missing")
            return default
        v = self.data[name]
        if kind is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        wrong_type = kind is not None and not isinstance(v, kind)
        bool_for_number = isinstance(v, bool) and kind is not bool
        if wrong_type or bool_for_number:
            raise ConfigError(self._key(name), f"expected {getattr(kind, '__name__', kind)}, got {v!r}")
        if choices is not None and v not in choices:
            raise ConfigError(self._key(name), f"must be one of {sorted(choices)}, got {v!r}")
        if minimum is not None and v < minimum:
            raise ConfigError(self._key(name), f"must be >= {minimum}, got {v}")
        return v

    def sub(self, name) -> "_Section":
        self.seen.add(name)
        return _Section(self.data.get(name), self._key(name))

    def reject_unknown(self):
        unknown = sorted(set(self.data) - self.seen)
        if unknown:
            raise ConfigError(self._key(unknown[0]), "unknown key")


@dataclass
class DatasetConfig:
    kind: str = "shapes_images"
    synth: Optional[SyntheticSpec] = None
    n_test: int = 500
    paths: dict = field(default_factory=dict)


@dataclass
class ModelConfig:
    architecture: str = "small"
    critic_norm: str = "none"
    seed: int = 0


@dataclass
class OutputConfig:
    run_dir: str = "runs/run"
    eval_every: int = 0
    checkpoint_every: int = 0
    grid_every: int = 0
    grid_samples: int = 32


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig
    model: ModelConfig
    lambdas: LambdaConfig
    routing: RoutingRules
    plan: StagePlan
    trainer: TrainConfig
    output: OutputConfig
    preset: Optional[str] = None

    def to_dict(self) -> dict:
        d = {
            "dataset": {"kind": self.dataset.kind, "n_test": self.dataset.n_test,
                        "paths": dict(sorted(self.dataset.paths.items()))},
            "model": dataclasses.asdict(self.model),
            "loss": dataclasses.asdict(self.lambdas),
            "routing": dataclasses.asdict(self.routing),
            "preset": self.preset,
            "plan": [{"name": s.name, "fraction": s.fraction, "actions": [list(a) for a in s.actions],
                      "lambdas": dataclasses.asdict(s.lambdas)} for s in self.plan.stages],
            "trainer": dataclasses.asdict(self.trainer),
            "output": dataclasses.asdict(self.output),
        }
        if self.dataset.synth is not None:
            d["dataset"]["synth"] = dataclasses.asdict(self.dataset.synth)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


_LAMBDA_KEYS = {
    "lambda_c": "lam_c", "lambda_z": "lam_z", "lambda_tr": "lam_tr",
    "lambda_idA": "lam_idA", "lambda_idB": "lam_idB",
    "lambda_cyc": "lam_cyc", "lambda_trc": "lam_trc",
}


def _parse_dataset(sec: _Section) -> DatasetConfig:
    kind = sec.get("kind", str, default="shapes_images",
                   choices=("shapes_images", "gaussian_2d", "idx"))
    out = DatasetConfig(kind=kind)
    out.n_test = sec.get("n_test", int, default=500, minimum=1)
    if kind == "idx":
        for key in ("source_images", "source_labels", "target_images", "target_labels"):
            out.paths[key] = sec.get(key, str, required=True)
        for key in ("source_test_images", "source_test_labels",
                    "target_test_images", "target_test_labels"):
            v = sec.get(key, str)
            if v is not None:
                out.paths[key] = v
        sec.get("subsample_train", int, minimum=1)
        if "subsample_train" in sec.data:
            out.paths["subsample_train"] = int(sec.data["subsample_train"])
        sec.reject_unknown()
        return out
    shift = sec.sub("shift")
    spec = SyntheticSpec(
        kind=kind,
        classes=sec.get("classes", int, default=5, minimum=2),
        n_source=sec.get("n_train", int, default=1000, minimum=1),
        n_target=sec.get("n_train", int, default=1000, minimum=1),
        rotation_deg=shift.get("rotation_deg", float, default=0.0),
        invert=shift.get("invert", bool, default=False),
        background_gradient=shift.get("background_gradient", float, default=0.0),
        noise_sigma=shift.get("noise_sigma", float, default=0.0, minimum=0.0),
        affine=shift.get("affine", list),
        offset=shift.get("offset", list),
        jitter=sec.get("jitter", int, default=3, minimum=0),
        seed=sec.get("seed", int, default=0),
    )
    shift.reject_unknown()
    sec.reject_unknown()
    out.synth = spec
    return out


def _parse_loss(sec: _Section) -> tuple[LambdaConfig, RoutingRules, Optional[str], StagePlan]:
    base = LambdaConfig()
    for yaml_key, attr in _LAMBDA_KEYS.items():
        v = sec.get(yaml_key, float, minimum=0.0)
        if v is not None:
            base = dataclasses.replace(base, **{attr: v})
    gi = sec.get("gan_image", str, choices=GAN_IMAGE_KINDS)
    gf = sec.get("gan_feature", str, choices=GAN_FEATURE_KINDS)
    gp = sec.get("gp_coefficient", float, minimum=0.0)
    if gi:
        base = dataclasses.replace(base, gan_image=gi)
    if gf:
        base = dataclasses.replace(base, gan_feature=gf)
    if gp is not None:
        base = dataclasses.replace(base, gp_coefficient=gp)

    rsec = sec.sub("routing")
    routing = RoutingRules(
        feature_adv_generator_side=rsec.get("feature_adv_generator_side", str,
                                            default="target_only", choices=("target_only", "both")),
        trc_stop_before_second_encode=rsec.get("trc_stop_before_second_encode", bool, default=True),
    )
    rsec.reject_unknown()

    name = sec.get("preset", str, choices=PRESET_NAMES)
    explicit = {_LAMBDA_KEYS[k] for k in _LAMBDA_KEYS if sec.data.get(k) is not None}
    if name:
        cfg, plan = preset(name, base)
        # explicit lambda keys win over the preset pattern
        if explicit:
            cfg = dataclasses.replace(cfg, **{a: getattr(base, a) for a in explicit})
            plan = StagePlan([
                StageSpec(s.name, s.fraction,
                          dataclasses.replace(s.lambdas, **{a: getattr(base, a) for a in explicit
                                                            if getattr(s.lambdas, a) > 0 or name != "adda"}),
                          s.actions)
                for s in plan.stages])
    else:
        cfg = base
        plan = StagePlan([StageSpec("joint", 1.0, cfg)])
    cfg.validate()
    sec.reject_unknown()
    return cfg, routing, name, plan


def parse_config(data: dict) -> ExperimentConfig:
    root = _Section(data, "")
    dataset = _parse_dataset(root.sub("dataset"))

    msec = root.sub("model")
    model = ModelConfig(
        architecture=msec.get("architecture", str, default="small",
                              choices=tuple(ARCH_WIDTHS) + ("mlp",)),
        critic_norm=msec.get("critic_norm", str, default="none", choices=CRITIC_NORMS),
        seed=msec.get("seed", int, default=0),
    )
    msec.reject_unknown()

    lambdas, routing, preset_name, plan = _parse_loss(root.sub("loss"))

    tsec = root.sub("trainer")
    trainer = TrainConfig(
        learning_rate=tsec.get("learning_rate", float, default=2e-4),
        adam_beta1=tsec.get("adam_beta1", float, default=0.5),
        adam_beta2=tsec.get("adam_beta2", float, default=0.999),
        batch_size=tsec.get("batch_size", int, default=64, minimum=1),
        total_steps=tsec.get("total_steps", int, default=1000, minimum=0),
        n_critic=tsec.get("n_critic", int, default=1, minimum=1),
        seed=tsec.get("seed", int, default=0),
        grad_clip=tsec.get("grad_clip", float, minimum=0.0),
    )
    tsec.reject_unknown()
    try:
        trainer.validate()
    except ValueError as e:
        raise ConfigError("trainer", str(e)) from None

    osec = root.sub("output")
    configured_dir = osec.get("run_dir", str, default="runs/run")
    output = OutputConfig(
        run_dir=os.environ.get("RUN_DIR") or configured_dir,
        eval_every=osec.get("eval_every", int, default=0, minimum=0),
        checkpoint_every=osec.get("checkpoint_every", int, default=0, minimum=0),
        grid_every=osec.get("grid_every", int, default=0, minimum=0),
        grid_samples=osec.get("grid_samples", int, default=32, minimum=1),
    )
    osec.reject_unknown()
    root.reject_unknown()

    if model.critic_norm == "instance" and lambdas.gan_image == "wasserstein_gp":
        raise ConfigError("model.critic_norm",
                          "instance normalization in the critics forbids gan_image=wasserstein_gp")
    if model.architecture == "mlp" and dataset.kind == "shapes_images":
        raise ConfigError("model.architecture", "mlp architecture needs a gaussian_2d dataset")
    if model.architecture != "mlp" and dataset.kind == "gaussian_2d":
        raise ConfigError("model.architecture", "gaussian_2d data needs the mlp architecture")

    return ExperimentConfig(dataset=dataset, model=model, lambdas=lambdas, routing=routing,
                            plan=plan, trainer=trainer, output=output, preset=preset_name)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("config", f"no such file: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError("config", f"YAML parse error: {e}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be a mapping")
    return parse_config(data)


def parse_dataset_config(path) -> DatasetConfig:
    """A standalone dataset block for the eval/translate commands."""
    from .data import DataError
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such dataset file: {path}")
    data = yaml.safe_load(path.read_text()) or {}
    if "dataset" in data and isinstance(data, dict) and set(data) >= {"dataset"}:
        data = data["dataset"]
    return _parse_dataset(_Section(data, "dataset"))


def echo_config(cfg: ExperimentConfig, path) -> None:
    doc = cfg.to_dict()
    doc["config_hash"] = cfg.config_hash()
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=True))
