"""Run configuration: plain key=value text files plus command-line overrides.

Every knob is addressed by a dotted key (data.n, model.variant,
train.lambda_eff, gate.tau, ...). Unknown keys are hard errors. The fully
resolved configuration is echoed into every output directory so any run can
be reproduced from its artifacts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

from .errors import ConfigError
from .data import ALL_CLASSES, SynthMotionSpec
from .model import ToyNetConfig, default_gated
from .train import TrainConfig


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_int_list(s: str) -> tuple[int, ...]:
    s = s.strip()
    if not s:
        return ()
    return tuple(int(x) for x in s.split(","))


def _parse_str_list(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _parse_blocks(s: str) -> tuple[tuple[int, int, int], ...]:
    """in:out:stride triples separated by commas, e.g. 16:16:1,16:32:2."""
    blocks = []
    for part in s.split(","):
        fields = part.strip().split(":")
        if len(fields) != 3:
            raise ConfigError(f"block spec {part!r} is not in:out:stride")
        blocks.append(tuple(int(f) for f in fields))
    return tuple(blocks)


def _parse_floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(","))


@dataclass
class _Key:
    parse: Callable[[str], Any]
    default: Any
    help: str


REGISTRY: dict[str, _Key] = {
    # dataset
    "data.n": _Key(int, 2000, "number of samples"),
    "data.frames": _Key(int, 8, "frames per clip (T)"),
    "data.height": _Key(int, 32, "frame height"),
    "data.width": _Key(int, 32, "frame width"),
    "data.classes": _Key(_parse_str_list, tuple(ALL_CLASSES), "motion classes"),
    "data.noise_std": _Key(float, 0.02, "gaussian pixel noise"),
    "data.seed": _Key(int, 0, "generation seed"),
    # network
    "model.stem_channels": _Key(int, 16, "stem output channels"),
    "model.blocks": _Key(_parse_blocks,
                         ((16, 16, 1), (16, 32, 2), (32, 32, 1), (32, 64, 2)),
                         "residual blocks as in:out:stride triples"),
    "model.gated": _Key(str, "auto", "auto|none|all|last or comma bools"),
    "model.variant": _Key(str, "plain", "plain|shift|shift-last"),
    "model.shift_fraction": _Key(float, 0.125, "channel fraction shifted each way"),
    "model.seed": _Key(int, 0, "weight init seed"),
    # gate
    "gate.tau": _Key(float, 0.67, "gumbel-softmax temperature"),
    "gate.hidden_units": _Key(int, 64, "policy network hidden width"),
    # training
    "train.lambda_eff": _Key(float, 0.1, "efficiency loss weight"),
    "train.lr": _Key(float, 0.01, "initial learning rate"),
    "train.momentum": _Key(float, 0.9, "sgd momentum"),
    "train.epochs": _Key(int, 30, "training epochs"),
    "train.lr_decay_epochs": _Key(_parse_int_list, (15, 25), "decay milestones"),
    "train.lr_decay_factor": _Key(float, 0.1, "decay multiplier"),
    "train.batch_size": _Key(int, 32, "clips per step"),
    "train.seed": _Key(int, 0, "shuffle/sampling seed"),
    "train.warmup_epochs": _Key(int, 0, "epochs before the efficiency term"),
    "train.grad_clip": _Key(float, 10.0, "global gradient-norm clip"),
    "train.cost_units": _Key(str, "normalized", "normalized|raw efficiency term"),
}


class RunConfig:
    """Resolved dotted-key configuration with typed accessors."""

    def __init__(self, values: dict[str, Any]):
        self.values = values

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def echo(self) -> str:
        """Canonical key=value text, re-parseable by from_sources."""
        lines = []
        for key in sorted(self.values):
            val = self.values[key]
            if isinstance(val, tuple) and val and isinstance(val[0], tuple):
                txt = ",".join(":".join(str(x) for x in b) for b in val)
            elif isinstance(val, tuple):
                txt = ",".join(str(x) for x in val)
            else:
                txt = str(val)
            lines.append(f"{key}={txt}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_sources(cls, config_file: str | None = None,
                     overrides: dict[str, str] | None = None) -> "RunConfig":
        values = {k: spec.default for k, spec in REGISTRY.items()}

        def apply(key: str, raw: str, where: str):
            if key not in REGISTRY:
                raise ConfigError(f"unknown config key {key!r} in {where}; "
                                  f"known keys: {', '.join(sorted(REGISTRY))}")
            try:
                values[key] = REGISTRY[key].parse(raw)
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key} in {where}: {exc}") from exc

        if config_file is not None:
            with open(config_file) as fh:
                for lineno, line in enumerate(fh, 1):
                    line = line.split("#", 1)[0].strip()
                    if not line:
                        continue
                    if "=" not in line:
                        raise ConfigError(f"{config_file}:{lineno}: expected key=value")
                    key, raw = line.split("=", 1)
                    apply(key.strip(), raw.strip(), f"{config_file}:{lineno}")
        for key, raw in (overrides or {}).items():
            apply(key, raw, "command line")
        return cls(values)

    # -- object builders -----------------------------------------------------

    def dataset_spec(self, n: int | None = None, seed: int | None = None) -> SynthMotionSpec:
        return SynthMotionSpec(
            n_samples=self["data.n"] if n is None else n,
            frames=self["data.frames"],
            height=self["data.height"],
            width=self["data.width"],
            classes=self["data.classes"],
            noise_std=self["data.noise_std"],
            seed=self["data.seed"] if seed is None else seed,
        )

    def net_config(self, num_classes: int, in_channels: int) -> ToyNetConfig:
        blocks = self["model.blocks"]
        gated = self["model.gated"]
        variant = self["model.variant"]
        if gated == "auto":
            flags = None
        elif gated == "none":
            flags = (False,) * len(blocks)
        elif gated == "all":
            flags = (True,) * len(blocks)
        elif gated == "last":
            flags = default_gated("shift-last", len(blocks))
        else:
            flags = tuple(_parse_bool(b) for b in gated.split(","))
        return ToyNetConfig(
            num_classes=num_classes,
            frames=self["data.frames"],
            in_channels=in_channels,
            stem_channels=self["model.stem_channels"],
            blocks=blocks,
            gated=flags,
            variant=variant,
            hidden_units=self["gate.hidden_units"],
            tau=self["gate.tau"],
            shift_fraction=self["model.shift_fraction"],
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lambda_eff=self["train.lambda_eff"],
            lr=self["train.lr"],
            momentum=self["train.momentum"],
            epochs=self["train.epochs"],
            lr_decay_epochs=self["train.lr_decay_epochs"],
            lr_decay_factor=self["train.lr_decay_factor"],
            batch_size=self["train.batch_size"],
            seed=self["train.seed"],
            tau=self["gate.tau"],
            warmup_epochs=self["train.warmup_epochs"],
            grad_clip=self["train.grad_clip"],
            cost_units=self["train.cost_units"],
        )
