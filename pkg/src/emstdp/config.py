"""Run configuration: a flat ``key = value`` file plus command-line overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from fractions import Fraction
from pathlib import Path

from .network import BuildParams
from .plasticity import LearningParams
from .structure import parse_structure


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    structure: str = "28x28x1-100d-10d"
    T: int = 64
    theta: int = 64
    eta: str = "1/8"
    epochs: int = 1
    feedback_mode: str = "DFA"
    seed: int = 0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    n_train: int = 0  # 0: all samples
    n_test: int = 0
    shuffle: bool = True
    conv_checkpoint: str = ""
    l_m: str = "10"  # one value for all layers or a comma list per layer
    rounding: str = "stochastic"
    out_dir: str = "runs/default"
    # network scaling
    threshold_scale: str = ""  # comma list per non-input layer; empty derives from fan-in
    output_scale: int = 32
    init_frac: float = 0.5
    output_init_low: float = 0.25
    gain_scale: int = 2
    dfa_feedback_scale: int = 30
    fa_feedback_scale: int = 48
    error_theta: int = 0  # 0: share theta
    gate_output: bool = True
    reset: str = "subtract"
    target_rate: int = 0  # 0: T
    # incremental protocol
    initial_classes: str = "0,1,2,3"
    increments: str = "4,5;6,7;8,9"
    chunks: int = 5
    per_class_chunk: int = 0  # samples of each class per chunk; 0: split evenly
    step1_eta_factor: str = "1/4"
    rehearsal_noise: float = 0.0

    HELP = {
        "structure": "layer string, e.g. 28x28x1-100d-10d",
        "eta": "learning rate, a dyadic fraction such as 1/8",
        "l_m": "neurons per core, one value or a comma list per layer",
        "threshold_scale": "per-layer multiplier of theta, comma list; empty derives hidden layers from fan-in",
        "output_scale": "classifier threshold multiplier when threshold_scale is empty",
        "gate_output": "block error injection into output neurons silent in phase 1",
        "gain_scale": "multiplier of the theta/T injection weight per error spike",
        "increments": "class groups added per increment, ';' between increments",
        "per_class_chunk": "samples per class per chunk in incremental mode (0: split evenly)",
    }

    def __post_init__(self):
        self.validate()

    def validate(self):
        try:
            spec = parse_structure(self.structure, self.feedback_mode, self.T, self.theta)
            self.learning_params()
            bp = self.build_params()
            self.l_m_values(len(spec.layers))
            self.increment_groups()
            Fraction(self.step1_eta_factor)
        except (ValueError, ZeroDivisionError) as e:
            raise ConfigError(str(e)) from None
        if bp.threshold_scale is not None and len(bp.threshold_scale) != len(spec.layers) - 1:
            raise ConfigError(f"threshold_scale needs {len(spec.layers) - 1} values")
        if self.reset not in ("subtract", "zero"):
            raise ConfigError(f"reset must be subtract or zero, got {self.reset!r}")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")

    # -- derived objects --------------------------------------------------------

    def spec(self):
        return parse_structure(self.structure, self.feedback_mode, self.T, self.theta)

    def learning_params(self, factor: Fraction = Fraction(1)) -> LearningParams:
        return LearningParams(eta=Fraction(self.eta) * factor, rounding=self.rounding)

    def build_params(self) -> BuildParams:
        ts = tuple(int(v) for v in self.threshold_scale.split(",")) if self.threshold_scale.strip() else None
        return BuildParams(
            threshold_scale=ts, output_scale=self.output_scale, init_frac=self.init_frac,
            output_init_low=self.output_init_low,
            gain_scale=self.gain_scale, dfa_feedback_scale=self.dfa_feedback_scale,
            fa_feedback_scale=self.fa_feedback_scale, error_theta=self.error_theta or None,
            gate_output=self.gate_output, reset=self.reset, target_rate=self.target_rate or None,
        )

    def l_m_values(self, n_layers: int) -> list[int]:
        vals = [int(v) for v in self.l_m.split(",")]
        if len(vals) == 1:
            return vals * n_layers
        if len(vals) != n_layers:
            raise ConfigError(f"l_m needs 1 or {n_layers} values, got {len(vals)}")
        return vals

    def increment_groups(self) -> tuple[list[int], list[list[int]]]:
        init = [int(c) for c in self.initial_classes.split(",") if c.strip()]
        incs = [[int(c) for c in grp.split(",") if c.strip()] for grp in self.increments.split(";") if grp.strip()]
        return init, incs

    # -- serialization ----------------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_show(getattr(self, f.name))}\n" for f in fields(self))

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def _show(v) -> str:
    return ("true" if v else "false") if isinstance(v, bool) else str(v)


def _coerce(name: str, raw: str):
    ftypes = {f.name: f.type for f in fields(RunConfig)}
    if name not in ftypes:
        raise ConfigError(f"unknown config key {name!r}")
    t = ftypes[name]
    raw = raw.strip()
    try:
        if t == "bool":
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {t}") from None
    return raw


def parse_config_text(text: str) -> dict:
    out = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {no}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = _coerce(k.strip(), v)
    return out


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file, then ``overrides`` (already-typed or raw strings)."""
    values = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_config_text(p.read_text()))
    for k, v in (overrides or {}).items():
        values[k] = _coerce(k, v) if isinstance(v, str) else v
    return RunConfig(**values)
