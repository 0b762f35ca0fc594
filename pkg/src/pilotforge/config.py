"""Experiment configuration: a flat ``key = value`` text file with a schema version."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .channel import VEH_A_DELAYS_NS, VEH_A_POWERS_DB, ChannelProfile
from .channelnet import PipelineSpec
from .selection import AnnealSchedule
from .training import TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    out_dir: str = "runs/desk"

    nf: int = 72
    nn: int = 14
    delays_ns: tuple[float, ...] = VEH_A_DELAYS_NS
    powers_db: tuple[float, ...] = VEH_A_POWERS_DB
    carrier_hz: float = 2.1e9
    subcarrier_spacing_hz: float = 15e3
    symbol_duration_s: float = 1e-3 / 14
    speed_kmh: float = 50.0
    n_sinusoids: int = 32

    train_count: int = 3200
    val_count: int = 400
    test_count: int = 400
    snr_list: tuple[float, ...] = tuple(float(s) for s in range(0, 31, 3))

    np_list: tuple[int, ...] = (8, 16)
    np_sweep: tuple[int, ...] = (8, 16, 32, 48)
    sweep_snr_db: float = 15.0
    snr_window_boundary_db: float = 15.0

    selector_t0: float = 10.0
    selector_tb: float = 0.01
    selector_epochs: int = 100
    selector_lr: float = 0.05

    decoder_widths: tuple[int, ...] = (256, 512, 1024)
    decoder_epochs: int = 60
    decoder_lr: float = 1e-3

    e2e_epochs: int = 150
    e2e_lr: float = 3e-4
    srcnn_channels: tuple[int, ...] = (64, 32)
    srcnn_kernels: tuple[int, ...] = (9, 1, 5)
    dncnn_depth: int = 8
    dncnn_width: int = 64
    fine_tune_decoder: bool = True

    batch_size: int = 64
    augment: bool = True

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                object.__setattr__(self, f.name, tuple(v))
        self.validate()

    def validate(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {self.schema_version} is not supported (expected {SCHEMA_VERSION})")
        if self.nf < 1 or self.nn < 1:
            raise ConfigError("grid dimensions must be positive")
        for name in ("train_count", "val_count", "test_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.snr_list:
            raise ConfigError("snr_list must be nonempty")
        for n in set(self.np_list) | set(self.np_sweep):
            if n < 2 or n % 2 or n > self.nf * self.nn:
                raise ConfigError(f"pilot count {n} must be even and within the {self.nf}x{self.nn} grid")
        if self.sweep_snr_db not in self.snr_list:
            raise ConfigError(f"sweep_snr_db {self.sweep_snr_db} is not in snr_list")
        if not self.selector_t0 > self.selector_tb > 0:
            raise ConfigError("need selector_t0 > selector_tb > 0")
        for name in ("selector_epochs", "decoder_epochs", "e2e_epochs", "batch_size", "dncnn_depth", "dncnn_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if len(self.srcnn_channels) != 2 or len(self.srcnn_kernels) != 3:
            raise ConfigError("srcnn_channels needs 2 entries and srcnn_kernels 3")
        if any(k % 2 == 0 for k in self.srcnn_kernels):
            raise ConfigError("convolution kernels must be odd")
        try:
            self.profile()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        out = Path(self.out_dir)
        anchor = next((p for p in [out, *out.parents] if p.exists()), None)
        if anchor is not None and not anchor.is_dir():
            raise ConfigError(f"out_dir {self.out_dir} is blocked by a file at {anchor}")

    def profile(self) -> ChannelProfile:
        return ChannelProfile(
            delays=tuple(d * 1e-9 for d in self.delays_ns),
            powers_db=self.powers_db,
            carrier_hz=self.carrier_hz,
            subcarrier_spacing=self.subcarrier_spacing_hz,
            symbol_duration=self.symbol_duration_s,
            speed=self.speed_kmh / 3.6,
            n_sinusoids=self.n_sinusoids,
        )

    def counts(self) -> tuple[int, int, int]:
        return self.train_count, self.val_count, self.test_count

    def schedule(self) -> AnnealSchedule:
        return AnnealSchedule(self.selector_t0, self.selector_tb, max(self.selector_epochs - 1, 1))

    def selector_train(self) -> TrainConfig:
        return TrainConfig(self.selector_epochs, self.batch_size, self.decoder_lr, self.augment, cosine=False)

    def decoder_train(self) -> TrainConfig:
        return TrainConfig(self.decoder_epochs, self.batch_size, self.decoder_lr, self.augment)

    def e2e_train(self) -> TrainConfig:
        return TrainConfig(self.e2e_epochs, self.batch_size, self.e2e_lr, self.augment)

    def pipeline_spec(self) -> PipelineSpec:
        return PipelineSpec(self.decoder_widths, self.srcnn_channels, self.srcnn_kernels,
                            self.dncnn_depth, self.dncnn_width, self.fine_tune_decoder)

    def replace(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def to_text(self) -> str:
        lines = [f"{k} = {json.dumps(v)}" for k, v in self.to_dict().items()]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        """Hash of everything except out_dir, so relocated runs compare equal."""
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    @property
    def out(self) -> Path:
        return Path(self.out_dir)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = json.loads(value)
        except json.JSONDecodeError:
            values[key] = value
    defaults = ExperimentConfig.__dataclass_fields__
    for key, v in values.items():
        default = defaults[key].default
        _check_type(key, v, default, source)
        # normalise numerals so "50" and "50.0" hash the same
        if isinstance(default, float):
            values[key] = float(v)
        elif isinstance(default, tuple) and default and isinstance(default[0], float):
            values[key] = [float(x) for x in v]
        elif isinstance(default, tuple) and default and isinstance(default[0], int):
            if any(isinstance(x, float) and not x.is_integer() for x in v):
                raise ConfigError(f"{source}: {key} must hold integers")
            values[key] = [int(x) for x in v]
    if "schema_version" not in values:
        raise ConfigError(f"{source}: missing schema_version")
    try:
        return ExperimentConfig(**values)
    except TypeError as e:
        raise ConfigError(f"{source}: {e}") from e


def _check_type(key, value, default, source):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in value)
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(f"{source}: {key} = {value!r} has the wrong type (default is {default!r})")


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text, str(path))
