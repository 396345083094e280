"""Plain-text configuration with dotted keys (model.*, train.*, data.*).

Files hold ``key = value`` lines ('#' starts a comment); resolution order
is built-in defaults, then the file, then ``--set key=value`` overrides.
Unknown keys are rejected, and every command echoes the fully resolved
configuration so runs are reproducible from (config, seed) alone.
"""

from dataclasses import dataclass, field

from .errors import ConfigError
from .models import ModelConfig
from .training import TrainConfig

# key -> (kind, default); kinds drive parsing and rendering.
KEY_SPECS = {
    "data.manifest": ("str", ""),
    "data.sample_rate": ("int", 16000),
    "model.variant": ("str", "v1"),
    "model.hidden": ("int", 256),
    "model.blocks": ("int", 5),
    "model.enc_blocks": ("int", 4),
    "model.cond_blocks": ("int", 4),
    "model.heads": ("heads", None),
    "model.kernel": ("int", 16),
    "model.stride": ("int", 8),
    "model.dropout": ("float", 0.1),
    "model.mask_nonlinearity": ("str", "sigmoid"),
    "model.positional_encoding": ("onoff", True),
    "model.emb_kernel": ("int", 64),
    "model.emb_stride": ("int", 32),
    "model.codec_init": ("str", "fourier"),
    "train.lr": ("float", 1e-4),
    "train.batch_size": ("int", 16),
    "train.max_epochs": ("int", 100),
    "train.batches_per_epoch": ("int", 8),
    "train.plateau_patience": ("int", 10),
    "train.plateau_factor": ("float", 0.5),
    "train.min_delta": ("float", 1e-4),
    "train.min_lr": ("float", 1e-7),
    "train.seed": ("int", 0),
    "train.clip_seconds": ("float", 3.0),
    "train.ref_seconds": ("float", 2.0),
    "train.val_episodes": ("int", 16),
    "train.eval_episodes": ("int", 100),
    "train.mixture_type": ("str", "s+s"),
    "train.grad_clip": ("float", 5.0),
    "train.checkpoint": ("str", "model.avtr"),
    "train.log": ("str", "training_log.csv"),
}


def _parse_value(key, raw):
    kind, _ = KEY_SPECS[key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "onoff":
            if raw not in ("on", "off"):
                raise ValueError("expected on or off")
            return raw == "on"
        if kind == "heads":
            return None if raw == "auto" else int(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc


def _render_value(key, value):
    kind, _ = KEY_SPECS[key]
    if kind == "onoff":
        return "on" if value else "off"
    if kind == "heads":
        return "auto" if value is None else str(value)
    if kind == "float":
        return repr(value)
    return str(value)


def default_config():
    return {key: default for key, (_, default) in KEY_SPECS.items()}


def parse_config_file(path):
    values = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, raw = (part.strip() for part in line.split("=", 1))
                if key not in KEY_SPECS:
                    raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
                values[key] = _parse_value(key, raw)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return values


def parse_overrides(pairs):
    values = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key not in KEY_SPECS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


@dataclass
class CliConfig:
    """A fully resolved run configuration plus its provenance."""

    command: str = ""
    config_path: str = ""
    overrides: list = field(default_factory=list)
    values: dict = field(default_factory=default_config)

    @property
    def seed(self):
        return self.values["train.seed"]

    def echo_lines(self):
        return [f"{key} = {_render_value(key, self.values[key])}"
                for key in sorted(self.values)]


def resolve_config(command, config_path=None, overrides=None):
    """defaults < file < overrides, with unknown keys rejected."""
    values = default_config()
    if config_path:
        values.update(parse_config_file(config_path))
    values.update(parse_overrides(overrides))
    return CliConfig(command=command, config_path=config_path or "",
                     overrides=list(overrides or ()), values=values)


def model_config_from(cfg):
    v = cfg.values
    return ModelConfig(
        variant=v["model.variant"], hidden=v["model.hidden"], blocks=v["model.blocks"],
        enc_blocks=v["model.enc_blocks"], cond_blocks=v["model.cond_blocks"],
        heads=v["model.heads"], kernel=v["model.kernel"], stride=v["model.stride"],
        dropout=v["model.dropout"], mask_nonlinearity=v["model.mask_nonlinearity"],
        positional_encoding=v["model.positional_encoding"],
        emb_kernel=v["model.emb_kernel"], emb_stride=v["model.emb_stride"],
        codec_init=v["model.codec_init"], sample_rate=v["data.sample_rate"],
    ).validate()


def train_config_from(cfg):
    v = cfg.values
    return TrainConfig(
        lr=v["train.lr"], batch_size=v["train.batch_size"],
        max_epochs=v["train.max_epochs"], plateau_patience=v["train.plateau_patience"],
        plateau_factor=v["train.plateau_factor"], min_delta=v["train.min_delta"],
        min_lr=v["train.min_lr"], seed=v["train.seed"],
        clip_seconds=v["train.clip_seconds"], ref_seconds=v["train.ref_seconds"],
        batches_per_epoch=v["train.batches_per_epoch"],
        val_episodes=v["train.val_episodes"], eval_episodes=v["train.eval_episodes"],
        mixture_type=v["train.mixture_type"], grad_clip=v["train.grad_clip"],
    ).validate()
