"""Run configuration: one YAML key tree with a ``version`` field.

Unknown keys are rejected so a config always means exactly one thing.
"""

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .codec import PRESETS, CodecConfig
from .discriminators import PAPER_DISC, DiscConfig
from .errors import ConfigError
from .losses import LossWeights
from .mixing import MixSpec
from .train import TrainConfig

CONFIG_VERSION = 1

PAPER_TRAIN = dict(total_steps=400_000, batch_size=64, segment_s=2.0, warmup_steps=10_000, gamma=0.999996)


@dataclass
class RunConfig:
    preset: str = "toy"
    codec: CodecConfig = field(default_factory=CodecConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mix: MixSpec = field(default_factory=MixSpec)
    losses: LossWeights = field(default_factory=LossWeights)
    disc: DiscConfig = field(default_factory=DiscConfig)
    manifest: str = None  # stems to train on; toy sources when unset
    run_dir: str = None

    def validate(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}", "preset")
        self.codec.validate("codec")
        if self.preset == "paper":
            for key, value in PRESETS["paper"].items():
                if key in ("encoder_channels", "decoder_channels"):
                    continue
                have = getattr(self.codec, key)
                if isinstance(value, tuple):
                    have = tuple(have)
                if have != value:
                    raise ConfigError(f"preset 'paper' requires {value}, got {have}", f"codec.{key}")
        self.train.validate("train")
        self.mix.validate("mix")
        self.losses.validate("losses")
        return self

    def to_dict(self):
        return {
            "version": CONFIG_VERSION,
            "preset": self.preset,
            "codec": self.codec.to_dict(),
            "train": self.train.to_dict(),
            "mix": {
                "target_lufs": dict(self.mix.target_lufs),
                "lufs_jitter": self.mix.lufs_jitter,
                "mix_lufs": self.mix.mix_lufs,
                "mix_jitter": self.mix.mix_jitter,
                "peak_ceiling_db": self.mix.peak_ceiling_db,
                "track_count_probs": list(self.mix.track_count_probs),
            },
            "losses": self.losses.to_dict(),
            "disc": self.disc.to_dict(),
            "manifest": self.manifest,
            "run_dir": self.run_dir,
        }


def default_config(preset="toy"):
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}", "preset")
    cfg = RunConfig(preset=preset, codec=CodecConfig(**PRESETS[preset]))
    if preset == "paper":
        cfg.train = TrainConfig(**PAPER_TRAIN)
        cfg.disc = DiscConfig(**PAPER_DISC.__dict__)
    return cfg.validate()


def _build(cls, data, prefix, tuples=()):
    if not isinstance(data, dict):
        raise ConfigError("expected a mapping", prefix)
    names = {f.name for f in fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError("unknown key", f"{prefix}.{key}")
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = tuple(value) if key in tuples and isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc), prefix) from None


def config_from_dict(data):
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    version = data.get("version")
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version!r}, expected {CONFIG_VERSION}", "version")
    known = {"version", "preset", "codec", "train", "mix", "losses", "disc", "manifest", "run_dir"}
    for key in data:
        if key not in known:
            raise ConfigError("unknown key", key)
    preset = data.get("preset", "toy")
    base = default_config(preset) if preset in PRESETS else RunConfig(preset=preset)
    codec = {**base.codec.to_dict(), **data.get("codec", {})}
    train = {**base.train.to_dict(), **data.get("train", {})}
    disc = {**base.disc.to_dict(), **data.get("disc", {})}
    cfg = RunConfig(
        preset=preset,
        codec=_build(CodecConfig, codec, "codec", ("strides", "sources")),
        train=_build(TrainConfig, train, "train"),
        mix=_build(MixSpec, data.get("mix", {}), "mix", ("track_count_probs",)),
        losses=_build(LossWeights, data.get("losses", {}), "losses", ("mel_windows", "mel_bins")),
        disc=_build(DiscConfig, disc, "disc", ("periods", "stft_windows", "mpd_channels")),
        manifest=data.get("manifest"),
        run_dir=data.get("run_dir"),
    )
    return cfg.validate()


def load_config(path):
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return config_from_dict(data)


def dump_config(cfg):
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
