"""Checkpoint container.

Layout: ``b"SDCK"``, u32 format version, u64 header length, a JSON header
(configs, step, array directory, optimizer hyperparameters), then the raw
little-endian bytes of every array in directory order. Writing the same state
twice gives byte-identical files.
"""

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .codec import CodecConfig
from .discriminators import DiscConfig
from .errors import ConfigError, FormatError
from .losses import LossWeights
from .train import TrainConfig, TrainState

MAGIC = b"SDCK"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


def _to_numpy(t):
    a = t.detach().cpu().numpy()
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def _optimizer_payload(opt, prefix, arrays):
    sd = opt.state_dict()
    for idx, st in sd["state"].items():
        for key, value in st.items():
            arrays[f"{prefix}/state/{idx}/{key}"] = _to_numpy(value if torch.is_tensor(value) else torch.tensor(value))
    return [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()} for g in sd["param_groups"]]


def _optimizer_restore(opt, prefix, groups, arrays):
    state = {}
    for name, a in arrays.items():
        if not name.startswith(prefix + "/state/"):
            continue
        _, _, idx, key = name.split("/", 3)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(a.copy())
    for g in groups:
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
    opt.load_state_dict({"state": state, "param_groups": groups})


def state_payload(state):
    arrays = {}
    for k, v in state.model.state_dict().items():
        arrays[f"generator/{k}"] = _to_numpy(v)
    for k, v in state.disc.state_dict().items():
        arrays[f"discriminator/{k}"] = _to_numpy(v)
    groups_g = _optimizer_payload(state.opt_g, "opt_g", arrays)
    groups_d = _optimizer_payload(state.opt_d, "opt_d", arrays)
    arrays["rng/torch"] = _to_numpy(state.generator.get_state())
    header = {
        "step": state.step,
        "configs": {
            "codec": state.codec_cfg.to_dict(),
            "train": state.train_cfg.to_dict(),
            "losses": state.weights.to_dict(),
            "disc": state.disc_cfg.to_dict(),
        },
        "optimizers": {"opt_g": groups_g, "opt_d": groups_d},
    }
    return header, arrays


def write_container(path, header, arrays):
    directory, offset = [], 0
    for name, a in arrays.items():
        a = np.ascontiguousarray(a)
        directory.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset,
                          "nbytes": a.nbytes})
        offset += a.nbytes
    header = dict(header, format="sdcodec-checkpoint", arrays=directory)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for name, a in arrays.items():
            fh.write(np.ascontiguousarray(a).tobytes())
    tmp.replace(path)


def read_container(path):
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise FormatError(f"{path}: truncated checkpoint header", 0)
    magic, version, n = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {magic!r})", 0)
    if version != VERSION:
        raise ConfigError(f"{path}: checkpoint format version {version}, expected {VERSION}", "version")
    start = _PREFIX.size + n
    if len(data) < start:
        raise FormatError(f"{path}: truncated checkpoint header", len(data))
    try:
        header = json.loads(data[_PREFIX.size:start])
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt checkpoint header: {exc}", _PREFIX.size) from None
    arrays = {}
    for entry in header["arrays"]:
        a, b = start + entry["offset"], start + entry["offset"] + entry["nbytes"]
        if b > len(data):
            raise FormatError(f"{path}: truncated array {entry['name']!r}", len(data))
        arrays[entry["name"]] = np.frombuffer(data[a:b], dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
    if start + sum(e["nbytes"] for e in header["arrays"]) != len(data):
        raise FormatError(f"{path}: trailing bytes after last array", len(data))
    return header, arrays


def save_checkpoint(state, path):
    header, arrays = state_payload(state)
    write_container(path, header, arrays)


def _first_difference(expected, found, prefix):
    for key in sorted(set(expected) | set(found)):
        if expected.get(key) != found.get(key):
            return f"{prefix}.{key}", expected.get(key), found.get(key)
    return None


def check_codec_config(found, expected):
    """Raise ConfigError naming the first field where two codec config dicts differ."""
    diff = _first_difference(expected, found, "codec")
    if diff:
        raise ConfigError(f"checkpoint has {diff[2]!r}, expected {diff[1]!r}", diff[0])


def load_checkpoint(path, codec_cfg=None):
    """Rebuild a TrainState; with ``codec_cfg`` given, the stored config must match it."""
    header, arrays = read_container(path)
    configs = header["configs"]
    if codec_cfg is not None:
        check_codec_config(configs["codec"], codec_cfg.to_dict())
    codec = CodecConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in configs["codec"].items()})
    train = TrainConfig(**configs["train"])
    weights = LossWeights(**{k: tuple(v) if isinstance(v, list) else v for k, v in configs["losses"].items()})
    disc = DiscConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in configs["disc"].items()})
    state = TrainState(codec, train, weights, disc)

    def sub(prefix):
        n = len(prefix) + 1
        return {k[n:]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix + "/")}

    state.model.load_state_dict(sub("generator"))
    state.disc.load_state_dict(sub("discriminator"))
    _optimizer_restore(state.opt_g, "opt_g", header["optimizers"]["opt_g"], arrays)
    _optimizer_restore(state.opt_d, "opt_d", header["optimizers"]["opt_d"], arrays)
    state.generator.set_state(torch.from_numpy(arrays["rng/torch"].copy()))
    state.step = header["step"]
    return state


def load_model(path, codec_cfg=None):
    """Generator only, in eval mode."""
    model = load_checkpoint(path, codec_cfg).model
    model.eval()
    return model
