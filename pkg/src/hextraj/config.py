"""Run configuration: defaults, ``key=value`` files, and stage hashes."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    raw: str = ""
    out_dir: str = "run"
    res: int = 9
    map_path: str = ""
    anchor_lat: str = "auto"
    anchor_lon: str = "auto"
    min_traj_len: int = 15
    strict_vocab: bool = False
    # windows and model
    l: int = 10
    k: int = 5
    embed_dim: int = 256
    layers: int = 8
    heads: int = 8
    dropout: float = 0.1
    # training
    batch_size: int = 64
    lr_start: float = 5e-3
    lr_end: float = 5e-7
    weight_decay: float = 0.01
    epochs: int = 10
    seed: int = 0
    # decoding and evaluation
    beam_width: int = 5
    renormalize: bool = True
    constrained: bool = True
    prefix: str = ""
    sweep_l: str = ""
    sweep_k: str = ""
    distance_bin_m: float = 1000.0
    attention_layer: int = -1
    # hierarchical map
    delta: str = "auto"
    phi: str = "auto"
    theta: float = 1.0
    r_min: int = 7
    r_max: int = 9
    max_iter: int = 10
    distinct_trajectories: bool = False

    def __post_init__(self):
        if self.l < 1 or self.k < 1:
            raise ConfigError("l and k must be >= 1")
        if self.beam_width < 1:
            raise ConfigError("beam_width must be >= 1")
        if self.embed_dim % self.heads:
            raise ConfigError("embed_dim must be divisible by heads")

    # -- parsing ------------------------------------------------------------

    @classmethod
    def field_types(cls) -> dict:
        hints = {"int": int, "float": float, "str": str, "bool": bool}
        return {f.name: hints[f.type] for f in fields(cls)}

    @staticmethod
    def convert(name: str, kind, text: str):
        text = text.strip()
        try:
            if kind is bool:
                low = text.lower()
                if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                    raise ValueError
                return low in ("1", "true", "yes", "on")
            return kind(text)
        except ValueError:
            raise ConfigError(f"bad value for {name}: {text!r}") from None

    @classmethod
    def from_pairs(cls, pairs: dict, base: RunConfig | None = None) -> RunConfig:
        types = cls.field_types()
        values = dataclasses.asdict(base) if base else {}
        for key, text in pairs.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = cls.convert(key, types[key], str(text))
        return cls(**values)

    @classmethod
    def read_file(cls, path) -> dict:
        pairs = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}: line {lineno}: expected key=value")
                key, value = line.split("=", 1)
                pairs[key.strip()] = value.strip()
        return pairs

    def to_text(self, keys=None) -> str:
        keys = keys or [f.name for f in fields(self)]
        return "".join(f"{k}={getattr(self, k)!r}\n" for k in keys)

    def digest(self, keys, *extra: str) -> str:
        h = hashlib.sha256(self.to_text(keys).encode())
        for e in extra:
            h.update(e.encode())
        return h.hexdigest()[:16]


DATA_KEYS = ("res", "map_path", "anchor_lat", "anchor_lon", "min_traj_len", "strict_vocab")
MODEL_KEYS = ("l", "k", "embed_dim", "layers", "heads", "dropout", "batch_size", "lr_start", "lr_end",
              "weight_decay", "epochs", "seed")
MAP_KEYS = ("res", "anchor_lat", "anchor_lon", "delta", "phi", "theta", "r_min", "r_max", "max_iter",
            "distinct_trajectories")


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
