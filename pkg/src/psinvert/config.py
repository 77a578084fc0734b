"""Run configuration: a single JSON document with desk-scale defaults."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .homog import MaterialConfig
from .randfield import SdfConfig
from .surrogate import TrainConfig
from .vbem import VBEMConfig

__all__ = ["ConfigError", "RunConfig", "derive_seed", "load_config", "FULL_SCALE_CASE1", "FULL_SCALE_CASE2"]


class ConfigError(ValueError):
    pass


def derive_seed(master: int, *labels) -> int:
    """64-bit sub-seed from the master seed and a path of labels."""
    key = "/".join([str(int(master))] + [str(x) for x in labels]).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


# Desk targets are derived from the initial data at optimize time.
DEFAULT_OBJECTIVES = {
    "case1": {"variant": "O1-box", "percentiles": [70.0, 90.0]},
    "case2": {"variant": "O2", "shift": [1.0, -1.0], "cov_scale": 0.25, "n_samples": 20},
}


@dataclass
class RunConfig:
    case: str = "case1"
    objective: dict = field(default_factory=dict)
    n_pixels: int = 32
    vf: float = 0.5
    n_freq: int = 16
    eps: float = 25.0
    sdf: SdfConfig = field(default_factory=SdfConfig)
    material: MaterialConfig = field(default_factory=MaterialConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    hidden: int = 30
    vbem: VBEMConfig = field(default_factory=VBEMConfig)
    n0: int = 512
    n_pool: int = 512
    n_add: int = 128
    n_steps: int = 3
    eval_samples: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.case not in DEFAULT_OBJECTIVES:
            raise ConfigError(f"case must be one of {sorted(DEFAULT_OBJECTIVES)}, got {self.case!r}")
        if not self.objective:
            self.objective = dict(DEFAULT_OBJECTIVES[self.case])
        counts = {"n_pixels": self.n_pixels, "n_freq": self.n_freq, "n0": self.n0, "n_pool": self.n_pool,
                  "n_add": self.n_add, "eval_samples": self.eval_samples, "hidden": self.hidden}
        bad = [k for k, v in counts.items() if int(v) < 1]
        if bad or self.n_steps < 0:
            raise ConfigError(f"counts must be positive: {bad or ['n_steps']}")
        if self.n_add > self.n_pool:
            raise ConfigError(f"n_add ({self.n_add}) exceeds n_pool ({self.n_pool})")
        if self.n_pixels % 16:
            raise ConfigError(f"n_pixels must be divisible by 16, got {self.n_pixels}")
        if not 0.0 < self.vf < 1.0:
            raise ConfigError(f"vf must lie in (0, 1), got {self.vf}")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        variant = self.objective.get("variant")
        if variant not in ("O1-box", "O1-gaussian-utility", "O2"):
            raise ConfigError(f"unknown objective variant {variant!r}")
        if (variant == "O2") != (self.case == "case2"):
            raise ConfigError("case2 pairs with the O2 objective, case1 with O1")

    @property
    def d_kappa(self) -> int:
        return 2

    def to_json(self) -> dict:
        out = asdict(self)
        out["train"]["seed"] = None  # per-step seeds are derived
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        nested = {"sdf": SdfConfig, "material": MaterialConfig, "train": TrainConfig, "vbem": VBEMConfig}
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        kwargs = {}
        try:
            for k, v in obj.items():
                if k in nested:
                    v = dict(v)
                    if k == "train":
                        v.pop("seed", None)
                    kwargs[k] = nested[k](**v)
                else:
                    kwargs[k] = v
            return cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return RunConfig.from_json(obj)


# Full-scale settings (64-pixel grids, 100 RBFs, thousands of labels), for reference runs.
FULL_SCALE_CASE1 = {
    "case": "case1", "n_pixels": 64, "n_freq": 32, "sdf": {"n_rbf": 100, "w_max": 65.0, "bandwidth": 12.0},
    "n0": 2048, "n_pool": 4096, "n_add": 1024, "n_steps": 4, "eval_samples": 1024,
}
FULL_SCALE_CASE2 = {
    "case": "case2", "n_pixels": 64, "n_freq": 32, "sdf": {"n_rbf": 100, "w_max": 65.0, "bandwidth": 12.0},
    "n0": 4096, "n_pool": 4096, "n_add": 1024, "n_steps": 6, "eval_samples": 1024,
    "objective": {"variant": "O2", "shift": [1.0, -1.0], "cov_scale": 0.25, "n_samples": 20},
}
