"""Trainable tensors: initialization, access helpers, checkpoint container."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .config import ModelConfig, AblationFlags

CKPT_MAGIC = b"DSRDCKPT"
CKPT_VERSION = 1


def softplus_inv(y: float) -> float:
    return float(np.log(np.expm1(y)))


@dataclass
class ModelParams:
    """All trainable tensors keyed by name, bound to a feature signature."""

    config: ModelConfig
    feat_dims: tuple  # (d_x, m) of the stream this model reads
    tensors: dict

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def __getitem__(self, name):
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.feat_dims,
                           {k: v.copy() for k, v in self.tensors.items()})

    def checksum(self) -> int:
        import zlib
        acc = 0
        for name in sorted(self.tensors):
            acc = zlib.crc32(self.tensors[name].tobytes(), acc)
        return acc

    # constrained accessors (numpy side; the traced path re-derives these)
    def gamma(self, layer) -> np.ndarray:
        return expit(self.tensors[f"gamma_raw_{layer}"])

    def lam(self, layer) -> np.ndarray:
        return np.logaddexp(0.0, self.tensors[f"lambda_raw_{layer}"])

    def alpha(self, layer) -> np.ndarray:
        return expit(self.tensors[f"alpha_raw_{layer}"])

    def delta(self, layer) -> np.ndarray:
        return np.logaddexp(0.0, self.tensors[f"delta_raw_{layer}"])

    def gamma_all(self) -> np.ndarray:
        return np.stack([self.gamma(l) for l in range(1, self.config.layers + 1)])

    def edge_in_dim(self) -> int:
        return max(self.feat_dims[1], self.config.time_dim)

    def group_of(self, name: str) -> str:
        """Parameter-group label: the tensor name with any layer suffix removed."""
        head, _, tail = name.rpartition("_")
        return head if tail.isdigit() else name


def init_params(config: ModelConfig, feat_dims, seed: int = 0) -> ModelParams:
    d_x, m = feat_dims
    d, h, dh = config.dim, config.heads, config.head_dim
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD5]))
    dt = np.dtype(config.dtype)

    def gauss(*shape):
        fan_in = shape[-2] if len(shape) >= 2 else shape[-1]
        return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dt)

    t = {}
    if d_x > 0:
        t["w_in"] = gauss(d_x, d)
    t["b_in"] = (0.01 * rng.standard_normal(d)).astype(dt)
    # geometric frequency ladder, trainable thereafter
    t["w_te"] = (10.0 ** (-2.0 * np.arange(config.time_dim) / config.time_dim)).astype(dt)
    t["w_e"] = gauss(max(m, config.time_dim), d)
    sp1 = softplus_inv(1.0)
    for l in range(1, config.layers + 1):
        t[f"w_q_{l}"] = gauss(h, d, dh)
        t[f"w_k_{l}"] = gauss(h, d, dh)
        t[f"w_v_{l}"] = gauss(h, d, dh)
        t[f"lambda_raw_{l}"] = np.full(h, sp1, dtype=dt)
        t[f"alpha_raw_{l}"] = np.zeros(h, dtype=dt)
        t[f"gamma_raw_{l}"] = np.zeros(h, dtype=dt)
        t[f"delta_raw_{l}"] = np.full(h, sp1, dtype=dt)
        t[f"ln1_g_{l}"] = np.ones(d, dtype=dt)
        t[f"ln1_b_{l}"] = np.zeros(d, dtype=dt)
        t[f"ln2_g_{l}"] = np.ones(d, dtype=dt)
        t[f"ln2_b_{l}"] = np.zeros(d, dtype=dt)
        t[f"w_ff1_{l}"] = gauss(d, config.ff_mult * d)
        t[f"w_ff2_{l}"] = gauss(config.ff_mult * d, d)
    t["link_w1"] = gauss(2 * d, d)
    t["link_b1"] = np.zeros(d, dtype=dt)
    t["link_w2"] = gauss(d, 1)
    t["link_b2"] = np.zeros(1, dtype=dt)
    t["cls_w"] = gauss(d, config.num_classes)
    return ModelParams(config, (d_x, m), t)


def cast_params(params: ModelParams, dtype: str) -> ModelParams:
    cfg = ModelConfig(**{**_config_kwargs(params.config), "dtype": dtype})
    dt = np.dtype(dtype)
    return ModelParams(cfg, params.feat_dims,
                       {k: v.astype(dt) for k, v in params.tensors.items()})


def _config_kwargs(config: ModelConfig) -> dict:
    from dataclasses import asdict
    kw = asdict(config)
    kw["ablation"] = AblationFlags(**kw["ablation"])
    return kw


# ---------------------------------------------------------------------------
# checkpoint container: fixed binary layout, byte-stable across runs


def save_checkpoint(params: ModelParams, path, extra: dict | None = None):
    from dataclasses import asdict
    names = sorted(params.tensors)
    specs, offset = [], 0
    for name in names:
        arr = params.tensors[name]
        specs.append({"name": name, "dtype": str(arr.dtype),
                      "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {
        "config": asdict(params.config),
        "feat_dims": list(params.feat_dims),
        "tensors": specs,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
        f.write(blob)
        for name in names:
            arr = np.ascontiguousarray(params.tensors[name])
            f.write(arr.tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CKPT_MAGIC:
            raise ValueError("not a checkpoint file")
        version, hlen = struct.unpack("<IQ", f.read(12))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    kw = dict(header["config"])
    kw["ablation"] = AblationFlags(**kw["ablation"])
    config = ModelConfig(**kw)
    tensors = {}
    for spec in header["tensors"]:
        dt = np.dtype(spec["dtype"])
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = spec["offset"]
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=start).reshape(shape)
        tensors[spec["name"]] = arr.copy()
    params = ModelParams(config, tuple(header["feat_dims"]), tensors)
    return params, header.get("extra", {})
