"""Cross-image fusion network: shared shallow extractor, local ResBlock branch,
global Mamba branch and a reconstruction head.

Parameters live in a flat ordered ``dict`` of named tensors so checkpoints,
the optimizer and gradient checks can walk them uniformly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .ssm import selective_scan

__all__ = [
    "ModelConfig",
    "FusionNet",
    "init_model",
    "forward",
    "l1_loss",
    "expected_parameter_count",
]

SCAN_ORDERS = ("row_major", "bidirectional_row_major")


@dataclass
class ModelConfig:
    """Topology of the fusion network.

    ``image_channels`` is J (1 or 3). Widths follow ``base_channels`` C: the
    shallow extractor emits C per source, the branches work on 2C, the head
    takes 4C (2C when one branch is disabled).
    """

    image_channels: int = 1
    base_channels: int = 16
    local_blocks: int = 3
    global_blocks: int = 4
    ssm_state_size: int = 8
    mlp_expansion: int = 2
    conv_kernel: int = 3
    token_conv_kernel: int = 4
    scan_order: str = "bidirectional_row_major"
    padding_mode: str = "reflect"
    local_branch: bool = True
    global_branch: bool = True
    dtype: str = "float32"

    def validate(self) -> "ModelConfig":
        if self.image_channels not in (1, 3):
            raise ValueError(f"image_channels must be 1 or 3, got {self.image_channels}")
        if self.base_channels < 4:
            raise ValueError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.local_blocks < 1 or self.global_blocks < 1:
            raise ValueError("local_blocks and global_blocks must be >= 1")
        if self.ssm_state_size < 1 or self.mlp_expansion < 1 or self.token_conv_kernel < 1:
            raise ValueError("ssm_state_size, mlp_expansion and token_conv_kernel must be >= 1")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ValueError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.scan_order not in SCAN_ORDERS:
            raise ValueError(f"scan_order must be one of {SCAN_ORDERS}, got {self.scan_order!r}")
        if self.padding_mode not in ("reflect", "zero"):
            raise ValueError(f"padding_mode must be 'reflect' or 'zero', got {self.padding_mode!r}")
        if not (self.local_branch or self.global_branch):
            raise ValueError("at least one branch must be enabled")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        return self

    @property
    def model_width(self) -> int:
        return 2 * self.base_channels

    @property
    def inner_width(self) -> int:
        return self.mlp_expansion * self.model_width

    @property
    def dt_rank(self) -> int:
        return max(1, math.ceil(self.model_width / 16))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known}).validate()


class FusionNet:
    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        # length of the token sequence seen by the global branch in the last forward
        self.last_scan_length = 0

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def __call__(self, a, b) -> Tensor:
        return forward(self, a, b)


# ------------------------------------------------------------------ init

def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _layout(cfg: ModelConfig):
    """Yield (name, shape, initializer) for every parameter, in a fixed order."""
    k = cfg.conv_kernel
    c, j = cfg.base_channels, cfg.image_channels
    wm, wi, n, r = cfg.model_width, cfg.inner_width, cfg.ssm_state_size, cfg.dt_rank

    def conv(prefix, cin, cout):
        yield f"{prefix}.weight", (cout, cin, k, k), ("uniform", cin * k * k)
        yield f"{prefix}.bias", (cout,), ("uniform", cin * k * k)

    def resblock(prefix, ch):
        yield from conv(f"{prefix}.conv1", ch, ch)
        yield from conv(f"{prefix}.conv2", ch, ch)

    yield from conv("shallow.conv", j, c)
    yield from resblock("shallow.res", c)
    if cfg.local_branch:
        for i in range(cfg.local_blocks):
            yield from resblock(f"local.{i}", wm)
    if cfg.global_branch:
        for i in range(cfg.global_blocks):
            p = f"global.{i}"
            yield f"{p}.norm.gain", (wm,), ("const", 1.0)
            yield f"{p}.norm.offset", (wm,), ("const", 0.0)
            yield f"{p}.in_proj", (wm, 2 * wi), ("uniform", wm)
            yield f"{p}.conv.weight", (wi, cfg.token_conv_kernel), ("uniform", cfg.token_conv_kernel)
            yield f"{p}.conv.bias", (wi,), ("uniform", cfg.token_conv_kernel)
            yield f"{p}.x_proj", (wi, r + 2 * n), ("uniform", wi)
            yield f"{p}.dt_proj.weight", (r, wi), ("uniform", r)
            yield f"{p}.dt_proj.bias", (wi,), ("dt_bias", 0.01)
            yield f"{p}.A_log", (wi, n), ("a_log", None)
            yield f"{p}.D", (wi,), ("const", 1.0)
            yield f"{p}.out_proj", (wi, wm), ("uniform", wi)
    head_in = (wm if cfg.local_branch else 0) + (wm if cfg.global_branch else 0)
    yield from conv("head.conv1", head_in, c)
    yield from conv("head.conv2", c, j)


def expected_parameter_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in _layout(cfg))


def init_model(cfg: ModelConfig, rng: np.random.Generator | int | None = None) -> FusionNet:
    cfg.validate()
    rng = np.random.default_rng(rng)
    dtype = np.dtype(cfg.dtype)
    params: dict[str, Tensor] = {}
    for name, shape, (kind, arg) in _layout(cfg):
        if kind == "uniform":
            data = _uniform(rng, shape, arg, dtype)
        elif kind == "const":
            data = np.full(shape, arg, dtype=dtype)
        elif kind == "dt_bias":
            # softplus(bias) == arg at initialization
            data = np.full(shape, math.log(math.expm1(arg)), dtype=dtype)
        elif kind == "a_log":
            data = np.log(np.tile(np.arange(1, shape[1] + 1, dtype=np.float64), (shape[0], 1))).astype(dtype)
        else:  # pragma: no cover
            raise AssertionError(kind)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return FusionNet(cfg, params)


# --------------------------------------------------------------- forward

def _conv(model: FusionNet, prefix: str, x: Tensor) -> Tensor:
    p = model.params
    return ad.conv2d(x, p[f"{prefix}.weight"], p[f"{prefix}.bias"], model.cfg.padding_mode)


def _resblock(model: FusionNet, prefix: str, x: Tensor) -> Tensor:
    h = ad.relu(_conv(model, f"{prefix}.conv1", x))
    return x + _conv(model, f"{prefix}.conv2", h)


def _mamba_block(model: FusionNet, prefix: str, q: Tensor) -> Tensor:
    cfg, p = model.cfg, model.params
    wi, n, r = cfg.inner_width, cfg.ssm_state_size, cfg.dt_rank
    h = ad.layernorm(q, p[f"{prefix}.norm.gain"], p[f"{prefix}.norm.offset"])
    x, z = ad.split(h @ p[f"{prefix}.in_proj"], [wi, wi])
    x = ad.silu(ad.causal_conv1d(x, p[f"{prefix}.conv.weight"], p[f"{prefix}.conv.bias"]))
    dt_low, b_t, c_t = ad.split(x @ p[f"{prefix}.x_proj"], [r, n, n])
    delta = ad.softplus(dt_low @ p[f"{prefix}.dt_proj.weight"] + p[f"{prefix}.dt_proj.bias"])
    a = -ad.exp(p[f"{prefix}.A_log"])
    y = selective_scan(x, delta, a, b_t, c_t, p[f"{prefix}.D"])
    if cfg.scan_order == "bidirectional_row_major":
        y = y + selective_scan(x, delta, a, b_t, c_t, reverse=True)
    y = y * ad.silu(z)
    return q + y @ p[f"{prefix}.out_proj"]


def _as_batch(img, dtype) -> np.ndarray:
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"expected an image (H,W[,J]) or batch (B,H,W,J), got shape {arr.shape}")
    return arr.astype(dtype, copy=False)


def forward_features(model: FusionNet, a, b) -> dict[str, Tensor]:
    """Run everything up to the head; returns branch outputs keyed by name."""
    cfg = model.cfg
    dtype = np.dtype(cfg.dtype)
    xa, xb = _as_batch(a, dtype), _as_batch(b, dtype)
    if xa.shape != xb.shape:
        raise ShapeError(f"source images differ in shape: {xa.shape} vs {xb.shape}")
    if xa.shape[3] != cfg.image_channels:
        raise ShapeError(f"model expects {cfg.image_channels} channel(s), images have {xa.shape[3]}")
    bsz, h, w, _ = xa.shape

    # both sources go through the same extractor as one stacked batch
    x = Tensor(np.concatenate([xa, xb], axis=0))
    f = _resblock(model, "shallow.res", _conv(model, "shallow.conv", x))
    fa, fb = ad.split(f, [bsz, bsz], axis=0)
    feats = ad.concat([fa, fb], axis=-1)  # (B, H, W, 2C)

    out = {"shallow": feats}
    if cfg.local_branch:
        loc = feats
        for i in range(cfg.local_blocks):
            loc = _resblock(model, f"local.{i}", loc)
        out["local"] = loc
    if cfg.global_branch:
        tokens = ad.reshape(feats, (bsz, h * w, cfg.model_width))
        model.last_scan_length = h * w
        for i in range(cfg.global_blocks):
            tokens = _mamba_block(model, f"global.{i}", tokens)
        out["global_tokens"] = tokens
        out["global"] = ad.reshape(tokens, (bsz, h, w, cfg.model_width))
    return out


def forward(model: FusionNet, a, b) -> Tensor:
    """Fuse two aligned sources; returns (B, H, W, J) intensities in [0, 1]."""
    feats = forward_features(model, a, b)
    parts = [feats[k] for k in ("local", "global") if k in feats]
    hid = parts[0] if len(parts) == 1 else ad.concat(parts, axis=-1)
    hid = ad.relu(_conv(model, "head.conv1", hid))
    return ad.sigmoid(_conv(model, "head.conv2", hid))


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute deviation between prediction and target."""
    if not isinstance(target, Tensor):
        arr = np.asarray(target, dtype=pred.dtype)
        # a single (H, W[, J]) image against a (1, H, W, J) prediction
        target = Tensor(_as_batch(arr, pred.dtype) if pred.ndim == 4 and arr.ndim < 4 else arr)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: prediction {pred.shape} vs target {target.shape}")
    return ad.mean(ad.absolute(pred - target))
