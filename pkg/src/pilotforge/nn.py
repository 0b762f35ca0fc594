"""Network primitives: layer specs, Adam, checkpoints and a finite-difference gradient check.

Tensors and reverse-mode differentiation come from torch; this module fixes the
small surface the estimators are built from.
"""

from __future__ import annotations

import json
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
from torch import nn

LAYER_KINDS = ("dense", "conv2d", "leaky_relu", "dropout", "batch_norm")

CHECKPOINT_MAGIC = b"PFCK"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    """Raised when backward is requested on a value with no recorded graph."""


class OptimizerError(FloatingPointError):
    def __init__(self, name: str, step: int):
        super().__init__(f"non-finite gradient in parameter {name!r} at step {step}")
        self.name = name
        self.step = step


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int | None = None
    kernel_size: int | None = None
    negative_slope: float = 0.2
    p: float = 0.1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {LAYER_KINDS}")
        if self.kind in ("dense", "conv2d") and (self.units is None or self.units < 1):
            raise ValueError(f"{self.kind} layer needs units >= 1")
        if self.kind == "conv2d":
            if self.kernel_size is None or self.kernel_size < 1 or self.kernel_size % 2 == 0:
                raise ValueError(f"conv2d kernel size must be odd, got {self.kernel_size}")
        if self.kind == "dropout" and not 0.0 <= self.p < 1.0:
            raise ValueError(f"dropout probability must lie in [0, 1), got {self.p}")
        if self.kind == "leaky_relu" and self.negative_slope < 0:
            raise ValueError("negative slope must be >= 0")


def dense(units: int) -> LayerSpec:
    return LayerSpec("dense", units=units)


def conv2d(channels: int, kernel_size: int) -> LayerSpec:
    return LayerSpec("conv2d", units=channels, kernel_size=kernel_size)


def leaky_relu(slope: float = 0.2) -> LayerSpec:
    return LayerSpec("leaky_relu", negative_slope=slope)


def dropout(p: float = 0.1) -> LayerSpec:
    return LayerSpec("dropout", p=p)


def batch_norm() -> LayerSpec:
    return LayerSpec("batch_norm")


def _init_slope(specs: list[LayerSpec], i: int) -> float:
    # Kaiming gain follows the activation that comes after the weight layer.
    for s in specs[i + 1:]:
        if s.kind == "leaky_relu":
            return s.negative_slope
        if s.kind in ("dense", "conv2d"):
            break
    return 1.0


def build(specs: Iterable[LayerSpec], in_size: int) -> nn.Sequential:
    """Instantiate a stack of layers.

    ``in_size`` is the feature count for dense stacks or the channel count for
    convolutional stacks. Weights get Kaiming-uniform init, biases start at zero.
    """
    specs = list(specs)
    layers: list[nn.Module] = []
    width = in_size
    for i, s in enumerate(specs):
        if s.kind == "dense":
            layer = nn.Linear(width, s.units)
            width = s.units
        elif s.kind == "conv2d":
            layer = nn.Conv2d(width, s.units, s.kernel_size, padding=s.kernel_size // 2)
            width = s.units
        elif s.kind == "leaky_relu":
            layer = nn.LeakyReLU(s.negative_slope)
        elif s.kind == "dropout":
            layer = nn.Dropout(s.p)
        else:
            layer = nn.BatchNorm2d(width)
        if isinstance(layer, (nn.Linear, nn.Conv2d)):
            a = _init_slope(specs, i)
            if a == 1.0:
                nn.init.kaiming_uniform_(layer.weight, nonlinearity="linear")
            else:
                nn.init.kaiming_uniform_(layer.weight, a=a, nonlinearity="leaky_relu")
            nn.init.zeros_(layer.bias)
        layers.append(layer)
    return nn.Sequential(*layers)


def _expected_input(net: nn.Module) -> tuple[str, int] | None:
    for m in net.modules():
        if isinstance(m, nn.Linear):
            return "features", m.in_features
        if isinstance(m, nn.Conv2d):
            return "channels", m.in_channels
    return None


def forward(net: nn.Module, x: torch.Tensor, training: bool = False) -> torch.Tensor:
    """Run ``net`` on ``x`` with dropout/batch-norm in the requested mode."""
    exp = _expected_input(net)
    if exp is not None:
        what, n = exp
        if what == "features" and x.shape[-1] != n:
            raise ShapeError(f"dense input has {x.shape[-1]} features, layer expects {n}")
        if what == "channels" and (x.dim() != 4 or x.shape[1] != n):
            raise ShapeError(f"conv input shape {tuple(x.shape)}, expected (batch, {n}, H, W)")
    net.train(training)
    return net(x)


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor] | None = None) -> dict[str, torch.Tensor]:
    """Backpropagate a scalar loss; returns gradients for ``params`` (zeros if untouched)."""
    if loss.numel() != 1:
        raise ShapeError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise GraphError("loss has no recorded graph; run forward on tracked parameters first")
    loss.backward()
    if params is None:
        return {}
    return {k: (p.grad if p.grad is not None else torch.zeros_like(p)) for k, p in params.items()}


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


class Adam:
    """Adam with bias correction over named parameters.

    Parameters whose ``.grad`` is None are treated as having a zero gradient.
    ``lr_scale`` multiplies the base rate per parameter name.
    """

    def __init__(self, params: Mapping[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]],
                 lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 lr_scale: Mapping[str, float] | None = None):
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)
        self.lr_scale = dict(lr_scale or {})

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float):
        self.state.lr = value

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {k: p.grad if p.grad is not None else torch.zeros_like(p) for k, p in self.params.items()}
        adam_step(self.state, self.params, grads, self.lr_scale)


@torch.no_grad()
def adam_step(state: AdamState, params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor],
              lr_scale: Mapping[str, float] | None = None):
    """One Adam update, in place on ``params`` and ``state``."""
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {k!r} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
        if not bool(torch.isfinite(g).all()):
            raise OptimizerError(k, state.step + 1)
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for k, p in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = torch.zeros_like(p)
            state.v[k] = torch.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        lr = state.lr * (lr_scale or {}).get(k, 1.0)
        denom = (v / c2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / c1)
    return params, state


def cosine_lr(base: float, epoch: int, total: int) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * epoch / max(total, 1)))


def worker_count() -> int:
    """Worker cap from ``PILOTFORGE_THREADS`` (default: all CPUs)."""
    raw = os.environ.get("PILOTFORGE_THREADS", "").strip()
    if not raw:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"PILOTFORGE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"PILOTFORGE_THREADS must be a positive integer, got {raw!r}")
    return n


def configure_threads() -> int:
    n = worker_count()
    torch.set_num_threads(n)
    return n


def seed_everything(seed: int):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def finite_difference_grad(fn: Callable[[], torch.Tensor], param: torch.Tensor, eps: float = 1e-4) -> torch.Tensor:
    """Central differences of scalar ``fn()`` with respect to every entry of ``param``."""
    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = float(fn())
            flat[i] = orig - eps
            fm = float(fn())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    num = (a - b).norm().item()
    den = max(a.norm().item(), b.norm().item(), 1e-12)
    return num / den


def float_state(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    """Floating-point parameters and buffers of ``module`` as float32 arrays."""
    out = {}
    for k, v in module.state_dict().items():
        if v.is_floating_point():
            out[prefix + k] = v.detach().cpu().numpy().astype(np.float32)
    return out


def load_float_state(module: nn.Module, arrays: Mapping[str, np.ndarray], prefix: str = ""):
    sd = module.state_dict()
    missing = [k for k, v in sd.items() if v.is_floating_point() and prefix + k not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {missing[:5]}")
    with torch.no_grad():
        for k, v in sd.items():
            if v.is_floating_point():
                a = arrays[prefix + k]
                if tuple(a.shape) != tuple(v.shape):
                    raise CheckpointError(f"{prefix + k}: shape {a.shape} != {tuple(v.shape)}")
                v.copy_(torch.from_numpy(np.array(a, dtype=np.float32)))


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None):
    """Write tensors as magic | version | manifest | little-endian f32 payload | crc32."""
    names = sorted(tensors)
    manifest = {
        "meta": dict(meta or {}),
        "tensors": [{"name": n, "shape": list(np.shape(tensors[n]))} for n in names],
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    body = bytearray(CHECKPOINT_MAGIC)
    body += struct.pack("<HI", CHECKPOINT_VERSION, len(mbytes))
    body += mbytes
    for n in names:
        body += np.ascontiguousarray(tensors[n], dtype="<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(body))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(bytes(body))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 14 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    version, mlen = struct.unpack("<HI", raw[4:10])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    manifest = json.loads(raw[10:10 + mlen])
    pos = 10 + mlen
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
        pos += 4 * n
    if pos != len(raw) - 4:
        raise CheckpointError(f"{path}: payload length does not match manifest")
    return tensors, manifest["meta"]
