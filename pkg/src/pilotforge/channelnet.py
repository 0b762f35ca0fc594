"""Decoder -> SRCNN -> DnCNN-B estimation cascade trained end to end."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import nn as pfnn
from .channel import ChannelDataset
from .selection import PilotPattern, gather_planes, make_decoder
from .training import Batches, DivergenceError, TrainConfig, planes, to_complex


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineSpec:
    decoder_widths: tuple[int, ...] = (256, 512, 1024)
    srcnn_channels: tuple[int, int] = (64, 32)
    srcnn_kernels: tuple[int, int, int] = (9, 1, 5)
    dncnn_depth: int = 8
    dncnn_width: int = 64
    fine_tune_decoder: bool = True

    def __post_init__(self):
        for name in ("decoder_widths", "srcnn_channels", "srcnn_kernels"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.dncnn_depth < 2:
            raise ConfigurationError("DnCNN-B needs at least an input and an output layer")


def srcnn_specs(channels: Sequence[int] = (64, 32), kernels: Sequence[int] = (9, 1, 5)) -> list[pfnn.LayerSpec]:
    c1, c2 = channels
    k1, k2, k3 = kernels
    return [pfnn.conv2d(c1, k1), pfnn.leaky_relu(0.0), pfnn.conv2d(c2, k2), pfnn.leaky_relu(0.0),
            pfnn.conv2d(2, k3)]


def dncnn_specs(depth: int = 8, width: int = 64) -> list[pfnn.LayerSpec]:
    specs = [pfnn.conv2d(width, 3), pfnn.leaky_relu(0.0)]
    for _ in range(depth - 2):
        specs += [pfnn.conv2d(width, 3), pfnn.batch_norm(), pfnn.leaky_relu(0.0)]
    specs.append(pfnn.conv2d(2, 3))
    return specs


def _shrink_last_conv(net: nn.Sequential, scale: float = 1e-3):
    """Near-zero output layer: the block starts close to the identity but every weight still gets gradient."""
    last = [m for m in net if isinstance(m, nn.Conv2d)][-1]
    with torch.no_grad():
        last.weight.mul_(scale)
    nn.init.zeros_(last.bias)


def _check_planes(x: torch.Tensor):
    if x.dim() != 4 or x.shape[1] != 2:
        raise pfnn.ShapeError(f"expected (batch, 2, nf, nn) planes, got {tuple(x.shape)}")


def srcnn_forward(net: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Super-resolution refinement with an identity skip; spatial size is preserved."""
    _check_planes(x)
    return x + net(x)


def dncnn_forward(net: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Residual denoiser: the stack predicts the noise, which is subtracted."""
    _check_planes(x)
    return x - net(x)


class EstimatorPipeline(nn.Module):
    def __init__(self, pattern: PilotPattern, spec: PipelineSpec = PipelineSpec(),
                 decoder: nn.Module | None = None):
        super().__init__()
        self.pattern = pattern
        self.spec = spec
        self.nf, self.nn = pattern.nf, pattern.nn
        d = self.nf * self.nn
        self.decoder = decoder if decoder is not None else make_decoder(len(pattern), d, spec.decoder_widths)
        self.srcnn = pfnn.build(srcnn_specs(spec.srcnn_channels, spec.srcnn_kernels), 2)
        self.dncnn = pfnn.build(dncnn_specs(spec.dncnn_depth, spec.dncnn_width), 2)
        # cascade starts (almost) as the identity on the decoder output
        _shrink_last_conv(self.srcnn)
        _shrink_last_conv(self.dncnn)
        self.register_buffer("flat_idx", torch.from_numpy(pattern.flat), persistent=False)

    def lowres(self, noisy: torch.Tensor) -> torch.Tensor:
        """Noisy planes (B, 2, nf, nn) -> decoder grid estimate in the same layout."""
        _check_planes(noisy)
        if noisy.shape[2:] != (self.nf, self.nn):
            raise pfnn.ShapeError(f"frame {tuple(noisy.shape[2:])} does not match pattern grid {self.nf}x{self.nn}")
        out = self.decoder(gather_planes(noisy, self.flat_idx))
        return out.reshape(len(noisy), 2, self.nf, self.nn)

    def refine(self, lowres: torch.Tensor) -> torch.Tensor:
        return dncnn_forward(self.dncnn, srcnn_forward(self.srcnn, lowres))

    def forward(self, noisy: torch.Tensor) -> torch.Tensor:
        return self.refine(self.lowres(noisy))


def cascade_loss(pipeline: EstimatorPipeline, x: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    out = pipeline(x)
    return (out - target).pow(2).sum(dim=(1, 2, 3)).mean()


def train_end_to_end(dataset: ChannelDataset, pattern: PilotPattern, decoder: nn.Module | None,
                     spec: PipelineSpec = PipelineSpec(), config: TrainConfig | None = None,
                     seed: int = 0) -> tuple[EstimatorPipeline, list[dict]]:
    """Train SRCNN and DnCNN-B (and optionally the decoder) on one loss over all SNRs."""
    if decoder is None:
        raise ConfigurationError("end-to-end training needs a trained decoder for the pilot pattern")
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if (dataset.nf, dataset.nn) != (pattern.nf, pattern.nn):
        raise ConfigurationError("pattern frame does not match dataset grid")
    config = config or TrainConfig(lr=3e-4)
    pfnn.seed_everything(seed)
    gen = torch.Generator().manual_seed(seed)
    dec = make_decoder(len(pattern), pattern.nf * pattern.nn, spec.decoder_widths)
    try:
        dec.load_state_dict(decoder.state_dict())
    except RuntimeError as e:
        raise ConfigurationError(f"decoder does not fit a {len(pattern)}-pilot pattern: {e}") from e
    pipeline = EstimatorPipeline(pattern, spec, dec)
    params = {f"srcnn.{n}": p for n, p in pipeline.srcnn.named_parameters()}
    params.update({f"dncnn.{n}": p for n, p in pipeline.dncnn.named_parameters()})
    if spec.fine_tune_decoder:
        params.update({f"decoder.{n}": p for n, p in pipeline.decoder.named_parameters()})
    else:
        pipeline.decoder.requires_grad_(False)
    opt = pfnn.Adam(params, lr=config.lr)
    batches = Batches(dataset, config.batch_size, config.augment, gen)
    d = pattern.nf * pattern.nn
    history = []
    for epoch in range(config.epochs):
        pipeline.train()
        if not spec.fine_tune_decoder:
            pipeline.decoder.eval()
        if config.cosine:
            opt.lr = pfnn.cosine_lr(config.lr, epoch, config.epochs)
        total, count = 0.0, 0
        for x, target in batches:
            loss = cascade_loss(pipeline, x, target)
            opt.zero_grad()
            pfnn.backward(loss)
            opt.step()
            total += loss.item() * len(x)
            count += len(x)
        mean_loss = total / count
        if not math.isfinite(mean_loss):
            raise DivergenceError(epoch)
        history.append({"epoch": epoch, "loss": mean_loss, "mse": mean_loss / d})
    pipeline.eval()
    return pipeline, history


def estimate_batch(pipeline: EstimatorPipeline, noisy, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Final and decoder-only estimates for complex grids of shape (N, nf, nn)."""
    x = planes(noisy)
    finals, lows = [], []
    pipeline.eval()
    with torch.no_grad():
        for s in range(0, len(x), batch_size):
            low = pipeline.lowres(x[s:s + batch_size])
            finals.append(pipeline.refine(low))
            lows.append(low)
    return to_complex(torch.cat(finals)), to_complex(torch.cat(lows))


def estimate(pipeline: EstimatorPipeline, noisy_grid) -> np.ndarray:
    g = np.asarray(noisy_grid)
    if g.shape != (pipeline.nf, pipeline.nn):
        raise pfnn.ShapeError(f"grid {g.shape} does not match pipeline frame {pipeline.nf}x{pipeline.nn}")
    return estimate_batch(pipeline, g[None])[0][0]


def mse(est, ideal) -> tuple[float, float]:
    """(mean |est - ideal|^2, the same divided by mean |ideal|^2)."""
    est, ideal = np.asarray(est), np.asarray(ideal)
    if est.shape != ideal.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {ideal.shape}")
    raw = float(np.mean(np.abs(est - ideal) ** 2))
    power = float(np.mean(np.abs(ideal) ** 2))
    return raw, (raw / power if power > 0 else math.inf)


def save_pipeline(path: str | Path, pipeline: EstimatorPipeline, meta: dict | None = None):
    tensors = pfnn.float_state(pipeline.decoder, "decoder.")
    tensors.update(pfnn.float_state(pipeline.srcnn, "srcnn."))
    tensors.update(pfnn.float_state(pipeline.dncnn, "dncnn."))
    m = {
        "kind": "pipeline",
        "spec": asdict(pipeline.spec),
        "pattern": pipeline.pattern.to_text(),
        "pattern_sha256": pipeline.pattern.digest(),
    }
    m.update(meta or {})
    pfnn.save_checkpoint(path, tensors, m)


def load_pipeline(path: str | Path) -> tuple[EstimatorPipeline, dict]:
    tensors, meta = pfnn.load_checkpoint(path)
    if meta.get("kind") != "pipeline":
        raise pfnn.CheckpointError(f"{path}: not a pipeline checkpoint")
    pattern = PilotPattern.from_text(meta["pattern"])
    if pattern.digest() != meta["pattern_sha256"]:
        raise pfnn.CheckpointError(f"{path}: pattern hash mismatch")
    pipeline = EstimatorPipeline(pattern, PipelineSpec(**meta["spec"]))
    pfnn.load_float_state(pipeline.decoder, tensors, "decoder.")
    pfnn.load_float_state(pipeline.srcnn, tensors, "srcnn.")
    pfnn.load_float_state(pipeline.dncnn, tensors, "dncnn.")
    pipeline.eval()
    return pipeline, meta
