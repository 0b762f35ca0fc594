"""Mini-batch plumbing shared by the selector, decoder and cascade trainers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .channel import ChannelDataset


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, what: str = "loss"):
        super().__init__(f"{what} became non-finite at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    augment: bool = True
    cosine: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError(f"invalid training config {self}")


def planes(grids) -> torch.Tensor:
    """Complex (..., nf, nn) -> float32 (..., 2, nf, nn) with real and imaginary planes."""
    g = np.asarray(grids)
    return torch.from_numpy(np.stack([g.real, g.imag], axis=-3).astype(np.float32))


def to_complex(x: torch.Tensor) -> np.ndarray:
    a = x.detach().cpu().numpy().astype(np.float64)
    return a[..., 0, :, :] + 1j * a[..., 1, :, :]


class Batches:
    """Shuffled (noisy, ideal) plane batches over a dataset.

    With ``augment`` each batch gets a random common phase rotation and a fresh
    noise draw at the record's stored SNR; otherwise the stored noisy grids are used.
    """

    def __init__(self, dataset: ChannelDataset, batch_size: int, augment: bool, generator: torch.Generator):
        self.ideal = planes(dataset.ideal)
        self.noisy = planes(dataset.noisy)
        power = self.ideal.pow(2).sum(1).mean(dim=(1, 2))
        snr = torch.from_numpy(np.asarray(dataset.snr_db, dtype=np.float32))
        self.sigma = torch.sqrt(power * 10.0 ** (-snr / 10.0) / 2.0)
        self.batch_size = batch_size
        self.augment = augment
        self.gen = generator

    def __len__(self) -> int:
        return math.ceil(len(self.ideal) / self.batch_size)

    def __iter__(self):
        n = len(self.ideal)
        perm = torch.randperm(n, generator=self.gen)
        for start in range(0, n, self.batch_size):
            idx = perm[start:start + self.batch_size]
            if not self.augment:
                yield self.noisy[idx], self.ideal[idx]
                continue
            h = self.ideal[idx]
            phi = 2 * math.pi * torch.rand(len(idx), generator=self.gen)
            c, s = torch.cos(phi)[:, None, None], torch.sin(phi)[:, None, None]
            re, im = h[:, 0], h[:, 1]
            h = torch.stack([c * re - s * im, s * re + c * im], dim=1)
            noise = torch.randn(h.shape, generator=self.gen) * self.sigma[idx][:, None, None, None]
            yield h + noise, h


def per_frame_mse(est: torch.Tensor, ideal: torch.Tensor) -> torch.Tensor:
    """Mean |est - ideal|^2 per frame for plane tensors (B, 2, nf, nn) or (B, 2*d)."""
    diff = (est - ideal).reshape(len(est), -1)
    return diff.pow(2).sum(1) / (diff.shape[1] // 2)
