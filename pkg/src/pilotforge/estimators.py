"""Baseline estimators: LS at pilots, lattice pilot layout, decoder interpolation, LMMSE."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import nn as pfnn
from .channel import ChannelDataset
from .selection import PilotPattern, gather_planes, make_decoder
from .training import Batches, DivergenceError, TrainConfig, planes


class PilotSymbolError(ZeroDivisionError):
    pass


class NumericalError(ArithmeticError):
    pass


def ls_estimate(y_p, x_p) -> np.ndarray:
    """Per-pilot least-squares channel estimate y_p / x_p."""
    y_p = np.asarray(y_p, dtype=np.complex128)
    x_p = np.asarray(x_p, dtype=np.complex128)
    if y_p.shape != x_p.shape:
        raise ValueError(f"received {y_p.shape} and pilot {x_p.shape} shapes differ")
    zero = np.flatnonzero(x_p == 0)
    if zero.size:
        raise PilotSymbolError(f"pilot symbol at index {int(zero[0])} is zero")
    return y_p / x_p


def lattice_columns(nn: int, count: int) -> list[int]:
    return [int((j + 0.5) * nn / count) for j in range(count)]


def equally_spaced_pattern(nf: int, nn: int, np_: int) -> PilotPattern:
    """LTE-like lattice: pilot columns centred in time, equal subcarrier stride per column.

    Two columns (slots 3 and 10 of 14) are used whenever they can hold ``np_``
    pilots; denser requests add columns until each holds at most ``nf`` pilots.
    """
    if np_ < 2 or np_ % 2:
        raise ValueError(f"pilot count must be even and >= 2, got {np_}")
    if np_ > nf * nn:
        raise ValueError(f"{np_} pilots do not fit a {nf}x{nn} grid")
    n_cols = next((c for c in range(2, nn + 1) if np_ % c == 0 and np_ // c <= nf), None)
    if n_cols is None:
        raise ValueError(f"no equal-column lattice holds {np_} pilots on a {nf}x{nn} grid")
    per_col = np_ // n_cols
    rows = [int((i + 0.5) * nf / per_col) for i in range(per_col)]
    cols = lattice_columns(nn, n_cols)
    return PilotPattern(tuple((f, t) for t in cols for f in rows), nf, nn)


@dataclass(frozen=True)
class PilotObservation:
    pattern: PilotPattern
    values: np.ndarray  # complex, one per pilot

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.complex128).reshape(-1)
        object.__setattr__(self, "values", v)
        if len(v) != len(self.pattern):
            raise ValueError(f"{len(v)} pilot values for a {len(self.pattern)}-pilot pattern")

    @classmethod
    def from_grid(cls, grid, pattern: PilotPattern, x_p=None) -> "PilotObservation":
        y = np.asarray(grid).reshape(-1)[pattern.flat]
        return cls(pattern, ls_estimate(y, np.ones_like(y) if x_p is None else x_p))


def decoder_interpolate(u, decoder: nn.Module, nf: int, nn: int) -> np.ndarray:
    """Low-resolution grid estimate from k x 2 pilot values (single frame or a batch)."""
    u = np.asarray(u, dtype=np.float32)
    single = u.ndim == 2
    batch = torch.from_numpy(u.reshape(1 if single else len(u), -1))
    with torch.no_grad():
        out = pfnn.forward(decoder, batch, training=False)
    if out.shape[1] != 2 * nf * nn:
        raise pfnn.ShapeError(f"decoder emits {out.shape[1]} values, {nf}x{nn} grid needs {2 * nf * nn}")
    g = out.numpy().astype(np.float64).reshape(-1, 2, nf, nn)
    g = g[:, 0] + 1j * g[:, 1]
    return g[0] if single else g


def decoder_loss(decoder: nn.Module, flat_idx: torch.Tensor, x: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    out = decoder(gather_planes(x, flat_idx))
    return (out - target.reshape(len(x), -1)).pow(2).sum(1).mean()


def train_decoder(dataset: ChannelDataset, pattern: PilotPattern, widths: Sequence[int] = (256, 512, 1024),
                  config: TrainConfig | None = None, seed: int = 0,
                  init: nn.Module | None = None) -> tuple[nn.Sequential, list[dict]]:
    """Fit the interpolation MLP on hard-gathered pilots of a fixed pattern.

    ``init`` warm-starts from an existing decoder (e.g. the one trained with the selector).
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    config = config or TrainConfig()
    d = dataset.nf * dataset.nn
    pfnn.seed_everything(seed)
    gen = torch.Generator().manual_seed(seed)
    decoder = make_decoder(len(pattern), d, widths)
    if init is not None:
        decoder.load_state_dict(init.state_dict())
    flat_idx = torch.from_numpy(pattern.flat)
    opt = pfnn.Adam(dict(decoder.named_parameters()), lr=config.lr)
    batches = Batches(dataset, config.batch_size, config.augment, gen)
    history = []
    decoder.train()
    for epoch in range(config.epochs):
        if config.cosine:
            opt.lr = pfnn.cosine_lr(config.lr, epoch, config.epochs)
        total, count = 0.0, 0
        for x, target in batches:
            loss = decoder_loss(decoder, flat_idx, x, target)
            opt.zero_grad()
            pfnn.backward(loss)
            opt.step()
            total += loss.item() * len(x)
            count += len(x)
        mean_loss = total / count
        if not math.isfinite(mean_loss):
            raise DivergenceError(epoch)
        history.append({"epoch": epoch, "loss": mean_loss, "mse": mean_loss / d})
    decoder.eval()
    return decoder, history


def decoder_estimates(dataset: ChannelDataset, pattern: PilotPattern, decoder: nn.Module,
                      batch_size: int = 256) -> np.ndarray:
    """LS-at-pilots (unit pilot symbols) followed by decoder interpolation, for every record."""
    flat_idx = torch.from_numpy(pattern.flat)
    x = planes(dataset.noisy)
    outs = []
    decoder.eval()
    with torch.no_grad():
        for s in range(0, len(x), batch_size):
            outs.append(decoder(gather_planes(x[s:s + batch_size], flat_idx)))
    g = torch.cat(outs).numpy().astype(np.float64).reshape(-1, 2, dataset.nf, dataset.nn)
    return g[:, 0] + 1j * g[:, 1]


@dataclass
class ChannelStatistics:
    pattern: PilotPattern
    r_hp: np.ndarray  # (d, k)
    r_pp: np.ndarray  # (k, k)
    count: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        k, d = len(self.pattern), self.pattern.nf * self.pattern.nn
        if self.r_hp.shape != (d, k) or self.r_pp.shape != (k, k):
            raise ValueError(f"statistics shapes {self.r_hp.shape}, {self.r_pp.shape} do not match d={d}, k={k}")

    def save(self, path: str | Path, dataset_seed: int | None = None):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(fh, r_hp=self.r_hp, r_pp=self.r_pp, count=self.count,
                     pattern=np.array(self.pattern.to_text()), pattern_sha256=np.array(self.pattern.digest()),
                     dataset_seed=np.array(-1 if dataset_seed is None else dataset_seed))

    @classmethod
    def load(cls, path: str | Path, pattern: PilotPattern | None = None,
             dataset_seed: int | None = None) -> "ChannelStatistics":
        with np.load(path) as z:
            stored = PilotPattern.from_text(str(z["pattern"]))
            if pattern is not None and str(z["pattern_sha256"]) != pattern.digest():
                raise ValueError(f"{path}: statistics were fitted for a different pattern")
            seed = int(z["dataset_seed"])
            if dataset_seed is not None and seed != dataset_seed:
                raise ValueError(f"{path}: statistics were fitted on dataset seed {seed}, not {dataset_seed}")
            return cls(stored, z["r_hp"], z["r_pp"], int(z["count"]), {"dataset_seed": seed})


def fit_statistics(dataset: ChannelDataset, pattern: PilotPattern) -> ChannelStatistics:
    """Empirical second-order statistics of the ideal channels at and around the pilots."""
    if len(dataset) == 0:
        raise ValueError("cannot fit statistics on an empty dataset")
    if (dataset.nf, dataset.nn) != (pattern.nf, pattern.nn):
        raise ValueError("pattern frame does not match dataset grid")
    if len(dataset) < len(pattern):
        warnings.warn(f"{len(dataset)} frames for {len(pattern)} pilots: pilot correlation is rank deficient",
                      RuntimeWarning)
    h = dataset.ideal.reshape(len(dataset), -1).astype(np.complex128)
    hp = h[:, pattern.flat]
    n = len(h)
    r_hp = h.T @ hp.conj() / n
    r_pp = hp.T @ hp.conj() / n
    r_pp = 0.5 * (r_pp + r_pp.conj().T)
    return ChannelStatistics(pattern, r_hp, r_pp, n)


def mmse_weights(stats: ChannelStatistics, noise_var: float) -> np.ndarray:
    """LMMSE interpolation matrix R_hp (R_pp + noise_var I)^-1, shape (d, k).

    A Tikhonov term of 1e-8 * trace(R_pp) / k is added only when the system is
    ill-conditioned (cond > 1e10); well-posed systems are solved exactly.
    """
    if noise_var < 0:
        raise ValueError("noise variance must be nonnegative")
    k = len(stats.pattern)
    a = stats.r_pp + noise_var * np.eye(k)
    try:
        if np.linalg.cond(a) > 1e10:
            a = a + 1e-8 * float(np.real(np.trace(stats.r_pp))) / k * np.eye(k)
            if np.linalg.cond(a) > 1e14:
                raise np.linalg.LinAlgError("matrix is numerically singular")
        # W a = R_hp  ->  a^H W^H = R_hp^H
        w = np.linalg.solve(a.conj().T, stats.r_hp.conj().T).conj().T
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"pilot correlation is singular after regularization: {e}") from e
    return w


def mmse_estimate(obs: PilotObservation, stats: ChannelStatistics, noise_var: float) -> np.ndarray:
    if obs.pattern.digest() != stats.pattern.digest():
        raise ValueError("observation and statistics use different pilot patterns")
    w = mmse_weights(stats, noise_var)
    return (w @ obs.values).reshape(stats.pattern.nf, stats.pattern.nn)
