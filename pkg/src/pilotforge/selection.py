"""Concrete-selector autoencoder for choosing pilot locations on the time-frequency grid."""

from __future__ import annotations

import hashlib
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
from .training import Batches, DivergenceError, TrainConfig

CONVERGENCE_THRESHOLD = 0.95


class ConvergenceWarning(UserWarning):
    pass


class PatternError(ValueError):
    pass


@dataclass(frozen=True)
class PilotPattern:
    """Ordered pilot locations as (subcarrier, time-slot) pairs on an nf x nn grid."""

    indices: tuple[tuple[int, int], ...]
    nf: int = 72
    nn: int = 14

    def __post_init__(self):
        idx = tuple((int(f), int(t)) for f, t in self.indices)
        object.__setattr__(self, "indices", idx)
        if not idx:
            raise PatternError("pattern needs at least one pilot")
        if len(set(idx)) != len(idx):
            raise PatternError("pilot locations must be distinct")
        for f, t in idx:
            if not (0 <= f < self.nf and 0 <= t < self.nn):
                raise PatternError(f"pilot ({f}, {t}) outside {self.nf}x{self.nn} grid")

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def k(self) -> int:
        return len(self.indices)

    @property
    def flat(self) -> np.ndarray:
        return np.array([f * self.nn + t for f, t in self.indices], dtype=np.int64)

    @classmethod
    def from_flat(cls, flat: Sequence[int], nf: int, nn: int) -> "PilotPattern":
        return cls(tuple((int(j) // nn, int(j) % nn) for j in flat), nf, nn)

    def to_text(self) -> str:
        lines = [f"# pilot pattern nf={self.nf} nn={self.nn} k={self.k}"]
        lines += [f"{f},{t}" for f, t in self.indices]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PilotPattern":
        nf = nn = None
        pairs = []
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                fields = dict(tok.split("=", 1) for tok in line[1:].split() if "=" in tok)
                nf, nn = int(fields["nf"]), int(fields["nn"])
                k = int(fields["k"])
                continue
            f, t = line.split(",")
            pairs.append((int(f), int(t)))
        if nf is None:
            raise PatternError("pattern file lacks the header comment")
        if len(pairs) != k:
            raise PatternError(f"pattern header says k={k}, found {len(pairs)} entries")
        return cls(tuple(pairs), nf, nn)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "PilotPattern":
        return cls.from_text(Path(path).read_text())

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def distinct_subcarriers(self) -> int:
        return len({f for f, _ in self.indices})

    def render(self) -> str:
        """ASCII picture, one row per subcarrier, 'X' on pilots."""
        cells = [["."] * self.nn for _ in range(self.nf)]
        for f, t in self.indices:
            cells[f][t] = "X"
        return "\n".join("".join(row) for row in cells) + "\n"


@dataclass(frozen=True)
class AnnealSchedule:
    t0: float = 10.0
    tb: float = 0.01
    total_epochs: int = 100

    def __post_init__(self):
        if not self.t0 > self.tb > 0:
            raise ValueError(f"need t0 > tb > 0, got t0={self.t0}, tb={self.tb}")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")


def anneal(schedule: AnnealSchedule, epoch: int) -> float:
    if not 0 <= epoch <= schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    if epoch == schedule.total_epochs:
        return schedule.tb
    return schedule.t0 * (schedule.tb / schedule.t0) ** (epoch / schedule.total_epochs)


_U_LO = 1e-20
_U_HI = 1.0 - 1e-7


def sample_gumbel(count: int, seed) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be >= 1")
    u = np.random.default_rng(seed).uniform(size=count)
    return gumbel_from_uniform(u)


def gumbel_from_uniform(u):
    u = np.clip(u, _U_LO, _U_HI)
    return -np.log(-np.log(u))


def _torch_gumbel(shape, generator: torch.Generator | None, dtype=torch.float32) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=dtype).clamp_(_U_LO, _U_HI)
    return -torch.log(-torch.log(u))


def concrete_forward(alpha_row, temperature: float, gumbel) -> np.ndarray:
    """One Concrete sample: softmax((log alpha + g) / T), max-shifted."""
    alpha_row = np.asarray(alpha_row, dtype=np.float64)
    if np.any(alpha_row <= 0) or not np.all(np.isfinite(alpha_row)):
        raise ValueError("concrete logits alpha must be finite and strictly positive")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = (np.log(alpha_row) + np.asarray(gumbel, dtype=np.float64)) / temperature
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


class ConcreteSelector(nn.Module):
    """k selector nodes over d inputs; ``log_alpha`` holds log of the positive logits."""

    def __init__(self, k: int, d: int, temperature: float = 10.0, init_scale: float = 0.01,
                 generator: torch.Generator | None = None):
        super().__init__()
        if not 1 <= k <= d:
            raise ValueError(f"need 1 <= k <= d, got k={k}, d={d}")
        self.log_alpha = nn.Parameter(init_scale * torch.randn(k, d, generator=generator))
        self.temperature = temperature

    @classmethod
    def from_alpha(cls, alpha, temperature: float = 10.0) -> "ConcreteSelector":
        alpha = torch.as_tensor(np.asarray(alpha), dtype=torch.float32)
        if bool((alpha <= 0).any()):
            raise ValueError("alpha must be strictly positive")
        sel = cls(alpha.shape[0], alpha.shape[1], temperature)
        with torch.no_grad():
            sel.log_alpha.copy_(alpha.log())
        return sel

    @property
    def k(self) -> int:
        return self.log_alpha.shape[0]

    @property
    def d(self) -> int:
        return self.log_alpha.shape[1]

    @property
    def alpha(self) -> torch.Tensor:
        return self.log_alpha.exp()

    def probs(self) -> torch.Tensor:
        return torch.softmax(self.log_alpha, dim=-1)

    def mean_max_prob(self) -> float:
        with torch.no_grad():
            return float(self.probs().max(dim=-1).values.mean())

    def sample(self, batch: int, generator: torch.Generator | None = None, gumbel: torch.Tensor | None = None):
        """Concrete samples m of shape (batch, k, d); one Gumbel draw per node per sample."""
        if gumbel is None:
            gumbel = _torch_gumbel((batch, self.k, self.d), generator, self.log_alpha.dtype)
        return torch.softmax((self.log_alpha + gumbel) / self.temperature, dim=-1)

    def forward(self, x: torch.Tensor, generator: torch.Generator | None = None,
                gumbel: torch.Tensor | None = None) -> torch.Tensor:
        """x: (B, 2, d) real/imaginary parts -> u: (B, k, 2)."""
        if x.dim() != 3 or x.shape[1] != 2 or x.shape[2] != self.d:
            raise pfnn.ShapeError(f"selector input {tuple(x.shape)}, expected (batch, 2, {self.d})")
        m = self.sample(len(x), generator, gumbel)
        return torch.einsum("bcd,bkd->bkc", x, m)


def _as_plane_vector(h_noisy) -> torch.Tensor:
    a = np.asarray(h_noisy)
    if np.iscomplexobj(a):
        flat = a.reshape(-1)
        a = np.stack([flat.real, flat.imag])
    return torch.as_tensor(a, dtype=torch.float32)


def selector_forward(sel: ConcreteSelector, h_noisy, seed=None, gumbel=None) -> np.ndarray:
    """Selector output u (k x 2) for one grid, given as a complex grid or a (2, d) array."""
    x = _as_plane_vector(h_noisy)
    if x.shape != (2, sel.d):
        raise pfnn.ShapeError(f"grid has {x.shape} planes, selector expects (2, {sel.d})")
    gen = torch.Generator().manual_seed(int(seed)) if seed is not None else None
    if gumbel is not None:
        gumbel = torch.as_tensor(np.asarray(gumbel), dtype=sel.log_alpha.dtype).reshape(1, sel.k, sel.d)
    with torch.no_grad():
        u = sel(x.to(sel.log_alpha.dtype)[None], generator=gen, gumbel=gumbel)[0]
    return u.numpy()


def extract_pattern(sel: ConcreteSelector | np.ndarray, nf: int, nn: int) -> tuple[PilotPattern, int]:
    """Argmax location per node; a taken location passes to the node's next-best logit.

    Returns the pattern and the number of collisions resolved.
    """
    logits = sel.log_alpha.detach().cpu().numpy() if isinstance(sel, ConcreteSelector) else np.log(sel)
    k, d = logits.shape
    if d != nf * nn:
        raise PatternError(f"selector width {d} does not match {nf}x{nn} grid")
    taken: set[int] = set()
    chosen = []
    collisions = 0
    for row in logits:
        order = np.argsort(-row, kind="stable")
        j = int(order[0])
        if j in taken:
            collisions += 1
            j = next(int(c) for c in order if int(c) not in taken)
        taken.add(j)
        chosen.append(j)
    return PilotPattern.from_flat(chosen, nf, nn), collisions


def argmax_gather(grid, pattern: PilotPattern) -> np.ndarray:
    """(k, 2) real/imaginary values of a complex grid at the pattern locations."""
    grid = np.asarray(grid)
    if grid.shape != (pattern.nf, pattern.nn):
        raise PatternError(f"grid {grid.shape} does not match pattern frame {pattern.nf}x{pattern.nn}")
    v = grid.reshape(-1)[pattern.flat]
    return np.stack([v.real, v.imag], axis=1)


def gather_planes(x: torch.Tensor, flat_idx: torch.Tensor) -> torch.Tensor:
    """(B, 2, nf, nn) planes -> (B, 2k) decoder input ordered re_0, im_0, re_1, ..."""
    v = x.reshape(len(x), 2, -1)[:, :, flat_idx]
    return v.transpose(1, 2).reshape(len(x), -1)


def decoder_specs(d: int, widths: Sequence[int] = (256, 512, 1024), slope: float = 0.2,
                  p: float = 0.1) -> list[pfnn.LayerSpec]:
    specs = []
    for w in widths:
        specs += [pfnn.dense(w), pfnn.leaky_relu(slope), pfnn.dropout(p)]
    specs.append(pfnn.dense(2 * d))
    return specs


def make_decoder(k: int, d: int, widths: Sequence[int] = (256, 512, 1024), slope: float = 0.2,
                 p: float = 0.1) -> nn.Sequential:
    """MLP mapping 2k pilot features to 2d outputs (real plane then imaginary plane)."""
    return pfnn.build(decoder_specs(d, widths, slope, p), 2 * k)


def selector_loss(selector: ConcreteSelector, decoder: nn.Module, x: torch.Tensor, target: torch.Tensor,
                  gumbel: torch.Tensor | None = None, generator: torch.Generator | None = None) -> torch.Tensor:
    """Mean over samples of the squared reconstruction error norm; x and target are (B, 2, nf, nn)."""
    b = len(x)
    u = selector(x.reshape(b, 2, -1), generator=generator, gumbel=gumbel)
    out = decoder(u.reshape(b, -1))
    return (out - target.reshape(b, -1)).pow(2).sum(1).mean()


@dataclass
class SelectorResult:
    selector: ConcreteSelector
    decoder: nn.Sequential
    pattern: PilotPattern
    collisions: int
    history: list[dict] = field(default_factory=list)

    @property
    def final_mean_max_prob(self) -> float:
        return self.history[-1]["mean_max_prob"]


def train_selector(dataset: ChannelDataset, k: int, schedule: AnnealSchedule | None = None,
                   decoder_widths: Sequence[int] = (256, 512, 1024), config: TrainConfig | None = None,
                   seed: int = 0, selector_lr: float = 5e-2) -> SelectorResult:
    """Jointly fit selector logits and decoder on (noisy -> ideal) frames with annealed temperature."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    config = config or TrainConfig(cosine=False)
    schedule = schedule or AnnealSchedule(total_epochs=max(config.epochs - 1, 1))
    d = dataset.nf * dataset.nn
    pfnn.seed_everything(seed)
    gen = torch.Generator().manual_seed(seed)
    selector = ConcreteSelector(k, d, schedule.t0, generator=gen)
    decoder = make_decoder(k, d, decoder_widths)
    params = {"selector.log_alpha": selector.log_alpha}
    params.update({f"decoder.{n}": p for n, p in decoder.named_parameters()})
    opt = pfnn.Adam(params, lr=config.lr, lr_scale={"selector.log_alpha": selector_lr / config.lr})
    batches = Batches(dataset, config.batch_size, config.augment, gen)
    history = []
    decoder.train()
    for epoch in range(config.epochs):
        selector.temperature = anneal(schedule, min(epoch, schedule.total_epochs))
        if config.cosine:
            opt.lr = pfnn.cosine_lr(config.lr, epoch, config.epochs)
        total, count = 0.0, 0
        for x, target in batches:
            loss = selector_loss(selector, decoder, x, target, generator=gen)
            opt.zero_grad()
            pfnn.backward(loss)
            opt.step()
            total += loss.item() * len(x)
            count += len(x)
        mean_loss = total / count
        if not math.isfinite(mean_loss):
            raise DivergenceError(epoch)
        history.append({
            "epoch": epoch,
            "temperature": selector.temperature,
            "loss": mean_loss,
            "mse": mean_loss / d,
            "mean_max_prob": selector.mean_max_prob(),
        })
    decoder.eval()
    pattern, collisions = extract_pattern(selector, dataset.nf, dataset.nn)
    result = SelectorResult(selector, decoder, pattern, collisions, history)
    if result.final_mean_max_prob < CONVERGENCE_THRESHOLD:
        warnings.warn(f"selector mean max probability {result.final_mean_max_prob:.3f} is below "
                      f"{CONVERGENCE_THRESHOLD}; the selection may not be discrete yet", ConvergenceWarning)
    return result


def save_selector(path: str | Path, result: SelectorResult, meta: dict | None = None):
    # log domain: raw alpha overflows float32 once logits grow past ~88
    tensors = {"selector.log_alpha": result.selector.log_alpha.detach().numpy()}
    tensors.update(pfnn.float_state(result.decoder, "decoder."))
    m = {
        "kind": "selector",
        "k": result.selector.k,
        "d": result.selector.d,
        "nf": result.pattern.nf,
        "nn": result.pattern.nn,
        "decoder_widths": [l.out_features for l in result.decoder if isinstance(l, nn.Linear)][:-1],
        "temperature": result.selector.temperature,
        "collisions": result.collisions,
        "pattern_sha256": result.pattern.digest(),
        "mean_max_prob": result.final_mean_max_prob if result.history else None,
    }
    m.update(meta or {})
    pfnn.save_checkpoint(path, tensors, m)


def load_selector(path: str | Path) -> tuple[ConcreteSelector, nn.Sequential, dict]:
    tensors, meta = pfnn.load_checkpoint(path)
    if meta.get("kind") != "selector":
        raise pfnn.CheckpointError(f"{path}: not a selector checkpoint")
    log_alpha = torch.from_numpy(tensors["selector.log_alpha"])
    sel = ConcreteSelector(log_alpha.shape[0], log_alpha.shape[1], meta["temperature"])
    with torch.no_grad():
        sel.log_alpha.copy_(log_alpha)
    dec = make_decoder(meta["k"], meta["d"], meta["decoder_widths"])
    pfnn.load_float_state(dec, tensors, "decoder.")
    dec.eval()
    return sel, dec, meta
