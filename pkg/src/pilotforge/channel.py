"""Synthetic tapped-delay-line OFDM channel frames, AWGN, and the dataset file format."""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0
NO_NOISE = math.inf

DATASET_MAGIC = b"PFDS"
DATASET_VERSION = 1

# ITU-R M.1225 Vehicular-A
VEH_A_DELAYS_NS = (0.0, 310.0, 710.0, 1090.0, 1730.0, 2510.0)
VEH_A_POWERS_DB = (0.0, -1.0, -9.0, -10.0, -15.0, -20.0)


class DegenerateInputError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelProfile:
    delays: tuple[float, ...] = tuple(d * 1e-9 for d in VEH_A_DELAYS_NS)
    powers_db: tuple[float, ...] = VEH_A_POWERS_DB
    carrier_hz: float = 2.1e9
    subcarrier_spacing: float = 15e3
    symbol_duration: float = 1e-3 / 14
    speed: float = 50 / 3.6
    n_sinusoids: int = 32

    def __post_init__(self):
        object.__setattr__(self, "delays", tuple(float(d) for d in self.delays))
        object.__setattr__(self, "powers_db", tuple(float(p) for p in self.powers_db))
        if not self.delays or len(self.delays) != len(self.powers_db):
            raise ValueError("profile needs one power per tap delay")
        if self.delays[0] < 0 or any(b <= a for a, b in zip(self.delays, self.delays[1:])):
            raise ValueError("tap delays must be nonnegative and strictly increasing")
        if self.subcarrier_spacing <= 0 or self.symbol_duration <= 0 or self.carrier_hz <= 0:
            raise ValueError("carrier, spacing and symbol duration must be positive")
        if self.speed < 0:
            raise ValueError("speed must be nonnegative")
        if self.n_sinusoids < 1:
            raise ValueError("n_sinusoids must be >= 1")

    @property
    def tap_powers(self) -> np.ndarray:
        p = 10.0 ** (np.asarray(self.powers_db) / 10.0)
        return p / p.sum()

    @property
    def doppler_hz(self) -> float:
        return doppler_frequency(self.speed, self.carrier_hz)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["delays"] = list(self.delays)
        d["powers_db"] = list(self.powers_db)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelProfile":
        return cls(**d)


def veh_a(**overrides) -> ChannelProfile:
    return ChannelProfile(**overrides)


def doppler_frequency(speed: float, carrier_hz: float) -> float:
    return speed * carrier_hz / SPEED_OF_LIGHT


def generate_channel(profile: ChannelProfile, seed, nf: int = 72, nn: int = 14) -> np.ndarray:
    """One nf x nn frequency response frame.

    Each tap is a sum of ``n_sinusoids`` Doppler-shifted plane waves with random
    arrival angles and phases, scaled so its mean power equals the tap power.
    ``seed`` is an int or a ``numpy.random.Generator``.
    """
    if nf < 1 or nn < 1:
        raise ValueError(f"grid must be at least 1x1, got {nf}x{nn}")
    rng = np.random.default_rng(seed)
    n_taps = len(profile.delays)
    m = profile.n_sinusoids
    angles = rng.uniform(0.0, 2 * np.pi, (n_taps, m))
    phases = rng.uniform(0.0, 2 * np.pi, (n_taps, m))
    t = np.arange(nn) * profile.symbol_duration
    doppler = 2 * np.pi * profile.doppler_hz * np.cos(angles)
    waves = np.exp(1j * (doppler[:, :, None] * t[None, None, :] + phases[:, :, None]))
    taps = np.sqrt(profile.tap_powers / m)[:, None] * waves.sum(axis=1)
    f = np.arange(nf) * profile.subcarrier_spacing
    steering = np.exp(-2j * np.pi * f[:, None] * np.asarray(profile.delays)[None, :])
    # elementwise product + ordered sum rather than a BLAS matmul, so identical
    # tap columns (zero Doppler) give bit-identical grid columns
    return (steering[:, :, None] * taps[None, :, :]).sum(axis=1)


def add_awgn(grid: np.ndarray, snr_db: float, seed) -> np.ndarray:
    """Add circular complex Gaussian noise at ``snr_db`` relative to the grid's mean power.

    ``snr_db = NO_NOISE`` (+inf) returns an exact copy.
    """
    grid = np.asarray(grid)
    if not np.all(np.isfinite(grid)):
        raise ValueError("grid contains non-finite entries")
    if snr_db == NO_NOISE:
        return grid.copy()
    power = float(np.mean(np.abs(grid) ** 2))
    if power == 0.0:
        raise DegenerateInputError("SNR is undefined for an all-zero grid")
    rng = np.random.default_rng(seed)
    sigma2 = power * 10.0 ** (-snr_db / 10.0)
    noise = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
    return grid + math.sqrt(sigma2 / 2) * noise


def noise_variance(grid: np.ndarray, snr_db: float) -> float:
    return float(np.mean(np.abs(grid) ** 2)) * 10.0 ** (-snr_db / 10.0)


@dataclass
class ChannelDataset:
    profile: ChannelProfile
    nf: int
    nn: int
    snr_list: tuple[float, ...]
    seed: int
    split: str
    ideal: np.ndarray  # (N, nf, nn) complex64
    noisy: np.ndarray
    snr_db: np.ndarray  # (N,) float32
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.snr_list = tuple(float(s) for s in self.snr_list)
        n = len(self.ideal)
        if self.ideal.shape != (n, self.nf, self.nn) or self.noisy.shape != self.ideal.shape:
            raise DatasetError(f"record grids must be ({n}, {self.nf}, {self.nn})")
        if self.snr_db.shape != (n,):
            raise DatasetError("one SNR per record required")
        if n and not np.all(np.isin(self.snr_db, np.asarray(self.snr_list, dtype=np.float32))):
            raise DatasetError("record SNR outside the header SNR list")

    def __len__(self) -> int:
        return len(self.ideal)

    def subset(self, mask) -> "ChannelDataset":
        mask = np.asarray(mask)
        return ChannelDataset(self.profile, self.nf, self.nn, self.snr_list, self.seed, self.split,
                              self.ideal[mask], self.noisy[mask], self.snr_db[mask], dict(self.meta))

    def snr_window(self, lo: float = -math.inf, hi: float = math.inf) -> "ChannelDataset":
        return self.subset((self.snr_db >= lo) & (self.snr_db <= hi))

    def header(self) -> dict:
        return {
            "profile": self.profile.to_dict(),
            "nf": self.nf,
            "nn": self.nn,
            "count": len(self),
            "snr_list": list(self.snr_list),
            "seed": self.seed,
            "split": self.split,
        }

    def _record_dtype(self) -> np.dtype:
        n = 2 * self.nf * self.nn
        return np.dtype([("ideal", "<f4", (n,)), ("noisy", "<f4", (n,)), ("snr", "<f4")])

    def to_bytes(self) -> bytes:
        hbytes = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode()
        rec = np.zeros(len(self), dtype=self._record_dtype())
        rec["ideal"] = _interleave(self.ideal)
        rec["noisy"] = _interleave(self.noisy)
        rec["snr"] = self.snr_db
        body = bytearray(DATASET_MAGIC)
        body += struct.pack("<HI", DATASET_VERSION, len(hbytes))
        body += hbytes
        body += rec.tobytes()
        body += struct.pack("<I", zlib.crc32(body))
        return bytes(body)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(self.to_bytes())
        except OSError as e:
            raise OSError(f"cannot write dataset {path}: {e}") from e
        return path

    @classmethod
    def from_bytes(cls, raw: bytes, source: str = "<bytes>") -> "ChannelDataset":
        if len(raw) < 14 or raw[:4] != DATASET_MAGIC:
            raise DatasetError(f"{source}: not a dataset file")
        (crc,) = struct.unpack("<I", raw[-4:])
        if zlib.crc32(raw[:-4]) != crc:
            raise DatasetError(f"{source}: checksum mismatch")
        version, hlen = struct.unpack("<HI", raw[4:10])
        if version != DATASET_VERSION:
            raise DatasetError(f"{source}: unsupported dataset version {version}")
        h = json.loads(raw[10:10 + hlen])
        nf, nn, count = h["nf"], h["nn"], h["count"]
        n = 2 * nf * nn
        dt = np.dtype([("ideal", "<f4", (n,)), ("noisy", "<f4", (n,)), ("snr", "<f4")])
        payload = raw[10 + hlen:-4]
        if len(payload) != count * dt.itemsize:
            raise DatasetError(f"{source}: header count {count} does not match payload")
        rec = np.frombuffer(payload, dtype=dt, count=count)
        return cls(ChannelProfile.from_dict(h["profile"]), nf, nn, tuple(h["snr_list"]), h["seed"], h["split"],
                   _deinterleave(rec["ideal"], nf, nn), _deinterleave(rec["noisy"], nf, nn),
                   rec["snr"].astype(np.float32))

    @classmethod
    def load(cls, path: str | Path) -> "ChannelDataset":
        path = Path(path)
        try:
            raw = path.read_bytes()
        except OSError as e:
            raise OSError(f"cannot read dataset {path}: {e}") from e
        return cls.from_bytes(raw, str(path))


def _interleave(grids: np.ndarray) -> np.ndarray:
    n = len(grids)
    out = np.empty((n, grids.shape[1] * grids.shape[2], 2), dtype=np.float32)
    flat = grids.reshape(n, -1)
    out[..., 0] = flat.real
    out[..., 1] = flat.imag
    return out.reshape(n, -1)


def _deinterleave(rows: np.ndarray, nf: int, nn: int) -> np.ndarray:
    pairs = rows.reshape(len(rows), nf * nn, 2)
    return (pairs[..., 0] + 1j * pairs[..., 1]).astype(np.complex64).reshape(-1, nf, nn)


SPLITS = ("train", "val", "test")


def generate_split(profile: ChannelProfile, count: int, snr_list: Sequence[float], seed: int,
                   split: str = "train", nf: int = 72, nn: int = 14, seed_seq=None) -> ChannelDataset:
    if count < 1:
        raise ValueError(f"record count must be positive, got {count}")
    if not snr_list:
        raise ValueError("snr_list must be nonempty")
    rng = np.random.default_rng(seed_seq if seed_seq is not None else seed)
    ideal = np.empty((count, nf, nn), dtype=np.complex64)
    noisy = np.empty_like(ideal)
    snrs = np.empty(count, dtype=np.float32)
    for i in range(count):
        snr = float(snr_list[i % len(snr_list)])
        h = generate_channel(profile, rng, nf, nn)
        ideal[i] = h
        noisy[i] = add_awgn(h, snr, rng)
        snrs[i] = snr
    return ChannelDataset(profile, nf, nn, tuple(snr_list), seed, split, ideal, noisy, snrs)


def generate_dataset(profile: ChannelProfile, counts: Sequence[int], snr_list: Sequence[float], seed: int,
                     nf: int = 72, nn: int = 14) -> dict[str, ChannelDataset]:
    """Train/val/test splits; SNRs cycle through ``snr_list`` record by record."""
    if len(counts) != len(SPLITS):
        raise ValueError(f"counts must give {len(SPLITS)} split sizes")
    if any(c < 1 for c in counts):
        raise ValueError(f"all split counts must be positive, got {tuple(counts)}")
    children = np.random.SeedSequence(seed).spawn(len(SPLITS))
    return {
        name: generate_split(profile, c, snr_list, seed, name, nf, nn, seed_seq=child)
        for name, c, child in zip(SPLITS, counts, children)
    }
