"""Task configurations, synthetic channel generators and the dataset file format.

Channel matrices are stored with row ``k`` holding ``h_k^H``, so ``H @ V`` has
entries ``h_k^H v_j`` and ``H @ X`` gives the received pilot rows directly.
"""
from __future__ import annotations

import json
import math
import struct
import warnings
import zlib
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

DATASET_MAGIC = b"FDDC"
DATASET_VERSION = 1


class ConfigError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedPayloadError(DatasetFormatError):
    pass


class ChecksumError(DatasetFormatError):
    pass


def _ratio(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        return Fraction(x).limit_denominator(1000)
    return Fraction(x)


@dataclass(frozen=True)
class TaskConfig:
    task_id: str
    n_tx: int
    n_users: int
    pilot_ratio: Fraction = Fraction(1)
    feedback_ratio: Fraction = Fraction(1)
    snr_db: float = 10.0
    power: float = 1.0
    pilot_symbol_energy: float = 1.0
    channel_model: str = "rayleigh"
    n_paths: int = 1
    angle_spread_deg: float = 10.0
    array_shape: tuple[int, int] | None = None
    user_angles_deg: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pilot_ratio", _ratio(self.pilot_ratio))
        object.__setattr__(self, "feedback_ratio", _ratio(self.feedback_ratio))
        if self.array_shape is not None:
            object.__setattr__(self, "array_shape", tuple(int(v) for v in self.array_shape))
        if self.user_angles_deg is not None:
            object.__setattr__(self, "user_angles_deg", tuple(float(v) for v in self.user_angles_deg))
        if self.n_tx < 1 or self.n_users < 1:
            raise ConfigError(f"{self.task_id}: n_tx and n_users must be >= 1")
        if self.pilot_ratio <= 0 or self.feedback_ratio <= 0:
            raise ConfigError(f"{self.task_id}: pilot and feedback ratios must be positive")
        if self.power <= 0 or self.pilot_symbol_energy <= 0:
            raise ConfigError(f"{self.task_id}: power and pilot symbol energy must be positive")
        if self.channel_model not in ("rayleigh", "geometric"):
            raise ConfigError(f"{self.task_id}: unknown channel model {self.channel_model!r}")
        if self.array_shape is not None and self.array_shape[0] * self.array_shape[1] != self.n_tx:
            raise ConfigError(f"{self.task_id}: array shape {self.array_shape} does not give n_tx={self.n_tx}")
        if self.n_paths < 1:
            raise ConfigError(f"{self.task_id}: path count must be >= 1")
        if self.user_angles_deg is not None and len(self.user_angles_deg) != self.n_users:
            raise ConfigError(f"{self.task_id}: need one user angle per user")
        if self.n_tx < self.n_users:
            warnings.warn(f"{self.task_id}: n_tx < n_users, zero-forcing is not applicable", stacklevel=3)

    @property
    def pilot_len(self) -> int:
        return resolve_config(self)[0]

    @property
    def feedback_bits(self) -> int:
        return resolve_config(self)[1]

    @property
    def sigma2(self) -> float:
        return snr_to_sigma2(self.snr_db, self.power)

    def with_snr(self, snr_db: float) -> "TaskConfig":
        return replace(self, snr_db=float(snr_db))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pilot_ratio"] = str(self.pilot_ratio)
        d["feedback_ratio"] = str(self.feedback_ratio)
        if self.array_shape is not None:
            d["array_shape"] = list(self.array_shape)
        if self.user_angles_deg is not None:
            d["user_angles_deg"] = list(self.user_angles_deg)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown task config fields: {sorted(unknown)}")
        return cls(**d)


def resolve_config(cfg: TaskConfig) -> tuple[int, int]:
    """Pilot length and feedback bits, ``round(n_tx * ratio)`` with ties to even."""
    L = round(cfg.n_tx * cfg.pilot_ratio)
    B = round(cfg.n_tx * cfg.feedback_ratio)
    if L < 1 or B < 1:
        raise ConfigError(f"{cfg.task_id}: pilot length {L} / feedback bits {B} resolve to zero")
    return int(L), int(B)


@dataclass(frozen=True)
class NoiseModel:
    sigma2: float

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ConfigError(f"noise variance must be positive, got {self.sigma2}")

    @classmethod
    def from_snr(cls, snr_db: float, power: float = 1.0) -> "NoiseModel":
        return cls(snr_to_sigma2(snr_db, power))


def snr_to_sigma2(snr_db: float, power: float = 1.0) -> float:
    if power <= 0:
        raise ConfigError("power must be positive")
    return power / 10.0 ** (snr_db / 10.0)


@dataclass
class ChannelDataset:
    config: TaskConfig
    samples: np.ndarray  # (S, K, n_tx) complex64, row k = h_k^H
    train_fraction: float = 0.7
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        s = self.samples
        if s.ndim != 3 or s.shape[1:] != (self.config.n_users, self.config.n_tx):
            raise ConfigError(f"samples shape {s.shape} does not match K={self.config.n_users}, "
                              f"n_tx={self.config.n_tx}")
        if not np.all(np.isfinite(s)):
            raise ConfigError("dataset contains non-finite channel entries")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def split_index(self) -> int:
        return int(math.floor(len(self) * self.train_fraction))

    def subset(self, start: int, stop: int) -> "ChannelDataset":
        return ChannelDataset(self.config, self.samples[start:stop], self.train_fraction, dict(self.meta))

    def take(self, n: int) -> "ChannelDataset":
        return self.subset(0, n)


def split(ds: ChannelDataset, train_fraction: float | None = None) -> tuple[ChannelDataset, ChannelDataset]:
    """First ``floor(S * fraction)`` samples train, rest test; views, not copies."""
    frac = ds.train_fraction if train_fraction is None else train_fraction
    if not 0.0 < frac < 1.0:
        raise ConfigError(f"train fraction must be in (0, 1), got {frac}")
    n = int(math.floor(len(ds) * frac))
    if n == 0 or n == len(ds):
        raise ConfigError(f"split of {len(ds)} samples at {frac} leaves an empty side")
    return ds.subset(0, n), ds.subset(n, len(ds))


def steering_vector(n: int, theta: float | np.ndarray) -> np.ndarray:
    """ULA response ``exp(j*pi*m*sin(theta))``; vectorized over theta (last axis = antenna)."""
    theta = np.asarray(theta, dtype=np.float64)
    m = np.arange(n)
    return np.exp(1j * np.pi * m * np.sin(theta)[..., None])


def _array_response(cfg: TaskConfig, az: np.ndarray, el: np.ndarray) -> np.ndarray:
    if cfg.array_shape is None:
        return steering_vector(cfg.n_tx, az)
    rows, cols = cfg.array_shape
    a_r = steering_vector(rows, el)
    a_c = steering_vector(cols, az)
    return (a_r[..., :, None] * a_c[..., None, :]).reshape(az.shape + (rows * cols,))


def gen_rayleigh(cfg: TaskConfig, count: int, seed: int | None = None) -> ChannelDataset:
    if count < 1:
        raise ConfigError("count must be >= 1")
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0x5A7])
    shape = (count, cfg.n_users, cfg.n_tx)
    h = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * math.sqrt(0.5)
    return ChannelDataset(cfg, h.astype(np.complex64), meta={"seed": seed, "generator": "rayleigh"})


def gen_geometric(cfg: TaskConfig, count: int, seed: int | None = None) -> ChannelDataset:
    """Sum of ``n_paths`` plane waves per user with CN(0, 1/n_paths) gains.

    Each user draws a mean angle uniformly on (-60, 60) degrees unless
    ``user_angles_deg`` pins it; path angles scatter uniformly within
    ``angle_spread_deg`` around it. ``E||h||^2 = n_tx``.
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0x6E0])
    K, P = cfg.n_users, cfg.n_paths
    if cfg.user_angles_deg is None:
        centers = rng.uniform(-60.0, 60.0, size=(count, K))
    else:
        centers = np.broadcast_to(np.asarray(cfg.user_angles_deg), (count, K))
    half = cfg.angle_spread_deg / 2.0
    az = np.deg2rad(centers[..., None] + rng.uniform(-half, half, size=(count, K, P)))
    el = np.deg2rad(rng.uniform(-half, half, size=(count, K, P)) + 10.0)
    gains = (rng.standard_normal((count, K, P)) + 1j * rng.standard_normal((count, K, P))) * math.sqrt(0.5 / P)
    a = _array_response(cfg, az, el)  # (S, K, P, n_tx)
    h = np.einsum("skp,skpn->skn", gains, a)
    return ChannelDataset(cfg, np.conj(h).astype(np.complex64), meta={"seed": seed, "generator": "geometric"})


def generate(cfg: TaskConfig, count: int, seed: int | None = None) -> ChannelDataset:
    if cfg.channel_model == "rayleigh":
        return gen_rayleigh(cfg, count, seed)
    return gen_geometric(cfg, count, seed)


_HEAD = struct.Struct("<4sHI")


def save_dataset(ds: ChannelDataset, path) -> None:
    header = dict(ds.config.to_dict())
    header["count"] = len(ds)
    header["train_fraction"] = ds.train_fraction
    header["meta"] = ds.meta
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(ds.samples.astype(np.complex64)).view(np.float32)
    pbytes = payload.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(DATASET_MAGIC, DATASET_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(pbytes)
        fh.write(struct.pack("<I", zlib.crc32(pbytes)))


def load_dataset(path) -> ChannelDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise TruncatedPayloadError("file shorter than the fixed header")
    magic, version, hlen = _HEAD.unpack_from(raw, 0)
    if magic != DATASET_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}")
    if version != DATASET_VERSION:
        raise VersionMismatchError(f"dataset format version {version}, this reader handles {DATASET_VERSION}")
    off = _HEAD.size
    if len(raw) < off + hlen:
        raise TruncatedPayloadError("file ends inside the JSON header")
    try:
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetFormatError(f"unreadable header: {e}") from None
    off += hlen
    count = header.pop("count")
    frac = header.pop("train_fraction", 0.7)
    meta = header.pop("meta", {})
    cfg = TaskConfig.from_dict(header)
    nbytes = count * cfg.n_users * cfg.n_tx * 8
    if len(raw) < off + nbytes + 4:
        raise TruncatedPayloadError(f"payload needs {nbytes + 4} bytes, file has {len(raw) - off}")
    pbytes = raw[off:off + nbytes]
    (crc,) = struct.unpack_from("<I", raw, off + nbytes)
    if zlib.crc32(pbytes) != crc:
        raise ChecksumError("payload CRC32 mismatch")
    arr = np.frombuffer(pbytes, dtype="<f4").astype(np.float32).view(np.complex64)
    samples = arr.reshape(count, cfg.n_users, cfg.n_tx)
    return ChannelDataset(cfg, samples, frac, meta)


def load_task_configs(path) -> list[TaskConfig]:
    """Read task configs from a JSON file: a list, or an object with a "tasks" list."""
    doc = json.loads(Path(path).read_text())
    items = doc["tasks"] if isinstance(doc, dict) else doc
    return [TaskConfig.from_dict(t) for t in items]
