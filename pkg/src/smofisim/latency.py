"""Simulated wall-clock cost of split training on heterogeneous devices."""

from __future__ import annotations

import csv
import decimal
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError
from .split import SplitModel, activation_size, compute_ratio, model_kb

PARALLEL_METHODS = ("smofi", "sflv1", "fedavg")
SEQUENTIAL_METHODS = ("sflv2",)


@dataclass(frozen=True)
class ClientProfile:
    p_d: float  # seconds per frame (inference)
    b: float  # kbps

    def __post_init__(self):
        if not (self.p_d > 0 and self.b > 0):
            raise ConfigurationError("p_d and b must be positive", "latency")


@dataclass(frozen=True)
class ServerProfile:
    kappa: float
    p_s: float

    @classmethod
    def from_clients(cls, profiles: Sequence[ClientProfile], kappa: float = 100.0) -> ServerProfile:
        if not kappa > 0:
            raise ConfigurationError("must be > 0", "latency.kappa")
        return cls(kappa, sum(p.p_d for p in profiles) / len(profiles) / kappa)


@dataclass(frozen=True)
class BatchLatency:
    t_d: float
    t_s: float
    t_comm: float

    @property
    def total(self) -> float:
        return self.t_d + self.t_s + self.t_comm

    def astuple(self):
        return self.t_d, self.t_s, self.t_comm, self.total


def _log_uniform(rng, lo, hi, n):
    if lo == hi:
        return np.full(n, float(lo))
    return np.exp(rng.uniform(np.log(lo), np.log(hi), size=n))


def sample_profiles(client_count: int, seed: int, p_d_range=(0.001, 0.1), b_range=(1000.0, 20000.0)) -> list[ClientProfile]:
    """Log-uniform device speeds and bandwidths (stand-in ranges)."""
    for name, (lo, hi) in (("p_d", p_d_range), ("b", b_range)):
        if not 0 < lo <= hi:
            raise ConfigurationError(f"range must satisfy 0 < lo <= hi, got {lo}, {hi}", f"latency.{name}")
    rng = np.random.default_rng(seed)
    p_d = _log_uniform(rng, *p_d_range, client_count)
    b = _log_uniform(rng, *b_range, client_count)
    return [ClientProfile(float(x), float(y)) for x, y in zip(p_d, b)]


def batch_latency(profile: ClientProfile, server: ServerProfile, model: SplitModel, B: int) -> BatchLatency:
    """Per-batch device compute, server compute and cut-layer traffic.

    Backward costs twice the forward, hence the factor 3; activations go up
    and gradients come back, hence the factor 2.
    """
    ratio = compute_ratio(model)
    return batch_latency_raw(profile, server.p_s, ratio, activation_size(model), B)


def _dec(x) -> decimal.Decimal:
    # shortest round-trip decimal of the float, i.e. the value the user wrote
    return decimal.Decimal(repr(float(x)))


_EXACT = decimal.Context(prec=50)


def batch_latency_raw(profile: ClientProfile, p_s: float, ratio: float, s_kb: float, B: int) -> BatchLatency:
    """Each term is evaluated exactly on the decimal inputs and rounded once."""
    with decimal.localcontext(_EXACT):
        O, Bd = _dec(ratio), decimal.Decimal(int(B))
        t_d = 3 * Bd * _dec(profile.p_d) * O
        t_s = 3 * Bd * _dec(p_s) * (1 - O)
        t_comm = 2 * Bd * _dec(s_kb) / _dec(profile.b)
    return BatchLatency(float(t_d), float(t_s), float(t_comm))


def fedavg_latency(profile: ClientProfile, model: SplitModel, B: int, steps: int) -> BatchLatency:
    """Unsplit local training plus one model download and upload.

    Returned as totals for the whole round, not per batch.
    """
    t_d = steps * (3 * B * profile.p_d)
    t_comm = 2 * model_kb(model) / profile.b
    return BatchLatency(t_d, 0.0, t_comm)


@dataclass(frozen=True)
class RoundLatency:
    seconds: float
    t_d: float
    t_s: float
    t_comm: float


def round_latency(method: str, steps: Mapping[int, int], profiles: Mapping[int, ClientProfile],
                  server: ServerProfile, model: SplitModel, B: int) -> RoundLatency:
    """Wall-clock for one round.

    Parallel methods cost the slowest client (components reported for that
    client); sequential methods cost the sum over clients.
    """
    per_client = {}
    for cid, T in steps.items():
        if method == "fedavg":
            per_client[cid] = fedavg_latency(profiles[cid], model, B, T)
        else:
            lat = batch_latency(profiles[cid], server, model, B)
            per_client[cid] = BatchLatency(T * lat.t_d, T * lat.t_s, T * lat.t_comm)
    if not per_client:
        return RoundLatency(0.0, 0.0, 0.0, 0.0)
    ids = sorted(per_client)
    if method in SEQUENTIAL_METHODS:
        parts = [per_client[c] for c in ids]
        t_d = sum(p.t_d for p in parts)
        t_s = sum(p.t_s for p in parts)
        t_comm = sum(p.t_comm for p in parts)
        return RoundLatency(sum(p.total for p in parts), t_d, t_s, t_comm)
    if method not in PARALLEL_METHODS:
        raise ConfigurationError(f"unknown method {method!r}", "rounds.method")
    slowest = max(ids, key=lambda c: (per_client[c].total, -c))
    p = per_client[slowest]
    return RoundLatency(p.total, p.t_d, p.t_s, p.t_comm)


def write_profiles(profiles: Sequence[ClientProfile], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["client_id", "p_d_s_per_frame", "b_kbps"])
        for cid, p in enumerate(profiles):
            w.writerow([cid, repr(p.p_d), repr(p.b)])


def read_profiles(path) -> list[ClientProfile]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["client_id", "p_d_s_per_frame", "b_kbps"]:
            raise ConfigurationError(f"{path}: header must be client_id,p_d_s_per_frame,b_kbps", "latency.profiles_csv")
        rows = sorted(reader, key=lambda r: int(r["client_id"]))
    ids = [int(r["client_id"]) for r in rows]
    if ids != list(range(len(ids))):
        raise ConfigurationError(f"{path}: client ids must be 0..n-1", "latency.profiles_csv")
    return [ClientProfile(float(r["p_d_s_per_frame"]), float(r["b_kbps"])) for r in rows]
