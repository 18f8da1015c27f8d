"""Round-level training protocols: SMoFi, FedAvg, SFLV1 and SFLV2.

Every round starts from the global model W^{n-1}. Split methods cut it at
``model.cut_index``; the client half is trained by each device with its own
SGDM buffer, the server half by per-client surrogates (SMoFi, SFLV1) or by a
single shared model (SFLV2). FedAvg trains the whole model on the device.

Steps are numbered from 1. A client with T_j local steps is active for steps
1..T_j; after step T_j its server-side buffer joins the round history and is
down-weighted by (t - T_j + 1) ** alpha when fused at later steps t.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, Shard, aggregation_weights, batch_schedule, local_steps
from .errors import ConfigurationError, DivergenceError, UsageError
from .optim import NAG, HistoryEntry, MomentumBuffer, OptimConfig, aligned_sgdm_step, fuse_momentum, nag_lookahead, sgdm_step
from .split import SplitModel, SubmodelPair, join, split
from .tensor import ParamVector, backward, forward, head_loss

log = logging.getLogger(__name__)

METHODS = ("smofi", "fedavg", "sflv1", "sflv2")
SELECTION_MODES = ("bernoulli", "fixed_fraction")
_ORDER_STREAM = 7919


@dataclass(frozen=True)
class RoundConfig:
    N: int = 60
    E: int = 5
    B: int = 32
    selection_rate: float = 0.2
    selection_mode: str = "fixed_fraction"
    alpha: float = -0.1
    beta_g: float = 0.0
    method: str = "smofi"
    # int steps, or "step" (1), "epoch" (longest local epoch in the cohort), "round" (never mid-round)
    sflv1_period: int | str = "epoch"
    fedprox_mu: float = 0.0
    persist_client_momentum: bool = False

    def __post_init__(self):
        checks = [
            ("N", self.N >= 0, "must be >= 0"),
            ("E", self.E >= 1, "must be >= 1"),
            ("B", self.B >= 1, "must be >= 1"),
            ("selection_rate", 0 < self.selection_rate <= 1, "must be in (0, 1]"),
            ("selection_mode", self.selection_mode in SELECTION_MODES, f"must be one of {SELECTION_MODES}"),
            ("alpha", self.alpha < 0, "must be < 0"),
            ("beta_g", 0 <= self.beta_g < 1, "must be in [0, 1)"),
            ("method", self.method in METHODS, f"must be one of {METHODS}"),
            ("fedprox_mu", self.fedprox_mu >= 0, "must be >= 0"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigurationError(msg, f"rounds.{name}")
        p = self.sflv1_period
        if isinstance(p, bool) or not (
            (isinstance(p, int) and p >= 1) or p in ("step", "epoch", "round")
        ):
            raise ConfigurationError("must be an int >= 1 or one of step/epoch/round", "rounds.sflv1_period")


@dataclass
class GlobalState:
    params: ParamVector
    momentum: ParamVector
    round_index: int = 0

    @classmethod
    def initial(cls, params: ParamVector) -> GlobalState:
        return cls(params, params.zeros_like(), 0)


@dataclass(frozen=True)
class RoundCohort:
    client_ids: tuple[int, ...]
    steps: dict[int, int]
    weights: dict[int, float]
    shards: dict[int, Shard]
    skipped: tuple[int, ...] = ()

    def __len__(self):
        return len(self.client_ids)


@dataclass
class RoundRecord:
    round: int
    method: str
    cohort: tuple[int, ...]
    steps: dict[int, int]
    skipped: tuple[int, ...] = ()
    train_loss: float = math.nan
    accuracy: float = math.nan
    round_time_s: float = 0.0
    t_d: float = 0.0
    t_s: float = 0.0
    t_comm: float = 0.0
    cum_time_s: float = 0.0
    js_mean: float = math.nan


@dataclass
class ClientStep:
    """What a client sees in one local step: used to check client transparency."""

    method: str
    client: int
    step: int
    batch: np.ndarray
    inputs: np.ndarray
    cut_grad_shape: tuple


@dataclass
class Federation:
    """Everything a round needs besides the global state and cohort."""

    model: SplitModel
    train: Dataset
    shards: Sequence[Shard]
    round_cfg: RoundConfig
    optim_cfg: OptimConfig
    batch_seed: int = 0
    workers: int = 1
    # on_fuse(step, current_ids, history_entries, fused_or_None) after each SMoFi step
    on_fuse: Callable | None = None
    on_client_step: Callable[[ClientStep], None] | None = None
    client_momentum: dict = field(default_factory=dict)

    def map(self, fn, items):
        items = list(items)
        if self.workers > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                return list(pool.map(fn, items))
        return [fn(i) for i in items]


# ---------------------------------------------------------------- helpers


def select_cohort(client_ids: Sequence[int], theta: float, mode: str, seed: int, round_index: int = 0) -> tuple[int, ...]:
    """Pick the round's participants.

    ``bernoulli`` keeps each client independently with probability theta and
    redraws if nobody is kept; ``fixed_fraction`` samples ceil(theta*|J|)
    clients without replacement.
    """
    if not 0 < theta <= 1:
        raise UsageError("selection rate must be in (0, 1]")
    ids = np.asarray(sorted(client_ids), dtype=np.int64)
    rng = np.random.default_rng([seed, round_index])
    if mode == "bernoulli":
        while True:
            chosen = ids[rng.random(len(ids)) < theta]
            if len(chosen):
                return tuple(int(c) for c in chosen)
    if mode == "fixed_fraction":
        k = min(len(ids), math.ceil(round(theta * len(ids), 9)))
        return tuple(sorted(int(c) for c in rng.choice(ids, size=k, replace=False)))
    raise UsageError(f"unknown selection mode {mode!r}")


def make_cohort(selected: Sequence[int], shards: Sequence[Shard], E: int, B: int) -> RoundCohort:
    by_id = {s.owner: s for s in shards}
    steps, skipped = {}, []
    for cid in sorted(selected):
        T = local_steps(len(by_id[cid]), E, B)
        if T == 0:
            log.warning("client %d has %d samples (< batch %d); skipped this round", cid, len(by_id[cid]), B)
            skipped.append(cid)
        else:
            steps[cid] = T
    ids = tuple(sorted(steps))
    weights = {}
    if ids:
        p = aggregation_weights([len(by_id[c]) for c in ids])
        weights = dict(zip(ids, p.tolist()))
    return RoundCohort(ids, steps, weights, {c: by_id[c] for c in ids}, tuple(skipped))


def aggregate_weighted(models: Sequence[ParamVector], weights: Sequence[float]) -> ParamVector:
    """Elementwise sum_j p_j W_j, accumulated in the given order."""
    if not models or len(models) != len(weights):
        raise UsageError("need one weight per model")
    if abs(math.fsum(weights) - 1.0) > 1e-12:
        raise UsageError(f"aggregation weights sum to {math.fsum(weights)!r}, not 1")
    acc = weights[0] * models[0].values
    for w, m in zip(weights[1:], models[1:]):
        models[0].check_shape(m)
        acc = acc + w * m.values
    return models[0].with_values(acc)


def global_momentum_update(state: GlobalState, aggregated: ParamVector, beta_g: float) -> GlobalState:
    """m_g <- beta_g*m_g + (W_prev - W_avg); W <- W_prev - m_g.

    With beta_g == 0 the new model is the average itself (algebraically the
    same, but without the cancellation error of W_prev - (W_prev - W_avg)).
    """
    state.params.check_shape(aggregated)
    delta = state.params.values - aggregated.values
    if beta_g == 0:
        return GlobalState(aggregated.copy(), state.params.with_values(delta), state.round_index + 1)
    m = beta_g * state.momentum.values + delta
    return GlobalState(
        state.params.with_values(state.params.values - m),
        state.params.with_values(m),
        state.round_index + 1,
    )


def fedprox_penalty_grad(local: ParamVector, anchor: ParamVector, mu: float) -> ParamVector:
    """Gradient of (mu/2)*||local - anchor||^2."""
    local.check_shape(anchor)
    if mu < 0:
        raise UsageError("mu must be >= 0")
    return local.with_values(mu * (local.values - anchor.values))


def sflv1_period_steps(period, cohort: RoundCohort, B: int) -> int | None:
    """Mid-round server aggregation period in steps, or None for round end only."""
    if period == "round":
        return None
    if period == "step":
        return 1
    if period == "epoch":
        return max(len(cohort.shards[c]) // B for c in cohort.client_ids)
    return int(period)


# ---------------------------------------------------------------- local steps


@dataclass
class _Side:
    params: ParamVector
    buffer: MomentumBuffer


class _Round:
    """Per-round scratch shared by the protocol functions."""

    def __init__(self, state: GlobalState, cohort: RoundCohort, fed: Federation):
        self.fed = fed
        self.cohort = cohort
        self.n = state.round_index + 1
        self.lr = fed.optim_cfg.lr_at(self.n)
        self.model = fed.model
        self.start = state.params
        self.pair = split(state.params, fed.model)
        self.batches = {
            c: batch_schedule(cohort.shards[c], cohort.steps[c], fed.round_cfg.B, fed.batch_seed, self.n)
            for c in cohort.client_ids
        }
        self.losses = []

    def client_buffer(self, cid: int, like: ParamVector, key: str) -> MomentumBuffer:
        if self.fed.round_cfg.persist_client_momentum and (key, cid) in self.fed.client_momentum:
            return self.fed.client_momentum[(key, cid)]
        return MomentumBuffer.zeros(like, cid)

    def keep_client_buffer(self, cid: int, buf: MomentumBuffer, key: str) -> None:
        if self.fed.round_cfg.persist_client_momentum:
            self.fed.client_momentum[(key, cid)] = buf

    def eval_point(self, side: _Side) -> ParamVector:
        if self.fed.optim_cfg.variant == NAG:
            return nag_lookahead(side.params, side.buffer, self.fed.optim_cfg, self.lr)
        return side.params

    def with_prox(self, grads: ParamVector, at: ParamVector, anchor: ParamVector) -> ParamVector:
        mu = self.fed.round_cfg.fedprox_mu
        if mu:
            return grads + fedprox_penalty_grad(at, anchor, mu)
        return grads

    def check_loss(self, loss: float) -> None:
        if not math.isfinite(loss):
            raise DivergenceError(self.n)

    def split_grads(self, cid: int, t: int, client: _Side, server: _Side, server_from: MomentumBuffer):
        """Client forward, server forward/backward, client backward.

        ``server_from`` is the buffer the server-side update continues from
        (the fused buffer in SMoFi); NAG looks ahead along it.
        """
        fed, model = self.fed, self.model
        L = model.cut_index
        idx = self.batches[cid][t - 1]
        x, y = fed.train.samples[idx], fed.train.labels[idx]
        wc = self.eval_point(client)
        ws = self.eval_point(_Side(server.params, server_from))
        acts, ccache = forward(model, wc, x, 0, L)
        out, scache = forward(model, ws, acts, L, model.n_layers)
        loss = head_loss(model.layers[-1], out, y)
        self.check_loss(loss)
        gs, cut_grad = backward(scache, labels=y)
        gc, _ = backward(ccache, cut_grad, input_grad=False)
        if fed.on_client_step is not None:
            fed.on_client_step(ClientStep(fed.round_cfg.method, cid, t, idx, x, cut_grad.shape))
        gs = self.with_prox(gs, ws, self.pair.server)
        gc = self.with_prox(gc, wc, self.pair.client)
        return loss, gc, gs

    def client_update(self, client: _Side, gc: ParamVector, t: int) -> _Side:
        p, b = sgdm_step(client.params, gc, client.buffer, self.fed.optim_cfg, self.lr, t)
        return _Side(p, b)

    def finish(self, state: GlobalState, models: dict[int, ParamVector]) -> tuple[GlobalState, RoundRecord]:
        ids = self.cohort.client_ids
        agg = aggregate_weighted([models[c] for c in ids], [self.cohort.weights[c] for c in ids])
        new_state = global_momentum_update(state, agg, self.fed.round_cfg.beta_g)
        return new_state, self.record()

    def record(self) -> RoundRecord:
        return RoundRecord(
            round=self.n,
            method=self.fed.round_cfg.method,
            cohort=self.cohort.client_ids,
            steps=dict(self.cohort.steps),
            skipped=self.cohort.skipped,
            train_loss=float(np.mean(self.losses)) if self.losses else math.nan,
        )


def _skip_round(state: GlobalState, cohort: RoundCohort, fed: Federation):
    log.warning("round %d: no client can take a step; round skipped", state.round_index + 1)
    record = RoundRecord(state.round_index + 1, fed.round_cfg.method, (), {}, cohort.skipped)
    return GlobalState(state.params, state.momentum, state.round_index + 1), record


# ---------------------------------------------------------------- protocols


def run_smofi_round(state: GlobalState, cohort: RoundCohort, fed: Federation) -> tuple[GlobalState, RoundRecord]:
    """Parallel surrogate training with the server buffers fused after every step."""
    if not cohort.client_ids:
        return _skip_round(state, cohort, fed)
    r = _Round(state, cohort, fed)
    ids, T = cohort.client_ids, cohort.steps
    alpha, cfg = fed.round_cfg.alpha, fed.optim_cfg
    clients = {c: _Side(r.pair.client, r.client_buffer(c, r.pair.client, "split")) for c in ids}
    servers = {c: _Side(r.pair.server, MomentumBuffer.zeros(r.pair.server, c)) for c in ids}
    fused = MomentumBuffer.zeros(r.pair.server)
    history: list[HistoryEntry] = []
    max_t = max(T.values())

    for t in range(1, max_t + 1):
        active = [c for c in ids if T[c] >= t]

        def step(c, t=t, fused=fused):
            loss, gc, gs = r.split_grads(c, t, clients[c], servers[c], fused)
            ps, bs = aligned_sgdm_step(servers[c].params, gs, fused, cfg, r.lr, t, owner=c)
            return loss, r.client_update(clients[c], gc, t), _Side(ps, bs)

        for c, (loss, client, server) in zip(active, fed.map(step, active)):
            r.losses.append(loss)
            clients[c], servers[c] = client, server
        history += [HistoryEntry(servers[c].buffer, t) for c in active if T[c] == t]
        current = [c for c in active if T[c] > t]
        if t < max_t:
            fused = fuse_momentum([servers[c].buffer for c in current], history, t, alpha)
        if fed.on_fuse is not None:
            fed.on_fuse(t, tuple(current), tuple(history), fused if t < max_t else None)

    for c in ids:
        r.keep_client_buffer(c, clients[c].buffer, "split")
    models = {c: join(SubmodelPair(clients[c].params, servers[c].params), r.model) for c in ids}
    return r.finish(state, models)


def run_fedavg_round(state: GlobalState, cohort: RoundCohort, fed: Federation) -> tuple[GlobalState, RoundRecord]:
    """Each client trains the unsplit model with its own SGDM, then average."""
    if not cohort.client_ids:
        return _skip_round(state, cohort, fed)
    r = _Round(state, cohort, fed)
    model, cfg = r.model, fed.optim_cfg

    def train(c):
        side = _Side(state.params, r.client_buffer(c, state.params, "full"))
        losses = []
        for t in range(1, cohort.steps[c] + 1):
            idx = r.batches[c][t - 1]
            x, y = fed.train.samples[idx], fed.train.labels[idx]
            w = r.eval_point(side)
            out, cache = forward(model, w, x)
            loss = head_loss(model.layers[-1], out, y)
            r.check_loss(loss)
            g, _ = backward(cache, labels=y, input_grad=False)
            g = r.with_prox(g, w, state.params)
            p, b = sgdm_step(side.params, g, side.buffer, cfg, r.lr, t)
            side = _Side(p, b)
            losses.append(loss)
        return side, losses

    results = dict(zip(cohort.client_ids, fed.map(train, cohort.client_ids)))
    for c in cohort.client_ids:
        r.losses += results[c][1]
        r.keep_client_buffer(c, results[c][0].buffer, "full")
    return r.finish(state, {c: results[c][0].params for c in cohort.client_ids})


def run_sflv1_round(state: GlobalState, cohort: RoundCohort, fed: Federation, period=None) -> tuple[GlobalState, RoundRecord]:
    """Parallel surrogates with independent buffers, averaged every ``period`` steps.

    At each mid-round aggregation all surrogates (finished ones included) are
    replaced by the weighted average and their buffers are zeroed. The
    client side is only aggregated at round end.
    """
    if not cohort.client_ids:
        return _skip_round(state, cohort, fed)
    r = _Round(state, cohort, fed)
    ids, T = cohort.client_ids, cohort.steps
    cfg = fed.optim_cfg
    if period is None:
        period = fed.round_cfg.sflv1_period
    every = sflv1_period_steps(period, cohort, fed.round_cfg.B)
    clients = {c: _Side(r.pair.client, r.client_buffer(c, r.pair.client, "split")) for c in ids}
    servers = {c: _Side(r.pair.server, MomentumBuffer.zeros(r.pair.server, c)) for c in ids}
    max_t = max(T.values())

    for t in range(1, max_t + 1):
        active = [c for c in ids if T[c] >= t]

        def step(c, t=t):
            loss, gc, gs = r.split_grads(c, t, clients[c], servers[c], servers[c].buffer)
            ps, bs = sgdm_step(servers[c].params, gs, servers[c].buffer, cfg, r.lr, t)
            return loss, r.client_update(clients[c], gc, t), _Side(ps, bs)

        for c, (loss, client, server) in zip(active, fed.map(step, active)):
            r.losses.append(loss)
            clients[c], servers[c] = client, server
        if every is not None and t % every == 0 and t < max_t:
            avg = aggregate_weighted([servers[c].params for c in ids], [cohort.weights[c] for c in ids])
            servers = {c: _Side(avg, MomentumBuffer.zeros(avg, c)) for c in ids}

    for c in ids:
        r.keep_client_buffer(c, clients[c].buffer, "split")
    models = {c: join(SubmodelPair(clients[c].params, servers[c].params), r.model) for c in ids}
    return r.finish(state, models)


def sflv2_order(cohort: RoundCohort, seed: int, round_index: int) -> list[int]:
    rng = np.random.default_rng([seed, round_index, _ORDER_STREAM])
    ids = list(cohort.client_ids)
    return [ids[i] for i in rng.permutation(len(ids))]


def run_sflv2_round(state: GlobalState, cohort: RoundCohort, fed: Federation, order: Sequence[int] | None = None):
    """One server model and optimizer, visited by the clients in turn."""
    if not cohort.client_ids:
        return _skip_round(state, cohort, fed)
    r = _Round(state, cohort, fed)
    cfg = fed.optim_cfg
    if order is None:
        order = sflv2_order(cohort, fed.batch_seed, r.n)
    if sorted(order) != list(cohort.client_ids):
        raise UsageError("order must be a permutation of the cohort")
    server = _Side(r.pair.server, MomentumBuffer.zeros(r.pair.server))
    client_models = {}
    for c in order:
        client = _Side(r.pair.client, r.client_buffer(c, r.pair.client, "split"))
        for t in range(1, cohort.steps[c] + 1):
            loss, gc, gs = r.split_grads(c, t, client, server, server.buffer)
            r.losses.append(loss)
            ps, bs = sgdm_step(server.params, gs, server.buffer, cfg, r.lr, t)
            server = _Side(ps, bs)
            client = r.client_update(client, gc, t)
        r.keep_client_buffer(c, client.buffer, "split")
        client_models[c] = client.params

    ids = cohort.client_ids
    client_avg = aggregate_weighted([client_models[c] for c in ids], [cohort.weights[c] for c in ids])
    aggregated = join(SubmodelPair(client_avg, server.params), r.model)
    new_state = global_momentum_update(state, aggregated, fed.round_cfg.beta_g)
    return new_state, r.record()


ROUND_FUNCTIONS = {
    "smofi": run_smofi_round,
    "fedavg": run_fedavg_round,
    "sflv1": run_sflv1_round,
    "sflv2": run_sflv2_round,
}


def run_round(state: GlobalState, cohort: RoundCohort, fed: Federation):
    return ROUND_FUNCTIONS[fed.round_cfg.method](state, cohort, fed)
