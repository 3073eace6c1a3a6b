"""Expectation-maximization training: full-batch and stochastic mini-batch.

A full EM step replaces every parameter row by its normalized expected
counts; the stochastic step takes a per-row convex combination
``(1 - eta) * old + eta * batch_counts`` with a linearly or cosine decaying
step size.  All updates floor entries at epsilon and renormalize, so rows
stay strictly positive and stochastic.  Training is deterministic for a
fixed seed and worker count (seeded shuffles, fixed chunk reduction order).
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import monarch
from .architectures import HcltSpec, HmmSpec, build_hclt, build_hmm
from .circuit import CircuitGraph, FlowTable, evaluate_log_batch, flows
from .errors import ConfigError, ContractError
from .monarch import PARAM_FLOOR, row_convex_update
from .product import (CompatibilityCertificate, check_compatible, multiply,
                      renormalize, untie)

LN2 = math.log(2.0)


@dataclass(frozen=True)
class EMConfig:
    """Knobs for stochastic EM (text default batch 4096, image 20000)."""

    batch_size: int = 4096
    epochs: int = 20
    schedule: str = "linear"  # linear | cosine | const
    eta: float = 1.0          # step size for the const schedule
    floor: float = PARAM_FLOOR
    seed: int = 0
    workers: int | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.schedule not in ("linear", "cosine", "const"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if not 0.0 < self.eta <= 1.0:
            raise ConfigError("eta must lie in (0, 1]")


def schedule_eta(kind: str, step: int, total_steps: int, eta: float = 1.0) -> float:
    """Step size at global step `step` of `total_steps`."""
    if kind == "const":
        return eta
    frac = step / max(1, total_steps)
    if kind == "linear":
        return 1.0 - frac
    if kind == "cosine":
        return 0.5 * (1.0 + math.cos(math.pi * frac))
    raise ConfigError(f"unknown schedule {kind!r}")


@dataclass
class TrainLogRow:
    epoch: int
    split: str  # train | eval
    bpc: float
    nats_per_token: float
    cumulative_flops: int
    wallclock_ms: float
    cumulative_leaf_flops: int


TRAIN_LOG_HEADER = ["epoch", "split", "bpc", "nats_per_token",
                    "cumulative_flops", "wallclock_ms", "cumulative_leaf_flops"]


@dataclass
class TrainLog:
    rows: list[TrainLogRow] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRAIN_LOG_HEADER)
            for r in self.rows:
                w.writerow([r.epoch, r.split, repr(r.bpc),
                            repr(r.nats_per_token), r.cumulative_flops,
                            f"{r.wallclock_ms:.3f}", r.cumulative_leaf_flops])

    def final_bpc(self, split: str = "eval") -> float:
        vals = [r.bpc for r in self.rows if r.split == split]
        if not vals:
            raise ContractError(f"no {split!r} rows logged")
        return vals[-1]


def bits_per_dim(total_loglik_nats: float, count: int) -> float:
    """-LL / (count * ln 2); BPC for text, BPD for pixels."""
    if count <= 0:
        raise ConfigError("symbol count must be positive")
    return -total_loglik_nats / (count * LN2)


def perplexity(total_loglik_nats: float, tokens: int) -> float:
    if tokens <= 0:
        raise ConfigError("token count must be positive")
    return math.exp(-total_loglik_nats / tokens)


def apply_flow_update(graph: CircuitGraph, table: FlowTable, eta: float,
                      floor: float = PARAM_FLOOR) -> None:
    """M-step: per-row convex combination toward batch-normalized counts."""
    for pid, param in graph.params.items():
        monarch.em_update_param_(param, table.sum_acc[pid], eta, floor)
    for tid, tab in graph.leaf_tables.items():
        graph.leaf_tables[tid] = row_convex_update(tab, table.leaf_acc[tid],
                                                   eta, floor)


def em_minibatch_step(graph: CircuitGraph, batch: np.ndarray, eta: float,
                      floor: float = PARAM_FLOOR,
                      workers: int | None = None) -> FlowTable | None:
    """One stochastic EM step in place; returns the flow table (None when
    eta == 0, which leaves parameters untouched)."""
    if not 0.0 <= eta <= 1.0:
        raise ConfigError("eta must lie in [0, 1]")
    if eta == 0.0:
        return None
    table = flows(graph, batch, workers=workers)
    apply_flow_update(graph, table, eta, floor)
    return table


def em_full_step(graph: CircuitGraph, dataset: np.ndarray,
                 floor: float = PARAM_FLOOR,
                 workers: int | None = None) -> FlowTable:
    """Full-batch EM step: parameters become normalized expected counts."""
    if dataset.shape[0] == 0:
        raise ContractError("em_full_step requires a non-empty dataset")
    return em_minibatch_step(graph, dataset, 1.0, floor, workers)


def nominal_flops_per_token(graph: CircuitGraph) -> tuple[int, int]:
    """(sum-block multiply-adds, leaf elements) per token, by the hidden-size
    convention: the cost of the largest sum parameter's single application
    (h^2 dense, the per-layer contraction sum for Monarch)."""
    sum_cost = max((monarch.param_flops(p) for p in graph.params.values()),
                   default=0)
    leaf_cost = max((b.size for b in graph.blocks
                     if hasattr(b, "table_id")), default=0)
    return int(sum_cost), int(leaf_cost)


def train(graph: CircuitGraph, dataset: np.ndarray, config: EMConfig,
          eval_set: np.ndarray | None = None) -> TrainLog:
    """Stochastic EM over `config.epochs` epochs with seeded shuffling.

    Per-epoch train rows report the running log-likelihood collected from
    the flow passes (the classic EM sequence for full-batch runs); eval rows
    are exact held-out evaluations.  Cumulative FLOPs count sum-block
    multiply-adds per token seen; leaf costs go in their own column.
    """
    if dataset.shape[0] == 0:
        raise ContractError("training requires a non-empty dataset")
    rng = np.random.default_rng(config.seed)
    items, n_vars = dataset.shape
    batches_per_epoch = (items + config.batch_size - 1) // config.batch_size
    total_steps = config.epochs * batches_per_epoch
    sum_cost, leaf_cost = nominal_flops_per_token(graph)
    log = TrainLog()
    flops = 0
    leaf_flops = 0
    step = 0
    start = time.perf_counter()
    for epoch in range(config.epochs):
        order = rng.permutation(items)
        epoch_ll = 0.0
        epoch_tokens = 0
        for b in range(batches_per_epoch):
            batch = dataset[order[b * config.batch_size:(b + 1) * config.batch_size]]
            eta = schedule_eta(config.schedule, step, total_steps, config.eta)
            step += 1
            table = em_minibatch_step(graph, batch, eta, config.floor,
                                      config.workers)
            if table is not None:
                epoch_ll += table.total_loglik
            epoch_tokens += batch.shape[0] * n_vars
            flops += sum_cost * batch.shape[0] * n_vars
            leaf_flops += leaf_cost * batch.shape[0] * n_vars
        wall = (time.perf_counter() - start) * 1e3
        log.rows.append(TrainLogRow(
            epoch=epoch, split="train",
            bpc=bits_per_dim(epoch_ll, epoch_tokens),
            nats_per_token=-epoch_ll / epoch_tokens,
            cumulative_flops=flops, wallclock_ms=wall,
            cumulative_leaf_flops=leaf_flops))
        if eval_set is not None and eval_set.shape[0]:
            ll = float(evaluate_log_batch(graph, eval_set).sum())
            tokens = eval_set.shape[0] * n_vars
            wall = (time.perf_counter() - start) * 1e3
            log.rows.append(TrainLogRow(
                epoch=epoch, split="eval",
                bpc=bits_per_dim(ll, tokens),
                nats_per_token=-ll / tokens,
                cumulative_flops=flops, wallclock_ms=wall,
                cumulative_leaf_flops=leaf_flops))
    return log


def init_from_product(spec: HmmSpec | HcltSpec, factor_hiddens: Sequence[int],
                      dataset: np.ndarray, factor_config: EMConfig,
                      target_hidden: int | None = None) -> CircuitGraph:
    """Train dense factor circuits, multiply, untie, renormalize.

    Each factor t is the spec rebuilt dense at `factor_hiddens[t]` and
    trained independently on the dataset (seeded from the config seed plus
    the factor index); the product of the hidden sizes must equal the target
    hidden size.  A single factor returns the trained dense circuit as is.
    """
    hiddens = [int(h) for h in factor_hiddens]
    if not hiddens:
        raise ConfigError("need at least one factor hidden size")
    target = target_hidden if target_hidden is not None else spec.hidden
    if int(np.prod(hiddens)) != target:
        raise ConfigError(
            f"factor hidden sizes {hiddens} do not multiply to {target}")
    factors = []
    build = build_hmm if isinstance(spec, HmmSpec) else build_hclt
    for t, h in enumerate(hiddens):
        g = build(spec.with_hidden(h, "dense"), seed=factor_config.seed + t)
        train(g, dataset, replace(factor_config, seed=factor_config.seed + t))
        factors.append(g)
    if len(factors) == 1:
        return factors[0]
    cert = check_compatible(factors)
    if not isinstance(cert, CompatibilityCertificate):
        raise ContractError(f"factor circuits are incompatible: {cert}")
    return renormalize(untie(multiply(factors, cert)))
