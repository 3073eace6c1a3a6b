"""Command-line front end: train, eval, sample, sweeps, and FLOPs reports.

Every command reads flags and, optionally, a KEY=VALUE config file (flags
override the file).  Exit codes: 0 success, 2 usage/config error, 3 data
error, 4 numeric failure.  Failures print one machine-parsable line to
stderr: ``error: kind=<ExceptionName> msg="..."``.  The MC_WORKERS
environment variable caps intra-command parallelism.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from . import data as D
from .architectures import (HcltSpec, HmmSpec, build_hclt, build_hmm,
                            chow_liu, prune_hidden_states)
from .checkpoint import load_checkpoint, save_checkpoint
from .circuit import CircuitGraph, evaluate_log_batch, sample_batch
from .em import (EMConfig, TrainLog, bits_per_dim, init_from_product,
                 nominal_flops_per_token, perplexity, train)
from .errors import (ConfigError, ContractError, DataError, DimensionError,
                     MonarchPcError, NumericError)
from .monarch import param_element_count
from .schedule import flops_per_apply, memory_elements, plan_schedule

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _read_config_file(path: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected KEY=VALUE, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


class Options:
    """Flags merged over config-file values; flags win."""

    def __init__(self, args: argparse.Namespace):
        self._args = vars(args)
        cfg_path = self._args.get("config")
        self._file = _read_config_file(cfg_path) if cfg_path else {}

    def get(self, key: str, default=None, cast=str):
        val = self._args.get(key)
        if val is not None:
            return val
        if key in self._file:
            raw = self._file[key]
            if cast is bool:
                return raw.lower() in ("1", "true", "yes")
            return cast(raw)
        return default


def _load_shard(opts: Options, path_key: str = "data") -> D.DatasetShard:
    path = opts.get(path_key)
    if not path:
        raise ConfigError(f"missing --{path_key.replace('_', '-')}")
    p = Path(path)
    if not p.exists():
        raise DataError(f"dataset path does not exist: {p}")
    kind = opts.get("data_kind", "text")
    if kind == "text":
        return D.load_text_chunks(p.read_bytes(),
                                  opts.get("chunk_len", 256, int))
    if kind == "tokens":
        return D.load_token_sequences(D.read_token_file(p),
                                      opts.get("seq_len", 128, int),
                                      opts.get("vocab", 8192, int))
    if kind == "images":
        return D.images_to_shard(D.read_image_container(p),
                                 opts.get("color", "lossless"))
    if kind == "shard":
        return D.read_shard(p)
    raise ConfigError(f"unknown data kind {kind!r}")


def _build_model(opts: Options, shard: D.DatasetShard, seed: int) -> CircuitGraph:
    arch = opts.get("arch", "hmm")
    sum_kind = opts.get("sum", "dense")
    hidden = opts.get("hidden", 16, int)
    depth = opts.get("depth", None, int)
    base = opts.get("base", None, int)
    if arch == "hmm":
        spec = HmmSpec(length=shard.variables, hidden=hidden, vocab=shard.vocab,
                       sum_kind=sum_kind, depth=depth, base=base,
                       homogeneous=not opts.get("inhomogeneous", False, bool))
        return build_hmm(spec, seed=seed)
    if arch == "hclt":
        limit = opts.get("tree_samples", 10000, int)
        tree = chow_liu(shard.data[:limit], shard.vocab)
        spec = HcltSpec(tree=tree, hidden=hidden, vocab=shard.vocab,
                        sum_kind=sum_kind, depth=depth, base=base)
        return build_hclt(spec, seed=seed)
    raise ConfigError(f"unknown architecture {arch!r}")


def _em_config(opts: Options, shard: D.DatasetShard) -> EMConfig:
    default_batch = 20000 if shard.provenance.startswith("patches") else 4096
    return EMConfig(batch_size=opts.get("batch", default_batch, int),
                    epochs=opts.get("epochs", 20, int),
                    schedule=opts.get("schedule", "linear"),
                    eta=opts.get("eta", 1.0, float),
                    floor=opts.get("floor", 1e-8, float),
                    seed=opts.get("seed", 0, int),
                    workers=opts.get("workers", None, int))


def _write_rows(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_train(opts: Options) -> int:
    shard = _load_shard(opts)
    eval_shard = _load_shard(opts, "eval_data") if opts.get("eval_data") else None
    seed = opts.get("seed", 0, int)
    cfg = _em_config(opts, shard)
    factors = opts.get("init_factors")
    if factors:
        hiddens = [int(v) for v in str(factors).split(",")]
        spec = HmmSpec(length=shard.variables,
                       hidden=opts.get("hidden", int(np.prod(hiddens)), int),
                       vocab=shard.vocab, sum_kind=opts.get("sum", "monarch"),
                       depth=opts.get("depth", None, int))
        factor_cfg = EMConfig(batch_size=cfg.batch_size,
                              epochs=opts.get("factor_epochs", cfg.epochs, int),
                              schedule=cfg.schedule, eta=cfg.eta,
                              floor=cfg.floor, seed=seed, workers=cfg.workers)
        graph = init_from_product(spec, hiddens, shard.data, factor_cfg)
    else:
        graph = _build_model(opts, shard, seed)
    graph.meta["dataset_kind"] = opts.get("data_kind", "text")
    graph.meta["provenance"] = shard.provenance
    log = train(graph, shard.data,cfg,
                eval_set=eval_shard.data if eval_shard is not None else None)
    out_dir = Path(opts.get("out", "run_out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(graph, out_dir / "model.ckpt")
    log.write_csv(out_dir / "train_log.csv")
    last = log.rows[-1]
    print(f"trained arch={graph.meta.get('arch')} items={shard.items} "
          f"final_{last.split}_bpc={last.bpc:.6f} out={out_dir}")
    return 0


def cmd_product_init(opts: Options) -> int:
    shard = _load_shard(opts)
    factors = opts.get("factors")
    if not factors:
        raise ConfigError("missing --factors (comma-separated hidden sizes)")
    hiddens = [int(v) for v in str(factors).split(",")]
    cfg = _em_config(opts, shard)
    spec = HmmSpec(length=shard.variables, hidden=int(np.prod(hiddens)),
                   vocab=shard.vocab, sum_kind="monarch")
    graph = init_from_product(spec, hiddens, shard.data, cfg)
    graph.meta["dataset_kind"] = opts.get("data_kind", "text")
    out_dir = Path(opts.get("out", "run_out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(graph, out_dir / "model.ckpt")
    print(f"product-init factors={hiddens} out={out_dir}")
    return 0


def cmd_eval(opts: Options) -> int:
    graph = load_checkpoint(_require(opts, "checkpoint"))
    shard = _load_shard(opts)
    if shard.variables != graph.num_vars or shard.vocab != graph.vocab:
        raise DimensionError(
            f"dataset ({shard.variables} vars, vocab {shard.vocab}) does not "
            f"match model ({graph.num_vars} vars, vocab {graph.vocab})")
    ll = evaluate_log_batch(graph, shard.data)
    if not np.isfinite(ll).all():
        raise NumericError("non-finite log-likelihood on evaluation set")
    total = float(ll.sum())
    tokens = shard.items * shard.variables
    sum_cost, _ = nominal_flops_per_token(graph)
    print(f"bpc={bits_per_dim(total, tokens):.6f} "
          f"nats_per_token={-total / tokens:.6f} "
          f"perplexity={perplexity(total, tokens):.4f} "
          f"flops_per_token={sum_cost} items={shard.items}")
    return 0


def cmd_sample(opts: Options) -> int:
    graph = load_checkpoint(_require(opts, "checkpoint"))
    if not graph.normalized:
        raise ContractError("checkpoint is not normalized; cannot sample")
    count = opts.get("count", 10, int)
    seed = opts.get("seed", 0, int)
    out = opts.get("out", "samples.out")
    t0 = time.perf_counter()
    rows = sample_batch(graph, count, seed) if count else np.zeros(
        (0, graph.num_vars), dtype=np.int64)
    elapsed = time.perf_counter() - t0
    kind = graph.meta.get("dataset_kind", "text")
    if kind == "text" and graph.vocab == D.TEXT_VOCAB:
        Path(out).write_text("\n".join(D.decode_text(rows)) + ("\n" if count else ""))
    elif kind == "images" and graph.num_vars == 192:
        side = 8
        imgs = rows.reshape(-1, side, side, 3)
        D.write_image_container(out, np.clip(imgs, 0, 255).astype(np.uint8))
    else:
        D.write_token_file(out, rows.reshape(-1))
    per = (elapsed / count * 1e3) if count else 0.0
    print(f"samples={count} out={out} total_ms={elapsed * 1e3:.3f} "
          f"per_sample_ms={per:.3f}")
    return 0


def _parse_grid(spec: str) -> list[tuple[str, int, int | None]]:
    """Entries like 'dense:256' or 'monarch:4096:2' (sum kind, hidden, depth)."""
    grid = []
    for token in spec.split(","):
        parts = token.strip().split(":")
        if len(parts) < 2:
            raise ConfigError(f"bad grid entry {token!r}; want sum:hidden[:depth]")
        grid.append((parts[0], int(parts[1]),
                     int(parts[2]) if len(parts) > 2 else None))
    if not grid:
        raise ConfigError("empty sweep grid")
    return grid


def cmd_sweep_scaling(opts: Options) -> int:
    shard = _load_shard(opts)
    eval_shard = _load_shard(opts, "eval_data") if opts.get("eval_data") else None
    grid = _parse_grid(_require(opts, "grid"))
    arch = opts.get("arch", "hmm")
    cfg = _em_config(opts, shard)
    rows = []
    for sum_kind, hidden, depth in grid:
        depth_str = depth if depth is not None else (2 if sum_kind == "monarch" else 1)
        try:
            flops = (hidden * hidden if sum_kind == "dense" else
                     flops_per_apply(plan_schedule(hidden, depth=depth)))
            if arch == "hmm":
                spec = HmmSpec(length=shard.variables, hidden=hidden,
                               vocab=shard.vocab, sum_kind=sum_kind, depth=depth)
                graph = build_hmm(spec, seed=cfg.seed)
            else:
                tree = chow_liu(shard.data[:opts.get("tree_samples", 10000, int)],
                                shard.vocab)
                graph = build_hclt(HcltSpec(tree=tree, hidden=hidden,
                                            vocab=shard.vocab, sum_kind=sum_kind,
                                            depth=depth), seed=cfg.seed)
            log = train(graph, shard.data, cfg,
                        eval_set=eval_shard.data if eval_shard is not None else None)
            train_bpc = [r.bpc for r in log.rows if r.split == "train"][-1]
            eval_bpc = ([r.bpc for r in log.rows if r.split == "eval"][-1]
                        if eval_shard is not None else "")
            rows.append([arch, sum_kind, hidden, depth_str, flops,
                         repr(train_bpc),
                         repr(eval_bpc) if eval_bpc != "" else "", "ok"])
        except MonarchPcError as exc:
            rows.append([arch, sum_kind, hidden, depth_str, "", "", "",
                         f"error:{type(exc).__name__}:{exc}"])
    out = opts.get("out", "scaling.csv")
    _write_rows(out, ["arch", "sum", "hidden", "depth", "flops_per_token",
                      "train_bpc", "eval_bpc", "status"], rows)
    print(f"sweep-scaling points={len(rows)} out={out}")
    return 0


def cmd_sweep_prune(opts: Options) -> int:
    graph = load_checkpoint(_require(opts, "checkpoint"))
    calib = _load_shard(opts, "calibration")
    fractions = [float(v) for v in _require(opts, "fractions").split(",")]
    base_ll = None
    rows = []
    for frac in fractions:
        pruned = prune_hidden_states(graph, frac, calib.data)
        ll = float(evaluate_log_batch(pruned, calib.data).sum())
        if frac == 1.0:
            base_ll = ll
        if base_ll is None:
            full = prune_hidden_states(graph, 1.0, calib.data)
            base_ll = float(evaluate_log_batch(full, calib.data).sum())
        rows.append([repr(frac), repr(ll), repr(ll - base_ll)])
    out = opts.get("out", "prune.csv")
    _write_rows(out, ["fraction", "eval_ll", "delta_vs_full"], rows)
    print(f"sweep-prune points={len(rows)} out={out}")
    return 0


def cmd_flops_report(opts: Options) -> int:
    hiddens = [int(v) for v in opts.get(
        "hidden_list", "4096,8192,16384,32768").split(",")]
    depths = [int(v) for v in opts.get("depth_list", "2,3,4").split(",")]
    n = opts.get("seq_len", 256, int)
    batch = opts.get("batch", 128, int)
    header = ["hidden", "dense_flops", "dense_param_elems", "dense_act_elems"]
    for d in depths:
        header += [f"m{d}_flops", f"m{d}_param_elems", f"m{d}_act_elems"]
    rows = []
    for h in hiddens:
        params, acts = memory_elements("dense", h, n, batch)
        row = [h, h * h, params, acts]
        for d in depths:
            sched = plan_schedule(h, depth=d)
            mp, ma = memory_elements("monarch", h, n, batch, depth=d)
            row += [flops_per_apply(sched), mp, ma]
        rows.append(row)
    out = opts.get("out")
    if out:
        _write_rows(out, header, rows)
        print(f"flops-report rows={len(rows)} out={out}")
    else:
        print(",".join(header))
        for row in rows:
            print(",".join(str(v) for v in row))
    return 0


def _require(opts: Options, key: str) -> str:
    val = opts.get(key)
    if not val:
        raise ConfigError(f"missing --{key.replace('_', '-')}")
    return val


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(
        prog="monarchpc",
        description="Probabilistic circuits with dense/Monarch/butterfly sum "
                    "blocks: training, evaluation, sampling, and sweeps.")
    sub = top.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="KEY=VALUE config file; flags override")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--out")

    def add_data(p, key="data"):
        p.add_argument(f"--{key.replace('_', '-')}")
        p.add_argument("--data-kind", choices=["text", "tokens", "images", "shard"])
        p.add_argument("--chunk-len", type=int)
        p.add_argument("--seq-len", type=int)
        p.add_argument("--vocab", type=int)
        p.add_argument("--color", choices=["lossless", "lossy", "rgb"])

    def add_model(p):
        p.add_argument("--arch", choices=["hmm", "hclt"])
        p.add_argument("--sum", choices=["dense", "monarch"])
        p.add_argument("--hidden", type=int)
        p.add_argument("--depth", type=int)
        p.add_argument("--base", type=int)
        p.add_argument("--inhomogeneous", action="store_const", const=True)
        p.add_argument("--tree-samples", type=int)

    def add_em(p):
        p.add_argument("--batch", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--schedule", choices=["linear", "cosine", "const"])
        p.add_argument("--eta", type=float)
        p.add_argument("--floor", type=float)

    p = sub.add_parser("train", help="ingest, build, train, checkpoint")
    add_common(p); add_data(p); add_model(p); add_em(p)
    p.add_argument("--eval-data")
    p.add_argument("--init-factors")
    p.add_argument("--factor-epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("product-init",
                       help="train dense factors, multiply, save the init")
    add_common(p); add_data(p); add_em(p)
    p.add_argument("--factors")
    p.set_defaults(func=cmd_product_init)

    p = sub.add_parser("eval", help="exact evaluation of a checkpoint")
    add_common(p); add_data(p)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--count", type=int)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("sweep-scaling", help="train a grid of models")
    add_common(p); add_data(p); add_em(p)
    p.add_argument("--arch", choices=["hmm", "hclt"])
    p.add_argument("--tree-samples", type=int)
    p.add_argument("--eval-data")
    p.add_argument("--grid", help="comma list of sum:hidden[:depth]")
    p.set_defaults(func=cmd_sweep_scaling)

    p = sub.add_parser("sweep-prune", help="prune a checkpoint at fractions")
    add_common(p); add_data(p)
    p.add_argument("--checkpoint")
    p.add_argument("--calibration")
    p.add_argument("--fractions")
    p.set_defaults(func=cmd_sweep_prune)

    p = sub.add_parser("flops-report",
                       help="FLOPs and memory element counts per structure")
    add_common(p)
    p.add_argument("--hidden-list")
    p.add_argument("--depth-list")
    p.add_argument("--seq-len", type=int)
    p.add_argument("--batch", type=int)
    p.set_defaults(func=cmd_flops_report)

    return top


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(Options(args))
    except (ConfigError, ContractError, DimensionError) as exc:
        print(f'error: kind={type(exc).__name__} msg="{exc}"', file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f'error: kind={type(exc).__name__} msg="{exc}"', file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f'error: kind={type(exc).__name__} msg="{exc}"', file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
