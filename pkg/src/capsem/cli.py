"""Command-line surface: data generation, training, inference, gradient
checking, benchmarking, and model inspection.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 failed
numeric check. All commands honor --seed and are run-to-run
deterministic in single-threaded mode.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import replace

import numpy as np

from . import tensor as T
from .classifier import (CapsuleClassifier, TrainRegime,
                         build_constellation_classifier, train_classifier)
from .data import (ConstellationSpec, make_dataset, read_capsules, read_model,
                   spec_from_dict, write_capsules, write_model)
from .errors import (ConfigError, DataFormatError, DomainError, ShapeError)
from .routing import (CapsuleBatch, RoutingConfig, RoutingParams, init_params,
                      param_count, route)
from .tensor import Tape, backward, grad_check, reduce_sum, square


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this artifact reserves 2 for
    data errors, so usage problems exit 1 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_json(path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: invalid JSON ({e})") from None


def _take_section(config: dict, name: str, known: set[str]) -> dict:
    section = config.get(name, {})
    if not isinstance(section, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return section


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    spec = ConstellationSpec()
    if args.spec:
        spec = spec_from_dict(_load_json(args.spec))
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    batch, labels = make_dataset(spec, args.n)
    write_capsules(args.out, batch, labels)
    hist = np.bincount(labels, minlength=spec.n_classes)
    print(f"wrote {args.n} samples ({spec.caps_per_sample} capsules each, "
          f"d_cov={spec.d_cov}, d_in={spec.d_in}) to {args.out}")
    print("class counts: " + " ".join(str(int(c)) for c in hist))
    return 0


# ---------------------------------------------------------------------------
# train


_TASK_KEYS = {f for f in ConstellationSpec.__dataclass_fields__}
_MODEL_KEYS = {"n_mid", "d_mid", "d_out", "n_iters", "tie_betas", "var_floor"}
_TRAIN_KEYS = {"epochs", "batch_size", "train_samples", "test_samples",
               "mixup", "mixup_alpha", "seed", "lr_start", "lr_peak",
               "beta1_start", "beta1_peak", "warm_frac", "threads"}
_DATA_KEYS = {"train", "val"}


def cmd_train(args) -> int:
    config = _load_json(args.config) if args.config else {}
    if not isinstance(config, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(config) - {"task", "model", "train", "data"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    task_cfg = _take_section(config, "task", _TASK_KEYS)
    model_cfg = _take_section(config, "model", _MODEL_KEYS)
    train_cfg = _take_section(config, "train", _TRAIN_KEYS)
    data_cfg = _take_section(config, "data", _DATA_KEYS)

    seed = args.seed if args.seed is not None else train_cfg.get("seed", 0)

    if args.task == "constellation":
        spec = spec_from_dict(task_cfg)
        n_train = train_cfg.get("train_samples", 2000)
        n_test = train_cfg.get("test_samples", 500)
        train_caps, train_labels = make_dataset(spec, n_train)
        val_caps, val_labels = make_dataset(spec, n_test, start=n_train)
        d_cov, d_in = spec.d_cov, spec.d_in
        n_classes = spec.n_classes
    else:
        if "train" not in data_cfg:
            raise ConfigError("capsfile task needs config data.train")
        train_caps, train_labels = read_capsules(data_cfg["train"])
        if train_labels is None:
            raise DataFormatError(f"{data_cfg['train']} carries no labels")
        if "val" in data_cfg:
            val_caps, val_labels = read_capsules(data_cfg["val"])
            if val_labels is None:
                raise DataFormatError(f"{data_cfg['val']} carries no labels")
        else:
            val_caps, val_labels = train_caps, train_labels
        poses = T.asarray(train_caps.poses)
        d_cov, d_in = poses.shape[-2], poses.shape[-1]
        n_classes = int(np.max(train_labels)) + 1

    model = build_constellation_classifier(
        d_cov, d_in, n_classes,
        n_mid=model_cfg.get("n_mid", 32),
        d_mid=model_cfg.get("d_mid", 4),
        d_out=model_cfg.get("d_out", 4),
        n_iters=model_cfg.get("n_iters", 3),
        tie_betas=model_cfg.get("tie_betas", False),
        var_floor=model_cfg.get("var_floor", 1e-2),
        seed=seed,
    )
    regime = TrainRegime(
        epochs=args.epochs if args.epochs is not None
        else train_cfg.get("epochs", 5),
        batch_size=train_cfg.get("batch_size", 20),
        lr_start=train_cfg.get("lr_start", 2e-4),
        lr_peak=train_cfg.get("lr_peak", 1e-2),
        beta1_start=train_cfg.get("beta1_start", 0.999),
        beta1_peak=train_cfg.get("beta1_peak", 0.9 * 0.999),
        warm_frac=train_cfg.get("warm_frac", 0.10),
        mixup=False if args.no_mixup else train_cfg.get("mixup", True),
        mixup_alpha=tuple(train_cfg.get("mixup_alpha", (0.2, 0.2))),
        seed=seed,
        threads=args.threads if args.threads is not None
        else train_cfg.get("threads", 1),
    )

    rows = []

    def on_epoch(entry):
        line = f"{entry.epoch},{entry.val_loss:.6f},{entry.val_accuracy:.4f}"
        print(line, flush=True)
        rows.append(line)

    print("epoch,val_loss,val_accuracy")
    try:
        train_classifier(model, train_caps, train_labels, val_caps,
                         val_labels, regime, on_epoch=on_epoch)
    except DomainError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3

    write_model(args.out, model.layers, n_classes)
    print(f"model written to {args.out}")
    if args.log:
        with open(args.log, "w") as f:
            f.write("epoch,val_loss,val_accuracy\n")
            f.write("\n".join(rows) + "\n")
    return 0


# ---------------------------------------------------------------------------
# route


def cmd_route(args) -> int:
    layers, n_classes = read_model(args.model)
    model = CapsuleClassifier(layers, n_classes)
    caps, labels = read_capsules(args.input)

    poses = T.asarray(caps.poses)
    cfg0 = layers[0][1]
    if poses.shape[-2:] != (cfg0.d_cov, cfg0.d_in):
        raise DataFormatError(
            f"input capsules have (d_cov, d_in)={poses.shape[-2:]}, model "
            f"expects ({cfg0.d_cov}, {cfg0.d_in})"
        )

    probs = model.predict_proba(caps, n_iters=args.iters)
    print("sample," + ",".join(f"p{k}" for k in range(n_classes)))
    for i, row in enumerate(probs):
        print(f"{i}," + ",".join(f"{p:.6f}" for p in row))
    if labels is not None:
        acc = float((probs.argmax(axis=1) == labels).mean())
        print(f"accuracy,{acc:.4f}")

    if args.trace:
        _dump_trace(model, caps, args.iters, args.trace)
        print(f"trace written to {args.trace}")
    return 0


def _dump_trace(model, caps, n_iters, path, max_samples: int = 100):
    scores = T.asarray(caps.batched().scores)[:max_samples]
    poses = T.asarray(caps.batched().poses)[:max_samples]
    current = CapsuleBatch(scores, poses)
    doc = {"layers": []}
    for params, config in model.layers:
        if n_iters is not None:
            config = replace(config, n_iters=n_iters)
        out, trace = route(params, current, config, want_trace=True)
        doc["layers"].append({
            "iterations": [
                {
                    "probs": step.probs.tolist(),
                    "used": step.used.tolist(),
                    "ignored": step.ignored.tolist(),
                    "scores": step.scores.tolist(),
                }
                for step in trace.iterations
            ],
        })
        current = CapsuleBatch(out.scores.data, out.poses.data)
    with open(path, "w") as f:
        json.dump(doc, f)


# ---------------------------------------------------------------------------
# gradcheck


def _gradcheck_suite(seed: int):
    """Small cross-mode instances, differentiated through the full loop."""
    rng = np.random.default_rng(seed)
    suite = []
    for mode, tie in (("fixed", False), ("fixed", True),
                      ("variable_input", False), ("variable_output", False)):
        if mode == "fixed":
            cfg = RoutingConfig(n_out=2, n_in=3, d_cov=2, d_in=2, d_out=2,
                                n_iters=3, tie_betas=tie)
        elif mode == "variable_input":
            cfg = RoutingConfig(n_out=2, d_cov=2, d_in=2, d_out=2, n_iters=3)
        else:
            cfg = RoutingConfig(n_out="variable", d_cov=2, d_in=2, d_out=2,
                                n_iters=3)
        params = init_params(cfg, int(rng.integers(2 ** 31)))
        w = np.asarray(params.weights)
        w += rng.normal(0, 0.3, size=w.shape)
        if params.biases is not None:
            params.biases += rng.normal(0, 0.3, size=params.biases.shape)
        bu = np.atleast_1d(np.asarray(params.beta_use))
        bu += rng.normal(0, 0.3, size=bu.shape)
        if not params.tied:
            bi = np.atleast_1d(np.asarray(params.beta_ign))
            bi += rng.normal(0, 0.3, size=bi.shape)
        n = 3
        caps = CapsuleBatch(rng.uniform(-2, 2, size=(1, n)),
                            rng.normal(size=(1, n, 2, 2)))
        out_bias = rng.normal(0, 0.3, size=(2, 2, 2)) \
            if mode == "variable_output" else None
        name = mode + ("+tied" if tie else "")
        suite.append((name, cfg, params, caps, out_bias))
    return suite


def _instance_grad_error(cfg, params, caps, out_bias) -> float:
    """Max relative error over every differentiable input of route()."""
    worst = 0.0
    fields = {"weights": params.weights, "beta_use": params.beta_use,
              "scores": T.asarray(caps.scores), "poses": T.asarray(caps.poses)}
    if params.biases is not None:
        fields["biases"] = params.biases
    if not params.tied:
        fields["beta_ign"] = params.beta_ign

    for name, value in fields.items():
        def f(x):
            vals = {k: T.tensor(np.asarray(v)) for k, v in fields.items()}
            vals[name] = x
            beta_ign = vals["beta_use"] if params.tied else vals["beta_ign"]
            p = RoutingParams(vals["weights"], vals.get("biases"),
                              vals["beta_use"], beta_ign)
            c = CapsuleBatch(vals["scores"], vals["poses"])
            out = route(p, c, cfg, out_bias=out_bias)
            return reduce_sum(square(out.scores)) \
                + reduce_sum(square(out.poses)) \
                + reduce_sum(out.variances)
        worst = max(worst, grad_check(f, np.asarray(value), step=1e-5))
    return worst


def cmd_gradcheck(args) -> int:
    worst = 0.0
    for name, cfg, params, caps, out_bias in _gradcheck_suite(args.seed):
        err = _instance_grad_error(cfg, params, caps, out_bias)
        worst = max(worst, err)
        print(f"{name}: max relative error {err:.3e}")
    print(f"worst: {worst:.3e} (tolerance {args.tol:.1e})")
    if worst > args.tol:
        print("gradcheck FAILED", file=sys.stderr)
        return 3
    print("gradcheck passed")
    return 0


# ---------------------------------------------------------------------------
# bench


def _parse_grid(spec: str) -> dict[str, list[str]]:
    grid = {}
    for part in spec.split(";"):
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"bad grid term {part!r}; expected key=v1,v2")
        key, values = part.split("=", 1)
        grid[key.strip()] = [v.strip() for v in values.split(",") if v.strip()]
    allowed = {"n_in", "n_out", "variant"}
    unknown = set(grid) - allowed
    if unknown:
        raise ConfigError(f"unknown grid keys: {sorted(unknown)}")
    return grid


def cmd_bench(args) -> int:
    grid = _parse_grid(args.grid)
    n_ins = [int(v) for v in grid.get("n_in", ["8", "16", "32"])]
    n_outs = [int(v) for v in grid.get("n_out", ["4", "8", "16"])]
    variants = grid.get("variant", ["fixed", "variable_input"])
    dims = dict(d_cov=4, d_in=4, d_out=4)
    iters, batch = 3, 8
    rng = np.random.default_rng(args.seed)

    rows = []
    for variant in variants:
        for n_in in n_ins:
            for n_out in n_outs:
                if variant == "fixed":
                    cfg = RoutingConfig(n_out=n_out, n_in=n_in, n_iters=iters,
                                        **dims)
                elif variant == "variable_input":
                    cfg = RoutingConfig(n_out=n_out, n_iters=iters, **dims)
                else:
                    raise ConfigError(f"unknown variant {variant!r}")
                params = init_params(cfg, int(rng.integers(2 ** 31)))
                caps = CapsuleBatch(
                    rng.uniform(-2, 2, size=(batch, n_in)),
                    rng.normal(size=(batch, n_in, dims["d_cov"], dims["d_in"])))

                fwd = _time_ns(lambda: route(params, caps, cfg), args.reps)

                def fwd_bwd():
                    tape = Tape()
                    tracked = params.tracked(tape)
                    out = route(tracked, caps, cfg)
                    loss = reduce_sum(square(out.scores)) \
                        + reduce_sum(square(out.poses))
                    backward(tape, loss)

                bwd = _time_ns(fwd_bwd, args.reps)
                rows.append({
                    "variant": variant, "n_in": n_in, "n_out": n_out,
                    "d_cov": dims["d_cov"], "d_in": dims["d_in"],
                    "d_out": dims["d_out"], "iters": iters,
                    "ns_per_sample_forward": fwd // batch,
                    "ns_per_sample_backward": bwd // batch,
                })

    fieldnames = ["variant", "n_in", "n_out", "d_cov", "d_in", "d_out",
                  "iters", "ns_per_sample_forward", "ns_per_sample_backward"]
    with open(args.csv, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} bench rows to {args.csv}")

    _warn_if_not_monotone(rows)
    return 0


def _time_ns(fn, reps: int) -> int:
    fn()  # warm caches before timing
    best = None
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        dt = time.perf_counter_ns() - t0
        best = dt if best is None else min(best, dt)
    return best


def _warn_if_not_monotone(rows) -> None:
    by_key = {}
    for r in rows:
        by_key.setdefault((r["variant"], r["n_out"]), []).append(
            (r["n_in"], r["ns_per_sample_forward"]))
    for key, series in by_key.items():
        series.sort()
        times = [t for _, t in series]
        if any(b < a for a, b in zip(times, times[1:])):
            print(f"warning: forward time not monotone in n_in for "
                  f"{key[0]}, n_out={key[1]}: {times}", file=sys.stderr)


# ---------------------------------------------------------------------------
# inspect


def cmd_inspect(args) -> int:
    layers, n_classes = read_model(args.model)
    total = 0
    for k, (params, cfg) in enumerate(layers):
        counts = param_count(cfg)
        total += counts.total
        n_in = cfg.n_in if cfg.n_in is not None else "-"
        print(f"layer {k}: mode={cfg.mode} n_in={n_in} n_out={cfg.n_out} "
              f"d_cov={cfg.d_cov} d_in={cfg.d_in} d_out={cfg.d_out} "
              f"iters={cfg.n_iters} tie_betas={cfg.tie_betas}")
        print(f"  params: weights={counts.weights} biases={counts.biases} "
              f"betas={counts.betas} total={counts.total}")
        if cfg.mode == "fixed":
            shared = param_count(replace(cfg, n_in=None))
            var_out = param_count(
                RoutingConfig(n_out="variable", d_cov=cfg.d_cov,
                              d_in=cfg.d_in, d_out=cfg.d_out,
                              n_iters=cfg.n_iters, tie_betas=cfg.tie_betas))
            print(f"  sharing: variable_input total={shared.total} "
                  f"factor={counts.total / shared.total:g} (= n_in); "
                  f"variable_output weights={var_out.weights} "
                  f"weight_factor={counts.weights / var_out.weights:g} "
                  f"(= n_in*n_out)")
    print(f"model: {len(layers)} layers, {n_classes} classes, "
          f"{total} parameters")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> _Parser:
    parser = _Parser(prog="capsem", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[], help="generate a labeled "
                       "constellation capsule file")
    p.add_argument("--spec", help="ConstellationSpec JSON file")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the two-layer classifier")
    p.add_argument("--task", choices=["constellation", "capsfile"],
                   default="constellation")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", required=True, help="model output path")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-mixup", action="store_true")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--log", help="also write the epoch CSV here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("route", help="run a model over a capsule file")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--trace", help="write per-iteration JSON trace here")
    p.set_defaults(func=cmd_route)

    p = sub.add_parser("gradcheck", help="finite-difference check of the "
                       "routing gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="time routing over a grid")
    p.add_argument("--grid", default="n_in=8,16,32;n_out=4,8,16;"
                   "variant=fixed,variable_input")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--csv", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="print per-layer parameter counts "
                       "and sharing factors")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataFormatError, ConfigError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DomainError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
