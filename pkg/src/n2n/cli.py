"""``n2n`` command line: init, train, widen, deepen, verify, experiment.

Exit codes: 0 success, 1 usage error, 2 structural or validation error,
3 failed verification.  Machine-readable results go to files or stdout;
human-readable logs go to stderr.
"""
from __future__ import annotations

import argparse
import json
import os
import re
import sys

import numpy as np

from . import modelio, zoo
from .datasets import IdxFormatError, idx_dataset, load_idx, synthetic
from .harness import ConfigError, ExperimentSpec, parse_data_source, run_experiment
from .net2net import NoiseConfig, deepen, widen
from .netgraph import GraphError, init_params
from .tensor import DimensionError
from .train import CsvMetrics, TrainConfig, TrainingAborted, TrainState, train
from .verify import StructureError, check_preserved

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _log(msg):
    print(msg, file=sys.stderr)


def _clock():
    if os.environ.get("N2N_TIMING", "on").lower() in ("0", "off", "false", "no"):
        return lambda: 0.0
    import time
    return time.perf_counter


def _source(text):
    try:
        return parse_data_source(text)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _load_data(source, n_classes=4, input_shape=(1, 16, 16)):
    kind, arg = _source(source)
    if kind == "synth":
        return synthetic(arg, n_classes=n_classes, input_shape=input_shape)
    return idx_dataset(*arg)


def _parse_widen_spec(text):
    spec = {}
    for item in text.split(","):
        m = re.fullmatch(r"\s*([^=\s]+)\s*=\s*(\d+)\s*", item)
        if not m:
            raise UsageError(f"--spec entries must look like NODE=WIDTH, got {item!r}")
        spec[m.group(1)] = int(m.group(2))
    return spec


def _parse_at(text):
    sites = []
    for item in text.split(","):
        m = re.fullmatch(r"\s*([^:\s]+)(?::(\d+)x(\d+))?\s*", item)
        if not m:
            raise UsageError(f"--at entries must look like NODE or NODE:KHxKW, got {item!r}")
        kernel = (int(m.group(2)), int(m.group(3))) if m.group(2) else None
        sites.append((m.group(1), kernel))
    return sites


def _shape(text):
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"bad shape {text!r}") from None
    if not dims or any(d < 1 for d in dims):
        raise UsageError(f"bad shape {text!r}")
    return dims


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_init(a):
    shape = _shape(a.input_shape)
    if a.arch == "toy_inception":
        g = zoo.toy_inception(input_shape=shape, n_classes=a.classes,
                              widths=zoo.scaled_widths(factor=a.width))
    elif a.arch == "conv_stack":
        g = zoo.conv_stack(input_shape=shape, n_classes=a.classes)
    else:
        hidden = tuple(int(v) for v in a.hidden.split(","))
        g = zoo.mlp(int(np.prod(shape)), hidden=hidden, n_classes=a.classes)
    modelio.save(g, init_params(g, a.seed, np.dtype(a.dtype)), a.out)
    _log(f"wrote {a.arch} model to {a.out}")
    return EXIT_OK


def cmd_train(a):
    g, p, state = modelio.load(a.model)
    shape = tuple(g.input_shape[1:])
    n_classes = g.shapes[g.output_id][1]
    data = _load_data(a.data, n_classes=n_classes, input_shape=shape)
    if tuple(data.input_shape) != shape:
        raise GraphError(f"data examples have shape {tuple(data.input_shape)}, model expects {shape}")
    cfg = TrainConfig(optimizer=a.optimizer, lr=a.lr, batch_size=a.batch, max_steps=a.steps, seed=a.seed)
    if state is not None and state.optimizer != a.optimizer:
        _log(f"discarding saved {state.optimizer} state; training with {a.optimizer}")
        state = None
    state = state or TrainState.fresh(a.optimizer, p)
    with CsvMetrics(a.metrics) as sink:
        p = train(g, p, data, cfg, sink=sink, state=state, clock=_clock())
    if a.save:
        modelio.save(g, p, a.save, state)
    _log(f"trained {a.steps} steps (now at step {state.step})")
    return EXIT_OK


def cmd_widen(a):
    spec = _parse_widen_spec(a.spec)
    g, p, _ = modelio.load(a.model)
    sg, sp, plan, report = widen(g, p, spec, noise=NoiseConfig(a.noise, a.seed),
                                 rng=np.random.default_rng(a.seed))
    modelio.save(sg, sp, a.out)
    if a.plan:
        with open(a.plan, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(plan.to_dict(), fh, sort_keys=True)
            fh.write("\n")
    _log(f"widened {', '.join(report.affected)}")
    return EXIT_OK


def cmd_deepen(a):
    sites = _parse_at(a.at)
    g, p, _ = modelio.load(a.model)
    kind, arg = _source(a.calib)
    shape = tuple(g.input_shape[1:])
    if kind == "synth":
        x = synthetic(arg, input_shape=shape, n_classes=g.shapes[g.output_id][1], n_train=640,
                      n_eval=64).x_train
    else:
        x, _ = load_idx(*arg)
    x = x.reshape((len(x),) + shape)
    calib = [x[i:i + 64] for i in range(0, min(len(x), 640), 64)]
    for i, (at, kernel) in enumerate(sites):
        g, p, report = deepen(g, p, at, calib=calib, noise=NoiseConfig(a.noise, seed=i),
                              kernel_size=kernel)
        _log(f"inserted {', '.join(report.new_nodes)} after {at}")
    modelio.save(g, p, a.out)
    return EXIT_OK


def cmd_verify(a):
    teacher = modelio.load(a.teacher)[:2]
    student = modelio.load(a.student)[:2]
    report = check_preserved(teacher, student, n=a.samples, tol=a.tol)
    print(report.to_json())
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_experiment(a):
    spec = ExperimentSpec.from_file(a.config)
    summary = run_experiment(spec, a.outdir)
    for arm, info in summary["arms"].items():
        _log(f"{arm}: median steps-to-threshold {info['median_steps_to_threshold']}, "
             f"median final eval acc {info['median_final_eval_acc']}")
    return EXIT_OK


def build_parser():
    p = _Parser(prog="n2n", description="Function-preserving network growth (Net2Net).")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("init", help="create a freshly initialized model file")
    s.add_argument("--arch", choices=("toy_inception", "conv_stack", "mlp"), default="toy_inception")
    s.add_argument("--input-shape", default="1,16,16")
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--width", type=float, default=1.0, help="toy_inception module width factor")
    s.add_argument("--hidden", default="32", help="mlp hidden widths")
    s.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("train", help="train a model and write per-step metrics")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--lr", type=float, required=True)
    s.add_argument("--optimizer", choices=("sgd", "rmsprop"), required=True)
    s.add_argument("--batch", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--metrics", required=True)
    s.add_argument("--save")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("widen", help="Net2WiderNet")
    s.add_argument("--model", required=True)
    s.add_argument("--spec", required=True)
    s.add_argument("--noise", type=float, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--plan")
    s.set_defaults(func=cmd_widen)

    s = sub.add_parser("deepen", help="Net2DeeperNet")
    s.add_argument("--model", required=True)
    s.add_argument("--at", required=True)
    s.add_argument("--calib", required=True)
    s.add_argument("--noise", type=float, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_deepen)

    s = sub.add_parser("verify", help="check that two models compute the same function")
    s.add_argument("--teacher", required=True)
    s.add_argument("--student", required=True)
    s.add_argument("--samples", type=int, required=True)
    s.add_argument("--tol", type=float, required=True)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("experiment", help="run a teacher/student comparison")
    s.add_argument("--config", required=True)
    s.add_argument("--outdir", required=True)
    s.set_defaults(func=cmd_experiment)
    return p


_INVALID = (ValueError, GraphError, DimensionError, modelio.ModelFileError, IdxFormatError,
            StructureError, ConfigError, TrainingAborted, OSError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        _log(f"n2n: error: {exc}")
        return EXIT_USAGE
    except _INVALID as exc:
        _log(f"n2n: {type(exc).__name__}: {exc}")
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
