"""Teacher/student comparison experiments: Net2Net against random padding
and training from scratch.

An experiment is described by an INI file of flat ``key = value`` pairs::

    [experiment]
    name = wider            ; wider | deeper | explore
    seeds = 0, 1, 2
    data = synth:0          ; or idx:IMAGES,LABELS
    teacher_width = sqrt(0.3)
    student_width = 1.0
    arms = net2net, random_pad, random_init

    [teacher]
    optimizer = rmsprop
    lr = 0.003
    max_steps = 3000

    [net2net]
    max_steps = 2000

Arm sections inherit every training key from ``[teacher]``; the net2net
arm additionally gets the student rule (a tenth of the learning rate).
"""
from __future__ import annotations

import configparser
import dataclasses
import json
import math
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import modelio, zoo
from .baselines import random_pad_baseline
from .datasets import Dataset, idx_dataset, synthetic
from .net2net import NoiseConfig, deepen, widen
from .netgraph import init_params
from .train import CsvMetrics, TrainConfig, TrainingAborted, evaluate, read_metrics, student_config, train

EXPERIMENTS = ("wider", "deeper", "explore")
ARMS = ("net2net", "random_pad", "random_init")
RANDOM_PAD_INIT = "each new entry drawn from its layer's default initializer (He-normal weights, zero bias)"


class ConfigError(ValueError):
    pass


def _number(text: str) -> float:
    text = text.strip()
    m = re.fullmatch(r"sqrt\(\s*([0-9.eE+-]+)\s*\)", text)
    try:
        return math.sqrt(float(m.group(1))) if m else float(text)
    except ValueError:
        raise ConfigError(f"not a number: {text!r}") from None


def _list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


_TRAIN_KEYS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _train_config(section: dict, base: TrainConfig | None = None) -> TrainConfig:
    changes = {}
    for key, raw in section.items():
        if key not in _TRAIN_KEYS:
            raise ConfigError(f"unknown training key {key!r}")
        if key in ("optimizer", "lr_schedule"):
            changes[key] = raw.strip()
        elif key in ("batch_size", "max_steps", "step_every", "seed", "eval_every", "train_eval_size"):
            changes[key] = int(raw)
        else:
            changes[key] = _number(raw)
    try:
        return dataclasses.replace(base or TrainConfig(), **changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_data_source(text: str):
    """``synth:SEED`` or ``idx:IMAGES,LABELS`` -> ``("synth", seed)`` / ``("idx", (img, lbl))``."""
    kind, _, rest = text.partition(":")
    if kind == "synth":
        try:
            return "synth", int(rest)
        except ValueError:
            raise ConfigError(f"synthetic source needs an integer seed, got {rest!r}") from None
    if kind == "idx":
        parts = rest.split(",")
        if len(parts) != 2 or not all(parts):
            raise ConfigError(f"idx source needs IMAGES,LABELS, got {rest!r}")
        return "idx", (parts[0], parts[1])
    raise ConfigError(f"data source must start with synth: or idx:, got {text!r}")


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    seeds: tuple
    teacher_cfg: TrainConfig
    arm_cfgs: dict
    data: str = "synth:0"
    n_classes: int = 4
    n_train: int = 4000
    n_eval: int = 1000
    margin_keep: float = 0.2
    teacher_model: str | None = None
    teacher_width: float = 1.0
    student_width: float = 1.0
    deepen_at: tuple = ()
    deepen_kernels: tuple = ((3, 1), (1, 3))
    calib_batches: int = 10
    noise: float = 0.0
    timing: bool = True
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise ConfigError(f"experiment name must be one of {EXPERIMENTS}, got {self.name!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        for arm in self.arm_cfgs:
            if arm not in ARMS:
                raise ConfigError(f"unknown arm {arm!r}")
        if self.name in ("deeper", "explore") and not self.deepen_at:
            raise ConfigError(f"{self.name} experiment needs deepen_at")
        if self.name in ("wider", "explore") and not self.widens:
            raise ConfigError(f"{self.name} experiment needs student_width > teacher_width")
        if "random_pad" in self.arm_cfgs and not self.widens:
            raise ConfigError("random_pad applies only to experiments that widen")
        parse_data_source(self.data)

    @property
    def widens(self) -> bool:
        return self.student_width > self.teacher_width

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentSpec":
        cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        if "experiment" not in cp:
            raise ConfigError("missing [experiment] section")
        ex = dict(cp["experiment"])
        teacher = _train_config(dict(cp["teacher"]) if "teacher" in cp else {})
        arms = _list(ex.pop("arms", ",".join(ARMS)))
        arm_cfgs = {arm: _train_config(dict(cp[arm]) if arm in cp else {}, teacher) for arm in arms}
        known = {"name", "seeds", "data", "n_classes", "n_train", "n_eval", "margin_keep",
                 "teacher_model", "teacher_width", "student_width", "deepen_at", "deepen_kernels",
                 "calib_batches", "noise", "timing"}
        unknown = set(ex) - known
        if unknown:
            raise ConfigError(f"unknown [experiment] keys {sorted(unknown)}")
        kw = {"teacher_cfg": teacher, "arm_cfgs": arm_cfgs}
        try:
            kw["name"] = ex["name"].strip()
            kw["seeds"] = tuple(int(s) for s in _list(ex["seeds"]))
        except KeyError as exc:
            raise ConfigError(f"[experiment] is missing {exc.args[0]!r}") from None
        except ValueError as exc:
            raise ConfigError(f"bad seeds: {exc}") from None
        for key in ("n_classes", "n_train", "n_eval", "calib_batches"):
            if key in ex:
                kw[key] = int(ex[key])
        for key in ("margin_keep", "teacher_width", "student_width", "noise"):
            if key in ex:
                kw[key] = _number(ex[key])
        if "data" in ex:
            kw["data"] = ex["data"].strip()
        if "teacher_model" in ex:
            kw["teacher_model"] = ex["teacher_model"].strip() or None
        if "deepen_at" in ex:
            kw["deepen_at"] = tuple(_list(ex["deepen_at"]))
        if "deepen_kernels" in ex:
            kw["deepen_kernels"] = tuple(_kernel(k) for k in _list(ex["deepen_kernels"]))
        if "timing" in ex:
            kw["timing"] = cp["experiment"].getboolean("timing")
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "ExperimentSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_ini(fh.read())


def _kernel(text: str) -> tuple:
    m = re.fullmatch(r"(\d+)x(\d+)", text.strip())
    if not m:
        raise ConfigError(f"kernel must look like 3x1, got {text!r}")
    return int(m.group(1)), int(m.group(2))


# --------------------------------------------------------------------------
# running
# --------------------------------------------------------------------------

def load_dataset(spec: ExperimentSpec) -> Dataset:
    kind, arg = parse_data_source(spec.data)
    if kind == "synth":
        return synthetic(arg, n_classes=spec.n_classes, n_train=spec.n_train, n_eval=spec.n_eval,
                         margin_keep=spec.margin_keep)
    return idx_dataset(*arg)


def _arch(spec, dataset, width):
    return zoo.toy_inception(input_shape=dataset.input_shape, n_classes=spec.n_classes,
                             widths=zoo.scaled_widths(factor=width))


def _deepen_pairs(spec, graph, params, calib, seed):
    for i, at in enumerate(spec.deepen_at):
        site = at
        for j, kernel in enumerate(spec.deepen_kernels):
            noise = NoiseConfig(spec.noise, seed=int(np.random.default_rng([seed, 7, i, j]).integers(2**31)))
            graph, params, rep = deepen(graph, params, site, calib=calib, noise=noise, kernel_size=kernel,
                                        name=f"{at}_deep{j + 1}")
            site = rep.new_nodes[0]
    return graph, params


def build_arm(spec: ExperimentSpec, arm: str, teacher, dataset: Dataset, seed: int):
    """Student ``(graph, params)`` of ``arm`` derived from a trained ``teacher``.

    random_init uses the net2net student's architecture with fresh weights.
    """
    if arm == "random_init":
        graph, _ = build_arm(spec, "net2net", teacher, dataset, seed)
        return graph, init_params(graph, [seed, 4], np.float32)
    graph, params = teacher
    if spec.widens:
        wspec = zoo.widen_spec_between(graph, _arch(spec, dataset, spec.student_width))
        if arm == "net2net":
            graph, params, _, _ = widen(graph, params, wspec, noise=NoiseConfig(spec.noise, seed),
                                        rng=np.random.default_rng([seed, 2]))
        else:
            graph, params, _ = random_pad_baseline(graph, params, wspec, np.random.default_rng([seed, 3]))
    if spec.deepen_at:
        bs = spec.teacher_cfg.batch_size
        calib = [dataset.x_train[i * bs:(i + 1) * bs] for i in range(spec.calib_batches)]
        graph, params = _deepen_pairs(spec, graph, params, calib, seed)
    return graph, params


def _clock(spec):
    if spec.timing:
        import time
        return time.perf_counter
    return lambda: 0.0


def _train_to_csv(graph, params, dataset, cfg, path, clock):
    with CsvMetrics(path) as sink:
        try:
            return train(graph, params, dataset, cfg, sink=sink, clock=clock), None
        except TrainingAborted as exc:
            return None, str(exc)


def run_seed(spec: ExperimentSpec, seed: int, outdir: str) -> dict:
    """Train (or load) the teacher, then every arm, for one seed."""
    dataset = load_dataset(spec)
    clock = _clock(spec)
    status = {}
    if spec.teacher_model:
        tg, tp, _ = modelio.load(spec.teacher_model)
        teacher_acc, _ = evaluate(tg, tp, dataset.x_eval, dataset.y_eval)
    else:
        tg = _arch(spec, dataset, spec.teacher_width)
        cfg = dataclasses.replace(spec.teacher_cfg, seed=seed)
        tp, err = _train_to_csv(tg, init_params(tg, [seed, 1], np.float32), dataset, cfg,
                                os.path.join(outdir, f"teacher_seed{seed}.csv"), clock)
        if err:
            return {"seed": seed, "teacher": err, "arms": {a: "teacher aborted" for a in spec.arm_cfgs}}
        modelio.save(tg, tp, os.path.join(outdir, f"teacher_seed{seed}.n2n"))
        teacher_acc = read_metrics(os.path.join(outdir, f"teacher_seed{seed}.csv"))[-1].eval_acc
    for arm, cfg in spec.arm_cfgs.items():
        cfg = dataclasses.replace(cfg, seed=seed)
        if arm == "net2net":
            cfg = student_config(cfg)
        try:
            graph, params = build_arm(spec, arm, (tg, tp), dataset, seed)
        except ValueError as exc:
            status[arm] = f"construction failed: {exc}"
            continue
        final, err = _train_to_csv(graph, params, dataset, cfg,
                                   os.path.join(outdir, f"{arm}_seed{seed}.csv"), clock)
        if err:
            status[arm] = err
            continue
        modelio.save(graph, final, os.path.join(outdir, f"{arm}_seed{seed}.n2n"))
        status[arm] = "ok"
    return {"seed": seed, "teacher_eval_acc": teacher_acc, "arms": status}


def _workers():
    env = os.environ.get("N2N_THREADS")
    return max(1, int(env)) if env else (os.cpu_count() or 1)


def run_experiment(spec: ExperimentSpec, outdir, workers=None) -> dict:
    """Run all seeds (in parallel processes when more than one worker), then summarize."""
    os.makedirs(outdir, exist_ok=True)
    workers = _workers() if workers is None else workers
    if workers > 1 and len(spec.seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(spec.seeds))) as pool:
            runs = list(pool.map(run_seed, [spec] * len(spec.seeds), spec.seeds, [outdir] * len(spec.seeds)))
    else:
        runs = [run_seed(spec, s, outdir) for s in spec.seeds]
    summary = summarize(spec, outdir, runs)
    write_summary(summary, outdir)
    return summary


# --------------------------------------------------------------------------
# summary
# --------------------------------------------------------------------------

def steps_to_threshold(rows, threshold):
    """First emitted step whose eval accuracy reaches ``threshold``; ``None`` if never."""
    for r in rows:
        if r.eval_acc >= threshold:
            return r.step
    return None


def _median(values):
    vals = [math.inf if v is None else v for v in values]
    return float(np.median(vals)) if vals else None


def summarize(spec: ExperimentSpec, outdir, runs=None) -> dict:
    """Per-arm statistics recomputed from the CSVs in ``outdir``."""
    runs = {r["seed"]: r for r in (runs or [])}
    arms = {}
    for arm in spec.arm_cfgs:
        per_seed = []
        for seed in spec.seeds:
            run = runs.get(seed, {})
            threshold = _teacher_threshold(spec, outdir, seed, run)
            path = os.path.join(outdir, f"{arm}_seed{seed}.csv")
            status = run.get("arms", {}).get(arm, "ok" if os.path.exists(path) else "missing")
            entry = {"seed": seed, "status": status, "threshold": threshold}
            if status == "ok":
                rows = read_metrics(path)
                entry.update(step0_eval_acc=rows[0].eval_acc, final_eval_acc=rows[-1].eval_acc,
                             final_step=rows[-1].step,
                             steps_to_threshold=steps_to_threshold(rows, threshold))
            per_seed.append(entry)
        ok = [e for e in per_seed if e["status"] == "ok"]
        arms[arm] = {
            "runs": per_seed,
            "median_steps_to_threshold": _median([e["steps_to_threshold"] for e in ok]) if ok else None,
            "median_final_eval_acc": _median([e["final_eval_acc"] for e in ok]) if ok else None,
            "median_step0_eval_acc": _median([e["step0_eval_acc"] for e in ok]) if ok else None,
            "poisoned": len(ok) != len(per_seed),
        }
    return {"experiment": spec.name, "seeds": list(spec.seeds), "arms": arms,
            "metadata": {"random_pad_initializer": RANDOM_PAD_INIT,
                         "threshold": "teacher final eval accuracy (per seed)",
                         "student_rule": "net2net arm trains with lr / 10",
                         "timing": spec.timing, **spec.metadata}}


def _teacher_threshold(spec, outdir, seed, run):
    path = os.path.join(outdir, f"teacher_seed{seed}.csv")
    if os.path.exists(path):
        return read_metrics(path)[-1].eval_acc
    return run.get("teacher_eval_acc")


def _fmt(v):
    if v is None:
        return "never"
    if isinstance(v, float) and math.isinf(v):
        return "never"
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def write_summary(summary: dict, outdir) -> None:
    def clean(o):
        if isinstance(o, float) and math.isinf(o):
            return None
        if isinstance(o, dict):
            return {k: clean(v) for k, v in o.items()}
        if isinstance(o, list):
            return [clean(v) for v in o]
        return o

    with open(os.path.join(outdir, "summary.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(clean(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")
    lines = ["arm,seed,status,threshold,step0_eval_acc,final_eval_acc,steps_to_threshold"]
    for arm, info in summary["arms"].items():
        for e in info["runs"]:
            lines.append(",".join([arm, str(e["seed"]), e["status"].replace(",", ";"), _fmt(e["threshold"]),
                                   _fmt(e.get("step0_eval_acc")), _fmt(e.get("final_eval_acc")),
                                   _fmt(e.get("steps_to_threshold"))]))
        lines.append(",".join([arm, "median", "poisoned" if info["poisoned"] else "ok", "",
                               _fmt(info["median_step0_eval_acc"]), _fmt(info["median_final_eval_acc"]),
                               _fmt(info["median_steps_to_threshold"])]))
    with open(os.path.join(outdir, "summary.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
