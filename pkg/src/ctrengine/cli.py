"""Command-line entry point: ``ctrengine <command> [options] [--section.key value ...]``.

Every command writes into ``--out`` (created if needed) a ``config.json``
snapshot of the resolved configuration, its outputs, and ``manifest.json``
with SHA-256 digests of the inputs and outputs. Training commands also
write ``checkpoint.npz`` and ``metrics.jsonl``.

Exit status is 0 on success, 1 on a usage, configuration or validation
error and 2 when training aborts on a numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .errors import NumericalError, ValidationError
from .features import iter_synthetic, parse_examples, write_examples, write_truth
from .metrics import PredictionLog, calibration_report, mean_logloss, pd, per_query_auc_arrays
from .model import CTRModel
from .nas import run_search
from .sampling import SamplingSummary, sample_and_reweight
from .trainer import TeacherLog, Trainer, evaluate, join_teacher, record_teacher


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunDir:
    def __init__(self, path, command: str, cfg: RunConfig):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.inputs: dict = {}
        self.outputs: list = []
        self.write_text("config.json", cfg.to_json())

    def input(self, path) -> Path:
        p = Path(path)
        if not p.is_file():
            raise ValidationError(f"input file not found: {p}")
        self.inputs[str(p)] = _sha256(p)
        return p

    def file(self, name) -> Path:
        self.outputs.append(name)
        return self.path / name

    def write_text(self, name, text) -> None:
        self.file(name).write_text(text, encoding="utf-8")

    def write_json(self, name, obj) -> None:
        self.write_text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def write_jsonl(self, name, records) -> None:
        with open(self.file(name), "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")

    def finish(self) -> None:
        manifest = {
            "version": __version__,
            "command": self.command,
            "inputs": self.inputs,
            "outputs": {n: _sha256(self.path / n) for n in sorted(set(self.outputs))},
        }
        (self.path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                                 encoding="utf-8")


def _load(args, cfg):
    return list(parse_examples(args.run.input(args.data)))


def _summary(trainer_or_result, burn_in=0.2) -> dict:
    res = trainer_or_result.result() if isinstance(trainer_or_result, Trainer) else trainer_or_result
    if len(res.labels) == 0:
        return {"examples": 0}
    return {"examples": int(len(res.labels)), "burn_in": burn_in,
            "progressive_logloss": res.logloss(burn_in), "aggregate_bias": res.aggregate_bias(burn_in),
            "per_query_auc": res.per_query_auc(burn_in), "lambdas": res.lambdas.tolist()}


def _train(args, cfg, examples, model=None) -> Trainer:
    if args.resume:
        trainer = Trainer.load(args.run.input(args.resume))
    else:
        model = model or CTRModel(cfg.feature_spec(), cfg.model())
        tcfg = cfg.trainer()
        if tcfg.total_examples is None:
            tcfg = dataclasses.replace(tcfg, total_examples=len(examples))
        trainer = Trainer(model, cfg.optimizer(), cfg.losses(), cfg.bias_constraints(), tcfg)
    return trainer


def _finish_training(args, trainer: Trainer) -> None:
    run = args.run
    trainer.save(run.file("checkpoint.npz"))
    trainer.log.write_jsonl(run.file("predictions.jsonl"))
    run.write_jsonl("metrics.jsonl", trainer.metrics)
    run.write_json("summary.json", _summary(trainer))


# -- commands ---------------------------------------------------------------


def cmd_gen_data(args, cfg):
    synth = cfg.synthetic()
    pairs = list(iter_synthetic(synth))
    examples = [ex for ex, _ in pairs]
    write_examples(args.run.file("examples.jsonl"), examples)
    write_truth(args.run.file("truth.jsonl"), examples, [t for _, t in pairs])
    args.run.write_json("feature_spec.json", cfg.feature_spec().to_dict())


def cmd_train(args, cfg):
    examples = _load(args, cfg)
    trainer = _train(args, cfg, examples)
    trainer.fit(examples)
    _finish_training(args, trainer)


def cmd_train_teacher(args, cfg):
    examples = _load(args, cfg)
    trainer = _train(args, cfg, examples)
    teacher = record_teacher(examples, trainer)
    teacher.write_jsonl(args.run.file("teacher.jsonl"))
    _finish_training(args, trainer)


def cmd_sample(args, cfg):
    stream = parse_examples(args.run.input(args.data))
    if args.teacher:
        stream = join_teacher(stream, TeacherLog.read_jsonl(args.run.input(args.teacher)))
    summary = SamplingSummary()
    write_examples(args.run.file("sampled.jsonl"), sample_and_reweight(stream, cfg.sampling(), summary))
    args.run.write_json("sampling_summary.json", summary.to_dict())


def cmd_distill_train(args, cfg):
    teacher = TeacherLog.read_jsonl(args.run.input(args.teacher))
    examples = list(join_teacher(parse_examples(args.run.input(args.data)), teacher))
    trainer = _train(args, cfg, examples)
    trainer.fit(examples)
    _finish_training(args, trainer)


def cmd_eval(args, cfg):
    trainer = Trainer.load(args.run.input(args.checkpoint))
    examples = list(parse_examples(args.run.input(args.data)))
    log = evaluate(trainer.model, examples, trainer.config.batch_size, trainer.mask)
    log.write_jsonl(args.run.file("predictions.jsonl"))
    _report_files(args.run, log, examples, cfg)


def _report_files(run, log, examples, cfg):
    labels = np.array([ex.label for ex in examples], dtype=np.float64)
    weights = np.array([ex.weight for ex in examples], dtype=np.float64)
    qids = np.array([ex.query_id for ex in examples], dtype=np.int64)
    bc = cfg.bias_constraints()
    rep = calibration_report(log.preds, labels, weights, None if bc is None else bc.edges)
    run.write_text("calibration.csv", rep.to_csv())
    run.write_json("summary.json", {
        "examples": len(examples), "logloss": mean_logloss(log.preds, labels, weights) if examples else None,
        "aggregate_bias": rep.aggregate_bias, "bias_variance": rep.bias_variance,
        "per_query_auc": per_query_auc_arrays(qids, log.preds, labels)})


def _check_ids(log, examples):
    ids = [ex.example_id for ex in examples]
    if log.ids.tolist() != ids:
        raise ValidationError("prediction log and data file list different example ids")


def cmd_pd(args, cfg):
    examples = _load(args, cfg)
    spec, mcfg = cfg.feature_spec(), cfg.model()
    logs = []
    for tag, seed in (("a", args.seed_a), ("b", args.seed_b)):
        model = CTRModel(spec, dataclasses.replace(mcfg, seed=seed))
        tcfg = cfg.trainer()
        if tcfg.total_examples is None:
            tcfg = dataclasses.replace(tcfg, total_examples=len(examples))
        trainer = Trainer(model, cfg.optimizer(), cfg.losses(), cfg.bias_constraints(), tcfg).fit(examples)
        trainer.save(args.run.file(f"checkpoint_{tag}.npz"))
        trainer.log.write_jsonl(args.run.file(f"predictions_{tag}.jsonl"))
        args.run.write_jsonl(f"metrics_{tag}.jsonl", trainer.metrics)
        logs.append(trainer.log)
    args.run.write_json("pd_report.json", {"M": len(logs[0]), "delta_r": pd(logs[0], logs[1]),
                                           "seed_a": args.seed_a, "seed_b": args.seed_b})


def cmd_nas(args, cfg):
    examples = _load(args, cfg)
    tcfg = cfg.trainer()
    if tcfg.total_examples is None:
        tcfg = dataclasses.replace(tcfg, total_examples=len(examples))
    res = run_search(examples, cfg.feature_spec(), cfg.model(), cfg.nas(), cfg.optimizer(), cfg.losses(), tcfg)
    res.write_trajectory(args.run.file("trajectory.jsonl"))
    args.run.write_json("selection.json", {"decisions": res.decisions, "cost": res.cost,
                                           "supernet_cost": res.supernet_cost, "target": res.target})
    res.trainer.save(args.run.file("checkpoint.npz"))
    args.run.write_jsonl("metrics.jsonl", res.trainer.metrics)


def cmd_report(args, cfg):
    log = PredictionLog.read_jsonl(args.run.input(args.predictions))
    examples = list(parse_examples(args.run.input(args.data)))
    _check_ids(log, examples)
    _report_files(args.run, log, examples, cfg)


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate a synthetic example stream and its ground-truth logits"),
    "train": (cmd_train, "online single-pass training with progressive validation"),
    "train-teacher": (cmd_train_teacher, "train a teacher and record its progressive predictions"),
    "sample": (cmd_sample, "down-sample a stream with inverse-probability reweighting"),
    "distill-train": (cmd_distill_train, "join teacher predictions and train a student"),
    "eval": (cmd_eval, "score a data file with a frozen checkpoint"),
    "pd": (cmd_pd, "train two seeds and report their prediction difference"),
    "nas": (cmd_nas, "weight-sharing architecture search"),
    "report": (cmd_report, "calibration CSV and summary metrics for a prediction log"),
}

_NEEDS = {
    "train": ("data",), "train-teacher": ("data",), "sample": ("data",), "distill-train": ("data", "teacher"),
    "eval": ("data", "checkpoint"), "pd": ("data",), "nas": ("data",), "report": ("data", "predictions"),
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ctrengine", description="Online CTR training engine.")
    p.add_argument("--version", action="version", version=f"ctrengine {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name, (_, help_) in COMMANDS.items():
        s = sub.add_parser(name, help=help_, description=help_)
        s.add_argument("--config", help="JSON config file (defaults for every omitted key)")
        s.add_argument("--out", required=True, help="run directory")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override; also accepted as --KEY VALUE")
        if name != "gen-data":
            s.add_argument("--data", help="input examples (JSONL)")
        if name in ("sample", "distill-train"):
            s.add_argument("--teacher", help="teacher log (JSONL) to join")
        if name in ("train", "train-teacher", "distill-train"):
            s.add_argument("--resume", help="continue from this checkpoint")
        if name == "eval":
            s.add_argument("--checkpoint")
        if name == "report":
            s.add_argument("--predictions")
        if name == "pd":
            s.add_argument("--seed-a", type=int, default=0)
            s.add_argument("--seed-b", type=int, default=1)
        if name == "nas":
            s.add_argument("--target-fraction", type=float, dest="nas_target_fraction")
            s.add_argument("--gamma", type=float, dest="nas_gamma")
            s.add_argument("--alpha0", type=float, dest="nas_lr")
            s.add_argument("--rho", type=float, dest="nas_rho")
    return p


def _dotted_overrides(extra) -> list:
    out = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unrecognized argument '{tok}'")
        key = tok[2:]
        if "=" in key:
            out.append(key)
            i += 1
        elif i + 1 < len(extra):
            out.append(f"{key}={extra[i + 1]}")
            i += 2
        else:
            raise UsageError(f"option '{tok}' needs a value")
    return out


def run(argv=None) -> int:
    try:
        args, extra = build_parser().parse_known_args(argv)
        if args.command is None:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        for need in _NEEDS.get(args.command, ()):
            if getattr(args, need, None) is None:
                raise UsageError(f"{args.command} requires --{need}")
        overrides = list(args.set) + _dotted_overrides(extra)
        if args.command == "nas":
            for key in ("target_fraction", "gamma", "lr", "rho"):
                v = getattr(args, f"nas_{key}")
                if v is not None:
                    overrides.append(f"nas.{key}={v!r}")
        cfg = RunConfig.load(args.config, overrides) if args.config else RunConfig(None, overrides)
        args.run = RunDir(args.out, args.command, cfg)
        if args.config:
            args.run.input(args.config)
        COMMANDS[args.command][0](args, cfg)
        args.run.finish()
        return 0
    except NumericalError as exc:
        print(f"ctrengine: numerical abort: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, OSError) as exc:
        print(f"ctrengine: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
