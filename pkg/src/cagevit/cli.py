"""Command-line entry point.

Every failure prints one line to stderr of the form
``cagevit: error stage=<stage> type=<ErrorType> msg="<message>"`` and
exits 2 for usage errors, 3 for bad data or configs and 4 for failed checks.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import complexity, experiments, gradcheck
from .attention import KINDS
from .data import gen_dataset
from .errors import CageError, ContractError, MeasurementError, NumericalError, TrainingError
from .model import (CONFIG_FILE, TINY, VARIANTS, VariantConfig, count_params, forward, load_checkpoint,
                    param_breakdown, save_checkpoint)
from .salience import ingest_bundle, select_and_rearrange, weighted_salience, write_bundle
from .serialization import read_tnsr, write_tnsr

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 2, 3, 4
PRESETS = {"tiny": TINY, **{k.lower(): v for k, v in VARIANTS.items()}}


class UsageError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage: str, exc: BaseException, code: int):
        super().__init__(str(exc))
        self.stage, self.exc, self.code = stage, exc, code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(stage: str, kind: str, msg: str) -> None:
    print(f"cagevit: error stage={stage} type={kind} msg={json.dumps(msg)}", file=sys.stderr)


def _stage(name: str, fn, *args, **kw):
    """Run ``fn`` and tag any failure with the pipeline stage it came from."""
    try:
        return fn(*args, **kw)
    except (TrainingError, MeasurementError) as exc:
        raise StageError(name, exc, EXIT_CHECK) from exc
    except (CageError, ValueError, KeyError, OSError) as exc:
        raise StageError(name, exc, EXIT_DATA) from exc


def _csv(kind):
    def parse(text):
        try:
            return [kind(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected comma-separated {kind.__name__} values, got {text!r}")
    return parse


def load_config(arg: str) -> VariantConfig:
    """A preset name (``tiny``, ``cagevit-t``, ...) or a ``key=value`` file."""
    if arg.lower() in PRESETS:
        return PRESETS[arg.lower()]
    path = Path(arg)
    if not path.is_file():
        raise ContractError(f"config {arg!r} is neither a preset {sorted(PRESETS)} nor a readable file")
    return VariantConfig.load(path)


# ----------------------------------------------------------------------------
# commands


def cmd_salience(a):
    bundle = _stage("ingest", ingest_bundle, a.bundle)
    s = _stage("salience", weighted_salience, bundle)
    _stage("write", write_tnsr, a.out, s.values)
    print(f"wrote {a.out} shape={tuple(s.values.shape)}")


def cmd_select(a):
    scores = _stage("ingest", read_tnsr, a.scores)
    part = _stage("select", select_and_rearrange, scores.data.reshape(-1), a.rho)
    print(json.dumps({"major": part.major.tolist(), "minor": part.minor.tolist()}))


def cmd_forward(a):
    cfg = _stage("config", load_config, a.config)
    params = _stage("checkpoint", load_checkpoint, a.ckpt)
    if params.config != cfg:
        raise StageError("config", ContractError("checkpoint config differs from --config"), EXIT_DATA)
    image = _stage("ingest", read_tnsr, a.image)
    bundle = _stage("ingest", ingest_bundle, a.bundle)
    logits = _stage("forward", forward, params, image.data, bundle)
    print(" ".join(repr(float(v)) for v in logits.data))


def cmd_gradcheck(a):
    results = _stage("gradcheck", gradcheck.run_suite, a.module and [a.module], a.seed)
    for module, ops in results.items():
        for op, err in ops.items():
            status = "ok" if err < gradcheck.TOLERANCE else "FAIL"
            print(f"{module:10s} {op:28s} {err:.3e} {status}")
    worst = gradcheck.worst_error(results)
    print(f"worst={worst:.3e} tolerance={gradcheck.TOLERANCE:g}")
    if not gradcheck.passed(results):
        _fail("gradcheck", "CheckFailed", f"worst relative error {worst:.3e} >= {gradcheck.TOLERANCE:g}")
        return EXIT_CHECK


def cmd_bench(a):
    cfg = _stage("config", complexity.bench_config, a.kind, d=a.d, n_heads=a.heads, p=a.p, R=a.R)
    fit = _stage("bench", complexity.bench, a.kind, cfg, a.lengths, a.repeats, a.seed)
    text = fit.to_csv()
    if a.csv:
        _stage("write", Path(a.csv).write_text, text)
    sys.stdout.write(text)


def cmd_train_toy(a):
    cfg = _stage("config", load_config, a.config)
    if a.ckpt_out and (Path(a.ckpt_out) / CONFIG_FILE).exists() and not a.overwrite:
        raise StageError("checkpoint", FileExistsError(f"checkpoint already exists at {a.ckpt_out}; pass --overwrite"),
                         EXIT_DATA)
    res = _stage("train", experiments.train_toy, cfg, a.steps, a.seed, n_samples=a.samples,
                 batch_size=a.batch, lr=a.lr, eval_every=a.log_every, n_holdout=a.holdout, log=print)
    print(f"final_train_accuracy={res.accuracy:.4f}")
    if res.holdout_accuracy is not None:
        print(f"holdout_accuracy={res.holdout_accuracy:.4f}")
    if a.ckpt_out:
        _stage("checkpoint", save_checkpoint, a.ckpt_out, res.params, a.overwrite)
        print(f"saved checkpoint to {a.ckpt_out}")


def cmd_params(a):
    cfg = _stage("config", load_config, a.config)
    parts = _stage("params", param_breakdown, cfg)
    for name, n in parts.items():
        print(f"{name:18s} {n:>14,d}")
    print(f"{'total':18s} {count_params(cfg):>14,d}")


def cmd_sweep(a):
    cfg = _stage("config", load_config, a.config)
    rows = _stage("sweep", experiments.sweep, a.param, a.values, a.steps, a.seed, config=cfg,
                  n_samples=a.samples, n_holdout=a.holdout, eval_every=max(a.steps, 1))
    print(f"{a.param:>6s} {'params':>10s} {'train_acc':>9s} {'holdout_acc':>11s} {'final_loss':>11s}")
    for r in rows:
        print(f"{r['value']:>6g} {r['params']:>10d} {r['accuracy']:>9.4f} {r['holdout_accuracy']:>11.4f} "
              f"{r['final_loss']:>11.4f}")


def cmd_synth(a):
    cfg = _stage("config", load_config, a.config)
    task = experiments.task_for(cfg, seed=a.seed, n_maps=a.maps)
    sample = _stage("synth", gen_dataset, task, a.index + 1)[a.index]
    _stage("write", write_tnsr, a.image_out, sample.image)
    _stage("write", write_bundle, a.bundle_out, sample.bundle)
    print(f"label={sample.label} hot={sample.hot.tolist()}")


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cagevit", allow_abbrev=False, description="Activation-guided vision transformer toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help, allow_abbrev=False)
        sp.set_defaults(fn=fn)
        return sp

    s = add("salience", cmd_salience, "weighted salience map of a bundle, written as TNSR")
    s.add_argument("--bundle", required=True)
    s.add_argument("--out", required=True)

    s = add("select", cmd_select, "major/minor partition of a TNSR score vector")
    s.add_argument("--scores", required=True)
    s.add_argument("--rho", type=float, required=True)

    s = add("forward", cmd_forward, "logits for one image and bundle")
    for flag in ("--config", "--ckpt", "--image", "--bundle"):
        s.add_argument(flag, required=True)

    s = add("gradcheck", cmd_gradcheck, "finite-difference gradient suite")
    s.add_argument("--module", choices=sorted(gradcheck.SUITE))
    s.add_argument("--seed", type=int, default=0)

    s = add("bench", cmd_bench, "wall-clock scaling benchmark with CSV output")
    s.add_argument("--kind", required=True, choices=KINDS)
    s.add_argument("--lengths", type=_csv(int), default=[256, 512, 1024, 2048, 4096])
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--csv")
    s.add_argument("--d", type=int, default=128)
    s.add_argument("--heads", type=int, default=1)
    s.add_argument("--p", type=int, default=7)
    s.add_argument("--R", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)

    s = add("train-toy", cmd_train_toy, "train on the synthetic task")
    s.add_argument("--config", default="tiny")
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--samples", type=int, default=512)
    s.add_argument("--batch", type=int, default=32)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--holdout", type=int, default=0)
    s.add_argument("--log-every", type=int, default=100)
    s.add_argument("--ckpt-out")
    s.add_argument("--overwrite", action="store_true")

    s = add("params", cmd_params, "parameter count per component")
    s.add_argument("--config", required=True)

    s = add("sweep", cmd_sweep, "toy-scale ablation over rho or K")
    s.add_argument("--param", required=True, choices=("rho", "K"))
    s.add_argument("--values", required=True, type=_csv(float))
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", default="tiny")
    s.add_argument("--samples", type=int, default=512)
    s.add_argument("--holdout", type=int, default=512)

    s = add("synth", cmd_synth, "write one synthetic image and bundle for the given config")
    s.add_argument("--config", default="tiny")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--maps", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--image-out", required=True)
    s.add_argument("--bundle-out", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        _fail("usage", "UsageError", str(exc))
        return EXIT_USAGE
    try:
        code = args.fn(args)
    except StageError as exc:
        _fail(exc.stage, type(exc.exc).__name__, str(exc.exc))
        return exc.code
    except NumericalError as exc:
        _fail("numeric", type(exc).__name__, str(exc))
        return EXIT_DATA
    return code or EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
