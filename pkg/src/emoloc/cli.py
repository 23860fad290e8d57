"""``emoloc`` command line: gen-data, train, infer, eval, gradcheck, sweep.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Option precedence: command-line flags, then ``--config`` key=value file, then
built-in defaults.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import synthdata
from .ccl import CclConfig, EpochRecord, episode_loss, train
from .dcin import DcinConfig, DcinModel, init_model, load_checkpoint, save_checkpoint
from .episode import Episode
from .errors import ConfigError, ParseError, PreconditionError, TrainingError
from .inference import infer, read_detections, write_detections
from .metrics import evaluate, ground_truth_of

log = logging.getLogger("emoloc")

GRADCHECK_SIZES = {
    "tiny": dict(T=8, d=4, N=3, L=2),
    "small": dict(T=16, d=6, N=4, L=3),
}
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def read_config_file(path) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}: line {n}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {p}")
    return p


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    if args.episodes < 1 or args.test_episodes < 1:
        raise UsageError("--episodes and --test-episodes must be >= 1")
    cfg = synthdata.SynthConfig(
        n_classes=args.classes,
        d=args.dim,
        T_range=(args.T_min or args.T, args.T),
        n_train=args.episodes,
        n_test=args.test_episodes,
        events_range=(args.events_min, args.events_max),
        event_len_range=(args.event_len_min, args.event_len_max),
        snr=args.snr,
        noise=args.noise,
        shift=args.shift,
        modal_correlation=args.modal_correlation,
        seed=args.seed,
    )
    train_set, test_set = synthdata.generate(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    synthdata.save(train_set, out / "train.txt")
    synthdata.save(test_set, out / "test.txt")
    print(f"wrote {len(train_set)} train / {len(test_set)} test episodes to {out}")
    return 0


def _ccl_config(args, relax=None) -> CclConfig:
    return CclConfig(
        beta=args.beta,
        relax=args.relax if relax is None else relax,
        mode=args.mode,
        tau=args.tau,
        lambdas=(args.lambda1, args.lambda2, args.lambda3, args.lambda4),
        lr=args.lr,
        batch_size=args.batch_size,
    )


def cmd_train(args) -> int:
    data = synthdata.load(_existing(args.data))
    if len(data) == 0:
        raise UsageError(f"{args.data}: dataset is empty")
    dcfg = DcinConfig(d=data.d, n_classes=data.n_classes, layers=args.layers, margin=args.margin)
    ccfg = _ccl_config(args)
    model = init_model(dcfg, args.seed)
    log_path = Path(args.log) if args.log else Path(str(args.out_model) + ".log.csv")
    lines = [EpochRecord.CSV_HEADER]
    t0 = time.time()

    def on_epoch(rec: EpochRecord) -> None:
        lines.append(rec.csv())
        log.info("epoch %d/%d total=%.6f (%.0fs)", rec.epoch, args.epochs, rec.total, time.time() - t0)

    train(model, data.episodes, ccfg, args.epochs, args.seed, on_epoch)
    save_checkpoint(model, args.out_model)
    log_path.write_text("\n".join(lines) + "\n")
    print(f"saved {args.out_model} after {args.epochs} epochs; log {log_path}")
    return 0


def cmd_infer(args) -> int:
    model = load_checkpoint(_existing(args.model))
    data = synthdata.load(_existing(args.data))
    dets = infer(model, data.episodes, args.gamma1, args.gamma2)
    write_detections(dets, args.out)
    print(f"wrote {len(dets)} detections to {args.out}")
    return 0


def cmd_eval(args) -> int:
    dets = read_detections(_existing(args.detections))
    data = synthdata.load(_existing(args.data))
    report = evaluate(dets, ground_truth_of(data.episodes))
    text = report.text()
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    if args.class_table:
        Path(args.class_table).write_text(report.class_table())
    return 0


def gradcheck(size: str = "tiny", seed: int = 0) -> float:
    """Max relative gradient error of the full training objective on a random episode."""
    from .autodiff import finite_diff_check

    dims = GRADCHECK_SIZES[size]
    rng = np.random.default_rng(seed)
    dcfg = DcinConfig(d=dims["d"], n_classes=dims["N"], layers=dims["L"])
    model = init_model(dcfg, rng)
    labels = tuple(int(e) for e in rng.choice(dims["N"], size=2, replace=False))
    ep = Episode(
        "gradcheck",
        rng.uniform(-1, 1, (dims["T"], dims["d"])),
        rng.uniform(-1, 1, (dims["T"], dims["d"])),
        labels,
    )
    ccfg = CclConfig(mode="mask")
    cache: dict = {}

    def f(params):
        total, _ = episode_loss(DcinModel.from_parameters(dcfg, params), ep, ccfg,
                                pseudo_labels=cache)
        return total

    return finite_diff_check(f, model.parameters(), eps=1e-5)


def cmd_gradcheck(args) -> int:
    t0 = time.time()
    err = gradcheck(args.size, args.seed)
    ok = err < GRADCHECK_TOL
    print(f"max_rel_error={err:.3e} tol={GRADCHECK_TOL:g} seconds={time.time() - t0:.2f} "
          f"{'PASS' if ok else 'FAIL'}")
    return 0 if ok else 2


def _int_list(raw: str) -> list[int]:
    try:
        return [int(x) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {raw!r}") from None


def cmd_sweep(args) -> int:
    train_set = synthdata.load(_existing(args.data))
    test_set = synthdata.load(_existing(args.test_data))
    gt = ground_truth_of(test_set.episodes)
    rows = ["layers,relax,R@0.5,R@0.7,mAP,mIoU"]
    for L in args.layers:
        for R in args.relax:
            model = init_model(DcinConfig(d=train_set.d, n_classes=train_set.n_classes,
                                          layers=L, margin=args.margin), args.seed)
            ccfg = _ccl_config(args, relax=R)
            train(model, train_set.episodes, ccfg, args.epochs, args.seed)
            rep = evaluate(infer(model, test_set.episodes, args.gamma1, args.gamma2), gt)
            rows.append(f"{L},{R},{rep.recall_at[0.5]:.4f},{rep.recall_at[0.7]:.4f},"
                        f"{rep.mean_ap:.4f},{rep.mean_iou:.4f}")
            log.info("sweep L=%d R=%d mIoU=%.2f", L, R, rep.mean_iou)
    text = "\n".join(rows) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return 0


# ---------------------------------------------------------------- parser


def _add_train_flags(p) -> None:
    defaults = CclConfig()
    p.add_argument("--layers", type=int, default=DcinConfig().layers)
    p.add_argument("--relax", type=int, default=defaults.relax)
    p.add_argument("--mode", choices=("mask", "soft"), default=defaults.mode)
    p.add_argument("--beta", type=float, default=defaults.beta)
    p.add_argument("--tau", type=float, default=defaults.tau)
    p.add_argument("--margin", type=float, default=DcinConfig().margin)
    for i, w in enumerate(defaults.lambdas, start=1):
        p.add_argument(f"--lambda{i}", type=float, default=w)
    p.add_argument("--lr", type=float, default=defaults.lr)
    p.add_argument("--batch-size", type=int, default=defaults.batch_size)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--seed", type=int, default=42)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="emoloc", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="key=value file of option defaults")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = synthdata.SynthConfig()
    p = sub.add_parser("gen-data", help="write synthetic train/test datasets")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=s.seed)
    p.add_argument("--episodes", type=int, default=s.n_train)
    p.add_argument("--test-episodes", type=int, default=s.n_test)
    p.add_argument("--classes", type=int, default=s.n_classes)
    p.add_argument("--dim", type=int, default=s.d)
    p.add_argument("--T", type=int, default=s.T_range[1], help="max episode length")
    p.add_argument("--T-min", type=int, default=0, help="min episode length (default: --T)")
    p.add_argument("--events-min", type=int, default=s.events_range[0])
    p.add_argument("--events-max", type=int, default=s.events_range[1])
    p.add_argument("--event-len-min", type=int, default=s.event_len_range[0])
    p.add_argument("--event-len-max", type=int, default=s.event_len_range[1])
    p.add_argument("--snr", type=float, default=s.snr)
    p.add_argument("--noise", type=float, default=s.noise, help="background noise std")
    p.add_argument("--shift", type=int, default=s.shift, help="max subtitle misalignment")
    p.add_argument("--modal-correlation", type=float, default=s.modal_correlation)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--out-model", required=True)
    p.add_argument("--log", help="epoch log path (default: <out-model>.log.csv)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write detections for every episode")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--gamma1", type=float, default=None, help="default 2/N")
    p.add_argument("--gamma2", type=float, default=None, help="default 1.2/N")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--detections", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="also write the report here")
    p.add_argument("--class-table", help="write per-class AP as comma-separated text")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the training objective")
    p.add_argument("--size", choices=sorted(GRADCHECK_SIZES), default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="layer x relaxation sweep, comma-separated table")
    p.add_argument("--data", required=True, help="training dataset")
    p.add_argument("--test-data", required=True)
    p.add_argument("--out")
    p.add_argument("--gamma1", type=float, default=None)
    p.add_argument("--gamma2", type=float, default=None)
    _add_train_flags(p)
    p.set_defaults(layers=[1, 2, 3, 4, 5], relax=[0, 1, 2, 3, 4])
    for action in p._actions:
        if action.dest in ("layers", "relax"):
            action.type = _int_list
    p.set_defaults(func=cmd_sweep)
    return parser


def _apply_config(parser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    values = read_config_file(_existing(args.config))
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{args.config}: unknown keys {', '.join(unknown)}")
    for action in sub._actions:
        if action.dest in values:
            action.required = False
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(message)s",
        )
        _validate_gammas(args)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, ParseError, PreconditionError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


def _validate_gammas(args) -> None:
    g1 = getattr(args, "gamma1", None)
    g2 = getattr(args, "gamma2", None)
    if g1 is not None and g2 is not None and g2 > g1:
        raise ConfigError(f"--gamma2 ({g2}) must not exceed --gamma1 ({g1})")


if __name__ == "__main__":
    sys.exit(main())
