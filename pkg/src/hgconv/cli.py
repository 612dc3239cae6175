"""Command-line entry point: ``hgconv train|eval|bench|selftest``.

Exit codes: 0 success, 1 runtime failure (or failed selftest property),
2 invalid configuration, data/checkpoint mismatch.
"""

import argparse
import csv
import json
import os
import sys
import time
from contextlib import contextmanager

from . import bench as BE
from . import checkpoint as CK
from . import data as D
from . import model as M
from . import train as TR
from .config import dump_ini, from_dict, load_config
from .errors import CheckpointError, ConfigError, DataError, HGConvError

METRICS_HEADER = ["epoch", "lr", "train_loss", "train_acc", "eval_loss", "eval_acc"]
LOCK_NAME = ".hgconv.lock"


class UsageError(Exception):
    """Raised for problems that map to exit code 2."""


@contextmanager
def out_dir_lock(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, LOCK_NAME)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"{out_dir} is locked by another run (remove {path} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        os.unlink(path)


def _overrides(args):
    sets = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        sets.append(f"run.seed={args.seed}")
    if getattr(args, "out", None):
        sets.append(f"run.out_dir={args.out}")
    if getattr(args, "workers", None) is not None:
        sets.append(f"train.workers={args.workers}")
    return sets


def build_datasets(cfg):
    """``(train, eval)`` datasets for a run config; ``eval`` may be None."""
    d, T = cfg.data, cfg.model.max_seq_len
    if d.task == "manifest":
        train_m = D.read_manifest(d.train_manifest)
        _check_classes(train_m.num_classes, cfg.model.num_classes, d.train_manifest)
        eval_ds = None
        if d.eval_manifest:
            eval_m = D.read_manifest(d.eval_manifest, classes=train_m.classes)
            eval_ds = D.dataset_from_manifest(eval_m, T)
        return D.dataset_from_manifest(train_m, T), eval_ds
    train = D.synth_longrange(d.task, T, d.train_samples, seed=d.data_seed)
    test = D.synth_longrange(d.task, T, d.eval_samples, seed=d.data_seed + 1)
    return train, test


def _check_classes(found, expected, where):
    if found != expected:
        raise UsageError(f"{where} has {found} classes but the model has num_classes={expected}")


def _fmt(x):
    return "" if x is None else f"{x:.6f}"


def cmd_train(args):
    cfg = load_config(args.config, _overrides(args))
    m, t = cfg.model, cfg.train
    train_ds, eval_ds = build_datasets(cfg)
    out = cfg.run.out_dir
    with out_dir_lock(out):
        dump_ini(cfg, os.path.join(out, "config.ini"))
        total = cfg.total_steps(len(train_ds))
        sched = TR.ScheduleConfig(cfg.schedule.peak_lr, cfg.warmup_steps(total), total, cfg.schedule.floor_lr)
        start_epoch, adam, step = 0, None, 0
        if cfg.run.resume:
            ck = CK.load_checkpoint(cfg.run.resume, expected=m)
            params, adam = ck.params, ck.adam
            start_epoch = int(ck.meta.get("epoch", -1)) + 1
            step = int(ck.meta.get("step", 0))
        else:
            params = M.init_params(m, cfg.run.seed)
        if adam is None:
            adam = TR.AdamState.zeros_like(params.named(), t.beta1, t.beta2, t.adam_eps)
        trainer = TR.Trainer(m, params, sched, seed=cfg.run.seed, workers=t.workers,
                             weight_decay=t.weight_decay, clip_norm=t.clip_norm, adam=adam, step=step)
        metrics_path = os.path.join(out, "metrics.csv")
        timing_path = os.path.join(out, "timing.csv")
        mode = "a" if cfg.run.resume and os.path.exists(metrics_path) else "w"
        with open(metrics_path, mode, newline="") as mf, open(timing_path, mode, newline="") as tf:
            mw, tw = csv.writer(mf), csv.writer(tf)
            if mode == "w":
                mw.writerow(METRICS_HEADER)
                tw.writerow(["epoch", "train_seconds", "eval_seconds"])
            last = None
            for epoch in range(start_epoch, t.epochs):
                em = trainer.train_epoch(train_ds, t.batch_size, epoch)
                t0 = time.perf_counter()
                ev = TR.evaluate(trainer.params, m, eval_ds, t.batch_size) if eval_ds is not None else None
                eval_s = time.perf_counter() - t0
                mw.writerow([epoch, _fmt(em.lr), _fmt(em.loss), _fmt(em.accuracy),
                             _fmt(ev and ev.loss), _fmt(ev and ev.accuracy)])
                mf.flush()
                tw.writerow([epoch, f"{em.seconds:.3f}", f"{eval_s:.3f}"])
                tf.flush()
                meta = {"epoch": epoch, "step": trainer.step, "run": cfg.to_dict()}
                CK.save_checkpoint(os.path.join(out, f"epoch_{epoch:03d}.hgc"), trainer.params, m,
                                   trainer.adam, meta)
                last = (epoch, em, ev)
                msg = f"epoch {epoch}: lr {em.lr:.6f} loss {em.loss:.4f} acc {em.accuracy:.4f}"
                if ev is not None:
                    msg += f" eval_loss {ev.loss:.4f} eval_acc {ev.accuracy:.4f}"
                print(msg + f" ({em.seconds:.1f}s)", flush=True)
                if ev is not None and t.target_accuracy > 0 and ev.accuracy >= t.target_accuracy:
                    print(f"eval accuracy reached target {t.target_accuracy}; stopping", flush=True)
                    break
        meta = {"epoch": last[0] if last else start_epoch - 1, "step": trainer.step, "run": cfg.to_dict()}
        CK.save_checkpoint(os.path.join(out, "final.hgc"), trainer.params, m, trainer.adam, meta)
    if args.json and last is not None:
        ev = last[2]
        print(json.dumps({"epoch": last[0], "eval": ev.to_dict() if ev else None}))
    return 0


def _eval_dataset(args, ck):
    cfg = None
    if args.config:
        cfg = load_config(args.config, list(args.set or []))
    elif "run" in ck.meta:
        cfg = from_dict(ck.meta["run"])
    T = ck.config.max_seq_len
    if args.manifest:
        mf = D.read_manifest(args.manifest)
        _check_classes(mf.num_classes, ck.config.num_classes, args.manifest)
        return D.dataset_from_manifest(mf, T), (cfg.train.batch_size if cfg else 64)
    if cfg is None:
        raise UsageError("no --manifest given and the checkpoint carries no run config")
    if cfg.model.max_seq_len != T or cfg.model.num_classes != ck.config.num_classes:
        raise UsageError("config model shape differs from the checkpoint")
    _, ds = build_datasets(cfg)
    if ds is None:
        raise UsageError("run config has no eval data; pass --manifest")
    return ds, cfg.train.batch_size


def cmd_eval(args):
    ck = CK.load_checkpoint(args.checkpoint)
    ds, B = _eval_dataset(args, ck)
    res = TR.evaluate(ck.params, ck.config, ds, B)
    if args.json:
        print(json.dumps(res.to_dict()))
    else:
        print(f"samples {int(res.confusion.sum())}")
        print(f"accuracy {res.accuracy:.6f}")
        print(f"loss {res.loss:.6f}")
        print("confusion (rows = true class, columns = predicted)")
        for row in res.confusion:
            print(" ".join(str(int(v)) for v in row))
    return 0


def cmd_bench(args):
    cfg = load_config(args.config, _overrides(args))
    b = cfg.bench
    out = cfg.run.out_dir
    with out_dir_lock(out):
        report = BE.run_scaling(cfg.model, b.seq_len_list(), reps=b.reps, batch_size=b.batch_size or None,
                                batch_divisor=b.batch_divisor, mixer=b.mixer, threads=b.threads,
                                seed=cfg.run.seed)
        path = os.path.join(out, f"bench_{b.mixer}.csv")
        BE.write_csv(report, path)
    summary = {"csv": path, "rows": len(report.rows), "ok_rows": len(report.ok_rows())}
    try:
        summary["exponent"] = BE.fit_exponent(report)
    except ValueError as exc:
        summary["exponent"] = None
        summary["note"] = str(exc)
    summary["memory_ratios"] = BE.memory_ratios(report)
    if args.json:
        print(json.dumps(summary))
    else:
        for r in report.rows:
            print(f"T={r.seq_len} B={r.batch_size} fwd {r.forward_ms:.2f} ms fwd+bwd "
                  f"{r.forward_backward_ms:.2f} ms peak {r.peak_bytes} B {r.status}")
        if summary["exponent"] is not None:
            print(f"fitted exponent {summary['exponent']:.3f}")
        print(f"wrote {path}")
    return 0


def cmd_selftest(args):
    from . import selftest

    if args.inject_fault:
        from . import layer

        layer.FAULTS.add(args.inject_fault)
    try:
        results = selftest.run_all()
    finally:
        if args.inject_fault:
            layer.FAULTS.discard(args.inject_fault)
    failed = [r for r in results if not r.passed]
    if args.json:
        print(json.dumps([r.to_dict() for r in results]))
    else:
        for r in results:
            print(r.line())
    for r in failed:
        print(f"FAILED property: {r.name}", file=sys.stderr)
    return 1 if failed else 0


def build_parser():
    p = argparse.ArgumentParser(prog="hgconv", description="HRR global-convolution byte classifier")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
        sp.add_argument("--json", action="store_true", help="machine-readable output")
        if seed:
            sp.add_argument("--seed", type=int)
            sp.add_argument("--out", help="output directory (run.out_dir)")

    tr = sub.add_parser("train", help="train a model")
    common(tr)
    tr.add_argument("--workers", type=int)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    common(ev, seed=False)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", help="manifest to evaluate (default: the run's eval set)")
    ev.set_defaults(func=cmd_eval)

    be = sub.add_parser("bench", help="sequence-length scaling benchmark")
    common(be)
    be.set_defaults(func=cmd_bench)

    st = sub.add_parser("selftest", help="fast property checks")
    st.add_argument("--json", action="store_true")
    st.add_argument("--inject-fault", choices=["encode"], help=argparse.SUPPRESS)
    st.set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print("invalid configuration:", file=sys.stderr)
        for k, v in exc.problems.items():
            print(f"  {k}: {v}", file=sys.stderr)
        return 2
    except (UsageError, CheckpointError, DataError) as exc:
        kind = type(exc).__name__
        print(f"error ({kind}): {exc}", file=sys.stderr)
        return 2
    except (HGConvError, OSError, MemoryError) as exc:
        print(f"runtime failure in '{args.command}': {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
