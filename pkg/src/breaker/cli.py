"""``breaker`` command-line entry point.

Subcommands: gen, train, eval, gradcheck, export-reps. Exit codes are a
stable contract: 0 success, 2 config error, 3 I/O error, 4 numeric abort,
5 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint, data, evaluation, gradcheck, model, trainer

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4, 5
SECTIONS = ("data", "train", "eval")
ECHO_NAME = "resolved_config.json"


class ConfigError(Exception):
    pass


class InputError(Exception):
    pass


@dataclass
class EvalConfig:
    sample_cap: int = 3000
    seed: int = 0
    export_cap: int = 3000
    during_training: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown eval config key(s): {', '.join(unknown)}")
        cfg = cls(**d)
        if cfg.sample_cap < 2 or cfg.export_cap < 1:
            raise ConfigError("eval caps must be positive (sample_cap >= 2)")
        return cfg


@dataclass
class CliConfig:
    data: Optional[data.SyntheticConfig]
    train: trainer.TrainConfig
    eval: EvalConfig

    def resolved(self) -> dict:
        out = {"train": self.train.to_dict(), "eval": asdict(self.eval)}
        if self.data is not None:
            d = asdict(self.data)
            d["beta"] = self.data.resolved_beta().tolist()
            out["data"] = d
        return out


def parse_config(raw: dict, need_data: bool = False) -> CliConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    try:
        dcfg = None
        if "data" in raw:
            dcfg = data.SyntheticConfig.from_dict(raw["data"])
            dcfg.validate()
        elif need_data:
            raise ConfigError("missing required config section: data")
        tcfg = trainer.TrainConfig.from_dict(raw.get("train", {}))
        ecfg = EvalConfig.from_dict(raw.get("eval", {}))
    except (data.DataError, trainer.TrainError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return CliConfig(dcfg, tcfg, ecfg)


def load_config(path: Optional[str], need_data: bool = False) -> CliConfig:
    if path is None:
        return parse_config({}, need_data)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(raw, need_data)


def write_echo(out_dir: Path, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / ECHO_NAME).write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def _load_dataset(path) -> data.Dataset:
    try:
        return data.load_dataset(path)
    except (OSError, data.DataError) as exc:
        raise InputError(f"cannot load dataset from {path}: {exc}") from exc


def _load_checkpoint(path) -> checkpoint.Checkpoint:
    try:
        return checkpoint.load_checkpoint(path)
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    except checkpoint.CheckpointError as exc:
        raise InputError(f"checkpoint {path}: {exc}") from exc


def _check_compatible(ck: checkpoint.Checkpoint, manifest: data.Manifest) -> None:
    want = (tuple(manifest.cardinalities), manifest.n_items)
    have = (tuple(ck.spec.user_cardinalities), ck.spec.n_items)
    if want != have:
        raise ConfigError(
            f"checkpoint expects user cardinalities {list(have[0])} and {have[1]} items; "
            f"dataset has {list(want[0])} and {want[1]} items"
        )


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.6f}"


# ------------------------------------------------------------------ commands


def cmd_gen(args) -> int:
    cfg = load_config(args.config, need_data=True)
    out = Path(args.out)
    try:
        manifest = data.generate_synthetic(cfg.data, out)
        write_echo(out, cfg.resolved())
    except OSError as exc:
        raise InputError(f"cannot write dataset to {out}: {exc.strerror}") from exc
    c = manifest.counts
    print(f"wrote {c['train_records']} train / {c['test_records']} test records to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.variant is not None:
        cfg.train.variant = args.variant
        try:
            cfg.train.validate()
        except trainer.TrainError as exc:
            raise ConfigError(str(exc)) from exc
    ds = _load_dataset(args.data)
    if cfg.data is None and ds.manifest.generator:
        try:
            cfg.data = data.SyntheticConfig.from_dict(ds.manifest.generator)
        except data.DataError:
            pass
    evals = ds.test if cfg.eval.during_training else None
    try:
        res = trainer.train(ds.train, ds.manifest.cardinalities, ds.manifest.n_items, cfg.train, eval_records=evals)
    except trainer.TrainError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        checkpoint.save_checkpoint(out / "model.ckpt", checkpoint.Checkpoint.from_result(res))
        (out / "epochs.csv").write_text(trainer.logs_to_csv(res.logs))
        echo = cfg.resolved()
        echo["train"]["resolved_sync_every"] = res.sync_every
        write_echo(out, echo)
    except OSError as exc:
        raise InputError(f"cannot write to {out}: {exc.strerror}") from exc
    last = res.logs[-1] if res.logs else None
    if last is None:
        print(f"variant={cfg.train.variant} epochs=0 steps=0")
    else:
        print(
            f"variant={cfg.train.variant} epoch={last.epoch} loss={last.loss:.6f} "
            f"loss_p={last.loss_p:.6f} loss_c={last.loss_c:.6f} recall@1={_fmt(last.recall_at_1)} "
            f"item_auc={_fmt(last.item_auc_macro)} aer={_fmt(last.aer)}"
        )
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    ck = _load_checkpoint(args.ckpt)
    ds = _load_dataset(args.data)
    _check_compatible(ck, ds.manifest)
    rep = evaluation.evaluate(ck.params, ck.spec, ds.test, uniform=ck.config.variant == "breaker1-",
                              sample_cap=cfg.eval.sample_cap, seed=cfg.eval.seed)
    path = Path(args.report)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(rep.to_json())
        echo = {"train": ck.config.to_dict(), "eval": asdict(cfg.eval)}
        write_echo(path.parent, echo)
    except OSError as exc:
        raise InputError(f"cannot write report {path}: {exc.strerror}") from exc
    print(
        f"recall@1={_fmt(rep.recall_at_1)} aer={_fmt(rep.aer)} item_auc={_fmt(rep.item_auc_macro)} "
        f"silhouette={_fmt(rep.silhouette)} ari={_fmt(rep.ari)}"
    )
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(args.seed)
    print(gradcheck.format_results(results))
    failed = [r.group for r in results if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_export_reps(args) -> int:
    cfg = load_config(args.config)
    ck = _load_checkpoint(args.ckpt)
    ds = _load_dataset(args.data)
    _check_compatible(ck, ds.manifest)
    users = ds.test.first_per_user()
    if len(users) > cfg.eval.export_cap:
        pick = np.random.default_rng(cfg.eval.seed).choice(len(users), size=cfg.eval.export_cap, replace=False)
        users = users.take(np.sort(pick))
    e_u, _ = model.user_forward(ck.params, ck.spec, users.features)
    q = model.soft_assign(e_u, ck.params["centroids"], ck.spec.alpha)
    k, d = q.shape[1], e_u.shape[1]
    path = Path(args.out)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["user_id", "cluster", *[f"q{j}" for j in range(k)], *[f"e{j}" for j in range(d)],
                        "true_cluster"])
            for i in range(len(users)):
                tc = int(users.true_cluster[i])
                w.writerow([users.user_ids[i], int(np.argmax(q[i])), *map(repr, q[i].tolist()),
                            *map(repr, e_u[i].tolist()), "" if tc < 0 else tc])
        write_echo(path.parent, {"train": ck.config.to_dict(), "eval": asdict(cfg.eval)})
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc.strerror}") from exc
    print(f"wrote {len(users)} user representations to {path}")
    return EXIT_OK


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="breaker", description="Clustered multi-tower single-slot recommender.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic RCT dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=trainer.VARIANTS)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--config")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="run the gradient verification suite")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("export-reps", help="export test-user representations and assignments")
    x.add_argument("--data", required=True)
    x.add_argument("--ckpt", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--config")
    x.set_defaults(func=cmd_export_reps)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, which matches the config code
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InputError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except trainer.NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
