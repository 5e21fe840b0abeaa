"""Command-line entry point: ``jointkws <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from contextlib import nullcontext
from dataclasses import asdict
from pathlib import Path

from . import corpus as corpus_mod
from .dsp import DOMAINS, features, write_feature_dump
from .engine import SpecError, count_multiplies, count_params
from .enhancement import VARIANTS, EnhancerSpec, build_enhancer
from .kws import LABELS, build_kws

MODELS = ("cnn-trad-pool2",) + tuple(VARIANTS)
GRAD_TOL = 1e-4
JOINT_GRAD_TOL = 1e-3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _model_spec(name: str):
    if name == "cnn-trad-pool2":
        return build_kws()
    return build_enhancer(EnhancerSpec.from_name(name))


def cmd_count(args) -> int:
    names = MODELS if args.model == "all" else (args.model,)
    for name in names:
        spec = _model_spec(name)
        p, m = count_params(spec), count_multiplies(spec, args.frames)
        print(f"{name}\tparams={p} ({p / 1e3:.1f}K)\tmultiplies={m} ({m / 1e6:.2f}M)\tframes={args.frames}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_joint_check, run_layer_suite, run_loss_checks

    results = run_layer_suite(args.seed) if args.all or not args.joint else []
    if args.all:
        results += run_loss_checks(args.seed)
    failed = False
    for name, err in results:
        ok = err < GRAD_TOL
        failed |= not ok
        print(f"{name}\tmax_rel_err={err:.3e}\t{'ok' if ok else 'FAIL'}")
    if args.all or args.joint:
        err = run_joint_check(args.seed)
        ok = err < JOINT_GRAD_TOL
        failed |= not ok
        print(f"joint-mel-crn-16+kws\tmax_rel_err={err:.3e}\t{'ok' if ok else 'FAIL'}")
    return 1 if failed else 0


def cmd_synth(args) -> int:
    snrs = [float(s) for s in args.snrs.split(",")]
    plan = {"out": args.out, "seed": args.seed, "per_class": args.per_class, "snrs": snrs, "multiplicity": args.multiplicity}
    if args.dry_run:
        _emit({"plan": "synth", **plan})
        return 0
    synth = corpus_mod.synth_corpus(args.seed, args.per_class)
    split = corpus_mod.make_split([u.source_id for u in synth.utterances], [u.label for u in synth.utterances], args.seed)
    rows = corpus_mod.plan_mixes(synth.utterances, synth.noises, split, snrs, args.seed, args.multiplicity)
    corpus_mod.write_corpus(args.out, synth, rows)
    _emit({"written": args.out, "utterances": len(synth.utterances), "noises": len(synth.noises), "mixes": len(rows)})
    return 0


def cmd_featurize(args) -> int:
    if args.dry_run:
        _emit({"plan": "featurize", "wav": args.wav, "domain": args.domain, "out": args.out})
        return 0
    spec = features(corpus_mod.load_wav(args.wav), args.domain)
    write_feature_dump(args.out, spec)
    _emit({"written": args.out, "domain": spec.domain, "frames": spec.frames, "bins": spec.bins})
    return 0


def cmd_mix(args) -> int:
    if args.dry_run:
        _emit({"plan": "mix", "speech": args.speech, "noise": args.noise, "snr": args.snr, "offset": args.offset})
        return 0
    m = corpus_mod.mix(corpus_mod.load_wav(args.speech), corpus_mod.load_wav(args.noise), args.snr, args.offset)
    corpus_mod.save_wav(args.out, m.noisy)
    measured = corpus_mod.snr_db(m.speech_part, m.noise_part)
    _emit({"written": args.out, "gain": m.gain, "scale": m.scale, "measured_snr_db": measured})
    return 0


def _load_config(args):
    from .trainer import TrainConfig

    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    d = asdict(cfg)
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            d[key] = json.loads(raw)
        except json.JSONDecodeError:
            d[key] = raw
    return TrainConfig.from_dict(d)


def _stages(cfg, pretrain_only: bool) -> list[str]:
    if pretrain_only:
        return ["pretrain-enh"]
    if cfg.strategy == "baseline":
        return ["train-kws"]
    stages = ["pretrain-enh"]
    if cfg.strategy == "kws-frozen-enh":
        stages.append("train-kws")
    elif cfg.strategy == "retrain":
        stages.append("retrain-kws")
    else:
        if cfg.kws_init == "pretrained":
            stages.append("train-kws")
        stages.append("joint")
    return stages


def _run_training(args, pretrain_only: bool) -> int:
    from .evaluation import make_report
    from .trainer import ConfigError, jsonl_logger, prepare_data, pretrain_enhancer, run_strategy

    cfg = _load_config(args)
    if pretrain_only and cfg.enhancer is None:
        raise ConfigError("pretrain-enh needs an 'enhancer' in the config")
    out = Path(args.out)
    artifacts = ["config.json", "labels.txt", "manifest.tsv", "train_log.jsonl"]
    artifacts += ["enhancer.ckpt"] if pretrain_only else ["model.ckpt", "report.json", "roc.csv"]
    if args.dry_run:
        _emit({"plan": "pretrain-enh" if pretrain_only else "train", "config": asdict(cfg),
               "stages": _stages(cfg, pretrain_only), "out": str(out), "artifacts": artifacts})
        return 0
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    (out / "labels.txt").write_text("\n".join(LABELS) + "\n")
    from .trainer import corpus_rows

    corpus_mod.write_manifest(out / "manifest.tsv", corpus_rows(cfg))
    log_path = out / "train_log.jsonl"
    log_path.write_text("")
    log = jsonl_logger(log_path)
    data = prepare_data(cfg)
    if pretrain_only:
        ck = pretrain_enhancer(cfg, data, log)
        ck.save(out / "enhancer.ckpt")
        _emit({"written": str(out), "best_epoch": ck.best_epoch})
        return 0
    cks = run_strategy(cfg, data, log)
    for name, ck in cks.items():
        if name != "kws":
            ck.save(out / f"{name}.ckpt")
    final = cks["kws"]
    final.save(out / "model.ckpt")
    report = make_report(final, data["test"])
    report.write(out / "report.json", out / "roc.csv")
    _emit({"written": str(out), "accuracy": report.accuracy, "auc": report.auc, "eer": report.eer,
           "best_epoch": final.best_epoch})
    return 0


def cmd_pretrain(args) -> int:
    return _run_training(args, pretrain_only=True)


def cmd_train(args) -> int:
    return _run_training(args, pretrain_only=False)


def cmd_eval(args) -> int:
    from .evaluation import make_report
    from .trainer import Checkpoint, prepare_data

    if args.dry_run:
        _emit({"plan": "eval", "checkpoint": args.checkpoint, "split": args.split, "out": args.out})
        return 0
    ck = Checkpoint.load(args.checkpoint)
    cfg = ck.config
    if args.corpus:
        cfg.corpus_dir = args.corpus
    data = prepare_data(cfg)
    report = make_report(ck, data[args.split])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "report.json", out / "roc.csv")
    _emit({"written": str(out), "accuracy": report.accuracy, "auc": report.auc, "eer": report.eer})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jointkws", description="Noise-robust keyword spotting with a jointly trained enhancement front-end.")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread limit; 1 guarantees bit-identical results")
    p.add_argument("--dry-run", action="store_true", help="validate inputs and print the plan without computing")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a deterministic synthetic corpus")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--per-class", type=int, default=200)
    s.add_argument("--snrs", default="-3,0,3,6")
    s.add_argument("--multiplicity", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("featurize", help="dump power/mel/mfcc features of a WAV file")
    s.add_argument("--wav", required=True)
    s.add_argument("--domain", choices=DOMAINS, default="mfcc")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_featurize)

    s = sub.add_parser("mix", help="add noise to speech at a target SNR")
    s.add_argument("--speech", required=True)
    s.add_argument("--noise", required=True)
    s.add_argument("--snr", type=float, required=True)
    s.add_argument("--offset", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mix)

    for name, func, help_text in (
        ("pretrain-enh", cmd_pretrain, "pretrain an enhancer on ideal ratio masks"),
        ("train", cmd_train, "run a training strategy and evaluate on the test split"),
    ):
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", help="JSON experiment config")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (JSON value)")
        s.add_argument("--out", required=True)
        s.set_defaults(func=func)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--corpus", help="corpus directory (default: the checkpoint's own corpus)")
    s.add_argument("--split", choices=("train", "validation", "test"), default="test")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("count", help="parameter and multiply counts")
    s.add_argument("--model", choices=MODELS + ("all",), default="all")
    s.add_argument("--frames", type=int, default=98)
    s.set_defaults(func=cmd_count)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--all", action="store_true", help="every layer kind, losses and the joint stack")
    s.add_argument("--joint", action="store_true", help="only the joint enhancer+classifier stack")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def run(argv=None) -> int:
    from .trainer import ConfigError

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    if args.threads is not None and args.threads < 1:
        return _fail("usage", "--threads must be at least 1", 2)
    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        limit = threadpool_limits(limits=args.threads)
    else:
        limit = nullcontext()
    try:
        with limit:
            return args.func(args)
    except (UsageError, ConfigError, SpecError, corpus_mod.CorpusError) as exc:
        return _fail("config", str(exc), 2)
    except FileNotFoundError as exc:
        return _fail("config", f"{exc.filename}: file not found", 2)
    except Exception as exc:  # noqa: BLE001 - reported as a one-line runtime failure
        return _fail("runtime", f"{type(exc).__name__}: {exc}", 1)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
