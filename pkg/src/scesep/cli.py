"""``scesep`` command line: mix, train, separate, evaluate, bench."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import corpus, evaluation, nn, separate
from .checkpoint import (CheckpointError, adam_from_checkpoint, load_checkpoint, model_from_checkpoint,
                         model_to_checkpoint, save_checkpoint)
from .config import RunConfig, load_config, save_config
from .sce import TrainState, fit, init_model

log = logging.getLogger("scesep")


class CliError(Exception):
    pass


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.corpus:
        cfg = cfg.replace("corpus", corpus=str(args.corpus))
    if args.metadata:
        cfg = cfg.replace("corpus", metadata=str(args.metadata))
    if args.seed is not None:
        cfg = cfg.replace("train", seed=args.seed)
    if args.steps is not None:
        cfg = cfg.replace("train", steps=args.steps)
    if args.type:
        cfg = cfg.replace("train", mix_type=args.type)
    return cfg


def _registry(cfg: RunConfig):
    c = cfg.corpus
    if not c.corpus or not c.metadata:
        raise CliError("--corpus and --metadata are required (or set them in the [corpus] config section)")
    reg = corpus.build_registry(c.corpus, c.metadata)
    splits = corpus.split_utterances(reg, (c.train_fraction, c.validate_fraction, c.test_fraction), c.split_seed)
    return reg, splits


def _load_model(args, cfg_from_file: RunConfig | None):
    if not args.checkpoint:
        raise CliError("--checkpoint is required")
    if not Path(args.checkpoint).is_file():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    ckpt = load_checkpoint(args.checkpoint)
    dsp_cfg = cfg_from_file.dsp if cfg_from_file is not None else ckpt.config.dsp
    model = model_from_checkpoint(ckpt, F=dsp_cfg.bins)
    return ckpt, model, dsp_cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_mix(args) -> int:
    cfg = _run_config(args)
    reg, splits = _registry(cfg)
    mix_type = args.type or "random"
    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(args.count):
        spec = corpus.draw_mix_spec(reg, splits, args.split, mix_type, cfg.model.T, rng, cfg.dsp)
        spec.mix_id = f"{mix_type}-{i:04d}"
        specs.append(spec)
    out = Path(args.out or ".")
    manifest = Path(args.manifest) if args.manifest else out / f"mixes.{mix_type}.txt"
    corpus.write_manifest(manifest, specs, reg)
    print(f"wrote {len(specs)} mixes to {manifest}")
    if args.wavs:
        from .dsp import write_wav
        for spec in specs:
            m = corpus.make_mix(spec, cfg.dsp)
            write_wav(out / "wavs" / f"{spec.mix_id}.wav", m.mixture)
            for k, s in enumerate(m.sources):
                write_wav(out / "wavs" / f"{spec.mix_id}.ref{k}.wav", s)
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    reg, splits = _registry(cfg)
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        cfg = ckpt.config.replace("train", steps=cfg.train.steps)
        if {sid for sid, _, _ in ckpt.registry} != set(reg.ids()):
            raise CliError("corpus speakers differ from the checkpoint's speaker registry; cannot resume")
        model = model_from_checkpoint(ckpt)
        adam = adam_from_checkpoint(ckpt) or nn.AdamState(lr=cfg.train.lr)
        ts = ckpt.train_state
        state = TrainState(model, adam, ckpt.step, ts.get("best_val", float("inf")), ts.get("bad_rounds", 0))
        log.info("resuming from %s at step %d", args.checkpoint, ckpt.step)
    else:
        cfg = cfg.replace("model", C=reg.C, F=cfg.dsp.bins)
        model = init_model(cfg.model, seed=cfg.train.seed)
        t = cfg.train
        state = TrainState(model, nn.AdamState(lr=t.lr, beta1=t.beta1, beta2=t.beta2, eps=t.eps))
    save_config(out / "config.ini", cfg)
    mc, t = cfg.model, cfg.train

    def make_batch(step):
        return corpus.sample_batch(reg, splits, "train", t.mix_type, mc.B, mc.T,
                                   np.random.default_rng([t.seed, step]), cfg.dsp)

    def make_val_batch(i):
        return corpus.sample_batch(reg, splits, "validate", t.mix_type, mc.B, mc.T,
                                   np.random.default_rng([t.seed, 2**32 + i]), cfg.dsp)

    def on_checkpoint(st: TrainState, tag: str):
        name = {"best": "best.ckpt", "final": "final.ckpt"}.get(tag, f"step-{st.step:08d}.ckpt")
        extra = {"best_val": st.best_val, "bad_rounds": st.bad_rounds}
        save_checkpoint(out / name, model_to_checkpoint(st.model, cfg, st.step, reg, st.adam, extra))

    with open(out / "train.log", "a") as logf:
        def log_line(line):
            logf.write(line + "\n")
            logf.flush()
            if args.verbose:
                print(line)

        try:
            fit(state, make_batch, t, make_val_batch, log_line, on_checkpoint)
        except FloatingPointError as exc:
            print(f"scesep: training aborted at step {state.step}: {exc}; earlier checkpoints kept",
                  file=sys.stderr)
            return 3
    print(f"trained to step {state.step}; checkpoints in {out}")
    return 0


def cmd_separate(args) -> int:
    file_cfg = load_config(args.config) if args.config else None
    ckpt, model, dsp_cfg = _load_model(args, file_cfg)
    if not args.inputs:
        raise CliError("no input wav given")
    seed = args.seed if args.seed is not None else 0
    for wav in args.inputs:
        res = separate.separate_file(model.net, wav, args.k, dsp_cfg, seed)
        for p in separate.write_sources(res, wav, args.out):
            print(p)
    return 0


def cmd_evaluate(args) -> int:
    file_cfg = load_config(args.config) if args.config else None
    ckpt = None
    net = None
    if args.ideal_mask:
        cfg = _run_config(args)
        dsp_cfg = cfg.dsp
        if args.checkpoint:
            ckpt = load_checkpoint(args.checkpoint)
    else:
        ckpt, model, dsp_cfg = _load_model(args, file_cfg)
        net = model.net
        cfg = ckpt.config if file_cfg is None else file_cfg
        cfg = cfg.replace("corpus", **{k: str(v) for k, v in (("corpus", args.corpus), ("metadata", args.metadata))
                                       if v})
    if not args.manifest:
        raise CliError("--manifest is required")
    reg, _ = _registry(cfg)
    specs = corpus.read_manifest(args.manifest, reg)
    seed = args.seed if args.seed is not None else 0
    report = evaluation.evaluate_set(net, specs, args.k, dsp_cfg, ideal_mask=args.ideal_mask, seed=seed)
    print(report.table())
    if ckpt is not None and ckpt.registry:
        known = ckpt.speaker_ids()
        in_set = sum(all(reg.by_index(i).speaker_id in known for i in s.speakers) for s in specs)
        print(f"in-set mixes: {in_set}/{len(specs)}")
    out = Path(args.out or ".")
    name = "report.ideal.csv" if args.ideal_mask else "report.csv"
    report.write_csv(out / name)
    print(f"wrote {out / name}")
    return 0


def cmd_bench(args) -> int:
    reps = args.count or 20
    rep = evaluation.bench_loss(reps=reps)
    print(rep.table())
    for kernel in ("sce", "affinity"):
        r = rep.ratios(kernel)
        if r:
            print(f"{kernel} time ratio per T*F doubling: " + ", ".join(f"{x:.2f}" for x in r))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "bench.txt").write_text(rep.table() + "\n")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="sectioned key=value config file")
    common.add_argument("--seed", type=int, help="unsigned 64-bit seed")
    common.add_argument("--corpus", type=Path, help="corpus root (one directory per speaker)")
    common.add_argument("--metadata", type=Path, help="speaker metadata file (id|gender|...)")
    common.add_argument("--checkpoint", type=Path)
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--k", type=int, default=None, help="number of sources to separate")
    common.add_argument("--type", choices=corpus.MIX_TYPES)
    common.add_argument("--count", type=int)
    common.add_argument("--steps", type=int)
    common.add_argument("--ideal-mask", action="store_true", help="score ground-truth binary masks instead")
    common.add_argument("--manifest", type=Path)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="scesep", description="Speaker separation with contrastive embeddings.")
    sub = p.add_subparsers(dest="command", required=True)
    m = sub.add_parser("mix", parents=[common], help="write a seeded mixture manifest")
    m.add_argument("--split", choices=corpus.SPLITS, default="test")
    m.add_argument("--wavs", action="store_true", help="also write mixture and reference wavs")
    m.set_defaults(func=cmd_mix, count=10)
    sub.add_parser("train", parents=[common], help="train a model").set_defaults(func=cmd_train)
    s = sub.add_parser("separate", parents=[common], help="separate wav files")
    s.add_argument("inputs", nargs="*", type=Path)
    s.set_defaults(func=cmd_separate, k=2)
    sub.add_parser("evaluate", parents=[common], help="score a manifest").set_defaults(func=cmd_evaluate)
    sub.add_parser("bench", parents=[common], help="time the loss kernels").set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("scesep: error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CliError, CheckpointError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"scesep: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
