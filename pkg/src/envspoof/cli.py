"""Command-line entry point: one subcommand per pipeline stage.

Every stage reads and writes plain files, so any stage can be swapped for an
external tool (e.g. real encoder states fed in through ``encode --kind file``).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import datakit, evaluation, features, model, training
from .audio import load_clip
from .encoder import AudioStacks, EncoderSpec, IndexedStacks, encode, read_index, write_index
from .errors import FormatError, NumericError, ParameterError, StateError

log = logging.getLogger("envspoof")


@dataclass
class RunConfig(training.TrainConfig):
    """TrainConfig plus data locations and stub-encoder settings."""

    manifest: str = ""
    source: str = "embeddings"   # embeddings | audio
    embeddings: str = ""         # layerstack index (source=embeddings)
    stats: str = ""              # stats file (source=audio)
    encoder_dim: int = 32
    encoder_seed: int = 0
    encoder_downsample: int = 2
    out_dir: str = "run"

    def __post_init__(self):
        super().__post_init__()
        if self.source not in ("embeddings", "audio"):
            raise ParameterError("source must be embeddings or audio")


def _encoder_spec(cfg) -> EncoderSpec:
    return EncoderSpec("stub", 12, cfg.encoder_dim, cfg.encoder_downsample, cfg.encoder_seed)


def _source(cfg, manifest_path, entries):
    if cfg.source == "embeddings":
        if not cfg.embeddings:
            raise ParameterError("source=embeddings needs an embeddings index")
        return IndexedStacks(cfg.embeddings)
    if not cfg.stats:
        raise ParameterError("source=audio needs a stats file")
    paths = {e.trial_id: datakit.resolve(manifest_path, e.path) for e in entries}
    return AudioStacks(paths, features.read_stats(cfg.stats), _encoder_spec(cfg))


# subcommands ----------------------------------------------------------------

def cmd_synth_data(args):
    fractions = tuple(float(f) for f in args.fractions.split(","))
    entries = datakit.gen_synthetic_corpus(args.seed, args.n_bona, args.n_spoof, args.out,
                                           shift=args.shift, fractions=fractions)
    print(f"wrote {len(entries)} clips to {Path(args.out) / 'manifest.tsv'}")


def cmd_extract(args):
    entries = datakit.load_manifest(args.manifest, check_files=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def work(e):
        mel = features.logmel(load_clip(datakit.resolve(args.manifest, e.path)))
        name = f"{e.trial_id}.npy"
        np.save(out / name, mel.frames)
        return e.trial_id, name

    with ThreadPoolExecutor(max_workers=args.threads) as pool:
        rows = list(pool.map(work, entries))
    write_index(rows, out / "index.tsv")
    print(f"extracted {len(rows)} feature files to {out}")


def cmd_stats(args):
    entries = datakit.select(datakit.load_manifest(args.manifest), args.split)
    index = read_index(args.features)
    missing = [e.trial_id for e in entries if e.trial_id not in index]
    if missing:
        raise OSError(f"no features for trial(s): {', '.join(missing[:5])}")
    specs = (features.MelSpec(np.load(index[e.trial_id])) for e in entries)
    stats = features.compute_global_stats(specs, source=f"{Path(args.manifest).name}:{args.split}")
    features.write_stats(stats, args.out)
    print(f"mean={stats.mean:.9g} std={stats.std:.9g} count={stats.count}")


def cmd_encode(args):
    entries = datakit.load_manifest(args.manifest)
    ids = [e.trial_id for e in entries]
    spec = EncoderSpec(args.kind, args.num_layers, args.dim, args.downsample, args.seed)
    if args.kind == "stub":
        if not args.features or not args.stats:
            raise ParameterError("--kind stub needs --features and --stats")
        index = encode(ids, spec, args.out, features=read_index(args.features),
                       stats=features.read_stats(args.stats), threads=args.threads)
    else:
        if not args.source_dir:
            raise ParameterError("--kind file needs --source-dir")
        index = encode(ids, spec, args.out, source_dir=args.source_dir)
    print(f"wrote {index}")


def _load_run_config(args) -> RunConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out_dir={args.out}")
    cfg = training.load_config(args.config, RunConfig, overrides)
    if not cfg.manifest:
        raise ParameterError("config needs a manifest")
    return cfg


def _run_training(cfg: RunConfig, base=None):
    entries = datakit.load_manifest(cfg.manifest)
    source = _source(cfg, cfg.manifest, entries)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = training.format_config(cfg)
    (out / "config.resolved").write_text(resolved)
    log.info("resolved config:\n%s", resolved.rstrip())
    tr, dev = datakit.select(entries, "train"), datakit.select(entries, "dev")
    if base is None:
        result = training.train(tr, dev, source, cfg, out_dir=out)
    else:
        result = training.finetune(base, tr, dev, source, cfg, out_dir=out)
    print(f"best step {result.best_step} dev_eer={result.best_eer:.6f} -> {out / 'best.ckpt'}")


def cmd_train(args):
    _run_training(_load_run_config(args))


def cmd_finetune(args):
    cfg = _load_run_config(args)
    path = args.checkpoint or cfg.finetune_from
    if not path:
        raise ParameterError("finetune needs --checkpoint or finetune_from")
    _run_training(cfg, base=model.load_checkpoint(path).params)


def cmd_score(args):
    entries = datakit.load_manifest(args.manifest)
    if args.split != "all":
        entries = datakit.select(entries, args.split)
    ckpt = model.load_checkpoint(args.checkpoint)
    cfg = RunConfig(source="audio" if args.stats else "embeddings", embeddings=args.embeddings or "",
                    stats=args.stats or "", encoder_dim=args.encoder_dim,
                    encoder_seed=args.encoder_seed, encoder_downsample=args.encoder_downsample)
    rows = evaluation.score_manifest(entries, ckpt.params, _source(cfg, args.manifest, entries))
    evaluation.write_scores(rows, args.out)
    print(f"scored {len(rows)} trials -> {args.out}")


def cmd_eval_eer(args):
    rows = evaluation.read_scores(args.scores)
    result = evaluation.eer_from_files(rows, datakit.load_manifest(args.labels))
    text = result.report()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


def cmd_fusion_weights(args):
    ckpt = model.load_checkpoint(args.checkpoint)
    if ckpt.trajectory is None:
        raise FormatError(f"{args.checkpoint}: no fusion trajectory stored")
    text = model.format_trajectory(ckpt.trajectory, ckpt.params.config.layers)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


# parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="envspoof", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help):
        p = sub.add_parser(name, help=help, description=help)
        p.set_defaults(func=func)
        return p

    p = add("synth-data", cmd_synth_data, "generate the seeded synthetic corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=1, help="corpus seed")
    p.add_argument("--n-bona", type=int, default=200, help="bona fide clips")
    p.add_argument("--n-spoof", type=int, default=800, help="spoof clips")
    p.add_argument("--shift", choices=("none", "domain2"), default="none", help="domain variant")
    p.add_argument("--fractions", default="0.8,0.1,0.1", help="train,dev,eval fractions")

    p = add("extract", cmd_extract, "log-Mel features for every manifest entry")
    p.add_argument("--manifest", required=True, help="manifest TSV")
    p.add_argument("--out", required=True, help="feature directory")
    p.add_argument("--threads", type=int, default=1, help="worker threads")

    p = add("stats", cmd_stats, "global normalization statistics")
    p.add_argument("--manifest", required=True, help="manifest TSV")
    p.add_argument("--features", required=True, help="feature index from extract")
    p.add_argument("--split", default="train", choices=datakit.SPLITS, help="split to use")
    p.add_argument("--out", required=True, help="stats file")

    p = add("encode", cmd_encode, "layerstack files for every manifest entry")
    p.add_argument("--manifest", required=True, help="manifest TSV")
    p.add_argument("--out", required=True, help="embedding directory")
    p.add_argument("--kind", choices=("stub", "file"), default="stub", help="encoder kind")
    p.add_argument("--features", help="feature index (stub)")
    p.add_argument("--stats", help="stats file (stub)")
    p.add_argument("--source-dir", help="directory of <trial_id>.lstk files (file)")
    p.add_argument("--dim", type=int, default=32, help="stub hidden width")
    p.add_argument("--num-layers", type=int, default=12, help="encoder layers")
    p.add_argument("--downsample", type=int, default=2, help="frames per hidden step")
    p.add_argument("--seed", type=int, default=0, help="stub encoder seed")
    p.add_argument("--threads", type=int, default=1, help="worker threads")

    for name, func, help in (("train", cmd_train, "train the back-end"),
                             ("finetune", cmd_finetune, "fine-tune from a checkpoint")):
        p = add(name, func, help)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int, help="run seed")
        p.add_argument("--out", help="output directory")
        if name == "finetune":
            p.add_argument("--checkpoint", help="base checkpoint")

    p = add("score", cmd_score, "score trials with a checkpoint")
    p.add_argument("--manifest", required=True, help="manifest TSV")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--embeddings", help="layerstack index")
    p.add_argument("--stats", help="stats file (score from audio with the stub encoder)")
    p.add_argument("--encoder-dim", type=int, default=32, help="stub hidden width")
    p.add_argument("--encoder-seed", type=int, default=0, help="stub encoder seed")
    p.add_argument("--encoder-downsample", type=int, default=2, help="frames per hidden step")
    p.add_argument("--split", default="all", choices=("all",) + datakit.SPLITS, help="split to score")
    p.add_argument("--out", required=True, help="score file")

    p = add("eval-eer", cmd_eval_eer, "equal error rate of a score file")
    p.add_argument("--scores", required=True, help="score file")
    p.add_argument("--labels", required=True, help="manifest with labels")
    p.add_argument("--out", help="also write the report here")

    p = add("fusion-weights", cmd_fusion_weights, "fusion-weight trajectory as CSV")
    p.add_argument("--checkpoint", required=True, help="checkpoint with a trajectory")
    p.add_argument("--out", help="CSV path (default stdout)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (OSError, FormatError, ParameterError, NumericError, StateError, ValueError) as exc:
        print(f"envspoof {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
