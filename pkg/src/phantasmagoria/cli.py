"""Command line for the full illusion-synthesis pipeline.

One executable, one subcommand per pipeline stage:

    train-vts          fit the restoration task solver
    pretrain           adversarial warm-up of generator + discriminator
    finetune           push the generator toward illusion-scoring outputs
    export-candidates  select + write candidate PNGs and their manifest
    serve-experiment   run the forced-choice collection service
    analyze            summarize an experiment event log
    demo-canonical     build the two-square reference stimulus and score it

Each artifact-producing run writes a ``manifest.json`` into its output
directory recording the exact configuration, seeds, and sha256 of every
input checkpoint and produced file — reruns with the same manifest
inputs produce byte-identical outputs.

Exit codes: 0 on success, 2 for configuration problems (bad flags,
missing files, inconsistent settings), 3 for numerical failures during
training (non-finite losses).

The output root is the --out flag when given, else $PHANTASMAGORIA_OUT,
else ./phantasmagoria-out.
"""

import argparse
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import dataset, illusion, networks, odog, psychophysics, stimulus
from . import training
from .illusion import PqConfig
from .stimulus import TargetSpec
from .training import TrainingConfig

# Named fine-tuning recipes: illusion type -> everything the run needs
# beyond the caller's overrides.  lvi pushes target lightness apart,
# covi pushes a chromatic difference, crvi pushes apparent contrast of
# patterned targets.  The crvi recipe defaults to the natural corpus
# because flat-ish texture corpora carry too little high-frequency
# energy to train contrast induction.
PRESETS = {
    "lvi": {
        "pq_kind": "lightness", "shape": "square", "vts": "restorenet",
        "dataset": "textures", "sign": "right_minus_left", "channels": 1,
        "target_value": 0.5,
        "config": {"alpha": 1.0, "beta": 0.1, "lr_generator": 2e-5,
                   "tau": 0.15, "batch_size": 8, "record_every": 20},
    },
    "covi": {
        "pq_kind": "color", "shape": "square", "vts": "restorenet",
        "dataset": "textures", "sign": "right_minus_left", "channels": 3,
        "target_value": (0.5, 0.5, 0.5),
        "config": {"alpha": 1.0, "beta": 0.1, "lr_generator": 2e-5,
                   "tau": 0.05, "batch_size": 8, "record_every": 20},
    },
    "crvi": {
        "pq_kind": "michelson", "shape": "grating", "vts": "restorenet",
        "dataset": "natural", "sign": "right_minus_left", "channels": 1,
        "target_value": 0.5,
        "config": {"alpha": 1.0, "beta": 0.1, "lr_generator": 2e-5,
                   "tau": 0.05, "batch_size": 8, "record_every": 20},
    },
}

# Chromatic push directions for covi as (R, G, B) channel weights; the
# quantifier weights the per-channel target difference with these, so
# "yellower" is expressed as a drop in blue.
COLOR_DIRECTIONS = {
    "redder": (1.0, 0.0, 0.0),
    "bluer": (0.0, 0.0, 1.0),
    "yellower": (0.0, 0.0, -1.0),
}


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _out_root(args, default_leaf):
    if args.out:
        return args.out
    root = os.environ.get("PHANTASMAGORIA_OUT", "phantasmagoria-out")
    return os.path.join(root, default_leaf)


def _write_manifest(out_dir, command, config, inputs, outputs):
    """Record what a run consumed and produced.  No timestamps: identical
    runs write identical manifests."""
    manifest = {
        "command": command,
        "config": config,
        "inputs": {name: _sha256(p) for name, p in sorted(inputs.items())},
        "outputs": {
            os.path.basename(p): _sha256(p)
            for p in sorted(outputs)
        },
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _load_corpus(name, path, size, channels, seed):
    """A corpus either comes from disk or is synthesized procedurally."""
    if path:
        return dataset.load_store(path, source=name, channels=channels,
                                  seed=seed)
    if name == "textures":
        images = dataset.synthesize_texture_corpus(n=size, seed=seed)
    else:
        images = dataset.synthesize_natural_corpus(n=size, seed=seed)
    return dataset.store_from_images(images, source=name, channels=channels,
                                     seed=seed)


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------

def cmd_train_vts(args):
    out_dir = _out_root(args, "vts")
    os.makedirs(out_dir, exist_ok=True)
    if args.dataset_path:
        store = dataset.load_store(args.dataset_path, source=args.dataset,
                                   channels=3, seed=args.seed)
        images = np.stack([img for img in store.images])
    elif args.dataset == "textures":
        images = dataset.synthesize_texture_corpus(n=args.corpus_size,
                                                   seed=args.seed)
    else:
        images = dataset.synthesize_natural_corpus(n=args.corpus_size,
                                                   seed=args.seed)
    rng = np.random.default_rng(args.seed)
    params = illusion.train_vts_restoration(images, epochs=args.epochs,
                                            rng=rng)
    ckpt = os.path.join(out_dir, "restorer.npz")
    networks.save_checkpoint(ckpt, params)
    loss = params.meta["train_loss"][-1]
    _write_manifest(out_dir, "train-vts",
                    {"dataset": args.dataset, "epochs": args.epochs,
                     "corpus_size": args.corpus_size, "seed": args.seed,
                     "final_loss": loss},
                    inputs={}, outputs=[ckpt])
    print(f"restorer trained for {args.epochs} epochs, "
          f"final loss {loss:.5f} -> {ckpt}")
    return 0


def cmd_pretrain(args):
    out_dir = _out_root(args, "pretrain")
    os.makedirs(out_dir, exist_ok=True)
    store = _load_corpus(args.dataset, args.dataset_path, args.corpus_size,
                         args.channels, args.seed)
    rng = np.random.default_rng(args.seed)
    gen = networks.init_generator(args.channels, rng=rng, dtype=np.float64)
    disc = networks.init_discriminator(args.channels, rng=rng,
                                       dtype=np.float64)
    config = TrainingConfig(batch_size=args.batch_size, seed=args.seed,
                            pretrain_epochs=args.epochs,
                            max_iterations=args.iterations)
    log = []
    gen, disc = training.pretrain_gan(gen, disc, store, config, log=log)
    gen_path = os.path.join(out_dir, "generator.npz")
    disc_path = os.path.join(out_dir, "discriminator.npz")
    networks.save_checkpoint(gen_path, gen)
    networks.save_checkpoint(disc_path, disc)
    log_path = os.path.join(out_dir, "pretrain_log.json")
    with open(log_path, "w") as fh:
        json.dump(log, fh)
        fh.write("\n")
    _write_manifest(out_dir, "pretrain",
                    {"dataset": args.dataset, "channels": args.channels,
                     "epochs": args.epochs, "iterations": args.iterations,
                     "batch_size": args.batch_size, "seed": args.seed,
                     "corpus_size": args.corpus_size},
                    inputs={}, outputs=[gen_path, disc_path, log_path])
    last = log[-1] if log else {}
    print(f"pretrained {len(log)} iterations; "
          f"d_loss {last.get('d_loss', float('nan')):.3f} "
          f"g_loss {last.get('g_loss', float('nan')):.3f} "
          f"diversity {last.get('diversity', float('nan')):.4f} -> {out_dir}")
    return 0


def _target_spec_from(args, preset):
    shape = args.shape or preset["shape"]
    value = preset["target_value"]
    if args.target_value is not None:
        value = args.target_value
    kwargs = {"shape": shape, "size": args.target_size, "value": value}
    if shape == "grating":
        kwargs["orientation"] = args.orientation
        kwargs["frequency"] = args.frequency
        kwargs["contrast"] = args.target_contrast
    return TargetSpec(**kwargs)


def cmd_finetune(args):
    preset = PRESETS[args.type]
    out_dir = _out_root(args, f"finetune-{args.type}")
    os.makedirs(out_dir, exist_ok=True)

    # Layering: preset defaults, then config file, then explicit flags.
    conf = dict(preset["config"])
    if args.config:
        conf.update(training.read_config_overrides(args.config))
    for key in ("alpha", "beta", "tau", "batch_size", "record_every",
                "seed", "allow_unpretrained"):
        val = getattr(args, key)
        if val is not None:
            conf[key] = val
    if args.lr_generator is not None:
        conf["lr_generator"] = args.lr_generator
    if args.lr_discriminator is not None:
        conf["lr_discriminator"] = args.lr_discriminator
    if args.iterations is not None:
        conf["max_iterations"] = args.iterations
    config = TrainingConfig(**conf)

    dataset_name = args.dataset or preset["dataset"]
    if args.type == "crvi" and dataset_name == "textures":
        print("warning: the texture corpus carries little high-frequency "
              "content; contrast induction trains poorly on it — consider "
              "--dataset natural", file=sys.stderr)

    vts = args.vts or preset["vts"]
    channels = preset["channels"]
    if vts == "odog" and channels != 1:
        raise ValueError("the brightness model is luminance-only; "
                         "it cannot solve the color task")

    sign = args.sign or preset["sign"]
    weights = COLOR_DIRECTIONS[args.direction]
    pq_config = PqConfig(kind=preset["pq_kind"], sign=sign,
                         channel_weights=weights)
    target_spec = _target_spec_from(args, preset)

    if not args.generator or not args.discriminator:
        raise ValueError("finetune needs --generator and --discriminator "
                         "checkpoints from a pretrain run")
    gen = networks.load_checkpoint(args.generator)
    disc = networks.load_checkpoint(args.discriminator)
    restorer = None
    inputs = {"generator": args.generator,
              "discriminator": args.discriminator}
    if vts == "restorenet":
        if not args.restorer:
            raise ValueError("--vts restorenet needs a --restorer checkpoint")
        restorer = networks.load_checkpoint(args.restorer)
        inputs["restorer"] = args.restorer

    store = _load_corpus(dataset_name, args.dataset_path, args.corpus_size,
                         channels, config.seed)

    log = []
    gen, records = training.finetune(gen, disc, vts, pq_config, target_spec,
                                     store, config, restorer=restorer,
                                     log=log)

    gen_path = os.path.join(out_dir, "generator_final.npz")
    networks.save_checkpoint(gen_path, gen)
    records_path = os.path.join(out_dir, "records.npz")
    training.save_records(records_path, records, pq_config)
    log_path = os.path.join(out_dir, "finetune_log.json")
    with open(log_path, "w") as fh:
        json.dump(log, fh)
        fh.write("\n")
    config_path = os.path.join(out_dir, "config.ini")
    training.write_config_file(config_path, config)

    run_config = {
        "type": args.type, "vts": vts, "dataset": dataset_name,
        "sign": sign, "direction": args.direction,
        "target_spec": dataclasses.asdict(target_spec),
        "training": dataclasses.asdict(config),
        "corpus_size": args.corpus_size,
    }
    _write_manifest(out_dir, "finetune", run_config, inputs=inputs,
                    outputs=[gen_path, records_path, log_path, config_path])

    pqs = [r["pq_median"] for r in log]
    k = max(1, len(pqs) // 10)
    print(f"fine-tuned {len(pqs)} iterations; median PQ "
          f"first10% {float(np.median(pqs[:k])):.4f} "
          f"last10% {float(np.median(pqs[-k:])):.4f}; "
          f"{len(records)} candidate records -> {out_dir}")
    return 0


def cmd_export_candidates(args):
    out_dir = _out_root(args, "candidates")
    records, pq_config = training.load_records(args.records)
    selection = training.select_candidates(records, args.count,
                                           args.pq_threshold, seed=args.seed)
    manifest_path = training.export_candidates(selection, out_dir, pq_config,
                                               seed=args.seed)
    print(f"exported {len(selection)} of {len(records)} records "
          f"(pq >= {args.pq_threshold}) -> {manifest_path}")
    return 0


def cmd_serve_experiment(args):
    from . import service

    pool = []
    for spec in args.candidates:
        tag, _, path = spec.partition("=")
        if not path:
            raise ValueError(f"--candidates expects tag=dir, got {spec!r}")
        pool.extend(psychophysics.load_candidate_pool(path, tag))
    log_path = args.event_log or os.path.join(
        _out_root(args, "experiment"), "events.jsonl")
    store = service.ExperimentStore(pool, log_path,
                                    results_token=args.token,
                                    session_seed_base=args.seed_base)
    frontend = args.frontend
    if frontend and not os.path.isdir(frontend):
        raise ValueError(f"frontend directory not found: {frontend}")
    print(f"serving {len(pool)} stimuli on http://{args.host}:{args.port} "
          f"(event log: {log_path})")
    print(f"operator token: {store.results_token}")
    service.serve(store, host=args.host, port=args.port,
                  frontend_dir=frontend)
    return 0


def cmd_analyze(args):
    sessions = psychophysics.replay_events(args.event_log)
    complete = [s for s in sessions.values() if s.complete]
    if not complete:
        raise ValueError(f"{args.event_log} holds no complete sessions "
                         f"({len(sessions)} total)")
    table = psychophysics.summarize(complete)
    estimates = psychophysics.thurstone_table(table)

    print(f"{len(complete)} complete sessions "
          f"({len(sessions) - len(complete)} in progress)")
    header = f"{'group':<14}{'n':>6}{'opposite':>10}{'none':>8}{'correct':>9}"
    print(header)
    order = ["all"] + sorted(k for k in table.groups if k != "all")
    for tag in order:
        g = table.groups[tag]
        print(f"{tag:<14}{g.n_trials:>6}{g.opposite:>10.4f}"
              f"{g.none:>8.4f}{g.correct:>9.4f}")
    print()
    for tag in order:
        est = estimates[tag]
        print(f"thurstone {tag:<12} z = {est.z:+.4f} "
              f"[{est.z_low:+.4f}, {est.z_high:+.4f}] (95% on n={est.n})")
    if args.json:
        payload = {
            "groups": table.as_dict(),
            "thurstone": {tag: est.as_dict()
                          for tag, est in estimates.items()},
        }
        with open(args.json, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"wrote {args.json}")
    return 0


def cmd_demo_canonical(args):
    out_dir = _out_root(args, "demo-canonical")
    os.makedirs(out_dir, exist_ok=True)
    stim = stimulus.canonical_contrast_stimulus(args.gray)
    png_path = os.path.join(out_dir, "canonical.png")
    stimulus.save_image_png(png_path, stim.image)

    model = odog.default_model()
    pq_rml = illusion.score_stimulus(
        stim, PqConfig(kind="lightness", sign="right_minus_left"),
        vts="odog", model=model)
    pq_lmr = illusion.score_stimulus(
        stim, PqConfig(kind="lightness", sign="left_minus_right"),
        vts="odog", model=model)

    report = {
        "gray": args.gray,
        "pq_right_minus_left": pq_rml,
        "pq_left_minus_right": pq_lmr,
        "prediction": ("right target (on the dark half) reads lighter"
                       if pq_rml > 0 else
                       "left target (on the bright half) reads lighter"),
    }
    report_path = os.path.join(out_dir, "report.json")
    with open(report_path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out_dir, "demo-canonical", {"gray": args.gray},
                    inputs={}, outputs=[png_path, report_path])
    print(f"canonical two-square stimulus: PQ(right-left) = {pq_rml:+.5f}")
    print(report["prediction"])
    print(f"wrote {png_path} and {report_path}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="phantasmagoria",
        description="Synthesize visual illusions with a GAN scored by "
                    "visual-task solvers, then run the observer experiment.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--out", default=None,
                       help="output directory (default: under "
                            "$PHANTASMAGORIA_OUT or ./phantasmagoria-out)")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train-vts", help="fit the restoration task solver")
    add_common(p)
    p.set_defaults(func=cmd_train_vts, seed=0)
    p.add_argument("--dataset", choices=dataset.SOURCES, default="natural")
    p.add_argument("--dataset-path", default=None,
                   help="directory of images (or .bin batches) to train on; "
                        "omitted -> procedural corpus")
    p.add_argument("--corpus-size", type=int, default=120)
    p.add_argument("--epochs", type=int, default=120)

    p = sub.add_parser("pretrain", help="adversarial warm-up on a corpus")
    add_common(p)
    p.set_defaults(func=cmd_pretrain, seed=0)
    p.add_argument("--dataset", choices=dataset.SOURCES, default="textures")
    p.add_argument("--dataset-path", default=None)
    p.add_argument("--corpus-size", type=int, default=200)
    p.add_argument("--channels", type=int, choices=(1, 3), default=1)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--iterations", type=int, default=None,
                   help="hard cap on update steps (overrides --epochs)")
    p.add_argument("--batch-size", type=int, default=8)

    p = sub.add_parser("finetune",
                       help="push a pretrained generator toward illusions")
    add_common(p)
    p.set_defaults(func=cmd_finetune)
    p.add_argument("--type", required=True, choices=sorted(PRESETS))
    p.add_argument("--shape", default=None,
                   choices=("square", "ring", "bar", "grating"))
    p.add_argument("--vts", default=None, choices=("restorenet", "odog"))
    p.add_argument("--dataset", default=None, choices=dataset.SOURCES)
    p.add_argument("--dataset-path", default=None)
    p.add_argument("--corpus-size", type=int, default=200)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--sign", default=None,
                   choices=("right_minus_left", "left_minus_right"))
    p.add_argument("--direction", default="redder",
                   choices=sorted(COLOR_DIRECTIONS),
                   help="chromatic push for --type covi")
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr-generator", type=float, default=None)
    p.add_argument("--lr-discriminator", type=float, default=None)
    p.add_argument("--record-every", dest="record_every", type=int,
                   default=None)
    p.add_argument("--allow-unpretrained", dest="allow_unpretrained",
                   action="store_true", default=None,
                   help="fine-tune a raw generator (mode-collapse study)")
    p.add_argument("--config", default=None,
                   help="key = value file; flags override it")
    p.add_argument("--generator", default=None)
    p.add_argument("--discriminator", default=None)
    p.add_argument("--restorer", default=None)
    p.add_argument("--target-size", type=int, default=28)
    p.add_argument("--target-value", type=float, default=None)
    p.add_argument("--orientation", type=float, default=0.0)
    p.add_argument("--frequency", type=float,
                   default=stimulus.DEFAULT_GRATING_FREQUENCY)
    p.add_argument("--target-contrast", type=float, default=0.5)

    p = sub.add_parser("export-candidates",
                       help="select records and write PNGs + manifest")
    add_common(p)
    p.set_defaults(func=cmd_export_candidates, seed=0)
    p.add_argument("--records", required=True)
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--pq-threshold", type=float, default=0.04)

    p = sub.add_parser("serve-experiment",
                       help="serve stimuli and collect forced choices")
    add_common(p)
    p.set_defaults(func=cmd_serve_experiment)
    p.add_argument("--candidates", action="append", required=True,
                   metavar="TAG=DIR",
                   help="candidate export directory with its method tag; "
                        "repeatable")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--token", default=None,
                   help="operator token for results (default: generated)")
    p.add_argument("--event-log", default=None)
    p.add_argument("--frontend", default=None,
                   help="directory with the built observer client")
    p.add_argument("--seed-base", type=int, default=None,
                   help="deterministic per-session seeds (testing)")

    p = sub.add_parser("analyze", help="summarize an experiment event log")
    add_common(p)
    p.set_defaults(func=cmd_analyze)
    p.add_argument("--event-log", required=True)
    p.add_argument("--json", default=None,
                   help="also write the table as JSON")

    p = sub.add_parser("demo-canonical",
                       help="two-square reference stimulus + its score")
    add_common(p)
    p.set_defaults(func=cmd_demo_canonical)
    p.add_argument("--gray", type=float, default=0.5)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
