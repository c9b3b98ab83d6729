"""Command-line entry point.

The staged commands work on one episode in a run directory::

    fsgan train-gan --config run.toml --out runs/ep0     # episode split + one GAN per class
    fsgan correct   --out runs/ep0                       # ensemble, calibration, latent chains
    fsgan finetune  --out runs/ep0                       # pre-train on generated rows, fine-tune
    fsgan evaluate  --out runs/ep0                       # query metrics

``pipeline`` runs all of them for every episode and variant; ``ablation`` does
the same for all four variants; ``report`` summarizes metrics CSVs.
Exit codes: 0 success, 2 config error, 3 data error, 4 training diverged,
5 sampler error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import VARIANTS, RunConfig, check_variant, load_config, save_config
from .data import load_dataset
from .errors import ConfigError, DataError, FsganError
from .evaluation import Episode, sample_episode

log = logging.getLogger("fsgan")


def _load_run_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    ev = config.evaluation
    changes = {}
    if args.way is not None:
        changes["n_way"] = args.way
    if args.shots is not None:
        changes["k_shot"] = args.shots
    if args.episodes is not None:
        changes["episodes"] = args.episodes
    if getattr(args, "variant", None):
        changes["variants"] = [check_variant(args.variant)]
    if changes:
        config = dataclasses.replace(config, evaluation=dataclasses.replace(ev, **changes))
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if args.out is not None:
        config = dataclasses.replace(config, out_dir=args.out)
    return config


# ---------------------------------------------------------------------------
# staged single-episode commands


def _episode_file(out: Path, ep: Episode, episode: int, ep_seed: int, variant: str) -> None:
    io.write_json(out / "episode.json", {
        "episode": episode,
        "seed": ep_seed,
        "variant": variant,
        "n_way": ep.n_way,
        "k_shot": ep.k_shot,
        "classes": ep.classes.tolist(),
        "support_idx": ep.support_idx.tolist(),
        "query_idx": ep.query_idx.tolist(),
    })


def _read_episode(out: Path, config: RunConfig):
    doc = io.read_json(out / "episode.json")
    data = load_dataset(config.dataset)
    remap = {int(c): i for i, c in enumerate(doc["classes"])}
    s_idx = np.asarray(doc["support_idx"], dtype=int)
    q_idx = np.asarray(doc["query_idx"], dtype=int)
    ep = Episode(
        doc["n_way"], doc["k_shot"], np.asarray(doc["classes"]),
        data.X[s_idx], np.array([remap[int(c)] for c in data.y[s_idx]]),
        data.X[q_idx], np.array([remap[int(c)] for c in data.y[q_idx]]),
        s_idx, q_idx, doc["seed"],
    )
    return doc, data, ep


def _run_config_from_dir(args) -> RunConfig:
    out = Path(args.out)
    if args.config:
        return _load_run_config(args)
    path = out / "config.toml"
    if not path.exists():
        raise ConfigError(f"{out} has no config.toml; pass --config or run train-gan first")
    return load_config(path)


def cmd_train_gan(args) -> int:
    from .pipeline import StageLog, episode_seed, train_class_gan

    config = _load_run_config(args)
    out = Path(config.out_dir)
    variant = config.evaluation.variants[0]
    if variant in ("ros", "smote"):
        raise ConfigError("train-gan needs a GAN variant")
    data = load_dataset(config.dataset)
    ev = config.evaluation
    ep_seed = episode_seed(config.seed, args.episode)
    ep = sample_episode(data.X, data.y, ev.n_way, ev.k_shot, ev.query_per_class, ep_seed)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.toml")
    _episode_file(out, ep, args.episode, ep_seed, variant)
    stages = StageLog(args.episode, variant)
    for label in range(ev.n_way):
        rows = ep.support_x[ep.support_y == label]
        gan, train, hold = train_class_gan(rows, label, variant, config, ep_seed, stages)
        cdir = out / f"class_{label}"
        io.save_gan(gan, cdir / "gan")
        io.save_samples(cdir / "train.csv", train)
        io.save_samples(cdir / "holdout.csv", hold)
        print(f"class {label}: trained {len(gan.sub_discriminators)} discriminator(s), final losses {gan.loss_history[-1][1:]}")
    return 0


def cmd_correct(args) -> int:
    from .pipeline import StageLog, correct_class

    config = _run_config_from_dir(args)
    out = Path(args.out)
    doc = io.read_json(out / "episode.json")
    variant = check_variant(args.variant or doc["variant"])
    stages = StageLog(doc["episode"], variant)
    for label in range(doc["n_way"]):
        cdir = out / f"class_{label}"
        gan = io.load_gan(cdir / "gan")
        train, _ = io.load_samples(cdir / "train.csv")
        hold, _ = io.load_samples(cdir / "holdout.csv")
        aug = correct_class(gan, train, hold, label, variant, config, doc["seed"], stages)
        io.save_samples(cdir / "samples.csv", aug.samples)
        if aug.ensemble is not None:
            # refinement changed the discriminators; store them with the fitted ensemble
            io.save_gan(gan, cdir / "gan", aug.ensemble)
        if aug.diagnostics is not None:
            io.write_json(cdir / "diagnostics.json", aug.diagnostics.to_dict())
            print(f"class {label}: acceptance {aug.diagnostics.to_dict()['acceptance_rate']:.3f}, kept {len(aug.samples)}")
        else:
            print(f"class {label}: {len(aug.samples)} raw generator samples")
    return 0


def _class_samples(out: Path, n_way: int):
    from .pipeline import ClassAugmentation

    classes = []
    for label in range(n_way):
        X, _ = io.load_samples(out / f"class_{label}" / "samples.csv")
        classes.append(ClassAugmentation(label, X))
    return classes


def cmd_finetune(args) -> int:
    from .pipeline import StageLog, fit_classifier

    config = _run_config_from_dir(args)
    out = Path(args.out)
    doc, _, ep = _read_episode(out, config)
    classes = _class_samples(out, doc["n_way"])
    model = fit_classifier(classes, ep, config, doc["seed"], StageLog(doc["episode"], doc["variant"]))
    io.save_checkpoint(model, out / "classifier.json")
    last = model.history[-1]
    print(f"fine-tuned {model.n_heads} heads: mh_loss {last['mh_loss']:.4f}, combined ce {last['combined_ce']:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    from .pipeline import evaluate_episode, reference_classifier

    config = _run_config_from_dir(args)
    out = Path(args.out)
    doc, data, ep = _read_episode(out, config)
    model = io.load_checkpoint(out / "classifier.json")
    reference = reference_classifier(data, config)
    metrics = evaluate_episode(model, _class_samples(out, doc["n_way"]), ep, config, reference)
    io.write_json(out / "metrics.json", metrics)
    print(json.dumps(metrics, indent=1))
    return 0


# ---------------------------------------------------------------------------
# whole runs


def _print_summary(summary: dict) -> None:
    print(f"{'variant':<10} {'episodes':>8} " + " ".join(f"{k:>17}" for k in ("acc", "pre", "f1", "mmd", "score_analog")))
    for variant, stats in summary.items():
        cells = " ".join(f"{stats[k]['mean']:8.4f}±{stats[k]['std']:<8.4f}" for k in ("acc", "pre", "f1", "mmd", "score_analog"))
        print(f"{variant:<10} {stats['episodes']:>8} {cells}")


def cmd_pipeline(args) -> int:
    from .pipeline import run_pipeline

    config = _load_run_config(args)
    result = run_pipeline(config, threads=args.threads, save_models=not args.no_checkpoints)
    _print_summary(result.summary["variants"])
    print(f"run written to {result.out_dir}")
    return 0


def cmd_ablation(args) -> int:
    from .ablation import realism_ablation, run_ablation

    if args.realism:
        seeds = args.episodes or 10
        table = realism_ablation(range(args.seed or 0, (args.seed or 0) + seeds))
        out = Path(args.out or "runs/realism")
        io.write_csv(out / "realism.csv", ["seed", "variant", "mmd", "score_analog"],
                     [[r["seed"], r["variant"], r["mmd"], r["score_analog"]] for r in table.rows])
        io.write_json(out / "realism_summary.json", table.summary())
        for variant, s in table.summary().items():
            print(f"{variant:<10} median mmd {s['mmd_median']:.5f}  mean score {s['score_analog_mean']:.4f}  beats gan {s['wins_vs_gan']}")
        return 0
    config = _load_run_config(args)
    result = run_ablation(config, threads=args.threads, save_models=not args.no_checkpoints)
    _print_summary(result.summary["variants"])
    print(f"run written to {result.out_dir}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradchecks

    results = run_gradchecks(points=args.points, seed=args.seed or 0)
    worst = 0.0
    for name, err in results.items():
        worst = max(worst, err)
        print(f"{name:<24} {err:.3e}  {'ok' if err <= args.tolerance else 'FAIL'}")
    print(f"max relative error {worst:.3e} (tolerance {args.tolerance:g})")
    return 0 if worst <= args.tolerance else 1


def cmd_report(args) -> int:
    from .pipeline import read_metrics, summarize

    paths = [Path(p) for p in args.runs] or [Path(args.out or "runs/latest")]
    rows = []
    for p in paths:
        f = p / "metrics.csv" if p.is_dir() else p
        if not f.exists():
            raise DataError(f"no metrics file at {f}")
        rows.extend(read_metrics(f))
    if not rows:
        raise DataError("metrics files contain no rows")
    _print_summary(summarize(rows))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config, JSON config or a run's MANIFEST.json")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--out", help="run directory")
    common.add_argument("--variant", choices=[*VARIANTS, "ros", "smote"], help="augmentation variant")
    common.add_argument("--way", type=int, help="classes per episode (N)")
    common.add_argument("--shots", type=int, help="support rows per class (K)")
    common.add_argument("--episodes", type=int, help="number of episodes")
    common.add_argument("--threads", type=int, default=1, help="episodes run concurrently")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fsgan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-gan", parents=[common], help="sample an episode and train one GAN per class")
    p.add_argument("--episode", type=int, default=0, help="episode index (selects the split)")
    p.set_defaults(func=cmd_train_gan)
    p = sub.add_parser("correct", parents=[common], help="correct trained generators with the latent sampler")
    p.set_defaults(func=cmd_correct)
    p = sub.add_parser("finetune", parents=[common], help="pre-train on generated rows and fine-tune on the support set")
    p.set_defaults(func=cmd_finetune)
    p = sub.add_parser("evaluate", parents=[common], help="score the fine-tuned classifier on the query set")
    p.set_defaults(func=cmd_evaluate)
    for name, fn, text in (("pipeline", cmd_pipeline, "full run over episodes and variants"),
                           ("ablation", cmd_ablation, "all four variants on shared seeds")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--no-checkpoints", action="store_true", help="skip writing network checkpoints")
        if name == "ablation":
            p.add_argument("--realism", action="store_true", help="ring-mixture realism study (MMD, score analog)")
        p.set_defaults(func=fn)
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every differentiable primitive")
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)
    p = sub.add_parser("report", parents=[common], help="summarize metrics CSVs")
    p.add_argument("runs", nargs="*", help="run directories or metrics.csv files")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except FsganError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
