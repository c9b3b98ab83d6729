"""End-to-end few-shot run: augment each episode's support set, pre-train, fine-tune, evaluate.

For every episode and variant the data flow is

    sample_episode -> train_gan -> ensemble -> sample -> merge -> pretrain -> finetune -> evaluate

with one generator (and its sub-discriminators) per class, trained only on
that class's support rows. Variants switch the ensemble (``en_*``) and the
latent sampler (``*repgan``); ``ros`` and ``smote`` replace the generator with
an oversampling baseline. All variants of an episode share the same seeds and
the same support/holdout split.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .config import BASELINES, RunConfig, check_variant, save_config, uses_ensemble, uses_sampler
from .data import Dataset, load_dataset
from .ensemble import EnsembleDiscriminator, fit_ensemble
from .errors import FsganError, StageError
from .evaluation import Episode, baseline_ros, baseline_smote, compute_metrics, mmd_rbf, sample_episode, score_analog
from .finetune import MultiHeadClassifier, finetune, predict, pretrain
from .gancore import TrainedGan, generate, refine_discriminators, train_gan
from .sampler import ChainDiagnostics, run_chain

log = logging.getLogger(__name__)

STAGES = ("sample_episode", "train_gan", "ensemble", "sample", "merge", "pretrain", "finetune", "evaluate")
METRIC_COLUMNS = ["dataset", "variant", "episode", "acc", "pre", "f1", "mmd", "score_analog", "seed"]
SUBSAMPLING_NOTE = "plain stratified episode sampling"
BASELINE_NOTE = "the 'gan' variant (no ensemble, no sampler) is the reference GAN baseline"


_variant = check_variant


@dataclass
class ClassAugmentation:
    label: int
    samples: np.ndarray
    gan: TrainedGan | None = None
    ensemble: EnsembleDiscriminator | None = None
    diagnostics: ChainDiagnostics | None = None


@dataclass
class EpisodeResult:
    episode: int
    variant: str
    seed: int
    metrics: dict
    stages: list[dict]
    classes: list[ClassAugmentation] = field(default_factory=list, repr=False)
    classifier: MultiHeadClassifier | None = field(default=None, repr=False)


class StageLog:
    def __init__(self, episode: int, variant: str):
        self.episode, self.variant = episode, variant
        self.entries: list[dict] = []

    def run(self, stage: str, fn, *args, **kwargs):
        try:
            out = fn(*args, **kwargs)
        except StageError:
            raise
        except (FsganError, ValueError, ArithmeticError) as exc:
            self.entries.append(self._entry(stage, "failed", str(exc)))
            raise StageError(stage, exc, self.episode) from exc
        self.entries.append(self._entry(stage, "done"))
        return out

    def skip(self, stage: str, reason: str):
        self.entries.append(self._entry(stage, "skipped", reason))

    def _entry(self, stage, status, note=None):
        e = {"episode": self.episode, "variant": self.variant, "stage": stage, "status": status}
        if note:
            e["note"] = note
        return e


def episode_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, episode]).generate_state(1, np.uint32)[0])


_SHARED = 2**31 - 1  # label slot for seeds that are not tied to one class


def _class_seed(ep_seed: int, label: int, purpose: int) -> int:
    return int(np.random.SeedSequence([ep_seed, label, purpose]).generate_state(1, np.uint32)[0])


def _split_holdout(rows: np.ndarray, fraction: float, rng: np.random.Generator):
    n_hold = min(len(rows) - 1, max(1, int(round(fraction * len(rows))))) if fraction > 0 else 0
    perm = rng.permutation(len(rows))
    return rows[perm[n_hold:]], rows[perm[:n_hold]]


def train_class_gan(rows: np.ndarray, label: int, variant: str, config: RunConfig, ep_seed: int, stages: StageLog):
    """Split one class's rows into train/holdout and train its generator.

    Returns ``(gan, train_rows, holdout_rows)``.
    """
    seed = _class_seed(ep_seed, label, 0)
    train, hold = _split_holdout(rows, config.ensemble.holdout_fraction, np.random.default_rng(seed))
    T = config.ensemble.members if uses_ensemble(variant) else 1
    bootstrap = config.ensemble.bootstrap and uses_ensemble(variant)
    gan_cfg = dataclasses.replace(config.gan, seed=seed)
    gan = stages.run("train_gan", train_gan, train, gan_cfg, T=T, bootstrap=bootstrap)
    return gan, train, hold


def correct_class(gan: TrainedGan, train, hold, label: int, variant: str, config: RunConfig, ep_seed: int, stages: StageLog):
    """Draw ``generated_per_class`` rows from a trained class generator.

    Sampler variants refine the sub-discriminators, fit the combination and
    calibration on the holdout rows and run the latent chains; the others
    take raw generator output.
    """
    n_out = config.evaluation.generated_per_class
    ens_cfg = config.ensemble
    rng = np.random.default_rng(_class_seed(ep_seed, label, 1))
    out = ClassAugmentation(label, np.empty((0, gan.data_dim)), gan)

    if not uses_sampler(variant):
        if not uses_ensemble(variant):
            stages.skip("ensemble", "single discriminator, no sampler")
        else:
            stages.skip("ensemble", "no sampler: combination and calibration unused")
        stages.skip("sample", f"variant {variant} draws raw generator output")
        _, out.samples = generate(gan.generator, gan.prior, n_out, rng)
        return out

    def build_ensemble():
        refine_discriminators(gan, train, ens_cfg.refine_steps, rng)
        real = hold if len(hold) else train
        fake = gan.generator(gan.prior.sample(len(real), rng))
        return fit_ensemble(gan.sub_discriminators, real, fake, ens_cfg.combine_kind, ens_cfg.calibrate)

    out.ensemble = stages.run("ensemble", build_ensemble)
    s_cfg = config.sampler
    n_chains = max(1, math.ceil(n_out / max(1, s_cfg.kept_per_chain)))
    s_cfg = dataclasses.replace(s_cfg, n_chains=n_chains, seed=_class_seed(ep_seed, label, 2))
    X, diag = stages.run("sample", run_chain, gan, out.ensemble, s_cfg)
    out.samples, out.diagnostics = X[:n_out], diag
    return out


def augment_class(rows: np.ndarray, label: int, variant: str, config: RunConfig, ep_seed: int, stages: StageLog):
    """Generate ``generated_per_class`` synthetic rows for one class."""
    gan, train, hold = train_class_gan(rows, label, variant, config, ep_seed, stages)
    return correct_class(gan, train, hold, label, variant, config, ep_seed, stages)


def _baseline_class(rows, label, variant, config, ep_seed, stages):
    stages.skip("train_gan", f"baseline {variant}")
    stages.skip("ensemble", f"baseline {variant}")
    n_out = config.evaluation.generated_per_class
    rng = np.random.default_rng(_class_seed(ep_seed, label, 3))
    y = np.zeros(len(rows), dtype=int)
    target = n_out + len(rows)
    if variant == "ros":
        X, _ = stages.run("sample", baseline_ros, rows, y, target, rng)
    else:
        X, _ = stages.run("sample", baseline_smote, rows, y, target, 5, rng)
    return ClassAugmentation(label, X[len(rows):])


def reference_classifier(data: Dataset, config: RunConfig) -> MultiHeadClassifier:
    """Classifier on every row of the dataset; only used to score generated samples."""
    cfg = dataclasses.replace(config.pretrain, epochs=config.evaluation.reference_epochs, seed=config.seed)
    return pretrain(data.X, data.y, cfg, n_classes=data.n_classes)


def run_episode(
    data: Dataset,
    config: RunConfig,
    episode: int,
    variant: str,
    reference: MultiHeadClassifier | None = None,
) -> EpisodeResult:
    variant = _variant(variant)
    ev = config.evaluation
    ep_seed = episode_seed(config.seed, episode)
    stages = StageLog(episode, variant)
    ep = stages.run("sample_episode", sample_episode, data.X, data.y, ev.n_way, ev.k_shot, ev.query_per_class, ep_seed)

    classes = []
    for label in range(ev.n_way):
        rows = ep.support_x[ep.support_y == label]
        sub = StageLog(episode, variant)
        if variant in BASELINES:
            aug = _baseline_class(rows, label, variant, config, ep_seed, sub)
        else:
            aug = augment_class(rows, label, variant, config, ep_seed, sub)
        for e in sub.entries:
            e["class"] = label
        stages.entries.extend(sub.entries)
        classes.append(aug)

    model = fit_classifier(classes, ep, config, ep_seed, stages)
    metrics = stages.run("evaluate", evaluate_episode, model, classes, ep, config, reference)
    return EpisodeResult(episode, variant, ep_seed, metrics, stages.entries, classes, model)


def fit_classifier(classes: list[ClassAugmentation], ep: Episode, config: RunConfig, ep_seed: int, stages: StageLog):
    """Merge the generated rows, pre-train on them, then fine-tune on the support set."""
    ev = config.evaluation

    def merge():
        X = np.vstack([c.samples for c in classes])
        y = np.concatenate([np.full(len(c.samples), c.label) for c in classes])
        if ev.include_support:
            X, y = np.vstack([X, ep.support_x]), np.concatenate([y, ep.support_y])
        return X, y

    gen_x, gen_y = stages.run("merge", merge)
    pre_cfg = dataclasses.replace(config.pretrain, seed=_class_seed(ep_seed, _SHARED, 4))
    model = stages.run("pretrain", pretrain, gen_x, gen_y, pre_cfg, ev.n_way)
    ft_cfg = dataclasses.replace(config.finetune, seed=_class_seed(ep_seed, _SHARED, 5))
    return stages.run("finetune", finetune, model, ep.support_x, ep.support_y, ft_cfg)


def evaluate_episode(model, classes: list[ClassAugmentation], ep: Episode, config: RunConfig, reference=None) -> dict:
    """Query-set metrics plus realism of the generated rows against held-out real rows."""
    ev = config.evaluation
    _, pred = predict(model, ep.query_x)
    report = compute_metrics(pred, ep.query_y, labels=np.arange(ep.n_way))
    mmds = [mmd_rbf(c.samples, ep.query_x[ep.query_y == c.label], ev.mmd_bandwidth) for c in classes]
    samples = np.vstack([c.samples for c in classes])
    score = score_analog(samples, reference) if reference is not None else float("nan")
    return {**report.as_row(), "mmd": float(np.mean(mmds)), "score_analog": score}


@dataclass
class RunResult:
    out_dir: Path
    rows: list[dict]
    summary: dict
    manifest: dict


def summarize(rows: list[dict]) -> dict:
    out = {}
    for variant in dict.fromkeys(r["variant"] for r in rows):
        sel = [r for r in rows if r["variant"] == variant]
        stats = {"episodes": len(sel)}
        for key in ("acc", "pre", "f1", "mmd", "score_analog"):
            vals = np.array([r[key] for r in sel], dtype=np.float64)
            stats[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "median": float(np.median(vals))}
        out[variant] = stats
    return out


def _write_episode(out: Path, result: EpisodeResult, save_models: bool) -> None:
    base = out / "episodes" / f"{result.episode:04d}" / result.variant
    for aug in result.classes:
        cdir = base / f"class_{aug.label}"
        io.save_samples(cdir / "samples.csv", aug.samples)
        if aug.diagnostics is not None:
            io.write_json(cdir / "diagnostics.json", aug.diagnostics.to_dict())
        if aug.ensemble is not None:
            io.write_json(cdir / "ensemble.json", aug.ensemble.to_dict())
        if save_models and aug.gan is not None:
            io.save_gan(aug.gan, cdir / "gan", aug.ensemble)
    if save_models and result.classifier is not None:
        io.save_checkpoint(result.classifier, base / "classifier.json")
    io.write_json(base / "metrics.json", result.metrics)


def _manifest(config: RunConfig, stages: list[dict], out: Path, status: str, error: str | None = None) -> dict:
    artifacts = {}
    for path in sorted(out.rglob("*")):
        if path.is_file() and path.name != "MANIFEST.json" and not path.name.endswith(".tmp"):
            artifacts[path.relative_to(out).as_posix()] = io.file_hash(path)
    doc = {
        "format_version": 1,
        "status": status,
        "config": config.to_dict(),
        "stage_order": list(STAGES),
        "stages": stages,
        "artifacts": artifacts,
        "episode_subsampling": SUBSAMPLING_NOTE,
        "linked_sampling": False,
        "notes": [BASELINE_NOTE],
        "reproduce": "fsgan pipeline --config MANIFEST.json",
    }
    if error:
        doc["error"] = error
    return doc


def run_pipeline(config: RunConfig, out_dir=None, threads: int = 1, save_models: bool = True) -> RunResult:
    """Run every (episode, variant) pair and write the run directory.

    Writes ``config.toml``, ``MANIFEST.json``, ``metrics.csv``,
    ``summary.json`` and per-episode artifacts. On failure the manifest is
    written with ``status = "failed"`` before the ``StageError`` propagates.
    """
    out = Path(out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = dataclasses.replace(config, out_dir=str(out))
    save_config(config, out / "config.toml")
    stage_log: list[dict] = []
    try:
        data = load_dataset(config.dataset)
    except FsganError as exc:
        err = StageError("load_dataset", exc)
        io.write_json(out / "MANIFEST.json", _manifest(config, stage_log, out, "failed", str(err)))
        raise err from exc
    stage_log.append({"stage": "load_dataset", "status": "done"})
    reference = reference_classifier(data, config)
    stage_log.append({"stage": "reference_classifier", "status": "done"})
    if save_models:
        io.save_checkpoint(reference, out / "reference_classifier.json")

    variants = [_variant(v) for v in config.evaluation.variants]
    jobs = [(e, v) for e in range(config.evaluation.episodes) for v in variants]

    def job(args):
        return run_episode(data, config, args[0], args[1], reference)

    results: list[EpisodeResult] = []
    try:
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                for res in pool.map(job, jobs):
                    results.append(res)
                    _write_episode(out, res, save_models)
        else:
            for args in jobs:
                res = job(args)
                results.append(res)
                _write_episode(out, res, save_models)
                log.info("episode %d %s: %s", res.episode, res.variant, res.metrics)
    except StageError as exc:
        for res in results:
            stage_log.extend(res.stages)
        io.write_json(out / "MANIFEST.json", _manifest(config, stage_log, out, "failed", str(exc)))
        raise

    results.sort(key=lambda r: (r.episode, variants.index(r.variant)))
    rows = []
    for res in results:
        stage_log.extend(res.stages)
        rows.append({"dataset": config.dataset.name, "variant": res.variant, "episode": res.episode, **res.metrics, "seed": res.seed})
    io.write_csv(out / "metrics.csv", METRIC_COLUMNS, [[r[c] for c in METRIC_COLUMNS] for r in rows])
    summary = {"dataset": config.dataset.name, "variants": summarize(rows), "notes": [BASELINE_NOTE]}
    io.write_json(out / "summary.json", summary)
    manifest = _manifest(config, stage_log, out, "complete")
    io.write_json(out / "MANIFEST.json", manifest)
    return RunResult(out, rows, summary, manifest)


def read_metrics(path) -> list[dict]:
    """Parse a metrics CSV written by ``run_pipeline``."""
    import csv

    with Path(path).open(newline="") as handle:
        rows = list(csv.DictReader(handle))
    for r in rows:
        for key in ("acc", "pre", "f1", "mmd", "score_analog"):
            r[key] = float(r[key])
        r["episode"] = int(r["episode"])
        r["seed"] = int(r["seed"])
    return rows
