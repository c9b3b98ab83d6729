"""Acceptance criteria 1-10.

Each test records one PASS/FAIL line (printed, and repeated in the pytest
terminal summary) before asserting, so a failing criterion still reports its
measured values.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from fsgan import diffcore as dc
from fsgan.ablation import realism_ablation
from fsgan.config import EvalConfig, RunConfig
from fsgan.data import DatasetSpec
from fsgan.errors import CheckpointError
from fsgan.finetune import (
    FinetuneConfig,
    Head,
    MultiHeadClassifier,
    PretrainConfig,
    build_classifier,
    epochs_to_loss,
    finetune,
    mh_loss,
    predict,
    pretrain,
)
from fsgan.gancore import GanConfig, train_gan
from fsgan.gradcheck import run_gradchecks
from fsgan.evaluation import baseline_ros, baseline_smote, compute_metrics, mmd_rbf
from fsgan.io import load_checkpoint, load_gan, save_checkpoint, save_gan
from fsgan.pipeline import run_pipeline
from fsgan.sampler import (
    AnalyticTarget,
    ChainState,
    LatentTarget,
    SamplerConfig,
    acceptance_probability,
    langevin_propose,
    mh_accept,
    mh_log_ratio,
    run_chain,
    run_chains,
)

from oracles import confusion_metrics, indifferent_gan, ks_statistic, on_segment, tilted_gaussian_gan, tilted_target_cdf

ABALONE = Path(__file__).parent / "data" / "abalone_style.csv"
ABALONE_FEATURES = ["length", "diameter", "height", "whole_weight", "shucked_weight", "viscera_weight", "shell_weight"]


def test_c01_gradient_correctness(criterion):
    start = time.perf_counter()
    results = run_gradchecks(points=100)
    elapsed = time.perf_counter() - start
    worst_name = max(results, key=results.get)
    ok = max(results.values()) <= 1e-5 and elapsed < 10.0 and len(results) >= 20
    criterion(1, "gradient correctness", ok,
              f"{len(results)} checks, worst {worst_name} {results[worst_name]:.2e}, {elapsed:.1f}s")
    assert ok


def test_c02_sampler_matches_tilted_target(criterion):
    start = time.perf_counter()
    gan, ens = tilted_gaussian_gan()
    X, diag = run_chain(gan, ens, SamplerConfig())
    ks = ks_statistic(X[:, 0], tilted_target_cdf)
    elapsed = time.perf_counter() - start
    ok = diag.n_kept == 5000 and ks <= 0.03 and elapsed < 30.0
    criterion(2, "sampler oracle (KS vs integrated CDF)", ok,
              f"KS {ks:.4f} on {diag.n_kept} kept, mean {X.mean():.3f}, {elapsed:.1f}s")
    assert ok


def test_c03_indifferent_discriminator_recovers_prior(criterion):
    gan, ens = indifferent_gan(2)
    Z, _, diag = run_chains(LatentTarget(gan.generator, ens, gan.prior), SamplerConfig())
    mean_norm = float(np.linalg.norm(Z.mean(axis=0)))
    cov_err = float(np.max(np.abs(np.cov(Z.T) - np.eye(2))))
    ok = Z.shape == (5000, 2) and mean_norm <= 0.1 and cov_err <= 0.15
    criterion(3, "indifferent discriminator", ok, f"|mean| {mean_norm:.4f}, max|cov-I| {cov_err:.4f}, n {len(Z)}")
    assert ok


def _fuzzed_alphas(n: int, rng: np.random.Generator) -> np.ndarray:
    out = []
    for use_gradient in (True, False):
        for dim in (1, 2, 5):
            m = n // 6
            scale = 10.0 ** rng.uniform(-3, 3, size=(m, 1))
            lt = rng.normal(scale=1e3, size=(2, m))
            lt[:, rng.random(m) < 0.01] = -np.inf
            a = ChainState(rng.normal(size=(m, dim)) * scale, None, lt[0], rng.normal(size=(m, dim)) * scale)
            b = ChainState(rng.normal(size=(m, dim)) * scale, None, lt[1], rng.normal(size=(m, dim)) * scale)
            tau = 10.0 ** rng.uniform(-4, 1, size=m)
            with np.errstate(all="ignore"):
                out.append(acceptance_probability(mh_log_ratio(a, b, tau, use_gradient)))
    return np.concatenate(out)


def _bin_flows(n_chains: int, steps: int, edges: np.ndarray, rng: np.random.Generator):
    """Per-chain net flows between bins for a random-walk MH chain on N(0,1)."""
    target = AnalyticTarget(1, lambda z: -0.5 * z[:, 0] ** 2, lambda z: -z)
    k = len(edges) + 1
    state = ChainState.at(target, rng.standard_normal((n_chains, 1)))  # start in equilibrium
    flows = np.zeros((n_chains, k, k))
    rows = np.arange(n_chains)
    for _ in range(steps):
        before = np.digitize(state.z[:, 0], edges)
        z_prop, _ = langevin_propose(state, 1.0, rng, use_gradient=False)
        _, _, state = mh_accept(state, z_prop, 1.0, rng, target, use_gradient=False)
        np.add.at(flows, (rows, before, np.digitize(state.z[:, 0], edges)), 1.0)
    return flows - flows.transpose(0, 2, 1)


def test_c04_mh_invariants(criterion):
    rng = np.random.default_rng(2024)
    alphas = _fuzzed_alphas(1_000_002, rng)
    in_range = bool(np.all((alphas >= 0) & (alphas <= 1)))

    state = ChainState.at(AnalyticTarget(3, lambda z: np.sin(z).sum(1), lambda z: np.cos(z)), rng.normal(size=(1000, 3)))
    null_ok = bool(np.all(acceptance_probability(mh_log_ratio(state, state, 0.3)) == 1.0))

    net = _bin_flows(1000, 1000, np.linspace(-2.0, 2.0, 9), rng)
    total = net.sum(axis=0)
    se = net.std(axis=0, ddof=1) * np.sqrt(net.shape[0])
    iu = np.triu_indices(net.shape[1], k=1)
    z = np.where(se[iu] > 0, np.abs(total[iu]) / np.where(se[iu] > 0, se[iu], 1.0), 0.0)
    balance_ok = bool(np.all(z <= 3.0))

    ok = in_range and null_ok and balance_ok and len(alphas) >= 1_000_000
    criterion(4, "MH invariants", ok,
              f"{len(alphas)} fuzzed alphas in [0,1]: {in_range}; null moves 1: {null_ok}; "
              f"worst bin-pair |net flow| {z.max():.2f} SE over {len(z)} pairs")
    assert ok


@pytest.mark.slow
def test_c05_correction_ordering_on_ring(criterion):
    start = time.perf_counter()
    table = realism_ablation(range(10))
    elapsed = time.perf_counter() - start
    s = table.summary()
    ok = (
        s["en_repgan"]["mmd_median"] < s["gan"]["mmd_median"]
        and s["en_repgan"]["wins_vs_gan"] >= 7
        and s["repgan"]["wins_vs_gan"] >= 7
        and s["en_gan"]["wins_vs_gan"] >= 7
        and elapsed < 600.0
    )
    detail = ", ".join(
        f"{v} mmd {s[v]['mmd_median']:.4f} wins {s[v]['wins_vs_gan']}/10 score {s[v]['score_analog_mean']:.2f}" for v in s
    )
    criterion(5, "correction ordering on the 8-mode ring", ok, f"{detail}; {elapsed:.0f}s")
    assert ok


def _toy_blobs(n, rng, sep=1.5):
    y = np.repeat([0, 1], n)
    X = rng.normal(size=(2 * n, 4))
    X[:, 0] += np.where(y == 1, sep, -sep)
    return X, y


def test_c06_multi_head_loss(criterion):
    rng = np.random.default_rng(0)
    body = pretrain(*_toy_blobs(500, rng), PretrainConfig(epochs=5))
    Xs, ys = _toy_blobs(15, np.random.default_rng(1))
    medians = {}
    for H in (1, 5):
        epochs = []
        for seed in range(20):
            tuned = finetune(body, Xs, ys, FinetuneConfig(heads=H, epochs=1000, seed=seed))
            epochs.append(epochs_to_loss(tuned, 0.3) or np.inf)
        medians[H] = float(np.median(epochs))
    convergence_ok = medians[5] <= medians[1]

    model = build_classifier(4, 2, PretrainConfig(heads=1), np.random.default_rng(3))
    X, y = _toy_blobs(10, np.random.default_rng(4))
    feats = model.body(X)
    logits = feats @ model.heads[0].weight + model.heads[0].bias
    z = logits - logits.max(axis=1, keepdims=True)
    ce = -np.mean((z - np.log(np.exp(z).sum(axis=1, keepdims=True)))[np.arange(len(y)), y])
    single_ok = mh_loss(model, X, y, 0.01) == pytest.approx(ce + 0.01 * np.sum(model.heads[0].weight ** 2), rel=1e-12)
    same = MultiHeadClassifier(model.body, [Head(model.heads[0].weight, model.heads[0].bias)] * 5, 2)
    identical_ok = mh_loss(same, X, y, 0.01) == pytest.approx(mh_loss(model, X, y, 0.01), rel=1e-14)

    ok = convergence_ok and single_ok and identical_ok
    criterion(6, "multi-head loss", ok,
              f"median epochs to loss 0.3: H=1 {medians[1]:g}, H=5 {medians[5]:g}; "
              f"H=1 identity {single_ok}; identical heads {identical_ok}")
    assert ok


@pytest.mark.slow
def test_c07_episodic_pipeline(criterion, tmp_path):
    start = time.perf_counter()
    blobs = RunConfig(
        dataset=DatasetSpec("two-blobs", noise=1.0, n_total=2000, dim=2, separation=4.0),
        evaluation=EvalConfig(episodes=10, variants=["en_repgan"]),
    )
    blob_acc = float(np.median([r["acc"] for r in run_pipeline(blobs, tmp_path / "blobs", save_models=False).rows]))

    abalone = RunConfig(
        dataset=DatasetSpec(str(ABALONE), label_column="age_group", feature_columns=ABALONE_FEATURES, standardize=True),
        evaluation=EvalConfig(episodes=20, variants=["gan", "en_repgan"]),
    )
    result = run_pipeline(abalone, tmp_path / "abalone", save_models=False)
    means = {v: {k: result.summary["variants"][v][k]["mean"] for k in ("acc", "pre", "f1")} for v in ("gan", "en_repgan")}
    wins = sum(means["en_repgan"][k] >= means["gan"][k] for k in ("acc", "pre", "f1"))
    elapsed = time.perf_counter() - start
    shape_ok = len(result.rows) == 40 and all(0 <= r[k] <= 1 for r in result.rows for k in ("acc", "pre", "f1"))

    ok = blob_acc >= 0.9 and wins >= 2 and shape_ok and elapsed < 900.0
    cells = "; ".join(f"{v} " + " ".join(f"{k} {means[v][k]:.4f}" for k in ("acc", "pre", "f1")) for v in means)
    criterion(7, "episodic pipeline", ok,
              f"two-blobs median acc {blob_acc:.4f}; abalone-style {cells}; en_repgan >= gan in {wins}/3; {elapsed:.0f}s")
    assert ok


def test_c08_metrics_oracle(criterion):
    rng = np.random.default_rng(8)
    mismatches = 0
    for _ in range(1000):
        c = int(rng.integers(2, 6))
        n = int(rng.integers(1, 60))
        pred, truth = rng.integers(0, c, n), rng.integers(0, c, n)
        r = compute_metrics(pred, truth, labels=np.arange(c))
        mismatches += (r.acc, r.pre, r.f1) != confusion_metrics(pred.tolist(), truth.tolist(), c)
    worst_identity, worst_asym = 0.0, 0.0
    for _ in range(20):
        X = rng.normal(size=(int(rng.integers(2, 200)), 3))
        Y = rng.normal(size=(int(rng.integers(2, 200)), 3)) + rng.normal()
        worst_identity = max(worst_identity, mmd_rbf(X, X))
        for bw in ("median-heuristic", 0.7):
            worst_asym = max(worst_asym, abs(mmd_rbf(X, Y, bw) - mmd_rbf(Y, X, bw)))
    ok = mismatches == 0 and worst_identity <= 1e-12 and worst_asym <= 1e-12
    criterion(8, "metrics oracle", ok,
              f"{mismatches}/1000 mismatches; mmd(X,X) max {worst_identity:.1e}; symmetry gap {worst_asym:.1e}")
    assert ok


def test_c09_baselines(criterion):
    rng = np.random.default_rng(9)
    off_segment, bad_counts, foreign_rows = 0, 0, 0
    for trial in range(50):
        n0, n1 = int(rng.integers(2, 20)), int(rng.integers(2, 20))
        X = rng.normal(size=(n0 + n1, 3))
        y = np.r_[np.zeros(n0), np.ones(n1)].astype(int)
        target = int(rng.integers(20, 60))
        Xs, ys = baseline_smote(X, y, target, 3, rng)
        bad_counts += np.bincount(ys).tolist() != [target, target]
        for cls in (0, 1):
            rows = X[y == cls]
            for p in Xs[ys == cls]:
                if not any(on_segment(p, a, b) for a in rows for b in rows):
                    off_segment += 1
        Xr, yr = baseline_ros(X, y, target, rng)
        bad_counts += np.bincount(yr).tolist() != [target, target]
        for cls in (0, 1):
            rows = X[y == cls]
            foreign_rows += sum(not any(np.array_equal(p, r) for r in rows) for p in Xr[yr == cls])
    ok = off_segment == 0 and bad_counts == 0 and foreign_rows == 0
    criterion(9, "SMOTE/ROS baselines", ok,
              f"50 trials: {off_segment} SMOTE points off same-class segments, "
              f"{bad_counts} wrong class totals, {foreign_rows} ROS rows not copied from their class")
    assert ok


def test_c10_determinism_and_persistence(criterion, tmp_path):
    cfg = RunConfig(
        dataset=DatasetSpec("two-blobs", noise=1.0, n_total=600),
        evaluation=EvalConfig(episodes=2, variants=["gan", "en_repgan"]),
    )
    a = run_pipeline(cfg, tmp_path / "a")
    b = run_pipeline(cfg, tmp_path / "b")
    delta = max(abs(ra[k] - rb[k]) for ra, rb in zip(a.rows, b.rows) for k in ("acc", "pre", "f1", "mmd", "score_analog"))

    rng = np.random.default_rng(10)
    probes = rng.normal(size=(100, 2)) * 10.0 ** rng.integers(-3, 4, size=(100, 1))
    identical = True
    mlp = dc.MlpModel.create([2, 64, 64, 1], rng, "tanh", "sigmoid")
    save_checkpoint(mlp, tmp_path / "mlp.json")
    identical &= np.array_equal(load_checkpoint(tmp_path / "mlp.json")(probes), mlp(probes))
    clf = build_classifier(2, 3, PretrainConfig(heads=4), rng)
    save_checkpoint(clf, tmp_path / "clf.json")
    identical &= np.array_equal(predict(load_checkpoint(tmp_path / "clf.json"), probes)[0], predict(clf, probes)[0])
    gan = train_gan(rng.normal(size=(40, 2)), GanConfig(steps=3), T=2)
    save_gan(gan, tmp_path / "gan")
    z = rng.normal(size=(100, gan.config.latent_dim))
    identical &= np.array_equal(load_gan(tmp_path / "gan").generator(z), gan.generator(z))

    rejected = 0
    truncated = tmp_path / "truncated.json"
    truncated.write_bytes((tmp_path / "mlp.json").read_bytes()[:-10])
    versioned = tmp_path / "v99.json"
    doc = json.loads((tmp_path / "clf.json").read_text())
    doc["format_version"] = 99
    versioned.write_text(json.dumps(doc))
    gan_doc = json.loads((tmp_path / "gan" / "gan.json").read_text())
    gan_doc["format_version"] = 99
    (tmp_path / "gan" / "gan.json").write_text(json.dumps(gan_doc))
    for loader, path in ((load_checkpoint, truncated), (load_checkpoint, versioned), (load_gan, tmp_path / "gan")):
        try:
            loader(path)
        except CheckpointError:
            rejected += 1

    ok = delta <= 1e-9 and identical and rejected == 3
    criterion(10, "determinism and persistence", ok,
              f"rerun max metric delta {delta:.1e}; 100-probe round trips bit-identical: {identical}; "
              f"{rejected}/3 corrupt or versioned files rejected")
    assert ok
