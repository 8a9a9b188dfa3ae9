"""Acceptance gate: nine behavioral criteria, one printed verdict each.

Run with `pytest tests/test_acceptance.py -s` to see the verdict lines;
the end-to-end criteria (7-9) train five small models twice at two noise
levels and take a few minutes.
"""

import math
import time

import numpy as np
import pytest
import threadpoolctl

from ssmcyto.blocks import VARIANTS, BlockConfig, block_forward, init_block
from ssmcyto.data import (
    AugmentParams,
    balance_dataset,
    balance_plan,
    compute_class_weights,
    load_image,
    load_manifest,
    preprocess,
    stratified_split,
)
from ssmcyto.ensemble import (
    EnsembleSpec,
    ensemble_predict,
    leakage_check,
    load_bases,
    partition_holdout,
    train_meta,
)
from ssmcyto.metrics import confusion_matrix, weighted_metrics
from ssmcyto.model import ModelConfig
from ssmcyto.ssm import DiscreteSSM, scan_parallel, scan_sequential
from ssmcyto.synth import generate_dataset
from ssmcyto.tensor import (
    Tensor,
    concat,
    convolve,
    grad_check,
    layer_norm,
    log_softmax,
    silu,
    softmax,
)
from ssmcyto.train import (
    TrainConfig,
    params_from_checkpoint,
    predict_classes,
    save_checkpoint,
    train_model,
)

ENSEMBLED = ("vim", "vmamba_ss2d", "mambavision", "medmamba", "localmamba")


def _verdict(num: int, title: str, ok: bool, detail: str):
    print(f"criterion {num} ({title}): {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {num} ({title}): {detail}"


# -- 1: scan equivalence ------------------------------------------------------


def test_criterion_1_scan_equivalence():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    worst = 0.0
    for i in range(200):
        L = int(rng.integers(1, 257))
        D = int(rng.integers(1, 17))
        N = int(rng.integers(1, 17))
        disc = DiscreteSSM(
            A_bar=Tensor(rng.uniform(0.05, 0.999, (L, D, N))),
            B_bar=Tensor(rng.standard_normal((L, D, N))),
        )
        x = Tensor(rng.standard_normal((L, D)))
        c = Tensor(rng.standard_normal((L, N)))
        d = Tensor(rng.standard_normal(D))
        h0 = Tensor(rng.standard_normal((D, N))) if i % 2 else None
        y_par, h_par = scan_parallel(disc, x, c, d, h0=h0)
        y_seq, h_seq = scan_sequential(disc, x, c, d, h0=h0)
        worst = max(
            worst,
            float(np.max(np.abs(y_par.data - y_seq.data) / (np.abs(y_seq.data) + 1e-8))),
            float(np.max(np.abs(h_par.data - h_seq.data) / (np.abs(h_seq.data) + 1e-8))),
        )
    elapsed = time.perf_counter() - start
    _verdict(
        1, "scan equivalence",
        worst < 1e-9 and elapsed < 30,
        f"worst rel err {worst:.2e} over 200 instances in {elapsed:.1f}s",
    )


# -- 2: gradient suite --------------------------------------------------------


def test_criterion_2_gradient_suite():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    w = Tensor(rng.standard_normal((6, 5)))
    gamma = Tensor(rng.uniform(0.5, 1.5, 6))
    beta = Tensor(rng.standard_normal(6))
    other = Tensor(rng.standard_normal((4, 6)))
    probe = Tensor(rng.standard_normal((4, 6)))
    mat_probe = Tensor(rng.standard_normal((4, 5)))

    primitives = {
        "add": lambda t: ((t + other) * probe).sum(),
        "sub": lambda t: ((t - other) * probe).sum(),
        "mul": lambda t: ((t * other) * probe).sum(),
        "div": lambda t: ((t / (other * other + 1.0)) * probe).sum(),
        "neg": lambda t: ((-t) * probe).sum(),
        "pow": lambda t: ((t ** 3) * probe).sum(),
        "exp": lambda t: ((t * 0.3).exp() * probe).sum(),
        "log": lambda t: ((t * t + 0.5).log() * probe).sum(),
        "sigmoid": lambda t: (t.sigmoid() * probe).sum(),
        "softplus": lambda t: (t.softplus() * probe).sum(),
        "silu": lambda t: (silu(t) * probe).sum(),
        "sum": lambda t: (t.sum(axis=0) * probe.narrow(0, 0, 1).reshape(6)).sum(),
        "mean": lambda t: (t.mean(axis=1) * mat_probe.narrow(1, 0, 1).reshape(4)).sum(),
        "matmul": lambda t: ((t @ w) * mat_probe).sum(),
        "reshape": lambda t: (t.reshape(2, 12) * probe.reshape(2, 12)).sum(),
        "swapaxes": lambda t: (t.swapaxes(0, 1) * probe.swapaxes(0, 1)).sum(),
        "narrow": lambda t: (t.narrow(1, 1, 3) * probe.narrow(1, 1, 3)).sum(),
        "pad": lambda t: (t.pad(((1, 0), (0, 2))) * 1.0).sum(),
        "flip": lambda t: (t.flip(0) * probe).sum(),
        "index_select": lambda t: (
            t.index_select(np.array([0, 2, 2, 1]), axis=0) * 1.0
        ).sum(),
        "concat": lambda t: (concat([t, other], axis=0) * 1.0).sum(),
        "softmax": lambda t: (softmax(t) * probe).sum(),
        "log_softmax": lambda t: (log_softmax(t) * probe).sum(),
        "layer_norm": lambda t: (layer_norm(t, gamma, beta) * probe).sum(),
    }
    worst_prim, worst_name = 0.0, ""
    x0 = rng.standard_normal((4, 6))
    for name, f in primitives.items():
        report = grad_check(f, Tensor(x0.copy()), tol=1e-4)
        if report.max_rel_err > worst_prim:
            worst_prim, worst_name = report.max_rel_err, name
        assert report.ok(1e-4), f"{name}: rel err {report.max_rel_err:.2e}"

    conv_cases = {
        "causal1d": ((4, 10), (4, 4, 3), 1),
        "standard1d": ((4, 10), (4, 4, 3), 1),
        "depthwise1d": ((4, 10), (4, 1, 3), 1),
        "standard2d": ((3, 5, 5), (4, 3, 3, 3), 1),
        "grouped2d": ((4, 5, 5), (4, 2, 3, 3), 2),
    }
    for mode, (xs, ws, groups) in conv_cases.items():
        wt = Tensor(rng.standard_normal(ws) * 0.3)
        f = lambda t: (convolve(t, wt, mode=mode, groups=groups) * 1.0).sum()
        report = grad_check(f, Tensor(rng.standard_normal(xs)), tol=1e-4)
        if report.max_rel_err > worst_prim:
            worst_prim, worst_name = report.max_rel_err, f"conv:{mode}"
        assert report.ok(1e-4), f"conv {mode}: rel err {report.max_rel_err:.2e}"

    worst_block = 0.0
    for variant in VARIANTS:
        cfg = BlockConfig(variant=variant, d_model=8, n_state=4)
        params = init_block(cfg, np.random.default_rng(2))
        bp = Tensor(np.random.default_rng(3).standard_normal((16, 8)))
        f = lambda t: (block_forward(t, cfg, params, grid=(4, 4)) * bp).sum()
        report = grad_check(f, Tensor(rng.standard_normal((16, 8))), tol=1e-3)
        worst_block = max(worst_block, report.max_rel_err)
        assert report.ok(1e-3), f"{variant}: rel err {report.max_rel_err:.2e}"

    elapsed = time.perf_counter() - start
    _verdict(
        2, "gradient suite",
        elapsed < 300,
        f"{len(primitives) + len(conv_cases)} primitives (worst {worst_prim:.2e} at "
        f"{worst_name}), {len(VARIANTS)} blocks (worst {worst_block:.2e}) in {elapsed:.1f}s",
    )


# -- 3: traversal suite -------------------------------------------------------


def test_criterion_3_traversal_suite():
    from ssmcyto.traversal import (
        cross_merge,
        deserialize_patches,
        local_directions,
        make_traversal,
        serialize_patches,
        ss2d_directions,
    )

    rng = np.random.default_rng(2)
    n_perms = n_merges = 0
    for h in range(1, 9):
        for w in range(1, 9):
            ts = [
                make_traversal(kind, h, w, reverse=rev)
                for kind in ("row_major", "column_major")
                for rev in (False, True)
            ]
            for win in range(1, min(h, w) + 1):
                if h % win == 0 and w % win == 0:
                    ts += [
                        make_traversal("local_window", h, w, reverse=rev, window=win)
                        for rev in (False, True)
                    ]
            for t in ts:
                assert sorted(t.order) == list(range(h * w)), (h, w, t.kind)
                assert np.array_equal(t.order[t.inverse], np.arange(h * w))
                x = Tensor(rng.standard_normal((h * w, 3)))
                back = deserialize_patches(serialize_patches(x, t), t)
                np.testing.assert_array_equal(back.data, x.data)
                n_perms += 1
            dir_sets = [ss2d_directions(h, w)]
            if h % 2 == 0 and w % 2 == 0:
                dir_sets.append(local_directions(h, w, window=2))
            for dirs in dir_sets:
                seqs = [Tensor(rng.standard_normal((h * w, 3))) for _ in dirs]
                merged = cross_merge(seqs, dirs)
                oracle = np.zeros((h * w, 3))
                for s, t in zip(seqs, dirs):
                    for i, patch in enumerate(t.order):
                        oracle[patch] += s.data[i]
                np.testing.assert_array_equal(merged.data, oracle)
                n_merges += 1
    _verdict(
        3, "traversal suite", True,
        f"{n_perms} exact permutation round-trips, {n_merges} cross-merge oracles",
    )


# -- 4: imbalance mechanics ---------------------------------------------------


def test_criterion_4_imbalance_mechanics(tmp_path):
    original = [1985, 1253, 567, 514, 157, 156, 93, 83]
    expected_plan = [0, 0, 0, 0, 343, 344, 407, 417]
    generate_dataset(tmp_path / "src", original, noise=0.05, seed=0, size=8)
    m = load_manifest(tmp_path / "src")
    np.testing.assert_array_equal(m.counts("train"), original)

    plan = balance_plan(m, 500)
    # the reference tallies behind this distribution are internally
    # inconsistent for the fourth class (a stated top-up that cannot
    # reach the stated total from 514), so the arithmetic rule
    # max(0, target - n) is what is asserted, for every class
    np.testing.assert_array_equal(plan, expected_plan)

    balanced = balance_dataset(m, 500, AugmentParams(), seed=0, out_dir=tmp_path / "aug")
    np.testing.assert_array_equal(
        balanced.counts("train"), np.maximum(original, 500)
    )
    added = balanced.counts("train") - np.asarray(original)
    np.testing.assert_array_equal(added, expected_plan)

    for counts in (original, [10, 20, 30], [5, 5, 5, 5]):
        cw = compute_class_weights(counts)
        products = np.asarray(counts) * cw.w
        target = sum(counts) / len(counts)
        assert np.max(np.abs(products - target)) < 1e-9
    _verdict(
        4, "imbalance mechanics", True,
        f"augmented counts {added.tolist()}, n_c*w_c uniform to 1e-9",
    )


# -- 5: metric identity -------------------------------------------------------


def test_criterion_5_metric_identity():
    rng = np.random.default_rng(3)
    worst_identity = worst_oracle = 0.0
    for _ in range(1000):
        k = int(rng.integers(2, 7))
        n = int(rng.integers(1, 200))
        t = rng.integers(0, k, n)
        p = rng.integers(0, k, n)
        r = weighted_metrics(confusion_matrix(t, p, k))
        worst_identity = max(worst_identity, abs(r.weighted_sensitivity - r.accuracy))

        tp, pred_ct, true_ct = [0] * k, [0] * k, [0] * k
        for a, b in zip(t, p):
            true_ct[a] += 1
            pred_ct[b] += 1
            if a == b:
                tp[a] += 1
        prec = [tp[c] / pred_ct[c] if pred_ct[c] else 0.0 for c in range(k)]
        rec = [tp[c] / true_ct[c] if true_ct[c] else 0.0 for c in range(k)]
        f1 = [2 * a * b / (a + b) if a + b else 0.0 for a, b in zip(prec, rec)]
        weighted = lambda xs: sum(true_ct[c] / n * xs[c] for c in range(k))
        worst_oracle = max(
            worst_oracle,
            abs(r.accuracy - sum(tp) / n),
            abs(r.weighted_precision - weighted(prec)),
            abs(r.weighted_sensitivity - weighted(rec)),
            abs(r.weighted_f1 - weighted(f1)),
            float(np.max(np.abs(r.precision - prec))),
            float(np.max(np.abs(r.recall - rec))),
            float(np.max(np.abs(r.f1 - f1))),
        )
    _verdict(
        5, "metric identity",
        worst_identity < 1e-12 and worst_oracle < 1e-12,
        f"1000 matrices: identity gap {worst_identity:.2e}, oracle gap {worst_oracle:.2e}",
    )


# -- 6: weighted-loss behavior ------------------------------------------------


def test_criterion_6_weighted_loss_behavior(tmp_path):
    # 20:1 train imbalance, balanced test set, equal epochs, same init
    generate_dataset(tmp_path, [150, 36], noise=0.35, seed=5, size=16)
    m = load_manifest(tmp_path)
    seen = {0: 0, 1: 0}
    cap = {0: 120, 1: 6}
    for i, s in enumerate(m.samples):
        split = "train" if seen[s.label] < cap[s.label] else "test"
        seen[s.label] += 1
        m.samples[i] = s._replace(split=split)
    np.testing.assert_array_equal(m.counts("train"), [120, 6])

    cfg = ModelConfig(
        variant="vanilla", image_size=16, patch_size=4, stage_depths=(1, 1),
        stage_dims=(8, 16), n_classes=2, n_state=4, seed=3,
    )
    test = m.subset("test")
    y = np.array([s.label for s in test])

    def minority_recall(use_weights: bool) -> float:
        tc = TrainConfig(
            epochs=6, batch_size=32, lr=3e-3, seed=7, use_class_weights=use_weights
        )
        ckpt, _ = train_model(m, cfg, tc)
        params = params_from_checkpoint(ckpt)
        x = np.stack(
            [preprocess(load_image(s.path), 16, ckpt.header["stats"]).data for s in test]
        )
        pred = predict_classes(x, cfg, params)
        return float(((pred == 1) & (y == 1)).sum() / (y == 1).sum())

    weighted = minority_recall(True)
    unweighted = minority_recall(False)
    _verdict(
        6, "weighted-loss behavior",
        weighted > unweighted,
        f"minority recall {weighted:.3f} weighted vs {unweighted:.3f} unweighted",
    )


# -- 7-9: end-to-end pipeline -------------------------------------------------


def _pipeline(root, noise: float, seed: int = 0) -> dict:
    """Synth 800/200 at 32px, five bases, 5-epoch meta on a 20% holdout."""
    generate_dataset(root / "data", 125, noise=noise, seed=seed, size=32)
    m = load_manifest(root / "data")
    m = stratified_split(m, (4, 1), seed=seed)
    m = partition_holdout(m, 0.2, seed=seed)
    test = m.subset("test")
    y = np.array([s.label for s in test])

    paths, base_accs, ckpt_bytes = [], {}, {}
    stats = None
    for variant in ENSEMBLED:
        cfg = ModelConfig(
            variant=variant, image_size=32, patch_size=4, stage_depths=(1, 1),
            stage_dims=(8, 16), n_classes=8, n_state=4, seed=seed + 1,
        )
        tc = TrainConfig(epochs=6, batch_size=32, lr=3e-3, seed=seed + 1)
        ckpt, _ = train_model(m, cfg, tc)
        path = root / f"{variant}.ckpt"
        save_checkpoint(ckpt, path)
        paths.append(str(path))
        ckpt_bytes[variant] = path.read_bytes()
        stats = ckpt.header["stats"]
        params = params_from_checkpoint(ckpt)
        x = np.stack([preprocess(load_image(s.path), 32, stats).data for s in test])
        base_accs[variant] = float((predict_classes(x, cfg, params) == y).mean())

    spec = EnsembleSpec(base_checkpoints=paths, n_classes=8, seed=seed)
    meta, info = train_meta(spec, m, epochs=5)
    from ssmcyto.ensemble import save_ensemble

    save_ensemble(spec, meta, root / "ens.json", root / "ens.meta.ckpt")
    ckpt_bytes["meta"] = (root / "ens.meta.ckpt").read_bytes()

    bases = load_bases(spec)
    x = np.stack([preprocess(load_image(s.path), 32, stats).data for s in test])
    preds = [
        ensemble_predict(bases, meta, x[a:a + 64])[1] for a in range(0, len(x), 64)
    ]
    ens_acc = float((np.concatenate(preds) == y).mean())
    return {
        "manifest": m,
        "base_accs": base_accs,
        "ens_acc": ens_acc,
        "holdout_acc": info["history"][-1]["holdout_accuracy"],
        "ckpt_bytes": ckpt_bytes,
    }


@pytest.fixture(scope="session")
def e2e(tmp_path_factory):
    with threadpoolctl.threadpool_limits(1):
        main = _pipeline(tmp_path_factory.mktemp("e2e_main"), noise=0.1)
        noisy = _pipeline(tmp_path_factory.mktemp("e2e_noisy"), noise=0.6)
    return {"main": main, "noisy": noisy}


def test_criterion_7_end_to_end(e2e):
    main, noisy = e2e["main"], e2e["noisy"]
    accs = main["base_accs"]
    ok_a = all(a >= 0.90 for a in accs.values())
    ok_b = main["ens_acc"] >= max(accs.values()) - 0.01
    noisy_mean = float(np.mean(list(noisy["base_accs"].values())))
    ok_c = noisy["ens_acc"] >= noisy_mean
    detail = (
        f"bases {[round(a, 3) for a in accs.values()]}, ensemble {main['ens_acc']:.3f}; "
        f"high-noise ensemble {noisy['ens_acc']:.3f} vs mean {noisy_mean:.3f}"
    )
    _verdict(7, "end-to-end toy reproduction", ok_a and ok_b and ok_c, detail)


def test_criterion_8_leakage_guard(e2e):
    for run in (e2e["main"], e2e["noisy"]):
        m = run["manifest"]
        leakage_check(m)
        train_paths = {s.path for s in m.samples if s.split == "train"}
        holdout_paths = {s.path for s in m.samples if s.split == "holdout"}
        assert holdout_paths, "holdout is empty"
        assert not train_paths & holdout_paths
    n_train = sum(1 for s in e2e["main"]["manifest"].samples if s.split == "train")
    n_hold = sum(1 for s in e2e["main"]["manifest"].samples if s.split == "holdout")
    _verdict(
        8, "leakage guard", True,
        f"{n_train} base-training paths disjoint from {n_hold} meta-holdout paths",
    )


def test_criterion_9_determinism(e2e, tmp_path_factory):
    with threadpoolctl.threadpool_limits(1):
        again = {
            "main": _pipeline(tmp_path_factory.mktemp("rerun_main"), noise=0.1),
            "noisy": _pipeline(tmp_path_factory.mktemp("rerun_noisy"), noise=0.6),
        }
    mismatches = []
    for key in ("main", "noisy"):
        a, b = e2e[key], again[key]
        if a["base_accs"] != b["base_accs"] or a["ens_acc"] != b["ens_acc"] \
                or a["holdout_acc"] != b["holdout_acc"]:
            mismatches.append(f"{key}: accuracies differ")
        for name in a["ckpt_bytes"]:
            if a["ckpt_bytes"][name] != b["ckpt_bytes"][name]:
                mismatches.append(f"{key}: checkpoint {name} not bitwise equal")
    n_ckpts = sum(len(e2e[k]["ckpt_bytes"]) for k in ("main", "noisy"))
    _verdict(
        9, "determinism",
        not mismatches,
        "; ".join(mismatches) if mismatches
        else f"both reruns reproduced every accuracy and all {n_ckpts} checkpoints bitwise",
    )
