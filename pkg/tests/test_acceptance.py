"""Acceptance criteria. Each test prints one ``CRITERION n: PASS|FAIL`` line.

Multi-seed training experiments are marked ``slow``; they still run in the
default ``pytest`` invocation.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from nestcon.encoders import TabularEncoder
from nestcon.evaluation import (
    binary_auc,
    build_features,
    compute_metrics,
    knn_classify,
    linear_probe,
    metrics_from_ranks,
    write_report,
)
from nestcon.importance import dataset_importance, importance_from_attention
from nestcon.iohelpers import directory_digest
from nestcon.model import DatasetArrays, ModelConfig, init_model, save_checkpoint
from nestcon.nested_loss import (
    FusionParams,
    LossConfig,
    PatientBatchTensors,
    flat_loss,
    info_nce_symmetric,
    inner_lesion_loss,
    outer_patient_loss,
    total_loss,
)
from nestcon.retrieval import RetrievalPool, nearest_rank_percentile, recall_at_k, similarity_diagnostics
from nestcon.sampling import SamplerConfig, sample_epoch, select_lesions
from nestcon.synthdata import GenConfig, generate, subsample_labels
from nestcon.trainer import TrainConfig, batch_gradients, continual_defaults, continual_pretrain, pretrain

from conftest import finite_difference, max_rel_error

SEEDS = range(5)
HELD_OUT_PATIENTS = 110  # >= 880 lesions at 8-12 per patient; checked >= 1000 below
# shifted target domain for continual pre-training: rotated image projection,
# different metadata attributes, half the patients
TARGET = {"image_shift": 0.5, "lesion_meta_dim": 6, "patient_meta_dim": 4}


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} | {detail}")


def held_out(cfg, offset=1000, patients=HELD_OUT_PATIENTS):
    """Fresh patients drawn from the same population (shared projections)."""
    return generate(replace(cfg, seed=cfg.seed + offset, projection_seed=cfg.seed, num_patients=patients))


@pytest.fixture(scope="module")
def pretrained():
    """Default-config nested and flat models for every seed, trained once."""
    out = {}
    for seed in SEEDS:
        cfg = GenConfig(seed=seed)
        ds = generate(cfg)
        nested, _ = pretrain(ds, seed, TrainConfig(seed=seed, model=ModelConfig("nested")))
        flat, _ = pretrain(ds, seed, TrainConfig(seed=seed, model=ModelConfig("flat")))
        out[seed] = {"cfg": cfg, "train": ds, "held": held_out(cfg), "nested": nested, "flat": flat}
    return out


# ---------------------------------------------------------------------------
# 1. gradient exactness


def _loss_instances(rng):
    """Standalone loss functions on random embeddings: (name, f, [(grad, array)])."""
    out = []
    for i in range(12):
        tau = (0.1, 0.5, 1.0)[i % 3]
        D = int(rng.integers(2, 9))
        B = int(rng.integers(2, 7))
        counts = rng.integers(1, 7, size=B)
        batch = PatientBatchTensors([rng.standard_normal((c, D)) for c in counts],
                                    [rng.standard_normal((c, D)) for c in counts], rng.standard_normal((B, D)))
        fusion = FusionParams(rng.standard_normal((2 * D, D)) / math.sqrt(2 * D), rng.standard_normal(D) * 0.1)
        lam = (0.9, 0.0, 1.0, 0.5)[i % 4]
        cfg = LossConfig(tau=tau, lam=lam)
        kind = i % 4
        if kind == 0:
            W, H = batch.W[0], batch.H[0]
            if len(W) < 2:
                W, H = rng.standard_normal((3, D)), rng.standard_normal((3, D))
            _, dW, dH = info_nce_symmetric(W, H, tau)
            f = lambda W=W, H=H, tau=tau: info_nce_symmetric(W, H, tau)[0]
            out.append(("info_nce", f, [(dW, W), (dH, H)]))
        elif kind == 1:
            _, dW, dH = inner_lesion_loss(batch, tau)
            f = lambda b=batch, tau=tau: inner_lesion_loss(b, tau)[0]
            out.append(("inner", f, list(zip(dW, batch.W)) + list(zip(dH, batch.H))))
        elif kind == 2:
            Z, X = rng.standard_normal((B, D)), batch.X
            _, dZ, dX = outer_patient_loss(Z, X, tau)
            out.append(("outer", lambda Z=Z, X=X, tau=tau: outer_patient_loss(Z, X, tau)[0], [(dZ, Z), (dX, X)]))
        else:
            r = total_loss(batch, cfg, fusion)
            f = lambda b=batch, c=cfg, fu=fusion: total_loss(b, c, fu).total
            pairs = list(zip(r.dW, batch.W)) + list(zip(r.dH, batch.H))
            pairs += [(r.dX, batch.X), (r.dweight, fusion.weight), (r.dbias, fusion.bias)]
            out.append((f"total(lam={lam})", f, pairs))
    W, G = rng.standard_normal((6, 5)), rng.standard_normal((6, 5))
    _, dW, dG = flat_loss(W, G, 0.1)
    out.append(("flat", lambda: flat_loss(W, G, 0.1)[0], [(dW, W), (dG, G)]))
    return out


def _model_instances():
    """End-to-end encoders + loss on tiny datasets: nested/flat x attention on/off."""
    out = []
    for i in range(12):
        arch = "nested" if i % 2 == 0 else "flat"
        attention = i % 4 < 2
        ds = generate(GenConfig(num_patients=4, lesions_per_patient_range=(1, 4), image_dim=5,
                                patient_meta_dim=3, lesion_meta_dim=3, latent_dim=3, missing_rate=0.2,
                                seed=100 + i))
        cfg = ModelConfig(arch, embed_dim=int(4 + i % 5), token_dim=3, hidden=(6, 5))
        state = init_model(ds, cfg, i)
        for enc in state.encoders().values():
            if isinstance(enc, TabularEncoder):
                enc.attention = attention
        loss_cfg = LossConfig(tau=(0.1, 0.3)[i % 2], lam=(0.9, 0.5, 1.0)[i % 3])
        data = DatasetArrays(ds)
        batch = sample_epoch(ds, SamplerConfig(batch_patients=4, max_lesions=6, seed=i), 1)[0]
        _, _, _, grads = batch_gradients(state, data, batch, loss_cfg)
        n_params = sum(a.size for _, a in state.named_arrays())
        f = lambda s=state, d=data, b=batch, c=loss_cfg: batch_gradients(s, d, b, c)[2]
        pairs = [(grads[k], a) for k, a in state.named_arrays()]
        out.append((f"{arch}/attn={attention}/params={n_params}", f, pairs, n_params))
    return out


def test_criterion_1_gradient_exactness(capsys):
    start = time.time()
    rng = np.random.default_rng(2024)
    worst, names = 0.0, []
    models = _model_instances()
    assert max(m[3] for m in models) <= 2000
    for name, f, pairs in _loss_instances(rng) + [m[:3] for m in models]:
        for analytic, arr in pairs:
            worst = max(worst, max_rel_error(analytic, finite_difference(f, arr, h=1e-5)))
        names.append(name)
    elapsed = time.time() - start
    ok = len(names) >= 20 and worst <= 1e-5 and elapsed < 60
    report(capsys, 1, ok, f"{len(names)} instances, max rel error {worst:.2e} (<= 1e-5), {elapsed:.1f}s (< 60s)")
    assert ok


# ---------------------------------------------------------------------------
# 2. loss identities


def test_criterion_2_loss_identities(capsys):
    rng = np.random.default_rng(7)
    checks = {}
    bit_exact = True
    for _ in range(20):
        D, B = 4, 3
        counts = rng.integers(1, 6, size=B)
        batch = PatientBatchTensors([rng.standard_normal((c, D)) for c in counts],
                                    [rng.standard_normal((c, D)) for c in counts], rng.standard_normal((B, D)))
        fu = FusionParams(rng.standard_normal((2 * D, D)), rng.standard_normal(D))
        r1 = total_loss(batch, LossConfig(lam=1.0), fu)
        r0 = total_loss(batch, LossConfig(lam=0.0), fu)
        bit_exact &= r1.total == r1.inner == inner_lesion_loss(batch, 0.1)[0]
        bit_exact &= r0.total == r0.outer
    checks["lambda extremes bit-exact"] = bool(bit_exact)

    single = PatientBatchTensors([rng.standard_normal((1, 4)) for _ in range(3)],
                                 [rng.standard_normal((1, 4)) for _ in range(3)], rng.standard_normal((3, 4)))
    checks["n=1 inner loss is 0"] = inner_lesion_loss(single, 0.1)[0] == 0.0

    worst = 0.0
    for _ in range(50):
        W, H = rng.standard_normal((5, 6)), rng.standard_normal((5, 6))
        base = info_nce_symmetric(W, H, 0.1)[0]
        i = rng.integers(5)
        W2, H2 = W.copy(), H.copy()
        W2[i] *= rng.uniform(1e-3, 1e3)
        H2[rng.integers(5)] *= rng.uniform(1e-3, 1e3)
        worst = max(worst, abs(info_nce_symmetric(W2, H2, 0.1)[0] - base))
        batch = PatientBatchTensors([W[:3], W[3:]], [H[:3], H[3:]], rng.standard_normal((2, 6)))
        fu = FusionParams(rng.standard_normal((12, 6)), rng.standard_normal(6))
        scaled = PatientBatchTensors([W2[:3], W2[3:]], [H2[:3], H2[3:]], batch.X * rng.uniform(0.1, 10))
        worst = max(worst, abs(inner_lesion_loss(scaled, 0.1)[0] - inner_lesion_loss(batch, 0.1)[0]))
        Z = rng.standard_normal((4, 6))
        worst = max(worst, abs(outer_patient_loss(Z * 7.5, Z[::-1], 0.1)[0] - outer_patient_loss(Z, Z[::-1], 0.1)[0]))
    checks["rescaling changes loss <= 1e-10"] = worst <= 1e-10

    closed = math.log(1.0 + math.exp(-1.0))
    Q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    val = info_nce_symmetric(Q[:2], Q[:2], 1.0)[0]
    checks["orthonormal n=2 = ln(1+e^-1)"] = abs(val - closed) <= 1e-12

    ok = all(checks.values())
    report(capsys, 2, ok, "; ".join(f"{k}: {v}" for k, v in checks.items()) + f" (max rescale delta {worst:.1e})")
    assert ok


# ---------------------------------------------------------------------------
# 3. and 4. embedding separation and retrieval on held-out patients


@pytest.mark.slow
def test_criterion_3_embedding_separation(pretrained, capsys):
    rows, passed = [], 0
    for seed in SEEDS:
        run = pretrained[seed]
        emb = run["nested"].embed(run["held"])
        d = similarity_diagnostics(emb["W"], emb["H"], np.random.default_rng(seed))
        med_m = nearest_rank_percentile(d.matched, 50)
        med_n = nearest_rank_percentile(d.non_matched, 50)
        good = med_m >= 0.6 and med_n <= 0.2
        passed += good
        rows.append(f"s{seed}: {med_m:.3f}/{med_n:.3f}")
    ok = passed >= 4
    report(capsys, 3, ok, f"{passed}/5 seeds with matched median >= 0.6 and non-matched <= 0.2 [{', '.join(rows)}]")
    assert ok


@pytest.mark.slow
def test_criterion_4_retrieval_structure(pretrained, capsys):
    rows, passed = [], 0
    for seed in SEEDS:
        run = pretrained[seed]
        held = run["held"]
        assert held.num_lesions >= 1000
        emb = run["nested"].embed(held)
        ids = [les.lesion_id for _, les in held.lesions()]
        r = recall_at_k(emb["W"], RetrievalPool(emb["H"], ids, "lesion"), ids, ks=(1, 100))
        chance = 100.0 / len(ids)
        good = r[1] >= 20 * chance and r[100] >= 90.0
        passed += good
        rows.append(f"s{seed}: R@1 {r[1]:.1f}% ({r[1] / chance:.0f}x), R@100 {r[100]:.1f}%")
    ok = passed >= 4
    report(capsys, 4, ok, f"{passed}/5 seeds with R@1 >= 20x chance and R@100 >= 90% [{'; '.join(rows)}]")
    assert ok


# ---------------------------------------------------------------------------
# 5. nested beats flat


@pytest.mark.slow
def test_criterion_5_nested_beats_flat(pretrained, capsys):
    rows, wins = [], 0
    for seed in SEEDS:
        run = pretrained[seed]
        bas = {}
        for arch, flags in (("nested", ("image", "lesion", "patient")), ("flat", ("image", "lesion"))):
            model = run[arch]
            _, m = linear_probe(build_features(model, run["train"], flags), build_features(model, run["held"], flags))
            bas[arch] = m.balanced_accuracy
        wins += bas["nested"] > bas["flat"]
        rows.append(f"s{seed}: {bas['nested']:.2f} vs {bas['flat']:.2f}")
    ok = wins >= 4
    report(capsys, 5, ok, f"nested > flat probe BA in {wins}/5 seeds [{'; '.join(rows)}]")
    assert ok


# ---------------------------------------------------------------------------
# 6. continual pre-training


@pytest.mark.slow
def test_criterion_6_continual(pretrained, capsys):
    rows, wins, frozen = [], 0, True
    for seed in SEEDS:
        run = pretrained[seed]
        source = run["nested"]
        # same latent population as the source, shifted image domain, new metadata attributes
        tcfg = replace(run["cfg"], seed=seed + 3000, projection_seed=seed,
                       num_patients=run["cfg"].num_patients // 2, **TARGET)
        target = generate(tcfg)
        theld = generate(replace(tcfg, seed=seed + 4000, num_patients=60))
        before = source.body_bytes()
        adapted, _ = continual_pretrain(source, target, continual_defaults(seed=seed))
        frozen &= adapted.body_bytes() == before == source.body_bytes()
        # unadapted baseline: the source image encoder's features on the target
        _, pre = linear_probe(build_features(source, target, ("image",)), build_features(source, theld, ("image",)))
        _, post = linear_probe(build_features(adapted, target), build_features(adapted, theld))
        wins += post.balanced_accuracy > pre.balanced_accuracy
        rows.append(f"s{seed}: {post.balanced_accuracy:.2f} vs {pre.balanced_accuracy:.2f}")
    ok = frozen and wins >= 4
    report(capsys, 6, ok, f"body bytes identical: {frozen}; adapted > unadapted probe BA in {wins}/5 seeds "
                          f"[{'; '.join(rows)}]")
    assert ok


# ---------------------------------------------------------------------------
# 7. metric oracles


def _auc_oracle(y, s):
    pos, neg = s[y == 1], s[y == 0]
    total = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return total / (len(pos) * len(neg))


def _ba_f1_oracle(y, pred, classes):
    recalls = []
    for c in classes:
        idx = [i for i in range(len(y)) if y[i] == c]
        recalls.append(sum(pred[i] == c for i in idx) / len(idx))
    tp = sum(1 for a, b in zip(y, pred) if a == 1 and b == 1)
    fp = sum(1 for a, b in zip(y, pred) if a == 0 and b == 1)
    fn = sum(1 for a, b in zip(y, pred) if a == 1 and b == 0)
    f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0
    return 100.0 * sum(recalls) / len(recalls), f1


def _rank_oracle(ranks, ks):
    n = len(ranks)
    rec = {k: 100.0 * sum(1 for r in ranks if r <= k) / n for k in ks}
    ndcg = {k: sum(1.0 / math.log2(1 + r) for r in ranks if r <= k) / n for k in ks}
    return rec, ndcg, sum(1.0 / r for r in ranks) / n


def _knn_oracle(Xtr, ytr, Xq, k, C):
    preds = []
    for q in Xq:
        d = [(1.0 - float(np.dot(q, x) / (np.linalg.norm(q) * np.linalg.norm(x))), i) for i, x in enumerate(Xtr)]
        d.sort()
        top = d[:k]
        votes = {c: [0, 0.0] for c in range(C)}
        for dist, i in top:
            votes[ytr[i]][0] += 1
            votes[ytr[i]][1] += dist
        preds.append(min(range(C), key=lambda c: (-votes[c][0], votes[c][1], c)))
    return preds


def test_criterion_7_metric_oracles(capsys):
    from nestcon.evaluation import FeatureSet
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(4, 501))
        y = rng.integers(0, 2, size=n)
        y[:2] = [0, 1]
        s = rng.random(n).round(2)  # coarse scores exercise ties
        pred = rng.integers(0, 2, size=n)
        m = compute_metrics(y, pred, s, 2)
        ba, f1 = _ba_f1_oracle(list(y), list(pred), [0, 1])
        worst = max(worst, abs(binary_auc(y, s) - _auc_oracle(y, s)), abs(m.auc - _auc_oracle(y, s)),
                    abs(m.balanced_accuracy - ba), abs(m.f1 - f1))
        ranks = rng.integers(1, n + 1, size=int(rng.integers(1, 60)))
        ks = (1, 5, 10, 100)
        rep = metrics_from_ranks(ranks, ks)
        rec, ndcg, mAP = _rank_oracle(list(ranks), ks)
        worst = max(worst, abs(rep.mAP - mAP), *(abs(rep.recall[k] - rec[k]) for k in ks),
                    *(abs(rep.ndcg[k] - ndcg[k]) for k in ks))
    knn_mismatch = 0
    for _ in range(100):
        n_tr, n_q = int(rng.integers(3, 51)), int(rng.integers(1, 20))
        C = int(rng.integers(2, 4))
        Xtr = rng.integers(-2, 3, size=(n_tr, 3)).astype(float) + 0.01  # coarse grid forces ties
        ytr = rng.integers(0, C, size=n_tr)
        Xq = rng.standard_normal((n_q, 3))
        k = int(rng.integers(1, n_tr + 1))
        tr = FeatureSet(Xtr, ytr, np.ones(n_tr, bool), num_classes=C)
        ev = FeatureSet(Xq, rng.integers(0, C, size=n_q), np.ones(n_q, bool), num_classes=C)
        pred, _ = knn_classify(tr, ev, k)
        knn_mismatch += list(pred) != _knn_oracle(Xtr, ytr, Xq, k, C)
    ok = worst <= 1e-12 and knn_mismatch == 0
    report(capsys, 7, ok, f"max |metric - oracle| {worst:.1e} over 100 instances (<= 1e-12); "
                          f"kNN mismatches {knn_mismatch}/100")
    assert ok


# ---------------------------------------------------------------------------
# 8. positive sampling


def test_criterion_8_positive_sampling(capsys):
    n_max = 8
    ds = generate(GenConfig(num_patients=40, lesions_per_patient_range=(4, 20), image_dim=4, seed=8))
    cfg = SamplerConfig(batch_patients=4, max_lesions=n_max, seed=8)
    omissions = audited = eligible = 0
    epoch = 0
    while audited < 10_000:
        epoch += 1
        for batch in sample_epoch(ds, cfg, epoch):
            audited += 1
            for pi, sel in batch.entries:
                malignant = [i for i, les in enumerate(ds.patients[pi].lesions) if les.label == 1]
                if len(malignant) <= n_max:
                    eligible += 1
                    omissions += len(set(malignant) - set(sel))
    # uniform mode: each lesion is kept with probability N_max / n
    from types import SimpleNamespace
    rng = np.random.default_rng(8)
    n = 15
    patient = SimpleNamespace(lesions=[SimpleNamespace(label=int(i < 5)) for i in range(n)], num_lesions=n)
    counts = np.zeros(n)
    for _ in range(10_000):
        counts[list(select_lesions(patient, n_max, False, rng))] += 1
    dev = float(np.max(np.abs(counts / 10_000 - n_max / n)))
    ok = omissions == 0 and dev <= 0.02
    report(capsys, 8, ok, f"{omissions} malignant omissions over {audited} batches ({eligible} patient draws); "
                          f"uniform inclusion max deviation {dev:.4f} (<= 0.02)")
    assert ok


# ---------------------------------------------------------------------------
# 9. feature importance


@pytest.mark.slow
def test_criterion_9_feature_importance(capsys):
    uniform = max(float(np.max(np.abs(importance_from_attention(np.full((T, T), 1.0 / T)).importance - 1.0 / T)))
                  for T in (2, 5, 17))
    rng = np.random.default_rng(9)
    A = rng.random((40, 9, 9))
    A /= A.sum(axis=2, keepdims=True)
    sums = abs(importance_from_attention(A).importance.sum() - 1.0)
    hits, rows = 0, []
    for seed in SEEDS:
        # metadata is standardized, so the loading only shows through its signal-to-noise ratio;
        # the larger step lets attention move away from its near-uniform start
        cfg = GenConfig(seed=seed, informative_feature=0, meta_noise=1.0)
        model, _ = pretrain(generate(cfg), seed, TrainConfig(seed=seed, learning_rate=1e-3))
        rep = dataset_importance(model, held_out(cfg, patients=100), "lesion")
        top = rep.ranked()[0][0]
        hits += top == "les_c0"
        rows.append(f"s{seed}: top {top}")
    ok = uniform <= 1e-12 and sums <= 1e-12 and hits >= 4
    report(capsys, 9, ok, f"uniform error {uniform:.1e}; sum error {sums:.1e}; planted feature ranked first "
                          f"in {hits}/5 seeds [{', '.join(rows)}]")
    assert ok


# ---------------------------------------------------------------------------
# 10. determinism


def _pipeline(root):
    small = dict(num_patients=30, lesions_per_patient_range=(3, 6), image_dim=16)
    cfg = GenConfig(seed=42, **small)
    ds = generate(cfg)
    train_cfg = TrainConfig(epochs=5, seed=42, learning_rate=1e-3, model=ModelConfig(embed_dim=8, token_dim=4,
                                                                                       hidden=(16, 16)))
    state, _ = pretrain(ds, 42, train_cfg)
    save_checkpoint(state, root / "pretrain")
    tcfg = replace(cfg, seed=43, **TARGET)
    target = generate(tcfg)
    adapted, _ = continual_pretrain(state, target, continual_defaults(epochs=3, seed=42))
    save_checkpoint(adapted, root / "continual")
    train = subsample_labels(target, 0.5, 42)
    _, m = linear_probe(build_features(adapted, train), build_features(adapted, held_out(tcfg, patients=10)))
    write_report(root / "report.json", m.as_dict())
    return {name: directory_digest(root / name) for name in ("pretrain", "continual")} | \
        {"report": (root / "report.json").read_bytes()}


def test_criterion_10_determinism(tmp_path, capsys):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    ok = a == b
    report(capsys, 10, ok, f"pretrain/continual checkpoints and probe report byte-identical across two runs: {ok}")
    assert ok
