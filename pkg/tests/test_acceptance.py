"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 6 and 7 reuse the session-trained toy checkpoints from conftest.
"""
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

import oracles as O
from prism import clustering as C
from prism import trainer as Tr
from prism.experiments import aggregate_der, clustering_comparison, der_by_speaker_count, median_eer
from prism.losses import (
    LossHyperParams,
    am_softmax,
    diarization_loss,
    pair_counts,
    pit_loss,
    prism_loss,
    verification_loss,
)
from prism.metrics import cluster_pr, der, eer
from prism.model import (
    ModelConfig,
    build_model,
    checkpoint_hash,
    downsampled_length,
    load_checkpoint,
    save_checkpoint,
)
from prism.timeline import Span, Timeline, read_rttm, write_rttm

EPS = 1e-5
REL_TOL = 1e-4
# below REL_FLOOR * max(1, |f|) errors are compared in absolute terms: central-difference
# roundoff is about |f| * 1e-16 / EPS
REL_FLOOR = 1e-6


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nacceptance criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok
    return emit


def t(x):
    return torch.tensor(x, dtype=torch.float64)


# --- 1. gradient correctness ------------------------------------------------------


class _ReluPattern:
    """Records which side of zero every ``torch.relu`` input lies on."""

    def __init__(self, f):
        self.f = f

    def __call__(self):
        signs = []
        orig = torch.relu

        def relu(x):
            signs.append(x.detach() > 0)
            return orig(x)
        torch.relu = relu
        try:
            value = float(self.f())
        finally:
            torch.relu = orig
        return value, signs


def _same(a, b):
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def max_rel_error(f, tensors, coords=None, directions=0, gen=None):
    """(max relative error, skipped probes) between autograd and central differences
    of the scalar ``f()``.

    ``coords`` lists (tensor index, flat index) to probe; all coordinates by
    default. ``directions`` adds random directional derivatives over every tensor.
    A probe whose stencil moves a ReLU input across zero straddles a kink, where
    the function has no derivative to compare: it is skipped and counted.
    """
    for x in tensors:
        x.grad = None
    out = f()
    out.backward()
    floor = REL_FLOOR * max(1.0, abs(float(out.detach())))
    grads = [x.grad.detach().clone() for x in tensors]
    if coords is None:
        coords = [(k, i) for k, x in enumerate(tensors) for i in range(x.numel())]
    probe = _ReluPattern(f)
    worst, skipped = 0.0, 0

    def compare(a, up, down):
        nonlocal worst, skipped
        if not _same(up[1], down[1]):
            skipped += 1
            return
        n = (up[0] - down[0]) / (2 * EPS)
        worst = max(worst, abs(a - n) / max(abs(a), abs(n), floor))

    with torch.no_grad():
        for k, i in coords:
            flat = tensors[k].view(-1)
            old = float(flat[i])
            flat[i] = old + EPS
            up = probe()
            flat[i] = old - EPS
            down = probe()
            flat[i] = old
            compare(float(grads[k].view(-1)[i]), up, down)
        for _ in range(directions):
            vs = [torch.randn(x.shape, dtype=x.dtype, generator=gen) for x in tensors]
            for x, v in zip(tensors, vs):
                x += EPS * v
            up = probe()
            for x, v in zip(tensors, vs):
                x -= 2 * EPS * v
            down = probe()
            for x, v in zip(tensors, vs):
                x += EPS * v
            compare(sum(float((g * v).sum()) for g, v in zip(grads, vs)), up, down)
    return worst, skipped


def _labels(rng, n, speakers):
    lab = rng.integers(-1, speakers, n)
    lab[:2] = rng.integers(0, speakers, 2)
    return lab


def _grad_prism(rng):
    samples = []
    for _ in range(2):
        n = int(rng.integers(4, 33))
        samples.append((t(rng.normal(size=(n, 4))).requires_grad_(), _labels(rng, n, 3)))
    hp = LossHyperParams(alpha=1.5)
    return (lambda: prism_loss([(F.normalize(r, dim=1), lab) for r, lab in samples], hp)), [r for r, _ in samples]


def _grad_ams(rng):
    e, w = t(rng.normal(size=8)).requires_grad_(), t(rng.normal(size=(6, 8))).requires_grad_()
    sid = int(rng.integers(0, 6))
    return (lambda: am_softmax(F.normalize(e, dim=0), sid, F.normalize(w, dim=1))), [e, w]


def _grad_ver(rng):
    n1, n2 = int(rng.integers(3, 15)), int(rng.integers(3, 15))
    raw = t(rng.normal(size=(n1 + 2 + n2, 4))).requires_grad_()
    w = t(rng.normal(size=(5, 4))).requires_grad_()
    ids = rng.integers(0, 5, 2)
    lab = np.array([0] * n1 + [-1] * 2 + [int(ids[0] != ids[1])] * n2)
    hp = LossHyperParams(lambda_ver=0.7, alpha=2.0, ams_scale=5.0)

    def f():
        y = F.normalize(raw, dim=1)
        p1 = F.normalize(y[:n1].mean(0), dim=0)
        p2 = F.normalize(y[n1 + 2:].mean(0), dim=0)
        return verification_loss(p1, p2, [(y, lab)], int(ids[0]), int(ids[1]), F.normalize(w, dim=1), hp)
    return f, [raw, w]


def _grad_pit(rng):
    T, S = int(rng.integers(4, 33)), int(rng.integers(1, 5))
    logits = t(rng.normal(scale=2.0, size=(T, S))).requires_grad_()
    ref = (rng.random((T, S)) < 0.5).astype(float)
    return (lambda: pit_loss(logits, ref)[0]), [logits]


def _grad_diar(rng):
    T = int(rng.integers(8, 33))
    logits = t(rng.normal(size=(T, 2))).requires_grad_()
    raw = t(rng.normal(size=(T, 4))).requires_grad_()
    ref = (rng.random((T, 2)) < 0.5).astype(float)
    ref[:2] = [[1, 0], [1, 0]]
    single = np.where(ref.sum(1) == 1, ref.argmax(1), -1)
    hp = LossHyperParams(gamma_diar=0.5, alpha=2.0)
    return (lambda: diarization_loss(logits, ref, F.normalize(raw, dim=1), single, hp)), [logits, raw]


def _grad_model(rng, seed):
    model = build_model(ModelConfig(model_dim=16, embedding_dim=8, heads=2), seed=seed, dtype=torch.float64)
    T = int(rng.integers(8, 33))
    x = t(rng.normal(size=(1, T, model.cfg.input_dim))).requires_grad_()
    probe = t(rng.normal(size=(1, downsampled_length(T), 8)))
    params = [p for _, p in sorted(model.named_parameters())]
    tensors = [x] + params
    sizes = np.array([p.numel() for p in tensors])
    # every input frame, then a random sample of input and parameter coordinates
    coords = [(0, f * x.shape[2] + int(rng.integers(x.shape[2]))) for f in range(T)]
    for _ in range(48):
        k = int(rng.choice(len(tensors), p=sizes / sizes.sum()))
        coords.append((k, int(rng.integers(sizes[k]))))
    return (lambda: (model(x) * probe).sum()), tensors, coords


def test_criterion_1_gradients(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    gen = torch.Generator().manual_seed(101)
    worst, skipped, probes = {}, 0, 0
    cases = [(name, lambda make=make: (*make(rng), None, 0)) for name, make in
             [("prism_loss", _grad_prism), ("am_softmax", _grad_ams), ("verification_loss", _grad_ver),
              ("pit_loss", _grad_pit), ("diarization_loss", _grad_diar)]]
    cases.append(("model", lambda: (*_grad_model(rng, int(rng.integers(1 << 30))), 4)))
    for name, make in cases:
        worst[name] = 0.0
        for _ in range(20):
            f, tensors, coords, directions = make()
            err, skip = max_rel_error(f, tensors, coords, directions, gen)
            worst[name] = max(worst[name], err)
            skipped += skip
            probes += (len(coords) if coords else sum(x.numel() for x in tensors)) + directions
    elapsed = time.perf_counter() - t0
    ok = all(v <= REL_TOL for v in worst.values()) and elapsed < 120 and skipped <= 0.01 * probes
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert report(1, ok, f"max rel err {detail}; {skipped}/{probes} probes straddled a ReLU kink; {elapsed:.0f} s")


# --- 2. architecture contract ------------------------------------------------------


def test_criterion_2_architecture(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    model = build_model(ModelConfig(model_dim=16, embedding_dim=8, heads=2), seed=0, dtype=torch.float64).eval()
    lengths_ok = True
    with torch.no_grad():
        for T in rng.integers(8, 1200, 50):
            out = model(t(rng.normal(size=(1, int(T), 140))))
            lengths_ok &= out.shape[1] == -(-int(T) // 4)
    # impulse response of the conv path at the default configuration
    cfg = ModelConfig()
    big = build_model(cfg, seed=0, dtype=torch.float64).eval()
    x = t(rng.normal(size=(1, 800, cfg.input_dim))).requires_grad_()
    h = big.hidden(x, identity_attention=True)
    (h[0, 100] * t(rng.normal(size=cfg.model_dim))).sum().backward()
    rows = np.nonzero(x.grad[0].abs().sum(1).numpy())[0]
    field = int(rows.max() - rows.min() + 1)
    elapsed = time.perf_counter() - t0
    ok = lengths_ok and field == 285 and elapsed < 60
    assert report(2, ok, f"T' = ceil(T/4) for 50 lengths: {lengths_ok}; receptive field {field} frames; {elapsed:.0f} s")


# --- 3. loss invariances -----------------------------------------------------------


def test_criterion_3_loss_invariances(report):
    rng = np.random.default_rng(303)
    inv = 0.0
    nonneg = True
    for _ in range(100):
        n = int(rng.integers(4, 40))
        y = F.normalize(t(rng.normal(size=(n, 6))), dim=1)
        lab = _labels(rng, n, 4)
        hp = LossHyperParams(alpha=float(rng.uniform(0, 2)), beta=float(rng.uniform(0.5, 2)))
        base = float(prism_loss([(y, lab)], hp))
        nonneg &= base >= 0
        relabel = rng.permutation(4) + 10
        renamed = np.where(lab >= 0, relabel[np.clip(lab, 0, None)], -1)
        perm = rng.permutation(n)
        inv = max(inv, abs(float(prism_loss([(y, renamed)], hp)) - base),
                  abs(float(prism_loss([(y[perm], lab[perm])], hp)) - base))
    pit = 0.0
    for _ in range(100):
        T, S = int(rng.integers(2, 30)), int(rng.integers(1, 5))
        logits = rng.normal(scale=2.0, size=(T, S))
        ref = (rng.random((T, S)) < 0.5).astype(float)
        pit = max(pit, abs(float(pit_loss(t(logits), ref)[0]) - O.pit_by_brute_force(logits, ref)[0]))
    cases = [
        float(prism_loss([(t([[1, 0], [1, 0], [0, 1], [0, 1]]), np.array([0, 0, 1, 1]))], alpha=0.5, beta=1.0)) == 0.0,
        float(prism_loss([(t([[1, 0]] * 4), np.array([0, 0, 1, 1]))], alpha=0.5, beta=1.0)) == 0.5,
        float(prism_loss([(t([[1, 0]] * 3), np.array([4, 4, 4]))], alpha=0.5, beta=1.0)) == 0.0,
        pair_counts([4, 4, 4]) == (0, 3),
        float(prism_loss([(t([[1, 0], [1, 0]]), np.array([0, 1]))], alpha=0.5, beta=1.0)) == 1.5,
        pair_counts([0, 1]) == (1, 0),
    ]
    ok = inv <= 1e-12 and pit <= 1e-12 and nonneg and all(cases)
    assert report(3, ok, f"relabel/shuffle max diff {inv:.1e}; PIT vs exhaustive max diff {pit:.1e}; "
                         f"nonnegative {nonneg}; degenerate examples {sum(cases)}/{len(cases)}")


# --- 4. clustering oracle ------------------------------------------------------------


def _random_distance(rng, n, kind):
    if kind == 0:
        d = rng.random((n, n))
    elif kind == 1:
        d = np.round(rng.random((n, n)), 1)
    else:
        c = rng.integers(0, 3, n)
        d = np.where(c[:, None] == c[None, :], 0.1, 0.8) + 0.05 * rng.random((n, n))
    d = np.triu(d, 1)
    return d + d.T


def test_criterion_4_clustering_oracle(report):
    rng = np.random.default_rng(404)
    mst_ok = ext_ok = 0
    for it in range(200):
        n = int(rng.integers(2, 11))
        d = _random_distance(rng, n, it % 3)
        k = min(3, n - 1)
        w = C.mutual_reachability(d, k)
        tree = frozenset((i, j) for i, j, _ in C.minimum_spanning_tree(w))
        want = O.brute_force_mst(w) if n <= 7 else O.mst_by_exclusion(w)
        mst_ok += tree == want
        got = C.hdbscan(d, k=3, min_cluster_size=2, assign_all=False).labels
        ext_ok += np.array_equal(got, O.flat_labels(n, O.reference_eom(O.mreach_matrix(d, k), 2)))
    assert report(4, mst_ok == ext_ok == 200, f"MST {mst_ok}/200, extraction {ext_ok}/200")


# --- 5. clustering comparison -------------------------------------------------------


def test_criterion_5_clustering_comparison(report):
    t0 = time.perf_counter()
    summary, _ = clustering_comparison(200, seed=0)
    elapsed = time.perf_counter() - t0
    by = {r["method"]: r for r in summary}
    ours = by["prism-hdbscan"]
    beats = all(ours["count_accuracy"] >= by[m]["count_accuracy"] for m in by if m != "prism-hdbscan")
    ok = (ours["count_accuracy"] >= 0.90 and beats and ours["precision"] >= 0.95 and ours["recall"] >= 0.95
          and elapsed < 300)
    accs = ", ".join(f"{m} {r['count_accuracy']:.3f}" for m, r in by.items())
    assert report(5, ok, f"counting accuracy {accs}; prism-hdbscan precision {ours['precision']:.3f} "
                         f"recall {ours['recall']:.3f}; {elapsed:.0f} s")


# --- 6. toy training end to end -------------------------------------------------------


def test_criterion_6_verification(report, verification_runs, timings):
    phon, nophon = median_eer(verification_runs, "phonetic"), median_eer(verification_runs, "no-phonetic")
    elapsed = timings.get("verification", 0.0)
    ok = phon <= 0.20 and phon <= nophon + 0.02 and elapsed < 1800
    per = " ".join(f"{r['arm']}/{r['seed']}={r['eer']:.3f}" for r in verification_runs)
    assert report(6, ok, f"median EER phonetic {phon:.3f}, no-phonetic {nophon:.3f} [{per}]; "
                         f"{elapsed:.0f} s for both arms")


# --- 7. diarization end to end --------------------------------------------------------


def test_criterion_7_diarization(report, ver_checkpoint, diar_checkpoint):
    t0 = time.perf_counter()
    ver, _ = load_checkpoint(ver_checkpoint)
    diar, _ = load_checkpoint(diar_checkpoint)
    rows = der_by_speaker_count(ver.eval(), diar.eval(), 20, seed=0)
    elapsed = time.perf_counter() - t0
    ours, km = aggregate_der(rows, "prism-hdbscan"), aggregate_der(rows, "kmeans")
    ok = ours <= 0.20 and ours <= km and elapsed < 1200
    per = " ".join(f"{c}spk={aggregate_der(rows, 'prism-hdbscan', c):.3f}" for c in (2, 3, 4))
    assert report(7, ok, f"DER prism-hdbscan {ours:.3f} [{per}], kmeans {km:.3f}; {elapsed:.0f} s")


# --- 8. metric and serialization oracles ---------------------------------------------


def test_criterion_8_metrics_and_round_trips(report, tmp_path):
    checks = {}
    checks["eer 0.25"] = eer([0.9, 0.8, 0.7, 0.3, 0.6, 0.2, 0.1, 0.05], [1, 1, 1, 1, 0, 0, 0, 0]) == 0.25
    hyp, ref = Timeline([Span(0, 8, "A")], "m"), Timeline([Span(0, 10, "A")], "m")
    checks["der 0.2"] = der(hyp, ref, collar_s=0.0).der == 0.2
    checks["cluster_pr 1/3"] = cluster_pr([0, 0, 0, 0], ["a", "a", "b", "b"]) == (1 / 3, 1.0)

    a, b = tmp_path / "a.rttm", tmp_path / "b.rttm"
    write_rttm(a, [Timeline([Span(3.5, 1.25, "B"), Span(0.0, 2.0, "A"), Span(0.1234, 2.0004, "B")], "x")])
    write_rttm(b, list(read_rttm(a).values()))
    checks["rttm round trip"] = a.read_bytes() == b.read_bytes()

    m = build_model(ModelConfig(model_dim=16, embedding_dim=8, heads=2), seed=5)
    m.add_ams_head(7)
    first = save_checkpoint(tmp_path / "c1.prsm", m, {"mode": "pretrain"})
    loaded, meta = load_checkpoint(tmp_path / "c1.prsm")
    checks["checkpoint round trip"] = save_checkpoint(tmp_path / "c2.prsm", loaded, meta) == first

    cfg = Tr.TrainConfig(mode="pretrain", steps=3, batch_size=2, model=ModelConfig(model_dim=16, embedding_dim=8, heads=2),
                         data=Tr.DataConfig(num_speakers=6, utterances_per_speaker=3))
    h1 = checkpoint_hash(Tr.train(cfg, tmp_path / "r1").checkpoint)
    h2 = checkpoint_hash(Tr.train(cfg, tmp_path / "r2").checkpoint)
    checks["same-seed training hash"] = h1 == h2
    failed = [k for k, v in checks.items() if not v]
    assert report(8, not failed, f"{len(checks) - len(failed)}/{len(checks)} checks" +
                  (f"; failed: {', '.join(failed)}" if failed else ""))
