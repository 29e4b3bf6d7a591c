"""End-to-end acceptance checks, one test per criterion.

Each test gathers every sub-check first, prints a single PASS/FAIL line
through the ``verdict`` fixture, then asserts. The lines are repeated in
an "acceptance" section at the end of the pytest report.
"""
import copy
import filecmp
import json
import math
from collections import Counter

import numpy as np
import pytest
import torch

from corpus import VOCAB_SIZE, TransitionCorpus
from ecglang.cli import main
from ecglang.delineate import delineate_record, match_fiducials
from ecglang.encoder import (ModelConfig, RhythmModel, base_parameter_snapshot, batch_tensors, lora_apply, lora_merge,
                             masked_cross_entropy)
from ecglang.evaluation import auroc, auroc_bruteforce, macro_auroc
from ecglang.ingest import generate_synthetic
from ecglang.optim import TrainHyper, gradient_check
from ecglang.preprocess import butterworth_highpass, notch_filter, preprocess_record, preprocess_samples
from ecglang.sentence import (IGNORE, BeatTokens, TokenSequence, apply_mlm_mask, build_sequence, mask_count,
                              pad_and_batch)
from ecglang.train import finetune_lora, predict_scores, pretrain_mlm
from ecglang.vocab import (MISS, N_SPECIAL, SEP, KneeCurve, assign_token, best_kmeans, build_vocabulary, find_knee,
                           kmeans, silhouette)
from ecglang.wave_ae import AeConfig, WaveAutoencoder, huber_loss, train_ae

FS = 500
FRACTIONS = (0.01, 0.1, 1.0)


def test_criterion_01_dsp(verdict):
    t = np.arange(10 * FS) / FS
    steady = slice(FS, -FS)

    def amp(x):
        return np.sqrt(2 * np.mean(x[steady] ** 2))

    mains = np.sin(2 * np.pi * 50 * t)
    notch_db = 20 * np.log10(amp(mains) / amp(notch_filter(mains, FS)))
    dc_left = np.abs(butterworth_highpass(np.full(t.size, 2.0), FS)[FS:]).max() / 2.0
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=t.size), rng.normal(size=t.size)
    lin = np.abs(preprocess_samples(2.5 * x - 0.7 * y, FS)
                 - (2.5 * preprocess_samples(x, FS) - 0.7 * preprocess_samples(y, FS))).max()
    ok = notch_db >= 20 and dc_left < 0.01 and lin <= 1e-5
    verdict(1, "DSP", ok, f"notch {notch_db:.1f} dB, DC residual {dc_left:.2e}, linearity {lin:.1e}")
    assert ok


def test_criterion_02_delineation(verdict):
    st = Counter()
    recs, truths = generate_synthetic(200, FS, 10.0, "regular", seed=101)
    for rec, gt in zip(recs, truths):
        x = preprocess_record(rec).samples.astype(np.float64)
        st.update(match_fiducials(delineate_record(x, FS), gt.beats, 5, 10))
    r_rate = st["matched_beats"] / st["true_beats"]
    fid = {f"{w}_{f}": st[f"{w}_{f}_hit"] / st[f"{w}_{f}_total"]
           for w in ("P", "QRS", "T") for f in ("onset", "peak", "offset")}

    ab = Counter()
    recs, truths = generate_synthetic(50, FS, 10.0, "absent_p", seed=102)
    for rec, gt in zip(recs, truths):
        x = preprocess_record(rec).samples.astype(np.float64)
        ab.update(match_fiducials(delineate_record(x, FS), gt.beats, 5, 10))
    p_flag = ab["P_flagged_absent"] / ab["P_truth_absent"]

    ok = r_rate >= 0.95 and min(fid.values()) >= 0.90 and p_flag >= 0.90
    verdict(2, "delineation", ok, f"R {r_rate:.3f}, worst fiducial {min(fid, key=fid.get)} "
                                  f"{min(fid.values()):.3f}, absent P {p_flag:.3f}")
    assert ok


@pytest.mark.slow
def test_criterion_03_autoencoder(verdict, segments_60):
    huber_ok = [huber_loss(np.array([r]), np.zeros(1), beta=1.0) for r in (0.0, 0.5, 2.0)] == [0.0, 0.125, 1.5]

    torch.manual_seed(0)
    cfg = AeConfig("P", 3, 32, (2, 2, 2, 2))
    tiny = WaveAutoencoder(cfg).double().train()
    x = torch.randn(3, 32, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    lengths = torch.tensor([32, 25, 17])
    x = x * (torch.arange(32)[None, :] < lengths[:, None])
    grad_err = gradient_check(lambda: huber_loss(x, tiny(x, lengths), 1.0, lengths), list(tiny.parameters()), h=1e-6)

    segs = [s for s in segments_60 if s.wave_type == "P"][:500]
    res = train_ae(AeConfig.for_wave("P", FS), segs, TrainHyper.for_ae(max_epochs=30))
    ratio = min(h["val_loss"] for h in res.history[1:]) / res.history[0]["val_loss"]

    dims = {w: AeConfig.for_wave(w, FS).latent_dim for w in ("P", "QRS", "T")}
    ok = huber_ok and grad_err < 1e-4 and len(segs) == 500 and ratio < 0.3 and dims == {"P": 12, "QRS": 24, "T": 12}
    verdict(3, "autoencoder", ok, f"grad rel err {grad_err:.1e}, best/initial val loss {ratio:.3f}, dims {dims}")
    assert ok


def test_criterion_04_clustering(verdict):
    six = np.array([[0, 0], [0, 1], [1, 0], [10, 10], [10, 11], [11, 10]], dtype=float)
    wcss = kmeans(six, 2, seed=0).wcss
    six_ok = math.isclose(wcss, 8 / 3, rel_tol=1e-12)

    lloyd_ok = True
    for i in range(100):
        rng = np.random.default_rng(1000 + i)
        pts = rng.normal(size=(int(rng.integers(10, 80)), int(rng.integers(1, 5))))
        hist = kmeans(pts, int(rng.integers(2, 8)), seed=i).history
        lloyd_ok &= all(b <= a + 1e-9 * max(1.0, a) for a, b in zip(hist, hist[1:]))

    knee = find_knee(KneeCurve(np.arange(1, 7), np.array([100, 50, 30, 28, 27, 26], dtype=float)))
    sil = silhouette(np.array([[0.0], [0.1], [10.0], [10.1]]), [0, 0, 1, 1])

    rng = np.random.default_rng(7)
    latents = {"P": rng.normal(size=(300, 12)), "QRS": rng.normal(size=(200, 24)), "T": rng.normal(size=(250, 12))}
    vocab = build_vocabulary(latents, k={"P": 8, "QRS": 6, "T": 5}, seed=2)
    agree = total = 0
    for w, z in latents.items():
        expected = best_kmeans(z, vocab.k[w], 2, 5).assignments + vocab.offsets[w]
        agree += sum(assign_token(vocab, w, v) == e for v, e in zip(z, expected))
        total += len(z)

    ok = six_ok and lloyd_ok and knee == 3 and sil > 0.97 and agree == total
    verdict(4, "clustering", ok, f"wcss {wcss!r}, knee {knee}, silhouette {sil:.4f}, consistency {agree}/{total}")
    assert ok


def _random_sentence(rng, rid):
    beats = []
    for i in range(int(rng.integers(1, 40))):
        toks = {"P": None if rng.random() < 0.2 else int(rng.integers(5, 18)),
                "QRS": int(rng.integers(18, 29)),
                "T": None if rng.random() < 0.1 else int(rng.integers(29, 39))}
        beats.append(BeatTokens(i, toks, {}))
    return build_sequence(rid, beats)


def test_criterion_05_tokenization(verdict):
    rng = np.random.default_rng(5)
    failures = Counter()
    for chunk in range(25):
        seqs = [_random_sentence(rng, f"{chunk}-{i}") for i in range(40)]
        batch = pad_and_batch(seqs)
        m = apply_mlm_mask(batch, 0.2, seed=chunk, strategy="bert" if chunk % 2 else "mask", vocab_size=39)
        sel = m.mlm_labels != IGNORE
        if not np.array_equal(np.where(sel, m.mlm_labels, m.input_ids), batch.input_ids):
            failures["unmasking"] += 1
        for i, s in enumerate(seqs):
            pos = np.arange(len(s))
            ids = batch.input_ids[i, :len(s)]
            if not (np.all(ids[pos % 4 == 3] == SEP)
                    and np.all((ids[pos % 4 != 3] >= N_SPECIAL) | (ids[pos % 4 != 3] == MISS))):
                failures["frame"] += 1
            if sel[i].sum() != mask_count(int(np.sum(ids >= N_SPECIAL)), 0.2):
                failures["count"] += 1
            if np.any(sel[i, len(s):]) or np.any(batch.input_ids[i][sel[i]] < N_SPECIAL):
                failures["special"] += 1
    ok = not failures
    verdict(5, "tokenization", ok, f"1000 sequences, failures {dict(failures) or 'none'}")
    assert ok


def _random_tokens(rng, n, lo, hi):
    out = []
    for i in range(n):
        ids = []
        for _ in range(int(rng.integers(lo, hi))):
            ids += rng.integers(N_SPECIAL, VOCAB_SIZE, size=3).tolist() + [SEP]
        out.append(TokenSequence(str(i), ids))
    return out


def test_criterion_06_model(verdict):
    rng = np.random.default_rng(6)
    torch.manual_seed(0)
    cfg = ModelConfig(VOCAB_SIZE, max_len=128, d_model=48, n_layers=2, n_heads=4, dropout=0.0, use_morphology=False)
    model = RhythmModel(cfg).eval()
    ids, mask = batch_tensors(pad_and_batch(_random_tokens(rng, 6, 2, 10)))
    with torch.no_grad():
        _, maps = model(ids, mask, return_attention=True)
        row_err = max((w.sum(-1) - 1).abs().max().item() for w in maps)
        emb = model.embed(ids)
        noisy = emb.clone()
        noisy[~mask] = torch.randn(int((~mask).sum()), 48) * 50
        pad_err = (model.encode(emb, mask) - model.encode(noisy, mask))[mask].abs().max().item()

    tcfg = ModelConfig(10, max_len=8, d_model=12, n_layers=2, n_heads=2, ffn_mult=2, dropout=0.0, use_morphology=False)
    tiny = RhythmModel(tcfg).double().train()
    tids = torch.randint(0, 10, (3, 8), generator=torch.Generator().manual_seed(7))
    tmask = torch.ones(3, 8, dtype=torch.bool)
    tmask[1, 6:], tmask[2, 3:] = False, False
    labels = torch.full((3, 8), IGNORE)
    labels[0, 1], labels[1, 4], labels[2, 0] = 3, 7, 9
    # tiny first-layer query gradients need a wider step than 1e-6 to rise above rounding
    grad_err = gradient_check(lambda: masked_cross_entropy(tiny.mlm_logits(tiny(tids, tmask)), labels),
                              list(tiny.parameters()), h=1e-4)

    batch = apply_mlm_mask(pad_and_batch(_random_tokens(rng, 64, 10, 20)), 0.2, seed=0)
    ids, mask = batch_tensors(batch)
    with torch.no_grad():
        ce = masked_cross_entropy(model.mlm_logits(model(ids, mask)), batch.mlm_labels).item()
    ce_gap = abs(ce - math.log(VOCAB_SIZE)) / math.log(VOCAB_SIZE)

    ok = row_err <= 1e-5 and pad_err <= 1e-5 and grad_err < 1e-4 and ce_gap < 0.15
    verdict(6, "model", ok, f"row sum err {row_err:.1e}, pad leak {pad_err:.1e}, grad rel err {grad_err:.1e}, "
                            f"untrained CE {ce:.3f} vs ln V {math.log(VOCAB_SIZE):.3f}")
    assert ok


@pytest.fixture(scope="module")
def transition():
    corpus = TransitionCorpus(0)
    rng = np.random.default_rng(1)
    unlabelled = corpus.unlabelled(2000, rng)
    labelled = [corpus.labelled(n, rng, 0.5) for n in (800, 200, 300)]
    return unlabelled, labelled


@pytest.fixture(scope="module")
def pretrained(transition):
    unlabelled, _ = transition
    torch.manual_seed(0)
    model = RhythmModel(ModelConfig(VOCAB_SIZE, max_len=64, d_model=96, n_layers=4, n_heads=12, use_morphology=False))
    res = pretrain_mlm(model, unlabelled[:1800], unlabelled[1800:], TrainHyper.for_mlm(max_epochs=100),
                       target_loss=0.8 * math.log(VOCAB_SIZE))
    return res


@pytest.mark.slow
def test_criterion_07_pretraining(verdict, pretrained):
    target = 0.8 * math.log(VOCAB_SIZE)
    ok = pretrained.best_metric < target and len(pretrained.history) <= 100
    verdict(7, "pretraining learnability", ok,
            f"val CE {pretrained.best_metric:.3f} < {target:.3f} after {len(pretrained.history)} epochs")
    assert ok


@pytest.mark.slow
def test_criterion_08_finetuning(verdict, pretrained, transition):
    _, ((tr, ytr), (va, yva), (te, yte)) = transition
    base = pretrained.model.eval()
    ids, mask = batch_tensors(pad_and_batch(te[:16]))

    probe = copy.deepcopy(base)
    with torch.no_grad():
        before = probe(ids, mask)
        probe.add_lora(8, 16.0)
        identity = torch.equal(before, probe(ids, mask))

    aurocs = {f: [] for f in FRACTIONS}
    immutable = merge_err = None
    for frac in FRACTIONS:
        for seed in range(3):
            model = copy.deepcopy(base)
            snap = base_parameter_snapshot(model)
            finetune_lora(model, tr, ytr, va, yva, TrainHyper.for_finetune(seed=seed, max_epochs=30),
                          label_fraction=frac)
            after = base_parameter_snapshot(model)
            same = snap.keys() == after.keys() and all(np.array_equal(snap[n], after[n]) for n in snap)
            immutable = same if immutable is None else immutable and same
            aurocs[frac].append(macro_auroc(predict_scores(model, te), yte[:, None])[0])
            if frac == 1.0 and seed == 0:
                model.eval()
                with torch.no_grad():
                    adapted = model.classify(model(ids, mask), mask)
                    model.merge_lora()
                    merge_err = (model.classify(model(ids, mask), mask) - adapted).abs().max().item()

    rng = np.random.default_rng(0)
    W, A, B, x = rng.normal(size=(6, 5)), rng.normal(size=(3, 5)), rng.normal(size=(6, 3)), rng.normal(size=(4, 5))
    algebra_err = np.abs(x @ lora_merge(W, A, B, 16.0).T - lora_apply(W, A, B, 16.0, x)).max()

    medians = [float(np.median(aurocs[f])) for f in FRACTIONS]
    ok = (identity and immutable and merge_err <= 1e-5 and algebra_err <= 1e-5 and medians[-1] >= 0.90
          and medians[0] <= medians[1] <= medians[2])
    verdict(8, "fine-tuning", ok, f"identity {identity}, immutable {immutable}, merge err {merge_err:.1e}, "
                                  f"median AUROC 1%/10%/100% = {medians[0]:.3f}/{medians[1]:.3f}/{medians[2]:.3f}")
    assert ok


def test_criterion_09_metrics(verdict):
    rng = np.random.default_rng(9)
    mismatches = 0
    for i in range(2000):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, n)
        levels = (3, 10, 1000, None)[i % 4]
        s = rng.random(n) if levels is None else rng.integers(0, levels, n) / levels
        mismatches += auroc(s, y) != auroc_bruteforce(s, y)

    chance = []
    for seed in range(5):
        r = np.random.default_rng(seed)
        y = np.zeros((2000, 3), dtype=int)
        for j in range(3):
            y[r.permutation(2000)[:1000], j] = 1
        chance.append(macro_auroc(r.random((2000, 3)), y)[0])
    worst = max(abs(c - 0.5) for c in chance)

    ok = mismatches == 0 and worst <= 0.05
    verdict(9, "metrics", ok, f"rank vs brute force mismatches {mismatches}/2000, chance deviation {worst:.4f}")
    assert ok


SMALL = {
    "synth": {"n_per_class": 8},
    "wave_ae": {"max_epochs": 3},
    "vocab": {"k": {"P": 4, "QRS": 4, "T": 4}, "restarts": 2},
    "model": {"d_model": 32, "n_layers": 2, "n_heads": 4, "morph_channels": [4, 8], "morph_feature_dim": 16},
    "pretrain": {"max_epochs": 3},
    "finetune": {"max_epochs": 3},
}


def _tree_diff(a, b):
    cmp = filecmp.dircmp(a, b)
    diffs = [str(a / n) for n in cmp.left_only + cmp.right_only]
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    diffs += [str(a / n) for n in mismatch + errors]
    for sub in cmp.common_dirs:
        diffs += _tree_diff(a / sub, b / sub)
    return diffs


def test_criterion_10_reproducibility(verdict, tmp_path, monkeypatch):
    monkeypatch.setenv("ECGLANG_THREADS", "1")
    cfg = tmp_path / "small.json"
    cfg.write_text(json.dumps(SMALL))
    codes = [main(["pipeline", "--workdir", str(tmp_path / run), "--config", str(cfg), "--seed", "11", "--quiet"])
             for run in ("a", "b")]
    diffs = _tree_diff(tmp_path / "a", tmp_path / "b")
    n_files = sum(1 for p in (tmp_path / "a").rglob("*") if p.is_file())
    ok = codes == [0, 0] and not diffs and n_files > 10
    verdict(10, "reproducibility", ok, f"exit codes {codes}, {n_files} files, differing {diffs[:3] or 'none'}")
    assert ok
