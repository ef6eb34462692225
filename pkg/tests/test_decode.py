import numpy as np
import pytest

from megctx.decode import (DecodeHead, FinetuneConfig, LinearProbe,
                           ProbeConfig, PreparedSequence, Vocabulary,
                           WordSequence, build_word_input,
                           build_word_sequences, dsiglip_loss,
                           dsiglip_pair_mask, eval_sequences, finetune_run,
                           linear_probe_run, pool_word_features,
                           prepare_sequence, retrieve_words,
                           sequence_features, topk_balanced_accuracy,
                           word_token_spans)
from megctx.gradcheck import finite_diff_check
from megctx.model import Backbone
from megctx.signal import Recording, WordEvent, standardize_array
from megctx.tensor import Tensor

from conftest import make_codec, make_sensors
from test_model import tiny_cfg

LN2 = float(np.log(2.0))


# ---------------------------------------------------------------- spans

def test_word_token_spans_50_words():
    spans = word_token_spans(50, 150, 12)
    assert spans[0, 0] == 0 and spans[-1, 1] == 625
    widths = spans[:, 1] - spans[:, 0]
    assert set(widths.tolist()) == {12, 13}
    assert np.all(spans[1:, 0] == spans[:-1, 1])


def test_word_sequence_rejects_gaps():
    with pytest.raises(ValueError, match="contiguous"):
        WordSequence(signal=np.zeros((2, 300), dtype=np.float32),
                     labels=[0, 1],
                     token_spans=[[0, 10], [12, 25]])


# ---------------------------------------------------------------- assembly

def make_word_recording(rng, c=2, n_events=8, rate=50.0, word_s=3.0,
                        lead_s=0.5, stim="stim0", first_onset=None):
    first = lead_s if first_onset is None else first_onset
    onsets = [first + i * word_s for i in range(n_events)]
    dur = onsets[-1] + word_s
    t = int(round((dur + 1.0) * rate))
    data = rng.standard_normal((c, t)).astype(np.float32)
    events = [WordEvent(onset_s=o, label=i % 3, stimulus_id=stim)
              for i, o in enumerate(onsets)]
    return Recording(data=data, sample_rate_hz=rate, events=events,
                     sensors=make_sensors(rng, c))


def test_contiguous_onsets_equal_contiguous_slice(rng):
    rec = make_word_recording(rng, n_events=4)
    seq = build_word_input(rec, rec.events, n_words=4, downsample=3)
    whole = standardize_array(rec.data[:, :4 * 150], rec.sample_rate_hz,
                              segment_s=3.0, baseline_s=0.5)
    np.testing.assert_array_equal(seq.signal, whole)
    assert seq.signal.shape == (2, 600)
    assert seq.stimulus_id == "stim0"


def test_underflowing_event_skipped(rng):
    rec = make_word_recording(rng, n_events=5, first_onset=0.2)
    # first window would start at -0.3 s; the rest are fine
    seq = build_word_input(rec, rec.events, n_words=4, downsample=3)
    assert seq.labels.tolist() == [1, 2, 0, 1]


def test_too_few_events_rejected(rng):
    rec = make_word_recording(rng, n_events=3)
    with pytest.raises(ValueError, match="usable events"):
        build_word_input(rec, rec.events, n_words=4, downsample=3)


def test_build_word_sequences_groups_by_stimulus(rng):
    rec_a = make_word_recording(rng, n_events=4, stim="a")
    rec_b = make_word_recording(rng, n_events=4, stim="b")
    data = np.concatenate([rec_a.data, rec_b.data], axis=1)
    shift = rec_a.duration_s
    events = rec_a.events + [WordEvent(e.onset_s + shift, e.label, "b")
                             for e in rec_b.events]
    rec = Recording(data=data, sample_rate_hz=50.0, events=events,
                    sensors=rec_a.sensors)
    seqs = build_word_sequences(rec, n_words=4, downsample=3)
    assert [s.stimulus_id for s in seqs] == ["a", "b"]
    assert all(s.n_words == 4 for s in seqs)


# ---------------------------------------------------------------- pooling

def test_pool_constant_features():
    h = Tensor(np.ones((3, 10, 4), dtype=np.float32) * 2.0)
    spans = np.array([[0, 4], [4, 10]])
    out = pool_word_features(h, spans, np.array([True, True, False]))
    assert out.shape == (2, 8)
    np.testing.assert_allclose(out.data, 2.0)


def test_pool_width_one_span_is_slice(rng):
    h = Tensor(rng.standard_normal((2, 5, 3)).astype(np.float32))
    spans = np.array([[0, 1], [1, 5]])
    out = pool_word_features(h, spans, np.array([True, True]))
    np.testing.assert_allclose(out.data[0], h.data[:, 0, :].reshape(-1),
                               atol=1e-7)


def test_pool_matches_float64_oracle(rng):
    c_max, t_prime, d = 4, 11, 3
    h = Tensor(rng.standard_normal((c_max, t_prime, d)).astype(np.float32))
    spans = np.array([[0, 3], [3, 4], [4, 11]])
    valid = np.array([True, False, True, True])
    out = pool_word_features(h, spans, valid)
    h64 = h.data.astype(np.float64)
    rows = []
    for a, b in spans:
        pooled = h64[:, a:b, :].mean(axis=1)          # [C_max, d]
        rows.append(np.concatenate([pooled[c] for c in range(c_max)
                                    if valid[c]]))
    np.testing.assert_allclose(out.data, np.array(rows), atol=1e-6)


def test_pool_rejects_empty_span(rng):
    h = Tensor(np.zeros((2, 5, 3), dtype=np.float32))
    with pytest.raises(ValueError):
        pool_word_features(h, np.array([[0, 0], [0, 5]]), np.array([True, True]))


def test_pool_gradient_flows(rng):
    h = Tensor(rng.standard_normal((2, 6, 3)).astype(np.float32),
               requires_grad=True)
    out = pool_word_features(h, np.array([[0, 3], [3, 6]]),
                             np.array([True, True]))
    out.sum().backward()
    np.testing.assert_allclose(h.grad, 1.0 / 3.0, atol=1e-6)


# ---------------------------------------------------------------- loss

def test_pair_mask_counts_for_repeated_labels():
    y, incl = dsiglip_pair_mask(np.array([5, 7, 5]))
    assert incl.sum() == 7
    assert not incl[0, 2] and not incl[2, 0]
    assert incl[0, 0] and incl[2, 2] and incl[0, 1]
    assert y[0, 0] == 1.0 and y[0, 1] == -1.0


def test_separable_pair_loss_vanishes():
    e = np.zeros((2, 4), dtype=np.float32)
    e[0, 0] = 1.0
    e[1, 0] = -1.0
    pred = Tensor(e.copy())
    loss = dsiglip_loss(pred, e, np.array([0, 1]), Tensor(np.float32(50.0)),
                        Tensor(np.float32(0.0)))
    assert loss.item() < 1e-6


def test_all_zero_cosines_give_ln2():
    pred = np.zeros((2, 4), dtype=np.float32)
    pred[0, 0] = pred[1, 1] = 1.0
    tgt = np.zeros((2, 4), dtype=np.float32)
    tgt[0, 2] = tgt[1, 3] = 1.0
    loss = dsiglip_loss(Tensor(pred), tgt, np.array([0, 1]),
                        Tensor(np.float32(1.0)), Tensor(np.float32(0.0)))
    assert abs(loss.item() - LN2) < 1e-6


def test_duplicate_pair_exclusion_leaves_other_terms_alone(rng):
    d = 6
    pred3 = rng.standard_normal((3, d)).astype(np.float32)
    tgt3 = rng.standard_normal((3, d)).astype(np.float32)
    labels3 = np.array([0, 1, 0])
    loss3 = dsiglip_loss(Tensor(pred3), tgt3, labels3,
                         Tensor(np.float32(2.0)), Tensor(np.float32(-1.0)))

    def pair_term(i, j):
        p = pred3[i] / np.linalg.norm(pred3[i])
        t = tgt3[j] / np.linalg.norm(tgt3[j])
        z = 2.0 * float(p @ t) - 1.0
        y = 1.0 if i == j else -1.0
        return -np.log1p(np.exp(-y * z)) * -1.0     # -log sigmoid(y*z)

    included = [(i, j) for i in range(3) for j in range(3)
                if not (i != j and labels3[i] == labels3[j])]
    assert len(included) == 7
    expect = np.mean([pair_term(i, j) for i, j in included])
    assert abs(loss3.item() - expect) < 1e-5


def test_dsiglip_rejects_single_word():
    with pytest.raises(ValueError):
        dsiglip_loss(Tensor(np.ones((1, 3), dtype=np.float32)),
                     np.ones((1, 3)), np.array([0]),
                     Tensor(np.float32(1.0)), Tensor(np.float32(0.0)))


def test_dsiglip_gradients_match_finite_differences(rng):
    n, d = 5, 6
    pred0 = rng.standard_normal((n, d))
    tgt = rng.standard_normal((n, d))
    labels = np.array([0, 1, 2, 1, 3])

    def f(leaves):
        pred, log_t, bias = leaves
        return dsiglip_loss(pred, tgt, labels, log_t.exp(), bias)

    params = [Tensor(pred0.astype(np.float64), requires_grad=True),
              Tensor(np.float64(np.log(3.0)), requires_grad=True),
              Tensor(np.float64(-0.5), requires_grad=True)]
    worst = finite_diff_check(f, params, h=1e-4, samples_per_tensor=6)
    assert worst < 1e-3


# ---------------------------------------------------------------- retrieval

def test_retrieve_exact_row_is_rank_one(rng):
    vocab = Vocabulary.create(8, d_emb=6, seed=0)
    pred = vocab.embeddings[[3, 5]]
    top = retrieve_words(pred, vocab, k=3)
    assert top[0, 0] == 3 and top[1, 0] == 5


def test_retrieve_scale_invariant(rng):
    vocab = Vocabulary.create(10, d_emb=5, seed=1)
    pred = rng.standard_normal((4, 5))
    a = retrieve_words(pred, vocab, k=10)
    b = retrieve_words(pred * 37.5, vocab, k=10)
    np.testing.assert_array_equal(a, b)


def test_retrieve_matches_brute_force(rng):
    vocab = Vocabulary.create(5, d_emb=4, seed=2)
    pred = rng.standard_normal((6, 4))
    got = retrieve_words(pred, vocab, k=5)
    for i in range(6):
        p = pred[i] / np.linalg.norm(pred[i])
        sims = [float(p @ vocab.embeddings[j]) for j in range(5)]
        want = sorted(range(5), key=lambda j: (-sims[j], j))
        assert got[i].tolist() == want


def test_retrieve_ties_break_to_lower_index():
    emb = np.zeros((4, 3))
    emb[0] = emb[2] = [1.0, 0.0, 0.0]           # identical rows 0 and 2
    emb[1] = [0.0, 1.0, 0.0]
    emb[3] = [0.0, 0.0, 1.0]
    vocab = Vocabulary(words=list("abcd"), embeddings=emb)
    top = retrieve_words(np.array([[1.0, 0.0, 0.0]]), vocab, k=2)
    assert top[0].tolist() == [0, 2]


def test_retrieve_zero_prediction_deterministic():
    vocab = Vocabulary.create(6, d_emb=4, seed=3)
    top = retrieve_words(np.zeros((1, 4)), vocab, k=6)
    assert top[0].tolist() == list(range(6))


# ---------------------------------------------------------------- metric

def test_balanced_accuracy_all_correct():
    rankings = np.array([[0, 3], [1, 0], [2, 1]])
    assert topk_balanced_accuracy(rankings, np.array([0, 1, 2]), 4, k=1) == 100.0


def test_balanced_accuracy_macro_not_micro():
    # class 0: 9 hits of 9; class 1: 0 of 1 -> macro 50, micro would be 90
    rankings = np.vstack([np.tile([0, 2], (9, 1)), [[0, 2]]])
    labels = np.array([0] * 9 + [1])
    assert topk_balanced_accuracy(rankings, labels, 3, k=2) == 50.0


def test_balanced_accuracy_relabel_invariant(rng):
    n, K, k = 40, 6, 3
    rankings = np.array([rng.permutation(K)[:k] for _ in range(n)])
    labels = rng.integers(0, K, size=n)
    base = topk_balanced_accuracy(rankings, labels, K, k=k)
    perm = rng.permutation(K)
    relabeled = topk_balanced_accuracy(perm[rankings], perm[labels], K, k=k)
    assert abs(base - relabeled) < 1e-9


def test_balanced_accuracy_random_near_20pct(rng):
    n, K, k = 5000, 50, 10
    rankings = np.array([rng.permutation(K)[:k] for _ in range(n)])
    labels = rng.integers(0, K, size=n)
    acc = topk_balanced_accuracy(rankings, labels, K, k=k)
    assert abs(acc - 20.0) < 5.0


def test_balanced_accuracy_rejects_bad_labels():
    with pytest.raises(ValueError):
        topk_balanced_accuracy(np.array([[0]]), np.array([5]), 3, k=1)


# ---------------------------------------------------------------- drivers

def make_split_data(rng, codec, mcfg, n_train=3, n_val=2, n_test=2,
                    n_words=4, vocab_size=6):
    seqs = {"train": [], "val": [], "test": []}
    i = 0
    for split, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        for _ in range(count):
            rec = make_word_recording(rng, c=2, n_events=n_words,
                                      stim=f"s{i}")
            for ev in rec.events:
                ev.label = int(rng.integers(0, vocab_size))
            seq = build_word_input(rec, rec.events, n_words=n_words,
                                   downsample=codec.downsample)
            seqs[split].append(prepare_sequence(seq, rec.sensors, codec,
                                                mcfg.c_max))
            i += 1
    return seqs


def test_finetune_run_end_to_end(tmp_path, rng):
    codec = make_codec(rng, levels=2, vocab=5, downsample=3, d_codebook=4)
    mcfg = tiny_cfg()
    bb = Backbone(mcfg, seed=0)
    splits = make_split_data(rng, codec, mcfg)
    vocab = Vocabulary.create(6, d_emb=8, seed=0)
    cfg = FinetuneConfig(d_emb=8, head_hidden=16, max_epochs=3, patience=10,
                         k=2, n_words=4, seed=0)
    res = finetune_run(bb, codec, splits, vocab, cfg, tmp_path / "ft")
    assert len(res.history) == 3
    assert np.isfinite(res.test_loss)
    assert 0.0 <= res.test_acc <= 100.0
    lines = (tmp_path / "ft" / "metrics.csv").read_text().strip().split("\n")
    assert lines[0] == "epoch,split,loss,topk_balanced_acc"
    assert any(row.split(",")[1] == "test" for row in lines[1:])
    from megctx.dataio import load_model
    bb2, _, leftovers, state = load_model(res.best_path,
                                          extra_prefixes=("decode/",))
    assert "decode/w1" in leftovers
    assert state.extra["best_epoch"] == res.best_epoch


def test_finetune_early_stopping(tmp_path, rng):
    codec = make_codec(rng, levels=2, vocab=5, downsample=3, d_codebook=4)
    mcfg = tiny_cfg()
    bb = Backbone(mcfg, seed=0)
    splits = make_split_data(rng, codec, mcfg)
    vocab = Vocabulary.create(6, d_emb=8, seed=0)
    cfg = FinetuneConfig(d_emb=8, head_hidden=16, max_epochs=50, patience=2,
                         k=2, n_words=4, seed=0)
    res = finetune_run(bb, codec, splits, vocab, cfg, tmp_path / "ft")
    last_epoch = res.history[-1]["epoch"]
    assert last_epoch <= res.best_epoch + 2


def test_finetune_rejects_vocab_mismatch(tmp_path, rng):
    codec = make_codec(rng, levels=2, vocab=5, downsample=3, d_codebook=4)
    mcfg = tiny_cfg()
    bb = Backbone(mcfg, seed=0)
    splits = make_split_data(rng, codec, mcfg)
    vocab = Vocabulary.create(6, d_emb=4, seed=0)   # head built with d_emb=8
    head = DecodeHead(2 * mcfg.d_model, 8, hidden=16, seed=0)
    cfg = FinetuneConfig(d_emb=8, head_hidden=16, max_epochs=1, n_words=4)
    with pytest.raises(ValueError, match="embedding size"):
        finetune_run(bb, codec, splits, vocab, cfg, tmp_path / "ft", head=head)


def test_probe_backbone_frozen_and_modes(tmp_path, rng):
    codec = make_codec(rng, levels=2, vocab=5, downsample=3, d_codebook=4)
    mcfg = tiny_cfg()
    bb = Backbone(mcfg, seed=0)
    splits = make_split_data(rng, codec, mcfg, n_train=2, n_val=1, n_test=1)
    vocab = Vocabulary.create(6, d_emb=8, seed=0)
    before = {n: t.data.copy() for n, t in bb.params.items()}
    cfg = ProbeConfig(d_emb=8, epochs=2, k=2, seed=0)
    res = linear_probe_run(bb, codec, splits, vocab, cfg, mode="full")
    for n, t in bb.params.items():
        np.testing.assert_array_equal(t.data, before[n])
    assert np.isfinite(res.test_loss)

    ps = splits["train"][0]
    full = sequence_features(bb, codec, ps, mode="full")
    matched_all = sequence_features(bb, codec, ps, mode="matched",
                                    context_s=ps.seq.n_words * 3.0)
    np.testing.assert_array_equal(full, matched_all)
    matched_1 = sequence_features(bb, codec, ps, mode="matched", context_s=3.0)
    assert matched_1.shape == full.shape
    assert not np.allclose(matched_1, full)


def test_probe_rejects_unknown_mode(rng):
    codec = make_codec(rng, levels=2, vocab=5, downsample=3, d_codebook=4)
    mcfg = tiny_cfg()
    bb = Backbone(mcfg, seed=0)
    rec = make_word_recording(rng, c=2, n_events=4)
    seq = build_word_input(rec, rec.events, n_words=4, downsample=3)
    ps = prepare_sequence(seq, rec.sensors, codec, mcfg.c_max)
    with pytest.raises(ValueError, match="mode"):
        sequence_features(bb, codec, ps, mode="windowed")
