"""Contextual word decoding on top of the pretrained backbone.

Word-locked 3 s epochs (aligned 0.5 s before onset) are standardized and
concatenated into 50-word sequences, tokenized, and run through the
backbone; per-word features are mean-pooled over each word's token span
and flattened across valid channels.  An MLP head predicts a word
embedding trained with a sigmoid contrastive loss that excludes duplicate
-word off-diagonal pairs; evaluation is cosine retrieval against the
vocabulary scored by macro-averaged (balanced) top-k accuracy.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor, logsigmoid, no_grad, selu, take
from .optim import AdamW
from .signal import Recording, SignalConfig, standardize_array
from .sensors import pad_and_mask
from .rvq import RvqCodec, rvq_encode
from .model import Backbone, _trunc_normal, forward
from . import dataio


# ---------------------------------------------------------------- vocabulary

@dataclass
class Vocabulary:
    """Retrieval vocabulary: word strings and unit-norm embedding rows."""
    words: list
    embeddings: np.ndarray            # [K, d_emb], rows unit-normalized
    counts: np.ndarray = None         # occurrence counts, optional

    def __post_init__(self):
        if len(self.words) < 2:
            raise ValueError("vocabulary needs at least 2 words")
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.shape[0] != len(self.words):
            raise ValueError("one embedding row per word required")
        norms = np.linalg.norm(emb, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("zero-norm vocabulary embedding")
        self.embeddings = emb / norms
        if self.counts is None:
            self.counts = np.ones(len(self.words), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)

    @property
    def size(self) -> int:
        return len(self.words)

    @property
    def d_emb(self) -> int:
        return self.embeddings.shape[1]

    @classmethod
    def create(cls, k: int, d_emb: int = 64, seed: int = 0,
               words: list = None) -> "Vocabulary":
        rng = np.random.default_rng(seed)
        emb = rng.standard_normal((k, d_emb))
        words = words if words is not None else [f"word{i:03d}" for i in range(k)]
        return cls(words=words, embeddings=emb)


# ---------------------------------------------------------------- sequences

@dataclass
class WordSequence:
    """Concatenated word epochs: signal [C, N*w_samples], labels [N], and the
    half-open token interval each word owns after downsampling."""
    signal: np.ndarray
    labels: np.ndarray
    token_spans: np.ndarray           # [N, 2]
    stimulus_id: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.token_spans = np.asarray(self.token_spans, dtype=np.int64)
        n = self.labels.size
        if self.token_spans.shape != (n, 2):
            raise ValueError("one token span per word required")
        if n:
            if self.token_spans[0, 0] != 0:
                raise ValueError("spans must start at token 0")
            if np.any(self.token_spans[1:, 0] != self.token_spans[:-1, 1]):
                raise ValueError("spans must tile the token axis contiguously")
            if np.any(self.token_spans[:, 1] <= self.token_spans[:, 0]):
                raise ValueError("empty token span")

    @property
    def n_words(self) -> int:
        return self.labels.size


def word_token_spans(n_words: int, w_samples: int, downsample: int) -> np.ndarray:
    """Span n covers [floor(n*w/r), floor((n+1)*w/r))."""
    edges = (np.arange(n_words + 1, dtype=np.int64) * w_samples) // downsample
    return np.stack([edges[:-1], edges[1:]], axis=1)


def build_word_input(rec: Recording, events, n_words: int = 50,
                     downsample: int = 12, sig_cfg: SignalConfig = None,
                     word_s: float = 3.0, lead_s: float = 0.5) -> WordSequence:
    """Assemble one sequence from a prepared (filtered + resampled) recording.

    Each word contributes the window [onset - lead_s, onset - lead_s + word_s],
    standardized on its own (the leading 0.5 s doubles as the baseline), and
    events whose window falls outside the recording are skipped.
    """
    sig_cfg = sig_cfg or SignalConfig()
    rate = rec.sample_rate_hz
    w_samples = int(round(word_s * rate))
    slices, labels, stim = [], [], None
    for ev in events:
        start = int(round((ev.onset_s - lead_s) * rate))
        if start < 0 or start + w_samples > rec.n_samples:
            continue
        sl = rec.data[:, start:start + w_samples]
        slices.append(standardize_array(sl, rate, segment_s=word_s,
                                        baseline_s=lead_s, clamp=sig_cfg.clamp))
        labels.append(ev.label)
        if stim is None:
            stim = ev.stimulus_id
        if len(slices) == n_words:
            break
    if len(slices) < n_words:
        raise ValueError(f"only {len(slices)} usable events, need {n_words}")
    return WordSequence(signal=np.concatenate(slices, axis=1),
                        labels=np.array(labels),
                        token_spans=word_token_spans(n_words, w_samples,
                                                     downsample),
                        stimulus_id=stim or "")


def build_word_sequences(rec: Recording, n_words: int = 50,
                         downsample: int = 12, sig_cfg: SignalConfig = None,
                         word_s: float = 3.0, lead_s: float = 0.5):
    """Split a recording's events into consecutive runs sharing a stimulus id
    and build one sequence per run of n_words; runs longer than n_words yield
    every non-overlapping window so shorter sequences don't discard data."""
    runs = []
    for ev in rec.events:
        if runs and runs[-1][0] == ev.stimulus_id:
            runs[-1][1].append(ev)
        else:
            runs.append((ev.stimulus_id, [ev]))
    out = []
    for _sid, evs in runs:
        for start in range(0, len(evs) - n_words + 1, n_words):
            out.append(build_word_input(rec, evs[start:start + n_words],
                                        n_words, downsample, sig_cfg,
                                        word_s, lead_s))
    return out


@dataclass
class PreparedSequence:
    """A sequence tokenized and padded, ready for the backbone."""
    seq: WordSequence
    grid: object
    valid: np.ndarray
    sensors: object

    @property
    def labels(self):
        return self.seq.labels

    @property
    def stimulus_id(self):
        return self.seq.stimulus_id


def prepare_sequence(seq: WordSequence, sensors, codec: RvqCodec,
                     c_max: int) -> PreparedSequence:
    padded, valid = pad_and_mask(seq.signal, c_max)
    return PreparedSequence(seq=seq, grid=rvq_encode(codec, padded),
                            valid=valid, sensors=sensors)


# ---------------------------------------------------------------- pooling

def pool_word_features(h_final: Tensor, spans: np.ndarray,
                       valid_mask: np.ndarray) -> Tensor:
    """Mean over each word's token span, then flatten valid channels:
    [N, C_valid * d_model]."""
    spans = np.asarray(spans)
    if np.any(spans[:, 1] <= spans[:, 0]):
        raise ValueError("empty token span")
    t_prime = h_final.shape[1]
    if spans.max() > t_prime:
        raise ValueError("span exceeds the token axis")
    valid_idx = np.flatnonzero(valid_mask)
    hv = take(h_final, valid_idx, axis=0)            # [Cv, T', d]
    n = spans.shape[0]
    pool = np.zeros((t_prime, n), dtype=h_final.data.dtype)
    for i, (a, b) in enumerate(spans):
        pool[a:b, i] = 1.0 / (b - a)
    cv, d = valid_idx.size, h_final.shape[2]
    flat = hv.transpose(1, 0, 2).reshape(t_prime, cv * d)
    return Tensor(pool.T) @ flat                     # [N, Cv*d]


# ---------------------------------------------------------------- head

class DecodeHead:
    """MLP from pooled features to the embedding space plus the contrastive
    temperature/bias pair (temperature is stored as its log)."""

    def __init__(self, d_in: int, d_emb: int, hidden: int = 2048, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.d_in, self.d_emb, self.hidden = d_in, d_emb, hidden
        # frozen input standardization, set once from the train split
        self.feat_mu = np.zeros(d_in, dtype=np.float32)
        self.feat_sd = np.ones(d_in, dtype=np.float32)
        self.params = {
            "decode/w1": Tensor(_trunc_normal(rng, (d_in, hidden)), requires_grad=True),
            "decode/b1": Tensor(np.zeros(hidden, dtype=np.float32), requires_grad=True),
            "decode/w2": Tensor(_trunc_normal(rng, (hidden, d_emb)), requires_grad=True),
            "decode/b2": Tensor(np.zeros(d_emb, dtype=np.float32), requires_grad=True),
            "decode/log_t": Tensor(np.float32(np.log(10.0)), requires_grad=True),
            "decode/bias": Tensor(np.float32(-10.0), requires_grad=True),
        }

    def calibrate(self, feats: np.ndarray) -> None:
        """Freeze input statistics so head behavior does not depend on the
        overall scale of backbone features."""
        self.feat_mu = feats.mean(axis=0).astype(np.float32)
        self.feat_sd = np.maximum(feats.std(axis=0), 1e-6).astype(np.float32)

    def __call__(self, feats: Tensor) -> Tensor:
        p = self.params
        x = (feats - self.feat_mu) * (1.0 / self.feat_sd)
        return selu(x @ p["decode/w1"] + p["decode/b1"]) @ p["decode/w2"] \
            + p["decode/b2"]

    def temperature(self) -> Tensor:
        return self.params["decode/log_t"].exp()

    def bias(self) -> Tensor:
        return self.params["decode/bias"]

    def tensors(self) -> dict:
        out = {name: t.data for name, t in self.params.items()}
        out["decode/feat_mu"] = self.feat_mu
        out["decode/feat_sd"] = self.feat_sd
        return out

    @classmethod
    def from_tensors(cls, tensors: dict, hidden: int = None) -> "DecodeHead":
        w1 = tensors["decode/w1"]
        head = cls(d_in=w1.shape[0], d_emb=tensors["decode/w2"].shape[1],
                   hidden=w1.shape[1])
        for name in head.params:
            head.params[name].data = np.asarray(tensors[name], dtype=np.float32)
        if "decode/feat_mu" in tensors:
            head.feat_mu = np.asarray(tensors["decode/feat_mu"], dtype=np.float32)
            head.feat_sd = np.asarray(tensors["decode/feat_sd"], dtype=np.float32)
        return head


# ---------------------------------------------------------------- loss

def _normalize_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(n, 1e-12)


def dsiglip_pair_mask(labels: np.ndarray):
    """(sign matrix y, inclusion mask): +1 diagonal, -1 elsewhere; off-diagonal
    pairs of equal labels are excluded."""
    labels = np.asarray(labels)
    n = labels.size
    y = -np.ones((n, n), dtype=np.float32)
    np.fill_diagonal(y, 1.0)
    same = labels[:, None] == labels[None, :]
    incl = ~(same & ~np.eye(n, dtype=bool))
    return y, incl


def dsiglip_loss(pred: Tensor, targets, labels, t, b) -> Tensor:
    """-mean over included pairs of log sigmoid(y_ij * (t*cos_ij + b))."""
    n = pred.shape[0]
    if n < 2:
        raise ValueError("need at least 2 words for the contrastive loss")
    tgt = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    tgt = _normalize_rows(tgt.astype(np.float64)).astype(np.float32)
    norm = ((pred * pred).sum(axis=-1, keepdims=True)).sqrt()
    pn = pred / (norm + 1e-12)
    cos = pn @ Tensor(tgt.T)
    z = cos * t + b
    y, incl = dsiglip_pair_mask(labels)
    n_incl = int(incl.sum())
    if n_incl == 0:
        raise ValueError("every pair is excluded")
    terms = logsigmoid(z * y) * incl.astype(np.float32)
    return -terms.sum() / float(n_incl)


# ---------------------------------------------------------------- retrieval

def retrieve_words(pred: np.ndarray, vocab: Vocabulary, k: int) -> np.ndarray:
    """Indices of the k nearest vocabulary rows by cosine, per prediction.
    Ties resolve to the lower index (stable sort on negated similarity)."""
    if k > vocab.size:
        raise ValueError(f"k={k} exceeds vocabulary size {vocab.size}")
    pred = np.asarray(pred, dtype=np.float64)
    sims = _normalize_rows(pred) @ vocab.embeddings.T
    order = np.argsort(-sims, axis=1, kind="stable")
    return order[:, :k]


def topk_balanced_accuracy(rankings: np.ndarray, labels: np.ndarray,
                           n_classes: int, k: int = 10) -> float:
    """Macro average over classes present in `labels` of the per-class top-k
    hit rate, as a percentage."""
    rankings = np.asarray(rankings)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("no predictions to score")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("label outside the vocabulary")
    if rankings.shape[1] < k:
        raise ValueError(f"rankings carry fewer than k={k} entries")
    hits = (rankings[:, :k] == labels[:, None]).any(axis=1)
    accs = [hits[labels == c].mean() for c in np.unique(labels)]
    return float(np.mean(accs) * 100.0)


# ---------------------------------------------------------------- drivers

@dataclass
class FinetuneConfig:
    d_emb: int = 64
    head_hidden: int = 2048
    lr_backbone: float = 1e-5
    lr_head: float = 1e-3
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    max_epochs: int = 50
    patience: int = 10
    k: int = 10
    n_words: int = 50
    seed: int = 0


def decode_forward(bb: Backbone, codec: RvqCodec, head: DecodeHead,
                   ps: PreparedSequence) -> Tensor:
    h = forward(bb, codec, ps.grid, ps.sensors)
    feats = pool_word_features(h, ps.seq.token_spans, ps.valid)
    return head(feats)


def eval_sequences(bb, codec, head, sequences, vocab: Vocabulary, k: int = 10):
    """(mean loss, balanced top-k accuracy) over a list of PreparedSequence."""
    losses, ranks, labels = [], [], []
    with no_grad():
        for ps in sequences:
            pred = decode_forward(bb, codec, head, ps)
            tgt = vocab.embeddings[ps.labels]
            loss = dsiglip_loss(pred, tgt, ps.labels, head.temperature(),
                                head.bias())
            losses.append(loss.item())
            ranks.append(retrieve_words(pred.data, vocab, k))
            labels.append(ps.labels)
    if not losses:
        raise ValueError("no sequences to evaluate")
    acc = topk_balanced_accuracy(np.concatenate(ranks), np.concatenate(labels),
                                 vocab.size, k=k)
    return float(np.mean(losses)), acc


def _snapshot(params: dict) -> dict:
    return {name: t.data.copy() for name, t in params.items()}


def _restore(params: dict, snap: dict) -> None:
    for name, t in params.items():
        t.data = snap[name].copy()


@dataclass
class FinetuneResult:
    backbone: Backbone
    head: DecodeHead
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = -np.inf
    test_loss: float = np.nan
    test_acc: float = np.nan
    best_path: str = ""


def finetune_run(bb: Backbone, codec: RvqCodec, splits: dict,
                 vocab: Vocabulary, cfg: FinetuneConfig, out_dir,
                 head: DecodeHead = None) -> FinetuneResult:
    """End-to-end fine-tuning: backbone at lr_backbone, head at lr_head,
    one 50-word sequence per update, early stopping on validation balanced
    accuracy.  Test metrics come from the best-validation snapshot, which is
    also what best.ckpt holds."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, val, test = splits["train"], splits["val"], splits["test"]
    if not train or not val:
        raise ValueError("need non-empty train and val splits")
    d_in = int(train[0].valid.sum()) * bb.cfg.d_model
    if head is None:
        head = DecodeHead(d_in, cfg.d_emb, hidden=cfg.head_hidden,
                          seed=cfg.seed)
        with no_grad():
            init_feats = [pool_word_features(
                forward(bb, codec, ps.grid, ps.sensors), ps.seq.token_spans,
                ps.valid).data for ps in train]
        head.calibrate(np.concatenate(init_feats, axis=0))
    if head.d_in != d_in:
        raise ValueError(f"head expects {head.d_in} features, data has {d_in}")
    if vocab.d_emb != head.d_emb:
        raise ValueError("vocabulary embedding size does not match the head")
    for ps in train + val + test:
        if ps.labels.max() >= vocab.size:
            raise ValueError("sequence label outside the vocabulary")

    opt = AdamW([(bb.params, cfg.lr_backbone), (head.params, cfg.lr_head)],
                weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    rng = np.random.default_rng(cfg.seed)
    result = FinetuneResult(backbone=bb, head=head)
    result.best_path = str(out_dir / "best.ckpt")
    best_snap = None
    since_best = 0

    f = open(out_dir / "metrics.csv", "w", newline="")
    writer = csv.writer(f)
    writer.writerow(["epoch", "split", "loss", "topk_balanced_acc"])
    try:
        for epoch in range(cfg.max_epochs):
            order = rng.permutation(len(train))
            ep_losses = []
            for idx in order:
                ps = train[idx]
                opt.zero_grad()
                pred = decode_forward(bb, codec, head, ps)
                tgt = vocab.embeddings[ps.labels]
                loss = dsiglip_loss(pred, tgt, ps.labels, head.temperature(),
                                    head.bias())
                if not np.isfinite(loss.item()):
                    raise FloatingPointError(
                        f"non-finite loss {loss.item()} in epoch {epoch}")
                loss.backward()
                opt.step()
                ep_losses.append(loss.item())
            train_loss = float(np.mean(ep_losses))
            val_loss, val_acc = eval_sequences(bb, codec, head, val, vocab,
                                               k=cfg.k)
            writer.writerow([epoch, "train", f"{train_loss:.6f}", ""])
            writer.writerow([epoch, "val", f"{val_loss:.6f}", f"{val_acc:.4f}"])
            result.history.append({"epoch": epoch, "train_loss": train_loss,
                                   "val_loss": val_loss, "val_acc": val_acc})
            if val_acc > result.best_val_acc:
                result.best_val_acc = val_acc
                result.best_epoch = epoch
                best_snap = (_snapshot(bb.params), _snapshot(head.params))
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    break
        if best_snap is not None:
            _restore(bb.params, best_snap[0])
            _restore(head.params, best_snap[1])
        if test:
            result.test_loss, result.test_acc = eval_sequences(
                bb, codec, head, test, vocab, k=cfg.k)
            writer.writerow([result.best_epoch, "test",
                             f"{result.test_loss:.6f}",
                             f"{result.test_acc:.4f}"])
    finally:
        f.close()
    dataio.save_model(result.best_path, bb, codec,
                      extra={"best_epoch": result.best_epoch,
                             "val_acc": result.best_val_acc},
                      extra_tensors=head.tensors())
    return result


# ---------------------------------------------------------------- probes

@dataclass
class ProbeConfig:
    d_emb: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    epochs: int = 60
    k: int = 10
    seed: int = 0
    word_s: float = 3.0


class LinearProbe:
    """Single affine map to the embedding space plus contrastive t/b."""

    def __init__(self, d_in: int, d_emb: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.d_in, self.d_emb = d_in, d_emb
        self.params = {
            "probe/w": Tensor(_trunc_normal(rng, (d_in, d_emb)), requires_grad=True),
            "probe/b": Tensor(np.zeros(d_emb, dtype=np.float32), requires_grad=True),
            "probe/log_t": Tensor(np.float32(np.log(10.0)), requires_grad=True),
            "probe/bias": Tensor(np.float32(-10.0), requires_grad=True),
        }

    def __call__(self, feats: Tensor) -> Tensor:
        return feats @ self.params["probe/w"] + self.params["probe/b"]

    def temperature(self) -> Tensor:
        return self.params["probe/log_t"].exp()

    def bias(self) -> Tensor:
        return self.params["probe/bias"]


def sequence_features(bb: Backbone, codec: RvqCodec, ps: PreparedSequence,
                      mode: str = "full", context_s: float = None,
                      word_s: float = 3.0) -> np.ndarray:
    """Pooled per-word features [N, Cv*d_model] with a frozen backbone.

    "full" runs the whole sequence in one pass.  "matched" limits context to
    the pre-training length: the sequence is cut into independent chunks of
    floor(context_s / word_s) words, each forwarded on its own.
    """
    seq = ps.seq
    n = seq.n_words
    w_samples = seq.signal.shape[1] // n
    r = ps.grid.downsample
    if mode == "full":
        chunk = n
    elif mode == "matched":
        if context_s is None:
            raise ValueError("matched mode needs context_s")
        chunk = max(1, int(np.floor(context_s / word_s)))
        chunk = min(chunk, n)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    feats = []
    with no_grad():
        for a in range(0, n, chunk):
            b = min(a + chunk, n)
            sl = seq.signal[:, a * w_samples:b * w_samples]
            padded, valid = pad_and_mask(sl, bb.cfg.c_max)
            grid = rvq_encode(codec, padded)
            h = forward(bb, codec, grid, ps.sensors)
            spans = word_token_spans(b - a, w_samples, r)
            feats.append(pool_word_features(h, spans, valid).data)
    return np.concatenate(feats, axis=0)


@dataclass
class ProbeResult:
    probe: LinearProbe
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = -np.inf
    test_loss: float = np.nan
    test_acc: float = np.nan


def linear_probe_run(bb: Backbone, codec: RvqCodec, splits: dict,
                     vocab: Vocabulary, cfg: ProbeConfig, mode: str = "full",
                     context_s: float = None) -> ProbeResult:
    """Train the affine probe on cached features; the backbone never sees a
    gradient (features are computed under no_grad up front)."""
    cached = {name: [(sequence_features(bb, codec, ps, mode, context_s,
                                        cfg.word_s), ps.labels)
                     for ps in seqs] for name, seqs in splits.items()}
    train = cached["train"]
    if not train:
        raise ValueError("empty train split")
    # standardize with train statistics so probe behavior is invariant to
    # the overall scale of backbone features
    stacked = np.concatenate([f for f, _ in train], axis=0)
    mu = stacked.mean(axis=0)
    sd = np.maximum(stacked.std(axis=0), 1e-6)
    cached = {name: [((f - mu) / sd, lab) for f, lab in items]
              for name, items in cached.items()}
    train = cached["train"]
    probe = LinearProbe(train[0][0].shape[1], cfg.d_emb, seed=cfg.seed)
    opt = AdamW([(probe.params, cfg.lr)], weight_decay=cfg.weight_decay,
                clip_norm=cfg.clip_norm)
    rng = np.random.default_rng(cfg.seed)
    result = ProbeResult(probe=probe)
    best_snap = None

    def evaluate(items):
        losses, ranks, labels = [], [], []
        with no_grad():
            for feats, lab in items:
                pred = probe(Tensor(feats))
                loss = dsiglip_loss(pred, vocab.embeddings[lab], lab,
                                    probe.temperature(), probe.bias())
                losses.append(loss.item())
                ranks.append(retrieve_words(pred.data, vocab, cfg.k))
                labels.append(lab)
        acc = topk_balanced_accuracy(np.concatenate(ranks),
                                     np.concatenate(labels), vocab.size,
                                     k=cfg.k)
        return float(np.mean(losses)), acc

    for epoch in range(cfg.epochs):
        for idx in rng.permutation(len(train)):
            feats, lab = train[idx]
            opt.zero_grad()
            pred = probe(Tensor(feats))
            loss = dsiglip_loss(pred, vocab.embeddings[lab], lab,
                                probe.temperature(), probe.bias())
            loss.backward()
            opt.step()
        val_loss, val_acc = evaluate(cached["val"]) if cached.get("val") \
            else (np.nan, -np.inf)
        result.history.append({"epoch": epoch, "val_loss": val_loss,
                               "val_acc": val_acc})
        if val_acc > result.best_val_acc:
            result.best_val_acc = val_acc
            result.best_epoch = epoch
            best_snap = _snapshot(probe.params)
    if best_snap is not None:
        _restore(probe.params, best_snap)
    if cached.get("test"):
        result.test_loss, result.test_acc = evaluate(cached["test"])
    return result
