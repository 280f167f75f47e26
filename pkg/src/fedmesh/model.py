"""Hashed-feature multinomial logistic token tagger.

The model is deliberately small: one weight per (class, hashed feature),
trained with plain SGD (optionally with a proximal pull toward a reference
vector).  Features are FNV-1a hashes of the lowercase token, its character
3-grams, and the neighbouring tokens, folded into a power-of-two table.
Everything here is a pure function of its inputs; parameter vectors are
flat float64 numpy arrays of length ``num_classes * feature_dim``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

TAGS = ("O", "B", "I")
_TAG_INDEX = {tag: i for i, tag in enumerate(TAGS)}

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


class EmptyShardError(ValueError):
    """Raised when a client is asked to train on no data."""


@dataclass(frozen=True)
class TaggedSentence:
    """A tokenized sentence with one BIO tag per token."""

    tokens: tuple[str, ...]
    tags: tuple[str, ...]

    def __post_init__(self):
        if len(self.tokens) != len(self.tags):
            raise ValueError(
                f"{len(self.tokens)} tokens but {len(self.tags)} tags"
            )
        for tag in self.tags:
            if tag not in _TAG_INDEX:
                raise ValueError(f"unknown tag {tag!r}")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.5
    local_epochs: int = 1
    batch_size: int = 32
    fedprox_mu: float = 0.0
    seed: int = 0
    feature_dim: int = 1 << 18
    num_classes: int = 3
    hash_seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigError("local_epochs and batch_size must be >= 1")
        if self.fedprox_mu < 0:
            raise ConfigError("fedprox_mu must be >= 0")
        if self.feature_dim < (1 << 10) or self.feature_dim & (self.feature_dim - 1):
            raise ConfigError("feature_dim must be a power of two >= 2^10")
        if self.num_classes != len(TAGS):
            raise ConfigError(f"num_classes must be {len(TAGS)}")

    @property
    def dims(self) -> int:
        return self.num_classes * self.feature_dim


@dataclass(frozen=True)
class Metrics:
    """Precision/recall/F1 with raw counts; 0/0 ratios are defined as 0."""

    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    level: str

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, level: str) -> "Metrics":
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        return cls(precision, recall, f1, tp, fp, fn, level)


def fnv1a64(data: bytes, seed: int = 0) -> int:
    """64-bit FNV-1a over the seed's 8 little-endian bytes then *data*."""
    h = _FNV_OFFSET
    for byte in seed.to_bytes(8, "little") + data:
        h = ((h ^ byte) * _FNV_PRIME) & _U64
    return h


def _feature_strings(tokens: tuple[str, ...], position: int) -> list[str]:
    token = tokens[position].lower()
    prev_tok = tokens[position - 1].lower() if position > 0 else "<s>"
    next_tok = tokens[position + 1].lower() if position + 1 < len(tokens) else "</s>"
    feats = [f"w={token}", f"p={prev_tok}", f"n={next_tok}"]
    padded = f"^{token}$"
    for i in range(len(padded) - 2):
        feats.append(f"g={padded[i:i + 3]}")
    return feats


def featurize(
    sentence: TaggedSentence | tuple[str, ...],
    feature_dim: int,
    hash_seed: int = 0,
) -> list[np.ndarray]:
    """Hash each token's features into sorted, deduplicated index arrays.

    feature_dim must be a power of two; indices are the low bits of the
    64-bit FNV-1a hash of each namespaced feature string.
    """
    if feature_dim < 2 or feature_dim & (feature_dim - 1):
        raise ConfigError("feature_dim must be a power of two")
    tokens = sentence.tokens if isinstance(sentence, TaggedSentence) else tuple(sentence)
    mask = feature_dim - 1
    out = []
    for pos in range(len(tokens)):
        idx = {
            fnv1a64(feat.encode("utf-8"), hash_seed) & mask
            for feat in _feature_strings(tokens, pos)
        }
        out.append(np.array(sorted(idx), dtype=np.int64))
    return out


@dataclass
class EncodedBatch:
    """CSR-style encoding of a batch of sentences for vectorized training.

    feats holds every token's feature indices back to back; token_ptr[i]
    slices token i's features; sent_ptr slices tokens per sentence.
    """

    feats: np.ndarray
    token_ptr: np.ndarray
    labels: np.ndarray
    sent_ptr: np.ndarray

    @property
    def n_tokens(self) -> int:
        return len(self.labels)

    @property
    def n_sentences(self) -> int:
        return len(self.sent_ptr) - 1

    def sentence_slice(self, order: np.ndarray) -> "EncodedBatch":
        """Reassemble a batch containing the given sentences, in order."""
        feat_runs = []
        label_runs = []
        token_counts = []
        tok_lengths = np.diff(self.token_ptr)
        for s in order:
            t0, t1 = self.sent_ptr[s], self.sent_ptr[s + 1]
            f0, f1 = self.token_ptr[t0], self.token_ptr[t1]
            feat_runs.append(self.feats[f0:f1])
            label_runs.append(self.labels[t0:t1])
            token_counts.append(tok_lengths[t0:t1])
        counts = np.concatenate(token_counts)
        token_ptr = np.zeros(len(counts) + 1, dtype=np.int64)
        np.cumsum(counts, out=token_ptr[1:])
        labels = np.concatenate(label_runs)
        sent_lengths = np.array([len(run) for run in label_runs], dtype=np.int64)
        sent_ptr = np.zeros(len(order) + 1, dtype=np.int64)
        np.cumsum(sent_lengths, out=sent_ptr[1:])
        return EncodedBatch(np.concatenate(feat_runs), token_ptr, labels, sent_ptr)


def encode_sentences(
    sentences: list[TaggedSentence],
    feature_dim: int,
    hash_seed: int = 0,
) -> EncodedBatch:
    """Featurize and pack sentences once so epochs can reuse the arrays."""
    feat_runs: list[np.ndarray] = []
    token_counts: list[int] = []
    labels: list[int] = []
    sent_lengths: list[int] = []
    for sentence in sentences:
        per_token = featurize(sentence, feature_dim, hash_seed)
        for arr in per_token:
            feat_runs.append(arr)
            token_counts.append(len(arr))
        labels.extend(_TAG_INDEX[tag] for tag in sentence.tags)
        sent_lengths.append(len(sentence))
    token_ptr = np.zeros(len(token_counts) + 1, dtype=np.int64)
    np.cumsum(token_counts, out=token_ptr[1:])
    sent_ptr = np.zeros(len(sent_lengths) + 1, dtype=np.int64)
    np.cumsum(sent_lengths, out=sent_ptr[1:])
    feats = np.concatenate(feat_runs) if feat_runs else np.zeros(0, dtype=np.int64)
    return EncodedBatch(feats, token_ptr, np.array(labels, dtype=np.int64), sent_ptr)


def zero_params(config: TrainConfig) -> np.ndarray:
    return np.zeros(config.dims, dtype=np.float64)


def _check_params(params: np.ndarray, config: TrainConfig) -> None:
    if params.ndim != 1 or params.shape[0] != config.dims:
        raise ConfigError(
            f"parameter vector has {params.shape} but config implies dims={config.dims}"
        )


def _token_scores(weights: np.ndarray, batch: EncodedBatch) -> np.ndarray:
    """Per-token class scores: sum of each class row over the token's features."""
    gathered = weights[:, batch.feats]
    return np.add.reduceat(gathered, batch.token_ptr[:-1], axis=1)


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=0, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=0, keepdims=True)


def loss_and_grad(
    params: np.ndarray,
    batch: list[TaggedSentence] | EncodedBatch,
    config: TrainConfig,
    global_reference: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Token-mean softmax cross-entropy and its dense gradient.

    With fedprox_mu > 0 the proximal penalty mu/2 * ||w - w_ref||^2 is added
    (the reference defaults to zero when not supplied, matching a cold start).
    """
    _check_params(params, config)
    if not isinstance(batch, EncodedBatch):
        batch = encode_sentences(batch, config.feature_dim, config.hash_seed)
    if batch.n_tokens == 0:
        raise EmptyShardError("batch contains no tokens")
    weights = params.reshape(config.num_classes, config.feature_dim)
    probs = _softmax(_token_scores(weights, batch))
    n = batch.n_tokens
    token_idx = np.arange(n)
    loss = float(-np.log(probs[batch.labels, token_idx]).mean())

    err = probs.copy()
    err[batch.labels, token_idx] -= 1.0
    counts = np.diff(batch.token_ptr)
    grad = np.zeros_like(weights)
    for cls in range(config.num_classes):
        per_feat = np.repeat(err[cls], counts)
        grad[cls] = np.bincount(
            batch.feats, weights=per_feat, minlength=config.feature_dim
        )
    grad /= n

    mu = config.fedprox_mu
    if mu > 0:
        reference = global_reference if global_reference is not None else np.zeros_like(params)
        diff = params - reference
        loss += 0.5 * mu * float(diff @ diff)
        grad = grad.reshape(-1) + mu * diff
        return loss, grad
    return loss, grad.reshape(-1)


def _sparse_sgd_step(
    weights: np.ndarray,
    batch: EncodedBatch,
    lr: float,
    mu: float,
    reference: np.ndarray | None,
) -> None:
    """One SGD step touching only the features present in the batch.

    Per-feature error sums accumulate in input order and are scaled with the
    same operation order as loss_and_grad, so a full-batch step is bit-equal
    to ``start - lr * grad(start)`` when mu = 0.
    """
    prox = None
    if mu > 0 and reference is not None:
        prox = mu * (weights.reshape(-1) - reference)
    probs = _softmax(_token_scores(weights, batch))
    err = probs
    err[batch.labels, np.arange(batch.n_tokens)] -= 1.0
    counts = np.diff(batch.token_ptr)
    uniq, inv = np.unique(batch.feats, return_inverse=True)
    for cls in range(weights.shape[0]):
        per_feat = np.repeat(err[cls], counts)
        sums = np.bincount(inv, weights=per_feat, minlength=len(uniq))
        sums /= batch.n_tokens
        weights[cls, uniq] -= lr * sums
    if prox is not None:
        flat = weights.reshape(-1)
        flat -= lr * prox


def local_train(
    start: np.ndarray,
    shard: list[TaggedSentence] | EncodedBatch,
    config: TrainConfig,
    global_reference: np.ndarray | None = None,
) -> tuple[np.ndarray, int]:
    """Run local SGD epochs over a shard; returns (new params, examples seen).

    Deterministic for a fixed config.seed: sentence order is reshuffled each
    epoch from one seeded generator.  With fedprox_mu > 0 the proximal pull
    uses *global_reference*, defaulting to the start vector.
    """
    _check_params(start, config)
    if not isinstance(shard, EncodedBatch):
        shard = encode_sentences(shard, config.feature_dim, config.hash_seed)
    if shard.n_sentences == 0:
        raise EmptyShardError("client shard is empty; report 'no data' instead")
    mu = config.fedprox_mu
    reference = None
    if mu > 0:
        reference = global_reference if global_reference is not None else start.copy()
    weights = start.reshape(config.num_classes, config.feature_dim).copy()
    rng = np.random.Generator(np.random.PCG64(config.seed))
    n = shard.n_sentences
    for _ in range(config.local_epochs):
        order = rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            batch = shard.sentence_slice(order[lo:lo + config.batch_size])
            _sparse_sgd_step(weights, batch, config.learning_rate, mu, reference)
    return weights.reshape(-1), n * config.local_epochs


def repair_tags(tags: list[str] | tuple[str, ...]) -> list[str]:
    """Promote I tags with no live entity to the left (start / after O) to B."""
    repaired: list[str] = []
    prev = "O"
    for tag in tags:
        if tag == "I" and prev == "O":
            tag = "B"
        repaired.append(tag)
        prev = tag
    return repaired


def decode_entities(tags: list[str] | tuple[str, ...]) -> set[tuple[int, int]]:
    """BIO tags -> set of (start, end) inclusive spans, after the repair rule."""
    spans: set[tuple[int, int]] = set()
    start = None
    for i, tag in enumerate(repair_tags(tags)):
        if tag == "B":
            if start is not None:
                spans.add((start, i - 1))
            start = i
        elif tag == "O":
            if start is not None:
                spans.add((start, i - 1))
                start = None
    if start is not None:
        spans.add((start, len(tags) - 1))
    return spans


def predict_tags(
    params: np.ndarray, sentence: TaggedSentence, config: TrainConfig
) -> list[str]:
    """Per-token argmax tags for one sentence."""
    _check_params(params, config)
    encoded = encode_sentences([sentence], config.feature_dim, config.hash_seed)
    weights = params.reshape(config.num_classes, config.feature_dim)
    best = _token_scores(weights, encoded).argmax(axis=0)
    return [TAGS[i] for i in best]


def evaluate(
    params: np.ndarray,
    corpus: list[TaggedSentence] | EncodedBatch,
    config: TrainConfig,
) -> tuple[Metrics, Metrics]:
    """Score predictions at entity-strict and token level.

    Entity-strict counts exact (start, end) span matches after BIO repair;
    token level counts non-O tags (a correct non-O tag is a TP, a wrong
    non-O prediction an FP, a missed non-O gold tag an FN).
    """
    _check_params(params, config)
    if not isinstance(corpus, EncodedBatch):
        corpus = encode_sentences(corpus, config.feature_dim, config.hash_seed)
    if corpus.n_tokens == 0:
        zero = Metrics.from_counts(0, 0, 0, "entity-strict")
        return zero, Metrics.from_counts(0, 0, 0, "token")
    weights = params.reshape(config.num_classes, config.feature_dim)
    pred_idx = _token_scores(weights, corpus).argmax(axis=0)
    gold_idx = corpus.labels

    hit = (pred_idx == gold_idx) & (gold_idx != 0)
    tok_tp = int(hit.sum())
    tok_fp = int(((pred_idx != 0) & ~hit).sum())
    tok_fn = int(((gold_idx != 0) & ~hit).sum())

    ent_tp = ent_fp = ent_fn = 0
    for s in range(corpus.n_sentences):
        t0, t1 = corpus.sent_ptr[s], corpus.sent_ptr[s + 1]
        pred_spans = decode_entities([TAGS[i] for i in pred_idx[t0:t1]])
        gold_spans = decode_entities([TAGS[i] for i in gold_idx[t0:t1]])
        ent_tp += len(pred_spans & gold_spans)
        ent_fp += len(pred_spans - gold_spans)
        ent_fn += len(gold_spans - pred_spans)
    return (
        Metrics.from_counts(ent_tp, ent_fp, ent_fn, "entity-strict"),
        Metrics.from_counts(tok_tp, tok_fp, tok_fn, "token"),
    )


def token_count(sentences: list[TaggedSentence]) -> int:
    """Total supervised examples (tokens) in a shard; used as FedAvg weight."""
    return sum(len(s) for s in sentences)
