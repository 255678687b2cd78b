"""Mean-of-embeddings intent classifier with attribution-prior training.

The classifier pools the embeddings of the non-PAD tokens, applies an
affine map and a softmax. With an all-PAD (zero) baseline the integrated
gradients path is ``z(alpha) = alpha * W h + b``, so the gradient of any
output with respect to token embedding ``x_i`` is ``W^T dout/dz / m`` and the
attributions have the closed form ``IG[i, j] = (W x_i) . gbar_j / m`` where
``gbar_j`` averages ``d out_j / dz`` over the quadrature points.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import IO, Callable, Optional, Sequence

import numpy as np

from .corpus import MAX_LEN, AnnotatedUtterance, Dataset

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
PROB_FLOOR = 1e-12
MODEL_VERSION = 1


@dataclass
class Vocabulary:
    token_to_id: dict[str, int]
    labels: list[str]

    def __post_init__(self):
        if self.token_to_id.get(PAD_TOKEN) != PAD or self.token_to_id.get(UNK_TOKEN) != UNK:
            raise ValueError("vocabulary must reserve id 0 for PAD and 1 for UNK")
        if sorted(self.token_to_id.values()) != list(range(len(self.token_to_id))):
            raise ValueError("vocabulary ids must be dense and unique")
        if len(self.labels) < 2 or len(set(self.labels)) != len(self.labels):
            raise ValueError("need at least two distinct labels")

    def __len__(self) -> int:
        return len(self.token_to_id)

    def encode(self, tokens: Sequence[str], max_len: int = MAX_LEN) -> list[int]:
        return [self.token_to_id.get(t.lower(), UNK) for t in tokens[:max_len]]

    def label_index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"unknown label {label!r}") from None


def build_vocabulary(records: Sequence, labels: Sequence[str]) -> Vocabulary:
    """Lowercased tokens in order of first appearance after PAD and UNK."""
    token_to_id = {PAD_TOKEN: PAD, UNK_TOKEN: UNK}
    for rec in records:
        for form in rec.forms:
            token_to_id.setdefault(form.lower(), len(token_to_id))
    return Vocabulary(token_to_id, list(labels))


@dataclass
class ClassifierParams:
    embeddings: np.ndarray  # |V| x d, row PAD is zero
    W: np.ndarray  # c x d
    b: np.ndarray  # c
    vocab: Vocabulary

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(self.embeddings.copy(), self.W.copy(), self.b.copy(), self.vocab)

    def check(self) -> None:
        if self.embeddings.shape != (len(self.vocab), self.dim):
            raise ValueError("embedding table does not match vocabulary size")
        if self.W.shape != (len(self.vocab.labels), self.dim) or self.b.shape != (len(self.vocab.labels),):
            raise ValueError("output layer does not match label count")
        for name in ("embeddings", "W", "b"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite entries in {name}")
        if np.any(self.embeddings[PAD] != 0):
            raise ValueError("PAD embedding must be zero")


def init_params(vocab: Vocabulary, dim: int = 64, seed: int = 0, scale: float = 0.1) -> ClassifierParams:
    rng = np.random.default_rng(seed)
    emb = rng.normal(0.0, scale, size=(len(vocab), dim))
    emb[PAD] = 0.0
    W = rng.normal(0.0, scale, size=(len(vocab.labels), dim))
    b = np.zeros(len(vocab.labels))
    return ClassifierParams(emb, W, b, vocab)


@dataclass
class TrainConfig:
    lam: float = 0.0
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    ig_steps: int = 50
    seed: int = 0
    max_len: int = MAX_LEN
    dim: int = 64

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.ig_steps < 1 or self.batch_size < 1 or self.epochs < 0 or self.max_len < 1 or self.dim < 1:
            raise ValueError("ig_steps, batch_size, max_len and dim must be >= 1")


@dataclass
class AttributionMap:
    id: str
    per_class: np.ndarray  # m x c
    attributions: np.ndarray  # m, row mean of per_class
    probabilities: np.ndarray  # c
    predicted_class: int


# -- forward pass --------------------------------------------------------


def _real(params: ClassifierParams, token_ids: Sequence[int]) -> np.ndarray:
    ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= len(params.vocab)):
        bad = ids[(ids < 0) | (ids >= len(params.vocab))][0]
        raise IndexError(f"token id {bad} outside vocabulary of size {len(params.vocab)}")
    return ids


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def pooled(params: ClassifierParams, token_ids: Sequence[int]) -> np.ndarray:
    ids = _real(params, token_ids)
    ids = ids[ids != PAD]
    if ids.size == 0:
        return np.zeros(params.dim)
    return params.embeddings[ids].mean(axis=0)


def logits(params: ClassifierParams, token_ids: Sequence[int]) -> np.ndarray:
    return params.W @ pooled(params, token_ids) + params.b


def forward(params: ClassifierParams, token_ids: Sequence[int]) -> np.ndarray:
    return softmax(logits(params, token_ids))


def cross_entropy(probabilities: Sequence[float], gold_class: int) -> float:
    p = np.asarray(probabilities, dtype=float)
    if not 0 <= gold_class < p.size:
        raise IndexError(f"gold class {gold_class} outside [0, {p.size})")
    return -math.log(max(float(p[gold_class]), PROB_FLOOR))


# -- attributions ---------------------------------------------------------


def _mean_output_jacobian(Z: np.ndarray, output: str) -> np.ndarray:
    """Mean over the rows of ``Z`` (S x c logits) of the c x c Jacobian d out / d z."""
    if output == "logit":
        return np.eye(Z.shape[1])
    if output == "probability":
        P = softmax(Z)
        return np.diag(P.mean(axis=0)) - (P.T @ P) / Z.shape[0]
    raise ValueError(f"unknown IG output {output!r}")


def integrated_gradients_all(
    params: ClassifierParams, token_ids: Sequence[int], steps: int = 50, output: str = "probability"
) -> np.ndarray:
    """IG attributions for every class at once, shape (len(token_ids), c).

    Uses the zero (all-PAD) baseline and the Riemann sum over the points
    ``k / steps`` for ``k = 1..steps``. Attributions are summed over the
    embedding dimensions. PAD positions get zero.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    ids = _real(params, token_ids)
    n, c = ids.size, params.num_classes
    real = ids != PAD
    m = int(real.sum())
    if m == 0:
        return np.zeros((n, c))
    X = params.embeddings[ids]
    h = X[real].mean(axis=0)
    wh = params.W @ h
    alphas = np.arange(1, steps + 1) / steps
    gbar = _mean_output_jacobian(alphas[:, None] * wh + params.b, output)
    U = X @ params.W.T  # n x c, zero on PAD rows
    return (U @ gbar.T) / m


def integrated_gradients(
    params: ClassifierParams, token_ids: Sequence[int], target_class: int, steps: int = 50, output: str = "probability"
) -> np.ndarray:
    if not 0 <= target_class < params.num_classes:
        raise IndexError(f"target class {target_class} outside [0, {params.num_classes})")
    return integrated_gradients_all(params, token_ids, steps, output)[:, target_class]


def class_averaged_attribution(per_class: np.ndarray) -> np.ndarray:
    per_class = np.asarray(per_class, dtype=float)
    if per_class.ndim != 2:
        raise ValueError("per-class attributions must be an m x c matrix")
    return per_class.mean(axis=1)


def attribution_map(
    params: ClassifierParams, token_ids: Sequence[int], record_id: str = "", steps: int = 50, output: str = "logit"
) -> AttributionMap:
    """Per-class and class-averaged IG attributions plus the prediction.

    Averages are taken over logit attributions by default: softmax
    probabilities sum to one, so their class-averaged attribution is zero
    for every input.
    """
    per_class = integrated_gradients_all(params, token_ids, steps, output)
    probs = forward(params, token_ids)
    return AttributionMap(record_id, per_class, class_averaged_attribution(per_class), probs, int(np.argmax(probs)))


# -- losses ----------------------------------------------------------------


def prior_loss(a: Sequence[float], t: Sequence[int]) -> float:
    a = np.asarray(a, dtype=float)
    t = np.asarray(t, dtype=float)
    if a.shape != t.shape:
        raise ValueError(f"attribution length {a.size} != target length {t.size}")
    return float(np.sum((a - t) ** 2))


def joint_loss(ce: float, prior: float, lam: float) -> float:
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    return ce + lam * prior


def _pad_batch(batch_ids: Sequence[Sequence[int]], batch_masks=None):
    width = max(1, max((len(x) for x in batch_ids), default=1))
    ids = np.zeros((len(batch_ids), width), dtype=np.int64)
    targets = np.zeros((len(batch_ids), width))
    for r, x in enumerate(batch_ids):
        ids[r, : len(x)] = x
        if batch_masks is not None:
            targets[r, : len(x)] = batch_masks[r][: len(x)]
    return ids, targets


def batch_loss_and_grads(
    params: ClassifierParams,
    batch_ids: Sequence[Sequence[int]],
    gold: Sequence[int],
    masks: Optional[Sequence[Sequence[int]]] = None,
    lam: float = 0.0,
):
    """Mean joint loss over a batch and its exact gradients.

    The prior term uses the class-averaged logit attribution
    ``a_i = (x_i . sum_j W_j) / (m c)``; with a zero baseline this equals the
    ``steps``-point IG quadrature for any number of steps.

    Returns ``(ce, prior, joint, grads)`` with per-batch means and
    ``grads = {"embeddings", "W", "b"}``.
    """
    ids, targets = _pad_batch(batch_ids, masks)
    B, c = ids.shape[0], params.num_classes
    gold = np.asarray(gold, dtype=np.int64)
    real = ids != PAD
    m = real.sum(axis=1)
    m_safe = np.maximum(m, 1).astype(float)

    X = params.embeddings[ids] * real[..., None]  # B x L x d
    H = X.sum(axis=1) / m_safe[:, None]
    Z = H @ params.W.T + params.b
    P = softmax(Z)
    p_gold = P[np.arange(B), gold]
    ce = -np.log(np.maximum(p_gold, PROB_FLOOR))
    dZ = P.copy()
    dZ[np.arange(B), gold] -= 1.0
    dZ[p_gold < PROB_FLOOR] = 0.0  # clamped branch is constant

    dH = dZ @ params.W  # B x d
    dX = dH[:, None, :] / m_safe[:, None, None] * real[..., None]
    gW = dZ.T @ H
    gb = dZ.sum(axis=0)

    use_prior = masks is not None and lam > 0
    if use_prior:
        s = params.W.sum(axis=0)
        scale = 1.0 / (m_safe * c)
        A = (X @ s) * scale[:, None] * real
        R = (A - targets) * real
        prior = np.sum(R**2, axis=1)
        dA = 2.0 * R * scale[:, None]  # B x L
        dX = dX + lam * dA[..., None] * s
        gW = gW + lam * np.einsum("bl,bld->d", dA, X)[None, :]
    else:
        # plain cross-entropy training: the prior is neither computed nor reported
        prior = np.zeros(B)

    gE = np.zeros_like(params.embeddings)
    np.add.at(gE, ids.reshape(-1), dX.reshape(-1, dX.shape[-1]))
    gE[PAD] = 0.0
    grads = {"embeddings": gE / B, "W": gW / B, "b": gb / B}
    ce_mean, prior_mean = float(ce.mean()), float(prior.mean())
    return ce_mean, prior_mean, joint_loss(ce_mean, prior_mean, lam), grads


# -- training --------------------------------------------------------------


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: ClassifierParams, grads: dict) -> None:
        self.t += 1
        for name, g in grads.items():
            p = getattr(params, name)
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1**self.t)
            vhat = v / (1 - self.beta2**self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        params.embeddings[PAD] = 0.0


def _encode_records(records, vocab: Vocabulary, max_len: int, need_masks: bool):
    ids, gold, masks = [], [], []
    for rec in records:
        ids.append(vocab.encode(rec.forms, max_len))
        gold.append(vocab.label_index(rec.intent))
        if isinstance(rec, AnnotatedUtterance):
            masks.append(list(rec.mask[:max_len]))
        elif need_masks:
            raise ValueError(f"record {rec.id} has no explanation mask but lambda > 0")
        else:
            masks.append(None)
    has_all = all(mk is not None for mk in masks)
    return ids, gold, (masks if has_all else None)


def train(
    dataset: Dataset,
    config: TrainConfig,
    history: Optional[list] = None,
    on_epoch: Optional[Callable[[int, dict], None]] = None,
) -> ClassifierParams:
    """Fit the classifier with Adam on shuffled mini-batches of the joint loss.

    ``history``, if given, receives one ``{"ce", "prior", "joint"}`` dict per
    epoch (batch means, averaged over the epoch).
    """
    records = list(dataset.records)
    if not records:
        raise ValueError("cannot train on an empty dataset")
    vocab = build_vocabulary(records, dataset.labels)
    ids, gold, masks = _encode_records(records, vocab, config.max_len, need_masks=config.lam > 0)
    params = init_params(vocab, config.dim, config.seed)
    opt = Adam(lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    n = len(records)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        totals = np.zeros(3)
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            bmasks = [masks[i] for i in idx] if masks is not None else None
            ce, prior, joint, grads = batch_loss_and_grads(
                params, [ids[i] for i in idx], [gold[i] for i in idx], bmasks, config.lam
            )
            opt.step(params, grads)
            totals += (ce, prior, joint)
            batches += 1
        summary = dict(zip(("ce", "prior", "joint"), (totals / batches).tolist()))
        if history is not None:
            history.append(summary)
        if on_epoch is not None:
            on_epoch(epoch, summary)
    params.check()
    return params


def dataset_losses(params: ClassifierParams, records: Sequence, lam: float, max_len: int = MAX_LEN) -> dict:
    """Mean cross-entropy, prior and joint loss of ``params`` over ``records``."""
    ids, gold, masks = _encode_records(records, params.vocab, max_len, need_masks=False)
    ce, prior, joint, _ = batch_loss_and_grads(params, ids, gold, masks, lam)
    return {"ce": ce, "prior": prior, "joint": joint}


def predict(params: ClassifierParams, tokens: Sequence[str], max_len: int = MAX_LEN) -> tuple[str, np.ndarray]:
    probs = forward(params, params.vocab.encode(tokens, max_len))
    return params.vocab.labels[int(np.argmax(probs))], probs


def predict_fn(params: ClassifierParams, max_len: int = MAX_LEN) -> Callable[[Sequence[str]], np.ndarray]:
    """Black-box view of the classifier: token strings -> probabilities."""
    return lambda tokens: forward(params, params.vocab.encode(tokens, max_len))


# -- model files -----------------------------------------------------------


def _num(x: float) -> str:
    return format(float(x), ".17g")


def _nums(values: np.ndarray) -> str:
    return "[" + ",".join(_num(v) for v in np.asarray(values).reshape(-1)) + "]"


def dumps_model(params: ClassifierParams) -> str:
    params.check()
    parts = [
        f'"version":{MODEL_VERSION}',
        '"labels":' + json.dumps(params.vocab.labels, ensure_ascii=False),
        '"vocab":' + json.dumps(params.vocab.token_to_id, ensure_ascii=False, separators=(",", ":")),
        f'"dim":{params.dim}',
        '"embeddings":' + _nums(params.embeddings),
        '"W":' + _nums(params.W),
        '"b":' + _nums(params.b),
    ]
    return "{" + ",".join(parts) + "}\n"


def loads_model(text: str) -> ClassifierParams:
    obj = json.loads(text)
    if obj.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {obj.get('version')!r}")
    vocab = Vocabulary(dict(obj["vocab"]), list(obj["labels"]))
    d = int(obj["dim"])
    V, c = len(vocab), len(vocab.labels)
    emb = np.asarray(obj["embeddings"], dtype=float)
    W = np.asarray(obj["W"], dtype=float)
    b = np.asarray(obj["b"], dtype=float)
    if emb.size != V * d or W.size != c * d or b.size != c:
        raise ValueError("model arrays do not match vocab/labels/dim")
    params = ClassifierParams(emb.reshape(V, d), W.reshape(c, d), b, vocab)
    params.check()
    return params


def save_model(params: ClassifierParams, sink: IO[str]) -> None:
    sink.write(dumps_model(params))


def load_model(stream: IO[str]) -> ClassifierParams:
    return loads_model(stream.read())
