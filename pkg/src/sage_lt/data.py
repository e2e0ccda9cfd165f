"""Synthetic long-tailed image tasks and the frozen foundation stub.

Each class owns a fixed ``grid x grid`` pattern; samples are the pattern plus
isotropic Gaussian noise. Every (seed, class, split) triple has its own RNG
stream, so the draw for one class never depends on the others.
"""
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import encoder as enc
from .core_math import NonFiniteError, l2_normalize_rows, softmax_rows
from .heads import TEMPLATES, TextEmbeddingSet, cosine_logits_backward, cosine_logits_forward
from .optim import SGD, cosine_lr

SPLIT_TRAIN, SPLIT_TEST, SPLIT_PRETRAIN, SPLIT_PATTERN = 0, 1, 2, 3
DEFAULT_THRESHOLDS = (100, 20)


@dataclass(frozen=True)
class LongTailSpec:
    classes: int
    n1: int
    beta: float
    seed: int = 0

    def __post_init__(self):
        if self.beta < 1:
            raise ValueError("beta must be >= 1")
        if self.n1 < self.beta:
            raise ValueError("n1 must be >= beta so the smallest class keeps a sample")
        if self.classes < 2 and self.beta > 1:
            raise ValueError("an imbalance ratio needs at least two classes")


def longtail_counts(spec):
    """Exponential profile ``round(n1 * beta**(-(i-1)/(C-1)))``."""
    C = spec.classes
    if C == 1:
        return [int(spec.n1)]
    i = np.arange(C)
    counts = np.round(spec.n1 * spec.beta ** (-i / (C - 1))).astype(int)
    return [max(int(c), 1) for c in counts]


def split_groups(counts, thresholds=DEFAULT_THRESHOLDS):
    """``head`` above ``hi``, ``tail`` below ``lo``, ``medium`` otherwise (inclusive)."""
    hi, lo = thresholds
    if not hi > lo >= 1:
        raise ValueError("thresholds must satisfy hi > lo >= 1")
    return ["head" if n > hi else "tail" if n < lo else "medium" for n in counts]


@dataclass(frozen=True)
class SyntheticTaskSpec:
    classes: int = 10
    n1: int = 500
    beta: float = 100.0
    grid: int = 8
    patch: int = 4
    noise: float = 1.5
    test_per_class: int = 100
    pretrain_per_class: int = 200
    separation: float = 1.0
    seed: int = 0

    @property
    def longtail(self):
        return LongTailSpec(self.classes, self.n1, self.beta, self.seed)

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    counts: list

    def __len__(self):
        return len(self.labels)


def class_patterns(task):
    """One smooth zero-mean pattern per class, scaled by ``separation``."""
    pats = []
    g = task.grid
    for c in range(task.classes):
        rng = np.random.default_rng([task.seed, c, SPLIT_PATTERN])
        raw = rng.normal(size=(g + 2, g + 2))
        # 3x3 box blur gives spatially coherent blobs
        sm = sum(raw[i:i + g, j:j + g] for i in range(3) for j in range(3)) / 9.0
        sm -= sm.mean()
        sm /= sm.std() + 1e-12
        pats.append(task.separation * sm)
    return np.stack(pats)


def _draw(task, patterns, counts, split):
    images, labels = [], []
    for c, n in enumerate(counts):
        rng = np.random.default_rng([task.seed, c, split])
        noise = rng.normal(size=(n, task.grid, task.grid))
        images.append(patterns[c] + task.noise * noise)
        labels.append(np.full(n, c, dtype=np.int64))
    return Dataset(np.concatenate(images), np.concatenate(labels), list(counts))


def generate(task):
    """Long-tailed training set and balanced test set."""
    patterns = class_patterns(task)
    counts = longtail_counts(task.longtail)
    train = _draw(task, patterns, counts, SPLIT_TRAIN)
    test = _draw(task, patterns, [task.test_per_class] * task.classes, SPLIT_TEST)
    return train, test


def pretrain_corpus(task):
    patterns = class_patterns(task)
    return _draw(task, patterns, [task.pretrain_per_class] * task.classes, SPLIT_PRETRAIN)


def save_dataset(directory, data, task=None, thresholds=DEFAULT_THRESHOLDS):
    """``meta.json`` + ``samples.bin`` (<f8 images) + ``labels.bin`` (<u4)."""
    os.makedirs(directory, exist_ok=True)
    meta = {
        "n": len(data),
        "grid": int(data.images.shape[1]),
        "counts": [int(c) for c in data.counts],
        "groups": split_groups(data.counts, thresholds),
        "spec": asdict(task) if task is not None else None,
    }
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    data.images.astype("<f8").tofile(os.path.join(directory, "samples.bin"))
    data.labels.astype("<u4").tofile(os.path.join(directory, "labels.bin"))


def load_dataset(directory):
    with open(os.path.join(directory, "meta.json")) as fh:
        meta = json.load(fh)
    g = meta["grid"]
    images = np.fromfile(os.path.join(directory, "samples.bin"), dtype="<f8")
    labels = np.fromfile(os.path.join(directory, "labels.bin"), dtype="<u4")
    return Dataset(
        images.reshape(meta["n"], g, g).astype(np.float64),
        labels.astype(np.int64),
        meta["counts"],
    )


# ---------------------------------------------------------------------------
# foundation stub


@dataclass
class FoundationBundle:
    """Frozen pre-trained encoder plus the pseudo-text inputs for the classifier."""

    config: enc.EncoderConfig
    params: dict
    head: np.ndarray
    class_means: np.ndarray
    text: TextEmbeddingSet
    task_digest: str = ""
    history: list = field(default_factory=list)

    def __post_init__(self):
        for arr in list(self.params.values()) + [self.head, self.class_means, self.text.embeddings]:
            arr.setflags(write=False)

    def checksum(self):
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        for arr in (self.head, self.class_means, self.text.embeddings):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def features(self, images, batch=512):
        """Frozen CLS features, computed in chunks."""
        out = [enc.encode(images[i:i + batch], self.params, self.config)[0]
               for i in range(0, len(images), batch)]
        return np.concatenate(out) if out else np.zeros((0, self.config.width))


@dataclass(frozen=True)
class PretrainConfig:
    depth: int = 2
    width: int = 32
    heads: int = 2
    epochs: int = 12
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    scale: float = 10.0
    n_templates: int = len(TEMPLATES)
    jitter: float = 0.05
    seed: int = 0


def build_foundation(task, cfg=PretrainConfig()):
    """Pre-train a plain encoder + cosine head on a balanced draw, then freeze it.

    Template embeddings for each class are the unit-normalized class-mean
    CLS feature plus Gaussian jitter, one copy per template.
    """
    corpus = pretrain_corpus(task)
    config = enc.EncoderConfig(
        depth=cfg.depth, width=cfg.width, heads=cfg.heads, bottleneck=max(1, cfg.width // 8),
        grid=task.grid, patch=task.patch, mode="plain",
    )
    rng = np.random.default_rng([cfg.seed, 7])
    params = enc.init_encoder(config, rng)
    params["head"] = l2_normalize_rows(rng.normal(size=(task.classes, config.width)))
    opt = SGD(params, cfg.momentum)

    n = len(corpus)
    steps_per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    step = 0
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            x, y = corpus.images[idx], corpus.labels[idx]
            try:
                f, _, cache = enc.encode(x, params, config)
                z, zc = cosine_logits_forward(f, params["head"], cfg.scale)
                p = softmax_rows(z)
            except NonFiniteError as e:
                raise FloatingPointError(f"pretraining diverged at epoch {epoch}: {e}") from None
            loss = float(-np.mean(np.log(p[np.arange(len(y)), y])))
            if not np.isfinite(loss):
                raise FloatingPointError(f"pretraining diverged at epoch {epoch}")
            dz = p
            dz[np.arange(len(y)), y] -= 1.0
            df, dW = cosine_logits_backward(dz / len(y), zc)
            grads, _ = enc.encode_backward(df, cache, params, config)
            grads["head"] = dW
            opt.step(grads, cosine_lr(step, total, cfg.lr))
            step += 1
            losses.append(loss)
        history.append(float(np.mean(losses)))

    head = params.pop("head")
    frozen = {k: v.copy() for k, v in params.items()}
    bundle_cfg = config
    feats = np.concatenate([
        enc.encode(corpus.images[i:i + 512], frozen, bundle_cfg)[0]
        for i in range(0, n, 512)
    ])
    means = np.stack([feats[corpus.labels == c].mean(axis=0) for c in range(task.classes)])
    unit = l2_normalize_rows(means)
    jit = np.random.default_rng([cfg.seed, 11]).normal(
        0.0, cfg.jitter, size=(task.classes, cfg.n_templates, config.width))
    text = TextEmbeddingSet(
        unit[:, None, :] + jit,
        [TEMPLATES[t % len(TEMPLATES)].format(f"class_{c}")
         for c in range(task.classes) for t in range(cfg.n_templates)],
    )
    return FoundationBundle(bundle_cfg, frozen, head.copy(), means, text,
                            task_digest=task.digest(), history=history)


def save_bundle(directory, bundle):
    os.makedirs(directory, exist_ok=True)
    arrays = dict(bundle.params)
    arrays["bundle.head"] = bundle.head
    arrays["bundle.class_means"] = bundle.class_means
    arrays["bundle.text"] = bundle.text.embeddings
    enc.save_snapshot(os.path.join(directory, "encoder.bin"), bundle.config, arrays)
    with open(os.path.join(directory, "bundle.json"), "w") as fh:
        json.dump({"task_digest": bundle.task_digest, "history": bundle.history,
                   "templates": bundle.text.templates, "checksum": bundle.checksum()},
                  fh, indent=1)


def load_bundle(directory):
    config, arrays = enc.load_snapshot(os.path.join(directory, "encoder.bin"))
    with open(os.path.join(directory, "bundle.json")) as fh:
        meta = json.load(fh)
    head = arrays.pop("bundle.head")
    means = arrays.pop("bundle.class_means")
    text = TextEmbeddingSet(arrays.pop("bundle.text"), meta["templates"])
    bundle = FoundationBundle(config, arrays, head, means, text,
                              task_digest=meta["task_digest"], history=meta["history"])
    if bundle.checksum() != meta["checksum"]:
        raise ValueError(f"bundle checksum mismatch in {directory}")
    return bundle


def cached_foundation(task, cache_dir, cfg=PretrainConfig()):
    """Build once per (task, pretrain config); reuse from ``cache_dir`` afterwards."""
    key = hashlib.sha256(
        json.dumps([asdict(task), asdict(cfg)], sort_keys=True).encode()
    ).hexdigest()[:16]
    path = os.path.join(cache_dir, key)
    if os.path.exists(os.path.join(path, "bundle.json")):
        return load_bundle(path)
    bundle = build_foundation(task, cfg)
    save_bundle(path, bundle)
    return bundle
