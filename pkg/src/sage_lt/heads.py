"""Cosine classifier, template-averaged initialization and FIT logit recomposition."""
import csv
from dataclasses import dataclass, field

import numpy as np

from .core_math import l2_normalize_backward, l2_normalize_forward

LOGIT_SCALE = 25.0

# carried as data; the desk-scale stub has no text encoder to feed them to
TEMPLATES = (
    "a photo of a {}.", "a bad photo of a {}.", "a photo of many {}.",
    "a sculpture of a {}.", "a photo of the hard to see {}.",
    "a low resolution photo of the {}.", "a rendering of a {}.", "graffiti of a {}.",
    "a bad photo of the {}.", "a cropped photo of the {}.", "a tattoo of a {}.",
    "the embroidered {}.", "a photo of a hard to see {}.", "a bright photo of a {}.",
    "a photo of a clean {}.", "a photo of a dirty {}.", "a dark photo of the {}.",
    "a drawing of a {}.", "a photo of my {}.", "the plastic {}.",
    "a photo of the cool {}.", "a close-up photo of a {}.",
    "a black and white photo of the {}.", "a painting of the {}.",
    "a painting of a {}.", "a pixelated photo of the {}.", "a sculpture of the {}.",
    "a bright photo of the {}.", "a cropped photo of a {}.", "a plastic {}.",
    "a photo of the dirty {}.", "a jpeg corrupted photo of a {}.",
    "a blurry photo of the {}.", "a photo of the {}.", "a good photo of the {}.",
    "a rendering of the {}.", "a {} in a video game.", "a photo of one {}.",
    "a doodle of a {}.", "a close-up photo of the {}.", "the origami {}.",
    "the {} in a video game.", "a sketch of a {}.", "a doodle of the {}.",
    "an origami {}.", "a low resolution photo of a {}.", "the toy {}.",
    "a rendition of the {}.", "a photo of the clean {}.", "a photo of a large {}.",
    "a rendition of a {}.", "a photo of a nice {}.", "a photo of a weird {}.",
    "a blurry photo of a {}.", "a cartoon {}.", "art of a {}.", "a sketch of the {}.",
    "an embroidered {}.", "a pixelated photo of a {}.", "itap of the {}.",
)


@dataclass
class TextEmbeddingSet:
    """Per-class template embeddings, shape ``(C, T_n, d)``."""

    embeddings: np.ndarray
    templates: list = field(default_factory=list)

    def __post_init__(self):
        emb = self.embeddings
        if isinstance(emb, (list, tuple)):
            lengths = {len(rows) for rows in emb}
            if len(lengths) != 1:
                raise ValueError(f"ragged template counts per class: {sorted(lengths)}")
        emb = np.asarray(emb, dtype=np.float64)
        if emb.ndim != 3 or emb.shape[1] < 1:
            raise ValueError("embeddings must have shape (C, T_n, d) with T_n >= 1")
        self.embeddings = emb

    @property
    def n_templates(self):
        return self.embeddings.shape[1]


@dataclass
class ClassifierWeights:
    W: np.ndarray
    W_zs: np.ndarray

    def __post_init__(self):
        self.W_zs = np.array(self.W_zs, dtype=np.float64)
        self.W_zs.setflags(write=False)


def init_classifier_from_text(text):
    """Average template embeddings per class; the trainable copy starts equal."""
    W_zs = text.embeddings.mean(axis=1)
    return ClassifierWeights(W=W_zs.copy(), W_zs=W_zs)


def save_text_embeddings(path, text):
    C, T, d = text.embeddings.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "template"] + [f"dim{j}" for j in range(d)])
        for i in range(C):
            for t in range(T):
                w.writerow([i, t] + [repr(float(v)) for v in text.embeddings[i, t]])


def load_text_embeddings(path):
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["class", "template"]:
            raise ValueError("expected header starting with class,template")
        d = len(header) - 2
        for rec in reader:
            if len(rec) != d + 2:
                raise ValueError(f"row has {len(rec) - 2} dims, header declares {d}")
            rows.setdefault(int(rec[0]), {})[int(rec[1])] = [float(v) for v in rec[2:]]
    classes = sorted(rows)
    if classes != list(range(len(classes))):
        raise ValueError("class ids must be contiguous from 0")
    nested = [[rows[c][t] for t in sorted(rows[c])] for c in classes]
    return TextEmbeddingSet(nested)


def cosine_logits_forward(f, W, scale=LOGIT_SCALE):
    fn, fc = l2_normalize_forward(f)
    wn, wc = l2_normalize_forward(W)
    return scale * fn @ wn.T, (fn, fc, wn, wc, scale)


def cosine_logits(f, W, scale=LOGIT_SCALE):
    """``scale * <f_b/|f_b|, w_i/|w_i|>`` for every sample ``b`` and class ``i``."""
    f = np.asarray(f, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if f.shape[-1] != W.shape[-1]:
        raise ValueError(f"feature width {f.shape[-1]} != classifier width {W.shape[-1]}")
    return cosine_logits_forward(f, W, scale)[0]


def cosine_logits_backward(dz, cache):
    """Returns ``(df, dW)``."""
    fn, fc, wn, wc, scale = cache
    dfn = scale * dz @ wn
    dwn = scale * dz.T @ fn
    return l2_normalize_backward(dfn, fc), l2_normalize_backward(dwn, wc)


def fit_logits(z, z_v, z_t, s1, s2):
    """``z + s1 * z_v + s2 * z_t`` elementwise."""
    z, z_v, z_t = (np.asarray(a, dtype=np.float64) for a in (z, z_v, z_t))
    if not z.shape == z_v.shape == z_t.shape:
        raise ValueError(f"logit shapes differ: {z.shape}, {z_v.shape}, {z_t.shape}")
    return z + s1 * z_v + s2 * z_t
