"""Fine-tuning loop: frozen encoder + trainable adapters, classifier and FIT scalars.

The trainable set is one flat dict ``psi``:

    sg.{l}.* / af.{l}.*   adapter parameters (SG-Adapter or AdaptFormer)
    cls.W                 classifier rows
    fit.s1, fit.s2        FIT mixing scalars

Everything in the foundation bundle stays read-only.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from . import encoder as enc
from .core_math import NonFiniteError, l2_normalize_rows
from .data import DEFAULT_THRESHOLDS, split_groups
from .heads import LOGIT_SCALE, cosine_logits_backward, cosine_logits_forward, fit_logits
from .loss import (ClassFrequencies, LossConfig, adjusted_cross_entropy, cf_log_offsets,
                   composite_loss, la_loss)
from .optim import SGD, cosine_lr
from .sg_adapter import build_guidance

GROUPS = ("head", "medium", "tail")


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    sg: bool = True
    init: bool = True
    cf: bool = True
    fit: bool = True
    loss: LossConfig = LossConfig()
    alpha: float = 0.1
    bottleneck: int = 4
    scale: float = LOGIT_SCALE
    thresholds: tuple = DEFAULT_THRESHOLDS

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def flags(self):
        return {"sg": self.sg, "init": self.init, "cf": self.cf, "fit": self.fit}


@dataclass
class Metrics:
    acc_all: float
    acc_head: float = None
    acc_med: float = None
    acc_tail: float = None
    loss_trace: list = field(default_factory=list)
    epoch: int = 0
    split: str = "test"
    loss: float = float("nan")

    def row(self):
        return {
            "epoch": self.epoch, "split": self.split, "acc_all": self.acc_all,
            "acc_head": self.acc_head, "acc_med": self.acc_med,
            "acc_tail": self.acc_tail, "loss": self.loss,
        }


@dataclass
class FineTuned:
    """Trained (or freshly initialized) state on top of a bundle."""

    config: enc.EncoderConfig
    psi: dict
    use_fit: bool = True
    scale: float = LOGIT_SCALE

    def adapter_params(self):
        return {k: v for k, v in self.psi.items() if not k.startswith(("cls.", "fit."))}


def finetune_config(bundle, cfg):
    mode = "sage" if cfg.sg else "adaptformer"
    return replace(bundle.config, mode=mode, bottleneck=cfg.bottleneck, alpha=cfg.alpha)


def init_psi(cfg, bundle, n_classes):
    """Adapters first, then the classifier, from one seeded stream."""
    rng = np.random.default_rng([cfg.seed, 101])
    econf = finetune_config(bundle, cfg)
    psi = enc.init_adapters(econf, rng)
    if cfg.init:
        W = bundle_zero_shot_weights(bundle)
    else:
        W = l2_normalize_rows(rng.normal(size=(n_classes, econf.width)))
    psi["cls.W"] = np.array(W, dtype=np.float64)
    psi["fit.s1"] = np.array(0.0)
    psi["fit.s2"] = np.array(0.0)
    return FineTuned(econf, psi, use_fit=cfg.fit, scale=cfg.scale)


def bundle_zero_shot_weights(bundle):
    return bundle.text.embeddings.mean(axis=1)


def forward_logits(model, bundle, images, f_zs=None):
    """Logits used for prediction: FIT-recomposed when enabled, else plain cosine."""
    params = {**bundle.params, **model.adapter_params()}
    W = model.psi["cls.W"]
    guidance = build_guidance(W) if model.config.mode == "sage" else None
    f, _, _ = enc.encode(images, params, model.config, guidance)
    z, _ = cosine_logits_forward(f, W, model.scale)
    if not model.use_fit:
        return z
    if f_zs is None:
        f_zs = bundle.features(images)
    W_zs = bundle_zero_shot_weights(bundle)
    z_v, _ = cosine_logits_forward(f_zs, W, model.scale)
    z_t, _ = cosine_logits_forward(f, W_zs, model.scale)
    return fit_logits(z, z_v, z_t, model.psi["fit.s1"], model.psi["fit.s2"])


def objective(model, bundle, x, y, f_zs, freq, cfg, offsets=None):
    """Training loss on one batch and its gradient for every entry of ``psi``."""
    psi = model.psi
    econf = model.config
    params = {**bundle.params, **model.adapter_params()}
    W = psi["cls.W"]
    sage = econf.mode == "sage"
    guidance = build_guidance(W) if sage else None
    if offsets is None:
        offsets = cf_log_offsets(freq, cfg.loss) if cfg.cf else np.log(freq.array)

    f, _, cache = enc.encode(x, params, econf, guidance)
    z, zc = cosine_logits_forward(f, W, model.scale)
    if cfg.fit:
        W_zs = bundle_zero_shot_weights(bundle)
        z_v, zvc = cosine_logits_forward(f_zs, W, model.scale)
        z_t, ztc = cosine_logits_forward(f, W_zs, model.scale)
        s1, s2 = psi["fit.s1"], psi["fit.s2"]
        z_hat = fit_logits(z, z_v, z_t, s1, s2)
        loss, (dz, dzv, dzt, dzh) = composite_loss(z, z_v, z_t, z_hat, y, freq, cfg.loss,
                                                   grad=True, log_offsets=offsets)
        ds1 = np.array(np.sum(dzh * z_v))
        ds2 = np.array(np.sum(dzh * z_t))
        df, dW = cosine_logits_backward(dz + dzh, zc)
        _, dW_v = cosine_logits_backward(dzv + s1 * dzh, zvc)
        df_t, _ = cosine_logits_backward(dzt + s2 * dzh, ztc)
        dW = dW + dW_v
        df = df + df_t
    else:
        loss, dz = adjusted_cross_entropy(z, y, offsets, grad=True)
        df, dW = cosine_logits_backward(dz, zc)
        ds1 = ds2 = np.array(0.0)

    grads, dguid = enc.encode_backward(df, cache, params, econf, base_grads=False)
    if sage:
        dW = dW + dguid[None, :] / W.shape[0]
    grads["cls.W"] = dW
    grads["fit.s1"] = ds1
    grads["fit.s2"] = ds2
    return float(loss), grads


def _group_accuracy(pred, labels, groups):
    correct = pred == labels
    out = {"acc_all": float(correct.mean())}
    names = {"head": "acc_head", "medium": "acc_med", "tail": "acc_tail"}
    label_groups = np.asarray(groups, dtype=object)[labels]
    for g, key in names.items():
        mask = label_groups == g
        out[key] = float(correct[mask].mean()) if mask.any() else None
    return out


def evaluate(model, bundle, test, groups, f_zs=None):
    """Top-1 accuracy overall and per head/medium/tail group (``None`` if empty)."""
    logits = forward_logits(model, bundle, test.images, f_zs)
    return Metrics(**_group_accuracy(logits.argmax(axis=1), test.labels, groups))


def evaluate_predictions(pred, labels, groups):
    return Metrics(**_group_accuracy(np.asarray(pred), np.asarray(labels), groups))


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]


def train(cfg, bundle, train_set, test_set=None, groups=None):
    """Fine-tune on ``train_set``; returns ``(model, history)``.

    ``history`` holds one ``Metrics`` per epoch, evaluated on ``test_set``
    when given, with the epoch's mean training loss in ``loss``.
    """
    freq = ClassFrequencies(train_set.counts)
    if groups is None:
        groups = split_groups(train_set.counts, cfg.thresholds)
    model = init_psi(cfg, bundle, freq.n_classes)
    if cfg.fit:
        f_zs_train = bundle.features(train_set.images)
        f_zs_test = bundle.features(test_set.images) if test_set is not None else None
    else:
        f_zs_train = f_zs_test = None
    offsets = cf_log_offsets(freq, cfg.loss) if cfg.cf else np.log(freq.array)
    opt = SGD(model.psi, cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 202])
    n = len(train_set)
    total = cfg.epochs * (-(-n // cfg.batch_size))
    step = 0
    history = []
    trace = []
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _batches(n, cfg.batch_size, rng):
            fz = f_zs_train[idx] if f_zs_train is not None else None
            try:
                loss, grads = objective(model, bundle, train_set.images[idx], train_set.labels[idx],
                                        fz, freq, cfg, offsets)
            except NonFiniteError:
                loss = float("nan")
            if not np.isfinite(loss):
                raise TrainingAborted(
                    f"non-finite loss at epoch {epoch}, step {step} (seed {cfg.seed}, flags {cfg.flags()})")
            opt.step(grads, cosine_lr(step, total, cfg.lr))
            step += 1
            losses.append(loss)
        trace.append(float(np.mean(losses)))
        if test_set is not None:
            m = evaluate(model, bundle, test_set, groups, f_zs_test)
        else:
            m = Metrics(acc_all=float("nan"))
        m.epoch = epoch + 1
        m.loss = trace[-1]
        m.loss_trace = list(trace)
        history.append(m)
    return model, history


def train_baseline(cfg, bundle, train_set, test_set=None, groups=None):
    """AdaptFormer adapters + classifier under the plain balanced (LA) loss.

    Kept as its own loop so the flag-gated path in ``train`` can be checked
    against it.
    """
    base = replace(cfg, sg=False, cf=False, fit=False)
    freq = ClassFrequencies(train_set.counts)
    if groups is None:
        groups = split_groups(train_set.counts, base.thresholds)
    model = init_psi(base, bundle, freq.n_classes)
    econf = model.config
    opt = SGD(model.psi, base.momentum)
    rng = np.random.default_rng([base.seed, 202])
    n = len(train_set)
    total = base.epochs * (-(-n // base.batch_size))
    step = 0
    history, trace = [], []
    for epoch in range(base.epochs):
        losses = []
        for idx in _batches(n, base.batch_size, rng):
            x, y = train_set.images[idx], train_set.labels[idx]
            params = {**bundle.params, **model.adapter_params()}
            try:
                f, _, cache = enc.encode(x, params, econf)
                z, zc = cosine_logits_forward(f, model.psi["cls.W"], model.scale)
                loss, dz = la_loss(z, y, freq, grad=True)
            except NonFiniteError:
                loss = float("nan")
            if not np.isfinite(loss):
                raise TrainingAborted(f"non-finite baseline loss at epoch {epoch}, step {step}")
            df, dW = cosine_logits_backward(dz, zc)
            grads, _ = enc.encode_backward(df, cache, params, econf, base_grads=False)
            grads["cls.W"] = dW
            grads["fit.s1"] = np.array(0.0)
            grads["fit.s2"] = np.array(0.0)
            opt.step(grads, cosine_lr(step, total, base.lr))
            step += 1
            losses.append(loss)
        trace.append(float(np.mean(losses)))
        m = evaluate(model, bundle, test_set, groups) if test_set is not None else Metrics(float("nan"))
        m.epoch, m.loss, m.loss_trace = epoch + 1, trace[-1], list(trace)
        history.append(m)
    return model, history
