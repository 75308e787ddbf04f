"""Pixel-level adversarial domain adaptation for a pretrained STNet.

The fused feature map of STNet is the boundary between feature extractor
and predictor.  A small fully convolutional classifier labels every
feature pixel as source (0) or target (1).  Each step the network
minimizes prediction MSE on both domains plus ``lambda_adv`` times the
classifier's BCE against inverted labels, then the classifier is updated
on detached features with the true labels.

The MSE is measured in persons squared while the BCE is unitless, so the
adversarial term is multiplied by the squared mean fine-cell population of
the pre-training data.  ``lambda_adv`` therefore weighs the BCE against
the MSE expressed in those units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import layers as nn
from .autograd import Adam, Tensor
from .checkpoint import ModelCheckpoint
from .errors import ConfigError, ShapeError, TrainError
from .grid import WindowSample
from .stnet import (STNet, _check_loss, batch_stream, extract_features, predict_from_features,
                    stack_samples, to_checkpoint)

SOURCE, TARGET = 0.0, 1.0


@dataclass
class PadaConfig:
    lambda_adv: float = 0.1
    steps: int = 100
    batch_size: int = 8
    source_ratio: float = 1.0  # source samples per target sample in each step
    lr: float = 1e-4
    classifier_lr: float = 1e-3
    classifier_channels: int = 16
    classifier_depth: int = 1  # res-blocks in the classifier trunk
    freeze_extractor: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.lambda_adv < 0:
            raise ConfigError("lambda_adv must be nonnegative")
        if self.source_ratio < 0:
            raise ConfigError("source_ratio must be nonnegative")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")


class DomainClassifier(nn.Module):
    """Conv trunk followed by a per-pixel two-layer MLP."""

    def __init__(self, c_in: int, hidden: int, depth: int, rng: np.random.Generator):
        self.c_in = c_in
        self.stem = nn.Conv2d(c_in, hidden, 3, rng)
        self.blocks = [nn.ResBlock(hidden, rng) for _ in range(depth)]
        self.fc1 = nn.Linear(hidden, hidden, rng)
        self.fc2 = nn.Linear(hidden, 1, rng)

    def forward(self, features: Tensor) -> Tensor:
        return domain_classifier_forward(features, self)


def domain_classifier_forward(features: Tensor, p: DomainClassifier) -> Tensor:
    """Per-pixel probability of the target domain, ``[B, 1, H, W]``."""
    if features.ndim != 4 or features.shape[1] != p.c_in:
        raise ShapeError(f"classifier expects [B, {p.c_in}, H, W], got {features.shape}")
    h = ag.relu(p.stem(features))
    for block in p.blocks:
        h = block(h)
    B, C, H, W = h.shape
    pixels = h.transpose(0, 2, 3, 1).reshape(B * H * W, C)
    logits = p.fc2(ag.relu(p.fc1(pixels)))
    return ag.sigmoid(logits.reshape(B, H, W, 1).transpose(0, 3, 1, 2))


@dataclass
class PadaLog:
    mse: list[float] = field(default_factory=list)
    adv: list[float] = field(default_factory=list)
    classifier_loss: list[float] = field(default_factory=list)
    classifier_acc: list[float] = field(default_factory=list)


def _pixel_accuracy(probs: list[np.ndarray], labels: list[float]) -> float:
    hits = sum(float(np.sum((p > 0.5) == (lab > 0.5))) for p, lab in zip(probs, labels))
    return hits / sum(p.size for p in probs)


def pada_finetune(model: STNet, source: list[WindowSample], target: list[WindowSample], cfg: PadaConfig,
                  classifier: DomainClassifier | None = None) -> tuple[ModelCheckpoint, PadaLog]:
    """Adapt ``model`` in place and return its checkpoint plus per-step logs.

    The target batch stream draws from ``default_rng(seed)`` exactly like
    plain fine-tuning, and the source stream uses its own generator, so
    ``lambda_adv = 0`` with no source samples reproduces plain fine-tuning
    bit for bit.
    """
    cfg.validate()
    if not target:
        raise TrainError("PADA needs at least one target sample")
    rng = np.random.default_rng(cfg.seed)
    src_rng = np.random.default_rng([cfg.seed, 1])
    if classifier is None:
        classifier = DomainClassifier(model.cfg.C_B, cfg.classifier_channels, cfg.classifier_depth,
                                      np.random.default_rng([cfg.seed, 2]))
    opt = Adam(model.parameters(), lr=cfg.lr)
    opt_c = Adam(classifier.parameters(), lr=cfg.classifier_lr)
    n_src = int(round(cfg.source_ratio * cfg.batch_size)) if source else 0
    tgt_batches = batch_stream(rng, len(target), cfg.batch_size)
    src_batches = batch_stream(src_rng, len(source), n_src) if n_src else None
    adversarial = cfg.lambda_adv > 0
    unit = model.cfg.input_scale / model.cfg.n ** 2
    adv_weight = cfg.lambda_adv * unit * unit
    log = PadaLog()
    model.train(not cfg.freeze_extractor)  # a frozen extractor keeps its batch-norm statistics too

    for step in range(1, cfg.steps + 1):
        domains = [(stack_samples(target, next(tgt_batches)), TARGET)]
        if src_batches is not None:
            domains.append((stack_samples(source, next(src_batches)), SOURCE))

        feats, mse = [], None
        for (coarse, fine), _ in domains:
            f = extract_features(model, coarse)
            term = nn.mse_loss(predict_from_features(model, f, coarse[:, -1:]), fine)
            mse = term if mse is None else mse + term
            feats.append(f)
        loss, adv_value = mse, 0.0
        if adversarial:
            adv = None
            for f, (_, label) in zip(feats, domains):
                term = nn.bce_loss(classifier(f), np.full((f.shape[0], 1) + f.shape[2:], 1.0 - label))
                adv = term if adv is None else adv + term
            adv_value = adv.item()
            loss = mse + adv * adv_weight
        _check_loss(loss.item(), step, "PADA fine-tuning")
        if not cfg.freeze_extractor:
            loss.backward(opt.params)
            opt.step()
        log.mse.append(mse.item())
        log.adv.append(adv_value)

        if adversarial or cfg.freeze_extractor:
            opt_c.zero_grad()
            cls_loss, probs = None, []
            for f, (_, label) in zip(feats, domains):
                out = classifier(f.detach())
                probs.append(out.data)
                term = nn.bce_loss(out, np.full(out.shape, label))
                cls_loss = term if cls_loss is None else cls_loss + term
            cls_loss.backward(opt_c.params)
            opt_c.step()
            log.classifier_loss.append(cls_loss.item())
            log.classifier_acc.append(_pixel_accuracy(probs, [lab for _, lab in domains]))
            model.zero_grad()
    return to_checkpoint(model, {"pada_steps": cfg.steps}), log
