"""Population mapping network: spatial backbone plus temporal enhancement.

Data path for a batch of coarse sequences ``[B, T, H, W]``:

* the last frame goes through a preliminary extraction unit (two 5x5 convs);
* ``L = T / T_S`` densely connected conv-blocks follow; block ``i`` also
  receives the ``i``-th temporal feature map (earliest first);
* temporal features come from a strided 3-D convolution that merges every
  ``T_S`` slots, then one extraction unit shared by all merged frames;
* the preliminary output and every block output are fused by a 1x1 conv
  (the feature boundary used by domain adaptation);
* ``log2(n)`` upsampling units, a 1-channel head and N^2 normalization
  against the last coarse frame produce the fine map.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from . import layers as nn
from .autograd import Adam, Tensor
from .checkpoint import ModelCheckpoint
from .errors import ConfigError, ShapeError, TrainError
from .grid import WindowSample


@dataclass
class StnetConfig:
    T: int = 48
    T_S: int = 6
    C_B: int = 64
    C_T: int = 16
    n: int = 4
    block_width: int | None = None
    use_tnet: bool = True
    input_scale: float = 1.0
    seed: int = 0

    @property
    def L(self) -> int:
        return self.T // self.T_S

    @property
    def width(self) -> int:
        return self.block_width or self.C_B

    @property
    def upsample_stages(self) -> int:
        return int(np.log2(self.n))

    def validate(self) -> None:
        if self.T % self.T_S:
            raise ConfigError(f"T={self.T} is not divisible by T_S={self.T_S}")
        if self.n < 1 or self.n & (self.n - 1):
            raise ConfigError(f"upscale factor must be a power of two, got {self.n}")
        if self.input_scale <= 0:
            raise ConfigError("input_scale must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class UpsampleUnit(nn.Module):
    """3x3 conv with batch norm, pixel shuffle x2, ReLU."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv = nn.Conv2d(channels, 4 * channels, 3, rng)
        self.bn = nn.BatchNorm2d(4 * channels)

    def forward(self, x: Tensor) -> Tensor:
        return ag.relu(nn.pixel_shuffle(self.bn(self.conv(x)), 2))


class STNet(nn.Module):
    def __init__(self, cfg: StnetConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        C, w = cfg.C_B, cfg.width
        self.prelim = nn.ExtractionUnit(1, C, rng)
        if cfg.use_tnet:
            self.tconv = nn.Conv3dTemporal(1, cfg.C_T, cfg.T_S, rng)
            self.tunit = nn.ExtractionUnit(cfg.C_T, C, rng)
        side = C if cfg.use_tnet else 0
        self.blocks = [nn.DenseBlock(C + i * w, w, rng, c_side=side) for i in range(cfg.L)]
        self.fusion = nn.Conv2d(C + cfg.L * w, C, 1, rng)
        self.ups = [UpsampleUnit(C, rng) for _ in range(cfg.upsample_stages)]
        self.head = nn.Conv2d(C, 1, 3, rng)

    def forward(self, coarse_seq) -> Tensor:
        return stnet_forward(self, coarse_seq)


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def tnet_features(model: STNet, coarse_seq) -> list[Tensor]:
    """Merge every ``T_S`` slots and run the shared unit; earliest period first."""
    cfg = model.cfg
    x = _as_input(coarse_seq)
    if x.ndim != 4 or x.shape[1] != cfg.T:
        raise ShapeError(f"expected [B, {cfg.T}, H, W], got {x.shape}")
    B, T, H, W = x.shape
    merged = model.tconv(x.reshape(B, 1, T, H, W) * (1.0 / cfg.input_scale))  # B, C_T, L, H, W
    frames = merged.transpose(0, 2, 1, 3, 4).reshape(B * cfg.L, cfg.C_T, H, W)
    feats = model.tunit(frames).reshape(B, cfg.L, cfg.C_B, H, W)
    return [feats[:, i] for i in range(cfg.L)]


def _backbone(model: STNet, last: Tensor, temporal: list[Tensor] | None) -> Tensor:
    outputs = [model.prelim(last * (1.0 / model.cfg.input_scale))]
    for i, block in enumerate(model.blocks):
        outputs.append(block(outputs, temporal[i] if temporal is not None else None))
    return model.fusion(ag.concat(outputs, axis=1))


def extract_features(model: STNet, coarse_seq, temporal: bool = True) -> Tensor:
    """Fused pre-upsampling feature map ``[B, C_B, H, W]``."""
    x = _as_input(coarse_seq)
    if x.ndim != 4:
        raise ShapeError(f"expected [B, T, H, W], got {x.shape}")
    feats = tnet_features(model, x) if (temporal and model.cfg.use_tnet) else None
    return _backbone(model, x[:, -1:], feats)


def predict_from_features(model: STNet, features: Tensor, coarse_last) -> Tensor:
    h = features
    for unit in model.ups:
        h = unit(h)
    return nn.n2_normalize(model.head(h), _as_input(coarse_last), model.cfg.n)


def stnet_forward(model: STNet, coarse_seq) -> Tensor:
    x = _as_input(coarse_seq)
    return predict_from_features(model, extract_features(model, x), x[:, -1:])


def snet_forward(model: STNet, coarse_last) -> Tensor:
    """Spatial-only forward from the final coarse frame ``[B, 1, H, W]``."""
    x = _as_input(coarse_last)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"expected [B, 1, H, W], got {x.shape}")
    return predict_from_features(model, _backbone(model, x, None), x)


# -- training ----------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 400
    batch_size: int = 16
    lr: float = 1e-3
    eval_every: int = 20
    patience: int = 10
    seed: int = 0


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    val_rmse: list[tuple[int, float]] = field(default_factory=list)
    best_step: int = 0
    best_val_rmse: float = float("inf")


def stack_samples(samples: list[WindowSample], idx=None) -> tuple[np.ndarray, np.ndarray]:
    chosen = samples if idx is None else [samples[i] for i in idx]
    coarse = np.stack([s.coarse_seq for s in chosen])
    fine = np.stack([s.fine_target for s in chosen])
    return coarse, fine


def batch_stream(rng: np.random.Generator, n: int, batch_size: int):
    """Endless epoch-shuffled index batches."""
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]


def fit_input_scale(samples: list[WindowSample]) -> float:
    scale = float(np.mean([s.coarse_seq[-1].mean() for s in samples]))
    return scale if scale > 0 else 1.0


def predict(model: STNet, samples: list[WindowSample], batch_size: int = 64) -> np.ndarray:
    """Eval-mode predictions ``[S, nH, nW]``."""
    was_training = model.training
    model.eval()
    out = []
    with ag.no_grad():
        for start in range(0, len(samples), batch_size):
            coarse, _ = stack_samples(samples[start:start + batch_size])
            out.append(stnet_forward(model, coarse).data[:, 0])
    model.train(was_training)
    return np.concatenate(out)


def rmse_on(model: STNet, samples: list[WindowSample]) -> float:
    truth = np.stack([s.fine_target[0] for s in samples])
    err = predict(model, samples) - truth
    return float(np.sqrt(np.mean(err * err)))


def _check_loss(value: float, step: int, stage: str) -> None:
    if not np.isfinite(value):
        raise TrainError(f"{stage} diverged at step {step}", {"step": step, "loss": value})


def sgd_step(model: STNet, opt: Adam, coarse: np.ndarray, fine: np.ndarray) -> float:
    pred = stnet_forward(model, coarse)
    loss = nn.mse_loss(pred, fine)
    loss.backward(opt.params)
    opt.step()
    return loss.item()


def to_checkpoint(model: STNet, metrics: dict | None = None) -> ModelCheckpoint:
    return ModelCheckpoint("stnet", model.cfg.to_dict(), model.state_dict(), model.cfg.seed, dict(metrics or {}))


def from_checkpoint(ckpt: ModelCheckpoint) -> STNet:
    if ckpt.kind != "stnet":
        raise ConfigError(f"checkpoint holds a {ckpt.kind!r} model, not stnet")
    model = STNet(StnetConfig(**ckpt.config))
    model.load_state_dict(ckpt.state)
    return model


def train_stnet(model: STNet, train: list[WindowSample], val: list[WindowSample],
                cfg: TrainConfig) -> tuple[ModelCheckpoint, TrainLog]:
    """Adam on fine-map MSE with early stopping on validation RMSE."""
    if not train:
        raise TrainError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr)
    log = TrainLog()
    best_state = model.state_dict()
    stale = 0
    batches = batch_stream(rng, len(train), cfg.batch_size)
    model.train()
    for step in range(1, cfg.steps + 1):
        coarse, fine = stack_samples(train, next(batches))
        loss = sgd_step(model, opt, coarse, fine)
        _check_loss(loss, step, "stnet pre-training")
        log.losses.append(loss)
        if val and (step % cfg.eval_every == 0 or step == cfg.steps):
            score = rmse_on(model, val)
            log.val_rmse.append((step, score))
            if score < log.best_val_rmse:
                log.best_val_rmse, log.best_step = score, step
                best_state = model.state_dict()
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    model.load_state_dict(best_state)
    metrics = {"best_step": log.best_step, "val_rmse": log.best_val_rmse, "train_steps": len(log.losses)}
    return to_checkpoint(model, metrics), log


@dataclass
class FinetuneConfig:
    steps: int = 100
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0


def finetune(model: STNet, samples: list[WindowSample], cfg: FinetuneConfig) -> list[float]:
    """Plain fine-tuning on (usually synthetic) target samples, in place."""
    if not samples:
        raise TrainError("no fine-tuning samples")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr)
    batches = batch_stream(rng, len(samples), cfg.batch_size)
    losses = []
    model.train()
    for step in range(1, cfg.steps + 1):
        coarse, fine = stack_samples(samples, next(batches))
        loss = sgd_step(model, opt, coarse, fine)
        _check_loss(loss, step, "fine-tuning")
        losses.append(loss)
    return losses
