"""POI-conditioned crowd-flow generator and target-domain sample synthesis.

The generator maps a time of day and a POI map to a fine-grained flow frame
(population change to the next slot).  Accumulating generated flows
forward and backward from the single fine reference snapshot, then
projecting every frame onto the real coarse observation of its slot, gives
synthetic fine-grained training frames for the target city.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from . import layers as nn
from .autograd import Adam, Tensor
from .checkpoint import ModelCheckpoint
from .errors import ConfigError, DataError, ShapeError, TrainError
from .grid import SLOTS_PER_DAY, PoiMap, ReferenceSnapshot, WindowSample, coarsen


@dataclass
class PgnetConfig:
    C_G: int = 64
    embed_dim: int = 16
    context: int = 8
    poi_channels: int = 14
    F: int = 9
    alpha: float = 1e-3
    adv_weight: float = 1.0
    disc_layers: int = 3
    disc_stride: int = 4
    C_D: int = 1
    nH: int = 32
    nW: int = 32
    n: int = 4
    flow_scale: float = 0.0  # 0 -> fitted from the training flows
    frame_scale: float = 0.0  # 0 -> fitted from the training frames
    seed: int = 0

    def validate(self) -> None:
        if self.F < 1:
            raise ConfigError("F must be at least 1")
        if self.context < 1:
            raise ConfigError("LSTM context must be at least 1")
        if self.alpha < 0 or self.adv_weight < 0:
            raise ConfigError("loss weights must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


def frame_split(F: int) -> tuple[int, int]:
    """(forward, backward) frame counts around the reference for ``F`` frames."""
    forward = math.ceil((F - 1) / 2)
    return forward, F - 1 - forward


def flow_targets(series) -> np.ndarray:
    """``flow[t] = X[t+1] - X[t]``."""
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 3 or series.shape[0] < 2:
        raise ShapeError(f"need a [T>=2, H, W] series, got {series.shape}")
    return series[1:] - series[:-1]


def poi_features(poi: PoiMap | np.ndarray, density_ratio: float = 1.0) -> np.ndarray:
    """``log1p`` of counts (divided by ``density_ratio``) as ``[1, C, H, W]``."""
    counts = poi.counts if isinstance(poi, PoiMap) else np.asarray(poi, dtype=np.float64)
    return np.log1p(counts / density_ratio)[None]


def time_codes(slots, context: int) -> np.ndarray:
    """Slot-of-day indices ``[B, context]`` ending at each requested slot of day."""
    slots = np.atleast_1d(np.asarray(slots, dtype=np.int64))
    if np.any(slots < 0) or np.any(slots >= SLOTS_PER_DAY):
        raise DataError(f"slot of day must lie in [0, {SLOTS_PER_DAY})")
    offsets = np.arange(-context + 1, 1)
    return (slots[:, None] + offsets[None, :]) % SLOTS_PER_DAY


class Generator(nn.Module):
    def __init__(self, cfg: PgnetConfig, rng: np.random.Generator):
        C = cfg.C_G
        self.embed = nn.Embedding(SLOTS_PER_DAY, cfg.embed_dim, rng)
        self.lstm = nn.LSTM(cfg.embed_dim, C, rng)
        self.pre_conv = nn.Conv2d(cfg.poi_channels, C, 5, rng)
        self.pre_blocks = [nn.ResBlock(C, rng) for _ in range(2)]
        self.post_blocks = [nn.ResBlock(C, rng) for _ in range(4)]
        self.post_conv = nn.Conv2d(C, 1, 5, rng)


class Discriminator(nn.Module):
    def __init__(self, cfg: PgnetConfig, rng: np.random.Generator):
        self.conv = nn.Conv2d(1, cfg.C_D, 3, rng)
        self.blocks = [nn.ResBlock(cfg.C_D, rng, stride=cfg.disc_stride) for _ in range(cfg.disc_layers)]
        h, w = cfg.nH, cfg.nW
        for _ in range(cfg.disc_layers):
            h, w = -(-h // cfg.disc_stride), -(-w // cfg.disc_stride)
        self.linear = nn.Linear(cfg.C_D * h * w, 1, rng)


class PGNet(nn.Module):
    def __init__(self, cfg: PgnetConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.gen = Generator(cfg, rng)
        self.disc = Discriminator(cfg, rng)


def pg_generator_forward(model: PGNet, slots, poi_input: np.ndarray) -> Tensor:
    """Flow frames ``[B, 1, nH, nW]`` for slots of day ``[B]``."""
    cfg, g = model.cfg, model.gen
    poi = np.asarray(poi_input, dtype=np.float64)
    if poi.ndim == 3:
        poi = poi[None]
    if poi.ndim != 4 or poi.shape[:2] != (1, cfg.poi_channels):
        raise ShapeError(f"POI input must be [1, {cfg.poi_channels}, H, W], got {poi.shape}")
    codes = time_codes(slots, cfg.context)
    B, S = codes.shape
    emb = g.embed(codes.reshape(-1)).reshape(B, S, cfg.embed_dim)
    te = g.lstm(emb).reshape(B, cfg.C_G, 1, 1)
    h = ag.relu(g.pre_conv(Tensor(poi)))
    for block in g.pre_blocks:
        h = block(h)
    h = te * h
    for block in g.post_blocks:
        h = block(h)
    return g.post_conv(h) * cfg.flow_scale


def pg_discriminator_forward(model: PGNet, fine) -> Tensor:
    """Probability ``[B]`` that each frame is a real fine-grained map."""
    cfg, d = model.cfg, model.disc
    x = fine if isinstance(fine, Tensor) else Tensor(np.asarray(fine, dtype=np.float64))
    if x.ndim != 4 or x.shape[1:] != (1, cfg.nH, cfg.nW):
        raise ShapeError(f"discriminator expects [B, 1, {cfg.nH}, {cfg.nW}], got {x.shape}")
    h = ag.relu(d.conv(x * (1.0 / cfg.frame_scale)))
    for block in d.blocks:
        h = block(h)
    B = x.shape[0]
    return ag.sigmoid(d.linear(h.reshape(B, -1))).reshape(B)


# -- training ---------------------------------------------------------------------------

@dataclass
class PgTrainConfig:
    steps: int = 300
    batch_size: int = 8
    lr: float = 1e-3
    lr_d: float = 1e-3
    eval_every: int = 20
    val_fraction: float = 0.15
    seed: int = 0


@dataclass
class PgTrainLog:
    loss_c: list[float] = field(default_factory=list)
    loss_mse: list[float] = field(default_factory=list)
    loss_g: list[float] = field(default_factory=list)
    loss_d: list[float] = field(default_factory=list)
    val_mse: list[tuple[int, float]] = field(default_factory=list)
    best_step: int = 0
    best_val_mse: float = float("inf")


def _to_checkpoint(model: PGNet, metrics: dict | None = None) -> ModelCheckpoint:
    return ModelCheckpoint("pgnet", model.cfg.to_dict(), model.state_dict(), model.cfg.seed, dict(metrics or {}))


def from_checkpoint(ckpt: ModelCheckpoint) -> PGNet:
    if ckpt.kind != "pgnet":
        raise ConfigError(f"checkpoint holds a {ckpt.kind!r} model, not pgnet")
    model = PGNet(PgnetConfig(**ckpt.config))
    model.load_state_dict(ckpt.state)
    return model


def flow_mse(model: PGNet, series: np.ndarray, poi_input: np.ndarray, idx, batch_size: int = 32) -> float:
    flows = flow_targets(series)
    total = 0.0
    with ag.no_grad():
        for start in range(0, len(idx), batch_size):
            chunk = np.asarray(idx[start:start + batch_size])
            err = pg_generator_forward(model, chunk % SLOTS_PER_DAY, poi_input).data[:, 0] - flows[chunk]
            total += float(np.sum(err * err))
    return total / (len(idx) * flows[0].size)


def train_pgnet(series, poi: PoiMap | np.ndarray, cfg: PgnetConfig, tcfg: PgTrainConfig,
                density_ratio: float = 1.0) -> tuple[ModelCheckpoint, PgTrainLog]:
    """Alternating GAN training with ``L = adv_weight * L_C + alpha * L_MSE`` for the generator."""
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 3 or series.shape[0] < 3:
        raise DataError("PGNet training needs a fine series with at least 3 slots")
    flows = flow_targets(series)
    cfg.nH, cfg.nW = series.shape[1:]
    if cfg.flow_scale <= 0:
        cfg.flow_scale = float(flows.std()) or 1.0
    if cfg.frame_scale <= 0:
        cfg.frame_scale = float(series.mean()) or 1.0
    model = PGNet(cfg)
    poi_input = poi_features(poi, density_ratio)
    rng = np.random.default_rng(tcfg.seed)
    order = rng.permutation(len(flows))
    n_val = max(1, int(round(tcfg.val_fraction * len(flows))))
    val_idx, train_idx = np.sort(order[:n_val]), order[n_val:]
    g_params, d_params = model.gen.parameters(), model.disc.parameters()
    opt_g = Adam(g_params, lr=tcfg.lr)
    opt_d = Adam(d_params, lr=tcfg.lr_d)
    log = PgTrainLog()
    best_state = model.state_dict()

    for step in range(1, tcfg.steps + 1):
        idx = rng.choice(train_idx, size=min(tcfg.batch_size, len(train_idx)), replace=False)
        real = series[idx + 1][:, None]
        coarse_next = coarsen(real, cfg.n)
        flow_hat = pg_generator_forward(model, idx % SLOTS_PER_DAY, poi_input)
        fake = nn.n2_normalize(Tensor(series[idx][:, None]) + flow_hat, coarse_next, cfg.n)

        # discriminator step on detached fakes
        opt_d.zero_grad()
        ones, zeros = np.ones(len(idx)), np.zeros(len(idx))
        loss_d = nn.bce_loss(pg_discriminator_forward(model, real), ones) + \
            nn.bce_loss(pg_discriminator_forward(model, fake.detach()), zeros)
        loss_d.backward(d_params)
        opt_d.step()

        # generator step
        opt_g.zero_grad()
        loss_c = nn.bce_loss(pg_discriminator_forward(model, fake), ones)
        loss_mse = nn.mse_loss(flow_hat, flows[idx][:, None])
        loss_g = cfg.adv_weight * loss_c + cfg.alpha * loss_mse
        loss_g.backward(g_params)
        opt_g.step()
        opt_d.zero_grad()

        values = (loss_c.item(), loss_mse.item(), loss_g.item(), loss_d.item())
        if not all(np.isfinite(values)):
            raise TrainError(f"PGNet diverged at step {step}", dict(zip(("L_C", "L_MSE", "L", "L_D"), values)))
        log.loss_c.append(values[0])
        log.loss_mse.append(values[1])
        log.loss_g.append(values[2])
        log.loss_d.append(values[3])
        if step % tcfg.eval_every == 0 or step == tcfg.steps:
            score = flow_mse(model, series, poi_input, val_idx)
            log.val_mse.append((step, score))
            if score < log.best_val_mse:
                log.best_val_mse, log.best_step = score, step
                best_state = model.state_dict()
    model.load_state_dict(best_state)
    metrics = {"best_step": log.best_step, "val_flow_mse": log.best_val_mse}
    return _to_checkpoint(model, metrics), log


# -- synthesis ---------------------------------------------------------------------------

def _project(frame: np.ndarray, coarse: np.ndarray, n: int) -> np.ndarray:
    with ag.no_grad():
        return nn.n2_normalize(Tensor(frame[None, None]), Tensor(coarse[None, None]), n).data[0, 0]


def synthesize_series(ref: ReferenceSnapshot, flows_forward, flows_backward,
                      target_coarse: np.ndarray, n: int) -> np.ndarray:
    """Frames ``[F, nH, nW]`` ordered from the earliest backward frame to the last forward one.

    ``flows_forward[j]`` is the flow out of slot ``ref + j``;
    ``flows_backward[j]`` is the flow out of slot ``ref - j - 1``.  Every
    frame, the reference included, is projected onto the real coarse
    frame of its own slot.
    """
    base = np.asarray(ref.values, dtype=np.float64).reshape(ref.values.shape[-2:])
    fwd = np.asarray(flows_forward, dtype=np.float64).reshape(-1, *base.shape)
    bwd = np.asarray(flows_backward, dtype=np.float64).reshape(-1, *base.shape)
    slots = list(range(ref.slot_index - len(bwd), ref.slot_index + len(fwd) + 1))
    if slots[0] < 0 or slots[-1] >= len(target_coarse):
        raise DataError(f"coarse frames cover slots [0, {len(target_coarse)}), synthesis needs {slots[0]}..{slots[-1]}")
    raw = [base - s for s in np.cumsum(bwd, axis=0)[::-1]]
    raw.append(base)
    raw.extend(base + s for s in np.cumsum(fwd, axis=0))
    return np.stack([_project(f, target_coarse[s], n) for f, s in zip(raw, slots)])


def generate_flows(model: PGNet, slots, poi_input: np.ndarray, density_ratio: float = 1.0) -> np.ndarray:
    """Generated flows ``[len(slots), nH, nW]`` rescaled by ``density_ratio``."""
    slots = list(slots)
    if not slots:
        return np.zeros((0,) + poi_input.shape[-2:])
    with ag.no_grad():
        return pg_generator_forward(model, np.asarray(slots) % SLOTS_PER_DAY, poi_input).data[:, 0] / density_ratio


def augment_target(ref: ReferenceSnapshot, poi: PoiMap | np.ndarray, target_coarse: np.ndarray,
                   model: PGNet, F: int, window: int, n: int,
                   density_ratio: float = 1.0) -> list[WindowSample]:
    """Synthetic training samples for the ``F`` slots around the reference.

    ``density_ratio`` is the cell-area ratio between the grid the generator
    was trained on and the target grid (1 for same-granularity transfer).
    """
    target_coarse = np.asarray(target_coarse, dtype=np.float64)
    n_fwd, n_bwd = frame_split(F)
    first, last = ref.slot_index - n_bwd, ref.slot_index + n_fwd
    if first - window + 1 < 0 or last >= len(target_coarse):
        raise DataError(f"reference slot {ref.slot_index} is too close to the series boundary for F={F}")
    if F == 1:
        frames = synthesize_series(ref, [], [], target_coarse, n)
    else:
        poi_input = poi_features(poi, density_ratio)
        fwd = generate_flows(model, range(ref.slot_index, ref.slot_index + n_fwd), poi_input, density_ratio)
        bwd = generate_flows(model, [ref.slot_index - j - 1 for j in range(n_bwd)], poi_input, density_ratio)
        frames = synthesize_series(ref, fwd, bwd, target_coarse, n)
    return [
        WindowSample(target_coarse[s - window + 1:s + 1], frame[None], s % SLOTS_PER_DAY, s)
        for s, frame in zip(range(first, last + 1), frames)
    ]
