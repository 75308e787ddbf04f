"""Experiment pipeline: synthetic data, pre-training, augmentation, fine-tuning, evaluation.

Every stage reads its inputs from and writes its outputs to a workspace
directory, together with a manifest holding the config hash, the seed and
content hashes of the inputs.  ``run_all`` chains the stages for one seed
and ``run_experiment`` repeats that over the configured seeds.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pada as pada_mod
from . import pgnet as pg
from . import stnet as st
from .checkpoint import ModelCheckpoint, load_checkpoint, save_checkpoint
from .errors import ConfigError, PsrError
from .grid import (SLOTS_PER_DAY, WEEK_SLOTS, ReferenceSnapshot, WindowSample, coarsen, load_grid,
                   make_windows, save_grid, split_source, split_target)
from .metrics import MetricReport, bicubic_upsample, evaluate
from .synth import CitySpec, generate_city

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "PSRNET_DATA_ROOT"
SCENARIOS = ("cross_city", "cross_granularity")
VARIANTS = ("snet", "stnet", "snet+pgnet", "stnet+pgnet", "psrnet")
DISPLAY = {"snet": "SNet", "stnet": "STNet", "snet+pgnet": "SNet+PGNet",
           "stnet+pgnet": "STNet+PGNet", "psrnet": "PSRNet", "bicubic": "Bicubic"}
METRIC_COLUMNS = (("RMSE", "rmse"), ("NRMSE", "nrmse"), ("MAE", "mae"), ("MAPE", "mape"), ("Corr", "corr"))

PROFILES = {
    "desk": {
        "city": {"nH": 32, "nW": 32, "days": 14, "n_centers": 6, "base": 60.0, "noise": 0.3, "poi_scale": 6.0},
        "stnet": {"T": 24, "T_S": 6, "C_B": 16, "C_T": 8, "block_width": None},
        "train": {"steps": 400, "batch_size": 16, "lr": 2e-3, "eval_every": 25, "patience": 6},
        "pgnet": {"C_G": 16, "embed_dim": 16, "context": 8, "F": 9, "alpha": 0.05, "adv_weight": 1.0,
                  "disc_layers": 3, "disc_stride": 4, "C_D": 4},
        "pgnet_train": {"steps": 200, "batch_size": 8, "lr": 1e-3, "lr_d": 1e-3, "eval_every": 20},
        "finetune": {"steps": 200, "batch_size": 8, "lr": 3e-4},
        "pada": {"lambda_adv": 0.03, "steps": 200, "batch_size": 8, "source_ratio": 1.0, "lr": 3e-4,
                 "classifier_lr": 1e-3, "classifier_channels": 16, "classifier_depth": 1},
    },
    "paper": {
        "city": {"nH": 64, "nW": 64, "days": 28, "n_centers": 10, "base": 60.0, "noise": 0.3, "poi_scale": 6.0},
        "stnet": {"T": 48, "T_S": 6, "C_B": 64, "C_T": 16, "block_width": None},
        "train": {"steps": 5000, "batch_size": 16, "lr": 1e-3, "eval_every": 100, "patience": 10},
        "pgnet": {"C_G": 64, "embed_dim": 32, "context": 8, "F": 9, "alpha": 1e-3, "adv_weight": 1.0,
                  "disc_layers": 3, "disc_stride": 4, "C_D": 1},
        "pgnet_train": {"steps": 3000, "batch_size": 16, "lr": 1e-3, "lr_d": 1e-3, "eval_every": 100},
        "finetune": {"steps": 300, "batch_size": 8, "lr": 1e-4},
        "pada": {"lambda_adv": 0.1, "steps": 300, "batch_size": 8, "source_ratio": 1.0, "lr": 1e-4,
                 "classifier_lr": 1e-3, "classifier_channels": 32, "classifier_depth": 1},
    },
}

# preset sweeps over (T_S, hence L) and (F, alpha)
SWEEPS = {
    "lts": [{"stnet": {"T_S": ts}} for ts in (2, 3, 4, 6, 12)],
    "f_alpha": [{"pgnet": {"F": f, "alpha": a}} for f in (1, 5, 9, 13) for a in (1e-3, 1e-2, 5e-2)],
}


@dataclass
class ExperimentConfig:
    scenario: str = "cross_city"
    n: int = 4
    variants: list[str] = field(default_factory=lambda: list(VARIANTS))
    seeds: list[int] = field(default_factory=lambda: [0])
    profile: str = "desk"
    target_shift: float = 0.6
    target_seed_offset: int = 1000
    png_slots: int = 2
    png_scale: int = 4
    city: dict = field(default_factory=dict)
    stnet: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    pgnet: dict = field(default_factory=dict)
    pgnet_train: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)
    pada: dict = field(default_factory=dict)

    SECTIONS = ("city", "stnet", "train", "pgnet", "pgnet_train", "finetune", "pada")

    def validate(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.n not in (2, 4, 8):
            raise ConfigError(f"upscale factor must be 2, 4 or 8, got {self.n}")
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad or not self.variants:
            raise ConfigError(f"unknown or empty variants {bad or self.variants}; choose from {VARIANTS}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        depth = self.n * self.n if self.scenario == "cross_granularity" else self.n
        if self.city["nH"] % depth or self.city["nW"] % depth:
            raise ConfigError(f"grid {self.city['nH']}x{self.city['nW']} is not divisible by {depth}")
        if not 0.0 <= self.target_shift <= 1.0:
            raise ConfigError("target_shift must lie in [0, 1]")

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in ("scenario", "n", "variants", "seeds", "profile", "target_shift",
                                             "target_seed_offset", "png_slots", "png_scale")}
        out.update({k: copy.deepcopy(getattr(self, k)) for k in self.SECTIONS})
        return out

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def needs_pgnet(self) -> bool:
        return any(v.endswith("pgnet") or v == "psrnet" for v in self.variants)


def _merge(base: dict, override: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise ConfigError(f"unknown config key {where}{key}")
        out[key] = value
    return out


def load_config(path=None, profile: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Profile defaults, then the JSON file, then ``overrides``."""
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    raw = {**raw, **(overrides or {})}
    profile = profile or raw.get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    defaults = ExperimentConfig()
    top = {k: v for k, v in defaults.to_dict().items() if k not in ExperimentConfig.SECTIONS}
    top = _merge(top, {k: v for k, v in raw.items() if k not in ExperimentConfig.SECTIONS}, "")
    top["profile"] = profile
    sections = {name: _merge(PROFILES[profile][name], raw.get(name, {}), name + ".")
                for name in ExperimentConfig.SECTIONS}
    cfg = ExperimentConfig(**top, **sections)
    cfg.variants = list(cfg.variants)
    cfg.seeds = [int(s) for s in cfg.seeds]
    cfg.validate()
    return cfg


def with_overrides(cfg: ExperimentConfig, patch: dict) -> ExperimentConfig:
    """Copy of ``cfg`` with nested section overrides applied."""
    data = cfg.to_dict()
    for key, value in patch.items():
        if key in ExperimentConfig.SECTIONS:
            data[key] = _merge(data[key], value, key + ".")
        elif key in data:
            data[key] = value
        else:
            raise ConfigError(f"unknown config key {key}")
    out = ExperimentConfig(**data)
    out.validate()
    return out


# -- data --------------------------------------------------------------------------------

@dataclass
class Scenario:
    """Arrays the later stages work on, for either scenario."""

    source_fine: np.ndarray  # fine level of the pre-training task
    source_poi: np.ndarray
    target_fine: np.ndarray
    target_coarse: np.ndarray
    target_poi: np.ndarray
    n: int
    density_ratio: float


def data_dir(workspace) -> Path:
    root = os.environ.get(DATA_ROOT_ENV)
    return Path(root) if root else Path(workspace) / "data"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _tree_hashes(paths, workspace: Path) -> dict[str, str]:
    """sha256 per file, keyed relative to the workspace (absolute when outside it)."""
    out = {}
    for path in paths:
        path = Path(path)
        files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
        for f in files:
            key = f.relative_to(workspace) if f.is_relative_to(workspace) else f.resolve()
            out[key.as_posix()] = _sha256(f)
    return out


def write_manifest(workspace, stage: str, cfg: ExperimentConfig, seed: int, inputs=(), outputs=()) -> Path:
    manifest = {
        "stage": stage,
        "seed": seed,
        "config_hash": cfg.config_hash(),
        "inputs": _tree_hashes(inputs, Path(workspace)),
        "outputs": _tree_hashes(outputs, Path(workspace)),
    }
    path = Path(workspace) / "manifests" / f"{stage}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def _city_specs(cfg: ExperimentConfig, seed: int) -> tuple[CitySpec, CitySpec]:
    common = dict(cfg.city, n=cfg.n)
    source = CitySpec(seed=seed, shift=0.0, **common)
    target = CitySpec(seed=seed + cfg.target_seed_offset, shift=cfg.target_shift, **common)
    return source, target


def stage_synth(cfg: ExperimentConfig, seed: int, workspace) -> Path:
    """Generate the synthetic cities and store them as PGRD grids."""
    out = data_dir(workspace)
    source_spec, target_spec = _city_specs(cfg, seed)
    target, target_poi = generate_city(target_spec)
    files = [out / "target_fine.pgrd", out / "target_poi.pgrd"]
    save_grid(files[0], target.values, {"seed": target_spec.seed, "shift": target_spec.shift, "slot_minutes": 30})
    save_grid(files[1], target_poi.counts, {"categories": list(target_poi.categories)})
    if cfg.scenario == "cross_city":
        source, source_poi = generate_city(source_spec)
        files += [out / "source_fine.pgrd", out / "source_poi.pgrd"]
        save_grid(files[2], source.values, {"seed": source_spec.seed, "shift": 0.0, "slot_minutes": 30})
        save_grid(files[3], source_poi.counts, {"categories": list(source_poi.categories)})
    write_manifest(workspace, "synth", cfg, seed, outputs=files)
    return out


def _load(directory: Path, name: str) -> np.ndarray:
    path = directory / f"{name}.pgrd"
    if not path.exists():
        raise ConfigError(f"missing input {path}; run the synth stage first")
    return load_grid(path)[0]


def load_scenario(cfg: ExperimentConfig, workspace) -> Scenario:
    d = data_dir(workspace)
    target_fine, target_poi = _load(d, "target_fine"), _load(d, "target_poi")
    n = cfg.n
    if cfg.scenario == "cross_city":
        return Scenario(_load(d, "source_fine"), _load(d, "source_poi"), target_fine,
                        coarsen(target_fine, n), target_poi, n, 1.0)
    # cross-granularity: pre-train coarse -> mid on the target city itself, outside the test week
    mid = coarsen(target_fine, n)
    mid_poi = coarsen(target_poi, n)
    return Scenario(mid[:-WEEK_SLOTS], mid_poi, target_fine, mid, target_poi, n, float(n * n))


def source_split(cfg: ExperimentConfig, scen: Scenario, seed: int):
    samples = make_windows(scen.source_fine, scen.n, cfg.stnet["T"])
    split = split_source(samples, seed)
    pick = lambda idx: [samples[i] for i in idx]  # noqa: E731
    return pick(split.train), pick(split.val), pick(split.test)


def target_split(cfg: ExperimentConfig, scen: Scenario) -> tuple[ReferenceSnapshot, list[WindowSample]]:
    samples = make_windows(scen.target_fine, scen.n, cfg.stnet["T"], coarse=scen.target_coarse)
    ref, test = split_target(samples)
    return ref, [samples[i] for i in test]


# -- model stages ------------------------------------------------------------------------

def _ckpt_dir(workspace, name: str) -> Path:
    return Path(workspace) / "checkpoints" / name.replace("+", "_")


def stage_pretrain_stnet(cfg: ExperimentConfig, seed: int, workspace) -> dict[str, ModelCheckpoint]:
    """Pre-train STNet (and SNet when a variant needs it) on the source task."""
    scen = load_scenario(cfg, workspace)
    train, val, _ = source_split(cfg, scen, seed)
    scale = st.fit_input_scale(train)
    kinds = ["stnet"] + (["snet"] if any(v.startswith("snet") for v in cfg.variants) else [])
    out = {}
    for kind in kinds:
        mcfg = st.StnetConfig(n=scen.n, use_tnet=kind == "stnet", input_scale=scale, seed=seed, **cfg.stnet)
        tcfg = st.TrainConfig(seed=seed, **cfg.train)
        ckpt, tlog = st.train_stnet(st.STNet(mcfg), train, val, tcfg)
        log.info("%s pre-trained: best val RMSE %.4f at step %d", kind, tlog.best_val_rmse, tlog.best_step)
        save_checkpoint(ckpt, _ckpt_dir(workspace, kind))
        out[kind] = ckpt
    write_manifest(workspace, "pretrain-stnet", cfg, seed, inputs=[data_dir(workspace)],
                   outputs=[_ckpt_dir(workspace, k) for k in kinds])
    return out


def stage_pretrain_pgnet(cfg: ExperimentConfig, seed: int, workspace) -> ModelCheckpoint:
    scen = load_scenario(cfg, workspace)
    pcfg = pg.PgnetConfig(n=scen.n, seed=seed, **cfg.pgnet)
    tcfg = pg.PgTrainConfig(seed=seed, **cfg.pgnet_train)
    ckpt, plog = pg.train_pgnet(scen.source_fine, scen.source_poi, pcfg, tcfg)
    log.info("pgnet trained: best val flow MSE %.4f at step %d", plog.best_val_mse, plog.best_step)
    save_checkpoint(ckpt, _ckpt_dir(workspace, "pgnet"))
    write_manifest(workspace, "pretrain-pgnet", cfg, seed, inputs=[data_dir(workspace)],
                   outputs=[_ckpt_dir(workspace, "pgnet")])
    return ckpt


def _load_ckpt(workspace, name: str) -> ModelCheckpoint:
    path = _ckpt_dir(workspace, name)
    if not (path / "manifest.json").exists():
        raise ConfigError(f"missing checkpoint {path}; run the stage that produces it first")
    return load_checkpoint(path)


def stage_augment(cfg: ExperimentConfig, seed: int, workspace) -> list[WindowSample]:
    """Synthesize fine-grained target frames around the reference snapshot."""
    scen = load_scenario(cfg, workspace)
    ref, _ = target_split(cfg, scen)
    model = pg.from_checkpoint(_load_ckpt(workspace, "pgnet"))
    samples = pg.augment_target(ref, scen.target_poi, scen.target_coarse, model, cfg.pgnet["F"],
                                cfg.stnet["T"], scen.n, scen.density_ratio)
    path = Path(workspace) / "augment" / "frames.pgrd"
    save_grid(path, np.stack([s.fine_target[0] for s in samples]), {"slots": [s.slot for s in samples]})
    write_manifest(workspace, "augment", cfg, seed, inputs=[data_dir(workspace), _ckpt_dir(workspace, "pgnet")],
                   outputs=[path, path.with_name(path.name + ".json")])
    return samples


def load_augmented(cfg: ExperimentConfig, workspace, scen: Scenario) -> list[WindowSample]:
    path = Path(workspace) / "augment" / "frames.pgrd"
    if not path.exists():
        raise ConfigError(f"missing {path}; run the augment stage first")
    frames, meta = load_grid(path)
    T = cfg.stnet["T"]
    return [WindowSample(scen.target_coarse[s - T + 1:s + 1], f[None], s % SLOTS_PER_DAY, s)
            for s, f in zip(meta["slots"], frames)]


def stage_finetune(cfg: ExperimentConfig, seed: int, workspace) -> dict[str, ModelCheckpoint]:
    """Fine-tune every augmented variant on the synthetic target samples."""
    scen = load_scenario(cfg, workspace)
    aug = load_augmented(cfg, workspace, scen)
    out = {}
    for variant in cfg.variants:
        if variant in ("snet", "stnet"):
            continue
        base = "snet" if variant.startswith("snet") else "stnet"
        model = st.from_checkpoint(_load_ckpt(workspace, base))
        if variant == "psrnet":
            train, _, _ = source_split(cfg, scen, seed)
            pcfg = pada_mod.PadaConfig(seed=seed, **cfg.pada)
            ckpt, _ = pada_mod.pada_finetune(model, train, aug, pcfg)
        else:
            st.finetune(model, aug, st.FinetuneConfig(seed=seed, **cfg.finetune))
            ckpt = st.to_checkpoint(model, {"finetune_steps": cfg.finetune["steps"]})
        save_checkpoint(ckpt, _ckpt_dir(workspace, variant))
        out[variant] = ckpt
    write_manifest(workspace, "finetune", cfg, seed,
                   inputs=[data_dir(workspace), Path(workspace) / "augment"] +
                   [_ckpt_dir(workspace, b) for b in ("snet", "stnet") if _ckpt_dir(workspace, b).exists()],
                   outputs=[_ckpt_dir(workspace, v) for v in out])
    return out


# -- evaluation and reports --------------------------------------------------------------

def _png(path: Path, frame: np.ndarray, scale: int) -> None:
    from PIL import Image

    lo, hi = float(frame.min()), float(frame.max())
    gray = np.zeros(frame.shape) if hi <= lo else (frame - lo) / (hi - lo)
    img = np.rint(255 * gray).astype(np.uint8)
    img = np.kron(img, np.ones((scale, scale), dtype=np.uint8))
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(path, format="PNG")


def _fmt(value) -> str:
    return "n/a" if value is None or (isinstance(value, float) and not np.isfinite(value)) else f"{value:.3f}"


def render_table(rows: dict[str, dict]) -> str:
    lines = ["| Method | " + " | ".join(c for c, _ in METRIC_COLUMNS) + " |",
             "|---|" + "---:|" * len(METRIC_COLUMNS)]
    for name, metrics in rows.items():
        lines.append(f"| {DISPLAY.get(name, name)} | " + " | ".join(_fmt(metrics[k]) for _, k in METRIC_COLUMNS) + " |")
    return "\n".join(lines)


def stage_evaluate(cfg: ExperimentConfig, seed: int, workspace) -> dict[str, MetricReport]:
    """Evaluate every variant plus Bicubic on the target test week and write the report."""
    workspace = Path(workspace)
    scen = load_scenario(cfg, workspace)
    _, test = target_split(cfg, scen)
    truth = np.stack([s.fine_target[0] for s in test])
    preds = {v: st.predict(st.from_checkpoint(_load_ckpt(workspace, v)), test) for v in cfg.variants}
    preds["bicubic"] = bicubic_upsample(np.stack([s.coarse_seq[-1] for s in test]), scen.n)
    reports = {name: evaluate(p, truth) for name, p in preds.items()}

    title = "Cross-city transfer" if cfg.scenario == "cross_city" else "Cross-granularity transfer"
    body = [f"# {title}, n={scen.n}, seed {seed}", "",
            f"Target test week: {len(test)} slots, {truth.shape[1]}x{truth.shape[2]} fine grid.", "",
            render_table({k: r.as_dict() for k, r in reports.items()}), ""]
    (workspace / "report.md").write_text("\n".join(body), encoding="utf-8")
    payload = {"scenario": cfg.scenario, "n": scen.n, "seed": seed, "config_hash": cfg.config_hash(),
               "metrics": {k: r.as_dict() for k, r in reports.items()}}
    (workspace / "report.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")

    pngs = []
    for i in range(min(cfg.png_slots, len(test))):
        slot = test[i].slot
        pngs.append(workspace / "png" / f"slot{slot:05d}_truth.png")
        _png(pngs[-1], truth[i], cfg.png_scale)
        for name, p in preds.items():
            pngs.append(workspace / "png" / f"slot{slot:05d}_{name.replace('+', '_')}.png")
            _png(pngs[-1], p[i], cfg.png_scale)
    write_manifest(workspace, "evaluate", cfg, seed,
                   inputs=[data_dir(workspace)] + [_ckpt_dir(workspace, v) for v in cfg.variants],
                   outputs=[workspace / "report.md", workspace / "report.json"] + pngs)
    return reports


def run_all(cfg: ExperimentConfig, seed: int, workspace) -> dict[str, MetricReport]:
    """Every stage for one seed."""
    stages = [("synth", stage_synth), ("pretrain-stnet", stage_pretrain_stnet)]
    if cfg.needs_pgnet():
        stages += [("pretrain-pgnet", stage_pretrain_pgnet), ("augment", stage_augment),
                   ("finetune", stage_finetune)]
    for name, fn in stages:
        log.info("seed %d: %s", seed, name)
        try:
            fn(cfg, seed, workspace)
        except PsrError as exc:
            exc.args = (f"stage {name}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]
            raise
    return stage_evaluate(cfg, seed, workspace)


def mean_metrics(per_seed: list[dict[str, MetricReport]]) -> dict[str, dict]:
    out = {}
    for name in per_seed[0]:
        rows = [r[name].as_dict() for r in per_seed]
        out[name] = {}
        for key in rows[0]:
            values = [row[key] for row in rows]
            out[name][key] = None if any(v is None for v in values) else float(np.mean(values))
    return out


def run_experiment(cfg: ExperimentConfig, out) -> dict[str, dict]:
    """``run_all`` for every configured seed plus a seed-averaged report."""
    out = Path(out)
    per_seed = [run_all(cfg, seed, out / f"seed_{seed}") for seed in cfg.seeds]
    means = mean_metrics(per_seed)
    title = "Cross-city transfer" if cfg.scenario == "cross_city" else "Cross-granularity transfer"
    seeds = ", ".join(str(s) for s in cfg.seeds)
    lines = [f"# {title}, n={cfg.n}", "", f"Mean over seeds {seeds}.", "", render_table(means), ""]
    for seed, reports in zip(cfg.seeds, per_seed):
        lines += [f"## Seed {seed}", "", render_table({k: r.as_dict() for k, r in reports.items()}), ""]
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text("\n".join(lines), encoding="utf-8")
    payload = {"scenario": cfg.scenario, "n": cfg.n, "seeds": cfg.seeds, "config": cfg.to_dict(),
               "config_hash": cfg.config_hash(), "mean": means,
               "per_seed": {str(s): {k: r.as_dict() for k, r in rep.items()} for s, rep in zip(cfg.seeds, per_seed)}}
    (out / "report.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return means


def run_sweep(cfg: ExperimentConfig, name: str, out) -> list[tuple[dict, dict]]:
    if name not in SWEEPS:
        raise ConfigError(f"unknown sweep {name!r}; choose from {sorted(SWEEPS)}")
    out = Path(out)
    results = []
    lines = [f"# Sweep {name}", "", "| Setting | Variant | RMSE |", "|---|---|---:|"]
    for i, patch in enumerate(SWEEPS[name]):
        point = with_overrides(cfg, patch)
        means = run_experiment(point, out / f"point_{i:02d}")
        results.append((patch, means))
        label = json.dumps(patch, sort_keys=True)
        for variant, metrics in means.items():
            lines.append(f"| `{label}` | {DISPLAY.get(variant, variant)} | {_fmt(metrics['rmse'])} |")
    (out / "sweep.md").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return results

