"""Desk-scale experiments shared by ``scripts/`` and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import TrainConfig
from .datagen import generate_instance
from .geometry import make_occlusion_series, resample
from .losses import chamfer_loss
from .models import decode_partial, encode_partial, fuse
from .trainer import AE_ROLES, Trainer, build_networks, evaluate, prepare_clouds, pretrain_complete_ae


def toy_config(**overrides) -> TrainConfig:
    """Toy preset on one category; 50 partial and 50 complete training shapes."""
    base = dict(categories=("chair_like",), n_train_partial=50, n_train_complete=50, n_eval=20, max_steps=2000)
    base.update(overrides)
    return TrainConfig.toy(**base)


@dataclass
class ToyData:
    partial: np.ndarray  # training partials, resampled
    complete: np.ndarray  # unpaired training completes, resampled
    heldout: list  # raw held-out partial clouds
    eval_samples: list  # (partial, ground truth) pairs


def toy_data(cfg: TrainConfig, n_heldout: int = 100) -> ToyData:
    """Same instance layout as the generated dataset, plus extra held-out partials."""
    cat = cfg.categories[0]
    n_p, n_c = cfg.n_train_partial, cfg.n_train_complete
    parts = [generate_instance(cfg, cat, i)[1] for i in range(n_p)]
    comps = [generate_instance(cfg, cat, n_p + i)[0] for i in range(n_c)]
    first_eval = n_p + n_c
    evals = [generate_instance(cfg, cat, first_eval + i) for i in range(cfg.n_eval)]
    held = [generate_instance(cfg, cat, first_eval + cfg.n_eval + i)[1] for i in range(n_heldout)]
    return ToyData(prepare_clouds(parts, cfg.n_points, cfg.seed), prepare_clouds(comps, cfg.n_out, cfg.seed + 1),
                   held, [(p, c) for c, p in evals])


@dataclass
class ToyRun:
    cfg: TrainConfig
    trainer: Trainer
    records: list = field(default_factory=list)
    ae_history: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def rec(self) -> np.ndarray:
        return np.array([r.losses.rec for r in self.records])


def train_toy(cfg: TrainConfig, data: ToyData, ae_nets: dict | None = None, callback=None) -> ToyRun:
    """AE pretraining (skipped when ``ae_nets`` is given) followed by ``cfg.max_steps`` steps."""
    t0 = time.perf_counter()
    nets, hist = build_networks(cfg), []
    if ae_nets is None:
        nets, hist = pretrain_complete_ae(cfg, data.complete, nets=nets)
    else:
        for role in AE_ROLES:
            nets[role].load_state_dict(ae_nets[role].state_dict())
    tr = Trainer(cfg, data.partial, data.complete, nets=nets)
    records = tr.run(callback=callback)
    return ToyRun(cfg, tr, records, hist, time.perf_counter() - t0)


def window_mean(values, center: int, half: int = 10) -> float:
    lo, hi = max(0, center - half), min(len(values), center + half)
    return float(np.mean(values[lo:hi]))


def heldout_series(cfg: TrainConfig, clouds, seed: int = 12345):
    """One occlusion series per held-out partial, with fixed seeds."""
    seeds = np.random.SeedSequence([seed, 21]).generate_state(len(clouds))
    out = []
    for c, s in zip(clouds, seeds):
        base = resample(c, cfg.n_points, int(s))
        out.append(make_occlusion_series(base, cfg.K, int(s) + 1))
    return out


@torch.no_grad()
def series_codes(nets, series):
    enc = nets["partial_encoder"]
    as_t = lambda xs: torch.from_numpy(np.stack(xs).astype(np.float32))  # noqa: E731
    return [encode_partial(enc, as_t([getattr(s, m) for s in series])) for m in ("base", "mid", "small")]


def ranking_agreement(nets, series) -> float:
    """Fraction of series with mean(o) >= mean(o') >= mean(o'')."""
    (_, o), (_, o1), (_, o2) = series_codes(nets, series)
    m, m1, m2 = o.mean(1), o1.mean(1), o2.mean(1)
    return float(((m >= m1) & (m1 >= m2)).double().mean())


@torch.no_grad()
def swap_consistency(nets, series, fusion_mode: str = "multiply"):
    """Mean CD of D_p(z, o') and of D_p(z', o') against P', over the series."""
    (z, _), (z1, o1), _ = series_codes(nets, series)
    P1 = torch.from_numpy(np.stack([s.mid for s in series]).astype(np.float32))
    Dp = nets["partial_decoder"]
    swapped = [float(chamfer_loss(decode_partial(Dp, fuse(z[i:i + 1], o1[i:i + 1], fusion_mode)), P1[i]))
               for i in range(len(series))]
    plain = [float(chamfer_loss(decode_partial(Dp, fuse(z1[i:i + 1], o1[i:i + 1], fusion_mode)), P1[i]))
             for i in range(len(series))]
    return float(np.mean(swapped)), float(np.mean(plain))


def eval_cd(run: ToyRun, data: ToyData) -> float:
    return evaluate(run.trainer.nets, run.cfg, data.eval_samples).cd


def fusion_ablation(seeds=(0, 1, 2), modes=("multiply", "concat", "add"), steps: int = 400, log=print, **overrides):
    """Mean eval CD per fusion mode over ``seeds``; the AE is pretrained once per seed."""
    table = {m: [] for m in modes}
    for seed in seeds:
        cfg0 = toy_config(seed=seed, max_steps=steps, **overrides)
        data = toy_data(cfg0, n_heldout=0)
        ae_nets, _ = pretrain_complete_ae(cfg0, data.complete)
        for mode in modes:
            run = train_toy(cfg0.replace(fusion_mode=mode), data, ae_nets=ae_nets)
            table[mode].append(eval_cd(run, data))
            log(f"seed {seed} {mode:8s} eval CD {table[mode][-1]:.6f} ({run.seconds:.0f}s)")
    return {m: float(np.mean(v)) for m, v in table.items()}, table
