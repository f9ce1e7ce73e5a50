"""Two-stage optimisation: complete auto-encoder pretraining, then the unpaired loop.

Every source of randomness in a step (batch choice, unpaired complete shapes,
occlusion seeds, interpolation weights) is derived from ``(seed, step)``, so a
run resumed from a checkpoint replays exactly.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .config import TrainConfig
from .errors import InvalidArgument, NumericError
from .geometry import make_occlusion_series, resample
from .losses import (
    LossBreakdown,
    chamfer_loss,
    code_equality_loss,
    gradient_penalty_norms,
    ranking_loss,
    reconstruction_loss,
    total_losses,
    triplet_rank_loss,
    wgan_d_loss,
    wgan_g_loss,
)
from .metrics import MetricReport, chamfer, f1, mmd, ucd
from .models import (
    CodeDiscriminator,
    CompleteEncoder,
    EncoderConfig,
    ParameterSet,
    PartialEncoder,
    PointDecoder,
    PointDiscriminator,
    decode_complete,
    decode_partial,
    discriminate_code,
    discriminate_point,
    encode_complete,
    encode_partial,
    fuse,
    fused_width,
    init_uniform_,
    load_parameter_set,
    parameter_set,
)

log = logging.getLogger(__name__)

GENERATOR_ROLES = ("partial_encoder", "complete_decoder", "partial_decoder")
DISCRIMINATOR_ROLES = ("point_discriminator", "code_discriminator")
AE_ROLES = ("complete_encoder", "ae_decoder")
LOG_FIELDS = ("step",) + LossBreakdown.COMPONENTS + ("total_g", "total_d", "o_mean", "o_mid_mean", "o_small_mean")


@dataclass
class StepRecord:
    step: int
    losses: LossBreakdown
    wall_time: float
    o_means: tuple

    def log_line(self, category: str) -> str:
        """Tab-separated line for train.log; wall time is left out so logs replay byte-for-byte."""
        vals = [repr(float(getattr(self.losses, k))) for k in LossBreakdown.COMPONENTS + ("total_g", "total_d")]
        vals += [repr(float(v)) for v in self.o_means]
        return "\t".join([category, str(self.step), *vals]) + "\n"


def log_header() -> str:
    return "#" + "\t".join(("category",) + LOG_FIELDS) + "\n"


def parse_log_line(line: str) -> dict:
    parts = line.rstrip("\n").split("\t")
    out = {"category": parts[0], "step": int(parts[1])}
    out.update({k: float(v) for k, v in zip(LOG_FIELDS[1:], parts[2:])})
    return out


def _seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence([seed, 7]).generate_state(n)]


def build_networks(cfg: TrainConfig) -> dict:
    """Fresh, seeded networks keyed by role."""
    enc_cfg = EncoderConfig(cfg.encoder_variant, tuple(cfg.encoder_widths), cfg.k_graph, cfg.d)
    nets = {
        "partial_encoder": PartialEncoder(enc_cfg),
        "complete_decoder": PointDecoder(cfg.d, cfg.n_out, cfg.decoder_hidden, "complete_decoder"),
        "partial_decoder": PointDecoder(fused_width(cfg.d, cfg.fusion_mode), cfg.partial_out,
                                        cfg.decoder_hidden, "partial_decoder"),
        "complete_encoder": CompleteEncoder(enc_cfg),
        "ae_decoder": PointDecoder(cfg.d, cfg.n_out, cfg.decoder_hidden, "ae_decoder"),
        "point_discriminator": PointDiscriminator(),
        "code_discriminator": CodeDiscriminator(cfg.d),
    }
    for (role, net), s in zip(nets.items(), _seeds(cfg.seed, len(nets))):
        init_uniform_(net, s)
    return nets


def _adam(params, lr, cfg):
    return torch.optim.Adam(params, lr=lr, betas=(cfg.adam_beta1, cfg.adam_beta2))


def _optim_set(opt: torch.optim.Optimizer, name: str) -> ParameterSet:
    arrays = {}
    for idx, st in opt.state_dict()["state"].items():
        for key, val in st.items():
            arrays[f"{idx}.{key}"] = torch.as_tensor(val).detach().cpu().numpy().astype(np.float32)
    return ParameterSet(f"optim:{name}", arrays)


def _load_optim(opt: torch.optim.Optimizer, ps: ParameterSet) -> None:
    sd = opt.state_dict()
    state = {}
    for key, arr in ps.arrays.items():
        idx, name = key.split(".", 1)
        state.setdefault(int(idx), {})[name] = torch.from_numpy(arr.copy())
    sd["state"] = state
    opt.load_state_dict(sd)


def _check_finite_params(nets, roles):
    for role in roles:
        for name, p in nets[role].named_parameters():
            if not bool(torch.isfinite(p).all()):
                raise NumericError(f"parameter {role}.{name} became non-finite")


def _grad_norm(params) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    return float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in grads])))


# --- data ------------------------------------------------------------------


def prepare_clouds(clouds, n_points: int, seed: int) -> np.ndarray:
    """Resample a list of clouds to a fixed size; returns float32 (S, n_points, 3)."""
    seeds = np.random.SeedSequence([seed, 11]).generate_state(max(len(clouds), 1))
    return np.stack([resample(c, n_points, int(s)) for c, s in zip(clouds, seeds)]).astype(np.float32)


def batch_indices(n: int, batch_size: int, step: int, seed: int, stream: int = 1) -> np.ndarray:
    """Epoch-wise shuffled indices for ``step``; wraps inside the epoch permutation."""
    per_epoch = math.ceil(n / batch_size)
    epoch, pos = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, stream, epoch]).permutation(n)
    return perm[(np.arange(batch_size) + pos * batch_size) % n]


# --- stage 1: complete auto-encoder ---------------------------------------


def pretrain_complete_ae(cfg: TrainConfig, complete, nets: dict | None = None, steps: int | None = None,
                         callback=None):
    """Train E_c and its decoder by Chamfer reconstruction.

    ``complete`` is a float32 array (S, M, 3). Returns ``(nets, history)`` where
    history holds the per-step batch loss.
    """
    if len(complete) == 0:
        raise InvalidArgument("complete set is empty")
    nets = nets or build_networks(cfg)
    enc, dec = nets["complete_encoder"], nets["ae_decoder"]
    params = list(enc.parameters()) + list(dec.parameters())
    for p in params:
        p.requires_grad_(True)
    opt = _adam(params, cfg.ae_lr, cfg)
    data = torch.from_numpy(np.asarray(complete, dtype=np.float32))
    n_steps = steps or cfg.ae_max_steps or cfg.ae_epochs * math.ceil(len(data) / cfg.batch_size)
    history = []
    for step in range(n_steps):
        idx = batch_indices(len(data), min(cfg.batch_size, len(data)), step, cfg.seed, stream=5)
        Y = data[idx]
        loss = chamfer_loss(Y, dec(encode_complete(enc, Y)))
        if not bool(torch.isfinite(loss)):
            raise NumericError(f"auto-encoder loss non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        history.append(float(loss.detach()))
        if callback:
            callback(step, history[-1])
    for p in params:
        p.requires_grad_(False)
    return nets, history


# --- stage 2: unpaired training -------------------------------------------


def swap_pass(partial_decoder, code, code_mid, P, P_mid, fusion_mode: str = "multiply"):
    """Chamfer of the shape-code-swapped decodes: D_p(z, o') against P' plus D_p(z', o) against P."""
    (z, o), (z1, o1) = code, code_mid
    return (chamfer_loss(decode_partial(partial_decoder, fuse(z, o1, fusion_mode)), P_mid)
            + chamfer_loss(decode_partial(partial_decoder, fuse(z1, o, fusion_mode)), P))


@dataclass
class Trainer:
    """Owns the networks and optimizers of one single-category run."""

    cfg: TrainConfig
    partial: np.ndarray  # (S, n_points, 3) float32
    complete: np.ndarray  # (S', n_out, 3) float32, unpaired
    nets: dict = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        if len(self.partial) == 0 or len(self.complete) == 0:
            raise InvalidArgument("partial and complete sets must be non-empty")
        if self.partial.shape[1] != self.cfg.n_points:
            raise InvalidArgument(f"partials must hold {self.cfg.n_points} points")
        if not self.nets:
            self.nets = build_networks(self.cfg)
        if self.cfg.init_dc_from_ae and self.step == 0:
            self.nets["complete_decoder"].load_state_dict(self.nets["ae_decoder"].state_dict())
        for role in AE_ROLES:
            for p in self.nets[role].parameters():
                p.requires_grad_(False)
        self.g_params = [p for r in GENERATOR_ROLES for p in self.nets[r].parameters()]
        self.d_params = [p for r in DISCRIMINATOR_ROLES for p in self.nets[r].parameters()]
        self.opt_g = _adam(self.g_params, self.cfg.lr, self.cfg)
        self.opt_d = _adam(self.d_params, self.cfg.lr, self.cfg)

    # batches ---------------------------------------------------------------

    def batch_for(self, step: int):
        cfg = self.cfg
        b = cfg.batch_size
        p_idx = batch_indices(len(self.partial), b, step, cfg.seed, stream=1)
        c_idx = np.random.default_rng([cfg.seed, 2, step]).integers(0, len(self.complete), size=b)
        series_seeds = np.random.default_rng([cfg.seed, 3, step]).integers(0, 2**31 - 1, size=b)
        return self.partial[p_idx], self.complete[c_idx], series_seeds

    # one optimisation step -------------------------------------------------

    def train_step(self, partial_batch, complete_batch, series_seeds) -> StepRecord:
        cfg, nets = self.cfg, self.nets
        t0 = time.perf_counter()
        if len(partial_batch) != len(complete_batch):
            raise InvalidArgument("partial and complete batches differ in size")
        series = [make_occlusion_series(p, cfg.K, int(s)) for p, s in zip(partial_batch, series_seeds)]
        P = torch.from_numpy(np.asarray(partial_batch, dtype=np.float32))
        P1 = torch.from_numpy(np.stack([s.mid for s in series]).astype(np.float32))
        P2 = torch.from_numpy(np.stack([s.small for s in series]).astype(np.float32))
        Y = torch.from_numpy(np.asarray(complete_batch, dtype=np.float32))
        gen = torch.Generator().manual_seed(int(np.random.SeedSequence([cfg.seed, 4, self.step]).generate_state(1)[0]))

        d_point, d_code = self._discriminator_step(P, Y, gen)

        Ep, Dc, Dp = nets["partial_encoder"], nets["complete_decoder"], nets["partial_decoder"]
        codes = [encode_partial(Ep, x) for x in (P, P1, P2)]
        members = (P, P1, P2)
        rec = sum(
            reconstruction_loss(x, decode_partial(Dp, fuse(c.z, c.o, cfg.fusion_mode)), decode_complete(Dc, c.z),
                                cfg.k_degrade)
            for x, c in zip(members, codes)
        ) / len(members)
        (z, o), (z1, o1), (z2, o2) = codes
        parts = {"rec": rec, "z_equal": code_equality_loss(z, z1, z2)}
        if cfg.enable_swap:
            parts["swap"] = swap_pass(Dp, codes[0], codes[1], P, P1, cfg.fusion_mode)
        if cfg.ranking == "npair":
            parts["npair"] = ranking_loss(o, o1, o2)
        elif cfg.ranking == "triplet":
            parts["npair"] = triplet_rank_loss(o, o1, o2, cfg.triplet_delta)
        w_adv = min(1.0, self.step / cfg.adv_warmup) if cfg.adv_warmup else 1.0
        if cfg.enable_point_d:
            parts["g_point"] = w_adv * wgan_g_loss(discriminate_point(nets["point_discriminator"], decode_complete(Dc, z)))
        if cfg.enable_code_d:
            parts["g_code"] = w_adv * wgan_g_loss(discriminate_code(nets["code_discriminator"], z))

        logged = {k: float(v.detach()) for k, v in parts.items()}
        logged.update(d_point=d_point, d_code=d_code)
        try:
            breakdown = total_losses(logged, cfg.gamma, cfg.beta)
        except NumericError as exc:
            raise NumericError(f"step {self.step}: {exc}") from None
        total_g = total_losses(parts, cfg.gamma, cfg.beta).total_g
        self.opt_g.zero_grad()
        total_g.backward()
        self._apply(self.opt_g, self.g_params, "generator")
        _check_finite_params(nets, GENERATOR_ROLES)

        o_means = tuple(float(t.detach().mean()) for t in (o, o1, o2))
        record = StepRecord(self.step, breakdown, time.perf_counter() - t0, o_means)
        self.step += 1
        return record

    def _discriminator_step(self, P, Y, gen):
        cfg, nets = self.cfg, self.nets
        if not (cfg.enable_point_d or cfg.enable_code_d):
            return 0.0, 0.0
        for _ in range(cfg.d_steps):
            with torch.no_grad():
                z = encode_partial(nets["partial_encoder"], P).z
                fake_cloud = decode_complete(nets["complete_decoder"], z)
                z_real = encode_complete(nets["complete_encoder"], Y)
            loss_p = loss_c = torch.zeros(())
            if cfg.enable_point_d:
                Dpt = nets["point_discriminator"]
                gn = gradient_penalty_norms(Dpt, fake_cloud, Y, cfg.gp_mode, gen)
                loss_p = wgan_d_loss(discriminate_point(Dpt, fake_cloud), discriminate_point(Dpt, Y), gn, cfg.lambda_gp)
            if cfg.enable_code_d:
                Dcd = nets["code_discriminator"]
                gn = gradient_penalty_norms(Dcd, z, z_real, cfg.gp_mode, gen)
                loss_c = wgan_d_loss(discriminate_code(Dcd, z), discriminate_code(Dcd, z_real), gn, cfg.lambda_gp)
            total = loss_p + loss_c
            if not bool(torch.isfinite(total)):
                raise NumericError(f"step {self.step}: discriminator loss non-finite")
            self.opt_d.zero_grad()
            total.backward()
            self._apply(self.opt_d, self.d_params, "discriminator")
        _check_finite_params(nets, DISCRIMINATOR_ROLES)
        return float(loss_p.detach()), float(loss_c.detach())

    def _apply(self, opt, params, what):
        if not math.isfinite(_grad_norm(params)):
            raise NumericError(f"step {self.step}: {what} gradient non-finite")
        if self.cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(params, self.cfg.grad_clip)
        opt.step()

    # loops -----------------------------------------------------------------

    def total_steps(self) -> int:
        return self.cfg.max_steps or self.cfg.epochs * math.ceil(len(self.partial) / self.cfg.batch_size)

    def run(self, n_steps: int | None = None, log_fh=None, category: str = "", callback=None):
        """Advance ``n_steps`` (default: up to total_steps); returns the StepRecords."""
        n_steps = self.total_steps() - self.step if n_steps is None else n_steps
        records = []
        for _ in range(n_steps):
            rec = self.train_step(*self.batch_for(self.step))
            records.append(rec)
            if log_fh is not None:
                log_fh.write(rec.log_line(category))
            if callback:
                callback(rec)
        return records

    # persistence -----------------------------------------------------------

    def to_checkpoint(self, category: str = "") -> ckpt_io.Checkpoint:
        sets = {role: parameter_set(net) for role, net in self.nets.items()}
        sets["optim:generator"] = _optim_set(self.opt_g, "generator")
        sets["optim:discriminator"] = _optim_set(self.opt_d, "discriminator")
        return ckpt_io.Checkpoint(self.cfg, sets, {"step": str(self.step), "category": category})

    @classmethod
    def from_checkpoint(cls, ck: ckpt_io.Checkpoint, partial, complete) -> "Trainer":
        nets = networks_from_checkpoint(ck)
        tr = cls(ck.config, partial, complete, nets=nets, step=int(ck.meta.get("step", 0)))
        if "optim:generator" in ck.sets:
            _load_optim(tr.opt_g, ck.sets["optim:generator"])
            _load_optim(tr.opt_d, ck.sets["optim:discriminator"])
        return tr


def networks_from_checkpoint(ck: ckpt_io.Checkpoint) -> dict:
    nets = build_networks(ck.config)
    for role, net in nets.items():
        if role in ck.sets:
            load_parameter_set(net, ck.sets[role])
    return nets


# --- inference and evaluation ---------------------------------------------


@torch.no_grad()
def complete_cloud(nets: dict, cloud, cfg: TrainConfig, seed: int = 0) -> np.ndarray:
    """Completed cloud (n_out, 3) for one partial input, float64."""
    x = torch.from_numpy(resample(cloud, cfg.n_points, seed).astype(np.float32))
    z = encode_partial(nets["partial_encoder"], x).z
    return decode_complete(nets["complete_decoder"], z)[0].double().numpy()


def score_predictions(preds, partials, truths=None, tau: float = 0.01, references=None,
                      category: str = "") -> MetricReport:
    """Metrics of completed clouds ``preds`` for inputs ``partials``.

    With ``truths``: CD, F1 and UCD per sample, MMD against the set of truths.
    Without: UCD only, plus MMD against ``references`` when given.
    """
    if not preds or len(preds) != len(partials):
        raise InvalidArgument("need one prediction per partial input")
    rep = MetricReport(tau=tau)
    rep.ucd = float(np.mean([ucd(p, c) for p, c in zip(partials, preds)]))
    if truths is not None:
        rep.cd = float(np.mean([chamfer(c, gt) for c, gt in zip(preds, truths)]))
        rep.f1 = float(np.mean([f1(c, gt, tau) for c, gt in zip(preds, truths)]))
        rep.mmd = mmd(preds, truths)
    elif references:
        rep.mmd = mmd(preds, references)
    if category:
        rep.per_category[category] = MetricReport(rep.cd, rep.ucd, rep.f1, rep.mmd, rep.tau)
    return rep


def evaluate(nets: dict, cfg: TrainConfig, samples, references=None, category: str = "") -> MetricReport:
    """Complete every (partial, ground truth or None) sample and score it.

    Ground-truth metrics are reported only when every sample has a truth.
    """
    if not samples:
        raise InvalidArgument("evaluation set is empty")
    preds = [complete_cloud(nets, p, cfg, seed=i) for i, (p, _) in enumerate(samples)]
    truths = [gt for _, gt in samples]
    have_gt = all(gt is not None for gt in truths)
    return score_predictions(preds, [p for p, _ in samples], truths if have_gt else None, cfg.tau,
                             references, category)


def merge_reports(reports: dict, tau: float) -> MetricReport:
    """Combine per-category reports; the overall row averages the categories."""
    out = MetricReport(tau=tau)
    for cat, rep in reports.items():
        out.per_category[cat] = MetricReport(rep.cd, rep.ucd, rep.f1, rep.mmd, tau)
    for key in ("cd", "ucd", "f1", "mmd"):
        vals = [getattr(r, key) for r in reports.values() if getattr(r, key) is not None]
        setattr(out, key, float(np.mean(vals)) if vals else None)
    return out
