"""End-to-end toy training: L_total = L_diffusion + weight * L_align.

The teacher sees the clean video through the frozen surrogate encoder; the
student is the projected tap of the denoiser run on the noisy latent.
"""

from __future__ import annotations

import csv
import io as _io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..baselines import AlignmentLossKind, repa_loss, stss_l1_loss
from ..config import RunConfig, validate, write_snapshot
from ..correspondence import aligned_kl, backprop_to_features, entropy, temper
from ..io import atomic_write, write_heatmap, write_stt1
from ..motion_mask import MotionMask, build_mask, patchify, resample_mask, temporal_saliency
from ..stss import compute_stss, compute_stss_rows
from ..tensor_core import (
    FeatureVolume,
    NonFiniteError,
    flatten_tokens,
    l2_normalize_channels,
    resolve_dtype,
)
from .layers import avg_pool
from .models import Projector, SurrogateEncoder, ToyDenoiser
from .scene import make_dataset
from .schedule import cosine_schedule, forward_noise

log = logging.getLogger(__name__)


class NumericalFailure(RuntimeError):
    """A loss or gradient became non-finite; ``dump_dir`` holds the batch."""

    def __init__(self, message, dump_dir=None):
        super().__init__(message)
        self.dump_dir = dump_dir


@dataclass
class AlignResult:
    value: float
    feature_grad: np.ndarray | None
    teacher_entropy: float = float("nan")
    student_entropy: float = float("nan")
    n_terms: int = 0


def alignment_loss(kind: AlignmentLossKind, teacher: FeatureVolume, student_raw: np.ndarray,
                   *, tau: float, mask: MotionMask | None = None, exclude_self: bool = False,
                   with_grad: bool = True) -> AlignResult:
    """Alignment loss between a normalized teacher volume and raw student features.

    ``feature_grad`` is d(loss)/d(student_raw), shaped like ``student_raw``.
    """
    student = FeatureVolume(student_raw)
    if student.data.shape[:3] != teacher.data.shape[:3]:
        raise ValueError(f"student grid {student.grid} differs from teacher grid {teacher.grid}")
    if kind is AlignmentLossKind.REPA:
        rep = repa_loss(teacher, student)
        return AlignResult(rep.value, rep.feature_grad if with_grad else None, n_terms=rep.n_terms)
    unit = l2_normalize_channels(student)
    if kind is AlignmentLossKind.STSS_L1:
        rt = compute_stss(teacher)
        rs = compute_stss(unit)
        rep = stss_l1_loss(rt, rs)
        grad = None
        if with_grad:
            grad = backprop_to_features(rep.grad, flatten_tokens(unit), flatten_tokens(student))
            grad = grad.reshape(student.data.shape)
        return AlignResult(rep.value, grad, n_terms=rep.n_terms)
    if kind is AlignmentLossKind.M_TSA:
        if mask is None:
            raise ValueError("masked alignment needs a motion mask")
        rows = mask.indices
    else:
        rows = np.arange(teacher.n_tokens)
    pt = temper(compute_stss_rows(teacher, rows, exclude_self=exclude_self), tau)
    ps = temper(compute_stss_rows(unit, rows, exclude_self=exclude_self), tau)
    rep = aligned_kl(pt, ps, with_grad=with_grad)
    grad = None
    if with_grad:
        grad = backprop_to_features(rep.grad, flatten_tokens(unit), flatten_tokens(student),
                                    rows=rows).reshape(student.data.shape)
    return AlignResult(rep.value, grad, float(np.mean(entropy(pt))), float(np.mean(entropy(ps))),
                       rep.n_terms)


class ToyExperiment:
    """Dataset, frozen teacher, models and schedule built from a :class:`RunConfig`."""

    def __init__(self, cfg: RunConfig):
        self.cfg = validate(cfg)
        self.dtype = resolve_dtype(cfg.precision)
        d = cfg.data
        self.scenes, self.videos = make_dataset(d.scenes, frames=d.frames, height=d.height,
                                                width=d.width, n_objects=d.objects,
                                                bounce=d.bounce, seed=d.seed)
        self.latents = [avg_pool(2.0 * v - 1.0, d.latent_patch).astype(self.dtype)
                        for v in self.videos]
        self.latent_shape = self.latents[0].shape
        self.encoder = SurrogateEncoder(cfg.encoder.channels, cfg.encoder.hidden,
                                        cfg.encoder.patch, cfg.encoder.seed, self.dtype)
        self.teacher_raw = [self.encoder(v) for v in self.videos]
        self.teacher = [l2_normalize_channels(FeatureVolume(e)) for e in self.teacher_raw]
        self.teacher_grid = self.teacher[0].grid
        self.masks = [self.motion_mask(v) for v in self.videos]
        m = cfg.model
        self.denoiser = ToyDenoiser(self.latent_shape[-1], m.hidden, m.layers, m.tap_layer,
                                    m.kernel, m.activation, m.emb_dim, d.scenes, m.seed,
                                    self.dtype)
        self.projector = Projector(self.denoiser.tap_channels, cfg.encoder.channels,
                                   cfg.projector.hidden, self.latent_shape[:3],
                                   self.teacher_grid, cfg.projector.seed, self.dtype)
        self.schedule = cosine_schedule(cfg.schedule.steps, cfg.schedule.shift)

    def motion_mask(self, video) -> MotionMask:
        grid = patchify(video, *self.cfg.mask.patch)
        mask = build_mask(temporal_saliency(grid), self.cfg.mask.k)
        return resample_mask(mask, *self.teacher_grid)

    @property
    def kind(self) -> AlignmentLossKind:
        return self.cfg.kind

    def parameters(self) -> dict:
        ps = {f"den.{k}": v for k, v in self.denoiser.params.items()}
        ps.update({f"proj.{k}": v for k, v in self.projector.params.items()})
        return ps

    def load_parameters(self, params: dict) -> None:
        for k, v in params.items():
            model, name = k.split(".", 1)
            target = self.denoiser.params if model == "den" else self.projector.params
            if name not in target or target[name].shape != v.shape:
                raise ValueError(f"checkpoint entry {k} does not fit the model")
            target[name] = np.array(v, dtype=self.dtype)

    def example(self, idx: int, t: int, eps: np.ndarray, *, weight: float,
                with_grad: bool = True):
        """Losses (and parameter gradients) of scene ``idx`` at timestep ``t``."""
        cfg = self.cfg
        z_t = forward_noise(self.latents[idx], t, self.schedule, eps)
        pred, tap, cache = self.denoiser.forward(z_t, t, idx)
        resid = pred - eps
        l_diff = float(np.mean(resid * resid))
        use_align = t <= cfg.align.t_max
        l_align, d_tap, proj_grads, res = 0.0, None, None, None
        if use_align:
            feats, pcache = self.projector.forward(tap)
            need = with_grad and weight > 0
            res = alignment_loss(self.kind, self.teacher[idx], feats, tau=cfg.align.tau,
                                 mask=self.masks[idx], exclude_self=cfg.align.exclude_self,
                                 with_grad=need)
            l_align = res.value
            if need:
                d_tap, proj_grads = self.projector.backward(pcache, weight * res.feature_grad)
        grads = None
        if with_grad:
            d_pred = 2.0 * resid / resid.size
            den_grads = self.denoiser.backward(cache, d_pred, d_tap)
            grads = {f"den.{k}": v for k, v in den_grads.items()}
            for k, v in self.projector.params.items():
                grads[f"proj.{k}"] = proj_grads[k] if proj_grads is not None else np.zeros_like(v)
        return l_diff, l_align, grads, res


class AdamW:
    """Adam with decoupled weight decay; ``kind="sgd"`` drops the moments."""

    def __init__(self, lr=1e-3, weight_decay=0.01, beta1=0.9, beta2=0.999, eps=1e-8,
                 kind="adamw"):
        self.lr, self.wd = lr, weight_decay
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.kind = kind
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        for k in sorted(params):
            p, g = params[k], grads[k]
            if self.kind == "sgd":
                update = g
            else:
                m = self.m.get(k)
                if m is None:
                    m = self.m[k] = np.zeros_like(p)
                    self.v[k] = np.zeros_like(p)
                v = self.v[k]
                m *= self.b1
                m += (1 - self.b1) * g
                v *= self.b2
                v += (1 - self.b2) * g * g
                mhat = m / (1 - self.b1 ** self.t)
                vhat = v / (1 - self.b2 ** self.t)
                update = mhat / (np.sqrt(vhat) + self.eps)
            p -= self.lr * (update + self.wd * p)


@dataclass
class StepRecord:
    step: int
    l_diff: float
    l_align: float
    l_total: float


@dataclass
class TrainRun:
    config: RunConfig
    records: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)
    probe: dict = field(default_factory=dict)
    experiment: ToyExperiment | None = None
    out_dir: Path | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def smoothed(self, name: str, window: int | None = None, *, tail: bool = True) -> float:
        w = window or self.config.train.smooth
        col = self.column(name)
        w = min(w, len(col))
        return float(np.mean(col[-w:] if tail else col[:w]))


def losses_csv(records) -> str:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "l_diff", "l_align", "l_total"])
    for r in records:
        writer.writerow([r.step, repr(r.l_diff), repr(r.l_align), repr(r.l_total)])
    return buf.getvalue()


def _dump_failure(out_dir, step, batch) -> Path | None:
    if out_dir is None:
        return None
    dump = Path(out_dir) / f"failure_step{step:06d}"
    for b, (idx, t, eps) in enumerate(batch):
        write_stt1(dump / f"b{b}_eps.stt", eps)
        write_stt1(dump / f"b{b}_meta.stt", np.array([idx, t], dtype=np.float64))
    return dump


def save_checkpoint(params: dict, directory) -> None:
    for k in sorted(params):
        write_stt1(Path(directory) / f"{k}.stt", params[k])


def probe(exp: ToyExperiment) -> dict:
    """Loss averages on a fixed set of (scene, timestep, noise) triples."""
    cfg = exp.cfg
    rng = np.random.default_rng(cfg.eval.probe_seed)
    diffs, aligns, ht, hs = [], [], [], []
    for idx in range(len(exp.latents)):
        for t in cfg.eval.probe_t:
            eps = rng.standard_normal(exp.latent_shape).astype(exp.dtype)
            z_t = forward_noise(exp.latents[idx], t, exp.schedule, eps)
            pred, tap, _ = exp.denoiser.forward(z_t, t, idx)
            diffs.append(float(np.mean((pred - eps) ** 2)))
            feats, _ = exp.projector.forward(tap)
            res = alignment_loss(exp.kind, exp.teacher[idx], feats, tau=cfg.align.tau,
                                 mask=exp.masks[idx], exclude_self=cfg.align.exclude_self,
                                 with_grad=False)
            aligns.append(res.value)
            ht.append(res.teacher_entropy)
            hs.append(res.student_entropy)
    return {
        "l_diff": float(np.mean(diffs)),
        "l_align": float(np.mean(aligns)),
        "teacher_entropy": float(np.mean(ht)),
        "student_entropy": float(np.mean(hs)),
    }


def probe_query(exp: ToyExperiment) -> int:
    """Fixed query token for heatmaps: the most salient token of scene 0, frame 0."""
    return int(exp.masks[0].retained[0][0])


def write_heatmaps(exp: ToyExperiment, directory) -> None:
    cfg = exp.cfg
    q = probe_query(exp)
    t = cfg.eval.probe_t[0]
    eps = np.random.default_rng(cfg.eval.probe_seed).standard_normal(exp.latent_shape)
    z_t = forward_noise(exp.latents[0], t, exp.schedule, eps.astype(exp.dtype))
    _, tap, _ = exp.denoiser.forward(z_t, t, 0)
    feats, _ = exp.projector.forward(tap)
    student = l2_normalize_channels(FeatureVolume(feats))
    _, h, w = exp.teacher_grid
    for name, vol in (("teacher", exp.teacher[0]), ("student", student)):
        fld = temper(compute_stss_rows(vol, [q], exclude_self=cfg.align.exclude_self),
                     cfg.align.tau)
        for f in range(fld.frames):
            write_heatmap(fld.probs[0, f], h, w, Path(directory) / f"{name}_q{q}_f{f}.ppm")


def train(cfg: RunConfig, out_dir=None, *, experiment: ToyExperiment | None = None) -> TrainRun:
    """Run ``cfg.train.steps`` optimizer steps and record every loss.

    With ``out_dir`` the run is persisted: ``config.snapshot``,
    ``losses.csv``, ``timings.csv``, ``probe.txt``, checkpoint directories
    of STT1 blobs and PPM correspondence heatmaps for a fixed probe query.
    """
    exp = experiment or ToyExperiment(cfg)
    cfg = exp.cfg
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_snapshot(cfg, out / "config.snapshot")
    weight = cfg.align.weight
    params = exp.parameters()
    opt = AdamW(cfg.optim.lr, cfg.optim.weight_decay, cfg.optim.beta1, cfg.optim.beta2,
                cfg.optim.eps, cfg.optim.kind)
    rng = np.random.default_rng(cfg.train.seed)
    run = TrainRun(cfg, experiment=exp, out_dir=out)
    n_scenes = len(exp.latents)
    for step in range(1, cfg.train.steps + 1):
        t0 = time.perf_counter()
        batch = []
        for _ in range(cfg.train.batch):
            idx = int(rng.integers(n_scenes))
            t = int(rng.integers(1, cfg.schedule.steps + 1))
            eps = rng.standard_normal(exp.latent_shape).astype(exp.dtype)
            batch.append((idx, t, eps))
        l_diff = l_align = 0.0
        total_grads = None
        for idx, t, eps in batch:
            try:
                ld, la, grads, _ = exp.example(idx, t, eps, weight=weight)
            except NonFiniteError as exc:
                dump = _dump_failure(out, step, batch)
                raise NumericalFailure(f"step {step}: {exc}", dump) from exc
            l_diff += ld
            l_align += la
            if total_grads is None:
                total_grads = grads
            else:
                for k in total_grads:
                    total_grads[k] = total_grads[k] + grads[k]
        nb = len(batch)
        l_diff /= nb
        l_align /= nb
        l_total = l_diff + weight * l_align
        finite = np.isfinite([l_diff, l_align, l_total]).all() and all(
            np.all(np.isfinite(g)) for g in total_grads.values())
        if not finite:
            dump = _dump_failure(out, step, batch)
            raise NumericalFailure(
                f"non-finite loss at step {step}: l_diff={l_diff} l_align={l_align}"
                + (f"; batch dumped to {dump}" if dump else ""), dump)
        for k in total_grads:
            total_grads[k] /= nb
        opt.step(params, total_grads)
        run.records.append(StepRecord(step, l_diff, l_align, l_total))
        run.wall_clock.append(time.perf_counter() - t0)
        every = cfg.train.checkpoint_every
        if (every and step % every == 0) or step == cfg.train.steps:
            snap = {k: v.copy() for k, v in params.items()}
            run.checkpoints[step] = snap
            if out is not None:
                save_checkpoint(snap, out / f"ckpt_{step:06d}")
        if step % 100 == 0:
            log.info("step %d  l_diff %.5f  l_align %.5f", step, l_diff, l_align)
    run.probe = probe(exp)
    if out is not None:
        atomic_write(out / "losses.csv", losses_csv(run.records).encode())
        atomic_write(out / "timings.csv", ("step,seconds\n" + "".join(
            f"{r.step},{s:.6f}\n" for r, s in zip(run.records, run.wall_clock))).encode())
        atomic_write(out / "probe.txt", "".join(
            f"{k} = {v!r}\n" for k, v in run.probe.items()).encode())
        write_heatmaps(exp, out / "heatmaps")
    return run


SWEEP_KEYS = {"tau": "align.tau", "k": "mask.k", "layer": "model.tap_layer",
              "l": "model.tap_layer"}


def sweep(parameter: str, values, base: RunConfig, out_dir=None) -> tuple[list, list]:
    """One training run per value of ``parameter`` (tau, k or layer).

    Returns ``(runs, table)`` where each table row is a dict of final
    smoothed losses, probe losses and mean correspondence entropies.
    """
    if parameter not in SWEEP_KEYS:
        raise ValueError(f"cannot sweep {parameter!r}; choose from tau, k, layer")
    key = SWEEP_KEYS[parameter]
    runs, table = [], []
    for value in values:
        cfg = base.copy()
        cfg.set(key, str(value))
        sub = None if out_dir is None else Path(out_dir) / f"{parameter}_{value}"
        run = train(cfg, sub)
        runs.append(run)
        table.append({
            "parameter": parameter,
            "value": cfg.get(key),
            "final_l_diff": run.smoothed("l_diff"),
            "final_l_align": run.smoothed("l_align"),
            "final_l_total": run.smoothed("l_total"),
            "probe_l_align": run.probe["l_align"],
            "teacher_entropy": run.probe["teacher_entropy"],
            "student_entropy": run.probe["student_entropy"],
        })
    if out_dir is not None:
        atomic_write(Path(out_dir) / "summary.csv", summary_csv(table).encode())
    return runs, table


def summary_csv(table) -> str:
    buf = _io.StringIO()
    cols = ["parameter", "value", "final_l_diff", "final_l_align", "final_l_total",
            "probe_l_align", "teacher_entropy", "student_entropy"]
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    for row in table:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()
