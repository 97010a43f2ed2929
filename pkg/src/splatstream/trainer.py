"""Streaming training back-end.

Keyframes arrive one at a time; each arrival seeds geometry from its
point cloud, then the trainer loops select -> render -> loss -> backward
-> optimizer step under a per-arrival budget (a fixed iteration count or
a wall-clock allowance emulating a real-time front-end), densifying on a
global iteration interval. One ingestion producer feeds one training
consumer through a small bounded queue; the trainer alone mutates the
map, optimizer, and scheduler.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from splatstream.core import GaussianMap
from splatstream.densify import (DensifyConfig, accumulate_grad_stats,
                                 densify_and_prune, seed_from_points)
from splatstream.losses import compute_losses, psnr, ssim_metric
from splatstream.optimizer import (AdamState, LearningRates, adam_step,
                                   resize_for_densify)
from splatstream.rasterizer import (RasterOpts, backward_pixelwise,
                                    backward_splatwise, rasterize_forward)
from splatstream.scheduler import KeyframeScheduler

BACKWARD_MODES = ("pixel", "splat")
SCHEDULER_MODES = ("adaptive", "uniform")


@dataclass
class TrainConfig:
    backward_mode: str = "splat"
    scheduler_mode: str = "adaptive"
    lambda_ssim: float = 0.2
    lambda_o: float = 0.001
    d: int = 4
    r0: int = 8
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    budget_iters: int | None = None       # iterations per arrival
    budget_ms: float | None = None        # wall milliseconds per arrival
    total_iter_cap: int | None = None
    refine_iters: int = 0
    seed: int = 0
    sh_degree: int = 3
    deterministic: bool = False
    n_workers: int = 1
    background: tuple = (0.0, 0.0, 0.0)
    lr_horizon: int = 30000
    lrs: LearningRates | None = None

    def validate(self):
        if self.backward_mode not in BACKWARD_MODES:
            raise ValueError(f"backward_mode must be one of {BACKWARD_MODES}")
        if self.scheduler_mode not in SCHEDULER_MODES:
            raise ValueError(f"scheduler_mode must be one of {SCHEDULER_MODES}")
        if (self.budget_iters is None) == (self.budget_ms is None):
            raise ValueError("set exactly one of budget_iters / budget_ms")
        if self.budget_iters is not None and self.budget_iters < 1:
            raise ValueError("budget_iters must be >= 1")
        if self.budget_ms is not None and self.budget_ms <= 0:
            raise ValueError("budget_ms must be > 0")
        if self.deterministic and self.budget_ms is not None:
            raise ValueError("deterministic runs require an iteration budget")
        if self.lambda_o < 0:
            raise ValueError("lambda_o must be >= 0")
        return self


@dataclass
class TrainReport:
    keyframe_ids: list
    iters: list
    last_loss: list
    psnr: list
    ssim: list
    total_iterations: int
    iters_per_sec: float
    final_primitive_count: int
    config: dict

    def to_csv(self, path) -> None:
        """One row per keyframe plus a trailing summary row."""
        lines = ["keyframe_id,iters,last_loss,psnr,ssim"]
        for kid, it, ll, ps, ss in zip(self.keyframe_ids, self.iters,
                                       self.last_loss, self.psnr, self.ssim):
            lines.append(f"{kid},{it},{_fmt(ll)},{_fmt(ps)},{_fmt(ss)}")
        lines.append(
            f"summary,{self.total_iterations},{_fmt(_mean(self.last_loss))},"
            f"{_fmt(_mean(self.psnr))},{_fmt(_mean(self.ssim))}")
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def _mean(xs) -> float:
    xs = [x for x in xs if np.isfinite(x)]
    return float(np.mean(xs)) if xs else float("nan")


def _prefetch(iterable, depth: int = 2):
    """Run the ingestion side on its own thread behind a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()
    error = []

    def producer():
        try:
            for item in iterable:
                q.put(item)
        except BaseException as exc:  # propagate loader errors to the consumer
            error.append(exc)
        finally:
            q.put(done)

    threading.Thread(target=producer, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            if error:
                raise error[0]
            return
        yield item


class _Trainer:
    def __init__(self, config: TrainConfig):
        self.cfg = config.validate()
        self.gmap = GaussianMap()
        self.optim = AdamState.for_map(self.gmap, config.lrs, config.lr_horizon)
        self.sched = KeyframeScheduler(d=config.d, r0=config.r0, seed=config.seed)
        self.densify_rng = np.random.default_rng(config.seed + 1)
        self.frames = {}
        self.kf_iters = {}
        self.kf_loss = {}
        self.total_iters = 0
        self.since_densify = 0
        self.extent_lo = None
        self.extent_hi = None
        self.opts = RasterOpts(
            sh_degree=config.sh_degree,
            background=tuple(config.background),
            with_checkpoints=(config.backward_mode == "splat"),
            n_workers=1 if config.deterministic else config.n_workers)

    @property
    def scene_extent(self) -> float:
        if self.extent_lo is None:
            return 1.0
        diag = float(np.linalg.norm(self.extent_hi - self.extent_lo))
        return max(diag, 1e-6)

    def ingest(self, kf):
        self.sched.add_keyframe(kf.frame_id)
        self.frames[kf.frame_id] = kf
        self.kf_iters[kf.frame_id] = 0
        self.kf_loss[kf.frame_id] = float("nan")
        if kf.points is not None and len(kf.points):
            pts = kf.points[:, :3]
            lo, hi = pts.min(axis=0), pts.max(axis=0)
            self.extent_lo = lo if self.extent_lo is None else np.minimum(self.extent_lo, lo)
            self.extent_hi = hi if self.extent_hi is None else np.maximum(self.extent_hi, hi)
            n_before = len(self.gmap)
            self.gmap.insert_arrays(*seed_from_points(pts, kf.points[:, 3:],
                                                      self.scene_extent))
            self.optim = resize_for_densify(
                self.optim, np.arange(n_before), len(self.gmap) - n_before)

    def capped(self) -> bool:
        cap = self.cfg.total_iter_cap
        return cap is not None and self.total_iters >= cap

    def train_one(self) -> bool:
        """One optimization iteration; False when nothing can be trained."""
        if len(self.gmap) == 0 or not self.frames:
            return False
        cfg = self.cfg
        # densify lazily so an event lands only between training iterations,
        # never as the last thing before evaluation
        if self.since_densify >= cfg.densify.interval:
            res = densify_and_prune(self.gmap, cfg.densify, self.scene_extent,
                                    self.densify_rng)
            self.optim = resize_for_densify(self.optim, res.survivors, res.n_new)
            self.since_densify = 0
            if len(self.gmap) == 0:
                return False
        if cfg.scheduler_mode == "adaptive":
            kf_id = self.sched.select()
        else:
            kf_id = self.sched.select_uniform_baseline()
        kf = self.frames[kf_id]
        out = rasterize_forward(self.gmap, kf.camera, self.opts)
        lb = compute_losses(out.image, kf.image, self.gmap.opacity_logits,
                            cfg.lambda_ssim, cfg.lambda_o)
        if cfg.backward_mode == "splat":
            grads = backward_splatwise(out, lb.grad_image)
        else:
            grads = backward_pixelwise(out, lb.grad_image)
        grads.opacity_logit = grads.opacity_logit + lb.grad_opacity_logit
        adam_step(self.gmap, grads, self.optim)
        accumulate_grad_stats(self.gmap, grads)
        if cfg.scheduler_mode == "adaptive":
            self.sched.record_result(kf_id, lb.total)
        self.kf_iters[kf_id] += 1
        self.kf_loss[kf_id] = lb.total
        self.total_iters += 1
        self.since_densify += 1
        return True

    def run_budget(self, budget_iters=None, budget_ms=None):
        if budget_iters is not None:
            for _ in range(budget_iters):
                if self.capped() or not self.train_one():
                    return
        else:
            t0 = time.perf_counter()
            while (time.perf_counter() - t0) * 1000.0 < budget_ms:
                if self.capped() or not self.train_one():
                    return


def run_stream(keyframes, config: TrainConfig):
    """Consume a keyframe stream and train the map under arrival budgets.

    After the stream ends an optional refinement budget runs, then every
    keyframe is re-rendered for the report's PSNR/SSIM columns. Returns
    ``(TrainReport, GaussianMap)``.
    """
    tr = _Trainer(config)
    t0 = time.perf_counter()
    for kf in _prefetch(keyframes):
        tr.ingest(kf)
        tr.run_budget(config.budget_iters, config.budget_ms)
    if config.refine_iters:
        tr.run_budget(budget_iters=config.refine_iters)
    elapsed = time.perf_counter() - t0

    eval_opts = RasterOpts(
        sh_degree=config.sh_degree, background=tuple(config.background),
        with_checkpoints=False,
        n_workers=1 if config.deterministic else config.n_workers)
    ids = sorted(tr.frames)
    psnrs, ssims = [], []
    for kf_id in ids:
        kf = tr.frames[kf_id]
        image = rasterize_forward(tr.gmap, kf.camera, eval_opts).image
        psnrs.append(psnr(image, kf.image))
        ssims.append(ssim_metric(image, kf.image))

    cfg_dict = asdict(config)
    return TrainReport(
        keyframe_ids=ids,
        iters=[tr.kf_iters[i] for i in ids],
        last_loss=[tr.kf_loss[i] for i in ids],
        psnr=psnrs,
        ssim=ssims,
        total_iterations=tr.total_iters,
        iters_per_sec=tr.total_iters / elapsed if elapsed > 0 else 0.0,
        final_primitive_count=len(tr.gmap),
        config=cfg_dict,
    ), tr.gmap


def render_trajectory(gmap: GaussianMap, cameras, opts: RasterOpts | None = None):
    """Render one image per camera with checkpointing disabled."""
    if opts is None:
        opts = RasterOpts()
    if opts.with_checkpoints:
        from dataclasses import replace

        opts = replace(opts, with_checkpoints=False)
    return [rasterize_forward(gmap, cam, opts).image for cam in cameras]
