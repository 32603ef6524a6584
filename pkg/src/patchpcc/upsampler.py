"""Patch upsampling: the autoencoder without quantization, emitting M*K points per patch."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from patchpcc import geometry
from patchpcc.network import (
    KIND_UPSAMPLER,
    FCDecoder,
    ModelConfig,
    PointNetEncoder,
    init_params,
    save_checkpoint,
)
from patchpcc.patching import _exact, _patches, knn
from patchpcc.training import AdamState, LossReport, _write_csv, adam_step, chamfer_batch

log = logging.getLogger(__name__)


@dataclass
class UpsampleConfig:
    M: int = 4
    alpha: float = 2.0
    K: int = 128
    d: int = 128
    group_size: int = 8
    sa_widths: list = field(default_factory=lambda: [32, 64, 128])
    pn_widths: list = field(default_factory=lambda: [256, 512])
    dec_widths: list = field(default_factory=lambda: [1024, 512])

    def __post_init__(self):
        if self.M < 2 or int(self.M) != self.M:
            raise ValueError("M must be an integer >= 2")
        if not self.alpha >= 1:
            raise ValueError("alpha must be >= 1")

    @property
    def k(self) -> int:
        return self.M * self.K

    def model_config(self) -> ModelConfig:
        return ModelConfig(K=self.K, k=self.k, d=self.d, group_size=self.group_size,
                           sa_widths=self.sa_widths, pn_widths=self.pn_widths,
                           dec_widths=self.dec_widths)

    def patch_count(self, n: int) -> int:
        s = _exact(self.alpha) * n / self.K
        if s.denominator != 1 or not 1 <= s <= n:
            raise ValueError(f"alpha*N/K = {float(s)} is not a valid patch count (N={n}, K={self.K})")
        return int(s)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UpsampleConfig":
        return cls(**d)


class PatchUpsampler(nn.Module):
    kind = KIND_UPSAMPLER

    def __init__(self, cfg: UpsampleConfig):
        super().__init__()
        self.cfg = cfg
        mc = cfg.model_config()
        self.encoder = PointNetEncoder(mc)
        self.decoder = FCDecoder(mc)

    def forward(self, patches):
        return self.decoder(self.encoder(patches))


def init_upsampler(cfg: UpsampleConfig, seed: int = 0) -> PatchUpsampler:
    return init_params(cfg, seed, model_cls=PatchUpsampler)


def upsample_forward(patch, model: PatchUpsampler) -> torch.Tensor:
    """(K, 3) local patch -> (M*K, 3) local points."""
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(patch, dtype=dtype)
    if x.shape != (model.cfg.K, 3):
        raise ValueError(f"patch must have shape ({model.cfg.K}, 3), got {tuple(x.shape)}")
    return model(x[None])[0]


def upsample(cloud, model: PatchUpsampler, start: int = 0) -> np.ndarray:
    """Upsample a world-coordinate cloud to M * alpha * N points."""
    pts = geometry.as_cloud(cloud)
    S = model.cfg.patch_count(pts.shape[0])
    norm, scale = geometry.normalize_to_box(pts)
    patches, centroids, _ = _patches(norm, S, model.cfg.K, start)
    with torch.no_grad():
        out = model(torch.as_tensor(patches, dtype=torch.float32)).double().numpy()
    return geometry.denormalize((out + centroids[:, None, :]).reshape(-1, 3), scale)


# ---------------------------------------------------------------------------
# training


@dataclass
class UpsampleTrainConfig:
    model: UpsampleConfig = field(default_factory=UpsampleConfig)
    shapes: list = field(default_factory=lambda: ["sphere"])
    points: int = 1024
    lr: float = 5e-4
    batch: int = 16
    max_steps: int = 2000
    seed: int = 0
    out: str | None = None
    log_csv: str | None = None
    log_every: int = 50
    checkpoint_every: int = 1000


def dense_pairs(sparse, dense, cfg: UpsampleConfig):
    """Input patches from the sparse cloud and M*K-point targets from its dense sibling.

    Both clouds must already share a coordinate frame. Returns (inputs, targets)
    in centroid-local coordinates.
    """
    S = cfg.patch_count(sparse.shape[0])
    patches, centroids, _ = _patches(sparse, S, cfg.K)
    targets = np.stack([dense[knn(dense, c, cfg.k)] - c for c in centroids])
    return patches, targets


def _training_pairs(tc: UpsampleTrainConfig):
    inputs, targets = [], []
    for i, kind in enumerate(tc.shapes):
        seed = tc.seed + i
        sparse = geometry.synth_shape(geometry.ShapeSpec(kind, tc.points, seed))
        # the sibling has M*N points so a K-point input patch and an M*K-point target cover the same area
        dense = geometry.synth_shape(geometry.ShapeSpec(kind, tc.model.M * tc.points, seed + 100_003))
        sparse_n, scale = geometry.normalize_to_box(sparse)
        dense_n = geometry.apply_scale(dense, scale)
        x, y = dense_pairs(sparse_n, dense_n, tc.model)
        inputs.append(x)
        targets.append(y)
    return inputs, targets


def train_upsampler(tc: UpsampleTrainConfig):
    """Chamfer-only training of the upsampler; returns ``(model, reports)``."""
    inputs, targets = _training_pairs(tc)
    model = init_upsampler(tc.model, tc.seed)
    params = list(model.parameters())
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(tc.seed)
    reports = []
    t0 = time.perf_counter()
    for step in range(tc.max_steps + 1):
        shape = step % len(inputs)
        idx = rng.choice(len(inputs[shape]), size=tc.batch, replace=tc.batch > len(inputs[shape]))
        x = torch.as_tensor(inputs[shape][idx], dtype=torch.float32)
        y = torch.as_tensor(targets[shape][idx], dtype=torch.float32)
        loss = chamfer_batch(model(x), y).mean()
        if not torch.isfinite(loss):
            raise FloatingPointError(f"step {step}: non-finite loss")
        if step % tc.log_every == 0 or step == tc.max_steps:
            v = loss.item()
            reports.append(LossReport(step, v, 0.0, v, time.perf_counter() - t0))
            log.info("step %d chamfer=%.4f", step, v)
        if step == tc.max_steps:
            break
        grads = torch.autograd.grad(loss, params)
        adam_step(params, grads, state, tc.lr)
        if tc.out and (step + 1) % tc.checkpoint_every == 0:
            save_checkpoint(model, tc.model, tc.out)
    if tc.out:
        save_checkpoint(model, tc.model, tc.out)
    csv_path = tc.log_csv or (tc.out + ".csv" if tc.out else None)
    if csv_path:
        _write_csv(csv_path, reports)
    model.eval()
    return model, reports
