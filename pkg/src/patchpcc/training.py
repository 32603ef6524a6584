"""Rate-distortion training: Chamfer distortion, rate term, Adam, patch batches."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from patchpcc import geometry
from patchpcc.entropy import build_coding_tables, hard_quantize, noisy_quantize, rate_bits
from patchpcc.network import ModelConfig, PatchAutoencoder, init_params, save_checkpoint
from patchpcc.patching import PatchConfig, extract_patches

log = logging.getLogger(__name__)

CSV_HEADER = ["step", "d_cd", "rate_bits", "loss", "seconds"]


class NonFiniteLoss(FloatingPointError):
    pass


def chamfer_batch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-pair Chamfer distance for batches a (P, n, 3), b (P, m, 3) -> (P,)."""
    with torch.no_grad():
        d2 = sum((a[:, :, None, i] - b[:, None, :, i]) ** 2 for i in range(3))
        ab = d2.argmin(dim=2)  # first minimum on ties
        ba = d2.argmin(dim=1)
    # distances recomputed on the matched pairs, so autograd never stores the full (P, n, m) tensor
    da = ((a - torch.gather(b, 1, ab[..., None].expand(-1, -1, 3))) ** 2).sum(-1)
    db = ((b - torch.gather(a, 1, ba[..., None].expand(-1, -1, 3))) ** 2).sum(-1)
    return da.mean(dim=1) + db.mean(dim=1)


def chamfer(a, b) -> torch.Tensor:
    """Squared-distance Chamfer between two point sets, each direction averaged."""
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer distance needs non-empty point sets")
    return chamfer_batch(a[None], b[None])[0]


@dataclass
class LossTerms:
    loss: torch.Tensor
    d_cd: torch.Tensor
    rate: torch.Tensor


def forward_loss(model: PatchAutoencoder, patches: torch.Tensor, lam: float,
                 noise: torch.Tensor | None = None,
                 generator: torch.Generator | None = None) -> LossTerms:
    """L = D_CD + lam * R for one batch of patches, with additive-noise quantization.

    ``noise`` pins the uniform noise (used by gradient checks); otherwise it is
    drawn from ``generator``.
    """
    z = model.encoder(patches)
    z_tilde = z + noise if noise is not None else noisy_quantize(z, generator)
    recon = model.decoder(z_tilde)
    d_cd = chamfer_batch(patches, recon).mean()
    rate = rate_bits(model.entropy, z_tilde)
    return LossTerms(d_cd + lam * rate, d_cd, rate)


def batch_loss(model, patches, lam, generator=None, noise=None):
    """Return ``(terms, grads)`` with grads aligned to ``model.parameters()``."""
    terms = forward_loss(model, patches, lam, noise=noise, generator=generator)
    if not torch.isfinite(terms.loss):
        raise NonFiniteLoss(f"non-finite loss {terms.loss.item()}")
    grads = torch.autograd.grad(terms.loss, list(model.parameters()))
    return terms, grads


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


@torch.no_grad()
def adam_step(params, grads, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam, updating ``params`` and ``state`` in place."""
    state.step += 1
    bc1 = 1 - state.beta1 ** state.step
    bc2 = 1 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)


# ---------------------------------------------------------------------------
# dataset


@dataclass
class DatasetSpec:
    shapes: list = field(default_factory=lambda: ["sphere"])
    points: int = 1024
    mesh_dir: str | None = None
    shape_seed: int = 0

    def raw_clouds(self) -> list[np.ndarray]:
        if self.mesh_dir:
            meshes = geometry.list_meshes(self.mesh_dir)
            out = [geometry.load_off_and_sample(p, self.points, self.shape_seed + i)
                   for i, p in enumerate(meshes)]
        else:
            out = [geometry.synth_shape(geometry.ShapeSpec(kind, self.points, self.shape_seed + i))
                   for i, kind in enumerate(self.shapes)]
        if not out:
            raise ValueError("dataset is empty")
        return out

    def clouds(self) -> list[np.ndarray]:
        return [geometry.normalize_to_box(c)[0] for c in self.raw_clouds()]


def build_patch_sets(clouds, patch_cfg_for) -> list[np.ndarray]:
    sets = []
    for cloud in clouds:
        cfg = patch_cfg_for(cloud.shape[0])
        patches, _, _ = extract_patches(cloud, cfg)
        sets.append(patches)
    return sets


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    alpha: float = 2.0
    lam: float = 1e-4
    lr: float = 5e-4
    batch: int = 16
    max_steps: int = 4000
    seed: int = 0
    out: str | None = None
    log_csv: str | None = None
    log_every: int = 50
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        if self.batch < 1:
            raise ValueError("batch size must be >= 1")

    def patch_config(self, n: int) -> PatchConfig:
        cfg = PatchConfig.resolve(n, self.model.K, self.alpha)
        if cfg.k != self.model.k:
            raise ValueError(f"model k={self.model.k} but K/alpha={cfg.k}")
        return cfg


@dataclass
class LossReport:
    step: int
    d_cd: float
    rate_bits: float
    loss: float
    seconds: float


@dataclass
class TrainResult:
    model: PatchAutoencoder
    reports: list


def _write_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in reports:
            w.writerow([r.step, repr(r.d_cd), repr(r.rate_bits), repr(r.loss), f"{r.seconds:.3f}"])


def read_loss_csv(path) -> list[LossReport]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [LossReport(int(r["step"]), float(r["d_cd"]), float(r["rate_bits"]),
                       float(r["loss"]), float(r["seconds"])) for r in rows]


def sample_batch(patch_sets, step: int, batch: int, rng: np.random.Generator) -> np.ndarray:
    """Round-robin over shapes, then ``batch`` random patches of that shape."""
    patches = patch_sets[step % len(patch_sets)]
    idx = rng.choice(len(patches), size=batch, replace=batch > len(patches))
    return patches[idx]


def finalize_tables(model: PatchAutoencoder, patch_sets) -> None:
    with torch.no_grad():
        z = [hard_quantize(model.encoder(torch.as_tensor(p, dtype=torch.float32)))
             for p in patch_sets]
    model.tables = build_coding_tables(model.entropy, np.concatenate(z))


def train(cfg: TrainConfig, progress=None) -> TrainResult:
    """Train the autoencoder; writes the checkpoint and loss CSV when paths are set.

    Reproducible bit-for-bit for a given config when torch runs single-threaded.
    """
    clouds = cfg.dataset.clouds()
    patch_sets = build_patch_sets(clouds, cfg.patch_config)

    model = init_params(cfg.model, cfg.seed)
    params = list(model.parameters())
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(cfg.seed)
    noise_gen = torch.Generator().manual_seed(cfg.seed + 1)
    csv_path = cfg.log_csv or (cfg.out + ".csv" if cfg.out else None)

    reports = []
    t0 = time.perf_counter()
    for step in range(cfg.max_steps + 1):
        batch = torch.as_tensor(sample_batch(patch_sets, step, cfg.batch, rng), dtype=torch.float32)
        try:
            terms, grads = batch_loss(model, batch, cfg.lam, generator=noise_gen)
        except NonFiniteLoss as exc:
            raise NonFiniteLoss(f"step {step}: {exc}") from None
        if step % cfg.log_every == 0 or step == cfg.max_steps:
            rep = LossReport(step, terms.d_cd.item(), terms.rate.item(), terms.loss.item(),
                             time.perf_counter() - t0)
            reports.append(rep)
            log.info("step %d d_cd=%.4f rate=%.2f loss=%.4f", step, rep.d_cd, rep.rate_bits, rep.loss)
            if progress is not None:
                progress(rep)
        if step == cfg.max_steps:
            break
        adam_step(params, grads, state, cfg.lr)
        if cfg.out and (step + 1) % cfg.checkpoint_every == 0 and step + 1 < cfg.max_steps:
            finalize_tables(model, patch_sets)
            save_checkpoint(model, cfg.model, cfg.out)
            if csv_path:
                _write_csv(csv_path, reports)

    finalize_tables(model, patch_sets)
    if cfg.out:
        save_checkpoint(model, cfg.model, cfg.out)
    if csv_path:
        _write_csv(csv_path, reports)
    model.eval()
    return TrainResult(model, reports)
