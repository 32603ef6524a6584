"""Analysis / synthesis transforms and the checkpoint format.

The analysis transform runs a per-point set abstraction (group the 8 nearest
neighbours of every point inside the patch, shared MLP, max-pool) followed by
a PointNet stage pooled over the whole patch. The synthesis transform is a
plain MLP whose output is reshaped into k points.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from patchpcc.entropy import CodingTable, FactorizedPrior

CHECKPOINT_MAGIC = b"PPCC"
CHECKPOINT_VERSION = 1
KIND_AUTOENCODER = 0
KIND_UPSAMPLER = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    K: int = 128
    k: int = 64
    d: int = 16
    group_size: int = 8
    sa_widths: list = field(default_factory=lambda: [32, 64, 128])
    pn_widths: list = field(default_factory=lambda: [64, 32])
    dec_widths: list = field(default_factory=lambda: [128, 256])

    def __post_init__(self):
        widths = list(self.sa_widths) + list(self.pn_widths) + list(self.dec_widths)
        if min([self.K, self.k, self.d, self.group_size] + widths) < 1:
            raise ValueError("all sizes and widths must be >= 1")
        if self.group_size > self.K:
            raise ValueError(f"group_size={self.group_size} exceeds K={self.K}")
        self.sa_widths = list(self.sa_widths)
        self.pn_widths = list(self.pn_widths)
        self.dec_widths = list(self.dec_widths)

    @property
    def D(self) -> int:
        return self.sa_widths[-1]

    @property
    def alpha(self) -> float:
        return self.K / self.k

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def mlp(widths, final_relu: bool) -> nn.Sequential:
    layers = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(nn.Linear(a, b))
        if final_relu or i < len(widths) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


def group_neighbors(x: torch.Tensor, group_size: int) -> torch.Tensor:
    """Indices (B, K, g) of each point's g nearest points in its patch, itself first."""
    with torch.no_grad():
        d2 = ((x[:, :, None, :] - x[:, None, :, :]) ** 2).sum(-1)
        return torch.sort(d2, dim=-1, stable=True).indices[..., :group_size]


class MaxPool(nn.Module):
    """Max over one axis; the gradient goes to the first maximal element."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, x):
        return x.max(dim=self.dim).values


class SetAbstractionPerPoint(nn.Module):
    def __init__(self, group_size: int, widths):
        super().__init__()
        self.group_size = group_size
        self.mlp = mlp([3] + list(widths), final_relu=True)
        self.pool = MaxPool(dim=2)

    def forward(self, x):
        idx = group_neighbors(x, self.group_size)
        b = torch.arange(x.shape[0], device=x.device)[:, None, None]
        offsets = x[b, idx] - x[:, :, None, :]
        return self.pool(self.mlp(offsets))


class PointNetEncoder(nn.Module):
    """SA per point, shared per-point MLP (linear last layer), global max-pool."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.sa = SetAbstractionPerPoint(cfg.group_size, cfg.sa_widths)
        self.pn = mlp([cfg.D] + cfg.pn_widths + [cfg.d], final_relu=False)
        self.pool = MaxPool(dim=1)

    def forward(self, patches):
        return self.pool(self.pn(self.sa(patches)))


class FCDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.k = cfg.k
        self.fc = mlp([cfg.d] + cfg.dec_widths + [cfg.k * 3], final_relu=False)

    def forward(self, latent):
        return self.fc(latent).reshape(latent.shape[0], self.k, 3)


class PatchAutoencoder(nn.Module):
    kind = KIND_AUTOENCODER

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = PointNetEncoder(cfg)
        self.decoder = FCDecoder(cfg)
        self.entropy = FactorizedPrior(cfg.d)
        self.tables: CodingTable | None = None

    def forward(self, patches):
        return self.decoder(self.encoder(patches))


def _xavier_(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            fan_out, fan_in = m.weight.shape
            bound = (6.0 / (fan_in + fan_out)) ** 0.5
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                m.bias.zero_()


def init_params(cfg: ModelConfig, seed: int = 0, model_cls=PatchAutoencoder) -> nn.Module:
    """Build a model with Glorot-uniform weights and zero biases, deterministic per seed."""
    gen = torch.Generator().manual_seed(seed)
    model = model_cls(cfg)
    _xavier_(model, gen)
    if getattr(model, "entropy", None) is not None:
        model.entropy.reset_parameters(gen)
    return model


def encoder_forward(patch, model: PatchAutoencoder) -> torch.Tensor:
    """Single (K, 3) patch to its d-dimensional latent."""
    x = torch.as_tensor(patch, dtype=_dtype(model))
    if x.ndim != 2 or x.shape != (model.cfg.K, 3):
        raise ValueError(f"patch must have shape ({model.cfg.K}, 3), got {tuple(x.shape)}")
    return model.encoder(x[None])[0]


def decoder_forward(latent, model: PatchAutoencoder) -> torch.Tensor:
    z = torch.as_tensor(latent, dtype=_dtype(model))
    if z.shape != (model.cfg.d,):
        raise ValueError(f"latent must have length {model.cfg.d}, got {tuple(z.shape)}")
    return model.decoder(z[None])[0]


def _dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# checkpoint


def save_checkpoint(model: nn.Module, cfg: ModelConfig, path, extra: dict | None = None) -> None:
    """Write the PPCC container: magic, version, kind, config JSON, named float32 tensors."""
    meta = {"config": cfg.to_dict()}
    if extra:
        meta.update(extra)
    tensors = [(name, p.detach().cpu().numpy()) for name, p in model.state_dict().items()]
    tables = getattr(model, "tables", None)
    if tables is not None:
        tensors.extend(tables.to_tensors())

    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<HB", CHECKPOINT_VERSION, model.kind)
    cfg_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf += struct.pack("<I", len(cfg_bytes)) + cfg_bytes
    buf += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        buf += struct.pack("<H", len(nb)) + nb
        buf += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[int, dict, dict]:
    """Low-level read: (kind, metadata, {name: float32 array})."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a PPCC checkpoint (bad magic)")
    version, kind = r.unpack("<HB")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    meta = json.loads(r.take(n).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).copy()
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after last tensor")
    return kind, meta, tensors


def load_checkpoint(path):
    """Return ``(model, cfg)``; the model class is chosen from the kind flag."""
    kind, meta, tensors = read_checkpoint(path)
    cfg_dict = dict(meta["config"])
    if kind == KIND_AUTOENCODER:
        cfg = ModelConfig.from_dict(cfg_dict)
        model = PatchAutoencoder(cfg)
    elif kind == KIND_UPSAMPLER:
        from patchpcc.upsampler import PatchUpsampler, UpsampleConfig

        cfg = UpsampleConfig.from_dict(cfg_dict)
        model = PatchUpsampler(cfg)
    else:
        raise CheckpointError(f"unknown model kind {kind}")
    state = model.state_dict()
    missing = set(state) - set(tensors)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)}")
    for name in state:
        if tuple(state[name].shape) != tensors[name].shape:
            raise CheckpointError(f"shape mismatch for {name}")
    model.load_state_dict({name: torch.from_numpy(tensors[name]) for name in state})
    if kind == KIND_AUTOENCODER:
        model.tables = CodingTable.from_tensors(tensors)
    model.eval()
    return model, cfg
