"""Quantization, the factorized entropy model, and an integer range coder.

The entropy model is a per-channel learned CDF built from a small monotone
network (softplus-positive matrices, tanh-gated nonlinearity) as used in
factorized-prior learned compression. The range coder is a 32-bit carry-less
design with 16-bit frequencies, so bitstreams are identical on every platform.
"""

from __future__ import annotations

import bisect
import struct
import zlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

LIKELIHOOD_FLOOR = 1e-9
FREQ_BITS = 16
FREQ_TOTAL = 1 << FREQ_BITS
TABLE_MARGIN = 4

_MASK32 = 0xFFFFFFFF
_TOP = 1 << 24
_BOT = 1 << 16
_SENTINEL_BITS = 8


class RangeCoderError(ValueError):
    pass


# ---------------------------------------------------------------------------
# quantization


def noisy_quantize(z: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    """Additive U(-0.5, 0.5) noise; the gradient w.r.t. ``z`` is the identity."""
    noise = torch.rand(z.shape, generator=generator, dtype=z.dtype) - 0.5
    return z + noise


def hard_quantize(z) -> np.ndarray:
    """Round half away from zero to int64."""
    if isinstance(z, torch.Tensor):
        z = z.detach().cpu().numpy()
    z = np.asarray(z, dtype=np.float64)
    return (np.sign(z) * np.floor(np.abs(z) + 0.5)).astype(np.int64)


# ---------------------------------------------------------------------------
# entropy model


class FactorizedPrior(nn.Module):
    """Fully factorized density over d channels, one learned CDF per channel."""

    def __init__(self, channels: int, filters=(3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        self.filters = tuple(filters)
        self.init_scale = init_scale
        dims = (1,) + self.filters + (1,)
        self.matrices = nn.ParameterList(
            nn.Parameter(torch.zeros(channels, dims[i + 1], dims[i])) for i in range(len(dims) - 1))
        self.biases = nn.ParameterList(
            nn.Parameter(torch.zeros(channels, dims[i + 1], 1)) for i in range(len(dims) - 1))
        self.factors = nn.ParameterList(
            nn.Parameter(torch.zeros(channels, dims[i + 1], 1)) for i in range(len(self.filters)))

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        dims = (1,) + self.filters + (1,)
        scale = self.init_scale ** (1 / (len(self.filters) + 1))
        with torch.no_grad():
            for i, m in enumerate(self.matrices):
                m.fill_(float(np.log(np.expm1(1 / scale / dims[i + 1]))))
            for b in self.biases:
                b.uniform_(-0.5, 0.5, generator=generator)
            for f in self.factors:
                f.zero_()

    def logits_cdf(self, x: torch.Tensor) -> torch.Tensor:
        """x: (C, 1, B) -> logits of the CDF, same shape."""
        for i, m in enumerate(self.matrices):
            x = torch.matmul(F.softplus(m), x) + self.biases[i]
            if i < len(self.factors):
                x = x + torch.tanh(self.factors[i]) * torch.tanh(x)
        return x

    def cdf(self, values: torch.Tensor) -> torch.Tensor:
        """Evaluate every channel's CDF at ``values`` of shape (B, d)."""
        x = values.t().unsqueeze(1)
        return torch.sigmoid(self.logits_cdf(x)).squeeze(1).t()

    def likelihood(self, z: torch.Tensor) -> torch.Tensor:
        """P(z) = c(z + 1/2) - c(z - 1/2) per element of a (P, d) matrix, floored at 1e-9."""
        x = z.t().unsqueeze(1)
        lower = self.logits_cdf(x - 0.5)
        upper = self.logits_cdf(x + 0.5)
        # evaluate in the tail where the sigmoid difference is numerically stable
        sign = torch.where(lower + upper > 0, -1.0, 1.0).to(z.dtype).detach()
        lik = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        lik = lik.squeeze(1).t()
        return torch.clamp(lik, min=LIKELIHOOD_FLOOR)


def likelihood(model: FactorizedPrior, z: torch.Tensor) -> torch.Tensor:
    return model.likelihood(z)


def rate_bits(model: FactorizedPrior, z: torch.Tensor) -> torch.Tensor:
    """Average bits per patch: sum over channels of -log2 P, averaged over rows."""
    return -torch.log2(model.likelihood(z)).sum() / z.shape[0]


# ---------------------------------------------------------------------------
# coding tables


@dataclass
class CodingTable:
    """Per-channel integer range and 16-bit cumulative frequencies.

    ``cdfs[c]`` has ``n + 1`` entries starting at 0; symbol ``n_min + i`` owns
    ``[cdfs[c][i], cdfs[c][i + 1])`` and the escape owns ``[cdfs[c][n], 65536)``.
    """

    n_min: list
    cdfs: list

    def __post_init__(self):
        self.n_min = [int(v) for v in self.n_min]
        self.cdfs = [[int(v) for v in c] for c in self.cdfs]
        if len(self.n_min) != len(self.cdfs):
            raise ValueError("n_min / cdfs length mismatch")
        for c in self.cdfs:
            if len(c) < 2 or c[0] != 0 or c[-1] >= FREQ_TOTAL:
                raise ValueError("malformed cumulative frequency table")
            if any(b <= a for a, b in zip(c[:-1], c[1:])):
                raise ValueError("cumulative frequencies must be strictly increasing")

    @property
    def channels(self) -> int:
        return len(self.n_min)

    def n_max(self, channel: int) -> int:
        return self.n_min[channel] + len(self.cdfs[channel]) - 2

    def to_bytes(self) -> bytes:
        out = bytearray(struct.pack("<I", self.channels))
        for lo, c in zip(self.n_min, self.cdfs):
            out += struct.pack("<iI", lo, len(c))
            out += struct.pack(f"<{len(c)}I", *c)
        return bytes(out)

    def digest(self) -> int:
        return zlib.crc32(self.to_bytes()) & _MASK32

    def to_tensors(self):
        width = max(len(c) for c in self.cdfs)
        cdf = np.zeros((self.channels, width), dtype=np.float32)
        for i, c in enumerate(self.cdfs):
            cdf[i, :len(c)] = c
        lengths = np.array([len(c) for c in self.cdfs], dtype=np.float32)
        return [
            ("tables.n_min", np.array(self.n_min, dtype=np.float32)),
            ("tables.length", lengths),
            ("tables.cdf", cdf),
        ]

    @classmethod
    def from_tensors(cls, tensors: dict) -> "CodingTable | None":
        if "tables.cdf" not in tensors:
            return None
        lengths = tensors["tables.length"].astype(np.int64)
        cdf = tensors["tables.cdf"].astype(np.int64)
        return cls(
            n_min=tensors["tables.n_min"].astype(np.int64).tolist(),
            cdfs=[cdf[i, :n].tolist() for i, n in enumerate(lengths)],
        )


def quantize_pmf(pmf) -> list[int]:
    """Cumulative 16-bit frequencies for ``pmf``; every symbol and the escape get >= 1."""
    pmf = np.asarray(pmf, dtype=np.float64)
    n = len(pmf)
    if n < 1 or n > FREQ_TOTAL - 1:
        raise ValueError(f"cannot build a table for {n} symbols")
    cum = np.rint(np.cumsum(pmf) * FREQ_TOTAL).astype(np.int64)
    cum = np.minimum(cum, FREQ_TOTAL - 1 - (n - 1 - np.arange(n)))
    prev = 0
    out = [0]
    for c in cum.tolist():
        prev = max(c, prev + 1)
        out.append(prev)
    return out


def build_coding_tables(model: FactorizedPrior, z_samples) -> CodingTable:
    """Tables spanning the observed integer latents plus a margin of 4 per side."""
    z = np.asarray(z_samples)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValueError("need a non-empty (M, d) array of latent samples")
    if z.shape[1] != model.channels:
        raise ValueError(f"samples have {z.shape[1]} channels, model has {model.channels}")
    lo = z.min(axis=0).astype(np.int64) - TABLE_MARGIN
    hi = z.max(axis=0).astype(np.int64) + TABLE_MARGIN
    width = int((hi - lo).max()) + 1
    grid = lo[None, :] + np.arange(width)[:, None]
    with torch.no_grad():
        prior = _as_double(model)
        pmf = prior.likelihood(torch.as_tensor(grid, dtype=torch.float64)).numpy()
    cdfs = [quantize_pmf(pmf[: hi[c] - lo[c] + 1, c]) for c in range(model.channels)]
    return CodingTable(n_min=lo.tolist(), cdfs=cdfs)


def _as_double(model: FactorizedPrior) -> FactorizedPrior:
    clone = FactorizedPrior(model.channels, model.filters, model.init_scale).double()
    clone.load_state_dict({k: v.double() for k, v in model.state_dict().items()})
    return clone


def table_bits(symbols, tables: CodingTable, channels) -> float:
    """Ideal code length of ``symbols`` under the quantized tables (escapes add 32 raw bits)."""
    bits = 0.0
    for s, c in zip(symbols, channels):
        cdf = tables.cdfs[c]
        i = int(s) - tables.n_min[c]
        if 0 <= i < len(cdf) - 1:
            bits += FREQ_BITS - np.log2(cdf[i + 1] - cdf[i])
        else:
            bits += FREQ_BITS - np.log2(FREQ_TOTAL - cdf[-1]) + 32
    return bits


# ---------------------------------------------------------------------------
# range coder


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.out = bytearray()

    def encode(self, start: int, size: int) -> None:
        r = self.range >> FREQ_BITS
        self.low += start * r
        self.range = size * r
        self._normalize()

    def _normalize(self) -> None:
        while True:
            if (self.low ^ (self.low + self.range)) >= _TOP:
                if self.range >= _BOT:
                    return
                self.range = -self.low & (_BOT - 1)
            self.out.append(self.low >> 24)
            self.low = (self.low << 8) & _MASK32
            self.range = (self.range << 8) & _MASK32

    def finish(self) -> bytes:
        # shortest byte prefix naming a value inside [low, low + range); decoder pads zeros
        for nbytes in range(5):
            mask = (1 << (32 - 8 * nbytes)) - 1
            v = (self.low + mask) & ~mask & _MASK32
            if self.low <= v < self.low + self.range:
                break
        for i in range(nbytes):
            self.out.append((v >> (24 - 8 * i)) & 0xFF)
        return bytes(self.out)


class RangeDecoder:
    MAX_PADDING = 4

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.padding = 0
        self.low = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        if self.pos < len(self.data):
            b = self.data[self.pos]
            self.pos += 1
            return b
        self.padding += 1
        if self.padding > self.MAX_PADDING:
            raise RangeCoderError("range-coded stream is truncated")
        return 0

    def target(self) -> int:
        r = self.range >> FREQ_BITS
        v = (self.code - self.low) // r
        if not 0 <= v < FREQ_TOTAL:
            raise RangeCoderError("range decoder state inconsistent (corrupt stream or wrong table)")
        return v

    def consume(self, start: int, size: int) -> None:
        r = self.range >> FREQ_BITS
        self.low += start * r
        self.range = size * r
        while True:
            if (self.low ^ (self.low + self.range)) >= _TOP:
                if self.range >= _BOT:
                    return
                self.range = -self.low & (_BOT - 1)
            self.code = ((self.code << 8) | self._byte()) & _MASK32
            self.low = (self.low << 8) & _MASK32
            self.range = (self.range << 8) & _MASK32


def _checksum(symbols) -> int:
    packed = struct.pack(f"<{len(symbols)}q", *symbols)
    return zlib.crc32(packed) & ((1 << _SENTINEL_BITS) - 1)


def range_encode(symbols, tables: CodingTable, channels) -> bytes:
    """Range-code integer ``symbols``; ``channels[i]`` selects the table for symbol i.

    Out-of-range symbols are coded as the escape followed by the raw 32-bit
    two's-complement value. An 8-bit checksum of the symbols closes the stream.
    """
    symbols = [int(s) for s in symbols]
    channels = [int(c) for c in channels]
    if len(symbols) != len(channels):
        raise ValueError("symbols and channels differ in length")
    enc = RangeEncoder()
    for s, c in zip(symbols, channels):
        cdf = tables.cdfs[c]
        i = s - tables.n_min[c]
        if 0 <= i < len(cdf) - 1:
            enc.encode(cdf[i], cdf[i + 1] - cdf[i])
        else:
            if not -(1 << 31) <= s < (1 << 31):
                raise ValueError(f"symbol {s} does not fit the 32-bit escape")
            enc.encode(cdf[-1], FREQ_TOTAL - cdf[-1])
            raw = s & _MASK32
            enc.encode(raw >> 16, 1)
            enc.encode(raw & 0xFFFF, 1)
    step = FREQ_TOTAL >> _SENTINEL_BITS
    enc.encode(_checksum(symbols) * step, step)
    return enc.finish()


def range_decode(data: bytes, tables: CodingTable, count: int, channels) -> list[int]:
    channels = [int(c) for c in channels]
    if len(channels) != count:
        raise ValueError("channels must list one table index per symbol")
    dec = RangeDecoder(data)
    out = []
    for c in channels:
        cdf = tables.cdfs[c]
        t = dec.target()
        i = bisect.bisect_right(cdf, t) - 1
        if i < len(cdf) - 1:
            dec.consume(cdf[i], cdf[i + 1] - cdf[i])
            out.append(tables.n_min[c] + i)
        else:
            dec.consume(cdf[-1], FREQ_TOTAL - cdf[-1])
            hi = dec.target()
            dec.consume(hi, 1)
            lo = dec.target()
            dec.consume(lo, 1)
            raw = (hi << 16) | lo
            out.append(raw - (1 << 32) if raw >= (1 << 31) else raw)
    step = FREQ_TOTAL >> _SENTINEL_BITS
    chk = dec.target() // step
    if chk != _checksum(out):
        raise RangeCoderError("checksum mismatch: wrong coding table or corrupted stream")
    dec.consume(chk * step, step)
    if dec.pos != len(data):
        raise RangeCoderError(
            f"stream has {len(data) - dec.pos} unread bytes (wrong table or corrupted stream)")
    return out
