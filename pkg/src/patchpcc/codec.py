"""End-to-end compress / decompress and the ``.ppc`` bitstream container.

Container layout (little-endian, fixed order)::

    magic "PPC1" | version u8 | N u32 | S u32 | K u32 | k u32 | d u16 |
    precision u8 | offset 3 x f64 | scale f64 | table digest u32 |
    S x varint patch byte lengths | bit-packed centroids | latent payloads
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from patchpcc.entropy import hard_quantize, range_decode, range_encode
from patchpcc.geometry import BOX_SIZE, ScaleParams, as_cloud, denormalize, normalize_to_box
from patchpcc.network import PatchAutoencoder
from patchpcc.patching import PatchConfig, assemble, extract_patches

MAGIC = b"PPC1"
VERSION = 1
_FIXED = struct.Struct("<4sBIIIIHB3ddI")


class BitstreamError(ValueError):
    pass


class DigestMismatch(BitstreamError):
    pass


@dataclass
class CodecSettings:
    alpha: float = 2.0
    K: int | None = None
    precision: int = 16
    threads: int = 1

    def __post_init__(self):
        if not 8 <= self.precision <= 32:
            raise ValueError("centroid precision must be in [8, 32] bits")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


@dataclass
class Bitstream:
    n: int
    S: int
    K: int
    k: int
    d: int
    scale: ScaleParams
    precision: int
    digest: int
    centroids: np.ndarray  # (S, 3) fixed-point integers
    payloads: list = field(default_factory=list)

    @property
    def patch_lengths(self) -> list[int]:
        return [len(p) for p in self.payloads]

    def __eq__(self, other):
        if not isinstance(other, Bitstream):
            return NotImplemented
        return serialize(self) == serialize(other)


# ---------------------------------------------------------------------------
# fixed-point centroids and bit packing


def quantize_centroids(centroids, precision: int) -> np.ndarray:
    levels = (1 << precision) - 1
    q = np.rint(np.asarray(centroids, dtype=np.float64) / BOX_SIZE * levels)
    return np.clip(q, 0, levels).astype(np.int64)


def dequantize_centroids(q, precision: int) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) * (BOX_SIZE / ((1 << precision) - 1))


def _pack_bits(values, bits: int) -> bytes:
    acc = 0
    for v in values:
        acc = (acc << bits) | int(v)
    total = len(values) * bits
    nbytes = (total + 7) // 8
    return (acc << (nbytes * 8 - total)).to_bytes(nbytes, "big") if nbytes else b""


def _unpack_bits(data: bytes, count: int, bits: int) -> list[int]:
    total = count * bits
    acc = int.from_bytes(data, "big") >> (len(data) * 8 - total)
    mask = (1 << bits) - 1
    return [(acc >> (bits * (count - 1 - i))) & mask for i in range(count)]


def _varint(n: int) -> bytes:
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def _read_varint(data: bytes, pos: int) -> tuple[int, int]:
    n = shift = 0
    while True:
        if pos >= len(data):
            raise BitstreamError("truncated patch length table")
        b = data[pos]
        pos += 1
        n |= (b & 0x7F) << shift
        if not b & 0x80:
            return n, pos
        shift += 7
        if shift > 35:
            raise BitstreamError("malformed patch length")


# ---------------------------------------------------------------------------
# serialization


def _header_bytes(bs: Bitstream) -> bytes:
    fixed = _FIXED.pack(MAGIC, VERSION, bs.n, bs.S, bs.K, bs.k, bs.d, bs.precision,
                        *bs.scale.offset, bs.scale.scale, bs.digest)
    return fixed + b"".join(_varint(n) for n in bs.patch_lengths)


def _centroid_bytes(bs: Bitstream) -> bytes:
    return _pack_bits(np.asarray(bs.centroids).ravel().tolist(), bs.precision)


def serialize(bs: Bitstream) -> bytes:
    return _header_bytes(bs) + _centroid_bytes(bs) + b"".join(bs.payloads)


def parse(data: bytes) -> Bitstream:
    if len(data) < _FIXED.size:
        raise BitstreamError(f"stream too short for header ({len(data)} bytes)")
    magic, version, n, S, K, k, d, prec, ox, oy, oz, scale, digest = _FIXED.unpack_from(data)
    if magic != MAGIC:
        raise BitstreamError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BitstreamError(f"unsupported stream version {version}")
    if not 8 <= prec <= 32:
        raise BitstreamError(f"invalid centroid precision {prec}")
    if S < 1 or k < 1 or d < 1 or S * k != n:
        raise BitstreamError(f"inconsistent header: S={S}, k={k}, N={n}")
    if not scale > 0:
        raise BitstreamError("non-positive scale in header")
    pos = _FIXED.size
    lengths = []
    for _ in range(S):
        ln, pos = _read_varint(data, pos)
        lengths.append(ln)
    nbytes = (S * 3 * prec + 7) // 8
    if pos + nbytes > len(data):
        raise BitstreamError("truncated centroid payload")
    cen = np.array(_unpack_bits(data[pos:pos + nbytes], S * 3, prec), dtype=np.int64).reshape(S, 3)
    pos += nbytes
    payloads = []
    for i, ln in enumerate(lengths):
        if pos + ln > len(data):
            raise BitstreamError(f"truncated latent payload in patch {i}")
        payloads.append(data[pos:pos + ln])
        pos += ln
    if pos != len(data):
        raise BitstreamError(f"{len(data) - pos} trailing bytes after last patch")
    return Bitstream(n, S, K, k, d, ScaleParams((ox, oy, oz), scale), prec, digest, cen, payloads)


# ---------------------------------------------------------------------------
# pipelines


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _require_tables(model: PatchAutoencoder):
    if model.tables is None:
        raise ValueError("model has no coding tables; train it or load a trained checkpoint")
    return model.tables


def patch_config_for(model: PatchAutoencoder, n: int, settings: CodecSettings) -> PatchConfig:
    cfg = model.cfg
    if settings.K is not None and settings.K != cfg.K:
        raise ValueError(f"settings K={settings.K} but model was trained with K={cfg.K}")
    pc = PatchConfig.resolve(n, cfg.K, settings.alpha)
    if pc.k != cfg.k:
        raise ValueError(f"K/alpha={pc.k} does not match the model's k={cfg.k}")
    return pc


def encode_latents(model: PatchAutoencoder, patches) -> np.ndarray:
    with torch.no_grad():
        z = model.encoder(torch.as_tensor(np.asarray(patches), dtype=torch.float32))
    return hard_quantize(z)


def encode(cloud, model: PatchAutoencoder, settings: CodecSettings | None = None) -> Bitstream:
    settings = settings or CodecSettings()
    tables = _require_tables(model)
    pts = as_cloud(cloud)
    pc = patch_config_for(model, pts.shape[0], settings)
    norm, scale = normalize_to_box(pts)
    patches, centroids, _ = extract_patches(norm, pc)
    z = encode_latents(model, patches)
    channels = list(range(model.cfg.d))
    payloads = _map(lambda row: range_encode(row.tolist(), tables, channels), z, settings.threads)
    return Bitstream(
        n=pts.shape[0], S=pc.S, K=pc.K, k=pc.k, d=model.cfg.d, scale=scale,
        precision=settings.precision, digest=tables.digest(),
        centroids=quantize_centroids(centroids, settings.precision), payloads=payloads,
    )


def decode_latents(bs: Bitstream, model: PatchAutoencoder, threads: int = 1) -> np.ndarray:
    tables = _require_tables(model)
    if bs.digest != tables.digest():
        raise DigestMismatch(
            f"stream table digest {bs.digest:08x} does not match model {tables.digest():08x}")
    if bs.d != model.cfg.d or bs.k != model.cfg.k or bs.K != model.cfg.K:
        raise BitstreamError("stream geometry does not match the model configuration")
    channels = list(range(bs.d))
    rows = _map(lambda p: range_decode(p, tables, bs.d, channels), bs.payloads, threads)
    return np.asarray(rows, dtype=np.int64).reshape(bs.S, bs.d)


def decode(bs: Bitstream, model: PatchAutoencoder, threads: int = 1) -> np.ndarray:
    z = decode_latents(bs, model, threads)
    with torch.no_grad():
        local = model.decoder(torch.as_tensor(z, dtype=torch.float32)).double().numpy()
    centroids = dequantize_centroids(bs.centroids, bs.precision)
    return denormalize(assemble(local, centroids), bs.scale)


@dataclass
class RateBreakdown:
    total: float
    header: float
    centroids: float
    latents: float


def bpp(bs: Bitstream, n: int | None = None) -> float:
    n = bs.n if n is None else n
    if n < 1:
        raise ValueError("N must be >= 1")
    return len(serialize(bs)) * 8 / n


def bpp_breakdown(bs: Bitstream) -> RateBreakdown:
    h = len(_header_bytes(bs)) * 8 / bs.n
    c = len(_centroid_bytes(bs)) * 8 / bs.n
    lat = sum(bs.patch_lengths) * 8 / bs.n
    return RateBreakdown(h + c + lat, h, c, lat)


def save_bitstream(bs: Bitstream, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(bs))


def load_bitstream(path) -> Bitstream:
    with open(path, "rb") as fh:
        return parse(fh.read())
