import numpy as np
import pytest
import torch

from patchpcc.codec import (
    MAGIC,
    Bitstream,
    BitstreamError,
    CodecSettings,
    DigestMismatch,
    bpp,
    bpp_breakdown,
    decode,
    decode_latents,
    dequantize_centroids,
    encode,
    encode_latents,
    load_bitstream,
    parse,
    quantize_centroids,
    save_bitstream,
    serialize,
)
from patchpcc.entropy import build_coding_tables
from patchpcc.geometry import ScaleParams, ShapeSpec, normalize_to_box, synth_shape
from patchpcc.network import ModelConfig, init_params
from patchpcc.patching import PatchConfig, extract_patches

CFG = ModelConfig(K=32, k=16, d=6, sa_widths=[8, 8, 16], pn_widths=[16, 8], dec_widths=[16, 32])


@pytest.fixture(scope="module")
def cloud():
    return synth_shape(ShapeSpec("torus", 256, 3)) * 5 + 7


@pytest.fixture(scope="module")
def model(cloud):
    m = init_params(CFG, 4)
    with torch.no_grad():
        for p in m.encoder.parameters():
            p.mul_(3)
    norm, _ = normalize_to_box(cloud)
    patches, _, _ = extract_patches(norm, PatchConfig.resolve(256, 32, 2))
    m.tables = build_coding_tables(m.entropy, encode_latents(m, patches))
    return m


def test_roundtrip_counts_and_latents(cloud, model):
    bs = encode(cloud, model)
    assert (bs.S, bs.K, bs.k, bs.d, bs.n) == (16, 32, 16, 6, 256)
    assert len(bs.payloads) == 16 and bs.centroids.shape == (16, 3)
    out = decode(bs, model)
    assert out.shape == (256, 3)
    norm, _ = normalize_to_box(cloud)
    patches, _, _ = extract_patches(norm, PatchConfig.resolve(256, 32, 2))
    assert np.array_equal(decode_latents(bs, model), encode_latents(model, patches))


def test_serialize_parse_bit_exact(cloud, model, tmp_path):
    bs = encode(cloud, model)
    data = serialize(bs)
    assert data[:4] == MAGIC
    again = parse(data)
    assert serialize(again) == data and again == bs
    save_bitstream(bs, tmp_path / "x.ppc")
    assert load_bitstream(tmp_path / "x.ppc") == bs


def test_encode_deterministic_and_thread_independent(cloud, model):
    a = serialize(encode(cloud, model))
    b = serialize(encode(cloud, model, CodecSettings(threads=4)))
    assert a == b
    bs = parse(a)
    assert np.array_equal(decode(bs, model, threads=3), decode(bs, model))


def test_corruption_detected(cloud, model):
    data = serialize(encode(cloud, model))
    with pytest.raises(BitstreamError, match="magic"):
        parse(b"X" + data[1:])
    last = 15
    with pytest.raises(BitstreamError, match=f"patch {last}"):
        parse(data[:-1])
    with pytest.raises(BitstreamError):
        parse(data[:30])
    with pytest.raises(BitstreamError, match="trailing"):
        parse(data + b"\0")


def test_truncation_names_first_missing_patch(cloud, model):
    bs = encode(cloud, model)
    data = serialize(bs)
    cut = len(data) - sum(bs.patch_lengths[3:]) - 1
    with pytest.raises(BitstreamError, match="patch 2"):
        parse(data[:cut])


def test_digest_mismatch(cloud, model):
    bs = encode(cloud, model)
    other = init_params(CFG, 9)
    other.tables = build_coding_tables(other.entropy, np.zeros((2, 6), dtype=np.int64))
    with pytest.raises(DigestMismatch):
        decode(bs, other)


def test_config_mismatch_rejected(cloud, model):
    with pytest.raises(ValueError):
        encode(cloud, model, CodecSettings(alpha=4))
    with pytest.raises(ValueError):
        encode(cloud[:200], model)
    with pytest.raises(ValueError):
        encode(cloud, model, CodecSettings(K=64))
    bare = init_params(CFG, 4)
    with pytest.raises(ValueError, match="tables"):
        encode(cloud, bare)


def test_settings_validation():
    for bad in (dict(precision=7), dict(precision=33), dict(threads=0)):
        with pytest.raises(ValueError):
            CodecSettings(**bad)


def _dummy(n=8192, payload=0):
    return Bitstream(n=n, S=1, K=2, k=n, d=1, scale=ScaleParams((0.0, 0.0, 0.0), 1.0),
                     precision=8, digest=0, centroids=np.zeros((1, 3), dtype=np.int64),
                     payloads=[b"\0" * payload])


def test_bpp_arithmetic():
    fixed = len(serialize(_dummy(payload=200))) - 200  # two-byte varint length for payloads >= 128
    bs = _dummy(payload=1024 - fixed)
    assert len(serialize(bs)) == 1024
    assert bpp(bs) == 1.0
    assert bpp(bs, 1024) == 8.0
    with pytest.raises(ValueError):
        bpp(bs, 0)


def test_bpp_above_centroid_floor_and_breakdown(cloud, model):
    bs = encode(cloud, model)
    floor = bs.S * 3 * bs.precision / bs.n
    assert bpp(bs) > floor
    br = bpp_breakdown(bs)
    assert br.centroids == pytest.approx(floor)
    assert br.total == pytest.approx(bpp(bs))
    assert br.header + br.centroids + br.latents == pytest.approx(br.total)


@pytest.mark.parametrize("precision", [8, 11, 16, 32])
def test_centroid_fixed_point(precision, rng):
    c = rng.uniform(0, 64, size=(50, 3))
    q = quantize_centroids(c, precision)
    assert q.min() >= 0 and q.max() <= (1 << precision) - 1
    step = 64 / ((1 << precision) - 1)
    assert np.abs(dequantize_centroids(q, precision) - c).max() <= step / 2 + 1e-12
    bs = _dummy()
    bs.precision = precision
    bs.centroids = q[:1]
    assert np.array_equal(parse(serialize(bs)).centroids, q[:1])


def test_header_inconsistency_rejected():
    bs = _dummy()
    bs.n = 5
    with pytest.raises(BitstreamError, match="inconsistent"):
        parse(serialize(bs))
