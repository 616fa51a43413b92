import numpy as np
import pytest

from omnimae import model
from omnimae.masking import MaskSpec, apply_mask, from_kept, generate_mask
from omnimae.model import decode, encode, forward, init_params, positional_encoding, preset
from omnimae.ndcore import MacMeter, ParameterError, ShapeError, Tape
from omnimae.patchify import VisualTensor, patchify, prepare


@pytest.fixture(scope="module")
def toy():
    cfg = preset("toy")
    return cfg, init_params(cfg, 0)


def rand_image(seed=0, size=32):
    return VisualTensor.image(np.random.default_rng(seed).integers(0, 256, (size, size, 3)).astype(float))


def rand_video(seed=0, frames=4, size=32):
    return VisualTensor.video(np.random.default_rng(seed).integers(0, 256, (frames, size, size, 3)).astype(float))


def direct_encoding(tau, rho, kappa, dim):
    """Formula oracle, written per coordinate without vectorization."""
    d_t = max(2, 2 * (dim // 8))
    d_s = 2 * ((dim - d_t) // 4)
    row = [0.0] * dim
    offset = 0
    for pos, width in ((tau, d_t), (rho, d_s), (kappa, d_s)):
        for j in range(width // 2):
            freq = 1.0 / (10000 ** (2 * j / width))
            row[offset + 2 * j] = np.sin(pos * freq)
            row[offset + 2 * j + 1] = np.cos(pos * freq)
        offset += width
    return np.array(row)


def test_presets():
    b, l, h = preset("vit-b"), preset("vit-l"), preset("vit-h")
    assert (b.embed_dim, b.depth, b.heads, b.decoder_dim, b.decoder_depth) == (768, 12, 12, 384, 4)
    assert (l.embed_dim, l.depth, l.heads, l.decoder_dim, l.decoder_depth) == (1024, 24, 16, 512, 4)
    assert (h.embed_dim, h.depth, h.heads, h.decoder_dim, h.decoder_depth) == (1280, 32, 16, 512, 8)
    assert (b.patch.t, b.patch.h) == (2, 16) and (h.patch.t, h.patch.h) == (2, 14)
    with pytest.raises(ParameterError):
        preset("toy", heads=3)


def test_no_class_token_and_param_count(toy):
    cfg, params = toy
    assert not any("cls" in k for k in params)
    assert model.param_count(cfg) == sum(v.size for v in params.values())
    sep = preset("toy", decoder_mode="separate")
    dec = sum(v.size for k, v in params.items() if k.startswith("decoder"))
    assert model.param_count(sep) == model.param_count(cfg) + dec


def test_positional_encoding_origin():
    pe = positional_encoding((1, 1, 1), 16)
    assert pe.shape == (1, 16)
    assert np.array_equal(pe[0, 0:16:2], np.zeros(8))
    assert np.array_equal(pe[0, 1:16:2], np.ones(8))


def test_positional_encoding_matches_formula():
    pe = positional_encoding((2, 3, 4), 22)
    i = 0
    for t in range(2):
        for r in range(3):
            for c in range(4):
                assert np.allclose(pe[i], direct_encoding(t, r, c, 22), atol=1e-15)
                i += 1
    # 22 = 4 (time) + 8 + 8, two leftover channels stay zero
    assert np.array_equal(pe[:, 20:], np.zeros((24, 2)))


def test_image_rows_equal_first_video_slab():
    img = positional_encoding((1, 14, 14), 64)
    vid = positional_encoding((8, 14, 14), 64)
    assert np.array_equal(img, vid[:196])


def test_positional_rows_distinct():
    pe = positional_encoding((8, 14, 14), 64)
    diff = pe[:, None, :] - pe[None, :, :]
    dist = np.abs(diff).max(axis=-1)
    np.fill_diagonal(dist, 1.0)
    assert dist.min() > 1e-6


def test_positional_encoding_too_small():
    with pytest.raises(ParameterError):
        positional_encoding((1, 2, 2), 4)
    with pytest.raises(ParameterError):
        positional_encoding((1, 2, 2), 7)


def test_encode_shapes(toy):
    cfg, params = toy
    g = patchify(prepare(rand_video(), cfg.patch), cfg.patch)
    out = encode(g.patches[:3], [0, 1, 2], g.dims, cfg, params)
    assert out.shape == (3, 16) and np.isfinite(out).all()
    with pytest.raises(IndexError):
        encode(g.patches[:1], [8], g.dims, cfg, params)


def test_encode_full_mask_is_plain_vit(toy):
    cfg, params = toy
    g = patchify(prepare(rand_video(1), cfg.patch), cfg.patch)
    out = encode(g.patches, list(range(g.n)), g.dims, cfg, params)
    pred, mask, _ = forward(rand_video(1), model.full_mask(g.n), cfg, params)
    assert out.shape == (8, 16) and mask.m == 0 and pred.shape == (8, 1536)


def test_encode_permutation_equivariance(toy):
    cfg, params = toy
    g = patchify(prepare(rand_video(2), cfg.patch), cfg.patch)
    pos = [1, 4, 6, 7]
    perm = np.array([2, 0, 3, 1])
    base = encode(g.patches[pos], pos, g.dims, cfg, params)
    permuted = encode(g.patches[pos][perm], np.array(pos)[perm], g.dims, cfg, params)
    assert np.allclose(permuted, base[perm], atol=1e-12)


def test_decode_shapes_and_extreme_mask(toy):
    cfg, params = toy
    grid = (2, 2, 2)
    for kept in (range(8), [5]):
        m = from_kept(8, kept, MaskSpec())
        out = decode(np.ones((m.k, 16)), m, grid, cfg, params)
        assert out.shape == (8, 1536)
    tape = Tape()
    m = from_kept(8, [5], MaskSpec())
    decode(np.ones((1, 16)), m, grid, cfg, params, tape)
    scatter = next(n for n in tape.nodes if n.op == "scatter_rows")
    token = params["decoder.mask_token"]
    non_token = [i for i in range(8) if not np.array_equal(scatter.value[i], token)]
    assert non_token == [5]


def test_decode_mismatch(toy):
    cfg, params = toy
    with pytest.raises(ShapeError):
        decode(np.ones((2, 16)), from_kept(4, [0, 1], MaskSpec()), (2, 2, 2), cfg, params)


def test_decode_zero_tokens_depends_only_on_positions(toy):
    cfg, params = toy
    params = dict(params)
    params["decoder.embed.weight"] = np.zeros_like(params["decoder.embed.weight"])
    params["decoder.embed.bias"] = np.zeros_like(params["decoder.embed.bias"])
    params["decoder.mask_token"] = np.zeros_like(params["decoder.mask_token"])
    grid = (2, 2, 2)
    gen = np.random.default_rng(0)
    a = from_kept(8, [0, 3], MaskSpec())
    b = from_kept(8, [1, 2, 6, 7], MaskSpec())
    out_a = decode(gen.standard_normal((2, 16)), a, grid, cfg, params)
    out_b = decode(gen.standard_normal((4, 16)), b, grid, cfg, params)
    # every decoder input row is its positional row alone, whatever the mask
    assert np.array_equal(out_a, out_b)


def test_forward_shapes_share_trunk(toy):
    cfg, params = toy
    pred, mask, grid = forward(rand_image(), MaskSpec("random", 0.5, 0), cfg, params)
    assert pred.shape == (4, 1536) and mask.k == 2 and grid.modality == "image"
    pred, mask, grid = forward(rand_video(), MaskSpec("random", 0.5, 0), cfg, params)
    assert pred.shape == (8, 1536) and mask.k == 4
    enc_img = {n for n in model.touched_params(rand_image(), MaskSpec("random", 0.5, 0), cfg, params)
               if not n.startswith("decoder")}
    enc_vid = {n for n in model.touched_params(rand_video(), MaskSpec("random", 0.5, 0), cfg, params)
               if not n.startswith("decoder")}
    assert enc_img == enc_vid
    assert enc_img == {n for n in params if not n.startswith("decoder")}


def test_separate_decoders_are_disjoint():
    cfg = preset("toy", decoder_mode="separate")
    params = init_params(cfg, 0)
    img = model.touched_params(rand_image(), MaskSpec("random", 0.5, 0), cfg, params)
    vid = model.touched_params(rand_video(), MaskSpec("random", 0.5, 0), cfg, params)
    dec_img = {n for n in img if n.startswith("decoder")}
    dec_vid = {n for n in vid if n.startswith("decoder")}
    assert dec_img and dec_vid and dec_img.isdisjoint(dec_vid)
    assert all(n.startswith("decoder.image.") for n in dec_img)
    assert img - dec_img == vid - dec_vid


def test_token_level_determinism(toy):
    """Embedded tokens depend only on their own patch; whole encodings only on the kept set."""
    cfg, params = toy
    x = rand_video(5)
    g = patchify(x, cfg.patch)
    m1 = generate_mask(g.dims, MaskSpec("random", 0.5, 1))
    m2 = generate_mask(g.dims, MaskSpec("random", 0.5, 2))
    shared = sorted(set(m1.kept) & set(m2.kept))
    assert shared
    t1, t2 = Tape(), Tape()
    encode(*apply_mask(g, m1), g.dims, cfg, params, t1)
    encode(*apply_mask(g, m2), g.dims, cfg, params, t2)
    emb1 = next(n for n in t1.nodes if n.op == "add").value
    emb2 = next(n for n in t2.nodes if n.op == "add").value
    for i in shared:
        assert np.array_equal(emb1[m1.kept.index(i)], emb2[m2.kept.index(i)])
    c1 = generate_mask(g.dims, MaskSpec("causal", 0.5, 1))
    c2 = generate_mask(g.dims, MaskSpec("causal", 0.5, 2))
    assert np.array_equal(encode(*apply_mask(g, c1), g.dims, cfg, params),
                          encode(*apply_mask(g, c2), g.dims, cfg, params))


def test_encoder_cost_scales_with_kept_count():
    cfg = preset("vit-b")
    from omnimae.flops import count_macs
    assert count_macs(cfg, "image", 0.90).encoder < count_macs(cfg, "image", 0.0).encoder
    toy = preset("toy")
    params = init_params(toy, 0)
    counts = []
    for k in (1, 2):
        meter = MacMeter()
        g = patchify(prepare(rand_image(), toy.patch), toy.patch)
        encode(g.patches[:k], list(range(k)), g.dims, toy, params, Tape(meter))
        counts.append(meter.total)
    assert counts[0] < counts[1]


def test_checkpoint_roundtrip(tmp_path, toy):
    cfg, params = toy
    model.save_checkpoint(tmp_path / "ck", cfg, params, step=3, seed=7)
    cfg2, params2, manifest = model.load_checkpoint(tmp_path / "ck")
    assert cfg2 == cfg and manifest["step"] == "3" and manifest["seed"] == "7"
    assert set(params2) == set(params)
    for k in params:
        assert params2[k].tobytes() == params[k].tobytes()
    text = (tmp_path / "ck" / "manifest.txt").read_text()
    assert "preset=toy" in text and "embed_dim=16" in text
