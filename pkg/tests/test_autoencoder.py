import numpy as np
import pytest
import torch
from scipy.signal import correlate

from musemask.autoencoder import (
    PERCEPTUAL_SEED,
    PERCEPTUAL_WIDTHS,
    AEConfig,
    MaskAwareAutoencoder,
    SkipModule,
    ae_loss,
    load_autoencoder,
    mask_aware_merge,
    perceptual_net,
    resize_mask,
    save_autoencoder,
    train_ae_base,
    train_skip_modules,
)
from musemask.errors import ShapeError

SMALL = AEConfig(widths=(8, 16, 16))


def model(cfg=SMALL, seed=0):
    torch.manual_seed(seed)
    return MaskAwareAutoencoder(cfg).eval()


def test_shapes_and_taps():
    m = model()
    x = torch.zeros(2, 3, 32, 32)
    taps = m.encode(x)
    assert [tuple(f.shape[-2:]) for f in taps.features] == [(32, 32), (16, 16), (8, 8)]
    assert taps.latent.shape == (2, 4, 8, 8)
    assert torch.isfinite(taps.latent).all()
    assert m.decode(taps.latent).shape == (2, 3, 32, 32)
    with pytest.raises(ShapeError):
        m.encode(torch.zeros(1, 3, 30, 32))
    with pytest.raises(ShapeError):
        m.decode(torch.zeros(1, 3, 8, 8))


def test_encode_is_deterministic():
    m = model()
    x = torch.randn(1, 3, 16, 16)
    with torch.no_grad():
        assert torch.equal(m.encode(x).latent, m.encode(x).latent)


def test_zero_initialised_skips_are_identity():
    m = model()
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for _ in range(20):
            lat = torch.randn(2, 4, 4, 4, generator=gen)
            aux = m.encode_aux(torch.randn(2, 3, 16, 16, generator=gen))
            mask = (torch.rand(2, 16, 16, generator=gen) < 0.5).float()
            for gated in (True, False):
                assert (m.decode_mask_aware(lat, aux, mask, gated) - m.decode(lat)).abs().max() <= 1e-6


def perturb_skips(m, seed=1):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for skip in m.skips:
            skip.conv2.weight.copy_(torch.randn(skip.conv2.weight.shape, generator=gen) * 0.1)


def test_all_ones_mask_is_identity_when_gated():
    m = model()
    perturb_skips(m)
    lat = torch.randn(2, 4, 4, 4)
    aux = m.encode_aux(torch.randn(2, 3, 16, 16))
    with torch.no_grad():
        ones = m.decode_mask_aware(lat, aux, torch.ones(2, 16, 16), True)
        ungated = m.decode_mask_aware(lat, aux, torch.ones(2, 16, 16), False)
        assert (ones - m.decode(lat)).abs().max() <= 1e-6
        assert (ungated - m.decode(lat)).abs().max() > 1e-3


def test_hand_computed_merge():
    prev = torch.ones(1, 1, 2, 2)
    skip = torch.tensor([[2.0, 3.0], [4.0, 5.0]])[None, None]
    mask = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    out = mask_aware_merge(prev, skip, mask, gated=True)
    assert torch.equal(out[0, 0], torch.tensor([[1.0, 4.0], [5.0, 1.0]]))
    assert torch.equal(mask_aware_merge(prev, skip, mask, gated=False)[0, 0], torch.tensor([[3.0, 4.0], [5.0, 6.0]]))


def test_resize_mask_is_nearest():
    mask = torch.zeros(4, 4)
    mask[:2, :2] = 1
    small = resize_mask(mask, (2, 2))[0, 0]
    assert torch.equal(small, torch.tensor([[1.0, 0.0], [0.0, 0.0]]))
    assert set(resize_mask(torch.rand(8, 8) > 0.5, (3, 3)).unique().tolist()) <= {0.0, 1.0}


def test_mask_shape_mismatch():
    m = model()
    with pytest.raises(ShapeError):
        m.decode_mask_aware(torch.zeros(1, 4, 4, 4), m.encode(torch.zeros(1, 3, 16, 16)), torch.zeros(1, 8, 8))


def test_skip_module_zero_output_weights():
    s = SkipModule(5)
    assert torch.count_nonzero(s.conv2.weight) == 0 and torch.count_nonzero(s.conv2.bias) == 0


def test_perceptual_weights_are_frozen_constants():
    net = perceptual_net()
    rng = np.random.default_rng(PERCEPTUAL_SEED)
    cin = 3
    for conv, w in zip(net.convs, PERCEPTUAL_WIDTHS):
        expected = (rng.standard_normal((w, cin, 3, 3)) * np.sqrt(2.0 / (cin * 9))).astype(np.float32)
        np.testing.assert_array_equal(conv.weight.detach().numpy(), expected)
        cin = w
    assert all(not p.requires_grad for p in net.parameters())


def _np_features(x):
    """Independent numpy/scipy forward of the perceptual stack."""
    rng = np.random.default_rng(PERCEPTUAL_SEED)
    feats, cin = [], 3
    for w in PERCEPTUAL_WIDTHS:
        weight = rng.standard_normal((w, cin, 3, 3)) * np.sqrt(2.0 / (cin * 9))
        weight = weight.astype(np.float32).astype(np.float64)
        pad = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        out = np.stack([sum(correlate(pad[c], weight[o, c], mode="valid") for c in range(cin)) for o in range(w)])
        x = np.maximum(out[:, ::2, ::2], 0.0)
        feats.append(x)
        cin = w
    return feats


def test_ae_loss_matches_independent_implementation(rng):
    for _ in range(3):
        a = rng.uniform(-1, 1, (3, 16, 16))
        b = rng.uniform(-1, 1, (3, 16, 16))
        fa, fb = _np_features(a), _np_features(b)
        expected = np.abs(a - b).mean() + 0.1 * np.mean([((p - q) ** 2).mean() for p, q in zip(fa, fb)])
        got = ae_loss(torch.tensor(a[None], dtype=torch.float32), torch.tensor(b[None], dtype=torch.float32))
        assert abs(float(got) - expected) <= 1e-5


def test_ae_loss_examples():
    x = torch.rand(2, 3, 8, 8) * 2 - 1
    assert float(ae_loss(x, x)) == 0.0
    assert float(ae_loss(x, x + 0.5, lambda2=0.0)) == pytest.approx(0.5, abs=1e-6)
    assert float(ae_loss(x, torch.zeros_like(x))) >= 0


def test_perceptual_features_separate_distinct_maps(rng):
    from musemask.autoencoder import perceptual_features
    from musemask.semantic_maps import SemanticMap, palette_encode

    for _ in range(100):
        a = palette_encode(SemanticMap(rng.integers(0, 8, (16, 16))))
        b = palette_encode(SemanticMap(rng.integers(0, 8, (16, 16))))
        if np.array_equal(a, b):
            continue
        fa = perceptual_features(torch.from_numpy(a))
        fb = perceptual_features(torch.from_numpy(b))
        assert sum(float(((p - q) ** 2).sum()) for p, q in zip(fa, fb)) > 0


def _maps(n=32, size=16, seed=0):
    from musemask.semantic_maps import SemanticMap, palette_encode

    r = np.random.default_rng(seed)
    labels = np.zeros((n, size, size), np.uint8)
    for i in range(n):
        y, x = r.integers(0, size - 6, 2)
        labels[i, y : y + 6, x : x + 6] = r.integers(1, 8)
    return labels, torch.from_numpy(np.stack([palette_encode(SemanticMap(m)) for m in labels]))


def test_zero_step_training_returns_init():
    _, x = _maps(4)
    torch.manual_seed(3)
    fresh = MaskAwareAutoencoder(SMALL)
    res = train_ae_base(x, SMALL, steps=0, seed=3)
    for k, v in fresh.state_dict().items():
        assert torch.equal(v, res.model.state_dict()[k])


def test_base_training_reduces_loss_and_is_deterministic():
    _, x = _maps(32)
    a = train_ae_base(x, SMALL, steps=60, batch_size=8, seed=1, log_every=0)
    b = train_ae_base(x, SMALL, steps=60, batch_size=8, seed=1, log_every=0)
    assert a.losses == b.losses
    assert np.mean(a.losses[-10:]) < np.mean(a.losses[:10])
    assert float(a.model.latent_scale) != 1.0


def test_skip_training_freezes_encoder_and_decoder():
    labels, x = _maps(16)
    base = train_ae_base(x, SMALL, steps=5, batch_size=4, seed=0, log_every=0).model
    digest = base.base_digest()
    masks = torch.from_numpy(labels > 0).float()
    res = train_skip_modules(base, x, torch.zeros_like(x), masks, gated=True, steps=10, batch_size=4, log_every=0)
    assert res.model.base_digest() == digest == base.base_digest()
    assert any(torch.count_nonzero(s.conv2.weight) > 0 for s in res.model.skips)


def test_private_aux_encoder_option():
    cfg = AEConfig(widths=(8, 16, 16), shared_aux_encoder=False)
    m = model(cfg)
    assert m.aux_encoder is not None
    assert model(SMALL).aux_encoder is None


def test_save_load_round_trip(tmp_path):
    m = model()
    m.latent_scale.fill_(0.7)
    save_autoencoder(tmp_path / "ae.mkdf", m)
    back = load_autoencoder(tmp_path / "ae.mkdf")
    assert back.cfg == m.cfg
    for k, v in m.state_dict().items():
        assert torch.equal(v, back.state_dict()[k])
