import numpy as np
import pytest
import torch

from musemask.diffusion import SamplerSpec, make_schedule
from musemask.edit_control import (
    BaseEditConfig,
    InpaintDenoiser,
    build_input,
    conditioning_losses,
    dilate,
    edit_image,
    edit_region,
    image_to_tensor,
    load_control,
    load_edit_base,
    make_control_branch,
    random_holes,
    save_control,
    save_edit_base,
    tensor_to_image,
    train_base,
    train_control,
)
from musemask.semantic_maps import HAIR, SemanticMap
from musemask.synth_dataset import render_labels, tokenize

TINY = BaseEditConfig(widths=(8, 16, 16), attn_levels=(False, False, True), context_dim=32, time_dim=32,
                      text_layers=1, hint_widths=(8, 8, 8))


def base_model(seed=0):
    torch.manual_seed(seed)
    return InpaintDenoiser(TINY).eval()


def data(n=6, size=32, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.zeros((n, size, size), np.uint8)
    labels[:, 6:26, 6:26] = 1
    for i in range(n):
        y, x = rng.integers(2, 20, 2)
        labels[i, y : y + 8, x : x + 8] = HAIR
    images = np.stack([render_labels(m, i) for i, m in enumerate(labels)])
    ids = np.stack([tokenize("a oval face with long hair")] * n)
    return images, labels, ids


def test_input_layout():
    z, ref = torch.randn(1, 3, 4, 4), torch.randn(1, 3, 4, 4)
    hole = torch.zeros(1, 1, 4, 4)
    hole[..., :2, :] = 1
    x = build_input(z, ref, hole)
    assert x.shape[1] == 7
    assert torch.equal(x[:, :3], z)
    assert torch.count_nonzero(x[:, 3:6, :2, :]) == 0
    assert torch.equal(x[:, 3:6, 2:], ref[..., 2:, :])
    assert torch.equal(x[:, 6:], hole)


def test_zero_conv_init_equivalence_and_copied_weights():
    base = base_model()
    editor = make_control_branch(base).eval()
    for p in editor.branch.zero_parameters():
        assert torch.count_nonzero(p) == 0
    base_enc = base.unet.enc.state_dict()
    for k, v in editor.branch.encoder.state_dict().items():
        assert torch.equal(v, base_enc[k])
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for _ in range(10):
            z, ref = torch.randn(2, 3, 32, 32, generator=gen), torch.randn(2, 3, 32, 32, generator=gen)
            hole = (torch.rand(2, 1, 32, 32, generator=gen) < 0.3).float()
            cm = torch.randn(2, 3, 32, 32, generator=gen) * 3
            ids = torch.from_numpy(np.stack([tokenize("long hair")] * 2))
            t = torch.randint(1, 1001, (2,), generator=gen)
            a = editor(z, t, (ids, ref, hole, cm))
            b = base(z, t, (ids, ref, hole))
            assert (a - b).abs().max() <= 1e-6


def test_zero_convs_get_gradient():
    editor = make_control_branch(base_model())
    images, labels, ids = data(2)
    x = image_to_tensor(images)
    from musemask.semantic_maps import palette_encode

    cm = torch.from_numpy(np.stack([palette_encode(SemanticMap(m)) for m in labels]))
    out = editor(torch.randn_like(x), torch.tensor([100, 900]), (torch.from_numpy(ids), x, torch.ones(2, 1, 32, 32), cm))
    ((out - torch.randn_like(out)) ** 2).mean().backward()
    assert sum(float(p.grad.abs().sum()) for p in editor.branch.zero_parameters()) > 0
    assert all(p.grad is None for p in editor.base.parameters())


def test_random_holes_area_bounds():
    gen = torch.Generator().manual_seed(0)
    holes = random_holes(200, 64, 64, (0.1, 0.5), gen)
    frac = holes.mean(dim=(1, 2, 3))
    assert frac.min() >= 0.08 and frac.max() <= 0.52
    for h in holes[:, 0]:
        ys, xs = torch.nonzero(h, as_tuple=True)
        assert h[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1].all()


def test_train_base_determinism_and_zero_steps():
    images, _, ids = data()
    torch.manual_seed(5)
    fresh = InpaintDenoiser(TINY)
    zero = train_base(images, ids, TINY, steps=0, seed=5).model
    for k, v in fresh.state_dict().items():
        assert torch.equal(v, zero.state_dict()[k])
    a = train_base(images, ids, TINY, steps=4, batch_size=2, lr=1e-3, warmup=1, seed=1, log_every=0)
    b = train_base(images, ids, TINY, steps=4, batch_size=2, lr=1e-3, warmup=1, seed=1, log_every=0)
    assert a.losses == b.losses


def test_train_control_keeps_base_bit_identical():
    images, labels, ids = data()
    base = base_model()
    before = {k: v.clone() for k, v in base.state_dict().items()}
    res = train_control(base, images, labels, ids, steps=4, batch_size=2, lr=1e-3, warmup=1, log_every=0)
    assert all(torch.equal(v, before[k]) for k, v in base.state_dict().items())
    assert any(torch.count_nonzero(p) > 0 for p in res.model.branch.zero_parameters())
    untouched = train_control(base, images, labels, ids, steps=0).model
    assert all(torch.count_nonzero(p) == 0 for p in untouched.branch.zero_parameters())


def test_edit_region_rule():
    old = np.zeros((12, 12), np.uint8)
    new = old.copy()
    new[5, 5] = HAIR
    region = edit_region(SemanticMap(old), SemanticMap(new))
    yy, xx = np.mgrid[:12, :12]
    np.testing.assert_array_equal(region, (yy - 5) ** 2 + (xx - 5) ** 2 <= 4)
    assert not edit_region(SemanticMap(old), SemanticMap(old)).any()
    assert not dilate(np.zeros((4, 4), bool)).any()


def test_noop_edit_returns_reference_bit_exactly():
    editor = make_control_branch(base_model()).eval()
    images, labels, ids = data(1)
    smap = SemanticMap(labels[0])
    res = edit_image(images[0], smap, smap, ids[0], editor, SamplerSpec(steps=2))
    assert res.noop
    assert np.array_equal(res.image, images[0])


def test_composite_identity_outside_region():
    editor = make_control_branch(base_model()).eval()
    images, labels, ids = data(3)
    for i in range(3):
        new = labels[i].copy()
        new[new == HAIR] = 1
        res = edit_image(images[i], SemanticMap(labels[i]), SemanticMap(new), ids[i], editor, SamplerSpec(steps=2, seed=i))
        assert not res.noop and res.region.any()
        assert np.array_equal(res.image[~res.region], images[i][~res.region])


def test_edit_is_deterministic_per_seed():
    editor = make_control_branch(base_model()).eval()
    images, labels, ids = data(1)
    new = labels[0].copy()
    new[new == HAIR] = 1
    spec = SamplerSpec(steps=2, seed=4)
    a = edit_image(images[0], SemanticMap(labels[0]), SemanticMap(new), ids[0], editor, spec)
    b = edit_image(images[0], SemanticMap(labels[0]), SemanticMap(new), ids[0], editor, spec)
    assert np.array_equal(a.image, b.image)


def test_image_tensor_round_trip(rng):
    img = rng.integers(0, 256, (2, 5, 5, 3), dtype=np.uint8)
    assert np.array_equal(tensor_to_image(image_to_tensor(img)), img)


def test_conditioning_losses_equal_at_init():
    editor = make_control_branch(base_model()).eval()
    images, labels, ids = data(4)
    with_c, without_c = conditioning_losses(editor, images, labels, ids, seed=0)
    assert with_c == pytest.approx(without_c, abs=1e-9)


def test_save_load(tmp_path):
    base = base_model(3)
    editor = make_control_branch(base)
    with torch.no_grad():
        for p in editor.branch.zero_parameters():
            p.fill_(0.5)
    save_edit_base(tmp_path / "b.mkdf", base)
    save_control(tmp_path / "c.mkdf", editor)
    loaded = load_control(tmp_path / "c.mkdf", load_edit_base(tmp_path / "b.mkdf"))
    for k, v in editor.state_dict().items():
        assert torch.equal(v, loaded.state_dict()[k])
