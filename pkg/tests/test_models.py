import numpy as np
import pytest
import torch

from cycletrans.models import (
    CheckpointError,
    ConfigError,
    DiscriminatorSpec,
    GeneratorSpec,
    TranslationModel,
    build_discriminator,
    build_generator,
    count_parameters,
    load_checkpoint,
    make_model,
    parameter_digest,
    patch_grid_size,
    save_checkpoint,
    translate,
)


def test_generator_preserves_144_crop_shape():
    g = build_generator(GeneratorSpec(base_width=4, n_residual_blocks=2, image_size=144))
    out = g(torch.rand(1, 1, 144, 144) * 2 - 1)
    assert out.shape == (1, 1, 144, 144)


def test_generator_output_bounded():
    g = build_generator(GeneratorSpec(base_width=4, n_residual_blocks=1, image_size=16))
    with torch.no_grad():
        for m in g.modules():
            if isinstance(m, torch.nn.Conv2d):
                m.weight.mul_(50)
    out = g(torch.randn(4, 1, 16, 16) * 10)
    assert out.min() >= -1 and out.max() <= 1


def test_generator_custom_output_range():
    g = build_generator(GeneratorSpec(base_width=2, n_residual_blocks=1, image_size=8, output_range=(0, 1)))
    out = g(torch.randn(2, 1, 8, 8))
    assert out.min() >= 0 and out.max() <= 1


def test_generator_parameter_count_audit():
    # layer table for base width w, one input channel, 15 residual blocks:
    #   stem 7x7 1->w, down 3x3 w->2w, down 3x3 2w->4w,
    #   15 x (2 x 3x3 4w->4w), up 3x3 4w->2w, up 3x3 2w->w, head 7x7 w->1
    w = 16
    table = [
        (1, w, 7), (w, 2 * w, 3), (2 * w, 4 * w, 3),
        *[(4 * w, 4 * w, 3)] * 30,
        (4 * w, 2 * w, 3), (2 * w, w, 3), (w, 1, 7),
    ]
    expected = sum(cin * cout * k * k + cout for cin, cout, k in table)
    assert expected == 1155649
    g = build_generator(GeneratorSpec(base_width=w, image_size=32))
    assert count_parameters(g) == expected


def test_rejects_incompatible_image_size():
    with pytest.raises(ConfigError):
        GeneratorSpec(image_size=30)
    with pytest.raises(ConfigError):
        GeneratorSpec(n_residual_blocks=0)


def test_discriminator_patch_output_in_unit_interval():
    d = build_discriminator(DiscriminatorSpec(base_width=4, image_size=144))
    out = d(torch.rand(1, 1, 144, 144) * 2 - 1)
    assert out.shape[:2] == (1, 1) and out.shape[2] >= 1 and out.shape[3] >= 1
    assert torch.all(out > 0) and torch.all(out < 1)


def test_discriminator_scalar_mode():
    d = build_discriminator(DiscriminatorSpec(base_width=4, image_size=32, output_mode="scalar"))
    assert d(torch.zeros(3, 1, 32, 32)).shape == (3,)


def test_constant_discriminator_is_one_half():
    d = build_discriminator(DiscriminatorSpec(base_width=4, image_size=32, init="constant"))
    out = d(torch.randn(2, 1, 32, 32))
    assert torch.allclose(out, torch.full_like(out, 0.5), atol=1e-6, rtol=0)


def test_discriminator_grid_by_stride_arithmetic():
    # 4x4 convs, padding 1: stride 2 halves 32 -> 16 -> 8 -> 4, stride 1 shrinks by one: 4 -> 3 -> 2
    assert patch_grid_size(32, 3) == 2
    d = build_discriminator(DiscriminatorSpec(base_width=4, n_layers=3, image_size=32))
    assert d(torch.zeros(1, 1, 32, 32)).shape == (1, 1, 2, 2)


def test_discriminator_rejects_too_many_layers():
    with pytest.raises(ConfigError):
        DiscriminatorSpec(image_size=8, n_layers=3)


def test_identity_init_translates_to_near_input():
    model = make_model(GeneratorSpec(base_width=4, n_residual_blocks=2, image_size=16, init="identity"),
                       DiscriminatorSpec(base_width=4, n_layers=2, image_size=16))
    x = torch.rand(4, 1, 16, 16) * 2 - 1
    for direction in ("x_to_y", "y_to_x"):
        delta = (translate(model, x, direction) - x).abs().mean()
        assert delta < 0.1


def test_translate_rejects_wrong_shape(small_model):
    with pytest.raises(ValueError):
        translate(small_model, torch.zeros(1, 1, 8, 8), "x_to_y")
    with pytest.raises(ValueError):
        translate(small_model, torch.zeros(1, 1, 16, 16), "sideways")


def test_translate_deterministic_and_checkpoint_roundtrip(small_model, tmp_path):
    x = torch.rand(2, 1, 16, 16) * 2 - 1
    before = translate(small_model, x, "x_to_y")
    assert torch.equal(before, translate(small_model, x, "x_to_y"))
    path = save_checkpoint(tmp_path / "m.pt", small_model, {"note": "t"})
    loaded, payload = load_checkpoint(path)
    assert payload["train_config"] == {"note": "t"}
    assert parameter_digest(loaded) == parameter_digest(small_model)
    assert torch.equal(before, translate(loaded, x, "x_to_y"))


def test_batch_independence(small_model):
    x = torch.rand(2, 1, 16, 16) * 2 - 1
    both = translate(small_model, x, "y_to_x")
    single = torch.cat([translate(small_model, x[i: i + 1], "y_to_x") for i in range(2)])
    assert torch.allclose(both, single, atol=1e-6)


def test_parameter_sets_disjoint(small_model):
    ids = [{id(p) for p in getattr(small_model, n).parameters()}
           for n in ("gen_x_to_y", "gen_y_to_x", "disc_x", "disc_y")]
    for i in range(4):
        for j in range(i + 1, 4):
            assert not ids[i] & ids[j]


def test_seeded_construction_is_reproducible(small_specs):
    assert parameter_digest(make_model(*small_specs, seed=3)) == parameter_digest(make_model(*small_specs, seed=3))
    assert parameter_digest(make_model(*small_specs, seed=3)) != parameter_digest(make_model(*small_specs, seed=4))


def test_float64_checkpoint_keeps_precision(small_specs, tmp_path):
    model = make_model(*small_specs, dtype=torch.float64)
    loaded, _ = load_checkpoint(save_checkpoint(tmp_path / "m.pt", model))
    assert next(loaded.parameters()).dtype == torch.float64
    assert parameter_digest(loaded) == parameter_digest(model)


def test_checkpoint_format_tag_enforced(small_model, tmp_path):
    path = save_checkpoint(tmp_path / "m.pt", small_model)
    payload = torch.load(path, weights_only=True)
    payload["format"] = "cycletrans-ckpt-v0"
    torch.save(payload, tmp_path / "bad.pt")
    with pytest.raises(CheckpointError, match="format"):
        load_checkpoint(tmp_path / "bad.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.pt")


def test_checkpoint_spec_mismatch(small_model, tmp_path):
    path = save_checkpoint(tmp_path / "m.pt", small_model)
    with pytest.raises(CheckpointError, match="spec mismatch"):
        load_checkpoint(path, expected_gen=GeneratorSpec(base_width=8, n_residual_blocks=2, image_size=16))


def test_model_requires_matching_specs():
    with pytest.raises(ConfigError):
        TranslationModel(GeneratorSpec(image_size=32), DiscriminatorSpec(image_size=64))
