import os

import numpy as np
import pytest
import torch

from lvdm.backbone import Denoiser, DenoiserConfig
from lvdm.checkpoint import load_checkpoint, read_blob, save_checkpoint, write_blob
from lvdm.codec import Codec, CodecConfig, LatentTensor, fit_latent_stats
from lvdm.configfile import apply_overrides, parse_config_text, parse_value, valid_keys
from lvdm.data import (
    DIRECTIONS,
    NUM_CLASSES,
    SPRITE_COLORS,
    ToyDatasetSpec,
    class_caption,
    class_id_of,
    class_parts,
    generate_toy_dataset,
    load_dataset,
    render_clip,
    save_dataset,
)
from lvdm.diffusion import make_schedule
from lvdm.gradcheck import grad_check
from lvdm import reporting


# ---------------------------------------------------------------- toy data


def test_dataset_deterministic():
    spec = ToyDatasetSpec(num_clips=8, num_images=8)
    a = generate_toy_dataset(spec)
    b = generate_toy_dataset(spec)
    for ra, rb in zip(a.videos + a.images, b.videos + b.images):
        assert torch.equal(ra.pixels, rb.pixels)
        assert ra.class_id == rb.class_id


def test_dataset_seed_changes_layout():
    a = generate_toy_dataset(ToyDatasetSpec(num_clips=8, seed=0))
    b = generate_toy_dataset(ToyDatasetSpec(num_clips=8, seed=1))
    assert any(not torch.equal(ra.pixels, rb.pixels) for ra, rb in zip(a.videos, b.videos))


def test_class_labels_cover_all():
    ds = generate_toy_dataset(ToyDatasetSpec())
    assert sorted({r.class_id for r in ds.videos}) == list(range(NUM_CLASSES))
    assert all(r.pixels.shape == (9, 32, 32, 3) for r in ds.videos)
    assert all(r.pixels.shape == (1, 32, 32, 3) for r in ds.images)


def test_motion_against_roll_oracle():
    # frame t must equal frame 0 rolled by t * velocity
    spec = ToyDatasetSpec()
    ds = generate_toy_dataset(spec)
    for rec in ds.videos[:8]:
        color, direction = class_parts(rec.class_id)
        vy, vx = DIRECTIONS[direction]
        first = rec.pixels[0]
        for t in range(1, spec.frames):
            rolled = torch.roll(first, shifts=(t * vy, t * vx), dims=(0, 1))
            assert torch.equal(rec.pixels[t], rolled)


def test_render_clip_zero_velocity_variant():
    # a straight-line oracle check at the pixel level for one concrete case
    spec = ToyDatasetSpec(sprite_size=4)
    pixels = render_clip(spec, class_id_of("red", "right"), start=(0, 0), frames=3)
    assert torch.allclose(pixels[0, 0, 0], torch.tensor(SPRITE_COLORS["red"]))
    # after one frame the sprite moved 2 px right: column 0 is background again
    assert pixels[1, 0, 0, 0] == -1.0
    assert torch.allclose(pixels[1, 0, 2], torch.tensor(SPRITE_COLORS["red"]))


def test_sprite_must_fit():
    with pytest.raises(ValueError):
        ToyDatasetSpec(sprite_size=40)


def test_class_caption_and_parts():
    cid = class_id_of("blue", "down")
    assert class_parts(cid) == ("blue", "down")
    assert "blue" in class_caption(cid) and "down" in class_caption(cid)
    with pytest.raises(ValueError):
        class_parts(NUM_CLASSES)


def test_dataset_save_load_roundtrip(tmp_path):
    ds = generate_toy_dataset(ToyDatasetSpec(num_clips=8, num_images=8))
    path = tmp_path / "toy.npz"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.spec == ds.spec
    for ra, rb in zip(ds.videos + ds.images, back.videos + back.images):
        assert torch.equal(ra.pixels, rb.pixels)
        assert ra.class_id == rb.class_id


# ---------------------------------------------------------------- config file


def test_parse_value_types():
    assert parse_value("true") is True
    assert parse_value("false") is False
    assert parse_value("3") == 3
    assert parse_value("2e-3") == 2e-3
    assert parse_value("(2, 2)") == (2, 2)
    assert parse_value("lora") == "lora"


def test_parse_config_text():
    cfg = parse_config_text(
        """
        # smoke config
        train.steps = 100
        backbone.d_model = 64
        schedule.zero_terminal_snr = true
        """
    )
    assert cfg == {
        "train": {"steps": 100},
        "backbone": {"d_model": 64},
        "schedule": {"zero_terminal_snr": True},
    }


def test_parse_config_unknown_key_lists_valid():
    with pytest.raises(ValueError) as e:
        parse_config_text("backbone.bogus_field = 1")
    msg = str(e.value)
    assert "backbone.bogus_field" in msg
    assert "backbone.d_model" in msg  # lists the valid keys


def test_parse_config_bad_line_number():
    with pytest.raises(ValueError) as e:
        parse_config_text("train.steps = 10\nnot a key value line\n")
    assert "line 2" in str(e.value)


def test_apply_overrides():
    cfg = {"train": {"steps": 10}}
    out = apply_overrides(cfg, ["train.steps=20", "train.lr=1e-4"])
    assert out["train"]["steps"] == 20
    assert out["train"]["lr"] == 1e-4
    with pytest.raises(ValueError):
        apply_overrides(cfg, ["no_equals_sign"])
    with pytest.raises(ValueError):
        apply_overrides(cfg, ["fake.key=1"])


def test_valid_keys_canonical():
    keys = valid_keys()
    for k in ("train.steps", "backbone.d_model", "codec.latent_channels",
              "data.num_clips", "schedule.steps", "superres.scale"):
        assert k in keys


# ---------------------------------------------------------------- checkpoint


def test_blob_roundtrip_bitexact(tmp_path):
    torch.manual_seed(0)
    tensors = {"a.weight": torch.randn(3, 4), "b.bias": torch.randn(7)}
    path = str(tmp_path / "ckpt")
    write_blob(path, tensors, configs={"x": 1}, extra={"step": 5})
    loaded, configs, extra = read_blob(path)
    assert extra["step"] == 5
    assert configs == {"x": 1}
    for k, v in tensors.items():
        assert torch.equal(loaded[k], v)


def test_blob_rejects_non_float32(tmp_path):
    with pytest.raises(ValueError):
        write_blob(str(tmp_path / "c"), {"x": torch.zeros(2, dtype=torch.float64)}, configs={})


def small_world(seed=0):
    torch.manual_seed(seed)
    codec = Codec(CodecConfig(base_channels=8, channel_multipliers=(1, 2)))
    model = Denoiser(DenoiserConfig(d_model=32, num_blocks=2, num_heads=2,
                                    t_len=3, h_p=4, w_p=4, st_window=(2, 2)))
    with torch.no_grad():
        model.head.weight.normal_(std=0.02)
    sched = make_schedule(zero_terminal_snr=True)
    stats = fit_latent_stats([torch.randn(3, 4, 4, 8) for _ in range(4)])
    return codec, model, sched, stats


def test_checkpoint_roundtrip_forward_bitexact(tmp_path):
    codec, model, sched, stats = small_world()
    path = str(tmp_path / "ckpt")
    save_checkpoint(path, codec, model, sched, stats, step=123)
    bundle = load_checkpoint(path)
    assert bundle.step == 123
    z = torch.randn(1, 3, 4, 4, 8, generator=torch.Generator().manual_seed(1))
    t = torch.tensor([17])
    ids = torch.tensor([2])
    out_a = model(z, t, ids)
    out_b = bundle.model(z, t, ids)
    assert torch.equal(out_a, out_b)
    x = torch.rand(1, 5, 16, 16, 3, generator=torch.Generator().manual_seed(2)) * 2 - 1
    assert torch.equal(codec.encode_batch(x), bundle.codec.encode_batch(x))
    assert torch.equal(bundle.stats.mean, stats.mean)
    assert np.array_equal(bundle.sched.gammas.numpy(), sched.gammas.numpy())


def test_checkpoint_optimizer_roundtrip(tmp_path):
    codec, model, sched, stats = small_world()
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
    z = torch.randn(1, 3, 4, 4, 8)
    loss = model(z, torch.tensor([5]), torch.tensor([0])).pow(2).mean()
    loss.backward()
    opt.step()
    path = str(tmp_path / "ckpt")
    save_checkpoint(path, codec, model, sched, stats, step=1, optimizer=opt)
    bundle = load_checkpoint(path)
    opt2 = torch.optim.AdamW(bundle.model.parameters(), lr=1e-3)
    bundle.load_optimizer(opt2)
    sa, sb = opt.state_dict(), opt2.state_dict()
    assert sa["param_groups"] == sb["param_groups"]
    for k in sa["state"]:
        for field in sa["state"][k]:
            va, vb = sa["state"][k][field], sb["state"][k][field]
            if isinstance(va, torch.Tensor):
                assert torch.equal(va, vb)
            else:
                assert va == vb


# ---------------------------------------------------------------- grad check


def test_grad_check_quadratic_exact():
    w = torch.randn(10, dtype=torch.float64, requires_grad=True)

    def fn():
        return (w ** 2).sum()

    report = grad_check(fn, {"w": w}, num_coords=10)
    assert report.max_rel_err < 1e-6
    assert report.frac_within == 1.0


def test_grad_check_nonfinite_error():
    w = torch.ones(3, dtype=torch.float64, requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda: (w / 0.0).sum(), {"w": w}, num_coords=2)


def test_grad_check_single_block_mse():
    torch.manual_seed(3)
    model = Denoiser(
        DenoiserConfig(d_model=16, num_blocks=2, num_heads=2, t_len=2, h_p=2, w_p=2,
                       st_window=(2, 2), self_cond=False, fp_cond=False)
    ).double()
    with torch.no_grad():
        model.head.weight.normal_(std=0.1)
        model.adaln.shared.weight.normal_(std=0.1)
    z = torch.randn(1, 2, 2, 2, 8, dtype=torch.float64)
    target = torch.randn(1, 2, 2, 2, 8, dtype=torch.float64)
    params = {n: p for n, p in model.named_parameters() if "blocks.0" in n}

    def fn():
        out = model(z, torch.tensor([100]), torch.tensor([1]))
        return ((out - target) ** 2).mean()

    report = grad_check(fn, params, num_coords=60, generator=torch.Generator().manual_seed(5))
    assert report.frac_within >= 0.95
    assert report.max_rel_err < 1e-3


# ---------------------------------------------------------------- reporting


def test_csv_roundtrip(tmp_path):
    path = str(tmp_path / "log.csv")
    rows = [["codec", 0, "1.0", "1e-3"], ["denoiser", 5, "0.5", "2e-3"]]
    reporting.write_csv(path, rows, header=["phase", "step", "loss", "lr"])
    header, back = reporting.read_csv(path)
    assert header == ["phase", "step", "loss", "lr"]
    assert back[0][0] == "codec" and back[1][1] == "5"


def test_loss_curve_png(tmp_path):
    csv = str(tmp_path / "log.csv")
    rows = [["denoiser", i, f"{1.0 / (i + 1):.4f}", "1e-3"] for i in range(50)]
    reporting.write_csv(csv, rows, header=["phase", "step", "loss", "lr"])
    out = reporting.plot_loss_curve(csv, str(tmp_path / "curve.png"))
    assert os.path.exists(out)
    assert open(out, "rb").read(8)[1:4] == b"PNG"


def test_manifest_roundtrip(tmp_path):
    path = str(tmp_path / "manifest.txt")
    entries = {"seed": 7, "guidance_w": 2.0, "class": "a red square moving right"}
    reporting.write_manifest(path, entries)
    back = reporting.read_manifest(path)
    assert back["seed"] == "7"
    assert back["class"] == "a red square moving right"


def test_export_samples_files(tmp_path):
    codec, _, _, stats = small_world()
    lat = LatentTensor(torch.randn(3, 4, 4, 8) * 0.1, kind="video", normalized=True)
    d = str(tmp_path / "s")
    out = reporting.export_samples([lat], codec, stats, d, meta={"seed": 0})
    assert all(os.path.exists(p) for p in out)
    frames = sorted(f for f in os.listdir(d) if f.startswith("frame_"))
    assert frames == ["frame_0000.png", "frame_0001.png", "frame_0002.png",
                      "frame_0003.png", "frame_0004.png"]
    assert os.path.exists(os.path.join(d, "manifest.txt"))
    assert os.path.exists(os.path.join(d, "contact_sheet.png"))


def test_export_reexport_bit_identical(tmp_path):
    codec, _, _, stats = small_world()
    lat = LatentTensor(torch.randn(3, 4, 4, 8) * 0.1, kind="video", normalized=True)
    reporting.export_samples([lat], codec, stats, str(tmp_path / "a"))
    reporting.export_samples([lat], codec, stats, str(tmp_path / "b"))
    fa = open(str(tmp_path / "a" / "frame_0000.png"), "rb").read()
    fb = open(str(tmp_path / "b" / "frame_0000.png"), "rb").read()
    assert fa == fb


def test_image_mode_single_file(tmp_path):
    codec, _, _, stats = small_world()
    lat = LatentTensor(torch.randn(1, 4, 4, 8) * 0.1, kind="image_stack", normalized=True)
    d = str(tmp_path / "img")
    reporting.export_samples([lat], codec, stats, d)
    frames = [f for f in os.listdir(d) if f.startswith("frame_")]
    assert frames == ["frame_0000.png"]


def test_dataset_preview(tmp_path):
    ds = generate_toy_dataset(ToyDatasetSpec(num_clips=8, num_images=8))
    out = reporting.dataset_preview(ds, str(tmp_path / "prev.png"))
    assert os.path.exists(out)
