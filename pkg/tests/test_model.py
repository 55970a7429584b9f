import numpy as np
import pytest

from msdet.errors import ConfigError, ContractError
from msdet.model import DetectorConfig, build_detector, load_model, save_model
from msdet import pipeline as pl


def small_config(seed=0, **kw):
    return DetectorConfig(seed=seed, **kw)


def rand_pair(seed=0, h=64, w=80):
    r = np.random.default_rng(seed)
    return (r.random((1, 3, h, w), dtype=np.float32),
            r.random((1, 1, h, w), dtype=np.float32))


ALL_STAGES = ("none_color", "none_thermal", "early", "halfway", "late")


def test_build_all_stages_dry_run_forward():
    color, thermal = rand_pair()
    for stage in ALL_STAGES:
        m = build_detector(small_config(), stage)
        f = m.extract_features(color=color, thermal=thermal)
        cfg = m.config
        assert f["obj"].shape == (1, cfg.anchors_per_cell, cfg.feat_h, cfg.feat_w)
        assert f["reg"].shape == (1, 4 * cfg.anchors_per_cell, cfg.feat_h, cfg.feat_w)
        cls_logits, deltas = m.head_forward(f, np.array([[10.0, 5.0, 40.0, 60.0]]))
        assert cls_logits.shape == (1, 2) and deltas.shape == (1, 4)


def test_halfway_nin_input_is_twice_c4_width():
    m = build_detector(small_config(), "halfway")
    nin = m.layers["fuse.nin"]
    assert nin.c_in == 2 * m.config.widths[3]
    assert nin.c_out == m.config.widths[3]
    assert nin.k == 1


def test_early_nin_input_is_twice_c1_width():
    m = build_detector(small_config(), "early")
    nin = m.layers["fuse.nin"]
    assert nin.c_in == 2 * m.config.widths[0]
    assert nin.c_out == m.config.widths[0]


def test_none_color_single_branch_no_concat():
    m = build_detector(small_config(), "none_color")
    assert m.modalities == ["color"]
    assert not hasattr(m, "fuse_concat") and not hasattr(m, "rpn_concat")
    assert all(not name.startswith("thermal") for name in m.layers)


def test_early_has_more_params_than_single_branch():
    n_early = build_detector(small_config(), "early").num_params()
    n_color = build_detector(small_config(), "none_color").num_params()
    assert n_early > n_color


def test_late_fusion_structure():
    m = build_detector(small_config(), "late")
    assert "head.color.f6" in m.layers and "head.thermal.f7" in m.layers
    assert m.layers["head.cls"].d_in == 2 * m.config.fc_width
    # RPN reads both branches' final conv maps
    assert m.rpn_conv.c_in == 2 * m.config.widths[4]


def test_backbone_has_three_pools():
    m = build_detector(small_config(), "none_color")
    kinds = [op.kind for op in m.branch_ops["color"]]
    assert kinds.count("maxpool2x2") == 3
    assert m.config.stride == 8


def test_two_branch_models_genuinely_use_both_inputs():
    color, thermal = rand_pair(1)
    for stage in ("early", "halfway", "late"):
        m = build_detector(small_config(seed=2), stage)
        base = m.extract_features(color=color, thermal=thermal)["obj"].copy()
        zeroed = m.extract_features(
            color=color, thermal=np.zeros_like(thermal)
        )["obj"]
        assert not np.array_equal(base, zeroed)


def test_two_branch_models_not_weight_tied():
    # swapping inputs must change the output (no shared branch weights)
    r = np.random.default_rng(3)
    x = r.random((1, 1, 64, 80), dtype=np.float32)
    y = r.random((1, 1, 64, 80), dtype=np.float32)
    m = build_detector(small_config(seed=4), "halfway")
    # feed single-channel images into both branches via channel repeat
    a = m.extract_features(color=np.repeat(x, 3, axis=1), thermal=y)["obj"]
    b = m.extract_features(color=np.repeat(y, 3, axis=1), thermal=x)["obj"]
    assert not np.array_equal(a, b)


def test_indivisible_image_size_rejected():
    with pytest.raises(ConfigError):
        build_detector(DetectorConfig(image_h=60, image_w=80), "halfway")


def test_score_stage_rejected():
    with pytest.raises(ConfigError, match="score_fuse"):
        build_detector(small_config(), "score")


def test_missing_modality_rejected():
    m = build_detector(small_config(), "halfway")
    color, _ = rand_pair()
    with pytest.raises(ContractError):
        m.extract_features(color=color, thermal=None)


def test_anchor_count_matches_grid():
    m = build_detector(small_config(), "none_color")
    cfg = m.config
    assert m.anchors.shape == (cfg.feat_h * cfg.feat_w * cfg.anchors_per_cell, 4)


def test_same_seed_same_params():
    a = build_detector(small_config(seed=7), "halfway").params()
    b = build_detector(small_config(seed=7), "halfway").params()
    for k in a:
        assert np.array_equal(a[k], b[k])


# ---------------------------------------------------------------------------
# whole-graph gradients: the junction/merge plumbing against central
# differences (layer-level gradients are covered in test_gradcheck)
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("stage", ALL_STAGES)
def test_model_backward_matches_finite_differences(stage):
    cfg = DetectorConfig(image_h=16, image_w=16, widths=(2, 2, 2, 2, 2),
                         fc_width=3, anchor_scales=(8.0,), anchor_ratios=(1.0, 2.0),
                         rpn_channels=2, roi_size=2, seed=13)
    model = build_detector(cfg, stage).astype(np.float64)
    r = np.random.default_rng(14)
    # zero-init biases can leave ReLU preactivations exactly at the kink
    # (dead f6 -> f7 output equals its zero bias); nudge everything off it
    for p in model.params().values():
        p += r.normal(0, 0.05, size=p.shape)
    color = r.uniform(0.1, 0.9, size=(1, 3, 16, 16))
    thermal = r.uniform(0.1, 0.9, size=(1, 1, 16, 16))
    rois = np.array([[1.0, 1.0, 13.0, 15.0], [4.0, 2.0, 12.0, 14.0]])

    feats = model.extract_features(color=color, thermal=thermal)
    probes = {
        "obj": r.normal(size=feats["obj"].shape),
        "reg": r.normal(size=feats["reg"].shape),
    }
    cls_logits, deltas = model.head_forward(feats, rois)
    probes["cls"] = r.normal(size=cls_logits.shape)
    probes["reg_h"] = r.normal(size=deltas.shape)

    def loss():
        f = model.extract_features(color=color, thermal=thermal)
        c, d = model.head_forward(f, rois)
        return float((f["obj"] * probes["obj"]).sum() + (f["reg"] * probes["reg"]).sum()
                     + (c * probes["cls"]).sum() + (d * probes["reg_h"]).sum())

    model.backward(probes["obj"], probes["reg"], probes["cls"], probes["reg_h"])
    analytic = {k: g.copy() for k, g in model.param_grads().items()}

    eps = 1e-5
    worst = 0.0
    for name, p in model.params().items():
        flat = p.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss()
            flat[i] = orig - eps
            dn = loss()
            flat[i] = orig
            num = (up - dn) / (2 * eps)
            worst = max(worst, abs(ga[i] - num) / max(abs(ga[i]), abs(num), 1e-8))
    assert worst < 1e-4, f"{stage}: worst relative error {worst}"


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("stage", ALL_STAGES)
def test_save_load_roundtrip_bit_exact(tmp_path, stage):
    m = build_detector(small_config(seed=5), stage)
    path = tmp_path / "model"
    save_model(m, str(path))
    loaded = load_model(str(path))
    assert loaded.stage == stage
    assert loaded.config == m.config
    pa, pb = m.params(), loaded.params()
    assert list(pa) == list(pb)
    for k in pa:
        assert np.array_equal(pa[k], pb[k]), k


def test_save_load_forward_bit_identical(tmp_path):
    m = build_detector(small_config(seed=6), "halfway")
    color, thermal = rand_pair(7)
    before = m.extract_features(color=color, thermal=thermal)["obj"].copy()
    save_model(m, str(tmp_path / "m"))
    loaded = load_model(str(tmp_path / "m"))
    after = loaded.extract_features(color=color, thermal=thermal)["obj"]
    assert np.array_equal(before, after)


def test_load_rejects_truncated_blob(tmp_path):
    m = build_detector(small_config(), "none_color")
    save_model(m, str(tmp_path / "m"))
    blob = (tmp_path / "m" / "params.bin").read_bytes()
    (tmp_path / "m" / "params.bin").write_bytes(blob[:-8])
    with pytest.raises(Exception, match="float32"):
        load_model(str(tmp_path / "m"))


def test_load_rejects_bad_magic(tmp_path):
    m = build_detector(small_config(), "none_color")
    save_model(m, str(tmp_path / "m"))
    manifest = (tmp_path / "m" / "manifest.txt").read_text()
    (tmp_path / "m" / "manifest.txt").write_text("msdet-model 99\n" + manifest)
    from msdet.errors import DataFormatError
    with pytest.raises(DataFormatError):
        load_model(str(tmp_path / "m"))
