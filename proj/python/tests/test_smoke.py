import numpy as np
import pytest

import bevkd

TINY_MODEL = {
    "grid": {"rows": 4, "cols": 4, "extent": 6.0},
    "image_height": 12,
    "image_width": 16,
    "num_classes": 2,
    "num_queries": 4,
}


def tiny_config(steps=10, **distill):
    return {
        "model": dict(TINY_MODEL, preset="small"),
        "teacher_model": dict(TINY_MODEL, preset="large"),
        "optim": {"lr": 0.05, "steps": steps, "seed": 1},
        "distill": distill,
    }


@pytest.fixture(scope="module")
def data():
    return bevkd.generate_dataset(5, sequences=2, views=2, frames=3, objects=2, classes=2, height=12, width=16)


@pytest.fixture(scope="module")
def teacher(data):
    cfg = tiny_config(steps=15)
    cfg["model"] = cfg["teacher_model"]
    model, curve = bevkd.train_model(cfg, data)
    assert len(curve) == 15
    return model


def test_dataset_roundtrip(tmp_path, data):
    bevkd.save_dataset(data, tmp_path / "d")
    again = bevkd.load_dataset(tmp_path / "d")
    assert len(again) == 2
    for a, b in zip(data.images(1, 2), again.images(1, 2)):
        assert a.shape == (3, 12, 16)
        np.testing.assert_array_equal(a, b)
    assert data.boxes(0, 0) == again.boxes(0, 0)


def test_op_gradcheck_passes():
    cases = bevkd.gradcheck()
    assert cases and all(ok for _, _, _, ok in cases)


def test_forward_outputs(data, teacher):
    out = teacher.forward(data, 0, 1)
    assert out["e_bev"].shape[0] == 16
    np.testing.assert_allclose(out["probs"].sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(out["response"], np.abs(out["e_bev"]).mean(axis=1), atol=1e-15)
    np.testing.assert_allclose(bevkd.bev_response(out["e_bev"]), out["response"], atol=0)
    with pytest.raises(bevkd.ConfigError):
        teacher.forward(data, 0, 0)


def test_losses():
    e = np.random.default_rng(0).normal(size=(16, 8))
    assert bevkd.response_loss(e, e) == 0.0
    assert bevkd.response_loss(e, -e) == 0.0
    assert bevkd.total_loss(2.0, 0.5, 0.25, lambda_=0.1) == pytest.approx(2.075, abs=1e-15)
    assert bevkd.default_layer_map(2, 3) == [1, 2]


def test_distill_inherits_and_freezes(data, teacher):
    student, curve = bevkd.distill_model(tiny_config(), data, teacher)
    assert len(curve) == 10
    for name in ("bev_queries", "pos_encoding"):
        np.testing.assert_array_equal(student.param(name), teacher.param(name))
        assert name in student.frozen


def test_checkpoint_and_report_are_reproducible(tmp_path, data):
    a, _ = bevkd.train_model(tiny_config(), data)
    b, _ = bevkd.train_model(tiny_config(), data)
    assert a.digest() == b.digest()
    a.save(tmp_path / "ckpt")
    loaded = bevkd.Detector.load(tmp_path / "ckpt")
    assert loaded.digest() == a.digest()
    assert loaded.report(data) == a.report(data)
    assert loaded.report(data).startswith("metric\tvalue")


def test_set_param_checks_shape():
    model = bevkd.Detector("small")
    with pytest.raises(bevkd.DimensionError):
        model.set_param("bev_queries", np.zeros((2, 2)))
    value = np.full(model.param("bev_queries").shape, 0.5)
    model.set_param("bev_queries", value)
    np.testing.assert_array_equal(model.param("bev_queries"), value)


def test_bad_config_raises(data):
    with pytest.raises(bevkd.ConfigError):
        bevkd.Detector("medium")
    with pytest.raises(bevkd.FormatError):
        bevkd.train_model({"optim": {"steps": "many"}}, data)


def test_ablation_rows(data, teacher):
    rows, table = bevkd.run_ablation(tiny_config(steps=4), data, data, teacher)
    assert [r["name"] for r in rows][1:] == ["-----", "---WI", "--RWI", "ST-WI", "STR--", "STRWI"]
    assert rows[0]["baseline"]
    assert rows[1]["digest"] == rows[0]["digest"]
    assert len(table.strip().splitlines()) == 8


def test_hit_views():
    views = bevkd.hit_views("small", 6, 0)
    assert views and all(0 <= v < 6 for v in views)
