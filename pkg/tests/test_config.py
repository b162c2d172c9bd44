import numpy as np
import pytest
import yaml

from uaagan import toydata
from uaagan.config import (DatasetManifest, RunConfig, config_from_dict, dump_config, load_config,
                           load_images)
from uaagan.errors import ConfigurationError, ManifestError


def test_defaults_follow_retrieval_preset():
    cfg = config_from_dict({})
    assert cfg.train.batch_size == 32
    assert (cfg.train.weights.lambda_r, cfg.train.weights.lambda_m, cfg.train.weights.margin) == (4.0, 0.03, 1.0)
    assert (cfg.train.lr_g, cfg.train.lr_d, cfg.train.betas, cfg.train.adam_eps) == (1e-3, 4e-3, (0.9, 0.999), 1e-8)
    assert cfg.train.epochs == 500 and cfg.train.epsilon == 0.1


@pytest.mark.parametrize("task,batch,lr,lm", [("reid", 256, 8.0, 0.05), ("face", 64, 2.0, 0.01)])
def test_task_presets(task, batch, lr, lm):
    cfg = config_from_dict({"task": task})
    assert cfg.train.batch_size == batch
    assert (cfg.train.weights.lambda_r, cfg.train.weights.lambda_m) == (lr, lm)


def test_explicit_values_win():
    cfg = config_from_dict({"task": "reid", "train": {"batch_size": 16, "weights": {"lambda_m": 0.5}}})
    assert cfg.train.batch_size == 16
    assert cfg.train.weights.lambda_m == 0.5 and cfg.train.weights.lambda_r == 8.0


def test_epsilon_synced():
    assert config_from_dict({"train": {"epsilon": 0.05}}).generator.epsilon == 0.05
    assert config_from_dict({"generator": {"epsilon": 0.05}}).train.epsilon == 0.05
    with pytest.raises(ConfigurationError):
        config_from_dict({"generator": {"epsilon": 0.05}, "train": {"epsilon": 0.1}}).validate(False)


@pytest.mark.parametrize("raw", [
    {"bogus": 1},
    {"train": {"lr": 0.1}},
    {"target": {"aggregation": {"method": "gem", "q": 2}}},
    {"task": "video"},
    {"train": 5},
])
def test_strict_keys(raw):
    with pytest.raises(ConfigurationError):
        config_from_dict(raw).validate(False)


def test_validation_errors(tmp_path):
    with pytest.raises(ConfigurationError, match="manifest"):
        config_from_dict({}).validate()
    with pytest.raises(ConfigurationError, match="does not exist"):
        config_from_dict({"dataset": {"manifest": str(tmp_path / "nope.csv")}}).validate()
    with pytest.raises(ConfigurationError):
        config_from_dict({"target": {"backbone": "vgg16"}}).validate(False)
    with pytest.raises(ConfigurationError):
        config_from_dict({"target": {"variants": [{"method": "gem"}]}}).variant_names()
    with pytest.raises(ConfigurationError):
        config_from_dict({}).aggregation_for("rmac")


def test_roundtrip(tmp_path):
    raw = {"task": "face", "seed": 4, "target": {"variants": [{"method": "mac"}, {"method": "rmac", "levels": 2}]},
           "train": {"epochs": 20, "decay_epochs": [5, 9]}, "generator": {"down_blocks": [[8, 1], [16, 2], [32, 2]]}}
    cfg = config_from_dict(raw)
    path = tmp_path / "c.yaml"
    dump_config(cfg, path)
    back = load_config(path)
    assert back == cfg
    assert dump_config(back) == dump_config(cfg)
    assert back.fingerprint() == cfg.fingerprint()
    assert config_from_dict({"seed": 5}).fingerprint() != config_from_dict({"seed": 6}).fingerprint()


def test_overrides(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"seed": 1, "train": {"epochs": 3}}))
    cfg = load_config(path, {"seed": 9, "train": {"seed": 9}})
    assert cfg.seed == 9 and cfg.train.seed == 9 and cfg.train.epochs == 3


# manifests -----------------------------------------------------------------

def _write(tmp_path, rows, make_files=True):
    (tmp_path / "img").mkdir(exist_ok=True)
    lines = ["path,label,split"]
    for name, label, split in rows:
        if make_files:
            toy = np.zeros((8, 8, 3), dtype=np.uint8)
            from PIL import Image
            Image.fromarray(toy).save(tmp_path / "img" / name)
        lines.append(f"img/{name},{label},{split}")
    p = tmp_path / "m.csv"
    p.write_text("\n".join(lines) + "\n")
    return p


def test_manifest_reads_and_unlabeled_train(tmp_path):
    p = _write(tmp_path, [("a.png", "", "train"), ("b.png", 1, "query"), ("c.png", 1, "gallery")])
    m = DatasetManifest.read(p)
    assert m.labels("train").tolist() == [-1]
    assert m.ids("query") == ["img/b.png"]
    assert m.images("gallery", size=4).shape == (1, 3, 4, 4)


def test_manifest_missing_files(tmp_path):
    p = _write(tmp_path, [("a.png", 0, "query"), ("b.png", 0, "gallery")], make_files=False)
    with pytest.raises(ManifestError, match="missing files"):
        DatasetManifest.read(p)
    assert len(DatasetManifest.read(p, validate=False).rows) == 2


def test_manifest_query_without_gallery(tmp_path):
    p = _write(tmp_path, [("a.png", 3, "query"), ("b.png", 1, "gallery")])
    with pytest.raises(ManifestError, match="query label 3"):
        DatasetManifest.read(p)


@pytest.mark.parametrize("rows", [[("a.png", "", "query")], [("a.png", 1, "test")], [("a.png", "x", "gallery")]])
def test_manifest_bad_rows(tmp_path, rows):
    with pytest.raises(ManifestError):
        DatasetManifest.read(_write(tmp_path, rows))


def test_manifest_bad_header(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("file,class\n")
    with pytest.raises(ManifestError, match="header"):
        DatasetManifest.read(p)


# toy data ------------------------------------------------------------------

def test_generate_contract():
    x, y = toydata.generate(classes=4, per_class=3, seed=1, size=32)
    assert x.shape == (12, 3, 32, 32) and x.dtype == np.float32
    assert y.tolist() == [0, 1, 2, 3] * 3
    assert x.min() >= 0 and x.max() <= 1
    assert np.array_equal(np.round(x * 255) / 255, x.astype(np.float64).astype(np.float32))
    x2, _ = toydata.generate(classes=4, per_class=3, seed=1, size=32)
    assert np.array_equal(x, x2)
    with pytest.raises(ConfigurationError):
        toydata.generate(classes=0)


def test_class_recipes_distinct():
    recipes = {toydata.class_recipe(c, 10) for c in range(10)}
    assert len(recipes) == 10


def test_split_names():
    s = toydata.split_names(200)
    assert (s.count("train"), s.count("query"), s.count("gallery")) == (100, 20, 80)
    with pytest.raises(ConfigurationError):
        toydata.split_names(2)


def test_write_dataset_deterministic(tmp_path):
    a = toydata.write_dataset(tmp_path / "a", classes=2, per_class=10, seed=3, size=32)
    b = toydata.write_dataset(tmp_path / "b", classes=2, per_class=10, seed=3, size=32)
    assert a.read_text() == b.read_text()
    for row in DatasetManifest.read(a).rows:
        other = tmp_path / "b" / row.path.relative_to(tmp_path / "a")
        assert row.path.read_bytes() == other.read_bytes()
    x, _ = toydata.generate(2, 10, seed=3, size=32)
    back = load_images(sorted((tmp_path / "a" / "images").glob("*.png")))
    assert np.array_equal(back, x)
