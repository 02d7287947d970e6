import pytest

from attr_eval.config import ConfigError, build_layers, parse_config, parse_config_text, config_hash

MINIMAL = "methods = vanilla_gradient\nmetrics = evalattai\n"


def test_minimal_defaults():
    cfg = parse_config_text(MINIMAL)
    assert cfg.evalattai.epsilon == 0.1
    assert cfg.evalattai.steps == 10
    assert cfg.evalattai.sign == 1.0
    assert cfg.deletion.increments == (0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45)
    assert cfg.method.random_sigma == 0.25 and cfg.method.random_mean == 0.0
    assert cfg.eval_subset_size == 1000
    assert [m.name for m in cfg.models] == ["standard"]


def test_increments_must_increase():
    with pytest.raises(ConfigError) as err:
        parse_config_text(MINIMAL + "deletion.increments = 0.1, 0.05\n")
    assert err.value.key == "deletion.increments"


def test_unknown_key():
    with pytest.raises(ConfigError, match="epsilonn") as err:
        parse_config_text(MINIMAL + "epsilonn = 0.1\n")
    assert err.value.key == "epsilonn"
    with pytest.raises(ConfigError, match="evalattai.epsilonn"):
        parse_config_text(MINIMAL + "evalattai.epsilonn = 0.1\n")


def test_missing_key():
    with pytest.raises(ConfigError) as err:
        parse_config_text("methods = vanilla_gradient\n")
    assert err.value.key == "metrics"


@pytest.mark.parametrize("line,key", [
    ("evalattai.steps = ten", "evalattai.steps"),
    ("evalattai.epsilon = -1", "evalattai.epsilon"),
    ("evalattai.recompute_attribution = maybe", "evalattai.recompute_attribution"),
    ("method.sg_sigma = -0.1", "method.sg_sigma"),
    ("dataset.shape = 3x8", "dataset.shape"),
    ("seed = -2", "seed"),
    ("model.other.training = robust", "model.other.training"),
    ("model.standard.optimizer = adam", "model.standard.optimizer"),
])
def test_type_errors_name_key(line, key):
    with pytest.raises(ConfigError) as err:
        parse_config_text(MINIMAL + line + "\n")
    assert err.value.key == key


def test_bad_method_name():
    with pytest.raises(ConfigError):
        parse_config_text("methods = vanilla\nmetrics = evalattai\n")


def test_subset_bigger_than_pool():
    with pytest.raises(ConfigError) as err:
        parse_config_text(MINIMAL + "dataset.n = 100\neval.subset_size = 200\n")
    assert err.value.key == "eval.subset_size"


def test_full_config(tmp_path):
    text = MINIMAL.replace("evalattai", "deletion, insertion, evalattai") + (
        "models = standard, robust\nmodel.robust.snr_db = 3\nseed = 7\n"
        "evalattai.sign = -1\nevalattai.recompute_attribution = true\nmethod.ig_baseline = mean\n"
        "# comment\n\ntrain.epochs = 3\n")
    p = tmp_path / "c.cfg"
    p.write_text(text)
    cfg = parse_config(p)
    assert cfg.metrics == ["deletion", "insertion", "evalattai"]
    assert cfg.models[1].training == "robust" and cfg.models[1].snr_db == 3.0
    assert cfg.seed == 7 and cfg.train.seed == 7 and cfg.train.epochs == 3
    assert cfg.evalattai.sign == -1.0 and cfg.evalattai.recompute_attribution
    assert cfg.ig_baseline == "mean"
    assert cfg.config_hash == config_hash(p.read_bytes())


def test_duplicate_key():
    with pytest.raises(ConfigError):
        parse_config_text(MINIMAL + "seed = 1\nseed = 2\n")


def test_build_layers():
    layers = build_layers("conv2d(8,3,1,1), relu, maxpool2d(2), flatten, dense(32), relu, dense", (3, 8, 8), 3)
    assert [l.kind for l in layers] == ["conv2d", "relu", "maxpool2d", "flatten", "dense", "relu", "dense"]
    assert layers[4].in_features == 8 * 4 * 4 and layers[-1].out_features == 3
    with pytest.raises(ConfigError):
        build_layers("conv2d(8,3), flatten, dense(5)", (3, 8, 8), 3)
    with pytest.raises(ConfigError):
        build_layers("conv2d(8,9)", (3, 8, 8), 3)
    with pytest.raises(ConfigError):
        build_layers("softmax", (3, 8, 8), 3)
