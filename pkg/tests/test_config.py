import pytest
import yaml

from dlsm.config import ConfigError, config_from_dict, dump_config, load_config
from dlsm.samplers import Method


def test_paper_profile_defaults():
    cfg = load_config()
    assert cfg.profile == "paper"
    assert cfg.train.score.iterations == 40000 and cfg.train.score.batch_size == 4000
    assert cfg.train.score.learning_rate == 6.5e-4
    assert cfg.train.classifier.learning_rate == 2e-5
    assert cfg.loss_weights.balance == 0.125
    assert cfg.guidance.alpha == 10.0
    assert cfg.metrics.count == 1225 and cfg.metrics.k == 3
    assert cfg.seeds == (0, 1, 2, 3, 4)


def test_ci_profile_shortens_training_only():
    ci, paper = load_config(profile="ci"), load_config()
    assert ci.train.score.iterations == ci.train.classifier.iterations == 10000
    assert ci.train.classifier.learning_rate == paper.train.classifier.learning_rate
    assert ci.schedule == paper.schedule
    assert ci.loss_weights == paper.loss_weights


def test_user_file_merges_over_profile(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("train:\n  score:\n    iterations: 7\nguidance:\n  method: Scaling\n")
    cfg = load_config(path, profile="ci")
    assert cfg.train.score.iterations == 7
    assert cfg.train.score.batch_size == 256
    assert cfg.guidance.method is Method.SCALING


def test_profile_key_in_file(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("profile: ci\n")
    assert load_config(path).profile == "ci"


def test_round_trip_through_dump():
    cfg = load_config(profile="ci")
    doc = yaml.safe_load(dump_config(cfg))
    assert config_from_dict(doc) == cfg


def test_digest_tracks_changes():
    a = load_config()
    b = config_from_dict({"schedule": {"T": 500}})
    assert a.digest("dataset") == b.digest("dataset")
    assert a.digest() != b.digest()


@pytest.mark.parametrize("doc, match", [
    ({"trian": {}}, "unknown key"),
    ({"train": {"score": {"iterations": "many"}}}, "expected a number"),
    ({"train": {"score": {"iterations": 1.5}}}, "integer"),
    ({"dataset": {"center": 1}}, "true/false"),
    ({"guidance": {"method": "magic"}}, "unknown method"),
    ({"metrics": {"grid_mode": "hex"}}, "grid_mode"),
    ({"metrics": {"k": 0}}, "k must"),
    ({"sampler": {"step_norm": "global"}}, "step_norm"),
    ({"sampler": {"n_samples": 3}}, "exceed"),
    ({"schedule": {"sigma_min": 20.0}}, "sigma_min"),
    ({"seeds": []}, "non-empty"),
    ({"metrics": {"bounds": [[1, 0], [0, 1]]}}, "bounds"),
    ({"dataset": []}, "mapping"),
])
def test_invalid(doc, match):
    with pytest.raises(ConfigError, match=match):
        config_from_dict(doc)


def test_unknown_profile():
    with pytest.raises(ConfigError, match="profile"):
        load_config(profile="huge")


def test_bad_yaml(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("train: [unclosed\n")
    with pytest.raises(ConfigError, match="invalid YAML"):
        load_config(path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.yaml")
