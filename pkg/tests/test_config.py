import json

import pytest

from servicetime.config import ConfigError, RunConfig, apply_override


def test_defaults():
    cfg = RunConfig()
    assert cfg.model.window == 14 and cfg.model.d_model == 32 and cfg.model.temporal_heads == 4
    assert cfg.train.lr == 0.001 and cfg.gpr.lengthscale == 1.0 and cfg.ingest.train_fraction == 0.8
    assert cfg.ingest.max_service_days == 80.0


@pytest.mark.parametrize("suffix,text", [
    (".toml", '[model]\nwindow = 7\n[ingest.schema]\ndistrict = "Ward"\n'),
    (".yaml", "model:\n  window: 7\ningest:\n  schema:\n    district: Ward\n"),
    (".json", json.dumps({"model": {"window": 7}, "ingest": {"schema": {"district": "Ward"}}})),
])
def test_load_formats(tmp_path, suffix, text):
    p = tmp_path / f"run{suffix}"
    p.write_text(text)
    cfg = RunConfig.load(p)
    assert cfg.model.window == 7 and cfg.ingest.schema.district == "Ward"


def test_unknown_key_named(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("[train]\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigError) as exc:
        RunConfig.load(p)
    assert exc.value.key == "train.learning_rate"


def test_invalid_values():
    with pytest.raises(ConfigError, match="variant"):
        RunConfig.from_dict({"model": {"variant": "-x"}})
    with pytest.raises(ConfigError) as exc:
        apply_override(RunConfig(), "model.nope", 1)
    assert exc.value.key == "model.nope"


def test_override_and_digest():
    a = RunConfig()
    b = apply_override(a, "train.seed", 5)
    assert b.train.seed == 5 and a.train.seed == 0
    assert a.digest() != b.digest() and a.digest() == RunConfig().digest()
    assert RunConfig.from_dict(b.to_dict()) == b
