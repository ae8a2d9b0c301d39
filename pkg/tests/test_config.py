import json

import pytest

from ctrengine.config import RunConfig, default_config, parse_override
from ctrengine.errors import ConfigurationError


class TestRunConfig:
    def test_defaults_build(self):
        cfg = RunConfig()
        assert cfg.optimizer().kind == "adagrad"
        assert cfg.bias_constraints() is None
        assert [c.name for c in cfg.feature_spec().quality_columns]

    def test_round_trip(self, tmp_path):
        cfg = RunConfig({"optimizer": {"kind": "shampoo"}}, ["trainer.batch_size=64"])
        (tmp_path / "c.json").write_text(cfg.to_json())
        again = RunConfig.load(tmp_path / "c.json")
        assert again.data == cfg.data
        assert again.trainer().batch_size == 64

    def test_override_parsing(self):
        assert parse_override("a.b=3") == ("a.b", 3)
        assert parse_override("a.b=[1, 2]") == ("a.b", [1, 2])
        assert parse_override("optimizer.kind=shampoo") == ("optimizer.kind", "shampoo")
        with pytest.raises(ConfigurationError):
            parse_override("novalue")

    def test_override_tuple_form(self):
        cfg = RunConfig(None, [("model.hidden", [8])])
        assert cfg.model().hidden == (8,)

    @pytest.mark.parametrize("bad", [{"optimiser": {}}, {"optimizer": {"lr2": 1}}, {"optimizer": 3}])
    def test_unknown_keys_named(self, bad):
        with pytest.raises(ConfigurationError) as info:
            RunConfig(bad)
        assert next(iter(bad)) in str(info.value)

    def test_invalid_value_rejected_up_front(self):
        with pytest.raises(ConfigurationError):
            RunConfig(None, ["optimizer.kind=sgd"])

    def test_explicit_columns(self):
        cols = [{"name": "a", "vocab": 4, "dim": 2, "kind": "quality"}]
        spec = RunConfig({"features": {"columns": cols, "max_position": 3}}).feature_spec()
        assert spec.column("a").vocab == 4 and spec.max_position == 3

    def test_malformed_search_space(self):
        with pytest.raises(ConfigurationError):
            RunConfig({"nas": {"space": {"decisions": [{"kind": "hidden"}]}}})

    def test_bad_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{")
        with pytest.raises(ConfigurationError):
            RunConfig.load(tmp_path / "c.json")
        (tmp_path / "c.json").write_text("[]")
        with pytest.raises(ConfigurationError):
            RunConfig.load(tmp_path / "c.json")

    def test_default_config_is_json(self):
        json.dumps(default_config())
