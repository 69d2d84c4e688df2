import json

import pytest

from compositional_inference.config import DEFAULT_REPLICATES, DEFAULT_SEED, RunConfig
from compositional_inference.exceptions import ConfigInvalid


class TestFromDict:
    """Test configuration validation."""

    def test_defaults(self):
        """Test that only the scenario is required."""
        config = RunConfig.from_dict({"scenario": "chain4-forward"})
        assert config.seed == DEFAULT_SEED
        assert config.replicates == DEFAULT_REPLICATES
        assert config.threads == 1
        assert config.out == "results"
        assert config.params == {}

    def test_params_kept(self):
        """Test that scenario parameters pass through."""
        config = RunConfig.from_dict({"scenario": "s", "params": {"horizon": 2.0}})
        assert config.params == {"horizon": 2.0}
        assert config.to_dict()["params"] == {"horizon": 2.0}

    @pytest.mark.parametrize("data", [
        {"scenario": "s", "sede": 1},
        {"scenario": ""},
        {"seed": 1},
        {"scenario": "s", "seed": True},
        {"scenario": "s", "seed": -1},
        {"scenario": "s", "seed": 1.5},
        {"scenario": "s", "replicates": 0},
        {"scenario": "s", "threads": 0},
        {"scenario": "s", "out": ""},
        {"scenario": "s", "params": [1, 2]},
    ])
    def test_invalid(self, data):
        """Test rejected documents."""
        with pytest.raises(ConfigInvalid):
            RunConfig.from_dict(data)

    def test_not_an_object(self):
        """Test that a JSON array is rejected."""
        with pytest.raises(ConfigInvalid):
            RunConfig.from_dict(["scenario"])

    def test_to_dict_round_trip(self):
        """Test that the dict view rebuilds the same configuration."""
        config = RunConfig.from_dict({"scenario": "s", "seed": 7, "params": {"a": 1}})
        assert RunConfig.from_dict(config.to_dict()) == config


class TestFromFile:
    """Test loading configuration files."""

    def test_load(self, tmp_path):
        """Test a valid file."""
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"scenario": "hierarchy-toy", "replicates": 2}))
        config = RunConfig.from_file(path)
        assert config.scenario == "hierarchy-toy"
        assert config.replicates == 2

    def test_missing_file(self, tmp_path):
        """Test that a missing file is a configuration error."""
        with pytest.raises(ConfigInvalid):
            RunConfig.from_file(tmp_path / "absent.json")

    def test_bad_json(self, tmp_path):
        """Test that malformed JSON reports its line."""
        path = tmp_path / "bad.json"
        path.write_text('{\n  "scenario": \n}')
        with pytest.raises(ConfigInvalid, match="line"):
            RunConfig.from_file(path)


class TestOverrides:
    """Test command-line overrides."""

    def test_none_ignored(self):
        """Test that unset overrides keep the original."""
        config = RunConfig.from_dict({"scenario": "s", "seed": 3})
        assert config.with_overrides(seed=None, out=None) is config

    def test_applied_and_validated(self):
        """Test that overrides are applied and re-validated."""
        config = RunConfig.from_dict({"scenario": "s"})
        assert config.with_overrides(seed=9, threads=4).seed == 9
        with pytest.raises(ConfigInvalid):
            config.with_overrides(replicates=0)
