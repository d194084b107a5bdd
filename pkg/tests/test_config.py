"""Configuration validation, canonical serialization and hashing."""

import json
import math

import pytest

from udarts.config import ConfigError, ExperimentConfig, load_config, parse_config


class TestValidation:
    def test_defaults_are_valid(self):
        cfg = parse_config({})
        assert cfg.mode == "mudarts"
        assert cfg.seeds == list(range(10))
        assert cfg.search.epochs == 25

    @pytest.mark.parametrize("doc, field", [
        ({"mode": "enas"}, "mode"),
        ({"seeds": [1, 1]}, "seeds"),
        ({"seeds": [-1]}, "seeds"),
        ({"seeds": []}, "seeds"),
        ({"dataset": {"n": 3}}, "dataset"),
        ({"dataset": {"source": "csv"}}, "dataset"),
        ({"dataset": {"source": "two_moons", "classes": 3, "n": 30}}, "dataset"),
        ({"uncertainty": {"T": 1}}, "uncertainty.T"),
        ({"search": {"spectral_targets": ["theta"]}}, "search.spectral_targets"),
        ({"noise": {"param_sigma": [-0.1]}}, "noise.param_sigma"),
        ({"noise": {"repetitions": 2}}, "noise.repetitions"),
        ({"network": {"k": 3}}, "network.k"),
        ({"lemmas": {"n_foo": 3}}, "lemmas"),
        ({"unknown_section": {}}, "unknown_section"),
    ])
    def test_error_names_field(self, doc, field):
        with pytest.raises(ConfigError) as info:
            parse_config(doc)
        assert str(info.value).startswith(field)

    def test_load_config_reports_json_position(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"mode": "darts",\n  "seeds": [1,}')
        with pytest.raises(ConfigError, match="line 2"):
            load_config(p)

    def test_load_config_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read config"):
            load_config(tmp_path / "nope.json")

    def test_top_level_must_be_object(self, tmp_path):
        p = tmp_path / "list.json"
        p.write_text("[1, 2]")
        with pytest.raises(ConfigError, match="JSON object"):
            load_config(p)


class TestSerialization:
    def test_infinity_round_trip(self, tmp_path):
        cfg = parse_config({"noise": {"snr_db": ["Infinity", 10]}})
        assert cfg.noise.snr_db[0] == math.inf
        text = cfg.canonical_json()
        assert '"Infinity"' in text
        p = tmp_path / "c.json"
        p.write_text(text)
        again = load_config(p)
        assert again == cfg
        assert again.canonical_json() == text

    def test_canonical_json_is_strict_and_sorted(self):
        doc = json.loads(parse_config({}).canonical_json())
        assert list(doc) == sorted(doc)


class TestHash:
    def test_hash_ignores_location_and_seeds(self):
        a = parse_config({"seeds": [0], "output_dir": "a"})
        b = parse_config({"seeds": [5, 6], "output_dir": "b", "noise": {"repetitions": 9}})
        assert a.model_hash("search") == b.model_hash("search")
        assert a.model_hash("final") == b.model_hash("final")

    def test_hash_tracks_model_sections(self):
        base = parse_config({})
        assert base.model_hash() != parse_config({"mode": "darts"}).model_hash()
        assert base.model_hash() != parse_config({"network": {"channels": 6}}).model_hash()

    def test_train_section_only_in_final_hash(self):
        a, b = parse_config({}), parse_config({"train": {"epochs": 3}})
        assert a.model_hash("search") == b.model_hash("search")
        assert a.model_hash("final") != b.model_hash("final")

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ExperimentConfig().model_hash("other")
