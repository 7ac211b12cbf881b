"""Configuration tree: construction, overrides, presets, hashing."""

import json

import pytest

from semrec.config import (
    ABLATION_PRESETS,
    apply_overrides,
    apply_preset,
    build_run_config,
    canonical_hash,
    config_hash,
    load_config_file,
)
from semrec.errors import ConfigError


class TestBuild:
    def test_defaults_build(self):
        cfg = build_run_config()
        assert cfg.dataset.source == "synthetic"
        assert cfg.dataset.domain_names == ["alpha", "beta", "gamma"]
        assert cfg.ablation.shared_codebook and cfg.ablation.dcl
        assert cfg.finetune.rank == 4

    def test_nested_mapping_coercion(self):
        cfg = build_run_config({
            "seed": 7,
            "dataset": {
                "synthetic": [
                    {"name": "x", "n_items": 50, "n_users": 30},
                    {"name": "y", "n_items": 50, "n_users": 30},
                ],
                "k_core": 2,
            },
            "evaluation": {"cutoffs": [3, 7]},
        })
        assert cfg.seed == 7
        assert cfg.dataset.domain_names == ["x", "y"]
        assert isinstance(cfg.dataset.synthetic, tuple)
        assert cfg.evaluation.cutoffs == (3, 7)

    def test_unknown_keys_rejected_with_path(self):
        with pytest.raises(ConfigError, match="beem_size"):
            build_run_config({"decode": {"beem_size": 5}})
        with pytest.raises(ConfigError, match="config"):
            build_run_config({"no_such_section": {}})

    def test_section_must_be_mapping(self):
        with pytest.raises(ConfigError, match="mapping"):
            build_run_config({"decode": 7})

    def test_seed_wiring(self):
        cfg = build_run_config({"seed": 41})
        assert cfg.quantizer.seed == 41
        assert cfg.train.seed == 42

    def test_dcl_switch_propagates_to_quantizer(self):
        on = build_run_config({})
        off = build_run_config({"ablation": {"dcl": False}})
        assert on.quantizer.dcl_enabled is True
        assert off.quantizer.dcl_enabled is False

    def test_dimension_agreement_enforced(self):
        with pytest.raises(ConfigError, match="input_dim"):
            build_run_config({"quantizer": {"input_dim": 32}})
        cfg = build_run_config({"quantizer": {"input_dim": 32}, "embedder": {"dim": 32}})
        assert cfg.embedder.dim == 32

    def test_validation_errors(self):
        for bad in [
            {"threads": 0},
            {"workers": 0},
            {"dataset": {"source": "stream"}},
            {"dataset": {"k_core": 0}},
            {"dataset": {"max_seq_len": 2}},
            {"ablation": {"finetune": "adapterz"}},
            {"decode": {"beam_size": 0}},
            {"evaluation": {"cutoffs": []}},
            {"embedder": {"provider": "psychic"}},
            {"identifier": {"disamb_cap": 0}},
        ]:
            with pytest.raises(ConfigError):
                build_run_config(bad)

    def test_duplicate_domain_names_rejected(self):
        spec = {"name": "x", "n_items": 50, "n_users": 30}
        with pytest.raises(ConfigError, match="unique"):
            build_run_config({"dataset": {"synthetic": [spec, dict(spec)]}})


class TestHash:
    def test_hash_is_hex_and_stable(self):
        a = config_hash(build_run_config())
        b = config_hash(build_run_config())
        assert a == b
        assert len(a) == 64 and int(a, 16) >= 0

    def test_location_and_parallelism_do_not_affect_hash(self):
        base = config_hash(build_run_config())
        moved = config_hash(build_run_config({"out_dir": "elsewhere", "workers": 8}))
        assert moved == base

    def test_semantic_knobs_change_hash(self):
        base = config_hash(build_run_config())
        assert config_hash(build_run_config({"seed": 1})) != base
        assert config_hash(build_run_config({"quantizer": {"levels": 3}})) != base
        assert config_hash(build_run_config({"ablation": {"dcl": False}})) != base

    def test_canonical_hash_ignores_key_order(self):
        assert canonical_hash({"a": 1, "b": [2, 3]}) == canonical_hash({"b": [2, 3], "a": 1})
        assert canonical_hash({"a": 1}) != canonical_hash({"a": 2})


class TestOverrides:
    def test_dotted_assignment_with_yaml_scalars(self):
        out = apply_overrides({}, ["seed=9", "ablation.dcl=false", "decode.beam_size=7"])
        assert out == {"seed": 9, "ablation": {"dcl": False}, "decode": {"beam_size": 7}}

    def test_input_left_untouched(self):
        data = {"decode": {"beam_size": 3}}
        apply_overrides(data, ["decode.beam_size=9"])
        assert data == {"decode": {"beam_size": 3}}

    def test_string_values_pass_through(self):
        out = apply_overrides({}, ["dataset.source=files"])
        assert out["dataset"]["source"] == "files"

    def test_list_values(self):
        out = apply_overrides({}, ["evaluation.cutoffs=[1, 5]"])
        assert out["evaluation"]["cutoffs"] == [1, 5]

    def test_malformed_assignments(self):
        with pytest.raises(ConfigError):
            apply_overrides({}, ["seed"])
        with pytest.raises(ConfigError):
            apply_overrides({}, ["a..b=1"])
        with pytest.raises(ConfigError):
            apply_overrides({"seed": 3}, ["seed.sub=1"])


class TestPresets:
    def test_every_preset_builds(self):
        for name in ABLATION_PRESETS:
            cfg = build_run_config(apply_preset({}, name))
            assert config_hash(cfg) != config_hash(build_run_config())

    def test_preset_semantics(self):
        assert not build_run_config(apply_preset({}, "no_dcl")).ablation.dcl
        assert not build_run_config(
            apply_preset({}, "no_shared_codebook")
        ).ablation.shared_codebook
        assert not build_run_config(
            apply_preset({}, "no_unified_recommender")
        ).ablation.unified_recommender
        assert build_run_config(apply_preset({}, "no_finetune")).ablation.finetune == "none"
        assert build_run_config(apply_preset({}, "full_finetune")).ablation.finetune == "full"

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="preset"):
            apply_preset({}, "no_such_thing")


class TestConfigFile:
    def test_yaml_roundtrip(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("seed: 5\nablation:\n  dcl: false\n")
        data = load_config_file(path)
        cfg = build_run_config(data)
        assert cfg.seed == 5 and not cfg.ablation.dcl

    def test_json_is_valid_yaml(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"seed": 11, "decode": {"beam_size": 9}}))
        cfg = build_run_config(load_config_file(path))
        assert cfg.seed == 11 and cfg.decode.beam_size == 9

    def test_empty_file_gives_defaults(self, tmp_path):
        path = tmp_path / "empty.yaml"
        path.write_text("")
        assert load_config_file(path) == {}

    def test_non_mapping_rejected(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError):
            load_config_file(path)
