import json
from pathlib import Path

import pytest

from avguard.config import apply_overrides, load_config, parse_config
from avguard.errors import ConfigurationError
from avguard.labels import Target
from avguard.models import Architecture


def write(tmp_path: Path, text: str) -> Path:
    path = tmp_path / "run.toml"
    path.write_text(text)
    return path


class TestLoadConfig:
    def test_defaults(self):
        cfg = load_config(None)

        assert cfg.model.arch is Architecture.BASELINE
        assert (cfg.dataset.seed, cfg.dataset.anomaly_fraction, cfg.dataset.folds) == (0, 0.5, 5)
        assert cfg.dataset.class_map[14] is Target.STOP
        assert (cfg.train.batch_size, cfg.train.epochs) == (128, 300)
        assert cfg.evaluation.perplexity == 30.0
        assert cfg.paths.speech_commands is None
        assert cfg.source is None

    def test_file_values(self, tmp_path):
        (tmp_path / "speech").mkdir()
        path = write(
            tmp_path,
            """
[paths]
speech_commands = "speech"
workspace = "out"

[dataset]
seed = 4
folds = 3

[model]
arch = "xflow"
seed = 7

[train]
epochs = 12
betas = [0.8, 0.99]
fold = 2
""",
        )

        cfg = load_config(path)

        assert cfg.paths.speech_commands == tmp_path.resolve() / "speech"
        assert cfg.paths.workspace == tmp_path.resolve() / "out"
        assert cfg.dataset.seed == 4
        assert cfg.model.arch is Architecture.XFLOW
        assert cfg.model_seed == 7
        assert cfg.train.betas == (0.8, 0.99)
        assert cfg.fold == 2
        assert cfg.source == path.resolve()

    def test_overrides_win(self, tmp_path):
        path = write(tmp_path, "[train]\nepochs = 12\n")

        cfg = load_config(path, {"train.epochs": 3, "train.batch_size": None, "model.arch": "bnn"})

        assert cfg.train.epochs == 3
        assert cfg.train.batch_size == 128
        assert cfg.model.arch is Architecture.BNN

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError, match="does not exist"):
            load_config(tmp_path / "absent.toml")

    def test_malformed_toml(self, tmp_path):
        with pytest.raises(ConfigurationError, match="run.toml"):
            load_config(write(tmp_path, "[train\nepochs = "))


class TestValidation:
    def test_type_errors_reported_together(self):
        raw = {"train": {"epochs": "many", "batch": 3}, "evaluation": {"plot": 1}, "extras": {}}

        with pytest.raises(ConfigurationError) as exc_info:
            parse_config(raw)

        lines = str(exc_info.value).splitlines()
        assert lines[0] == "Invalid configuration:"
        assert "train.epochs: expected int, got str 'many'" in lines
        assert "train.batch: unknown key" in lines
        assert "evaluation.plot: expected bool, got int 1" in lines
        assert "extras: unknown section" in lines

    def test_bool_is_not_an_int(self):
        with pytest.raises(ConfigurationError, match="train.epochs: expected int, got bool"):
            parse_config({"train": {"epochs": True}})

    def test_value_errors_reported_together(self, tmp_path):
        raw = {
            "paths": {"gtsrb": "nowhere"},
            "dataset": {"folds": 1},
            "train": {"epochs": 0},
            "model": {"arch": "resnet"},
        }

        with pytest.raises(ConfigurationError) as exc_info:
            parse_config(raw, base=tmp_path)

        message = str(exc_info.value)
        assert "paths.gtsrb:" in message
        assert "dataset: folds must be at least 2" in message
        assert "train: epochs must be positive" in message
        assert "model: Unknown architecture 'resnet'" in message

    def test_fold_out_of_range(self):
        with pytest.raises(ConfigurationError, match=r"train.fold: 5 is not in \[0, 5\)"):
            parse_config({"train": {"fold": 5}})

    @pytest.mark.parametrize(
        ("class_map", "match"),
        (
            pytest.param({"go": 1, "right": 2, "left": 3}, "one sign class for each", id="missing-command"),
            pytest.param({"go": 1, "right": 2, "left": 3, "stop": 4, "forward": 5}, "Unknown target", id="unknown-word"),
            pytest.param({"go": "35", "right": 2, "left": 3, "stop": 4}, "must be an integer", id="non-integer"),
        ),
    )
    def test_bad_class_map(self, class_map, match):
        with pytest.raises(ConfigurationError, match=match):
            parse_config({"dataset": {"class_map": class_map}})

    def test_custom_class_map(self):
        cfg = parse_config({"dataset": {"class_map": {"go": 1, "right": 2, "left": 3, "stop": 4}}})

        assert cfg.dataset.class_map == {1: Target.GO, 2: Target.RIGHT, 3: Target.LEFT, 4: Target.STOP}

    def test_require_corpora(self):
        with pytest.raises(ConfigurationError, match="paths.speech_commands: required"):
            parse_config({}).require_corpora()


class TestOverrides:
    def test_does_not_mutate_input(self):
        raw = {"train": {"epochs": 5}}

        merged = apply_overrides(raw, {"train.epochs": 1, "dataset.seed": 9})

        assert raw == {"train": {"epochs": 5}}
        assert merged == {"train": {"epochs": 1}, "dataset": {"seed": 9}}


def test_to_dict_is_json_ready(tmp_path):
    cfg = parse_config({"paths": {"workspace": "w"}, "model": {"arch": "deconv_cbp"}}, base=tmp_path)

    data = json.loads(json.dumps(cfg.to_dict()))

    assert data["model"]["arch"] == "deconv_cbp"
    assert data["dataset"]["class_map"] == {"go": 35, "right": 33, "left": 34, "stop": 14}
    assert data["paths"]["workspace"] == str(tmp_path.resolve() / "w")
    assert "source" not in data
