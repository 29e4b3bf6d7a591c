import json

import pytest

from ecglang.cli import main
from ecglang.config import DEFAULTS, load_config
from ecglang.errors import ConfigError
from ecglang.evaluation import EvalReport
from ecglang.vocab import WaveVocabulary

SMALL = {
    "synth": {"n_per_class": 8},
    "wave_ae": {"max_epochs": 3},
    "vocab": {"k": {"P": 4, "QRS": 4, "T": 4}, "restarts": 2},
    "model": {"d_model": 32, "n_layers": 2, "n_heads": 4, "morph_channels": [4, 8], "morph_feature_dim": 16},
    "pretrain": {"max_epochs": 3},
    "finetune": {"max_epochs": 3},
}


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory, small_config):
    work = tmp_path_factory.mktemp("run")
    assert main(["pipeline", "--workdir", str(work), "--config", str(small_config), "--quiet"]) == 0
    return work


class TestConfig:
    def test_defaults_validate(self):
        assert load_config()["model"]["d_model"] == DEFAULTS["model"]["d_model"]

    def test_precedence(self, tmp_path):
        f = tmp_path / "c.json"
        f.write_text(json.dumps({"pretrain": {"max_epochs": 7, "batch_size": 16}}))
        cfg = load_config(f, {"pretrain.max_epochs": 3})
        assert cfg["pretrain"]["max_epochs"] == 3
        assert cfg["pretrain"]["batch_size"] == 16
        assert cfg["pretrain"]["lr"] == DEFAULTS["pretrain"]["lr"]

    @pytest.mark.parametrize("override,key", [
        ({"model.d_model": 100}, "model.d_model"),
        ({"finetune.label_fraction": 0.5}, "finetune.label_fraction"),
        ({"sentence.mask_prob": 0}, "sentence.mask_prob"),
        ({"model.n_layers": 2.5}, "model.n_layers"),
        ({"vocab.k": {"P": 3}}, "vocab.k"),
        ({"nosuch.key": 1}, "nosuch"),
    ])
    def test_errors_name_the_key(self, override, key):
        with pytest.raises(ConfigError) as exc:
            load_config(None, override)
        assert exc.value.key == key

    def test_unrestricted_fraction(self):
        cfg = load_config(None, {"finetune.restricted_label_fraction": False, "finetune.label_fraction": 0.5})
        assert cfg["finetune"]["label_fraction"] == 0.5

    def test_unknown_file_key(self, tmp_path):
        f = tmp_path / "c.json"
        f.write_text(json.dumps({"model": {"depth": 3}}))
        with pytest.raises(ConfigError):
            load_config(f)


class TestExitCodes:
    def test_bad_label_fraction(self, tmp_path, capsys):
        assert main(["finetune", "--workdir", str(tmp_path), "--label-fraction", "0.5", "--quiet"]) == 2
        assert "finetune.label_fraction" in capsys.readouterr().err

    def test_bad_set_syntax(self, tmp_path):
        assert main(["synth", "--workdir", str(tmp_path), "--set", "seed"]) == 2

    def test_missing_input(self, tmp_path, capsys):
        assert main(["preprocess", "--workdir", str(tmp_path), "--quiet"]) == 3
        assert "missing input" in capsys.readouterr().err

    def test_bad_threads(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ECGLANG_THREADS", "zero")
        assert main(["synth", "--workdir", str(tmp_path), "--quiet"]) == 2

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2


class TestStages:
    def test_synth_flag_beats_config(self, tmp_path, small_config):
        assert main(["synth", "--workdir", str(tmp_path), "--config", str(small_config),
                     "--n-per-class", "2", "--quiet"]) == 0
        manifest = json.loads((tmp_path / "manifests" / "synth.json").read_text())
        assert manifest["config"]["synth"]["n_per_class"] == 2
        assert manifest["summary"]["n_records"] == 2 * len(DEFAULTS["synth"]["classes"])

    def test_pipeline_artifacts(self, pipeline_dir):
        for name in ("splits.json", "fiducials.jsonl", "segments.bin", "ae_P.ckpt", "ae_QRS.ckpt", "ae_T.ckpt",
                     "latents.bin", "vocab.json", "tokens.jsonl", "model.ckpt", "adapter.ckpt", "report.json",
                     "scores.csv"):
            assert (pipeline_dir / name).exists(), name
        vocab = WaveVocabulary.load(pipeline_dir / "vocab.json")
        assert vocab.size == 5 + 12
        report = EvalReport.load(pipeline_dir / "report.json")
        assert report.label_names == ["irregular_rr", "absent_p"]
        assert 0.0 <= report.macro_auroc <= 1.0

    def test_manifests_are_relative(self, pipeline_dir):
        for path in (pipeline_dir / "manifests").glob("*.json"):
            m = json.loads(path.read_text())
            for entry in list(m["inputs"].values()) + list(m["outputs"].values()):
                assert not entry["path"].startswith("/")
                assert len(entry["sha256"]) == 64

    def test_manifest_chains_hashes(self, pipeline_dir):
        tok = json.loads((pipeline_dir / "manifests" / "tokenize.json").read_text())
        pre = json.loads((pipeline_dir / "manifests" / "pretrain.json").read_text())
        assert pre["inputs"]["tokens"]["sha256"] == tok["outputs"]["tokens"]["sha256"]

    def test_evaluate_is_repeatable(self, pipeline_dir, tmp_path):
        args = ["evaluate", "--workdir", str(pipeline_dir), "--split", "test", "--quiet"]
        assert main(args + ["--report", str(tmp_path / "a.json"), "--scores", str(tmp_path / "a.csv")]) == 0
        assert main(args + ["--report", str(tmp_path / "b.json"), "--scores", str(tmp_path / "b.csv")]) == 0
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_build_vocab_fixed_k(self, pipeline_dir, tmp_path):
        out = tmp_path / "v.json"
        assert main(["build-vocab", "--workdir", str(pipeline_dir), "--config", str(pipeline_dir.parent / "x.json"),
                     "--quiet"]) == 2
        assert main(["build-vocab", "--workdir", str(pipeline_dir), "--k", "2,3,2", "--out", str(out), "--quiet"]) == 0
        assert WaveVocabulary.load(out).k == {"P": 2, "QRS": 3, "T": 2}

    def test_bad_k_syntax(self, pipeline_dir, tmp_path):
        assert main(["build-vocab", "--workdir", str(pipeline_dir), "--k", "2,3",
                     "--out", str(tmp_path / "v.json"), "--quiet"]) == 2

    def test_export_latents(self, pipeline_dir):
        assert main(["export-latents", "--workdir", str(pipeline_dir), "--wave", "P", "--quiet"]) == 0
        header = (pipeline_dir / "latents_P.csv").read_text().splitlines()[0]
        assert header.startswith("record_id,beat_idx,wave_type,z0") and header.endswith("z11")
