import os

import numpy as np
import pytest

from tsvad import cli
from tsvad.autodiff import load_tensors
from tsvad.clustering import read_profiles
from tsvad.model import ModelConfig, TsVadModel


def run_cli(*argv) -> int:
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("corpus"))
    cfg = tmp_path_factory.mktemp("cfg") / "corpus.ini"
    cfg.write_text(
        "[corpus]\n"
        "num_conversations = 3\n"
        "duration_frames = 500\n"
        "frame_seconds = 0.05\n"
        "embed_dim = 16\n"
        "speakers_min = 2\n"
        "speakers_max = 3\n"
        "noise_sigma = 0.1\n"
        "utt_min = 10\n"
        "utt_max = 40\n")
    assert run_cli("simulate", "--out", out, "--config", str(cfg), "--seed", "3") == 0
    return out


class TestSimulate:
    def test_outputs_exist(self, corpus_dir):
        assert os.path.exists(os.path.join(corpus_dir, "manifest.tsv"))
        assert os.path.exists(os.path.join(corpus_dir, "run-config.txt"))
        feats = sorted(os.listdir(os.path.join(corpus_dir, "features")))
        assert feats == ["conv0000.petw", "conv0001.petw", "conv0002.petw"]
        named = load_tensors(os.path.join(corpus_dir, "features", feats[0]))
        assert named["frames"].shape[1] == 16

    def test_rerun_bit_identical(self, corpus_dir, tmp_path):
        other = str(tmp_path / "again")
        cfg = tmp_path / "c.ini"
        cfg.write_text("[corpus]\nnum_conversations = 3\nduration_frames = 500\n"
                       "frame_seconds = 0.05\nembed_dim = 16\nspeakers_min = 2\n"
                       "speakers_max = 3\nnoise_sigma = 0.1\nutt_min = 10\nutt_max = 40\n")
        assert run_cli("simulate", "--out", other, "--config", str(cfg), "--seed", "3") == 0
        for name in os.listdir(os.path.join(corpus_dir, "features")):
            a = open(os.path.join(corpus_dir, "features", name), "rb").read()
            b = open(os.path.join(other, "features", name), "rb").read()
            assert a == b
        a = open(os.path.join(corpus_dir, "manifest.tsv")).read()
        b = open(os.path.join(other, "manifest.tsv")).read()
        assert a == b

    def test_invalid_overlap_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[corpus]\noverlap_ratio_max = 0.5\n")
        rc = run_cli("simulate", "--out", str(tmp_path / "x"), "--config", str(cfg))
        assert rc == cli.EXIT_CONFIG
        assert "0.3" in capsys.readouterr().err

    def test_print_config(self, tmp_path, capsys):
        rc = run_cli("simulate", "--out", str(tmp_path / "x"), "--print-config")
        assert rc == 0
        out = capsys.readouterr().out
        assert "num_conversations" in out and "overlap_ratio_max" in out

    def test_missing_config_file(self, tmp_path):
        rc = run_cli("simulate", "--out", str(tmp_path / "x"),
                     "--config", str(tmp_path / "nope.ini"))
        assert rc == cli.EXIT_DATA


class TestFirstPass:
    def test_writes_profiles_and_rttm(self, corpus_dir, tmp_path):
        out = str(tmp_path / "fp")
        rc = run_cli("firstpass", "--corpus", corpus_dir, "--out", out,
                     "--method", "ahc", "--threshold", "0.9", "--seed", "1")
        assert rc == 0
        pset = read_profiles(os.path.join(out, "conv0000.profiles"))
        assert pset.source.kind == "ahc"
        assert os.path.exists(os.path.join(out, "conv0000.rttm"))

    def test_missing_corpus(self, tmp_path):
        rc = run_cli("firstpass", "--corpus", str(tmp_path / "void"),
                     "--out", str(tmp_path / "fp"))
        assert rc == cli.EXIT_DATA


@pytest.fixture(scope="module")
def trained_model_dir(corpus_dir, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("train"))
    cfg = tmp_path_factory.mktemp("mcfg") / "model.ini"
    cfg.write_text("[model]\nfeat_dim = 16\nembed_dim = 16\nprofile_dim = 16\n"
                   "isd_hidden = 16\nnum_pseudo = 2\njsd_blocks = 1\n")
    rc = run_cli("train", "--corpus", corpus_dir, "--out", out, "--config", str(cfg),
                 "--recipe-preset", "single-stage", "--profile-mix", "oracle",
                 "--steps", "6", "--seed", "2")
    assert rc == 0
    return out


class TestTrain:
    def test_checkpoint_and_metrics(self, trained_model_dir):
        files = sorted(os.listdir(trained_model_dir))
        assert "metrics.tsv" in files
        assert any(f.endswith(".petw") for f in files)
        prefix = os.path.join(trained_model_dir, "stage1-train")
        model = TsVadModel.load(prefix)
        assert model.config.num_pseudo == 2

    def test_three_stage_emits_three_checkpoints(self, corpus_dir, tmp_path):
        out = str(tmp_path / "three")
        cfg = tmp_path / "m.ini"
        cfg.write_text("[model]\nfeat_dim = 16\nembed_dim = 16\nprofile_dim = 16\n"
                       "isd_hidden = 16\nnum_pseudo = 2\njsd_blocks = 1\n")
        rc = run_cli("train", "--corpus", corpus_dir, "--out", out, "--config", str(cfg),
                     "--recipe-preset", "three-stage", "--profile-mix", "config1",
                     "--steps", "4", "4", "2", "--seed", "2")
        assert rc == 0
        ckpts = sorted(f for f in os.listdir(out) if f.endswith(".petw"))
        assert len(ckpts) == 3

    def test_recipe_file(self, corpus_dir, tmp_path):
        recipe = tmp_path / "recipe.ini"
        recipe.write_text(
            "[model]\nfeat_dim = 16\nembed_dim = 16\nprofile_dim = 16\n"
            "isd_hidden = 16\nnum_pseudo = 0\njsd_blocks = 1\n"
            "[stage warmup]\nnum_pseudo = 0\nprofile_source = oracle\nsteps = 3\n"
            "chunk_frames = 100\n")
        out = str(tmp_path / "rec")
        rc = run_cli("train", "--corpus", corpus_dir, "--out", out,
                     "--recipe", str(recipe), "--seed", "1")
        assert rc == 0
        assert any(f.startswith("stage1-warmup") for f in os.listdir(out))

    def test_bad_mix_name(self, corpus_dir, tmp_path):
        rc = run_cli("train", "--corpus", corpus_dir, "--out", str(tmp_path / "x"),
                     "--profile-mix", "config9")
        assert rc == cli.EXIT_CONFIG


class TestInferAndScore:
    def test_infer_with_firstpass_dir(self, corpus_dir, trained_model_dir, tmp_path):
        fp_dir = str(tmp_path / "fp")
        assert run_cli("firstpass", "--corpus", corpus_dir, "--out", fp_dir,
                       "--method", "ahc", "--threshold", "0.9") == 0
        hyp_dir = str(tmp_path / "hyp")
        rc = run_cli("infer", "--corpus", corpus_dir,
                     "--model", os.path.join(trained_model_dir, "stage1-train"),
                     "--profiles", fp_dir, "--out", hyp_dir,
                     "--clust-psd-spk", "--chunk-seconds", "10")
        assert rc == 0
        assert os.path.exists(os.path.join(hyp_dir, "conv0000.rttm"))
        sidecar = open(os.path.join(hyp_dir, "conv0000.pseudo.tsv")).read()
        assert sidecar.splitlines()[0] == "chunk\tpseudo\tactive_seconds\tlabel"

    def test_clust_psd_spk_flag_toggles_labels(self, corpus_dir, trained_model_dir, tmp_path):
        for flag, marker in (("--clust-psd-spk", "pseudo-g"),
                             ("--no-clust-psd-spk", "pseudo-")):
            hyp_dir = str(tmp_path / f"hyp{marker.strip('-')}")
            rc = run_cli("infer", "--corpus", corpus_dir,
                         "--model", os.path.join(trained_model_dir, "stage1-train"),
                         "--out", hyp_dir, flag, "--chunk-seconds", "10",
                         "--method", "ahc", "--threshold", "0.9")
            assert rc == 0
            text = open(os.path.join(tmp_path / f"hyp{marker.strip('-')}", "conv0000.pseudo.tsv")).read()
            body = text.splitlines()[1:]
            if body:
                assert all(marker in line for line in body)

    def test_score_identical_is_zero(self, corpus_dir, capsys):
        ref = os.path.join(corpus_dir, "rttm")
        rc = run_cli("score", "--ref", ref, "--hyp", ref, "--collar", "0.25")
        assert rc == 0
        out = capsys.readouterr().out
        assert "| 0.00 | 0.00 | 0.00 | 0.00 |" in out
        assert "| ID | System | Profiles | Clust-psd-spk | DER | miss | fa | sc |" in out

    def test_score_missing_hyp(self, corpus_dir, tmp_path):
        rc = run_cli("score", "--ref", os.path.join(corpus_dir, "rttm"),
                     "--hyp", str(tmp_path / "void"))
        assert rc == cli.EXIT_DATA

    def test_infer_missing_model(self, corpus_dir, tmp_path):
        rc = run_cli("infer", "--corpus", corpus_dir,
                     "--model", str(tmp_path / "ghost"),
                     "--out", str(tmp_path / "h"))
        assert rc == cli.EXIT_DATA


class TestExperimentCli:
    def test_print_config(self, capsys):
        rc = run_cli("experiment", "--out", "/tmp/unused", "--print-config")
        assert rc == 0
        out = capsys.readouterr().out
        assert "eval_conversations" in out
